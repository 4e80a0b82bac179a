use std::process::ExitCode;

fn main() -> ExitCode {
    distill::cli::install_interrupt_handler();
    let code = distill::cli::run(
        std::env::args_os(),
        &distill::cli::Options::default(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    );
    ExitCode::from(code as u8)
}
