//! Seeded stream derivation and deterministic example sampling.
//!
//! Every random choice in a run comes from a ChaCha stream whose seed is a
//! hash of the run seed, a domain tag, and an integer key. No RNG state is
//! carried between calls, so a resumed run draws exactly what an
//! uninterrupted one would.

use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::EngineError;
use crate::model::{EvalSubsetSize, Example};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Mixes a run seed, a domain tag and a key into a stream seed.
pub fn derive_seed(run_seed: u64, domain: &str, key: &[u64]) -> u64 {
    let mut h = splitmix64(run_seed ^ fnv1a(domain.as_bytes()));
    for (i, k) in key.iter().enumerate() {
        h = splitmix64(h ^ k.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN_GAMMA)));
    }
    h
}

pub fn stream_rng(run_seed: u64, domain: &str, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(run_seed, domain, key))
}

/// Draws `k` distinct examples using an explicit stream seed. The pool is
/// ordered by id first, so file order never changes the draw.
pub fn sample_with_seed(examples: &[Example], k: usize, stream_seed: u64) -> Result<Vec<Example>, EngineError> {
    if k > examples.len() {
        return Err(EngineError::Precondition(alloc::format!(
            "cannot draw {k} examples from a pool of {}",
            examples.len()
        )));
    }
    let mut pool: Vec<&Example> = examples.iter().collect();
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    Ok(index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

/// Draws `k` distinct examples from the stream named by `stream_key`.
pub fn sample_examples(
    examples: &[Example],
    k: usize,
    run_seed: u64,
    stream_key: &[u64],
) -> Result<Vec<Example>, EngineError> {
    sample_with_seed(examples, k, derive_seed(run_seed, "examples", stream_key))
}

/// The evaluation subset used for every score in a run. `All` keeps file
/// order; a count keeps the selected examples in file order too.
pub fn freeze_eval_subset(
    examples: &[Example],
    size: EvalSubsetSize,
    run_seed: u64,
) -> Result<Vec<Example>, EngineError> {
    match size {
        EvalSubsetSize::All => Ok(examples.to_vec()),
        EvalSubsetSize::Count(n) => {
            let picked = sample_with_seed(examples, n, derive_seed(run_seed, "eval-subset", &[]))?;
            let ids: alloc::collections::BTreeSet<&str> = picked.iter().map(|e| e.id.as_str()).collect();
            Ok(examples.iter().filter(|e| ids.contains(e.id.as_str())).cloned().collect())
        }
    }
}
