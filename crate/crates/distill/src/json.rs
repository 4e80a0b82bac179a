//! JSON artifacts with sorted keys and a trailing newline, so identical
//! values always produce identical bytes.

use std::fs;
use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Pretty JSON with keys in sorted order.
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    // Value's map is a BTreeMap, which sorts struct fields too.
    let value = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&value)?;
    s.push('\n');
    Ok(s)
}

/// Writes through a temporary sibling and a rename so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", std::process::id()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> io::Result<()> {
    let s = to_canonical_string(value).map_err(io::Error::other)?;
    write_atomic(path, &s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{} is not valid: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn keys_come_out_sorted() {
        let mut m = HashMap::new();
        for k in ["zeta", "alpha", "mid"] {
            m.insert(k, 1);
        }
        let s = to_canonical_string(&m).unwrap();
        let a = s.find("alpha").unwrap();
        let b = s.find("mid").unwrap();
        let c = s.find("zeta").unwrap();
        assert!(a < b && b < c);
        assert!(s.ends_with("}\n"));
    }

    #[test]
    fn floats_survive_a_round_trip() {
        let x = [0.1 + 0.2, 1.0 / 3.0, 0.9484, f64::MIN_POSITIVE];
        let back: Vec<f64> = serde_json::from_str(&to_canonical_string(&x).unwrap()).unwrap();
        assert_eq!(back, x);
    }
}
