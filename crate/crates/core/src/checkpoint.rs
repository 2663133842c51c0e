//! Flat text checkpoint container.
//!
//! Layout (one record per line, UTF-8, LF):
//!
//! ```text
//! gazefusion-checkpoint v1
//! seed <u64>
//! precision <f32|f64>
//! hyper <single-line JSON>
//! param <name> <rows> <cols>
//! <hex bit patterns, space separated>
//! ...
//! end
//! ```
//!
//! Values are serialized as raw bit patterns, so save → load round-trips
//! bit-exactly and identical parameters produce identical files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

pub struct CheckpointHeader {
    pub seed: u64,
    pub precision: String,
    pub hyper_json: String,
}

fn precision_name<S: Scalar>() -> &'static str {
    if std::mem::size_of::<S>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

pub fn save<S: Scalar>(
    path: &Path,
    seed: u64,
    hyper_json: &str,
    params: &ParamSet<S>,
) -> Result<()> {
    debug_assert!(!hyper_json.contains('\n'));
    let mut out = String::new();
    out.push_str("gazefusion-checkpoint v1\n");
    out.push_str(&format!("seed {seed}\n"));
    out.push_str(&format!("precision {}\n", precision_name::<S>()));
    out.push_str(&format!("hyper {hyper_json}\n"));
    for (name, t) in params.iter() {
        let (r, c) = t.shape();
        out.push_str(&format!("param {name} {r} {c}\n"));
        let words: Vec<String> = t
            .data()
            .iter()
            .map(|v| format!("{:016x}", v.to_bits_u64()))
            .collect();
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    out.push_str("end\n");
    fs::write(path, out)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != "gazefusion-checkpoint v1" {
        return Err(Error::Checkpoint(format!("bad magic line: {magic:?}")));
    }
    let seed = lines
        .next()
        .and_then(|l| l.strip_prefix("seed "))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing seed line".into()))?;
    let precision = lines
        .next()
        .and_then(|l| l.strip_prefix("precision "))
        .ok_or_else(|| Error::Checkpoint("missing precision line".into()))?
        .to_string();
    let hyper_json = lines
        .next()
        .and_then(|l| l.strip_prefix("hyper "))
        .ok_or_else(|| Error::Checkpoint("missing hyper line".into()))?
        .to_string();
    Ok(CheckpointHeader {
        seed,
        precision,
        hyper_json,
    })
}

/// Load values into an already-constructed parameter set. Names, order and
/// shapes must match the saved file exactly.
pub fn load<S: Scalar>(path: &Path, params: &ParamSet<S>) -> Result<CheckpointHeader> {
    let header = read_header(path)?;
    if header.precision != precision_name::<S>() {
        return Err(Error::Checkpoint(format!(
            "precision mismatch: file is {}, expected {}",
            header.precision,
            precision_name::<S>()
        )));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().skip(4);
    for (name, t) in params.iter() {
        let head = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let mut parts = head.split_whitespace();
        if parts.next() != Some("param") {
            return Err(Error::Checkpoint(format!("expected param record, got {head:?}")));
        }
        let fname = parts.next().unwrap_or_default();
        let r: usize = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
        let c: usize = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
        if fname != name || (r, c) != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: file has {fname} {r}x{c}, model expects {name} {:?}",
                t.shape()
            )));
        }
        let values = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("truncated value line".into()))?;
        let data: Vec<S> = values
            .split_whitespace()
            .map(|w| {
                u64::from_str_radix(w, 16)
                    .map(S::from_bits_u64)
                    .map_err(|_| Error::Checkpoint(format!("bad hex word {w:?} in {name}")))
            })
            .collect::<Result<_>>()?;
        if data.len() != r * c {
            return Err(Error::Checkpoint(format!(
                "value count mismatch for {name}: {} vs {}",
                data.len(),
                r * c
            )));
        }
        t.set_data(&data);
    }
    if lines.next() != Some("end") {
        return Err(Error::Checkpoint("missing end marker".into()));
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use crate::tensor::Tensor;

    fn sample_params(seed: u64) -> ParamSet<f64> {
        let mut rng = StreamKey::root(seed).child("ckpt").rng();
        let mut ps = ParamSet::new();
        ps.push("layer.w", Tensor::randn(3, 4, 0.02, &mut rng));
        ps.push("layer.b", Tensor::randn(1, 4, 0.02, &mut rng));
        ps
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ps = sample_params(1);
        let before = ps.snapshot();
        save(&path, 42, "{\"d_model\":64}", &ps).unwrap();

        let fresh = sample_params(2);
        let header = load(&path, &fresh).unwrap();
        assert_eq!(header.seed, 42);
        assert_eq!(header.hyper_json, "{\"d_model\":64}");
        let after = fresh.snapshot();
        for (a, b) in before.iter().zip(&after) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn identical_params_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&p1, 7, "{}", &sample_params(9)).unwrap();
        save(&p2, 7, "{}", &sample_params(9)).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, 1, "{}", &sample_params(1)).unwrap();
        let mut wrong = ParamSet::new();
        wrong.push("layer.w", Tensor::<f64>::zeros(2, 2));
        wrong.push("layer.b", Tensor::<f64>::zeros(1, 4));
        assert!(load(&path, &wrong).is_err());
    }
}
