//! Finite-difference gradient verification.
//!
//! Compares the analytic reverse-mode gradient of a scalar loss against
//! central differences, parameter block by parameter block. Intended to run
//! in double precision with step 1e-3.

use crate::error::Result;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
}

pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Run a gradient check. `forward` must rebuild the graph from the current
/// parameter values on every call and return the scalar loss.
pub fn grad_check<S, F>(params: &ParamSet<S>, step: f64, mut forward: F) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut() -> Result<Tensor<S>>,
{
    params.zero_grad();
    let loss = forward()?;
    loss.backward()?;
    let analytic: Vec<Vec<S>> = params
        .iter()
        .map(|(_, t)| t.grad().unwrap_or_else(|| vec![S::zero(); t.len()]))
        .collect();

    let h = S::from_f64(step);
    let two_h = 2.0 * step;
    let mut blocks = Vec::new();
    for (idx, (name, t)) in params.iter().enumerate() {
        let mut max_err = 0.0f64;
        for i in 0..t.len() {
            t.nudge(i, h);
            let up = forward()?.item().to_f64_lossy();
            t.nudge(i, -(h + h));
            let down = forward()?.item().to_f64_lossy();
            t.nudge(i, h);
            let numeric = (up - down) / two_h;
            let err = rel_error(analytic[idx][i].to_f64_lossy(), numeric);
            max_err = max_err.max(err);
        }
        blocks.push(BlockReport {
            name: name.to_string(),
            max_rel_error: max_err,
        });
    }
    Ok(GradCheckReport { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    #[test]
    fn linear_layer_passes_tightly() {
        let mut rng = StreamKey::root(5).child("gc-linear").rng();
        let w = Tensor::<f64>::randn(3, 2, 0.5, &mut rng);
        let b = Tensor::<f64>::randn(1, 2, 0.5, &mut rng);
        let x = Tensor::<f64>::randn(4, 3, 1.0, &mut rng).detach();
        let mut ps = ParamSet::new();
        ps.push("w", w.clone());
        ps.push("b", b.clone());
        let report = grad_check(&ps, 1e-3, || {
            Ok(x.matmul(&w)?.add(&b)?.mean_all())
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{}", report.max_rel_error());
    }

    #[test]
    fn two_layer_mlp_passes() {
        let mut rng = StreamKey::root(5).child("gc-mlp").rng();
        let w1 = Tensor::<f64>::randn(3, 5, 0.5, &mut rng);
        let b1 = Tensor::<f64>::randn(1, 5, 0.5, &mut rng);
        let w2 = Tensor::<f64>::randn(5, 1, 0.5, &mut rng);
        let x = Tensor::<f64>::randn(6, 3, 1.0, &mut rng).detach();
        let mut ps = ParamSet::new();
        ps.push("w1", w1.clone());
        ps.push("b1", b1.clone());
        ps.push("w2", w2.clone());
        let report = grad_check(&ps, 1e-3, || {
            let h = x.matmul(&w1)?.add(&b1)?.tanh_act();
            let out = h.matmul(&w2)?;
            Ok(out.mul(&out)?.mean_all())
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{}", report.max_rel_error());
    }
}
