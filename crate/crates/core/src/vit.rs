//! Spatial encoder: the gaze sequence is segmented into temporal patch
//! tokens, embedded with learned positional offsets, and passed through
//! pre-norm multi-head self-attention blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardCtx;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Fixation rows per patch token.
    pub window: usize,
    /// Per-fixation input dimension.
    pub input_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// Positional-table capacity in patches.
    pub max_patches: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            window: 4,
            input_dim: 4,
            d_model: 64,
            heads: 4,
            layers: 2,
            mlp_ratio: 4,
            dropout: 0.1,
            max_patches: 64,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("window, heads and layers must be >= 1".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

pub struct AttentionLayer<S: Scalar> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub mlp_w1: Tensor<S>,
    pub mlp_b1: Tensor<S>,
    pub mlp_w2: Tensor<S>,
    pub mlp_b2: Tensor<S>,
}

pub struct ViTParams<S: Scalar> {
    pub config: ViTConfig,
    pub e_proj: Tensor<S>,
    pub e_pos: Tensor<S>,
    pub layers: Vec<AttentionLayer<S>>,
    pub final_gain: Tensor<S>,
    pub final_bias: Tensor<S>,
}

const INIT_STD: f64 = 0.02;

fn gain<S: Scalar>(d: usize) -> Tensor<S> {
    let t = Tensor::ones(1, d);
    Tensor::param(1, d, t.data()).unwrap()
}

fn zeros_param<S: Scalar>(rows: usize, cols: usize) -> Tensor<S> {
    Tensor::param(rows, cols, vec![S::zero(); rows * cols]).unwrap()
}

impl<S: Scalar> ViTParams<S> {
    pub fn init<R: Rng + ?Sized>(config: ViTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = S::from_f64(INIT_STD);
        let layers = (0..config.layers)
            .map(|_| AttentionLayer {
                wq: Tensor::randn(d, d, std, rng),
                wk: Tensor::randn(d, d, std, rng),
                wv: Tensor::randn(d, d, std, rng),
                wo: Tensor::randn(d, d, std, rng),
                ln1_gain: gain(d),
                ln1_bias: zeros_param(1, d),
                ln2_gain: gain(d),
                ln2_bias: zeros_param(1, d),
                mlp_w1: Tensor::randn(d, d * config.mlp_ratio, std, rng),
                mlp_b1: zeros_param(1, d * config.mlp_ratio),
                mlp_w2: Tensor::randn(d * config.mlp_ratio, d, std, rng),
                mlp_b2: zeros_param(1, d),
            })
            .collect();
        Ok(ViTParams {
            config,
            e_proj: Tensor::randn(config.window * config.input_dim, d, std, rng),
            e_pos: zeros_param(config.max_patches, d),
            layers,
            final_gain: gain(d),
            final_bias: zeros_param(1, d),
        })
    }

    pub fn params(&self) -> ParamSet<S> {
        let mut ps = ParamSet::new();
        ps.push("e_proj", self.e_proj.clone());
        ps.push("e_pos", self.e_pos.clone());
        for (i, l) in self.layers.iter().enumerate() {
            ps.push(format!("layer{i}.wq"), l.wq.clone());
            ps.push(format!("layer{i}.wk"), l.wk.clone());
            ps.push(format!("layer{i}.wv"), l.wv.clone());
            ps.push(format!("layer{i}.wo"), l.wo.clone());
            ps.push(format!("layer{i}.ln1_gain"), l.ln1_gain.clone());
            ps.push(format!("layer{i}.ln1_bias"), l.ln1_bias.clone());
            ps.push(format!("layer{i}.ln2_gain"), l.ln2_gain.clone());
            ps.push(format!("layer{i}.ln2_bias"), l.ln2_bias.clone());
            ps.push(format!("layer{i}.mlp_w1"), l.mlp_w1.clone());
            ps.push(format!("layer{i}.mlp_b1"), l.mlp_b1.clone());
            ps.push(format!("layer{i}.mlp_w2"), l.mlp_w2.clone());
            ps.push(format!("layer{i}.mlp_b2"), l.mlp_b2.clone());
        }
        ps.push("final_gain", self.final_gain.clone());
        ps.push("final_bias", self.final_bias.clone());
        ps
    }
}

/// Split a T×d sequence into consecutive non-overlapping windows of `w`
/// rows, flattened row-major; the final partial window is zero-padded.
pub fn patchify<S: Scalar>(x: &Tensor<S>, w: usize) -> Result<Tensor<S>> {
    let (t, d) = x.shape();
    if w == 0 {
        return Err(Error::Config("patch window must be >= 1".into()));
    }
    let n = t.div_ceil(w);
    if t == n * w {
        // row-major reshape is free of data movement
        let data = x.data();
        return Tensor::new(n, w * d, data);
    }
    let mut data = vec![S::zero(); n * w * d];
    data[..t * d].copy_from_slice(&x.data());
    Tensor::new(n, w * d, data)
}

/// Eq.-style embedding: project patches and add positional rows.
pub fn embed<S: Scalar>(patches: &Tensor<S>, params: &ViTParams<S>) -> Result<Tensor<S>> {
    let n = patches.rows();
    let capacity = params.e_pos.rows();
    if n > capacity {
        return Err(Error::SequenceTooLong { len: n, capacity });
    }
    patches
        .matmul(&params.e_proj)?
        .add(&params.e_pos.slice_rows(0, n)?)
}

/// Multi-head scaled dot-product attention over a normalized input.
/// Returns the combined head outputs (before the output projection) and
/// the per-head attention weight matrices.
pub fn multi_head_attention<S: Scalar>(
    a: &Tensor<S>,
    layer: &AttentionLayer<S>,
    heads: usize,
) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
    let d = a.cols();
    let dk = d / heads;
    let scale = S::from_f64(1.0 / (dk as f64).sqrt());
    let q = a.matmul(&layer.wq)?;
    let k = a.matmul(&layer.wk)?;
    let v = a.matmul(&layer.wv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dk, dk)?;
        let kh = k.slice_cols(h * dk, dk)?;
        let vh = v.slice_cols(h * dk, dk)?;
        let attn = qh.matmul(&kh.transpose())?.scale(scale).softmax_rows();
        outs.push(attn.matmul(&vh)?);
        weights.push(attn);
    }
    Ok((Tensor::concat_cols(&outs)?, weights))
}

/// One pre-norm block: `z + Attn(LN(z))` then `+ MLP(LN(·))`.
pub fn self_attention<S: Scalar>(
    z: &Tensor<S>,
    layer: &AttentionLayer<S>,
    config: &ViTConfig,
    ctx: &mut ForwardCtx,
) -> Result<Tensor<S>> {
    let a = z.layer_norm(&layer.ln1_gain, &layer.ln1_bias)?;
    let (heads_out, _) = multi_head_attention(&a, layer, config.heads)?;
    let attn_out =
        heads_out
            .matmul(&layer.wo)?
            .dropout(config.dropout, ctx.training, &mut ctx.rng)?;
    let z = z.add(&attn_out)?;
    let m = z.layer_norm(&layer.ln2_gain, &layer.ln2_bias)?;
    let hidden = m.matmul(&layer.mlp_w1)?.add(&layer.mlp_b1)?.relu();
    let mlp_out = hidden
        .matmul(&layer.mlp_w2)?
        .add(&layer.mlp_b2)?
        .dropout(config.dropout, ctx.training, &mut ctx.rng)?;
    z.add(&mlp_out)
}

/// Full spatial encoding: patchify → embed → attention blocks → final norm.
pub fn encode<S: Scalar>(
    x: &Tensor<S>,
    params: &ViTParams<S>,
    ctx: &mut ForwardCtx,
) -> Result<Tensor<S>> {
    let patches = patchify(x, params.config.window)?;
    let mut z = embed(&patches, params)?;
    for layer in &params.layers {
        z = self_attention(&z, layer, &params.config, ctx)?;
    }
    z.layer_norm(&params.final_gain, &params.final_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use approx::assert_relative_eq;

    type T = Tensor<f64>;

    fn small_config() -> ViTConfig {
        ViTConfig {
            window: 2,
            input_dim: 3,
            d_model: 8,
            heads: 2,
            layers: 2,
            mlp_ratio: 2,
            dropout: 0.0,
            max_patches: 16,
        }
    }

    #[test]
    fn patchify_shapes() {
        let x = T::new(4, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), (2, 6));
        // w = 1 is an identity reshape
        let p = patchify(&x, 1).unwrap();
        assert_eq!(p.shape(), (4, 3));
        assert_eq!(p.data(), x.data());
    }

    #[test]
    fn patchify_pads_partial_window() {
        let x = T::new(5, 3, (0..15).map(|v| v as f64).collect()).unwrap();
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), (3, 6));
        let last = p.data()[2 * 6..].to_vec();
        assert_eq!(&last[3..], &[0.0, 0.0, 0.0]);
        assert_eq!(&last[..3], &[12.0, 13.0, 14.0]);
    }

    #[test]
    fn embed_identity_projection() {
        let mut rng = StreamKey::root(1).child("vit").rng();
        let config = ViTConfig {
            window: 1,
            input_dim: 4,
            d_model: 4,
            heads: 2,
            layers: 1,
            mlp_ratio: 2,
            dropout: 0.0,
            max_patches: 8,
        };
        let params = ViTParams::<f64>::init(config, &mut rng).unwrap();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        params.e_proj.set_data(&eye);
        let patches = T::new(3, 4, (0..12).map(|v| v as f64 / 10.0).collect()).unwrap();
        let z = embed(&patches, &params).unwrap();
        assert_eq!(z.data(), patches.data()); // E_pos is zero-initialized

        let zero = T::zeros(3, 4);
        let z = embed(&zero, &params).unwrap();
        assert_eq!(z.data(), vec![0.0; 12]);
    }

    #[test]
    fn embed_rejects_overlong_sequence() {
        let mut rng = StreamKey::root(1).child("vit").rng();
        let params = ViTParams::<f64>::init(small_config(), &mut rng).unwrap();
        let patches = T::zeros(17, 6);
        assert!(matches!(
            embed(&patches, &params),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let mut rng = StreamKey::root(2).child("vit").rng();
        let params = ViTParams::<f64>::init(small_config(), &mut rng).unwrap();
        let a = T::randn(1, 8, 1.0, &mut rng).detach();
        let (_, weights) = multi_head_attention(&a, &params.layers[0], 2).unwrap();
        for w in weights {
            assert_eq!(w.data(), vec![1.0]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = StreamKey::root(3).child("vit").rng();
        let params = ViTParams::<f64>::init(small_config(), &mut rng).unwrap();
        let a = T::randn(5, 8, 2.0, &mut rng).detach();
        let (_, weights) = multi_head_attention(&a, &params.layers[0], 2).unwrap();
        for w in weights {
            for i in 0..5 {
                let sum: f64 = (0..5).map(|j| w.get(i, j)).sum();
                assert_relative_eq!(sum, 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn attention_matches_hand_oracle() {
        let mut rng = StreamKey::root(4).child("vit").rng();
        let config = ViTConfig {
            window: 1,
            input_dim: 4,
            d_model: 4,
            heads: 1,
            layers: 1,
            mlp_ratio: 2,
            dropout: 0.0,
            max_patches: 8,
        };
        let params = ViTParams::<f64>::init(config, &mut rng).unwrap();
        let a = T::randn(3, 4, 1.0, &mut rng).detach();
        let (_, weights) = multi_head_attention(&a, &params.layers[0], 1).unwrap();
        // hand-evaluated softmax(QKᵀ/√dk)
        let q = a.matmul(&params.layers[0].wq).unwrap().data();
        let k = a.matmul(&params.layers[0].wk).unwrap().data();
        let scale = 1.0 / 2.0;
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|p| q[i * 4 + p] * k[j * 4 + p]).sum::<f64>() * scale)
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..3 {
                assert_relative_eq!(weights[0].get(i, j), exps[j] / sum, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn residual_only_when_values_and_mlp_zero() {
        let mut rng = StreamKey::root(5).child("vit").rng();
        let params = ViTParams::<f64>::init(small_config(), &mut rng).unwrap();
        let layer = &params.layers[0];
        layer.wv.set_data(&vec![0.0; 64]);
        layer.mlp_w2.set_data(&vec![0.0; 16 * 8]);
        layer.mlp_b2.set_data(&vec![0.0; 8]);
        let z = T::randn(4, 8, 1.0, &mut rng).detach();
        let mut ctx = ForwardCtx::inference();
        let out = self_attention(&z, layer, &params.config, &mut ctx).unwrap();
        for (a, b) in out.data().iter().zip(z.data()) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn encode_deterministic_and_shaped() {
        let mut rng = StreamKey::root(6).child("vit").rng();
        let params = ViTParams::<f64>::init(small_config(), &mut rng).unwrap();
        let x = T::randn(7, 3, 1.0, &mut rng).detach();
        let mut ctx = ForwardCtx::inference();
        let h1 = encode(&x, &params, &mut ctx).unwrap();
        let h2 = encode(&x, &params, &mut ctx).unwrap();
        assert_eq!(h1.shape(), (4, 8)); // ceil(7/2) patches
        assert_eq!(h1.data(), h2.data());
        assert!(h1.is_finite());
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let mut rng = StreamKey::root(7).child("vit").rng();
        let mut config = small_config();
        config.window = 1; // one patch per row so permuting rows permutes patches
        let params = ViTParams::<f64>::init(config, &mut rng).unwrap();
        let x = T::randn(4, 3, 1.0, &mut rng).detach();
        let perm = [2usize, 0, 3, 1];
        let xd = x.data();
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| xd[i * 3..(i + 1) * 3].to_vec()).collect();
        let xp = T::new(4, 3, permuted).unwrap();
        let mut ctx = ForwardCtx::inference();
        let h = encode(&x, &params, &mut ctx).unwrap();
        let hp = encode(&xp, &params, &mut ctx).unwrap();
        for (out_row, &in_row) in perm.iter().enumerate() {
            for j in 0..8 {
                assert_relative_eq!(hp.get(out_row, j), h.get(in_row, j), epsilon = 1e-9);
            }
        }
    }
}
