//! The imaging network: strided patch embedding with learned positional
//! embeddings, two transformer stages separated by a strided 2x merge,
//! class-token pooling attention over early tokens (supervised attention
//! map) and over late tokens (classification path, clinically modulated in
//! stage 3), and the linear head.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::BoundParams;
use crate::numcore::{
    add, add_bias, concat_cols, div_by_scalar, gather, gelu, layer_norm, matmul, mean_axis0,
    resample_trilinear, scale, slice_cols, softmax, sum_all, transpose, Tensor,
};

const LN_EPS: f64 = 1e-5;

/// Early and late token sequences (depth-major flattening) with their grid
/// extents.
pub struct FeatureMaps {
    /// `[N_s, d_s]`
    pub early: Tensor,
    pub grid_early: (usize, usize, usize),
    /// `[N_l, d_l]`
    pub late: Tensor,
    pub grid_late: (usize, usize, usize),
}

/// Per-head class-token attention weights `[n_h, N_s]` and the head-averaged
/// map resampled to input resolution, renormalized to unit sum `[1, D, H, W]`.
pub struct AttentionArtifacts {
    pub head_weights: Tensor,
    pub map: Tensor,
}

pub struct ForwardOut {
    /// `[1, 2]` classification logits.
    pub logits: Tensor,
    /// Softmax probabilities (non-responder, responder).
    pub probs: [f64; 2],
    /// Pooled late representation `[1, d_l]`.
    pub z_cls: Tensor,
    /// Present for stages >= 2.
    pub attention: Option<AttentionArtifacts>,
}

pub struct Model {
    pub cfg: ModelConfig,
    patch_index: Arc<Vec<usize>>,
    merge_index: Arc<Vec<usize>>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let e = &cfg.encoder;
        let (c, (d, h, w)) = (e.in_channels, e.in_extents);
        let (pd, ph, pw) = e.patch;
        let (gd, gh, gw) = e.grid_early();
        // token t, column (c, pz, py, px) -> flat voxel index
        let mut patch_index = Vec::with_capacity(e.n_tokens_early() * c * e.patch_volume());
        for tz in 0..gd {
            for ty in 0..gh {
                for tx in 0..gw {
                    for ci in 0..c {
                        for pz in 0..pd {
                            for py in 0..ph {
                                for px in 0..pw {
                                    let (z, y, x) = (tz * pd + pz, ty * ph + py, tx * pw + px);
                                    patch_index.push(ci * d * h * w + (z * h + y) * w + x);
                                }
                            }
                        }
                    }
                }
            }
        }
        // late token l, column (dz, dy, dx, feature) -> flat index into [N_s, d_s]
        let (md, mh, mw) = e.grid_late();
        let mut merge_index = Vec::with_capacity(e.n_tokens_late() * 8 * e.d_s);
        for mz in 0..md {
            for my in 0..mh {
                for mx in 0..mw {
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let t = ((2 * mz + dz) * gh + (2 * my + dy)) * gw + (2 * mx + dx);
                                for f in 0..e.d_s {
                                    merge_index.push(t * e.d_s + f);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Model {
            cfg,
            patch_index: Arc::new(patch_index),
            merge_index: Arc::new(merge_index),
        })
    }

    /// Encoder: patch embed + positional embeddings, stage-1 blocks, strided
    /// merge, stage-2 blocks.
    pub fn encode(&self, p: &BoundParams, volume: &Tensor) -> Result<FeatureMaps> {
        let e = &self.cfg.encoder;
        let (d, h, w) = e.in_extents;
        assert_eq!(
            volume.shape(),
            &[e.in_channels, d, h, w],
            "volume shape does not match the encoder config"
        );
        let patches = gather(
            volume,
            Arc::clone(&self.patch_index),
            vec![e.n_tokens_early(), e.in_channels * e.patch_volume()],
        );
        let mut tokens = add(
            &add_bias(&matmul(&patches, p.get("embed.w")), p.get("embed.b")),
            p.get("embed.pos"),
        );
        for b in 0..e.blocks_per_stage {
            tokens = encoder_block(&tokens, p, &format!("s1.b{b}"), e.n_heads)?;
        }
        let early = tokens.clone();
        let merged = gather(
            &tokens,
            Arc::clone(&self.merge_index),
            vec![e.n_tokens_late(), 8 * e.d_s],
        );
        let mut late = add_bias(&matmul(&merged, p.get("merge.w")), p.get("merge.b"));
        for b in 0..e.blocks_per_stage {
            late = encoder_block(&late, p, &format!("s2.b{b}"), e.n_heads)?;
        }
        Ok(FeatureMaps {
            early,
            grid_early: e.grid_early(),
            late,
            grid_late: e.grid_late(),
        })
    }

    /// Early pooling attention: per-head class-token weights over early
    /// tokens, head-averaged, reshaped to the token grid, resampled to the
    /// input resolution, renormalized to unit sum.
    pub fn early_attention(&self, p: &BoundParams, early_tokens: &Tensor) -> Result<AttentionArtifacts> {
        let e = &self.cfg.encoder;
        let weights = pool_attention_weights(
            p.get("early.cls"),
            early_tokens,
            p.get("early.wq"),
            p.get("early.bq"),
            p.get("early.wk"),
            p.get("early.bk"),
            e.n_heads,
        )?;
        let head_weights = stack_rows(&weights);
        let mean = mean_axis0(&head_weights);
        let (gd, gh, gw) = e.grid_early();
        let grid_map = mean.reshape(vec![gd, gh, gw]);
        let resampled = resample_trilinear(&grid_map, e.in_extents)?;
        let total = sum_all(&resampled);
        let map = div_by_scalar(&resampled, &total);
        let (d, h, w) = e.in_extents;
        Ok(AttentionArtifacts {
            head_weights,
            map: map.reshape(vec![1, d, h, w]),
        })
    }

    /// Late pooling attention per the class-token MHA; `delta_c` (stage 3)
    /// shifts the query token.
    pub fn late_attention(
        &self,
        p: &BoundParams,
        late_tokens: &Tensor,
        delta_c: Option<&Tensor>,
    ) -> Result<Tensor> {
        let e = &self.cfg.encoder;
        let query = match delta_c {
            Some(dc) => {
                if dc.shape() != [1, e.d_l] {
                    return Err(Error::Usage(format!(
                        "clinical modulation shape {:?}, expected [1, {}]",
                        dc.shape(),
                        e.d_l
                    )));
                }
                add(p.get("late.cls"), dc)
            }
            None => p.get("late.cls").clone(),
        };
        pool_attention(
            &query,
            late_tokens,
            p.get("late.wq"),
            p.get("late.bq"),
            p.get("late.wk"),
            p.get("late.bk"),
            p.get("late.wv"),
            p.get("late.bv"),
            p.get("late.wo"),
            p.get("late.bo"),
            e.n_heads,
        )
    }

    /// Linear embedding of the encoded clinical vector, `[1, K] -> [1, d_l]`.
    pub fn project_clinical(&self, p: &BoundParams, x_c: &Tensor) -> Result<Tensor> {
        if x_c.numel() != self.cfg.clinical_dim {
            return Err(Error::Usage(format!(
                "clinical vector length {} does not match K={}",
                x_c.numel(),
                self.cfg.clinical_dim
            )));
        }
        let row = x_c.reshape(vec![1, self.cfg.clinical_dim]);
        Ok(add_bias(&matmul(&row, p.get("fc.w")), p.get("fc.b")))
    }

    /// Stage-parameterized forward pass. Classification always flows through
    /// the late attention and head; the early branch only defines the
    /// attention map (stages >= 2); stage 3 adds clinical modulation.
    pub fn forward(
        &self,
        p: &BoundParams,
        volume: &Tensor,
        clinical: Option<&Tensor>,
        stage: u8,
    ) -> Result<ForwardOut> {
        assert!((1..=3).contains(&stage), "stage must be 1..=3");
        let features = self.encode(p, volume)?;
        let attention = if stage >= 2 {
            Some(self.early_attention(p, &features.early)?)
        } else {
            None
        };
        let delta = if stage >= 3 {
            let x_c = clinical.ok_or_else(|| {
                Error::Usage("stage 3 forward requires a clinical vector".into())
            })?;
            Some(self.project_clinical(p, x_c)?)
        } else {
            None
        };
        let z_cls = self.late_attention(p, &features.late, delta.as_ref())?;
        let logits = add_bias(&matmul(&z_cls, p.get("head.w")), p.get("head.b"));
        let probs_t = softmax(&logits.detach(), 1)?;
        Ok(ForwardOut {
            probs: [probs_t.data()[0], probs_t.data()[1]],
            logits,
            z_cls,
            attention,
        })
    }
}

/// Pre-norm transformer block: x + MHA(LN(x)), then x + MLP(LN(x)).
fn encoder_block(x: &Tensor, p: &BoundParams, prefix: &str, n_heads: usize) -> Result<Tensor> {
    let normed = layer_norm(
        x,
        p.get(&format!("{prefix}.ln1.g")),
        p.get(&format!("{prefix}.ln1.b")),
        LN_EPS,
    );
    let attn = self_attention(&normed, p, &format!("{prefix}.attn"), n_heads)?;
    let x = add(x, &attn);
    let normed2 = layer_norm(
        &x,
        p.get(&format!("{prefix}.ln2.g")),
        p.get(&format!("{prefix}.ln2.b")),
        LN_EPS,
    );
    let hidden = gelu(&add_bias(
        &matmul(&normed2, p.get(&format!("{prefix}.mlp.w1"))),
        p.get(&format!("{prefix}.mlp.b1")),
    ));
    let mlp = add_bias(
        &matmul(&hidden, p.get(&format!("{prefix}.mlp.w2"))),
        p.get(&format!("{prefix}.mlp.b2")),
    );
    Ok(add(&x, &mlp))
}

fn self_attention(x: &Tensor, p: &BoundParams, prefix: &str, n_heads: usize) -> Result<Tensor> {
    let d = x.shape()[1];
    let dk = d / n_heads;
    let q = add_bias(&matmul(x, p.get(&format!("{prefix}.wq"))), p.get(&format!("{prefix}.bq")));
    let k = add_bias(&matmul(x, p.get(&format!("{prefix}.wk"))), p.get(&format!("{prefix}.bk")));
    let v = add_bias(&matmul(x, p.get(&format!("{prefix}.wv"))), p.get(&format!("{prefix}.bv")));
    let mut heads = Vec::with_capacity(n_heads);
    for hh in 0..n_heads {
        let qh = slice_cols(&q, hh * dk, dk);
        let kh = slice_cols(&k, hh * dk, dk);
        let vh = slice_cols(&v, hh * dk, dk);
        let scores = scale(&matmul(&qh, &transpose(&kh)), 1.0 / (dk as f64).sqrt());
        let w = softmax(&scores, 1)?;
        heads.push(matmul(&w, &vh));
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let cat = concat_cols(&refs);
    Ok(add_bias(
        &matmul(&cat, p.get(&format!("{prefix}.wo"))),
        p.get(&format!("{prefix}.bo")),
    ))
}

/// Per-head attention weight rows of a class-token query over a token
/// sequence: `n_heads` tensors of shape `[1, N]`.
fn pool_attention_weights(
    query: &Tensor,
    tokens: &Tensor,
    wq: &Tensor,
    bq: &Tensor,
    wk: &Tensor,
    bk: &Tensor,
    n_heads: usize,
) -> Result<Vec<Tensor>> {
    let d = tokens.shape()[1];
    let dk = d / n_heads;
    let q = add_bias(&matmul(query, wq), bq);
    let k = add_bias(&matmul(tokens, wk), bk);
    let mut weights = Vec::with_capacity(n_heads);
    for hh in 0..n_heads {
        let qh = slice_cols(&q, hh * dk, dk);
        let kh = slice_cols(&k, hh * dk, dk);
        let scores = scale(&matmul(&qh, &transpose(&kh)), 1.0 / (dk as f64).sqrt());
        weights.push(softmax(&scores, 1)?);
    }
    Ok(weights)
}

/// Stack `[1, N]` rows into `[R, N]`.
fn stack_rows(rows: &[Tensor]) -> Tensor {
    let cols: Vec<Tensor> = rows.iter().map(transpose).collect();
    let refs: Vec<&Tensor> = cols.iter().collect();
    transpose(&concat_cols(&refs))
}

/// Full single-query multi-head attention: `MHA(query, tokens, tokens)`.
fn pool_attention(
    query: &Tensor,
    tokens: &Tensor,
    wq: &Tensor,
    bq: &Tensor,
    wk: &Tensor,
    bk: &Tensor,
    wv: &Tensor,
    bv: &Tensor,
    wo: &Tensor,
    bo: &Tensor,
    n_heads: usize,
) -> Result<Tensor> {
    let d = tokens.shape()[1];
    let dk = d / n_heads;
    let weights = pool_attention_weights(query, tokens, wq, bq, wk, bk, n_heads)?;
    let v = add_bias(&matmul(tokens, wv), bv);
    let mut outs = Vec::with_capacity(n_heads);
    for (hh, w) in weights.iter().enumerate() {
        let vh = slice_cols(&v, hh * dk, dk);
        outs.push(matmul(w, &vh));
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    Ok(add_bias(&matmul(&concat_cols(&refs), wo), bo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use crate::model::EncoderConfig;
    use crate::numcore::Precision;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                in_channels: 3,
                in_extents: (8, 8, 8),
                patch: (2, 2, 2),
                d_s: 8,
                d_l: 16,
                blocks_per_stage: 1,
                n_heads: 2,
                mlp_ratio: 2,
                seed: 5,
            },
            clinical_dim: 6,
        }
    }

    fn random_volume(cfg: &ModelConfig, seed: u64) -> Tensor {
        let e = &cfg.encoder;
        let (d, h, w) = e.in_extents;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..e.in_channels * d * h * w)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        Tensor::constant(vec![e.in_channels, d, h, w], data, Precision::F64)
    }

    #[test]
    fn encode_shapes_follow_patch_arithmetic() {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                in_extents: (16, 32, 32),
                patch: (2, 4, 4),
                ..micro_cfg().encoder
            },
            clinical_dim: 6,
        };
        let model = Model::new(cfg.clone()).unwrap();
        let store = ParamStore::init(&cfg, 1, 1);
        let p = store.bind_const(Precision::F64);
        let vol = random_volume(&cfg, 3);
        let f = model.encode(&p, &vol).unwrap();
        assert_eq!(f.grid_early, (8, 8, 8));
        assert_eq!(f.grid_late, (4, 4, 4));
        assert_eq!(f.early.shape(), &[512, 8]);
        assert_eq!(f.late.shape(), &[64, 16]);
    }

    #[test]
    fn zero_input_finite_and_deterministic() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone()).unwrap();
        let store = ParamStore::init(&cfg, 1, 9);
        let p = store.bind_const(Precision::F64);
        let e = &cfg.encoder;
        let zero = Tensor::zeros(
            vec![e.in_channels, e.in_extents.0, e.in_extents.1, e.in_extents.2],
            Precision::F64,
        );
        let f = model.encode(&p, &zero).unwrap();
        assert!(f.early.all_finite() && f.late.all_finite());
        let vol = random_volume(&cfg, 7);
        let a = model.encode(&p, &vol).unwrap();
        let b = model.encode(&p, &vol).unwrap();
        assert_eq!(a.early.data(), b.early.data());
        assert_eq!(a.late.data(), b.late.data());
    }

    #[test]
    fn identical_tokens_give_uniform_early_attention() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone()).unwrap();
        let store = ParamStore::init(&cfg, 2, 1);
        let p = store.bind_const(Precision::F64);
        let n = cfg.encoder.n_tokens_early();
        let row: Vec<f64> = (0..cfg.encoder.d_s).map(|i| 0.3 * i as f64).collect();
        let mut data = Vec::new();
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let tokens = Tensor::constant(vec![n, cfg.encoder.d_s], data, Precision::F64);
        let art = model.early_attention(&p, &tokens).unwrap();
        for v in art.head_weights.data() {
            assert!((v - 1.0 / n as f64).abs() < 1e-12);
        }
        let s: f64 = art.map.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(art.map.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn attention_map_unit_sum_nonneg_random() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone()).unwrap();
        let store = ParamStore::init(&cfg, 2, 77);
        let p = store.bind_const(Precision::F64);
        for seed in 0..20 {
            let vol = random_volume(&cfg, 1000 + seed);
            let f = model.encode(&p, &vol).unwrap();
            let art = model.early_attention(&p, &f.early).unwrap();
            let s: f64 = art.map.data().iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "sum {}", s);
            assert!(art.map.data().iter().all(|&v| v >= 0.0));
            // per-head rows sum to 1
            let n = cfg.encoder.n_tokens_early();
            for hh in 0..cfg.encoder.n_heads {
                let row: f64 = art.head_weights.data()[hh * n..(hh + 1) * n].iter().sum();
                assert!((row - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn early_token_permutation_permutes_weights() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone()).unwrap();
        let store = ParamStore::init(&cfg, 2, 21);
        let p = store.bind_const(Precision::F64);
        let vol = random_volume(&cfg, 5);
        let f = model.encode(&p, &vol).unwrap();
        let n = cfg.encoder.n_tokens_early();
        let d = cfg.encoder.d_s;
        // reverse-permute tokens
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut pdata = vec![0.0; n * d];
        for (dst, &src) in perm.iter().enumerate() {
            pdata[dst * d..(dst + 1) * d].copy_from_slice(&f.early.data()[src * d..(src + 1) * d]);
        }
        let permuted = Tensor::constant(vec![n, d], pdata, Precision::F64);
        let a0 = model.early_attention(&p, &f.early).unwrap();
        let a1 = model.early_attention(&p, &permuted).unwrap();
        for hh in 0..cfg.encoder.n_heads {
            for (dst, &src) in perm.iter().enumerate() {
                let w0 = a0.head_weights.data()[hh * n + src];
                let w1 = a1.head_weights.data()[hh * n + dst];
                assert!((w0 - w1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn late_attention_two_token_closed_form() {
        // d_l = 2, one head, hand-set projections reproduce
        // softmax(q k^T / sqrt(d)) v
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                in_channels: 1,
                in_extents: (2, 2, 2),
                patch: (1, 1, 1),
                d_s: 2,
                d_l: 2,
                blocks_per_stage: 1,
                n_heads: 1,
                mlp_ratio: 1,
                seed: 0,
            },
            clinical_dim: 2,
        };
        let model = Model::new(cfg.clone()).unwrap();
        let mut store = ParamStore::init(&cfg, 1, 0);
        // identity projections, zero biases
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        for name in ["late.wq", "late.wk", "late.wv", "late.wo"] {
            store.set(name, eye.clone());
        }
        store.set("late.cls", vec![1.0, 0.5]);
        let p = store.bind_const(Precision::F64);
        let tokens = Tensor::constant(vec![2, 2], vec![0.2, -0.4, 0.9, 0.6], Precision::F64);
        let z = model.late_attention(&p, &tokens, None).unwrap();
        // oracle
        let q = [1.0, 0.5];
        let score = |t: &[f64]| (q[0] * t[0] + q[1] * t[1]) / (2.0f64).sqrt();
        let (s0, s1) = (score(&[0.2, -0.4]), score(&[0.9, 0.6]));
        let m = s0.max(s1);
        let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
        let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let expected = [0.2 * w0 + 0.9 * w1, -0.4 * w0 + 0.6 * w1];
        assert!((z.data()[0] - expected[0]).abs() < 1e-12);
        assert!((z.data()[1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn late_attention_invariant_under_token_permutation() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone()).unwrap();
        let store = ParamStore::init(&cfg, 1, 31);
        let p = store.bind_const(Precision::F64);
        let vol = random_volume(&cfg, 13);
        let f = model.encode(&p, &vol).unwrap();
        let n = cfg.encoder.n_tokens_late();
        let d = cfg.encoder.d_l;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut pdata = vec![0.0; n * d];
        for (dst, &src) in perm.iter().enumerate() {
            pdata[dst * d..(dst + 1) * d].copy_from_slice(&f.late.data()[src * d..(src + 1) * d]);
        }
        let permuted = Tensor::constant(vec![n, d], pdata, Precision::F64);
        let z0 = model.late_attention(&p, &f.late, None).unwrap();
        let z1 = model.late_attention(&p, &permuted, None).unwrap();
        for (a, b) in z0.data().iter().zip(z1.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_tokens_make_z_query_independent() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone()).unwrap();
        let mut store = ParamStore::init(&cfg, 3, 11);
        let n = cfg.encoder.n_tokens_late();
        let d = cfg.encoder.d_l;
        let row: Vec<f64> = (0..d).map(|i| 0.1 * (i as f64) - 0.4).collect();
        let mut data = Vec::new();
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let tokens = Tensor::constant(vec![n, d], data, Precision::F64);
        // two very different queries
        store.set("late.cls", vec![0.0; d]);
        let p0 = store.bind_const(Precision::F64);
        let z0 = model.late_attention(&p0, &tokens, None).unwrap();
        store.set("late.cls", (0..d).map(|i| i as f64).collect());
        let p1 = store.bind_const(Precision::F64);
        let z1 = model.late_attention(&p1, &tokens, None).unwrap();
        for (a, b) in z0.data().iter().zip(z1.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn clinical_projection_matches_matvec_oracle() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone()).unwrap();
        let mut store = ParamStore::init(&cfg, 3, 17);
        let k = cfg.clinical_dim;
        let d = cfg.encoder.d_l;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.set("fc.w", w.clone());
        store.set("fc.b", b.clone());
        let p = store.bind_const(Precision::F64);
        let x: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xt = Tensor::constant(vec![k], x.clone(), Precision::F64);
        let out = model.project_clinical(&p, &xt).unwrap();
        for j in 0..d {
            let mut s = b[j];
            for i in 0..k {
                s += x[i] * w[i * d + j];
            }
            assert!((out.data()[j] - s).abs() < 1e-12);
        }
        // zero weights and bias -> zero embedding
        store.set("fc.w", vec![0.0; k * d]);
        store.set("fc.b", vec![0.0; d]);
        let p = store.bind_const(Precision::F64);
        let out = model.project_clinical(&p, &xt).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        // wrong length rejected
        let bad = Tensor::constant(vec![k + 1], vec![0.0; k + 1], Precision::F64);
        assert!(model.project_clinical(&p, &bad).is_err());
    }

    #[test]
    fn stage_equivalences() {
        let cfg = micro_cfg();
        let model = Model::new(cfg.clone()).unwrap();
        let store2 = ParamStore::init(&cfg, 2, 23);
        let vol = random_volume(&cfg, 99);
        // stage 1 and stage 2 share the classification path
        let p1 = store2.bind_const(Precision::F64);
        let o1 = model.forward(&p1, &vol, None, 1).unwrap();
        let o2 = model.forward(&p1, &vol, None, 2).unwrap();
        assert_eq!(o1.logits.data(), o2.logits.data());
        assert!(o1.attention.is_none() && o2.attention.is_some());
        // stage 3 with zeroed projector equals stage 2
        let mut store3 = store2.promote(&cfg, 3, 23);
        store3.set("fc.w", vec![0.0; cfg.clinical_dim * cfg.encoder.d_l]);
        store3.set("fc.b", vec![0.0; cfg.encoder.d_l]);
        let p3 = store3.bind_const(Precision::F64);
        let xc = Tensor::constant(vec![cfg.clinical_dim], vec![0.5; cfg.clinical_dim], Precision::F64);
        let o3 = model.forward(&p3, &vol, Some(&xc), 3).unwrap();
        for (a, b) in o3.logits.data().iter().zip(o2.logits.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // stage 3 without clinical vector rejected
        assert!(model.forward(&p3, &vol, None, 3).is_err());
        // probabilities sum to 1
        for seed in 0..10 {
            let v = random_volume(&cfg, 500 + seed);
            let o = model.forward(&p1, &v, None, 1).unwrap();
            assert!((o.probs[0] + o.probs[1] - 1.0).abs() < 1e-9);
        }
    }
}
