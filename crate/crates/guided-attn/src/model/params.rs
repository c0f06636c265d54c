//! Named parameter store with a stable declaration order, stage-gated
//! layout, seeded initialization, and tape binding.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numcore::{Precision, Tape, Tensor};
use crate::phantom::mix_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamDef {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Training stage; each stage's layout extends the previous one.
pub type Stage = u8;

fn attention_defs(prefix: &str, d: usize, full: bool, out: &mut Vec<ParamDef>) {
    let mut push = |suffix: &str, shape: Vec<usize>| {
        out.push(ParamDef {
            name: format!("{prefix}.{suffix}"),
            shape,
        })
    };
    push("wq", vec![d, d]);
    push("bq", vec![d]);
    push("wk", vec![d, d]);
    push("bk", vec![d]);
    if full {
        push("wv", vec![d, d]);
        push("bv", vec![d]);
        push("wo", vec![d, d]);
        push("bo", vec![d]);
    }
}

fn block_defs(prefix: &str, d: usize, mlp_ratio: usize, out: &mut Vec<ParamDef>) {
    fn push(out: &mut Vec<ParamDef>, prefix: &str, suffix: &str, shape: Vec<usize>) {
        out.push(ParamDef {
            name: format!("{prefix}.{suffix}"),
            shape,
        })
    }
    push(out, prefix, "ln1.g", vec![d]);
    push(out, prefix, "ln1.b", vec![d]);
    attention_defs(&format!("{prefix}.attn"), d, true, out);
    push(out, prefix, "ln2.g", vec![d]);
    push(out, prefix, "ln2.b", vec![d]);
    push(out, prefix, "mlp.w1", vec![d, d * mlp_ratio]);
    push(out, prefix, "mlp.b1", vec![d * mlp_ratio]);
    push(out, prefix, "mlp.w2", vec![d * mlp_ratio, d]);
    push(out, prefix, "mlp.b2", vec![d]);
}

/// Declaration-ordered parameter layout for a stage. Stage 2 adds the
/// early pooling-attention module; stage 3 adds the clinical projector.
pub fn layout(cfg: &ModelConfig, stage: Stage) -> Vec<ParamDef> {
    assert!((1..=3).contains(&stage), "stage must be 1..=3");
    let e = &cfg.encoder;
    let mut defs = Vec::new();
    defs.push(ParamDef {
        name: "embed.w".into(),
        shape: vec![e.in_channels * e.patch_volume(), e.d_s],
    });
    defs.push(ParamDef {
        name: "embed.b".into(),
        shape: vec![e.d_s],
    });
    defs.push(ParamDef {
        name: "embed.pos".into(),
        shape: vec![e.n_tokens_early(), e.d_s],
    });
    for b in 0..e.blocks_per_stage {
        block_defs(&format!("s1.b{b}"), e.d_s, e.mlp_ratio, &mut defs);
    }
    defs.push(ParamDef {
        name: "merge.w".into(),
        shape: vec![8 * e.d_s, e.d_l],
    });
    defs.push(ParamDef {
        name: "merge.b".into(),
        shape: vec![e.d_l],
    });
    for b in 0..e.blocks_per_stage {
        block_defs(&format!("s2.b{b}"), e.d_l, e.mlp_ratio, &mut defs);
    }
    defs.push(ParamDef {
        name: "late.cls".into(),
        shape: vec![1, e.d_l],
    });
    attention_defs("late", e.d_l, true, &mut defs);
    defs.push(ParamDef {
        name: "head.w".into(),
        shape: vec![e.d_l, 2],
    });
    defs.push(ParamDef {
        name: "head.b".into(),
        shape: vec![2],
    });
    if stage >= 2 {
        defs.push(ParamDef {
            name: "early.cls".into(),
            shape: vec![1, e.d_s],
        });
        // the early module only shapes the attention map, so its value/out
        // projections never exist
        attention_defs("early", e.d_s, false, &mut defs);
    }
    if stage >= 3 {
        defs.push(ParamDef {
            name: "fc.w".into(),
            shape: vec![cfg.clinical_dim, e.d_l],
        });
        defs.push(ParamDef {
            name: "fc.b".into(),
            shape: vec![e.d_l],
        });
    }
    defs
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    let dist = Normal::<f64>::new(0.0, std).unwrap();
    (0..n)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// Seeded per-parameter initialization: fan-in-scaled truncated normal for
/// projection weights, small truncated normal for positional embeddings,
/// ones for layer-norm gains, zeros for biases and class tokens.
fn init_values(def: &ParamDef, seed: u64) -> Vec<f64> {
    let n = def.len();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, fnv1a(&def.name)));
    let leaf = def.name.rsplit('.').next().unwrap();
    match leaf {
        "g" => vec![1.0; n],
        "b" | "b1" | "b2" | "bq" | "bk" | "bv" | "bo" | "cls" => vec![0.0; n],
        "pos" => truncated_normal(&mut rng, 0.02, n),
        _ => {
            let fan_in = def.shape[0].max(1) as f64;
            truncated_normal(&mut rng, 1.0 / fan_in.sqrt(), n)
        }
    }
}

/// Parameter values in declaration order plus a name index.
#[derive(Clone)]
pub struct ParamStore {
    defs: Vec<ParamDef>,
    values: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    stage: Stage,
}

impl ParamStore {
    pub fn init(cfg: &ModelConfig, stage: Stage, seed: u64) -> ParamStore {
        Self::from_defs(layout(cfg, stage), stage, seed)
    }

    /// Build a store from an arbitrary layout (used by the MLP baselines).
    /// Initialization follows the same name-keyed rules.
    pub fn from_defs(defs: Vec<ParamDef>, stage: Stage, seed: u64) -> ParamStore {
        let values = defs.iter().map(|d| init_values(d, seed)).collect();
        let index = defs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.name.clone(), i))
            .collect();
        ParamStore {
            defs,
            values,
            index,
            stage,
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn defs(&self) -> &[ParamDef] {
        &self.defs
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.values[self.index[name]]
    }

    pub fn set(&mut self, name: &str, v: Vec<f64>) {
        let i = self.index[name];
        assert_eq!(v.len(), self.defs[i].len());
        self.values[i] = v;
    }

    pub fn total_len(&self) -> usize {
        self.defs.iter().map(|d| d.len()).sum()
    }

    /// Promote to a later stage: shared parameters are carried over bitwise,
    /// newly introduced modules are freshly initialized from the seed.
    pub fn promote(&self, cfg: &ModelConfig, stage: Stage, seed: u64) -> ParamStore {
        assert!(stage >= self.stage, "cannot demote a parameter store");
        let defs = layout(cfg, stage);
        let values: Vec<Vec<f64>> = defs
            .iter()
            .map(|d| match self.index.get(&d.name) {
                Some(&i) => {
                    assert_eq!(self.defs[i].shape, d.shape, "shape drift for {}", d.name);
                    self.values[i].clone()
                }
                None => init_values(d, seed),
            })
            .collect();
        let index = defs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.name.clone(), i))
            .collect();
        ParamStore {
            defs,
            values,
            index,
            stage,
        }
    }

    /// Flat concatenation in declaration order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for v in &self.values {
            out.extend_from_slice(v);
        }
        out
    }

    pub fn from_flat(cfg: &ModelConfig, stage: Stage, flat: &[f64]) -> Result<ParamStore> {
        let defs = layout(cfg, stage);
        let expected: usize = defs.iter().map(|d| d.len()).sum();
        if flat.len() != expected {
            return Err(Error::Data(format!(
                "parameter-count mismatch: layout for stage {} holds {} values, blob has {}",
                stage,
                expected,
                flat.len()
            )));
        }
        let mut values = Vec::with_capacity(defs.len());
        let mut off = 0;
        for d in &defs {
            values.push(flat[off..off + d.len()].to_vec());
            off += d.len();
        }
        let index = defs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.name.clone(), i))
            .collect();
        Ok(ParamStore {
            defs,
            values,
            index,
            stage,
        })
    }
}

/// Parameters bound to a tape (trainable) or as constants (evaluation).
pub struct BoundParams {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {:?}", name))]
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

impl ParamStore {
    /// Bind every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &Tape, precision: Precision) -> BoundParams {
        let tensors = self
            .defs
            .iter()
            .zip(&self.values)
            .map(|(d, v)| tape.leaf(d.shape.clone(), v.clone(), precision))
            .collect();
        BoundParams {
            tensors,
            index: self.index.clone(),
        }
    }

    /// Bind as untracked constants (shared data, no copies).
    pub fn bind_const(&self, precision: Precision) -> BoundParams {
        let tensors = self
            .defs
            .iter()
            .zip(&self.values)
            .map(|(d, v)| Tensor::constant(d.shape.clone(), v.clone(), precision))
            .collect();
        BoundParams {
            tensors,
            index: self.index.clone(),
        }
    }

    /// Quantize every value through f32, matching what a checkpoint
    /// round-trip would produce.
    pub fn quantize_f32(&mut self) {
        for v in self.values.iter_mut() {
            for x in v.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}
