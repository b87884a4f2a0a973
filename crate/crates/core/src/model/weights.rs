use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::hyperparams::{HeadMode, Hyperparams, NormPlacement, PositionalMode};
use crate::tensor::Tensor;

/// Affine map `weight·x + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

/// Query/key/value projections of one attention head, each `D_h×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProjection<T> {
    pub query: T,
    pub key: T,
    pub value: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageWeights<T> {
    pub heads: Vec<HeadProjection<T>>,
    /// `D × (D_h·n_h)` map from stacked head outputs back to the embedding width.
    pub reproj: T,
    pub attn_norm: Option<Norm<T>>,
    pub ffn_hidden: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: Option<Norm<T>>,
}

/// Every trainable tensor of the network.
///
/// Generic so the same structure can hold tensors, tape variables, gradients
/// or optimizer moments; [`Weights::map`] walks the fields in a fixed order
/// that also defines checkpoint layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    /// Patch embedding, `D × w³c`.
    pub embed: T,
    /// Learned positional table, `D × N`; absent unless the mode is learned.
    pub positions: Option<T>,
    pub stages: Vec<StageWeights<T>>,
    pub seg_head: Option<Linear<T>>,
    pub pretrain_head: Option<Linear<T>>,
}

pub type ModelWeights = Weights<Tensor>;

impl<T> Weights<T> {
    /// Applies `f` to every tensor in canonical order, with its name.
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> Weights<U> {
        fn linear<'a, T, U>(f: &mut dyn FnMut(&str, &'a T) -> U, prefix: &str, l: &'a Linear<T>) -> Linear<U> {
            Linear {
                weight: f(&format!("{prefix}.weight"), &l.weight),
                bias: f(&format!("{prefix}.bias"), &l.bias),
            }
        }
        fn norm<'a, T, U>(f: &mut dyn FnMut(&str, &'a T) -> U, prefix: &str, n: &'a Norm<T>) -> Norm<U> {
            Norm {
                gamma: f(&format!("{prefix}.gamma"), &n.gamma),
                beta: f(&format!("{prefix}.beta"), &n.beta),
            }
        }
        let embed = f("embed", &self.embed);
        let positions = self.positions.as_ref().map(|p| f("positions", p));
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let heads = s
                    .heads
                    .iter()
                    .enumerate()
                    .map(|(i, h)| HeadProjection {
                        query: f(&format!("stage{k}.head{i}.query"), &h.query),
                        key: f(&format!("stage{k}.head{i}.key"), &h.key),
                        value: f(&format!("stage{k}.head{i}.value"), &h.value),
                    })
                    .collect();
                let reproj = f(&format!("stage{k}.reproj"), &s.reproj);
                let attn_norm = s
                    .attn_norm
                    .as_ref()
                    .map(|n| norm(&mut f, &format!("stage{k}.attn_norm"), n));
                let ffn_hidden = linear(&mut f, &format!("stage{k}.ffn_hidden"), &s.ffn_hidden);
                let ffn_out = linear(&mut f, &format!("stage{k}.ffn_out"), &s.ffn_out);
                let ffn_norm = s
                    .ffn_norm
                    .as_ref()
                    .map(|n| norm(&mut f, &format!("stage{k}.ffn_norm"), n));
                StageWeights {
                    heads,
                    reproj,
                    attn_norm,
                    ffn_hidden,
                    ffn_out,
                    ffn_norm,
                }
            })
            .collect();
        let seg_head = self.seg_head.as_ref().map(|l| linear(&mut f, "seg_head", l));
        let pretrain_head = self
            .pretrain_head
            .as_ref()
            .map(|l| linear(&mut f, "pretrain_head", l));
        Weights {
            embed,
            positions,
            stages,
            seg_head,
            pretrain_head,
        }
    }

    /// Mutable walk in the same order as [`Weights::map`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        fn linear<T>(f: &mut dyn FnMut(&str, &mut T), prefix: &str, l: &mut Linear<T>) {
            f(&format!("{prefix}.weight"), &mut l.weight);
            f(&format!("{prefix}.bias"), &mut l.bias);
        }
        fn norm<T>(f: &mut dyn FnMut(&str, &mut T), prefix: &str, n: &mut Norm<T>) {
            f(&format!("{prefix}.gamma"), &mut n.gamma);
            f(&format!("{prefix}.beta"), &mut n.beta);
        }
        f("embed", &mut self.embed);
        if let Some(p) = &mut self.positions {
            f("positions", p);
        }
        for (k, s) in self.stages.iter_mut().enumerate() {
            for (i, h) in s.heads.iter_mut().enumerate() {
                f(&format!("stage{k}.head{i}.query"), &mut h.query);
                f(&format!("stage{k}.head{i}.key"), &mut h.key);
                f(&format!("stage{k}.head{i}.value"), &mut h.value);
            }
            f(&format!("stage{k}.reproj"), &mut s.reproj);
            if let Some(n) = &mut s.attn_norm {
                norm(&mut f, &format!("stage{k}.attn_norm"), n);
            }
            linear(&mut f, &format!("stage{k}.ffn_hidden"), &mut s.ffn_hidden);
            linear(&mut f, &format!("stage{k}.ffn_out"), &mut s.ffn_out);
            if let Some(n) = &mut s.ffn_norm {
                norm(&mut f, &format!("stage{k}.ffn_norm"), n);
            }
        }
        if let Some(l) = &mut self.seg_head {
            linear(&mut f, "seg_head", l);
        }
        if let Some(l) = &mut self.pretrain_head {
            linear(&mut f, "pretrain_head", l);
        }
    }

    /// Names and references in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(|name, t| out.push((name.to_string(), t)));
        out
    }

    pub fn values(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.map(|_, t| out.push(t));
        out
    }

    /// Combines two structurally identical weight sets field by field.
    pub fn zip_map<U, V>(&self, other: &Weights<U>, mut f: impl FnMut(&str, &T, &U) -> V) -> Weights<V> {
        let mut rhs = other.values().into_iter();
        self.map(|name, t| {
            let u = rhs.next().expect("weight structures differ");
            f(name, t, u)
        })
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.map(|_, _| n += 1);
        n
    }
}

impl Weights<Tensor> {
    pub fn parameter_count(&self) -> usize {
        self.values().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|t| t.is_finite())
    }

    /// Position-weighted element sum per tensor, for change detection.
    pub fn checksums(&self) -> Vec<(String, f64)> {
        self.named()
            .into_iter()
            .map(|(n, t)| (n, t.data().iter().enumerate().map(|(i, v)| v * (1.0 + i as f64 * 1e-3)).sum()))
            .collect()
    }
}

/// Glorot-uniform matrix: entries ~ U(−√(6/(fan_in+fan_out)), +√(…)).
fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| (2.0 * rng.random::<f64>() - 1.0) * limit)
        .collect();
    Tensor::from_parts(vec![rows, cols], data)
}

fn linear(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Linear<Tensor> {
    Linear {
        weight: glorot(rng, out, inp),
        bias: Tensor::zeros(&[out]),
    }
}

fn norm(d: usize) -> Norm<Tensor> {
    Norm {
        gamma: Tensor::filled(&[d], 1.0),
        beta: Tensor::zeros(&[d]),
    }
}

/// Segmentation head shaped for the configured head mode.
pub fn init_segmentation_head(hp: &Hyperparams, seed: u64) -> Linear<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n) = (hp.embed_dim, hp.num_patches());
    match hp.head_mode {
        HeadMode::Voxel => linear(&mut rng, hp.patch_voxels() * hp.classes, d * n),
        HeadMode::Patch => linear(&mut rng, hp.classes, d),
    }
}

/// Reconstruction head mapping the flattened encoder output to `w³·c` values.
pub fn init_pretraining_head(hp: &Hyperparams, seed: u64) -> Linear<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    linear(&mut rng, hp.patch_len(), hp.embed_dim * hp.num_patches())
}

/// Deterministic initialization: Glorot-uniform matrices, zero biases and
/// positional table, unit norm gains. Includes the segmentation head only.
pub fn init_weights(hp: &Hyperparams, seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, dh) = (hp.embed_dim, hp.head_dim);
    let embed = glorot(&mut rng, d, hp.patch_len());
    let positions = (hp.pos_mode == PositionalMode::Learned).then(|| Tensor::zeros(&[d, hp.num_patches()]));
    let with_norm = hp.norm != NormPlacement::Off;
    let stages = (0..hp.stages)
        .map(|_| StageWeights {
            heads: (0..hp.heads)
                .map(|_| HeadProjection {
                    query: glorot(&mut rng, dh, d),
                    key: glorot(&mut rng, dh, d),
                    value: glorot(&mut rng, dh, d),
                })
                .collect(),
            reproj: glorot(&mut rng, d, dh * hp.heads),
            attn_norm: with_norm.then(|| norm(d)),
            ffn_hidden: linear(&mut rng, hp.ffn_dim(), d),
            ffn_out: linear(&mut rng, d, hp.ffn_dim()),
            ffn_norm: with_norm.then(|| norm(d)),
        })
        .collect();
    let head_seed = rng.random::<u64>();
    Weights {
        embed,
        positions,
        stages,
        seg_head: Some(init_segmentation_head(hp, head_seed)),
        pretrain_head: None,
    }
}
