//! Block partitioning, embedding, encoder stages and output heads, all
//! recorded on a [`Tape`].
//!
//! Tokens are columns: the sequence `X` of a stage is a `D×N` matrix whose
//! column `j` is patch `j`. Patches are numbered in raster order over the
//! block's axes with axis 0 slowest, matching the row-major voxel layout, so
//! the center patch has index `(N − 1) / 2`.

use super::hyperparams::{HeadMode, Hyperparams, NormPlacement, PositionalMode};
use super::weights::{Linear, Norm, StageWeights, Weights};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

fn check_block(block: &Tensor, hp: &Hyperparams) -> Result<()> {
    hp.validate()?;
    let w = hp.block;
    if block.shape() != [w, w, w, hp.channels] {
        return Err(Error::Config(format!(
            "block shape {:?} does not match W={} c={}",
            block.shape(),
            w,
            hp.channels
        )));
    }
    Ok(())
}

/// Splits a `W×W×W×c` block into `N` flattened patches, returned as the rows
/// of an `N × w³c` matrix.
pub fn partition_block(block: &Tensor, hp: &Hyperparams) -> Result<Tensor> {
    check_block(block, hp)?;
    let (n, w, c, big) = (hp.patches_per_axis, hp.patch_side(), hp.channels, hp.block);
    let src = block.data();
    let mut out = Vec::with_capacity(src.len());
    for pa in 0..n {
        for pb in 0..n {
            for pc in 0..n {
                for a in 0..w {
                    for b in 0..w {
                        let row = ((pa * w + a) * big + pb * w + b) * big + pc * w;
                        out.extend_from_slice(&src[row * c..(row + w) * c]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![hp.num_patches(), hp.patch_len()], out))
}

/// Inverse of [`partition_block`].
pub fn unpartition_block(patches: &Tensor, hp: &Hyperparams) -> Result<Tensor> {
    hp.validate()?;
    if patches.shape() != [hp.num_patches(), hp.patch_len()] {
        return Err(Error::Shape {
            op: "unpartition_block",
            lhs: patches.shape().to_vec(),
            rhs: vec![hp.num_patches(), hp.patch_len()],
        });
    }
    let (n, w, c, big) = (hp.patches_per_axis, hp.patch_side(), hp.channels, hp.block);
    let mut out = vec![0.0; big * big * big * c];
    let mut src = patches.data().chunks(w * c);
    for pa in 0..n {
        for pb in 0..n {
            for pc in 0..n {
                for a in 0..w {
                    for b in 0..w {
                        let row = ((pa * w + a) * big + pb * w + b) * big + pc * w;
                        out[row * c..(row + w) * c].copy_from_slice(src.next().unwrap());
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![big, big, big, c], out))
}

/// `D×N` table with `sin(j / 10000^(2i/D))` in row `2i` and the matching
/// cosine in row `2i+1`, for raster patch index `j`.
pub fn sinusoidal_table(d: usize, n: usize) -> Tensor {
    let mut data = vec![0.0; d * n];
    for r in 0..d {
        let freq = 1.0 / 10000f64.powf((r - r % 2) as f64 / d as f64);
        for j in 0..n {
            let angle = j as f64 * freq;
            data[r * n + j] = if r % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![d, n], data)
}

/// `X⁰ = E·P + E_pos`, with `P` the `w³c × N` matrix of patch columns.
pub fn embed_sequence(tape: &mut Tape<'_>, patch_cols: Var, w: &Weights<Var>, hp: &Hyperparams) -> Result<Var> {
    let x = tape.matmul(w.embed, patch_cols)?;
    match hp.pos_mode {
        PositionalMode::Learned => {
            let pos = w
                .positions
                .ok_or_else(|| Error::Config("learned positional table missing".into()))?;
            tape.add(x, pos)
        }
        PositionalMode::FixedSinusoidal => {
            let table = tape.constant(sinusoidal_table(hp.embed_dim, hp.num_patches()));
            tape.add(x, table)
        }
        PositionalMode::None => Ok(x),
    }
}

fn norm(tape: &mut Tape<'_>, x: Var, n: Option<&Norm<Var>>, eps: f64) -> Result<Var> {
    match n {
        Some(n) => tape.layer_norm(x, n.gamma, n.beta, eps),
        None => Ok(x),
    }
}

fn affine(tape: &mut Tape<'_>, l: &Linear<Var>, x: Var) -> Result<Var> {
    let y = tape.matmul(l.weight, x)?;
    tape.add_bias(y, l.bias)
}

/// Multi-head self-attention sublayer with its residual connection.
///
/// Per head, `A = softmax_rows(QᵀK / √D_h)` is `N×N` with row `j` the
/// distribution of token `j`'s attention over all tokens, and the head output
/// is `V·Aᵀ`. Returns the sublayer output and each head's `A`.
pub fn msa(tape: &mut Tape<'_>, x: Var, stage: &StageWeights<Var>, hp: &Hyperparams) -> Result<(Var, Vec<Var>)> {
    let pre = hp.norm == NormPlacement::Pre;
    let input = if pre {
        norm(tape, x, stage.attn_norm.as_ref(), hp.norm_eps)?
    } else {
        x
    };
    let scale = 1.0 / (hp.head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(stage.heads.len());
    let mut attention = Vec::with_capacity(stage.heads.len());
    for head in &stage.heads {
        let q = tape.matmul(head.query, input)?;
        let k = tape.matmul(head.key, input)?;
        let v = tape.matmul(head.value, input)?;
        let qt = tape.transpose(q)?;
        let logits = tape.matmul(qt, k)?;
        let logits = tape.scale(logits, scale)?;
        let a = tape.softmax_rows(logits)?;
        let at = tape.transpose(a)?;
        outputs.push(tape.matmul(v, at)?);
        attention.push(a);
    }
    let stacked = tape.vstack(&outputs)?;
    let projected = tape.matmul(stage.reproj, stacked)?;
    let residual = tape.add(projected, x)?;
    let out = if hp.norm == NormPlacement::Post {
        norm(tape, residual, stage.attn_norm.as_ref(), hp.norm_eps)?
    } else {
        residual
    };
    Ok((out, attention))
}

/// Two-layer feed-forward sublayer, `X + E₂·ReLU(E₁·X + b₁) + b₂`, column-wise.
pub fn ffn(tape: &mut Tape<'_>, x: Var, stage: &StageWeights<Var>, hp: &Hyperparams) -> Result<Var> {
    let input = if hp.norm == NormPlacement::Pre {
        norm(tape, x, stage.ffn_norm.as_ref(), hp.norm_eps)?
    } else {
        x
    };
    let hidden = affine(tape, &stage.ffn_hidden, input)?;
    let hidden = tape.relu(hidden)?;
    let out = affine(tape, &stage.ffn_out, hidden)?;
    let residual = tape.add(x, out)?;
    if hp.norm == NormPlacement::Post {
        norm(tape, residual, stage.ffn_norm.as_ref(), hp.norm_eps)
    } else {
        Ok(residual)
    }
}

/// Output of the encoder stack on one block.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `X^K`, `D×N`.
    pub tokens: Var,
    /// `attention[k][i]` is stage `k`, head `i`.
    pub attention: Vec<Vec<Var>>,
}

/// Runs all encoder stages starting from `X⁰`.
pub fn encode(tape: &mut Tape<'_>, x0: Var, w: &Weights<Var>, hp: &Hyperparams) -> Result<Encoded> {
    let mut x = x0;
    let mut attention = Vec::with_capacity(w.stages.len());
    for stage in &w.stages {
        let (x_msa, maps) = msa(tape, x, stage, hp)?;
        x = ffn(tape, x_msa, stage, hp)?;
        attention.push(maps);
    }
    Ok(Encoded { tokens: x, attention })
}

/// Partitions, embeds and encodes a block.
pub fn encode_block(tape: &mut Tape<'_>, block: &Tensor, w: &Weights<Var>, hp: &Hyperparams) -> Result<Encoded> {
    let patches = partition_block(block, hp)?;
    let (rows, cols) = (hp.num_patches(), hp.patch_len());
    let cols_major = Tensor::from_parts(
        vec![cols, rows],
        crate::tensor::kernels::transpose_raw(patches.data(), rows, cols),
    );
    let p = tape.constant(cols_major);
    let x0 = embed_sequence(tape, p, w, hp)?;
    encode(tape, x0, w, hp)
}

fn flatten_tokens(tape: &mut Tape<'_>, tokens: Var) -> Result<Var> {
    let len = tape.value(tokens).len();
    tape.reshape(tokens, &[len, 1])
}

/// Segmentation output `Ŷ`.
///
/// Voxel mode: `w×w×w×n_class` class probabilities for the center patch.
/// Patch mode: `n×n×n×n_class`, one distribution per patch.
pub fn segmentation_head(tape: &mut Tape<'_>, tokens: Var, head: &Linear<Var>, hp: &Hyperparams) -> Result<Var> {
    let classes = hp.classes;
    match hp.head_mode {
        HeadMode::Voxel => {
            let flat = flatten_tokens(tape, tokens)?;
            let logits = affine(tape, head, flat)?;
            let logits = tape.reshape(logits, &[hp.patch_voxels(), classes])?;
            let probs = tape.softmax_rows(logits)?;
            let w = hp.patch_side();
            tape.reshape(probs, &[w, w, w, classes])
        }
        HeadMode::Patch => {
            let logits = affine(tape, head, tokens)?;
            let logits = tape.transpose(logits)?;
            let probs = tape.softmax_rows(logits)?;
            let n = hp.patches_per_axis;
            tape.reshape(probs, &[n, n, n, classes])
        }
    }
}

/// Center-patch class probabilities as a `w³ × n_class` matrix, whatever the
/// head mode. Patch mode broadcasts the center token's distribution over all
/// of its voxels.
pub fn center_probabilities(tape: &mut Tape<'_>, y_hat: Var, hp: &Hyperparams) -> Result<Var> {
    let classes = hp.classes;
    match hp.head_mode {
        HeadMode::Voxel => tape.reshape(y_hat, &[hp.patch_voxels(), classes]),
        HeadMode::Patch => {
            let rows = tape.reshape(y_hat, &[hp.num_patches(), classes])?;
            let mut pick = Tensor::zeros(&[1, hp.num_patches()]);
            pick.data_mut()[hp.center_patch()] = 1.0;
            let pick = tape.constant(pick);
            let center = tape.matmul(pick, rows)?;
            let ones = tape.constant(Tensor::filled(&[hp.patch_voxels(), 1], 1.0));
            tape.matmul(ones, center)
        }
    }
}

/// Reconstruction of the center patch, `w×w×w×c`, without softmax.
pub fn pretraining_head(tape: &mut Tape<'_>, tokens: Var, head: &Linear<Var>, hp: &Hyperparams) -> Result<Var> {
    let flat = flatten_tokens(tape, tokens)?;
    let out = affine(tape, head, flat)?;
    let w = hp.patch_side();
    tape.reshape(out, &[w, w, w, hp.channels])
}
