//! Training objectives: soft Dice for segmentation, mean squared error for
//! reconstruction pre-training.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Smoothing term in the Dice denominator.
pub const DICE_EPS: f64 = 1e-5;

/// One-hot encoding of integer labels: `labels.len() × classes`.
pub fn one_hot(labels: &[u8], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = 1.0;
    }
    Ok(Tensor::from_parts(vec![labels.len(), classes], data))
}

/// Soft Dice loss and its gradient with respect to `probs`.
///
/// Both slices hold rows of `classes` values (one row per voxel). For each
/// foreground class `c ≥ 1`, `d_c = 2Σpg / (Σp² + Σg² + eps)`; the loss is
/// `1 − mean d_c` over classes that appear in either the target or the
/// per-voxel argmax of the prediction. With no such class the loss is 0.
pub fn soft_dice(probs: &[f64], target: &[f64], classes: usize, eps: f64) -> Result<(f64, Vec<f64>)> {
    if probs.len() != target.len() || classes == 0 || probs.len() % classes != 0 {
        return Err(Error::Shape {
            op: "soft_dice",
            lhs: vec![probs.len() / classes.max(1), classes],
            rhs: vec![target.len() / classes.max(1), classes],
        });
    }
    let rows = probs.len() / classes;
    let mut present = vec![false; classes];
    for r in 0..rows {
        let p = &probs[r * classes..(r + 1) * classes];
        let g = &target[r * classes..(r + 1) * classes];
        let mut best = 0;
        for c in 1..classes {
            if p[c] > p[best] {
                best = c;
            }
        }
        present[best] = true;
        for c in 0..classes {
            if g[c] > 0.5 {
                present[c] = true;
            }
        }
    }
    let included: Vec<usize> = (1..classes).filter(|&c| present[c]).collect();
    let mut grad = vec![0.0; probs.len()];
    if included.is_empty() {
        return Ok((0.0, grad));
    }
    let m = included.len() as f64;
    let mut mean_d = 0.0;
    for &c in &included {
        let (mut spg, mut spp, mut sgg) = (0.0, 0.0, 0.0);
        for r in 0..rows {
            let (p, g) = (probs[r * classes + c], target[r * classes + c]);
            spg += p * g;
            spp += p * p;
            sgg += g * g;
        }
        let den = spp + sgg + eps;
        mean_d += 2.0 * spg / den / m;
        for r in 0..rows {
            let k = r * classes + c;
            let dd = (2.0 * target[k] * den - 2.0 * spg * 2.0 * probs[k]) / (den * den);
            grad[k] = -dd / m;
        }
    }
    Ok((1.0 - mean_d, grad))
}

/// Records the soft Dice loss of `probs` (class axis last) against a one-hot
/// `target` of the same shape.
pub fn soft_dice_loss(tape: &mut Tape<'_>, probs: Var, target: &Tensor, eps: f64) -> Result<Var> {
    let p = tape.value(probs);
    if p.shape() != target.shape() {
        return Err(Error::Shape {
            op: "soft_dice_loss",
            lhs: p.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let classes = *p.shape().last().unwrap_or(&1);
    let shape = p.shape().to_vec();
    let (loss, grad) = soft_dice(p.data(), target.data(), classes, eps)?;
    let grad = Tensor::from_parts(shape, grad);
    tape.custom(
        &[probs],
        Tensor::scalar(loss),
        Box::new(move |g| {
            let s = g.data()[0];
            let data = grad.data().iter().map(|v| v * s).collect();
            vec![Tensor::from_parts(grad.shape().to_vec(), data)]
        }),
    )
}

/// Mean squared error between `pred` and a same-shaped `target`.
pub fn mse_loss(tape: &mut Tape<'_>, pred: Var, target: &Tensor) -> Result<Var> {
    let n = target.len() as f64;
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / n)
}
