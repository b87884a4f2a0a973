//! Finite-difference verification of the full network's gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::sampling::center_patch;
use crate::error::Result;
use crate::losses::{mse_loss, one_hot, soft_dice_loss, DICE_EPS};
use crate::model::{init_pretraining_head, network, partition_block, Hyperparams, Model, NormPlacement};
use crate::tensor::kernels::transpose_raw;
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor};

/// Gradient checks of the soft-Dice and squared-error objectives with
/// respect to every parameter tensor of a freshly initialized model.
#[derive(Clone, Debug)]
pub struct ModelGradCheck {
    /// Smallest distance of any ReLU input from its kink at the check point.
    pub kink_margin: f64,
    pub names: Vec<String>,
    pub segmentation: GradCheckReport,
    pub reconstruction: GradCheckReport,
}

impl ModelGradCheck {
    pub fn passed(&self) -> bool {
        self.segmentation.passed() && self.reconstruction.passed()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.segmentation.max_rel_error.max(self.reconstruction.max_rel_error)
    }
}

/// Sets every feed-forward hidden bias so that, on `block`, each ReLU input
/// lies as far from zero as possible while each hidden unit stays active for
/// some tokens and inactive for others: the bias moves the unit's threshold to
/// the middle of the widest gap between its sorted pre-activations. Returns
/// the smallest resulting distance of any ReLU input from zero.
///
/// Finite differences are only meaningful where no perturbation crosses a
/// ReLU kink; this picks such a point without changing the architecture.
pub fn clear_relu_kinks(model: &mut Model, block: &Tensor) -> Result<f64> {
    let hp = model.hp.clone();
    let mut margin = f64::INFINITY;
    for k in 0..hp.stages {
        let pre = {
            let mut tape = Tape::new();
            let w = model.weights.map(|_, t| tape.input(t));
            let patches = partition_block(block, &hp)?;
            let cols = Tensor::from_parts(
                vec![hp.patch_len(), hp.num_patches()],
                transpose_raw(patches.data(), hp.num_patches(), hp.patch_len()),
            );
            let p = tape.constant(cols);
            let mut x = network::embed_sequence(&mut tape, p, &w, &hp)?;
            for stage in &w.stages[..k] {
                let (y, _) = network::msa(&mut tape, x, stage, &hp)?;
                x = network::ffn(&mut tape, y, stage, &hp)?;
            }
            let stage = &w.stages[k];
            let (mut x, _) = network::msa(&mut tape, x, stage, &hp)?;
            if hp.norm == NormPlacement::Pre {
                if let Some(n) = &stage.ffn_norm {
                    x = tape.layer_norm(x, n.gamma, n.beta, hp.norm_eps)?;
                }
            }
            let z = tape.matmul(stage.ffn_hidden.weight, x)?;
            tape.value(z).clone()
        };
        let n = hp.num_patches();
        let mut bias = Vec::with_capacity(pre.shape()[0]);
        for row in pre.data().chunks(n) {
            let mut v = row.to_vec();
            v.sort_by(f64::total_cmp);
            let (gap, mid) = v
                .windows(2)
                .map(|p| (p[1] - p[0], 0.5 * (p[0] + p[1])))
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap_or((f64::INFINITY, v[0] - 1.0));
            margin = margin.min(0.5 * gap);
            bias.push(-mid);
        }
        let len = bias.len();
        model.weights.stages[k].ffn_hidden.bias = Tensor::new(vec![len], bias)?;
    }
    Ok(margin)
}

pub fn check_model_gradients(hp: &Hyperparams, seed: u64, step: f64, tolerance: f64) -> Result<ModelGradCheck> {
    let mut model = Model::new(hp.clone(), seed)?;
    model.weights.pretrain_head = Some(init_pretraining_head(hp, seed.wrapping_add(1)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = hp.block;
    let block = Tensor::new(
        vec![w, w, w, hp.channels],
        (0..w * w * w * hp.channels).map(|_| rng.sample(StandardNormal)).collect(),
    )?;
    let kink_margin = clear_relu_kinks(&mut model, &block)?;
    // Labels from the center patch intensities, with at least one foreground
    // voxel so the class set cannot change under perturbation.
    let patch = center_patch(&block, hp)?;
    let mut labels: Vec<u8> = patch
        .data()
        .chunks(hp.channels)
        .map(|v| ((v[0] > 0.0) as usize * (hp.classes - 1)) as u8)
        .collect();
    labels[0] = (hp.classes - 1) as u8;
    let target = one_hot(&labels, hp.classes)?;
    let clean = patch;

    let names: Vec<String> = model.weights.named().into_iter().map(|(n, _)| n).collect();
    let params: Vec<Tensor> = model.weights.values().into_iter().cloned().collect();

    let rebuild = |vars: &[crate::tensor::Var]| {
        let mut it = vars.iter().copied();
        model.weights.map(|_, _| it.next().expect("one var per tensor"))
    };
    let segmentation = grad_check(&params, step, tolerance, |tape, vars| {
        let wv = rebuild(vars);
        let enc = network::encode_block(tape, &block, &wv, hp)?;
        let y = network::segmentation_head(tape, enc.tokens, wv.seg_head.as_ref().expect("seg head"), hp)?;
        let p = network::center_probabilities(tape, y, hp)?;
        soft_dice_loss(tape, p, &target, DICE_EPS)
    })?;
    let reconstruction = grad_check(&params, step, tolerance, |tape, vars| {
        let wv = rebuild(vars);
        let enc = network::encode_block(tape, &block, &wv, hp)?;
        let y = network::pretraining_head(tape, enc.tokens, wv.pretrain_head.as_ref().expect("pretrain head"), hp)?;
        mse_loss(tape, y, &clean)
    })?;
    Ok(ModelGradCheck {
        kink_margin,
        names,
        segmentation,
        reconstruction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_gradients_agree() {
        let r = check_model_gradients(&Hyperparams::tiny(), 0, 1e-3, 1e-4).unwrap();
        assert_eq!(r.segmentation.per_tensor.len(), r.names.len());
        assert!(r.passed(), "max rel error {:e}: {:?}", r.max_rel_error(), r.segmentation.worst);
    }
}
