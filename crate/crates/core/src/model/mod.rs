//! The patch self-attention segmentation network.

pub mod checkpoint;
mod hyperparams;
pub mod network;
mod weights;

pub use hyperparams::{HeadMode, Hyperparams, NormPlacement, PositionalMode};
pub use network::{partition_block, sinusoidal_table, unpartition_block};
pub use weights::{
    init_pretraining_head, init_segmentation_head, init_weights, HeadProjection, Linear, ModelWeights, Norm,
    StageWeights, Weights,
};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Per-stage, per-head `N×N` attention matrices from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// `maps[k][i]`: stage `k`, head `i`. Row `j` is token `j`'s attention
    /// distribution over all tokens.
    pub maps: Vec<Vec<Tensor>>,
}

impl AttentionRecord {
    pub fn stages(&self) -> usize {
        self.maps.len()
    }

    pub fn heads(&self) -> usize {
        self.maps.first().map_or(0, |s| s.len())
    }

    pub fn len(&self) -> usize {
        self.maps.iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total attention each patch receives from all tokens: the column sums of
    /// `A[stage][head]`. Sums to `N` because every row is a distribution.
    pub fn column_totals(&self, stage: usize, head: usize) -> Vec<f64> {
        let a = &self.maps[stage][head];
        let n = a.shape()[1];
        let mut totals = vec![0.0; n];
        for row in a.data().chunks(n) {
            for (t, v) in totals.iter_mut().zip(row) {
                *t += v;
            }
        }
        totals
    }
}

/// Hyperparameters plus weights: everything needed to run the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub hp: Hyperparams,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(hp: Hyperparams, seed: u64) -> Result<Self> {
        hp.validate()?;
        let weights = init_weights(&hp, seed);
        Ok(Model { hp, weights })
    }

    fn segment_on_tape<'w>(
        &'w self,
        tape: &mut Tape<'w>,
        block: &Tensor,
    ) -> Result<(crate::tensor::Var, network::Encoded)> {
        let vars = self.weights.map(|_, t| tape.input(t));
        let head = vars
            .seg_head
            .clone()
            .ok_or_else(|| Error::Config("model has no segmentation head".into()))?;
        let enc = network::encode_block(tape, block, &vars, &self.hp)?;
        let y = network::segmentation_head(tape, enc.tokens, &head, &self.hp)?;
        Ok((y, enc))
    }

    /// Segmentation output for one `W×W×W×c` block, plus the attention
    /// matrices when `capture_attention` is set.
    pub fn forward(&self, block: &Tensor, capture_attention: bool) -> Result<(Tensor, Option<AttentionRecord>)> {
        let mut tape = Tape::new();
        let (y, enc) = self.segment_on_tape(&mut tape, block)?;
        let record = capture_attention.then(|| AttentionRecord {
            maps: enc
                .attention
                .iter()
                .map(|stage| stage.iter().map(|&a| tape.value(a).clone()).collect())
                .collect(),
        });
        Ok((tape.value(y).clone(), record))
    }

    /// Center-patch probabilities as `w³ × n_class`, independent of head mode.
    pub fn center_probabilities(&self, block: &Tensor) -> Result<Tensor> {
        Ok(self.center_probabilities_with_attention(block, false)?.0)
    }

    /// Center-patch probabilities together with the attention record.
    pub fn center_probabilities_with_attention(
        &self,
        block: &Tensor,
        capture_attention: bool,
    ) -> Result<(Tensor, Option<AttentionRecord>)> {
        let mut tape = Tape::new();
        let (y, enc) = self.segment_on_tape(&mut tape, block)?;
        let c = network::center_probabilities(&mut tape, y, &self.hp)?;
        let record = capture_attention.then(|| AttentionRecord {
            maps: enc
                .attention
                .iter()
                .map(|stage| stage.iter().map(|&a| tape.value(a).clone()).collect())
                .collect(),
        });
        Ok((tape.value(c).clone(), record))
    }

    /// Encoder output `X^K` (`D×N`) for a block.
    pub fn encode(&self, block: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.weights.map(|_, t| tape.input(t));
        let enc = network::encode_block(&mut tape, block, &vars, &self.hp)?;
        Ok(tape.value(enc.tokens).clone())
    }

    /// Reconstruction of the center patch from the pre-training head.
    pub fn reconstruct(&self, block: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.weights.map(|_, t| tape.input(t));
        let head = vars
            .pretrain_head
            .clone()
            .ok_or_else(|| Error::Config("model has no pre-training head".into()))?;
        let enc = network::encode_block(&mut tape, block, &vars, &self.hp)?;
        let y = network::pretraining_head(&mut tape, enc.tokens, &head, &self.hp)?;
        Ok(tape.value(y).clone())
    }
}
