//! Whole-volume inference by non-overlapping center patches.
//!
//! Each axis is padded by `(W−w)/2` on both faces plus a remainder that makes
//! the extent a multiple of `w` (low side `floor(r/2)`, high side the rest).
//! Windows step by `w`, so the center patches of the planned windows tile the
//! original volume exactly once.

use rayon::prelude::*;

use crate::data::{pad, PadMode};
use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::model::{Hyperparams, Model};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub volume_shape: [usize; 3],
    /// `(low, high)` padding per spatial axis.
    pub pads: [(usize, usize); 3],
    pub padded_shape: [usize; 3],
    /// Block origins in padded coordinates, raster order.
    pub origins: Vec<[usize; 3]>,
    pub block: usize,
    pub patch: usize,
    pub offset: usize,
}

impl WindowPlan {
    /// Original-volume voxel range `[lo, hi)` per axis written by the center
    /// patch of the window at `origin`.
    pub fn center_region(&self, origin: [usize; 3]) -> [(usize, usize); 3] {
        std::array::from_fn(|a| {
            let start = (origin[a] + self.offset) as isize - self.pads[a].0 as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + self.patch as isize).max(0) as usize).min(self.volume_shape[a]);
            (lo.min(hi), hi)
        })
    }
}

pub fn plan_windows(shape: [usize; 3], hp: &Hyperparams) -> Result<WindowPlan> {
    if shape.contains(&0) {
        return Err(Error::Data(format!("cannot plan windows for empty volume {shape:?}")));
    }
    let (w_big, w, off) = (hp.block, hp.patch_side(), hp.center_offset());
    let mut pads = [(0, 0); 3];
    let mut padded = [0; 3];
    let mut counts = [0; 3];
    for a in 0..3 {
        let r = (w - shape[a] % w) % w;
        pads[a] = (off + r / 2, off + r - r / 2);
        padded[a] = shape[a] + pads[a].0 + pads[a].1;
        counts[a] = (shape[a] + r) / w;
        debug_assert_eq!((counts[a] - 1) * w + w_big, padded[a]);
    }
    let mut origins = Vec::with_capacity(counts.iter().product());
    for i in 0..counts[0] {
        for j in 0..counts[1] {
            for k in 0..counts[2] {
                origins.push([i * w, j * w, k * w]);
            }
        }
    }
    Ok(WindowPlan {
        volume_shape: shape,
        pads,
        padded_shape: padded,
        origins,
        block: w_big,
        patch: w,
        offset: off,
    })
}

/// One aggregated attention map, named `attn_k{stage}_h{head}`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub stage: usize,
    pub head: usize,
    /// `X×Y×Z×1`.
    pub map: Tensor,
}

impl AttentionMap {
    pub fn name(&self) -> String {
        format!("attn_k{}_h{}", self.stage, self.head)
    }
}

#[derive(Clone, Debug)]
pub struct InferenceOutput {
    /// `X×Y×Z×n_class` class probabilities.
    pub probabilities: Tensor,
    pub labels: SegmentationMask,
    pub attention: Vec<AttentionMap>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InferenceOptions {
    pub padding: PadMode,
    pub attention: bool,
}

struct Padded {
    data: Vec<f64>,
    shape: [usize; 4],
}

impl Padded {
    fn block(&self, origin: [usize; 3], w: usize) -> Tensor {
        let [_, y, z, c] = self.shape;
        let mut data = Vec::with_capacity(w * w * w * c);
        for i in 0..w {
            for j in 0..w {
                let row = (((origin[0] + i) * y + origin[1] + j) * z + origin[2]) * c;
                data.extend_from_slice(&self.data[row..row + w * c]);
            }
        }
        Tensor::from_parts(vec![w, w, w, c], data)
    }
}

struct WindowResult {
    probs: Tensor,
    // [stage][head] → per-patch column totals.
    totals: Vec<Vec<Vec<f64>>>,
}

/// Segments `volume` (`X×Y×Z×c`), optionally aggregating attention maps.
pub fn run_inference(volume: &Tensor, spacing: [f64; 3], model: &Model, opts: InferenceOptions) -> Result<InferenceOutput> {
    let hp = &model.hp;
    let shape: [usize; 4] = volume
        .shape()
        .try_into()
        .map_err(|_| Error::Data(format!("expected an X×Y×Z×C volume, got {:?}", volume.shape())))?;
    if shape[3] != hp.channels {
        return Err(Error::Data(format!(
            "volume has {} channels, model expects {}",
            shape[3], hp.channels
        )));
    }
    let spatial = [shape[0], shape[1], shape[2]];
    let plan = plan_windows(spatial, hp)?;
    let (data, pshape) = pad(volume.data(), shape, plan.pads, opts.padding);
    let padded = Padded { data, shape: pshape };

    let results: Vec<WindowResult> = plan
        .origins
        .par_iter()
        .map(|&o| {
            let block = padded.block(o, plan.block);
            let (probs, record) = model
                .center_probabilities_with_attention(&block, opts.attention)
                .map_err(|e| match e {
                    Error::NonFinite { context } => Error::NonFinite {
                        context: format!("{context} in window at padded origin {o:?}"),
                    },
                    other => other,
                })?;
            let totals = record.map_or_else(Vec::new, |r| {
                (0..r.stages())
                    .map(|k| (0..r.heads()).map(|i| r.column_totals(k, i)).collect())
                    .collect()
            });
            Ok(WindowResult { probs, totals })
        })
        .collect::<Result<_>>()?;

    let classes = hp.classes;
    let [x, y, z] = spatial;
    let mut probs = vec![0.0; x * y * z * classes];
    let w = plan.patch;
    for (&o, r) in plan.origins.iter().zip(&results) {
        let region = plan.center_region(o);
        let start: [isize; 3] =
            std::array::from_fn(|a| (o[a] + plan.offset) as isize - plan.pads[a].0 as isize);
        for i in region[0].0..region[0].1 {
            for j in region[1].0..region[1].1 {
                for k in region[2].0..region[2].1 {
                    let (pi, pj, pk) = (
                        (i as isize - start[0]) as usize,
                        (j as isize - start[1]) as usize,
                        (k as isize - start[2]) as usize,
                    );
                    let src = ((pi * w + pj) * w + pk) * classes;
                    let dst = ((i * y + j) * z + k) * classes;
                    probs[dst..dst + classes].copy_from_slice(&r.probs.data()[src..src + classes]);
                }
            }
        }
    }
    let labels = probs
        .chunks(classes)
        .map(|p| {
            let mut best = 0;
            for c in 1..classes {
                if p[c] > p[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();

    let attention = if opts.attention {
        aggregate(&plan, hp, &results)
    } else {
        Vec::new()
    };
    Ok(InferenceOutput {
        probabilities: Tensor::from_parts(vec![x, y, z, classes], probs),
        labels: SegmentationMask::new(spatial, labels, spacing)?,
        attention,
    })
}

/// Spreads each patch's total uniformly over its voxels, accumulates over all
/// windows on the padded grid, averages voxel-wise and trims to the volume.
fn aggregate(plan: &WindowPlan, hp: &Hyperparams, results: &[WindowResult]) -> Vec<AttentionMap> {
    let [px, py, pz] = plan.padded_shape;
    let (n, w) = (hp.patches_per_axis, plan.patch);
    let mut count = vec![0u32; px * py * pz];
    for &o in &plan.origins {
        for i in 0..plan.block {
            for j in 0..plan.block {
                let row = ((o[0] + i) * py + o[1] + j) * pz + o[2];
                count[row..row + plan.block].iter_mut().for_each(|c| *c += 1);
            }
        }
    }
    let [x, y, z] = plan.volume_shape;
    let mut maps = Vec::with_capacity(hp.stages * hp.heads);
    for k in 0..hp.stages {
        for h in 0..hp.heads {
            let mut sum = vec![0.0; px * py * pz];
            for (&o, r) in plan.origins.iter().zip(results) {
                let totals = &r.totals[k][h];
                for i in 0..plan.block {
                    for j in 0..plan.block {
                        for l in 0..plan.block {
                            let patch = ((i / w) * n + j / w) * n + l / w;
                            sum[((o[0] + i) * py + o[1] + j) * pz + o[2] + l] += totals[patch];
                        }
                    }
                }
            }
            let mut data = Vec::with_capacity(x * y * z);
            for i in 0..x {
                for j in 0..y {
                    for l in 0..z {
                        let idx = ((i + plan.pads[0].0) * py + j + plan.pads[1].0) * pz + l + plan.pads[2].0;
                        data.push(sum[idx] / count[idx] as f64);
                    }
                }
            }
            maps.push(AttentionMap {
                stage: k,
                head: h,
                map: Tensor::from_parts(vec![x, y, z, 1], data),
            });
        }
    }
    maps
}

/// Label mask and per-voxel class probabilities for a whole volume.
pub fn segment_volume(volume: &Tensor, spacing: [f64; 3], model: &Model, padding: PadMode) -> Result<(SegmentationMask, Tensor)> {
    let out = run_inference(volume, spacing, model, InferenceOptions { padding, attention: false })?;
    Ok((out.labels, out.probabilities))
}

/// `K·n_h` volume-shaped attention maps, stage-major.
pub fn aggregate_attention(volume: &Tensor, model: &Model, padding: PadMode) -> Result<Vec<AttentionMap>> {
    Ok(run_inference(volume, [1.0; 3], model, InferenceOptions { padding, attention: true })?.attention)
}
