//! Training blocks and self-supervised examples.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{pad, PadMode};
use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::model::Hyperparams;
use crate::tensor::Tensor;

/// Draws `W×W×W×c` blocks from one volume. Axes shorter than `W` are mirror
/// padded up to `W` (low side gets the smaller half). A block is "foreground"
/// when its center patch holds at least one nonzero label.
#[derive(Debug)]
pub struct BlockSampler {
    image: Vec<f64>,
    labels: Option<Vec<u8>>,
    shape: [usize; 4],
    block: usize,
    patch: usize,
    offset: usize,
    foreground: Vec<[usize; 3]>,
    warned: AtomicBool,
}

impl BlockSampler {
    pub fn new(image: &Tensor, mask: Option<&SegmentationMask>, hp: &Hyperparams) -> Result<Self> {
        let shape: [usize; 4] = image
            .shape()
            .try_into()
            .map_err(|_| Error::Data(format!("expected an X×Y×Z×C volume, got shape {:?}", image.shape())))?;
        if shape[3] != hp.channels {
            return Err(Error::Data(format!(
                "volume has {} channels, model expects {}",
                shape[3], hp.channels
            )));
        }
        if shape[..3].contains(&0) {
            return Err(Error::Data(format!("volume {shape:?} is empty")));
        }
        if let Some(m) = mask {
            if m.shape != [shape[0], shape[1], shape[2]] {
                return Err(Error::Data(format!("mask {:?} does not match volume {shape:?}", m.shape)));
            }
        }
        let w_big = hp.block;
        let pads: [(usize, usize); 3] = std::array::from_fn(|a| {
            let r = w_big.saturating_sub(shape[a]);
            (r / 2, r - r / 2)
        });
        let (image, padded) = pad(image.data(), shape, pads, PadMode::Mirror);
        let labels = mask.map(|m| pad(&m.labels, [shape[0], shape[1], shape[2], 1], pads, PadMode::Mirror).0);
        let mut s = BlockSampler {
            image,
            labels,
            shape: padded,
            block: w_big,
            patch: hp.patch_side(),
            offset: hp.center_offset(),
            foreground: Vec::new(),
            warned: AtomicBool::new(false),
        };
        s.foreground = s.find_foreground_origins();
        Ok(s)
    }

    /// Number of valid block origins along each axis.
    pub fn origin_extent(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.shape[a] - self.block + 1)
    }

    pub fn foreground_origins(&self) -> &[[usize; 3]] {
        &self.foreground
    }

    fn find_foreground_origins(&self) -> Vec<[usize; 3]> {
        let Some(labels) = &self.labels else {
            return Vec::new();
        };
        let [x, y, z, _] = self.shape;
        // Summed-volume table of foreground indicators.
        let (sy, sz) = (y + 1, z + 1);
        let mut table = vec![0u32; (x + 1) * sy * sz];
        let at = |i: usize, j: usize, k: usize| (i * sy + j) * sz + k;
        for i in 0..x {
            for j in 0..y {
                for k in 0..z {
                    let fg = (labels[(i * y + j) * z + k] != 0) as u32;
                    table[at(i + 1, j + 1, k + 1)] = fg + table[at(i, j + 1, k + 1)] + table[at(i + 1, j, k + 1)]
                        + table[at(i + 1, j + 1, k)]
                        - table[at(i, j, k + 1)]
                        - table[at(i, j + 1, k)]
                        - table[at(i + 1, j, k)]
                        + table[at(i, j, k)];
                }
            }
        }
        let box_sum = |lo: [usize; 3], hi: [usize; 3]| -> i64 {
            let t = |i, j, k| table[at(i, j, k)] as i64;
            t(hi[0], hi[1], hi[2]) - t(lo[0], hi[1], hi[2]) - t(hi[0], lo[1], hi[2]) - t(hi[0], hi[1], lo[2])
                + t(lo[0], lo[1], hi[2])
                + t(lo[0], hi[1], lo[2])
                + t(hi[0], lo[1], lo[2])
                - t(lo[0], lo[1], lo[2])
        };
        let ext = self.origin_extent();
        let mut out = Vec::new();
        for i in 0..ext[0] {
            for j in 0..ext[1] {
                for k in 0..ext[2] {
                    let lo = [i + self.offset, j + self.offset, k + self.offset];
                    let hi = lo.map(|v| v + self.patch);
                    if box_sum(lo, hi) > 0 {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        out
    }

    /// With probability `fg_fraction`, an origin drawn uniformly from those
    /// whose center patch contains foreground; otherwise uniform over all
    /// origins. Falls back to uniform sampling when there is no foreground.
    pub fn sample_origin<R: Rng + ?Sized>(&self, rng: &mut R, fg_fraction: f64) -> [usize; 3] {
        let forced = rng.random::<f64>() < fg_fraction;
        if forced {
            if !self.foreground.is_empty() {
                return self.foreground[rng.random_range(0..self.foreground.len())];
            }
            if !self.warned.swap(true, Ordering::Relaxed) {
                log::warn!("no foreground in volume; foreground-forced samples fall back to uniform");
            }
        }
        let ext = self.origin_extent();
        std::array::from_fn(|a| rng.random_range(0..ext[a]))
    }

    /// The `W×W×W×c` block at `origin`.
    pub fn block_at(&self, origin: [usize; 3]) -> Tensor {
        let [_, y, z, c] = self.shape;
        let w = self.block;
        let mut data = Vec::with_capacity(w * w * w * c);
        for i in 0..w {
            for j in 0..w {
                let row = (((origin[0] + i) * y + origin[1] + j) * z + origin[2]) * c;
                data.extend_from_slice(&self.image[row..row + w * c]);
            }
        }
        Tensor::from_parts(vec![w, w, w, c], data)
    }

    /// Labels of the center patch of the block at `origin`, row-major `w³`.
    pub fn center_labels_at(&self, origin: [usize; 3]) -> Option<Vec<u8>> {
        let labels = self.labels.as_ref()?;
        let [_, y, z, _] = self.shape;
        let (p, o) = (self.patch, self.offset);
        let mut out = Vec::with_capacity(p * p * p);
        for i in 0..p {
            for j in 0..p {
                let row = ((origin[0] + o + i) * y + origin[1] + o + j) * z + origin[2] + o;
                out.extend_from_slice(&labels[row..row + p]);
            }
        }
        Some(out)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, fg_fraction: f64) -> (Tensor, Option<Vec<u8>>) {
        let o = self.sample_origin(rng, fg_fraction);
        (self.block_at(o), self.center_labels_at(o))
    }
}

/// One training block and the labels of its center patch.
pub fn sample_training_block<R: Rng + ?Sized>(
    volume: &Tensor,
    mask: &SegmentationMask,
    hp: &Hyperparams,
    fg_fraction: f64,
    rng: &mut R,
) -> Result<(Tensor, Vec<u8>)> {
    let s = BlockSampler::new(volume, Some(mask), hp)?;
    let (block, labels) = s.sample(rng, fg_fraction);
    Ok((block, labels.expect("sampler has labels")))
}

fn check_block(block: &Tensor, hp: &Hyperparams) -> Result<()> {
    let w = hp.block;
    if block.shape() != [w, w, w, hp.channels] {
        return Err(Error::Shape {
            op: "block",
            lhs: block.shape().to_vec(),
            rhs: vec![w, w, w, hp.channels],
        });
    }
    block.check_finite("block")
}

/// The `w×w×w×c` center patch of a block.
pub fn center_patch(block: &Tensor, hp: &Hyperparams) -> Result<Tensor> {
    check_block(block, hp)?;
    let (w_big, p, o, c) = (hp.block, hp.patch_side(), hp.center_offset(), hp.channels);
    let mut data = Vec::with_capacity(p * p * p * c);
    for i in 0..p {
        for j in 0..p {
            let row = (((o + i) * w_big + o + j) * w_big + o) * c;
            data.extend_from_slice(&block.data()[row..row + p * c]);
        }
    }
    Ok(Tensor::from_parts(vec![p, p, p, c], data))
}

/// Noise variance giving `snr_db` relative to the block's own variance.
pub fn noise_variance(block: &Tensor, snr_db: f64) -> f64 {
    let n = block.len() as f64;
    let mean = block.sum() / n;
    let power = block.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    power / 10f64.powf(snr_db / 10.0)
}

/// Denoising example: the block plus i.i.d. Gaussian noise at `snr_db`, and
/// the clean center patch as target.
pub fn make_denoising_example<R: Rng + ?Sized>(
    block: &Tensor,
    hp: &Hyperparams,
    snr_db: f64,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let target = center_patch(block, hp)?;
    let var = noise_variance(block, snr_db);
    if var == 0.0 {
        if snr_db.is_finite() {
            log::warn!("constant block: denoising example has no noise");
        }
        return Ok((block.clone(), target));
    }
    let sigma = var.sqrt();
    let data = block
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        })
        .collect();
    Ok((Tensor::from_parts(block.shape().to_vec(), data), target))
}

/// Inpainting example: the block with its center patch zeroed, and the
/// original center patch as target.
pub fn make_inpainting_example(block: &Tensor, hp: &Hyperparams) -> Result<(Tensor, Tensor)> {
    let target = center_patch(block, hp)?;
    let (w_big, p, o, c) = (hp.block, hp.patch_side(), hp.center_offset(), hp.channels);
    let mut masked = block.clone();
    let data = masked.data_mut();
    for i in 0..p {
        for j in 0..p {
            let row = (((o + i) * w_big + o + j) * w_big + o) * c;
            data[row..row + p * c].fill(0.0);
        }
    }
    Ok((masked, target))
}
