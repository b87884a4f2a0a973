//! Dataset manifests: which files exist and which split each belongs to.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::volume::read_volume;
use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// Fractions of the dataset assigned to each split; must sum to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    /// A third held out for testing; a fifth of the remaining pool for
    /// validation.
    fn default() -> Self {
        SplitRatios {
            train: 8.0 / 15.0,
            val: 2.0 / 15.0,
            test: 1.0 / 3.0,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must be in [0,1] and sum to 1, got {r:?}")));
        }
        Ok(())
    }

    /// Split sizes for `n` volumes: the test share is rounded first, then the
    /// validation share of the remaining pool; every split with a positive
    /// ratio receives at least one volume.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let ratios = [self.train, self.val, self.test];
        let wanted = ratios.iter().filter(|&&r| r > 0.0).count();
        if n < wanted {
            return Err(Error::Data(format!("{n} volumes cannot fill {wanted} non-empty splits")));
        }
        let test = (n as f64 * self.test).round() as usize;
        let pool = n - test.min(n);
        let pool_ratio = self.train + self.val;
        let val = if pool_ratio > 0.0 {
            (pool as f64 * self.val / pool_ratio).round() as usize
        } else {
            0
        };
        let mut counts = [pool - val, val, test.min(n)];
        for s in 0..3 {
            if ratios[s] > 0.0 && counts[s] == 0 {
                let donor = (0..3).max_by_key(|&i| counts[i]).unwrap();
                counts[donor] -= 1;
                counts[s] += 1;
            }
        }
        Ok(counts)
    }
}

/// Shuffles `items` with a ChaCha8 generator seeded by `seed` and assigns
/// them to train/val/test in that order.
pub fn split_manifest(items: &[(PathBuf, Option<PathBuf>)], ratios: SplitRatios, seed: u64) -> Result<DatasetManifest> {
    let counts = ratios.counts(items.len())?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split_of = vec![Split::Train; items.len()];
    for (rank, &i) in order.iter().enumerate() {
        split_of[i] = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    let manifest = DatasetManifest {
        seed,
        entries: items
            .iter()
            .zip(split_of)
            .map(|((image, mask), split)| ManifestEntry {
                image: image.clone(),
                mask: mask.clone(),
                split,
            })
            .collect(),
    };
    manifest.validate()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.image) {
                return Err(Error::Data(format!("{} listed more than once", e.image.display())));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Writes pretty JSON. Paths are stored as given.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; relative paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Header {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            if e.image.is_relative() {
                e.image = base.join(&e.image);
            }
            if let Some(mask) = e.mask.as_mut().filter(|m| m.is_relative()) {
                *mask = base.join(&*mask);
            }
        }
        m.validate()?;
        Ok(m)
    }
}

/// A volume ready for training or evaluation: z-scored image plus its mask.
#[derive(Clone, Debug)]
pub struct LoadedVolume {
    pub name: String,
    /// `X×Y×Z×C`, each channel normalized to zero mean and unit variance.
    pub image: Tensor,
    pub mask: Option<SegmentationMask>,
    pub spacing: [f64; 3],
}

impl LoadedVolume {
    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[0], s[1], s[2]]
    }

    pub fn labeled_mask(&self) -> Result<&SegmentationMask> {
        self.mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("volume {} has no mask", self.name)))
    }
}

/// Per-channel z-score of an `X×Y×Z×C` tensor. Constant channels are only
/// centered.
pub fn zscore(image: &Tensor) -> Tensor {
    let c = *image.shape().last().unwrap_or(&1);
    let mut data = image.data().to_vec();
    let n = (data.len() / c.max(1)) as f64;
    for ch in 0..c {
        let mean = data.iter().skip(ch).step_by(c).sum::<f64>() / n;
        let var = data.iter().skip(ch).step_by(c).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        data.iter_mut().skip(ch).step_by(c).for_each(|v| *v = (*v - mean) * scale);
    }
    Tensor::from_parts(image.shape().to_vec(), data)
}

/// Loads, validates and normalizes one manifest entry. Masks must match the
/// image's shape and spacing and hold labels below `classes`.
pub fn load_entry(entry: &ManifestEntry, classes: usize) -> Result<LoadedVolume> {
    let vol = read_volume(&entry.image)?;
    let image = vol.to_tensor().map_err(|e| match e {
        Error::NonFinite { .. } => Error::Data(format!("{} contains non-finite intensities", entry.image.display())),
        other => other,
    })?;
    let mask = match &entry.mask {
        None => None,
        Some(p) => {
            let m = read_volume(p)?.to_mask()?;
            if m.shape != vol.spatial_shape() || m.spacing != vol.spacing() {
                return Err(Error::Data(format!(
                    "mask {} ({:?}, {:?}) does not match image ({:?}, {:?})",
                    p.display(),
                    m.shape,
                    m.spacing,
                    vol.spatial_shape(),
                    vol.spacing()
                )));
            }
            m.check_classes(classes)
                .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            Some(m)
        }
    };
    Ok(LoadedVolume {
        name: entry
            .image
            .file_stem()
            .map_or_else(|| entry.image.display().to_string(), |s| s.to_string_lossy().into_owned()),
        image: zscore(&image),
        mask,
        spacing: vol.spacing(),
    })
}

pub fn load_split(manifest: &DatasetManifest, split: Split, classes: usize) -> Result<Vec<LoadedVolume>> {
    manifest.split(split).into_iter().map(|e| load_entry(e, classes)).collect()
}
