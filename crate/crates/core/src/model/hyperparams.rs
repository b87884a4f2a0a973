use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How patch positions enter the token embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalMode {
    /// Trainable `D×N` table.
    Learned,
    /// Constant 1-D sinusoidal table over the raster patch index.
    FixedSinusoidal,
    None,
}

/// Shape of the segmentation output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// Flattened encoder output mapped to per-voxel class scores of the center patch.
    Voxel,
    /// Per-token class scores, one distribution per patch.
    Patch,
}

/// Where layer normalization sits relative to each residual connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormPlacement {
    Post,
    Pre,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Block side length in voxels.
    pub block: usize,
    /// Patches per axis; must be odd so a center patch exists.
    pub patches_per_axis: usize,
    pub channels: usize,
    /// Number of encoder stages.
    pub stages: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub classes: usize,
    /// Hidden width of the feed-forward sublayer; `None` means `embed_dim`.
    pub ffn_dim: Option<usize>,
    pub pos_mode: PositionalMode,
    pub head_mode: HeadMode,
    pub norm: NormPlacement,
    pub norm_eps: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams::full()
    }
}

impl Hyperparams {
    /// K=7, W=24, n=3, D=1024, D_h=256, n_h=4, binary output.
    pub fn full() -> Self {
        Hyperparams {
            block: 24,
            patches_per_axis: 3,
            channels: 1,
            stages: 7,
            embed_dim: 1024,
            head_dim: 256,
            heads: 4,
            classes: 2,
            ffn_dim: None,
            pos_mode: PositionalMode::Learned,
            head_mode: HeadMode::Voxel,
            norm: NormPlacement::Post,
            norm_eps: 1e-5,
        }
    }

    /// Desk-scale configuration used for gradient checks and synthetic runs:
    /// W=6, n=3, c=1, D=8, D_h=4, n_h=2, K=2.
    pub fn tiny() -> Self {
        Hyperparams {
            block: 6,
            patches_per_axis: 3,
            channels: 1,
            stages: 2,
            embed_dim: 8,
            head_dim: 4,
            heads: 2,
            classes: 2,
            ..Hyperparams::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("block", self.block),
            ("patches_per_axis", self.patches_per_axis),
            ("channels", self.channels),
            ("stages", self.stages),
            ("embed_dim", self.embed_dim),
            ("head_dim", self.head_dim),
            ("heads", self.heads),
            ("classes", self.classes),
            ("ffn_dim", self.ffn_dim()),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.patches_per_axis % 2 == 0 {
            return Err(Error::Config(format!(
                "patches_per_axis must be odd, got {}",
                self.patches_per_axis
            )));
        }
        if self.block % self.patches_per_axis != 0 {
            return Err(Error::Config(format!(
                "block side {} is not divisible by patches_per_axis {}",
                self.block, self.patches_per_axis
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        if self.classes > u8::MAX as usize + 1 {
            return Err(Error::Config("at most 256 classes fit a u8 mask".into()));
        }
        Ok(())
    }

    /// Patch side `w = W / n`.
    pub fn patch_side(&self) -> usize {
        self.block / self.patches_per_axis
    }

    /// Token count `N = n³`.
    pub fn num_patches(&self) -> usize {
        self.patches_per_axis.pow(3)
    }

    /// Raster index of the center patch, `(N − 1) / 2`.
    pub fn center_patch(&self) -> usize {
        (self.num_patches() - 1) / 2
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch_side().pow(3)
    }

    /// Length of a flattened patch, `w³·c`.
    pub fn patch_len(&self) -> usize {
        self.patch_voxels() * self.channels
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_dim.unwrap_or(self.embed_dim)
    }

    /// Voxel offset of the center patch inside a block, `(W − w) / 2`.
    pub fn center_offset(&self) -> usize {
        (self.block - self.patch_side()) / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_defaults_derive_patch_geometry() {
        let hp = Hyperparams::full();
        hp.validate().unwrap();
        assert_eq!(hp.patch_side(), 8);
        assert_eq!(hp.num_patches(), 27);
        assert_eq!(hp.center_patch(), 13);
        assert_eq!(hp.patch_len(), 512);
        assert_eq!(hp.center_offset(), 8);
    }

    #[test]
    fn rejects_bad_geometry() {
        let hp = Hyperparams {
            block: 25,
            ..Hyperparams::full()
        };
        assert!(matches!(hp.validate(), Err(Error::Config(_))));
        let hp = Hyperparams {
            patches_per_axis: 4,
            ..Hyperparams::full()
        };
        assert!(matches!(hp.validate(), Err(Error::Config(_))));
        let hp = Hyperparams {
            heads: 0,
            ..Hyperparams::tiny()
        };
        assert!(hp.validate().is_err());
    }

    #[test]
    fn toml_round_trip_with_partial_override() {
        let hp: Hyperparams = toml::from_str("stages = 3\npos_mode = \"fixed-sinusoidal\"").unwrap();
        assert_eq!(hp.stages, 3);
        assert_eq!(hp.pos_mode, PositionalMode::FixedSinusoidal);
        assert_eq!(hp.embed_dim, 1024);
        assert!(toml::from_str::<Hyperparams>("bogus = 1").is_err());
    }
}
