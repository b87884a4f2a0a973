//! Volume files, dataset manifests and the synthetic dataset generator.

mod manifest;
mod padding;
mod synth;
mod volume;

pub use manifest::{
    load_entry, load_split, split_manifest, zscore, DatasetManifest, LoadedVolume, ManifestEntry, Split, SplitRatios,
};
pub use padding::{pad, source_index, PadMode};
pub use synth::{generate_case, generate_synthetic_dataset, SyntheticCase, FOREGROUND_RANGE};
pub use volume::{read_volume, write_volume, Dtype, Volume, VolumeData, MAGIC};
