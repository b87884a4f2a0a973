use std::collections::HashSet;
use std::fs;
use std::path::PathBuf;

use atsg_core::data::{
    generate_synthetic_dataset, load_entry, read_volume, split_manifest, write_volume, DatasetManifest, ManifestEntry,
    Split, SplitRatios, Volume, VolumeData, FOREGROUND_RANGE,
};
use atsg_core::metrics::SegmentationMask;
use atsg_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_f32_volume_round_trips_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data: Vec<f32> = (0..9 * 7 * 5 * 2)
        .map(|i| match i % 50 {
            0 => f32::MIN_POSITIVE,
            1 => -0.0,
            _ => rng.random_range(-1e6f32..1e6),
        })
        .collect();
    let v = Volume::new([9, 7, 5, 2], [0.8, 1.1, 2.5], VolumeData::F32(data.clone())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.avol");
    write_volume(&path, &v).unwrap();
    let back = read_volume(&path).unwrap();
    assert_eq!(back.shape(), [9, 7, 5, 2]);
    assert_eq!(back.spacing(), [0.8, 1.1, 2.5]);
    let VolumeData::F32(got) = back.data() else { panic!("dtype changed") };
    assert!(got.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    // Writing again reproduces the file byte for byte.
    let again = dir.path().join("w.avol");
    write_volume(&again, &back).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn truncated_payload_is_a_length_mismatch() {
    let v = Volume::new([3, 3, 3, 1], [1.0; 3], VolumeData::U8(vec![1; 27])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.avol");
    let mut bytes = v.encode();
    bytes.truncate(bytes.len() - 4);
    fs::write(&path, bytes).unwrap();
    let err = read_volume(&path).unwrap_err();
    assert!(matches!(err, Error::LengthMismatch { .. }), "{err}");
    assert!(err.is_data());
}

#[test]
fn out_of_range_label_is_rejected_when_loading_for_training() {
    let dir = tempfile::tempdir().unwrap();
    let image = Volume::new([4, 4, 4, 1], [1.0; 3], VolumeData::F32(vec![0.5; 64])).unwrap();
    let mut labels = vec![0u8; 64];
    labels[10] = 3;
    let mask = Volume::from_mask(&SegmentationMask::new([4, 4, 4], labels, [1.0; 3]).unwrap());
    write_volume(dir.path().join("i.avol"), &image).unwrap();
    write_volume(dir.path().join("m.avol"), &mask).unwrap();
    let entry = ManifestEntry {
        image: dir.path().join("i.avol"),
        mask: Some(dir.path().join("m.avol")),
        split: Split::Train,
    };
    // Reading the file itself is fine; the class range is a training-time check.
    assert!(read_volume(&entry.mask.clone().unwrap()).is_ok());
    assert!(matches!(load_entry(&entry, 2), Err(Error::Data(_))));
    assert!(load_entry(&entry, 4).is_ok());
}

#[test]
fn generator_is_reproducible_and_in_range() {
    let a = generate_synthetic_dataset(100, [12, 12, 12], 31).unwrap();
    let b = generate_synthetic_dataset(3, [12, 12, 12], 31).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image.encode(), y.image.encode());
        assert_eq!(x.mask, y.mask);
    }
    let fractions: Vec<f64> = a
        .iter()
        .map(|c| c.mask.count(1) as f64 / c.mask.labels.len() as f64)
        .collect();
    assert!(fractions.iter().all(|f| (FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(f)));
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!(mean > 0.05 && mean < 0.3, "mean foreground fraction {mean}");
    // Every case is a different volume.
    let distinct: HashSet<Vec<u8>> = a.iter().map(|c| c.mask.labels.clone()).collect();
    assert_eq!(distinct.len(), 100);
}

fn items(n: usize) -> Vec<(PathBuf, Option<PathBuf>)> {
    (0..n)
        .map(|i| (PathBuf::from(format!("img{i}.avol")), Some(PathBuf::from(format!("img{i}_mask.avol")))))
        .collect()
}

#[test]
fn documented_split_examples() {
    let ten = split_manifest(&items(10), SplitRatios::default(), 42).unwrap();
    let again = split_manifest(&items(10), SplitRatios::default(), 42).unwrap();
    assert_eq!(ten, again);
    assert_eq!([Split::Train, Split::Val, Split::Test].map(|s| ten.split(s).len()), [6, 1, 3]);

    let all_train = SplitRatios {
        train: 1.0,
        val: 0.0,
        test: 0.0,
    };
    let m = split_manifest(&items(7), all_train, 0).unwrap();
    assert!(m.entries.iter().all(|e| e.split == Split::Train));

    let pool = SplitRatios {
        train: 0.8,
        val: 0.2,
        test: 0.0,
    };
    assert_eq!(pool.counts(25).unwrap(), [20, 5, 0]);
    assert!(matches!(SplitRatios::default().counts(2), Err(Error::Data(_))));
}

#[test]
fn manifest_paths_resolve_against_the_manifest_directory() {
    let dir = tempfile::tempdir().unwrap();
    let m = split_manifest(&items(4), SplitRatios::default(), 1).unwrap();
    m.save(dir.path().join("manifest.json")).unwrap();
    let back = DatasetManifest::load(dir.path().join("manifest.json")).unwrap();
    for (a, b) in m.entries.iter().zip(&back.entries) {
        assert_eq!(b.image, dir.path().join(&a.image));
        assert_eq!(b.split, a.split);
    }
}

proptest! {
    #[test]
    fn split_is_a_deterministic_partition(n in 3usize..80, seed in any::<u64>(), t in 0.2f64..0.7) {
        let ratios = SplitRatios { train: t, val: (1.0 - t) / 3.0, test: 1.0 - t - (1.0 - t) / 3.0 };
        let m = split_manifest(&items(n), ratios, seed).unwrap();
        prop_assert_eq!(&m, &split_manifest(&items(n), ratios, seed).unwrap());
        prop_assert_eq!(m.entries.len(), n);
        let mut seen = HashSet::new();
        let mut total = 0;
        for s in [Split::Train, Split::Val, Split::Test] {
            let part = m.split(s);
            prop_assert!(!part.is_empty());
            for e in part {
                prop_assert!(seen.insert(e.image.clone()));
                total += 1;
            }
        }
        prop_assert_eq!(total, n);
    }
}
