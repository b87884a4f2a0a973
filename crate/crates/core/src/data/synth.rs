//! Deterministic synthetic volumes: ellipsoidal foreground objects on a smooth,
//! noisy background. Used for smoke tests and as a stand-in dataset.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::volume::{Volume, VolumeData};
use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;

/// Accepted foreground fraction range; masks outside it are redrawn.
pub const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.4);

#[derive(Clone, Debug)]
pub struct SyntheticCase {
    pub image: Volume,
    pub mask: SegmentationMask,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    // Rows are the ellipsoid's principal axes.
    axes: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn random(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Self {
        let min_side = *shape.iter().min().unwrap() as f64;
        let center = std::array::from_fn(|a| rng.random_range(0.25..0.75) * shape[a] as f64);
        let radii = std::array::from_fn(|_| rng.random_range(0.1..0.28) * min_side);
        Ellipsoid {
            center,
            radii,
            axes: random_rotation(rng),
        }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut s = 0.0;
        for (axis, r) in self.axes.iter().zip(self.radii) {
            let proj = axis[0] * d[0] + axis[1] * d[1] + axis[2] * d[2];
            s += (proj / r).powi(2);
        }
        s <= 1.0
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // Rotation about z then about x; enough variety for synthetic shapes.
    let (a, b) = (rng.random_range(0.0..PI), rng.random_range(0.0..PI));
    let (ca, sa, cb, sb) = (a.cos(), a.sin(), b.cos(), b.sin());
    [[ca, -sa * cb, sa * sb], [sa, ca * cb, -ca * sb], [0.0, sb, cb]]
}

/// One synthetic image/mask pair. The image has a single channel; the mask
/// labels ellipsoid interiors 1 and everything else 0.
pub fn generate_case(shape: [usize; 3], seed: u64) -> Result<SyntheticCase> {
    if shape.iter().any(|&s| s < 4) {
        return Err(Error::Config(format!("synthetic volumes need every side ≥ 4, got {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [x, y, z] = shape;
    let total = x * y * z;

    let mut labels = vec![0u8; total];
    let mut accepted = false;
    for _ in 0..100 {
        let count = rng.random_range(1..=3);
        let objects: Vec<Ellipsoid> = (0..count).map(|_| Ellipsoid::random(&mut rng, shape)).collect();
        for i in 0..x {
            for j in 0..y {
                for k in 0..z {
                    let p = [i as f64, j as f64, k as f64];
                    labels[(i * y + j) * z + k] = objects.iter().any(|o| o.contains(p)) as u8;
                }
            }
        }
        let frac = labels.iter().filter(|&&l| l == 1).count() as f64 / total as f64;
        if (FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(&frac) {
            accepted = true;
            break;
        }
    }
    if !accepted {
        return Err(Error::Data(format!("could not place foreground objects in a {shape:?} volume")));
    }

    // Low-frequency background: a few random plane waves.
    let waves: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let freq = std::array::from_fn(|a| rng.random_range(-1.5..1.5) * 2.0 * PI / shape[a] as f64);
            (freq, rng.random_range(0.0..2.0 * PI), rng.random_range(0.05..0.15))
        })
        .collect();
    let contrast = rng.random_range(0.8..1.2);
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let mut image = vec![0f32; total];
    for i in 0..x {
        for j in 0..y {
            for k in 0..z {
                let idx = (i * y + j) * z + k;
                let p = [i as f64, j as f64, k as f64];
                let bg: f64 = waves
                    .iter()
                    .map(|(f, phase, amp)| amp * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + phase).cos())
                    .sum();
                let v = bg + contrast * labels[idx] as f64 + noise.sample(&mut rng);
                image[idx] = v as f32;
            }
        }
    }

    let spacing = [1.0; 3];
    Ok(SyntheticCase {
        image: Volume::new([x, y, z, 1], spacing, VolumeData::F32(image))?,
        mask: SegmentationMask::new(shape, labels, spacing)?,
    })
}

/// `count` cases; case `i` is seeded from the `i`-th draw of a generator
/// seeded with `seed`, so the set is reproducible and prefix-stable.
pub fn generate_synthetic_dataset(count: usize, shape: [usize; 3], seed: u64) -> Result<Vec<SyntheticCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.next_u64()).collect();
    seeds.into_iter().map(|s| generate_case(shape, s)).collect()
}
