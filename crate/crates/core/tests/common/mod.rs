//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use atsg_core::data::{generate_synthetic_dataset, zscore, LoadedVolume};
use atsg_core::metrics::SegmentationMask;
use rand::Rng;

/// Foreground voxels with at least one six-neighbor that is background or
/// outside the grid, as coordinate triples.
pub fn brute_surface(m: &SegmentationMask, class: u8) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = m.shape;
    let at = |x: i64, y: i64, z: i64| -> bool {
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            return false;
        }
        m.labels[(x as usize * ny + y as usize) * nz + z as usize] == class
    };
    let mut out = Vec::new();
    for x in 0..nx as i64 {
        for y in 0..ny as i64 {
            for z in 0..nz as i64 {
                if !at(x, y, z) {
                    continue;
                }
                let steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if steps.iter().any(|(dx, dy, dz)| !at(x + dx, y + dy, z + dz)) {
                    out.push([x as usize, y as usize, z as usize]);
                }
            }
        }
    }
    out
}

/// `numpy.percentile` default ("linear") on an unsorted sample.
pub fn linear_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = (v.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < v.len() {
        v[lo] * (1.0 - frac) + v[lo + 1] * frac
    } else {
        v[lo]
    }
}

/// DSC and, when both masks contain the class, (HD95, ASSD) by comparing every
/// surface voxel of one mask with every surface voxel of the other.
pub fn brute_metrics(a: &SegmentationMask, b: &SegmentationMask, class: u8) -> (f64, Option<(f64, f64)>) {
    let na = a.labels.iter().filter(|&&l| l == class).count();
    let nb = b.labels.iter().filter(|&&l| l == class).count();
    let both = a.labels.iter().zip(&b.labels).filter(|(&x, &y)| x == class && y == class).count();
    let dsc = if na + nb == 0 { 1.0 } else { 2.0 * both as f64 / (na + nb) as f64 };
    if na == 0 || nb == 0 {
        return (dsc, None);
    }
    let sa = brute_surface(a, class);
    let sb = brute_surface(b, class);
    let s = a.spacing;
    let dist = |p: &[usize; 3], q: &[usize; 3]| -> f64 {
        (0..3)
            .map(|i| ((p[i] as f64 - q[i] as f64) * s[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| set.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min);
    let mut all: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
    all.extend(sb.iter().map(|p| nearest(p, &sa)));
    let assd = all.iter().sum::<f64>() / all.len() as f64;
    (dsc, Some((linear_percentile(&all, 95.0), assd)))
}

/// A union of random boxes and balls with labels in `0..classes`.
pub fn random_mask<R: Rng>(rng: &mut R, shape: [usize; 3], spacing: [f64; 3], classes: u8) -> SegmentationMask {
    let [nx, ny, nz] = shape;
    let mut labels = vec![0u8; nx * ny * nz];
    for _ in 0..rng.random_range(1..=4) {
        let class = rng.random_range(1..classes.max(2));
        let c = [
            rng.random_range(0..nx) as f64,
            rng.random_range(0..ny) as f64,
            rng.random_range(0..nz) as f64,
        ];
        let r = rng.random_range(0.5..(nx.max(ny).max(nz) as f64 / 2.5).max(1.0));
        let ball = rng.random_bool(0.5);
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let d = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                    let inside = if ball {
                        d.iter().map(|v| v * v).sum::<f64>() <= r * r
                    } else {
                        d.iter().all(|v| v.abs() <= r)
                    };
                    if inside {
                        labels[(x * ny + y) * nz + z] = class;
                    }
                }
            }
        }
    }
    SegmentationMask::new(shape, labels, spacing).unwrap()
}

/// Generated cases, z-scored, as training/evaluation volumes.
pub fn synthetic_volumes(count: usize, shape: [usize; 3], seed: u64) -> Vec<LoadedVolume> {
    generate_synthetic_dataset(count, shape, seed)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, c)| LoadedVolume {
            name: format!("case_{seed}_{i}"),
            image: zscore(&c.image.to_tensor().unwrap()),
            mask: Some(c.mask),
            spacing: [1.0; 3],
        })
        .collect()
}

/// Two-sided p-value of Student's t by Simpson integration of the density,
/// independent of the incomplete-beta route.
pub fn t_two_sided_by_quadrature(t: f64, nu: f64) -> f64 {
    let ln_c = statrs::function::gamma::ln_gamma((nu + 1.0) / 2.0)
        - statrs::function::gamma::ln_gamma(nu / 2.0)
        - 0.5 * (nu * std::f64::consts::PI).ln();
    let density = |x: f64| (ln_c - (nu + 1.0) / 2.0 * (1.0 + x * x / nu).ln()).exp();
    // P(|T| < t) = 2 ∫_0^t f.
    let n = 200_000;
    let h = t.abs() / n as f64;
    let mut s = density(0.0) + density(t.abs());
    for i in 1..n {
        s += density(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}
