//! Overlap and surface-distance evaluation of label masks.
//!
//! Surface voxels are foreground voxels with at least one 6-connected
//! neighbor that is background or outside the grid. Surface distances are
//! Euclidean distances between voxel centers in millimetres. HD95 and ASSD
//! are the 95th percentile (linear interpolation) and mean of the pooled
//! directed nearest-surface distances A→B and B→A.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer label grid with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    pub shape: [usize; 3],
    pub labels: Vec<u8>,
    /// Millimetres per voxel along each axis.
    pub spacing: [f64; 3],
}

impl SegmentationMask {
    pub fn new(shape: [usize; 3], labels: Vec<u8>, spacing: [f64; 3]) -> Result<Self> {
        if shape.iter().product::<usize>() != labels.len() {
            return Err(Error::Shape {
                op: "mask",
                lhs: shape.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(SegmentationMask { shape, labels, spacing })
    }

    pub fn empty(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        SegmentationMask {
            shape,
            labels: vec![0; shape.iter().product()],
            spacing,
        }
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class_id).count()
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= classes) {
            Some(l) => Err(Error::Data(format!("mask label {l} outside [0, {classes})"))),
            None => Ok(()),
        }
    }

    /// Boolean surface map for `class_id`.
    pub fn surface(&self, class_id: u8) -> Vec<bool> {
        let [nx, ny, nz] = self.shape;
        let fg = |x: isize, y: isize, z: isize| {
            x >= 0
                && y >= 0
                && z >= 0
                && (x as usize) < nx
                && (y as usize) < ny
                && (z as usize) < nz
                && self.labels[self.index(x as usize, y as usize, z as usize)] == class_id
        };
        let mut out = vec![false; self.labels.len()];
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                    if !fg(xi, yi, zi) {
                        continue;
                    }
                    let interior = fg(xi - 1, yi, zi)
                        && fg(xi + 1, yi, zi)
                        && fg(xi, yi - 1, zi)
                        && fg(xi, yi + 1, zi)
                        && fg(xi, yi, zi - 1)
                        && fg(xi, yi, zi + 1);
                    out[self.index(x, y, z)] = !interior;
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dsc: f64,
    pub hd95_mm: f64,
    pub assd_mm: f64,
}

fn same_grid(a: &SegmentationMask, b: &SegmentationMask) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op: "metric",
            lhs: a.shape.to_vec(),
            rhs: b.shape.to_vec(),
        });
    }
    Ok(())
}

/// Dice similarity `2|A∩B| / (|A|+|B|)` for one class; 1 when both are empty.
pub fn dsc(a: &SegmentationMask, b: &SegmentationMask, class_id: u8) -> Result<f64> {
    same_grid(a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&la, &lb) in a.labels.iter().zip(&b.labels) {
        let (ia, ib) = (la == class_id, lb == class_id);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Exact squared Euclidean distance transform of a 1-D sampled function with
/// sample spacing `step` (lower envelope of parabolas).
fn edt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let s2 = step * step;
    let mut sites: Vec<usize> = Vec::with_capacity(f.len());
    let mut bounds: Vec<f64> = Vec::with_capacity(f.len());
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        let mut crossing = f64::NEG_INFINITY;
        while let Some(&p) = sites.last() {
            let qf = q as f64;
            let pf = p as f64;
            crossing = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
            if crossing <= *bounds.last().unwrap() {
                sites.pop();
                bounds.pop();
                crossing = f64::NEG_INFINITY;
            } else {
                break;
            }
        }
        sites.push(q);
        bounds.push(if sites.len() == 1 { f64::NEG_INFINITY } else { crossing });
    }
    if sites.is_empty() {
        out.iter_mut().for_each(|v| *v = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while j + 1 < sites.len() && bounds[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - sites[j] as f64;
        *o = s2 * d * d + f[sites[j]];
    }
}

/// Squared distance (mm²) from every voxel to the nearest `true` voxel of `seeds`.
fn squared_distance_map(seeds: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = shape;
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let idx = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;
    let longest = nx.max(ny).max(nz);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    // axis 2
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                line[z] = d[idx(x, y, z)];
            }
            edt_1d(&line[..nz], spacing[2], &mut out[..nz]);
            for z in 0..nz {
                d[idx(x, y, z)] = out[z];
            }
        }
    }
    // axis 1
    for x in 0..nx {
        for z in 0..nz {
            for y in 0..ny {
                line[y] = d[idx(x, y, z)];
            }
            edt_1d(&line[..ny], spacing[1], &mut out[..ny]);
            for y in 0..ny {
                d[idx(x, y, z)] = out[y];
            }
        }
    }
    // axis 0
    for y in 0..ny {
        for z in 0..nz {
            for x in 0..nx {
                line[x] = d[idx(x, y, z)];
            }
            edt_1d(&line[..nx], spacing[0], &mut out[..nx]);
            for x in 0..nx {
                d[idx(x, y, z)] = out[x];
            }
        }
    }
    d
}

/// Linear-interpolation percentile of an ascending slice, `q` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pooled directed surface distances A→B followed by B→A, in mm.
pub fn surface_distances(a: &SegmentationMask, b: &SegmentationMask, class_id: u8) -> Result<Vec<f64>> {
    same_grid(a, b)?;
    if a.spacing != b.spacing {
        return Err(Error::Data(format!(
            "spacing differs: {:?} vs {:?}",
            a.spacing, b.spacing
        )));
    }
    if a.count(class_id) == 0 || b.count(class_id) == 0 {
        return Err(Error::UndefinedMetric(format!(
            "surface distance needs foreground of class {class_id} in both masks"
        )));
    }
    let sa = a.surface(class_id);
    let sb = b.surface(class_id);
    let to_b = squared_distance_map(&sb, a.shape, a.spacing);
    let to_a = squared_distance_map(&sa, a.shape, a.spacing);
    let mut out: Vec<f64> = sa
        .iter()
        .zip(&to_b)
        .filter(|(s, _)| **s)
        .map(|(_, d)| d.sqrt())
        .collect();
    out.extend(sb.iter().zip(&to_a).filter(|(s, _)| **s).map(|(_, d)| d.sqrt()));
    Ok(out)
}

/// `(hd95_mm, assd_mm)` for one class.
pub fn surface_distance_stats(a: &SegmentationMask, b: &SegmentationMask, class_id: u8) -> Result<(f64, f64)> {
    let mut d = surface_distances(a, b, class_id)?;
    d.sort_by(f64::total_cmp);
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    Ok((percentile_sorted(&d, 95.0), mean))
}

/// DSC, HD95 and ASSD of `pred` against `truth` for one class.
pub fn evaluate(pred: &SegmentationMask, truth: &SegmentationMask, class_id: u8) -> Result<MetricReport> {
    let dsc = dsc(pred, truth, class_id)?;
    let (hd95_mm, assd_mm) = surface_distance_stats(pred, truth, class_id)?;
    Ok(MetricReport { dsc, hd95_mm, assd_mm })
}
