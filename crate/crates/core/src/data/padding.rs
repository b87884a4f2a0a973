//! Border padding of `X×Y×Z×C` grids.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadMode {
    /// Symmetric reflection: the border voxel is repeated (`…c b a | a b c…`),
    /// so the padded signal is periodic with period `2n`.
    #[default]
    Mirror,
    Zero,
}

/// Source index for padded coordinate `i` (already shifted by the low pad)
/// on an axis of extent `n`, or `None` for zero padding outside the grid.
pub fn source_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    let n_i = n as isize;
    if (0..n_i).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Mirror => {
            let period = 2 * n_i;
            let r = i.rem_euclid(period);
            Some(if r < n_i { r } else { period - 1 - r } as usize)
        }
    }
}

/// Pads every spatial axis by `pads[a] = (low, high)`; channels are untouched.
/// Returns the padded data and its shape.
pub fn pad<T: Copy + Default>(data: &[T], shape: [usize; 4], pads: [(usize, usize); 3], mode: PadMode) -> (Vec<T>, [usize; 4]) {
    let [x, y, z, c] = shape;
    let out_shape = [
        x + pads[0].0 + pads[0].1,
        y + pads[1].0 + pads[1].1,
        z + pads[2].0 + pads[2].1,
        c,
    ];
    let map_axis = |a: usize, n: usize| -> Vec<Option<usize>> {
        (0..out_shape[a])
            .map(|i| source_index(i as isize - pads[a].0 as isize, n, mode))
            .collect()
    };
    let (mx, my, mz) = (map_axis(0, x), map_axis(1, y), map_axis(2, z));
    let mut out = vec![T::default(); out_shape.iter().product()];
    let mut dst = 0;
    for sx in &mx {
        for sy in &my {
            for sz in &mz {
                if let (Some(i), Some(j), Some(k)) = (sx, sy, sz) {
                    let src = ((i * y + j) * z + k) * c;
                    out[dst..dst + c].copy_from_slice(&data[src..src + c]);
                }
                dst += c;
            }
        }
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_indices_repeat_the_border() {
        let idx: Vec<usize> = (-4..7).map(|i| source_index(i, 3, PadMode::Mirror).unwrap()).collect();
        assert_eq!(idx, [2, 2, 1, 0, 0, 1, 2, 2, 1, 0, 0]);
        assert_eq!(source_index(-1, 3, PadMode::Zero), None);
    }

    #[test]
    fn mirror_pads_far_beyond_the_extent() {
        // Padding wider than the axis keeps reflecting.
        let (out, shape) = pad(&[1.0, 2.0], [2, 1, 1, 1], [(5, 0), (0, 0), (0, 0)], PadMode::Mirror);
        assert_eq!(shape, [7, 1, 1, 1]);
        assert_eq!(out, [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn zero_padding_keeps_channels_together() {
        let (out, shape) = pad(&[1u8, 2], [1, 1, 1, 2], [(0, 0), (1, 0), (0, 1)], PadMode::Zero);
        assert_eq!(shape, [1, 2, 2, 2]);
        assert_eq!(out, [0, 0, 0, 0, 1, 2, 0, 0]);
    }
}
