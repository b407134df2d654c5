//! Separable linear resizing with the half-pixel (cell-centre) convention.

use ndarray::{Array3, ArrayView3, Axis};

/// Interpolation taps for one output index: `out = (1 - frac)·in[lo] + frac·in[hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

fn resize_axis(input: ArrayView3<'_, f64>, axis: usize, out_len: usize) -> Array3<f64> {
    let in_len = input.shape()[axis];
    let mut shape = [input.shape()[0], input.shape()[1], input.shape()[2]];
    shape[axis] = out_len;
    let mut out = Array3::zeros(shape);
    let taps = linear_taps(in_len, out_len);
    for (o, tap) in taps.iter().enumerate() {
        let lo = input.index_axis(Axis(axis), tap.lo);
        let hi = input.index_axis(Axis(axis), tap.hi);
        let mut dst = out.index_axis_mut(Axis(axis), o);
        ndarray::Zip::from(&mut dst)
            .and(&lo)
            .and(&hi)
            .for_each(|d, &a, &b| *d = a + tap.frac * (b - a));
    }
    out
}

/// Trilinear resize of a scalar volume to `shape`.
pub fn resize_trilinear(input: ArrayView3<'_, f64>, shape: [usize; 3]) -> Array3<f64> {
    let mut current = input.to_owned();
    for (axis, &len) in shape.iter().enumerate() {
        if current.shape()[axis] != len {
            current = resize_axis(current.view(), axis, len);
        }
    }
    current
}

/// Samples `volume` at a continuous voxel position; zero outside the grid.
pub(crate) fn sample_trilinear(volume: &ArrayView3<'_, f64>, p: [f64; 3]) -> f64 {
    let dims = volume.shape();
    let mut base = [0isize; 3];
    let mut frac = [0.0; 3];
    for d in 0..3 {
        let f = p[d].floor();
        base[d] = f as isize;
        frac[d] = p[d] - f;
        if base[d] < -1 || base[d] >= dims[d] as isize {
            return 0.0;
        }
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut weight = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for d in 0..3 {
            let bit = (corner >> d) & 1;
            let i = base[d] + bit as isize;
            weight *= if bit == 1 { frac[d] } else { 1.0 - frac[d] };
            if i < 0 || i >= dims[d] as isize {
                inside = false;
            } else {
                idx[d] = i as usize;
            }
        }
        if inside && weight != 0.0 {
            acc += weight * volume[idx];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_identity_for_equal_lengths() {
        for (o, tap) in linear_taps(7, 7).into_iter().enumerate() {
            assert_eq!(tap.lo, o);
            assert_eq!(tap.frac, 0.0);
        }
    }

    #[test]
    fn upsampling_preserves_constants() {
        let v = Array3::from_elem((3, 4, 5), 2.5);
        let up = resize_trilinear(v.view(), [6, 8, 10]);
        assert!(up.iter().all(|&x| (x - 2.5).abs() < 1e-12));
    }

    #[test]
    fn samples_grid_points_exactly() {
        let v = Array3::from_shape_fn((4, 4, 4), |(x, y, z)| (x * 16 + y * 4 + z) as f64);
        assert_eq!(sample_trilinear(&v.view(), [1.0, 2.0, 3.0]), v[[1, 2, 3]]);
        assert_eq!(sample_trilinear(&v.view(), [-2.0, 0.0, 0.0]), 0.0);
        let mid = sample_trilinear(&v.view(), [1.5, 2.0, 3.0]);
        assert!((mid - 0.5 * (v[[1, 2, 3]] + v[[2, 2, 3]])).abs() < 1e-12);
    }
}
