//! CPU kernels for single-sample 3D activations, shape `[channels, x, y, z]`,
//! with their adjoints.

use ndarray::Array4;
use rayon::prelude::*;

use crate::resample::{linear_taps, Tap};

pub type Activation = Array4<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.pow(3)
    }

    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|n| self.out_len(n))
    }
}

fn dims3(a: &Activation) -> [usize; 3] {
    let s = a.shape();
    [s[1], s[2], s[3]]
}

/// Output index range along one axis whose input index `o·stride + k − pad`
/// stays inside `[0, n)`.
fn valid_range(k: usize, pad: usize, stride: usize, n: usize, out: usize) -> std::ops::Range<usize> {
    // o·s + k ≥ pad
    let start = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o·s + k − pad ≤ n − 1
    let limit = n + pad;
    let end = if limit > k { ((limit - k - 1) / stride + 1).min(out) } else { 0 };
    start..end.max(start)
}

/// Visits every (output row, input row, output column range) triple touched by
/// kernel tap `(kx, ky)`. Rows run along the last (contiguous) axis.
fn for_each_row(
    geo: &ConvGeometry,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    kx: usize,
    ky: usize,
    mut f: impl FnMut(usize, usize),
) {
    let rx = valid_range(kx, geo.pad, geo.stride, in_dims[0], out_dims[0]);
    let ry = valid_range(ky, geo.pad, geo.stride, in_dims[1], out_dims[1]);
    for ox in rx {
        let ix = ox * geo.stride + kx - geo.pad;
        for oy in ry.clone() {
            let iy = oy * geo.stride + ky - geo.pad;
            f(
                (ox * out_dims[1] + oy) * out_dims[2],
                (ix * in_dims[1] + iy) * in_dims[2],
            );
        }
    }
}

pub fn conv3d(
    input: &Activation,
    weight: &[f64],
    bias: Option<&[f64]>,
    geo: &ConvGeometry,
) -> Activation {
    let in_dims = dims3(input);
    let out_dims = geo.out_dims(in_dims);
    let in_vol: usize = in_dims.iter().product();
    let out_vol: usize = out_dims.iter().product();
    let k = geo.kernel;
    let k3 = k * k * k;
    let x = input.as_slice().expect("standard layout");
    let mut out = vec![0.0; geo.out_channels * out_vol];
    out.par_chunks_mut(out_vol)
        .enumerate()
        .for_each(|(oc, dst)| {
            if let Some(b) = bias {
                dst.fill(b[oc]);
            }
            for ic in 0..geo.in_channels {
                let src = &x[ic * in_vol..(ic + 1) * in_vol];
                let w = &weight[(oc * geo.in_channels + ic) * k3..][..k3];
                for kx in 0..k {
                    for ky in 0..k {
                        for kz in 0..k {
                            let wv = w[(kx * k + ky) * k + kz];
                            if wv == 0.0 {
                                continue;
                            }
                            let rz = valid_range(kz, geo.pad, geo.stride, in_dims[2], out_dims[2]);
                            for_each_row(geo, in_dims, out_dims, kx, ky, |o_row, i_row| {
                                let d = &mut dst[o_row..o_row + out_dims[2]];
                                let s = &src[i_row..i_row + in_dims[2]];
                                if geo.stride == 1 {
                                    let shift = kz as isize - geo.pad as isize;
                                    let (a, b) = (rz.start, rz.end);
                                    let s = &s[(a as isize + shift) as usize..(b as isize + shift) as usize];
                                    for (dv, sv) in d[a..b].iter_mut().zip(s) {
                                        *dv += wv * sv;
                                    }
                                } else {
                                    for oz in rz.clone() {
                                        d[oz] += wv * s[oz * geo.stride + kz - geo.pad];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        });
    Array4::from_shape_vec(
        (geo.out_channels, out_dims[0], out_dims[1], out_dims[2]),
        out,
    )
    .expect("shape")
}

/// Gradients of `conv3d` with respect to its input, weight and bias.
pub fn conv3d_backward(
    input: &Activation,
    weight: &[f64],
    grad_out: &Activation,
    geo: &ConvGeometry,
    need_input_grad: bool,
) -> (Option<Activation>, Vec<f64>, Vec<f64>) {
    let in_dims = dims3(input);
    let out_dims = dims3(grad_out);
    let in_vol: usize = in_dims.iter().product();
    let out_vol: usize = out_dims.iter().product();
    let k = geo.kernel;
    let k3 = k * k * k;
    let x = input.as_slice().expect("standard layout");
    let g = grad_out.as_slice().expect("standard layout");

    let mut grad_w = vec![0.0; geo.weight_len()];
    grad_w
        .par_chunks_mut(geo.in_channels * k3)
        .enumerate()
        .for_each(|(oc, gw_oc)| {
            let go = &g[oc * out_vol..(oc + 1) * out_vol];
            for ic in 0..geo.in_channels {
                let src = &x[ic * in_vol..(ic + 1) * in_vol];
                for kx in 0..k {
                    for ky in 0..k {
                        for kz in 0..k {
                            let rz = valid_range(kz, geo.pad, geo.stride, in_dims[2], out_dims[2]);
                            let mut acc = 0.0;
                            for_each_row(geo, in_dims, out_dims, kx, ky, |o_row, i_row| {
                                let d = &go[o_row..o_row + out_dims[2]];
                                let s = &src[i_row..i_row + in_dims[2]];
                                if geo.stride == 1 {
                                    let shift = kz as isize - geo.pad as isize;
                                    let (a, b) = (rz.start, rz.end);
                                    let s = &s[(a as isize + shift) as usize..(b as isize + shift) as usize];
                                    acc += d[a..b].iter().zip(s).map(|(p, q)| p * q).sum::<f64>();
                                } else {
                                    for oz in rz.clone() {
                                        acc += d[oz] * s[oz * geo.stride + kz - geo.pad];
                                    }
                                }
                            });
                            gw_oc[ic * k3 + (kx * k + ky) * k + kz] = acc;
                        }
                    }
                }
            }
        });

    let grad_b: Vec<f64> = g.chunks(out_vol).map(|c| c.iter().sum()).collect();

    let grad_in = need_input_grad.then(|| {
        let mut gi = vec![0.0; geo.in_channels * in_vol];
        gi.par_chunks_mut(in_vol).enumerate().for_each(|(ic, gi_ic)| {
            for oc in 0..geo.out_channels {
                let go = &g[oc * out_vol..(oc + 1) * out_vol];
                let w = &weight[(oc * geo.in_channels + ic) * k3..][..k3];
                for kx in 0..k {
                    for ky in 0..k {
                        for kz in 0..k {
                            let wv = w[(kx * k + ky) * k + kz];
                            if wv == 0.0 {
                                continue;
                            }
                            let rz = valid_range(kz, geo.pad, geo.stride, in_dims[2], out_dims[2]);
                            for_each_row(geo, in_dims, out_dims, kx, ky, |o_row, i_row| {
                                let d = &go[o_row..o_row + out_dims[2]];
                                let s = &mut gi_ic[i_row..i_row + in_dims[2]];
                                if geo.stride == 1 {
                                    let shift = kz as isize - geo.pad as isize;
                                    let (a, b) = (rz.start, rz.end);
                                    let s = &mut s[(a as isize + shift) as usize..(b as isize + shift) as usize];
                                    for (sv, dv) in s.iter_mut().zip(&d[a..b]) {
                                        *sv += wv * dv;
                                    }
                                } else {
                                    for oz in rz.clone() {
                                        s[oz * geo.stride + kz - geo.pad] += wv * d[oz];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        });
        Array4::from_shape_vec(input.raw_dim(), gi).expect("shape")
    });
    (grad_in, grad_w, grad_b)
}

/// Per-group `(mean, 1/std)` statistics kept for the backward pass.
pub type GroupStats = Vec<(f64, f64)>;

pub const GROUPNORM_EPS: f64 = 1e-5;

pub fn group_norm(
    input: &Activation,
    gamma: &[f64],
    beta: &[f64],
    groups: usize,
) -> (Activation, GroupStats) {
    let channels = input.shape()[0];
    let vol: usize = dims3(input).iter().product();
    let per_group = channels / groups;
    let x = input.as_slice().expect("standard layout");
    let stats: GroupStats = (0..groups)
        .into_par_iter()
        .map(|gidx| {
            let s = &x[gidx * per_group * vol..(gidx + 1) * per_group * vol];
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, 1.0 / (var + GROUPNORM_EPS).sqrt())
        })
        .collect();
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(vol).enumerate().for_each(|(c, dst)| {
        let (mean, rstd) = stats[c / per_group];
        let src = &x[c * vol..(c + 1) * vol];
        for (d, s) in dst.iter_mut().zip(src) {
            *d = gamma[c] * (s - mean) * rstd + beta[c];
        }
    });
    (
        Array4::from_shape_vec(input.raw_dim(), out).expect("shape"),
        stats,
    )
}

pub fn group_norm_backward(
    input: &Activation,
    gamma: &[f64],
    stats: &GroupStats,
    grad_out: &Activation,
) -> (Activation, Vec<f64>, Vec<f64>) {
    let channels = input.shape()[0];
    let groups = stats.len();
    let per_group = channels / groups;
    let vol: usize = dims3(input).iter().product();
    let x = input.as_slice().expect("standard layout");
    let g = grad_out.as_slice().expect("standard layout");

    let mut grad_gamma = vec![0.0; channels];
    let mut grad_beta = vec![0.0; channels];
    for c in 0..channels {
        let (mean, rstd) = stats[c / per_group];
        let xs = &x[c * vol..(c + 1) * vol];
        let gs = &g[c * vol..(c + 1) * vol];
        let mut dg = 0.0;
        let mut db = 0.0;
        for (xv, gv) in xs.iter().zip(gs) {
            dg += gv * (xv - mean) * rstd;
            db += gv;
        }
        grad_gamma[c] = dg;
        grad_beta[c] = db;
    }

    let mut gi = vec![0.0; x.len()];
    gi.par_chunks_mut(per_group * vol)
        .enumerate()
        .for_each(|(gidx, dst)| {
            let (mean, rstd) = stats[gidx];
            let base = gidx * per_group * vol;
            let n = (per_group * vol) as f64;
            // dxhat = dy·gamma; dx = rstd/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for i in 0..per_group * vol {
                let c = gidx * per_group + i / vol;
                let dxhat = g[base + i] * gamma[c];
                sum_d += dxhat;
                sum_dx += dxhat * (x[base + i] - mean) * rstd;
            }
            for (i, d) in dst.iter_mut().enumerate() {
                let c = gidx * per_group + i / vol;
                let dxhat = g[base + i] * gamma[c];
                let xhat = (x[base + i] - mean) * rstd;
                *d = rstd / n * (n * dxhat - sum_d - xhat * sum_dx);
            }
        });
    (
        Array4::from_shape_vec(input.raw_dim(), gi).expect("shape"),
        grad_gamma,
        grad_beta,
    )
}

fn resize_axis(input: &Activation, axis: usize, taps: &[Tap]) -> Activation {
    let mut shape = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    shape[axis + 1] = taps.len();
    let mut out = Array4::zeros(shape);
    for (o, tap) in taps.iter().enumerate() {
        let lo = input.index_axis(ndarray::Axis(axis + 1), tap.lo);
        let hi = input.index_axis(ndarray::Axis(axis + 1), tap.hi);
        let mut dst = out.index_axis_mut(ndarray::Axis(axis + 1), o);
        ndarray::Zip::from(&mut dst)
            .and(&lo)
            .and(&hi)
            .for_each(|d, &a, &b| *d = (1.0 - tap.frac) * a + tap.frac * b);
    }
    out
}

fn resize_axis_adjoint(grad_out: &Activation, axis: usize, in_len: usize, taps: &[Tap]) -> Activation {
    let mut shape = [
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
        grad_out.shape()[3],
    ];
    shape[axis + 1] = in_len;
    let mut out = Array4::zeros(shape);
    for (o, tap) in taps.iter().enumerate() {
        let g = grad_out.index_axis(ndarray::Axis(axis + 1), o);
        {
            let mut lo = out.index_axis_mut(ndarray::Axis(axis + 1), tap.lo);
            lo.scaled_add(1.0 - tap.frac, &g);
        }
        let mut hi = out.index_axis_mut(ndarray::Axis(axis + 1), tap.hi);
        hi.scaled_add(tap.frac, &g);
    }
    out
}

/// Trilinear resize of every channel to `dims`.
pub fn resize(input: &Activation, dims: [usize; 3]) -> Activation {
    let mut cur = input.clone();
    for (axis, &len) in dims.iter().enumerate() {
        let n = cur.shape()[axis + 1];
        if n != len {
            cur = resize_axis(&cur, axis, &linear_taps(n, len));
        }
    }
    cur
}

pub fn resize_backward(grad_out: &Activation, in_dims: [usize; 3]) -> Activation {
    let mut cur = grad_out.clone();
    for axis in (0..3).rev() {
        let n = in_dims[axis];
        let len = cur.shape()[axis + 1];
        if n != len {
            cur = resize_axis_adjoint(&cur, axis, n, &linear_taps(n, len));
        }
    }
    cur
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Activation {
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct definition: out[o, p] = b[o] + Σ w[o, i, k] · in[i, p·s + k − pad].
    fn conv_reference(input: &Activation, weight: &[f64], bias: &[f64], geo: &ConvGeometry) -> Activation {
        let in_dims = dims3(input);
        let od = geo.out_dims(in_dims);
        let k = geo.kernel;
        Array4::from_shape_fn((geo.out_channels, od[0], od[1], od[2]), |(o, x, y, z)| {
            let mut acc = bias[o];
            for i in 0..geo.in_channels {
                for a in 0..k {
                    for b in 0..k {
                        for c in 0..k {
                            let p = [
                                (x * geo.stride + a) as isize - geo.pad as isize,
                                (y * geo.stride + b) as isize - geo.pad as isize,
                                (z * geo.stride + c) as isize - geo.pad as isize,
                            ];
                            if (0..3).all(|d| p[d] >= 0 && (p[d] as usize) < in_dims[d]) {
                                let w = weight[(((o * geo.in_channels + i) * k + a) * k + b) * k + c];
                                acc += w * input[[i, p[0] as usize, p[1] as usize, p[2] as usize]];
                            }
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, kernel, pad, dims) in [(1, 3, 1, [5, 6, 7]), (2, 3, 1, [6, 8, 4]), (1, 1, 0, [3, 4, 5]), (2, 3, 1, [5, 7, 3])] {
            let geo = ConvGeometry { in_channels: 3, out_channels: 2, kernel, stride, pad };
            let input = random([3, dims[0], dims[1], dims[2]], &mut rng);
            let weight: Vec<f64> = (0..geo.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias = vec![0.3, -0.2];
            let fast = conv3d(&input, &weight, Some(&bias), &geo);
            let slow = conv_reference(&input, &weight, &bias, &geo);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// <conv(x), g> = <x, conv_backward(g)> and likewise for the weights.
    #[test]
    fn conv_backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for stride in [1, 2] {
            let geo = ConvGeometry { in_channels: 2, out_channels: 3, kernel: 3, stride, pad: 1 };
            let input = random([2, 6, 5, 4], &mut rng);
            let weight: Vec<f64> = (0..geo.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let out = conv3d(&input, &weight, None, &geo);
            let g = random([3, out.shape()[1], out.shape()[2], out.shape()[3]], &mut rng);
            let (gi, gw, gb) = conv3d_backward(&input, &weight, &g, &geo, true);
            let lhs: f64 = out.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            let rhs_x: f64 = input.iter().zip(gi.unwrap().iter()).map(|(a, b)| a * b).sum();
            let rhs_w: f64 = weight.iter().zip(&gw).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_x).abs() < 1e-9);
            assert!((lhs - rhs_w).abs() < 1e-9);
            let sums: Vec<f64> = g.outer_iter().map(|c| c.sum()).collect();
            for (a, b) in gb.iter().zip(&sums) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([2, 3, 4, 5], &mut rng);
        let y = resize(&x, [6, 8, 10]);
        let g = random([2, 6, 8, 10], &mut rng);
        let gx = resize_backward(&g, [3, 4, 5]);
        let lhs: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(gx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([4, 3, 3, 3], &mut rng) * 5.0 + 2.0;
        let (y, _) = group_norm(&x, &[1.0; 4], &[0.0; 4], 2);
        let s = y.as_slice().unwrap();
        for g in s.chunks(2 * 27) {
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / g.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn group_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random([4, 2, 3, 2], &mut rng);
        let gamma = [0.5, 1.5, -0.7, 1.1];
        let beta = [0.1, 0.0, -0.2, 0.3];
        let g = random([4, 2, 3, 2], &mut rng);
        let loss = |x: &Activation| -> f64 {
            let (y, _) = group_norm(x, &gamma, &beta, 2);
            y.iter().zip(g.iter()).map(|(a, b)| a * b).sum()
        };
        let (_, stats) = group_norm(&x, &gamma, &beta, 2);
        let (gi, _, _) = group_norm_backward(&x, &gamma, &stats, &g);
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 2, 1], [3, 0, 1, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - gi[idx]).abs() < 1e-6, "{fd} vs {}", gi[idx]);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
