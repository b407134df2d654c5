//! Soft Dice and its multi-class loss for training; binary Dice and HD95 for
//! evaluation.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{labels_to_subregions, LabelMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceParams {
    pub epsilon: f64,
}

impl Default for DiceParams {
    fn default() -> Self {
        Self { epsilon: 1e-5 }
    }
}

struct DiceSums {
    intersection: f64,
    denominator: f64,
}

fn dice_sums(y_true: ArrayView3<'_, f64>, y_pred: ArrayView3<'_, f64>, params: &DiceParams) -> DiceSums {
    let mut intersection = 0.0;
    let mut sum_true = 0.0;
    let mut sum_pred = 0.0;
    Zip::from(&y_true).and(&y_pred).for_each(|&t, &p| {
        intersection += t * p;
        sum_true += t;
        sum_pred += p;
    });
    DiceSums {
        intersection,
        denominator: sum_true + sum_pred + params.epsilon,
    }
}

/// `2·Σ(t·p) / (Σt + Σp + ε)` over all voxels.
pub fn dice_score(y_true: ArrayView3<'_, f64>, y_pred: ArrayView3<'_, f64>, params: &DiceParams) -> Result<f64> {
    if y_true.shape() != y_pred.shape() {
        return Err(Error::ShapeMismatch(format!(
            "dice: {:?} vs {:?}",
            y_true.shape(),
            y_pred.shape()
        )));
    }
    let s = dice_sums(y_true, y_pred, params);
    Ok(2.0 * s.intersection / s.denominator)
}

fn check_channels(y_true: &ArrayView4<'_, f64>, y_pred: &ArrayView4<'_, f64>) -> Result<()> {
    if y_true.shape() != y_pred.shape() {
        return Err(Error::ShapeMismatch(format!(
            "multi-class dice: {:?} vs {:?}",
            y_true.shape(),
            y_pred.shape()
        )));
    }
    if y_true.shape()[0] == 0 {
        return Err(Error::ShapeMismatch("no channels".to_string()));
    }
    Ok(())
}

/// `−(1/n)·Σ_c DS_c` over the leading channel axis.
pub fn multiclass_dice_loss(y_true: ArrayView4<'_, f64>, y_pred: ArrayView4<'_, f64>, params: &DiceParams) -> Result<f64> {
    check_channels(&y_true, &y_pred)?;
    let n = y_true.shape()[0] as f64;
    let mut total = 0.0;
    for (t, p) in y_true.outer_iter().zip(y_pred.outer_iter()) {
        total += dice_score(t, p, params)?;
    }
    Ok(-total / n)
}

/// Loss value and `∂loss/∂y_pred`.
///
/// With `S = Σt + Σp + ε` and `DS = 2I/S`, each channel contributes
/// `∂DS/∂p_v = (2·t_v − DS) / S`.
pub fn multiclass_dice_loss_grad(
    y_true: ArrayView4<'_, f64>,
    y_pred: ArrayView4<'_, f64>,
    params: &DiceParams,
) -> Result<(f64, Array4<f64>)> {
    check_channels(&y_true, &y_pred)?;
    let n = y_true.shape()[0] as f64;
    let mut grad = Array4::zeros(y_pred.raw_dim());
    let mut total = 0.0;
    for ((t, p), mut g) in y_true
        .outer_iter()
        .zip(y_pred.outer_iter())
        .zip(grad.outer_iter_mut())
    {
        let s = dice_sums(t, p, params);
        let ds = 2.0 * s.intersection / s.denominator;
        total += ds;
        Zip::from(&mut g)
            .and(&t)
            .for_each(|g, &t| *g = -(2.0 * t - ds) / (s.denominator * n));
    }
    Ok((-total / n, grad))
}

/// Exact Dice `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn binary_dice(a: &Array3<bool>, b: &Array3<bool>) -> f64 {
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    Zip::from(a).and(b).for_each(|&x, &y| {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    });
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Foreground voxels with at least one background 6-neighbour (outside the
/// grid counts as background).
pub fn surface(mask: &Array3<bool>) -> Array3<bool> {
    let (nx, ny, nz) = mask.dim();
    Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
        if !mask[[x, y, z]] {
            return false;
        }
        let at = |dx: isize, dy: isize, dz: isize| -> bool {
            let (i, j, k) = (x as isize + dx, y as isize + dy, z as isize + dz);
            if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
                return false;
            }
            mask[[i as usize, j as usize, k as usize]]
        };
        !(at(-1, 0, 0) && at(1, 0, 0) && at(0, -1, 0) && at(0, 1, 0) && at(0, 0, -1) && at(0, 0, 1))
    })
}

/// One-dimensional squared distance transform of a sampled function along a
/// lane with sample spacing `h` (lower envelope of parabolas).
fn edt_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * h;
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(start) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = start;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in start + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (in mm) from every voxel to the nearest true
/// voxel of `features`; infinite when there is none.
pub fn squared_distance_transform(features: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut dist = features.mapv(|f| if f { 0.0 } else { f64::INFINITY });
    for (axis, &h) in spacing.iter().enumerate() {
        let n = dist.shape()[axis];
        let mut buf = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut v = vec![0usize; n];
        let mut z = vec![0.0; n + 1];
        for mut lane in dist.lanes_mut(Axis(axis)) {
            buf.iter_mut().zip(lane.iter()).for_each(|(b, &l)| *b = l);
            edt_1d(&buf, h, &mut out, &mut v, &mut z);
            lane.iter_mut().zip(&out).for_each(|(l, &o)| *l = o);
        }
    }
    dist
}

/// Linear-interpolation percentile of an unsorted sample, `q` in [0, 100].
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// 95th percentile of the pooled surface-to-surface distances in both
/// directions, in mm. Two empty masks give `Some(0.0)`; exactly one empty mask
/// gives `None`.
pub fn hd95(a: &Array3<bool>, b: &Array3<bool>, spacing: [f64; 3]) -> Option<f64> {
    let a_empty = !a.iter().any(|&v| v);
    let b_empty = !b.iter().any(|&v| v);
    match (a_empty, b_empty) {
        (true, true) => return Some(0.0),
        (true, false) | (false, true) => return None,
        _ => {}
    }
    let sa = surface(a);
    let sb = surface(b);
    let da = squared_distance_transform(&sa, spacing);
    let db = squared_distance_transform(&sb, spacing);
    let mut distances = Vec::new();
    Zip::from(&sa).and(&db).for_each(|&s, &d| {
        if s {
            distances.push(d.sqrt());
        }
    });
    Zip::from(&sb).and(&da).for_each(|&s, &d| {
        if s {
            distances.push(d.sqrt());
        }
    });
    Some(percentile(&mut distances, 95.0))
}

/// Per-case evaluation record. `None` HD95 marks a case where exactly one of
/// prediction and truth is empty; such entries are left out of means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseMetrics {
    pub dice: [f64; 3],
    pub hd95: [Option<f64>; 3],
}

impl CaseMetrics {
    pub fn dice_wt(&self) -> f64 {
        self.dice[0]
    }

    pub fn dice_tc(&self) -> f64 {
        self.dice[1]
    }

    pub fn dice_et(&self) -> f64 {
        self.dice[2]
    }

    /// Column-wise means, skipping absent HD95 entries.
    pub fn mean(cases: &[CaseMetrics]) -> CaseMetrics {
        let n = cases.len().max(1) as f64;
        let dice = std::array::from_fn(|i| cases.iter().map(|c| c.dice[i]).sum::<f64>() / n);
        let hd95 = std::array::from_fn(|i| {
            let vals: Vec<f64> = cases.iter().filter_map(|c| c.hd95[i]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        });
        CaseMetrics { dice, hd95 }
    }
}

pub fn evaluate_case(pred: &LabelMap, truth: &LabelMap) -> Result<CaseMetrics> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let p = labels_to_subregions(pred);
    let t = labels_to_subregions(truth);
    let spacing = truth.geometry().spacing;
    let pc = p.channels();
    let tc = t.channels();
    Ok(CaseMetrics {
        dice: std::array::from_fn(|i| binary_dice(pc[i], tc[i])),
        hd95: std::array::from_fn(|i| hd95(pc[i], tc[i], spacing)),
    })
}
