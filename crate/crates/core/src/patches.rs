//! Tumour-centred patch planning, zero-filled extraction and averaged stitching.

use ndarray::{s, Array4, ArrayView4};

use crate::error::{Error, Result};
use crate::volumes::BoundingBox;

pub const DEFAULT_PATCH: [usize; 3] = [128; 3];

/// A patch window; the origin may lie outside the volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub origin: [isize; 3],
    pub size: [usize; 3],
}

impl PatchSpec {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|d| {
            let v = p[d] as isize;
            self.origin[d] <= v && v < self.origin[d] + self.size[d] as isize
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlan {
    pub specs: Vec<PatchSpec>,
    pub volume_shape: [usize; 3],
}

/// Origins along one dimension.
fn plan_axis(lo: usize, hi: usize, len: usize, patch: usize) -> Vec<isize> {
    let extent = hi - lo;
    if extent <= patch {
        let centre = (lo + extent / 2) as isize;
        let origin = centre - (patch / 2) as isize;
        if len >= patch {
            vec![origin.clamp(0, (len - patch) as isize)]
        } else {
            vec![origin]
        }
    } else {
        let count = extent.div_ceil(patch);
        let span = (extent - patch) as f64;
        (0..count)
            .map(|i| lo as isize + (i as f64 * span / (count - 1) as f64).round() as isize)
            .collect()
    }
}

/// Covers `target` with the fewest patches, centred when one patch suffices
/// and equally spaced with overlap along dimensions where it does not.
pub fn plan_patches(
    target: &BoundingBox,
    volume_shape: [usize; 3],
    patch_size: [usize; 3],
) -> Result<PatchPlan> {
    if target.is_empty() {
        return Err(Error::EmptyBoundingBox);
    }
    if patch_size.contains(&0) {
        return Err(Error::Config("patch size must be positive".to_string()));
    }
    if (0..3).any(|d| target.hi[d] > volume_shape[d]) {
        return Err(Error::ShapeMismatch(format!(
            "bounding box {target:?} exceeds volume {volume_shape:?}"
        )));
    }
    let axes: [Vec<isize>; 3] = std::array::from_fn(|d| {
        plan_axis(target.lo[d], target.hi[d], volume_shape[d], patch_size[d])
    });
    let mut specs = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &x in &axes[0] {
        for &y in &axes[1] {
            for &z in &axes[2] {
                specs.push(PatchSpec {
                    origin: [x, y, z],
                    size: patch_size,
                });
            }
        }
    }
    Ok(PatchPlan {
        specs,
        volume_shape,
    })
}

/// Overlap of `[origin, origin + size)` with `[0, len)`, as (source range, patch offset).
fn clip(origin: isize, size: usize, len: usize) -> Option<(std::ops::Range<usize>, usize)> {
    let start = origin.max(0);
    let end = (origin + size as isize).min(len as isize);
    (start < end).then(|| (start as usize..end as usize, (start - origin) as usize))
}

/// Copies the patch region of a channels-first array, zero outside the volume.
pub fn extract(volume: ArrayView4<'_, f64>, spec: &PatchSpec) -> Array4<f64> {
    let channels = volume.shape()[0];
    let mut out = Array4::zeros((channels, spec.size[0], spec.size[1], spec.size[2]));
    let ranges: Option<Vec<_>> = (0..3)
        .map(|d| clip(spec.origin[d], spec.size[d], volume.shape()[d + 1]))
        .collect();
    if let Some(r) = ranges {
        let (rx, ox) = r[0].clone();
        let (ry, oy) = r[1].clone();
        let (rz, oz) = r[2].clone();
        out.slice_mut(s![
            ..,
            ox..ox + rx.len(),
            oy..oy + ry.len(),
            oz..oz + rz.len()
        ])
        .assign(&volume.slice(s![.., rx, ry, rz]));
    }
    out
}

/// Reassembles patch predictions; overlaps are averaged, uncovered voxels are 0.
pub fn stitch(patches: &[Array4<f64>], plan: &PatchPlan) -> Result<Array4<f64>> {
    if patches.len() != plan.specs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} patches for {} patch specs",
            patches.len(),
            plan.specs.len()
        )));
    }
    let channels = patches.first().map_or(1, |p| p.shape()[0]);
    let [x, y, z] = plan.volume_shape;
    let mut sum = Array4::<f64>::zeros((channels, x, y, z));
    let mut count = ndarray::Array3::<u32>::zeros((x, y, z));
    for (patch, spec) in patches.iter().zip(&plan.specs) {
        if patch.shape() != [channels, spec.size[0], spec.size[1], spec.size[2]] {
            return Err(Error::ShapeMismatch(format!(
                "patch shape {:?} does not match spec {:?}",
                patch.shape(),
                spec.size
            )));
        }
        let ranges: Option<Vec<_>> = (0..3)
            .map(|d| clip(spec.origin[d], spec.size[d], plan.volume_shape[d]))
            .collect();
        let Some(r) = ranges else { continue };
        let (rx, ox) = r[0].clone();
        let (ry, oy) = r[1].clone();
        let (rz, oz) = r[2].clone();
        let src = patch.slice(s![
            ..,
            ox..ox + rx.len(),
            oy..oy + ry.len(),
            oz..oz + rz.len()
        ]);
        let mut dst = sum.slice_mut(s![.., rx.clone(), ry.clone(), rz.clone()]);
        dst += &src;
        count.slice_mut(s![rx, ry, rz]).mapv_inplace(|c| c + 1);
    }
    for mut channel in sum.outer_iter_mut() {
        ndarray::Zip::from(&mut channel).and(&count).for_each(|v, &c| {
            if c > 0 {
                *v /= c as f64;
            }
        });
    }
    Ok(sum)
}
