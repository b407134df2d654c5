//! Connected-component clean-up of thresholded subregions and label fusion.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{subregions_to_labels, Geometry, LabelMap, SubregionMasks};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face and edge neighbours.
    Eighteen,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl Connectivity {
    /// Neighbour offsets that precede the centre voxel in raster order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dx in -1isize..=1 {
            for dy in -1isize..=1 {
                for dz in -1isize..=1 {
                    let nonzero = [dx, dy, dz].iter().filter(|d| **d != 0).count();
                    if nonzero == 0 || nonzero > max_nonzero {
                        continue;
                    }
                    if (dx, dy, dz) < (0, 0, 0) {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub min_component_voxels: usize,
    pub min_et_voxels: usize,
    pub connectivity: Connectivity,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            min_component_voxels: 10,
            min_et_voxels: 50,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_component_voxels == 0 || self.min_et_voxels == 0 {
            return Err(Error::Config("component size thresholds must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Component labelling: 0 is background, component `k` has size `sizes[k - 1]`.
/// Components are numbered by their first voxel in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub labels: Array3<u32>,
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let next = parent[i as usize];
        parent[i as usize] = parent[next as usize];
        i = next;
    }
    i
}

pub fn connected_components(mask: &Array3<bool>, connectivity: Connectivity) -> Components {
    let (nx, ny, nz) = mask.dim();
    let offsets = connectivity.backward_offsets();
    let mut provisional = Array3::<u32>::zeros((nx, ny, nz));
    // parent[0] is the background sentinel
    let mut parent: Vec<u32> = vec![0];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if !mask[[x, y, z]] {
                    continue;
                }
                let mut label = 0u32;
                for d in &offsets {
                    let (px, py, pz) = (x as isize + d[0], y as isize + d[1], z as isize + d[2]);
                    if px < 0 || py < 0 || pz < 0 || py >= ny as isize || pz >= nz as isize {
                        continue;
                    }
                    let l = provisional[[px as usize, py as usize, pz as usize]];
                    if l == 0 {
                        continue;
                    }
                    if label == 0 {
                        label = find(&mut parent, l);
                    } else {
                        let (a, b) = (find(&mut parent, label), find(&mut parent, l));
                        if a != b {
                            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                            parent[hi as usize] = lo;
                            label = lo;
                        }
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[[x, y, z]] = label;
            }
        }
    }
    let mut compact = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    for l in provisional.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if compact[root] == 0 {
            sizes.push(0);
            compact[root] = sizes.len() as u32;
        }
        *l = compact[root];
        sizes[*l as usize - 1] += 1;
    }
    Components {
        labels: provisional,
        sizes,
    }
}

/// Keeps only components for which `keep(label, size)` holds.
fn filter_components(
    mask: &Array3<bool>,
    connectivity: Connectivity,
    mut keep: impl FnMut(usize, usize) -> bool,
) -> Array3<bool> {
    let comps = connected_components(mask, connectivity);
    let kept: Vec<bool> = std::iter::once(false)
        .chain(comps.sizes.iter().enumerate().map(|(i, &s)| keep(i + 1, s)))
        .collect();
    comps.labels.mapv(|l| kept[l as usize])
}

/// ET outside TC is removed, then TC outside WT. ET whose TC voxel is cut by
/// the second step goes with it, so the result is always nested.
pub fn enforce_hierarchy(masks: &SubregionMasks) -> SubregionMasks {
    let mut et = &masks.et & &masks.tc;
    let tc = &masks.tc & &masks.wt;
    et &= &tc;
    SubregionMasks {
        wt: masks.wt.clone(),
        tc,
        et,
        hierarchy_enforced: true,
    }
}

/// Drops components smaller than `min_component_voxels`, per subregion.
pub fn remove_small_components(masks: &SubregionMasks, config: &PostprocessConfig) -> SubregionMasks {
    let min = config.min_component_voxels;
    let filter = |m: &Array3<bool>| filter_components(m, config.connectivity, |_, size| size >= min);
    SubregionMasks {
        wt: filter(&masks.wt),
        tc: filter(&masks.tc),
        et: filter(&masks.et),
        hierarchy_enforced: masks.hierarchy_enforced,
    }
}

/// Drops WT components that contain no TC or ET voxel. Nothing is removed
/// when TC and ET are empty everywhere.
pub fn remove_uncertain_wt(masks: &SubregionMasks, config: &PostprocessConfig) -> SubregionMasks {
    let core = &masks.tc | &masks.et;
    if !core.iter().any(|&v| v) {
        return masks.clone();
    }
    let comps = connected_components(&masks.wt, config.connectivity);
    let mut has_core = vec![false; comps.count() + 1];
    Zip::from(&comps.labels).and(&core).for_each(|&l, &c| {
        if c {
            has_core[l as usize] = true;
        }
    });
    has_core[0] = false;
    SubregionMasks {
        wt: comps.labels.mapv(|l| has_core[l as usize]),
        tc: masks.tc.clone(),
        et: masks.et.clone(),
        hierarchy_enforced: masks.hierarchy_enforced,
    }
}

/// ET components smaller than `min_et_voxels` leave ET but stay in TC and WT,
/// so they fuse to necrosis.
pub fn relabel_small_et(masks: &SubregionMasks, config: &PostprocessConfig) -> SubregionMasks {
    let min = config.min_et_voxels;
    SubregionMasks {
        wt: masks.wt.clone(),
        tc: masks.tc.clone(),
        et: filter_components(&masks.et, config.connectivity, |_, size| size >= min),
        hierarchy_enforced: masks.hierarchy_enforced,
    }
}

/// The four rules in order, a final hierarchy pass, then label fusion.
pub fn postprocess(masks: &SubregionMasks, config: &PostprocessConfig, geometry: Geometry) -> Result<LabelMap> {
    config.validate()?;
    let m = enforce_hierarchy(masks);
    let m = remove_small_components(&m, config);
    let m = remove_uncertain_wt(&m, config);
    let m = relabel_small_et(&m, config);
    let m = enforce_hierarchy(&m);
    subregions_to_labels(&m, geometry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    fn mask(shape: [usize; 3], voxels: &[[usize; 3]]) -> Array3<bool> {
        let mut m = Array3::from_elem(shape, false);
        for v in voxels {
            m[*v] = true;
        }
        m
    }

    fn line(len: usize, y: usize) -> Vec<[usize; 3]> {
        (0..len).map(|x| [x, y, 0]).collect()
    }

    #[test]
    fn single_voxel_and_corner_contact() {
        let c = connected_components(&mask([3; 3], &[[1, 1, 1]]), Connectivity::TwentySix);
        assert_eq!(c.sizes, vec![1]);
        let corner = mask([3; 3], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&corner, Connectivity::TwentySix).count(), 1);
        assert_eq!(connected_components(&corner, Connectivity::Eighteen).count(), 2);
        let apart = mask([3; 3], &[[0, 0, 0], [2, 0, 0]]);
        assert_eq!(connected_components(&apart, Connectivity::TwentySix).count(), 2);
    }

    #[test]
    fn labels_follow_first_voxel_order() {
        // a U shape whose arms meet only after both have been seen
        let mut m = Array3::from_elem((3, 4, 1), false);
        m.slice_mut(s![.., 0, 0]).fill(true);
        m.slice_mut(s![.., 3, 0]).fill(true);
        m.slice_mut(s![2, .., 0]).fill(true);
        m[[0, 2, 0]] = true;
        let c = connected_components(&m, Connectivity::Six);
        assert_eq!(c.sizes, vec![9]);
        let m2 = mask([4, 1, 1], &[[0, 0, 0], [2, 0, 0]]);
        let c2 = connected_components(&m2, Connectivity::TwentySix);
        assert_eq!((c2.labels[[0, 0, 0]], c2.labels[[2, 0, 0]]), (1, 2));
    }

    #[test]
    fn hierarchy_order() {
        let shape = [4, 1, 1];
        let masks = SubregionMasks::new(
            mask(shape, &[[0, 0, 0], [1, 0, 0]]),
            mask(shape, &[[1, 0, 0], [2, 0, 0]]),
            mask(shape, &[[2, 0, 0], [3, 0, 0]]),
        )
        .unwrap();
        let out = enforce_hierarchy(&masks);
        assert_eq!(out.tc, mask(shape, &[[1, 0, 0]]));
        // ET at 2 was inside the original TC but that TC voxel lies outside WT
        assert_eq!(out.et, mask(shape, &[]));
        assert!(out.hierarchy_enforced && out.is_nested());
        let again = enforce_hierarchy(&out);
        assert_eq!((again.wt, again.tc, again.et), (out.wt, out.tc, out.et));
    }

    #[test]
    fn small_component_boundary() {
        let shape = [12, 4, 1];
        let mut voxels = line(9, 0);
        voxels.extend(line(10, 2));
        let wt = mask(shape, &voxels);
        let masks = SubregionMasks::new(wt, mask(shape, &[]), mask(shape, &[])).unwrap();
        let out = remove_small_components(&masks, &PostprocessConfig::default());
        assert_eq!(out.wt, mask(shape, &line(10, 2)));
        let empty = remove_small_components(&SubregionMasks::empty(shape), &PostprocessConfig::default());
        assert!(!empty.wt.iter().any(|&v| v));
    }

    #[test]
    fn uncertain_wt_removed() {
        let shape = [12, 4, 1];
        let mut voxels = line(10, 0);
        voxels.extend(line(10, 2));
        let masks = SubregionMasks::new(mask(shape, &voxels), mask(shape, &[[3, 2, 0]]), mask(shape, &[])).unwrap();
        let out = remove_uncertain_wt(&masks, &PostprocessConfig::default());
        assert_eq!(out.wt, mask(shape, &line(10, 2)));
        // no core anywhere: nothing to anchor the rule, WT kept
        let edema_only = SubregionMasks::new(mask(shape, &voxels), mask(shape, &[]), mask(shape, &[])).unwrap();
        assert_eq!(remove_uncertain_wt(&edema_only, &PostprocessConfig::default()).wt, edema_only.wt);
    }

    #[test]
    fn small_et_becomes_necrosis() {
        let shape = [60, 4, 1];
        let big = line(50, 0);
        let small = line(49, 2);
        let mut all = big.clone();
        all.extend(&small);
        let m = mask(shape, &all);
        let masks = SubregionMasks::new(m.clone(), m.clone(), m).unwrap();
        let out = relabel_small_et(&masks, &PostprocessConfig::default());
        assert_eq!(out.et, mask(shape, &big));
        assert_eq!(out.tc, masks.tc);
        let labels = postprocess(&masks, &PostprocessConfig::default(), Geometry::default()).unwrap();
        assert_eq!(labels.labels()[[0, 2, 0]], 1);
        assert_eq!(labels.labels()[[0, 0, 0]], 4);
    }

    #[test]
    fn rejects_zero_thresholds() {
        let cfg = PostprocessConfig {
            min_et_voxels: 0,
            ..PostprocessConfig::default()
        };
        assert!(postprocess(&SubregionMasks::empty([2; 3]), &cfg, Geometry::default()).is_err());
    }
}
