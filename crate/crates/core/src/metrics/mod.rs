//! Segmentation metrics: Dice overlap, 95th-percentile Hausdorff distance,
//! case-level sensitivity/specificity, and parameter counting.

mod distance;

pub use distance::squared_edt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Integer class map of shape `(D, H, W)`, raster order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if dims.iter().product::<usize>() != labels.len() {
            return Err(Error::shape("LabelVolume", &dims, &[labels.len()]));
        }
        Ok(LabelVolume { dims, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    /// Fails when any label is `>= classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= classes) {
            Some(l) => Err(Error::Contract(format!("label {l} out of range for {classes} classes"))),
            None => Ok(()),
        }
    }
}

fn same_dims(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shape("metric", &a.dims, &b.dims));
    }
    Ok(())
}

/// Dice coefficient of two binary masks; two empty masks score 1.
pub fn dice_masks(pred: &[bool], gt: &[bool]) -> f64 {
    let (mut inter, mut sp, mut sg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        sp += p as usize;
        sg += g as usize;
    }
    if sp + sg == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sp + sg) as f64
    }
}

pub fn dsc_per_class(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<f64> {
    same_dims(pred, gt)?;
    Ok(dice_masks(&pred.mask(class), &gt.mask(class)))
}

/// Per-class Dice for classes `0..classes`.
pub fn dsc_all(pred: &LabelVolume, gt: &LabelVolume, classes: usize) -> Result<Vec<f64>> {
    (0..classes).map(|c| dsc_per_class(pred, gt, c as u8)).collect()
}

/// Mean Dice over classes, skipping class 0 unless `include_background`.
pub fn mdsc(pred: &LabelVolume, gt: &LabelVolume, classes: usize, include_background: bool) -> Result<f64> {
    let first = if include_background { 0 } else { 1 };
    if classes <= first {
        return Err(Error::UndefinedMetric("mDSC over zero classes"));
    }
    let scores = dsc_all(pred, gt, classes)?;
    Ok(scores[first..].iter().sum::<f64>() / (classes - first) as f64)
}

/// Foreground voxels with at least one 6-neighbour outside the mask (the
/// volume border counts as outside).
pub fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = dims;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = idx(z, y, x);
                if !mask[i] {
                    continue;
                }
                out[i] = z == 0
                    || z + 1 == d
                    || y == 0
                    || y + 1 == h
                    || x == 0
                    || x + 1 == w
                    || !mask[idx(z - 1, y, x)]
                    || !mask[idx(z + 1, y, x)]
                    || !mask[idx(z, y - 1, x)]
                    || !mask[idx(z, y + 1, x)]
                    || !mask[idx(z, y, x - 1)]
                    || !mask[idx(z, y, x + 1)];
            }
        }
    }
    out
}

/// Nearest-rank percentile (`q` in (0, 1]) of an unsorted sample.
pub fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let rank = (q * values.len() as f64).ceil().max(1.0) as usize;
    values[rank.min(values.len()) - 1]
}

/// 95th-percentile symmetric surface distance between two masks.
///
/// `spacing` is the voxel size along the `(D, H, W)` axes. Distances from
/// every surface voxel of one mask to the other mask's surface are pooled in
/// both directions before taking the nearest-rank 95th percentile.
pub fn hd95(pred: &[bool], gt: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    let n: usize = dims.iter().product();
    if pred.len() != n || gt.len() != n {
        return Err(Error::shape("hd95", &dims, &[pred.len(), gt.len()]));
    }
    if !pred.iter().any(|&v| v) {
        return Err(Error::EmptyStructure("prediction"));
    }
    if !gt.iter().any(|&v| v) {
        return Err(Error::EmptyStructure("ground truth"));
    }
    let sp = surface(pred, dims);
    let sg = surface(gt, dims);
    let to_gt = squared_edt(&sg, dims, spacing);
    let to_pred = squared_edt(&sp, dims, spacing);
    let mut pooled: Vec<f64> = (0..n)
        .filter(|&i| sp[i])
        .map(|i| to_gt[i].sqrt())
        .chain((0..n).filter(|&i| sg[i]).map(|i| to_pred[i].sqrt()))
        .collect();
    Ok(nearest_rank(&mut pooled, 0.95))
}

/// Per-class HD95 on label volumes; `None` when either side lacks the class.
pub fn hd95_per_class(pred: &LabelVolume, gt: &LabelVolume, class: u8, spacing: [f64; 3]) -> Result<Option<f64>> {
    same_dims(pred, gt)?;
    match hd95(&pred.mask(class), &gt.mask(class), pred.dims, spacing) {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyStructure(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Case-level detection counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// Tallies `(predicted_positive, actually_positive)` outcomes.
    pub fn from_cases(cases: &[(bool, bool)]) -> Self {
        let mut c = Confusion::default();
        for &(pred, truth) in cases {
            match (pred, truth) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn sensitivity(&self) -> Result<f64> {
        if self.tp + self.fn_ == 0 {
            return Err(Error::UndefinedMetric("sensitivity with no positive cases"));
        }
        Ok(self.tp as f64 / (self.tp + self.fn_) as f64)
    }

    pub fn specificity(&self) -> Result<f64> {
        if self.tn + self.fp == 0 {
            return Err(Error::UndefinedMetric("specificity with no negative cases"));
        }
        Ok(self.tn as f64 / (self.tn + self.fp) as f64)
    }
}

pub fn sensitivity_specificity(cases: &[(bool, bool)]) -> Result<(f64, f64)> {
    let c = Confusion::from_cases(cases);
    Ok((c.sensitivity()?, c.specificity()?))
}

/// Sum of element counts over every registered parameter.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.total_numel()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(labels: &[u8]) -> LabelVolume {
        LabelVolume::new([1, 1, labels.len()], labels.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = vol(&[1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(dsc_per_class(&a, &a, 1).unwrap(), 1.0);
        let b = vol(&[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(dsc_per_class(&a, &b, 1).unwrap(), 0.0);
        let c = vol(&[0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dsc_per_class(&a, &c, 1).unwrap(), 0.5);
        assert_eq!(dsc_per_class(&a, &a, 2).unwrap(), 1.0);
    }

    #[test]
    fn mdsc_averages_foreground() {
        let gt = vol(&[0, 1, 1, 2, 2]);
        let pred = vol(&[0, 1, 1, 0, 0]);
        assert_eq!(mdsc(&pred, &gt, 3, false).unwrap(), 0.5);
        assert_eq!(mdsc(&gt, &gt, 3, false).unwrap(), 1.0);
    }

    #[test]
    fn hd95_examples() {
        let dims = [1, 1, 7];
        let mut a = vec![false; 7];
        let mut b = vec![false; 7];
        a[1] = true;
        b[4] = true;
        assert_eq!(hd95(&a, &b, dims, [1.0; 3]).unwrap(), 3.0);
        assert_eq!(hd95(&a, &a, dims, [1.0; 3]).unwrap(), 0.0);
        assert!(matches!(hd95(&a, &[false; 7], dims, [1.0; 3]), Err(Error::EmptyStructure(_))));
    }

    #[test]
    fn nearest_rank_percentile() {
        let mut v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(&mut v, 0.95), 19.0);
        assert_eq!(nearest_rank(&mut [5.0], 0.95), 5.0);
    }

    #[test]
    fn interior_voxels_are_not_surface() {
        let mask = vec![true; 27];
        let s = surface(&mask, [3, 3, 3]);
        assert_eq!(s.iter().filter(|&&v| v).count(), 26);
        assert!(!s[13]);
    }

    #[test]
    fn sensitivity_specificity_examples() {
        let mut cases = vec![(true, true); 3];
        cases.push((false, true));
        cases.extend(vec![(false, false); 4]);
        cases.push((true, false));
        assert_eq!(sensitivity_specificity(&cases).unwrap(), (0.75, 0.8));
        assert_eq!(sensitivity_specificity(&[(true, true), (false, false)]).unwrap(), (1.0, 1.0));
        assert!(matches!(
            sensitivity_specificity(&[(false, false)]),
            Err(Error::UndefinedMetric(_))
        ));
    }
}
