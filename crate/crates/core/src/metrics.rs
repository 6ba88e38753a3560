//! Overlap and surface-distance metrics on binary volumes.
//!
//! Surfaces are foreground voxels with a 6-connected background neighbour
//! (outside the volume counts as background); distances are Euclidean between
//! voxel centres in voxel units.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{load_case, DatasetManifest, LabelVolume, Volume};
use crate::tensor::Tensor;

pub const METRICS_CSV_HEADER: &str = "case_id,dice,jaccard,hd95,asd,flag";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape("BinaryMask", format!("{} values for dims {dims:?}", data.len())));
        }
        Ok(BinaryMask { dims, data })
    }

    /// `p > threshold` over the last three dims of `probs`.
    pub fn from_probs(probs: &Tensor, threshold: f64) -> Result<Self> {
        let s = probs.shape();
        if s.len() < 3 || s[..s.len() - 3].iter().any(|&d| d != 1) {
            return Err(Error::shape("binarize", format!("expected a single volume, got {s:?}")));
        }
        let dims = [s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]];
        Self::new(dims, probs.data().iter().map(|&p| p > threshold).collect())
    }

    pub fn from_label(label: &LabelVolume) -> Self {
        BinaryMask { dims: label.dims(), data: label.mask().iter().map(|&m| m != 0).collect() }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    fn at(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }
}

fn overlap(op: &'static str, pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize, usize)> {
    if pred.dims != gt.dims {
        return Err(Error::shape(op, format!("prediction {:?} vs ground truth {:?}", pred.dims, gt.dims)));
    }
    let inter = pred.data.iter().zip(&gt.data).filter(|(&a, &b)| a && b).count();
    Ok((inter, pred.count(), gt.count()))
}

/// `100·2|P∩G|/(|P|+|G|)`; two empty masks score 100.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, p, g) = overlap("dice", pred, gt)?;
    Ok(if p + g == 0 { 100.0 } else { 200.0 * i as f64 / (p + g) as f64 })
}

/// `100·|P∩G|/|P∪G|`; two empty masks score 100.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, p, g) = overlap("jaccard", pred, gt)?;
    let u = p + g - i;
    Ok(if u == 0 { 100.0 } else { 100.0 * i as f64 / u as f64 })
}

pub fn surface_voxels(mask: &BinaryMask) -> Result<Vec<[usize; 3]>> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let [d, h, w] = mask.dims;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask.at(z, y, x) {
                    continue;
                }
                let boundary = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == d
                    || y + 1 == h
                    || x + 1 == w
                    || !mask.at(z - 1, y, x)
                    || !mask.at(z + 1, y, x)
                    || !mask.at(z, y - 1, x)
                    || !mask.at(z, y + 1, x)
                    || !mask.at(z, y, x - 1)
                    || !mask.at(z, y, x + 1);
                if boundary {
                    out.push([z, y, x]);
                }
            }
        }
    }
    Ok(out)
}

fn sq_dist(a: [usize; 3], b: [usize; 3]) -> f64 {
    (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum()
}

/// `d(a, B)` for every `a ∈ A`.
fn directed(a: &[[usize; 3]], b: &[[usize; 3]]) -> Vec<f64> {
    a.iter()
        .map(|&p| b.iter().map(|&q| sq_dist(p, q)).fold(f64::INFINITY, f64::min).sqrt())
        .collect()
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

fn surface_distances(pred: &BinaryMask, gt: &BinaryMask) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.dims != gt.dims {
        return Err(Error::shape("surface distance", format!("{:?} vs {:?}", pred.dims, gt.dims)));
    }
    let a = surface_voxels(pred)?;
    let b = surface_voxels(gt)?;
    Ok((directed(&a, &b), directed(&b, &a)))
}

/// Symmetric 95th-percentile surface distance.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (ab, ba) = surface_distances(pred, gt)?;
    Ok(percentile(&ab, 95.0).max(percentile(&ba, 95.0)))
}

/// Average symmetric surface distance.
pub fn asd(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (ab, ba) = surface_distances(pred, gt)?;
    Ok((ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: usize,
    pub dice: f64,
    pub jaccard: f64,
    /// Absent when either mask is empty.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    /// `""`, `"empty_pred"`, `"empty_gt"` or `"empty_both"`.
    pub flag: String,
}

pub fn case_metrics(case_id: usize, pred: &BinaryMask, gt: &BinaryMask) -> Result<CaseMetrics> {
    let dice = dice(pred, gt)?;
    let jaccard = jaccard(pred, gt)?;
    let flag = match (pred.is_empty(), gt.is_empty()) {
        (false, false) => "",
        (true, false) => "empty_pred",
        (false, true) => "empty_gt",
        (true, true) => "empty_both",
    };
    let (hd95, asd) = if flag.is_empty() {
        let (ab, ba) = surface_distances(pred, gt)?;
        let h = percentile(&ab, 95.0).max(percentile(&ba, 95.0));
        let a = (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64;
        (Some(h), Some(a))
    } else {
        (None, None)
    };
    Ok(CaseMetrics { case_id, dice, jaccard, hd95, asd, flag: flag.to_string() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    /// Over all cases.
    pub dice: f64,
    pub jaccard: f64,
    /// Over unflagged cases; absent when every case is flagged.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub n_cases: usize,
    pub n_distance_cases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub mean: MeanMetrics,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::InvalidArgument("no cases to report".into()));
        }
        let mean = MeanMetrics {
            dice: mean(cases.iter().map(|c| c.dice)).expect("non-empty"),
            jaccard: mean(cases.iter().map(|c| c.jaccard)).expect("non-empty"),
            hd95: mean(cases.iter().filter_map(|c| c.hd95)),
            asd: mean(cases.iter().filter_map(|c| c.asd)),
            n_cases: cases.len(),
            n_distance_cases: cases.iter().filter(|c| c.hd95.is_some()).count(),
        };
        Ok(MetricsReport { cases, mean })
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v}"));
        let mut s = format!("{METRICS_CSV_HEADER}\n");
        for c in &self.cases {
            let _ = writeln!(s, "{},{},{},{},{},{}", c.case_id, c.dice, c.jaccard, opt(c.hd95), opt(c.asd), c.flag);
        }
        s
    }

    /// Writes `metrics.csv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("metrics.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }

    /// Four-column summary table.
    pub fn summary(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
        format!(
            "cases  Dice(%)  Jaccard(%)  95HD(vox)  ASD(vox)\n{:>5}  {:>7.2}  {:>10.2}  {:>9}  {:>8}\n",
            self.mean.n_cases,
            self.mean.dice,
            self.mean.jaccard,
            opt(self.mean.hd95),
            opt(self.mean.asd)
        )
    }
}

/// Anything that maps a full intensity volume to foreground probabilities
/// `[D, H, W]` (or `[1, 1, D, H, W]`).
pub trait VolumePredictor {
    fn predict_volume(&self, volume: &Volume) -> Result<Tensor>;
}

/// Predicts every test case of `manifest` stored under `data_dir` and scores
/// the `p > threshold` masks.
pub fn evaluate_split(
    model: &dyn VolumePredictor,
    data_dir: &Path,
    manifest: &DatasetManifest,
    threshold: f64,
) -> Result<MetricsReport> {
    if manifest.test_ids.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    let mut cases = Vec::with_capacity(manifest.test_ids.len());
    for &id in &manifest.test_ids {
        let case = load_case(data_dir, id)?;
        let probs = model.predict_volume(&case.volume)?;
        let pred = BinaryMask::from_probs(&probs, threshold)?;
        let gt = BinaryMask::from_label(&case.label);
        cases.push(case_metrics(id, &pred, &gt)?);
    }
    MetricsReport::from_cases(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    fn mask_from(dims: [usize; 3], pts: &[[usize; 3]]) -> BinaryMask {
        let mut data = vec![false; dims.iter().product()];
        for p in pts {
            data[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = true;
        }
        BinaryMask::new(dims, data).unwrap()
    }

    fn cube(dims: [usize; 3], origin: [usize; 3], side: usize) -> BinaryMask {
        let mut pts = Vec::new();
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    pts.push([origin[0] + z, origin[1] + y, origin[2] + x]);
                }
            }
        }
        mask_from(dims, &pts)
    }

    fn random_mask(dims: [usize; 3], p: f64, rng: &mut SeededRng) -> BinaryMask {
        let n = dims.iter().product();
        BinaryMask::new(dims, (0..n).map(|_| rng.next_f64() < p).collect()).unwrap()
    }

    #[test]
    fn overlap_examples() {
        let d = [8; 3];
        let g = mask_from(d, &[[1, 1, 1], [1, 1, 2]]);
        let p = mask_from(d, &[[1, 1, 1]]);
        assert_eq!(dice(&g, &g).unwrap(), 100.0);
        assert_eq!(jaccard(&g, &g).unwrap(), 100.0);
        assert!((dice(&p, &g).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        let far = mask_from(d, &[[5, 5, 5]]);
        assert_eq!(dice(&far, &g).unwrap(), 0.0);
        assert_eq!(jaccard(&far, &g).unwrap(), 0.0);
        let e = mask_from(d, &[]);
        assert_eq!(dice(&e, &e).unwrap(), 100.0);
        assert!(dice(&mask_from([8, 8, 9], &[]), &g).is_err());
    }

    #[test]
    fn jaccard_dice_identity() {
        let mut rng = SeededRng::new(0);
        for _ in 0..200 {
            let a = random_mask([6; 3], rng.next_f64(), &mut rng);
            let b = random_mask([6; 3], rng.next_f64(), &mut rng);
            let d = dice(&a, &b).unwrap() / 100.0;
            let j = jaccard(&a, &b).unwrap() / 100.0;
            assert!((j - d / (2.0 - d)).abs() < 1e-12);
        }
    }

    #[test]
    fn surfaces() {
        assert_eq!(surface_voxels(&mask_from([5; 3], &[[2, 2, 2]])).unwrap(), vec![[2, 2, 2]]);
        assert_eq!(surface_voxels(&cube([7; 3], [2; 3], 3)).unwrap().len(), 26);
        let full = BinaryMask::new([4; 3], vec![true; 64]).unwrap();
        assert_eq!(surface_voxels(&full).unwrap().len(), 64 - 8);
        assert!(matches!(surface_voxels(&mask_from([4; 3], &[])), Err(Error::EmptyMask)));
    }

    #[test]
    fn distance_examples() {
        let a = mask_from([12; 3], &[[1, 2, 3]]);
        let b = mask_from([12; 3], &[[6, 2, 3]]);
        assert_eq!(hd95(&a, &b).unwrap(), 5.0);
        assert_eq!(asd(&a, &b).unwrap(), 5.0);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        assert_eq!(asd(&a, &a).unwrap(), 0.0);
        let c1 = cube([12; 3], [1, 2, 2], 3);
        let c2 = cube([12; 3], [4, 2, 2], 3);
        // Shift along z by exactly the side length: each shell voxel's nearest
        // counterpart is its translate's neighbourhood; the oracle below
        // checks the closed forms.
        let h = hd95(&c1, &c2).unwrap();
        let s = asd(&c1, &c2).unwrap();
        assert_eq!(hd95(&c2, &c1).unwrap(), h);
        assert_eq!(asd(&c2, &c1).unwrap(), s);
        // Faces z=1 (9 voxels) sit 3 away, middle layer shell (8) sits 2
        // away, z=3 face (9) sits 1 away: mean (27 + 16 + 9)/26 = 2.
        assert!((s - 2.0).abs() < 1e-12);
        assert!((h - 3.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_and_invariances() {
        let mut rng = SeededRng::new(1);
        for _ in 0..20 {
            let a = random_mask([7, 8, 6], 0.3, &mut rng);
            let b = random_mask([7, 8, 6], 0.3, &mut rng);
            if a.is_empty() || b.is_empty() {
                continue;
            }
            let sa = surface_voxels(&a).unwrap();
            let sb = surface_voxels(&b).unwrap();
            let mut max = 0.0f64;
            let mut total = 0.0;
            for (x, y) in [(&sa, &sb), (&sb, &sa)] {
                for p in x.iter() {
                    let mut best = f64::INFINITY;
                    for q in y.iter() {
                        let d = ((p[0] as f64 - q[0] as f64).powi(2)
                            + (p[1] as f64 - q[1] as f64).powi(2)
                            + (p[2] as f64 - q[2] as f64).powi(2))
                        .sqrt();
                        best = best.min(d);
                    }
                    max = max.max(best);
                    total += best;
                }
            }
            let s = asd(&a, &b).unwrap();
            assert!((s - total / (sa.len() + sb.len()) as f64).abs() < 1e-9);
            assert!(hd95(&a, &b).unwrap() <= max + 1e-12);
            assert!(s <= max + 1e-12);
            assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
        }
        // Translating both masks leaves every metric unchanged.
        let a = cube([12; 3], [1, 1, 1], 3);
        let b = cube([12; 3], [2, 1, 3], 4);
        let ta = cube([12; 3], [5, 4, 2], 3);
        let tb = cube([12; 3], [6, 4, 4], 4);
        assert_eq!(case_metrics(0, &a, &b).unwrap().hd95, case_metrics(0, &ta, &tb).unwrap().hd95);
        assert_eq!(case_metrics(0, &a, &b).unwrap().asd, case_metrics(0, &ta, &tb).unwrap().asd);
        assert_eq!(dice(&a, &b).unwrap(), dice(&ta, &tb).unwrap());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0], 95.0), 9.5);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 50.0), 2.5);
    }

    #[test]
    fn report_means_and_flags() {
        let d = [6; 3];
        let g = cube(d, [1; 3], 2);
        let cases = vec![
            case_metrics(1, &g, &g).unwrap(),
            case_metrics(2, &mask_from(d, &[]), &g).unwrap(),
            case_metrics(3, &cube(d, [2; 3], 2), &g).unwrap(),
        ];
        assert_eq!(cases[1].flag, "empty_pred");
        assert!(cases[1].hd95.is_none());
        let r = MetricsReport::from_cases(cases.clone()).unwrap();
        assert!((r.mean.dice - (cases[0].dice + cases[1].dice + cases[2].dice) / 3.0).abs() < 1e-12);
        assert_eq!(r.mean.hd95, Some((0.0 + cases[2].hd95.unwrap()) / 2.0));
        assert_eq!(r.mean.n_distance_cases, 2);
        let csv = r.to_csv();
        assert_eq!(csv.lines().next().unwrap(), METRICS_CSV_HEADER);
        assert!(csv.lines().nth(2).unwrap().ends_with(",nan,nan,empty_pred"));
        assert!(MetricsReport::from_cases(vec![]).is_err());
    }
}
