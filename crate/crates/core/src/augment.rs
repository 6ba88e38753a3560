//! Weak and strong views of a case.
//!
//! The weak view is a random crop with per-axis flips. Both strong views are
//! built on top of the weak crop, so voxel `(i, j, k)` refers to the same
//! location in all three views of a case and weak predictions can serve as
//! pseudo-labels without inverse warping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{LabelVolume, Volume};
use crate::tensor::{SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Weak,
    StrongCol,
    StrongMix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
    pub mu: f64,
    pub sigma: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            alpha: [0.8, 1.2],
            beta: [-0.1, 0.1],
            mu: 0.0,
            sigma: 0.05,
        }
    }
}

impl JitterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha[0] > 0.0 && self.alpha[0] <= self.alpha[1]) {
            return Err(Error::Config(format!("jitter.alpha {:?} invalid", self.alpha)));
        }
        if !(self.beta[0] <= self.beta[1]) {
            return Err(Error::Config(format!("jitter.beta {:?} invalid", self.beta)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("jitter.sigma {} must be ≥ 0", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    pub ratio_range: [f64; 2],
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig { ratio_range: [0.25, 0.5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_size: [usize; 3],
    pub jitter: JitterConfig,
    pub mix: MixConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_size: [24, 24, 24],
            jitter: JitterConfig::default(),
            mix: MixConfig::default(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        self.jitter.validate()?;
        let [lo, hi] = self.mix.ratio_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("mix.ratio_range {:?} invalid", self.mix.ratio_range)));
        }
        if self.crop_size.contains(&0) {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        Ok(())
    }
}

/// Crop placement and flips shared by every view of a case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub origin: [usize; 3],
    pub flips: [bool; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    /// `[D, H, W]` crop.
    pub data: Tensor,
    /// Label crop in the same geometry, when the case is labeled.
    pub label: Option<Tensor>,
    pub kind: ViewKind,
    pub case_id: Option<usize>,
    pub crop_origin: [usize; 3],
    pub flips: [bool; 3],
    pub mix_mask: Option<Tensor>,
    pub partner_id: Option<usize>,
    pub jitter_params: Option<JitterParams>,
}

impl AugmentedView {
    pub fn crop_size(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn geometry(&self) -> Geometry {
        Geometry { origin: self.crop_origin, flips: self.flips }
    }

    pub fn with_case(mut self, id: usize) -> Self {
        self.case_id = Some(id);
        self
    }
}

pub fn sample_geometry(dims: [usize; 3], crop: [usize; 3], rng: &mut SeededRng) -> Result<Geometry> {
    for i in 0..3 {
        if crop[i] > dims[i] || crop[i] == 0 {
            return Err(Error::InvalidArgument(format!("crop {crop:?} does not fit volume {dims:?}")));
        }
    }
    let mut origin = [0; 3];
    for i in 0..3 {
        origin[i] = rng.below(dims[i] - crop[i] + 1);
    }
    let flips = [rng.coin(), rng.coin(), rng.coin()];
    Ok(Geometry { origin, flips })
}

fn crop_flip(values: &[f64], dims: [usize; 3], crop: [usize; 3], g: Geometry) -> Tensor {
    let [_, h, w] = dims;
    let mut out = Vec::with_capacity(crop.iter().product());
    for z in 0..crop[0] {
        let sz = g.origin[0] + if g.flips[0] { crop[0] - 1 - z } else { z };
        for y in 0..crop[1] {
            let sy = g.origin[1] + if g.flips[1] { crop[1] - 1 - y } else { y };
            for x in 0..crop[2] {
                let sx = g.origin[2] + if g.flips[2] { crop[2] - 1 - x } else { x };
                out.push(values[sz * h * w + sy * w + sx]);
            }
        }
    }
    Tensor::new(crop.to_vec(), out).expect("crop shape")
}

/// Weak view with explicit geometry.
pub fn weak_view(vol: &Volume, label: Option<&LabelVolume>, crop: [usize; 3], g: Geometry) -> Result<AugmentedView> {
    let dims = vol.dims();
    for i in 0..3 {
        if g.origin[i] + crop[i] > dims[i] {
            return Err(Error::InvalidArgument(format!(
                "crop {crop:?} at {:?} exceeds volume {dims:?}",
                g.origin
            )));
        }
    }
    let label = match label {
        Some(l) if l.dims() != dims => {
            return Err(Error::shape("weak_augment", format!("label {:?} vs volume {dims:?}", l.dims())))
        }
        Some(l) => {
            let vals: Vec<f64> = l.mask().iter().map(|&m| m as f64).collect();
            Some(crop_flip(&vals, dims, crop, g))
        }
        None => None,
    };
    Ok(AugmentedView {
        data: crop_flip(vol.voxels(), dims, crop, g),
        label,
        kind: ViewKind::Weak,
        case_id: None,
        crop_origin: g.origin,
        flips: g.flips,
        mix_mask: None,
        partner_id: None,
        jitter_params: None,
    })
}

/// Random crop plus independent per-axis flips.
pub fn weak_augment(
    vol: &Volume,
    label: Option<&LabelVolume>,
    crop: [usize; 3],
    rng: &mut SeededRng,
) -> Result<AugmentedView> {
    let g = sample_geometry(vol.dims(), crop, rng)?;
    weak_view(vol, label, crop, g)
}

/// Fixed-parameter form of the colour jitter: `clamp(α·x + β + noise, 0, 1)`.
pub fn jitter_with(weak: &AugmentedView, params: JitterParams, mu: f64, rng: &mut SeededRng) -> Result<AugmentedView> {
    let noise = rng.gaussian(mu, params.sigma, weak.data.shape())?;
    let data = weak
        .data
        .zip_map(&noise, |x, n| (params.alpha * x + params.beta + n).clamp(0.0, 1.0))?;
    Ok(AugmentedView {
        data,
        kind: ViewKind::StrongCol,
        jitter_params: Some(params),
        mix_mask: None,
        partner_id: None,
        ..weak.clone()
    })
}

/// Contrast `α`, brightness `β` and i.i.d. Gaussian noise on top of a weak view.
pub fn color_jitter(weak: &AugmentedView, cfg: &JitterConfig, rng: &mut SeededRng) -> Result<AugmentedView> {
    cfg.validate()?;
    let alpha = rng.uniform_f64(cfg.alpha[0], cfg.alpha[1]);
    let beta = rng.uniform_f64(cfg.beta[0], cfg.beta[1]);
    jitter_with(weak, JitterParams { alpha, beta, sigma: cfg.sigma }, cfg.mu, rng)
}

/// Binary mask that is one inside a single random axis-aligned box.
pub fn make_mix_mask(crop: [usize; 3], ratio_range: [f64; 2], rng: &mut SeededRng) -> Result<Tensor> {
    let [lo, hi] = ratio_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidArgument(format!("ratio_range {ratio_range:?} invalid")));
    }
    let mut start = [0; 3];
    let mut end = [0; 3];
    for i in 0..3 {
        let extent = ((rng.uniform_f64(lo, hi) * crop[i] as f64).round() as usize).clamp(1, crop[i]);
        start[i] = rng.below(crop[i] - extent + 1);
        end[i] = start[i] + extent;
    }
    let mut m = Tensor::zeros(crop.to_vec());
    let d = m.data_mut();
    for z in start[0]..end[0] {
        for y in start[1]..end[1] {
            for x in start[2]..end[2] {
                d[(z * crop[1] + y) * crop[2] + x] = 1.0;
            }
        }
    }
    Ok(m)
}

fn blend(op: &'static str, target: &Tensor, source: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if target.shape() != source.shape() || target.shape() != mask.shape() {
        return Err(Error::shape(
            op,
            format!("target {:?}, source {:?}, mask {:?}", target.shape(), source.shape(), mask.shape()),
        ));
    }
    let data = target
        .data()
        .iter()
        .zip(source.data())
        .zip(mask.data())
        .map(|((&t, &s), &m)| if m == 1.0 { s } else { t })
        .collect();
    Tensor::new(target.shape().to_vec(), data)
}

/// `M ⊙ y_src + (1 − M) ⊙ y_tgt` for binary labels.
pub fn mix_labels(target: &Tensor, source: &Tensor, mask: &Tensor) -> Result<Tensor> {
    blend("mix_labels", target, source, mask)
}

/// Pastes the `M = 1` region of `source` into `target`. Labels are blended
/// with the same mask when both views carry one.
pub fn copy_paste(target: &AugmentedView, source: &AugmentedView, mask: &Tensor) -> Result<AugmentedView> {
    let data = blend("copy_paste", &target.data, &source.data, mask)?;
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::domain("copy_paste", "mix mask must be binary"));
    }
    let label = match (&target.label, &source.label) {
        (Some(t), Some(s)) => Some(mix_labels(t, s, mask)?),
        _ => None,
    };
    Ok(AugmentedView {
        data,
        label,
        kind: ViewKind::StrongMix,
        mix_mask: Some(mask.clone()),
        partner_id: source.case_id,
        jitter_params: None,
        ..target.clone()
    })
}

/// `1 − M`: voxels whose content came from the view's own stream.
pub fn restoration_region(view: &AugmentedView) -> Result<Tensor> {
    match (&view.kind, &view.mix_mask) {
        (ViewKind::StrongMix, Some(m)) => Ok(m.map(|v| 1.0 - v)),
        _ => Err(Error::InvalidArgument(format!("restoration region of a {:?} view", view.kind))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_case, GeneratorParams};

    fn case() -> (Volume, LabelVolume) {
        generate_case(2, &GeneratorParams::default()).unwrap()
    }

    #[test]
    fn full_crop_without_flips_is_identity() {
        let (v, l) = case();
        let g = Geometry { origin: [0; 3], flips: [false; 3] };
        let view = weak_view(&v, Some(&l), v.dims(), g).unwrap();
        assert_eq!(view.data.data(), v.voxels());
        assert_eq!(view.label.unwrap(), l.to_tensor().reshape(vec![32, 32, 32]).unwrap());
    }

    #[test]
    fn shared_geometry_keeps_alignment() {
        let (v, l) = case();
        let fg_mean = |x: &[f64], m: &[f64]| {
            let (s, n) = x.iter().zip(m).filter(|(_, &m)| m == 1.0).fold((0.0, 0), |(s, n), (&x, _)| (s + x, n + 1));
            s / n as f64
        };
        let full = weak_view(&v, Some(&l), v.dims(), Geometry { origin: [0; 3], flips: [false; 3] }).unwrap();
        let flipped = weak_view(&v, Some(&l), v.dims(), Geometry { origin: [0; 3], flips: [true, false, true] }).unwrap();
        let a = fg_mean(full.data.data(), full.label.as_ref().unwrap().data());
        let b = fg_mean(flipped.data.data(), flipped.label.as_ref().unwrap().data());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn weak_augment_is_deterministic_and_bounded() {
        let (v, l) = case();
        let a = weak_augment(&v, Some(&l), [24; 3], &mut SeededRng::new(4)).unwrap();
        let b = weak_augment(&v, Some(&l), [24; 3], &mut SeededRng::new(4)).unwrap();
        assert_eq!(a, b);
        assert!(weak_augment(&v, None, [33, 8, 8], &mut SeededRng::new(4)).is_err());
    }

    #[test]
    fn jitter_identity_and_affine() {
        let (v, _) = case();
        let weak = weak_augment(&v, None, [16; 3], &mut SeededRng::new(1)).unwrap();
        let id = jitter_with(&weak, JitterParams { alpha: 1.0, beta: 0.0, sigma: 0.0 }, 0.0, &mut SeededRng::new(0)).unwrap();
        assert!(id.data.bitwise_eq(&weak.data));
        assert_eq!(id.kind, ViewKind::StrongCol);
        assert_eq!(id.geometry(), weak.geometry());

        let mut constant = weak.clone();
        constant.data = Tensor::full(vec![16, 16, 16], 0.4);
        let out = jitter_with(&constant, JitterParams { alpha: 0.5, beta: 0.1, sigma: 0.0 }, 0.0, &mut SeededRng::new(0)).unwrap();
        assert!(out.data.data().iter().all(|&x| (x - 0.3).abs() < 1e-15));
    }

    #[test]
    fn jitter_perturbation_bound() {
        let (v, _) = case();
        let cfg = JitterConfig::default();
        let bound = cfg.alpha[1] + 0.1 + 6.0 * cfg.sigma;
        let mut rng = SeededRng::new(8);
        for _ in 0..100 {
            let weak = weak_augment(&v, None, [16; 3], &mut rng).unwrap();
            let col = color_jitter(&weak, &cfg, &mut rng).unwrap();
            let d = col.data.max_abs_diff(&weak.data);
            assert!(d <= bound, "{d} > {bound}");
            assert!(col.data.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn mix_mask_boxes() {
        let m = make_mix_mask([24; 3], [1.0, 1.0], &mut SeededRng::new(0)).unwrap();
        assert!(m.data().iter().all(|&x| x == 1.0));
        let m = make_mix_mask([24; 3], [0.5, 0.5], &mut SeededRng::new(0)).unwrap();
        assert_eq!(m.sum(), 1728.0);
        let m = make_mix_mask([10, 12, 14], [0.25, 0.5], &mut SeededRng::new(3)).unwrap();
        // Contiguous box: the ones coincide with their bounding box.
        let mut lo = [usize::MAX; 3];
        let mut hi = [0; 3];
        for z in 0..10 {
            for y in 0..12 {
                for x in 0..14 {
                    let v = m.data()[(z * 12 + y) * 14 + x];
                    assert!(v == 0.0 || v == 1.0);
                    if v == 1.0 {
                        for (i, c) in [z, y, x].into_iter().enumerate() {
                            lo[i] = lo[i].min(c);
                            hi[i] = hi[i].max(c);
                        }
                    }
                }
            }
        }
        let boxed: usize = (0..3).map(|i| hi[i] - lo[i] + 1).product();
        assert_eq!(boxed as f64, m.sum());
    }

    #[test]
    fn copy_paste_exactness() {
        let (v, l) = case();
        let mut rng = SeededRng::new(6);
        let t = weak_augment(&v, None, [16; 3], &mut rng).unwrap();
        let s = weak_augment(&v, Some(&l), [16; 3], &mut rng).unwrap().with_case(7);
        let ones = Tensor::ones(vec![16, 16, 16]);
        let zeros = Tensor::zeros(vec![16, 16, 16]);
        assert!(copy_paste(&t, &s, &ones).unwrap().data.bitwise_eq(&s.data));
        assert!(copy_paste(&t, &s, &zeros).unwrap().data.bitwise_eq(&t.data));
        let m = make_mix_mask([16; 3], [0.25, 0.5], &mut rng).unwrap();
        let mixed = copy_paste(&t, &s, &m).unwrap();
        assert_eq!(mixed.partner_id, Some(7));
        assert_eq!(mixed.kind, ViewKind::StrongMix);
        assert!(mixed.label.is_none());
        for i in 0..m.numel() {
            let want = if m.data()[i] == 1.0 { s.data.data()[i] } else { t.data.data()[i] };
            assert_eq!(mixed.data.data()[i].to_bits(), want.to_bits());
        }
        assert!(copy_paste(&t, &weak_augment(&v, None, [8; 3], &mut rng).unwrap(), &m).is_err());
    }

    #[test]
    fn label_mixing() {
        let dims = vec![4, 4, 4];
        let mut yt = Tensor::zeros(dims.clone());
        let mut ys = Tensor::zeros(dims.clone());
        yt.data_mut()[0] = 1.0; // target foreground at a corner
        ys.data_mut()[63] = 1.0; // source foreground at the opposite corner
        let zeros = Tensor::zeros(dims.clone());
        assert_eq!(mix_labels(&yt, &ys, &zeros).unwrap(), yt);
        let mut m = Tensor::zeros(dims.clone());
        for z in 2..4 {
            for y in 2..4 {
                for x in 2..4 {
                    m.data_mut()[(z * 4 + y) * 4 + x] = 1.0;
                }
            }
        }
        let out = mix_labels(&yt, &ys, &m).unwrap();
        for i in 0..64 {
            let want = if m.data()[i] == 1.0 { ys.data()[i] } else { yt.data()[i] };
            assert_eq!(out.data()[i], want);
        }
        assert_eq!(out.sum(), 2.0);
    }

    #[test]
    fn restoration_complements_mask() {
        let (v, _) = case();
        let mut rng = SeededRng::new(9);
        let t = weak_augment(&v, None, [24; 3], &mut rng).unwrap();
        let s = weak_augment(&v, None, [24; 3], &mut rng).unwrap();
        assert!(restoration_region(&t).is_err());
        let zeros = Tensor::zeros(vec![24, 24, 24]);
        let r = restoration_region(&copy_paste(&t, &s, &zeros).unwrap()).unwrap();
        assert_eq!(r.sum(), 24f64.powi(3));
        let m = make_mix_mask([24; 3], [0.5, 0.5], &mut rng).unwrap();
        let r = restoration_region(&copy_paste(&t, &s, &m).unwrap()).unwrap();
        assert_eq!(r.sum(), 24f64.powi(3) - 1728.0);
        assert!(r.data().iter().zip(m.data()).all(|(a, b)| a + b == 1.0));
    }
}
