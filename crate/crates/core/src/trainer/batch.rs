//! Per-step sampling of cases and construction of the three views.

use crate::augment::{color_jitter, copy_paste, make_mix_mask, restoration_region, weak_augment, AugmentConfig, AugmentedView};
use crate::error::{Error, Result};
use crate::synthdata::Case;
use crate::tensor::{SeededRng, Tensor};

/// Weak, colour-jittered and copy-paste views of one case, sharing geometry.
#[derive(Clone, Debug)]
pub struct ViewTriple {
    pub weak: AugmentedView,
    pub col: AugmentedView,
    pub mix: AugmentedView,
}

/// Everything one training step consumes, before any forward pass.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub labeled: Vec<ViewTriple>,
    pub unlabeled: Vec<ViewTriple>,
}

/// Which views a step needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNeeds {
    pub strong: bool,
    pub unlabeled: bool,
}

fn pick<'a>(cases: &'a [Case], rng: &mut SeededRng) -> &'a Case {
    &cases[rng.below(cases.len())]
}

/// A labeled weak view from a case other than `avoid`, when one exists.
fn mix_source(labeled: &[Case], avoid: Option<usize>, crop: [usize; 3], rng: &mut SeededRng) -> Result<AugmentedView> {
    let pool: Vec<&Case> = labeled.iter().filter(|c| Some(c.id) != avoid).collect();
    let case = if pool.is_empty() { pick(labeled, rng) } else { pool[rng.below(pool.len())] };
    Ok(weak_augment(&case.volume, Some(&case.label), crop, rng)?.with_case(case.id))
}

fn triple(
    case: &Case,
    with_label: bool,
    labeled: &[Case],
    cfg: &AugmentConfig,
    strong: bool,
    rng: &mut SeededRng,
) -> Result<ViewTriple> {
    let crop = cfg.crop_size;
    let label = with_label.then_some(&case.label);
    let weak = weak_augment(&case.volume, label, crop, rng)?.with_case(case.id);
    if !strong {
        return Ok(ViewTriple { col: weak.clone(), mix: weak.clone(), weak });
    }
    let col = color_jitter(&weak, &cfg.jitter, rng)?;
    let src = mix_source(labeled, Some(case.id), crop, rng)?;
    let mask = make_mix_mask(crop, cfg.mix.ratio_range, rng)?;
    let mix = copy_paste(&weak, &src, &mask)?;
    Ok(ViewTriple { weak, col, mix })
}

/// Draws `b_l` labeled and `b_u` unlabeled cases with replacement and builds
/// their views. Unlabeled views never see their ground truth. When strong
/// views are not needed `col` and `mix` are copies of `weak`.
pub fn sample_batch(
    labeled: &[Case],
    unlabeled: &[Case],
    (b_l, b_u): (usize, usize),
    cfg: &AugmentConfig,
    needs: BatchNeeds,
    rng: &mut SeededRng,
) -> Result<StepBatch> {
    if labeled.is_empty() || (needs.unlabeled && unlabeled.is_empty()) {
        return Err(Error::InvalidArgument("both training pools must be non-empty".into()));
    }
    let mut out = StepBatch { labeled: Vec::with_capacity(b_l), unlabeled: Vec::with_capacity(b_u) };
    for _ in 0..b_l {
        let case = pick(labeled, rng);
        out.labeled.push(triple(case, true, labeled, cfg, needs.strong, rng)?);
    }
    if needs.unlabeled {
        for _ in 0..b_u {
            let case = pick(unlabeled, rng);
            out.unlabeled.push(triple(case, false, labeled, cfg, needs.strong, rng)?);
        }
    }
    Ok(out)
}

/// Stacks `[D, H, W]` tensors into `[B, 1, D, H, W]`.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::InvalidArgument("stack of nothing".into()))?;
    let s = first.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != s.as_slice() {
            return Err(Error::shape("stack", format!("{:?} vs {s:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len(), 1];
    shape.extend(s);
    Tensor::new(shape, data)
}

pub fn view_data(views: &[&AugmentedView]) -> Result<Tensor> {
    stack(&views.iter().map(|v| &v.data).collect::<Vec<_>>())
}

pub fn view_labels(views: &[&AugmentedView]) -> Result<Tensor> {
    let labels = views
        .iter()
        .map(|v| v.label.as_ref().ok_or_else(|| Error::InvalidArgument("view has no label".into())))
        .collect::<Result<Vec<_>>>()?;
    stack(&labels)
}

pub fn restoration_regions(views: &[&AugmentedView]) -> Result<Tensor> {
    let r = views.iter().map(|v| restoration_region(v)).collect::<Result<Vec<_>>>()?;
    stack(&r.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset_case, GeneratorParams};

    fn pool(ids: &[usize]) -> Vec<Case> {
        let g = GeneratorParams { dims: [16; 3], radius_range: [2.0, 4.0], ..Default::default() };
        ids.iter().map(|&id| generate_dataset_case(3, id, &g).unwrap()).collect()
    }

    #[test]
    fn views_share_geometry_and_hide_unlabeled_truth() {
        let (l, u) = (pool(&[0, 1]), pool(&[2, 3, 4]));
        let cfg = AugmentConfig { crop_size: [8; 3], ..Default::default() };
        let needs = BatchNeeds { strong: true, unlabeled: true };
        let b = sample_batch(&l, &u, (2, 3), &cfg, needs, &mut SeededRng::new(1)).unwrap();
        assert_eq!((b.labeled.len(), b.unlabeled.len()), (2, 3));
        for t in b.labeled.iter().chain(&b.unlabeled) {
            assert_eq!(t.weak.geometry(), t.col.geometry());
            assert_eq!(t.weak.geometry(), t.mix.geometry());
            let src = t.mix.partner_id.unwrap();
            assert!(l.iter().any(|c| c.id == src));
            assert_ne!(Some(src), t.weak.case_id);
        }
        assert!(b.unlabeled.iter().all(|t| t.weak.label.is_none() && t.mix.label.is_none()));
        assert!(b.labeled.iter().all(|t| t.mix.label.is_some()));
        let x = view_data(&b.unlabeled.iter().map(|t| &t.mix).collect::<Vec<_>>()).unwrap();
        assert_eq!(x.shape(), [3, 1, 8, 8, 8]);
        let r = restoration_regions(&b.unlabeled.iter().map(|t| &t.mix).collect::<Vec<_>>()).unwrap();
        assert_eq!(r.shape(), x.shape());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (l, u) = (pool(&[0, 1]), pool(&[2, 3]));
        let cfg = AugmentConfig { crop_size: [8; 3], ..Default::default() };
        let needs = BatchNeeds { strong: true, unlabeled: true };
        let a = sample_batch(&l, &u, (1, 1), &cfg, needs, &mut SeededRng::new(9)).unwrap();
        let b = sample_batch(&l, &u, (1, 1), &cfg, needs, &mut SeededRng::new(9)).unwrap();
        assert!(a.labeled[0].mix.data.bitwise_eq(&b.labeled[0].mix.data));
        assert!(a.unlabeled[0].col.data.bitwise_eq(&b.unlabeled[0].col.data));
    }
}
