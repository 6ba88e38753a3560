//! The training objective as one differentiable function of the parameters.
//!
//! Everything the objective treats as data (uncertainty maps, pseudo-labels,
//! channel masks, queue retrievals) goes through a [`Frozen`] store. A
//! training step only records; the gradient check records once and replays
//! the same choices under every perturbation, so finite differences see the
//! same piecewise-smooth branch as the analytic pass.

use crate::error::{Error, Result};
use crate::interact::{bidirectional_interact, BciViews, FeatureQueue, Retrievals, Selection};
use crate::losses::{
    combine, cons_loss, lambda_u, pseudo_labels, seg_loss, sup_loss_weighted, total_loss, uncertainty_weights,
    unsup_loss_weighted, LossBreakdown,
};
use crate::params::Bound;
use crate::router::{random_mask, score_channels, select, topk_mask, ChannelMask, RouterMode};
use crate::segnet::{decode, encode};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

use super::batch::{restoration_regions, view_data, view_labels, StepBatch};
use super::config::{Toggles, TrainConfig};

/// How the toggles shape the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Three views per stream; sup + cons + λ·unsup.
    Full,
    /// SSP off, BCI on: weak views only, unlabeled weak view fitted to its
    /// own hard pseudo-label.
    WeakPseudo,
    /// Labeled weak views only.
    Supervised,
}

impl LossMode {
    pub fn from_toggles(t: Toggles) -> Self {
        if t.ssp {
            LossMode::Full
        } else if t.bci {
            LossMode::WeakPseudo
        } else {
            LossMode::Supervised
        }
    }

    pub fn needs_strong(self) -> bool {
        self == LossMode::Full
    }

    pub fn needs_unlabeled(self) -> bool {
        self != LossMode::Supervised
    }
}

#[derive(Clone, Debug)]
enum Entry {
    Tensor(Tensor),
    Mask(ChannelMask),
    Retrievals(Retrievals),
}

/// Ordered record of detached values.
#[derive(Clone, Debug, Default)]
pub struct Frozen {
    entries: Vec<Entry>,
    cursor: usize,
    replay: bool,
}

impl Frozen {
    pub fn recording() -> Self {
        Self::default()
    }

    /// A copy that replays the recorded values from the start.
    pub fn replay(&self) -> Self {
        Frozen { entries: self.entries.clone(), cursor: 0, replay: true }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn next(&mut self) -> Result<Entry> {
        let e = self
            .entries
            .get(self.cursor)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("replay ran past the recorded values".into()))?;
        self.cursor += 1;
        Ok(e)
    }

    fn tensor(&mut self, make: impl FnOnce() -> Result<Tensor>) -> Result<Tensor> {
        if self.replay {
            return match self.next()? {
                Entry::Tensor(t) => Ok(t),
                other => Err(mismatch("tensor", &other)),
            };
        }
        let t = make()?;
        self.entries.push(Entry::Tensor(t.clone()));
        Ok(t)
    }

    fn mask(&mut self, make: impl FnOnce() -> Result<ChannelMask>) -> Result<ChannelMask> {
        if self.replay {
            return match self.next()? {
                Entry::Mask(m) => Ok(m),
                other => Err(mismatch("mask", &other)),
            };
        }
        let m = make()?;
        self.entries.push(Entry::Mask(m.clone()));
        Ok(m)
    }

    fn frozen_retrievals(&mut self) -> Result<Option<Retrievals>> {
        if !self.replay {
            return Ok(None);
        }
        match self.next()? {
            Entry::Retrievals(r) => Ok(Some(r)),
            other => Err(mismatch("retrievals", &other)),
        }
    }

    fn record_retrievals(&mut self, r: Retrievals) {
        if !self.replay {
            self.entries.push(Entry::Retrievals(r));
        }
    }
}

fn mismatch(want: &str, got: &Entry) -> Error {
    let got = match got {
        Entry::Tensor(_) => "tensor",
        Entry::Mask(_) => "mask",
        Entry::Retrievals(_) => "retrievals",
    };
    Error::InvalidArgument(format!("replay expected {want}, found {got}"))
}

/// Detached bottleneck channels and masks to enqueue after the update.
#[derive(Clone, Debug)]
pub struct MemoryUpdate {
    /// `[B_l, K, d, h, w]` weak-view selected channels.
    pub labeled_sub: Tensor,
    /// `[B_l, d·h·w]` ground truth at bottleneck resolution.
    pub labeled_mask: Tensor,
    pub unlabeled_sub: Tensor,
    /// `[B_u, d·h·w]` pseudo-labels at bottleneck resolution.
    pub unlabeled_mask: Tensor,
}

impl MemoryUpdate {
    pub fn apply(&self, q_l: &mut FeatureQueue, q_u: &mut FeatureQueue) -> Result<()> {
        push_items(q_l, &self.labeled_sub, &self.labeled_mask)?;
        push_items(q_u, &self.unlabeled_sub, &self.unlabeled_mask)
    }
}

fn push_items(q: &mut FeatureQueue, sub: &Tensor, mask: &Tensor) -> Result<()> {
    let s = sub.shape();
    let (b, k) = (s[0], s[1]);
    let l: usize = s[2..].iter().product();
    for i in 0..b {
        let f = Tensor::new(vec![k, l], sub.data()[i * k * l..(i + 1) * k * l].to_vec())?;
        let m = Tensor::from_vec(mask.data()[i * l..(i + 1) * l].to_vec());
        crate::interact::enqueue(q, &f, &m)?;
    }
    Ok(())
}

/// Samples `[B, 1, D, H, W]` at every `f`-th voxel, giving `[B, D/f·H/f·W/f]`.
pub fn downsample_mask(t: &Tensor, f: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 5 || s[1] != 1 || (2..5).any(|i| !s[i].is_multiple_of(f)) {
        return Err(Error::shape("downsample_mask", format!("{s:?} at factor {f}")));
    }
    let (b, d, h, w) = (s[0], s[2], s[3], s[4]);
    let (dd, hh, ww) = (d / f, h / f, w / f);
    let mut out = Vec::with_capacity(b * dd * hh * ww);
    for i in 0..b {
        for z in 0..dd {
            for y in 0..hh {
                for x in 0..ww {
                    out.push(t.data()[((i * d + z * f) * h + y * f) * w + x * f]);
                }
            }
        }
    }
    Tensor::new(vec![b, dd * hh * ww], out)
}

/// Output of one forward pass over the objective.
pub struct Forward {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub memory: Option<MemoryUpdate>,
}

struct KindOut {
    p_l: Var,
    p_u: Option<Var>,
    subs: Option<(Tensor, Tensor)>,
}

struct Ctx<'a> {
    p: &'a Bound,
    cfg: &'a TrainConfig,
    queues: (&'a FeatureQueue, &'a FeatureQueue),
    straight_through: bool,
}

fn concat_batch(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

fn batch_slice(tape: &mut Tape, v: Var, lo: usize, hi: usize) -> Result<Var> {
    let s = tape.value(v).shape().to_vec();
    let mut ranges = vec![(lo, hi)];
    ranges.extend(s[1..].iter().map(|&n| (0, n)));
    tape.slice(v, &ranges)
}

fn route(tape: &mut Tape, ctx: &Ctx, f: Var, frozen: &mut Frozen, rng: &mut SeededRng) -> Result<Selection> {
    let s = tape.value(f).shape().to_vec();
    let (b, c) = (s[0], s[1]);
    let k = ctx.cfg.router.k;
    if !ctx.cfg.toggles.cr {
        let mask = ChannelMask::full(b, c);
        let sub = select(tape, f, &mask, None)?;
        return Ok(Selection { mask, sub });
    }
    match ctx.cfg.router.mode {
        RouterMode::Learned => {
            let scores = score_channels(tape, f, ctx.p)?;
            let mask = frozen.mask(|| topk_mask(tape.value(scores), k))?;
            let sub = select(tape, f, &mask, ctx.straight_through.then_some(scores))?;
            Ok(Selection { mask, sub })
        }
        RouterMode::Random => {
            let mask = frozen.mask(|| random_mask(b, c, k, rng))?;
            let sub = select(tape, f, &mask, None)?;
            Ok(Selection { mask, sub })
        }
    }
}

fn forward_kind(
    tape: &mut Tape,
    ctx: &Ctx,
    x_l: &Tensor,
    x_u: Option<&Tensor>,
    interact: bool,
    frozen: &mut Frozen,
    rng: &mut SeededRng,
) -> Result<KindOut> {
    let b_l = x_l.shape()[0];
    let x = match x_u {
        Some(u) => concat_batch(x_l, u)?,
        None => x_l.clone(),
    };
    let b = x.shape()[0];
    let xv = tape.constant(x);
    let mut feats = encode(tape, ctx.p, &ctx.cfg.network, xv)?;
    let mut subs = None;
    if interact && x_u.is_some() {
        let f_l = batch_slice(tape, feats.bottleneck, 0, b_l)?;
        let f_u = batch_slice(tape, feats.bottleneck, b_l, b)?;
        let sel_l = route(tape, ctx, f_l, frozen, rng)?;
        let sel_u = route(tape, ctx, f_u, frozen, rng)?;
        let replay = frozen.frozen_retrievals()?;
        let out = bidirectional_interact(
            tape,
            (f_l, f_u),
            (&sel_l, &sel_u),
            ctx.queues,
            ctx.p,
            ctx.cfg.bci.direction,
            replay.as_ref(),
        )?;
        frozen.record_retrievals(out.retrievals);
        feats.bottleneck = tape.concat(&[out.f_l, out.f_u], 0)?;
        subs = Some((tape.value(sel_l.sub).clone(), tape.value(sel_u.sub).clone()));
    }
    let logits = decode(tape, ctx.p, &ctx.cfg.network, &feats)?;
    let probs = tape.sigmoid(logits)?;
    if x_u.is_none() {
        return Ok(KindOut { p_l: probs, p_u: None, subs });
    }
    let p_l = batch_slice(tape, probs, 0, b_l)?;
    let p_u = batch_slice(tape, probs, b_l, b)?;
    Ok(KindOut { p_l, p_u: Some(p_u), subs })
}

fn weights(tape: &Tape, p: Var, frozen: &mut Frozen) -> Result<Tensor> {
    frozen.tensor(|| Ok(uncertainty_weights(tape.value(p))))
}

/// Builds the loss of one step on `tape`.
///
/// `t` is the 1-based iteration that sets `λ_u(t)`. With `straight_through`
/// the router scores receive the straight-through gradient of the hard
/// selection; without it the router is only reachable through the (frozen)
/// masks, which is what a finite-difference check can verify.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    tape: &mut Tape,
    p: &Bound,
    cfg: &TrainConfig,
    batch: &StepBatch,
    queues: (&FeatureQueue, &FeatureQueue),
    t: usize,
    frozen: &mut Frozen,
    rng: &mut SeededRng,
    straight_through: bool,
) -> Result<Forward> {
    let mode = LossMode::from_toggles(cfg.toggles);
    let ctx = Ctx { p, cfg, queues, straight_through };
    let bci = cfg.toggles.bci;
    let weak_l: Vec<_> = batch.labeled.iter().map(|v| &v.weak).collect();
    let weak_u: Vec<_> = batch.unlabeled.iter().map(|v| &v.weak).collect();
    let y = view_labels(&weak_l)?;
    let x_wl = view_data(&weak_l)?;
    let x_wu = if mode.needs_unlabeled() { Some(view_data(&weak_u)?) } else { None };
    let weak = forward_kind(tape, &ctx, &x_wl, x_wu.as_ref(), bci, frozen, rng)?;

    let zero = tape.constant(Tensor::scalar(0.0));
    let (l_sup, l_cons, l_unsup, pseudo) = match mode {
        LossMode::Supervised => {
            let w = weights(tape, weak.p_l, frozen)?;
            (seg_loss(tape, weak.p_l, &y, &w, None)?, zero, zero, None)
        }
        LossMode::WeakPseudo => {
            let p_wu = weak.p_u.expect("unlabeled stream present");
            let w_l = weights(tape, weak.p_l, frozen)?;
            let l_sup = seg_loss(tape, weak.p_l, &y, &w_l, None)?;
            let pseudo = frozen.tensor(|| Ok(pseudo_labels(tape.value(p_wu))))?;
            let w_u = weights(tape, p_wu, frozen)?;
            let l_unsup = seg_loss(tape, p_wu, &pseudo, &w_u, None)?;
            (l_sup, zero, l_unsup, Some(pseudo))
        }
        LossMode::Full => {
            let p_wu = weak.p_u.expect("unlabeled stream present");
            let pseudo = frozen.tensor(|| Ok(pseudo_labels(tape.value(p_wu))))?;
            let strong_bci = bci && cfg.bci.views == BciViews::All;
            let col_l: Vec<_> = batch.labeled.iter().map(|v| &v.col).collect();
            let col_u: Vec<_> = batch.unlabeled.iter().map(|v| &v.col).collect();
            let mix_l: Vec<_> = batch.labeled.iter().map(|v| &v.mix).collect();
            let mix_u: Vec<_> = batch.unlabeled.iter().map(|v| &v.mix).collect();
            let col = forward_kind(tape, &ctx, &view_data(&col_l)?, Some(&view_data(&col_u)?), strong_bci, frozen, rng)?;
            let mix = forward_kind(tape, &ctx, &view_data(&mix_l)?, Some(&view_data(&mix_u)?), strong_bci, frozen, rng)?;
            let (p_cu, p_mu) = (col.p_u.expect("unlabeled"), mix.p_u.expect("unlabeled"));

            let w_cl = weights(tape, col.p_l, frozen)?;
            let w_ml = weights(tape, mix.p_l, frozen)?;
            let w_wl = weights(tape, weak.p_l, frozen)?;
            let y_mix = view_labels(&mix_l)?;
            let l_sup = sup_loss_weighted(tape, [col.p_l, mix.p_l, weak.p_l], [&w_cl, &w_ml, &w_wl], &y, &y_mix)?;

            let region = restoration_regions(&mix_u)?;
            let w_cu = weights(tape, p_cu, frozen)?;
            let w_mu = weights(tape, p_mu, frozen)?;
            let l_unsup = unsup_loss_weighted(tape, (p_cu, &w_cu), (p_mu, &w_mu), &pseudo, &region)?;
            let l_cons = cons_loss(tape, p_cu, p_mu, &region)?;
            (l_sup, l_cons, l_unsup, Some(pseudo))
        }
    };

    let lambda = lambda_u(t, cfg.t_max);
    let total = combine(tape, l_sup, l_cons, l_unsup, lambda)?;
    let breakdown = total_loss(
        tape.value(l_sup).item()?,
        tape.value(l_cons).item()?,
        tape.value(l_unsup).item()?,
        t,
        cfg.t_max,
    );

    let memory = match (weak.subs, pseudo) {
        (Some((labeled_sub, unlabeled_sub)), Some(pseudo)) => {
            let f = cfg.network.reduction();
            Some(MemoryUpdate {
                labeled_sub,
                labeled_mask: downsample_mask(&y, f)?,
                unlabeled_sub,
                unlabeled_mask: downsample_mask(&pseudo, f)?,
            })
        }
        _ => None,
    };
    Ok(Forward { total, breakdown, memory })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_follow_toggles() {
        let t = |ssp, bci, cr| LossMode::from_toggles(Toggles { ssp, bci, cr });
        assert_eq!(t(true, true, true), LossMode::Full);
        assert_eq!(t(true, false, false), LossMode::Full);
        assert_eq!(t(false, true, true), LossMode::WeakPseudo);
        assert_eq!(t(false, false, true), LossMode::Supervised);
    }

    #[test]
    fn downsample_takes_strided_voxels() {
        let x = Tensor::new(vec![1, 1, 4, 4, 4], (0..64).map(f64::from).collect()).unwrap();
        let d = downsample_mask(&x, 2).unwrap();
        assert_eq!(d.shape(), [1, 8]);
        assert_eq!(d.data(), [0.0, 2.0, 8.0, 10.0, 32.0, 34.0, 40.0, 42.0]);
        assert!(downsample_mask(&x, 3).is_err());
    }

    #[test]
    fn replay_returns_recorded_values() {
        let mut f = Frozen::recording();
        let a = f.tensor(|| Ok(Tensor::scalar(1.0))).unwrap();
        let m = f.mask(|| Ok(ChannelMask::full(1, 2))).unwrap();
        let mut r = f.replay();
        assert!(r.tensor(|| panic!("not called")).unwrap().bitwise_eq(&a));
        assert_eq!(r.mask(|| panic!("not called")).unwrap().indices, m.indices);
        assert!(r.tensor(|| Ok(Tensor::scalar(0.0))).is_err());
    }
}
