//! Channel-selective routing at the bottleneck.
//!
//! A squeeze-style gate scores every channel, the top `K` scores form a hard
//! binary mask, and the selected channels are gathered for interaction. The
//! hard threshold has no derivative, so the gather passes a straight-through
//! gradient into the scores (see [`select`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::tensor::{Op, SeededRng, Tape, Tensor, Var};

pub const FC1_WEIGHT: &str = "router.fc1.weight";
pub const FC1_BIAS: &str = "router.fc1.bias";
pub const FC2_WEIGHT: &str = "router.fc2.weight";
pub const FC2_BIAS: &str = "router.fc2.bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterMode {
    Learned,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub k: usize,
    pub mode: RouterMode,
    pub hidden_ratio: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig { k: 16, mode: RouterMode::Learned, hidden_ratio: 0.25 }
    }
}

impl RouterConfig {
    pub fn hidden(&self, c: usize) -> usize {
        ((c as f64 * self.hidden_ratio).round() as usize).max(1)
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        if self.k == 0 || self.k > c {
            return Err(Error::Config(format!("router.k = {} must lie in 1..={c}", self.k)));
        }
        if !(self.hidden_ratio > 0.0 && self.hidden_ratio.is_finite()) {
            return Err(Error::Config(format!("router.hidden_ratio {} must be > 0", self.hidden_ratio)));
        }
        Ok(())
    }
}

/// Adds the gate perceptron `C → hidden → C` to `params`. Weights are stored
/// input-major (`[in, out]`) so the forward pass is a plain row-vector product.
pub fn init_router(params: &mut ParamSet, c: usize, hidden: usize, rng: &mut SeededRng) {
    params.insert(FC1_WEIGHT, fan_in_uniform(&[c, hidden], c, rng));
    params.insert(FC1_BIAS, Tensor::zeros(vec![hidden]));
    params.insert(FC2_WEIGHT, fan_in_uniform(&[hidden, c], hidden, rng));
    params.insert(FC2_BIAS, Tensor::zeros(vec![c]));
}

/// Channel scores `s ∈ (0, 1)^{B×C}` from globally pooled features.
pub fn score_channels(tape: &mut Tape, f: Var, p: &Bound) -> Result<Var> {
    let shape = tape.value(f).shape().to_vec();
    if shape.len() != 5 {
        return Err(Error::shape("score_channels", format!("expected [B, C, d, h, w], got {shape:?}")));
    }
    let w1 = p.get(FC1_WEIGHT)?;
    if tape.value(w1).shape()[0] != shape[1] {
        return Err(Error::shape(
            "score_channels",
            format!("router expects C = {}, features have {}", tape.value(w1).shape()[0], shape[1]),
        ));
    }
    let pooled = tape.mean(f, &[2, 3, 4], false)?;
    let h = tape.matmul(pooled, w1)?;
    let h = tape.add(h, p.get(FC1_BIAS)?)?;
    let h = tape.relu(h)?;
    let z = tape.matmul(h, p.get(FC2_WEIGHT)?)?;
    let z = tape.add(z, p.get(FC2_BIAS)?)?;
    tape.sigmoid(z)
}

/// Hard selection of `K` channels per batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMask {
    /// Selected channels per batch item, ascending.
    pub indices: Vec<Vec<usize>>,
    pub channels: usize,
    pub k: usize,
    /// `K`-th largest score per item (`NaN` for random or full masks).
    pub thresholds: Vec<f64>,
}

impl ChannelMask {
    /// Every channel selected.
    pub fn full(batch: usize, channels: usize) -> Self {
        ChannelMask {
            indices: vec![(0..channels).collect(); batch],
            channels,
            k: channels,
            thresholds: vec![f64::NAN; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.indices.len()
    }

    /// Binary `[B, C]` tensor `R`.
    pub fn to_tensor(&self) -> Tensor {
        let mut r = Tensor::zeros(vec![self.batch(), self.channels]);
        let c = self.channels;
        for (b, row) in self.indices.iter().enumerate() {
            for &ch in row {
                r.data_mut()[b * c + ch] = 1.0;
            }
        }
        r
    }
}

fn check_k(k: usize, c: usize) -> Result<()> {
    if k == 0 || k > c {
        return Err(Error::InvalidArgument(format!("K = {k} out of range 1..={c}")));
    }
    Ok(())
}

/// The `K` largest scores of each row; ties go to the lowest channel index.
pub fn topk_mask(s: &Tensor, k: usize) -> Result<ChannelMask> {
    if s.rank() != 2 {
        return Err(Error::shape("topk_mask", format!("scores must be [B, C], got {:?}", s.shape())));
    }
    let (b, c) = (s.shape()[0], s.shape()[1]);
    check_k(k, c)?;
    let mut indices = Vec::with_capacity(b);
    let mut thresholds = Vec::with_capacity(b);
    for row in s.data().chunks(c) {
        if row.iter().any(|x| x.is_nan()) {
            return Err(Error::Numerical("NaN channel score".into()));
        }
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
        thresholds.push(row[order[k - 1]]);
        let mut sel = order[..k].to_vec();
        sel.sort_unstable();
        indices.push(sel);
    }
    Ok(ChannelMask { indices, channels: c, k, thresholds })
}

/// Uniformly random `K`-subset per batch item.
pub fn random_mask(batch: usize, c: usize, k: usize, rng: &mut SeededRng) -> Result<ChannelMask> {
    check_k(k, c)?;
    let mut indices = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut pool: Vec<usize> = (0..c).collect();
        for i in 0..k {
            let j = i + rng.below(c - i);
            pool.swap(i, j);
        }
        let mut sel = pool[..k].to_vec();
        sel.sort_unstable();
        indices.push(sel);
    }
    Ok(ChannelMask { indices, channels: c, k, thresholds: vec![f64::NAN; batch] })
}

/// Gathers the selected channels, `[B, C, ..] → [B, K, ..]`.
///
/// Forward is an exact copy. When `scores` is given, backward also sends
/// `⟨∂L/∂F_sub[b, j], F[b, c_j]⟩` to `scores[b, c_j]`, as if each selected
/// channel had been multiplied by its score with unit pass-through.
pub fn select(tape: &mut Tape, f: Var, mask: &ChannelMask, scores: Option<Var>) -> Result<Var> {
    let shape = tape.value(f).shape();
    if shape.len() < 2 || shape[0] != mask.batch() || shape[1] != mask.channels {
        return Err(Error::shape(
            "select",
            format!("features {:?} vs mask of {} × {}", shape, mask.batch(), mask.channels),
        ));
    }
    let op = Op::GatherChannels { indices: mask.indices.clone() };
    match scores {
        Some(s) => tape.apply(op, &[f, s]),
        None => tape.apply(op, &[f]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, gradcheck::DEFAULT_STEP};

    fn router_params(c: usize, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        init_router(&mut p, c, c / 4, &mut SeededRng::new(seed));
        p
    }

    #[test]
    fn spec_topk_examples() {
        let s = Tensor::new(vec![1, 4], vec![0.1, 0.9, 0.5, 0.3]).unwrap();
        assert_eq!(topk_mask(&s, 2).unwrap().to_tensor().data(), &[0.0, 1.0, 1.0, 0.0]);
        let eq = Tensor::full(vec![1, 4], 0.5);
        assert_eq!(topk_mask(&eq, 2).unwrap().indices, vec![vec![0, 1]]);
        assert_eq!(topk_mask(&s, 4).unwrap().to_tensor().data(), &[1.0; 4]);
        assert!(topk_mask(&s, 0).is_err());
        assert!(topk_mask(&s, 5).is_err());
        assert_eq!(topk_mask(&s, 2).unwrap().thresholds, vec![0.5]);
    }

    #[test]
    fn zero_features_score_one_half() {
        let mut p = router_params(8, 0);
        for name in [FC1_WEIGHT, FC2_WEIGHT] {
            let w = p.get_mut(name).unwrap();
            *w = w.map(|x| x * 3.0);
        }
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let f = tape.constant(Tensor::zeros(vec![2, 8, 2, 2, 2]));
        let s = score_channels(&mut tape, f, &b).unwrap();
        assert!(tape.value(s).data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn scores_ignore_spatial_permutation() {
        let p = router_params(8, 1);
        let f = SeededRng::new(2).gaussian(0.0, 1.0, &[1, 8, 2, 2, 2]).unwrap();
        // Reverse each channel's spatial block.
        let mut g = f.clone();
        for c in 0..8 {
            let blk: Vec<f64> = f.data()[c * 8..c * 8 + 8].iter().rev().copied().collect();
            g.data_mut()[c * 8..c * 8 + 8].copy_from_slice(&blk);
        }
        let score = |x: &Tensor| {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, false);
            let v = tape.constant(x.clone());
            let s = score_channels(&mut tape, v, &b).unwrap();
            tape.value(s).clone()
        };
        assert!(score(&f).max_abs_diff(&score(&g)) < 1e-15);
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let p = router_params(8, 3);
        let f = SeededRng::new(4).gaussian(0.0, 1.0, &[2, 8, 2, 2, 2]).unwrap();
        let names = [FC1_WEIGHT, FC1_BIAS, FC2_WEIGHT, FC2_BIAS];
        // Shift the hidden biases away from the ReLU kink.
        let inputs: Vec<Tensor> = names
            .iter()
            .map(|n| if *n == FC1_BIAS { Tensor::full(vec![2], 0.3) } else { p.get(n).unwrap().clone() })
            .collect();
        let err = grad_check(
            |tape, v| {
                let fv = tape.constant(f.clone());
                let pooled = tape.mean(fv, &[2, 3, 4], false)?;
                let h = tape.matmul(pooled, v[0])?;
                let h = tape.add(h, v[1])?;
                let h = tape.relu(h)?;
                let z = tape.matmul(h, v[2])?;
                let z = tape.add(z, v[3])?;
                let s = tape.sigmoid(z)?;
                tape.sum_all(s)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn select_gathers_and_routes_gradient_to_router() {
        let p = router_params(8, 5);
        let f = SeededRng::new(6).gaussian(0.0, 1.0, &[1, 8, 2, 2, 2]).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true);
        let fv = tape.constant(f.clone());
        let s = score_channels(&mut tape, fv, &b).unwrap();
        let mask = topk_mask(tape.value(s), 3).unwrap();
        let sub = select(&mut tape, fv, &mask, Some(s)).unwrap();
        for (j, &c) in mask.indices[0].iter().enumerate() {
            let got = &tape.value(sub).data()[j * 8..j * 8 + 8];
            assert!(got.iter().zip(&f.data()[c * 8..c * 8 + 8]).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let sq = tape.mul(sub, sub).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(b.get(FC2_BIAS).unwrap());
        assert!(g.data().iter().any(|&x| x != 0.0));
        // Unselected channels receive no score gradient.
        let sel = &mask.indices[0];
        for c in 0..8 {
            assert_eq!(g.data()[c] != 0.0, sel.contains(&c), "channel {c}");
        }

        let full = ChannelMask::full(1, 8);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let all = select(&mut tape, fv, &full, None).unwrap();
        assert!(tape.value(all).bitwise_eq(&f));
    }

    #[test]
    fn random_mask_frequencies() {
        let mut rng = SeededRng::new(7);
        let mut counts = [0usize; 8];
        let n = 10_000;
        for _ in 0..n {
            let m = random_mask(1, 8, 2, &mut rng).unwrap();
            assert_eq!(m.indices[0].len(), 2);
            for &c in &m.indices[0] {
                counts[c] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.02, "frequency {f}");
        }
        assert_eq!(random_mask(2, 4, 4, &mut rng).unwrap().to_tensor().sum(), 8.0);
        assert!(random_mask(1, 4, 5, &mut rng).is_err());
    }
}
