//! Training objective.
//!
//! `total = sup + cons + λ_u(t)·unsup`, where every segmentation term is an
//! uncertainty-weighted BCE plus soft IoU. Predictions are `Var`s holding
//! probabilities; targets, weights and regions are plain data.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub const LAMBDA_BETA: f64 = 0.1;
pub const PROB_CLAMP: f64 = 1e-7;
pub const IOU_EPS: f64 = 1.0;
pub const PSEUDO_LABEL_THRESHOLD: f64 = 0.5;
pub const LOSS_CSV_HEADER: &str = "iter,l_sup,l_cons,l_unsup,lambda_u,total";

/// Gaussian ramp `β·exp(−5(1 − t/t_max)²)`; `t` is clamped to `t_max`.
pub fn lambda_u_with(t: f64, t_max: f64, beta: f64) -> f64 {
    let r = 1.0 - t.min(t_max) / t_max;
    beta * (-5.0 * r * r).exp()
}

pub fn lambda_u(t: usize, t_max: usize) -> f64 {
    lambda_u_with(t as f64, t_max as f64, LAMBDA_BETA)
}

/// `W = 1 + H_b(p)/ln 2` with `p` clamped away from 0 and 1.
pub fn uncertainty_weights(p: &Tensor) -> Tensor {
    p.map(|p| {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        1.0 + (-p * p.ln() - (1.0 - p) * (1.0 - p).ln()) / std::f64::consts::LN_2
    })
}

/// `1[p ≥ 0.5]`.
pub fn pseudo_labels(p: &Tensor) -> Tensor {
    p.map(|p| if p >= PSEUDO_LABEL_THRESHOLD { 1.0 } else { 0.0 })
}

/// Weighted BCE plus weighted soft IoU of `p` against binary `y`, restricted
/// to `region` when given. An empty region contributes zero.
pub fn seg_loss(tape: &mut Tape, p: Var, y: &Tensor, w: &Tensor, region: Option<&Tensor>) -> Result<Var> {
    let shape = tape.value(p).shape().to_vec();
    for (name, t) in [("target", Some(y)), ("weights", Some(w)), ("region", region)] {
        if let Some(t) = t {
            if t.shape() != shape.as_slice() {
                return Err(crate::Error::shape("seg_loss", format!("{name} {:?} vs prediction {shape:?}", t.shape())));
            }
        }
    }
    let wr = match region {
        Some(r) => w.zip_map(r, |w, r| w * r)?,
        None => w.clone(),
    };
    let wsum = wr.sum();
    if wsum <= 0.0 {
        log::warn!("segmentation loss over an empty region; contributing 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    // BCE: −log q with q = p for y = 1 and 1 − p for y = 0.
    let pc = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let sign = tape.constant(y.map(|y| 2.0 * y - 1.0));
    let offset = tape.constant(y.map(|y| 1.0 - y));
    let q = tape.mul(pc, sign)?;
    let q = tape.add(q, offset)?;
    let logq = tape.log(q)?;
    let weighted = tape.mask_mul(logq, wr.clone())?;
    let s = tape.sum_all(weighted)?;
    let bce = tape.scale(s, -1.0 / wsum)?;
    // Soft IoU with binary y: p + y − p·y = y + p·(1 − y).
    let wy = wr.zip_map(y, |w, y| w * y)?;
    let wny = wr.zip_map(y, |w, y| w * (1.0 - y))?;
    let inter = tape.mask_mul(p, wy.clone())?;
    let inter = tape.sum_all(inter)?;
    let union_p = tape.mask_mul(p, wny)?;
    let union_p = tape.sum_all(union_p)?;
    let union = tape.add_scalar(union_p, wy.sum() + IOU_EPS)?;
    let num = tape.add_scalar(inter, IOU_EPS)?;
    let ratio = tape.div(num, union)?;
    let iou = tape.scale(ratio, -1.0)?;
    let iou = tape.add_scalar(iou, 1.0)?;
    tape.add(bce, iou)
}

/// [`seg_loss`] with weights from the scored prediction itself.
pub fn self_weighted_seg_loss(tape: &mut Tape, p: Var, y: &Tensor, region: Option<&Tensor>) -> Result<Var> {
    let w = uncertainty_weights(tape.value(p));
    seg_loss(tape, p, y, &w, region)
}

/// Weak-to-strong loss on the unlabeled stream. `p_w` is detached data; the
/// mix term only covers `mix_region`, the voxels the mix view kept from its
/// own volume.
pub fn unsup_loss(tape: &mut Tape, p_col: Var, p_mix: Var, p_w: &Tensor, mix_region: &Tensor) -> Result<Var> {
    let y = pseudo_labels(p_w);
    let w_col = uncertainty_weights(tape.value(p_col));
    let w_mix = uncertainty_weights(tape.value(p_mix));
    unsup_loss_weighted(tape, (p_col, &w_col), (p_mix, &w_mix), &y, mix_region)
}

/// [`unsup_loss`] with explicit weights and pseudo-labels.
pub fn unsup_loss_weighted(
    tape: &mut Tape,
    (p_col, w_col): (Var, &Tensor),
    (p_mix, w_mix): (Var, &Tensor),
    pseudo: &Tensor,
    mix_region: &Tensor,
) -> Result<Var> {
    let col = seg_loss(tape, p_col, pseudo, w_col, None)?;
    let mix = seg_loss(tape, p_mix, pseudo, w_mix, Some(mix_region))?;
    tape.add(col, mix)
}

/// Mean squared difference of the two strong predictions over `region`.
pub fn cons_loss(tape: &mut Tape, p_col: Var, p_mix: Var, region: &Tensor) -> Result<Var> {
    let n = region.sum();
    if n <= 0.0 {
        log::warn!("consistency loss over an empty region; contributing 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let d = tape.sub(p_col, p_mix)?;
    let sq = tape.mul(d, d)?;
    let masked = tape.mask_mul(sq, region.clone())?;
    let s = tape.sum_all(masked)?;
    tape.scale(s, 1.0 / n)
}

/// Supervised loss over the three labeled views.
pub fn sup_loss(tape: &mut Tape, p_col: Var, p_mix: Var, p_w: Var, y: &Tensor, y_mix: &Tensor) -> Result<Var> {
    let w: Vec<Tensor> = [p_col, p_mix, p_w].iter().map(|&p| uncertainty_weights(tape.value(p))).collect();
    sup_loss_weighted(tape, [p_col, p_mix, p_w], [&w[0], &w[1], &w[2]], y, y_mix)
}

/// [`sup_loss`] with explicit weights, ordered `(col, mix, weak)`.
pub fn sup_loss_weighted(tape: &mut Tape, p: [Var; 3], w: [&Tensor; 3], y: &Tensor, y_mix: &Tensor) -> Result<Var> {
    let a = seg_loss(tape, p[0], y, w[0], None)?;
    let b = seg_loss(tape, p[1], y_mix, w[1], None)?;
    let c = seg_loss(tape, p[2], y, w[2], None)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_cons: f64,
    pub l_unsup: f64,
    pub lambda_u: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn csv_row(&self, iter: usize) -> String {
        format!(
            "{iter},{:e},{:e},{:e},{:e},{:e}",
            self.l_sup, self.l_cons, self.l_unsup, self.lambda_u, self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.l_sup, self.l_cons, self.l_unsup, self.lambda_u, self.total].iter().all(|x| x.is_finite())
    }
}

pub fn total_loss(l_sup: f64, l_cons: f64, l_unsup: f64, t: usize, t_max: usize) -> LossBreakdown {
    let lambda_u = lambda_u(t, t_max);
    LossBreakdown { l_sup, l_cons, l_unsup, lambda_u, total: l_sup + l_cons + lambda_u * l_unsup }
}

/// Tape form of [`total_loss`].
pub fn combine(tape: &mut Tape, l_sup: Var, l_cons: Var, l_unsup: Var, lambda_u: f64) -> Result<Var> {
    let s = tape.add(l_sup, l_cons)?;
    let u = tape.scale(l_unsup, lambda_u)?;
    tape.add(s, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, gradcheck::DEFAULT_STEP, SeededRng};

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item().unwrap()
    }

    #[test]
    fn warm_up_values() {
        assert_eq!(lambda_u(100, 100), 0.1);
        assert!((lambda_u(0, 100) - 6.737_947_00e-4).abs() < 1e-12);
        assert!((lambda_u(50, 100) - 2.865_047_97e-2).abs() < 1e-10);
        assert_eq!(lambda_u(150, 100), 0.1);
        let grid: Vec<f64> = (0..=1000).map(|t| lambda_u(t, 1000)).collect();
        assert!(grid.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn uncertainty_shape() {
        let w = uncertainty_weights(&Tensor::from_vec(vec![0.5, 0.0, 1.0, 0.2, 0.8]));
        assert!((w.data()[0] - 2.0).abs() < 1e-15);
        assert!(w.data()[1] < 1.0 + 1e-5 && w.data()[2] < 1.0 + 1e-5);
        assert_eq!(w.data()[3], w.data()[4]);
    }

    #[test]
    fn seg_loss_closed_forms() {
        let y = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = y.map(|y| if y == 1.0 { 1.0 - PROB_CLAMP } else { PROB_CLAMP });
        let w = Tensor::ones(vec![2, 2]);
        let perfect = eval(|t| {
            let v = t.constant(p.clone());
            seg_loss(t, v, &y, &w, None)
        });
        assert!(perfect < 1e-5, "{perfect}");

        let half = Tensor::full(vec![2, 2], 0.5);
        let bce_only = eval(|t| {
            let v = t.constant(half.clone());
            seg_loss(t, v, &y, &w, None)
        });
        // IoU term with p = 0.5: 1 − (1 + 1)/(2 + 1 + 1).
        let iou = 1.0 - (0.5 * 2.0 + 1.0) / (2.0 + 0.5 * 2.0 + 1.0);
        assert!((bce_only - iou - std::f64::consts::LN_2).abs() < 1e-12);

        let empty = eval(|t| {
            let v = t.constant(half.clone());
            seg_loss(t, v, &y, &w, Some(&Tensor::zeros(vec![2, 2])))
        });
        assert_eq!(empty, 0.0);
    }

    #[test]
    fn region_restriction_is_exact() {
        let mut rng = SeededRng::new(1);
        let p = rng.uniform(0.05, 0.95, &[1, 1, 4, 4, 4]).unwrap();
        let y = pseudo_labels(&rng.uniform(0.0, 1.0, &[1, 1, 4, 4, 4]).unwrap());
        let region = pseudo_labels(&rng.uniform(0.0, 1.0, &[1, 1, 4, 4, 4]).unwrap());
        let mut q = p.clone();
        for (v, &r) in q.data_mut().iter_mut().zip(region.data()) {
            if r == 0.0 {
                *v = 1.0 - *v;
            }
        }
        let loss = |p: &Tensor| {
            eval(|t| {
                let v = t.constant(p.clone());
                self_weighted_seg_loss(t, v, &y, Some(&region))
            })
        };
        assert_eq!(loss(&p).to_bits(), loss(&q).to_bits());
    }

    #[test]
    fn consistency_values() {
        let r = Tensor::ones(vec![8]);
        let c = |a: f64, b: f64| {
            eval(|t| {
                let x = t.constant(Tensor::full(vec![8], a));
                let y = t.constant(Tensor::full(vec![8], b));
                cons_loss(t, x, y, &r)
            })
        };
        assert!((c(0.2, 0.6) - 0.16).abs() < 1e-15);
        assert_eq!(c(0.3, 0.3), 0.0);
        assert_eq!(c(0.2, 0.7), c(0.7, 0.2));
    }

    #[test]
    fn saturated_unsup_and_sup() {
        let y = pseudo_labels(&SeededRng::new(2).uniform(0.0, 1.0, &[1, 1, 4, 4, 4]).unwrap());
        let p = y.map(|y| if y == 1.0 { 1.0 - PROB_CLAMP } else { PROB_CLAMP });
        let region = Tensor::ones(y.shape().to_vec());
        let u = eval(|t| {
            let a = t.constant(p.clone());
            let b = t.constant(p.clone());
            unsup_loss(t, a, b, &p, &region)
        });
        assert!(u < 1e-5);
        let s = eval(|t| {
            let a = t.constant(p.clone());
            sup_loss(t, a, a, a, &y, &y)
        });
        assert!(s < 1e-5);
    }

    #[test]
    fn sup_loss_batch_order_and_gradient() {
        let mut rng = SeededRng::new(3);
        let shape = [2, 1, 6, 6, 6];
        let logits: Vec<Tensor> = (0..3).map(|_| rng.gaussian(0.0, 1.0, &shape).unwrap()).collect();
        let y = pseudo_labels(&rng.uniform(0.0, 1.0, &shape).unwrap());
        let ym = pseudo_labels(&rng.uniform(0.0, 1.0, &shape).unwrap());
        let swap = |t: &Tensor| {
            let n = t.numel() / 2;
            Tensor::new(t.shape().to_vec(), [&t.data()[n..], &t.data()[..n]].concat()).unwrap()
        };
        let value = |ls: &[Tensor], y: &Tensor, ym: &Tensor| {
            eval(|t| {
                let ps: Vec<Var> = ls
                    .iter()
                    .map(|l| {
                        let v = t.constant(l.clone());
                        t.sigmoid(v).unwrap()
                    })
                    .collect();
                sup_loss(t, ps[0], ps[1], ps[2], y, ym)
            })
        };
        let a = value(&logits, &y, &ym);
        let swapped: Vec<Tensor> = logits.iter().map(swap).collect();
        let b = value(&swapped, &swap(&y), &swap(&ym));
        assert!((a - b).abs() < 1e-12);

        // W is data computed from the prediction, so the objective seen by
        // finite differences must hold it fixed too.
        let ps: Vec<Tensor> = logits.iter().map(|l| l.map(|x| 1.0 / (1.0 + (-x).exp()))).collect();
        let ws: Vec<Tensor> = ps.iter().map(uncertainty_weights).collect();
        let err = grad_check(
            |t, v| {
                let p: Vec<Var> = v.iter().map(|&l| t.sigmoid(l).unwrap()).collect();
                let a = seg_loss(t, p[0], &y, &ws[0], None)?;
                let b = seg_loss(t, p[1], &ym, &ws[1], None)?;
                let c = seg_loss(t, p[2], &y, &ws[2], None)?;
                let ab = t.add(a, b)?;
                t.add(ab, c)
            },
            &logits,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn breakdown_invariant() {
        let b = total_loss(0.5, 0.25, 2.0, 0, 10);
        assert!((b.total - (0.75 + 2.0 * 6.737_947e-4)).abs() < 1e-9);
        assert!((b.total - (b.l_sup + b.l_cons + b.lambda_u * b.l_unsup)).abs() <= 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 3, 10).total, 0.0);
        assert_eq!(b.csv_row(1).split(',').count(), LOSS_CSV_HEADER.split(',').count());
    }
}
