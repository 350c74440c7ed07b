//! Label smoothing, the two-branch classification loss, hash regression
//! against solver codes and the balanced total loss with learnable `alpha`,
//! `beta`.

use crate::error::{Error, Result};
use crate::ndtensor::{softplus, Tape, Tensor, Var};

pub const DEFAULT_SMOOTHING: f64 = 0.1;
/// Lower bound on `alpha` and `beta`.
pub const WEIGHT_FLOOR: f64 = 1e-3;

/// Rows `y(1 - lambda) + lambda / l` for class ids.
pub fn smooth_labels(labels: &[usize], num_classes: usize, lambda: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::Config(format!("smoothing {lambda} outside [0, 1)")));
    }
    if labels.is_empty() || num_classes == 0 {
        return Err(Error::Validation(
            "smoothing needs labels and classes".into(),
        ));
    }
    let off = lambda / num_classes as f64;
    let on = 1.0 - lambda + off;
    let mut data = vec![off; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Validation(format!(
                "label {y} at row {i} outside 0..{num_classes}"
            )));
        }
        data[i * num_classes + y] = on;
    }
    Tensor::new(vec![labels.len(), num_classes], data)
}

/// [`smooth_labels`] on explicit one-hot rows `[N, l]`.
pub fn smooth_one_hot(y: &Tensor, lambda: f64) -> Result<Tensor> {
    let s = y.shape();
    if s.len() != 2 {
        return Err(Error::dim("smooth_one_hot", &[0, 0], s));
    }
    let labels = y
        .data()
        .chunks_exact(s[1])
        .enumerate()
        .map(|(r, row)| {
            let ones: Vec<usize> = (0..row.len()).filter(|&k| row[k] == 1.0).collect();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones.len() == 1 && zeros == row.len() - 1 {
                Ok(ones[0])
            } else {
                Err(Error::Validation(format!(
                    "row {r} is not one-hot: {row:?}"
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    smooth_labels(&labels, s[1], lambda)
}

/// Which classification branches contribute to `L_CLS`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossMask {
    pub cls_org: bool,
    pub cls_aug: bool,
}

impl LossMask {
    pub const FULL: LossMask = LossMask {
        cls_org: true,
        cls_aug: true,
    };
    pub const HASH_ONLY: LossMask = LossMask {
        cls_org: false,
        cls_aug: false,
    };

    pub fn any_cls(self) -> bool {
        self.cls_org || self.cls_aug
    }

    pub fn name(self) -> &'static str {
        match (self.cls_org, self.cls_aug) {
            (true, true) => "full",
            (true, false) => "org",
            (false, true) => "aug",
            (false, false) => "hash-only",
        }
    }
}

/// Per-branch cross-entropies and the mean of the enabled ones.
#[derive(Clone, Copy, Debug)]
pub struct ClsLosses {
    pub org: Option<Var>,
    pub aug: Option<Var>,
    pub cls: Option<Var>,
}

/// `L_CLS = (L_cls_org + L_cls_aug) / 2`, restricted to unmasked branches.
pub fn classification_loss(
    tape: &mut Tape,
    logits_org: Var,
    logits_aug: Option<Var>,
    targets: &Tensor,
    mask: LossMask,
) -> Result<ClsLosses> {
    let org = if mask.cls_org {
        Some(tape.softmax_cross_entropy(logits_org, targets)?)
    } else {
        None
    };
    let aug = match (mask.cls_aug, logits_aug) {
        (true, Some(z)) => Some(tape.softmax_cross_entropy(z, targets)?),
        (true, None) => {
            return Err(Error::Usage(
                "augmented-branch loss enabled without zoomed logits".into(),
            ))
        }
        (false, _) => None,
    };
    let cls = match (org, aug) {
        (Some(a), Some(b)) => {
            let s = tape.add(a, b)?;
            Some(tape.scale(s, 0.5))
        }
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    };
    Ok(ClsLosses { org, aug, cls })
}

/// `sum_i ||c_i - h_i||^2 / N` against frozen targets `[N, k]`.
pub fn hash_regression_loss(tape: &mut Tape, h: Var, targets: &Tensor) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 2 || targets.shape() != s.as_slice() {
        return Err(Error::dim("hash_regression_loss", &s, targets.shape()));
    }
    let c = tape.constant(targets.clone());
    let diff = tape.sub(h, c)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / s[0] as f64))
}

/// Unconstrained scalars behind `alpha = softplus(raw_a) + floor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub raw_a: f64,
    pub raw_b: f64,
}

/// Inverse of the softplus reparameterisation.
pub fn raw_for(weight: f64) -> f64 {
    let s = weight - WEIGHT_FLOOR;
    assert!(s > 0.0, "weight must exceed the floor");
    s + (-(-s).exp()).ln_1p()
}

impl Default for LossWeights {
    /// `alpha = beta = 1`.
    fn default() -> Self {
        LossWeights {
            raw_a: raw_for(1.0),
            raw_b: raw_for(1.0),
        }
    }
}

impl LossWeights {
    /// Weights at the stationary point of the balanced objective for the
    /// given loss values; `beta` stays 1 without a classification term.
    pub fn balanced_for(l_hash: f64, l_cls: Option<f64>) -> Result<Self> {
        let start = |l: f64| -> Result<f64> { Ok(stationary_alpha(l)?.max(2.0 * WEIGHT_FLOOR)) };
        Ok(LossWeights {
            raw_a: raw_for(start(l_hash)?),
            raw_b: raw_for(match l_cls {
                Some(l) => start(l)?,
                None => 1.0,
            }),
        })
    }

    pub fn alpha(&self) -> f64 {
        softplus(self.raw_a) + WEIGHT_FLOOR
    }

    pub fn beta(&self) -> f64 {
        softplus(self.raw_b) + WEIGHT_FLOOR
    }

    /// Raw scalars as shape-`[1]` leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (Var, Var) {
        (
            tape.leaf(Tensor::scalar(self.raw_a), trainable),
            tape.leaf(Tensor::scalar(self.raw_b), trainable),
        )
    }
}

/// `softplus(raw) + floor` on the tape.
pub fn positive_weight(tape: &mut Tape, raw: Var) -> Var {
    let sp = tape.softplus(raw);
    tape.add_scalar(sp, WEIGHT_FLOOR)
}

/// `loss / w^2 + ln(w + 1)`.
fn weighted_term(tape: &mut Tape, loss: Var, w: Var) -> Result<Var> {
    let inv_sq = tape.powf(w, -2.0);
    let scaled = tape.mul(loss, inv_sq)?;
    let shifted = tape.add_scalar(w, 1.0);
    let reg = tape.ln(shifted);
    tape.add(scaled, reg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Balance {
    /// Learnable `alpha`, `beta` with log regularisers.
    Learned,
    /// `L_HASH + L_CLS`.
    Fixed,
}

/// `L_HASH / alpha^2 + L_CLS / beta^2 + ln(alpha + 1) + ln(beta + 1)`.
///
/// With no classification term the `beta` half is dropped.
pub fn total_balanced_loss(
    tape: &mut Tape,
    l_hash: Var,
    l_cls: Option<Var>,
    raw: (Var, Var),
    balance: Balance,
) -> Result<Var> {
    match balance {
        Balance::Fixed => match l_cls {
            Some(c) => tape.add(l_hash, c),
            None => Ok(l_hash),
        },
        Balance::Learned => {
            let alpha = positive_weight(tape, raw.0);
            let hash = weighted_term(tape, l_hash, alpha)?;
            match l_cls {
                Some(c) => {
                    let beta = positive_weight(tape, raw.1);
                    let cls = weighted_term(tape, c, beta)?;
                    tape.add(hash, cls)
                }
                None => Ok(hash),
            }
        }
    }
}

/// Scalar snapshot of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls_org: f64,
    pub cls_aug: f64,
    pub cls: f64,
    pub hash: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    /// Recomputes `total` from the components.
    pub fn reconstruct(&self, balance: Balance, has_cls: bool) -> f64 {
        match balance {
            Balance::Fixed => self.hash + if has_cls { self.cls } else { 0.0 },
            Balance::Learned => {
                let mut t = self.hash / (self.alpha * self.alpha) + (self.alpha + 1.0).ln();
                if has_cls {
                    t += self.cls / (self.beta * self.beta) + (self.beta + 1.0).ln();
                }
                t
            }
        }
    }
}

/// Positive root of `alpha^3 = 2 L (alpha + 1)` by bisection.
pub fn stationary_alpha(l: f64) -> Result<f64> {
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::Config(format!(
            "stationary_alpha needs L > 0, got {l}"
        )));
    }
    let f = |a: f64| a * a * a - 2.0 * l * (a + 1.0);
    let (mut lo, mut hi) = (0.0, 1.0);
    while f(hi) <= 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Gradient descent on `raw_a` alone with `L_HASH` fixed; returns the final `alpha`.
pub fn descend_alpha(l_hash: f64, raw_a: f64, lr: f64, steps: usize) -> Result<f64> {
    let mut raw = raw_a;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let r = tape.param(Tensor::scalar(raw));
        let lh = tape.constant(Tensor::scalar(l_hash));
        let dummy = tape.constant(Tensor::scalar(0.0));
        let total = total_balanced_loss(&mut tape, lh, None, (r, dummy), Balance::Learned)?;
        tape.backward(total)?;
        raw -= lr * tape.grad(r).map_or(0.0, |g| g[0]);
    }
    Ok(softplus(raw) + WEIGHT_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::gradcheck;
    use proptest::prelude::*;

    #[test]
    fn smoothing_examples() {
        let t = smooth_labels(&[0], 4, 0.1).unwrap();
        let want = [0.925, 0.025, 0.025, 0.025];
        assert!(t
            .data()
            .iter()
            .zip(want)
            .all(|(a, b)| (a - b).abs() < 1e-15));
        let one_hot = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(smooth_one_hot(&one_hot, 0.0).unwrap(), one_hot);
        let t = smooth_labels(&[1], 2, 0.5).unwrap();
        assert_eq!(t.data(), &[0.25, 0.75]);
    }

    #[test]
    fn smoothing_rejects_bad_rows() {
        let bad = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.0]).unwrap();
        assert!(matches!(
            smooth_one_hot(&bad, 0.1),
            Err(Error::Validation(_))
        ));
        assert!(smooth_labels(&[3], 3, 0.1).is_err());
        assert!(smooth_labels(&[0], 3, 1.0).is_err());
    }

    fn logits(n: usize, l: usize, seed: u64) -> Tensor {
        Tensor::from_fn(&[n, l], |i| {
            ((i as u64 * 2654435761 + seed) % 1000) as f64 / 250.0 - 2.0
        })
    }

    #[test]
    fn identical_branches_give_equal_losses() {
        let mut tape = Tape::new();
        let z = logits(3, 5, 1);
        let a = tape.constant(z.clone());
        let b = tape.constant(z);
        let t = smooth_labels(&[0, 4, 2], 5, DEFAULT_SMOOTHING).unwrap();
        let c = classification_loss(&mut tape, a, Some(b), &t, LossMask::FULL).unwrap();
        let (o, g, m) = (c.org.unwrap(), c.aug.unwrap(), c.cls.unwrap());
        assert_eq!(tape.value(o).item(), tape.value(g).item());
        assert!((tape.value(m).item() - tape.value(o).item()).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_log_l() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 4]));
        let b = tape.constant(Tensor::zeros(&[2, 4]));
        let t = smooth_labels(&[1, 3], 4, 0.0).unwrap();
        let c = classification_loss(&mut tape, a, Some(b), &t, LossMask::FULL).unwrap();
        assert!((tape.value(c.cls.unwrap()).item() - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn masks_select_branches() {
        let mut tape = Tape::new();
        let a = tape.constant(logits(2, 3, 2));
        let b = tape.constant(logits(2, 3, 9));
        let t = smooth_labels(&[0, 2], 3, DEFAULT_SMOOTHING).unwrap();
        let only_org = LossMask {
            cls_org: true,
            cls_aug: false,
        };
        let c = classification_loss(&mut tape, a, Some(b), &t, only_org).unwrap();
        assert!(c.aug.is_none());
        assert_eq!(c.cls, c.org);
        let none = classification_loss(&mut tape, a, None, &t, LossMask::HASH_ONLY).unwrap();
        assert!(none.cls.is_none());
        assert!(classification_loss(&mut tape, a, None, &t, LossMask::FULL).is_err());
    }

    #[test]
    fn classification_gradcheck() {
        let t = smooth_labels(&[1, 0, 3], 4, DEFAULT_SMOOTHING).unwrap();
        let r = gradcheck::check(
            "classification",
            &[("org", logits(3, 4, 5)), ("aug", logits(3, 4, 77))],
            gradcheck::DEFAULT_STEP,
            |tape, v| {
                let c = classification_loss(tape, v[0], Some(v[1]), &t, LossMask::FULL)?;
                Ok(c.cls.unwrap())
            },
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn hash_loss_examples() {
        let mut tape = Tape::new();
        let c = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let h = tape.param(c.clone());
        let l = hash_regression_loss(&mut tape, h, &c).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let h = tape.param(Tensor::zeros(&[1, 2]));
        let l = hash_regression_loss(&mut tape, h, &c).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        assert!(hash_regression_loss(&mut tape, h, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn hash_loss_gradient_closed_form() {
        let h0 = logits(4, 6, 3);
        let c = Tensor::from_fn(&[4, 6], |i| if i % 3 == 0 { 1.0 } else { -1.0 });
        let mut tape = Tape::new();
        let h = tape.param(h0.clone());
        let l = hash_regression_loss(&mut tape, h, &c).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(h).unwrap();
        for i in 0..24 {
            let want = 2.0 * (h0.data()[i] - c.data()[i]) / 4.0;
            assert!((g[i] - want).abs() < 1e-12);
        }
    }

    fn total_value(lh: f64, lc: f64, w: LossWeights, balance: Balance) -> f64 {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::scalar(lh));
        let c = tape.constant(Tensor::scalar(lc));
        let raw = w.bind(&mut tape, true);
        let t = total_balanced_loss(&mut tape, h, Some(c), raw, balance).unwrap();
        tape.value(t).item()
    }

    #[test]
    fn balanced_loss_examples() {
        let w = LossWeights::default();
        assert!((w.alpha() - 1.0).abs() < 1e-14 && (w.beta() - 1.0).abs() < 1e-14);
        let v = total_value(1.0, 1.0, w, Balance::Learned);
        assert!((v - (2.0 + 2.0 * 2f64.ln())).abs() < 1e-12, "{v}");
        assert!((v - 3.386294).abs() < 1e-6);
        assert_eq!(total_value(0.7, 1.3, w, Balance::Fixed), 0.7 + 1.3);
    }

    #[test]
    fn alpha_derivative_matches_closed_form_and_fd() {
        let lh = 0.8;
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::scalar(lh));
        let a = tape.param(Tensor::scalar(1.3));
        let hash = weighted_term(&mut tape, h, a).unwrap();
        tape.backward(hash).unwrap();
        let got = tape.grad(a).unwrap()[0];
        let closed = -2.0 * lh / 1.3f64.powi(3) + 1.0 / 2.3;
        let f = |x: f64| lh / (x * x) + (x + 1.0).ln();
        let fd = (f(1.3 + 1e-5) - f(1.3 - 1e-5)) / 2e-5;
        assert!((got - closed).abs() / closed.abs() < 1e-12);
        assert!((got - fd).abs() / fd.abs() < 1e-6);
    }

    #[test]
    fn balanced_loss_gradcheck_all_inputs() {
        let r = gradcheck::check(
            "total",
            &[
                ("l_hash", Tensor::scalar(0.9)),
                ("l_cls", Tensor::scalar(2.1)),
                ("raw_a", Tensor::scalar(0.3)),
                ("raw_b", Tensor::scalar(-0.4)),
            ],
            gradcheck::DEFAULT_STEP,
            |tape, v| total_balanced_loss(tape, v[0], Some(v[1]), (v[2], v[3]), Balance::Learned),
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn breakdown_reconstructs() {
        let w = LossWeights {
            raw_a: 0.2,
            raw_b: -1.0,
        };
        let b = LossBreakdown {
            cls_org: 1.0,
            cls_aug: 2.0,
            cls: 1.5,
            hash: 3.0,
            total: total_value(3.0, 1.5, w, Balance::Learned),
            alpha: w.alpha(),
            beta: w.beta(),
        };
        assert!((b.reconstruct(Balance::Learned, true) - b.total).abs() < 1e-12);
    }

    #[test]
    fn stationary_alpha_root() {
        let a = stationary_alpha(1.0).unwrap();
        assert!((a * a * a - 2.0 * a - 2.0).abs() < 1e-12);
        assert!((a - 1.7693).abs() < 1e-4);
        let mut prev = 0.0;
        for l in [1e-6, 1e-4, 1e-2, 0.1, 1.0, 10.0] {
            let a = stationary_alpha(l).unwrap();
            assert!(a > prev);
            prev = a;
        }
        assert!(stationary_alpha(1e-9).unwrap() < 1e-2);
        assert!(stationary_alpha(0.0).is_err());
    }

    #[test]
    fn descent_reaches_stationary_alpha() {
        let a = descend_alpha(1.0, LossWeights::default().raw_a, 0.1, 3000).unwrap();
        assert!((a - stationary_alpha(1.0).unwrap()).abs() < 1e-3, "{a}");
    }

    #[test]
    fn larger_hash_loss_means_smaller_weight() {
        let ls: Vec<f64> = (1..=20).map(|i| i as f64 * 0.25).collect();
        let w: Vec<f64> = ls
            .iter()
            .map(|&l| stationary_alpha(l).unwrap().powi(-2))
            .collect();
        assert!(w.windows(2).all(|p| p[1] < p[0]));
    }

    proptest! {
        #[test]
        fn weights_stay_above_floor(raw in -1e6f64..1e6) {
            let w = LossWeights { raw_a: raw, raw_b: -raw };
            prop_assert!(w.alpha() >= WEIGHT_FLOOR && w.beta() >= WEIGHT_FLOOR);
            prop_assert!(w.alpha().is_finite() && w.beta().is_finite());
        }

        #[test]
        fn smoothed_rows_sum_to_one(labels in proptest::collection::vec(0usize..7, 1..20), lambda in 0.0f64..0.99) {
            let t = smooth_labels(&labels, 7, lambda).unwrap();
            for (row, &y) in t.data().chunks_exact(7).zip(&labels) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert_eq!(row[y], 1.0 - lambda + lambda / 7.0);
            }
        }

        #[test]
        fn raw_for_inverts(w in 0.01f64..50.0) {
            let lw = LossWeights { raw_a: raw_for(w), raw_b: 0.0 };
            prop_assert!((lw.alpha() - w).abs() < 1e-9 * w.max(1.0));
        }
    }
}
