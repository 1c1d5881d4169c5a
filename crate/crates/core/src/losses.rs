//! Loss catalog with values and logit-gradients.
//!
//! All gradients are with respect to the logits `z`, where `p̂ = softmax(z)`.
//! Logarithms clamp their argument at [`LOG_FLOOR`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::TransitionMatrix;
use crate::numerics::Matrix;

pub const LOG_FLOOR: f64 = 1e-12;
/// Largest condition number accepted when inverting a transition matrix.
pub const MAX_CONDITION: f64 = 1e8;
pub const DEFAULT_IMAE_TAU: f64 = 8.0;

fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Per-label loss used inside backward correction and Pumpout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    Ce,
    Mae,
}

fn default_tau() -> f64 {
    DEFAULT_IMAE_TAU
}

fn default_base() -> BaseLoss {
    BaseLoss::Ce
}

/// Loss selection. Transition matrices may be left out in configs and supplied
/// later (see [`LossSpec::with_transition`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    #[default]
    Ce,
    Mae,
    Imae {
        #[serde(default = "default_tau")]
        tau: f64,
    },
    SmoothKl {
        epsilon: f64,
    },
    Backward {
        #[serde(default = "default_base")]
        base: BaseLoss,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t: Option<TransitionMatrix>,
    },
    Forward {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t: Option<TransitionMatrix>,
    },
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Ce => "ce",
            LossSpec::Mae => "mae",
            LossSpec::Imae { .. } => "imae",
            LossSpec::SmoothKl { .. } => "smooth_kl",
            LossSpec::Backward { .. } => "backward",
            LossSpec::Forward { .. } => "forward",
        }
    }

    pub fn needs_transition(&self) -> bool {
        matches!(self, LossSpec::Backward { .. } | LossSpec::Forward { .. })
    }

    /// Fills in the transition matrix of a corrected loss if it is missing.
    pub fn with_transition(&self, t: &TransitionMatrix) -> LossSpec {
        match self {
            LossSpec::Backward { base, t: None } => LossSpec::Backward {
                base: *base,
                t: Some(t.clone()),
            },
            LossSpec::Forward { t: None } => LossSpec::Forward { t: Some(t.clone()) },
            other => other.clone(),
        }
    }

    /// Validates parameters and precomputes anything the loss needs per sample.
    pub fn prepare(&self) -> Result<Loss> {
        let kind = match self {
            LossSpec::Ce => Prepared::Ce,
            LossSpec::Mae => Prepared::Mae,
            LossSpec::Imae { tau } => {
                if !(*tau > 0.0) || !tau.is_finite() {
                    return Err(Error::InvalidParameter(format!("iMAE tau must be > 0, got {tau}")));
                }
                Prepared::Imae { tau: *tau }
            }
            LossSpec::SmoothKl { epsilon } => {
                if !(0.0..1.0).contains(epsilon) {
                    return Err(Error::InvalidParameter(format!(
                        "smoothing epsilon must lie in [0,1), got {epsilon}"
                    )));
                }
                Prepared::SmoothKl { epsilon: *epsilon }
            }
            LossSpec::Backward { base, t } => {
                let t = t.as_ref().ok_or_else(|| missing_transition("backward"))?;
                let (inv, _) = t.as_matrix().inverse(MAX_CONDITION)?;
                Prepared::Backward { base: *base, inv }
            }
            LossSpec::Forward { t } => {
                let t = t.as_ref().ok_or_else(|| missing_transition("forward"))?;
                Prepared::Forward { t: t.clone() }
            }
        };
        Ok(Loss { kind })
    }
}

fn missing_transition(which: &str) -> Error {
    Error::InvalidParameter(format!("{which}-corrected loss needs a transition matrix"))
}

#[derive(Debug, Clone)]
enum Prepared {
    Ce,
    Mae,
    Imae { tau: f64 },
    SmoothKl { epsilon: f64 },
    Backward { base: BaseLoss, inv: Matrix },
    Forward { t: TransitionMatrix },
}

/// A validated, ready-to-evaluate loss.
#[derive(Debug, Clone)]
pub struct Loss {
    kind: Prepared,
}

impl Loss {
    pub fn value(&self, probs: &[f64], y: usize) -> f64 {
        match &self.kind {
            Prepared::Ce => ce(probs, y),
            Prepared::Mae => mae(probs, y),
            Prepared::Imae { tau } => imae(probs, y, *tau),
            Prepared::SmoothKl { epsilon } => smooth_kl(probs, y, *epsilon),
            Prepared::Backward { base, inv } => backward_with_inverse(inv, *base, probs, y),
            Prepared::Forward { t } => forward_corrected(t, probs, y),
        }
    }

    pub fn grad_logits(&self, probs: &[f64], y: usize) -> Vec<f64> {
        match &self.kind {
            Prepared::Ce => ce_grad_logits(probs, y),
            Prepared::Mae => mae_grad_logits(probs, y),
            Prepared::Imae { tau } => imae_grad_logits(probs, y, *tau),
            Prepared::SmoothKl { epsilon } => {
                let q = smoothed_target(probs.len(), y, *epsilon);
                soft_kl_grad_logits(probs, &q)
            }
            Prepared::Backward { base, inv } => backward_grad_with_inverse(inv, *base, probs, y),
            Prepared::Forward { t } => forward_grad_logits(t, probs, y),
        }
    }
}

/// `−log p̂_y`
pub fn ce(probs: &[f64], y: usize) -> f64 {
    -clamped_ln(probs[y])
}

/// `p̂ − e_y`
pub fn ce_grad_logits(probs: &[f64], y: usize) -> Vec<f64> {
    let mut g = probs.to_vec();
    g[y] -= 1.0;
    g
}

/// `Σ_j |e_y[j] − p̂_j|`, which is `2(1 − p̂_y)` for a one-hot target.
pub fn mae(probs: &[f64], y: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(j, &p)| ((j == y) as u8 as f64 - p).abs())
        .sum()
}

/// `−2 p̂_y (e_y − p̂)`; its ℓ1 norm is `4 p̂_y (1 − p̂_y)`.
pub fn mae_grad_logits(probs: &[f64], y: usize) -> Vec<f64> {
    let py = probs[y];
    probs
        .iter()
        .enumerate()
        .map(|(j, &p)| -2.0 * py * ((j == y) as u8 as f64 - p))
        .collect()
}

/// Exponential integral `Ei(x)` for `x > 0` (power series).
pub fn exp_integral_ei(x: f64) -> f64 {
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    let mut term = 1.0;
    let mut sum = 0.0;
    for n in 1..1000 {
        term *= x / n as f64;
        let add = term / n as f64;
        sum += add;
        if add.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    EULER_GAMMA + x.ln() + sum
}

/// Primitive of the iMAE gradient rule: `½ (Ei(τ) − Ei(τ p̂_y))`.
///
/// Its logit-gradient is the MAE direction rescaled to ℓ1 norm
/// `exp(τ p̂_y)(1 − p̂_y)`; zero at `p̂_y = 1`.
pub fn imae(probs: &[f64], y: usize, tau: f64) -> f64 {
    let p = probs[y].clamp(LOG_FLOOR, 1.0);
    0.5 * (exp_integral_ei(tau) - exp_integral_ei(tau * p))
}

/// MAE logit-gradient direction rescaled to ℓ1 norm `exp(τ p̂_y)(1 − p̂_y)`.
pub fn imae_grad_logits(probs: &[f64], y: usize, tau: f64) -> Vec<f64> {
    let scale = -0.5 * (tau * probs[y]).exp();
    probs
        .iter()
        .enumerate()
        .map(|(j, &p)| scale * ((j == y) as u8 as f64 - p))
        .collect()
}

/// Label-smoothed target `(1 − ε) e_y + ε/K`.
pub fn smoothed_target(k: usize, y: usize, epsilon: f64) -> Vec<f64> {
    let mut q = vec![epsilon / k as f64; k];
    q[y] += 1.0 - epsilon;
    q
}

/// `KL(q ‖ p̂)` for an arbitrary target distribution `q`.
pub fn soft_kl(probs: &[f64], q: &[f64]) -> f64 {
    q.iter()
        .zip(probs)
        .filter(|(&qj, _)| qj > 0.0)
        .map(|(&qj, &pj)| qj * (qj.ln() - clamped_ln(pj)))
        .sum()
}

/// `p̂ − q`
pub fn soft_kl_grad_logits(probs: &[f64], q: &[f64]) -> Vec<f64> {
    probs.iter().zip(q).map(|(p, q)| p - q).collect()
}

/// `KL(q ‖ p̂)` against the label-smoothed target.
pub fn smooth_kl(probs: &[f64], y: usize, epsilon: f64) -> f64 {
    soft_kl(probs, &smoothed_target(probs.len(), y, epsilon))
}

/// `ℓ(x)`: the base loss evaluated as if the label were each class in turn.
pub fn loss_vector(base: BaseLoss, probs: &[f64]) -> Vec<f64> {
    (0..probs.len())
        .map(|j| match base {
            BaseLoss::Ce => ce(probs, j),
            BaseLoss::Mae => mae(probs, j),
        })
        .collect()
}

fn base_grad(base: BaseLoss, probs: &[f64], j: usize) -> Vec<f64> {
    match base {
        BaseLoss::Ce => ce_grad_logits(probs, j),
        BaseLoss::Mae => mae_grad_logits(probs, j),
    }
}

/// `[T⁻¹ ℓ(x)]_ỹ`. May be negative.
pub fn backward_corrected(t: &TransitionMatrix, base: BaseLoss, probs: &[f64], observed: usize) -> Result<f64> {
    let (inv, _) = t.as_matrix().inverse(MAX_CONDITION)?;
    Ok(backward_with_inverse(&inv, base, probs, observed))
}

pub(crate) fn backward_with_inverse(inv: &Matrix, base: BaseLoss, probs: &[f64], y: usize) -> f64 {
    let l = loss_vector(base, probs);
    inv.row(y).iter().zip(&l).map(|(w, l)| w * l).sum()
}

fn backward_grad_with_inverse(inv: &Matrix, base: BaseLoss, probs: &[f64], y: usize) -> Vec<f64> {
    let mut g = vec![0.0; probs.len()];
    for (j, &w) in inv.row(y).iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (gi, bj) in g.iter_mut().zip(base_grad(base, probs, j)) {
            *gi += w * bj;
        }
    }
    g
}

/// Gradient of [`backward_corrected`] with respect to the logits.
pub fn backward_grad_logits(t: &TransitionMatrix, base: BaseLoss, probs: &[f64], observed: usize) -> Result<Vec<f64>> {
    let (inv, _) = t.as_matrix().inverse(MAX_CONDITION)?;
    Ok(backward_grad_with_inverse(&inv, base, probs, observed))
}

/// Cross-entropy of `q = Tᵀ p̂` against the observed label.
pub fn forward_corrected(t: &TransitionMatrix, probs: &[f64], observed: usize) -> f64 {
    let q = t.as_matrix().tr_mul_vec(probs);
    -clamped_ln(q[observed])
}

/// `p̂_k − p̂_k T[k][ỹ] / q_ỹ`
pub fn forward_grad_logits(t: &TransitionMatrix, probs: &[f64], observed: usize) -> Vec<f64> {
    let q_obs: f64 = (0..probs.len()).map(|k| t.get(k, observed) * probs[k]).sum();
    if q_obs <= 0.0 {
        return vec![0.0; probs.len()];
    }
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| p - p * t.get(k, observed) / q_obs)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::symmetric_transition;
    use approx::assert_abs_diff_eq;

    fn l1(v: &[f64]) -> f64 {
        v.iter().map(|x| x.abs()).sum()
    }

    fn t2() -> TransitionMatrix {
        TransitionMatrix::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap()
    }

    #[test]
    fn ce_examples() {
        assert_eq!(ce(&[0.0, 1.0, 0.0], 1), 0.0);
        assert_abs_diff_eq!(ce(&[0.5, 0.5], 0), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(ce_grad_logits(&[0.25, 0.75], 0), vec![-0.75, 0.75]);
        assert!(ce(&[1.0, 0.0], 1).is_finite());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[0.0, 1.0], 1), 0.0);
        assert_abs_diff_eq!(mae(&[0.25; 4], 2), 1.5, epsilon = 1e-15);
        assert_eq!(mae(&[1.0, 0.0, 0.0], 2), 2.0);
        assert_abs_diff_eq!(l1(&mae_grad_logits(&[0.5, 0.3, 0.2], 0)), 1.0, epsilon = 1e-15);
        assert!(mae_grad_logits(&[0.0, 1.0], 1).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn imae_examples() {
        assert!(imae_grad_logits(&[0.0, 1.0], 1, 8.0).iter().all(|g| *g == 0.0));
        let g = imae_grad_logits(&[0.5, 0.25, 0.25], 0, 8.0);
        assert_abs_diff_eq!(l1(&g), 4f64.exp() * 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(l1(&g), 27.299_075_016_572_118, epsilon = 1e-9);
        // confident samples get the larger weight
        let w = |p: f64| (8.0 * p).exp() * (1.0 - p);
        assert!(w(0.9) > w(0.1));
        assert_abs_diff_eq!(imae(&[0.0, 1.0], 1, 8.0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ei_reference_values() {
        // Abramowitz & Stegun table 5.1
        assert_abs_diff_eq!(exp_integral_ei(1.0), 1.895_117_816_355_936_8, epsilon = 1e-13);
        assert_abs_diff_eq!(exp_integral_ei(8.0), 440.379_899_534_838_3, epsilon = 1e-9);
    }

    #[test]
    fn smooth_kl_examples() {
        let p = [0.7, 0.2, 0.1];
        let g = Loss {
            kind: Prepared::SmoothKl { epsilon: 0.0 },
        }
        .grad_logits(&p, 1);
        assert_eq!(g, ce_grad_logits(&p, 1));
        let q = smoothed_target(2, 0, 0.2);
        assert_abs_diff_eq!(q[0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(smooth_kl(&[0.9, 0.1], 0, 0.2), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn loss_vector_examples() {
        let v = loss_vector(BaseLoss::Ce, &[0.5, 0.5]);
        assert_abs_diff_eq!(v[0], 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 2f64.ln(), epsilon = 1e-15);
        let p = [0.2, 0.5, 0.3];
        let v = loss_vector(BaseLoss::Ce, &p);
        assert_eq!(crate::numerics::argmax(&v.iter().map(|x| -x).collect::<Vec<_>>()), 1);
        assert_eq!(loss_vector(BaseLoss::Mae, &p).len(), 3);
    }

    #[test]
    fn backward_examples() {
        let p = [0.3, 0.7];
        let id = TransitionMatrix::identity(2);
        assert_abs_diff_eq!(
            backward_corrected(&id, BaseLoss::Ce, &p, 1).unwrap(),
            ce(&p, 1),
            epsilon = 1e-15
        );
        // independent closed-form 2x2 inverse: [[d,-b],[-c,a]]/(ad-bc)
        let (a, b, c, d) = (0.8, 0.2, 0.3, 0.7);
        let det = a * d - b * c;
        let inv_row0 = [d / det, -b / det];
        let l = [0.1, 2.0];
        let want = inv_row0[0] * l[0] + inv_row0[1] * l[1];
        assert_abs_diff_eq!(want, -0.66, epsilon = 1e-12);
        let (inv, _) = t2().as_matrix().inverse(MAX_CONDITION).unwrap();
        let got: f64 = inv.row(0).iter().zip(l).map(|(w, l)| w * l).sum();
        assert_abs_diff_eq!(got, -0.66, epsilon = 1e-12);

        let singular = TransitionMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!(matches!(
            backward_corrected(&singular, BaseLoss::Ce, &p, 0),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn forward_examples() {
        let p = [0.2, 0.5, 0.3];
        let id = TransitionMatrix::identity(3);
        assert_abs_diff_eq!(forward_corrected(&id, &p, 2), ce(&p, 2), epsilon = 1e-15);
        assert_abs_diff_eq!(forward_corrected(&t2(), &[1.0, 0.0], 1), 5f64.ln(), epsilon = 1e-12);
        let g = forward_grad_logits(&id, &p, 2);
        for (a, b) in g.iter().zip(ce_grad_logits(&p, 2)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn prepare_validates() {
        assert!(LossSpec::Imae { tau: 0.0 }.prepare().is_err());
        assert!(LossSpec::SmoothKl { epsilon: 1.0 }.prepare().is_err());
        assert!(LossSpec::Forward { t: None }.prepare().is_err());
        let t = symmetric_transition(3, 0.3).unwrap();
        let spec = LossSpec::Backward {
            base: BaseLoss::Ce,
            t: None,
        }
        .with_transition(&t);
        assert!(spec.prepare().is_ok());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec: LossSpec = serde_json::from_str(r#"{"kind":"imae"}"#).unwrap();
        assert_eq!(spec, LossSpec::Imae { tau: 8.0 });
        let spec: LossSpec = serde_json::from_str(r#"{"kind":"backward"}"#).unwrap();
        assert_eq!(
            spec,
            LossSpec::Backward {
                base: BaseLoss::Ce,
                t: None
            }
        );
    }
}
