//! Sample filtering and gradient re-weighting.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::data::TrainingView;
use crate::error::{Error, Result};
use crate::losses::{loss_vector, BaseLoss, Loss, MAX_CONDITION};
use crate::model::{predict_all, ModelParams};
use crate::noise::TransitionMatrix;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Update,
    Skip,
}

/// Skips samples whose loss exceeds `mean + multiplier·σ` of a sliding window
/// of recent losses.
#[derive(Debug, Clone)]
pub struct RunningLossFilter {
    window: VecDeque<f64>,
    capacity: usize,
    multiplier: f64,
    warmup: usize,
    sigma_floor: f64,
    include_skipped: bool,
}

impl Default for RunningLossFilter {
    fn default() -> Self {
        Self::new(100, 1.5, 30, true).expect("default parameters are valid")
    }
}

impl RunningLossFilter {
    pub const SIGMA_FLOOR: f64 = 1e-12;

    pub fn new(capacity: usize, multiplier: f64, warmup: usize, include_skipped: bool) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParameter("window must hold at least one loss".into()));
        }
        if !(multiplier > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "multiplier must be positive, got {multiplier}"
            )));
        }
        Ok(Self {
            window: VecDeque::with_capacity(capacity),
            capacity,
            multiplier,
            warmup,
            sigma_floor: Self::SIGMA_FLOOR,
            include_skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    /// Mean and population standard deviation of the window.
    pub fn stats(&self) -> (f64, f64) {
        let n = self.window.len() as f64;
        if n == 0.0 {
            return (0.0, 0.0);
        }
        let mean = self.window.iter().sum::<f64>() / n;
        let var = self.window.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Decides on `loss` using the window as it was before this call, then
    /// records the loss (skipped losses too, unless configured otherwise).
    pub fn observe(&mut self, loss: f64) -> Result<Decision> {
        if !loss.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite loss {loss}")));
        }
        let (mean, sigma) = self.stats();
        let decision =
            if self.window.len() >= self.warmup && sigma > self.sigma_floor && loss > mean + self.multiplier * sigma {
                Decision::Skip
            } else {
                Decision::Update
            };
        if decision == Decision::Update || self.include_skipped {
            if self.window.len() == self.capacity {
                self.window.pop_front();
            }
            self.window.push_back(loss);
        }
        Ok(decision)
    }
}

/// Keeps all but the `floor(fraction·n)` least confident samples, per observed
/// class by default. Ties remove the lower index first. Output is ascending.
pub fn rank_prune(confidence: &[f64], labels: &[usize], fraction: f64, per_class: bool) -> Result<Vec<usize>> {
    check_fraction(fraction)?;
    if confidence.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} confidences", labels.len()),
            got: format!("{}", confidence.len()),
        });
    }
    let groups: Vec<Vec<usize>> = if per_class {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        (0..k)
            .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
            .collect()
    } else {
        vec![(0..labels.len()).collect()]
    };
    let mut removed = vec![false; labels.len()];
    for mut g in groups {
        let m = (fraction * g.len() as f64).floor() as usize;
        g.sort_by(|&a, &b| confidence[a].total_cmp(&confidence[b]).then(a.cmp(&b)));
        for &i in &g[..m] {
            removed[i] = true;
        }
    }
    Ok((0..labels.len()).filter(|&i| !removed[i]).collect())
}

/// Drops the `ceil(fraction·N)` largest losses; ties remove the higher index
/// first. Output is ascending.
pub fn trimmed_filter(losses: &[f64], fraction: f64) -> Result<Vec<usize>> {
    check_fraction(fraction)?;
    let n = losses.len();
    let m = (fraction * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(b.cmp(&a)));
    let mut removed = vec![false; n];
    for &i in &order[..m.min(n)] {
        removed[i] = true;
    }
    Ok((0..n).filter(|&i| !removed[i]).collect())
}

fn check_fraction(f: f64) -> Result<()> {
    if !(0.0..1.0).contains(&f) {
        return Err(Error::InvalidParameter(format!("fraction must lie in [0,1), got {f}")));
    }
    Ok(())
}

/// Pumpout gradient multiplier with a precomputed `T⁻¹`.
#[derive(Debug, Clone)]
pub struct PumpoutRule {
    inv: Matrix,
    base: BaseLoss,
    gamma: f64,
}

impl PumpoutRule {
    pub fn new(t: &TransitionMatrix, base: BaseLoss, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidParameter(format!("gamma must lie in (0,1), got {gamma}")));
        }
        let (inv, _) = t.as_matrix().inverse(MAX_CONDITION)?;
        Ok(Self { inv, base, gamma })
    }

    /// `1ᵀ T⁻¹ ℓ(x)`
    pub fn score(&self, probs: &[f64]) -> f64 {
        let l = loss_vector(self.base, probs);
        self.inv.mul_vec(&l).iter().sum()
    }

    /// `−gamma` when the score is negative (suspected wrong label), else `+1`.
    pub fn multiplier(&self, probs: &[f64]) -> f64 {
        if self.score(probs) < 0.0 {
            -self.gamma
        } else {
            1.0
        }
    }
}

/// One-shot form of [`PumpoutRule::multiplier`].
pub fn pumpout(t: &TransitionMatrix, base: BaseLoss, probs: &[f64], gamma: f64) -> Result<f64> {
    Ok(PumpoutRule::new(t, base, gamma)?.multiplier(probs))
}

fn default_window() -> usize {
    100
}
fn default_multiplier() -> f64 {
    1.5
}
fn default_warmup() -> usize {
    30
}
fn default_true() -> bool {
    true
}
fn default_warmup_epochs() -> usize {
    5
}
fn default_base() -> BaseLoss {
    BaseLoss::Ce
}

/// Re-weighting selection as stored in training configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReweightSpec {
    RunningStats {
        #[serde(default = "default_window")]
        window: usize,
        #[serde(default = "default_multiplier")]
        multiplier: f64,
        #[serde(default = "default_warmup")]
        warmup: usize,
        #[serde(default = "default_true")]
        include_skipped: bool,
    },
    RankPrune {
        fraction: f64,
        #[serde(default = "default_true")]
        per_class: bool,
        #[serde(default = "default_warmup_epochs")]
        warmup_epochs: usize,
    },
    Trimmed {
        fraction: f64,
        #[serde(default = "default_warmup_epochs")]
        warmup_epochs: usize,
    },
    Pumpout {
        gamma: f64,
        #[serde(default = "default_base")]
        base: BaseLoss,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t: Option<TransitionMatrix>,
    },
}

impl ReweightSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ReweightSpec::RunningStats { .. } => "running_stats",
            ReweightSpec::RankPrune { .. } => "rank_prune",
            ReweightSpec::Trimmed { .. } => "trimmed",
            ReweightSpec::Pumpout { .. } => "pumpout",
        }
    }

    pub fn running_stats() -> Self {
        ReweightSpec::RunningStats {
            window: default_window(),
            multiplier: default_multiplier(),
            warmup: default_warmup(),
            include_skipped: true,
        }
    }

    pub fn needs_transition(&self) -> bool {
        matches!(self, ReweightSpec::Pumpout { t: None, .. })
    }

    pub fn with_transition(&self, t: &TransitionMatrix) -> Self {
        match self {
            ReweightSpec::Pumpout { gamma, base, t: None } => ReweightSpec::Pumpout {
                gamma: *gamma,
                base: *base,
                t: Some(t.clone()),
            },
            other => other.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ReweightSpec::RankPrune { fraction, .. } | ReweightSpec::Trimmed { fraction, .. } => {
                check_fraction(*fraction)
            }
            _ => self.sample_rule().map(|_| ()),
        }
    }

    pub(crate) fn sample_rule(&self) -> Result<Option<SampleRule>> {
        Ok(match self {
            ReweightSpec::RunningStats {
                window,
                multiplier,
                warmup,
                include_skipped,
            } => Some(SampleRule::Running(RunningLossFilter::new(
                *window,
                *multiplier,
                *warmup,
                *include_skipped,
            )?)),
            ReweightSpec::Pumpout { gamma, base, t } => {
                let t = t
                    .as_ref()
                    .ok_or_else(|| Error::InvalidParameter("pumpout needs a transition matrix".into()))?;
                Some(SampleRule::Pumpout(PumpoutRule::new(t, *base, *gamma)?))
            }
            _ => None,
        })
    }

    pub(crate) fn epoch_filter(&self) -> Option<EpochFilter> {
        match *self {
            ReweightSpec::RankPrune {
                fraction,
                per_class,
                warmup_epochs,
            } => Some(EpochFilter {
                kind: EpochFilterKind::RankPrune { fraction, per_class },
                warmup_epochs,
            }),
            ReweightSpec::Trimmed {
                fraction,
                warmup_epochs,
            } => Some(EpochFilter {
                kind: EpochFilterKind::Trimmed { fraction },
                warmup_epochs,
            }),
            _ => None,
        }
    }
}

/// Per-sample hook applied inside a mini-batch.
#[derive(Debug, Clone)]
pub(crate) enum SampleRule {
    Running(RunningLossFilter),
    Pumpout(PumpoutRule),
}

impl SampleRule {
    /// Gradient weight for one sample.
    pub(crate) fn weight(&mut self, loss: f64, probs: &[f64], _label: usize) -> Result<f64> {
        match self {
            SampleRule::Running(f) => Ok(match f.observe(loss)? {
                Decision::Update => 1.0,
                Decision::Skip => 0.0,
            }),
            SampleRule::Pumpout(p) => Ok(p.multiplier(probs)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum EpochFilterKind {
    RankPrune { fraction: f64, per_class: bool },
    Trimmed { fraction: f64 },
}

/// Sample selection recomputed at the start of every epoch after warm-up.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EpochFilter {
    kind: EpochFilterKind,
    warmup_epochs: usize,
}

impl EpochFilter {
    pub(crate) fn active(&self, epoch: usize) -> bool {
        epoch > self.warmup_epochs
    }

    pub(crate) fn kept(&self, params: &ModelParams, view: &TrainingView, loss: &Loss) -> Result<Vec<usize>> {
        let probs = predict_all(params, view)?;
        let labels = view.labels();
        match self.kind {
            EpochFilterKind::RankPrune { fraction, per_class } => {
                let conf: Vec<f64> = probs.iter().zip(labels).map(|(p, &y)| p[y]).collect();
                rank_prune(&conf, labels, fraction, per_class)
            }
            EpochFilterKind::Trimmed { fraction } => {
                let losses: Vec<f64> = probs.iter().zip(labels).map(|(p, &y)| loss.value(p, y)).collect();
                trimmed_filter(&losses, fraction)
            }
        }
    }
}
