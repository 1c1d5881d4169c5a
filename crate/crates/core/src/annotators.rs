//! Multi-annotator label fusion and annotator confusion estimation.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::data::TrainingView;
use crate::error::{Error, Result};
use crate::losses::LOG_FLOOR;
use crate::model::{
    epoch_record, guard, init_for, row_softmax, row_softmax_backward, EpochMetrics, Grads, ModelParams, TrainConfig,
};
use crate::noise::TransitionMatrix;
use crate::numerics::{argmax, softmax, Matrix, ProbVector, Rng};
use crate::par;

/// Per-annotator confusion matrices `θ^(a)` and a class prior `π`.
///
/// Serialized as `{"prior": [...], "confusions": [[[...]]]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AnnotatorModelJson", into = "AnnotatorModelJson")]
pub struct AnnotatorModel {
    pub prior: ProbVector,
    pub confusions: Vec<TransitionMatrix>,
}

#[derive(Serialize, Deserialize)]
struct AnnotatorModelJson {
    prior: Vec<f64>,
    confusions: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<AnnotatorModelJson> for AnnotatorModel {
    type Error = Error;

    fn try_from(j: AnnotatorModelJson) -> Result<Self> {
        let prior = ProbVector::new(j.prior)?;
        let confusions = j
            .confusions
            .iter()
            .map(|rows| TransitionMatrix::from_rows(rows))
            .collect::<Result<Vec<_>>>()?;
        if confusions.iter().any(|c| c.k() != prior.len()) {
            return Err(Error::Shape {
                expected: format!("{0}x{0} confusions", prior.len()),
                got: "mismatched confusion size".into(),
            });
        }
        Ok(Self { prior, confusions })
    }
}

impl From<AnnotatorModel> for AnnotatorModelJson {
    fn from(m: AnnotatorModel) -> Self {
        Self {
            prior: m.prior.into_vec(),
            confusions: m.confusions.iter().map(|c| c.as_matrix().to_rows()).collect(),
        }
    }
}

impl AnnotatorModel {
    pub fn num_classes(&self) -> usize {
        self.prior.len()
    }

    /// Diagonal of each confusion matrix.
    pub fn accuracies(&self) -> Vec<Vec<f64>> {
        self.confusions
            .iter()
            .map(|c| (0..c.k()).map(|i| c.get(i, i)).collect())
            .collect()
    }
}

fn infer_k(labels: impl IntoIterator<Item = usize>) -> usize {
    labels.into_iter().max().map_or(1, |m| m + 1)
}

/// Most frequent label; ties go to the lowest class index.
pub fn majority_vote(labels: &[usize]) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("majority vote of no labels".into()));
    }
    let mut counts = vec![0usize; infer_k(labels.iter().copied())];
    for &y in labels {
        counts[y] += 1;
    }
    Ok(counts
        .iter()
        .enumerate()
        .fold(0, |best, (c, &n)| if n > counts[best] { c } else { best }))
}

pub fn majority_vote_all(ann: &[Vec<usize>]) -> Result<Vec<usize>> {
    ann.iter().map(|row| majority_vote(row)).collect()
}

/// Index and label of the annotator with the smallest loss (lowest index on ties).
pub fn min_loss_label(losses: &[f64], labels: &[usize]) -> Result<(usize, usize)> {
    if losses.is_empty() || losses.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "need matching non-empty losses and labels, got {} and {}",
            losses.len(),
            labels.len()
        )));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidInput("annotator losses must be finite".into()));
    }
    let best = losses
        .iter()
        .enumerate()
        .fold(0, |best, (a, &l)| if l < losses[best] { a } else { best });
    Ok((best, labels[best]))
}

pub const STAPLE_INIT_DIAG: f64 = 0.8;
pub const STAPLE_SMOOTHING: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StapleConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for StapleConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StapleResult {
    /// `N×K` posterior over the true class.
    pub posteriors: Vec<Vec<f64>>,
    pub model: AnnotatorModel,
    /// Argmax of each posterior, lowest index on ties.
    pub fused: Vec<usize>,
    /// Observed-data log-likelihood evaluated at the start of every iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// E-step: posteriors and per-sample log-likelihood under `(prior, θ)`.
fn staple_e_step(ann: &[Vec<usize>], log_prior: &[f64], log_theta: &[Matrix]) -> Vec<(Vec<f64>, f64)> {
    let k = log_prior.len();
    par::map(ann, |row| {
        let mut lp: Vec<f64> = (0..k)
            .map(|c| log_prior[c] + row.iter().zip(log_theta).map(|(&l, th)| th[(c, l)]).sum::<f64>())
            .collect();
        let z = log_sum_exp(&lp);
        for v in &mut lp {
            *v = (*v - z).exp();
        }
        (lp, z)
    })
}

/// Discrete multi-class STAPLE (EM over annotator confusions and class prior).
///
/// Initial confusions put [`STAPLE_INIT_DIAG`] on the diagonal and spread the
/// rest uniformly; the prior starts uniform. M-step counts receive additive
/// smoothing [`STAPLE_SMOOTHING`].
pub fn staple(ann: &[Vec<usize>], k: usize, config: StapleConfig) -> Result<StapleResult> {
    let n = ann.len();
    if n == 0 {
        return Err(Error::InvalidInput("STAPLE needs at least one sample".into()));
    }
    let a = ann[0].len();
    if a < 2 || ann.iter().any(|r| r.len() != a) {
        return Err(Error::InvalidInput(
            "STAPLE needs at least two annotators with a label for every sample".into(),
        ));
    }
    if k < 2 || ann.iter().flatten().any(|&l| l >= k) {
        return Err(Error::InvalidInput(format!("labels must lie in 0..{k} with K >= 2")));
    }
    let off = (1.0 - STAPLE_INIT_DIAG) / (k - 1) as f64;
    let mut theta: Vec<Matrix> = (0..a)
        .map(|_| {
            let mut m = Matrix::zeros(k, k);
            for i in 0..k {
                for j in 0..k {
                    m[(i, j)] = if i == j { STAPLE_INIT_DIAG } else { off };
                }
            }
            m
        })
        .collect();
    let mut prior = vec![1.0 / k as f64; k];
    let mut log_likelihood = Vec::new();
    let mut posteriors = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let ln = |m: &Matrix| {
        let mut out = m.clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v = v.ln());
        out
    };
    while iterations < config.max_iters {
        iterations += 1;
        let log_theta: Vec<Matrix> = theta.iter().map(ln).collect();
        let log_prior: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
        let e = staple_e_step(ann, &log_prior, &log_theta);
        log_likelihood.push(e.iter().map(|(_, z)| z).sum());
        posteriors = e.into_iter().map(|(p, _)| p).collect();

        // M-step
        let mut counts: Vec<Matrix> = (0..a).map(|_| Matrix::zeros(k, k)).collect();
        let mut mass = vec![0.0; k];
        for (row, post) in ann.iter().zip(&posteriors) {
            for c in 0..k {
                mass[c] += post[c];
                for (ai, &l) in row.iter().enumerate() {
                    counts[ai][(c, l)] += post[c];
                }
            }
        }
        let mut change: f64 = 0.0;
        for (th, cnt) in theta.iter_mut().zip(&counts) {
            for c in 0..k {
                let denom = mass[c] + k as f64 * STAPLE_SMOOTHING;
                for j in 0..k {
                    let v = (cnt[(c, j)] + STAPLE_SMOOTHING) / denom;
                    change = change.max((v - th[(c, j)]).abs());
                    th[(c, j)] = v;
                }
            }
        }
        let total = n as f64 + k as f64 * STAPLE_SMOOTHING;
        for c in 0..k {
            let v = (mass[c] + STAPLE_SMOOTHING) / total;
            change = change.max((v - prior[c]).abs());
            prior[c] = v;
        }
        if change < config.tol {
            converged = true;
            break;
        }
    }
    let fused = posteriors.iter().map(|p| argmax(p)).collect();
    let model = AnnotatorModel {
        prior: normalized(prior)?,
        confusions: theta
            .into_iter()
            .map(|m| TransitionMatrix::new(renormalize_rows(m)))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(StapleResult {
        posteriors,
        model,
        fused,
        log_likelihood,
        iterations,
        converged,
    })
}

fn normalized(mut v: Vec<f64>) -> Result<ProbVector> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    ProbVector::new(v)
}

fn renormalize_rows(mut m: Matrix) -> Matrix {
    for r in 0..m.rows() {
        let s: f64 = m.row(r).iter().sum();
        m.row_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    m
}

pub const DEFAULT_LAMBDA_TRACE: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct ConfusionOutcome {
    /// Base classifier predicting clean labels.
    pub params: ModelParams,
    pub model: AnnotatorModel,
    pub history: Vec<EpochMetrics>,
}

/// Diagonal of the initial unconstrained confusion logits. At 1.0 the rows
/// start too flat for K ≥ 3 and θ can absorb a class permutation of the
/// still-random classifier.
pub const CONFUSION_INIT_SCALE: f64 = 2.0;

/// Unconstrained confusion logits `s·I`, so each realized row starts at
/// `e^s/(e^s + K − 1)` on the diagonal.
pub fn initial_confusion_logits(k: usize) -> Matrix {
    let mut m = Matrix::identity(k);
    for i in 0..k {
        m[(i, i)] = CONFUSION_INIT_SCALE;
    }
    m
}

/// Mean predicted distribution over the training samples.
fn predicted_prior(params: &ModelParams, view: &TrainingView) -> Result<ProbVector> {
    let probs = crate::model::predict_all(params, view)?;
    let k = params.num_classes();
    let mut mean = vec![0.0; k];
    for p in &probs {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    normalized(mean)
}

/// Per-sample objective `Σ_a CE((θ^(a))ᵀ p̂, label_a)` and its gradients with
/// respect to the logits and to each confusion-logit matrix (trace term excluded).
fn confusion_sample(p: &[f64], labels: &[usize], thetas: &[Matrix]) -> (f64, Vec<f64>, Vec<Matrix>) {
    let k = p.len();
    let mut value = 0.0;
    let mut g_logits = vec![0.0; k];
    let mut g_thetas = Vec::with_capacity(thetas.len());
    for (&l, th) in labels.iter().zip(thetas) {
        let q: f64 = (0..k).map(|c| th[(c, l)] * p[c]).sum();
        value -= q.max(LOG_FLOOR).ln();
        let mut g_t = Matrix::zeros(k, k);
        if q > 0.0 {
            for c in 0..k {
                g_logits[c] += p[c] - p[c] * th[(c, l)] / q;
                g_t[(c, l)] = -p[c] / q;
            }
        }
        g_thetas.push(g_t);
    }
    (value, g_logits, g_thetas)
}

/// Trains a base classifier jointly with per-annotator confusion matrices.
///
/// Annotator `a`'s label distribution is `(θ^(a))ᵀ p̂(·|x)`; the objective is
/// the summed cross-entropy over annotators plus `lambda_trace · Σ_a tr(θ^(a))`.
/// Each `θ^(a)` is the row-softmax of an unconstrained matrix trained by SGD with
/// the model's learning rate. The returned prior is the base model's mean
/// predicted class distribution over the training set.
pub fn train_with_confusion(
    view: &TrainingView,
    config: &TrainConfig,
    lambda_trace: f64,
    test: Option<&LabeledDataset>,
) -> Result<ConfusionOutcome> {
    config.validate()?;
    let ann = view
        .annotator_labels()
        .ok_or_else(|| Error::InvalidInput("dataset has no annotator labels".into()))?;
    if !(lambda_trace >= 0.0) || !lambda_trace.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lambda_trace must be >= 0, got {lambda_trace}"
        )));
    }
    let k = view.num_classes();
    let a = view.num_annotators();
    let mut params = init_for(view, config, 0)?;
    let mut logits_u: Vec<Matrix> = (0..a).map(|_| initial_confusion_logits(k)).collect();
    let rng = Rng::new(config.seed).fork(0xC0F);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut epoch_rng = rng.fork(epoch as u64);
        let order = epoch_rng.permutation(view.len());
        let mut losses = Vec::with_capacity(view.len());
        for batch in order.chunks(config.batch_size) {
            let n = batch.len() as f64;
            let thetas: Vec<Matrix> = logits_u.iter().map(row_softmax).collect();
            let mut total = Grads::zeros_like(&params);
            let mut g_theta: Vec<Matrix> = (0..a).map(|_| Matrix::zeros(k, k)).collect();
            for &i in batch {
                let p = guard(epoch, params.predict_proba(view.x(i)))?;
                let (value, g_logits, g_t) = confusion_sample(p.as_slice(), &ann[i], &thetas);
                losses.push(value);
                let g = params.backward(view.x(i), &g_logits)?;
                total.add_scaled(&g, 1.0 / n);
                for (acc, gt) in g_theta.iter_mut().zip(&g_t) {
                    for (x, y) in acc.as_mut_slice().iter_mut().zip(gt.as_slice()) {
                        *x += y / n;
                    }
                }
            }
            params.apply_step(&total, config.learning_rate);
            for ((u, th), g) in logits_u.iter_mut().zip(&thetas).zip(&mut g_theta) {
                for c in 0..k {
                    g[(c, c)] += lambda_trace;
                }
                let gu = row_softmax_backward(th, g);
                for (x, d) in u.as_mut_slice().iter_mut().zip(gu.as_slice()) {
                    *x -= config.learning_rate * d;
                }
            }
        }
        let trace: f64 = logits_u
            .iter()
            .map(|u| {
                let t = row_softmax(u);
                (0..k).map(|c| t[(c, c)]).sum::<f64>()
            })
            .sum();
        // report the penalised objective
        let penalty = lambda_trace * trace;
        let penalised: Vec<f64> = losses.iter().map(|l| l + penalty).collect();
        history.push(epoch_record(epoch, &penalised, view.len(), 0, &params, test)?);
    }
    let confusions = logits_u
        .iter()
        .map(|u| TransitionMatrix::new(renormalize_rows(row_softmax(u))))
        .collect::<Result<Vec<_>>>()?;
    let prior = predicted_prior(&params, view)?;
    Ok(ConfusionOutcome {
        params,
        model: AnnotatorModel { prior, confusions },
        history,
    })
}

/// Trains on the per-sample annotator label with the smallest current loss.
pub fn train_min_loss(
    view: &TrainingView,
    config: &TrainConfig,
    test: Option<&LabeledDataset>,
) -> Result<(ModelParams, Vec<EpochMetrics>)> {
    config.validate()?;
    let ann = view
        .annotator_labels()
        .ok_or_else(|| Error::InvalidInput("dataset has no annotator labels".into()))?;
    let loss = config.loss.prepare()?;
    let mut params = init_for(view, config, 0)?;
    let rng = Rng::new(config.seed).fork(0x3115);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let order = rng.fork(epoch as u64).permutation(view.len());
        let mut losses = Vec::with_capacity(view.len());
        for batch in order.chunks(config.batch_size) {
            let mut total = Grads::zeros_like(&params);
            for &i in batch {
                let p = guard(epoch, params.predict_proba(view.x(i)))?;
                let per_ann: Vec<f64> = ann[i].iter().map(|&l| loss.value(p.as_slice(), l)).collect();
                let (_, label) = guard(epoch, min_loss_label(&per_ann, &ann[i]))?;
                losses.push(loss.value(p.as_slice(), label));
                let g = params.backward(view.x(i), &loss.grad_logits(p.as_slice(), label))?;
                total.add_scaled(&g, 1.0 / batch.len() as f64);
            }
            params.apply_step(&total, config.learning_rate);
        }
        history.push(epoch_record(epoch, &losses, view.len(), 0, &params, test)?);
    }
    Ok((params, history))
}

/// Softmax of each row of the unconstrained confusion logits.
pub fn realized_confusions(logits: &[Matrix]) -> Vec<Matrix> {
    logits.iter().map(row_softmax).collect()
}

/// Closed-form initial trace penalty `λ·A·K·e^s/(e^s + K − 1)`.
pub fn initial_trace_penalty(lambda: f64, annotators: usize, k: usize) -> f64 {
    let diag = softmax(initial_confusion_logits(k).row(0)).expect("finite")[0];
    lambda * annotators as f64 * k as f64 * diag
}
