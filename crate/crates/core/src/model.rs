//! Small differentiable classifiers with hand-derived gradients.
//!
//! Two architectures: a linear softmax classifier and a one-hidden-layer
//! rectifier network. Parameters are stored as a list of matrices:
//!
//! | arch   | tensors                                   |
//! |--------|-------------------------------------------|
//! | linear | `W (d×K)`, `b (1×K)`                      |
//! | mlp    | `W1 (d×h)`, `b1 (1×h)`, `W2 (h×K)`, `b2 (1×K)` |
//!
//! An optional noise-adaptation layer maps the clean-label softmax through a
//! learned row-stochastic matrix for training on noisy labels.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, TrainingView};
use crate::error::{Error, Result};
use crate::losses::{soft_kl, soft_kl_grad_logits, Loss, LossSpec, LOG_FLOOR};
use crate::metrics::Metrics;
use crate::numerics::{argmax, softmax, Matrix, ProbVector, Rng};
use crate::par;
use crate::procedures::{self, ProcedureSpec, SoftLabelStore};
use crate::reweight::ReweightSpec;

pub const DEFAULT_HIDDEN: usize = 32;

/// Concrete architecture with all dimensions resolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Linear { d: usize, k: usize },
    Mlp { d: usize, hidden: usize, k: usize },
}

impl Arch {
    pub fn input_dim(&self) -> usize {
        match *self {
            Arch::Linear { d, .. } | Arch::Mlp { d, .. } => d,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            Arch::Linear { k, .. } | Arch::Mlp { k, .. } => k,
        }
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        match *self {
            Arch::Linear { d, k } => vec![(d, k), (1, k)],
            Arch::Mlp { d, hidden, k } => vec![(d, hidden), (1, hidden), (hidden, k), (1, k)],
        }
    }
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}

fn default_scale() -> f64 {
    1.0
}

/// Architecture choice without data-dependent dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    #[default]
    Linear,
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default = "default_scale")]
        capacity_scale: f64,
    },
}

impl ArchSpec {
    pub fn mlp() -> Self {
        ArchSpec::Mlp {
            hidden: DEFAULT_HIDDEN,
            capacity_scale: 1.0,
        }
    }

    /// Same spec with the hidden width scaled by `scale` (no-op for linear).
    pub fn scaled(&self, scale: f64) -> Self {
        match *self {
            ArchSpec::Linear => ArchSpec::Linear,
            ArchSpec::Mlp { hidden, capacity_scale } => ArchSpec::Mlp {
                hidden,
                capacity_scale: capacity_scale * scale,
            },
        }
    }

    pub fn resolve(&self, d: usize, k: usize) -> Result<Arch> {
        if d == 0 || k < 2 {
            return Err(Error::InvalidParameter(format!(
                "architecture needs d >= 1 and K >= 2, got d={d}, K={k}"
            )));
        }
        Ok(match *self {
            ArchSpec::Linear => Arch::Linear { d, k },
            ArchSpec::Mlp { hidden, capacity_scale } => {
                if !(capacity_scale > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "capacity_scale must be positive, got {capacity_scale}"
                    )));
                }
                let h = (hidden as f64 * capacity_scale).round().max(1.0) as usize;
                Arch::Mlp { d, hidden: h, k }
            }
        })
    }
}

/// Learned transition layer; the realized transition is the row-softmax of `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAdaptationLayer {
    pub q: Matrix,
}

impl NoiseAdaptationLayer {
    /// `q = c·I` with `c` chosen so every realized row has `diag` on the diagonal.
    pub fn identity_leaning(k: usize, diag: f64) -> Self {
        let c = ((k - 1) as f64 * diag / (1.0 - diag)).ln();
        let mut q = Matrix::zeros(k, k);
        for i in 0..k {
            q[(i, i)] = c;
        }
        Self { q }
    }

    pub fn transition(&self) -> Matrix {
        row_softmax(&self.q)
    }
}

pub(crate) fn row_softmax(q: &Matrix) -> Matrix {
    let mut t = Matrix::zeros(q.rows(), q.cols());
    for r in 0..q.rows() {
        let p = softmax(q.row(r)).expect("finite transition logits");
        t.row_mut(r).copy_from_slice(p.as_slice());
    }
    t
}

/// Backpropagates `g` (gradient w.r.t. the realized row-softmax `t`) to `q`.
pub(crate) fn row_softmax_backward(t: &Matrix, g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(t.rows(), t.cols());
    for r in 0..t.rows() {
        let dot: f64 = t.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
        for c in 0..t.cols() {
            out[(r, c)] = t[(r, c)] * (g[(r, c)] - dot);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Arch,
    pub tensors: Vec<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_layer: Option<NoiseAdaptationLayer>,
}

/// Gradient with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Matrix>,
    pub noise: Option<Matrix>,
}

impl Grads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
            noise: params
                .noise_layer
                .as_ref()
                .map(|l| Matrix::zeros(l.q.rows(), l.q.cols())),
        }
    }

    /// `self += w · other`
    pub fn add_scaled(&mut self, other: &Grads, w: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += w * y;
            }
        }
        if let (Some(a), Some(b)) = (&mut self.noise, &other.noise) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += w * y;
            }
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.tensors.iter().flat_map(|t| t.as_slice().iter().copied()).collect();
        if let Some(n) = &self.noise {
            v.extend_from_slice(n.as_slice());
        }
        v
    }

    pub fn is_zero(&self) -> bool {
        self.to_flat().iter().all(|g| *g == 0.0)
    }
}

fn glorot_fill(m: &mut Matrix, rng: &mut Rng) {
    let limit = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
    for v in m.as_mut_slice() {
        *v = rng.uniform_range(-limit, limit);
    }
}

/// Glorot-uniform weights, zero biases. Deterministic per seed.
pub fn init(arch: Arch, seed: u64) -> ModelParams {
    let mut rng = Rng::new(seed).fork(0x1417);
    let tensors = arch
        .shapes()
        .into_iter()
        .enumerate()
        .map(|(i, (r, c))| {
            let mut m = Matrix::zeros(r, c);
            // even slots are weight matrices, odd slots biases
            if i % 2 == 0 {
                glorot_fill(&mut m, &mut rng);
            }
            m
        })
        .collect();
    ModelParams {
        arch,
        tensors,
        noise_layer: None,
    }
}

struct Activations {
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

/// `out = x · W + b` for a row vector `x`.
fn affine(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut out = b.row(0).to_vec();
    for (r, &xr) in x.iter().enumerate() {
        if xr == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(w.row(r)) {
            *o += xr * wv;
        }
    }
    out
}

/// `m += outer(a, g)`
fn add_outer(m: &mut Matrix, a: &[f64], g: &[f64]) {
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        for (v, gc) in m.row_mut(r).iter_mut().zip(g) {
            *v += ar * gc;
        }
    }
}

impl ModelParams {
    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim() {
            return Err(Error::Shape {
                expected: format!("input of length {}", self.arch.input_dim()),
                got: format!("{}", x.len()),
            });
        }
        Ok(())
    }

    fn forward_internal(&self, x: &[f64]) -> (Vec<f64>, Option<Activations>) {
        match self.arch {
            Arch::Linear { .. } => (affine(x, &self.tensors[0], &self.tensors[1]), None),
            Arch::Mlp { .. } => {
                let pre = affine(x, &self.tensors[0], &self.tensors[1]);
                let hidden: Vec<f64> = pre.iter().map(|a| a.max(0.0)).collect();
                let logits = affine(&hidden, &self.tensors[2], &self.tensors[3]);
                (logits, Some(Activations { pre, hidden }))
            }
        }
    }

    /// Logit vector of length `K`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_internal(x).0)
    }

    /// Clean-label class probabilities (the noise layer, if any, is bypassed).
    pub fn predict_proba(&self, x: &[f64]) -> Result<ProbVector> {
        softmax(&self.forward(x)?)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.predict_proba(x)?.argmax())
    }

    /// Gradient of `⟨grad_wrt_logits, logits(x)⟩` with respect to every parameter.
    pub fn backward(&self, x: &[f64], grad_wrt_logits: &[f64]) -> Result<Grads> {
        self.check_input(x)?;
        if grad_wrt_logits.len() != self.num_classes() {
            return Err(Error::Shape {
                expected: format!("logit gradient of length {}", self.num_classes()),
                got: format!("{}", grad_wrt_logits.len()),
            });
        }
        let mut g = Grads::zeros_like(self);
        match self.arch {
            Arch::Linear { .. } => {
                add_outer(&mut g.tensors[0], x, grad_wrt_logits);
                g.tensors[1].row_mut(0).copy_from_slice(grad_wrt_logits);
            }
            Arch::Mlp { .. } => {
                let (_, act) = self.forward_internal(x);
                let act = act.expect("mlp activations");
                add_outer(&mut g.tensors[2], &act.hidden, grad_wrt_logits);
                g.tensors[3].row_mut(0).copy_from_slice(grad_wrt_logits);
                let w2 = &self.tensors[2];
                let grad_pre: Vec<f64> = (0..act.pre.len())
                    .map(|j| {
                        if act.pre[j] > 0.0 {
                            w2.row(j).iter().zip(grad_wrt_logits).map(|(a, b)| a * b).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_outer(&mut g.tensors[0], x, &grad_pre);
                g.tensors[1].row_mut(0).copy_from_slice(&grad_pre);
            }
        }
        Ok(g)
    }

    /// Attaches a noise-adaptation layer whose realized rows put `diag` on the diagonal.
    pub fn attach_noise_layer(mut self, diag: f64) -> Self {
        self.noise_layer = Some(NoiseAdaptationLayer::identity_leaning(self.num_classes(), diag));
        self
    }

    pub fn detach_noise_layer(mut self) -> Self {
        self.noise_layer = None;
        self
    }

    /// Distribution over observed labels: `Tᵀ · softmax(logits)` with `T` the
    /// realized noise-layer transition; plain softmax without a layer.
    pub fn noisy_forward(&self, x: &[f64]) -> Result<ProbVector> {
        let p = self.predict_proba(x)?;
        match &self.noise_layer {
            None => Ok(p),
            Some(layer) => Ok(mix_through(&layer.transition(), p.as_slice())),
        }
    }

    /// Sets every parameter `θ -= lr · g`.
    pub fn apply_step(&mut self, g: &Grads, lr: f64) {
        for (p, gt) in self.tensors.iter_mut().zip(&g.tensors) {
            for (v, d) in p.as_mut_slice().iter_mut().zip(gt.as_slice()) {
                *v -= lr * d;
            }
        }
        if let (Some(layer), Some(gn)) = (&mut self.noise_layer, &g.noise) {
            for (v, d) in layer.q.as_mut_slice().iter_mut().zip(gn.as_slice()) {
                *v -= lr * d;
            }
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.as_slice().len()).sum::<usize>()
            + self.noise_layer.as_ref().map_or(0, |l| l.q.as_slice().len())
    }

    fn flat_slot(&mut self, mut i: usize) -> &mut f64 {
        for t in &mut self.tensors {
            let n = t.as_slice().len();
            if i < n {
                return &mut t.as_mut_slice()[i];
            }
            i -= n;
        }
        &mut self
            .noise_layer
            .as_mut()
            .expect("flat index within parameter count")
            .q
            .as_mut_slice()[i]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.tensors.iter().flat_map(|t| t.as_slice().iter().copied()).collect();
        if let Some(l) = &self.noise_layer {
            v.extend_from_slice(l.q.as_slice());
        }
        v
    }
}

/// `Tᵀ p`, renormalised against rounding.
pub(crate) fn mix_through(t: &Matrix, p: &[f64]) -> ProbVector {
    let mut q = t.tr_mul_vec(p);
    let s: f64 = q.iter().sum();
    for v in &mut q {
        *v = (*v / s).clamp(0.0, 1.0);
    }
    ProbVector::new(q).expect("stochastic mixture of a distribution")
}

/// Training target for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target<'a> {
    Hard(usize),
    Soft(&'a [f64]),
}

/// Loss and parameter gradient for one sample.
///
/// Hard targets use `loss` (through the noise layer with cross-entropy when one
/// is attached); soft targets use `KL(target ‖ p̂)`.
pub fn sample_grad(params: &ModelParams, loss: &Loss, x: &[f64], target: Target<'_>) -> Result<(f64, Grads)> {
    let logits = params.forward(x)?;
    let p = softmax(&logits)?;
    let p = p.as_slice();
    match (target, &params.noise_layer) {
        (Target::Hard(y), None) => {
            let g = loss.grad_logits(p, y);
            Ok((loss.value(p, y), params.backward(x, &g)?))
        }
        (Target::Soft(q), None) => {
            let g = soft_kl_grad_logits(p, q);
            Ok((soft_kl(p, q), params.backward(x, &g)?))
        }
        (Target::Hard(y), Some(layer)) => noisy_ce_grad(params, layer, x, p, y),
        (Target::Soft(_), Some(_)) => Err(Error::InvalidInput(
            "soft targets are not supported through a noise-adaptation layer".into(),
        )),
    }
}

/// Cross-entropy of the noise-layer output against the observed label, with
/// gradients for both the base parameters and the layer.
fn noisy_ce_grad(
    params: &ModelParams,
    layer: &NoiseAdaptationLayer,
    x: &[f64],
    p: &[f64],
    y: usize,
) -> Result<(f64, Grads)> {
    let t = layer.transition();
    let k = p.len();
    let q_obs: f64 = (0..k).map(|i| t[(i, y)] * p[i]).sum();
    let value = -q_obs.max(LOG_FLOOR).ln();
    if q_obs <= 0.0 {
        return Ok((value, Grads::zeros_like(params)));
    }
    let g_logits: Vec<f64> = (0..k).map(|i| p[i] - p[i] * t[(i, y)] / q_obs).collect();
    let mut grads = params.backward(x, &g_logits)?;
    // dL/dT[i][j] = −1[j = y] p_i / q_y
    let mut g_t = Matrix::zeros(k, k);
    for i in 0..k {
        g_t[(i, y)] = -p[i] / q_obs;
    }
    grads.noise = Some(row_softmax_backward(&t, &g_t));
    Ok((value, grads))
}

/// Largest relative error between two gradient vectors, using
/// `|a − n| / max(1e-12, |a| + |n|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Central finite differences of `objective` around `params`, one entry per
/// parameter in flat order.
pub fn numeric_gradient<F>(params: &ModelParams, epsilon: f64, objective: F) -> Vec<f64>
where
    F: Fn(&ModelParams) -> f64 + Sync + Send,
{
    par::map_range(params.num_parameters(), |i| {
        let mut plus = params.clone();
        let base = plus.to_flat()[i];
        *plus.flat_slot(i) = base + epsilon;
        let mut minus = params.clone();
        *minus.flat_slot(i) = base - epsilon;
        (objective(&plus) - objective(&minus)) / (2.0 * epsilon)
    })
}

/// Max relative error between the analytic gradient of `loss` at `(x, y)` and
/// central finite differences over every parameter.
pub fn grad_check(params: &ModelParams, x: &[f64], y: usize, loss: &LossSpec, epsilon: f64) -> Result<f64> {
    if !(1e-8..=1e-4).contains(&epsilon) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference epsilon must lie in [1e-8, 1e-4], got {epsilon}"
        )));
    }
    let loss = loss.prepare()?;
    let (_, analytic) = sample_grad(params, &loss, x, Target::Hard(y))?;
    let objective = |p: &ModelParams| -> f64 {
        match &p.noise_layer {
            None => loss.value(p.predict_proba(x).expect("finite logits").as_slice(), y),
            Some(_) => {
                let q = p.noisy_forward(x).expect("finite logits");
                -q[y].max(LOG_FLOOR).ln()
            }
        }
    };
    let numeric = numeric_gradient(params, epsilon, objective);
    Ok(max_relative_error(&analytic.to_flat(), &numeric))
}

/// `1 − (fraction of models agreeing with the majority class)`; majority ties
/// go to the lowest class index.
pub fn ensemble_disagreement(models: &[ModelParams], x: &[f64]) -> Result<f64> {
    if models.len() < 2 {
        return Err(Error::InvalidInput("ensemble needs at least 2 models".into()));
    }
    let k = models[0].num_classes();
    if models.iter().any(|m| m.num_classes() != k) {
        return Err(Error::InvalidInput("ensemble models disagree on K".into()));
    }
    let votes = models.iter().map(|m| m.predict(x)).collect::<Result<Vec<_>>>()?;
    let mut counts = vec![0usize; k];
    for v in &votes {
        counts[*v] += 1;
    }
    let majority = counts
        .iter()
        .enumerate()
        .fold(0, |best, (c, &n)| if n > counts[best] { c } else { best });
    Ok(1.0 - counts[majority] as f64 / models.len() as f64)
}

/// Clean-label probability vectors for every sample.
pub fn predict_all(params: &ModelParams, ds: &LabeledDataset) -> Result<Vec<Vec<f64>>> {
    par::map_range(ds.len(), |i| params.predict_proba(ds.x(i)).map(ProbVector::into_vec))
        .into_iter()
        .collect()
}

/// Evaluates against the dataset's reference labels (truth when present).
pub fn evaluate(params: &ModelParams, ds: &LabeledDataset) -> Result<Metrics> {
    let probs = predict_all(params, ds)?;
    Metrics::compute(&probs, ds.reference_labels(), ds.num_classes())
}

fn default_epochs() -> usize {
    30
}

fn default_batch() -> usize {
    32
}

fn default_lr() -> f64 {
    0.1
}

/// Training settings. `reweight` and `procedure` select optional hooks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub arch: ArchSpec,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reweight: Option<ReweightSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub procedure: Option<ProcedureSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            arch: ArchSpec::Linear,
            loss: LossSpec::Ce,
            reweight: None,
            procedure: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Validation(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        self.loss.prepare()?;
        if let Some(r) = &self.reweight {
            r.validate()?;
        }
        if let Some(p) = &self.procedure {
            p.validate()?;
            if p.is_multi_model() && self.reweight.is_some() {
                return Err(Error::Validation(
                    "re-weighting cannot be combined with a two-model procedure".into(),
                ));
            }
            if matches!(p, ProcedureSpec::NoiseAdaptation { .. }) && self.loss != LossSpec::Ce {
                return Err(Error::Validation(
                    "the noise-adaptation layer trains with plain cross-entropy".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_macro_f1: Option<f64>,
    /// Samples whose gradient was used this epoch.
    pub updated: usize,
    /// Samples filtered out this epoch (re-weighting, co-teaching, disagreement).
    pub skipped: usize,
    /// Stored labels rewritten this epoch (dual relabel only).
    #[serde(default)]
    pub relabeled: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochMetrics>,
    /// Final label store of relabeling procedures.
    pub store: Option<SoftLabelStore>,
}

pub(crate) fn epoch_record(
    epoch: usize,
    losses: &[f64],
    updated: usize,
    skipped: usize,
    params: &ModelParams,
    test: Option<&LabeledDataset>,
) -> Result<EpochMetrics> {
    let train_loss = if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    if !train_loss.is_finite() {
        return Err(Error::Diverged { epoch });
    }
    let (test_accuracy, test_macro_f1) = match test {
        Some(t) => {
            let m = evaluate(params, t).map_err(|_| Error::Diverged { epoch })?;
            (Some(m.accuracy), Some(m.macro_f1))
        }
        None => (None, None),
    };
    Ok(EpochMetrics {
        epoch,
        train_loss,
        test_accuracy,
        test_macro_f1,
        updated,
        skipped,
        relabeled: 0,
    })
}

/// Maps a numerical failure inside an epoch to the divergence error.
pub(crate) fn guard<T>(epoch: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidInput(_) => Error::Diverged { epoch },
        other => other,
    })
}

pub fn init_for(view: &TrainingView, config: &TrainConfig, seed_label: u64) -> Result<ModelParams> {
    let arch = config.arch.resolve(view.dim(), view.num_classes())?;
    Ok(init(arch, Rng::new(config.seed).fork(seed_label).next_u64()))
}

/// Trains on the observed labels of `view`.
///
/// Deterministic for a fixed config: per-epoch shuffles, mini-batch SGD with
/// the configured loss, re-weighting and procedure hooks. Two-model procedures
/// are delegated to [`crate::procedures`].
pub fn train(view: &TrainingView, config: &TrainConfig, test: Option<&LabeledDataset>) -> Result<TrainOutcome> {
    config.validate()?;
    if view.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
    }
    match &config.procedure {
        Some(ProcedureSpec::CoTeaching { .. }) => procedures::co_teaching_train(view, config, test),
        Some(ProcedureSpec::Disagreement) => procedures::disagreement_train(view, config, test),
        Some(ProcedureSpec::DualRelabel { .. }) => procedures::dual_relabel_train(view, config, test),
        _ => {
            let mut params = init_for(view, config, 0)?;
            if let Some(ProcedureSpec::NoiseAdaptation { init_diag }) = &config.procedure {
                params = params.attach_noise_layer(*init_diag);
            }
            let targets: Vec<Vec<f64>> = Vec::new();
            let history = train_loop(&mut params, view, &targets, config, test)?;
            Ok(TrainOutcome {
                params,
                history,
                store: None,
            })
        }
    }
}

/// Single-model SGD loop. `soft_targets`, when non-empty, replaces the hard
/// labels with per-sample target distributions.
pub(crate) fn train_loop(
    params: &mut ModelParams,
    view: &TrainingView,
    soft_targets: &[Vec<f64>],
    config: &TrainConfig,
    test: Option<&LabeledDataset>,
) -> Result<Vec<EpochMetrics>> {
    let loss = config.loss.prepare()?;
    let rng = Rng::new(config.seed).fork(0x7A1);
    let mut sample_rule = config
        .reweight
        .as_ref()
        .map(ReweightSpec::sample_rule)
        .transpose()?
        .flatten();
    let epoch_filter = config.reweight.as_ref().and_then(ReweightSpec::epoch_filter);
    let mixup_alpha = match config.procedure {
        Some(ProcedureSpec::Mixup { alpha }) => Some(alpha),
        _ => None,
    };
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut epoch_rng = rng.fork(epoch as u64);
        let active: Vec<usize> = match &epoch_filter {
            Some(f) if f.active(epoch) => guard(epoch, f.kept(params, view, &loss))?,
            _ => (0..view.len()).collect(),
        };
        let skipped_by_filter = view.len() - active.len();
        let mut order = active;
        epoch_rng.shuffle(&mut order);
        let mut losses = Vec::with_capacity(order.len());
        let (mut updated, mut skipped) = (0, skipped_by_filter);
        for batch in order.chunks(config.batch_size) {
            let mut total = Grads::zeros_like(params);
            let n = batch.len() as f64;
            if let Some(alpha) = mixup_alpha {
                let hard: Vec<(usize, Vec<f64>)> = batch
                    .iter()
                    .map(|&i| (i, target_vector(view, soft_targets, i)))
                    .collect();
                let mixed = procedures::mixup_batch(view, &hard, alpha, &mut epoch_rng)?;
                for (x, y) in &mixed {
                    let (l, g) = guard(epoch, sample_grad(params, &loss, x, Target::Soft(y)))?;
                    losses.push(l);
                    total.add_scaled(&g, 1.0 / n);
                    updated += 1;
                }
            } else {
                for &i in batch {
                    let target = if soft_targets.is_empty() {
                        Target::Hard(view.labels()[i])
                    } else {
                        Target::Soft(&soft_targets[i])
                    };
                    let (l, g) = guard(epoch, sample_grad(params, &loss, view.x(i), target))?;
                    losses.push(l);
                    let w = match sample_rule.as_mut() {
                        Some(rule) => {
                            if !l.is_finite() {
                                return Err(Error::Diverged { epoch });
                            }
                            let probs = guard(epoch, params.predict_proba(view.x(i)))?;
                            rule.weight(l, probs.as_slice(), view.labels()[i])?
                        }
                        None => 1.0,
                    };
                    if w == 0.0 {
                        skipped += 1;
                        continue;
                    }
                    updated += 1;
                    total.add_scaled(&g, w / n);
                }
            }
            params.apply_step(&total, config.learning_rate);
        }
        history.push(epoch_record(epoch, &losses, updated, skipped, params, test)?);
    }
    Ok(history)
}

fn target_vector(view: &TrainingView, soft: &[Vec<f64>], i: usize) -> Vec<f64> {
    if soft.is_empty() {
        ProbVector::one_hot(view.num_classes(), view.labels()[i]).into_vec()
    } else {
        soft[i].clone()
    }
}

/// Argmax predictions for every sample.
pub fn predict_labels(params: &ModelParams, ds: &LabeledDataset) -> Result<Vec<usize>> {
    Ok(predict_all(params, ds)?.iter().map(|p| argmax(p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use approx::assert_abs_diff_eq;

    fn random_point(d: usize, seed: u64) -> Vec<f64> {
        let mut rng = Rng::new(seed);
        (0..d).map(|_| rng.standard_normal()).collect()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = Arch::Mlp { d: 3, hidden: 5, k: 2 };
        let a = init(arch, 9);
        assert_eq!(a, init(arch, 9));
        assert_ne!(a, init(arch, 10));
        assert!(a.tensors[1].as_slice().iter().all(|b| *b == 0.0));
        assert!(a.tensors[3].as_slice().iter().all(|b| *b == 0.0));
        let lin = init(Arch::Linear { d: 2, k: 3 }, 0);
        assert_eq!((lin.tensors[0].rows(), lin.tensors[0].cols()), (2, 3));
    }

    #[test]
    fn forward_special_cases() {
        let mut lin = init(Arch::Linear { d: 2, k: 3 }, 0);
        lin.tensors[0] = Matrix::zeros(2, 3);
        let p = lin.predict_proba(&[1.0, -2.0]).unwrap();
        assert!(p.as_slice().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let mut mlp = init(Arch::Mlp { d: 2, hidden: 4, k: 3 }, 1);
        mlp.tensors[2] = Matrix::zeros(4, 3);
        mlp.tensors[3] = Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        for seed in 0..5 {
            assert_eq!(mlp.forward(&random_point(2, seed)).unwrap(), vec![0.5, -1.0, 2.0]);
        }
        assert!(matches!(mlp.forward(&[1.0]), Err(Error::Shape { .. })));
        let x = random_point(2, 3);
        assert_eq!(mlp.forward(&x).unwrap(), mlp.forward(&x).unwrap());
    }

    #[test]
    fn backward_closed_forms() {
        let lin = init(Arch::Linear { d: 3, k: 2 }, 4);
        let x = [1.0, -2.0, 0.5];
        assert!(lin.backward(&x, &[0.0, 0.0]).unwrap().is_zero());
        let g = lin.backward(&x, &[0.3, -0.7]).unwrap();
        for (r, xr) in x.iter().enumerate() {
            assert_abs_diff_eq!(g.tensors[0][(r, 0)], xr * 0.3, epsilon = 1e-15);
            assert_abs_diff_eq!(g.tensors[0][(r, 1)], xr * -0.7, epsilon = 1e-15);
        }
        assert!(lin.backward(&x, &[0.0]).is_err());
    }

    #[test]
    fn grad_check_core_losses() {
        let t = crate::noise::TransitionMatrix::from_rows(&[
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.25, 0.05, 0.7],
        ])
        .unwrap();
        for arch in [Arch::Linear { d: 4, k: 3 }, Arch::Mlp { d: 4, hidden: 6, k: 3 }] {
            let params = init(arch, 11);
            let x = random_point(4, 11);
            for loss in [LossSpec::Ce, LossSpec::Mae, LossSpec::Forward { t: Some(t.clone()) }] {
                let err = grad_check(&params, &x, 1, &loss, 1e-6).unwrap();
                assert!(err < 1e-5, "{arch:?} {loss:?}: {err}");
            }
        }
        let params = init(Arch::Linear { d: 2, k: 2 }, 0);
        assert!(grad_check(&params, &[0.0, 1.0], 0, &LossSpec::Ce, 1e-3).is_err());
    }

    #[test]
    fn noise_layer_forward_and_gradient() {
        let mut params = init(Arch::Linear { d: 2, k: 2 }, 3);
        // base probs exactly [1, 0] is unreachable through softmax; use huge bias instead
        params.tensors[0] = Matrix::zeros(2, 2);
        params.tensors[1] = Matrix::from_vec(1, 2, vec![50.0, -50.0]).unwrap();
        let mut layer = NoiseAdaptationLayer::identity_leaning(2, 0.5);
        layer.q = Matrix::from_rows(&[vec![0.8f64.ln(), 0.2f64.ln()], vec![0.3f64.ln(), 0.7f64.ln()]]).unwrap();
        params.noise_layer = Some(layer);
        let q = params.noisy_forward(&[0.3, 0.1]).unwrap();
        assert_abs_diff_eq!(q[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(q[1], 0.2, epsilon = 1e-12);

        let params = init(Arch::Mlp { d: 3, hidden: 5, k: 3 }, 5).attach_noise_layer(0.9);
        let t = params.noise_layer.as_ref().unwrap().transition();
        assert_abs_diff_eq!(t[(0, 0)], 0.9, epsilon = 1e-12);
        let err = grad_check(&params, &random_point(3, 8), 2, &LossSpec::Ce, 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn ensemble_disagreement_counts() {
        let make = |class: usize| {
            let mut p = init(Arch::Linear { d: 1, k: 3 }, 0);
            p.tensors[0] = Matrix::zeros(1, 3);
            let mut b = vec![0.0; 3];
            b[class] = 5.0;
            p.tensors[1] = Matrix::from_vec(1, 3, b).unwrap();
            p
        };
        let x = [0.0];
        assert_eq!(ensemble_disagreement(&[make(1), make(1), make(1)], &x).unwrap(), 0.0);
        let d = ensemble_disagreement(&[make(0), make(0), make(1), make(2)], &x).unwrap();
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-15);
        assert!(ensemble_disagreement(&[make(0)], &x).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let ds = gen_blobs(2, 20, 2, 4.0, 1).unwrap();
        let view = TrainingView::new(&ds);
        let config = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&view, &config, None).unwrap();
        assert_eq!(out.params, init_for(&view, &config, 0).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let ds = gen_blobs(2, 50, 2, 8.0, 1).unwrap();
        let view = TrainingView::new(&ds);
        let config = TrainConfig {
            epochs: 5,
            learning_rate: f64::MAX,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&view, &config, None), Err(Error::Diverged { .. })));
    }

    #[test]
    fn arch_spec_capacity_scaling() {
        let a = ArchSpec::mlp().scaled(0.8).resolve(2, 2).unwrap();
        let b = ArchSpec::mlp().scaled(1.25).resolve(2, 2).unwrap();
        assert_eq!(a, Arch::Mlp { d: 2, hidden: 26, k: 2 });
        assert_eq!(b, Arch::Mlp { d: 2, hidden: 40, k: 2 });
    }
}
