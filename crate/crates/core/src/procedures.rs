//! Training procedures: mixup, co-teaching, disagreement updates, dual-model
//! relabeling and iterative label cleaning.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, TrainingView};
use crate::error::{Error, Result};
use crate::losses::{soft_kl, Loss};
use crate::metrics::{flag_score, FlagScore};
use crate::model::{
    ensemble_disagreement, epoch_record, guard, init, init_for, predict_all, sample_grad, train, train_loop, ArchSpec,
    EpochMetrics, Grads, ModelParams, Target, TrainConfig, TrainOutcome,
};
use crate::numerics::{argmax, sample_beta, Matrix, ProbVector, Rng};
use crate::par;

fn default_alpha() -> f64 {
    0.2
}

fn default_co_warmup() -> usize {
    5
}

fn default_co_ramp() -> usize {
    10
}

fn default_small() -> f64 {
    0.8
}

fn default_large() -> f64 {
    1.25
}

fn default_relabel_warmup() -> usize {
    5
}

fn default_init_diag() -> f64 {
    0.9
}

/// Procedure selector carried by [`TrainConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcedureSpec {
    Mixup {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    /// Keep fraction is 1 for `warmup_epochs`, then decays linearly to
    /// `1 − rho_hat` over `ramp_epochs`.
    CoTeaching {
        rho_hat: f64,
        #[serde(default = "default_co_warmup")]
        warmup_epochs: usize,
        #[serde(default = "default_co_ramp")]
        ramp_epochs: usize,
    },
    Disagreement,
    /// Two models with hidden widths scaled by `small_scale` and `large_scale`.
    /// Both first train on the stored labels alone for `warmup_epochs`.
    DualRelabel {
        #[serde(default = "default_small")]
        small_scale: f64,
        #[serde(default = "default_large")]
        large_scale: f64,
        #[serde(default = "default_relabel_warmup")]
        warmup_epochs: usize,
    },
    NoiseAdaptation {
        #[serde(default = "default_init_diag")]
        init_diag: f64,
    },
}

impl ProcedureSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ProcedureSpec::Mixup { .. } => "mixup",
            ProcedureSpec::CoTeaching { .. } => "co_teaching",
            ProcedureSpec::Disagreement => "disagreement",
            ProcedureSpec::DualRelabel { .. } => "dual_relabel",
            ProcedureSpec::NoiseAdaptation { .. } => "noise_adaptation",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        match *self {
            ProcedureSpec::Mixup { alpha } if !(alpha > 0.0) || !alpha.is_finite() => {
                bad(format!("mixup alpha must be positive, got {alpha}"))
            }
            ProcedureSpec::CoTeaching { rho_hat, .. } if !(0.0..1.0).contains(&rho_hat) => {
                bad(format!("co-teaching rho_hat must lie in [0,1), got {rho_hat}"))
            }
            ProcedureSpec::DualRelabel {
                small_scale,
                large_scale,
                warmup_epochs,
            } => {
                if !(small_scale > 0.0) || !(large_scale > 0.0) {
                    bad("dual relabel capacity scales must be positive".into())
                } else if warmup_epochs == 0 {
                    bad("dual relabel needs warmup_epochs >= 1".into())
                } else {
                    Ok(())
                }
            }
            ProcedureSpec::NoiseAdaptation { init_diag } if !(init_diag > 0.0 && init_diag < 1.0) => {
                bad(format!("init_diag must lie in (0,1), got {init_diag}"))
            }
            _ => Ok(()),
        }
    }

    /// Procedures that train two peer models.
    pub fn is_multi_model(&self) -> bool {
        matches!(
            self,
            ProcedureSpec::CoTeaching { .. } | ProcedureSpec::Disagreement | ProcedureSpec::DualRelabel { .. }
        )
    }
}

// ---------------------------------------------------------------------------
// label store

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoredLabel {
    Hard { class: usize },
    Soft { probs: ProbVector },
}

impl StoredLabel {
    /// Class index; argmax for soft labels.
    pub fn class(&self) -> usize {
        match self {
            StoredLabel::Hard { class } => *class,
            StoredLabel::Soft { probs } => probs.argmax(),
        }
    }

    pub fn to_vector(&self, k: usize) -> Vec<f64> {
        match self {
            StoredLabel::Hard { class } => ProbVector::one_hot(k, *class).into_vec(),
            StoredLabel::Soft { probs } => probs.as_slice().to_vec(),
        }
    }

    /// Cross-entropy for hard labels, `KL(label ‖ p̂)` for soft ones.
    pub fn loss(&self, loss: &Loss, probs: &[f64]) -> f64 {
        match self {
            StoredLabel::Hard { class } => loss.value(probs, *class),
            StoredLabel::Soft { probs: q } => soft_kl(probs, q.as_slice()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelSource {
    ModelA,
    ModelB,
    Both,
    Cleaner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Relabeled { epoch: usize, source: RelabelSource },
}

impl Provenance {
    fn epoch(&self) -> usize {
        match self {
            Provenance::Original => 0,
            Provenance::Relabeled { epoch, .. } => *epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub label: StoredLabel,
    pub provenance: Provenance,
}

/// Per-sample label state with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelStore {
    pub num_classes: usize,
    pub entries: Vec<StoreEntry>,
}

impl SoftLabelStore {
    pub fn from_labels(labels: &[usize], k: usize) -> Self {
        Self {
            num_classes: k,
            entries: labels
                .iter()
                .map(|&class| StoreEntry {
                    label: StoredLabel::Hard { class },
                    provenance: Provenance::Original,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &StoredLabel {
        &self.entries[i].label
    }

    /// Replaces entry `i`. Provenance may only move forward in epoch.
    pub fn relabel(&mut self, i: usize, label: StoredLabel, epoch: usize, source: RelabelSource) -> Result<()> {
        let e = &mut self.entries[i];
        if epoch < e.provenance.epoch() || epoch == 0 {
            return Err(Error::InvalidInput(format!(
                "relabel of sample {i} at epoch {epoch} would move provenance backwards"
            )));
        }
        if let StoredLabel::Soft { probs } = &label {
            if probs.len() != self.num_classes {
                return Err(Error::Shape {
                    expected: format!("soft label of length {}", self.num_classes),
                    got: format!("{}", probs.len()),
                });
            }
        }
        e.label = label;
        e.provenance = Provenance::Relabeled { epoch, source };
        Ok(())
    }

    /// Hard class of each entry (argmax for soft entries).
    pub fn classes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label.class()).collect()
    }

    pub fn target_vectors(&self) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|e| e.label.to_vector(self.num_classes))
            .collect()
    }

    /// Fraction of entries whose class equals `truth`.
    pub fn agreement(&self, truth: &[usize]) -> f64 {
        let hits = self.classes().iter().zip(truth).filter(|(a, b)| a == b).count();
        hits as f64 / self.len().max(1) as f64
    }

    pub fn relabeled_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.provenance != Provenance::Original)
            .count()
    }
}

// ---------------------------------------------------------------------------
// mixup

/// `(λ·x_i + (1−λ)·x_j, λ·y_i + (1−λ)·y_j)`
pub fn mixup_pair(xi: &[f64], yi: &[f64], xj: &[f64], yj: &[f64], lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mix =
        |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| lambda * u + (1.0 - lambda) * v).collect() };
    (mix(xi, xj), mix(yi, yj))
}

/// Mixes a batch against a seeded shuffle of itself with one `λ ~ Beta(α, α)`
/// per pair. `batch` holds `(sample index, target distribution)`.
pub fn mixup_batch(
    view: &TrainingView,
    batch: &[(usize, Vec<f64>)],
    alpha: f64,
    rng: &mut Rng,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "mixup alpha must be positive, got {alpha}"
        )));
    }
    let partner = rng.permutation(batch.len());
    batch
        .iter()
        .zip(&partner)
        .map(|((i, yi), &p)| {
            let (j, yj) = &batch[p];
            let lambda = sample_beta(alpha, rng)?;
            Ok(mixup_pair(view.x(*i), yi, view.x(*j), yj, lambda))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// two-model procedures

/// Positions of the `round(keep·n)` smallest losses (at least one), in batch
/// order. Ties keep the earlier sample.
pub fn small_loss_selection(losses: &[f64], keep_fraction: f64) -> Vec<usize> {
    let n = losses.len();
    let m = ((keep_fraction * n as f64).round() as usize).clamp(1.min(n), n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
    let mut kept = order[..m].to_vec();
    kept.sort_unstable();
    kept
}

/// Update mask for disagreement training. Sees predictions only.
pub fn disagreement_mask(pred_a: &[usize], pred_b: &[usize]) -> Vec<bool> {
    pred_a.iter().zip(pred_b).map(|(a, b)| a != b).collect()
}

/// Co-teaching keep fraction for a 1-based epoch.
pub fn co_teaching_keep(epoch: usize, rho_hat: f64, warmup: usize, ramp: usize) -> f64 {
    if epoch <= warmup {
        return 1.0;
    }
    let progress = if ramp == 0 {
        1.0
    } else {
        ((epoch - warmup) as f64 / ramp as f64).min(1.0)
    };
    1.0 - rho_hat * progress
}

/// Mean gradient of the hard-label loss over `indices`; zero when empty.
fn mean_grad(params: &ModelParams, loss: &Loss, view: &TrainingView, indices: &[usize]) -> Result<Grads> {
    let mut total = Grads::zeros_like(params);
    for &i in indices {
        let (_, g) = sample_grad(params, loss, view.x(i), Target::Hard(view.labels()[i]))?;
        total.add_scaled(&g, 1.0 / indices.len() as f64);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Batch indices model A was updated on.
    pub a_updated: Vec<usize>,
    pub b_updated: Vec<usize>,
    /// Model A's losses on the batch before the step.
    pub losses: Vec<f64>,
}

/// One co-teaching step: each model ranks the batch by its own loss and the
/// peer updates on the `keep_fraction` smallest. Both selections are made
/// before either model changes.
pub fn co_teach_step(
    a: &mut ModelParams,
    b: &mut ModelParams,
    view: &TrainingView,
    batch: &[usize],
    keep_fraction: f64,
    loss: &Loss,
    learning_rate: f64,
) -> Result<StepStats> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "keep_fraction must lie in (0,1], got {keep_fraction}"
        )));
    }
    let losses_of = |m: &ModelParams| -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|&i| Ok(loss.value(m.predict_proba(view.x(i))?.as_slice(), view.labels()[i])))
            .collect()
    };
    let la = losses_of(a)?;
    let lb = losses_of(b)?;
    let pick = |l: &[f64]| -> Vec<usize> {
        small_loss_selection(l, keep_fraction)
            .into_iter()
            .map(|p| batch[p])
            .collect()
    };
    let chosen_by_a = pick(&la);
    let chosen_by_b = pick(&lb);
    let ga = mean_grad(a, loss, view, &chosen_by_b)?;
    let gb = mean_grad(b, loss, view, &chosen_by_a)?;
    a.apply_step(&ga, learning_rate);
    b.apply_step(&gb, learning_rate);
    Ok(StepStats {
        a_updated: chosen_by_b,
        b_updated: chosen_by_a,
        losses: la,
    })
}

/// One disagreement step: both models update only on samples where their
/// argmax predictions differ (predictions taken before the update).
pub fn disagreement_step(
    a: &mut ModelParams,
    b: &mut ModelParams,
    view: &TrainingView,
    batch: &[usize],
    loss: &Loss,
    learning_rate: f64,
) -> Result<StepStats> {
    if a.num_classes() != b.num_classes() {
        return Err(Error::InvalidInput("peer models disagree on K".into()));
    }
    let preds = |m: &ModelParams| -> Result<Vec<usize>> { batch.iter().map(|&i| m.predict(view.x(i))).collect() };
    let mask = disagreement_mask(&preds(a)?, &preds(b)?);
    let chosen: Vec<usize> = batch.iter().zip(&mask).filter(|(_, m)| **m).map(|(i, _)| *i).collect();
    let losses = batch
        .iter()
        .map(|&i| Ok(loss.value(a.predict_proba(view.x(i))?.as_slice(), view.labels()[i])))
        .collect::<Result<Vec<_>>>()?;
    if !chosen.is_empty() {
        let ga = mean_grad(a, loss, view, &chosen)?;
        let gb = mean_grad(b, loss, view, &chosen)?;
        a.apply_step(&ga, learning_rate);
        b.apply_step(&gb, learning_rate);
    }
    Ok(StepStats {
        a_updated: chosen.clone(),
        b_updated: chosen,
        losses,
    })
}

fn two_models(view: &TrainingView, config: &TrainConfig) -> Result<(ModelParams, ModelParams)> {
    Ok((init_for(view, config, 1)?, init_for(view, config, 2)?))
}

fn peer_loop<F>(
    view: &TrainingView,
    config: &TrainConfig,
    test: Option<&LabeledDataset>,
    label: u64,
    mut step: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &mut ModelParams, &mut ModelParams, &[usize]) -> Result<StepStats>,
{
    let (mut a, mut b) = two_models(view, config)?;
    let rng = Rng::new(config.seed).fork(label);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let order = rng.fork(epoch as u64).permutation(view.len());
        let mut losses = Vec::with_capacity(view.len());
        let mut updated = 0;
        for batch in order.chunks(config.batch_size) {
            let s = guard(epoch, step(epoch, &mut a, &mut b, batch))?;
            updated += s.a_updated.len();
            losses.extend(s.losses);
        }
        history.push(epoch_record(epoch, &losses, updated, view.len() - updated, &a, test)?);
    }
    Ok(TrainOutcome {
        params: a,
        history,
        store: None,
    })
}

/// Co-teaching over the whole training set. Returns model A.
pub fn co_teaching_train(
    view: &TrainingView,
    config: &TrainConfig,
    test: Option<&LabeledDataset>,
) -> Result<TrainOutcome> {
    let Some(ProcedureSpec::CoTeaching {
        rho_hat,
        warmup_epochs,
        ramp_epochs,
    }) = config.procedure
    else {
        return Err(Error::Validation("co-teaching config expected".into()));
    };
    let loss = config.loss.prepare()?;
    peer_loop(view, config, test, 0xC07, |epoch, a, b, batch| {
        let keep = co_teaching_keep(epoch, rho_hat, warmup_epochs, ramp_epochs);
        co_teach_step(a, b, view, batch, keep, &loss, config.learning_rate)
    })
}

/// Disagreement-only training. Returns model A.
pub fn disagreement_train(
    view: &TrainingView,
    config: &TrainConfig,
    test: Option<&LabeledDataset>,
) -> Result<TrainOutcome> {
    let loss = config.loss.prepare()?;
    peer_loop(view, config, test, 0xD15, |_, a, b, batch| {
        disagreement_step(a, b, view, batch, &loss, config.learning_rate)
    })
}

// ---------------------------------------------------------------------------
// dual-model relabeling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabelStats {
    pub epoch: usize,
    pub by_a: usize,
    pub by_b: usize,
    pub by_both: usize,
}

fn predicted_target(m: &ModelParams, x: &[f64]) -> Result<(ProbVector, usize)> {
    let p = m.predict_proba(x)?;
    let c = p.argmax();
    Ok((p, c))
}

/// Trains `own` for one step on each sample's lower-loss target: the stored
/// label or the peer's predicted class.
fn relabel_train_step(
    own: &mut ModelParams,
    peer: &ModelParams,
    view: &TrainingView,
    store: &SoftLabelStore,
    batch: &[usize],
    loss: &Loss,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut total = Grads::zeros_like(own);
    let mut losses = Vec::with_capacity(batch.len());
    for &i in batch {
        let x = view.x(i);
        let p = own.predict_proba(x)?;
        let stored = store.get(i);
        let stored_loss = stored.loss(loss, p.as_slice());
        let (_, peer_class) = predicted_target(peer, x)?;
        let peer_loss = loss.value(p.as_slice(), peer_class);
        let (l, g) = if peer_loss < stored_loss {
            sample_grad(own, loss, x, Target::Hard(peer_class))?
        } else {
            match stored {
                StoredLabel::Hard { class } => sample_grad(own, loss, x, Target::Hard(*class))?,
                StoredLabel::Soft { probs } => sample_grad(own, loss, x, Target::Soft(probs.as_slice()))?,
            }
        };
        losses.push(l);
        total.add_scaled(&g, 1.0 / batch.len() as f64);
    }
    own.apply_step(&total, lr);
    Ok(losses)
}

/// End-of-epoch relabeling rule.
///
/// A model's prediction "wins" when its argmax class has lower loss under that
/// model than the stored label. One winner: store its class (hard). Two
/// winners: store the mean of both predicted distributions (soft).
pub fn relabel_store(
    a: &ModelParams,
    b: &ModelParams,
    view: &TrainingView,
    store: &mut SoftLabelStore,
    loss: &Loss,
    epoch: usize,
) -> Result<RelabelStats> {
    let decisions = par::map_range(view.len(), |i| -> Result<Option<(StoredLabel, RelabelSource)>> {
        let x = view.x(i);
        let stored = store.get(i);
        let (pa, ca) = predicted_target(a, x)?;
        let (pb, cb) = predicted_target(b, x)?;
        let a_wins = loss.value(pa.as_slice(), ca) < stored.loss(loss, pa.as_slice());
        let b_wins = loss.value(pb.as_slice(), cb) < stored.loss(loss, pb.as_slice());
        Ok(match (a_wins, b_wins) {
            (true, true) => Some((
                StoredLabel::Soft {
                    probs: ProbVector::mix(&pa, &pb, 0.5),
                },
                RelabelSource::Both,
            )),
            (true, false) => Some((StoredLabel::Hard { class: ca }, RelabelSource::ModelA)),
            (false, true) => Some((StoredLabel::Hard { class: cb }, RelabelSource::ModelB)),
            (false, false) => None,
        })
    });
    let mut stats = RelabelStats {
        epoch,
        by_a: 0,
        by_b: 0,
        by_both: 0,
    };
    for (i, d) in decisions.into_iter().enumerate() {
        if let Some((label, source)) = d? {
            match source {
                RelabelSource::ModelA => stats.by_a += 1,
                RelabelSource::ModelB => stats.by_b += 1,
                _ => stats.by_both += 1,
            }
            store.relabel(i, label, epoch, source)?;
        }
    }
    Ok(stats)
}

/// One epoch of dual-model training followed by the relabeling rule
/// (skipped when `relabel` is false).
#[allow(clippy::too_many_arguments)]
pub fn dual_relabel_epoch(
    a: &mut ModelParams,
    b: &mut ModelParams,
    view: &TrainingView,
    store: &mut SoftLabelStore,
    epoch: usize,
    config: &TrainConfig,
    relabel: bool,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Option<RelabelStats>)> {
    if store.len() != view.len() {
        return Err(Error::Shape {
            expected: format!("store of {} entries", view.len()),
            got: format!("{}", store.len()),
        });
    }
    let loss = config.loss.prepare()?;
    let order = rng.permutation(view.len());
    let mut losses = Vec::with_capacity(view.len());
    for batch in order.chunks(config.batch_size) {
        // both targets are chosen against the peer as it was before this batch
        let (a_before, b_before) = (a.clone(), b.clone());
        losses.extend(relabel_train_step(
            a,
            &b_before,
            view,
            store,
            batch,
            &loss,
            config.learning_rate,
        )?);
        relabel_train_step(b, &a_before, view, store, batch, &loss, config.learning_rate)?;
    }
    let stats = if relabel {
        Some(relabel_store(a, b, view, store, &loss, epoch)?)
    } else {
        None
    };
    Ok((losses, stats))
}

/// One epoch of plain SGD on the stored labels.
pub fn store_epoch(
    model: &mut ModelParams,
    view: &TrainingView,
    store: &SoftLabelStore,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let loss = config.loss.prepare()?;
    let order = rng.permutation(view.len());
    let mut losses = Vec::with_capacity(view.len());
    for batch in order.chunks(config.batch_size) {
        let mut total = Grads::zeros_like(model);
        for &i in batch {
            let target = match store.get(i) {
                StoredLabel::Hard { class } => Target::Hard(*class),
                StoredLabel::Soft { probs } => Target::Soft(probs.as_slice()),
            };
            let (l, g) = sample_grad(model, &loss, view.x(i), target)?;
            losses.push(l);
            total.add_scaled(&g, 1.0 / batch.len() as f64);
        }
        model.apply_step(&total, config.learning_rate);
    }
    Ok(losses)
}

/// Dual-model relabeling over `config.epochs`: `warmup_epochs` of plain
/// training on the noisy labels, then [`dual_relabel_epoch`] with relabeling.
/// Returns the larger model (B) and the final store.
pub fn dual_relabel_train(
    view: &TrainingView,
    config: &TrainConfig,
    test: Option<&LabeledDataset>,
) -> Result<TrainOutcome> {
    let Some(ProcedureSpec::DualRelabel {
        small_scale,
        large_scale,
        warmup_epochs,
    }) = config.procedure
    else {
        return Err(Error::Validation("dual relabel config expected".into()));
    };
    let (d, k) = (view.dim(), view.num_classes());
    let seeds = Rng::new(config.seed);
    let mut a = init(config.arch.scaled(small_scale).resolve(d, k)?, seeds.fork(1).next_u64());
    let mut b = init(config.arch.scaled(large_scale).resolve(d, k)?, seeds.fork(2).next_u64());
    let mut store = SoftLabelStore::from_labels(view.labels(), k);
    let rng = Rng::new(config.seed).fork(0xD0A1);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut epoch_rng = rng.fork(epoch as u64);
        let (losses, changed) = if epoch <= warmup_epochs {
            let losses = guard(epoch, store_epoch(&mut a, view, &store, config, &mut epoch_rng))?;
            guard(epoch, store_epoch(&mut b, view, &store, config, &mut epoch_rng))?;
            (losses, 0)
        } else {
            let (losses, stats) = guard(
                epoch,
                dual_relabel_epoch(&mut a, &mut b, view, &mut store, epoch, config, true, &mut epoch_rng),
            )?;
            (losses, stats.map_or(0, |s| s.by_a + s.by_b + s.by_both))
        };
        let mut record = epoch_record(epoch, &losses, view.len(), 0, &b, test)?;
        record.relabeled = changed;
        history.push(record);
    }
    Ok(TrainOutcome {
        params: b,
        history,
        store: Some(store),
    })
}

// ---------------------------------------------------------------------------
// iterative cleaning

/// Per-sample inputs of the cleaning meta-classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleaningMetaFeatures {
    pub loss: f64,
    pub max_prob: f64,
    /// Top-1 minus top-2 probability.
    pub margin: f64,
    pub disagreement: f64,
    /// Distance to the centroid of the sample's observed class.
    pub centroid_distance: f64,
}

impl CleaningMetaFeatures {
    pub const COUNT: usize = 5;

    pub fn to_array(&self) -> [f64; Self::COUNT] {
        [
            self.loss,
            self.max_prob,
            self.margin,
            self.disagreement,
            self.centroid_distance,
        ]
    }
}

/// Meta-features of every sample of `ds` against its observed labels.
/// `ensemble[0]` is the base model; the rest feed the disagreement feature.
pub fn meta_features(
    ensemble: &[ModelParams],
    ds: &LabeledDataset,
    centroids: &Matrix,
    loss: &Loss,
) -> Result<Vec<CleaningMetaFeatures>> {
    par::map_range(ds.len(), |i| {
        let x = ds.x(i);
        let y = ds.labels()[i];
        let p = ensemble[0].predict_proba(x)?;
        let mut sorted = p.as_slice().to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let disagreement = if ensemble.len() >= 2 {
            ensemble_disagreement(ensemble, x)?
        } else {
            0.0
        };
        let centroid_distance = x
            .iter()
            .zip(centroids.row(y))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        Ok(CleaningMetaFeatures {
            loss: loss.value(p.as_slice(), y),
            max_prob: sorted[0],
            margin: sorted[0] - sorted.get(1).copied().unwrap_or(0.0),
            disagreement,
            centroid_distance,
        })
    })
    .into_iter()
    .collect()
}

/// Logistic regression on standardised meta-features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaClassifier {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub params: ModelParams,
}

impl MetaClassifier {
    fn standardize(&self, f: &CleaningMetaFeatures) -> Vec<f64> {
        f.to_array()
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Estimated probability that the observed label is wrong.
    pub fn flip_probability(&self, f: &CleaningMetaFeatures) -> Result<f64> {
        Ok(self.params.predict_proba(&self.standardize(f))?[1])
    }

    /// Fits on features with targets `1[observed ≠ true]`.
    pub fn fit(features: &[CleaningMetaFeatures], targets: &[bool], config: &TrainConfig) -> Result<Self> {
        if features.is_empty() || features.len() != targets.len() {
            return Err(Error::InvalidInput(
                "meta-classifier needs matching non-empty features and targets".into(),
            ));
        }
        let n = features.len() as f64;
        let rows: Vec<[f64; CleaningMetaFeatures::COUNT]> = features.iter().map(|f| f.to_array()).collect();
        let mut mean = vec![0.0; CleaningMetaFeatures::COUNT];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let scale: Vec<f64> = (0..CleaningMetaFeatures::COUNT)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var.sqrt() > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut out = Self {
            mean,
            scale,
            params: init(
                crate::model::Arch::Linear {
                    d: CleaningMetaFeatures::COUNT,
                    k: 2,
                },
                config.seed,
            ),
        };
        let data: Vec<f64> = features.iter().flat_map(|f| out.standardize(f)).collect();
        let ds = LabeledDataset::new(
            Matrix::from_vec(features.len(), CleaningMetaFeatures::COUNT, data)?,
            targets.iter().map(|&t| t as usize).collect(),
            2,
        )?;
        let meta_config = TrainConfig {
            arch: ArchSpec::Linear,
            reweight: None,
            procedure: None,
            ..config.clone()
        };
        out.params = train(&TrainingView::from(ds), &meta_config, None)?.params;
        Ok(out)
    }
}

fn default_rounds() -> usize {
    3
}

fn default_threshold() -> f64 {
    0.5
}

fn default_ensemble() -> usize {
    3
}

fn default_meta_train() -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 32,
        learning_rate: 0.1,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanConfig {
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Models trained per round; the first is the base model.
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    #[serde(default = "default_meta_train")]
    pub meta_train: TrainConfig,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            rounds: default_rounds(),
            threshold: default_threshold(),
            ensemble_size: default_ensemble(),
            meta_train: default_meta_train(),
        }
    }
}

impl CleanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Validation("cleaning needs at least one round".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Validation(format!(
                "threshold must lie in [0,1], got {}",
                self.threshold
            )));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Validation("ensemble_size must be >= 1".into()));
        }
        self.meta_train.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub flagged: usize,
    /// Flagged samples whose label actually changed.
    pub relabeled: usize,
}

#[derive(Debug, Clone)]
pub struct CleanOutcome {
    pub store: SoftLabelStore,
    /// Samples flagged in any round.
    pub flags: Vec<bool>,
    pub meta: MetaClassifier,
    pub rounds: Vec<RoundStats>,
    /// Base model trained on the final cleaned labels.
    pub params: ModelParams,
    pub history: Vec<EpochMetrics>,
}

fn train_ensemble(view: &TrainingView, config: &TrainConfig, size: usize, round: usize) -> Result<Vec<ModelParams>> {
    par::map_range(size, |m| {
        let cfg = TrainConfig {
            seed: Rng::new(config.seed).fork(round as u64).fork(m as u64).next_u64(),
            ..config.clone()
        };
        if m == 0 {
            // the base model keeps the caller's seed in round 1 so it matches plain training
            let cfg = if round == 1 { config.clone() } else { cfg };
            return train(view, &cfg, None).map(|o| o.params);
        }
        train(view, &cfg, None).map(|o| o.params)
    })
    .into_iter()
    .collect()
}

/// Iterative label cleaning with a meta-classifier trained on a small set
/// whose true labels are known.
///
/// Each round trains the base model (plus ensemble peers) on the current
/// labels, fits the meta-classifier on `clean_small` with targets
/// `1[observed ≠ true]`, and replaces every flagged noisy label with the base
/// model's prediction. A final model is trained on the cleaned labels.
pub fn iterative_clean(
    noisy: &TrainingView,
    clean_small: &LabeledDataset,
    train_config: &TrainConfig,
    config: &CleanConfig,
    test: Option<&LabeledDataset>,
) -> Result<CleanOutcome> {
    config.validate()?;
    train_config.validate()?;
    let truth = clean_small
        .true_labels()
        .ok_or_else(|| Error::InvalidInput("the trusted set needs true labels".into()))?;
    if clean_small.is_empty() {
        return Err(Error::InvalidInput("the trusted set is empty".into()));
    }
    if clean_small.dim() != noisy.dim() || clean_small.num_classes() != noisy.num_classes() {
        return Err(Error::Shape {
            expected: format!("trusted set with d={} and K={}", noisy.dim(), noisy.num_classes()),
            got: format!("d={} and K={}", clean_small.dim(), clean_small.num_classes()),
        });
    }
    let meta_targets: Vec<bool> = clean_small.labels().iter().zip(truth).map(|(o, t)| o != t).collect();
    let loss = train_config.loss.prepare()?;
    let k = noisy.num_classes();
    let mut store = SoftLabelStore::from_labels(noisy.labels(), k);
    let mut current = noisy.clone();
    let mut flags = vec![false; noisy.len()];
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut meta = None;
    for round in 1..=config.rounds {
        let ensemble = train_ensemble(&current, train_config, config.ensemble_size, round)?;
        let centroids = current.centroids(current.labels());
        let trusted_features = meta_features(&ensemble, clean_small, &centroids, &loss)?;
        let m = MetaClassifier::fit(&trusted_features, &meta_targets, &config.meta_train)?;
        let features = meta_features(&ensemble, &current, &centroids, &loss)?;
        let mut labels = current.labels().to_vec();
        let mut stats = RoundStats {
            round,
            flagged: 0,
            relabeled: 0,
        };
        for (i, f) in features.iter().enumerate() {
            if m.flip_probability(f)? > config.threshold {
                stats.flagged += 1;
                flags[i] = true;
                let pred = ensemble[0].predict(current.x(i))?;
                if pred != labels[i] {
                    labels[i] = pred;
                    stats.relabeled += 1;
                    store.relabel(i, StoredLabel::Hard { class: pred }, round, RelabelSource::Cleaner)?;
                }
            }
        }
        current = current.relabeled(labels)?;
        rounds.push(stats);
        meta = Some(m);
    }
    let final_config = TrainConfig {
        procedure: None,
        reweight: None,
        ..train_config.clone()
    };
    let mut params = init_for(&current, &final_config, 0)?;
    let history = train_loop(&mut params, &current, &[], &final_config, test)?;
    Ok(CleanOutcome {
        store,
        flags,
        meta: meta.expect("at least one round"),
        rounds,
        params,
        history,
    })
}

/// Precision and recall of cleaning flags against the hidden flip indicators.
pub fn label_recovery(flags: &[bool], flipped: &[bool]) -> FlagScore {
    flag_score(flags, flipped)
}

/// Argmax of each row, lowest index on ties.
pub fn hard_labels(probs: &[Vec<f64>]) -> Vec<usize> {
    probs.iter().map(|p| argmax(p)).collect()
}

/// Clean-label predictions of `params` for every sample of `view`.
pub fn model_labels(params: &ModelParams, view: &TrainingView) -> Result<Vec<usize>> {
    Ok(hard_labels(&predict_all(params, view)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::model::Arch;
    use approx::assert_abs_diff_eq;

    fn constant_model(d: usize, k: usize, class: usize) -> ModelParams {
        let mut p = init(Arch::Linear { d, k }, 0);
        p.tensors[0] = Matrix::zeros(d, k);
        let mut b = vec![0.0; k];
        b[class] = 10.0;
        p.tensors[1] = Matrix::from_vec(1, k, b).unwrap();
        p
    }

    #[test]
    fn mixup_endpoints_and_convexity() {
        let (x, y) = mixup_pair(&[0.0, 0.0], &[1.0, 0.0], &[2.0, 4.0], &[0.0, 1.0], 0.5);
        assert_eq!(x, vec![1.0, 2.0]);
        assert_eq!(y, vec![0.5, 0.5]);
        let (x, y) = mixup_pair(&[5.0], &[1.0, 0.0], &[2.0], &[0.0, 1.0], 0.0);
        assert_eq!((x, y), (vec![2.0], vec![0.0, 1.0]));
    }

    #[test]
    fn mixup_batch_outputs_are_distributions() {
        let ds = gen_blobs(3, 10, 2, 4.0, 1).unwrap();
        let view = TrainingView::new(&ds);
        let batch: Vec<(usize, Vec<f64>)> = (0..8)
            .map(|i| (i * 3, ProbVector::one_hot(3, ds.labels()[i * 3]).into_vec()))
            .collect();
        let mut rng = Rng::new(4);
        let out = mixup_batch(&view, &batch, 0.2, &mut rng).unwrap();
        assert_eq!(out.len(), 8);
        for (_, y) in &out {
            ProbVector::new(y.clone()).unwrap();
        }
        assert!(mixup_batch(&view, &batch, 0.0, &mut rng).is_err());
    }

    #[test]
    fn small_loss_selection_counts() {
        let l = [0.9, 0.1, 0.5, 0.3, 0.8, 0.2, 0.7, 0.4];
        assert_eq!(small_loss_selection(&l, 0.5), vec![1, 3, 5, 7]);
        assert_eq!(small_loss_selection(&l, 1.0).len(), 8);
        assert_eq!(small_loss_selection(&[0.3, 0.3], 0.5), vec![0]);
    }

    #[test]
    fn keep_schedule() {
        assert_eq!(co_teaching_keep(5, 0.4, 5, 10), 1.0);
        assert_abs_diff_eq!(co_teaching_keep(10, 0.4, 5, 10), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(co_teaching_keep(30, 0.4, 5, 10), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn co_teach_full_keep_is_plain_sgd() {
        let ds = gen_blobs(2, 8, 2, 4.0, 2).unwrap();
        let view = TrainingView::new(&ds);
        let loss = crate::losses::LossSpec::Ce.prepare().unwrap();
        let a0 = init(Arch::Linear { d: 2, k: 2 }, 1);
        let b0 = init(Arch::Linear { d: 2, k: 2 }, 2);
        let batch: Vec<usize> = (0..8).collect();
        let (mut a, mut b) = (a0.clone(), b0.clone());
        let s = co_teach_step(&mut a, &mut b, &view, &batch, 1.0, &loss, 0.1).unwrap();
        assert_eq!(s.a_updated.len(), 8);
        let mut plain = a0.clone();
        plain.apply_step(&mean_grad(&a0, &loss, &view, &batch).unwrap(), 0.1);
        assert_eq!(a, plain);
        let (mut a, mut b) = (a0, b0);
        let s = co_teach_step(&mut a, &mut b, &view, &batch, 0.5, &loss, 0.1).unwrap();
        assert_eq!((s.a_updated.len(), s.b_updated.len()), (4, 4));
    }

    #[test]
    fn disagreement_updates() {
        let ds = gen_blobs(2, 4, 2, 4.0, 2).unwrap();
        let view = TrainingView::new(&ds);
        let loss = crate::losses::LossSpec::Ce.prepare().unwrap();
        let batch: Vec<usize> = (0..8).collect();
        let m = init(Arch::Linear { d: 2, k: 2 }, 1);
        let (mut a, mut b) = (m.clone(), m.clone());
        let s = disagreement_step(&mut a, &mut b, &view, &batch, &loss, 0.1).unwrap();
        assert!(s.a_updated.is_empty());
        assert_eq!(a, m);
        let (mut a, mut b) = (constant_model(2, 2, 0), constant_model(2, 2, 1));
        let s = disagreement_step(&mut a, &mut b, &view, &batch, &loss, 0.1).unwrap();
        assert_eq!(s.a_updated.len(), 8);
        assert_eq!(disagreement_mask(&[0, 1, 2], &[0, 2, 2]), vec![false, true, false]);
    }

    #[test]
    fn relabel_rule() {
        let ds = gen_blobs(3, 2, 2, 4.0, 2).unwrap();
        let view = TrainingView::new(&ds);
        let loss = crate::losses::LossSpec::Ce.prepare().unwrap();
        let a = constant_model(2, 3, 2);
        let b = constant_model(2, 3, 2);
        let mut store = SoftLabelStore::from_labels(&[2; 6], 3);
        relabel_store(&a, &b, &view, &mut store, &loss, 1).unwrap();
        assert_eq!(store.relabeled_count(), 0);

        let mut store = SoftLabelStore::from_labels(&[0; 6], 3);
        let s = relabel_store(&a, &b, &view, &mut store, &loss, 1).unwrap();
        assert_eq!(s.by_both, 6);
        assert!(matches!(store.get(0), StoredLabel::Soft { .. }));
        assert_eq!(store.classes(), vec![2; 6]);

        let mut store = SoftLabelStore::from_labels(&[0; 6], 3);
        let s = relabel_store(&a, &constant_model(2, 3, 0), &view, &mut store, &loss, 1).unwrap();
        assert_eq!(s.by_a, 6);
        assert_eq!(store.get(0), &StoredLabel::Hard { class: 2 });
    }

    #[test]
    fn dual_relabel_warmup_leaves_store_untouched() {
        let ds = gen_blobs(3, 40, 2, 6.0, 3).unwrap();
        let noisy = crate::noise::NoiseSpec::Symmetric { rho: 0.3 }
            .apply(&ds, &mut Rng::new(4))
            .unwrap();
        let view = TrainingView::new(&noisy);
        let mut config = TrainConfig {
            epochs: 4,
            seed: 5,
            procedure: Some(ProcedureSpec::DualRelabel {
                small_scale: 0.5,
                large_scale: 2.0,
                warmup_epochs: 4,
            }),
            ..TrainConfig::default()
        };
        let out = dual_relabel_train(&view, &config, Some(&ds)).unwrap();
        let store = out.store.unwrap();
        assert_eq!(store.relabeled_count(), 0);
        assert_eq!(store.classes(), noisy.labels());
        assert!(out.history.iter().all(|e| e.relabeled == 0 && e.skipped == 0));
        assert!(out.history[3].train_loss < out.history[0].train_loss);

        config.epochs = 12;
        let out = dual_relabel_train(&view, &config, Some(&ds)).unwrap();
        let relabeled: usize = out.history.iter().map(|e| e.relabeled).sum();
        assert_eq!(out.history[..4].iter().map(|e| e.relabeled).sum::<usize>(), 0);
        assert!(relabeled > 0);
    }

    #[test]
    fn store_epoch_uses_soft_targets() {
        let ds = gen_blobs(2, 20, 2, 6.0, 1).unwrap();
        let view = TrainingView::new(&ds);
        let config = TrainConfig::default();
        let mut store = SoftLabelStore::from_labels(view.labels(), 2);
        let start = init(Arch::Linear { d: 2, k: 2 }, 7);
        let (mut hard, mut soft) = (start.clone(), start);
        store_epoch(&mut hard, &view, &store, &config, &mut Rng::new(1)).unwrap();
        store
            .relabel(
                0,
                StoredLabel::Soft {
                    probs: ProbVector::new(vec![0.5, 0.5]).unwrap(),
                },
                1,
                RelabelSource::Both,
            )
            .unwrap();
        store_epoch(&mut soft, &view, &store, &config, &mut Rng::new(1)).unwrap();
        assert_ne!(hard, soft);
    }

    #[test]
    fn provenance_never_moves_backwards() {
        let mut store = SoftLabelStore::from_labels(&[0, 1], 2);
        store
            .relabel(0, StoredLabel::Hard { class: 1 }, 3, RelabelSource::ModelA)
            .unwrap();
        assert!(store
            .relabel(0, StoredLabel::Hard { class: 0 }, 2, RelabelSource::ModelB)
            .is_err());
        assert!(store
            .relabel(1, StoredLabel::Hard { class: 0 }, 0, RelabelSource::ModelB)
            .is_err());
        let json = serde_json::to_string(&store).unwrap();
        assert!(json.contains("\"relabeled\""));
        let back: SoftLabelStore = serde_json::from_str(&json).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn procedure_validation() {
        assert!(ProcedureSpec::Mixup { alpha: 0.0 }.validate().is_err());
        assert!(ProcedureSpec::CoTeaching {
            rho_hat: 1.0,
            warmup_epochs: 5,
            ramp_epochs: 10
        }
        .validate()
        .is_err());
        assert!(ProcedureSpec::Disagreement.is_multi_model());
        let p: ProcedureSpec = serde_json::from_str(r#"{"kind":"mixup"}"#).unwrap();
        assert_eq!(p, ProcedureSpec::Mixup { alpha: 0.2 });
    }

    #[test]
    fn cleaning_requires_trusted_truth() {
        let ds = gen_blobs(2, 10, 2, 4.0, 1).unwrap();
        let view = TrainingView::new(&ds);
        let err = iterative_clean(
            &view,
            &ds.without_truth(),
            &TrainConfig::default(),
            &CleanConfig::default(),
            None,
        );
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }
}
