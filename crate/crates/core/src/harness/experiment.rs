use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::annotators::{
    majority_vote_all, staple, train_min_loss, train_with_confusion, AnnotatorModel, StapleConfig,
};
use crate::data::{split, split_indices, LabeledDataset, TrainingView};
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json};
use crate::metrics::{FlagScore, Metrics};
use crate::model::{evaluate, train, EpochMetrics, ModelParams, TrainConfig};
use crate::noise::{estimate_transition, simulate_annotators, NoiseSpec, TransitionMatrix};
use crate::numerics::Rng;
use crate::procedures::{iterative_clean, label_recovery, RoundStats};

use super::config::{AnnotatorMethod, ExperimentConfig, TransitionSource};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoreAgreement {
    pub start: f64,
    pub end: f64,
}

/// Noise-related measurements; fields are present only when relevant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub train_size: usize,
    pub test_size: usize,
    /// Fraction of training labels that differ from the truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_noise_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimated_transition: Option<TransitionMatrix>,
    /// Mean row-wise ℓ1 error of the estimated transition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_l1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_model: Option<AnnotatorModel>,
    /// Mean over annotators of the row-wise ℓ1 error of the recovered confusions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_l1: Option<f64>,
    /// Accuracy of the fused (or majority) training labels against the truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_label_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_annotator_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_recovery: Option<FlagScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_rounds: Option<Vec<RoundStats>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_agreement: Option<StoreAgreement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub version: String,
    pub pipeline: String,
    pub config: ExperimentConfig,
    pub epochs: Vec<EpochMetrics>,
    pub final_metrics: Metrics,
    pub diagnostics: Diagnostics,
    /// Excluded from reproducibility comparisons.
    pub wall_time_secs: f64,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// JSON with the wall time zeroed; byte-identical across re-runs.
    pub fn canonical_json(&self) -> Result<String> {
        Self {
            wall_time_secs: 0.0,
            ..self.clone()
        }
        .to_json()
    }

    pub fn epochs_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out = String::from("epoch,train_loss,test_accuracy,test_macro_f1,updated,skipped,relabeled\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.epoch,
                e.train_loss,
                opt(e.test_accuracy),
                opt(e.test_macro_f1),
                e.updated,
                e.skipped,
                e.relabeled
            )
            .unwrap();
        }
        out
    }

    /// Writes `report.json` and `epochs.csv` into `dir`, each atomically.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("report.json"), self)?;
        write_atomic(&dir.join("epochs.csv"), self.epochs_csv().as_bytes())
    }
}

fn fraction_equal(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len().max(1) as f64
}

/// Seeds of the independent random streams of one run.
struct Streams {
    data: u64,
    split: u64,
    noise: Rng,
    annotators: Rng,
    trusted: u64,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let root = Rng::new(seed);
        Self {
            data: root.fork(1).next_u64(),
            split: root.fork(2).next_u64(),
            noise: root.fork(3),
            annotators: root.fork(4),
            trusted: root.fork(5).next_u64(),
        }
    }
}

struct Trained {
    params: ModelParams,
    history: Vec<EpochMetrics>,
}

/// Fills transition-dependent hooks from the configured source.
fn resolve_transition(
    config: &ExperimentConfig,
    train_cfg: &mut TrainConfig,
    train_set: &LabeledDataset,
    trusted_seed: u64,
    diag: &mut Diagnostics,
) -> Result<()> {
    let needs = train_cfg.loss.needs_transition() || train_cfg.reweight.as_ref().is_some_and(|r| r.needs_transition());
    let Some(source) = config.method.transition else {
        return Ok(());
    };
    let k = train_set.num_classes();
    let truth = config.noise.transition(k)?;
    let t = match source {
        TransitionSource::True => truth
            .clone()
            .ok_or_else(|| Error::Validation("noise model has no transition matrix".into()))?,
        TransitionSource::Estimated {
            trusted_fraction,
            laplace,
        } => {
            let (_, trusted) = split_indices(train_set, trusted_fraction, trusted_seed)?;
            let reference = train_set.reference_labels();
            let pairs: Vec<(usize, usize)> = trusted.iter().map(|&i| (reference[i], train_set.labels()[i])).collect();
            let est = estimate_transition(&pairs, k, laplace)?;
            if let Some(t) = &truth {
                diag.transition_l1 = Some(est.mean_row_l1(t));
            }
            diag.estimated_transition = Some(est.clone());
            est
        }
    };
    if needs {
        train_cfg.loss = train_cfg.loss.with_transition(&t);
        train_cfg.reweight = train_cfg.reweight.as_ref().map(|r| r.with_transition(&t));
    }
    Ok(())
}

fn annotator_pipeline(
    method: AnnotatorMethod,
    config: &ExperimentConfig,
    train_set: &LabeledDataset,
    test: &LabeledDataset,
    train_cfg: &TrainConfig,
    diag: &mut Diagnostics,
) -> Result<Trained> {
    let k = train_set.num_classes();
    let true_confusions = config
        .annotators
        .as_ref()
        .expect("validated")
        .iter()
        .map(|a| a.transition(k).map(|t| t.expect("class-conditional")))
        .collect::<Result<Vec<_>>>()?;
    let ann = train_set.annotator_labels().expect("simulated annotators");
    let truth = train_set.reference_labels();
    let best = (0..train_set.num_annotators())
        .map(|a| {
            let labels: Vec<usize> = ann.iter().map(|r| r[a]).collect();
            fraction_equal(&labels, truth)
        })
        .fold(0.0, f64::max);
    diag.best_annotator_accuracy = Some(best);
    let view = TrainingView::new(train_set);
    let recovered = |m: &AnnotatorModel| -> f64 {
        m.confusions
            .iter()
            .zip(&true_confusions)
            .map(|(e, t)| e.mean_row_l1(t))
            .sum::<f64>()
            / true_confusions.len() as f64
    };
    match method {
        AnnotatorMethod::MajorityVote | AnnotatorMethod::Staple { .. } => {
            let labels = if let AnnotatorMethod::Staple { max_iters, tol } = method {
                let res = staple(ann, k, StapleConfig { max_iters, tol })?;
                diag.annotator_l1 = Some(recovered(&res.model));
                diag.annotator_model = Some(res.model);
                res.fused
            } else {
                majority_vote_all(ann)?
            };
            diag.fused_label_accuracy = Some(fraction_equal(&labels, truth));
            let out = train(&view.relabeled(labels)?, train_cfg, Some(test))?;
            Ok(Trained {
                params: out.params,
                history: out.history,
            })
        }
        AnnotatorMethod::MinLoss => {
            let (params, history) = train_min_loss(&view, train_cfg, Some(test))?;
            Ok(Trained { params, history })
        }
        AnnotatorMethod::Confusion { lambda_trace } => {
            let out = train_with_confusion(&view, train_cfg, lambda_trace, Some(test))?;
            diag.annotator_l1 = Some(recovered(&out.model));
            diag.annotator_model = Some(out.model);
            Ok(Trained {
                params: out.params,
                history: out.history,
            })
        }
    }
}

/// Runs one experiment. Training only ever sees [`TrainingView`]s; test
/// metrics are computed against true labels.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    config.validate()?;
    let streams = Streams::new(config.seed);
    let mut diag = Diagnostics::default();

    let full = config
        .dataset
        .generate(streams.data)
        .map_err(|e| e.in_stage("generate"))?;
    let (train_clean, test) = split(&full, config.test_fraction, streams.split).map_err(|e| e.in_stage("split"))?;
    // test labels are the truth
    let test = test.clone().with_labels(test.reference_labels().to_vec())?;

    let corrupt = || -> Result<LabeledDataset> {
        let mut noise_rng = streams.noise.clone();
        let mut ds = config.noise.apply(&train_clean, &mut noise_rng)?;
        if let Some(anns) = &config.annotators {
            let k = ds.num_classes();
            let confusions = anns
                .iter()
                .map(|a| {
                    a.validate(k)?;
                    Ok(a.transition(k)?.expect("class-conditional"))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut ann_rng = streams.annotators.clone();
            ds = simulate_annotators(&ds, &confusions, &mut ann_rng)?;
        }
        Ok(ds)
    };
    let train_set = corrupt().map_err(|e| e.in_stage("corrupt"))?;
    diag.train_size = train_set.len();
    diag.test_size = test.len();
    if config.noise != NoiseSpec::None {
        diag.observed_noise_rate = Some(1.0 - fraction_equal(train_set.labels(), train_set.reference_labels()));
    }

    let mut train_cfg = config.effective_train();
    resolve_transition(config, &mut train_cfg, &train_set, streams.trusted, &mut diag)
        .map_err(|e| e.in_stage("transition"))?;

    let run = |diag: &mut Diagnostics| -> Result<Trained> {
        let m = &config.method;
        if let Some(method) = m.annotator {
            return annotator_pipeline(method, config, &train_set, &test, &train_cfg, diag);
        }
        if let Some(clean) = &m.clean {
            let (noisy_idx, trusted_idx) = split_indices(&train_set, clean.trusted_fraction, streams.trusted)?;
            let noisy = train_set.subset(&noisy_idx);
            let trusted = train_set.subset(&trusted_idx);
            let out = iterative_clean(
                &TrainingView::new(&noisy),
                &trusted,
                &train_cfg,
                &clean.config,
                Some(&test),
            )?;
            if let Some(flipped) = noisy.flip_indicators() {
                diag.label_recovery = Some(label_recovery(&out.flags, &flipped));
            }
            diag.clean_rounds = Some(out.rounds);
            return Ok(Trained {
                params: out.params,
                history: out.history,
            });
        }
        let view = TrainingView::new(&train_set);
        let out = train(&view, &train_cfg, Some(&test))?;
        if let Some(store) = &out.store {
            let truth = train_set.reference_labels();
            diag.store_agreement = Some(StoreAgreement {
                start: fraction_equal(train_set.labels(), truth),
                end: store.agreement(truth),
            });
        }
        Ok(Trained {
            params: out.params,
            history: out.history,
        })
    };
    let trained = run(&mut diag).map_err(|e| e.in_stage("train"))?;
    let final_metrics = evaluate(&trained.params, &test).map_err(|e| e.in_stage("evaluate"))?;

    let report = ExperimentReport {
        schema_version: SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION").to_string(),
        pipeline: config.method.pipeline(),
        config: config.clone(),
        epochs: trained.history,
        final_metrics,
        diagnostics: diag,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &config.output {
        report.write_to(dir).map_err(|e| e.in_stage("write"))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec::Blobs {
                k: 2,
                n_per_class: 40,
                d: 2,
                separation: 6.0,
            },
            test_fraction: 0.3,
            noise: NoiseSpec::Symmetric { rho: 0.2 },
            annotators: None,
            method: Default::default(),
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            seed: 5,
            output: None,
        }
    }

    #[test]
    fn report_shape_and_determinism() {
        let a = run_experiment(&small()).unwrap();
        let b = run_experiment(&small()).unwrap();
        assert_eq!(a.canonical_json().unwrap(), b.canonical_json().unwrap());
        assert_eq!(a.epochs.len(), 3);
        assert_eq!(a.epochs_csv().lines().count(), 4);
        assert_eq!(a.schema_version, SCHEMA_VERSION);
        assert!(a.diagnostics.observed_noise_rate.is_some());
        let v: serde_json::Value = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        assert!(v["final_metrics"]["accuracy"].is_number());
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        c.output = Some(dir.path().join("run"));
        run_experiment(&c).unwrap();
        assert!(dir.path().join("run/report.json").exists());
        let csv = std::fs::read_to_string(dir.path().join("run/epochs.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn errors_name_the_stage() {
        let mut c = small();
        c.dataset = DatasetSpec::Csv {
            path: "/nonexistent/data.csv".into(),
        };
        let err = run_experiment(&c).unwrap_err();
        assert!(err.to_string().starts_with("generate stage failed"), "{err}");
    }
}
