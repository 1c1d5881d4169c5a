use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::annotators::{StapleConfig, DEFAULT_LAMBDA_TRACE};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::model::TrainConfig;
use crate::noise::NoiseSpec;
use crate::procedures::{CleanConfig, ProcedureSpec};
use crate::reweight::ReweightSpec;

fn default_test_fraction() -> f64 {
    0.3
}

fn default_noise() -> NoiseSpec {
    NoiseSpec::None
}

fn default_trusted() -> f64 {
    0.1
}

fn default_laplace() -> f64 {
    1.0
}

fn default_max_iters() -> usize {
    StapleConfig::default().max_iters
}

fn default_tol() -> f64 {
    StapleConfig::default().tol
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA_TRACE
}

/// Where loss corrections and Pumpout get their transition matrix when the
/// spec does not carry one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionSource {
    /// The matrix of the configured noise model.
    True,
    /// Counted from a trusted fraction of the training split whose true labels
    /// are revealed to the harness.
    Estimated {
        #[serde(default = "default_trusted")]
        trusted_fraction: f64,
        #[serde(default = "default_laplace")]
        laplace: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnnotatorMethod {
    /// Train on the per-sample majority vote.
    MajorityVote,
    /// Train on STAPLE-fused labels.
    Staple {
        #[serde(default = "default_max_iters")]
        max_iters: usize,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    /// Train on whichever annotator label has the smallest loss.
    MinLoss,
    /// Joint classifier and annotator-confusion training with a trace penalty.
    Confusion {
        #[serde(default = "default_lambda")]
        lambda_trace: f64,
    },
}

impl AnnotatorMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AnnotatorMethod::MajorityVote => "majority_vote",
            AnnotatorMethod::Staple { .. } => "staple",
            AnnotatorMethod::MinLoss => "min_loss",
            AnnotatorMethod::Confusion { .. } => "confusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanSpec {
    /// Fraction of the training split used as the trusted set.
    #[serde(default = "default_trusted")]
    pub trusted_fraction: f64,
    #[serde(flatten)]
    pub config: CleanConfig,
}

impl Default for CleanSpec {
    fn default() -> Self {
        Self {
            trusted_fraction: default_trusted(),
            config: CleanConfig::default(),
        }
    }
}

/// Method selection. At most one of `procedure`, `annotator` and `clean` may
/// be set; `loss` and `reweight` refine the plain and procedure pipelines.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reweight: Option<ReweightSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub procedure: Option<ProcedureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<AnnotatorMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<CleanSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<TransitionSource>,
}

impl MethodSpec {
    pub fn with_loss(loss: LossSpec) -> Self {
        Self {
            loss: Some(loss),
            ..Self::default()
        }
    }

    /// Short pipeline label used in reports and sweep rows.
    pub fn pipeline(&self) -> String {
        if let Some(a) = &self.annotator {
            return format!("annotator:{}", a.name());
        }
        if self.clean.is_some() {
            return "clean".into();
        }
        let loss = self.loss.as_ref().map_or("ce", LossSpec::name);
        let mut name = format!("loss:{loss}");
        if let Some(p) = &self.procedure {
            name = format!("procedure:{}+{name}", p.name());
        }
        if let Some(r) = &self.reweight {
            name.push_str(&format!("+reweight:{}", r.name()));
        }
        name
    }

    fn needs_transition(&self) -> bool {
        self.loss.as_ref().is_some_and(LossSpec::needs_transition)
            || self.reweight.as_ref().is_some_and(ReweightSpec::needs_transition)
    }

    fn is_correction(&self) -> bool {
        matches!(self.loss, Some(LossSpec::Forward { .. } | LossSpec::Backward { .. }))
            || matches!(self.reweight, Some(ReweightSpec::Pumpout { .. }))
    }
}

/// One experiment: generate → corrupt → train → evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_noise")]
    pub noise: NoiseSpec,
    /// Class-conditional models of simulated annotators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotators: Option<Vec<NoiseSpec>>,
    #[serde(default)]
    pub method: MethodSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Root seed of every random stream in the run; overrides `train.seed`.
    pub seed: u64,
    /// Output directory for `report.json` and `epochs.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("bad experiment config: {e}")))
    }

    /// The train config actually used: method hooks merged in, seed from the
    /// experiment.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        if let Some(l) = &self.method.loss {
            t.loss = l.clone();
        }
        if self.method.reweight.is_some() {
            t.reweight = self.method.reweight.clone();
        }
        if self.method.procedure.is_some() {
            t.procedure = self.method.procedure.clone();
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.into()));
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0,1)");
        }
        let m = &self.method;
        if self.train.reweight.is_some() || self.train.procedure.is_some() {
            return bad("set reweight and procedure under `method`, not `train`");
        }
        if m.loss.is_some() && self.train.loss != LossSpec::Ce {
            return bad("loss is set both in `method` and in `train`");
        }
        let pipelines = [m.procedure.is_some(), m.annotator.is_some(), m.clean.is_some()]
            .iter()
            .filter(|b| **b)
            .count();
        if pipelines > 1 {
            return bad("choose exactly one method pipeline: procedure, annotator or clean");
        }
        let correction = m.is_correction() || self.train.loss.needs_transition();
        if m.annotator.is_some() && (correction || m.reweight.is_some()) {
            return bad("a loss correction or re-weighting cannot be combined with an annotator method");
        }
        if m.clean.is_some() && m.reweight.is_some() {
            return bad("re-weighting cannot be combined with cleaning");
        }
        match (&m.annotator, &self.annotators) {
            (Some(_), None) => return bad("annotator methods need simulated `annotators`"),
            (Some(AnnotatorMethod::Confusion { lambda_trace }), _) if !(*lambda_trace >= 0.0) => {
                return bad("lambda_trace must be >= 0")
            }
            _ => {}
        }
        if let Some(anns) = &self.annotators {
            if anns.is_empty() {
                return bad("`annotators` must list at least one annotator");
            }
            if anns.iter().any(|a| matches!(a, NoiseSpec::FeatureDependent { .. })) {
                return bad("annotators must be class-conditional (none, symmetric or matrix)");
            }
        }
        let needs_t = m.needs_transition() || self.train.loss.needs_transition();
        match m.transition {
            None if needs_t => return bad("this method needs a transition matrix: set `method.transition`"),
            Some(TransitionSource::True) if matches!(self.noise, NoiseSpec::FeatureDependent { .. }) => {
                return bad("feature-dependent noise has no true transition matrix")
            }
            Some(TransitionSource::Estimated {
                trusted_fraction,
                laplace,
            }) if !(trusted_fraction > 0.0 && trusted_fraction < 1.0) || !(laplace >= 0.0) => {
                return bad("estimated transition needs trusted_fraction in (0,1) and laplace >= 0")
            }
            _ => {}
        }
        if let Some(c) = &m.clean {
            if !(c.trusted_fraction > 0.0 && c.trusted_fraction < 1.0) {
                return bad("clean.trusted_fraction must lie in (0,1)");
            }
            c.config.validate()?;
        }
        // transition-dependent hooks are checked once the matrix is known
        let mut t = self.effective_train();
        if t.loss.needs_transition() {
            t.loss = LossSpec::Ce;
        }
        if t.reweight.as_ref().is_some_and(ReweightSpec::needs_transition) {
            t.reweight = None;
        }
        t.validate()
    }
}
