//! Label-corruption models and empirical transition estimation.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::numerics::{sample_categorical_slice, Matrix, Rng};

/// Row tolerance for stochastic matrices.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Row-stochastic `K×K` matrix, `t[i][j] = p(observed = j | true = i)`.
///
/// Serialized as `{"k": K, "rows": [[...], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransitionJson", into = "TransitionJson")]
pub struct TransitionMatrix {
    t: Matrix,
}

#[derive(Serialize, Deserialize)]
struct TransitionJson {
    k: usize,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<TransitionJson> for TransitionMatrix {
    type Error = Error;

    fn try_from(j: TransitionJson) -> Result<Self> {
        if j.rows.len() != j.k {
            return Err(Error::Shape {
                expected: format!("{} rows", j.k),
                got: format!("{}", j.rows.len()),
            });
        }
        Self::from_rows(&j.rows)
    }
}

impl From<TransitionMatrix> for TransitionJson {
    fn from(t: TransitionMatrix) -> Self {
        TransitionJson {
            k: t.k(),
            rows: t.t.to_rows(),
        }
    }
}

impl TransitionMatrix {
    pub fn new(t: Matrix) -> Result<Self> {
        if t.rows() != t.cols() || t.rows() == 0 {
            return Err(Error::Shape {
                expected: "non-empty square matrix".into(),
                got: format!("{}x{}", t.rows(), t.cols()),
            });
        }
        for r in 0..t.rows() {
            let row = t.row(r);
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(format!(
                    "transition row {r} has entries outside [0,1]"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidInput(format!("transition row {r} sums to {s}")));
            }
        }
        Ok(Self { t })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn identity(k: usize) -> Self {
        Self { t: Matrix::identity(k) }
    }

    pub fn k(&self) -> usize {
        self.t.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.t.row(i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.t[(i, j)]
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.t
    }

    /// Average absolute off-diagonal mass per true class.
    pub fn mean_flip_rate(&self) -> f64 {
        let k = self.k();
        (0..k).map(|i| 1.0 - self.get(i, i)).sum::<f64>() / k as f64
    }

    /// Mean over rows of the ℓ1 distance between corresponding rows.
    pub fn mean_row_l1(&self, other: &TransitionMatrix) -> f64 {
        row_l1_errors(self, other).iter().sum::<f64>() / self.k() as f64
    }

    /// Largest row-wise ℓ1 distance.
    pub fn max_row_l1(&self, other: &TransitionMatrix) -> f64 {
        row_l1_errors(self, other).into_iter().fold(0.0, f64::max)
    }
}

fn row_l1_errors(a: &TransitionMatrix, b: &TransitionMatrix) -> Vec<f64> {
    assert_eq!(a.k(), b.k(), "transition matrices of different size");
    (0..a.k())
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()).sum())
        .collect()
}

/// Class-independent noise: `1 − rho` on the diagonal, `rho/(K−1)` elsewhere.
pub fn symmetric_transition(k: usize, rho: f64) -> Result<TransitionMatrix> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("need K >= 2, got {k}")));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidParameter(format!("rho must lie in [0,1), got {rho}")));
    }
    let off = rho / (k - 1) as f64;
    let mut t = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            t[(i, j)] = if i == j { 1.0 - rho } else { off };
        }
    }
    Ok(TransitionMatrix { t })
}

/// Corruption model selector used by experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    None,
    Symmetric { rho: f64 },
    Matrix { t: TransitionMatrix },
    FeatureDependent { rho_max: f64, beta: f64 },
}

impl NoiseSpec {
    pub fn validate(&self, k: usize) -> Result<()> {
        match self {
            NoiseSpec::None => Ok(()),
            NoiseSpec::Symmetric { rho } => symmetric_transition(k, *rho).map(|_| ()),
            NoiseSpec::Matrix { t } if t.k() != k => Err(Error::InvalidParameter(format!(
                "noise matrix is {}x{0} but dataset has {k} classes",
                t.k()
            ))),
            NoiseSpec::Matrix { .. } => Ok(()),
            NoiseSpec::FeatureDependent { rho_max, beta } => check_feature_params(*rho_max, *beta),
        }
    }

    /// The transition matrix of class-conditional models.
    pub fn transition(&self, k: usize) -> Result<Option<TransitionMatrix>> {
        Ok(match self {
            NoiseSpec::None => Some(TransitionMatrix::identity(k)),
            NoiseSpec::Symmetric { rho } => Some(symmetric_transition(k, *rho)?),
            NoiseSpec::Matrix { t } => Some(t.clone()),
            NoiseSpec::FeatureDependent { .. } => None,
        })
    }

    pub fn apply(&self, ds: &LabeledDataset, rng: &mut Rng) -> Result<LabeledDataset> {
        self.validate(ds.num_classes())?;
        match self {
            NoiseSpec::FeatureDependent { rho_max, beta } => feature_dependent_inject(ds, *rho_max, *beta, rng),
            other => {
                let t = other.transition(ds.num_classes())?.expect("class-conditional");
                inject(ds, &t, rng)
            }
        }
    }
}

fn check_feature_params(rho_max: f64, beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho_max) {
        return Err(Error::InvalidParameter(format!(
            "rho_max must lie in [0,1), got {rho_max}"
        )));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!("beta must be >= 0, got {beta}")));
    }
    Ok(())
}

fn clean_reference(ds: &LabeledDataset) -> Vec<usize> {
    ds.reference_labels().to_vec()
}

/// Draws each observed label from `T[true]`. Features are untouched and the
/// previous labels become (or stay) the true labels.
pub fn inject(ds: &LabeledDataset, t: &TransitionMatrix, rng: &mut Rng) -> Result<LabeledDataset> {
    if t.k() != ds.num_classes() {
        return Err(Error::InvalidParameter(format!(
            "transition is {}x{0} but dataset has {} classes",
            t.k(),
            ds.num_classes()
        )));
    }
    let truth = clean_reference(ds);
    let noisy = truth.iter().map(|&y| sample_categorical_slice(t.row(y), rng)).collect();
    ds.clone().with_labels(noisy)?.with_true_labels(truth)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Per-sample `(margin, nearest other class)` relative to the true-class centroids.
///
/// The margin is `dist(nearest other centroid) − dist(own centroid)`.
pub fn centroid_margins(ds: &LabeledDataset) -> Vec<(f64, usize)> {
    let truth = clean_reference(ds);
    let centroids = ds.centroids(&truth);
    truth
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let own = sq_dist(ds.x(i), centroids.row(y)).sqrt();
            let (other, dist) = (0..ds.num_classes())
                .filter(|&c| c != y)
                .map(|c| (c, sq_dist(ds.x(i), centroids.row(c)).sqrt()))
                .fold(
                    (usize::MAX, f64::INFINITY),
                    |best, cur| {
                        if cur.1 < best.1 {
                            cur
                        } else {
                            best
                        }
                    },
                );
            (dist - own, other)
        })
        .collect()
}

/// Flips sample `i` to its nearest other-class centroid's class with
/// probability `rho_max · exp(−beta · max(m_i, 0))`.
///
/// One uniform draw is consumed per sample regardless of outcome.
pub fn feature_dependent_inject(ds: &LabeledDataset, rho_max: f64, beta: f64, rng: &mut Rng) -> Result<LabeledDataset> {
    check_feature_params(rho_max, beta)?;
    let truth = clean_reference(ds);
    let margins = centroid_margins(ds);
    let noisy = truth
        .iter()
        .zip(&margins)
        .map(|(&y, &(m, other))| {
            let p = rho_max * (-beta * m.max(0.0)).exp();
            if rng.uniform() < p {
                other
            } else {
                y
            }
        })
        .collect();
    ds.clone().with_labels(noisy)?.with_true_labels(truth)
}

/// Independent annotator labels, `ann[i][a] ~ confusions[a][true_i]`.
pub fn simulate_annotators(
    ds: &LabeledDataset,
    confusions: &[TransitionMatrix],
    rng: &mut Rng,
) -> Result<LabeledDataset> {
    if confusions.is_empty() {
        return Err(Error::InvalidParameter("need at least one annotator".into()));
    }
    if let Some(bad) = confusions.iter().find(|c| c.k() != ds.num_classes()) {
        return Err(Error::InvalidParameter(format!(
            "annotator confusion is {}x{0} but dataset has {} classes",
            bad.k(),
            ds.num_classes()
        )));
    }
    let truth = clean_reference(ds);
    let ann = truth
        .iter()
        .map(|&y| {
            confusions
                .iter()
                .map(|c| sample_categorical_slice(c.row(y), rng))
                .collect()
        })
        .collect();
    ds.clone().with_true_labels(truth)?.with_annotator_labels(ann)
}

/// Empirical transition from `(reference, noisy)` pairs with additive smoothing:
/// `t[i][j] = (count(i→j) + laplace) / (count(i→·) + K·laplace)`.
pub fn estimate_transition(pairs: &[(usize, usize)], k: usize, laplace: f64) -> Result<TransitionMatrix> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be positive".into()));
    }
    if !(laplace >= 0.0) || !laplace.is_finite() {
        return Err(Error::InvalidParameter(format!("laplace must be >= 0, got {laplace}")));
    }
    let mut counts = Matrix::zeros(k, k);
    for &(r, o) in pairs {
        if r >= k || o >= k {
            return Err(Error::InvalidInput(format!("pair ({r},{o}) out of range for K={k}")));
        }
        counts[(r, o)] += 1.0;
    }
    let mut t = Matrix::zeros(k, k);
    for i in 0..k {
        let total: f64 = counts.row(i).iter().sum();
        let denom = total + k as f64 * laplace;
        if denom <= 0.0 {
            return Err(Error::DegenerateRow { row: i });
        }
        for j in 0..k {
            t[(i, j)] = (counts[(i, j)] + laplace) / denom;
        }
    }
    TransitionMatrix::new(t)
}
