//! Synthetic datasets, stratified splitting and CSV persistence.
//!
//! CSV schema: header `f0,...,f{d-1},label[,true][,ann0,...,ann{A-1}]`,
//! comma separated, LF line endings. Features are written with 17 significant
//! digits.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numerics::{Matrix, Rng};

/// Feature matrix with observed labels, optional hidden truth and optional
/// per-annotator labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    true_labels: Option<Vec<usize>>,
    annotator_labels: Option<Vec<Vec<usize>>>,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            num_classes,
            true_labels: None,
            annotator_labels: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_true_labels(mut self, truth: Vec<usize>) -> Result<Self> {
        self.true_labels = Some(truth);
        self.validate()?;
        Ok(self)
    }

    /// `ann[i][a]` is annotator `a`'s label for sample `i`.
    pub fn with_annotator_labels(mut self, ann: Vec<Vec<usize>>) -> Result<Self> {
        self.annotator_labels = Some(ann);
        self.validate()?;
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        self.labels = labels;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        let k = self.num_classes;
        if k == 0 {
            return Err(Error::InvalidParameter("num_classes must be positive".into()));
        }
        if self.labels.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} labels"),
                got: format!("{}", self.labels.len()),
            });
        }
        if let Some(bad) = self.labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for K={k}")));
        }
        if let Some(t) = &self.true_labels {
            if t.len() != n {
                return Err(Error::Shape {
                    expected: format!("{n} true labels"),
                    got: format!("{}", t.len()),
                });
            }
            if let Some(bad) = t.iter().find(|&&y| y >= k) {
                return Err(Error::InvalidInput(format!("true label {bad} out of range for K={k}")));
            }
        }
        if let Some(ann) = &self.annotator_labels {
            if ann.len() != n {
                return Err(Error::Shape {
                    expected: format!("{n} annotator rows"),
                    got: format!("{}", ann.len()),
                });
            }
            let a = ann.first().map_or(0, Vec::len);
            if a == 0 || ann.iter().any(|r| r.len() != a) {
                return Err(Error::InvalidInput(
                    "annotator rows must all have the same non-zero length".into(),
                ));
            }
            if ann.iter().flatten().any(|&y| y >= k) {
                return Err(Error::InvalidInput(format!("annotator label out of range for K={k}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    pub fn annotator_labels(&self) -> Option<&[Vec<usize>]> {
        self.annotator_labels.as_deref()
    }

    pub fn num_annotators(&self) -> usize {
        self.annotator_labels
            .as_ref()
            .and_then(|a| a.first())
            .map_or(0, Vec::len)
    }

    /// Labels used for stratification and evaluation: truth if known, else observed.
    pub fn reference_labels(&self) -> &[usize] {
        self.true_labels.as_deref().unwrap_or(&self.labels)
    }

    pub fn class_counts(labels: &[usize], k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for &y in labels {
            counts[y] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.x(i));
        }
        let pick = |v: &Vec<usize>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        LabeledDataset {
            features: Matrix::from_vec(indices.len(), d, data).expect("subset of valid matrix"),
            labels: pick(&self.labels),
            num_classes: self.num_classes,
            true_labels: self.true_labels.as_ref().map(pick),
            annotator_labels: self
                .annotator_labels
                .as_ref()
                .map(|a| indices.iter().map(|&i| a[i].clone()).collect()),
        }
    }

    /// Copy with the hidden ground truth removed.
    pub fn without_truth(&self) -> LabeledDataset {
        LabeledDataset {
            true_labels: None,
            ..self.clone()
        }
    }

    /// Per-class mean feature vectors under `labels` (zeros for empty classes).
    pub fn centroids(&self, labels: &[usize]) -> Matrix {
        let d = self.dim();
        let mut c = Matrix::zeros(self.num_classes, d);
        let counts = Self::class_counts(labels, self.num_classes);
        for (i, &y) in labels.iter().enumerate() {
            for (acc, v) in c.row_mut(y).iter_mut().zip(self.x(i)) {
                *acc += v;
            }
        }
        for (k, &n) in counts.iter().enumerate() {
            if n > 0 {
                c.row_mut(k).iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        c
    }

    /// Indicator of `observed != true` per sample, if truth is known.
    pub fn flip_indicators(&self) -> Option<Vec<bool>> {
        self.true_labels
            .as_ref()
            .map(|t| t.iter().zip(&self.labels).map(|(a, b)| a != b).collect())
    }
}

/// A dataset whose hidden ground truth has been stripped. Every training entry
/// point takes this type, so true labels cannot reach a training code path.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingView(LabeledDataset);

impl TrainingView {
    pub fn new(ds: &LabeledDataset) -> Self {
        Self(ds.without_truth())
    }

    pub fn into_inner(self) -> LabeledDataset {
        self.0
    }

    pub fn subset(&self, indices: &[usize]) -> TrainingView {
        TrainingView(self.0.subset(indices))
    }

    /// Same samples with replaced observed labels.
    pub fn relabeled(&self, labels: Vec<usize>) -> Result<TrainingView> {
        Ok(TrainingView(self.0.clone().with_labels(labels)?))
    }
}

impl From<LabeledDataset> for TrainingView {
    fn from(ds: LabeledDataset) -> Self {
        Self(LabeledDataset {
            true_labels: None,
            ..ds
        })
    }
}

impl Deref for TrainingView {
    type Target = LabeledDataset;

    fn deref(&self) -> &LabeledDataset {
        &self.0
    }
}

/// Deterministic class centers with pairwise distance at least `separation`.
///
/// `d >= K`: scaled standard basis (a regular simplex, distances exactly
/// `separation`). `2 <= d < K`: regular K-gon in the first two coordinates.
/// `d == 1`: evenly spaced on the line.
pub fn blob_centers(k: usize, d: usize, separation: f64) -> Matrix {
    let mut c = Matrix::zeros(k, d);
    if d >= k {
        let s = separation / 2f64.sqrt();
        for i in 0..k {
            c[(i, i)] = s;
        }
    } else if d >= 2 {
        let radius = separation / (2.0 * (PI / k as f64).sin());
        for i in 0..k {
            let theta = 2.0 * PI * i as f64 / k as f64;
            c[(i, 0)] = radius * theta.cos();
            c[(i, 1)] = radius * theta.sin();
        }
    } else {
        for i in 0..k {
            c[(i, 0)] = separation * i as f64;
        }
    }
    c
}

fn check_counts(k: usize, n_per_class: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 classes, got {k}")));
    }
    if n_per_class == 0 {
        return Err(Error::InvalidParameter("n_per_class must be positive".into()));
    }
    Ok(())
}

/// Isotropic unit-variance Gaussian blobs around [`blob_centers`].
pub fn gen_blobs(k: usize, n_per_class: usize, d: usize, separation: f64, seed: u64) -> Result<LabeledDataset> {
    check_counts(k, n_per_class)?;
    if d == 0 {
        return Err(Error::InvalidParameter("dimension must be positive".into()));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "separation must be positive, got {separation}"
        )));
    }
    let centers = blob_centers(k, d, separation);
    let mut rng = Rng::new(seed).fork(0xB10B);
    let mut data = Vec::with_capacity(k * n_per_class * d);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for c in 0..k {
        for _ in 0..n_per_class {
            data.extend(centers.row(c).iter().map(|mu| mu + rng.standard_normal()));
            labels.push(c);
        }
    }
    let features = Matrix::from_vec(k * n_per_class, d, data)?;
    LabeledDataset::new(features, labels.clone(), k)?.with_true_labels(labels)
}

/// Concentric rings in 2-D: class `c` at radius `c + 1` with radial jitter.
pub fn gen_rings(k: usize, n_per_class: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    check_counts(k, n_per_class)?;
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise_std must be non-negative, got {noise_std}"
        )));
    }
    let mut rng = Rng::new(seed).fork(0x41);
    let mut data = Vec::with_capacity(k * n_per_class * 2);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for c in 0..k {
        for _ in 0..n_per_class {
            let theta = rng.uniform_range(0.0, 2.0 * PI);
            let jitter = rng.standard_normal();
            let r = (c + 1) as f64 + noise_std * jitter;
            data.push(r * theta.cos());
            data.push(r * theta.sin());
            labels.push(c);
        }
    }
    let features = Matrix::from_vec(k * n_per_class, 2, data)?;
    LabeledDataset::new(features, labels.clone(), k)?.with_true_labels(labels)
}

/// Stratified split into `(train_indices, test_indices)`, both ascending.
pub fn split_indices(ds: &LabeledDataset, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "test fraction must lie in (0,1), got {test_fraction}"
        )));
    }
    if ds.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 samples to split".into()));
    }
    let strata = ds.reference_labels();
    let mut rng = Rng::new(seed).fork(0x5917);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..ds.num_classes() {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| strata[i] == class).collect();
        rng.shuffle(&mut members);
        let n_test = (test_fraction * members.len() as f64).round() as usize;
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(ds: &LabeledDataset, test_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = split_indices(ds, test_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Dataset generator parameters, as used in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs {
        k: usize,
        n_per_class: usize,
        d: usize,
        separation: f64,
    },
    Rings {
        k: usize,
        n_per_class: usize,
        noise_std: f64,
    },
    Csv {
        path: String,
    },
}

impl DatasetSpec {
    pub fn generate(&self, seed: u64) -> Result<LabeledDataset> {
        match self {
            DatasetSpec::Blobs {
                k,
                n_per_class,
                d,
                separation,
            } => gen_blobs(*k, *n_per_class, *d, *separation, seed),
            DatasetSpec::Rings {
                k,
                n_per_class,
                noise_std,
            } => gen_rings(*k, *n_per_class, *noise_std, seed),
            DatasetSpec::Csv { path } => load_csv(path),
        }
    }
}

/// Renders the dataset in the CSV schema.
pub fn to_csv_string(ds: &LabeledDataset) -> String {
    let d = ds.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    if ds.true_labels.is_some() {
        header.push("true".into());
    }
    for a in 0..ds.num_annotators() {
        header.push(format!("ann{a}"));
    }
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..ds.len() {
        for v in ds.x(i) {
            write!(out, "{v:.16e},").unwrap();
        }
        write!(out, "{}", ds.labels[i]).unwrap();
        if let Some(t) = &ds.true_labels {
            write!(out, ",{}", t[i]).unwrap();
        }
        if let Some(ann) = &ds.annotator_labels {
            for y in &ann[i] {
                write!(out, ",{y}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), to_csv_string(ds).as_bytes())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

struct Layout {
    d: usize,
    has_true: bool,
    annotators: usize,
}

fn parse_header(fields: &csv::StringRecord) -> Result<Layout> {
    let err = |column: usize, message: String| Error::Parse {
        row: 1,
        column,
        message,
    };
    let names: Vec<&str> = fields.iter().map(str::trim).collect();
    let d = names
        .iter()
        .enumerate()
        .take_while(|(j, n)| **n == format!("f{j}"))
        .count();
    if d == 0 {
        return Err(err(1, "expected feature columns f0,f1,...".into()));
    }
    match names.get(d) {
        Some(&"label") => {}
        Some(other) => return Err(err(d + 1, format!("expected `label`, found `{other}`"))),
        None => return Err(err(d + 1, "missing `label` column".into())),
    }
    let mut pos = d + 1;
    let has_true = names.get(pos) == Some(&"true");
    if has_true {
        pos += 1;
    }
    let mut annotators = 0;
    while let Some(name) = names.get(pos) {
        if *name != format!("ann{annotators}") {
            return Err(err(pos + 1, format!("expected `ann{annotators}`, found `{name}`")));
        }
        annotators += 1;
        pos += 1;
    }
    Ok(Layout {
        d,
        has_true,
        annotators,
    })
}

/// Parses the CSV schema. `K` is inferred as one more than the largest label
/// found in any label column.
pub fn parse_csv(text: &str) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| Error::Parse {
            row: 1,
            column: 1,
            message: e.to_string(),
        })?,
        None => {
            return Err(Error::Parse {
                row: 1,
                column: 1,
                message: "empty file".into(),
            })
        }
    };
    let layout = parse_header(&header)?;
    let width = header.len();

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut truth = Vec::new();
    let mut ann = Vec::new();
    for (r, rec) in records.enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: 1,
            message: e.to_string(),
        })?;
        if rec.len() != width {
            return Err(Error::Parse {
                row,
                column: rec.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for j in 0..layout.d {
            let v: f64 = rec[j].parse().map_err(|_| Error::Parse {
                row,
                column: j + 1,
                message: format!("non-numeric feature `{}`", &rec[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: j + 1,
                    message: "feature is not finite".into(),
                });
            }
            data.push(v);
        }
        let label_at = |j: usize| -> Result<usize> {
            rec[j].parse().map_err(|_| Error::Parse {
                row,
                column: j + 1,
                message: format!("invalid class label `{}`", &rec[j]),
            })
        };
        labels.push(label_at(layout.d)?);
        let mut pos = layout.d + 1;
        if layout.has_true {
            truth.push(label_at(pos)?);
            pos += 1;
        }
        if layout.annotators > 0 {
            ann.push(
                (0..layout.annotators)
                    .map(|a| label_at(pos + a))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
    }
    let k = labels
        .iter()
        .chain(&truth)
        .chain(ann.iter().flatten())
        .max()
        .map_or(1, |m| m + 1);
    let n = labels.len();
    let mut ds = LabeledDataset::new(Matrix::from_vec(n, layout.d, data)?, labels, k)?;
    if layout.has_true {
        ds = ds.with_true_labels(truth)?;
    }
    if layout.annotators > 0 && n > 0 {
        ds = ds.with_annotator_labels(ann)?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_shape_and_determinism() {
        let a = gen_blobs(2, 100, 2, 8.0, 1).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(LabeledDataset::class_counts(a.labels(), 2), vec![100, 100]);
        assert_eq!(a.labels(), a.true_labels().unwrap());
        let b = gen_blobs(2, 100, 2, 8.0, 1).unwrap();
        assert_eq!(to_csv_string(&a), to_csv_string(&b));
    }

    #[test]
    fn blob_centers_are_separated() {
        for (k, d) in [(2, 1), (2, 2), (3, 2), (5, 2), (3, 3), (4, 10)] {
            let c = blob_centers(k, d, 8.0);
            for i in 0..k {
                for j in i + 1..k {
                    let dist: f64 = c
                        .row(i)
                        .iter()
                        .zip(c.row(j))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!(dist >= 8.0 - 1e-9, "k={k} d={d} dist={dist}");
                }
            }
        }
    }

    #[test]
    fn blobs_nearest_centroid_accuracy() {
        // centers 8 sigma apart: the midpoint rule errs with probability Phi(-4) ~ 3e-5
        let ds = gen_blobs(2, 500, 2, 8.0, 99).unwrap();
        let c = blob_centers(2, 2, 8.0);
        let correct = (0..ds.len())
            .filter(|&i| {
                let d: Vec<f64> = (0..2)
                    .map(|k| ds.x(i).iter().zip(c.row(k)).map(|(a, b)| (a - b).powi(2)).sum())
                    .collect();
                crate::numerics::argmax(&[-d[0], -d[1]]) == ds.labels()[i]
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn invalid_generator_params() {
        assert!(gen_blobs(1, 10, 2, 8.0, 0).is_err());
        assert!(gen_blobs(2, 10, 0, 8.0, 0).is_err());
        assert!(gen_blobs(2, 10, 2, 0.0, 0).is_err());
        assert!(gen_rings(2, 10, -1.0, 0).is_err());
    }

    #[test]
    fn rings_exact_radius_without_noise() {
        let ds = gen_rings(3, 50, 0.0, 4).unwrap();
        for i in 0..ds.len() {
            let r = ds.x(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - (ds.labels()[i] + 1) as f64).abs() < 1e-12);
        }
        assert_eq!(gen_rings(3, 50, 0.1, 4).unwrap(), gen_rings(3, 50, 0.1, 4).unwrap());
    }

    #[test]
    fn split_is_stratified_partition() {
        let ds = gen_blobs(2, 100, 2, 8.0, 1).unwrap();
        let (train, test) = split_indices(&ds, 0.25, 3).unwrap();
        let t = ds.subset(&test);
        assert_eq!(LabeledDataset::class_counts(t.labels(), 2), vec![25, 25]);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(split_indices(&ds, 0.25, 3).unwrap(), (train, test));
        assert!(split_indices(&ds, 0.0, 3).is_err());
        assert!(split_indices(&ds, 1.0, 3).is_err());
    }

    #[test]
    fn csv_header_with_annotators() {
        let ds = gen_blobs(2, 3, 2, 8.0, 1).unwrap();
        let ann = vec![vec![0, 1, 0]; 6];
        let ds = ds.with_annotator_labels(ann).unwrap();
        let text = to_csv_string(&ds);
        assert_eq!(text.lines().next().unwrap(), "f0,f1,label,true,ann0,ann1,ann2");
        assert_eq!(parse_csv(&text).unwrap(), ds);
    }

    #[test]
    fn csv_errors_carry_location() {
        match parse_csv("f0,f1\n1,2\n") {
            Err(Error::Parse { row: 1, column: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_csv("f0,label\n1.0,0\nabc,1\n") {
            Err(Error::Parse { row: 3, column: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_csv("f0,label\n1.0,x\n") {
            Err(Error::Parse { row: 2, column: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
