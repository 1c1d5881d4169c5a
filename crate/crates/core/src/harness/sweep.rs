use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json};
use crate::noise::NoiseSpec;
use crate::numerics::Matrix;
use crate::par;

use super::config::{ExperimentConfig, MethodSpec};
use super::experiment::{run_experiment, ExperimentReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMethod {
    pub name: String,
    #[serde(default)]
    pub method: MethodSpec,
}

/// Grid over symmetric noise rates and methods. The first method is the
/// baseline whose error curve gets the quadratic fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub template: ExperimentConfig,
    pub noise_rates: Vec<f64>,
    pub methods: Vec<NamedMethod>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub rho: f64,
    pub accuracy: Option<f64>,
    pub test_error: Option<f64>,
    pub macro_f1: Option<f64>,
    pub ece: Option<f64>,
    pub error: Option<String>,
}

/// `error ≈ a + b·ρ + c·ρ²` by least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<Option<ExperimentReport>>,
    pub baseline_fit: Option<QuadraticFit>,
}

impl SweepOutcome {
    pub fn summary_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out = String::from("method,rho,accuracy,test_error,macro_f1,ece,error\n");
        for r in &self.rows {
            let err = r.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
            let err = if err.is_empty() { err } else { format!("\"{err}\"") };
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method,
                r.rho,
                opt(r.accuracy),
                opt(r.test_error),
                opt(r.macro_f1),
                opt(r.ece),
                err
            )
            .unwrap();
        }
        out
    }

    /// Test errors of one method in grid order.
    pub fn errors_of(&self, method: &str) -> Vec<(f64, Option<f64>)> {
        self.rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| (r.rho, r.test_error))
            .collect()
    }

    /// Writes `summary.csv` and `summary.json` (rows plus fit) into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("summary.csv"), self.summary_csv().as_bytes())?;
        write_json(
            &dir.join("summary.json"),
            &serde_json::json!({ "rows": self.rows, "baseline_fit": self.baseline_fit }),
        )
    }
}

/// Least-squares quadratic fit and its R². `None` with fewer than three
/// distinct abscissae or zero variance in `y`.
pub fn quadratic_fit(x: &[f64], y: &[f64]) -> Option<QuadraticFit> {
    let mut distinct = x.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 || x.len() != y.len() {
        return None;
    }
    // normal equations (XᵀX) β = Xᵀy with columns 1, x, x²
    let mut xtx = Matrix::zeros(3, 3);
    let mut xty = [0.0; 3];
    for (&xi, &yi) in x.iter().zip(y) {
        let row = [1.0, xi, xi * xi];
        for r in 0..3 {
            xty[r] += row[r] * yi;
            for c in 0..3 {
                xtx[(r, c)] += row[r] * row[c];
            }
        }
    }
    let (inv, _) = xtx.inverse(1e12).ok()?;
    let beta = inv.mul_vec(&xty);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| (yi - (beta[0] + beta[1] * xi + beta[2] * xi * xi)).powi(2))
        .sum();
    Some(QuadraticFit {
        a: beta[0],
        b: beta[1],
        c: beta[2],
        r_squared: 1.0 - ss_res / ss_tot,
    })
}

/// Runs every (method, ρ) combination on the worker pool. A failing run is
/// recorded in its row and the sweep continues.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutcome> {
    if spec.noise_rates.is_empty() || spec.methods.is_empty() {
        return Err(Error::Validation(
            "sweep grid must have at least one noise rate and one method".into(),
        ));
    }
    let grid: Vec<(&NamedMethod, f64)> = spec
        .methods
        .iter()
        .flat_map(|m| spec.noise_rates.iter().map(move |&rho| (m, rho)))
        .collect();
    let results = par::map(&grid, |(m, rho)| {
        let config = ExperimentConfig {
            noise: NoiseSpec::Symmetric { rho: *rho },
            method: m.method.clone(),
            output: None,
            ..spec.template.clone()
        };
        run_experiment(&config)
    });
    let mut rows = Vec::with_capacity(grid.len());
    let mut reports = Vec::with_capacity(grid.len());
    for ((m, rho), res) in grid.iter().zip(results) {
        match res {
            Ok(r) => {
                rows.push(SweepRow {
                    method: m.name.clone(),
                    rho: *rho,
                    accuracy: Some(r.final_metrics.accuracy),
                    test_error: Some(1.0 - r.final_metrics.accuracy),
                    macro_f1: Some(r.final_metrics.macro_f1),
                    ece: Some(r.final_metrics.ece),
                    error: None,
                });
                reports.push(Some(r));
            }
            Err(e) => {
                rows.push(SweepRow {
                    method: m.name.clone(),
                    rho: *rho,
                    accuracy: None,
                    test_error: None,
                    macro_f1: None,
                    ece: None,
                    error: Some(e.to_string()),
                });
                reports.push(None);
            }
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.method == spec.methods[0].name)
        .filter_map(|r| r.test_error.map(|e| (r.rho, e)))
        .unzip();
    let baseline_fit = quadratic_fit(&xs, &ys);
    let outcome = SweepOutcome {
        rows,
        reports,
        baseline_fit,
    };
    if let Some(dir) = &spec.template.output {
        outcome.write_to(dir).map_err(|e| e.in_stage("write"))?;
    }
    Ok(outcome)
}
