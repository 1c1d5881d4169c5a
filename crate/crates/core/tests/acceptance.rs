//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use noisylab::annotators::{staple, StapleConfig};
use noisylab::data::{gen_blobs, DatasetSpec};
use noisylab::harness::{
    run_experiment, run_sweep, AnnotatorMethod, CleanSpec, ExperimentConfig, ExperimentReport, MethodSpec, NamedMethod,
    SweepSpec, TransitionSource,
};
use noisylab::losses::{backward_corrected, ce, mae_grad_logits, BaseLoss, LossSpec};
use noisylab::model::{grad_check, init, Arch, ModelParams, TrainConfig};
use noisylab::noise::{simulate_annotators, symmetric_transition, NoiseSpec, TransitionMatrix};
use noisylab::numerics::{sample_categorical, softmax, ProbVector, Rng};
use noisylab::procedures::ProcedureSpec;

// criterion 1
const GRAD_POINTS: usize = 100;
/// Near the cube root of machine epsilon, where central-difference roundoff
/// and truncation error balance.
const GRAD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-5;
/// Hidden pre-activations closer than this to zero count as ReLU kinks.
const KINK_MARGIN: f64 = 1e-4;
// criterion 2
const MAE_SAMPLES: usize = 1000;
const MAE_TOL: f64 = 1e-10;
// criterion 3
const MC_TRIPLES: usize = 20;
const MC_DRAWS: usize = 100_000;
const MC_SE: f64 = 3.0;
// criteria 4 and 5
const MAE_GAP_TOL: f64 = 0.02;
const CORRECTION_GAP_TOL: f64 = 0.03;
// criterion 6
const STAPLE_DIAG_TOL: f64 = 0.05;
const STAPLE_LL_SLACK: f64 = 1e-9;
// criterion 7
const CONFUSION_L1_TOL: f64 = 0.1;
// criterion 9
const FLAG_MIN: f64 = 0.7;
// criterion 10
const SWEEP_SLACK: f64 = 0.02;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

/// Harness configs run by criteria 4-10, replayed by criterion 11.
#[derive(Default)]
struct Runs {
    experiments: Vec<(ExperimentConfig, ExperimentReport)>,
    sweeps: Vec<(SweepSpec, Vec<String>)>,
    direct: Vec<(fn() -> String, String)>,
}

impl Runs {
    fn experiment(&mut self, config: ExperimentConfig) -> ExperimentReport {
        let report = run_experiment(&config).expect("experiment runs");
        self.experiments.push((config, report.clone()));
        report
    }
}

fn blobs(k: usize, n_per_class: usize, separation: f64) -> DatasetSpec {
    DatasetSpec::Blobs {
        k,
        n_per_class,
        d: 2,
        separation,
    }
}

fn config(dataset: DatasetSpec, noise: NoiseSpec, method: MethodSpec, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        dataset,
        test_fraction: 0.3,
        noise,
        annotators: None,
        method,
        train: TrainConfig::default(),
        seed,
        output: None,
    }
}

fn near_kink(p: &ModelParams, x: &[f64]) -> bool {
    let Arch::Mlp { hidden, .. } = p.arch else {
        return false;
    };
    (0..hidden).any(|h| {
        let z: f64 = p.tensors[1][(0, h)]
            + x.iter()
                .enumerate()
                .map(|(r, xr)| xr * p.tensors[0][(r, h)])
                .sum::<f64>();
        z.abs() < KINK_MARGIN
    })
}

fn random_transition(k: usize, rng: &mut Rng) -> TransitionMatrix {
    let rho = rng.uniform_range(0.05, 0.4);
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let w: Vec<f64> = (0..k)
                .map(|j| if i == j { 0.0 } else { rng.uniform() + 0.05 })
                .collect();
            let s: f64 = w.iter().sum();
            (0..k)
                .map(|j| if i == j { 1.0 - rho } else { rho * w[j] / s })
                .collect()
        })
        .collect();
    TransitionMatrix::from_rows(&rows).expect("row-stochastic")
}

fn random_probs(k: usize, rng: &mut Rng) -> ProbVector {
    let logits: Vec<f64> = (0..k).map(|_| 2.0 * rng.standard_normal()).collect();
    softmax(&logits).expect("finite")
}

fn c1_gradients() -> Verdict {
    let (d, k) = (3, 4);
    let mut rng = Rng::new(101);
    let t = random_transition(k, &mut rng);
    let losses = [
        LossSpec::Ce,
        LossSpec::Mae,
        LossSpec::Imae { tau: 8.0 },
        LossSpec::SmoothKl { epsilon: 0.1 },
        LossSpec::Backward {
            base: BaseLoss::Ce,
            t: Some(t.clone()),
        },
        LossSpec::Backward {
            base: BaseLoss::Mae,
            t: Some(t.clone()),
        },
        LossSpec::Forward { t: Some(t) },
    ];
    let archs = [Arch::Linear { d, k }, Arch::Mlp { d, hidden: 8, k }];
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for loss in &losses {
        for &arch in &archs {
            let mut checked = 0;
            while checked < GRAD_POINTS {
                let params = init(arch, rng.next_u64());
                let x: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
                let y = rng.below(k);
                if near_kink(&params, &x) {
                    skipped += 1;
                    continue;
                }
                worst = worst.max(grad_check(&params, &x, y, loss, GRAD_EPS).expect("grad check"));
                checked += 1;
            }
        }
    }
    Verdict::new(
        worst < GRAD_TOL,
        format!(
            "{} losses x 2 archs x {GRAD_POINTS} points, max rel err {worst:.2e} (< {GRAD_TOL:e}), {skipped} kink points resampled",
            losses.len()
        ),
    )
}

fn c2_mae_identity() -> Verdict {
    let mut rng = Rng::new(202);
    let mut worst: f64 = 0.0;
    for _ in 0..MAE_SAMPLES {
        let k = 2 + rng.below(9);
        let p = random_probs(k, &mut rng);
        let y = rng.below(k);
        let py = p.as_slice()[y];
        let norm: f64 = mae_grad_logits(p.as_slice(), y).iter().map(|g| g.abs()).sum();
        worst = worst.max((norm - 4.0 * py * (1.0 - py)).abs());
    }
    Verdict::new(
        worst <= MAE_TOL,
        format!("{MAE_SAMPLES} prob vectors, max |l1 - 4p(1-p)| = {worst:.2e} (<= {MAE_TOL:e})"),
    )
}

fn c3_unbiasedness() -> Verdict {
    let mut rng = Rng::new(303);
    let mut worst_z: f64 = 0.0;
    for _ in 0..MC_TRIPLES {
        let k = 2 + rng.below(4);
        let t = random_transition(k, &mut rng);
        let p = random_probs(k, &mut rng);
        let y = rng.below(k);
        let per_label: Vec<f64> = (0..k)
            .map(|j| backward_corrected(&t, BaseLoss::Ce, p.as_slice(), j).expect("invertible"))
            .collect();
        let row = ProbVector::new(t.row(y).to_vec()).expect("stochastic row");
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..MC_DRAWS {
            let v = per_label[sample_categorical(&row, &mut rng)];
            sum += v;
            sum_sq += v * v;
        }
        let n = MC_DRAWS as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
        let z = (mean - ce(p.as_slice(), y)).abs() / se.max(1e-15);
        worst_z = worst_z.max(z);
    }
    Verdict::new(
        worst_z <= MC_SE,
        format!("{MC_TRIPLES} (T, p, y) triples at {MC_DRAWS} draws, max |mean - CE| = {worst_z:.2} SE (<= {MC_SE})"),
    )
}

fn c4_mae_tolerance(runs: &mut Runs) -> Verdict {
    let noisy = NoiseSpec::Symmetric { rho: 0.3 };
    let run = |runs: &mut Runs, noise: &NoiseSpec, loss: LossSpec| {
        let mut c = config(blobs(3, 300, 8.0), noise.clone(), MethodSpec::with_loss(loss), 1);
        c.test_fraction = 0.5;
        runs.experiment(c).final_metrics.accuracy
    };
    let clean = run(runs, &NoiseSpec::None, LossSpec::Ce);
    let mae = run(runs, &noisy, LossSpec::Mae);
    let ce = run(runs, &noisy, LossSpec::Ce);
    let (mae_gap, ce_gap) = (clean - mae, clean - ce);
    Verdict::new(
        mae_gap.abs() <= MAE_GAP_TOL && ce_gap > mae_gap,
        format!("clean {clean:.4}, MAE {mae:.4} (gap {mae_gap:.4} <= {MAE_GAP_TOL}), CE {ce:.4} (gap {ce_gap:.4} > MAE gap)"),
    )
}

fn c5_corrections(runs: &mut Runs) -> Verdict {
    let dataset = blobs(3, 1000, 8.0);
    let clean = runs
        .experiment(config(dataset.clone(), NoiseSpec::None, MethodSpec::default(), 1))
        .final_metrics
        .accuracy;
    let corrected = |runs: &mut Runs, loss: LossSpec| {
        let method = MethodSpec {
            transition: Some(TransitionSource::True),
            ..MethodSpec::with_loss(loss)
        };
        runs.experiment(config(dataset.clone(), NoiseSpec::Symmetric { rho: 0.4 }, method, 1))
            .final_metrics
            .accuracy
    };
    let fw = corrected(runs, LossSpec::Forward { t: None });
    let bw = corrected(
        runs,
        LossSpec::Backward {
            base: BaseLoss::Ce,
            t: None,
        },
    );
    let gap = (clean - fw).max(clean - bw);
    Verdict::new(
        gap <= CORRECTION_GAP_TOL,
        format!("clean {clean:.4}, forward {fw:.4}, backward {bw:.4}, worst gap {gap:.4} (<= {CORRECTION_GAP_TOL})"),
    )
}

fn staple_run() -> (Vec<f64>, noisylab::annotators::StapleResult, Vec<f64>, f64) {
    let rhos = vec![0.1, 0.15, 0.2, 0.25, 0.3];
    let k = 3;
    let ds = gen_blobs(k, 5000 / k, 2, 8.0, 9).expect("blobs");
    let conf: Vec<_> = rhos
        .iter()
        .map(|&r| symmetric_transition(k, r).expect("valid"))
        .collect();
    let ds = simulate_annotators(&ds, &conf, &mut Rng::new(9)).expect("annotators");
    let ann = ds.annotator_labels().expect("annotator labels");
    let truth = ds.true_labels().expect("truth");
    let res = staple(ann, k, StapleConfig::default()).expect("staple");
    let acc = |labels: &mut dyn Iterator<Item = usize>| {
        labels.zip(truth).filter(|(a, b)| a == *b).count() as f64 / truth.len() as f64
    };
    let singles: Vec<f64> = (0..rhos.len()).map(|a| acc(&mut ann.iter().map(|r| r[a]))).collect();
    let fused = acc(&mut res.fused.iter().copied());
    (rhos, res, singles, fused)
}

fn staple_fingerprint() -> String {
    serde_json::to_string(&staple_run().1.model).expect("json")
}

fn c6_staple(runs: &mut Runs) -> Verdict {
    let (rhos, res, singles, fused) = staple_run();
    runs.direct
        .push((staple_fingerprint, serde_json::to_string(&res.model).expect("json")));
    let diag_err = res
        .model
        .accuracies()
        .iter()
        .zip(&rhos)
        .flat_map(|(d, rho)| d.iter().map(move |v| (v - (1.0 - rho)).abs()))
        .fold(0.0, f64::max);
    let best = singles.iter().copied().fold(0.0, f64::max);
    let min_step = res
        .log_likelihood
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    Verdict::new(
        diag_err <= STAPLE_DIAG_TOL && fused > best && min_step >= -STAPLE_LL_SLACK,
        format!(
            "max |diag - (1-rho)| {diag_err:.4} (<= {STAPLE_DIAG_TOL}), fused {fused:.4} > best single {best:.4}, min LL step {min_step:.2e} over {} iterations",
            res.iterations
        ),
    )
}

fn annotator_config(method: AnnotatorMethod) -> ExperimentConfig {
    let rows = [
        [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]],
        [[0.6, 0.3, 0.1], [0.1, 0.7, 0.2], [0.2, 0.1, 0.7]],
        [[0.7, 0.15, 0.15], [0.2, 0.6, 0.2], [0.05, 0.05, 0.9]],
    ];
    let annotators = rows
        .iter()
        .map(|m| NoiseSpec::Matrix {
            t: TransitionMatrix::from_rows(&m.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).expect("valid"),
        })
        .collect();
    ExperimentConfig {
        annotators: Some(annotators),
        ..config(
            blobs(3, 1000, 8.0),
            NoiseSpec::None,
            MethodSpec {
                annotator: Some(method),
                ..MethodSpec::default()
            },
            13,
        )
    }
}

fn c7_confusion(runs: &mut Runs) -> Verdict {
    let report = runs.experiment(annotator_config(AnnotatorMethod::Confusion { lambda_trace: 0.01 }));
    let l1 = report.diagnostics.annotator_l1.expect("recovered confusions");
    let baseline = runs.experiment(annotator_config(AnnotatorMethod::MajorityVote));
    let free = runs.experiment(annotator_config(AnnotatorMethod::Confusion { lambda_trace: 0.0 }));
    Verdict::new(
        l1 < CONFUSION_L1_TOL,
        format!(
            "mean row l1 {l1:.4} (< {CONFUSION_L1_TOL}), accuracy {:.4} vs majority vote {:.4}; lambda 0 control l1 {:.4}",
            report.final_metrics.accuracy,
            baseline.final_metrics.accuracy,
            free.diagnostics.annotator_l1.unwrap_or(f64::NAN)
        ),
    )
}

fn c8_relabel(runs: &mut Runs) -> Verdict {
    let warmup = 5;
    let mut c = config(
        blobs(3, 300, 4.0),
        NoiseSpec::Symmetric { rho: 0.3 },
        MethodSpec {
            procedure: Some(ProcedureSpec::DualRelabel {
                small_scale: 0.8,
                large_scale: 1.25,
                warmup_epochs: warmup,
            }),
            ..MethodSpec::default()
        },
        17,
    );
    c.train.epochs = warmup + 40;
    let report = runs.experiment(c);
    let agree = report.diagnostics.store_agreement.expect("store agreement");
    Verdict::new(
        agree.end > agree.start,
        format!(
            "store agreement with truth {:.4} -> {:.4} after {warmup} warm-up + 40 relabel epochs",
            agree.start, agree.end
        ),
    )
}

fn c9_cleaning(runs: &mut Runs) -> Verdict {
    let noise = NoiseSpec::FeatureDependent {
        rho_max: 0.3,
        beta: 0.25,
    };
    let cleaned = runs.experiment(config(
        blobs(3, 300, 4.0),
        noise.clone(),
        MethodSpec {
            clean: Some(CleanSpec::default()),
            ..MethodSpec::default()
        },
        29,
    ));
    let plain = runs.experiment(config(blobs(3, 300, 4.0), noise, MethodSpec::default(), 29));
    let score = cleaned.diagnostics.label_recovery.expect("label recovery");
    Verdict::new(
        score.precision >= FLAG_MIN && score.recall >= FLAG_MIN,
        format!(
            "precision {:.4}, recall {:.4} (>= {FLAG_MIN}) over {} flags; accuracy {:.4} vs plain {:.4}",
            score.precision, score.recall, score.flagged, cleaned.final_metrics.accuracy, plain.final_metrics.accuracy
        ),
    )
}

fn c10_sweep(runs: &mut Runs) -> Verdict {
    let spec = SweepSpec {
        template: config(blobs(3, 1000, 3.0), NoiseSpec::None, MethodSpec::default(), 41),
        noise_rates: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        methods: vec![NamedMethod {
            name: "ce".into(),
            method: MethodSpec::default(),
        }],
    };
    let out = run_sweep(&spec).expect("sweep");
    let fingerprints = out
        .reports
        .iter()
        .map(|r| r.as_ref().map_or(String::new(), |r| r.canonical_json().expect("json")))
        .collect();
    runs.sweeps.push((spec, fingerprints));
    let errors: Vec<f64> = out.errors_of("ce").iter().map(|(_, e)| e.unwrap_or(f64::NAN)).collect();
    let worst_drop = errors.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
    let r2 = out.baseline_fit.map_or(f64::NAN, |f| f.r_squared);
    Verdict::new(
        worst_drop <= SWEEP_SLACK,
        format!("errors {errors:.4?}, largest decrease {worst_drop:.4} (<= {SWEEP_SLACK}), quadratic R^2 {r2:.3}"),
    )
}

fn c11_determinism(runs: &Runs) -> Verdict {
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for (c, report) in &runs.experiments {
        let again = run_experiment(c).expect("rerun");
        compared += 1;
        if again.canonical_json().expect("json") != report.canonical_json().expect("json") {
            mismatches.push(report.pipeline.clone());
        }
    }
    for (spec, prints) in &runs.sweeps {
        let again = run_sweep(spec).expect("rerun");
        for (r, before) in again.reports.iter().zip(prints) {
            compared += 1;
            let now = r.as_ref().map_or(String::new(), |r| r.canonical_json().expect("json"));
            if &now != before {
                mismatches.push("sweep".into());
            }
        }
    }
    for (rerun, before) in &runs.direct {
        compared += 1;
        if &rerun() != before {
            mismatches.push("staple".into());
        }
    }
    Verdict::new(
        mismatches.is_empty() && compared > 0,
        format!("{compared} runs replayed, mismatches: {mismatches:?}"),
    )
}

fn main() -> ExitCode {
    let mut runs = Runs::default();
    let mut failed = 0;
    let mut report = |id: usize, name: &str, limit: Option<u64>, f: &mut dyn FnMut() -> Verdict| {
        let t0 = Instant::now();
        let v = f();
        let elapsed = t0.elapsed();
        let in_time = limit.is_none_or(|l| elapsed <= Duration::from_secs(l));
        let pass = v.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget = limit.map_or(String::new(), |l| format!(" / {l} s"));
        println!(
            "criterion {id:>2} {}: {name}: {} [{:.2} s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64()
        );
    };
    report(1, "gradient check", Some(10), &mut c1_gradients);
    report(2, "MAE gradient-norm identity", Some(10), &mut c2_mae_identity);
    report(3, "backward-correction unbiasedness", Some(10), &mut c3_unbiasedness);
    report(4, "MAE noise tolerance", Some(30), &mut || c4_mae_tolerance(&mut runs));
    report(5, "forward/backward correction", Some(30), &mut || {
        c5_corrections(&mut runs)
    });
    report(6, "STAPLE recovery", Some(10), &mut || c6_staple(&mut runs));
    report(7, "annotator confusion estimation", Some(60), &mut || {
        c7_confusion(&mut runs)
    });
    report(8, "dual relabeling", None, &mut || c8_relabel(&mut runs));
    report(9, "iterative cleaning", None, &mut || c9_cleaning(&mut runs));
    report(10, "noise-rate sweep", Some(120), &mut || c10_sweep(&mut runs));
    report(11, "determinism", None, &mut || c11_determinism(&runs));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
