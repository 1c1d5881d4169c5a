use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use noisylab::annotators::{majority_vote_all, staple, AnnotatorModel, StapleConfig};
use noisylab::data::{gen_blobs, gen_rings, load_csv, save_csv, LabeledDataset, TrainingView};
use noisylab::harness::{render_markdown, run_experiment, run_sweep, ExperimentConfig, ExperimentReport, SweepSpec};
use noisylab::io::{read_json, write_atomic, write_json};
use noisylab::model::TrainConfig;
use noisylab::noise::{estimate_transition, simulate_annotators, NoiseSpec, TransitionMatrix};
use noisylab::numerics::Rng;
use noisylab::procedures::{iterative_clean, CleanConfig};
use noisylab::Error;

/// Synthetic label-noise experiments.
#[derive(Debug, Parser)]
#[command(name = "noisylab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset as CSV.
    Gen(GenArgs),
    /// Corrupt labels and/or simulate annotators.
    Noise(NoiseArgs),
    /// Run one experiment from a JSON config.
    Train(ConfigArgs),
    /// Fuse annotator labels (STAPLE or majority vote).
    Fuse(FuseArgs),
    /// Iterative label cleaning with a trusted subset.
    Clean(CleanArgs),
    /// Run a noise-rate x method grid.
    Sweep(ConfigArgs),
    /// Render a report JSON as markdown.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Gaussian blobs: k=<classes> n=<per class> d=<dim> sep=<separation> [seed=<u64>]
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE", conflicts_with = "rings")]
    blobs: Option<Vec<String>>,
    /// Concentric rings: k=<classes> n=<per class> std=<radial noise> [seed=<u64>]
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
    rings: Option<Vec<String>>,
    /// Overrides `seed=` in the generator arguments.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct NoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Symmetric noise rate.
    #[arg(long, conflicts_with = "spec")]
    symmetric: Option<f64>,
    /// JSON file with a noise spec, e.g. {"kind": "feature_dependent", "rho_max": 0.3, "beta": 0.25}.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// JSON file with a list of class-conditional noise specs, one per annotator.
    #[arg(long)]
    annotators: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum FuseMethod {
    Staple,
    Majority,
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// CSV with ann0..annA-1 columns.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "staple")]
    method: FuseMethod,
    #[arg(long, default_value_t = StapleConfig::default().max_iters)]
    max_iters: usize,
    #[arg(long, default_value_t = StapleConfig::default().tol)]
    tol: f64,
    /// Annotator model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Dataset CSV with the fused labels; defaults to `--out` with a `.csv` extension.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CleanArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Small CSV whose `true` column is trusted.
    #[arg(long)]
    trusted: PathBuf,
    /// JSON with optional `train` (TrainConfig) and `clean` (CleanConfig) objects.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Output directory for store.json, flags.csv and cleaned.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// report.json, or a directory containing one.
    #[arg(long = "in")]
    input: PathBuf,
    /// Markdown output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CleanFile {
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    clean: CleanConfig,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn read_text(path: &Path) -> noisylab::Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Missing files are runtime errors; malformed JSON is a validation error.
fn read_config<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> noisylab::Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| usage(format!("bad {what} in {}: {e}", path.display())))
}

fn key_values(items: &[String]) -> noisylab::Result<BTreeMap<String, String>> {
    items
        .iter()
        .map(|item| {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| usage(format!("expected KEY=VALUE, got `{item}`")))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

fn take<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> noisylab::Result<Option<T>> {
    map.remove(key)
        .map(|v| v.parse().map_err(|_| usage(format!("bad value for `{key}`: `{v}`"))))
        .transpose()
}

fn need<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> noisylab::Result<T> {
    take(map, key)?.ok_or_else(|| usage(format!("missing `{key}=`")))
}

fn no_leftovers(map: &BTreeMap<String, String>) -> noisylab::Result<()> {
    match map.keys().next() {
        Some(k) => Err(usage(format!("unknown generator argument `{k}`"))),
        None => Ok(()),
    }
}

fn gen(args: GenArgs) -> noisylab::Result<()> {
    let ds = match (&args.blobs, &args.rings) {
        (Some(items), None) => {
            let mut m = key_values(items)?;
            let (k, n, d, sep) = (
                need(&mut m, "k")?,
                need(&mut m, "n")?,
                need(&mut m, "d")?,
                need(&mut m, "sep")?,
            );
            let seed = args.seed.or(take(&mut m, "seed")?).unwrap_or(0);
            no_leftovers(&m)?;
            gen_blobs(k, n, d, sep, seed)?
        }
        (None, Some(items)) => {
            let mut m = key_values(items)?;
            let (k, n, std) = (need(&mut m, "k")?, need(&mut m, "n")?, need(&mut m, "std")?);
            let seed = args.seed.or(take(&mut m, "seed")?).unwrap_or(0);
            no_leftovers(&m)?;
            gen_rings(k, n, std, seed)?
        }
        _ => return Err(usage("choose one generator: --blobs or --rings")),
    };
    save_csv(&ds, &args.out)?;
    println!(
        "wrote {} samples ({} classes) to {}",
        ds.len(),
        ds.num_classes(),
        args.out.display()
    );
    Ok(())
}

fn noise(args: NoiseArgs) -> noisylab::Result<()> {
    let ds = load_csv(&args.input)?;
    let spec = match (args.symmetric, &args.spec) {
        (Some(rho), None) => Some(NoiseSpec::Symmetric { rho }),
        (None, Some(path)) => Some(read_config::<NoiseSpec>(path, "noise spec")?),
        _ => None,
    };
    if spec.is_none() && args.annotators.is_none() {
        return Err(usage("nothing to do: give --symmetric, --spec or --annotators"));
    }
    let root = Rng::new(args.seed);
    let mut out = ds;
    if let Some(spec) = spec {
        out = spec.apply(&out, &mut root.fork(3))?;
    }
    if let Some(path) = &args.annotators {
        let specs: Vec<NoiseSpec> = read_config(path, "annotator specs")?;
        let k = out.num_classes();
        let confusions = specs
            .iter()
            .map(|s| {
                s.validate(k)?;
                s.transition(k)?
                    .ok_or_else(|| usage("annotators must be class-conditional (none, symmetric or matrix)"))
            })
            .collect::<noisylab::Result<Vec<TransitionMatrix>>>()?;
        out = simulate_annotators(&out, &confusions, &mut root.fork(4))?;
    }
    save_csv(&out, &args.out)?;
    let flipped = out.flip_indicators().map_or(0, |f| f.iter().filter(|b| **b).count());
    println!(
        "wrote {} samples ({flipped} flipped) to {}",
        out.len(),
        args.out.display()
    );
    Ok(())
}

fn load_config(args: &ConfigArgs) -> noisylab::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_json(&read_text(&args.config)?)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output = Some(out.clone());
    }
    Ok(config)
}

fn summary(r: &ExperimentReport) -> String {
    format!(
        "{}: accuracy {:.4}, macro-F1 {:.4}, ECE {:.4}",
        r.pipeline, r.final_metrics.accuracy, r.final_metrics.macro_f1, r.final_metrics.ece
    )
}

fn train(args: ConfigArgs) -> noisylab::Result<()> {
    let config = load_config(&args)?;
    let report = run_experiment(&config)?;
    println!("{}", summary(&report));
    if let Some(dir) = &config.output {
        println!("report written to {}", dir.display());
    }
    Ok(())
}

fn sweep(args: ConfigArgs) -> noisylab::Result<()> {
    let mut spec: SweepSpec = read_config(&args.config, "sweep config")?;
    if let Some(seed) = args.seed {
        spec.template.seed = seed;
    }
    if let Some(out) = &args.out {
        spec.template.output = Some(out.clone());
    }
    let out = run_sweep(&spec)?;
    print!("{}", out.summary_csv());
    if let Some(fit) = out.baseline_fit {
        println!(
            "baseline quadratic fit: a={:.4} b={:.4} c={:.4} R^2={:.4}",
            fit.a, fit.b, fit.c, fit.r_squared
        );
    }
    if let Some(dir) = &spec.template.output {
        for (row, report) in out.rows.iter().zip(&out.reports) {
            if let Some(r) = report {
                r.write_to(&dir.join(format!("{}_rho{}", row.method, row.rho)))?;
            }
        }
    }
    Ok(())
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn fuse(args: FuseArgs) -> noisylab::Result<()> {
    let ds = load_csv(&args.input)?;
    let ann = ds
        .annotator_labels()
        .ok_or_else(|| usage("input has no annotator columns (ann0, ann1, ...)"))?;
    let k = ds.num_classes();
    let (model, labels) = match args.method {
        FuseMethod::Staple => {
            let res = staple(
                ann,
                k,
                StapleConfig {
                    max_iters: args.max_iters,
                    tol: args.tol,
                },
            )?;
            eprintln!("STAPLE: {} iterations, converged: {}", res.iterations, res.converged);
            (res.model, res.fused)
        }
        FuseMethod::Majority => {
            let labels = majority_vote_all(ann)?;
            let confusions = (0..ds.num_annotators())
                .map(|a| {
                    let pairs: Vec<(usize, usize)> = labels.iter().zip(ann).map(|(&y, row)| (y, row[a])).collect();
                    estimate_transition(&pairs, k, 1.0)
                })
                .collect::<noisylab::Result<Vec<_>>>()?;
            let mut prior = vec![0.0; k];
            for &y in &labels {
                prior[y] += 1.0 / labels.len() as f64;
            }
            let prior = noisylab::numerics::ProbVector::new(prior)?;
            (AnnotatorModel { prior, confusions }, labels)
        }
    };
    write_json(&args.out, &model)?;
    let labels_path = args.labels.unwrap_or_else(|| with_extension(&args.out, "csv"));
    let fused = ds.clone().with_labels(labels)?;
    save_csv(&fused, &labels_path)?;
    println!("wrote {} and {}", args.out.display(), labels_path.display());
    Ok(())
}

fn clean(args: CleanArgs) -> noisylab::Result<()> {
    let noisy = load_csv(&args.input)?;
    let trusted = load_csv(&args.trusted)?;
    if trusted.true_labels().is_none() {
        return Err(usage("the trusted CSV needs a `true` column"));
    }
    let file: CleanFile = match &args.config {
        Some(path) => read_config(path, "clean config")?,
        None => CleanFile::default(),
    };
    let train_config = TrainConfig {
        seed: args.seed,
        ..file.train
    };
    let out = iterative_clean(&TrainingView::new(&noisy), &trusted, &train_config, &file.clean, None)?;
    std::fs::create_dir_all(&args.out).map_err(|source| Error::Io {
        path: args.out.clone(),
        source,
    })?;
    write_json(&args.out.join("store.json"), &out.store)?;
    let mut flags = String::from("index,flagged\n");
    for (i, f) in out.flags.iter().enumerate() {
        flags.push_str(&format!("{i},{}\n", u8::from(*f)));
    }
    write_atomic(&args.out.join("flags.csv"), flags.as_bytes())?;
    let cleaned: LabeledDataset = noisy.clone().with_labels(out.store.classes())?;
    save_csv(&cleaned, args.out.join("cleaned.csv"))?;
    let total: usize = out.flags.iter().filter(|f| **f).count();
    println!(
        "flagged {total} of {} samples over {} rounds",
        noisy.len(),
        out.rounds.len()
    );
    Ok(())
}

fn report(args: ReportArgs) -> noisylab::Result<()> {
    let path = if args.input.is_dir() {
        args.input.join("report.json")
    } else {
        args.input.clone()
    };
    let report: ExperimentReport = read_json(&path)?;
    let md = render_markdown(&report);
    match &args.out {
        Some(out) => write_atomic(out, md.as_bytes())?,
        None => print!("{md}"),
    }
    Ok(())
}

fn run(cli: Cli) -> noisylab::Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Noise(a) => noise(a),
        Command::Train(a) => train(a),
        Command::Fuse(a) => fuse(a),
        Command::Clean(a) => clean(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
