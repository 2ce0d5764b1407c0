use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use epsnv::dataset::{load_csv, save_csv, scale, Dataset, ScalingRecord};
use epsnv::eval::{evaluate, EvalReport};
use epsnv::experiment::{fmt_sig, run_experiment, write_reports, ExperimentConfig, ExperimentOutcome};
use epsnv::learner::{loss_for, Hyperparams, LearnerRegistry, TrainedModel};
use epsnv::loss::LossSpec;
use epsnv::synth::{generate, split_chronological, with_q_star, DemandModelParams};
use epsnv::theory::{stability_probe, uas_records};
use epsnv::tuning::{load_tuned, save_tuned, two_stage_protocol, CvPlan, SearchSpace};
use epsnv::Error;

#[derive(Parser)]
#[command(name = "epsnv", version, about = "Order-quantity learning from censored sales")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write scaled train/test CSVs.
    GenData(GenDataArgs),
    /// Run the two-stage hyperparameter search for one learner.
    Tune(TuneArgs),
    /// Fit one learner at one critical ratio and save the model.
    Train(TrainArgs),
    /// Evaluate a saved model on a test CSV.
    Eval(EvalArgs),
    /// Run the full sweep and write the report tree.
    Experiment(ExperimentArgs),
    /// Compare leave-one-out and swap distances against the stability bounds.
    StabilityProbe(ProbeArgs),
    /// Rebuild the report tree from a saved experiment outcome.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory; receives train.csv, test.csv and their .scaling sidecars.
    #[arg(long)]
    out: PathBuf,
    /// Also write the optimal quantity at this critical ratio.
    #[arg(long)]
    alpha: Option<f64>,
    /// JSON file with demand model coefficients.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    algorithm: String,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.55, 0.65, 0.75, 0.85, 0.95])]
    alphas: Vec<f64>,
    #[arg(long, default_value_t = 30)]
    budget: usize,
    #[arg(long, default_value_t = 4)]
    folds: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    algorithm: String,
    #[arg(long)]
    alpha: f64,
    /// Output of `tune`; the entry for (algorithm, alpha) is used.
    #[arg(long)]
    tuned: Option<PathBuf>,
    /// Hyperparameter overrides, e.g. `--set eta=0.01 --set eps1=0.2`.
    #[arg(long = "set", value_name = "NAME=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Defaults to the value recorded by `train`.
    #[arg(long)]
    alpha: Option<f64>,
    /// Report JSON; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    algorithms: Option<Vec<String>>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![50, 100, 200])]
    n: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    p: usize,
    #[arg(long, default_value_t = 0.55)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1976)]
    eps1: f64,
    #[arg(long, default_value_t = 0.0022)]
    eps2: f64,
    #[arg(long, default_value_t = 20)]
    instances: u64,
    /// Seeds of the network swap probe; 0 skips it.
    #[arg(long, default_value_t = 3)]
    uas_seeds: u64,
    #[arg(long, default_value_t = 10)]
    swaps: usize,
    #[arg(long, default_value_t = 100)]
    uas_n: usize,
    #[arg(long, default_value_t = 3)]
    passes: usize,
    #[arg(long, default_value_t = 1e-3)]
    eta: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `experiment`.
    #[arg(long)]
    from: PathBuf,
    /// Defaults to `--from`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ok = 0,
    Usage = 1,
    Partial = 2,
    Io = 3,
}

struct Failure {
    status: Status,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => Status::Io,
            Error::Config(_)
            | Error::Input(_)
            | Error::Dimension { .. }
            | Error::Parse { .. }
            | Error::UnknownLearner(_)
            | Error::Json(_) => Status::Usage,
            _ => Status::Partial,
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        status: Status::Usage,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<Status, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Status::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::StabilityProbe(a) => cmd_stability_probe(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(status) => ExitCode::from(status as u8),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.status as u8)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn check_alpha(alpha: f64) -> Result<(), Failure> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(usage(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn cmd_gen_data(args: GenDataArgs) -> CmdResult {
    let params: DemandModelParams = match &args.params {
        Some(p) => read_json(p)?,
        None => DemandModelParams::default(),
    };
    let full = generate(&params, args.seed);
    let (train, mut test) = split_chronological(&full)?;
    if let Some(alpha) = args.alpha {
        check_alpha(alpha)?;
        test = with_q_star(&test, &params, alpha)?;
    }
    let (train, test, _) = scale(&train, &test)?;
    create_dir(&args.out)?;
    save_csv(&train, &args.out.join("train.csv"))?;
    save_csv(&test, &args.out.join("test.csv"))?;
    println!("train rows {}", train.len());
    println!("test rows {}", test.len());
    Ok(Status::Ok)
}

fn cmd_tune(args: TuneArgs) -> CmdResult {
    let registry = LearnerRegistry::default();
    let learner = registry.get(&args.algorithm)?;
    for &a in &args.alphas {
        check_alpha(a)?;
    }
    let train = load_csv(&args.train)?;
    let plan = CvPlan {
        folds: args.folds,
        shuffle: true,
        seed: args.seed,
        budget: args.budget,
    };
    let tuned = two_stage_protocol(
        &train,
        learner,
        &Hyperparams::default(),
        &args.alphas,
        &SearchSpace::default_eps(),
        &plan,
    )?;
    save_tuned(&tuned, &args.out)?;
    for t in &tuned {
        println!(
            "{} alpha {} eta {} batch {} eps1 {} eps2 {}",
            t.learner,
            fmt_sig(t.alpha),
            fmt_sig(t.hyperparams.eta),
            t.hyperparams.batch_size,
            fmt_sig(t.hyperparams.eps1),
            fmt_sig(t.hyperparams.eps2)
        );
    }
    Ok(Status::Ok)
}

fn meta_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn scaling_path(model: &Path) -> PathBuf {
    epsnv::dataset::sidecar_path(model)
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    check_alpha(args.alpha)?;
    let registry = LearnerRegistry::default();
    let learner = registry.get(&args.algorithm)?;
    let train = load_csv(&args.train)?;
    let mut hp = match &args.tuned {
        Some(path) => load_tuned(path)?
            .into_iter()
            .find(|t| t.learner == args.algorithm && t.alpha == args.alpha)
            .map(|t| t.hyperparams)
            .ok_or_else(|| {
                usage(format!(
                    "{} has no entry for {} at alpha {}",
                    path.display(),
                    args.algorithm,
                    args.alpha
                ))
            })?,
        None => Hyperparams::default(),
    };
    for o in &args.overrides {
        let (name, value) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("override `{o}` is not NAME=VALUE")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| usage(format!("override `{o}` has a non-numeric value")))?;
        hp.set(name.trim(), value)?;
    }
    let spec = loss_for(learner.loss_kind(), args.alpha, &hp)?;
    let fitted = learner.fit(&train, &spec, &hp, args.seed)?;
    fitted.model.save(&args.out)?;
    if let Some(record) = &train.scaling {
        write_text(&scaling_path(&args.out), &record.to_text())?;
    }
    let meta = json!({
        "algorithm": args.algorithm,
        "alpha": args.alpha,
        "seed": args.seed,
        "hyperparams": hp,
        "fit_seconds": fitted.fit_seconds,
    });
    write_text(&meta_path(&args.out), &serde_json::to_string_pretty(&meta).expect("plain JSON value"))?;
    println!("{} alpha {} fit_seconds {}", args.algorithm, fmt_sig(args.alpha), fmt_sig(fitted.fit_seconds));
    Ok(Status::Ok)
}

/// Maps the scaled targets of `ds` back to original units.
fn unscale_targets(ds: &Dataset, record: &ScalingRecord) -> Dataset {
    let mut out = ds.clone();
    for r in &mut out.rows {
        r.sale = record.invert_target(r.sale);
        r.demand = r.demand.map(|v| record.invert_target(v));
        r.q_star = r.q_star.map(|v| record.invert_target(v));
    }
    out.scaling = None;
    out
}

fn opt_json(v: Option<f64>) -> String {
    v.map(fmt_sig).unwrap_or_else(|| "null".into())
}

fn report_json(algorithm: Option<&str>, alpha: f64, rows: usize, r: &EvalReport) -> String {
    let mut s = String::from("{\n");
    if let Some(a) = algorithm {
        let _ = writeln!(s, "  \"algorithm\": {},", json!(a));
    }
    let _ = writeln!(s, "  \"alpha\": {},", fmt_sig(alpha));
    let _ = writeln!(s, "  \"rows\": {rows},");
    let _ = writeln!(s, "  \"nv_cost\": {},", opt_json(r.nv_cost));
    let _ = writeln!(s, "  \"rmse_q\": {},", opt_json(r.rmse_q));
    let _ = writeln!(s, "  \"service_level\": {},", opt_json(r.service_level));
    let _ = writeln!(s, "  \"service_gap\": {},", opt_json(r.service_gap));
    let _ = writeln!(s, "  \"fit_seconds\": {}", fmt_sig(r.fit_seconds));
    s.push_str("}\n");
    s
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let model = TrainedModel::load(&args.model)?;
    let meta: Option<serde_json::Value> = {
        let p = meta_path(&args.model);
        if p.exists() {
            Some(read_json(&p)?)
        } else {
            None
        }
    };
    let alpha = match args.alpha.or_else(|| meta.as_ref().and_then(|m| m["alpha"].as_f64())) {
        Some(a) => a,
        None => return Err(usage("no --alpha given and the model has no metadata")),
    };
    check_alpha(alpha)?;
    let test = load_csv(&args.test)?;
    let got = test.dim()?;
    if got != model.input_dim() {
        return Err(Failure::from(Error::Dimension {
            expected: model.input_dim(),
            got,
        })
        .with_context(format!(
            "{}: feature columns f01..f{:02} expected, found {got} feature columns",
            args.test.display(),
            model.input_dim()
        )));
    }
    // A test file with a sidecar is already scaled; a raw one is scaled with the model's record.
    let model_scaling = {
        let p = scaling_path(&args.model);
        if p.exists() {
            let text = fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            Some(ScalingRecord::from_text(&text)?)
        } else {
            None
        }
    };
    let (inputs, original, record) = match (&test.scaling, &model_scaling) {
        (Some(rec), _) => (test.clone(), unscale_targets(&test, rec), Some(rec.clone())),
        (None, Some(rec)) => {
            let mut scaled = test.clone();
            for r in &mut scaled.rows {
                r.features = rec.scale_features(&r.features);
            }
            (scaled, test.clone(), Some(rec.clone()))
        }
        (None, None) => (test.clone(), test.clone(), None),
    };
    let raw = model.predict_all(&inputs)?;
    let predictions: Vec<f64> = match &record {
        Some(rec) => raw.iter().map(|&v| rec.invert_target(v)).collect(),
        None => raw,
    };
    let fit_seconds = meta.as_ref().and_then(|m| m["fit_seconds"].as_f64()).unwrap_or(0.0);
    let report = evaluate(&original, &predictions, alpha, fit_seconds)?;
    let algorithm = meta.as_ref().and_then(|m| m["algorithm"].as_str().map(str::to_string));
    let text = report_json(algorithm.as_deref(), alpha, original.len(), &report);
    match &args.out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    if let Some(p) = &args.predictions {
        let mut csv = String::from("row,prediction\n");
        for (i, v) in predictions.iter().enumerate() {
            let _ = writeln!(csv, "{i},{}", fmt_sig(*v));
        }
        write_text(p, &csv)?;
    }
    if report.nv_cost.is_none() {
        eprintln!("note: test rows carry no demand; nv_cost and service level are unavailable");
    }
    Ok(Status::Ok)
}

impl Failure {
    fn with_context(mut self, context: String) -> Self {
        self.message = format!("{context} ({})", self.message);
        self
    }
}

fn cmd_experiment(args: ExperimentArgs) -> CmdResult {
    let mut config: ExperimentConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = args.alphas {
        config.alphas = v;
    }
    if let Some(v) = args.seeds {
        config.seeds = v;
    }
    if let Some(v) = args.algorithms {
        config.algorithms = v.into_iter().filter(|s| !s.is_empty()).collect();
    }
    if let Some(v) = args.budget {
        config.budget = v;
    }
    if let Some(v) = args.folds {
        config.folds = v;
    }
    let registry = LearnerRegistry::default();
    config.validate(&registry)?;
    create_dir(&args.out)?;
    let outcome = run_experiment(&config, &registry)?;
    write_text(
        &args.out.join("outcome.json"),
        &serde_json::to_string(&json!({ "config": config, "outcome": outcome })).expect("serializable outcome"),
    )?;
    write_reports(&outcome, &config, &args.out)?;
    for f in &outcome.failures {
        eprintln!(
            "failed: seed {} alpha {} {} at {}: {}",
            f.seed,
            f.alpha.map(fmt_sig).unwrap_or_else(|| "-".into()),
            f.algorithm,
            f.stage,
            f.message
        );
    }
    println!("{} runs, {} failures", outcome.runs.len(), outcome.failures.len());
    Ok(if outcome.failures.is_empty() {
        Status::Ok
    } else {
        Status::Partial
    })
}

fn cmd_report(args: ReportArgs) -> CmdResult {
    #[derive(serde::Deserialize)]
    struct Saved {
        config: ExperimentConfig,
        outcome: ExperimentOutcome,
    }
    let saved: Saved = read_json(&args.from.join("outcome.json"))?;
    let out = args.out.unwrap_or(args.from);
    write_reports(&saved.outcome, &saved.config, &out)?;
    Ok(if saved.outcome.failures.is_empty() {
        Status::Ok
    } else {
        Status::Partial
    })
}

fn cmd_stability_probe(args: ProbeArgs) -> CmdResult {
    check_alpha(args.alpha)?;
    if args.n.is_empty() || args.instances == 0 {
        return Err(usage("need at least one n and one instance"));
    }
    let spec = LossSpec::eps_nv(args.alpha, args.eps1, args.eps2)?;
    create_dir(&args.out)?;
    let mut csv = String::from("n,p,seed,sup_loo,xi,pass\n");
    let mut violations = 0usize;
    for &n in &args.n {
        let mut sum = 0.0;
        for seed in 1..=args.instances {
            let r = stability_probe(n, args.p, &spec, seed)?;
            sum += r.sup_loo;
            violations += usize::from(!r.pass);
            let _ = writeln!(csv, "{},{},{},{},{},{}", r.n, r.p, r.seed, fmt_sig(r.sup_loo), fmt_sig(r.xi), r.pass);
        }
        println!(
            "n {n}: mean sup {} xi {}",
            fmt_sig(sum / args.instances as f64),
            fmt_sig(epsnv::theory::stability_parameter(args.p, n, args.alpha, 1.0, args.eps2))
        );
    }
    write_text(&args.out.join("stability.csv"), &csv)?;

    let mut uas = String::from("seed,swap_index,distance,bound,pass\n");
    for seed in 1..=args.uas_seeds {
        for r in uas_records(args.uas_n, args.p.max(2), (7, 5), &spec, args.eta, args.passes, seed, args.swaps)? {
            violations += usize::from(!r.pass);
            let _ = writeln!(uas, "{},{},{},{},{}", r.seed, r.swap_index, fmt_sig(r.distance), fmt_sig(r.bound), r.pass);
        }
    }
    if args.uas_seeds > 0 {
        write_text(&args.out.join("uas.csv"), &uas)?;
    }
    println!("{violations} bound violations");
    Ok(Status::Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn report_json_marks_missing_metrics() {
        let r = EvalReport {
            nv_cost: None,
            rmse_q: None,
            service_level: None,
            service_gap: None,
            abs_errors: None,
            fit_seconds: 0.5,
        };
        let text = report_json(Some("LR-NVC"), 0.85, 3, &r);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["nv_cost"].is_null());
        assert_eq!(v["rows"], 3);
        assert_eq!(v["alpha"].as_f64(), Some(0.85));
    }
}
