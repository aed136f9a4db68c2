use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use sedloss::data::{compute_stats, generate_dataset, tut_like_preset_with, Dataset, DatasetStats};
use sedloss::dataset_io::{read_dataset, write_dataset};
use sedloss::gradcheck::{check_loss, check_model, LOSS_NAMES};
use sedloss::kv::KvMap;
use sedloss::losses::{FbtlPooling, LossSpec};
use sedloss::metrics::{report_csv_header, report_csv_row, EvalConfig};
use sedloss::model::save_checkpoint;
use sedloss::trainer::{
    aggregate_csv, compare_losses, history_csv, sweep, train, ExperimentResult, FrequencyScope,
    RunRecord, SweepAxis, TrainConfig,
};
use sedloss::Error;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

const CONFIG_HELP: &str = "Every option except --config can also be set as a `key=value` line in \
the file given by --config, where the key is the long option name without the leading `--` \
(for example `feature-dim=8`). Options given on the command line take precedence over the \
file. Unknown keys are rejected.";

#[derive(Parser, Debug)]
#[command(
    name = "sedloss",
    version,
    about = "Loss-function study for frame-level sound event detection"
)]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    #[command(after_help = CONFIG_HELP)]
    GenData(GenDataArgs),
    /// Print frame and instance statistics of a dataset directory.
    #[command(after_help = CONFIG_HELP)]
    Stats(StatsArgs),
    /// Compare analytic gradients against central finite differences.
    #[command(after_help = CONFIG_HELP)]
    GradCheck(GradCheckArgs),
    /// Train one model and evaluate it on the dev split.
    #[command(after_help = CONFIG_HELP)]
    Train(TrainArgs),
    /// Train over a grid of values of one loss hyperparameter.
    #[command(after_help = CONFIG_HELP)]
    Sweep(SweepArgs),
    /// Train several losses over the same seeds and tabulate them.
    #[command(after_help = CONFIG_HELP)]
    Compare(CompareArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Stats(_) => "stats",
            Command::GradCheck(_) => "grad-check",
            Command::Train(_) => "train",
            Command::Sweep(_) => "sweep",
            Command::Compare(_) => "compare",
        }
    }

    fn config(&self) -> Option<&Path> {
        match self {
            Command::GenData(a) => a.config.as_deref(),
            Command::Stats(a) => a.config.as_deref(),
            Command::GradCheck(a) => a.config.as_deref(),
            Command::Train(a) => a.common.config.as_deref(),
            Command::Sweep(a) => a.common.config.as_deref(),
            Command::Compare(a) => a.common.config.as_deref(),
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Preset {
    TutLike,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// key=value file with defaults for the options below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tut-like")]
    preset: Preset,
    /// Number of clips.
    #[arg(long, default_value_t = 250, value_parser = clap::value_parser!(u64).range(1..))]
    clips: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feature dimension D.
    #[arg(long, default_value_t = sedloss::data::DEFAULT_FEATURE_DIM as u64, value_parser = clap::value_parser!(u64).range(1..))]
    feature_dim: u64,
    /// Standard deviation of the background noise.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Signature amplitude applied to every class.
    #[arg(long)]
    amplitude: Option<f64>,
    /// Output dataset directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// key=value file with defaults for the options below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// key=value file with defaults for the options below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Check only this loss family (bce, srl, ifl, afl, fbtl, model).
    #[arg(long)]
    loss: Option<String>,
    /// Random cases per loss.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    cases: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ScopeArg {
    Batch,
    Epoch,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PoolingArg {
    Batch,
    PerClip,
}

/// Options shared by every training subcommand.
#[derive(Args, Debug)]
struct CommonTrain {
    /// key=value file with defaults for the options below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Separate dev dataset directory. Without it the last dev-clips clips
    /// of --data are held out.
    #[arg(long)]
    dev_data: Option<PathBuf>,
    /// Clips held out for evaluation when --dev-data is absent
    /// [default: one fifth of the clips].
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    dev_clips: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().epochs as u64, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    /// Clips per mini-batch.
    #[arg(long, default_value_t = TrainConfig::default().batch_clips as u64, value_parser = clap::value_parser!(u64).range(1..))]
    batch_clips: u64,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::default().adam_beta1)]
    adam_beta1: f64,
    #[arg(long, default_value_t = TrainConfig::default().adam_beta2)]
    adam_beta2: f64,
    #[arg(long, default_value_t = TrainConfig::default().adam_eps)]
    adam_eps: f64,
    /// Hidden units.
    #[arg(long, default_value_t = TrainConfig::default().hidden as u64, value_parser = clap::value_parser!(u64).range(1..))]
    hidden: u64,
    /// Context frames on each side of the centre frame.
    #[arg(long, default_value_t = TrainConfig::default().window_radius as u64)]
    window_radius: u64,
    /// Decision threshold on the scores.
    #[arg(long, default_value_t = EvalConfig::default().threshold)]
    threshold: f64,
    /// Where IFL counts class frequencies.
    #[arg(long, value_enum, default_value = "batch")]
    ifl_scope: ScopeArg,
    /// Whether FBTL pools its sums over the batch or per clip.
    #[arg(long, value_enum, default_value = "batch")]
    fbtl_pooling: PoolingArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonTrain,
    /// Loss method string, e.g. bce, srl:0.3535, afl:0.0625:1.0.
    #[arg(long, default_value = "bce")]
    loss: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonTrain,
    /// Base loss whose remaining hyperparameters are kept.
    #[arg(long, default_value = "bce")]
    loss: String,
    /// One of srl.beta, afl.zeta, afl.gamma, ifl.gamma, fbtl.alpha.
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated values.
    #[arg(long)]
    values: Option<String>,
    /// Seeds 0..seeds per value.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    /// Parallel training runs.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonTrain,
    /// Comma-separated method strings.
    #[arg(
        long,
        default_value = "bce,srl:0.3535,afl:0.0625:1.0,fbtl:0.6:0.4:0.001"
    )]
    methods: String,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Check(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult = Result<(), Failure>;

/// Long option names accepted by `subcommand`, which are also its config keys.
fn allowed_keys(subcommand: &str) -> Vec<String> {
    let cmd = Cli::command();
    let sub = cmd.find_subcommand(subcommand).expect("subcommand exists");
    sub.get_arguments()
        .filter_map(|a| a.get_long())
        .filter(|l| *l != "config" && *l != "help")
        .map(str::to_string)
        .collect()
}

/// Reparses `argv` with the pairs of the config file inserted right after the
/// subcommand, so that explicit flags override them.
fn parse_with_config(argv: Vec<OsString>) -> Result<Cli, Failure> {
    let cli = Cli::try_parse_from(&argv).map_err(clap_exit)?;
    let Some(path) = cli.command.config().map(Path::to_path_buf) else {
        return Ok(cli);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let kv = KvMap::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let name = cli.command.name();
    let allowed = allowed_keys(name);
    let mut injected = Vec::new();
    for (key, value) in kv.iter() {
        if !allowed.iter().any(|a| a == key) {
            return Err(Failure::Usage(format!(
                "{}: unknown key {key:?} for {name}; accepted keys: {}",
                path.display(),
                allowed.join(", ")
            )));
        }
        injected.push(OsString::from(format!("--{key}")));
        injected.push(OsString::from(value));
    }
    let pos = argv
        .iter()
        .position(|a| a == name)
        .expect("parsed subcommand appears in argv");
    let mut merged = argv[..=pos].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&argv[pos + 1..]);
    Cli::try_parse_from(merged).map_err(clap_exit)
}

fn clap_exit(e: clap::Error) -> Failure {
    use clap::error::ErrorKind;
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        // help and version are successful outcomes
        let _ = e.print();
        std::process::exit(0);
    }
    Failure::Usage(e.render().to_string())
}

fn main() -> ExitCode {
    let result = parse_with_config(std::env::args_os().collect()).and_then(|cli| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprint!("{msg}");
            if !msg.ends_with('\n') {
                eprintln!();
            }
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => ExitCode::from(EXIT_CHECK_FAILED),
                _ => ExitCode::from(EXIT_USAGE),
            }
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Stats(a) => cmd_stats(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

fn require<T>(value: Option<T>, key: &str) -> Result<T, Failure> {
    value.ok_or_else(|| Failure::Usage(format!("missing required key {key:?}")))
}

fn write_out(path: &Path, contents: &str) -> CliResult {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_stats(ds: &Dataset, stats: &DatasetStats) {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "clips={} frames_per_clip={} classes={} active={} inactive={} active_fraction={:.4}",
        ds.clips.len(),
        ds.spec.frames_per_clip(),
        ds.n_classes(),
        stats.total_active,
        stats.total_inactive,
        stats.active_fraction()
    );
    let _ = writeln!(
        s,
        "{:<24} {:>9} {:>13} {:>15} {:>13}",
        "class", "instances", "active_frames", "inactive_frames", "mean_dur_s"
    );
    for (m, name) in ds.spec.class_names().iter().enumerate() {
        let _ = writeln!(
            s,
            "{:<24} {:>9} {:>13} {:>15} {:>13.3}",
            name,
            ds.instances[m],
            stats.per_class_active_frames[m],
            stats.per_class_inactive_frames[m],
            stats.per_class_mean_duration_frames[m] * ds.spec.frame_hop_s
        );
    }
    emit(&s);
}

fn cmd_gen_data(a: GenDataArgs) -> CliResult {
    let Preset::TutLike = a.preset;
    let mut spec = tut_like_preset_with(a.feature_dim as usize, a.clips as usize, a.seed);
    if let Some(sigma) = a.noise_sigma {
        spec.noise_sigma = sigma;
    }
    if let Some(amp) = a.amplitude {
        for c in &mut spec.classes {
            c.amplitude = amp;
        }
    }
    spec.validate()?;
    let ds = generate_dataset(&spec)?;
    write_dataset(&ds, &a.out)?;
    emit(&format!(
        "wrote {} clips to {}\n",
        ds.clips.len(),
        a.out.display()
    ));
    print_stats(&ds, &compute_stats(&ds));
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> CliResult {
    let ds = read_dataset(&require(a.data, "data")?)?;
    print_stats(&ds, &compute_stats(&ds));
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> CliResult {
    let names: Vec<&str> = match a.loss.as_deref() {
        None => LOSS_NAMES.iter().copied().chain(["model"]).collect(),
        Some(name) if name == "model" || LOSS_NAMES.contains(&name) => vec![name],
        Some(other) => {
            return Err(Failure::Usage(format!(
                "unknown loss {other:?}; expected one of {}, model",
                LOSS_NAMES.join(", ")
            )))
        }
    };
    let mut failed = Vec::new();
    for name in names {
        let report = if name == "model" {
            let mut worst = check_model(&LossSpec::Bce, a.cases as usize, a.seed)?;
            for spec in [
                LossSpec::srl(0.5),
                LossSpec::ifl(1.0),
                LossSpec::afl(0.0625, 1.0),
                LossSpec::fbtl(0.6, 0.4, 0.001),
            ] {
                let r = check_model(&spec, a.cases as usize, a.seed)?;
                if r.max_rel_err > worst.max_rel_err {
                    worst = r;
                }
            }
            worst
        } else {
            check_loss(name, a.cases as usize, a.seed)?
        };
        emit(&format!("{report}\n"));
        if !report.passed() {
            failed.push(report.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "gradient check failed:\n{}",
            failed.join("\n")
        )))
    }
}

impl CommonTrain {
    fn train_config(&self, loss: LossSpec, seed: u64) -> Result<TrainConfig, Failure> {
        let cfg = TrainConfig {
            loss,
            epochs: self.epochs as usize,
            batch_clips: self.batch_clips as usize,
            learning_rate: self.learning_rate,
            seed,
            eval: EvalConfig::new(self.threshold)?,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            hidden: self.hidden as usize,
            window_radius: self.window_radius as usize,
            ifl_scope: match self.ifl_scope {
                ScopeArg::Batch => FrequencyScope::Batch,
                ScopeArg::Epoch => FrequencyScope::Epoch,
            },
            fbtl_pooling: match self.fbtl_pooling {
                PoolingArg::Batch => FbtlPooling::Batch,
                PoolingArg::PerClip => FbtlPooling::PerClip,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn datasets(&self) -> Result<(Dataset, Dataset), Failure> {
        let data = require(self.data.as_ref(), "data")?;
        let ds = read_dataset(data)?;
        if let Some(dev) = &self.dev_data {
            return Ok((ds, read_dataset(dev)?));
        }
        let count = match self.dev_clips {
            Some(n) => n as usize,
            None => (ds.clips.len() / 5).max(1),
        };
        Ok(ds.split_tail(count)?)
    }
}

fn parse_loss(s: &str) -> Result<LossSpec, Failure> {
    s.parse::<LossSpec>().map_err(Failure::from)
}

fn write_histories(out: &Path, runs: &[RunRecord]) -> CliResult {
    for r in runs {
        write_out(
            &out.join(format!("history_{}.csv", r.run_name())),
            &history_csv(&r.history),
        )?;
    }
    Ok(())
}

fn write_experiment(out: &Path, res: &ExperimentResult, class_names: &[String]) -> CliResult {
    write_out(&out.join("metrics.csv"), &res.metrics_csv(class_names))?;
    write_out(&out.join("summary.csv"), &aggregate_csv(&res.rows))?;
    write_histories(out, &res.runs)
}

fn print_summary(res: &ExperimentResult) {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:>5} {:>16} {:>16} {:>16} {:>16}",
        "method", "runs", "micro-F %", "macro-F %", "micro-AUC %", "macro-AUC %"
    );
    for r in &res.rows {
        let cell = |s: sedloss::trainer::Summary| {
            format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.stdev)
        };
        let _ = writeln!(
            s,
            "{:<28} {:>5} {:>16} {:>16} {:>16} {:>16}",
            r.method,
            r.runs,
            cell(r.micro_f),
            cell(r.macro_f),
            cell(r.micro_auc),
            cell(r.macro_auc)
        );
    }
    emit(&s);
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let cfg = a.common.train_config(parse_loss(&a.loss)?, a.seed)?;
    let (train_ds, dev_ds) = a.common.datasets()?;
    let result = train(&cfg, &train_ds, &dev_ds)?;
    let record = RunRecord {
        method: cfg.loss.to_string(),
        loss: cfg.loss,
        seed: cfg.seed,
        history: result.history,
        report: result.report,
    };
    let out = &a.common.out;
    write_histories(out, std::slice::from_ref(&record))?;
    let mut metrics = report_csv_header(&dev_ds.spec.class_names());
    metrics.push('\n');
    metrics.push_str(&report_csv_row(
        &record.method,
        &record.params_field(),
        &record.report,
    ));
    metrics.push('\n');
    write_out(&out.join("metrics.csv"), &metrics)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    save_checkpoint(
        &result.final_params,
        &out.join(format!("model_{}.bin", record.run_name())),
    )?;
    let r = &record.report;
    emit(&format!(
        "{} seed={} micro_f={:.4} macro_f={:.4} micro_auc={:.4} macro_auc={:.4}\n",
        record.method, record.seed, r.micro_f, r.macro_f, r.micro_auc, r.macro_auc
    ));
    Ok(())
}

fn parse_values(raw: &str) -> Result<Vec<f64>, Failure> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Failure::Usage(format!("bad sweep value {v:?}")))
        })
        .collect()
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    let axis: SweepAxis = require(a.axis.as_deref(), "axis")?.parse()?;
    let values = parse_values(require(a.values.as_deref(), "values")?)?;
    let base = a.common.train_config(parse_loss(&a.loss)?, 0)?;
    let (train_ds, dev_ds) = a.common.datasets()?;
    let res = sweep(
        &base,
        axis,
        &values,
        a.seeds as usize,
        &train_ds,
        &dev_ds,
        a.workers as usize,
    )?;
    write_experiment(&a.common.out, &res, &dev_ds.spec.class_names())?;
    print_summary(&res);
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> CliResult {
    let cfgs = a
        .methods
        .split(',')
        .map(|m| a.common.train_config(parse_loss(m)?, 0))
        .collect::<Result<Vec<_>, _>>()?;
    let (train_ds, dev_ds) = a.common.datasets()?;
    let res = compare_losses(
        &cfgs,
        a.seeds as usize,
        &train_ds,
        &dev_ds,
        a.workers as usize,
    )?;
    write_experiment(&a.common.out, &res, &dev_ds.spec.class_names())?;
    print_summary(&res);
    Ok(())
}
