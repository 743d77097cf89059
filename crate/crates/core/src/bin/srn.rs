use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use srn_gradreg::config::{PartialConfig, RunConfig};
use srn_gradreg::diagnostics::{correlation_check, depth_scan, DynamicsRow};
use srn_gradreg::model::{self, SrnParams};
use srn_gradreg::tasks::{derive_seed, generate, make_splits, read_dataset, write_dataset, SequenceBatch, Splits};
use srn_gradreg::trainer::{evaluate, train_observed, EpochRecord, IterRecord, TrainObserver};
use srn_gradreg::{Result, SrnError};

const EXIT_USAGE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Simple recurrent networks with gradient-norm regularization.
#[derive(Parser, Debug)]
#[command(name = "srn", version)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train, validation and test dataset files.
    Gen(CommonArgs),
    /// Train one network per seed and write models, logs and a summary.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory written by `srn gen` to train on instead of fresh data.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Norm of backpropagated deltas versus depth for freshly initialized nets.
    Scan(CommonArgs),
    /// Accuracy of a saved model on a dataset file.
    Eval {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// adding, multiplication, temporal_order or temporal_order3.
    #[arg(long)]
    task: Option<String>,
    /// Sequence length.
    #[arg(long = "T", value_name = "T")]
    t_len: Option<usize>,
    /// Hidden units.
    #[arg(long)]
    hidden: Option<usize>,
    /// Initialization standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    alpha: Option<f64>,
    /// Momentum.
    #[arg(long)]
    mu: Option<f64>,
    /// Minibatch size.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Applied corrections per epoch.
    #[arg(long)]
    iters: Option<usize>,
    /// BPTT truncation depth (default T).
    #[arg(long)]
    h: Option<usize>,
    /// Gradient regularization: on or off.
    #[arg(long, value_parser = ["on", "off"])]
    reg: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    qmin: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    qmax: Option<f64>,
    /// Threshold on |dS|, relative to S unless --r0-mode absolute.
    #[arg(long)]
    r0: Option<f64>,
    #[arg(long, value_parser = ["relative", "absolute"])]
    r0_mode: Option<String>,
    #[arg(long, value_parser = ["literal", "restoring"])]
    gate_rule: Option<String>,
    /// Run seeds, comma separated.
    #[arg(long, alias = "seed", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Seed of the generated datasets.
    #[arg(long)]
    data_seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    valid_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Consecutive rejections before a minibatch is forced through.
    #[arg(long)]
    max_rejects: Option<usize>,
    /// Success threshold for the regression tasks.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Probe sequences per depth scan.
    #[arg(long)]
    probes: Option<usize>,
    /// Scan several initialization scales, comma separated.
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
}

impl CommonArgs {
    fn to_partial(&self) -> PartialConfig {
        PartialConfig {
            task: self.task.clone(),
            t_len: self.t_len,
            hidden: self.hidden,
            sigma: self.sigma,
            alpha: self.alpha,
            mu: self.mu,
            batch: self.batch,
            epochs: self.epochs,
            iters: self.iters,
            h: self.h,
            reg: self.reg.clone(),
            qmin: self.qmin,
            qmax: self.qmax,
            r0: self.r0,
            r0_mode: self.r0_mode.clone(),
            gate_rule: self.gate_rule.clone(),
            seeds: self.seeds.clone(),
            data_seed: self.data_seed,
            out: self.out.clone(),
            train_size: self.train_size,
            valid_size: self.valid_size,
            test_size: self.test_size,
            max_rejects: self.max_rejects,
            tolerance: self.tolerance,
            probes: self.probes,
            sigmas: self.sigmas.clone(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &SrnError) -> u8 {
    match e {
        SrnError::InvalidConfig { .. } => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => PartialConfig::from_file(path)
            .map_err(|e| SrnError::Parse(format!("{}: {e}", path.display())))?,
        None => PartialConfig::default(),
    };
    match cli.command {
        Command::Gen(args) => cmd_gen(&file.overlay(&args.to_partial()).resolve()?),
        Command::Train { common, data } => cmd_train(&file.overlay(&common.to_partial()).resolve()?, data.as_deref()),
        Command::Scan(args) => cmd_scan(&file.overlay(&args.to_partial()).resolve()?),
        Command::Eval { model, data, out } => {
            let out = out.or(file.out).unwrap_or_else(|| PathBuf::from("runs"));
            cmd_eval(&model, &data, &out)
        }
    }
}

/// Creates `{out}/{command}-{timestamp}-s{seed}`, adding a numeric suffix if
/// that name is taken.
fn create_run_dir(out: &Path, command: &str, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let base = format!("{command}-{stamp}-s{seed}");
    for n in 0u32.. {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

const SPLIT_FILES: [&str; 3] = ["train.srnd", "valid.srnd", "test.srnd"];

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let splits = make_splits(&cfg.spec, cfg.sizes, cfg.data_seed)?;
    let dir = create_run_dir(&cfg.out, "gen", cfg.data_seed)?;
    for (name, batch) in SPLIT_FILES.iter().zip([&splits.train, &splits.valid, &splits.test]) {
        let mut w = BufWriter::new(File::create(dir.join(name))?);
        write_dataset(batch, &mut w)?;
        w.flush()?;
    }
    write_json(&dir.join("config.json"), cfg)?;
    println!("{}", dir.display());
    Ok(())
}

fn load_dataset(path: &Path) -> Result<SequenceBatch> {
    let f = File::open(path).map_err(|e| SrnError::Parse(format!("{}: {e}", path.display())))?;
    read_dataset(BufReader::new(f)).map_err(|e| match e {
        SrnError::Parse(msg) => SrnError::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn load_splits(dir: &Path, cfg: &RunConfig) -> Result<Splits> {
    let [train, valid, test] = SPLIT_FILES.map(|name| load_dataset(&dir.join(name)));
    let splits = Splits {
        train: train?,
        valid: valid?,
        test: test?,
    };
    for b in [&splits.train, &splits.valid, &splits.test] {
        if b.spec.kind != cfg.spec.kind || b.spec.t_len != cfg.spec.t_len {
            return Err(SrnError::Parse(format!(
                "{}: dataset holds {} T={}, run is configured for {} T={}",
                dir.display(),
                b.spec.kind,
                b.spec.t_len,
                cfg.spec.kind,
                cfg.spec.t_len
            )));
        }
    }
    Ok(splits)
}

/// Streams per-iteration and per-epoch records to CSV files.
struct CsvLog {
    metrics: csv::Writer<BufWriter<File>>,
    dynamics: csv::Writer<BufWriter<File>>,
    epochs: csv::Writer<BufWriter<File>>,
    seed: u64,
}

impl CsvLog {
    fn create(dir: &Path, seed: u64) -> Result<Self> {
        let open = |name: &str| -> Result<_> { Ok(csv::Writer::from_writer(BufWriter::new(File::create(dir.join(name))?))) };
        Ok(Self {
            metrics: open("metrics.csv")?,
            dynamics: open("dynamics.csv")?,
            epochs: open("epochs.csv")?,
            seed,
        })
    }

    fn finish(mut self) -> Result<()> {
        self.metrics.flush()?;
        self.dynamics.flush()?;
        self.epochs.flush()?;
        Ok(())
    }
}

impl TrainObserver for CsvLog {
    fn on_iteration(&mut self, rec: &IterRecord, dynamics: &DynamicsRow) -> Result<()> {
        self.metrics.serialize(rec)?;
        self.dynamics.serialize(dynamics)?;
        Ok(())
    }

    fn on_epoch(&mut self, rec: &EpochRecord) -> Result<()> {
        info!(
            "seed {} epoch {}: {} corrections in {} draws, valid accuracy {:.4}",
            self.seed, rec.epoch, rec.corrections, rec.draws, rec.valid_accuracy
        );
        self.epochs.serialize(rec)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct SeedRow {
    seed: u64,
    test_accuracy: f64,
    best_valid_accuracy: f64,
    best_epoch: usize,
    corrections: u64,
    draws: u64,
    starved_epochs: usize,
}

#[derive(Serialize)]
struct TableRow {
    task: String,
    #[serde(rename = "T")]
    t_len: usize,
    reg: &'static str,
    seeds: usize,
    best: f64,
    mean: f64,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    table: &'a TableRow,
    runs: &'a [SeedRow],
}

fn cmd_train(cfg: &RunConfig, data: Option<&Path>) -> Result<()> {
    let splits = match data {
        Some(dir) => load_splits(dir, cfg)?,
        None => make_splits(&cfg.spec, cfg.sizes, cfg.data_seed)?,
    };
    let dir = create_run_dir(&cfg.out, "train", cfg.seeds[0])?;
    write_json(&dir.join("config.json"), cfg)?;

    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let seed_dir = dir.join(format!("seed{seed}"));
        fs::create_dir(&seed_dir)?;
        let train_cfg = srn_gradreg::trainer::TrainConfig { seed, ..cfg.train };
        let mut log = CsvLog::create(&seed_dir, seed)?;
        let outcome = train_observed(&train_cfg, &splits, &mut log)?;
        log.finish()?;
        if outcome.starved_epochs > 0 {
            warn!(
                "seed {seed}: {} of {} epochs ended early on consecutive rejections",
                outcome.starved_epochs, cfg.train.epochs
            );
        }
        fs::write(seed_dir.join("model.json"), model::serialize(&outcome.best_params))?;
        println!("seed {seed}: test accuracy {:.4}", outcome.test_accuracy);
        runs.push(SeedRow {
            seed,
            test_accuracy: outcome.test_accuracy,
            best_valid_accuracy: outcome.best_valid_accuracy,
            best_epoch: outcome.best_epoch,
            corrections: outcome.corrections,
            draws: outcome.draws,
            starved_epochs: outcome.starved_epochs,
        });
    }

    let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let table = TableRow {
        task: cfg.spec.kind.to_string(),
        t_len: cfg.spec.t_len,
        reg: if cfg.train.reg_enabled { "on" } else { "off" },
        seeds: runs.len(),
        best: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: accs.iter().sum::<f64>() / accs.len() as f64,
    };
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.serialize(&table)?;
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("runs.csv"))?;
    for r in &runs {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(&dir.join("summary.json"), &TrainSummary { table: &table, runs: &runs })?;
    println!(
        "{} T={} reg {}: best {:.4} mean {:.4} over {} seeds",
        table.task, table.t_len, table.reg, table.best, table.mean, table.seeds
    );
    println!("{}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ScanRow {
    sigma: f64,
    seed: u64,
    file: String,
    end_to_start_ratio: f64,
    correlation: Option<f64>,
}

fn cmd_scan(cfg: &RunConfig) -> Result<()> {
    let probes = generate(&cfg.spec, cfg.probes, derive_seed(cfg.data_seed, 3))?;
    let dir = create_run_dir(&cfg.out, "scan", cfg.seeds[0])?;
    write_json(&dir.join("config.json"), cfg)?;
    let single = cfg.sigmas.len() == 1 && cfg.seeds.len() == 1;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &sigma in &cfg.sigmas {
            let train_cfg = srn_gradreg::trainer::TrainConfig { seed, sigma, ..cfg.train };
            let params = train_cfg.init_params(&cfg.spec)?;
            let profile = depth_scan(&params, &cfg.spec, &probes.samples, cfg.train.h)?;
            let file = match (single, cfg.seeds.len()) {
                (true, _) => "depth_profile.csv".to_string(),
                (false, 1) => format!("depth_profile_sigma{sigma}.csv"),
                (false, _) => format!("depth_profile_sigma{sigma}_seed{seed}.csv"),
            };
            let mut w = BufWriter::new(File::create(dir.join(&file))?);
            profile.write_csv(&mut w)?;
            w.flush()?;
            let row = ScanRow {
                sigma,
                seed,
                end_to_start_ratio: profile.end_to_start_ratio(),
                correlation: correlation_check(&profile),
                file,
            };
            println!(
                "sigma {sigma} seed {seed}: end/start delta norm ratio {:.3e} -> {}",
                row.end_to_start_ratio, row.file
            );
            rows.push(row);
        }
    }
    write_json(&dir.join("scan.json"), &rows)?;
    println!("{}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    model: String,
    data: String,
    task: String,
    #[serde(rename = "T")]
    t_len: usize,
    n: usize,
    accuracy: f64,
}

fn check_compatible(params: &SrnParams, batch: &SequenceBatch) -> Result<()> {
    let spec = &batch.spec;
    let dims = |n_in, n_out| format!("n_in={n_in}, n_out={n_out}");
    if params.n_in() != spec.n_in() || params.n_out() != spec.n_out() || params.output != spec.output_activation() {
        return Err(SrnError::Dimension {
            context: format!("model versus {} dataset", spec.kind),
            expected: format!("{} with {:?} output", dims(spec.n_in(), spec.n_out()), spec.output_activation()),
            got: format!("{} with {:?} output", dims(params.n_in(), params.n_out()), params.output),
        });
    }
    Ok(())
}

fn cmd_eval(model_path: &Path, data_path: &Path, out: &Path) -> Result<()> {
    let bytes = fs::read(model_path).map_err(|e| SrnError::Parse(format!("{}: {e}", model_path.display())))?;
    let params = model::deserialize(&bytes)?;
    let batch = load_dataset(data_path)?;
    check_compatible(&params, &batch)?;
    let accuracy = evaluate(&params, &batch)?;
    let dir = create_run_dir(out, "eval", batch.seed)?;
    let summary = EvalSummary {
        model: model_path.display().to_string(),
        data: data_path.display().to_string(),
        task: batch.spec.kind.to_string(),
        t_len: batch.spec.t_len,
        n: batch.len(),
        accuracy,
    };
    write_json(&dir.join("eval.json"), &summary)?;
    println!("accuracy {accuracy:.6}");
    println!("{}", dir.display());
    Ok(())
}
