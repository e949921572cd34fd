use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qkd_cli::config::HarnessConfig;
use qkd_cli::experiments::{self, SweepAxis, Toggle};
use qkd_cli::report::{fmt_f64, run_csv, table_csv, to_json, write_atomic, TableReport};
use qkd_cli::HarnessError;
use qkd_core::checkpoint::{load_checkpoint, save_checkpoint};
use qkd_core::datagen::{gen_stream, write_feature_file, LabeledSample};

#[derive(Parser)]
#[command(
    name = "qkd",
    version,
    about = "Quantum-gated adapter routing for class-incremental learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate over the whole stream.
    Run(Common),
    /// Cumulative ablation: none, +QGTM, +QKD, +L_s.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Components to add back, in ladder order.
        #[arg(long, value_delimiter = ',', default_value = "qgtm,qkd_loss,sparsity")]
        toggles: Vec<String>,
    },
    /// One run per value of a single hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// qubits, svd_dim, lambda_kd or lambda_s.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Every gate kind on shared seeds.
    CompareGates(Common),
    /// Write the synthetic stream as a feature file.
    GenData(Common),
    /// Print the structure and checksums of a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "qkd-out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    gate: Option<String>,
    #[arg(long)]
    qubits: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long = "lambda-kd")]
    lambda_kd: Option<String>,
    #[arg(long = "lambda-s")]
    lambda_s: Option<String>,
    #[arg(long = "svd-dim")]
    svd_dim: Option<String>,
    #[arg(long = "gate-input")]
    gate_input: Option<String>,
    #[arg(long = "distill-space")]
    distill_space: Option<String>,
    /// Stream keys as `key=value,...`, e.g. `num_tasks=3,overlap=0.8`.
    #[arg(long, conflicts_with = "features")]
    stream: Option<String>,
    /// Feature file to use instead of a synthetic stream.
    #[arg(long)]
    features: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<HarnessConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => HarnessConfig::from_file(p)?,
            None => HarnessConfig::default(),
        };
        if let Some(list) = &self.stream {
            cfg.apply_list(list)?;
        }
        let flags = [
            ("seed", &self.seed),
            ("gate_kind", &self.gate),
            ("qubits", &self.qubits),
            ("layers", &self.layers),
            ("tau", &self.tau),
            ("lambda_kd", &self.lambda_kd),
            ("lambda_s", &self.lambda_s),
            ("svd_dim", &self.svd_dim),
            ("gate_input", &self.gate_input),
            ("distill_space", &self.distill_space),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if let Some(p) = &self.features {
            cfg.features = Some(p.clone());
        }
        Ok(cfg)
    }
}

fn create_out(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_table(out: &Path, stem: &str, report: &TableReport) -> Result<(), HarnessError> {
    let json = to_json(report)?;
    create_out(out)?;
    write_atomic(&out.join(format!("{stem}.json")), &json)?;
    write_atomic(&out.join(format!("{stem}.csv")), &table_csv(report))?;
    for row in &report.rows {
        match (&row.summary, &row.error) {
            (Some(s), _) => println!(
                "{:<16} mean average {}  mean final {}  params {}",
                row.label,
                fmt_f64(s.mean_average.0),
                fmt_f64(s.mean_final.0),
                s.trainable_params
            ),
            (None, Some(e)) => println!("{:<16} error: {e}", row.label),
            (None, None) => {}
        }
    }
    Ok(())
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run(common) => {
            let cfg = common.resolve()?;
            cfg.validate()?;
            let (report, model) = experiments::run(&cfg)?;
            let json = to_json(&report)?;
            create_out(&common.out)?;
            write_atomic(&common.out.join("report.json"), &json)?;
            write_atomic(&common.out.join("stages.csv"), &run_csv(&report))?;
            save_checkpoint(&model, &common.out.join("model.ckpt"))?;
            println!(
                "average accuracy {}  final accuracy {}",
                fmt_f64(report.summary.mean_average.0),
                fmt_f64(report.summary.mean_final.0)
            );
        }
        Command::Ablate { common, toggles } => {
            let cfg = common.resolve()?;
            let toggles = toggles.iter().map(|t| t.parse()).collect::<Result<Vec<Toggle>, _>>()?;
            write_table(&common.out, "ablation", &experiments::ablate(&cfg, &toggles)?)?;
        }
        Command::Sweep { common, axis, values } => {
            let axis: SweepAxis = axis.parse()?;
            let cfg = common.resolve()?;
            write_table(&common.out, "sweep", &experiments::sweep(&cfg, axis, &values)?)?;
        }
        Command::CompareGates(common) => {
            let cfg = common.resolve()?;
            write_table(&common.out, "gates", &experiments::compare_gates(&cfg)?)?;
        }
        Command::GenData(common) => {
            let mut cfg = common.resolve()?;
            if let Some(seed) = &common.seed {
                cfg.set("stream_seed", seed)?;
            }
            cfg.stream.validate()?;
            let stream = gen_stream(&cfg.stream)?;
            let samples: Vec<LabeledSample> = stream
                .tasks
                .iter()
                .flat_map(|t| t.train.iter().chain(&t.test).cloned())
                .collect();
            create_out(&common.out)?;
            let path = common.out.join("features.bin");
            write_feature_file(&path, &samples)?;
            println!("{} samples written to {}", samples.len(), path.display());
        }
        Command::InspectCheckpoint { path } => {
            let model = load_checkpoint(&path).map_err(|e| match e {
                qkd_core::QkdError::Io(io) => HarnessError::Data(format!("cannot read {}: {io}", path.display())),
                other => other.into(),
            })?;
            let sums = model.frozen_checksums();
            println!("tasks: {}", model.num_tasks());
            println!("width: {}", model.width());
            println!("backbone blocks: {}", model.backbone.depth());
            println!("classes: {}", model.seen_classes);
            println!(
                "gate: {} (input {}, tau {})",
                model.gate.kind, model.gate_input, model.gate.params.tau
            );
            println!("trainable parameters: {}", model.num_trainable_params());
            println!("backbone checksum: {:016x}", sums.backbone);
            for t in 0..model.num_tasks() {
                println!(
                    "task {t}: classes {:?}, adapter {:016x}, head {:016x}, embedding {:016x}",
                    model.heads[t].class_range(),
                    sums.adapters[t],
                    sums.heads[t],
                    sums.embeddings[t]
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
