use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, CommandFactory, Parser, Subcommand};

use dcac::data::{generate_synthetic_dataset, SynthConfig};
use dcac::evaluation::cross_domain_eval;
use dcac::harness::{self, ExperimentPlan};
use dcac::trainer::{self, Checkpoint, RunConfig, TrainOptions};

#[derive(Parser, Debug)]
#[command(name = "dcac", version, about = "Joint re-ID and conditional diffusion training")]
struct Cli {
    /// Worker threads for tensor kernels; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log verbosity: error, warn, info, debug.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

impl Common {
    fn run_config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic multi-domain dataset.
    Synth {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        ids: usize,
        #[arg(long, default_value_t = 8)]
        per_id: usize,
        #[arg(long, default_value_t = 2)]
        domains: usize,
    },
    /// Train from a config into the run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a target domain's query and gallery splits.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file, or a tag (`last`, `final`, `epoch_<n>`) inside the run directory.
        #[arg(long)]
        checkpoint: String,
        /// Target domain under the checkpoint's data root.
        #[arg(long)]
        target: String,
    },
    /// Run an ablation plan over seeds and emit the comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// One of finetune, condition, rank, post_transform.
        #[arg(long)]
        plan: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = harness::DEFAULT_SEEDS)]
        seeds: Vec<u64>,
    },
    /// Plot and summarize finished runs or ablation directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "runs/default/report")]
        out: PathBuf,
    },
}

fn resolve_checkpoint(run_dir: &Path, spec: &str) -> PathBuf {
    let as_path = PathBuf::from(spec);
    if as_path.is_file() {
        as_path
    } else {
        trainer::checkpoint_path(run_dir, spec)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { out, seed, ids, per_id, domains } => {
            let manifests = generate_synthetic_dataset(&SynthConfig::new(seed, ids, per_id, domains), &out)?;
            for m in &manifests {
                println!("{}: {} images, {} identities", m.root.display(), m.len(), m.num_identities);
            }
        }
        Command::Train { common, resume } => {
            if common.config.is_none() {
                anyhow::bail!(dcac::Error::Config("train needs --config".into()));
            }
            let cfg = common.run_config()?;
            let sources = trainer::load_source_manifests(&cfg)?;
            let outcome = trainer::run_training(&cfg, &sources, &common.out, &TrainOptions { resume, stop_after: None })?;
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Eval { common, checkpoint, target } => {
            let path = resolve_checkpoint(&common.out, &checkpoint);
            let ckpt = Checkpoint::read(&path)?;
            let mut cfg = RunConfig::from_text(&ckpt.config_text)?;
            if common.config.is_some() || !common.overrides.is_empty() {
                // Only the data location matters here; the model comes from the checkpoint.
                let given = common.run_config()?;
                cfg.data_root = given.data_root;
            }
            let (query, gallery) = harness::eval_manifests(&cfg, &target)?;
            let record = cross_domain_eval(&path, &query, &gallery)?;
            std::fs::create_dir_all(&common.out).with_context(|| format!("cannot create {}", common.out.display()))?;
            record.write(&common.out.join(harness::RESULTS_FILE))?;
            println!("{}", summary_line(&record));
        }
        Command::Ablate { common, plan, seeds } => {
            let mut plan = ExperimentPlan::builtin(&plan, common.run_config()?)?;
            plan.seeds = seeds;
            let dir = common.out.join(&plan.name);
            let table = harness::run_plan(&plan, &dir)?;
            print!("{}", table.render());
            println!("table written to {}", dir.join(harness::ABLATION_CSV).display());
        }
        Command::Report { runs, out } => {
            let files = harness::report(&runs, &out)?;
            for p in [files.loss_plot, files.lr_plot, files.bar_plot, files.summary] {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn summary_line(record: &dcac::evaluation::EvalRecord) -> String {
    format!(
        "{} -> {}: mAP {:.4} R1 {:.4} ({} queries, {} skipped)",
        record.source,
        record.target,
        record.map,
        record.rank1(),
        record.num_queries,
        record.num_skipped
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    if let Some(n) = cli.threads {
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already carry their cause in the message.
            match e.downcast_ref::<dcac::Error>() {
                Some(inner) => eprintln!("error: {inner}"),
                None => eprintln!("error: {e:#}"),
            }
            if matches!(e.downcast_ref::<dcac::Error>(), Some(dcac::Error::Config(_))) {
                eprintln!("\n{}", Cli::command().render_usage());
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
