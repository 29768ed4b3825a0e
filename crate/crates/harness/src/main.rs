use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use harl::synth::{sample_batch, Domain};
use harl_harness::ablation::{format_table, k_sweep, module_variants, run_ablation, write_ablation_csv};
use harl_harness::checkpoint::Checkpoint;
use harl_harness::datafile::{dump_pgm, DataFile};
use harl_harness::error::{HarnessError, EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE};
use harl_harness::gradcheck::{run_gradchecks, Sizes, FAIL_THRESHOLD};
use harl_harness::pipeline::{
    dump_features, evaluate, feature_width, pretrain_pose, train, write_eval_csv, write_features_csv, EvalDomain, FeatureKind,
    TrainOutputs,
};
use harl_harness::{Result, RunConfig};

#[derive(Parser)]
#[command(name = "harl", version, about = "Hybrid-domain gaze estimation on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_text(&fs::read_to_string(path)?)?;
        }
        for kv in &self.set {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a batch of samples to a data container, optionally as PGM images too.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "target")]
        domain: String,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        batch_index: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write every image as PGM into this directory.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Pretrain the pose encoder on landmark regression and freeze it.
    PretrainPose {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint training; writes metrics.jsonl, config.txt and model.ckpt to --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Pose checkpoint from `pretrain-pose`; required when enable_pose.
        #[arg(long)]
        pose: Option<PathBuf>,
        /// Output directory; defaults to the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean angular error of a checkpoint on fresh evaluation samples.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// target, shifted or source.
        #[arg(long, default_value = "target")]
        domain: String,
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Evaluation seed; defaults to the checkpoint's run seed.
        #[arg(long)]
        eval_seed: Option<u64>,
        /// Per-sample CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Feature vectors of evaluation samples as CSV.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        /// eye_source, eye_target or fused.
        #[arg(long)]
        which: String,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long)]
        eval_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the module variants and the neighbor-count sweep.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated run seeds.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        /// Only the module variants.
        #[arg(long)]
        no_sweep: bool,
    },
    /// Finite-difference checks of the alignment loss, the fusion layer and the joint loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// e.g. `b=8,n=16,d_e=8,d_p=6,k=2,L=2`.
        #[arg(long, default_value = "")]
        sizes: String,
        /// Inject a repeated eigenvalue into the alignment-loss input.
        #[arg(long)]
        degenerate: bool,
    },
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::from_text(&ckpt.config_echo)?;
    ckpt.params.check_layout(&cfg.model)?;
    Ok((ckpt, cfg))
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData { cfg, domain, n, batch_index, out, pgm } => {
            let cfg = cfg.load()?;
            let Some(domain) = Domain::parse(&domain) else {
                return Err(HarnessError::Usage(format!("unknown domain {domain:?} (source or target)")));
            };
            let samples = sample_batch(domain, n, &cfg.world, batch_index);
            DataFile { config_echo: cfg.echo(), samples: samples.clone() }.save(&out)?;
            println!("wrote {n} {} samples to {}", domain.tag(), out.display());
            if let Some(dir) = pgm {
                let count = dump_pgm(&samples, &dir)?;
                println!("wrote {count} images to {}", dir.display());
            }
        }
        Command::PretrainPose { cfg, seed, out } => {
            let mut cfg = cfg.load()?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let report = pretrain_pose(&cfg)?;
            println!(
                "pose encoder: {} steps, held-out landmark error {:.3} px (untrained {:.3} px)",
                report.steps, report.heldout_px, report.initial_px
            );
            if !report.converged(&cfg) {
                return Err(HarnessError::NotConverged(format!(
                    "held-out landmark error {:.3} px after {} steps, target {} px",
                    report.heldout_px, report.steps, cfg.pose.target_px
                )));
            }
            report.checkpoint(&cfg).save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Train { cfg, seed, pose, out } => {
            let mut cfg = cfg.load()?;
            cfg.seed = seed;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let pose = match (&pose, cfg.model.enable_pose) {
                (Some(p), true) => Some(Checkpoint::load(p)?.params),
                (None, true) => return Err(HarnessError::Usage("enable_pose is set; pass --pose <checkpoint>".into())),
                (_, false) => None,
            };
            let outcome = train(&cfg, pose.as_ref(), Some(TrainOutputs { dir: &out }))?;
            if let Some(last) = outcome.records.last() {
                println!("step {}: total {:.5}, face mse {:.5}, train MAE {:.3} deg", last.step, last.l_total, last.l_face_mse, last.train_mae_deg);
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { checkpoint, domain, n, eval_seed, csv } => {
            let (ckpt, cfg) = load_checkpoint(&checkpoint)?;
            let Some(d) = EvalDomain::parse(&domain) else {
                return Err(HarnessError::Usage(format!("unknown domain {domain:?} (target, shifted or source)")));
            };
            let result = evaluate(&ckpt.params, &cfg, d, n, eval_seed.unwrap_or(ckpt.seed))?;
            println!("{} MAE {:.4} deg over {n} samples", d.tag(), result.mae);
            if let Some(path) = csv {
                write_eval_csv(&result, &path)?;
            }
        }
        Command::DumpFeatures { checkpoint, which, n, eval_seed, out } => {
            let kind = FeatureKind::parse(&which)?;
            let (ckpt, cfg) = load_checkpoint(&checkpoint)?;
            let rows = dump_features(&ckpt.params, &cfg, n, kind, eval_seed.unwrap_or(ckpt.seed))?;
            write_features_csv(&rows, feature_width(&cfg, kind), &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Ablate { cfg, seeds, out, no_sweep } => {
            let cfg = cfg.load()?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| HarnessError::Usage(format!("bad seed {s:?}"))))
                .collect::<Result<_>>()?;
            let mut variants = module_variants(cfg.model.sgf.k);
            if !no_sweep {
                variants.extend(k_sweep(cfg.model.d_p));
            }
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), cfg.echo())?;
            let rows = run_ablation(&cfg, &seeds, &variants, |msg| eprintln!("{msg}"))?;
            write_ablation_csv(&rows, &out.join("ablation.csv"))?;
            let table = format_table(&rows);
            fs::write(out.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Command::Gradcheck { seed, sizes, degenerate } => {
            let sizes = Sizes::parse(&sizes)?;
            let lines = run_gradchecks(seed, sizes, degenerate)?;
            let mut failed = false;
            for line in &lines {
                if matches!(line.outcome, harl_harness::gradcheck::Outcome::Skipped { .. }) {
                    eprintln!("warning: {line}");
                }
                println!("{line}");
                failed |= line.failed(FAIL_THRESHOLD);
            }
            if failed {
                return Ok(EXIT_THRESHOLD);
            }
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
