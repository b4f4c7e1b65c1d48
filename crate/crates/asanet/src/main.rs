use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asanet::ablate::{self, Preset};
use asanet::config::RunConfig;
use asanet::core::eval::{Metric, Setup};
use asanet::core::gradcheck::{self, Scope};
use asanet::core::model::Fusion;
use asanet::core::synth::{gen_dataset, Style};
use asanet::runner::{self, EvalOptions, TrainOptions};
use asanet::{checkpoint, dataset, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "asanet", version, about = "Attribute-assisted video person re-identification on synthetic pedestrians")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum SetupArg {
    Usual,
    Mixing,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    Euclidean,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    NoPmi,
    NoBce,
    NoAsre,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Smoke,
    Ablation,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Blocks,
    Asre,
    Losses,
    Full,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Run config whose `data.gen` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        tracklets: Option<usize>,
        #[arg(long, value_enum)]
        style: Option<StyleArg>,
    },
    /// Train a model; writes logs and checkpoints under `--out`.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from a built-in config instead of the defaults.
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        #[arg(long, value_enum)]
        ablation: Vec<Ablation>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint and export the results.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset the model was trained on.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "usual")]
        setup: SetupArg,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
        /// Evaluate on this other dataset instead.
        #[arg(long)]
        cross_dataset: Option<PathBuf>,
        #[arg(long)]
        no_camera_rule: bool,
        /// Write attention masks for this many query tracklets.
        #[arg(long, default_value_t = 0)]
        masks: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare backward rules against central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: ScopeArg,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train an ablation grid with shared seeds and write its table.
    Ablate {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Use the reduced ablation setting as the base config.
        #[arg(long)]
        small: bool,
    },
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen {
            out,
            config,
            seed,
            identities,
            tracklets,
            style,
        } => {
            let mut g = base_config(config.as_deref())?.data.gen;
            if let Some(s) = seed {
                g.seed = s;
            }
            if let Some(n) = identities {
                g.num_identities = n;
            }
            if let Some(n) = tracklets {
                g.tracklets_per_identity = n;
            }
            if let Some(s) = style {
                g.style = match s {
                    StyleArg::A => Style::A,
                    StyleArg::B => Style::B,
                };
            }
            let ds = gen_dataset(&g)?;
            dataset::save(&ds, &out)?;
            log::info!("{} tracklets written to {}", ds.tracklets.len(), out.display());
            Ok(true)
        }
        Command::Train {
            out,
            config,
            preset,
            data,
            seed,
            fusion,
            ablation,
            epochs,
            resume,
            stop_after,
        } => {
            let mut cfg = match (config, preset) {
                (Some(p), _) => RunConfig::load(&p)?,
                (None, Some(PresetArg::Smoke)) => RunConfig::smoke(),
                (None, Some(PresetArg::Ablation)) => RunConfig::ablation(),
                (None, None) => RunConfig::default(),
            };
            if data.is_some() {
                cfg.data.path = data;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(f) = fusion {
                cfg.model.fusion = match f {
                    FusionArg::A => Fusion::A,
                    FusionArg::B => Fusion::B,
                };
            }
            for a in ablation {
                match a {
                    Ablation::NoPmi => cfg.loss.use_pmi = false,
                    Ablation::NoBce => cfg.loss.use_bce = false,
                    Ablation::NoAsre => cfg.model.use_asre = false,
                }
            }
            if let Some(e) = epochs {
                let s = &mut cfg.schedule.schedule;
                s.total_epochs = e;
                s.decay_epochs.retain(|&d| d < e);
            }
            let ds = runner::dataset_for(&cfg)?;
            runner::fit_to_dataset(&mut cfg, &ds);
            let opts = TrainOptions {
                out: Some(out),
                resume,
                stop_after,
            };
            runner::train(&cfg, &ds, &opts)?;
            Ok(true)
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            out,
            setup,
            metric,
            cross_dataset,
            no_camera_rule,
            masks,
            seed,
        } => {
            let mut trainer = checkpoint::load(&ckpt)?;
            let ds = dataset::load(cross_dataset.as_deref().unwrap_or(&data))?;
            runner::check_geometry(&trainer, &ds)?;
            let mut cfg = RunConfig::load(&ckpt.join("..").join("config.json"))
                .map(|c| c.eval)
                .unwrap_or_default();
            cfg.setup = match setup {
                SetupArg::Usual => Setup::Usual,
                SetupArg::Mixing => Setup::Mixing,
            };
            if let Some(m) = metric {
                cfg.metric = match m {
                    MetricArg::Cosine => Metric::Cosine,
                    MetricArg::Euclidean => Metric::Euclidean,
                };
            }
            if no_camera_rule {
                cfg.same_camera_rule = false;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let r = runner::evaluate_to(
                &mut trainer,
                &ds,
                &cfg,
                &out,
                &EvalOptions { mask_tracklets: masks },
            )?;
            println!(
                "queries {} dropped {} mAP {:.4} rank-1 {:.4} rank-5 {:.4} rank-20 {:.4}",
                r.queries.len(),
                r.dropped,
                r.map,
                r.rank(1),
                r.rank(5),
                r.rank(20)
            );
            Ok(true)
        }
        Command::Gradcheck {
            scope,
            seeds,
            inject_fault,
        } => {
            let scopes: Vec<Scope> = match scope {
                ScopeArg::Ops => vec![Scope::Ops],
                ScopeArg::Blocks => vec![Scope::Blocks],
                ScopeArg::Asre => vec![Scope::Asre],
                ScopeArg::Losses => vec![Scope::Losses],
                ScopeArg::Full => vec![Scope::Full],
                ScopeArg::All => Scope::ALL.to_vec(),
            };
            let opts = gradcheck::Options { seeds, inject_fault };
            let mut ok = true;
            for s in scopes {
                let report = gradcheck::run(s, &opts)?;
                for item in &report.items {
                    println!(
                        "{:<8} {:<28} seeds {:>3}  max rel err {:.3e}  {}",
                        format!("{:?}", item.scope).to_lowercase(),
                        item.name,
                        item.seeds,
                        item.max_rel_err,
                        if item.passed() { "ok" } else { "FAIL" }
                    );
                }
                ok &= report.passed();
            }
            Ok(ok)
        }
        Command::Ablate {
            preset,
            out,
            config,
            data,
            seeds,
            small,
        } => {
            let mut base = match (config, small) {
                (Some(p), _) => RunConfig::load(&p)?,
                (None, true) => RunConfig::ablation(),
                (None, false) => RunConfig::default(),
            };
            if data.is_some() {
                base.data.path = data;
            }
            let ds = runner::dataset_for(&base)?;
            runner::fit_to_dataset(&mut base, &ds);
            let (rows, runs) = ablate::run_grid(preset, &base, &ds, &seeds, ablate::thread_cap())?;
            ablate::write_csv(&rows, &runs, &out)?;
            for r in &rows {
                println!(
                    "{:<60} mAP {:.4} rank-1 {:.4} rank-5 {:.4} rank-20 {:.4}",
                    r.cell.label(),
                    r.map,
                    r.rank1,
                    r.rank5,
                    r.rank20
                );
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
