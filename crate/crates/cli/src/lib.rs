//! Argument parsing and dispatch for the `rbvla` binary.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rbvla::config::RunConfig;
use rbvla::harness::pipeline::{self, BeliefAnalysis};
use rbvla::harness::report::num;
use rbvla::harness::train::train_stage;
use rbvla::harness::Stage;
use rbvla::simenv::{Observation, IMG_SIDE};
use rbvla::Error;

#[derive(Parser, Debug)]
#[command(name = "rbvla", version, about = "Belief-state world model and diffusion policy testbed")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Global {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Directory for the dataset, checkpoints and reports.
    #[arg(long, global = true)]
    pub run_dir: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data generation and evaluation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate an expert demonstration dataset.
    GenData {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Output path (defaults to `<run_dir>/data.bin`).
        #[arg(long)]
        out: Option<String>,
    },
    /// Train one stage; stages run in the order warmstart, belief, policy.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Three-letter ablation code (frame targets, stochastic z, belief conditioning).
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Closed-loop success rate of a trained variant, or of the expert.
    Eval {
        #[arg(long)]
        task: Option<String>,
        /// Ablation code or `expert`.
        #[arg(long, default_value = "ttt")]
        variant: String,
        #[arg(long)]
        episodes: Option<usize>,
        /// Apply frame drops and observation noise.
        #[arg(long)]
        perturb: bool,
    },
    /// Probes of the trained belief.
    Analyze {
        #[arg(value_enum)]
        what: AnalysisArg,
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Memory and invocation-count profiles.
    Bench {
        #[arg(value_enum)]
        what: BenchArg,
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Run the trained policy on a typed instruction and save its frames.
    Rollout {
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        render_dir: PathBuf,
        #[arg(long)]
        ablation: Option<String>,
        /// Upscaling factor of the saved PNG frames.
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum StageArg {
    Warmstart,
    Belief,
    Policy,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Warmstart => Stage::Warmstart,
            StageArg::Belief => Stage::Belief,
            StageArg::Policy => Stage::Policy,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum AnalysisArg {
    Similarity,
    Stochastic,
    Attention,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum BenchArg {
    Memory,
    Invocations,
}

/// Resolve the run configuration: defaults, then the file, then the
/// global flags and `--set` overrides.
pub fn resolve_config(g: &Global) -> rbvla::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut kv = Vec::new();
    if let Some(d) = &g.run_dir {
        kv.push(format!("run_dir={d}"));
    }
    if let Some(s) = g.seed {
        kv.push(format!("seed={s}"));
    }
    if let Some(w) = g.workers {
        kv.push(format!("workers={w}"));
    }
    kv.extend(g.set.iter().cloned());
    cfg.apply_overrides(kv.iter().map(String::as_str))?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::UnknownToken(_) => 1,
        _ => 2,
    }
}

/// Parse `argv` (program name first) and run. Returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn with_ablation(mut cfg: RunConfig, ablation: Option<String>) -> rbvla::Result<RunConfig> {
    if let Some(a) = ablation {
        cfg.set("ablation", &a)?;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn dispatch(cli: Cli) -> rbvla::Result<()> {
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::GenData { task, episodes, out } => {
            let mut cfg = cfg;
            if let Some(t) = task {
                cfg.set("task", &t)?;
            }
            if let Some(n) = episodes {
                cfg.episodes = n;
            }
            if let Some(o) = out {
                cfg.data = o;
            }
            let (m, path) = pipeline::gen_data(&cfg)?;
            println!("wrote {} ({} episodes, task {})", path.display(), m.episodes, cfg.task);
        }
        Command::Train { stage, ablation } => {
            let cfg = with_ablation(cfg, ablation)?;
            let (ck, path) = train_stage(&cfg, stage.into())?;
            println!("wrote {} (stage {}, config {})", path.display(), ck.stage, ck.config_hash);
        }
        Command::Eval {
            task,
            variant,
            episodes,
            perturb,
        } => {
            let mut cfg = cfg;
            if let Some(t) = task {
                cfg.set("task", &t)?;
            }
            if let Some(n) = episodes {
                cfg.eval_episodes = n;
            }
            cfg.perturb |= perturb;
            let (r, files) = pipeline::run_eval(&cfg, &variant)?;
            println!(
                "{} on {}: {}/{} successes ({})",
                r.variant,
                r.task,
                r.successes(),
                r.n_episodes,
                num(r.success_rate)
            );
            print_files(&files);
        }
        Command::Analyze { what, ablation } => {
            let cfg = with_ablation(cfg, ablation)?;
            let ba = BeliefAnalysis::load(&cfg)?;
            let files = match what {
                AnalysisArg::Similarity => {
                    let (s, r2, f) = pipeline::run_similarity(&cfg, &ba)?;
                    println!(
                        "pearson action {} obs {} variance ratio {} inverse-dynamics R2 {}",
                        num(s.pearson_action),
                        num(s.pearson_obs),
                        num(s.variance_ratio_bottom_top),
                        num(r2)
                    );
                    f
                }
                AnalysisArg::Stochastic => {
                    let (s, f) = pipeline::run_stochastic(&cfg, &ba)?;
                    println!(
                        "mean distance h1 {} h5 {}; final KL {}",
                        num(s.mean_distance_h1),
                        num(s.mean_distance_h5),
                        num(s.kl_final_mean)
                    );
                    f
                }
                AnalysisArg::Attention => {
                    let (a, f) = pipeline::run_attention(&cfg, &ba)?;
                    println!(
                        "post-occlusion belief weight {} (uniform {})",
                        num(a.post_occlusion_belief_weight),
                        num(a.uniform_level)
                    );
                    f
                }
            };
            print_files(&files);
        }
        Command::Bench { what, ablation } => {
            let cfg = with_ablation(cfg, ablation)?;
            let files = match what {
                BenchArg::Memory => {
                    let (t, f) = pipeline::run_memory_bench(&cfg)?;
                    for r in &t.rows {
                        let ratios: Vec<String> = r.ratios.iter().map(|v| format!("{v:.2}x")).collect();
                        println!("{:<20} {}", r.kind.name(), ratios.join(" "));
                    }
                    f
                }
                BenchArg::Invocations => {
                    let (c, f) = pipeline::run_invocation_bench(&cfg, None)?;
                    println!(
                        "intent calls {} over {} steps; per-step counterfactual {} ({}:1)",
                        c.intent_calls,
                        c.steps,
                        c.counterfactual_intent_calls,
                        num(c.ratio())
                    );
                    f
                }
            };
            print_files(&files);
        }
        Command::Rollout {
            instruction,
            render_dir,
            ablation,
            scale,
        } => {
            let cfg = with_ablation(cfg, ablation)?;
            let (log, frames) = pipeline::rollout_instruction(&cfg, &instruction)?;
            write_frames(&render_dir, &frames, scale.max(1))?;
            println!(
                "{} after {} steps; {} frames in {}",
                if log.success { "success" } else { "no success" },
                log.steps,
                frames.len(),
                render_dir.display()
            );
        }
    }
    Ok(())
}

/// Save observations as `frame_00000.png`, ... upscaled by `scale`.
pub fn write_frames(dir: &Path, frames: &[Observation], scale: u32) -> rbvla::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let side = IMG_SIDE as u32;
    for (i, o) in frames.iter().enumerate() {
        let img = image::RgbImage::from_raw(side, side, o.image.clone())
            .ok_or_else(|| Error::Shape("observation image has the wrong size".into()))?;
        let img = image::imageops::resize(&img, side * scale, side * scale, image::imageops::FilterType::Nearest);
        let path = dir.join(format!("frame_{i:05}.png"));
        img.save(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
    }
    Ok(())
}
