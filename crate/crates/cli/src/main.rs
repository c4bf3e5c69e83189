use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tokenfuse::analysis::{fluctuation_seeds, fluctuation_stats, project_2d, value_histogram, write_report};
use tokenfuse::corpus::run_pipeline;
use tokenfuse::fuser::NormScale;
use tokenfuse::gradsuite::{gradient_suite, SUITE_EPS};
use tokenfuse::media::VideoClip;
use tokenfuse::tensor::{read_tensor, write_tensor};
use tokenfuse::train::dataset::all_scenes;
use tokenfuse::train::{ablation_run, load_checkpoint, sample, semantic_eval, train_run, Arm, SceneSpec};
use tokenfuse::{DType, Error, Result, RunConfig, Tensor};

#[derive(Parser)]
#[command(name = "tokenfuse", version, about = "Text-token fusion for a small latent video diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Train several fuser arms on identical data and compare them.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated arms, e.g. `a1,a2,a7` or `baseline,full`.
        #[arg(long, default_value = "a1,a2,a3,a4,a5,a6,a7")]
        arms: String,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Generate a clip from a checkpoint and save it as an MTF1 tensor.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampler steps; defaults to the checkpoint's `train.sample_steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved clip against a scene such as "2 red squares moving left".
    Eval {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        spec: String,
    },
    /// Token statistics with CSV and SVG output.
    Analyze {
        #[command(subcommand)]
        which: Analyze,
    },
    /// Filter a JSON-lines clip corpus.
    Curate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference checks of every fuser and denoiser gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SUITE_EPS)]
        eps: f64,
    },
    /// Write simulated token bundles in the embedding dump format.
    DumpEmbeddings {
        #[command(flatten)]
        config: ConfigArgs,
        /// Repeat for several prompts; bundle N goes to `OUT/bundle-NNN`.
        #[arg(long, required = true)]
        prompt: Vec<String>,
        #[arg(long, default_value_t = 0)]
        answer_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// Value histogram of one token source.
    Hist {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value_t = Source::Decoder)]
        source: Source,
        #[arg(long, default_value_t = 40)]
        bins: usize,
        #[arg(long, default_value_t = -2.0, allow_negative_numbers = true)]
        lo: f64,
        #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
        hi: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// 2-D PCA projection of encoder and decoder tokens.
    Project {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spread of query and answer tokens over repeated encodings.
    Fluct {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "2 red squares moving left")]
        prompt: String,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Encoder,
    Decoder,
    /// Decoder tokens after layer norm with unit scale.
    Normed,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for bad configuration or arguments, 2 for everything that failed at runtime.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Param(_) => 1,
        _ => 2,
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { config, out } => train(&config.resolve()?, &out),
        Command::Ablate { config, arms, out } => {
            let cfg = config.resolve()?;
            let arms = Arm::parse_list(&arms)?;
            let every = (cfg.train.steps / 10).max(1);
            let report = ablation_run(&cfg, &arms, Some(&out), |arm, step, loss| {
                if step % every == 0 {
                    eprintln!("{arm} step {step} loss {loss:.5}");
                }
            })?;
            print!("{}", report.to_csv());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sample { ckpt, prompt, seed, steps, out } => {
            let model = load_checkpoint(&ckpt)?;
            let steps = steps.unwrap_or(model.config.train.sample_steps);
            let clip = sample(&model, &prompt, steps, seed)?;
            write_tensor(clip.frames(), &out)?;
            println!("{}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { video, spec } => {
            let spec: SceneSpec = spec.parse()?;
            let clip = VideoClip::new(read_tensor(&video)?)?;
            let s = semantic_eval(&clip, &spec);
            let json = serde_json::json!({
                "count_ok": s.count_ok, "color_ok": s.color_ok,
                "direction_ok": s.direction_ok, "all_ok": s.all_ok(),
            });
            println!("{json}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { which } => analyze(which),
        Command::Curate { input, out, report } => {
            let r = run_pipeline(&input, &out)?;
            r.write(&report)?;
            println!("{}", serde_json::to_string(&r)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed, eps } => {
            let entries = gradient_suite(seed, eps)?;
            let mut failed = 0;
            for e in &entries {
                let verdict = if e.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!e.passed());
                println!("{:<11} {:<28} {:.3e} {verdict}", e.target, e.wrt, e.max_relative_error);
            }
            println!("{} checks, {failed} failed", entries.len());
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::DumpEmbeddings { config, prompt, answer_seed, out } => {
            let sim = config.resolve()?.text.simulator();
            for (i, p) in prompt.iter().enumerate() {
                let dir = out.join(format!("bundle-{i:03}"));
                sim.bundle(p, answer_seed)?.export(&dir)?;
                println!("{}", dir.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn train(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let every = (cfg.train.steps / 20).max(1);
    let outcome = train_run(cfg, Some(out), |step, loss| {
        if step % every == 0 {
            eprintln!("step {step} loss {loss:.5}");
        }
    })?;
    println!(
        "steps {} initial_loss {} final_loss {} run {}",
        outcome.losses.len(),
        outcome.initial_loss(),
        outcome.final_loss(cfg.train.final_window),
        out.display()
    );
    if outcome.diverged {
        eprintln!("error: training diverged after {} steps", outcome.losses.len());
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn scene_prompts() -> Vec<String> {
    all_scenes().into_iter().map(|(n, c, d)| SceneSpec::new(n, c, d).prompt()).collect()
}

fn stack(rows: Vec<Tensor>) -> Result<Tensor> {
    Tensor::concat(&rows, 0)
}

fn analyze(which: Analyze) -> Result<ExitCode> {
    match which {
        Analyze::Hist { config, source, bins, lo, hi, out } => {
            let sim = config.resolve()?.text.simulator();
            let prompts = scene_prompts();
            let norm = NormScale::new(sim.d, 1.0, DType::F64);
            let rows = prompts
                .iter()
                .enumerate()
                .map(|(i, p)| match source {
                    Source::Encoder => sim.encode_encoder(p),
                    Source::Decoder => sim.bundle(p, i as u64)?.decoder_tokens(),
                    Source::Normed => norm.apply(&sim.bundle(p, i as u64)?.decoder_tokens()?),
                })
                .collect::<Result<Vec<_>>>()?;
            let h = value_histogram(&stack(rows)?, bins, (lo, hi))?;
            write_report(&out, "hist", &h.to_csv(), &h.to_svg())?;
            println!("{} values, {:.4} within [-0.5, 0.5]", h.total, h.mass_within(-0.5, 0.5));
        }
        Analyze::Project { config, out } => {
            let sim = config.resolve()?.text.simulator();
            let prompts = scene_prompts();
            let enc = stack(prompts.iter().map(|p| sim.encode_encoder(p)).collect::<Result<_>>()?)?;
            let dec = stack(
                prompts.iter().enumerate().map(|(i, p)| sim.bundle(p, i as u64)?.decoder_tokens()).collect::<Result<_>>()?,
            )?;
            let proj = project_2d(&[("encoder".into(), enc), ("decoder".into(), dec)])?;
            write_report(&out, "proj", &proj.to_csv(), &proj.to_svg())?;
            println!("{} points", proj.points.len());
        }
        Analyze::Fluct { config, prompt, k, seed, out } => {
            let sim = config.resolve()?.text.simulator();
            let r = fluctuation_stats(&sim, &prompt, &fluctuation_seeds(seed, k))?;
            write_report(&out, "fluct", &r.to_csv(), &r.to_svg())?;
            println!("query_var {} answer_var {}", r.query_var, r.answer_var);
        }
    }
    Ok(ExitCode::SUCCESS)
}
