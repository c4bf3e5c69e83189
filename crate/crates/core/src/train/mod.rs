//! Training, sampling and the ablation harness on synthetic scenes.

pub mod ablation;
pub mod checkpoint;
pub mod dataset;
pub mod optim;
pub mod semantic;

use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::denoiser::{DenoiserConfig, DenoiserState};
use crate::error::{Error, Result};
use crate::fuser::{FusedConditioning, FuserState};
use crate::media::{latent_shape, patchify, unpatchify, Codec, PatchSpec, VideoClip, VideoLatent};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{DType, Tensor};
use crate::textcond::{TextSimulator, TokenBundle};

pub use ablation::{ablation_run, AblationReport, Arm, ArmResult};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{render, synth_dataset, Canvas, Color, Direction, Sample, SceneSpec};
pub use optim::Adam;
pub use semantic::{semantic_eval, SemanticScores};

/// Longest prompt, in words, the denoiser accepts.
pub const MAX_PROMPT_WORDS: usize = 16;
/// Loss above this multiple of the initial loss counts toward divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive steps above the factor before a run is declared diverged.
pub const DIVERGENCE_PATIENCE: usize = 20;

/// Everything needed to turn prompts and clips into denoiser inputs, plus
/// the trainable state. The codec is fixed and never trained.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub schedule: NoiseSchedule,
    pub codec: Codec,
    pub text: TextSimulator,
    pub patch: PatchSpec,
    pub denoiser: DenoiserState,
    pub fuser: FuserState,
}

impl Model {
    /// Fresh model; the denoiser is initialized from the `init` stream of the seed.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let m = &config.media;
        let t = &config.text;
        let patch = PatchSpec { q: m.patch_q, p: m.patch_p };
        let dims = latent_shape(m.frames, m.height, m.width, m.channels)?;
        let den_cfg = DenoiserConfig {
            d_model: config.model.d_model,
            depth: config.model.depth,
            heads: config.model.heads,
            max_video_tokens: patch.token_count(dims)?,
            max_text_tokens: MAX_PROMPT_WORDS,
            text_width: t.d,
            video_width: patch.token_width(m.channels),
            timesteps: config.schedule.steps,
        };
        let mut rng = Rng::stream(config.seed, "init");
        Ok(Self {
            config: config.clone(),
            schedule: config.schedule.build()?,
            codec: Codec::new(m.channels, DType::F64)?,
            text: t.simulator(),
            patch,
            denoiser: DenoiserState::new(den_cfg, DType::F64, &mut rng)?,
            fuser: FuserState::new(t.d, &config.fuser, DType::F64),
        })
    }

    pub fn canvas(&self) -> Canvas {
        let m = &self.config.media;
        Canvas { frames: m.frames, height: m.height, width: m.width }
    }

    pub fn latent_dims(&self) -> [usize; 4] {
        let m = &self.config.media;
        latent_shape(m.frames, m.height, m.width, m.channels).expect("validated in new")
    }

    /// Clip → normalized latent tokens (L, w_v).
    pub fn encode_clip(&self, clip: &VideoClip) -> Result<Tensor> {
        let m = &self.config.media;
        let z = self.codec.compress(clip)?.into_tensor();
        let z = z.add_scalar(-m.latent_shift).scale(m.latent_scale);
        patchify(&VideoLatent::new(z)?, self.patch)
    }

    /// Normalized latent tokens → clip with pixels clamped to [0, 1].
    pub fn decode_tokens(&self, tokens: &Tensor) -> Result<VideoClip> {
        let m = &self.config.media;
        let z = unpatchify(tokens, self.latent_dims(), self.patch)?.into_tensor();
        let z = z.scale(1.0 / m.latent_scale).add_scalar(m.latent_shift);
        self.codec.decompress(&VideoLatent::new(z)?)
    }

    pub fn bundle(&self, prompt: &str, answer_seed: u64) -> Result<TokenBundle> {
        self.text.bundle(prompt, answer_seed ^ self.config.text.answer_salt)
    }

    pub fn conditioning(&self, prompt: &str, answer_seed: u64) -> Result<FusedConditioning> {
        self.fuser.condition(&self.bundle(prompt, answer_seed)?)
    }
}

/// One element of a training batch.
#[derive(Debug, Clone)]
pub struct LossItem {
    pub z0: Tensor,
    pub prompt: String,
    pub t: usize,
    pub eps: Tensor,
    pub answer_seed: u64,
}

/// Mean squared error between the denoiser output and the schedule's
/// prediction target, averaged over items in order.
pub fn diffusion_loss(model: &Model, items: &[LossItem]) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::Param("empty batch".into()));
    }
    let mut total: Option<Tensor> = None;
    for item in items {
        let cond = model.conditioning(&item.prompt, item.answer_seed)?;
        let z_t = model.schedule.add_noise(&item.z0, &item.eps, item.t)?;
        let target = model.schedule.prediction_target(&item.z0, &item.eps, item.t)?;
        let pred = model.denoiser.denoise(&z_t, &cond, item.t)?;
        let mse = pred.mse(&target)?;
        total = Some(match total {
            None => mse,
            Some(acc) => acc.add(&mse)?,
        });
    }
    Ok(total.expect("nonempty").scale(1.0 / items.len() as f64))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub diverged: bool,
    pub model: Model,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    /// Mean of the last `window` logged losses.
    pub fn final_loss(&self, window: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(window.max(1))..];
        if tail.is_empty() {
            return f64::NAN;
        }
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn write_metrics(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("step,loss,grad_norm\n");
        for (i, loss) in self.losses.iter().enumerate() {
            let gn = self.grad_norms.get(i).map_or(String::from("nan"), |g| g.to_string());
            out.push_str(&format!("{},{loss},{gn}\n", i + 1));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// The encoded training set for a config.
pub fn training_set(model: &Model) -> Result<Vec<(Sample, Tensor)>> {
    let cfg = &model.config;
    let samples = synth_dataset(cfg.seed, cfg.train.clips, model.canvas(), cfg.train.object_size, cfg.train.object_step)?;
    samples
        .into_iter()
        .map(|s| {
            let tokens = model.encode_clip(&s.clip)?;
            Ok((s, tokens))
        })
        .collect()
}

/// Trains a fresh model. With `run_dir`, the resolved config, per-step
/// metrics and checkpoints are written there. `progress` is called after
/// every step with (step, loss).
pub fn train_run(
    config: &RunConfig,
    run_dir: Option<&Path>,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let mut model = Model::new(config)?;
    let tc = config.train.clone();
    if let Some(dir) = run_dir {
        config.echo_to(dir)?;
    }
    let data = training_set(&model)?;

    let mut t_rng = Rng::stream(config.seed, "timestep");
    let mut eps_rng = Rng::stream(config.seed, "noise");
    let mut answer_rng = Rng::stream(config.seed, "answer");
    let mut batch_rng = Rng::stream(config.seed, "batches");
    let fixed_answers: Vec<u64> = data.iter().map(|_| answer_rng.next_u64()).collect();

    let mut adam = Adam::new(tc.lr, tc.beta1, tc.beta2, tc.eps);
    let mut losses = Vec::with_capacity(tc.steps);
    let mut grad_norms = Vec::with_capacity(tc.steps);
    let mut order: Vec<usize> = Vec::new();
    let mut above = 0;
    let mut diverged = false;

    for step in 1..=tc.steps {
        let mut items = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                if tc.batch < data.len() {
                    batch_rng.shuffle(&mut order);
                }
                order.reverse();
            }
            let idx = order.pop().expect("refilled above");
            let (sample, z0) = &data[idx];
            let t = 1 + t_rng.below(model.schedule.steps());
            let eps = Tensor::randn(z0.shape(), 1.0, DType::F64, &mut eps_rng);
            let fresh = answer_rng.next_u64();
            let answer_seed = if tc.resample_answers { fresh } else { fixed_answers[idx] };
            items.push(LossItem { z0: z0.clone(), prompt: sample.prompt.clone(), t, eps, answer_seed });
        }
        let loss = diffusion_loss(&model, &items)?;
        let value = loss.item()?;
        losses.push(value);
        progress(step, value);
        if !value.is_finite() {
            diverged = true;
            break;
        }
        loss.backward()?;
        grad_norms.push(adam.step(&mut [&mut model.denoiser, &mut model.fuser]));

        if value > DIVERGENCE_FACTOR * losses[0] {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                diverged = true;
                break;
            }
        } else {
            above = 0;
        }
        if let Some(dir) = run_dir {
            if tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 && step < tc.steps {
                save_checkpoint(&model, dir.join(format!("checkpoint-{step:06}")), step)?;
            }
        }
    }

    let outcome = TrainOutcome { losses, grad_norms, diverged, model };
    if let Some(dir) = run_dir {
        outcome.write_metrics(dir.join("metrics.csv"))?;
        save_checkpoint(&outcome.model, dir.join("checkpoint"), outcome.losses.len())?;
        let summary = serde_json::json!({
            "steps_run": outcome.losses.len(),
            "initial_loss": outcome.initial_loss(),
            "final_loss": outcome.final_loss(tc.final_window),
            "diverged": outcome.diverged,
        });
        let path = dir.join("summary.json");
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(outcome)
}

/// Deterministic DDIM sampling from pure noise at t = T over `steps`
/// trailing timesteps.
pub fn sample(model: &Model, prompt: &str, steps: usize, seed: u64) -> Result<VideoClip> {
    let schedule = &model.schedule;
    let ts = schedule.trailing_timesteps(steps)?;
    let answer_seed = Rng::stream(seed, "sample-answer").next_u64();
    let cond = model.conditioning(prompt, answer_seed)?;
    let cond = FusedConditioning { sequence: cond.sequence.detach() };
    let dims = model.latent_dims();
    let shape = [model.patch.token_count(dims)?, model.patch.token_width(dims[3])];
    let mut z = Tensor::randn(&shape, 1.0, DType::F64, &mut Rng::stream(seed, "sample-noise"));
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let pred = model.denoiser.denoise(&z, &cond, t)?.detach();
        z = schedule.ddim_step(&z, &pred, t, t_prev)?;
    }
    model.decode_tokens(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::Parameterization;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 3;
        cfg.model.d_model = 16;
        cfg.model.heads = 2;
        cfg.model.depth = 1;
        cfg.train.steps = 6;
        cfg.train.batch = 2;
        cfg.train.clips = 3;
        cfg
    }

    #[test]
    fn fresh_model_loss_is_mean_squared_v() {
        let mut cfg = tiny_config();
        cfg.schedule.mode = Parameterization::V;
        let model = Model::new(&cfg).unwrap();
        let data = training_set(&model).unwrap();
        let mut rng = Rng::new(77);
        let items: Vec<LossItem> = data
            .iter()
            .zip([3usize, 50, 17])
            .map(|((s, z0), t)| LossItem {
                z0: z0.clone(),
                prompt: s.prompt.clone(),
                t,
                eps: Tensor::randn(z0.shape(), 1.0, DType::F64, &mut rng),
                answer_seed: 1,
            })
            .collect();
        let loss = diffusion_loss(&model, &items).unwrap().item().unwrap();
        // v = s·ε − n·z0 written out coordinate by coordinate
        let sab = model.schedule.sqrt_alpha_bars();
        let mut expect = 0.0;
        for item in &items {
            let s = sab[item.t - 1];
            let n = (1.0 - s * s).sqrt();
            let sq: f64 = item
                .eps
                .data()
                .iter()
                .zip(item.z0.data())
                .map(|(e, z)| (s * e - n * z).powi(2))
                .sum();
            expect += sq / item.z0.numel() as f64;
        }
        expect /= items.len() as f64;
        assert!((loss - expect).abs() < 1e-12 * expect.max(1.0), "{loss} vs {expect}");
    }

    #[test]
    fn encode_decode_preserves_rendered_scene() {
        let model = Model::new(&RunConfig::default()).unwrap();
        let spec = SceneSpec { start: 16, ..SceneSpec::new(3, Color::Green, Direction::Down) };
        let clip = render(&spec, &model.canvas()).unwrap();
        let tokens = model.encode_clip(&clip).unwrap();
        assert_eq!(tokens.shape(), &[48, 32]);
        assert!(tokens.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(semantic_eval(&model.decode_tokens(&tokens).unwrap(), &spec).all_ok());
    }

    #[test]
    fn zero_steps_is_a_parameter_error() {
        let mut cfg = tiny_config();
        cfg.train.steps = 0;
        assert!(matches!(train_run(&cfg, None, |_, _| {}), Err(Error::Param(_))));
    }

    #[test]
    fn training_is_reproducible_and_writes_artifacts() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let a = train_run(&cfg, Some(dir.path()), |_, _| {}).unwrap();
        let b = train_run(&cfg, None, |_, _| {}).unwrap();
        assert_eq!(a.losses.len(), 6);
        assert_eq!(
            a.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(a.losses.iter().all(|v| v.is_finite()));
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("step,loss,grad_norm\n1,"));
        assert_eq!(csv.lines().count(), 7);
        for f in ["config.txt", "seed", "version", "summary.json", "checkpoint/manifest.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let restored = load_checkpoint(dir.path().join("checkpoint")).unwrap();
        let x = sample(&a.model, "1 red squares moving left", 3, 9).unwrap();
        let y = sample(&restored, "1 red squares moving left", 3, 9).unwrap();
        assert!(x.frames().bit_eq(y.frames()));
    }

    #[test]
    fn sampling_is_deterministic_and_clamped() {
        let model = Model::new(&tiny_config()).unwrap();
        let a = sample(&model, "2 blue squares moving up", 4, 1).unwrap();
        let b = sample(&model, "2 blue squares moving up", 4, 1).unwrap();
        assert!(a.frames().bit_eq(b.frames()));
        assert_eq!(a.frames().shape(), &[9, 64, 64, 3]);
        assert!(a.frames().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(sample(&model, "2 blue squares moving up", 0, 1).is_err());
    }

    #[test]
    fn divergence_is_recorded_not_raised() {
        let mut cfg = tiny_config();
        cfg.train.lr = 1e6;
        cfg.train.steps = 60;
        let out = train_run(&cfg, None, |_, _| {}).unwrap();
        assert!(out.diverged, "{:?}", out.losses);
        assert!(out.losses.len() < 60);
    }
}
