//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments; blank lines are ignored. Every key
//! has a default, unknown keys are rejected, and [`RunConfig::render`]
//! produces a file that parses back to the same configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fuser::{FuserConfig, FuserFlags};
use crate::schedule::{NoiseSchedule, Parameterization};
use crate::textcond::TextSimulator;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub mode: Parameterization,
    pub zero_snr: bool,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let base = NoiseSchedule::scaled_linear(self.steps, self.beta_start, self.beta_end)?;
        if self.zero_snr {
            base.with_mode(Parameterization::V)?.rescale_zero_terminal_snr()?.with_mode(self.mode)
        } else {
            base.with_mode(self.mode)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MediaConfig {
    pub channels: usize,
    pub patch_p: usize,
    pub patch_q: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Latents are fed to the denoiser as `(z - shift) * scale`.
    pub latent_shift: f64,
    pub latent_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextConfig {
    pub d: usize,
    pub sigma_encoder: f64,
    pub sigma_decoder: f64,
    pub sigma_answer: f64,
    /// Mixed into every answer seed; changing it redraws all decoder answers.
    pub answer_salt: u64,
}

impl TextConfig {
    pub fn simulator(&self) -> TextSimulator {
        TextSimulator {
            d: self.d,
            sigma_encoder: self.sigma_encoder,
            sigma_decoder: self.sigma_decoder,
            sigma_answer: self.sigma_answer,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Number of synthetic clips in the training set.
    pub clips: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Write a checkpoint every k steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Draw a fresh decoder answer for every item at every step.
    pub resample_answers: bool,
    /// Final loss is the mean over this many trailing steps.
    pub final_window: usize,
    pub sample_steps: usize,
    pub object_size: usize,
    pub object_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub media: MediaConfig,
    pub text: TextConfig,
    pub fuser: FuserConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleConfig {
                steps: 50,
                beta_start: 0.00085,
                beta_end: 0.012,
                mode: Parameterization::V,
                zero_snr: true,
            },
            media: MediaConfig {
                channels: 8,
                patch_p: 2,
                patch_q: 1,
                frames: 9,
                height: 64,
                width: 64,
                latent_shift: 0.5,
                latent_scale: 2.0,
            },
            text: TextConfig { d: 32, sigma_encoder: 0.17, sigma_decoder: 1.2, sigma_answer: 0.5, answer_salt: 0 },
            fuser: FuserConfig { alpha: 1.0, gamma_init: 0.01, flags: FuserFlags::default() },
            model: ModelConfig { d_model: 64, depth: 2, heads: 4 },
            train: TrainConfig {
                steps: 500,
                batch: 8,
                clips: 8,
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                checkpoint_every: 0,
                resample_answers: true,
                final_window: 50,
                sample_steps: 10,
                object_size: 16,
                object_step: 2,
            },
        }
    }
}

fn parse_value<T: FromStr>(raw: &str, key: &str, line: usize) -> Result<T> {
    raw.parse().map_err(|_| Error::Config {
        line,
        key: key.to_string(),
        msg: format!("cannot parse {raw:?} as {}", std::any::type_name::<T>().rsplit("::").next().unwrap_or("value")),
    })
}

fn show<T: Display>(v: &T) -> String {
    v.to_string()
}

macro_rules! registry {
    ($($key:literal => $($field:ident).+ : $ty:ty),* $(,)?) => {
        impl RunConfig {
            /// Every recognized key, in rendering order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its textual value. `line` is reported in errors.
            pub fn set(&mut self, key: &str, raw: &str, line: usize) -> Result<()> {
                match key {
                    $($key => self$(.$field)+ = parse_value::<$ty>(raw, key, line)?,)*
                    _ => {
                        return Err(Error::Config { line, key: key.to_string(), msg: "unknown key".into() })
                    }
                }
                Ok(())
            }

            /// (key, value) pairs for every key.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, show(&self$(.$field)+))),*]
            }
        }
    };
}

registry! {
    "seed" => seed: u64,
    "schedule.T" => schedule.steps: usize,
    "schedule.beta_start" => schedule.beta_start: f64,
    "schedule.beta_end" => schedule.beta_end: f64,
    "schedule.mode" => schedule.mode: Parameterization,
    "schedule.zero_snr" => schedule.zero_snr: bool,
    "media.channels" => media.channels: usize,
    "media.patch_p" => media.patch_p: usize,
    "media.patch_q" => media.patch_q: usize,
    "media.frames" => media.frames: usize,
    "media.height" => media.height: usize,
    "media.width" => media.width: usize,
    "media.latent_shift" => media.latent_shift: f64,
    "media.latent_scale" => media.latent_scale: f64,
    "text.d" => text.d: usize,
    "text.sigma_encoder" => text.sigma_encoder: f64,
    "text.sigma_decoder" => text.sigma_decoder: f64,
    "text.sigma_answer" => text.sigma_answer: f64,
    "text.answer_salt" => text.answer_salt: u64,
    "fuser.alpha" => fuser.alpha: f64,
    "fuser.gamma_init" => fuser.gamma_init: f64,
    "fuser.use_decoder" => fuser.flags.use_decoder: bool,
    "fuser.use_norm" => fuser.flags.use_norm: bool,
    "fuser.use_zero_conv" => fuser.flags.use_zero_conv: bool,
    "fuser.use_ss" => fuser.flags.use_ss: bool,
    "model.d_model" => model.d_model: usize,
    "model.depth" => model.depth: usize,
    "model.heads" => model.heads: usize,
    "train.steps" => train.steps: usize,
    "train.batch" => train.batch: usize,
    "train.clips" => train.clips: usize,
    "train.lr" => train.lr: f64,
    "train.beta1" => train.beta1: f64,
    "train.beta2" => train.beta2: f64,
    "train.eps" => train.eps: f64,
    "train.checkpoint_every" => train.checkpoint_every: usize,
    "train.resample_answers" => train.resample_answers: bool,
    "train.final_window" => train.final_window: usize,
    "train.sample_steps" => train.sample_steps: usize,
    "train.object_size" => train.object_size: usize,
    "train.object_step" => train.object_step: usize,
}

impl RunConfig {
    /// Parses config text on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key = value` lines without validating the result.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config { line, key: content.to_string(), msg: "expected `key = value`".into() });
            };
            self.set(key.trim(), value.trim(), line)?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override, as given on a command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(Error::Config { line: 0, key: assignment.to_string(), msg: "expected key=value".into() });
        };
        self.set(key.trim(), value.trim(), 0)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.steps == 0 {
            return Err(Error::Param("train.steps must be at least 1".into()));
        }
        if t.batch == 0 || t.clips == 0 {
            return Err(Error::Param("train.batch and train.clips must be at least 1".into()));
        }
        if t.final_window == 0 || t.sample_steps == 0 {
            return Err(Error::Param("train.final_window and train.sample_steps must be at least 1".into()));
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(Error::Param("optimizer settings out of range".into()));
        }
        if self.media.latent_scale == 0.0 || !self.media.latent_scale.is_finite() {
            return Err(Error::Param("media.latent_scale must be finite and nonzero".into()));
        }
        self.schedule.build()?;
        Ok(())
    }

    /// The resolved configuration as parseable text.
    pub fn render(&self) -> String {
        let mut out = format!("# tokenfuse {VERSION}\n");
        for (key, value) in self.entries() {
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// Writes `config.txt`, `seed` and `version` into a run directory.
    pub fn echo_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in
            [("config.txt", self.render()), ("seed", format!("{}\n", self.seed)), ("version", format!("{VERSION}\n"))]
        {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
