//! A small diffusion transformer over the joint text + video sequence.
//!
//! Text rows come first, video rows follow. Every block applies full
//! self-attention over both segments, modulated through adaptive layer-norm
//! shift/scale by the timestep embedding plus the projected mean text token.
//! Only the video rows are read out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuser::FusedConditioning;
use crate::params::{visit_child, Parameterized};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};
use crate::textcond::INSTRUCTION_COUNT;

const LN_EPS: f64 = 1e-6;
const TEXT_POS_STD: f64 = 0.02;
const VIDEO_POS_STD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_video_tokens: usize,
    pub max_text_tokens: usize,
    /// Width of incoming text tokens.
    pub text_width: usize,
    /// Width of a video token, q·p·p·C.
    pub video_width: usize,
    /// Number of diffusion steps T; valid timesteps are 1..=T.
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            depth: 2,
            heads: 4,
            max_video_tokens: 64,
            max_text_tokens: 16,
            text_width: 32,
            video_width: 32,
            timesteps: 50,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Param("depth must be at least 1".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Param(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Param("d_model must be even for sinusoidal features".into()));
        }
        for (name, v) in [
            ("max_video_tokens", self.max_video_tokens),
            ("text_width", self.text_width),
            ("video_width", self.video_width),
            ("timesteps", self.timesteps),
        ] {
            if v == 0 {
                return Err(Error::Param(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Dense layer with weight stored as (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, dtype: DType, rng: &mut Rng) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Self {
            weight: Tensor::randn(&[input, output], std, dtype, rng).requires_grad(),
            bias: Tensor::zeros(&[output], dtype).requires_grad(),
        }
    }

    pub fn zeros(input: usize, output: usize, dtype: DType) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output], dtype).requires_grad(),
            bias: Tensor::zeros(&[output], dtype).requires_grad(),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

impl Parameterized for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    /// Timestep → (shift₁, scale₁, shift₂, scale₂), zero at init.
    pub ada: Linear,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl Parameterized for Block {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child("ada", &mut self.ada, f);
        visit_child("qkv", &mut self.qkv, f);
        visit_child("attn_out", &mut self.attn_out, f);
        visit_child("mlp_in", &mut self.mlp_in, f);
        visit_child("mlp_out", &mut self.mlp_out, f);
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserState {
    pub config: DenoiserConfig,
    pub text_in: Linear,
    pub video_in: Linear,
    pub text_pos: Tensor,
    pub video_pos: Tensor,
    pub time_mlp_in: Linear,
    pub time_mlp_out: Linear,
    /// Mean text token → added to the timestep vector before modulation.
    pub text_pool: Linear,
    pub blocks: Vec<Block>,
    pub final_ada: Linear,
    pub out: Linear,
}

/// Sinusoidal features of the raw step index; the first half are sines and
/// the second half cosines over geometrically spaced frequencies.
pub fn sinusoidal_features(t: usize, d: usize, steps: usize) -> Result<Vec<f64>> {
    if t == 0 || t > steps {
        return Err(Error::Param(format!("timestep {t} outside 1..={steps}")));
    }
    if d == 0 || d % 2 != 0 {
        return Err(Error::Param(format!("feature width {d} must be even and positive")));
    }
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    x.layer_norm(LN_EPS)?.mul_row(&scale.add_scalar(1.0))?.add_row(shift)
}

/// Splits a (k·d) row into k vectors of width d.
fn chunks(v: &Tensor, k: usize, d: usize) -> Result<Vec<Tensor>> {
    let row = v.reshape(&[1, k * d])?;
    (0..k).map(|i| row.narrow(1, i * d, d)?.reshape(&[d])).collect()
}

impl DenoiserState {
    pub fn new(config: DenoiserConfig, dtype: DType, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let blocks = (0..config.depth)
            .map(|_| Block {
                ada: Linear::zeros(d, 4 * d, dtype),
                qkv: Linear::new(d, 3 * d, dtype, rng),
                attn_out: Linear::new(d, d, dtype, rng),
                mlp_in: Linear::new(d, 4 * d, dtype, rng),
                mlp_out: Linear::new(4 * d, d, dtype, rng),
            })
            .collect();
        Ok(Self {
            config,
            text_in: Linear::new(config.text_width, d, dtype, rng),
            video_in: Linear::new(config.video_width, d, dtype, rng),
            text_pos: Tensor::randn(&[config.max_text_tokens + INSTRUCTION_COUNT, d], TEXT_POS_STD, dtype, rng)
                .requires_grad(),
            video_pos: Tensor::randn(&[config.max_video_tokens, d], VIDEO_POS_STD, dtype, rng).requires_grad(),
            time_mlp_in: Linear::new(d, d, dtype, rng),
            time_mlp_out: Linear::new(d, d, dtype, rng),
            text_pool: Linear::new(d, d, dtype, rng),
            blocks,
            final_ada: Linear::zeros(d, 2 * d, dtype),
            out: Linear::zeros(d, config.video_width, dtype),
        })
    }

    /// Timestep conditioning vector (d_model).
    pub fn timestep_embedding(&self, t: usize) -> Result<Tensor> {
        let d = self.config.d_model;
        let dtype = self.out.weight.dtype();
        let feats = Tensor::new(sinusoidal_features(t, d, self.config.timesteps)?, &[1, d], dtype)?;
        let h = self.time_mlp_in.apply(&feats)?.silu();
        self.time_mlp_out.apply(&h)?.reshape(&[d])
    }

    fn attention(&self, block: &Block, x: &Tensor) -> Result<Tensor> {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let qkv = block.qkv.apply(x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let per_head = (0..heads)
            .map(|h| {
                let q = qkv.narrow(1, h * dh, dh)?;
                let k = qkv.narrow(1, d + h * dh, dh)?;
                let v = qkv.narrow(1, 2 * d + h * dh, dh)?;
                q.matmul(&k.transpose()?)?.scale(scale).softmax()?.matmul(&v)
            })
            .collect::<Result<Vec<_>>>()?;
        block.attn_out.apply(&Tensor::concat(&per_head, 1)?)
    }

    /// Predicts the diffusion target for `video_tokens` (L, w_v) at step `t`.
    pub fn denoise(&self, video_tokens: &Tensor, cond: &FusedConditioning, t: usize) -> Result<Tensor> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let (l, wv) = video_tokens.dims2()?;
        let (m, wt) = cond.sequence.dims2()?;
        if wv != cfg.video_width {
            return Err(Error::Shape(format!("video tokens have width {wv}, expected {}", cfg.video_width)));
        }
        if wt != cfg.text_width {
            return Err(Error::Shape(format!("text tokens have width {wt}, expected {}", cfg.text_width)));
        }
        if l == 0 || l > cfg.max_video_tokens {
            return Err(Error::Capacity(format!("{l} video tokens, limit {}", cfg.max_video_tokens)));
        }
        let text_limit = cfg.max_text_tokens + INSTRUCTION_COUNT;
        if m > text_limit {
            return Err(Error::Capacity(format!("{m} text tokens, limit {text_limit}")));
        }

        let video = self.video_in.apply(video_tokens)?.add(&self.video_pos.narrow(0, 0, l)?)?;
        let mut temb = self.timestep_embedding(t)?.reshape(&[1, d])?;
        let mut x = if m == 0 {
            video
        } else {
            let text = self.text_in.apply(&cond.sequence)?;
            let pooled = text.mean_axis(0)?.reshape(&[1, d])?;
            temb = temb.add(&self.text_pool.apply(&pooled)?)?;
            Tensor::concat(&[text.add(&self.text_pos.narrow(0, 0, m)?)?, video], 0)?
        };
        let temb_row = temb.silu();
        for block in &self.blocks {
            let mods = chunks(&block.ada.apply(&temb_row)?, 4, d)?;
            let h = modulate(&x, &mods[0], &mods[1])?;
            x = x.add(&self.attention(block, &h)?)?;
            let h = modulate(&x, &mods[2], &mods[3])?;
            let h = block.mlp_out.apply(&block.mlp_in.apply(&h)?.silu())?;
            x = x.add(&h)?;
        }
        let fin = chunks(&self.final_ada.apply(&temb_row)?, 2, d)?;
        let x = modulate(&x, &fin[0], &fin[1])?;
        self.out.apply(&x.narrow(0, m, l)?)
    }
}

impl Parameterized for DenoiserState {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child("text_in", &mut self.text_in, f);
        visit_child("video_in", &mut self.video_in, f);
        f("text_pos", &mut self.text_pos);
        f("video_pos", &mut self.video_pos);
        visit_child("time_mlp_in", &mut self.time_mlp_in, f);
        visit_child("time_mlp_out", &mut self.time_mlp_out, f);
        visit_child("text_pool", &mut self.text_pool, f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            visit_child(&format!("blocks.{i}"), block, f);
        }
        visit_child("final_ada", &mut self.final_ada, f);
        visit_child("out", &mut self.out, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuser::{FuserConfig, FuserState};
    use crate::tensor::grad_check;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            d_model: 16,
            depth: 2,
            heads: 2,
            max_video_tokens: 12,
            max_text_tokens: 6,
            text_width: 4,
            video_width: 8,
            timesteps: 50,
        }
    }

    /// Every parameter replaced by noise, so no path is trivially zero.
    fn randomized(cfg: DenoiserConfig, seed: u64) -> DenoiserState {
        let mut rng = Rng::new(seed);
        let mut s = DenoiserState::new(cfg, DType::F64, &mut rng).unwrap();
        s.visit_params(&mut |_, t| *t = Tensor::randn(t.shape(), 0.3, DType::F64, &mut rng).requires_grad());
        s
    }

    fn cond(rows: usize, width: usize, seed: u64) -> FusedConditioning {
        FusedConditioning { sequence: Tensor::randn(&[rows, width], 1.0, DType::F64, &mut Rng::new(seed)) }
    }

    #[test]
    fn sinusoidal_features_are_distinct_and_checked() {
        let a = sinusoidal_features(1, 16, 50).unwrap();
        let b = sinusoidal_features(2, 16, 50).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
        assert_eq!(a, sinusoidal_features(1, 16, 50).unwrap());
        assert!((a[0] - 1f64.sin()).abs() < 1e-15);
        assert!((a[8] - 1f64.cos()).abs() < 1e-15);
        assert!(matches!(sinusoidal_features(0, 16, 50), Err(Error::Param(_))));
        assert!(matches!(sinusoidal_features(51, 16, 50), Err(Error::Param(_))));
    }

    #[test]
    fn timestep_embedding_shape_and_determinism() {
        let s = DenoiserState::new(small_config(), DType::F64, &mut Rng::new(1)).unwrap();
        let e = s.timestep_embedding(7).unwrap();
        assert_eq!(e.shape(), &[16]);
        assert!(e.bit_eq(&s.timestep_embedding(7).unwrap()));
        assert!(matches!(s.timestep_embedding(0), Err(Error::Param(_))));
    }

    #[test]
    fn fresh_denoiser_outputs_exact_zero() {
        let cfg = DenoiserConfig { video_width: 8, text_width: 32, ..Default::default() };
        let s = DenoiserState::new(cfg, DType::F64, &mut Rng::new(2)).unwrap();
        let video = Tensor::randn(&[12, 8], 1.0, DType::F64, &mut Rng::new(3));
        let out = s.denoise(&video, &cond(9, 32, 4), 25).unwrap();
        assert_eq!(out.shape(), &[12, 8]);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn config_is_validated() {
        let bad = DenoiserConfig { heads: 3, ..Default::default() };
        assert!(matches!(DenoiserState::new(bad, DType::F64, &mut Rng::new(0)), Err(Error::Param(_))));
        let bad = DenoiserConfig { depth: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Param(_))));
    }

    #[test]
    fn capacity_and_width_errors() {
        let s = randomized(small_config(), 5);
        let v = Tensor::zeros(&[13, 8], DType::F64);
        assert!(matches!(s.denoise(&v, &cond(2, 4, 0), 1), Err(Error::Capacity(_))));
        let v = Tensor::zeros(&[12, 8], DType::F64);
        assert!(matches!(s.denoise(&v, &cond(11, 4, 0), 1), Err(Error::Capacity(_))));
        assert!(s.denoise(&v, &cond(10, 4, 0), 1).is_ok());
        assert!(matches!(s.denoise(&v, &cond(2, 5, 0), 1), Err(Error::Shape(_))));
        assert!(matches!(s.denoise(&Tensor::zeros(&[3, 7], DType::F64), &cond(2, 4, 0), 1), Err(Error::Shape(_))));
    }

    #[test]
    fn conditioning_rows_influence_output() {
        let s = randomized(small_config(), 6);
        let v = Tensor::randn(&[5, 8], 1.0, DType::F64, &mut Rng::new(7));
        let c = cond(4, 4, 8);
        let base = s.denoise(&v, &c, 10).unwrap();
        for row in 0..4 {
            let mut data = c.sequence.to_vec();
            data[row * 4] += 0.5;
            let moved = FusedConditioning { sequence: Tensor::new(data, &[4, 4], DType::F64).unwrap() };
            assert!(s.denoise(&v, &moved, 10).unwrap().max_abs_diff(&base) > 0.0, "row {row}");
        }
        assert!(s.denoise(&v, &c, 11).unwrap().max_abs_diff(&base) > 0.0);
    }

    #[test]
    fn denoise_parameters_pass_grad_check() {
        let cfg = small_config();
        let base = randomized(cfg, 9);
        let video = Tensor::randn(&[5, 8], 1.0, DType::F64, &mut Rng::new(10));
        let c = cond(3, 4, 11);
        let weights = Tensor::randn(&[5, 8], 1.0, DType::F64, &mut Rng::new(12));
        let objective = |s: &DenoiserState, v: &Tensor, c: &FusedConditioning| -> Result<Tensor> {
            Ok(s.denoise(v, c, 17)?.mul(&weights)?.mean())
        };
        for (name, x) in base.clone().named_params() {
            let f = |x: &Tensor| {
                let mut s = base.clone();
                s.visit_params(&mut |n, t| if n == name { *t = x.clone() });
                objective(&s, &video, &c)
            };
            let r = grad_check(f, &x.detach(), 1e-5).unwrap();
            assert!(r.max_relative_error < 1e-5, "{name}: {r:?}");
        }
        let r = grad_check(|x| objective(&base, x, &c), &video, 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-5, "video: {r:?}");
        let r = grad_check(|x| objective(&base, &video, &FusedConditioning { sequence: x.clone() }), &c.sequence, 1e-5)
            .unwrap();
        assert!(r.max_relative_error < 1e-5, "conditioning: {r:?}");
    }

    #[test]
    fn gradients_reach_fuser_parameters() {
        let cfg = small_config();
        let den = randomized(cfg, 13);
        let mut fuser = FuserState::new(4, &FuserConfig::default(), DType::F64);
        let mut rng = Rng::new(14);
        fuser.visit_params(&mut |_, t| *t = Tensor::randn(t.shape(), 0.5, DType::F64, &mut rng).requires_grad());
        let e_theta = Tensor::randn(&[3, 4], 1.0, DType::F64, &mut rng);
        let e_beta = Tensor::randn(&[5, 4], 1.0, DType::F64, &mut rng);
        let e_i = Tensor::randn(&[4, 4], 1.0, DType::F64, &mut rng);
        let video = Tensor::randn(&[4, 8], 1.0, DType::F64, &mut rng);
        let target = Tensor::randn(&[4, 8], 1.0, DType::F64, &mut rng);
        let run = |f: &FuserState| -> Result<Tensor> {
            let seq = crate::fuser::assemble(&f.fuse(&e_theta, &e_beta)?, &f.stabilize(&e_i)?)?;
            den.denoise(&video, &seq, 30)?.mse(&target)
        };
        for (name, x) in fuser.clone().named_params() {
            let f = |x: &Tensor| {
                let mut s = fuser.clone();
                s.visit_params(&mut |n, t| if n == name { *t = x.clone() });
                run(&s)
            };
            let r = grad_check(f, &x.detach(), 1e-5).unwrap();
            assert!(r.max_relative_error < 1e-5, "{name}: {r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_shape_follows_input(l in 1usize..12, m in 0usize..10, t in 1usize..=50, seed in 0u64..100) {
            let s = randomized(small_config(), seed);
            let v = Tensor::randn(&[l, 8], 1.0, DType::F64, &mut Rng::new(seed));
            let out = s.denoise(&v, &cond(m, 4, seed + 1), t).unwrap();
            prop_assert_eq!(out.shape(), &[l, 8]);
            prop_assert!(out.bit_eq(&s.denoise(&v, &cond(m, 4, seed + 1), t).unwrap()));
        }
    }
}
