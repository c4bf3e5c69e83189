//! Finite-difference checks of every trainable path: each parameter of the
//! fuser pieces and of a small two-block denoiser, plus their inputs.

use serde::Serialize;

use crate::denoiser::{DenoiserConfig, DenoiserState};
use crate::error::Result;
use crate::fuser::{assemble, FusedConditioning, FuserConfig, FuserState, NormScale, ZeroConvLayer};
use crate::params::Parameterized;
use crate::tensor::{grad_check, DType, GradReport, Tensor};
use crate::Rng;

/// Default probe step for the finite differences.
pub const SUITE_EPS: f64 = 3e-5;
pub const SUITE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    /// The operation under test, e.g. `fuse`.
    pub target: String,
    /// A parameter name or `input:<name>`.
    pub wrt: String,
    pub max_relative_error: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_relative_error < SUITE_TOLERANCE
    }
}

/// Replaces every parameter with noise so no path is trivially zero.
fn randomize(model: &mut dyn Parameterized, std: f64, rng: &mut Rng) {
    model.visit_params(&mut |_, t| *t = Tensor::randn(t.shape(), std, DType::F64, rng).requires_grad());
}

fn check_params<M, F>(target: &str, base: &M, objective: F, eps: f64, out: &mut Vec<SuiteEntry>) -> Result<()>
where
    M: Parameterized + Clone,
    F: Fn(&M) -> Result<Tensor>,
{
    for (name, x) in base.clone().named_params() {
        let f = |x: &Tensor| {
            let mut m = base.clone();
            m.visit_params(&mut |n, t| {
                if n == name {
                    *t = x.clone();
                }
            });
            objective(&m)
        };
        let r = grad_check(f, &x.detach(), eps)?;
        out.push(entry(target, &name, r));
    }
    Ok(())
}

fn entry(target: &str, wrt: &str, r: GradReport) -> SuiteEntry {
    SuiteEntry { target: target.into(), wrt: wrt.into(), max_relative_error: r.max_relative_error }
}

/// Runs the full suite in f64. Every entry should come in under
/// [`SUITE_TOLERANCE`].
pub fn gradient_suite(seed: u64, eps: f64) -> Result<Vec<SuiteEntry>> {
    let mut rng = Rng::stream(seed, "gradsuite");
    let d = 6;
    let mut out = Vec::new();
    let e_theta = Tensor::randn(&[3, d], 1.0, DType::F64, &mut rng);
    let e_beta = Tensor::randn(&[5, d], 1.5, DType::F64, &mut rng);
    let e_i = Tensor::randn(&[4, d], 1.0, DType::F64, &mut rng);

    let mut norm = NormScale::new(d, 1.0, DType::F64);
    randomize(&mut norm, 0.5, &mut rng);
    let w = Tensor::randn(&[5, d], 1.0, DType::F64, &mut rng);
    check_params("norm_scale", &norm, |n| Ok(n.apply(&e_beta)?.mul(&w)?.sum()), eps, &mut out)?;
    let r = grad_check(|x| Ok(norm.apply(x)?.mul(&w)?.sum()), &e_beta, eps)?;
    out.push(entry("norm_scale", "input:e_beta", r));

    let mut zc = ZeroConvLayer::new(d, DType::F64);
    randomize(&mut zc, 0.5, &mut rng);
    let w = Tensor::randn(&[3, d], 1.0, DType::F64, &mut rng);
    check_params("zero_conv", &zc, |z| Ok(z.apply(&e_theta)?.mul(&w)?.sum()), eps, &mut out)?;
    let r = grad_check(|x| Ok(zc.apply(x)?.mul(&w)?.sum()), &e_theta, eps)?;
    out.push(entry("zero_conv", "input:e_theta", r));

    let mut fuser = FuserState::new(d, &FuserConfig { alpha: 0.7, ..Default::default() }, DType::F64);
    randomize(&mut fuser, 0.5, &mut rng);
    let w = Tensor::randn(&[3, d], 1.0, DType::F64, &mut rng);
    let fuse_params = |s: &FuserState| Ok(s.fuse(&e_theta, &e_beta)?.mul(&w)?.sum());
    check_params("fuse", &fuser, fuse_params, eps, &mut out)?;
    let r = grad_check(|x| Ok(fuser.fuse(x, &e_beta)?.mul(&w)?.sum()), &e_theta, eps)?;
    out.push(entry("fuse", "input:e_theta", r));
    let r = grad_check(|x| Ok(fuser.fuse(&e_theta, x)?.mul(&w)?.sum()), &e_beta, eps)?;
    out.push(entry("fuse", "input:e_beta", r));

    let w = Tensor::randn(&[4, d], 1.0, DType::F64, &mut rng);
    let r = grad_check(|x| Ok(fuser.stabilize(x)?.mul(&w)?.sum()), &e_i, eps)?;
    out.push(entry("stabilize", "input:e_i", r));
    let r = grad_check(
        |x| {
            let mut s = fuser.clone();
            s.e_l = x.clone();
            Ok(s.stabilize(&e_i)?.mul(&w)?.sum())
        },
        &fuser.e_l.detach(),
        eps,
    )?;
    out.push(entry("stabilize", "e_l", r));

    let config = DenoiserConfig {
        d_model: 16,
        depth: 2,
        heads: 2,
        max_video_tokens: 12,
        max_text_tokens: 8,
        text_width: d,
        video_width: 8,
        timesteps: 50,
    };
    let mut denoiser = DenoiserState::new(config, DType::F64, &mut rng)?;
    randomize(&mut denoiser, 0.3, &mut rng);
    let video = Tensor::randn(&[5, 8], 1.0, DType::F64, &mut rng);
    let cond = assemble(&fuser.fuse(&e_theta, &e_beta)?.detach(), &fuser.stabilize(&e_i)?.detach())?;
    let w = Tensor::randn(&[5, 8], 1.0, DType::F64, &mut rng);
    let t = 17;
    check_params("denoise", &denoiser, |s| Ok(s.denoise(&video, &cond, t)?.mul(&w)?.mean()), eps, &mut out)?;
    let r = grad_check(|x| Ok(denoiser.denoise(x, &cond, t)?.mul(&w)?.mean()), &video, eps)?;
    out.push(entry("denoise", "input:video", r));
    let r = grad_check(
        |x| Ok(denoiser.denoise(&video, &FusedConditioning { sequence: x.clone() }, t)?.mul(&w)?.mean()),
        &cond.sequence,
        eps,
    )?;
    out.push(entry("denoise", "input:conditioning", r));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_target_and_passes() {
        for seed in 0..4 {
        let entries = gradient_suite(seed, SUITE_EPS).unwrap();
        for target in ["norm_scale", "zero_conv", "fuse", "stabilize", "denoise"] {
            assert!(entries.iter().any(|e| e.target == target), "{target}");
        }
        assert!(entries.iter().any(|e| e.target == "denoise" && e.wrt.starts_with("blocks.1.")));
        for e in &entries {
            assert!(e.passed(), "seed {seed}: {e:?}");
        }
        }
    }
}
