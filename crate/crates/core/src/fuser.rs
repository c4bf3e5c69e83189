//! The token fuser.
//!
//! Encoder tokens pass through a residual zero-initialized affine map;
//! decoder-only tokens are layer-normalized, rescaled by a small learnable
//! gain, sent through their own zero-initialized map, mean-pooled over the
//! sequence and added to every encoder position with weight `alpha`. Four
//! learnable tokens are added to the instruction tokens and the result is
//! appended to the sequence.
//!
//! Because both maps and the learnable tokens start at zero, a fresh fuser
//! returns `concat(e_theta, e_i)` unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{visit_child, Parameterized};
use crate::tensor::{DType, Tensor};
use crate::textcond::{TokenBundle, INSTRUCTION_COUNT};

pub const NORM_EPS: f64 = 1e-5;

/// Per-token affine map `x·Wᵀ + b`, shared across positions, zero at init.
#[derive(Debug, Clone)]
pub struct ZeroConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ZeroConvLayer {
    pub fn new(d: usize, dtype: DType) -> Self {
        Self { weight: Tensor::zeros(&[d, d], dtype).requires_grad(), bias: Tensor::zeros(&[d], dtype).requires_grad() }
    }

    pub fn width(&self) -> usize {
        self.bias.numel()
    }

    pub fn apply(&self, tokens: &Tensor) -> Result<Tensor> {
        let (_, d) = tokens.dims2()?;
        if d != self.width() {
            return Err(Error::Shape(format!("zero-conv expects width {}, got {d}", self.width())));
        }
        tokens.matmul(&self.weight.transpose()?)?.add_row(&self.bias)
    }
}

impl Parameterized for ZeroConvLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

/// Layer normalization followed by a learnable per-feature gain and bias.
#[derive(Debug, Clone)]
pub struct NormScale {
    pub gamma: Tensor,
    pub beta_bias: Tensor,
    pub eps: f64,
}

impl NormScale {
    pub fn new(d: usize, gamma_init: f64, dtype: DType) -> Self {
        Self {
            gamma: Tensor::full(&[d], gamma_init, dtype).requires_grad(),
            beta_bias: Tensor::zeros(&[d], dtype).requires_grad(),
            eps: NORM_EPS,
        }
    }

    pub fn apply(&self, e_beta: &Tensor) -> Result<Tensor> {
        let (k, d) = e_beta.dims2()?;
        if k == 0 {
            return Err(Error::Shape("norm_scale needs at least one token".into()));
        }
        if d != self.gamma.numel() {
            return Err(Error::Shape(format!("norm_scale expects width {}, got {d}", self.gamma.numel())));
        }
        e_beta.layer_norm(self.eps)?.mul_row(&self.gamma)?.add_row(&self.beta_bias)
    }
}

impl Parameterized for NormScale {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("gamma", &mut self.gamma);
        f("beta_bias", &mut self.beta_bias);
    }
}

/// Which fuser components are active. `use_decoder = false` drops every
/// language-model-derived input, leaving the raw encoder tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuserFlags {
    pub use_decoder: bool,
    pub use_norm: bool,
    pub use_zero_conv: bool,
    pub use_ss: bool,
}

impl Default for FuserFlags {
    fn default() -> Self {
        Self { use_decoder: true, use_norm: true, use_zero_conv: true, use_ss: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuserConfig {
    pub alpha: f64,
    pub gamma_init: f64,
    pub flags: FuserFlags,
}

impl Default for FuserConfig {
    fn default() -> Self {
        Self { alpha: 1.0, gamma_init: 0.01, flags: FuserFlags::default() }
    }
}

#[derive(Debug, Clone)]
pub struct FusedConditioning {
    pub sequence: Tensor,
}

impl FusedConditioning {
    pub fn len(&self) -> usize {
        self.sequence.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct FuserState {
    pub z_theta: ZeroConvLayer,
    pub z_beta: ZeroConvLayer,
    pub norm: NormScale,
    /// The four learnable stabilizer tokens.
    pub e_l: Tensor,
    pub alpha: f64,
    pub flags: FuserFlags,
}

impl FuserState {
    pub fn new(d: usize, config: &FuserConfig, dtype: DType) -> Self {
        Self {
            z_theta: ZeroConvLayer::new(d, dtype),
            z_beta: ZeroConvLayer::new(d, dtype),
            norm: NormScale::new(d, config.gamma_init, dtype),
            e_l: Tensor::zeros(&[INSTRUCTION_COUNT, d], dtype).requires_grad(),
            alpha: config.alpha,
            flags: config.flags,
        }
    }

    pub fn width(&self) -> usize {
        self.z_theta.width()
    }

    /// Ablation arms without normalization pass e_β through unchanged.
    pub fn norm_scale(&self, e_beta: &Tensor) -> Result<Tensor> {
        if self.flags.use_norm {
            self.norm.apply(e_beta)
        } else {
            Ok(e_beta.clone())
        }
    }

    /// e = (e_θ + Z_θ(e_θ)) + α · pool(Z_β(norm_scale(e_β))), with the pooled
    /// decoder vector added to every encoder position.
    pub fn fuse(&self, e_theta_raw: &Tensor, e_beta_raw: &Tensor) -> Result<Tensor> {
        let (_, d) = e_theta_raw.dims2()?;
        let (k, db) = e_beta_raw.dims2()?;
        if d != self.width() || db != self.width() {
            return Err(Error::Shape(format!(
                "fuser width {} vs e_theta width {d} and e_beta width {db}",
                self.width()
            )));
        }
        if k == 0 {
            return Err(Error::Shape("e_beta has no tokens".into()));
        }
        let (e_theta, e_beta) = if self.flags.use_zero_conv {
            let theta = e_theta_raw.add(&self.z_theta.apply(e_theta_raw)?)?;
            (theta, self.z_beta.apply(&self.norm_scale(e_beta_raw)?)?)
        } else {
            (e_theta_raw.clone(), self.norm_scale(e_beta_raw)?)
        };
        let pooled = e_beta.mean_axis(0)?.scale(self.alpha);
        e_theta.add_row(&pooled)
    }

    /// e_s = e_i + e_l
    pub fn stabilize(&self, e_i: &Tensor) -> Result<Tensor> {
        if e_i.shape() != self.e_l.shape() {
            return Err(Error::Shape(format!("instruction tokens {:?}, expected {:?}", e_i.shape(), self.e_l.shape())));
        }
        e_i.add(&self.e_l)
    }

    /// The conditioning sequence for one prompt under the active flags.
    pub fn condition(&self, bundle: &TokenBundle) -> Result<FusedConditioning> {
        if !self.flags.use_decoder {
            return Ok(FusedConditioning { sequence: bundle.encoder.clone() });
        }
        let e = self.fuse(&bundle.encoder, &bundle.decoder_tokens()?)?;
        if self.flags.use_ss {
            assemble(&e, &self.stabilize(&bundle.instruction)?)
        } else {
            Ok(FusedConditioning { sequence: e })
        }
    }
}

impl Parameterized for FuserState {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child("z_theta", &mut self.z_theta, f);
        visit_child("z_beta", &mut self.z_beta, f);
        visit_child("norm", &mut self.norm, f);
        f("e_l", &mut self.e_l);
    }
}

/// e ⊕ e_s along the sequence axis.
pub fn assemble(e: &Tensor, e_s: &Tensor) -> Result<FusedConditioning> {
    let (_, d) = e.dims2()?;
    let (_, ds) = e_s.dims2()?;
    if d != ds {
        return Err(Error::Shape(format!("cannot concatenate widths {d} and {ds}")));
    }
    Ok(FusedConditioning { sequence: Tensor::concat(&[e.clone(), e_s.clone()], 0)? })
}
