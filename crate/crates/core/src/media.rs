//! Pixel video ↔ latent compression and latent ↔ token patchification.
//!
//! The codec is a fixed-rate stand-in for a causal video autoencoder: the
//! first frame is pooled on its own, every later group of four frames is
//! averaged together, and all frames are 8×8 average pooled. A per-channel
//! affine lift maps the 3 pooled colors onto `C` latent channels.

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const TEMPORAL_RATE: usize = 4;
pub const SPATIAL_RATE: usize = 8;

#[derive(Debug, Clone)]
pub struct VideoClip {
    frames: Tensor,
}

impl VideoClip {
    /// Wraps a (N+1, H, W, 3) tensor with values in [0, 1].
    pub fn new(frames: Tensor) -> Result<Self> {
        let shape = frames.shape();
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::Shape(format!("video must be (N+1, H, W, 3), got {shape:?}")));
        }
        let (f, h, w) = (shape[0], shape[1], shape[2]);
        if f == 0 || (f - 1) % TEMPORAL_RATE != 0 {
            return Err(Error::Shape(format!("frame count {f} is not 4k + 1")));
        }
        if h % SPATIAL_RATE != 0 || w % SPATIAL_RATE != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("frame size {h}x{w} is not a positive multiple of 8")));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    /// (frames, height, width)
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2])
    }

    pub fn pixel(&self, f: usize, y: usize, x: usize) -> [f64; 3] {
        let (_, h, w) = self.dims();
        let i = ((f * h + y) * w + x) * 3;
        let d = self.frames.data();
        [d[i], d[i + 1], d[i + 2]]
    }
}

#[derive(Debug, Clone)]
pub struct VideoLatent {
    z: Tensor,
}

impl VideoLatent {
    pub fn new(z: Tensor) -> Result<Self> {
        if z.rank() != 4 || z.shape().contains(&0) {
            return Err(Error::Shape(format!("latent must be (n+1, h, w, C), got {:?}", z.shape())));
        }
        Ok(Self { z })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.z
    }

    pub fn into_tensor(self) -> Tensor {
        self.z
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.z.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub q: usize,
    pub p: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { q: 1, p: 2 }
    }
}

impl PatchSpec {
    pub fn token_width(&self, channels: usize) -> usize {
        self.q * self.p * self.p * channels
    }

    /// Number of tokens for a latent of `shape`, or a shape error.
    pub fn token_count(&self, shape: [usize; 4]) -> Result<usize> {
        let [t, h, w, _] = shape;
        if self.q == 0 || self.p == 0 {
            return Err(Error::Shape("patch sizes must be positive".into()));
        }
        if t % self.q != 0 {
            return Err(Error::Shape(format!("latent frames {t} not divisible by q = {}", self.q)));
        }
        if h % self.p != 0 || w % self.p != 0 {
            return Err(Error::Shape(format!("latent size {h}x{w} not divisible by p = {}", self.p)));
        }
        Ok((t / self.q) * (h / self.p) * (w / self.p))
    }
}

/// Latent shape produced from a (frames, height, width) clip.
pub fn latent_shape(frames: usize, height: usize, width: usize, channels: usize) -> Result<[usize; 4]> {
    if frames == 0 || (frames - 1) % TEMPORAL_RATE != 0 || height % SPATIAL_RATE != 0 || width % SPATIAL_RATE != 0 {
        return Err(Error::Shape(format!("clip dims ({frames}, {height}, {width}) violate the 4/8 rate law")));
    }
    Ok([(frames - 1) / TEMPORAL_RATE + 1, height / SPATIAL_RATE, width / SPATIAL_RATE, channels])
}

/// Pairwise summation; exact for 2^k copies of one value.
fn tree_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => tree_sum(&values[..n / 2]) + tree_sum(&values[n / 2..]),
    }
}

#[derive(Debug, Clone)]
pub struct Codec {
    /// Per-channel gain of the lift; channel c reads pooled color c mod 3.
    pub lift_weight: Tensor,
    pub lift_bias: Tensor,
    /// (3, C) projection from latent channels back to colors.
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    channels: usize,
}

impl Codec {
    /// Unit gains and a projection that reads the first three channels, so a
    /// constant clip survives compress → decompress exactly.
    pub fn new(channels: usize, dtype: DType) -> Result<Self> {
        if channels < 3 {
            return Err(Error::Param(format!("need at least 3 latent channels, got {channels}")));
        }
        let mut proj = vec![0.0; 3 * channels];
        for k in 0..3 {
            proj[k * channels + k] = 1.0;
        }
        Ok(Self {
            lift_weight: Tensor::full(&[channels], 1.0, dtype),
            lift_bias: Tensor::zeros(&[channels], dtype),
            proj_weight: Tensor::new(proj, &[3, channels], dtype)?,
            proj_bias: Tensor::zeros(&[3], dtype),
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn selection(&self, dtype: DType) -> Tensor {
        let c = self.channels;
        let mut sel = vec![0.0; 3 * c];
        for ch in 0..c {
            sel[(ch % 3) * c + ch] = 1.0;
        }
        Tensor::new(sel, &[3, c], dtype).expect("selection shape")
    }

    pub fn compress(&self, clip: &VideoClip) -> Result<VideoLatent> {
        let (frames, height, width) = clip.dims();
        let [lt, lh, lw, _] = latent_shape(frames, height, width, self.channels)?;
        let px = clip.frames().data();
        let spatial_mean = |f: usize, cy: usize, cx: usize, k: usize| -> f64 {
            let mut window = [0.0; SPATIAL_RATE * SPATIAL_RATE];
            for dy in 0..SPATIAL_RATE {
                for dx in 0..SPATIAL_RATE {
                    let (y, x) = (cy * SPATIAL_RATE + dy, cx * SPATIAL_RATE + dx);
                    window[dy * SPATIAL_RATE + dx] = px[((f * height + y) * width + x) * 3 + k];
                }
            }
            tree_sum(&window) / (SPATIAL_RATE * SPATIAL_RATE) as f64
        };
        let mut pooled = Vec::with_capacity(lt * lh * lw * 3);
        for g in 0..lt {
            for cy in 0..lh {
                for cx in 0..lw {
                    for k in 0..3 {
                        let v = if g == 0 {
                            spatial_mean(0, cy, cx, k)
                        } else {
                            let first = (g - 1) * TEMPORAL_RATE + 1;
                            let means: Vec<f64> =
                                (first..first + TEMPORAL_RATE).map(|f| spatial_mean(f, cy, cx, k)).collect();
                            tree_sum(&means) / TEMPORAL_RATE as f64
                        };
                        pooled.push(v);
                    }
                }
            }
        }
        let dtype = clip.frames().dtype();
        let pooled = Tensor::new(pooled, &[lt * lh * lw, 3], dtype)?;
        let lift = self.selection(dtype).mul_row(&self.lift_weight)?;
        let z = pooled.matmul(&lift)?.add_row(&self.lift_bias)?;
        VideoLatent::new(z.reshape(&[lt, lh, lw, self.channels])?)
    }

    /// Projects back to colors and replicates each latent cell over its 8×8
    /// block and its frame group. Output is clamped to [0, 1].
    pub fn decompress(&self, latent: &VideoLatent) -> Result<VideoClip> {
        let [lt, lh, lw, c] = latent.shape();
        if c != self.channels {
            return Err(Error::Shape(format!("latent has {c} channels, codec expects {}", self.channels)));
        }
        let flat = latent.tensor().reshape(&[lt * lh * lw, c])?;
        let colors = flat.matmul(&self.proj_weight.transpose()?)?.add_row(&self.proj_bias)?;
        let colors = colors.data();
        let (frames, height, width) = ((lt - 1) * TEMPORAL_RATE + 1, lh * SPATIAL_RATE, lw * SPATIAL_RATE);
        let mut out = vec![0.0; frames * height * width * 3];
        for f in 0..frames {
            let g = if f == 0 { 0 } else { (f - 1) / TEMPORAL_RATE + 1 };
            for y in 0..height {
                for x in 0..width {
                    let cell = (g * lh + y / SPATIAL_RATE) * lw + x / SPATIAL_RATE;
                    let dst = ((f * height + y) * width + x) * 3;
                    for k in 0..3 {
                        out[dst + k] = colors[cell * 3 + k].clamp(0.0, 1.0);
                    }
                }
            }
        }
        VideoClip::new(Tensor::new(out, &[frames, height, width, 3], latent.tensor().dtype())?)
    }
}

/// Rearranges a latent into (L, q·p·p·C) tokens, temporal-major, then row,
/// then column. Each token flattens one (q, p, p, C) block.
pub fn patchify(latent: &VideoLatent, spec: PatchSpec) -> Result<Tensor> {
    let shape @ [_, h, w, c] = latent.shape();
    let count = spec.token_count(shape)?;
    let (gh, gw) = (h / spec.p, w / spec.p);
    let width = spec.token_width(c);
    let z = latent.tensor().data();
    let mut out = Vec::with_capacity(count * width);
    for token in 0..count {
        let (bt, rest) = (token / (gh * gw), token % (gh * gw));
        let (by, bx) = (rest / gw, rest % gw);
        for dt in 0..spec.q {
            for dy in 0..spec.p {
                let (t, y) = (bt * spec.q + dt, by * spec.p + dy);
                let start = ((t * h + y) * w + bx * spec.p) * c;
                out.extend_from_slice(&z[start..start + spec.p * c]);
            }
        }
    }
    Tensor::new(out, &[count, width], latent.tensor().dtype())
}

/// Exact inverse of [`patchify`] for a latent of shape `dims`.
pub fn unpatchify(tokens: &Tensor, dims: [usize; 4], spec: PatchSpec) -> Result<VideoLatent> {
    let [t_len, h, w, c] = dims;
    let count = spec.token_count(dims)?;
    let width = spec.token_width(c);
    if tokens.shape() != [count, width] {
        return Err(Error::Shape(format!(
            "expected tokens of shape [{count}, {width}] for latent {dims:?}, got {:?}",
            tokens.shape()
        )));
    }
    let (gh, gw) = (h / spec.p, w / spec.p);
    let src = tokens.data();
    let mut z = vec![0.0; t_len * h * w * c];
    let mut cursor = 0;
    for token in 0..count {
        let (bt, rest) = (token / (gh * gw), token % (gh * gw));
        let (by, bx) = (rest / gw, rest % gw);
        for dt in 0..spec.q {
            for dy in 0..spec.p {
                let (t, y) = (bt * spec.q + dt, by * spec.p + dy);
                let start = ((t * h + y) * w + bx * spec.p) * c;
                z[start..start + spec.p * c].copy_from_slice(&src[cursor..cursor + spec.p * c]);
                cursor += spec.p * c;
            }
        }
    }
    VideoLatent::new(Tensor::new(z, &dims, tokens.dtype())?)
}
