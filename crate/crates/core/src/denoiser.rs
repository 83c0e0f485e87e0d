//! Denoiser contract and the deterministic toy denoiser.
//!
//! One layered step runs, in order: background conditioning, the spatial
//! transformer (guided cross-attention), attention-sharing (oriented inside
//! the box), attention isolation, and the sampler update. Every sub-block is a
//! residual around its attention kernel; the network output is squashed with
//! `tanh` before the sampler so latents stay bounded over long runs.

use std::fmt;

use ndarray::{s, Array1, Array2, Array4, Array5, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, attention_sharing, cross_attention, guided_cross_attention, isolated_temporal_attention,
    masked_cross_attention, oriented_attention_sharing, temporal_self_attention, AttentionPlanes,
    BoxRegion, GuidanceConfig, Projections, PromptEmbedding,
};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;
use crate::scene::{scale_to_latent_grid, BBoxTrack};
use crate::video::RgbVideo;

/// Dual-plane latents `[f, 2, h, w, ch]`; plane 0 is foreground, plane 1 background.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVolume<T> {
    pub data: Array5<T>,
}

impl<T: Real> LatentVolume<T> {
    pub const FG: usize = 0;
    pub const BG: usize = 1;

    pub fn new(data: Array5<T>) -> Result<Self> {
        if data.shape()[1] != 2 {
            return Err(Error::Shape(format!(
                "latent volume needs 2 planes, got {:?}",
                data.shape()
            )));
        }
        Ok(LatentVolume {
            data: data.as_standard_layout().into_owned(),
        })
    }

    /// Standard-normal latents from a seeded stream.
    pub fn noise(seed: u64, stream: u64, frames: usize, h: usize, w: usize, ch: usize) -> Self {
        let mut r = rng::stream(seed, stream);
        LatentVolume {
            data: rng::normal(&mut r, (frames, 2, h, w, ch), 1.0),
        }
    }

    pub fn plane(&self, p: usize) -> Array4<T> {
        self.data.index_axis(Axis(1), p).to_owned()
    }

    pub fn planes(&self) -> AttentionPlanes<T> {
        AttentionPlanes {
            fg: self.plane(Self::FG),
            bg: self.plane(Self::BG),
        }
    }

    pub fn from_planes(planes: &AttentionPlanes<T>) -> Result<Self> {
        let data = ndarray::stack(Axis(1), &[planes.fg.view(), planes.bg.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Noise levels `σ_t = t / T` for `t = 0..=T`, visited from `t = T` down to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSchedule<T> {
    pub total_steps: usize,
    pub sigmas: Vec<T>,
}

impl<T: Real> SamplerSchedule<T> {
    pub fn new(total_steps: usize) -> Result<Self> {
        if total_steps < 1 {
            return Err(Error::Range("steps: must be >= 1".into()));
        }
        let n = T::lit(total_steps as f64);
        let sigmas = (0..=total_steps).map(|t| T::lit(t as f64) / n).collect();
        Ok(SamplerSchedule {
            total_steps,
            sigmas,
        })
    }

    /// Timesteps in execution order.
    pub fn timesteps(&self) -> impl Iterator<Item = usize> {
        (1..=self.total_steps).rev()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.total_steps {
            return Err(Error::Range(format!(
                "timestep {t} outside [1, {}]",
                self.total_steps
            )));
        }
        Ok(())
    }

    /// `x_{t-1} = x_t + (σ_{t-1} − σ_t)·ε`
    pub fn update(&self, x: &Array4<T>, eps: &Array4<T>, t: usize) -> Array4<T> {
        let ds = self.sigmas[t - 1] - self.sigmas[t];
        x + &(eps * ds)
    }
}

/// Convolution whose kernel size equals its stride (non-overlapping patches).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchConv<T> {
    /// `[out, in, k, k]`
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

impl<T: Real> PatchConv<T> {
    pub fn stride(&self) -> usize {
        self.weight.shape()[2]
    }

    /// `[H, W, in]` → `[H/k, W/k, out]`.
    pub fn apply(&self, input: ndarray::ArrayView3<T>) -> Array4<T> {
        let (h, w, _) = input.dim();
        let k = self.stride();
        let (oh, ow, oc) = (h / k, w / k, self.weight.shape()[0]);
        let mut out = Array4::zeros((1, oh, ow, oc));
        for y in 0..oh {
            for x in 0..ow {
                let patch = input.slice(s![y * k..(y + 1) * k, x * k..(x + 1) * k, ..]);
                for o in 0..oc {
                    let kernel = self.weight.index_axis(Axis(0), o);
                    let mut acc = self.bias[o];
                    for ((dy, dx, i), &v) in patch.indexed_iter() {
                        acc += kernel[[i, dy, dx]] * v;
                    }
                    out[[0, y, x, o]] = acc;
                }
            }
        }
        out
    }
}

/// Control convolutions embedding an RGB video into latent-shaped features:
/// two strided patch convolutions with a `tanh` between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlEncoder<T> {
    pub first: PatchConv<T>,
    pub second: PatchConv<T>,
}

/// Splits a downsampling factor into the two conv strides.
pub fn control_strides(factor: usize) -> (usize, usize) {
    if factor > 1 && factor.is_multiple_of(2) {
        (factor / 2, 2)
    } else {
        (factor, 1)
    }
}

impl<T: Real> ControlEncoder<T> {
    pub fn seeded(r: &mut rand_chacha::ChaCha8Rng, factor: usize, hidden: usize, ch: usize) -> Self {
        let (s1, s2) = control_strides(factor);
        let first = PatchConv {
            weight: rng::normal(r, (hidden, 3, s1, s1), 1.0 / ((3 * s1 * s1) as f64).sqrt()),
            bias: rng::vector(r, hidden, 0.1),
        };
        let second = PatchConv {
            weight: rng::normal(r, (ch, hidden, s2, s2), 1.0 / ((hidden * s2 * s2) as f64).sqrt()),
            bias: rng::vector(r, ch, 0.1),
        };
        ControlEncoder { first, second }
    }

    pub fn factor(&self) -> usize {
        self.first.stride() * self.second.stride()
    }

    pub fn zeroed(mut self) -> Self {
        self.first.weight.fill(T::zero());
        self.first.bias.fill(T::zero());
        self.second.weight.fill(T::zero());
        self.second.bias.fill(T::zero());
        self
    }

    /// `[f, H, W, 3]` → `[f, H/k, W/k, ch]`.
    pub fn encode(&self, video: &RgbVideo<T>) -> Array4<T> {
        let frames: Vec<Array4<T>> = (0..video.frames())
            .into_par_iter()
            .map(|i| {
                let hidden = self.first.apply(video.frame(i)).mapv(|v| v.tanh());
                self.second.apply(hidden.index_axis(Axis(0), 0))
            })
            .collect();
        let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("frames share shape")
    }
}

/// Sub-blocks of a denoising step, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubBlock {
    #[serde(rename = "condition_bg")]
    ConditionBg,
    #[serde(rename = "ST")]
    Spatial,
    #[serde(rename = "TT_AS")]
    Sharing,
    #[serde(rename = "TT_AI")]
    Isolation,
    /// Plain temporal attention of the single-plane background run.
    #[serde(rename = "TT")]
    Temporal,
    #[serde(rename = "sampler_update")]
    SamplerUpdate,
}

impl fmt::Display for SubBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SubBlock::ConditionBg => "condition_bg",
            SubBlock::Spatial => "ST",
            SubBlock::Sharing => "TT_AS",
            SubBlock::Isolation => "TT_AI",
            SubBlock::Temporal => "TT",
            SubBlock::SamplerUpdate => "sampler_update",
        };
        f.write_str(s)
    }
}

/// Which video fed the control convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    Background,
    Blend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub sub_block: SubBlock,
    pub guidance_active: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<ConditionSource>,
}

impl TraceRecord {
    fn new(step: usize, sub_block: SubBlock, guidance_active: bool) -> Self {
        TraceRecord {
            step,
            sub_block,
            guidance_active,
            condition: None,
        }
    }
}

/// Encoded condition video, ready to add to the background plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition<T> {
    pub source: ConditionSource,
    /// `[f, h, w, ch]`
    pub features: Array4<T>,
}

/// Whether the layer-customized guidance terms are applied.
///
/// `Reference` keeps the mismatched-pair region mask during the cross-attention
/// window but drops the additive mask, key-frame amplification and oriented
/// weights; it is the unguided baseline the guided step must reduce to when all
/// guidance coefficients are neutral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GuidanceMode {
    #[default]
    Guided,
    Reference,
}

pub struct StepContext<'a, T> {
    pub prompt: &'a PromptEmbedding<T>,
    pub condition: &'a Condition<T>,
    pub track: &'a BBoxTrack<T>,
    pub t: usize,
    pub schedule: &'a SamplerSchedule<T>,
    pub guidance: &'a GuidanceConfig<T>,
    pub mode: GuidanceMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserDims {
    /// Latent grid.
    pub h: usize,
    pub w: usize,
    pub ch: usize,
    /// Image pixels per latent cell.
    pub factor: usize,
    pub text_dim: usize,
    pub head_dim: usize,
    /// Width of the control encoder's intermediate features.
    pub hidden: usize,
}

impl DenoiserDims {
    pub fn for_latent(h: usize, w: usize, ch: usize, factor: usize) -> Self {
        DenoiserDims {
            h,
            w,
            ch,
            factor,
            text_dim: 16,
            head_dim: 8,
            hidden: 8,
        }
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.h * self.factor, self.w * self.factor)
    }
}

/// A layer denoiser as seen by the pipeline.
pub trait Denoiser<T: Real>: Send + Sync {
    fn dims(&self) -> DenoiserDims;

    /// `Conv(b)`: embeds a condition video into background-plane features.
    fn encode_condition(&self, video: &RgbVideo<T>, source: ConditionSource) -> Result<Condition<T>>;

    /// One layered denoising step `x_t → x_{t-1}` with its sub-block trace.
    fn step(&self, x: &LatentVolume<T>, ctx: &StepContext<'_, T>) -> Result<(LatentVolume<T>, Vec<TraceRecord>)>;

    /// One step of the base model on single-plane latents `[f, h, w, ch]`.
    fn step_base(
        &self,
        x: &Array4<T>,
        prompt: &PromptEmbedding<T>,
        t: usize,
        schedule: &SamplerSchedule<T>,
    ) -> Result<(Array4<T>, Vec<TraceRecord>)>;
}

/// Seeded toy denoiser exercising every attention kernel with non-identity projections.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser<T> {
    pub dims: DenoiserDims,
    pub cross: Projections<T>,
    /// Pointwise mixing applied after cross-attention, `[ch, ch]`.
    pub feed_forward: Array2<T>,
    pub sharing: Projections<T>,
    pub temporal: Projections<T>,
    /// Network head producing the sampler's residual, `[ch, ch]`.
    pub head: Array2<T>,
    pub control: ControlEncoder<T>,
}

pub fn build_toy_denoiser<T: Real>(seed: u64, dims: DenoiserDims) -> Result<ToyDenoiser<T>> {
    let d = dims;
    if [d.h, d.w, d.ch, d.factor, d.text_dim, d.head_dim, d.hidden].contains(&0) {
        return Err(Error::Invalid(format!("denoiser dims must be positive: {d:?}")));
    }
    let mut r = rng::stream(seed, rng::streams::DENOISER_WEIGHTS);
    let cross = Projections {
        query: rng::projection(&mut r, d.ch, d.head_dim),
        key: rng::projection(&mut r, d.text_dim, d.head_dim),
        value: rng::projection(&mut r, d.text_dim, d.ch),
    };
    let feed_forward = rng::projection(&mut r, d.ch, d.ch);
    let sharing = Projections {
        query: rng::projection(&mut r, d.ch, d.head_dim),
        key: rng::projection(&mut r, d.ch, d.head_dim),
        value: rng::projection(&mut r, d.ch, d.ch),
    };
    let temporal = Projections {
        query: rng::projection(&mut r, d.ch, d.head_dim),
        key: rng::projection(&mut r, d.ch, d.head_dim),
        value: rng::projection(&mut r, d.ch, d.ch),
    };
    let head = rng::projection(&mut r, d.ch, d.ch);
    let control = ControlEncoder::seeded(&mut r, d.factor, d.hidden, d.ch);
    Ok(ToyDenoiser {
        dims,
        cross,
        feed_forward,
        sharing,
        temporal,
        head,
        control,
    })
}

/// `x_bg ⊕ Conv(b)`: adds the encoded condition to the background plane.
pub fn condition_background<T: Real>(
    x_bg: &Array4<T>,
    b: &RgbVideo<T>,
    encoder: &ControlEncoder<T>,
) -> Result<Array4<T>> {
    let (f, h, w, _) = x_bg.dim();
    let k = encoder.factor();
    if b.dims() != (f, h * k, w * k) {
        return Err(Error::Shape(format!(
            "condition video {:?} does not match latents {:?} at {k}x",
            b.dims(),
            (f, h, w)
        )));
    }
    let features = encoder.encode(b);
    if features.dim() != x_bg.dim() {
        return Err(Error::Shape(format!(
            "encoder produced {:?} for latents {:?}",
            features.shape(),
            x_bg.shape()
        )));
    }
    Ok(x_bg + &features)
}

impl<T: Real> ToyDenoiser<T> {
    fn check_latents(&self, shape: &[usize]) -> Result<()> {
        let d = &self.dims;
        let n = shape.len();
        if shape[n - 3..] != [d.h, d.w, d.ch] {
            return Err(Error::Shape(format!(
                "latents {shape:?} do not match denoiser grid {}x{}x{}",
                d.h, d.w, d.ch
            )));
        }
        Ok(())
    }

    /// Cross-attention of one plane against the prompt, frame by frame.
    /// `region_for(frame)` returns the guided variant to use, if any.
    fn spatial(
        &self,
        plane: &Array4<T>,
        prompt: &PromptEmbedding<T>,
        frame_kernel: impl Fn(usize) -> SpatialKernel<T> + Sync,
    ) -> Result<Array4<T>> {
        let (f, h, w, ch) = plane.dim();
        if prompt.tokens.ncols() != self.dims.text_dim {
            return Err(Error::Shape(format!(
                "prompt width {} != text dim {}",
                prompt.tokens.ncols(),
                self.dims.text_dim
            )));
        }
        let k = prompt.tokens.dot(&self.cross.key);
        let v = prompt.tokens.dot(&self.cross.value);
        let q = attention::project(plane, &self.cross.query);
        let frames: Vec<Result<Array2<T>>> = (0..f)
            .into_par_iter()
            .map(|fi| {
                let qf = q.index_axis(Axis(0), fi);
                let qf = qf.to_shape((h * w, self.dims.head_dim)).expect("contiguous");
                let xf = plane.index_axis(Axis(0), fi);
                let xf = xf.to_shape((h * w, ch)).expect("contiguous");
                let attn = match frame_kernel(fi) {
                    SpatialKernel::Plain => cross_attention(qf.view(), k.view(), v.view())?,
                    SpatialKernel::Masked(region) => masked_cross_attention(
                        qf.view(),
                        k.view(),
                        v.view(),
                        &region,
                        &prompt.fg_token_indices,
                    )?,
                    SpatialKernel::Guided(region, lambda, gamma) => guided_cross_attention(
                        qf.view(),
                        k.view(),
                        v.view(),
                        &region,
                        &prompt.fg_token_indices,
                        lambda,
                        gamma,
                    )?,
                };
                let hidden = &xf + &attn;
                let mixed = hidden.dot(&self.feed_forward).mapv(|z| z.tanh());
                Ok(hidden + mixed)
            })
            .collect();
        let mut out = Array4::zeros((f, h, w, ch));
        for (fi, frame) in frames.into_iter().enumerate() {
            let frame = frame?;
            out.index_axis_mut(Axis(0), fi)
                .assign(&frame.into_shape_with_order((h, w, ch)).expect("row-major"));
        }
        Ok(out)
    }

    fn predict(&self, hidden: &Array4<T>) -> Array4<T> {
        attention::project(hidden, &self.head).mapv(|z| z.tanh())
    }
}

enum SpatialKernel<T> {
    Plain,
    Masked(BoxRegion),
    Guided(BoxRegion, T, T),
}

impl<T: Real> Denoiser<T> for ToyDenoiser<T> {
    fn dims(&self) -> DenoiserDims {
        self.dims
    }

    fn encode_condition(&self, video: &RgbVideo<T>, source: ConditionSource) -> Result<Condition<T>> {
        let (hh, ww) = self.dims.image_size();
        if (video.height(), video.width()) != (hh, ww) {
            return Err(Error::Shape(format!(
                "condition video is {}x{}, scene resolution is {ww}x{hh}",
                video.width(),
                video.height()
            )));
        }
        Ok(Condition {
            source,
            features: self.control.encode(video),
        })
    }

    fn step(&self, x: &LatentVolume<T>, ctx: &StepContext<'_, T>) -> Result<(LatentVolume<T>, Vec<TraceRecord>)> {
        let t = ctx.t;
        let total = ctx.schedule.total_steps;
        ctx.schedule.check(t)?;
        self.check_latents(x.data.shape())?;
        let (f, _, h, w, _) = x.data.dim();
        if ctx.track.frames() != f || ctx.condition.features.shape()[0] != f {
            return Err(Error::Shape(format!(
                "{f} latent frames, {} track frames, {} condition frames",
                ctx.track.frames(),
                ctx.condition.features.shape()[0]
            )));
        }
        let guided = ctx.mode == GuidanceMode::Guided;
        let ca_window = ctx.guidance.cross_attn_active(t, total);
        let oas_window = ctx.guidance.oas_active(t, total);
        let mut trace = Vec::with_capacity(5);

        // background conditioning
        let mut planes = x.planes();
        if ctx.condition.features.dim() != planes.bg.dim() {
            return Err(Error::Shape(format!(
                "condition features {:?} vs background plane {:?}",
                ctx.condition.features.shape(),
                planes.bg.shape()
            )));
        }
        planes.bg = &planes.bg + &ctx.condition.features;
        trace.push(TraceRecord {
            condition: Some(ctx.condition.source),
            ..TraceRecord::new(t, SubBlock::ConditionBg, false)
        });

        // spatial transformer
        let regions: Vec<BoxRegion> = ctx
            .track
            .boxes
            .iter()
            .map(|b| BoxRegion::new(scale_to_latent_grid(b, h, w), h, w))
            .collect::<Result<_>>()?;
        let g = ctx.guidance;
        planes.fg = self.spatial(&planes.fg, ctx.prompt, |fi| match (ca_window, guided) {
            (false, _) => SpatialKernel::Plain,
            (true, false) => SpatialKernel::Masked(regions[fi]),
            (true, true) => SpatialKernel::Guided(
                regions[fi],
                g.lambda,
                g.frame_gamma(ctx.track.is_key_index(fi)),
            ),
        })?;
        planes.bg = self.spatial(&planes.bg, ctx.prompt, |_| SpatialKernel::Plain)?;
        trace.push(TraceRecord::new(t, SubBlock::Spatial, ca_window && guided));

        // attention-sharing
        let shared = if oas_window && guided {
            oriented_attention_sharing(&planes, ctx.track, g.mu1, g.mu2, &self.sharing)?
        } else {
            attention_sharing(&planes, &self.sharing)?
        };
        planes.fg += &shared.fg;
        planes.bg += &shared.bg;
        trace.push(TraceRecord::new(t, SubBlock::Sharing, oas_window && guided));

        // attention isolation
        let isolated = isolated_temporal_attention(&planes, &self.temporal)?;
        planes.fg += &isolated.fg;
        planes.bg += &isolated.bg;
        trace.push(TraceRecord::new(t, SubBlock::Isolation, false));

        let x_fg = x.plane(LatentVolume::<T>::FG);
        let x_bg = x.plane(LatentVolume::<T>::BG);
        let next = AttentionPlanes {
            fg: ctx.schedule.update(&x_fg, &self.predict(&planes.fg), t),
            bg: ctx.schedule.update(&x_bg, &self.predict(&planes.bg), t),
        };
        trace.push(TraceRecord::new(t, SubBlock::SamplerUpdate, false));
        Ok((LatentVolume::from_planes(&next)?, trace))
    }

    fn step_base(
        &self,
        x: &Array4<T>,
        prompt: &PromptEmbedding<T>,
        t: usize,
        schedule: &SamplerSchedule<T>,
    ) -> Result<(Array4<T>, Vec<TraceRecord>)> {
        schedule.check(t)?;
        self.check_latents(x.shape())?;
        let mut hidden = self.spatial(x, prompt, |_| SpatialKernel::Plain)?;
        let temporal = temporal_self_attention(&hidden, &self.temporal)?;
        hidden += &temporal;
        let next = schedule.update(x, &self.predict(&hidden), t);
        let trace = vec![
            TraceRecord::new(t, SubBlock::Spatial, false),
            TraceRecord::new(t, SubBlock::Temporal, false),
            TraceRecord::new(t, SubBlock::SamplerUpdate, false),
        ];
        Ok((next, trace))
    }
}
