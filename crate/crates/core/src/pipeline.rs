//! Scene orchestration: background first, then each foreground layer with
//! two-stage conditioning, then blending and harmonization.
//!
//! For layer `i`, steps with `t > t_ε` are conditioned on the raw background;
//! steps with `t ≤ t_ε` on the background blended with layers `1..i-1`.

use std::cell::OnceCell;
use std::io::Write;
use std::path::Path;

use ndarray::Array4;
use serde::Serialize;

use crate::attention::GuidanceConfig;
use crate::compositing::{blend_layers, harmonize, union_masks, Harmonizer, LayerStack};
use crate::denoiser::{
    build_toy_denoiser, Condition, ConditionSource, Denoiser, DenoiserDims, GuidanceMode,
    LatentVolume, SamplerSchedule, StepContext, ToyDenoiser, TraceRecord,
};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;
use crate::scene::{interpolate_track, BBoxTrack, SceneSpec};
use crate::text::TextEncoder;
use crate::transparency::{extract_foreground_mask, AlphaThresholds, TransparencyCodec};
use crate::video::{self, FrameMasks, RgbVideo, RgbaVideo};

/// One generated foreground layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerArtifact<T> {
    /// 1-based.
    pub layer_index: usize,
    pub rgba: RgbaVideo<T>,
    pub masks: FrameMasks,
    pub track: BBoxTrack<T>,
    /// Five records per step, `T` steps.
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundArtifact<T> {
    pub video: RgbVideo<T>,
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneOutput<T> {
    pub background: BackgroundArtifact<T>,
    pub layers: Vec<LayerArtifact<T>>,
    pub blend: RgbVideo<T>,
    pub harmonized: RgbVideo<T>,
}

/// Two-stage condition schedule for one layer. The blended condition is built
/// on first use and cached; prior layers are frozen during the run.
pub struct TwoStageCondition<'a, T: Real, D: Denoiser<T>> {
    pub t_eps: usize,
    denoiser: &'a D,
    background: &'a RgbVideo<T>,
    priors: &'a [LayerArtifact<T>],
    stage_one: OnceCell<Condition<T>>,
    stage_two: OnceCell<Condition<T>>,
}

impl<'a, T: Real, D: Denoiser<T>> TwoStageCondition<'a, T, D> {
    pub fn new(
        t_eps: usize,
        denoiser: &'a D,
        background: &'a RgbVideo<T>,
        priors: &'a [LayerArtifact<T>],
    ) -> Self {
        TwoStageCondition {
            t_eps,
            denoiser,
            background,
            priors,
            stage_one: OnceCell::new(),
            stage_two: OnceCell::new(),
        }
    }

    pub fn source(&self, t: usize) -> ConditionSource {
        if t > self.t_eps {
            ConditionSource::Background
        } else {
            ConditionSource::Blend
        }
    }

    /// `b ∘ fg_1 ∘ ... ∘ fg_{i-1}`
    pub fn blended_condition(&self) -> Result<RgbVideo<T>> {
        let stack = LayerStack::new(
            self.background.clone(),
            self.priors.iter().map(|l| l.rgba.clone()).collect(),
        )?;
        Ok(blend_layers(&stack))
    }

    pub fn condition(&self, t: usize) -> Result<&Condition<T>> {
        let cell = match self.source(t) {
            ConditionSource::Background => &self.stage_one,
            ConditionSource::Blend => &self.stage_two,
        };
        if let Some(c) = cell.get() {
            return Ok(c);
        }
        let c = match self.source(t) {
            ConditionSource::Background => self
                .denoiser
                .encode_condition(self.background, ConditionSource::Background)?,
            ConditionSource::Blend => self
                .denoiser
                .encode_condition(&self.blended_condition()?, ConditionSource::Blend)?,
        };
        Ok(cell.get_or_init(|| c))
    }
}

/// Background, foreground layers in order, and their blend.
pub type LayerRun<T> = (BackgroundArtifact<T>, Vec<LayerArtifact<T>>, RgbVideo<T>);

/// Generation engine for one scene.
pub struct Pipeline<'s, T: Real, D: Denoiser<T> = ToyDenoiser<T>> {
    pub scene: &'s SceneSpec<T>,
    pub denoiser: D,
    pub codec: TransparencyCodec<T>,
    pub text: TextEncoder,
    pub thresholds: AlphaThresholds<T>,
    pub mode: GuidanceMode,
}

impl<'s, T: Real> Pipeline<'s, T, ToyDenoiser<T>> {
    /// Toy denoiser and codec seeded from the scene seed.
    pub fn toy(scene: &'s SceneSpec<T>) -> Result<Self> {
        scene.validate()?;
        let l = scene.latent;
        let dims = DenoiserDims::for_latent(l.h, l.w, l.ch, scene.latent_factor());
        let denoiser = build_toy_denoiser(scene.seed, dims)?;
        let codec = TransparencyCodec::seeded(scene.seed, l.ch, dims.factor);
        Ok(Pipeline {
            scene,
            denoiser,
            text: TextEncoder::new(dims.text_dim),
            codec,
            thresholds: AlphaThresholds::default(),
            mode: GuidanceMode::Guided,
        })
    }
}

impl<'s, T: Real, D: Denoiser<T>> Pipeline<'s, T, D> {
    fn guidance(&self) -> &GuidanceConfig<T> {
        &self.scene.guidance
    }

    pub fn generate_background(&self) -> Result<BackgroundArtifact<T>> {
        let s = self.scene;
        let l = s.latent;
        let schedule = SamplerSchedule::new(s.steps)?;
        let prompt = self.text.background(&s.background_prompt)?;
        let mut r = rng::stream(s.seed, rng::streams::BACKGROUND_NOISE);
        let mut x: Array4<T> = rng::normal(&mut r, (s.frames, l.h, l.w, l.ch), 1.0);
        let mut trace = Vec::with_capacity(3 * s.steps);
        for t in schedule.timesteps() {
            let (next, records) = self.denoiser.step_base(&x, &prompt, t, &schedule)?;
            x = next;
            trace.extend(records);
        }
        Ok(BackgroundArtifact {
            video: self.codec.decode_rgb(&x)?,
            trace,
        })
    }

    /// Generates foreground layer `layer_index` (1-based) on top of `background`,
    /// given exactly the artifacts of layers `1..layer_index-1`.
    pub fn generate_foreground_layer(
        &self,
        layer_index: usize,
        background: &RgbVideo<T>,
        prior_layers: &[LayerArtifact<T>],
    ) -> Result<LayerArtifact<T>> {
        let s = self.scene;
        if layer_index < 1 || layer_index > s.layers.len() {
            return Err(Error::Range(format!(
                "layer index {layer_index} outside [1, {}]",
                s.layers.len()
            )));
        }
        if prior_layers.len() != layer_index - 1
            || prior_layers
                .iter()
                .enumerate()
                .any(|(i, l)| l.layer_index != i + 1)
        {
            let have: Vec<usize> = prior_layers.iter().map(|l| l.layer_index).collect();
            return Err(Error::MissingLayer(format!(
                "layer {layer_index} needs layers 1..{} in order, got {have:?}",
                layer_index - 1
            )));
        }
        let spec = &s.layers[layer_index - 1];
        let track = interpolate_track(&spec.keyframes, s.frames)?;
        let prompt = self.text.layer(&spec.prompt, &s.background_prompt)?;
        let schedule = SamplerSchedule::new(s.steps)?;
        let l = s.latent;
        let conditioning = TwoStageCondition::new(
            self.guidance().t_eps(s.steps),
            &self.denoiser,
            background,
            prior_layers,
        );

        let mut x = LatentVolume::noise(s.seed, layer_index as u64, s.frames, l.h, l.w, l.ch);
        let mut trace = Vec::with_capacity(5 * s.steps);
        for t in schedule.timesteps() {
            let ctx = StepContext {
                prompt: &prompt,
                condition: conditioning.condition(t)?,
                track: &track,
                t,
                schedule: &schedule,
                guidance: self.guidance(),
                mode: self.mode,
            };
            let (next, records) = self.denoiser.step(&x, &ctx)?;
            x = next;
            trace.extend(records);
        }

        let x_fg = x.plane(LatentVolume::<T>::FG);
        let x_a = self.codec.adjust_latent(&x_fg)?;
        let decoded = self.codec.decode_rgba(&x_a)?;
        let (masks, rgba) = extract_foreground_mask(&decoded, self.thresholds)?;
        Ok(LayerArtifact {
            layer_index,
            rgba,
            masks,
            track,
            trace,
        })
    }

    /// Background, every layer in order, and their blend.
    pub fn generate_layers(&self) -> Result<LayerRun<T>> {
        let background = self.generate_background()?;
        let mut layers: Vec<LayerArtifact<T>> = Vec::with_capacity(self.scene.layers.len());
        for i in 1..=self.scene.layers.len() {
            let layer = self.generate_foreground_layer(i, &background.video, &layers)?;
            layers.push(layer);
        }
        let stack = LayerStack::new(
            background.video.clone(),
            layers.iter().map(|l| l.rgba.clone()).collect(),
        )?;
        let blend = blend_layers(&stack);
        Ok((background, layers, blend))
    }

    pub fn run_scene(&self, hook: &dyn Harmonizer<T>) -> Result<SceneOutput<T>> {
        let (background, layers, blend) = self.generate_layers()?;
        let masks = union_masks(layers.iter().map(|l| &l.masks), blend.dims());
        let harmonized = harmonize(&blend, &masks, hook)?;
        Ok(SceneOutput {
            background,
            layers,
            blend,
            harmonized,
        })
    }
}

#[derive(Serialize)]
struct TraceLine<'a> {
    layer: usize,
    #[serde(flatten)]
    record: &'a TraceRecord,
}

#[derive(Serialize)]
#[serde(bound(serialize = "T: Real"))]
struct Manifest<'a, T> {
    format: u32,
    engine: &'static str,
    version: &'static str,
    seed: u64,
    hook: &'a str,
    scene: &'a SceneSpec<T>,
}

pub fn layer_dir(out: &Path, layer_index: usize) -> std::path::PathBuf {
    out.join(format!("layer_{layer_index:02}"))
}

/// Writes `bg/`, `layer_##/` (RGBA frames and masks), `blend/`, `trace.jsonl`
/// and `manifest.json`. `harmonized/` is written separately so a failing hook
/// leaves the blend on disk.
pub fn write_layers<T: Real>(
    out: &Path,
    scene: &SceneSpec<T>,
    background: &BackgroundArtifact<T>,
    layers: &[LayerArtifact<T>],
    blend: &RgbVideo<T>,
    hook_name: &str,
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    video::write_rgb_frames(&background.video, &out.join("bg"))?;
    for layer in layers {
        let dir = layer_dir(out, layer.layer_index);
        video::write_rgba_frames(&layer.rgba, &dir)?;
        video::write_masks(&layer.masks, &dir, "mask")?;
    }
    video::write_rgb_frames(blend, &out.join("blend"))?;

    let trace_path = out.join("trace.jsonl");
    let mut trace = Vec::new();
    let lines = background
        .trace
        .iter()
        .map(|r| (0, r))
        .chain(layers.iter().flat_map(|l| l.trace.iter().map(move |r| (l.layer_index, r))));
    for (layer, record) in lines {
        serde_json::to_writer(&mut trace, &TraceLine { layer, record })?;
        trace.push(b'\n');
    }
    std::fs::write(&trace_path, trace).map_err(|e| Error::io(&trace_path, e))?;

    let manifest = Manifest {
        format: 1,
        engine: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed: scene.seed,
        hook: hook_name,
        scene,
    };
    let path = out.join("manifest.json");
    let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut file, &manifest)?;
    file.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Runs the toy pipeline for `scene` and writes the full output tree.
pub fn generate_to_dir<T: Real>(
    scene: &SceneSpec<T>,
    out: &Path,
    hook: &dyn Harmonizer<T>,
    hook_name: &str,
) -> Result<SceneOutput<T>> {
    let pipeline = Pipeline::toy(scene)?;
    let (background, layers, blend) = pipeline.generate_layers()?;
    write_layers(out, scene, &background, &layers, &blend, hook_name)?;
    let masks = union_masks(layers.iter().map(|l| &l.masks), blend.dims());
    let harmonized = harmonize(&blend, &masks, hook)?;
    video::write_rgb_frames(&harmonized, &out.join("harmonized"))?;
    Ok(SceneOutput {
        background,
        layers,
        blend,
        harmonized,
    })
}

/// Re-blends an existing output tree (`bg/`, `layer_01/`, ...) and rewrites
/// `blend/` and `harmonized/`. Returns the number of layers found.
pub fn reblend_dir<T: Real>(out: &Path, hook: &dyn Harmonizer<T>) -> Result<usize> {
    let background: RgbVideo<T> = video::read_rgb_frames(&out.join("bg"))?;
    let mut foregrounds = Vec::new();
    let mut masks = Vec::new();
    for i in 1.. {
        let dir = layer_dir(out, i);
        if !dir.is_dir() {
            break;
        }
        foregrounds.push(video::read_rgba_frames::<T>(&dir)?);
        masks.push(video::read_masks(&dir, "mask")?);
    }
    let n = foregrounds.len();
    let blend = blend_layers(&LayerStack::new(background, foregrounds)?);
    video::write_rgb_frames(&blend, &out.join("blend"))?;
    let masks = union_masks(masks.iter(), blend.dims());
    let harmonized = harmonize(&blend, &masks, hook)?;
    video::write_rgb_frames(&harmonized, &out.join("harmonized"))?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compositing::IdentityHook;
    use crate::denoiser::SubBlock;
    use crate::scene::parse_scene;

    fn scene(layers: usize, steps: usize) -> SceneSpec<f64> {
        let boxes = [
            ([0.0, 0.0, 0.5, 0.5], [0.5, 0.5, 1.0, 1.0]),
            ([0.5, 0.0, 1.0, 0.5], [0.0, 0.5, 0.5, 1.0]),
            ([0.2, 0.2, 0.6, 0.6], [0.4, 0.4, 0.8, 0.8]),
        ];
        let layers: Vec<String> = (0..layers)
            .map(|i| {
                let (a, b) = boxes[i % 3];
                format!(
                    r#"{{"prompt":"object {i}","keyframes":[{{"frame":1,"box":{a:?}}},{{"frame":3,"box":{b:?}}}]}}"#
                )
            })
            .collect();
        parse_scene(&format!(
            r#"{{"bg":"a field","frames":3,"steps":{steps},"seed":5,
               "resolution":{{"width":8,"height":8}},"latent":{{"h":4,"w":4,"ch":3}},
               "layers":[{}]}}"#,
            layers.join(",")
        ))
        .unwrap()
    }

    #[test]
    fn missing_prior_layer_rejected() {
        let s = scene(2, 2);
        let p = Pipeline::toy(&s).unwrap();
        let bg = p.generate_background().unwrap();
        let err = p.generate_foreground_layer(2, &bg.video, &[]).unwrap_err();
        assert!(matches!(err, Error::MissingLayer(_)));
        assert!(p.generate_foreground_layer(3, &bg.video, &[]).is_err());
    }

    #[test]
    fn first_layer_is_background_conditioned_until_switch() {
        let s = scene(1, 4);
        let p = Pipeline::toy(&s).unwrap();
        let bg = p.generate_background().unwrap();
        let layer = p.generate_foreground_layer(1, &bg.video, &[]).unwrap();
        assert_eq!(layer.trace.len(), 5 * 4);
        let sources: Vec<_> = layer
            .trace
            .iter()
            .filter(|r| r.sub_block == SubBlock::ConditionBg)
            .map(|r| r.condition.unwrap())
            .collect();
        assert_eq!(
            sources,
            [ConditionSource::Background, ConditionSource::Background, ConditionSource::Blend, ConditionSource::Blend]
        );
        // zero priors: the stage-two blend is the background itself
        let conditioning = TwoStageCondition::new(2, &p.denoiser, &bg.video, &[]);
        assert_eq!(conditioning.blended_condition().unwrap(), bg.video);
    }

    #[test]
    fn zero_layer_blend_is_background() {
        let s = scene(0, 2);
        let out = Pipeline::toy(&s).unwrap().run_scene(&IdentityHook).unwrap();
        assert_eq!(out.blend, out.background.video);
        assert_eq!(out.harmonized, out.blend);
        assert!(out.layers.is_empty());
    }
}
