//! Layered text-to-video generation with per-object box trajectories.
//!
//! Every numeric type is generic over [`Real`] (`f32` or `f64`); the `*64`
//! and `*32` aliases below fix the scalar.

pub mod attention;
pub mod compositing;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod real;
pub mod rng;
pub mod scene;
pub mod text;
pub mod transparency;
pub mod video;

pub use attention::{GuidanceConfig, PromptEmbedding};
pub use compositing::{blend_layers, harmonize, ExternalHook, Harmonizer, IdentityHook, LayerStack};
pub use denoiser::{Denoiser, GuidanceMode, LatentVolume, ToyDenoiser};
pub use error::{Error, Result};
pub use metrics::{DetectionTrack, MetricsReport};
pub use pipeline::{generate_to_dir, reblend_dir, Pipeline, SceneOutput};
pub use real::Real;
pub use scene::{interpolate_track, load_scene, parse_scene, BBox, BBoxTrack, KeyframeBox, SceneSpec};
pub use transparency::{AlphaThresholds, TransparencyCodec};
pub use video::{RgbVideo, RgbaVideo};

pub type BBox64 = BBox<f64>;
pub type BBoxTrack64 = BBoxTrack<f64>;
pub type KeyframeBox64 = KeyframeBox<f64>;
pub type SceneSpec64 = SceneSpec<f64>;
pub type GuidanceConfig64 = GuidanceConfig<f64>;
pub type RgbVideo64 = RgbVideo<f64>;
pub type RgbaVideo64 = RgbaVideo<f64>;
pub type DetectionTrack64 = DetectionTrack<f64>;
pub type MetricsReport64 = MetricsReport<f64>;

pub type BBox32 = BBox<f32>;
pub type BBoxTrack32 = BBoxTrack<f32>;
pub type KeyframeBox32 = KeyframeBox<f32>;
pub type SceneSpec32 = SceneSpec<f32>;
pub type GuidanceConfig32 = GuidanceConfig<f32>;
pub type RgbVideo32 = RgbVideo<f32>;
pub type RgbaVideo32 = RgbaVideo<f32>;
pub type DetectionTrack32 = DetectionTrack<f32>;
pub type MetricsReport32 = MetricsReport<f32>;
