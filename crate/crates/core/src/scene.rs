//! Scene documents, bounding-box tracks and their mapping onto latent grids.
//!
//! Boxes are `[x0, y0, x1, y1]` in normalized image coordinates with the
//! origin at the top-left corner. Frame numbers in documents and in
//! [`BBoxTrack::key_frames`] are 1-based; slice indices are 0-based.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::GuidanceConfig;
use crate::error::{Error, Result};
use crate::real::Real;

pub const DEFAULT_FRAMES: usize = 16;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_RESOLUTION: usize = 256;
/// Image pixels per latent cell along each axis when the latent grid is not given.
pub const DEFAULT_LATENT_FACTOR: usize = 8;
pub const DEFAULT_LATENT_CHANNELS: usize = 4;

/// Axis-aligned box in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[T; 4]", into = "[T; 4]")]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct BBox<T> {
    pub x0: T,
    pub y0: T,
    pub x1: T,
    pub y1: T,
}

impl<T: Real> From<[T; 4]> for BBox<T> {
    fn from([x0, y0, x1, y1]: [T; 4]) -> Self {
        BBox { x0, y0, x1, y1 }
    }
}

impl<T: Real> From<BBox<T>> for [T; 4] {
    fn from(b: BBox<T>) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl<T: Real> BBox<T> {
    pub fn new(x0: T, y0: T, x1: T, y1: T) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn from_f64(c: [f64; 4]) -> Self {
        BBox::new(T::lit(c[0]), T::lit(c[1]), T::lit(c[2]), T::lit(c[3]))
    }

    pub fn to_array(self) -> [T; 4] {
        self.into()
    }

    pub fn is_valid(&self) -> bool {
        let (zero, one) = (T::zero(), T::one());
        zero <= self.x0
            && self.x0 <= self.x1
            && self.x1 <= one
            && zero <= self.y0
            && self.y0 <= self.y1
            && self.y1 <= one
    }

    pub fn width(&self) -> T {
        self.x1 - self.x0
    }

    pub fn height(&self) -> T {
        self.y1 - self.y0
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let half = T::lit(0.5);
        ((self.x0 + self.x1) * half, (self.y0 + self.y1) * half)
    }

    fn validate(&self, field: &str) -> Result<()> {
        if self.to_array().iter().any(|c| !c.is_finite()) {
            return Err(Error::Invalid(format!("{field}: non-finite coordinate")));
        }
        if !self.is_valid() {
            return Err(Error::Range(format!(
                "{field}: box {:?} violates 0 <= x0 <= x1 <= 1, 0 <= y0 <= y1 <= 1",
                self.to_array()
            )));
        }
        Ok(())
    }
}

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

/// User-supplied key-frame of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct KeyframeBox<T> {
    /// 1-based frame number.
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BBox<T>,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub is_key: bool,
}

impl<T: Real> KeyframeBox<T> {
    pub fn new(frame: usize, bbox: BBox<T>) -> Self {
        KeyframeBox {
            frame,
            bbox,
            is_key: true,
        }
    }
}

/// Per-frame boxes `B_1..B_f` plus the set of key-frame numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct BBoxTrack<T> {
    pub boxes: Vec<BBox<T>>,
    /// 1-based frame numbers; always contains `1` and `f`.
    pub key_frames: BTreeSet<usize>,
}

impl<T: Real> BBoxTrack<T> {
    pub fn frames(&self) -> usize {
        self.boxes.len()
    }

    /// Box at 0-based frame index.
    pub fn at(&self, index: usize) -> &BBox<T> {
        &self.boxes[index]
    }

    /// Whether the 0-based frame index is a key-frame.
    pub fn is_key_index(&self, index: usize) -> bool {
        self.key_frames.contains(&(index + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct LayerSpec<T> {
    pub prompt: String,
    pub keyframes: Vec<KeyframeBox<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentDims {
    pub h: usize,
    pub w: usize,
    pub ch: usize,
}

/// Validated generation request.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Real"))]
pub struct SceneSpec<T> {
    pub background_prompt: String,
    pub frames: usize,
    pub steps: usize,
    pub seed: u64,
    pub resolution: Resolution,
    pub latent: LatentDims,
    pub guidance: GuidanceConfig<T>,
    /// Generation order; later layers occlude earlier ones.
    pub layers: Vec<LayerSpec<T>>,
}

/// Wire form of a scene file; every field except the background prompt is optional.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound(deserialize = "T: Real"))]
struct SceneDocument<T> {
    #[serde(alias = "bg")]
    background_prompt: String,
    #[serde(default)]
    frames: Option<usize>,
    #[serde(default)]
    steps: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    resolution: Option<Resolution>,
    #[serde(default)]
    latent: Option<LatentDims>,
    #[serde(default)]
    guidance: GuidanceConfig<T>,
    #[serde(default)]
    layers: Vec<LayerSpec<T>>,
}

/// Command-line style overrides applied on top of a parsed scene.
#[derive(Debug, Clone, Default)]
pub struct SceneOverrides<T> {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub frames: Option<usize>,
    pub lambda: Option<T>,
    pub gamma_key: Option<T>,
    pub mu1: Option<T>,
    pub mu2: Option<T>,
    pub t_eps_fraction: Option<T>,
}

/// Parses and validates a scene document (JSON), filling defaults.
pub fn parse_scene<T: Real>(document: &str) -> Result<SceneSpec<T>> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let doc: SceneDocument<T> = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::Parse {
            field,
            message: e.into_inner().to_string(),
        }
    })?;

    let resolution = doc.resolution.unwrap_or(Resolution {
        width: DEFAULT_RESOLUTION,
        height: DEFAULT_RESOLUTION,
    });
    let latent = doc.latent.unwrap_or(LatentDims {
        h: resolution.height / DEFAULT_LATENT_FACTOR,
        w: resolution.width / DEFAULT_LATENT_FACTOR,
        ch: DEFAULT_LATENT_CHANNELS,
    });
    let scene = SceneSpec {
        background_prompt: doc.background_prompt,
        frames: doc.frames.unwrap_or(DEFAULT_FRAMES),
        steps: doc.steps.unwrap_or(DEFAULT_STEPS),
        seed: doc.seed.unwrap_or(0),
        resolution,
        latent,
        guidance: doc.guidance,
        layers: doc.layers,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn load_scene<T: Real>(path: &Path) -> Result<SceneSpec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text)
}

impl<T: Real> SceneSpec<T> {
    /// Image pixels per latent cell. Validation guarantees it is the same on both axes.
    pub fn latent_factor(&self) -> usize {
        self.resolution.height / self.latent.h
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 1 {
            return Err(Error::Range("frames: must be >= 1".into()));
        }
        if self.steps < 1 {
            return Err(Error::Range("steps: must be >= 1".into()));
        }
        let (r, l) = (self.resolution, self.latent);
        if r.width == 0 || r.height == 0 || l.h == 0 || l.w == 0 || l.ch == 0 {
            return Err(Error::Invalid(
                "resolution/latent: dimensions must be positive".into(),
            ));
        }
        if r.height % l.h != 0 || r.width % l.w != 0 || r.height / l.h != r.width / l.w {
            return Err(Error::Invalid(format!(
                "resolution {}x{} is not a uniform integer multiple of latent {}x{}",
                r.width, r.height, l.w, l.h
            )));
        }
        self.guidance.validate()?;
        for (li, layer) in self.layers.iter().enumerate() {
            if layer.prompt.trim().is_empty() {
                return Err(Error::Parse {
                    field: format!("layers[{li}].prompt"),
                    message: "prompt must be non-empty".into(),
                });
            }
            validate_keyframes(&layer.keyframes, self.frames, &format!("layers[{li}]"))?;
        }
        Ok(())
    }

    pub fn with_overrides(mut self, o: &SceneOverrides<T>) -> Result<Self> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.steps {
            self.steps = v;
        }
        if let Some(v) = o.frames {
            self.frames = v;
        }
        let g = &mut self.guidance;
        if let Some(v) = o.lambda {
            g.lambda = v;
        }
        if let Some(v) = o.gamma_key {
            g.gamma_key = v;
        }
        if let Some(v) = o.mu1 {
            g.mu1 = v;
        }
        if let Some(v) = o.mu2 {
            g.mu2 = v;
        }
        if let Some(v) = o.t_eps_fraction {
            g.t_eps_fraction = v;
        }
        self.validate()?;
        Ok(self)
    }

    /// Expanded per-frame track of every layer, in layer order.
    pub fn tracks(&self) -> Result<Vec<BBoxTrack<T>>> {
        self.layers
            .iter()
            .map(|l| interpolate_track(&l.keyframes, self.frames))
            .collect()
    }
}

fn validate_keyframes<T: Real>(keyframes: &[KeyframeBox<T>], f: usize, field: &str) -> Result<()> {
    if keyframes.is_empty() {
        return Err(Error::Invalid(format!("{field}.keyframes: at least one key-frame required")));
    }
    for (ki, k) in keyframes.iter().enumerate() {
        let name = format!("{field}.keyframes[{ki}]");
        if k.frame < 1 || k.frame > f {
            return Err(Error::Range(format!(
                "{name}.frame: {} outside [1, {f}]",
                k.frame
            )));
        }
        k.bbox.validate(&format!("{name}.box"))?;
    }
    for (ki, pair) in keyframes.windows(2).enumerate() {
        if pair[1].frame <= pair[0].frame {
            return Err(Error::Ordering(format!(
                "{field}.keyframes[{}]: frame {} does not follow frame {}",
                ki + 1,
                pair[1].frame,
                pair[0].frame
            )));
        }
    }
    if keyframes.len() >= 2 {
        let (first, last) = (keyframes[0].frame, keyframes[keyframes.len() - 1].frame);
        if first != 1 || last != f {
            return Err(Error::Range(format!(
                "{field}.keyframes: track must span frames 1..{f}, got {first}..{last}"
            )));
        }
    }
    Ok(())
}

/// Expands key-frames into a per-frame track by piecewise-linear interpolation
/// of each coordinate. Boxes at key-frame indices are copied exactly. A single
/// key-frame produces a static track.
pub fn interpolate_track<T: Real>(keyframes: &[KeyframeBox<T>], f: usize) -> Result<BBoxTrack<T>> {
    if f < 1 {
        return Err(Error::Range("frames: must be >= 1".into()));
    }
    validate_keyframes(keyframes, f, "track")?;

    let mut key_frames: BTreeSet<usize> = keyframes
        .iter()
        .filter(|k| k.is_key)
        .map(|k| k.frame)
        .collect();
    key_frames.insert(1);
    key_frames.insert(f);

    if keyframes.len() == 1 {
        return Ok(BBoxTrack {
            boxes: vec![keyframes[0].bbox; f],
            key_frames,
        });
    }

    let mut boxes = Vec::with_capacity(f);
    for pair in keyframes.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let span = T::lit((b.frame - a.frame) as f64);
        // Each segment emits its start frame; the final key-frame is pushed after the loop.
        for n in a.frame..b.frame {
            if n == a.frame {
                boxes.push(a.bbox);
                continue;
            }
            let s = T::lit((n - a.frame) as f64) / span;
            boxes.push(lerp_box(&a.bbox, &b.bbox, s));
        }
    }
    boxes.push(keyframes[keyframes.len() - 1].bbox);
    debug_assert_eq!(boxes.len(), f);
    Ok(BBoxTrack { boxes, key_frames })
}

fn lerp_box<T: Real>(a: &BBox<T>, b: &BBox<T>, s: T) -> BBox<T> {
    // (1-s)a + s b with correctly rounded ops is monotone in a and b, so
    // x0 <= x1 survives rounding; the clamp pins the convex-hull bound.
    let lerp = |p: T, q: T| {
        let v = (T::one() - s) * p + s * q;
        v.max(p.min(q)).min(p.max(q))
    };
    BBox::new(
        lerp(a.x0, b.x0),
        lerp(a.y0, b.y0),
        lerp(a.x1, b.x1),
        lerp(a.y1, b.y1),
    )
}

/// Half-open range of latent cells covered by a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellRange {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl CellRange {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        CellRange {
            row0,
            col0,
            row1,
            col1,
        }
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }

    pub fn len(&self) -> usize {
        self.height() * self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }
}

/// Values within this distance of an integer are treated as that integer
/// before flooring/ceiling, so `0.3 * 10` lands on cell 3 rather than 4.
const GRID_SNAP: f64 = 1e-9;

fn snap<T: Real>(v: T) -> T {
    let r = v.round();
    if (v - r).abs() < T::lit(GRID_SNAP) {
        r
    } else {
        v
    }
}

/// Maps a normalized box onto an `h × w` latent grid: floor the start, ceil the
/// end, clamp to the grid, and widen degenerate ranges to one cell.
pub fn scale_to_latent_grid<T: Real>(b: &BBox<T>, h: usize, w: usize) -> CellRange {
    assert!(h >= 1 && w >= 1, "latent grid must be at least 1x1");
    let axis = |lo: T, hi: T, n: usize| -> (usize, usize) {
        let nf = T::lit(n as f64);
        let start = snap(lo * nf).floor().max(T::zero()).to_usize().unwrap_or(0);
        let end = snap(hi * nf).ceil().max(T::zero()).to_usize().unwrap_or(0);
        let start = start.min(n - 1);
        let end = end.min(n).max(start + 1);
        (start, end)
    };
    let (row0, row1) = axis(b.y0, b.y1, h);
    let (col0, col1) = axis(b.x0, b.x1, w);
    CellRange {
        row0,
        col0,
        row1,
        col1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kf(frame: usize, c: [f64; 4]) -> KeyframeBox<f64> {
        KeyframeBox::new(frame, BBox::from_f64(c))
    }

    #[test]
    fn minimal_document_gets_defaults() {
        let s: SceneSpec<f64> =
            parse_scene(r#"{"bg":"a coral reef","layers":[],"frames":16,"seed":7}"#).unwrap();
        assert_eq!(s.background_prompt, "a coral reef");
        assert_eq!(s.steps, 50);
        assert_eq!(s.frames, 16);
        assert_eq!(s.seed, 7);
        assert_eq!(s.resolution, Resolution { width: 256, height: 256 });
        assert_eq!(s.latent, LatentDims { h: 32, w: 32, ch: 4 });
        assert!(s.layers.is_empty());
        assert_eq!(s.guidance, GuidanceConfig::default());
    }

    #[test]
    fn keyframe_beyond_frames_is_range_error() {
        let doc = r#"{"background_prompt":"x","frames":16,"layers":[
            {"prompt":"fish","keyframes":[{"frame":1,"box":[0,0,0.5,0.5]},{"frame":20,"box":[0,0,0.5,0.5]}]}]}"#;
        let err = parse_scene::<f64>(doc).unwrap_err();
        assert!(matches!(err, Error::Range(_)), "{err}");
    }

    #[test]
    fn non_monotone_keyframes_is_ordering_error() {
        let doc = r#"{"background_prompt":"x","frames":16,"layers":[
            {"prompt":"fish","keyframes":[{"frame":1,"box":[0,0,0.5,0.5]},{"frame":9,"box":[0,0,0.5,0.5]},
             {"frame":5,"box":[0,0,0.5,0.5]},{"frame":16,"box":[0,0,0.5,0.5]}]}]}"#;
        let err = parse_scene::<f64>(doc).unwrap_err();
        assert!(matches!(err, Error::Ordering(_)), "{err}");
    }

    #[test]
    fn schema_violation_names_field() {
        let doc = r#"{"background_prompt":"x","layers":[{"prompt":"fish","keyframes":[{"frame":"one","box":[0,0,1,1]}]}]}"#;
        match parse_scene::<f64>(doc).unwrap_err() {
            Error::Parse { field, .. } => assert_eq!(field, "layers[0].keyframes[0].frame"),
            e => panic!("unexpected {e}"),
        }
        match parse_scene::<f64>(r#"{"frames":4}"#).unwrap_err() {
            Error::Parse { message, .. } => assert!(message.contains("background_prompt")),
            e => panic!("unexpected {e}"),
        }
        match parse_scene::<f64>(r#"{"bg":"x","guidance":{"lamda":1.0}}"#).unwrap_err() {
            Error::Parse { field, .. } => assert!(field.starts_with("guidance"), "{field}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn invalid_box_rejected() {
        let doc = r#"{"bg":"x","frames":2,"layers":[{"prompt":"p","keyframes":[{"frame":1,"box":[0.6,0,0.5,1]}]}]}"#;
        assert!(matches!(parse_scene::<f64>(doc), Err(Error::Range(_))));
    }

    #[test]
    fn overrides_revalidate() {
        let doc = r#"{"bg":"x","frames":16,"layers":[{"prompt":"p","keyframes":[{"frame":1,"box":[0,0,1,1]},{"frame":16,"box":[0,0,1,1]}]}]}"#;
        let s: SceneSpec<f64> = parse_scene(doc).unwrap();
        let o = SceneOverrides {
            seed: Some(7),
            ..Default::default()
        };
        assert_eq!(s.clone().with_overrides(&o).unwrap().seed, 7);
        let o = SceneOverrides {
            frames: Some(8),
            ..Default::default()
        };
        assert!(matches!(s.clone().with_overrides(&o), Err(Error::Range(_))));
        let o = SceneOverrides {
            mu1: Some(0.5),
            ..Default::default()
        };
        assert!(matches!(s.with_overrides(&o), Err(Error::Invalid(_))));
    }

    #[test]
    fn itpl_endpoints_and_midpoint() {
        let t = interpolate_track(
            &[kf(1, [0.7, 0.6, 0.9, 0.8]), kf(16, [0.1, 0.6, 0.3, 0.8])],
            16,
        )
        .unwrap();
        assert_eq!(t.boxes.len(), 16);
        assert_eq!(t.boxes[0].to_array(), [0.7, 0.6, 0.9, 0.8]);
        assert_eq!(t.boxes[15].to_array(), [0.1, 0.6, 0.3, 0.8]);
        // oracle: b1 + (5/15)(b2 - b1)
        let want = [0.7 - 0.6 / 3.0, 0.6, 0.9 - 0.6 / 3.0, 0.8];
        for (g, w) in t.boxes[5].to_array().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!((t.boxes[5].x0 - 0.5).abs() < 1e-12);
        assert_eq!(t.key_frames, BTreeSet::from([1, 16]));
    }

    #[test]
    fn single_keyframe_is_static() {
        let t = interpolate_track(&[kf(1, [0.2, 0.2, 0.4, 0.4])], 16).unwrap();
        assert_eq!(t.boxes.len(), 16);
        assert!(t.boxes.iter().all(|b| b.to_array() == [0.2, 0.2, 0.4, 0.4]));
        assert!(t.key_frames.contains(&1) && t.key_frames.contains(&16));
    }

    #[test]
    fn non_key_flag_excluded_from_key_set() {
        let mut mid = kf(5, [0.3, 0.3, 0.5, 0.5]);
        mid.is_key = false;
        let t = interpolate_track(
            &[kf(1, [0.0, 0.0, 0.2, 0.2]), mid, kf(10, [0.5, 0.5, 0.9, 0.9])],
            10,
        )
        .unwrap();
        assert_eq!(t.key_frames, BTreeSet::from([1, 10]));
        assert_eq!(t.boxes[4], mid.bbox);
    }

    #[test]
    fn empty_keyframes_error() {
        assert!(interpolate_track::<f64>(&[], 16).is_err());
    }

    #[test]
    fn grid_scaling_examples() {
        let g = |c: [f64; 4]| scale_to_latent_grid(&BBox::<f64>::from_f64(c), 32, 32);
        assert_eq!(g([0.0, 0.0, 1.0, 1.0]), CellRange::new(0, 0, 32, 32));
        assert_eq!(g([0.5, 0.5, 1.0, 1.0]), CellRange::new(16, 16, 32, 32));
        assert_eq!(g([0.5, 0.5, 0.5, 0.5]), CellRange::new(16, 16, 17, 17));
        assert_eq!(g([1.0, 1.0, 1.0, 1.0]), CellRange::new(31, 31, 32, 32));
        assert_eq!(
            scale_to_latent_grid(&BBox::<f64>::from_f64([0.1, 0.1, 0.3, 0.3]), 10, 10),
            CellRange::new(1, 1, 3, 3)
        );
    }
}
