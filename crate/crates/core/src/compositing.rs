//! Straight-alpha "over" blending of layers and the harmonization hook.

use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::{s, Array3, Array4, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::video::{self, FrameMasks, RgbVideo, RgbaVideo};

/// Background plus foregrounds in generation order; later layers sit on top.
#[derive(Debug, Clone)]
pub struct LayerStack<T> {
    pub background: RgbVideo<T>,
    pub foregrounds: Vec<RgbaVideo<T>>,
}

impl<T: Real> LayerStack<T> {
    pub fn new(background: RgbVideo<T>, foregrounds: Vec<RgbaVideo<T>>) -> Result<Self> {
        let dims = background.dims();
        for (i, fg) in foregrounds.iter().enumerate() {
            if fg.dims() != dims {
                return Err(Error::Shape(format!(
                    "foreground {} is {:?}, background is {:?}",
                    i + 1,
                    fg.dims(),
                    dims
                )));
            }
        }
        Ok(LayerStack {
            background,
            foregrounds,
        })
    }
}

/// `out = fg.rgb·α + bg·(1 − α)` per pixel.
pub fn alpha_over_frame<T: Real>(bg: ArrayView3<T>, fg: ArrayView3<T>) -> Result<Array3<T>> {
    let (h, w, c) = bg.dim();
    if c != 3 || fg.dim() != (h, w, 4) {
        return Err(Error::Shape(format!(
            "over: background {:?} vs foreground {:?}",
            bg.shape(),
            fg.shape()
        )));
    }
    let mut out = bg.to_owned();
    over_in_place(&mut out, fg);
    Ok(out)
}

fn over_in_place<T: Real>(acc: &mut Array3<T>, fg: ArrayView3<T>) {
    Zip::from(acc.lanes_mut(Axis(2)))
        .and(fg.lanes(Axis(2)))
        .for_each(|mut dst, src| {
            let a = src[3];
            let inv = T::one() - a;
            for ch in 0..3 {
                dst[ch] = src[ch] * a + dst[ch] * inv;
            }
        });
}

/// Left fold of [`alpha_over_frame`] over the foregrounds, frame by frame.
pub fn blend_layers<T: Real>(stack: &LayerStack<T>) -> RgbVideo<T> {
    let mut out: Array4<T> = stack.background.data.clone();
    for fi in 0..stack.background.frames() {
        let mut frame = out.index_axis(Axis(0), fi).to_owned();
        for fg in &stack.foregrounds {
            over_in_place(&mut frame, fg.frame(fi));
        }
        out.slice_mut(s![fi, .., .., ..]).assign(&frame);
    }
    RgbVideo { data: out }
}

/// Post-blend refinement stage.
pub trait Harmonizer<T: Real> {
    fn run(&self, blend: &RgbVideo<T>, masks: &FrameMasks) -> Result<RgbVideo<T>>;
}

/// Returns the blend untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHook;

impl<T: Real> Harmonizer<T> for IdentityHook {
    fn run(&self, blend: &RgbVideo<T>, _masks: &FrameMasks) -> Result<RgbVideo<T>> {
        Ok(blend.clone())
    }
}

/// Runs an external program as `sh -c '<command> "$@"' harmonize <in_dir> <out_dir>`.
///
/// `in_dir` holds `frame_####.png` (RGB) and `mask_####.png` (0/255); the
/// program must write `frame_####.png` for every frame into `out_dir` and exit 0.
#[derive(Debug, Clone)]
pub struct ExternalHook {
    pub command: String,
    /// Scratch directory; created and removed around each invocation.
    pub work_dir: PathBuf,
}

impl ExternalHook {
    pub fn new(command: impl Into<String>, work_dir: impl Into<PathBuf>) -> Self {
        ExternalHook {
            command: command.into(),
            work_dir: work_dir.into(),
        }
    }

    fn invoke(&self, input: &Path, output: &Path) -> Result<()> {
        let status = Command::new("sh")
            .arg("-c")
            .arg(format!("{} \"$@\"", self.command))
            .arg("harmonize")
            .arg(input)
            .arg(output)
            .status()
            .map_err(|e| Error::Hook(format!("cannot spawn `{}`: {e}", self.command)))?;
        if !status.success() {
            return Err(Error::Hook(format!("`{}` exited with {status}", self.command)));
        }
        Ok(())
    }
}

impl<T: Real> Harmonizer<T> for ExternalHook {
    fn run(&self, blend: &RgbVideo<T>, masks: &FrameMasks) -> Result<RgbVideo<T>> {
        let input = self.work_dir.join("in");
        let output = self.work_dir.join("out");
        let _ = std::fs::remove_dir_all(&self.work_dir);
        std::fs::create_dir_all(&output).map_err(|e| Error::io(&output, e))?;
        video::write_rgb_frames(blend, &input)?;
        video::write_masks(masks, &input, "mask")?;
        let result = self
            .invoke(&input, &output)
            .and_then(|()| video::read_rgb_frames(&output));
        let _ = std::fs::remove_dir_all(&self.work_dir);
        result
    }
}

/// Applies `hook` and checks the result keeps the blend's frame count and resolution.
pub fn harmonize<T: Real>(
    blend: &RgbVideo<T>,
    masks: &FrameMasks,
    hook: &dyn Harmonizer<T>,
) -> Result<RgbVideo<T>> {
    if masks.dim() != blend.dims() {
        return Err(Error::Shape(format!(
            "masks {:?} do not align with frames {:?}",
            masks.dim(),
            blend.dims()
        )));
    }
    let out = hook.run(blend, masks)?;
    if out.dims() != blend.dims() {
        return Err(Error::Shape(format!(
            "harmonizer returned {:?}, expected {:?}",
            out.dims(),
            blend.dims()
        )));
    }
    Ok(out)
}

/// Union of per-layer masks, frame by frame.
pub fn union_masks<'a>(masks: impl IntoIterator<Item = &'a FrameMasks>, dims: (usize, usize, usize)) -> FrameMasks {
    let mut out = Array3::from_elem(dims, false);
    for m in masks {
        Zip::from(&mut out).and(m).for_each(|o, &v| *o |= v);
    }
    out
}
