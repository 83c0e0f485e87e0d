//! Transparent-latent adjustment, the two-decoder RGBA path, and alpha cleanup.
//!
//! Decoding is factored as `Î = D*(x_a)` followed by `(rgb, α) = D(Î, x_a)`,
//! where `x_a = x + offset(x)`. The toy codec keeps every stage affine and
//! per-pixel, with latents upsampled to image resolution by nearest neighbour.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{clamp01, Real};
use crate::rng;
use crate::video::{FrameMasks, RgbVideo, RgbaVideo};

#[derive(Debug, Clone, PartialEq)]
pub struct TransparencyCodec<T> {
    /// Offset module `x·W + b`: `[ch, ch]` and `[ch]`.
    pub offset_weight: Array2<T>,
    pub offset_bias: Array1<T>,
    /// Base decoder `D*`: latent `[ch]` → RGB.
    pub base_weight: Array2<T>,
    pub base_bias: Array1<T>,
    /// Transparent decoder `D`: `[rgb(3), latent(ch)]` → RGBA.
    pub rgba_weight: Array2<T>,
    pub rgba_bias: Array1<T>,
    /// Image pixels per latent cell along each axis.
    pub scale: usize,
}

impl<T: Real> TransparencyCodec<T> {
    pub fn seeded(seed: u64, channels: usize, scale: usize) -> Self {
        let mut r = rng::stream(seed, rng::streams::CODEC_WEIGHTS);
        let offset_weight = rng::normal(&mut r, (channels, channels), 0.1);
        let offset_bias = rng::vector(&mut r, channels, 0.05);
        let base_weight = rng::projection(&mut r, channels, 3);
        let base_bias = Array1::from_elem(3, T::lit(0.5));
        let rgba_weight = rng::projection(&mut r, 3 + channels, 4);
        let mut rgba_bias = Array1::from_elem(4, T::zero());
        // alpha leans opaque-or-transparent around a mid bias
        rgba_bias[3] = T::lit(0.5);
        TransparencyCodec {
            offset_weight,
            offset_bias,
            base_weight,
            base_bias,
            rgba_weight,
            rgba_bias,
            scale,
        }
    }

    /// The same codec with the latent offset disabled (`x_a = x`).
    pub fn without_offset(mut self) -> Self {
        self.offset_weight.fill(T::zero());
        self.offset_bias.fill(T::zero());
        self
    }

    pub fn channels(&self) -> usize {
        self.offset_weight.nrows()
    }

    fn check_latent(&self, x: &Array4<T>) -> Result<()> {
        if x.shape()[3] != self.channels() {
            return Err(Error::Shape(format!(
                "latent has {} channels, codec expects {}",
                x.shape()[3],
                self.channels()
            )));
        }
        Ok(())
    }

    /// The offset for a latent plane `[f, h, w, ch]`.
    pub fn offset(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.check_latent(x)?;
        let mut out = crate::attention::project(x, &self.offset_weight);
        out += &self.offset_bias;
        Ok(out)
    }

    /// `x + offset(x)`.
    pub fn adjust_latent(&self, x: &Array4<T>) -> Result<Array4<T>> {
        Ok(x + &self.offset(x)?)
    }

    fn base_rgb_cell(&self, z: ArrayView1<T>) -> [T; 3] {
        let v = z.dot(&self.base_weight) + &self.base_bias;
        [clamp01(v[0]), clamp01(v[1]), clamp01(v[2])]
    }

    /// `D*`: latent `[f, h, w, ch]` → RGB video at `scale×` resolution.
    pub fn decode_rgb(&self, x: &Array4<T>) -> Result<RgbVideo<T>> {
        self.check_latent(x)?;
        let (f, h, w, _) = x.dim();
        let k = self.scale;
        let mut out = Array4::zeros((f, h * k, w * k, 3));
        for fi in 0..f {
            for r in 0..h {
                for c in 0..w {
                    let rgb = self.base_rgb_cell(x.slice(s![fi, r, c, ..]));
                    let mut block = out.slice_mut(s![fi, r * k..(r + 1) * k, c * k..(c + 1) * k, ..]);
                    for mut px in block.lanes_mut(Axis(2)) {
                        px[0] = rgb[0];
                        px[1] = rgb[1];
                        px[2] = rgb[2];
                    }
                }
            }
        }
        RgbVideo::new(out)
    }

    /// `(rgb, α) = D(D*(x_a), x_a)`, clamped to `[0, 1]`.
    pub fn decode_rgba(&self, x_a: &Array4<T>) -> Result<RgbaVideo<T>> {
        let base = self.decode_rgb(x_a)?;
        let (f, hh, ww) = base.dims();
        let ch = self.channels();
        let k = self.scale;
        let mut out = Array4::zeros((f, hh, ww, 4));
        let mut input = Array1::<T>::zeros(3 + ch);
        for fi in 0..f {
            for y in 0..hh {
                for x in 0..ww {
                    input
                        .slice_mut(s![..3])
                        .assign(&base.data.slice(s![fi, y, x, ..]));
                    input
                        .slice_mut(s![3..])
                        .assign(&x_a.slice(s![fi, y / k, x / k, ..]));
                    let v = input.dot(&self.rgba_weight) + &self.rgba_bias;
                    for c in 0..4 {
                        out[[fi, y, x, c]] = clamp01(v[c]);
                    }
                }
            }
        }
        RgbaVideo::new(out)
    }
}

/// Alpha cleanup thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct AlphaThresholds<T> {
    /// Alpha strictly below this is reset to 0.
    pub low: T,
    /// Alpha at or above this is foreground.
    pub mask: T,
}

impl<T: Real> Default for AlphaThresholds<T> {
    fn default() -> Self {
        AlphaThresholds {
            low: T::lit(16.0 / 255.0),
            mask: T::lit(0.5),
        }
    }
}

/// Zeroes near-transparent residue and returns `(masks, cleaned video)`.
pub fn extract_foreground_mask<T: Real>(
    video: &RgbaVideo<T>,
    thresholds: AlphaThresholds<T>,
) -> Result<(FrameMasks, RgbaVideo<T>)> {
    let AlphaThresholds { low, mask } = thresholds;
    if !(T::zero() <= low && low <= mask && mask <= T::one()) {
        return Err(Error::Invalid(format!(
            "thresholds must satisfy 0 <= low ({low}) <= mask ({mask}) <= 1"
        )));
    }
    let mut cleaned = video.clone();
    let (f, h, w) = video.dims();
    let mut masks = Array3::from_elem((f, h, w), false);
    for ((fi, y, x), m) in masks.indexed_iter_mut() {
        let a = &mut cleaned.data[[fi, y, x, 3]];
        if *a < low {
            *a = T::zero();
        }
        *m = *a >= mask;
    }
    Ok((masks, cleaned))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn hand_codec() -> TransparencyCodec<f64> {
        TransparencyCodec {
            offset_weight: array![[0.5, 0.0], [0.0, -0.5]],
            offset_bias: array![0.1, 0.2],
            base_weight: array![[0.1, 0.2, 0.3], [0.0, -0.1, 0.2]],
            base_bias: array![0.5, 0.5, 0.5],
            rgba_weight: array![
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 0.5],
                [0.0, 0.0, 0.0, 0.25],
            ],
            rgba_bias: array![0.0, 0.0, 0.0, 0.5],
            scale: 1,
        }
    }

    #[test]
    fn zero_offset_is_identity() {
        let codec = TransparencyCodec::<f64>::seeded(3, 4, 2).without_offset();
        let x = Array4::from_shape_fn((2, 2, 2, 4), |(a, b, c, d)| (a + 2 * b + 3 * c + 5 * d) as f64 * 0.1);
        assert_eq!(codec.adjust_latent(&x).unwrap(), x);
    }

    #[test]
    fn zero_latent_gives_offset_of_zero() {
        let codec = TransparencyCodec::<f64>::seeded(11, 4, 1);
        let x = Array4::zeros((1, 2, 2, 4));
        let xa = codec.adjust_latent(&x).unwrap();
        // direct re-evaluation: offset(0) = 0·W + b = b
        for lane in xa.lanes(Axis(3)) {
            assert_eq!(lane, codec.offset_bias);
        }
        assert_eq!(xa, codec.adjust_latent(&x).unwrap());
    }

    #[test]
    fn constant_latent_decodes_to_constant_frames() {
        let codec = TransparencyCodec::<f64>::seeded(5, 4, 4);
        let x = Array4::from_elem((3, 2, 2, 4), 0.3);
        let v = codec.decode_rgba(&x).unwrap();
        assert_eq!(v.dims(), (3, 8, 8));
        for fi in 0..3 {
            let first = v.data.slice(s![fi, 0, 0, ..]).to_owned();
            for px in v.data.slice(s![fi, .., .., ..]).lanes(Axis(2)) {
                assert_eq!(px, first);
            }
        }
    }

    #[test]
    fn hand_computed_affine_decode() {
        let codec = hand_codec();
        let xa = Array4::from_shape_vec((1, 2, 2, 2), vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0, -1.0, 0.5]).unwrap();
        let v = codec.decode_rgba(&xa).unwrap();
        let expect = |z0: f64, z1: f64| {
            let rgb = [
                (0.5 + 0.1 * z0).clamp(0.0, 1.0),
                (0.5 + 0.2 * z0 - 0.1 * z1).clamp(0.0, 1.0),
                (0.5 + 0.3 * z0 + 0.2 * z1).clamp(0.0, 1.0),
            ];
            let a = (0.5 + 0.5 * z0 + 0.25 * z1).clamp(0.0, 1.0);
            [rgb[0], rgb[1], rgb[2], a]
        };
        for (r, c, z0, z1) in [(0, 0, 1.0, 0.0), (0, 1, 0.0, 1.0), (1, 0, 2.0, 2.0), (1, 1, -1.0, 0.5)] {
            let got = v.data.slice(s![0, r, c, ..]);
            for (g, w) in got.iter().zip(expect(z0, z1)) {
                assert!((g - w).abs() < 1e-12, "({r},{c}) {g} vs {w}");
            }
        }
    }

    #[test]
    fn alpha_rules() {
        let mut data = Array4::from_elem((1, 1, 3, 4), 0.7);
        data[[0, 0, 0, 3]] = 10.0 / 255.0;
        data[[0, 0, 1, 3]] = 1.0;
        data[[0, 0, 2, 3]] = 0.4;
        let v = RgbaVideo::new(data).unwrap();
        let (m, c) = extract_foreground_mask(&v, AlphaThresholds::default()).unwrap();
        assert_eq!(c.data[[0, 0, 0, 3]], 0.0);
        assert!(!m[[0, 0, 0]]);
        assert_eq!(c.data[[0, 0, 1, 3]], 1.0);
        assert!(m[[0, 0, 1]]);
        assert_eq!(c.data[[0, 0, 2, 3]], 0.4);
        assert!(!m[[0, 0, 2]]);
        // rgb untouched
        assert_eq!(c.data[[0, 0, 0, 0]], 0.7);
    }

    #[test]
    fn bad_thresholds_rejected() {
        let v = RgbaVideo::<f64>::filled(1, 1, 1, 0.5);
        let t = AlphaThresholds { low: 0.6, mask: 0.5 };
        assert!(extract_foreground_mask(&v, t).is_err());
    }
}
