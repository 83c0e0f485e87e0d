//! Frame sequences and their PNG representation.

use std::path::{Path, PathBuf};

use image::{GenericImageView, GrayImage, ImageBuffer, Luma, Rgb, Rgba};
use ndarray::{Array3, Array4, ArrayView3};

use crate::error::{Error, Result};
use crate::real::{clamp01, Real};

/// Opaque video `[frames, height, width, 3]`, channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbVideo<T> {
    pub data: Array4<T>,
}

/// Straight-alpha video `[frames, height, width, 4]`, channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbaVideo<T> {
    pub data: Array4<T>,
}

/// Per-frame binary masks `[frames, height, width]`.
pub type FrameMasks = Array3<bool>;

macro_rules! video_common {
    ($ty:ident, $channels:expr) => {
        impl<T: Real> $ty<T> {
            pub const CHANNELS: usize = $channels;

            pub fn new(data: Array4<T>) -> Result<Self> {
                if data.shape()[3] != $channels {
                    return Err(Error::Shape(format!(
                        "{} expects {} channels, got {:?}",
                        stringify!($ty),
                        $channels,
                        data.shape()
                    )));
                }
                Ok($ty {
                    data: data.as_standard_layout().into_owned(),
                })
            }

            pub fn filled(frames: usize, height: usize, width: usize, value: T) -> Self {
                $ty {
                    data: Array4::from_elem((frames, height, width, $channels), value),
                }
            }

            pub fn frames(&self) -> usize {
                self.data.shape()[0]
            }

            pub fn height(&self) -> usize {
                self.data.shape()[1]
            }

            pub fn width(&self) -> usize {
                self.data.shape()[2]
            }

            pub fn frame(&self, i: usize) -> ArrayView3<'_, T> {
                self.data.index_axis(ndarray::Axis(0), i)
            }

            /// `(frames, height, width)`
            pub fn dims(&self) -> (usize, usize, usize) {
                (self.frames(), self.height(), self.width())
            }
        }
    };
}

video_common!(RgbVideo, 3);
video_common!(RgbaVideo, 4);

/// Maps a unit-interval value to an 8-bit channel.
pub fn to_u8<T: Real>(v: T) -> u8 {
    (clamp01(v) * T::lit(255.0)).round().to_u8().unwrap_or(0)
}

pub fn from_u8<T: Real>(v: u8) -> T {
    T::lit(v as f64) / T::lit(255.0)
}

pub fn frame_path(dir: &Path, stem: &str, index: usize) -> PathBuf {
    dir.join(format!("{stem}_{:04}.png", index + 1))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn save<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|cause| Error::Image {
            path: path.to_path_buf(),
            cause,
        })
}

/// Writes `frame_0001.png`, `frame_0002.png`, ... as 8-bit RGB.
pub fn write_rgb_frames<T: Real>(video: &RgbVideo<T>, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let (f, h, w) = video.dims();
    for i in 0..f {
        let frame = video.frame(i);
        let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = frame.slice(ndarray::s![y as usize, x as usize, ..]);
            Rgb([to_u8(px[0]), to_u8(px[1]), to_u8(px[2])])
        });
        save(&img, &frame_path(dir, "frame", i))?;
    }
    Ok(())
}

/// Writes 8-bit RGBA frames.
pub fn write_rgba_frames<T: Real>(video: &RgbaVideo<T>, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let (f, h, w) = video.dims();
    for i in 0..f {
        let frame = video.frame(i);
        let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = frame.slice(ndarray::s![y as usize, x as usize, ..]);
            Rgba([to_u8(px[0]), to_u8(px[1]), to_u8(px[2]), to_u8(px[3])])
        });
        save(&img, &frame_path(dir, "frame", i))?;
    }
    Ok(())
}

/// Writes single-channel masks (0 / 255) as `{stem}_0001.png`, ...
pub fn write_masks(masks: &FrameMasks, dir: &Path, stem: &str) -> Result<()> {
    ensure_dir(dir)?;
    let (f, h, w) = masks.dim();
    for i in 0..f {
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([if masks[[i, y as usize, x as usize]] { 255 } else { 0 }])
        });
        save(&img, &frame_path(dir, stem, i))?;
    }
    Ok(())
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|cause| Error::Image {
        path: path.to_path_buf(),
        cause,
    })
}

/// Counts consecutive `{stem}_0001.png`, `{stem}_0002.png`, ... in `dir`.
pub fn count_frames(dir: &Path, stem: &str) -> usize {
    (0..).take_while(|&i| frame_path(dir, stem, i).is_file()).count()
}

pub fn read_rgb_frames<T: Real>(dir: &Path) -> Result<RgbVideo<T>> {
    let images = read_all(dir, "frame")?;
    let (w, h) = images[0].dimensions();
    let mut data = Array4::zeros((images.len(), h as usize, w as usize, 3));
    for (i, img) in images.iter().enumerate() {
        let rgb = img.to_rgb8();
        check_dims(&rgb, w, h, &frame_path(dir, "frame", i))?;
        for (x, y, p) in rgb.enumerate_pixels() {
            for ch in 0..3 {
                data[[i, y as usize, x as usize, ch]] = from_u8(p[ch]);
            }
        }
    }
    RgbVideo::new(data)
}

pub fn read_rgba_frames<T: Real>(dir: &Path) -> Result<RgbaVideo<T>> {
    let images = read_all(dir, "frame")?;
    let (w, h) = images[0].dimensions();
    let mut data = Array4::zeros((images.len(), h as usize, w as usize, 4));
    for (i, img) in images.iter().enumerate() {
        let rgba = img.to_rgba8();
        check_dims(&rgba, w, h, &frame_path(dir, "frame", i))?;
        for (x, y, p) in rgba.enumerate_pixels() {
            for ch in 0..4 {
                data[[i, y as usize, x as usize, ch]] = from_u8(p[ch]);
            }
        }
    }
    RgbaVideo::new(data)
}

pub fn read_masks(dir: &Path, stem: &str) -> Result<FrameMasks> {
    let images = read_all(dir, stem)?;
    let (w, h) = images[0].dimensions();
    let mut masks = Array3::from_elem((images.len(), h as usize, w as usize), false);
    for (i, img) in images.iter().enumerate() {
        let gray = img.to_luma8();
        check_dims(&gray, w, h, &frame_path(dir, stem, i))?;
        for (x, y, p) in gray.enumerate_pixels() {
            masks[[i, y as usize, x as usize]] = p[0] >= 128;
        }
    }
    Ok(masks)
}

fn read_all(dir: &Path, stem: &str) -> Result<Vec<image::DynamicImage>> {
    let n = count_frames(dir, stem);
    if n == 0 {
        return Err(Error::Shape(format!(
            "{}: no {stem}_####.png files",
            dir.display()
        )));
    }
    (0..n).map(|i| open(&frame_path(dir, stem, i))).collect()
}

fn check_dims<P: image::Pixel>(img: &ImageBuffer<P, Vec<P::Subpixel>>, w: u32, h: u32, path: &Path) -> Result<()> {
    if img.dimensions() != (w, h) {
        return Err(Error::Shape(format!(
            "{}: {:?} differs from first frame {:?}",
            path.display(),
            img.dimensions(),
            (w, h)
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_mapping() {
        assert_eq!(to_u8(0.0f64), 0);
        assert_eq!(to_u8(1.0f64), 255);
        assert_eq!(to_u8(2.0f64), 255);
        assert_eq!(to_u8(0.5f32), 128);
        assert_eq!(to_u8(from_u8::<f64>(37)), 37);
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array4::from_shape_fn((2, 3, 4, 4), |(f, y, x, c)| ((f + y * 3 + x * 5 + c * 7) % 256) as f64 / 255.0);
        let v = RgbaVideo::new(data).unwrap();
        write_rgba_frames(&v, dir.path()).unwrap();
        assert_eq!(count_frames(dir.path(), "frame"), 2);
        let back: RgbaVideo<f64> = read_rgba_frames(dir.path()).unwrap();
        assert!(back.data.iter().zip(v.data.iter()).all(|(a, b)| (a - b).abs() < 1e-12));

        let masks = Array3::from_shape_fn((2, 3, 4), |(f, y, x)| (f + y + x) % 2 == 0);
        write_masks(&masks, dir.path(), "mask").unwrap();
        assert_eq!(read_masks(dir.path(), "mask").unwrap(), masks);
    }

    #[test]
    fn wrong_channel_count_rejected() {
        assert!(RgbVideo::new(Array4::<f64>::zeros((1, 1, 1, 4))).is_err());
    }
}
