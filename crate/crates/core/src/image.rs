//! RGB raster type, PNG/JPEG I/O, resizing and network preprocessing.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};

use crate::error::{Error, Result};
use crate::nn::reflect;
use crate::tensor::{Real, Tensor};

/// ImageNet channel statistics used to normalize encoder inputs.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// H×W×3 RGB raster, interleaved, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
    /// Bit depth of the source file per channel.
    pub bit_depth: u8,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3, "image buffer size");
        Self {
            height,
            width,
            data,
            bit_depth: 8,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Interleaved RGB samples.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let bit_depth = match img {
            DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_) => 16,
            _ => 8,
        };
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        let mut out = Self::new(h as usize, w as usize, rgb.into_raw());
        out.bit_depth = bit_depth;
        out
    }

    /// Quantize to 8 bits per channel (round half up, values clamped to [0, 1]).
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    /// Write an 8-bit PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Bilinear resize (triangle filter).
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let buf = image::Rgb32FImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer size");
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        let mut img = Self::new(height, width, out.into_raw());
        img.bit_depth = self.bit_depth;
        img
    }

    /// Resize so the shorter side equals `side`, preserving aspect ratio.
    pub fn resize_min_side(&self, side: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let (nh, nw) = if h <= w {
            (side, ((w * side) as f64 / h as f64).round().max(side as f64) as usize)
        } else {
            (((h * side) as f64 / w as f64).round().max(side as f64) as usize, side)
        };
        self.resize(nh, nw)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of bounds");
        let mut img = Self::from_fn(height, width, |y, x| self.pixel(top + y, left + x));
        img.bit_depth = self.bit_depth;
        img
    }

    pub fn clamped(&self) -> Self {
        let mut img = self.clone();
        img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        img
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.pixel(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.pixel(self.height - 1 - y, x))
    }

    /// Planar 3×H×W copy of the raw [0, 1] values.
    pub fn to_planar<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(3, self.height, self.width, |c, y, x| {
            T::from_f64_lossy(self.data[(y * self.width + x) * 3 + c] as f64)
        })
    }

    pub fn from_planar<T: Real>(t: &Tensor<T>) -> Self {
        assert_eq!(t.channels(), 3, "planar image needs 3 channels");
        Self::from_fn(t.height(), t.width(), |y, x| {
            [0, 1, 2].map(|c| t.at(c, y, x).as_f64() as f32)
        })
    }
}

/// ImageNet normalization of a planar [0, 1] image: `(x - mean) / std`.
pub fn normalize<T: Real>(planar: &Tensor<T>) -> Tensor<T> {
    let mut out = planar.clone();
    for c in 0..3 {
        let m = T::from_f64_lossy(IMAGENET_MEAN[c]);
        let s = T::from_f64_lossy(IMAGENET_STD[c]);
        out.channel_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    out
}

/// Chain rule through [`normalize`].
pub fn normalize_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let mut out = grad.clone();
    for c in 0..3 {
        let s = T::from_f64_lossy(IMAGENET_STD[c]);
        out.channel_mut(c).iter_mut().for_each(|v| *v = *v / s);
    }
    out
}

/// Inverse of [`normalize`]: `x * std + mean`.
pub fn denormalize<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for c in 0..3 {
        let m = T::from_f64_lossy(IMAGENET_MEAN[c]);
        let s = T::from_f64_lossy(IMAGENET_STD[c]);
        out.channel_mut(c).iter_mut().for_each(|v| *v = *v * s + m);
    }
    out
}

/// Chain rule through [`denormalize`].
pub fn denormalize_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let mut out = grad.clone();
    for c in 0..3 {
        let s = T::from_f64_lossy(IMAGENET_STD[c]);
        out.channel_mut(c).iter_mut().for_each(|v| *v *= s);
    }
    out
}

/// Reflect-pad the bottom and right edges so both sides become multiples of `multiple`.
pub fn pad_to_multiple<T: Real>(x: &Tensor<T>, multiple: usize) -> Tensor<T> {
    let (h, w) = (x.height(), x.width());
    let (ph, pw) = (h.next_multiple_of(multiple), w.next_multiple_of(multiple));
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn(x.channels(), ph, pw, |c, y, xx| {
        x.at(c, reflect(y as isize, h), reflect(xx as isize, w))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, |y, x| [y as f32 / 255.0, x as f32 / 255.0, 1.0]);
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back.height(), 5);
        assert_eq!(back.width(), 7);
        assert_eq!(back.bit_depth, 8);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn min_side_resize_keeps_aspect() {
        let img = Image::filled(40, 80, [0.2, 0.4, 0.6]);
        let r = img.resize_min_side(16);
        assert_eq!((r.height(), r.width()), (16, 32));
        assert!((r.pixel(3, 3)[1] - 0.4).abs() < 1e-5);
    }

    #[test]
    fn reflect_padding_extends_to_multiple() {
        let t = Tensor::<f32>::from_fn(1, 3, 5, |_, y, x| (y * 10 + x) as f32);
        let p = pad_to_multiple(&t, 4);
        assert_eq!(p.shape(), [1, 4, 8]);
        // row 3 reflects row 1, column 5 reflects column 3
        assert_eq!(p.at(0, 3, 0), 10.0);
        assert_eq!(p.at(0, 0, 5), 3.0);
        assert_eq!(p.crop(3, 5), t);
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let t = Tensor::<f64>::from_fn(3, 2, 2, |c, y, x| (c + y * 2 + x) as f64 / 7.0);
        let back = denormalize(&normalize(&t));
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let g = Tensor::<f64>::from_fn(3, 1, 1, |_, _, _| 1.0);
        assert!((denormalize_backward(&g).at(1, 0, 0) - 0.224).abs() < 1e-12);
    }

    #[test]
    fn normalize_backward_is_the_adjoint_scale() {
        let g = Tensor::<f64>::from_fn(3, 1, 1, |_, _, _| 1.0);
        let b = normalize_backward(&g);
        assert!((b.at(0, 0, 0) - 1.0 / 0.229).abs() < 1e-12);
        assert!((b.at(2, 0, 0) - 1.0 / 0.225).abs() < 1e-12);
    }
}
