//! Raster containers, decoding, and the geometric/photometric primitives shared
//! by every stage of the pipeline.
//!
//! Two raster types exist: [`ImageBuf`] holds 8-bit pixels exactly as decoded,
//! [`GrayImage`] holds intensities in `[0, 1]` and is what the feature
//! extractors consume.

mod attack;
mod synth;

use std::path::Path;

use image::{DynamicImage, ImageFormat};
use thiserror::Error;

use crate::preprocess::CropBox;

pub use attack::{apply_attack, Attack, AttackKind, AttackSpec, Attacked, OverlayRecord};
pub use synth::{procedural_reference, smooth_background};

/// Luma weights for RGB → intensity.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("unsupported image format")]
    UnsupportedFormat,
    #[error("corrupt image stream: {0}")]
    CorruptStream(String),
    #[error("unsupported channel count {0}")]
    UnsupportedChannels(usize),
    #[error("degenerate image {width}x{height}")]
    DegenerateImage { width: usize, height: usize },
    #[error("box {box_:?} outside {width}x{height} image")]
    BoxOutOfBounds {
        box_: CropBox,
        width: usize,
        height: usize,
    },
    #[error("parameter out of range: {0}")]
    ParamOutOfRange(String),
    #[error("buffer length {len} does not match {width}x{height}x{channels}")]
    BadBufferLength {
        len: usize,
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("intensity {0} outside [0, 1]")]
    IntensityOutOfRange(f32),
    #[error("encode failed: {0}")]
    Encode(String),
    #[error(transparent)]
    EmptyBox(#[from] crate::preprocess::EmptyBox),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ImagingError> = std::result::Result<T, E>;

/// 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(ImagingError::UnsupportedChannels(channels));
        }
        if width == 0 || height == 0 {
            return Err(ImagingError::DegenerateImage { width, height });
        }
        if data.len() != width * height * channels {
            return Err(ImagingError::BadBufferLength {
                len: data.len(),
                width,
                height,
                channels,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Image where every pixel equals `pixel` (its length sets the channel count).
    pub fn filled(width: usize, height: usize, pixel: &[u8]) -> Result<Self> {
        let data = pixel
            .iter()
            .copied()
            .cycle()
            .take(width * height * pixel.len())
            .collect();
        Self::new(width, height, pixel.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn min_edge(&self) -> usize {
        self.width.min(self.height)
    }

    /// Converts to three channels, replicating gray values.
    pub fn to_rgb(&self) -> ImageBuf {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuf {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_dynamic()
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ImagingError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn encode_jpeg(&self, quality: u8) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
        self.to_dynamic()
            .write_with_encoder(encoder)
            .map_err(|e| ImagingError::Encode(e.to_string()))?;
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(w, h, self.data.clone()).expect("length checked"),
            ),
            _ => DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(w, h, self.data.clone()).expect("length checked"),
            ),
        }
    }
}

/// Single-channel intensity raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::DegenerateImage { width, height });
        }
        if data.len() != width * height {
            return Err(ImagingError::BadBufferLength {
                len: data.len(),
                width,
                height,
                channels: 1,
            });
        }
        if let Some(&v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImagingError::IntensityOutOfRange(v));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn min_edge(&self) -> usize {
        self.width.min(self.height)
    }
}

/// Operations available on both raster types.
pub trait Raster: Sized {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn flip_horizontal(&self) -> Self;
    fn crop(&self, crop_box: &CropBox) -> Result<Self>;
}

impl Raster for ImageBuf {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn flip_horizontal(&self) -> Self {
        ImageBuf {
            data: flip_rows(&self.data, self.width, self.height, self.channels),
            ..*self
        }
    }

    fn crop(&self, crop_box: &CropBox) -> Result<Self> {
        check_box(crop_box, self.width, self.height)?;
        Ok(ImageBuf {
            width: crop_box.w,
            height: crop_box.h,
            channels: self.channels,
            data: crop_rows(&self.data, self.width, self.channels, crop_box),
        })
    }
}

impl Raster for GrayImage {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn flip_horizontal(&self) -> Self {
        GrayImage {
            data: flip_rows(&self.data, self.width, self.height, 1),
            ..*self
        }
    }

    fn crop(&self, crop_box: &CropBox) -> Result<Self> {
        check_box(crop_box, self.width, self.height)?;
        Ok(GrayImage {
            width: crop_box.w,
            height: crop_box.h,
            data: crop_rows(&self.data, self.width, 1, crop_box),
        })
    }
}

/// Reverses the column order of every row.
pub fn flip_horizontal<R: Raster>(img: &R) -> R {
    img.flip_horizontal()
}

pub fn crop<R: Raster>(img: &R, crop_box: &CropBox) -> Result<R> {
    img.crop(crop_box)
}

fn check_box(b: &CropBox, width: usize, height: usize) -> Result<()> {
    if b.w == 0 || b.h == 0 || b.x + b.w > width || b.y + b.h > height {
        return Err(ImagingError::BoxOutOfBounds {
            box_: *b,
            width,
            height,
        });
    }
    Ok(())
}

fn flip_rows<T: Copy>(data: &[T], width: usize, height: usize, channels: usize) -> Vec<T> {
    let stride = width * channels;
    let mut out = Vec::with_capacity(data.len());
    for y in 0..height {
        let row = &data[y * stride..(y + 1) * stride];
        for px in row.chunks_exact(channels).rev() {
            out.extend_from_slice(px);
        }
    }
    out
}

fn crop_rows<T: Copy>(data: &[T], width: usize, channels: usize, b: &CropBox) -> Vec<T> {
    let stride = width * channels;
    let mut out = Vec::with_capacity(b.w * b.h * channels);
    for y in b.y..b.y + b.h {
        let start = y * stride + b.x * channels;
        out.extend_from_slice(&data[start..start + b.w * channels]);
    }
    out
}

/// Decodes a PNG or JPEG stream. 16-bit and float sources are reduced to 8 bits;
/// alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuf> {
    let format = image::guess_format(bytes).map_err(|_| ImagingError::UnsupportedFormat)?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(ImagingError::UnsupportedFormat);
    }
    // The JPEG decoder fills missing scan data silently; require the EOI marker.
    if format == ImageFormat::Jpeg {
        let end = bytes.iter().rposition(|&b| b != 0).unwrap_or(0);
        if end < 1 || bytes[end - 1..=end] != [0xFF, 0xD9] {
            return Err(ImagingError::CorruptStream(
                "missing JPEG end-of-image marker".into(),
            ));
        }
    }
    let decoded = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| ImagingError::CorruptStream(e.to_string()))?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let gray = matches!(
        decoded,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    );
    if gray {
        ImageBuf::new(width, height, 1, decoded.into_luma8().into_raw())
    } else {
        ImageBuf::new(width, height, 3, decoded.into_rgb8().into_raw())
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuf> {
    decode_image(&std::fs::read(path)?)
}

/// Maps an 8-bit image to intensities in `[0, 1]`, using luma weights for RGB.
pub fn to_grayscale(img: &ImageBuf) -> Result<GrayImage> {
    let data: Vec<f32> = match img.channels {
        1 => img.data.iter().map(|&v| f32::from(v) / 255.0).collect(),
        3 => img
            .data
            .chunks_exact(3)
            .map(|px| {
                let luma = LUMA_WEIGHTS[0] * f32::from(px[0])
                    + LUMA_WEIGHTS[1] * f32::from(px[1])
                    + LUMA_WEIGHTS[2] * f32::from(px[2]);
                (luma / 255.0).clamp(0.0, 1.0)
            })
            .collect(),
        c => return Err(ImagingError::UnsupportedChannels(c)),
    };
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        data,
    })
}

/// Output dimensions that bring the shorter edge to `target`, keeping the aspect ratio.
pub fn min_edge_dims(width: usize, height: usize, target: usize) -> (usize, usize) {
    let scale = |long: usize, short: usize| {
        ((long as f64 * target as f64 / short as f64).round() as usize).max(1)
    };
    if width <= height {
        (target, scale(height, width))
    } else {
        (scale(width, height), target)
    }
}

/// Rescales (up or down) so that `min(width, height) == target`, bilinearly.
pub fn resize_min_edge(img: &GrayImage, target: usize) -> Result<GrayImage> {
    if target < 16 {
        return Err(ImagingError::ParamOutOfRange(format!(
            "min-edge target {target} < 16"
        )));
    }
    if img.min_edge() < 2 {
        return Err(ImagingError::DegenerateImage {
            width: img.width,
            height: img.height,
        });
    }
    let (w, h) = min_edge_dims(img.width, img.height, target);
    Ok(resize_gray(img, w, h))
}

pub fn resize_gray(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    if width == img.width && height == img.height {
        return img.clone();
    }
    let mut data = resize_bilinear(&img.data, img.width, img.height, 1, width, height);
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    GrayImage {
        width,
        height,
        data,
    }
}

pub fn resize_image(img: &ImageBuf, width: usize, height: usize) -> ImageBuf {
    if width == img.width && height == img.height {
        return img.clone();
    }
    let src: Vec<f32> = img.data.iter().map(|&v| f32::from(v)).collect();
    let out = resize_bilinear(&src, img.width, img.height, img.channels, width, height);
    ImageBuf {
        width,
        height,
        channels: img.channels,
        data: out.into_iter().map(quantize).collect(),
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear resampling with pixel-center alignment and clamped borders.
pub(crate) fn resize_bilinear(
    src: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    out_w: usize,
    out_h: usize,
) -> Vec<f32> {
    let sx = width as f32 / out_w as f32;
    let sy = height as f32 / out_h as f32;
    let taps = |out: usize, scale: f32, limit: usize| {
        let pos = ((out as f32 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f32);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(limit - 1);
        (i0, i1, pos - i0 as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, width)).collect();
    let mut out = Vec::with_capacity(out_w * out_h * channels);
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, sy, height);
        for &(x0, x1, fx) in &xs {
            for c in 0..channels {
                let at = |xx: usize, yy: usize| src[(yy * width + xx) * channels + c];
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Bilinear sample with edge replication outside the raster.
pub(crate) fn sample_clamped(
    src: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    x: f32,
    y: f32,
    c: usize,
) -> f32 {
    let x = x.clamp(0.0, (width - 1) as f32);
    let y = y.clamp(0.0, (height - 1) as f32);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (x - x0 as f32, y - y0 as f32);
    let at = |xx: usize, yy: usize| src[(yy * width + xx) * channels + c];
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Normalized 1-D Gaussian kernel with radius `ceil(4σ)`.
pub(crate) fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (4.0 * sigma).ceil().max(1.0) as i32;
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-((i * i) as f32) / denom).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur over an interleaved f32 raster, edges replicated.
pub(crate) fn gaussian_blur(
    src: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    sigma: f32,
) -> Vec<f32> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..height {
        let row = y * width;
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0;
                for (i, &w) in kernel.iter().enumerate() {
                    let xx = (x as isize + i as isize - radius).clamp(0, width as isize - 1);
                    acc += w * src[(row + xx as usize) * channels + c];
                }
                tmp[(row + x) * channels + c] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    let stride = width * channels;
    for y in 0..height {
        for (i, &w) in kernel.iter().enumerate() {
            let yy = (y as isize + i as isize - radius).clamp(0, height as isize - 1) as usize;
            let src_row = &tmp[yy * stride..(yy + 1) * stride];
            let dst_row = &mut out[y * stride..(y + 1) * stride];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += w * s;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(w: usize, h: usize, data: &[f32]) -> GrayImage {
        GrayImage::new(w, h, data.to_vec()).unwrap()
    }

    #[test]
    fn png_round_trip_red() {
        let img = ImageBuf::filled(2, 2, &[255, 0, 0]).unwrap();
        let decoded = decode_image(&img.encode_png().unwrap()).unwrap();
        assert_eq!(decoded, img);
    }

    #[test]
    fn gray_png_keeps_one_channel() {
        let img = ImageBuf::new(3, 1, 1, vec![0, 128, 255]).unwrap();
        let decoded = decode_image(&img.encode_png().unwrap()).unwrap();
        assert_eq!(decoded.channels(), 1);
        assert_eq!(decoded.data(), &[0, 128, 255]);
    }

    #[test]
    fn sixteen_bit_png_is_reduced() {
        let raw: Vec<u16> = vec![0, 65535, 32896, 257];
        let img16 = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(2, 2, raw).unwrap();
        let mut bytes = std::io::Cursor::new(Vec::new());
        DynamicImage::ImageLuma16(img16)
            .write_to(&mut bytes, ImageFormat::Png)
            .unwrap();
        let decoded = decode_image(bytes.get_ref()).unwrap();
        assert_eq!(decoded.channels(), 1);
        assert_eq!(decoded.data(), &[0, 255, 128, 1]);
    }

    #[test]
    fn truncated_jpeg_is_corrupt() {
        let img = procedural_reference(3, 64, 64);
        let jpeg = img.encode_jpeg(90).unwrap();
        let err = decode_image(&jpeg[..jpeg.len() / 3]).unwrap_err();
        assert!(matches!(err, ImagingError::CorruptStream(_)), "{err:?}");
    }

    #[test]
    fn unknown_bytes_are_unsupported() {
        let err = decode_image(b"GIF89a....").unwrap_err();
        assert!(matches!(err, ImagingError::UnsupportedFormat));
        assert!(matches!(
            decode_image(b"hello"),
            Err(ImagingError::UnsupportedFormat)
        ));
    }

    #[test]
    fn grayscale_weights() {
        let white = ImageBuf::filled(4, 3, &[255, 255, 255]).unwrap();
        assert!(to_grayscale(&white)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-6));
        let red = ImageBuf::filled(1, 1, &[255, 0, 0]).unwrap();
        assert!((to_grayscale(&red).unwrap().get(0, 0) - 0.299).abs() < 1e-6);
        let g = ImageBuf::filled(1, 1, &[128]).unwrap();
        assert!((to_grayscale(&g).unwrap().get(0, 0) - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn bad_channel_count_rejected() {
        assert!(matches!(
            ImageBuf::new(1, 1, 4, vec![0; 4]),
            Err(ImagingError::UnsupportedChannels(4))
        ));
    }

    #[test]
    fn resize_min_edge_cases() {
        let img = GrayImage::filled(600, 900, 0.5).unwrap();
        let out = resize_min_edge(&img, 300).unwrap();
        assert_eq!((out.width(), out.height()), (300, 450));

        let img = GrayImage::filled(300, 450, 0.25).unwrap();
        assert_eq!(resize_min_edge(&img, 300).unwrap(), img);

        let img = GrayImage::filled(150, 200, 0.5).unwrap();
        let out = resize_min_edge(&img, 300).unwrap();
        assert_eq!((out.width(), out.height()), (300, 400));

        let thin = GrayImage::filled(1, 50, 0.5).unwrap();
        assert!(matches!(
            resize_min_edge(&thin, 300),
            Err(ImagingError::DegenerateImage { .. })
        ));
        assert!(resize_min_edge(&img, 8).is_err());
    }

    #[test]
    fn flip_examples() {
        let row = gray(2, 1, &[0.1, 0.9]);
        assert_eq!(flip_horizontal(&row).data(), &[0.9, 0.1]);
        let sym = gray(3, 1, &[0.2, 0.7, 0.2]);
        assert_eq!(flip_horizontal(&sym), sym);
        let rgb = ImageBuf::new(2, 1, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(flip_horizontal(&rgb).data(), &[4, 5, 6, 1, 2, 3]);
    }

    #[test]
    fn crop_examples() {
        let data: Vec<f32> = (0..9).map(|i| i as f32 / 10.0).collect();
        let img = gray(3, 3, &data);
        let full = CropBox::new(0, 0, 3, 3).unwrap();
        assert_eq!(crop(&img, &full).unwrap(), img);
        let centre = crop(&img, &CropBox::new(1, 1, 1, 1).unwrap()).unwrap();
        assert_eq!(centre.data(), &[0.4]);
        let wide = CropBox::new(1, 0, 3, 1).unwrap();
        assert!(matches!(
            crop(&img, &wide),
            Err(ImagingError::BoxOutOfBounds { .. })
        ));
    }

    #[test]
    fn blur_preserves_constant() {
        let src = vec![0.3f32; 20 * 10];
        let out = gaussian_blur(&src, 20, 10, 1, 2.0);
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    proptest! {
        #[test]
        fn flip_is_involution(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
            let img = ImageBuf::new(w, h, 3, data).unwrap();
            prop_assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
            let g = to_grayscale(&ImageBuf::new(w, h, 1, (0..w * h).map(|_| rng.gen()).collect()).unwrap()).unwrap();
            prop_assert_eq!(flip_horizontal(&flip_horizontal(&g)), g);
        }

        #[test]
        fn resize_hits_target(w in 2usize..400, h in 2usize..400, target in 16usize..320) {
            let img = GrayImage::filled(w, h, 0.5).unwrap();
            let out = resize_min_edge(&img, target).unwrap();
            prop_assert_eq!(out.min_edge(), target);
            let expect = (w.max(h) as f64 * target as f64 / w.min(h) as f64).round() as usize;
            prop_assert_eq!(out.width().max(out.height()), expect);
        }

        #[test]
        fn grayscale_in_unit_range(px in proptest::collection::vec(any::<u8>(), 3..=300)) {
            let n = px.len() / 3;
            let img = ImageBuf::new(n, 1, 3, px[..n * 3].to_vec()).unwrap();
            let g = to_grayscale(&img).unwrap();
            prop_assert!(g.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
