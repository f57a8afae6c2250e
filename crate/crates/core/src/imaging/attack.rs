use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    gaussian_blur, quantize, resize_image, sample_clamped, smooth_background, ImageBuf,
    ImagingError, Raster, Result, LUMA_WEIGHTS,
};
use crate::preprocess::CropBox;

/// Largest background edge an overlay attack may request.
const MAX_OVERLAY_EDGE: usize = 4096;

/// One image edit with its parameters. Serialized with a `kind` tag, so the
/// manifest's `params_json` column is this object minus the tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Attack {
    /// Keep the sub-rectangle given as fractions of width/height. `w`, `h` in (0, 1].
    Crop { x: f32, y: f32, w: f32, h: f32 },
    /// Counter-clockwise rotation about the centre, canvas size kept. Degrees in [-180, 180].
    Rotate { degrees: f32 },
    FlipH,
    /// σ in (0, 10] pixels.
    GaussianBlur { sigma: f32 },
    /// Quality in [1, 100].
    JpegRecompress { quality: u8 },
    /// Additive shift as a fraction of full scale, in [-1, 1].
    Brightness { delta: f32 },
    /// Gain about mid-gray, in [0, 4].
    Contrast { factor: f32 },
    Grayscale,
    /// Border of `frac` × width (left/right) and `frac` × height (top/bottom); frac in [0, 1].
    Pad { frac: f32, value: u8 },
    /// Uniform rescale, scale in [0.1, 4].
    Resize { scale: f32 },
    /// Paste the (resized) image onto a synthetic background at (x, y).
    OverlayPaste {
        bg_width: usize,
        bg_height: usize,
        fg_width: usize,
        fg_height: usize,
        x: usize,
        y: usize,
    },
    /// Block averaging with square blocks of `block` pixels, in [2, 64].
    Pixelate { block: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Crop,
    Rotate,
    FlipH,
    GaussianBlur,
    JpegRecompress,
    Brightness,
    Contrast,
    Grayscale,
    Pad,
    Resize,
    OverlayPaste,
    Pixelate,
}

impl AttackKind {
    pub const ALL: [AttackKind; 12] = [
        AttackKind::Crop,
        AttackKind::Rotate,
        AttackKind::FlipH,
        AttackKind::GaussianBlur,
        AttackKind::JpegRecompress,
        AttackKind::Brightness,
        AttackKind::Contrast,
        AttackKind::Grayscale,
        AttackKind::Pad,
        AttackKind::Resize,
        AttackKind::OverlayPaste,
        AttackKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Crop => "crop",
            AttackKind::Rotate => "rotate",
            AttackKind::FlipH => "flip-h",
            AttackKind::GaussianBlur => "gaussian-blur",
            AttackKind::JpegRecompress => "jpeg-recompress",
            AttackKind::Brightness => "brightness",
            AttackKind::Contrast => "contrast",
            AttackKind::Grayscale => "grayscale",
            AttackKind::Pad => "pad",
            AttackKind::Resize => "resize",
            AttackKind::OverlayPaste => "overlay-paste",
            AttackKind::Pixelate => "pixelate",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = ImagingError;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ImagingError::ParamOutOfRange(format!("unknown attack kind `{s}`")))
    }
}

impl Attack {
    pub fn kind(&self) -> AttackKind {
        match self {
            Attack::Crop { .. } => AttackKind::Crop,
            Attack::Rotate { .. } => AttackKind::Rotate,
            Attack::FlipH => AttackKind::FlipH,
            Attack::GaussianBlur { .. } => AttackKind::GaussianBlur,
            Attack::JpegRecompress { .. } => AttackKind::JpegRecompress,
            Attack::Brightness { .. } => AttackKind::Brightness,
            Attack::Contrast { .. } => AttackKind::Contrast,
            Attack::Grayscale => AttackKind::Grayscale,
            Attack::Pad { .. } => AttackKind::Pad,
            Attack::Resize { .. } => AttackKind::Resize,
            Attack::OverlayPaste { .. } => AttackKind::OverlayPaste,
            Attack::Pixelate { .. } => AttackKind::Pixelate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(ImagingError::ParamOutOfRange(what));
        let unit = |v: f32| (0.0..=1.0).contains(&v);
        match *self {
            Attack::Crop { x, y, w, h } => {
                if !(unit(x) && unit(y) && w > 0.0 && h > 0.0 && x + w <= 1.0 + 1e-6)
                    || y + h > 1.0 + 1e-6
                {
                    return bad(format!("crop fractions x={x} y={y} w={w} h={h}"));
                }
            }
            Attack::Rotate { degrees } if !(-180.0..=180.0).contains(&degrees) => {
                return bad(format!("rotate degrees {degrees}"));
            }
            Attack::GaussianBlur { sigma } if !(sigma > 0.0 && sigma <= 10.0) => {
                return bad(format!("blur sigma {sigma}"));
            }
            Attack::JpegRecompress { quality } if !(1..=100).contains(&quality) => {
                return bad(format!("jpeg quality {quality}"));
            }
            Attack::Brightness { delta } if !(-1.0..=1.0).contains(&delta) => {
                return bad(format!("brightness delta {delta}"));
            }
            Attack::Contrast { factor } if !(0.0..=4.0).contains(&factor) => {
                return bad(format!("contrast factor {factor}"));
            }
            Attack::Pad { frac, .. } if !unit(frac) => {
                return bad(format!("pad fraction {frac}"));
            }
            Attack::Resize { scale } if !(0.1..=4.0).contains(&scale) => {
                return bad(format!("resize scale {scale}"));
            }
            Attack::OverlayPaste {
                bg_width,
                bg_height,
                fg_width,
                fg_height,
                x,
                y,
            } => {
                if bg_width == 0
                    || bg_height == 0
                    || bg_width > MAX_OVERLAY_EDGE
                    || bg_height > MAX_OVERLAY_EDGE
                    || fg_width == 0
                    || fg_height == 0
                    || x + fg_width > bg_width
                    || y + fg_height > bg_height
                {
                    return bad(format!(
                        "overlay {fg_width}x{fg_height} at ({x},{y}) on {bg_width}x{bg_height}"
                    ));
                }
            }
            Attack::Pixelate { block } if !(2..=64).contains(&block) => {
                return bad(format!("pixelate block {block}"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// An attack plus the seed feeding any randomness it needs (overlay backgrounds).
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub attack: Attack,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(attack: Attack, seed: u64) -> Self {
        Self { attack, seed }
    }

    pub fn kind(&self) -> AttackKind {
        self.attack.kind()
    }

    /// Rebuilds a spec from the manifest columns `attack_kind`, `params_json`, `seed`.
    pub fn from_parts(kind: &str, params_json: &str, seed: u64) -> Result<Self> {
        let kind: AttackKind = kind.trim().parse()?;
        let params = if params_json.trim().is_empty() {
            serde_json::Value::Object(Default::default())
        } else {
            serde_json::from_str(params_json)
                .map_err(|e| ImagingError::ParamOutOfRange(format!("params json: {e}")))?
        };
        let serde_json::Value::Object(mut map) = params else {
            return Err(ImagingError::ParamOutOfRange(
                "params json must be an object".into(),
            ));
        };
        map.insert("kind".into(), kind.name().into());
        let attack: Attack = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| ImagingError::ParamOutOfRange(format!("{kind} params: {e}")))?;
        attack.validate()?;
        Ok(Self { attack, seed })
    }

    /// Inverse of [`AttackSpec::from_parts`]: `(kind, params_json)`.
    pub fn to_parts(&self) -> (String, String) {
        let mut value = serde_json::to_value(&self.attack).expect("attack serializes");
        if let serde_json::Value::Object(map) = &mut value {
            map.remove("kind");
        }
        (self.kind().name().to_string(), value.to_string())
    }
}

/// Ground truth for an overlay attack: where the foreground landed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayRecord {
    pub background_id: String,
    pub foreground_id: Option<String>,
    pub paste_box: CropBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attacked {
    pub image: ImageBuf,
    pub overlay: Option<OverlayRecord>,
}

/// Applies one attack. Pure in `(img, spec)`.
pub fn apply_attack(img: &ImageBuf, spec: &AttackSpec) -> Result<Attacked> {
    spec.attack.validate()?;
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let plain = |image: ImageBuf| Ok(Attacked {
        image,
        overlay: None,
    });
    match spec.attack {
        Attack::Crop {
            x,
            y,
            w: fw,
            h: fh,
        } => {
            let bx = ((x * w as f32).round() as usize).min(w - 1);
            let by = ((y * h as f32).round() as usize).min(h - 1);
            let bw = ((fw * w as f32).round() as usize).clamp(1, w - bx);
            let bh = ((fh * h as f32).round() as usize).clamp(1, h - by);
            plain(img.crop(&CropBox::new(bx, by, bw, bh)?)?)
        }
        Attack::Rotate { degrees } => plain(rotate(img, degrees)),
        Attack::FlipH => plain(img.flip_horizontal()),
        Attack::GaussianBlur { sigma } => {
            let src: Vec<f32> = img.data().iter().map(|&v| f32::from(v)).collect();
            let out = gaussian_blur(&src, w, h, ch, sigma);
            plain(ImageBuf::new(w, h, ch, out.into_iter().map(quantize).collect())?)
        }
        Attack::JpegRecompress { quality } => {
            let bytes = img.encode_jpeg(quality)?;
            plain(super::decode_image(&bytes)?)
        }
        Attack::Brightness { delta } => {
            let shift = delta * 255.0;
            plain(map_values(img, |v| v + shift))
        }
        Attack::Contrast { factor } => plain(map_values(img, |v| (v - 127.5) * factor + 127.5)),
        Attack::Grayscale => {
            if ch == 1 {
                return plain(img.clone());
            }
            let data = img
                .data()
                .chunks_exact(3)
                .flat_map(|px| {
                    let l = quantize(
                        LUMA_WEIGHTS[0] * f32::from(px[0])
                            + LUMA_WEIGHTS[1] * f32::from(px[1])
                            + LUMA_WEIGHTS[2] * f32::from(px[2]),
                    );
                    [l, l, l]
                })
                .collect();
            plain(ImageBuf::new(w, h, 3, data)?)
        }
        Attack::Pad { frac, value } => {
            let px = (frac * w as f32).round() as usize;
            let py = (frac * h as f32).round() as usize;
            let (nw, nh) = (w + 2 * px, h + 2 * py);
            let mut data = vec![value; nw * nh * ch];
            for y in 0..h {
                let dst = ((y + py) * nw + px) * ch;
                let src = y * w * ch;
                data[dst..dst + w * ch].copy_from_slice(&img.data()[src..src + w * ch]);
            }
            plain(ImageBuf::new(nw, nh, ch, data)?)
        }
        Attack::Resize { scale } => {
            let nw = ((w as f32 * scale).round() as usize).max(1);
            let nh = ((h as f32 * scale).round() as usize).max(1);
            plain(resize_image(img, nw, nh))
        }
        Attack::OverlayPaste {
            bg_width,
            bg_height,
            fg_width,
            fg_height,
            x,
            y,
        } => {
            let bg = smooth_background(spec.seed, bg_width, bg_height, ch);
            let fg = resize_image(img, fg_width, fg_height);
            let mut data = bg.into_data();
            for row in 0..fg_height {
                let dst = ((y + row) * bg_width + x) * ch;
                let src = row * fg_width * ch;
                data[dst..dst + fg_width * ch]
                    .copy_from_slice(&fg.data()[src..src + fg_width * ch]);
            }
            Ok(Attacked {
                image: ImageBuf::new(bg_width, bg_height, ch, data)?,
                overlay: Some(OverlayRecord {
                    background_id: format!("synthetic-{:016x}", spec.seed),
                    foreground_id: None,
                    paste_box: CropBox::new(x, y, fg_width, fg_height)?,
                }),
            })
        }
        Attack::Pixelate { block } => plain(pixelate(img, block)),
    }
}

fn map_values(img: &ImageBuf, f: impl Fn(f32) -> f32) -> ImageBuf {
    let data = img.data().iter().map(|&v| quantize(f(f32::from(v)))).collect();
    ImageBuf::new(img.width(), img.height(), img.channels(), data).expect("same shape")
}

/// Rotation about the image centre with bilinear sampling; samples falling
/// outside the source replicate the nearest edge pixel.
fn rotate(img: &ImageBuf, degrees: f32) -> ImageBuf {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let src: Vec<f32> = img.data().iter().map(|&v| f32::from(v)).collect();
    let mut out = Vec::with_capacity(w * h * ch);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            // inverse map: output rotated counter-clockwise on screen (y down)
            let sx = cx + cos * dx - sin * dy;
            let sy = cy + sin * dx + cos * dy;
            for c in 0..ch {
                out.push(quantize(sample_clamped(&src, w, h, ch, sx, sy, c)));
            }
        }
    }
    ImageBuf::new(w, h, ch, out).expect("same shape")
}

fn pixelate(img: &ImageBuf, block: usize) -> ImageBuf {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut out = vec![0u8; w * h * ch];
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
            let n = ((ey - by) * (ex - bx)) as f32;
            for c in 0..ch {
                let mut sum = 0u32;
                for y in by..ey {
                    for x in bx..ex {
                        sum += u32::from(img.data()[(y * w + x) * ch + c]);
                    }
                }
                let mean = quantize(sum as f32 / n);
                for y in by..ey {
                    for x in bx..ex {
                        out[(y * w + x) * ch + c] = mean;
                    }
                }
            }
        }
    }
    ImageBuf::new(w, h, ch, out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{flip_horizontal, procedural_reference};

    fn spec(attack: Attack) -> AttackSpec {
        AttackSpec::new(attack, 7)
    }

    #[test]
    fn flip_attack_delegates() {
        let img = procedural_reference(1, 40, 30);
        let out = apply_attack(&img, &spec(Attack::FlipH)).unwrap();
        assert_eq!(out.image, flip_horizontal(&img));
        assert!(out.overlay.is_none());
    }

    #[test]
    fn full_crop_is_identity() {
        let img = procedural_reference(2, 41, 33);
        let full = Attack::Crop {
            x: 0.0,
            y: 0.0,
            w: 1.0,
            h: 1.0,
        };
        assert_eq!(apply_attack(&img, &spec(full)).unwrap().image, img);
    }

    #[test]
    fn overlay_box_matches_paste_coordinates() {
        let img = procedural_reference(3, 120, 90);
        let attack = Attack::OverlayPaste {
            bg_width: 400,
            bg_height: 400,
            fg_width: 100,
            fg_height: 100,
            x: 50,
            y: 60,
        };
        let out = apply_attack(&img, &spec(attack)).unwrap();
        let record = out.overlay.unwrap();
        assert_eq!(record.paste_box, CropBox::new(50, 60, 100, 100).unwrap());
        let pasted = out.image.crop(&record.paste_box).unwrap();
        assert_eq!(pasted, resize_image(&img, 100, 100));
    }

    #[test]
    fn out_of_range_params_rejected() {
        let img = procedural_reference(4, 32, 32);
        for attack in [
            Attack::Rotate { degrees: 200.0 },
            Attack::GaussianBlur { sigma: 0.0 },
            Attack::JpegRecompress { quality: 0 },
            Attack::Pixelate { block: 1 },
            Attack::Crop {
                x: 0.5,
                y: 0.0,
                w: 0.6,
                h: 1.0,
            },
            Attack::OverlayPaste {
                bg_width: 100,
                bg_height: 100,
                fg_width: 60,
                fg_height: 60,
                x: 50,
                y: 0,
            },
        ] {
            assert!(
                matches!(
                    apply_attack(&img, &spec(attack.clone())),
                    Err(ImagingError::ParamOutOfRange(_))
                ),
                "{attack:?}"
            );
        }
    }

    #[test]
    fn every_kind_is_deterministic_and_valid() {
        let img = procedural_reference(5, 64, 48);
        let attacks = [
            Attack::Crop {
                x: 0.1,
                y: 0.2,
                w: 0.5,
                h: 0.6,
            },
            Attack::Rotate { degrees: 25.0 },
            Attack::FlipH,
            Attack::GaussianBlur { sigma: 1.5 },
            Attack::JpegRecompress { quality: 40 },
            Attack::Brightness { delta: -0.2 },
            Attack::Contrast { factor: 1.5 },
            Attack::Grayscale,
            Attack::Pad {
                frac: 0.1,
                value: 0,
            },
            Attack::Resize { scale: 0.5 },
            Attack::OverlayPaste {
                bg_width: 128,
                bg_height: 96,
                fg_width: 40,
                fg_height: 30,
                x: 10,
                y: 20,
            },
            Attack::Pixelate { block: 4 },
        ];
        assert_eq!(attacks.len(), AttackKind::ALL.len());
        for attack in attacks {
            let s = spec(attack);
            let a = apply_attack(&img, &s).unwrap();
            let b = apply_attack(&img, &s).unwrap();
            assert_eq!(a, b, "{:?}", s.kind());
            let (kind, params) = s.to_parts();
            assert_eq!(AttackSpec::from_parts(&kind, &params, s.seed).unwrap(), s);
        }
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = procedural_reference(6, 50, 40);
        let out = apply_attack(&img, &spec(Attack::Rotate { degrees: 0.0 })).unwrap();
        assert_eq!(out.image, img);
    }

    #[test]
    fn pad_and_resize_shapes() {
        let img = procedural_reference(7, 100, 50);
        let padded = apply_attack(
            &img,
            &spec(Attack::Pad {
                frac: 0.1,
                value: 9,
            }),
        )
        .unwrap()
        .image;
        assert_eq!((padded.width(), padded.height()), (120, 60));
        assert_eq!(padded.pixel(0, 0), &[9, 9, 9]);
        let small = apply_attack(&img, &spec(Attack::Resize { scale: 0.5 }))
            .unwrap()
            .image;
        assert_eq!((small.width(), small.height()), (50, 25));
    }

    #[test]
    fn manifest_parts_parse() {
        let s = AttackSpec::from_parts("rotate", r#"{"degrees": 12.5}"#, 3).unwrap();
        assert_eq!(s.attack, Attack::Rotate { degrees: 12.5 });
        assert!(AttackSpec::from_parts("flip-h", "", 0).is_ok());
        assert!(AttackSpec::from_parts("swirl", "{}", 0).is_err());
        assert!(AttackSpec::from_parts("rotate", r#"{"angle": 1}"#, 0).is_err());
    }
}
