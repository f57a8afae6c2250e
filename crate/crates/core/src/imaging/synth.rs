//! Procedural rasters used as reference corpora and overlay backgrounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gaussian_blur, quantize, ImageBuf};

#[derive(Clone, Copy)]
enum Fill {
    Solid([f32; 3]),
    Stripes {
        a: [f32; 3],
        b: [f32; 3],
        period: f32,
        angle: f32,
    },
    Checker {
        a: [f32; 3],
        b: [f32; 3],
        cell: f32,
    },
}

impl Fill {
    fn color(&self, x: f32, y: f32) -> [f32; 3] {
        match *self {
            Fill::Solid(c) => c,
            Fill::Stripes {
                a,
                b,
                period,
                angle,
            } => {
                let t = x * angle.cos() + y * angle.sin();
                if (t / period).rem_euclid(2.0) < 1.0 {
                    a
                } else {
                    b
                }
            }
            Fill::Checker { a, b, cell } => {
                let parity = ((x / cell).floor() + (y / cell).floor()) as i64;
                if parity.rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

enum Shape {
    Ellipse {
        cx: f32,
        cy: f32,
        rx: f32,
        ry: f32,
        angle: f32,
    },
    Rect {
        cx: f32,
        cy: f32,
        hw: f32,
        hh: f32,
        angle: f32,
    },
    Triangle([(f32, f32); 3]),
    Ring {
        cx: f32,
        cy: f32,
        outer: f32,
        inner: f32,
    },
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            } => {
                let (u, v) = rotate_into(x - cx, y - cy, angle);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect {
                cx,
                cy,
                hw,
                hh,
                angle,
            } => {
                let (u, v) = rotate_into(x - cx, y - cy, angle);
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Triangle(p) => {
                let edge = |a: (f32, f32), b: (f32, f32)| {
                    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
                };
                let d = [edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
            Shape::Ring {
                cx,
                cy,
                outer,
                inner,
            } => {
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                r2 <= outer * outer && r2 >= inner * inner
            }
        }
    }

    fn bounds(&self) -> (f32, f32, f32, f32) {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, .. } => {
                let r = rx.max(ry);
                (cx - r, cy - r, cx + r, cy + r)
            }
            Shape::Rect { cx, cy, hw, hh, .. } => {
                let r = (hw * hw + hh * hh).sqrt();
                (cx - r, cy - r, cx + r, cy + r)
            }
            Shape::Triangle(p) => {
                let xs = p.map(|q| q.0);
                let ys = p.map(|q| q.1);
                (
                    xs.iter().copied().fold(f32::MAX, f32::min),
                    ys.iter().copied().fold(f32::MAX, f32::min),
                    xs.iter().copied().fold(f32::MIN, f32::max),
                    ys.iter().copied().fold(f32::MIN, f32::max),
                )
            }
            Shape::Ring { cx, cy, outer, .. } => (cx - outer, cy - outer, cx + outer, cy + outer),
        }
    }
}

fn rotate_into(dx: f32, dy: f32, angle: f32) -> (f32, f32) {
    let (s, c) = angle.sin_cos();
    (c * dx + s * dy, -s * dx + c * dy)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.gen_range(0.0..255.0),
        rng.gen_range(0.0..255.0),
        rng.gen_range(0.0..255.0),
    ]
}

/// Smooth two-tone gradient with a gentle low-frequency ripple.
fn gradient_field(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Vec<f32> {
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (s, c) = angle.sin_cos();
    let freq: f32 = rng.gen_range(0.5..2.0) * std::f32::consts::TAU / width.max(height) as f32;
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let amp: f32 = rng.gen_range(5.0..20.0);
    let span = (width * width + height * height) as f32;
    let span = span.sqrt().max(1.0);
    let mut out = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f32, y as f32);
            let t = ((xf * c + yf * s) / span + 0.5).clamp(0.0, 1.0);
            let ripple = amp * (freq * (xf * s - yf * c) + phase).sin();
            for k in 0..3 {
                out.push(c0[k] * (1.0 - t) + c1[k] * t + ripple);
            }
        }
    }
    out
}

fn to_channels(rgb: Vec<f32>, width: usize, height: usize, channels: usize) -> ImageBuf {
    let data: Vec<u8> = if channels == 1 {
        rgb.chunks_exact(3)
            .map(|p| quantize(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]))
            .collect()
    } else {
        rgb.into_iter().map(quantize).collect()
    };
    ImageBuf::new(width, height, channels, data).expect("synthetic shape is valid")
}

/// Flat-ish background with no sharp structure, used behind overlay pastes.
pub fn smooth_background(seed: u64, width: usize, height: usize, channels: usize) -> ImageBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6267_7365_6564_0000);
    let field = gradient_field(&mut rng, width, height);
    to_channels(field, width, height, channels)
}

/// Textured RGB scene: a gradient backdrop covered by a few dozen randomly
/// placed, coloured and patterned shapes, lightly blurred and noised. Distinct
/// seeds give visually unrelated images with plenty of corners and blobs.
pub fn procedural_reference(seed: u64, width: usize, height: usize) -> ImageBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = gradient_field(&mut rng, width, height);
    let (wf, hf) = (width as f32, height as f32);
    let scale = wf.min(hf);
    let n_shapes = rng.gen_range(28..48);
    for _ in 0..n_shapes {
        let cx = rng.gen_range(-0.05..1.05) * wf;
        let cy = rng.gen_range(-0.05..1.05) * hf;
        let size = scale * rng.gen_range(0.03..0.22);
        let angle = rng.gen_range(0.0..std::f32::consts::PI);
        let shape = match rng.gen_range(0..4) {
            0 => Shape::Ellipse {
                cx,
                cy,
                rx: size,
                ry: size * rng.gen_range(0.3..1.0),
                angle,
            },
            1 => Shape::Rect {
                cx,
                cy,
                hw: size,
                hh: size * rng.gen_range(0.2..1.0),
                angle,
            },
            2 => {
                let mut p = [(0.0, 0.0); 3];
                for q in &mut p {
                    let a: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
                    let r = size * rng.gen_range(0.6..1.4);
                    *q = (cx + r * a.cos(), cy + r * a.sin());
                }
                Shape::Triangle(p)
            }
            _ => Shape::Ring {
                cx,
                cy,
                outer: size,
                inner: size * rng.gen_range(0.3..0.8),
            },
        };
        let fill = match rng.gen_range(0..6) {
            0 => Fill::Stripes {
                a: random_color(&mut rng),
                b: random_color(&mut rng),
                period: rng.gen_range(3.0..9.0),
                angle: rng.gen_range(0.0..std::f32::consts::PI),
            },
            1 => Fill::Checker {
                a: random_color(&mut rng),
                b: random_color(&mut rng),
                cell: rng.gen_range(4.0..12.0),
            },
            _ => Fill::Solid(random_color(&mut rng)),
        };
        let (x0, y0, x1, y1) = shape.bounds();
        let xs = x0.floor().max(0.0) as usize..(x1.ceil().max(0.0) as usize).min(width);
        let ys = y0.floor().max(0.0) as usize..(y1.ceil().max(0.0) as usize).min(height);
        for y in ys {
            for x in xs.clone() {
                let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
                if shape.contains(xf, yf) {
                    let c = fill.color(xf, yf);
                    canvas[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&c);
                }
            }
        }
    }
    let mut canvas = gaussian_blur(&canvas, width, height, 3, 0.7);
    for v in &mut canvas {
        *v += rng.gen_range(-3.0..3.0);
    }
    to_channels(canvas, width, height, 3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(procedural_reference(9, 64, 48), procedural_reference(9, 64, 48));
        assert_ne!(procedural_reference(9, 64, 48), procedural_reference(10, 64, 48));
        assert_eq!(smooth_background(1, 30, 20, 1), smooth_background(1, 30, 20, 1));
    }

    #[test]
    fn background_is_smooth() {
        let bg = smooth_background(4, 200, 150, 1);
        let d = bg.data();
        let max_step = (0..150)
            .flat_map(|y| (1..200).map(move |x| (y, x)))
            .map(|(y, x)| (i32::from(d[y * 200 + x]) - i32::from(d[y * 200 + x - 1])).abs())
            .max()
            .unwrap();
        assert!(max_step <= 4, "step {max_step}");
    }
}
