use std::f32::consts::TAU;

use super::{Keypoint, ScaleSpace, SiftDescriptor, SiftParams, DESCRIPTOR_LEN};

/// Spatial cells per side.
const GRID: usize = 4;
const ORI_BINS: usize = 8;
/// Cell width in units of the keypoint's octave σ.
const CELL_SIGMA_FACTOR: f32 = 3.0;
/// Quantization gain applied to the unit-norm vector before rounding.
const BYTE_GAIN: f32 = 512.0;

pub fn compute_descriptors(
    kps: &[Keypoint],
    space: &ScaleSpace,
    p: &SiftParams,
) -> Vec<SiftDescriptor> {
    kps.iter()
        .map(|kp| quantize(&descriptor_vector(kp, space, p.descriptor_clip)))
        .collect()
}

fn quantize(v: &[f32; DESCRIPTOR_LEN]) -> SiftDescriptor {
    let mut out = [0u8; DESCRIPTOR_LEN];
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x * BYTE_GAIN).round().clamp(0.0, 255.0) as u8;
    }
    SiftDescriptor(out)
}

/// Unit-norm (or all-zero) 128-vector after clipping and renormalization,
/// before byte quantization.
pub(crate) fn descriptor_vector(kp: &Keypoint, space: &ScaleSpace, clip: f32) -> [f32; DESCRIPTOR_LEN] {
    let oct = &space.octaves[kp.octave];
    let (w, h) = (oct.width as i64, oct.height as i64);
    let factor = (1usize << kp.octave) as f32;
    let (kx, ky) = (kp.x / factor, kp.y / factor);
    let cell = CELL_SIGMA_FACTOR * space.octave_sigma(kp.layer);
    let radius = ((cell * std::f32::consts::SQRT_2 * (GRID as f32 + 1.0) * 0.5).round() as i64)
        .min(((w * w + h * h) as f64).sqrt() as i64);
    let (sin_t, cos_t) = kp.orientation.sin_cos();
    let (cx, cy) = (kx.round() as i64, ky.round() as i64);
    let (fx, fy) = (kx - cx as f32, ky - cy as f32);
    let half = GRID as f32 / 2.0;
    let weight_scale = -1.0 / (0.5 * (GRID * GRID) as f32);
    let bins_per_rad = ORI_BINS as f32 / TAU;

    // (GRID + 2)² cells × (ORI_BINS + 2) bins; the padding absorbs the
    // trilinear spill at the borders.
    let stride_o = ORI_BINS + 2;
    let stride_c = (GRID + 2) * stride_o;
    let mut hist = vec![0.0f32; (GRID + 2) * stride_c];

    for dy in -radius..=radius {
        let y = cy + dy;
        if y < 1 || y >= h - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let x = cx + dx;
            if x < 1 || x >= w - 1 {
                continue;
            }
            // offset from the sub-pixel centre, rotated into the keypoint frame
            let (ox, oy) = (dx as f32 - fx, dy as f32 - fy);
            let u = (cos_t * ox + sin_t * oy) / cell;
            let v = (-sin_t * ox + cos_t * oy) / cell;
            let col = u + half - 0.5;
            let row = v + half - 0.5;
            if row <= -1.0 || row >= GRID as f32 || col <= -1.0 || col >= GRID as f32 {
                continue;
            }
            let (xu, yu) = (x as usize, y as usize);
            let gx = oct.gauss_at(kp.level, xu + 1, yu) - oct.gauss_at(kp.level, xu - 1, yu);
            let gy = oct.gauss_at(kp.level, xu, yu + 1) - oct.gauss_at(kp.level, xu, yu - 1);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let ori = (gy.atan2(gx) - kp.orientation).rem_euclid(TAU);
            let weight = ((u * u + v * v) * weight_scale).exp() * mag;
            let obin = ori * bins_per_rad;

            let (r0, c0, o0) = (row.floor(), col.floor(), obin.floor());
            let (dr, dc, dob) = (row - r0, col - c0, obin - o0);
            let (r0, c0) = ((r0 as i64 + 1) as usize, (c0 as i64 + 1) as usize);
            let o0 = (o0 as usize) % ORI_BINS;
            for (ri, wr) in [(0, 1.0 - dr), (1, dr)] {
                for (ci, wc) in [(0, 1.0 - dc), (1, dc)] {
                    for (oi, wo) in [(0, 1.0 - dob), (1, dob)] {
                        let idx = (r0 + ri) * stride_c + (c0 + ci) * stride_o + o0 + oi;
                        hist[idx] += weight * wr * wc * wo;
                    }
                }
            }
        }
    }

    let mut out = [0.0f32; DESCRIPTOR_LEN];
    for r in 0..GRID {
        for c in 0..GRID {
            let base = (r + 1) * stride_c + (c + 1) * stride_o;
            // fold the wrapped orientation bin back onto bin 0
            let cellh = &hist[base..base + stride_o];
            for o in 0..ORI_BINS {
                let mut val = cellh[o];
                if o == 0 {
                    val += cellh[ORI_BINS];
                }
                if o == 1 {
                    val += cellh[ORI_BINS + 1];
                }
                out[(r * GRID + c) * ORI_BINS + o] = val;
            }
        }
    }
    normalize(&mut out);
    let mut clipped = false;
    for v in &mut out {
        if *v > clip {
            *v = clip;
            clipped = true;
        }
    }
    if clipped {
        normalize(&mut out);
    }
    out
}

fn normalize(v: &mut [f32; DESCRIPTOR_LEN]) {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{apply_attack, procedural_reference, to_grayscale, Attack, AttackSpec};
    use crate::sift::test_images::textured;
    use crate::sift::{assign_orientations, build_scale_space, detect_keypoints, extract};

    fn l2(a: &SiftDescriptor, b: &SiftDescriptor) -> f32 {
        a.0.iter()
            .zip(&b.0)
            .map(|(&x, &y)| (f32::from(x) - f32::from(y)).powi(2))
            .sum::<f32>()
            .sqrt()
    }

    #[test]
    fn vectors_are_unit_norm_and_bytes_bounded() {
        let img = textured(51, 200);
        let p = SiftParams::default();
        let space = build_scale_space(&img, &p).unwrap();
        let kps = assign_orientations(&detect_keypoints(&space, &p), &space);
        assert!(!kps.is_empty());
        for kp in &kps {
            let v = descriptor_vector(kp, &space, p.descriptor_clip);
            let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
        for d in compute_descriptors(&kps, &space, &p) {
            assert_eq!(d.0.len(), 128);
        }
    }

    /// A keypoint and its counterpart in a 30°-rotated copy have descriptors
    /// closer than the image's median inter-descriptor distance.
    #[test]
    fn rotation_counterparts_are_close() {
        let img = procedural_reference(52, 240, 240);
        let rotated = apply_attack(&img, &AttackSpec::new(Attack::Rotate { degrees: 30.0 }, 0))
            .unwrap()
            .image;
        let p = SiftParams::default();
        let a = extract(&to_grayscale(&img).unwrap(), &p).unwrap();
        let b = extract(&to_grayscale(&rotated).unwrap(), &p).unwrap();

        let mut pairwise: Vec<f32> = Vec::new();
        for i in (0..a.len()).step_by(3) {
            for j in (i + 1..a.len()).step_by(7) {
                pairwise.push(l2(&a.descriptors[i], &a.descriptors[j]));
            }
        }
        pairwise.sort_by(f32::total_cmp);
        let median = pairwise[pairwise.len() / 2];

        // rotation used by the attack: counter-clockwise on screen about the centre
        let c = (240.0 - 1.0) / 2.0;
        let (s, co) = 30f32.to_radians().sin_cos();
        let mut closer = 0;
        let mut total = 0;
        for (ka, da) in a.keypoints.iter().zip(&a.descriptors) {
            let (dx, dy) = (ka.x - c, ka.y - c);
            // forward map of the inverse used when sampling
            let ex = c + co * dx + s * dy;
            let ey = c - s * dx + co * dy;
            if (ex - c).hypot(ey - c) > 90.0 {
                continue;
            }
            let best = b
                .keypoints
                .iter()
                .zip(&b.descriptors)
                .filter(|(kb, _)| {
                    (kb.x - ex).hypot(kb.y - ey) < 1.5 && (kb.scale / ka.scale - 1.0).abs() < 0.15
                })
                .map(|(_, db)| l2(da, db))
                .fold(f32::INFINITY, f32::min);
            if best.is_finite() {
                total += 1;
                if best < median {
                    closer += 1;
                }
            }
        }
        assert!(total >= 20, "only {total} geometric counterparts");
        assert!(
            closer as f32 >= 0.9 * total as f32,
            "{closer}/{total} below median {median}"
        );
    }
}
