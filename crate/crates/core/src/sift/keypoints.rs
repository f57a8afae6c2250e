use std::f32::consts::TAU;

use super::{response_order, Keypoint, Octave, ScaleSpace, SiftParams};

/// Pixels this close to an octave border are never tested as extrema.
const BORDER: usize = 5;
const MAX_REFINE_STEPS: usize = 5;

const ORI_BINS: usize = 36;
/// Orientation window σ as a multiple of the keypoint scale.
const ORI_SIGMA_FACTOR: f32 = 1.5;
/// Orientation window radius in units of the window σ.
const ORI_RADIUS_FACTOR: f32 = 3.0;
const ORI_PEAK_RATIO: f32 = 0.8;

/// Finds refined DoG extrema, returned strongest first and capped to
/// `max_keypoints`. Orientations are left at zero.
pub fn detect_keypoints(space: &ScaleSpace, p: &SiftParams) -> Vec<Keypoint> {
    let s = space.scales_per_octave;
    let contrast = p.contrast_threshold / s as f32;
    let prelim = 0.5 * contrast;
    let edge_limit = (p.edge_ratio + 1.0).powi(2) / p.edge_ratio;
    let mut out = Vec::new();
    for (o, oct) in space.octaves.iter().enumerate() {
        let (w, h) = (oct.width, oct.height);
        if w <= 2 * BORDER || h <= 2 * BORDER {
            continue;
        }
        for level in 1..=s {
            let cur = &oct.dogs[level];
            for y in BORDER..h - BORDER {
                for x in BORDER..w - BORDER {
                    let v = cur[y * w + x];
                    if v.abs() <= prelim || !is_extremum(oct, level, x, y, v) {
                        continue;
                    }
                    if let Some(kp) = refine(space, oct, o, level, x, y, contrast, edge_limit) {
                        out.push(kp);
                    }
                }
            }
        }
    }
    out.sort_by(response_order);
    out.truncate(p.max_keypoints);
    out
}

fn is_extremum(oct: &Octave, level: usize, x: usize, y: usize, v: f32) -> bool {
    let w = oct.width;
    let mut is_max = true;
    let mut is_min = true;
    for dog in &oct.dogs[level - 1..=level + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                let n = dog[yy * w + xx];
                is_max &= v >= n;
                is_min &= v <= n;
            }
        }
        if !is_max && !is_min {
            return false;
        }
    }
    is_max || is_min
}

/// Quadratic refinement in (x, y, level); applies the contrast and
/// principal-curvature tests at the converged sample.
#[allow(clippy::too_many_arguments)]
fn refine(
    space: &ScaleSpace,
    oct: &Octave,
    octave: usize,
    level: usize,
    x: usize,
    y: usize,
    contrast: f32,
    edge_limit: f32,
) -> Option<Keypoint> {
    let s = space.scales_per_octave;
    let (w, h) = (oct.width, oct.height);
    let (mut xi, mut yi, mut li) = (x as i64, y as i64, level as i64);
    let mut offset = [0.0f32; 3];
    let mut converged = false;
    for _ in 0..MAX_REFINE_STEPS {
        let d = |l: i64, yy: i64, xx: i64| oct.dogs[l as usize][yy as usize * w + xx as usize];
        let c = d(li, yi, xi);
        let grad = [
            0.5 * (d(li, yi, xi + 1) - d(li, yi, xi - 1)),
            0.5 * (d(li, yi + 1, xi) - d(li, yi - 1, xi)),
            0.5 * (d(li + 1, yi, xi) - d(li - 1, yi, xi)),
        ];
        let dxx = d(li, yi, xi + 1) + d(li, yi, xi - 1) - 2.0 * c;
        let dyy = d(li, yi + 1, xi) + d(li, yi - 1, xi) - 2.0 * c;
        let dss = d(li + 1, yi, xi) + d(li - 1, yi, xi) - 2.0 * c;
        let dxy = 0.25
            * (d(li, yi + 1, xi + 1) - d(li, yi + 1, xi - 1) - d(li, yi - 1, xi + 1)
                + d(li, yi - 1, xi - 1));
        let dxs = 0.25
            * (d(li + 1, yi, xi + 1) - d(li + 1, yi, xi - 1) - d(li - 1, yi, xi + 1)
                + d(li - 1, yi, xi - 1));
        let dys = 0.25
            * (d(li + 1, yi + 1, xi) - d(li + 1, yi - 1, xi) - d(li - 1, yi + 1, xi)
                + d(li - 1, yi - 1, xi));
        let hessian = [[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]];
        let step = solve3(&hessian, &grad)?;
        offset = [-step[0], -step[1], -step[2]];
        if offset.iter().all(|v| v.abs() < 0.5) {
            converged = true;
            break;
        }
        if offset.iter().any(|v| v.abs() > 1e3) {
            return None;
        }
        xi += offset[0].round() as i64;
        yi += offset[1].round() as i64;
        li += offset[2].round() as i64;
        if li < 1
            || li > s as i64
            || xi < BORDER as i64
            || xi >= (w - BORDER) as i64
            || yi < BORDER as i64
            || yi >= (h - BORDER) as i64
        {
            return None;
        }
    }
    if !converged {
        return None;
    }

    let d = |l: i64, yy: i64, xx: i64| oct.dogs[l as usize][yy as usize * w + xx as usize];
    let c = d(li, yi, xi);
    let grad = [
        0.5 * (d(li, yi, xi + 1) - d(li, yi, xi - 1)),
        0.5 * (d(li, yi + 1, xi) - d(li, yi - 1, xi)),
        0.5 * (d(li + 1, yi, xi) - d(li - 1, yi, xi)),
    ];
    let value = c + 0.5 * (grad[0] * offset[0] + grad[1] * offset[1] + grad[2] * offset[2]);
    if value.abs() < contrast {
        return None;
    }
    let dxx = d(li, yi, xi + 1) + d(li, yi, xi - 1) - 2.0 * c;
    let dyy = d(li, yi + 1, xi) + d(li, yi - 1, xi) - 2.0 * c;
    let dxy = 0.25
        * (d(li, yi + 1, xi + 1) - d(li, yi + 1, xi - 1) - d(li, yi - 1, xi + 1)
            + d(li, yi - 1, xi - 1));
    if !passes_edge_test(dxx, dyy, dxy, edge_limit) {
        return None;
    }

    let factor = (1usize << octave) as f32;
    let layer = li as f32 + offset[2];
    Some(Keypoint {
        x: (xi as f32 + offset[0]) * factor,
        y: (yi as f32 + offset[1]) * factor,
        scale: space.sigma(octave, layer),
        orientation: 0.0,
        response: value.abs(),
        octave,
        level: li as usize,
        layer,
    })
}

/// Principal-curvature ratio test: `tr² / det < (r + 1)² / r` with `det > 0`.
pub(crate) fn passes_edge_test(dxx: f32, dyy: f32, dxy: f32, edge_limit: f32) -> bool {
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    det > 0.0 && tr * tr < edge_limit * det
}

/// Solves `a · x = b` by Cramer's rule; `None` when singular.
fn solve3(a: &[[f32; 3]; 3], b: &[f32; 3]) -> Option<[f32; 3]> {
    let det3 = |m: &[[f32; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let det = det3(a);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let mut x = [0.0; 3];
    for (col, xv) in x.iter_mut().enumerate() {
        let mut m = *a;
        for row in 0..3 {
            m[row][col] = b[row];
        }
        *xv = det3(&m) / det;
    }
    Some(x)
}

/// Smoothed 36-bin gradient-orientation histogram around a keypoint.
pub(crate) fn orientation_histogram(kp: &Keypoint, space: &ScaleSpace) -> [f32; ORI_BINS] {
    let oct = &space.octaves[kp.octave];
    let factor = (1usize << kp.octave) as f32;
    let sigma = ORI_SIGMA_FACTOR * space.octave_sigma(kp.layer);
    let radius = (ORI_RADIUS_FACTOR * sigma).round() as i64;
    let cx = (kp.x / factor).round() as i64;
    let cy = (kp.y / factor).round() as i64;
    let denom = -1.0 / (2.0 * sigma * sigma);

    let mut raw = [0.0f32; ORI_BINS];
    for dy in -radius..=radius {
        let y = cy + dy;
        if y < 1 || y >= oct.height as i64 - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let x = cx + dx;
            if x < 1 || x >= oct.width as i64 - 1 {
                continue;
            }
            let (xu, yu) = (x as usize, y as usize);
            let gx = oct.gauss_at(kp.level, xu + 1, yu) - oct.gauss_at(kp.level, xu - 1, yu);
            let gy = oct.gauss_at(kp.level, xu, yu + 1) - oct.gauss_at(kp.level, xu, yu - 1);
            let mag = (gx * gx + gy * gy).sqrt();
            let angle = gy.atan2(gx).rem_euclid(TAU);
            let weight = (((dx * dx + dy * dy) as f32) * denom).exp();
            let bin = ((angle * ORI_BINS as f32 / TAU).round() as usize) % ORI_BINS;
            raw[bin] += weight * mag;
        }
    }
    let n = ORI_BINS;
    let mut hist = [0.0f32; ORI_BINS];
    for (i, h) in hist.iter_mut().enumerate() {
        let at = |k: isize| raw[(i as isize + k).rem_euclid(n as isize) as usize];
        *h = (at(-2) + at(2)) * (1.0 / 16.0) + (at(-1) + at(1)) * (4.0 / 16.0) + at(0) * (6.0 / 16.0);
    }
    hist
}

/// Dominant orientations of each keypoint: every local histogram peak within
/// 80% of the maximum yields one keypoint copy, with parabolic peak refinement.
pub fn assign_orientations(kps: &[Keypoint], space: &ScaleSpace) -> Vec<Keypoint> {
    let mut out = Vec::with_capacity(kps.len() + kps.len() / 4);
    for kp in kps {
        let hist = orientation_histogram(kp, space);
        let max = hist.iter().copied().fold(0.0f32, f32::max);
        if max <= 0.0 {
            continue;
        }
        for i in 0..ORI_BINS {
            let left = hist[(i + ORI_BINS - 1) % ORI_BINS];
            let right = hist[(i + 1) % ORI_BINS];
            let c = hist[i];
            if c > left && c > right && c >= ORI_PEAK_RATIO * max {
                let denom = left - 2.0 * c + right;
                let shift = if denom != 0.0 {
                    0.5 * (left - right) / denom
                } else {
                    0.0
                };
                let bin = i as f32 + shift;
                let mut orientation = (bin * TAU / ORI_BINS as f32).rem_euclid(TAU);
                if orientation >= TAU {
                    orientation = 0.0;
                }
                out.push(Keypoint {
                    orientation,
                    ..*kp
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::GrayImage;
    use crate::sift::test_images::*;
    use crate::sift::{build_scale_space, extract};

    fn dog_value(space: &ScaleSpace, o: usize, l: usize, x: usize, y: usize) -> f32 {
        let oct = &space.octaves[o];
        oct.dogs[l][y * oct.width + x]
    }

    #[test]
    fn constant_image_no_keypoints() {
        let img = GrayImage::filled(200, 200, 0.3).unwrap();
        let space = build_scale_space(&img, &SiftParams::default()).unwrap();
        assert!(detect_keypoints(&space, &SiftParams::default()).is_empty());
    }

    /// Brute-force scan of every DoG sample for the strongest |value|, then
    /// check the detector reports a keypoint at the same place.
    #[test]
    fn blob_extremum_agrees_with_brute_force_scan() {
        let img = gaussian_blob(300, 150.0, 150.0, 4.0);
        let p = SiftParams::default();
        let space = build_scale_space(&img, &p).unwrap();
        let mut best = (0.0f32, 0usize, 0usize, 0usize, 0usize);
        for (o, oct) in space.octaves.iter().enumerate() {
            for l in 1..=p.scales_per_octave {
                for y in 0..oct.height {
                    for x in 0..oct.width {
                        let v = dog_value(&space, o, l, x, y).abs();
                        if v > best.0 {
                            best = (v, o, l, x, y);
                        }
                    }
                }
            }
        }
        let (_, o, _, x, y) = best;
        let f = (1usize << o) as f32;
        let (bx, by) = (x as f32 * f, y as f32 * f);
        assert!((bx - 150.0).hypot(by - 150.0) <= 3.0 * f, "({bx}, {by})");

        let kps = detect_keypoints(&space, &p);
        let near: Vec<_> = kps
            .iter()
            .filter(|k| (k.x - 150.0).hypot(k.y - 150.0) <= 3.0)
            .collect();
        assert!(!near.is_empty(), "{kps:?}");
        // The blob of σ=4 has its characteristic scale near σ·√2.
        assert!(near.iter().any(|k| (k.scale - 4.0 * 2f32.sqrt()).abs() < 2.5));
    }

    /// Along a straight step edge the Hessian is rank-one: brute-force ratios
    /// exceed the edge limit everywhere, so no keypoint survives there.
    #[test]
    fn straight_edge_is_rejected() {
        let n = 300;
        let data = (0..n * n)
            .map(|i| if i % n < 150 { 0.2 } else { 0.8 })
            .collect();
        let img = GrayImage::new(n, n, data).unwrap();
        let p = SiftParams::default();
        let space = build_scale_space(&img, &p).unwrap();
        let limit = (p.edge_ratio + 1.0).powi(2) / p.edge_ratio;
        let oct = &space.octaves[0];
        let w = oct.width;
        for l in 1..=p.scales_per_octave {
            let d = &oct.dogs[l];
            for y in 60..240 {
                for x in 140..160 {
                    let c = d[y * w + x];
                    let dxx = d[y * w + x + 1] + d[y * w + x - 1] - 2.0 * c;
                    let dyy = d[(y + 1) * w + x] + d[(y - 1) * w + x] - 2.0 * c;
                    let dxy = 0.25
                        * (d[(y + 1) * w + x + 1] - d[(y + 1) * w + x - 1]
                            - d[(y - 1) * w + x + 1]
                            + d[(y - 1) * w + x - 1]);
                    assert!(!passes_edge_test(dxx, dyy, dxy, limit));
                }
            }
        }
        let kps = detect_keypoints(&space, &p);
        assert!(
            kps.iter()
                .all(|k| !((40.0..260.0).contains(&k.y) && (k.x - 150.0).abs() < 10.0)),
            "{kps:?}"
        );
    }

    #[test]
    fn edge_test_examples() {
        let limit = 11.0f32.powi(2) / 10.0;
        assert!(passes_edge_test(-1.0, -1.0, 0.0, limit));
        assert!(!passes_edge_test(-1.0, -0.01, 0.0, limit));
        assert!(!passes_edge_test(1.0, -1.0, 0.0, limit));
    }

    fn oriented_at(img: &GrayImage, x: f32, y: f32, scale_layer: f32) -> Vec<f32> {
        let p = SiftParams::default();
        let space = build_scale_space(img, &p).unwrap();
        let kp = Keypoint {
            x,
            y,
            scale: space.sigma(0, scale_layer),
            orientation: 0.0,
            response: 1.0,
            octave: 0,
            level: scale_layer as usize,
            layer: scale_layer,
        };
        assign_orientations(&[kp], &space)
            .into_iter()
            .map(|k| k.orientation)
            .collect()
    }

    fn angle_diff(a: f32, b: f32) -> f32 {
        let d = (a - b).rem_euclid(TAU);
        d.min(TAU - d)
    }

    #[test]
    fn linear_ramp_orientation_matches_gradient() {
        for theta_deg in [0.0f32, 30.0, 100.0, 200.0, 315.0] {
            let theta = theta_deg.to_radians();
            let n = 96;
            let (s, c) = theta.sin_cos();
            let data = (0..n * n)
                .map(|i| {
                    let (x, y) = ((i % n) as f32, (i / n) as f32);
                    (0.5 + 0.004 * (c * (x - 48.0) + s * (y - 48.0))).clamp(0.0, 1.0)
                })
                .collect();
            let img = GrayImage::new(n, n, data).unwrap();
            let oris = oriented_at(&img, 48.0, 48.0, 1.0);
            assert!(!oris.is_empty());
            for o in oris {
                assert!(
                    angle_diff(o, theta) <= 10f32.to_radians(),
                    "θ={theta_deg}: got {}",
                    o.to_degrees()
                );
            }
        }
    }

    #[test]
    fn orthogonal_gradients_duplicate_keypoint() {
        // A vertical and a horizontal step, equidistant from the sample point,
        // crossing outside the histogram window.
        let n = 96;
        let data = (0..n * n)
            .map(|i| {
                let (x, y) = (i % n, i / n);
                0.2 + 0.3 * f32::from(u8::from(x >= 40)) + 0.3 * f32::from(u8::from(y >= 57))
            })
            .collect();
        let img = GrayImage::new(n, n, data).unwrap();
        let oris = oriented_at(&img, 48.0, 48.0, 1.0);
        assert_eq!(oris.len(), 2, "{oris:?}");
        let mut sorted = oris.clone();
        sorted.sort_by(f32::total_cmp);
        assert!(angle_diff(sorted[0], 0.0) < 10f32.to_radians());
        assert!(angle_diff(sorted[1], std::f32::consts::FRAC_PI_2) < 10f32.to_radians());
    }

    fn rotate90(img: &GrayImage) -> GrayImage {
        // out(x, y) = in(y, n-1-x): a 90° rotation in image coordinates.
        let n = img.width();
        let data = (0..n * n)
            .map(|i| {
                let (x, y) = (i % n, i / n);
                img.get(n - 1 - y, x)
            })
            .collect();
        GrayImage::new(n, n, data).unwrap()
    }

    /// Keypoints recovered on the 90°-rotated image sit at the rotated
    /// positions with orientations shifted by -90°.
    #[test]
    fn orientation_follows_90_degree_rotation() {
        let img = textured(31, 200);
        let rot = rotate90(&img);
        let p = SiftParams::default();
        let a = extract(&img, &p).unwrap();
        let b = extract(&rot, &p).unwrap();
        let n = 199.0f32;
        let mut paired = 0;
        let mut agree = 0;
        for ka in &a.keypoints {
            // (x, y) -> (y, n - x) under the rotation above
            let (ex, ey) = (ka.y, n - ka.x);
            let Some(kb) = b.keypoints.iter().find(|kb| {
                (kb.x - ex).hypot(kb.y - ey) < 1.0 && (kb.scale / ka.scale - 1.0).abs() < 0.1
            }) else {
                continue;
            };
            paired += 1;
            let expected = (ka.orientation - std::f32::consts::FRAC_PI_2).rem_euclid(TAU);
            let any_close = b
                .keypoints
                .iter()
                .filter(|k| (k.x - kb.x).abs() < 1e-3 && (k.y - kb.y).abs() < 1e-3)
                .any(|k| angle_diff(k.orientation, expected) <= 10f32.to_radians());
            if any_close {
                agree += 1;
            }
        }
        assert!(paired > 20, "paired {paired}");
        assert!(
            agree as f32 >= 0.8 * paired as f32,
            "{agree}/{paired} orientations followed the rotation"
        );
    }

    #[test]
    fn no_keypoint_near_borders() {
        let t = textured(40, 160);
        let space = build_scale_space(&t, &SiftParams::default()).unwrap();
        for kp in detect_keypoints(&space, &SiftParams::default()) {
            let f = (1usize << kp.octave) as f32;
            assert!(kp.x / f >= (BORDER as f32 - 1.0) && kp.y / f >= (BORDER as f32 - 1.0));
        }
    }
}
