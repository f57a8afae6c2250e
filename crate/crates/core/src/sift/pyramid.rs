use super::{SiftError, SiftParams};
use crate::imaging::{gaussian_blur, GrayImage};

/// Blur already present in a camera image, in pixels.
const ASSUMED_INPUT_BLUR: f32 = 0.5;

/// One octave: `scales_per_octave + 3` Gaussian levels and their
/// `scales_per_octave + 2` successive differences, all at the same resolution.
#[derive(Debug, Clone)]
pub struct Octave {
    pub width: usize,
    pub height: usize,
    pub gaussians: Vec<Vec<f32>>,
    pub dogs: Vec<Vec<f32>>,
}

impl Octave {
    pub(crate) fn gauss_at(&self, level: usize, x: usize, y: usize) -> f32 {
        self.gaussians[level][y * self.width + x]
    }
}

#[derive(Debug, Clone)]
pub struct ScaleSpace {
    pub octaves: Vec<Octave>,
    pub scales_per_octave: usize,
    pub base_sigma: f32,
}

impl ScaleSpace {
    /// Effective σ (input pixels) of fractional level `layer` in `octave`.
    pub fn sigma(&self, octave: usize, layer: f32) -> f32 {
        self.base_sigma * 2f32.powf(octave as f32 + layer / self.scales_per_octave as f32)
    }

    /// σ of fractional level `layer` measured in the octave's own pixels.
    pub fn octave_sigma(&self, layer: f32) -> f32 {
        self.base_sigma * 2f32.powf(layer / self.scales_per_octave as f32)
    }
}

/// Number of octaves for a given shorter edge: `floor(log2(min_edge)) - 2`.
pub fn octave_count(min_edge: usize) -> usize {
    (usize::BITS - 1 - min_edge.leading_zeros()).saturating_sub(2) as usize
}

pub fn build_scale_space(img: &GrayImage, p: &SiftParams) -> Result<ScaleSpace, SiftError> {
    p.validate()?;
    let (w, h) = (img.width(), img.height());
    if w.min(h) < 16 {
        return Err(SiftError::DegenerateImage {
            width: w,
            height: h,
        });
    }
    let s = p.scales_per_octave;
    let n_levels = s + 3;
    // Incremental blur taking level k-1 to level k within an octave.
    let increments: Vec<f32> = (1..n_levels)
        .map(|k| {
            let prev = p.base_sigma * 2f32.powf((k - 1) as f32 / s as f32);
            let next = p.base_sigma * 2f32.powf(k as f32 / s as f32);
            (next * next - prev * prev).sqrt()
        })
        .collect();

    let initial_blur =
        (p.base_sigma * p.base_sigma - ASSUMED_INPUT_BLUR * ASSUMED_INPUT_BLUR).max(0.01).sqrt();
    let mut base = gaussian_blur(img.data(), w, h, 1, initial_blur);
    let (mut ow, mut oh) = (w, h);

    let n_octaves = octave_count(w.min(h));
    let mut octaves = Vec::with_capacity(n_octaves);
    for o in 0..n_octaves {
        if o > 0 {
            // level s of the previous octave has σ = 2·base_sigma
            let prev: &Octave = octaves.last().expect("previous octave");
            let (nw, nh) = (prev.width / 2, prev.height / 2);
            base = downsample(&prev.gaussians[s], prev.width, nw, nh);
            ow = nw;
            oh = nh;
        }
        let mut gaussians = Vec::with_capacity(n_levels);
        gaussians.push(std::mem::take(&mut base));
        for &sigma in &increments {
            let next = gaussian_blur(gaussians.last().expect("level"), ow, oh, 1, sigma);
            gaussians.push(next);
        }
        let dogs = gaussians
            .windows(2)
            .map(|pair| pair[1].iter().zip(&pair[0]).map(|(b, a)| b - a).collect())
            .collect();
        octaves.push(Octave {
            width: ow,
            height: oh,
            gaussians,
            dogs,
        });
    }
    Ok(ScaleSpace {
        octaves,
        scales_per_octave: s,
        base_sigma: p.base_sigma,
    })
}

/// Keeps every other pixel on both axes.
fn downsample(src: &[f32], width: usize, nw: usize, nh: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        let row = 2 * y * width;
        out.extend((0..nw).map(|x| src[row + 2 * x]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sift::test_images::textured;

    #[test]
    fn octave_counts() {
        assert_eq!(octave_count(300), 6);
        assert_eq!(octave_count(256), 6);
        assert_eq!(octave_count(255), 5);
        assert_eq!(octave_count(16), 2);
    }

    #[test]
    fn level_layout() {
        let img = textured(1, 300);
        let space = build_scale_space(&img, &SiftParams::default()).unwrap();
        assert_eq!(space.octaves.len(), 6);
        for (o, oct) in space.octaves.iter().enumerate() {
            assert_eq!(oct.gaussians.len(), 6);
            assert_eq!(oct.dogs.len(), 5);
            assert_eq!(oct.width, 300 >> o);
        }
        assert!((space.sigma(1, 3.0) - 1.6 * 4.0).abs() < 1e-4);
        assert!((space.sigma(0, 0.0) - 1.6).abs() < 1e-6);
    }

    #[test]
    fn four_scales_per_octave_layout() {
        let p = SiftParams {
            scales_per_octave: 4,
            ..SiftParams::default()
        };
        let space = build_scale_space(&textured(2, 64), &p).unwrap();
        assert_eq!(space.octaves.len(), 4);
        assert!(space
            .octaves
            .iter()
            .all(|o| o.gaussians.len() == 7 && o.dogs.len() == 6));
    }

    #[test]
    fn constant_image_has_zero_dog() {
        let img = GrayImage::filled(64, 80, 0.7).unwrap();
        let space = build_scale_space(&img, &SiftParams::default()).unwrap();
        for oct in &space.octaves {
            for dog in &oct.dogs {
                assert!(dog.iter().all(|v| v.abs() < 1e-6));
            }
        }
    }

    #[test]
    fn small_image_rejected() {
        let img = GrayImage::filled(15, 80, 0.7).unwrap();
        assert!(matches!(
            build_scale_space(&img, &SiftParams::default()),
            Err(SiftError::DegenerateImage { .. })
        ));
    }

    /// The blur actually applied must match the nominal σ schedule: blur a
    /// single impulse and measure the second moment of the response.
    #[test]
    fn measured_sigma_matches_schedule() {
        let n = 129;
        let mut data = vec![0.0f32; n * n];
        data[64 * n + 64] = 1.0;
        let img = GrayImage::new(n, n, data).unwrap();
        let p = SiftParams::default();
        let space = build_scale_space(&img, &p).unwrap();
        let oct = &space.octaves[0];
        for (k, level) in oct.gaussians.iter().enumerate() {
            let total: f32 = level.iter().sum();
            let var: f32 = level
                .iter()
                .enumerate()
                .map(|(i, v)| ((i % n) as f32 - 64.0).powi(2) * v)
                .sum::<f32>()
                / total;
            let nominal = space.octave_sigma(k as f32);
            let expected = nominal * nominal - ASSUMED_INPUT_BLUR * ASSUMED_INPUT_BLUR;
            assert!(
                (var - expected).abs() / expected < 0.02,
                "level {k}: {var} vs {expected}"
            );
        }
    }
}
