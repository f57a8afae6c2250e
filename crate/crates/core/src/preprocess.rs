//! Pasted-foreground detection and routing of image variants to the three
//! recall branches.
//!
//! The detector is a projection heuristic: intensity steps are accumulated
//! per column and per row, the strongest step lines on each axis become
//! candidate rectangle sides, and a rectangle is accepted when all four of its
//! sides stand out from their parallel neighbourhood.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{GrayImage, ImageBuf, ImagingError, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("crop box must have positive size, got {w}x{h}")]
pub struct EmptyBox {
    pub w: usize,
    pub h: usize,
}

/// Axis-aligned rectangle in pixel units, top-left anchored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl CropBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Result<Self, EmptyBox> {
        if w == 0 || h == 0 {
            return Err(EmptyBox { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn full(width: usize, height: usize) -> Result<Self, EmptyBox> {
        Self::new(0, 0, width, height)
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn iou(&self, other: &CropBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) as i64 - self.x.max(other.x) as i64;
        let iy = (self.y + self.h).min(other.y + other.h) as i64 - self.y.max(other.y) as i64;
        if ix <= 0 || iy <= 0 {
            return 0.0;
        }
        let inter = (ix * iy) as f64;
        inter / (self.area() as f64 + other.area() as f64 - inter)
    }

    /// Fraction of a `width`×`height` frame covered by this box.
    pub fn frame_fraction(&self, width: usize, height: usize) -> f64 {
        self.area() as f64 / (width * height) as f64
    }
}

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("degenerate image {width}x{height} (min edge must be >= 32)")]
    DegenerateImage { width: usize, height: usize },
    #[error("malformed crop-box row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("non-positive box dimension on row {line}")]
    NegativeDimension { line: usize },
    #[error("box {box_:?} outside {width}x{height} image")]
    BoxOutOfBounds {
        box_: CropBox,
        width: usize,
        height: usize,
    },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A detection covering at least this fraction of the frame is no crop at all.
pub const FULL_FRAME_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Minimum box area as a fraction of the frame.
    pub min_frac: f64,
    /// Maximum box area as a fraction of the frame.
    pub max_frac: f64,
    /// Minimum step prominence (intensity units) required on every side.
    pub edge_threshold: f32,
    /// Step lines kept per axis when enumerating candidate rectangles.
    pub candidates_per_axis: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            min_frac: 0.05,
            max_frac: 0.90,
            edge_threshold: 0.06,
            candidates_per_axis: 8,
        }
    }
}

/// Absolute forward differences: `dx[y][x] = |I(x, y) - I(x - 1, y)|` for
/// `x >= 1` (column 0 is zero), and likewise for rows.
struct Steps {
    width: usize,
    height: usize,
    dx: Vec<f32>,
    dy: Vec<f32>,
}

impl Steps {
    fn new(img: &GrayImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let d = img.data();
        let mut dx = vec![0.0; w * h];
        let mut dy = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x > 0 {
                    dx[i] = (d[i] - d[i - 1]).abs();
                }
                if y > 0 {
                    dy[i] = (d[i] - d[i - w]).abs();
                }
            }
        }
        Self {
            width: w,
            height: h,
            dx,
            dy,
        }
    }

    /// Mean step across the vertical line at column boundary `col`, rows `rows`.
    fn vertical_line(&self, col: usize, rows: std::ops::Range<usize>) -> f32 {
        let n = rows.len().max(1) as f32;
        rows.map(|y| self.dx[y * self.width + col]).sum::<f32>() / n
    }

    fn horizontal_line(&self, row: usize, cols: std::ops::Range<usize>) -> f32 {
        let n = cols.len().max(1) as f32;
        let base = row * self.width;
        self.dy[base + cols.start..base + cols.end].iter().sum::<f32>() / n
    }

    /// Step strength of a line minus the mean strength of parallel lines two and
    /// three pixels to either side.
    fn prominence(&self, vertical: bool, at: usize, span: std::ops::Range<usize>) -> f32 {
        let limit = if vertical { self.width } else { self.height };
        let line = |p: usize| {
            if vertical {
                self.vertical_line(p, span.clone())
            } else {
                self.horizontal_line(p, span.clone())
            }
        };
        let neighbours: Vec<f32> = [-3i64, -2, 2, 3]
            .iter()
            .map(|off| at as i64 + off)
            .filter(|&p| p >= 1 && (p as usize) < limit)
            .map(|p| line(p as usize))
            .collect();
        let background = if neighbours.is_empty() {
            0.0
        } else {
            neighbours.iter().sum::<f32>() / neighbours.len() as f32
        };
        line(at) - background
    }
}

/// Strongest step lines of a profile: local maxima after suppressing anything
/// within three pixels of a stronger line, excluding the outermost boundaries.
fn strongest_lines(profile: &[f32], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (2..profile.len().saturating_sub(1)).collect();
    order.sort_by(|&a, &b| profile[b].total_cmp(&profile[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = Vec::with_capacity(keep);
    for p in order {
        if chosen.len() == keep {
            break;
        }
        if profile[p] <= 0.0 {
            break;
        }
        if chosen.iter().all(|&c| c.abs_diff(p) > 3) {
            chosen.push(p);
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Finds the most salient pasted rectangle, if any.
pub fn detect_pasted_region(
    img: &GrayImage,
    cfg: &DetectorConfig,
) -> Result<Option<CropBox>, PreprocessError> {
    let (w, h) = (img.width(), img.height());
    if w.min(h) < 32 {
        return Err(PreprocessError::DegenerateImage {
            width: w,
            height: h,
        });
    }
    let steps = Steps::new(img);
    let col_profile: Vec<f32> = (0..w).map(|x| steps.vertical_line(x, 0..h)).collect();
    let row_profile: Vec<f32> = (0..h).map(|y| steps.horizontal_line(y, 0..w)).collect();
    let cols = strongest_lines(&col_profile, cfg.candidates_per_axis);
    let rows = strongest_lines(&row_profile, cfg.candidates_per_axis);

    let frame = (w * h) as f64;
    let mut best: Option<(f32, CropBox)> = None;
    for (i, &left) in cols.iter().enumerate() {
        for &right in &cols[i + 1..] {
            for (j, &top) in rows.iter().enumerate() {
                for &bottom in &rows[j + 1..] {
                    let candidate = CropBox {
                        x: left,
                        y: top,
                        w: right - left,
                        h: bottom - top,
                    };
                    let frac = candidate.area() as f64 / frame;
                    if frac < cfg.min_frac || frac > cfg.max_frac || frac >= FULL_FRAME_FRACTION {
                        continue;
                    }
                    let sides = [
                        steps.prominence(true, left, top..bottom),
                        steps.prominence(true, right, top..bottom),
                        steps.prominence(false, top, left..right),
                        steps.prominence(false, bottom, left..right),
                    ];
                    let score = sides.into_iter().fold(f32::INFINITY, f32::min);
                    if score < cfg.edge_threshold {
                        continue;
                    }
                    if best.map_or(true, |(s, _)| score > s) {
                        best = Some((score, candidate));
                    }
                }
            }
        }
    }
    Ok(best.map(|(_, b)| b))
}

/// Reads `image_id,x,y,w,h` rows; later rows for the same id win.
pub fn load_crop_boxes(
    path: impl AsRef<Path>,
) -> Result<BTreeMap<String, CropBox>, PreprocessError> {
    read_crop_boxes(std::fs::File::open(path)?)
}

pub fn read_crop_boxes(
    reader: impl std::io::Read,
) -> Result<BTreeMap<String, CropBox>, PreprocessError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut out = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() != 5 {
            return Err(PreprocessError::MalformedRow {
                line,
                reason: format!("expected 5 fields, got {}", record.len()),
            });
        }
        let mut nums = [0i64; 4];
        for (k, slot) in nums.iter_mut().enumerate() {
            *slot = record[k + 1]
                .parse()
                .map_err(|e| PreprocessError::MalformedRow {
                    line,
                    reason: format!("field {}: {e}", k + 2),
                })?;
        }
        let [x, y, bw, bh] = nums;
        if bw <= 0 || bh <= 0 || x < 0 || y < 0 {
            return Err(PreprocessError::NegativeDimension { line });
        }
        out.insert(
            record[0].to_string(),
            CropBox {
                x: x as usize,
                y: y as usize,
                w: bw as usize,
                h: bh as usize,
            },
        );
    }
    Ok(out)
}

pub fn write_crop_boxes<'a>(
    path: impl AsRef<Path>,
    boxes: impl IntoIterator<Item = (&'a str, CropBox)>,
) -> Result<(), PreprocessError> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["image_id", "x", "y", "w", "h"])?;
    for (id, b) in boxes {
        wtr.write_record([
            id.to_string(),
            b.x.to_string(),
            b.y.to_string(),
            b.w.to_string(),
            b.h.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Which query variant a branch consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Original,
    Cropped,
}

/// Images routed to the three branches: the global branch sees the crop when a
/// paste was detected and the original otherwise; the local branches always see
/// the original and additionally the crop.
#[derive(Debug, Clone)]
pub struct BranchInputs {
    original: ImageBuf,
    cropped: Option<(CropBox, ImageBuf)>,
}

impl BranchInputs {
    pub fn original(&self) -> &ImageBuf {
        &self.original
    }

    pub fn cropped(&self) -> Option<&ImageBuf> {
        self.cropped.as_ref().map(|(_, img)| img)
    }

    pub fn crop_box(&self) -> Option<CropBox> {
        self.cropped.as_ref().map(|(b, _)| *b)
    }

    pub fn global_variant(&self) -> Variant {
        if self.cropped.is_some() {
            Variant::Cropped
        } else {
            Variant::Original
        }
    }

    pub fn global(&self) -> &ImageBuf {
        self.variant(self.global_variant())
            .expect("global variant always present")
    }

    pub fn local(&self) -> Vec<(Variant, &ImageBuf)> {
        let mut out = vec![(Variant::Original, &self.original)];
        if let Some((_, img)) = &self.cropped {
            out.push((Variant::Cropped, img));
        }
        out
    }

    pub fn variant(&self, v: Variant) -> Option<&ImageBuf> {
        match v {
            Variant::Original => Some(&self.original),
            Variant::Cropped => self.cropped(),
        }
    }
}

pub fn route_variants(
    original: ImageBuf,
    detection: Option<CropBox>,
) -> Result<BranchInputs, PreprocessError> {
    let (w, h) = (original.width(), original.height());
    let cropped = match detection {
        Some(b) if !b.fits(w, h) => {
            return Err(PreprocessError::BoxOutOfBounds {
                box_: b,
                width: w,
                height: h,
            })
        }
        Some(b) if b.frame_fraction(w, h) >= FULL_FRAME_FRACTION => None,
        Some(b) => Some((b, original.crop(&b)?)),
        None => None,
    };
    Ok(BranchInputs { original, cropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{
        apply_attack, procedural_reference, smooth_background, to_grayscale, Attack, AttackSpec,
    };

    #[test]
    fn uniform_image_has_no_detection() {
        let img = GrayImage::filled(120, 90, 0.5).unwrap();
        assert_eq!(
            detect_pasted_region(&img, &DetectorConfig::default()).unwrap(),
            None
        );
    }

    #[test]
    fn tiny_image_is_degenerate() {
        let img = GrayImage::filled(31, 90, 0.5).unwrap();
        assert!(matches!(
            detect_pasted_region(&img, &DetectorConfig::default()),
            Err(PreprocessError::DegenerateImage { .. })
        ));
    }

    #[test]
    fn finds_synthetic_paste() {
        let fg = procedural_reference(11, 200, 160);
        let spec = AttackSpec::new(
            Attack::OverlayPaste {
                bg_width: 400,
                bg_height: 360,
                fg_width: 180,
                fg_height: 150,
                x: 120,
                y: 90,
            },
            5,
        );
        let out = apply_attack(&fg, &spec).unwrap();
        let truth = out.overlay.unwrap().paste_box;
        let found = detect_pasted_region(
            &to_grayscale(&out.image).unwrap(),
            &DetectorConfig::default(),
        )
        .unwrap()
        .expect("detection");
        assert!(found.iou(&truth) >= 0.8, "{found:?} vs {truth:?}");
    }

    #[test]
    fn area_gate_rejects_near_full_frame() {
        // A flat rectangle inset by 1% per side covers ~98% of the frame.
        let (w, h) = (200usize, 200usize);
        let mut data = vec![0.2f32; w * h];
        for y in 2..198 {
            for x in 2..198 {
                data[y * w + x] = 0.8;
            }
        }
        let img = GrayImage::new(w, h, data).unwrap();
        let cfg = DetectorConfig {
            max_frac: 0.9,
            ..DetectorConfig::default()
        };
        assert_eq!(detect_pasted_region(&img, &cfg).unwrap(), None);
        // The same structure at a detectable size is found exactly.
        let mut data = vec![0.2f32; w * h];
        for y in 40..150 {
            for x in 30..170 {
                data[y * w + x] = 0.8;
            }
        }
        let img = GrayImage::new(w, h, data).unwrap();
        assert_eq!(
            detect_pasted_region(&img, &cfg).unwrap(),
            Some(CropBox::new(30, 40, 140, 110).unwrap())
        );
    }

    #[test]
    fn crop_box_csv() {
        let boxes = read_crop_boxes("image_id,x,y,w,h\nq1,10,20,30,40\n".as_bytes()).unwrap();
        assert_eq!(boxes["q1"], CropBox::new(10, 20, 30, 40).unwrap());
        assert!(read_crop_boxes("".as_bytes()).unwrap().is_empty());
        assert!(read_crop_boxes("image_id,x,y,w,h\n".as_bytes())
            .unwrap()
            .is_empty());
        let dup = "image_id,x,y,w,h\nq1,1,1,1,1\nq1,2,2,2,2\n";
        assert_eq!(
            read_crop_boxes(dup.as_bytes()).unwrap()["q1"],
            CropBox::new(2, 2, 2, 2).unwrap()
        );
        assert!(matches!(
            read_crop_boxes("image_id,x,y,w,h\nq1,1,1,0,4\n".as_bytes()),
            Err(PreprocessError::NegativeDimension { line: 2 })
        ));
        assert!(matches!(
            read_crop_boxes("image_id,x,y,w,h\nq1,1,a,3,4\n".as_bytes()),
            Err(PreprocessError::MalformedRow { .. })
        ));
        assert!(matches!(
            read_crop_boxes("image_id,x,y,w,h\nq1,1,3,4\n".as_bytes()),
            Err(PreprocessError::MalformedRow { .. })
        ));
    }

    #[test]
    fn routing_rule() {
        let img = smooth_background(1, 100, 80, 3);
        let none = route_variants(img.clone(), None).unwrap();
        assert_eq!(none.global(), &img);
        assert_eq!(none.local().len(), 1);
        assert_eq!(none.local()[0], (Variant::Original, &img));

        let b = CropBox::new(10, 10, 40, 30).unwrap();
        let routed = route_variants(img.clone(), Some(b)).unwrap();
        let crop = img.crop(&b).unwrap();
        assert_eq!(routed.global(), &crop);
        let local = routed.local();
        assert_eq!(local.len(), 2);
        assert_eq!(local[0].1, &img);
        assert_eq!(local[1].1, &crop);

        let full = route_variants(img.clone(), Some(CropBox::full(100, 80).unwrap())).unwrap();
        assert_eq!(full.global(), &img);
        assert_eq!(full.local().len(), 1);

        let outside = CropBox::new(90, 0, 20, 10).unwrap();
        assert!(matches!(
            route_variants(img, Some(outside)),
            Err(PreprocessError::BoxOutOfBounds { .. })
        ));
    }

    #[test]
    fn iou_basics() {
        let a = CropBox::new(0, 0, 10, 10).unwrap();
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&CropBox::new(20, 20, 5, 5).unwrap()), 0.0);
        let half = CropBox::new(5, 0, 10, 10).unwrap();
        assert!((a.iou(&half) - 50.0 / 150.0).abs() < 1e-12);
        assert!(CropBox::new(0, 0, 0, 3).is_err());
    }
}
