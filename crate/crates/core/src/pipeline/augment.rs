//! Attacked query sets: manifest I/O, random manifest generation, and
//! rendering of query images with their ground truth.

use std::path::{Path, PathBuf};

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{discover_images, run_in_pool, PipelineConfig, PipelineError, Result};
use crate::evalkit::{write_ground_truth, GroundTruth};
use crate::imaging::{apply_attack, load_image, procedural_reference, Attack, AttackKind, AttackSpec};
use crate::preprocess::{write_crop_boxes, CropBox};

/// Mixed into a distractor row's seed to pick its procedural source image.
const DISTRACTOR_SALT: u64 = 0xd157_7ac7_0000_0001;

/// One query to render. Rows without a source are distractors drawn from a
/// procedural image that is not in the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub query_id: String,
    pub source_reference_id: Option<String>,
    pub attack: AttackSpec,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i + 2, |p| p.line() as usize);
        let bad = |reason: String| PipelineError::Manifest { line, reason };
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", rec.len())));
        }
        let seed: u64 = rec[4].parse().map_err(|e| bad(format!("seed: {e}")))?;
        let attack = AttackSpec::from_parts(&rec[2], &rec[3], seed)?;
        if rec[0].is_empty() {
            return Err(bad("empty query_id".into()));
        }
        rows.push(ManifestRow {
            query_id: rec[0].to_string(),
            source_reference_id: (!rec[1].is_empty()).then(|| rec[1].to_string()),
            attack,
        });
    }
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["query_id", "source_reference_id", "attack_kind", "params_json", "seed"])?;
    for r in rows {
        let (kind, params) = r.attack.to_parts();
        w.write_record([
            r.query_id.as_str(),
            r.source_reference_id.as_deref().unwrap_or(""),
            &kind,
            &params,
            &r.attack.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Random query-set recipe: `attacked` edited copies of corpus images with
/// kinds taken round-robin from `kinds`, plus `distractors` unrelated images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSpec {
    pub attacked: usize,
    pub distractors: usize,
    pub kinds: Vec<AttackKind>,
    /// Shorter-edge range of distractor source images.
    pub distractor_edges: (usize, usize),
}

impl Default for GenerationSpec {
    fn default() -> Self {
        Self {
            attacked: 150,
            distractors: 150,
            kinds: vec![
                AttackKind::Crop,
                AttackKind::Rotate,
                AttackKind::FlipH,
                AttackKind::GaussianBlur,
                AttackKind::JpegRecompress,
                AttackKind::OverlayPaste,
            ],
            distractor_edges: (300, 400),
        }
    }
}

/// Attack of `kind` with parameters drawn for a `width × height` source.
pub fn random_attack(rng: &mut impl Rng, kind: AttackKind, width: usize, height: usize) -> AttackSpec {
    let attack = match kind {
        AttackKind::Crop => {
            let w = rng.gen_range(0.5..0.85);
            let h = rng.gen_range(0.5..0.85);
            Attack::Crop {
                x: rng.gen_range(0.0..1.0 - w),
                y: rng.gen_range(0.0..1.0 - h),
                w,
                h,
            }
        }
        AttackKind::Rotate => {
            let d: f32 = rng.gen_range(5.0..30.0);
            Attack::Rotate {
                degrees: if rng.gen_bool(0.5) { d } else { -d },
            }
        }
        AttackKind::FlipH => Attack::FlipH,
        AttackKind::GaussianBlur => Attack::GaussianBlur {
            sigma: rng.gen_range(1.0..3.0),
        },
        AttackKind::JpegRecompress => Attack::JpegRecompress {
            quality: rng.gen_range(20..=60),
        },
        AttackKind::Brightness => {
            let d: f32 = rng.gen_range(0.1..0.3);
            Attack::Brightness {
                delta: if rng.gen_bool(0.5) { d } else { -d },
            }
        }
        AttackKind::Contrast => Attack::Contrast {
            factor: rng.gen_range(0.5..1.5),
        },
        AttackKind::Grayscale => Attack::Grayscale,
        AttackKind::Pad => Attack::Pad {
            frac: rng.gen_range(0.05..0.2),
            value: rng.gen(),
        },
        AttackKind::Resize => Attack::Resize {
            scale: rng.gen_range(0.5..1.5),
        },
        AttackKind::OverlayPaste => {
            let (bg_width, bg_height) = (width, height);
            let s = rng.gen_range(0.45..0.7);
            let fg_width = ((width as f64 * s).round() as usize).max(1);
            let fg_height = ((height as f64 * s).round() as usize).max(1);
            Attack::OverlayPaste {
                bg_width,
                bg_height,
                fg_width,
                fg_height,
                x: rng.gen_range(0..=bg_width - fg_width),
                y: rng.gen_range(0..=bg_height - fg_height),
            }
        }
        AttackKind::Pixelate => Attack::Pixelate {
            block: rng.gen_range(2..=4),
        },
    };
    AttackSpec::new(attack, rng.gen())
}

/// Procedural stand-in for a distractor row: unrelated to any corpus image.
fn distractor_source(seed: u64, edges: (usize, usize)) -> crate::imaging::ImageBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DISTRACTOR_SALT);
    let w = rng.gen_range(edges.0..=edges.1);
    let h = rng.gen_range(edges.0..=edges.1);
    procedural_reference(rng.gen(), w, h)
}

/// Draws a manifest over the corpus images in `ref_dir`.
pub fn generate_manifest(
    cfg: &PipelineConfig,
    ref_dir: impl AsRef<Path>,
    spec: &GenerationSpec,
) -> Result<Vec<ManifestRow>> {
    if spec.kinds.is_empty() {
        return Err(PipelineError::Config("generation needs at least one attack kind".into()));
    }
    let (lo, hi) = spec.distractor_edges;
    if lo < 32 || hi < lo {
        return Err(PipelineError::Config(format!("distractor edge range {lo}..={hi}")));
    }
    let ref_dir = ref_dir.as_ref();
    let refs = discover_images(ref_dir)?;
    if refs.is_empty() && spec.attacked > 0 {
        return Err(PipelineError::NoImagesFound(ref_dir.to_path_buf()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6175_676d_656e_7400);
    let sources: Vec<usize> = if spec.attacked <= refs.len() {
        let mut s = sample(&mut rng, refs.len(), spec.attacked).into_vec();
        s.sort_unstable();
        s
    } else {
        (0..spec.attacked).map(|_| rng.gen_range(0..refs.len())).collect()
    };
    let dims: Vec<(usize, usize)> = run_in_pool(cfg, || {
        sources
            .par_iter()
            .map(|&s| {
                let d = image::image_dimensions(&refs[s].path)
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", refs[s].path.display())))?;
                Ok((d.0 as usize, d.1 as usize))
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut rows = Vec::with_capacity(spec.attacked + spec.distractors);
    for (i, (&s, &(w, h))) in sources.iter().zip(&dims).enumerate() {
        let kind = spec.kinds[i % spec.kinds.len()];
        rows.push(ManifestRow {
            query_id: String::new(),
            source_reference_id: Some(refs[s].id.clone()),
            attack: random_attack(&mut rng, kind, w, h),
        });
    }
    for _ in 0..spec.distractors {
        let kind = *spec.kinds.choose(&mut rng).expect("non-empty kinds");
        let seed: u64 = rng.gen();
        let src = distractor_source(seed, spec.distractor_edges);
        let mut attack = random_attack(&mut rng, kind, src.width(), src.height());
        attack.seed = seed;
        rows.push(ManifestRow {
            query_id: String::new(),
            source_reference_id: None,
            attack,
        });
    }
    rows.shuffle(&mut rng);
    for (i, r) in rows.iter_mut().enumerate() {
        r.query_id = format!("q{i:05}");
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSummary {
    pub query_dir: PathBuf,
    pub ground_truth: PathBuf,
    pub queries: usize,
    pub true_pairs: usize,
    pub overlay_boxes: Vec<(String, CropBox)>,
}

/// Renders every manifest row to `out_dir/queries/<query_id>.png` and writes
/// `manifest.csv`, `ground_truth.csv` and `overlay_boxes.csv` beside it.
pub fn cmd_augment(
    cfg: &PipelineConfig,
    ref_dir: impl AsRef<Path>,
    rows: &[ManifestRow],
    distractor_edges: (usize, usize),
    out_dir: impl AsRef<Path>,
) -> Result<AugmentSummary> {
    let ref_dir = ref_dir.as_ref();
    let out_dir = out_dir.as_ref();
    let query_dir = out_dir.join("queries");
    std::fs::create_dir_all(&query_dir)?;
    let refs = discover_images(ref_dir)?;
    let by_id: std::collections::HashMap<&str, &Path> =
        refs.iter().map(|e| (e.id.as_str(), e.path.as_path())).collect();

    let rendered: Vec<Result<Option<CropBox>>> = run_in_pool(cfg, || {
        rows.par_iter()
            .map(|row| {
                let source = match &row.source_reference_id {
                    Some(id) => {
                        let path = by_id.get(id.as_str()).ok_or_else(|| {
                            PipelineError::Config(format!("{}: unknown reference {id}", row.query_id))
                        })?;
                        load_image(path)?
                    }
                    None => distractor_source(row.attack.seed, distractor_edges),
                };
                let attacked = apply_attack(&source, &row.attack)?;
                attacked
                    .image
                    .save_png(query_dir.join(format!("{}.png", row.query_id)))?;
                Ok(attacked.overlay.map(|o| o.paste_box))
            })
            .collect()
    })?;

    let mut overlay_boxes = Vec::new();
    for (row, r) in rows.iter().zip(rendered) {
        if let Some(b) = r? {
            overlay_boxes.push((row.query_id.clone(), b));
        }
    }
    let gt = GroundTruth::from_pairs(
        rows.iter()
            .filter_map(|r| r.source_reference_id.as_ref().map(|s| (r.query_id.clone(), s.clone()))),
    );
    let gt_path = out_dir.join("ground_truth.csv");
    write_ground_truth(&gt, &gt_path)?;
    write_manifest(rows, out_dir.join("manifest.csv"))?;
    write_crop_boxes(
        out_dir.join("overlay_boxes.csv"),
        overlay_boxes.iter().map(|(id, b)| (id.as_str(), *b)),
    )?;
    Ok(AugmentSummary {
        query_dir,
        ground_truth: gt_path,
        queries: rows.len(),
        true_pairs: gt.positives(),
        overlay_boxes,
    })
}
