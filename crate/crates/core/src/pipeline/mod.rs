//! End-to-end commands over directories of images and the on-disk artifacts
//! (feature archives, index, embeddings, projection, CSVs).
//!
//! Work items are processed on a rayon pool and merged in input order, so every
//! output is independent of the pool size.

mod augment;
mod config;
mod run;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::evalkit::{self, EvalError, PrCurve};
use crate::globalsim::{self, baseline_embed, GlobalEmbedding, GlobalError, Projection};
use crate::imaging::{
    load_image, min_edge_dims, procedural_reference, resize_image, to_grayscale, GrayImage, ImageBuf,
    ImagingError,
};
use crate::matcher::MatcherError;
use crate::preprocess::{self, detect_pasted_region, CropBox, PreprocessError};
use crate::sift::{self, extract_with_id, FeatureSet, SiftError, SiftParams};
use crate::vecindex::{self, DescriptorIndex, IndexError};

pub use augment::{
    cmd_augment, generate_manifest, random_attack, read_manifest, write_manifest, AugmentSummary,
    GenerationSpec, ManifestRow,
};
pub use config::{Branches, IndexConfig, Paths, PipelineConfig, TrainSetup, DEFAULT_MIN_EDGE};
pub use run::{cmd_run, run_queries, score_query, Corpus, QueryTrace, RunArtifacts, RunOutput};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no images found under {0}")]
    NoImagesFound(PathBuf),
    #[error("index file {0} not found")]
    MissingIndex(PathBuf),
    #[error("no reference embeddings: set paths.embedding_file or paths.corpus_dir")]
    MissingEmbeddings,
    #[error("config value `{0}` is required for this command")]
    MissingPath(&'static str),
    #[error("{0}")]
    Config(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Sift(#[from] SiftError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Global(#[from] GlobalError),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    TomlRead(#[from] toml::de::Error),
    #[error(transparent)]
    TomlWrite(#[from] toml::ser::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// An image file and the id derived from its path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEntry {
    /// Path relative to the root, without extension, `/`-separated.
    pub id: String,
    pub path: PathBuf,
}

/// Recursive listing of png/jpg/jpeg files, sorted by id.
pub fn discover_images(root: impl AsRef<Path>) -> Result<Vec<ImageEntry>> {
    let root = root.as_ref();
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase);
            if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
                continue;
            }
            let rel = path.strip_prefix(root).unwrap_or(&path).with_extension("");
            let id = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            out.push(ImageEntry { id, path });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id).then_with(|| a.path.cmp(&b.path)));
    Ok(out)
}

/// Colour image rescaled so its shorter edge equals `min_edge`.
pub fn normalize_size(img: &ImageBuf, min_edge: usize) -> ImageBuf {
    let (w, h) = min_edge_dims(img.width(), img.height(), min_edge);
    resize_image(img, w, h)
}

pub fn gray_at_min_edge(img: &ImageBuf, min_edge: usize) -> Result<GrayImage> {
    Ok(to_grayscale(&normalize_size(img, min_edge))?)
}

fn run_in_pool<T: Send>(cfg: &PipelineConfig, f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(cfg.pool()?.install(f))
}

fn required<'a>(p: &'a Option<PathBuf>, name: &'static str) -> Result<&'a Path> {
    p.as_deref().ok_or(PipelineError::MissingPath(name))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractSummary {
    pub extracted: usize,
    /// Images that could not be read, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// SIFT features of every image, in id order; unreadable images are skipped.
pub fn extract_features(
    entries: &[ImageEntry],
    params: &SiftParams,
    min_edge: usize,
) -> (Vec<FeatureSet>, Vec<(String, String)>) {
    let results: Vec<Result<FeatureSet>> = entries
        .par_iter()
        .map(|e| {
            let img = load_image(&e.path)?;
            let gray = gray_at_min_edge(&img, min_edge)?;
            Ok(extract_with_id(&gray, params, &e.id)?)
        })
        .collect();
    let mut sets = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(fs) => sets.push(fs),
            Err(err) => {
                log::warn!("skipping {}: {err}", e.path.display());
                skipped.push((e.id.clone(), err.to_string()));
            }
        }
    }
    (sets, skipped)
}

/// Extracts a directory into a feature archive.
pub fn cmd_extract(
    cfg: &PipelineConfig,
    dir: impl AsRef<Path>,
    out: impl AsRef<Path>,
) -> Result<ExtractSummary> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let entries = discover_images(dir)?;
    if entries.is_empty() {
        return Err(PipelineError::NoImagesFound(dir.to_path_buf()));
    }
    let (sets, skipped) = run_in_pool(cfg, || extract_features(&entries, &cfg.sift, cfg.min_edge))?;
    sift::write_archive(out, &sets)?;
    log::info!("extracted {} images, skipped {}", sets.len(), skipped.len());
    Ok(ExtractSummary {
        extracted: sets.len(),
        skipped,
    })
}

pub fn build_index(cfg: &PipelineConfig, sets: &[FeatureSet]) -> Result<DescriptorIndex> {
    run_in_pool(cfg, || {
        if cfg.index.partitioned {
            vecindex::build_partitioned(sets, cfg.index.dtype, &cfg.partition_params())
        } else {
            vecindex::build_flat(sets, cfg.index.dtype)
        }
    })?
    .map_err(Into::into)
}

/// Builds the descriptor index from a feature archive.
pub fn cmd_index(cfg: &PipelineConfig, features: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<DescriptorIndex> {
    cfg.validate()?;
    let sets = sift::read_archive(features)?;
    let index = build_index(cfg, &sets)?;
    vecindex::save(&index, out)?;
    log::info!("indexed {} descriptors from {} images", index.len(), sets.len());
    Ok(index)
}

pub fn load_projection_or_identity(cfg: &PipelineConfig) -> Result<Projection> {
    match &cfg.paths.projection_file {
        Some(p) => Ok(globalsim::load_projection(p)?),
        None => Ok(Projection::identity()),
    }
}

/// Global embeddings of every image, in id order; unreadable images are skipped.
pub fn embed_images(
    entries: &[ImageEntry],
    projection: &Projection,
    min_edge: usize,
) -> (Vec<GlobalEmbedding>, Vec<(String, String)>) {
    let results: Vec<Result<GlobalEmbedding>> = entries
        .par_iter()
        .map(|e| {
            let img = normalize_size(&load_image(&e.path)?, min_edge);
            Ok(globalsim::embed(e.id.clone(), &img, projection)?)
        })
        .collect();
    let mut out = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(x) => out.push(x),
            Err(err) => {
                log::warn!("skipping {}: {err}", e.path.display());
                skipped.push((e.id.clone(), err.to_string()));
            }
        }
    }
    (out, skipped)
}

/// Embeds a directory with the configured projection (identity if none).
pub fn cmd_embed(cfg: &PipelineConfig, dir: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<usize> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let entries = discover_images(dir)?;
    if entries.is_empty() {
        return Err(PipelineError::NoImagesFound(dir.to_path_buf()));
    }
    let projection = load_projection_or_identity(cfg)?;
    let (embs, _) = run_in_pool(cfg, || embed_images(&entries, &projection, cfg.min_edge))?;
    globalsim::save_embeddings(&embs, out)?;
    Ok(embs.len())
}

/// Base features of each reference and of `views` random augmentations of
/// it, labelled with the reference ordinal.
pub fn training_set(
    entries: &[ImageEntry],
    views: usize,
    min_edge: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<u32>)> {
    let kinds = GenerationSpec::default().kinds;
    let per_image: Vec<Result<Vec<Vec<f64>>>> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let img = normalize_size(&load_image(&e.path)?, min_edge);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut feats = vec![baseline_embed(&img)?];
            for _ in 0..views {
                let kind = *kinds.choose(&mut rng).expect("non-empty kinds");
                let spec = random_attack(&mut rng, kind, img.width(), img.height());
                let view = crate::imaging::apply_attack(&img, &spec)?.image;
                feats.push(baseline_embed(&normalize_size(&view, min_edge))?);
            }
            Ok(feats)
        })
        .collect();
    let mut features = Vec::new();
    let mut ids = Vec::new();
    for (i, r) in per_image.into_iter().enumerate() {
        for f in r? {
            features.push(f);
            ids.push(i as u32);
        }
    }
    Ok((features, ids))
}

/// Trains the projection on augmented views of the corpus; writes the
/// projection and a per-epoch loss CSV.
pub fn cmd_train(cfg: &PipelineConfig, corpus: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<Vec<f64>> {
    cfg.validate()?;
    let corpus = corpus.as_ref();
    let entries = discover_images(corpus)?;
    if entries.is_empty() {
        return Err(PipelineError::NoImagesFound(corpus.to_path_buf()));
    }
    let out = out.as_ref();
    let report = run_in_pool(cfg, || -> Result<_> {
        let (features, ids) = training_set(&entries, cfg.train.views_per_image, cfg.min_edge, cfg.seed)?;
        Ok(globalsim::train_projection(&features, &ids, &cfg.train_config())?)
    })??;
    globalsim::save_projection(&report.projection, out)?;
    let trace_path = out.with_extension("loss.csv");
    let mut w = csv::Writer::from_path(&trace_path)?;
    w.write_record(["epoch", "mean_loss"])?;
    for (epoch, loss) in report.loss_trace.iter().enumerate() {
        log::info!("epoch {epoch}: mean triplet loss {loss:.6}");
        w.write_record([epoch.to_string(), loss.to_string()])?;
    }
    w.flush()?;
    Ok(report.loss_trace)
}

/// Runs the paste detector over a directory and writes `image_id,x,y,w,h`
/// rows for every detection.
pub fn cmd_detect_overlay(
    cfg: &PipelineConfig,
    dir: impl AsRef<Path>,
    out: impl AsRef<Path>,
) -> Result<Vec<(String, CropBox)>> {
    cfg.validate()?;
    let entries = discover_images(dir)?;
    let found: Vec<Result<Option<(String, CropBox)>>> = run_in_pool(cfg, || {
        entries
            .par_iter()
            .map(|e| {
                let gray = to_grayscale(&load_image(&e.path)?)?;
                Ok(detect_pasted_region(&gray, &cfg.detector)?.map(|b| (e.id.clone(), b)))
            })
            .collect()
    })?;
    let mut boxes = Vec::new();
    for r in found {
        if let Some(b) = r? {
            boxes.push(b);
        }
    }
    preprocess::write_crop_boxes(out, boxes.iter().map(|(id, b)| (id.as_str(), *b)))?;
    Ok(boxes)
}

/// Scores a submission CSV against ground truth, optionally writing the PR curve.
pub fn cmd_eval(
    submission: impl AsRef<Path>,
    ground_truth: impl AsRef<Path>,
    pr_out: Option<&Path>,
) -> Result<PrCurve> {
    let sub = evalkit::load_submission(submission)?;
    let gt = evalkit::load_ground_truth(ground_truth)?;
    let curve = evalkit::micro_ap(&sub, &gt)?;
    if let Some(p) = pr_out {
        evalkit::write_pr_csv(&curve, p)?;
    }
    Ok(curve)
}

/// Writes `count` procedural reference images `ref_00000.png`, … with shorter
/// edges between `min_edge` and `max_edge`.
pub fn cmd_synth(
    cfg: &PipelineConfig,
    out_dir: impl AsRef<Path>,
    count: usize,
    min_edge: usize,
    max_edge: usize,
) -> Result<Vec<PathBuf>> {
    use rand::Rng;
    if min_edge < 32 || max_edge < min_edge {
        return Err(PipelineError::Config(format!("edge range {min_edge}..={max_edge}")));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims: Vec<(usize, usize)> = (0..count)
        .map(|_| (rng.gen_range(min_edge..=max_edge), rng.gen_range(min_edge..=max_edge)))
        .collect();
    run_in_pool(cfg, || {
        dims.par_iter()
            .enumerate()
            .map(|(i, &(w, h))| {
                let path = out_dir.join(format!("ref_{i:05}.png"));
                procedural_reference(synth_seed(cfg.seed, i as u64), w, h).save_png(&path)?;
                Ok(path)
            })
            .collect()
    })?
}

/// Seed of the `i`-th synthetic reference for a run seed.
pub fn synth_seed(run_seed: u64, i: u64) -> u64 {
    run_seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ i.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}
