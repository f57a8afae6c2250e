//! Query-time retrieval: variant routing, global and local recall, and fused
//! verification scores.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{
    discover_images, embed_images, gray_at_min_edge, load_projection_or_identity, normalize_size, required,
    run_in_pool, PipelineConfig, PipelineError, Result,
};
use crate::evalkit::{self, PrCurve};
use crate::globalsim::{self, topk_global, EmbeddingStore, Projection};
use crate::imaging::{load_image, to_grayscale, ImageBuf};
use crate::matcher::{fuse, local_recall, match_with_flip, merge_votes_max, Branch, QueryFeatures, ScoredPair};
use crate::preprocess::{self, detect_pasted_region, route_variants, CropBox, PreprocessError};
use crate::sift::FeatureSet;
use crate::vecindex::{self, DescriptorIndex};

/// Everything queried at run time.
pub struct Corpus {
    pub index: DescriptorIndex,
    pub embeddings: EmbeddingStore,
    pub projection: Projection,
    references: Vec<FeatureSet>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(index: DescriptorIndex, embeddings: EmbeddingStore, projection: Projection) -> Self {
        let references = index.feature_sets();
        let by_id = references
            .iter()
            .enumerate()
            .map(|(i, r)| (r.image_id.clone(), i))
            .collect();
        Self {
            index,
            embeddings,
            projection,
            references,
            by_id,
        }
    }

    /// Index from `paths.index_file`; embeddings from `paths.embedding_file`
    /// or, failing that, computed from `paths.corpus_dir`.
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let index_path = required(&cfg.paths.index_file, "paths.index_file")?;
        if !index_path.exists() {
            return Err(PipelineError::MissingIndex(index_path.to_path_buf()));
        }
        let index = vecindex::load(index_path)?;
        let projection = load_projection_or_identity(cfg)?;
        let embeddings = match (&cfg.paths.embedding_file, &cfg.paths.corpus_dir) {
            (Some(p), _) if p.exists() => globalsim::load_embeddings(p)?,
            (_, Some(dir)) => {
                let entries = discover_images(dir)?;
                if entries.is_empty() {
                    return Err(PipelineError::MissingEmbeddings);
                }
                run_in_pool(cfg, || embed_images(&entries, &projection, cfg.min_edge))?.0
            }
            _ => return Err(PipelineError::MissingEmbeddings),
        };
        if embeddings.is_empty() {
            return Err(PipelineError::MissingEmbeddings);
        }
        Ok(Self::new(index, EmbeddingStore::new(embeddings), projection))
    }

    pub fn reference(&self, id: &str) -> Option<&FeatureSet> {
        self.by_id.get(id).map(|&i| &self.references[i])
    }
}

/// Per-query record of what each branch saw.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTrace {
    pub query_id: String,
    pub crop_box: Option<CropBox>,
    pub global: Vec<String>,
    pub local_original: Vec<String>,
    pub local_cropped: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Scored pairs, grouped by query in query-id order.
    pub pairs: Vec<ScoredPair>,
    pub traces: Vec<QueryTrace>,
    /// Queries that could not be read, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl RunOutput {
    /// Pairs recalled by a local branch, scored by the local branches alone.
    pub fn local_only(&self) -> Vec<ScoredPair> {
        self.pairs
            .iter()
            .filter(|p| p.local_original + p.local_cropped > 0)
            .map(|p| ScoredPair {
                global: 0,
                score: p.local_original + p.local_cropped,
                ..p.clone()
            })
            .collect()
    }
}

fn local_candidates(corpus: &Corpus, q: &QueryFeatures, cfg: &PipelineConfig) -> Result<Vec<String>> {
    let ids = corpus.index.image_ids();
    let search = |fs: &FeatureSet| -> Result<_> {
        let hits = corpus.index.search(&fs.descriptors, 1, cfg.index.nprobe)?;
        Ok(local_recall(&hits, ids, &cfg.matcher))
    };
    let plain = search(q.original())?;
    let mirrored = search(q.flipped()?)?;
    Ok(merge_votes_max(&plain, &mirrored)
        .into_iter()
        .map(|c| c.reference_id)
        .collect())
}

/// `b` given on a `from` = (w, h) raster, mapped onto a `to` raster.
fn rescale_box(b: CropBox, from: (usize, usize), to: (usize, usize)) -> CropBox {
    let sx = to.0 as f64 / from.0 as f64;
    let sy = to.1 as f64 / from.1 as f64;
    let x0 = ((b.x as f64 * sx).floor() as usize).min(to.0 - 1);
    let y0 = ((b.y as f64 * sy).floor() as usize).min(to.1 - 1);
    let x1 = (((b.x + b.w) as f64 * sx).ceil() as usize).clamp(x0 + 1, to.0);
    let y1 = (((b.y + b.h) as f64 * sy).ceil() as usize).clamp(y0 + 1, to.1);
    CropBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    }
}

/// Retrieval and scoring for one query image. `external_boxes`, when given,
/// replaces the paste detector.
pub fn score_query(
    corpus: &Corpus,
    cfg: &PipelineConfig,
    query_id: &str,
    image: &ImageBuf,
    external_boxes: Option<&BTreeMap<String, CropBox>>,
) -> Result<(Vec<ScoredPair>, QueryTrace)> {
    let original = normalize_size(image, cfg.min_edge);
    let detection = match external_boxes {
        Some(boxes) => match boxes.get(query_id) {
            Some(&b) if !b.fits(image.width(), image.height()) => {
                return Err(PreprocessError::BoxOutOfBounds {
                    box_: b,
                    width: image.width(),
                    height: image.height(),
                }
                .into())
            }
            Some(&b) => Some(rescale_box(
                b,
                (image.width(), image.height()),
                (original.width(), original.height()),
            )),
            None => None,
        },
        None => match detect_pasted_region(&to_grayscale(&original)?, &cfg.detector) {
            Ok(d) => d,
            Err(e) => {
                log::debug!("{query_id}: no overlay detection: {e}");
                None
            }
        },
    };
    let routed = route_variants(original, detection)?;
    let cropped = routed.cropped().map(|c| normalize_size(c, cfg.min_edge));
    let global_image = cropped.as_ref().unwrap_or(routed.original());
    let on = &cfg.branches;

    let global = if !on.global {
        Vec::new()
    } else {
        match globalsim::embed(query_id, global_image, &corpus.projection) {
            Ok(q) => topk_global(&corpus.embeddings, &q, cfg.matcher.global_k, cfg.matcher.global_threshold)?
                .into_iter()
                .map(|c| c.reference_id)
                .collect(),
            Err(e) => {
                log::debug!("{query_id}: no global embedding: {e}");
                Vec::new()
            }
        }
    };

    let qf_original = QueryFeatures::extract(query_id, gray_at_min_edge(routed.original(), cfg.min_edge)?, &cfg.sift)?;
    let qf_cropped = cropped
        .as_ref()
        .filter(|_| on.global || on.local_cropped)
        .map(|c| -> Result<_> { Ok(QueryFeatures::extract(query_id, to_grayscale(c)?, &cfg.sift)?) })
        .transpose()?;
    let local_original = if on.local_original {
        local_candidates(corpus, &qf_original, cfg)?
    } else {
        Vec::new()
    };
    let local_cropped = qf_cropped
        .as_ref()
        .filter(|_| on.local_cropped)
        .map(|q| local_candidates(corpus, q, cfg))
        .transpose()?;

    let mut cache: HashMap<(bool, String), u64> = HashMap::new();
    let ratio = cfg.matcher.ratio_threshold;
    let pairs = fuse(
        query_id,
        &global,
        &local_original,
        local_cropped.as_deref(),
        |branch, id| -> Result<u64> {
            let use_crop = match branch {
                Branch::Global => qf_cropped.is_some(),
                Branch::LocalOriginal => false,
                Branch::LocalCropped => true,
            };
            if let Some(&s) = cache.get(&(use_crop, id.to_string())) {
                return Ok(s);
            }
            let q = if use_crop { qf_cropped.as_ref() } else { Some(&qf_original) };
            let s = match (q, corpus.reference(id)) {
                (Some(q), Some(r)) => match_with_flip(q, r, ratio)? as u64,
                _ => 0,
            };
            cache.insert((use_crop, id.to_string()), s);
            Ok(s)
        },
    )?;
    let trace = QueryTrace {
        query_id: query_id.to_string(),
        crop_box: routed.crop_box(),
        global,
        local_original,
        local_cropped,
    };
    Ok((pairs, trace))
}

/// Scores every image under `query_dir`, in id order. An empty directory
/// gives an empty output.
pub fn run_queries(corpus: &Corpus, cfg: &PipelineConfig, query_dir: impl AsRef<Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let entries = discover_images(query_dir)?;
    let boxes = cfg
        .paths
        .crop_boxes
        .as_ref()
        .map(preprocess::load_crop_boxes)
        .transpose()?;
    let results: Vec<Result<(Vec<ScoredPair>, QueryTrace)>> = run_in_pool(cfg, || {
        entries
            .par_iter()
            .map(|e| {
                let img = load_image(&e.path)?;
                score_query(corpus, cfg, &e.id, &img, boxes.as_ref())
            })
            .collect()
    })?;
    let mut out = RunOutput {
        pairs: Vec::new(),
        traces: Vec::new(),
        skipped: Vec::new(),
    };
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok((pairs, trace)) => {
                out.pairs.extend(pairs);
                out.traces.push(trace);
            }
            Err(PipelineError::Imaging(err)) => {
                log::warn!("skipping query {}: {err}", e.path.display());
                out.skipped.push((e.id.clone(), err.to_string()));
            }
            Err(err) => return Err(err),
        }
    }
    Ok(out)
}

/// Files written by [`cmd_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub submission: PathBuf,
    pub config: PathBuf,
    pub pr_curve: Option<PathBuf>,
}

/// Full query run: writes `submission.csv` and `config.toml` into the output
/// directory, plus `pr.csv` when ground truth is configured.
pub fn cmd_run(cfg: &PipelineConfig) -> Result<(RunOutput, Option<PrCurve>, RunArtifacts)> {
    cfg.validate()?;
    let query_dir = required(&cfg.paths.query_dir, "paths.query_dir")?;
    let corpus = Corpus::load(cfg)?;
    let output = run_queries(&corpus, cfg, query_dir)?;
    let out_dir = &cfg.paths.output_dir;
    std::fs::create_dir_all(out_dir)?;
    let submission = out_dir.join("submission.csv");
    evalkit::write_submission(&output.pairs, &submission)?;
    let config = out_dir.join("config.toml");
    cfg.save(&config)?;
    let (curve, pr_curve) = match &cfg.paths.ground_truth {
        Some(gt) if !output.traces.is_empty() => {
            let gt = evalkit::load_ground_truth(gt)?;
            let curve = evalkit::micro_ap_pairs(&output.pairs, &gt)?;
            let path = out_dir.join("pr.csv");
            evalkit::write_pr_csv(&curve, &path)?;
            log::info!("micro-AP {:.4}", curve.micro_ap);
            (Some(curve), Some(path))
        }
        _ => (None, None),
    };
    Ok((
        output,
        curve,
        RunArtifacts {
            submission,
            config,
            pr_curve,
        },
    ))
}
