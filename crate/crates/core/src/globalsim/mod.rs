//! Global-embedding branch: whole-image descriptors, cosine top-k recall, and
//! a triplet-trained linear projection over handcrafted base features.

mod file;
mod train;

use std::cmp::Ordering;

use rayon::prelude::*;
use thiserror::Error;

use crate::imaging::{ImageBuf, ImagingError, LUMA_WEIGHTS};

pub use file::{
    load_embeddings, load_projection, read_embeddings, read_projection, save_embeddings,
    save_projection, write_embeddings, write_projection,
};
pub use train::{
    mine_triplets, train_projection, triplet_loss, triplet_objective, TrainConfig, TrainReport,
    TripletBatch, XbmQueue,
};

pub const EMBED_DIM: usize = 256;
pub const BASE_DIM: usize = 512;

const THUMB_GRID: usize = 4;
const HIST_BINS: usize = 256;
const HOG_GRID: usize = 2;
const HOG_BINS: usize = 52;

#[derive(Debug, Error)]
pub enum GlobalError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("degenerate image {width}x{height}")]
    DegenerateImage { width: usize, height: usize },
    #[error("projection produced a zero vector")]
    ZeroVector,
    #[error("embedding store is empty")]
    EmptyStore,
    #[error("negative distance {0}")]
    NegativeDistance(f64),
    #[error("no valid triplets in batch")]
    NoValidTriplets,
    #[error("queue capacity {capacity} is smaller than batch of {batch}")]
    CapacityTooSmall { capacity: usize, batch: usize },
    #[error("loss diverged at epoch {0}")]
    DivergedLoss(usize),
    #[error("expected {expected}-dimensional vectors, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GlobalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding {
    pub image_id: String,
    vector: Vec<f32>,
}

impl GlobalEmbedding {
    /// L2-normalizes `vector`.
    pub fn new(image_id: impl Into<String>, vector: &[f32]) -> Result<Self> {
        if vector.len() != EMBED_DIM {
            return Err(GlobalError::DimensionMismatch {
                expected: EMBED_DIM,
                found: vector.len(),
            });
        }
        let v: Vec<f64> = vector.iter().map(|&x| f64::from(x)).collect();
        Ok(Self {
            image_id: image_id.into(),
            vector: normalized(&v)?.into_iter().map(|x| x as f32).collect(),
        })
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }
}

pub(crate) fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(GlobalError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Handcrafted 512-d base feature: a 4×4 RGB mean thumbnail (48), a 256-bin
/// gray histogram, and 2×2 cells of 52 gradient-orientation bins (208). Each
/// block is L2-normalized on its own.
pub fn baseline_embed(img: &ImageBuf) -> Result<Vec<f64>> {
    let (w, h) = (img.width(), img.height());
    if w < 4 || h < 4 {
        return Err(GlobalError::DegenerateImage {
            width: w,
            height: h,
        });
    }
    let rgb = img.to_rgb();
    let px = rgb.data();
    let mut out = vec![0.0f64; BASE_DIM];

    let (thumb, rest) = out.split_at_mut(THUMB_GRID * THUMB_GRID * 3);
    let (hist, hog) = rest.split_at_mut(HIST_BINS);
    let mut counts = [0usize; THUMB_GRID * THUMB_GRID];
    let mut gray = vec![0.0f64; w * h];
    for y in 0..h {
        let cy = y * THUMB_GRID / h;
        for x in 0..w {
            let cell = cy * THUMB_GRID + x * THUMB_GRID / w;
            let p = &px[(y * w + x) * 3..(y * w + x) * 3 + 3];
            counts[cell] += 1;
            let mut luma = 0.0;
            for c in 0..3 {
                thumb[cell * 3 + c] += f64::from(p[c]);
                luma += f64::from(LUMA_WEIGHTS[c]) * f64::from(p[c]);
            }
            gray[y * w + x] = luma;
            hist[(luma.round() as usize).min(HIST_BINS - 1)] += 1.0;
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        for c in 0..3 {
            thumb[cell * 3 + c] /= (n.max(1) * 255) as f64;
        }
    }

    let bin_width = std::f64::consts::TAU / HOG_BINS as f64;
    for y in 1..h - 1 {
        let cy = y * HOG_GRID / h;
        for x in 1..w - 1 {
            let gx = gray[y * w + x + 1] - gray[y * w + x - 1];
            let gy = gray[(y + 1) * w + x] - gray[(y - 1) * w + x];
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let cell = cy * HOG_GRID + x * HOG_GRID / w;
            let pos = gy.atan2(gx).rem_euclid(std::f64::consts::TAU) / bin_width;
            let b0 = pos.floor();
            let frac = pos - b0;
            let b0 = b0 as usize % HOG_BINS;
            let b1 = (b0 + 1) % HOG_BINS;
            hog[cell * HOG_BINS + b0] += mag * (1.0 - frac);
            hog[cell * HOG_BINS + b1] += mag * frac;
        }
    }

    normalize_in_place(thumb);
    normalize_in_place(hist);
    normalize_in_place(hog);
    Ok(out)
}

/// Linear map from base features to the embedding space, stored row-major as
/// `BASE_DIM × EMBED_DIM`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    matrix: Vec<f64>,
    trained: bool,
}

impl Projection {
    /// Selects the first 256 base dimensions.
    pub fn identity() -> Self {
        let mut matrix = vec![0.0; BASE_DIM * EMBED_DIM];
        for i in 0..EMBED_DIM {
            matrix[i * EMBED_DIM + i] = 1.0;
        }
        Self {
            matrix,
            trained: false,
        }
    }

    pub fn from_matrix(matrix: Vec<f64>, trained: bool) -> Result<Self> {
        if matrix.len() != BASE_DIM * EMBED_DIM {
            return Err(GlobalError::DimensionMismatch {
                expected: BASE_DIM * EMBED_DIM,
                found: matrix.len(),
            });
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(GlobalError::InvalidParams("non-finite projection entry".into()));
        }
        Ok(Self { matrix, trained })
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut [f64] {
        &mut self.matrix
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub(crate) fn set_trained(&mut self) {
        self.trained = true;
    }

    /// Unnormalized projection of a base feature.
    pub fn apply(&self, base: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; EMBED_DIM];
        for (i, &x) in base.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.matrix[i * EMBED_DIM..(i + 1) * EMBED_DIM];
            for (o, &m) in y.iter_mut().zip(row) {
                *o += x * m;
            }
        }
        y
    }

    /// Projected and L2-normalized base feature.
    pub fn embed_base(&self, base: &[f64]) -> Result<Vec<f64>> {
        if base.len() != BASE_DIM {
            return Err(GlobalError::DimensionMismatch {
                expected: BASE_DIM,
                found: base.len(),
            });
        }
        normalized(&self.apply(base))
    }
}

pub fn embed(
    image_id: impl Into<String>,
    img: &ImageBuf,
    projection: &Projection,
) -> Result<GlobalEmbedding> {
    let v = projection.embed_base(&baseline_embed(img)?)?;
    Ok(GlobalEmbedding {
        image_id: image_id.into(),
        vector: v.into_iter().map(|x| x as f32).collect(),
    })
}

/// Row-normalized reference embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    matrix: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(embeddings: Vec<GlobalEmbedding>) -> Self {
        let mut ids = Vec::with_capacity(embeddings.len());
        let mut matrix = Vec::with_capacity(embeddings.len() * EMBED_DIM);
        for e in embeddings {
            ids.push(e.image_id);
            matrix.extend_from_slice(&e.vector);
        }
        Self { ids, matrix }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * EMBED_DIM..(i + 1) * EMBED_DIM]
    }

    pub fn get(&self, i: usize) -> GlobalEmbedding {
        GlobalEmbedding {
            image_id: self.ids[i].clone(),
            vector: self.row(i).to_vec(),
        }
    }

    pub fn embeddings(&self) -> impl Iterator<Item = GlobalEmbedding> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalCandidate {
    pub reference_id: String,
    pub similarity: f32,
}

/// The `k` most cosine-similar references with similarity ≥ `threshold`,
/// ordered by similarity descending, then id ascending.
pub fn topk_global(
    store: &EmbeddingStore,
    q: &GlobalEmbedding,
    k: usize,
    threshold: f32,
) -> Result<Vec<GlobalCandidate>> {
    if store.is_empty() {
        return Err(GlobalError::EmptyStore);
    }
    let sims: Vec<(f32, usize)> = (0..store.len())
        .into_par_iter()
        .map(|i| (dot(store.row(i), &q.vector), i))
        .filter(|&(s, _)| s >= threshold)
        .collect();
    let mut sims = sims;
    let order = |a: &(f32, usize), b: &(f32, usize)| -> Ordering {
        b.0.total_cmp(&a.0).then_with(|| store.ids[a.1].cmp(&store.ids[b.1]))
    };
    if sims.len() > k && k > 0 {
        sims.select_nth_unstable_by(k, order);
    }
    sims.truncate(k);
    sims.sort_by(order);
    Ok(sims
        .into_iter()
        .map(|(s, i)| GlobalCandidate {
            reference_id: store.ids[i].clone(),
            similarity: s,
        })
        .collect())
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for j in 0..8 {
            acc[j] += ca[j] * cb[j];
        }
    }
    acc.iter().sum()
}
