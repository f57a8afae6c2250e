//! Exact and inverted-file top-k L2 search over SIFT descriptors.
//!
//! Descriptors are stored row-major in one blob, as bytes, half floats or
//! single floats. Every row has an owner: the reference image it came from and
//! its keypoint ordinal inside that image. Results are ordered by squared
//! distance, then by reference id (lexicographic), then keypoint ordinal.

mod file;
mod kmeans;

use std::collections::HashSet;
use std::str::FromStr;

use half::f16;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sift::{FeatureSet, SiftDescriptor, DESCRIPTOR_LEN};

pub use file::{load, save};

const DIM: usize = DESCRIPTOR_LEN;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("no descriptors to index")]
    EmptyCorpus,
    #[error("expected {expected}-dimensional vectors, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{count} vectors cannot fill {nlist} lists")]
    TooFewVectors { count: usize, nlist: usize },
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("bad index magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("index version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed index file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = IndexError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F16,
    F32,
}

impl Dtype {
    pub(crate) fn code(self) -> u8 {
        match self {
            Dtype::U8 => 0,
            Dtype::F16 => 1,
            Dtype::F32 => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Dtype::U8,
            1 => Dtype::F16,
            2 => Dtype::F32,
            _ => return None,
        })
    }
}

impl FromStr for Dtype {
    type Err = IndexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(Dtype::U8),
            "f16" => Ok(Dtype::F16),
            "f32" => Ok(Dtype::F32),
            _ => Err(IndexError::InvalidParams(format!("unknown dtype {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Storage {
    U8(Vec<u8>),
    F16(Vec<f16>),
    F32(Vec<f32>),
}

impl Storage {
    fn dtype(&self) -> Dtype {
        match self {
            Storage::U8(_) => Dtype::U8,
            Storage::F16(_) => Dtype::F16,
            Storage::F32(_) => Dtype::F32,
        }
    }

    fn from_bytes(rows: &[u8], dtype: Dtype) -> Self {
        match dtype {
            Dtype::U8 => Storage::U8(rows.to_vec()),
            Dtype::F16 => Storage::F16(rows.iter().map(|&b| f16::from_f32(f32::from(b))).collect()),
            Dtype::F32 => Storage::F32(rows.iter().map(|&b| f32::from(b)).collect()),
        }
    }

    fn row_f32(&self, i: usize) -> [f32; DIM] {
        let mut out = [0.0; DIM];
        let r = i * DIM..(i + 1) * DIM;
        match self {
            Storage::U8(v) => out.iter_mut().zip(&v[r]).for_each(|(o, &x)| *o = f32::from(x)),
            Storage::F16(v) => out.iter_mut().zip(&v[r]).for_each(|(o, x)| *o = x.to_f32()),
            Storage::F32(v) => out.copy_from_slice(&v[r]),
        }
        out
    }

    /// Squared distance from a byte query to row `i`.
    #[inline]
    fn distance(&self, q: &[u8; DIM], qf: &[f32; DIM], i: usize) -> f32 {
        let r = i * DIM..(i + 1) * DIM;
        match self {
            Storage::U8(v) => l2_u8(q, &v[r]) as f32,
            Storage::F16(v) => {
                let mut s = 0.0f32;
                for (a, b) in qf.iter().zip(&v[r]) {
                    let d = a - b.to_f32();
                    s += d * d;
                }
                s
            }
            Storage::F32(v) => l2_f32(qf, &v[r]),
        }
    }
}

/// Squared L2 distance between byte vectors, exact in integer arithmetic.
#[inline]
pub(crate) fn l2_u8(a: &[u8; DIM], b: &[u8]) -> u32 {
    let b: &[u8; DIM] = b.try_into().expect("row length");
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { l2_u8_avx2(a, b) };
    }
    l2_u8_portable(a, b)
}

#[inline(always)]
fn l2_u8_portable(a: &[u8; DIM], b: &[u8; DIM]) -> u32 {
    let mut s = 0i32;
    for i in 0..DIM {
        let d = i16::from(a[i]) - i16::from(b[i]);
        s += i32::from(d) * i32::from(d);
    }
    s as u32
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn l2_u8_avx2(a: &[u8; DIM], b: &[u8; DIM]) -> u32 {
    l2_u8_portable(a, b)
}

#[inline]
pub(crate) fn l2_f32(a: &[f32], b: &[f32]) -> f32 {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { l2_f32_avx2(a, b) };
    }
    l2_f32_portable(a, b)
}

#[inline(always)]
fn l2_f32_portable(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for j in 0..8 {
            let d = ca[j] - cb[j];
            acc[j] += d * d;
        }
    }
    acc.iter().sum()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn l2_f32_avx2(a: &[f32], b: &[f32]) -> f32 {
    l2_f32_portable(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Owner {
    pub image: u32,
    pub keypoint: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Partitions {
    pub(crate) centroids: Vec<f32>,
    /// `nlist + 1` offsets into `entries`.
    pub(crate) offsets: Vec<u64>,
    pub(crate) entries: Vec<u64>,
}

impl Partitions {
    pub(crate) fn nlist(&self) -> usize {
        self.offsets.len() - 1
    }

    pub(crate) fn list(&self, l: usize) -> &[u64] {
        &self.entries[self.offsets[l] as usize..self.offsets[l + 1] as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub query: usize,
    pub image: u32,
    pub keypoint: u32,
    pub distance: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionParams {
    /// Number of lists; 0 selects ⌈√count⌉.
    pub nlist: usize,
    /// Vectors sampled for k-means training; 0 selects `64 × nlist`.
    pub train_size: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self {
            nlist: 0,
            train_size: 0,
            max_iterations: 25,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    ids: Vec<String>,
    owners: Vec<Owner>,
    storage: Storage,
    partitions: Option<Partitions>,
    /// Lexicographic rank of each image id, for tie ordering.
    id_rank: Vec<u32>,
}

impl DescriptorIndex {
    pub(crate) fn from_parts(
        ids: Vec<String>,
        owners: Vec<Owner>,
        storage: Storage,
        partitions: Option<Partitions>,
    ) -> Result<Self> {
        let count = owners.len();
        let blob_len = match &storage {
            Storage::U8(v) => v.len(),
            Storage::F16(v) => v.len(),
            Storage::F32(v) => v.len(),
        };
        if blob_len != count * DIM {
            return Err(IndexError::Malformed(format!(
                "blob holds {blob_len} values for {count} rows"
            )));
        }
        if let Some(o) = owners.iter().find(|o| o.image as usize >= ids.len()) {
            return Err(IndexError::Malformed(format!(
                "owner image ordinal {} out of {}",
                o.image,
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(IndexError::DuplicateId(id.clone()));
            }
        }
        if let Some(p) = &partitions {
            check_partitions(p, count)?;
        }
        let mut order: Vec<u32> = (0..ids.len() as u32).collect();
        order.sort_by(|&a, &b| ids[a as usize].cmp(&ids[b as usize]));
        let mut id_rank = vec![0u32; ids.len()];
        for (rank, &i) in order.iter().enumerate() {
            id_rank[i as usize] = rank as u32;
        }
        Ok(Self {
            ids,
            owners,
            storage,
            partitions,
            id_rank,
        })
    }

    pub fn len(&self) -> usize {
        self.owners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owners.is_empty()
    }

    pub fn dim(&self) -> usize {
        DIM
    }

    pub fn dtype(&self) -> Dtype {
        self.storage.dtype()
    }

    pub fn image_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn image_id(&self, image: u32) -> &str {
        &self.ids[image as usize]
    }

    pub fn owners(&self) -> &[Owner] {
        &self.owners
    }

    pub fn is_partitioned(&self) -> bool {
        self.partitions.is_some()
    }

    pub fn nlist(&self) -> Option<usize> {
        self.partitions.as_ref().map(Partitions::nlist)
    }

    /// Ordinals held by each inverted list, in list order.
    pub fn inverted_lists(&self) -> Option<Vec<Vec<u64>>> {
        self.partitions
            .as_ref()
            .map(|p| (0..p.nlist()).map(|l| p.list(l).to_vec()).collect())
    }

    pub(crate) fn storage(&self) -> &Storage {
        &self.storage
    }

    pub(crate) fn partitions(&self) -> Option<&Partitions> {
        self.partitions.as_ref()
    }

    /// Stored row `i` widened to `f32`.
    pub fn row(&self, i: usize) -> [f32; DIM] {
        self.storage.row_f32(i)
    }

    /// Descriptors of every image, rounded back to bytes, keyed by image ordinal.
    pub fn feature_sets(&self) -> Vec<FeatureSet> {
        let mut sets: Vec<FeatureSet> = self.ids.iter().map(|id| FeatureSet::empty(id)).collect();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| (self.owners[i].image, self.owners[i].keypoint));
        for i in order {
            let row = self.row(i);
            let mut d = [0u8; DIM];
            for (o, &x) in d.iter_mut().zip(&row) {
                *o = x.round().clamp(0.0, 255.0) as u8;
            }
            sets[self.owners[i].image as usize].descriptors.push(SiftDescriptor(d));
        }
        sets
    }

    #[inline]
    fn tie_key(&self, ordinal: usize) -> u64 {
        let o = self.owners[ordinal];
        (u64::from(self.id_rank[o.image as usize]) << 32) | u64::from(o.keypoint)
    }

    /// Top-`k` neighbours of each query; `nprobe` lists are scanned when the
    /// index is partitioned and ignored otherwise.
    pub fn search<Q: AsRef<[u8]> + Sync>(
        &self,
        queries: &[Q],
        k: usize,
        nprobe: usize,
    ) -> Result<Vec<Vec<Hit>>> {
        if k == 0 {
            return Err(IndexError::InvalidParams("k must be >= 1".into()));
        }
        if nprobe == 0 {
            return Err(IndexError::InvalidParams("nprobe must be >= 1".into()));
        }
        let mut rows = Vec::with_capacity(queries.len());
        for q in queries {
            let q = q.as_ref();
            let row: [u8; DIM] = q.try_into().map_err(|_| IndexError::DimensionMismatch {
                expected: DIM,
                found: q.len(),
            })?;
            rows.push(row);
        }
        Ok(rows
            .par_iter()
            .enumerate()
            .map(|(qi, q)| self.search_one(qi, q, k, nprobe))
            .collect())
    }

    fn search_one(&self, qi: usize, q: &[u8; DIM], k: usize, nprobe: usize) -> Vec<Hit> {
        let mut qf = [0.0f32; DIM];
        qf.iter_mut().zip(q).for_each(|(o, &x)| *o = f32::from(x));
        let mut top = TopK::new(k.min(self.len()));
        match &self.partitions {
            None => {
                for i in 0..self.len() {
                    let d = self.storage.distance(q, &qf, i);
                    if top.admits(d) {
                        top.offer(d, self.tie_key(i), i);
                    }
                }
            }
            Some(p) => {
                for l in kmeans::nearest_lists(&p.centroids, &qf, nprobe) {
                    for &i in p.list(l) {
                        let i = i as usize;
                        let d = self.storage.distance(q, &qf, i);
                        if top.admits(d) {
                            top.offer(d, self.tie_key(i), i);
                        }
                    }
                }
            }
        }
        top.items
            .into_iter()
            .map(|(distance, _, i)| {
                let o = self.owners[i];
                Hit {
                    query: qi,
                    image: o.image,
                    keypoint: o.keypoint,
                    distance,
                }
            })
            .collect()
    }
}

fn check_partitions(p: &Partitions, count: usize) -> Result<()> {
    let bad = |m: String| Err(IndexError::Malformed(m));
    let nlist = p.offsets.len().saturating_sub(1);
    if nlist == 0 || p.centroids.len() != nlist * DIM {
        return bad(format!("{} centroid values for {nlist} lists", p.centroids.len()));
    }
    if p.offsets[0] != 0
        || p.offsets.windows(2).any(|w| w[0] > w[1])
        || p.offsets[nlist] as usize != p.entries.len()
    {
        return bad("list offsets are not monotone".into());
    }
    if p.entries.len() != count {
        return bad(format!("lists hold {} of {count} ordinals", p.entries.len()));
    }
    let mut seen = vec![false; count];
    for &e in &p.entries {
        let e = e as usize;
        if e >= count || std::mem::replace(&mut seen[e], true) {
            return bad(format!("ordinal {e} missing or repeated in lists"));
        }
    }
    Ok(())
}

/// Bounded ascending list of `(distance, tie key, ordinal)`.
struct TopK {
    k: usize,
    items: Vec<(f32, u64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn admits(&self, d: f32) -> bool {
        self.items.len() < self.k || d <= self.items[self.k - 1].0
    }

    fn offer(&mut self, d: f32, key: u64, i: usize) {
        let pos = self
            .items
            .partition_point(|&(od, okey, _)| od < d || (od == d && okey < key));
        if pos >= self.k {
            return;
        }
        self.items.insert(pos, (d, key, i));
        self.items.truncate(self.k);
    }
}

fn collect_rows(sets: &[FeatureSet]) -> Result<(Vec<String>, Vec<Owner>, Vec<u8>)> {
    let mut ids = Vec::with_capacity(sets.len());
    let mut owners = Vec::new();
    let mut blob = Vec::new();
    for (img, fs) in sets.iter().enumerate() {
        ids.push(fs.image_id.clone());
        for (kp, d) in fs.descriptors.iter().enumerate() {
            owners.push(Owner {
                image: img as u32,
                keypoint: kp as u32,
            });
            blob.extend_from_slice(&d.0);
        }
    }
    if owners.is_empty() {
        return Err(IndexError::EmptyCorpus);
    }
    Ok((ids, owners, blob))
}

/// Exhaustive index: descriptors in input order, searched exactly.
pub fn build_flat(sets: &[FeatureSet], dtype: Dtype) -> Result<DescriptorIndex> {
    let (ids, owners, blob) = collect_rows(sets)?;
    DescriptorIndex::from_parts(ids, owners, Storage::from_bytes(&blob, dtype), None)
}

/// Inverted-file index over a seeded k-means coarse quantizer.
pub fn build_partitioned(
    sets: &[FeatureSet],
    dtype: Dtype,
    params: &PartitionParams,
) -> Result<DescriptorIndex> {
    let (ids, owners, blob) = collect_rows(sets)?;
    let count = owners.len();
    let nlist = if params.nlist == 0 {
        (count as f64).sqrt().ceil() as usize
    } else {
        params.nlist
    };
    if count < nlist {
        return Err(IndexError::TooFewVectors { count, nlist });
    }
    let storage = Storage::from_bytes(&blob, dtype);
    let train_size = if params.train_size == 0 {
        64 * nlist
    } else {
        params.train_size
    };
    let centroids = kmeans::train(&storage, count, nlist, train_size, params)?;
    let assign = kmeans::assign(&storage, count, &centroids);
    let mut offsets = vec![0u64; nlist + 1];
    for &a in &assign {
        offsets[a + 1] += 1;
    }
    for l in 0..nlist {
        offsets[l + 1] += offsets[l];
    }
    let mut fill = offsets.clone();
    let mut entries = vec![0u64; count];
    for (i, &a) in assign.iter().enumerate() {
        entries[fill[a] as usize] = i as u64;
        fill[a] += 1;
    }
    let partitions = Partitions {
        centroids,
        offsets,
        entries,
    };
    DescriptorIndex::from_parts(ids, owners, storage, Some(partitions))
}
