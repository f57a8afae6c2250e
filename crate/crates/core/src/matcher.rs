//! Ratio-test match counting, flip handling, index-vote recall, and the
//! three-branch score sum.

use std::cell::OnceCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{flip_horizontal, GrayImage};
use crate::sift::{extract_with_id, FeatureSet, SiftDescriptor, SiftError, SiftParams, DESCRIPTOR_LEN};
use crate::vecindex::Hit;

pub const DEFAULT_RATIO: f64 = 1.0 / 1.8;

/// Query rows multiplied against a reference set in one block.
const BLOCK_ROWS: usize = 256;

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("invalid matcher config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    pub ratio_threshold: f64,
    /// Index hits farther than this squared distance cast no vote.
    pub local_l2_threshold: f32,
    pub min_points: usize,
    pub global_k: usize,
    /// Cosine similarity floor for global recall.
    pub global_threshold: f32,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            ratio_threshold: DEFAULT_RATIO,
            local_l2_threshold: 40_000.0,
            min_points: 2,
            global_k: 10,
            global_threshold: 0.0,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<(), MatcherError> {
        let bad = |m: &str| Err(MatcherError::InvalidConfig(m.to_string()));
        if !(self.ratio_threshold > 0.0 && self.ratio_threshold < 1.0) {
            return bad("ratio_threshold must lie in (0, 1)");
        }
        if self.min_points == 0 {
            return bad("min_points must be >= 1");
        }
        if !(self.local_l2_threshold >= 0.0) {
            return bad("local_l2_threshold must be >= 0");
        }
        Ok(())
    }
}

/// Descriptors widened to `f32` with their squared norms. All products and
/// sums of byte vectors stay below 2^24, so distances derived from them are
/// exact integers.
struct Prepared {
    rows: Vec<f32>,
    norms: Vec<f32>,
}

impl Prepared {
    fn new(ds: &[SiftDescriptor]) -> Self {
        let rows: Vec<f32> = ds.iter().flat_map(|d| d.0.map(f32::from)).collect();
        let norms = rows
            .chunks_exact(DESCRIPTOR_LEN)
            .map(|r| r.iter().map(|x| x * x).sum())
            .collect();
        Self { rows, norms }
    }

    fn len(&self) -> usize {
        self.norms.len()
    }
}

/// Two smallest squared distances from every query row to the reference rows.
fn two_nearest(q: &Prepared, r: &Prepared) -> Vec<(f64, f64)> {
    let (nq, nr) = (q.len(), r.len());
    let mut out = Vec::with_capacity(nq);
    let mut dots = vec![0.0f32; BLOCK_ROWS.min(nq) * nr];
    for start in (0..nq).step_by(BLOCK_ROWS) {
        let rows = BLOCK_ROWS.min(nq - start);
        // SAFETY: the operand pointers cover rows × 128 and nr × 128 floats,
        // and `dots` holds rows × nr, matching the strides given.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                DESCRIPTOR_LEN,
                nr,
                1.0,
                q.rows[start * DESCRIPTOR_LEN..].as_ptr(),
                DESCRIPTOR_LEN as isize,
                1,
                r.rows.as_ptr(),
                1,
                DESCRIPTOR_LEN as isize,
                0.0,
                dots.as_mut_ptr(),
                nr as isize,
                1,
            );
        }
        for i in 0..rows {
            let qn = f64::from(q.norms[start + i]);
            let mut best = (f64::INFINITY, f64::INFINITY);
            for (j, &g) in dots[i * nr..(i + 1) * nr].iter().enumerate() {
                let d = (qn + f64::from(r.norms[j]) - 2.0 * f64::from(g)).max(0.0);
                if d < best.0 {
                    best = (d, best.0);
                } else if d < best.1 {
                    best.1 = d;
                }
            }
            out.push(best);
        }
    }
    out
}

fn passes_ratio(d1_sq: f64, d2_sq: f64, ratio: f64) -> bool {
    if d2_sq == 0.0 {
        return true;
    }
    d1_sq.sqrt() / d2_sq.sqrt() < ratio
}

/// Query descriptors whose nearest reference descriptor beats the second
/// nearest by the distance ratio. Scored query → reference; asymmetric.
pub fn count_ratio_matches(q: &[SiftDescriptor], r: &[SiftDescriptor], ratio: f64) -> usize {
    if r.len() < 2 || q.is_empty() {
        return 0;
    }
    two_nearest(&Prepared::new(q), &Prepared::new(r))
        .into_iter()
        .filter(|&(d1, d2)| passes_ratio(d1, d2, ratio))
        .count()
}

pub fn pairwise_match_count(q: &FeatureSet, r: &FeatureSet, ratio: f64) -> usize {
    count_ratio_matches(&q.descriptors, &r.descriptors, ratio)
}

/// Features of one query variant plus its lazily extracted mirror image.
pub struct QueryFeatures {
    image: GrayImage,
    params: SiftParams,
    original: FeatureSet,
    flipped: OnceCell<FeatureSet>,
}

impl QueryFeatures {
    pub fn extract(image_id: &str, image: GrayImage, params: &SiftParams) -> Result<Self, SiftError> {
        let original = extract_with_id(&image, params, image_id)?;
        Ok(Self {
            image,
            params: params.clone(),
            original,
            flipped: OnceCell::new(),
        })
    }

    pub fn original(&self) -> &FeatureSet {
        &self.original
    }

    pub fn image(&self) -> &GrayImage {
        &self.image
    }

    /// Features of the horizontally flipped image, extracted on first use.
    pub fn flipped(&self) -> Result<&FeatureSet, SiftError> {
        if let Some(f) = self.flipped.get() {
            return Ok(f);
        }
        let f = extract_with_id(&flip_horizontal(&self.image), &self.params, &self.original.image_id)?;
        Ok(self.flipped.get_or_init(|| f))
    }

    pub fn flip_is_cached(&self) -> bool {
        self.flipped.get().is_some()
    }
}

/// Larger of the plain and mirrored match counts.
pub fn match_with_flip(q: &QueryFeatures, r: &FeatureSet, ratio: f64) -> Result<usize, SiftError> {
    let plain = pairwise_match_count(q.original(), r, ratio);
    let mirrored = pairwise_match_count(q.flipped()?, r, ratio);
    Ok(plain.max(mirrored))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalCandidate {
    pub image: u32,
    pub reference_id: String,
    pub votes: usize,
}

fn by_votes(a: &LocalCandidate, b: &LocalCandidate) -> std::cmp::Ordering {
    b.votes.cmp(&a.votes).then_with(|| a.reference_id.cmp(&b.reference_id))
}

/// Votes per reference from top-1 index hits within the distance cutoff,
/// gated at `min_points`, ordered by votes descending then id.
pub fn local_recall(hits: &[Vec<Hit>], ids: &[String], cfg: &MatcherConfig) -> Vec<LocalCandidate> {
    let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
    for h in hits.iter().filter_map(|h| h.first()) {
        if h.distance <= cfg.local_l2_threshold {
            *votes.entry(h.image).or_default() += 1;
        }
    }
    let mut out: Vec<LocalCandidate> = votes
        .into_iter()
        .filter(|&(_, v)| v >= cfg.min_points)
        .map(|(image, votes)| LocalCandidate {
            image,
            reference_id: ids[image as usize].clone(),
            votes,
        })
        .collect();
    out.sort_by(by_votes);
    out
}

/// Per-reference maximum of two vote lists.
pub fn merge_votes_max(a: &[LocalCandidate], b: &[LocalCandidate]) -> Vec<LocalCandidate> {
    let mut merged: BTreeMap<u32, LocalCandidate> = BTreeMap::new();
    for c in a.iter().chain(b) {
        merged
            .entry(c.image)
            .and_modify(|m| m.votes = m.votes.max(c.votes))
            .or_insert_with(|| c.clone());
    }
    let mut out: Vec<_> = merged.into_values().collect();
    out.sort_by(by_votes);
    out
}

/// Smallest squared-distance cutoff keeping at least `keep` of the given
/// true-copy hit distances.
pub fn calibrate_l2_threshold(true_hit_distances: &[f32], keep: f64) -> Option<f32> {
    if true_hit_distances.is_empty() || !(keep > 0.0 && keep <= 1.0) {
        return None;
    }
    let mut d = true_hit_distances.to_vec();
    d.sort_by(f32::total_cmp);
    let idx = ((keep * d.len() as f64).ceil() as usize).clamp(1, d.len()) - 1;
    Some(d[idx])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Global,
    LocalOriginal,
    LocalCropped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub query_id: String,
    pub reference_id: String,
    pub global: u64,
    pub local_original: u64,
    pub local_cropped: u64,
    pub score: u64,
}

/// Union of the branch candidates; each branch that recalled a reference adds
/// `score(branch, reference)`. Pairs come out by fused score descending, then
/// reference id.
pub fn fuse<E>(
    query_id: &str,
    global: &[String],
    local_original: &[String],
    local_cropped: Option<&[String]>,
    mut score: impl FnMut(Branch, &str) -> Result<u64, E>,
) -> Result<Vec<ScoredPair>, E> {
    let mut pairs: BTreeMap<&str, [u64; 3]> = BTreeMap::new();
    let branches = [
        (Branch::Global, global),
        (Branch::LocalOriginal, local_original),
        (Branch::LocalCropped, local_cropped.unwrap_or(&[])),
    ];
    for (slot, (branch, ids)) in branches.into_iter().enumerate() {
        for id in ids {
            let entry = pairs.entry(id.as_str()).or_default();
            if entry[slot] == 0 {
                entry[slot] = score(branch, id)?;
            }
        }
    }
    let mut out: Vec<ScoredPair> = pairs
        .into_iter()
        .map(|(id, s)| ScoredPair {
            query_id: query_id.to_string(),
            reference_id: id.to_string(),
            global: s[0],
            local_original: s[1],
            local_cropped: s[2],
            score: s.iter().sum(),
        })
        .collect();
    out.sort_by(|a, b| b.score.cmp(&a.score).then_with(|| a.reference_id.cmp(&b.reference_id)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{procedural_reference, to_grayscale};
    use crate::sift::extract;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desc(rng: &mut ChaCha8Rng) -> SiftDescriptor {
        let mut d = [0u8; 128];
        rng.fill(&mut d[..]);
        SiftDescriptor(d)
    }

    fn brute_two_nearest(q: &SiftDescriptor, r: &[SiftDescriptor]) -> (f64, f64) {
        let mut d: Vec<f64> = r
            .iter()
            .map(|x| q.0.iter().zip(&x.0).map(|(&a, &b)| f64::from(a.abs_diff(b)).powi(2)).sum())
            .collect();
        d.sort_by(f64::total_cmp);
        (d[0], d[1])
    }

    #[test]
    fn gemm_distances_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q: Vec<_> = (0..300).map(|_| desc(&mut rng)).collect();
        let r: Vec<_> = (0..77).map(|_| desc(&mut rng)).collect();
        let got = two_nearest(&Prepared::new(&q), &Prepared::new(&r));
        for (qi, g) in q.iter().zip(got) {
            assert_eq!(g, brute_two_nearest(qi, &r));
        }
        let extreme = [SiftDescriptor([255; 128]), SiftDescriptor([0; 128])];
        let got = two_nearest(&Prepared::new(&extreme[..1]), &Prepared::new(&extreme));
        assert_eq!(got[0], (0.0, 128.0 * 255.0 * 255.0));
    }

    #[test]
    fn ratio_boundary_arithmetic() {
        assert!(passes_ratio(0.25, 1.0, DEFAULT_RATIO));
        assert!(!passes_ratio(0.81, 1.0, DEFAULT_RATIO));
        assert!(passes_ratio(0.0, 0.0, DEFAULT_RATIO));
    }

    #[test]
    fn self_matching_counts_every_descriptor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = FeatureSet {
            image_id: "a".into(),
            keypoints: vec![],
            descriptors: (0..40).map(|_| desc(&mut rng)).collect(),
        };
        assert_eq!(pairwise_match_count(&f, &f, DEFAULT_RATIO), 40);
        let one = FeatureSet {
            descriptors: f.descriptors[..1].to_vec(),
            ..f.clone()
        };
        assert_eq!(pairwise_match_count(&f, &one, DEFAULT_RATIO), 0);
    }

    #[test]
    fn duplicate_nearest_neighbours_count_as_match() {
        let d = SiftDescriptor([9; 128]);
        let r = [d, d, SiftDescriptor([200; 128])];
        assert_eq!(count_ratio_matches(&[d], &r, DEFAULT_RATIO), 1);
    }

    #[test]
    fn matching_is_asymmetric() {
        let x = SiftDescriptor([100; 128]);
        let mut near = x;
        near.0[0] = 104;
        let far = SiftDescriptor([0; 128]);
        let (a, b) = ([x, near], [x, far]);
        assert_eq!(count_ratio_matches(&a, &b, DEFAULT_RATIO), 2);
        assert_eq!(count_ratio_matches(&b, &a, DEFAULT_RATIO), 1);
    }

    #[test]
    fn flip_score_is_the_larger_and_cached() {
        let img = to_grayscale(&procedural_reference(4, 200, 200)).unwrap();
        let p = SiftParams::default();
        let reference = extract(&img, &p).unwrap();
        let q = QueryFeatures::extract("q", flip_horizontal(&img), &p).unwrap();
        assert!(!q.flip_is_cached());
        let plain = pairwise_match_count(q.original(), &reference, DEFAULT_RATIO);
        let best = match_with_flip(&q, &reference, DEFAULT_RATIO).unwrap();
        assert!(q.flip_is_cached());
        assert!(best >= plain);
        assert!(best > 2 * plain.max(1), "{best} vs {plain}");
    }

    fn hit(image: u32, distance: f32) -> Vec<Hit> {
        vec![Hit {
            query: 0,
            image,
            keypoint: 0,
            distance,
        }]
    }

    #[test]
    fn recall_filters_and_gates() {
        let ids: Vec<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        let cfg = MatcherConfig {
            local_l2_threshold: 100.0,
            ..Default::default()
        };
        let far: Vec<_> = (0..5).map(|_| hit(0, 101.0)).collect();
        assert!(local_recall(&far, &ids, &cfg).is_empty());
        let mut hits: Vec<_> = (0..5).map(|_| hit(0, 50.0)).collect();
        hits.push(hit(1, 10.0));
        let got = local_recall(&hits, &ids, &cfg);
        assert_eq!(got.len(), 1);
        assert_eq!((got[0].reference_id.as_str(), got[0].votes), ("A", 5));
    }

    #[test]
    fn vote_merge_takes_maximum() {
        let c = |image, votes| LocalCandidate {
            image,
            reference_id: format!("r{image}"),
            votes,
        };
        let got = merge_votes_max(&[c(0, 3), c(1, 5)], &[c(0, 7), c(2, 2)]);
        assert_eq!(got, vec![c(0, 7), c(1, 5), c(2, 2)]);
    }

    #[test]
    fn fusion_sums_recalled_branches() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let (g, lo, lc) = (s(&["r1"]), s(&["r1", "r2"]), s(&["r1"]));
        let score = |b: Branch, id: &str| -> Result<u64, ()> {
            Ok(match (b, id) {
                (Branch::Global, _) => 5,
                (Branch::LocalOriginal, "r1") => 2,
                (Branch::LocalOriginal, _) => 4,
                (Branch::LocalCropped, _) => 1,
            })
        };
        let pairs = fuse("q", &g, &lo, Some(&lc), score).unwrap();
        assert_eq!(pairs[0].reference_id, "r1");
        assert_eq!((pairs[0].global, pairs[0].local_original, pairs[0].local_cropped), (5, 2, 1));
        assert_eq!(pairs[0].score, 8);
        assert_eq!((pairs[1].reference_id.as_str(), pairs[1].score), ("r2", 4));

        let no_crop = fuse("q", &g, &lo, None, score).unwrap();
        assert!(no_crop.iter().all(|p| p.local_cropped == 0));
    }

    #[test]
    fn calibration_keeps_requested_fraction() {
        let d: Vec<f32> = (1..=100).map(|x| x as f32).collect();
        assert_eq!(calibrate_l2_threshold(&d, 0.95), Some(95.0));
        assert_eq!(calibrate_l2_threshold(&d, 1.0), Some(100.0));
        assert_eq!(calibrate_l2_threshold(&[], 0.95), None);
    }
}
