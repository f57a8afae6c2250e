//! Triplet loss, batch mining, the cross-batch memory queue, and plain
//! gradient descent on the projection.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalized, GlobalError, Projection, Result, BASE_DIM, EMBED_DIM};

/// Slack under which `ap − an + margin` counts as sitting on the hinge.
const HINGE_EPS: f64 = 1e-12;

/// `max(0, ap − an + margin)` with its partial derivatives in `ap` and `an`.
/// On the hinge boundary the active branch's gradients are returned.
pub fn triplet_loss(ap: f64, an: f64, margin: f64) -> Result<(f64, f64, f64)> {
    for d in [ap, an] {
        if d < 0.0 || d.is_nan() {
            return Err(GlobalError::NegativeDistance(d));
        }
    }
    if !(margin > 0.0) {
        return Err(GlobalError::InvalidParams(format!("margin {margin} must be > 0")));
    }
    let v = ap - an + margin;
    if v >= -HINGE_EPS {
        Ok((v.max(0.0), 1.0, -1.0))
    } else {
        Ok((0.0, 0.0, 0.0))
    }
}

/// Mined triples. Negative indices at or beyond the batch length refer to
/// memory entries, in memory order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub ap: Vec<f64>,
    pub an: Vec<f64>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// For every anchor-positive pair: the hardest negative plus every semi-hard
/// negative (`ap < an < ap + margin`), deduplicated, in index order.
pub fn mine_triplets(features: &[Vec<f64>], ids: &[u32], margin: f64) -> Result<TripletBatch> {
    let batch: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    mine(&batch, ids, &[], margin)
}

pub(crate) fn mine(
    batch: &[&[f64]],
    ids: &[u32],
    memory: &[(&[f64], u32)],
    margin: f64,
) -> Result<TripletBatch> {
    if batch.len() != ids.len() {
        return Err(GlobalError::InvalidParams(format!(
            "{} features for {} ids",
            batch.len(),
            ids.len()
        )));
    }
    if !(margin > 0.0) {
        return Err(GlobalError::InvalidParams(format!("margin {margin} must be > 0")));
    }
    let n = batch.len();
    let candidate = |j: usize| -> (&[f64], u32) {
        if j < n {
            (batch[j], ids[j])
        } else {
            memory[j - n]
        }
    };
    let mut out = TripletBatch::default();
    for a in 0..n {
        let negs: Vec<(usize, f64)> = (0..n + memory.len())
            .filter_map(|j| {
                let (f, id) = candidate(j);
                (id != ids[a]).then(|| (j, euclidean(batch[a], f)))
            })
            .collect();
        let Some(&(hardest, _)) = negs
            .iter()
            .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
        else {
            continue;
        };
        for p in 0..n {
            if p == a || ids[p] != ids[a] {
                continue;
            }
            let ap = euclidean(batch[a], batch[p]);
            let mut chosen = BTreeSet::from([hardest]);
            for &(j, an) in &negs {
                if ap < an && an < ap + margin {
                    chosen.insert(j);
                }
            }
            for j in chosen {
                out.anchors.push(a);
                out.positives.push(p);
                out.negatives.push(j);
                out.ap.push(ap);
                out.an.push(euclidean(batch[a], candidate(j).0));
            }
        }
    }
    if out.is_empty() {
        return Err(GlobalError::NoValidTriplets);
    }
    Ok(out)
}

/// Fixed-capacity FIFO of past embeddings and their source ids.
#[derive(Debug, Clone, PartialEq)]
pub struct XbmQueue {
    capacity: usize,
    items: VecDeque<(Vec<f64>, u32)>,
}

impl XbmQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends a batch, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, features: &[Vec<f64>], ids: &[u32]) -> Result<()> {
        if features.len() > self.capacity {
            return Err(GlobalError::CapacityTooSmall {
                capacity: self.capacity,
                batch: features.len(),
            });
        }
        if features.len() != ids.len() {
            return Err(GlobalError::InvalidParams(format!(
                "{} features for {} ids",
                features.len(),
                ids.len()
            )));
        }
        for (f, &id) in features.iter().zip(ids) {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back((f.clone(), id));
        }
        Ok(())
    }

    /// Stored entries, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = (&[f64], u32)> {
        self.items.iter().map(|(f, id)| (f.as_slice(), *id))
    }

    /// Stored features whose id differs from `anchor_id`, oldest first.
    pub fn negatives(&self, anchor_id: u32) -> Vec<&[f64]> {
        self.iter()
            .filter(|&(_, id)| id != anchor_id)
            .map(|(f, _)| f)
            .collect()
    }
}

/// Mean triplet loss of `triplets` under `projection`, recomputing every
/// distance from the base `features`, and its gradient in the projection
/// matrix. Memory entries are treated as constants.
pub fn triplet_objective(
    projection: &Projection,
    features: &[Vec<f64>],
    memory: &[Vec<f64>],
    triplets: &TripletBatch,
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = features.len();
    let ys: Vec<Vec<f64>> = features.iter().map(|x| projection.apply(x)).collect();
    let norms: Vec<f64> = ys
        .iter()
        .map(|y| y.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let zs: Vec<Vec<f64>> = ys.iter().map(|y| normalized(y)).collect::<Result<_>>()?;
    let mut gz = vec![vec![0.0; EMBED_DIM]; n];
    let mut total = 0.0;
    let count = triplets.len().max(1) as f64;
    for t in 0..triplets.len() {
        let (a, p, neg) = (triplets.anchors[t], triplets.positives[t], triplets.negatives[t]);
        let zn: &[f64] = if neg < n { &zs[neg] } else { &memory[neg - n] };
        let ap = euclidean(&zs[a], &zs[p]);
        let an = euclidean(&zs[a], zn);
        let (loss, g_ap, g_an) = triplet_loss(ap, an, margin)?;
        total += loss;
        if g_ap == 0.0 && g_an == 0.0 {
            continue;
        }
        if ap > 0.0 {
            let s = g_ap / (ap * count);
            for j in 0..EMBED_DIM {
                let d = (zs[a][j] - zs[p][j]) * s;
                gz[a][j] += d;
                gz[p][j] -= d;
            }
        }
        if an > 0.0 {
            let s = g_an / (an * count);
            for j in 0..EMBED_DIM {
                let d = (zs[a][j] - zn[j]) * s;
                gz[a][j] += d;
                if neg < n {
                    gz[neg][j] -= d;
                }
            }
        }
    }
    let mut grad = vec![0.0; BASE_DIM * EMBED_DIM];
    for i in 0..n {
        let dot: f64 = zs[i].iter().zip(&gz[i]).map(|(z, g)| z * g).sum();
        if gz[i].iter().all(|&g| g == 0.0) {
            continue;
        }
        let gy: Vec<f64> = (0..EMBED_DIM)
            .map(|j| (gz[i][j] - zs[i][j] * dot) / norms[i])
            .collect();
        for (r, &x) in features[i].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &mut grad[r * EMBED_DIM..(r + 1) * EMBED_DIM];
            for (g, &v) in row.iter_mut().zip(&gy) {
                *g += x * v;
            }
        }
    }
    Ok((total / count, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub batch_size: usize,
    /// 0 disables the memory queue.
    pub xbm_capacity: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.5,
            margin: 0.3,
            batch_size: 32,
            xbm_capacity: 1024,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub projection: Projection,
    /// Mean mined-triplet loss over the full training set: before training,
    /// then after every epoch.
    pub loss_trace: Vec<f64>,
}

fn full_set_loss(projection: &Projection, features: &[Vec<f64>], ids: &[u32], margin: f64) -> Result<f64> {
    let zs: Vec<Vec<f64>> = features
        .iter()
        .map(|x| projection.embed_base(x))
        .collect::<Result<_>>()?;
    let t = mine_triplets(&zs, ids, margin)?;
    let mut total = 0.0;
    for (&ap, &an) in t.ap.iter().zip(&t.an) {
        total += triplet_loss(ap, an, margin)?.0;
    }
    Ok(total / t.len() as f64)
}

/// Batches of whole source-id groups, in a seeded random id order.
fn make_batches(ids: &[u32], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(rng);
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for mut g in groups {
        g.truncate(batch_size);
        if current.len() + g.len() > batch_size {
            batches.push(std::mem::take(&mut current));
        }
        current.extend(g);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Gradient descent on mined in-batch and memory triplets, starting from the
/// identity projection.
pub fn train_projection(features: &[Vec<f64>], ids: &[u32], cfg: &TrainConfig) -> Result<TrainReport> {
    if features.len() != ids.len() {
        return Err(GlobalError::InvalidParams(format!(
            "{} features for {} ids",
            features.len(),
            ids.len()
        )));
    }
    if let Some(f) = features.iter().find(|f| f.len() != BASE_DIM) {
        return Err(GlobalError::DimensionMismatch {
            expected: BASE_DIM,
            found: f.len(),
        });
    }
    if cfg.batch_size < 2 {
        return Err(GlobalError::InvalidParams("batch_size must be >= 2".into()));
    }
    if cfg.xbm_capacity > 0 && cfg.xbm_capacity < cfg.batch_size {
        return Err(GlobalError::CapacityTooSmall {
            capacity: cfg.xbm_capacity,
            batch: cfg.batch_size,
        });
    }
    if ids.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(GlobalError::NoValidTriplets);
    }

    let mut projection = Projection::identity();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut queue = XbmQueue::new(cfg.xbm_capacity);
    let initial = full_set_loss(&projection, features, ids, cfg.margin)?;
    log::info!("epoch 0 loss {initial:.6}");
    let mut trace = vec![initial];

    for epoch in 1..=cfg.epochs {
        for batch in make_batches(ids, cfg.batch_size, &mut rng) {
            let feats: Vec<Vec<f64>> = batch.iter().map(|&i| features[i].clone()).collect();
            let bids: Vec<u32> = batch.iter().map(|&i| ids[i]).collect();
            let zs: Vec<Vec<f64>> = feats
                .iter()
                .map(|x| projection.embed_base(x))
                .collect::<Result<_>>()?;
            let memory: Vec<Vec<f64>> = queue.iter().map(|(f, _)| f.to_vec()).collect();
            let memory_refs: Vec<(&[f64], u32)> = queue.iter().collect();
            let zrefs: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
            let mined = match mine(&zrefs, &bids, &memory_refs, cfg.margin) {
                Ok(t) => Some(t),
                Err(GlobalError::NoValidTriplets) => None,
                Err(e) => return Err(e),
            };
            if let Some(t) = mined {
                let (_, grad) = triplet_objective(&projection, &feats, &memory, &t, cfg.margin)?;
                for (m, g) in projection.matrix_mut().iter_mut().zip(&grad) {
                    *m -= cfg.learning_rate * g;
                }
            }
            if cfg.xbm_capacity > 0 {
                queue.push(&zs, &bids)?;
            }
        }
        let loss = full_set_loss(&projection, features, ids, cfg.margin);
        let loss = match loss {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(GlobalError::ZeroVector) => return Err(GlobalError::DivergedLoss(epoch)),
            Err(e) => return Err(e),
        };
        if projection.matrix().iter().any(|m| !m.is_finite()) {
            return Err(GlobalError::DivergedLoss(epoch));
        }
        log::info!("epoch {epoch} loss {loss:.6}");
        trace.push(loss);
    }
    if cfg.epochs > 0 {
        projection.set_trained();
    }
    Ok(TrainReport {
        projection,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn loss_arithmetic() {
        assert_eq!(triplet_loss(0.5, 1.0, 0.3).unwrap(), (0.0, 0.0, 0.0));
        let (l, a, n) = triplet_loss(1.2, 0.7, 0.3).unwrap();
        assert!((l - 0.8).abs() < 1e-12);
        assert_eq!((a, n), (1.0, -1.0));
        let (l, a, n) = triplet_loss(0.7, 1.0, 0.3).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!((a, n), (1.0, -1.0));
        assert!(matches!(triplet_loss(-0.1, 1.0, 0.3), Err(GlobalError::NegativeDistance(_))));
    }

    #[test]
    fn far_negatives_give_hardest_only() {
        let f = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 0.0], vec![5.1, 0.0]];
        let t = mine_triplets(&f, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(t.len(), 4);
        for i in 0..t.len() {
            assert_eq!(triplet_loss(t.ap[i], t.an[i], 0.3).unwrap().0, 0.0);
        }
        assert_eq!((t.anchors[0], t.positives[0], t.negatives[0]), (0, 1, 2));
        assert_eq!((t.anchors[2], t.positives[2], t.negatives[2]), (2, 3, 1));
    }

    #[test]
    fn single_id_has_no_triplets() {
        let f = vec![vec![0.0], vec![1.0]];
        assert!(matches!(mine_triplets(&f, &[3, 3], 0.3), Err(GlobalError::NoValidTriplets)));
    }

    #[test]
    fn queue_is_fifo_and_filters_ids() {
        let mut q = XbmQueue::new(4);
        assert!(q.negatives(0).is_empty());
        let v = |x: f64| vec![x];
        q.push(&[v(1.0), v(2.0), v(3.0), v(4.0)], &[0, 0, 1, 1]).unwrap();
        q.push(&[v(5.0), v(6.0)], &[2, 0]).unwrap();
        let contents: Vec<f64> = q.iter().map(|(f, _)| f[0]).collect();
        assert_eq!(contents, [3.0, 4.0, 5.0, 6.0]);
        assert!(matches!(
            q.push(&vec![v(0.0); 5], &[0; 5]),
            Err(GlobalError::CapacityTooSmall { capacity: 4, batch: 5 })
        ));

        let mut q = XbmQueue::new(3);
        q.push(&[v(1.0), v(2.0), v(3.0)], &[7, 7, 8]).unwrap();
        assert_eq!(q.negatives(7), vec![&[3.0][..]]);
    }

    #[test]
    fn memory_negatives_extend_the_candidate_set() {
        let a = [0.0, 0.0];
        let p = [0.2, 0.0];
        let m = [0.3, 0.0];
        let batch: Vec<&[f64]> = vec![&a, &p];
        let t = mine(&batch, &[0, 0], &[(&m, 1)], 0.3).unwrap();
        assert_eq!(t.negatives, [2, 2]);
    }

    #[test]
    fn zero_learning_rate_keeps_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..BASE_DIM).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let ids: Vec<u32> = (0..12).map(|i| i / 3).collect();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            batch_size: 6,
            xbm_capacity: 12,
            ..Default::default()
        };
        let r = train_projection(&feats, &ids, &cfg).unwrap();
        assert_eq!(r.projection.matrix(), Projection::identity().matrix());
        assert!(r.loss_trace.windows(2).all(|w| w[0] == w[1]));
        assert!(matches!(
            train_projection(&feats, &[1; 12], &cfg),
            Err(GlobalError::NoValidTriplets)
        ));
    }
}
