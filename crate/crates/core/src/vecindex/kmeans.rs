//! Seeded Lloyd iterations for the coarse quantizer.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{l2_f32, IndexError, PartitionParams, Result, Storage, DIM};

pub(super) fn train(
    storage: &Storage,
    count: usize,
    nlist: usize,
    train_size: usize,
    params: &PartitionParams,
) -> Result<Vec<f32>> {
    if nlist == 0 {
        return Err(IndexError::InvalidParams("nlist must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = train_size.clamp(nlist, count);
    let mut picked: Vec<usize> = if n == count {
        (0..count).collect()
    } else {
        sample(&mut rng, count, n).into_vec()
    };
    picked.sort_unstable();
    let data: Vec<f32> = picked.iter().flat_map(|&i| storage.row_f32(i)).collect();

    let mut seeds = sample(&mut rng, n, nlist).into_vec();
    seeds.sort_unstable();
    let mut centroids: Vec<f32> = seeds
        .iter()
        .flat_map(|&s| data[s * DIM..(s + 1) * DIM].iter().copied())
        .collect();

    let mut assign = vec![usize::MAX; n];
    for _ in 0..params.max_iterations.max(1) {
        let next: Vec<usize> = data
            .par_chunks_exact(DIM)
            .map(|row| nearest(&centroids, row))
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        let mut sums = vec![0.0f64; nlist * DIM];
        let mut counts = vec![0usize; nlist];
        for (row, &a) in data.chunks_exact(DIM).zip(&assign) {
            counts[a] += 1;
            for (s, &x) in sums[a * DIM..(a + 1) * DIM].iter_mut().zip(row) {
                *s += f64::from(x);
            }
        }
        for l in 0..nlist {
            if counts[l] == 0 {
                continue;
            }
            for j in 0..DIM {
                centroids[l * DIM + j] = (sums[l * DIM + j] / counts[l] as f64) as f32;
            }
        }
    }
    Ok(centroids)
}

/// Nearest centroid of every stored row.
pub(super) fn assign(storage: &Storage, count: usize, centroids: &[f32]) -> Vec<usize> {
    (0..count)
        .into_par_iter()
        .map(|i| nearest(centroids, &storage.row_f32(i)))
        .collect()
}

fn nearest(centroids: &[f32], row: &[f32]) -> usize {
    let mut best = (f32::INFINITY, 0);
    for (l, c) in centroids.chunks_exact(DIM).enumerate() {
        let d = l2_f32(row, c);
        if d < best.0 {
            best = (d, l);
        }
    }
    best.1
}

/// The `nprobe` lists whose centroids are closest to `q`, nearest first.
pub(super) fn nearest_lists(centroids: &[f32], q: &[f32; DIM], nprobe: usize) -> Vec<usize> {
    let mut d: Vec<(f32, usize)> = centroids
        .chunks_exact(DIM)
        .enumerate()
        .map(|(l, c)| (l2_f32(q, c), l))
        .collect();
    let keep = nprobe.min(d.len());
    if keep < d.len() {
        d.select_nth_unstable_by(keep, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(keep);
    }
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().map(|(_, l)| l).collect()
}
