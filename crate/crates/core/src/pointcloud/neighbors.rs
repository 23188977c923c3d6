use super::{sq_dist, CloudError};

/// Row-major `rows x k` neighbor table; each row sorted by ascending distance, then index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    pub k: usize,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    /// Set for ball-query rows whose ball was empty and fell back to the nearest point.
    pub fallback: Vec<bool>,
}

impl NeighborIndex {
    pub fn rows(&self) -> usize {
        self.fallback.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn row_distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }
}

#[cfg(test)]
fn brute_force_sorted(query: &[f64; 3], target: &[[f64; 3]]) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = target
        .iter()
        .enumerate()
        .map(|(j, p)| (sq_dist(query, p), j))
        .collect();
    all.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all
}

fn k_smallest(query: &[f64; 3], target: &[[f64; 3]], k: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = target
        .iter()
        .enumerate()
        .map(|(j, p)| (sq_dist(query, p), j))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < all.len() {
        all.select_nth_unstable_by(k, cmp);
        all.truncate(k);
    }
    all.sort_unstable_by(cmp);
    all
}

/// Exact k nearest neighbors of every query point; ties broken by lower index.
pub fn knn(
    query: &[[f64; 3]],
    target: &[[f64; 3]],
    k: usize,
) -> Result<NeighborIndex, CloudError> {
    if k > target.len() || k == 0 {
        return Err(CloudError::KTooLarge {
            k,
            available: target.len(),
        });
    }
    let mut indices = Vec::with_capacity(query.len() * k);
    let mut distances = Vec::with_capacity(query.len() * k);
    for q in query {
        for (d2, j) in k_smallest(q, target, k) {
            indices.push(j);
            distances.push(d2.sqrt());
        }
    }
    Ok(NeighborIndex {
        k,
        indices,
        distances,
        fallback: vec![false; query.len()],
    })
}

/// Up to `max_samples` target points within `radius` of each query point.
///
/// Short rows are padded by repeating their nearest hit. A row with an empty ball
/// holds the single nearest target point (repeated) and has its fallback flag set.
pub fn ball_query(
    query: &[[f64; 3]],
    target: &[[f64; 3]],
    radius: f64,
    max_samples: usize,
) -> NeighborIndex {
    assert!(radius > 0.0 && max_samples > 0 && !target.is_empty());
    let r2 = radius * radius;
    let mut indices = Vec::with_capacity(query.len() * max_samples);
    let mut distances = Vec::with_capacity(query.len() * max_samples);
    let mut fallback = Vec::with_capacity(query.len());
    for q in query {
        let mut hits: Vec<(f64, usize)> = target
            .iter()
            .enumerate()
            .filter_map(|(j, p)| {
                let d2 = sq_dist(q, p);
                (d2 <= r2).then_some((d2, j))
            })
            .collect();
        let empty = hits.is_empty();
        if empty {
            hits = k_smallest(q, target, 1);
        } else {
            hits.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            hits.truncate(max_samples);
        }
        fallback.push(empty);
        let first = hits[0];
        for s in 0..max_samples {
            let (d2, j) = hits.get(s).copied().unwrap_or(first);
            indices.push(j);
            distances.push(d2.sqrt());
        }
    }
    NeighborIndex {
        k: max_samples,
        indices,
        distances,
        fallback,
    }
}

/// Greedy farthest point sampling starting from `seed_index`; ties go to the lower index.
pub fn farthest_point_sample(
    points: &[[f64; 3]],
    count: usize,
    seed_index: usize,
) -> Result<Vec<usize>, CloudError> {
    if count == 0 || count > points.len() || seed_index >= points.len() {
        return Err(CloudError::CountTooLarge {
            requested: count,
            available: points.len(),
        });
    }
    let mut selected = Vec::with_capacity(count);
    selected.push(seed_index);
    let mut min_d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &points[seed_index]))
        .collect();
    while selected.len() < count {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        let c = points[best];
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &c);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    Ok(selected)
}
