use crate::error::{Error, Result};

/// For every node, `k` directed edges to its `k` nearest neighbors by
/// Euclidean distance (self excluded). Ties go to the lower node index.
/// Edges are grouped by source node, nearest first.
pub fn knn_edges(centroids: &[[f64; 2]], k: usize) -> Result<Vec<(u32, u32)>> {
    let n = centroids.len();
    if n <= k {
        return Err(Error::Contract(format!("kNN needs more than k = {k} nodes, got {n}")));
    }
    let mut edges = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, a) in centroids.iter().enumerate() {
        cand.clear();
        cand.extend(centroids.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, b)| {
            let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
            (dx * dx + dy * dy, j)
        }));
        let cmp = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
        if k > 0 && k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let nearest = &mut cand[..k];
        nearest.sort_unstable_by(cmp);
        edges.extend(nearest.iter().map(|&(_, j)| (i as u32, j as u32)));
    }
    Ok(edges)
}
