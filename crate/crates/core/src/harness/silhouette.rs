use crate::error::{Error, Result};

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette `(b − a) / max(a, b)` under Euclidean distance, where `a`
/// is a point's mean distance to its own cluster and `b` the smallest mean
/// distance to another cluster. Points alone in their cluster score 0, as do
/// points with `a = b = 0`.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::Input("silhouette needs at least two labels".into()));
    }
    let slot = |l: usize| clusters.binary_search(&l).expect("label listed");
    let mut sizes = vec![0usize; clusters.len()];
    for &l in labels {
        sizes[slot(l)] += 1;
    }

    let mut total = 0.0;
    let mut sums = vec![0.0; clusters.len()];
    for (i, p) in points.iter().enumerate() {
        let own = slot(labels[i]);
        if sizes[own] == 1 {
            continue;
        }
        sums.fill(0.0);
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[slot(labels[j])] += distance(p, q);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = sums
            .iter()
            .zip(&sizes)
            .enumerate()
            .filter(|&(c, _)| c != own)
            .map(|(_, (s, &n))| s / n as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}
