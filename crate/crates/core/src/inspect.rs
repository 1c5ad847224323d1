//! Per-sample inspection dumps: cls-to-token attention and clusters of
//! cls-to-token feature similarity, written as `x,y,z,<value>` CSV rows.

use std::path::Path;

use crate::autodiff::Tape;
use crate::backbone::cls_attention_from_maps;
use crate::error::{Error, Result};
use crate::model::{Model, Trainables};
use crate::pointcloud::{Point, PointCloud};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

/// Cosine similarity of `cls` to every row of `tokens`; zero when either
/// norm is below 1e-12.
pub fn cosine_similarities<T: Scalar>(cls: &[T], tokens: &Matrix<T>) -> Vec<f64> {
    let nc = dot(cls, cls).as_f64().sqrt();
    (0..tokens.rows())
        .map(|i| {
            let r = tokens.row(i);
            let nr = dot(r, r).as_f64().sqrt();
            if nc < 1e-12 || nr < 1e-12 {
                0.0
            } else {
                dot(cls, r).as_f64() / (nc * nr)
            }
        })
        .collect()
}

/// Optimal 1D k-means by dynamic programming over the sorted values.
///
/// Clusters are contiguous runs of the sorted values and never split equal
/// values. The fewest clusters reaching the optimal cost are used, so a
/// constant input yields one cluster. Labels are ordered by increasing
/// value: label 0 holds the smallest values.
pub fn kmeans_1d(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::InvalidConfig("k_clusters must be >= 1".into()));
    }
    let n = values.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("k-means input is not finite".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, &v) in sorted.iter().enumerate() {
        s1[i + 1] = s1[i] + v;
        s2[i + 1] = s2[i] + v * v;
    }
    // sum of squared deviations of sorted[a..b]
    let sse = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let s = s1[b] - s1[a];
        (s2[b] - s2[a] - s * s / m).max(0.0)
    };
    let can_split = |i: usize| sorted[i - 1] < sorted[i];
    let kmax = k.min(n);
    let inf = f64::INFINITY;
    // cost[c][j]: best cost of sorted[..j] in c+1 clusters; from[c][j]: start of the last one
    let mut cost = vec![vec![inf; n + 1]; kmax];
    let mut from = vec![vec![0usize; n + 1]; kmax];
    for j in 1..=n {
        cost[0][j] = sse(0, j);
    }
    for c in 1..kmax {
        for j in (c + 1)..=n {
            for i in c..j {
                if !can_split(i) || !cost[c - 1][i].is_finite() {
                    continue;
                }
                let v = cost[c - 1][i] + sse(i, j);
                if v < cost[c][j] {
                    cost[c][j] = v;
                    from[c][j] = i;
                }
            }
        }
    }
    let best = (0..kmax).map(|c| cost[c][n]).fold(inf, f64::min);
    let tol = 1e-12 * (1.0 + cost[0][n]);
    let used = (0..kmax).find(|&c| cost[c][n] <= best + tol).expect("one cluster is always feasible");
    let mut labels = vec![0; n];
    let mut end = n;
    for c in (0..=used).rev() {
        let start = if c == 0 { 0 } else { from[c][end] };
        for &i in &order[start..end] {
            labels[i] = c;
        }
        end = start;
    }
    Ok(labels)
}

/// Cluster label of every token by its cosine similarity to `cls`.
pub fn similarity_dump<T: Scalar>(cls: &[T], tokens: &Matrix<T>, k_clusters: usize) -> Result<Vec<usize>> {
    if cls.len() != tokens.cols() {
        return Err(Error::DimMismatch(format!(
            "cls width {} vs token width {}",
            cls.len(),
            tokens.cols()
        )));
    }
    kmeans_1d(&cosine_similarities(cls, tokens), k_clusters)
}

/// Per-token inspection data of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Inspection {
    pub coords: Vec<Point<f64>>,
    /// Head-averaged cls attention to each token in the chosen block.
    pub attention: Vec<f64>,
    pub similarity: Vec<f64>,
    pub clusters: Vec<usize>,
}

/// Runs one cloud through the model and collects the dumps; `block` picks
/// the attention map, similarities use the final token features.
pub fn inspect<T: Scalar>(
    model: &Model<T>,
    trainables: &Trainables<T>,
    cloud: &PointCloud<T>,
    block: usize,
    k_clusters: usize,
) -> Result<Inspection> {
    let n_blocks = model.backbone.config.n_blocks;
    if block >= n_blocks {
        return Err(Error::InvalidConfig(format!("block {block} out of range for {n_blocks} blocks")));
    }
    let plan = model.plan(cloud)?;
    let mut tape = Tape::new();
    let bound = trainables.params.bind(&mut tape, false);
    let frozen = trainables.frozen_tokenizer.as_ref().map(|p| p.bind(&mut tape, false));
    let (_, out) = model.forward_on_tape(&mut tape, &plan, &bound, frozen.as_ref())?;
    let attention = cls_attention_from_maps(&tape, &out.attention[block]).iter().map(|v| v.as_f64()).collect();
    let cls = tape.value(out.cls).data().to_vec();
    let tokens = tape.value(out.tokens);
    let similarity = cosine_similarities(&cls, tokens);
    let clusters = kmeans_1d(&similarity, k_clusters)?;
    Ok(Inspection {
        coords: plan.token_coords().iter().map(|p| p.map(|c| c.as_f64())).collect(),
        attention,
        similarity,
        clusters,
    })
}

fn write_rows(path: &Path, column: &str, coords: &[Point<f64>], values: &[String]) -> Result<()> {
    if coords.len() != values.len() {
        return Err(Error::DimMismatch(format!("{} coordinates for {} values", coords.len(), values.len())));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Numeric(format!("{other:?}")),
    })?;
    w.write_record(["x", "y", "z", column])?;
    for (p, v) in coords.iter().zip(values) {
        w.write_record([p[0].to_string(), p[1].to_string(), p[2].to_string(), v.clone()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `x,y,z,score` rows.
pub fn write_score_csv(path: &Path, coords: &[Point<f64>], scores: &[f64]) -> Result<()> {
    let vals: Vec<String> = scores.iter().map(|s| s.to_string()).collect();
    write_rows(path, "score", coords, &vals)
}

/// Writes `x,y,z,label` rows.
pub fn write_label_csv(path: &Path, coords: &[Point<f64>], labels: &[usize]) -> Result<()> {
    let vals: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    write_rows(path, "label", coords, &vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn within(values: &[f64], labels: &[usize]) -> f64 {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        (0..k)
            .map(|c| {
                let g: Vec<f64> = values.iter().zip(labels).filter(|(_, &l)| l == c).map(|(&v, _)| v).collect();
                if g.is_empty() {
                    return 0.0;
                }
                let m = g.iter().sum::<f64>() / g.len() as f64;
                g.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
            })
            .sum()
    }

    /// Best cost over every split of the sorted values into exactly `k`
    /// contiguous intervals.
    fn brute(values: &[f64], k: usize) -> f64 {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let seg = |a: usize, b: usize| {
            let m = s[a..b].iter().sum::<f64>() / (b - a) as f64;
            s[a..b].iter().map(|v| (v - m) * (v - m)).sum::<f64>()
        };
        let mut best = f64::INFINITY;
        // choose k-1 cut positions among 1..n via bitmask
        for mask in 0u32..(1 << (n - 1)) {
            if mask.count_ones() as usize != k - 1 {
                continue;
            }
            let mut cost = 0.0;
            let mut start = 0;
            for cut in 1..n {
                if mask & (1 << (cut - 1)) != 0 {
                    cost += seg(start, cut);
                    start = cut;
                }
            }
            cost += seg(start, n);
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn identical_tokens_form_one_cluster() {
        assert_eq!(kmeans_1d(&[0.3; 10], 3).unwrap(), vec![0; 10]);
        let tokens = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(similarity_dump(&[0.5, -1.0], &tokens, 3).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn three_distinct_values_are_singletons() {
        assert_eq!(kmeans_1d(&[1.0, 0.0, 0.5], 3).unwrap(), vec![2, 0, 1]);
    }

    #[test]
    fn zero_clusters_is_rejected() {
        assert!(kmeans_1d(&[1.0], 0).is_err());
    }

    #[test]
    fn zero_norm_similarity_is_zero() {
        let tokens = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let s = cosine_similarities(&[3.0, 4.0], &tokens);
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn dp_matches_exhaustive_partition(values in prop::collection::vec(-1.0f64..1.0, 3..=16), k in 1usize..=4) {
            let labels = kmeans_1d(&values, k).unwrap();
            let got = within(&values, &labels);
            let best = (1..=k.min(values.len())).map(|c| brute(&values, c)).fold(f64::INFINITY, f64::min);
            prop_assert!(got <= best + 1e-12, "dp {got} vs brute {best}");
        }

        #[test]
        fn labels_are_monotone_in_value(values in prop::collection::vec(-1.0f64..1.0, 1..64), k in 1usize..=5) {
            let labels = kmeans_1d(&values, k).unwrap();
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] < values[j] {
                        prop_assert!(labels[i] <= labels[j]);
                    }
                    if values[i] == values[j] {
                        prop_assert_eq!(labels[i], labels[j]);
                    }
                }
            }
            prop_assert!(labels.iter().all(|&l| l < k));
        }
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_score_csv(&p, &[[0.0, 1.0, 2.0], [0.5, 0.5, 0.5]], &[0.25, 0.75]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "x,y,z,score\n0,1,2,0.25\n0.5,0.5,0.5,0.75\n");
        let q = dir.path().join("l.csv");
        write_label_csv(&q, &[[0.0, 0.0, 0.0]], &[2]).unwrap();
        assert_eq!(std::fs::read_to_string(&q).unwrap(), "x,y,z,label\n0,0,0,2\n");
    }
}
