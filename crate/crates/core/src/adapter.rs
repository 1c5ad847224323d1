//! Guided adapters inserted into the frozen blocks.
//!
//! For each view the point tokens are partitioned by the segment (1D) or
//! patch (2D) their projection falls into. Attention runs only inside a
//! group, the attended features are pooled per group and the pooled value is
//! added back to every member. A parameter-free voxel branch yields a
//! reference feature `B`, and the per-view results are blended with softmax
//! weights over `cos(B_i, F_ij)`.
//!
//! The trainable path works in a bottleneck of width `r`:
//!
//! ```text
//! h      = x · W_pre                      (N × r)
//! S      = (h W_q)(h W_k)ᵀ / √r           shared by all views
//! att_j  = softmax_masked_j(S) · (h W_v W_o)
//! F_j    = (att_j + pool_j(att_j)) · W_post   (N × D)
//! out    = x + Σ_j w_j ⊙ F_j,   w_i· = softmax_j(cos(B_i, F_ij) / τ)
//! ```
//!
//! `W_post` starts at zero so a fresh adapter is the identity.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::pointcloud::Point;
use crate::projection::{ProjectedPositions, ProjectionConfig, ProjectionMode};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    Full,
    /// Residual bottleneck MLP without any grouping.
    MlpBaseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    Adaptive,
    /// Plain average over views.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    /// Groups from the 1D/2D projections, one partition per view.
    Projected,
    /// A single partition from the 3D voxel grid.
    Voxel3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub variant: AdapterVariant,
    pub bottleneck_dim: usize,
    pub grid_size_3d: f64,
    pub ensemble: EnsembleMode,
    pub guidance: Guidance,
    pub pooling: Pooling,
    pub temperature: f64,
}

impl AdapterConfig {
    /// Voxel edge 0.08 for lines, 0.16 for planes.
    pub fn for_mode(mode: ProjectionMode, bottleneck_dim: usize) -> Self {
        Self {
            variant: AdapterVariant::Full,
            bottleneck_dim,
            grid_size_3d: match mode {
                ProjectionMode::Line1d => 0.08,
                ProjectionMode::Plane2d => 0.16,
            },
            ensemble: EnsembleMode::Adaptive,
            guidance: Guidance::Projected,
            pooling: Pooling::Mean,
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grid_size_3d > 0.0) {
            return Err(Error::InvalidConfig("grid_size_3d must be > 0".into()));
        }
        if self.bottleneck_dim < 1 {
            return Err(Error::InvalidConfig("bottleneck_dim must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        Ok(())
    }

    /// Trainable scalars in one block's adapter.
    pub fn param_count(&self, dim: usize) -> usize {
        let r = self.bottleneck_dim;
        match self.variant {
            AdapterVariant::Full => 2 * dim * r + 4 * r * r,
            AdapterVariant::MlpBaseline => 2 * dim * r,
        }
    }
}

pub fn param_name(block: usize, part: &str) -> String {
    format!("adapters.{block}.{part}")
}

/// Adapters for blocks `0..depth`.
pub fn init_adapters<T: Scalar, R: Rng + ?Sized>(cfg: &AdapterConfig, dim: usize, depth: usize, rng: &mut R) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let r = cfg.bottleneck_dim;
    let mut p = ParamSet::new();
    let b = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
    for i in 0..depth {
        match cfg.variant {
            AdapterVariant::Full => {
                p.insert(param_name(i, "pre"), Matrix::uniform(dim, r, b(dim), rng));
                for part in ["q", "k", "v", "o"] {
                    p.insert(param_name(i, part), Matrix::uniform(r, r, b(r), rng));
                }
                p.insert(param_name(i, "post"), Matrix::zeros(r, dim));
            }
            AdapterVariant::MlpBaseline => {
                p.insert(param_name(i, "down"), Matrix::uniform(dim, r, b(dim), rng));
                p.insert(param_name(i, "up"), Matrix::zeros(r, dim));
            }
        }
    }
    Ok(p)
}

/// Group key of token `i` in view `j`.
fn group_key<T: Scalar>(positions: &ProjectedPositions<T>, i: usize, j: usize, cfg: &ProjectionConfig) -> (i64, i64) {
    let p = positions.position(i, j);
    match cfg.mode {
        ProjectionMode::Line1d => ((p[0] / T::of_usize(cfg.segment_size)).floor().to_i64().unwrap_or(0), 0),
        ProjectionMode::Plane2d => {
            let s = T::of_usize(cfg.patch_size);
            (
                (p[0] / s).floor().to_i64().unwrap_or(0),
                (p[1] / s).floor().to_i64().unwrap_or(0),
            )
        }
    }
}

/// Dense group ids from arbitrary keys; groups are numbered in key order.
fn ids_from_keys<K: Ord + Clone>(keys: &[K]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for k in keys {
        map.entry(k.clone()).or_insert(0usize);
    }
    for (g, v) in map.values_mut().enumerate() {
        *v = g;
    }
    (keys.iter().map(|k| map[k]).collect(), map.len())
}

fn partition_from_ids(ids: &[usize], n_groups: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); n_groups];
    for (i, &g) in ids.iter().enumerate() {
        groups[g].push(i);
    }
    groups
}

/// Partition of the tokens of view `j` by projected segment or patch.
/// Groups are ordered by key and list members in ascending order.
pub fn group_tokens<T: Scalar>(positions: &ProjectedPositions<T>, j: usize, cfg: &ProjectionConfig) -> Vec<Vec<usize>> {
    let (ids, n) = view_group_ids(positions, j, cfg);
    partition_from_ids(&ids, n)
}

pub fn view_group_ids<T: Scalar>(positions: &ProjectedPositions<T>, j: usize, cfg: &ProjectionConfig) -> (Vec<usize>, usize) {
    let keys: Vec<(i64, i64)> = (0..positions.n_tokens()).map(|i| group_key(positions, i, j, cfg)).collect();
    ids_from_keys(&keys)
}

/// Voxel grouping with edge `grid`; keys use coordinates offset by +1.
pub fn voxel_group_ids<T: Scalar>(coords: &[Point<T>], grid: f64) -> (Vec<usize>, usize) {
    let g = T::of(grid);
    let keys: Vec<[i64; 3]> = coords
        .iter()
        .map(|p| p.map(|c| ((c + T::one()) / g).floor().to_i64().unwrap_or(0)))
        .collect();
    ids_from_keys(&keys)
}

/// Non-parametric reference feature: mean of the token's voxel.
pub fn baseline_branch<T: Scalar>(coords: &[Point<T>], features: &Matrix<T>, grid: f64) -> Matrix<T> {
    let (ids, n) = voxel_group_ids(coords, grid);
    let d = features.cols();
    let mut sums: Matrix<T> = Matrix::zeros(n, d);
    let mut counts = vec![0usize; n];
    for (i, &g) in ids.iter().enumerate() {
        counts[g] += 1;
        for (s, &v) in sums.row_mut(g).iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    let mut out = Matrix::zeros(ids.len(), d);
    for (i, &g) in ids.iter().enumerate() {
        let inv = T::one() / T::of_usize(counts[g]);
        for (o, &s) in out.row_mut(i).iter_mut().zip(sums.row(g)) {
            *o = s * inv;
        }
    }
    out
}

/// Projections of the intra-group attention, all `c × c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalWeights<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub o: Matrix<T>,
}

/// Group-by-group attention, pooling and propagation.
pub fn local_aggregate<T: Scalar>(features: &Matrix<T>, partition: &[Vec<usize>], w: &LocalWeights<T>, pooling: Pooling) -> Matrix<T> {
    let n = features.rows();
    let scale = T::one() / T::of_usize(w.q.cols()).sqrt();
    let q = features.matmul(&w.q);
    let k = features.matmul(&w.k);
    let vo = features.matmul(&w.v).matmul(&w.o);
    let co = vo.cols();
    let mut out = Matrix::zeros(n, co);
    for g in partition {
        let mut attended = Vec::with_capacity(g.len());
        for &i in g {
            let scores: Vec<T> = g.iter().map(|&j| dot(q.row(i), k.row(j)) * scale).collect();
            let mx = scores.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = scores.iter().map(|&s| (s - mx).exp()).collect();
            let z: T = e.iter().copied().sum();
            let mut row = vec![T::zero(); co];
            for (&j, &ej) in g.iter().zip(&e) {
                for (r, &v) in row.iter_mut().zip(vo.row(j)) {
                    *r += ej / z * v;
                }
            }
            attended.push(row);
        }
        let pooled: Vec<T> = (0..co)
            .map(|col| match pooling {
                Pooling::Mean => attended.iter().map(|r| r[col]).sum::<T>() / T::of_usize(g.len()),
                Pooling::Max => attended.iter().map(|r| r[col]).fold(T::neg_infinity(), T::max),
            })
            .collect();
        for (&i, row) in g.iter().zip(&attended) {
            for (col, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = row[col] + pooled[col];
            }
        }
    }
    out
}

/// Softmax-of-cosine blend of the view features. Returns the output and the
/// `N × M` weights.
pub fn adaptive_ensemble<T: Scalar>(b: &Matrix<T>, views: &[Matrix<T>], temperature: f64) -> Result<(Matrix<T>, Matrix<T>)> {
    let m = views.len();
    if m == 0 {
        return Err(Error::InvalidConfig("ensemble needs at least one view".into()));
    }
    if views.iter().any(|f| f.shape() != b.shape()) {
        return Err(Error::DimMismatch("view features must match the baseline shape".into()));
    }
    let (n, d) = b.shape();
    let floor = T::of(crate::autodiff::COSINE_ZERO_NORM);
    let inv_t = T::one() / T::of(temperature);
    let mut weights = Matrix::zeros(n, m);
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let bi = b.row(i);
        let nb = dot(bi, bi).sqrt();
        let sims: Vec<T> = views
            .iter()
            .map(|f| {
                let fi = f.row(i);
                let nf = dot(fi, fi).sqrt();
                if nb < floor || nf < floor {
                    T::zero()
                } else {
                    dot(bi, fi) / (nb * nf) * inv_t
                }
            })
            .collect();
        let mx = sims.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = sims.iter().map(|&s| (s - mx).exp()).collect();
        let z: T = e.iter().copied().sum();
        for (j, f) in views.iter().enumerate() {
            let w = e[j] / z;
            weights.set(i, j, w);
            for (o, &v) in out.row_mut(i).iter_mut().zip(f.row(i)) {
                *o += w * v;
            }
        }
    }
    Ok((out, weights))
}

#[derive(Clone, Debug, PartialEq)]
struct ViewGroups {
    ids: Arc<Vec<usize>>,
    n_groups: usize,
    /// `N × N`, true where both tokens share a group.
    mask: Vec<bool>,
}

impl ViewGroups {
    fn new(ids: Vec<usize>, n_groups: usize) -> Self {
        let n = ids.len();
        let mut mask = vec![false; n * n];
        for a in 0..n {
            for b in 0..n {
                mask[a * n + b] = ids[a] == ids[b];
            }
        }
        Self {
            ids: Arc::new(ids),
            n_groups,
            mask,
        }
    }
}

/// Groupings of one sample, shared by every block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPlan {
    views: Vec<ViewGroups>,
    voxel_ids: Arc<Vec<usize>>,
    n_voxels: usize,
}

impl AdapterPlan {
    pub fn build<T: Scalar>(
        coords: &[Point<T>],
        positions: &ProjectedPositions<T>,
        proj: &ProjectionConfig,
        cfg: &AdapterConfig,
    ) -> Self {
        let (voxel_ids, n_voxels) = voxel_group_ids(coords, cfg.grid_size_3d);
        let views = match cfg.guidance {
            Guidance::Projected => (0..positions.m_views())
                .map(|j| {
                    let (ids, n) = view_group_ids(positions, j, proj);
                    ViewGroups::new(ids, n)
                })
                .collect(),
            Guidance::Voxel3d => vec![ViewGroups::new(voxel_ids.clone(), n_voxels)],
        };
        Self {
            views,
            voxel_ids: Arc::new(voxel_ids),
            n_voxels,
        }
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn partition(&self, view: usize) -> Vec<Vec<usize>> {
        partition_from_ids(&self.views[view].ids, self.views[view].n_groups)
    }
}

/// Records the baseline feature `B` of `x` on the tape.
pub fn baseline_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, plan: &AdapterPlan) -> Var {
    let means = tape.segment_mean(x, Arc::clone(&plan.voxel_ids), plan.n_voxels);
    tape.gather_rows(means, Arc::clone(&plan.voxel_ids))
}

/// Records one block's adapter on `x` (`N × D`); returns `x + adapter(x)`.
/// `baseline` substitutes a precomputed `B`.
pub fn adapter_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    block: usize,
    plan: &AdapterPlan,
    cfg: &AdapterConfig,
    params: &Bound<T>,
    baseline: Option<Var>,
) -> Var {
    let name = |part: &str| param_name(block, part);
    if cfg.variant == AdapterVariant::MlpBaseline {
        let h = tape.matmul(x, params.var(&name("down")));
        let h = tape.activation(h, Activation::Gelu);
        let up = tape.matmul(h, params.var(&name("up")));
        return tape.add(x, up);
    }
    let r = cfg.bottleneck_dim;
    let h = tape.matmul(x, params.var(&name("pre")));
    let q = tape.matmul(h, params.var(&name("q")));
    let k = tape.matmul(h, params.var(&name("k")));
    let v = tape.matmul(h, params.var(&name("v")));
    let vo = tape.matmul(v, params.var(&name("o")));
    let s = tape.matmul_nt(q, k);
    let s = tape.scale(s, T::one() / T::of_usize(r).sqrt());
    let post = params.var(&name("post"));
    let mut feats = Vec::with_capacity(plan.views.len());
    for view in &plan.views {
        let a = tape.softmax_rows(s, Some(&view.mask));
        let att = tape.matmul(a, vo);
        let pooled = match cfg.pooling {
            Pooling::Mean => tape.segment_mean(att, Arc::clone(&view.ids), view.n_groups),
            Pooling::Max => tape.segment_max(att, &view.ids, view.n_groups),
        };
        let spread = tape.gather_rows(pooled, Arc::clone(&view.ids));
        let local = tape.add(att, spread);
        feats.push(tape.matmul(local, post));
    }
    let blended = if feats.len() == 1 {
        feats[0]
    } else {
        match cfg.ensemble {
            EnsembleMode::Mean => {
                let mut acc = feats[0];
                for &f in &feats[1..] {
                    acc = tape.add(acc, f);
                }
                tape.scale(acc, T::one() / T::of_usize(feats.len()))
            }
            EnsembleMode::Adaptive => {
                let b = baseline.unwrap_or_else(|| baseline_on_tape(tape, x, plan));
                let sims: Vec<Var> = feats.iter().map(|&f| tape.row_cosine(b, f)).collect();
                let sims = tape.concat_cols(&sims);
                let sims = tape.scale(sims, T::one() / T::of(cfg.temperature));
                let w = tape.softmax_rows(sims, None);
                let mut acc = None;
                for (j, &f) in feats.iter().enumerate() {
                    let wj = tape.slice_cols(w, j, j + 1);
                    let term = tape.mul_col(f, wj);
                    acc = Some(match acc {
                        None => term,
                        Some(a) => tape.add(a, term),
                    });
                }
                acc.expect("at least two views")
            }
        }
    };
    tape.add(x, blended)
}

/// Forward-only adapter for block `block`.
pub fn adapter_forward<T: Scalar>(
    features: &Matrix<T>,
    plan: &AdapterPlan,
    cfg: &AdapterConfig,
    params: &ParamSet<T>,
    block: usize,
) -> Matrix<T> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(features.clone());
    let out = adapter_on_tape(&mut tape, x, block, plan, cfg, &bound, None);
    tape.value(out).clone()
}

/// Brute-force grouping oracle shared by tests: bucket tokens with a hash map.
#[doc(hidden)]
pub fn bucket_by_key<K: std::hash::Hash + Eq + Clone>(keys: &[K]) -> Vec<Vec<usize>> {
    let mut map: HashMap<K, Vec<usize>> = HashMap::new();
    for (i, k) in keys.iter().enumerate() {
        map.entry(k.clone()).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = map.into_values().collect();
    groups.sort();
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::make_view_basis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn ball(n: usize, seed: u64) -> Vec<Point<f64>> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| loop {
                let p: [f64; 3] = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
                if p.iter().map(|c| c * c).sum::<f64>() <= 1.0 {
                    break p;
                }
            })
            .collect()
    }

    fn positions(coords: &[Point<f64>], cfg: &ProjectionConfig) -> ProjectedPositions<f64> {
        ProjectedPositions::compute(coords, &make_view_basis(cfg), cfg).unwrap()
    }

    fn identity(c: usize) -> Matrix<f64> {
        let mut m = Matrix::zeros(c, c);
        for i in 0..c {
            m.set(i, i, 1.0);
        }
        m
    }

    fn sorted(mut p: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
        p.sort();
        p
    }

    #[test]
    fn single_patch_and_singletons() {
        let cfg = ProjectionConfig {
            m_views: 1,
            patch_size: 512,
            ..ProjectionConfig::vision()
        };
        let coords = ball(10, 1);
        assert_eq!(group_tokens(&positions(&coords, &cfg), 0, &cfg), vec![(0..10).collect::<Vec<_>>()]);

        let line = ProjectionConfig {
            m_views: 1,
            line_length: 1000,
            segment_size: 1,
            ..ProjectionConfig::language()
        };
        let spread: Vec<Point<f64>> = (0..10).map(|i| [-0.9 + 0.2 * i as f64, 0.0, 0.0]).collect();
        let p = group_tokens(&positions(&spread, &line), 0, &line);
        assert_eq!(p.len(), 10);
        assert!(p.iter().all(|g| g.len() == 1));
    }

    #[test]
    fn grouping_matches_hash_buckets() {
        for (seed, cfg) in [(2, ProjectionConfig::vision()), (3, ProjectionConfig::language())] {
            let coords = ball(64, seed);
            let pos = positions(&coords, &cfg);
            for j in 0..cfg.m_views {
                let keys: Vec<(i64, i64)> = (0..64)
                    .map(|i| {
                        let p = pos.position(i, j);
                        match cfg.mode {
                            ProjectionMode::Line1d => ((p[0] / cfg.segment_size as f64).floor() as i64, 0),
                            ProjectionMode::Plane2d => (
                                (p[0] / cfg.patch_size as f64).floor() as i64,
                                (p[1] / cfg.patch_size as f64).floor() as i64,
                            ),
                        }
                    })
                    .collect();
                assert_eq!(sorted(group_tokens(&pos, j, &cfg)), bucket_by_key(&keys));
            }
        }
    }

    #[test]
    fn baseline_extremes() {
        let coords = ball(20, 4);
        let f = Matrix::uniform(20, 5, 1.0, &mut rng(5));
        let b = baseline_branch(&coords, &f, 10.0);
        for i in 0..20 {
            for c in 0..5 {
                let mean: f64 = (0..20).map(|r| f.get(r, c)).sum::<f64>() / 20.0;
                assert!((b.get(i, c) - mean).abs() < 1e-12);
            }
        }
        assert_eq!(baseline_branch(&coords, &f, 1e-6), f);
    }

    #[test]
    fn singleton_groups_with_identity_weights_double_features() {
        let f = Matrix::uniform(6, 4, 1.0, &mut rng(6));
        let w = LocalWeights {
            q: identity(4),
            k: identity(4),
            v: identity(4),
            o: identity(4),
        };
        let part: Vec<Vec<usize>> = (0..6).map(|i| vec![i]).collect();
        let out = local_aggregate(&f, &part, &w, Pooling::Mean);
        let twice = f.map(|v| 2.0 * v);
        assert!(out.max_abs_diff(&twice) < 1e-15);
    }

    #[test]
    fn zero_query_key_weights_average_values_in_the_group() {
        let f = Matrix::uniform(5, 3, 1.0, &mut rng(7));
        let z = Matrix::zeros(3, 3);
        let w = LocalWeights {
            q: z.clone(),
            k: z,
            v: identity(3),
            o: identity(3),
        };
        let out = local_aggregate(&f, &[vec![0, 1, 2, 3, 4]], &w, Pooling::Mean);
        // uniform attention makes every attended row the group mean m; output = m + m
        for i in 0..5 {
            for c in 0..3 {
                let m: f64 = (0..5).map(|r| f.get(r, c)).sum::<f64>() / 5.0;
                assert!((out.get(i, c) - 2.0 * m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ensemble_trivial_cases_and_scale_invariance() {
        let b: Matrix<f64> = Matrix::uniform(8, 4, 1.0, &mut rng(8));
        let f = Matrix::uniform(8, 4, 1.0, &mut rng(9));
        let (out, _) = adaptive_ensemble(&b, &[f.clone(), f.clone(), f.clone()], 1.0).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-15);
        let (out, w) = adaptive_ensemble(&b, &[f.clone()], 1.0).unwrap();
        assert_eq!(out, f);
        assert!(w.data().iter().all(|&x| x == 1.0));

        let views: Vec<_> = (0..4).map(|s| Matrix::uniform(8, 4, 1.0, &mut rng(20 + s))).collect();
        let (o1, w1) = adaptive_ensemble(&b, &views, 1.0).unwrap();
        let (o2, w2) = adaptive_ensemble(&b.map(|v| 37.5 * v), &views, 1.0).unwrap();
        assert!(w1.max_abs_diff(&w2) < 1e-12);
        assert!(o1.max_abs_diff(&o2) < 1e-12);
    }

    #[test]
    fn zero_baseline_row_gives_uniform_weights() {
        let b: Matrix<f64> = Matrix::zeros(2, 3);
        let views: Vec<_> = (0..3).map(|s| Matrix::uniform(2, 3, 1.0, &mut rng(s))).collect();
        let (_, w) = adaptive_ensemble(&b, &views, 1.0).unwrap();
        assert!(w.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    fn setup(m: usize, seed: u64) -> (Vec<Point<f64>>, ProjectedPositions<f64>, ProjectionConfig) {
        let cfg = ProjectionConfig {
            m_views: m,
            patch_size: 128,
            ..ProjectionConfig::vision()
        };
        let coords = ball(16, seed);
        let pos = positions(&coords, &cfg);
        (coords, pos, cfg)
    }

    fn randomize_post(p: &mut ParamSet<f64>, seed: u64) {
        let names: Vec<String> = p.names().iter().filter(|n| n.ends_with("post") || n.ends_with("up")).cloned().collect();
        for n in names {
            let m = p.get_mut(&n).unwrap();
            *m = Matrix::uniform(m.rows(), m.cols(), 0.5, &mut rng(seed));
        }
    }

    #[test]
    fn fresh_adapters_are_identity() {
        let (coords, pos, proj) = setup(3, 10);
        let x = Matrix::uniform(16, 8, 1.0, &mut rng(11));
        for variant in [AdapterVariant::Full, AdapterVariant::MlpBaseline] {
            let cfg = AdapterConfig {
                variant,
                ..AdapterConfig::for_mode(ProjectionMode::Plane2d, 4)
            };
            let params = init_adapters::<f64, _>(&cfg, 8, 1, &mut rng(12)).unwrap();
            let plan = AdapterPlan::build(&coords, &pos, &proj, &cfg);
            assert_eq!(adapter_forward(&x, &plan, &cfg, &params, 0), x);
        }
    }

    #[test]
    fn full_adapter_equals_manual_composition() {
        let (coords, pos, proj) = setup(3, 13);
        let cfg = AdapterConfig::for_mode(ProjectionMode::Plane2d, 4);
        let mut params = init_adapters::<f64, _>(&cfg, 8, 1, &mut rng(14)).unwrap();
        randomize_post(&mut params, 15);
        let x = Matrix::uniform(16, 8, 1.0, &mut rng(16));
        let plan = AdapterPlan::build(&coords, &pos, &proj, &cfg);
        let got = adapter_forward(&x, &plan, &cfg, &params, 0);

        let g = |n: &str| params.get(&param_name(0, n)).unwrap().clone();
        let h = x.matmul(&g("pre"));
        let w = LocalWeights {
            q: g("q"),
            k: g("k"),
            v: g("v"),
            o: g("o"),
        };
        let views: Vec<Matrix<f64>> = (0..3)
            .map(|j| local_aggregate(&h, &group_tokens(&pos, j, &proj), &w, Pooling::Mean).matmul(&g("post")))
            .collect();
        let b = baseline_branch(&coords, &x, cfg.grid_size_3d);
        let (blend, _) = adaptive_ensemble(&b, &views, 1.0).unwrap();
        let mut expect = x.clone();
        expect.add_assign(&blend);
        assert!(got.max_abs_diff(&expect) < 1e-10, "{}", got.max_abs_diff(&expect));
    }

    #[test]
    fn masked_attention_matches_group_oracle() {
        let (coords, pos, proj) = setup(2, 17);
        for pooling in [Pooling::Mean, Pooling::Max] {
            let cfg = AdapterConfig {
                pooling,
                ..AdapterConfig::for_mode(ProjectionMode::Plane2d, 5)
            };
            let plan = AdapterPlan::build(&coords, &pos, &proj, &cfg);
            let w = LocalWeights {
                q: Matrix::uniform(5, 5, 1.0, &mut rng(18)),
                k: Matrix::uniform(5, 5, 1.0, &mut rng(19)),
                v: Matrix::uniform(5, 5, 1.0, &mut rng(20)),
                o: Matrix::uniform(5, 5, 1.0, &mut rng(21)),
            };
            let mut params = ParamSet::new();
            params.insert(param_name(0, "pre"), identity(5));
            params.insert(param_name(0, "q"), w.q.clone());
            params.insert(param_name(0, "k"), w.k.clone());
            params.insert(param_name(0, "v"), w.v.clone());
            params.insert(param_name(0, "o"), w.o.clone());
            params.insert(param_name(0, "post"), identity(5));
            let x = Matrix::uniform(16, 5, 1.0, &mut rng(22));
            // one view at a time through the mean ensemble of a single view
            for j in 0..2 {
                let single = AdapterPlan {
                    views: vec![plan.views[j].clone()],
                    ..plan.clone()
                };
                let got = adapter_forward(&x, &single, &cfg, &params, 0);
                let mut expect = x.clone();
                expect.add_assign(&local_aggregate(&x, &plan.partition(j), &w, pooling));
                assert!(got.max_abs_diff(&expect) < 1e-10);
            }
        }
    }

    #[test]
    fn cached_baseline_gives_identical_gradients() {
        let (coords, pos, proj) = setup(3, 23);
        let cfg = AdapterConfig::for_mode(ProjectionMode::Plane2d, 4);
        let mut params = init_adapters::<f64, _>(&cfg, 8, 1, &mut rng(24)).unwrap();
        randomize_post(&mut params, 25);
        let x = Matrix::uniform(16, 8, 1.0, &mut rng(26));
        let plan = AdapterPlan::build(&coords, &pos, &proj, &cfg);
        let run = |cached: bool| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let b = cached.then(|| tape.constant(baseline_branch(&coords, &x, cfg.grid_size_3d)));
            let out = adapter_on_tape(&mut tape, xv, 0, &plan, &cfg, &bound, b);
            let sq = tape.mul(out, out);
            let l = tape.sum(sq);
            let g = tape.backward(l).unwrap();
            bound.vars().iter().map(|&v| g.get(v).unwrap().clone()).collect::<Vec<_>>()
        };
        for (a, b) in run(false).iter().zip(run(true)) {
            assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let (coords, _, proj) = setup(2, 27);
        let coords = &coords[..12];
        let pos = ProjectedPositions::compute(coords, &make_view_basis(&proj), &proj).unwrap();
        let cfg = AdapterConfig::for_mode(ProjectionMode::Plane2d, 3);
        let mut params = init_adapters::<f64, _>(&cfg, 8, 1, &mut rng(28)).unwrap();
        randomize_post(&mut params, 29);
        let x = Matrix::uniform(12, 8, 1.0, &mut rng(30));
        let probe = Matrix::uniform(12, 8, 1.0, &mut rng(31));
        let plan = AdapterPlan::build(coords, &pos, &proj, &cfg);
        let eval = |p: &ParamSet<f64>, grads: bool| {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let out = adapter_on_tape(&mut tape, xv, 0, &plan, &cfg, &bound, None);
            let w = tape.constant(probe.clone());
            let prod = tape.mul(out, w);
            let sq = tape.mul(prod, prod);
            let l = tape.sum(sq);
            let value = tape.value(l).get(0, 0);
            let g = grads.then(|| {
                let g = tape.backward(l).unwrap();
                bound.vars().iter().map(|&v| g.get(v).unwrap().clone()).collect::<Vec<_>>()
            });
            (value, g)
        };
        let grads = eval(&params, true).1.unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for t in 0..params.len() {
            for i in 0..params.values()[t].len() {
                let mut a = params.clone();
                a.values_mut()[t].data_mut()[i] += h;
                let mut b = params.clone();
                b.values_mut()[t].data_mut()[i] -= h;
                let fd = (eval(&a, false).0 - eval(&b, false).0) / (2.0 * h);
                let an = grads[t].data()[i];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn param_counts() {
        let cfg = AdapterConfig::for_mode(ProjectionMode::Line1d, 24);
        assert_eq!(cfg.param_count(768), 2 * 768 * 24 + 4 * 24 * 24);
        let p = init_adapters::<f32, _>(&cfg, 768, 2, &mut rng(0)).unwrap();
        assert_eq!(p.count(), 2 * cfg.param_count(768));
        let mlp = AdapterConfig {
            variant: AdapterVariant::MlpBaseline,
            ..cfg.clone()
        };
        let double = AdapterConfig {
            bottleneck_dim: 48,
            ..mlp.clone()
        };
        assert_eq!(double.param_count(768), 2 * mlp.param_count(768));
    }
}
