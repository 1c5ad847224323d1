//! Trainable point tokenizer: a small hierarchical network that turns a
//! normalized cloud into `N` feature tokens anchored at FPS centres.
//!
//! ```text
//! lift:   xyz -> d0, SiLU
//! stage:  FPS to half the points, kNN group around each centre,
//!         enc = SiLU([neighbour feature | relative xyz] · W_enc)
//!         out = [centre feature | max_k enc | mean_k enc] · W_out
//! ```
//!
//! All layers are biasless.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::pointcloud::{fps, knn, sub, Point, PointCloud};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub stages: usize,
    pub points_in: usize,
    pub tokens_out: usize,
    pub k_neighbors: usize,
    /// Lift width followed by the output width of each stage.
    pub dims: Vec<usize>,
}

impl TokenizerConfig {
    /// 512 points to 64 tokens.
    pub fn desk(dim: usize) -> Self {
        Self {
            stages: 3,
            points_in: 512,
            tokens_out: 64,
            k_neighbors: 8,
            dims: vec![16, 32, 48, dim],
        }
    }

    /// 48 points to 12 tokens.
    pub fn toy(dim: usize) -> Self {
        Self {
            stages: 2,
            points_in: 48,
            tokens_out: 12,
            k_neighbors: 4,
            dims: vec![8, 12, dim],
        }
    }

    /// 1024 points to 128 tokens.
    pub fn reference(dim: usize) -> Self {
        Self {
            stages: 3,
            points_in: 1024,
            tokens_out: 128,
            k_neighbors: 16,
            dims: vec![32, 64, 128, dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dims.len() != self.stages + 1 {
            return bad(format!(
                "tokenizer needs {} widths for {} stages, got {}",
                self.stages + 1,
                self.stages,
                self.dims.len()
            ));
        }
        if self.dims.iter().any(|&d| d == 0) || self.dims.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("tokenizer widths must be positive and strictly increasing: {:?}", self.dims));
        }
        if self.stages >= usize::BITS as usize || self.points_in != self.tokens_out << self.stages {
            return bad(format!(
                "{} points cannot halve {} times into {} tokens",
                self.points_in, self.stages, self.tokens_out
            ));
        }
        if self.tokens_out < 1 {
            return bad("tokens_out must be >= 1".into());
        }
        if self.stages > 0 && (self.k_neighbors < 1 || self.k_neighbors > 2 * self.tokens_out) {
            return bad(format!(
                "k_neighbors {} must lie in 1..={}",
                self.k_neighbors,
                2 * self.tokens_out
            ));
        }
        Ok(())
    }
}

/// Exact number of trainable scalars. Zero stages means no tokenizer at all.
pub fn tokenizer_param_count(cfg: &TokenizerConfig) -> usize {
    if cfg.stages == 0 || cfg.dims.is_empty() {
        return 0;
    }
    let lift = 3 * cfg.dims[0];
    let stages: usize = cfg
        .dims
        .windows(2)
        .map(|w| (w[0] + 3) * w[0] + 3 * w[0] * w[1])
        .sum();
    lift + stages
}

pub fn lift_name() -> String {
    "tokenizer.lift".into()
}

pub fn enc_name(stage: usize) -> String {
    format!("tokenizer.stage{stage}.enc")
}

pub fn out_name(stage: usize) -> String {
    format!("tokenizer.stage{stage}.out")
}

/// Fan-in uniform initialization (He bound on SiLU layers).
pub fn init_tokenizer<T: Scalar, R: Rng + ?Sized>(cfg: &TokenizerConfig, rng: &mut R) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    if cfg.stages == 0 {
        return Ok(p);
    }
    let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
    let lin = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
    p.insert(lift_name(), Matrix::uniform(3, cfg.dims[0], he(3), rng));
    for (s, w) in cfg.dims.windows(2).enumerate() {
        let (c, c2) = (w[0], w[1]);
        p.insert(enc_name(s), Matrix::uniform(c + 3, c, he(c + 3), rng));
        p.insert(out_name(s), Matrix::uniform(3 * c, c2, lin(3 * c), rng));
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet<T> {
    pub features: Matrix<T>,
    pub coords: Vec<Point<T>>,
}

/// Sampling and grouping indices of one stage. They depend only on
/// coordinates, so they can be computed once per cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan<T> {
    pub centres: Arc<Vec<usize>>,
    /// `k` neighbour indices per centre, flattened.
    pub neighbours: Arc<Vec<usize>>,
    /// Neighbour minus centre coordinates, one row per neighbour.
    pub relative: Matrix<T>,
    /// Coordinates of the centres.
    pub coords: Vec<Point<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerPlan<T> {
    pub points: Vec<Point<T>>,
    pub stages: Vec<StagePlan<T>>,
}

impl<T: Scalar> TokenizerPlan<T> {
    pub fn build(cloud: &PointCloud<T>, cfg: &TokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        if cloud.len() != cfg.points_in {
            return Err(Error::ConfigMismatch(format!(
                "cloud has {} points, tokenizer expects {}",
                cloud.len(),
                cfg.points_in
            )));
        }
        let mut cur: Vec<Point<T>> = cloud.points().to_vec();
        let mut stages = Vec::with_capacity(cfg.stages);
        for _ in 0..cfg.stages {
            let m = cur.len() / 2;
            let centres = fps(&cur, m)?;
            let coords: Vec<Point<T>> = centres.iter().map(|&i| cur[i]).collect();
            let groups = knn(&coords, &cur, cfg.k_neighbors)?;
            let k = cfg.k_neighbors;
            let mut relative = Matrix::zeros(m * k, 3);
            let mut neighbours = Vec::with_capacity(m * k);
            for (c, g) in groups.iter().enumerate() {
                for (slot, &n) in g.iter().enumerate() {
                    relative.row_mut(c * k + slot).copy_from_slice(&sub(cur[n], coords[c]));
                    neighbours.push(n);
                }
            }
            stages.push(StagePlan {
                centres: Arc::new(centres),
                neighbours: Arc::new(neighbours),
                relative,
                coords: coords.clone(),
            });
            cur = coords;
        }
        Ok(Self {
            points: cloud.points().to_vec(),
            stages,
        })
    }

    /// Coordinates of the output tokens.
    pub fn token_coords(&self) -> &[Point<T>] {
        self.stages.last().map_or(&self.points, |s| &s.coords)
    }
}

/// Records the tokenizer on `tape`; returns the `N × D` token features.
pub fn tokenize_on_tape<T: Scalar>(tape: &mut Tape<T>, plan: &TokenizerPlan<T>, cfg: &TokenizerConfig, params: &Bound<T>) -> Var {
    let n = plan.points.len();
    let mut xyz = Matrix::zeros(n, 3);
    for (i, p) in plan.points.iter().enumerate() {
        xyz.row_mut(i).copy_from_slice(p);
    }
    let xyz = tape.constant(xyz);
    let lifted = tape.matmul(xyz, params.var(&lift_name()));
    let mut f = tape.activation(lifted, Activation::Silu);
    let k = cfg.k_neighbors;
    for (s, st) in plan.stages.iter().enumerate() {
        let m = st.centres.len();
        let seg: Arc<Vec<usize>> = Arc::new((0..m * k).map(|r| r / k).collect());
        let neigh = tape.gather_rows(f, Arc::clone(&st.neighbours));
        let rel = tape.constant(st.relative.clone());
        let joined = tape.concat_cols(&[neigh, rel]);
        let enc = tape.matmul(joined, params.var(&enc_name(s)));
        let enc = tape.activation(enc, Activation::Silu);
        let mx = tape.segment_max(enc, &seg, m);
        let mean = tape.segment_mean(enc, Arc::clone(&seg), m);
        let centre = tape.gather_rows(f, Arc::clone(&st.centres));
        let cat = tape.concat_cols(&[centre, mx, mean]);
        f = tape.matmul(cat, params.var(&out_name(s)));
    }
    f
}

/// Forward-only tokenization.
pub fn tokenize<T: Scalar>(cloud: &PointCloud<T>, cfg: &TokenizerConfig, params: &ParamSet<T>) -> Result<TokenSet<T>> {
    let plan = TokenizerPlan::build(cloud, cfg)?;
    if cfg.stages == 0 {
        return Err(Error::InvalidConfig("a tokenizer with zero stages produces no features".into()));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = tokenize_on_tape(&mut tape, &plan, cfg, &bound);
    let features = tape.value(out).clone();
    if !features.is_finite() {
        return Err(Error::Numeric("non-finite token features".into()));
    }
    Ok(TokenSet {
        features,
        coords: plan.token_coords().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::{generate_shape, ShapeKind, ShapeSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> TokenizerConfig {
        TokenizerConfig {
            stages: 2,
            points_in: 32,
            tokens_out: 8,
            k_neighbors: 4,
            dims: vec![4, 6, 8],
        }
    }

    fn cloud(n: usize, seed: u64) -> PointCloud<f64> {
        generate_shape(&ShapeSpec {
            kind: ShapeKind::Torus,
            n_points: n,
            jitter_sigma: 0.01,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn param_count_examples() {
        let cfg = TokenizerConfig {
            stages: 2,
            points_in: 64,
            tokens_out: 16,
            k_neighbors: 8,
            dims: vec![6, 32, 64],
        };
        assert_eq!(tokenizer_param_count(&cfg), 3 * 6 + (9 * 6 + 18 * 32) + (35 * 32 + 96 * 64));
        let p = init_tokenizer::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.count(), tokenizer_param_count(&cfg));
        let zero = TokenizerConfig {
            stages: 0,
            points_in: 16,
            tokens_out: 16,
            k_neighbors: 0,
            dims: vec![8],
        };
        assert_eq!(tokenizer_param_count(&zero), 0);
    }

    #[test]
    fn doubling_widths_is_quadratic_in_the_linear_layers() {
        let cfg = TokenizerConfig {
            stages: 2,
            points_in: 64,
            tokens_out: 16,
            k_neighbors: 8,
            dims: vec![6, 32, 64],
        };
        let double = TokenizerConfig {
            dims: cfg.dims.iter().map(|d| 2 * d).collect(),
            ..cfg.clone()
        };
        // the 3-wide coordinate inputs are the only terms linear in width
        let linear: usize = 3 * 6 + 3 * (6 + 32);
        assert_eq!(4 * tokenizer_param_count(&cfg) - tokenizer_param_count(&double), 2 * linear);
    }

    #[test]
    fn output_shapes() {
        let cfg = TokenizerConfig::desk(64);
        let p = init_tokenizer(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let t = tokenize(&cloud(512, 2), &cfg, &p).unwrap();
        assert_eq!(t.features.shape(), (64, 64));
        assert_eq!(t.coords.len(), 64);
        assert!(t.coords.iter().all(|c| crate::pointcloud::norm(*c) <= 1.0));
    }

    #[test]
    fn wrong_cloud_size_is_a_config_mismatch() {
        let cfg = small_cfg();
        let p = init_tokenizer(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(tokenize(&cloud(40, 2), &cfg, &p), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small_cfg();
        c.dims = vec![4, 4, 8];
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.tokens_out = 7;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.k_neighbors = 17;
        assert!(c.validate().is_err());
    }

    #[test]
    fn tokenization_is_deterministic() {
        let cfg = small_cfg();
        let p = init_tokenizer(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = cloud(32, 4);
        let a = tokenize(&c, &cfg, &p).unwrap();
        let b = tokenize(&c, &cfg, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permuted_input_gives_the_same_token_multiset() {
        let cfg = small_cfg();
        let p = init_tokenizer(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = cloud(32, 6);
        let mut perm: Vec<usize> = (0..32).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(7));
        let shuffled = PointCloud::new(perm.iter().map(|&i| c.points()[i]).collect(), None).unwrap();
        let a = tokenize(&c, &cfg, &p).unwrap();
        let b = tokenize(&shuffled, &cfg, &p).unwrap();
        let rows = |t: &TokenSet<f64>| {
            let mut v: Vec<(Point<f64>, Vec<f64>)> =
                (0..t.coords.len()).map(|i| (t.coords[i], t.features.row(i).to_vec())).collect();
            v.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
            v
        };
        let (ra, rb) = (rows(&a), rows(&b));
        for ((ca, fa), (cb, fb)) in ra.iter().zip(&rb) {
            assert_eq!(ca, cb);
            for (x, y) in fa.iter().zip(fb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn features_stay_finite_at_init() {
        let cfg = TokenizerConfig::desk(64);
        let p = init_tokenizer(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for kind in ShapeKind::ALL {
            let c = generate_shape::<f32>(&ShapeSpec {
                kind,
                n_points: 512,
                jitter_sigma: 0.0,
                seed: 1,
            })
            .unwrap();
            let t = tokenize(&c, &cfg, &p).unwrap();
            assert!(t.features.is_finite());
            assert!(t.features.data().iter().all(|v| v.abs() < 1e3));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = TokenizerConfig {
            stages: 2,
            points_in: 32,
            tokens_out: 8,
            k_neighbors: 4,
            dims: vec![4, 6, 8],
        };
        let params = init_tokenizer::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let plan = TokenizerPlan::build(&cloud(32, 12), &cfg).unwrap();
        let probe = Matrix::uniform(8, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(13));
        let loss = |p: &ParamSet<f64>| -> (f64, Option<Vec<Matrix<f64>>>) {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, true);
            let f = tokenize_on_tape(&mut tape, &plan, &cfg, &b);
            let w = tape.constant(probe.clone());
            let prod = tape.mul(f, w);
            let sq = tape.mul(prod, prod);
            let l = tape.sum(sq);
            let g = tape.backward(l).unwrap();
            let grads = b.vars().iter().map(|&v| g.get(v).unwrap().clone()).collect();
            (tape.value(l).get(0, 0), Some(grads))
        };
        let (_, grads) = loss(&params);
        let grads = grads.unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for t in 0..params.len() {
            for idx in 0..params.values()[t].len() {
                let mut plus = params.clone();
                plus.values_mut()[t].data_mut()[idx] += h;
                let mut minus = params.clone();
                minus.values_mut()[t].data_mut()[idx] -= h;
                let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
                let an = grads[t].data()[idx];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
