//! Point-cloud containers and the geometric primitives the tokenizer and
//! adapters are built on: unit-sphere normalization, farthest point
//! sampling, k-nearest neighbours and training-time augmentation.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Point<T> = [T; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    points: Vec<Point<T>>,
    label: Option<u16>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<Point<T>>, label: Option<u16>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateCloud("cloud has no points".into()));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::DegenerateCloud("non-finite coordinate".into()));
        }
        Ok(Self { points, label })
    }

    pub fn points(&self) -> &[Point<T>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn label(&self) -> Option<u16> {
        self.label
    }

    pub fn with_label(mut self, label: Option<u16>) -> Self {
        self.label = label;
        self
    }

    pub fn centroid(&self) -> Point<T> {
        centroid(&self.points)
    }

    pub fn cast<U: Scalar>(&self) -> PointCloud<U> {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| [U::of(p[0].as_f64()), U::of(p[1].as_f64()), U::of(p[2].as_f64())])
                .collect(),
            label: self.label,
        }
    }

    /// Centers the cloud on its centroid and scales it so the farthest point
    /// has unit norm.
    pub fn normalize_to_unit_sphere(&self) -> Result<Self> {
        let c = self.centroid();
        let centered: Vec<Point<T>> = self.points.iter().map(|p| sub(*p, c)).collect();
        let radius = centered.iter().map(|p| norm(*p)).fold(T::zero(), T::max);
        if radius <= T::epsilon() * T::of(16.0) {
            return Err(Error::DegenerateCloud("all points coincide".into()));
        }
        let inv = T::one() / radius;
        let points = centered
            .into_iter()
            .map(|p| {
                let q = [p[0] * inv, p[1] * inv, p[2] * inv];
                // guard the farthest point against landing a hair outside the ball
                let n = norm(q);
                if n > T::one() {
                    [q[0] / n, q[1] / n, q[2] / n]
                } else {
                    q
                }
            })
            .collect();
        Ok(Self {
            points,
            label: self.label,
        })
    }
}

#[inline]
pub fn sub<T: Scalar>(a: Point<T>, b: Point<T>) -> Point<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dot3<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm<T: Scalar>(p: Point<T>) -> T {
    dot3(p, p).sqrt()
}

#[inline]
pub fn dist2<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    let d = sub(a, b);
    dot3(d, d)
}

pub fn centroid<T: Scalar>(points: &[Point<T>]) -> Point<T> {
    let mut s = [T::zero(); 3];
    for p in points {
        s[0] += p[0];
        s[1] += p[1];
        s[2] += p[2];
    }
    let inv = T::one() / T::of_usize(points.len().max(1));
    [s[0] * inv, s[1] * inv, s[2] * inv]
}

/// Rotation about the vertical (second) axis by `angle` radians.
#[inline]
pub fn rotate_y<T: Scalar>(p: Point<T>, angle: T) -> Point<T> {
    let (s, c) = angle.sin_cos();
    [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]]
}

/// Farthest point sampling.
///
/// The first pick is the point farthest from the centroid; each later pick
/// maximizes the distance to the already-picked set. Ties go to the lowest
/// index.
pub fn fps<T: Scalar>(points: &[Point<T>], m: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m < 1 || m > n {
        return Err(Error::InvalidCount { m, n });
    }
    let c = centroid(points);
    let mut first = 0;
    let mut best = T::neg_infinity();
    for (i, p) in points.iter().enumerate() {
        let d = dist2(*p, c);
        if d > best {
            best = d;
            first = i;
        }
    }
    let mut picked = Vec::with_capacity(m);
    let mut min_d = vec![T::infinity(); n];
    let mut taken = vec![false; n];
    let mut cur = first;
    for _ in 0..m {
        picked.push(cur);
        taken[cur] = true;
        let pc = points[cur];
        let mut next = usize::MAX;
        let mut far = T::neg_infinity();
        for (i, p) in points.iter().enumerate() {
            let d = dist2(*p, pc);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > far {
                far = min_d[i];
                next = i;
            }
        }
        cur = next;
    }
    Ok(picked)
}

#[inline]
fn by_distance<T: Scalar>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Exhaustive k-nearest neighbours. Each list is sorted by distance with ties
/// broken by the lower reference index.
pub fn knn<T: Scalar>(queries: &[Point<T>], reference: &[Point<T>], k: usize) -> Result<Vec<Vec<usize>>> {
    if k > reference.len() {
        return Err(Error::InvalidK {
            k,
            n: reference.len(),
        });
    }
    let mut scratch: Vec<(T, usize)> = Vec::with_capacity(reference.len());
    Ok(queries
        .iter()
        .map(|q| {
            scratch.clear();
            scratch.extend(reference.iter().enumerate().map(|(i, r)| (dist2(*q, *r), i)));
            if k == 0 {
                return Vec::new();
            }
            if k < scratch.len() {
                scratch.select_nth_unstable_by(k - 1, by_distance);
            }
            let head = &mut scratch[..k];
            head.sort_unstable_by(by_distance);
            head.iter().map(|&(_, i)| i).collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    pub translation_range: f64,
    pub rotation: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: (0.8, 1.2),
            translation_range: 0.1,
            rotation: true,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidConfig(format!(
                "scale range ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        if !(self.translation_range >= 0.0) {
            return Err(Error::InvalidConfig("translation bound must be >= 0".into()));
        }
        Ok(())
    }

    /// The identity transform.
    pub fn none() -> Self {
        Self {
            scale_range: (1.0, 1.0),
            translation_range: 0.0,
            rotation: false,
            seed: 0,
        }
    }
}

/// Random azimuthal rotation, isotropic scaling and per-axis translation.
///
/// Exactly five values are drawn from `rng` regardless of the configuration,
/// so toggling one component never shifts the random stream of the others.
pub fn augment<T: Scalar, R: Rng + ?Sized>(cloud: &PointCloud<T>, cfg: &AugmentConfig, rng: &mut R) -> PointCloud<T> {
    let u: [f64; 5] = rng.gen();
    let angle = std::f64::consts::TAU * u[0];
    let (lo, hi) = cfg.scale_range;
    let scale = lo + (hi - lo) * u[1];
    let t = cfg.translation_range;
    let shift = [t * (2.0 * u[2] - 1.0), t * (2.0 * u[3] - 1.0), t * (2.0 * u[4] - 1.0)];
    let (angle, scale) = (T::of(angle), T::of(scale));
    let shift = shift.map(T::of);
    let points = cloud
        .points
        .iter()
        .map(|&p| {
            let p = if cfg.rotation { rotate_y(p, angle) } else { p };
            [p[0] * scale + shift[0], p[1] * scale + shift[1], p[2] * scale + shift[2]]
        })
        .collect();
    PointCloud {
        points,
        label: cloud.label,
    }
}
