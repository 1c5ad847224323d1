//! Procedural surface samples of five primitive solids, used as a small
//! labelled classification benchmark.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{Point, PointCloud};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    Cone,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
        }
    }

    /// Shapes symmetric under `p -> -p` are sampled in antithetic pairs so
    /// their sample centroid is the true center.
    fn centrally_symmetric(self) -> bool {
        !matches!(self, ShapeKind::Cone)
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown shape class `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub n_points: usize,
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 8 {
            return Err(Error::InvalidConfig(format!(
                "n_points must be >= 8, got {}",
                self.n_points
            )));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::InvalidConfig("jitter_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Raw surface samples before jitter and normalization. Per-instance
/// proportions (torus tube radius, cylinder and cone heights) are drawn from
/// `rng` so instances of one class are not identical.
pub fn sample_surface<R: Rng + ?Sized>(kind: ShapeKind, n: usize, rng: &mut R) -> Vec<Point<f64>> {
    use std::f64::consts::{PI, TAU};
    let torus_r = rng.gen_range(0.25..0.45);
    let cyl_h = rng.gen_range(0.6..1.2);
    let cone_h: f64 = rng.gen_range(1.2..2.0);

    let one = |rng: &mut R| -> Point<f64> {
        match kind {
            ShapeKind::Sphere => loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-9 {
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            },
            ShapeKind::Cube => {
                let face = rng.gen_range(0..6usize);
                let a = rng.gen_range(-1.0..=1.0);
                let b = rng.gen_range(-1.0..=1.0);
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                }
            }
            ShapeKind::Torus => {
                // area element is proportional to (R + r cos theta)
                let theta = loop {
                    let t = rng.gen_range(0.0..TAU);
                    let w = (1.0 + torus_r * t.cos()) / (1.0 + torus_r);
                    if rng.gen::<f64>() < w {
                        break t;
                    }
                };
                let phi = rng.gen_range(0.0..TAU);
                let ring = 1.0 + torus_r * theta.cos();
                [ring * phi.cos(), torus_r * theta.sin(), ring * phi.sin()]
            }
            ShapeKind::Cylinder => {
                let side = 2.0 * PI * 2.0 * cyl_h;
                let caps = 2.0 * PI;
                let phi = rng.gen_range(0.0..TAU);
                if rng.gen::<f64>() * (side + caps) < side {
                    [phi.cos(), rng.gen_range(-cyl_h..=cyl_h), phi.sin()]
                } else {
                    let rho = rng.gen::<f64>().sqrt();
                    let y = if rng.gen::<bool>() { cyl_h } else { -cyl_h };
                    [rho * phi.cos(), y, rho * phi.sin()]
                }
            }
            ShapeKind::Cone => {
                let slant = (1.0 + cone_h * cone_h).sqrt();
                let lateral = PI * slant;
                let base = PI;
                let phi = rng.gen_range(0.0..TAU);
                let rho = rng.gen::<f64>().sqrt();
                if rng.gen::<f64>() * (lateral + base) < lateral {
                    [rho * phi.cos(), cone_h * (1.0 - rho), rho * phi.sin()]
                } else {
                    [rho * phi.cos(), 0.0, rho * phi.sin()]
                }
            }
        }
    };

    let mut out = Vec::with_capacity(n);
    if kind.centrally_symmetric() {
        while out.len() + 1 < n {
            let p = one(rng);
            out.push(p);
            out.push([-p[0], -p[1], -p[2]]);
        }
    }
    while out.len() < n {
        out.push(one(rng));
    }
    out
}

/// Deterministic, normalized surface sample of the named primitive.
pub fn generate_shape<T: Scalar>(spec: &ShapeSpec) -> Result<PointCloud<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pts = sample_surface(spec.kind, spec.n_points, &mut rng);
    if spec.jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.jitter_sigma).expect("finite sigma");
        for p in &mut pts {
            for c in p.iter_mut() {
                *c += noise.sample(&mut rng);
            }
        }
    }
    let cloud = PointCloud::new(pts, None)?.normalize_to_unit_sphere()?;
    Ok(cloud.cast())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::norm;

    fn spec(kind: ShapeKind, jitter: f64) -> ShapeSpec {
        ShapeSpec {
            kind,
            n_points: 256,
            jitter_sigma: jitter,
            seed: 7,
        }
    }

    #[test]
    fn sphere_without_jitter_lies_on_unit_sphere() {
        let c = generate_shape::<f64>(&spec(ShapeKind::Sphere, 0.0)).unwrap();
        for p in c.points() {
            assert!((norm(*p) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in ShapeKind::ALL {
            let a = generate_shape::<f32>(&spec(kind, 0.01)).unwrap();
            let b = generate_shape::<f32>(&spec(kind, 0.01)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cube_samples_lie_on_faces() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in sample_surface(ShapeKind::Cube, 300, &mut rng) {
            assert!(p.iter().any(|c| (c.abs() - 1.0).abs() < 1e-6), "{p:?}");
            assert!(p.iter().all(|c| c.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn every_kind_is_normalized() {
        for kind in ShapeKind::ALL {
            let c = generate_shape::<f64>(&spec(kind, 0.02)).unwrap();
            let r = c.points().iter().map(|p| norm(*p)).fold(0.0, f64::max);
            assert!((r - 1.0).abs() < 1e-6, "{kind}");
            assert!(norm(c.centroid()) < 1e-6, "{kind}");
        }
    }

    #[test]
    fn small_specs_are_rejected() {
        let mut s = spec(ShapeKind::Cone, 0.0);
        s.n_points = 7;
        assert!(generate_shape::<f64>(&s).is_err());
    }

    #[test]
    fn class_names_round_trip() {
        for kind in ShapeKind::ALL {
            assert_eq!(kind.name().parse::<ShapeKind>().unwrap(), kind);
        }
        assert!("pyramid".parse::<ShapeKind>().is_err());
    }
}
