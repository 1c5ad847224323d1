//! Procedural classification benchmark: labelled clouds of primitive shapes
//! with a fixed train/test split, in memory or as A2PC files plus a JSON
//! index.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::pointcloud::PointCloud;
use crate::scalar::Scalar;
use crate::shapes::{generate_shape, ShapeKind, ShapeSpec};

pub const INDEX_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    /// Class `i` is `classes[i]`.
    pub classes: Vec<ShapeKind>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub n_points: usize,
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl BenchmarkSpec {
    /// Five classes, 100 train and 50 test clouds each, 512 points.
    pub fn desk(seed: u64) -> Self {
        Self {
            classes: ShapeKind::ALL.to_vec(),
            train_per_class: 100,
            test_per_class: 50,
            n_points: 512,
            jitter_sigma: 0.01,
            seed,
        }
    }

    /// Five classes of 48-point clouds, 8 train and 4 test each.
    pub fn toy(seed: u64) -> Self {
        Self {
            train_per_class: 8,
            test_per_class: 4,
            n_points: 48,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidConfig("a benchmark needs at least two classes".into()));
        }
        if self.classes.len() > u16::MAX as usize {
            return Err(Error::InvalidConfig("too many classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return Err(Error::InvalidConfig(format!("class `{c}` listed twice")));
            }
        }
        if self.train_per_class == 0 {
            return Err(Error::InvalidConfig("train_per_class must be >= 1".into()));
        }
        ShapeSpec {
            kind: self.classes[0],
            n_points: self.n_points,
            jitter_sigma: self.jitter_sigma,
            seed: 0,
        }
        .validate()
    }

    /// Every instance with its split, label and generator seed. Seeds come
    /// from one stream per (class, split), so growing a split never changes
    /// the instances already in it.
    pub fn instances(&self) -> Vec<Instance> {
        let mut out = Vec::new();
        for (split, per_class) in [(Split::Train, self.train_per_class), (Split::Test, self.test_per_class)] {
            for (label, &kind) in self.classes.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(2 * kind as u64 + split as u64);
                for idx in 0..per_class {
                    out.push(Instance {
                        split,
                        kind,
                        label: label as u16,
                        index: idx,
                        seed: rng.gen(),
                    });
                }
            }
        }
        out
    }

    pub fn generate<T: Scalar>(&self) -> Result<Dataset<T>> {
        self.validate()?;
        let mut ds = Dataset {
            train: Vec::new(),
            test: Vec::new(),
        };
        for inst in self.instances() {
            let cloud = generate_shape::<T>(&self.shape_spec(&inst))?.with_label(Some(inst.label));
            match inst.split {
                Split::Train => ds.train.push(cloud),
                Split::Test => ds.test.push(cloud),
            }
        }
        Ok(ds)
    }

    fn shape_spec(&self, inst: &Instance) -> ShapeSpec {
        ShapeSpec {
            kind: inst.kind,
            n_points: self.n_points,
            jitter_sigma: self.jitter_sigma,
            seed: inst.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Test = 1,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub split: Split,
    pub kind: ShapeKind,
    pub label: u16,
    pub index: usize,
    pub seed: u64,
}

/// Labelled clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub train: Vec<PointCloud<T>>,
    pub test: Vec<PointCloud<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub class: ShapeKind,
    pub label: u16,
    pub seed: u64,
}

/// The JSON index written next to the cloud files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub spec: BenchmarkSpec,
    pub train: Vec<IndexEntry>,
    pub test: Vec<IndexEntry>,
}

/// Writes one A2PC file per cloud under `dir/<class>/` and the index.
pub fn write_benchmark(spec: &BenchmarkSpec, dir: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    let mut index = DatasetIndex {
        spec: spec.clone(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for kind in &spec.classes {
        let d = dir.join(kind.name());
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for inst in spec.instances() {
        let split = match inst.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let file = format!("{}/{split}_{:04}.a2pc", inst.kind.name(), inst.index);
        let cloud = generate_shape::<f32>(&spec.shape_spec(&inst))?.with_label(Some(inst.label));
        io::write_cloud(&dir.join(&file), &cloud)?;
        let entry = IndexEntry {
            file,
            class: inst.kind,
            label: inst.label,
            seed: inst.seed,
        };
        match inst.split {
            Split::Train => index.train.push(entry),
            Split::Test => index.test.push(entry),
        }
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Loads a directory written by [`write_benchmark`]. `path` may name the
/// directory or its index file.
pub fn read_benchmark<T: Scalar>(path: &Path) -> Result<(DatasetIndex, Dataset<T>)> {
    let (dir, index_path): (PathBuf, PathBuf) = if path.is_dir() {
        (path.to_path_buf(), path.join(INDEX_FILE))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: index_path.clone(),
        detail: e.to_string(),
    })?;
    let load = |entries: &[IndexEntry]| -> Result<Vec<PointCloud<T>>> {
        entries
            .iter()
            .map(|e| {
                let c = io::read_cloud::<T>(&dir.join(&e.file))?;
                Ok(c.with_label(Some(e.label)))
            })
            .collect()
    };
    let ds = Dataset {
        train: load(&index.train)?,
        test: load(&index.test)?,
    };
    Ok((index, ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkSpec {
        BenchmarkSpec {
            train_per_class: 3,
            test_per_class: 2,
            n_points: 64,
            ..BenchmarkSpec::desk(4)
        }
    }

    #[test]
    fn split_sizes_and_labels() {
        let ds = small().generate::<f32>().unwrap();
        assert_eq!(ds.train.len(), 15);
        assert_eq!(ds.test.len(), 10);
        for (i, c) in ds.train.iter().enumerate() {
            assert_eq!(c.label(), Some((i / 3) as u16));
            assert_eq!(c.len(), 64);
        }
    }

    #[test]
    fn growing_a_split_keeps_existing_instances() {
        let a = small().instances();
        let big = BenchmarkSpec {
            train_per_class: 5,
            ..small()
        }
        .instances();
        for inst in &a {
            assert!(big.contains(inst), "{inst:?}");
        }
    }

    #[test]
    fn train_and_test_never_share_seeds() {
        let inst = BenchmarkSpec::desk(0).instances();
        let mut seeds: Vec<u64> = inst.iter().map(|i| i.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), inst.len());
    }

    #[test]
    fn disk_round_trip_is_byte_stable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let idx = write_benchmark(&small(), a.path()).unwrap();
        write_benchmark(&small(), b.path()).unwrap();
        for e in idx.train.iter().chain(&idx.test) {
            assert_eq!(fs::read(a.path().join(&e.file)).unwrap(), fs::read(b.path().join(&e.file)).unwrap());
        }
        assert_eq!(
            fs::read(a.path().join(INDEX_FILE)).unwrap(),
            fs::read(b.path().join(INDEX_FILE)).unwrap()
        );
        let (back_idx, ds) = read_benchmark::<f32>(a.path()).unwrap();
        assert_eq!(back_idx, idx);
        assert_eq!(ds, small().generate::<f32>().unwrap());
    }

    #[test]
    fn duplicate_classes_are_rejected() {
        let mut s = small();
        s.classes = vec![ShapeKind::Cube, ShapeKind::Cube];
        assert!(s.generate::<f32>().is_err());
    }
}
