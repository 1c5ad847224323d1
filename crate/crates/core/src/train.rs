//! Training loop, evaluation, parameter accounting and trainable checkpoints.
//!
//! Each sample gets its own augmentation stream keyed by (seed, epoch,
//! index), and per-sample gradients are summed in batch order, so a run is
//! reproducible bit for bit whether or not the batch is computed in parallel.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::BackboneBundle;
use crate::checkpoint::{self, Manifest, StoredTensor};
use crate::error::{Error, Result};
use crate::model::{head_bias_name, head_weight_name, Model, Scheduler, TrainConfig, Trainables};
use crate::optim::{cosine_lr, AdamW};
use crate::params::ParamSet;
use crate::pointcloud::{augment, PointCloud};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch.
    pub loss: f64,
    /// Test accuracy, when measured this epoch.
    pub acc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
    pub ratio: f64,
}

impl ParamReport {
    pub fn new(trainable: usize, frozen: usize) -> Self {
        let total = trainable + frozen;
        Self {
            trainable,
            frozen,
            total,
            ratio: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
        }
    }

    /// `trainable=<n> total=<m> ratio=<r>`.
    pub fn line(&self) -> String {
        format!("trainable={} total={} ratio={:.6}", self.trainable, self.total, self.ratio)
    }
}

/// Counts from instantiated tensors. A head-only run's random tokenizer
/// counts as frozen.
pub fn param_report<T: Scalar>(trainables: &Trainables<T>, backbone: &BackboneBundle<T>) -> ParamReport {
    let frozen_tok = trainables.frozen_tokenizer.as_ref().map_or(0, ParamSet::count);
    ParamReport::new(trainables.count(), backbone.param_count() + frozen_tok)
}

/// The same counts from a configuration alone, without allocating tensors.
pub fn param_report_for(cfg: &TrainConfig) -> ParamReport {
    let trainable = crate::model::trainable_breakdown(cfg).total();
    let frozen_tok = if cfg.head_only {
        crate::tokenizer::tokenizer_param_count(&cfg.tokenizer)
    } else {
        0
    };
    let backbone = cfg.backbone.param_count(cfg.projection().pe_layout());
    ParamReport::new(trainable, backbone + frozen_tok)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epochs: Vec<EpochRecord>,
    pub params: ParamReport,
    pub backbone_hash: String,
    /// Not part of the CSV, so reruns stay byte-identical.
    pub wall_clock_secs: f64,
}

impl Metrics {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.acc)
    }

    /// CSV with columns `epoch,loss,acc,lr`; `acc` is empty when skipped.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "loss", "acc", "lr"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.9}", e.loss),
                e.acc.map_or(String::new(), |a| format!("{a:.6}")),
                format!("{:.9e}", e.lr),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numeric(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainRun<T> {
    pub trainables: Trainables<T>,
    pub metrics: Metrics,
}

fn label_of<T: Scalar>(cloud: &PointCloud<T>, n_classes: usize) -> Result<usize> {
    match cloud.label() {
        Some(l) if (l as usize) < n_classes => Ok(l as usize),
        Some(l) => Err(Error::ConfigMismatch(format!("label {l} outside {n_classes} classes"))),
        None => Err(Error::ConfigMismatch("training cloud has no label".into())),
    }
}

/// Augmentation stream of one sample in one epoch.
fn sample_rng(cfg: &TrainConfig, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&cfg.seed.to_le_bytes());
    seed[8..16].copy_from_slice(&cfg.augment.seed.to_le_bytes());
    seed[16..24].copy_from_slice(&(epoch as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(index as u64);
    rng
}

fn epoch_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.scheduler {
        Scheduler::Cosine => cosine_lr(epoch, cfg.epochs, cfg.lr),
        Scheduler::Constant => cfg.lr,
    }
}

fn thread_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads == 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::InvalidConfig(format!("cannot start {threads} threads: {e}")))
}

/// Runs `f` over `items` in order, on `pool` when present; results keep the
/// input order.
fn map_ordered<I: Sync, R: Send>(pool: Option<&rayon::ThreadPool>, items: &[I], f: impl Fn(&I) -> R + Sync + Send) -> Vec<R> {
    match pool {
        Some(p) => p.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}

/// Mean loss and mean gradient of the labelled clouds with the given
/// augmentation streams (`None` trains on the clouds as given).
pub fn batch_loss_and_grad<T: Scalar>(
    model: &Model<T>,
    trainables: &Trainables<T>,
    batch: &[(&PointCloud<T>, Option<ChaCha8Rng>)],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, Vec<Matrix<T>>)> {
    let cfg = &model.cfg;
    let results = map_ordered(pool, batch, |(cloud, rng)| -> Result<(T, Vec<Matrix<T>>)> {
        let label = label_of(cloud, cfg.n_classes)?;
        let plan = match rng {
            Some(r) => model.plan(&augment(cloud, &cfg.augment, &mut r.clone()))?,
            None => model.plan(cloud)?,
        };
        model.loss_and_grad(&plan, label, trainables)
    });
    let mut loss = 0.0;
    let mut sum = trainables.params.zeros_like();
    for r in results {
        let (l, g) = r?;
        loss += l.as_f64();
        for (acc, g) in sum.values_mut().iter_mut().zip(&g) {
            acc.add_assign(g);
        }
    }
    let inv = T::of(1.0 / batch.len() as f64);
    let mut grads = sum.values().to_vec();
    for g in &mut grads {
        g.scale_in_place(inv);
    }
    Ok((loss / batch.len() as f64, grads))
}

/// Trains a fresh set of trainables against the frozen `backbone`.
pub fn train<T: Scalar>(
    train_set: &[PointCloud<T>],
    test_set: &[PointCloud<T>],
    backbone: Arc<BackboneBundle<T>>,
    cfg: &TrainConfig,
) -> Result<TrainRun<T>> {
    train_with_progress(train_set, test_set, backbone, cfg, &mut |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress<T: Scalar>(
    train_set: &[PointCloud<T>],
    test_set: &[PointCloud<T>],
    backbone: Arc<BackboneBundle<T>>,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainRun<T>> {
    let start = Instant::now();
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let model = Model::new(cfg, backbone)?;
    let hash = model.backbone.hash();
    let pool = thread_pool(cfg.threads)?;
    let mut trainables = Trainables::init(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut opt = AdamW::new(&trainables.params, cfg.weight_decay);
    let head_cache = if cfg.head_only {
        Some((
            FeatureCache::build(&model, &trainables, train_set, pool.as_ref())?,
            FeatureCache::build(&model, &trainables, test_set, pool.as_ref())?,
        ))
    } else {
        None
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = epoch_lr(cfg, epoch);
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = match &head_cache {
                Some((train_feats, _)) => train_feats.head_loss_and_grad(&trainables, chunk)?,
                None => {
                    let batch: Vec<(&PointCloud<T>, Option<ChaCha8Rng>)> =
                        chunk.iter().map(|&i| (&train_set[i], Some(sample_rng(cfg, epoch, i)))).collect();
                    batch_loss_and_grad(&model, &trainables, &batch, pool.as_ref())?
                }
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in epoch {epoch}")));
            }
            loss_sum += loss * chunk.len() as f64;
            opt.step(&mut trainables.params, &grads, lr)?;
        }
        if model.backbone.hash() != hash {
            return Err(Error::FrozenViolation(format!("backbone hash changed in epoch {epoch}")));
        }
        let measure = !test_set.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        let acc = if measure {
            Some(match &head_cache {
                Some((_, test_feats)) => test_feats.accuracy(&trainables)?,
                None => evaluate_with(&model, &trainables, test_set, pool.as_ref())?,
            })
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            acc,
            lr,
        };
        progress(&rec);
        epochs.push(rec);
    }
    let metrics = Metrics {
        epochs,
        params: param_report(&trainables, &model.backbone),
        backbone_hash: hash,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainRun { trainables, metrics })
}

/// Readout features of a fixed set of clouds, for runs where only the head
/// learns.
struct FeatureCache<T> {
    features: Matrix<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> FeatureCache<T> {
    fn build(model: &Model<T>, trainables: &Trainables<T>, clouds: &[PointCloud<T>], pool: Option<&rayon::ThreadPool>) -> Result<Self> {
        let rows = map_ordered(pool, clouds, |c| model.feature(c, trainables));
        let d = model.cfg.backbone.dim;
        let mut data = Vec::with_capacity(clouds.len() * d);
        for r in rows {
            data.extend(r?);
        }
        let labels = clouds.iter().map(|c| label_of(c, model.cfg.n_classes)).collect::<Result<_>>()?;
        Ok(Self {
            features: Matrix::from_vec(clouds.len(), d, data)?,
            labels,
        })
    }

    fn rows(&self, idx: &[usize]) -> Matrix<T> {
        let d = self.features.cols();
        let mut m = Matrix::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            m.row_mut(r).copy_from_slice(self.features.row(i));
        }
        m
    }

    fn head_loss_and_grad(&self, trainables: &Trainables<T>, idx: &[usize]) -> Result<(f64, Vec<Matrix<T>>)> {
        let mut tape = Tape::new();
        let bound = trainables.params.bind(&mut tape, true);
        let x = tape.constant(self.rows(idx));
        let z = tape.matmul(x, bound.var(head_weight_name()));
        let z = tape.add_row(z, bound.var(head_bias_name()));
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        let loss = tape.softmax_cross_entropy(z, &labels);
        let value = tape.value(loss).get(0, 0).as_f64();
        let mut g = tape.backward(loss)?;
        let grads = bound
            .vars()
            .iter()
            .zip(trainables.params.values())
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect();
        Ok((value, grads))
    }

    fn accuracy(&self, trainables: &Trainables<T>) -> Result<f64> {
        let w = trainables.params.get(head_weight_name()).expect("head registered");
        let b = trainables.params.get(head_bias_name()).expect("head registered");
        let logits = self.features.matmul(w);
        let mut correct = 0;
        for (i, &label) in self.labels.iter().enumerate() {
            let row: Vec<T> = logits.row(i).iter().zip(b.data()).map(|(&z, &c)| z + c).collect();
            correct += usize::from(argmax(&row) == label);
        }
        Ok(correct as f64 / self.labels.len().max(1) as f64)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of every cloud: one forward pass, no augmentation.
pub fn predict<T: Scalar>(model: &Model<T>, trainables: &Trainables<T>, clouds: &[PointCloud<T>]) -> Result<Vec<usize>> {
    predict_with(model, trainables, clouds, None)
}

fn predict_with<T: Scalar>(
    model: &Model<T>,
    trainables: &Trainables<T>,
    clouds: &[PointCloud<T>],
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<usize>> {
    map_ordered(pool, clouds, |c| model.logits(c, trainables).map(|l| argmax(&l)))
        .into_iter()
        .collect()
}

/// Fraction of clouds whose predicted class equals their label.
pub fn evaluate<T: Scalar>(model: &Model<T>, trainables: &Trainables<T>, clouds: &[PointCloud<T>]) -> Result<f64> {
    evaluate_with(model, trainables, clouds, thread_pool(model.cfg.threads)?.as_ref())
}

fn evaluate_with<T: Scalar>(
    model: &Model<T>,
    trainables: &Trainables<T>,
    clouds: &[PointCloud<T>],
    pool: Option<&rayon::ThreadPool>,
) -> Result<f64> {
    if clouds.is_empty() {
        return Err(Error::InvalidConfig("evaluation set is empty".into()));
    }
    let pred = predict_with(model, trainables, clouds, pool)?;
    let mut correct = 0;
    for (p, c) in pred.iter().zip(clouds) {
        correct += usize::from(*p == label_of(c, model.cfg.n_classes)?);
    }
    Ok(correct as f64 / clouds.len() as f64)
}

const FROZEN_PREFIX: &str = "frozen.";

/// Saves trainables (and a head-only run's frozen tokenizer, prefixed
/// `frozen.`) with the run configuration in the manifest.
pub fn save_trainables<T: Scalar>(dir: &Path, trainables: &Trainables<T>, cfg: &TrainConfig) -> Result<Manifest> {
    let mut tensors: Vec<StoredTensor> = trainables
        .params
        .iter()
        .map(|(n, m)| StoredTensor::with_shape(n, vec![m.rows(), m.cols()], m))
        .collect();
    if let Some(f) = &trainables.frozen_tokenizer {
        tensors.extend(
            f.iter()
                .map(|(n, m)| StoredTensor::with_shape(&format!("{FROZEN_PREFIX}{n}"), vec![m.rows(), m.cols()], m)),
        );
    }
    checkpoint::write_checkpoint(dir, &Manifest::new("trainables", serde_json::to_value(cfg)?), &tensors)
}

/// Loads trainables saved by [`save_trainables`]; the layout must match
/// what `cfg` would initialize.
pub fn load_trainables<T: Scalar>(dir: &Path, cfg: &TrainConfig) -> Result<Trainables<T>> {
    let (manifest, tensors) = checkpoint::read_checkpoint(dir)?;
    if manifest.kind != "trainables" {
        return Err(Error::ManifestError(format!("expected a trainables checkpoint, found `{}`", manifest.kind)));
    }
    let template = Trainables::<T>::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let fill = |set: &ParamSet<T>, prefix: &str| -> Result<ParamSet<T>> {
        let mut out = ParamSet::new();
        for (name, m) in set.iter() {
            let stored = checkpoint::find(&tensors, &format!("{prefix}{name}"))?;
            out.insert(name, stored.to_matrix(&[m.rows(), m.cols()])?);
        }
        Ok(out)
    };
    let expected = template.params.len() + template.frozen_tokenizer.as_ref().map_or(0, ParamSet::len);
    if tensors.len() != expected {
        return Err(Error::ManifestError(format!(
            "checkpoint holds {} tensors, configuration expects {expected}",
            tensors.len()
        )));
    }
    Ok(Trainables {
        params: fill(&template.params, "")?,
        frozen_tokenizer: template.frozen_tokenizer.as_ref().map(|f| fill(f, FROZEN_PREFIX)).transpose()?,
    })
}

/// Run configuration stored in a trainables checkpoint.
pub fn checkpoint_config(dir: &Path) -> Result<TrainConfig> {
    let manifest = checkpoint::read_manifest(dir)?;
    serde_json::from_value(manifest.config).map_err(|e| Error::ManifestError(format!("config in manifest: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BenchmarkSpec;
    use crate::model::build_backbone;

    #[test]
    fn config_report_matches_tensor_report() {
        for cfg in [
            TrainConfig::toy(),
            TrainConfig::desk(),
            TrainConfig {
                head_only: true,
                ..TrainConfig::toy()
            },
        ] {
            let bb = build_backbone::<f32>(&cfg).unwrap();
            let t = Trainables::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(param_report(&t, &bb), param_report_for(&cfg));
        }
    }

    #[test]
    fn report_line_format() {
        let r = ParamReport::new(1, 3);
        assert_eq!(r.line(), "trainable=1 total=4 ratio=0.250000");
    }

    #[test]
    fn metrics_csv_layout() {
        let m = Metrics {
            epochs: vec![
                EpochRecord {
                    epoch: 0,
                    loss: 1.5,
                    acc: None,
                    lr: 1e-3,
                },
                EpochRecord {
                    epoch: 1,
                    loss: 1.25,
                    acc: Some(0.5),
                    lr: 5e-4,
                },
            ],
            params: ParamReport::new(1, 1),
            backbone_hash: String::new(),
            wall_clock_secs: 3.0,
        };
        assert_eq!(
            m.to_csv().unwrap(),
            "epoch,loss,acc,lr\n0,1.500000000,,1.000000000e-3\n1,1.250000000,0.500000,5.000000000e-4\n"
        );
        assert_eq!(m.final_accuracy(), Some(0.5));
    }

    #[test]
    fn trainables_round_trip_through_a_checkpoint() {
        for cfg in [
            TrainConfig::toy(),
            TrainConfig {
                head_only: true,
                ..TrainConfig::toy()
            },
        ] {
            let t = Trainables::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_trainables(dir.path(), &t, &cfg).unwrap();
            assert_eq!(load_trainables::<f32>(dir.path(), &cfg).unwrap(), t);
            assert_eq!(checkpoint_config(dir.path()).unwrap(), cfg);
        }
    }

    #[test]
    fn loading_under_a_different_layout_fails() {
        let cfg = TrainConfig::toy();
        let t = Trainables::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_trainables(dir.path(), &t, &cfg).unwrap();
        let mut other = cfg.clone();
        other.adapter.bottleneck_dim = 5;
        assert!(matches!(
            load_trainables::<f32>(dir.path(), &other),
            Err(Error::ShapeError { .. })
        ));
    }

    #[test]
    fn unlabelled_or_out_of_range_clouds_are_rejected() {
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::toy() };
        let mut ds = BenchmarkSpec::toy(0).generate::<f32>().unwrap();
        let bb = Arc::new(build_backbone::<f32>(&cfg).unwrap());
        ds.train[0] = ds.train[0].clone().with_label(Some(7));
        assert!(matches!(
            train(&ds.train, &ds.test, Arc::clone(&bb), &cfg),
            Err(Error::ConfigMismatch(_))
        ));
        ds.train[0] = ds.train[0].clone().with_label(None);
        assert!(train(&ds.train, &ds.test, bb, &cfg).is_err());
    }

    #[test]
    fn argmax_prefers_the_first_maximum() {
        assert_eq!(argmax(&[0.0f32, 2.0, 2.0, 1.0]), 1);
    }
}
