//! End-to-end classifier: tokenizer, positional encoding, frozen backbone
//! with adapters, and a linear head. Also the run configuration that ties
//! the component configs together.

use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterConfig, AdapterPlan};
use crate::autodiff::{Activation, Tape, Var};
use crate::backbone::{self, AdapterHook, AdapterPosition, BackboneBundle, BackboneConfig, BackboneOutput};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::pointcloud::{AugmentConfig, Point, PointCloud};
use crate::projection::{self, make_view_basis, PeTable, ProjectedPositions, ProjectionConfig, ProjectionMode};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenizer::{self, tokenize_on_tape, TokenizerConfig, TokenizerPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    /// Averaged source-model embeddings at the virtual projections.
    VirtualProjection,
    /// Fixed per-axis sinusoids of the 3D coordinates.
    Sinusoidal3d,
    /// Trainable MLP from 3D coordinates.
    Learnable3d,
    None,
}

impl PeMode {
    pub const ALL: [PeMode; 4] = [PeMode::None, PeMode::Sinusoidal3d, PeMode::Learnable3d, PeMode::VirtualProjection];

    pub fn name(self) -> &'static str {
        match self {
            PeMode::VirtualProjection => "virtual_projection",
            PeMode::Sinusoidal3d => "sinusoidal_3d",
            PeMode::Learnable3d => "learnable_3d",
            PeMode::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Cls,
    MeanPool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    Cosine,
    Constant,
}

fn default_threads() -> usize {
    1
}

fn default_eval_every() -> usize {
    1
}

/// Everything needed to build, train and evaluate one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub scheduler: Scheduler,
    pub insertion_depth: usize,
    #[serde(default)]
    pub adapter_position: AdapterPosition,
    pub pe_mode: PeMode,
    /// Overrides `projection.m_views`.
    pub m_views: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// 1 runs single-threaded; 0 uses every core.
    #[serde(default = "default_threads")]
    pub threads: usize,
    /// Test accuracy is measured every `eval_every` epochs and at the end.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Trains the head alone on features of a frozen, randomly initialized
    /// tokenizer with no adapters.
    #[serde(default)]
    pub head_only: bool,
    #[serde(default)]
    pub readout: Readout,
    pub n_classes: usize,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub backbone_seed: u64,
    #[serde(default)]
    pub backbone_checkpoint: Option<PathBuf>,
    pub tokenizer: TokenizerConfig,
    pub projection: ProjectionConfig,
    pub adapter: AdapterConfig,
}

impl TrainConfig {
    /// Small configuration that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        let backbone = BackboneConfig::desk();
        let projection = ProjectionConfig::vision();
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            scheduler: Scheduler::Cosine,
            insertion_depth: backbone.n_blocks,
            adapter_position: AdapterPosition::After,
            pe_mode: PeMode::VirtualProjection,
            m_views: projection.m_views,
            augment: AugmentConfig::default(),
            threads: 1,
            eval_every: 1,
            head_only: false,
            readout: Readout::Cls,
            n_classes: 5,
            tokenizer: TokenizerConfig::desk(backbone.dim),
            adapter: AdapterConfig::for_mode(projection.mode, 16),
            backbone,
            backbone_seed: 0,
            backbone_checkpoint: None,
            projection,
        }
    }

    /// Two blocks, width 16, 12 tokens and two 2D views.
    pub fn toy() -> Self {
        let backbone = BackboneConfig::toy();
        let projection = ProjectionConfig {
            m_views: 2,
            ..ProjectionConfig::vision()
        };
        Self {
            epochs: 5,
            batch_size: 8,
            insertion_depth: backbone.n_blocks,
            m_views: projection.m_views,
            tokenizer: TokenizerConfig::toy(backbone.dim),
            adapter: AdapterConfig::for_mode(projection.mode, 4),
            backbone,
            projection,
            ..Self::desk()
        }
    }

    /// Full-size layout: 12 blocks at width 768 behind a language-model
    /// positional table, 15 classes.
    pub fn reference() -> Self {
        let backbone = BackboneConfig::reference();
        let projection = ProjectionConfig::language();
        Self {
            lr: 5e-4,
            epochs: 300,
            insertion_depth: backbone.n_blocks,
            n_classes: 15,
            tokenizer: TokenizerConfig::reference(backbone.dim),
            adapter: AdapterConfig::for_mode(projection.mode, 24),
            m_views: projection.m_views,
            backbone,
            projection,
            ..Self::desk()
        }
    }

    /// The same run on the other source modality: the language preset for
    /// lines, the vision preset for planes, and that mode's default voxel
    /// grid. Other adapter settings are kept.
    pub fn with_mode(&self, mode: ProjectionMode) -> Self {
        let projection = match mode {
            ProjectionMode::Line1d => ProjectionConfig::language(),
            ProjectionMode::Plane2d => ProjectionConfig::vision(),
        };
        let grid = AdapterConfig::for_mode(mode, self.adapter.bottleneck_dim).grid_size_3d;
        Self {
            projection,
            adapter: AdapterConfig {
                grid_size_3d: grid,
                ..self.adapter.clone()
            },
            ..self.clone()
        }
    }

    /// Projection geometry with the top-level view count applied.
    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            m_views: self.m_views,
            ..self.projection.clone()
        }
    }

    /// Adapter depth actually used.
    pub fn adapter_depth(&self) -> usize {
        if self.head_only {
            0
        } else {
            self.insertion_depth
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0) {
            return bad("lr must be > 0".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_every < 1 {
            return bad("eval_every must be >= 1".into());
        }
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2".into());
        }
        self.backbone.validate()?;
        self.tokenizer.validate()?;
        if self.tokenizer.stages == 0 {
            return bad("the tokenizer needs at least one stage".into());
        }
        if self.tokenizer.out_dim() != self.backbone.dim {
            return bad(format!(
                "tokenizer output width {} must equal backbone dim {}",
                self.tokenizer.out_dim(),
                self.backbone.dim
            ));
        }
        self.projection().validate()?;
        self.adapter.validate()?;
        if self.insertion_depth > self.backbone.n_blocks {
            return bad(format!(
                "insertion_depth {} exceeds {} blocks",
                self.insertion_depth, self.backbone.n_blocks
            ));
        }
        self.augment.validate()?;
        Ok(())
    }
}

pub fn head_weight_name() -> &'static str {
    "head.weight"
}

pub fn head_bias_name() -> &'static str {
    "head.bias"
}

const PE3D: [&str; 4] = ["pe3d.fc1.weight", "pe3d.fc1.bias", "pe3d.fc2.weight", "pe3d.fc2.bias"];

/// Trainable scalars in each group, in registry order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableBreakdown {
    pub tokenizer: usize,
    pub pe: usize,
    pub adapters: usize,
    pub head: usize,
}

impl TrainableBreakdown {
    pub fn total(&self) -> usize {
        self.tokenizer + self.pe + self.adapters + self.head
    }
}

pub fn trainable_breakdown(cfg: &TrainConfig) -> TrainableBreakdown {
    let d = cfg.backbone.dim;
    TrainableBreakdown {
        tokenizer: if cfg.head_only { 0 } else { tokenizer::tokenizer_param_count(&cfg.tokenizer) },
        pe: if cfg.pe_mode == PeMode::Learnable3d && !cfg.head_only {
            3 * d + d + d * d + d
        } else {
            0
        },
        adapters: cfg.adapter_depth() * cfg.adapter.param_count(d),
        head: d * cfg.n_classes + cfg.n_classes,
    }
}

/// Trainable and frozen parameters of one run. Head-only runs keep their
/// random tokenizer in `frozen_tokenizer`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainables<T> {
    pub params: ParamSet<T>,
    pub frozen_tokenizer: Option<ParamSet<T>>,
}

impl<T: Scalar> Trainables<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.backbone.dim;
        let tok = tokenizer::init_tokenizer(&cfg.tokenizer, rng)?;
        let mut params = ParamSet::new();
        let frozen_tokenizer = if cfg.head_only {
            Some(tok)
        } else {
            params.extend(tok);
            None
        };
        if cfg.pe_mode == PeMode::Learnable3d && !cfg.head_only {
            params.insert(PE3D[0], Matrix::uniform(3, d, 1.0, rng));
            params.insert(PE3D[1], Matrix::zeros(1, d));
            params.insert(PE3D[2], Matrix::uniform(d, d, (3.0 / d as f64).sqrt(), rng));
            params.insert(PE3D[3], Matrix::zeros(1, d));
        }
        params.extend(adapter::init_adapters(&cfg.adapter, d, cfg.adapter_depth(), rng)?);
        params.insert(head_weight_name(), Matrix::uniform(d, cfg.n_classes, 1.0 / (d as f64).sqrt(), rng));
        params.insert(head_bias_name(), Matrix::zeros(1, cfg.n_classes));
        Ok(Self {
            params,
            frozen_tokenizer,
        })
    }

    pub fn count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Scalar>(&self) -> Trainables<U> {
        Trainables {
            params: self.params.cast(),
            frozen_tokenizer: self.frozen_tokenizer.as_ref().map(ParamSet::cast),
        }
    }
}

/// Per-axis sinusoids of the coordinates: `dim / 6` frequencies per axis,
/// zero-padded to `dim`.
pub fn sinusoidal_3d<T: Scalar>(coords: &[Point<T>], dim: usize) -> Matrix<T> {
    let f = dim / 6;
    let mut out = Matrix::zeros(coords.len(), dim);
    for (i, p) in coords.iter().enumerate() {
        let row = out.row_mut(i);
        for (axis, &c) in p.iter().enumerate() {
            let s = (c.as_f64() + 1.0) * 50.0;
            for k in 0..f {
                let w = 10000f64.powf(-(k as f64) / f as f64);
                let base = axis * 2 * f + 2 * k;
                row[base] = T::of((s * w).sin());
                row[base + 1] = T::of((s * w).cos());
            }
        }
    }
    out
}

/// Coordinate-dependent state of one sample: sampling/grouping indices,
/// projections and the additive positional term when it is fixed.
#[derive(Clone, Debug)]
pub struct SamplePlan<T> {
    pub tokenizer: TokenizerPlan<T>,
    pub positions: ProjectedPositions<T>,
    pub adapter: AdapterPlan,
    pub fixed_pe: Option<Matrix<T>>,
}

impl<T: Scalar> SamplePlan<T> {
    pub fn token_coords(&self) -> &[Point<T>] {
        self.tokenizer.token_coords()
    }
}

/// The frozen side of a run.
pub struct Model<T> {
    pub cfg: TrainConfig,
    pub projection: ProjectionConfig,
    pub backbone: Arc<BackboneBundle<T>>,
    basis: projection::ViewBasis<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &TrainConfig, backbone: Arc<BackboneBundle<T>>) -> Result<Self> {
        cfg.validate()?;
        let projection = cfg.projection();
        if backbone.config.dim != cfg.backbone.dim {
            return Err(Error::ConfigMismatch(format!(
                "backbone dim {} vs configured {}",
                backbone.config.dim, cfg.backbone.dim
            )));
        }
        if backbone.config.n_blocks < cfg.insertion_depth {
            return Err(Error::ConfigMismatch("backbone has fewer blocks than insertion_depth".into()));
        }
        if backbone.pe_table.layout() != projection.pe_layout() {
            return Err(Error::ModeMismatch(format!(
                "backbone PE table {:?} does not match projection geometry {:?}",
                backbone.pe_table.layout(),
                projection.pe_layout()
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            basis: make_view_basis(&projection),
            projection,
            backbone,
        })
    }

    pub fn pe_table(&self) -> &PeTable<T> {
        &self.backbone.pe_table
    }

    pub fn plan(&self, cloud: &PointCloud<T>) -> Result<SamplePlan<T>> {
        let tok = TokenizerPlan::build(cloud, &self.cfg.tokenizer)?;
        let coords = tok.token_coords().to_vec();
        let positions = ProjectedPositions::compute(&coords, &self.basis, &self.projection)?;
        let adapter = AdapterPlan::build(&coords, &positions, &self.projection, &self.cfg.adapter);
        let fixed_pe = match self.cfg.pe_mode {
            PeMode::VirtualProjection => Some(projection::average_pe(&positions, self.pe_table())?),
            PeMode::Sinusoidal3d => Some(sinusoidal_3d(&coords, self.cfg.backbone.dim)),
            PeMode::Learnable3d | PeMode::None => None,
        };
        Ok(SamplePlan {
            tokenizer: tok,
            positions,
            adapter,
            fixed_pe,
        })
    }

    /// Token features entering the backbone (`N × D`).
    pub fn tokens_on_tape(&self, tape: &mut Tape<T>, plan: &SamplePlan<T>, params: &Bound<T>, frozen_tok: Option<&Bound<T>>) -> Var {
        let tok_params = frozen_tok.unwrap_or(params);
        let mut x = tokenize_on_tape(tape, &plan.tokenizer, &self.cfg.tokenizer, tok_params);
        if let Some(pe) = &plan.fixed_pe {
            let pe = tape.constant(pe.clone());
            x = tape.add(x, pe);
        }
        if self.cfg.pe_mode == PeMode::Learnable3d {
            if let Some(w1) = params.try_var(PE3D[0]) {
                let coords = plan.token_coords();
                let mut c = Matrix::zeros(coords.len(), 3);
                for (i, p) in coords.iter().enumerate() {
                    c.row_mut(i).copy_from_slice(p);
                }
                let c = tape.constant(c);
                let h = tape.matmul(c, w1);
                let h = tape.add_row(h, params.var(PE3D[1]));
                let h = tape.activation(h, Activation::Gelu);
                let h = tape.matmul(h, params.var(PE3D[2]));
                let pe = tape.add_row(h, params.var(PE3D[3]));
                x = tape.add(x, pe);
            }
        }
        x
    }

    /// Backbone output for prepared tokens, adapters included.
    pub fn backbone_on_tape(&self, tape: &mut Tape<T>, plan: &SamplePlan<T>, tokens: Var, params: &Bound<T>) -> Result<BackboneOutput> {
        let depth = self.cfg.adapter_depth();
        if depth == 0 {
            return backbone::forward_on_tape(tape, &self.backbone, tokens, None);
        }
        let acfg = &self.cfg.adapter;
        let mut apply = |t: &mut Tape<T>, block: usize, x: Var| -> Result<Var> {
            Ok(adapter::adapter_on_tape(t, x, block, &plan.adapter, acfg, params, None))
        };
        let hook = AdapterHook {
            position: self.cfg.adapter_position,
            depth,
            apply: &mut apply,
        };
        backbone::forward_on_tape(tape, &self.backbone, tokens, Some(hook))
    }

    /// Pooled `1 × D` feature fed to the head.
    pub fn readout_on_tape(&self, tape: &mut Tape<T>, out: &BackboneOutput) -> Var {
        match self.cfg.readout {
            Readout::Cls => out.cls,
            Readout::MeanPool => {
                let n = tape.value(out.tokens).rows();
                tape.segment_mean(out.tokens, Arc::new(vec![0; n]), 1)
            }
        }
    }

    pub fn head_on_tape(&self, tape: &mut Tape<T>, feature: Var, params: &Bound<T>) -> Var {
        let z = tape.matmul(feature, params.var(head_weight_name()));
        tape.add_row(z, params.var(head_bias_name()))
    }

    /// Full forward pass; returns `(logits 1×C, backbone output)`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        plan: &SamplePlan<T>,
        params: &Bound<T>,
        frozen_tok: Option<&Bound<T>>,
    ) -> Result<(Var, BackboneOutput)> {
        let x = self.tokens_on_tape(tape, plan, params, frozen_tok);
        let out = self.backbone_on_tape(tape, plan, x, params)?;
        let f = self.readout_on_tape(tape, &out);
        Ok((self.head_on_tape(tape, f, params), out))
    }

    /// Class logits of one cloud.
    pub fn logits(&self, cloud: &PointCloud<T>, trainables: &Trainables<T>) -> Result<Vec<T>> {
        let plan = self.plan(cloud)?;
        let mut tape = Tape::new();
        let bound = trainables.params.bind(&mut tape, false);
        let frozen = trainables.frozen_tokenizer.as_ref().map(|p| p.bind(&mut tape, false));
        let (logits, _) = self.forward_on_tape(&mut tape, &plan, &bound, frozen.as_ref())?;
        let v = tape.value(logits);
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(v.data().to_vec())
    }

    /// Cross-entropy of one labelled cloud and the gradient of every
    /// trainable tensor, in registry order.
    pub fn loss_and_grad(&self, plan: &SamplePlan<T>, label: usize, trainables: &Trainables<T>) -> Result<(T, Vec<Matrix<T>>)> {
        let mut tape = Tape::new();
        let bound = trainables.params.bind(&mut tape, true);
        let frozen = trainables.frozen_tokenizer.as_ref().map(|p| p.bind(&mut tape, false));
        let (logits, _) = self.forward_on_tape(&mut tape, plan, &bound, frozen.as_ref())?;
        let loss = tape.softmax_cross_entropy(logits, &[label]);
        let value = tape.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let mut grads = tape.backward(loss)?;
        let out = bound
            .vars()
            .iter()
            .zip(trainables.params.values())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect();
        Ok((value, out))
    }

    /// Readout feature of one cloud with the current parameters.
    pub fn feature(&self, cloud: &PointCloud<T>, trainables: &Trainables<T>) -> Result<Vec<T>> {
        let plan = self.plan(cloud)?;
        let mut tape = Tape::new();
        let bound = trainables.params.bind(&mut tape, false);
        let frozen = trainables.frozen_tokenizer.as_ref().map(|p| p.bind(&mut tape, false));
        let x = self.tokens_on_tape(&mut tape, &plan, &bound, frozen.as_ref());
        let out = self.backbone_on_tape(&mut tape, &plan, x, &bound)?;
        let f = self.readout_on_tape(&mut tape, &out);
        Ok(tape.value(f).data().to_vec())
    }
}

/// Builds (or loads) the frozen backbone a configuration asks for.
pub fn build_backbone<T: Scalar>(cfg: &TrainConfig) -> Result<BackboneBundle<T>> {
    match &cfg.backbone_checkpoint {
        Some(path) => {
            let b = backbone::load_checkpoint(path)?;
            if b.config.dim != cfg.backbone.dim || b.config.n_blocks != cfg.backbone.n_blocks {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint holds {} blocks of width {}, config asks for {} of width {}",
                    b.config.n_blocks, b.config.dim, cfg.backbone.n_blocks, cfg.backbone.dim
                )));
            }
            Ok(b)
        }
        None => backbone::init_random_backbone(&cfg.backbone, cfg.projection().pe_layout(), cfg.backbone_seed),
    }
}

/// Short name of a projection mode.
pub fn mode_name(mode: ProjectionMode) -> &'static str {
    match mode {
        ProjectionMode::Line1d => "1d",
        ProjectionMode::Plane2d => "2d",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterVariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn configs() -> Vec<TrainConfig> {
        let desk = TrainConfig::desk();
        let mut mlp = TrainConfig::toy();
        mlp.adapter.variant = AdapterVariant::MlpBaseline;
        vec![
            desk.clone(),
            TrainConfig::toy(),
            TrainConfig {
                head_only: true,
                ..desk.clone()
            },
            TrainConfig {
                pe_mode: PeMode::Learnable3d,
                ..TrainConfig::toy()
            },
            desk.with_mode(ProjectionMode::Line1d),
            mlp,
        ]
    }

    #[test]
    fn breakdown_matches_instantiated_tensors() {
        for cfg in configs() {
            let t = Trainables::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(trainable_breakdown(&cfg).total(), t.count(), "{cfg:?}");
        }
    }

    #[test]
    fn head_only_trains_exactly_the_head() {
        let cfg = TrainConfig {
            head_only: true,
            ..TrainConfig::desk()
        };
        let t = Trainables::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.count(), 64 * 5 + 5);
        assert_eq!(t.params.names(), [head_weight_name(), head_bias_name()]);
        assert!(t.frozen_tokenizer.is_some());
    }

    #[test]
    fn mismatched_backbone_layout_is_rejected() {
        let cfg = TrainConfig::toy();
        let other = cfg.with_mode(ProjectionMode::Line1d);
        let bb = Arc::new(build_backbone::<f32>(&other).unwrap());
        assert!(matches!(Model::new(&cfg, bb), Err(Error::ModeMismatch(_))));
    }

    #[test]
    fn invalid_run_configs_are_rejected() {
        let ok = TrainConfig::toy();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { n_classes: 1, ..ok.clone() },
            TrainConfig { insertion_depth: 3, ..ok.clone() },
            TrainConfig { m_views: 0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))), "{bad:?}");
        }
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = TrainConfig::reference();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn sinusoidal_3d_is_bounded_and_padded() {
        let pe = sinusoidal_3d(&[[0.1f64, -0.5, 0.9], [-1.0, 1.0, 0.0]], 16);
        assert_eq!(pe.shape(), (2, 16));
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        // 16 / 6 = 2 frequencies per axis fill 12 columns
        assert!(pe.row(0)[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logits_have_one_entry_per_class() {
        let cfg = TrainConfig::toy();
        let bb = Arc::new(build_backbone::<f64>(&cfg).unwrap());
        let model = Model::new(&cfg, bb).unwrap();
        let t = Trainables::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cloud = crate::dataset::BenchmarkSpec::toy(0).generate::<f64>().unwrap().train.remove(0);
        let l = model.logits(&cloud, &t).unwrap();
        assert_eq!(l.len(), 5);
        assert!(l.iter().all(|v| v.is_finite()));
    }
}
