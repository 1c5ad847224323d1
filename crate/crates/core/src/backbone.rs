//! The frozen source transformer: pre-norm blocks of multi-head
//! self-attention and a GELU MLP, a classification token, a final norm and
//! the source positional-embedding table.
//!
//! Weights live behind `Arc` and enter every tape as shared constants, so
//! they never receive gradient storage.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Activation, Tape, Var};
use crate::checkpoint::{self, Manifest, StoredTensor};
use crate::error::{Error, Result};
use crate::projection::{PeLayout, PeTable};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityTag {
    Language,
    Vision,
    Audio,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_blocks: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub ffn_ratio: f64,
    pub modality_tag: ModalityTag,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            n_blocks: 4,
            dim: 64,
            n_heads: 4,
            ffn_ratio: 4.0,
            modality_tag: ModalityTag::Synthetic,
        }
    }

    /// Two blocks of width 16; small enough for exhaustive gradient checks.
    pub fn toy() -> Self {
        Self {
            n_blocks: 2,
            dim: 16,
            n_heads: 2,
            ffn_ratio: 2.0,
            modality_tag: ModalityTag::Synthetic,
        }
    }

    pub fn reference() -> Self {
        Self {
            n_blocks: 12,
            dim: 768,
            n_heads: 12,
            ffn_ratio: 4.0,
            modality_tag: ModalityTag::Language,
        }
    }

    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.ffn_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 1 {
            return Err(Error::InvalidConfig("n_blocks must be >= 1".into()));
        }
        if self.n_heads < 1 || self.dim == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {} must be a positive multiple of n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if !(self.ffn_ratio > 0.0) || self.hidden() == 0 {
            return Err(Error::InvalidConfig("ffn_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Frozen scalar count, including the PE table and classification token.
    pub fn param_count(&self, layout: PeLayout) -> usize {
        let (d, f) = (self.dim, self.hidden());
        let block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d);
        self.n_blocks * block + 2 * d + d + layout.entries() * d
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterPosition {
    Before,
    #[default]
    After,
    Parallel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_gamma: Arc<Matrix<T>>,
    pub ln1_beta: Arc<Matrix<T>>,
    pub qkv_w: Arc<Matrix<T>>,
    pub qkv_b: Arc<Matrix<T>>,
    pub proj_w: Arc<Matrix<T>>,
    pub proj_b: Arc<Matrix<T>>,
    pub ln2_gamma: Arc<Matrix<T>>,
    pub ln2_beta: Arc<Matrix<T>>,
    pub fc1_w: Arc<Matrix<T>>,
    pub fc1_b: Arc<Matrix<T>>,
    pub fc2_w: Arc<Matrix<T>>,
    pub fc2_b: Arc<Matrix<T>>,
}

const BLOCK_TENSORS: [&str; 12] = [
    "ln1.weight",
    "ln1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "ln2.weight",
    "ln2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl<T: Scalar> BlockWeights<T> {
    fn tensors(&self) -> [&Arc<Matrix<T>>; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.qkv_w,
            &self.qkv_b,
            &self.proj_w,
            &self.proj_b,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    fn from_tensors(mut t: Vec<Matrix<T>>) -> Self {
        let mut next = || Arc::new(t.remove(0));
        Self {
            ln1_gamma: next(),
            ln1_beta: next(),
            qkv_w: next(),
            qkv_b: next(),
            proj_w: next(),
            proj_b: next(),
            ln2_gamma: next(),
            ln2_beta: next(),
            fc1_w: next(),
            fc1_b: next(),
            fc2_w: next(),
            fc2_b: next(),
        }
    }
}

/// Expected `[rows, cols]` of each block tensor, row vectors as `[1, n]`.
fn block_shapes(d: usize, f: usize) -> [(usize, usize); 12] {
    [
        (1, d),
        (1, d),
        (d, 3 * d),
        (1, 3 * d),
        (d, d),
        (1, d),
        (1, d),
        (1, d),
        (d, f),
        (1, f),
        (f, d),
        (1, d),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneBundle<T> {
    pub config: BackboneConfig,
    pub blocks: Vec<BlockWeights<T>>,
    pub norm_gamma: Arc<Matrix<T>>,
    pub norm_beta: Arc<Matrix<T>>,
    pub cls_token: Arc<Matrix<T>>,
    pub pe_table: PeTable<T>,
    frozen: bool,
}

impl<T: Scalar> BackboneBundle<T> {
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Every tensor in canonical order with its checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![
            ("cls_token".to_string(), &*self.cls_token),
            ("pe_table".to_string(), self.pe_table.entries()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(b.tensors()) {
                out.push((format!("blocks.{i}.{name}"), &**t));
            }
        }
        out.push(("norm.weight".into(), &*self.norm_gamma));
        out.push(("norm.bias".into(), &*self.norm_beta));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian `f64` values of every
    /// frozen tensor.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> BackboneBundle<U> {
        let c = |m: &Arc<Matrix<T>>| Arc::new(m.cast::<U>());
        BackboneBundle {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights::from_tensors(b.tensors().iter().map(|t| t.cast::<U>()).collect()))
                .collect(),
            norm_gamma: c(&self.norm_gamma),
            norm_beta: c(&self.norm_beta),
            cls_token: c(&self.cls_token),
            pe_table: PeTable::new(self.pe_table.layout(), self.pe_table.entries().cast()).expect("same layout"),
            frozen: self.frozen,
        }
    }

    /// Writes the bundle as a portable checkpoint directory.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        let layout = self.pe_table.layout();
        let mut meta = Manifest::new("backbone", serde_json::to_value(&self.config)?);
        meta.pe_layout = Some(layout);
        let tensors: Vec<StoredTensor> = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| {
                if name == "pe_table" {
                    StoredTensor::with_shape(&name, pe_shape(layout, self.dim()), t)
                } else {
                    StoredTensor::from_matrix(&name, t)
                }
            })
            .collect();
        checkpoint::write_checkpoint(dir, &meta, &tensors)
    }
}

fn pe_shape(layout: PeLayout, d: usize) -> Vec<usize> {
    match layout {
        PeLayout::Line { length } => vec![length, d],
        PeLayout::Grid { rows, cols } => vec![rows, cols, d],
    }
}

fn stored_shape(rows: usize, cols: usize) -> Vec<usize> {
    if rows == 1 {
        vec![cols]
    } else {
        vec![rows, cols]
    }
}

/// Loads and verifies a backbone checkpoint directory.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<BackboneBundle<T>> {
    let (manifest, tensors) = checkpoint::read_checkpoint(dir)?;
    if manifest.kind != "backbone" {
        return Err(Error::ManifestError(format!("checkpoint kind is `{}`, not backbone", manifest.kind)));
    }
    let config: BackboneConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::ManifestError(format!("backbone config: {e}")))?;
    config.validate().map_err(|e| Error::ManifestError(e.to_string()))?;
    let layout = manifest
        .pe_layout
        .ok_or_else(|| Error::ManifestError("manifest has no pe_layout".into()))?;
    let (d, f) = (config.dim, config.hidden());
    let get = |name: &str, shape: &[usize]| -> Result<Matrix<T>> { checkpoint::find(&tensors, name)?.to_matrix(shape) };
    let cls = get("cls_token", &[d])?;
    let pe = get("pe_table", &pe_shape(layout, d))?;
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for i in 0..config.n_blocks {
        let mut ts = Vec::with_capacity(12);
        for (name, (r, c)) in BLOCK_TENSORS.iter().zip(block_shapes(d, f)) {
            ts.push(get(&format!("blocks.{i}.{name}"), &stored_shape(r, c))?);
        }
        blocks.push(BlockWeights::from_tensors(ts));
    }
    let norm_gamma = get("norm.weight", &[d])?;
    let norm_beta = get("norm.bias", &[d])?;
    Ok(BackboneBundle {
        config,
        blocks,
        norm_gamma: Arc::new(norm_gamma),
        norm_beta: Arc::new(norm_beta),
        cls_token: Arc::new(cls),
        pe_table: PeTable::new(layout, pe)?,
        frozen: true,
    })
}

/// Deterministic stand-in for pre-trained weights: fan-in uniform matrices,
/// zero biases, unit norms and a sinusoidal PE table of the given layout.
pub fn init_random_backbone<T: Scalar>(cfg: &BackboneConfig, layout: PeLayout, seed: u64) -> Result<BackboneBundle<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f) = (cfg.dim, cfg.hidden());
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for _ in 0..cfg.n_blocks {
        let ts = block_shapes(d, f)
            .iter()
            .zip(BLOCK_TENSORS)
            .map(|(&(r, c), name)| {
                if name.starts_with("ln") {
                    if name.ends_with("weight") {
                        Matrix::filled(r, c, T::one())
                    } else {
                        Matrix::zeros(r, c)
                    }
                } else if r == 1 {
                    Matrix::zeros(r, c)
                } else {
                    Matrix::uniform(r, c, (3.0 / r as f64).sqrt(), &mut rng)
                }
            })
            .collect();
        blocks.push(BlockWeights::from_tensors(ts));
    }
    let cls = Matrix::uniform(1, d, 0.02 * 3f64.sqrt(), &mut rng);
    Ok(BackboneBundle {
        config: cfg.clone(),
        blocks,
        norm_gamma: Arc::new(Matrix::filled(1, d, T::one())),
        norm_beta: Arc::new(Matrix::zeros(1, d)),
        cls_token: Arc::new(cls),
        pe_table: PeTable::sinusoidal(layout, d)?,
        frozen: true,
    })
}

/// Adapter callback: maps the `N × D` point tokens of block `index` to their
/// adapted values (the residual included).
pub type AdapterFn<'a, T> = dyn FnMut(&mut Tape<T>, usize, Var) -> Result<Var> + 'a;

pub struct AdapterHook<'a, T> {
    pub position: AdapterPosition,
    /// Adapters run in blocks `0..depth`.
    pub depth: usize,
    pub apply: &'a mut AdapterFn<'a, T>,
}

pub struct BackboneOutput {
    pub cls: Var,
    pub tokens: Var,
    /// Attention probabilities per block and head, each `(N+1) × (N+1)`.
    pub attention: Vec<Vec<Var>>,
}

struct BlockVars {
    ln1: (Var, Var),
    qkv: (Var, Var),
    proj: (Var, Var),
    ln2: (Var, Var),
    fc1: (Var, Var),
    fc2: (Var, Var),
}

fn bind_block<T: Scalar>(tape: &mut Tape<T>, b: &BlockWeights<T>) -> BlockVars {
    let mut s = |m: &Arc<Matrix<T>>| tape.shared(Arc::clone(m));
    BlockVars {
        ln1: (s(&b.ln1_gamma), s(&b.ln1_beta)),
        qkv: (s(&b.qkv_w), s(&b.qkv_b)),
        proj: (s(&b.proj_w), s(&b.proj_b)),
        ln2: (s(&b.ln2_gamma), s(&b.ln2_beta)),
        fc1: (s(&b.fc1_w), s(&b.fc1_b)),
        fc2: (s(&b.fc2_w), s(&b.fc2_b)),
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, (w, b): (Var, Var)) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn attention<T: Scalar>(tape: &mut Tape<T>, x: Var, v: &BlockVars, cfg: &BackboneConfig, probs: &mut Vec<Var>) -> Var {
    let (d, dh) = (cfg.dim, cfg.head_dim());
    let qkv = linear(tape, x, v.qkv);
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let q = tape.slice_cols(qkv, h * dh, (h + 1) * dh);
        let k = tape.slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
        let val = tape.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
        let s = tape.matmul_nt(q, k);
        let s = tape.scale(s, scale);
        let a = tape.softmax_rows(s, None);
        probs.push(a);
        heads.push(tape.matmul(a, val));
    }
    let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
    linear(tape, o, v.proj)
}

fn mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, v: &BlockVars) -> Var {
    let h = linear(tape, x, v.fc1);
    let h = tape.activation(h, Activation::Gelu);
    linear(tape, h, v.fc2)
}

/// Applies `f` to the point-token rows of `x`, leaving the cls row alone.
fn on_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    f: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let n1 = tape.value(x).rows();
    let cls = tape.slice_rows(x, 0, 1);
    let toks = tape.slice_rows(x, 1, n1);
    let toks = f(tape, toks)?;
    Ok(tape.concat_rows(&[cls, toks]))
}

/// Records the backbone on `tape`. `tokens` is `N × D` with PEs applied.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    bundle: &BackboneBundle<T>,
    tokens: Var,
    mut hook: Option<AdapterHook<'_, T>>,
) -> Result<BackboneOutput> {
    let cfg = &bundle.config;
    let (_, d) = tape.value(tokens).shape();
    if d != cfg.dim {
        return Err(Error::DimMismatch(format!("token dim {d} vs backbone dim {}", cfg.dim)));
    }
    let eps = T::of(LN_EPS);
    let cls = tape.shared(Arc::clone(&bundle.cls_token));
    let mut x = tape.concat_rows(&[cls, tokens]);
    let mut attention_maps = Vec::with_capacity(cfg.n_blocks);
    for (i, b) in bundle.blocks.iter().enumerate() {
        let v = bind_block(tape, b);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        let h = tape.layer_norm(x, v.ln1.0, v.ln1.1, eps);
        let a = attention(tape, h, &v, cfg, &mut probs);
        x = tape.add(x, a);
        attention_maps.push(probs);

        let active = hook.as_ref().is_some_and(|hk| i < hk.depth);
        let position = hook.as_ref().map(|hk| hk.position).unwrap_or_default();
        if active && position == AdapterPosition::Before {
            let hk = hook.as_mut().expect("active hook");
            x = on_tokens(tape, x, |t, toks| (hk.apply)(t, i, toks))?;
        }
        let h = tape.layer_norm(x, v.ln2.0, v.ln2.1, eps);
        let m = mlp(tape, h, &v);
        if active && position == AdapterPosition::Parallel {
            let hk = hook.as_mut().expect("active hook");
            let n1 = tape.value(x).rows();
            let toks = tape.slice_rows(x, 1, n1);
            let adapted = (hk.apply)(tape, i, toks)?;
            let delta = tape.sub(adapted, toks);
            let zero = tape.constant(Matrix::zeros(1, d));
            let delta = tape.concat_rows(&[zero, delta]);
            let y = tape.add(x, m);
            x = tape.add(y, delta);
        } else {
            x = tape.add(x, m);
        }
        if active && position == AdapterPosition::After {
            let hk = hook.as_mut().expect("active hook");
            x = on_tokens(tape, x, |t, toks| (hk.apply)(t, i, toks))?;
        }
    }
    let g = tape.shared(Arc::clone(&bundle.norm_gamma));
    let bt = tape.shared(Arc::clone(&bundle.norm_beta));
    let out = tape.layer_norm(x, g, bt, eps);
    let n1 = tape.value(out).rows();
    Ok(BackboneOutput {
        cls: tape.slice_rows(out, 0, 1),
        tokens: tape.slice_rows(out, 1, n1),
        attention: attention_maps,
    })
}

/// Forward without adapters; returns `(tokens N×D, cls 1×D)`.
pub fn forward<T: Scalar>(bundle: &BackboneBundle<T>, tokens_in: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let mut tape = Tape::new();
    let x = tape.constant(tokens_in.clone());
    let out = forward_on_tape(&mut tape, bundle, x, None)?;
    Ok((tape.value(out.tokens).clone(), tape.value(out.cls).clone()))
}

/// Head-averaged attention of the cls token to each point token in `block`.
pub fn cls_attention_from_maps<T: Scalar>(tape: &Tape<T>, maps: &[Var]) -> Vec<T> {
    let n1 = tape.value(maps[0]).cols();
    let inv = T::one() / T::of_usize(maps.len());
    (1..n1)
        .map(|j| maps.iter().map(|&m| tape.value(m).get(0, j)).sum::<T>() * inv)
        .collect()
}

pub fn attention_scores<T: Scalar>(bundle: &BackboneBundle<T>, tokens_in: &Matrix<T>, block: usize) -> Result<Vec<T>> {
    if block >= bundle.config.n_blocks {
        return Err(Error::InvalidConfig(format!(
            "block {block} out of range for {} blocks",
            bundle.config.n_blocks
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(tokens_in.clone());
    let out = forward_on_tape(&mut tape, bundle, x, None)?;
    Ok(cls_attention_from_maps(&tape, &out.attention[block]))
}
