//! Time-patch vision transformer for HD-sEMG windows.
//!
//! Every time step of a window (all 256 electrodes) is one patch. Patches are
//! projected to `dim`, a class token is prepended, learned position
//! embeddings are added, and the sequence runs through pre-norm encoder
//! layers (multi-head self-attention, then a GELU MLP, each with a residual
//! connection). The class-token output is normalized and classified.

mod checkpoint;

use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, Checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

use crate::dataset::{CHANNELS, GRIDS, GRID_COLS, GRID_ROWS, N_GESTURES};
use crate::dsp::{WindowSet, WindowTensor};
use crate::error::{Error, Result};
use crate::numcore::{ops, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub window_samples: usize,
    pub grids: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub dropout_embed: f64,
    pub dropout_encoder: f64,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window_samples: 100,
            grids: GRIDS,
            grid_rows: GRID_ROWS,
            grid_cols: GRID_COLS,
            dim: 128,
            layers: 8,
            heads: 4,
            head_dim: 16,
            mlp_dim: 32,
            dropout_embed: 0.1,
            dropout_encoder: 0.5,
            n_classes: N_GESTURES,
        }
    }
}

impl ModelConfig {
    /// A narrow, shallow variant that trains in seconds on one core.
    pub fn desk() -> Self {
        ModelConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            head_dim: 8,
            mlp_dim: 16,
            ..ModelConfig::default()
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.grids * self.grid_rows * self.grid_cols
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn seq_len(&self) -> usize {
        self.window_samples + 1
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patch_dim() != CHANNELS {
            problems.push(format!(
                "grid layout {}×{}×{} does not give {CHANNELS} channels",
                self.grids, self.grid_rows, self.grid_cols
            ));
        }
        for (name, v) in [
            ("window_samples", self.window_samples),
            ("dim", self.dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("mlp_dim", self.mlp_dim),
            ("n_classes", self.n_classes),
        ] {
            if v == 0 {
                problems.push(format!("model.{name} must be positive"));
            }
        }
        for (name, p) in [
            ("dropout_embed", self.dropout_embed),
            ("dropout_encoder", self.dropout_encoder),
        ] {
            if !(0.0..1.0).contains(&p) {
                problems.push(format!("model.{name} = {p} must be in [0, 1)"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Tensors per encoder layer, in storage order.
const LAYER_TENSORS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2.gain",
    "ln2.bias", "w1", "b1", "w2", "b2",
];
const HEAD_TENSORS: [&str; 4] = ["head.ln.gain", "head.ln.bias", "head.fc.weight", "head.fc.bias"];
const EMBED_WEIGHT: usize = 0;
const EMBED_BIAS: usize = 1;
const CLS_TOKEN: usize = 2;
const POS_EMBED: usize = 3;
const FIRST_LAYER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    TruncNormal,
    Normal,
    Zeros,
    Ones,
}

/// Names, shapes and initializers of every tensor, in storage order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, inner, mlp) = (cfg.dim, cfg.inner_dim(), cfg.mlp_dim);
    let mut out = vec![
        ("embed.weight".to_string(), vec![cfg.patch_dim(), d], Init::TruncNormal),
        ("embed.bias".to_string(), vec![d], Init::Zeros),
        ("cls_token".to_string(), vec![d], Init::Zeros),
        ("pos_embed".to_string(), vec![cfg.seq_len(), d], Init::Normal),
    ];
    for l in 0..cfg.layers {
        let shapes: [(Vec<usize>, Init); 16] = [
            (vec![d], Init::Ones),
            (vec![d], Init::Zeros),
            (vec![d, inner], Init::TruncNormal),
            (vec![inner], Init::Zeros),
            (vec![d, inner], Init::TruncNormal),
            (vec![inner], Init::Zeros),
            (vec![d, inner], Init::TruncNormal),
            (vec![inner], Init::Zeros),
            (vec![inner, d], Init::TruncNormal),
            (vec![d], Init::Zeros),
            (vec![d], Init::Ones),
            (vec![d], Init::Zeros),
            (vec![d, mlp], Init::TruncNormal),
            (vec![mlp], Init::Zeros),
            (vec![mlp, d], Init::TruncNormal),
            (vec![d], Init::Zeros),
        ];
        for (name, (shape, init)) in LAYER_TENSORS.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape, init));
        }
    }
    let head: [(Vec<usize>, Init); 4] = [
        (vec![d], Init::Ones),
        (vec![d], Init::Zeros),
        (vec![d, cfg.n_classes], Init::TruncNormal),
        (vec![cfg.n_classes], Init::Zeros),
    ];
    for (name, (shape, init)) in HEAD_TENSORS.iter().zip(head) {
        out.push((name.to_string(), shape, init));
    }
    out
}

fn trunc_normal(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Which parameters a count or an update covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSubset {
    All,
    /// The patch projection `E` and its bias.
    ProjectionOnly,
}

/// All trainable tensors of the network, in a fixed named order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Weights from a truncated normal (std 0.02, cut at ±2σ), position
    /// embeddings from a standard normal, zero biases and class token, unit
    /// layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "model/init");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(&config) {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::TruncNormal => (0..len).map(|_| trunc_normal(&mut rng, 0.02)).collect(),
                Init::Normal => (0..len).map(|_| StandardNormal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; len],
                Init::Ones => vec![1.0; len],
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?.with_requires_grad(true));
        }
        Ok(ModelParams {
            config,
            names,
            tensors,
        })
    }

    /// Assembles parameters from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if named.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, tensor), (want, shape, _)) in named.into_iter().zip(expected) {
            if name != want || tensor.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match expected {want} {shape:?}",
                    tensor.shape()
                )));
            }
            names.push(name);
            tensors.push(tensor.with_requires_grad(true));
        }
        Ok(ModelParams {
            config,
            names,
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Whether tensor `index` belongs to `subset`.
    pub fn in_subset(&self, index: usize, subset: ParamSubset) -> bool {
        match subset {
            ParamSubset::All => true,
            ParamSubset::ProjectionOnly => index == EMBED_WEIGHT || index == EMBED_BIAS,
        }
    }

    /// Marks exactly the tensors in `subset` as trainable.
    pub fn set_trainable(&mut self, subset: ParamSubset) {
        for i in 0..self.tensors.len() {
            let on = self.in_subset(i, subset);
            self.tensors[i].set_requires_grad(on);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Records every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }
}

/// Exact number of scalars in `subset`.
pub fn count_params(params: &ModelParams, subset: ParamSubset) -> usize {
    params
        .tensors
        .iter()
        .enumerate()
        .filter(|(i, _)| params.in_subset(*i, subset))
        .map(|(_, t)| t.len())
        .sum()
}

/// Tape handles for a [`ModelParams`], in storage order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    fn layer(&self, l: usize, k: usize) -> Var {
        self.vars[FIRST_LAYER + l * LAYER_TENSORS.len() + k]
    }

    fn head(&self, k: usize) -> Var {
        self.vars[self.vars.len() - HEAD_TENSORS.len() + k]
    }
}

/// Inference runs without dropout; training draws masks from the stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl fmt::Debug for Mode<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Eval => f.write_str("Eval"),
            Mode::Train(_) => f.write_str("Train"),
        }
    }
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => tape.dropout(x, rate, rng),
        }
    }
}

/// `z_0`: projected patches with the class token in front, plus position
/// embeddings. `x` is `[B×T×256]`.
pub fn embed_tape(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, x: Var, mode: &mut Mode) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != cfg.window_samples || shape[2] != cfg.patch_dim() {
        return Err(Error::Shape(format!(
            "model expects [B×{}×{}] input, got {shape:?}",
            cfg.window_samples,
            cfg.patch_dim()
        )));
    }
    let e = tape.linear(x, p.vars[EMBED_WEIGHT], Some(p.vars[EMBED_BIAS]))?;
    let z = tape.prepend_token(e, p.vars[CLS_TOKEN])?;
    let z = tape.add_broadcast(z, p.vars[POS_EMBED])?;
    mode.dropout(tape, z, cfg.dropout_embed)
}

/// `z' = MSA(LN(z)) + z`; also returns the attention weights `[(B·h)×S×S]`.
pub fn msa_tape(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    z: Var,
    mode: &mut Mode,
) -> Result<(Var, Var)> {
    let w = |k| p.layer(layer, k);
    let y = tape.layer_norm(z, w(0), w(1), LAYER_NORM_EPS)?;
    let q = tape.linear(y, w(2), Some(w(3)))?;
    let k = tape.linear(y, w(4), Some(w(5)))?;
    let v = tape.linear(y, w(6), Some(w(7)))?;
    let q = tape.split_heads(q, cfg.heads)?;
    let k = tape.split_heads(k, cfg.heads)?;
    let v = tape.split_heads(v, cfg.heads)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (cfg.head_dim as f64).sqrt());
    let attn = tape.softmax(scores);
    let dropped = mode.dropout(tape, attn, cfg.dropout_encoder)?;
    let ctx = tape.batch_matmul(dropped, v, false)?;
    let ctx = tape.merge_heads(ctx, cfg.heads)?;
    let out = tape.linear(ctx, w(8), Some(w(9)))?;
    Ok((tape.add(out, z)?, attn))
}

/// `z = MLP(LN(z')) + z'`.
pub fn mlp_tape(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    z: Var,
    mode: &mut Mode,
) -> Result<Var> {
    let w = |k| p.layer(layer, k);
    let y = tape.layer_norm(z, w(10), w(11), LAYER_NORM_EPS)?;
    let h = tape.linear(y, w(12), Some(w(13)))?;
    let h = tape.gelu(h);
    let h = mode.dropout(tape, h, cfg.dropout_encoder)?;
    let out = tape.linear(h, w(14), Some(w(15)))?;
    tape.add(out, z)
}

/// Class logits `[B×n_classes]` for inputs `x: [B×T×256]`.
pub fn logits_tape(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, x: Var, mode: &mut Mode) -> Result<Var> {
    let mut z = embed_tape(tape, p, cfg, x, mode)?;
    for l in 0..cfg.layers {
        z = msa_tape(tape, p, cfg, l, z, mode)?.0;
        z = mlp_tape(tape, p, cfg, l, z, mode)?;
    }
    let cls = tape.select_token(z, 0)?;
    let cls = tape.layer_norm(cls, p.head(0), p.head(1), LAYER_NORM_EPS)?;
    tape.linear(cls, p.head(2), Some(p.head(3)))
}

/// Stacks windows `indices` of `set` into a `[B×T×256]` input.
pub fn batch_input(set: &WindowSet, indices: &[usize]) -> Vec<f64> {
    let per = set.window_samples() * CHANNELS;
    let mut out = vec![0.0; indices.len() * per];
    for (chunk, &i) in out.chunks_exact_mut(per).zip(indices) {
        set.write_f64(i, chunk);
    }
    out
}

fn window_input(tape: &mut Tape, window: &WindowTensor) -> Result<Var> {
    let shape = window.shape();
    let data = window.as_flat().iter().map(|&v| f64::from(v)).collect();
    tape.constant(vec![1, shape[0], CHANNELS], data)
}

fn squeeze_batch(t: Tensor) -> Result<Tensor> {
    let shape = t.shape()[1..].to_vec();
    t.reshape(shape)
}

/// `z_0` for one window, `[(T+1)×D]`.
pub fn embed(window: &WindowTensor, params: &ModelParams, mode: &mut Mode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = window_input(&mut tape, window)?;
    let z = embed_tape(&mut tape, &p, &params.config, x, mode)?;
    squeeze_batch(tape.to_tensor(z))
}

fn single_sequence(tape: &mut Tape, z: &Tensor, cfg: &ModelConfig) -> Result<Var> {
    if z.shape() != [cfg.seq_len(), cfg.dim] {
        return Err(Error::Shape(format!(
            "encoder block expects [{}×{}], got {:?}",
            cfg.seq_len(),
            cfg.dim,
            z.shape()
        )));
    }
    if !z.all_finite() {
        return Err(Error::Numeric("encoder block input is not finite".into()));
    }
    tape.constant(vec![1, cfg.seq_len(), cfg.dim], z.data().to_vec())
}

/// One attention sub-block on a single `[(T+1)×D]` sequence.
pub fn msa_block(z: &Tensor, params: &ModelParams, layer: usize, mode: &mut Mode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let zv = single_sequence(&mut tape, z, &params.config)?;
    let (out, _) = msa_tape(&mut tape, &p, &params.config, layer, zv, mode)?;
    squeeze_batch(tape.to_tensor(out))
}

/// One MLP sub-block on a single `[(T+1)×D]` sequence.
pub fn mlp_block(z: &Tensor, params: &ModelParams, layer: usize, mode: &mut Mode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let zv = single_sequence(&mut tape, z, &params.config)?;
    let out = mlp_tape(&mut tape, &p, &params.config, layer, zv, mode)?;
    squeeze_batch(tape.to_tensor(out))
}

/// Attention weights `[h×(T+1)×(T+1)]` of every layer for one window
/// (inference mode).
pub fn attention_maps(window: &WindowTensor, params: &ModelParams) -> Result<Vec<Tensor>> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = window_input(&mut tape, window)?;
    let mut mode = Mode::Eval;
    let mut z = embed_tape(&mut tape, &p, cfg, x, &mut mode)?;
    let mut maps = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let (next, attn) = msa_tape(&mut tape, &p, cfg, l, z, &mut mode)?;
        maps.push(tape.to_tensor(attn));
        z = mlp_tape(&mut tape, &p, cfg, l, next, &mut mode)?;
    }
    Ok(maps)
}

/// Class probabilities for one window.
pub fn forward(window: &WindowTensor, params: &ModelParams, mode: &mut Mode) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = window_input(&mut tape, window)?;
    let logits = logits_tape(&mut tape, &p, &params.config, x, mode)?;
    Ok(ops::softmax(tape.value(logits)))
}

/// Inference-mode logits for a batch of windows, `[B×n_classes]` row-major.
pub fn predict_logits(params: &ModelParams, set: &WindowSet, indices: &[usize]) -> Result<Vec<f64>> {
    let cfg = &params.config;
    if set.window_samples() != cfg.window_samples {
        return Err(Error::Shape(format!(
            "windows have {} samples, model expects {}",
            set.window_samples(),
            cfg.window_samples
        )));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.constant(
        vec![indices.len(), cfg.window_samples, CHANNELS],
        batch_input(set, indices),
    )?;
    let logits = logits_tape(&mut tape, &p, cfg, x, &mut Mode::Eval)?;
    let out = tape.value(logits).to_vec();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(out)
}

/// Predicted class for every window of `set`, evaluated in batches.
pub fn predict(params: &ModelParams, set: &WindowSet, batch_size: usize) -> Result<Vec<usize>> {
    use rayon::prelude::*;
    let all: Vec<usize> = (0..set.len()).collect();
    let chunks: Vec<Vec<usize>> = all
        .par_chunks(batch_size.max(1))
        .map(|idx| {
            predict_logits(params, set, idx).map(|l| {
                l.chunks_exact(params.config.n_classes)
                    .map(ops::argmax)
                    .collect::<Vec<usize>>()
            })
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Random windows, for benches and tests.
pub fn random_window(cfg: &ModelConfig, rng: &mut Rng) -> WindowTensor {
    let data = (0..cfg.window_samples * CHANNELS)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    let provenance = crate::dataset::Provenance {
        subject: 0,
        gesture: 0,
        day: crate::dataset::Day::Day1,
        repetition: 1,
    };
    WindowTensor::from_flat(cfg.window_samples, data, provenance, 0).expect("shape matches")
}
