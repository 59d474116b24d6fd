//! The return-conditioned transformer.
//!
//! Each timestep contributes an rtg, a state, and an action token. A stack
//! block fuses the three (after adding a learned time embedding) into one
//! token. The transformer runs over `2T` tokens: a context stream carrying
//! the real actions and a query stream whose action slot holds a learned mask
//! embedding. Query `t` attends to context `0..t` and to itself, so its
//! output sees every earlier action but never action `t`; the heads read the
//! query stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use pcgpt_tensor::{
    read_checkpoint, write_checkpoint, Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingWindow;
use crate::env::{EditAction, Tile};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input does not match the model: {0}")]
    Dimension(String),
    #[error("window {0} has no unmasked slot")]
    EmptyMask(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Context length in timesteps.
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub width: usize,
    pub height: usize,
    pub n_items: usize,
    /// Multiplier applied to rtg values before the rtg embedding.
    pub rtg_scale: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            context_len: 16,
            d_model: 128,
            n_layers: 3,
            n_heads: 4,
            d_ff: 512,
            dropout: 0.1,
            width: 5,
            height: 5,
            n_items: Tile::COUNT,
            rtg_scale: 0.05,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn state_dim(&self) -> usize {
        self.width * self.height * self.n_items
    }

    pub fn action_dim(&self) -> usize {
        self.n_items + self.width + self.height
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.context_len == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return err("context_len, d_model, n_heads and d_ff must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err("d_model must be divisible by n_heads");
        }
        if self.width == 0 || self.height == 0 {
            return err("grid dimensions must be positive");
        }
        if self.n_items != Tile::COUNT {
            return err("n_items must equal the number of tile types");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout must lie in [0, 1)");
        }
        if !self.rtg_scale.is_finite() {
            return err("rtg_scale must be finite");
        }
        Ok(())
    }
}

/// A batch of equal-length sequences in model-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub batch: usize,
    pub len: usize,
    /// `batch * len` values.
    pub rtg: Vec<f64>,
    /// `batch * len * cells` tile codes.
    pub states: Vec<u8>,
    /// `batch * len` actions.
    pub actions: Vec<EditAction>,
}

impl ModelInput {
    pub fn from_windows(windows: &[TrainingWindow]) -> Result<Self, ModelError> {
        let len = windows.first().map_or(0, TrainingWindow::len);
        let mut input = ModelInput {
            batch: windows.len(),
            len,
            rtg: Vec::new(),
            states: Vec::new(),
            actions: Vec::new(),
        };
        for (i, w) in windows.iter().enumerate() {
            if w.len() != len || w.states.len() != len || w.actions.len() != len {
                return Err(ModelError::Dimension(format!("window {i} has length {}, expected {len}", w.len())));
            }
            input.rtg.extend_from_slice(&w.rtg);
            for s in &w.states {
                input.states.extend_from_slice(s);
            }
            input.actions.extend_from_slice(&w.actions);
        }
        Ok(input)
    }
}

/// Logits laid out `[batch, len, classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<T> {
    pub batch: usize,
    pub len: usize,
    pub item: Vec<T>,
    pub x: Vec<T>,
    pub y: Vec<T>,
}

/// Graph handles produced by [`Pcgpt::forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct LogitVars {
    pub item: Var,
    pub x: Var,
    pub y: Var,
}

#[derive(Clone, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct NormIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: NormIds,
    qkv: LinearIds,
    proj: LinearIds,
    ln2: NormIds,
    ff1: LinearIds,
    ff2: LinearIds,
}

#[derive(Clone, Debug)]
struct Ids {
    rtg: LinearIds,
    state: LinearIds,
    action: LinearIds,
    action_mask: ParamId,
    time: ParamId,
    stack: LinearIds,
    stack_ln: NormIds,
    blocks: Vec<BlockIds>,
    ln_f: NormIds,
    head_item: LinearIds,
    head_x: LinearIds,
    head_y: LinearIds,
}

#[derive(Clone, Debug)]
pub struct Pcgpt<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    ids: Ids,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        let bound = 1.0 / (fan_in as f64).sqrt();
        LinearIds {
            w: self
                .store
                .add(format!("{name}.weight"), Tensor::uniform(&[fan_in, fan_out], bound, &mut self.rng)),
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds {
            g: self.store.add(format!("{name}.gain"), Tensor::full(&[d], T::one())),
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn table(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::uniform(shape, 0.05, &mut self.rng))
    }
}

fn one_hot_states<T: Scalar>(codes: &[u8], n_items: usize) -> Vec<T> {
    let mut out = vec![T::zero(); codes.len() * n_items];
    for (cell, code) in codes.iter().enumerate() {
        out[cell * n_items + *code as usize] = T::one();
    }
    out
}

impl<T: Scalar> Pcgpt<T> {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.d_model;
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let rtg = b.linear("embed.rtg", 1, d);
        let state = b.linear("embed.state", config.state_dim(), d);
        let action = b.linear("embed.action", config.action_dim(), d);
        let action_mask = b.table("embed.action_mask", &[d]);
        let time = b.table("embed.time", &[config.context_len, d]);
        let stack = b.linear("stack.proj", 3 * d, d);
        let stack_ln = b.norm("stack.norm", d);
        let blocks = (0..config.n_layers)
            .map(|l| BlockIds {
                ln1: b.norm(&format!("blocks.{l}.norm1"), d),
                qkv: b.linear(&format!("blocks.{l}.attn.qkv"), d, 3 * d),
                proj: b.linear(&format!("blocks.{l}.attn.proj"), d, d),
                ln2: b.norm(&format!("blocks.{l}.norm2"), d),
                ff1: b.linear(&format!("blocks.{l}.ff.fc1"), d, config.d_ff),
                ff2: b.linear(&format!("blocks.{l}.ff.fc2"), config.d_ff, d),
            })
            .collect();
        let ln_f = b.norm("final_norm", d);
        let head_item = b.linear("head.item", d, config.n_items);
        let head_x = b.linear("head.loc_x", d, config.width);
        let head_y = b.linear("head.loc_y", d, config.height);
        let ids = Ids {
            rtg,
            state,
            action,
            action_mask,
            time,
            stack,
            stack_ln,
            blocks,
            ln_f,
            head_item,
            head_x,
            head_y,
        };
        Ok(Pcgpt {
            config,
            params: store,
            ids,
        })
    }

    /// Builds a model for `config` and installs `params`, which must carry
    /// exactly the expected names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        let mut model = Pcgpt::new(config)?;
        if params.len() != model.params.len() {
            return Err(ModelError::Dimension(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((_, n1, t1), (_, n2, t2)) in model.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(ModelError::Dimension(format!(
                    "parameter {n2} {:?} does not match {n1} {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Scalar>(&self) -> Pcgpt<U> {
        Pcgpt {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    pub fn check_input(&self, input: &ModelInput) -> Result<(), ModelError> {
        let c = &self.config;
        let cells = c.width * c.height;
        let n = input.batch * input.len;
        if input.len == 0 || input.len > c.context_len {
            return Err(ModelError::Dimension(format!(
                "sequence length {} outside 1..={}",
                input.len, c.context_len
            )));
        }
        if input.rtg.len() != n || input.actions.len() != n || input.states.len() != n * cells {
            return Err(ModelError::Dimension("input arrays do not match batch x len".into()));
        }
        if input.states.iter().any(|s| *s as usize >= c.n_items) {
            return Err(ModelError::Dimension("state code out of range".into()));
        }
        if input.actions.iter().any(|a| a.x >= c.width || a.y >= c.height) {
            return Err(ModelError::Dimension("action location outside the grid".into()));
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, ids: &LinearIds) -> Result<Var, TensorError> {
        let w = g.param(&self.params, ids.w);
        let b = g.param(&self.params, ids.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, ids: &NormIds) -> Result<Var, TensorError> {
        let gain = g.param(&self.params, ids.g);
        let bias = g.param(&self.params, ids.b);
        g.layer_norm(x, gain, bias)
    }

    /// Per-modality embeddings `[B, T, d]` for rtg, state and action, before
    /// time embeddings.
    pub fn embed_modalities(&self, g: &mut Graph<T>, input: &ModelInput) -> Result<[Var; 3], ModelError> {
        self.check_input(input)?;
        let c = &self.config;
        let (bt, t) = (input.batch, input.len);
        let scale = c.rtg_scale;
        let rtg_in = g.constant(
            &[bt, t, 1],
            input.rtg.iter().map(|r| T::from_f64_lossy(r * scale)).collect(),
        )?;
        let rtg = self.linear(g, rtg_in, &self.ids.rtg)?;
        let state_in = g.constant(&[bt, t, c.state_dim()], one_hot_states(&input.states, c.n_items))?;
        let state = self.linear(g, state_in, &self.ids.state)?;
        let mut act = vec![T::zero(); bt * t * c.action_dim()];
        for (i, a) in input.actions.iter().enumerate() {
            let row = &mut act[i * c.action_dim()..(i + 1) * c.action_dim()];
            row[a.item.code() as usize] = T::one();
            row[c.n_items + a.x] = T::one();
            row[c.n_items + c.width + a.y] = T::one();
        }
        let act_in = g.constant(&[bt, t, c.action_dim()], act)?;
        let action = self.linear(g, act_in, &self.ids.action)?;
        Ok([rtg, state, action])
    }

    /// Adds time embeddings, concatenates the three modality tokens, projects
    /// and normalizes. `action` may be any `[B, T, d]` action-slot token.
    fn stack_block(&self, g: &mut Graph<T>, rtg: Var, state: Var, action: Var, time: Var) -> Result<Var, TensorError> {
        let r = g.add(rtg, time)?;
        let s = g.add(state, time)?;
        let a = g.add(action, time)?;
        let cat = g.concat(&[r, s, a], 2)?;
        let proj = self.linear(g, cat, &self.ids.stack)?;
        self.norm(g, proj, &self.ids.stack_ln)
    }

    /// Stack-block tokens `[B, T, d]` for the context stream (real actions)
    /// and the query stream (masked actions).
    pub fn stacked_tokens(&self, g: &mut Graph<T>, input: &ModelInput) -> Result<(Var, Var), ModelError> {
        let [rtg, state, action] = self.embed_modalities(g, input)?;
        let d = self.config.d_model;
        let table = g.param(&self.params, self.ids.time);
        let time = g.narrow(table, 0, 0, input.len)?;
        let mask_vec = g.param(&self.params, self.ids.action_mask);
        let zeros = g.constant(&[input.batch, input.len, d], vec![T::zero(); input.batch * input.len * d])?;
        let masked = g.add(zeros, mask_vec)?;
        let ctx = self.stack_block(g, rtg, state, action, time)?;
        let qry = self.stack_block(g, rtg, state, masked, time)?;
        Ok((ctx, qry))
    }

    /// `[2T, 2T]` additive mask over `[context, query]` tokens.
    fn attention_mask(len: usize) -> Vec<T> {
        let n = 2 * len;
        let mut m = vec![T::neg_infinity(); n * n];
        for i in 0..n {
            for j in 0..n {
                let allowed = if i < len {
                    j <= i
                } else {
                    j < i - len || j == i
                };
                if allowed {
                    m[i * n + j] = T::zero();
                }
            }
        }
        m
    }

    fn attention<R: Rng>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ids: &BlockIds,
        mask: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let c = &self.config;
        let (d, h) = (c.d_model, c.n_heads);
        let dh = d / h;
        let shape = g.shape(x).to_vec();
        let (b, n) = (shape[0], shape[1]);
        let qkv = self.linear(g, x, &ids.qkv)?;
        let mut heads = Vec::with_capacity(3);
        for part in 0..3 {
            let p = g.narrow(qkv, 2, part * d, d)?;
            let p = g.reshape(p, &[b, n, h, dh])?;
            let p = g.swap_axes_12(p)?;
            heads.push(g.reshape(p, &[b * h, n, dh])?);
        }
        let scores = g.batch_matmul(heads[0], heads[1], true)?;
        let scores = g.scale(scores, T::one() / T::from_usize(dh).expect("head size fits").sqrt());
        let scores = g.add(scores, mask)?;
        let probs = g.softmax(scores)?;
        let probs = g.dropout(probs, c.dropout, train, rng)?;
        let out = g.batch_matmul(probs, heads[2], false)?;
        let out = g.reshape(out, &[b, h, n, dh])?;
        let out = g.swap_axes_12(out)?;
        let out = g.reshape(out, &[b, n, d])?;
        let out = self.linear(g, out, &ids.proj)?;
        g.dropout(out, c.dropout, train, rng)
    }

    fn block<R: Rng>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ids: &BlockIds,
        mask: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let h = self.norm(g, x, &ids.ln1)?;
        let a = self.attention(g, h, ids, mask, train, rng)?;
        let x = g.add(x, a)?;
        let h = self.norm(g, x, &ids.ln2)?;
        let h = self.linear(g, h, &ids.ff1)?;
        let h = g.gelu(h);
        let h = self.linear(g, h, &ids.ff2)?;
        let h = g.dropout(h, self.config.dropout, train, rng)?;
        g.add(x, h)
    }

    /// Records the forward pass on `g` and returns the logit nodes, each
    /// `[B, T, classes]`. Logits at position `t` predict the action taken at
    /// `t`.
    pub fn forward_graph<R: Rng>(
        &self,
        g: &mut Graph<T>,
        input: &ModelInput,
        train: bool,
        rng: &mut R,
    ) -> Result<LogitVars, ModelError> {
        let (ctx, qry) = self.stacked_tokens(g, input)?;
        let t = input.len;
        let x = g.concat(&[ctx, qry], 1)?;
        let mut x = g.dropout(x, self.config.dropout, train, rng)?;
        let mask = g.constant(&[2 * t, 2 * t], Self::attention_mask(t))?;
        for ids in &self.ids.blocks {
            x = self.block(g, x, ids, mask, train, rng)?;
        }
        let q = g.narrow(x, 1, t, t)?;
        let q = self.norm(g, q, &self.ids.ln_f)?;
        Ok(LogitVars {
            item: self.linear(g, q, &self.ids.head_item)?,
            x: self.linear(g, q, &self.ids.head_x)?,
            y: self.linear(g, q, &self.ids.head_y)?,
        })
    }

    pub fn forward<R: Rng>(&self, input: &ModelInput, train: bool, rng: &mut R) -> Result<Logits<T>, ModelError> {
        let mut g = Graph::new();
        let vars = self.forward_graph(&mut g, input, train, rng)?;
        Ok(Logits {
            batch: input.batch,
            len: input.len,
            item: g.value(vars.item).to_vec(),
            x: g.value(vars.x).to_vec(),
            y: g.value(vars.y).to_vec(),
        })
    }

    /// Masked negative log-likelihood: per window the mean over unmasked
    /// slots of the three head NLLs, then the mean over windows.
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        logits: LogitVars,
        actions: &[EditAction],
        mask: &[bool],
        batch: usize,
    ) -> Result<Var, ModelError> {
        let n = actions.len();
        if mask.len() != n || batch == 0 || !n.is_multiple_of(batch) {
            return Err(ModelError::Dimension("mask and actions must be batch x len".into()));
        }
        let len = n / batch;
        let mut weights = vec![T::zero(); n];
        for b in 0..batch {
            let slots = &mask[b * len..(b + 1) * len];
            let live = slots.iter().filter(|m| **m).count();
            if live == 0 {
                return Err(ModelError::EmptyMask(b));
            }
            let w = T::one() / T::from_usize(live * batch).expect("count fits");
            for (i, m) in slots.iter().enumerate() {
                if *m {
                    weights[b * len + i] = w;
                }
            }
        }
        let c = &self.config;
        let heads: [(Var, usize, Vec<usize>); 3] = [
            (logits.item, c.n_items, actions.iter().map(|a| a.item.code() as usize).collect()),
            (logits.x, c.width, actions.iter().map(|a| a.x).collect()),
            (logits.y, c.height, actions.iter().map(|a| a.y).collect()),
        ];
        let mut total: Option<Var> = None;
        for (v, classes, targets) in heads {
            let flat = g.reshape(v, &[n, classes])?;
            let l = g.cross_entropy(flat, &targets, &weights)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        Ok(total.expect("three heads"))
    }

    /// Forward pass plus loss over a batch of training windows.
    pub fn window_loss<R: Rng>(
        &self,
        g: &mut Graph<T>,
        windows: &[TrainingWindow],
        train: bool,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        let input = ModelInput::from_windows(windows)?;
        let logits = self.forward_graph(g, &input, train, rng)?;
        let mask: Vec<bool> = windows.iter().flat_map(|w| w.mask.iter().copied()).collect();
        self.loss_graph(g, logits, &input.actions, &mask, windows.len())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut out = BufWriter::new(File::create(path)?);
        let header = serde_json::to_value(&self.config).expect("config serializes");
        write_checkpoint(&mut out, &header, &self.params)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut input = BufReader::new(File::open(path)?);
        let (header, params) = read_checkpoint::<T, _>(&mut input)?;
        let config: ModelConfig = serde_json::from_value(header.model)
            .map_err(|e| ModelError::Config(format!("checkpoint model header: {e}")))?;
        Pcgpt::from_params(config, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            context_len: 4,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn input(batch: usize, len: usize, seed: u64) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * len;
        ModelInput {
            batch,
            len,
            rtg: (0..n).map(|_| rng.gen_range(-10.0..30.0)).collect(),
            states: (0..n * 25).map(|_| rng.gen_range(0..5)).collect(),
            actions: (0..n)
                .map(|_| EditAction::new(Tile::ALL[rng.gen_range(0..5)], rng.gen_range(0..5), rng.gen_range(0..5)))
                .collect(),
        }
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            n_items: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn logit_shapes() {
        let m = Pcgpt::<f32>::new(ModelConfig {
            dropout: 0.0,
            ..ModelConfig::default()
        })
        .unwrap();
        let out = m.forward(&input(2, 16, 1), false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.item.len(), 2 * 16 * 5);
        assert_eq!(out.x.len(), 2 * 16 * 5);
        assert_eq!(out.y.len(), 2 * 16 * 5);
    }

    #[test]
    fn zero_rtg_embeds_to_bias() {
        let m = Pcgpt::<f64>::new(tiny()).unwrap();
        let mut x = input(1, 2, 3);
        x.rtg = vec![0.0, 0.0];
        let mut g = Graph::new();
        let [rtg, _, _] = m.embed_modalities(&mut g, &x).unwrap();
        let bias = m.params.get(m.ids.rtg.b).data();
        assert_eq!(&g.value(rtg)[..8], bias);
        assert_eq!(&g.value(rtg)[8..], bias);
    }

    #[test]
    fn state_embedding_is_shared_across_time() {
        let m = Pcgpt::<f64>::new(tiny()).unwrap();
        let mut x = input(1, 3, 4);
        let first: Vec<u8> = x.states[..25].to_vec();
        x.states[50..75].copy_from_slice(&first);
        let mut g = Graph::new();
        let [_, state, _] = m.embed_modalities(&mut g, &x).unwrap();
        assert_eq!(g.value(state).len(), 3 * 8);
        assert_eq!(&g.value(state)[..8], &g.value(state)[16..24]);
        let names: Vec<&str> = m.params.iter().map(|(_, n, _)| n).filter(|n| n.starts_with("embed.state")).collect();
        assert_eq!(names, ["embed.state.weight", "embed.state.bias"]);
    }

    #[test]
    fn stack_block_rows_are_normalized() {
        let m = Pcgpt::<f64>::new(tiny()).unwrap();
        let x = input(2, 4, 5);
        let mut g = Graph::new();
        let (ctx, _) = m.stacked_tokens(&mut g, &x).unwrap();
        assert_eq!(g.shape(ctx), &[2, 4, 8]);
        for row in g.value(ctx).chunks(8) {
            // Gain is one and bias zero at initialization.
            assert!((row.iter().sum::<f64>() / 8.0).abs() < 1e-5);
        }
    }

    #[test]
    fn uniform_logits_give_three_ln5() {
        let mut m = Pcgpt::<f64>::new(tiny()).unwrap();
        for id in [m.ids.head_item.w, m.ids.head_item.b, m.ids.head_x.w, m.ids.head_x.b, m.ids.head_y.w, m.ids.head_y.b] {
            m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = input(2, 4, 6);
        let mut g = Graph::new();
        let logits = m.forward_graph(&mut g, &x, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mask = vec![true, true, false, true, true, false, false, false];
        let l = m.loss_graph(&mut g, logits, &x.actions, &mask, 2).unwrap();
        assert!((g.value(l)[0] - 3.0 * 5f64.ln()).abs() < 1e-12);
        assert!((g.value(l)[0] - 4.8283).abs() < 1e-4);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let m = Pcgpt::<f64>::new(tiny()).unwrap();
        let x = input(2, 2, 7);
        let mut g = Graph::new();
        let logits = m.forward_graph(&mut g, &x, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r = m.loss_graph(&mut g, logits, &x.actions, &[true, false, false, false], 2);
        assert!(matches!(r, Err(ModelError::EmptyMask(1))));
    }

    #[test]
    fn bad_inputs_are_dimension_errors() {
        let m = Pcgpt::<f32>::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(m.forward(&input(1, 5, 1), false, &mut rng), Err(ModelError::Dimension(_))));
        let mut x = input(1, 2, 1);
        x.states.pop();
        assert!(matches!(m.forward(&x, false, &mut rng), Err(ModelError::Dimension(_))));
    }

    #[test]
    fn attention_mask_layout() {
        let m = Pcgpt::<f64>::attention_mask(3);
        let allowed = |i: usize, j: usize| m[i * 6 + j] == 0.0;
        // Context rows: causal over context only.
        assert!(allowed(0, 0) && !allowed(0, 1) && !allowed(0, 3));
        assert!(allowed(2, 0) && allowed(2, 2));
        // Query rows: strictly earlier context plus themselves.
        assert!(allowed(3, 3) && !allowed(3, 0) && !allowed(3, 4));
        assert!(allowed(5, 0) && allowed(5, 1) && !allowed(5, 2) && allowed(5, 5) && !allowed(5, 4));
    }
}
