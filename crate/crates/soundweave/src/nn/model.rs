//! Transformer backbone with an explicit gradient contract.
//!
//! Blocks are pre-norm: self-attention, then (in flagged blocks) an extra
//! cross-attention sublayer reading a condition memory as keys and values,
//! then a feedforward. Attention is fully bidirectional. A model is a named
//! parameter store plus the id map produced when the parameters were built,
//! so optimizer state and checkpoints can address tensors by stable names.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, NodeId, Tape};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Standard deviation of the weight init scheme.
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub feedforward_dim: usize,
    /// 1-based block indices that carry an extra cross-attention sublayer.
    pub cross_attention_positions: Vec<usize>,
    pub input_vocab: usize,
    pub output_vocab: usize,
    pub max_sequence_length: usize,
    pub condition_dropout_prob: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.feedforward_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide model_dim ({})",
                self.heads, self.model_dim
            )));
        }
        if self.input_vocab == 0 || self.output_vocab == 0 {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        if self.max_sequence_length == 0 {
            return Err(Error::Config("max_sequence_length must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout_prob) {
            return Err(Error::Config(
                "condition dropout probability must lie in [0, 1]".into(),
            ));
        }
        let mut prev = 0usize;
        for &p in &self.cross_attention_positions {
            if p == 0 || p > self.depth {
                return Err(Error::Config(format!(
                    "cross-attention position {p} outside 1..={}",
                    self.depth
                )));
            }
            if p <= prev {
                return Err(Error::Config(
                    "cross-attention positions must be strictly increasing".into(),
                ));
            }
            prev = p;
        }
        Ok(())
    }

    pub fn has_cross_attention(&self) -> bool {
        !self.cross_attention_positions.is_empty()
    }
}

/// Ordered, name-addressed parameter tensors.
#[derive(Clone, Debug)]
pub struct Parameters<F> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for Parameters<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Parameters<F> {
    pub fn new() -> Self {
        Parameters {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor<F>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), tensor));
        let id = self.entries.len() - 1;
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, pid: usize) -> &str {
        &self.entries[pid].0
    }

    pub fn tensor(&self, pid: usize) -> &Tensor<F> {
        &self.entries[pid].1
    }

    pub fn tensor_mut(&mut self, pid: usize) -> &mut Tensor<F> {
        &mut self.entries[pid].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|pid| self.tensor(pid))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

/// Draw a weight tensor with small-variance normal entries.
pub fn init_weight<F: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let mut t = Tensor::zeros(rows, cols);
    for x in t.data_mut() {
        let sample: f64 = rng.sample(rand_distr::StandardNormal);
        *x = F::from_f64(sample * INIT_STD);
    }
    t
}

pub fn init_zeros<F: Scalar>(rows: usize, cols: usize) -> Tensor<F> {
    Tensor::zeros(rows, cols)
}

pub fn init_ones<F: Scalar>(rows: usize, cols: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(rows, cols);
    for x in t.data_mut() {
        *x = F::ONE;
    }
    t
}

#[derive(Clone, Debug)]
pub struct AttentionIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub ln1: (usize, usize),
    pub attn: AttentionIds,
    pub cross: Option<((usize, usize), AttentionIds)>,
    pub ln2: (usize, usize),
    pub ffn: (usize, usize, usize, usize),
}

/// Parameter ids of one backbone instance.
#[derive(Clone, Debug)]
pub struct BackboneIds {
    pub pos: usize,
    pub blocks: Vec<BlockIds>,
    pub final_ln: (usize, usize),
    pub head_w: usize,
    pub head_b: usize,
}

fn push_attention<F: Scalar>(
    params: &mut Parameters<F>,
    prefix: &str,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> AttentionIds {
    AttentionIds {
        wq: params.push(&format!("{prefix}.wq"), init_weight(dim, dim, rng)),
        bq: params.push(&format!("{prefix}.bq"), init_zeros(1, dim)),
        wk: params.push(&format!("{prefix}.wk"), init_weight(dim, dim, rng)),
        bk: params.push(&format!("{prefix}.bk"), init_zeros(1, dim)),
        wv: params.push(&format!("{prefix}.wv"), init_weight(dim, dim, rng)),
        bv: params.push(&format!("{prefix}.bv"), init_zeros(1, dim)),
        wo: params.push(&format!("{prefix}.wo"), init_weight(dim, dim, rng)),
        bo: params.push(&format!("{prefix}.bo"), init_zeros(1, dim)),
    }
}

/// Append all backbone parameters (positional table, blocks, final norm,
/// output head) to `params`, initialized from `rng`.
pub fn build_backbone<F: Scalar>(
    params: &mut Parameters<F>,
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> BackboneIds {
    let dim = config.model_dim;
    let pos = params.push(
        "pos",
        init_weight(config.max_sequence_length, dim, rng),
    );
    let mut blocks = Vec::with_capacity(config.depth);
    for i in 1..=config.depth {
        let ln1 = (
            params.push(&format!("block{i}.ln1.gain"), init_ones(1, dim)),
            params.push(&format!("block{i}.ln1.bias"), init_zeros(1, dim)),
        );
        let attn = push_attention(params, &format!("block{i}.attn"), dim, rng);
        let cross = if config.cross_attention_positions.contains(&i) {
            let lnc = (
                params.push(&format!("block{i}.lnc.gain"), init_ones(1, dim)),
                params.push(&format!("block{i}.lnc.bias"), init_zeros(1, dim)),
            );
            Some((lnc, push_attention(params, &format!("block{i}.cross"), dim, rng)))
        } else {
            None
        };
        let ln2 = (
            params.push(&format!("block{i}.ln2.gain"), init_ones(1, dim)),
            params.push(&format!("block{i}.ln2.bias"), init_zeros(1, dim)),
        );
        let ffn = (
            params.push(
                &format!("block{i}.ffn.w1"),
                init_weight(dim, config.feedforward_dim, rng),
            ),
            params.push(&format!("block{i}.ffn.b1"), init_zeros(1, config.feedforward_dim)),
            params.push(
                &format!("block{i}.ffn.w2"),
                init_weight(config.feedforward_dim, dim, rng),
            ),
            params.push(&format!("block{i}.ffn.b2"), init_zeros(1, dim)),
        );
        blocks.push(BlockIds {
            ln1,
            attn,
            cross,
            ln2,
            ffn,
        });
    }
    let final_ln = (
        params.push("final_ln.gain", init_ones(1, dim)),
        params.push("final_ln.bias", init_zeros(1, dim)),
    );
    let head_w = params.push("head.w", init_weight(dim, config.output_vocab, rng));
    let head_b = params.push("head.b", init_zeros(1, config.output_vocab));
    BackboneIds {
        pos,
        blocks,
        final_ln,
        head_w,
        head_b,
    }
}

/// Re-resolve backbone parameter ids by name against a loaded parameter
/// store, validating every shape against the config. Rejects stores built
/// for a different architecture or vocabulary.
pub fn resolve_backbone<F: Scalar>(
    params: &Parameters<F>,
    config: &ModelConfig,
) -> Result<BackboneIds> {
    config.validate()?;
    let dim = config.model_dim;
    let lookup = |name: &str, rows: usize, cols: usize| -> Result<usize> {
        let pid = params
            .id(name)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
        let shape = params.tensor(pid).shape();
        if shape != (rows, cols) {
            return Err(Error::Config(format!(
                "parameter {name} has shape {shape:?}, config expects ({rows}, {cols})"
            )));
        }
        Ok(pid)
    };
    let resolve_attention = |prefix: &str| -> Result<AttentionIds> {
        Ok(AttentionIds {
            wq: lookup(&format!("{prefix}.wq"), dim, dim)?,
            bq: lookup(&format!("{prefix}.bq"), 1, dim)?,
            wk: lookup(&format!("{prefix}.wk"), dim, dim)?,
            bk: lookup(&format!("{prefix}.bk"), 1, dim)?,
            wv: lookup(&format!("{prefix}.wv"), dim, dim)?,
            bv: lookup(&format!("{prefix}.bv"), 1, dim)?,
            wo: lookup(&format!("{prefix}.wo"), dim, dim)?,
            bo: lookup(&format!("{prefix}.bo"), 1, dim)?,
        })
    };
    let pos = lookup("pos", config.max_sequence_length, dim)?;
    let mut blocks = Vec::with_capacity(config.depth);
    for i in 1..=config.depth {
        let ln1 = (
            lookup(&format!("block{i}.ln1.gain"), 1, dim)?,
            lookup(&format!("block{i}.ln1.bias"), 1, dim)?,
        );
        let attn = resolve_attention(&format!("block{i}.attn"))?;
        let cross = if config.cross_attention_positions.contains(&i) {
            let lnc = (
                lookup(&format!("block{i}.lnc.gain"), 1, dim)?,
                lookup(&format!("block{i}.lnc.bias"), 1, dim)?,
            );
            Some((lnc, resolve_attention(&format!("block{i}.cross"))?))
        } else {
            None
        };
        let ln2 = (
            lookup(&format!("block{i}.ln2.gain"), 1, dim)?,
            lookup(&format!("block{i}.ln2.bias"), 1, dim)?,
        );
        let ffn = (
            lookup(&format!("block{i}.ffn.w1"), dim, config.feedforward_dim)?,
            lookup(&format!("block{i}.ffn.b1"), 1, config.feedforward_dim)?,
            lookup(&format!("block{i}.ffn.w2"), config.feedforward_dim, dim)?,
            lookup(&format!("block{i}.ffn.b2"), 1, dim)?,
        );
        blocks.push(BlockIds {
            ln1,
            attn,
            cross,
            ln2,
            ffn,
        });
    }
    let final_ln = (
        lookup("final_ln.gain", 1, dim)?,
        lookup("final_ln.bias", 1, dim)?,
    );
    let head_w = lookup("head.w", dim, config.output_vocab)?;
    let head_b = lookup("head.b", 1, config.output_vocab)?;
    Ok(BackboneIds {
        pos,
        blocks,
        final_ln,
        head_w,
        head_b,
    })
}

/// Multi-head bidirectional attention from `x_q` over `x_kv`.
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    ids: &AttentionIds,
    heads: usize,
    x_q: NodeId,
    x_kv: NodeId,
) -> NodeId {
    let dim = tape.value(x_q).cols();
    let head_dim = dim / heads;
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let (wq, bq) = (tape.param(ids.wq), tape.param(ids.bq));
    let (wk, bk) = (tape.param(ids.wk), tape.param(ids.bk));
    let (wv, bv) = (tape.param(ids.wv), tape.param(ids.bv));
    let (wo, bo) = (tape.param(ids.wo), tape.param(ids.bo));
    let q = tape.linear(x_q, wq, bq);
    let k = tape.linear(x_kv, wk, bk);
    let v = tape.linear(x_kv, wv, bv);
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim);
        let kh = tape.slice_cols(k, h * head_dim, head_dim);
        let vh = tape.slice_cols(v, h * head_dim, head_dim);
        let raw = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(raw, scale);
        let attn = tape.softmax_rows(scaled);
        contexts.push(tape.matmul(attn, vh));
    }
    let ctx = tape.concat_cols(&contexts);
    tape.linear(ctx, wo, bo)
}

/// Run the backbone over an already-embedded main sequence.
///
/// Adds the learned positional table, applies every block, and projects to
/// logits. `memory` must be provided whenever the config declares
/// cross-attention positions; condition dropout is expressed by passing a
/// learned null memory, never by omitting the argument.
pub fn backbone_forward<F: Scalar>(
    tape: &mut Tape<F>,
    ids: &BackboneIds,
    config: &ModelConfig,
    x: NodeId,
    memory: Option<NodeId>,
) -> Result<NodeId> {
    let len = tape.value(x).rows();
    if len > config.max_sequence_length {
        return Err(Error::Shape(format!(
            "sequence length {len} exceeds maximum {}",
            config.max_sequence_length
        )));
    }
    if config.has_cross_attention() && memory.is_none() {
        return Err(Error::Condition(
            "model has cross-attention blocks but no condition memory was given".into(),
        ));
    }
    let pos_table = tape.param(ids.pos);
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.gather_rows(pos_table, &positions);
    let mut h = tape.add(x, pos);
    for block in &ids.blocks {
        let gain = tape.param(block.ln1.0);
        let bias = tape.param(block.ln1.1);
        let normed = tape.layer_norm(h, gain, bias);
        let attended = multi_head_attention(tape, &block.attn, config.heads, normed, normed);
        h = tape.add(h, attended);
        if let Some((lnc, cross)) = &block.cross {
            let mem = memory.expect("checked above");
            let gain = tape.param(lnc.0);
            let bias = tape.param(lnc.1);
            let normed = tape.layer_norm(h, gain, bias);
            let attended = multi_head_attention(tape, cross, config.heads, normed, mem);
            h = tape.add(h, attended);
        }
        let gain = tape.param(block.ln2.0);
        let bias = tape.param(block.ln2.1);
        let normed = tape.layer_norm(h, gain, bias);
        let w1 = tape.param(block.ffn.0);
        let b1 = tape.param(block.ffn.1);
        let w2 = tape.param(block.ffn.2);
        let b2 = tape.param(block.ffn.3);
        let mid = tape.linear(normed, w1, b1);
        let act = tape.gelu(mid);
        let out = tape.linear(act, w2, b2);
        h = tape.add(h, out);
    }
    if config.depth > 0 {
        let gain = tape.param(ids.final_ln.0);
        let bias = tape.param(ids.final_ln.1);
        h = tape.layer_norm(h, gain, bias);
    }
    let head_w = tape.param(ids.head_w);
    let head_b = tape.param(ids.head_b);
    Ok(tape.linear(h, head_w, head_b))
}

/// A plain token-in, logits-out model: embedding table plus backbone. The two
/// pipeline stages assemble richer inputs but reuse the same machinery.
#[derive(Clone, Debug)]
pub struct TokenModel<F> {
    pub config: ModelConfig,
    pub params: Parameters<F>,
    pub ids: BackboneIds,
    pub token_embed: usize,
}

impl<F: Scalar> TokenModel<F> {
    /// Deterministic init given the seed: same seed, bitwise-identical weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rand::SeedableRng::seed_from_u64(seed);
        let mut params = Parameters::new();
        let token_embed = params.push(
            "token_embed",
            init_weight(config.input_vocab, config.model_dim, &mut rng),
        );
        let ids = build_backbone(&mut params, &config, &mut rng);
        Ok(TokenModel {
            config,
            params,
            ids,
            token_embed,
        })
    }

    fn embed(&self, tape: &mut Tape<F>, tokens: &[u32]) -> Result<NodeId> {
        let table = tape.param(self.token_embed);
        let mut rows = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if (t as usize) >= self.config.input_vocab {
                return Err(Error::TokenRange {
                    what: "input",
                    id: t,
                    limit: self.config.input_vocab as u32,
                });
            }
            rows.push(t as usize);
        }
        Ok(tape.gather_rows(table, &rows))
    }

    /// Per-position logits for a token sequence, optionally attending to a
    /// raw condition memory (rows of model_dim vectors).
    pub fn forward(&self, tokens: &[u32], memory: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let mut tape = Tape::new(&self.params);
        let x = self.embed(&mut tape, tokens)?;
        let mem = memory.map(|m| tape.input(m.clone()));
        let logits = backbone_forward(&mut tape, &self.ids, &self.config, x, mem)?;
        Ok(tape.value(logits).clone())
    }

    /// Loss and parameter gradients for one sequence. `loss_fn` maps logits to
    /// (loss value, d loss / d logits).
    pub fn loss_and_gradients(
        &self,
        tokens: &[u32],
        memory: Option<&Tensor<F>>,
        loss_fn: impl FnOnce(&Tensor<F>) -> Result<(f64, Tensor<F>)>,
    ) -> Result<(f64, Gradients<F>)> {
        let mut tape = Tape::new(&self.params);
        let x = self.embed(&mut tape, tokens)?;
        let mem = memory.map(|m| tape.input(m.clone()));
        let logits = backbone_forward(&mut tape, &self.ids, &self.config, x, mem)?;
        let (loss, dlogits) = loss_fn(tape.value(logits))?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        Ok((loss, tape.backward(logits, dlogits)))
    }
}
