//! Stage two: semantic-to-acoustic refinement.
//!
//! Two models share one contract: per position, sum the semantic token
//! embedding, the embeddings of every lower acoustic layer, and the masked
//! target-layer embedding, prefix the projected video frames, and predict the
//! target layer's digits. One model owns layer 1; a second model serves
//! layers 2..K with a learned layer-index embedding. Inference decodes layer
//! by layer, coarse to fine, with iterative parallel decoding inside each
//! layer; sampling is restricted to digits that keep the code word inside
//! the codec image, so generated grids always decode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{apply_mask, masked_ce_grad, sample_mask, MaskSchedule, MaskState};
use crate::nn::model::{
    backbone_forward, build_backbone, init_weight, resolve_backbone, BackboneIds, ModelConfig,
    Parameters,
};
use crate::nn::optim::AdamW;
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::{Scalar, Tensor};
use crate::sampler::{iterative_decode, DecodeConfig, ScoredLogits};
use crate::tokens::{
    AcousticTokenGrid, SemanticTokenSequence, VideoFeatureSequence, VocabSpec,
};
use crate::world::WorldSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcousticModelKind {
    /// Predicts acoustic layer 1.
    First,
    /// Predicts layers 2..K, selected by a learned layer-index embedding.
    Rest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcousticStageConfig {
    pub model: ModelConfig,
    pub kind: AcousticModelKind,
    pub vocab: VocabSpec,
    pub t_sem: usize,
    pub t_v: usize,
    pub video_dim: usize,
}

impl AcousticStageConfig {
    pub fn new(
        kind: AcousticModelKind,
        vocab: VocabSpec,
        t_sem: usize,
        t_v: usize,
        video_dim: usize,
    ) -> Self {
        let base = vocab.acoustic_vocab_per_layer as usize;
        AcousticStageConfig {
            model: ModelConfig {
                depth: 4,
                model_dim: 64,
                heads: 4,
                feedforward_dim: 256,
                cross_attention_positions: vec![],
                input_vocab: base + 1,
                output_vocab: base,
                max_sequence_length: t_v + t_sem,
                condition_dropout_prob: 0.1,
            },
            kind,
            vocab,
            t_sem,
            t_v,
            video_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.vocab.validate()?;
        let base = self.vocab.acoustic_vocab_per_layer as usize;
        if self.model.output_vocab != base {
            return Err(Error::Config(format!(
                "model output vocab {} disagrees with acoustic base {base}",
                self.model.output_vocab
            )));
        }
        if self.model.has_cross_attention() {
            return Err(Error::Config(
                "acoustic models condition by summation, not cross-attention".into(),
            ));
        }
        if self.t_v == 0 || self.t_sem % self.t_v != 0 {
            return Err(Error::Config(
                "t_sem must be a positive multiple of t_v".into(),
            ));
        }
        if self.kind == AcousticModelKind::Rest && self.vocab.acoustic_layers < 2 {
            return Err(Error::Config(
                "a rest model needs at least two acoustic layers".into(),
            ));
        }
        Ok(())
    }

    /// 1-based layer indices this model predicts.
    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        match self.kind {
            AcousticModelKind::First => 1..=1,
            AcousticModelKind::Rest => 2..=self.vocab.acoustic_layers,
        }
    }
}

#[derive(Clone, Debug)]
struct AcousticIds {
    sem_embed: usize,
    /// One embedding table per acoustic layer this model can read; the table
    /// for layer k sits at index k-1. Each has a trailing mask row.
    acoustic_embeds: Vec<usize>,
    /// Rest model only: embedding row for each predicted layer (row i-2 for
    /// layer i).
    layer_index_embed: Option<usize>,
    video_proj_w: usize,
    video_proj_b: usize,
    mod_video: usize,
    mod_tokens: usize,
    null_video: usize,
    null_semantic: usize,
    backbone: BackboneIds,
}

#[derive(Clone, Debug)]
pub struct AcousticModel<F> {
    pub config: AcousticStageConfig,
    pub params: Parameters<F>,
    ids: AcousticIds,
}

/// Semantic condition: real tokens or the learned null embedding.
#[derive(Clone, Copy)]
pub enum SemanticInput<'a> {
    Tokens(&'a [u32]),
    Null,
}

/// Video condition, as in stage one.
#[derive(Clone, Copy)]
pub enum VideoInput<'a> {
    Features(&'a VideoFeatureSequence),
    Null,
}

impl<F: Scalar> AcousticModel<F> {
    pub fn init(config: AcousticStageConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dim = config.model.model_dim;
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
        let mut params = Parameters::new();
        let sem_embed = params.push(
            "sem_embed",
            init_weight(config.vocab.semantic_vocab_size() as usize, dim, &mut rng),
        );
        let readable = match config.kind {
            AcousticModelKind::First => 1,
            AcousticModelKind::Rest => config.vocab.acoustic_layers,
        };
        let rows = config.vocab.acoustic_vocab_per_layer as usize + 1;
        let acoustic_embeds = (1..=readable)
            .map(|k| params.push(&format!("acoustic_embed_{k}"), init_weight(rows, dim, &mut rng)))
            .collect();
        let layer_index_embed = match config.kind {
            AcousticModelKind::First => None,
            AcousticModelKind::Rest => Some(params.push(
                "layer_index_embed",
                init_weight(config.vocab.acoustic_layers - 1, dim, &mut rng),
            )),
        };
        let video_proj_w = params.push(
            "video_proj.w",
            init_weight(config.video_dim, dim, &mut rng),
        );
        let video_proj_b = params.push("video_proj.b", Tensor::zeros(1, dim));
        let mod_video = params.push("mod_video", init_weight(1, dim, &mut rng));
        let mod_tokens = params.push("mod_tokens", init_weight(1, dim, &mut rng));
        let null_video = params.push("null_video", init_weight(1, dim, &mut rng));
        let null_semantic = params.push("null_semantic", init_weight(1, dim, &mut rng));
        let backbone = build_backbone(&mut params, &config.model, &mut rng);
        Ok(AcousticModel {
            config,
            params,
            ids: AcousticIds {
                sem_embed,
                acoustic_embeds,
                layer_index_embed,
                video_proj_w,
                video_proj_b,
                mod_video,
                mod_tokens,
                null_video,
                null_semantic,
                backbone,
            },
        })
    }

    pub fn from_parameters(config: AcousticStageConfig, params: Parameters<F>) -> Result<Self> {
        config.validate()?;
        let dim = config.model.model_dim;
        let lookup = |name: &str, rows: usize, cols: usize| -> Result<usize> {
            let pid = params
                .id(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
            if params.tensor(pid).shape() != (rows, cols) {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config expects ({rows}, {cols})",
                    params.tensor(pid).shape()
                )));
            }
            Ok(pid)
        };
        let readable = match config.kind {
            AcousticModelKind::First => 1,
            AcousticModelKind::Rest => config.vocab.acoustic_layers,
        };
        let rows = config.vocab.acoustic_vocab_per_layer as usize + 1;
        let acoustic_embeds = (1..=readable)
            .map(|k| lookup(&format!("acoustic_embed_{k}"), rows, dim))
            .collect::<Result<Vec<_>>>()?;
        let layer_index_embed = match config.kind {
            AcousticModelKind::First => None,
            AcousticModelKind::Rest => Some(lookup(
                "layer_index_embed",
                config.vocab.acoustic_layers - 1,
                dim,
            )?),
        };
        let ids = AcousticIds {
            sem_embed: lookup(
                "sem_embed",
                config.vocab.semantic_vocab_size() as usize,
                dim,
            )?,
            acoustic_embeds,
            layer_index_embed,
            video_proj_w: lookup("video_proj.w", config.video_dim, dim)?,
            video_proj_b: lookup("video_proj.b", 1, dim)?,
            mod_video: lookup("mod_video", 1, dim)?,
            mod_tokens: lookup("mod_tokens", 1, dim)?,
            null_video: lookup("null_video", 1, dim)?,
            null_semantic: lookup("null_semantic", 1, dim)?,
            backbone: resolve_backbone(&params, &config.model)?,
        };
        Ok(AcousticModel {
            config,
            params,
            ids,
        })
    }

    pub fn mask_id(&self) -> u32 {
        self.config.vocab.acoustic_mask_id()
    }

    /// Positionwise sum of the semantic embedding, the lower-layer
    /// embeddings, the masked target-layer embedding, and (rest model) the
    /// layer-index embedding, tagged with the token modality embedding.
    pub fn sum_condition_embeddings<'t>(
        &self,
        tape: &mut Tape<'t, F>,
        semantic: SemanticInput<'_>,
        lower_layers: &[&[u32]],
        masked_layer: &[u32],
        layer_index: usize,
    ) -> Result<NodeId> {
        let t_sem = self.config.t_sem;
        if masked_layer.len() != t_sem {
            return Err(Error::Shape(format!(
                "target layer length {} does not match t_sem {t_sem}",
                masked_layer.len()
            )));
        }
        if !self.config.layers().contains(&layer_index) {
            return Err(Error::Config(format!(
                "layer {layer_index} outside this model's range {:?}",
                self.config.layers()
            )));
        }
        if lower_layers.len() != layer_index - 1 {
            return Err(Error::Shape(format!(
                "layer {layer_index} needs {} lower layers, got {}",
                layer_index - 1,
                lower_layers.len()
            )));
        }
        let mut x = match semantic {
            SemanticInput::Tokens(tokens) => {
                if tokens.len() != t_sem {
                    return Err(Error::Shape(format!(
                        "semantic condition length {} does not match t_sem {t_sem}",
                        tokens.len()
                    )));
                }
                let table = tape.param(self.ids.sem_embed);
                let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
                tape.gather_rows(table, &rows)
            }
            SemanticInput::Null => {
                let null = tape.param(self.ids.null_semantic);
                tape.broadcast_row(null, t_sem)
            }
        };
        for (k, layer) in lower_layers.iter().enumerate() {
            if layer.len() != t_sem {
                return Err(Error::Shape(format!(
                    "lower layer {} length {} does not match t_sem {t_sem}",
                    k + 1,
                    layer.len()
                )));
            }
            let table = tape.param(self.ids.acoustic_embeds[k]);
            let rows: Vec<usize> = layer.iter().map(|&t| t as usize).collect();
            let emb = tape.gather_rows(table, &rows);
            x = tape.add(x, emb);
        }
        let target_table = tape.param(self.ids.acoustic_embeds[layer_index - 1]);
        let rows: Vec<usize> = masked_layer.iter().map(|&t| t as usize).collect();
        let emb = tape.gather_rows(target_table, &rows);
        x = tape.add(x, emb);
        if let Some(pid) = self.ids.layer_index_embed {
            let table = tape.param(pid);
            let row = tape.gather_rows(table, &[layer_index - 2]);
            x = tape.add_broadcast_row(x, row);
        }
        let mod_tokens = tape.param(self.ids.mod_tokens);
        Ok(tape.add_broadcast_row(x, mod_tokens))
    }

    fn video_segment<'t>(&self, tape: &mut Tape<'t, F>, video: VideoInput<'_>) -> Result<NodeId> {
        let seg = match video {
            VideoInput::Features(v) => {
                if v.len() != self.config.t_v || v.dim() != self.config.video_dim {
                    return Err(Error::Shape(format!(
                        "video shape {}x{} does not match config {}x{}",
                        v.len(),
                        v.dim(),
                        self.config.t_v,
                        self.config.video_dim
                    )));
                }
                let mut flat = Vec::with_capacity(v.len() * v.dim());
                for frame in v.frames() {
                    flat.extend(frame.iter().map(|&x| F::from_f64(x as f64)));
                }
                let raw = tape.input(Tensor::from_vec(v.len(), v.dim(), flat));
                let w = tape.param(self.ids.video_proj_w);
                let b = tape.param(self.ids.video_proj_b);
                tape.linear(raw, w, b)
            }
            VideoInput::Null => {
                let null = tape.param(self.ids.null_video);
                tape.broadcast_row(null, self.config.t_v)
            }
        };
        let mod_video = tape.param(self.ids.mod_video);
        Ok(tape.add_broadcast_row(seg, mod_video))
    }

    /// Logits over the token segment (the last t_sem positions).
    fn layer_logits<'t>(
        &self,
        tape: &mut Tape<'t, F>,
        semantic: SemanticInput<'_>,
        video: VideoInput<'_>,
        lower_layers: &[&[u32]],
        masked_layer: &[u32],
        layer_index: usize,
    ) -> Result<NodeId> {
        let tokens =
            self.sum_condition_embeddings(tape, semantic, lower_layers, masked_layer, layer_index)?;
        let video_seg = self.video_segment(tape, video)?;
        let x = tape.concat_rows(&[video_seg, tokens]);
        let logits = backbone_forward(tape, &self.ids.backbone, &self.config.model, x, None)?;
        Ok(tape.slice_rows(logits, self.config.t_v, self.config.t_sem))
    }

    /// Loss over masked positions of the target layer; lower layers are
    /// always ground truth during training.
    pub fn loss(
        &self,
        sample: &WorldSample,
        layer_index: usize,
        mask: &MaskState,
        semantic: SemanticInput<'_>,
        video: VideoInput<'_>,
    ) -> Result<crate::masking::MaskedLoss> {
        let targets = sample.acoustic.layer(layer_index - 1);
        let masked = apply_mask(targets, mask, self.mask_id())?;
        let lower: Vec<&[u32]> = (0..layer_index - 1)
            .map(|k| sample.acoustic.layer(k))
            .collect();
        let mut tape = Tape::new(&self.params);
        let logits = self.layer_logits(&mut tape, semantic, video, &lower, &masked, layer_index)?;
        let (loss, _) = masked_ce_grad(tape.value(logits), targets, mask)?;
        Ok(loss)
    }

    /// Conditional/unconditional logits for decoding one layer.
    pub fn score(
        &self,
        semantic: &[u32],
        video: &VideoFeatureSequence,
        lower_layers: &[&[u32]],
        masked_layer: &[u32],
        layer_index: usize,
    ) -> Result<ScoredLogits<F>> {
        let cond = {
            let mut tape = Tape::new(&self.params);
            let node = self.layer_logits(
                &mut tape,
                SemanticInput::Tokens(semantic),
                VideoInput::Features(video),
                lower_layers,
                masked_layer,
                layer_index,
            )?;
            tape.value(node).clone()
        };
        let uncond = {
            let mut tape = Tape::new(&self.params);
            let node = self.layer_logits(
                &mut tape,
                SemanticInput::Null,
                VideoInput::Null,
                lower_layers,
                masked_layer,
                layer_index,
            )?;
            tape.value(node).clone()
        };
        Ok(ScoredLogits::new(cond, uncond))
    }
}

/// The two stage-two models as one unit.
#[derive(Clone, Debug)]
pub struct AcousticBundle<F> {
    pub first: AcousticModel<F>,
    pub rest: AcousticModel<F>,
}

impl<F: Scalar> AcousticBundle<F> {
    pub fn init(
        first_config: AcousticStageConfig,
        rest_config: AcousticStageConfig,
        seed: u64,
    ) -> Result<Self> {
        if first_config.kind != AcousticModelKind::First
            || rest_config.kind != AcousticModelKind::Rest
        {
            return Err(Error::Config(
                "bundle needs one first-layer model and one rest model".into(),
            ));
        }
        if first_config.vocab != rest_config.vocab
            || first_config.t_sem != rest_config.t_sem
            || first_config.t_v != rest_config.t_v
        {
            return Err(Error::Config(
                "bundle models must share vocabulary and sequence geometry".into(),
            ));
        }
        Ok(AcousticBundle {
            first: AcousticModel::init(first_config, seed)?,
            rest: AcousticModel::init(rest_config, seed.wrapping_add(1))?,
        })
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.first.config.vocab
    }
}

/// Digits allowed at `layer_index` for each position, given the already
/// decoded lower layers: a digit is allowed when the code prefix can still
/// extend to a value inside the semantic vocabulary.
fn allowed_digits(
    vocab: &VocabSpec,
    lower_layers: &[Vec<u32>],
    layer_index: usize,
    t_sem: usize,
) -> Vec<Vec<bool>> {
    let base = vocab.acoustic_vocab_per_layer as u64;
    let layers = vocab.acoustic_layers;
    let limit = vocab.semantic_vocab_size() as u64;
    let remaining = (layers - layer_index) as u32;
    (0..t_sem)
        .map(|pos| {
            let mut prefix: u64 = 0;
            for layer in lower_layers {
                prefix = prefix * base + layer[pos] as u64;
            }
            (0..base)
                .map(|d| (prefix * base + d) * base.pow(remaining) < limit)
                .collect()
        })
        .collect()
}

/// Coarse-to-fine layer decoding driven by an arbitrary per-layer scorer.
/// `score_fn(layer_index, decoded_lower, masked_layer)` returns logits over
/// the layer's digits at every position.
pub fn generate_layers<F, S>(
    score_fn: &mut S,
    vocab: &VocabSpec,
    t_sem: usize,
    steps_per_layer: &[usize],
    cfg_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<AcousticTokenGrid>
where
    F: Scalar,
    S: FnMut(usize, &[Vec<u32>], &[u32]) -> Result<ScoredLogits<F>>,
{
    if steps_per_layer.len() != vocab.acoustic_layers {
        return Err(Error::Config(format!(
            "steps list has {} entries, need one per acoustic layer ({})",
            steps_per_layer.len(),
            vocab.acoustic_layers
        )));
    }
    let mask_id = vocab.acoustic_mask_id();
    let mut decoded: Vec<Vec<u32>> = Vec::with_capacity(vocab.acoustic_layers);
    for (layer0, &steps) in steps_per_layer.iter().enumerate() {
        let layer_index = layer0 + 1;
        let decode = DecodeConfig::new(steps, cfg_scale)?;
        let allowed = allowed_digits(vocab, &decoded, layer_index, t_sem);
        let layer = iterative_decode(
            |masked: &[u32]| {
                let mut scored = score_fn(layer_index, &decoded, masked)?;
                scored.allowed = Some(allowed.clone());
                Ok(scored)
            },
            t_sem,
            mask_id,
            &decode,
            rng,
        )?;
        decoded.push(layer);
    }
    AcousticTokenGrid::new(decoded, vocab)
}

/// Generate the full acoustic grid for a semantic sequence.
pub fn generate<F: Scalar>(
    bundle: &AcousticBundle<F>,
    semantic: &SemanticTokenSequence,
    video: &VideoFeatureSequence,
    steps_per_layer: &[usize],
    cfg_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<AcousticTokenGrid> {
    let t_sem = bundle.first.config.t_sem;
    if semantic.len() != t_sem {
        return Err(Error::Shape(format!(
            "semantic length {} does not match t_sem {t_sem}",
            semantic.len()
        )));
    }
    let vocab = bundle.vocab().clone();
    generate_layers(
        &mut |layer_index: usize, decoded: &[Vec<u32>], masked: &[u32]| {
            let model = if layer_index == 1 {
                &bundle.first
            } else {
                &bundle.rest
            };
            let lower: Vec<&[u32]> = decoded.iter().map(Vec::as_slice).collect();
            model.score(semantic.tokens(), video, &lower, masked, layer_index)
        },
        &vocab,
        t_sem,
        steps_per_layer,
        cfg_scale,
        rng,
    )
}

#[derive(Clone, Copy, Debug)]
pub struct AcousticStepStats {
    pub loss: f64,
    pub masked_accuracy: f64,
    /// 1-based layer this example batch trained on, paired with its loss.
    pub layer: usize,
}

/// One gradient step for one of the bundle's models. The first model always
/// trains layer 1; the rest model draws a layer uniformly from 2..=K per
/// step. Lower layers are teacher-forced ground truth.
pub fn train_step<F: Scalar>(
    model: &mut AcousticModel<F>,
    optimizer: &mut AdamW<F>,
    samples: &[&WorldSample],
    schedule: &MaskSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<AcousticStepStats> {
    if samples.is_empty() {
        return Err(Error::Input("training batch is empty".into()));
    }
    let layer_index = match model.config.kind {
        AcousticModelKind::First => 1,
        AcousticModelKind::Rest => rng.gen_range(2..=model.config.vocab.acoustic_layers),
    };
    let p_drop = model.config.model.condition_dropout_prob;
    struct Draw {
        mask: MaskState,
        drop_semantic: bool,
        drop_video: bool,
    }
    let draws: Vec<Draw> = samples
        .iter()
        .map(|_| {
            let t: f64 = rng.gen();
            let mask = sample_mask(model.config.t_sem, t, schedule, rng)?;
            Ok(Draw {
                mask,
                drop_semantic: rng.gen_bool(p_drop),
                drop_video: rng.gen_bool(p_drop),
            })
        })
        .collect::<Result<_>>()?;

    struct ExampleResult<F> {
        loss: f64,
        degenerate: bool,
        grads: crate::nn::tape::Gradients<F>,
        correct: usize,
        masked: usize,
    }
    let results: Vec<Result<ExampleResult<F>>> = samples
        .par_iter()
        .zip(&draws)
        .map(|(sample, draw)| {
            let targets = sample.acoustic.layer(layer_index - 1);
            let masked_input = apply_mask(targets, &draw.mask, model.mask_id())?;
            let lower: Vec<&[u32]> = (0..layer_index - 1)
                .map(|k| sample.acoustic.layer(k))
                .collect();
            let semantic = if draw.drop_semantic {
                SemanticInput::Null
            } else {
                SemanticInput::Tokens(sample.semantic.tokens())
            };
            let video = if draw.drop_video {
                VideoInput::Null
            } else {
                VideoInput::Features(&sample.video)
            };
            let mut tape = Tape::new(&model.params);
            let logits = tape_logits(model, &mut tape, semantic, video, &lower, &masked_input, layer_index)?;
            let (loss, dlogits) = masked_ce_grad(tape.value(logits), targets, &draw.mask)?;
            if !loss.value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {}; aborting the step",
                    loss.value
                )));
            }
            let values = tape.value(logits);
            let (mut correct, mut masked) = (0usize, 0usize);
            for (pos, (&target, &is_masked)) in targets.iter().zip(draw.mask.mask()).enumerate() {
                if !is_masked {
                    continue;
                }
                masked += 1;
                let row = values.row(pos);
                let mut best = 0usize;
                let mut best_val = row[0];
                for (j, &x) in row.iter().enumerate().skip(1) {
                    if x > best_val {
                        best_val = x;
                        best = j;
                    }
                }
                if best == target as usize {
                    correct += 1;
                }
            }
            let grads = if loss.is_degenerate() {
                crate::nn::tape::Gradients::zeros(model.params.len())
            } else {
                tape.backward(logits, dlogits)
            };
            Ok(ExampleResult {
                loss: loss.value,
                degenerate: loss.is_degenerate(),
                grads,
                correct,
                masked,
            })
        })
        .collect();

    let mut total = crate::nn::tape::Gradients::zeros(model.params.len());
    let mut loss_sum = 0.0;
    let mut active = 0usize;
    let mut correct = 0usize;
    let mut masked = 0usize;
    for result in results {
        let r = result?;
        if !r.degenerate {
            total.add_scaled(&r.grads, F::ONE);
            loss_sum += r.loss;
            active += 1;
        }
        correct += r.correct;
        masked += r.masked;
    }
    if active > 0 {
        total.scale(F::from_f64(1.0 / active as f64));
        optimizer.apply(&mut model.params, &total)?;
    }
    Ok(AcousticStepStats {
        loss: if active > 0 { loss_sum / active as f64 } else { 0.0 },
        masked_accuracy: if masked > 0 {
            correct as f64 / masked as f64
        } else {
            0.0
        },
        layer: layer_index,
    })
}

// Free function so the parallel closure can borrow `model` immutably.
fn tape_logits<'t, F: Scalar>(
    model: &AcousticModel<F>,
    tape: &mut Tape<'t, F>,
    semantic: SemanticInput<'_>,
    video: VideoInput<'_>,
    lower: &[&[u32]],
    masked_layer: &[u32],
    layer_index: usize,
) -> Result<NodeId> {
    model.layer_logits(tape, semantic, video, lower, masked_layer, layer_index)
}

/// Per-layer exact-match fraction of generated grids against the oracle
/// codec, over held-out samples.
pub fn heldout_layer_exact_match<F: Scalar>(
    bundle: &AcousticBundle<F>,
    samples: &[WorldSample],
    steps_per_layer: &[usize],
    cfg_scale: f64,
    base_seed: u64,
) -> Result<Vec<f64>> {
    let layers = bundle.vocab().acoustic_layers;
    let per_sample: Vec<Result<Vec<(usize, usize)>>> = samples
        .par_iter()
        .enumerate()
        .map(|(idx, sample)| {
            let mut rng = rand::SeedableRng::seed_from_u64(
                crate::world::sample_seed(base_seed, idx as u64),
            );
            let grid = generate(
                bundle,
                &sample.semantic,
                &sample.video,
                steps_per_layer,
                cfg_scale,
                &mut rng,
            )?;
            let mut counts = Vec::with_capacity(layers);
            for k in 0..layers {
                let hits = grid
                    .layer(k)
                    .iter()
                    .zip(sample.acoustic.layer(k))
                    .filter(|(a, b)| a == b)
                    .count();
                counts.push((hits, sample.acoustic.len()));
            }
            Ok(counts)
        })
        .collect();
    let mut hits = vec![0usize; layers];
    let mut totals = vec![0usize; layers];
    for r in per_sample {
        for (k, (h, t)) in r?.into_iter().enumerate() {
            hits[k] += h;
            totals[k] += t;
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t > 0 { h as f64 / t as f64 } else { 1.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskSchedule;
    use crate::nn::optim::AdamWConfig;
    use crate::tokens::encode_acoustic;
    use crate::world::{World, WorldConfig};
    use rand::SeedableRng;

    fn tiny_world() -> World {
        World::new(WorldConfig {
            t_sem: 30,
            t_v: 3,
            video_dim: 8,
            lexicon_size: 10,
            words_max: 1,
            segments_max: 3,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn tiny_configs(world: &World) -> (AcousticStageConfig, AcousticStageConfig) {
        let mut first = AcousticStageConfig::new(
            AcousticModelKind::First,
            world.config.vocab.clone(),
            world.config.t_sem,
            world.config.t_v,
            world.config.video_dim,
        );
        first.model.depth = 2;
        first.model.model_dim = 32;
        first.model.heads = 2;
        first.model.feedforward_dim = 64;
        let mut rest = first.clone();
        rest.kind = AcousticModelKind::Rest;
        (first, rest)
    }

    fn tiny_bundle(world: &World, seed: u64) -> AcousticBundle<f32> {
        let (first, rest) = tiny_configs(world);
        AcousticBundle::init(first, rest, seed).unwrap()
    }

    #[test]
    fn layer_one_sum_uses_only_its_tables() {
        let world = tiny_world();
        let mut model =
            AcousticModel::<f32>::init(tiny_configs(&world).0, 3).unwrap();
        // Zero the modality embedding so the sum is exactly the two tables.
        let mod_tokens = model.params.id("mod_tokens").unwrap();
        *model.params.tensor_mut(mod_tokens) = Tensor::zeros(1, 32);
        let sample = world.gen_sample(4);
        let masked = vec![model.mask_id(); world.config.t_sem];
        let mut tape = Tape::new(&model.params);
        let node = model
            .sum_condition_embeddings(
                &mut tape,
                SemanticInput::Tokens(sample.semantic.tokens()),
                &[],
                &masked,
                1,
            )
            .unwrap();
        let value = tape.value(node).clone();
        let sem_table = model.params.by_name("sem_embed").unwrap();
        let ac_table = model.params.by_name("acoustic_embed_1").unwrap();
        for (pos, &sem) in sample.semantic.tokens().iter().enumerate() {
            for j in 0..32 {
                let expect =
                    sem_table.at(sem as usize, j) + ac_table.at(model.mask_id() as usize, j);
                assert!((value.at(pos, j) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn all_zero_tables_give_zero_sequence() {
        let world = tiny_world();
        let mut model = AcousticModel::<f32>::init(tiny_configs(&world).0, 5).unwrap();
        for name in ["sem_embed", "acoustic_embed_1", "mod_tokens"] {
            let pid = model.params.id(name).unwrap();
            let (r, c) = model.params.tensor(pid).shape();
            *model.params.tensor_mut(pid) = Tensor::zeros(r, c);
        }
        let sample = world.gen_sample(4);
        let masked = vec![model.mask_id(); world.config.t_sem];
        let mut tape = Tape::new(&model.params);
        let node = model
            .sum_condition_embeddings(
                &mut tape,
                SemanticInput::Tokens(sample.semantic.tokens()),
                &[],
                &masked,
                1,
            )
            .unwrap();
        assert!(tape.value(node).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn positionwise_sum_commutes_with_joint_permutation() {
        let world = tiny_world();
        let model = AcousticModel::<f32>::init(tiny_configs(&world).1, 6).unwrap();
        let sample = world.gen_sample(8);
        let t = world.config.t_sem;
        let masked: Vec<u32> = (0..t as u32).map(|i| i % 8).collect();
        let lower: Vec<&[u32]> = vec![sample.acoustic.layer(0)];
        let build = |sem: &[u32], low: &[&[u32]], masked: &[u32]| -> Tensor<f32> {
            let mut tape = Tape::new(&model.params);
            let node = model
                .sum_condition_embeddings(&mut tape, SemanticInput::Tokens(sem), low, masked, 2)
                .unwrap();
            tape.value(node).clone()
        };
        let base = build(sample.semantic.tokens(), &lower, &masked);
        // Rotate every stream by the same shift.
        let rot = |v: &[u32]| -> Vec<u32> {
            let mut out = v.to_vec();
            out.rotate_left(7);
            out
        };
        let sem_rot = rot(sample.semantic.tokens());
        let low_rot = rot(sample.acoustic.layer(0));
        let masked_rot = rot(&masked);
        let lowers_rot: Vec<&[u32]> = vec![&low_rot];
        let rotated = build(&sem_rot, &lowers_rot, &masked_rot);
        for pos in 0..t {
            let src = (pos + 7) % t;
            assert_eq!(rotated.row(pos), base.row(src));
        }
    }

    #[test]
    fn untrained_loss_is_near_log_base() {
        let world = tiny_world();
        let model = AcousticModel::<f32>::init(tiny_configs(&world).0, 7).unwrap();
        let sample = world.gen_sample(2);
        let mask = MaskState::full(world.config.t_sem);
        let loss = model
            .loss(
                &sample,
                1,
                &mask,
                SemanticInput::Tokens(sample.semantic.tokens()),
                VideoInput::Features(&sample.video),
            )
            .unwrap();
        let expected = (world.config.vocab.acoustic_vocab_per_layer as f64).ln();
        assert!(
            (loss.value - expected).abs() < 0.1,
            "loss {} vs ln(8) = {expected}",
            loss.value
        );
    }

    #[test]
    fn unmasked_layer_batch_is_degenerate() {
        let world = tiny_world();
        let model = AcousticModel::<f32>::init(tiny_configs(&world).0, 8).unwrap();
        let sample = world.gen_sample(3);
        let mask = MaskState::new(vec![false; world.config.t_sem], 0.4).unwrap();
        let loss = model
            .loss(
                &sample,
                1,
                &mask,
                SemanticInput::Tokens(sample.semantic.tokens()),
                VideoInput::Features(&sample.video),
            )
            .unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.is_degenerate());
    }

    #[test]
    fn upper_layer_tokens_do_not_affect_lower_layer_loss() {
        let world = tiny_world();
        let model = AcousticModel::<f32>::init(tiny_configs(&world).1, 9).unwrap();
        let mut sample = world.gen_sample(5);
        let mask = MaskState::full(world.config.t_sem);
        let base = model
            .loss(
                &sample,
                2,
                &mask,
                SemanticInput::Tokens(sample.semantic.tokens()),
                VideoInput::Features(&sample.video),
            )
            .unwrap();
        // Corrupt layer 3 (above the trained layer 2).
        let mut layers: Vec<Vec<u32>> = sample.acoustic.layers().to_vec();
        for x in layers[2].iter_mut() {
            *x = (*x + 3) % world.config.vocab.acoustic_vocab_per_layer;
        }
        sample.acoustic =
            AcousticTokenGrid::new(layers, &world.config.vocab).unwrap();
        let perturbed = model
            .loss(
                &sample,
                2,
                &mask,
                SemanticInput::Tokens(sample.semantic.tokens()),
                VideoInput::Features(&sample.video),
            )
            .unwrap();
        assert_eq!(base.value.to_bits(), perturbed.value.to_bits());
    }

    #[test]
    fn mock_oracle_generation_matches_codec_for_any_schedule() {
        let world = tiny_world();
        let vocab = world.config.vocab.clone();
        let sample = world.gen_sample(12);
        let oracle_grid = encode_acoustic(&sample.semantic, &vocab).unwrap();
        let base = vocab.acoustic_vocab_per_layer as usize;
        for steps in [vec![20, 10, 1, 1], vec![1, 1, 1, 1], vec![4, 4, 4, 4]] {
            let mut rng = ChaCha8Rng::seed_from_u64(steps[0] as u64);
            let grid = generate_layers(
                &mut |layer_index: usize, _decoded: &[Vec<u32>], _masked: &[u32]| {
                    let targets = oracle_grid.layer(layer_index - 1);
                    let mut cond = Tensor::<f32>::zeros(targets.len(), base);
                    for (i, &t) in targets.iter().enumerate() {
                        for (j, x) in cond.row_mut(i).iter_mut().enumerate() {
                            *x = if j == t as usize { 100.0 } else { -100.0 };
                        }
                    }
                    Ok(ScoredLogits::new(cond.clone(), cond))
                },
                &vocab,
                world.config.t_sem,
                &steps,
                2.5,
                &mut rng,
            )
            .unwrap();
            assert_eq!(grid, oracle_grid);
        }
    }

    #[test]
    fn generated_grids_always_decode() {
        // Even an untrained bundle must emit grids inside the codec image.
        let world = tiny_world();
        let bundle = tiny_bundle(&world, 10);
        let sample = world.gen_sample(6);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let grid = generate(
            &bundle,
            &sample.semantic,
            &sample.video,
            &[2, 2, 1, 1],
            2.5,
            &mut rng,
        )
        .unwrap();
        assert!(crate::tokens::decode_acoustic(&grid, &world.config.vocab).is_ok());
    }

    #[test]
    fn lower_layers_do_not_depend_on_the_rest_model() {
        let world = tiny_world();
        let bundle = tiny_bundle(&world, 11);
        let sample = world.gen_sample(7);
        let run = |bundle: &AcousticBundle<f32>| {
            let mut rng = ChaCha8Rng::seed_from_u64(55);
            generate(
                bundle,
                &sample.semantic,
                &sample.video,
                &[3, 2, 1, 1],
                2.5,
                &mut rng,
            )
            .unwrap()
        };
        let base = run(&bundle);
        let mut scrambled = bundle.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        for pid in 0..scrambled.rest.params.len() {
            for x in scrambled.rest.params.tensor_mut(pid).data_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        let perturbed = run(&scrambled);
        assert_eq!(
            base.layer(0),
            perturbed.layer(0),
            "layer 1 must not depend on the rest model"
        );
        assert_ne!(
            base.layers()[1..],
            perturbed.layers()[1..],
            "perturbing the rest model must change some upper layer"
        );
    }

    #[test]
    fn wrong_steps_list_length_is_config_error() {
        let world = tiny_world();
        let bundle = tiny_bundle(&world, 12);
        let sample = world.gen_sample(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            generate(
                &bundle,
                &sample.semantic,
                &sample.video,
                &[1, 1],
                2.5,
                &mut rng
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn train_step_runs_and_is_deterministic() {
        let world = tiny_world();
        let samples: Vec<WorldSample> = (0..6).map(|i| world.gen_sample(40 + i)).collect();
        let refs: Vec<&WorldSample> = samples.iter().collect();
        let schedule = MaskSchedule::default();
        let run = || -> Vec<f64> {
            let mut bundle = tiny_bundle(&world, 13);
            let mut opt_first = AdamW::new(AdamWConfig::default(), &bundle.first.params);
            let mut opt_rest = AdamW::new(AdamWConfig::default(), &bundle.rest.params);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut losses = Vec::new();
            for _ in 0..4 {
                losses.push(
                    train_step(&mut bundle.first, &mut opt_first, &refs, &schedule, &mut rng)
                        .unwrap()
                        .loss,
                );
                losses.push(
                    train_step(&mut bundle.rest, &mut opt_rest, &refs, &schedule, &mut rng)
                        .unwrap()
                        .loss,
                );
            }
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_rebinding_validates_config() {
        let world = tiny_world();
        let (first_cfg, _) = tiny_configs(&world);
        let model = AcousticModel::<f32>::init(first_cfg.clone(), 14).unwrap();
        assert!(AcousticModel::from_parameters(first_cfg.clone(), model.params.clone()).is_ok());
        let mut bad = first_cfg;
        bad.vocab.acoustic_vocab_per_layer = 16;
        bad.model.input_vocab = 17;
        bad.model.output_vocab = 16;
        assert!(matches!(
            AcousticModel::from_parameters(bad, model.params.clone()),
            Err(Error::Config(_))
        ));
    }
}
