//! Token vocabularies, sequence types, and the exact codec pair that keeps
//! the synthetic world verifiable.
//!
//! Semantic tokens are a pairing of a speech id and a background id, so both
//! components can be recovered exactly from the fused stream. Acoustic codes
//! are the base-B digits of the semantic id, most significant digit first, so
//! "coarse to fine" is literal: layer 1 carries the most information.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speech id reserved for "no speech active".
pub const SILENCE: u32 = 0;
/// Background id reserved for "no event active".
pub const QUIET: u32 = 0;

/// Nominal token rate of the semantic stream, informational only.
pub const DEFAULT_TOKEN_RATE_HZ: u32 = 50;

/// Sizes of every vocabulary in play plus the optional id scrambling applied
/// before acoustic digit expansion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSpec {
    pub speech_vocab_size: u32,
    pub background_vocab_size: u32,
    /// Number of acoustic layers K.
    pub acoustic_layers: usize,
    /// Per-layer acoustic vocabulary size B.
    pub acoustic_vocab_per_layer: u32,
    /// When set, semantic ids are passed through a seeded permutation before
    /// digit expansion (and after recombination on decode).
    pub scramble_seed: Option<u64>,
}

impl Default for VocabSpec {
    fn default() -> Self {
        VocabSpec {
            speech_vocab_size: 33,
            background_vocab_size: 16,
            acoustic_layers: 4,
            acoustic_vocab_per_layer: 8,
            scramble_seed: None,
        }
    }
}

impl VocabSpec {
    pub fn validate(&self) -> Result<()> {
        if self.speech_vocab_size < 2 || self.background_vocab_size < 1 {
            return Err(Error::Config(
                "speech vocabulary needs silence plus at least one phoneme".into(),
            ));
        }
        if self.acoustic_layers == 0 || self.acoustic_vocab_per_layer < 2 {
            return Err(Error::Config(
                "acoustic code needs at least one layer and a base of at least 2".into(),
            ));
        }
        let capacity = (self.acoustic_vocab_per_layer as u64)
            .checked_pow(self.acoustic_layers as u32)
            .ok_or_else(|| Error::Config("acoustic code capacity overflows".into()))?;
        if capacity < self.semantic_vocab_size() as u64 {
            return Err(Error::Config(format!(
                "acoustic code capacity {} cannot represent {} semantic ids",
                capacity,
                self.semantic_vocab_size()
            )));
        }
        Ok(())
    }

    pub fn semantic_vocab_size(&self) -> u32 {
        self.speech_vocab_size * self.background_vocab_size
    }

    /// Mask sentinel for the semantic stream; appended after the vocabulary.
    pub fn semantic_mask_id(&self) -> u32 {
        self.semantic_vocab_size()
    }

    /// Mask sentinel shared by every acoustic layer.
    pub fn acoustic_mask_id(&self) -> u32 {
        self.acoustic_vocab_per_layer
    }

    /// Forward and inverse scrambling tables, if scrambling is enabled.
    fn scramble_tables(&self) -> Option<(Vec<u32>, Vec<u32>)> {
        let seed = self.scramble_seed?;
        let n = self.semantic_vocab_size() as usize;
        let mut forward: Vec<u32> = (0..n as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        forward.shuffle(&mut rng);
        let mut inverse = vec![0u32; n];
        for (id, &scrambled) in forward.iter().enumerate() {
            inverse[scrambled as usize] = id as u32;
        }
        Some((forward, inverse))
    }
}

/// Unified audio semantic token stream (fused speech + background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticTokenSequence {
    tokens: Vec<u32>,
    rate_hz: u32,
}

impl SemanticTokenSequence {
    pub fn new(tokens: Vec<u32>, vocab: &VocabSpec) -> Result<Self> {
        let limit = vocab.semantic_vocab_size();
        for &id in &tokens {
            if id >= limit {
                return Err(Error::TokenRange {
                    what: "semantic",
                    id,
                    limit,
                });
            }
        }
        Ok(SemanticTokenSequence {
            tokens,
            rate_hz: DEFAULT_TOKEN_RATE_HZ,
        })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn rate_hz(&self) -> u32 {
        self.rate_hz
    }
}

/// Speech-only token stream at the semantic rate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeechTokenSequence {
    tokens: Vec<u32>,
}

impl SpeechTokenSequence {
    pub fn new(tokens: Vec<u32>, vocab: &VocabSpec) -> Result<Self> {
        for &id in &tokens {
            if id >= vocab.speech_vocab_size {
                return Err(Error::TokenRange {
                    what: "speech",
                    id,
                    limit: vocab.speech_vocab_size,
                });
            }
        }
        Ok(SpeechTokenSequence { tokens })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// K-layer acoustic code grid; layer 1 (index 0) is the most significant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcousticTokenGrid {
    layers: Vec<Vec<u32>>,
}

impl AcousticTokenGrid {
    pub fn new(layers: Vec<Vec<u32>>, vocab: &VocabSpec) -> Result<Self> {
        if layers.len() != vocab.acoustic_layers {
            return Err(Error::Shape(format!(
                "expected {} acoustic layers, got {}",
                vocab.acoustic_layers,
                layers.len()
            )));
        }
        let len = layers.first().map_or(0, Vec::len);
        for (k, layer) in layers.iter().enumerate() {
            if layer.len() != len {
                return Err(Error::Shape(format!(
                    "acoustic layer {} has length {}, expected {}",
                    k + 1,
                    layer.len(),
                    len
                )));
            }
            for &id in layer {
                if id >= vocab.acoustic_vocab_per_layer {
                    return Err(Error::TokenRange {
                        what: "acoustic",
                        id,
                        limit: vocab.acoustic_vocab_per_layer,
                    });
                }
            }
        }
        Ok(AcousticTokenGrid { layers })
    }

    pub fn layers(&self) -> &[Vec<u32>] {
        &self.layers
    }

    pub fn layer(&self, k: usize) -> &[u32] {
        &self.layers[k]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-frame continuous video condition vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatureSequence {
    frames: Vec<Vec<f32>>,
    temporal_ratio: usize,
}

impl VideoFeatureSequence {
    pub fn new(frames: Vec<Vec<f32>>, temporal_ratio: usize) -> Result<Self> {
        if temporal_ratio == 0 {
            return Err(Error::Config("temporal ratio must be positive".into()));
        }
        if let Some(first) = frames.first() {
            let dim = first.len();
            if frames.iter().any(|f| f.len() != dim) {
                return Err(Error::Shape(
                    "video frames must all share one dimension".into(),
                ));
            }
        }
        Ok(VideoFeatureSequence {
            frames,
            temporal_ratio,
        })
    }

    pub fn frames(&self) -> &[Vec<f32>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// Semantic tokens per video frame.
    pub fn temporal_ratio(&self) -> usize {
        self.temporal_ratio
    }
}

/// Pair a speech id with a background id into one semantic id.
pub fn fuse_pair(speech_id: u32, background_id: u32, vocab: &VocabSpec) -> Result<u32> {
    if speech_id >= vocab.speech_vocab_size {
        return Err(Error::TokenRange {
            what: "speech",
            id: speech_id,
            limit: vocab.speech_vocab_size,
        });
    }
    if background_id >= vocab.background_vocab_size {
        return Err(Error::TokenRange {
            what: "background",
            id: background_id,
            limit: vocab.background_vocab_size,
        });
    }
    Ok(speech_id * vocab.background_vocab_size + background_id)
}

/// Recover the (speech, background) pair from a semantic id.
pub fn split_semantic(semantic_id: u32, vocab: &VocabSpec) -> Result<(u32, u32)> {
    if semantic_id >= vocab.semantic_vocab_size() {
        return Err(Error::TokenRange {
            what: "semantic",
            id: semantic_id,
            limit: vocab.semantic_vocab_size(),
        });
    }
    Ok((
        semantic_id / vocab.background_vocab_size,
        semantic_id % vocab.background_vocab_size,
    ))
}

/// Expand each semantic id into K base-B digits, most significant first.
pub fn encode_acoustic(
    semantic: &SemanticTokenSequence,
    vocab: &VocabSpec,
) -> Result<AcousticTokenGrid> {
    vocab.validate()?;
    let scramble = vocab.scramble_tables();
    let base = vocab.acoustic_vocab_per_layer;
    let layers_n = vocab.acoustic_layers;
    let mut layers = vec![Vec::with_capacity(semantic.len()); layers_n];
    for &id in semantic.tokens() {
        let coded = match &scramble {
            Some((forward, _)) => forward[id as usize],
            None => id,
        };
        let mut rem = coded;
        for k in (0..layers_n).rev() {
            layers[k].push(rem % base);
            rem /= base;
        }
    }
    debug_assert!(layers.iter().all(|l| l.len() == semantic.len()));
    AcousticTokenGrid::new(layers, vocab)
}

/// Exact inverse of [`encode_acoustic`]. Rejects code words that do not
/// correspond to any semantic id.
pub fn decode_acoustic(grid: &AcousticTokenGrid, vocab: &VocabSpec) -> Result<SemanticTokenSequence> {
    vocab.validate()?;
    if grid.num_layers() != vocab.acoustic_layers {
        return Err(Error::Shape(format!(
            "grid has {} layers, vocabulary expects {}",
            grid.num_layers(),
            vocab.acoustic_layers
        )));
    }
    let scramble = vocab.scramble_tables();
    let base = vocab.acoustic_vocab_per_layer;
    let limit = vocab.semantic_vocab_size();
    let mut tokens = Vec::with_capacity(grid.len());
    for pos in 0..grid.len() {
        let mut value: u32 = 0;
        for layer in grid.layers() {
            value = value * base + layer[pos];
        }
        if value >= limit {
            return Err(Error::NonImageCode {
                position: pos,
                recombined: value,
                limit,
            });
        }
        let id = match &scramble {
            Some((_, inverse)) => inverse[value as usize],
            None => value,
        };
        tokens.push(id);
    }
    SemanticTokenSequence::new(tokens, vocab)
}
