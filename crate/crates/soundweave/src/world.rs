//! Procedural generator of paired (video, speech, background, semantic,
//! acoustic, transcript) samples with exact oracles.
//!
//! Speech placement is independent of background events by construction, so
//! splitting the fused semantic stream recovers both components exactly. The
//! background track drives the video: each frame is its active event's
//! embedding plus Gaussian noise. A fixed lexicon plus run-length transcript
//! oracle stands in for an ASR system, and positionwise semantic splitting
//! stands in for the frozen speech-token extractor.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokens::{
    decode_acoustic, encode_acoustic, fuse_pair, split_semantic, AcousticTokenGrid,
    SemanticTokenSequence, SpeechTokenSequence, VideoFeatureSequence, VocabSpec, SILENCE,
};

const DATASET_MAGIC: &[u8; 4] = b"SWDS";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub vocab: VocabSpec,
    /// Semantic tokens per sample.
    pub t_sem: usize,
    /// Video frames per sample.
    pub t_v: usize,
    /// Video feature dimension.
    pub video_dim: usize,
    pub lexicon_size: usize,
    pub word_len_min: usize,
    pub word_len_max: usize,
    pub words_min: usize,
    pub words_max: usize,
    /// Minimum silence tokens between adjacent words.
    pub min_word_gap: usize,
    pub segments_min: usize,
    pub segments_max: usize,
    pub video_noise_sigma: f64,
    pub master_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            vocab: VocabSpec::default(),
            t_sem: 100,
            t_v: 10,
            video_dim: 16,
            lexicon_size: 50,
            word_len_min: 3,
            word_len_max: 6,
            words_min: 0,
            words_max: 3,
            min_word_gap: 2,
            segments_min: 1,
            segments_max: 4,
            video_noise_sigma: 0.1,
            master_seed: 42,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.t_v == 0 || self.t_sem == 0 || self.t_sem % self.t_v != 0 {
            return Err(Error::Config(format!(
                "t_sem ({}) must be a positive multiple of t_v ({})",
                self.t_sem, self.t_v
            )));
        }
        if self.video_dim == 0 {
            return Err(Error::Config("video_dim must be positive".into()));
        }
        if self.lexicon_size == 0 {
            return Err(Error::Config("lexicon must not be empty".into()));
        }
        if self.word_len_min == 0 || self.word_len_min > self.word_len_max {
            return Err(Error::Config("word length range is empty".into()));
        }
        if self.words_min > self.words_max {
            return Err(Error::Config("words-per-sample range is empty".into()));
        }
        if self.segments_min == 0
            || self.segments_min > self.segments_max
            || self.segments_max > self.t_v
        {
            return Err(Error::Config(format!(
                "segment count range {}..={} must be non-empty and at most t_v ({})",
                self.segments_min, self.segments_max, self.t_v
            )));
        }
        if self.video_noise_sigma < 0.0 {
            return Err(Error::Config("video noise sigma must be non-negative".into()));
        }
        // Enough phoneme variety to fill a lexicon of distinct words.
        if self.vocab.speech_vocab_size < 3 {
            return Err(Error::Config(
                "speech vocabulary too small for a lexicon".into(),
            ));
        }
        Ok(())
    }

    /// Semantic tokens per video frame.
    pub fn temporal_ratio(&self) -> usize {
        self.t_sem / self.t_v
    }
}

/// One fully paired sample.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldSample {
    pub video: VideoFeatureSequence,
    pub speech: SpeechTokenSequence,
    pub background: Vec<u32>,
    pub semantic: SemanticTokenSequence,
    pub acoustic: AcousticTokenGrid,
    pub transcript: Vec<u32>,
    /// Video-frame indices where the background event changes.
    pub event_onsets: Vec<usize>,
}

/// A world is a config plus the tables derived from its master seed: the
/// word lexicon and the per-event video embedding vectors.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    lexicon: Vec<Vec<u32>>,
    lexicon_index: HashMap<Vec<u32>, u32>,
    event_vectors: Vec<Vec<f32>>,
}

/// Word id returned by the transcript oracle for phoneme runs that match no
/// lexicon word.
pub fn unk_word_id(config: &WorldConfig) -> u32 {
    config.lexicon_size as u32
}

impl World {
    pub fn new(config: WorldConfig) -> Result<World> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.master_seed, 0x6c65_7869));
        let mut lexicon = Vec::with_capacity(config.lexicon_size);
        let mut seen = std::collections::HashSet::new();
        while lexicon.len() < config.lexicon_size {
            let len = rng.gen_range(config.word_len_min..=config.word_len_max);
            let word: Vec<u32> = (0..len)
                .map(|_| rng.gen_range(1..config.vocab.speech_vocab_size))
                .collect();
            if seen.insert(word.clone()) {
                lexicon.push(word);
            }
        }
        let mut lexicon_index = HashMap::new();
        for (id, word) in lexicon.iter().enumerate() {
            lexicon_index.insert(word.clone(), id as u32);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.master_seed, 0x6576_656e));
        let event_vectors = (0..config.vocab.background_vocab_size)
            .map(|_| {
                (0..config.video_dim)
                    .map(|_| {
                        let x: f64 = rng.sample(rand_distr::StandardNormal);
                        x as f32
                    })
                    .collect()
            })
            .collect();
        Ok(World {
            config,
            lexicon,
            lexicon_index,
            event_vectors,
        })
    }

    pub fn lexicon(&self) -> &[Vec<u32>] {
        &self.lexicon
    }

    pub fn event_vectors(&self) -> &[Vec<f32>] {
        &self.event_vectors
    }

    /// Deterministic sample generation: same (config, seed) gives the same
    /// sample bit for bit.
    pub fn gen_sample(&self, sample_seed: u64) -> WorldSample {
        let cfg = &self.config;
        let vocab = &cfg.vocab;
        let r = cfg.temporal_ratio();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);

        // Background segments with boundaries on video-frame multiples and
        // adjacent segments always distinct, so every boundary is an onset.
        let n_segments = rng.gen_range(cfg.segments_min..=cfg.segments_max);
        let mut cuts: Vec<usize> = (1..cfg.t_v).collect();
        cuts.shuffle(&mut rng);
        let mut cuts: Vec<usize> = cuts.into_iter().take(n_segments - 1).collect();
        cuts.sort_unstable();
        let mut segment_ids = Vec::with_capacity(n_segments);
        let first = rng.gen_range(0..vocab.background_vocab_size);
        segment_ids.push(first);
        for _ in 1..n_segments {
            let prev = *segment_ids.last().unwrap();
            let offset = rng.gen_range(1..vocab.background_vocab_size);
            segment_ids.push((prev + offset) % vocab.background_vocab_size);
        }
        let mut frame_event = Vec::with_capacity(cfg.t_v);
        let mut seg = 0;
        for f in 0..cfg.t_v {
            while seg < cuts.len() && f >= cuts[seg] {
                seg += 1;
            }
            frame_event.push(segment_ids[seg]);
        }
        let background: Vec<u32> = (0..cfg.t_sem).map(|p| frame_event[p / r]).collect();

        // Independent speech placement: words, then a random split of the
        // remaining silence across the gaps.
        let mut n_words = rng.gen_range(cfg.words_min..=cfg.words_max);
        let mut words: Vec<u32> = (0..n_words)
            .map(|_| rng.gen_range(0..cfg.lexicon_size as u32))
            .collect();
        loop {
            let needed: usize = words
                .iter()
                .map(|&w| self.lexicon[w as usize].len())
                .sum::<usize>()
                + cfg.min_word_gap * words.len().saturating_sub(1);
            if needed <= cfg.t_sem {
                break;
            }
            words.pop();
        }
        n_words = words.len();
        let used: usize = words
            .iter()
            .map(|&w| self.lexicon[w as usize].len())
            .sum::<usize>()
            + cfg.min_word_gap * n_words.saturating_sub(1);
        let slack = cfg.t_sem - used;
        let mut extra = vec![0usize; n_words + 1];
        for _ in 0..slack {
            let bucket = rng.gen_range(0..extra.len());
            extra[bucket] += 1;
        }
        let mut speech = vec![SILENCE; cfg.t_sem];
        let mut pos = extra[0];
        for (i, &w) in words.iter().enumerate() {
            for &ph in &self.lexicon[w as usize] {
                speech[pos] = ph;
                pos += 1;
            }
            if i + 1 < n_words {
                pos += cfg.min_word_gap + extra[i + 1];
            }
        }

        // Video frames follow the active event vector plus noise.
        let sigma = cfg.video_noise_sigma;
        let frames: Vec<Vec<f32>> = (0..cfg.t_v)
            .map(|f| {
                let base = &self.event_vectors[frame_event[f] as usize];
                (0..cfg.video_dim)
                    .map(|d| {
                        let noise: f64 = rng.sample(rand_distr::StandardNormal);
                        base[d] + (sigma * noise) as f32
                    })
                    .collect()
            })
            .collect();

        let semantic_tokens: Vec<u32> = speech
            .iter()
            .zip(&background)
            .map(|(&s, &b)| fuse_pair(s, b, vocab).expect("generated ids are in range"))
            .collect();
        let semantic = SemanticTokenSequence::new(semantic_tokens, vocab).unwrap();
        let acoustic = encode_acoustic(&semantic, vocab).unwrap();

        WorldSample {
            video: VideoFeatureSequence::new(frames, r).unwrap(),
            speech: SpeechTokenSequence::new(speech, vocab).unwrap(),
            background,
            semantic,
            acoustic,
            transcript: words,
            event_onsets: cuts,
        }
    }

    /// Transcript oracle: split the speech stream on silence runs and map
    /// each maximal phoneme run to its unique lexicon word, or UNK.
    pub fn oracle_transcribe(&self, speech: &SpeechTokenSequence) -> Vec<u32> {
        let unk = unk_word_id(&self.config);
        let mut words = Vec::new();
        let mut run: Vec<u32> = Vec::new();
        for &tok in speech.tokens().iter().chain(std::iter::once(&SILENCE)) {
            if tok == SILENCE {
                if !run.is_empty() {
                    words.push(*self.lexicon_index.get(&run).unwrap_or(&unk));
                    run.clear();
                }
            } else {
                run.push(tok);
            }
        }
        words
    }

    /// Deterministic transcript-to-speech-token oracle: words left-aligned
    /// after a fixed leading silence, separated by the minimum gap.
    pub fn speech_tokens_for_transcript(&self, words: &[u32]) -> Result<SpeechTokenSequence> {
        const LEADING_SILENCE: usize = 5;
        let cfg = &self.config;
        for &w in words {
            if w as usize >= self.lexicon.len() {
                return Err(Error::Input(format!(
                    "transcript word {w} outside the lexicon (size {})",
                    self.lexicon.len()
                )));
            }
        }
        let needed: usize = LEADING_SILENCE
            + words
                .iter()
                .map(|&w| self.lexicon[w as usize].len())
                .sum::<usize>()
            + cfg.min_word_gap * words.len().saturating_sub(1);
        if needed > cfg.t_sem {
            return Err(Error::Input(format!(
                "transcript needs {needed} tokens but samples are {} long",
                cfg.t_sem
            )));
        }
        let mut speech = vec![SILENCE; cfg.t_sem];
        let mut pos = LEADING_SILENCE;
        for (i, &w) in words.iter().enumerate() {
            for &ph in &self.lexicon[w as usize] {
                speech[pos] = ph;
                pos += 1;
            }
            if i + 1 < words.len() {
                pos += cfg.min_word_gap;
            }
        }
        SpeechTokenSequence::new(speech, &cfg.vocab)
    }

    /// Classify a video frame by its nearest event vector.
    pub fn nearest_event(&self, frame: &[f32]) -> u32 {
        let mut best = 0u32;
        let mut best_dist = f64::INFINITY;
        for (id, vec) in self.event_vectors.iter().enumerate() {
            let dist: f64 = vec
                .iter()
                .zip(frame)
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best = id as u32;
            }
        }
        best
    }
}

/// Simulates the frozen speech-token extractor exactly: positionwise split of
/// the fused semantic stream, keeping the speech component.
pub fn oracle_speech_extract(
    semantic: &SemanticTokenSequence,
    vocab: &VocabSpec,
) -> Result<SpeechTokenSequence> {
    let mut speech = Vec::with_capacity(semantic.len());
    for &id in semantic.tokens() {
        speech.push(split_semantic(id, vocab)?.0);
    }
    SpeechTokenSequence::new(speech, vocab)
}

/// Positionwise background component of the fused semantic stream.
pub fn oracle_background_extract(
    semantic: &SemanticTokenSequence,
    vocab: &VocabSpec,
) -> Result<Vec<u32>> {
    semantic
        .tokens()
        .iter()
        .map(|&id| split_semantic(id, vocab).map(|(_, b)| b))
        .collect()
}

/// Semantic-frame indices where the background id changes; position 0 is
/// never an onset.
pub fn extract_event_onsets(background: &[u32]) -> Vec<usize> {
    background
        .windows(2)
        .enumerate()
        .filter_map(|(i, w)| (w[0] != w[1]).then_some(i + 1))
        .collect()
}

/// Per-sample seed derived from the master seed so generation is
/// order-independent and parallelizable.
pub fn sample_seed(master_seed: u64, index: u64) -> u64 {
    mix_seed(master_seed, index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1))
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined value.
    let mut z = a ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// In-memory dataset: the manifest fields plus every sample.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: WorldConfig,
    pub samples: Vec<WorldSample>,
}

/// Pearson chi-square statistic of (words per sample) against (first
/// background event id). Speech and background are independent by
/// construction; this is a non-binding sanity statistic reported at
/// generation time.
pub fn speech_background_chi_square(samples: &[WorldSample]) -> (f64, usize) {
    if samples.is_empty() {
        return (0.0, 0);
    }
    let n_word_buckets = samples
        .iter()
        .map(|s| s.transcript.len())
        .max()
        .unwrap_or(0)
        + 1;
    let n_events = samples
        .iter()
        .map(|s| s.background[0] as usize)
        .max()
        .unwrap_or(0)
        + 1;
    let mut table = vec![vec![0usize; n_events]; n_word_buckets];
    for s in samples {
        table[s.transcript.len()][s.background[0] as usize] += 1;
    }
    let total = samples.len() as f64;
    let row_sums: Vec<f64> = table
        .iter()
        .map(|r| r.iter().sum::<usize>() as f64)
        .collect();
    let col_sums: Vec<f64> = (0..n_events)
        .map(|c| table.iter().map(|r| r[c]).sum::<usize>() as f64)
        .collect();
    let mut stat = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let expected = row_sums[i] * col_sums[j] / total;
            if expected > 0.0 {
                let d = obs as f64 - expected;
                stat += d * d / expected;
            }
        }
    }
    let dof = (n_word_buckets.saturating_sub(1)) * (n_events.saturating_sub(1));
    (stat, dof)
}

/// Generate `n` samples and persist them. Per-sample seeds come from
/// [`sample_seed`], so the output is byte-identical for any worker count.
pub fn gen_dataset(config: &WorldConfig, n: usize, path: &Path) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Input("dataset needs at least one sample".into()));
    }
    let world = World::new(config.clone())?;
    let samples: Vec<WorldSample> = (0..n as u64)
        .into_par_iter()
        .map(|i| world.gen_sample(sample_seed(config.master_seed, i)))
        .collect();
    let dataset = Dataset {
        config: config.clone(),
        samples,
    };
    fs::write(path, encode_dataset(&dataset)?)?;
    Ok(dataset)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    decode_dataset(&bytes)
}

/// Hash of the serialized world config, reported in evaluation output.
pub fn config_hash(config: &WorldConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&dataset.config)
        .map_err(|e| Error::Integrity(format!("config serialization failed: {e}")))?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(dataset.samples.len() as u64).to_le_bytes());
    buf.extend_from_slice(&dataset.config.master_seed.to_le_bytes());
    for sample in &dataset.samples {
        let mut flat_video = Vec::with_capacity(dataset.config.t_v * dataset.config.video_dim);
        for frame in sample.video.frames() {
            flat_video.extend_from_slice(frame);
        }
        write_f32_list(&mut buf, &flat_video);
        write_u32_list(&mut buf, sample.speech.tokens());
        write_u32_list(&mut buf, &sample.background);
        write_u32_list(&mut buf, sample.semantic.tokens());
        for layer in sample.acoustic.layers() {
            write_u32_list(&mut buf, layer);
        }
        write_u32_list(&mut buf, &sample.transcript);
        let onsets: Vec<u32> = sample.event_onsets.iter().map(|&o| o as u32).collect();
        write_u32_list(&mut buf, &onsets);
    }
    Ok(buf)
}

fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = ByteCursor::new(bytes);
    let magic = cur.take(4)?;
    if magic != DATASET_MAGIC {
        return Err(Error::Input("not a dataset file".into()));
    }
    let version = cur.take_u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Config(format!(
            "unsupported dataset format version {version}"
        )));
    }
    let config_len = cur.take_u32()? as usize;
    let config: WorldConfig = serde_json::from_slice(cur.take(config_len)?)
        .map_err(|e| Error::Config(format!("dataset manifest config invalid: {e}")))?;
    config.validate()?;
    let n = cur.take_u64()? as usize;
    let manifest_seed = cur.take_u64()?;
    if manifest_seed != config.master_seed {
        return Err(Error::Config(format!(
            "manifest seed {manifest_seed} disagrees with config seed {}",
            config.master_seed
        )));
    }
    let vocab = &config.vocab;
    let r = config.temporal_ratio();
    let mut samples = Vec::with_capacity(n);
    for idx in 0..n {
        let video_flat = cur.take_f32_list()?;
        if video_flat.len() != config.t_v * config.video_dim {
            return Err(Error::Config(format!(
                "sample {idx}: video has {} floats, expected {}",
                video_flat.len(),
                config.t_v * config.video_dim
            )));
        }
        let frames: Vec<Vec<f32>> = video_flat
            .chunks_exact(config.video_dim)
            .map(|c| c.to_vec())
            .collect();
        let speech = cur.take_u32_list()?;
        let background = cur.take_u32_list()?;
        let semantic = cur.take_u32_list()?;
        let mut layers = Vec::with_capacity(vocab.acoustic_layers);
        for _ in 0..vocab.acoustic_layers {
            layers.push(cur.take_u32_list()?);
        }
        let transcript = cur.take_u32_list()?;
        let onsets = cur.take_u32_list()?;
        if speech.len() != config.t_sem
            || background.len() != config.t_sem
            || semantic.len() != config.t_sem
        {
            return Err(Error::Config(format!(
                "sample {idx}: token streams disagree with t_sem = {}",
                config.t_sem
            )));
        }
        samples.push(WorldSample {
            video: VideoFeatureSequence::new(frames, r)?,
            speech: SpeechTokenSequence::new(speech, vocab)?,
            background,
            semantic: SemanticTokenSequence::new(semantic, vocab)?,
            acoustic: AcousticTokenGrid::new(layers, vocab)?,
            transcript,
            event_onsets: onsets.into_iter().map(|o| o as usize).collect(),
        });
    }
    if !cur.at_end() {
        return Err(Error::Input("trailing bytes after dataset records".into()));
    }
    Ok(Dataset { config, samples })
}

fn write_u32_list(buf: &mut Vec<u8>, values: &[u32]) {
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_f32_list(buf: &mut Vec<u8>, values: &[f32]) {
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteCursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Input("dataset file ends early".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn take_u32_list(&mut self) -> Result<Vec<u32>> {
        let len = self.take_u32()? as usize;
        let bytes = self.take(len * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn take_f32_list(&mut self) -> Result<Vec<f32>> {
        let len = self.take_u32()? as usize;
        let bytes = self.take(len * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Check every structural invariant of a sample against its world.
pub fn check_sample_invariants(world: &World, sample: &WorldSample) -> Result<()> {
    let cfg = &world.config;
    let vocab = &cfg.vocab;
    for (pos, (&sem, (&sp, &bg))) in sample
        .semantic
        .tokens()
        .iter()
        .zip(sample.speech.tokens().iter().zip(&sample.background))
        .enumerate()
    {
        if fuse_pair(sp, bg, vocab)? != sem {
            return Err(Error::Domain(format!(
                "semantic token at {pos} is not the fusion of its parts"
            )));
        }
    }
    let decoded = decode_acoustic(&sample.acoustic, vocab)?;
    if decoded != sample.semantic {
        return Err(Error::Domain("acoustic grid does not decode to semantic".into()));
    }
    if world.oracle_transcribe(&sample.speech) != sample.transcript {
        return Err(Error::Domain("transcript oracle disagrees".into()));
    }
    let onsets = extract_event_onsets(&sample.background);
    let expected: Vec<usize> = sample
        .event_onsets
        .iter()
        .map(|&f| f * cfg.temporal_ratio())
        .collect();
    if onsets != expected {
        return Err(Error::Domain("onsets disagree with segment boundaries".into()));
    }
    Ok(())
}
