//! Run configuration: one struct covering the world, both stages, the
//! optimizer, training, and decoding, parsed from a line-oriented
//! `section.key = value` text format.
//!
//! Every key has a default; unknown keys are rejected; serialization is
//! canonical, so `parse(serialize(c)) == c`.

use crate::acoustic::{AcousticModelKind, AcousticStageConfig};
use crate::error::{Error, Result};
use crate::nn::model::ModelConfig;
use crate::nn::optim::AdamWConfig;
use crate::semantic::SemanticStageConfig;
use crate::world::WorldConfig;

/// Architecture knobs for one stage model.
#[derive(Clone, Debug, PartialEq)]
pub struct StageModelConfig {
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub feedforward_dim: usize,
    pub cross_attention_positions: Vec<usize>,
    pub condition_dropout: f64,
}

impl StageModelConfig {
    fn semantic_default() -> Self {
        StageModelConfig {
            depth: 4,
            model_dim: 64,
            heads: 4,
            feedforward_dim: 256,
            cross_attention_positions: vec![3, 4],
            condition_dropout: 0.1,
        }
    }

    fn acoustic_default() -> Self {
        StageModelConfig {
            depth: 4,
            model_dim: 64,
            heads: 4,
            feedforward_dim: 256,
            cross_attention_positions: vec![],
            condition_dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub log_every: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// Samples held out from the end of the dataset for evaluation.
    pub heldout: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            steps: 3000,
            log_every: 50,
            eval_every: 500,
            checkpoint_every: 1000,
            heldout: 100,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSettings {
    pub v2as_steps: usize,
    pub v2as_cfg_scale: f64,
    pub vs2a_steps: Vec<usize>,
    pub vs2a_cfg_scale: f64,
    pub seed: u64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            v2as_steps: 16,
            v2as_cfg_scale: 5.0,
            vs2a_steps: vec![20, 10, 1, 1],
            vs2a_cfg_scale: 2.5,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathDefaults {
    pub dataset: Option<String>,
    pub v2as_checkpoint: Option<String>,
    pub vs2a_checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub v2as: StageModelConfig,
    pub vs2a_first: StageModelConfig,
    pub vs2a_rest: StageModelConfig,
    pub optim: AdamWConfig,
    pub train: TrainConfig,
    pub decode: DecodeSettings,
    pub paths: PathDefaults,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldConfig::default(),
            v2as: StageModelConfig::semantic_default(),
            vs2a_first: StageModelConfig::acoustic_default(),
            vs2a_rest: StageModelConfig::acoustic_default(),
            optim: AdamWConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeSettings::default(),
            paths: PathDefaults::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.semantic_stage_config()?.validate()?;
        self.acoustic_stage_config(AcousticModelKind::First)?.validate()?;
        self.acoustic_stage_config(AcousticModelKind::Rest)?.validate()?;
        if self.train.batch_size == 0 || self.train.steps == 0 {
            return Err(Error::Config("batch size and steps must be positive".into()));
        }
        if self.train.log_every == 0 || self.train.eval_every == 0 || self.train.checkpoint_every == 0
        {
            return Err(Error::Config("logging cadences must be positive".into()));
        }
        if self.decode.v2as_steps == 0 {
            return Err(Error::Config("decoding needs at least one step".into()));
        }
        if self.decode.vs2a_steps.len() != self.world.vocab.acoustic_layers {
            return Err(Error::Config(format!(
                "vs2a step list has {} entries, need {}",
                self.decode.vs2a_steps.len(),
                self.world.vocab.acoustic_layers
            )));
        }
        if self.decode.vs2a_steps.iter().any(|&s| s == 0) {
            return Err(Error::Config("every layer needs at least one step".into()));
        }
        Ok(())
    }

    pub fn semantic_stage_config(&self) -> Result<SemanticStageConfig> {
        let semantic = self.world.vocab.semantic_vocab_size() as usize;
        let cfg = SemanticStageConfig {
            model: ModelConfig {
                depth: self.v2as.depth,
                model_dim: self.v2as.model_dim,
                heads: self.v2as.heads,
                feedforward_dim: self.v2as.feedforward_dim,
                cross_attention_positions: self.v2as.cross_attention_positions.clone(),
                input_vocab: semantic + 1,
                output_vocab: semantic,
                max_sequence_length: self.world.t_v + self.world.t_sem,
                condition_dropout_prob: self.v2as.condition_dropout,
            },
            vocab: self.world.vocab.clone(),
            t_sem: self.world.t_sem,
            t_v: self.world.t_v,
            video_dim: self.world.video_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn acoustic_stage_config(&self, kind: AcousticModelKind) -> Result<AcousticStageConfig> {
        let stage = match kind {
            AcousticModelKind::First => &self.vs2a_first,
            AcousticModelKind::Rest => &self.vs2a_rest,
        };
        let base = self.world.vocab.acoustic_vocab_per_layer as usize;
        let cfg = AcousticStageConfig {
            model: ModelConfig {
                depth: stage.depth,
                model_dim: stage.model_dim,
                heads: stage.heads,
                feedforward_dim: stage.feedforward_dim,
                cross_attention_positions: stage.cross_attention_positions.clone(),
                input_vocab: base + 1,
                output_vocab: base,
                max_sequence_length: self.world.t_v + self.world.t_sem,
                condition_dropout_prob: stage.condition_dropout,
            },
            kind,
            vocab: self.world.vocab.clone(),
            t_sem: self.world.t_sem,
            t_v: self.world.t_v,
            video_dim: self.world.video_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        push("world.speech_vocab", self.world.vocab.speech_vocab_size.to_string());
        push(
            "world.background_vocab",
            self.world.vocab.background_vocab_size.to_string(),
        );
        push("world.acoustic_layers", self.world.vocab.acoustic_layers.to_string());
        push(
            "world.acoustic_vocab",
            self.world.vocab.acoustic_vocab_per_layer.to_string(),
        );
        push("world.scramble_seed", opt_u64(self.world.vocab.scramble_seed));
        push("world.t_sem", self.world.t_sem.to_string());
        push("world.t_v", self.world.t_v.to_string());
        push("world.video_dim", self.world.video_dim.to_string());
        push("world.lexicon_size", self.world.lexicon_size.to_string());
        push("world.word_len_min", self.world.word_len_min.to_string());
        push("world.word_len_max", self.world.word_len_max.to_string());
        push("world.words_min", self.world.words_min.to_string());
        push("world.words_max", self.world.words_max.to_string());
        push("world.min_word_gap", self.world.min_word_gap.to_string());
        push("world.segments_min", self.world.segments_min.to_string());
        push("world.segments_max", self.world.segments_max.to_string());
        push("world.video_noise_sigma", self.world.video_noise_sigma.to_string());
        push("world.seed", self.world.master_seed.to_string());
        for (section, stage) in [
            ("v2as", &self.v2as),
            ("vs2a_first", &self.vs2a_first),
            ("vs2a_rest", &self.vs2a_rest),
        ] {
            push(&format!("{section}.depth"), stage.depth.to_string());
            push(&format!("{section}.model_dim"), stage.model_dim.to_string());
            push(&format!("{section}.heads"), stage.heads.to_string());
            push(
                &format!("{section}.feedforward_dim"),
                stage.feedforward_dim.to_string(),
            );
            push(
                &format!("{section}.cross_attention_positions"),
                list_usize(&stage.cross_attention_positions),
            );
            push(
                &format!("{section}.condition_dropout"),
                stage.condition_dropout.to_string(),
            );
        }
        push("optim.learning_rate", self.optim.learning_rate.to_string());
        push("optim.beta1", self.optim.beta1.to_string());
        push("optim.beta2", self.optim.beta2.to_string());
        push("optim.eps", self.optim.eps.to_string());
        push("optim.weight_decay", self.optim.weight_decay.to_string());
        push("optim.warmup_steps", self.optim.warmup_steps.to_string());
        push("train.batch_size", self.train.batch_size.to_string());
        push("train.steps", self.train.steps.to_string());
        push("train.log_every", self.train.log_every.to_string());
        push("train.eval_every", self.train.eval_every.to_string());
        push("train.checkpoint_every", self.train.checkpoint_every.to_string());
        push("train.heldout", self.train.heldout.to_string());
        push("train.seed", self.train.seed.to_string());
        push("decode.v2as_steps", self.decode.v2as_steps.to_string());
        push("decode.v2as_cfg_scale", self.decode.v2as_cfg_scale.to_string());
        push("decode.vs2a_steps", list_usize(&self.decode.vs2a_steps));
        push("decode.vs2a_cfg_scale", self.decode.vs2a_cfg_scale.to_string());
        push("decode.seed", self.decode.seed.to_string());
        push("paths.dataset", opt_str(&self.paths.dataset));
        push("paths.v2as_checkpoint", opt_str(&self.paths.v2as_checkpoint));
        push("paths.vs2a_checkpoint", opt_str(&self.paths.vs2a_checkpoint));
        out
    }

    /// Parse overrides on top of the defaults. Lines are `key = value`;
    /// blank lines and `#` comments are allowed; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            config
                .apply(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_text(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "world.speech_vocab" => self.world.vocab.speech_vocab_size = parse(key, value)?,
            "world.background_vocab" => self.world.vocab.background_vocab_size = parse(key, value)?,
            "world.acoustic_layers" => self.world.vocab.acoustic_layers = parse(key, value)?,
            "world.acoustic_vocab" => {
                self.world.vocab.acoustic_vocab_per_layer = parse(key, value)?
            }
            "world.scramble_seed" => self.world.vocab.scramble_seed = parse_opt_u64(key, value)?,
            "world.t_sem" => self.world.t_sem = parse(key, value)?,
            "world.t_v" => self.world.t_v = parse(key, value)?,
            "world.video_dim" => self.world.video_dim = parse(key, value)?,
            "world.lexicon_size" => self.world.lexicon_size = parse(key, value)?,
            "world.word_len_min" => self.world.word_len_min = parse(key, value)?,
            "world.word_len_max" => self.world.word_len_max = parse(key, value)?,
            "world.words_min" => self.world.words_min = parse(key, value)?,
            "world.words_max" => self.world.words_max = parse(key, value)?,
            "world.min_word_gap" => self.world.min_word_gap = parse(key, value)?,
            "world.segments_min" => self.world.segments_min = parse(key, value)?,
            "world.segments_max" => self.world.segments_max = parse(key, value)?,
            "world.video_noise_sigma" => self.world.video_noise_sigma = parse(key, value)?,
            "world.seed" => self.world.master_seed = parse(key, value)?,
            _ if key.starts_with("v2as.") => {
                apply_stage(&mut self.v2as, key, &key["v2as.".len()..], value)?
            }
            _ if key.starts_with("vs2a_first.") => {
                apply_stage(&mut self.vs2a_first, key, &key["vs2a_first.".len()..], value)?
            }
            _ if key.starts_with("vs2a_rest.") => {
                apply_stage(&mut self.vs2a_rest, key, &key["vs2a_rest.".len()..], value)?
            }
            "optim.learning_rate" => self.optim.learning_rate = parse(key, value)?,
            "optim.beta1" => self.optim.beta1 = parse(key, value)?,
            "optim.beta2" => self.optim.beta2 = parse(key, value)?,
            "optim.eps" => self.optim.eps = parse(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, value)?,
            "optim.warmup_steps" => self.optim.warmup_steps = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.steps" => self.train.steps = parse(key, value)?,
            "train.log_every" => self.train.log_every = parse(key, value)?,
            "train.eval_every" => self.train.eval_every = parse(key, value)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, value)?,
            "train.heldout" => self.train.heldout = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "decode.v2as_steps" => self.decode.v2as_steps = parse(key, value)?,
            "decode.v2as_cfg_scale" => self.decode.v2as_cfg_scale = parse(key, value)?,
            "decode.vs2a_steps" => self.decode.vs2a_steps = parse_list(key, value)?,
            "decode.vs2a_cfg_scale" => self.decode.vs2a_cfg_scale = parse(key, value)?,
            "decode.seed" => self.decode.seed = parse(key, value)?,
            "paths.dataset" => self.paths.dataset = parse_opt_str(value),
            "paths.v2as_checkpoint" => self.paths.v2as_checkpoint = parse_opt_str(value),
            "paths.vs2a_checkpoint" => self.paths.vs2a_checkpoint = parse_opt_str(value),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Hash of the canonical text form, reported in evaluation output.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn apply_stage(stage: &mut StageModelConfig, full_key: &str, key: &str, value: &str) -> Result<()> {
    match key {
        "depth" => stage.depth = parse(full_key, value)?,
        "model_dim" => stage.model_dim = parse(full_key, value)?,
        "heads" => stage.heads = parse(full_key, value)?,
        "feedforward_dim" => stage.feedforward_dim = parse(full_key, value)?,
        "cross_attention_positions" => {
            stage.cross_attention_positions = parse_list(full_key, value)?
        }
        "condition_dropout" => stage.condition_dropout = parse(full_key, value)?,
        _ => return Err(Error::Config(format!("unknown key '{full_key}'"))),
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| parse(key, part.trim()))
        .collect()
}

fn parse_opt_u64(key: &str, value: &str) -> Result<Option<u64>> {
    if value == "none" {
        Ok(None)
    } else {
        Ok(Some(parse(key, value)?))
    }
}

fn parse_opt_str(value: &str) -> Option<String> {
    if value == "none" || value.is_empty() {
        None
    } else {
        Some(value.to_string())
    }
}

fn opt_u64(value: Option<u64>) -> String {
    value.map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn opt_str(value: &Option<String>) -> String {
    value.clone().unwrap_or_else(|| "none".to_string())
}

fn list_usize(values: &[usize]) -> String {
    values
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let text = config.to_text();
        let parsed = RunConfig::from_text(&text).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn roundtrip_survives_overrides() {
        let mut config = RunConfig::default();
        config.world.t_sem = 60;
        config.world.t_v = 6;
        config.world.vocab.scramble_seed = Some(99);
        config.v2as.cross_attention_positions = vec![2, 3, 4];
        config.decode.vs2a_steps = vec![8, 4, 2, 1];
        config.optim.learning_rate = 3.5e-4;
        config.paths.dataset = Some("data/train.swds".into());
        config.validate().unwrap();
        let parsed = RunConfig::from_text(&config.to_text()).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn paper_inference_defaults_are_shipped() {
        let config = RunConfig::default();
        assert_eq!(config.decode.v2as_steps, 16);
        assert_eq!(config.decode.v2as_cfg_scale, 5.0);
        assert_eq!(config.decode.vs2a_steps, vec![20, 10, 1, 1]);
        assert_eq!(config.decode.vs2a_cfg_scale, 2.5);
        assert_eq!(config.train.batch_size, 32);
        assert_eq!(config.optim.learning_rate, 2e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_text("world.flux_capacitor = 11\n").unwrap_err();
        assert!(err.to_string().contains("flux_capacitor"));
        assert!(RunConfig::from_text("vs2a_rest.bogus = 1\n").is_err());
    }

    #[test]
    fn malformed_lines_are_rejected_with_line_numbers() {
        let err = RunConfig::from_text("world.t_sem = 100\nnot a line\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
        let err = RunConfig::from_text("world.t_sem = ten\n").unwrap_err();
        assert!(err.to_string().contains("t_sem"));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# comment\n\nworld.t_sem = 50\nworld.t_v = 5\n";
        let config = RunConfig::from_text(text).unwrap();
        assert_eq!(config.world.t_sem, 50);
        assert_eq!(config.world.t_v, 5);
    }

    #[test]
    fn inconsistent_sections_fail_validation() {
        // t_sem not a multiple of t_v.
        assert!(RunConfig::from_text("world.t_sem = 101\n").is_err());
        // vs2a step list length must match the layer count.
        assert!(RunConfig::from_text("decode.vs2a_steps = 1,1\n").is_err());
        // heads must divide model_dim.
        assert!(RunConfig::from_text("v2as.heads = 7\n").is_err());
    }
}
