//! End-to-end pipeline commands behind the CLI and the examples: dataset
//! generation, training both stages (with resume), two-stage generation, and
//! evaluation. Every command is deterministic given its config and seeds.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustic::{self, AcousticBundle, AcousticModel, AcousticModelKind};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::masking::MaskSchedule;
use crate::metrics::{
    delta_wer, desync_analog, fad, lpaps_proxy, wer, EvalReport, FrameEmbedder,
    HistogramProjection, SequenceEmbedder, TokenTable,
};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointGroup};
use crate::nn::optim::AdamW;
use crate::semantic::{self, SemanticModel, TrainOptions};
use crate::tokens::{decode_acoustic, AcousticTokenGrid, SemanticTokenSequence};
use crate::world::{
    self, extract_event_onsets, gen_dataset, load_dataset, oracle_speech_extract, sample_seed,
    speech_background_chi_square, Dataset, World,
};

/// Default alignment window for the onset desynchronization metric, in
/// semantic frames.
pub const DESYNC_MAX_OFFSET: f64 = 25.0;
/// Seed for the evaluation embedders; fixed so reports are comparable.
pub const EMBEDDER_SEED: u64 = 17;
/// Embedding dimension of both evaluation embedders.
pub const EMBEDDER_DIM: usize = 16;

const GENERATED_MAGIC: &[u8; 4] = b"SWGN";
const GENERATED_VERSION: u32 = 1;

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Debug)]
pub struct GenDataSummary {
    pub samples: usize,
    pub bytes: u64,
    pub chi_square: f64,
    pub chi_square_dof: usize,
    pub config_hash: String,
}

pub fn cmd_gen_data(
    config: &RunConfig,
    n: usize,
    out: &Path,
    workers: usize,
) -> Result<GenDataSummary> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Input("dataset needs at least one sample".into()));
    }
    let pool = thread_pool(workers)?;
    let dataset = pool.install(|| gen_dataset(&config.world, n, out))?;
    let (chi_square, chi_square_dof) = speech_background_chi_square(&dataset.samples);
    let bytes = fs::metadata(out)?.len();
    Ok(GenDataSummary {
        samples: dataset.samples.len(),
        bytes,
        chi_square,
        chi_square_dof,
        config_hash: config.hash(),
    })
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Serialize, Deserialize)]
struct SemanticMeta {
    kind: String,
    steps_done: u64,
    stage: crate::semantic::SemanticStageConfig,
}

#[derive(Serialize, Deserialize)]
struct AcousticMeta {
    kind: String,
    steps_done: u64,
    first: crate::acoustic::AcousticStageConfig,
    rest: crate::acoustic::AcousticStageConfig,
}

pub fn save_semantic_checkpoint(
    path: &Path,
    model: &SemanticModel<f32>,
    optimizer: &AdamW<f32>,
    steps_done: u64,
) -> Result<()> {
    let meta = serde_json::to_value(SemanticMeta {
        kind: "semantic".into(),
        steps_done,
        stage: model.config.clone(),
    })
    .map_err(|e| Error::Integrity(format!("meta encode failed: {e}")))?;
    save_checkpoint(
        path,
        &Checkpoint {
            meta,
            groups: vec![CheckpointGroup {
                name: "model".into(),
                params: model.params.clone(),
                optimizer: Some(optimizer.clone()),
            }],
        },
    )
}

pub fn load_semantic_checkpoint(
    path: &Path,
    expected: &crate::semantic::SemanticStageConfig,
) -> Result<(SemanticModel<f32>, AdamW<f32>, u64)> {
    let checkpoint = load_checkpoint(path)?;
    let meta: SemanticMeta = serde_json::from_value(checkpoint.meta.clone())
        .map_err(|e| Error::Config(format!("checkpoint meta invalid: {e}")))?;
    if meta.kind != "semantic" {
        return Err(Error::Config(format!(
            "expected a semantic-stage checkpoint, found kind '{}'",
            meta.kind
        )));
    }
    if &meta.stage != expected {
        return Err(Error::Config(
            "checkpoint stage config disagrees with the run config".into(),
        ));
    }
    let group = checkpoint
        .group("model")
        .ok_or_else(|| Error::Config("checkpoint has no 'model' group".into()))?;
    let model = SemanticModel::from_parameters(expected.clone(), group.params.clone())?;
    let optimizer = group
        .optimizer
        .clone()
        .ok_or_else(|| Error::Config("checkpoint carries no optimizer state".into()))?;
    Ok((model, optimizer, meta.steps_done))
}

pub fn save_acoustic_checkpoint(
    path: &Path,
    bundle: &AcousticBundle<f32>,
    opt_first: &AdamW<f32>,
    opt_rest: &AdamW<f32>,
    steps_done: u64,
) -> Result<()> {
    let meta = serde_json::to_value(AcousticMeta {
        kind: "acoustic-bundle".into(),
        steps_done,
        first: bundle.first.config.clone(),
        rest: bundle.rest.config.clone(),
    })
    .map_err(|e| Error::Integrity(format!("meta encode failed: {e}")))?;
    save_checkpoint(
        path,
        &Checkpoint {
            meta,
            groups: vec![
                CheckpointGroup {
                    name: "first".into(),
                    params: bundle.first.params.clone(),
                    optimizer: Some(opt_first.clone()),
                },
                CheckpointGroup {
                    name: "rest".into(),
                    params: bundle.rest.params.clone(),
                    optimizer: Some(opt_rest.clone()),
                },
            ],
        },
    )
}

pub fn load_acoustic_checkpoint(
    path: &Path,
    expected_first: &crate::acoustic::AcousticStageConfig,
    expected_rest: &crate::acoustic::AcousticStageConfig,
) -> Result<(AcousticBundle<f32>, AdamW<f32>, AdamW<f32>, u64)> {
    let checkpoint = load_checkpoint(path)?;
    let meta: AcousticMeta = serde_json::from_value(checkpoint.meta.clone())
        .map_err(|e| Error::Config(format!("checkpoint meta invalid: {e}")))?;
    if meta.kind != "acoustic-bundle" {
        return Err(Error::Config(format!(
            "expected an acoustic-bundle checkpoint, found kind '{}'",
            meta.kind
        )));
    }
    if &meta.first != expected_first || &meta.rest != expected_rest {
        return Err(Error::Config(
            "checkpoint stage configs disagree with the run config".into(),
        ));
    }
    let take = |name: &str, expected: &crate::acoustic::AcousticStageConfig| -> Result<(AcousticModel<f32>, AdamW<f32>)> {
        let group = checkpoint
            .group(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no '{name}' group")))?;
        let model = AcousticModel::from_parameters(expected.clone(), group.params.clone())?;
        let optimizer = group
            .optimizer
            .clone()
            .ok_or_else(|| Error::Config("checkpoint carries no optimizer state".into()))?;
        Ok((model, optimizer))
    };
    let (first, opt_first) = take("first", expected_first)?;
    let (rest, opt_rest) = take("rest", expected_rest)?;
    Ok((
        AcousticBundle { first, rest },
        opt_first,
        opt_rest,
        meta.steps_done,
    ))
}

// ---------------------------------------------------------------------------
// train

pub struct TrainArgs<'a> {
    pub config: &'a RunConfig,
    pub dataset_path: &'a Path,
    pub out_checkpoint: &'a Path,
    pub steps_override: Option<usize>,
    pub seed_override: Option<u64>,
    pub workers: usize,
    pub resume: Option<&'a Path>,
    /// Ablation switch: train with the speech condition permanently dropped.
    pub disable_speech_condition: bool,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub steps_done: u64,
    pub final_loss: f64,
    pub log: Vec<String>,
    pub log_path: std::path::PathBuf,
}

fn split_dataset(dataset: &Dataset, heldout: usize) -> Result<(&[world::WorldSample], &[world::WorldSample])> {
    let n = dataset.samples.len();
    if heldout >= n {
        return Err(Error::Config(format!(
            "dataset has {n} samples but {heldout} are reserved for evaluation"
        )));
    }
    Ok(dataset.samples.split_at(n - heldout))
}

fn check_dataset_config(config: &RunConfig, dataset: &Dataset) -> Result<()> {
    if dataset.config != config.world {
        return Err(Error::Config(
            "dataset world config disagrees with the run config".into(),
        ));
    }
    Ok(())
}

pub fn cmd_train_semantic(args: &TrainArgs<'_>) -> Result<TrainSummary> {
    let config = args.config;
    config.validate()?;
    let stage = config.semantic_stage_config()?;
    let dataset = load_dataset(args.dataset_path)?;
    check_dataset_config(config, &dataset)?;
    let (train, heldout) = split_dataset(&dataset, config.train.heldout)?;
    let seed = args.seed_override.unwrap_or(config.train.seed);
    let steps = args.steps_override.unwrap_or(config.train.steps);

    let (mut model, mut optimizer, start_step) = match args.resume {
        Some(path) => load_semantic_checkpoint(path, &stage)?,
        None => {
            let model = SemanticModel::init(stage.clone(), seed)?;
            let optimizer = AdamW::new(config.optim, &model.params);
            (model, optimizer, 0)
        }
    };
    let schedule = MaskSchedule::default();
    let options = TrainOptions {
        drop_speech_always: args.disable_speech_condition,
    };

    let log_path = args.out_checkpoint.with_extension("log");
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(&log_path)?;
    let mut log = Vec::new();
    let emit = |file: &mut fs::File, lines: &mut Vec<String>, line: String| -> Result<()> {
        writeln!(file, "{line}")?;
        println!("{line}");
        lines.push(line);
        Ok(())
    };

    let pool = thread_pool(args.workers)?;
    let mut window_loss = 0.0;
    let mut window_acc = 0.0;
    let mut window_count = 0usize;
    let mut last_loss = f64::NAN;
    for step in start_step as usize..steps {
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(sample_seed(seed, step as u64));
        let batch = draw_batch(&mut rng, train.len(), config.train.batch_size);
        let refs: Vec<&world::WorldSample> = batch.iter().map(|&i| &train[i]).collect();
        let stats = pool.install(|| {
            semantic::train_step(&mut model, &mut optimizer, &refs, &schedule, &mut rng, options)
        })?;
        last_loss = stats.loss;
        window_loss += stats.loss;
        window_acc += stats.masked_accuracy;
        window_count += 1;
        let done = step + 1;
        if done % config.train.log_every == 0 || done == steps {
            emit(
                &mut log_file,
                &mut log,
                format!(
                    "step={done} loss={:.6} acc={:.4} lr={:.8}",
                    window_loss / window_count as f64,
                    window_acc / window_count as f64,
                    optimizer.current_lr()
                ),
            )?;
            window_loss = 0.0;
            window_acc = 0.0;
            window_count = 0;
        }
        if done % config.train.eval_every == 0 || done == steps {
            let acc = pool.install(|| {
                semantic::heldout_accuracy(&model, heldout, !args.disable_speech_condition, true)
            })?;
            emit(
                &mut log_file,
                &mut log,
                format!(
                    "eval step={done} speech_acc={:.4} background_acc={:.4}",
                    acc.speech, acc.background
                ),
            )?;
        }
        if done % config.train.checkpoint_every == 0 || done == steps {
            save_semantic_checkpoint(args.out_checkpoint, &model, &optimizer, done as u64)?;
        }
    }
    Ok(TrainSummary {
        steps_done: steps as u64,
        final_loss: last_loss,
        log,
        log_path,
    })
}

pub fn cmd_train_acoustic(args: &TrainArgs<'_>) -> Result<TrainSummary> {
    let config = args.config;
    config.validate()?;
    let first_cfg = config.acoustic_stage_config(AcousticModelKind::First)?;
    let rest_cfg = config.acoustic_stage_config(AcousticModelKind::Rest)?;
    let dataset = load_dataset(args.dataset_path)?;
    check_dataset_config(config, &dataset)?;
    let (train, heldout) = split_dataset(&dataset, config.train.heldout)?;
    let seed = args.seed_override.unwrap_or(config.train.seed);
    let steps = args.steps_override.unwrap_or(config.train.steps);

    let (mut bundle, mut opt_first, mut opt_rest, start_step) = match args.resume {
        Some(path) => load_acoustic_checkpoint(path, &first_cfg, &rest_cfg)?,
        None => {
            let bundle = AcousticBundle::init(first_cfg.clone(), rest_cfg.clone(), seed)?;
            let opt_first = AdamW::new(config.optim, &bundle.first.params);
            let opt_rest = AdamW::new(config.optim, &bundle.rest.params);
            (bundle, opt_first, opt_rest, 0)
        }
    };
    let schedule = MaskSchedule::default();
    let layers = config.world.vocab.acoustic_layers;

    let log_path = args.out_checkpoint.with_extension("log");
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(&log_path)?;
    let mut log = Vec::new();
    let emit = |file: &mut fs::File, lines: &mut Vec<String>, line: String| -> Result<()> {
        writeln!(file, "{line}")?;
        println!("{line}");
        lines.push(line);
        Ok(())
    };

    let pool = thread_pool(args.workers)?;
    let mut window: Vec<(f64, usize)> = vec![(0.0, 0); layers];
    let mut last_loss = f64::NAN;
    for step in start_step as usize..steps {
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(sample_seed(seed, step as u64));
        let batch = draw_batch(&mut rng, train.len(), config.train.batch_size);
        let refs: Vec<&world::WorldSample> = batch.iter().map(|&i| &train[i]).collect();
        let stats_first = pool.install(|| {
            acoustic::train_step(&mut bundle.first, &mut opt_first, &refs, &schedule, &mut rng)
        })?;
        let stats_rest = pool.install(|| {
            acoustic::train_step(&mut bundle.rest, &mut opt_rest, &refs, &schedule, &mut rng)
        })?;
        last_loss = stats_first.loss + stats_rest.loss;
        window[0].0 += stats_first.loss;
        window[0].1 += 1;
        window[stats_rest.layer - 1].0 += stats_rest.loss;
        window[stats_rest.layer - 1].1 += 1;
        let done = step + 1;
        if done % config.train.log_every == 0 || done == steps {
            let mut line = format!("step={done}");
            for (k, &(sum, count)) in window.iter().enumerate() {
                if count > 0 {
                    line.push_str(&format!(" loss_l{}={:.6}", k + 1, sum / count as f64));
                }
            }
            line.push_str(&format!(" lr={:.8}", opt_first.current_lr()));
            emit(&mut log_file, &mut log, line)?;
            window = vec![(0.0, 0); layers];
        }
        if done % config.train.eval_every == 0 || done == steps {
            let accs = pool.install(|| heldout_teacher_forced_accuracy(&bundle, heldout))?;
            let mut line = format!("eval step={done}");
            for (k, acc) in accs.iter().enumerate() {
                line.push_str(&format!(" acc_l{}={:.4}", k + 1, acc));
            }
            emit(&mut log_file, &mut log, line)?;
        }
        if done % config.train.checkpoint_every == 0 || done == steps {
            save_acoustic_checkpoint(
                args.out_checkpoint,
                &bundle,
                &opt_first,
                &opt_rest,
                done as u64,
            )?;
        }
    }
    Ok(TrainSummary {
        steps_done: steps as u64,
        final_loss: last_loss,
        log,
        log_path,
    })
}

/// Per-layer argmax accuracy with a fully-masked target layer and
/// teacher-forced lower layers; the cheap cadence metric for stage two.
pub fn heldout_teacher_forced_accuracy(
    bundle: &AcousticBundle<f32>,
    samples: &[world::WorldSample],
) -> Result<Vec<f64>> {
    let layers = bundle.vocab().acoustic_layers;
    let mut accs = Vec::with_capacity(layers);
    for layer in 1..=layers {
        let model = if layer == 1 { &bundle.first } else { &bundle.rest };
        let hits_totals: Vec<Result<(usize, usize)>> = samples
            .par_iter()
            .map(|sample| {
                let t_sem = sample.semantic.len();
                let masked = vec![model.mask_id(); t_sem];
                let lower: Vec<&[u32]> =
                    (0..layer - 1).map(|k| sample.acoustic.layer(k)).collect();
                let scored = model.score(
                    sample.semantic.tokens(),
                    &sample.video,
                    &lower,
                    &masked,
                    layer,
                )?;
                let mut hits = 0usize;
                for (pos, &target) in sample.acoustic.layer(layer - 1).iter().enumerate() {
                    let row = scored.cond.row(pos);
                    let mut best = 0usize;
                    let mut best_val = row[0];
                    for (j, &x) in row.iter().enumerate().skip(1) {
                        if x > best_val {
                            best_val = x;
                            best = j;
                        }
                    }
                    if best == target as usize {
                        hits += 1;
                    }
                }
                Ok((hits, t_sem))
            })
            .collect();
        let mut hits = 0usize;
        let mut total = 0usize;
        for ht in hits_totals {
            let (h, t) = ht?;
            hits += h;
            total += t;
        }
        accs.push(if total > 0 {
            hits as f64 / total as f64
        } else {
            1.0
        });
    }
    Ok(accs)
}

fn draw_batch(rng: &mut ChaCha8Rng, pool_size: usize, batch: usize) -> Vec<usize> {
    use rand::Rng;
    (0..batch).map(|_| rng.gen_range(0..pool_size)).collect()
}

// ---------------------------------------------------------------------------
// generate

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpeechSource {
    /// Speech tokens from the transcript oracle (lexicon lookup plus fixed
    /// silence padding).
    Transcript,
    /// Speech tokens extracted from the source sample's semantic stream.
    Audio,
}

pub struct GenerateArgs<'a> {
    pub config: &'a RunConfig,
    pub v2as_checkpoint: &'a Path,
    pub vs2a_checkpoint: &'a Path,
    pub dataset_path: &'a Path,
    pub out: &'a Path,
    pub mode: SpeechSource,
    /// When set, this transcript replaces every sample's own transcript.
    pub transcript_override: Option<Vec<u32>>,
    pub limit: Option<usize>,
    pub seed_override: Option<u64>,
    pub v2as_steps: Option<usize>,
    pub v2as_cfg_scale: Option<f64>,
    pub vs2a_steps: Option<Vec<usize>>,
    pub vs2a_cfg_scale: Option<f64>,
    pub workers: usize,
}

#[derive(Debug)]
pub struct GenerateSummary {
    pub samples: usize,
    pub out_bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedRecord {
    pub semantic: Vec<u32>,
    pub layers: Vec<Vec<u32>>,
}

pub struct GeneratedSet {
    pub meta: serde_json::Value,
    pub records: Vec<GeneratedRecord>,
}

pub fn cmd_generate(args: &GenerateArgs<'_>) -> Result<GenerateSummary> {
    let config = args.config;
    config.validate()?;
    let stage = config.semantic_stage_config()?;
    let first_cfg = config.acoustic_stage_config(AcousticModelKind::First)?;
    let rest_cfg = config.acoustic_stage_config(AcousticModelKind::Rest)?;
    let (sem_model, _, _) = load_semantic_checkpoint(args.v2as_checkpoint, &stage)?;
    let (bundle, _, _, _) = load_acoustic_checkpoint(args.vs2a_checkpoint, &first_cfg, &rest_cfg)?;
    let dataset = load_dataset(args.dataset_path)?;
    check_dataset_config(config, &dataset)?;
    let world = World::new(config.world.clone())?;

    let n = args.limit.unwrap_or(dataset.samples.len()).min(dataset.samples.len());
    let seed = args.seed_override.unwrap_or(config.decode.seed);
    let v2as_steps = args.v2as_steps.unwrap_or(config.decode.v2as_steps);
    let v2as_cfg = args.v2as_cfg_scale.unwrap_or(config.decode.v2as_cfg_scale);
    let vs2a_steps = args
        .vs2a_steps
        .clone()
        .unwrap_or_else(|| config.decode.vs2a_steps.clone());
    let vs2a_cfg = args.vs2a_cfg_scale.unwrap_or(config.decode.vs2a_cfg_scale);
    let decode = crate::sampler::DecodeConfig::new(v2as_steps, v2as_cfg)?;

    // Resolve speech conditions up front so lexicon errors surface before
    // any decoding starts.
    let speech_conditions: Vec<crate::tokens::SpeechTokenSequence> = dataset
        .samples
        .iter()
        .take(n)
        .map(|sample| match (&args.transcript_override, args.mode) {
            (Some(words), _) => world.speech_tokens_for_transcript(words),
            (None, SpeechSource::Transcript) => {
                world.speech_tokens_for_transcript(&sample.transcript)
            }
            (None, SpeechSource::Audio) => {
                oracle_speech_extract(&sample.semantic, &config.world.vocab)
            }
        })
        .collect::<Result<_>>()?;

    let pool = thread_pool(args.workers)?;
    let records: Vec<Result<GeneratedRecord>> = pool.install(|| {
        dataset.samples[..n]
            .par_iter()
            .zip(&speech_conditions)
            .enumerate()
            .map(|(idx, (sample, speech))| {
                let mut rng: ChaCha8Rng =
                    rand::SeedableRng::seed_from_u64(sample_seed(seed, idx as u64));
                let semantic =
                    semantic::generate(&sem_model, &sample.video, speech, &decode, &mut rng)?;
                let grid = acoustic::generate(
                    &bundle,
                    &semantic,
                    &sample.video,
                    &vs2a_steps,
                    vs2a_cfg,
                    &mut rng,
                )?;
                Ok(GeneratedRecord {
                    semantic: semantic.tokens().to_vec(),
                    layers: grid.layers().to_vec(),
                })
            })
            .collect()
    });
    let records: Vec<GeneratedRecord> = records.into_iter().collect::<Result<_>>()?;

    let meta = serde_json::json!({
        "config_hash": config.hash(),
        "samples": records.len(),
        "seed": seed,
        "v2as_steps": v2as_steps,
        "v2as_cfg_scale": v2as_cfg,
        "vs2a_steps": vs2a_steps,
        "vs2a_cfg_scale": vs2a_cfg,
        "mode": match args.mode { SpeechSource::Transcript => "transcript", SpeechSource::Audio => "audio" },
    });
    let set = GeneratedSet { meta, records };
    fs::write(args.out, encode_generated(&set)?)?;
    Ok(GenerateSummary {
        samples: set.records.len(),
        out_bytes: fs::metadata(args.out)?.len(),
    })
}

fn encode_generated(set: &GeneratedSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(GENERATED_MAGIC);
    buf.extend_from_slice(&GENERATED_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&set.meta)
        .map_err(|e| Error::Integrity(format!("meta encode failed: {e}")))?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(set.records.len() as u64).to_le_bytes());
    for record in &set.records {
        write_u32_list(&mut buf, &record.semantic);
        buf.extend_from_slice(&(record.layers.len() as u32).to_le_bytes());
        for layer in &record.layers {
            write_u32_list(&mut buf, layer);
        }
    }
    Ok(buf)
}

fn write_u32_list(buf: &mut Vec<u8>, values: &[u32]) {
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn load_generated(path: &Path) -> Result<GeneratedSet> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Input("generated file ends early".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != GENERATED_MAGIC {
        return Err(Error::Input("not a generated-token file".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != GENERATED_VERSION {
        return Err(Error::Config(format!(
            "unsupported generated-file version {version}"
        )));
    }
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let meta = serde_json::from_slice(take(&mut pos, meta_len)?)
        .map_err(|e| Error::Input(format!("generated meta invalid: {e}")))?;
    let n = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let read_list = |pos: &mut usize| -> Result<Vec<u32>> {
        let len = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
        let raw = take(pos, len * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let semantic = read_list(&mut pos)?;
        let layer_count =
            u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            layers.push(read_list(&mut pos)?);
        }
        records.push(GeneratedRecord { semantic, layers });
    }
    if pos != bytes.len() {
        return Err(Error::Input("trailing bytes after generated records".into()));
    }
    Ok(GeneratedSet {
        meta,
        records,
    })
}

// ---------------------------------------------------------------------------
// eval

pub fn cmd_eval(
    config: &RunConfig,
    generated_path: &Path,
    reference_path: &Path,
    workers: usize,
) -> Result<EvalReport> {
    config.validate()?;
    let reference = load_dataset(reference_path)?;
    check_dataset_config(config, &reference)?;
    let world = World::new(config.world.clone())?;
    let vocab = &config.world.vocab;

    // The generated side is either a generation output or a dataset (for
    // self-evaluation); sniff the magic.
    let head = {
        let mut f = fs::File::open(generated_path)?;
        use std::io::Read;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        magic
    };
    let generated: Vec<GeneratedRecord> = if &head == GENERATED_MAGIC {
        load_generated(generated_path)?.records
    } else {
        load_dataset(generated_path)?
            .samples
            .into_iter()
            .map(|s| GeneratedRecord {
                semantic: s.semantic.tokens().to_vec(),
                layers: s.acoustic.layers().to_vec(),
            })
            .collect()
    };
    if generated.len() != reference.samples.len() {
        return Err(Error::Input(format!(
            "generated set has {} records, reference has {}",
            generated.len(),
            reference.samples.len()
        )));
    }

    struct PerSample {
        wer_gt: f64,
        wer_pred: f64,
        empty_reference: bool,
        desync: f64,
        acoustic_hits: usize,
        acoustic_total: usize,
    }
    let pool = thread_pool(workers)?;
    let rows: Vec<Result<PerSample>> = pool.install(|| {
        generated
            .par_iter()
            .zip(&reference.samples)
            .map(|(gen, reference)| {
                let gen_semantic = SemanticTokenSequence::new(gen.semantic.clone(), vocab)?;
                let gen_speech = oracle_speech_extract(&gen_semantic, vocab)?;
                let gen_words = world.oracle_transcribe(&gen_speech);
                let gt_words = world.oracle_transcribe(&reference.speech);
                let wer_gt = wer(&reference.transcript, &gt_words);
                let wer_pred = wer(&reference.transcript, &gen_words);
                let gen_background =
                    world::oracle_background_extract(&gen_semantic, vocab)?;
                let gen_onsets = extract_event_onsets(&gen_background);
                let gt_onsets = extract_event_onsets(&reference.background);
                let desync = desync_analog(&gen_onsets, &gt_onsets, DESYNC_MAX_OFFSET)?;
                let grid = AcousticTokenGrid::new(gen.layers.clone(), vocab)?;
                let decoded = decode_acoustic(&grid, vocab)?;
                let acoustic_hits = decoded
                    .tokens()
                    .iter()
                    .zip(&gen.semantic)
                    .filter(|(a, b)| a == b)
                    .count();
                Ok(PerSample {
                    wer_gt: wer_gt.value,
                    wer_pred: wer_pred.value,
                    empty_reference: wer_pred.empty_reference || wer_gt.empty_reference,
                    desync,
                    acoustic_hits,
                    acoustic_total: gen.semantic.len(),
                })
            })
            .collect()
    });
    let rows: Vec<PerSample> = rows.into_iter().collect::<Result<_>>()?;

    let scored: Vec<&PerSample> = rows.iter().filter(|r| !r.empty_reference).collect();
    let flagged = rows.len() - scored.len();
    let wer_mean = if scored.is_empty() {
        0.0
    } else {
        scored.iter().map(|r| r.wer_pred).sum::<f64>() / scored.len() as f64
    };
    let dwer = if scored.is_empty() {
        0.0
    } else {
        delta_wer(
            &scored
                .iter()
                .map(|r| (r.wer_gt, r.wer_pred))
                .collect::<Vec<_>>(),
        )?
    };
    let desync_mean = rows.iter().map(|r| r.desync).sum::<f64>() / rows.len().max(1) as f64;
    let acoustic_agreement = {
        let hits: usize = rows.iter().map(|r| r.acoustic_hits).sum();
        let total: usize = rows.iter().map(|r| r.acoustic_total).sum();
        if total > 0 {
            hits as f64 / total as f64
        } else {
            1.0
        }
    };

    let seq_embedder = HistogramProjection::new(
        vocab.semantic_vocab_size() as usize,
        EMBEDDER_DIM,
        EMBEDDER_SEED,
    );
    let gen_sequences: Vec<Vec<u32>> = generated.iter().map(|g| g.semantic.clone()).collect();
    let ref_sequences: Vec<Vec<u32>> = reference
        .samples
        .iter()
        .map(|s| s.semantic.tokens().to_vec())
        .collect();
    let fad_value = fad(&gen_sequences, &ref_sequences, &seq_embedder)?;

    let frame_embedder = TokenTable::new(
        vocab.semantic_vocab_size() as usize,
        EMBEDDER_DIM,
        EMBEDDER_SEED,
    );
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = gen_sequences
        .iter()
        .cloned()
        .zip(ref_sequences.iter().cloned())
        .collect();
    let lpaps_value = lpaps_proxy(&pairs, &frame_embedder)?;

    let mut report = EvalReport::default();
    report.push("samples", rows.len());
    report.push("flagged_empty_reference", flagged);
    report.push("metric.wer_mean", format!("{wer_mean:.6}"));
    report.push("metric.delta_wer", format!("{dwer:.6}"));
    report.push("metric.fad", format!("{fad_value:.6}"));
    report.push("metric.lpaps", format!("{lpaps_value:.6}"));
    report.push("metric.desync", format!("{desync_mean:.6}"));
    report.push(
        "metric.acoustic_semantic_agreement",
        format!("{acoustic_agreement:.6}"),
    );
    report.push("embedder.sequence", seq_embedder.id());
    report.push("embedder.frame", frame_embedder.id());
    report.push("config_hash", config.hash());
    Ok(report)
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_text())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        let mut config = RunConfig::default();
        config.world.t_sem = 40;
        config.world.t_v = 4;
        config.world.video_dim = 8;
        config.world.lexicon_size = 12;
        config.world.words_max = 2;
        config.v2as.depth = 1;
        config.v2as.model_dim = 16;
        config.v2as.heads = 2;
        config.v2as.feedforward_dim = 32;
        config.v2as.cross_attention_positions = vec![1];
        for stage in [&mut config.vs2a_first, &mut config.vs2a_rest] {
            stage.depth = 1;
            stage.model_dim = 16;
            stage.heads = 2;
            stage.feedforward_dim = 32;
        }
        config.train.batch_size = 4;
        config.train.steps = 6;
        config.train.log_every = 2;
        config.train.eval_every = 3;
        config.train.checkpoint_every = 3;
        config.train.heldout = 4;
        config.decode.v2as_steps = 2;
        config.decode.vs2a_steps = vec![2, 1, 1, 1];
        config.validate().unwrap();
        config
    }

    #[test]
    fn full_pipeline_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let data = dir.path().join("train.swds");
        let summary = cmd_gen_data(&config, 16, &data, 2).unwrap();
        assert_eq!(summary.samples, 16);

        let sem_ckpt = dir.path().join("sem.swck");
        let train_args = TrainArgs {
            config: &config,
            dataset_path: &data,
            out_checkpoint: &sem_ckpt,
            steps_override: None,
            seed_override: None,
            workers: 2,
            resume: None,
            disable_speech_condition: false,
        };
        let summary = cmd_train_semantic(&train_args).unwrap();
        assert_eq!(summary.steps_done, 6);
        assert!(summary.log.iter().any(|l| l.starts_with("eval ")));

        let ac_ckpt = dir.path().join("ac.swck");
        let train_args = TrainArgs {
            out_checkpoint: &ac_ckpt,
            ..train_args
        };
        let summary = cmd_train_acoustic(&train_args).unwrap();
        assert!(summary.log.iter().any(|l| l.contains("loss_l1")));
        assert!(summary.log.iter().any(|l| l.contains("acc_l4")));

        let out = dir.path().join("generated.swgn");
        let gen_args = GenerateArgs {
            config: &config,
            v2as_checkpoint: &sem_ckpt,
            vs2a_checkpoint: &ac_ckpt,
            dataset_path: &data,
            out: &out,
            mode: SpeechSource::Transcript,
            transcript_override: None,
            limit: Some(6),
            seed_override: None,
            v2as_steps: None,
            v2as_cfg_scale: None,
            vs2a_steps: None,
            vs2a_cfg_scale: None,
            workers: 2,
        };
        let summary = cmd_generate(&gen_args).unwrap();
        assert_eq!(summary.samples, 6);
        let set = load_generated(&out).unwrap();
        assert_eq!(set.records.len(), 6);
        assert!(set.records.iter().all(|r| r.semantic.len() == 40));

        // Evaluating needs matching counts.
        assert!(matches!(
            cmd_eval(&config, &out, &data, 2),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn self_evaluation_is_all_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let data = dir.path().join("ref.swds");
        cmd_gen_data(&config, 24, &data, 2).unwrap();
        let report = cmd_eval(&config, &data, &data, 2).unwrap();
        let get = |k: &str| -> f64 { report.get(k).unwrap().parse().unwrap() };
        assert_eq!(get("metric.wer_mean"), 0.0);
        assert_eq!(get("metric.delta_wer"), 0.0);
        assert!(get("metric.fad") <= 1e-6);
        assert_eq!(get("metric.lpaps"), 0.0);
        assert_eq!(get("metric.desync"), 0.0);
        assert_eq!(get("metric.acoustic_semantic_agreement"), 1.0);
    }

    #[test]
    fn training_logs_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let data = dir.path().join("train.swds");
        cmd_gen_data(&config, 16, &data, 1).unwrap();
        let run = |name: &str| -> Vec<String> {
            let ckpt = dir.path().join(name);
            cmd_train_semantic(&TrainArgs {
                config: &config,
                dataset_path: &data,
                out_checkpoint: &ckpt,
                steps_override: None,
                seed_override: None,
                workers: 2,
                resume: None,
                disable_speech_condition: false,
            })
            .unwrap()
            .log
        };
        assert_eq!(run("a.swck"), run("b.swck"));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config();
        config.train.steps = 8;
        config.train.checkpoint_every = 4;
        let data = dir.path().join("train.swds");
        cmd_gen_data(&config, 16, &data, 1).unwrap();

        let straight = dir.path().join("straight.swck");
        cmd_train_semantic(&TrainArgs {
            config: &config,
            dataset_path: &data,
            out_checkpoint: &straight,
            steps_override: None,
            seed_override: None,
            workers: 1,
            resume: None,
            disable_speech_condition: false,
        })
        .unwrap();

        // Interrupted run: first 4 steps, then resume to 8.
        let resumed = dir.path().join("resumed.swck");
        cmd_train_semantic(&TrainArgs {
            config: &config,
            dataset_path: &data,
            out_checkpoint: &resumed,
            steps_override: Some(4),
            seed_override: None,
            workers: 1,
            resume: None,
            disable_speech_condition: false,
        })
        .unwrap();
        cmd_train_semantic(&TrainArgs {
            config: &config,
            dataset_path: &data,
            out_checkpoint: &resumed,
            steps_override: None,
            seed_override: None,
            workers: 1,
            resume: Some(&resumed),
            disable_speech_condition: false,
        })
        .unwrap();

        let a = load_checkpoint(&straight).unwrap();
        let b = load_checkpoint(&resumed).unwrap();
        let pa = &a.group("model").unwrap().params;
        let pb = &b.group("model").unwrap().params;
        assert_eq!(pa.len(), pb.len());
        for pid in 0..pa.len() {
            let ta = pa.tensor(pid);
            let tb = pb.tensor(pid);
            let same = ta
                .data()
                .iter()
                .zip(tb.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "parameter {} differs after resume", pa.name(pid));
        }
    }

    #[test]
    fn generation_is_seed_deterministic_and_mode_aware() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let data = dir.path().join("train.swds");
        cmd_gen_data(&config, 12, &data, 1).unwrap();
        let sem_ckpt = dir.path().join("sem.swck");
        let ac_ckpt = dir.path().join("ac.swck");
        let base = TrainArgs {
            config: &config,
            dataset_path: &data,
            out_checkpoint: &sem_ckpt,
            steps_override: Some(2),
            seed_override: None,
            workers: 1,
            resume: None,
            disable_speech_condition: false,
        };
        cmd_train_semantic(&base).unwrap();
        cmd_train_acoustic(&TrainArgs {
            out_checkpoint: &ac_ckpt,
            ..base
        })
        .unwrap();

        let gen = |out: &Path, mode: SpeechSource, transcript: Option<Vec<u32>>| {
            cmd_generate(&GenerateArgs {
                config: &config,
                v2as_checkpoint: &sem_ckpt,
                vs2a_checkpoint: &ac_ckpt,
                dataset_path: &data,
                out,
                mode,
                transcript_override: transcript,
                limit: Some(3),
                seed_override: None,
                v2as_steps: None,
                v2as_cfg_scale: None,
                vs2a_steps: None,
                vs2a_cfg_scale: None,
                workers: 2,
            })
        };
        let out_a = dir.path().join("a.swgn");
        let out_b = dir.path().join("b.swgn");
        gen(&out_a, SpeechSource::Transcript, None).unwrap();
        gen(&out_b, SpeechSource::Transcript, None).unwrap();
        assert_eq!(
            std::fs::read(&out_a).unwrap(),
            std::fs::read(&out_b).unwrap()
        );

        let out_c = dir.path().join("c.swgn");
        gen(&out_c, SpeechSource::Audio, None).unwrap();
        assert!(load_generated(&out_c).unwrap().records.len() == 3);

        // A transcript word outside the lexicon is an input error naming it.
        let out_d = dir.path().join("d.swgn");
        let err = gen(&out_d, SpeechSource::Transcript, Some(vec![999])).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        assert!(err.to_string().contains("999"));
    }
}
