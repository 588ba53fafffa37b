//! Batch assembly and the optimization loop.
//!
//! A step draws fixed-length segments uniformly at random (with
//! replacement) across utterances until the configured number of target
//! samples is reached, runs teacher-forced forward/backward on each
//! segment, sums gradients in segment order and applies one Adam update.
//! The segment schedule for step k is a pure function of `(seed, k)`, which
//! is what makes interrupted training resumable bit-exactly.
//!
//! Each segment carries a full receptive field of context before its
//! target span: context samples feed the convolutions but are masked out
//! of the loss, so an interior segment reproduces exactly the logits the
//! full utterance would produce at those positions. Where the context
//! would reach before the utterance start it is padded with the μ-law
//! code of silence and zero conditioning columns.

use crate::checkpoint;
use crate::codec::{mulaw_encode, MuLawConfig};
use crate::compute::{cross_entropy_masked, AdamState, GradTape, Tensor};
use crate::error::{Error, Result};
use crate::features::{upsample_conditioning, ConditioningTrack, UpsampleMode};
use crate::rng::SplitMix64;
use crate::signal::{ClassSequence, WaveformSignal};
use crate::wavenet::{build_training_graph, forward_logits, init_params, ModelConfig, ModelParams};
use rayon::prelude::*;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy)]
pub struct TrainerConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    /// Total target samples per optimization step.
    pub batch_samples: usize,
    /// Target samples per segment; the last segment of a step is shortened
    /// so the batch total is exact.
    pub segment_samples: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            model: ModelConfig::default(),
            learning_rate: 1e-4,
            batch_samples: 15_000,
            segment_samples: 5_000,
            steps: 200_000,
            checkpoint_every: 10_000,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_samples == 0 || self.segment_samples == 0 {
            return Err(Error::InvalidConfig(
                "batch and segment sample counts must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// An utterance ready for training: quantized classes and sample-rate
/// conditioning, truncated to a common length.
#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    pub name: String,
    pub classes: ClassSequence,
    /// `[cond_channels x T]`
    pub cond: Tensor,
}

/// Quantize and upsample one (waveform, conditioning) pair. The waveform
/// and the upsampled conditioning may disagree by up to one frame of
/// samples; both are truncated to the shorter.
pub fn prepare_utterance(
    name: &str,
    signal: &WaveformSignal,
    track: &ConditioningTrack,
    model: &ModelConfig,
    upsample: UpsampleMode,
) -> Result<PreparedUtterance> {
    let up = upsample_conditioning(track, signal.sample_rate, upsample)?;
    if up.channels() != model.cond_channels {
        return Err(Error::InvalidData(format!(
            "utterance '{name}': conditioning has {} channels but the model expects {}",
            up.channels(),
            model.cond_channels
        )));
    }
    let t_wav = signal.len();
    let t_cond = up.samples();
    if t_wav.abs_diff(t_cond) > up.ratio {
        return Err(Error::InvalidData(format!(
            "utterance '{name}': waveform has {t_wav} samples but conditioning covers {t_cond}; \
             mismatch exceeds one frame ({} samples)",
            up.ratio
        )));
    }
    let t_len = t_wav.min(t_cond);
    let mut classes = mulaw_encode(signal, model.mu_law());
    classes.truncate(t_len);
    let mut cond = Tensor::zeros(vec![up.channels(), t_len]);
    for c in 0..up.channels() {
        cond.data[c * t_len..(c + 1) * t_len]
            .copy_from_slice(&up.data.data[c * up.samples()..c * up.samples() + t_len]);
    }
    Ok(PreparedUtterance {
        name: name.to_string(),
        classes,
        cond,
    })
}

/// One training segment: a receptive field of context followed by the
/// target span, with the conditioning columns covering both.
#[derive(Debug, Clone)]
pub struct TrainSegment {
    pub utterance: String,
    /// Target span within the source utterance.
    pub span: (usize, usize),
    /// Context plus target classes; `classes[target_start..]` are targets.
    pub classes: ClassSequence,
    /// `[cond_channels x (context + target)]`
    pub cond: Tensor,
    pub target_start: usize,
}

impl TrainSegment {
    pub fn target_len(&self) -> usize {
        self.classes.len() - self.target_start
    }
}

/// Draws each step's segments. `batch(step)` is a pure function of the
/// sampler state and the step index.
#[derive(Debug)]
pub struct BatchSampler {
    utterances: Vec<PreparedUtterance>,
    config: TrainerConfig,
    receptive_field: usize,
    silence: u16,
}

impl BatchSampler {
    pub fn new(utterances: Vec<PreparedUtterance>, config: &TrainerConfig) -> Result<Self> {
        config.validate()?;
        if utterances.is_empty() {
            return Err(Error::EmptyInput("training corpus is empty".into()));
        }
        let rf = config.model.receptive_field();
        for u in &utterances {
            if u.classes.len() <= rf {
                return Err(Error::InvalidData(format!(
                    "utterance '{}' has {} samples, not longer than the receptive field ({rf})",
                    u.name,
                    u.classes.len()
                )));
            }
            config.model.mu_law().validate_classes(&u.classes)?;
        }
        Ok(BatchSampler {
            utterances,
            silence: config.model.silence_class(),
            receptive_field: rf,
            config: *config,
        })
    }

    pub fn utterances(&self) -> &[PreparedUtterance] {
        &self.utterances
    }

    /// The segments of optimization step `step`. Their target lengths sum
    /// to exactly `batch_samples`.
    pub fn batch(&self, step: u64) -> Vec<TrainSegment> {
        let mut rng = SplitMix64::derive(self.config.seed, step);
        let mut segments = Vec::new();
        let mut remaining = self.config.batch_samples;
        while remaining > 0 {
            let utt = &self.utterances[rng.below(self.utterances.len())];
            let want = self.config.segment_samples.min(remaining);
            let len = want.min(utt.classes.len());
            let start = rng.below(utt.classes.len() - len + 1);
            segments.push(self.cut(utt, start, len));
            remaining -= len;
        }
        segments
    }

    fn cut(&self, utt: &PreparedUtterance, start: usize, len: usize) -> TrainSegment {
        let rf = self.receptive_field;
        let channels = utt.cond.shape[0];
        let full_t = utt.cond.shape[1];
        let total = rf + len;
        let mut classes = Vec::with_capacity(total);
        let mut cond = Tensor::zeros(vec![channels, total]);
        for i in 0..total {
            // absolute source position of segment column i
            let pos = (start + i) as isize - rf as isize;
            if pos < 0 {
                classes.push(self.silence);
                // conditioning columns stay zero before the utterance start
            } else {
                let pos = pos as usize;
                classes.push(utt.classes[pos]);
                for c in 0..channels {
                    cond.data[c * total + i] = utt.cond.data[c * full_t + pos];
                }
            }
        }
        TrainSegment {
            utterance: utt.name.clone(),
            span: (start, start + len),
            classes,
            cond,
            target_start: rf,
        }
    }
}

/// Per-step record, also the loss-log line format.
#[derive(Debug, Clone, Copy)]
pub struct TrainReport {
    /// 1-based optimizer step count after the update.
    pub step: u64,
    /// Mean teacher-forced cross-entropy per target sample, in nats,
    /// measured before the update.
    pub loss: f64,
    /// Fraction of target samples whose argmax prediction is exact,
    /// before the update.
    pub accuracy: f64,
    pub seconds: f64,
}

/// One forward/backward/Adam cycle over a batch of segments.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    segments: &[TrainSegment],
) -> Result<TrainReport> {
    let started = std::time::Instant::now();
    if segments.is_empty() {
        return Err(Error::EmptyInput("training step with no segments".into()));
    }
    let total: usize = segments.iter().map(|s| s.target_len()).sum();
    let scale = 1.0 / total as f64;

    struct SegmentResult {
        loss: f64,
        correct: usize,
        grads: Vec<Option<Tensor>>,
    }
    let results: Vec<SegmentResult> = segments
        .par_iter()
        .map(|seg| -> Result<SegmentResult> {
            let tensors = params.tensors();
            let mut tape = GradTape::new(tensors);
            let (logits, loss) = build_training_graph(
                params,
                &mut tape,
                &seg.classes,
                &seg.cond,
                seg.target_start,
                scale,
            )
            .map_err(|e| annotate_segment(e, seg))?;
            let loss_value = tape.node(loss).data[0];
            if !loss_value.is_finite() {
                return Err(annotate_segment(
                    Error::NonFinite {
                        context: "training loss".to_string(),
                    },
                    seg,
                ));
            }
            let logit_rows = tape.node(logits);
            let q = params.config.classes;
            let mut correct = 0;
            for (i, &target) in seg.classes[seg.target_start..].iter().enumerate() {
                let t = seg.target_start + i;
                let row = &logit_rows.data[t * q..(t + 1) * q];
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                if best == target as usize {
                    correct += 1;
                }
            }
            let grads = tape.backward(loss).map_err(|e| annotate_segment(e, seg))?;
            Ok(SegmentResult {
                loss: loss_value,
                correct,
                grads: grads.params,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // deterministic reduction in segment order
    let mut merged: Vec<Option<Tensor>> = vec![None; params.tensors().len()];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for r in results {
        loss += r.loss;
        correct += r.correct;
        for (slot, g) in merged.iter_mut().zip(r.grads) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => {
                    for (a, v) in acc.data.iter_mut().zip(&g.data) {
                        *a += v;
                    }
                }
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
    }

    let names = params.names().to_vec();
    adam.step(params.tensors_mut(), &merged, &names)?;
    Ok(TrainReport {
        step: adam.t,
        loss,
        accuracy: correct as f64 / total as f64,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn annotate_segment(e: Error, seg: &TrainSegment) -> Error {
    match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!(
                "{context} (utterance '{}', samples {}..{})",
                seg.utterance, seg.span.0, seg.span.1
            ),
        },
        other => other,
    }
}

/// Mean teacher-forced cross-entropy and exact-prediction accuracy of a
/// full utterance under the current parameters.
pub fn teacher_forced_loss(
    params: &ModelParams,
    classes: &[u16],
    cond: &Tensor,
) -> Result<(f64, f64)> {
    let logits = forward_logits(params, classes, cond)?;
    let (loss, _) = cross_entropy_masked(&logits, classes, 0, 1.0 / classes.len() as f64)?;
    let q = params.config.classes;
    let mut correct = 0usize;
    for (t, &target) in classes.iter().enumerate() {
        let row = &logits.data[t * q..(t + 1) * q];
        let mut best = 0;
        for (c, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = c;
            }
        }
        if best == target as usize {
            correct += 1;
        }
    }
    Ok((loss, correct as f64 / classes.len() as f64))
}

/// Outcome of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub last_report: Option<TrainReport>,
}

/// Corpus split: utterances held out of the sampler for validation when
/// the corpus is large enough for a 5% holdout to be meaningful.
fn split_holdout(
    mut utterances: Vec<PreparedUtterance>,
    seed: u64,
) -> (Vec<PreparedUtterance>, Vec<PreparedUtterance>) {
    let n = utterances.len();
    let holdout = n / 20;
    if holdout == 0 {
        return (utterances, Vec::new());
    }
    // deterministic shuffle, then peel off the tail
    let mut rng = SplitMix64::derive(seed, u64::MAX);
    for i in (1..n).rev() {
        utterances.swap(i, rng.below(i + 1));
    }
    let held = utterances.split_off(n - holdout);
    (utterances, held)
}

/// Run (or resume) training: periodic checkpoints with optimizer state
/// alongside, a tab-separated loss log, and a final checkpoint whose path
/// is returned.
pub fn train(
    utterances: Vec<PreparedUtterance>,
    config: &TrainerConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (mut params, mut adam) = match resume {
        Some(ckpt) => {
            let params = checkpoint::load_checkpoint(ckpt)?;
            if params.config != config.model {
                return Err(Error::InvalidConfig(format!(
                    "resume checkpoint was trained with {:?} but the requested model is {:?}",
                    params.config, config.model
                )));
            }
            let adam = checkpoint::load_optimizer(&checkpoint::optimizer_path(ckpt), &params)?;
            (params, adam)
        }
        None => {
            let params = init_params(&config.model, config.seed)?;
            let shapes: Vec<Vec<usize>> =
                params.tensors().iter().map(|t| t.shape.clone()).collect();
            (params, AdamState::new(&shapes, config.learning_rate))
        }
    };
    let start_step = adam.t;
    if start_step > config.steps {
        return Err(Error::InvalidConfig(format!(
            "checkpoint is already at step {start_step}, beyond the requested {} steps",
            config.steps
        )));
    }

    let (train_set, holdout) = split_holdout(utterances, config.seed);
    let sampler = BatchSampler::new(train_set, config)?;

    let log_path = out_dir.join("train_log.tsv");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut last_report = None;
    for step in start_step..config.steps {
        let batch = sampler.batch(step);
        let report = train_step(&mut params, &mut adam, &batch)?;
        writeln!(
            log,
            "{}\t{:.6}\t{:.6}\t{:.3}",
            report.step, report.loss, report.accuracy, report.seconds
        )
        .map_err(|e| Error::io(&log_path, e))?;
        last_report = Some(report);

        let completed = step + 1;
        if config.checkpoint_every > 0
            && completed % config.checkpoint_every == 0
            && completed < config.steps
        {
            let path = out_dir.join(format!("ckpt_step{completed}.vckp"));
            checkpoint::save_checkpoint(&path, &params)?;
            checkpoint::save_optimizer(
                &checkpoint::optimizer_path(&path),
                &adam,
                params.names(),
            )?;
            validate_holdout(&params, &holdout, completed, out_dir)?;
        }
    }

    let final_path = out_dir.join("ckpt_final.vckp");
    checkpoint::save_checkpoint(&final_path, &params)?;
    checkpoint::save_optimizer(&checkpoint::optimizer_path(&final_path), &adam, params.names())?;
    validate_holdout(&params, &holdout, config.steps, out_dir)?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        last_report,
    })
}

/// Teacher-forced loss over held-out utterances, appended to its own log.
/// Capped per utterance to keep checkpoint-time evaluation cheap.
fn validate_holdout(
    params: &ModelParams,
    holdout: &[PreparedUtterance],
    step: u64,
    out_dir: &Path,
) -> Result<()> {
    if holdout.is_empty() {
        return Ok(());
    }
    const CAP: usize = 8_000;
    let mut total_loss = 0.0;
    let mut total = 0usize;
    for u in holdout {
        let len = u.classes.len().min(CAP);
        let cond = {
            let channels = u.cond.shape[0];
            let full = u.cond.shape[1];
            let mut t = Tensor::zeros(vec![channels, len]);
            for c in 0..channels {
                t.data[c * len..(c + 1) * len]
                    .copy_from_slice(&u.cond.data[c * full..c * full + len]);
            }
            t
        };
        let (loss, _) = teacher_forced_loss(params, &u.classes[..len], &cond)?;
        total_loss += loss * len as f64;
        total += len;
    }
    let path = out_dir.join("val_log.tsv");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(log, "{}\t{:.6}", step, total_loss / total as f64)
        .map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Quantization round-trip used when preparing synthetic corpora.
pub fn encode_for_model(signal: &WaveformSignal, model: &ModelConfig) -> ClassSequence {
    mulaw_encode(
        signal,
        MuLawConfig {
            classes: model.classes,
        },
    )
}
