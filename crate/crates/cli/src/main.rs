//! Command-line front end for the voice conversion pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 internal numeric failure.

mod corpus;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use wavevc::checkpoint;
use wavevc::compute::Tensor;
use wavevc::evaluator;
use wavevc::features::{estimate_f0_vuv, f0_statistics_from_contours, PitchConfig, UpsampleMode};
use wavevc::generator::{benchmark_generation, convert, ConvertOptions, SamplingMode};
use wavevc::io;
use wavevc::rng::SplitMix64;
use wavevc::trainer::{train, TrainerConfig};
use wavevc::wavenet::ModelConfig;
use wavevc::Error;

#[derive(Parser)]
#[command(
    name = "wavevc",
    version,
    about = "Vocoder-free voice conversion: train a conditional waveform model on PPG+f0+vuv \
             conditioning and synthesize converted speech sample by sample",
    arg_required_else_help = true
)]
struct Cli {
    /// Worker threads for batch assembly, evaluation and multi-utterance
    /// work (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ModelFlags {
    /// Dilated residual blocks.
    #[arg(long, default_value_t = 3)]
    blocks: usize,
    /// Dilated causal convolution layers per block; dilation doubles from 1
    /// within each block.
    #[arg(long, default_value_t = 10)]
    layers: usize,
    /// Convolution kernel size.
    #[arg(long, default_value_t = 2)]
    kernel_size: usize,
    /// Hidden units of the residual connection and gating layers.
    #[arg(long, default_value_t = 512)]
    residual_channels: usize,
    /// Skip connection channels.
    #[arg(long, default_value_t = 256)]
    skip_channels: usize,
    /// Quantization classes for the μ-law codec and the output
    /// distribution.
    #[arg(long, default_value_t = 256)]
    classes: usize,
}

impl ModelFlags {
    fn to_config(&self, cond_channels: usize) -> ModelConfig {
        ModelConfig {
            blocks: self.blocks,
            layers_per_block: self.layers,
            kernel_size: self.kernel_size,
            residual_channels: self.residual_channels,
            skip_channels: self.skip_channels,
            classes: self.classes,
            cond_channels,
        }
    }
}

#[derive(Args, Debug)]
struct PitchFlags {
    /// Lowest f0 considered, Hz.
    #[arg(long, default_value_t = 50.0)]
    f0_min: f64,
    /// Highest f0 considered, Hz.
    #[arg(long, default_value_t = 500.0)]
    f0_max: f64,
    /// Normalized autocorrelation peak required for a voiced frame.
    #[arg(long, default_value_t = 0.5)]
    voicing_threshold: f64,
}

impl PitchFlags {
    fn to_config(&self) -> PitchConfig {
        PitchConfig {
            f0_min_hz: self.f0_min,
            f0_max_hz: self.f0_max,
            voicing_threshold: self.voicing_threshold,
            ..PitchConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a conversion model on a corpus of <name>.wav + <name>.ppg.vcf1
    /// pairs of the target speaker.
    Train {
        /// Directory of paired .wav / .ppg.vcf1 files.
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Optimization steps.
        #[arg(long, default_value_t = 200_000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Adam learning rate.
        #[arg(long, default_value_t = 1e-4)]
        learning_rate: f64,
        /// Target samples per optimization step.
        #[arg(long, default_value_t = 15_000)]
        batch_samples: usize,
        /// Target samples per segment within a step.
        #[arg(long, default_value_t = 5_000)]
        segment_samples: usize,
        /// Write a checkpoint every this many steps.
        #[arg(long, default_value_t = 10_000)]
        checkpoint_every: u64,
        /// Resume from an earlier checkpoint (its .opt sidecar must exist).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Linearly interpolate conditioning between frames instead of
        /// repeating each frame.
        #[arg(long)]
        linear_upsample: bool,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        pitch: PitchFlags,
    },
    /// Convert one utterance through a trained model.
    Convert {
        /// Source speech (16 kHz mono PCM16 WAV).
        #[arg(long)]
        wav: PathBuf,
        /// Source PPG matrix (VCF1).
        #[arg(long)]
        ppg: PathBuf,
        /// Trained model checkpoint (VCKP).
        #[arg(long)]
        ckpt: PathBuf,
        /// Target speaker f0 statistics file (mu=/sigma= lines).
        #[arg(long)]
        target_f0_stats: PathBuf,
        /// Output WAV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampling mode: categorical, argmax, or a temperature value.
        #[arg(long, default_value = "categorical")]
        mode: String,
        /// Per-speaker source f0 statistics; defaults to statistics of the
        /// input utterance itself.
        #[arg(long)]
        source_f0_stats: Option<PathBuf>,
        #[arg(long)]
        linear_upsample: bool,
        #[command(flatten)]
        pitch: PitchFlags,
    },
    /// Pool voiced frames over a corpus of WAVs and write log-domain f0
    /// statistics.
    F0Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pitch: PitchFlags,
    },
    /// Extract per-frame f0 and voicing from one WAV into VCF1 columns.
    Features {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out_f0: PathBuf,
        #[arg(long)]
        out_vuv: PathBuf,
        #[command(flatten)]
        pitch: PitchFlags,
    },
    /// Log-spectral RMSE between matching files of two directories.
    Evaluate {
        #[arg(long)]
        target_dir: PathBuf,
        #[arg(long)]
        converted_dir: PathBuf,
        /// Machine-readable TSV report destination.
        #[arg(long)]
        report: PathBuf,
    },
    /// Throughput of the naive and cached generation paths.
    GenBench {
        #[arg(long)]
        ckpt: PathBuf,
        /// Samples generated on the fast path.
        #[arg(long, default_value_t = 2_000)]
        samples: usize,
        /// Samples generated on the naive path (kept small; it re-runs the
        /// full receptive field per sample).
        #[arg(long, default_value_t = 30)]
        naive_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; usage problems exit 1, an
            // explicit help/version request is a success
            let requested = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return ExitCode::from(if requested { 0 } else { 1 });
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(command: Command) -> wavevc::Result<()> {
    match command {
        Command::Train {
            corpus,
            out,
            steps,
            seed,
            learning_rate,
            batch_samples,
            segment_samples,
            checkpoint_every,
            resume,
            linear_upsample,
            model,
            pitch,
        } => {
            let upsample = if linear_upsample {
                UpsampleMode::Linear
            } else {
                UpsampleMode::Hold
            };
            let pairs = corpus::paired_corpus(&corpus)?;
            let ppg_dim = corpus::ppg_dimension(&pairs)?;
            let config = TrainerConfig {
                model: model.to_config(ppg_dim + 2),
                learning_rate,
                batch_samples,
                segment_samples,
                steps,
                checkpoint_every,
                seed,
            };
            let utterances =
                corpus::prepare_corpus(&pairs, &config.model, &pitch.to_config(), upsample)?;
            let outcome = train(utterances, &config, &out, resume.as_deref())?;
            if let Some(report) = outcome.last_report {
                println!(
                    "trained {} steps; final loss {:.4} nats, accuracy {:.4}",
                    report.step, report.loss, report.accuracy
                );
            }
            println!("{}", outcome.final_checkpoint.display());
            Ok(())
        }
        Command::Convert {
            wav,
            ppg,
            ckpt,
            target_f0_stats,
            out,
            seed,
            mode,
            source_f0_stats,
            linear_upsample,
            pitch,
        } => {
            let params = checkpoint::load_checkpoint(&ckpt)?;
            let source = io::read_wav(&wav)?;
            let ppg_frames = io::read_vcf1(&ppg)?;
            let target_stats = io::read_f0_stats(&target_f0_stats)?;
            let opts = ConvertOptions {
                seed,
                mode: parse_mode(&mode)?,
                upsample: if linear_upsample {
                    UpsampleMode::Linear
                } else {
                    UpsampleMode::Hold
                },
                pitch: pitch.to_config(),
                source_stats: source_f0_stats
                    .map(|p| io::read_f0_stats(&p))
                    .transpose()?,
            };
            let converted = convert(&params, &source, &ppg_frames, &target_stats, &opts)?;
            io::write_wav(&out, &converted.signal)?;
            println!(
                "{} ({} samples, {:.3} s)",
                out.display(),
                converted.signal.len(),
                converted.signal.duration_seconds()
            );
            Ok(())
        }
        Command::F0Stats { corpus, out, pitch } => {
            let wavs = corpus::wav_files(&corpus)?;
            let pitch = pitch.to_config();
            let mut contours = Vec::new();
            for path in &wavs {
                let signal = io::read_wav(path)?;
                contours.push(estimate_f0_vuv(&signal, &pitch)?);
            }
            let stats = f0_statistics_from_contours(
                contours.iter().map(|(f, v)| (f.as_slice(), v.as_slice())),
            )?;
            io::write_f0_stats(&out, &stats)?;
            println!(
                "mu={} sigma={} over {} voiced frames from {} files",
                stats.mu,
                stats.sigma,
                stats.frame_count,
                wavs.len()
            );
            Ok(())
        }
        Command::Features {
            wav,
            out_f0,
            out_vuv,
            pitch,
        } => {
            let signal = io::read_wav(&wav)?;
            let (f0, vuv) = estimate_f0_vuv(&signal, &pitch.to_config())?;
            io::write_vcf1_column(&out_f0, &f0)?;
            let vuv: Vec<f64> = vuv.iter().map(|&v| v as f64).collect();
            io::write_vcf1_column(&out_vuv, &vuv)?;
            println!("{} frames", f0.len());
            Ok(())
        }
        Command::Evaluate {
            target_dir,
            converted_dir,
            report,
        } => {
            let pairs = corpus::matched_wavs(&target_dir, &converted_dir)?;
            let mut loaded = Vec::new();
            for (name, target, converted) in pairs {
                loaded.push((name, io::read_wav(&target)?, io::read_wav(&converted)?));
            }
            let result = evaluator::evaluate_corpus(loaded)?;
            std::fs::write(&report, result.to_tsv())
                .map_err(|e| Error::io(&report, e))?;
            print!("{}", result.to_text());
            Ok(())
        }
        Command::GenBench {
            ckpt,
            samples,
            naive_samples,
            seed,
        } => {
            let params = checkpoint::load_checkpoint(&ckpt)?;
            let t_len = samples.max(naive_samples).max(1);
            let mut rng = SplitMix64::new(seed);
            let cond = Tensor::new(
                vec![params.config.cond_channels, t_len],
                (0..params.config.cond_channels * t_len)
                    .map(|_| rng.uniform(1.0))
                    .collect(),
            )
            .expect("shape matches data by construction");
            let bench = benchmark_generation(&params, &cond, naive_samples, samples, seed)?;
            println!("naive\t{:.3}", bench.naive_samples_per_s);
            println!("fast\t{:.3}", bench.fast_samples_per_s);
            log::info!("speedup: {:.1}x", bench.speedup());
            Ok(())
        }
    }
}

fn parse_mode(mode: &str) -> wavevc::Result<SamplingMode> {
    match mode {
        "categorical" => Ok(SamplingMode::Categorical),
        "argmax" => Ok(SamplingMode::Argmax),
        other => other
            .parse::<f64>()
            .map(SamplingMode::Temperature)
            .map_err(|_| {
                Error::InvalidConfig(format!(
                    "sampling mode must be 'categorical', 'argmax' or a temperature, got '{other}'"
                ))
            }),
    }
}
