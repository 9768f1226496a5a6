//! Command-line front end: window design, WAV processing, and the two
//! benchmark studies.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use qplimit::engine::config::parse_config;
use qplimit::engine::{write_stats_csv, MixerLimiter};
use qplimit::experiments::{
    run_premixer_experiment, run_reduction_experiment, PremixExperimentConfig,
    ReductionExperimentConfig, SignalSpec,
};
use qplimit::wav;
use qplimit::window::{design_window, io as window_io, WindowSpec};

#[derive(Parser)]
#[command(
    name = "qplimit",
    about = "QP-based multichannel mixer-limiter",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Design a smooth COLA limiter window and write it to disk.
    DesignWindow {
        /// Window length M in samples.
        #[arg(long)]
        length: usize,
        /// Frame hop F in samples.
        #[arg(long)]
        hop: usize,
        /// Attack-onset sample index (1-based).
        #[arg(long)]
        attack: usize,
        /// Release-onset sample index (1-based).
        #[arg(long)]
        release: usize,
        /// Output path for the raw little-endian f64 samples; a JSON
        /// sidecar lands at <out>.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Limit a multi-lane WAV file.
    Process {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Optional per-frame stats CSV.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Reference studies emitting CSV reports.
    Bench {
        #[command(subcommand)]
        which: BenchCommand,
    },
}

#[derive(Args)]
struct BenchCommon {
    /// Output directory for the CSV files.
    #[arg(long)]
    out: PathBuf,
    /// Frame size in samples.
    #[arg(long, default_value_t = 256)]
    frame: usize,
    /// Look-ahead in samples.
    #[arg(long, default_value_t = 768)]
    lookahead: usize,
    /// Signal duration in seconds.
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    /// Sample rate in Hz.
    #[arg(long, default_value_t = 48_000.0)]
    sample_rate: f64,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Pre-mixer distortion study on the AM lane tensor.
    Premix {
        #[command(flatten)]
        common: BenchCommon,
    },
    /// Constraint-reduction statistics on full-scale tone banks.
    Reduce {
        #[command(flatten)]
        common: BenchCommon,
        /// Channel counts to sweep (tone bank width).
        #[arg(long, value_delimiter = ',', default_values_t = vec![2, 3, 4, 5, 6])]
        channels: Vec<usize>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::DesignWindow { length, hop, attack, release, out } => {
            let spec = WindowSpec::new(length, hop, attack, release)?;
            let window = design_window(&spec)?;
            window_io::export_window(&window, &out)?;
            println!(
                "wrote {} ({} samples, cola residual {:.3e}, smoothness {:.6e})",
                out.display(),
                window.samples.len(),
                window.cola_residual,
                window.smoothness
            );
        }
        Command::Process { input, config, output, stats } => {
            let json = fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let (cfg, lane_map) = parse_config(&json)?;
            let (stream, wav_rate) = wav::read_stream(
                &input,
                &lane_map,
                cfg.n_bands,
                cfg.n_contents,
                cfg.n_mixers,
            )?;
            if (wav_rate as f64 - cfg.sample_rate).abs() > 0.5 {
                eprintln!(
                    "note: wav sample rate {wav_rate} differs from config {}; using the wav rate for output",
                    cfg.sample_rate
                );
            }
            let mut limiter = MixerLimiter::new(cfg)?;
            if limiter.objective().was_normalized {
                eprintln!("note: attenuation rates summed above one and were normalized");
            }
            let out = limiter.process(&stream)?;
            for w in &out.warnings {
                eprintln!("warning: frame {}: {}", w.frame, w.detail);
            }
            wav::write_mixtures(&output, &out.mixtures, wav_rate)?;
            println!(
                "wrote {} ({} mixers, {} samples, {} frames, {} guard clips)",
                output.display(),
                out.mixtures.len(),
                stream.len,
                out.stats.len(),
                out.guard_clips
            );
            if let Some(stats_path) = stats {
                let mut f = fs::File::create(&stats_path)
                    .with_context(|| format!("creating {}", stats_path.display()))?;
                write_stats_csv(&mut f, &out.stats)?;
                println!("wrote {}", stats_path.display());
            }
        }
        Command::Bench { which } => match which {
            BenchCommand::Premix { common } => {
                fs::create_dir_all(&common.out)?;
                if common.duration <= 0.0 {
                    bail!("duration must be positive");
                }
                let mut signal = SignalSpec::am_default();
                signal.duration = common.duration;
                signal.sample_rate = common.sample_rate;
                let cfg = PremixExperimentConfig {
                    signal,
                    frame_size: common.frame,
                    lookahead: common.lookahead,
                    ..Default::default()
                };
                let report = run_premixer_experiment(&cfg)?;
                let frames_path = common.out.join("premix_frames.csv");
                let summary_path = common.out.join("premix_summary.csv");
                report.write_frames_csv(&mut fs::File::create(&frames_path)?)?;
                report.write_summary_csv(&mut fs::File::create(&summary_path)?)?;
                for s in &report.series {
                    println!("{:<16} f = {:.3} +/- {:.3}", s.premixer, s.mean_f, s.std_f);
                }
                println!("wrote {} and {}", frames_path.display(), summary_path.display());
            }
            BenchCommand::Reduce { common, channels } => {
                fs::create_dir_all(&common.out)?;
                let cfg = ReductionExperimentConfig {
                    channels,
                    frame_size: common.frame,
                    lookahead: common.lookahead,
                    duration: common.duration,
                    sample_rate: common.sample_rate,
                    ..Default::default()
                };
                let report = run_reduction_experiment(&cfg);
                let frames_path = common.out.join("reduce_frames.csv");
                let summary_path = common.out.join("reduce_summary.csv");
                report.write_frames_csv(&mut fs::File::create(&frames_path)?)?;
                report.write_summary_csv(&mut fs::File::create(&summary_path)?)?;
                for s in &report.summaries {
                    println!(
                        "N={}: implied {:.1}+/-{:.1}  tightened {:.1}+/-{:.1}  non-occluded {:.1}+/-{:.1}  convex {:.1}+/-{:.1}",
                        s.n_channels,
                        s.mean_implied,
                        s.std_implied,
                        s.mean_tightened,
                        s.std_tightened,
                        s.mean_nonoccluded,
                        s.std_nonoccluded,
                        s.mean_convex,
                        s.std_convex
                    );
                }
                println!("wrote {} and {}", frames_path.display(), summary_path.display());
            }
        },
    }
    Ok(())
}
