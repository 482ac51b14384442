//! `qsdiar` command-line interface.

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use qsdiar::federated::Mode;
use qsdiar::frontend::{load_wav, write_wav, AudioSignal};
use qsdiar::identifier::{load_checkpoint, save_checkpoint};
use qsdiar::metrics::{corpus_scores, match_change_points, seg_scores};
use qsdiar::pipeline::{
    export_rttm, identifier_with_bank, prepare_corpus, read_change_point_times, run_fedsim,
    run_pipeline, sweep, write_sweep_csv, DiarizationResult, Identifier,
};
use qsdiar::segmentation::Method;
use qsdiar::synth::{random_spec, synth_conversation, synth_corpus, GroundTruth};
use qsdiar::{Stage, StageExt};

use config::FileConfig;

/// Frames per embedding when seeding the bank from the speaker corpus.
const BANK_CHUNK_FRAMES: usize = 50;

#[derive(Parser, Debug)]
#[command(
    name = "qsdiar",
    version,
    about = "Quasi-silence anchored speaker diarization"
)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (also settable through QSDIAR_OUT_DIR).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Top-level seed for every random component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct SegArgs {
    #[arg(long)]
    method: Option<Method>,
    /// Scan window length in frames.
    #[arg(long)]
    window: Option<usize>,
    /// Split stride as a fraction of the window.
    #[arg(long)]
    stride: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct IdArgs {
    /// Identifier checkpoint written by `fedsim`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Cosine-similarity gate for the online update.
    #[arg(long)]
    tau: Option<f64>,
    /// Run the gated online update while labelling clusters.
    #[arg(long)]
    online: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a conversation with ground truth.
    Synth {
        /// Base name of the written `.wav` and `.truth.json`.
        #[arg(long, default_value = "conversation")]
        name: String,
    },
    /// Detect speaker change points.
    Segment {
        wav: PathBuf,
        #[command(flatten)]
        seg: SegArgs,
    },
    /// Detect change points and cluster the segments.
    Cluster {
        wav: PathBuf,
        #[command(flatten)]
        seg: SegArgs,
    },
    /// Cluster and label every cluster with a speaker.
    Identify {
        wav: PathBuf,
        #[command(flatten)]
        seg: SegArgs,
        #[command(flatten)]
        id: IdArgs,
    },
    /// Full pipeline with optional scoring against ground truth.
    Diarize {
        wav: PathBuf,
        /// Ground-truth JSON written by `synth`.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value = "diarization")]
        name: String,
        #[command(flatten)]
        seg: SegArgs,
        #[command(flatten)]
        id: IdArgs,
    },
    /// Window × stride × method grid over a synthetic corpus.
    Sweep {
        #[arg(long)]
        conversations: Option<usize>,
    },
    /// Train the identifier across a simulated device network.
    Fedsim {
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        lr0: Option<f64>,
    },
    /// Score a change-point CSV against ground truth.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        changepoints: PathBuf,
        #[arg(long)]
        collar: Option<f64>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain on one line, skipping causes already quoted by their
/// parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !msg.contains(&text) {
            msg = format!("{msg}: {text}");
        }
    }
    msg
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg.apply_seed(seed);
    let out = cfg.out_dir(cli.out_dir.as_deref());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    match cli.command {
        Command::Synth { name } => cmd_synth(&cfg, &out, &name),
        Command::Segment { wav, seg } => {
            apply_seg(&mut cfg, &seg);
            let r = diarize(&cfg, &wav, None, None)?;
            write_with(&out.join("changepoints.csv"), |w| {
                r.write_change_points_csv(w)
            })?;
            write_with(&out.join("silences.csv"), |w| {
                qsdiar::silence::write_regions_csv(w, &r.silences, cfg.pipeline.mfcc.hop_sec())
            })?;
            println!("{} change points", r.change_points.len());
            Ok(())
        }
        Command::Cluster { wav, seg } => {
            apply_seg(&mut cfg, &seg);
            let r = diarize(&cfg, &wav, None, None)?;
            write_with(&out.join("changepoints.csv"), |w| {
                r.write_change_points_csv(w)
            })?;
            write_with(&out.join("clusters.csv"), |w| r.write_clusters_csv(w))?;
            println!(
                "{} change points, {} clusters",
                r.change_points.len(),
                r.clusters.len()
            );
            Ok(())
        }
        Command::Identify { wav, seg, id } => {
            apply_seg(&mut cfg, &seg);
            apply_id(&mut cfg, &id);
            let model = id.model.as_deref().context("identify needs --model")?;
            let mut identifier = load_identifier(&cfg, model)?;
            let r = diarize(&cfg, &wav, Some(&mut identifier), None)?;
            write_with(&out.join("clusters.csv"), |w| r.write_clusters_csv(w))?;
            std::fs::write(
                out.join("identify.json"),
                serde_json::to_string_pretty(&r.clusters)?,
            )?;
            for c in &r.clusters {
                println!(
                    "cluster {} -> speaker {} ({:.3})",
                    c.cluster_id,
                    c.speaker.unwrap_or_default(),
                    c.confidence.unwrap_or_default()
                );
            }
            Ok(())
        }
        Command::Diarize {
            wav,
            truth,
            name,
            seg,
            id,
        } => {
            apply_seg(&mut cfg, &seg);
            apply_id(&mut cfg, &id);
            let truth = truth.as_deref().map(read_truth).transpose()?;
            let mut identifier = id
                .model
                .as_deref()
                .map(|m| load_identifier(&cfg, m))
                .transpose()?;
            let r = diarize(&cfg, &wav, identifier.as_mut(), truth.as_ref())?;
            let file_id = wav
                .file_stem()
                .map_or("audio".into(), |s| s.to_string_lossy().into_owned());
            std::fs::write(out.join(format!("{name}.json")), r.to_json()?)?;
            write_with(&out.join(format!("{name}.rttm")), |w| {
                export_rttm(&r.labeled_intervals(&file_id), w)
            })?;
            write_with(&out.join("changepoints.csv"), |w| {
                r.write_change_points_csv(w)
            })?;
            write_with(&out.join("clusters.csv"), |w| r.write_clusters_csv(w))?;
            if let Some(report) = &r.report {
                std::fs::write(
                    out.join("report.json"),
                    serde_json::to_string_pretty(report)?,
                )?;
                println!(
                    "fdr {:.4} mdr {:.4} f_seg {:.4} purity {:.4} coverage {:.4}",
                    report.fdr, report.mdr, report.f_seg, report.purity, report.coverage
                );
                if let Some(f_id) = report.f_id {
                    println!("f_id {f_id:.4}");
                }
            }
            println!(
                "{} change points, {} clusters",
                r.change_points.len(),
                r.clusters.len()
            );
            Ok(())
        }
        Command::Sweep { conversations } => {
            let count = conversations.unwrap_or(cfg.sweep.conversations);
            let corpus = synth_corpus(&cfg.speakers.pool(), &cfg.conversation, count, cfg.seed)?;
            let prepared = prepare_corpus(&corpus, &cfg.pipeline)?;
            let rows = sweep(
                &prepared,
                &cfg.pipeline,
                &cfg.sweep.windows,
                &cfg.sweep.strides,
            )?;
            write_with(&out.join("sweep.csv"), |w| write_sweep_csv(&rows, w))?;
            for r in &rows {
                println!(
                    "{:>4} {:.1} {:<3} fdr {:.4} mdr {:.4} f {:.4} delta_bic {}",
                    r.window,
                    r.stride,
                    r.method,
                    r.averages.fdr,
                    r.averages.mdr,
                    r.averages.f_of_means,
                    r.counters.delta_bic_count
                );
            }
            Ok(())
        }
        Command::Fedsim {
            mode,
            group_size,
            clients,
            rounds,
            lr0,
        } => {
            let f = &mut cfg.federated;
            f.mode = mode.unwrap_or(f.mode);
            f.group_size = group_size.unwrap_or(f.group_size);
            f.num_clients = clients.unwrap_or(f.num_clients);
            f.rounds = rounds.unwrap_or(f.rounds);
            f.lr0 = lr0.unwrap_or(f.lr0);
            let (report, state) = run_fedsim(&cfg.speakers, &cfg.federated, &cfg.pipeline.mfcc)?;
            write_with(&out.join("fed_history.csv"), |w| state.write_history_csv(w))?;
            std::fs::write(out.join("fedsim.json"), report.to_json()?)?;
            // every client ends on its group's model; the first one is exported
            write_with(&out.join("model.ckpt"), |w| {
                save_checkpoint(state.clients[0].model(), w)
            })?;
            println!(
                "{} {} clients, final accuracy {:.4}, loss {:.4}",
                report.mode, report.num_clients, report.final_accuracy, report.final_loss
            );
            Ok(())
        }
        Command::Eval {
            truth,
            changepoints,
            collar,
        } => {
            let truth = read_truth(&truth)?;
            let detected = read_change_point_times(BufReader::new(File::open(&changepoints)?))?;
            let collar = collar.unwrap_or(cfg.pipeline.collar_sec);
            let m = match_change_points(&truth.change_points_sec, &detected, collar)?;
            let s = seg_scores(&m);
            let c = corpus_scores(std::slice::from_ref(&m))?;
            let json = serde_json::json!({
                "fdr": s.fdr,
                "mdr": s.mdr,
                "f_seg": s.f_seg,
                "purity": c.purity,
                "coverage": c.coverage,
                "matched": m.matched(),
                "detected": detected.len(),
                "true": truth.change_points_sec.len(),
                "collar_sec": collar,
            });
            let text = serde_json::to_string_pretty(&json)?;
            std::fs::write(out.join("eval.json"), &text)?;
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_synth(cfg: &FileConfig, out: &Path, name: &str) -> anyhow::Result<()> {
    let spec = random_spec(&cfg.speakers.pool(), &cfg.conversation, cfg.seed)?;
    let (audio, truth) = synth_conversation(&spec)?;
    let audio = AudioSignal::new(audio.samples, audio.sample_rate_hz, name);
    write_wav(out.join(format!("{name}.wav")), &audio)?;
    std::fs::write(
        out.join(format!("{name}.truth.json")),
        serde_json::to_string_pretty(&truth)?,
    )?;
    println!(
        "{:.2} s, {} turns, {} change points",
        audio.duration_sec(),
        truth.turns.len(),
        truth.change_points_sec.len()
    );
    Ok(())
}

fn apply_seg(cfg: &mut FileConfig, a: &SegArgs) {
    let s = &mut cfg.pipeline.segmentation;
    s.method = a.method.unwrap_or(s.method);
    s.window_frames = a.window.unwrap_or(s.window_frames);
    s.stride_fraction = a.stride.unwrap_or(s.stride_fraction);
}

fn apply_id(cfg: &mut FileConfig, a: &IdArgs) {
    let i = &mut cfg.pipeline.identify;
    i.online.tau = a.tau.unwrap_or(i.online.tau);
    i.online_update |= a.online;
}

fn diarize(
    cfg: &FileConfig,
    wav: &Path,
    identifier: Option<&mut Identifier>,
    truth: Option<&GroundTruth>,
) -> anyhow::Result<DiarizationResult> {
    let audio = load_wav(wav)
        .stage(Stage::Frontend)
        .with_context(|| format!("loading {}", wav.display()))?;
    Ok(run_pipeline(&audio, &cfg.pipeline, identifier, truth)?)
}

fn load_identifier(cfg: &FileConfig, path: &Path) -> anyhow::Result<Identifier> {
    let file = File::open(path).with_context(|| format!("opening model {}", path.display()))?;
    let model = load_checkpoint(BufReader::new(file))?;
    if cfg.pipeline.identify.online_update {
        let frames = cfg.speakers.frames(&cfg.pipeline.mfcc)?;
        Ok(identifier_with_bank(model, &frames, BANK_CHUNK_FRAMES)?)
    } else {
        Ok(Identifier { model, bank: None })
    }
}

fn read_truth(path: &Path) -> anyhow::Result<GroundTruth> {
    let file = File::open(path).with_context(|| format!("opening truth {}", path.display()))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn write_with<F>(path: &Path, f: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> qsdiar::Result<()>,
{
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}
