//! `atlasgraph` — synthesize, fit, render, decompose, edit and evaluate
//! planar atlas scene graphs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use atlasgraph::editing::{apply_script, EditScript};
use atlasgraph::fields::Grid;
use atlasgraph::io::{
    checkpoint_precision, dequantize, format_db, load_checkpoint, load_dataset, quantize,
    save_checkpoint, save_dataset, save_png, synth_scene, Checkpoint, Dataset, Image, SynthSpec,
};
use atlasgraph::motion::frame_time;
use atlasgraph::optimize::{
    evaluate, excite_for_gradcheck, fit, gradcheck_scene, metrics_csv, Precision, TrainConfig,
};
use atlasgraph::renderer::{render_frame, render_layer};
use atlasgraph::scenegraph::{build_graph, SceneGraph};
use atlasgraph::Real;

#[derive(Parser)]
#[command(
    name = "atlasgraph",
    version,
    about = "Planar neural atlas scene graphs for video"
)]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video dataset plus its ground-truth graph.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene description (TOML); defaults to the built-in desk scene.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Use the built-in scene with flow and view effects.
        #[arg(long, conflicts_with = "spec")]
        parallax: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a graph to a dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Per-epoch CSV log (default: next to the checkpoint).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Render frames of a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Half-open frame range `a..b`.
        #[arg(long)]
        frames: Option<String>,
    },
    /// Render one node as straight-alpha RGBA layers.
    Decompose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        node: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<String>,
    },
    /// Apply an edit script and render the result.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<String>,
        /// Also write the edited graph as a checkpoint.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Per-frame PSNR/SSIM against a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long)]
        ckpt: PathBuf,
        /// Target video; without it the checkpoint's own renders are used.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Randomize field heads, tables and pose offsets first, so that
        /// every group carries a gradient.
        #[arg(long)]
        excite: bool,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Training config (TOML); defaults to the desk settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set use_flow=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                TrainConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => TrainConfig::desk(),
        };
        Ok(base.with_overrides(&self.set)?)
    }
}

fn parse_range(spec: Option<&str>, frames: usize) -> Result<Vec<usize>> {
    let Some(s) = spec else {
        return Ok((0..frames).collect());
    };
    let (a, b) = s
        .split_once("..")
        .with_context(|| format!("frame range {s:?} is not of the form a..b"))?;
    let a: usize = if a.is_empty() {
        0
    } else {
        a.parse()
            .with_context(|| format!("bad range start {a:?}"))?
    };
    let b: usize = if b.is_empty() {
        frames
    } else {
        b.parse().with_context(|| format!("bad range end {b:?}"))?
    };
    if a >= b || b > frames {
        bail!("frame range {a}..{b} is empty or outside 0..{frames}");
    }
    Ok((a..b).collect())
}

fn frame_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("{k:05}.png"))
}

/// Premultiplied RGBA → straight RGBA, as PNG viewers expect.
fn unpremultiply<R: Real>(layer: &Grid<R>) -> Image {
    let mut out = layer.cast::<f32>();
    for px in out.data.chunks_exact_mut(4) {
        let a = px[3];
        for c in &mut px[..3] {
            *c = if a > 0.0 {
                (*c / a).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    out
}

fn render_frames<R: Real>(graph: &SceneGraph<R>, frames: &[usize], out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for &k in frames {
        let img = render_frame(graph, k, graph.tau).cast::<f32>();
        save_png(&img, &frame_path(out, k))?;
    }
    log::info!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

/// Run `$body` with `$ckpt` loaded at the checkpoint's own precision.
macro_rules! with_checkpoint {
    ($path:expr, |$ckpt:ident| $body:expr) => {{
        let path: &Path = $path;
        match checkpoint_precision(path)? {
            Precision::F32 => {
                let $ckpt: Checkpoint<f32> = load_checkpoint(path)?;
                $body
            }
            Precision::F64 => {
                let $ckpt: Checkpoint<f64> = load_checkpoint(path)?;
                $body
            }
        }
    }};
}

fn run_fit<R: Real>(data: &Dataset, cfg: &TrainConfig, out: &Path, metrics: &Path) -> Result<()> {
    let start = Instant::now();
    let mut graph: SceneGraph<R> = build_graph(data, &cfg.graph)?;
    log::info!(
        "graph: {} nodes, {} parameters",
        graph.nodes.len(),
        graph.params.total_len()
    );
    let result = fit(&mut graph, data, cfg, |m| {
        let eval = match (m.psnr, m.ssim) {
            (Some(p), Some(s)) => format!(" psnr {} ssim {s:.4}", format_db(p)),
            _ => String::new(),
        };
        log::info!(
            "epoch {:3} loss {:.4e} lr {:.1e} tau {:.3}{eval} ({:.1}s)",
            m.epoch,
            m.loss,
            m.lr,
            m.tau,
            m.seconds
        );
    })?;
    save_checkpoint(out, &graph, Some(cfg), Some(&result.rng))?;
    if let Some(parent) = metrics.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(metrics, metrics_csv(&result.metrics))
        .with_context(|| format!("writing {}", metrics.display()))?;
    let last = result.metrics.last();
    println!(
        "fitted {} epochs in {:.1}s; final loss {:.4e}{}",
        cfg.epochs,
        start.elapsed().as_secs_f64(),
        last.map_or(f64::NAN, |m| m.loss),
        last.and_then(|m| m.psnr)
            .map_or(String::new(), |p| format!(", PSNR {} dB", format_db(p)))
    );
    Ok(())
}

/// Quantized renders of `graph` posing as a dataset without masks.
fn self_target<R: Real>(graph: &SceneGraph<R>) -> Dataset {
    let frames = (0..graph.frames)
        .map(|k| {
            let mut img = render_frame(graph, k, 1.0).cast::<f32>();
            img.data
                .iter_mut()
                .for_each(|v| *v = dequantize(quantize(*v)));
            img
        })
        .collect();
    let extrinsics = (0..graph.frames)
        .map(|k| {
            graph
                .camera
                .base_pose(frame_time(k, graph.frames))
                .to_matrix()
        })
        .collect();
    Dataset {
        intrinsics: graph.intrinsics,
        extrinsics,
        frames,
        nodes: Vec::new(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            seed,
            spec,
            parallax,
            out,
        } => {
            let spec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    SynthSpec::parse(&text)?
                }
                None if parallax => SynthSpec::parallax(),
                None => SynthSpec::default(),
            };
            let (data, graph) = synth_scene(seed, &spec)?;
            save_dataset(&data, &out)?;
            save_checkpoint(out.join("ground_truth.nag"), &graph, None, None)?;
            println!(
                "wrote {} frames ({}×{}), {} objects to {}",
                data.frame_count(),
                data.intrinsics.width,
                data.intrinsics.height,
                data.nodes.len(),
                out.display()
            );
        }
        Command::Fit {
            data,
            out,
            config,
            metrics,
        } => {
            let cfg = config.load()?;
            let dataset = load_dataset(&data)?;
            let metrics = metrics.unwrap_or_else(|| out.with_extension("csv"));
            match cfg.precision {
                Precision::F32 => run_fit::<f32>(&dataset, &cfg, &out, &metrics)?,
                Precision::F64 => run_fit::<f64>(&dataset, &cfg, &out, &metrics)?,
            }
        }
        Command::Render { ckpt, out, frames } => with_checkpoint!(&ckpt, |c| {
            let frames = parse_range(frames.as_deref(), c.graph.frames)?;
            render_frames(&c.graph, &frames, &out)?;
        }),
        Command::Decompose {
            ckpt,
            node,
            out,
            frames,
        } => with_checkpoint!(&ckpt, |c| {
            let frames = parse_range(frames.as_deref(), c.graph.frames)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for &k in &frames {
                let layer = render_layer(&c.graph, node, k, c.graph.tau)?;
                save_png(&unpremultiply(&layer), &frame_path(&out, k))?;
            }
            log::info!(
                "wrote {} layers of node {node} to {}",
                frames.len(),
                out.display()
            );
        }),
        Command::Edit {
            ckpt,
            script,
            out,
            frames,
            save,
        } => with_checkpoint!(&ckpt, |c| {
            let text = fs::read_to_string(&script)
                .with_context(|| format!("reading {}", script.display()))?;
            let parsed = EditScript::parse(&text)
                .with_context(|| format!("parsing {}", script.display()))?;
            let base = script.parent().unwrap_or(Path::new("."));
            let edited = apply_script(&c.graph, &parsed, base)?;
            let frames = parse_range(frames.as_deref(), edited.frames)?;
            render_frames(&edited, &frames, &out)?;
            if let Some(p) = save {
                save_checkpoint(&p, &edited, c.train.as_ref(), c.rng.as_ref())?;
            }
        }),
        Command::Eval { ckpt, data } => {
            let dataset = load_dataset(&data)?;
            with_checkpoint!(&ckpt, |c| {
                let opts = c.train.clone().unwrap_or_default().render_options();
                let report = evaluate(&c.graph, &dataset, &opts)?;
                println!("frame,psnr,ssim");
                for (k, (p, s)) in report.psnr.iter().zip(&report.ssim).enumerate() {
                    println!("{k},{},{s:.6}", format_db(*p));
                }
                println!(
                    "mean,{},{:.6}",
                    format_db(report.mean_psnr),
                    report.mean_ssim
                );
            })
        }
        Command::Gradcheck {
            ckpt,
            data,
            samples,
            step,
            seed,
            excite,
        } => {
            let (mut graph, train) = with_checkpoint!(&ckpt, |c| (c.graph.cast::<f64>(), c.train));
            let dataset = match data {
                Some(d) => load_dataset(&d)?,
                None => self_target(&graph),
            };
            if excite {
                excite_for_gradcheck(&mut graph, seed);
            }
            let cfg = train.unwrap_or_default();
            let report = gradcheck_scene(&graph, &dataset, &cfg, samples, step, seed)?;
            if report.probes.is_empty() {
                bail!("no usable probes ({} rejected at kinks)", report.rejected);
            }
            for p in &report.probes {
                log::debug!(
                    "{}[{}] analytic {:.6e} numeric {:.6e} rel {:.2e}",
                    p.name,
                    p.index,
                    p.analytic,
                    p.numeric,
                    p.rel_error
                );
            }
            let worst = report.worst().expect("non-empty");
            println!(
                "max relative error {:.3e} over {} probes ({} rejected); worst {}[{}]",
                report.max_rel_error,
                report.probes.len(),
                report.rejected,
                worst.name,
                worst.index
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
