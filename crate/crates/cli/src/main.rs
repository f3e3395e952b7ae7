//! `jntrack`: data generation, training, tracking, evaluation and ablations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use jn_track::config::RunConfig;
use jn_track::data::{gen_synthetic, generate_split, regression_target_histogram, Dataset, Split};
use jn_track::eval::{evaluate, success_curve, success_thresholds, summary_json, template_input, write_results};
use jn_track::experiments::{mean_ao, rho_label, sweep_rho, write_sweep};
use jn_track::geometry::make_crop;
use jn_track::heads::HeadMaps;
use jn_track::imaging::{mean_color, render_crop, save_ppm, tensor_to_rgb, Photometric};
use jn_track::model::{load_checkpoint, Model, PairInput};
use jn_track::trainer::{grad_check, tiny_model_config, train, TrainOptions};
use jn_track::visuals::{histogram_svg, success_svg, write_attention_pgms, write_distribution_svg, write_text};
use serde_json::json;

#[derive(Parser)]
#[command(name = "jntrack", version, about = "Joint positive/negative transformer tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat dotted-key JSON config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.sampler.rho=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and test splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model; writes checkpoint.bin, loss.csv, epochs.csv and config.json.
    Train {
        /// Dataset root with a `train/` directory (or a split directory); generated in memory if omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Track sequences and write per-sequence CSVs.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sequence names; all sequences if omitted.
        #[arg(long = "seq")]
        seqs: Vec<String>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate on the test split; prints the summary JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// End-to-end finite-difference gradient check on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate over positive ratios and seeds.
    SweepRho {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Histogram of regression targets on the train split.
    PlotHist {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "results/visuals/histogram.svg")]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        bins: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Attention maps, distributions and a success curve for one sequence.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "seq")]
        seq: Option<String>,
        #[arg(long, default_value_t = 1)]
        frame: usize,
        #[arg(long, default_value = "results/visuals")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<jn_track::Error> for Failure {
    fn from(e: jn_track::Error) -> Self {
        let (code, kind) = if e.is_config() { (1, "config") } else { (2, "runtime") };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        kind: "usage",
        message: message.into(),
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn resolve(args: &ConfigArgs, fallback: Option<&Path>) -> Res<RunConfig> {
    let base = match (&args.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(p)?,
        _ => RunConfig::default(),
    };
    Ok(base.with_overrides(&args.sets)?)
}

/// `root/<split>` when present, else `root` itself; generated from the config when absent.
fn load_split(data: Option<&Path>, split: Split, cfg: &RunConfig) -> Res<Dataset> {
    match data {
        Some(root) => {
            let sub = root.join(split.name());
            Ok(Dataset::load(if sub.is_dir() { &sub } else { root })?)
        }
        None => Ok(generate_split(&cfg.data, split)?),
    }
}

/// Model from a checkpoint; the config defaults to `config.json` beside it.
fn load_model(checkpoint: &Path, args: &ConfigArgs) -> Res<(Model, RunConfig)> {
    let beside = checkpoint.parent().map(|d| d.join("config.json"));
    let cfg = resolve(args, beside.as_deref())?;
    let mut model = Model::new(cfg.train.model.clone(), cfg.train.seed)?;
    load_checkpoint(checkpoint, &mut model)?;
    Ok((model, cfg))
}

fn run(cli: Cli) -> Res<()> {
    match cli.command {
        Command::GenData { out, cfg } => {
            let cfg = resolve(&cfg, None)?;
            gen_synthetic(&cfg.data, &out)?;
            cfg.write_resolved(&out)?;
            println!("{}", json!({"train": out.join("train"), "test": out.join("test")}));
        }
        Command::Train { data, out, quiet, cfg } => {
            let cfg = resolve(&cfg, None)?;
            cfg.write_resolved(&out)?;
            let ds = load_split(data.as_deref(), Split::Train, &cfg)?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                progress: !quiet,
            };
            let res = train(&cfg.train, &ds, &opts)?;
            let ckpt = res.checkpoint.expect("checkpoint written with an output directory");
            println!("{}", json!({"checkpoint": ckpt, "final_loss": res.final_loss, "epochs": res.epochs}));
        }
        Command::Track {
            checkpoint,
            data,
            seqs,
            out,
            cfg,
        } => {
            let (model, cfg) = load_model(&checkpoint, &cfg)?;
            let mut ds = load_split(data.as_deref(), Split::Test, &cfg)?;
            if !seqs.is_empty() {
                if let Some(missing) = seqs.iter().find(|n| !ds.sequences.iter().any(|s| &s.name == *n)) {
                    return Err(usage(format!("no sequence named {missing:?}")));
                }
                ds.sequences.retain(|s| seqs.contains(&s.name));
            }
            let ev = evaluate(&model, &ds, &cfg.tracker)?;
            write_results(&out, &ev)?;
            cfg.write_resolved(&out)?;
            for r in &ev.sequences {
                println!("{}", json!({"sequence": r.name, "ao": r.ao, "sr50": r.sr50, "frames": r.frames.len()}));
            }
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            cfg,
        } => {
            let (model, cfg) = load_model(&checkpoint, &cfg)?;
            let ds = load_split(data.as_deref(), Split::Test, &cfg)?;
            let ev = evaluate(&model, &ds, &cfg.tracker)?;
            write_results(&out, &ev)?;
            cfg.write_resolved(&out)?;
            write_text(&out.join("timing.json"), &format!("{}\n", json!({"fps": ev.fps})))?;
            let all: Vec<f64> = ev.sequences.iter().flat_map(|r| r.frames.iter().filter_map(|f| f.iou)).collect();
            write_text(
                &out.join("visuals/success.svg"),
                &success_svg(&success_thresholds(), &[("tracker".into(), success_curve(&all))]),
            )?;
            print!("{}", summary_json(&ev.summary));
        }
        Command::Gradcheck { count, seed, cfg } => {
            let cfg = resolve(&cfg, None)?;
            let mut failed = Vec::new();
            for head in [
                jn_track::heads::HeadKind::Dist,
                jn_track::heads::HeadKind::Center,
                jn_track::heads::HeadKind::Corner,
            ] {
                let r = grad_check(&tiny_model_config(head), &cfg.train.loss, seed, count, 1e-4, 1e-4)?;
                let worst = r.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
                println!(
                    "{}",
                    json!({"head": head.name(), "checked": r.checks.len(), "skipped_nonsmooth": r.skipped_nonsmooth, "max_rel_error": worst, "passed": r.passed()})
                );
                failed.extend(r.failures().iter().map(|c| format!("{}:{}[{}]", head.name(), c.name, c.index)));
            }
            if !failed.is_empty() {
                return Err(Failure {
                    code: 2,
                    kind: "gradcheck",
                    message: format!("gradient mismatch at {}", failed.join(", ")),
                });
            }
        }
        Command::SweepRho { data, out, cfg } => {
            let cfg = resolve(&cfg, None)?;
            cfg.write_resolved(&out)?;
            let train_ds = load_split(data.as_deref(), Split::Train, &cfg)?;
            let test_ds = load_split(data.as_deref(), Split::Test, &cfg)?;
            let s = &cfg.sweep;
            let results = sweep_rho(
                &cfg.train,
                &s.rhos,
                &s.seeds,
                s.lr_drop_fraction,
                s.early_epochs,
                &train_ds,
                &test_ds,
                &cfg.tracker,
                |r| println!("{}", serde_json::to_string(r).expect("trial serializes")),
            )?;
            write_sweep(&out, &results)?;
            let means: serde_json::Map<String, serde_json::Value> = s
                .rhos
                .iter()
                .map(|&r| (rho_label(r), json!(mean_ao(&results, &rho_label(r)))))
                .collect();
            println!("{}", json!({"mean_ao": means}));
        }
        Command::PlotHist { data, out, bins, cfg } => {
            let cfg = resolve(&cfg, None)?;
            let start = Instant::now();
            let ds = load_split(data.as_deref(), Split::Train, &cfg)?;
            let e = &cfg.train.model.encoder;
            let grid = jn_track::heads::Grid::new(e.search_grid(), e.search_res);
            let n = cfg.train.model.dist.n as f64;
            let h = regression_target_histogram(&ds, &cfg.train.sampler, &cfg.train.crop(), &grid, bins, n)?;
            write_text(&out, &histogram_svg(&h))?;
            println!(
                "{}",
                json!({"svg": out, "fraction_in_support": h.fraction_in_support(), "targets": h.total, "samples": h.samples, "secs": start.elapsed().as_secs_f64()})
            );
        }
        Command::Visualize {
            checkpoint,
            data,
            seq,
            frame,
            out,
            cfg,
        } => {
            let (model, cfg) = load_model(&checkpoint, &cfg)?;
            let ds = load_split(data.as_deref(), Split::Test, &cfg)?;
            let s = match &seq {
                Some(name) => ds
                    .sequences
                    .iter()
                    .find(|s| &s.name == name)
                    .ok_or_else(|| usage(format!("no sequence named {name:?}")))?,
                None => &ds.sequences[0],
            };
            if frame == 0 || frame >= s.len() {
                return Err(usage(format!("frame must lie in 1..{}", s.len())));
            }
            let (template, template_box) = template_input(s, &model.cfg, &cfg.tracker)?;
            let tf = make_crop(&s.boxes[frame - 1], cfg.tracker.search_factor, model.cfg.encoder.search_res)?;
            let img = &s.frames[frame];
            let input = PairInput {
                template,
                search: render_crop(img, &tf, mean_color(img), Photometric::default()),
                template_box,
            };
            let (maps, attention) = model.infer(&input, true)?;
            std::fs::create_dir_all(&out).map_err(|e| jn_track::Error::io(&out, e))?;
            save_ppm(&tensor_to_rgb(&input.template), &out.join("template.ppm"))?;
            save_ppm(&tensor_to_rgb(&input.search), &out.join("search.ppm"))?;
            let layers = write_attention_pgms(&out, &attention, &model.cfg.encoder)?;
            let mut wrote_dist = false;
            if let HeadMaps::Dist { quality, probs, n } = &maps {
                let best = (0..quality.len()).max_by(|&a, &b| quality[a].total_cmp(&quality[b])).unwrap_or(0);
                let m = n + 1;
                write_distribution_svg(&out.join("distribution.svg"), &probs[best * 4 * m..(best + 1) * 4 * m], *n)?;
                wrote_dist = true;
            }
            let one = Dataset {
                sequences: vec![s.clone()],
            };
            let ev = evaluate(&model, &one, &cfg.tracker)?;
            let ious: Vec<f64> = ev.sequences[0].frames.iter().filter_map(|f| f.iou).collect();
            write_text(
                &out.join("success.svg"),
                &success_svg(&success_thresholds(), &[(s.name.clone(), success_curve(&ious))]),
            )?;
            println!(
                "{}",
                json!({"sequence": s.name, "frame": frame, "attention_layers": layers, "distribution": wrote_dist, "ao": ev.summary.ao})
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let head: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            let text = head.join(" ");
            eprintln!("{}", json!({"error": "usage", "message": text.trim_start_matches("error: ")}));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({"error": f.kind, "message": f.message}));
            ExitCode::from(f.code)
        }
    }
}
