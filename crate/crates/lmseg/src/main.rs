//! Command-line surface: convert, train, infer, eval, bench, synth.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lmseg::bench::{loglog_slope, run_bench, to_csv, BenchMethod};
use lmseg::config::{load_config, parse_feature_list};
use lmseg::dual::{build_dual, load_bdg, normalize_scale, save_bdg, DualGraph};
use lmseg::error::{Error, Result};
use lmseg::mesh::{load_mesh, save_ply, MeshFormat, TriMesh};
use lmseg::metrics::evaluate;
use lmseg::net::{load_checkpoint, save_checkpoint, Checkpoint, LmsegModel};
use lmseg::nn::ParamStore;
use lmseg::synth::synth_dataset;
use lmseg::train::{predict, train};

#[derive(Parser)]
#[command(name = "lmseg", version, about = "Landscape mesh segmentation toolchain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a triangle mesh into a barycentric dual graph (.bdg)
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Comma-separated feature blocks: hsv,normals
        #[arg(long, default_value = "hsv,normals")]
        features: String,
        /// Normalize node positions to [-1,1]^3
        #[arg(long)]
        normalize: bool,
    },
    /// Train a model on a directory with train/ and val/ PLY tiles
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metric trace CSV (defaults to <out>.trace.csv)
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Predict per-face labels for a mesh or .bdg graph
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// .ply (mesh input only) or .csv output
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare predicted labels against ground truth
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Class count; inferred from the data when omitted
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Time the sampling methods and report CSV rows
    Bench {
        #[arg(long, default_value = "random")]
        method: String,
        /// Comma-separated point counts
        #[arg(long, default_value = "1000,10000,100000")]
        sizes: String,
        #[arg(long, default_value_t = 1.0 / 3.0)]
        ratio: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Write CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate labeled synthetic terrain tiles
    Synth {
        #[arg(long)]
        tiles: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Points per tile (faces come out near twice this)
        #[arg(long, default_value_t = 1100)]
        points: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_graph_from_mesh(path: &Path, spec: lmseg::dual::FeatureSpec) -> Result<DualGraph> {
    let mesh = load_mesh(path, MeshFormat::Auto)?;
    build_dual(&mesh, spec)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Convert {
            input,
            output,
            features,
            normalize,
        } => {
            let spec = parse_feature_list(&features)?;
            let mut graph = load_graph_from_mesh(&input, spec)?;
            if normalize {
                graph = normalize_scale(&graph);
            }
            save_bdg(&graph, &output)?;
            println!("nodes: {}", graph.node_count());
            println!("edges: {}", graph.edges.len());
            println!("non_manifold_edges: {}", graph.non_manifold_edges);
            let hist = graph.degree_histogram();
            let histogram = hist
                .iter()
                .enumerate()
                .map(|(d, c)| format!("{d}:{c}"))
                .collect::<Vec<_>>()
                .join(" ");
            println!("degree_histogram: {histogram}");
            if graph.color_zero_filled {
                println!("warning: no face colors; HSV block zero-filled");
            }
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            trace,
        } => {
            let run_cfg = load_config(&config)?;
            let train_tiles = load_tile_dir(&data.join("train"), &run_cfg.arch)?;
            let val_tiles = load_tile_dir(&data.join("val"), &run_cfg.arch)?;
            eprintln!(
                "training on {} tiles, validating on {}",
                train_tiles.len(),
                val_tiles.len()
            );
            let mut trace_rows = vec!["epoch,loss,miou,oa,macc,f1".to_string()];
            let outcome = train(&run_cfg.arch, &run_cfg.train, &train_tiles, &val_tiles, |m| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  miou {:.4}  oa {:.4}  macc {:.4}  f1 {:.4}",
                    m.epoch, m.loss, m.miou, m.oa, m.macc, m.f1
                );
                trace_rows.push(format!(
                    "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    m.epoch, m.loss, m.miou, m.oa, m.macc, m.f1
                ));
            })?;
            save_checkpoint(
                &Checkpoint {
                    config: run_cfg.arch.clone(),
                    store: outcome.best_store,
                },
                &out,
            )?;
            let trace_path = trace.unwrap_or_else(|| out.with_extension("trace.csv"));
            std::fs::write(&trace_path, trace_rows.join("\n") + "\n")?;
            println!(
                "best validation miou {:.4} at epoch {}; checkpoint {}",
                outcome.best_miou,
                outcome.best_epoch,
                out.display()
            );
            Ok(())
        }
        Command::Infer {
            checkpoint,
            input,
            output,
            seed,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut store = ckpt.store;
            let model = {
                // rebuild the module graph; parameter values come from the
                // checkpoint, so initialize into a scratch store
                let mut scratch = ParamStore::<f32>::new();
                let model = LmsegModel::init(&mut scratch, &ckpt.config, 0)?;
                if !scratch.params.keys().eq(store.params.keys()) {
                    return Err(Error::BadCheckpoint(
                        "parameter names disagree with architecture".into(),
                    ));
                }
                model
            };
            let is_bdg = input
                .extension()
                .map(|e| e.eq_ignore_ascii_case("bdg"))
                .unwrap_or(false);
            let (graph, mesh) = if is_bdg {
                let graph = load_bdg(&input)?;
                if graph.feature_spec != ckpt.config.feature_spec {
                    return Err(Error::FeatureSpecMismatch {
                        expected: ckpt.config.feature_spec.to_string(),
                        actual: graph.feature_spec.to_string(),
                    });
                }
                (graph, None)
            } else {
                let mesh = load_mesh(&input, MeshFormat::Auto)?;
                let graph = build_dual(&mesh, ckpt.config.feature_spec)?;
                (graph, Some(mesh))
            };
            let graph = normalize_scale(&graph);
            let (labels, confidence) = predict(&model, &mut store, &graph, seed)?;
            let ext = output
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.to_ascii_lowercase());
            match ext.as_deref() {
                Some("ply") => {
                    let mut mesh: TriMesh = mesh.ok_or_else(|| {
                        Error::InvalidConfig(
                            "PLY output needs a mesh input; use CSV for .bdg inputs".into(),
                        )
                    })?;
                    mesh.face_labels = Some(labels.clone());
                    save_ply(&mesh, &output)?;
                }
                Some("csv") => {
                    let mut text = String::from("face_index,label,confidence\n");
                    for (i, (l, c)) in labels.iter().zip(&confidence).enumerate() {
                        text.push_str(&format!("{i},{l},{c:.6}\n"));
                    }
                    std::fs::write(&output, text)?;
                }
                _ => {
                    return Err(Error::UnsupportedFormat(
                        "infer output must be .ply or .csv".into(),
                    ))
                }
            }
            println!("wrote {} predictions to {}", labels.len(), output.display());
            Ok(())
        }
        Command::Eval { pred, gt, classes } => {
            let pred_labels = load_labels(&pred)?;
            let gt_labels = load_labels(&gt)?;
            let k = classes.unwrap_or_else(|| {
                pred_labels
                    .iter()
                    .chain(&gt_labels)
                    .map(|&l| l as usize + 1)
                    .max()
                    .unwrap_or(2)
                    .max(2)
            });
            let report = evaluate(&pred_labels, &gt_labels, k)?;
            print!("{}", report.table());
            let json = serde_json::to_string(&report)
                .map_err(|e| Error::InvalidConfig(format!("json: {e}")))?;
            println!("{json}");
            Ok(())
        }
        Command::Bench {
            method,
            sizes,
            ratio,
            seed,
            out,
        } => {
            let method: BenchMethod = method.parse()?;
            let sizes: Vec<usize> = sizes
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::InvalidConfig(format!("bad size '{s}'")))
                })
                .collect::<Result<_>>()?;
            let rows = run_bench(method, &sizes, ratio, seed)?;
            let csv = to_csv(&rows);
            match out {
                Some(path) => std::fs::write(path, &csv)?,
                None => print!("{csv}"),
            }
            eprintln!("log-log slope: {:.3}", loglog_slope(&rows));
            Ok(())
        }
        Command::Synth {
            tiles,
            seed,
            out,
            points,
        } => {
            std::fs::create_dir_all(&out)?;
            let dataset = synth_dataset(tiles, seed, points);
            for (i, mesh) in dataset.iter().enumerate() {
                let path = out.join(format!("tile_{i:03}.ply"));
                save_ply(mesh, &path)?;
            }
            println!("wrote {} tiles to {}", tiles, out.display());
            Ok(())
        }
    }
}

fn load_tile_dir(dir: &Path, arch: &lmseg::net::ArchConfig) -> Result<Vec<DualGraph>> {
    if !dir.is_dir() {
        return Err(Error::InvalidConfig(format!(
            "{} is not a directory (expected train/ and val/ tile folders)",
            dir.display()
        )));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("ply"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no .ply tiles in {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| {
            let graph = load_graph_from_mesh(p, arch.feature_spec)?;
            if graph.labels.is_none() {
                return Err(Error::InvalidConfig(format!(
                    "{} has no label property",
                    p.display()
                )));
            }
            Ok(normalize_scale(&graph))
        })
        .collect()
}

/// Labels from a labeled PLY mesh or a face_index,label[,confidence] CSV.
fn load_labels(path: &Path) -> Result<Vec<u16>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("ply") => {
            let mesh = load_mesh(path, MeshFormat::Ply)?;
            mesh.face_labels.ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: 0,
                msg: "mesh has no label property".into(),
            })
        }
        Some("csv") => {
            let text = std::fs::read_to_string(path)?;
            let mut rows: Vec<(usize, u16)> = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with("face_index") {
                    continue;
                }
                let mut parts = line.split(',');
                let idx: usize = parts
                    .next()
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::Parse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        msg: "bad face index".into(),
                    })?;
                let label: u16 = parts
                    .next()
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::Parse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        msg: "bad label".into(),
                    })?;
                rows.push((idx, label));
            }
            rows.sort_unstable();
            Ok(rows.into_iter().map(|(_, l)| l).collect())
        }
        other => Err(Error::UnsupportedFormat(format!(
            "label file {:?}",
            other.unwrap_or("<none>")
        ))),
    }
}
