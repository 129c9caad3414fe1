//! Command-line driver: training runs, ablations, gradient checks, relation
//! dumps, annotation corruption and detection evaluation.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use noisy_adapt::annotio::{self, CocoLikeDoc, VocDoc};
use noisy_adapt::evalkit::{self, ApMode, Detection, GroundTruth};
use noisy_adapt::gradsuite;
use noisy_adapt::synthworld::Dataset;
use noisy_adapt::trainer::{self, EpochMetrics, RelationSnapshot, TrainConfig};

#[derive(Parser)]
#[command(name = "noisy-adapt", version, about = "Domain-adaptive detection under noisy source labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write run.csv, metrics.json and relations.json.
    Train {
        /// JSON training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the standard ablation rows over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare every analytic gradient with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Dump the relation matrices of a finished run as relmat_epoch_<n>.csv.
    Relmat {
        #[arg(long)]
        run: PathBuf,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corrupt a directory of annotation files.
    Corrupt {
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        format: Format,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Evaluate detections against ground truth.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of categories; defaults to one past the largest id seen.
        #[arg(long)]
        categories: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        nms_iou: f64,
        #[arg(long, value_enum, default_value_t = Mode::AllPoint)]
        ap_mode: Mode,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Voc,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    AllPoint,
    ElevenPoint,
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    final_map: Option<f64>,
    wall_time_seconds: f64,
    corrupted_instances: usize,
    removed_instances: usize,
    epochs: &'a [EpochMetrics],
    config: &'a TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct Relations {
    categories: usize,
    snapshots: Vec<RelationSnapshot>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let schema = err
                .chain()
                .any(|e| e.downcast_ref::<noisy_adapt::Error>().is_some_and(|e| e.is_schema()));
            ExitCode::from(if schema { 2 } else { 1 })
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    let cfg: TrainConfig = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load_config(config.as_deref())?;
            fs::create_dir_all(&out)?;
            let start = Instant::now();
            let data = Dataset::generate(&cfg.scenario)?;
            let result = trainer::train_on(&cfg, &data)?;
            let record = &result.record;
            record.write_steps_csv(create(&out.join("run.csv"))?)?;
            data.corruption.write_csv(create(&out.join("corruption.csv"))?)?;
            write_json(
                &out.join("metrics.json"),
                &TrainMetrics {
                    final_map: record.final_map(),
                    wall_time_seconds: start.elapsed().as_secs_f64(),
                    corrupted_instances: data.corruption.len(),
                    removed_instances: data.corruption.removed(),
                    epochs: &record.epochs,
                    config: &cfg,
                },
            )?;
            write_json(
                &out.join("relations.json"),
                &Relations {
                    categories: cfg.scenario.categories,
                    snapshots: record.relations.clone(),
                },
            )?;
            match record.final_map() {
                Some(m) => println!("final target mAP {:.2}", 100.0 * m),
                None => println!("no epochs run"),
            }
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = load_config(config.as_deref())?;
            fs::create_dir_all(&out)?;
            let rows = trainer::ablation_grid(&cfg, &trainer::standard_rows(), seeds)?;
            trainer::write_ablation_csv(&rows, create(&out.join("ablation.csv"))?)?;
            write_json(&out.join("ablation.json"), &rows)?;
            for r in &rows {
                println!("{:<12} {:6.2} ± {:.2}", r.name, 100.0 * r.mean, 100.0 * r.sd);
            }
        }
        Command::Gradcheck { seed, instances } => {
            let results = gradsuite::run_suite(seed, instances)?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed();
                println!(
                    "{:<20} {:>3} instances  max rel err {:.3e}  {}",
                    r.name,
                    r.instances,
                    r.max_rel_error,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            if !ok {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Relmat { run, out } => {
            let path = run.join("relations.json");
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let rel: Relations = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let out = out.unwrap_or(run);
            fs::create_dir_all(&out)?;
            for s in &rel.snapshots {
                let file = out.join(format!("relmat_epoch_{}.csv", s.epoch));
                trainer::write_relation_csv(s, rel.categories, create(&file)?)?;
                println!("{}", file.display());
            }
        }
        Command::Corrupt {
            rate,
            seed,
            format,
            input,
            out,
            log,
        } => {
            fs::create_dir_all(&out)?;
            let (changes, files) = match format {
                Format::Voc => corrupt_voc_dir(&input, &out, rate, seed)?,
                Format::Json => corrupt_json_dir(&input, &out, rate, seed)?,
            };
            changes.write_csv(create(&log)?)?;
            println!("{} of the objects in {files} files changed", changes.changes.len());
        }
        Command::Eval {
            detections,
            gt,
            out,
            categories,
            nms_iou,
            ap_mode,
        } => {
            let read = |p: &Path| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
            let dets: Vec<Detection> = serde_json::from_str(&read(&detections)?)
                .map_err(noisy_adapt::Error::from)
                .with_context(|| format!("parsing {}", detections.display()))?;
            let gts: Vec<GroundTruth> = serde_json::from_str(&read(&gt)?)
                .map_err(noisy_adapt::Error::from)
                .with_context(|| format!("parsing {}", gt.display()))?;
            let categories = categories.unwrap_or_else(|| {
                dets.iter()
                    .map(|d| d.category)
                    .chain(gts.iter().map(|g| g.category))
                    .max()
                    .map_or(0, |m| m + 1)
            });
            if categories == 0 {
                bail!("no categories to evaluate");
            }
            let mode = match ap_mode {
                Mode::AllPoint => ApMode::AllPoint,
                Mode::ElevenPoint => ApMode::ElevenPoint,
            };
            let report = evalkit::evaluate(&dets, &gts, categories, nms_iou, mode)?;
            write_json(&out, &report)?;
            println!("mAP {:.2}", 100.0 * report.map);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn corrupt_voc_dir(input: &Path, out: &Path, rate: f64, seed: u64) -> anyhow::Result<(annotio::AnnotationLog, usize)> {
    let files = annotio::list_files(input, "xml")?;
    let docs: Vec<VocDoc> = files
        .iter()
        .map(|p| {
            annotio::parse_voc(&annotio::read_text(p)?).with_context(|| format!("in {}", p.display()))
        })
        .collect::<anyhow::Result<_>>()?;
    let (corrupted, log) = annotio::corrupt_annotations(&docs, &annotio::voc_universe(), rate, seed)?;
    for (p, d) in files.iter().zip(&corrupted) {
        annotio::write_text(&out.join(file_name(p)), &annotio::write_voc(d))?;
    }
    Ok((log, files.len()))
}

fn corrupt_json_dir(input: &Path, out: &Path, rate: f64, seed: u64) -> anyhow::Result<(annotio::AnnotationLog, usize)> {
    let files = annotio::list_files(input, "json")?;
    let docs: Vec<CocoLikeDoc> = files
        .iter()
        .map(|p| {
            annotio::parse_coco(&annotio::read_text(p)?).with_context(|| format!("in {}", p.display()))
        })
        .collect::<anyhow::Result<_>>()?;
    let (corrupted, log) = annotio::corrupt_coco(&docs, rate, seed)?;
    for (p, d) in files.iter().zip(&corrupted) {
        annotio::write_text(&out.join(file_name(p)), &annotio::write_coco(d)?)?;
    }
    Ok((log, files.len()))
}
