use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::json;

use spgroup::autodiff::ParamStore;
use spgroup::eval::{evaluate, DEFAULT_THRESHOLDS};
use spgroup::gradsuite::run_gradient_suite;
use spgroup::harness::{loss_csv, overfit, partition_for, synth_scenes, RunConfig};
use spgroup::head::{detections_from_json, detections_to_json};
use spgroup::pipeline::{infer, init_params, match_scene, prepare};
use spgroup::scene::{load_scene, load_sidecar, save_scene, sidecar_path, LabeledBox};
use spgroup::superpoint::segment_points;
use spgroup::{Error, Result};

#[derive(Parser)]
#[command(name = "spgroup", version, about = "Superpoint-grouping 3D detector on synthetic rooms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Key-value config file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that receives every output file.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Extra `key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with oracle superpoints.
    Synth {
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Replace a scene's superpoints with a fresh segmentation.
    Segment {
        #[arg(long)]
        scene: PathBuf,
    },
    /// Finite-difference check of every differentiable operator.
    Gradcheck {
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Train on a fixed set of synthetic scenes and evaluate on them.
    Overfit {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Detect boxes in a scene.
    Infer {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Label assignment of a scene's proposals.
    Match {
        #[arg(long)]
        scene: PathBuf,
        /// Trained weights; fresh seeded weights when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Average precision of detection files against scene ground truth.
    Eval {
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        /// Scene sidecar `.json` or scene file, one per `--pred`.
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        config.apply_text(&text)?;
    }
    for pair in &cli.overrides {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        config.pipeline.seed = seed;
    }
    match &cli.command {
        Command::Synth { scenes } => config.scenes = scenes.unwrap_or(config.scenes),
        Command::Gradcheck { instances } => config.gradcheck_instances = instances.unwrap_or(config.gradcheck_instances),
        Command::Overfit { scenes, steps } => {
            config.scenes = scenes.unwrap_or(config.scenes);
            config.steps = steps.unwrap_or(config.steps);
        }
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn scene_name(i: usize) -> String {
    format!("scene_{i:03}.spg3")
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = run_config(&cli)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    match &cli.command {
        Command::Synth { .. } => {
            for (i, scene) in synth_scenes(&config.synth_spec(), config.scenes)?.iter().enumerate() {
                let path = out.join(scene_name(i));
                save_scene(scene, &path)?;
                println!("{}: {} points, {} objects", path.display(), scene.cloud.len(), scene.ground_truth.len());
            }
        }
        Command::Segment { scene } => {
            let mut loaded = load_scene(scene)?;
            let partition = segment_points(&loaded.cloud, &config.pipeline.segment)?;
            loaded.superpoint_labels = Some(partition.point_labels.iter().map(|&l| l as u32).collect());
            let name = scene.file_name().ok_or_else(|| Error::Config("scene path has no file name".into()))?;
            let path = out.join(name);
            save_scene(&loaded, &path)?;
            println!("{}: {} superpoints", path.display(), partition.count);
        }
        Command::Gradcheck { .. } => {
            let reports = run_gradient_suite(config.pipeline.seed, config.gradcheck_instances)?;
            let passed = reports.iter().all(|r| r.passed);
            for r in reports.iter().filter(|r| !r.passed) {
                println!("FAIL {} max rel error {:.3e}", r.op, r.max_rel_error);
            }
            let report = json!({ "passed": passed, "tol": reports.first().map(|r| r.tol), "ops": reports });
            write(&out.join("gradcheck.json"), &format!("{}\n", serde_json::to_string_pretty(&report)?))?;
            println!("{} of {} checks passed", reports.iter().filter(|r| r.passed).count(), reports.len());
            if !passed {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Overfit { .. } => {
            let scenes = synth_scenes(&config.synth_spec(), config.scenes)?;
            for (i, scene) in scenes.iter().enumerate() {
                save_scene(scene, &out.join(scene_name(i)))?;
            }
            write(&out.join("config.cfg"), &config.to_text())?;
            let every = config.log_every;
            let run = overfit(&scenes, &config.pipeline, config.steps, |step, loss| {
                if every > 0 && (step == 1 || step % every == 0) {
                    eprintln!("step {step:>5}  loss {:.5}", loss.total);
                }
            })?;
            write(&out.join("loss.csv"), &loss_csv(&run.losses))?;
            run.params.save(&out.join("weights.json"))?;
            write(&out.join("eval.json"), &run.eval.to_json()?)?;
            for (i, dets) in run.detections.iter().enumerate() {
                write(&out.join(format!("detections_{i:03}.json")), &detections_to_json(dets)?)?;
            }
            for t in DEFAULT_THRESHOLDS {
                println!("mAP@{t}: {:.4}", run.eval.map_at(t).unwrap_or(0.0));
            }
            eprintln!("trained {} steps in {:.1}s", config.steps, run.elapsed.as_secs_f64());
        }
        Command::Infer { scene, weights } => {
            let loaded = load_scene(scene)?;
            let params = ParamStore::load(weights)?;
            let prepared = prepare(&loaded, &partition_for(&loaded, &config.pipeline)?, &config.pipeline)?;
            let dets = infer(&params, &prepared, &config.pipeline)?;
            write(&out.join("detections.json"), &detections_to_json(&dets)?)?;
            println!("{} detections", dets.len());
        }
        Command::Match { scene, weights } => {
            let loaded = load_scene(scene)?;
            let params = match weights {
                Some(path) => ParamStore::load(path)?,
                None => init_params(&config.pipeline, loaded.class_count)?,
            };
            let prepared = prepare(&loaded, &partition_for(&loaded, &config.pipeline)?, &config.pipeline)?;
            let assignment = match_scene(&params, &prepared, &config.pipeline)?;
            write(&out.join("assignment.json"), &format!("{}\n", assignment.to_json()?))?;
            println!("{} positives for {} objects", assignment.positive_count(), loaded.ground_truth.len());
        }
        Command::Eval { pred, gt } => {
            if pred.len() != gt.len() {
                return Err(Error::Config(format!("{} --pred files for {} --gt files", pred.len(), gt.len())));
            }
            let mut detections = Vec::with_capacity(pred.len());
            let mut truths = Vec::with_capacity(gt.len());
            for (p, g) in pred.iter().zip(gt) {
                let text = std::fs::read_to_string(p).map_err(|e| io_error(p, e))?;
                detections.push(detections_from_json(&text)?);
                truths.push(ground_truth(g)?);
            }
            let result = evaluate(&detections, &truths, &DEFAULT_THRESHOLDS);
            write(&out.join("eval.json"), &result.to_json()?)?;
            for t in DEFAULT_THRESHOLDS {
                println!("mAP@{t}: {:.4}", result.map_at(t).unwrap_or(0.0));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Ground truth from a sidecar, or from the sidecar next to a scene file.
fn ground_truth(path: &Path) -> Result<Vec<LabeledBox>> {
    let side = if path.extension().is_some_and(|e| e == "json") {
        load_sidecar(path)?
    } else {
        load_sidecar(&sidecar_path(path))?
    };
    Ok(side.boxes)
}
