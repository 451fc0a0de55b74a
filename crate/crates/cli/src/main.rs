use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use kiwiflower::classical::{self, ClassicalConfig};
use kiwiflower::emulator::{self, DetectorProfile, FrameSize};
use kiwiflower::evaluator::{self, EvalConfig, GroupKey, Manifest};
use kiwiflower::imageio;
use kiwiflower::interchange;
use kiwiflower::model::{Camera, Detection};
use kiwiflower::pipeline::{self, Logger, PipelineConfig};
use kiwiflower::scheduler::{dedupe_targets, plan_spray, NozzleConfig, VehicleState};
use kiwiflower::stereo::{match_stereo, to_vehicle_frame, triangulate, RigFile, TargetFrame};
use kiwiflower::synth::{self, SceneSpec};

#[derive(Parser)]
#[command(
    name = "kiwiflower",
    version,
    about = "Kiwifruit flower detection, localization and spray scheduling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the classical color+saliency detector over a directory of images.
    Detect {
        /// Flat image directory, or a dataset directory with left/ and right/.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Camera assigned to images in a flat directory.
        #[arg(long, default_value = "left")]
        camera: Camera,
    },
    /// Turn ground truth into detections with a DNN's precision and recall.
    Emulate {
        #[arg(long)]
        gt: PathBuf,
        /// nas, frcnn_iv2, ssd_iv2 or file:<profile.toml>.
        #[arg(long)]
        profile: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1920.0)]
        width: f64,
        #[arg(long, default_value_t = 1080.0)]
        height: f64,
    },
    /// Match left/right detections and triangulate flower positions.
    Triangulate {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        rig: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `image_id,dataset,timestamp` rows supplying point timestamps.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Keep points in the camera frame instead of the vehicle frame.
        #[arg(long)]
        camera_frame: bool,
    },
    /// Plan spray commands for vehicle-frame points.
    Schedule {
        #[arg(long)]
        points: PathBuf,
        /// `v=<f>,a=<f>,t0=<f>`.
        #[arg(long, default_value = "v=0.5,a=0,t0=0")]
        vehicle: String,
        #[arg(long)]
        nozzles: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.02)]
        dedupe_radius: f64,
    },
    /// Precision, recall and F1 at an IoU threshold.
    Evaluate {
        /// Ground truth; repeat for several files.
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
        #[arg(long)]
        pred: PathBuf,
        /// `image_id,dataset` rows; without it only the overall row is reported.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 0.5)]
        score_min: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Render a seeded synthetic orchard dataset.
    Synth {
        /// A, B1, B2, B3 or custom:<scene.toml>.
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 10)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        rig: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frames in, spray commands and logs out.
    Pipeline {
        /// A dataset directory, or `synth:<preset>`.
        #[arg(long)]
        frames: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Frames drawn from a synthetic preset.
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure sustained throughput against the 20 Hz frame rate.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write `bench.txt` and `bench.kv` here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = BenchDetector::Config)]
        detector: BenchDetector,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchDetector {
    /// Whatever the config file says.
    Config,
    Classical,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Detect {
            images,
            config,
            out,
            camera,
        } => detect(&images, config.as_deref(), &out, camera),
        Command::Emulate {
            gt,
            profile,
            seed,
            out,
            width,
            height,
        } => {
            let profile = DetectorProfile::resolve(&profile)?;
            let gt = interchange::read_detections(&gt)?;
            let preds = emulator::emulate(&gt, &profile, seed, FrameSize { width, height })?;
            interchange::write_detections(&out, &preds, true)?;
            println!(
                "{} ground-truth boxes -> {} detections ({})",
                gt.len(),
                preds.len(),
                profile.name
            );
            Ok(())
        }
        Command::Triangulate {
            left,
            right,
            rig,
            out,
            manifest,
            camera_frame,
        } => triangulate_cmd(&left, &right, rig.as_deref(), &out, manifest.as_deref(), camera_frame),
        Command::Schedule {
            points,
            vehicle,
            nozzles,
            out,
            dedupe_radius,
        } => {
            let state = VehicleState::parse(&vehicle)?;
            let nozzles = match nozzles {
                Some(p) => NozzleConfig::load(&p)?,
                None => NozzleConfig::default(),
            };
            let points = interchange::read_points(&points, TargetFrame::Vehicle)?;
            let targets = dedupe_targets(&points, dedupe_radius);
            let plan = plan_spray(&targets, &state, &nozzles);
            interchange::write_lines(&out, interchange::spray_lines(&plan))?;
            println!(
                "{} points, {} targets -> {} commands, {} misses",
                points.len(),
                targets.len(),
                plan.commands.len(),
                plan.misses.len()
            );
            Ok(())
        }
        Command::Evaluate {
            gt,
            pred,
            manifest,
            iou,
            score_min,
            out,
            confusion,
        } => {
            let (manifest, group_key) = match manifest {
                Some(p) => (Manifest::load(&p)?, GroupKey::Dataset),
                None => (Manifest::default(), GroupKey::None),
            };
            let mut gts = Vec::new();
            for p in &gt {
                gts.extend(interchange::read_detections(p)?);
            }
            let preds = interchange::read_detections(&pred)?;
            let model = pred
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let cfg = EvalConfig {
                iou_threshold: iou,
                score_min,
                group_key,
            };
            let report = evaluator::evaluate_detections(&model, preds, gts, &manifest, &cfg)?;
            let text = report.render();
            print!("{text}");
            if let Some(p) = out {
                fs::write(&p, &text).with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(p) = confusion {
                fs::write(&p, evaluator::confusion_summary(&report))
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(())
        }
        Command::Synth {
            preset,
            images,
            seed,
            rig,
            out,
        } => {
            let spec = SceneSpec::resolve(&preset)?;
            let rig = load_rig(rig.as_deref())?.rig;
            let name = if preset.starts_with("custom:") {
                "custom"
            } else {
                preset.as_str()
            };
            let s = synth::write_dataset(&out, &spec, name, images, seed, &rig)?;
            println!("{} stereo pairs, {} flowers -> {}", s.images, s.flowers, out.display());
            Ok(())
        }
        Command::Pipeline {
            frames,
            config,
            out,
            count,
            seed,
        } => pipeline_cmd(&frames, config.as_deref(), &out, count, seed),
        Command::Bench {
            config,
            frames,
            seed,
            out,
            detector,
        } => {
            let mut cfg = load_pipeline_config(config.as_deref())?;
            if detector == BenchDetector::Classical {
                cfg.detector = "classical".into();
            }
            let p = cfg.resolve()?;
            let report = pipeline::bench(&p, frames, seed)?;
            print!("{}", report.render_text());
            if let Some(dir) = out {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                fs::write(dir.join("bench.txt"), report.render_text())?;
                fs::write(dir.join("bench.kv"), report.render_kv())?;
            }
            Ok(())
        }
    }
}

fn load_rig(path: Option<&Path>) -> Result<RigFile> {
    Ok(match path {
        Some(p) => RigFile::load(p)?,
        None => RigFile::default(),
    })
}

fn load_pipeline_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    Ok(cfg)
}

fn detect(images: &Path, config: Option<&Path>, out: &Path, camera: Camera) -> Result<()> {
    let cfg = match config {
        Some(p) => ClassicalConfig::load(p)?,
        None => ClassicalConfig::default(),
    };
    let mut jobs: Vec<(PathBuf, String, Camera)> = Vec::new();
    let dataset = images.join("left").is_dir();
    let dirs: Vec<(PathBuf, Camera)> = if dataset {
        vec![
            (images.join("left"), Camera::Left),
            (images.join("right"), Camera::Right),
        ]
    } else {
        vec![(images.to_path_buf(), camera)]
    };
    for (dir, cam) in dirs {
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "ppm" | "pnm")))
            .collect();
        files.sort();
        for f in files {
            let id = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            jobs.push((f, id, cam));
        }
    }
    if jobs.is_empty() {
        bail!("no .png or .ppm images under {}", images.display());
    }
    let mut all: Vec<Detection> = Vec::new();
    for (path, id, cam) in &jobs {
        let frame = imageio::read_frame(path, id, *cam, 0.0)?;
        all.extend(classical::detect(&frame, &cfg));
    }
    interchange::write_detections(out, &all, true)?;
    println!("{} images -> {} detections", jobs.len(), all.len());
    Ok(())
}

fn triangulate_cmd(
    left: &Path,
    right: &Path,
    rig: Option<&Path>,
    out: &Path,
    manifest: Option<&Path>,
    camera_frame: bool,
) -> Result<()> {
    let rig_file = load_rig(rig)?;
    let extrinsic = rig_file.extrinsic.clone().unwrap_or_default();
    let times: BTreeMap<String, f64> = match manifest {
        Some(p) => read_times(p)?,
        None => BTreeMap::new(),
    };
    let left = interchange::replay(left)?;
    let right = interchange::replay(right)?;
    let ids: std::collections::BTreeSet<&String> = left.keys().chain(right.keys()).collect();
    let mut lines = Vec::new();
    let (mut pairs, mut unmatched) = (0, 0);
    for id in ids {
        let l = left.get(id).map(Vec::as_slice).unwrap_or(&[]);
        let r = right.get(id).map(Vec::as_slice).unwrap_or(&[]);
        let m = match_stereo(l, r, &rig_file.rig);
        unmatched += m.unmatched_left.len() + m.unmatched_right.len();
        let ts = times.get(id.as_str()).copied().unwrap_or(0.0);
        for pair in &m.pairs {
            let t = triangulate(pair, &rig_file.rig, ts)?;
            let t = if camera_frame {
                t
            } else {
                to_vehicle_frame(&t, &extrinsic)
            };
            lines.push(interchange::point_line(&t));
            pairs += 1;
        }
    }
    interchange::write_lines(out, lines)?;
    println!("{pairs} points, {unmatched} unmatched detections");
    Ok(())
}

/// Timestamps from the third column of a manifest.
fn read_times(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.starts_with("image_id")) {
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if let (Some(id), Some(ts)) = (cols.first(), cols.get(2)) {
            out.insert(id.to_string(), ts.parse().with_context(|| format!("timestamp '{ts}'"))?);
        }
    }
    Ok(out)
}

fn pipeline_cmd(frames: &str, config: Option<&Path>, out: &Path, count: usize, seed: u64) -> Result<()> {
    let cfg = load_pipeline_config(config)?;
    let p = cfg.resolve()?;
    let (left, right) = match frames.strip_prefix("synth:") {
        Some(preset) => {
            let spec = SceneSpec::resolve(preset)?;
            pipeline::synth_stream(&spec, preset, count, seed, &p.rig, p.detector.needs_pixels(), 8)?
        }
        None => pipeline::dir_stream(Path::new(frames))?,
    };
    let log_cfg = kiwiflower::pipeline::LoggerConfig {
        out_dir: Some(p.log.out_dir.clone().unwrap_or_else(|| out.join("log"))),
        ..p.log.clone()
    };
    let logger = Logger::start(&log_cfg)?;
    let mut result = pipeline::run_pipeline(left, right, &p, Some(&logger))?;
    let report = logger.close();
    result.stats.logger = Some(report.stats);
    if let Some(e) = report.first_error {
        log::warn!("logger: {e}");
    }
    result.write(out)?;
    print!("{}", result.stats.render_text());
    Ok(())
}
