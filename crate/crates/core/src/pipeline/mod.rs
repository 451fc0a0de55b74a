//! Frames in, spray commands and logs out.
//!
//! Stereo pairs fan out to a pool of workers that detect in both views,
//! match, triangulate and move targets into the vehicle frame. Results are
//! put back in stream order and handed to a single scheduler stage that
//! owns all mutable planning state: the dedupe window and pending commands.
//! A bounded logger runs beside it and drops records rather than stall.

mod bench;
mod frames;
mod logger;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::bounded;
use serde::{Deserialize, Serialize};

pub use bench::{bench, BenchReport, FRAME_BUDGET_FPS};
pub use frames::{dir_stream, pair_frames, synth_stream, FrameInput, Paired, Pixels, StereoInput, PAIRING_TOLERANCE_S};
pub use logger::{DropPolicy, LogRecord, Logger, LoggerConfig, LoggerReport, LoggerStats, MemoryLog};

use crate::classical::{self, ClassicalConfig};
use crate::config;
use crate::emulator::{emulate, DetectorProfile};
use crate::error::{Error, Result};
use crate::interchange::{self, DetectionsByImage};
use crate::model::{Camera, Detection, ImageFrame};
use crate::scheduler::{dedupe_targets, merge_commands, plan_spray, NozzleConfig, SprayCommand, VehicleState};
use crate::stereo::{match_stereo, to_vehicle_frame, triangulate, FlowerTarget, RigFile, RigidTransform, StereoRig};

/// Scheduled targets are forgotten once the vehicle is this far past them.
pub const DEDUPE_EXPIRY_M: f64 = 0.5;

pub const ENV_WORKERS: &str = "KIWIFLOWER_WORKERS";
pub const ENV_LOG_DIR: &str = "KIWIFLOWER_LOG_DIR";

/// Pipeline settings as written in a config file. File references are
/// resolved relative to the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// `classical`, `classical:<cfg>`, `emulate:<profile>,<seed>` or `file:<jsonl>`.
    pub detector: String,
    pub rig: Option<PathBuf>,
    /// Overrides any extrinsic in the rig file.
    pub extrinsic: Option<PathBuf>,
    pub nozzles: Option<PathBuf>,
    pub vehicle: VehicleState,
    pub score_min: f64,
    pub dedupe_radius_m: f64,
    pub workers: usize,
    /// Make emulated detectors take their profile latency in wall time.
    pub simulate_latency: bool,
    pub log: LoggerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detector: "classical".into(),
            rig: None,
            extrinsic: None,
            nozzles: None,
            vehicle: VehicleState::default(),
            score_min: 0.5,
            dedupe_radius_m: 0.02,
            workers: 2,
            simulate_latency: false,
            log: LoggerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        config::parse_toml(text, "pipeline config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = config::load_toml(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    /// Make relative file references relative to `base`.
    pub fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.rig,
            &mut self.extrinsic,
            &mut self.nozzles,
            &mut self.log.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for prefix in ["classical:", "file:"] {
            if let Some(rest) = self.detector.strip_prefix(prefix) {
                if !rest.is_empty() && Path::new(rest).is_relative() {
                    self.detector = format!("{prefix}{}", base.join(rest).display());
                }
            }
        }
        if let Some(rest) = self.detector.strip_prefix("emulate:file:") {
            let (path, seed) = rest.rsplit_once(',').unwrap_or((rest, ""));
            if Path::new(path).is_relative() {
                let sep = if seed.is_empty() { "" } else { "," };
                self.detector = format!("emulate:file:{}{sep}{seed}", base.join(path).display());
            }
        }
    }

    /// Apply `KIWIFLOWER_WORKERS` and `KIWIFLOWER_LOG_DIR` through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = lookup(ENV_WORKERS) {
            self.workers = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_WORKERS}='{v}' is not a worker count")))?;
        }
        if let Some(v) = lookup(ENV_LOG_DIR) {
            self.log.out_dir = Some(PathBuf::from(v));
        }
        Ok(())
    }

    /// Validate and load everything the config refers to.
    pub fn resolve(&self) -> Result<Pipeline> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.score_min) {
            return Err(Error::Config(format!("score_min {} outside [0, 1]", self.score_min)));
        }
        if !(self.dedupe_radius_m >= 0.0) {
            return Err(Error::Config("dedupe_radius_m must be >= 0".into()));
        }
        self.log.validate()?;
        let vehicle = VehicleState::new(self.vehicle.v0, self.vehicle.a, self.vehicle.t0)?;
        let rig_file = match &self.rig {
            Some(p) => RigFile::load(p)?,
            None => RigFile::default(),
        };
        let extrinsic = match &self.extrinsic {
            Some(p) => config::load_toml::<RigidTransform>(p)?,
            None => rig_file.extrinsic.clone().unwrap_or_default(),
        };
        let nozzles = match &self.nozzles {
            Some(p) => NozzleConfig::load(p)?,
            None => NozzleConfig::default(),
        };
        Ok(Pipeline {
            detector: DetectorSource::parse(&self.detector)?,
            rig: rig_file.rig,
            extrinsic,
            nozzles,
            vehicle,
            score_min: self.score_min,
            dedupe_radius_m: self.dedupe_radius_m,
            workers: self.workers,
            simulate_latency: self.simulate_latency,
            log: self.log.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DetectorSource {
    Classical(ClassicalConfig),
    Emulate {
        profile: DetectorProfile,
        seed: u64,
    },
    /// Pre-computed detections keyed by image id.
    Replay(Arc<DetectionsByImage>),
}

impl DetectorSource {
    pub fn parse(spec: &str) -> Result<Self> {
        if spec == "classical" {
            return Ok(Self::Classical(ClassicalConfig::default()));
        }
        if let Some(path) = spec.strip_prefix("classical:") {
            return Ok(Self::Classical(ClassicalConfig::load(Path::new(path))?));
        }
        if let Some(rest) = spec.strip_prefix("emulate:") {
            let (name, seed) = match rest.rsplit_once(',') {
                Some((n, s)) => (
                    n,
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("emulator seed '{s}' is not an integer")))?,
                ),
                None => (rest, 0),
            };
            return Ok(Self::Emulate {
                profile: DetectorProfile::resolve(name)?,
                seed,
            });
        }
        if let Some(path) = spec.strip_prefix("file:") {
            return Ok(Self::Replay(Arc::new(interchange::replay(Path::new(path))?)));
        }
        Err(Error::Config(format!(
            "unknown detector '{spec}'; expected classical[:<cfg>], emulate:<profile>[,<seed>] or file:<jsonl>"
        )))
    }

    pub fn needs_pixels(&self) -> bool {
        matches!(self, Self::Classical(_))
    }

    /// Nominal time from frame capture to detections, used for scheduling.
    pub fn nominal_latency_s(&self) -> f64 {
        match self {
            Self::Emulate { profile, .. } => profile.latency_s(),
            _ => 0.0,
        }
    }
}

/// A validated, fully loaded pipeline configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub detector: DetectorSource,
    pub rig: StereoRig,
    pub extrinsic: RigidTransform,
    pub nozzles: NozzleConfig,
    // TODO: accept a stream of odometry updates instead of one state per run.
    pub vehicle: VehicleState,
    pub score_min: f64,
    pub dedupe_radius_m: f64,
    pub workers: usize,
    pub simulate_latency: bool,
    pub log: LoggerConfig,
}

impl Pipeline {
    /// Defaults everywhere except the detector.
    pub fn with_detector(detector: DetectorSource) -> Self {
        let mut p = PipelineConfig::default().resolve().expect("default config is valid");
        p.detector = detector;
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkipRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq: Option<usize>,
    pub image_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub camera: Option<Camera>,
    pub timestamp: f64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub seq: usize,
    pub image_id: String,
    pub timestamp: f64,
    pub left: Vec<Detection>,
    pub right: Vec<Detection>,
}

impl FrameRecord {
    pub fn to_line(&self) -> String {
        let dets = |v: &[Detection]| {
            v.iter()
                .map(|d| interchange::to_line(d, true))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            r#"{{"seq":{},"image_id":{},"timestamp":{},"left":[{}],"right":[{}]}}"#,
            self.seq,
            serde_json::to_string(&self.image_id).expect("string serializes"),
            serde_json::to_string(&self.timestamp).expect("number serializes"),
            dets(&self.left),
            dets(&self.right)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetStatus {
    Scheduled,
    Duplicate,
    Missed,
}

/// A vehicle-frame target as measured at its frame's timestamp.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetRecord {
    pub seq: usize,
    pub image_id: String,
    pub xyz: [f64; 3],
    pub timestamp: f64,
    pub status: TargetStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SprayEntry {
    Command(SprayCommand),
    Miss(crate::scheduler::Miss),
}

impl SprayEntry {
    pub fn to_line(&self) -> String {
        match self {
            Self::Command(c) => interchange::command_line(c),
            Self::Miss(m) => interchange::miss_line(m),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageStats {
    pub name: &'static str,
    pub count: usize,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl StageStats {
    fn from_samples(name: &'static str, mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let pct = |p: f64| -> f64 {
            if ms.is_empty() {
                return 0.0;
            }
            let rank = (p * ms.len() as f64).ceil() as usize;
            ms[rank.clamp(1, ms.len()) - 1]
        };
        Self {
            name,
            count: ms.len(),
            p50_ms: pct(0.5),
            p90_ms: pct(0.9),
            p99_ms: pct(0.99),
            max_ms: ms.last().copied().unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineStats {
    pub workers: usize,
    pub frames_offered: usize,
    pub pairs: usize,
    pub pairs_processed: usize,
    pub pairs_skipped: usize,
    pub unpaired_frames: usize,
    pub detections: usize,
    pub targets: usize,
    pub duplicates: usize,
    pub commands: usize,
    pub misses: usize,
    pub wall_s: f64,
    /// Processed pairs per wall-clock second; 0 for an empty run.
    pub fps: f64,
    pub stages: Vec<StageStats>,
    pub logger: Option<LoggerStats>,
}

impl PipelineStats {
    pub fn stage(&self, name: &str) -> Option<&StageStats> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames offered     {}", self.frames_offered);
        let _ = writeln!(s, "stereo pairs       {}", self.pairs);
        let _ = writeln!(s, "  processed        {}", self.pairs_processed);
        let _ = writeln!(s, "  skipped          {}", self.pairs_skipped);
        let _ = writeln!(s, "unpaired frames    {}", self.unpaired_frames);
        let _ = writeln!(s, "detections         {}", self.detections);
        let _ = writeln!(s, "targets            {}", self.targets);
        let _ = writeln!(s, "  duplicates       {}", self.duplicates);
        let _ = writeln!(s, "spray commands     {}", self.commands);
        let _ = writeln!(s, "misses             {}", self.misses);
        let _ = writeln!(s, "workers            {}", self.workers);
        let _ = writeln!(s, "wall time          {:.3} s", self.wall_s);
        let _ = writeln!(s, "throughput         {:.2} frames/s", self.fps);
        let _ = writeln!(
            s,
            "{:<12}{:>8}{:>10}{:>10}{:>10}{:>10}",
            "stage", "count", "p50 ms", "p90 ms", "p99 ms", "max ms"
        );
        for st in &self.stages {
            let _ = writeln!(
                s,
                "{:<12}{:>8}{:>10.2}{:>10.2}{:>10.2}{:>10.2}",
                st.name, st.count, st.p50_ms, st.p90_ms, st.p99_ms, st.max_ms
            );
        }
        if let Some(l) = &self.logger {
            let _ = writeln!(
                s,
                "logger             offered {} persisted {} dropped {} failed {}",
                l.offered, l.persisted, l.dropped, l.failed
            );
        }
        s
    }

    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("frames_offered", self.frames_offered.to_string());
        kv("pairs", self.pairs.to_string());
        kv("pairs_processed", self.pairs_processed.to_string());
        kv("pairs_skipped", self.pairs_skipped.to_string());
        kv("unpaired_frames", self.unpaired_frames.to_string());
        kv("detections", self.detections.to_string());
        kv("targets", self.targets.to_string());
        kv("duplicates", self.duplicates.to_string());
        kv("commands", self.commands.to_string());
        kv("misses", self.misses.to_string());
        kv("workers", self.workers.to_string());
        kv("wall_s", format!("{:.6}", self.wall_s));
        kv("fps", format!("{:.4}", self.fps));
        for st in &self.stages {
            kv(&format!("{}_count", st.name), st.count.to_string());
            kv(&format!("{}_p50_ms", st.name), format!("{:.4}", st.p50_ms));
            kv(&format!("{}_p90_ms", st.name), format!("{:.4}", st.p90_ms));
            kv(&format!("{}_p99_ms", st.name), format!("{:.4}", st.p99_ms));
            kv(&format!("{}_max_ms", st.name), format!("{:.4}", st.max_ms));
        }
        if let Some(l) = &self.logger {
            kv("log_offered", l.offered.to_string());
            kv("log_persisted", l.persisted.to_string());
            kv("log_dropped", l.dropped.to_string());
            kv("log_failed", l.failed.to_string());
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineOutput {
    pub frames: Vec<FrameRecord>,
    pub targets: Vec<TargetRecord>,
    pub spray: Vec<SprayEntry>,
    pub skips: Vec<SkipRecord>,
    pub stats: PipelineStats,
}

impl PipelineOutput {
    pub fn detection_lines(&self) -> Vec<String> {
        self.frames.iter().map(FrameRecord::to_line).collect()
    }

    pub fn target_lines(&self) -> Vec<String> {
        self.targets
            .iter()
            .map(|t| serde_json::to_string(t).expect("target record serializes"))
            .collect()
    }

    pub fn spray_lines(&self) -> Vec<String> {
        self.spray.iter().map(SprayEntry::to_line).collect()
    }

    pub fn skip_lines(&self) -> Vec<String> {
        self.skips
            .iter()
            .map(|s| serde_json::to_string(s).expect("skip record serializes"))
            .collect()
    }

    /// `detections.jsonl`, `targets.jsonl`, `spray.jsonl`, `skips.jsonl`,
    /// `stats.txt` and `stats.kv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        interchange::write_lines(&dir.join("detections.jsonl"), self.detection_lines())?;
        interchange::write_lines(&dir.join("targets.jsonl"), self.target_lines())?;
        interchange::write_lines(&dir.join("spray.jsonl"), self.spray_lines())?;
        interchange::write_lines(&dir.join("skips.jsonl"), self.skip_lines())?;
        let text = dir.join("stats.txt");
        std::fs::write(&text, self.stats.render_text()).map_err(|e| Error::io(&text, e))?;
        let kv = dir.join("stats.kv");
        std::fs::write(&kv, self.stats.render_kv()).map_err(|e| Error::io(&kv, e))
    }
}

struct FrameResult {
    seq: usize,
    image_id: String,
    timestamp: f64,
    left: Vec<Detection>,
    right: Vec<Detection>,
    targets: Vec<FlowerTarget>,
    views: Option<(Arc<ImageFrame>, Arc<ImageFrame>)>,
    load_ms: f64,
    detect_ms: f64,
    locate_ms: f64,
}

/// Everything one worker does for one stereo pair.
fn process_pair(input: &StereoInput, p: &Pipeline) -> std::result::Result<FrameResult, String> {
    let t0 = Instant::now();
    let views = if p.detector.needs_pixels() {
        Some((
            input.left.load().map_err(|e| e.to_string())?,
            input.right.load().map_err(|e| e.to_string())?,
        ))
    } else {
        None
    };
    let t1 = Instant::now();
    let detect_view =
        |f: &FrameInput, pixels: Option<&Arc<ImageFrame>>| -> std::result::Result<Vec<Detection>, String> {
            let dets = match (&p.detector, pixels) {
                (DetectorSource::Classical(cfg), Some(img)) => classical::detect(img, cfg),
                (DetectorSource::Classical(_), None) => unreachable!("pixels are loaded for the classical detector"),
                (DetectorSource::Emulate { profile, seed }, _) => {
                    let truth = f
                        .truth
                        .as_ref()
                        .ok_or_else(|| format!("no ground truth for {} ({}) to emulate from", f.image_id, f.camera))?;
                    emulate(truth, profile, *seed, f.size).map_err(|e| e.to_string())?
                }
                (DetectorSource::Replay(map), _) => map
                    .get(&f.image_id)
                    .map(|v| v.iter().filter(|d| d.camera == f.camera).cloned().collect())
                    .unwrap_or_default(),
            };
            Ok(dets
                .into_iter()
                .filter(|d| d.score >= p.score_min)
                .map(|d| Detection {
                    image_id: f.image_id.clone(),
                    camera: f.camera,
                    ..d
                })
                .collect())
        };
    let left = detect_view(&input.left, views.as_ref().map(|v| &v.0))?;
    let right = detect_view(&input.right, views.as_ref().map(|v| &v.1))?;
    if p.simulate_latency {
        // one batched inference covers both views
        std::thread::sleep(Duration::from_secs_f64(p.detector.nominal_latency_s()));
    }
    let t2 = Instant::now();
    let m = match_stereo(&left, &right, &p.rig);
    let targets = m
        .pairs
        .iter()
        .map(|pair| triangulate(pair, &p.rig, input.timestamp()).map(|t| to_vehicle_frame(&t, &p.extrinsic)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let t3 = Instant::now();
    Ok(FrameResult {
        seq: input.seq,
        image_id: input.left.image_id.clone(),
        timestamp: input.timestamp(),
        left,
        right,
        targets,
        views,
        load_ms: ms(t1 - t0),
        detect_ms: ms(t2 - t1),
        locate_ms: ms(t3 - t2),
    })
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// The single writer: dedupes against recently scheduled targets, plans and
/// merges spray commands, and releases commands once nothing can merge into
/// them any more.
struct SprayStage<'a> {
    p: &'a Pipeline,
    latency: f64,
    /// World-frame positions (x = odometry + vehicle x) of scheduled targets.
    window: Vec<[f64; 3]>,
    pending: Vec<SprayCommand>,
}

impl<'a> SprayStage<'a> {
    fn new(p: &'a Pipeline) -> Self {
        Self {
            p,
            latency: p.detector.nominal_latency_s(),
            window: Vec::new(),
            pending: Vec::new(),
        }
    }

    fn state_at(&self, t: f64) -> VehicleState {
        if t > self.p.vehicle.t0 {
            self.p.vehicle.advanced_to(t)
        } else {
            self.p.vehicle
        }
    }

    fn handle(&mut self, r: &FrameResult, out: &mut PipelineOutput) {
        let vehicle = &self.p.vehicle;
        let (ts, issue) = (r.timestamp, r.timestamp + self.latency);
        let odo_ts = vehicle.displacement(ts);
        let moved = vehicle.displacement(issue) - odo_ts;
        let radius = self.p.dedupe_radius_m;

        // (index into out.targets, target relative to the vehicle at issue time)
        let mut fresh: Vec<(usize, FlowerTarget)> = Vec::new();
        for t in dedupe_targets(&r.targets, radius) {
            let world = [t.x() + odo_ts, t.y(), t.z()];
            let seen = self.window.iter().any(|w| dist2(w, &world) <= radius * radius);
            let status = if seen {
                TargetStatus::Duplicate
            } else {
                self.window.push(world);
                TargetStatus::Scheduled
            };
            out.targets.push(TargetRecord {
                seq: r.seq,
                image_id: t.image_id.clone(),
                xyz: t.xyz,
                timestamp: t.timestamp,
                status,
            });
            if !seen {
                let shifted = FlowerTarget {
                    xyz: [t.x() - moved, t.y(), t.z()],
                    ..t
                };
                fresh.push((out.targets.len() - 1, shifted));
            }
        }

        let batch: Vec<FlowerTarget> = fresh.iter().map(|(_, t)| t.clone()).collect();
        let plan = plan_spray(&batch, &self.state_at(issue), &self.p.nozzles);
        for m in &plan.misses {
            if let Some(k) = fresh.iter().position(|(_, t)| *t == m.target) {
                let (idx, _) = fresh.swap_remove(k);
                out.targets[idx].status = TargetStatus::Missed;
            }
        }
        out.spray.extend(plan.misses.into_iter().map(SprayEntry::Miss));

        self.pending.extend(plan.commands);
        self.pending = merge_commands(std::mem::take(&mut self.pending));
        // later frames issue no earlier than this one, so nothing can merge
        // into a command that has already finished
        let (done, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|c| c.end_time() < issue);
        self.pending = keep;
        out.spray.extend(done.into_iter().map(SprayEntry::Command));

        let here = vehicle.displacement(issue);
        self.window.retain(|w| w[0] + DEDUPE_EXPIRY_M >= here);
    }

    fn finish(self, out: &mut PipelineOutput) {
        out.spray.extend(self.pending.into_iter().map(SprayEntry::Command));
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Run the pipeline over two camera streams. `logger`, when given, receives
/// one line per processed pair, plus the images if `save_images` is set.
pub fn run_pipeline(
    left: Vec<FrameInput>,
    right: Vec<FrameInput>,
    p: &Pipeline,
    logger: Option<&Logger>,
) -> Result<PipelineOutput> {
    if p.workers == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    let frames_offered = left.len() + right.len();
    let paired = pair_frames(left, right, PAIRING_TOLERANCE_S)?;
    let mut out = PipelineOutput::default();
    for f in &paired.unpaired {
        log::warn!(
            "frame {} ({}) at t={} has no partner; skipped",
            f.image_id,
            f.camera,
            f.timestamp
        );
        out.skips.push(SkipRecord {
            seq: None,
            image_id: f.image_id.clone(),
            camera: Some(f.camera),
            timestamp: f.timestamp,
            reason: "unpaired".into(),
        });
    }
    let n_pairs = paired.pairs.len();
    let save_images = p.log.save_images;

    let mut stage = SprayStage::new(p);
    let mut samples: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let start = Instant::now();
    let mut last_done = start;
    std::thread::scope(|s| -> Result<()> {
        let (job_tx, job_rx) = bounded::<(StereoInput, Instant)>(p.workers * 2);
        let (res_tx, res_rx) = bounded(p.workers * 2);
        for _ in 0..p.workers {
            let (job_rx, res_tx) = (job_rx.clone(), res_tx.clone());
            s.spawn(move || {
                for (input, sent) in job_rx {
                    let outcome = process_pair(&input, p);
                    if res_tx.send((input, sent, outcome)).is_err() {
                        break;
                    }
                }
            });
        }
        drop((job_rx, res_tx));
        s.spawn(move || {
            for input in paired.pairs {
                if job_tx.send((input, Instant::now())).is_err() {
                    break;
                }
            }
        });

        let mut reorder = BTreeMap::new();
        let mut next = 0usize;
        for item in res_rx {
            reorder.insert(item.0.seq, item);
            while let Some((input, sent, outcome)) = reorder.remove(&next) {
                next += 1;
                let t_sched = Instant::now();
                match outcome {
                    Ok(r) => {
                        stage.handle(&r, &mut out);
                        let now = Instant::now();
                        samples.entry("load").or_default().push(r.load_ms);
                        samples.entry("detect").or_default().push(r.detect_ms);
                        samples.entry("locate").or_default().push(r.locate_ms);
                        samples.entry("schedule").or_default().push(ms(now - t_sched));
                        samples.entry("end_to_end").or_default().push(ms(now - sent));
                        if let Some(logger) = logger {
                            let line = format!(
                                "{} {} t={:.3} left={} right={} targets={}",
                                r.seq,
                                r.image_id,
                                r.timestamp,
                                r.left.len(),
                                r.right.len(),
                                r.targets.len()
                            );
                            logger.log(LogRecord::Line(line))?;
                            if save_images {
                                for img in r.views.iter().flat_map(|(a, b)| [a, b]) {
                                    logger.log(LogRecord::Image(Arc::clone(img)))?;
                                }
                            }
                        }
                        out.frames.push(FrameRecord {
                            seq: r.seq,
                            image_id: r.image_id,
                            timestamp: r.timestamp,
                            left: r.left,
                            right: r.right,
                        });
                    }
                    Err(reason) => {
                        log::warn!("pair {} ({}) skipped: {reason}", input.seq, input.left.image_id);
                        out.skips.push(SkipRecord {
                            seq: Some(input.seq),
                            image_id: input.left.image_id.clone(),
                            camera: None,
                            timestamp: input.timestamp(),
                            reason,
                        });
                    }
                }
                last_done = Instant::now();
            }
        }
        Ok(())
    })?;
    stage.finish(&mut out);

    let wall_s = if n_pairs == 0 {
        0.0
    } else {
        (last_done - start).as_secs_f64()
    };
    let pairs_processed = out.frames.len();
    out.stats = PipelineStats {
        workers: p.workers,
        frames_offered,
        pairs: n_pairs,
        pairs_processed,
        pairs_skipped: n_pairs - pairs_processed,
        unpaired_frames: paired.unpaired.len(),
        detections: out.frames.iter().map(|f| f.left.len() + f.right.len()).sum(),
        targets: out.targets.len(),
        duplicates: out
            .targets
            .iter()
            .filter(|t| t.status == TargetStatus::Duplicate)
            .count(),
        commands: out.spray.iter().filter(|e| matches!(e, SprayEntry::Command(_))).count(),
        misses: out.spray.iter().filter(|e| matches!(e, SprayEntry::Miss(_))).count(),
        wall_s,
        fps: if wall_s > 0.0 {
            pairs_processed as f64 / wall_s
        } else {
            0.0
        },
        stages: ["load", "detect", "locate", "schedule", "end_to_end"]
            .into_iter()
            .map(|name| StageStats::from_samples(name, samples.remove(name).unwrap_or_default()))
            .collect(),
        logger: logger.map(Logger::stats),
    };
    Ok(out)
}
