//! Sustained-throughput measurement against the camera frame rate.

use std::fmt::Write as _;

use super::{run_pipeline, synth_stream, Pipeline, StageStats};
use crate::error::Result;
use crate::synth::SceneSpec;

/// The cameras deliver 20 stereo pairs per second.
pub const FRAME_BUDGET_FPS: f64 = 20.0;

/// Distinct scenes rendered for a benchmark; frames cycle through them.
const BENCH_SCENES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub frames: usize,
    pub workers: usize,
    pub wall_s: f64,
    pub fps: f64,
    pub stages: Vec<StageStats>,
    pub budget_fps: f64,
    /// `None` when no frames were run.
    pub pass: Option<bool>,
}

impl BenchReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let verdict = match self.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "n/a",
        };
        let _ = writeln!(s, "frames      {}", self.frames);
        let _ = writeln!(s, "workers     {}", self.workers);
        let _ = writeln!(s, "wall time   {:.3} s", self.wall_s);
        let _ = writeln!(
            s,
            "throughput  {:.2} frames/s (budget {:.0}) {verdict}",
            self.fps, self.budget_fps
        );
        for st in &self.stages {
            let _ = writeln!(s, "  {:<11} median {:>8.2} ms", st.name, st.p50_ms);
        }
        s
    }

    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "workers={}", self.workers);
        let _ = writeln!(s, "wall_s={:.6}", self.wall_s);
        let _ = writeln!(s, "fps={:.4}", self.fps);
        let _ = writeln!(s, "budget_fps={}", self.budget_fps);
        let _ = writeln!(s, "pass={}", self.pass.map_or("na".to_string(), |p| p.to_string()));
        for st in &self.stages {
            let _ = writeln!(s, "{}_p50_ms={:.4}", st.name, st.p50_ms);
        }
        s
    }
}

/// Run `n_frames` synthetic B2 pairs through the pipeline with emulated
/// detector latency switched on, and compare throughput with the budget.
pub fn bench(p: &Pipeline, n_frames: usize, seed: u64) -> Result<BenchReport> {
    let mut p = p.clone();
    p.simulate_latency = true;
    let base = SceneSpec::preset("B2").expect("B2 preset exists");
    let (left, right) = synth_stream(
        &base,
        "B2",
        n_frames,
        seed,
        &p.rig,
        p.detector.needs_pixels(),
        BENCH_SCENES,
    )?;
    let out = run_pipeline(left, right, &p, None)?;
    let st = out.stats;
    Ok(BenchReport {
        frames: st.pairs_processed,
        workers: p.workers,
        wall_s: st.wall_s,
        fps: st.fps,
        stages: st.stages.into_iter().filter(|s| s.count > 0).collect(),
        budget_fps: FRAME_BUDGET_FPS,
        pass: (st.pairs_processed > 0).then_some(st.fps >= FRAME_BUDGET_FPS),
    })
}
