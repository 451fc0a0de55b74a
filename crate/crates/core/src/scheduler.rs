//! Nozzle fire-time planning from vehicle kinematics.
//!
//! The vehicle moves straight along +x with constant acceleration and never
//! reverses. A nozzle at forward offset `x_n` reaches a target at `x_t` when
//! `v0·t + a·t²/2 = x_t - x_n`; the valve is opened `actuation_latency`
//! earlier so the spray leaves exactly on arrival.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{Error, Result};
use crate::stereo::FlowerTarget;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Forward speed, m/s.
    pub v0: f64,
    /// Forward acceleration, m/s².
    pub a: f64,
    /// Time the state was sampled, s.
    pub t0: f64,
}

impl Default for VehicleState {
    fn default() -> Self {
        Self {
            v0: 0.5,
            a: 0.0,
            t0: 0.0,
        }
    }
}

impl VehicleState {
    pub fn new(v0: f64, a: f64, t0: f64) -> Result<Self> {
        if !(v0 >= 0.0) || !a.is_finite() || !t0.is_finite() {
            return Err(Error::Config(format!(
                "vehicle state needs finite values with v0 >= 0, got v0={v0} a={a} t0={t0}"
            )));
        }
        Ok(Self { v0, a, t0 })
    }

    /// Time at which the vehicle comes to rest, if it decelerates.
    fn stop_time(&self) -> Option<f64> {
        (self.a < 0.0).then(|| self.v0 / -self.a)
    }

    /// Distance travelled since `t0`; the vehicle holds still once stopped.
    pub fn displacement(&self, t: f64) -> f64 {
        let dt = (t - self.t0).max(0.0);
        let dt = self.stop_time().map_or(dt, |ts| dt.min(ts));
        self.v0 * dt + 0.5 * self.a * dt * dt
    }

    /// The same trajectory sampled at a later time.
    pub fn advanced_to(&self, t: f64) -> Self {
        let dt = (t - self.t0).max(0.0);
        let (v, a) = match self.stop_time() {
            Some(ts) if dt >= ts => (0.0, 0.0),
            _ => (self.v0 + self.a * dt, self.a),
        };
        Self { v0: v, a, t0: t }
    }

    /// Parse `v=<f>,a=<f>,t0=<f>`; omitted keys keep their defaults.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut s = Self::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("vehicle spec '{part}' is not key=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("vehicle value '{v}' is not a number")))?;
            match k.trim() {
                "v" | "v0" => s.v0 = v,
                "a" => s.a = v,
                "t0" => s.t0 = v,
                other => return Err(Error::Config(format!("unknown vehicle key '{other}'"))),
            }
        }
        Self::new(s.v0, s.a, s.t0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nozzle {
    pub id: String,
    /// Lateral offset, m (vehicle y, left positive).
    pub y: f64,
    /// Forward offset, m (vehicle x).
    pub x: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NozzleConfig {
    pub nozzles: Vec<Nozzle>,
    pub reach_lateral: f64,
    pub actuation_latency: f64,
    pub spray_duration: f64,
}

impl Default for NozzleConfig {
    fn default() -> Self {
        Self {
            nozzles: vec![Nozzle {
                id: "n0".into(),
                y: 0.0,
                x: 0.0,
            }],
            reach_lateral: 0.25,
            actuation_latency: 0.02,
            spray_duration: 0.1,
        }
    }
}

impl NozzleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nozzles.is_empty() {
            return Err(Error::Config("at least one nozzle is required".into()));
        }
        if !(self.reach_lateral > 0.0) {
            return Err(Error::Config("reach_lateral must be > 0".into()));
        }
        if !(self.actuation_latency >= 0.0) {
            return Err(Error::Config("actuation_latency must be >= 0".into()));
        }
        if !(self.spray_duration > 0.0) {
            return Err(Error::Config("spray_duration must be > 0".into()));
        }
        let mut ids = HashSet::new();
        for n in &self.nozzles {
            if !ids.insert(n.id.as_str()) {
                return Err(Error::Config(format!("duplicate nozzle id '{}'", n.id)));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = config::parse_toml(text, "nozzle config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = config::load_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MissReason {
    /// No nozzle within lateral reach.
    NoNozzleCoverage,
    /// The nozzle never reaches the target (behind, or vehicle stops short).
    TargetUnreachable,
    /// Arrival is sooner than the actuation latency allows.
    TooLate,
}

impl fmt::Display for MissReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MissReason::NoNozzleCoverage => "NoNozzleCoverage",
            MissReason::TargetUnreachable => "TargetUnreachable",
            MissReason::TooLate => "TooLate",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum FireTimeError {
    #[error("target unreachable")]
    TargetUnreachable,
    #[error("target reached before the actuator can respond")]
    TooLate,
}

impl From<FireTimeError> for MissReason {
    fn from(e: FireTimeError) -> Self {
        match e {
            FireTimeError::TargetUnreachable => MissReason::TargetUnreachable,
            FireTimeError::TooLate => MissReason::TooLate,
        }
    }
}

/// Smallest `t >= 0` with `v0·t + a·t²/2 = dx`, or `None`.
pub fn time_to_cover(dx: f64, v0: f64, a: f64) -> Option<f64> {
    if dx == 0.0 {
        return Some(0.0);
    }
    if dx < 0.0 {
        return None;
    }
    let disc = v0 * v0 + 2.0 * a * dx;
    if disc < 0.0 {
        return None;
    }
    let denom = v0 + disc.sqrt();
    // rationalized root avoids cancellation when a is small
    (denom > 0.0).then(|| 2.0 * dx / denom)
}

/// Absolute time the nozzle must be triggered to hit `target`.
pub fn solve_fire_time(
    target: &FlowerTarget,
    state: &VehicleState,
    nozzle: &Nozzle,
    actuation_latency: f64,
) -> std::result::Result<f64, FireTimeError> {
    let dx = target.x() - nozzle.x;
    let t = time_to_cover(dx, state.v0, state.a).ok_or(FireTimeError::TargetUnreachable)?;
    if t < actuation_latency {
        return Err(FireTimeError::TooLate);
    }
    Ok(state.t0 + t - actuation_latency)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SprayCommand {
    pub nozzle_id: String,
    pub fire_time: f64,
    pub duration: f64,
    /// Targets covered by this command; more than one after merging.
    pub targets: Vec<FlowerTarget>,
}

impl SprayCommand {
    pub fn end_time(&self) -> f64 {
        self.fire_time + self.duration
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Miss {
    pub target: FlowerTarget,
    pub reason: MissReason,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SprayPlan {
    pub commands: Vec<SprayCommand>,
    pub misses: Vec<Miss>,
}

fn cmp_targets(a: &FlowerTarget, b: &FlowerTarget) -> Ordering {
    a.xyz
        .iter()
        .zip(&b.xyz)
        .map(|(p, q)| p.total_cmp(q))
        .chain([a.timestamp.total_cmp(&b.timestamp), a.image_id.cmp(&b.image_id)])
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

/// Single-linkage clustering within `radius`; clusters collapse to their
/// centroid carrying the earliest timestamp. Sorted by forward distance.
pub fn dedupe_targets(targets: &[FlowerTarget], radius: f64) -> Vec<FlowerTarget> {
    let mut sorted: Vec<FlowerTarget> = targets.to_vec();
    sorted.sort_by(cmp_targets);
    let n = sorted.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let r2 = radius * radius;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = (0..3).map(|k| (sorted[i].xyz[k] - sorted[j].xyz[k]).powi(2)).sum();
            if d2 <= r2 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let root = find(&mut parent, i);
        clusters[root].push(i);
    }
    let mut out: Vec<FlowerTarget> = clusters
        .into_iter()
        .filter(|c| !c.is_empty())
        .map(|members| {
            if members.len() == 1 {
                return sorted[members[0]].clone();
            }
            let k = members.len() as f64;
            let mut xyz = [0.0; 3];
            for &m in &members {
                for (acc, v) in xyz.iter_mut().zip(&sorted[m].xyz) {
                    *acc += v;
                }
            }
            xyz.iter_mut().for_each(|v| *v /= k);
            let earliest = members
                .iter()
                .min_by(|a, b| sorted[**a].timestamp.total_cmp(&sorted[**b].timestamp))
                .copied()
                .unwrap();
            FlowerTarget {
                xyz,
                ..sorted[earliest].clone()
            }
        })
        .collect();
    out.sort_by(cmp_targets);
    out
}

/// The nozzle with the smallest lateral offset within reach; ties go to the
/// earlier nozzle in the config.
pub fn choose_nozzle<'a>(target: &FlowerTarget, cfg: &'a NozzleConfig) -> Option<&'a Nozzle> {
    cfg.nozzles
        .iter()
        .map(|n| (n, (target.y() - n.y).abs()))
        .filter(|(_, d)| *d <= cfg.reach_lateral)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, _)| n)
}

pub fn plan_spray(targets: &[FlowerTarget], state: &VehicleState, cfg: &NozzleConfig) -> SprayPlan {
    let mut sorted: Vec<&FlowerTarget> = targets.iter().collect();
    sorted.sort_by(|a, b| cmp_targets(a, b));

    let mut plan = SprayPlan::default();
    let mut raw: Vec<SprayCommand> = Vec::new();
    for t in sorted {
        let Some(nozzle) = choose_nozzle(t, cfg) else {
            plan.misses.push(Miss {
                target: t.clone(),
                reason: MissReason::NoNozzleCoverage,
            });
            continue;
        };
        match solve_fire_time(t, state, nozzle, cfg.actuation_latency) {
            Ok(fire_time) => raw.push(SprayCommand {
                nozzle_id: nozzle.id.clone(),
                fire_time,
                duration: cfg.spray_duration,
                targets: vec![t.clone()],
            }),
            Err(e) => plan.misses.push(Miss {
                target: t.clone(),
                reason: e.into(),
            }),
        }
    }
    plan.commands = merge_commands(raw);
    plan
}

/// Sort by fire time and fuse commands whose closed intervals intersect on
/// the same nozzle.
pub fn merge_commands(mut cmds: Vec<SprayCommand>) -> Vec<SprayCommand> {
    cmds.sort_by(|a, b| a.fire_time.total_cmp(&b.fire_time).then(a.nozzle_id.cmp(&b.nozzle_id)));
    let mut out: Vec<SprayCommand> = Vec::with_capacity(cmds.len());
    for c in cmds {
        let open = out
            .iter_mut()
            .rev()
            .find(|o| o.nozzle_id == c.nozzle_id)
            .filter(|o| c.fire_time <= o.end_time());
        match open {
            Some(o) => {
                let end = o.end_time().max(c.end_time());
                o.duration = end - o.fire_time;
                o.targets.extend(c.targets);
            }
            None => out.push(c),
        }
    }
    out
}
