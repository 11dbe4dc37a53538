//! Parametric synthetic benchmark with ground-truth group labels.
//!
//! Seed positions are drawn from simple regions (boxes and clipped spherical
//! shells); each object then moves by `p(t+1) = p(t) + v·d(p(t)) + ε` with
//! isotropic Gaussian noise ε.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kdb::{valid_group_path, KnowledgeDatabase, Placement};
use crate::trajectory::{Axis, DatabaseMeta, ObjectDatabase, ObjectId, Point3, Trajectory};

/// Per-frame noise used by the default configuration.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;
pub const DEFAULT_SEED: u64 = 7;
const MAX_REGION_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchmarkError {
    #[error("invalid benchmark config: {0}")]
    Invalid(String),
    #[error("population {0} receives no objects after rounding")]
    EmptyPopulation(String),
    #[error("could not sample a seed position for population {0}")]
    RegionUnreachable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    Box {
        min: [f64; 3],
        max: [f64; 3],
    },
    /// Points between two spheres, optionally clipped by an axis-aligned box.
    Shell {
        #[serde(default)]
        center: [f64; 3],
        r_min: f64,
        r_max: f64,
        #[serde(default = "unbounded_min")]
        clip_min: [f64; 3],
        #[serde(default = "unbounded_max")]
        clip_max: [f64; 3],
    },
}

fn unbounded_min() -> [f64; 3] {
    [f64::MIN; 3]
}

fn unbounded_max() -> [f64; 3] {
    [f64::MAX; 3]
}

impl Region {
    fn validate(&self) -> Result<(), String> {
        match self {
            Region::Box { min, max } => {
                if (0..3).any(|i| !(min[i].is_finite() && max[i].is_finite() && min[i] <= max[i])) {
                    return Err("box bounds must be finite with min <= max".into());
                }
            }
            Region::Shell {
                center, r_min, r_max, ..
            } => {
                if !(center.iter().all(|c| c.is_finite()) && *r_min >= 0.0 && r_min <= r_max && r_max.is_finite()) {
                    return Err("shell needs finite center and 0 <= r_min <= r_max".into());
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Option<Point3> {
        match self {
            Region::Box { min, max } => {
                let mut c = [0.0; 3];
                for i in 0..3 {
                    c[i] = min[i] + (max[i] - min[i]) * rng.random::<f64>();
                }
                Some(Point3::from_array(c))
            }
            Region::Shell {
                center,
                r_min,
                r_max,
                clip_min,
                clip_max,
            } => {
                let (lo3, hi3) = (r_min.powi(3), r_max.powi(3));
                for _ in 0..MAX_REGION_ATTEMPTS {
                    let dir = unit_vector(rng);
                    let r = (lo3 + (hi3 - lo3) * rng.random::<f64>()).cbrt();
                    let p = Point3::from_array(*center) + dir * r;
                    let a = p.to_array();
                    if (0..3).all(|i| a[i] >= clip_min[i] && a[i] <= clip_max[i]) {
                        return Some(p);
                    }
                }
                None
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum MotionModel {
    StraightDirected { direction: [f64; 3], speed: f64 },
    /// Away from a principal axis through the origin.
    OutwardRadial { axis: Axis, speed: f64 },
    ForwardDirected { direction: [f64; 3], speed: f64 },
    /// A fresh random unit direction every frame.
    RandomWalk { step: f64 },
}

impl MotionModel {
    fn validate(&self) -> Result<(), String> {
        let (speed, direction) = match self {
            MotionModel::StraightDirected { direction, speed } | MotionModel::ForwardDirected { direction, speed } => {
                (*speed, Some(direction))
            }
            MotionModel::OutwardRadial { speed, .. } => (*speed, None),
            MotionModel::RandomWalk { step } => (*step, None),
        };
        if !(speed >= 0.0 && speed.is_finite()) {
            return Err("speeds must be finite and non-negative".into());
        }
        if let Some(d) = direction {
            if !(Point3::from_array(*d).norm() > 0.0) {
                return Err("direction must be non-zero".into());
            }
        }
        Ok(())
    }

    fn mirrored(&self) -> MotionModel {
        let flip = |d: &[f64; 3]| [-d[0], d[1], d[2]];
        match self {
            MotionModel::StraightDirected { direction, speed } => MotionModel::StraightDirected {
                direction: flip(direction),
                speed: *speed,
            },
            MotionModel::ForwardDirected { direction, speed } => MotionModel::ForwardDirected {
                direction: flip(direction),
                speed: *speed,
            },
            other => other.clone(),
        }
    }

    fn step(&self, p: Point3, rng: &mut ChaCha8Rng) -> Point3 {
        match self {
            MotionModel::StraightDirected { direction, speed } | MotionModel::ForwardDirected { direction, speed } => {
                let d = Point3::from_array(*direction);
                d * (speed / d.norm())
            }
            MotionModel::OutwardRadial { axis, speed } => {
                let mut a = p.to_array();
                a[axis.index()] = 0.0;
                let radial = Point3::from_array(a);
                let r = radial.norm();
                if r > 0.0 {
                    radial * (speed / r)
                } else {
                    Point3::ORIGIN
                }
            }
            MotionModel::RandomWalk { step } => unit_vector(rng) * *step,
        }
    }

    fn describe(&self) -> String {
        // adding zero turns a mirrored -0 into 0
        let fmt_dir = |d: &[f64; 3]| format!("({}, {}, {})", d[0] + 0.0, d[1] + 0.0, d[2] + 0.0);
        match self {
            MotionModel::StraightDirected { direction, speed } => {
                format!("straight along {} at {speed}/frame", fmt_dir(direction))
            }
            MotionModel::ForwardDirected { direction, speed } => {
                format!("forward along {} at {speed}/frame", fmt_dir(direction))
            }
            MotionModel::OutwardRadial { axis, speed } => format!("outward from the {axis} axis at {speed}/frame"),
            MotionModel::RandomWalk { step } => format!("random walk, step {step}"),
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Point3 {
    loop {
        let v = Point3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v * (1.0 / n);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub fraction: f64,
    pub region: Region,
    pub motion: MotionModel,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Adds an x-mirrored copy; the configured region is the `left` side.
    #[serde(default)]
    pub mirror: bool,
    /// Ground-truth path; `{side}` expands to `left`/`right`. Distractors have none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub n_objects: usize,
    pub n_frames: usize,
    pub seed: u64,
    pub groups: Vec<GroupSpec>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let upper_box = Region::Box {
            min: [-140.0, 30.0, -60.0],
            max: [-60.0, 120.0, 60.0],
        };
        let sigma = DEFAULT_NOISE_SIGMA;
        BenchmarkConfig {
            n_objects: 520,
            n_frames: 400,
            seed: DEFAULT_SEED,
            groups: vec![
                GroupSpec {
                    name: "surface-straight".into(),
                    fraction: 0.12,
                    region: Region::Shell {
                        center: [0.0; 3],
                        r_min: 180.0,
                        r_max: 200.0,
                        clip_min: [f64::MIN, 40.0, -60.0],
                        clip_max: [-60.0, 140.0, 60.0],
                    },
                    motion: MotionModel::StraightDirected {
                        direction: [0.0, 1.0, 0.0],
                        speed: 0.4,
                    },
                    noise_sigma: sigma,
                    mirror: true,
                    truth_path: Some("upper/{side}/surface".into()),
                },
                GroupSpec {
                    name: "deep-forward".into(),
                    fraction: 0.12,
                    region: upper_box.clone(),
                    motion: MotionModel::ForwardDirected {
                        direction: [0.0, 0.0, 1.0],
                        speed: 0.25,
                    },
                    noise_sigma: sigma,
                    mirror: true,
                    truth_path: Some("upper/{side}/deep/forward".into()),
                },
                GroupSpec {
                    name: "deep-outward".into(),
                    fraction: 0.12,
                    region: upper_box,
                    motion: MotionModel::OutwardRadial { axis: Axis::Y, speed: 0.25 },
                    noise_sigma: sigma,
                    mirror: true,
                    truth_path: Some("upper/{side}/deep/outward".into()),
                },
                GroupSpec {
                    name: "upper-distractor".into(),
                    fraction: 0.18,
                    region: Region::Box {
                        min: [-160.0, 30.0, -80.0],
                        max: [-40.0, 140.0, 80.0],
                    },
                    motion: MotionModel::RandomWalk { step: 0.5 },
                    noise_sigma: sigma,
                    mirror: true,
                    truth_path: None,
                },
                GroupSpec {
                    name: "lower-distractor".into(),
                    fraction: 0.46,
                    region: Region::Box {
                        min: [-180.0, -200.0, -100.0],
                        max: [180.0, -30.0, 100.0],
                    },
                    motion: MotionModel::RandomWalk { step: 0.5 },
                    noise_sigma: sigma,
                    mirror: false,
                    truth_path: None,
                },
            ],
        }
    }
}

/// One generated population: a group, or one side of a mirrored group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub group: usize,
    pub name: String,
    pub side: Option<String>,
    pub count: usize,
    pub truth_path: Option<String>,
}

impl BenchmarkConfig {
    /// Same scenario with every group's noise set to `sigma`.
    pub fn with_noise(mut self, sigma: f64) -> Self {
        for g in &mut self.groups {
            g.noise_sigma = sigma;
        }
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), BenchmarkError> {
        let bad = |m: String| Err(BenchmarkError::Invalid(m));
        if self.n_objects == 0 {
            return bad("n_objects must be at least 1".into());
        }
        if self.n_frames < 2 {
            return bad("n_frames must be at least 2".into());
        }
        if self.n_frames > u32::MAX as usize {
            return bad("n_frames too large".into());
        }
        if self.groups.is_empty() {
            return bad("no groups".into());
        }
        let total: f64 = self.groups.iter().map(|g| g.fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("fractions sum to {total}, not 1"));
        }
        for g in &self.groups {
            let ctx = |m: String| BenchmarkError::Invalid(format!("{}: {m}", g.name));
            if !(g.fraction >= 0.0) {
                return Err(ctx("negative fraction".into()));
            }
            if !(g.noise_sigma >= 0.0 && g.noise_sigma.is_finite()) {
                return Err(ctx("noise sigma must be finite and non-negative".into()));
            }
            g.region.validate().map_err(ctx)?;
            g.motion.validate().map_err(ctx)?;
            if let Some(t) = &g.truth_path {
                if t.contains("{side}") && !g.mirror {
                    return Err(ctx("{side} in truth path of an unmirrored group".into()));
                }
                if !valid_group_path(&t.replace("{side}", "left")) {
                    return Err(ctx(format!("invalid truth path {t:?}")));
                }
            }
        }
        Ok(())
    }

    /// Populations with object counts from largest-remainder rounding.
    pub fn populations(&self) -> Result<Vec<Population>, BenchmarkError> {
        self.validate()?;
        let mut pops = Vec::new();
        let mut shares = Vec::new();
        for (i, g) in self.groups.iter().enumerate() {
            let sides: Vec<Option<&str>> = if g.mirror {
                vec![Some("left"), Some("right")]
            } else {
                vec![None]
            };
            for side in &sides {
                pops.push(Population {
                    group: i,
                    name: match side {
                        Some(s) => format!("{} ({s})", g.name),
                        None => g.name.clone(),
                    },
                    side: side.map(str::to_string),
                    count: 0,
                    truth_path: g
                        .truth_path
                        .as_ref()
                        .map(|t| t.replace("{side}", side.unwrap_or("left"))),
                });
                shares.push(g.fraction / sides.len() as f64 * self.n_objects as f64);
            }
        }
        let mut assigned = 0;
        for (p, s) in pops.iter_mut().zip(&shares) {
            p.count = s.floor() as usize;
            assigned += p.count;
        }
        let mut order: Vec<usize> = (0..pops.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = shares[a] - shares[a].floor();
            let rb = shares[b] - shares[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().take(self.n_objects.saturating_sub(assigned)) {
            pops[i].count += 1;
        }
        if let Some(empty) = pops.iter().find(|p| p.count == 0) {
            return Err(BenchmarkError::EmptyPopulation(empty.name.clone()));
        }
        Ok(pops)
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("configs serialize")))
    }
}

/// Human-readable summary, one line per population.
pub fn describe(cfg: &BenchmarkConfig) -> String {
    let pops = match cfg.populations() {
        Ok(p) => p,
        Err(e) => return format!("{e}\n"),
    };
    let mut out = String::new();
    for p in &pops {
        let g = &cfg.groups[p.group];
        let motion = if p.side.as_deref() == Some("right") {
            g.motion.mirrored()
        } else {
            g.motion.clone()
        };
        let _ = writeln!(
            out,
            "{}: {} objects ({:.1}%), {}, noise {}, truth {}",
            p.name,
            p.count,
            100.0 * p.count as f64 / cfg.n_objects as f64,
            motion.describe(),
            g.noise_sigma,
            p.truth_path.as_deref().unwrap_or("unassigned"),
        );
    }
    out
}

fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub db: ObjectDatabase,
    pub truth: KnowledgeDatabase,
    /// Sampled seed location of every object.
    pub seeds: BTreeMap<ObjectId, Point3>,
    /// Population index (into [`BenchmarkConfig::populations`]) of every object.
    pub population_of: BTreeMap<ObjectId, usize>,
    pub populations: Vec<Population>,
}

pub fn object_id(index: usize, n_objects: usize) -> ObjectId {
    let width = n_objects.saturating_sub(1).to_string().len().max(4);
    format!("obj{index:0width$}")
}

/// Generates the database and its ground truth; deterministic in the config.
pub fn generate(cfg: &BenchmarkConfig) -> Result<Benchmark, BenchmarkError> {
    let pops = cfg.populations()?;
    let mut assignment: Vec<usize> = pops.iter().enumerate().flat_map(|(i, p)| std::iter::repeat_n(i, p.count)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    assignment.shuffle(&mut rng);

    let generated: Vec<Result<(Trajectory, Point3), BenchmarkError>> = assignment
        .par_iter()
        .enumerate()
        .map(|(index, &pop)| {
            let p = &pops[pop];
            let g = &cfg.groups[p.group];
            let right = p.side.as_deref() == Some("right");
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, index as u64));
            let mut seed = g
                .region
                .sample(&mut rng)
                .ok_or_else(|| BenchmarkError::RegionUnreachable(p.name.clone()))?;
            let motion = if right {
                seed.x = -seed.x;
                g.motion.mirrored()
            } else {
                g.motion.clone()
            };
            let noise = |rng: &mut ChaCha8Rng| {
                let z = Point3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                z * g.noise_sigma
            };
            let mut pos = seed + noise(&mut rng);
            let mut positions = Vec::with_capacity(cfg.n_frames);
            positions.push(pos);
            for _ in 1..cfg.n_frames {
                let step = motion.step(pos, &mut rng);
                pos = pos + step + noise(&mut rng);
                positions.push(pos);
            }
            let traj = Trajectory::from_positions(object_id(index, cfg.n_objects), 0, positions)
                .map_err(|e| BenchmarkError::Invalid(e.to_string()))?;
            Ok((traj, seed))
        })
        .collect();

    let mut trajectories = Vec::with_capacity(cfg.n_objects);
    let mut seeds = BTreeMap::new();
    let mut population_of = BTreeMap::new();
    let mut truth = KnowledgeDatabase::new(format!("benchmark-{}", cfg.seed), cfg.digest());
    for (result, &pop) in generated.into_iter().zip(&assignment) {
        let (traj, seed) = result?;
        let id = traj.object_id().to_string();
        let placement = match &pops[pop].truth_path {
            Some(path) => Placement::Group(path.clone()),
            None => Placement::Unassigned,
        };
        truth.insert(id.clone(), placement, None);
        seeds.insert(id.clone(), seed);
        population_of.insert(id, pop);
        trajectories.push(traj);
    }
    let db = ObjectDatabase::with_frame_range(
        format!("benchmark-{}", cfg.seed),
        trajectories,
        DatabaseMeta::default(),
        Some((0, cfg.n_frames as u32 - 1)),
    )
    .map_err(|e| BenchmarkError::Invalid(e.to_string()))?;
    Ok(Benchmark {
        db,
        truth,
        seeds,
        population_of,
        populations: pops,
    })
}
