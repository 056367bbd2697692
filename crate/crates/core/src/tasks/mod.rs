//! PMI-mini: a seeded suite of nine small perception, motor and interaction
//! tasks over 16x16 renders of star-shaped objects.
//!
//! All tasks draw object geometry (five classes) and per-class anchor points
//! from a blend of suite-wide and task-private latents; `overlap` sets the
//! suite-wide share. With `overlap = 0` tasks share nothing but the renderer.

mod io;
mod render;

pub use io::{read_dataset, read_suite, write_dataset, write_manifest, write_suite, DATASET_MAGIC};
pub use render::{render, Pose, Prototype, Style, RADII, SIDE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::snn::LossKind;
use crate::topology::{ColumnSpec, SampleSet, Target};
use crate::{Error, Result};

pub const NUM_TASKS: usize = 9;
pub const CLASSES: usize = 5;
pub const COMMAND_STEPS: usize = 4;
pub const COMMAND_DIMS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Perception,
    Motor,
    Interaction,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Perception => "perception",
            Family::Motor => "motor",
            Family::Interaction => "interaction",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputKind {
    Classes(usize),
    Action(usize),
    Commands { steps: usize, dims: usize },
}

impl OutputKind {
    pub fn len(self) -> usize {
        match self {
            OutputKind::Classes(k) | OutputKind::Action(k) => k,
            OutputKind::Commands { steps, dims } => steps * dims,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Accuracy,
    NegMse,
    Success,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::NegMse => "neg_mse",
            Metric::Success => "success_rate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub family: Family,
    pub style: Style,
    pub in_c: usize,
    pub in_hw: (usize, usize),
    pub state_dim: usize,
    pub output: OutputKind,
    pub metric: Metric,
    /// Earlier tasks sharing latent factors, with the shared weight.
    pub overlap: Vec<(usize, f64)>,
    pub cmd_tolerance: f64,
}

impl TaskSpec {
    pub fn loss(&self) -> LossKind {
        match self.output {
            OutputKind::Classes(_) => LossKind::CrossEntropy,
            _ => LossKind::MeanSquared,
        }
    }

    pub fn column_spec(&self) -> ColumnSpec {
        ColumnSpec {
            in_c: self.in_c,
            in_hw: self.in_hw,
            state_dim: self.state_dim,
            outputs: self.output.len(),
            loss: self.loss(),
        }
    }

    pub fn input_shape(&self) -> String {
        let (h, w) = self.in_hw;
        if self.state_dim > 0 {
            format!("{}x{}x{}+{}", self.in_c, h, w, self.state_dim)
        } else {
            format!("{}x{}x{}", self.in_c, h, w)
        }
    }

    pub fn output_shape(&self) -> String {
        match self.output {
            OutputKind::Classes(k) => format!("classes:{k}"),
            OutputKind::Action(d) => format!("action:{d}"),
            OutputKind::Commands { steps, dims } => format!("commands:{steps}x{dims}"),
        }
    }

    /// Metric of `outputs` (one row per sample) against `split`.
    pub fn evaluate(&self, outputs: &[Vec<f32>], split: &Split) -> f64 {
        assert_eq!(outputs.len(), split.len());
        if outputs.is_empty() {
            return 0.0;
        }
        let n = outputs.len() as f64;
        match (&split.targets, self.metric) {
            (Targets::Classes(c), _) => {
                let hits = outputs.iter().zip(c).filter(|(o, &c)| argmax(o) == c as usize).count();
                hits as f64 / n
            }
            (Targets::Values { dim, data }, Metric::Success) => {
                let pred: Vec<f32> = outputs.iter().flatten().copied().collect();
                success_rate(&pred, data, *dim, self.cmd_tolerance)
            }
            (Targets::Values { dim, data }, _) => {
                let se: f64 = outputs
                    .iter()
                    .zip(data.chunks_exact(*dim))
                    .flat_map(|(o, t)| o.iter().zip(t).map(|(&a, &b)| (a as f64 - b as f64).powi(2)))
                    .sum();
                -se / (n * *dim as f64)
            }
        }
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of episodes whose every predicted command lies within `tol` of
/// the reference trajectory. Rows of `dim` values per episode.
pub fn success_rate(pred: &[f32], target: &[f32], dim: usize, tol: f64) -> f64 {
    assert_eq!(pred.len(), target.len());
    let episodes = target.len() / dim.max(1);
    if episodes == 0 {
        return 0.0;
    }
    let ok = pred
        .chunks_exact(dim)
        .zip(target.chunks_exact(dim))
        .filter(|(p, t)| p.iter().zip(*t).all(|(&a, &b)| (a as f64 - b as f64).abs() <= tol))
        .count();
    ok as f64 / episodes as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes(Vec<u32>),
    Values { dim: usize, data: Vec<f32> },
}

/// One split: flat row-major inputs, states and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub image_len: usize,
    pub state_dim: usize,
    pub images: Vec<f32>,
    pub states: Vec<f32>,
    pub targets: Targets,
}

impl Split {
    fn empty(image_len: usize, state_dim: usize, output: OutputKind) -> Self {
        let targets = match output {
            OutputKind::Classes(_) => Targets::Classes(Vec::new()),
            other => Targets::Values {
                dim: other.len(),
                data: Vec::new(),
            },
        };
        Split {
            image_len,
            state_dim,
            images: Vec::new(),
            states: Vec::new(),
            targets,
        }
    }

    /// Rows `idx` as a new split.
    pub fn subset(&self, idx: &[usize]) -> Split {
        let mut out = Split {
            image_len: self.image_len,
            state_dim: self.state_dim,
            images: Vec::with_capacity(idx.len() * self.image_len),
            states: Vec::with_capacity(idx.len() * self.state_dim),
            targets: match &self.targets {
                Targets::Classes(_) => Targets::Classes(Vec::new()),
                Targets::Values { dim, .. } => Targets::Values { dim: *dim, data: Vec::new() },
            },
        };
        for &i in idx {
            out.images.extend_from_slice(self.image(i));
            out.states.extend_from_slice(self.state(i));
            match (&mut out.targets, &self.targets) {
                (Targets::Classes(o), Targets::Classes(c)) => o.push(c[i]),
                (Targets::Values { dim, data: o }, Targets::Values { data, .. }) => o.extend_from_slice(&data[i * *dim..(i + 1) * *dim]),
                _ => unreachable!(),
            }
        }
        out
    }
}

impl SampleSet for Split {
    fn len(&self) -> usize {
        self.images.len() / self.image_len.max(1)
    }

    fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.image_len..(i + 1) * self.image_len]
    }

    fn state(&self, i: usize) -> &[f32] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    fn target(&self, i: usize) -> Target<'_> {
        match &self.targets {
            Targets::Classes(c) => Target::Class(c[i] as usize),
            Targets::Values { dim, data } => Target::Values(&data[i * dim..(i + 1) * dim]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub seed: u64,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    /// Metric of a constant predictor: 1/K for classes, the training-target
    /// mean otherwise.
    pub fn chance_level(&self) -> f64 {
        match (&self.train.targets, self.spec.output) {
            (_, OutputKind::Classes(k)) => 1.0 / k as f64,
            (Targets::Values { dim, data }, _) => {
                let n = (data.len() / dim).max(1) as f32;
                let mut mean = vec![0f32; *dim];
                for row in data.chunks_exact(*dim) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v / n;
                    }
                }
                let outputs = vec![mean; self.test.len()];
                self.spec.evaluate(&outputs, &self.test)
            }
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Weight of suite-wide latents in every task's geometry and anchors.
    pub overlap: f64,
    pub cmd_tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 7,
            train: 400,
            val: 100,
            test: 200,
            overlap: 0.8,
            cmd_tolerance: 0.1,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.test == 0 {
            return Err(Error::InvalidConfig("suite sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::InvalidConfig(format!("suite.overlap must lie in [0,1], got {}", self.overlap)));
        }
        if !(self.cmd_tolerance > 0.0) {
            return Err(Error::InvalidConfig(format!("suite.cmd_tolerance must be > 0, got {}", self.cmd_tolerance)));
        }
        Ok(())
    }
}

const STYLES: [Style; 3] = [Style::Outline, Style::Filled, Style::Textured];
const LINK: f64 = 0.65;
const ARM_BASE: (f64, f64) = (0.5, -0.1);
/// Joint-angle ranges over goals in the unit square, used to rescale to [0,1].
const SHOULDER: (f64, f64) = (-1.01, 1.78);
const ELBOW: (f64, f64) = (0.75, 2.99);

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
struct Latents {
    protos: [Prototype; CLASSES],
    anchors: [[f64; 2]; CLASSES],
}

impl Latents {
    fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Latents {
            protos: std::array::from_fn(|_| {
                std::array::from_fn(|_| if rng.random_bool(0.5) { rng.random_range(0.85..1.0) } else { rng.random_range(0.2..0.4) })
            }),
            anchors: std::array::from_fn(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]),
        }
    }

    fn blend(&self, own: &Latents, s: f64) -> Latents {
        let mix = |a: f64, b: f64| s * a + (1.0 - s) * b;
        Latents {
            protos: std::array::from_fn(|c| std::array::from_fn(|i| mix(self.protos[c][i], own.protos[c][i]))),
            anchors: std::array::from_fn(|c| std::array::from_fn(|i| mix(self.anchors[c][i], own.anchors[c][i]))),
        }
    }
}

pub fn task_spec(task: usize, cfg: &SuiteConfig) -> TaskSpec {
    let family = match task {
        1..=3 => Family::Perception,
        4..=6 => Family::Motor,
        _ => Family::Interaction,
    };
    let (output, metric, state_dim) = match family {
        Family::Perception => (OutputKind::Classes(CLASSES), Metric::Accuracy, 0),
        Family::Motor => (OutputKind::Action(task - 2), Metric::NegMse, 0),
        Family::Interaction => (
            OutputKind::Commands {
                steps: COMMAND_STEPS,
                dims: COMMAND_DIMS,
            },
            Metric::Success,
            COMMAND_DIMS,
        ),
    };
    let overlap = if cfg.overlap > 0.0 { (1..task).map(|k| (k, cfg.overlap)).collect() } else { Vec::new() };
    TaskSpec {
        task_id: task,
        family,
        style: STYLES[(task - 1) % 3],
        in_c: 1,
        in_hw: (SIDE, SIDE),
        state_dim,
        output,
        metric,
        overlap,
        cmd_tolerance: cfg.cmd_tolerance,
    }
}

/// Normalized joint angles reaching `goal` with a two-link arm.
pub fn inverse_kinematics(goal: [f64; 2]) -> [f64; 2] {
    let dx = goal[0] - ARM_BASE.0;
    let dy = goal[1] - ARM_BASE.1;
    let d2 = dx * dx + dy * dy;
    let c2 = ((d2 - 2.0 * LINK * LINK) / (2.0 * LINK * LINK)).clamp(-1.0, 1.0);
    let t2 = c2.acos();
    let t1 = dy.atan2(dx) - (LINK * t2.sin()).atan2(LINK + LINK * t2.cos());
    [(t1 - SHOULDER.0) / (SHOULDER.1 - SHOULDER.0), (t2 - ELBOW.0) / (ELBOW.1 - ELBOW.0)]
}

fn lerp(a: [f64; 2], b: [f64; 2], f: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f]
}

struct Drawn {
    image: Vec<f32>,
    state: Vec<f32>,
    class: usize,
    values: Vec<f32>,
}

fn draw_sample<R: Rng + ?Sized>(spec: &TaskSpec, lat: &Latents, rng: &mut R) -> Drawn {
    let class = rng.random_range(0..CLASSES);
    let pose = Pose {
        cx: rng.random_range(6.0..10.0),
        cy: rng.random_range(6.0..10.0),
        scale: rng.random_range(5.0..6.5),
        rotation: rng.random_range(-0.25..0.25),
    };
    let image = render(&lat.protos[class], pose, spec.style, rng);
    let pos = [(pose.cx - 6.0) / 4.0, (pose.cy - 6.0) / 4.0];
    let size = (pose.scale - 5.0) / 1.5;
    let anchor = lat.anchors[class];
    let reach = lerp(anchor, pos, 0.5);
    let mut state = Vec::new();
    let values: Vec<f64> = match spec.family {
        Family::Perception => Vec::new(),
        Family::Motor => {
            let mut v = inverse_kinematics(reach).to_vec();
            let d = spec.output.len();
            if d >= 3 {
                v.push(class as f64 / (CLASSES - 1) as f64);
            }
            if d >= 4 {
                v.push(size);
            }
            v
        }
        Family::Interaction => {
            let start = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            state = start.iter().map(|&v| v as f32).collect();
            let n = COMMAND_STEPS as f64;
            let waypoints: Vec<[f64; 2]> = match spec.task_id {
                7 => (1..=COMMAND_STEPS).map(|l| lerp(start, pos, l as f64 / n)).collect(),
                8 => (1..=COMMAND_STEPS).map(|l| lerp(start, reach, l as f64 / n)).collect(),
                _ => {
                    let half = COMMAND_STEPS / 2;
                    (1..=half)
                        .map(|l| lerp(start, anchor, l as f64 / half as f64))
                        .chain((1..=half).map(|l| lerp(anchor, pos, l as f64 / half as f64)))
                        .collect()
                }
            };
            waypoints.into_iter().flatten().collect()
        }
    };
    Drawn {
        image,
        state,
        class,
        values: values.into_iter().map(|v| v as f32).collect(),
    }
}

fn draw_split(spec: &TaskSpec, lat: &Latents, n: usize, rng: &mut ChaCha8Rng) -> Split {
    let mut split = Split::empty(SIDE * SIDE * spec.in_c, spec.state_dim, spec.output);
    for _ in 0..n {
        let d = draw_sample(spec, lat, rng);
        split.images.extend(d.image);
        split.states.extend(d.state);
        match &mut split.targets {
            Targets::Classes(c) => c.push(d.class as u32),
            Targets::Values { data, .. } => data.extend(d.values),
        }
    }
    split
}

/// Generates task `task` (1-based) of the suite.
pub fn generate_task(cfg: &SuiteConfig, task: usize) -> Result<Dataset> {
    cfg.validate()?;
    if !(1..=NUM_TASKS).contains(&task) {
        return Err(Error::InvalidConfig(format!("task {task} outside 1..={NUM_TASKS}")));
    }
    let shared = Latents::draw(&mut stream(cfg.seed, 0));
    let own = Latents::draw(&mut stream(cfg.seed, 100 + task as u64));
    let lat = shared.blend(&own, cfg.overlap);
    let spec = task_spec(task, cfg);
    let base = 1000 + 4 * task as u64;
    Ok(Dataset {
        train: draw_split(&spec, &lat, cfg.train, &mut stream(cfg.seed, base)),
        val: draw_split(&spec, &lat, cfg.val, &mut stream(cfg.seed, base + 1)),
        test: draw_split(&spec, &lat, cfg.test, &mut stream(cfg.seed, base + 2)),
        spec,
        seed: cfg.seed,
    })
}

pub fn generate_suite(cfg: &SuiteConfig) -> Result<Vec<Dataset>> {
    (1..=NUM_TASKS).map(|t| generate_task(cfg, t)).collect()
}

/// CRC of every input and target value; equal suites have equal checksums.
pub fn checksum(d: &Dataset) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for s in [&d.train, &d.val, &d.test] {
        for v in s.images.iter().chain(&s.states) {
            h.update(&v.to_le_bytes());
        }
        match &s.targets {
            Targets::Classes(c) => c.iter().for_each(|v| h.update(&v.to_le_bytes())),
            Targets::Values { data, .. } => data.iter().for_each(|v| h.update(&v.to_le_bytes())),
        }
    }
    h.finalize()
}

#[cfg(test)]
mod tests;
