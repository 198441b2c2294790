//! Springs and charged-particle N-body systems with ground-truth interaction
//! labels, and the line-delimited JSON dataset format.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Resampling attempts per sample before giving up on a diverging trajectory.
pub const MAX_RETRIES: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    /// Random springs; label 1 where two particles are connected.
    Springs,
    /// Charges in {-1, 0, +1}; label 1 where two particles interact.
    ChargedReasoning,
    /// Charges in {-1, +1}; label 1 where two particles repel.
    ChargedPrediction,
}

impl SimMode {
    pub fn num_categories(self) -> usize {
        2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChargedTask {
    Reasoning,
    Prediction,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Coupling {
    /// Symmetric `M x M` 0/1 matrix, zero diagonal, row-major.
    Springs { adjacency: Vec<u8> },
    Charged { charges: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    /// `[M, n]`.
    pub positions: Tensor,
    /// `[M, n]`.
    pub velocities: Tensor,
    pub coupling: Coupling,
}

impl ParticleSystem {
    pub fn num_particles(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn momentum(&self) -> Vec<f64> {
        let n = self.dim();
        let mut p = vec![0.0; n];
        for v in self.velocities.data().chunks_exact(n) {
            for (a, b) in p.iter_mut().zip(v) {
                *a += b;
            }
        }
        p
    }
}

/// Force-law constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Physics {
    pub spring_constant: f64,
    pub coulomb_constant: f64,
    pub softening: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Physics {
            spring_constant: 0.1,
            coulomb_constant: 1.0,
            softening: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub mode: SimMode,
    pub num_particles: usize,
    pub space_dim: usize,
    pub dt: f64,
    pub downsample: usize,
    pub warmup_steps: usize,
    pub past_len: usize,
    pub future_len: usize,
    pub spring_constant: f64,
    pub coulomb_constant: f64,
    pub softening: f64,
    /// Standard deviation of initial position and velocity components.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mode: SimMode::Springs,
            num_particles: 5,
            space_dim: 3,
            dt: 0.001,
            downsample: 100,
            warmup_steps: 1000,
            past_len: 20,
            future_len: 20,
            spring_constant: 0.1,
            coulomb_constant: 1.0,
            softening: 0.01,
            init_std: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.downsample == 0 {
            return Err(Error::param("downsample must be >= 1"));
        }
        if self.num_particles < 2 {
            return Err(Error::param("num_particles must be >= 2"));
        }
        if self.space_dim == 0 || self.past_len == 0 || self.future_len == 0 {
            return Err(Error::param("space_dim, past_len and future_len must be >= 1"));
        }
        if !(self.softening > 0.0) {
            return Err(Error::param("softening must be > 0"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::param("init_std must be > 0"));
        }
        Ok(())
    }

    pub fn physics(&self) -> Physics {
        Physics {
            spring_constant: self.spring_constant,
            coulomb_constant: self.coulomb_constant,
            softening: self.softening,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `[M, T_p, n]`.
    pub past: Tensor,
    /// `[M, T_f, n]`.
    pub future: Tensor,
    /// `M x M` labels in `[0, K)`, row-major; the diagonal is unused.
    pub true_interactions: Vec<usize>,
}

impl LabeledSample {
    pub fn num_agents(&self) -> usize {
        self.past.shape()[0]
    }

    pub fn label(&self, i: usize, j: usize) -> usize {
        self.true_interactions[i * self.num_agents() + j]
    }
}

fn gaussian_state(m: usize, n: usize, std: f64, rng: &mut impl Rng) -> (Tensor, Tensor) {
    let normal = Normal::new(0.0, std).expect("positive std");
    let pos = Tensor::from_fn(&[m, n], |_| normal.sample(rng));
    let vel = Tensor::from_fn(&[m, n], |_| normal.sample(rng));
    (pos, vel)
}

fn check_count(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::param(format!("need at least 2 particles, got {m}")));
    }
    Ok(())
}

/// Springs between each unordered pair with probability 0.5.
pub fn init_springs(m: usize, n: usize, std: f64, rng: &mut impl Rng) -> Result<ParticleSystem> {
    check_count(m)?;
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let mut adjacency = vec![0u8; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let e = u8::from(coin.sample(rng));
            adjacency[i * m + j] = e;
            adjacency[j * m + i] = e;
        }
    }
    let (positions, velocities) = gaussian_state(m, n, std, rng);
    Ok(ParticleSystem {
        positions,
        velocities,
        coupling: Coupling::Springs { adjacency },
    })
}

/// Charges `+1 / 0 / -1` with probabilities 0.25 / 0.5 / 0.25 for the
/// reasoning task and 0.5 / 0 / 0.5 for the prediction task.
pub fn init_charged(m: usize, n: usize, std: f64, task: ChargedTask, rng: &mut impl Rng) -> Result<ParticleSystem> {
    check_count(m)?;
    let charges = (0..m)
        .map(|_| {
            let u: f64 = rng.random();
            match task {
                ChargedTask::Reasoning if u < 0.25 => 1.0,
                ChargedTask::Reasoning if u < 0.75 => 0.0,
                ChargedTask::Reasoning => -1.0,
                ChargedTask::Prediction if u < 0.5 => 1.0,
                ChargedTask::Prediction => -1.0,
            }
        })
        .collect();
    let (positions, velocities) = gaussian_state(m, n, std, rng);
    Ok(ParticleSystem {
        positions,
        velocities,
        coupling: Coupling::Charged { charges },
    })
}

/// `[M, n]` forces on every particle.
pub fn compute_forces(sys: &ParticleSystem, phys: &Physics) -> Tensor {
    let (m, n) = (sys.num_particles(), sys.dim());
    let r = sys.positions.data();
    let mut f = Tensor::zeros(&[m, n]);
    let out = f.data_mut();
    let mut diff = vec![0.0; n];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let coeff = match &sys.coupling {
                Coupling::Springs { adjacency } => {
                    if adjacency[i * m + j] == 0 {
                        continue;
                    }
                    -phys.spring_constant
                }
                Coupling::Charged { charges } => {
                    let qq = charges[i] * charges[j];
                    if qq == 0.0 {
                        continue;
                    }
                    let mut d2 = phys.softening * phys.softening;
                    for k in 0..n {
                        let d = r[i * n + k] - r[j * n + k];
                        d2 += d * d;
                    }
                    phys.coulomb_constant * qq / (d2 * d2.sqrt())
                }
            };
            for k in 0..n {
                diff[k] = r[i * n + k] - r[j * n + k];
                out[i * n + k] += coeff * diff[k];
            }
        }
    }
    f
}

/// One kick-drift-kick step with unit masses. `step` is only used to label
/// a divergence error.
pub fn leapfrog_step(sys: &mut ParticleSystem, dt: f64, phys: &Physics, step: usize) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::param(format!("dt must be > 0, got {dt}")));
    }
    let f = compute_forces(sys, phys);
    for (v, a) in sys.velocities.data_mut().iter_mut().zip(f.data()) {
        *v += 0.5 * dt * a;
    }
    for (x, v) in sys.positions.data_mut().iter_mut().zip(sys.velocities.data()) {
        *x += dt * v;
    }
    let f = compute_forces(sys, phys);
    for (v, a) in sys.velocities.data_mut().iter_mut().zip(f.data()) {
        *v += 0.5 * dt * a;
    }
    if !(sys.positions.all_finite() && sys.velocities.all_finite()) {
        return Err(Error::SimulationDiverged { step });
    }
    Ok(())
}

fn labels(sys: &ParticleSystem, mode: SimMode) -> Vec<usize> {
    let m = sys.num_particles();
    let mut out = vec![0; m * m];
    for i in 0..m {
        for j in (0..m).filter(|&j| j != i) {
            out[i * m + j] = match (&sys.coupling, mode) {
                (Coupling::Springs { adjacency }, _) => usize::from(adjacency[i * m + j]),
                (Coupling::Charged { charges }, SimMode::ChargedPrediction) => {
                    usize::from(charges[i] * charges[j] > 0.0)
                }
                (Coupling::Charged { charges }, _) => usize::from(charges[i] * charges[j] != 0.0),
            };
        }
    }
    out
}

/// Simulate one trajectory from an initial system.
pub fn simulate_sample(cfg: &SimConfig, mut sys: ParticleSystem) -> Result<LabeledSample> {
    let (m, n) = (sys.num_particles(), sys.dim());
    let phys = cfg.physics();
    let mut step = 0;
    for _ in 0..cfg.warmup_steps {
        leapfrog_step(&mut sys, cfg.dt, &phys, step)?;
        step += 1;
    }
    let frames = cfg.past_len + cfg.future_len;
    // Frame t of particle a lives at [a, t, :].
    let mut traj = vec![0.0; m * frames * n];
    for t in 0..frames {
        for _ in 0..cfg.downsample {
            leapfrog_step(&mut sys, cfg.dt, &phys, step)?;
            step += 1;
        }
        for a in 0..m {
            let dst = (a * frames + t) * n;
            traj[dst..dst + n].copy_from_slice(&sys.positions.data()[a * n..(a + 1) * n]);
        }
    }
    let mut past = Vec::with_capacity(m * cfg.past_len * n);
    let mut future = Vec::with_capacity(m * cfg.future_len * n);
    for agent in traj.chunks_exact(frames * n) {
        past.extend_from_slice(&agent[..cfg.past_len * n]);
        future.extend_from_slice(&agent[cfg.past_len * n..]);
    }
    Ok(LabeledSample {
        past: Tensor::new(vec![m, cfg.past_len, n], past)?,
        future: Tensor::new(vec![m, cfg.future_len, n], future)?,
        true_interactions: labels(&sys, cfg.mode),
    })
}

/// Random number stream for attempt `attempt` of sample `index`.
fn sample_rng(seed: u64, index: usize, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((attempt << 40) | index as u64);
    rng
}

fn init_system(cfg: &SimConfig, rng: &mut impl Rng) -> Result<ParticleSystem> {
    let (m, n, std) = (cfg.num_particles, cfg.space_dim, cfg.init_std);
    match cfg.mode {
        SimMode::Springs => init_springs(m, n, std, rng),
        SimMode::ChargedReasoning => init_charged(m, n, std, ChargedTask::Reasoning, rng),
        SimMode::ChargedPrediction => init_charged(m, n, std, ChargedTask::Prediction, rng),
    }
}

/// `count` samples; sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(cfg: &SimConfig, count: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::param("count must be >= 1"));
    }
    (0..count).map(|i| generate_sample(cfg, seed, i)).collect()
}

fn generate_sample(cfg: &SimConfig, seed: u64, index: usize) -> Result<LabeledSample> {
    let mut last = None;
    for attempt in 0..=MAX_RETRIES {
        let mut rng = sample_rng(seed, index, attempt);
        let sys = init_system(cfg, &mut rng)?;
        match simulate_sample(cfg, sys) {
            Err(e @ Error::SimulationDiverged { .. }) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    #[serde(rename = "type")]
    pub kind: String,
    pub mode: SimMode,
    #[serde(rename = "M")]
    pub num_agents: usize,
    #[serde(rename = "T_p")]
    pub past_len: usize,
    #[serde(rename = "T_f")]
    pub future_len: usize,
    pub n: usize,
    #[serde(rename = "K")]
    pub num_categories: usize,
    pub seed: u64,
    /// Free-form provenance, e.g. the effective run configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl DatasetHeader {
    pub fn new(cfg: &SimConfig, seed: u64) -> Self {
        DatasetHeader {
            kind: "header".into(),
            mode: cfg.mode,
            num_agents: cfg.num_particles,
            past_len: cfg.past_len,
            future_len: cfg.future_len,
            n: cfg.space_dim,
            num_categories: cfg.mode.num_categories(),
            seed,
            config: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<LabeledSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    past: Vec<Vec<Vec<f64>>>,
    future: Vec<Vec<Vec<f64>>>,
    edges: Vec<Vec<usize>>,
}

fn nest(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    t.data()
        .chunks_exact(s[1] * s[2])
        .map(|agent| agent.chunks_exact(s[2]).map(<[f64]>::to_vec).collect())
        .collect()
}

fn unnest(x: Vec<Vec<Vec<f64>>>, shape: [usize; 3], what: &str) -> std::result::Result<Tensor, String> {
    let ok = x.len() == shape[0]
        && x.iter()
            .all(|a| a.len() == shape[1] && a.iter().all(|p| p.len() == shape[2]));
    if !ok {
        return Err(format!("{what} must be nested {shape:?}"));
    }
    let data = x.into_iter().flatten().flatten().collect();
    Tensor::new(shape.to_vec(), data).map_err(|e| e.to_string())
}

impl Dataset {
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", crate::json::to_line(&self.header)?)?;
        let m = self.header.num_agents;
        for s in &self.samples {
            let line = SampleLine {
                past: nest(&s.past),
                future: nest(&s.future),
                edges: s.true_interactions.chunks_exact(m).map(<[usize]>::to_vec).collect(),
            };
            writeln!(w, "{}", crate::json::to_line(&line)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Parse a dataset; malformed lines are reported with 1-based numbers.
    pub fn read(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or(Error::Format {
            line: 1,
            message: "empty dataset".into(),
        })??;
        let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| Error::Format {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.kind != "header" {
            return Err(Error::Format {
                line: 1,
                message: format!("expected type \"header\", got {:?}", header.kind),
            });
        }
        let (m, k) = (header.num_agents, header.num_categories);
        let mut samples = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fail = |message: String| Error::Format { line: line_no, message };
            let raw: SampleLine = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
            let past = unnest(raw.past, [m, header.past_len, header.n], "past").map_err(fail)?;
            let future = unnest(raw.future, [m, header.future_len, header.n], "future").map_err(fail)?;
            if raw.edges.len() != m || raw.edges.iter().any(|r| r.len() != m) {
                return Err(fail(format!("edges must be {m} x {m}")));
            }
            let edges: Vec<usize> = raw.edges.into_iter().flatten().collect();
            if edges.iter().any(|&e| e >= k) {
                return Err(fail(format!("edge label outside [0, {k})")));
            }
            if !(past.all_finite() && future.all_finite()) {
                return Err(fail("non-finite coordinate".into()));
            }
            samples.push(LabeledSample {
                past,
                future,
                true_interactions: edges,
            });
        }
        Ok(Dataset { header, samples })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }
}
