//! Trajectory generation for benchmark systems and trajectory file I/O.
//!
//! A [`TrajectoryDataset`] holds `N` agents sampled at `K + 1` instants
//! `t = k * tau` in an `M`-dimensional state space bounded by a [`DomainBox`].

mod integrate;
mod io;
mod systems;

pub use integrate::{rk4_step, VectorField};
pub use io::{load_trajectories, save_trajectories, LoadReport};
pub use systems::{
    simulate, simulate_mixture_drift, simulate_unicycle, simulate_vdp, wrap_angle, MixtureDrift,
    MixtureDriftConfig, SystemConfig, Unicycle, UnicycleConfig, VanDerPol, VdpConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Axis-aligned box `lower[m] < upper[m]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct DomainBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RawBox> for DomainBox {
    type Error = Error;
    fn try_from(raw: RawBox) -> Result<Self> {
        DomainBox::new(raw.lower, raw.upper)
    }
}

impl From<DomainBox> for RawBox {
    fn from(b: DomainBox) -> Self {
        RawBox {
            lower: b.lower,
            upper: b.upper,
        }
    }
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(config_err(format!(
                "domain box needs matching non-empty bounds, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (m, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(config_err(format!(
                    "domain box axis {m}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The cube `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| hi - lo)
            .product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn contains_box(&self, other: &DomainBox) -> bool {
        self.contains(&other.lower) && self.contains(&other.upper)
    }

    /// Clamps `x` into the box in place; returns whether anything moved.
    pub fn clip(&self, x: &mut [f64]) -> bool {
        let mut moved = false;
        for (v, (lo, hi)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            let c = v.clamp(*lo, *hi);
            if c != *v {
                *v = c;
                moved = true;
            }
        }
        moved
    }

    /// Sub-box over the selected axes.
    pub fn select(&self, axes: &[usize]) -> Result<DomainBox> {
        let mut lower = Vec::with_capacity(axes.len());
        let mut upper = Vec::with_capacity(axes.len());
        for &a in axes {
            if a >= self.dim() {
                return Err(config_err(format!(
                    "axis {a} out of range for a {}-dimensional domain",
                    self.dim()
                )));
            }
            lower.push(self.lower[a]);
            upper.push(self.upper[a]);
        }
        DomainBox::new(lower, upper)
    }

    /// Maps `x` affinely so the box becomes `[-1, 1]^M`.
    pub fn to_unit(&self, x: &[f64], out: &mut [f64]) {
        for m in 0..self.dim() {
            let half = 0.5 * (self.upper[m] - self.lower[m]);
            let mid = 0.5 * (self.upper[m] + self.lower[m]);
            out[m] = (x[m] - mid) / half;
        }
    }
}

/// `N` agent trajectories of `K + 1` samples each, stored agent-major:
/// `states[(n * (K + 1) + k) * M + m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    n_agents: usize,
    n_steps: usize,
    dim: usize,
    tau: f64,
    domain: DomainBox,
    states: Vec<f64>,
    clipped: usize,
}

impl TrajectoryDataset {
    pub fn new(
        n_agents: usize,
        n_steps: usize,
        tau: f64,
        domain: DomainBox,
        states: Vec<f64>,
    ) -> Result<Self> {
        let dim = domain.dim();
        if n_agents == 0 || n_steps == 0 {
            return Err(Error::Schema(format!(
                "dataset needs at least one agent and one step, got N = {n_agents}, K = {n_steps}"
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(config_err(format!("tau must be positive, got {tau}")));
        }
        let expected = n_agents * (n_steps + 1) * dim;
        if states.len() != expected {
            return Err(Error::Schema(format!(
                "expected {expected} state entries for N = {n_agents}, K = {n_steps}, M = {dim}, got {}",
                states.len()
            )));
        }
        if let Some(bad) = states.iter().position(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("non-finite state entry at flat index {bad}")));
        }
        for (i, x) in states.chunks_exact(dim).enumerate() {
            if !domain.contains(x) {
                return Err(Error::Schema(format!(
                    "state {x:?} (sample {i}) lies outside the declared domain"
                )));
            }
        }
        Ok(Self {
            n_agents,
            n_steps,
            dim,
            tau,
            domain,
            states,
            clipped: 0,
        })
    }

    pub(crate) fn with_clip_count(mut self, clipped: usize) -> Self {
        self.clipped = clipped;
        self
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    /// `K`: there are `K + 1` samples per agent.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    /// Number of state samples that were clipped back into the domain during simulation.
    pub fn clipped(&self) -> usize {
        self.clipped
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn state(&self, agent: usize, k: usize) -> &[f64] {
        let start = (agent * (self.n_steps + 1) + k) * self.dim;
        &self.states[start..start + self.dim]
    }

    /// All agents at instant `k` as an `N x M` row-major block.
    pub fn snapshot(&self, k: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_agents * self.dim);
        for n in 0..self.n_agents {
            out.extend_from_slice(self.state(n, k));
        }
        out
    }

    /// Keeps only the listed state axes (e.g. the planar position of a unicycle).
    pub fn project(&self, axes: &[usize]) -> Result<TrajectoryDataset> {
        let domain = self.domain.select(axes)?;
        let mut states = Vec::with_capacity(self.n_agents * (self.n_steps + 1) * axes.len());
        for x in self.states.chunks_exact(self.dim) {
            states.extend(axes.iter().map(|&a| x[a]));
        }
        Ok(Self {
            n_agents: self.n_agents,
            n_steps: self.n_steps,
            dim: axes.len(),
            tau: self.tau,
            domain,
            states,
            clipped: self.clipped,
        })
    }

    /// Replaces the declared domain; fails if any state falls outside the new box.
    pub fn with_domain(self, domain: DomainBox) -> Result<TrajectoryDataset> {
        if domain.dim() != self.dim {
            return Err(config_err(format!(
                "domain has {} axes but the data has {}",
                domain.dim(),
                self.dim
            )));
        }
        let clipped = self.clipped;
        Ok(TrajectoryDataset::new(self.n_agents, self.n_steps, self.tau, domain, self.states)?
            .with_clip_count(clipped))
    }

    /// Mean per-axis standard deviation over every sample of every agent.
    pub fn mean_axis_std(&self) -> f64 {
        let count = (self.states.len() / self.dim) as f64;
        let mut total = 0.0;
        for m in 0..self.dim {
            let mean = self.states.iter().skip(m).step_by(self.dim).sum::<f64>() / count;
            let var = self
                .states
                .iter()
                .skip(m)
                .step_by(self.dim)
                .map(|v| (v - mean).powi(2))
                .sum::<f64>()
                / count;
            total += var.sqrt();
        }
        total / self.dim as f64
    }
}
