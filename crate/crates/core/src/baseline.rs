//! Exponential-generator baseline `rho_{k+1} = exp(tau * NN(x, t)) rho_k`, renormalized
//! after every step.

use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::density::{weighted_sum, DensityField, DensitySeries, GridId, ReferenceGrid};
use crate::error::{config_err, Error, LossTerm, Result};
use crate::model::{unit_points, RolloutResult};
use crate::nn::Mlp;
use crate::trainer::{
    check_fd_step, fd_compare, l2_distance, proj_kl_row, EpochRecord, Optimizer, StepRule, TrainHistory,
};

/// Bound on the magnitude of the exponent, applied as `cap * tanh(e / cap)`.
pub const EXPONENT_CAP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ExpGenModel {
    net: Mlp,
    delta: Vec<f64>,
    grid_id: GridId,
    n_grid: usize,
    dim: usize,
    tau: f64,
    /// Time scale: the network sees `t / t_scale`.
    t_scale: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}
fn default_iterations() -> usize {
    1000
}
fn default_step() -> f64 {
    1e-3
}
fn default_batch() -> Option<usize> {
    Some(32)
}
fn default_divergence() -> f64 {
    1e3
}
fn default_optimizer() -> Optimizer {
    Optimizer::Adam
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_step")]
    pub step_size: f64,
    /// Transitions per gradient step; `null` uses all of them.
    #[serde(default = "default_batch")]
    pub batch_steps: Option<usize>,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_divergence")]
    pub divergence_factor: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            hidden: default_hidden(),
            iterations: default_iterations(),
            step_size: default_step(),
            batch_steps: default_batch(),
            optimizer: Optimizer::Adam,
            seed: 0,
            divergence_factor: default_divergence(),
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(config_err("baseline hidden layer list must not be empty"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(config_err(format!("baseline step_size must be positive, got {}", self.step_size)));
        }
        if self.batch_steps == Some(0) {
            return Err(config_err("batch_steps must be at least 1"));
        }
        if !(self.divergence_factor > 0.0) {
            return Err(config_err("divergence_factor must be positive"));
        }
        Ok(())
    }
}

pub fn init_expgen(grid: &ReferenceGrid, hidden: &[usize], tau: f64, t_scale: f64, seed: u64) -> Result<ExpGenModel> {
    if hidden.is_empty() {
        return Err(config_err("baseline hidden layer list must not be empty"));
    }
    if !(tau > 0.0 && t_scale > 0.0) {
        return Err(config_err(format!("tau ({tau}) and time scale ({t_scale}) must be positive")));
    }
    let net = Mlp::new(grid.dim() + 1, hidden, 1)?;
    let delta = net.init(seed);
    Ok(ExpGenModel {
        net,
        delta,
        grid_id: grid.id(),
        n_grid: grid.len(),
        dim: grid.dim(),
        tau,
        t_scale,
    })
}

impl ExpGenModel {
    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn set_delta(&mut self, delta: Vec<f64>) -> Result<()> {
        if delta.len() != self.delta.len() {
            return Err(Error::Schema(format!(
                "delta has {} entries, expected {}",
                delta.len(),
                self.delta.len()
            )));
        }
        self.delta = delta;
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn t_scale(&self) -> f64 {
        self.t_scale
    }

    fn check_grid(&self, grid: &ReferenceGrid) -> Result<()> {
        if grid.id() != self.grid_id || grid.len() != self.n_grid {
            return Err(Error::Grid(format!(
                "baseline was built for grid {} but grid {} was supplied",
                self.grid_id,
                grid.id()
            )));
        }
        Ok(())
    }

    /// Capped exponents `tau * NN(x_r, t)` at every grid point for each time in `times`,
    /// one row per time.
    fn exponents(&self, delta: &[f64], unit: &Array2<f64>, times: &[f64]) -> (crate::nn::Forward, Array2<f64>) {
        let fwd = self.net.forward(delta, batch_inputs(unit, times, self.t_scale).view());
        let n = unit.nrows();
        let out = fwd.output();
        let e = Array2::from_shape_fn((times.len(), n), |(b, r)| cap(self.tau * out[[b * n + r, 0]]));
        (fwd, e)
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::ExpGen,
            l: 1,
            dim: self.dim as u32,
            n_grid: self.n_grid as u64,
            grid_id: self.grid_id,
            header: json!({
                "sizes": self.net.sizes(),
                "tau": self.tau,
                "t_scale": self.t_scale,
            }),
            metadata,
            blocks: vec![("delta".into(), self.delta.clone())],
        }
    }

    pub fn from_checkpoint(c: &Checkpoint, grid: &ReferenceGrid) -> Result<Self> {
        if c.kind != ModelKind::ExpGen {
            return Err(Error::Schema(format!("checkpoint holds a {} model", c.kind.name())));
        }
        if c.grid_id != grid.id() || c.n_grid as usize != grid.len() || c.dim as usize != grid.dim() {
            return Err(Error::Grid(format!(
                "checkpoint was trained on grid {} but grid {} was supplied",
                c.grid_id,
                grid.id()
            )));
        }
        let sizes: Vec<usize> = serde_json::from_value(c.header["sizes"].clone())
            .map_err(|e| Error::Schema(format!("checkpoint header `sizes`: {e}")))?;
        let num = |key: &str| {
            c.header[key]
                .as_f64()
                .ok_or_else(|| Error::Schema(format!("checkpoint header lacks `{key}`")))
        };
        let net = Mlp::from_sizes(sizes)?;
        if net.input_dim() != grid.dim() + 1 || net.output_dim() != 1 {
            return Err(Error::Schema("baseline architecture does not match the grid".into()));
        }
        let mut m = ExpGenModel {
            delta: vec![0.0; net.n_params()],
            net,
            grid_id: grid.id(),
            n_grid: grid.len(),
            dim: grid.dim(),
            tau: num("tau")?,
            t_scale: num("t_scale")?,
        };
        m.set_delta(c.block("delta")?.to_vec())?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>, metadata: serde_json::Value) -> Result<()> {
        self.to_checkpoint(metadata).save(path)
    }

    pub fn load(path: impl AsRef<Path>, grid: &ReferenceGrid) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, grid)
    }
}

fn cap(e: f64) -> f64 {
    EXPONENT_CAP * (e / EXPONENT_CAP).tanh()
}

fn batch_inputs(unit: &Array2<f64>, times: &[f64], t_scale: f64) -> Array2<f64> {
    let (n, m) = unit.dim();
    let mut x = Array2::zeros((n * times.len(), m + 1));
    for (b, t) in times.iter().enumerate() {
        for r in 0..n {
            for j in 0..m {
                x[[b * n + r, j]] = unit[[r, j]];
            }
            x[[b * n + r, m]] = t / t_scale;
        }
    }
    x
}

/// `exp(e) * rho` and its discrete mass.
fn apply_exponent(rho: &[f64], e: ArrayView1<f64>, w: &[f64]) -> (Vec<f64>, f64) {
    let v: Vec<f64> = rho.iter().zip(e.iter()).map(|(r, e)| e.exp() * r).collect();
    let mass = weighted_sum(&v, w);
    (v, mass)
}

/// One baseline step at time `t`: `exp(tau * NN(x, t)) rho`, renormalized.
pub fn expgen_step(model: &ExpGenModel, rho: &DensityField, t: f64, grid: &ReferenceGrid) -> Result<DensityField> {
    model.check_grid(grid)?;
    rho.check_grid(grid)?;
    let unit = unit_points(grid);
    let (_, e) = model.exponents(&model.delta, &unit, &[t]);
    warn_capped(&e);
    let (v, mass) = apply_exponent(rho.values(), e.row(0), grid.weights());
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::Degenerate(format!("baseline step produced mass {mass}")));
    }
    Ok(DensityField::from_raw(v.into_iter().map(|x| x / mass).collect(), grid.id(), true))
}

fn warn_capped(e: &Array2<f64>) {
    let n = e.iter().filter(|v| v.abs() > 0.99 * EXPONENT_CAP).count();
    if n > 0 {
        warn!("{n} baseline exponents saturated at the +-{EXPONENT_CAP} cap");
    }
}

/// Iterates [`expgen_step`] from time `t0`, advancing by `tau` each step.
pub fn expgen_rollout(
    model: &ExpGenModel,
    rho0: &DensityField,
    steps: usize,
    t0: f64,
    grid: &ReferenceGrid,
) -> Result<RolloutResult> {
    if steps == 0 {
        return Err(config_err("rollout needs at least one step"));
    }
    model.check_grid(grid)?;
    rho0.check_grid(grid)?;
    let unit = unit_points(grid);
    let times: Vec<f64> = (0..steps).map(|s| t0 + s as f64 * model.tau).collect();
    let (_, e) = model.exponents(&model.delta, &unit, &times);
    warn_capped(&e);
    let mut predicted = vec![rho0.clone()];
    let mut raw_mass = Vec::with_capacity(steps);
    let mut current = rho0.values().to_vec();
    for s in 0..steps {
        let (v, mass) = apply_exponent(&current, e.row(s), grid.weights());
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::Collapse { step: s + 1 });
        }
        raw_mass.push(mass);
        current = v.into_iter().map(|x| x / mass).collect();
        predicted.push(DensityField::from_raw(current.clone(), grid.id(), true));
    }
    Ok(RolloutResult {
        predicted: DensitySeries::new(predicted, model.tau, None)?,
        raw: None,
        raw_mass,
        clamped_mass: vec![0.0; steps],
        coefficient_sum: Vec::new(),
    })
}

struct BaselineProblem<'a> {
    model: &'a ExpGenModel,
    weights: &'a [f64],
    unit: Array2<f64>,
    rho: Vec<&'a [f64]>,
    /// Start time of the series.
    t0: f64,
}

impl<'a> BaselineProblem<'a> {
    fn new(model: &'a ExpGenModel, series: &'a DensitySeries, grid: &'a ReferenceGrid, t0: f64) -> Result<Self> {
        model.check_grid(grid)?;
        if series.grid_id() != grid.id() {
            return Err(Error::Grid("series lives on a different grid than the baseline".into()));
        }
        if series.len() < 2 {
            return Err(config_err("training needs a series with at least two fields"));
        }
        Ok(BaselineProblem {
            model,
            weights: grid.weights(),
            unit: unit_points(grid),
            rho: series.fields().iter().map(|f| f.values()).collect(),
            t0,
        })
    }

    fn n_steps(&self) -> usize {
        self.rho.len() - 1
    }

    /// Summed KL over the transitions `ks` and optionally its gradient.
    fn eval(&self, delta: &[f64], ks: &[usize], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let m = self.model;
        let n = self.weights.len();
        let times: Vec<f64> = ks.iter().map(|k| self.t0 + *k as f64 * m.tau).collect();
        let (fwd, e) = m.exponents(delta, &self.unit, &times);
        let mut total = 0.0;
        let mut dy = if want_grad { Array2::zeros((ks.len() * n, 1)) } else { Array2::zeros((0, 1)) };
        let mut du = vec![0.0; n];
        let mut dq = vec![0.0; n];
        for (b, &k) in ks.iter().enumerate() {
            let (v, _) = apply_exponent(self.rho[k], e.row(b), self.weights);
            let v = ndarray::Array1::from(v);
            let q = ArrayView1::from(self.rho[k + 1]);
            let grad = want_grad.then_some((du.as_mut_slice(), dq.as_mut_slice()));
            total += proj_kl_row(v.view(), q, self.weights, grad);
            if want_grad {
                let out = fwd.output();
                for r in 0..n {
                    let y = m.tau * out[[b * n + r, 0]];
                    let th = (y / EXPONENT_CAP).tanh();
                    dy[[b * n + r, 0]] = du[r] * v[r] * m.tau * (1.0 - th * th);
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::Numerical {
                term: LossTerm::Baseline,
            });
        }
        if !want_grad {
            return Ok((total, None));
        }
        let mut grad = vec![0.0; delta.len()];
        m.net.backward(delta, &fwd, dy, &mut grad, false);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                term: LossTerm::Baseline,
            });
        }
        Ok((total, Some(grad)))
    }
}

/// Summed one-step KL of the baseline over every transition of `series`, whose first
/// field sits at time `t0`.
pub fn expgen_loss(model: &ExpGenModel, series: &DensitySeries, grid: &ReferenceGrid, t0: f64) -> Result<f64> {
    let p = BaselineProblem::new(model, series, grid, t0)?;
    let ks: Vec<usize> = (0..p.n_steps()).collect();
    Ok(p.eval(&model.delta, &ks, false)?.0)
}

pub fn expgen_grad(model: &ExpGenModel, series: &DensitySeries, grid: &ReferenceGrid, t0: f64) -> Result<Vec<f64>> {
    let p = BaselineProblem::new(model, series, grid, t0)?;
    let ks: Vec<usize> = (0..p.n_steps()).collect();
    Ok(p.eval(&model.delta, &ks, true)?.1.unwrap())
}

/// Largest relative error of [`expgen_grad`] against central differences on `n_coords`
/// random coordinates.
pub fn expgen_fd_check(
    model: &ExpGenModel,
    series: &DensitySeries,
    grid: &ReferenceGrid,
    n_coords: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    check_fd_step(h)?;
    let p = BaselineProblem::new(model, series, grid, 0.0)?;
    let ks: Vec<usize> = (0..p.n_steps()).collect();
    let g = p.eval(&model.delta, &ks, true)?.1.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fd_compare(&model.delta, &g, n_coords, h, &mut rng, |d| Ok(p.eval(d, &ks, false)?.0))
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub model: ExpGenModel,
    /// History in the trainer's format: `term1` holds the (minibatch-estimated) summed KL,
    /// `dtheta` the parameter change of the iteration.
    pub history: TrainHistory,
}

/// Adam (or SGD) on the summed one-step KL, with `batch_steps` transitions drawn without
/// replacement per iteration. The estimate is rescaled to the full series.
pub fn train_expgen(
    model: &ExpGenModel,
    series: &DensitySeries,
    grid: &ReferenceGrid,
    config: &BaselineConfig,
) -> Result<BaselineOutcome> {
    config.validate()?;
    let p = BaselineProblem::new(model, series, grid, 0.0)?;
    let k = p.n_steps();
    let batch = config.batch_steps.unwrap_or(k).min(k);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let all: Vec<usize> = (0..k).collect();
    let initial = p.eval(&model.delta, &all, false)?.0;
    let mut delta = model.delta.clone();
    let mut rule = StepRule::new(config.optimizer, delta.len());
    let mut history = TrainHistory {
        initial: Some(crate::trainer::LossTerms {
            total: initial,
            term1: initial,
            term2: 0.0,
            term3: 0.0,
        }),
        epochs: Vec::with_capacity(config.iterations),
    };
    let scale = k as f64 / batch as f64;
    let start = Instant::now();
    for it in 1..=config.iterations {
        let mut ks = if batch == k {
            all.clone()
        } else {
            sample(&mut rng, k, batch).into_vec()
        };
        ks.sort_unstable();
        let (value, g) = p.eval(&delta, &ks, true)?;
        let before = delta.clone();
        rule.apply(&mut delta, &g.unwrap(), config.step_size);
        let estimate = value * scale;
        history.epochs.push(EpochRecord {
            epoch: it,
            total: estimate,
            term1: estimate,
            term2: 0.0,
            term3: 0.0,
            dgamma: 0.0,
            dtheta: l2_distance(&before, &delta),
            seconds: start.elapsed().as_secs_f64(),
        });
        if estimate > config.divergence_factor * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Divergence {
                epoch: it,
                loss: estimate,
                initial,
                factor: config.divergence_factor,
            });
        }
        if it % 100 == 0 {
            info!("baseline iteration {it}: loss estimate {estimate:.6e}");
        }
    }
    let mut out = model.clone();
    out.set_delta(delta)?;
    Ok(BaselineOutcome { model: out, history })
}
