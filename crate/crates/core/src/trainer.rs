//! Three-term loss, its exact gradient, and the alternating training loop.
//!
//! `L = sum_k D(proj(P rho_k) || rho_{k+1}) + lambda sum_{i != j} <G_i, G_j>
//!      + mu sum_r D(proj(P G_r) || G_{r+1})` with `G_{l+1} = G_1`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{kl_values, project, DensitySeries, ReferenceGrid, DEFAULT_KL_EPS};
use crate::error::{config_err, Error, LossTerm, Result};
use crate::model::{
    spectral_combination, weighted_rows, BasisForward, CoeffForward, SpectralOperator, SpectralPFModel,
};
use crate::nn::softplus_grad;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Gamma,
    Theta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

fn default_one() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    1000
}
fn default_eps() -> f64 {
    1e-9
}
fn default_inner() -> usize {
    25
}
fn default_step() -> f64 {
    1e-3
}
fn default_decay() -> f64 {
    0.999
}
fn default_divergence() -> f64 {
    1e3
}
fn default_optimizer() -> Optimizer {
    Optimizer::Adam
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_one")]
    pub lambda: f64,
    #[serde(default = "default_one")]
    pub mu: f64,
    #[serde(default = "default_epochs")]
    pub n_epochs: usize,
    #[serde(default = "default_eps")]
    pub eps1: f64,
    #[serde(default = "default_eps")]
    pub eps2: f64,
    #[serde(default = "default_inner")]
    pub inner_steps: usize,
    #[serde(default = "default_step")]
    pub step_size: f64,
    /// Per-epoch geometric decay of the step size.
    #[serde(default = "default_decay")]
    pub step_decay: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub early_stop: bool,
    #[serde(default = "default_divergence")]
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            mu: 1.0,
            n_epochs: default_epochs(),
            eps1: default_eps(),
            eps2: default_eps(),
            inner_steps: default_inner(),
            step_size: default_step(),
            step_decay: default_decay(),
            optimizer: Optimizer::Adam,
            seed: 0,
            early_stop: false,
            divergence_factor: default_divergence(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(config_err(format!("{name} must be a finite value >= 0, got {v}")))
            }
        };
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(config_err(format!("{name} must be positive, got {v}")))
            }
        };
        nonneg("lambda", self.lambda)?;
        nonneg("mu", self.mu)?;
        pos("eps1", self.eps1)?;
        pos("eps2", self.eps2)?;
        pos("step_size", self.step_size)?;
        pos("divergence_factor", self.divergence_factor)?;
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return Err(config_err(format!("step_decay must be in (0, 1], got {}", self.step_decay)));
        }
        if self.inner_steps == 0 {
            return Err(config_err("inner_steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
    pub dgamma: f64,
    pub dtheta: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial: Option<LossTerms>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_total(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.total)
    }

    /// Running minimum of the per-epoch total loss.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.epochs
            .iter()
            .map(|r| {
                best = best.min(r.total);
                best
            })
            .collect()
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["epoch", "total", "term1", "term2", "term3", "dgamma", "dtheta", "seconds"])
            .map_err(csv_err)?;
        for r in &self.epochs {
            w.write_record(&[
                r.epoch.to_string(),
                r.total.to_string(),
                r.term1.to_string(),
                r.term2.to_string(),
                r.term3.to_string(),
                r.dgamma.to_string(),
                r.dtheta.to_string(),
                r.seconds.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Reference evaluation of the loss for any spectral operator.
pub fn loss<O: SpectralOperator + ?Sized>(
    op: &O,
    series: &DensitySeries,
    grid: &ReferenceGrid,
    lambda: f64,
    mu: f64,
) -> Result<LossTerms> {
    if series.len() < 2 {
        return Err(config_err("the loss needs a series with at least two fields"));
    }
    if series.grid_id() != grid.id() || op.grid_id() != grid.id() {
        return Err(Error::Grid("operator, series and grid must share one grid".into()));
    }
    let w = grid.weights();
    let basis = op.basis(grid)?;
    let l = basis.len();
    let proj_kl = |raw: Vec<f64>, target: &[f64], term: LossTerm| -> Result<f64> {
        let f = crate::density::DensityField::from_raw(raw, grid.id(), false);
        let p = project(&f, grid).map_err(|_| Error::Numerical { term })?;
        let v = kl_values(p.field.values(), target, w, DEFAULT_KL_EPS);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical { term })
        }
    };
    let mut term1 = 0.0;
    for pair in series.fields().windows(2) {
        let a = op.coefficients(&pair[0], grid)?;
        term1 += proj_kl(
            spectral_combination(pair[0].values(), &a, &basis),
            pair[1].values(),
            LossTerm::Prediction,
        )?;
    }
    let mut term2 = 0.0;
    for i in 0..l {
        for j in 0..l {
            if i != j {
                term2 += basis[i]
                    .values()
                    .iter()
                    .zip(basis[j].values())
                    .zip(w)
                    .map(|((a, b), w)| w * a * b)
                    .sum::<f64>();
            }
        }
    }
    let mut term3 = 0.0;
    for r in 0..l {
        let b = op.coefficients(&basis[r], grid)?;
        term3 += proj_kl(
            spectral_combination(basis[r].values(), &b, &basis),
            basis[(r + 1) % l].values(),
            LossTerm::Permutation,
        )?;
    }
    Ok(LossTerms {
        total: term1 + lambda * term2 + mu * term3,
        term1,
        term2,
        term3,
    })
}

/// `D(proj(u) || q)`; with `grad`, writes `dD/du` and `dD/dq`. Returns NaN when `u`
/// has no positive part.
pub(crate) fn proj_kl_row(
    u: ArrayView1<f64>,
    q: ArrayView1<f64>,
    w: &[f64],
    grad: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let s: f64 = u.iter().zip(w).map(|(u, w)| w * u.max(0.0)).sum();
    if !(s > 0.0) {
        return f64::NAN;
    }
    let eps = DEFAULT_KL_EPS;
    let mut kl = 0.0;
    let mut dot = 0.0;
    let mut gp = grad.as_ref().map(|_| vec![0.0; w.len()]);
    for j in 0..w.len() {
        let p = u[j].max(0.0) / s;
        let log_ratio = ((p + eps) / (q[j] + eps)).ln();
        kl += w[j] * p * log_ratio;
        if let Some(gp) = gp.as_mut() {
            let g = w[j] * (log_ratio + p / (p + eps));
            gp[j] = g;
            dot += g * p;
        }
    }
    if let (Some((du, dq)), Some(gp)) = (grad, gp) {
        for j in 0..w.len() {
            let p = u[j].max(0.0) / s;
            du[j] = if u[j] > 0.0 { (gp[j] - w[j] * dot) / s } else { 0.0 };
            dq[j] = -w[j] * p / (q[j] + eps);
        }
    }
    kl
}

/// Back-propagates `dL/da` through the output transform of the A-network.
fn coeff_output_grad(cf: &CoeffForward, da: &Array2<f64>, conserve: bool) -> Array2<f64> {
    let mut ds = da.clone();
    if conserve {
        for ((mut row, a), raw) in ds.rows_mut().into_iter().zip(cf.a.rows()).zip(cf.raw.rows()) {
            let total: f64 = raw.sum();
            let dot: f64 = row.iter().zip(a.iter()).map(|(d, a)| d * a).sum();
            row.mapv_inplace(|d| (d - dot) / total);
        }
    }
    ndarray::Zip::from(&mut ds)
        .and(cf.fwd.output())
        .for_each(|d, &z| *d *= softplus_grad(z));
    ds
}

/// Back-propagates `dL/dG` (`l x R`) through the normalization and output transform of
/// the G-network, giving `dL/dz` (`R x l`).
fn basis_output_grad(bf: &BasisForward, dg: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let (l, n) = dg.dim();
    let z = bf.fwd.output();
    let mut dz = Array2::zeros((n, l));
    for i in 0..l {
        let gi = bf.g.row(i);
        let dgi = dg.row(i);
        let dot: f64 = dgi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
        let m = bf.mass[i];
        for r in 0..n {
            dz[[r, i]] = (dgi[r] - w[r] * dot) / m * softplus_grad(z[[r, i]]);
        }
    }
    dz
}

/// Dense training problem: the series as a matrix plus the fixed A-network inputs.
pub(crate) struct Problem<'a> {
    model: &'a SpectralPFModel,
    weights: &'a [f64],
    grid: &'a ReferenceGrid,
    /// `(K + 1) x R`.
    rho: Array2<f64>,
    /// `K x R`, rows `w * rho_k` for `k < K`.
    inputs: Array2<f64>,
    lambda: f64,
    mu: f64,
}

impl<'a> Problem<'a> {
    pub(crate) fn new(
        model: &'a SpectralPFModel,
        series: &DensitySeries,
        grid: &'a ReferenceGrid,
        lambda: f64,
        mu: f64,
    ) -> Result<Self> {
        if series.len() < 2 {
            return Err(config_err("training needs a series with at least two fields"));
        }
        model.check_grid(grid)?;
        if series.grid_id() != grid.id() {
            return Err(Error::Grid("series lives on a different grid than the model".into()));
        }
        let n = grid.len();
        let k = series.n_steps();
        let mut rho = Array2::zeros((k + 1, n));
        for (mut row, f) in rho.rows_mut().into_iter().zip(series.fields()) {
            row.assign(&ArrayView1::from(f.values()));
        }
        let refs: Vec<&[f64]> = series.fields()[..k].iter().map(|f| f.values()).collect();
        let inputs = weighted_rows(&refs, grid.weights());
        Ok(Problem {
            model,
            weights: grid.weights(),
            grid,
            rho,
            inputs,
            lambda,
            mu,
        })
    }

    pub(crate) fn basis(&self, gamma: &[f64]) -> Result<BasisForward> {
        self.model.basis_forward(gamma, self.grid)
    }

    pub(crate) fn data_coeffs(&self, theta: &[f64]) -> CoeffForward {
        self.model.coeff_forward(theta, self.inputs.view())
    }

    /// Loss terms and, for `block`, the gradient of the total loss with respect to it.
    /// The cached forward passes must belong to the current parameters.
    pub(crate) fn eval(
        &self,
        theta: &[f64],
        gamma: &[f64],
        block: Option<Block>,
        basis_cache: Option<&BasisForward>,
        coeff_cache: Option<&CoeffForward>,
    ) -> Result<(LossTerms, Option<Vec<f64>>)> {
        let model = self.model;
        let l = model.l();
        let w = self.weights;
        let n = w.len();
        let k = self.inputs.nrows();
        let inv_l = 1.0 / l as f64;
        let conserve = model.options().conserve_mass;

        let owned_basis;
        let bf = match basis_cache {
            Some(b) => b,
            None => {
                owned_basis = self.basis(gamma)?;
                &owned_basis
            }
        };
        let owned_coeff;
        let cf = match coeff_cache {
            Some(c) => c,
            None => {
                owned_coeff = self.data_coeffs(theta);
                &owned_coeff
            }
        };
        let g = &bf.g;
        let want = block.is_some();

        // term 1
        let c = cf.a.mapv(|a| inv_l - a);
        let u = &self.rho.slice(ndarray::s![..k, ..]) - &c.dot(g);
        let mut du = if want { Array2::zeros((k, n)) } else { Array2::zeros((0, 0)) };
        let mut scratch = vec![0.0; n];
        let mut term1 = 0.0;
        for kk in 0..k {
            let grad = if want {
                Some((du.row_mut(kk).into_slice().unwrap(), scratch.as_mut_slice()))
            } else {
                None
            };
            term1 += proj_kl_row(u.row(kk), self.rho.row(kk + 1), w, grad);
        }
        if !term1.is_finite() || (want && du.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical {
                term: LossTerm::Prediction,
            });
        }

        // term 2
        let gw = g * &Array1::from(w.to_vec());
        let gram = gw.dot(&g.t());
        let term2 = gram.sum() - gram.diag().sum();
        if !term2.is_finite() {
            return Err(Error::Numerical {
                term: LossTerm::Orthogonality,
            });
        }

        // term 3
        let bcf = model.coeff_forward(theta, gw.view());
        let c3 = bcf.a.mapv(|a| inv_l - a);
        let u3 = g - &c3.dot(g);
        let mut du3 = Array2::zeros((l, n));
        let mut dq3 = Array2::zeros((l, n));
        let mut term3 = 0.0;
        for r in 0..l {
            let target = g.row((r + 1) % l);
            let grad = if want {
                Some((
                    du3.row_mut(r).into_slice().unwrap(),
                    dq3.row_mut(r).into_slice().unwrap(),
                ))
            } else {
                None
            };
            term3 += proj_kl_row(u3.row(r), target, w, grad);
        }
        if !term3.is_finite() || du3.iter().chain(dq3.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                term: LossTerm::Permutation,
            });
        }

        let terms = LossTerms {
            total: term1 + self.lambda * term2 + self.mu * term3,
            term1,
            term2,
            term3,
        };
        let Some(block) = block else {
            return Ok((terms, None));
        };
        du3 *= self.mu;
        dq3 *= self.mu;
        let db = du3.dot(&g.t());
        let dz_basis_in = coeff_output_grad(&bcf, &db, conserve);

        let grad = match block {
            Block::Theta => {
                let net = model.a_net();
                let mut grad = vec![0.0; theta.len()];
                let da = du.dot(&g.t());
                let dz = coeff_output_grad(cf, &da, conserve);
                net.backward(theta, &cf.fwd, dz, &mut grad, false);
                net.backward(theta, &bcf.fwd, dz_basis_in, &mut grad, false);
                grad
            }
            Block::Gamma => {
                let mut dg = -c.t().dot(&du);
                let colsum = g.sum_axis(Axis(0));
                for (i, mut row) in dg.rows_mut().into_iter().enumerate() {
                    for r in 0..n {
                        row[r] += 2.0 * self.lambda * w[r] * (colsum[r] - g[[i, r]]);
                    }
                }
                dg += &du3;
                dg -= &c3.t().dot(&du3);
                for r in 0..l {
                    let mut row = dg.row_mut((r + 1) % l);
                    row += &dq3.row(r);
                }
                let mut scratch = vec![0.0; theta.len()];
                let dv = model
                    .a_net()
                    .backward(theta, &bcf.fwd, dz_basis_in, &mut scratch, true)
                    .expect("input gradient requested");
                for i in 0..l {
                    for r in 0..n {
                        dg[[i, r]] += w[r] * dv[[i, r]];
                    }
                }
                let dz = basis_output_grad(bf, &dg, w);
                let mut grad = vec![0.0; gamma.len()];
                model.g_net().backward(gamma, &bf.fwd, dz, &mut grad, false);
                grad
            }
        };
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                term: LossTerm::Prediction,
            });
        }
        Ok((terms, Some(grad)))
    }
}

/// Loss of a network model, evaluated in batch.
pub fn model_loss(
    model: &SpectralPFModel,
    series: &DensitySeries,
    grid: &ReferenceGrid,
    lambda: f64,
    mu: f64,
) -> Result<LossTerms> {
    let p = Problem::new(model, series, grid, lambda, mu)?;
    Ok(p.eval(model.theta(), model.gamma(), None, None, None)?.0)
}

/// Exact gradient of the total loss with respect to one parameter block.
pub fn grad(
    model: &SpectralPFModel,
    series: &DensitySeries,
    grid: &ReferenceGrid,
    lambda: f64,
    mu: f64,
    wrt: Block,
) -> Result<Vec<f64>> {
    let p = Problem::new(model, series, grid, lambda, mu)?;
    Ok(p.eval(model.theta(), model.gamma(), Some(wrt), None, None)?.1.unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_gamma: f64,
    pub max_rel_theta: f64,
    /// Set when `h` lies outside `[1e-7, 1e-3]`, where roundoff or truncation dominates.
    pub step_warning: bool,
}

impl FdReport {
    pub fn max_rel(&self) -> f64 {
        self.max_rel_gamma.max(self.max_rel_theta)
    }
}

pub(crate) fn check_fd_step(h: f64) -> Result<bool> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(config_err(format!("finite-difference step must be positive, got {h}")));
    }
    let outside = !(1e-7..=1e-3).contains(&h);
    if outside {
        warn!("finite-difference step h = {h:e} is outside [1e-7, 1e-3]; cancellation or truncation will dominate");
    }
    Ok(outside)
}

/// Largest `|g - fd| / max(|g|, 1e-12)` over `n_coords` random coordinates, where `fd`
/// is the central difference of `f` with step `h`.
pub(crate) fn fd_compare(
    params: &[f64],
    analytic: &[f64],
    n_coords: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    let picks = sample(rng, params.len(), n_coords.min(params.len()));
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for j in picks.iter() {
        p[j] = params[j] + h;
        let up = f(&p)?;
        p[j] = params[j] - h;
        let dn = f(&p)?;
        p[j] = params[j];
        let fd = (up - dn) / (2.0 * h);
        let rel = (analytic[j] - fd).abs() / analytic[j].abs().max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Compares [`grad`] with central differences on `n_coords` random coordinates of each block.
#[allow(clippy::too_many_arguments)]
pub fn fd_check(
    model: &SpectralPFModel,
    series: &DensitySeries,
    grid: &ReferenceGrid,
    lambda: f64,
    mu: f64,
    n_coords: usize,
    h: f64,
    seed: u64,
) -> Result<FdReport> {
    let step_warning = check_fd_step(h)?;
    let p = Problem::new(model, series, grid, lambda, mu)?;
    let theta = model.theta();
    let gamma = model.gamma();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g_gamma = p.eval(theta, gamma, Some(Block::Gamma), None, None)?.1.unwrap();
    let max_rel_gamma = fd_compare(gamma, &g_gamma, n_coords, h, &mut rng, |x| {
        Ok(p.eval(theta, x, None, None, None)?.0.total)
    })?;
    let g_theta = p.eval(theta, gamma, Some(Block::Theta), None, None)?.1.unwrap();
    let max_rel_theta = fd_compare(theta, &g_theta, n_coords, h, &mut rng, |x| {
        Ok(p.eval(x, gamma, None, None, None)?.0.total)
    })?;
    Ok(FdReport {
        max_rel_gamma,
        max_rel_theta,
        step_warning,
    })
}

/// First-order update rule with persistent state.
#[derive(Debug, Clone)]
pub(crate) struct StepRule {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl StepRule {
    pub(crate) fn new(kind: Optimizer, n: usize) -> Self {
        StepRule {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub(crate) fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

pub(crate) fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: SpectralPFModel,
    /// Parameters with the lowest end-of-epoch total loss (the initial model if no epoch
    /// improved on it).
    pub best: SpectralPFModel,
    pub best_epoch: usize,
    pub history: TrainHistory,
}

/// Alternating minimization: per epoch, `inner_steps` updates of `gamma` with `theta`
/// fixed, then of `theta` with `gamma` fixed. A block's candidate is kept only when it
/// moved by at least `eps1` (resp. `eps2`).
pub fn train_pisa(
    model: &SpectralPFModel,
    series: &DensitySeries,
    grid: &ReferenceGrid,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let problem = Problem::new(model, series, grid, config.lambda, config.mu)?;
    let mut theta = model.theta().to_vec();
    let mut gamma = model.gamma().to_vec();
    let mut rule_gamma = StepRule::new(config.optimizer, gamma.len());
    let mut rule_theta = StepRule::new(config.optimizer, theta.len());
    let initial = problem.eval(&theta, &gamma, None, None, None)?.0;
    let mut history = TrainHistory {
        initial: Some(initial),
        epochs: Vec::with_capacity(config.n_epochs),
    };
    let mut best = (initial.total, 0usize, theta.clone(), gamma.clone());
    let mut lr = config.step_size;
    let start = Instant::now();
    for epoch in 1..=config.n_epochs {
        // gamma block, theta fixed
        let coeffs = problem.data_coeffs(&theta);
        let mut cand = gamma.clone();
        let saved = rule_gamma.clone();
        for _ in 0..config.inner_steps {
            let g = problem.eval(&theta, &cand, Some(Block::Gamma), None, Some(&coeffs))?.1.unwrap();
            rule_gamma.apply(&mut cand, &g, lr);
        }
        let mut dgamma = l2_distance(&cand, &gamma);
        if dgamma >= config.eps1 {
            gamma = cand;
        } else {
            rule_gamma = saved;
            dgamma = 0.0;
        }

        // theta block, gamma fixed
        let basis = problem.basis(&gamma)?;
        let mut cand = theta.clone();
        let saved = rule_theta.clone();
        for _ in 0..config.inner_steps {
            let g = problem.eval(&cand, &gamma, Some(Block::Theta), Some(&basis), None)?.1.unwrap();
            rule_theta.apply(&mut cand, &g, lr);
        }
        let mut dtheta = l2_distance(&cand, &theta);
        if dtheta >= config.eps2 {
            theta = cand;
        } else {
            rule_theta = saved;
            dtheta = 0.0;
        }

        let terms = problem.eval(&theta, &gamma, None, Some(&basis), None)?.0;
        history.epochs.push(EpochRecord {
            epoch,
            total: terms.total,
            term1: terms.term1,
            term2: terms.term2,
            term3: terms.term3,
            dgamma,
            dtheta,
            seconds: start.elapsed().as_secs_f64(),
        });
        if terms.total > config.divergence_factor * initial.total {
            return Err(Error::Divergence {
                epoch,
                loss: terms.total,
                initial: initial.total,
                factor: config.divergence_factor,
            });
        }
        if terms.total < best.0 {
            best = (terms.total, epoch, theta.clone(), gamma.clone());
        }
        if epoch % 10 == 0 || epoch == config.n_epochs {
            info!(
                "epoch {epoch}: total {:.6e} (prediction {:.6e}, overlap {:.6e}, permutation {:.6e})",
                terms.total, terms.term1, terms.term2, terms.term3
            );
        }
        lr *= config.step_decay;
        if config.early_stop && dgamma == 0.0 && dtheta == 0.0 {
            info!("both parameter blocks stalled at epoch {epoch}; stopping early");
            break;
        }
    }
    let mut final_model = model.clone();
    final_model.set_theta(theta)?;
    final_model.set_gamma(gamma)?;
    let mut best_model = model.clone();
    best_model.set_theta(best.2)?;
    best_model.set_gamma(best.3)?;
    Ok(TrainOutcome {
        model: final_model,
        best: best_model,
        best_epoch: best.1,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{build_grid, normalize, DensityField, GridSpec};
    use crate::dynamics::DomainBox;
    use crate::model::{init_model, ModelOptions};

    fn grid() -> ReferenceGrid {
        build_grid(&DomainBox::cube(2, -1.0, 1.0).unwrap(), &GridSpec::Lattice { per_axis: 6 }, 0).unwrap()
    }

    fn drifting_series(grid: &ReferenceGrid, steps: usize) -> DensitySeries {
        let fields = (0..=steps)
            .map(|k| {
                let c = -0.5 + 0.1 * k as f64;
                let v = (0..grid.len())
                    .map(|r| {
                        let p = grid.point(r);
                        (-((p[0] - c).powi(2) + (p[1] + 0.5 * c).powi(2)) * 1.5).exp()
                    })
                    .collect();
                normalize(&DensityField::new(v, grid).unwrap(), grid, false).unwrap()
            })
            .collect();
        DensitySeries::new(fields, 0.1, None).unwrap()
    }

    fn small_model(grid: &ReferenceGrid, l: usize, seed: u64, conserve: bool) -> SpectralPFModel {
        let opts = ModelOptions {
            hidden: vec![8, 8],
            conserve_mass: conserve,
            identity_init: false,
        };
        init_model(l, grid, &opts, seed).unwrap()
    }

    #[test]
    fn batched_loss_matches_reference() {
        let g = grid();
        let s = drifting_series(&g, 4);
        let m = small_model(&g, 3, 1, false);
        let a = loss(&m, &s, &g, 0.7, 1.3).unwrap();
        let b = model_loss(&m, &s, &g, 0.7, 1.3).unwrap();
        for (x, y) in [(a.total, b.total), (a.term1, b.term1), (a.term2, b.term2), (a.term3, b.term3)] {
            assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn zero_weights_reduce_to_prediction() {
        let g = grid();
        let s = drifting_series(&g, 3);
        let m = small_model(&g, 2, 4, false);
        let t = loss(&m, &s, &g, 0.0, 0.0).unwrap();
        assert_eq!(t.total, t.term1);
        assert!(t.term2 >= 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = grid();
        let s = drifting_series(&g, 4);
        for conserve in [false, true] {
            let m = small_model(&g, 3, 11, conserve);
            let r = fd_check(&m, &s, &g, 0.5, 0.8, 30, 1e-5, 3).unwrap();
            assert!(r.max_rel() < 1e-4, "{r:?}");
            assert!(!r.step_warning);
        }
    }

    #[test]
    fn tiny_step_warns() {
        let g = grid();
        let s = drifting_series(&g, 2);
        let m = small_model(&g, 2, 0, false);
        let r = fd_check(&m, &s, &g, 1.0, 1.0, 2, 1e-12, 0).unwrap();
        assert!(r.step_warning);
        assert!(r.max_rel().is_finite());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let g = grid();
        let s = drifting_series(&g, 5);
        let m = small_model(&g, 2, 3, false);
        let cfg = TrainConfig {
            n_epochs: 15,
            inner_steps: 5,
            step_size: 1e-2,
            ..TrainConfig::default()
        };
        let a = train_pisa(&m, &s, &g, &cfg).unwrap();
        let b = train_pisa(&m, &s, &g, &cfg).unwrap();
        assert_eq!(a.history.len(), 15);
        let strip = |h: &TrainHistory| h.epochs.iter().map(|r| (r.total, r.dgamma, r.dtheta)).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
        assert_eq!(a.model, b.model);
        let init = a.history.initial.unwrap().total;
        assert!(a.history.final_total().unwrap() < init);
        let best = a.history.best_so_far();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
        let best_loss = model_loss(&a.best, &s, &g, 1.0, 1.0).unwrap().total;
        assert!((best_loss - best.last().unwrap().min(init)).abs() < 1e-12);
    }

    #[test]
    fn huge_threshold_rejects_every_update() {
        let g = grid();
        let s = drifting_series(&g, 3);
        let m = small_model(&g, 2, 3, false);
        let cfg = TrainConfig {
            n_epochs: 5,
            inner_steps: 2,
            eps1: 1e6,
            eps2: 1e6,
            early_stop: true,
            ..TrainConfig::default()
        };
        let out = train_pisa(&m, &s, &g, &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.model, m);
    }

    #[test]
    fn history_csv_header() {
        let h = TrainHistory {
            initial: None,
            epochs: vec![EpochRecord {
                epoch: 1,
                total: 0.5,
                term1: 0.25,
                term2: 0.125,
                term3: 0.125,
                dgamma: 1e-3,
                dtheta: 0.0,
                seconds: 0.1,
            }],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,total,term1,term2,term3,dgamma,dtheta,seconds");
        assert_eq!(text.lines().nth(1).unwrap(), "1,0.5,0.25,0.125,0.125,0.001,0,0.1");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.n_epochs, 1000);
    }
}
