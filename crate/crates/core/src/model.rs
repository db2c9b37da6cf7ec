//! Spectral-decomposition model of the one-step density push-forward
//!
//! `P rho = rho - sum_i (1/l - A_i(rho)) G_i`
//!
//! with `l` non-negative functionals `A_i` over densities and `l` unit-mass basis
//! densities `G_i` over states.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::density::{project, weighted_sum, DensityField, DensitySeries, GridId, ReferenceGrid};
use crate::error::{config_err, Error, Result};
use crate::nn::{softplus, softplus_inv, Forward, Mlp};

/// Raw mass below which a basis component counts as degenerate.
pub const MIN_BASIS_MASS: f64 = 1e-12;

fn default_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOptions {
    /// Hidden-layer widths shared by the A- and G-networks.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Rescale the A-outputs to sum to one.
    #[serde(default)]
    pub conserve_mass: bool,
    /// Start the A-network near the constant `1/l` so the untrained model is close to
    /// the identity map.
    #[serde(default)]
    pub identity_init: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            hidden: default_hidden(),
            conserve_mass: false,
            identity_init: false,
        }
    }
}

/// Anything that supplies the coefficients `A_i(rho)` and basis fields `G_i` of the
/// spectral form. Push-forward, rollout and the loss are generic over it.
pub trait SpectralOperator {
    fn n_components(&self) -> usize;

    fn grid_id(&self) -> GridId;

    fn coefficients(&self, rho: &DensityField, grid: &ReferenceGrid) -> Result<Vec<f64>>;

    fn basis(&self, grid: &ReferenceGrid) -> Result<Vec<DensityField>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralPFModel {
    l: usize,
    dim: usize,
    n_grid: usize,
    grid_id: GridId,
    options: ModelOptions,
    a_net: Mlp,
    g_net: Mlp,
    theta: Vec<f64>,
    gamma: Vec<f64>,
}

/// Cached forward pass of the G-network over the grid.
pub(crate) struct BasisForward {
    pub fwd: Forward,
    /// Per-component discrete mass of the softplus outputs.
    pub mass: Vec<f64>,
    /// `l x R` normalized basis.
    pub g: Array2<f64>,
}

/// Cached forward pass of the A-network on a batch of densities.
pub(crate) struct CoeffForward {
    pub fwd: Forward,
    /// `B x l` softplus outputs.
    pub raw: Array2<f64>,
    /// `B x l` coefficients (rescaled when mass is conserved).
    pub a: Array2<f64>,
}

pub fn init_model(l: usize, grid: &ReferenceGrid, options: &ModelOptions, seed: u64) -> Result<SpectralPFModel> {
    if l == 0 {
        return Err(config_err("component count l must be at least 1"));
    }
    if l > grid.len() {
        return Err(config_err(format!(
            "l = {l} components exceeds the grid resolution R = {}",
            grid.len()
        )));
    }
    if options.hidden.is_empty() {
        return Err(config_err("hidden layer list must not be empty"));
    }
    let a_net = Mlp::new(grid.len(), &options.hidden, l)?;
    let g_net = Mlp::new(grid.dim(), &options.hidden, l)?;
    let mut theta = a_net.init(seed);
    let gamma = g_net.init(seed ^ 0x9e37_79b9_7f4a_7c15);
    if options.identity_init {
        let (w, b) = a_net.output_layer_mut(&mut theta);
        w.iter_mut().for_each(|v| *v *= 0.1);
        b.fill(softplus_inv(1.0 / l as f64));
    }
    Ok(SpectralPFModel {
        l,
        dim: grid.dim(),
        n_grid: grid.len(),
        grid_id: grid.id(),
        options: options.clone(),
        a_net,
        g_net,
        theta,
        gamma,
    })
}

impl SpectralPFModel {
    pub fn l(&self) -> usize {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn options(&self) -> &ModelOptions {
        &self.options
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::Schema(format!(
                "theta has {} entries, expected {}",
                theta.len(),
                self.theta.len()
            )));
        }
        self.theta = theta;
        Ok(())
    }

    pub fn set_gamma(&mut self, gamma: Vec<f64>) -> Result<()> {
        if gamma.len() != self.gamma.len() {
            return Err(Error::Schema(format!(
                "gamma has {} entries, expected {}",
                gamma.len(),
                self.gamma.len()
            )));
        }
        self.gamma = gamma;
        Ok(())
    }

    pub(crate) fn a_net(&self) -> &Mlp {
        &self.a_net
    }

    pub(crate) fn g_net(&self) -> &Mlp {
        &self.g_net
    }

    pub(crate) fn check_grid(&self, grid: &ReferenceGrid) -> Result<()> {
        if grid.id() != self.grid_id || grid.len() != self.n_grid {
            return Err(Error::Grid(format!(
                "model was built for grid {} but grid {} was supplied",
                self.grid_id,
                grid.id()
            )));
        }
        Ok(())
    }

    /// A-network outputs for rows of `weighted` (each row is `w * rho`).
    pub(crate) fn coeff_forward(&self, theta: &[f64], weighted: ArrayView2<f64>) -> CoeffForward {
        let fwd = self.a_net.forward(theta, weighted);
        let raw = fwd.output().mapv(softplus);
        let a = if self.options.conserve_mass {
            let mut a = raw.clone();
            for mut row in a.rows_mut() {
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            a
        } else {
            raw.clone()
        };
        CoeffForward { fwd, raw, a }
    }

    pub(crate) fn basis_forward(&self, gamma: &[f64], grid: &ReferenceGrid) -> Result<BasisForward> {
        self.check_grid(grid)?;
        let inputs = unit_points(grid);
        let fwd = self.g_net.forward(gamma, inputs.view());
        let raw = fwd.output().mapv(softplus);
        let w = grid.weights();
        let mut mass = Vec::with_capacity(self.l);
        let mut g = Array2::zeros((self.l, self.n_grid));
        for i in 0..self.l {
            let col = raw.column(i);
            let m: f64 = col.iter().zip(w).map(|(s, w)| s * w).sum();
            if !(m >= MIN_BASIS_MASS) || !m.is_finite() {
                return Err(Error::Degenerate(format!("basis component {i} has raw mass {m:e}")));
            }
            g.row_mut(i).assign(&col.mapv(|v| v / m));
            mass.push(m);
        }
        Ok(BasisForward { fwd, mass, g })
    }

    /// `A(rho)`, fed the quadrature-weighted density `w * rho`.
    pub fn eval_a(&self, rho: &DensityField, grid: &ReferenceGrid) -> Result<Vec<f64>> {
        self.check_grid(grid)?;
        rho.check_grid(grid)?;
        let input = weighted_rows(&[rho.values()], grid.weights());
        Ok(self.coeff_forward(&self.theta, input.view()).a.row(0).to_vec())
    }

    /// The `l` basis fields, each non-negative with unit discrete mass.
    pub fn eval_g(&self, grid: &ReferenceGrid) -> Result<Vec<DensityField>> {
        let b = self.basis_forward(&self.gamma, grid)?;
        Ok(b.g
            .rows()
            .into_iter()
            .map(|r| DensityField::from_raw(r.to_vec(), self.grid_id, true))
            .collect())
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Pisa,
            l: self.l as u32,
            dim: self.dim as u32,
            n_grid: self.n_grid as u64,
            grid_id: self.grid_id,
            header: json!({
                "a_sizes": self.a_net.sizes(),
                "g_sizes": self.g_net.sizes(),
                "options": self.options,
            }),
            metadata,
            blocks: vec![("theta".into(), self.theta.clone()), ("gamma".into(), self.gamma.clone())],
        }
    }

    pub fn from_checkpoint(c: &Checkpoint, grid: &ReferenceGrid) -> Result<Self> {
        if c.kind != ModelKind::Pisa {
            return Err(Error::Schema(format!("checkpoint holds a {} model", c.kind.name())));
        }
        if c.grid_id != grid.id() || c.n_grid as usize != grid.len() || c.dim as usize != grid.dim() {
            return Err(Error::Grid(format!(
                "checkpoint was trained on grid {} ({} points) but grid {} ({} points) was supplied",
                c.grid_id,
                c.n_grid,
                grid.id(),
                grid.len()
            )));
        }
        let sizes = |key: &str| -> Result<Vec<usize>> {
            serde_json::from_value(c.header[key].clone())
                .map_err(|e| Error::Schema(format!("checkpoint header `{key}`: {e}")))
        };
        let options: ModelOptions = serde_json::from_value(c.header["options"].clone())
            .map_err(|e| Error::Schema(format!("checkpoint header `options`: {e}")))?;
        let a_net = Mlp::from_sizes(sizes("a_sizes")?)?;
        let g_net = Mlp::from_sizes(sizes("g_sizes")?)?;
        let l = c.l as usize;
        if a_net.input_dim() != grid.len()
            || a_net.output_dim() != l
            || g_net.input_dim() != grid.dim()
            || g_net.output_dim() != l
        {
            return Err(Error::Schema("checkpoint architecture does not match l, M and R".into()));
        }
        let mut model = SpectralPFModel {
            l,
            dim: grid.dim(),
            n_grid: grid.len(),
            grid_id: grid.id(),
            options,
            theta: vec![0.0; a_net.n_params()],
            gamma: vec![0.0; g_net.n_params()],
            a_net,
            g_net,
        };
        model.set_theta(c.block("theta")?.to_vec())?;
        model.set_gamma(c.block("gamma")?.to_vec())?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, metadata: serde_json::Value) -> Result<()> {
        self.to_checkpoint(metadata).save(path)
    }

    pub fn load(path: impl AsRef<Path>, grid: &ReferenceGrid) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, grid)
    }
}

impl SpectralOperator for SpectralPFModel {
    fn n_components(&self) -> usize {
        self.l
    }

    fn grid_id(&self) -> GridId {
        self.grid_id
    }

    fn coefficients(&self, rho: &DensityField, grid: &ReferenceGrid) -> Result<Vec<f64>> {
        self.eval_a(rho, grid)
    }

    fn basis(&self, grid: &ReferenceGrid) -> Result<Vec<DensityField>> {
        self.eval_g(grid)
    }
}

/// Grid points mapped affinely onto `[-1, 1]^M`, one row per point.
pub(crate) fn unit_points(grid: &ReferenceGrid) -> Array2<f64> {
    let dim = grid.dim();
    let mut out = Array2::zeros((grid.len(), dim));
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        grid.domain().to_unit(grid.point(r), row.as_slice_mut().unwrap());
    }
    out
}

/// Stacks `w * rho` for each field into a `B x R` matrix.
pub(crate) fn weighted_rows(fields: &[&[f64]], weights: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros((fields.len(), weights.len()));
    for (mut row, f) in out.rows_mut().into_iter().zip(fields) {
        for ((o, v), w) in row.iter_mut().zip(f.iter()).zip(weights) {
            *o = v * w;
        }
    }
    out
}

/// Spectral operator with linear functionals `A_i(rho) = c_i + sum_r w_r h_i[r] rho[r]`
/// and fixed basis fields. Useful for constructing exact decompositions.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpectralOperator {
    grid_id: GridId,
    basis: Vec<DensityField>,
    h: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

impl LinearSpectralOperator {
    pub fn new(grid: &ReferenceGrid, basis: Vec<DensityField>, h: Vec<Vec<f64>>, offset: Vec<f64>) -> Result<Self> {
        let l = basis.len();
        if l == 0 || h.len() != l || offset.len() != l {
            return Err(config_err("basis, h and offset must all have l >= 1 entries"));
        }
        for g in &basis {
            g.check_grid(grid)?;
            if !g.is_normalized() {
                return Err(Error::Degenerate("basis fields must be normalized".into()));
            }
        }
        if h.iter().any(|v| v.len() != grid.len()) {
            return Err(Error::Grid("every h_i needs one value per grid point".into()));
        }
        Ok(Self {
            grid_id: grid.id(),
            basis,
            h,
            offset,
        })
    }

    /// Exact cyclic-permutation operator on disjoint basis fields: with `S_i` the support
    /// of `G_i`, `A_i(rho) = 1/l + mass(rho on S_{i-1}) - mass(rho on S_i)`, so that
    /// `P G_i = G_{i+1}` (indices mod `l`).
    pub fn cyclic(grid: &ReferenceGrid, basis: Vec<DensityField>) -> Result<Self> {
        let l = basis.len();
        let support = |g: &DensityField| -> Vec<f64> {
            g.values().iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect()
        };
        let h = (0..l)
            .map(|i| {
                let prev = support(&basis[(i + l - 1) % l]);
                let cur = support(&basis[i]);
                prev.iter().zip(&cur).map(|(p, c)| p - c).collect()
            })
            .collect();
        Self::new(grid, basis, h, vec![1.0 / l as f64; l])
    }
}

impl SpectralOperator for LinearSpectralOperator {
    fn n_components(&self) -> usize {
        self.basis.len()
    }

    fn grid_id(&self) -> GridId {
        self.grid_id
    }

    fn coefficients(&self, rho: &DensityField, grid: &ReferenceGrid) -> Result<Vec<f64>> {
        rho.check_grid(grid)?;
        Ok(self
            .h
            .iter()
            .zip(&self.offset)
            .map(|(h, c)| {
                c + rho
                    .values()
                    .iter()
                    .zip(h)
                    .zip(grid.weights())
                    .map(|((v, h), w)| w * h * v)
                    .sum::<f64>()
            })
            .collect())
    }

    fn basis(&self, _grid: &ReferenceGrid) -> Result<Vec<DensityField>> {
        Ok(self.basis.clone())
    }
}

fn check_operator_grid<O: SpectralOperator + ?Sized>(op: &O, grid: &ReferenceGrid) -> Result<()> {
    if op.grid_id() != grid.id() {
        return Err(Error::Grid(format!(
            "operator lives on grid {} but grid {} was supplied",
            op.grid_id(),
            grid.id()
        )));
    }
    Ok(())
}

/// `rho - sum_i (1/l - a_i) G_i` with precomputed coefficients and basis.
pub fn spectral_combination(rho: &[f64], a: &[f64], basis: &[DensityField]) -> Vec<f64> {
    let inv_l = 1.0 / basis.len() as f64;
    let mut out = rho.to_vec();
    for (g, ai) in basis.iter().zip(a) {
        let c = inv_l - ai;
        if c != 0.0 {
            for (o, gv) in out.iter_mut().zip(g.values()) {
                *o -= c * gv;
            }
        }
    }
    out
}

/// One raw (possibly signed, not renormalized) push-forward step.
pub fn pf_step<O: SpectralOperator + ?Sized>(op: &O, rho: &DensityField, grid: &ReferenceGrid) -> Result<DensityField> {
    check_operator_grid(op, grid)?;
    rho.check_grid(grid)?;
    let a = op.coefficients(rho, grid)?;
    let basis = op.basis(grid)?;
    Ok(DensityField::from_raw(
        spectral_combination(rho.values(), &a, &basis),
        grid.id(),
        false,
    ))
}

/// `(1/l) sum_i G_i`.
pub fn terminal_density<O: SpectralOperator + ?Sized>(op: &O, grid: &ReferenceGrid) -> Result<DensityField> {
    check_operator_grid(op, grid)?;
    let basis = op.basis(grid)?;
    let inv_l = 1.0 / basis.len() as f64;
    let mut out = vec![0.0; grid.len()];
    for g in &basis {
        for (o, v) in out.iter_mut().zip(g.values()) {
            *o += inv_l * v;
        }
    }
    Ok(DensityField::from_raw(out, grid.id(), true))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// `rho_0` followed by one normalized field per step. Without projection these are
    /// the projections of the raw iterates, which are kept in `raw`.
    pub predicted: DensitySeries,
    /// Raw iterates, only kept when the rollout runs unprojected.
    pub raw: Option<Vec<DensityField>>,
    pub raw_mass: Vec<f64>,
    pub clamped_mass: Vec<f64>,
    /// `sum_i A_i(rho)` of the field each step started from.
    pub coefficient_sum: Vec<f64>,
}

/// Iterates [`pf_step`] `steps` times from `rho0`. With `project`, every iterate is
/// clamped and renormalized before the next step.
pub fn rollout<O: SpectralOperator + ?Sized>(
    op: &O,
    rho0: &DensityField,
    grid: &ReferenceGrid,
    steps: usize,
    project_steps: bool,
    tau: f64,
) -> Result<RolloutResult> {
    if steps == 0 {
        return Err(config_err("rollout needs at least one step"));
    }
    check_operator_grid(op, grid)?;
    rho0.check_grid(grid)?;
    let basis = op.basis(grid)?;
    let mut predicted = vec![rho0.clone()];
    let mut raw_fields = Vec::new();
    let mut raw_mass = Vec::with_capacity(steps);
    let mut clamped_mass = Vec::with_capacity(steps);
    let mut coefficient_sum = Vec::with_capacity(steps);
    let mut current = rho0.clone();
    for step in 1..=steps {
        let a = op.coefficients(&current, grid)?;
        coefficient_sum.push(a.iter().sum());
        let next = DensityField::from_raw(spectral_combination(current.values(), &a, &basis), grid.id(), false);
        if next.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Collapse { step });
        }
        let p = project(&next, grid).map_err(|e| match e {
            Error::Degenerate(_) => Error::Collapse { step },
            other => other,
        })?;
        raw_mass.push(p.raw_mass);
        clamped_mass.push(p.clamped_mass);
        predicted.push(p.field.clone());
        current = if project_steps {
            p.field
        } else {
            raw_fields.push(next.clone());
            next
        };
    }
    Ok(RolloutResult {
        predicted: DensitySeries::new(predicted, tau, None)?,
        raw: (!project_steps).then_some(raw_fields),
        raw_mass,
        clamped_mass,
        coefficient_sum,
    })
}

/// Discrete mass of a raw field, `sum_r w_r f_r`.
pub fn raw_mass(field: &DensityField, grid: &ReferenceGrid) -> f64 {
    weighted_sum(field.values(), grid.weights())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{build_grid, integrate, normalize, GridSpec};
    use crate::dynamics::DomainBox;

    fn grid() -> ReferenceGrid {
        build_grid(&DomainBox::cube(2, -1.0, 1.0).unwrap(), &GridSpec::Lattice { per_axis: 6 }, 0).unwrap()
    }

    fn bump(grid: &ReferenceGrid, c: [f64; 2]) -> DensityField {
        let v = (0..grid.len())
            .map(|r| {
                let p = grid.point(r);
                (-((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)) * 2.0).exp()
            })
            .collect();
        normalize(&DensityField::new(v, grid).unwrap(), grid, false).unwrap()
    }

    fn small_options() -> ModelOptions {
        ModelOptions {
            hidden: vec![8, 8],
            ..ModelOptions::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let g = grid();
        let a = init_model(3, &g, &small_options(), 5).unwrap();
        assert_eq!(a, init_model(3, &g, &small_options(), 5).unwrap());
        assert_ne!(a.theta(), init_model(3, &g, &small_options(), 6).unwrap().theta());
        assert!(matches!(init_model(37, &g, &small_options(), 0), Err(Error::Config(_))));
        assert!(matches!(init_model(0, &g, &small_options(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn basis_fields_are_densities() {
        let g = grid();
        let m = init_model(4, &g, &small_options(), 1).unwrap();
        let basis = m.eval_g(&g).unwrap();
        assert_eq!(basis.len(), 4);
        for b in &basis {
            assert!(b.is_nonnegative());
            assert!((integrate(b, &g).unwrap() - 1.0).abs() < 1e-9);
        }
        assert_eq!(basis, m.eval_g(&g).unwrap());
    }

    #[test]
    fn mass_identity() {
        let g = grid();
        let m = init_model(3, &g, &small_options(), 2).unwrap();
        let rho = bump(&g, [0.3, -0.2]);
        let a = m.eval_a(&rho, &g).unwrap();
        let out = pf_step(&m, &rho, &g).unwrap();
        assert!((raw_mass(&out, &g) - a.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn identity_init_is_close_to_identity() {
        let g = grid();
        let opts = ModelOptions {
            identity_init: true,
            ..small_options()
        };
        let m = init_model(3, &g, &opts, 2).unwrap();
        let a = m.eval_a(&bump(&g, [0.0, 0.0]), &g).unwrap();
        for v in a {
            assert!((v - 1.0 / 3.0).abs() < 0.1);
        }
    }

    #[test]
    fn conserved_mass_option() {
        let g = grid();
        let opts = ModelOptions {
            conserve_mass: true,
            ..small_options()
        };
        let m = init_model(3, &g, &opts, 2).unwrap();
        let a = m.eval_a(&bump(&g, [0.5, 0.0]), &g).unwrap();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_grid_check() {
        let g = grid();
        let m = init_model(2, &g, &small_options(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pfs");
        m.save(&p, json!({"note": "x"})).unwrap();
        assert_eq!(SpectralPFModel::load(&p, &g).unwrap(), m);
        let other = build_grid(&DomainBox::cube(2, -1.0, 1.0).unwrap(), &GridSpec::Lattice { per_axis: 7 }, 0).unwrap();
        assert!(matches!(SpectralPFModel::load(&p, &other), Err(Error::Grid(_))));
    }

    #[test]
    fn cyclic_operator_permutes() {
        let g = grid();
        let n = g.len();
        let basis: Vec<DensityField> = (0..3)
            .map(|i| {
                let v = (0..n).map(|r| if r % 3 == i { 1.0 } else { 0.0 }).collect();
                normalize(&DensityField::new(v, &g).unwrap(), &g, false).unwrap()
            })
            .collect();
        let op = LinearSpectralOperator::cyclic(&g, basis.clone()).unwrap();
        for i in 0..3 {
            let next = pf_step(&op, &basis[i], &g).unwrap();
            assert!(next.sup_distance(&basis[(i + 1) % 3]) < 1e-12);
        }
        let rho = terminal_density(&op, &g).unwrap();
        assert!(pf_step(&op, &rho, &g).unwrap().sup_distance(&rho) < 1e-12);
    }

    #[test]
    fn identity_operator_rollout_is_constant() {
        let g = grid();
        let basis = vec![bump(&g, [0.5, 0.5]), bump(&g, [-0.5, 0.0])];
        let op = LinearSpectralOperator::new(&g, basis, vec![vec![0.0; g.len()]; 2], vec![0.5; 2]).unwrap();
        let rho = bump(&g, [0.1, 0.1]);
        let r = rollout(&op, &rho, &g, 5, true, 0.1).unwrap();
        for f in r.predicted.fields() {
            assert!(f.sup_distance(&rho) < 1e-12);
        }
    }

    #[test]
    fn zero_coefficient_collapses() {
        let g = grid();
        let b = bump(&g, [0.0, 0.0]);
        let op = LinearSpectralOperator::new(&g, vec![b.clone()], vec![vec![0.0; g.len()]], vec![0.0]).unwrap();
        let out = pf_step(&op, &b, &g).unwrap();
        assert!(raw_mass(&out, &g).abs() < 1e-12);
        assert!(matches!(rollout(&op, &b, &g, 3, true, 0.1), Err(Error::Collapse { step: 1 })));
    }
}
