use super::grid::{GridId, ReferenceGrid};
use crate::error::{Error, Result};

/// Additive floor used inside every KL divergence on a grid.
pub const DEFAULT_KL_EPS: f64 = 1e-12;

/// Tolerance on the discrete mass of a field flagged as normalized.
pub const MASS_TOL: f64 = 1e-9;

/// Function values at the points of one [`ReferenceGrid`].
///
/// Raw operator outputs may be signed; [`normalize`] and [`project`] produce proper
/// probability densities (non-negative, unit discrete mass).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    values: Vec<f64>,
    grid_id: GridId,
    normalized: bool,
}

impl DensityField {
    pub fn new(values: Vec<f64>, grid: &ReferenceGrid) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Grid(format!(
                "field has {} values but the grid has {} points",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("field contains non-finite values".into()));
        }
        Ok(Self {
            values,
            grid_id: grid.id(),
            normalized: false,
        })
    }

    /// `c` at every grid point.
    pub fn constant(c: f64, grid: &ReferenceGrid) -> Result<Self> {
        Self::new(vec![c; grid.len()], grid)
    }

    pub(crate) fn from_raw(values: Vec<f64>, grid_id: GridId, normalized: bool) -> Self {
        Self {
            values,
            grid_id,
            normalized,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grid_id(&self) -> GridId {
        self.grid_id
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|v| *v >= 0.0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn check_grid(&self, grid: &ReferenceGrid) -> Result<()> {
        if self.grid_id != grid.id() || self.values.len() != grid.len() {
            return Err(Error::Grid(format!(
                "field lives on grid {} but grid {} was supplied",
                self.grid_id,
                grid.id()
            )));
        }
        Ok(())
    }

    /// Largest absolute pointwise difference.
    pub fn sup_distance(&self, other: &DensityField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `K + 1` normalized fields on one grid, sampled every `tau` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySeries {
    fields: Vec<DensityField>,
    tau: f64,
    sigma: Option<f64>,
}

impl DensitySeries {
    pub fn new(fields: Vec<DensityField>, tau: f64, sigma: Option<f64>) -> Result<Self> {
        let first = fields
            .first()
            .ok_or_else(|| Error::Schema("density series needs at least one field".into()))?;
        if let Some((k, _)) = fields
            .iter()
            .enumerate()
            .find(|(_, f)| f.grid_id != first.grid_id)
        {
            return Err(Error::Grid(format!("field {k} lives on a different grid")));
        }
        if let Some((k, _)) = fields.iter().enumerate().find(|(_, f)| !f.normalized) {
            return Err(Error::Degenerate(format!("field {k} of the series is not normalized")));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("series tau must be positive, got {tau}")));
        }
        Ok(Self { fields, tau, sigma })
    }

    pub fn fields(&self) -> &[DensityField] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// `K`, the number of transitions.
    pub fn n_steps(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn grid_id(&self) -> GridId {
        self.fields[0].grid_id
    }

    /// Fields `start..=end` as their own series.
    pub fn window(&self, start: usize, end: usize) -> Result<DensitySeries> {
        if start > end || end >= self.fields.len() {
            return Err(Error::Config(format!(
                "window {start}..={end} outside a series of {} fields",
                self.fields.len()
            )));
        }
        Ok(Self {
            fields: self.fields[start..=end].to_vec(),
            tau: self.tau,
            sigma: self.sigma,
        })
    }
}

/// Discrete quadrature `sum_r w_r f_r`.
pub fn integrate(field: &DensityField, grid: &ReferenceGrid) -> Result<f64> {
    field.check_grid(grid)?;
    Ok(weighted_sum(&field.values, grid.weights()))
}

pub fn inner_product(f: &DensityField, g: &DensityField, grid: &ReferenceGrid) -> Result<f64> {
    f.check_grid(grid)?;
    g.check_grid(grid)?;
    Ok(f.values
        .iter()
        .zip(&g.values)
        .zip(grid.weights())
        .map(|((a, b), w)| w * a * b)
        .sum())
}

/// Scales `field` to unit discrete mass. With `clamp`, negative entries are zeroed first;
/// otherwise they are an error.
pub fn normalize(field: &DensityField, grid: &ReferenceGrid, clamp: bool) -> Result<DensityField> {
    field.check_grid(grid)?;
    let mut values = field.values.clone();
    if values.iter().any(|v| *v < 0.0) {
        if !clamp {
            return Err(Error::Degenerate(
                "field has negative entries; normalize with clamping or project it".into(),
            ));
        }
        values.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    let mass = weighted_sum(&values, grid.weights());
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::Degenerate(format!("cannot normalize a field of total mass {mass}")));
    }
    values.iter_mut().for_each(|v| *v /= mass);
    Ok(DensityField::from_raw(values, field.grid_id, true))
}

/// A field after clamping negatives to zero and renormalizing.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub field: DensityField,
    /// Discrete mass of the negative part that was removed (`>= 0`).
    pub clamped_mass: f64,
    /// Discrete mass of the raw input.
    pub raw_mass: f64,
}

pub fn project(field: &DensityField, grid: &ReferenceGrid) -> Result<Projection> {
    field.check_grid(grid)?;
    let raw_mass = weighted_sum(&field.values, grid.weights());
    let clamped_mass: f64 = field
        .values
        .iter()
        .zip(grid.weights())
        .filter(|(v, _)| **v < 0.0)
        .map(|(v, w)| -v * w)
        .sum();
    Ok(Projection {
        field: normalize(field, grid, true)?,
        clamped_mass,
        raw_mass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlDivergence {
    pub value: f64,
    /// Set when an argument was not flagged normalized and had to be normalized first.
    pub renormalized: bool,
}

/// `D(f || g) = sum_r w_r f_r ln((f_r + eps) / (g_r + eps))`.
pub fn kl_divergence(
    f: &DensityField,
    g: &DensityField,
    grid: &ReferenceGrid,
    eps: f64,
) -> Result<KlDivergence> {
    f.check_grid(grid)?;
    g.check_grid(grid)?;
    let mut renormalized = false;
    let fix = |x: &DensityField, flag: &mut bool| -> Result<Option<DensityField>> {
        if x.normalized {
            Ok(None)
        } else {
            *flag = true;
            normalize(x, grid, false).map(Some)
        }
    };
    let f_norm = fix(f, &mut renormalized)?;
    let g_norm = fix(g, &mut renormalized)?;
    let p = f_norm.as_ref().unwrap_or(f);
    let q = g_norm.as_ref().unwrap_or(g);
    Ok(KlDivergence {
        value: kl_values(&p.values, &q.values, grid.weights(), eps),
        renormalized,
    })
}

/// KL after projecting both arguments onto probability densities; the policy applied to
/// predicted (possibly signed) fields.
pub fn projected_kl(f: &DensityField, g: &DensityField, grid: &ReferenceGrid) -> Result<f64> {
    let p = project(f, grid)?.field;
    let q = project(g, grid)?.field;
    Ok(kl_values(&p.values, &q.values, grid.weights(), DEFAULT_KL_EPS))
}

pub(crate) fn weighted_sum(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(v, w)| v * w).sum()
}

pub(crate) fn kl_values(p: &[f64], q: &[f64], w: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .zip(w)
        .map(|((a, b), w)| w * a * ((a + eps) / (b + eps)).ln())
        .sum()
}
