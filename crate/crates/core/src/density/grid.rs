use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::DomainBox;
use crate::error::{config_err, Error, Result};

/// Largest lattice accepted by default.
pub const DEFAULT_MAX_POINTS: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridMode {
    Lattice,
    MonteCarlo,
}

/// How to place reference points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GridSpec {
    /// Cell centres of a regular `per_axis^M` partition.
    Lattice { per_axis: usize },
    /// `n_points` i.i.d. uniform points.
    MonteCarlo { n_points: usize },
}

impl GridSpec {
    /// Lattice with 32 cells per axis up to three dimensions, 4096 random points beyond.
    pub fn default_for_dim(dim: usize) -> GridSpec {
        if dim <= 3 {
            GridSpec::Lattice { per_axis: 32 }
        } else {
            GridSpec::MonteCarlo { n_points: 4096 }
        }
    }
}

/// Content hash of a grid; fields and models carry it to detect mismatches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridId(pub u64);

impl std::fmt::Display for GridId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Evaluation points with quadrature weights. Every density in the crate lives on one of these.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
    mode: GridMode,
    domain: DomainBox,
    per_axis: Option<usize>,
    id: GridId,
}

impl ReferenceGrid {
    /// Assembles a grid from explicit parts (used by the series file loader and tests).
    pub fn from_parts(
        domain: DomainBox,
        mode: GridMode,
        points: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let dim = domain.dim();
        if points.len() != weights.len() * dim || weights.is_empty() {
            return Err(Error::Schema(format!(
                "grid has {} coordinates for {} weights in dimension {dim}",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Schema("grid weights must be positive and finite".into()));
        }
        let per_axis = match mode {
            GridMode::Lattice => {
                let r = (weights.len() as f64).powf(1.0 / dim as f64).round() as usize;
                (r.checked_pow(dim as u32) == Some(weights.len())).then_some(r)
            }
            GridMode::MonteCarlo => None,
        };
        let id = hash_grid(mode, dim, &points, &weights);
        Ok(Self {
            points,
            weights,
            mode,
            domain,
            per_axis,
            id,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn point(&self, r: usize) -> &[f64] {
        let m = self.dim();
        &self.points[r * m..(r + 1) * m]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mode(&self) -> GridMode {
        self.mode
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    /// Cells per axis for a lattice grid.
    pub fn per_axis(&self) -> Option<usize> {
        self.per_axis
    }

    pub fn id(&self) -> GridId {
        self.id
    }
}

fn hash_grid(mode: GridMode, dim: usize, points: &[f64], weights: &[f64]) -> GridId {
    let mut h = Sha256::new();
    h.update([mode as u8]);
    h.update((dim as u64).to_le_bytes());
    for v in points.iter().chain(weights) {
        h.update(v.to_bits().to_le_bytes());
    }
    let digest = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    GridId(u64::from_le_bytes(first))
}

/// Builds a reference grid over `domain`; every weight is `vol / R`.
pub fn build_grid(domain: &DomainBox, spec: &GridSpec, seed: u64) -> Result<ReferenceGrid> {
    build_grid_with_limit(domain, spec, seed, DEFAULT_MAX_POINTS)
}

pub fn build_grid_with_limit(
    domain: &DomainBox,
    spec: &GridSpec,
    seed: u64,
    max_points: usize,
) -> Result<ReferenceGrid> {
    let dim = domain.dim();
    let (mode, points, n) = match *spec {
        GridSpec::Lattice { per_axis } => {
            if per_axis < 2 {
                return Err(config_err(format!("lattice needs at least 2 cells per axis, got {per_axis}")));
            }
            let n = per_axis
                .checked_pow(dim as u32)
                .filter(|n| *n <= max_points)
                .ok_or_else(|| {
                    Error::Resource(format!(
                        "a {per_axis}^{dim} lattice exceeds the {max_points}-point limit; use monte-carlo mode"
                    ))
                })?;
            let mut points = Vec::with_capacity(n * dim);
            let mut idx = vec![0usize; dim];
            for _ in 0..n {
                for (m, &i) in idx.iter().enumerate() {
                    let (lo, hi) = (domain.lower()[m], domain.upper()[m]);
                    points.push(lo + (hi - lo) * (i as f64 + 0.5) / per_axis as f64);
                }
                // last axis runs fastest
                for m in (0..dim).rev() {
                    idx[m] += 1;
                    if idx[m] < per_axis {
                        break;
                    }
                    idx[m] = 0;
                }
            }
            (GridMode::Lattice, points, n)
        }
        GridSpec::MonteCarlo { n_points } => {
            if n_points == 0 {
                return Err(config_err("monte-carlo grid needs at least one point"));
            }
            if n_points > max_points {
                return Err(Error::Resource(format!(
                    "{n_points} points exceed the {max_points}-point limit"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut points = Vec::with_capacity(n_points * dim);
            for _ in 0..n_points {
                for m in 0..dim {
                    points.push(rng.random_range(domain.lower()[m]..domain.upper()[m]));
                }
            }
            (GridMode::MonteCarlo, points, n_points)
        }
    };
    let w = domain.volume() / n as f64;
    ReferenceGrid::from_parts(domain.clone(), mode, points, vec![w; n])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_square_lattice() {
        let grid = build_grid(&DomainBox::cube(2, 0.0, 1.0).unwrap(), &GridSpec::Lattice { per_axis: 2 }, 0)
            .unwrap();
        assert_eq!(grid.points(), &[0.25, 0.25, 0.25, 0.75, 0.75, 0.25, 0.75, 0.75]);
        assert_eq!(grid.weights(), &[0.25; 4]);
        assert_eq!(grid.per_axis(), Some(2));
    }

    #[test]
    fn monte_carlo_weights_sum_to_volume() {
        let d = DomainBox::cube(5, -8.0, 8.0).unwrap();
        let grid = build_grid(&d, &GridSpec::MonteCarlo { n_points: 1000 }, 4).unwrap();
        let total: f64 = grid.weights().iter().sum();
        assert!((total - 16f64.powi(5)).abs() <= 1e-9 * 16f64.powi(5));
        assert!((0..grid.len()).all(|r| d.contains(grid.point(r))));
    }

    #[test]
    fn oversized_lattice_is_resource_error() {
        let d = DomainBox::cube(5, -8.0, 8.0).unwrap();
        let err = build_grid(&d, &GridSpec::Lattice { per_axis: 32 }, 0).unwrap_err();
        assert!(matches!(err, Error::Resource(msg) if msg.contains("monte-carlo")));
    }

    #[test]
    fn lattice_needs_two_cells() {
        let d = DomainBox::cube(1, 0.0, 1.0).unwrap();
        assert!(matches!(
            build_grid(&d, &GridSpec::Lattice { per_axis: 1 }, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ids_distinguish_grids() {
        let d = DomainBox::cube(2, 0.0, 1.0).unwrap();
        let a = build_grid(&d, &GridSpec::Lattice { per_axis: 4 }, 0).unwrap();
        let b = build_grid(&d, &GridSpec::Lattice { per_axis: 5 }, 0).unwrap();
        let c = build_grid(&d, &GridSpec::MonteCarlo { n_points: 16 }, 0).unwrap();
        let c2 = build_grid(&d, &GridSpec::MonteCarlo { n_points: 16 }, 1).unwrap();
        assert_ne!(a.id(), b.id());
        assert_ne!(c.id(), c2.id());
        assert_eq!(a.id(), build_grid(&d, &GridSpec::Lattice { per_axis: 4 }, 9).unwrap().id());
    }
}
