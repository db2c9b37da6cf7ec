use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Window;
use crate::density::{DensityField, GridMode, ReferenceGrid};
use crate::error::{config_err, Error, Result};

/// Fraction of the discrete mass of `field` at grid points within L2 distance `radius` of
/// any of `centers`.
pub fn mass_concentration(field: &DensityField, grid: &ReferenceGrid, centers: &[Vec<f64>], radius: f64) -> Result<f64> {
    field.check_grid(grid)?;
    if centers.is_empty() {
        return Ok(0.0);
    }
    if let Some(c) = centers.iter().find(|c| c.len() != grid.dim()) {
        return Err(config_err(format!(
            "centre {c:?} has {} coordinates but the grid is {}-dimensional",
            c.len(),
            grid.dim()
        )));
    }
    let r2 = radius * radius;
    let mut total = 0.0;
    let mut inside = 0.0;
    for (r, (v, w)) in field.values().iter().zip(grid.weights()).enumerate() {
        let m = v * w;
        total += m;
        let p = grid.point(r);
        if centers
            .iter()
            .any(|c| c.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= r2)
        {
            inside += m;
        }
    }
    if !(total > 0.0) {
        return Err(Error::Degenerate(format!("field has total mass {total}")));
    }
    Ok(inside / total)
}

/// A field on a 2-D cell lattice over the domain's projection onto two axes.
/// `values[i * cols + j]` is cell `i` along the first axis and `j` along the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub axes: [usize; 2],
    pub rows: usize,
    pub cols: usize,
    pub lower: [f64; 2],
    pub upper: [f64; 2],
    /// Density values (mass per unit area) of each cell.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        let dx = (self.upper[0] - self.lower[0]) / self.rows as f64;
        let dy = (self.upper[1] - self.lower[1]) / self.cols as f64;
        [self.lower[0] + (i as f64 + 0.5) * dx, self.lower[1] + (j as f64 + 0.5) * dy]
    }

    fn cell_area(&self) -> f64 {
        (self.upper[0] - self.lower[0]) / self.rows as f64 * (self.upper[1] - self.lower[1]) / self.cols as f64
    }

    /// Fraction of the projected mass in cells whose centres lie within `radius` of a centre.
    pub fn mass_fraction_near(&self, centers: &[[f64; 2]], radius: f64) -> f64 {
        let mut total = 0.0;
        let mut inside = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let v = self.values[i * self.cols + j];
                total += v;
                let c = self.cell_center(i, j);
                if centers
                    .iter()
                    .any(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= radius * radius)
                {
                    inside += v;
                }
            }
        }
        if total > 0.0 {
            inside / total
        } else {
            0.0
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_area()
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        for i in 0..self.rows {
            let row: Vec<String> = self.values[i * self.cols..(i + 1) * self.cols]
                .iter()
                .map(|v| v.to_string())
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Binary 8-bit PGM, brightness proportional to the cell value (white = maximum).
    pub fn write_pgm(&self, mut out: impl Write) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.cols, self.rows)?;
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|v| if max > 0.0 { (v.max(0.0) / max * 255.0).round() as u8 } else { 0 })
            .collect();
        out.write_all(&bytes)?;
        Ok(())
    }
}

/// Projects `field` onto the plane of `axes`. A 2-D lattice viewed on its own axes is
/// reshaped exactly; otherwise the quadrature mass of every point is binned into
/// `bins x bins` cells and divided by the cell area.
pub fn heatmap(field: &DensityField, grid: &ReferenceGrid, axes: [usize; 2], bins: Option<usize>) -> Result<Heatmap> {
    field.check_grid(grid)?;
    let dim = grid.dim();
    if axes[0] >= dim || axes[1] >= dim || axes[0] == axes[1] {
        return Err(config_err(format!("heatmap axes {axes:?} invalid for a {dim}-dimensional grid")));
    }
    let d = grid.domain();
    let lower = [d.lower()[axes[0]], d.lower()[axes[1]]];
    let upper = [d.upper()[axes[0]], d.upper()[axes[1]]];
    if dim == 2 && grid.mode() == GridMode::Lattice && axes == [0, 1] && bins.is_none_or(|b| Some(b) == grid.per_axis()) {
        let n = grid.per_axis().expect("lattice grids record their resolution");
        return Ok(Heatmap {
            axes,
            rows: n,
            cols: n,
            lower,
            upper,
            values: field.values().to_vec(),
        });
    }
    let b = bins.or(grid.per_axis()).unwrap_or(32);
    let mut hm = Heatmap {
        axes,
        rows: b,
        cols: b,
        lower,
        upper,
        values: vec![0.0; b * b],
    };
    let cell = |x: f64, lo: f64, hi: f64| -> usize { (((x - lo) / (hi - lo) * b as f64).floor().max(0.0) as usize).min(b - 1) };
    for (r, (v, w)) in field.values().iter().zip(grid.weights()).enumerate() {
        let p = grid.point(r);
        let i = cell(p[axes[0]], lower[0], upper[0]);
        let j = cell(p[axes[1]], lower[1], upper[1]);
        hm.values[i * b + j] += v * w;
    }
    let area = hm.cell_area();
    hm.values.iter_mut().for_each(|v| *v /= area);
    Ok(hm)
}

/// Writes `<base>.csv` and `<base>.pgm`.
pub fn export_heatmap(
    field: &DensityField,
    grid: &ReferenceGrid,
    axes: [usize; 2],
    bins: Option<usize>,
    base: impl AsRef<Path>,
) -> Result<Heatmap> {
    let hm = heatmap(field, grid, axes, bins)?;
    let base = base.as_ref();
    hm.write_csv(std::io::BufWriter::new(std::fs::File::create(base.with_extension("csv"))?))?;
    hm.write_pgm(std::io::BufWriter::new(std::fs::File::create(base.with_extension("pgm"))?))?;
    Ok(hm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMean {
    pub name: String,
    pub start: usize,
    pub end: usize,
    pub mean: f64,
}

pub fn window_means(values: &[f64], windows: &[Window]) -> Result<Vec<WindowMean>> {
    windows
        .iter()
        .map(|w| {
            if w.start >= w.end || w.end > values.len() {
                return Err(config_err(format!(
                    "window `{}` = {}..{} outside {} values",
                    w.name,
                    w.start,
                    w.end,
                    values.len()
                )));
            }
            let s = &values[w.start..w.end];
            Ok(WindowMean {
                name: w.name.clone(),
                start: w.start,
                end: w.end,
                mean: s.iter().sum::<f64>() / s.len() as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRatio {
    pub name: String,
    pub first: f64,
    pub second: f64,
    /// `second / first`; above 1 when the first model has the lower KL.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub first: String,
    pub second: String,
    pub steps: Vec<usize>,
    pub first_kl: Vec<f64>,
    pub second_kl: Vec<f64>,
    pub windows: Vec<WindowRatio>,
}

impl Comparison {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "step,{},{}", self.first, self.second)?;
        for ((s, a), b) in self.steps.iter().zip(&self.first_kl).zip(&self.second_kl) {
            writeln!(out, "{s},{a},{b}")?;
        }
        Ok(())
    }
}

/// Aligns two per-step KL curves and reports window means and `second / first` ratios.
pub fn compare(
    first: (&str, &[f64]),
    second: (&str, &[f64]),
    windows: &[Window],
) -> Result<Comparison> {
    if first.1.len() != second.1.len() {
        return Err(Error::Schema(format!(
            "KL curves have different lengths ({} vs {})",
            first.1.len(),
            second.1.len()
        )));
    }
    let a = window_means(first.1, windows)?;
    let b = window_means(second.1, windows)?;
    Ok(Comparison {
        first: first.0.into(),
        second: second.0.into(),
        steps: (1..=first.1.len()).collect(),
        first_kl: first.1.to_vec(),
        second_kl: second.1.to_vec(),
        windows: a
            .into_iter()
            .zip(b)
            .map(|(x, y)| WindowRatio {
                ratio: y.mean / x.mean,
                name: x.name,
                first: x.mean,
                second: y.mean,
            })
            .collect(),
    })
}
