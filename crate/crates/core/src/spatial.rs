//! Spatial bias estimation on a uniform cell grid.
//!
//! With temporal parameters treated as known, a correspondence between pixel
//! cells `m` (earlier frame) and `n` (later frame) states
//! `r_n - r_m = cal(I_to) - cal(I_from)`, where `cal` maps an intensity into
//! the first frame's units without spatial correction. Each such difference
//! constraint is one row of a sparse system with a single `+1` and `-1`; the
//! normal equations are a weighted graph Laplacian over cells. Only the
//! largest connected component is solved, with its mean fixed at zero.

use std::collections::BTreeMap;
use std::io::Write;

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::bilinear;
use crate::model::{calibrate_pixel, ParamChain};
use crate::temporal::CorrespondenceSet;

/// Constraints whose right-hand side exceeds this are discarded as gross outliers.
pub const MAX_ABS_RHS: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum SpatialError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("component is empty or has no constraints")]
    EmptySystem,
    #[error("conjugate gradient did not converge (residual {residual:e} after {iterations} iterations)")]
    SolverFailure { residual: f64, iterations: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cells_x: usize,
    pub cells_y: usize,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn new(cells_x: usize, cells_y: usize, width: usize, height: usize) -> Result<Self, SpatialError> {
        if cells_x == 0 || cells_y == 0 {
            return Err(SpatialError::InvalidGrid("cell counts must be positive".into()));
        }
        if cells_x > width || cells_y > height {
            return Err(SpatialError::InvalidGrid(format!(
                "{cells_x}x{cells_y} cells do not fit a {width}x{height} image"
            )));
        }
        Ok(Self {
            cells_x,
            cells_y,
            width,
            height,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.cells_x * self.cells_y
    }

    pub fn cell_width(&self) -> f64 {
        self.width as f64 / self.cells_x as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.height as f64 / self.cells_y as f64
    }

    /// Cell holding pixel coordinate `(x, y)`; pixel `k` spans `[k - 0.5, k + 0.5)`.
    pub fn cell_of(&self, x: f64, y: f64) -> usize {
        let cx = (((x + 0.5) / self.cell_width()).floor().max(0.0) as usize).min(self.cells_x - 1);
        let cy = (((y + 0.5) / self.cell_height()).floor().max(0.0) as usize).min(self.cells_y - 1);
        cy * self.cells_x + cx
    }

    /// Center of a cell in pixel coordinates.
    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let cx = cell % self.cells_x;
        let cy = cell / self.cells_x;
        [
            (cx as f64 + 0.5) * self.cell_width() - 0.5,
            (cy as f64 + 0.5) * self.cell_height() - 0.5,
        ]
    }
}

/// `r[cell_n] - r[cell_m] = rhs`, standing for `weight` merged observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifferenceConstraint {
    pub cell_n: usize,
    pub cell_m: usize,
    pub rhs: f64,
    pub weight: f64,
}

impl DifferenceConstraint {
    pub fn new(cell_n: usize, cell_m: usize, rhs: f64) -> Self {
        Self {
            cell_n,
            cell_m,
            rhs,
            weight: 1.0,
        }
    }
}

/// Append-only store of difference constraints.
///
/// Observations of the same cell pair from the same frame pair are merged by
/// averaging; the merged constraint's weight is the observation count, which
/// leaves the least-squares solution unchanged.
#[derive(Debug, Clone)]
pub struct ConstraintAccumulator {
    grid: GridSpec,
    // (from_frame, to_frame, low cell, high cell) -> (sum of rhs oriented high - low, count)
    merged: BTreeMap<(usize, usize, usize, usize), (f64, usize)>,
    pub same_cell_dropped: usize,
    pub outliers_dropped: usize,
}

impl ConstraintAccumulator {
    pub fn new(grid: GridSpec) -> Self {
        Self {
            grid,
            merged: BTreeMap::new(),
            same_cell_dropped: 0,
            outliers_dropped: 0,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn is_empty(&self) -> bool {
        self.merged.is_empty()
    }

    /// Adds one observation `r_n - r_m = rhs` from a frame pair.
    pub fn add(&mut self, frames: (usize, usize), cell_m: usize, cell_n: usize, rhs: f64) {
        if cell_m == cell_n {
            self.same_cell_dropped += 1;
            return;
        }
        if !rhs.is_finite() || rhs.abs() > MAX_ABS_RHS {
            self.outliers_dropped += 1;
            return;
        }
        let (lo, hi, oriented) = if cell_m < cell_n {
            (cell_m, cell_n, rhs)
        } else {
            (cell_n, cell_m, -rhs)
        };
        let slot = self.merged.entry((frames.0, frames.1, lo, hi)).or_insert((0.0, 0));
        slot.0 += oriented;
        slot.1 += 1;
    }

    /// Adds every cross-cell correspondence of a set. Sets whose frames are
    /// missing from the chain are skipped.
    pub fn add_set(&mut self, set: &CorrespondenceSet, chain: &ParamChain) {
        let (Some(p_from), Some(p_to)) = (chain.get(set.from_frame), chain.get(set.to_frame)) else {
            return;
        };
        for c in &set.pairs {
            let cell_m = self.grid.cell_of(c.p_from[0], c.p_from[1]);
            let cell_n = self.grid.cell_of(c.p_to[0], c.p_to[1]);
            let rhs = calibrate_pixel(c.i_to, p_to, 0.0) - calibrate_pixel(c.i_from, p_from, 0.0);
            self.add((set.from_frame, set.to_frame), cell_m, cell_n, rhs);
        }
    }

    pub fn constraints(&self) -> Vec<DifferenceConstraint> {
        self.merged
            .iter()
            .map(|(&(_, _, lo, hi), &(sum, count))| DifferenceConstraint {
                cell_n: hi,
                cell_m: lo,
                rhs: sum / count as f64,
                weight: count as f64,
            })
            .collect()
    }
}

/// One constraint per cross-cell correspondence, merged per frame pair.
pub fn accumulate_constraints(
    sets: &[CorrespondenceSet],
    chain: &ParamChain,
    grid: &GridSpec,
) -> Vec<DifferenceConstraint> {
    let mut acc = ConstraintAccumulator::new(*grid);
    for s in sets {
        acc.add_set(s, chain);
    }
    acc.constraints()
}

/// Labeling of grid cells into components linked by constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    /// Per cell: the lowest cell index of its component.
    pub labels: Vec<usize>,
    /// Per cell: whether any constraint touches it.
    pub observed: Vec<bool>,
    /// Cells of the largest observed component, ascending. Ties go to the
    /// component with the lowest cell index.
    pub largest: Vec<usize>,
}

impl Components {
    pub fn component_of(&self, cell: usize) -> Vec<usize> {
        let label = self.labels[cell];
        (0..self.labels.len()).filter(|&c| self.labels[c] == label).collect()
    }
}

pub fn connected_components(constraints: &[DifferenceConstraint], grid: &GridSpec) -> Components {
    let n = grid.cell_count();
    let mut uf = UnionFind::<usize>::new(n);
    let mut observed = vec![false; n];
    for c in constraints {
        uf.union(c.cell_n, c.cell_m);
        observed[c.cell_n] = true;
        observed[c.cell_m] = true;
    }
    let roots = uf.into_labeling();
    let mut lowest = vec![usize::MAX; n];
    for (cell, &root) in roots.iter().enumerate() {
        lowest[root] = lowest[root].min(cell);
    }
    let labels: Vec<usize> = roots.iter().map(|&r| lowest[r]).collect();

    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for cell in (0..n).filter(|&c| observed[c]) {
        *sizes.entry(labels[cell]).or_default() += 1;
    }
    // BTreeMap iterates labels ascending, so the first maximum wins ties
    let best = sizes
        .iter()
        .fold(None, |best: Option<(usize, usize)>, (&label, &size)| match best {
            Some((_, s)) if s >= size => best,
            _ => Some((label, size)),
        });
    let largest = match best {
        Some((label, _)) => (0..n).filter(|&c| observed[c] && labels[c] == label).collect(),
        None => Vec::new(),
    };
    Components {
        labels,
        observed,
        largest,
    }
}

/// Where a cell's bias value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellSource {
    Solved,
    Gp,
}

/// Per-cell spatial bias in the first frame's intensity units.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField {
    pub grid: GridSpec,
    /// `None` marks cells outside the solved component.
    pub values: Vec<Option<f64>>,
    pub sources: Vec<Option<CellSource>>,
    /// Component label per cell, as in [`Components::labels`].
    pub component: Vec<usize>,
    pub residual_rms: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldDocument {
    cells_x: usize,
    cells_y: usize,
    width: usize,
    height: usize,
    r: Vec<Option<f64>>,
    source: Vec<Option<CellSource>>,
    residual_rms: f64,
}

impl SpatialField {
    /// A field with every cell unsolved.
    pub fn empty(grid: GridSpec) -> Self {
        let n = grid.cell_count();
        Self {
            grid,
            values: vec![None; n],
            sources: vec![None; n],
            component: (0..n).collect(),
            residual_rms: 0.0,
        }
    }

    pub fn solved_cells(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .zip(&self.sources)
            .enumerate()
            .filter_map(|(c, (v, s))| match (v, s) {
                (Some(v), Some(CellSource::Solved)) => Some((c, *v)),
                _ => None,
            })
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    /// Bias at a pixel, bilinear between cell centers; unsolved cells count as 0.
    pub fn bias_at(&self, x: f64, y: f64) -> f64 {
        let dense: Vec<f64> = self.values.iter().map(|v| v.unwrap_or(0.0)).collect();
        self.sampler(dense).at(x, y)
    }

    /// A reusable per-pixel sampler over the current values.
    pub fn bias_sampler(&self) -> BiasSampler {
        self.sampler(self.values.iter().map(|v| v.unwrap_or(0.0)).collect())
    }

    fn sampler(&self, dense: Vec<f64>) -> BiasSampler {
        BiasSampler {
            grid: self.grid,
            values: dense,
        }
    }

    pub fn write_json<W: Write>(&self, w: W) -> serde_json::Result<()> {
        let doc = FieldDocument {
            cells_x: self.grid.cells_x,
            cells_y: self.grid.cells_y,
            width: self.grid.width,
            height: self.grid.height,
            r: self.values.clone(),
            source: self.sources.clone(),
            residual_rms: self.residual_rms,
        };
        serde_json::to_writer_pretty(w, &doc)
    }

    pub fn read_json<R: std::io::Read>(r: R) -> Result<Self, String> {
        let doc: FieldDocument = serde_json::from_reader(r).map_err(|e| e.to_string())?;
        let grid = GridSpec::new(doc.cells_x, doc.cells_y, doc.width, doc.height).map_err(|e| e.to_string())?;
        if doc.r.len() != grid.cell_count() || doc.source.len() != grid.cell_count() {
            return Err("field arrays do not match the grid size".into());
        }
        Ok(Self {
            grid,
            values: doc.r,
            sources: doc.source,
            component: (0..grid.cell_count()).collect(),
            residual_rms: doc.residual_rms,
        })
    }

    /// Cell-resolution grayscale rendering: mid-gray is zero bias, full
    /// black/white is `-/+ max |r|`. Unsolved cells are black.
    pub fn visualization(&self) -> Vec<u8> {
        let max = self
            .values
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        self.values
            .iter()
            .map(|v| match v {
                None => 0,
                Some(v) if max > 0.0 => (127.5 + 127.5 * v / max).round().clamp(0.0, 255.0) as u8,
                Some(_) => 128,
            })
            .collect()
    }
}

/// Bilinear interpolation of cell values at pixel coordinates.
#[derive(Debug, Clone)]
pub struct BiasSampler {
    grid: GridSpec,
    values: Vec<f64>,
}

impl BiasSampler {
    pub fn at(&self, x: f64, y: f64) -> f64 {
        let gx = (x + 0.5) / self.grid.cell_width() - 0.5;
        let gy = (y + 0.5) / self.grid.cell_height() - 0.5;
        bilinear(&self.values, self.grid.cells_x, self.grid.cells_y, gx, gy)
    }
}

/// Compressed sparse rows of a symmetric matrix.
struct Csr {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn from_rows(rows: Vec<BTreeMap<usize, f64>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self { row_ptr, cols, vals }
    }

    fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            *o = s;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.row_ptr.len() - 1)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .find(|&k| self.cols[k] == i)
                    .map_or(0.0, |k| self.vals[k])
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weighted Laplacian normal equations restricted to `cells`.
///
/// Returns the matrix rows and right-hand side in the local indexing of `cells`.
pub(crate) fn normal_equations(
    constraints: &[DifferenceConstraint],
    cells: &[usize],
    cell_count: usize,
) -> (Vec<BTreeMap<usize, f64>>, Vec<f64>, usize) {
    let mut local = vec![usize::MAX; cell_count];
    for (k, &c) in cells.iter().enumerate() {
        local[c] = k;
    }
    let n = cells.len();
    let mut rows = vec![BTreeMap::new(); n];
    let mut rhs = vec![0.0; n];
    let mut used = 0;
    for c in constraints {
        let (i, j) = (local[c.cell_n], local[c.cell_m]);
        if i == usize::MAX || j == usize::MAX {
            continue;
        }
        used += 1;
        let w = c.weight;
        *rows[i].entry(i).or_insert(0.0) += w;
        *rows[j].entry(j).or_insert(0.0) += w;
        *rows[i].entry(j).or_insert(0.0) -= w;
        *rows[j].entry(i).or_insert(0.0) -= w;
        rhs[i] += w * c.rhs;
        rhs[j] -= w * c.rhs;
    }
    (rows, rhs, used)
}

/// Least-squares bias over one component with mean-zero gauge.
///
/// The Laplacian is singular along the constant vector; its right-hand side
/// is orthogonal to that direction, so preconditioned conjugate gradients
/// converge and the mean is removed afterwards.
pub fn solve_spatial(
    constraints: &[DifferenceConstraint],
    component: &[usize],
    grid: &GridSpec,
) -> Result<SpatialField, SpatialError> {
    let n_cells = grid.cell_count();
    let (rows, rhs, used) = normal_equations(constraints, component, n_cells);
    if component.is_empty() || used == 0 {
        return Err(SpatialError::EmptySystem);
    }
    let lap = Csr::from_rows(rows);
    let x = conjugate_gradient(&lap, &rhs)?;

    let mut field = SpatialField::empty(*grid);
    let comps = connected_components(constraints, grid);
    field.component = comps.labels;
    for (k, &cell) in component.iter().enumerate() {
        field.values[cell] = Some(x[k]);
        field.sources[cell] = Some(CellSource::Solved);
    }
    field.residual_rms = constraint_residual(constraints, &field.values);
    Ok(field)
}

/// Weighted RMS of `r_n - r_m - rhs` over constraints whose cells both have values.
pub fn constraint_residual(constraints: &[DifferenceConstraint], values: &[Option<f64>]) -> f64 {
    let (mut ss, mut w) = (0.0, 0.0);
    for c in constraints {
        if let (Some(rn), Some(rm)) = (values[c.cell_n], values[c.cell_m]) {
            let e = rn - rm - c.rhs;
            ss += c.weight * e * e;
            w += c.weight;
        }
    }
    if w > 0.0 {
        (ss / w).sqrt()
    } else {
        0.0
    }
}

fn conjugate_gradient(lap: &Csr, rhs: &[f64]) -> Result<Vec<f64>, SpatialError> {
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let norm_b = dot(rhs, rhs).sqrt();
    if norm_b == 0.0 {
        return Ok(x);
    }
    let inv_diag: Vec<f64> = lap
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let tol = 1e-13 * norm_b;
    let max_iter = 20 * n + 100;
    let mut iterations = 0;
    let mut res = norm_b;
    while iterations < max_iter {
        lap.mul(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            break;
        }
        let alpha = rz / pq;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * q[k];
        }
        iterations += 1;
        res = dot(&r, &r).sqrt();
        if res <= tol {
            break;
        }
        for k in 0..n {
            z[k] = r[k] * inv_diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    // the true residual of the projected solution decides convergence
    let mean = x.iter().sum::<f64>() / n as f64;
    x.iter_mut().for_each(|v| *v -= mean);
    lap.mul(&x, &mut q);
    let true_res = q.iter().zip(rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if !true_res.is_finite() || true_res > 1e-8 * norm_b.max(1.0) {
        return Err(SpatialError::SolverFailure {
            residual: true_res.max(res),
            iterations,
        });
    }
    Ok(x)
}

/// Residual trimming: after a solve, constraints whose residual exceeds
/// `k` robust standard deviations (never less than `floor`) are dropped and
/// the system is solved again, at most `rounds` times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrimConfig {
    pub rounds: usize,
    pub k: f64,
    pub floor: f64,
}

impl Default for TrimConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            k: 3.0,
            floor: 0.01,
        }
    }
}

impl TrimConfig {
    pub fn disabled() -> Self {
        Self {
            rounds: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err("trim.k must be positive".into());
        }
        if !(self.floor >= 0.0 && self.floor.is_finite()) {
            return Err("trim.floor must be non-negative".into());
        }
        Ok(())
    }
}

/// [`solve_largest`] with residual trimming. Returns the field and the number
/// of constraints dropped.
pub fn solve_trimmed(
    constraints: &[DifferenceConstraint],
    grid: &GridSpec,
    trim: &TrimConfig,
) -> Result<(SpatialField, usize), SpatialError> {
    let mut kept = constraints.to_vec();
    let mut field = solve_largest(&kept, grid)?;
    for _ in 0..trim.rounds {
        let residuals: Vec<Option<f64>> = kept
            .iter()
            .map(|c| match (field.values[c.cell_n], field.values[c.cell_m]) {
                (Some(rn), Some(rm)) => Some(rn - rm - c.rhs),
                _ => None,
            })
            .collect();
        let mut abs: Vec<f64> = residuals.iter().flatten().map(|e| e.abs()).collect();
        if abs.is_empty() {
            break;
        }
        let mid = abs.len() / 2;
        let median = *abs.select_nth_unstable_by(mid, f64::total_cmp).1;
        let limit = (trim.k * 1.4826 * median).max(trim.floor);
        let before = kept.len();
        kept = kept
            .into_iter()
            .zip(&residuals)
            .filter(|(_, e)| e.is_none_or(|e| e.abs() <= limit))
            .map(|(c, _)| c)
            .collect();
        if kept.len() == before {
            break;
        }
        field = solve_largest(&kept, grid)?;
    }
    Ok((field, constraints.len() - kept.len()))
}

/// Components, then a solve on the largest one.
pub fn solve_largest(constraints: &[DifferenceConstraint], grid: &GridSpec) -> Result<SpatialField, SpatialError> {
    let comps = connected_components(constraints, grid);
    solve_spatial(constraints, &comps.largest, grid)
}
