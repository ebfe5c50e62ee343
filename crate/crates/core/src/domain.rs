//! Observation batches, evaluation regions and their quadrature grids, and
//! cross-fitting plans.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeedPolicy;

/// Largest evaluation dimension accepted by [`EvaluationRegion`].
pub const MAX_EVAL_DIM: usize = 3;

/// The observed sample `Z = (X, A, Y)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBatch {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub x: Vec<f64>,
    pub a: Vec<i64>,
    pub y: Vec<f64>,
    pub labels: BTreeSet<i64>,
}

impl ObservationBatch {
    pub fn new(k: usize, d: usize, x: Vec<f64>, a: Vec<i64>, y: Vec<f64>) -> Result<Self> {
        let labels = a.iter().copied().collect();
        Self::with_labels(k, d, x, a, y, labels)
    }

    pub fn with_labels(
        k: usize,
        d: usize,
        x: Vec<f64>,
        a: Vec<i64>,
        y: Vec<f64>,
        labels: BTreeSet<i64>,
    ) -> Result<Self> {
        let n = a.len();
        if n == 0 {
            return Err(Error::Data("batch must contain at least one unit".into()));
        }
        if d == 0 {
            return Err(Error::Data("outcome dimension must be positive".into()));
        }
        if x.len() != n * k || y.len() != n * d {
            return Err(Error::Data(format!(
                "row counts disagree: a has {n}, x has {} values (k={k}), y has {} values (d={d})",
                x.len(),
                y.len()
            )));
        }
        if let Some(i) = x.iter().chain(y.iter()).position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite entry at flat index {i}")));
        }
        if let Some(bad) = a.iter().find(|l| !labels.contains(l)) {
            return Err(Error::Data(format!("treatment label {bad} is not declared")));
        }
        Ok(Self {
            n,
            k,
            d,
            x,
            a,
            y,
            labels,
        })
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.k..(i + 1) * self.k]
    }

    pub fn y_row(&self, i: usize) -> &[f64] {
        &self.y[i * self.d..(i + 1) * self.d]
    }

    pub fn arm_indices(&self, arm: i64) -> Vec<usize> {
        (0..self.n).filter(|&i| self.a[i] == arm).collect()
    }

    /// Rows `idx` as a new batch (labels preserved).
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let mut x = Vec::with_capacity(idx.len() * self.k);
        let mut y = Vec::with_capacity(idx.len() * self.d);
        let mut a = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.x_row(i));
            y.extend_from_slice(self.y_row(i));
            a.push(self.a[i]);
        }
        Self::with_labels(self.k, self.d, x, a, y, self.labels.clone())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.k).map(|j| format!("x{j}")).collect();
        header.push("a".into());
        header.extend((0..self.d).map(|j| format!("y{j}")));
        out.write_record(&header).map_err(csv_err)?;
        let mut rec: Vec<String> = Vec::with_capacity(self.k + self.d + 1);
        for i in 0..self.n {
            rec.clear();
            rec.extend(self.x_row(i).iter().map(|v| fmt_f64(*v)));
            rec.push(self.a[i].to_string());
            rec.extend(self.y_row(i).iter().map(|v| fmt_f64(*v)));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Parses the `x0,...,x{k-1},a,y0,...,y{d-1}` layout.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(csv_err)?.clone();
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        let a_col = names
            .iter()
            .position(|h| *h == "a")
            .ok_or_else(|| Error::Data("header has no `a` column".into()))?;
        let k = a_col;
        let d = names.len() - a_col - 1;
        for (j, h) in names[..k].iter().enumerate() {
            if *h != format!("x{j}") {
                return Err(Error::Data(format!("expected column x{j}, found `{h}`")));
            }
        }
        for (j, h) in names[a_col + 1..].iter().enumerate() {
            if *h != format!("y{j}") {
                return Err(Error::Data(format!("expected column y{j}, found `{h}`")));
            }
        }
        let (mut x, mut a, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != names.len() {
                return Err(Error::Data(format!("row {row} has {} fields", rec.len())));
            }
            for (j, field) in rec.iter().enumerate() {
                let field = field.trim();
                if j == a_col {
                    let v: f64 = field
                        .parse()
                        .map_err(|_| Error::Data(format!("row {row}: bad label `{field}`")))?;
                    if v.fract() != 0.0 {
                        return Err(Error::Data(format!("row {row}: label `{field}` is not an integer")));
                    }
                    a.push(v as i64);
                } else {
                    let v: f64 = field
                        .parse()
                        .map_err(|_| Error::Data(format!("row {row}: bad number `{field}`")))?;
                    if j < a_col {
                        x.push(v);
                    } else {
                        y.push(v);
                    }
                }
            }
        }
        Self::new(k, d, x, a, y)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Shortest round-trip representation.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Compact evaluation box `Y0`, optionally living in projected coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub grid_points_per_axis: usize,
    /// Row-major `dim × d` projection from ambient outcomes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<Vec<Vec<f64>>>,
}

impl EvaluationRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, grid_points_per_axis: usize) -> Result<Self> {
        let r = Self {
            lower,
            upper,
            grid_points_per_axis,
            projection: None,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn with_projection(mut self, projection: Vec<Vec<f64>>) -> Result<Self> {
        self.projection = Some(projection);
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.lower.len();
        if dim == 0 || dim != self.upper.len() {
            return Err(Error::config("lower/upper", "must be nonempty and of equal length"));
        }
        if dim > MAX_EVAL_DIM {
            return Err(Error::config(
                "lower",
                format!("evaluation dimension {dim} exceeds the maximum of {MAX_EVAL_DIM}; supply a projection"),
            ));
        }
        for j in 0..dim {
            if !(self.lower[j].is_finite() && self.upper[j].is_finite() && self.lower[j] < self.upper[j]) {
                return Err(Error::config("lower/upper", format!("axis {j} must satisfy lower < upper")));
            }
        }
        if self.grid_points_per_axis < 2 {
            return Err(Error::config("grid_points_per_axis", "must be at least 2"));
        }
        if let Some(p) = &self.projection {
            if p.len() != dim {
                return Err(Error::config(
                    "projection",
                    format!("has {} rows but the region has dimension {dim}", p.len()),
                ));
            }
            let cols = p[0].len();
            if cols == 0 || p.iter().any(|r| r.len() != cols || r.iter().any(|v| !v.is_finite())) {
                return Err(Error::config("projection", "rows must be finite and of equal length"));
            }
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).product()
    }

    pub fn projection_matrix(&self) -> Option<DMatrix<f64>> {
        self.projection.as_ref().map(|p| {
            let cols = p[0].len();
            DMatrix::from_fn(p.len(), cols, |i, j| p[i][j])
        })
    }

    /// Outcomes of `batch` in evaluation coordinates, row-major `n × dim`.
    pub fn project_outcomes(&self, batch: &ObservationBatch) -> Result<Vec<f64>> {
        match &self.projection {
            None => {
                if batch.d != self.dim() {
                    return Err(Error::GridMismatch(format!(
                        "outcome dimension {} differs from region dimension {}",
                        batch.d,
                        self.dim()
                    )));
                }
                Ok(batch.y.clone())
            }
            Some(p) => {
                if p[0].len() != batch.d {
                    return Err(Error::GridMismatch(format!(
                        "projection expects {} ambient coordinates, batch has {}",
                        p[0].len(),
                        batch.d
                    )));
                }
                let dim = self.dim();
                let mut out = Vec::with_capacity(batch.n * dim);
                for i in 0..batch.n {
                    let y = batch.y_row(i);
                    for row in p {
                        out.push(row.iter().zip(y).map(|(a, b)| a * b).sum());
                    }
                }
                Ok(out)
            }
        }
    }

    /// Bounding box of `points` (row-major, `dim` columns) expanded by `margin` of the
    /// side length on each side.
    pub fn bounding_box(points: &[f64], dim: usize, margin: f64, grid_points_per_axis: usize) -> Result<Self> {
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::Data("bounding box needs at least one point".into()));
        }
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for row in points.chunks(dim) {
            for j in 0..dim {
                lo[j] = lo[j].min(row[j]);
                hi[j] = hi[j].max(row[j]);
            }
        }
        for j in 0..dim {
            let side = (hi[j] - lo[j]).max(1e-9);
            lo[j] -= margin * side;
            hi[j] += margin * side;
        }
        Self::new(lo, hi, grid_points_per_axis)
    }
}

/// Tensor-product midpoint grid over an [`EvaluationRegion`].
#[derive(Debug, Clone)]
pub struct Grid {
    pub dim: usize,
    pub points_per_axis: usize,
    /// Row-major `len × dim`.
    pub points: Vec<f64>,
    /// Common quadrature weight (cell volume).
    pub weight: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    fingerprint: String,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, p: usize) -> &[f64] {
        &self.points[p * self.dim..(p + 1) * self.dim]
    }

    pub fn weights(&self) -> Vec<f64> {
        vec![self.weight; self.len()]
    }

    pub fn cell_width(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.points_per_axis as f64
    }

    /// Content hash of the point set, used to check that estimators and
    /// nuisances were wired to the same grid.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Points whose coordinates lie strictly inside the region shrunk by `frac`
    /// of the side length on each side.
    pub fn interior_mask(&self, frac: f64) -> Vec<bool> {
        (0..self.len())
            .map(|p| {
                let y = self.point(p);
                (0..self.dim).all(|j| {
                    let side = self.upper[j] - self.lower[j];
                    y[j] > self.lower[j] + frac * side && y[j] < self.upper[j] - frac * side
                })
            })
            .collect()
    }

    /// A grid from an explicit point list with a common weight.
    pub fn from_points(dim: usize, points: Vec<f64>, weight: f64) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::Data("grid points must be a nonempty multiple of dim".into()));
        }
        let mut lower = vec![f64::INFINITY; dim];
        let mut upper = vec![f64::NEG_INFINITY; dim];
        for row in points.chunks(dim) {
            for j in 0..dim {
                lower[j] = lower[j].min(row[j]);
                upper[j] = upper[j].max(row[j]);
            }
        }
        let fingerprint = fingerprint_points(&points, weight);
        Ok(Self {
            dim,
            points_per_axis: 0,
            points,
            weight,
            lower,
            upper,
            fingerprint,
        })
    }

    /// Subset of points by index (same weight).
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let mut pts = Vec::with_capacity(idx.len() * self.dim);
        for &p in idx {
            pts.extend_from_slice(self.point(p));
        }
        Self::from_points(self.dim, pts, self.weight)
    }
}

fn fingerprint_points(points: &[f64], weight: f64) -> String {
    let mut h = Sha256::new();
    for v in points {
        h.update(v.to_le_bytes());
    }
    h.update(weight.to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Short content hash of a float slice.
pub fn hash_f64s(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// SHA-256 (hex) of the compact JSON serialisation of `value`. Struct fields
/// serialise in declaration order and maps are ordered, so this is stable.
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

/// SHA-256 (hex) of raw bytes, used to fingerprint input files.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn make_grid(region: &EvaluationRegion) -> Result<Grid> {
    region.validate()?;
    let dim = region.dim();
    let m = region.grid_points_per_axis;
    let widths: Vec<f64> = (0..dim).map(|j| (region.upper[j] - region.lower[j]) / m as f64).collect();
    let total = m.pow(dim as u32);
    let mut points = Vec::with_capacity(total * dim);
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        for j in 0..dim {
            points.push(region.lower[j] + (idx[j] as f64 + 0.5) * widths[j]);
        }
        // last axis varies fastest
        for j in (0..dim).rev() {
            idx[j] += 1;
            if idx[j] < m {
                break;
            }
            idx[j] = 0;
        }
    }
    let weight = widths.iter().product();
    let fingerprint = fingerprint_points(&points, weight);
    Ok(Grid {
        dim,
        points_per_axis: m,
        points,
        weight,
        lower: region.lower.clone(),
        upper: region.upper.clone(),
        fingerprint,
    })
}

/// Random balanced assignment of units to folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossFitPlan {
    pub n: usize,
    pub folds: usize,
    pub assignment: Vec<usize>,
}

impl CrossFitPlan {
    pub fn fold_members(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.folds];
        for &f in &self.assignment {
            s[f] += 1;
        }
        s
    }
}

pub fn make_crossfit_plan(n: usize, folds: usize, seed: &SeedPolicy) -> Result<CrossFitPlan> {
    if folds < 2 {
        return Err(Error::InvalidPlan(format!("need at least 2 folds, got {folds}")));
    }
    if n < folds {
        return Err(Error::InvalidPlan(format!("{n} units cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed.stream("folds"));
    let mut assignment = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        assignment[i] = rank % folds;
    }
    Ok(CrossFitPlan { n, folds, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_is_balanced_partition() {
        let p = make_crossfit_plan(10, 5, &SeedPolicy::new(1)).unwrap();
        assert_eq!(p.fold_sizes(), vec![2; 5]);
        let p = make_crossfit_plan(7, 2, &SeedPolicy::new(1)).unwrap();
        let mut s = p.fold_sizes();
        s.sort();
        assert_eq!(s, vec![3, 4]);
        let q = make_crossfit_plan(7, 2, &SeedPolicy::new(1)).unwrap();
        assert_eq!(p, q);
        assert!(matches!(make_crossfit_plan(3, 4, &SeedPolicy::new(1)), Err(Error::InvalidPlan(_))));
        assert!(make_crossfit_plan(3, 1, &SeedPolicy::new(1)).is_err());
    }

    #[test]
    fn grid_weights() {
        let g = make_grid(&EvaluationRegion::new(vec![0.0], vec![1.0], 4).unwrap()).unwrap();
        assert_eq!(g.len(), 4);
        assert!((g.weight - 0.25).abs() < 1e-15);
        assert!((g.point(0)[0] - 0.125).abs() < 1e-15);
        let g = make_grid(&EvaluationRegion::new(vec![0.0, 0.0], vec![1.0, 1.0], 10).unwrap()).unwrap();
        assert_eq!(g.len(), 100);
        assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let g = make_grid(&EvaluationRegion::new(vec![-2.0, -2.0], vec![2.0, 2.0], 8).unwrap()).unwrap();
        assert!((g.weights().iter().sum::<f64>() - 16.0).abs() < 1e-12 * 16.0);
    }

    #[test]
    fn region_rejects_bad_input() {
        assert!(EvaluationRegion::new(vec![1.0], vec![0.0], 4).is_err());
        assert!(EvaluationRegion::new(vec![0.0], vec![1.0], 1).is_err());
        assert!(EvaluationRegion::new(vec![0.0; 4], vec![1.0; 4], 3).is_err());
        let r = EvaluationRegion::new(vec![0.0, 0.0], vec![1.0, 1.0], 3).unwrap();
        assert!(r.clone().with_projection(vec![vec![1.0, 0.0, 0.0]]).is_err());
        assert!(r.with_projection(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let b = ObservationBatch::new(
            1,
            2,
            vec![0.5, -1.25],
            vec![1, 0],
            vec![1.0, 2.0, 3.0, 0.1],
        )
        .unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x0,a,y0,y1\n"));
        let c = ObservationBatch::read_csv(buf.as_slice()).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn batch_invariants() {
        assert!(ObservationBatch::new(1, 1, vec![0.0], vec![1], vec![f64::NAN]).is_err());
        assert!(ObservationBatch::new(1, 1, vec![0.0, 1.0], vec![1], vec![0.0]).is_err());
        let labels = [0i64, 1].into_iter().collect();
        assert!(ObservationBatch::with_labels(1, 1, vec![0.0], vec![2], vec![0.0], labels).is_err());
    }
}
