//! Finite-support measures, ground metrics and stochastic kernels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Points closer than this (Euclidean) are the same point.
pub const POINT_TOL: f64 = 1e-12;
/// Normalized weights below this are dropped.
pub const WEIGHT_FLOOR: f64 = 1e-15;

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    sq_dist(x, y).sqrt()
}

fn same_point(x: &[f64], y: &[f64]) -> bool {
    sq_dist(x, y) <= POINT_TOL * POINT_TOL
}

fn find_point(points: &[Vec<f64>], x: &[f64]) -> Option<usize> {
    points.iter().position(|p| same_point(p, x))
}

#[derive(Deserialize)]
struct RawMeasure {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    #[serde(default = "default_true")]
    is_probability: bool,
}

fn default_true() -> bool {
    true
}

impl TryFrom<RawMeasure> for DiscreteMeasure {
    type Error = Error;

    fn try_from(raw: RawMeasure) -> Result<Self> {
        DiscreteMeasure::new(raw.points, raw.weights, raw.is_probability)
    }
}

/// A measure with finitely many atoms in `R^d`.
///
/// Duplicate points are merged by summing their weights, and probability
/// measures are normalized with negligible atoms removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMeasure")]
pub struct DiscreteMeasure {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    is_probability: bool,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>, is_probability: bool) -> Result<Self> {
        if points.is_empty() {
            return invalid("a measure needs at least one point");
        }
        if points.len() != weights.len() {
            return invalid(format!("{} points but {} weights", points.len(), weights.len()));
        }
        let d = points[0].len();
        if d == 0 {
            return invalid("points must have at least one coordinate");
        }
        for p in &points {
            if p.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: p.len(),
                });
            }
            if p.iter().any(|c| !c.is_finite()) {
                return invalid("point coordinates must be finite");
            }
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid("weights must be finite and nonnegative");
        }

        let mut merged_points: Vec<Vec<f64>> = Vec::with_capacity(points.len());
        let mut merged_weights: Vec<f64> = Vec::with_capacity(points.len());
        for (p, w) in points.into_iter().zip(weights) {
            match find_point(&merged_points, &p) {
                Some(k) => merged_weights[k] += w,
                None => {
                    merged_points.push(p);
                    merged_weights.push(w);
                }
            }
        }

        let total: f64 = merged_weights.iter().sum();
        if !(total > 0.0) {
            return invalid("total mass must be positive");
        }
        if is_probability {
            if (total - 1.0).abs() > 1e-6 {
                return invalid(format!("probability weights sum to {total}, not 1"));
            }
            let mut kept_points = Vec::with_capacity(merged_points.len());
            let mut kept_weights = Vec::with_capacity(merged_points.len());
            for (p, w) in merged_points.into_iter().zip(merged_weights) {
                if w / total >= WEIGHT_FLOOR {
                    kept_points.push(p);
                    kept_weights.push(w);
                }
            }
            let kept: f64 = kept_weights.iter().sum();
            for w in &mut kept_weights {
                *w /= kept;
            }
            merged_points = kept_points;
            merged_weights = kept_weights;
        }
        Ok(DiscreteMeasure {
            points: merged_points,
            weights: merged_weights,
            is_probability,
        })
    }

    pub fn probability(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        Self::new(points, weights, true)
    }

    /// Probability measure proportional to the given nonnegative weights.
    pub fn normalized(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return invalid("weights must have a positive finite total");
        }
        Self::new(points, weights.into_iter().map(|w| w / total).collect(), true)
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self> {
        Self::new(vec![point], vec![1.0], true)
    }

    /// Uniform weights on the rows of `samples`; repeated rows accumulate mass.
    pub fn empirical(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.is_empty() {
            return invalid("empirical measure of an empty sample");
        }
        let w = 1.0 / samples.len() as f64;
        Self::normalized(samples.to_vec(), vec![w; samples.len()])
    }

    /// Points on the real line.
    pub fn on_line(xs: &[f64], weights: &[f64]) -> Result<Self> {
        Self::probability(xs.iter().map(|&x| vec![x]).collect(), weights.to_vec())
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_probability(&self) -> bool {
        self.is_probability
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Mass at `x`, zero off the support.
    pub fn weight_at(&self, x: &[f64]) -> f64 {
        find_point(&self.points, x).map_or(0.0, |k| self.weights[k])
    }

    pub fn expectation(&self, g: impl Fn(&[f64]) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| w * g(p)).sum()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// CSV rows `x1, ..., xd, w`; a non-numeric first row is taken as a header.
    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let rows = read_numeric_csv(reader)?;
        if rows.is_empty() {
            return invalid("empty measure CSV");
        }
        let mut points = Vec::with_capacity(rows.len());
        let mut weights = Vec::with_capacity(rows.len());
        for row in rows {
            if row.len() < 2 {
                return invalid("measure CSV rows need at least one coordinate and a weight");
            }
            let (w, x) = row.split_last().expect("nonempty row");
            points.push(x.to_vec());
            weights.push(*w);
        }
        Self::probability(points, weights)
    }

    /// Loads JSON (`.json`) or CSV (anything else).
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json_str(&std::fs::read_to_string(path)?)
        } else {
            Self::from_csv_reader(std::fs::File::open(path)?)
        }
    }
}

/// Parses a headerless-or-headed CSV of numbers into rows.
pub(crate) fn read_numeric_csv(reader: impl std::io::Read) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(_) => return invalid(format!("non-numeric CSV row {}", i + 1)),
        }
    }
    if let Some(first) = rows.first() {
        let width = first.len();
        if rows.iter().any(|r| r.len() != width) {
            return invalid("CSV rows have differing lengths");
        }
    }
    Ok(rows)
}

/// Both measures written on their common (union) support.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSupport {
    /// Support of `Q` in its own order, then the points only `P` charges.
    pub points: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl JointSupport {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// True when `Q` charges a point that `P` does not.
    pub fn q_not_abs_continuous(&self) -> bool {
        self.q.iter().zip(&self.p).any(|(&q, &p)| q > 0.0 && p == 0.0)
    }
}

pub fn joint_support(q: &DiscreteMeasure, p: &DiscreteMeasure) -> Result<JointSupport> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            found: p.dim(),
        });
    }
    let mut points = q.points().to_vec();
    let mut qw = q.weights().to_vec();
    let mut pw = vec![0.0; points.len()];
    for (x, &w) in p.points().iter().zip(p.weights()) {
        match find_point(&points, x) {
            Some(k) => pw[k] += w,
            None => {
                points.push(x.clone());
                qw.push(0.0);
                pw.push(w);
            }
        }
    }
    Ok(JointSupport { points, q: qw, p: pw })
}

/// Ground cost `c(x, y)` on the support points.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetricSpec {
    #[default]
    Euclidean,
    /// Symmetric matrix indexed by `points`.
    Explicit {
        points: Vec<Vec<f64>>,
        matrix: Vec<Vec<f64>>,
    },
}

impl MetricSpec {
    /// Validates symmetry, a zero diagonal, nonnegativity and the triangle
    /// inequality on all triples (with `1e-12` slack).
    pub fn explicit(points: Vec<Vec<f64>>, matrix: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
            return invalid(format!("metric matrix must be {n}x{n}"));
        }
        for i in 0..n {
            if matrix[i][i] != 0.0 {
                return invalid("metric matrix needs a zero diagonal");
            }
            for j in 0..n {
                let c = matrix[i][j];
                if !(c.is_finite() && c >= 0.0) {
                    return invalid("metric entries must be finite and nonnegative");
                }
                if (c - matrix[j][i]).abs() > 1e-12 {
                    return invalid("metric matrix must be symmetric");
                }
                if i != j && c == 0.0 {
                    return invalid("distinct points need a positive distance");
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if matrix[i][k] > matrix[i][j] + matrix[j][k] + 1e-12 {
                        return invalid(format!("triangle inequality fails on ({i}, {j}, {k})"));
                    }
                }
            }
        }
        Ok(MetricSpec::Explicit { points, matrix })
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            MetricSpec::Euclidean => Ok(euclidean(x, y)),
            MetricSpec::Explicit { points, matrix } => {
                let i = find_point(points, x)
                    .ok_or_else(|| Error::InvalidInput(format!("point {x:?} missing from the metric")))?;
                let j = find_point(points, y)
                    .ok_or_else(|| Error::InvalidInput(format!("point {y:?} missing from the metric")))?;
                Ok(matrix[i][j])
            }
        }
    }

    /// Cost matrix between two point lists.
    pub fn cost_matrix(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter()
            .map(|x| ys.iter().map(|y| self.distance(x, y)).collect())
            .collect()
    }
}

#[derive(Deserialize)]
struct RawKernel {
    matrix: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    #[serde(default)]
    sources: Option<Vec<Vec<f64>>>,
}

impl TryFrom<RawKernel> for StochasticKernel {
    type Error = Error;

    fn try_from(raw: RawKernel) -> Result<Self> {
        StochasticKernel::new(raw.matrix, raw.targets, raw.sources)
    }
}

/// Row-stochastic matrix from a finite source set to `targets`.
///
/// Rows follow `sources` when given, else the support order of whichever
/// measure the kernel is applied to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernel")]
pub struct StochasticKernel {
    matrix: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    sources: Option<Vec<Vec<f64>>>,
}

impl StochasticKernel {
    pub fn new(matrix: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, sources: Option<Vec<Vec<f64>>>) -> Result<Self> {
        if matrix.is_empty() || targets.is_empty() {
            return invalid("kernel needs at least one row and one target");
        }
        let m = targets.len();
        let d = targets[0].len();
        if targets.iter().any(|t| t.len() != d) {
            return invalid("kernel targets have differing dimensions");
        }
        for (i, t) in targets.iter().enumerate() {
            if targets[..i].iter().any(|s| same_point(s, t)) {
                return invalid("kernel targets must be distinct");
            }
        }
        if let Some(src) = &sources {
            if src.len() != matrix.len() {
                return invalid("kernel needs one source point per row");
            }
        }
        let mut rows = Vec::with_capacity(matrix.len());
        for row in matrix {
            if row.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    found: row.len(),
                });
            }
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return invalid("kernel entries must be finite and nonnegative");
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return invalid(format!("kernel row sums to {s}, not 1"));
            }
            rows.push(row.into_iter().map(|v| v / s).collect());
        }
        Ok(StochasticKernel {
            matrix: rows,
            targets,
            sources,
        })
    }

    pub fn identity(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        let matrix = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(matrix, points, None)
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.matrix
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn sources(&self) -> Option<&[Vec<f64>]> {
        self.sources.as_deref()
    }

    pub fn rows(&self) -> usize {
        self.matrix.len()
    }

    /// Kernel row used for each point of `pts`.
    pub fn row_indices(&self, pts: &[Vec<f64>]) -> Result<Vec<usize>> {
        match &self.sources {
            Some(src) => pts
                .iter()
                .map(|x| {
                    find_point(src, x)
                        .ok_or_else(|| Error::InvalidInput(format!("point {x:?} is not a kernel source")))
                })
                .collect(),
            None => {
                if pts.len() != self.rows() {
                    return Err(Error::DimensionMismatch {
                        expected: self.rows(),
                        found: pts.len(),
                    });
                }
                Ok((0..pts.len()).collect())
            }
        }
    }

    /// `K[g](x) = Σ_y K(x, y) g(y)` for a function `g` on the targets.
    pub fn apply(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.targets.len() {
            return Err(Error::DimensionMismatch {
                expected: self.targets.len(),
                found: g.len(),
            });
        }
        Ok(self
            .matrix
            .iter()
            .map(|row| row.iter().zip(g).map(|(k, v)| k * v).sum())
            .collect())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Weights of `K[Q]` on every kernel target (zeros kept).
pub fn pushforward_weights(q: &DiscreteMeasure, k: &StochasticKernel) -> Result<Vec<f64>> {
    let rows = k.row_indices(q.points())?;
    let mut out = vec![0.0; k.targets().len()];
    for (&r, &w) in rows.iter().zip(q.weights()) {
        for (o, kv) in out.iter_mut().zip(&k.matrix()[r]) {
            *o += w * kv;
        }
    }
    Ok(out)
}

/// The marginal `K[Q]` on the kernel targets.
pub fn pushforward(q: &DiscreteMeasure, k: &StochasticKernel) -> Result<DiscreteMeasure> {
    let w = pushforward_weights(q, k)?;
    DiscreteMeasure::new(k.targets().to_vec(), w, q.is_probability())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(xs: &[f64], ws: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::on_line(xs, ws).unwrap()
    }

    #[test]
    fn joint_support_examples() {
        let js = joint_support(&line(&[0.0], &[1.0]), &line(&[1.0], &[1.0])).unwrap();
        assert_eq!(js.points, vec![vec![0.0], vec![1.0]]);
        assert_eq!((js.q.clone(), js.p.clone()), (vec![1.0, 0.0], vec![0.0, 1.0]));
        assert!(js.q_not_abs_continuous());

        let q = line(&[0.0, 1.0], &[0.5, 0.5]);
        let same = joint_support(&q, &q).unwrap();
        assert_eq!(same.q, same.p);
        assert_eq!(same.len(), 2);

        let js = joint_support(&q, &line(&[1.0, 2.0], &[0.5, 0.5])).unwrap();
        assert_eq!(js.len(), 3);
        assert_eq!(js.q, vec![0.5, 0.5, 0.0]);
        assert_eq!(js.p, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn joint_support_dimension_mismatch() {
        let a = line(&[0.0], &[1.0]);
        let b = DiscreteMeasure::dirac(vec![0.0, 1.0]).unwrap();
        assert!(matches!(joint_support(&a, &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn duplicates_merge_and_tiny_weights_drop() {
        let m = DiscreteMeasure::probability(
            vec![vec![0.0], vec![1e-14], vec![2.0], vec![3.0]],
            vec![0.25, 0.25, 0.5, 1e-17],
        )
        .unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn rejects_bad_measures() {
        assert!(DiscreteMeasure::probability(vec![vec![0.0]], vec![0.5]).is_err());
        assert!(DiscreteMeasure::probability(vec![vec![0.0], vec![1.0]], vec![1.5, -0.5]).is_err());
        assert!(DiscreteMeasure::probability(vec![vec![0.0], vec![1.0, 2.0]], vec![0.5, 0.5]).is_err());
        assert!(DiscreteMeasure::probability(vec![], vec![]).is_err());
    }

    #[test]
    fn pushforward_examples() {
        let pts = vec![vec![0.0], vec![1.0]];
        let q = line(&[0.0, 1.0], &[0.3, 0.7]);
        let id = StochasticKernel::identity(pts.clone()).unwrap();
        assert_eq!(pushforward(&q, &id).unwrap(), q);

        let dirac = line(&[0.0], &[1.0]);
        let k = StochasticKernel::new(vec![vec![0.5, 0.5], vec![0.0, 1.0]], pts.clone(), Some(pts.clone())).unwrap();
        assert_eq!(pushforward_weights(&dirac, &k).unwrap(), vec![0.5, 0.5]);

        let collapse = StochasticKernel::new(vec![vec![1.0, 0.0], vec![1.0, 0.0]], pts, None).unwrap();
        let w = pushforward_weights(&q, &collapse).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-15 && w[1] == 0.0);
        let m = pushforward(&q, &collapse).unwrap();
        assert_eq!(m.weight_at(&[0.0]), 1.0);
        assert_eq!(m.weight_at(&[1.0]), 0.0);
    }

    #[test]
    fn kernel_validation() {
        let t = vec![vec![0.0], vec![1.0]];
        assert!(StochasticKernel::new(vec![vec![0.5, 0.6]], t.clone(), None).is_err());
        assert!(StochasticKernel::new(vec![vec![1.5, -0.5]], t.clone(), None).is_err());
        assert!(StochasticKernel::new(vec![vec![1.0]], t, None).is_err());
    }

    #[test]
    fn explicit_metric_validation() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        let good = vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 1.0], vec![2.0, 1.0, 0.0]];
        let m = MetricSpec::explicit(pts.clone(), good).unwrap();
        assert_eq!(m.distance(&[0.0], &[2.0]).unwrap(), 2.0);
        assert!(m.distance(&[0.0], &[5.0]).is_err());
        let bad = vec![vec![0.0, 1.0, 3.0], vec![1.0, 0.0, 1.0], vec![3.0, 1.0, 0.0]];
        assert!(MetricSpec::explicit(pts, bad).is_err());
    }

    #[test]
    fn json_and_csv_formats() {
        let m = DiscreteMeasure::from_json_str(r#"{"points": [[0,1],[2,3]], "weights": [0.25, 0.75]}"#).unwrap();
        assert_eq!(m.dim(), 2);
        assert_eq!(m.weight_at(&[2.0, 3.0]), 0.75);
        let c = DiscreteMeasure::from_csv_reader("x1,x2,w\n0,1,0.25\n2,3,0.75\n".as_bytes()).unwrap();
        assert_eq!(c, m);
        let k = StochasticKernel::from_json_str(r#"{"matrix": [[1,0],[0.5,0.5]], "targets": [[0],[1]]}"#).unwrap();
        assert_eq!(k.rows(), 2);
        assert!(DiscreteMeasure::from_json_str(r#"{"points": [[0]], "weights": [2]}"#).is_err());
    }

    proptest! {
        #[test]
        fn pushforward_preserves_mass(
            w in prop::collection::vec(0.01f64..1.0, 2..6),
            k in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 6),
        ) {
            let n = w.len();
            let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
            let q = DiscreteMeasure::normalized(pts, w).unwrap();
            let rows: Vec<Vec<f64>> = k[..n].iter().map(|r| {
                let s: f64 = r.iter().sum::<f64>() + 1e-3;
                r.iter().map(|v| (v + 1e-3 / 3.0) / s).collect()
            }).collect();
            let kernel = StochasticKernel::new(rows, vec![vec![0.0], vec![1.0], vec![2.0]], None).unwrap();
            let mass: f64 = pushforward_weights(&q, &kernel).unwrap().iter().sum();
            prop_assert!((mass - 1.0).abs() < 1e-12);
        }

        #[test]
        fn joint_support_is_symmetric(
            a in prop::collection::vec(-3i32..3, 1..5),
            b in prop::collection::vec(-3i32..3, 1..5),
        ) {
            let mk = |xs: &[i32]| DiscreteMeasure::empirical(
                &xs.iter().map(|&x| vec![x as f64]).collect::<Vec<_>>()).unwrap();
            let (qa, pb) = (mk(&a), mk(&b));
            let ab = joint_support(&qa, &pb).unwrap();
            let ba = joint_support(&pb, &qa).unwrap();
            prop_assert_eq!(ab.len(), ba.len());
            for (i, x) in ab.points.iter().enumerate() {
                let j = ba.points.iter().position(|y| y == x).unwrap();
                prop_assert_eq!(ab.q[i], ba.p[j]);
                prop_assert_eq!(ab.p[i], ba.q[j]);
            }
        }
    }
}
