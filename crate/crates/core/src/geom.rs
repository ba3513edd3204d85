//! Boxes, planar transforms and the least-squares fits behind camera-motion
//! models.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value floor below which a linear system is treated as
/// rank deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned box in continuous pixel coordinates: left, top, width, height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x, y, w, h })
        }
    }

    pub fn from_center(c: Point, w: f64, h: f64) -> Result<Self> {
        BBox::new(c.x - w / 2.0, c.y - h / 2.0, w, h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn with_center(&self, c: Point) -> BBox {
        BBox {
            x: c.x - self.w / 2.0,
            y: c.y - self.h / 2.0,
            w: self.w,
            h: self.h,
        }
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between box centers.
pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    a.center().dist(&b.center())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionModel {
    Translation,
    Similarity,
    Affine,
    Projective,
}

impl MotionModel {
    pub const ALL: [MotionModel; 4] = [
        MotionModel::Translation,
        MotionModel::Similarity,
        MotionModel::Affine,
        MotionModel::Projective,
    ];

    pub fn min_samples(self) -> usize {
        match self {
            MotionModel::Translation => 1,
            MotionModel::Similarity => 2,
            MotionModel::Affine => 3,
            MotionModel::Projective => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionModel::Translation => "translation",
            MotionModel::Similarity => "similarity",
            MotionModel::Affine => "affine",
            MotionModel::Projective => "projective",
        }
    }

    fn rank(self) -> u8 {
        self as u8
    }
}

impl std::str::FromStr for MotionModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MotionModel::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown motion model {s:?}")))
    }
}

/// Homogeneous 3×3 planar transform tagged with its model class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform2D {
    model: MotionModel,
    m: [[f64; 3]; 3],
}

impl Transform2D {
    pub fn identity() -> Self {
        Transform2D {
            model: MotionModel::Translation,
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Transform2D {
            model: MotionModel::Translation,
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
        }
    }

    /// Scaled rotation by `angle` radians followed by a shift.
    pub fn similarity(scale: f64, angle: f64, dx: f64, dy: f64) -> Result<Self> {
        let (s, c) = angle.sin_cos();
        Transform2D::from_matrix(
            MotionModel::Similarity,
            [[scale * c, -scale * s, dx], [scale * s, scale * c, dy], [0.0, 0.0, 1.0]],
        )
    }

    pub fn affine(a: [[f64; 3]; 2]) -> Result<Self> {
        Transform2D::from_matrix(MotionModel::Affine, [a[0], a[1], [0.0, 0.0, 1.0]])
    }

    /// Builds a transform after checking the invariants of `model`.
    pub fn from_matrix(model: MotionModel, m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite transform entry".into()));
        }
        let t = Transform2D { model, m };
        if t.det().abs() < 1e-12 {
            return Err(Error::Degenerate("transform matrix is singular".into()));
        }
        if model != MotionModel::Projective && m[2] != [0.0, 0.0, 1.0] {
            return Err(Error::Degenerate(format!(
                "{} transform must have bottom row (0, 0, 1)",
                model.name()
            )));
        }
        match model {
            MotionModel::Translation => {
                if m[0][0] != 1.0 || m[0][1] != 0.0 || m[1][0] != 0.0 || m[1][1] != 1.0 {
                    return Err(Error::Degenerate("translation must have identity linear part".into()));
                }
            }
            MotionModel::Similarity => {
                let tol = 1e-9 * (m[0][0].abs() + m[0][1].abs()).max(1.0);
                if (m[0][0] - m[1][1]).abs() > tol || (m[0][1] + m[1][0]).abs() > tol {
                    return Err(Error::Degenerate("similarity linear part must be a scaled rotation".into()));
                }
            }
            _ => {}
        }
        Ok(t)
    }

    pub fn model(&self) -> MotionModel {
        self.model
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    fn det(&self) -> f64 {
        self.as_na().determinant()
    }

    fn as_na(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.m[r][c])
    }

    fn from_na(model: MotionModel, m: &Matrix3<f64>) -> Self {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        if model != MotionModel::Projective {
            out[2] = [0.0, 0.0, 1.0];
        }
        if model == MotionModel::Translation {
            out[0][0] = 1.0;
            out[0][1] = 0.0;
            out[1][0] = 0.0;
            out[1][1] = 1.0;
        }
        Transform2D { model, m: out }
    }

    pub fn apply(&self, p: Point) -> Result<Point> {
        let m = &self.m;
        let xp = m[0][0] * p.x + m[0][1] * p.y + m[0][2];
        let yp = m[1][0] * p.x + m[1][1] * p.y + m[1][2];
        let wp = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        if wp.abs() < 1e-9 {
            return Err(Error::DegenerateProjection(wp));
        }
        Ok(Point::new(xp / wp, yp / wp))
    }

    /// `self · first`: applies `first`, then `self`.
    pub fn compose(&self, first: &Transform2D) -> Transform2D {
        let model = if self.model.rank() >= first.model.rank() {
            self.model
        } else {
            first.model
        };
        Transform2D::from_na(model, &(self.as_na() * first.as_na()))
    }

    pub fn inverse(&self) -> Result<Transform2D> {
        let inv = self
            .as_na()
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("transform is not invertible".into()))?;
        Ok(Transform2D::from_na(self.model, &inv))
    }
}

/// Mean distance between the images of the four frame corners under two
/// transforms.
pub fn mean_corner_distance(a: &Transform2D, b: &Transform2D, width: f64, height: f64) -> Result<f64> {
    let corners = frame_corners(width, height);
    let mut total = 0.0;
    for c in corners {
        total += a.apply(c)?.dist(&b.apply(c)?);
    }
    Ok(total / 4.0)
}

pub(crate) fn frame_corners(width: f64, height: f64) -> [Point; 4] {
    [
        Point::new(0.0, 0.0),
        Point::new(width, 0.0),
        Point::new(0.0, height),
        Point::new(width, height),
    ]
}

/// Similarity that moves the centroid to the origin and scales the mean
/// distance to √2.
fn normalizer(points: impl Iterator<Item = Point> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = points.map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform_point(m: &Matrix3<f64>, p: Point) -> Point {
    let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
    Point::new(
        (m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)]) / w,
        (m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)]) / w,
    )
}

fn check_rank(singular: &DVector<f64>, what: &str) -> Result<()> {
    let max = singular.max();
    let min = singular.min();
    if !(max > 0.0) || min < RANK_TOL * max {
        return Err(Error::Degenerate(format!("rank-deficient {what} system")));
    }
    Ok(())
}

/// Solves the linear least-squares system `a · x = b` with an SVD rank check.
fn lstsq(a: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let svd = a.svd(true, true);
    check_rank(&svd.singular_values, what)?;
    svd.solve(&b, 0.0).map_err(|e| Error::Degenerate(e.to_string()))
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn has_collinear_triple(points: &[Point]) -> bool {
    let scale = points.iter().map(|p| p.x.abs().max(p.y.abs())).fold(1.0, f64::max);
    let tol = 1e-9 * scale * scale;
    let n = points.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if cross(points[i], points[j], points[k]).abs() <= tol {
                    return true;
                }
            }
        }
    }
    false
}

/// Least-squares fit of a `model` transform mapping `pairs[i].0` onto
/// `pairs[i].1`.
pub fn fit(model: MotionModel, pairs: &[(Point, Point)]) -> Result<Transform2D> {
    if pairs.len() < model.min_samples() {
        return Err(Error::InsufficientMatches {
            model: model.name(),
            needed: model.min_samples(),
            got: pairs.len(),
        });
    }
    if pairs
        .iter()
        .any(|(a, b)| ![a.x, a.y, b.x, b.y].iter().all(|v| v.is_finite()))
    {
        return Err(Error::Degenerate("non-finite correspondence".into()));
    }
    match model {
        MotionModel::Translation => {
            let n = pairs.len() as f64;
            let (dx, dy) = pairs
                .iter()
                .fold((0.0, 0.0), |(sx, sy), (a, b)| (sx + b.x - a.x, sy + b.y - a.y));
            Ok(Transform2D::translation(dx / n, dy / n))
        }
        MotionModel::Similarity => fit_similarity(pairs),
        MotionModel::Affine => fit_affine(pairs),
        MotionModel::Projective => fit_projective(pairs),
    }
}

fn normalized_pairs(pairs: &[(Point, Point)]) -> (Matrix3<f64>, Matrix3<f64>, Vec<(Point, Point)>) {
    let ns = normalizer(pairs.iter().map(|p| p.0));
    let nd = normalizer(pairs.iter().map(|p| p.1));
    let norm = pairs
        .iter()
        .map(|(a, b)| (transform_point(&ns, *a), transform_point(&nd, *b)))
        .collect();
    (ns, nd, norm)
}

fn denormalize(model: MotionModel, ns: &Matrix3<f64>, nd: &Matrix3<f64>, h: &Matrix3<f64>) -> Result<Transform2D> {
    let nd_inv = nd
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("normalization is singular".into()))?;
    let mut full = nd_inv * h * ns;
    if model == MotionModel::Projective {
        let s = full[(2, 2)];
        if s.abs() > 1e-15 {
            full /= s;
        }
    }
    let t = Transform2D::from_na(model, &full);
    if !t.as_na().iter().all(|v| v.is_finite()) || t.det().abs() < 1e-12 {
        return Err(Error::Degenerate(format!("fitted {} transform is singular", model.name())));
    }
    Ok(t)
}

fn fit_similarity(pairs: &[(Point, Point)]) -> Result<Transform2D> {
    let (ns, nd, norm) = normalized_pairs(pairs);
    let n = norm.len();
    let mut a = DMatrix::zeros(2 * n, 4);
    let mut b = DVector::zeros(2 * n);
    for (i, (p, q)) in norm.iter().enumerate() {
        a.row_mut(2 * i).copy_from_slice(&[p.x, -p.y, 1.0, 0.0]);
        a.row_mut(2 * i + 1).copy_from_slice(&[p.y, p.x, 0.0, 1.0]);
        b[2 * i] = q.x;
        b[2 * i + 1] = q.y;
    }
    let x = lstsq(a, b, "similarity")?;
    if x[0].hypot(x[1]) < RANK_TOL {
        return Err(Error::Degenerate("similarity scale collapsed to zero".into()));
    }
    let h = Matrix3::new(x[0], -x[1], x[2], x[1], x[0], x[3], 0.0, 0.0, 1.0);
    let t = denormalize(MotionModel::Similarity, &ns, &nd, &h)?;
    // Denormalization is a product of similarities; re-symmetrize rounding.
    let m = t.m;
    let (a0, b0) = ((m[0][0] + m[1][1]) / 2.0, (m[1][0] - m[0][1]) / 2.0);
    Ok(Transform2D {
        model: MotionModel::Similarity,
        m: [[a0, -b0, m[0][2]], [b0, a0, m[1][2]], [0.0, 0.0, 1.0]],
    })
}

fn fit_affine(pairs: &[(Point, Point)]) -> Result<Transform2D> {
    let (ns, nd, norm) = normalized_pairs(pairs);
    let n = norm.len();
    let a = DMatrix::from_fn(n, 3, |r, c| match c {
        0 => norm[r].0.x,
        1 => norm[r].0.y,
        _ => 1.0,
    });
    let svd = a.svd(true, true);
    check_rank(&svd.singular_values, "affine")?;
    let bx = DVector::from_fn(n, |r, _| norm[r].1.x);
    let by = DVector::from_fn(n, |r, _| norm[r].1.y);
    let rx = svd.solve(&bx, 0.0).map_err(|e| Error::Degenerate(e.to_string()))?;
    let ry = svd.solve(&by, 0.0).map_err(|e| Error::Degenerate(e.to_string()))?;
    let h = Matrix3::new(rx[0], rx[1], rx[2], ry[0], ry[1], ry[2], 0.0, 0.0, 1.0);
    denormalize(MotionModel::Affine, &ns, &nd, &h)
}

fn fit_projective(pairs: &[(Point, Point)]) -> Result<Transform2D> {
    if pairs.len() == 4 {
        let src: Vec<Point> = pairs.iter().map(|p| p.0).collect();
        let dst: Vec<Point> = pairs.iter().map(|p| p.1).collect();
        if has_collinear_triple(&src) || has_collinear_triple(&dst) {
            return Err(Error::Degenerate("three collinear points in projective sample".into()));
        }
    }
    let (ns, nd, norm) = normalized_pairs(pairs);
    let n = norm.len();
    // Pad to at least 9 rows so the SVD exposes the full right null space.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::zeros(rows, 9);
    for (i, (p, q)) in norm.iter().enumerate() {
        a.row_mut(2 * i)
            .copy_from_slice(&[-p.x, -p.y, -1.0, 0.0, 0.0, 0.0, q.x * p.x, q.x * p.y, q.x]);
        a.row_mut(2 * i + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -p.x, -p.y, -1.0, q.y * p.x, q.y * p.y, q.y]);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("svd failed".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let largest = sv[order[0]];
    if sv[order[7]] < RANK_TOL * largest {
        return Err(Error::Degenerate("rank-deficient projective system".into()));
    }
    let h = v_t.row(order[8]);
    let hm = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t = denormalize(MotionModel::Projective, &ns, &nd, &hm)?;
    if n > 4 {
        Ok(refine_projective(t, pairs))
    } else {
        Ok(t)
    }
}

fn reprojection_sse(t: &Transform2D, pairs: &[(Point, Point)]) -> f64 {
    pairs
        .iter()
        .map(|(a, b)| match t.apply(*a) {
            Ok(p) => (p.x - b.x).powi(2) + (p.y - b.y).powi(2),
            Err(_) => f64::INFINITY,
        })
        .sum()
}

/// Gauss-Newton on geometric reprojection error, starting from the DLT
/// solution (h33 fixed to 1).
fn refine_projective(start: Transform2D, pairs: &[(Point, Point)]) -> Transform2D {
    let mut best = start;
    let mut best_err = reprojection_sse(&best, pairs);
    for _ in 0..10 {
        let m = best.m;
        let h = [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1]];
        let mut jtj = SMatrix::<f64, 8, 8>::zeros();
        let mut jtr = SVector::<f64, 8>::zeros();
        for (a, b) in pairs {
            let w = h[6] * a.x + h[7] * a.y + 1.0;
            let u = h[0] * a.x + h[1] * a.y + h[2];
            let v = h[3] * a.x + h[4] * a.y + h[5];
            let (px, py) = (u / w, v / w);
            let jx = SVector::<f64, 8>::from_column_slice(&[
                a.x / w,
                a.y / w,
                1.0 / w,
                0.0,
                0.0,
                0.0,
                -px * a.x / w,
                -px * a.y / w,
            ]);
            let jy = SVector::<f64, 8>::from_column_slice(&[
                0.0,
                0.0,
                0.0,
                a.x / w,
                a.y / w,
                1.0 / w,
                -py * a.x / w,
                -py * a.y / w,
            ]);
            jtj += jx * jx.transpose() + jy * jy.transpose();
            jtr += jx * (b.x - px) + jy * (b.y - py);
        }
        let Some(step) = jtj.lu().solve(&jtr) else { break };
        let cand = [
            [h[0] + step[0], h[1] + step[1], h[2] + step[2]],
            [h[3] + step[3], h[4] + step[4], h[5] + step[5]],
            [h[6] + step[6], h[7] + step[7], 1.0],
        ];
        let Ok(t) = Transform2D::from_matrix(MotionModel::Projective, cand) else { break };
        let err = reprojection_sse(&t, pairs);
        if err < best_err {
            let done = best_err - err < 1e-14 * (1.0 + best_err);
            best = t;
            best_err = err;
            if done {
                break;
            }
        } else {
            break;
        }
    }
    best
}
