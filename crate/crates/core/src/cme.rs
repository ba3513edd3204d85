//! Camera-motion estimation between consecutive frames: corner detection,
//! patch descriptors, mutual nearest-neighbor matching, robust model fitting,
//! plus the gates that decide when to run it and how to use the result.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{fit, frame_corners, BBox, MotionModel, Point, Transform2D};
use crate::img::{frame_diff_ratio, to_gray, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Thermal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmeConfig {
    pub model: MotionModel,
    /// Which stream the estimator runs on.
    pub modality: Modality,
    pub max_keypoints: usize,
    pub harris_k: f64,
    /// Corners must exceed this fraction of the strongest response.
    pub rel_threshold: f64,
    pub ratio: f64,
    pub iters: usize,
    pub tau: f64,
    pub seed: u64,
    /// Matches required before fitting; fewer yields the identity fallback.
    pub min_matches: usize,
    pub gate_pixel: f64,
    pub gate_ratio: f64,
    /// Mean corner displacement, as a fraction of the frame diagonal, above
    /// which motion counts as drastic.
    pub drastic_frac: f64,
}

impl Default for CmeConfig {
    fn default() -> Self {
        CmeConfig {
            model: MotionModel::Affine,
            modality: Modality::Thermal,
            max_keypoints: 300,
            harris_k: 0.04,
            rel_threshold: 1e-4,
            ratio: 0.8,
            iters: 500,
            tau: 3.0,
            seed: 0,
            min_matches: 8,
            gate_pixel: 0.1,
            gate_ratio: 0.05,
            drastic_frac: 0.2,
        }
    }
}

impl CmeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("cme.{m}")));
        if self.max_keypoints == 0 || self.iters == 0 {
            return bad("max_keypoints and iters must be positive");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return bad("ratio must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gate_ratio) || !(0.0..=1.0).contains(&self.gate_pixel) {
            return bad("gate thresholds must lie in [0, 1]");
        }
        if !(self.drastic_frac > 0.0) {
            return bad("drastic_frac must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Continuous coordinates (pixel `i` spans `[i, i+1)`).
    pub pos: Point,
    pub response: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub reference: Point,
    pub search: Point,
    pub distance: f64,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let at = |x: isize, y: isize, p: &[f64]| p[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    let mut tmp = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            tmp[y as usize * w + x as usize] = k.iter().enumerate().map(|(i, kv)| kv * at(x + i as isize - r, y, plane)).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] = k.iter().enumerate().map(|(i, kv)| kv * at(x, y + i as isize - r, &tmp)).sum();
        }
    }
    out
}

/// Corner response map `det(M) − k·tr(M)²` of the Gaussian-smoothed
/// structure tensor.
pub fn harris_response(img: &Image, k: f64) -> Vec<f64> {
    let g = to_gray(img);
    let (w, h) = (g.width(), g.height());
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let gx = 0.5 * (g.get_clamped(xi + 1, yi, 0) - g.get_clamped(xi - 1, yi, 0));
            let gy = 0.5 * (g.get_clamped(xi, yi + 1, 0) - g.get_clamped(xi, yi - 1, 0));
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let kern = gaussian_kernel(1.0);
    let (sxx, syy, sxy) = (blur(&ixx, w, h, &kern), blur(&iyy, w, h, &kern), blur(&ixy, w, h, &kern));
    (0..w * h)
        .map(|i| {
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - k * tr * tr
        })
        .collect()
}

fn parabolic(l: f64, c: f64, r: f64) -> f64 {
    let d = l - 2.0 * c + r;
    if d < 0.0 {
        (0.5 * (l - r) / d).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Harris corners after 3×3 non-maximum suppression, strongest first.
pub fn detect(img: &Image, max_n: usize, cfg: &CmeConfig) -> Vec<Keypoint> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return vec![];
    }
    let r = harris_response(img, cfg.harris_k);
    let peak = r.iter().copied().fold(0.0, f64::max);
    let thresh = (cfg.rel_threshold * peak).max(1e-12);
    let mut out = vec![];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = r[y * w + x];
            if c <= thresh {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let v = r[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                    // ties go to the first pixel in raster order
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if v > c || (earlier && v == c) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                let ox = parabolic(r[y * w + x - 1], c, r[y * w + x + 1]);
                let oy = parabolic(r[(y - 1) * w + x], c, r[(y + 1) * w + x]);
                out.push(Keypoint {
                    pos: Point::new(x as f64 + 0.5 + ox, y as f64 + 0.5 + oy),
                    response: c,
                });
            }
        }
    }
    out.sort_by(|a, b| b.response.total_cmp(&a.response));
    out.truncate(max_n);
    out
}

pub const DESC_SIDE: usize = 16;

/// Mean-subtracted, L2-normalized 16×16 patch around `kp`; `None` within
/// 8 px of the border.
pub fn describe(img: &Image, kp: &Keypoint) -> Option<Vec<f64>> {
    describe_gray(&to_gray(img), kp)
}

fn describe_gray(g: &Image, kp: &Keypoint) -> Option<Vec<f64>> {
    let half = (DESC_SIDE / 2) as f64;
    let (x, y) = (kp.pos.x, kp.pos.y);
    if x < half || y < half || x > g.width() as f64 - half || y > g.height() as f64 - half {
        return None;
    }
    let mut v = Vec::with_capacity(DESC_SIDE * DESC_SIDE);
    for j in 0..DESC_SIDE {
        for i in 0..DESC_SIDE {
            // continuous x - half + i + 0.5, minus 0.5 for sampling indices
            v.push(g.sample_bilinear(x - half + i as f64, y - half + j as f64, 0));
        }
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|a| *a -= mean);
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 1e-9 {
        v.iter_mut().for_each(|a| *a /= norm);
    } else {
        v.iter_mut().for_each(|a| *a = 0.0);
    }
    Some(v)
}

/// Keypoints that survive the border rule, with their descriptors.
pub fn describe_all(img: &Image, kps: &[Keypoint]) -> (Vec<Keypoint>, Vec<Vec<f64>>) {
    let g = to_gray(img);
    kps.iter().filter_map(|k| describe_gray(&g, k).map(|d| (*k, d))).unzip()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index pairs `(ref, search, distance)` that are mutual nearest neighbors
/// and pass the best/second-best distance ratio test.
pub fn match_descriptors(reference: &[Vec<f64>], search: &[Vec<f64>], ratio: f64) -> Vec<(usize, usize, f64)> {
    if reference.is_empty() || search.is_empty() {
        return vec![];
    }
    let d: Vec<Vec<f64>> = reference.iter().map(|r| search.iter().map(|s| sq_dist(r, s)).collect()).collect();
    let best_in_ref: Vec<usize> = (0..search.len())
        .map(|j| (0..reference.len()).min_by(|&a, &b| d[a][j].total_cmp(&d[b][j])).unwrap())
        .collect();
    let mut out = vec![];
    for (i, row) in d.iter().enumerate() {
        let (mut b1, mut b2) = ((f64::INFINITY, 0), f64::INFINITY);
        for (j, &v) in row.iter().enumerate() {
            if v < b1.0 {
                b2 = b1.0;
                b1 = (v, j);
            } else if v < b2 {
                b2 = v;
            }
        }
        let (best, j) = b1;
        if best_in_ref[j] != i {
            continue;
        }
        let (dist, second) = (best.sqrt(), b2.sqrt());
        if second.is_finite() && dist >= ratio * second {
            continue;
        }
        out.push((i, j, dist));
    }
    out
}

/// Matches between two keypoint sets with their descriptors.
pub fn match_keypoints(
    ref_kp: &[Keypoint],
    ref_desc: &[Vec<f64>],
    cur_kp: &[Keypoint],
    cur_desc: &[Vec<f64>],
    ratio: f64,
) -> Vec<Match> {
    match_descriptors(ref_desc, cur_desc, ratio)
        .into_iter()
        .map(|(i, j, d)| Match {
            reference: ref_kp[i].pos,
            search: cur_kp[j].pos,
            distance: d,
        })
        .collect()
}

fn residual2(t: &Transform2D, m: &Match) -> f64 {
    match t.apply(m.reference) {
        Ok(p) => {
            let (dx, dy) = (p.x - m.search.x, p.y - m.search.y);
            dx * dx + dy * dy
        }
        Err(_) => f64::INFINITY,
    }
}

/// Truncated quadratic loss `Σ min(r², τ²)`.
pub fn msac_score(t: &Transform2D, matches: &[Match], tau: f64) -> f64 {
    matches.iter().map(|m| residual2(t, m).min(tau * tau)).sum()
}

fn inlier_mask(t: &Transform2D, matches: &[Match], tau: f64) -> Vec<bool> {
    matches.iter().map(|m| residual2(t, m) < tau * tau).collect()
}

/// Robust fit of `model` to `matches`: random minimal samples scored by the
/// truncated loss, then a least-squares refit on the winner's inliers. The
/// identity competes as a candidate, so the result never scores worse.
pub fn msac_fit(
    matches: &[Match],
    model: MotionModel,
    iters: usize,
    tau: f64,
    seed: u64,
) -> Result<(Transform2D, Vec<bool>)> {
    let need = model.min_samples();
    if matches.len() < need {
        return Err(Error::InsufficientMatches {
            model: model.name(),
            needed: need,
            got: matches.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity = Transform2D::identity();
    let mut best = (msac_score(&identity, matches, tau), identity);
    let mut any_valid = false;
    for _ in 0..iters {
        let idx = sample(&mut rng, matches.len(), need);
        let pairs: Vec<(Point, Point)> = idx.iter().map(|i| (matches[i].reference, matches[i].search)).collect();
        let Ok(t) = fit(model, &pairs) else { continue };
        any_valid = true;
        let s = msac_score(&t, matches, tau);
        if s < best.0 {
            best = (s, t);
        }
    }
    if !any_valid {
        return Err(Error::Degenerate("every minimal sample was degenerate".into()));
    }
    let (best_score, best_t) = best;
    let mask = inlier_mask(&best_t, matches, tau);
    let inliers: Vec<(Point, Point)> = matches
        .iter()
        .zip(&mask)
        .filter(|(_, &keep)| keep)
        .map(|(m, _)| (m.reference, m.search))
        .collect();
    if inliers.len() >= need {
        if let Ok(refit) = fit(model, &inliers) {
            if msac_score(&refit, matches, tau) <= best_score {
                let mask = inlier_mask(&refit, matches, tau);
                return Ok((refit, mask));
            }
        }
    }
    Ok((best_t, mask))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraMotion {
    /// Maps reference-frame coordinates to current-frame coordinates.
    pub transform: Transform2D,
    /// True when the estimator could not proceed and returned the identity.
    pub fallback: bool,
    pub matches: usize,
    pub inliers: usize,
}

impl CameraMotion {
    fn identity(matches: usize) -> Self {
        CameraMotion {
            transform: Transform2D::identity(),
            fallback: true,
            matches,
            inliers: 0,
        }
    }
}

/// Full estimator: detect, describe, match and fit. Never fails; frames that
/// do not support an estimate yield a flagged identity.
pub fn estimate_camera_motion(reference: &Image, current: &Image, cfg: &CmeConfig) -> CameraMotion {
    if (reference.width(), reference.height()) != (current.width(), current.height()) {
        return CameraMotion::identity(0);
    }
    let (rk, rd) = describe_all(reference, &detect(reference, cfg.max_keypoints, cfg));
    let (ck, cd) = describe_all(current, &detect(current, cfg.max_keypoints, cfg));
    let matches = match_keypoints(&rk, &rd, &ck, &cd, cfg.ratio);
    if matches.len() < cfg.min_matches.max(cfg.model.min_samples()) {
        return CameraMotion::identity(matches.len());
    }
    match msac_fit(&matches, cfg.model, cfg.iters, cfg.tau, cfg.seed) {
        Ok((t, mask)) => {
            let inliers = mask.iter().filter(|&&b| b).count();
            if inliers < cfg.model.min_samples() {
                return CameraMotion::identity(matches.len());
            }
            CameraMotion {
                transform: t,
                fallback: false,
                matches: matches.len(),
                inliers,
            }
        }
        Err(_) => CameraMotion::identity(matches.len()),
    }
}

/// True when the fraction of strongly changed pixels strictly exceeds
/// `ratio_thresh`.
pub fn motion_gate(prev: &Image, cur: &Image, pixel_thresh: f64, ratio_thresh: f64) -> Result<bool> {
    Ok(frame_diff_ratio(prev, cur, pixel_thresh)? > ratio_thresh)
}

/// Mean displacement of the four frame corners under `t`, strictly above
/// `frac` times the frame diagonal.
pub fn drastic_motion(t: &Transform2D, width: f64, height: f64, frac: f64) -> bool {
    let mut total = 0.0;
    for c in frame_corners(width, height) {
        match t.apply(c) {
            Ok(p) => total += p.dist(&c),
            Err(_) => return true,
        }
    }
    total / 4.0 > frac * width.hypot(height)
}

/// Moves the box center by `t`, keeping its size.
pub fn compensate(bbox: &BBox, t: &Transform2D) -> Result<BBox> {
    Ok(bbox.with_center(t.apply(bbox.center())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::mean_corner_distance;
    use crate::img::warp_image;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn texture(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = 6;
        let cw = w / cell + 2;
        let coarse: Vec<f64> = (0..cw * (h / cell + 2)).map(|_| rng.random()).collect();
        Image::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f64 / cell as f64, y as f64 / cell as f64);
            let (x0, y0) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let v = |a: usize, b: usize| coarse[b * cw + a];
            let top = v(x0, y0) * (1.0 - tx) + v(x0 + 1, y0) * tx;
            let bot = v(x0, y0 + 1) * (1.0 - tx) + v(x0 + 1, y0 + 1) * tx;
            top * (1.0 - ty) + bot * ty
        })
    }

    #[test]
    fn constant_image_has_no_corners() {
        assert!(detect(&Image::filled(40, 40, 1, 0.5), 100, &CmeConfig::default()).is_empty());
    }

    #[test]
    fn square_corners_found() {
        let img = Image::from_fn(60, 60, |x, y| if (20..40).contains(&x) && (20..40).contains(&y) { 1.0 } else { 0.0 });
        let kps = detect(&img, 4, &CmeConfig::default());
        assert_eq!(kps.len(), 4);
        for w in kps.windows(2) {
            assert!(w[0].response >= w[1].response);
        }
        for truth in [(20.0, 20.0), (40.0, 20.0), (20.0, 40.0), (40.0, 40.0)] {
            let p = Point::new(truth.0, truth.1);
            let d = kps.iter().map(|k| k.pos.dist(&p)).fold(f64::INFINITY, f64::min);
            assert!(d < 1.0, "corner {truth:?} nearest {d}");
        }
    }

    #[test]
    fn descriptor_contract() {
        let img = texture(64, 64, 1);
        let kp = Keypoint { pos: Point::new(30.3, 31.7), response: 1.0 };
        let d = describe(&img, &kp).unwrap();
        assert_eq!(d, describe(&img, &kp).unwrap());
        let n: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let brighter = Image::from_fn(64, 64, |x, y| img.get(x, y, 0) * 0.8 + 0.1);
        let shifted = Image::from_fn(64, 64, |x, y| img.get(x, y, 0) * 0.8 + 0.15);
        let (a, b) = (describe(&brighter, &kp).unwrap(), describe(&shifted, &kp).unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
        assert!(describe(&img, &Keypoint { pos: Point::new(5.0, 30.0), response: 1.0 }).is_none());
        let flat = describe(&Image::filled(64, 64, 1, 0.2), &kp).unwrap();
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_sets_match_identically() {
        let img = texture(120, 100, 2);
        let cfg = CmeConfig::default();
        let (k, d) = describe_all(&img, &detect(&img, 100, &cfg));
        let m = match_descriptors(&d, &d, 0.8);
        assert!(m.len() >= k.len() * 9 / 10);
        assert!(m.iter().all(|&(i, j, dist)| i == j && dist == 0.0));
    }

    #[test]
    fn random_descriptors_rarely_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rand_set = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    let v: Vec<f64> = (0..256).map(|_| normal.sample(&mut rng)).collect();
                    let s = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    v.into_iter().map(|a| a / s).collect()
                })
                .collect()
        };
        let (a, b) = (rand_set(100), rand_set(100));
        let m = match_descriptors(&a, &b, 0.8);
        assert!(m.len() <= 5, "{} matches", m.len());
        // mutual nearest neighbors by construction
        for &(i, j, _) in &m {
            let bi = (0..100).min_by(|&x, &y| sq_dist(&a[i], &b[x]).total_cmp(&sq_dist(&a[i], &b[y]))).unwrap();
            let bj = (0..100).min_by(|&x, &y| sq_dist(&a[x], &b[j]).total_cmp(&sq_dist(&a[y], &b[j]))).unwrap();
            assert_eq!((bi, bj), (j, i));
        }
    }

    fn synthetic_matches(t: &Transform2D, n: usize, outlier_frac: f64, sigma: f64, seed: u64) -> (Vec<Match>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let n_out = (n as f64 * outlier_frac).round() as usize;
        let mut out = vec![];
        let mut truth = vec![];
        for i in 0..n {
            let p = Point::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
            let q = if i < n_out {
                Point::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0))
            } else {
                let q = t.apply(p).unwrap();
                if sigma > 0.0 {
                    Point::new(q.x + noise.sample(&mut rng), q.y + noise.sample(&mut rng))
                } else {
                    q
                }
            };
            out.push(Match { reference: p, search: q, distance: 0.0 });
            truth.push(i >= n_out);
        }
        (out, truth)
    }

    fn test_affine() -> Transform2D {
        Transform2D::affine([[1.02, 0.03, 4.0], [-0.02, 0.99, -3.0]]).unwrap()
    }

    #[test]
    fn msac_exact_data() {
        let t = test_affine();
        let (m, truth) = synthetic_matches(&t, 40, 0.0, 0.0, 4);
        let (fit_t, mask) = msac_fit(&m, MotionModel::Affine, 500, 3.0, 0).unwrap();
        assert!(mean_corner_distance(&fit_t, &t, 200.0, 200.0).unwrap() < 1e-6);
        for c in frame_corners(200.0, 200.0) {
            assert!(fit_t.apply(c).unwrap().dist(&t.apply(c).unwrap()) < 1e-6);
        }
        assert!(mask.iter().zip(&truth).all(|(a, b)| !b || *a));
    }

    #[test]
    fn msac_with_outliers() {
        let t = test_affine();
        let (m, _) = synthetic_matches(&t, 100, 0.3, 0.5, 5);
        let (fit_t, _) = msac_fit(&m, MotionModel::Affine, 500, 3.0, 0).unwrap();
        let err = mean_corner_distance(&fit_t, &t, 200.0, 200.0).unwrap();
        assert!(err < 0.5, "{err}");
        assert!(msac_score(&fit_t, &m, 3.0) <= msac_score(&Transform2D::identity(), &m, 3.0));
        assert_eq!(msac_fit(&m, MotionModel::Affine, 500, 3.0, 0).unwrap(), msac_fit(&m, MotionModel::Affine, 500, 3.0, 0).unwrap());
    }

    #[test]
    fn msac_errors() {
        let t = test_affine();
        let (m, _) = synthetic_matches(&t, 2, 0.0, 0.0, 6);
        assert!(matches!(msac_fit(&m, MotionModel::Affine, 10, 3.0, 0), Err(Error::InsufficientMatches { .. })));
        let same = vec![Match { reference: Point::new(1.0, 1.0), search: Point::new(2.0, 2.0), distance: 0.0 }; 5];
        assert!(msac_fit(&same, MotionModel::Affine, 10, 3.0, 0).is_err());
    }

    #[test]
    fn estimate_identity_and_warp() {
        let cfg = CmeConfig::default();
        let f = texture(200, 200, 7);
        let id = estimate_camera_motion(&f, &f, &cfg);
        assert!(!id.fallback);
        assert!(mean_corner_distance(&id.transform, &Transform2D::identity(), 200.0, 200.0).unwrap() < 1e-3);

        let t = Transform2D::affine([[1.01, 0.02, 5.0], [-0.015, 0.995, -4.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 0.005).unwrap();
        let warped = warp_image(&f, &t).unwrap();
        let noisy = Image::from_fn(200, 200, |x, y| warped.get(x, y, 0) + noise.sample(&mut rng));
        let est = estimate_camera_motion(&f, &noisy, &cfg);
        assert!(!est.fallback);
        // judge the interior: the warped frame replicates edges near its border
        let err = mean_corner_distance(&est.transform, &t, 200.0, 200.0).unwrap();
        assert!(err < 1.0, "corner error {err}");

        let flat = Image::filled(100, 100, 1, 0.5);
        let fb = estimate_camera_motion(&flat, &flat, &cfg);
        assert!(fb.fallback);
        assert_eq!(fb.transform, Transform2D::identity());
    }

    #[test]
    fn gate_examples() {
        let f = texture(80, 80, 9);
        assert!(!motion_gate(&f, &f, 0.1, 0.05).unwrap());
        let shifted = Image::from_fn(80, 80, |x, y| f.get_clamped(x as isize - 6, y as isize - 3, 0));
        let ratio = frame_diff_ratio(&f, &shifted, 0.1).unwrap();
        assert!(ratio > 0.05);
        assert!(motion_gate(&f, &shifted, 0.1, 0.05).unwrap());
        assert!(!motion_gate(&f, &shifted, 0.1, ratio).unwrap());
    }

    #[test]
    fn drastic_examples() {
        let (w, h) = (320.0, 240.0);
        assert!(!drastic_motion(&Transform2D::identity(), w, h, 0.2));
        assert!(drastic_motion(&Transform2D::translation(w, 0.0), w, h, 0.2));
        let d = 0.2 * 400.0;
        assert!(!drastic_motion(&Transform2D::translation(d, 0.0), w, h, 0.2));
        assert!(drastic_motion(&Transform2D::translation(d + 1e-6, 0.0), w, h, 0.2));
    }

    #[test]
    fn compensate_examples() {
        let b = BBox::new(10.0, 20.0, 30.0, 40.0).unwrap();
        assert_eq!(compensate(&b, &Transform2D::identity()).unwrap(), b);
        let s = compensate(&b, &Transform2D::translation(10.0, 0.0)).unwrap();
        assert_eq!((s.x, s.y, s.w, s.h), (20.0, 20.0, 30.0, 40.0));
        let c = b.center();
        let rot = Transform2D::translation(c.x, c.y)
            .compose(&Transform2D::similarity(1.0, 0.3, 0.0, 0.0).unwrap())
            .compose(&Transform2D::translation(-c.x, -c.y));
        let r = compensate(&b, &rot).unwrap();
        assert!(r.center().dist(&c) < 1e-9);
        let t = test_affine();
        let back = compensate(&compensate(&b, &t).unwrap(), &t.inverse().unwrap()).unwrap();
        assert!(back.center().dist(&c) < 1e-6);
    }
}
