//! Per-modality appearance tracker: a multi-channel regularized correlation
//! filter trained and evaluated in the Fourier domain, plus response-map
//! reliability scores.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BBox, Point};
use crate::img::{crop_resample, extract_features, hann2d, FeatureMap, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfConfig {
    /// Feature cell size in (resampled) pixels.
    pub cell: usize,
    pub orientations: usize,
    /// Search window side as a multiple of the target side.
    pub padding: f64,
    pub lambda: f64,
    /// Linear model-update rate.
    pub eta: f64,
    pub n_scales: usize,
    pub scale_step: f64,
    /// Gaussian label σ as a fraction of √(w·h).
    pub sigma_factor: f64,
    /// Response maps are `window_cells × window_cells`.
    pub window_cells: usize,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            cell: 4,
            orientations: 9,
            padding: 2.0,
            lambda: 1e-2,
            eta: 0.02,
            n_scales: 5,
            scale_step: 1.02,
            sigma_factor: 1.0 / 20.0,
            window_cells: 32,
        }
    }
}

impl CfConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("cf.{m}")));
        if self.cell == 0 || self.orientations == 0 {
            return bad("cell and orientations must be positive");
        }
        if !(self.padding >= 1.0 && self.padding.is_finite()) {
            return bad("padding must be >= 1");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta must lie in [0, 1]");
        }
        if self.n_scales == 0 || self.n_scales % 2 == 0 {
            return bad("n_scales must be odd");
        }
        if !(self.scale_step >= 1.0) {
            return bad("scale_step must be >= 1");
        }
        if !(self.sigma_factor > 0.0) {
            return bad("sigma_factor must be positive");
        }
        if self.window_cells < 4 {
            return bad("window_cells must be at least 4");
        }
        Ok(())
    }

    fn window_px(&self) -> usize {
        self.window_cells * self.cell
    }
}

/// Real-valued confidence surface, row-major `height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ResponseMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} response map with {} values",
                data.len()
            )));
        }
        Ok(ResponseMap { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        ResponseMap {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population variance.
    pub fn var(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64
    }

    /// Integer location of the maximum (first in row-major order on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// Peak location refined by a separable parabolic fit through the
    /// 3×3 neighborhood (wrapping circularly).
    pub fn peak_subcell(&self) -> (f64, f64) {
        let (px, py) = self.argmax();
        let c = self.get(px, py);
        let parabola = |l: f64, r: f64| {
            let d = l - 2.0 * c + r;
            if d < 0.0 {
                (0.5 * (l - r) / d).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        };
        let (w, h) = (self.width, self.height);
        let dx = if w >= 3 {
            parabola(self.get((px + w - 1) % w, py), self.get((px + 1) % w, py))
        } else {
            0.0
        };
        let dy = if h >= 3 {
            parabola(self.get(px, (py + h - 1) % h), self.get(px, (py + 1) % h))
        } else {
            0.0
        };
        (px as f64 + dx, py as f64 + dy)
    }

    pub fn scaled(&self, s: f64) -> ResponseMap {
        ResponseMap {
            data: self.data.iter().map(|v| v * s).collect(),
            ..*self
        }
    }
}

const PSR_EPS: f64 = 1e-12;

/// Peak sharpness `(max − mean) / (var + ε)`; note the variance (not the
/// standard deviation) in the denominator.
pub fn psr(r: &ResponseMap) -> f64 {
    let max = r.max();
    if r.data.iter().all(|&v| v == max) {
        return 0.0;
    }
    (max - r.mean()) / (r.var() + PSR_EPS)
}

/// Reliability `q = psr(r) · max(r)`.
pub fn quality(r: &ResponseMap) -> f64 {
    psr(r) * r.max()
}

#[derive(Clone)]
struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fft2({0}x{0})", self.n)
    }
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        let plan = if inverse { &self.inv } else { &self.fwd };
        plan.process(data);
        let mut col = vec![Complex64::default(); n];
        for x in 0..n {
            for y in 0..n {
                col[y] = data[y * n + x];
            }
            plan.process(&mut col);
            for y in 0..n {
                data[y * n + x] = col[y];
            }
        }
        if inverse {
            let s = 1.0 / (n * n) as f64;
            data.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn forward_real(&self, plane: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.run(&mut buf, false);
        buf
    }
}

/// Correlation-filter model for one modality.
#[derive(Debug, Clone)]
pub struct CfState {
    cfg: CfConfig,
    num: Vec<Vec<Complex64>>,
    den: Vec<f64>,
    label_f: Vec<Complex64>,
    window: Vec<f64>,
    init_size: (f64, f64),
    scale: f64,
    fft: Fft2,
}

impl PartialEq for CfState {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg
            && self.num == other.num
            && self.den == other.den
            && self.label_f == other.label_f
            && self.init_size == other.init_size
            && self.scale == other.scale
    }
}

/// Centered 2-D Gaussian label on an `n × n` grid with per-axis σ in cells.
fn gaussian_label(n: usize, sigma_x: f64, sigma_y: f64) -> Vec<f64> {
    let c = (n / 2) as f64;
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            out.push((-0.5 * (dx * dx / (sigma_x * sigma_x) + dy * dy / (sigma_y * sigma_y))).exp());
        }
    }
    out
}

impl CfState {
    /// Trains a fresh filter on the patch around `bbox`.
    pub fn init(frame: &Image, bbox: &BBox, cfg: &CfConfig) -> Result<Self> {
        cfg.validate()?;
        if !bbox.is_valid() || bbox.w < 1.0 || bbox.h < 1.0 {
            return Err(Error::InvalidBox {
                x: bbox.x,
                y: bbox.y,
                w: bbox.w,
                h: bbox.h,
            });
        }
        let n = cfg.window_cells;
        let sigma_px = cfg.sigma_factor * (bbox.w * bbox.h).sqrt();
        let sigma_x = sigma_px * n as f64 / (cfg.padding * bbox.w);
        let sigma_y = sigma_px * n as f64 / (cfg.padding * bbox.h);
        let fft = Fft2::new(n);
        let label_f = fft.forward_real(&gaussian_label(n, sigma_x, sigma_y));
        let mut state = CfState {
            cfg: cfg.clone(),
            num: vec![],
            den: vec![],
            label_f,
            window: hann2d(n, n).data,
            init_size: (bbox.w, bbox.h),
            scale: 1.0,
            fft,
        };
        let (num, den) = state.train_sample(frame, bbox.center());
        state.num = num;
        state.den = den;
        Ok(state)
    }

    pub fn config(&self) -> &CfConfig {
        &self.cfg
    }

    pub fn map_size(&self) -> (usize, usize) {
        (self.cfg.window_cells, self.cfg.window_cells)
    }

    /// Target size at the current scale.
    pub fn target_size(&self) -> (f64, f64) {
        (self.init_size.0 * self.scale, self.init_size.1 * self.scale)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, s: f64) {
        self.scale = s;
    }

    pub fn numerator(&self) -> &[Vec<Complex64>] {
        &self.num
    }

    pub fn denominator(&self) -> &[f64] {
        &self.den
    }

    /// Relative scale multipliers `step^k` for k = −(n−1)/2 ..= (n−1)/2.
    pub fn scale_factors(&self) -> Vec<f64> {
        let half = (self.cfg.n_scales / 2) as i32;
        (-half..=half).map(|k| self.cfg.scale_step.powi(k)).collect()
    }

    /// Search-window size in frame pixels at relative scale `mult`.
    pub fn window_px(&self, mult: f64) -> (f64, f64) {
        let (w, h) = self.target_size();
        (self.cfg.padding * w * mult, self.cfg.padding * h * mult)
    }

    /// Search-window content around `center`, resampled to `out` pixels.
    pub fn search_patch(&self, frame: &Image, center: Point, out: (usize, usize)) -> Image {
        crop_resample(frame, center, self.window_px(1.0), out)
    }

    fn features(&self, frame: &Image, center: Point, mult: f64) -> FeatureMap {
        let s = self.cfg.window_px();
        let patch = crop_resample(frame, center, self.window_px(mult), (s, s));
        let mut f = extract_features(&patch, self.cfg.cell, self.cfg.orientations);
        debug_assert_eq!((f.width, f.height), self.map_size());
        for c in 0..f.channels {
            let ch = f.channel_mut(c);
            let mean = ch.iter().sum::<f64>() / ch.len() as f64;
            for (v, w) in ch.iter_mut().zip(&self.window) {
                *v = (*v - mean) * w;
            }
        }
        f
    }

    fn spectra(&self, f: &FeatureMap) -> Vec<Vec<Complex64>> {
        (0..f.channels).map(|c| self.fft.forward_real(f.channel(c))).collect()
    }

    fn train_sample(&self, frame: &Image, center: Point) -> (Vec<Vec<Complex64>>, Vec<f64>) {
        let xf = self.spectra(&self.features(frame, center, 1.0));
        let mut den = vec![self.cfg.lambda; self.label_f.len()];
        let num = xf
            .iter()
            .map(|x| {
                x.iter()
                    .zip(&self.label_f)
                    .zip(den.iter_mut())
                    .map(|((xv, y), d)| {
                        *d += xv.norm_sqr();
                        xv.conj() * y
                    })
                    .collect()
            })
            .collect();
        (num, den)
    }

    /// Correlation response at one relative scale, with zero displacement at
    /// the map center.
    pub fn respond_at(&self, frame: &Image, center: Point, mult: f64) -> ResponseMap {
        let zf = self.spectra(&self.features(frame, center, mult));
        let n = self.cfg.window_cells;
        let mut acc = vec![Complex64::default(); n * n];
        for (num, z) in self.num.iter().zip(&zf) {
            for ((a, h), z) in acc.iter_mut().zip(num).zip(z) {
                *a += h * z;
            }
        }
        for (a, d) in acc.iter_mut().zip(&self.den) {
            *a /= d;
        }
        self.fft.run(&mut acc, true);
        ResponseMap {
            width: n,
            height: n,
            data: acc.iter().map(|c| c.re).collect(),
        }
    }

    /// Responses for every pyramid scale and the index whose map has the
    /// highest maximum.
    pub fn respond(&self, frame: &Image, center: Point) -> (Vec<ResponseMap>, usize) {
        let maps: Vec<ResponseMap> = self
            .scale_factors()
            .into_iter()
            .map(|m| self.respond_at(frame, center, m))
            .collect();
        let best = best_scale(&maps);
        (maps, best)
    }

    /// Pixel displacement of the response peak from the window center for a
    /// map computed at relative scale `mult`.
    pub fn peak_offset_px(&self, map: &ResponseMap, mult: f64) -> (f64, f64) {
        let (px, py) = map.peak_subcell();
        self.cells_to_px((px, py), mult)
    }

    /// Converts a map location (cells) into a displacement in frame pixels.
    pub fn cells_to_px(&self, (px, py): (f64, f64), mult: f64) -> (f64, f64) {
        let n = self.cfg.window_cells as f64;
        let c = (self.cfg.window_cells / 2) as f64;
        let (ww, wh) = self.window_px(mult);
        ((px - c) * ww / n, (py - c) * wh / n)
    }

    /// Linear interpolation towards the filter trained on the patch at
    /// `bbox`; the tracker's scale follows the box.
    pub fn update(&mut self, frame: &Image, bbox: &BBox) {
        self.scale = ((bbox.w * bbox.h) / (self.init_size.0 * self.init_size.1)).sqrt();
        let (num, den) = self.train_sample(frame, bbox.center());
        let eta = self.cfg.eta;
        for (old, new) in self.num.iter_mut().zip(&num) {
            for (o, n) in old.iter_mut().zip(new) {
                *o = *o * (1.0 - eta) + n * eta;
            }
        }
        for (o, n) in self.den.iter_mut().zip(&den) {
            *o = *o * (1.0 - eta) + n * eta;
        }
    }
}

pub fn best_scale(maps: &[ResponseMap]) -> usize {
    let mut best = 0;
    for (i, m) in maps.iter().enumerate() {
        if m.max() > maps[best].max() {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coarse: Vec<f64> = (0..(w / 4 + 2) * (h / 4 + 2)).map(|_| rng.random()).collect();
        let cw = w / 4 + 2;
        Image::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f64 / 4.0, y as f64 / 4.0);
            let (x0, y0) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let v = |xx: usize, yy: usize| coarse[yy * cw + xx];
            let top = v(x0, y0) * (1.0 - tx) + v(x0 + 1, y0) * tx;
            let bot = v(x0, y0 + 1) * (1.0 - tx) + v(x0 + 1, y0 + 1) * tx;
            top * (1.0 - ty) + bot * ty
        })
    }

    fn shifted(img: &Image, dx: isize) -> Image {
        Image::from_fn(img.width(), img.height(), |x, y| img.get_clamped(x as isize - dx, y as isize, 0))
    }

    fn cfg() -> CfConfig {
        CfConfig::default()
    }

    #[test]
    fn self_response_peaks_at_center() {
        let img = textured(160, 120, 1);
        let b = BBox::new(60.0, 40.0, 24.0, 24.0).unwrap();
        let st = CfState::init(&img, &b, &cfg()).unwrap();
        let (maps, best) = st.respond(&img, b.center());
        assert_eq!(best, 2);
        let (px, py) = maps[best].peak_subcell();
        let c = (st.config().window_cells / 2) as f64;
        assert!((px - c).abs() <= 1.0 && (py - c).abs() <= 1.0, "{px} {py}");
    }

    #[test]
    fn constant_image_leaves_only_regularizer() {
        let img = Image::filled(64, 64, 1, 0.5);
        let st = CfState::init(&img, &BBox::new(20.0, 20.0, 16.0, 16.0).unwrap(), &cfg()).unwrap();
        assert!(st.denominator().iter().all(|d| (d - 1e-2).abs() < 1e-12));
    }

    #[test]
    fn init_is_deterministic() {
        let img = textured(96, 96, 4);
        let b = BBox::new(30.0, 30.0, 20.0, 16.0).unwrap();
        assert_eq!(CfState::init(&img, &b, &cfg()).unwrap(), CfState::init(&img, &b, &cfg()).unwrap());
        assert!(CfState::init(&img, &BBox { x: 0.0, y: 0.0, w: 0.0, h: 3.0 }, &cfg()).is_err());
    }

    #[test]
    fn translation_moves_peak() {
        let img = textured(200, 160, 2);
        let b = BBox::new(80.0, 60.0, 32.0, 32.0).unwrap();
        let st = CfState::init(&img, &b, &cfg()).unwrap();
        let cell_px = st.window_px(1.0).0 / st.config().window_cells as f64;
        for d in [-8isize, 4, 10] {
            let moved = shifted(&img, d);
            let map = st.respond_at(&moved, b.center(), 1.0);
            let (px, _) = map.argmax();
            let expect = (st.config().window_cells / 2) as f64 + d as f64 / cell_px;
            assert!((px as f64 - expect).abs() <= 1.0, "d={d}: peak {px}, expected {expect}");
            let (ox, oy) = st.peak_offset_px(&map, 1.0);
            assert!((ox - d as f64).abs() < 1.5 && oy.abs() < 1.5, "{ox} {oy}");
        }
    }

    #[test]
    fn zero_filter_gives_zero_response() {
        let img = textured(64, 64, 3);
        let mut st = CfState::init(&img, &BBox::new(20.0, 20.0, 16.0, 16.0).unwrap(), &cfg()).unwrap();
        st.num.iter_mut().for_each(|c| c.fill(Complex64::default()));
        assert!(st.respond_at(&img, Point::new(28.0, 28.0), 1.0).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn update_rate_endpoints() {
        let a = textured(128, 128, 5);
        let b = textured(128, 128, 6);
        let bx = BBox::new(40.0, 40.0, 24.0, 24.0).unwrap();
        let mut c = cfg();
        c.eta = 0.0;
        let mut st = CfState::init(&a, &bx, &c).unwrap();
        let before = st.clone();
        st.update(&b, &bx);
        assert_eq!(st, before);

        c.eta = 1.0;
        let mut st = CfState::init(&a, &bx, &c).unwrap();
        st.update(&b, &bx);
        let fresh = CfState::init(&b, &bx, &c).unwrap();
        for (x, y) in st.den.iter().zip(&fresh.den) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
        for (cx, cy) in st.num.iter().zip(&fresh.num) {
            for (x, y) in cx.iter().zip(cy) {
                assert!((x - y).norm() <= 1e-6 * y.norm().max(1.0));
            }
        }
    }

    #[test]
    fn static_updates_converge_geometrically() {
        let a = textured(128, 128, 7);
        let b = textured(128, 128, 8);
        let bx = BBox::new(40.0, 40.0, 24.0, 24.0).unwrap();
        let c = CfConfig { eta: 0.2, ..cfg() };
        let mut st = CfState::init(&a, &bx, &c).unwrap();
        let dist = |p: &CfState, q: &CfState| -> f64 {
            p.den.iter().zip(&q.den).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let mut prev = st.clone();
        let mut steps = vec![];
        for _ in 0..6 {
            st.update(&b, &bx);
            steps.push(dist(&st, &prev));
            prev = st.clone();
        }
        for w in steps.windows(2) {
            assert!((w[1] / w[0] - 0.8).abs() < 1e-9, "{:?}", steps);
        }
    }

    #[test]
    fn psr_and_quality_examples() {
        let flat = ResponseMap::filled(10, 10, 0.3);
        assert_eq!(psr(&flat), 0.0);
        assert_eq!(quality(&flat), 0.0);
        let mut delta = ResponseMap::filled(10, 10, 0.0);
        delta.data[37] = 1.0;
        // mean 0.01, var 0.01 - 0.0001 = 0.0099
        let expect = 0.99 / (0.0099 + 1e-12);
        assert!((psr(&delta) - expect).abs() < 1e-9);
        assert!((quality(&delta) - expect).abs() < 1e-9);
        assert!((psr(&delta) - 100.0).abs() < 1e-6);
    }

    #[test]
    fn quality_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let m = ResponseMap::new(12, 9, (0..108).map(|_| rng.random_range(-0.2..1.0)).collect()).unwrap();
            let c = rng.random_range(0.1..10.0);
            let s = m.scaled(c);
            assert!((psr(&s) * c - psr(&m)).abs() <= 1e-6 * psr(&m).abs());
            assert!((quality(&s) - quality(&m)).abs() <= 1e-6 * quality(&m).abs());
        }
    }

    #[test]
    fn subcell_peak_refines_toward_heavier_neighbor() {
        let mut m = ResponseMap::filled(5, 5, 0.0);
        m.data[2 * 5 + 2] = 1.0;
        m.data[2 * 5 + 3] = 0.5;
        let (x, y) = m.peak_subcell();
        assert!(x > 2.0 && x < 2.5);
        assert_eq!(y, 2.0);
    }
}
