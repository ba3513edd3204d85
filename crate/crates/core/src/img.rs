//! Image buffers, patch sampling, windows and the hand-crafted feature
//! channels consumed by the correlation filters.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Point, Transform2D};

/// Row-major interleaved image with samples in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::DimensionMismatch(format!("unsupported channel count {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::DimensionMismatch("image must be non-empty".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("image sample {v} outside [0, 1]")));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0 && (channels == 1 || channels == 3));
        Image {
            width,
            height,
            channels,
            data: vec![value.clamp(0.0, 1.0); width * height * channels],
        }
    }

    /// Grayscale image from a per-pixel function; results are clamped to [0, 1].
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0);
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                data.push(if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
            }
        }
        Image {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    /// Sample with edge replication for out-of-bounds coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f64 {
        let xi = x.clamp(0, self.width as isize - 1) as usize;
        let yi = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xi, yi, c)
    }

    /// Bilinear sample at continuous pixel coordinates where pixel (i, j)
    /// is centered at (i, j); edges are replicated.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
        let bottom = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Luminance (0.299 R + 0.587 G + 0.114 B); identity on grayscale input.
pub fn to_gray(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
        .collect();
    Image {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}

/// Exact-size crop around `center` on the integer pixel grid; samples outside
/// the image replicate the nearest edge pixel.
pub fn crop_patch(img: &Image, center: Point, size: (usize, usize)) -> Image {
    let (w, h) = size;
    assert!(w > 0 && h > 0, "crop size must be positive");
    let x0 = (center.x - w as f64 / 2.0).round() as isize;
    let y0 = (center.y - h as f64 / 2.0).round() as isize;
    let mut data = Vec::with_capacity(w * h * img.channels);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for c in 0..img.channels {
                data.push(img.get_clamped(x0 + x, y0 + y, c));
            }
        }
    }
    Image {
        width: w,
        height: h,
        channels: img.channels,
        data,
    }
}

/// Samples the region of size `src_size` centered at `center` into an
/// `out_size` image with bilinear interpolation and edge replication.
pub fn crop_resample(img: &Image, center: Point, src_size: (f64, f64), out_size: (usize, usize)) -> Image {
    let (ow, oh) = out_size;
    assert!(ow > 0 && oh > 0, "output size must be positive");
    let sx = src_size.0 / ow as f64;
    let sy = src_size.1 / oh as f64;
    // Pixel (i, j) covers [i, i+1); its center sits at i + 0.5 in continuous
    // coordinates and at index i in sampling coordinates.
    let left = center.x - src_size.0 / 2.0;
    let top = center.y - src_size.1 / 2.0;
    let mut data = Vec::with_capacity(ow * oh * img.channels);
    for j in 0..oh {
        let y = top + (j as f64 + 0.5) * sy - 0.5;
        for i in 0..ow {
            let x = left + (i as f64 + 0.5) * sx - 0.5;
            for c in 0..img.channels {
                data.push(img.sample_bilinear(x, y, c));
            }
        }
    }
    Image {
        width: ow,
        height: oh,
        channels: img.channels,
        data,
    }
}

/// Resamples `img` under `t`: output pixel centers `p` read the source at
/// `t⁻¹(p)` (continuous coordinates, edges replicated).
pub fn warp_image(img: &Image, t: &Transform2D) -> Result<Image> {
    let inv = t.inverse()?;
    let mut data = Vec::with_capacity(img.data.len());
    for j in 0..img.height {
        for i in 0..img.width {
            let src = inv.apply(Point::new(i as f64 + 0.5, j as f64 + 0.5))?;
            for c in 0..img.channels {
                data.push(img.sample_bilinear(src.x - 0.5, src.y - 0.5, c));
            }
        }
    }
    Ok(Image { data, ..*img })
}

/// Bilinear resize with half-pixel sample centers (align-corners false).
pub fn resize_bilinear(img: &Image, new_size: (usize, usize)) -> Image {
    let (nw, nh) = new_size;
    assert!(nw > 0 && nh > 0, "new size must be positive");
    if (nw, nh) == (img.width, img.height) {
        return img.clone();
    }
    let data = resize_plane_interleaved(&img.data, img.width, img.height, img.channels, nw, nh);
    Image {
        width: nw,
        height: nh,
        channels: img.channels,
        data,
    }
}

/// Source coordinate, lower index, upper index and weight of the upper
/// index for each output position along one axis.
pub(crate) fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

fn resize_plane_interleaved(data: &[f64], w: usize, h: usize, ch: usize, nw: usize, nh: usize) -> Vec<f64> {
    let tx = resize_taps(w, nw);
    let ty = resize_taps(h, nh);
    let mut out = Vec::with_capacity(nw * nh * ch);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            for c in 0..ch {
                let at = |x: usize, y: usize| data[(y * w + x) * ch + c];
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Bilinear resize of a single real-valued plane.
pub fn resize_plane(data: &[f64], w: usize, h: usize, nw: usize, nh: usize) -> Vec<f64> {
    if (w, h) == (nw, nh) {
        return data.to_vec();
    }
    resize_plane_interleaved(data, w, h, 1, nw, nh)
}

/// Planar multi-channel real map: `data[(c * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        FeatureMap {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize, c: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }
}

fn hann1d(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()))
        .collect()
}

/// Separable 2-D Hann window.
pub fn hann2d(w: usize, h: usize) -> FeatureMap {
    assert!(w >= 1 && h >= 1);
    let hx = hann1d(w);
    let hy = hann1d(h);
    let mut out = FeatureMap::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            *out.at_mut(x, y, 0) = hx[x] * hy[y];
        }
    }
    out
}

/// Fraction of pixels whose absolute change exceeds `pixel_thresh`.
pub fn frame_diff_ratio(prev: &Image, cur: &Image, pixel_thresh: f64) -> Result<f64> {
    if prev.width != cur.width || prev.height != cur.height {
        return Err(Error::DimensionMismatch(format!(
            "frames are {}x{} and {}x{}",
            prev.width, prev.height, cur.width, cur.height
        )));
    }
    let a = to_gray(prev);
    let b = to_gray(cur);
    let changed = a
        .data
        .iter()
        .zip(&b.data)
        .filter(|(p, q)| (*q - *p).abs() > pixel_thresh)
        .count();
    Ok(changed as f64 / a.data.len() as f64)
}

const FEATURE_EPS: f64 = 1e-3;

/// Number of channels produced by [`extract_features`].
pub fn feature_channels(orientations: usize) -> usize {
    orientations + 2
}

/// Per-cell features: mean gray, a magnitude-weighted unsigned orientation
/// histogram and gradient energy. The gradient channels (histogram and
/// energy) are L2-normalized jointly per cell.
pub fn extract_features(img: &Image, cell: usize, orientations: usize) -> FeatureMap {
    assert!(cell >= 1 && orientations >= 1);
    let g = to_gray(img);
    let (w, h) = (g.width, g.height);
    let cw = (w / cell).max(1);
    let ch = (h / cell).max(1);
    let nb = orientations;
    let mut out = FeatureMap::zeros(cw, ch, feature_channels(nb));
    let bin_width = std::f64::consts::PI / nb as f64;
    let px_per_cell = (cell * cell) as f64;

    for y in 0..(ch * cell).min(h) {
        for x in 0..(cw * cell).min(w) {
            let (cx, cy) = (x / cell, y / cell);
            let (xi, yi) = (x as isize, y as isize);
            let gx = 0.5 * (g.get_clamped(xi + 1, yi, 0) - g.get_clamped(xi - 1, yi, 0));
            let gy = 0.5 * (g.get_clamped(xi, yi + 1, 0) - g.get_clamped(xi, yi - 1, 0));
            let mag = gx.hypot(gy);
            *out.at_mut(cx, cy, 0) += g.get(x, y, 0) / px_per_cell;
            *out.at_mut(cx, cy, nb + 1) += mag * mag / px_per_cell;
            if mag > 0.0 {
                let theta = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
                let t = theta / bin_width;
                let lo = t.floor();
                let frac = t - lo;
                let lo = (lo as usize) % nb;
                let hi = (lo + 1) % nb;
                *out.at_mut(cx, cy, 1 + lo) += mag * (1.0 - frac) / px_per_cell;
                *out.at_mut(cx, cy, 1 + hi) += mag * frac / px_per_cell;
            }
        }
    }
    for cy in 0..ch {
        for cx in 0..cw {
            let energy = out.get(cx, cy, nb + 1).sqrt();
            *out.at_mut(cx, cy, nb + 1) = energy;
            let norm2: f64 = (1..=nb + 1).map(|c| out.get(cx, cy, c).powi(2)).sum();
            let norm = (norm2 + FEATURE_EPS * FEATURE_EPS).sqrt();
            for c in 1..=nb + 1 {
                *out.at_mut(cx, cy, c) /= norm;
            }
        }
    }
    out
}

/// Loads an 8-bit PNG or binary PGM/PPM as a 1- or 3-channel image.
pub fn load_image(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let dynimg = image::open(path)?;
    let color = dynimg.color();
    if color.has_color() {
        let rgb = dynimg.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::new(w as usize, h as usize, 3, data)
    } else {
        let l = dynimg.to_luma8();
        let (w, h) = l.dimensions();
        let data = l.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Image::new(w as usize, h as usize, 1, data)
    }
}

/// Thermal frames are always reduced to a single channel.
pub fn load_thermal(path: &Path) -> Result<Image> {
    load_image(path).map(|i| to_gray(&i))
}

/// Writes PNG, PGM or PPM depending on the file extension.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    if img.channels == 1 {
        image::GrayImage::from_raw(w, h, bytes)
            .expect("buffer size matches dimensions")
            .save(path)?;
    } else {
        image::RgbImage::from_raw(w, h, bytes)
            .expect("buffer size matches dimensions")
            .save(path)?;
    }
    Ok(())
}
