//! Deterministic synthetic RGB-T sequences with scripted challenges and
//! exact ground truth.
//!
//! The scene lives in world coordinates (those of the first frame). A
//! cumulative camera transform maps world points into each frame.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bench::{write_boxes, Manifest, Sequence};
use crate::error::{Error, Result};
use crate::geom::{BBox, Point, Transform2D};
use crate::img::{save_image, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    /// Textured occluder centered on the target, `scale` times its size,
    /// drawn over both modalities.
    Occlusion {
        start: usize,
        end: usize,
        #[serde(default = "default_occluder_scale")]
        scale: f64,
    },
    /// Thermal target intensity collapses to the background mean; `level`
    /// keeps that fraction of the target's own contrast.
    Crossover {
        start: usize,
        end: usize,
        #[serde(default)]
        level: f64,
    },
    /// Visible frames are multiplied by `gain`.
    IllumDrop {
        start: usize,
        end: usize,
        #[serde(default = "default_gain")]
        gain: f64,
    },
    /// Per-frame camera motion (a similarity about the frame center) applied
    /// on every frame in the window.
    CameraMotion {
        start: usize,
        end: usize,
        #[serde(default)]
        dx: f64,
        #[serde(default)]
        dy: f64,
        #[serde(default)]
        angle: f64,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn default_occluder_scale() -> f64 {
    1.6
}

fn default_gain() -> f64 {
    0.03
}

fn one() -> f64 {
    1.0
}

impl Event {
    /// Half-open frame window `[start, end)`.
    pub fn window(&self) -> (usize, usize) {
        match *self {
            Event::Occlusion { start, end, .. }
            | Event::Crossover { start, end, .. }
            | Event::IllumDrop { start, end, .. }
            | Event::CameraMotion { start, end, .. } => (start, end),
        }
    }

    pub fn active(&self, t: usize) -> bool {
        let (s, e) = self.window();
        (s..e).contains(&t)
    }

    pub fn attribute(&self) -> &'static str {
        match self {
            Event::Occlusion { .. } => "OCC",
            Event::Crossover { .. } => "TC",
            Event::IllumDrop { .. } => "LI",
            Event::CameraMotion { .. } => "CM",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Target box in the first frame.
    pub target: [f64; 4],
    /// Constant per-frame target velocity in world coordinates.
    #[serde(default)]
    pub velocity: [f64; 2],
    /// Optional per-frame velocities overriding `velocity` (entry `t` moves
    /// the target from frame `t` to `t + 1`).
    #[serde(default)]
    pub path: Vec<[f64; 2]>,
    #[serde(default)]
    pub texture_seed: u64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub events: Vec<Event>,
}

fn default_name() -> String {
    "synthetic".into()
}

fn default_noise() -> f64 {
    0.01
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: default_name(),
            frames: 40,
            width: 160,
            height: 128,
            target: [60.0, 50.0, 24.0, 24.0],
            velocity: [0.8, 0.3],
            path: vec![],
            texture_seed: 0,
            noise_sigma: default_noise(),
            events: vec![],
        }
    }
}

impl Scenario {
    fn invalid(msg: impl Into<String>) -> Error {
        Error::InvalidScenario(msg.into())
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.width < 16 || self.height < 16 {
            return Err(Self::invalid("need at least one frame of at least 16x16"));
        }
        BBox::new(self.target[0], self.target[1], self.target[2], self.target[3])
            .map_err(|_| Self::invalid("target box must have positive size"))?;
        if !(self.noise_sigma >= 0.0) {
            return Err(Self::invalid("noise_sigma must be nonnegative"));
        }
        if !self.path.is_empty() && self.path.len() + 1 < self.frames {
            return Err(Self::invalid("path must provide a velocity for every frame transition"));
        }
        for e in &self.events {
            let (s, t) = e.window();
            if s >= t || t > self.frames {
                return Err(Self::invalid(format!("event window [{s}, {t}) outside 0..{}", self.frames)));
            }
            match *e {
                Event::Occlusion { scale, .. } if !(scale >= 1.0) => {
                    return Err(Self::invalid("occluder scale must be >= 1"));
                }
                Event::Crossover { level, .. } if !(0.0..=1.0).contains(&level) => {
                    return Err(Self::invalid("crossover level must lie in [0, 1]"));
                }
                Event::IllumDrop { gain, .. } if !(0.0..=1.0).contains(&gain) => {
                    return Err(Self::invalid("illumination gain must lie in [0, 1]"));
                }
                Event::CameraMotion { scale, angle, dx, dy, .. }
                    if !(scale > 0.0) || ![angle, dx, dy].iter().all(|v| v.is_finite()) =>
                {
                    return Err(Self::invalid("camera motion must be finite with positive scale"));
                }
                _ => {}
            }
        }
        for a in &self.events {
            for b in &self.events {
                if matches!(a, Event::Occlusion { .. }) && matches!(b, Event::Crossover { .. }) {
                    let ((s1, e1), (s2, e2)) = (a.window(), b.window());
                    if s1 < e2 && s2 < e1 {
                        return Err(Self::invalid("occlusion and crossover windows may not overlap"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn attributes(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.events.iter().map(|e| e.attribute().to_string()).collect();
        tags.sort();
        tags.dedup();
        tags
    }

    fn velocity_at(&self, t: usize) -> [f64; 2] {
        self.path.get(t).copied().unwrap_or(self.velocity)
    }

    /// Target box in world coordinates at frame `t`.
    pub fn world_box(&self, t: usize) -> BBox {
        let [mut x, mut y, w, h] = self.target;
        for k in 0..t {
            let v = self.velocity_at(k);
            x += v[0];
            y += v[1];
        }
        BBox { x, y, w, h }
    }

    /// Incremental camera transform from frame `t − 1` to frame `t`.
    pub fn step_transform(&self, t: usize) -> Result<Transform2D> {
        let mut m = Transform2D::identity();
        let (cx, cy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        for e in &self.events {
            if let Event::CameraMotion { dx, dy, angle, scale, .. } = *e {
                if t > 0 && e.active(t) {
                    let about = Transform2D::translation(cx + dx, cy + dy)
                        .compose(&Transform2D::similarity(scale, angle, 0.0, 0.0)?)
                        .compose(&Transform2D::translation(-cx, -cy));
                    m = about.compose(&m);
                }
            }
        }
        Ok(m)
    }
}

// ---------------------------------------------------------------------------

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1000_0000_01B3) ^ splitmix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Value noise on a `cell`-pixel lattice, box-filtered 3×3, mapped to
/// `[lo, hi]`.
#[derive(Debug, Clone, Copy)]
struct Texture {
    seed: u64,
    cell: f64,
    lo: f64,
    hi: f64,
}

impl Texture {
    fn noise(&self, px: i64, py: i64) -> f64 {
        let (fx, fy) = ((px as f64 + 0.5) / self.cell, (py as f64 + 0.5) / self.cell);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (tx, ty) = (fx - x0, fy - y0);
        let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
        let (x0, y0) = (x0 as i64, y0 as i64);
        let v = |a, b| lattice(self.seed, a, b);
        let top = v(x0, y0) * (1.0 - sx) + v(x0 + 1, y0) * sx;
        let bot = v(x0, y0 + 1) * (1.0 - sx) + v(x0 + 1, y0 + 1) * sx;
        top * (1.0 - sy) + bot * sy
    }

    fn pixel(&self, px: i64, py: i64) -> f64 {
        let mut s = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                s += self.noise(px + dx, py + dy);
            }
        }
        self.lo + (self.hi - self.lo) * s / 9.0
    }
}

/// Texture evaluated once over an integer rectangle, sampled bilinearly.
struct Raster {
    x0: i64,
    y0: i64,
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Raster {
    fn new(tex: &Texture, x0: i64, y0: i64, w: usize, h: usize) -> Self {
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                data.push(tex.pixel(x0 + x, y0 + y));
            }
        }
        Raster { x0, y0, w, h, data }
    }

    fn at(&self, x: i64, y: i64) -> f64 {
        let xi = (x - self.x0).clamp(0, self.w as i64 - 1) as usize;
        let yi = (y - self.y0).clamp(0, self.h as i64 - 1) as usize;
        self.data[yi * self.w + xi]
    }

    /// Continuous coordinates (pixel `i` centered at `i + 0.5`).
    fn sample(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x - 0.5, y - 0.5);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (tx, ty) = (fx - x0, fy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        if tx == 0.0 && ty == 0.0 {
            return self.at(x0, y0);
        }
        let top = self.at(x0, y0) * (1.0 - tx) + self.at(x0 + 1, y0) * tx;
        let bot = self.at(x0, y0 + 1) * (1.0 - tx) + self.at(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }

    fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Exact side information about a generated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// Row-major incremental camera transform from frame `t − 1` to `t`
    /// (identity for frame 0).
    pub transforms: Vec<[[f64; 3]; 3]>,
    pub occluded: Vec<usize>,
    pub crossover: Vec<usize>,
    pub illum_drop: Vec<usize>,
    pub camera_motion: Vec<usize>,
}

const RGB_TINT: [(f64, f64); 3] = [(0.9, 0.05), (0.8, 0.1), (0.7, 0.12)];
const TARGET_TINT: [(f64, f64); 3] = [(0.85, 0.15), (0.5, 0.05), (0.6, 0.2)];

fn mix_seed(a: u64, b: u64, purpose: u64) -> u64 {
    splitmix(splitmix(a ^ 0xA5A5_0000_0000_0000) ^ splitmix(b.wrapping_add(purpose)))
}

/// Renders the scenario. All randomness derives from `(texture_seed, seed)`.
pub fn generate(sc: &Scenario, seed: u64) -> Result<(Sequence, SynthTruth)> {
    sc.validate()?;
    let (w, h) = (sc.width, sc.height);

    // Cumulative camera (world → frame t) and its inverse.
    let mut cams = Vec::with_capacity(sc.frames);
    let mut steps = Vec::with_capacity(sc.frames);
    let mut cam = Transform2D::identity();
    for t in 0..sc.frames {
        let s = sc.step_transform(t)?;
        cam = s.compose(&cam);
        steps.push(s);
        cams.push(cam);
    }
    let inv: Vec<Transform2D> = cams.iter().map(Transform2D::inverse).collect::<Result<_>>()?;

    // World region seen by any frame.
    let (mut x0, mut y0, mut x1, mut y1) = (0.0f64, 0.0f64, w as f64, h as f64);
    for i in &inv {
        for c in [(0.0, 0.0), (w as f64, 0.0), (0.0, h as f64), (w as f64, h as f64)] {
            let p = i.apply(Point::new(c.0, c.1))?;
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
    }
    let (bx, by) = (x0.floor() as i64 - 2, y0.floor() as i64 - 2);
    let (bw, bh) = ((x1.ceil() as i64 + 2 - bx) as usize, (y1.ceil() as i64 + 2 - by) as usize);
    if bw * bh > 64_000_000 {
        return Err(Scenario::invalid("camera motion sweeps an unreasonably large world region"));
    }

    let ts = sc.texture_seed;
    let tex = |purpose: u64, cell: f64, lo: f64, hi: f64| Texture {
        seed: mix_seed(ts, seed, purpose),
        cell,
        lo,
        hi,
    };
    let bg_rgb = Raster::new(&tex(1, 6.0, 0.1, 0.9), bx, by, bw, bh);
    let bg_t = Raster::new(&tex(2, 5.0, 0.05, 0.5), bx, by, bw, bh);
    let bg_t_mean = bg_t.mean();
    let (tw, th) = (sc.target[2].ceil() as usize + 2, sc.target[3].ceil() as usize + 2);
    let tgt_rgb = Raster::new(&tex(3, 3.0, 0.0, 1.0), 0, 0, tw, th);
    let tgt_t = Raster::new(&tex(4, 3.0, 0.55, 1.0), 0, 0, tw, th);
    let max_occ = sc
        .events
        .iter()
        .filter_map(|e| match e {
            Event::Occlusion { scale, .. } => Some(*scale),
            _ => None,
        })
        .fold(1.0, f64::max);
    let (ow, oh) = (
        (sc.target[2] * max_occ).ceil() as usize + 2,
        (sc.target[3] * max_occ).ceil() as usize + 2,
    );
    let occ_rgb = Raster::new(&tex(5, 3.0, 0.05, 0.95), 0, 0, ow, oh);
    let occ_t = Raster::new(&tex(6, 4.0, 0.3, 0.6), 0, 0, ow, oh);

    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(ts, seed, 7));
    let normal = Normal::new(0.0, sc.noise_sigma.max(1e-12)).expect("valid sigma");

    let mut rgb_frames = Vec::with_capacity(sc.frames);
    let mut t_frames = Vec::with_capacity(sc.frames);
    let mut gts = Vec::with_capacity(sc.frames);
    let mut truth = SynthTruth {
        transforms: steps.iter().map(|s| s.matrix()).collect(),
        occluded: vec![],
        crossover: vec![],
        illum_drop: vec![],
        camera_motion: vec![],
    };

    for t in 0..sc.frames {
        let wb = sc.world_box(t);
        let occl = sc.events.iter().find_map(|e| match e {
            Event::Occlusion { scale, .. } if e.active(t) => Some(*scale),
            _ => None,
        });
        let cross = sc.events.iter().find_map(|e| match e {
            Event::Crossover { level, .. } if e.active(t) => Some(*level),
            _ => None,
        });
        let gain = sc.events.iter().find_map(|e| match e {
            Event::IllumDrop { gain, .. } if e.active(t) => Some(*gain),
            _ => None,
        });
        if occl.is_some() {
            truth.occluded.push(t);
        }
        if cross.is_some() {
            truth.crossover.push(t);
        }
        if gain.is_some() {
            truth.illum_drop.push(t);
        }
        if sc.events.iter().any(|e| matches!(e, Event::CameraMotion { .. }) && e.active(t) && t > 0) {
            truth.camera_motion.push(t);
        }
        let occ_box = occl.map(|s| BBox::from_center(wb.center(), wb.w * s, wb.h * s).expect("positive size"));

        // Ground truth: image of the world box under the camera.
        let corners = [(wb.x, wb.y), (wb.x + wb.w, wb.y), (wb.x, wb.y + wb.h), (wb.x + wb.w, wb.y + wb.h)];
        let (mut gx0, mut gy0, mut gx1, mut gy1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for (x, y) in corners {
            let p = cams[t].apply(Point::new(x, y))?;
            gx0 = gx0.min(p.x);
            gy0 = gy0.min(p.y);
            gx1 = gx1.max(p.x);
            gy1 = gy1.max(p.y);
        }
        if gx0 < 0.0 || gy0 < 0.0 || gx1 > w as f64 || gy1 > h as f64 {
            return Err(Scenario::invalid(format!("target leaves the frame at frame {t}")));
        }
        gts.push(BBox {
            x: gx0,
            y: gy0,
            w: gx1 - gx0,
            h: gy1 - gy0,
        });

        let mut rgb = vec![0.0; w * h * 3];
        let mut th_data = vec![0.0; w * h];
        for py in 0..h {
            for px in 0..w {
                let p = inv[t].apply(Point::new(px as f64 + 0.5, py as f64 + 0.5))?;
                let in_box = |b: &BBox| p.x >= b.x && p.x < b.x + b.w && p.y >= b.y && p.y < b.y + b.h;
                let (rgb_base, tint, thermal) = if let Some(ob) = occ_box.as_ref().filter(|b| in_box(b)) {
                    let (u, v) = (p.x - ob.x, p.y - ob.y);
                    (occ_rgb.sample(u, v), TARGET_TINT, occ_t.sample(u, v))
                } else if in_box(&wb) {
                    let (u, v) = (p.x - wb.x, p.y - wb.y);
                    let hot = tgt_t.sample(u, v);
                    let thermal = match cross {
                        Some(level) => bg_t_mean + level * (hot - bg_t_mean),
                        None => hot,
                    };
                    (tgt_rgb.sample(u, v), TARGET_TINT, thermal)
                } else {
                    (bg_rgb.sample(p.x, p.y), RGB_TINT, bg_t.sample(p.x, p.y))
                };
                let g = gain.unwrap_or(1.0);
                for (c, (a, b)) in tint.iter().enumerate() {
                    let v = (a * rgb_base + b) * g;
                    rgb[(py * w + px) * 3 + c] = v;
                }
                th_data[py * w + px] = thermal;
            }
        }
        if sc.noise_sigma > 0.0 {
            rgb.iter_mut().chain(th_data.iter_mut()).for_each(|v| *v += normal.sample(&mut noise_rng));
        }
        rgb.iter_mut().chain(th_data.iter_mut()).for_each(|v| *v = v.clamp(0.0, 1.0));
        rgb_frames.push(Image::new(w, h, 3, rgb)?);
        t_frames.push(Image::new(w, h, 1, th_data)?);
    }
    let seq = Sequence::from_memory(&sc.name, rgb_frames, t_frames, gts.clone(), gts, sc.attributes())?;
    Ok((seq, truth))
}

/// Writes frames, ground truth, the manifest (`manifest.json`) and the truth
/// sidecar (`truth.json`) into `dir`.
pub fn write_sequence(dir: &Path, seq: &Sequence, truth: &SynthTruth) -> Result<()> {
    let (rgb_dir, t_dir) = (dir.join("rgb"), dir.join("t"));
    fs::create_dir_all(&rgb_dir)?;
    fs::create_dir_all(&t_dir)?;
    for i in 0..seq.len() {
        let (rgb, t) = seq.frame(i)?;
        save_image(&rgb_dir.join(format!("{i:06}.png")), &rgb)?;
        save_image(&t_dir.join(format!("{i:06}.png")), &t)?;
    }
    write_boxes(&dir.join("gt_rgb.txt"), &seq.gt_rgb)?;
    write_boxes(&dir.join("gt_t.txt"), &seq.gt_t)?;
    let manifest = Manifest {
        name: seq.name.clone(),
        rgb_dir: "rgb".into(),
        t_dir: "t".into(),
        gt_rgb: "gt_rgb.txt".into(),
        gt_t: "gt_t.txt".into(),
        attributes: seq.attributes.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("truth.json"), serde_json::to_string_pretty(truth)?)?;
    Ok(())
}
