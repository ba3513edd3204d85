//! Combining the visible and thermal modalities: late fusion of response
//! maps, the learned weight generator and its training, the baseline fusion
//! rules, pixel-level image fusion and image-fusion quality metrics.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cftrack::{quality, CfConfig, CfState, ResponseMap};
use crate::error::{Error, Result};
use crate::geom::{BBox, Point};
use crate::img::{crop_resample, resize_plane, to_gray, Image};
use crate::nnet::{read_checkpoint, write_checkpoint, Layer, Network, Tensor};

fn check_dims(a: &ResponseMap, b: &ResponseMap, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `R_F = W ⊙ R_RGB + (1 − W) ⊙ R_T`.
pub fn fuse_responses(r_rgb: &ResponseMap, r_t: &ResponseMap, wf: &ResponseMap) -> Result<ResponseMap> {
    check_dims(r_rgb, r_t, "response maps")?;
    check_dims(r_rgb, wf, "weight map")?;
    let data = r_rgb
        .data
        .iter()
        .zip(&r_t.data)
        .zip(&wf.data)
        .map(|((a, b), w)| w * a + (1.0 - w) * b)
        .collect();
    Ok(ResponseMap { data, ..*r_rgb })
}

/// Uniform weight map.
pub fn constant_fuse(w: f64, dims: (usize, usize)) -> Result<ResponseMap> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::OutOfRange(format!("constant fusion weight {w} outside [0, 1]")));
    }
    Ok(ResponseMap::filled(dims.0, dims.1, w))
}

/// Penalty `min(i_t/i_1, i_1/i_t)` per cell, with the thermal patch
/// resampled to `dims` and clamped to at least 1e-6.
pub fn intensity_penalty(i1: f64, patch_t: &Image, dims: (usize, usize)) -> ResponseMap {
    let g = to_gray(patch_t);
    let plane = resize_plane(g.data(), g.width(), g.height(), dims.0, dims.1);
    let i1 = i1.max(1e-6);
    let data = plane
        .into_iter()
        .map(|v| {
            let it = v.max(1e-6);
            (it / i1).min(i1 / it)
        })
        .collect();
    ResponseMap {
        width: dims.0,
        height: dims.1,
        data,
    }
}

/// `R_F = ½ · P ⊙ (R_RGB + R_T)` with the thermal-intensity penalty `P`.
pub fn intensity_fuse(r_rgb: &ResponseMap, r_t: &ResponseMap, i1: f64, patch_t: &Image) -> Result<ResponseMap> {
    check_dims(r_rgb, r_t, "response maps")?;
    let p = intensity_penalty(i1, patch_t, r_rgb.dims());
    let data = r_rgb
        .data
        .iter()
        .zip(&r_t.data)
        .zip(&p.data)
        .map(|((a, b), p)| 0.5 * p * (a + b))
        .collect();
    Ok(ResponseMap { data, ..*r_rgb })
}

/// Reliability-weighted average; returns the map and the `(rgb, thermal)`
/// weights, which are nonnegative and sum to one.
pub fn quality_fuse(r_rgb: &ResponseMap, r_t: &ResponseMap) -> Result<(ResponseMap, (f64, f64))> {
    check_dims(r_rgb, r_t, "response maps")?;
    let (q_rgb, q_t) = (quality(r_rgb).max(0.0), quality(r_t).max(0.0));
    let total = q_rgb + q_t;
    let (w_rgb, w_t) = if total < 1e-9 {
        (0.5, 0.5)
    } else {
        (q_rgb / total, q_t / total)
    };
    let data = r_rgb.data.iter().zip(&r_t.data).map(|(a, b)| w_rgb * a + w_t * b).collect();
    Ok((ResponseMap { data, ..*r_rgb }, (w_rgb, w_t)))
}

/// Pixel-level fusion `I_F = W ⊙ I_RGB + (1 − W) ⊙ I_T` of grayscale frames.
pub fn fuse_images(i_rgb: &Image, i_t: &Image, wf: &ResponseMap) -> Result<Image> {
    let (a, b) = (to_gray(i_rgb), to_gray(i_t));
    if (a.width(), a.height()) != (b.width(), b.height()) || (a.width(), a.height()) != wf.dims() {
        return Err(Error::DimensionMismatch(format!(
            "visible {}x{}, thermal {}x{}, weights {:?}",
            a.width(),
            a.height(),
            b.width(),
            b.height(),
            wf.dims()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(&wf.data)
        .map(|((x, y), w)| if *w == 1.0 { *x } else { w * x + (1.0 - w) * y })
        .collect();
    Image::new(a.width(), a.height(), 1, data)
}

fn bin256(v: f64) -> usize {
    ((v * 256.0).floor().max(0.0) as usize).min(255)
}

fn entropy_of(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Shannon entropy in bits of the 256-bin gray histogram.
pub fn entropy(img: &Image) -> f64 {
    let g = to_gray(img);
    let mut hist = [0usize; 256];
    g.data().iter().for_each(|&v| hist[bin256(v)] += 1);
    entropy_of(hist.into_iter(), g.data().len() as f64)
}

/// Mutual information in bits from the 256×256 joint histogram.
pub fn mutual_information(a: &Image, b: &Image) -> Result<f64> {
    let (a, b) = (to_gray(a), to_gray(b));
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::DimensionMismatch("mutual information needs equal sizes".into()));
    }
    let mut joint = vec![0usize; 256 * 256];
    for (x, y) in a.data().iter().zip(b.data()) {
        joint[bin256(*x) * 256 + bin256(*y)] += 1;
    }
    let n = a.data().len() as f64;
    Ok(entropy(&a) + entropy(&b) - entropy_of(joint.into_iter(), n))
}

/// Mean SSIM over valid 11×11 Gaussian (σ = 1.5) windows; the window is
/// shrunk for images smaller than 11 px.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (a, b) = (to_gray(a), to_gray(b));
    let (w, h) = (a.width(), a.height());
    if (w, h) != (b.width(), b.height()) {
        return Err(Error::DimensionMismatch("ssim needs equal sizes".into()));
    }
    let side = 11.min(w).min(h);
    let side = if side % 2 == 0 { side - 1 } else { side };
    let r = (side / 2) as isize;
    let mut kern: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let s: f64 = kern.iter().sum();
    kern.iter_mut().for_each(|k| *k /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (pa, pb) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - side) {
        for x0 in 0..=(w - side) {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..side {
                for i in 0..side {
                    let k = kern[i] * kern[j];
                    let idx = (y0 + j) * w + x0 + i;
                    let (u, v) = (pa[idx], pb[idx]);
                    ma += k * u;
                    mb += k * v;
                    saa += k * u * u;
                    sbb += k * v * v;
                    sab += k * u * v;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------

/// Output of the weight generator.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub global: f64,
    pub local: ResponseMap,
    /// `global · local`, the map applied to the visible response.
    pub fused: ResponseMap,
}

impl FusionWeights {
    fn new(global: f64, local: ResponseMap) -> Self {
        let fused = local.scaled(global);
        FusionWeights { global, local, fused }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfNetConfig {
    /// Square input patch side; must be `64·s + 8` for an integer `s ≥ 1`.
    pub patch: usize,
    /// Side of the produced weight maps (matches the response maps).
    pub map_size: usize,
    pub stem_channels: [usize; 3],
    pub head_channels: usize,
    pub seed: u64,
}

impl Default for MfNetConfig {
    fn default() -> Self {
        MfNetConfig {
            patch: 200,
            map_size: 32,
            stem_channels: [8, 32, 256],
            head_channels: 256,
            seed: 0,
        }
    }
}

impl MfNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch < 72 || (self.patch - 8) % 64 != 0 {
            return Err(Error::Config(format!(
                "mfnet.patch must be 64*s + 8 (72, 136, 200, ...), got {}",
                self.patch
            )));
        }
        if self.map_size == 0 || self.head_channels == 0 || self.stem_channels.contains(&0) {
            return Err(Error::Config("mfnet sizes must be positive".into()));
        }
        Ok(())
    }

    /// Spatial side of the stem output.
    pub fn feature_side(&self) -> usize {
        (self.patch - 8) / 8 + 1
    }

    fn global_stride(&self) -> usize {
        (self.patch - 8) / 64
    }
}

/// Weight generator: a frozen per-modality feature stem, a global head
/// producing one scalar and a local head producing a spatial map.
#[derive(Debug, Clone, PartialEq)]
pub struct MfNet {
    cfg: MfNetConfig,
    stem: Network,
    global: Network,
    local: Network,
}

fn stem_layers(c: [usize; 3]) -> Vec<Layer> {
    vec![
        Layer::conv2d(3, 3, 1, c[0], 2, 1),
        Layer::Relu,
        Layer::lrn(),
        Layer::conv2d(3, 3, c[0], c[1], 2, 1),
        Layer::Relu,
        Layer::lrn(),
        Layer::conv2d(3, 3, c[1], c[2], 2, 1),
        Layer::Relu,
        Layer::lrn(),
    ]
}

fn global_layers(cfg: &MfNetConfig) -> Vec<Layer> {
    let cin = 2 * cfg.stem_channels[2];
    vec![
        Layer::conv2d(3, 3, cin, cfg.head_channels, cfg.global_stride(), 1),
        Layer::Relu,
        Layer::lrn(),
        Layer::conv2d(9, 9, cfg.head_channels, 1, 1, 0),
        Layer::Sigmoid,
    ]
}

fn local_layers(cfg: &MfNetConfig) -> Vec<Layer> {
    let cin = 2 * cfg.stem_channels[2];
    vec![
        Layer::deconv2d(3, 3, cin, cfg.head_channels, 2, 1),
        Layer::Relu,
        Layer::deconv2d(3, 3, cfg.head_channels, 1, 2, 1),
        Layer::BilinearResize {
            h: cfg.map_size,
            w: cfg.map_size,
        },
        Layer::Sigmoid,
    ]
}

fn patch_tensor(p: &Image) -> Tensor {
    let g = to_gray(p);
    Tensor {
        c: 1,
        h: g.height(),
        w: g.width(),
        data: g.data().iter().map(|v| v - 0.5).collect(),
    }
}

fn last_param_layer(net: &mut Network) -> Option<&mut crate::nnet::ConvParams> {
    net.layers_mut().iter_mut().rev().find_map(|l| match l {
        Layer::Conv2d(p) | Layer::Deconv2d(p) => Some(p),
        _ => None,
    })
}

impl MfNet {
    pub fn new(cfg: &MfNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stem = Network::new(stem_layers(cfg.stem_channels));
        let mut global = Network::new(global_layers(cfg));
        let mut local = Network::new(local_layers(cfg));
        stem.init_params(cfg.seed);
        global.init_params(cfg.seed.wrapping_add(1));
        local.init_params(cfg.seed.wrapping_add(2));
        let net = MfNet {
            cfg: cfg.clone(),
            stem,
            global,
            local,
        };
        let f = cfg.feature_side();
        debug_assert_eq!(net.stem.output_shape((1, cfg.patch, cfg.patch))?, (cfg.stem_channels[2], f, f));
        debug_assert_eq!(net.global.output_shape((2 * cfg.stem_channels[2], f, f))?, (1, 1, 1));
        Ok(net)
    }

    pub fn config(&self) -> &MfNetConfig {
        &self.cfg
    }

    pub fn stem(&self) -> &Network {
        &self.stem
    }

    pub fn global_head(&self) -> &Network {
        &self.global
    }

    pub fn local_head(&self) -> &Network {
        &self.local
    }

    pub fn global_head_mut(&mut self) -> &mut Network {
        &mut self.global
    }

    pub fn local_head_mut(&mut self) -> &mut Network {
        &mut self.local
    }

    /// Zeroes the last learnable layer of both heads (outputs become 0.5).
    pub fn zero_final_layers(&mut self) {
        for net in [&mut self.global, &mut self.local] {
            if let Some(p) = last_param_layer(net) {
                p.weight.fill(0.0);
                p.bias.fill(0.0);
            }
        }
    }

    fn check_patch(&self, p: &Image) -> Result<()> {
        if p.width() != self.cfg.patch || p.height() != self.cfg.patch {
            return Err(Error::DimensionMismatch(format!(
                "patch is {}x{}, network expects {}x{}",
                p.width(),
                p.height(),
                self.cfg.patch,
                self.cfg.patch
            )));
        }
        Ok(())
    }

    /// Concatenated stem features of the two modality patches.
    pub fn features(&self, p_rgb: &Image, p_t: &Image) -> Result<Tensor> {
        self.check_patch(p_rgb)?;
        self.check_patch(p_t)?;
        let a = self.stem.infer(&patch_tensor(p_rgb))?;
        let b = self.stem.infer(&patch_tensor(p_t))?;
        Tensor::concat_channels(&[&a, &b])
    }

    pub fn weights_from_features(&self, feat: &Tensor) -> Result<FusionWeights> {
        let g = self.global.infer(feat)?.data[0];
        let l = self.local.infer(feat)?;
        Ok(FusionWeights::new(g, ResponseMap::new(l.w, l.h, l.data)?))
    }

    pub fn forward(&self, p_rgb: &Image, p_t: &Image) -> Result<FusionWeights> {
        self.weights_from_features(&self.features(p_rgb, p_t)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        write_checkpoint(&[&self.stem, &self.global, &self.local])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nets = read_checkpoint(bytes)?;
        let [stem, global, local]: [Network; 3] = nets
            .try_into()
            .map_err(|v: Vec<Network>| Error::Checkpoint(format!("expected 3 sections, found {}", v.len())))?;
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let convs = |n: &Network| -> Vec<(usize, usize, usize, usize)> {
            n.layers()
                .iter()
                .filter_map(|l| match l {
                    Layer::Conv2d(p) | Layer::Deconv2d(p) => Some((p.cin, p.cout, p.stride, p.kh)),
                    _ => None,
                })
                .collect()
        };
        let sc = convs(&stem);
        let gc = convs(&global);
        if sc.len() != 3 || gc.len() != 2 {
            return Err(bad("unexpected layer layout"));
        }
        let map_size = local
            .layers()
            .iter()
            .find_map(|l| match l {
                Layer::BilinearResize { h, .. } => Some(*h),
                _ => None,
            })
            .ok_or_else(|| bad("local head has no resize layer"))?;
        let cfg = MfNetConfig {
            patch: 64 * gc[0].2 + 8,
            map_size,
            stem_channels: [sc[0].1, sc[1].1, sc[2].1],
            head_channels: gc[0].1,
            seed: 0,
        };
        let template = MfNet::new(&cfg)?;
        let shape = |n: &Network| n.layers().iter().map(|l| (l.kind(), l.params().map(|p| (p.kh, p.kw, p.cin, p.cout, p.stride, p.pad)))).collect::<Vec<_>>();
        if shape(&template.stem) != shape(&stem) || shape(&template.global) != shape(&global) || shape(&template.local) != shape(&local) {
            return Err(bad("layer layout does not form a weight generator"));
        }
        Ok(MfNet { cfg, stem, global, local })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

// ---------------------------------------------------------------------------

/// One supervised example: search-region patches of both modalities, the
/// desired response and the frozen per-modality responses at that frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub p_rgb: Image,
    pub p_t: Image,
    pub y: ResponseMap,
    pub r_rgb: ResponseMap,
    pub r_t: ResponseMap,
}

/// Builds a pair from an initial frame (where both correlation filters are
/// trained on `init_box`) and a label frame a few frames later, searched
/// around the initial center.
#[allow(clippy::too_many_arguments)]
pub fn make_train_pair(
    init_rgb: &Image,
    init_t: &Image,
    init_box: &BBox,
    label_rgb: &Image,
    label_t: &Image,
    label_box: &BBox,
    cf: &CfConfig,
    patch: usize,
) -> Result<TrainPair> {
    let cf_rgb = CfState::init(init_rgb, init_box, cf)?;
    let cf_t = CfState::init(init_t, init_box, cf)?;
    let center = init_box.center();
    let r_rgb = cf_rgb.respond_at(label_rgb, center, 1.0);
    let r_t = cf_t.respond_at(label_t, center, 1.0);
    let y = desired_response(&cf_rgb, init_box, center, label_box.center());
    Ok(TrainPair {
        p_rgb: to_gray(&cf_rgb.search_patch(label_rgb, center, (patch, patch))),
        p_t: to_gray(&cf_t.search_patch(label_t, center, (patch, patch))),
        y,
        r_rgb,
        r_t,
    })
}

/// Gaussian label on the response grid, peaked where `target` falls in the
/// search window centered at `center`, with the filter's label σ.
pub fn desired_response(cf: &CfState, bbox: &BBox, center: Point, target: Point) -> ResponseMap {
    let c = cf.config();
    let n = c.window_cells;
    let (ww, wh) = cf.window_px(1.0);
    let sigma_px = c.sigma_factor * (bbox.w * bbox.h).sqrt();
    let (sx, sy) = (sigma_px * n as f64 / ww, sigma_px * n as f64 / wh);
    let mid = (n / 2) as f64;
    let px = mid + (target.x - center.x) * n as f64 / ww;
    let py = mid + (target.y - center.y) * n as f64 / wh;
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - px, y as f64 - py);
            data.push((-0.5 * (dx * dx / (sx * sx) + dy * dy / (sy * sy))).exp());
        }
    }
    ResponseMap {
        width: n,
        height: n,
        data,
    }
}

const PAIR_MAGIC: &[u8; 4] = b"TPR1";

fn put_f32s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated pair record".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn get_f32s(r: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated pair record".into()))?;
            Ok(f32::from_le_bytes(b) as f64)
        })
        .collect()
}

impl TrainPair {
    /// Record layout: magic, u32 patch side, u32 map width, u32 map height,
    /// then f32 planes p_rgb, p_t, y, r_rgb, r_t (little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PAIR_MAGIC);
        for d in [self.p_rgb.width(), self.y.width, self.y.height] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, to_gray(&self.p_rgb).data());
        put_f32s(&mut out, to_gray(&self.p_t).data());
        for m in [&self.y, &self.r_rgb, &self.r_t] {
            put_f32s(&mut out, &m.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != PAIR_MAGIC {
            return Err(Error::Checkpoint("bad pair record magic".into()));
        }
        let mut r = &bytes[4..];
        let p = get_u32(&mut r)? as usize;
        let (mw, mh) = (get_u32(&mut r)? as usize, get_u32(&mut r)? as usize);
        let clamp = |v: Vec<f64>| v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect::<Vec<_>>();
        let p_rgb = Image::new(p, p, 1, clamp(get_f32s(&mut r, p * p)?))?;
        let p_t = Image::new(p, p, 1, clamp(get_f32s(&mut r, p * p)?))?;
        let mut maps = Vec::with_capacity(3);
        for _ in 0..3 {
            maps.push(ResponseMap::new(mw, mh, get_f32s(&mut r, mw * mh)?)?);
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes in pair record".into()));
        }
        let r_t = maps.pop().expect("three maps");
        let r_rgb = maps.pop().expect("three maps");
        let y = maps.pop().expect("three maps");
        Ok(TrainPair { p_rgb, p_t, y, r_rgb, r_t })
    }
}

/// Writes `pair_NNNNN.bin` records into `dir`.
pub fn save_pairs(dir: &Path, pairs: &[TrainPair]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, p) in pairs.iter().enumerate() {
        fs::File::create(dir.join(format!("pair_{i:05}.bin")))?.write_all(&p.to_bytes())?;
    }
    Ok(())
}

pub fn load_pairs(dir: &Path) -> Result<Vec<TrainPair>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    names.sort();
    names.iter().map(|p| TrainPair::from_bytes(&fs::read(p)?)).collect()
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    /// Epochs for: global head alone, local head with the global frozen,
    /// joint fine-tuning.
    pub epochs: [usize; 3],
    pub lr: [f64; 3],
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: [20, 20, 10],
            lr: [1e-5, 1e-5, 1e-7],
            batch: 8,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if self.lr.iter().any(|l| !(*l >= 0.0)) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train: lr, momentum or weight_decay out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-pair loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
    /// Stage (1, 2 or 3) of each epoch.
    pub stages: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Global,
    Local,
    Joint,
}

/// Squared-error loss of the fused response and its gradient with respect
/// to the fused weight map.
fn fused_loss(wf: &[f64], pair: &TrainPair) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(wf.len());
    for (((w, a), b), y) in wf.iter().zip(&pair.r_rgb.data).zip(&pair.r_t.data).zip(&pair.y.data) {
        let e = w * a + (1.0 - w) * b - y;
        loss += e * e;
        grad.push(2.0 * e * (a - b));
    }
    (loss, grad)
}

fn check_pair(net: &MfNet, p: &TrainPair) -> Result<()> {
    let m = net.cfg.map_size;
    for map in [&p.y, &p.r_rgb, &p.r_t] {
        if map.dims() != (m, m) {
            return Err(Error::DimensionMismatch(format!("pair map {:?}, network emits {m}x{m}", map.dims())));
        }
    }
    Ok(())
}

impl MfNet {
    fn head_mut(&mut self, head: usize) -> &mut Network {
        if head == 0 {
            &mut self.global
        } else {
            &mut self.local
        }
    }

    /// Loss of one example (features precomputed) with gradients accumulated
    /// into the heads selected by `stage`.
    fn loss_backward(&mut self, feat: &Tensor, pair: &TrainPair, stage: Stage) -> Result<f64> {
        let g = self.global.forward(feat)?.data[0];
        let local = if stage == Stage::Global {
            vec![1.0; pair.y.data.len()]
        } else {
            self.local.forward(feat)?.data
        };
        let wf: Vec<f64> = local.iter().map(|l| g * l).collect();
        let (loss, d_wf) = fused_loss(&wf, pair);
        if stage != Stage::Local {
            let dg: f64 = d_wf.iter().zip(&local).map(|(d, l)| d * l).sum();
            self.global.backward(&Tensor::new(1, 1, 1, vec![dg])?)?;
        }
        if stage != Stage::Global {
            let m = self.cfg.map_size;
            let dl = d_wf.iter().map(|d| d * g).collect();
            self.local.backward(&Tensor::new(1, m, m, dl)?)?;
        }
        Ok(loss)
    }

    /// Loss of one example under the full model `W_F = w_G · W_L`.
    pub fn pair_loss(&self, pair: &TrainPair) -> Result<f64> {
        let w = self.forward(&pair.p_rgb, &pair.p_t)?;
        Ok(fused_loss(&w.fused.data, pair).0)
    }

    /// Staged training against frozen per-modality responses. Only head
    /// parameters change; the stem stays fixed.
    pub fn train(&mut self, data: &[TrainPair], sched: &TrainSchedule) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        sched.validate()?;
        for p in data {
            check_pair(self, p)?;
        }
        let feats: Vec<Tensor> = data.iter().map(|p| self.features(&p.p_rgb, &p.p_t)).collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
        let mut report = TrainReport {
            epoch_losses: vec![],
            stages: vec![],
        };
        let stages = [Stage::Global, Stage::Local, Stage::Joint];
        for (si, &stage) in stages.iter().enumerate() {
            self.global.reset_momentum();
            self.local.reset_momentum();
            let lr = sched.lr[si];
            let mut order: Vec<usize> = (0..data.len()).collect();
            for _ in 0..sched.epochs[si] {
                order.shuffle(&mut rng);
                let mut total = 0.0;
                for batch in order.chunks(sched.batch) {
                    self.global.zero_grad();
                    self.local.zero_grad();
                    for &i in batch {
                        total += self.loss_backward(&feats[i], &data[i], stage)?;
                    }
                    let s = 1.0 / batch.len() as f64;
                    if stage != Stage::Local {
                        self.global.scale_grad(s);
                        self.global.sgd_step(lr, sched.momentum, sched.weight_decay);
                    }
                    if stage != Stage::Global {
                        self.local.scale_grad(s);
                        self.local.sgd_step(lr, sched.momentum, sched.weight_decay);
                    }
                }
                report.epoch_losses.push(total / data.len() as f64);
                report.stages.push(si as u8 + 1);
            }
        }
        self.global.zero_grad();
        self.local.zero_grad();
        Ok(report)
    }

    /// Worst relative error between analytic and central-difference
    /// gradients of the fused-response loss of `pair` with respect to head
    /// parameters (at most `max_params` per head, seeded subset).
    pub fn loss_grad_check(&mut self, pair: &TrainPair, eps: f64, max_params: usize) -> Result<f64> {
        check_pair(self, pair)?;
        let feat = self.features(&pair.p_rgb, &pair.p_t)?;
        self.global.zero_grad();
        self.local.zero_grad();
        self.loss_backward(&feat, pair, Stage::Joint)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x6c6f_7373);
        let mut worst: f64 = 0.0;
        for head in 0..2 {
            let analytic = if head == 0 { self.global.grads_flat() } else { self.local.grads_flat() };
            let n = analytic.len();
            let idx: Vec<usize> = if n > max_params {
                (0..max_params).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            for i in idx {
                let orig = self.head_mut(head).param(i);
                self.head_mut(head).set_param(i, orig + eps);
                let lp = fused_loss(&self.weights_from_features(&feat)?.fused.data, pair).0;
                self.head_mut(head).set_param(i, orig - eps);
                let lm = fused_loss(&self.weights_from_features(&feat)?.fused.data, pair).0;
                self.head_mut(head).set_param(i, orig);
                let numeric = (lp - lm) / (2.0 * eps);
                let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        self.global.zero_grad();
        self.local.zero_grad();
        Ok(worst)
    }
}

/// Search-window patch for the weight generator.
pub fn search_patch(frame: &Image, cf: &CfState, center: Point, patch: usize) -> Image {
    to_gray(&crop_resample(frame, center, cf.window_px(1.0), (patch, patch)))
}
