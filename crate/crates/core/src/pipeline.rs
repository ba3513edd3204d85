//! Per-frame orchestration: camera-motion compensation, the two appearance
//! trackers, response fusion, the appearance/motion switcher and the model
//! update scheme.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cftrack::{quality, CfConfig, CfState, ResponseMap};
use crate::cme::{compensate, drastic_motion, estimate_camera_motion, motion_gate, CmeConfig, Modality};
use crate::error::{Error, Result};
use crate::fusion::{constant_fuse, fuse_responses, intensity_fuse, quality_fuse, search_patch, MfNet, MfNetConfig};
use crate::geom::{iou, BBox, Point, Transform2D};
use crate::img::{crop_resample, to_gray, Image};
use crate::motion::{KalmanConfig, KalmanState};
use crate::tmatch::Template;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwitcherThresholds {
    pub q_hi: f64,
    pub s_hi: f64,
    pub q_low: f64,
    pub s_low: f64,
    pub t_diff: f64,
    pub t_disable: f64,
    pub q_skip: f64,
}

impl Default for SwitcherThresholds {
    fn default() -> Self {
        SwitcherThresholds {
            q_hi: 210.0,
            s_hi: 15.0,
            q_low: 135.0,
            s_low: 17.0,
            t_diff: 3.0,
            t_disable: 1.0,
            q_skip: 250.0,
        }
    }
}

impl SwitcherThresholds {
    pub fn validate(&self) -> Result<()> {
        let all = [self.q_hi, self.s_hi, self.q_low, self.s_low, self.t_diff, self.t_disable, self.q_skip];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("switcher thresholds must be finite".into()));
        }
        if !(self.q_hi > self.q_low && self.q_low >= 0.0) {
            return Err(Error::Config(format!(
                "switcher needs q_hi > q_low >= 0, got q_hi={} q_low={}",
                self.q_hi, self.q_low
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Appearance,
    Motion,
}

/// The switcher rule.
pub fn decide(q: f64, s_a: f64, s_m: f64, th: &SwitcherThresholds) -> Source {
    let reliable = q > th.q_hi && s_a > th.s_hi;
    let distinctive = q > th.q_low && s_a > th.s_low && (s_a - s_m) > th.t_diff;
    let uninformative = s_a.max(s_m) < th.t_disable;
    if reliable || distinctive || uninformative {
        Source::Appearance
    } else {
        Source::Motion
    }
}

/// Highest-IoU detection when it overlaps the box by more than 0.5.
pub fn refine_box(bbox: &BBox, detections: &[BBox]) -> BBox {
    let mut best: Option<(f64, BBox)> = None;
    for d in detections {
        let o = iou(bbox, d);
        if o > 0.5 && best.map_or(true, |(b, _)| o > b) {
            best = Some((o, *d));
        }
    }
    best.map_or(*bbox, |(_, d)| d)
}

/// External detector used for box refinement on the visible frame.
pub trait Detector: Send + Sync {
    fn detect(&self, frame: &Image, region: &BBox) -> Vec<BBox>;
}

/// Default provider: no detections.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoDetector;

impl Detector for NoDetector {
    fn detect(&self, _frame: &Image, _region: &BBox) -> Vec<BBox> {
        Vec::new()
    }
}

/// Module ladder, from fusion alone to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "MF")]
    Mf,
    #[serde(rename = "MF+CME")]
    MfCme,
    #[serde(rename = "MF+CME+TMP")]
    MfCmeTmp,
    #[serde(rename = "FULL")]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Mf, Ablation::MfCme, Ablation::MfCmeTmp, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Mf => "MF",
            Ablation::MfCme => "MF+CME",
            Ablation::MfCmeTmp => "MF+CME+TMP",
            Ablation::Full => "FULL",
        }
    }

    pub fn camera_motion(self) -> bool {
        self != Ablation::Mf
    }

    pub fn motion_prediction(self) -> bool {
        matches!(self, Ablation::MfCmeTmp | Ablation::Full)
    }

    pub fn refinement(self) -> bool {
        self == Ablation::Full
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (expected MF, MF+CME, MF+CME+TMP or FULL)")))
    }
}

/// Which templates score candidate boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchSource {
    Visible,
    Thermal,
    /// A template per modality; each box keeps the better score.
    Best,
}

/// How the two response maps are combined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum FusionMode {
    /// Learned weights from the fusion network.
    Mfnet,
    /// Fixed visible weight.
    Constant { weight: f64 },
    /// Thermal-intensity penalty on the averaged maps.
    Intensity,
    /// Weights proportional to each map's tracking quality.
    Quality,
    /// Visible tracker alone (matching and camera motion also on visible).
    Visible,
    /// Thermal tracker alone (matching and camera motion also on thermal).
    Thermal,
}

impl FusionMode {
    fn single(self) -> Option<Modality> {
        match self {
            FusionMode::Visible => Some(Modality::Visible),
            FusionMode::Thermal => Some(Modality::Thermal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub ablation: Ablation,
    pub fusion: FusionMode,
    pub thresholds: SwitcherThresholds,
    pub cf: CfConfig,
    pub cme: CmeConfig,
    pub kalman: KalmanConfig,
    pub mfnet: MfNetConfig,
    /// Frames the template matcher scores.
    pub match_source: MatchSource,
    /// Tracker that localizes alone while drastic camera motion suspends
    /// fusion.
    pub suspend_modality: Modality,
    /// Ground truth used for initialization by the evaluator.
    pub init_modality: Modality,
    /// Box refinement switch (only effective in `FULL` with a detector).
    pub refine: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            ablation: Ablation::Full,
            fusion: FusionMode::Mfnet,
            thresholds: SwitcherThresholds::default(),
            cf: CfConfig::default(),
            cme: CmeConfig::default(),
            kalman: KalmanConfig::default(),
            mfnet: MfNetConfig {
                patch: 136,
                map_size: CfConfig::default().window_cells,
                ..MfNetConfig::default()
            },
            match_source: MatchSource::Best,
            suspend_modality: Modality::Thermal,
            init_modality: Modality::Thermal,
            refine: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        self.cf.validate()?;
        self.cme.validate()?;
        self.kalman.validate()?;
        if let FusionMode::Constant { weight } = self.fusion {
            if !(0.0..=1.0).contains(&weight) {
                return Err(Error::Config(format!("constant fusion weight {weight} outside [0, 1]")));
            }
        }
        if self.fusion == FusionMode::Mfnet {
            self.mfnet.validate()?;
            if self.mfnet.map_size != self.cf.window_cells {
                return Err(Error::Config(format!(
                    "fusion network map size {} differs from correlation map size {}",
                    self.mfnet.map_size, self.cf.window_cells
                )));
            }
        }
        Ok(())
    }

    fn modality(&self, default: Modality) -> Modality {
        self.fusion.single().unwrap_or(default)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Tracking quality of the fused map at the chosen scale.
    pub q: Option<f64>,
    pub s_a: Option<f64>,
    pub s_m: Option<f64>,
    /// Global fusion weight (visible share for the quality mode).
    pub w_g: Option<f64>,
    /// Camera transform from the previous frame, when estimated.
    pub camera: Option<[[f64; 3]; 3]>,
    pub motion_gate: bool,
    pub cme_fallback: bool,
    /// Fusion, switcher and refinement suspended this frame.
    pub suspended: bool,
    /// Tracking quality above the skip gate; template matching not run.
    pub skip_matching: bool,
    pub refined: bool,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub bbox: BBox,
    pub source: Source,
    pub diagnostics: Diagnostics,
}

/// One tracking session.
pub struct Tracker {
    cfg: TrackerConfig,
    cf_rgb: CfState,
    cf_t: CfState,
    kf: Option<KalmanState>,
    templates: Vec<(Modality, Template)>,
    mfnet: Option<Arc<MfNet>>,
    detector: Box<dyn Detector>,
    bbox: BBox,
    prev: Image,
    init_intensity: f64,
    frame: usize,
}

impl fmt::Debug for Tracker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tracker")
            .field("frame", &self.frame)
            .field("bbox", &self.bbox)
            .field("ablation", &self.cfg.ablation)
            .finish_non_exhaustive()
    }
}

fn pick<'a>(m: Modality, rgb: &'a Image, t: &'a Image) -> &'a Image {
    match m {
        Modality::Visible => rgb,
        Modality::Thermal => t,
    }
}

fn clamp_center(p: Point, frame: &Image) -> Point {
    Point::new(p.x.clamp(0.0, frame.width() as f64), p.y.clamp(0.0, frame.height() as f64))
}

impl Tracker {
    /// Initializes both appearance trackers, the template and the motion
    /// tracker on `init_box`. Without a network the fusion mode `mfnet`
    /// builds a freshly initialized one from the configuration.
    pub fn new(cfg: &TrackerConfig, rgb: &Image, t: &Image, init_box: &BBox, mfnet: Option<Arc<MfNet>>) -> Result<Self> {
        cfg.validate()?;
        if (rgb.width(), rgb.height()) != (t.width(), t.height()) {
            return Err(Error::DimensionMismatch(format!(
                "visible frame {}x{} vs thermal frame {}x{}",
                rgb.width(),
                rgb.height(),
                t.width(),
                t.height()
            )));
        }
        let cf_rgb = CfState::init(rgb, init_box, &cfg.cf)?;
        let cf_t = CfState::init(t, init_box, &cfg.cf)?;
        let match_mods = match (cfg.fusion.single(), cfg.match_source) {
            (Some(m), _) => vec![m],
            (None, MatchSource::Visible) => vec![Modality::Visible],
            (None, MatchSource::Thermal) => vec![Modality::Thermal],
            (None, MatchSource::Best) => vec![Modality::Visible, Modality::Thermal],
        };
        let templates = match_mods
            .into_iter()
            .map(|m| Ok((m, Template::build(pick(m, rgb, t), init_box)?)))
            .collect::<Result<_>>()?;
        let kf = cfg
            .ablation
            .motion_prediction()
            .then(|| KalmanState::init_with(init_box.center(), &cfg.kalman));
        let mfnet = match (cfg.fusion, mfnet) {
            (FusionMode::Mfnet, Some(n)) => {
                let c = n.config();
                if c.map_size != cfg.cf.window_cells {
                    return Err(Error::Config(format!(
                        "fusion network produces {0}x{0} maps, correlation maps are {1}x{1}",
                        c.map_size, cfg.cf.window_cells
                    )));
                }
                Some(n)
            }
            (FusionMode::Mfnet, None) => Some(Arc::new(MfNet::new(&cfg.mfnet)?)),
            _ => None,
        };
        let init_patch = to_gray(&crop_resample(t, init_box.center(), (init_box.w, init_box.h), (16, 16)));
        Ok(Tracker {
            cfg: cfg.clone(),
            cf_rgb,
            cf_t,
            kf,
            templates,
            mfnet,
            detector: Box::new(NoDetector),
            bbox: *init_box,
            prev: pick(cfg.modality(cfg.cme.modality), rgb, t).clone(),
            init_intensity: init_patch.mean(),
            frame: 0,
        })
    }

    pub fn set_detector(&mut self, d: Box<dyn Detector>) {
        self.detector = d;
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn frame_index(&self) -> usize {
        self.frame
    }

    pub fn cf_states(&self) -> (&CfState, &CfState) {
        (&self.cf_rgb, &self.cf_t)
    }

    pub fn kalman(&self) -> Option<&KalmanState> {
        self.kf.as_ref()
    }

    pub fn mfnet(&self) -> Option<&Arc<MfNet>> {
        self.mfnet.as_ref()
    }

    /// Result reported for the initialization frame.
    pub fn initial_result(&self) -> FrameResult {
        FrameResult {
            bbox: self.bbox,
            source: Source::Appearance,
            diagnostics: Diagnostics {
                scale: 1.0,
                ..Diagnostics::default()
            },
        }
    }

    fn fuse(&self, r_rgb: &ResponseMap, r_t: &ResponseMap, weights: Option<&ResponseMap>, patch_t: &Image) -> Result<(ResponseMap, Option<f64>)> {
        match self.cfg.fusion {
            FusionMode::Mfnet => Ok((fuse_responses(r_rgb, r_t, weights.expect("weights computed for mfnet"))?, None)),
            FusionMode::Constant { weight } => Ok((fuse_responses(r_rgb, r_t, &constant_fuse(weight, r_rgb.dims())?)?, Some(weight))),
            FusionMode::Visible => Ok((r_rgb.clone(), Some(1.0))),
            FusionMode::Thermal => Ok((r_t.clone(), Some(0.0))),
            FusionMode::Intensity => Ok((intensity_fuse(r_rgb, r_t, self.init_intensity, patch_t)?, None)),
            FusionMode::Quality => {
                let (m, (w, _)) = quality_fuse(r_rgb, r_t)?;
                Ok((m, Some(w)))
            }
        }
    }

    /// Locates the peak of `map` (computed at relative scale `mult` around
    /// `center`) and returns the corresponding box.
    fn locate(&self, map: &ResponseMap, center: Point, mult: f64, frame: &Image) -> Result<BBox> {
        let (dx, dy) = self.cf_rgb.peak_offset_px(map, mult);
        let (w, h) = self.cf_rgb.target_size();
        let c = clamp_center(Point::new(center.x + dx, center.y + dy), frame);
        BBox::from_center(c, (w * mult).max(1.0), (h * mult).max(1.0))
    }

    fn match_scores(&self, rgb: &Image, t: &Image, app: &BBox, motion: &BBox) -> Result<(f64, f64)> {
        let (mut s_a, mut s_m) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (m, tpl) in &self.templates {
            let frame = pick(*m, rgb, t);
            s_a = s_a.max(tpl.score_box(frame, app)?);
            s_m = s_m.max(tpl.score_box(frame, motion)?);
        }
        Ok((s_a, s_m))
    }

    /// Tracks one frame pair.
    pub fn step(&mut self, rgb: &Image, t: &Image) -> Result<FrameResult> {
        if (rgb.width(), rgb.height()) != (t.width(), t.height())
            || (rgb.width(), rgb.height()) != (self.prev.width(), self.prev.height())
        {
            return Err(Error::DimensionMismatch("frame size changed during tracking".into()));
        }
        self.frame += 1;
        let mut diag = Diagnostics::default();
        let mut prev_box = self.bbox;

        // (1) camera motion
        let cme_frame = pick(self.cfg.modality(self.cfg.cme.modality), rgb, t);
        let mut camera = Transform2D::identity();
        if self.cfg.ablation.camera_motion() {
            let gate = motion_gate(&self.prev, cme_frame, self.cfg.cme.gate_pixel, self.cfg.cme.gate_ratio)?;
            diag.motion_gate = gate;
            if gate {
                let cm = estimate_camera_motion(&self.prev, cme_frame, &self.cfg.cme);
                diag.cme_fallback = cm.fallback;
                diag.camera = Some(cm.transform.matrix());
                camera = cm.transform;
                if !cm.fallback {
                    prev_box = compensate(&prev_box, &camera)?;
                    let c = prev_box.center();
                    prev_box = prev_box.with_center(clamp_center(c, rgb));
                    if let Some(kf) = self.kf.as_mut() {
                        let p = camera.apply(kf.position())?;
                        let [_, vx, _, vy] = kf.state();
                        let cov = kf.covariance();
                        kf.set_parts([p.x, vx, p.y, vy], cov);
                    }
                }
            }
        }
        self.prev = cme_frame.clone();
        let center = prev_box.center();
        let (w, h) = (rgb.width() as f64, rgb.height() as f64);
        let drastic = diag.camera.is_some()
            && !diag.cme_fallback
            && drastic_motion(&camera, w, h, self.cfg.cme.drastic_frac);

        let (bbox, source) = if drastic {
            // (2) suspension: one tracker localizes alone
            diag.suspended = true;
            let cf = match self.cfg.modality(self.cfg.suspend_modality) {
                Modality::Visible => &self.cf_rgb,
                Modality::Thermal => &self.cf_t,
            };
            let (maps, best) = cf.respond(pick(self.cfg.modality(self.cfg.suspend_modality), rgb, t), center);
            let mult = cf.scale_factors()[best];
            diag.q = Some(quality(&maps[best]));
            diag.scale = cf.scale() * mult;
            if let Some(kf) = self.kf.as_mut() {
                kf.predict();
            }
            (self.locate(&maps[best], center, mult, rgb)?, Source::Appearance)
        } else {
            // (3) appearance on both modalities, fused per scale
            let single = self.cfg.fusion.single();
            let (maps_rgb, maps_t) = match single {
                Some(Modality::Visible) => {
                    let m = self.cf_rgb.respond(rgb, center).0;
                    (m.clone(), m)
                }
                Some(Modality::Thermal) => {
                    let m = self.cf_t.respond(t, center).0;
                    (m.clone(), m)
                }
                None => rayon::join(|| self.cf_rgb.respond(rgb, center).0, || self.cf_t.respond(t, center).0),
            };
            let weights = match &self.mfnet {
                Some(net) => {
                    let p = net.config().patch;
                    let fw = net.forward(&search_patch(rgb, &self.cf_rgb, center, p), &search_patch(t, &self.cf_t, center, p))?;
                    diag.w_g = Some(fw.global);
                    Some(fw.fused)
                }
                None => None,
            };
            let patch_t = match self.cfg.fusion {
                FusionMode::Intensity => to_gray(&self.cf_t.search_patch(t, center, self.cf_t.map_size())),
                _ => Image::filled(1, 1, 1, 0.0),
            };
            let mut fused = Vec::with_capacity(maps_rgb.len());
            for (a, b) in maps_rgb.iter().zip(&maps_t) {
                let (m, wg) = self.fuse(a, b, weights.as_ref(), &patch_t)?;
                if diag.w_g.is_none() {
                    diag.w_g = wg;
                }
                fused.push(m);
            }
            let best = crate::cftrack::best_scale(&fused);
            let mult = self.cf_rgb.scale_factors()[best];
            let app_box = self.locate(&fused[best], center, mult, rgb)?;
            let q = quality(&fused[best]);
            diag.q = Some(q);
            diag.scale = self.cf_rgb.scale() * mult;

            let source = match self.kf.as_mut() {
                None => Source::Appearance,
                Some(kf) => {
                    let motion_center = clamp_center(kf.predict(), rgb);
                    if q > self.cfg.thresholds.q_skip {
                        diag.skip_matching = true;
                        Source::Appearance
                    } else {
                        let motion_box = self.bbox.with_center(motion_center);
                        let (s_a, s_m) = self.match_scores(rgb, t, &app_box, &motion_box)?;
                        diag.s_a = Some(s_a);
                        diag.s_m = Some(s_m);
                        decide(q, s_a, s_m, &self.cfg.thresholds)
                    }
                }
            };
            match source {
                Source::Appearance => (app_box, source),
                Source::Motion => {
                    let c = self.kf.as_ref().expect("motion source needs the motion tracker").position();
                    diag.scale = self.cf_rgb.scale();
                    (self.bbox.with_center(clamp_center(c, rgb)), source)
                }
            }
        };

        // (4) model update
        self.update_models(rgb, t, &bbox, source)?;

        // (5) refinement
        let mut out = bbox;
        if source == Source::Appearance && !diag.suspended && self.cfg.ablation.refinement() && self.cfg.refine {
            let dets = self.detector.detect(rgb, &bbox);
            out = refine_box(&bbox, &dets);
            diag.refined = out != bbox;
        }
        self.bbox = out;
        Ok(FrameResult {
            bbox: out,
            source,
            diagnostics: diag,
        })
    }

    /// Appearance frames retrain both filters at the result and correct the
    /// motion tracker; motion frames touch neither.
    fn update_models(&mut self, rgb: &Image, t: &Image, bbox: &BBox, source: Source) -> Result<()> {
        if source == Source::Motion {
            return Ok(());
        }
        let (a, b) = (&mut self.cf_rgb, &mut self.cf_t);
        rayon::join(|| a.update(rgb, bbox), || b.update(t, bbox));
        if let Some(kf) = self.kf.as_mut() {
            kf.update(bbox.center())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Event, Scenario};

    #[test]
    fn decide_truth_table() {
        let th = SwitcherThresholds {
            t_disable: 5.0,
            ..Default::default()
        };
        assert_eq!(decide(300.0, 20.0, 5.0, &th), Source::Appearance);
        assert_eq!(decide(150.0, 18.0, 14.0, &th), Source::Appearance);
        assert_eq!(decide(100.0, 10.0, 20.0, &th), Source::Motion);
        assert_eq!(decide(100.0, 2.0, 3.0, &th), Source::Appearance);
        let default = SwitcherThresholds::default();
        assert_eq!(decide(100.0, 2.0, 3.0, &default), Source::Motion);
        assert_eq!(decide(100.0, 0.5, 0.9, &default), Source::Appearance);
        // each disjunct alone
        assert_eq!(decide(211.0, 16.0, 16.0, &th), Source::Appearance);
        assert_eq!(decide(210.0, 16.0, 16.0, &th), Source::Motion);
        assert_eq!(decide(136.0, 17.5, 14.0, &th), Source::Appearance);
        assert_eq!(decide(136.0, 17.5, 14.5, &th), Source::Motion);
    }

    #[test]
    fn thresholds_validate() {
        assert!(SwitcherThresholds::default().validate().is_ok());
        let bad = SwitcherThresholds {
            q_hi: 100.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let nan = SwitcherThresholds {
            t_diff: f64::NAN,
            ..Default::default()
        };
        assert!(nan.validate().is_err());
    }

    #[test]
    fn refine_examples() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(refine_box(&b, &[]), b);
        let d9 = BBox::new(0.0, 0.0, 10.0, 9.0).unwrap();
        assert!((iou(&b, &d9) - 0.9).abs() < 1e-12);
        assert_eq!(refine_box(&b, &[d9]), d9);
        let d6 = BBox::new(0.0, 0.0, 10.0, 6.0).unwrap();
        let d8 = BBox::new(0.0, 0.0, 10.0, 8.0).unwrap();
        assert_eq!(refine_box(&b, &[d6, d8]), d8);
        let far = BBox::new(20.0, 20.0, 10.0, 10.0).unwrap();
        assert_eq!(refine_box(&b, &[far]), b);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("MF+TMP".parse::<Ablation>().is_err());
    }

    fn quick_cfg(fusion: FusionMode) -> TrackerConfig {
        TrackerConfig {
            fusion,
            mfnet: MfNetConfig {
                patch: 72,
                map_size: 32,
                stem_channels: [4, 8, 8],
                head_channels: 8,
                seed: 1,
            },
            ..TrackerConfig::default()
        }
    }

    fn static_scene() -> (Vec<Image>, Vec<Image>, BBox) {
        let sc = Scenario {
            frames: 3,
            velocity: [0.0, 0.0],
            noise_sigma: 0.0,
            ..Scenario::default()
        };
        let (seq, _) = generate(&sc, 0).unwrap();
        let frames: Vec<(Image, Image)> = (0..3).map(|i| seq.frame(i).unwrap()).collect();
        (
            frames.iter().map(|f| f.0.clone()).collect(),
            frames.iter().map(|f| f.1.clone()).collect(),
            seq.gt_t[0],
        )
    }

    #[test]
    fn identical_frame_stays_put() {
        let (rgb, t, gt) = static_scene();
        for fusion in [FusionMode::Mfnet, FusionMode::Quality, FusionMode::Constant { weight: 0.5 }] {
            let mut tr = Tracker::new(&quick_cfg(fusion), &rgb[0], &t[0], &gt, None).unwrap();
            let r = tr.step(&rgb[1], &t[1]).unwrap();
            assert_eq!(r.source, Source::Appearance);
            let d = r.bbox.center().dist(&gt.center());
            assert!(d <= 4.0 * 2.0 * gt.w / 128.0 + 1e-9 || d < 1.0, "{fusion:?}: moved {d}");
            assert!(r.diagnostics.q.is_some());
        }
    }

    #[test]
    fn motion_frames_freeze_filters() {
        let (rgb, t, gt) = static_scene();
        // Unreachable thresholds force the motion source.
        let cfg = TrackerConfig {
            thresholds: SwitcherThresholds {
                q_hi: 1e9,
                q_low: 1e8,
                q_skip: 1e10,
                t_disable: -1.0,
                ..Default::default()
            },
            ..quick_cfg(FusionMode::Quality)
        };
        let mut tr = Tracker::new(&cfg, &rgb[0], &t[0], &gt, None).unwrap();
        let (a, b) = (tr.cf_states().0.clone(), tr.cf_states().1.clone());
        let kf0 = tr.kalman().unwrap().clone();
        for _ in 0..5 {
            let r = tr.step(&rgb[1], &t[1]).unwrap();
            assert_eq!(r.source, Source::Motion);
        }
        assert_eq!(tr.cf_states().0, &a);
        assert_eq!(tr.cf_states().1, &b);
        let mut expect = kf0;
        for _ in 0..5 {
            expect.predict();
        }
        assert_eq!(tr.kalman().unwrap(), &expect);
    }

    #[test]
    fn appearance_frames_update_models() {
        let (rgb, t, gt) = static_scene();
        let cfg = TrackerConfig {
            thresholds: SwitcherThresholds {
                t_disable: 1e9,
                ..Default::default()
            },
            ..quick_cfg(FusionMode::Quality)
        };
        let mut tr = Tracker::new(&cfg, &rgb[0], &t[0], &gt, None).unwrap();
        let (a, b) = (tr.cf_states().0.clone(), tr.cf_states().1.clone());
        let tr0 = tr.kalman().unwrap().trace();
        let r = tr.step(&rgb[1], &t[1]).unwrap();
        assert_eq!(r.source, Source::Appearance);
        assert_ne!(tr.cf_states().0, &a);
        assert_ne!(tr.cf_states().1, &b);
        // predict adds uncertainty, the innovation removes some of it again
        assert!(tr.kalman().unwrap().trace() < tr0 + 2.0 * 25.0 + 2.0 * 10.0 + 200.0);
    }

    #[test]
    fn drastic_pan_suspends_fusion() {
        let sc = Scenario {
            frames: 2,
            velocity: [0.0, 0.0],
            target: [50.0, 50.0, 24.0, 24.0],
            noise_sigma: 0.0,
            events: vec![Event::CameraMotion { start: 1, end: 2, dx: 45.0, dy: 0.0, angle: 0.0, scale: 1.0 }],
            ..Scenario::default()
        };
        let (seq, _) = generate(&sc, 0).unwrap();
        let (r0, t0) = seq.frame(0).unwrap();
        let cfg = quick_cfg(FusionMode::Mfnet);
        let mut tr = Tracker::new(&cfg, &r0, &t0, &seq.gt_t[0], None).unwrap();
        let net_before = tr.mfnet().unwrap().to_bytes();
        let (r1, t1) = seq.frame(1).unwrap();
        let r = tr.step(&r1, &t1).unwrap();
        assert!(r.diagnostics.motion_gate);
        assert!(!r.diagnostics.cme_fallback);
        assert!(r.diagnostics.suspended);
        assert!((r.bbox.center().x - seq.gt_t[1].center().x).abs() < 4.0);
        assert!(r.diagnostics.s_a.is_none() && r.diagnostics.w_g.is_none());
        assert_eq!(r.source, Source::Appearance);
        assert_eq!(tr.mfnet().unwrap().to_bytes(), net_before);
    }

    struct Fixed(BBox);

    impl Detector for Fixed {
        fn detect(&self, _frame: &Image, _region: &BBox) -> Vec<BBox> {
            vec![self.0]
        }
    }

    #[test]
    fn refinement_only_in_full() {
        let (rgb, t, gt) = static_scene();
        let det = BBox::new(gt.x + 1.0, gt.y, gt.w, gt.h).unwrap();
        for (ablation, expect) in [(Ablation::Full, true), (Ablation::MfCmeTmp, false)] {
            let cfg = TrackerConfig {
                ablation,
                ..quick_cfg(FusionMode::Quality)
            };
            let mut tr = Tracker::new(&cfg, &rgb[0], &t[0], &gt, None).unwrap();
            tr.set_detector(Box::new(Fixed(det)));
            let r = tr.step(&rgb[1], &t[1]).unwrap();
            assert_eq!(r.diagnostics.refined, expect);
            if expect {
                assert_eq!(r.bbox, det);
            }
        }
    }

    #[test]
    fn deterministic_steps() {
        let (rgb, t, gt) = static_scene();
        let cfg = quick_cfg(FusionMode::Mfnet);
        let run = || {
            let mut tr = Tracker::new(&cfg, &rgb[0], &t[0], &gt, None).unwrap();
            (1..3).map(|i| tr.step(&rgb[i], &t[i]).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_network_rejected() {
        let (rgb, t, gt) = static_scene();
        let cfg = quick_cfg(FusionMode::Mfnet);
        let net = MfNet::new(&MfNetConfig {
            map_size: 16,
            ..cfg.mfnet.clone()
        })
        .unwrap();
        assert!(Tracker::new(&cfg, &rgb[0], &t[0], &gt, Some(Arc::new(net))).is_err());
    }
}
