//! Sequence loading, one-pass evaluation and the cross-modality success and
//! precision metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cme::Modality;
use crate::error::{Error, Result};
use crate::cftrack::CfConfig;
use crate::fusion::{make_train_pair, MfNet, TrainPair};
use crate::geom::{center_error, iou, BBox};
use crate::img::{load_image, load_thermal, Image};
use crate::pipeline::{FrameResult, Tracker, TrackerConfig};

/// On-disk sequence description; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub rgb_dir: PathBuf,
    pub t_dir: PathBuf,
    pub gt_rgb: PathBuf,
    pub gt_t: PathBuf,
    #[serde(default)]
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
enum Frames {
    Files { rgb: Vec<PathBuf>, t: Vec<PathBuf> },
    Memory { rgb: Vec<Image>, t: Vec<Image> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    frames: Frames,
    pub gt_rgb: Vec<BBox>,
    pub gt_t: Vec<BBox>,
    pub attributes: Vec<String>,
}

fn check_counts(name: &str, n_rgb: usize, n_t: usize, gt_rgb: &[BBox], gt_t: &[BBox]) -> Result<()> {
    if n_rgb != n_t || n_rgb != gt_rgb.len() || n_rgb != gt_t.len() {
        return Err(Error::CountMismatch(format!(
            "{name}: {n_rgb} visible frames, {n_t} thermal frames, {} visible boxes, {} thermal boxes",
            gt_rgb.len(),
            gt_t.len()
        )));
    }
    for (i, b) in gt_rgb.iter().chain(gt_t).enumerate() {
        if !b.is_valid() {
            return Err(Error::InvalidBox {
                x: b.x,
                y: b.y,
                w: b.w,
                h: b.h,
            }
            .at_frame(i % n_rgb.max(1)));
        }
    }
    Ok(())
}

impl Sequence {
    pub fn from_memory(
        name: &str,
        rgb: Vec<Image>,
        t: Vec<Image>,
        gt_rgb: Vec<BBox>,
        gt_t: Vec<BBox>,
        attributes: Vec<String>,
    ) -> Result<Self> {
        check_counts(name, rgb.len(), t.len(), &gt_rgb, &gt_t)?;
        Ok(Sequence {
            name: name.to_string(),
            frames: Frames::Memory { rgb, t },
            gt_rgb,
            gt_t,
            attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.gt_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Visible and thermal frame `i`; file-backed sequences decode lazily.
    pub fn frame(&self, i: usize) -> Result<(Image, Image)> {
        if i >= self.len() {
            return Err(Error::OutOfRange(format!("frame {i} of {}", self.len())));
        }
        match &self.frames {
            Frames::Memory { rgb, t } => Ok((rgb[i].clone(), t[i].clone())),
            Frames::Files { rgb, t } => {
                let load = || -> Result<(Image, Image)> { Ok((load_image(&rgb[i])?, load_thermal(&t[i])?)) };
                load().map_err(|e| e.at_frame(i))
            }
        }
    }

    pub fn gt(&self, modality: Modality) -> &[BBox] {
        match modality {
            Modality::Visible => &self.gt_rgb,
            Modality::Thermal => &self.gt_t,
        }
    }
}

fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm" | "jpg" | "jpeg" | "bmp"))
                .unwrap_or(false)
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Parses one `x,y,w,h` box per line (commas, tabs or spaces as
/// separators). Blank lines are skipped.
pub fn parse_boxes(path: &Path, text: &str) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let malformed = || Error::MalformedBox {
            path: path.to_path_buf(),
            line: i + 1,
            text: line.to_string(),
        };
        let vals: Vec<f64> = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| malformed()))
            .collect::<Result<_>>()?;
        if vals.len() != 4 || vals.iter().any(|v| !v.is_finite()) {
            return Err(malformed());
        }
        out.push(BBox {
            x: vals[0],
            y: vals[1],
            w: vals[2],
            h: vals[3],
        });
    }
    Ok(out)
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_boxes(path, &fs::read_to_string(path)?)
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut s = String::with_capacity(boxes.len() * 32);
    for b in boxes {
        s.push_str(&format!("{},{},{},{}\n", b.x, b.y, b.w, b.h));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn load_sequence(manifest_path: &Path) -> Result<Sequence> {
    if !manifest_path.is_file() {
        return Err(Error::MissingFile(manifest_path.to_path_buf()));
    }
    let m: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let rgb = list_frames(&root.join(&m.rgb_dir))?;
    let t = list_frames(&root.join(&m.t_dir))?;
    let gt_rgb = read_boxes(&root.join(&m.gt_rgb))?;
    let gt_t = read_boxes(&root.join(&m.gt_t))?;
    check_counts(&m.name, rgb.len(), t.len(), &gt_rgb, &gt_t)?;
    Ok(Sequence {
        name: m.name,
        frames: Frames::Files { rgb, t },
        gt_rgb,
        gt_t,
        attributes: m.attributes,
    })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub frames: Vec<FrameResult>,
}

impl Trajectory {
    pub fn boxes(&self) -> Vec<BBox> {
        self.frames.iter().map(|f| f.bbox).collect()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// One-pass evaluation: initialize on the first frame's ground truth and
/// track to the end without re-initialization.
pub fn run_ope(seq: &Sequence, cfg: &TrackerConfig, mfnet: Option<Arc<MfNet>>) -> Result<Trajectory> {
    if seq.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (rgb0, t0) = seq.frame(0)?;
    let init = seq.gt(cfg.init_modality)[0];
    let mut tracker = Tracker::new(cfg, &rgb0, &t0, &init, mfnet).map_err(|e| e.at_frame(0))?;
    let mut frames = Vec::with_capacity(seq.len());
    frames.push(tracker.initial_result());
    for i in 1..seq.len() {
        let (rgb, t) = seq.frame(i)?;
        frames.push(tracker.step(&rgb, &t).map_err(|e| e.at_frame(i))?);
    }
    Ok(Trajectory { frames })
}

/// Runs every sequence on its own tracker using `workers` threads (0 means
/// all available cores). Results keep the input order.
pub fn run_many(
    seqs: &[Sequence],
    cfg: &TrackerConfig,
    mfnet: Option<Arc<MfNet>>,
    workers: usize,
) -> Result<Vec<Result<Trajectory>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| seqs.par_iter().map(|s| run_ope(s, cfg, mfnet.clone())).collect()))
}

/// Draws `count` training pairs: a random initialization frame and a label
/// frame 1 to `max_gap` frames later, both boxed with the visible ground
/// truth.
pub fn sequence_pairs(
    seq: &Sequence,
    cf: &CfConfig,
    patch: usize,
    count: usize,
    max_gap: usize,
    seed: u64,
) -> Result<Vec<TrainPair>> {
    if seq.len() < 2 || max_gap == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let gap = rng.random_range(1..=max_gap.min(seq.len() - 1));
        let k = rng.random_range(0..seq.len() - gap);
        let (ir, it) = seq.frame(k)?;
        let (lr, lt) = seq.frame(k + gap)?;
        let pair = make_train_pair(&ir, &it, &seq.gt_rgb[k], &lr, &lt, &seq.gt_rgb[k + gap], cf, patch)
            .map_err(|e| e.at_frame(k + gap))?;
        out.push(pair);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------

pub const SUCCESS_STEPS: usize = 20;
pub const PRECISION_MAX_PX: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub px_thresh: f64,
    pub at_threshold: f64,
}

fn fraction(n: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        n as f64 / total as f64
    }
}

/// Fraction of overlaps strictly above each threshold in `0, 0.05, …, 1`.
pub fn success_curve(overlaps: &[f64]) -> SuccessCurve {
    let thresholds: Vec<f64> = (0..=SUCCESS_STEPS).map(|i| i as f64 / SUCCESS_STEPS as f64).collect();
    let values: Vec<f64> = thresholds
        .iter()
        .map(|&t| fraction(overlaps.iter().filter(|&&o| o > t).count(), overlaps.len()))
        .collect();
    let auc = values.iter().sum::<f64>() / values.len() as f64;
    SuccessCurve { thresholds, values, auc }
}

/// Fraction of center errors at most each threshold in `0, 1, …, 50` px.
pub fn precision_curve(errors: &[f64], px_thresh: f64) -> PrecisionCurve {
    let within = |t: f64| fraction(errors.iter().filter(|&&e| e <= t).count(), errors.len());
    let thresholds: Vec<f64> = (0..=PRECISION_MAX_PX).map(|i| i as f64).collect();
    let values = thresholds.iter().map(|&t| within(t)).collect();
    PrecisionCurve {
        thresholds,
        values,
        px_thresh,
        at_threshold: within(px_thresh),
    }
}

fn check_len(boxes: &[BBox], seq: &Sequence) -> Result<()> {
    if boxes.len() != seq.len() {
        return Err(Error::CountMismatch(format!(
            "{}: trajectory has {} boxes, sequence has {} frames",
            seq.name,
            boxes.len(),
            seq.len()
        )));
    }
    Ok(())
}

/// Per-frame overlap: the better of the two modalities' ground truths.
pub fn frame_overlaps(boxes: &[BBox], seq: &Sequence) -> Result<Vec<f64>> {
    check_len(boxes, seq)?;
    Ok(boxes
        .iter()
        .zip(seq.gt_rgb.iter().zip(&seq.gt_t))
        .map(|(b, (gr, gt))| iou(b, gr).max(iou(b, gt)))
        .collect())
}

/// Per-frame center error: the smaller of the two modalities' errors.
pub fn frame_errors(boxes: &[BBox], seq: &Sequence) -> Result<Vec<f64>> {
    check_len(boxes, seq)?;
    Ok(boxes
        .iter()
        .zip(seq.gt_rgb.iter().zip(&seq.gt_t))
        .map(|(b, (gr, gt))| center_error(b, gr).min(center_error(b, gt)))
        .collect())
}

pub fn msr(boxes: &[BBox], seq: &Sequence) -> Result<SuccessCurve> {
    Ok(success_curve(&frame_overlaps(boxes, seq)?))
}

pub fn mpr(boxes: &[BBox], seq: &Sequence, px_thresh: f64) -> Result<PrecisionCurve> {
    Ok(precision_curve(&frame_errors(boxes, seq)?, px_thresh))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRow {
    pub attribute: String,
    pub sequences: usize,
    pub frames: usize,
    pub msr: f64,
    pub mpr: f64,
}

pub const ALL_ATTRIBUTES: &str = "ALL";

/// Metrics pooled over the frames of every sequence carrying each tag. The
/// `ALL` row comes first, then tags in lexicographic order.
pub fn attribute_report(results: &[(&Sequence, &[BBox])], px_thresh: f64) -> Result<Vec<AttributeRow>> {
    let mut pooled: BTreeMap<String, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut all = (0usize, Vec::new(), Vec::new());
    for (seq, boxes) in results {
        let ov = frame_overlaps(boxes, seq)?;
        let er = frame_errors(boxes, seq)?;
        let mut tags = seq.attributes.clone();
        tags.sort();
        tags.dedup();
        for tag in tags {
            let e = pooled.entry(tag).or_default();
            e.0 += 1;
            e.1.extend_from_slice(&ov);
            e.2.extend_from_slice(&er);
        }
        all.0 += 1;
        all.1.extend(ov);
        all.2.extend(er);
    }
    let row = |attribute: String, (n, ov, er): (usize, Vec<f64>, Vec<f64>)| AttributeRow {
        attribute,
        sequences: n,
        frames: ov.len(),
        msr: success_curve(&ov).auc,
        mpr: precision_curve(&er, px_thresh).at_threshold,
    };
    let mut rows = vec![row(ALL_ATTRIBUTES.to_string(), all)];
    rows.extend(pooled.into_iter().map(|(k, v)| row(k, v)));
    Ok(rows)
}

/// Success and precision curves as `kind,threshold,value` lines.
pub fn curves_csv(success: &SuccessCurve, precision: &PrecisionCurve) -> String {
    let mut s = String::from("kind,threshold,value\n");
    for (t, v) in success.thresholds.iter().zip(&success.values) {
        s.push_str(&format!("success,{t},{v}\n"));
    }
    for (t, v) in precision.thresholds.iter().zip(&precision.values) {
        s.push_str(&format!("precision,{t},{v}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox { x, y, w, h }
    }

    fn seq_with(gt_rgb: Vec<BBox>, gt_t: Vec<BBox>, tags: &[&str]) -> Sequence {
        let n = gt_t.len();
        let frames = vec![Image::filled(4, 4, 1, 0.5); n];
        Sequence::from_memory(
            "toy",
            frames.clone(),
            frames,
            gt_rgb,
            gt_t,
            tags.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    fn write_seq(dir: &Path, n_rgb: usize, n_t: usize, gt: &str) -> PathBuf {
        fs::create_dir_all(dir.join("rgb")).unwrap();
        fs::create_dir_all(dir.join("t")).unwrap();
        let img = Image::filled(8, 8, 3, 0.2);
        for i in 0..n_rgb {
            crate::img::save_image(&dir.join(format!("rgb/{i:04}.png")), &img).unwrap();
        }
        for i in 0..n_t {
            crate::img::save_image(&dir.join(format!("t/{i:04}.png")), &img).unwrap();
        }
        fs::write(dir.join("gt_rgb.txt"), gt).unwrap();
        fs::write(dir.join("gt_t.txt"), gt).unwrap();
        let m = Manifest {
            name: "s".into(),
            rgb_dir: "rgb".into(),
            t_dir: "t".into(),
            gt_rgb: "gt_rgb.txt".into(),
            gt_t: "gt_t.txt".into(),
            attributes: vec!["OCC".into()],
        };
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
        p
    }

    #[test]
    fn load_three_frames() {
        let d = tempfile::tempdir().unwrap();
        let p = write_seq(d.path(), 3, 3, "1,1,2,2\n1,1,2,2\n1,1,2,2\n");
        let s = load_sequence(&p).unwrap();
        assert_eq!(s.len(), 3);
        let (rgb, t) = s.frame(2).unwrap();
        assert_eq!((rgb.channels(), t.channels()), (3, 1));
        assert_eq!(s.attributes, vec!["OCC".to_string()]);
    }

    #[test]
    fn malformed_box_names_line() {
        let d = tempfile::tempdir().unwrap();
        let p = write_seq(d.path(), 2, 2, "1,1,2,2\na,b,c,d\n");
        match load_sequence(&p) {
            Err(Error::MalformedBox { line, text, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(text, "a,b,c,d");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unequal_streams_rejected() {
        let d = tempfile::tempdir().unwrap();
        let p = write_seq(d.path(), 3, 2, "1,1,2,2\n1,1,2,2\n1,1,2,2\n");
        assert!(matches!(load_sequence(&p), Err(Error::CountMismatch(_))));
        assert!(matches!(load_sequence(&d.path().join("nope.json")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn boxes_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let boxes = vec![b(0.1, 2.0 / 3.0, 5.0, 7.25), b(1e-3, 3.0, 1.0, 1.0)];
        let p = d.path().join("r.txt");
        write_boxes(&p, &boxes).unwrap();
        assert_eq!(read_boxes(&p).unwrap(), boxes);
    }

    #[test]
    fn exact_gt_success() {
        let gt = vec![b(0.0, 0.0, 10.0, 10.0), b(5.0, 5.0, 10.0, 10.0)];
        let s = seq_with(gt.clone(), gt.clone(), &[]);
        let c = msr(&gt, &s).unwrap();
        assert_eq!(c.values.len(), 21);
        assert_eq!(c.values[20], 0.0);
        assert!((c.auc - 20.0 / 21.0).abs() < 1e-12);
        assert!((1.0 - c.auc) <= 1.0 / 21.0 + 1e-12);
        let far = vec![b(100.0, 100.0, 1.0, 1.0); 2];
        assert_eq!(msr(&far, &s).unwrap().auc, 0.0);
    }

    #[test]
    fn two_frame_overlaps_match_counting() {
        let c = success_curve(&[0.5, 1.0]);
        for (t, v) in c.thresholds.iter().zip(&c.values) {
            let expect = [0.5, 1.0].iter().filter(|&&o| o > *t).count() as f64 / 2.0;
            assert_eq!(*v, expect);
        }
        // thresholds 0..0.45 (10 points) → 1, 0.5..0.95 (10 points) → 0.5, 1.0 → 0
        assert!((c.auc - 15.0 / 21.0).abs() < 1e-12);
    }

    #[test]
    fn precision_step() {
        let gt = vec![b(0.0, 0.0, 4.0, 4.0); 3];
        let s = seq_with(gt.clone(), gt.clone(), &[]);
        let shifted: Vec<BBox> = gt.iter().map(|g| b(g.x + 10.0, g.y, g.w, g.h)).collect();
        let p = mpr(&shifted, &s, 20.0).unwrap();
        assert_eq!(precision_curve(&frame_errors(&shifted, &s).unwrap(), 9.9).at_threshold, 0.0);
        assert_eq!(p.values[10], 1.0);
        assert_eq!(p.values[9], 0.0);
        assert_eq!(mpr(&gt, &s, 0.0).unwrap().at_threshold, 1.0);
        assert!(msr(&gt[..2], &s).is_err());
    }

    #[test]
    fn attribute_rows() {
        let gt = vec![b(0.0, 0.0, 4.0, 4.0); 2];
        let s1 = seq_with(gt.clone(), gt.clone(), &["OCC"]);
        let s2 = seq_with(gt.clone(), gt.clone(), &["LI"]);
        let t1 = gt.clone();
        let t2 = vec![b(30.0, 0.0, 4.0, 4.0); 2];
        let rows = attribute_report(&[(&s1, &t1)], 20.0).unwrap();
        assert_eq!(rows[0].msr, rows[1].msr);
        assert_eq!(rows[0].mpr, rows[1].mpr);
        let rows = attribute_report(&[(&s1, &t1), (&s2, &t2)], 20.0).unwrap();
        let get = |a: &str| rows.iter().find(|r| r.attribute == a).unwrap().clone();
        assert_eq!(get("OCC").msr, msr(&t1, &s1).unwrap().auc);
        assert_eq!(get("LI").mpr, 0.0);
        assert_eq!(get("OCC").mpr, 1.0);
        assert_eq!(get(ALL_ATTRIBUTES).frames, 4);
        assert_eq!(get(ALL_ATTRIBUTES).mpr, 0.5);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0).prop_map(|(x, y, w, h)| b(x, y, w, h))
    }

    proptest! {
        #[test]
        fn curves_monotone_and_dominate_single_modality(
            rows in proptest::collection::vec((arb_box(), arb_box(), arb_box()), 1..20)
        ) {
            let traj: Vec<BBox> = rows.iter().map(|r| r.0).collect();
            let s = seq_with(rows.iter().map(|r| r.1).collect(), rows.iter().map(|r| r.2).collect(), &[]);
            let sc = msr(&traj, &s).unwrap();
            let pc = mpr(&traj, &s, 20.0).unwrap();
            prop_assert!(sc.values.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(pc.values.windows(2).all(|w| w[1] >= w[0]));
            for gt in [&s.gt_rgb, &s.gt_t] {
                let ov: Vec<f64> = traj.iter().zip(gt.iter()).map(|(a, g)| iou(a, g)).collect();
                let er: Vec<f64> = traj.iter().zip(gt.iter()).map(|(a, g)| center_error(a, g)).collect();
                prop_assert!(sc.auc >= success_curve(&ov).auc);
                prop_assert!(pc.at_threshold >= precision_curve(&er, 20.0).at_threshold);
            }
            let own = seq_with(traj.clone(), traj.clone(), &[]);
            prop_assert!(msr(&traj, &own).unwrap().auc >= sc.auc);
        }
    }
}
