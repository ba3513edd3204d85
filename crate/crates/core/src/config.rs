//! Hierarchical TOML configuration. Published constants live under
//! `[paper]` so any deviation shows up in a diff; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cftrack::CfConfig;
use crate::cme::{CmeConfig, Modality};
use crate::error::{Error, Result};
use crate::fusion::{MfNetConfig, TrainSchedule};
use crate::motion::KalmanConfig;
use crate::pipeline::{Ablation, FusionMode, MatchSource, SwitcherThresholds, TrackerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PaperConstants {
    pub q_hi: f64,
    pub s_hi: f64,
    pub q_low: f64,
    pub s_low: f64,
    pub t_diff: f64,
    pub q_skip: f64,
    pub process_noise: [f64; 4],
    pub measurement_noise: [f64; 2],
    /// Learning rates of the three training stages.
    pub lr: [f64; 3],
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Largest gap between the two frames of a training pair.
    pub pair_interval: usize,
}

impl Default for PaperConstants {
    fn default() -> Self {
        let th = SwitcherThresholds::default();
        let kf = KalmanConfig::default();
        let tr = TrainSchedule::default();
        PaperConstants {
            q_hi: th.q_hi,
            s_hi: th.s_hi,
            q_low: th.q_low,
            s_low: th.s_low,
            t_diff: th.t_diff,
            q_skip: th.q_skip,
            process_noise: kf.process_noise,
            measurement_noise: kf.measurement_noise,
            lr: tr.lr,
            batch: tr.batch,
            momentum: tr.momentum,
            weight_decay: tr.weight_decay,
            pair_interval: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerSection {
    pub ablation: Ablation,
    pub fusion: FusionMode,
    pub t_disable: f64,
    pub match_source: MatchSource,
    pub suspend_modality: Modality,
    pub init_modality: Modality,
    pub refine: bool,
    /// Trained fusion network; without one the network starts from its
    /// seeded initialization.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrackerSection {
    fn default() -> Self {
        let t = TrackerConfig::default();
        TrackerSection {
            ablation: t.ablation,
            fusion: t.fusion,
            t_disable: t.thresholds.t_disable,
            match_source: t.match_source,
            suspend_modality: t.suspend_modality,
            init_modality: t.init_modality,
            refine: t.refine,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanSection {
    pub p0: [f64; 4],
}

impl Default for KalmanSection {
    fn default() -> Self {
        KalmanSection {
            p0: KalmanConfig::default().p0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: [usize; 3],
    pub seed: u64,
    /// Pairs drawn per sequence when building a training cache.
    pub pairs_per_sequence: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainSchedule::default();
        TrainSection {
            epochs: t.epochs,
            seed: t.seed,
            pairs_per_sequence: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Center-error threshold (px) reported as the precision value.
    pub pr_threshold: f64,
    /// Parallel sequences; 0 uses every core.
    pub workers: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            pr_threshold: 20.0,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub paper: PaperConstants,
    pub tracker: TrackerSection,
    pub cf: CfConfig,
    pub cme: CmeConfig,
    pub kalman: KalmanSection,
    pub mfnet: MfNetConfig,
    pub train: TrainSection,
    pub bench: BenchSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            paper: PaperConstants::default(),
            tracker: TrackerSection::default(),
            cf: CfConfig::default(),
            cme: CmeConfig::default(),
            kalman: KalmanSection::default(),
            mfnet: TrackerConfig::default().mfnet,
            train: TrainSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a file; relative checkpoint paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(ck) = cfg.tracker.checkpoint.as_mut() {
            if ck.is_relative() {
                *ck = path.parent().unwrap_or(Path::new(".")).join(&*ck);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.tracker_config().validate()?;
        self.train_schedule().validate()?;
        if self.paper.pair_interval == 0 {
            return Err(Error::Config("paper.pair_interval must be positive".into()));
        }
        if !(self.bench.pr_threshold >= 0.0) {
            return Err(Error::Config("bench.pr_threshold must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn thresholds(&self) -> SwitcherThresholds {
        SwitcherThresholds {
            q_hi: self.paper.q_hi,
            s_hi: self.paper.s_hi,
            q_low: self.paper.q_low,
            s_low: self.paper.s_low,
            t_diff: self.paper.t_diff,
            t_disable: self.tracker.t_disable,
            q_skip: self.paper.q_skip,
        }
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            ablation: self.tracker.ablation,
            fusion: self.tracker.fusion,
            thresholds: self.thresholds(),
            cf: self.cf.clone(),
            cme: self.cme.clone(),
            kalman: KalmanConfig {
                p0: self.kalman.p0,
                process_noise: self.paper.process_noise,
                measurement_noise: self.paper.measurement_noise,
            },
            mfnet: self.mfnet.clone(),
            match_source: self.tracker.match_source,
            suspend_modality: self.tracker.suspend_modality,
            init_modality: self.tracker.init_modality,
            refine: self.tracker.refine,
        }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.train.epochs,
            lr: self.paper.lr,
            batch: self.paper.batch,
            momentum: self.paper.momentum,
            weight_decay: self.paper.weight_decay,
            seed: self.train.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        let back = Config::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(Config::from_toml_str("").unwrap(), c);
        assert_eq!(c.tracker_config(), TrackerConfig::default());
        assert_eq!(c.train_schedule(), TrainSchedule::default());
    }

    #[test]
    fn paper_section_holds_published_values() {
        let p = PaperConstants::default();
        assert_eq!([p.q_hi, p.s_hi, p.q_low, p.s_low, p.t_diff, p.q_skip], [210.0, 15.0, 135.0, 17.0, 3.0, 250.0]);
        assert_eq!(p.process_noise, [25.0, 10.0, 25.0, 10.0]);
        assert_eq!(p.measurement_noise, [25.0, 25.0]);
        assert_eq!(p.lr, [1e-5, 1e-5, 1e-7]);
        assert_eq!((p.batch, p.momentum, p.weight_decay, p.pair_interval), (8, 0.9, 0.0005, 5));
    }

    #[test]
    fn overrides_apply() {
        let c = Config::from_toml_str(
            r#"
            [paper]
            q_hi = 300.0
            [tracker]
            ablation = "MF+CME"
            fusion = { mode = "constant", weight = 0.25 }
            [cf]
            padding = 2.5
            "#,
        )
        .unwrap();
        let t = c.tracker_config();
        assert_eq!(t.thresholds.q_hi, 300.0);
        assert_eq!(t.ablation, Ablation::MfCme);
        assert_eq!(t.fusion, FusionMode::Constant { weight: 0.25 });
        assert_eq!(t.cf.padding, 2.5);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        for bad in [
            "[paper]\nq_hi2 = 1.0",
            "[nope]\na = 1",
            "[paper]\nq_hi = 100.0",
            "[tracker]\nfusion = { mode = \"constant\", weight = 2.0 }",
            "[cf]\nlambda = -1.0",
            "[tracker]\nablation = \"MF+TMP\"",
        ] {
            let e = Config::from_toml_str(bad).unwrap_err();
            assert!(e.is_config_error(), "{bad}: {e}");
        }
    }
}
