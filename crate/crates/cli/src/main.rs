use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use rgbt_core::bench::{
    self, attribute_report, curves_csv, frame_errors, frame_overlaps, precision_curve, read_boxes, success_curve,
    write_boxes, AttributeRow, Sequence,
};
use rgbt_core::cftrack::ResponseMap;
use rgbt_core::config::Config;
use rgbt_core::fusion::{self, MfNet};
use rgbt_core::img::{self, resize_bilinear, resize_plane, to_gray};
use rgbt_core::pipeline::Ablation;
use rgbt_core::synth::{self, Scenario};

#[derive(Parser, Debug)]
#[command(name = "rgbt", version, about = "RGB-thermal tracking with fused appearance and motion cues")]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Parallel sequences (defaults to bench.workers, 0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one-pass tracking over one or more sequences.
    Track {
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Output directory for `<name>.txt` trajectories and
        /// `<name>.diagnostics.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
    },
    /// Score trajectories against their sequences' ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        manifests: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pr_threshold: Option<f64>,
    },
    /// Sample fusion-network training pairs from sequences.
    Pairs {
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fusion weight network on cached pairs.
    TrainFusion {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse a visible/thermal image pair into one grayscale image.
    Fuse {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        t: PathBuf,
        /// Trained network; the seeded initialization when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print entropy, mutual information and SSIM as JSON.
        #[arg(long)]
        metrics: bool,
    },
    /// Render a synthetic sequence.
    Synth {
        /// Scenario as JSON or TOML; the default scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: rgbt_core::Error| e.to_string())
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<rgbt_core::Error> for CliError {
    fn from(e: rgbt_core::Error) -> Self {
        let code = if e.is_config_error() {
            EXIT_CONFIG
        } else if e.is_data_error() {
            EXIT_DATA
        } else {
            EXIT_INTERNAL
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        rgbt_core::Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        rgbt_core::Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rgbt: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if cli.print_config {
        print!("{}", cfg.to_toml_string());
        return Ok(());
    }
    let workers = cli.workers.unwrap_or(cfg.bench.workers);
    let Some(command) = cli.command else {
        return Err(CliError {
            code: EXIT_CONFIG,
            message: "no command given; see --help".into(),
        });
    };
    match command {
        Command::Track { manifest, out, ablation } => cmd_track(&cfg, &manifest, &out, ablation, workers),
        Command::Eval {
            results,
            manifests,
            out,
            pr_threshold,
        } => cmd_eval(&results, &manifests, &out, pr_threshold.unwrap_or(cfg.bench.pr_threshold)),
        Command::Pairs { manifest, out } => cmd_pairs(&cfg, &manifest, &out),
        Command::TrainFusion { pairs, out } => cmd_train_fusion(&cfg, &pairs, &out),
        Command::Fuse {
            rgb,
            t,
            checkpoint,
            out,
            metrics,
        } => cmd_fuse(&cfg, &rgb, &t, checkpoint.as_deref(), &out, metrics),
        Command::Synth { scenario, seed, out } => cmd_synth(scenario.as_deref(), seed, &out),
    }
}

fn load_sequences(paths: &[PathBuf]) -> CliResult<Vec<Sequence>> {
    let seqs: Vec<Sequence> = paths.iter().map(|p| bench::load_sequence(p)).collect::<Result<_, _>>()?;
    let mut seen = BTreeMap::new();
    for (s, p) in seqs.iter().zip(paths) {
        if let Some(prev) = seen.insert(s.name.clone(), p) {
            return Err(CliError::data(format!(
                "sequence name {:?} appears in both {} and {}",
                s.name,
                prev.display(),
                p.display()
            )));
        }
    }
    Ok(seqs)
}

fn load_checkpoint(cfg: &Config) -> CliResult<Option<Arc<MfNet>>> {
    Ok(match &cfg.tracker.checkpoint {
        Some(p) => Some(Arc::new(MfNet::load(p)?)),
        None => None,
    })
}

fn cmd_track(cfg: &Config, manifests: &[PathBuf], out: &Path, ablation: Option<Ablation>, workers: usize) -> CliResult<()> {
    let mut tc = cfg.tracker_config();
    if let Some(a) = ablation {
        tc.ablation = a;
    }
    tc.validate()?;
    let seqs = load_sequences(manifests)?;
    let net = load_checkpoint(cfg)?;
    let runs = bench::run_many(&seqs, &tc, net, workers)?;
    fs::create_dir_all(out)?;
    for (seq, run) in seqs.iter().zip(runs) {
        let traj = run.map_err(|e| {
            let mut err = CliError::from(e);
            err.message = format!("{}: {}", seq.name, err.message);
            err
        })?;
        write_boxes(&out.join(format!("{}.txt", seq.name)), &traj.boxes())?;
        fs::write(
            out.join(format!("{}.diagnostics.json", seq.name)),
            serde_json::to_string_pretty(&traj.frames)?,
        )?;
        let motion = traj.frames.iter().filter(|f| f.source == rgbt_core::pipeline::Source::Motion).count();
        println!("{}: {} frames, {} on motion cue", seq.name, traj.len(), motion);
    }
    Ok(())
}

/// Manifests are either `*.json` files directly in `dir` or
/// `<sub>/manifest.json` one level down.
fn find_manifests(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(rgbt_core::Error::MissingFile(dir.to_path_buf()).into());
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "json") {
            found.push(p);
        } else if p.join("manifest.json").is_file() {
            found.push(p.join("manifest.json"));
        }
    }
    found.sort();
    Ok(found)
}

#[derive(Debug, Serialize)]
struct SequenceMetrics {
    name: String,
    frames: usize,
    msr: f64,
    mpr: f64,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    pr_threshold: f64,
    sequences: Vec<SequenceMetrics>,
    aggregate: SequenceMetrics,
    attributes: Vec<AttributeRow>,
}

fn cmd_eval(results: &Path, manifests: &Path, out: &Path, px: f64) -> CliResult<()> {
    if !(px >= 0.0) {
        return Err(rgbt_core::Error::Config(format!("pr-threshold must be nonnegative, got {px}")).into());
    }
    if !results.is_dir() {
        return Err(rgbt_core::Error::MissingFile(results.to_path_buf()).into());
    }
    let mut result_files: Vec<PathBuf> = fs::read_dir(results)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "txt"))
        .collect();
    result_files.sort();
    if result_files.is_empty() {
        return Err(CliError::data(format!("no result files (*.txt) in {}", results.display())));
    }
    let seqs = load_sequences(&find_manifests(manifests)?)?;
    let by_name: BTreeMap<&str, &Sequence> = seqs.iter().map(|s| (s.name.as_str(), s)).collect();

    let mut pairs: Vec<(&Sequence, Vec<rgbt_core::geom::BBox>)> = Vec::new();
    for f in &result_files {
        let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let seq = by_name
            .get(name)
            .ok_or_else(|| CliError::data(format!("result {} has no matching manifest in {}", f.display(), manifests.display())))?;
        pairs.push((seq, read_boxes(f)?));
    }

    let curves_dir = out.join("curves");
    fs::create_dir_all(&curves_dir)?;
    let mut per_seq = Vec::new();
    let (mut all_ov, mut all_er) = (Vec::new(), Vec::new());
    for (seq, boxes) in &pairs {
        let ov = frame_overlaps(boxes, seq)?;
        let er = frame_errors(boxes, seq)?;
        let (s, p) = (success_curve(&ov), precision_curve(&er, px));
        fs::write(curves_dir.join(format!("{}.csv", seq.name)), curves_csv(&s, &p))?;
        per_seq.push(SequenceMetrics {
            name: seq.name.clone(),
            frames: ov.len(),
            msr: s.auc,
            mpr: p.at_threshold,
        });
        all_ov.extend(ov);
        all_er.extend(er);
    }
    let (s, p) = (success_curve(&all_ov), precision_curve(&all_er, px));
    fs::write(out.join("curves.csv"), curves_csv(&s, &p))?;

    let refs: Vec<(&Sequence, &[rgbt_core::geom::BBox])> = pairs.iter().map(|(s, b)| (*s, b.as_slice())).collect();
    let rows = attribute_report(&refs, px)?;
    let mut table = String::from("attribute,sequences,frames,msr,mpr\n");
    for r in &rows {
        table.push_str(&format!("{},{},{},{},{}\n", r.attribute, r.sequences, r.frames, r.msr, r.mpr));
    }
    fs::write(out.join("attributes.csv"), table)?;

    let report = EvalReport {
        pr_threshold: px,
        aggregate: SequenceMetrics {
            name: bench::ALL_ATTRIBUTES.to_string(),
            frames: all_ov.len(),
            msr: s.auc,
            mpr: p.at_threshold,
        },
        sequences: per_seq,
        attributes: rows,
    };
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    for m in report.sequences.iter().chain(std::iter::once(&report.aggregate)) {
        println!("{:<24} frames {:>6}  MSR {:.4}  MPR {:.4}", m.name, m.frames, m.msr, m.mpr);
    }
    Ok(())
}

fn cmd_pairs(cfg: &Config, manifests: &[PathBuf], out: &Path) -> CliResult<()> {
    let seqs = load_sequences(manifests)?;
    let mut all = Vec::new();
    for (i, seq) in seqs.iter().enumerate() {
        let pairs = bench::sequence_pairs(
            seq,
            &cfg.cf,
            cfg.mfnet.patch,
            cfg.train.pairs_per_sequence,
            cfg.paper.pair_interval,
            cfg.train.seed.wrapping_add(i as u64),
        )
        .map_err(|e| {
            let mut err = CliError::from(e);
            err.message = format!("{}: {}", seq.name, err.message);
            err
        })?;
        all.extend(pairs);
    }
    fusion::save_pairs(out, &all)?;
    println!("{} pairs written to {}", all.len(), out.display());
    Ok(())
}

/// Sibling of the checkpoint holding the per-epoch loss trace.
fn loss_trace_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

fn cmd_train_fusion(cfg: &Config, pairs: &Path, out: &Path) -> CliResult<()> {
    let data = fusion::load_pairs(pairs)?;
    let mut net = MfNet::new(&cfg.mfnet)?;
    let report = net.train(&data, &cfg.train_schedule())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    net.save(out)?;
    let mut csv = String::from("epoch,stage,loss\n");
    for (i, (loss, stage)) in report.epoch_losses.iter().zip(&report.stages).enumerate() {
        csv.push_str(&format!("{},{},{}\n", i + 1, stage, loss));
    }
    fs::write(loss_trace_path(out), csv)?;
    match (report.epoch_losses.first(), report.epoch_losses.last()) {
        (Some(a), Some(b)) => println!("{} pairs, loss {a:.6} -> {b:.6}", data.len()),
        _ => println!("{} pairs, no epochs run", data.len()),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct FusionMetrics {
    entropy: f64,
    mi_rgb: f64,
    mi_t: f64,
    mi: f64,
    ssim_rgb: f64,
    ssim_t: f64,
}

fn cmd_fuse(cfg: &Config, rgb: &Path, t: &Path, checkpoint: Option<&Path>, out: &Path, metrics: bool) -> CliResult<()> {
    let i_rgb = to_gray(&img::load_image(rgb)?);
    let i_t = img::load_thermal(t)?;
    let (w, h) = (i_rgb.width(), i_rgb.height());
    if (w, h) != (i_t.width(), i_t.height()) {
        return Err(rgbt_core::Error::DimensionMismatch(format!(
            "visible {}x{} vs thermal {}x{}",
            w,
            h,
            i_t.width(),
            i_t.height()
        ))
        .into());
    }
    let net = match checkpoint.or(cfg.tracker.checkpoint.as_deref()) {
        Some(p) => MfNet::load(p)?,
        None => MfNet::new(&cfg.mfnet)?,
    };
    let p = net.config().patch;
    let weights = net.forward(&resize_bilinear(&i_rgb, (p, p)), &resize_bilinear(&i_t, (p, p)))?;
    let m = &weights.fused;
    // Bilinear resampling is a convex combination; clamping to the source
    // range keeps constant maps exact under rounding.
    let (lo, hi) = m.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let data = resize_plane(&m.data, m.width, m.height, w, h).into_iter().map(|v| v.clamp(lo, hi)).collect();
    let wf = ResponseMap::new(w, h, data)?;
    let fused = fusion::fuse_images(&i_rgb, &i_t, &wf)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    img::save_image(out, &fused)?;
    if metrics {
        let (mi_rgb, mi_t) = (fusion::mutual_information(&fused, &i_rgb)?, fusion::mutual_information(&fused, &i_t)?);
        let m = FusionMetrics {
            entropy: fusion::entropy(&fused),
            mi_rgb,
            mi_t,
            mi: mi_rgb + mi_t,
            ssim_rgb: fusion::ssim(&fused, &i_rgb)?,
            ssim_t: fusion::ssim(&fused, &i_t)?,
        };
        println!("{}", serde_json::to_string(&m)?);
    }
    Ok(())
}

fn read_scenario(path: &Path) -> CliResult<Scenario> {
    if !path.is_file() {
        return Err(rgbt_core::Error::MissingFile(path.to_path_buf()).into());
    }
    let text = fs::read_to_string(path)?;
    let invalid = |m: String| CliError::from(rgbt_core::Error::InvalidScenario(m));
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| invalid(e.to_string()))
    } else {
        serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))
    }
}

fn cmd_synth(scenario: Option<&Path>, seed: u64, out: &Path) -> CliResult<()> {
    let sc = match scenario {
        Some(p) => read_scenario(p)?,
        None => Scenario::default(),
    };
    let (seq, truth) = synth::generate(&sc, seed)?;
    synth::write_sequence(out, &seq, &truth)?;
    println!("{}: {} frames written to {}", seq.name, seq.len(), out.display());
    Ok(())
}
