//! Command-line entry points.
//!
//! Exit codes: 0 on success, 2 for usage or input errors, 3 when an internal
//! invariant is violated. Logs go to standard error; results go to files.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{cva_change_map, cva_match, mask_match};
use crate::error::Error;
use crate::grid::EmbeddingGrid;
use crate::interchange::{
    read_label_raster, read_mask_file, read_rgb_image, read_tensor_archive, write_change_file,
    write_change_map_png, write_rgb_png, BinaryMask, DemodulationPolicy, LoadOptions, RleMask, RleOrder, Session,
    SessionManifest, Time,
};
use crate::matching::{
    auto_threshold, candidates, point_query_filter, rasterize_changes, select, ChangeMap, ChangeProposal, Direction,
    MatchConfig, PointQuery, QueryPoint, Scoring, SelectionMode, DEFAULT_SEMANTIC_ANGLE_DEG,
};
use crate::metrics::{binarize_gt, label_instances, mask_ar_masks, macro_average, micro_average, pixel_prf, PixelReport};
use crate::probe::{fit_pca_joint, fit_pca_up_to, pca_rgb, semantic_query, semantic_query_cross};
use crate::proposal::ProposalFilter;

/// Environment variable naming a JSON file of default settings.
pub const CONFIG_ENV: &str = "CHANGEKIT_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "changekit", version, about = "Zero-shot bitemporal change detection by latent matching")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect change instances in one bitemporal session.
    Detect(DetectArgs),
    /// Keep only detected changes semantically close to clicked objects.
    Query(QueryArgs),
    /// Score predictions against ground truth (pixel F1/P/R, mask AR).
    Eval(EvalArgs),
    /// Run a comparison method (cva, cva-match, mask-match).
    Baseline(BaselineArgs),
    /// Write pseudo-label change maps for a directory of sessions.
    ExportLabels(ExportArgs),
    /// Render PCA colour views or rank proposals by embedding similarity.
    Probe(ProbeArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
    /// Convert RLE counts in a record file between row- and column-major scans.
    ConvertRle(ConvertArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON file with default settings; flags override it.
    #[arg(long, env = CONFIG_ENV, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FilterArgs {
    /// Minimum predicted IoU of a proposal [default: 0.5].
    #[arg(long, value_name = "X")]
    pub min_pred_iou: Option<f64>,
    /// Minimum stability score of a proposal [default: 0.8].
    #[arg(long, value_name = "X")]
    pub min_stability: Option<f64>,
    /// NMS IoU threshold over proposals [default: 0.7].
    #[arg(long = "nms", value_name = "X")]
    pub nms_iou: Option<f64>,
    /// Use the proposal files as they are, without quality filtering or NMS.
    #[arg(long, conflicts_with_all = ["min_pred_iou", "min_stability", "nms_iou"])]
    pub no_filter: bool,
    /// Dataset name selecting an entry of the stability override table.
    #[arg(long, value_name = "NAME")]
    pub dataset: Option<String>,
    /// Adds NAME=VALUE to the stability override table (repeatable).
    #[arg(long, value_name = "NAME=VALUE", value_parser = parse_override)]
    pub stability_override: Vec<(String, f64)>,
    /// Scan order of RLE counts in the proposal files.
    #[arg(long, value_name = "ORDER")]
    pub rle_order: Option<RleOrder>,
    /// Fail instead of warning when a demodulated grid fails its check.
    #[arg(long)]
    pub strict_demodulation: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    /// Selection mode: threshold, topk or auto [default: threshold].
    #[arg(long, value_name = "MODE")]
    pub mode: Option<SelectionMode>,
    /// Change angle threshold in degrees for threshold mode [default: 155].
    #[arg(long, value_name = "DEG")]
    pub angle: Option<f64>,
    /// Number of changes kept in topk mode [default: 1000].
    #[arg(long, value_name = "N")]
    pub k: Option<usize>,
    /// Score normalization: cosine or raw [default: cosine].
    #[arg(long, value_name = "SCORING")]
    pub scoring: Option<Scoring>,
    /// Matching direction: bidirectional, forward or backward [default: bidirectional].
    #[arg(long, value_name = "DIR")]
    pub direction: Option<Direction>,
    /// Suppress selected changes overlapping a better one above this IoU.
    #[arg(long, value_name = "X")]
    pub dedupe_iou: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Session manifest.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub select: SelectArgs,
    #[command(flatten)]
    pub filter: FilterArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for changes.jsonl and change_map.png.
    #[arg(long, short, default_value = ".", value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Session manifest.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Query click as x,y,t with t in {t0,t1} (repeatable; points accumulate).
    #[arg(long = "point", required = true, value_name = "X,Y,T")]
    pub points: Vec<QueryPoint>,
    /// Largest angle in degrees between a change and the query embedding [default: 60].
    #[arg(long, value_name = "DEG")]
    pub semantic_angle: Option<f64>,
    /// Filter this change file instead of running detection first.
    #[arg(long, value_name = "FILE")]
    pub changes: Option<PathBuf>,
    #[command(flatten)]
    pub select: SelectArgs,
    #[command(flatten)]
    pub filter: FilterArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for query_changes.jsonl and query_map.png.
    #[arg(long, short, default_value = ".", value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalLevel {
    Pixel,
    Instance,
    Both,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction files (.jsonl change/mask records or label .png), aligned with --gt.
    #[arg(long, num_args = 1.., value_name = "FILE", conflicts_with = "pred_dir", requires = "gt")]
    pub pred: Vec<PathBuf>,
    /// Ground-truth files (label .png or .jsonl mask records).
    #[arg(long, num_args = 1.., value_name = "FILE", conflicts_with = "gt_dir")]
    pub gt: Vec<PathBuf>,
    /// Directory of predictions paired with --gt-dir by file stem; missing means empty.
    #[arg(long, value_name = "DIR", requires = "gt_dir")]
    pub pred_dir: Option<PathBuf>,
    /// Directory of ground-truth files.
    #[arg(long, value_name = "DIR")]
    pub gt_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalLevel::Both)]
    pub level: EvalLevel,
    /// Ranked predictions considered per pair for mask AR.
    #[arg(long, default_value_t = crate::metrics::DEFAULT_MAX_DETS)]
    pub max_dets: usize,
    /// Also write the full report as JSON.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    /// Thresholded l2 norm of the grid difference, upsampled to the image.
    Cva,
    /// Proposals voted changed by more than a share of CVA-flagged pixels.
    CvaMatch,
    /// Proposals without an IoU match at the other time.
    MaskMatch,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(value_enum)]
    pub method: BaselineMethod,
    /// Session manifest.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Fixed CVA intensity threshold instead of Otsu.
    #[arg(long, value_name = "X")]
    pub threshold: Option<f64>,
    /// cva: run on the manifest's RGB images instead of the embedding grids.
    #[arg(long)]
    pub raw: bool,
    /// cva-match: share of flagged pixels a proposal must exceed.
    #[arg(long, default_value_t = 0.5, value_name = "X")]
    pub vote: f64,
    /// mask-match: IoU a proposal must exceed to count as matched.
    #[arg(long, default_value_t = 0.5, value_name = "X")]
    pub iou: f64,
    #[command(flatten)]
    pub filter: FilterArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for change_map.png (and changes.jsonl for instance methods).
    #[arg(long, short, default_value = ".", value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Directory of session manifests (*.json).
    #[arg(long, value_name = "DIR")]
    pub manifest_dir: PathBuf,
    /// Output directory for one <manifest stem>.png per pair plus summary.json.
    #[arg(long, short, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Pairs processed in parallel.
    #[arg(long, short, default_value_t = 1, value_name = "N")]
    pub jobs: usize,
    #[command(flatten)]
    pub select: SelectArgs,
    #[command(flatten)]
    pub filter: FilterArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("action").required(true).args(["pca", "query"])))]
pub struct ProbeArgs {
    /// Session manifest.
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Render the first three principal components as RGB.
    #[arg(long)]
    pub pca: bool,
    /// Rank proposals by similarity to this proposal id.
    #[arg(long, value_name = "ID")]
    pub query: Option<u64>,
    /// Image the PCA or query proposal comes from.
    #[arg(long, default_value = "t0", value_name = "T")]
    pub time: Time,
    /// Fit one PCA basis on both grids.
    #[arg(long, requires = "pca")]
    pub joint: bool,
    /// Rank the other time's proposals instead of the same image's.
    #[arg(long, requires = "query")]
    pub cross: bool,
    /// Length of the ranking.
    #[arg(long, default_value_t = 10, value_name = "N")]
    pub top_n: usize,
    #[command(flatten)]
    pub filter: FilterArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output file [default: pca_<time>.png or ranking_<id>.jsonl].
    #[arg(long, short, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Base directory for manifest paths given to POST /sessions.
    #[arg(long, default_value = ".", value_name = "DIR")]
    pub session_dir: PathBuf,
    /// Directory of built UI assets served at /.
    #[arg(long, value_name = "DIR")]
    pub ui_dir: Option<PathBuf>,
    /// Sessions kept in memory before the least recently used is evicted.
    #[arg(long, default_value_t = crate::service::DEFAULT_CAPACITY)]
    pub capacity: usize,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Record file (one JSON object per line with size and counts).
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    /// Scan order of the input counts.
    #[arg(long = "rle-order", alias = "from", default_value = "col-major", value_name = "ORDER")]
    pub from: RleOrder,
    /// Scan order written.
    #[arg(long, default_value = "row-major", value_name = "ORDER")]
    pub to: RleOrder,
}

fn parse_override(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got {s:?}"))?;
    let value: f64 = value.parse().map_err(|e| format!("bad value in {s:?}: {e}"))?;
    Ok((name.to_string(), value))
}

/// A failed command with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_internal() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Defaults read from the file named by `--config` or `CHANGEKIT_CONFIG`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: Option<String>,
    pub angle: Option<f64>,
    pub k: Option<usize>,
    pub scoring: Option<String>,
    pub direction: Option<String>,
    pub dedupe_iou: Option<f64>,
    pub min_pred_iou: Option<f64>,
    pub min_stability: Option<f64>,
    pub nms_iou: Option<f64>,
    #[serde(default)]
    pub no_filter: bool,
    pub dataset: Option<String>,
    #[serde(default)]
    pub stability_overrides: BTreeMap<String, f64>,
    pub semantic_angle: Option<f64>,
    pub rle_order: Option<String>,
}

impl ConfigFile {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    fn load(args: &ConfigArgs) -> CliResult<Self> {
        args.config.as_deref().map(Self::read).transpose().map(Option::unwrap_or_default)
    }
}

fn parse_field<T: std::str::FromStr<Err = String>>(value: &Option<String>, key: &str) -> CliResult<Option<T>> {
    value
        .as_deref()
        .map(|s| s.parse().map_err(|e: String| CliError::usage(format!("config {key}: {e}"))))
        .transpose()
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub matching: MatchConfig,
    pub load: LoadOptions,
    pub semantic_angle_deg: f64,
}

impl RunConfig {
    /// Flags win over the config file, which wins over built-in defaults.
    pub fn resolve(select: Option<&SelectArgs>, filter: &FilterArgs, file: &ConfigFile) -> CliResult<Self> {
        let defaults = MatchConfig::default();
        let mut matching = MatchConfig {
            mode: parse_field(&file.mode, "mode")?.unwrap_or(defaults.mode),
            k: file.k.unwrap_or(defaults.k),
            angle_threshold_deg: file.angle.unwrap_or(defaults.angle_threshold_deg),
            scoring: parse_field(&file.scoring, "scoring")?.unwrap_or(defaults.scoring),
            direction: parse_field(&file.direction, "direction")?.unwrap_or(defaults.direction),
            dedupe_iou: file.dedupe_iou,
        };
        if let Some(s) = select {
            matching.mode = s.mode.unwrap_or(matching.mode);
            matching.k = s.k.unwrap_or(matching.k);
            matching.angle_threshold_deg = s.angle.unwrap_or(matching.angle_threshold_deg);
            matching.scoring = s.scoring.unwrap_or(matching.scoring);
            matching.direction = s.direction.unwrap_or(matching.direction);
            matching.dedupe_iou = s.dedupe_iou.or(matching.dedupe_iou);
        }
        matching.validate().map_err(|e| CliError::usage(e.to_string()))?;

        let base = ProposalFilter::default();
        let mut quality = ProposalFilter {
            min_pred_iou: filter.min_pred_iou.or(file.min_pred_iou).unwrap_or(base.min_pred_iou),
            min_stability: filter.min_stability.or(file.min_stability).unwrap_or(base.min_stability),
            nms_iou: filter.nms_iou.or(file.nms_iou).unwrap_or(base.nms_iou),
        };
        let mut overrides = file.stability_overrides.clone();
        overrides.extend(filter.stability_override.iter().cloned());
        if let Some(name) = filter.dataset.as_ref().or(file.dataset.as_ref()) {
            let value = overrides.get(name).ok_or_else(|| {
                CliError::usage(format!(
                    "dataset {name:?} has no stability override; known: {}",
                    overrides.keys().cloned().collect::<Vec<_>>().join(", ")
                ))
            })?;
            if filter.min_stability.is_none() {
                quality.min_stability = *value;
            }
        }
        quality.validate().map_err(|e| CliError::usage(e.to_string()))?;

        let no_filter = filter.no_filter || file.no_filter;
        let load = LoadOptions {
            demodulation: if filter.strict_demodulation {
                DemodulationPolicy::Error
            } else {
                DemodulationPolicy::Warn
            },
            filter: (!no_filter).then_some(quality),
            rle_order: match filter.rle_order {
                Some(o) => o,
                None => parse_field(&file.rle_order, "rle_order")?.unwrap_or(RleOrder::RowMajor),
            },
        };
        let semantic_angle_deg = file.semantic_angle.unwrap_or(DEFAULT_SEMANTIC_ANGLE_DEG);
        Ok(Self {
            matching,
            load,
            semantic_angle_deg,
        })
    }
}

fn init_logging(verbose: u8) {
    use tracing_subscriber::EnvFilter;
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level));
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(filter)
        .try_init();
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn execute(command: Command) -> CliResult {
    match command {
        Command::Detect(a) => cmd_detect(&a),
        Command::Query(a) => cmd_query(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Baseline(a) => cmd_baseline(&a),
        Command::ExportLabels(a) => cmd_export_labels(&a),
        Command::Probe(a) => cmd_probe(&a),
        Command::Serve(a) => cmd_serve(&a),
        Command::ConvertRle(a) => cmd_convert_rle(&a),
    }
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn load_session(manifest: &Path, options: &LoadOptions) -> CliResult<Session> {
    let session = Session::load_path(manifest, options)?;
    tracing::info!(
        "loaded {}: {} + {} proposals",
        manifest.display(),
        session.proposals(Time::T0).len(),
        session.proposals(Time::T1).len()
    );
    Ok(session)
}

fn write_outputs(dir: &Path, stem: &str, changes: &[ChangeProposal], size: (usize, usize)) -> CliResult<ChangeMap> {
    create_dir(dir)?;
    write_change_file(dir.join(format!("{stem}.jsonl")), changes)?;
    let map = rasterize_changes(changes, size)?;
    let png = if stem == "changes" {
        "change_map.png".to_string()
    } else {
        format!("{}_map.png", stem.trim_end_matches("_changes"))
    };
    write_change_map_png(&map, dir.join(png))?;
    Ok(map)
}

/// Scores and selects changes for one session with a resolved config.
pub fn detect(session: &Session, config: &MatchConfig) -> crate::Result<(usize, Vec<ChangeProposal>)> {
    let cands = candidates(session, config.scoring, config.direction)?;
    let kept = select(&cands, config)?;
    if config.mode == SelectionMode::AutoOtsu {
        match auto_threshold(&cands) {
            Some(t) => tracing::info!("otsu angle threshold {t:.3} deg"),
            None => tracing::warn!("angle distribution has a single value; auto mode selects nothing"),
        }
    }
    Ok((cands.len(), kept))
}

pub fn cmd_detect(args: &DetectArgs) -> CliResult {
    let run = RunConfig::resolve(Some(&args.select), &args.filter, &ConfigFile::load(&args.config)?)?;
    let session = load_session(&args.manifest, &run.load)?;
    let (n, kept) = detect(&session, &run.matching)?;
    let map = write_outputs(&args.out_dir, "changes", &kept, session.image_size())?;
    println!(
        "candidates {n} ({} + {}) kept {} changed_pixels {}",
        session.proposals(Time::T0).len(),
        session.proposals(Time::T1).len(),
        kept.len(),
        map.count_ones()
    );
    Ok(())
}

pub fn cmd_query(args: &QueryArgs) -> CliResult {
    let file = ConfigFile::load(&args.config)?;
    let run = RunConfig::resolve(Some(&args.select), &args.filter, &file)?;
    let session = load_session(&args.manifest, &run.load)?;
    let changes = match &args.changes {
        Some(path) => crate::interchange::read_change_file(path)?,
        None => detect(&session, &run.matching)?.1,
    };
    let query = PointQuery::new(args.points.clone()).with_angle(args.semantic_angle.unwrap_or(run.semantic_angle_deg));
    let kept = point_query_filter(&changes, &query, &session)?;
    write_outputs(&args.out_dir, "query_changes", &kept, session.image_size())?;
    println!("changes {} kept {} points {}", changes.len(), kept.len(), query.points.len());
    Ok(())
}

struct EvalPair {
    name: String,
    pred: Option<PathBuf>,
    gt: PathBuf,
}

/// Instances in rank order plus the pixel map they cover.
fn read_instances(path: &Path) -> CliResult<(Vec<RleMask>, Option<ChangeMap>)> {
    if path.extension().is_some_and(|e| e == "jsonl" || e == "json") {
        let masks: Vec<RleMask> = read_mask_file(path)?.into_iter().map(|(_, m)| m).collect();
        let map = match masks.first() {
            Some(first) => {
                let (h, w) = first.size();
                let mut map = BinaryMask::zeros(h, w);
                for m in &masks {
                    map.union_with(&m.decode())?;
                }
                Some(map)
            }
            None => None,
        };
        Ok((masks, map))
    } else {
        let labels = read_label_raster(path)?;
        Ok((label_instances(&labels), Some(binarize_gt(&labels))))
    }
}

fn eval_pairs(args: &EvalArgs) -> CliResult<Vec<EvalPair>> {
    if let (Some(pred_dir), Some(gt_dir)) = (&args.pred_dir, &args.gt_dir) {
        let mut gts: Vec<PathBuf> = fs::read_dir(gt_dir)
            .map_err(|e| Error::io(gt_dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png" || e == "jsonl"))
            .collect();
        gts.sort();
        return Ok(gts
            .into_iter()
            .map(|gt| {
                let stem = gt.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let pred = ["jsonl", "png"]
                    .iter()
                    .map(|ext| pred_dir.join(format!("{stem}.{ext}")))
                    .find(|p| p.is_file());
                EvalPair { name: stem, pred, gt }
            })
            .collect());
    }
    if args.gt.is_empty() {
        return Err(CliError::usage("give --pred/--gt file lists or --pred-dir/--gt-dir"));
    }
    if args.pred.len() != args.gt.len() {
        return Err(CliError::usage(format!(
            "{} prediction files but {} ground-truth files",
            args.pred.len(),
            args.gt.len()
        )));
    }
    Ok(args
        .pred
        .iter()
        .zip(&args.gt)
        .map(|(p, g)| EvalPair {
            name: g.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
            pred: Some(p.clone()),
            gt: g.clone(),
        })
        .collect())
}

#[derive(Debug, Serialize)]
struct PairReport {
    name: String,
    pixel: Option<PixelReport>,
    ar: Option<f64>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    pairs: usize,
    /// Counts summed over pairs.
    pixel: Option<PixelReport>,
    /// Mean of per-pair ratios, for reference.
    pixel_macro: Option<PixelReport>,
    /// Mean over pairs that have ground-truth instances.
    ar: Option<f64>,
    per_pair: Vec<PairReport>,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult {
    let pairs = eval_pairs(args)?;
    let pixel_level = args.level != EvalLevel::Instance;
    let instance_level = args.level != EvalLevel::Pixel;
    let mut per_pair = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let (gt_masks, gt_map) = read_instances(&pair.gt)?;
        let (pred_masks, pred_map) = match &pair.pred {
            Some(p) => read_instances(p)?,
            None => (Vec::new(), None),
        };
        let gt_map = gt_map
            .or_else(|| pred_map.as_ref().map(|m| BinaryMask::zeros(m.height(), m.width())))
            .ok_or_else(|| CliError::usage(format!("{}: cannot infer the image size", pair.name)))?;
        let pred_map = pred_map.unwrap_or_else(|| BinaryMask::zeros(gt_map.height(), gt_map.width()));
        let pixel = pixel_level.then(|| pixel_prf(&pred_map, &gt_map)).transpose()?;
        let ar = if instance_level && !gt_masks.is_empty() {
            let refs: Vec<&RleMask> = pred_masks.iter().collect();
            Some(mask_ar_masks(&refs, &gt_masks, args.max_dets)?.ar)
        } else {
            None
        };
        per_pair.push(PairReport {
            name: pair.name.clone(),
            pixel,
            ar,
        });
    }
    let pixels: Vec<PixelReport> = per_pair.iter().filter_map(|p| p.pixel).collect();
    let ars: Vec<f64> = per_pair.iter().filter_map(|p| p.ar).collect();
    let report = EvalReport {
        pairs: per_pair.len(),
        pixel: pixel_level.then(|| micro_average(&pixels)),
        pixel_macro: pixel_level.then(|| macro_average(&pixels)),
        ar: (instance_level && !ars.is_empty()).then(|| ars.iter().sum::<f64>() / ars.len() as f64),
        per_pair,
    };
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
    println!("{:<8}{:>8}{:>8}{:>8}{:>10}", "pairs", "F1", "Prec.", "Rec.", "mask AR");
    println!(
        "{:<8}{:>8}{:>8}{:>8}{:>10}",
        report.pairs,
        pct(report.pixel.map(|p| p.f1)),
        pct(report.pixel.map(|p| p.precision)),
        pct(report.pixel.map(|p| p.recall)),
        pct(report.ar)
    );
    if let Some(ar) = report.ar {
        println!("ar {ar:.4}");
    }
    if let Some(path) = &args.report {
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::usage(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_raw_images(manifest: &SessionManifest) -> CliResult<(EmbeddingGrid, EmbeddingGrid)> {
    let (Some(pre), Some(post)) = (&manifest.pre_image, &manifest.post_image) else {
        return Err(CliError::usage("--raw needs pre_image and post_image in the manifest"));
    };
    Ok((
        EmbeddingGrid::from_rgb(&read_rgb_image(pre)?)?,
        EmbeddingGrid::from_rgb(&read_rgb_image(post)?)?,
    ))
}

pub fn cmd_baseline(args: &BaselineArgs) -> CliResult {
    if args.raw && args.method != BaselineMethod::Cva {
        return Err(CliError::usage("--raw applies to the cva method only"));
    }
    let run = RunConfig::resolve(None, &args.filter, &ConfigFile::load(&args.config)?)?;
    let manifest = SessionManifest::read(&args.manifest)?;
    let size = manifest.image_size();
    match args.method {
        BaselineMethod::Cva => {
            // only grids (or images) are needed, so proposal files may be absent
            let (pre, post) = if args.raw {
                read_raw_images(&manifest)?
            } else {
                (
                    read_tensor_archive(&manifest.pre_embedding)?,
                    read_tensor_archive(&manifest.post_embedding)?,
                )
            };
            let (_, map) = cva_change_map(&pre, &post, size, args.threshold)?;
            create_dir(&args.out_dir)?;
            write_change_map_png(&map, args.out_dir.join("change_map.png"))?;
            println!("changed_pixels {} of {}", map.count_ones(), size.0 * size.1);
        }
        BaselineMethod::CvaMatch | BaselineMethod::MaskMatch => {
            let session = Session::load(&manifest, &run.load)?;
            let mut changes = if args.method == BaselineMethod::CvaMatch {
                if let Some(t) = args.threshold {
                    let (_, map) = cva_change_map(session.grid(Time::T0), session.grid(Time::T1), size, Some(t))?;
                    crate::baselines::vote_proposals(&session, &map, args.vote)
                } else {
                    cva_match(&session, args.vote)?
                }
            } else {
                mask_match(&session, args.iou)?
            };
            crate::matching::sort_changes(&mut changes);
            let map = write_outputs(&args.out_dir, "changes", &changes, size)?;
            println!(
                "candidates {} kept {} changed_pixels {}",
                session.proposals(Time::T0).len() + session.proposals(Time::T1).len(),
                changes.len(),
                map.count_ones()
            );
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ExportEntry {
    name: String,
    changes: usize,
    coverage: f64,
}

#[derive(Debug, Serialize)]
struct ExportFailure {
    name: String,
    error: String,
}

#[derive(Debug, Serialize)]
struct ExportSummary {
    exported: Vec<ExportEntry>,
    failed: Vec<ExportFailure>,
    mean_coverage: f64,
}

fn export_one(manifest: &Path, out_dir: &Path, run: &RunConfig) -> CliResult<ExportEntry> {
    let session = Session::load_path(manifest, &run.load)?;
    let (_, kept) = detect(&session, &run.matching)?;
    let (h, w) = session.image_size();
    let map = rasterize_changes(&kept, (h, w))?;
    let name = manifest.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    write_change_map_png(&map, out_dir.join(format!("{name}.png")))?;
    Ok(ExportEntry {
        name,
        changes: kept.len(),
        coverage: map.count_ones() as f64 / (h * w) as f64,
    })
}

pub fn cmd_export_labels(args: &ExportArgs) -> CliResult {
    let run = RunConfig::resolve(Some(&args.select), &args.filter, &ConfigFile::load(&args.config)?)?;
    if args.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    let mut manifests: Vec<PathBuf> = fs::read_dir(&args.manifest_dir)
        .map_err(|e| Error::io(&args.manifest_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.is_file())
        .collect();
    manifests.sort();
    if manifests.is_empty() {
        return Err(CliError::usage(format!("no *.json manifests in {}", args.manifest_dir.display())));
    }
    create_dir(&args.out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| CliError {
            code: 3,
            message: format!("thread pool: {e}"),
        })?;
    let results: Vec<_> =
        pool.install(|| manifests.par_iter().map(|m| (m, export_one(m, &args.out_dir, &run))).collect());
    let mut summary = ExportSummary {
        exported: Vec::new(),
        failed: Vec::new(),
        mean_coverage: 0.0,
    };
    for (path, result) in results {
        match result {
            Ok(entry) => summary.exported.push(entry),
            Err(e) => {
                tracing::warn!("skipping {}: {e}", path.display());
                summary.failed.push(ExportFailure {
                    name: path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                    error: e.message,
                });
            }
        }
    }
    if !summary.exported.is_empty() {
        summary.mean_coverage =
            summary.exported.iter().map(|e| e.coverage).sum::<f64>() / summary.exported.len() as f64;
    }
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::usage(e.to_string()))?;
    let summary_path = args.out_dir.join("summary.json");
    fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    println!(
        "exported {} failed {} mean_coverage {:.6}",
        summary.exported.len(),
        summary.failed.len(),
        summary.mean_coverage
    );
    if summary.exported.is_empty() {
        return Err(CliError::usage("every pair failed"));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct RankingLine {
    id: u64,
    source_time: Time,
    similarity: f64,
}

pub fn cmd_probe(args: &ProbeArgs) -> CliResult {
    let run = RunConfig::resolve(None, &args.filter, &ConfigFile::load(&args.config)?)?;
    let session = load_session(&args.manifest, &run.load)?;
    let grid = session.grid(args.time);
    if args.pca {
        let basis = if args.joint {
            fit_pca_joint(session.grid(Time::T0), session.grid(Time::T1), 3)?
        } else {
            fit_pca_up_to(grid, 3)?
        };
        let raster = pca_rgb(grid, &basis)?;
        let out = args.output.clone().unwrap_or_else(|| PathBuf::from(format!("pca_{}.png", args.time)));
        write_rgb_png(&raster.to_image(), &out)?;
        let shares: Vec<String> = basis.explained.iter().map(|s| format!("{s:.4}")).collect();
        println!("components {} explained {}", basis.directions.len(), shares.join(" "));
    } else if let Some(id) = args.query {
        let props = session.proposals(args.time);
        let ranked = if args.cross {
            let other = args.time.other();
            semantic_query_cross(grid, props, id, session.grid(other), session.proposals(other), args.top_n)?
        } else {
            semantic_query(grid, props, id, args.top_n)?
        };
        let out = args.output.clone().unwrap_or_else(|| PathBuf::from(format!("ranking_{id}.jsonl")));
        let mut text = String::new();
        for r in &ranked {
            let line = RankingLine {
                id: r.proposal.id,
                source_time: r.proposal.source_time,
                similarity: r.similarity,
            };
            text.push_str(&serde_json::to_string(&line).map_err(|e| CliError::usage(e.to_string()))?);
            text.push('\n');
        }
        fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
        println!("ranked {}", ranked.len());
    }
    Ok(())
}

pub fn cmd_serve(args: &ServeArgs) -> CliResult {
    let config = crate::service::ServiceConfig {
        session_dir: args.session_dir.clone(),
        capacity: args.capacity,
        ui_dir: args.ui_dir.clone(),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError {
            code: 3,
            message: format!("runtime: {e}"),
        })?;
    runtime.block_on(async {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::usage(format!("cannot bind {addr}: {e}")))?;
        eprintln!("listening on http://{addr}");
        crate::service::serve(listener, config).await.map_err(|e| CliError {
            code: 3,
            message: format!("server: {e}"),
        })
    })
}

pub fn cmd_convert_rle(args: &ConvertArgs) -> CliResult {
    let text = fs::read_to_string(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let mut out = String::with_capacity(text.len());
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| CliError::usage(format!("{}:{}: {msg}", args.input.display(), lineno + 1));
        let mut value: serde_json::Value = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        let size: [usize; 2] =
            serde_json::from_value(value["size"].clone()).map_err(|e| at(format!("size: {e}")))?;
        let counts: Vec<u32> =
            serde_json::from_value(value["counts"].clone()).map_err(|e| at(format!("counts: {e}")))?;
        let mask = RleMask::from_ordered_counts(size[0], size[1], counts, args.from).map_err(|e| at(e.to_string()))?;
        value["counts"] = serde_json::json!(mask.ordered_counts(args.to));
        out.push_str(&value.to_string());
        out.push('\n');
    }
    fs::write(&args.output, out).map_err(|e| Error::io(&args.output, e))?;
    Ok(())
}
