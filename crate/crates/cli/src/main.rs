//! `detprune` command-line entry point.
//!
//! Data goes to stdout or `--out`; failures print one
//! `ERROR <code>: <detail>` line to stderr and exit with 2 (bad input) or 3
//! (bad configuration).

mod config;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use detprune::analysis::{
    annotation_count, class_distribution, js_divergence, pearson_r, sample_iou, scale_schedule,
    Schedule,
};
use detprune::datamodel::{
    parse_annotations, parse_logs, parse_manifest, parse_scores, write_annotations, write_manifest,
    write_scores, DatasetIndex, ImageId, PruneManifest,
};
use detprune::matching::{build_series, cipa_match, EpochWindow};
use detprune::pipeline::{scan_max_epoch, score_reader, ScoreRequest};
use detprune::ranking::{select, AggregationKind, Direction, RankedList};
use detprune::scoring::{scatter_point, write_scatter, Level, Method, ScoreMethod};
use detprune::synth::{Generator, SynthConfig};

use config::Config;

#[derive(Parser)]
#[command(
    name = "detprune",
    version,
    about = "Training-dynamics based pruning for detection datasets"
)]
struct Cli {
    /// Defaults file; falls back to $DETPRUNE_CONFIG, then built-in values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score and rank every annotated image.
    Score(ScoreArgs),
    /// Keep the top of a ranking and write a manifest.
    Select(SelectArgs),
    /// Dump per-epoch object assignments.
    Match(MatchArgs),
    /// Analyses over manifests.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Write a synthetic dataset, log and truth table.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Prediction log; not needed for idp and random.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    method: String,
    /// mean, sum or max; object-level methods only.
    #[arg(long)]
    agg: Option<String>,
    /// Inclusive epoch range "a:b", or "b" for 1:b.
    #[arg(long)]
    window: Option<String>,
    /// Dataset profile whose default window applies when --window is absent.
    #[arg(long)]
    profile: Option<String>,
    /// high or low; overrides the method's default.
    #[arg(long)]
    direction: Option<String>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    ratio: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    method: String,
    #[arg(long)]
    agg: Option<String>,
    /// Lists zero-annotation images of this dataset in the manifest.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Class-distribution divergence (bits) of each manifest from a reference.
    Jsd {
        #[arg(long)]
        annotations: PathBuf,
        /// Reference manifest; the full dataset when absent.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Pairwise kept-set IoU matrix.
    Overlap {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Pearson r between a per-manifest statistic and external metrics.
    Corr {
        #[arg(long)]
        annotations: PathBuf,
        /// CSV "label,value"; labels are manifest file stems.
        #[arg(long)]
        metrics: PathBuf,
        /// annotations or jsd.
        #[arg(long, default_value = "annotations")]
        stat: String,
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Scale an iteration schedule by the kept fraction.
    Schedule {
        #[arg(long)]
        max_iter: u64,
        #[arg(long, value_delimiter = ',')]
        steps: Vec<u64>,
        #[arg(long, allow_hyphen_values = true)]
        ratio: f64,
    },
    /// Per-object mean and spread of iou and confidence.
    Scatter {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        window: Option<String>,
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    images: usize,
    #[arg(long, default_value_t = 5)]
    classes: u32,
    #[arg(long, default_value_t = 12)]
    epochs: u32,
    /// Objects per image, "min:max".
    #[arg(long, default_value = "1:6")]
    objects: String,
    /// Fractions of easy, hard and ambiguous objects.
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.3,0.3")]
    mix: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    distractors: usize,
    #[arg(long)]
    no_probs: bool,
    #[arg(long)]
    no_loss: bool,
    #[arg(long)]
    seed: u64,
}

/// A failure reported as one stderr line.
#[derive(Debug)]
struct Failure {
    code: String,
    detail: String,
    exit: u8,
}

impl Failure {
    fn input(code: &str, detail: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            detail: detail.into(),
            exit: 2,
        }
    }

    fn config(code: &str, detail: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            detail: detail.into(),
            exit: 3,
        }
    }
}

impl From<detprune::Error> for Failure {
    fn from(e: detprune::Error) -> Self {
        Self {
            code: e.code().to_string(),
            detail: e.to_string(),
            exit: if e.is_config() { 3 } else { 2 },
        }
    }
}

macro_rules! failure_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                detprune::Error::from(e).into()
            }
        }
    )*};
}

failure_from!(
    detprune::FormatError,
    detprune::MatchError,
    detprune::ScoreError,
    detprune::RankError,
    detprune::AnalysisError,
    detprune::SynthError
);

type CmdResult = Result<(), Failure>;

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(|f| BufReader::with_capacity(1 << 20, f))
        .map_err(|e| Failure::input("Io", format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::input("Io", format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> CmdResult {
    let result = match out {
        Some(path) => std::fs::write(path, bytes),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(bytes).and_then(|_| stdout.flush())
        }
    };
    result.map_err(|e| Failure::input("Io", e.to_string()))
}

fn load_dataset(path: &Path) -> Result<DatasetIndex, Failure> {
    Ok(parse_annotations(open(path)?)?)
}

fn load_manifest(path: &Path) -> Result<PruneManifest, Failure> {
    parse_manifest(&read_bytes(path)?).map_err(|e| {
        let f: Failure = e.into();
        Failure {
            detail: format!("{}: {}", path.display(), f.detail),
            ..f
        }
    })
}

fn parse_method(name: &str) -> Result<Method, Failure> {
    Ok(name.parse::<Method>()?)
}

fn parse_agg(name: &str) -> Result<AggregationKind, Failure> {
    Ok(name.parse::<AggregationKind>()?)
}

/// Explicit window, else the profile default, else the whole log.
fn resolve_window(
    config: &Config,
    window: Option<&str>,
    profile: Option<&str>,
    log: Option<&Path>,
) -> Result<EpochWindow, Failure> {
    if let Some(w) = window {
        return Ok(w.parse::<EpochWindow>()?);
    }
    if let Some(p) = profile {
        let len = config
            .profile_window(p)
            .map_err(|e| Failure::config("UnknownProfile", e))?;
        return Ok(EpochWindow::first(len)?);
    }
    match log {
        Some(path) => {
            let t = scan_max_epoch(open(path)?)?;
            if t == 0 {
                return Err(Failure::input(
                    "EmptyLog",
                    format!("{} has no records", path.display()),
                ));
            }
            Ok(EpochWindow::first(t)?)
        }
        None => Ok(EpochWindow::first(1)?),
    }
}

fn cmd_score(config: &Config, args: &ScoreArgs) -> CmdResult {
    let method = parse_method(&args.method)?;
    let aggregation = args.agg.as_deref().map(parse_agg).transpose()?;
    match (method.level(), aggregation) {
        (Level::Image, Some(a)) => {
            return Err(Failure::config(
                "InvalidConfig",
                format!("aggregation {a} is meaningless for image-level method {method}"),
            ))
        }
        (Level::Object, None) => {
            return Err(Failure::config(
                "InvalidConfig",
                format!("method {method} needs --agg mean|sum|max"),
            ))
        }
        _ => {}
    }
    let direction = match &args.direction {
        Some(d) => d.parse::<Direction>()?,
        None => config.direction(method),
    };
    let needs_log = !matches!(method, Method::Idp | Method::Random);
    if needs_log && args.log.is_none() {
        return Err(Failure::config(
            "InvalidConfig",
            format!("method {method} needs --log"),
        ));
    }
    let dataset = load_dataset(&args.annotations)?;
    let window = resolve_window(
        config,
        args.window.as_deref(),
        args.profile.as_deref(),
        args.log.as_deref().filter(|_| needs_log),
    )?;
    let request = ScoreRequest {
        method: ScoreMethod::new(method).with_direction(direction),
        aggregation,
        window,
        seed: args.seed,
    };
    let outcome = match (&args.log, needs_log) {
        (Some(path), true) => score_reader(&dataset, open(path)?, &request)?,
        _ => score_reader(&dataset, io::empty(), &request)?,
    };
    emit(
        args.out.as_deref(),
        &write_scores(&outcome.ranked.to_rows()),
    )
}

fn cmd_select(args: &SelectArgs) -> CmdResult {
    let method = parse_method(&args.method)?;
    let aggregation = match &args.agg {
        Some(a) => parse_agg(a)?.name(),
        None => "n/a",
    };
    let rows = parse_scores(open(&args.scores)?)?;
    let ranked = RankedList::from_rows(&rows, args.seed);
    let mut manifest = select(&ranked, args.ratio, method.name(), aggregation)?;
    if let Some(path) = &args.annotations {
        manifest.unranked_image_ids = Some(load_dataset(path)?.unannotated_image_ids());
    }
    emit(Some(&args.out), &write_manifest(&manifest))?;
    emit(
        None,
        format!("{}\n", manifest.kept_image_ids.len()).as_bytes(),
    )
}

fn cmd_match(config: &Config, args: &MatchArgs) -> CmdResult {
    let dataset = load_dataset(&args.annotations)?;
    let log = parse_logs(open(&args.log)?)?;
    let window = resolve_window(config, args.window.as_deref(), None, Some(&args.log))?;
    let mut out = String::from("image_id,object_id,epoch,matched,iou,confidence,pred_category\n");
    for record in log.records().filter(|r| window.contains(r.epoch)) {
        let image = dataset
            .image(record.image_id)
            .ok_or(detprune::MatchError::UnknownImage(record.image_id))?;
        for a in cipa_match(record.epoch, &image.objects, &record.predictions) {
            match a.matched {
                Some(m) => out.push_str(&format!(
                    "{},{},{},true,{},{},{}\n",
                    record.image_id, a.object_id, record.epoch, m.iou, m.confidence, m.category
                )),
                None => out.push_str(&format!(
                    "{},{},{},false,0,0,\n",
                    record.image_id, a.object_id, record.epoch
                )),
            }
        }
    }
    emit(args.out.as_deref(), out.as_bytes())
}

fn kept_ids(m: &PruneManifest) -> &[ImageId] {
    &m.kept_image_ids
}

fn all_ids(dataset: &DatasetIndex) -> Vec<ImageId> {
    dataset.images().iter().map(|im| im.image_id).collect()
}

fn cmd_analyze(config: &Config, cmd: &AnalyzeCommand) -> CmdResult {
    match cmd {
        AnalyzeCommand::Jsd {
            annotations,
            reference,
            manifests,
        } => {
            let dataset = load_dataset(annotations)?;
            let reference = match reference {
                Some(p) => class_distribution(&dataset, kept_ids(&load_manifest(p)?))?,
                None => class_distribution(&dataset, &all_ids(&dataset))?,
            };
            let mut out = String::from("manifest,jsd_bits\n");
            for path in manifests {
                let m = load_manifest(path)?;
                let d = class_distribution(&dataset, kept_ids(&m))?;
                out.push_str(&format!(
                    "{},{}\n",
                    path.display(),
                    js_divergence(&reference, &d)?
                ));
            }
            emit(None, out.as_bytes())
        }
        AnalyzeCommand::Overlap { manifests } => {
            let sets: Vec<HashSet<ImageId>> = manifests
                .iter()
                .map(|p| load_manifest(p).map(|m| m.kept_set()))
                .collect::<Result<_, _>>()?;
            let mut out = String::from("manifest");
            for p in manifests {
                out.push_str(&format!(",{}", p.display()));
            }
            out.push('\n');
            for (p, a) in manifests.iter().zip(&sets) {
                out.push_str(&p.display().to_string());
                for b in &sets {
                    out.push_str(&format!(",{}", sample_iou(a, b)?));
                }
                out.push('\n');
            }
            emit(None, out.as_bytes())
        }
        AnalyzeCommand::Corr {
            annotations,
            metrics,
            stat,
            manifests,
        } => {
            let dataset = load_dataset(annotations)?;
            let table = read_metrics(metrics)?;
            let full = class_distribution(&dataset, &all_ids(&dataset))?;
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for path in manifests {
                let label = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let value = *table.get(&label).ok_or_else(|| {
                    Failure::input("MissingMetric", format!("no metric for label {label:?}"))
                })?;
                let m = load_manifest(path)?;
                let x = match stat.as_str() {
                    "annotations" => annotation_count(&dataset, kept_ids(&m))? as f64,
                    "jsd" => js_divergence(&full, &class_distribution(&dataset, kept_ids(&m))?)?,
                    other => {
                        return Err(Failure::config(
                            "InvalidConfig",
                            format!("unknown statistic {other:?}; use annotations or jsd"),
                        ))
                    }
                };
                xs.push(x);
                ys.push(value);
            }
            let r = pearson_r(&xs, &ys)?;
            emit(
                None,
                format!("statistic,n,r\n{stat},{},{r}\n", xs.len()).as_bytes(),
            )
        }
        AnalyzeCommand::Schedule {
            max_iter,
            steps,
            ratio,
        } => {
            let full = Schedule::new(*max_iter, steps.clone())?;
            emit(
                None,
                format!("{}\n", scale_schedule(&full, *ratio)?).as_bytes(),
            )
        }
        AnalyzeCommand::Scatter {
            annotations,
            log,
            window,
            profile,
            out,
        } => {
            let dataset = load_dataset(annotations)?;
            let records = parse_logs(open(log)?)?;
            let window = resolve_window(config, window.as_deref(), profile.as_deref(), Some(log))?;
            let series = build_series(&dataset, &records, window)?;
            let points = series
                .iter()
                .map(scatter_point)
                .collect::<Result<Vec<_>, _>>()?;
            emit(out.as_deref(), &write_scatter(&points))
        }
    }
}

fn read_metrics(path: &Path) -> Result<BTreeMap<String, f64>, Failure> {
    let mut reader = csv::Reader::from_reader(open(path)?);
    let bad = |detail: String| {
        Failure::input("MalformedDocument", format!("{}: {detail}", path.display()))
    };
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["label", "value"] {
        return Err(bad("header must be \"label,value\"".into()));
    }
    let mut table = BTreeMap::new();
    for row in reader.deserialize::<(String, f64)>() {
        let (label, value) = row.map_err(|e| bad(e.to_string()))?;
        if table.insert(label.clone(), value).is_some() {
            return Err(bad(format!("duplicate label {label:?}")));
        }
    }
    Ok(table)
}

fn cmd_synth(args: &SynthArgs) -> CmdResult {
    let objects = args
        .objects
        .split_once(':')
        .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
        .ok_or_else(|| {
            Failure::config(
                "InvalidConfig",
                format!("--objects {:?} is not min:max", args.objects),
            )
        })?;
    let mix: [f64; 3] = args
        .mix
        .as_slice()
        .try_into()
        .map_err(|_| Failure::config("InvalidConfig", "--mix needs three fractions"))?;
    let generator = Generator::new(SynthConfig {
        num_images: args.images,
        num_classes: args.classes,
        epochs: args.epochs,
        objects_per_image: objects,
        mix,
        distractors_per_image: args.distractors,
        with_probs: !args.no_probs,
        with_loss: !args.no_loss,
        seed: args.seed,
        ..SynthConfig::default()
    })?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Failure::input("Io", format!("{}: {e}", args.out_dir.display())))?;
    let io_fail = |e: io::Error| Failure::input("Io", e.to_string());
    emit(
        Some(&args.out_dir.join("annotations.json")),
        &write_annotations(&generator.dataset()?),
    )?;
    let log = File::create(args.out_dir.join("log.jsonl")).map_err(io_fail)?;
    let mut log = BufWriter::new(log);
    generator.write_log(&mut log)?;
    log.flush().map_err(io_fail)?;
    emit(
        Some(&args.out_dir.join("truth.csv")),
        &generator.truth()?.to_csv(),
    )
}

fn run(cli: &Cli) -> CmdResult {
    let config =
        Config::load(cli.config.as_deref()).map_err(|e| Failure::config("InvalidConfig", e))?;
    match &cli.command {
        Command::Score(a) => cmd_score(&config, a),
        Command::Select(a) => cmd_select(a),
        Command::Match(a) => cmd_match(&config, a),
        Command::Analyze(c) => cmd_analyze(&config, c),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let detail: Vec<&str> = text
                .lines()
                .map(|l| l.trim().trim_start_matches("error: "))
                .filter(|l| !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more"))
                .collect();
            eprintln!("ERROR Usage: {}", detail.join(" "));
            return ExitCode::from(3);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let detail = f.detail.replace('\n', " ");
            eprintln!("ERROR {}: {}", f.code, detail);
            ExitCode::from(f.exit)
        }
    }
}
