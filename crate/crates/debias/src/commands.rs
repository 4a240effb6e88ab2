//! The four pipeline steps behind the command-line driver.

use std::path::{Path, PathBuf};
use std::time::Instant;

use vqa_debias_core::datagen::{self, Answer, DatasetSplit, SplitKind, GRID_SIZE};
use vqa_debias_core::evaluator::{
    self, Comparison, ConstantPredictor, ImageBlindPredictor, MetricsReport, OraclePredictor, Predictor,
};
use vqa_debias_core::model::ModelParams;
use vqa_debias_core::trainer::{self, TrainLog, TrainMode};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifest::{self, RunManifest};
use crate::{checkpoint, dataset_io, report, trainlog};

/// Splits with fewer samples per template than this cannot resolve the bias
/// rates to 0.03 and are skipped by the bias check.
pub const BIAS_CHECK_MIN_SAMPLES: usize = 34;
pub const BIAS_TOLERANCE: f64 = 0.03;

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub out: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub rho: f64,
    pub seed: u64,
    pub verify: bool,
}

/// Answers that disagree with a recount of the objects in the image.
pub fn recount_mismatches(split: &DatasetSplit) -> Result<usize> {
    let mut bad = 0;
    for s in &split.samples {
        let scene = datagen::decode_scene(&s.image, GRID_SIZE)?;
        bad += usize::from(s.template.answer(&scene).id() != s.answer_id);
    }
    Ok(bad)
}

pub fn verify_split(split: &DatasetSplit) -> Result<()> {
    let bad = recount_mismatches(split)?;
    if bad > 0 {
        return Err(Error::Verification(format!(
            "{bad} {} answers disagree with the image",
            split.kind.name()
        )));
    }
    let dev = datagen::bias_deviation(split, BIAS_CHECK_MIN_SAMPLES);
    if dev > BIAS_TOLERANCE {
        return Err(Error::Verification(format!(
            "{} answer rates deviate from target by {dev:.4} (> {BIAS_TOLERANCE})",
            split.kind.name()
        )));
    }
    Ok(())
}

pub fn generate(args: &GenerateArgs) -> Result<RunManifest> {
    let start = Instant::now();
    let train = datagen::generate_split(args.n_train, SplitKind::TrainBiased, args.rho, args.seed)?;
    let test = datagen::generate_split(args.n_test, SplitKind::TestBalanced, args.rho, args.seed)?;
    let mut outputs = dataset_io::write_split(&args.out, &train)?;
    outputs.extend(dataset_io::write_split(&args.out, &test)?);
    if args.verify {
        for kind in [SplitKind::TrainBiased, SplitKind::TestBalanced] {
            verify_split(&dataset_io::read_split(&args.out, kind)?)?;
        }
    }
    let mut m = RunManifest::new(
        "generate",
        serde_json::json!({
            "n_train": args.n_train,
            "n_test": args.n_test,
            "rho": args.rho,
            "verify": args.verify,
        }),
    );
    m.seeds.insert("data".into(), args.seed);
    for p in &outputs {
        m.record_output(p)?;
    }
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    m.write(&args.out.join("manifest.json"))?;
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub mode: Option<TrainMode>,
    pub out: PathBuf,
}

pub struct TrainOutcome {
    pub config: RunConfig,
    pub log: TrainLog,
    pub manifest: RunManifest,
}

pub fn train(args: &TrainArgs, mut on_epoch: impl FnMut(&trainer::EpochRecord)) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(mode) = args.mode {
        cfg.train.mode = mode;
    }
    cfg.train = cfg.train.normalized();
    let data = dataset_io::read_split(&args.data, SplitKind::TrainBiased)?;

    let log_path = trainlog::log_path_for(&args.out);
    let mut writer = trainlog::TrainLogWriter::create(&log_path)?;
    let mut write_err = None;
    let (params, log) = trainer::train_with::<f32>(&cfg.model, &cfg.train, &data, |r| {
        if write_err.is_none() {
            write_err = writer.append(r).err();
        }
        on_epoch(r);
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    checkpoint::save(&params, &args.out)?;

    let mut m = RunManifest::new(
        "train",
        serde_json::json!({
            "train": cfg.train,
            "model": cfg.model,
            "rendered": cfg.render(),
        }),
    );
    m.seeds.insert("train".into(), cfg.train.seed);
    m.seeds.insert("data".into(), data.seed);
    m.inputs.push(args.data.display().to_string());
    if let Some(p) = &args.config {
        m.inputs.push(p.display().to_string());
    }
    m.record_output(&args.out)?;
    m.record_output(&log_path)?;
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    m.write(&manifest::manifest_path_for(&args.out))?;
    Ok(TrainOutcome {
        config: cfg,
        log,
        manifest: m,
    })
}

/// A trained checkpoint or one of the reference predictors
/// (`stub:oracle`, `stub:image-blind`, `stub:constant=<answer>`).
pub enum LoadedPredictor {
    Model(ModelParams<f32>),
    Oracle(OraclePredictor),
    ImageBlind(ImageBlindPredictor),
    Constant(ConstantPredictor),
}

impl LoadedPredictor {
    pub fn as_predictor(&self) -> &dyn Predictor {
        match self {
            Self::Model(p) => p,
            Self::Oracle(p) => p,
            Self::ImageBlind(p) => p,
            Self::Constant(p) => p,
        }
    }
}

/// Loads `spec`, returning the predictor and its identity string.
pub fn load_predictor(spec: &str) -> Result<(LoadedPredictor, String)> {
    if let Some(stub) = spec.strip_prefix("stub:") {
        let p = match stub {
            "oracle" => LoadedPredictor::Oracle(OraclePredictor::default()),
            "image-blind" => LoadedPredictor::ImageBlind(ImageBlindPredictor),
            other => {
                let answer = other
                    .strip_prefix("constant=")
                    .and_then(Answer::from_name)
                    .ok_or_else(|| Error::Verification(format!("unknown stub predictor `{spec}`")))?;
                LoadedPredictor::Constant(ConstantPredictor(answer))
            }
        };
        return Ok((p, spec.to_string()));
    }
    let path = Path::new(spec);
    let params = checkpoint::load(path)?;
    Ok((LoadedPredictor::Model(params), manifest::hash_file(path)?))
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub checkpoint: String,
    pub data: PathBuf,
    pub shuffle_seed: u64,
    pub report: PathBuf,
    pub verify: bool,
}

pub struct EvaluateOutcome {
    pub report: MetricsReport,
    pub warnings: Vec<vqa_debias_core::Error>,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<EvaluateOutcome> {
    let start = Instant::now();
    let (predictor, checkpoint_id) = load_predictor(&args.checkpoint)?;
    let header = dataset_io::read_header(&args.data, SplitKind::TestBalanced)?;
    if let LoadedPredictor::Model(p) = &predictor {
        let cfg = p.config();
        if cfg.vocab_size != header.vocab.len() || cfg.answer_count != header.answers.len() {
            return Err(vqa_debias_core::Error::DatasetMismatch(
                format!("checkpoint ({} words, {} answers)", cfg.vocab_size, cfg.answer_count),
                format!(
                    "dataset ({} words, {} answers)",
                    header.vocab.len(),
                    header.answers.len()
                ),
            )
            .into());
        }
    }
    let data = dataset_io::read_split(&args.data, SplitKind::TestBalanced)?;
    if let LoadedPredictor::Model(p) = &predictor {
        if let Some(s) = data.samples.first() {
            let side = p.config().image_size;
            if s.image.height != side || s.image.width != side {
                return Err(vqa_debias_core::Error::DatasetMismatch(
                    format!("checkpoint ({side}x{side} images)"),
                    format!("dataset ({}x{} images)", s.image.height, s.image.width),
                )
                .into());
            }
        }
    }
    let (rows, warnings) = evaluator::evaluate(predictor.as_predictor(), &data, args.shuffle_seed)?;
    let report = MetricsReport {
        dataset_id: dataset_io::split_id(&args.data, SplitKind::TestBalanced)?,
        checkpoint_id,
        shuffle_seed: args.shuffle_seed,
        rows,
    };
    if args.verify {
        report::check_report(&report).map_err(Error::Verification)?;
    }
    let outputs = report::write_report(&report, &args.report)?;
    let mut m = RunManifest::new("evaluate", serde_json::json!({ "verify": args.verify }));
    m.seeds.insert("shuffle".into(), args.shuffle_seed);
    m.inputs.push(args.checkpoint.clone());
    m.inputs.push(args.data.display().to_string());
    for p in &outputs {
        m.record_output(p)?;
    }
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    m.write(&manifest::manifest_path_for(&args.report))?;
    Ok(EvaluateOutcome { report, warnings })
}

pub fn compare(a: &Path, b: &Path, out: &Path) -> Result<Comparison> {
    let start = Instant::now();
    let ra = report::read_report(a)?;
    let rb = report::read_report(b)?;
    let cmp = evaluator::compare_runs(&ra, &rb)?;
    let outputs = report::write_comparison(&cmp, out)?;
    let mut m = RunManifest::new("compare", serde_json::json!({}));
    m.inputs.push(a.display().to_string());
    m.inputs.push(b.display().to_string());
    for p in &outputs {
        m.record_output(p)?;
    }
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    m.write(&manifest::manifest_path_for(out))?;
    Ok(cmp)
}
