//! Command-line pipeline driver: simulate -> (features) -> normalize /
//! sweep / enroll / diagnose -> train -> report, with file-based handoff
//! between stages.
//!
//! Every stage is deterministic for fixed flags. JSON outputs embed the
//! resolved configuration; CSV outputs get a `<name>.meta.json` sidecar
//! with the same information so any artifact can be regenerated from its
//! own header. All writes are atomic (temp file + rename).

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tempnorm::error::TempNormError;
use tempnorm::eval::{
    default_half_lives, distribution_diagnostics, enrollment_curve, normalize_timeline,
    sweep_half_life, DistributionDiagnostics, EvalConfig,
};
use tempnorm::features::{
    emotion_feature_vector, read_feature_records, transcript_graph_features, write_feature_records,
    FeatureRecord, SegmentScoreSeries, Token, TranscriptRecord,
};
use tempnorm::neural::{self, MlpConfig, SubjectData, TrainConfig};
use tempnorm::report::{atomic_write, round6, EnrollmentReport, SweepReport};
use tempnorm::sim::{generate_cohort, read_cohort_csv, write_cohort_csv, Cohort, CohortConfig};
use tempnorm::HalfLife;

#[derive(Parser)]
#[command(name = "tempnorm", version, about = "Streaming baseline normalization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort CSV with ground-truth flags.
    Simulate(SimulateArgs),
    /// Normalize a cohort and emit per-week scores with regions.
    Normalize(NormalizeArgs),
    /// Sweep half-lives over a cohort and report per-half-life UAR.
    Sweep(SweepArgs),
    /// Enrollment curves: UAR as a function of unscored warm-up length.
    Enroll(EnrollArgs),
    /// Distribution diagnostics of normalized scores.
    Diagnose(DiagnoseArgs),
    /// Turn segment scores or transcripts into feature records.
    Features(FeaturesArgs),
    /// Train the neural regressor on feature records plus cohort labels.
    Train(TrainArgs),
    /// Convert a JSON report into plot-ready CSV.
    Report(ReportArgs),
}

/// Optional JSON overrides for `simulate`; explicit flags win over the file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateFileConfig {
    subjects: Option<usize>,
    weeks: Option<u32>,
    anomaly_rate: Option<f64>,
    anomaly_magnitude: Option<f64>,
    zero_inflation: Option<f64>,
    missing_rate: Option<f64>,
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    weeks: Option<u32>,
    #[arg(long)]
    anomaly_rate: Option<f64>,
    #[arg(long)]
    anomaly_magnitude: Option<f64>,
    #[arg(long)]
    zero_inflation: Option<f64>,
    #[arg(long)]
    missing_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct NormalizeArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, default_value = "16")]
    half_life: HalfLife,
    /// Restrict output to one subject id.
    #[arg(long)]
    subject: Option<String>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// Comma-separated half-lives; "inf" is the population prior.
    #[arg(long, value_delimiter = ',')]
    half_lives: Vec<HalfLife>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EnrollArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, value_delimiter = ',')]
    half_lives: Vec<HalfLife>,
    #[arg(long, default_value_t = 12)]
    max_enrollment: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, default_value = "8")]
    half_life: HalfLife,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum FeatureKind {
    /// 31 statistics per score dimension of segment-level score vectors.
    Emotion,
    /// 12 speech-graph measures x 3 variants x {raw, per-word}.
    Graph,
}

#[derive(Args)]
struct FeaturesArgs {
    /// JSON Lines input; schema depends on --kind (see module docs).
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    kind: FeatureKind,
    /// Expected score dimensions per segment (emotion kind only).
    #[arg(long, default_value_t = 6)]
    score_width: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    half_life: Option<HalfLife>,
    hidden_width: Option<usize>,
    epochs: Option<usize>,
    pretrain_epochs: Option<usize>,
    learning_rate: Option<f64>,
    seed: Option<u64>,
    tempnorm_layer: Option<bool>,
}

#[derive(Args)]
struct TrainArgs {
    /// Feature records (JSON Lines) keyed by subject and week.
    #[arg(short, long)]
    input: PathBuf,
    /// Cohort CSV supplying the raw rating labels.
    #[arg(long)]
    labels: PathBuf,
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    half_life: Option<HalfLife>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable the in-network normalization layer (ablation baseline).
    #[arg(long)]
    no_tempnorm_layer: bool,
    /// Results JSON (per-subject UAR plus mean).
    #[arg(short, long)]
    output: PathBuf,
    /// Optional model checkpoint JSON (one model per fold).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Optional per-epoch training log (JSON Lines).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// A sweep or enrollment report JSON.
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

fn read_json_config<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> Result<T, TempNormError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let bytes = fs::read(p)?;
            Ok(serde_json::from_slice(&bytes)?)
        }
    }
}

fn write_sidecar(output: &Path, config: &serde_json::Value) -> Result<(), TempNormError> {
    let name = output
        .file_name()
        .ok_or_else(|| TempNormError::InvalidParameter(format!("bad output path {output:?}")))?;
    let sidecar = output.with_file_name(format!("{}.meta.json", name.to_string_lossy()));
    let mut body = serde_json::to_vec_pretty(config)?;
    body.push(b'\n');
    atomic_write(&sidecar, &body)
}

fn write_json_report<T: Serialize>(output: &Path, report: &T) -> Result<(), TempNormError> {
    let mut body = serde_json::to_vec_pretty(report)?;
    body.push(b'\n');
    atomic_write(output, &body)
}

fn load_cohort(path: &Path) -> Result<Cohort, TempNormError> {
    let file = fs::File::open(path)?;
    read_cohort_csv(BufReader::new(file))
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), TempNormError> {
    let file: SimulateFileConfig = read_json_config(&args.config)?;
    let mut cfg = CohortConfig::default();
    if let Some(v) = args.subjects.or(file.subjects) {
        cfg.n_subjects = v;
    }
    if let Some(v) = args.weeks.or(file.weeks) {
        cfg.base.n_weeks = v;
    }
    if let Some(v) = args.anomaly_rate.or(file.anomaly_rate) {
        cfg.base.anomaly_rate = v;
    }
    if let Some(v) = args.anomaly_magnitude.or(file.anomaly_magnitude) {
        cfg.base.anomaly_magnitude = v;
    }
    if let Some(v) = args.zero_inflation.or(file.zero_inflation) {
        cfg.base.zero_inflation = v;
    }
    if let Some(v) = args.missing_rate.or(file.missing_rate) {
        cfg.base.missing_rate = v;
    }
    let seed = args.seed.or(file.seed).unwrap_or(0);

    let cohort = generate_cohort(&cfg, seed)?;
    let mut csv_bytes = Vec::new();
    write_cohort_csv(&cohort, &mut csv_bytes)?;
    atomic_write(&args.output, &csv_bytes)?;
    write_sidecar(
        &args.output,
        &serde_json::json!({
            "stage": "simulate",
            "seed": seed,
            "cohort": cfg,
        }),
    )
}

fn cmd_normalize(args: NormalizeArgs) -> Result<(), TempNormError> {
    let cohort = load_cohort(&args.input)?;
    let eval_cfg = EvalConfig::default();
    let mut subjects: Vec<_> = cohort.subjects.iter().collect();
    subjects.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    if let Some(wanted) = &args.subject {
        subjects.retain(|s| &s.subject_id == wanted);
        if subjects.is_empty() {
            return Err(TempNormError::InvalidInput(format!(
                "subject {wanted:?} not present in {:?}",
                args.input
            )));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "subject_id",
        "week",
        "mania",
        "depression",
        "max",
        "region",
        "flag",
    ])?;
    for subject in subjects {
        let scores = normalize_timeline(subject, args.half_life, &eval_cfg)?;
        for i in 0..scores.weeks.len() {
            w.write_record([
                subject.subject_id.as_str(),
                &scores.weeks[i].to_string(),
                &format!("{:.6}", scores.mania[i]),
                &format!("{:.6}", scores.depression[i]),
                &format!("{:.6}", scores.max[i]),
                &scores.regions[i].to_string(),
                if scores.flags[i] { "1" } else { "0" },
            ])?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| TempNormError::InvalidInput(format!("csv buffer error: {e}")))?;
    atomic_write(&args.output, &bytes)?;
    write_sidecar(
        &args.output,
        &serde_json::json!({
            "stage": "normalize",
            "input": args.input,
            "half_life": args.half_life,
            "subject": args.subject,
            "eval": eval_cfg,
        }),
    )
}

fn resolved_half_lives(flag: &[HalfLife]) -> Vec<HalfLife> {
    if flag.is_empty() {
        default_half_lives()
    } else {
        flag.to_vec()
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<(), TempNormError> {
    let cohort = load_cohort(&args.input)?;
    let eval_cfg = EvalConfig::default();
    let half_lives = resolved_half_lives(&args.half_lives);
    let rows = sweep_half_life(&cohort, &half_lives, &eval_cfg)?;
    let report = SweepReport::new(
        serde_json::json!({
            "stage": "sweep",
            "input": args.input,
            "half_lives": half_lives,
            "eval": eval_cfg,
        }),
        rows,
    );
    write_json_report(&args.output, &report)
}

fn cmd_enroll(args: EnrollArgs) -> Result<(), TempNormError> {
    let cohort = load_cohort(&args.input)?;
    let eval_cfg = EvalConfig::default();
    let half_lives = resolved_half_lives(&args.half_lives);
    let rows = enrollment_curve(&cohort, &half_lives, args.max_enrollment, &eval_cfg)?;
    let report = EnrollmentReport::new(
        serde_json::json!({
            "stage": "enroll",
            "input": args.input,
            "half_lives": half_lives,
            "max_enrollment": args.max_enrollment,
            "eval": eval_cfg,
        }),
        rows,
    );
    write_json_report(&args.output, &report)
}

#[derive(Serialize)]
struct DiagnoseReport {
    config: serde_json::Value,
    mania: DistributionDiagnostics,
    depression: DistributionDiagnostics,
    pooled: DistributionDiagnostics,
}

fn round_diag(d: DistributionDiagnostics) -> DistributionDiagnostics {
    DistributionDiagnostics {
        mean: round6(d.mean),
        std: round6(d.std),
        r_squared_normal: round6(d.r_squared_normal),
    }
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<(), TempNormError> {
    let cohort = load_cohort(&args.input)?;
    let eval_cfg = EvalConfig::default();
    let mut subjects: Vec<_> = cohort.subjects.iter().collect();
    subjects.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let mut mania = Vec::new();
    let mut depression = Vec::new();
    for subject in subjects {
        let scores = normalize_timeline(subject, args.half_life, &eval_cfg)?;
        mania.extend(scores.mania);
        depression.extend(scores.depression);
    }
    let pooled: Vec<f64> = mania.iter().chain(&depression).copied().collect();
    let report = DiagnoseReport {
        config: serde_json::json!({
            "stage": "diagnose",
            "input": args.input,
            "half_life": args.half_life,
            "eval": eval_cfg,
        }),
        mania: round_diag(distribution_diagnostics(&mania)?),
        depression: round_diag(distribution_diagnostics(&depression)?),
        pooled: round_diag(distribution_diagnostics(&pooled)?),
    };
    write_json_report(&args.output, &report)
}

/// Input line for `features --kind emotion`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmotionInputLine {
    subject_id: String,
    week: u32,
    segments: Vec<Vec<f64>>,
}

/// Input line for `features --kind graph`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphInputLine {
    subject_id: String,
    week: u32,
    segments: Vec<Vec<Token>>,
}

fn cmd_features(args: FeaturesArgs) -> Result<(), TempNormError> {
    let text = fs::read_to_string(&args.input)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: TempNormError| TempNormError::AtIndex(lineno, Box::new(e));
        match args.kind {
            FeatureKind::Emotion => {
                let input: EmotionInputLine =
                    serde_json::from_str(line).map_err(|e| at(e.into()))?;
                let series = SegmentScoreSeries {
                    segments: input.segments,
                };
                let features =
                    emotion_feature_vector(&series, args.score_width).map_err(at)?;
                records.push(FeatureRecord {
                    subject_id: input.subject_id,
                    week: input.week,
                    features,
                    set: format!("emotion_31x{}", args.score_width),
                });
            }
            FeatureKind::Graph => {
                let input: GraphInputLine =
                    serde_json::from_str(line).map_err(|e| at(e.into()))?;
                let record = TranscriptRecord {
                    segments: input.segments,
                };
                let features = transcript_graph_features(&record).map_err(at)?;
                records.push(FeatureRecord {
                    subject_id: input.subject_id,
                    week: input.week,
                    features,
                    set: "graph_12x3x2".to_string(),
                });
            }
        }
    }
    let mut bytes = Vec::new();
    write_feature_records(&records, &mut bytes)?;
    atomic_write(&args.output, &bytes)?;
    write_sidecar(
        &args.output,
        &serde_json::json!({
            "stage": "features",
            "input": args.input,
            "kind": match args.kind {
                FeatureKind::Emotion => "emotion",
                FeatureKind::Graph => "graph",
            },
            "score_width": args.score_width,
            "records": records.len(),
        }),
    )
}

/// Joins feature records with cohort labels on (subject, week).
fn join_training_data(
    features: &[FeatureRecord],
    cohort: &Cohort,
) -> Result<Vec<SubjectData>, TempNormError> {
    let mut labels: BTreeMap<(String, u32), (f64, f64)> = BTreeMap::new();
    for s in &cohort.subjects {
        for r in &s.rows {
            labels.insert(
                (s.subject_id.clone(), r.week),
                (r.ymrs as f64, r.hdrs as f64),
            );
        }
    }
    let mut by_subject: BTreeMap<String, Vec<&FeatureRecord>> = BTreeMap::new();
    for f in features {
        by_subject.entry(f.subject_id.clone()).or_default().push(f);
    }
    let mut out = Vec::new();
    for (subject_id, mut recs) in by_subject {
        recs.sort_by_key(|r| r.week);
        let mut data = SubjectData {
            subject_id: subject_id.clone(),
            features: Vec::new(),
            raw_mania: Vec::new(),
            raw_depression: Vec::new(),
        };
        for rec in recs {
            let (m, h) = labels.get(&(subject_id.clone(), rec.week)).ok_or_else(|| {
                TempNormError::InvalidInput(format!(
                    "no label row for subject {subject_id} week {}",
                    rec.week
                ))
            })?;
            data.features.push(rec.features.clone());
            data.raw_mania.push(*m);
            data.raw_depression.push(*h);
        }
        out.push(data);
    }
    if out.is_empty() {
        return Err(TempNormError::InvalidInput(
            "no feature records to train on".into(),
        ));
    }
    Ok(out)
}

#[derive(Serialize)]
struct TrainReport {
    config: serde_json::Value,
    subject_results: Vec<neural::SubjectResult>,
    mean_uar: Option<f64>,
}

fn cmd_train(args: TrainArgs) -> Result<(), TempNormError> {
    let file: TrainFileConfig = read_json_config(&args.config)?;
    let features = {
        let f = fs::File::open(&args.input)?;
        read_feature_records(BufReader::new(f))?
    };
    let cohort = load_cohort(&args.labels)?;
    let subjects = join_training_data(&features, &cohort)?;
    let input_width = subjects[0].features[0].len();

    let half_life = args
        .half_life
        .or(file.half_life)
        .unwrap_or(HalfLife::Finite(8.0));
    let mut mlp_cfg = MlpConfig::new(input_width, half_life);
    if let Some(w) = args.hidden_width.or(file.hidden_width) {
        mlp_cfg = mlp_cfg.with_hidden_width(w);
    }
    let mut train_cfg = TrainConfig::default();
    if let Some(v) = args.epochs.or(file.epochs) {
        train_cfg.total_epochs = v;
    }
    if let Some(v) = args.pretrain_epochs.or(file.pretrain_epochs) {
        train_cfg.pretrain_epochs = v;
    }
    if let Some(v) = args.learning_rate.or(file.learning_rate) {
        train_cfg.learning_rate = v;
    }
    if args.no_tempnorm_layer {
        train_cfg.use_tempnorm_layer = false;
    } else if let Some(v) = file.tempnorm_layer {
        train_cfg.use_tempnorm_layer = v;
    }
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let eval_cfg = EvalConfig::default();

    let outcome = neural::train(&subjects, &mlp_cfg, &train_cfg, &eval_cfg, seed)?;

    let config = serde_json::json!({
        "stage": "train",
        "input": args.input,
        "labels": args.labels,
        "seed": seed,
        "mlp": mlp_cfg,
        "train": train_cfg,
        "eval": eval_cfg,
    });
    let mut subject_results = outcome.subject_results;
    for r in &mut subject_results {
        r.uar = r.uar.map(round6);
    }
    let report = TrainReport {
        config: config.clone(),
        subject_results,
        mean_uar: outcome.mean_uar.map(round6),
    };
    write_json_report(&args.output, &report)?;

    if let Some(path) = &args.checkpoint {
        let checkpoint = serde_json::json!({
            "config": config,
            "fold_models": outcome.fold_models,
        });
        write_json_report(path, &checkpoint)?;
    }
    if let Some(path) = &args.log {
        let mut bytes = Vec::new();
        for entry in &outcome.logs {
            serde_json::to_writer(&mut bytes, entry)?;
            bytes.push(b'\n');
        }
        atomic_write(path, &bytes)?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), TempNormError> {
    let bytes = fs::read(&args.input)?;
    if let Ok(sweep) = serde_json::from_slice::<SweepReport>(&bytes) {
        let csv = sweep.to_csv()?;
        return atomic_write(&args.output, csv.as_bytes());
    }
    let enroll: EnrollmentReport = serde_json::from_slice(&bytes).map_err(|_| {
        TempNormError::InvalidInput(format!(
            "{:?} is neither a sweep nor an enrollment report",
            args.input
        ))
    })?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["half_life", "enrollment", "n_subjects", "uar_mean"])?;
    for row in &enroll.rows {
        w.write_record([
            row.half_life.to_string(),
            row.enrollment.to_string(),
            row.n_subjects.to_string(),
            row.uar_mean.map_or(String::new(), |v| format!("{v:.6}")),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| TempNormError::InvalidInput(format!("csv buffer error: {e}")))?;
    atomic_write(&args.output, &bytes)
}

fn run(cli: Cli) -> Result<(), TempNormError> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Normalize(a) => cmd_normalize(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Enroll(a) => cmd_enroll(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Features(a) => cmd_features(a),
        Command::Train(a) => cmd_train(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    // clap exits with code 2 on usage errors before we get here.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}
