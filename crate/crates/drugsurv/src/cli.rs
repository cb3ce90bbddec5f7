use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use drugsurv_core::cohort::{load_cohort, load_patients, synthesize_cohort, write_cohort, CohortSpec, OutcomeLabel};
use drugsurv_core::evaluate::{
    bland_altman_svg, cross_validate, cross_validate_length, evaluate_holdout, evaluate_length_holdout,
    roc_auc_ovr, roc_svg, write_auc_table_csv, write_confusion_csv, write_folds_csv, write_table2_csv,
    AgreementReport, AucRow, CvOptions, CvReport, PcaSettings, Table2Row,
};
use drugsurv_core::learn::{fit, load_model, save_model, ModelArtifact, ModelConfig, ModelKind};
use drugsurv_core::preprocess::{derive_schema, encode, pca_screen_matrix, SchemaMode};
use drugsurv_core::prescribe::{optimize_profile, OptimizeOptions};
use drugsurv_core::cohort::RocGroup;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::service;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "drugsurv", version, about = "Biologic drug-survival modeling pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic cohort CSV.
    Synth(SynthArgs),
    /// Fit a model on a cohort and save it.
    Train(TrainArgs),
    /// Cross-validate a classifier and write the comparison outputs.
    Evaluate(EvaluateArgs),
    /// Evaluate the treatment-length regressor.
    LengthEval(LengthEvalArgs),
    /// Search for the patient profile that best predicts continuation.
    Optimize(OptimizeArgs),
    /// Predict one patient row.
    Predict(PredictArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Cohort spec JSON; registry-like defaults when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the seed given in the JSON.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the size given in the JSON.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    /// Learner: glm, logreg, tree, forest, gbt or length_glm.
    #[arg(long, default_value = "glm")]
    pub model: ModelKind,
    /// Model configuration JSON; unspecified fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "baseline")]
    pub mode: SchemaMode,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Screen columns with PCA before fitting.
    #[arg(long)]
    pub pca: bool,
    /// Write NA / null instead of wall-clock timings so outputs are
    /// byte-reproducible.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: ModelArgs,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Also evaluate one seeded train/test split with this many test rows.
    #[arg(long)]
    pub holdout: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct LengthEvalArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Evaluate one seeded split with this many test rows instead of k folds.
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Classifier model file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    pub min_probability: f64,
    #[arg(long, default_value = "continue")]
    pub target: OutcomeLabel,
    /// Grid points per numeric feature.
    #[arg(long, default_value_t = 50)]
    pub points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Classifier model file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub length_model: Option<PathBuf>,
    /// CSV with cohort columns; outcome columns may be absent.
    #[arg(long)]
    pub cohort: PathBuf,
    /// Zero-based data row.
    #[arg(long, default_value_t = 0)]
    pub row: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub length_model: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
}

/// Reproducibility stamp carried by every written artifact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub format_version: u32,
    pub command: &'static str,
    pub seed: u64,
    pub config_hash: String,
    pub timing: bool,
}

impl Provenance {
    fn new(command: &'static str, seed: u64, config_hash: String, timing: bool) -> Self {
        Self {
            tool: "drugsurv",
            format_version: FORMAT_VERSION,
            command,
            seed,
            config_hash,
            timing,
        }
    }

    fn svg_comment(&self) -> String {
        format!(
            "<!-- drugsurv format_version={} command={} seed={} config_hash={} -->",
            self.format_version, self.command, self.seed, self.config_hash
        )
    }
}

pub fn hash16(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects output files and writes `manifest.json` listing their digests.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| path_error(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| path_error(&path, e))?;
        self.files.push((name.to_string(), hash16(bytes)));
        Ok(())
    }

    fn finish(self, provenance: &Provenance) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct File {
            name: String,
            sha256_16: String,
        }
        #[derive(Serialize)]
        struct Manifest<'a> {
            provenance: &'a Provenance,
            files: Vec<File>,
        }
        let manifest = Manifest {
            provenance,
            files: self
                .files
                .into_iter()
                .map(|(name, sha256_16)| File { name, sha256_16 })
                .collect(),
        };
        let path = self.dir.join("manifest.json");
        fs::write(&path, pretty(&manifest)).map_err(|e| path_error(&path, e))
    }
}

fn path_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new("serve", "Io", format!("{}: {e}", path.display()))
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::new("serve", "InvalidPath", format!("{} is not a readable file", path.display())))
    }
}

fn require_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(CliError::new(
            "serve",
            "InvalidPath",
            format!("directory {} does not exist", p.display()),
        )),
        _ => Ok(()),
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("output serializes");
    s.push('\n');
    s
}

fn write_json<T: Serialize>(out: Option<&Path>, v: &T) -> Result<(), CliError> {
    let text = pretty(v);
    match out {
        Some(path) => fs::write(path, text).map_err(|e| path_error(path, e)),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>, kind: ModelKind, seed: u64) -> Result<ModelConfig, CliError> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| path_error(p, e))?;
            let mut c: ModelConfig = serde_json::from_str(&text)
                .map_err(|e| CliError::new("learn", "InvalidConfig", format!("{}: {e}", p.display())))?;
            c.kind = kind;
            c
        }
        None => ModelConfig::new(kind),
    };
    config.seed = seed;
    config.validate()?;
    Ok(config)
}

fn cv_options(common: &ModelArgs, k: usize) -> CvOptions {
    CvOptions {
        k,
        seed: common.seed,
        mode: common.mode,
        pca: common.pca.then(PcaSettings::default),
    }
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.json_line());
            1
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::LengthEval(a) => length_eval(a),
        Command::Optimize(a) => optimize(a),
        Command::Predict(a) => predict(a),
        Command::Serve(a) => serve(a),
    }
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    require_parent(&a.out)?;
    let mut spec = match &a.spec {
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p).map_err(|e| path_error(p, e))?;
            serde_json::from_str::<CohortSpec>(&text)
                .map_err(|e| CliError::new("cohort", "InvalidSpec", format!("{}: {e}", p.display())))?
        }
        None => CohortSpec::registry_like(681, 42),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(n) = a.n {
        spec.n = n;
    }
    let records = synthesize_cohort(&spec)?;
    let mut buf = Vec::new();
    write_cohort(&mut buf, &records)?;
    fs::write(&a.out, &buf).map_err(|e| path_error(&a.out, e))?;

    let spec_json = serde_json::to_string(&spec).expect("spec serializes");
    let provenance = Provenance::new("synth", spec.seed, hash16(spec_json.as_bytes()), false);
    #[derive(Serialize)]
    struct Meta<'a> {
        provenance: Provenance,
        rows: usize,
        sha256_16: String,
        spec: &'a CohortSpec,
    }
    let meta = Meta {
        provenance,
        rows: records.len(),
        sha256_16: hash16(&buf),
        spec: &spec,
    };
    let mut meta_path = a.out.clone().into_os_string();
    meta_path.push(".manifest.json");
    write_json(Some(Path::new(&meta_path)), &meta)
}

fn fit_artifact(common: &ModelArgs) -> Result<ModelArtifact<f64>, CliError> {
    require_file(&common.cohort)?;
    let config = load_config(common.config.as_deref(), common.model, common.seed)?;
    if common.model == ModelKind::LengthGlm && common.mode != SchemaMode::Baseline {
        return Err(CliError::new(
            "learn",
            "InvalidConfig",
            "the length model uses baseline features only",
        ));
    }
    let records = load_cohort(&common.cohort)?;
    let mut schema = derive_schema(&records, common.mode)?;
    if common.pca {
        let m = encode::<f64>(&records, &std::sync::Arc::new(schema.clone()))?;
        let s = PcaSettings::default();
        let report = pca_screen_matrix(&m, s.variance_threshold, s.loading_floor)?;
        if !report.dropped.is_empty() && report.dropped.len() < schema.len() {
            schema = schema.without_columns(&report.dropped);
        }
    }
    let matrix = encode::<f64>(&records, &std::sync::Arc::new(schema))?;
    let mut artifact = fit(&matrix, &config)?;
    if common.no_timing {
        artifact.training_meta.seconds = None;
    }
    Ok(artifact)
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    require_parent(&a.out)?;
    let artifact = fit_artifact(&a.common)?;
    save_model(&artifact, &a.out)?;
    let bytes = fs::read(&a.out).map_err(|e| path_error(&a.out, e))?;
    #[derive(Serialize)]
    struct Meta {
        provenance: Provenance,
        kind: ModelKind,
        schema_fingerprint: String,
        sha256_16: String,
    }
    let mut meta_path = a.out.clone().into_os_string();
    meta_path.push(".manifest.json");
    write_json(
        Some(Path::new(&meta_path)),
        &Meta {
            provenance: Provenance::new("train", a.common.seed, artifact.config_hash.clone(), !a.common.no_timing),
            kind: artifact.kind,
            schema_fingerprint: artifact.schema_fingerprint.clone(),
            sha256_16: hash16(&bytes),
        },
    )
}

fn stamp_svg(svg: String, provenance: &Provenance) -> String {
    match svg.split_once('\n') {
        Some((head, rest)) => format!("{head}\n{}\n{rest}", provenance.svg_comment()),
        None => svg,
    }
}

fn strip_timing(report: &mut CvReport) {
    report.seconds = 0.0;
    for f in &mut report.folds {
        f.seconds = 0.0;
    }
}

fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let common = &a.common;
    require_file(&common.cohort)?;
    if !common.model.is_classifier() {
        return Err(CliError::new(
            "evaluate",
            "InvalidArgument",
            "evaluate needs a classifier; use length-eval for length_glm",
        ));
    }
    let config = load_config(common.config.as_deref(), common.model, common.seed)?;
    let records = load_cohort(&common.cohort)?;
    let options = cv_options(common, a.k);
    let run = cross_validate::<f64>(&records, &config, &options)?;
    let timing = !common.no_timing;
    let provenance = Provenance::new("evaluate", common.seed, config.hash(), timing);
    let token = common.model.token();

    let mut out = Outputs::new(&a.out_dir)?;
    let mut row = Table2Row::from_report(&run.report);
    row.model = token.to_string();
    if !timing {
        row.runtime_seconds = None;
    }
    let mut table = Vec::new();
    write_table2_csv(&[row], &mut table)?;
    out.write("table2.csv", &table)?;

    let mut folds = Vec::new();
    write_folds_csv(&run.report, timing, &mut folds)?;
    out.write("folds.csv", &folds)?;

    let mut confusion = Vec::new();
    write_confusion_csv(&run.report.confusion, &mut confusion)?;
    out.write("confusion.csv", &confusion)?;

    // groups with a single class present have no ROC curve
    let curves: Vec<_> = RocGroup::ALL
        .iter()
        .filter_map(|&g| roc_auc_ovr(&run.labels, &run.probabilities, g).ok())
        .collect();
    let mut auc = Vec::new();
    write_auc_table_csv(&[AucRow::from_curves(token, &curves)], &mut auc)?;
    out.write("auc.csv", &auc)?;
    let svg = roc_svg(&curves, &format!("{} ROC, {}-fold CV", common.model.display_name(), a.k));
    out.write("roc.svg", stamp_svg(svg, &provenance).as_bytes())?;

    #[derive(Serialize)]
    struct Holdout {
        test_rows: usize,
        train_rows: usize,
        accuracy: f64,
    }
    let holdout = match a.holdout {
        Some(n_test) => {
            let h = evaluate_holdout::<f64>(&records, &config, n_test, &options)?;
            let mut buf = Vec::new();
            write_confusion_csv(&h.confusion, &mut buf)?;
            out.write("holdout_confusion.csv", &buf)?;
            Some(Holdout {
                test_rows: h.test_rows.len(),
                train_rows: h.train_rows.len(),
                accuracy: h.accuracy,
            })
        }
        None => None,
    };

    let mut report = run.report.clone();
    if !timing {
        strip_timing(&mut report);
    }
    #[derive(Serialize)]
    struct Report<'a> {
        provenance: &'a Provenance,
        config: &'a ModelConfig,
        cross_validation: &'a CvReport,
        holdout: Option<Holdout>,
    }
    let text = pretty(&Report {
        provenance: &provenance,
        config: &config,
        cross_validation: &report,
        holdout,
    });
    out.write("report.json", text.as_bytes())?;
    out.finish(&provenance)?;
    std::io::stdout().write_all(&table)?;
    Ok(())
}

fn write_agreement_csv(actual: &[f64], predicted: &[f64], report: &AgreementReport) -> Vec<u8> {
    let mut s = String::from("row,actual,predicted,mean,difference\n");
    for (i, ((a, p), pair)) in actual.iter().zip(predicted).zip(&report.pairs).enumerate() {
        s.push_str(&format!("{i},{a:.6},{p:.6},{:.6},{:.6}\n", pair.mean, pair.difference));
    }
    s.into_bytes()
}

fn length_eval(a: LengthEvalArgs) -> Result<(), CliError> {
    require_file(&a.cohort)?;
    let config = load_config(a.config.as_deref(), ModelKind::LengthGlm, a.seed)?;
    let records = load_cohort(&a.cohort)?;
    let (actual, predicted, agreement, design) = match a.test_size {
        Some(n_test) => {
            let run = evaluate_length_holdout::<f64>(&records, &config, n_test, a.seed)?;
            (run.actual, run.predicted, run.agreement, format!("holdout of {n_test} rows"))
        }
        None => {
            let options = CvOptions {
                k: a.k,
                seed: a.seed,
                ..CvOptions::default()
            };
            let run = cross_validate_length::<f64>(&records, &config, &options)?;
            (run.actual, run.predicted, run.agreement, format!("{}-fold CV", a.k))
        }
    };
    let provenance = Provenance::new("length-eval", a.seed, config.hash(), false);
    let mut out = Outputs::new(&a.out_dir)?;
    out.write("agreement.csv", &write_agreement_csv(&actual, &predicted, &agreement))?;
    let summary = format!(
        "n,bias,sd,lower,upper,mae,pearson_r,coverage\n{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6}\n",
        agreement.pairs.len(),
        agreement.bias,
        agreement.sd,
        agreement.lower,
        agreement.upper,
        agreement.mae,
        agreement.pearson_r.map(|r| format!("{r:.6}")).unwrap_or_else(|| "NA".into()),
        agreement.coverage()
    );
    out.write("agreement_summary.csv", summary.as_bytes())?;
    let svg = bland_altman_svg(&agreement, &format!("Treatment length agreement, {design}"));
    out.write("bland_altman.svg", stamp_svg(svg, &provenance).as_bytes())?;
    out.finish(&provenance)?;
    std::io::stdout().write_all(summary.as_bytes())?;
    Ok(())
}

fn load_classifier(path: &Path) -> Result<ModelArtifact<f64>, CliError> {
    require_file(path)?;
    let model: ModelArtifact<f64> = load_model(path)?;
    if !model.kind.is_classifier() {
        return Err(CliError::new(
            "learn",
            "WrongKind",
            format!("{} holds a {} model, expected a classifier", path.display(), model.kind.token()),
        ));
    }
    Ok(model)
}

fn load_length(path: &Path) -> Result<ModelArtifact<f64>, CliError> {
    require_file(path)?;
    let model: ModelArtifact<f64> = load_model(path)?;
    if model.kind != ModelKind::LengthGlm {
        return Err(CliError::new(
            "learn",
            "WrongKind",
            format!("{} holds a {} model, expected length_glm", path.display(), model.kind.token()),
        ));
    }
    Ok(model)
}

fn optimize(a: OptimizeArgs) -> Result<(), CliError> {
    if let Some(out) = &a.out {
        require_parent(out)?;
    }
    let model = load_classifier(&a.model)?;
    let options = OptimizeOptions {
        target: a.target,
        min_probability: a.min_probability,
        points: a.points,
        ..OptimizeOptions::default()
    };
    let result = optimize_profile(&model, &options)?;
    let provenance = Provenance::new("optimize", model.config.seed, model.config_hash.clone(), false);
    write_json(a.out.as_deref(), &service::OptimizeResponse::new(Some(provenance), result))
}

fn predict(a: PredictArgs) -> Result<(), CliError> {
    if let Some(out) = &a.out {
        require_parent(out)?;
    }
    require_file(&a.cohort)?;
    let model = load_classifier(&a.model)?;
    let length = a.length_model.as_deref().map(load_length).transpose()?;
    let patients = load_patients(&a.cohort)?;
    let patient = patients.get(a.row).ok_or_else(|| {
        CliError::new(
            "cohort",
            "InvalidArgument",
            format!("row {} requested but the file has {} rows", a.row, patients.len()),
        )
    })?;
    let response = service::predict_patient(&model, length.as_ref(), patient)?;
    #[derive(Serialize)]
    struct Output {
        provenance: Provenance,
        #[serde(flatten)]
        response: service::PredictResponse,
    }
    let provenance = Provenance::new("predict", model.config.seed, model.config_hash.clone(), false);
    write_json(a.out.as_deref(), &Output { provenance, response })
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let model = load_classifier(&a.model)?;
    let length = a.length_model.as_deref().map(load_length).transpose()?;
    let state = service::AppState::new(model, length)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(service::serve(state, a.bind))?;
    Ok(())
}
