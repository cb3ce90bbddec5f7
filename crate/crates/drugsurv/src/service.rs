//! HTTP/JSON backend for the risk simulator.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use drugsurv_core::cohort::{Feature, FeatureKind, FeatureValue, OutcomeLabel, Patient};
use drugsurv_core::learn::{ModelArtifact, ModelKind, TrainingMeta};
use drugsurv_core::prescribe::{
    optimize_profile, reference_patient, sweep_feature, ClassProbabilities, Grid, JsonValue, OptimizeOptions,
    OptimizeResult, PrescribeError,
};
use drugsurv_core::scalar::argmax;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::error::Category;

use crate::cli::{Provenance, FORMAT_VERSION};
use crate::error::CliError;

/// Rounds to 12 significant digits, the precision of every probability
/// the service emits.
pub fn sig12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().expect("formatted float parses")
}

fn rounded(p: [f64; 6]) -> ClassProbabilities {
    ClassProbabilities(p.map(sig12))
}

/// Immutable model snapshot shared by all handlers.
#[derive(Debug)]
pub struct AppState {
    pub classifier: ModelArtifact<f64>,
    pub length: Option<ModelArtifact<f64>>,
    /// Profile that sweeps vary one feature of.
    pub base: Patient,
}

impl AppState {
    pub fn new(classifier: ModelArtifact<f64>, length: Option<ModelArtifact<f64>>) -> Result<Self, CliError> {
        if !classifier.kind.is_classifier() {
            return Err(CliError::new("learn", "WrongKind", "the first model must be a classifier"));
        }
        if let Some(l) = &length {
            if l.kind != ModelKind::LengthGlm {
                return Err(CliError::new("learn", "WrongKind", "the length model must be length_glm"));
            }
        }
        let base = reference_patient(&classifier);
        Ok(Self {
            classifier,
            length,
            base,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictResponse {
    pub probabilities: ClassProbabilities,
    pub predicted_class: OutcomeLabel,
    pub predicted_length_months: Option<f64>,
}

/// Library prediction for one patient, rounded for transport.
pub fn predict_patient(
    classifier: &ModelArtifact<f64>,
    length: Option<&ModelArtifact<f64>>,
    patient: &Patient,
) -> Result<PredictResponse, CliError> {
    let row = classifier.schema.encode_patient::<f64>(patient, None)?;
    let p = classifier.probabilities(row.values.view())?;
    let months = match length {
        Some(l) => {
            let row = l.schema.encode_patient::<f64>(patient, None)?;
            Some(sig12(l.months(row.values.view())?))
        }
        None => None,
    };
    Ok(PredictResponse {
        probabilities: rounded(p),
        predicted_class: OutcomeLabel::ALL[argmax(&p)],
        predicted_length_months: months,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizeResponse {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(flatten)]
    pub result: OptimizeResult,
    /// Constraints rendered as `feature relation boundary`.
    pub criteria: Vec<String>,
}

impl OptimizeResponse {
    pub fn new(provenance: Option<Provenance>, result: OptimizeResult) -> Self {
        let criteria = result.constraints.iter().map(|c| c.to_string()).collect();
        Self {
            provenance,
            result,
            criteria,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResponse {
    pub feature: Feature,
    pub values: Vec<JsonValue>,
    pub probabilities: Vec<[f64; 6]>,
}

/// Error body: `{error, field, message}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}

impl ApiError {
    fn bad_request(field: Option<String>, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            error: "MalformedBody",
            field,
            message: message.into(),
        }
    }

    fn unprocessable(error: &'static str, field: Option<String>, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            error,
            field,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        Self::unprocessable(e.error, None, e.message)
    }
}

impl From<PrescribeError> for ApiError {
    fn from(e: PrescribeError) -> Self {
        let field = match &e {
            PrescribeError::UnknownFeature(f) => Some(f.clone()),
            _ => None,
        };
        Self::unprocessable(e.name(), field, e.to_string())
    }
}

fn backticked(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

/// Syntax and type errors are 400; missing fields and unknown levels are
/// schema violations (422). Both name the offending field.
fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.to_string();
        let at = (path != ".").then_some(path);
        match inner.classify() {
            Category::Data if message.starts_with("missing field") => {
                let field = backticked(&message).or(at);
                ApiError::unprocessable("MissingField", field, message)
            }
            Category::Data if message.starts_with("unknown variant") => {
                ApiError::unprocessable("UnknownLevel", at, message)
            }
            _ => ApiError::bad_request(at, message),
        }
    })?;
    de.end().map_err(|e| ApiError::bad_request(None, e.to_string()))?;
    Ok(value)
}

fn parse_patient(bytes: &[u8]) -> Result<Patient, ApiError> {
    let patient: Patient = parse_body(bytes)?;
    patient
        .validate()
        .map_err(|v| ApiError::unprocessable("RangeViolation", Some(v.column.to_string()), v.reason))?;
    Ok(patient)
}

async fn predict_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<PredictResponse>, ApiError> {
    let patient = parse_patient(&body)?;
    Ok(Json(predict_patient(&state.classifier, state.length.as_ref(), &patient)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizeRequest {
    #[serde(default = "default_min_probability")]
    min_probability: f64,
    #[serde(default)]
    target: Option<OutcomeLabel>,
    #[serde(default)]
    points: Option<usize>,
}

fn default_min_probability() -> f64 {
    0.9
}

async fn optimize_handler(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<OptimizeResponse>, ApiError> {
    let req: OptimizeRequest = if body.iter().all(u8::is_ascii_whitespace) {
        parse_body(b"{}")?
    } else {
        parse_body(&body)?
    };
    if !(0.0..=1.0).contains(&req.min_probability) {
        return Err(ApiError::unprocessable(
            "InvalidArgument",
            Some("min_probability".into()),
            "min_probability must lie in [0, 1]",
        ));
    }
    let points = req.points.unwrap_or(50);
    if !(2..=1000).contains(&points) {
        return Err(ApiError::unprocessable("InvalidArgument", Some("points".into()), "points must lie in 2..=1000"));
    }
    let options = OptimizeOptions {
        target: req.target.unwrap_or(OutcomeLabel::Continue),
        min_probability: req.min_probability,
        points,
        ..OptimizeOptions::default()
    };
    let result = tokio::task::spawn_blocking(move || optimize_profile(&state.classifier, &options))
        .await
        .expect("optimizer task does not panic")?;
    Ok(Json(OptimizeResponse::new(None, result)))
}

fn parse_override(feature: Feature, raw: &str) -> Result<FeatureValue, ApiError> {
    let bad = || ApiError::bad_request(Some(feature.name().to_string()), format!("cannot parse {raw:?}"));
    match feature.kind() {
        FeatureKind::Numeric => raw.parse::<f64>().map(FeatureValue::Number).map_err(|_| bad()),
        FeatureKind::Boolean => match raw {
            "true" | "1" => Ok(FeatureValue::Flag(true)),
            "false" | "0" => Ok(FeatureValue::Flag(false)),
            _ => Err(bad()),
        },
        FeatureKind::Categorical => feature
            .levels()
            .iter()
            .position(|l| *l == raw)
            .map(FeatureValue::Level)
            .ok_or_else(|| {
                ApiError::unprocessable(
                    "UnknownLevel",
                    Some(feature.name().to_string()),
                    format!("{raw:?} is not one of {:?}", feature.levels()),
                )
            }),
    }
}

/// `GET /sweep?feature=<name>&points=<k>`; any other parameter named
/// after a feature overrides that feature of the stored base profile.
async fn sweep_handler(
    State(state): State<Arc<AppState>>,
    Query(query): Query<HashMap<String, String>>,
) -> Result<Json<SweepResponse>, ApiError> {
    let name = query
        .get("feature")
        .ok_or_else(|| ApiError::bad_request(Some("feature".into()), "missing query parameter `feature`"))?;
    let feature = Feature::from_name(name)
        .ok_or_else(|| ApiError::from(PrescribeError::UnknownFeature(name.clone())))?;
    let points = match query.get("points") {
        Some(p) => p
            .parse::<usize>()
            .map_err(|_| ApiError::bad_request(Some("points".into()), format!("cannot parse {p:?}")))?,
        None => 50,
    };
    if !(2..=1000).contains(&points) {
        return Err(ApiError::bad_request(Some("points".into()), "points must lie in 2..=1000"));
    }
    let mut base = state.base.clone();
    let mut keys: Vec<&String> = query.keys().filter(|k| *k != "feature" && *k != "points").collect();
    keys.sort();
    for key in keys {
        let f = Feature::from_name(key)
            .ok_or_else(|| ApiError::bad_request(Some(key.clone()), format!("unknown query parameter `{key}`")))?;
        base.set(f, parse_override(f, &query[key])?);
    }
    base.validate()
        .map_err(|v| ApiError::unprocessable("RangeViolation", Some(v.column.to_string()), v.reason))?;
    let grid = Grid::default_for(feature, points);
    let curve = sweep_feature(&state.classifier, &base, feature, &grid.values)?;
    Ok(Json(SweepResponse {
        feature,
        values: curve.points.iter().map(|p| p.value.clone()).collect(),
        probabilities: curve.points.iter().map(|p| p.probabilities.0.map(sig12)).collect(),
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub kind: ModelKind,
    pub schema_fingerprint: String,
    pub config_hash: String,
    pub features: Vec<Feature>,
    pub training_meta: TrainingMeta,
}

impl ModelSummary {
    fn of(m: &ModelArtifact<f64>) -> Self {
        Self {
            kind: m.kind,
            schema_fingerprint: m.schema_fingerprint.clone(),
            config_hash: m.config_hash.clone(),
            features: m.schema.features(),
            training_meta: m.training_meta.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetaResponse {
    pub format_version: u32,
    pub classes: Vec<OutcomeLabel>,
    pub classifier: ModelSummary,
    pub length: Option<ModelSummary>,
    /// Training MAE of the length model in months, for uncertainty bands.
    pub length_mae_months: Option<f64>,
    pub base_profile: Patient,
}

async fn meta_handler(State(state): State<Arc<AppState>>) -> Json<MetaResponse> {
    Json(MetaResponse {
        format_version: FORMAT_VERSION,
        classes: state.classifier.classes.clone(),
        classifier: ModelSummary::of(&state.classifier),
        length: state.length.as_ref().map(ModelSummary::of),
        length_mae_months: state.length.as_ref().and_then(|l| l.training_meta.training_mae),
        base_profile: state.base.clone(),
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/predict", post(predict_handler))
        .route("/optimize", post(optimize_handler))
        .route("/sweep", get(sweep_handler))
        .route("/model/meta", get(meta_handler))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
