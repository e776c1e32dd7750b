//! Request and response bodies of the service, and the shared request
//! evaluation used by both the service and the CLI.

use lqtf::data::{SiteRecord, SiteRow, SITE_COLUMNS};
use lqtf::explain::{Attribution, SensitivityGrid, DEFAULT_N_PERMS};
use lqtf::signal::{MotionInput, MotionRecord};
use lqtf::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bundle::{ModelBundle, MotionLibrary, PredictResponse};

/// Largest accepted `/batch` request.
pub const MAX_BATCH: usize = 1000;
/// Largest accepted permutation count for one explanation.
pub const MAX_N_PERMS: usize = 100_000;
/// Largest accepted sensitivity grid.
pub const MAX_GRID: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub field: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApiError {
    pub status: u16,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn bad_request(field: Option<String>, error: impl Into<String>) -> Self {
        Self { status: 400, body: ErrorBody { error: error.into(), field } }
    }

    pub fn unavailable() -> Self {
        Self { status: 503, body: ErrorBody { error: "model is not loaded".into(), field: None } }
    }

    pub fn too_large(n: usize) -> Self {
        Self {
            status: 413,
            body: ErrorBody { error: format!("batch of {n} requests exceeds the limit of {MAX_BATCH}"), field: None },
        }
    }

    pub fn internal(error: impl Into<String>) -> Self {
        Self { status: 500, body: ErrorBody { error: error.into(), field: None } }
    }

    /// Maps a core error raised while handling `context`. Input errors
    /// become 400 and name the site column they mention, if any.
    pub fn from_core(e: Error, context: &str) -> Self {
        match e {
            Error::Shape(_) | Error::State(_) | Error::Io(_) | Error::Checkpoint(_) => Self::internal(e.to_string()),
            _ => {
                let msg = e.to_string();
                let field = column_in(&msg).map(|c| format!("site.{c}")).unwrap_or_else(|| context.to_string());
                Self::bad_request(Some(field), msg)
            }
        }
    }
}

fn column_in(msg: &str) -> Option<&'static str> {
    msg.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .find_map(|tok| SITE_COLUMNS.iter().find(|c| **c == tok && **c != "label").copied())
}

/// Deserializes `bytes`, reporting the path of the offending field.
pub fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.into_inner().to_string();
        ApiError::bad_request(field_path(&path, &msg), msg)
    })
}

/// Joins a deserializer path with the key named in a missing- or
/// unknown-field message.
pub(crate) fn field_path(path: &str, msg: &str) -> Option<String> {
    let path = if path == "." { "" } else { path };
    let key = (msg.starts_with("missing field") || msg.starts_with("unknown field")).then(|| quoted(msg)).flatten();
    match (path, key) {
        ("", None) => None,
        ("", Some(k)) => Some(k.to_string()),
        (p, None) => Some(p.to_string()),
        (p, Some(k)) if p.ends_with(k) => Some(p.to_string()),
        (p, Some(k)) => Some(format!("{p}.{k}")),
    }
}

fn quoted(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MotionSpec {
    Inline { samples: Vec<f64>, dt: f64 },
    Stored { motion_id: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainOptions {
    pub n_perms: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Factors {
    pub pga: Vec<f64>,
    pub spt: Vec<f64>,
}

/// One site with its motion. Without `motion` the site's own `motion_id`
/// is looked up in the service's motion library.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteRequest {
    pub site: SiteRow,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<MotionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<ExplainOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<Factors>,
}

pub enum Motion<'a> {
    Input(MotionInput<'a>),
    Owned(MotionRecord),
}

impl Motion<'_> {
    pub fn as_input(&self) -> MotionInput<'_> {
        match self {
            Self::Input(m) => *m,
            Self::Owned(r) => MotionInput::Record(r),
        }
    }

    pub fn record(&self) -> Option<&MotionRecord> {
        match self.as_input() {
            MotionInput::Record(r) => Some(r),
            MotionInput::Null => None,
        }
    }
}

pub fn resolve<'a>(req: &SiteRequest, lib: &'a MotionLibrary) -> Result<(SiteRecord, Motion<'a>), ApiError> {
    let site = req.site.to_record().map_err(|e| ApiError::from_core(e, "site"))?;
    let motion = match &req.motion {
        Some(MotionSpec::Inline { samples, dt }) => {
            let id = if site.motion_id.is_empty() { "inline".to_string() } else { site.motion_id.clone() };
            Motion::Owned(MotionRecord::new(id, samples.clone(), *dt).map_err(|e| ApiError::from_core(e, "motion"))?)
        }
        Some(MotionSpec::Stored { motion_id }) => {
            Motion::Input(lib.resolve(motion_id).map_err(|e| ApiError::from_core(e, "motion.motion_id"))?)
        }
        None if site.motion_id.is_empty() => {
            return Err(ApiError::bad_request(Some("motion".into()), "no motion given and site.motion_id is empty"))
        }
        None => Motion::Input(lib.resolve(&site.motion_id).map_err(|e| ApiError::from_core(e, "site.motion_id"))?),
    };
    Ok((site, motion))
}

/// Probabilities for every request, in order, from one batched forward pass.
pub fn predict_many(bundle: &ModelBundle, lib: &MotionLibrary, reqs: &[SiteRequest]) -> Result<Vec<PredictResponse>, ApiError> {
    let mut inputs = Vec::with_capacity(reqs.len());
    for (i, r) in reqs.iter().enumerate() {
        let prefix = |e: ApiError| {
            if reqs.len() == 1 {
                return e;
            }
            let field = e.body.field.map(|f| format!("[{i}].{f}"));
            ApiError { body: ErrorBody { field, ..e.body }, ..e }
        };
        let (site, motion) = resolve(r, lib).map_err(prefix)?;
        inputs.push(bundle.input(&site, motion.as_input()).map_err(|e| prefix(ApiError::from_core(e, "motion")))?);
    }
    bundle.predict(&inputs).map_err(|e| ApiError::from_core(e, "site"))
}

pub fn explain_one(bundle: &ModelBundle, lib: &MotionLibrary, req: &SiteRequest) -> Result<Attribution, ApiError> {
    let opts = req.options.clone().unwrap_or_default();
    let n_perms = opts.n_perms.unwrap_or(DEFAULT_N_PERMS);
    if !(2..=MAX_N_PERMS).contains(&n_perms) {
        return Err(ApiError::bad_request(Some("options.n_perms".into()), format!("n_perms must lie in 2..={MAX_N_PERMS}")));
    }
    let (site, motion) = resolve(req, lib)?;
    let x = bundle.input(&site, motion.as_input()).map_err(|e| ApiError::from_core(e, "motion"))?;
    bundle.explain(&x, n_perms, opts.seed.unwrap_or(0)).map_err(|e| ApiError::from_core(e, "options"))
}

/// Eleven PGA factors from 0 to 1.
pub fn default_pga_factors() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

pub fn sensitivity_one(bundle: &ModelBundle, lib: &MotionLibrary, req: &SiteRequest) -> Result<SensitivityGrid, ApiError> {
    let factors = req.factors.clone().unwrap_or(Factors { pga: default_pga_factors(), spt: vec![1.0] });
    if factors.pga.is_empty() || factors.spt.is_empty() || factors.pga.len() * factors.spt.len() > MAX_GRID {
        return Err(ApiError::bad_request(
            Some("factors".into()),
            format!("factor lists must be non-empty with at most {MAX_GRID} grid points"),
        ));
    }
    let (site, motion) = resolve(req, lib)?;
    let record = motion
        .record()
        .ok_or_else(|| ApiError::bad_request(Some("motion".into()), "sensitivity needs a recorded motion, not the null motion"))?;
    bundle.sensitivity(&site, record, &factors.pga, &factors.spt).map_err(|e| ApiError::from_core(e, "factors"))
}
