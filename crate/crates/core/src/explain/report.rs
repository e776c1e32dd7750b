use serde::{Deserialize, Serialize};

use super::groups::{Group, GROUP_NAMES};
use super::shapley::Attribution;
use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::scalar::Scalar;

/// Mean |phi| per group, largest first; ties keep first-seen group order.
pub fn global_importance(attrs: &[Attribution]) -> Result<Vec<(String, f64)>> {
    let first = attrs.first().ok_or_else(|| Error::InvalidInput("no attributions".into()))?;
    let names: Vec<&str> = first.groups.iter().map(|g| g.name.as_str()).collect();
    let mut totals = vec![0.0; names.len()];
    for a in attrs {
        if a.groups.len() != names.len() || a.groups.iter().zip(&names).any(|(g, n)| g.name != *n) {
            return Err(Error::InvalidInput("attributions cover different groups".into()));
        }
        for (t, g) in totals.iter_mut().zip(&a.groups) {
            *t += g.phi.abs();
        }
    }
    let n = attrs.len() as f64;
    let mut out: Vec<(String, f64)> = names.iter().zip(totals).map(|(s, t)| (s.to_string(), t / n)).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterfallRow {
    pub group: String,
    pub phi: f64,
    pub running_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waterfall {
    pub base_value: f64,
    pub fx: f64,
    pub rows: Vec<WaterfallRow>,
}

/// Steps from the base value to `fx`, largest |phi| first. Zero
/// contributions are left out.
pub fn waterfall_export(attr: &Attribution) -> Waterfall {
    let mut groups: Vec<_> = attr.groups.iter().filter(|g| g.phi != 0.0).collect();
    groups.sort_by(|a, b| b.phi.abs().total_cmp(&a.phi.abs()));
    let mut total = attr.base_value;
    let rows = groups
        .into_iter()
        .map(|g| {
            total += g.phi;
            WaterfallRow { group: g.name.clone(), phi: g.phi, running_total: total }
        })
        .collect();
    Waterfall { base_value: attr.base_value, fx: attr.fx, rows }
}

/// Model-space value of a group: the standardized scalar, the soil token,
/// or the spectrum's L2 norm for EQ.
pub fn group_value<T: Scalar>(x: &ModelInput<T>, group: usize) -> Option<f64> {
    Some(match Group::from_index(group)? {
        Group::Eq => x.spectrum.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt(),
        Group::Spt(j) => x.spt[j].as_f64(),
        Group::Soil(j) => x.soil[j].as_f64(),
        Group::Site(j) => x.site[j].as_f64(),
    })
}

/// One row per (instance, group): `instance_id,group,feature_value,phi`.
pub fn beeswarm_csv<T: Scalar>(rows: &[(String, ModelInput<T>, Attribution)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["instance_id", "group", "feature_value", "phi"])?;
    for (id, x, attr) in rows {
        for g in &attr.groups {
            let idx = GROUP_NAMES
                .iter()
                .position(|n| *n == g.name)
                .ok_or_else(|| Error::InvalidInput(format!("unknown group `{}`", g.name)))?;
            let value = group_value(x, idx).expect("index from the group list");
            w.write_record([id.clone(), g.name.clone(), value.to_string(), g.phi.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(e.to_string()))
}
