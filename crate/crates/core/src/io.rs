//! JSON model documents.
//!
//! A general model is `{"M", "sigma_x", "c"}` with `sigma_x` row-major
//! (flat `M·M` array or an array of rows) and an optional `"budget"`.
//! A symmetric model is `{"rho", "sigma2", "groups": [{"size", "rate"}]}`
//! with an optional `"lambda"` (default `1/M`).

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{DeviceGroup, GaussianSourceModel, RateBudget, SymmetricSourceModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Matrix {
    Flat(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralDocument {
    #[serde(rename = "M")]
    pub m: usize,
    sigma_x: Matrix,
    pub c: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<Vec<f64>>,
}

impl GeneralDocument {
    pub fn from_model(model: &GaussianSourceModel, budget: Option<&RateBudget>) -> Self {
        let m = model.devices();
        let s = model.sigma_x();
        Self {
            m,
            sigma_x: Matrix::Flat((0..m).flat_map(|i| (0..m).map(move |j| s[(i, j)])).collect()),
            c: model.c().iter().copied().collect(),
            budget: budget.map(|b| b.rates().to_vec()),
        }
    }

    pub fn model(&self) -> Result<GaussianSourceModel> {
        let m = self.m;
        let rows: Vec<Vec<f64>> = match &self.sigma_x {
            Matrix::Flat(v) => {
                if v.len() != m * m {
                    return Err(Error::Shape(format!("sigma_x has {} entries, expected {}", v.len(), m * m)));
                }
                v.chunks(m.max(1)).map(<[f64]>::to_vec).collect()
            }
            Matrix::Rows(r) => r.clone(),
        };
        if rows.len() != m || self.c.len() != m {
            return Err(Error::Shape(format!("M = {m} but sigma_x has {} rows and c has {} entries", rows.len(), self.c.len())));
        }
        GaussianSourceModel::from_rows(&rows, &self.c)
    }

    pub fn budget(&self) -> Option<Result<RateBudget>> {
        self.budget.clone().map(RateBudget::new)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymmetricDocument {
    pub rho: f64,
    pub sigma2: f64,
    pub groups: Vec<DeviceGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl SymmetricDocument {
    pub fn model(&self) -> Result<SymmetricSourceModel> {
        SymmetricSourceModel::new(self.rho, self.sigma2, self.groups.clone())
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
            .unwrap_or_else(|| 1.0 / self.groups.iter().map(|g| g.size).sum::<usize>().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelDocument {
    General(GeneralDocument),
    Symmetric(SymmetricDocument),
}

fn located(e: serde_json::Error) -> Error {
    if e.line() > 0 {
        Error::Format(format!("line {} column {}: {e}", e.line(), e.column()))
    } else {
        Error::Format(e.to_string())
    }
}

/// Parses either document kind; the presence of `"rho"` selects the symmetric form.
pub fn parse_model(text: &str) -> Result<ModelDocument> {
    let value: Value = serde_json::from_str(text).map_err(located)?;
    let Value::Object(map) = &value else {
        return Err(Error::Format("model document must be a JSON object".into()));
    };
    if map.contains_key("rho") {
        serde_json::from_value(value).map(ModelDocument::Symmetric).map_err(located)
    } else {
        serde_json::from_value(value).map(ModelDocument::General).map_err(located)
    }
}

pub fn to_json(doc: &ModelDocument) -> String {
    match doc {
        ModelDocument::General(g) => serde_json::to_string_pretty(g),
        ModelDocument::Symmetric(s) => serde_json::to_string_pretty(s),
    }
    .expect("documents serialize")
}
