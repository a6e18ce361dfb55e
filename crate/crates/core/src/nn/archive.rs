//! Self-contained JSON model archive.
//!
//! Top-level keys are exactly `format_version`, `spec`, `params`, `adagrad`,
//! `hyper`, `labels`, `iteration` and `seed`. Floats are written with the
//! shortest decimal that parses back to the same `f64`, so a round trip is
//! bit-exact.

use serde::{Deserialize, Serialize};

use crate::nn::network::Network;
use crate::nn::params::{AdaGradState, Hyperparams, Params};
use crate::nn::spec::NetworkSpec;
use crate::nn::NnError;

pub const FORMAT_VERSION: &str = "gradloom-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArchive {
    pub format_version: String,
    pub spec: NetworkSpec,
    pub params: Params<f64>,
    pub adagrad: AdaGradState<f64>,
    pub hyper: Hyperparams,
    pub labels: Vec<String>,
    pub iteration: u64,
    pub seed: u64,
}

impl ModelArchive {
    pub fn new(
        network: &Network,
        params: Params<f64>,
        adagrad: AdaGradState<f64>,
        hyper: Hyperparams,
        iteration: u64,
        seed: u64,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION.to_string(),
            spec: network.spec().clone(),
            labels: network.labels().to_vec(),
            params,
            adagrad,
            hyper,
            iteration,
            seed,
        }
    }

    /// Checks cross-field consistency and returns the built network.
    pub fn validate(&self) -> Result<Network, NnError> {
        if self.format_version != FORMAT_VERSION {
            return Err(NnError::FormatVersion {
                found: self.format_version.clone(),
                expected: FORMAT_VERSION,
            });
        }
        let network = Network::new(self.spec.clone())?;
        if network.labels() != self.labels.as_slice() {
            return Err(NnError::Schema {
                path: "labels".into(),
                message: "labels differ from the softmax layer's labels".into(),
            });
        }
        network.check_params(&self.params.layers)?;
        network.check_params(&self.adagrad.accumulators)?;
        if !self.params.layers.all_finite() {
            return Err(NnError::Schema {
                path: "params".into(),
                message: "non-finite parameter".into(),
            });
        }
        if self.adagrad.accumulators.iter().any(|v| !(*v >= 0.0)) {
            return Err(NnError::Schema {
                path: "adagrad".into(),
                message: "accumulators must be non-negative".into(),
            });
        }
        self.hyper.validate()?;
        Ok(network)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("archive serialises")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("archive serialises")
    }

    /// Parses and validates an archive document.
    pub fn from_json(text: &str) -> Result<(Self, Network), NnError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| NnError::Schema {
            path: String::new(),
            message: e.to_string(),
        })?;
        if let Some(found) = value.get("format_version").and_then(|v| v.as_str()) {
            if found != FORMAT_VERSION {
                return Err(NnError::FormatVersion {
                    found: found.to_string(),
                    expected: FORMAT_VERSION,
                });
            }
        }
        if let Some(spec) = value.get("spec") {
            NetworkSpec::from_json_value(spec).map_err(|e| match e {
                NnError::Schema { path, message } => NnError::Schema {
                    path: format!("spec.{path}"),
                    message,
                },
                other => other,
            })?;
        }
        let archive: ModelArchive =
            serde_path_to_error::deserialize(&value).map_err(|e| NnError::Schema {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        let network = archive.validate()?;
        Ok((archive, network))
    }
}
