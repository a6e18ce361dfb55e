//! Compact float-array encodings used inside messages.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::nn::{GradientBundle, LayerParams, ParamSet, Params};

/// An `f64` array carried as base64 of its little-endian bytes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct F64Blob(pub Vec<f64>);

impl Serialize for F64Blob {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut bytes = Vec::with_capacity(self.0.len() * 8);
        for v in &self.0 {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        serializer.serialize_str(&STANDARD.encode(bytes))
    }
}

impl<'de> Deserialize<'de> for F64Blob {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        let bytes = STANDARD
            .decode(text.as_bytes())
            .map_err(serde::de::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(serde::de::Error::custom(format!(
                "float blob length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        Ok(F64Blob(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireLayer {
    pub weights: F64Blob,
    pub biases: F64Blob,
}

/// A [`ParamSet`] in blob form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WireSet(pub Vec<WireLayer>);

impl From<&ParamSet<f64>> for WireSet {
    fn from(set: &ParamSet<f64>) -> Self {
        WireSet(
            set.layers
                .iter()
                .map(|l| WireLayer {
                    weights: F64Blob(l.weights.clone()),
                    biases: F64Blob(l.biases.clone()),
                })
                .collect(),
        )
    }
}

impl From<WireSet> for ParamSet<f64> {
    fn from(set: WireSet) -> Self {
        ParamSet {
            layers: set
                .0
                .into_iter()
                .map(|l| LayerParams {
                    weights: l.weights.0,
                    biases: l.biases.0,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireParams {
    pub version: u64,
    pub layers: WireSet,
}

impl From<&Params<f64>> for WireParams {
    fn from(p: &Params<f64>) -> Self {
        Self {
            version: p.version,
            layers: WireSet::from(&p.layers),
        }
    }
}

impl From<WireParams> for Params<f64> {
    fn from(p: WireParams) -> Self {
        Params {
            version: p.version,
            layers: p.layers.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireBundle {
    pub params_version: u64,
    pub grads: WireSet,
    pub example_count: u64,
    pub compute_ms: f64,
}

impl From<&GradientBundle<f64>> for WireBundle {
    fn from(b: &GradientBundle<f64>) -> Self {
        Self {
            params_version: b.params_version,
            grads: WireSet::from(&b.grads),
            example_count: b.example_count,
            compute_ms: b.compute_ms,
        }
    }
}

impl From<WireBundle> for GradientBundle<f64> {
    fn from(b: WireBundle) -> Self {
        GradientBundle {
            params_version: b.params_version,
            grads: b.grads.into(),
            example_count: b.example_count,
            compute_ms: b.compute_ms,
        }
    }
}
