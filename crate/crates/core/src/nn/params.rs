use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::spec::SlotShape;
use crate::nn::NnError;
use crate::scalar::Scalar;

/// Weights (`rows × fan_in`, row-major) and biases of one trainable layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct LayerParams<S> {
    pub weights: Vec<S>,
    pub biases: Vec<S>,
}

/// One array pair per trainable layer, in layer order.
///
/// Parameters, gradients and AdaGrad accumulators all share this layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", transparent)]
pub struct ParamSet<S> {
    pub layers: Vec<LayerParams<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn zeros(slots: &[SlotShape]) -> Self {
        Self {
            layers: slots
                .iter()
                .map(|s| LayerParams {
                    weights: vec![S::zero(); s.weights()],
                    biases: vec![S::zero(); s.rows],
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: vec![S::zero(); l.weights.len()],
                    biases: vec![S::zero(); l.biases.len()],
                })
                .collect(),
        }
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same number of layers and same array lengths.
    pub fn congruent(&self, other: &ParamSet<S>) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.len() == b.weights.len() && a.biases.len() == b.biases.len()
            })
    }

    /// Checks the array lengths against the slot shapes of a network.
    pub fn check_slots(&self, slots: &[SlotShape]) -> Result<(), NnError> {
        if self.layers.len() != slots.len() {
            return Err(NnError::ParamLayout(format!(
                "expected {} trainable layers, found {}",
                slots.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, slot)) in self.layers.iter().zip(slots).enumerate() {
            if layer.weights.len() != slot.weights() || layer.biases.len() != slot.rows {
                return Err(NnError::ParamLayout(format!(
                    "trainable layer {i}: expected {} weights and {} biases, found {} and {}",
                    slot.weights(),
                    slot.rows,
                    layer.weights.len(),
                    layer.biases.len()
                )));
            }
        }
        Ok(())
    }

    /// Visits every scalar in canonical order: layer by layer, weights then biases.
    pub fn iter(&self) -> impl Iterator<Item = &S> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut S> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// Element-wise `self += other`. Panics if the sets are not congruent.
    pub fn add_assign(&mut self, other: &ParamSet<S>) {
        assert!(self.congruent(other), "incongruent parameter sets");
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, factor: S) {
        for v in self.iter_mut() {
            *v *= factor;
        }
    }

    /// Returns the scalar at a canonical flat index.
    pub fn get_flat(&self, mut index: usize) -> Option<S> {
        for l in &self.layers {
            if index < l.weights.len() {
                return Some(l.weights[index]);
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return Some(l.biases[index]);
            }
            index -= l.biases.len();
        }
        None
    }

    pub fn get_flat_mut(&mut self, mut index: usize) -> Option<&mut S> {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return Some(&mut l.weights[index]);
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return Some(&mut l.biases[index]);
            }
            index -= l.biases.len();
        }
        None
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.iter().copied().collect()
    }
}

/// Versioned model parameters. The version advances by one per reduce step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct Params<S> {
    pub version: u64,
    pub layers: ParamSet<S>,
}

impl<S: Scalar> Params<S> {
    /// Gaussian initialisation with standard deviation `1/sqrt(fan_in)`,
    /// zero biases.
    ///
    /// The stream is ChaCha8 (`rand_chacha`) seeded with `seed_from_u64(seed)`;
    /// weights are drawn layer by layer in storage order from `rand_distr::Normal`
    /// in `f64` and then converted to `S`.
    pub fn init(slots: &[SlotShape], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = ParamSet::zeros(slots);
        for (layer, slot) in layers.layers.iter_mut().zip(slots) {
            let std = 1.0 / (slot.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive standard deviation");
            for w in layer.weights.iter_mut() {
                *w = S::of(normal.sample(&mut rng));
            }
        }
        Self { version: 0, layers }
    }
}

/// Per-example or summed gradients, congruent to [`Params`].
pub type Gradients<S> = ParamSet<S>;

/// A worker's contribution to one reduce step: the gradient *sum* over
/// `example_count` examples computed against `params_version`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct GradientBundle<S> {
    pub params_version: u64,
    pub grads: Gradients<S>,
    pub example_count: u64,
    pub compute_ms: f64,
}

impl<S: Scalar> GradientBundle<S> {
    pub fn empty(params_version: u64, like: &ParamSet<S>) -> Self {
        Self {
            params_version,
            grads: like.zeros_like(),
            example_count: 0,
            compute_ms: 0.0,
        }
    }
}

/// Running sums of squared gradients, one per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct AdaGradState<S> {
    pub accumulators: ParamSet<S>,
}

impl<S: Scalar> AdaGradState<S> {
    pub fn zeros(slots: &[SlotShape]) -> Self {
        Self {
            accumulators: ParamSet::zeros(slots),
        }
    }
}

/// Optimiser and regularisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    #[serde(default)]
    pub l1_decay: f64,
    #[serde(default)]
    pub l2_decay: f64,
    #[serde(default = "default_eps")]
    pub adagrad_eps: f64,
    #[serde(default)]
    pub dropout_p: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            l1_decay: 0.0,
            l2_decay: 0.0,
            adagrad_eps: 1e-8,
            dropout_p: 0.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |field: &'static str, value: f64| NnError::InvalidHyperparam { field, value };
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(bad("learning_rate", self.learning_rate));
        }
        if !(self.l1_decay.is_finite() && self.l1_decay >= 0.0) {
            return Err(bad("l1_decay", self.l1_decay));
        }
        if !(self.l2_decay.is_finite() && self.l2_decay >= 0.0) {
            return Err(bad("l2_decay", self.l2_decay));
        }
        if !(self.adagrad_eps.is_finite() && self.adagrad_eps > 0.0) {
            return Err(bad("adagrad_eps", self.adagrad_eps));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(bad("dropout_p", self.dropout_p));
        }
        Ok(())
    }
}
