use crate::nn::network::Network;
use crate::nn::params::{AdaGradState, Params};
use crate::nn::NnError;
use crate::scalar::Scalar;

/// Appends an output class with a zero weight row and zero bias.
///
/// Returns `Ok(false)` without touching anything when `label` already exists.
/// Existing logits are unchanged bit for bit since the new row is appended
/// after all existing rows.
pub fn add_output_class<S: Scalar>(
    network: &mut Network,
    params: &mut Params<S>,
    state: &mut AdaGradState<S>,
    label: &str,
) -> Result<bool, NnError> {
    if network.labels().iter().any(|l| l == label) {
        return Ok(false);
    }
    network.check_params(&params.layers)?;
    network.check_params(&state.accumulators)?;

    let mut spec = network.spec().clone();
    spec.labels_mut()
        .expect("validated network ends in softmax")
        .push(label.to_string());
    let fan_in = network.slots().last().expect("softmax slot").fan_in;
    network.replace_spec(spec)?;

    for set in [&mut params.layers, &mut state.accumulators] {
        let out = set.layers.last_mut().expect("softmax slot");
        out.weights.extend(std::iter::repeat_n(S::zero(), fan_in));
        out.biases.push(S::zero());
    }
    Ok(true)
}
