use std::collections::BTreeMap;

use crate::nn::{GradientBundle, Gradients, NnError};
use crate::scalar::Scalar;

/// Example-weighted average of gradient sums.
///
/// Bundles carry gradient sums, so the average is `Σ G / Σ n`. Summation
/// runs in ascending key order, which makes the result independent of
/// arrival order. Returns `None` when no examples were reported.
pub fn reduce<S: Scalar>(
    reports: &BTreeMap<String, GradientBundle<S>>,
) -> Result<Option<(Gradients<S>, u64)>, NnError> {
    let mut total = 0u64;
    let mut sum: Option<Gradients<S>> = None;
    for bundle in reports.values().filter(|b| b.example_count > 0) {
        match sum.as_mut() {
            None => sum = Some(bundle.grads.clone()),
            Some(acc) => {
                if !acc.congruent(&bundle.grads) {
                    return Err(NnError::ParamLayout(
                        "gradient bundles have different layouts".into(),
                    ));
                }
                acc.add_assign(&bundle.grads);
            }
        }
        total += bundle.example_count;
    }
    let Some(mut sum) = sum else {
        return Ok(None);
    };
    let n = S::of(total as f64);
    for v in sum.iter_mut() {
        *v /= n;
    }
    Ok(Some((sum, total)))
}
