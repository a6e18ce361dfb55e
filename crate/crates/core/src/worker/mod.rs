//! Worker-side computation: the local data cache, budgeted gradient
//! computation, evaluation and prediction.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::RngCore;
use thiserror::Error;

use crate::datastore::{decode_item, DatastoreError, DatumId, ShardItem};
use crate::nn::{argmax, GradientBundle, Network, NnError, Params, ParamSet, Pass, Tensor};
use crate::protocol::Budget;

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DatastoreError),
    #[error("non-finite loss on {id}")]
    NonFiniteLoss { id: DatumId },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CachedItem {
    pub label: String,
    pub input: Tensor<f64>,
}

/// Decoded copies of the worker's allocated data.
#[derive(Clone, Debug, Default)]
pub struct WorkerCache {
    items: BTreeMap<DatumId, CachedItem>,
    allocated: BTreeSet<DatumId>,
    cursor: Option<DatumId>,
}

impl WorkerCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies an allocation update. An id in both lists ends up removed.
    pub fn apply_update(&mut self, add: &[DatumId], remove: &[DatumId]) {
        self.allocated.extend(add.iter().cloned());
        for id in remove {
            self.allocated.remove(id);
            self.items.remove(id);
        }
    }

    pub fn allocated(&self) -> &BTreeSet<DatumId> {
        &self.allocated
    }

    /// Allocated ids not yet cached, ascending.
    pub fn missing(&self) -> Vec<DatumId> {
        self.allocated
            .iter()
            .filter(|id| !self.items.contains_key(*id))
            .cloned()
            .collect()
    }

    /// Stores an item if it is still allocated. Returns whether it was kept.
    pub fn insert(&mut self, id: DatumId, item: CachedItem) -> bool {
        if !self.allocated.contains(&id) {
            return false;
        }
        self.items.insert(id, item);
        true
    }

    /// Decodes and stores the items of a shard fetched from `dataset`.
    /// Items that fail to decode are returned as missing.
    pub fn insert_shard(&mut self, dataset: &str, items: Vec<ShardItem>) -> Vec<DatumId> {
        let mut failed = Vec::new();
        for item in items {
            let id = DatumId::new(dataset, item.id);
            match decode_item(&item.bytes, item.format) {
                Ok(input) => {
                    self.insert(
                        id,
                        CachedItem {
                            label: item.label,
                            input,
                        },
                    );
                }
                Err(e) => {
                    tracing::warn!("{}", e.with_id(id.clone()));
                    failed.push(id);
                }
            }
        }
        failed
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.allocated.len() == self.items.len()
    }

    pub fn get(&self, id: &DatumId) -> Option<&CachedItem> {
        self.items.get(id)
    }

    pub fn items(&self) -> impl Iterator<Item = (&DatumId, &CachedItem)> {
        self.items.iter()
    }
}

/// Ids to visit this round: a step budget takes the first `steps` ids in
/// ascending order; a time budget continues cyclically after the cursor.
fn visit_order(cache: &WorkerCache, budget: Budget) -> Vec<DatumId> {
    match budget {
        Budget::Steps(n) => cache.items.keys().take(n as usize).cloned().collect(),
        Budget::BudgetMs(_) => {
            let (after, before): (Vec<_>, Vec<_>) = match &cache.cursor {
                Some(c) => cache.items.keys().cloned().partition(|id| id > c),
                None => (cache.items.keys().cloned().collect(), Vec::new()),
            };
            after.into_iter().chain(before).collect()
        }
    }
}

/// Computes the gradient sum over cached examples within a budget.
///
/// Time budgets always process at least one example when the cache is not
/// empty and check the clock between examples. Examples whose label is not
/// an output class of `network` are skipped.
pub fn train_budget(
    network: &Network,
    params: &Params<f64>,
    cache: &mut WorkerCache,
    budget: Budget,
    dropout_p: f64,
    rng: &mut dyn RngCore,
) -> Result<GradientBundle<f64>, WorkerError> {
    let started = Instant::now();
    let mut sum = ParamSet::zeros(network.slots());
    let mut scratch = sum.clone();
    let mut count = 0u64;
    let order = visit_order(cache, budget);
    let class_of: BTreeMap<&str, usize> = network
        .labels()
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut last = None;
    for id in order {
        let item = &cache.items[&id];
        let Some(&label) = class_of.get(item.label.as_str()) else {
            continue;
        };
        let pass = Pass::Train {
            dropout_p,
            rng: &mut *rng,
        };
        let (_, fwd) = network.forward(params, &item.input, pass)?;
        let loss = network.backward_into(params, &fwd, label, &mut scratch)?;
        if !loss.is_finite() {
            return Err(WorkerError::NonFiniteLoss { id });
        }
        sum.add_assign(&scratch);
        count += 1;
        last = Some(id);
        if let Budget::BudgetMs(ms) = budget {
            if started.elapsed().as_secs_f64() * 1000.0 >= ms as f64 {
                break;
            }
        }
    }
    if let (Budget::BudgetMs(_), Some(id)) = (budget, last) {
        cache.cursor = Some(id);
    }
    Ok(GradientBundle {
        params_version: params.version,
        grads: sum,
        example_count: count,
        compute_ms: started.elapsed().as_secs_f64() * 1000.0,
    })
}

/// Classification error over a labelled set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub total: u64,
    pub misclassified: u64,
}

impl Evaluation {
    pub fn error_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.misclassified as f64 / self.total as f64
        }
    }
}

/// Counts argmax mistakes. Examples whose label the network cannot output
/// count as mistakes.
pub fn evaluate<'a>(
    network: &Network,
    params: &Params<f64>,
    examples: impl IntoIterator<Item = (&'a str, &'a Tensor<f64>)>,
) -> Result<Evaluation, WorkerError> {
    let mut eval = Evaluation {
        total: 0,
        misclassified: 0,
    };
    for (label, x) in examples {
        let probs = network.predict(params, x)?;
        eval.total += 1;
        if network.labels()[argmax(&probs)] != label {
            eval.misclassified += 1;
        }
    }
    Ok(eval)
}

/// Most probable label and its probability.
pub fn predict(network: &Network, params: &Params<f64>, x: &Tensor<f64>) -> Result<(String, f64), WorkerError> {
    let probs = network.predict(params, x)?;
    let best = argmax(&probs);
    Ok((network.labels()[best].clone(), probs[best]))
}

/// Decodes labelled items into `(label, tensor)` pairs.
pub fn decode_labelled(items: &[ShardItem]) -> Result<Vec<(String, Tensor<f64>)>, WorkerError> {
    items
        .iter()
        .map(|it| Ok((it.label.clone(), decode_item(&it.bytes, it.format)?)))
        .collect()
}
