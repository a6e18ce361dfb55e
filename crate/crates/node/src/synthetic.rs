//! Small generated datasets for smoke runs, benchmarks and tests.

use gradloom_core::datastore::{encode_mlb1, pack_zip, DatastoreError};
use gradloom_core::nn::{LayerSpec, NetworkSpec, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cluster data: each class has a centre in `[0.2, 0.8]^dims`
/// and items are the centre plus uniform noise of half-width `spread`,
/// clamped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Clusters {
    pub classes: usize,
    pub dims: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Clusters {
    pub fn new(classes: usize, dims: usize, seed: u64) -> Self {
        Self {
            classes,
            dims,
            spread: 0.15,
            seed,
        }
    }

    pub fn label(class: usize) -> String {
        format!("c{class}")
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.classes).map(Self::label).collect()
    }

    fn centres(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.classes)
            .map(|_| (0..self.dims).map(|_| rng.random_range(0.2..0.8)).collect())
            .collect()
    }

    /// `n` labelled items with classes assigned round-robin; `stream`
    /// selects an independent noise sequence (e.g. train vs test).
    pub fn items(&self, n: usize, stream: u64) -> Vec<(String, Tensor<f64>)> {
        let centres = self.centres();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
        let shape = Shape::new(self.dims, 1, 1);
        (0..n)
            .map(|i| {
                let class = i % self.classes;
                let data = centres[class]
                    .iter()
                    .map(|c| {
                        let v = c + rng.random_range(-self.spread..=self.spread);
                        v.clamp(0.0, 1.0) as f32 as f64
                    })
                    .collect();
                (Self::label(class), Tensor::from_vec(shape, data).expect("length matches shape"))
            })
            .collect()
    }

    /// Zip of `{label}/{index}.mlb1` entries, ready for ingestion.
    pub fn zip(&self, n: usize, stream: u64) -> Result<Vec<u8>, DatastoreError> {
        let encoded: Vec<(String, Vec<u8>)> = self
            .items(n, stream)
            .iter()
            .enumerate()
            .map(|(i, (label, x))| (format!("{label}/{i:06}.mlb1"), encode_mlb1(x)))
            .collect();
        pack_zip(encoded.iter().map(|(name, b)| (name.clone(), b.as_slice())))
    }

    /// `input -> fc(hidden) -> relu -> softmax` over the cluster labels.
    pub fn spec(&self, hidden: usize) -> NetworkSpec {
        NetworkSpec::new(vec![
            LayerSpec::Input {
                width: self.dims,
                height: 1,
                depth: 1,
            },
            LayerSpec::Fc { neurons: hidden },
            LayerSpec::Relu,
            LayerSpec::Softmax { labels: self.labels() },
        ])
    }
}
