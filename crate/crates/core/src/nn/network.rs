use rand::{Rng, RngCore};

use crate::nn::params::{AdaGradState, Gradients, LayerParams, ParamSet, Params};
use crate::nn::spec::{plan, NetworkSpec, Op, PlannedLayer, SlotShape};
use crate::nn::{NnError, Shape, Tensor};
use crate::scalar::Scalar;

/// Whether a forward pass is for training (dropout active) or inference.
pub enum Pass<'a> {
    Inference,
    Train {
        dropout_p: f64,
        rng: &'a mut dyn RngCore,
    },
}

impl Pass<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Pass::Train { .. })
    }
}

#[derive(Clone, Debug)]
enum Aux<S> {
    None,
    PoolArgmax(Vec<usize>),
    DropMask(Vec<S>),
}

/// Activations retained by [`Network::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<S> {
    /// `inputs[i]` is the input of plan layer `i`.
    inputs: Vec<Vec<S>>,
    aux: Vec<Aux<S>>,
    logits: Vec<S>,
    probs: Vec<S>,
    training: bool,
}

impl<S: Scalar> ForwardCache<S> {
    pub fn logits(&self) -> &[S] {
        &self.logits
    }

    pub fn probabilities(&self) -> &[S] {
        &self.probs
    }
}

/// An executable layer chain built from a [`NetworkSpec`].
///
/// The network itself holds no parameters; all passes take a [`Params`]
/// explicitly so one network can serve many parameter versions.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    plan: Vec<PlannedLayer>,
    slots: Vec<SlotShape>,
}

/// Builds a network and its initial parameters and optimiser state.
pub fn build_network<S: Scalar>(
    spec: NetworkSpec,
    seed: u64,
) -> Result<(Network, Params<S>, AdaGradState<S>), NnError> {
    let network = Network::new(spec)?;
    let params = Params::init(network.slots(), seed);
    let state = AdaGradState::zeros(network.slots());
    Ok((network, params, state))
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self, NnError> {
        let (plan, slots) = plan(&spec)?;
        Ok(Self { spec, plan, slots })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn slots(&self) -> &[SlotShape] {
        &self.slots
    }

    pub fn input_shape(&self) -> Shape {
        self.plan[0].input
    }

    pub fn labels(&self) -> &[String] {
        self.spec.labels()
    }

    pub fn num_classes(&self) -> usize {
        self.labels().len()
    }

    pub fn param_count(&self) -> usize {
        self.slots.iter().map(|s| s.weights() + s.rows).sum()
    }

    pub fn check_params<S: Scalar>(&self, params: &ParamSet<S>) -> Result<(), NnError> {
        params.check_slots(&self.slots)
    }

    /// Runs the chain and returns class probabilities plus the cache needed
    /// by [`Network::backward`].
    pub fn forward<S: Scalar>(
        &self,
        params: &Params<S>,
        x: &Tensor<S>,
        mut pass: Pass<'_>,
    ) -> Result<(Vec<S>, ForwardCache<S>), NnError> {
        if x.shape() != self.input_shape() {
            return Err(NnError::InputShape {
                expected: self.input_shape(),
                found: x.shape(),
            });
        }
        self.check_params(&params.layers)?;
        let training = pass.is_training();
        let mut inputs = Vec::with_capacity(self.plan.len());
        let mut aux = Vec::with_capacity(self.plan.len());
        let mut current = x.data().to_vec();
        let mut logits = Vec::new();

        for layer in &self.plan {
            let (out, extra) = match &layer.op {
                Op::Conv {
                    slot,
                    filters,
                    size,
                    stride,
                    padding,
                } => (
                    conv_forward(
                        &current,
                        layer.input,
                        layer.output,
                        &params.layers.layers[*slot],
                        *filters,
                        *size,
                        *stride,
                        *padding,
                    ),
                    Aux::None,
                ),
                Op::Pool { size, stride } => {
                    let (out, argmax) =
                        pool_forward(&current, layer.input, layer.output, *size, *stride);
                    (out, Aux::PoolArgmax(argmax))
                }
                Op::Fc { slot, neurons } => (
                    dense_forward(&current, &params.layers.layers[*slot], *neurons),
                    Aux::None,
                ),
                Op::Relu => (
                    current
                        .iter()
                        .map(|&v| if v > S::zero() { v } else { S::zero() })
                        .collect(),
                    Aux::None,
                ),
                Op::Dropout => match &mut pass {
                    Pass::Train { dropout_p, rng } if *dropout_p > 0.0 => {
                        let keep = S::of(1.0 / (1.0 - *dropout_p));
                        let mask: Vec<S> = (0..current.len())
                            .map(|_| {
                                if rng.random::<f64>() < *dropout_p {
                                    S::zero()
                                } else {
                                    keep
                                }
                            })
                            .collect();
                        let out = current.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                        (out, Aux::DropMask(mask))
                    }
                    _ => (current.clone(), Aux::None),
                },
                Op::Softmax { slot, classes } => {
                    let z = dense_forward(&current, &params.layers.layers[*slot], *classes);
                    logits = z.clone();
                    (softmax(&z), Aux::None)
                }
            };
            inputs.push(std::mem::replace(&mut current, out));
            aux.push(extra);
        }

        let probs = current;
        let cache = ForwardCache {
            inputs,
            aux,
            logits,
            probs: probs.clone(),
            training,
        };
        Ok((probs, cache))
    }

    /// Pre-softmax outputs for an inference pass.
    pub fn logits<S: Scalar>(&self, params: &Params<S>, x: &Tensor<S>) -> Result<Vec<S>, NnError> {
        let (_, cache) = self.forward(params, x, Pass::Inference)?;
        Ok(cache.logits)
    }

    /// Class probabilities for an inference pass.
    pub fn predict<S: Scalar>(&self, params: &Params<S>, x: &Tensor<S>) -> Result<Vec<S>, NnError> {
        Ok(self.forward(params, x, Pass::Inference)?.0)
    }

    /// Per-example gradient and softmax cross-entropy loss.
    pub fn backward<S: Scalar>(
        &self,
        params: &Params<S>,
        cache: &ForwardCache<S>,
        label: usize,
    ) -> Result<(Gradients<S>, S), NnError> {
        let mut grads = ParamSet::zeros(&self.slots);
        let loss = self.backward_into(params, cache, label, &mut grads)?;
        Ok((grads, loss))
    }

    /// Like [`Network::backward`] but writes into a caller-owned buffer,
    /// which is overwritten (not accumulated into).
    pub fn backward_into<S: Scalar>(
        &self,
        params: &Params<S>,
        cache: &ForwardCache<S>,
        label: usize,
        grads: &mut Gradients<S>,
    ) -> Result<S, NnError> {
        let classes = self.num_classes();
        if label >= classes {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
        if cache.inputs.len() != self.plan.len() || cache.probs.len() != classes {
            return Err(NnError::CacheMismatch);
        }
        if !cache.training {
            return Err(NnError::CacheMismatch);
        }
        grads.check_slots(&self.slots)?;
        for v in grads.iter_mut() {
            *v = S::zero();
        }

        let loss = log_sum_exp(&cache.logits) - cache.logits[label];
        let mut delta: Vec<S> = cache.probs.clone();
        delta[label] -= S::one();

        for (i, layer) in self.plan.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let need_input_grad = i > 0;
            delta = match &layer.op {
                Op::Softmax { slot, .. } | Op::Fc { slot, .. } => dense_backward(
                    input,
                    &delta,
                    &params.layers.layers[*slot],
                    &mut grads.layers[*slot],
                    need_input_grad,
                ),
                Op::Conv {
                    slot,
                    filters,
                    size,
                    stride,
                    padding,
                } => conv_backward(
                    input,
                    &delta,
                    layer.input,
                    layer.output,
                    &params.layers.layers[*slot],
                    &mut grads.layers[*slot],
                    *filters,
                    *size,
                    *stride,
                    *padding,
                    need_input_grad,
                ),
                Op::Pool { .. } => {
                    let Aux::PoolArgmax(argmax) = &cache.aux[i] else {
                        return Err(NnError::CacheMismatch);
                    };
                    let mut d = vec![S::zero(); input.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] += delta[o];
                    }
                    d
                }
                Op::Relu => input
                    .iter()
                    .zip(&delta)
                    .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
                    .collect(),
                Op::Dropout => match &cache.aux[i] {
                    Aux::DropMask(mask) => delta.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                    _ => delta,
                },
            };
        }
        Ok(loss)
    }

    pub(crate) fn replace_spec(&mut self, spec: NetworkSpec) -> Result<(), NnError> {
        *self = Network::new(spec)?;
        Ok(())
    }
}

fn dense_forward<S: Scalar>(input: &[S], p: &LayerParams<S>, rows: usize) -> Vec<S> {
    let n = input.len();
    (0..rows)
        .map(|r| {
            let row = &p.weights[r * n..(r + 1) * n];
            let mut acc = p.biases[r];
            for (w, x) in row.iter().zip(input) {
                acc += *w * *x;
            }
            acc
        })
        .collect()
}

fn dense_backward<S: Scalar>(
    input: &[S],
    delta: &[S],
    p: &LayerParams<S>,
    g: &mut LayerParams<S>,
    need_input_grad: bool,
) -> Vec<S> {
    let n = input.len();
    let mut d_input = if need_input_grad {
        vec![S::zero(); n]
    } else {
        Vec::new()
    };
    for (r, &dr) in delta.iter().enumerate() {
        g.biases[r] += dr;
        if dr == S::zero() {
            continue;
        }
        let grow = &mut g.weights[r * n..(r + 1) * n];
        for (gw, x) in grow.iter_mut().zip(input) {
            *gw += dr * *x;
        }
        if need_input_grad {
            let wrow = &p.weights[r * n..(r + 1) * n];
            for (di, w) in d_input.iter_mut().zip(wrow) {
                *di += dr * *w;
            }
        }
    }
    d_input
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<S: Scalar>(
    input: &[S],
    in_shape: Shape,
    out_shape: Shape,
    p: &LayerParams<S>,
    filters: usize,
    size: usize,
    stride: usize,
    padding: usize,
) -> Vec<S> {
    let din = in_shape.depth;
    let mut out = vec![S::zero(); out_shape.len()];
    for f in 0..filters {
        let fw = &p.weights[f * size * size * din..(f + 1) * size * size * din];
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let mut acc = p.biases[f];
                for fy in 0..size {
                    let iy = (oy * stride + fy) as isize - padding as isize;
                    if iy < 0 || iy >= in_shape.height as isize {
                        continue;
                    }
                    for fx in 0..size {
                        let ix = (ox * stride + fx) as isize - padding as isize;
                        if ix < 0 || ix >= in_shape.width as isize {
                            continue;
                        }
                        let ibase = in_shape.index(ix as usize, iy as usize, 0);
                        let wbase = (fy * size + fx) * din;
                        for d in 0..din {
                            acc += fw[wbase + d] * input[ibase + d];
                        }
                    }
                }
                out[out_shape.index(ox, oy, f)] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<S: Scalar>(
    input: &[S],
    delta: &[S],
    in_shape: Shape,
    out_shape: Shape,
    p: &LayerParams<S>,
    g: &mut LayerParams<S>,
    filters: usize,
    size: usize,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Vec<S> {
    let din = in_shape.depth;
    let fsize = size * size * din;
    let mut d_input = if need_input_grad {
        vec![S::zero(); input.len()]
    } else {
        Vec::new()
    };
    for f in 0..filters {
        let fw = &p.weights[f * fsize..(f + 1) * fsize];
        let gw = &mut g.weights[f * fsize..(f + 1) * fsize];
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let dout = delta[out_shape.index(ox, oy, f)];
                g.biases[f] += dout;
                if dout == S::zero() {
                    continue;
                }
                for fy in 0..size {
                    let iy = (oy * stride + fy) as isize - padding as isize;
                    if iy < 0 || iy >= in_shape.height as isize {
                        continue;
                    }
                    for fx in 0..size {
                        let ix = (ox * stride + fx) as isize - padding as isize;
                        if ix < 0 || ix >= in_shape.width as isize {
                            continue;
                        }
                        let ibase = in_shape.index(ix as usize, iy as usize, 0);
                        let wbase = (fy * size + fx) * din;
                        for d in 0..din {
                            gw[wbase + d] += dout * input[ibase + d];
                            if need_input_grad {
                                d_input[ibase + d] += dout * fw[wbase + d];
                            }
                        }
                    }
                }
            }
        }
    }
    d_input
}

fn pool_forward<S: Scalar>(
    input: &[S],
    in_shape: Shape,
    out_shape: Shape,
    size: usize,
    stride: usize,
) -> (Vec<S>, Vec<usize>) {
    let mut out = vec![S::zero(); out_shape.len()];
    let mut argmax = vec![0; out_shape.len()];
    for oy in 0..out_shape.height {
        for ox in 0..out_shape.width {
            for d in 0..in_shape.depth {
                let mut best_idx = in_shape.index(ox * stride, oy * stride, d);
                let mut best = input[best_idx];
                for fy in 0..size {
                    for fx in 0..size {
                        let idx = in_shape.index(ox * stride + fx, oy * stride + fy, d);
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = out_shape.index(ox, oy, d);
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

fn log_sum_exp<S: Scalar>(z: &[S]) -> S {
    let max = z.iter().copied().fold(S::neg_infinity(), S::max);
    let sum: S = z.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Numerically stable softmax.
pub fn softmax<S: Scalar>(z: &[S]) -> Vec<S> {
    let max = z.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest probability; ties resolve to the lowest index.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
