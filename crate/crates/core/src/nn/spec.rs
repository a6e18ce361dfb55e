use serde::{Deserialize, Serialize};

use crate::nn::{NnError, Shape};

/// One entry of a layer chain as written by the user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Input {
        width: usize,
        height: usize,
        depth: usize,
    },
    Conv {
        filters: usize,
        size: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Pool {
        size: usize,
        stride: usize,
    },
    Fc {
        neurons: usize,
    },
    Relu,
    /// Fully connected layer to one output per label followed by softmax.
    Softmax {
        labels: Vec<String>,
    },
}

fn one() -> usize {
    1
}

const KNOWN_KINDS: [&str; 6] = ["input", "conv", "pool", "fc", "relu", "softmax"];

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Input { .. } => "input",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Pool { .. } => "pool",
            LayerSpec::Fc { .. } => "fc",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax { .. } => "softmax",
        }
    }
}

/// A layer chain from `input` to `softmax`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        Self { layers }
    }

    /// Parses a spec from JSON, reporting unrecognised layer kinds by index
    /// before falling back to field-level schema errors.
    pub fn from_json_value(value: &serde_json::Value) -> Result<Self, NnError> {
        if let Some(layers) = value.get("layers").and_then(|l| l.as_array()) {
            for (index, layer) in layers.iter().enumerate() {
                let kind = layer.get("type").and_then(|t| t.as_str()).unwrap_or("");
                if !KNOWN_KINDS.contains(&kind) {
                    return Err(NnError::UnknownLayerKind {
                        index,
                        kind: kind.to_string(),
                    });
                }
            }
        }
        serde_path_to_error::deserialize(value).map_err(|e| NnError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn input_shape(&self) -> Option<Shape> {
        match self.layers.first() {
            Some(LayerSpec::Input {
                width,
                height,
                depth,
            }) => Some(Shape::new(*width, *height, *depth)),
            _ => None,
        }
    }

    /// Class names of the output layer.
    pub fn labels(&self) -> &[String] {
        match self.layers.last() {
            Some(LayerSpec::Softmax { labels }) => labels,
            _ => &[],
        }
    }

    pub(crate) fn labels_mut(&mut self) -> Option<&mut Vec<String>> {
        match self.layers.last_mut() {
            Some(LayerSpec::Softmax { labels }) => Some(labels),
            _ => None,
        }
    }
}

/// Resolved operation of the executable layer plan.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Conv {
        slot: usize,
        filters: usize,
        size: usize,
        stride: usize,
        padding: usize,
    },
    Pool {
        size: usize,
        stride: usize,
    },
    Fc {
        slot: usize,
        neurons: usize,
    },
    Relu,
    /// Inverted dropout on hidden fc activations, active in training only.
    Dropout,
    Softmax {
        slot: usize,
        classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct PlannedLayer {
    pub op: Op,
    pub input: Shape,
    pub output: Shape,
}

/// Shape of one trainable slot: `rows × fan_in` weights plus `rows` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotShape {
    pub rows: usize,
    pub fan_in: usize,
}

impl SlotShape {
    pub fn weights(&self) -> usize {
        self.rows * self.fan_in
    }
}

fn window_output(input: usize, size: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = input + 2 * padding;
    if size == 0 || stride == 0 || size > span {
        return None;
    }
    Some((span - size) / stride + 1)
}

/// Validates a spec and expands it into an executable plan.
///
/// Conv and fc layers are followed by an implicit ReLU unless the next spec
/// entry is an explicit `relu`. Hidden fc layers also get a dropout stage.
pub(crate) fn plan(spec: &NetworkSpec) -> Result<(Vec<PlannedLayer>, Vec<SlotShape>), NnError> {
    let layers = &spec.layers;
    let mismatch = |index: usize, reason: String| NnError::ShapeMismatch { layer: index, reason };

    let mut shape = match layers.first() {
        Some(LayerSpec::Input {
            width,
            height,
            depth,
        }) => {
            if *width == 0 || *height == 0 || *depth == 0 {
                return Err(mismatch(0, "input dimensions must be positive".into()));
            }
            Shape::new(*width, *height, *depth)
        }
        Some(other) => {
            return Err(mismatch(
                0,
                format!("first layer must be input, found {}", other.kind()),
            ))
        }
        None => return Err(mismatch(0, "empty layer chain".into())),
    };
    match layers.last() {
        Some(LayerSpec::Softmax { .. }) => {}
        Some(other) => {
            return Err(mismatch(
                layers.len() - 1,
                format!("last layer must be softmax, found {}", other.kind()),
            ))
        }
        None => unreachable!(),
    }

    let mut planned = Vec::new();
    let mut slots = Vec::new();
    for (index, layer) in layers.iter().enumerate().skip(1) {
        let next_is_relu = matches!(layers.get(index + 1), Some(LayerSpec::Relu));
        match layer {
            LayerSpec::Input { .. } => {
                return Err(mismatch(index, "input layer may only appear first".into()))
            }
            LayerSpec::Conv {
                filters,
                size,
                stride,
                padding,
            } => {
                if *filters == 0 {
                    return Err(mismatch(index, "conv needs at least one filter".into()));
                }
                let ow = window_output(shape.width, *size, *stride, *padding);
                let oh = window_output(shape.height, *size, *stride, *padding);
                let (Some(ow), Some(oh)) = (ow, oh) else {
                    return Err(mismatch(
                        index,
                        format!(
                            "conv {size}x{size} stride {stride} padding {padding} does not fit input {shape}"
                        ),
                    ));
                };
                let output = Shape::new(ow, oh, *filters);
                planned.push(PlannedLayer {
                    op: Op::Conv {
                        slot: slots.len(),
                        filters: *filters,
                        size: *size,
                        stride: *stride,
                        padding: *padding,
                    },
                    input: shape,
                    output,
                });
                slots.push(SlotShape {
                    rows: *filters,
                    fan_in: size * size * shape.depth,
                });
                shape = output;
                if !next_is_relu {
                    planned.push(PlannedLayer {
                        op: Op::Relu,
                        input: shape,
                        output: shape,
                    });
                }
            }
            LayerSpec::Pool { size, stride } => {
                let ow = window_output(shape.width, *size, *stride, 0);
                let oh = window_output(shape.height, *size, *stride, 0);
                let (Some(ow), Some(oh)) = (ow, oh) else {
                    return Err(mismatch(
                        index,
                        format!("pool {size}x{size} stride {stride} does not fit input {shape}"),
                    ));
                };
                let output = Shape::new(ow, oh, shape.depth);
                planned.push(PlannedLayer {
                    op: Op::Pool {
                        size: *size,
                        stride: *stride,
                    },
                    input: shape,
                    output,
                });
                shape = output;
            }
            LayerSpec::Fc { neurons } => {
                if *neurons == 0 {
                    return Err(mismatch(index, "fc needs at least one neuron".into()));
                }
                let output = Shape::flat(*neurons);
                planned.push(PlannedLayer {
                    op: Op::Fc {
                        slot: slots.len(),
                        neurons: *neurons,
                    },
                    input: shape,
                    output,
                });
                slots.push(SlotShape {
                    rows: *neurons,
                    fan_in: shape.len(),
                });
                shape = output;
                if !next_is_relu {
                    planned.push(PlannedLayer {
                        op: Op::Relu,
                        input: shape,
                        output: shape,
                    });
                    planned.push(PlannedLayer {
                        op: Op::Dropout,
                        input: shape,
                        output: shape,
                    });
                }
            }
            LayerSpec::Relu => {
                planned.push(PlannedLayer {
                    op: Op::Relu,
                    input: shape,
                    output: shape,
                });
                if index > 0 && matches!(layers[index - 1], LayerSpec::Fc { .. }) {
                    planned.push(PlannedLayer {
                        op: Op::Dropout,
                        input: shape,
                        output: shape,
                    });
                }
            }
            LayerSpec::Softmax { labels } => {
                if index != layers.len() - 1 {
                    return Err(mismatch(index, "softmax may only appear last".into()));
                }
                if labels.is_empty() {
                    return Err(mismatch(index, "softmax needs at least one label".into()));
                }
                let mut seen = std::collections::HashSet::new();
                if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
                    return Err(mismatch(index, format!("duplicate label {dup:?}")));
                }
                let output = Shape::flat(labels.len());
                planned.push(PlannedLayer {
                    op: Op::Softmax {
                        slot: slots.len(),
                        classes: labels.len(),
                    },
                    input: shape,
                    output,
                });
                slots.push(SlotShape {
                    rows: labels.len(),
                    fan_in: shape.len(),
                });
                shape = output;
            }
        }
    }
    Ok((planned, slots))
}
