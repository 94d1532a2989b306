//! Dense feed-forward subnetworks with a layer-level gradient tape.
//!
//! All trainable values (network weights and structured coefficients) live
//! in one flat [`ParamStore`]; gradients use the same flat layout, which keeps
//! optimizers oblivious to model structure.

use indexmap::IndexMap;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::orthogonalization::Projector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("invalid network '{network}': {message}")]
    InvalidSpec { network: String, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite input in row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("tape does not belong to this network")]
    TapeMismatch,
    #[error("unknown parameter slot '{0}'")]
    UnknownSlot(String),
    #[error("duplicate parameter slot '{0}'")]
    DuplicateSlot(String),
    #[error("network '{network}' has no layer named '{layer}'")]
    UnknownLayer { network: String, layer: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Linear => 1.0,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        units: usize,
        #[serde(default = "default_linear")]
        activation: Activation,
        #[serde(default = "default_true")]
        use_bias: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    Dropout {
        rate: f64,
    },
}

fn default_linear() -> Activation {
    Activation::Linear
}

impl LayerSpec {
    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerSpec::Dense {
            units,
            activation,
            use_bias: true,
            name: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn output_width(&self) -> Option<usize> {
        match self.layers.last()? {
            LayerSpec::Dense { units, .. } => Some(*units),
            LayerSpec::Dropout { .. } => None,
        }
    }

    /// Checks layer constraints; `outputs` is the number of parameters the
    /// network feeds.
    pub fn validate(&self, outputs: usize) -> Result<(), GraphError> {
        let bad = |message: String| GraphError::InvalidSpec {
            network: self.name.clone(),
            message,
        };
        for layer in &self.layers {
            match layer {
                LayerSpec::Dense { units: 0, .. } => return Err(bad("dense layer with 0 units".into())),
                LayerSpec::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                    return Err(bad(format!("dropout rate {rate} outside [0, 1)")))
                }
                _ => {}
            }
        }
        match self.layers.last() {
            Some(LayerSpec::Dense {
                units,
                activation: Activation::Linear,
                ..
            }) if *units == outputs => {}
            _ => {
                return Err(bad(format!(
                    "the last layer must be a linear dense layer with {outputs} unit(s)"
                )))
            }
        }
        let dense_before_last = self.layers[..self.layers.len() - 1]
            .iter()
            .rev()
            .find(|l| matches!(l, LayerSpec::Dense { .. }));
        let penultimate_is_dense = self.layers.len() == 1 || dense_before_last.is_some();
        if !penultimate_is_dense {
            return Err(bad("the penultimate layer must be dense".into()));
        }
        let mut names: Vec<&str> = Vec::new();
        for layer in &self.layers {
            if let LayerSpec::Dense { name: Some(n), .. } = layer {
                if names.contains(&n.as_str()) {
                    return Err(bad(format!("layer name '{n}' used twice")));
                }
                names.push(n);
            }
        }
        Ok(())
    }
}

/// Position and shape of one named block of values in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat storage of every trainable value, column-major within each slot.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    #[serde(with = "crate::linalg::vec_b64")]
    pub values: Vec<f64>,
    pub slots: IndexMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Appends a zero-initialized slot.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize) -> Result<Slot, GraphError> {
        if self.slots.contains_key(name) {
            return Err(GraphError::DuplicateSlot(name.to_string()));
        }
        let slot = Slot {
            offset: self.values.len(),
            rows,
            cols,
        };
        self.values.resize(self.values.len() + rows * cols, 0.0);
        self.slots.insert(name.to_string(), slot);
        Ok(slot)
    }

    pub fn slot(&self, name: &str) -> Result<Slot, GraphError> {
        self.slots
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownSlot(name.to_string()))
    }

    pub fn get(&self, slot: Slot) -> &[f64] {
        &self.values[slot.range()]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut [f64] {
        &mut self.values[slot.range()]
    }

    pub fn matrix(&self, slot: Slot) -> DMatrix<f64> {
        DMatrix::from_column_slice(slot.rows, slot.cols, self.get(slot))
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum CompiledLayer {
    Dense {
        weight: Slot,
        bias: Option<Slot>,
        activation: Activation,
        name: Option<String>,
    },
    Dropout {
        rate: f64,
    },
}

/// A network bound to its slots in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub name: String,
    pub input_dim: usize,
    layers: Vec<CompiledLayer>,
    id: u64,
}

/// Intermediates recorded by [`Network::forward`] for one backward pass.
#[derive(Debug)]
pub struct Tape {
    network: u64,
    records: Vec<Record>,
    /// Projection applied to the input of the final dense layer.
    projector: Option<Projector>,
}

#[derive(Debug)]
enum Record {
    Dense {
        input: DMatrix<f64>,
        pre: DMatrix<f64>,
        out: DMatrix<f64>,
    },
    Dropout {
        mask: Option<DMatrix<f64>>,
    },
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> impl FnMut() -> f64 + '_ {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    move || rng.random_range(-limit..=limit)
}

/// Registers the slots of `spec` under `prefix` and fills them with
/// Glorot-uniform weights and zero biases. With `drop_final_bias` the last
/// dense layer gets no bias.
pub fn init_params(
    spec: &NetworkSpec,
    input_dim: usize,
    store: &mut ParamStore,
    prefix: &str,
    seed: u64,
    drop_final_bias: bool,
) -> Result<Network, GraphError> {
    if input_dim == 0 {
        return Err(GraphError::InvalidSpec {
            network: spec.name.clone(),
            message: "network has no inputs".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut width = input_dim;
    let mut layers = Vec::with_capacity(spec.layers.len());
    let last_dense = spec
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Dense { .. }));
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Dense {
                units,
                activation,
                use_bias,
                name,
            } => {
                let weight = store.add(&format!("{prefix}/layer{i}/kernel"), width, *units)?;
                let mut draw = glorot(&mut rng, width, *units);
                for v in store.get_mut(weight) {
                    *v = draw();
                }
                let keep_bias = *use_bias && !(drop_final_bias && Some(i) == last_dense);
                let bias = if keep_bias {
                    Some(store.add(&format!("{prefix}/layer{i}/bias"), 1, *units)?)
                } else {
                    None
                };
                layers.push(CompiledLayer::Dense {
                    weight,
                    bias,
                    activation: *activation,
                    name: name.clone(),
                });
                width = *units;
            }
            LayerSpec::Dropout { rate } => layers.push(CompiledLayer::Dropout { rate: *rate }),
        }
    }
    let id = store.slots.len() as u64 ^ ((store.len() as u64) << 20);
    Ok(Network {
        name: spec.name.clone(),
        input_dim,
        layers,
        id,
    })
}

fn check_finite(x: &DMatrix<f64>) -> Result<(), GraphError> {
    for (j, col) in x.column_iter().enumerate() {
        if let Some(i) = col.iter().position(|v| !v.is_finite()) {
            return Err(GraphError::NonFinite { row: i, col: j });
        }
    }
    Ok(())
}

impl Network {
    pub fn output_width(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                CompiledLayer::Dense { weight, .. } => Some(weight.cols),
                CompiledLayer::Dropout { .. } => None,
            })
            .unwrap_or(self.input_dim)
    }

    fn final_dense(&self) -> usize {
        self.layers
            .iter()
            .rposition(|l| matches!(l, CompiledLayer::Dense { .. }))
            .unwrap_or(0)
    }

    pub fn final_has_bias(&self) -> bool {
        matches!(&self.layers[self.final_dense()], CompiledLayer::Dense { bias: Some(_), .. })
    }

    /// Width of the features feeding the final dense layer.
    pub fn penultimate_width(&self) -> usize {
        match &self.layers[self.final_dense()] {
            CompiledLayer::Dense { weight, .. } => weight.rows,
            CompiledLayer::Dropout { .. } => self.input_dim,
        }
    }

    pub fn slots(&self) -> Vec<Slot> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                CompiledLayer::Dense { weight, bias, .. } => {
                    std::iter::once(*weight).chain(*bias).collect::<Vec<_>>()
                }
                CompiledLayer::Dropout { .. } => Vec::new(),
            })
            .collect()
    }

    /// Runs the network. Dropout is active only when `training`, with masks
    /// drawn from `seed`. A `projector` is applied to the input of the final
    /// dense layer.
    pub fn forward(
        &self,
        store: &ParamStore,
        batch: &DMatrix<f64>,
        training: bool,
        seed: u64,
        projector: Option<&Projector>,
    ) -> Result<(DMatrix<f64>, Tape), GraphError> {
        if batch.ncols() != self.input_dim {
            return Err(GraphError::Shape(format!(
                "network '{}' expects {} inputs, got {}",
                self.name,
                self.input_dim,
                batch.ncols()
            )));
        }
        check_finite(batch)?;
        if let Some(p) = projector {
            if p.nrows() != batch.nrows() {
                return Err(GraphError::Shape(format!(
                    "projector built for {} rows, batch has {}",
                    p.nrows(),
                    batch.nrows()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let final_dense = self.final_dense();
        let mut h = batch.clone();
        let mut records = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                CompiledLayer::Dense {
                    weight,
                    bias,
                    activation,
                    ..
                } => {
                    if i == final_dense {
                        if let Some(p) = projector {
                            h = p.apply(&h);
                        }
                    }
                    let mut pre = &h * store.matrix(*weight);
                    if let Some(b) = bias {
                        let b = store.get(*b);
                        for (j, mut col) in pre.column_iter_mut().enumerate() {
                            col.add_scalar_mut(b[j]);
                        }
                    }
                    let out = pre.map(|z| activation.apply(z));
                    let next = out.clone();
                    records.push(Record::Dense {
                        input: std::mem::replace(&mut h, next),
                        pre,
                        out,
                    });
                }
                CompiledLayer::Dropout { rate } => {
                    if training && *rate > 0.0 {
                        let keep = 1.0 - rate;
                        let mask = DMatrix::from_fn(h.nrows(), h.ncols(), |_, _| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        h.component_mul_assign(&mask);
                        records.push(Record::Dropout { mask: Some(mask) });
                    } else {
                        records.push(Record::Dropout { mask: None });
                    }
                }
            }
        }
        Ok((
            h,
            Tape {
                network: self.id,
                records,
                projector: projector.cloned(),
            },
        ))
    }

    /// Accumulates into `grads` the gradient of `Σ output ⊙ output_grad` with
    /// respect to every weight of the network. Consumes the tape.
    pub fn backward(
        &self,
        tape: Tape,
        output_grad: &DMatrix<f64>,
        store: &ParamStore,
        grads: &mut [f64],
    ) -> Result<(), GraphError> {
        if tape.network != self.id || tape.records.len() != self.layers.len() {
            return Err(GraphError::TapeMismatch);
        }
        if grads.len() != store.len() {
            return Err(GraphError::Shape("gradient buffer does not match the store".into()));
        }
        let final_dense = self.final_dense();
        let mut g = output_grad.clone();
        for (i, (layer, record)) in self.layers.iter().zip(tape.records).enumerate().rev() {
            match (layer, record) {
                (
                    CompiledLayer::Dense {
                        weight,
                        bias,
                        activation,
                        ..
                    },
                    Record::Dense { input, pre, out },
                ) => {
                    if g.shape() != out.shape() {
                        return Err(GraphError::Shape(format!(
                            "output gradient is {:?}, layer output {:?}",
                            g.shape(),
                            out.shape()
                        )));
                    }
                    let mut delta = g;
                    if *activation != Activation::Linear {
                        for ((d, z), a) in delta.iter_mut().zip(pre.iter()).zip(out.iter()) {
                            *d *= activation.derivative(*z, *a);
                        }
                    }
                    let gw = input.transpose() * &delta;
                    for (acc, v) in grads[weight.range()].iter_mut().zip(gw.iter()) {
                        *acc += v;
                    }
                    if let Some(b) = bias {
                        for (j, acc) in grads[b.range()].iter_mut().enumerate() {
                            *acc += delta.column(j).sum();
                        }
                    }
                    if i == 0 {
                        return Ok(());
                    }
                    g = delta * store.matrix(*weight).transpose();
                    if i == final_dense {
                        if let Some(p) = &tape.projector {
                            g = p.apply(&g);
                        }
                    }
                }
                (CompiledLayer::Dropout { .. }, Record::Dropout { mask }) => {
                    if let Some(mask) = mask {
                        g.component_mul_assign(&mask);
                    }
                }
                _ => return Err(GraphError::TapeMismatch),
            }
        }
        Ok(())
    }

    /// Inference-mode activations feeding the final dense layer (after the
    /// projection, when given), or the output of the dense layer called
    /// `layer`.
    pub fn features(
        &self,
        store: &ParamStore,
        batch: &DMatrix<f64>,
        layer: Option<&str>,
        projector: Option<&Projector>,
    ) -> Result<DMatrix<f64>, GraphError> {
        let (_, tape) = self.forward(store, batch, false, 0, projector)?;
        let target = match layer {
            None => None,
            Some(tag) => Some(
                self.layers
                    .iter()
                    .position(|l| matches!(l, CompiledLayer::Dense { name: Some(n), .. } if n == tag))
                    .ok_or_else(|| GraphError::UnknownLayer {
                        network: self.name.clone(),
                        layer: tag.to_string(),
                    })?,
            ),
        };
        let final_dense = self.final_dense();
        for (i, record) in tape.records.into_iter().enumerate() {
            if let Record::Dense { input, out, .. } = record {
                match target {
                    None if i == final_dense => return Ok(input),
                    Some(t) if t == i => return Ok(out),
                    _ => {}
                }
            }
        }
        Err(GraphError::TapeMismatch)
    }
}
