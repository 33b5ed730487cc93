//! Named parameter storage shared by the model, the optimizer and checkpoints.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter; decides whether weight decay applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Projection and mixing matrices. Decayed.
    Weight,
    /// Multiplicative gains: Γ, γ′, layer-norm scales.
    Gain,
    Bias,
    /// Class token and positional embedding.
    Embedding,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    TruncatedNormal {
        std: f64,
    },
    /// `[C_out, C_in/groups]` coefficients: identity inside each group plus N(0, std²).
    GroupedIdentity {
        groups: usize,
        std: f64,
    },
    /// `[N, charts·N]` coefficients averaging the charts plus N(0, std²).
    ChartAverage {
        charts: usize,
        std: f64,
    },
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub init: Init,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a zero-filled parameter. Values are filled by [`ParamStore::initialize`].
    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        kind: ParamKind,
        init: Init,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Config(format!(
                "parameter {name} has empty shape {shape:?}"
            )));
        }
        self.params.push(Param {
            name,
            kind,
            init,
            value: Tensor::zeros(shape),
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replaces a value; the shape must equal the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set parameter",
                lhs: slot.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }

    /// Fills every parameter from its initializer, in registration order.
    pub fn initialize(&mut self, rng: &mut Rng) {
        for p in &mut self.params {
            let shape = p.value.shape().to_vec();
            p.value = match p.init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Constant(c) => Tensor::full(&shape, T::lit(c)),
                Init::TruncatedNormal { std } => {
                    Tensor::from_fn(&shape, |_| T::lit(rng.truncated_normal(std)))
                }
                Init::GroupedIdentity { groups, std } => {
                    let (rows, cols) = (shape[0], shape[1]);
                    let per_group = rows / groups;
                    Tensor::from_fn(&shape, |i| {
                        let (o, j) = (i / cols, i % cols);
                        let base = if o % per_group == j { 1.0 } else { 0.0 };
                        T::lit(base + std * rng.normal())
                    })
                }
                Init::ChartAverage { charts, std } => {
                    let (rows, cols) = (shape[0], shape[1]);
                    Tensor::from_fn(&shape, |i| {
                        let (o, j) = (i / cols, i % cols);
                        let base = if j % rows == o {
                            1.0 / charts as f64
                        } else {
                            0.0
                        };
                        T::lit(base + std * rng.normal())
                    })
                }
            };
        }
    }

    /// Converts every value to another precision, keeping names and layout.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    init: p.init.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}
