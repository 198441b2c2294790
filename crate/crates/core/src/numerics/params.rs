use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor within a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors in a fixed registration order. The order is the flat
/// enumeration used by the optimizer and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn push_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.push(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// A set with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Replace every value with those of `other`, which must have the same
    /// names and shapes in the same order.
    pub fn assign(&mut self, other: &ParameterSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract("parameter names differ".into()));
        }
        for ((dst, src), name) in self.tensors.iter_mut().zip(&other.tensors).zip(&self.names) {
            if dst.shape() != src.shape() {
                return Err(Error::dim(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Register every tensor as a differentiable leaf, in order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }
}

/// Weights of a two-layer perceptron `linear -> ReLU -> linear`.
#[derive(Clone, Copy, Debug)]
pub struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpIds {
    /// Registers `{prefix}.fc1.weight [in, hidden]`, `{prefix}.fc1.bias`,
    /// `{prefix}.fc2.weight [hidden, out]`, `{prefix}.fc2.bias`.
    pub fn register(
        params: &mut ParameterSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        MlpIds {
            w1: params.push_uniform(format!("{prefix}.fc1.weight"), &[input, hidden], input, rng),
            b1: params.push_uniform(format!("{prefix}.fc1.bias"), &[hidden], input, rng),
            w2: params.push_uniform(format!("{prefix}.fc2.weight"), &[hidden, output], hidden, rng),
            b2: params.push_uniform(format!("{prefix}.fc2.bias"), &[output], hidden, rng),
        }
    }

    pub fn vars(&self, bound: &[Var]) -> MlpVars {
        MlpVars {
            w1: bound[self.w1.0],
            b1: bound[self.b1.0],
            w2: bound[self.w2.0],
            b2: bound[self.b2.0],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `relu(x W1 + b1) W2 + b2` over the rows of `x`.
pub fn mlp_forward(g: &mut Graph, x: Var, w: &MlpVars) -> Result<Var> {
    let fan_in = g.shape(w.w1)[0];
    if g.shape(x).len() != 2 || g.shape(x)[1] != fan_in {
        return Err(Error::dim(format!(
            "mlp input {:?} does not match fan-in {fan_in}",
            g.shape(x)
        )));
    }
    let h = g.matmul(x, w.w1)?;
    let h = g.add_bias(h, w.b1)?;
    let h = g.relu(h)?;
    let y = g.matmul(h, w.w2)?;
    g.add_bias(y, w.b2)
}
