use std::collections::HashMap;

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    /// std = sqrt(2 / fan_in), for layers feeding SiLU.
    HeNormal { fan_in: usize },
    /// std = sqrt(2 / (fan_in + fan_out)).
    Glorot { fan_in: usize, fan_out: usize },
}

impl Init {
    pub fn tensor<S: Scalar, R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor<S> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Const(v) => Tensor::full(shape, S::lit(v)),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::HeNormal { fan_in } => Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng),
            Init::Glorot { fan_in, fan_out } => {
                Tensor::randn(shape, (2.0 / (fan_in + fan_out).max(1) as f64).sqrt(), rng)
            }
        }
    }
}

/// Ordered, named collection of trainable tensors with gradient slots.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter. Panics on a duplicate name; names are built
    /// from module paths, so a collision is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id.0);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        id
    }

    pub fn init<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let value = init.tensor(shape, rng);
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Number of scalar entries in parameters whose name contains `pat`.
    pub fn numel_matching(&self, pat: &str) -> usize {
        self.params.iter().filter(|p| p.name.contains(pat)).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(S::zero());
        }
    }

    pub fn accumulate(&mut self, grads: &[(ParamId, Tensor<S>)]) {
        for (id, g) in grads {
            self.params[id.0].grad.add_assign(g);
        }
    }

    /// Copy of this store in another precision.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), grad: p.grad.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }
}
