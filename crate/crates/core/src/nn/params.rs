use std::collections::{BTreeMap, HashMap};

use crate::rng::{uniform, StreamRng};
use crate::{Error, Graph, Result, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named model parameters in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(name, Param { value, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Config(format!(
                "`{name}` expects shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Adds the gradients a differentiated session computed. Parameters the
    /// session never bound receive an explicit zero gradient.
    pub fn accumulate_grads(&mut self, graph: &Graph, bound: &HashMap<String, Var>) {
        for (name, p) in self.params.iter_mut() {
            let acc = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(g) = bound.get(name).and_then(|v| graph.grad(*v)) {
                acc.add_assign(g);
            }
        }
    }

    /// Named copies of every parameter, for [`crate::tensor::grad_check`].
    pub fn named_tensors(&self) -> Vec<(String, Tensor, bool)> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone(), true))
            .collect()
    }
}

/// Binds store parameters into a graph on first use.
pub struct Session<'a> {
    pub g: &'a mut Graph,
    store: Option<&'a ParamStore>,
    bound: HashMap<String, Var>,
    requires_grad: bool,
}

impl<'a> Session<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, requires_grad: bool) -> Self {
        Self {
            g,
            store: Some(store),
            bound: HashMap::new(),
            requires_grad,
        }
    }

    /// Session whose parameters are already graph nodes.
    pub fn prebound(g: &'a mut Graph, bound: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            g,
            store: None,
            bound: bound.into_iter().collect(),
            requires_grad: true,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let store = self.store.ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let t = store.value(name)?.clone();
        let v = self.g.leaf(t, self.requires_grad);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bindings(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    pub fn into_bindings(self) -> HashMap<String, Var> {
        self.bound
    }
}

/// Parameter initialization: Glorot-uniform weights, zero biases, unit
/// layer-norm gains.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut StreamRng,
}

impl Init<'_> {
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = uniform(self.rng, &[fan_in, fan_out], -a, a);
        self.store.insert(name, t)
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) -> Result<()> {
        self.store.insert(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Result<()> {
        let t = uniform(self.rng, shape, lo, hi);
        self.store.insert(name, t)
    }

    pub fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> Result<()> {
        self.weight(&format!("{prefix}.weight"), din, dout)?;
        self.store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]))
    }

    pub fn mlp(&mut self, prefix: &str, din: usize, hidden: usize, dout: usize) -> Result<()> {
        self.linear(&format!("{prefix}.fc1"), din, hidden)?;
        self.linear(&format!("{prefix}.fc2"), hidden, dout)
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.gain"), Tensor::ones(&[d]))?;
        self.store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))
    }

    pub fn attention(&mut self, prefix: &str, d: usize) -> Result<()> {
        for p in ["q_proj", "k_proj", "v_proj", "o_proj"] {
            self.weight(&format!("{prefix}.{p}.weight"), d, d)?;
        }
        Ok(())
    }

    pub fn encoder_layer(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.layer_norm(&format!("{prefix}.ln1"), d)?;
        self.attention(&format!("{prefix}.self_attn"), d)?;
        self.layer_norm(&format!("{prefix}.ln2"), d)?;
        self.mlp(&format!("{prefix}.mlp"), d, d, d)
    }

    pub fn decoder_layer(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.layer_norm(&format!("{prefix}.ln1"), d)?;
        self.attention(&format!("{prefix}.self_attn"), d)?;
        self.layer_norm(&format!("{prefix}.ln2"), d)?;
        self.attention(&format!("{prefix}.cross_attn"), d)?;
        self.layer_norm(&format!("{prefix}.ln3"), d)?;
        self.mlp(&format!("{prefix}.mlp"), d, d, d)
    }
}
