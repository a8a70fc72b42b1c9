//! Named parameter tensors and their binding into a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{finite_diff_check, GradCheckReport, Gradients, Graph, Tensor, Var};

/// Parameter groups, identified by the first component of a parameter name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Backbone,
    Adapter,
    Projector,
    Decoder,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Backbone, Group::Adapter, Group::Projector, Group::Decoder];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Adapter => "adapter",
            Group::Projector => "projector",
            Group::Decoder => "decoder",
        }
    }

    pub fn of(name: &str) -> Option<Group> {
        let head = name.split('.').next()?;
        Group::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

/// Ordered map from names like `adapter.l1.W` to tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Weight matrix `fan_in × fan_out` with entries uniform in ±1/√fan_in.
    pub fn init_weight<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let t = uniform(&[fan_in, fan_out], fan_in, rng);
        self.insert(name, t);
    }

    /// Bias vector with entries uniform in ±1/√fan_in.
    pub fn init_bias<R: Rng>(&mut self, name: &str, fan_in: usize, len: usize, rng: &mut R) {
        let t = uniform(&[len], fan_in, rng);
        self.insert(name, t);
    }

    pub fn init_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
    }

    /// Binds every parameter into `g`. Parameters whose group is in `frozen`
    /// become constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph, frozen: &[Group]) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let is_frozen = Group::of(name).is_some_and(|grp| frozen.contains(&grp));
            let v = if is_frozen {
                g.constant(t.clone())?
            } else {
                g.leaf(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(BoundParams { vars })
    }
}

impl ParamStore {
    /// Finite-difference check of `f` w.r.t. the parameters in `names`;
    /// every other parameter is held constant.
    pub fn gradcheck<F>(&self, names: &[&str], step: f64, max_coords: Option<usize>, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
    {
        let tensors = names
            .iter()
            .map(|n| self.get(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        finite_diff_check(&tensors, step, max_coords, |g, vars| {
            let mut bp = self.bind(g, &Group::ALL)?;
            for (n, &v) in names.iter().zip(vars) {
                bp = bp.with(n, v);
            }
            f(g, &bp)
        })
    }
}

fn uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Graph handles for a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    /// Rebinds `name` to `v`.
    pub fn with(mut self, name: &str, v: Var) -> Self {
        self.vars.insert(name.to_string(), v);
        self
    }

    /// Gradient for every parameter, zero where no path reached it.
    pub fn collect(&self, grads: &Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            out.insert(name.clone(), grads.wrt(v));
        }
        out
    }
}
