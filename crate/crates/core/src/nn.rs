//! Parameter storage and the transformer building blocks shared by the
//! encoder, the contextual policy and the baselines.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnLayout, Graph, Group, ParamKey, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter arrays of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    group: Group,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(group: Group) -> Self {
        Self {
            group,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn var(&self, g: &mut Graph, index: usize) -> Var {
        g.param(
            ParamKey {
                group: self.group,
                index,
            },
            &self.values[index],
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.values.iter().map(Tensor::len).collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every value, requiring an exact name and shape match.
    pub fn load(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.values.len() {
            return Err(Error::Data(format!(
                "expected {} parameter arrays, found {}",
                self.values.len(),
                entries.len()
            )));
        }
        for ((name, value), (own_name, own)) in
            entries.iter().zip(self.names.iter().zip(&self.values))
        {
            if name != own_name || value.shape() != own.shape() {
                return Err(Error::Data(format!(
                    "parameter `{name}` {:?} does not match `{own_name}` {:?}",
                    value.shape(),
                    own.shape()
                )));
            }
        }
        for (own, (_, value)) in self.values.iter_mut().zip(entries) {
            *own = value.clone();
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }
}

pub fn normal_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), normal_tensor(fan_in, fan_out, std, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self { w, b }
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Var {
        let w = store.var(g, self.w);
        let b = store.var(g, self.b);
        let h = g.matmul(x, w);
        g.add_bias(h, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(1, width, 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, width));
        Self { gamma, beta }
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Var {
        let gamma = store.var(g, self.gamma);
        let beta = store.var(g, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Shape hyperparameters of a transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerShape {
    pub width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
}

impl TransformerShape {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if self.width % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Pre-norm transformer block: attention and a ReLU MLP, each residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Forward-pass mode: dropout is active only when an RNG is supplied.
pub struct Mode<'a, R: Rng + ?Sized> {
    pub dropout: f64,
    pub rng: Option<&'a mut R>,
}

impl<'a, R: Rng + ?Sized> Mode<'a, R> {
    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => g.dropout(x, self.dropout, rng),
            _ => x,
        }
    }
}

impl Block {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        let std = 0.02;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            q: Linear::new(store, &format!("{name}.attn.q"), width, width, std, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), width, width, std, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), width, width, std, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), width, width, std, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), width, 4 * width, std, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), 4 * width, width, std, rng),
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        x: Var,
        layout: &AttnLayout,
        mode: &mut Mode<'_, R>,
    ) -> Var {
        let h = self.ln1.forward(store, g, x);
        let q = self.q.forward(store, g, h);
        let k = self.k.forward(store, g, h);
        let v = self.v.forward(store, g, h);
        let a = g.attention(q, k, v, layout.clone());
        let a = self.proj.forward(store, g, a);
        let a = mode.apply(g, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(store, g, x);
        let f = self.fc1.forward(store, g, h);
        let f = g.relu(f);
        let f = self.fc2.forward(store, g, f);
        let f = mode.apply(g, f);
        g.add(x, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store = ParamStore::new(Group::Policy);
        store.add("a", Tensor::zeros(2, 2));
        let mut bad = store.entries();
        bad[0].1 = Tensor::zeros(1, 4);
        assert!(store.load(&bad).is_err());
        let mut renamed = store.entries();
        renamed[0].0 = "b".into();
        assert!(store.load(&renamed).is_err());
        assert!(store.load(&store.entries()).is_ok());
    }

    #[test]
    fn shape_validation() {
        let ok = TransformerShape {
            width: 8,
            n_layers: 1,
            n_heads: 2,
            dropout: 0.1,
        };
        assert!(ok.validate().is_ok());
        assert!(TransformerShape { n_heads: 3, ..ok }.validate().is_err());
        assert!(TransformerShape { dropout: 1.0, ..ok }.validate().is_err());
    }

    #[test]
    fn linear_init_is_seeded() {
        let build = || {
            let mut s = ParamStore::new(Group::Encoder);
            Linear::new(&mut s, "l", 3, 4, 0.02, &mut rng::stream(1, 0, 0));
            s
        };
        assert_eq!(build(), build());
    }
}
