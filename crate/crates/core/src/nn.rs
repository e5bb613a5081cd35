//! Layer definitions shared by the branches: parameter registration with
//! deterministic name-seeded initialization, and graph builders.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::arr::Arr;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::real::{rf, Real};
use crate::store::ParameterStore;

fn fnv64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG derived from the run seed and the parameter name, so initialization
/// does not depend on registration order.
pub fn init_rng(seed: u64, name: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed ^ fnv64(name))
}

/// Fan-in-scaled uniform values in (-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_uniform<T: Real>(seed: u64, name: &str, numel: usize, fan_in: usize) -> Vec<T> {
    let limit = (1.0 / fan_in as f64).sqrt();
    let mut rng = init_rng(seed, name);
    (0..numel)
        .map(|_| rf(rng.gen_range(-limit..limit)))
        .collect()
}

/// Overwrite every parameter with uniform values in (-0.5, 0.5); used by the
/// gradient-check harness so zero-initialized layers still carry signal.
pub fn randomize_store<T: Real>(store: &mut ParameterStore<T>, seed: u64) {
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    for name in names {
        let mut rng = init_rng(seed, &name);
        for v in store.value_mut(&name).unwrap().iter_mut() {
            *v = rf(rng.gen_range(-0.5..0.5));
        }
    }
}

/// Leaf-variable cache for one graph: each parameter becomes exactly one
/// leaf so gradients from repeated uses accumulate on a single node.
#[derive(Default)]
pub struct Leaves {
    map: BTreeMap<String, Var>,
}

impl Leaves {
    pub fn new() -> Self {
        Leaves {
            map: BTreeMap::new(),
        }
    }

    pub fn leaf<T: Real>(
        &mut self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        name: &str,
    ) -> Result<Var> {
        if let Some(&v) = self.map.get(name) {
            return Ok(v);
        }
        let shape = store.shape(name)?.to_vec();
        let var = g.leaf(Arr::new(shape, store.value(name)?.to_vec()));
        self.map.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }

    /// Accumulate every leaf's gradient into the store's gradient slots.
    pub fn apply_grads<T: Real>(
        &self,
        grads: &crate::graph::GradBuf<T>,
        store: &mut ParameterStore<T>,
    ) -> Result<()> {
        for (name, var) in &self.map {
            if let Some(g) = grads.get(*var) {
                store.accum_grad(name, g.data())?;
            }
        }
        Ok(())
    }
}

/// Same-padding 2-D convolution layer description.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, k: usize) -> Self {
        Conv2d {
            name: name.into(),
            c_in,
            c_out,
            k,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}/w", self.name)
    }
    pub fn bias_name(&self) -> String {
        format!("{}/b", self.name)
    }

    pub fn register<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        seed: u64,
        zero_weights: bool,
    ) -> Result<()> {
        let wn = self.weight_name();
        let numel = self.c_out * self.c_in * self.k * self.k;
        let w = if zero_weights {
            vec![T::zero(); numel]
        } else {
            fan_in_uniform(seed, &wn, numel, self.c_in * self.k * self.k)
        };
        store.insert(&wn, vec![self.c_out, self.c_in, self.k, self.k], w)?;
        store.insert(
            &self.bias_name(),
            vec![self.c_out],
            vec![T::zero(); self.c_out],
        )?;
        Ok(())
    }

    pub fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        leaves: &mut Leaves,
        x: Var,
    ) -> Result<Var> {
        let w = leaves.leaf(g, store, &self.weight_name())?;
        let b = leaves.leaf(g, store, &self.bias_name())?;
        Ok(g.conv2d(x, w, b))
    }
}

/// Per-channel spatial RMS normalization with learnable gain.
#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub name: String,
    pub channels: usize,
}

impl RmsNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        RmsNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn gain_name(&self) -> String {
        format!("{}/gain", self.name)
    }

    pub fn register<T: Real>(&self, store: &mut ParameterStore<T>) -> Result<()> {
        store.insert(
            &self.gain_name(),
            vec![self.channels],
            vec![T::one(); self.channels],
        )
    }

    pub fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        leaves: &mut Leaves,
        x: Var,
    ) -> Result<Var> {
        let gain = leaves.leaf(g, store, &self.gain_name())?;
        Ok(g.rms_norm(x, gain, 1e-5))
    }
}

/// Dense layer y = Wx + b.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, n_in: usize, n_out: usize) -> Self {
        Linear {
            name: name.into(),
            n_in,
            n_out,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}/w", self.name)
    }
    pub fn bias_name(&self) -> String {
        format!("{}/b", self.name)
    }

    pub fn register<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        seed: u64,
        zero_weights: bool,
    ) -> Result<()> {
        let wn = self.weight_name();
        let numel = self.n_out * self.n_in;
        let w = if zero_weights {
            vec![T::zero(); numel]
        } else {
            fan_in_uniform(seed, &wn, numel, self.n_in)
        };
        store.insert(&wn, vec![self.n_out, self.n_in], w)?;
        store.insert(
            &self.bias_name(),
            vec![self.n_out],
            vec![T::zero(); self.n_out],
        )?;
        Ok(())
    }

    pub fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        leaves: &mut Leaves,
        x: Var,
    ) -> Result<Var> {
        let w = leaves.leaf(g, store, &self.weight_name())?;
        let b = leaves.leaf(g, store, &self.bias_name())?;
        Ok(g.linear(x, w, b))
    }
}

/// Two-layer perceptron with tanh hidden activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden_layer: Linear,
    pub out_layer: Linear,
}

impl Mlp {
    pub fn new(name: &str, n_in: usize, hidden: usize, n_out: usize) -> Self {
        Mlp {
            hidden_layer: Linear::new(format!("{name}/h"), n_in, hidden),
            out_layer: Linear::new(format!("{name}/o"), hidden, n_out),
        }
    }

    pub fn register<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        seed: u64,
        zero_out_layer: bool,
    ) -> Result<()> {
        self.hidden_layer.register(store, seed, false)?;
        self.out_layer.register(store, seed, zero_out_layer)
    }

    pub fn build<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        leaves: &mut Leaves,
        x: Var,
    ) -> Result<Var> {
        let h = self.hidden_layer.build(g, store, leaves, x)?;
        let a = g.tanh(h);
        self.out_layer.build(g, store, leaves, a)
    }
}
