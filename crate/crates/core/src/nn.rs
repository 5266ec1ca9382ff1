//! Named parameter storage and the small layers the model is assembled from.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numkit::{Graph, NumError, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Overwrites the tensor stored under `name`; shapes must agree.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<(), NumError> {
        let &i = self.index.get(name).ok_or(NumError::Empty { op: "set: unknown parameter" })?;
        if self.tensors[i].shape() != tensor.shape() {
            return Err(NumError::Dimension { op: "set", lhs: self.tensors[i].shape().to_vec(), rhs: tensor.shape().to_vec() });
        }
        self.tensors[i] = tensor.with_requires_grad(true);
        Ok(())
    }

    /// Places every parameter on the tape, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Binding { vars }
    }

    /// `p ← p − lr·grad` for every parameter, in storage order.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), self.tensors.len());
        for (p, g) in self.tensors.iter_mut().zip(grads) {
            for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * d;
            }
        }
    }
}

/// Tape variables for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Seeded initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("positive shape")
    }

    /// Glorot uniform bound for the given fan-in and fan-out.
    pub fn xavier(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        self.uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    /// He uniform bound for ReLU layers.
    pub fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.uniform(shape, (6.0 / fan_in as f64).sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(&[fan_in, fan_out], fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var, NumError> {
        let y = g.matmul(x, b.var(self.weight))?;
        g.add_row(y, b.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var, NumError> {
        g.layer_norm(x, b.var(self.gamma), b.var(self.beta), LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        let kernels = store.add(format!("{name}.kernels"), init.kaiming(&[c_out, c_in, k, k], fan_in));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { kernels, bias, stride, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var, NumError> {
        let y = g.conv2d(x, b.var(self.kernels), self.stride, self.pad)?;
        g.add_channel(y, b.var(self.bias))
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var, NumError> {
        let h = self.fc1.forward(g, b, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, b, h)
    }
}

/// Scaled dot-product attention on already projected inputs.
///
/// `allowed`, when given, is a row-major `N_q × M` boolean matrix; disallowed
/// keys receive exactly zero weight. Returns the attended values and the
/// weight matrix.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    allowed: Option<&[bool]>,
) -> Result<(Var, Var), NumError> {
    let d = g.shape(q)[1];
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = match allowed {
        Some(mask) => g.masked_softmax(scores, mask)?,
        None => g.softmax(scores, 1)?,
    };
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Output of an attention layer together with the per-head weight matrices.
pub struct AttentionOut {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, init, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    /// `query_in: N_q×D`, `key_in`/`value_in: M×D`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binding,
        query_in: Var,
        key_in: Var,
        value_in: Var,
        allowed: Option<&[bool]>,
    ) -> Result<AttentionOut, NumError> {
        let q = self.q.forward(g, b, query_in)?;
        let k = self.k.forward(g, b, key_in)?;
        let v = self.v.forward(g, b, value_in)?;
        let dim = g.shape(q)[1];
        let (out, weights) = if self.heads == 1 {
            let (o, w) = scaled_dot_attention(g, q, k, v, allowed)?;
            (o, vec![w])
        } else {
            let dh = dim / self.heads;
            let mut outs = Vec::with_capacity(self.heads);
            let mut weights = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
                let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
                let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
                let (o, w) = scaled_dot_attention(g, qh, kh, vh, allowed)?;
                outs.push(o);
                weights.push(w);
            }
            (g.concat_cols(&outs)?, weights)
        };
        let out = self.o.forward(g, b, out)?;
        Ok(AttentionOut { out, weights })
    }
}

/// Flattens a `C×H×W` map into `H·W` tokens of width `C`.
pub fn map_to_tokens(g: &mut Graph, x: Var) -> Result<Var, NumError> {
    let (c, h, w) = match g.shape(x) {
        &[c, h, w] => (c, h, w),
        s => return Err(NumError::Rank { op: "map_to_tokens", expected: 3, shape: s.to_vec() }),
    };
    let flat = g.reshape(x, &[c, h * w])?;
    g.transpose(flat)
}

/// Inverse of [`map_to_tokens`].
pub fn tokens_to_map(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var, NumError> {
    let t = g.transpose(x)?;
    let c = g.shape(t)[0];
    g.reshape(t, &[c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trips_names_and_rejects_shape_change() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let lin = Linear::new(&mut store, &mut init, "head", 3, 2);
        assert_eq!(store.len(), 2);
        assert_eq!(store.id_of("head.weight"), Some(lin.weight));
        assert!(store.set("head.bias", Tensor::zeros(&[3])).is_err());
        assert!(store.set("head.bias", Tensor::ones(&[2])).is_ok());
        assert_eq!(store.get(lin.bias).data(), &[1.0, 1.0]);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let attn = Attention::new(&mut store, &mut init, "a", 8, 2);
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let q = g.constant(init.uniform(&[3, 8], 1.0));
        let kv = g.constant(init.uniform(&[5, 8], 1.0));
        let res = attn.forward(&mut g, &b, q, kv, kv, None).unwrap();
        assert_eq!(g.shape(res.out), &[3, 8]);
        for w in res.weights {
            for row in g.value(w).data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn token_map_round_trip() {
        let mut init = Init::new(2);
        let mut g = Graph::new();
        let x = g.constant(init.uniform(&[4, 2, 3], 1.0));
        let t = map_to_tokens(&mut g, x).unwrap();
        assert_eq!(g.shape(t), &[6, 4]);
        assert_eq!(g.value(t).get2(5, 1), g.value(x).get3(1, 1, 2));
        let back = tokens_to_map(&mut g, t, 2, 3).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }
}
