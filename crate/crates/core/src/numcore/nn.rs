//! Small layer helpers built on [`Graph`].

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Affine map over the last axis: `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::ShapeMismatch { op: "linear", lhs: shape, rhs: vec![self.in_dim, self.out_dim] });
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = g.reshape(x, &[rows, self.in_dim])?;
        let w = g.param(self.weight);
        let mut y = g.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.add_bias(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.reshape(y, &out_shape)
    }
}

/// Same-padded convolution over `[C, H, W]` maps.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add_uniform(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], fan_in, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), &[out_ch], fan_in, rng));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b)
    }
}

/// Scaled dot-product attention split over `heads`.
///
/// `q: [B, Tq, D]`, `k, v: [B, Tk, D]`; `key_valid`, when given, is `[B, Tk]`
/// and removes keys from every query's softmax. Returns `[B, Tq, D]`.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, key_valid: Option<&Tensor>) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || g.shape(v) != ks.as_slice() {
        return Err(Error::ShapeMismatch { op: "attention", lhs: qs, rhs: ks });
    }
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid("attention", format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |g: &mut Graph, x: Var, t: usize| -> Result<Var> {
        let x = g.reshape(x, &[b, t, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * heads, t, dh])
    };
    let qh = split(g, q, tq)?;
    let kh = split(g, k, tk)?;
    let vh = split(g, v, tk)?;
    let kt = g.transpose(kh)?;
    let scores = g.bmm(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = match key_valid {
        Some(mask) => {
            if mask.shape() != [b, tk] {
                return Err(Error::ShapeMismatch {
                    op: "attention mask",
                    lhs: vec![b, tk],
                    rhs: mask.shape().to_vec(),
                });
            }
            let full = Tensor::from_fn(&[b * heads, tq, tk], |i| {
                let bi = i / (heads * tq * tk);
                mask.data()[bi * tk + i % tk]
            });
            g.masked_softmax(scores, &full)?
        }
        None => g.softmax(scores),
    };
    let out = g.bmm(weights, vh)?;
    let out = g.reshape(out, &[b, heads, tq, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    g.reshape(out, &[b, tq, d])
}

/// Query/key/value/output projections around [`attend`].
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Projects `query_dim`/`kv_dim` inputs to `model_dim`, and back to
    /// `out_dim`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        model_dim: usize,
        out_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads > 0 && model_dim.is_multiple_of(heads), "model_dim must be divisible by heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), query_dim, model_dim, true, rng),
            key: Linear::new(store, &format!("{name}.k"), kv_dim, model_dim, true, rng),
            value: Linear::new(store, &format!("{name}.v"), kv_dim, model_dim, true, rng),
            output: Linear::new(store, &format!("{name}.o"), model_dim, out_dim, true, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, query: Var, keys: Var, key_valid: Option<&Tensor>) -> Result<Var> {
        let q = self.query.forward(g, query)?;
        let k = self.key.forward(g, keys)?;
        let v = self.value.forward(g, keys)?;
        let a = attend(g, q, k, v, self.heads, key_valid)?;
        self.output.forward(g, a)
    }
}
