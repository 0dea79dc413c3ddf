//! Parameterised layers built on the tape. Each layer stores only parameter
//! ids; weights live in the shared `ParamStore`.

use crate::error::{Error, Result};
use crate::tensor::{attention_mask, Graph, ParamId, ParamStore, Scalar, SeededRng, Tensor, Var};

/// Registers parameters under a dotted prefix with deterministic init.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut SeededRng,
    pub std: f64,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut SeededRng, std: f64, prefix: &str) -> Self {
        Self {
            store,
            rng,
            std,
            prefix: prefix.to_string(),
        }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, T>) -> R) -> R {
        let mut inner = Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            std: self.std,
            prefix: format!("{}.{name}", self.prefix),
        };
        f(&mut inner)
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        let t = self.rng.normal_tensor(shape, self.std);
        self.store.add(self.name(leaf), t, true)
    }

    pub fn tensor(&mut self, leaf: &str, t: Tensor<T>) -> ParamId {
        self.store.add(self.name(leaf), t, true)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        self.tensor(leaf, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        self.tensor(leaf, Tensor::full(shape, T::one()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, input: usize, output: usize) -> Self {
        Self {
            w: b.normal(&format!("w{name}"), &[input, output]),
            b: Some(b.zeros(&format!("b{name}"), &[1, output])),
        }
    }

    pub fn no_bias<T: Scalar>(b: &mut Builder<'_, T>, name: &str, input: usize, output: usize) -> Self {
        Self {
            w: b.normal(&format!("w{name}"), &[input, output]),
            b: None,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(s, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Self {
        b.scope(name, |b| Self {
            gain: b.ones("gain", &[1, dim]),
            bias: b.zeros("bias", &[1, dim]),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(s, self.gain);
        let bias = g.param(s, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer GELU feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, input: usize, hidden: usize, output: usize) -> Self {
        b.scope(name, |b| Self {
            l1: Linear::new(b, "1", input, hidden),
            l2: Linear::new(b, "2", hidden, output),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, s, x)?;
        let h = g.gelu(h);
        self.l2.forward(g, s, h)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(b.scope(name, |b| Self {
            q: Linear::new(b, "q", dim, dim),
            // a key bias adds the same amount to every score in a row, so
            // softmax cancels it
            k: Linear::no_bias(b, "k", dim, dim),
            v: Linear::new(b, "v", dim, dim),
            o: Linear::new(b, "o", dim, dim),
            heads,
            dim,
        }))
    }

    /// `mask` is additive with shape `[queries, keys]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        queries: Var,
        keys: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let q = self.q.forward(g, s, queries)?;
        let k = self.k.forward(g, s, keys)?;
        let v = self.v.forward(g, s, keys)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_masked(scores, mask)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.o.forward(g, s, joined)
    }
}

/// Pre-norm transformer block: self-attention then FFN, both residual.
#[derive(Debug, Clone, Copy)]
pub struct PreNormBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

impl PreNormBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                ln1: LayerNorm::new(b, "ln1", dim),
                attn: Attention::new(b, "attn", dim, heads)?,
                ln2: LayerNorm::new(b, "ln2", dim),
                ffn: Ffn::new(b, "ffn", dim, hidden, dim),
            })
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, s, x)?;
        let a = self.attn.forward(g, s, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, s, x)?;
        let f = self.ffn.forward(g, s, h)?;
        g.add(x, f)
    }
}

/// Mask blocking `blocked` keys, or `None` when nothing is blocked.
pub fn key_mask<T: Scalar>(queries: usize, blocked: &[bool]) -> Option<Tensor<T>> {
    attention_mask(queries, blocked.len(), Some(blocked), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_dotted() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(0);
        let mut b = Builder::new(&mut store, &mut rng, 0.02, "docformer");
        b.scope("block0", |b| Ffn::new(b, "ffn", 4, 8, 4));
        let names: Vec<_> = store.iter().map(|(_, p)| p.name.clone()).collect();
        assert_eq!(
            names,
            ["docformer.block0.ffn.w1", "docformer.block0.ffn.b1", "docformer.block0.ffn.w2", "docformer.block0.ffn.b2"]
        );
    }

    #[test]
    fn attention_rejects_uneven_heads() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(0);
        let mut b = Builder::new(&mut store, &mut rng, 0.02, "x");
        assert!(Attention::new(&mut b, "a", 6, 4).is_err());
    }

    #[test]
    fn masked_keys_do_not_matter() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(4);
        let attn = {
            let mut b = Builder::new(&mut store, &mut rng, 0.5, "x");
            Attention::new(&mut b, "a", 4, 2).unwrap()
        };
        let q = rng.normal_tensor::<f64>(&[3, 4], 1.0);
        let k = rng.normal_tensor::<f64>(&[2, 4], 1.0);
        let mut g = Graph::new();
        let qv = g.constant(q.clone());
        let kv = g.constant(k.clone());
        let base = attn.forward(&mut g, &store, qv, kv, None).unwrap();
        let base = g.value(base).clone();

        let mut padded = k.data().to_vec();
        padded.extend(rng.normal_tensor::<f64>(&[1, 4], 3.0).data());
        let kp = Tensor::matrix(3, 4, padded).unwrap();
        let mask = key_mask::<f64>(3, &[false, false, true]);
        let mut g = Graph::new();
        let qv = g.constant(q);
        let kv = g.constant(kp);
        let out = attn.forward(&mut g, &store, qv, kv, mask.as_ref()).unwrap();
        assert!(g.value(out).max_abs_diff(&base) < 1e-12);
    }
}
