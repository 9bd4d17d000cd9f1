//! Parameterized building blocks shared by the language model and the scene
//! encoder.

use rand::RngCore;

use crate::attention::AttentionSpec;
use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Uniform(f64),
    Zeros,
    Ones,
}

/// Creates fresh parameters (when holding an RNG) or binds to parameters
/// already present in a store, checking their shapes.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Builder<'a> {
    pub fn fresh(store: &'a mut ParamStore, rng: &'a mut dyn RngCore) -> Self {
        Self {
            store,
            rng: Some(rng),
        }
    }

    pub fn bind(store: &'a mut ParamStore) -> Self {
        Self { store, rng: None }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let t = match init {
                    Init::FanIn(fan_in) => {
                        Tensor::uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
                    }
                    Init::Uniform(bound) => Tensor::uniform(shape, bound, rng),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, 1.0),
                };
                self.store.insert(name, t)
            }
            None => {
                let id = self.store.id(name)?;
                let have = self.store.value(id).shape();
                if have != shape {
                    return Err(NnError::ShapeMismatch {
                        op: "bind",
                        lhs: have.to_vec(),
                        rhs: shape.to_vec(),
                    });
                }
                Ok(id)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(b, name, in_dim, out_dim, bias, Init::FanIn(in_dim))
    }

    pub fn with_init(
        b: &mut Builder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = b.tensor(&format!("{name}.w"), &[in_dim, out_dim], init)?;
        let bias = if bias {
            Some(b.tensor(&format!("{name}.b"), &[1, out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
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
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: b.tensor(&format!("{name}.g"), &[1, dim], Init::Ones)?,
            bias: b.tensor(&format!("{name}.b"), &[1, dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        g.layer_norm(x, gain, bias)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))` followed by
/// `h + ff(ln(h))` with a GELU feed-forward of width `ff_mult * dim`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    pub fn new(b: &mut Builder, name: &str, dim: usize, ff_mult: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim)?,
            q: Linear::new(b, &format!("{name}.attn.q"), dim, dim, true)?,
            k: Linear::new(b, &format!("{name}.attn.k"), dim, dim, true)?,
            v: Linear::new(b, &format!("{name}.attn.v"), dim, dim, true)?,
            o: Linear::new(b, &format!("{name}.attn.o"), dim, dim, true)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim)?,
            ff1: Linear::new(b, &format!("{name}.ff1"), dim, dim * ff_mult, true)?,
            ff2: Linear::new(b, &format!("{name}.ff2"), dim * ff_mult, dim, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, spec: &AttentionSpec) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let q = self.q.forward(g, store, h)?;
        let k = self.k.forward(g, store, h)?;
        let v = self.v.forward(g, store, h)?;
        let a = g.attention(q, k, v, spec.clone())?;
        let a = self.o.forward(g, store, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.ff1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.ff2.forward(g, store, h)?;
        g.add(x, h)
    }
}
