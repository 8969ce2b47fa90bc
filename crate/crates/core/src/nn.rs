//! Parameter storage and the shared layers: linear, layer norm, embedding,
//! dropout, cross-entropy.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::{xavier_uniform_with, InitRng};
use crate::{Error, Result, Scalar, Tensor};

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation of the GPT-style normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter; decides whether weight decay applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered, named collection of trainable tensors.
///
/// A tensor shared by two layers (the tied embedding / LM head) is stored
/// once and referenced by the same [`ParamId`] from both places.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|e| &e.value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Number of distinct trainable scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearParams {
    /// Normal(0, 0.02) weights and zero bias.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut InitRng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::randn(&[in_dim, out_dim], 0.0, INIT_STD, rng),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[out_dim]),
            )
        });
        LinearParams {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub scale: ParamId,
    pub shift: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let scale = store.add(
            format!("{name}.scale"),
            ParamKind::Norm,
            Tensor::full(&[dim], T::one()),
        );
        let shift = store.add(
            format!("{name}.shift"),
            ParamKind::Norm,
            Tensor::zeros(&[dim]),
        );
        LayerNormParams {
            scale,
            shift,
            dim,
            eps: LN_EPS,
        }
    }
}

/// Xavier-uniform matrix parameter.
pub(crate) fn xavier_param<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    rng: &mut InitRng,
) -> ParamId {
    let t = xavier_uniform_with(shape, rng).expect("2-D shape");
    store.add(name, ParamKind::Weight, t)
}

/// `x W + b` over the last dimension.
pub fn linear<T: Scalar>(g: &mut Graph<'_, T>, p: &LinearParams, x: Var) -> Result<Var> {
    let last = *g.shape(x).last().expect("rank >= 1");
    if last != p.in_dim {
        return Err(Error::dim("linear", g.shape(x), &[p.in_dim, p.out_dim]));
    }
    let y = g.matmul(x, g.param(p.weight))?;
    match p.bias {
        Some(b) => g.add(y, g.param(b)),
        None => Ok(y),
    }
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, p: &LayerNormParams, x: Var) -> Result<Var> {
    let last = *g.shape(x).last().expect("rank >= 1");
    if last != p.dim {
        return Err(Error::dim("layer_norm", g.shape(x), &[p.dim]));
    }
    g.layer_norm(x, g.param(p.scale), g.param(p.shift), p.eps)
}

/// Row gather from a `[V, d]` table for a `[B, N]` id grid.
pub fn embedding_lookup<T: Scalar>(
    g: &mut Graph<'_, T>,
    table: Var,
    ids: &[u32],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    g.embedding(table, ids, &[batch, seq])
}

pub fn dropout<T: Scalar>(g: &mut Graph<'_, T>, x: Var, rate: f64) -> Result<Var> {
    g.dropout(x, rate)
}

/// Mean token cross-entropy of `[B, N, V]` logits against `[B, N]` targets.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, targets: &[u32]) -> Result<Var> {
    g.cross_entropy(logits, targets)
}

/// Position-wise feed-forward network: `dropout(W2 gelu(W1 x + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub fc_in: LinearParams,
    pub fc_out: LinearParams,
}

impl FfnParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut InitRng,
    ) -> Self {
        FfnParams {
            fc_in: LinearParams::init(store, &format!("{name}.fc_in"), d, hidden, true, rng),
            fc_out: LinearParams::init(store, &format!("{name}.fc_out"), hidden, d, true, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.fc_in.param_count() + self.fc_out.param_count()
    }
}

pub fn ffn<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &FfnParams,
    x: Var,
    dropout_rate: f64,
) -> Result<Var> {
    let h = linear(g, &p.fc_in, x)?;
    let h = g.gelu(h);
    let y = linear(g, &p.fc_out, h)?;
    g.dropout(y, dropout_rate)
}
