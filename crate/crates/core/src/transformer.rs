//! GPT-style pre-norm decoder block: causal multi-head self-attention
//! followed by the position-wise FFN.
//!
//! Attention scores are materialized as full `N x N` matrices per head; the
//! scaling benchmark measures exactly that cost.

use crate::graph::{Graph, Var};
use crate::nn::{ffn, layer_norm, linear, FfnParams, LayerNormParams, LinearParams, ParamStore};
use crate::tensor::InitRng;
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlockParams {
    pub d_model: usize,
    pub n_head: usize,
    pub ln1: LayerNormParams,
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

impl TransformerBlockParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        n_head: usize,
        rng: &mut InitRng,
    ) -> Result<Self> {
        if n_head == 0 || !d_model.is_multiple_of(n_head) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_head {n_head}"
            )));
        }
        let lin = |store: &mut ParamStore<T>, rng: &mut InitRng, part: &str| {
            LinearParams::init(
                store,
                &format!("{name}.attn.{part}"),
                d_model,
                d_model,
                true,
                rng,
            )
        };
        let ln1 = LayerNormParams::init(store, &format!("{name}.ln1"), d_model);
        let wq = lin(store, rng, "wq");
        let wk = lin(store, rng, "wk");
        let wv = lin(store, rng, "wv");
        let wo = lin(store, rng, "wo");
        let ln2 = LayerNormParams::init(store, &format!("{name}.ln2"), d_model);
        let ffn = FfnParams::init(store, &format!("{name}.ffn"), d_model, 4 * d_model, rng);
        Ok(TransformerBlockParams {
            d_model,
            n_head,
            ln1,
            wq,
            wk,
            wv,
            wo,
            ln2,
            ffn,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn param_count(&self) -> usize {
        4 * self.d_model
            + [&self.wq, &self.wk, &self.wv, &self.wo]
                .iter()
                .map(|l| l.param_count())
                .sum::<usize>()
            + self.ffn.param_count()
    }
}

/// Causal multi-head attention on normalized input `h: [B, N, d]`.
///
/// Returns `(output, weights)` with `weights: [B, H, N, N]` taken after the
/// causal softmax and before dropout.
pub fn causal_mha<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &TransformerBlockParams,
    h: Var,
    dropout: f64,
) -> Result<(Var, Var)> {
    if g.shape(h).len() != 3 {
        return Err(Error::dim("causal_mha", g.shape(h), &[0, 0, p.d_model]));
    }
    let q = linear(g, &p.wq, h)?;
    let k = linear(g, &p.wk, h)?;
    let v = linear(g, &p.wv, h)?;
    let q = g.split_heads(q, p.n_head)?;
    let k = g.split_heads(k, p.n_head)?;
    let v = g.split_heads(v, p.n_head)?;
    let scores = g.matmul_nt(q, k)?;
    let weights = g.causal_softmax(scores, 1.0 / (p.head_dim() as f64).sqrt())?;
    let att = g.dropout(weights, dropout)?;
    let ctx = g.matmul(att, v)?;
    let ctx = g.merge_heads(ctx)?;
    Ok((linear(g, &p.wo, ctx)?, weights))
}

/// `y1 = x + dropout(MHA(LN1(x)))`, `y = y1 + dropout(FFN(LN2(y1)))`.
pub fn transformer_block_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &TransformerBlockParams,
    x: Var,
    dropout: f64,
) -> Result<Var> {
    let h = layer_norm(g, &p.ln1, x)?;
    let (a, _) = causal_mha(g, p, h, dropout)?;
    let a = g.dropout(a, dropout)?;
    let y1 = g.add(x, a)?;
    let h2 = layer_norm(g, &p.ln2, y1)?;
    let f = ffn(g, &p.ffn, h2, dropout)?;
    g.add(y1, f)
}
