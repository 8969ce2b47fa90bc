//! The gated associative memory block.
//!
//! A pre-norm residual block whose mixing sub-layer has two pathways:
//!
//! * local: a depthwise causal convolution over the last `k` positions;
//! * global: soft retrieval from a learned memory bank `M` of `S` slots,
//!   `softmax(h M^T) M`, computed independently for every position.
//!
//! A per-token sigmoid gate blends the two before the residual add; the
//! ablation variants replace the gate by a plain sum or drop a pathway.
//! Every operation is linear in sequence length.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::nn::{
    ffn, layer_norm, linear, xavier_param, FfnParams, LayerNormParams, LinearParams, ParamId,
    ParamKind, ParamStore, INIT_STD,
};
use crate::tensor::InitRng;
use crate::{Error, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GamVariant {
    /// Both pathways, fused by the learned gate.
    #[default]
    Full,
    /// Both pathways, added without a gate.
    SumFusion,
    /// Memory retrieval only.
    GlobalOnly,
    /// Causal convolution only.
    LocalOnly,
}

impl GamVariant {
    pub const ALL: [GamVariant; 4] = [
        GamVariant::Full,
        GamVariant::SumFusion,
        GamVariant::GlobalOnly,
        GamVariant::LocalOnly,
    ];

    pub fn has_local(self) -> bool {
        self != GamVariant::GlobalOnly
    }

    pub fn has_global(self) -> bool {
        self != GamVariant::LocalOnly
    }

    pub fn has_gate(self) -> bool {
        self == GamVariant::Full
    }

    pub fn name(self) -> &'static str {
        match self {
            GamVariant::Full => "full",
            GamVariant::SumFusion => "sum_fusion",
            GamVariant::GlobalOnly => "global_only",
            GamVariant::LocalOnly => "local_only",
        }
    }
}

impl std::str::FromStr for GamVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GamVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown GAM variant {s:?}")))
    }
}

impl std::fmt::Display for GamVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Depthwise filter bank: one `k`-tap filter and one bias per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl ConvParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut InitRng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            Tensor::randn(&[channels, kernel], 0.0, INIT_STD, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            Tensor::zeros(&[channels]),
        );
        ConvParams {
            weight,
            bias,
            channels,
            kernel,
        }
    }

    pub fn param_count(&self) -> usize {
        self.channels * self.kernel + self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GamBlockParams {
    pub d_model: usize,
    pub num_slots: usize,
    pub variant: GamVariant,
    pub ln1: LayerNormParams,
    pub conv: Option<ConvParams>,
    /// Memory bank `M`, `[num_slots, d_model]`.
    pub memory: Option<ParamId>,
    /// `d -> 2d` gate projection; first half gates the local path.
    pub gate: Option<LinearParams>,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

impl GamBlockParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        num_slots: usize,
        kernel: usize,
        variant: GamVariant,
        rng: &mut InitRng,
    ) -> Self {
        let ln1 = LayerNormParams::init(store, &format!("{name}.ln1"), d_model);
        let conv = variant
            .has_local()
            .then(|| ConvParams::init(store, &format!("{name}.conv"), d_model, kernel, rng));
        let memory = variant
            .has_global()
            .then(|| xavier_param(store, &format!("{name}.memory"), &[num_slots, d_model], rng));
        let gate = variant.has_gate().then(|| {
            LinearParams::init(
                store,
                &format!("{name}.gate"),
                d_model,
                2 * d_model,
                true,
                rng,
            )
        });
        let ln2 = LayerNormParams::init(store, &format!("{name}.ln2"), d_model);
        let ffn = FfnParams::init(store, &format!("{name}.ffn"), d_model, 4 * d_model, rng);
        GamBlockParams {
            d_model,
            num_slots,
            variant,
            ln1,
            conv,
            memory,
            gate,
            ln2,
            ffn,
        }
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        4 * d
            + self.conv.as_ref().map_or(0, ConvParams::param_count)
            + self.memory.map_or(0, |_| self.num_slots * d)
            + self.gate.as_ref().map_or(0, LinearParams::param_count)
            + self.ffn.param_count()
    }
}

/// `y[b,t,c] = bias[c] + sum_i w[c,i] x[b, t-(k-1)+i, c]` with zero padding on
/// the left, so position `t` sees only positions `<= t`.
///
/// Equivalent to left-padding by `k-1`, convolving with `groups = d`, and
/// keeping the first `N` outputs.
pub fn causal_depthwise_conv1d<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &ConvParams,
    x: Var,
) -> Result<Var> {
    let d = *g.shape(x).last().expect("rank >= 1");
    if d != p.channels {
        return Err(Error::dim(
            "causal_depthwise_conv1d",
            g.shape(x),
            &[p.channels, p.kernel],
        ));
    }
    g.causal_conv1d(x, g.param(p.weight), g.param(p.bias))
}

/// Soft retrieval from a memory bank `[S, d]` for every position of `x`.
///
/// Returns `(global, weights)`: `weights = softmax(x M^T)` over the slot
/// axis and `global = weights M`.
pub fn memory_retrieve<T: Scalar>(g: &mut Graph<'_, T>, memory: Var, x: Var) -> Result<(Var, Var)> {
    let (sm, sx) = (g.shape(memory), g.shape(x));
    if sm.len() != 2 || sx.last() != sm.last() {
        return Err(Error::dim("memory_retrieve", sx, sm));
    }
    let scores = g.matmul_nt(x, memory)?;
    let weights = g.softmax(scores)?;
    let global = g.matmul(weights, memory)?;
    Ok((global, weights))
}

/// `sigmoid(g_local) * local + sigmoid(g_global) * global` where
/// `[g_local | g_global] = gate(x)`.
pub fn gated_fusion<T: Scalar>(
    g: &mut Graph<'_, T>,
    gate: &LinearParams,
    x: Var,
    local: Var,
    global: Var,
) -> Result<Var> {
    if gate.out_dim != 2 * gate.in_dim {
        return Err(Error::Contract(format!(
            "gate must map d -> 2d, got {} -> {}",
            gate.in_dim, gate.out_dim
        )));
    }
    if g.shape(local) != g.shape(global) || g.shape(local) != g.shape(x) {
        return Err(Error::dim("gated_fusion", g.shape(local), g.shape(global)));
    }
    let d = gate.in_dim;
    let gv = linear(g, gate, x)?;
    let gl = g.slice_last(gv, 0, d)?;
    let gg = g.slice_last(gv, d, d)?;
    let gl = g.sigmoid(gl);
    let gg = g.sigmoid(gg);
    let a = g.mul(gl, local)?;
    let b = g.mul(gg, global)?;
    g.add(a, b)
}

/// The mixing sub-layer on normalized input `h`.
pub fn gam_context<T: Scalar>(g: &mut Graph<'_, T>, p: &GamBlockParams, h: Var) -> Result<Var> {
    let local = match &p.conv {
        Some(conv) => Some(causal_depthwise_conv1d(g, conv, h)?),
        None => None,
    };
    let global = match p.memory {
        Some(m) => Some(memory_retrieve(g, g.param(m), h)?.0),
        None => None,
    };
    match (p.variant, local, global) {
        (GamVariant::Full, Some(l), Some(gl)) => {
            let gate = p.gate.as_ref().expect("full variant has a gate");
            gated_fusion(g, gate, h, l, gl)
        }
        (GamVariant::SumFusion, Some(l), Some(gl)) => g.add(l, gl),
        (GamVariant::GlobalOnly, None, Some(gl)) => Ok(gl),
        (GamVariant::LocalOnly, Some(l), None) => Ok(l),
        (v, ..) => Err(Error::Contract(format!(
            "parameters do not match variant {v}"
        ))),
    }
}

/// `y1 = x + dropout(context(LN1(x)))`, `y = y1 + dropout(FFN(LN2(y1)))`.
pub fn gam_block_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &GamBlockParams,
    x: Var,
    dropout: f64,
) -> Result<Var> {
    let h = layer_norm(g, &p.ln1, x)?;
    let ctx = gam_context(g, p, h)?;
    let ctx = g.dropout(ctx, dropout)?;
    let y1 = g.add(x, ctx)?;
    let h2 = layer_norm(g, &p.ln2, y1)?;
    let f = ffn(g, &p.ffn, h2, dropout)?;
    g.add(y1, f)
}
