//! The language model: token + learned position embeddings, a stack of GAM
//! or transformer blocks, a final layer norm and an LM head tied to the
//! token embedding.

use serde::{Deserialize, Serialize};

use crate::gam::{gam_block_forward, GamBlockParams, GamVariant};
use crate::graph::{Graph, Mode, Var};
use crate::nn::{layer_norm, LayerNormParams, ParamId, ParamKind, ParamStore, INIT_STD};
use crate::tensor::rng_from_seed;
use crate::transformer::{transformer_block_forward, TransformerBlockParams};
use crate::{Error, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    #[default]
    Gam,
    Transformer,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Gam => "gam",
            Arch::Transformer => "transformer",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gam" => Ok(Arch::Gam),
            "transformer" => Ok(Arch::Transformer),
            _ => Err(Error::Config(format!("unknown architecture {s:?}"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Model hyperparameters. Defaults are the reference 6-layer configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Ignored by the transformer.
    pub variant: GamVariant,
    pub vocab_size: usize,
    /// Longest sequence the position table covers.
    pub block_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub num_slots: usize,
    pub kernel_size: usize,
    pub n_head: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Gam,
            variant: GamVariant::Full,
            vocab_size: 10_000,
            block_size: 256,
            d_model: 512,
            n_layers: 6,
            num_slots: 512,
            kernel_size: 3,
            n_head: 8,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn reference(arch: Arch) -> Self {
        ModelConfig {
            arch,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("block_size", self.block_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::Config("vocab_size exceeds the u32 id range".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        match self.arch {
            Arch::Gam => {
                if self.variant.has_global() && self.num_slots == 0 {
                    return Err(Error::Config("num_slots must be positive".into()));
                }
                if self.variant.has_local() && self.kernel_size == 0 {
                    return Err(Error::Config("kernel_size must be positive".into()));
                }
            }
            Arch::Transformer => {
                if self.n_head == 0 || !self.d_model.is_multiple_of(self.n_head) {
                    return Err(Error::Config(format!(
                        "d_model {} is not divisible by n_head {}",
                        self.d_model, self.n_head
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Gam(GamBlockParams),
    Transformer(TransformerBlockParams),
}

impl Block {
    pub fn param_count(&self) -> usize {
        match self {
            Block::Gam(p) => p.param_count(),
            Block::Transformer(p) => p.param_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// `[V, d]`; also the LM head.
    pub tok_emb: ParamId,
    /// `[block_size, d]`.
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNormParams,
}

/// Name of the shared token-embedding / LM-head tensor.
pub const TOKEN_EMBEDDING: &str = "tok_emb";

impl<T: Scalar> Model<T> {
    /// Allocates and initializes every parameter; deterministic per seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = rng_from_seed(c.seed);
        let mut params = ParamStore::new();
        let tok_emb = params.add(
            TOKEN_EMBEDDING,
            ParamKind::Weight,
            Tensor::randn(&[c.vocab_size, c.d_model], 0.0, INIT_STD, &mut rng),
        );
        let pos_emb = params.add(
            "pos_emb",
            ParamKind::Weight,
            Tensor::randn(&[c.block_size, c.d_model], 0.0, INIT_STD, &mut rng),
        );
        let mut blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let name = format!("blocks.{l}");
            blocks.push(match c.arch {
                Arch::Gam => Block::Gam(GamBlockParams::init(
                    &mut params,
                    &name,
                    c.d_model,
                    c.num_slots,
                    c.kernel_size,
                    c.variant,
                    &mut rng,
                )),
                Arch::Transformer => Block::Transformer(TransformerBlockParams::init(
                    &mut params,
                    &name,
                    c.d_model,
                    c.n_head,
                    &mut rng,
                )?),
            });
        }
        let final_ln = LayerNormParams::init(&mut params, "final_ln", c.d_model);
        Ok(Model {
            config,
            params,
            tok_emb,
            pos_emb,
            blocks,
            final_ln,
        })
    }

    /// Distinct trainable scalars; the tied head is counted once.
    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Same structure with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            blocks: self.blocks.clone(),
            final_ln: self.final_ln.clone(),
        }
    }

    /// A fresh graph with this model's parameters bound.
    pub fn graph(&self, mode: Mode, requires_grad: bool) -> Graph<'_, T> {
        let mut g = Graph::new(mode);
        g.bind(&self.params, requires_grad);
        g
    }

    fn dropout_rate(&self, g: &Graph<'_, T>) -> f64 {
        if g.is_train() {
            self.config.dropout
        } else {
            0.0
        }
    }

    /// Hidden states after the final layer norm, `[B, N, d]`, for row-major
    /// `[B, N]` ids. `g` must come from [`Model::graph`].
    pub fn hidden(&self, g: &mut Graph<'_, T>, ids: &[u32], batch: usize) -> Result<Var> {
        if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) {
            return Err(Error::Input(format!(
                "{} ids do not form {batch} equal rows",
                ids.len()
            )));
        }
        let n = ids.len() / batch;
        if n > self.config.block_size {
            return Err(Error::SequenceLength {
                len: n,
                max: self.config.block_size,
            });
        }
        let p = self.dropout_rate(g);
        let tok = g.embedding(g.param(self.tok_emb), ids, &[batch, n])?;
        let pos = g.slice_rows(g.param(self.pos_emb), 0, n)?;
        let mut x = g.add(tok, pos)?;
        x = g.dropout(x, p)?;
        for block in &self.blocks {
            x = match block {
                Block::Gam(b) => gam_block_forward(g, b, x, p)?,
                Block::Transformer(b) => transformer_block_forward(g, b, x, p)?,
            };
        }
        layer_norm(g, &self.final_ln, x)
    }

    /// Logits `[B, N, V]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, ids: &[u32], batch: usize) -> Result<Var> {
        let h = self.hidden(g, ids, batch)?;
        g.matmul_nt(h, g.param(self.tok_emb))
    }

    /// Mean next-token cross-entropy of `batch` rows of `N + 1` tokens each.
    pub fn loss(&self, g: &mut Graph<'_, T>, chunks: &[u32], batch: usize) -> Result<Var> {
        if batch == 0 || !chunks.len().is_multiple_of(batch) || chunks.len() / batch < 2 {
            return Err(Error::Input(format!(
                "{} tokens do not form {batch} chunks of at least 2",
                chunks.len()
            )));
        }
        let row = chunks.len() / batch;
        let mut inputs = Vec::with_capacity(batch * (row - 1));
        let mut targets = Vec::with_capacity(batch * (row - 1));
        for c in chunks.chunks(row) {
            inputs.extend_from_slice(&c[..row - 1]);
            targets.extend_from_slice(&c[1..]);
        }
        let logits = self.forward(g, &inputs, batch)?;
        g.cross_entropy(logits, &targets)
    }

    /// Eval-mode logits as a plain tensor.
    pub fn logits(&self, ids: &[u32], batch: usize) -> Result<Tensor<T>> {
        let mut g = self.graph(Mode::Eval, false);
        let y = self.forward(&mut g, ids, batch)?;
        Ok(g.value(y).clone())
    }

    /// Eval-mode loss of one batch.
    pub fn eval_loss(&self, chunks: &[u32], batch: usize) -> Result<f64> {
        let mut g = self.graph(Mode::Eval, false);
        let l = self.loss(&mut g, chunks, batch)?;
        Ok(g.value(l).item().as_f64())
    }

    /// Appends the argmax of the last position's logits `n_new` times.
    pub fn generate_greedy(&self, prompt: &[u32], n_new: usize) -> Result<Vec<u32>> {
        let total = prompt.len() + n_new;
        if total > self.config.block_size {
            return Err(Error::SequenceLength {
                len: total,
                max: self.config.block_size,
            });
        }
        let mut ids = prompt.to_vec();
        if n_new > 0 && ids.is_empty() {
            return Err(Error::Input("generation needs a non-empty prompt".into()));
        }
        let v = self.config.vocab_size;
        for _ in 0..n_new {
            let logits = self.logits(&ids, 1)?;
            let last = &logits.data()[(ids.len() - 1) * v..];
            let mut best = 0;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            ids.push(best as u32);
        }
        Ok(ids)
    }
}
