//! A small decoder-only transformer with reverse-mode differentiation, plus
//! the post-hoc modification that replaces chosen blocks with per-column
//! expert vectors routed by column identity.
//!
//! Expert routing is hard and positional: the token at position `t` is
//! processed by expert `column_ids[t]` at every expert site. Experts are
//! initialized as deep copies of the block they replace, so a freshly
//! converted model computes exactly what the base model computes.

mod checkpoint;
mod layers;
mod loss;
mod params;
mod scalar;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, Checkpoint, CheckpointError,
    CheckpointManifest, TensorEntry,
};
pub use params::{Param1, Param2, ParamMut, ParamRef};
pub use scalar::Scalar;

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use layers::{AttnUnit, Attention, LayerNorm, Linear, LnCache, MlpUnit, SeqCtx, Site, SiteCache, Unit};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("model already has expert sites")]
    AlreadyTabby,
    #[error("invalid expert spec: {0}")]
    Spec(String),
    #[error("token id {0} outside vocabulary of size {1}")]
    TokenRange(usize, usize),
    #[error("column id {0} out of range for {1} experts")]
    ColumnRange(usize, usize),
    #[error("sequence length {0} exceeds context length {1}")]
    ContextOverflow(usize, usize),
    #[error("no supervised tokens")]
    NoSupervisedTokens,
    #[error("batch arrays have mismatched shapes")]
    ShapeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_attn_heads: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults, CPU-trainable in minutes.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            context_length: 256,
            d_model: 64,
            n_layers: 2,
            n_attn_heads: 4,
            d_ff: 256,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::Config(msg.to_string()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.context_length == 0 {
            return bad("context_length must be positive");
        }
        if self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("model dimensions must be positive");
        }
        if self.n_attn_heads == 0 || self.d_model % self.n_attn_heads != 0 {
            return bad("d_model must be divisible by n_attn_heads");
        }
        Ok(())
    }
}

/// Which blocks become per-column expert vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoeSite {
    LmHead,
    Mlp,
    Attention,
}

/// Expert configuration: the sites to convert, the expert count (one per
/// data column), and which sites share a single set of expert tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeSpec {
    pub sites: BTreeSet<MoeSite>,
    pub n_experts: usize,
    #[serde(default)]
    pub shared: BTreeSet<MoeSite>,
}

impl MoeSpec {
    pub fn new(sites: impl IntoIterator<Item = MoeSite>, n_experts: usize) -> Self {
        MoeSpec {
            sites: sites.into_iter().collect(),
            n_experts,
            shared: BTreeSet::new(),
        }
    }

    /// Expert vector at the output head only.
    pub fn mh(n_experts: usize) -> Self {
        Self::new([MoeSite::LmHead], n_experts)
    }

    /// Expert vectors at every transformer MLP.
    pub fn mmlp(n_experts: usize) -> Self {
        Self::new([MoeSite::Mlp], n_experts)
    }

    /// Expert vectors at every attention block.
    pub fn ma(n_experts: usize) -> Self {
        Self::new([MoeSite::Attention], n_experts)
    }

    /// MLP experts plus head experts.
    pub fn mmlp_mh(n_experts: usize) -> Self {
        Self::new([MoeSite::Mlp, MoeSite::LmHead], n_experts)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sites.is_empty() {
            return Err(ModelError::Spec("no expert sites".into()));
        }
        if self.n_experts == 0 {
            return Err(ModelError::Spec("n_experts must be positive".into()));
        }
        if !self.shared.is_subset(&self.sites) {
            return Err(ModelError::Spec("shared sites must be expert sites".into()));
        }
        Ok(())
    }
}

/// Whether a forward pass keeps activations for a later backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// One training batch: token ids, per-token column ids, a mask over
/// supervised target tokens, and padding flags. All `(batch, seq)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Array2<usize>,
    pub column_ids: Array2<usize>,
    /// `true` where the token is a supervised prediction target. Position 0
    /// can never be a target.
    pub target_mask: Array2<bool>,
    pub pad: Array2<bool>,
}

/// Total and per-column cross-entropy for one batch, in nats per token.
/// The total is always the token-count-weighted mean of the per-column
/// entries; columns with no supervised tokens report 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_column: Vec<f64>,
    pub column_tokens: Vec<usize>,
    pub total_tokens: usize,
}

struct TransformerBlock<F> {
    attn: Site<AttnUnit<F>>,
    mlp: Site<MlpUnit<F>>,
}

impl<F: Scalar> Clone for TransformerBlock<F> {
    fn clone(&self) -> Self {
        TransformerBlock {
            attn: self.attn.clone(),
            mlp: self.mlp.clone(),
        }
    }
}

/// Decoder-only language model whose head, MLP, and attention blocks may
/// each be a per-column expert vector.
pub struct TabbyModel<F: Scalar> {
    config: ModelConfig,
    moe: Option<MoeSpec>,
    tok_emb: Param2<F>,
    pos_emb: Param2<F>,
    blocks: Vec<TransformerBlock<F>>,
    ln_f: LayerNorm<F>,
    head: Site<Linear<F>>,
}

impl<F: Scalar> Clone for TabbyModel<F> {
    fn clone(&self) -> Self {
        TabbyModel {
            config: self.config,
            moe: self.moe.clone(),
            tok_emb: self.tok_emb.clone(),
            pos_emb: self.pos_emb.clone(),
            blocks: self.blocks.clone(),
            ln_f: self.ln_f.clone(),
            head: self.head.clone(),
        }
    }
}

struct ForwardCache<F: Scalar> {
    blocks: Vec<(
        SiteCache<<AttnUnit<F> as Unit<F>>::Cache>,
        SiteCache<<MlpUnit<F> as Unit<F>>::Cache>,
    )>,
    ln_f: LnCache<F>,
    head: SiteCache<Array2<F>>,
}

/// Builds a freshly initialized base language model: learned token and
/// absolute position embeddings, pre-norm blocks, untied output head.
/// Deterministic in `config.seed`.
pub fn build_base_lm<F: Scalar>(config: ModelConfig) -> Result<TabbyModel<F>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    const STD: f64 = 0.02;
    let d = config.d_model;
    let lin = |rows, cols, rng: &mut ChaCha8Rng| Linear {
        w: Param2::randn(rows, cols, STD, rng),
        b: Param1::zeros(cols),
    };

    let tok_emb = Param2::randn(config.vocab_size, d, STD, &mut rng);
    let pos_emb = Param2::randn(config.context_length, d, STD, &mut rng);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let attn = AttnUnit {
            ln: LayerNorm::new(d),
            attn: Attention {
                wq: lin(d, d, &mut rng),
                wk: lin(d, d, &mut rng),
                wv: lin(d, d, &mut rng),
                wo: lin(d, d, &mut rng),
                n_heads: config.n_attn_heads,
            },
        };
        let mlp = MlpUnit {
            ln: LayerNorm::new(d),
            fc1: lin(d, config.d_ff, &mut rng),
            fc2: lin(config.d_ff, d, &mut rng),
        };
        blocks.push(TransformerBlock {
            attn: Site::Single(attn),
            mlp: Site::Single(mlp),
        });
    }
    let ln_f = LayerNorm::new(d);
    let head = Site::Single(lin(d, config.vocab_size, &mut rng));
    Ok(TabbyModel {
        config,
        moe: None,
        tok_emb,
        pos_emb,
        blocks,
        ln_f,
        head,
    })
}

/// Replaces each requested site with a vector of `n_experts` deep copies of
/// the original block (or one shared copy for sites flagged as shared).
pub fn tabbify<F: Scalar>(model: TabbyModel<F>, spec: MoeSpec) -> Result<TabbyModel<F>, ModelError> {
    spec.validate()?;
    if model.moe.is_some() {
        return Err(ModelError::AlreadyTabby);
    }
    fn convert<U: Clone>(site: Site<U>, n: usize, shared: bool) -> Site<U> {
        match site {
            Site::Single(u) if shared => Site::Shared(u),
            Site::Single(u) => Site::Experts(vec![u; n]),
            moe => moe,
        }
    }
    let mut model = model;
    for site in &spec.sites {
        let shared = spec.shared.contains(site);
        match site {
            MoeSite::LmHead => {
                let head = std::mem::replace(&mut model.head, Site::Experts(Vec::new()));
                model.head = convert(head, spec.n_experts, shared);
            }
            MoeSite::Mlp => {
                for block in &mut model.blocks {
                    let mlp = std::mem::replace(&mut block.mlp, Site::Experts(Vec::new()));
                    block.mlp = convert(mlp, spec.n_experts, shared);
                }
            }
            MoeSite::Attention => {
                for block in &mut model.blocks {
                    let attn = std::mem::replace(&mut block.attn, Site::Experts(Vec::new()));
                    block.attn = convert(attn, spec.n_experts, shared);
                }
            }
        }
    }
    model.moe = Some(spec);
    Ok(model)
}

impl<F: Scalar> TabbyModel<F> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn moe(&self) -> Option<&MoeSpec> {
        self.moe.as_ref()
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    /// Runs the model over a `(batch, seq)` grid of token ids. `column_ids`
    /// route positions to experts; `pad` marks positions excluded as
    /// attention keys. Returns `(batch, seq, vocab)` logits. Both modes
    /// compute identical values; `Train` additionally exercises the caching
    /// path used by [`TabbyModel::loss_and_grads`].
    pub fn forward(
        &self,
        tokens: &Array2<usize>,
        column_ids: &Array2<usize>,
        pad: &Array2<bool>,
        mode: Mode,
    ) -> Result<Array3<F>, ModelError> {
        self.validate_inputs(tokens, column_ids, pad)?;
        let (b, t) = tokens.dim();
        let logits = match mode {
            Mode::Inference => self.forward_flat(tokens, column_ids, pad),
            Mode::Train => self.forward_flat_cached(tokens, column_ids, pad).0,
        };
        let (flat, _) = logits.into_raw_vec_and_offset();
        Ok(Array3::from_shape_vec((b, t, self.config.vocab_size), flat).expect("shape matches"))
    }

    fn validate_inputs(
        &self,
        tokens: &Array2<usize>,
        column_ids: &Array2<usize>,
        pad: &Array2<bool>,
    ) -> Result<(), ModelError> {
        if tokens.dim() != column_ids.dim() || tokens.dim() != pad.dim() {
            return Err(ModelError::ShapeMismatch);
        }
        let (_, t) = tokens.dim();
        if t > self.config.context_length {
            return Err(ModelError::ContextOverflow(t, self.config.context_length));
        }
        if let Some(&bad) = tokens.iter().find(|&&tok| tok >= self.config.vocab_size) {
            return Err(ModelError::TokenRange(bad, self.config.vocab_size));
        }
        if let Some(spec) = &self.moe {
            if let Some(&bad) = column_ids.iter().find(|&&c| c >= spec.n_experts) {
                return Err(ModelError::ColumnRange(bad, spec.n_experts));
            }
        }
        Ok(())
    }

    fn embed(&self, tokens: &Array2<usize>) -> Array2<F> {
        let (b, t) = tokens.dim();
        let d = self.config.d_model;
        let mut x = Array2::zeros((b * t, d));
        for bi in 0..b {
            for ti in 0..t {
                let tok = tokens[[bi, ti]];
                for j in 0..d {
                    x[[bi * t + ti, j]] = self.tok_emb.v[[tok, j]] + self.pos_emb.v[[ti, j]];
                }
            }
        }
        x
    }

    fn forward_flat(
        &self,
        tokens: &Array2<usize>,
        column_ids: &Array2<usize>,
        pad: &Array2<bool>,
    ) -> Array2<F> {
        let (b, t) = tokens.dim();
        let pad_flat: Vec<bool> = pad.iter().copied().collect();
        let cols: Vec<usize> = column_ids.iter().copied().collect();
        let ctx = SeqCtx {
            batch: b,
            seq: t,
            pad: &pad_flat,
        };
        let mut x = self.embed(tokens);
        for block in &self.blocks {
            let a = block.attn.forward(&x, &ctx, &cols);
            x += &a;
            let m = block.mlp.forward(&x, &ctx, &cols);
            x += &m;
        }
        let (xf, _) = self.ln_f.fwd(&x);
        self.head.forward(&xf, &ctx, &cols)
    }

    fn forward_flat_cached(
        &self,
        tokens: &Array2<usize>,
        column_ids: &Array2<usize>,
        pad: &Array2<bool>,
    ) -> (Array2<F>, ForwardCache<F>) {
        let (b, t) = tokens.dim();
        let pad_flat: Vec<bool> = pad.iter().copied().collect();
        let cols: Vec<usize> = column_ids.iter().copied().collect();
        let ctx = SeqCtx {
            batch: b,
            seq: t,
            pad: &pad_flat,
        };
        let mut x = self.embed(tokens);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (a, ac) = block.attn.forward_cached(&x, &ctx, &cols);
            x += &a;
            let (m, mc) = block.mlp.forward_cached(&x, &ctx, &cols);
            x += &m;
            block_caches.push((ac, mc));
        }
        let (xf, lnf_cache) = self.ln_f.fwd(&x);
        let (logits, head_cache) = self.head.forward_cached(&xf, &ctx, &cols);
        (
            logits,
            ForwardCache {
                blocks: block_caches,
                ln_f: lnf_cache,
                head: head_cache,
            },
        )
    }

    fn backward_flat(
        &mut self,
        dlogits: &Array2<F>,
        cache: &ForwardCache<F>,
        tokens: &Array2<usize>,
        column_ids: &Array2<usize>,
        pad: &Array2<bool>,
    ) {
        let (b, t) = tokens.dim();
        let pad_flat: Vec<bool> = pad.iter().copied().collect();
        let cols: Vec<usize> = column_ids.iter().copied().collect();
        let ctx = SeqCtx {
            batch: b,
            seq: t,
            pad: &pad_flat,
        };
        let dxf = self.head.backward(dlogits, &cache.head, &ctx, &cols);
        let mut dx = self.ln_f.bwd(&dxf, &cache.ln_f);
        for (block, (ac, mc)) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let dm = block.mlp.backward(&dx, mc, &ctx, &cols);
            dx += &dm;
            let da = block.attn.backward(&dx, ac, &ctx, &cols);
            dx += &da;
        }
        for bi in 0..b {
            for ti in 0..t {
                let tok = tokens[[bi, ti]];
                let i = bi * t + ti;
                for j in 0..self.config.d_model {
                    self.tok_emb.g[[tok, j]] = self.tok_emb.g[[tok, j]] + dx[[i, j]];
                    self.pos_emb.g[[ti, j]] = self.pos_emb.g[[ti, j]] + dx[[i, j]];
                }
            }
        }
    }

    /// Mean cross-entropy over the batch's supervised targets, decomposed by
    /// the target token's column, with fresh gradients accumulated into every
    /// parameter. `n_columns` sets the length of the per-column breakdown.
    pub fn loss_and_grads(
        &mut self,
        batch: &Batch,
        n_columns: usize,
    ) -> Result<LossBreakdown, ModelError> {
        self.validate_batch(batch, n_columns)?;
        self.zero_grads();
        let (logits, cache) =
            self.forward_flat_cached(&batch.tokens, &batch.column_ids, &batch.pad);
        let (breakdown, dlogits) = loss::ce_and_grad(&logits, batch, n_columns, true)?;
        self.backward_flat(
            &dlogits.expect("gradient requested"),
            &cache,
            &batch.tokens,
            &batch.column_ids,
            &batch.pad,
        );
        Ok(breakdown)
    }

    /// Loss only, no gradient bookkeeping. Used for validation passes.
    pub fn evaluate_loss(&self, batch: &Batch, n_columns: usize) -> Result<LossBreakdown, ModelError> {
        self.validate_batch(batch, n_columns)?;
        let logits = self.forward_flat(&batch.tokens, &batch.column_ids, &batch.pad);
        let (breakdown, _) = loss::ce_and_grad(&logits, batch, n_columns, false)?;
        Ok(breakdown)
    }

    fn validate_batch(&self, batch: &Batch, n_columns: usize) -> Result<(), ModelError> {
        self.validate_inputs(&batch.tokens, &batch.column_ids, &batch.pad)?;
        if batch.tokens.dim() != batch.target_mask.dim() {
            return Err(ModelError::ShapeMismatch);
        }
        if let Some(&bad) = batch.column_ids.iter().find(|&&c| c >= n_columns) {
            return Err(ModelError::ColumnRange(bad, n_columns));
        }
        Ok(())
    }

    /// Logits at each sequence's last non-pad position, `(batch, vocab)`.
    /// Skips the all-position head application during sampling.
    pub(crate) fn forward_last(
        &self,
        tokens: &Array2<usize>,
        column_ids: &Array2<usize>,
        pad: &Array2<bool>,
    ) -> Result<Array2<F>, ModelError> {
        self.validate_inputs(tokens, column_ids, pad)?;
        let (b, t) = tokens.dim();
        let pad_flat: Vec<bool> = pad.iter().copied().collect();
        let cols: Vec<usize> = column_ids.iter().copied().collect();
        let ctx = SeqCtx {
            batch: b,
            seq: t,
            pad: &pad_flat,
        };
        let mut x = self.embed(tokens);
        for block in &self.blocks {
            let a = block.attn.forward(&x, &ctx, &cols);
            x += &a;
            let m = block.mlp.forward(&x, &ctx, &cols);
            x += &m;
        }
        let (xf, _) = self.ln_f.fwd(&x);

        let mut last_rows = Array2::zeros((b, self.config.d_model));
        let mut last_cols = Vec::with_capacity(b);
        for bi in 0..b {
            let ti = (0..t)
                .rev()
                .find(|&ti| !pad[[bi, ti]])
                .ok_or(ModelError::ShapeMismatch)?;
            last_rows.row_mut(bi).assign(&xf.row(bi * t + ti));
            last_cols.push(column_ids[[bi, ti]]);
        }
        let no_pad = vec![false; b];
        let last_ctx = SeqCtx {
            batch: b,
            seq: 1,
            pad: &no_pad,
        };
        Ok(self.head.forward(&last_rows, &last_ctx, &last_cols))
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, mut p| p.zero_grad());
    }

    /// Calls `f` with every parameter tensor in a fixed order under stable
    /// names. The optimizer, checkpoints, and gradient checks rely on this
    /// traversal; it must stay in lockstep with [`TabbyModel::visit_params`].
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, ParamMut<'_, F>)) {
        f("tok_emb".into(), ParamMut::M(&mut self.tok_emb));
        f("pos_emb".into(), ParamMut::M(&mut self.pos_emb));
        for (i, block) in self.blocks.iter_mut().enumerate() {
            visit_site_mut(&format!("block{i}.attn"), &mut block.attn, visit_attn_mut, f);
            visit_site_mut(&format!("block{i}.mlp"), &mut block.mlp, visit_mlp_mut, f);
        }
        f("ln_f.gamma".into(), ParamMut::V(&mut self.ln_f.gamma));
        f("ln_f.beta".into(), ParamMut::V(&mut self.ln_f.beta));
        visit_site_mut("head", &mut self.head, visit_linear_mut, f);
    }

    /// Read-only counterpart of [`TabbyModel::visit_params_mut`], same order
    /// and names.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, ParamRef<'_, F>)) {
        f("tok_emb".into(), ParamRef::M(&self.tok_emb));
        f("pos_emb".into(), ParamRef::M(&self.pos_emb));
        for (i, block) in self.blocks.iter().enumerate() {
            visit_site(&format!("block{i}.attn"), &block.attn, visit_attn, f);
            visit_site(&format!("block{i}.mlp"), &block.mlp, visit_mlp, f);
        }
        f("ln_f.gamma".into(), ParamRef::V(&self.ln_f.gamma));
        f("ln_f.beta".into(), ParamRef::V(&self.ln_f.beta));
        visit_site("head", &self.head, visit_linear, f);
    }
}

type UnitVisitorMut<F, U> = fn(&str, &mut U, &mut dyn FnMut(String, ParamMut<'_, F>));
type UnitVisitor<F, U> = fn(&str, &U, &mut dyn FnMut(String, ParamRef<'_, F>));

fn visit_site_mut<F: Scalar, U>(
    prefix: &str,
    site: &mut Site<U>,
    visit_unit: UnitVisitorMut<F, U>,
    f: &mut dyn FnMut(String, ParamMut<'_, F>),
) {
    match site {
        Site::Single(u) => visit_unit(prefix, u, f),
        Site::Shared(u) => visit_unit(&format!("{prefix}.shared"), u, f),
        Site::Experts(us) => {
            for (e, u) in us.iter_mut().enumerate() {
                visit_unit(&format!("{prefix}.expert{e}"), u, f);
            }
        }
    }
}

fn visit_site<F: Scalar, U>(
    prefix: &str,
    site: &Site<U>,
    visit_unit: UnitVisitor<F, U>,
    f: &mut dyn FnMut(String, ParamRef<'_, F>),
) {
    match site {
        Site::Single(u) => visit_unit(prefix, u, f),
        Site::Shared(u) => visit_unit(&format!("{prefix}.shared"), u, f),
        Site::Experts(us) => {
            for (e, u) in us.iter().enumerate() {
                visit_unit(&format!("{prefix}.expert{e}"), u, f);
            }
        }
    }
}

fn visit_linear_mut<F: Scalar>(
    prefix: &str,
    lin: &mut Linear<F>,
    f: &mut dyn FnMut(String, ParamMut<'_, F>),
) {
    f(format!("{prefix}.w"), ParamMut::M(&mut lin.w));
    f(format!("{prefix}.b"), ParamMut::V(&mut lin.b));
}

fn visit_linear<F: Scalar>(
    prefix: &str,
    lin: &Linear<F>,
    f: &mut dyn FnMut(String, ParamRef<'_, F>),
) {
    f(format!("{prefix}.w"), ParamRef::M(&lin.w));
    f(format!("{prefix}.b"), ParamRef::V(&lin.b));
}

fn visit_attn_mut<F: Scalar>(
    prefix: &str,
    unit: &mut AttnUnit<F>,
    f: &mut dyn FnMut(String, ParamMut<'_, F>),
) {
    f(format!("{prefix}.ln.gamma"), ParamMut::V(&mut unit.ln.gamma));
    f(format!("{prefix}.ln.beta"), ParamMut::V(&mut unit.ln.beta));
    visit_linear_mut(&format!("{prefix}.wq"), &mut unit.attn.wq, f);
    visit_linear_mut(&format!("{prefix}.wk"), &mut unit.attn.wk, f);
    visit_linear_mut(&format!("{prefix}.wv"), &mut unit.attn.wv, f);
    visit_linear_mut(&format!("{prefix}.wo"), &mut unit.attn.wo, f);
}

fn visit_attn<F: Scalar>(
    prefix: &str,
    unit: &AttnUnit<F>,
    f: &mut dyn FnMut(String, ParamRef<'_, F>),
) {
    f(format!("{prefix}.ln.gamma"), ParamRef::V(&unit.ln.gamma));
    f(format!("{prefix}.ln.beta"), ParamRef::V(&unit.ln.beta));
    visit_linear(&format!("{prefix}.wq"), &unit.attn.wq, f);
    visit_linear(&format!("{prefix}.wk"), &unit.attn.wk, f);
    visit_linear(&format!("{prefix}.wv"), &unit.attn.wv, f);
    visit_linear(&format!("{prefix}.wo"), &unit.attn.wo, f);
}

fn visit_mlp_mut<F: Scalar>(
    prefix: &str,
    unit: &mut MlpUnit<F>,
    f: &mut dyn FnMut(String, ParamMut<'_, F>),
) {
    f(format!("{prefix}.ln.gamma"), ParamMut::V(&mut unit.ln.gamma));
    f(format!("{prefix}.ln.beta"), ParamMut::V(&mut unit.ln.beta));
    visit_linear_mut(&format!("{prefix}.fc1"), &mut unit.fc1, f);
    visit_linear_mut(&format!("{prefix}.fc2"), &mut unit.fc2, f);
}

fn visit_mlp<F: Scalar>(
    prefix: &str,
    unit: &MlpUnit<F>,
    f: &mut dyn FnMut(String, ParamRef<'_, F>),
) {
    f(format!("{prefix}.ln.gamma"), ParamRef::V(&unit.ln.gamma));
    f(format!("{prefix}.ln.beta"), ParamRef::V(&unit.ln.beta));
    visit_linear(&format!("{prefix}.fc1"), &unit.fc1, f);
    visit_linear(&format!("{prefix}.fc2"), &unit.fc2, f);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            context_length: 8,
            d_model: 8,
            n_layers: 2,
            n_attn_heads: 2,
            d_ff: 16,
            seed,
        }
    }

    fn random_inputs(
        config: &ModelConfig,
        b: usize,
        t: usize,
        n_cols: usize,
        seed: u64,
    ) -> (Array2<usize>, Array2<usize>, Array2<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = Array2::from_shape_fn((b, t), |_| rng.random_range(0..config.vocab_size));
        let cols = Array2::from_shape_fn((b, t), |(_, ti)| (ti * n_cols / t).min(n_cols - 1));
        let pad = Array2::from_elem((b, t), false);
        (tokens, cols, pad)
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a: TabbyModel<f64> = build_base_lm(tiny_config(7)).unwrap();
        let b: TabbyModel<f64> = build_base_lm(tiny_config(7)).unwrap();
        let mut buf_a = Vec::new();
        a.visit_params(&mut |_, p| buf_a.extend_from_slice(p.values()));
        let mut buf_b = Vec::new();
        b.visit_params(&mut |_, p| buf_b.extend_from_slice(p.values()));
        assert_eq!(buf_a, buf_b);
        let c: TabbyModel<f64> = build_base_lm(tiny_config(8)).unwrap();
        let mut buf_c = Vec::new();
        c.visit_params(&mut |_, p| buf_c.extend_from_slice(p.values()));
        assert_ne!(buf_a, buf_c);
    }

    #[test]
    fn forward_has_logit_shape_and_normalized_softmax() {
        let config = tiny_config(1);
        let model: TabbyModel<f64> = build_base_lm(config).unwrap();
        let (tokens, cols, pad) = random_inputs(&config, 3, 5, 1, 2);
        let logits = model.forward(&tokens, &cols, &pad, Mode::Inference).unwrap();
        assert_eq!(logits.dim(), (3, 5, config.vocab_size));
        for b in 0..3 {
            for t in 0..5 {
                let row = logits.slice(ndarray::s![b, t, ..]);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
                let norm: f64 = row.iter().map(|z| (z - max).exp() / sum).sum();
                assert!((norm - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn clone_equivalence_for_all_variants() {
        let config = tiny_config(3);
        let base: TabbyModel<f64> = build_base_lm(config).unwrap();
        let (tokens, cols, pad) = random_inputs(&config, 2, 6, 3, 4);
        let base_logits = base.forward(&tokens, &cols, &pad, Mode::Inference).unwrap();
        for spec in [
            MoeSpec::mh(3),
            MoeSpec::mmlp(3),
            MoeSpec::ma(3),
            MoeSpec::mmlp_mh(3),
        ] {
            let tabby = tabbify(base.clone(), spec.clone()).unwrap();
            let logits = tabby.forward(&tokens, &cols, &pad, Mode::Inference).unwrap();
            // exact bitwise equality: experts run the very same computation
            for (a, b) in base_logits.iter().zip(logits.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "spec {spec:?}");
            }
        }
    }

    #[test]
    fn shared_sites_compute_like_single() {
        let config = tiny_config(3);
        let base: TabbyModel<f64> = build_base_lm(config).unwrap();
        let (tokens, cols, pad) = random_inputs(&config, 2, 6, 3, 4);
        let base_logits = base.forward(&tokens, &cols, &pad, Mode::Inference).unwrap();
        let mut spec = MoeSpec::mmlp_mh(3);
        spec.shared.insert(MoeSite::Mlp);
        let tabby = tabbify(base.clone(), spec).unwrap();
        let logits = tabby.forward(&tokens, &cols, &pad, Mode::Inference).unwrap();
        assert_eq!(base_logits, logits);
        // shared site stores one copy; expert site stores three
        let base_count = base.n_params();
        let head_count = config.d_model * config.vocab_size + config.vocab_size;
        assert_eq!(tabby.n_params(), base_count + 2 * head_count);
    }

    #[test]
    fn double_tabbify_is_rejected() {
        let base: TabbyModel<f32> = build_base_lm(tiny_config(0)).unwrap();
        let once = tabbify(base, MoeSpec::mh(2)).unwrap();
        assert_eq!(
            tabbify(once, MoeSpec::mmlp(2)).unwrap_err(),
            ModelError::AlreadyTabby
        );
    }

    #[test]
    fn single_expert_behaves_like_base_under_training() {
        let config = tiny_config(5);
        let base: TabbyModel<f64> = build_base_lm(config).unwrap();
        let mut tabby = tabbify(base.clone(), MoeSpec::mh(1)).unwrap();
        let mut base = base;
        let (tokens, cols, pad) = random_inputs(&config, 2, 6, 1, 6);
        let mask = Array2::from_shape_fn((2, 6), |(_, t)| t > 0);
        let batch = Batch {
            tokens,
            column_ids: cols,
            target_mask: mask,
            pad,
        };
        let lb = base.loss_and_grads(&batch, 1).unwrap();
        let lt = tabby.loss_and_grads(&batch, 1).unwrap();
        assert_eq!(lb.total.to_bits(), lt.total.to_bits());
        let mut head_grads_base = Vec::new();
        base.visit_params_mut(&mut |name, p| {
            if name.starts_with("head") {
                head_grads_base.extend_from_slice(p.grads());
            }
        });
        let mut head_grads_tabby = Vec::new();
        tabby.visit_params_mut(&mut |name, p| {
            if name.starts_with("head") {
                head_grads_tabby.extend_from_slice(p.grads());
            }
        });
        assert_eq!(head_grads_base, head_grads_tabby);
    }

    #[test]
    fn perturbing_one_head_expert_only_moves_its_rows() {
        let config = tiny_config(9);
        let base: TabbyModel<f64> = build_base_lm(config).unwrap();
        let mut tabby = tabbify(base, MoeSpec::mh(3)).unwrap();
        let (tokens, cols, pad) = random_inputs(&config, 2, 6, 3, 10);
        let before = tabby.forward(&tokens, &cols, &pad, Mode::Inference).unwrap();
        tabby.visit_params_mut(&mut |name, mut p| {
            if name == "head.expert1.w" {
                for v in p.values_mut() {
                    *v += 0.05;
                }
            }
        });
        let after = tabby.forward(&tokens, &cols, &pad, Mode::Inference).unwrap();
        for b in 0..2 {
            for t in 0..6 {
                let same = before.slice(ndarray::s![b, t, ..]) == after.slice(ndarray::s![b, t, ..]);
                if cols[[b, t]] == 1 {
                    assert!(!same, "expert-1 position unchanged");
                } else {
                    assert!(same, "non-expert-1 position changed");
                }
            }
        }
    }

    #[test]
    fn parameter_count_follows_head_expert_formula() {
        let config = tiny_config(11);
        let base: TabbyModel<f32> = build_base_lm(config).unwrap();
        let base_count = base.n_params();
        let head_count = config.d_model * config.vocab_size + config.vocab_size;
        for v in [1usize, 3, 7] {
            let tabby = tabbify(base.clone(), MoeSpec::mh(v)).unwrap();
            assert_eq!(tabby.n_params(), base_count + (v - 1) * head_count);
        }
    }

    #[test]
    fn logits_are_causal() {
        let config = tiny_config(13);
        let model: TabbyModel<f64> = build_base_lm(config).unwrap();
        let (mut tokens, cols, pad) = random_inputs(&config, 1, 7, 2, 14);
        let before = model.forward(&tokens, &cols, &pad, Mode::Inference).unwrap();
        tokens[[0, 6]] = (tokens[[0, 6]] + 1) % config.vocab_size;
        tokens[[0, 5]] = (tokens[[0, 5]] + 3) % config.vocab_size;
        let after = model.forward(&tokens, &cols, &pad, Mode::Inference).unwrap();
        for t in 0..5 {
            for w in 0..config.vocab_size {
                assert_eq!(before[[0, t, w]].to_bits(), after[[0, t, w]].to_bits());
            }
        }
    }

    #[test]
    fn padded_keys_do_not_influence_other_positions() {
        let config = tiny_config(15);
        let model: TabbyModel<f64> = build_base_lm(config).unwrap();
        let (mut tokens, cols, mut pad) = random_inputs(&config, 1, 6, 1, 16);
        pad[[0, 4]] = true;
        pad[[0, 5]] = true;
        let before = model.forward(&tokens, &cols, &pad, Mode::Inference).unwrap();
        tokens[[0, 4]] = (tokens[[0, 4]] + 2) % config.vocab_size;
        let after = model.forward(&tokens, &cols, &pad, Mode::Inference).unwrap();
        for t in 0..4 {
            for w in 0..config.vocab_size {
                assert_eq!(before[[0, t, w]].to_bits(), after[[0, t, w]].to_bits());
            }
        }
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        let config = tiny_config(17);
        let model: TabbyModel<f32> = build_base_lm(config).unwrap();
        let tabby = tabbify(model, MoeSpec::mh(2)).unwrap();
        let tokens = Array2::from_elem((1, 3), 0usize);
        let pad = Array2::from_elem((1, 3), false);
        let bad_cols = Array2::from_elem((1, 3), 5usize);
        assert_eq!(
            tabby
                .forward(&tokens, &bad_cols, &pad, Mode::Inference)
                .unwrap_err(),
            ModelError::ColumnRange(5, 2)
        );
        let cols = Array2::from_elem((1, 3), 0usize);
        let bad_tokens = Array2::from_elem((1, 3), 99usize);
        assert_eq!(
            tabby
                .forward(&bad_tokens, &cols, &pad, Mode::Inference)
                .unwrap_err(),
            ModelError::TokenRange(99, 11)
        );
    }

    #[test]
    fn train_and_inference_modes_agree() {
        let config = tiny_config(19);
        let model: TabbyModel<f64> =
            tabbify(build_base_lm(config).unwrap(), MoeSpec::mmlp_mh(2)).unwrap();
        let (tokens, cols, pad) = random_inputs(&config, 2, 5, 2, 20);
        let a = model.forward(&tokens, &cols, &pad, Mode::Inference).unwrap();
        let b = model.forward(&tokens, &cols, &pad, Mode::Train).unwrap();
        assert_eq!(a, b);
    }
}
