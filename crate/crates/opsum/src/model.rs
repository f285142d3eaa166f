//! Multi-encoder/decoder summarizer with gated attention fusion, and the
//! single-encoder concatenation baseline.
//!
//! The multi-encoder model runs reviews, description, and question-answers
//! through three separate encoder stacks, aligns the description and QA
//! states to the review sequence length, and fuses them as
//!
//! ```text
//! a_f = a_R + alpha .* a_D + beta .* a_Q
//! alpha = phi([a_R ; a_D] W_alpha),  beta = phi([a_R ; a_Q] W_beta)
//! phi(x) = relu(tanh(x))
//! ```
//!
//! so every gate entry lies in [0, 1). The decoder cross-attends to `a_f`
//! under the review mask. Gates are zero-initialized: training starts at
//! the review-only model and learns to open them.
//!
//! The baseline concatenates `reviews <sep> description <sep> qa` into one
//! encoder. Both variants share the decoder shape and the training
//! contract (mean token negative log-likelihood).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, NodeId, Tape, Tensor, IGNORE_TARGET};
use crate::rng::Rng;
use crate::tokenizer::{
    concat_sources, token_mask, tokenize_sources, SourceLimits, TokenizedSources, Tokenizer, BOS,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of vocabulary of size {vocab}")]
    TokenOutOfVocab { id: u32, vocab: usize },
    #[error("sequence of {got} tokens exceeds the {name} limit of {max}")]
    SequenceTooLong {
        name: &'static str,
        got: usize,
        max: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("decoder prefix must start with the start sentinel")]
    MissingStartSentinel,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("{op} expects {expected} states, got {got:?}")]
    WrongSource {
        op: &'static str,
        expected: &'static str,
        got: SourceTag,
    },
    #[error("non-finite loss over batch {batch_id}")]
    NonFiniteLoss { batch_id: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

/// Dimensions and switches of either architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_review_len: usize,
    pub max_desc_len: usize,
    pub max_qa_len: usize,
    pub max_tgt_len: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(ModelError::InvalidConfig("num_layers must be positive".into()));
        }
        for (name, len) in [
            ("max_review_len", self.max_review_len),
            ("max_desc_len", self.max_desc_len),
            ("max_qa_len", self.max_qa_len),
            ("max_tgt_len", self.max_tgt_len),
        ] {
            if len < 3 {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} must leave room for sentinels and one token, got {len}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.vocab_size < 6 {
            return Err(ModelError::InvalidConfig(
                "vocab must cover the five sentinels plus content".into(),
            ));
        }
        Ok(())
    }

    pub fn limits(&self) -> SourceLimits {
        SourceLimits {
            max_review_len: self.max_review_len,
            max_desc_len: self.max_desc_len,
            max_qa_len: self.max_qa_len,
            max_tgt_len: self.max_tgt_len,
        }
    }

    /// Single-encoder input budget of the concat baseline.
    pub fn max_concat_len(&self) -> usize {
        self.max_review_len + self.max_desc_len + self.max_qa_len
    }
}

/// Which source a state matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Reviews,
    Description,
    Qa,
    Fused,
    Concat,
}

/// Encoder output: one state row per token plus a validity mask. Masked
/// rows are all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub states: Tensor,
    pub mask: Vec<bool>,
    pub source_tag: SourceTag,
}

/// The fusion gate projections, each `2*hidden x hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionGateParams {
    pub w_alpha: Tensor,
    pub w_beta: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub fc1: Tensor,
    pub fc2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub cq: Tensor,
    pub ck: Tensor,
    pub cv: Tensor,
    pub co: Tensor,
    pub fc1: Tensor,
    pub fc2: Tensor,
}

/// All learnable parameters of the multi-encoder model. When
/// `tie_embeddings` is set the review table is shared by every encoder and
/// the decoder and the per-source tables are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedosParams {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub embedding_desc: Option<Tensor>,
    pub embedding_qa: Option<Tensor>,
    pub embedding_tgt: Option<Tensor>,
    pub pos_reviews: Tensor,
    pub pos_desc: Tensor,
    pub pos_qa: Tensor,
    pub pos_target: Tensor,
    pub encoder_reviews: Vec<EncoderLayerParams>,
    pub encoder_desc: Vec<EncoderLayerParams>,
    pub encoder_qa: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
    pub fusion: FusionGateParams,
    pub out_proj: Tensor,
}

/// Parameters of the single-encoder concatenation baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatParams {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub embedding_tgt: Option<Tensor>,
    pub pos_src: Tensor,
    pub pos_target: Tensor,
    pub encoder: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
    pub out_proj: Tensor,
}

/// How to initialize the fusion gate projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateInit {
    /// Zeros: the forward pass starts exactly at the review-only model.
    Zero,
    /// Small gaussian values; used by gradient checks, which need a
    /// generic point away from the relu kink.
    Random,
}

const INIT_STD: f64 = 0.02;

fn gaussian_tensor(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.next_gaussian() * std).collect();
    Tensor { rows, cols, data }
}

fn init_encoder_layer(rng: &mut Rng, d: usize) -> EncoderLayerParams {
    EncoderLayerParams {
        wq: gaussian_tensor(rng, d, d, INIT_STD),
        wk: gaussian_tensor(rng, d, d, INIT_STD),
        wv: gaussian_tensor(rng, d, d, INIT_STD),
        wo: gaussian_tensor(rng, d, d, INIT_STD),
        fc1: gaussian_tensor(rng, d, 4 * d, INIT_STD),
        fc2: gaussian_tensor(rng, 4 * d, d, INIT_STD),
    }
}

fn init_decoder_layer(rng: &mut Rng, d: usize) -> DecoderLayerParams {
    DecoderLayerParams {
        wq: gaussian_tensor(rng, d, d, INIT_STD),
        wk: gaussian_tensor(rng, d, d, INIT_STD),
        wv: gaussian_tensor(rng, d, d, INIT_STD),
        wo: gaussian_tensor(rng, d, d, INIT_STD),
        cq: gaussian_tensor(rng, d, d, INIT_STD),
        ck: gaussian_tensor(rng, d, d, INIT_STD),
        cv: gaussian_tensor(rng, d, d, INIT_STD),
        co: gaussian_tensor(rng, d, d, INIT_STD),
        fc1: gaussian_tensor(rng, d, 4 * d, INIT_STD),
        fc2: gaussian_tensor(rng, 4 * d, d, INIT_STD),
    }
}

fn zeros_encoder_layer(d: usize) -> EncoderLayerParams {
    EncoderLayerParams {
        wq: Tensor::zeros(d, d),
        wk: Tensor::zeros(d, d),
        wv: Tensor::zeros(d, d),
        wo: Tensor::zeros(d, d),
        fc1: Tensor::zeros(d, 4 * d),
        fc2: Tensor::zeros(4 * d, d),
    }
}

fn zeros_decoder_layer(d: usize) -> DecoderLayerParams {
    DecoderLayerParams {
        wq: Tensor::zeros(d, d),
        wk: Tensor::zeros(d, d),
        wv: Tensor::zeros(d, d),
        wo: Tensor::zeros(d, d),
        cq: Tensor::zeros(d, d),
        ck: Tensor::zeros(d, d),
        cv: Tensor::zeros(d, d),
        co: Tensor::zeros(d, d),
        fc1: Tensor::zeros(d, 4 * d),
        fc2: Tensor::zeros(4 * d, d),
    }
}

impl MedosParams {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        Self::init_with_gates(config, rng, GateInit::Zero)
    }

    pub fn init_with_gates(
        config: ModelConfig,
        rng: &mut Rng,
        gates: GateInit,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.hidden_dim;
        let v = config.vocab_size;
        let untied = !config.tie_embeddings;
        let fusion = match gates {
            GateInit::Zero => FusionGateParams {
                w_alpha: Tensor::zeros(2 * d, d),
                w_beta: Tensor::zeros(2 * d, d),
            },
            GateInit::Random => FusionGateParams {
                w_alpha: gaussian_tensor(rng, 2 * d, d, INIT_STD),
                w_beta: gaussian_tensor(rng, 2 * d, d, INIT_STD),
            },
        };
        Ok(MedosParams {
            embedding: gaussian_tensor(rng, v, d, INIT_STD),
            embedding_desc: untied.then(|| gaussian_tensor(rng, v, d, INIT_STD)),
            embedding_qa: untied.then(|| gaussian_tensor(rng, v, d, INIT_STD)),
            embedding_tgt: untied.then(|| gaussian_tensor(rng, v, d, INIT_STD)),
            pos_reviews: gaussian_tensor(rng, config.max_review_len, d, INIT_STD),
            pos_desc: gaussian_tensor(rng, config.max_desc_len, d, INIT_STD),
            pos_qa: gaussian_tensor(rng, config.max_qa_len, d, INIT_STD),
            pos_target: gaussian_tensor(rng, config.max_tgt_len, d, INIT_STD),
            encoder_reviews: (0..config.num_layers).map(|_| init_encoder_layer(rng, d)).collect(),
            encoder_desc: (0..config.num_layers).map(|_| init_encoder_layer(rng, d)).collect(),
            encoder_qa: (0..config.num_layers).map(|_| init_encoder_layer(rng, d)).collect(),
            decoder: (0..config.num_layers).map(|_| init_decoder_layer(rng, d)).collect(),
            fusion,
            out_proj: gaussian_tensor(rng, d, v, INIT_STD),
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let c = &self.config;
        let d = c.hidden_dim;
        let v = c.vocab_size;
        MedosParams {
            config: c.clone(),
            embedding: Tensor::zeros(v, d),
            embedding_desc: self.embedding_desc.as_ref().map(|_| Tensor::zeros(v, d)),
            embedding_qa: self.embedding_qa.as_ref().map(|_| Tensor::zeros(v, d)),
            embedding_tgt: self.embedding_tgt.as_ref().map(|_| Tensor::zeros(v, d)),
            pos_reviews: Tensor::zeros(c.max_review_len, d),
            pos_desc: Tensor::zeros(c.max_desc_len, d),
            pos_qa: Tensor::zeros(c.max_qa_len, d),
            pos_target: Tensor::zeros(c.max_tgt_len, d),
            encoder_reviews: (0..c.num_layers).map(|_| zeros_encoder_layer(d)).collect(),
            encoder_desc: (0..c.num_layers).map(|_| zeros_encoder_layer(d)).collect(),
            encoder_qa: (0..c.num_layers).map(|_| zeros_encoder_layer(d)).collect(),
            decoder: (0..c.num_layers).map(|_| zeros_decoder_layer(d)).collect(),
            fusion: FusionGateParams {
                w_alpha: Tensor::zeros(2 * d, d),
                w_beta: Tensor::zeros(2 * d, d),
            },
            out_proj: Tensor::zeros(d, v),
        }
    }
}

impl ConcatParams {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.hidden_dim;
        let v = config.vocab_size;
        let untied = !config.tie_embeddings;
        Ok(ConcatParams {
            embedding: gaussian_tensor(rng, v, d, INIT_STD),
            embedding_tgt: untied.then(|| gaussian_tensor(rng, v, d, INIT_STD)),
            pos_src: gaussian_tensor(rng, config.max_concat_len(), d, INIT_STD),
            pos_target: gaussian_tensor(rng, config.max_tgt_len, d, INIT_STD),
            encoder: (0..config.num_layers).map(|_| init_encoder_layer(rng, d)).collect(),
            decoder: (0..config.num_layers).map(|_| init_decoder_layer(rng, d)).collect(),
            out_proj: gaussian_tensor(rng, d, v, INIT_STD),
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let c = &self.config;
        let d = c.hidden_dim;
        let v = c.vocab_size;
        ConcatParams {
            config: c.clone(),
            embedding: Tensor::zeros(v, d),
            embedding_tgt: self.embedding_tgt.as_ref().map(|_| Tensor::zeros(v, d)),
            pos_src: Tensor::zeros(c.max_concat_len(), d),
            pos_target: Tensor::zeros(c.max_tgt_len, d),
            encoder: (0..c.num_layers).map(|_| zeros_encoder_layer(d)).collect(),
            decoder: (0..c.num_layers).map(|_| zeros_decoder_layer(d)).collect(),
            out_proj: Tensor::zeros(d, v),
        }
    }
}

fn layer_tensors<'a>(
    prefix: String,
    l: &'a EncoderLayerParams,
    out: &mut Vec<(String, &'a Tensor)>,
) {
    out.push((format!("{prefix}.wq"), &l.wq));
    out.push((format!("{prefix}.wk"), &l.wk));
    out.push((format!("{prefix}.wv"), &l.wv));
    out.push((format!("{prefix}.wo"), &l.wo));
    out.push((format!("{prefix}.fc1"), &l.fc1));
    out.push((format!("{prefix}.fc2"), &l.fc2));
}

fn dec_layer_tensors<'a>(
    prefix: String,
    l: &'a DecoderLayerParams,
    out: &mut Vec<(String, &'a Tensor)>,
) {
    out.push((format!("{prefix}.wq"), &l.wq));
    out.push((format!("{prefix}.wk"), &l.wk));
    out.push((format!("{prefix}.wv"), &l.wv));
    out.push((format!("{prefix}.wo"), &l.wo));
    out.push((format!("{prefix}.cq"), &l.cq));
    out.push((format!("{prefix}.ck"), &l.ck));
    out.push((format!("{prefix}.cv"), &l.cv));
    out.push((format!("{prefix}.co"), &l.co));
    out.push((format!("{prefix}.fc1"), &l.fc1));
    out.push((format!("{prefix}.fc2"), &l.fc2));
}

macro_rules! tensors_mut_from_tensors {
    ($self:ident) => {{
        // Safety-free trick: enumerate through the immutable walk, then
        // re-borrow mutably in the same fixed order.
        let names: Vec<String> = $self.tensors().into_iter().map(|(n, _)| n).collect();
        let mut ptrs: Vec<*mut Tensor> = Vec::with_capacity(names.len());
        $self.walk_mut(&mut |t: &mut Tensor| ptrs.push(t as *mut Tensor));
        assert_eq!(names.len(), ptrs.len());
        names
            .into_iter()
            .zip(ptrs)
            .map(|(n, p)| (n, unsafe { &mut *p }))
            .collect()
    }};
}

impl MedosParams {
    /// Every learnable tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("embedding".to_string(), &self.embedding));
        if let Some(t) = &self.embedding_desc {
            out.push(("embedding_desc".to_string(), t));
        }
        if let Some(t) = &self.embedding_qa {
            out.push(("embedding_qa".to_string(), t));
        }
        if let Some(t) = &self.embedding_tgt {
            out.push(("embedding_tgt".to_string(), t));
        }
        out.push(("pos_reviews".to_string(), &self.pos_reviews));
        out.push(("pos_desc".to_string(), &self.pos_desc));
        out.push(("pos_qa".to_string(), &self.pos_qa));
        out.push(("pos_target".to_string(), &self.pos_target));
        for (i, l) in self.encoder_reviews.iter().enumerate() {
            layer_tensors(format!("encoder_reviews.{i}"), l, &mut out);
        }
        for (i, l) in self.encoder_desc.iter().enumerate() {
            layer_tensors(format!("encoder_desc.{i}"), l, &mut out);
        }
        for (i, l) in self.encoder_qa.iter().enumerate() {
            layer_tensors(format!("encoder_qa.{i}"), l, &mut out);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            dec_layer_tensors(format!("decoder.{i}"), l, &mut out);
        }
        out.push(("fusion.w_alpha".to_string(), &self.fusion.w_alpha));
        out.push(("fusion.w_beta".to_string(), &self.fusion.w_beta));
        out.push(("out_proj".to_string(), &self.out_proj));
        out
    }

    fn walk_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.embedding);
        if let Some(t) = &mut self.embedding_desc {
            f(t);
        }
        if let Some(t) = &mut self.embedding_qa {
            f(t);
        }
        if let Some(t) = &mut self.embedding_tgt {
            f(t);
        }
        f(&mut self.pos_reviews);
        f(&mut self.pos_desc);
        f(&mut self.pos_qa);
        f(&mut self.pos_target);
        for l in &mut self.encoder_reviews {
            for t in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.fc1, &mut l.fc2] {
                f(t);
            }
        }
        for l in &mut self.encoder_desc {
            for t in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.fc1, &mut l.fc2] {
                f(t);
            }
        }
        for l in &mut self.encoder_qa {
            for t in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.fc1, &mut l.fc2] {
                f(t);
            }
        }
        for l in &mut self.decoder {
            for t in [
                &mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.cq, &mut l.ck, &mut l.cv,
                &mut l.co, &mut l.fc1, &mut l.fc2,
            ] {
                f(t);
            }
        }
        f(&mut self.fusion.w_alpha);
        f(&mut self.fusion.w_beta);
        f(&mut self.out_proj);
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        tensors_mut_from_tensors!(self)
    }
}

impl ConcatParams {
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("embedding".to_string(), &self.embedding));
        if let Some(t) = &self.embedding_tgt {
            out.push(("embedding_tgt".to_string(), t));
        }
        out.push(("pos_src".to_string(), &self.pos_src));
        out.push(("pos_target".to_string(), &self.pos_target));
        for (i, l) in self.encoder.iter().enumerate() {
            layer_tensors(format!("encoder.{i}"), l, &mut out);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            dec_layer_tensors(format!("decoder.{i}"), l, &mut out);
        }
        out.push(("out_proj".to_string(), &self.out_proj));
        out
    }

    fn walk_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.embedding);
        if let Some(t) = &mut self.embedding_tgt {
            f(t);
        }
        f(&mut self.pos_src);
        f(&mut self.pos_target);
        for l in &mut self.encoder {
            for t in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.fc1, &mut l.fc2] {
                f(t);
            }
        }
        for l in &mut self.decoder {
            for t in [
                &mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.cq, &mut l.ck, &mut l.cv,
                &mut l.co, &mut l.fc1, &mut l.fc2,
            ] {
                f(t);
            }
        }
        f(&mut self.out_proj);
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        tensors_mut_from_tensors!(self)
    }
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

struct BoundEncoderLayer {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    fc1: NodeId,
    fc2: NodeId,
}

struct BoundDecoderLayer {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    cq: NodeId,
    ck: NodeId,
    cv: NodeId,
    co: NodeId,
    fc1: NodeId,
    fc2: NodeId,
}

struct BoundMedos {
    embedding: NodeId,
    embedding_desc: Option<NodeId>,
    embedding_qa: Option<NodeId>,
    embedding_tgt: Option<NodeId>,
    pos_reviews: NodeId,
    pos_desc: NodeId,
    pos_qa: NodeId,
    pos_target: NodeId,
    encoder_reviews: Vec<BoundEncoderLayer>,
    encoder_desc: Vec<BoundEncoderLayer>,
    encoder_qa: Vec<BoundEncoderLayer>,
    decoder: Vec<BoundDecoderLayer>,
    w_alpha: NodeId,
    w_beta: NodeId,
    out_proj: NodeId,
}

struct BoundConcat {
    embedding: NodeId,
    embedding_tgt: Option<NodeId>,
    pos_src: NodeId,
    pos_target: NodeId,
    encoder: Vec<BoundEncoderLayer>,
    decoder: Vec<BoundDecoderLayer>,
    out_proj: NodeId,
}

fn bind_encoder_layer(tape: &mut Tape, l: &EncoderLayerParams) -> BoundEncoderLayer {
    BoundEncoderLayer {
        wq: tape.leaf(l.wq.clone()),
        wk: tape.leaf(l.wk.clone()),
        wv: tape.leaf(l.wv.clone()),
        wo: tape.leaf(l.wo.clone()),
        fc1: tape.leaf(l.fc1.clone()),
        fc2: tape.leaf(l.fc2.clone()),
    }
}

fn bind_decoder_layer(tape: &mut Tape, l: &DecoderLayerParams) -> BoundDecoderLayer {
    BoundDecoderLayer {
        wq: tape.leaf(l.wq.clone()),
        wk: tape.leaf(l.wk.clone()),
        wv: tape.leaf(l.wv.clone()),
        wo: tape.leaf(l.wo.clone()),
        cq: tape.leaf(l.cq.clone()),
        ck: tape.leaf(l.ck.clone()),
        cv: tape.leaf(l.cv.clone()),
        co: tape.leaf(l.co.clone()),
        fc1: tape.leaf(l.fc1.clone()),
        fc2: tape.leaf(l.fc2.clone()),
    }
}

fn bind_medos(tape: &mut Tape, p: &MedosParams) -> BoundMedos {
    BoundMedos {
        embedding: tape.leaf(p.embedding.clone()),
        embedding_desc: p.embedding_desc.as_ref().map(|t| tape.leaf(t.clone())),
        embedding_qa: p.embedding_qa.as_ref().map(|t| tape.leaf(t.clone())),
        embedding_tgt: p.embedding_tgt.as_ref().map(|t| tape.leaf(t.clone())),
        pos_reviews: tape.leaf(p.pos_reviews.clone()),
        pos_desc: tape.leaf(p.pos_desc.clone()),
        pos_qa: tape.leaf(p.pos_qa.clone()),
        pos_target: tape.leaf(p.pos_target.clone()),
        encoder_reviews: p.encoder_reviews.iter().map(|l| bind_encoder_layer(tape, l)).collect(),
        encoder_desc: p.encoder_desc.iter().map(|l| bind_encoder_layer(tape, l)).collect(),
        encoder_qa: p.encoder_qa.iter().map(|l| bind_encoder_layer(tape, l)).collect(),
        decoder: p.decoder.iter().map(|l| bind_decoder_layer(tape, l)).collect(),
        w_alpha: tape.leaf(p.fusion.w_alpha.clone()),
        w_beta: tape.leaf(p.fusion.w_beta.clone()),
        out_proj: tape.leaf(p.out_proj.clone()),
    }
}

fn bind_concat(tape: &mut Tape, p: &ConcatParams) -> BoundConcat {
    BoundConcat {
        embedding: tape.leaf(p.embedding.clone()),
        embedding_tgt: p.embedding_tgt.as_ref().map(|t| tape.leaf(t.clone())),
        pos_src: tape.leaf(p.pos_src.clone()),
        pos_target: tape.leaf(p.pos_target.clone()),
        encoder: p.encoder.iter().map(|l| bind_encoder_layer(tape, l)).collect(),
        decoder: p.decoder.iter().map(|l| bind_decoder_layer(tape, l)).collect(),
        out_proj: tape.leaf(p.out_proj.clone()),
    }
}

/// Per-forward dropout state; `None` disables (inference and rate 0).
struct DropoutCtx<'r> {
    rate: f64,
    rng: &'r mut Rng,
}

fn maybe_dropout(tape: &mut Tape, x: NodeId, ctx: &mut Option<DropoutCtx<'_>>) -> NodeId {
    match ctx {
        Some(d) if d.rate > 0.0 => {
            let v = tape.value(x);
            let keep = 1.0 - d.rate;
            let mask = Tensor {
                rows: v.rows,
                cols: v.cols,
                data: (0..v.rows * v.cols)
                    .map(|_| if d.rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
                    .collect(),
            };
            let m = tape.leaf(mask);
            tape.mul(x, m)
        }
        _ => x,
    }
}

fn embed_sequence(tape: &mut Tape, table: NodeId, pos: NodeId, tokens: &[u32]) -> NodeId {
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let te = tape.gather_rows(table, &ids);
    let pids: Vec<usize> = (0..tokens.len()).collect();
    let pe = tape.gather_rows(pos, &pids);
    tape.add(te, pe)
}

fn encoder_stack(
    tape: &mut Tape,
    layers: &[BoundEncoderLayer],
    mut x: NodeId,
    mask: &[bool],
    num_heads: usize,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> NodeId {
    for layer in layers {
        let ln1 = tape.layer_norm(x);
        let q = tape.matmul(ln1, layer.wq);
        let k = tape.matmul(ln1, layer.wk);
        let v = tape.matmul(ln1, layer.wv);
        let att = tape.attention(q, k, v, num_heads, mask, false);
        let proj = tape.matmul(att, layer.wo);
        let proj = maybe_dropout(tape, proj, dropout);
        x = tape.add(x, proj);
        let ln2 = tape.layer_norm(x);
        let h = tape.matmul(ln2, layer.fc1);
        let hr = tape.relu(h);
        let ff = tape.matmul(hr, layer.fc2);
        let ff = maybe_dropout(tape, ff, dropout);
        x = tape.add(x, ff);
    }
    tape.layer_norm(x)
}

#[allow(clippy::too_many_arguments)]
fn decoder_logits(
    tape: &mut Tape,
    layers: &[BoundDecoderLayer],
    tgt_table: NodeId,
    pos_target: NodeId,
    out_proj: NodeId,
    memory: NodeId,
    memory_mask: &[bool],
    prefix: &[u32],
    num_heads: usize,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> NodeId {
    let mut y = embed_sequence(tape, tgt_table, pos_target, prefix);
    let tgt_mask = token_mask(prefix);
    for layer in layers {
        let ln1 = tape.layer_norm(y);
        let q = tape.matmul(ln1, layer.wq);
        let k = tape.matmul(ln1, layer.wk);
        let v = tape.matmul(ln1, layer.wv);
        let att = tape.attention(q, k, v, num_heads, &tgt_mask, true);
        let proj = tape.matmul(att, layer.wo);
        let proj = maybe_dropout(tape, proj, dropout);
        y = tape.add(y, proj);

        let ln2 = tape.layer_norm(y);
        let cq = tape.matmul(ln2, layer.cq);
        let ck = tape.matmul(memory, layer.ck);
        let cv = tape.matmul(memory, layer.cv);
        let catt = tape.attention(cq, ck, cv, num_heads, memory_mask, false);
        let cproj = tape.matmul(catt, layer.co);
        let cproj = maybe_dropout(tape, cproj, dropout);
        y = tape.add(y, cproj);

        let ln3 = tape.layer_norm(y);
        let h = tape.matmul(ln3, layer.fc1);
        let hr = tape.relu(h);
        let ff = tape.matmul(hr, layer.fc2);
        let ff = maybe_dropout(tape, ff, dropout);
        y = tape.add(y, ff);
    }
    let yf = tape.layer_norm(y);
    tape.matmul(yf, out_proj)
}

/// MEDOS fused encoding on the tape. Returns the fused node and the fused
/// (= review) mask.
fn medos_fused(
    tape: &mut Tape,
    bound: &BoundMedos,
    cfg: &ModelConfig,
    src: &TokenizedSources,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> (NodeId, Vec<bool>) {
    let r_mask = token_mask(&src.review_tokens);
    let d_mask = token_mask(&src.description_tokens);
    let q_mask = token_mask(&src.qa_tokens);
    let l_r = src.review_tokens.len();

    let emb_desc = bound.embedding_desc.unwrap_or(bound.embedding);
    let emb_qa = bound.embedding_qa.unwrap_or(bound.embedding);

    let xr = embed_sequence(tape, bound.embedding, bound.pos_reviews, &src.review_tokens);
    let er = encoder_stack(tape, &bound.encoder_reviews, xr, &r_mask, cfg.num_heads, dropout);
    let a_r = tape.zero_rows(er, &r_mask);

    let xd = embed_sequence(tape, emb_desc, bound.pos_desc, &src.description_tokens);
    let ed = encoder_stack(tape, &bound.encoder_desc, xd, &d_mask, cfg.num_heads, dropout);
    let ed = tape.zero_rows(ed, &d_mask);
    let a_d = tape.resize_rows(ed, l_r);

    let xq = embed_sequence(tape, emb_qa, bound.pos_qa, &src.qa_tokens);
    let eq = encoder_stack(tape, &bound.encoder_qa, xq, &q_mask, cfg.num_heads, dropout);
    let eq = tape.zero_rows(eq, &q_mask);
    let a_q = tape.resize_rows(eq, l_r);

    let cat_d = tape.concat_cols(a_r, a_d);
    let alpha_pre = tape.matmul(cat_d, bound.w_alpha);
    let alpha_t = tape.tanh(alpha_pre);
    let alpha = tape.relu(alpha_t);
    let gated_d = tape.mul(alpha, a_d);

    let cat_q = tape.concat_cols(a_r, a_q);
    let beta_pre = tape.matmul(cat_q, bound.w_beta);
    let beta_t = tape.tanh(beta_pre);
    let beta = tape.relu(beta_t);
    let gated_q = tape.mul(beta, a_q);

    let partial = tape.add(a_r, gated_d);
    let fused = tape.add(partial, gated_q);
    (fused, r_mask)
}

// ---------------------------------------------------------------------------
// Public value-level operations
// ---------------------------------------------------------------------------

fn check_tokens(tokens: &[u32], vocab: usize, name: &'static str, max: usize) -> Result<(), ModelError> {
    if tokens.len() > max {
        return Err(ModelError::SequenceTooLong {
            name,
            got: tokens.len(),
            max,
        });
    }
    for &t in tokens {
        if t as usize >= vocab {
            return Err(ModelError::TokenOutOfVocab { id: t, vocab });
        }
    }
    Ok(())
}

impl MedosParams {
    fn check_sources(&self, src: &TokenizedSources) -> Result<(), ModelError> {
        let c = &self.config;
        check_tokens(&src.review_tokens, c.vocab_size, "review", c.max_review_len)?;
        check_tokens(&src.description_tokens, c.vocab_size, "description", c.max_desc_len)?;
        check_tokens(&src.qa_tokens, c.vocab_size, "qa", c.max_qa_len)?;
        if let Some(t) = &src.target_tokens {
            check_tokens(t, c.vocab_size, "target", c.max_tgt_len)?;
        }
        Ok(())
    }

    /// Runs one source through its own encoder stack. Padded positions are
    /// zeroed in the returned states.
    pub fn encode_source(
        &self,
        tokens: &[u32],
        source_tag: SourceTag,
    ) -> Result<EncoderStates, ModelError> {
        let c = &self.config;
        let (layers, pos, table, max, name): (_, _, _, usize, &'static str) = match source_tag {
            SourceTag::Reviews => (
                &self.encoder_reviews,
                &self.pos_reviews,
                &self.embedding,
                c.max_review_len,
                "review",
            ),
            SourceTag::Description => (
                &self.encoder_desc,
                &self.pos_desc,
                self.embedding_desc.as_ref().unwrap_or(&self.embedding),
                c.max_desc_len,
                "description",
            ),
            SourceTag::Qa => (
                &self.encoder_qa,
                &self.pos_qa,
                self.embedding_qa.as_ref().unwrap_or(&self.embedding),
                c.max_qa_len,
                "qa",
            ),
            other => {
                return Err(ModelError::WrongSource {
                    op: "encode_source",
                    expected: "reviews|description|qa",
                    got: other,
                })
            }
        };
        check_tokens(tokens, c.vocab_size, name, max)?;
        let mask = token_mask(tokens);
        let mut tape = Tape::new();
        let table_n = tape.leaf(table.clone());
        let pos_n = tape.leaf(pos.clone());
        let bound_layers: Vec<BoundEncoderLayer> =
            layers.iter().map(|l| bind_encoder_layer(&mut tape, l)).collect();
        let x = embed_sequence(&mut tape, table_n, pos_n, tokens);
        let enc = encoder_stack(&mut tape, &bound_layers, x, &mask, c.num_heads, &mut None);
        let zeroed = tape.zero_rows(enc, &mask);
        Ok(EncoderStates {
            states: tape.value(zeroed).clone(),
            mask,
            source_tag,
        })
    }

    /// Full fused encoding of one instance, for decoding.
    pub fn encode_fused(&self, src: &TokenizedSources) -> Result<EncoderStates, ModelError> {
        self.check_sources(src)?;
        let mut tape = Tape::new();
        let bound = bind_medos(&mut tape, self);
        let (fused, mask) = medos_fused(&mut tape, &bound, &self.config, src, &mut None);
        Ok(EncoderStates {
            states: tape.value(fused).clone(),
            mask,
            source_tag: SourceTag::Fused,
        })
    }

    /// Per-position next-token log-distributions for a target prefix,
    /// cross-attending to already-computed source states.
    pub fn decode_logprobs(
        &self,
        memory: &EncoderStates,
        prefix: &[u32],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        decode_logprobs_common(
            &self.decoder,
            self.embedding_tgt.as_ref().unwrap_or(&self.embedding),
            &self.pos_target,
            &self.out_proj,
            &self.config,
            memory,
            prefix,
        )
    }

    /// Teacher-forced mean token negative log-likelihood over a batch.
    /// Returns `(loss, target token count)`.
    pub fn forward_loss(&self, batch: &[TokenizedSources]) -> Result<(f64, usize), ModelError> {
        let (loss, count, _) = self.forward_impl(batch, false, None)?;
        Ok((loss, count))
    }

    /// Loss plus parameter gradients (same shapes as the parameters).
    pub fn forward_backward(
        &self,
        batch: &[TokenizedSources],
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(f64, usize, MedosParams), ModelError> {
        let (loss, count, grads) = self.forward_impl(batch, true, dropout_rng)?;
        Ok((loss, count, grads.expect("gradients requested")))
    }

    fn forward_impl(
        &self,
        batch: &[TokenizedSources],
        want_grads: bool,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(f64, usize, Option<MedosParams>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for src in batch {
            self.check_sources(src)?;
            if src.target_tokens.is_none() {
                return Err(ModelError::ShapeMismatch(
                    "training batch item without target tokens".into(),
                ));
            }
        }
        let mut tape = Tape::new();
        let bound = bind_medos(&mut tape, self);
        let mut dropout = dropout_rng
            .filter(|_| self.config.dropout > 0.0)
            .map(|rng| DropoutCtx {
                rate: self.config.dropout,
                rng,
            });
        let mut ce_terms = Vec::with_capacity(batch.len());
        let mut total_tokens = 0usize;
        for src in batch {
            let (fused, fused_mask) = medos_fused(&mut tape, &bound, &self.config, src, &mut dropout);
            let target = src.target_tokens.as_ref().expect("checked above");
            let input = &target[..target.len() - 1];
            let labels: Vec<u32> = target[1..]
                .iter()
                .map(|&t| if t == crate::tokenizer::PAD { IGNORE_TARGET } else { t })
                .collect();
            total_tokens += labels.iter().filter(|&&t| t != IGNORE_TARGET).count();
            let tgt_table = bound.embedding_tgt.unwrap_or(bound.embedding);
            let logits = decoder_logits(
                &mut tape,
                &bound.decoder,
                tgt_table,
                bound.pos_target,
                bound.out_proj,
                fused,
                &fused_mask,
                input,
                self.config.num_heads,
                &mut dropout,
            );
            ce_terms.push(tape.sum_cross_entropy(logits, &labels));
        }
        let total = tape.add_scalars(&ce_terms);
        let loss_node = tape.scale(total, 1.0 / total_tokens.max(1) as f64);
        let loss = tape.value(loss_node).data[0];
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                batch_id: format!("batch of {}", batch.len()),
            });
        }
        if !want_grads {
            return Ok((loss, total_tokens, None));
        }
        tape.backward(loss_node);
        let mut grads = self.zeros_like();
        collect_medos_grads(&tape, &bound, &mut grads);
        Ok((loss, total_tokens, Some(grads)))
    }
}

fn copy_grad(tape: &Tape, node: NodeId, into: &mut Tensor) {
    into.data.copy_from_slice(tape.grad(node));
}

fn collect_layer_grads(tape: &Tape, b: &BoundEncoderLayer, g: &mut EncoderLayerParams) {
    copy_grad(tape, b.wq, &mut g.wq);
    copy_grad(tape, b.wk, &mut g.wk);
    copy_grad(tape, b.wv, &mut g.wv);
    copy_grad(tape, b.wo, &mut g.wo);
    copy_grad(tape, b.fc1, &mut g.fc1);
    copy_grad(tape, b.fc2, &mut g.fc2);
}

fn collect_dec_layer_grads(tape: &Tape, b: &BoundDecoderLayer, g: &mut DecoderLayerParams) {
    copy_grad(tape, b.wq, &mut g.wq);
    copy_grad(tape, b.wk, &mut g.wk);
    copy_grad(tape, b.wv, &mut g.wv);
    copy_grad(tape, b.wo, &mut g.wo);
    copy_grad(tape, b.cq, &mut g.cq);
    copy_grad(tape, b.ck, &mut g.ck);
    copy_grad(tape, b.cv, &mut g.cv);
    copy_grad(tape, b.co, &mut g.co);
    copy_grad(tape, b.fc1, &mut g.fc1);
    copy_grad(tape, b.fc2, &mut g.fc2);
}

fn collect_medos_grads(tape: &Tape, bound: &BoundMedos, grads: &mut MedosParams) {
    copy_grad(tape, bound.embedding, &mut grads.embedding);
    if let (Some(n), Some(t)) = (bound.embedding_desc, grads.embedding_desc.as_mut()) {
        copy_grad(tape, n, t);
    }
    if let (Some(n), Some(t)) = (bound.embedding_qa, grads.embedding_qa.as_mut()) {
        copy_grad(tape, n, t);
    }
    if let (Some(n), Some(t)) = (bound.embedding_tgt, grads.embedding_tgt.as_mut()) {
        copy_grad(tape, n, t);
    }
    copy_grad(tape, bound.pos_reviews, &mut grads.pos_reviews);
    copy_grad(tape, bound.pos_desc, &mut grads.pos_desc);
    copy_grad(tape, bound.pos_qa, &mut grads.pos_qa);
    copy_grad(tape, bound.pos_target, &mut grads.pos_target);
    for (b, g) in bound.encoder_reviews.iter().zip(&mut grads.encoder_reviews) {
        collect_layer_grads(tape, b, g);
    }
    for (b, g) in bound.encoder_desc.iter().zip(&mut grads.encoder_desc) {
        collect_layer_grads(tape, b, g);
    }
    for (b, g) in bound.encoder_qa.iter().zip(&mut grads.encoder_qa) {
        collect_layer_grads(tape, b, g);
    }
    for (b, g) in bound.decoder.iter().zip(&mut grads.decoder) {
        collect_dec_layer_grads(tape, b, g);
    }
    copy_grad(tape, bound.w_alpha, &mut grads.fusion.w_alpha);
    copy_grad(tape, bound.w_beta, &mut grads.fusion.w_beta);
    copy_grad(tape, bound.out_proj, &mut grads.out_proj);
}

fn decode_logprobs_common(
    decoder: &[DecoderLayerParams],
    tgt_table: &Tensor,
    pos_target: &Tensor,
    out_proj: &Tensor,
    config: &ModelConfig,
    memory: &EncoderStates,
    prefix: &[u32],
) -> Result<Vec<Vec<f64>>, ModelError> {
    if prefix.first() != Some(&BOS) {
        return Err(ModelError::MissingStartSentinel);
    }
    check_tokens(prefix, config.vocab_size, "target", config.max_tgt_len)?;
    if memory.states.rows != memory.mask.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "memory has {} rows but {} mask entries",
            memory.states.rows,
            memory.mask.len()
        )));
    }
    let mut tape = Tape::new();
    let mem = tape.leaf(memory.states.clone());
    let table_n = tape.leaf(tgt_table.clone());
    let pos_n = tape.leaf(pos_target.clone());
    let proj_n = tape.leaf(out_proj.clone());
    let bound: Vec<BoundDecoderLayer> =
        decoder.iter().map(|l| bind_decoder_layer(&mut tape, l)).collect();
    let logits = decoder_logits(
        &mut tape,
        &bound,
        table_n,
        pos_n,
        proj_n,
        mem,
        &memory.mask,
        prefix,
        config.num_heads,
        &mut None,
    );
    let ls = log_softmax_rows(tape.value(logits));
    Ok((0..ls.rows).map(|i| ls.row(i).to_vec()).collect())
}

impl ConcatParams {
    fn check_input(&self, tokens: &[u32], target: Option<&[u32]>) -> Result<(), ModelError> {
        let c = &self.config;
        check_tokens(tokens, c.vocab_size, "concat source", c.max_concat_len())?;
        if let Some(t) = target {
            check_tokens(t, c.vocab_size, "target", c.max_tgt_len)?;
        }
        Ok(())
    }

    /// Encodes the concatenated source sequence.
    pub fn encode(&self, tokens: &[u32]) -> Result<EncoderStates, ModelError> {
        self.check_input(tokens, None)?;
        let mask = token_mask(tokens);
        let mut tape = Tape::new();
        let bound = bind_concat(&mut tape, self);
        let x = embed_sequence(&mut tape, bound.embedding, bound.pos_src, tokens);
        let enc = encoder_stack(&mut tape, &bound.encoder, x, &mask, self.config.num_heads, &mut None);
        let zeroed = tape.zero_rows(enc, &mask);
        Ok(EncoderStates {
            states: tape.value(zeroed).clone(),
            mask,
            source_tag: SourceTag::Concat,
        })
    }

    pub fn decode_logprobs(
        &self,
        memory: &EncoderStates,
        prefix: &[u32],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        decode_logprobs_common(
            &self.decoder,
            self.embedding_tgt.as_ref().unwrap_or(&self.embedding),
            &self.pos_target,
            &self.out_proj,
            &self.config,
            memory,
            prefix,
        )
    }

    pub fn forward_loss(&self, batch: &[(Vec<u32>, Vec<u32>)]) -> Result<(f64, usize), ModelError> {
        let (loss, count, _) = self.forward_impl(batch, false, None)?;
        Ok((loss, count))
    }

    pub fn forward_backward(
        &self,
        batch: &[(Vec<u32>, Vec<u32>)],
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(f64, usize, ConcatParams), ModelError> {
        let (loss, count, grads) = self.forward_impl(batch, true, dropout_rng)?;
        Ok((loss, count, grads.expect("gradients requested")))
    }

    fn forward_impl(
        &self,
        batch: &[(Vec<u32>, Vec<u32>)],
        want_grads: bool,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(f64, usize, Option<ConcatParams>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for (src, tgt) in batch {
            self.check_input(src, Some(tgt))?;
        }
        let mut tape = Tape::new();
        let bound = bind_concat(&mut tape, self);
        let mut dropout = dropout_rng
            .filter(|_| self.config.dropout > 0.0)
            .map(|rng| DropoutCtx {
                rate: self.config.dropout,
                rng,
            });
        let mut ce_terms = Vec::with_capacity(batch.len());
        let mut total_tokens = 0usize;
        for (src, target) in batch {
            let mask = token_mask(src);
            let x = embed_sequence(&mut tape, bound.embedding, bound.pos_src, src);
            let enc = encoder_stack(
                &mut tape,
                &bound.encoder,
                x,
                &mask,
                self.config.num_heads,
                &mut dropout,
            );
            let memory = tape.zero_rows(enc, &mask);
            let input = &target[..target.len() - 1];
            let labels: Vec<u32> = target[1..]
                .iter()
                .map(|&t| if t == crate::tokenizer::PAD { IGNORE_TARGET } else { t })
                .collect();
            total_tokens += labels.iter().filter(|&&t| t != IGNORE_TARGET).count();
            let tgt_table = bound.embedding_tgt.unwrap_or(bound.embedding);
            let logits = decoder_logits(
                &mut tape,
                &bound.decoder,
                tgt_table,
                bound.pos_target,
                bound.out_proj,
                memory,
                &mask,
                input,
                self.config.num_heads,
                &mut dropout,
            );
            ce_terms.push(tape.sum_cross_entropy(logits, &labels));
        }
        let total = tape.add_scalars(&ce_terms);
        let loss_node = tape.scale(total, 1.0 / total_tokens.max(1) as f64);
        let loss = tape.value(loss_node).data[0];
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                batch_id: format!("batch of {}", batch.len()),
            });
        }
        if !want_grads {
            return Ok((loss, total_tokens, None));
        }
        tape.backward(loss_node);
        let mut grads = self.zeros_like();
        copy_grad(&tape, bound.embedding, &mut grads.embedding);
        if let (Some(n), Some(t)) = (bound.embedding_tgt, grads.embedding_tgt.as_mut()) {
            copy_grad(&tape, n, t);
        }
        copy_grad(&tape, bound.pos_src, &mut grads.pos_src);
        copy_grad(&tape, bound.pos_target, &mut grads.pos_target);
        for (b, g) in bound.encoder.iter().zip(&mut grads.encoder) {
            collect_layer_grads(&tape, b, g);
        }
        for (b, g) in bound.decoder.iter().zip(&mut grads.decoder) {
            collect_dec_layer_grads(&tape, b, g);
        }
        copy_grad(&tape, bound.out_proj, &mut grads.out_proj);
        Ok((loss, total_tokens, Some(grads)))
    }
}

// ---------------------------------------------------------------------------
// Pure fusion helpers (value-level mirrors of the tape path)
// ---------------------------------------------------------------------------

/// Truncates or zero-pads states and mask to exactly `target_len` rows;
/// masked rows keep all-zero state vectors.
pub fn align_states(x: &EncoderStates, target_len: usize) -> EncoderStates {
    assert!(target_len >= 1, "target length must be positive");
    let d = x.states.cols;
    let mut states = Tensor::zeros(target_len, d);
    let keep = x.states.rows.min(target_len);
    states.data[..keep * d].copy_from_slice(&x.states.data[..keep * d]);
    let mut mask = vec![false; target_len];
    mask[..keep].copy_from_slice(&x.mask[..keep]);
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            states.data[i * d..(i + 1) * d].fill(0.0);
        }
    }
    EncoderStates {
        states,
        mask,
        source_tag: x.source_tag,
    }
}

/// `phi([a_R ; a_X] W)` with `phi(x) = relu(tanh(x))`; every entry is in
/// [0, 1).
pub fn compute_gate(
    a_r: &EncoderStates,
    a_x: &EncoderStates,
    w: &Tensor,
) -> Result<Tensor, ModelError> {
    let (l, d) = (a_r.states.rows, a_r.states.cols);
    if a_x.states.rows != l || a_x.states.cols != d {
        return Err(ModelError::ShapeMismatch(format!(
            "gate inputs disagree: {}x{} vs {}x{}",
            l, d, a_x.states.rows, a_x.states.cols
        )));
    }
    if w.rows != 2 * d || w.cols != d {
        return Err(ModelError::ShapeMismatch(format!(
            "gate projection must be {}x{}, got {}x{}",
            2 * d,
            d,
            w.rows,
            w.cols
        )));
    }
    let mut gate = Tensor::zeros(l, d);
    for i in 0..l {
        for j in 0..d {
            let mut pre = 0.0;
            for p in 0..d {
                pre += a_r.states.at(i, p) * w.at(p, j);
                pre += a_x.states.at(i, p) * w.at(d + p, j);
            }
            gate.set(i, j, pre.tanh().max(0.0));
        }
    }
    Ok(gate)
}

/// `a_f = a_R + alpha .* a_D + beta .* a_Q`; the fused mask is the review
/// mask.
pub fn fuse(
    a_r: &EncoderStates,
    a_d: &EncoderStates,
    a_q: &EncoderStates,
    alpha: &Tensor,
    beta: &Tensor,
) -> Result<EncoderStates, ModelError> {
    let (l, d) = (a_r.states.rows, a_r.states.cols);
    for (name, t) in [("a_D", &a_d.states), ("a_Q", &a_q.states), ("alpha", alpha), ("beta", beta)]
    {
        if t.rows != l || t.cols != d {
            return Err(ModelError::ShapeMismatch(format!(
                "{name} must be {}x{}, got {}x{}",
                l, d, t.rows, t.cols
            )));
        }
    }
    let mut states = a_r.states.clone();
    for i in 0..l * d {
        states.data[i] += alpha.data[i] * a_d.states.data[i] + beta.data[i] * a_q.states.data[i];
    }
    Ok(EncoderStates {
        states,
        mask: a_r.mask.clone(),
        source_tag: SourceTag::Fused,
    })
}

// ---------------------------------------------------------------------------
// Architecture wrapper
// ---------------------------------------------------------------------------

/// Architecture selector for the CLI and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Medos,
    Concat,
}

impl std::str::FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "medos" => Ok(Arch::Medos),
            "concat" => Ok(Arch::Concat),
            other => Err(format!("unknown arch {other:?}, expected medos|concat")),
        }
    }
}

/// Tokenized input of either architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    Medos(TokenizedSources),
    Concat {
        source_tokens: Vec<u32>,
        target_tokens: Option<Vec<u32>>,
    },
}

impl ModelInput {
    pub fn target_tokens(&self) -> Option<&[u32]> {
        match self {
            ModelInput::Medos(src) => src.target_tokens.as_deref(),
            ModelInput::Concat { target_tokens, .. } => target_tokens.as_deref(),
        }
    }
}

/// A trained (or in-training) summarizer of either architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
#[allow(clippy::large_enum_variant)]
pub enum SummaryModel {
    Medos(MedosParams),
    Concat(ConcatParams),
}

/// Gradients, mirroring the parameter layout.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum ModelGrads {
    Medos(MedosParams),
    Concat(ConcatParams),
}

impl SummaryModel {
    pub fn init(arch: Arch, config: ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        Ok(match arch {
            Arch::Medos => SummaryModel::Medos(MedosParams::init(config, rng)?),
            Arch::Concat => SummaryModel::Concat(ConcatParams::init(config, rng)?),
        })
    }

    pub fn arch(&self) -> Arch {
        match self {
            SummaryModel::Medos(_) => Arch::Medos,
            SummaryModel::Concat(_) => Arch::Concat,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            SummaryModel::Medos(p) => &p.config,
            SummaryModel::Concat(p) => &p.config,
        }
    }

    /// Tokenizes one instance's texts for this architecture.
    pub fn prepare_input(
        &self,
        tok: &Tokenizer,
        reviews: &[String],
        description: Option<&str>,
        qa: &[String],
        target: Option<&str>,
    ) -> ModelInput {
        match self {
            SummaryModel::Medos(p) => ModelInput::Medos(tokenize_sources(
                tok,
                &p.config.limits(),
                reviews,
                description,
                qa,
                target,
            )),
            SummaryModel::Concat(p) => {
                let source_tokens =
                    concat_sources(tok, p.config.max_concat_len(), reviews, description, qa);
                let target_tokens = tokenize_sources(
                    tok,
                    &p.config.limits(),
                    reviews,
                    description,
                    qa,
                    target,
                )
                .target_tokens;
                ModelInput::Concat {
                    source_tokens,
                    target_tokens,
                }
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn split_batch<'a>(
        &self,
        batch: &'a [ModelInput],
    ) -> Result<(Vec<&'a TokenizedSources>, Vec<(Vec<u32>, Vec<u32>)>), ModelError> {
        let mut medos = Vec::new();
        let mut concat = Vec::new();
        for item in batch {
            match (self, item) {
                (SummaryModel::Medos(_), ModelInput::Medos(src)) => medos.push(src),
                (
                    SummaryModel::Concat(_),
                    ModelInput::Concat {
                        source_tokens,
                        target_tokens,
                    },
                ) => {
                    let target = target_tokens.clone().ok_or_else(|| {
                        ModelError::ShapeMismatch("training batch item without target tokens".into())
                    })?;
                    concat.push((source_tokens.clone(), target));
                }
                _ => {
                    return Err(ModelError::ShapeMismatch(
                        "input prepared for a different architecture".into(),
                    ))
                }
            }
        }
        Ok((medos, concat))
    }

    pub fn forward_loss(&self, batch: &[ModelInput]) -> Result<(f64, usize), ModelError> {
        let (medos, concat) = self.split_batch(batch)?;
        match self {
            SummaryModel::Medos(p) => {
                let owned: Vec<TokenizedSources> = medos.into_iter().cloned().collect();
                p.forward_loss(&owned)
            }
            SummaryModel::Concat(p) => p.forward_loss(&concat),
        }
    }

    pub fn forward_backward(
        &self,
        batch: &[ModelInput],
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(f64, usize, ModelGrads), ModelError> {
        let (medos, concat) = self.split_batch(batch)?;
        match self {
            SummaryModel::Medos(p) => {
                let owned: Vec<TokenizedSources> = medos.into_iter().cloned().collect();
                let (loss, count, grads) = p.forward_backward(&owned, dropout_rng)?;
                Ok((loss, count, ModelGrads::Medos(grads)))
            }
            SummaryModel::Concat(p) => {
                let (loss, count, grads) = p.forward_backward(&concat, dropout_rng)?;
                Ok((loss, count, ModelGrads::Concat(grads)))
            }
        }
    }

    /// Source encoding for decoding: fused states for the multi-encoder,
    /// plain encoder states for the baseline.
    pub fn encode_for_decoding(&self, input: &ModelInput) -> Result<EncoderStates, ModelError> {
        match (self, input) {
            (SummaryModel::Medos(p), ModelInput::Medos(src)) => p.encode_fused(src),
            (SummaryModel::Concat(p), ModelInput::Concat { source_tokens, .. }) => {
                p.encode(source_tokens)
            }
            _ => Err(ModelError::ShapeMismatch(
                "input prepared for a different architecture".into(),
            )),
        }
    }

    pub fn decode_logprobs(
        &self,
        memory: &EncoderStates,
        prefix: &[u32],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        match self {
            SummaryModel::Medos(p) => p.decode_logprobs(memory, prefix),
            SummaryModel::Concat(p) => p.decode_logprobs(memory, prefix),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            SummaryModel::Medos(p) => p.tensors(),
            SummaryModel::Concat(p) => p.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            SummaryModel::Medos(p) => p.tensors_mut(),
            SummaryModel::Concat(p) => p.tensors_mut(),
        }
    }
}

impl ModelGrads {
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            ModelGrads::Medos(p) => p.tensors(),
            ModelGrads::Concat(p) => p.tensors(),
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing checkpoint: version, config, vocabulary, parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub tokenizer: Tokenizer,
    pub model: SummaryModel,
}

pub fn save_checkpoint(
    path: &Path,
    model: &SummaryModel,
    tokenizer: &Tokenizer,
) -> Result<(), ModelError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| ModelError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        tokenizer: tokenizer.clone(),
        model: model.clone(),
    };
    let body = serde_json::to_string(&ckpt).map_err(|e| ModelError::Checkpoint {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, body).map_err(|e| ModelError::Checkpoint {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(SummaryModel, Tokenizer), ModelError> {
    let body = std::fs::read_to_string(path).map_err(|e| ModelError::Checkpoint {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut ckpt: Checkpoint = serde_json::from_str(&body).map_err(|e| ModelError::Checkpoint {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint {
            path: path.display().to_string(),
            message: format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            ),
        });
    }
    ckpt.tokenizer.rebuild_index();
    Ok((ckpt.model, ckpt.tokenizer))
}
