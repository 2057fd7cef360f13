//! The toy autoregressive transformer LM.
//!
//! Pre-norm decoder blocks over a word-level vocabulary, f64 throughout.
//! "Neuron" means one coordinate of the residual stream at a block boundary:
//! layer 0 is the embedding output, layer `l >= 1` the output of block `l`.
//! Attention heads are addressed by (block, head) with blocks numbered from 1;
//! the head-level intervention point is the pre-output-projection per-head
//! context vector (length `d_head`).

mod backward;
pub(crate) mod checkpoint;
mod forward;
pub(crate) mod math;
mod train;

pub use backward::{sequence_loss, sequence_loss_and_grad};
pub use checkpoint::{load_model, load_model_expecting, load_train_state, save_model, save_train_state};
pub use forward::{
    continuation_logprob, forward, forward_attention_disabled, forward_instrumented,
    forward_logits_all, forward_patched, InstrumentedRun,
};
pub(crate) use forward::{resume_head, resume_neuron};
pub use train::{
    eval_mean_loss, init_train_state, split_corpus, train, train_chunk, TrainConfig, TrainState,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mix_seed;

/// Architecture configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::InvalidConfig("layers, d_model and heads must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::InvalidConfig("max_seq_len must be >= 2".into()));
        }
        Ok(())
    }
}

/// Per-block parameters. Weight matrices are row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub w_q: Vec<f64>,
    pub b_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub b_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub b_v: Vec<f64>,
    pub w_o: Vec<f64>,
    pub b_o: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w_up: Vec<f64>,
    pub b_up: Vec<f64>,
    pub w_down: Vec<f64>,
    pub b_down: Vec<f64>,
}

/// All model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl Params {
    pub fn zeros_like(cfg: &ModelConfig) -> Params {
        let d = cfg.d_model;
        let h = cfg.d_hidden();
        let layer = || LayerParams {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            w_q: vec![0.0; d * d],
            b_q: vec![0.0; d],
            w_k: vec![0.0; d * d],
            b_k: vec![0.0; d],
            w_v: vec![0.0; d * d],
            b_v: vec![0.0; d],
            w_o: vec![0.0; d * d],
            b_o: vec![0.0; d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w_up: vec![0.0; h * d],
            b_up: vec![0.0; h],
            w_down: vec![0.0; d * h],
            b_down: vec![0.0; d],
        };
        Params {
            tok_emb: vec![0.0; cfg.vocab_size * d],
            pos_emb: vec![0.0; cfg.max_seq_len * d],
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
            w_out: vec![0.0; cfg.vocab_size * d],
            b_out: vec![0.0; cfg.vocab_size],
        }
    }

    /// Named blocks in the documented checkpoint order.
    pub fn blocks(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out: Vec<(String, &Vec<f64>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, v) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("w_q", &l.w_q),
                ("b_q", &l.b_q),
                ("w_k", &l.w_k),
                ("b_k", &l.b_k),
                ("w_v", &l.w_v),
                ("b_v", &l.b_v),
                ("w_o", &l.w_o),
                ("b_o", &l.b_o),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w_up", &l.w_up),
                ("b_up", &l.b_up),
                ("w_down", &l.w_down),
                ("b_down", &l.b_down),
            ] {
                out.push((format!("layer{i}.{name}"), v));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, v) in [
                ("ln1_g", &mut l.ln1_g),
                ("ln1_b", &mut l.ln1_b),
                ("w_q", &mut l.w_q),
                ("b_q", &mut l.b_q),
                ("w_k", &mut l.w_k),
                ("b_k", &mut l.b_k),
                ("w_v", &mut l.w_v),
                ("b_v", &mut l.b_v),
                ("w_o", &mut l.w_o),
                ("b_o", &mut l.b_o),
                ("ln2_g", &mut l.ln2_g),
                ("ln2_b", &mut l.ln2_b),
                ("w_up", &mut l.w_up),
                ("b_up", &mut l.b_up),
                ("w_down", &mut l.w_down),
                ("b_down", &mut l.b_down),
            ] {
                out.push((format!("layer{i}.{name}"), v));
            }
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("w_out".into(), &mut self.w_out));
        out.push(("b_out".into(), &mut self.b_out));
        out
    }

    pub fn total_len(&self) -> usize {
        self.blocks().iter().map(|(_, v)| v.len()).sum()
    }

    /// Expected shape per block name, driven by the config.
    pub fn block_shape(cfg: &ModelConfig, name: &str) -> Option<Vec<usize>> {
        let d = cfg.d_model;
        let h = cfg.d_hidden();
        let tail = name.rsplit('.').next()?;
        let shape = match tail {
            "tok_emb" | "w_out" => vec![cfg.vocab_size, d],
            "pos_emb" => vec![cfg.max_seq_len, d],
            "b_out" => vec![cfg.vocab_size],
            "ln1_g" | "ln1_b" | "ln2_g" | "ln2_b" | "lnf_g" | "lnf_b" => vec![d],
            "w_q" | "w_k" | "w_v" | "w_o" => vec![d, d],
            "b_q" | "b_k" | "b_v" | "b_o" | "b_down" => vec![d],
            "w_up" => vec![h, d],
            "b_up" => vec![h],
            "w_down" => vec![d, h],
            _ => return None,
        };
        Some(shape)
    }

    /// Blocks that receive decoupled weight decay (2-D projection matrices).
    pub fn decays(name: &str) -> bool {
        let tail = name.rsplit('.').next().unwrap_or(name);
        matches!(tail, "w_q" | "w_k" | "w_v" | "w_o" | "w_up" | "w_down" | "w_out")
    }
}

/// Parameters plus architecture; immutable after construction or training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub config: ModelConfig,
    pub params: Params,
}

/// Random initialization: weights and embeddings N(0, 0.02^2), biases zero,
/// layer-norm gains one. Deterministic per `init_seed`; this also serves as
/// the random-weights control model.
pub fn init_model(config: &ModelConfig) -> Result<ModelSnapshot> {
    config.validate()?;
    let mut params = Params::zeros_like(config);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.init_seed, "init"));
    for (name, block) in params.blocks_mut() {
        let tail = name.rsplit('.').next().unwrap_or(&name);
        match tail {
            "tok_emb" | "pos_emb" | "w_q" | "w_k" | "w_v" | "w_o" | "w_up" | "w_down"
            | "w_out" => math::fill_normal(block, 0.02, &mut rng),
            "ln1_g" | "ln2_g" | "lnf_g" => block.fill(1.0),
            _ => block.fill(0.0),
        }
    }
    Ok(ModelSnapshot { config: *config, params })
}

/// A residual-stream coordinate. Layer 0 is the embedding output; layer
/// `l >= 1` is the residual stream after block `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NeuronId {
    pub layer: usize,
    pub neuron: usize,
}

impl NeuronId {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer > cfg.n_layers || self.neuron >= cfg.d_model {
            return Err(Error::PatchOutOfRange(format!(
                "neuron ({}, {}) outside layers 0..={} x width {}",
                self.layer, self.neuron, cfg.n_layers, cfg.d_model
            )));
        }
        Ok(())
    }
}

/// An attention head; blocks are numbered 1..=n_layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer == 0 || self.layer > cfg.n_layers || self.head >= cfg.n_heads {
            return Err(Error::PatchOutOfRange(format!(
                "head ({}, {}) outside layers 1..={} x heads {}",
                self.layer, self.head, cfg.n_layers, cfg.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mediator {
    Neuron(NeuronId),
    Head(HeadId),
}

/// A mediator override applied during a forward pass. Neurons take a scalar;
/// heads take a `d_head` context vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEntry {
    pub mediator: Mediator,
    pub position: usize,
    pub value: PatchValue,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatchValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchSet {
    entries: Vec<PatchEntry>,
}

impl PatchSet {
    pub fn new() -> PatchSet {
        PatchSet { entries: Vec::new() }
    }

    pub fn push(&mut self, entry: PatchEntry) -> Result<()> {
        if self
            .entries
            .iter()
            .any(|e| e.mediator == entry.mediator && e.position == entry.position)
        {
            return Err(Error::PatchOutOfRange(format!(
                "duplicate patch key ({:?}, {})",
                entry.mediator, entry.position
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn neuron(mut self, id: NeuronId, position: usize, value: f64) -> Result<PatchSet> {
        self.push(PatchEntry { mediator: Mediator::Neuron(id), position, value: PatchValue::Scalar(value) })?;
        Ok(self)
    }

    pub fn head(mut self, id: HeadId, position: usize, value: Vec<f64>) -> Result<PatchSet> {
        self.push(PatchEntry { mediator: Mediator::Head(id), position, value: PatchValue::Vector(value) })?;
        Ok(self)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PatchEntry] {
        &self.entries
    }

    pub fn validate(&self, cfg: &ModelConfig, seq_len: usize) -> Result<()> {
        for e in &self.entries {
            if e.position >= seq_len {
                return Err(Error::PatchOutOfRange(format!(
                    "patch position {} >= sequence length {seq_len}",
                    e.position
                )));
            }
            match (&e.mediator, &e.value) {
                (Mediator::Neuron(id), PatchValue::Scalar(_)) => id.validate(cfg)?,
                (Mediator::Head(id), PatchValue::Vector(v)) => {
                    id.validate(cfg)?;
                    if v.len() != cfg.d_head() {
                        return Err(Error::PatchOutOfRange(format!(
                            "head patch vector length {} != d_head {}",
                            v.len(),
                            cfg.d_head()
                        )));
                    }
                }
                _ => {
                    return Err(Error::PatchOutOfRange(
                        "neuron patches take scalars, head patches take vectors".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Captured activations from one forward pass: residual stream at every block
/// boundary (`n_layers + 1` of them) and every head's pre-projection context
/// vector. Heads are stored concatenated per position.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    residual: Vec<f64>,
    head_ctx: Vec<f64>,
}

impl ActivationTrace {
    pub(crate) fn from_parts(
        cfg: &ModelConfig,
        seq_len: usize,
        residual: Vec<f64>,
        head_ctx: Vec<f64>,
    ) -> ActivationTrace {
        debug_assert_eq!(residual.len(), (cfg.n_layers + 1) * seq_len * cfg.d_model);
        debug_assert_eq!(head_ctx.len(), cfg.n_layers * seq_len * cfg.d_model);
        ActivationTrace {
            n_layers: cfg.n_layers,
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            seq_len,
            residual,
            head_ctx,
        }
    }

    /// Residual stream at boundary `layer` (0 = embedding output), `[T x d]`.
    pub fn residual_layer(&self, layer: usize) -> &[f64] {
        let n = self.seq_len * self.d_model;
        &self.residual[layer * n..(layer + 1) * n]
    }

    pub fn residual_at(&self, layer: usize, position: usize) -> &[f64] {
        let row = self.residual_layer(layer);
        &row[position * self.d_model..(position + 1) * self.d_model]
    }

    pub fn neuron_value(&self, id: NeuronId, position: usize) -> f64 {
        self.residual_at(id.layer, position)[id.neuron]
    }

    /// Pre-projection context vector of `head` in block `layer` (1-based).
    pub fn head_ctx_at(&self, layer: usize, head: usize, position: usize) -> &[f64] {
        let d_head = self.d_model / self.n_heads;
        let n = self.seq_len * self.d_model;
        let base = (layer - 1) * n + position * self.d_model + head * d_head;
        &self.head_ctx[base..base + d_head]
    }

    pub(crate) fn raw(&self) -> (&[f64], &[f64]) {
        (&self.residual, &self.head_ctx)
    }

    pub fn all_finite(&self) -> bool {
        self.residual.iter().chain(self.head_ctx.iter()).all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_layers: usize, d_model: usize, n_heads: usize) -> ModelConfig {
        ModelConfig { n_layers, d_model, n_heads, vocab_size: 11, max_seq_len: 8, init_seed: 0 }
    }

    #[test]
    fn init_is_deterministic() {
        let c = cfg(2, 16, 4);
        let a = init_model(&c).unwrap();
        let b = init_model(&c).unwrap();
        assert_eq!(a, b);
        let c2 = ModelConfig { init_seed: 1, ..c };
        assert_ne!(init_model(&c2).unwrap(), a);
    }

    #[test]
    fn invalid_config_rejected() {
        let c = cfg(2, 30, 4);
        assert!(matches!(init_model(&c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let c = ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            vocab_size: 100,
            max_seq_len: 32,
            init_seed: 0,
        };
        let m = init_model(&c).unwrap();
        let d = c.d_model;
        let h = 4 * d;
        // embeddings + per-layer (attention, mlp, two norms) + final norm + head
        let per_layer = 4 * (d * d + d) + 2 * (2 * d) + (h * d + h) + (d * h + d);
        let expected = c.vocab_size * d
            + c.max_seq_len * d
            + c.n_layers * per_layer
            + 2 * d
            + c.vocab_size * d
            + c.vocab_size;
        assert_eq!(m.params.total_len(), expected);
    }

    #[test]
    fn patchset_rejects_duplicates_and_bad_shapes() {
        let c = cfg(2, 16, 4);
        let n = NeuronId { layer: 1, neuron: 3 };
        let ps = PatchSet::new().neuron(n, 0, 1.0).unwrap();
        assert!(ps.clone().neuron(n, 0, 2.0).is_err());
        assert!(ps.clone().neuron(n, 1, 2.0).is_ok());

        let bad_head = HeadId { layer: 0, head: 0 };
        let ps2 = PatchSet::new().head(bad_head, 0, vec![0.0; 4]).unwrap();
        assert!(ps2.validate(&c, 4).is_err());

        let good_head = HeadId { layer: 1, head: 0 };
        let ps3 = PatchSet::new().head(good_head, 0, vec![0.0; 3]).unwrap();
        assert!(ps3.validate(&c, 4).is_err(), "wrong d_head length");

        let ps4 = PatchSet::new().neuron(NeuronId { layer: 3, neuron: 0 }, 0, 1.0).unwrap();
        assert!(ps4.validate(&c, 4).is_err(), "layer out of range");

        let ps5 = PatchSet::new().neuron(NeuronId { layer: 1, neuron: 0 }, 9, 1.0).unwrap();
        assert!(ps5.validate(&c, 4).is_err(), "position out of range");
    }

    #[test]
    fn block_shapes_cover_all_blocks() {
        let c = cfg(3, 16, 4);
        let m = init_model(&c).unwrap();
        for (name, v) in m.params.blocks() {
            let shape = Params::block_shape(&c, &name).expect("every block has a shape");
            assert_eq!(shape.iter().product::<usize>(), v.len(), "block {name}");
        }
    }
}
