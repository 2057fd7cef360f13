//! Instrumented forward passes.
//!
//! Three entry points share one block implementation:
//!   - `forward` / `forward_instrumented`: full pass with activation capture;
//!   - `forward_patched`: full pass with arbitrary mediator overrides;
//!   - `resume_neuron` / `resume_head`: restart from a cached block boundary,
//!     recomputing only positions at or after the earliest patched position.
//!
//! The resume path replays exactly the arithmetic the full pass would run on
//! the affected region and copies cached values elsewhere, so its outputs are
//! bit-identical to `forward_patched` on the same override. Attention is only
//! ever taken over keys at or before the query position, which makes the
//! causality invariant exact rather than approximate.

use super::math::{dot, gelu, layer_norm, log_softmax, matvec, softmax_inplace};
use super::{ActivationTrace, Mediator, ModelConfig, ModelSnapshot, PatchSet, PatchValue};
use crate::error::{Error, Result};

/// Output of an instrumented pass: final-position log-probabilities, the
/// activation trace, and the per-block key/value rows the resume path needs.
#[derive(Debug, Clone)]
pub struct InstrumentedRun {
    pub logprobs: Vec<f64>,
    pub trace: ActivationTrace,
    pub(crate) kv: Vec<(Vec<f64>, Vec<f64>)>,
}

fn validate_tokens(model: &ModelSnapshot, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidConfig("empty token sequence".into()));
    }
    if tokens.len() > model.config.max_seq_len {
        return Err(Error::SequenceTooLong { len: tokens.len(), max: model.config.max_seq_len });
    }
    for &t in tokens {
        if (t as usize) >= model.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: model.config.vocab_size,
            });
        }
    }
    Ok(())
}

fn embed(model: &ModelSnapshot, tokens: &[u32]) -> Vec<f64> {
    let d = model.config.d_model;
    let mut x = vec![0.0; tokens.len() * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let e = &model.params.tok_emb[tok as usize * d..(tok as usize + 1) * d];
        let p = &model.params.pos_emb[t * d..(t + 1) * d];
        let row = &mut x[t * d..(t + 1) * d];
        for i in 0..d {
            row[i] = e[i] + p[i];
        }
    }
    x
}

fn output_logprobs(model: &ModelSnapshot, x_final: &[f64]) -> Vec<f64> {
    let d = model.config.d_model;
    let mut y = vec![0.0; d];
    layer_norm(x_final, &model.params.lnf_g, &model.params.lnf_b, &mut y);
    let mut logits = vec![0.0; model.config.vocab_size];
    matvec(&model.params.w_out, &model.params.b_out, &y, &mut logits);
    log_softmax(&logits)
}

/// Cached values from the unpatched run of the same input, used to skip
/// positions the patch cannot affect.
struct NullCache<'a> {
    k: &'a [f64],
    v: &'a [f64],
    out: &'a [f64],
}

struct Capture {
    k: Vec<f64>,
    v: Vec<f64>,
    ctx: Vec<f64>,
}

/// One pre-norm block. Positions below `dirty_from` are copied from the null
/// cache; positions in `dirty_from..full_from` contribute fresh keys/values
/// but skip the rest of the block (their outputs are not consumed); positions
/// at or after `full_from` are fully recomputed. `overrides` replaces a
/// head's pre-projection context vector at a position.
#[allow(clippy::too_many_arguments)]
fn block_apply(
    cfg: &ModelConfig,
    lp: &super::LayerParams,
    x_in: &[f64],
    t_len: usize,
    dirty_from: usize,
    full_from: usize,
    cache: Option<&NullCache>,
    overrides: &[(usize, usize, &[f64])],
    mut capture: Option<&mut Capture>,
) -> Vec<f64> {
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let dh = cfg.d_head();
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    let mut k = vec![0.0; t_len * d];
    let mut v = vec![0.0; t_len * d];
    let mut out = vec![0.0; t_len * d];
    if let Some(c) = cache {
        let n = dirty_from * d;
        k[..n].copy_from_slice(&c.k[..n]);
        v[..n].copy_from_slice(&c.v[..n]);
        // rows below full_from are placeholders for the kv-only region
        out[..full_from * d].copy_from_slice(&c.out[..full_from * d]);
    }

    let mut a = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut ctx = vec![0.0; d];
    let mut attn = vec![0.0; d];
    let mut m = vec![0.0; d];
    let mut up = vec![0.0; cfg.d_hidden()];
    let mut down = vec![0.0; d];
    let mut scores = vec![0.0; t_len];

    for t in dirty_from..t_len {
        let x_row = &x_in[t * d..(t + 1) * d];
        layer_norm(x_row, &lp.ln1_g, &lp.ln1_b, &mut a);
        {
            let (kt, vt) = (&mut k[t * d..(t + 1) * d], &mut v[t * d..(t + 1) * d]);
            matvec(&lp.w_k, &lp.b_k, &a, kt);
            matvec(&lp.w_v, &lp.b_v, &a, vt);
        }
        if t < full_from {
            continue;
        }
        matvec(&lp.w_q, &lp.b_q, &a, &mut q);

        for h in 0..n_heads {
            let ctx_h = &mut ctx[h * dh..(h + 1) * dh];
            if let Some((_, _, vals)) =
                overrides.iter().find(|(oh, op, _)| *oh == h && *op == t)
            {
                ctx_h.copy_from_slice(vals);
                continue;
            }
            let q_h = &q[h * dh..(h + 1) * dh];
            for (u, s) in scores[..=t].iter_mut().enumerate() {
                *s = dot(q_h, &k[u * d + h * dh..u * d + h * dh + dh]) * inv_sqrt_dh;
            }
            softmax_inplace(&mut scores[..=t]);
            ctx_h.fill(0.0);
            for u in 0..=t {
                let p = scores[u];
                let v_h = &v[u * d + h * dh..u * d + h * dh + dh];
                for j in 0..dh {
                    ctx_h[j] += p * v_h[j];
                }
            }
        }
        if let Some(cap) = capture.as_deref_mut() {
            cap.ctx[t * d..(t + 1) * d].copy_from_slice(&ctx);
        }

        matvec(&lp.w_o, &lp.b_o, &ctx, &mut attn);
        let out_row = &mut out[t * d..(t + 1) * d];
        for i in 0..d {
            out_row[i] = x_row[i] + attn[i];
        }
        layer_norm(out_row, &lp.ln2_g, &lp.ln2_b, &mut m);
        matvec(&lp.w_up, &lp.b_up, &m, &mut up);
        for u in up.iter_mut() {
            *u = gelu(*u);
        }
        matvec(&lp.w_down, &lp.b_down, &up, &mut down);
        for i in 0..d {
            out_row[i] += down[i];
        }
    }

    if let Some(cap) = capture {
        cap.k = k;
        cap.v = v;
    }
    out
}

/// Full pass with activation capture.
pub fn forward_instrumented(model: &ModelSnapshot, tokens: &[u32]) -> Result<InstrumentedRun> {
    validate_tokens(model, tokens)?;
    let cfg = &model.config;
    let t_len = tokens.len();
    let d = cfg.d_model;

    let mut residual = Vec::with_capacity((cfg.n_layers + 1) * t_len * d);
    let mut head_ctx = Vec::with_capacity(cfg.n_layers * t_len * d);
    let mut kv = Vec::with_capacity(cfg.n_layers);

    let mut x = embed(model, tokens);
    residual.extend_from_slice(&x);
    for lp in &model.params.layers {
        let mut cap =
            Capture { k: Vec::new(), v: Vec::new(), ctx: vec![0.0; t_len * d] };
        x = block_apply(cfg, lp, &x, t_len, 0, 0, None, &[], Some(&mut cap));
        residual.extend_from_slice(&x);
        head_ctx.extend_from_slice(&cap.ctx);
        kv.push((cap.k, cap.v));
    }
    let logprobs = output_logprobs(model, &x[(t_len - 1) * d..]);
    let trace = ActivationTrace::from_parts(cfg, t_len, residual, head_ctx);
    Ok(InstrumentedRun { logprobs, trace, kv })
}

/// Next-token log-probabilities at the final position plus the trace.
pub fn forward(model: &ModelSnapshot, tokens: &[u32]) -> Result<(Vec<f64>, ActivationTrace)> {
    let run = forward_instrumented(model, tokens)?;
    Ok((run.logprobs, run.trace))
}

/// Log-probability of one continuation token at the final position.
pub fn continuation_logprob(model: &ModelSnapshot, tokens: &[u32], continuation: u32) -> Result<f64> {
    if (continuation as usize) >= model.config.vocab_size {
        return Err(Error::TokenOutOfRange {
            token: continuation,
            vocab_size: model.config.vocab_size,
        });
    }
    let run = forward_instrumented(model, tokens)?;
    Ok(run.logprobs[continuation as usize])
}

/// Logits for every position, `[T x vocab]` row-major. Used by the causality
/// checks and evaluation code.
pub fn forward_logits_all(model: &ModelSnapshot, tokens: &[u32]) -> Result<Vec<f64>> {
    validate_tokens(model, tokens)?;
    let cfg = &model.config;
    let t_len = tokens.len();
    let d = cfg.d_model;
    let mut x = embed(model, tokens);
    for lp in &model.params.layers {
        x = block_apply(cfg, lp, &x, t_len, 0, 0, None, &[], None);
    }
    let mut out = vec![0.0; t_len * cfg.vocab_size];
    let mut y = vec![0.0; d];
    for t in 0..t_len {
        layer_norm(&x[t * d..(t + 1) * d], &model.params.lnf_g, &model.params.lnf_b, &mut y);
        matvec(
            &model.params.w_out,
            &model.params.b_out,
            &y,
            &mut out[t * cfg.vocab_size..(t + 1) * cfg.vocab_size],
        );
    }
    Ok(out)
}

/// Forward pass with an arbitrary patch set. Neuron patches overwrite the
/// residual stream entering the next block (or the output head at the top
/// boundary); head patches replace the pre-projection context vector.
pub fn forward_patched(
    model: &ModelSnapshot,
    tokens: &[u32],
    patches: &PatchSet,
) -> Result<Vec<f64>> {
    validate_tokens(model, tokens)?;
    patches.validate(&model.config, tokens.len())?;
    let cfg = &model.config;
    let t_len = tokens.len();
    let d = cfg.d_model;

    // Group patches: neuron overwrites per boundary, head overrides per block.
    let mut neuron: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); cfg.n_layers + 1];
    let mut heads: Vec<Vec<(usize, usize, Vec<f64>)>> = vec![Vec::new(); cfg.n_layers + 1];
    for e in patches.entries() {
        match (&e.mediator, &e.value) {
            (Mediator::Neuron(id), PatchValue::Scalar(val)) => {
                neuron[id.layer].push((e.position, id.neuron, *val));
            }
            (Mediator::Head(id), PatchValue::Vector(vals)) => {
                heads[id.layer].push((id.head, e.position, vals.clone()));
            }
            _ => unreachable!("validated above"),
        }
    }

    let mut x = embed(model, tokens);
    for &(pos, j, val) in &neuron[0] {
        x[pos * d + j] = val;
    }
    for (b, lp) in model.params.layers.iter().enumerate() {
        let ov: Vec<(usize, usize, &[f64])> =
            heads[b + 1].iter().map(|(h, p, v)| (*h, *p, v.as_slice())).collect();
        x = block_apply(cfg, lp, &x, t_len, 0, 0, None, &ov, None);
        for &(pos, j, val) in &neuron[b + 1] {
            x[pos * d + j] = val;
        }
    }
    Ok(output_logprobs(model, &x[(t_len - 1) * d..]))
}

/// Resume-from-boundary pass for a single-neuron patch. `patches` holds
/// (position, value) pairs for the one coordinate `neuron` at boundary
/// `layer`. Bit-identical to `forward_patched` with the same override.
pub(crate) fn resume_neuron(
    model: &ModelSnapshot,
    run: &InstrumentedRun,
    layer: usize,
    neuron: usize,
    patches: &[(usize, f64)],
) -> Vec<f64> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let t_len = run.trace.seq_len;
    debug_assert!(!patches.is_empty());

    let mut x = run.trace.residual_layer(layer).to_vec();
    let mut dirty = t_len;
    for &(pos, val) in patches {
        x[pos * d + neuron] = val;
        dirty = dirty.min(pos);
    }
    for b in layer..cfg.n_layers {
        let cache = NullCache {
            k: &run.kv[b].0,
            v: &run.kv[b].1,
            out: run.trace.residual_layer(b + 1),
        };
        let full_from = if b + 1 == cfg.n_layers { t_len - 1 } else { dirty };
        let full_from = full_from.max(dirty);
        x = block_apply(
            cfg,
            &model.params.layers[b],
            &x,
            t_len,
            dirty,
            full_from,
            Some(&cache),
            &[],
            None,
        );
    }
    output_logprobs(model, &x[(t_len - 1) * d..])
}

/// Resume pass for one head override in block `layer` (1-based). Each patch
/// is (position, context vector of length d_head).
pub(crate) fn resume_head(
    model: &ModelSnapshot,
    run: &InstrumentedRun,
    layer: usize,
    head: usize,
    patches: &[(usize, &[f64])],
) -> Vec<f64> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let t_len = run.trace.seq_len;
    debug_assert!((1..=cfg.n_layers).contains(&layer));
    debug_assert!(!patches.is_empty());

    let dirty = patches.iter().map(|(p, _)| *p).min().unwrap();
    let overrides: Vec<(usize, usize, &[f64])> =
        patches.iter().map(|(p, v)| (head, *p, *v)).collect();

    let mut x = run.trace.residual_layer(layer - 1).to_vec();
    for b in (layer - 1)..cfg.n_layers {
        let cache = NullCache {
            k: &run.kv[b].0,
            v: &run.kv[b].1,
            out: run.trace.residual_layer(b + 1),
        };
        let full_from = if b + 1 == cfg.n_layers { (t_len - 1).max(dirty) } else { dirty };
        let ov: &[(usize, usize, &[f64])] = if b + 1 == layer { &overrides } else { &[] };
        x = block_apply(
            cfg,
            &model.params.layers[b],
            &x,
            t_len,
            dirty,
            full_from,
            Some(&cache),
            ov,
            None,
        );
    }
    output_logprobs(model, &x[(t_len - 1) * d..])
}

/// Diagnostic pass with every head's context forced to zero, equivalent to
/// disabling attention reads entirely.
pub fn forward_attention_disabled(model: &ModelSnapshot, tokens: &[u32]) -> Result<Vec<f64>> {
    validate_tokens(model, tokens)?;
    let cfg = &model.config;
    let t_len = tokens.len();
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let zero = vec![0.0; dh];
    let mut ov: Vec<(usize, usize, &[f64])> = Vec::new();
    for h in 0..cfg.n_heads {
        for t in 0..t_len {
            ov.push((h, t, zero.as_slice()));
        }
    }
    let mut x = embed(model, tokens);
    for lp in &model.params.layers {
        x = block_apply(cfg, lp, &x, t_len, 0, 0, None, &ov, None);
    }
    Ok(output_logprobs(model, &x[(t_len - 1) * d..]))
}
