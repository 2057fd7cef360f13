//! Training path: cached forward plus manual backprop through the whole
//! model (embeddings, pre-norm attention blocks, GELU MLPs, final norm,
//! output head, cross-entropy). Gradients are accumulated as d(sum of
//! per-token losses)/dtheta; the caller scales by 1/n_pred.

use super::math::{dot, gelu, gelu_deriv, layer_norm, log_softmax, matvec, softmax_inplace};
use super::{ModelConfig, ModelSnapshot, Params};
use crate::error::{Error, Result};

struct BlockCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention probabilities, `[h][t][u]` flattened with zero padding above
    /// the diagonal.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    xm: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    u_pre: Vec<f64>,
    g_act: Vec<f64>,
}

struct SeqCache {
    blocks: Vec<BlockCache>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    /// softmax(logits) per predicted-from position.
    probs_out: Vec<f64>,
    loss_sum: f64,
    n_pred: usize,
}

/// Layer norm keeping the normalized vector for backward.
fn ln_fwd(
    x: &[f64],
    g: &[f64],
    b: &[f64],
    out: &mut [f64],
    xhat: &mut [f64],
) -> f64 {
    let (mean, rstd) = layer_norm(x, g, b, out);
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
    }
    rstd
}

/// dx += LN backward; accumulates parameter grads.
fn ln_bwd(
    dy: &[f64],
    xhat: &[f64],
    rstd: f64,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let n = dy.len() as f64;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for i in 0..dy.len() {
        let dxhat = dy[i] * g[i];
        m1 += dxhat;
        m2 += dxhat * xhat[i];
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
    }
    m1 /= n;
    m2 /= n;
    for i in 0..dy.len() {
        let dxhat = dy[i] * g[i];
        dx[i] += rstd * (dxhat - m1 - xhat[i] * m2);
    }
}

/// dW += dout (outer) input; db += dout; dx += W^T dout.
fn linear_bwd(
    w: &[f64],
    input: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let cols = input.len();
    for (r, &g) in dout.iter().enumerate() {
        db[r] += g;
        let row = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            row[c] += g * input[c];
        }
    }
    if let Some(dx) = dx {
        for (r, &g) in dout.iter().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            for c in 0..cols {
                dx[c] += g * row[c];
            }
        }
    }
}

fn forward_cached(model: &ModelSnapshot, seq: &[u32]) -> Result<SeqCache> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let hd = cfg.d_hidden();
    let n_heads = cfg.n_heads;
    let dh = cfg.d_head();
    let t_len = seq.len();
    if t_len < 2 {
        return Err(Error::InvalidConfig("training sequences need at least 2 tokens".into()));
    }
    if t_len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: t_len, max: cfg.max_seq_len });
    }
    for &t in seq {
        if (t as usize) >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { token: t, vocab_size: cfg.vocab_size });
        }
    }
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    let mut x = vec![0.0; t_len * d];
    for (t, &tok) in seq.iter().enumerate() {
        let e = &model.params.tok_emb[tok as usize * d..(tok as usize + 1) * d];
        let p = &model.params.pos_emb[t * d..(t + 1) * d];
        for i in 0..d {
            x[t * d + i] = e[i] + p[i];
        }
    }

    let mut x_cur = x;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    let mut a = vec![0.0; d];

    for lp in &model.params.layers {
        let x_in = x_cur;
        let mut c = BlockCache {
            xhat1: vec![0.0; t_len * d],
            rstd1: vec![0.0; t_len],
            q: vec![0.0; t_len * d],
            k: vec![0.0; t_len * d],
            v: vec![0.0; t_len * d],
            probs: vec![0.0; n_heads * t_len * t_len],
            ctx: vec![0.0; t_len * d],
            xm: vec![0.0; t_len * d],
            xhat2: vec![0.0; t_len * d],
            rstd2: vec![0.0; t_len],
            u_pre: vec![0.0; t_len * hd],
            g_act: vec![0.0; t_len * hd],
        };
        let mut out = vec![0.0; t_len * d];

        for t in 0..t_len {
            c.rstd1[t] = ln_fwd(
                &x_in[t * d..(t + 1) * d],
                &lp.ln1_g,
                &lp.ln1_b,
                &mut a,
                &mut c.xhat1[t * d..(t + 1) * d],
            );
            matvec(&lp.w_q, &lp.b_q, &a, &mut c.q[t * d..(t + 1) * d]);
            matvec(&lp.w_k, &lp.b_k, &a, &mut c.k[t * d..(t + 1) * d]);
            matvec(&lp.w_v, &lp.b_v, &a, &mut c.v[t * d..(t + 1) * d]);
        }
        for t in 0..t_len {
            for h in 0..n_heads {
                let q_h = &c.q[t * d + h * dh..t * d + (h + 1) * dh];
                let prow = &mut c.probs[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                for (u, s) in prow.iter_mut().enumerate() {
                    *s = dot(q_h, &c.k[u * d + h * dh..u * d + h * dh + dh]) * inv_sqrt_dh;
                }
                softmax_inplace(prow);
                let ctx_h = &mut c.ctx[t * d + h * dh..t * d + (h + 1) * dh];
                for u in 0..=t {
                    let p = c.probs[(h * t_len + t) * t_len + u];
                    let v_h = &c.v[u * d + h * dh..u * d + h * dh + dh];
                    for j in 0..dh {
                        ctx_h[j] += p * v_h[j];
                    }
                }
            }
            let mut attn = vec![0.0; d];
            matvec(&lp.w_o, &lp.b_o, &c.ctx[t * d..(t + 1) * d], &mut attn);
            for i in 0..d {
                c.xm[t * d + i] = x_in[t * d + i] + attn[i];
            }
            let mut m = vec![0.0; d];
            c.rstd2[t] = ln_fwd(
                &c.xm[t * d..(t + 1) * d],
                &lp.ln2_g,
                &lp.ln2_b,
                &mut m,
                &mut c.xhat2[t * d..(t + 1) * d],
            );
            matvec(&lp.w_up, &lp.b_up, &m, &mut c.u_pre[t * hd..(t + 1) * hd]);
            for i in 0..hd {
                c.g_act[t * hd + i] = gelu(c.u_pre[t * hd + i]);
            }
            let mut down = vec![0.0; d];
            matvec(&lp.w_down, &lp.b_down, &c.g_act[t * hd..(t + 1) * hd], &mut down);
            for i in 0..d {
                out[t * d + i] = c.xm[t * d + i] + down[i];
            }
        }
        blocks.push(c);
        x_cur = out;
    }

    let x_top = &x_cur;
    let v_sz = cfg.vocab_size;
    let mut xhatf = vec![0.0; t_len * d];
    let mut rstdf = vec![0.0; t_len];
    let mut probs_out = vec![0.0; (t_len - 1) * v_sz];
    let mut loss_sum = 0.0;
    let mut y = vec![0.0; d];
    let mut logits = vec![0.0; v_sz];
    for t in 0..t_len - 1 {
        rstdf[t] = ln_fwd(
            &x_top[t * d..(t + 1) * d],
            &model.params.lnf_g,
            &model.params.lnf_b,
            &mut y,
            &mut xhatf[t * d..(t + 1) * d],
        );
        matvec(&model.params.w_out, &model.params.b_out, &y, &mut logits);
        let lp = log_softmax(&logits);
        loss_sum -= lp[seq[t + 1] as usize];
        for (i, l) in lp.iter().enumerate() {
            probs_out[t * v_sz + i] = l.exp();
        }
    }

    Ok(SeqCache { blocks, xhatf, rstdf, probs_out, loss_sum, n_pred: t_len - 1 })
}

/// Sum of next-token cross-entropies over the sequence and the number of
/// predicted positions.
pub fn sequence_loss(model: &ModelSnapshot, seq: &[u32]) -> Result<(f64, usize)> {
    let c = forward_cached(model, seq)?;
    Ok((c.loss_sum, c.n_pred))
}

/// Accumulates d(loss_sum)/dtheta into `grads`; returns (loss_sum, n_pred).
pub fn sequence_loss_and_grad(
    model: &ModelSnapshot,
    seq: &[u32],
    grads: &mut Params,
) -> Result<(f64, usize)> {
    let cfg: &ModelConfig = &model.config;
    let d = cfg.d_model;
    let hd = cfg.d_hidden();
    let n_heads = cfg.n_heads;
    let dh = cfg.d_head();
    let v_sz = cfg.vocab_size;
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    let cache = forward_cached(model, seq)?;
    let t_len = seq.len();

    // Output head and final norm.
    let mut dx = vec![0.0; t_len * d];
    {
        let mut y = vec![0.0; d];
        let mut dy = vec![0.0; d];
        for t in 0..t_len - 1 {
            // rebuild yf from cached normalization
            for i in 0..d {
                y[i] = cache.xhatf[t * d + i] * model.params.lnf_g[i] + model.params.lnf_b[i];
            }
            let mut dlogits = cache.probs_out[t * v_sz..(t + 1) * v_sz].to_vec();
            dlogits[seq[t + 1] as usize] -= 1.0;
            dy.fill(0.0);
            linear_bwd(
                &model.params.w_out,
                &y,
                &dlogits,
                &mut grads.w_out,
                &mut grads.b_out,
                Some(&mut dy),
            );
            ln_bwd(
                &dy,
                &cache.xhatf[t * d..(t + 1) * d],
                cache.rstdf[t],
                &model.params.lnf_g,
                &mut grads.lnf_g,
                &mut grads.lnf_b,
                &mut dx[t * d..(t + 1) * d],
            );
        }
    }

    // Blocks in reverse.
    for b in (0..cfg.n_layers).rev() {
        let lp = &model.params.layers[b];
        let gl = &mut grads.layers[b];
        let c = &cache.blocks[b];

        let mut dx_in = vec![0.0; t_len * d];
        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        let mut m = vec![0.0; d];
        let mut dmhat = vec![0.0; d];
        let mut du = vec![0.0; hd];
        let mut dg_act = vec![0.0; hd];
        let mut dctx = vec![0.0; d];
        let mut dxm = vec![0.0; d];

        for t in 0..t_len {
            let dout = &dx[t * d..(t + 1) * d];
            // MLP branch
            dg_act.fill(0.0);
            linear_bwd(
                &lp.w_down,
                &c.g_act[t * hd..(t + 1) * hd],
                dout,
                &mut gl.w_down,
                &mut gl.b_down,
                Some(&mut dg_act),
            );
            for i in 0..hd {
                du[i] = dg_act[i] * gelu_deriv(c.u_pre[t * hd + i]);
            }
            // rebuild ln2 output
            for i in 0..d {
                m[i] = c.xhat2[t * d + i] * lp.ln2_g[i] + lp.ln2_b[i];
            }
            dmhat.fill(0.0);
            linear_bwd(&lp.w_up, &m, &du, &mut gl.w_up, &mut gl.b_up, Some(&mut dmhat));
            // dxm = residual + ln2 backward
            dxm.copy_from_slice(dout);
            ln_bwd(
                &dmhat,
                &c.xhat2[t * d..(t + 1) * d],
                c.rstd2[t],
                &lp.ln2_g,
                &mut gl.ln2_g,
                &mut gl.ln2_b,
                &mut dxm,
            );
            // attention projection
            dctx.fill(0.0);
            linear_bwd(
                &lp.w_o,
                &c.ctx[t * d..(t + 1) * d],
                &dxm,
                &mut gl.w_o,
                &mut gl.b_o,
                Some(&mut dctx),
            );
            // residual into block input
            for i in 0..d {
                dx_in[t * d + i] += dxm[i];
            }
            // attention core
            for h in 0..n_heads {
                let dctx_h = &dctx[h * dh..(h + 1) * dh];
                let prow = &c.probs[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                let mut dp = vec![0.0; t + 1];
                for (u, dpu) in dp.iter_mut().enumerate() {
                    *dpu = dot(dctx_h, &c.v[u * d + h * dh..u * d + h * dh + dh]);
                    let vrow = &mut dv[u * d + h * dh..u * d + h * dh + dh];
                    let p = prow[u];
                    for j in 0..dh {
                        vrow[j] += p * dctx_h[j];
                    }
                }
                let dot_pd: f64 = prow.iter().zip(&dp).map(|(p, g)| p * g).sum();
                let q_h = &c.q[t * d + h * dh..t * d + (h + 1) * dh];
                let dq_h = &mut dq[t * d + h * dh..t * d + (h + 1) * dh];
                for u in 0..=t {
                    let ds = prow[u] * (dp[u] - dot_pd) * inv_sqrt_dh;
                    let k_h = &c.k[u * d + h * dh..u * d + h * dh + dh];
                    for j in 0..dh {
                        dq_h[j] += ds * k_h[j];
                    }
                    let dk_h = &mut dk[u * d + h * dh..u * d + h * dh + dh];
                    for j in 0..dh {
                        dk_h[j] += ds * q_h[j];
                    }
                }
            }
        }

        // q/k/v projections and first norm, per position.
        let mut da = vec![0.0; d];
        let mut a = vec![0.0; d];
        for t in 0..t_len {
            for i in 0..d {
                a[i] = c.xhat1[t * d + i] * lp.ln1_g[i] + lp.ln1_b[i];
            }
            da.fill(0.0);
            linear_bwd(&lp.w_q, &a, &dq[t * d..(t + 1) * d], &mut gl.w_q, &mut gl.b_q, Some(&mut da));
            linear_bwd(&lp.w_k, &a, &dk[t * d..(t + 1) * d], &mut gl.w_k, &mut gl.b_k, Some(&mut da));
            linear_bwd(&lp.w_v, &a, &dv[t * d..(t + 1) * d], &mut gl.w_v, &mut gl.b_v, Some(&mut da));
            ln_bwd(
                &da,
                &c.xhat1[t * d..(t + 1) * d],
                c.rstd1[t],
                &lp.ln1_g,
                &mut gl.ln1_g,
                &mut gl.ln1_b,
                &mut dx_in[t * d..(t + 1) * d],
            );
        }
        dx = dx_in;
    }

    // Embeddings.
    for (t, &tok) in seq.iter().enumerate() {
        let g = &dx[t * d..(t + 1) * d];
        let e = &mut grads.tok_emb[tok as usize * d..(tok as usize + 1) * d];
        for i in 0..d {
            e[i] += g[i];
        }
        let p = &mut grads.pos_emb[t * d..(t + 1) * d];
        for i in 0..d {
            p[i] += g[i];
        }
    }

    Ok((cache.loss_sum, cache.n_pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn small_model() -> ModelSnapshot {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: 13,
            max_seq_len: 8,
            init_seed: 42,
        };
        init_model(&cfg).unwrap()
    }

    /// Central finite differences on three coordinates per block.
    #[test]
    fn gradients_match_finite_differences() {
        let model = small_model();
        let seqs: Vec<Vec<u32>> = vec![vec![0, 3, 7, 2, 11], vec![0, 5, 1, 9]];

        let mut grads = Params::zeros_like(&model.config);
        let mut total_pred = 0usize;
        for s in &seqs {
            let (_, n) = sequence_loss_and_grad(&model, s, &mut grads).unwrap();
            total_pred += n;
        }
        let scale = 1.0 / total_pred as f64;

        let loss_of = |m: &ModelSnapshot| -> f64 {
            let mut sum = 0.0;
            let mut n = 0usize;
            for s in &seqs {
                let (l, k) = sequence_loss(m, s).unwrap();
                sum += l;
                n += k;
            }
            sum / n as f64
        };

        let h = 1e-4;
        let names: Vec<String> = model.params.blocks().iter().map(|(n, _)| n.clone()).collect();
        for (bi, name) in names.iter().enumerate() {
            let len = model.params.blocks()[bi].1.len();
            let picks = [0, len / 2, len - 1];
            for &ci in &picks {
                let analytic = grads.blocks()[bi].1[ci] * scale;
                let mut plus = model.clone();
                plus.params.blocks_mut()[bi].1[ci] += h;
                let mut minus = model.clone();
                minus.params.blocks_mut()[bi].1[ci] -= h;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                let rel = (analytic - numeric).abs() / denom;
                assert!(
                    rel < 1e-4,
                    "block {name} coord {ci}: analytic {analytic} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn loss_is_mean_nats_per_token_scale() {
        let model = small_model();
        let (loss, n) = sequence_loss(&model, &[0, 1, 2, 3]).unwrap();
        assert_eq!(n, 3);
        // random init: close to uniform over 13 tokens
        let per_tok = loss / n as f64;
        assert!((per_tok - (13.0f64).ln()).abs() < 0.5, "per-token {per_tok}");
    }

    #[test]
    fn short_sequences_rejected() {
        let model = small_model();
        assert!(sequence_loss(&model, &[0]).is_err());
    }
}
