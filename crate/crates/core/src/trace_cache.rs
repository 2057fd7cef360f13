//! On-disk cache of counterfactual activation traces, reusing the checkpoint
//! container format. Keyed by (checkpoint digest, prompt-file digest,
//! variant label); a key mismatch reads as a miss, never an error.
//! Single-writer population, any number of readers afterwards.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::checkpoint::{Reader, Writer, KIND_TRACE_CACHE};
use crate::model::{ActivationTrace, ModelConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey {
    pub checkpoint_digest: String,
    pub prompts_digest: String,
    pub variant: String,
}

pub fn save_traces(
    path: &Path,
    key: &CacheKey,
    cfg: &ModelConfig,
    traces: &[ActivationTrace],
) -> Result<()> {
    let mut w = Writer::new(KIND_TRACE_CACHE);
    w.config(cfg);
    w.str(&key.checkpoint_digest);
    w.str(&key.prompts_digest);
    w.str(&key.variant);
    w.u32(traces.len() as u32);
    for (i, t) in traces.iter().enumerate() {
        let (residual, head_ctx) = t.raw();
        w.block(
            &format!("r{i}"),
            &[cfg.n_layers + 1, t.seq_len, cfg.d_model],
            residual,
        );
        w.block(&format!("c{i}"), &[cfg.n_layers, t.seq_len, cfg.d_model], head_ctx);
    }
    w.finish(path)
}

/// Loads the cache if the file exists and the key and config match; returns
/// `None` on a miss or stale key.
pub fn load_traces(
    path: &Path,
    key: &CacheKey,
    cfg: &ModelConfig,
) -> Result<Option<Vec<ActivationTrace>>> {
    let data = match fs::read(path) {
        Ok(d) => d,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut r = match Reader::open(path, &data, KIND_TRACE_CACHE) {
        Ok(r) => r,
        // a corrupt cache is a miss; it will be rebuilt
        Err(Error::CorruptCheckpoint { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let stored_cfg = r.config()?;
    let stored_key = CacheKey {
        checkpoint_digest: r.str()?,
        prompts_digest: r.str()?,
        variant: r.str()?,
    };
    if stored_cfg != *cfg || stored_key != *key {
        return Ok(None);
    }
    let n = r.u32()? as usize;
    let mut traces = Vec::with_capacity(n);
    for i in 0..n {
        let (name, dims, residual) = r.block_dynamic()?;
        if name != format!("r{i}") || dims.len() != 3 {
            return Ok(None);
        }
        let seq_len = dims[1];
        let (name2, dims2, head_ctx) = r.block_dynamic()?;
        if name2 != format!("c{i}") || dims2 != vec![cfg.n_layers, seq_len, cfg.d_model] {
            return Ok(None);
        }
        if dims != vec![cfg.n_layers + 1, seq_len, cfg.d_model] {
            return Ok(None);
        }
        traces.push(ActivationTrace::from_parts(cfg, seq_len, residual, head_ctx));
    }
    Ok(Some(traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_model};

    #[test]
    fn trace_cache_roundtrip_and_key_mismatch() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: 9,
            max_seq_len: 6,
            init_seed: 3,
        };
        let model = init_model(&cfg).unwrap();
        let (_, t1) = forward(&model, &[0, 3, 5]).unwrap();
        let (_, t2) = forward(&model, &[0, 1, 2, 4]).unwrap();
        let traces = vec![t1, t2];

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.sacm");
        let key = CacheKey {
            checkpoint_digest: "abc".into(),
            prompts_digest: "def".into(),
            variant: "simple".into(),
        };
        save_traces(&path, &key, &cfg, &traces).unwrap();
        let back = load_traces(&path, &key, &cfg).unwrap().expect("hit");
        assert_eq!(traces, back);

        let other = CacheKey { variant: "across_pp_sg".into(), ..key.clone() };
        assert!(load_traces(&path, &other, &cfg).unwrap().is_none());
        assert!(load_traces(&dir.path().join("missing.sacm"), &key, &cfg).unwrap().is_none());
    }
}
