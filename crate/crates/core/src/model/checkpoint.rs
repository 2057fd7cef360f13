//! Checkpoint container: little-endian binary with magic "SACM", a format
//! version, the model config, named parameter blocks with explicit shapes,
//! and a CRC32 footer. The same container carries training state (model +
//! optimizer moments + step) and the on-disk trace cache.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use super::{ModelConfig, ModelSnapshot, Params, TrainState};
use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 4] = b"SACM";
pub(crate) const VERSION: u32 = 1;

pub(crate) const KIND_MODEL: u32 = 1;
pub(crate) const KIND_TRAIN_STATE: u32 = 2;
pub(crate) const KIND_TRACE_CACHE: u32 = 3;

pub(crate) fn crc32(data: &[u8]) -> u32 {
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        t
    });
    let mut c = 0xFFFF_FFFFu32;
    for &b in data {
        c = table[((c ^ u32::from(b)) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new(kind: u32) -> Writer {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(kind);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        let b = s.as_bytes();
        assert!(b.len() <= u16::MAX as usize);
        self.buf.extend_from_slice(&(b.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(b);
    }

    pub fn config(&mut self, cfg: &ModelConfig) {
        self.u32(cfg.n_layers as u32);
        self.u32(cfg.d_model as u32);
        self.u32(cfg.n_heads as u32);
        self.u32(cfg.vocab_size as u32);
        self.u32(cfg.max_seq_len as u32);
        self.u64(cfg.init_seed);
    }

    pub fn block(&mut self, name: &str, dims: &[usize], data: &[f64]) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.str(name);
        self.buf.push(dims.len() as u8);
        for &d in dims {
            self.u32(d as u32);
        }
        for &v in data {
            self.f64(v);
        }
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        let crc = crc32(&self.buf);
        self.u32(crc);
        fs::write(path, &self.buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Reader<'a> {
    path: &'a Path,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn open(path: &'a Path, data: &'a [u8], expect_kind: u32) -> Result<Reader<'a>> {
        let corrupt = |reason: &str| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if data.len() < 16 {
            return Err(corrupt("file too short"));
        }
        let (body, footer) = data.split_at(data.len() - 4);
        let stored = u32::from_le_bytes(footer.try_into().unwrap());
        if crc32(body) != stored {
            return Err(corrupt("CRC mismatch (truncated or corrupted file)"));
        }
        let mut r = Reader { path, data: body, pos: 0 };
        let magic = r.bytes(4)?;
        if magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported format version {version}")));
        }
        let kind = r.u32()?;
        if kind != expect_kind {
            return Err(corrupt(&format!("payload kind {kind}, expected {expect_kind}")));
        }
        Ok(r)
    }

    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint { path: self.path.to_path_buf(), reason: reason.into() }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.corrupt("unexpected end of file"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()) as usize;
        let b = self.bytes(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.corrupt("invalid utf-8 string"))
    }

    pub fn config(&mut self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            n_layers: self.u32()? as usize,
            d_model: self.u32()? as usize,
            n_heads: self.u32()? as usize,
            vocab_size: self.u32()? as usize,
            max_seq_len: self.u32()? as usize,
            init_seed: self.u64()?,
        })
    }

    /// Reads a block, checking name and shape against expectations.
    pub fn block_into(&mut self, expect_name: &str, expect_dims: &[usize], out: &mut [f64]) -> Result<()> {
        let name = self.str()?;
        if name != expect_name {
            return Err(self.corrupt(format!("block `{name}`, expected `{expect_name}`")));
        }
        let ndim = self.bytes(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        if dims != expect_dims {
            return Err(self.corrupt(format!(
                "block `{name}` has shape {dims:?}, expected {expect_dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        if n != out.len() {
            return Err(self.corrupt(format!("block `{name}` size {n} != {}", out.len())));
        }
        let raw = self.bytes(n * 8)?;
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            out[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }

    /// Reads a block of unknown shape.
    pub fn block_dynamic(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name = self.str()?;
        let ndim = self.bytes(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = self.bytes(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, dims, data))
    }
}

fn write_params(w: &mut Writer, cfg: &ModelConfig, params: &Params, prefix: &str) {
    let blocks = params.blocks();
    w.u32(blocks.len() as u32);
    for (name, data) in blocks {
        let dims = Params::block_shape(cfg, &name).expect("known block");
        w.block(&format!("{prefix}{name}"), &dims, data);
    }
}

fn read_params(r: &mut Reader, cfg: &ModelConfig, prefix: &str) -> Result<Params> {
    let mut params = Params::zeros_like(cfg);
    let count = r.u32()? as usize;
    let expected = params.blocks().len();
    if count != expected {
        return Err(Error::CorruptCheckpoint {
            path: r.path.to_path_buf(),
            reason: format!("{count} parameter blocks, expected {expected}"),
        });
    }
    for (name, data) in params.blocks_mut() {
        let dims = Params::block_shape(cfg, &name).expect("known block");
        r.block_into(&format!("{prefix}{name}"), &dims, data)?;
    }
    Ok(params)
}

/// Saves a model snapshot; round-trips bit-exactly.
pub fn save_model(path: &Path, model: &ModelSnapshot) -> Result<()> {
    let mut w = Writer::new(KIND_MODEL);
    w.config(&model.config);
    write_params(&mut w, &model.config, &model.params, "");
    w.finish(path)
}

pub fn load_model(path: &Path) -> Result<ModelSnapshot> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::open(path, &data, KIND_MODEL)?;
    let config = r.config()?;
    config.validate().map_err(|e| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: format!("invalid embedded config: {e}"),
    })?;
    let params = read_params(&mut r, &config, "")?;
    Ok(ModelSnapshot { config, params })
}

/// Loads a checkpoint and verifies its architecture matches `expected`
/// (all fields but the init seed).
pub fn load_model_expecting(path: &Path, expected: &ModelConfig) -> Result<ModelSnapshot> {
    let model = load_model(path)?;
    let a = &model.config;
    if (a.n_layers, a.d_model, a.n_heads, a.vocab_size, a.max_seq_len)
        != (
            expected.n_layers,
            expected.d_model,
            expected.n_heads,
            expected.vocab_size,
            expected.max_seq_len,
        )
    {
        return Err(Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!(
                "architecture mismatch: checkpoint ({}L x {}d x {}h, vocab {}, seq {}) \
                 vs expected ({}L x {}d x {}h, vocab {}, seq {})",
                a.n_layers,
                a.d_model,
                a.n_heads,
                a.vocab_size,
                a.max_seq_len,
                expected.n_layers,
                expected.d_model,
                expected.n_heads,
                expected.vocab_size,
                expected.max_seq_len
            ),
        });
    }
    Ok(model)
}

pub fn save_train_state(path: &Path, state: &TrainState) -> Result<()> {
    let cfg = &state.model.config;
    let mut w = Writer::new(KIND_TRAIN_STATE);
    w.config(cfg);
    w.u64(state.step as u64);
    write_params(&mut w, cfg, &state.model.params, "model.");
    write_params(&mut w, cfg, &state.m, "m.");
    write_params(&mut w, cfg, &state.v, "v.");
    let curve_flat: Vec<f64> =
        state.curve.iter().flat_map(|(s, l)| [*s as f64, *l]).collect();
    w.block("curve", &[state.curve.len(), 2], &curve_flat);
    w.finish(path)
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::open(path, &data, KIND_TRAIN_STATE)?;
    let config = r.config()?;
    config.validate().map_err(|e| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: format!("invalid embedded config: {e}"),
    })?;
    let step = r.u64()? as usize;
    let params = read_params(&mut r, &config, "model.")?;
    let m = read_params(&mut r, &config, "m.")?;
    let v = read_params(&mut r, &config, "v.")?;
    let (name, dims, flat) = r.block_dynamic()?;
    if name != "curve" || dims.len() != 2 || dims[1] != 2 {
        return Err(Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!("expected curve block, found `{name}` {dims:?}"),
        });
    }
    let curve = flat.chunks_exact(2).map(|c| (c[0] as u64, c[1])).collect();
    Ok(TrainState { model: ModelSnapshot { config, params }, m, v, step, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_model, init_train_state};

    fn model() -> ModelSnapshot {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: 9,
            max_seq_len: 6,
            init_seed: 5,
        };
        init_model(&cfg).unwrap()
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sacm");
        save_model(&path, &m).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(m, loaded);
        let toks = [0u32, 3, 7];
        let (a, _) = forward(&m, &toks).unwrap();
        let (b, _) = forward(&loaded, &toks).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sacm");
        save_model(&path, &m).unwrap();
        let data = fs::read(&path).unwrap();
        fs::write(&path, &data[..data.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::CorruptCheckpoint { .. })));
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sacm");
        save_model(&path, &m).unwrap();
        let mut data = fs::read(&path).unwrap();
        let mid = data.len() / 2;
        data[mid] ^= 0xFF;
        fs::write(&path, &data).unwrap();
        assert!(matches!(load_model(&path), Err(Error::CorruptCheckpoint { .. })));
    }

    #[test]
    fn architecture_mismatch_has_shape_diagnostic() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sacm");
        save_model(&path, &m).unwrap();
        let other = ModelConfig { d_model: 32, ..m.config };
        match load_model_expecting(&path, &other) {
            Err(Error::CorruptCheckpoint { reason, .. }) => {
                assert!(reason.contains("mismatch"), "{reason}");
                assert!(reason.contains("32"), "{reason}");
            }
            other => panic!("expected corrupt, got {other:?}"),
        }
    }

    #[test]
    fn train_state_roundtrip() {
        let mut st = init_train_state(model());
        st.step = 17;
        st.curve = vec![(0, 2.5), (1, 2.25)];
        st.m.lnf_g[0] = 0.5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.sacm");
        save_train_state(&path, &st).unwrap();
        let back = load_train_state(&path).unwrap();
        assert_eq!(st, back);
    }
}
