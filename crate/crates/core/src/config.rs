//! Experiment configuration: a line-oriented `key = value` format with
//! `[section]` headers and `#` comments, parsed by a small built-in reader.
//! Every seed is explicit. The canonical serialization (fixed section and
//! key order) is what the provenance digest covers; output/cache paths are
//! excluded from the digest since they do not affect results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::effects::{InterventionKind, ItemPolicy, PatchPositionPolicy};
use crate::error::{Error, Result};
use crate::grammar::StructureKind;
use crate::mix_seed;
use crate::model::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub lexicon_seed: u64,
    pub prompt_seed: u64,
    pub prompt_count: usize,
    /// Held-out evaluation prompts (simple agreement, unseen noun-verb pairs).
    pub heldout_count: usize,
    pub structures: Vec<StructureKind>,
    pub sweep_structures: Vec<StructureKind>,
    pub count_overrides: BTreeMap<String, usize>,
    pub seed_overrides: BTreeMap<String, u64>,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub train_seed: u64,
    pub checkpoint_every: usize,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub eval_fraction: f64,
    pub policy: PatchPositionPolicy,
    pub error_policy: ItemPolicy,
    pub interventions: Vec<InterventionKind>,
    pub selection_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            output_dir: PathBuf::from("out"),
            cache_dir: PathBuf::from("cache"),
            lexicon_seed: 11,
            prompt_seed: 17,
            prompt_count: 300,
            heldout_count: 30,
            structures: default_structures(),
            sweep_structures: StructureKind::default_sweep(),
            count_overrides: BTreeMap::new(),
            seed_overrides: BTreeMap::new(),
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            max_seq_len: 32,
            init_seed: 23,
            train_steps: 1000,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            grad_clip: 1.0,
            train_seed: 31,
            checkpoint_every: 200,
            corpus_size: 50_000,
            corpus_seed: 37,
            eval_fraction: 0.02,
            policy: PatchPositionPolicy::SubjectOnly,
            error_policy: ItemPolicy::Abort,
            interventions: vec![InterventionKind::SwapNumber, InterventionKind::Zero],
            selection_fraction: 0.05,
        }
    }
}

/// The nine canonical variants plus the complementizer-ablated RC variants.
fn default_structures() -> Vec<StructureKind> {
    let mut out = StructureKind::canonical_variants();
    let nocomp: Vec<StructureKind> = out
        .iter()
        .filter(|v| v.kind.is_rc())
        .map(|v| StructureKind { complementizer: Some(false), ..*v })
        .collect();
    out.extend(nocomp);
    out
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::parse_str(&text)?;
        if let Ok(dir) = std::env::var("SACM_CACHE_DIR") {
            if !dir.is_empty() {
                cfg.cache_dir = PathBuf::from(dir);
            }
        }
        Ok(cfg)
    }

    pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section", lineno + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value).map_err(|e| {
                Error::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let bad_key =
            || Error::Config(format!("unknown key `{key}` in section `[{section}]`"));
        let int = |v: &str| -> Result<u64> {
            v.parse::<u64>().map_err(|_| Error::Config(format!("`{key}`: expected integer, got `{v}`")))
        };
        let float = |v: &str| -> Result<f64> {
            v.parse::<f64>().map_err(|_| Error::Config(format!("`{key}`: expected number, got `{v}`")))
        };
        let structures = |v: &str| -> Result<Vec<StructureKind>> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(StructureKind::parse)
                .collect()
        };
        match section {
            "experiment" => match key {
                "output_dir" => self.output_dir = PathBuf::from(value),
                "cache_dir" => self.cache_dir = PathBuf::from(value),
                _ => return Err(bad_key()),
            },
            "lexicon" => match key {
                "seed" => self.lexicon_seed = int(value)?,
                _ => return Err(bad_key()),
            },
            "prompts" => match key {
                "seed" => self.prompt_seed = int(value)?,
                "count" => self.prompt_count = int(value)? as usize,
                "heldout_count" => self.heldout_count = int(value)? as usize,
                "structures" => self.structures = structures(value)?,
                "sweep_structures" => self.sweep_structures = structures(value)?,
                _ => {
                    if let Some(label) = key.strip_prefix("count.") {
                        StructureKind::parse(label)?;
                        self.count_overrides.insert(label.to_string(), int(value)? as usize);
                    } else if let Some(label) = key.strip_prefix("seed.") {
                        StructureKind::parse(label)?;
                        self.seed_overrides.insert(label.to_string(), int(value)?);
                    } else {
                        return Err(bad_key());
                    }
                }
            },
            "model" => match key {
                "n_layers" => self.n_layers = int(value)? as usize,
                "d_model" => self.d_model = int(value)? as usize,
                "n_heads" => self.n_heads = int(value)? as usize,
                "max_seq_len" => self.max_seq_len = int(value)? as usize,
                "init_seed" => self.init_seed = int(value)?,
                _ => return Err(bad_key()),
            },
            "train" => match key {
                "steps" => self.train_steps = int(value)? as usize,
                "batch_size" => self.batch_size = int(value)? as usize,
                "lr" => self.lr = float(value)?,
                "warmup_steps" => self.warmup_steps = int(value)? as usize,
                "weight_decay" => self.weight_decay = float(value)?,
                "grad_clip" => self.grad_clip = float(value)?,
                "seed" => self.train_seed = int(value)?,
                "checkpoint_every" => self.checkpoint_every = int(value)? as usize,
                "corpus_size" => self.corpus_size = int(value)? as usize,
                "corpus_seed" => self.corpus_seed = int(value)?,
                "eval_fraction" => self.eval_fraction = float(value)?,
                _ => return Err(bad_key()),
            },
            "effects" => match key {
                "policy" => self.policy = PatchPositionPolicy::parse(value)?,
                "error_policy" => {
                    self.error_policy = match value {
                        "abort" => ItemPolicy::Abort,
                        "skip" => ItemPolicy::SkipAndCount,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown error_policy `{other}` (abort|skip)"
                            )))
                        }
                    }
                }
                "interventions" => {
                    self.interventions = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| match s {
                            "null" => Ok(InterventionKind::Null),
                            "swap-number" => Ok(InterventionKind::SwapNumber),
                            "zero" => Ok(InterventionKind::Zero),
                            other => Err(Error::Config(format!("unknown intervention `{other}`"))),
                        })
                        .collect::<Result<Vec<_>>>()?;
                }
                _ => return Err(bad_key()),
            },
            "analysis" => match key {
                "selection_fraction" => self.selection_fraction = float(value)?,
                _ => return Err(bad_key()),
            },
            other => {
                return Err(Error::Config(format!("unknown section `[{other}]`")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_count == 0 {
            return Err(Error::Config("prompts.count must be >= 1".into()));
        }
        if self.structures.is_empty() {
            return Err(Error::Config("prompts.structures must not be empty".into()));
        }
        for v in &self.sweep_structures {
            if !self.structures.contains(v) {
                return Err(Error::Config(format!(
                    "sweep structure `{}` missing from prompts.structures",
                    v.label()
                )));
            }
        }
        for v in &self.structures {
            if v.complementizer == Some(false) {
                let twin = StructureKind { complementizer: Some(true), ..*v };
                if !self.structures.contains(&twin) {
                    return Err(Error::Config(format!(
                        "`{}` requires its complementizer twin `{}` for paired contrasts",
                        v.label(),
                        twin.label()
                    )));
                }
            }
        }
        // longest corpus sentence is 11 tokens incl. the terminator, plus BOS
        if self.max_seq_len < 13 {
            return Err(Error::Config("model.max_seq_len must be >= 13".into()));
        }
        if !(self.selection_fraction > 0.0 && self.selection_fraction <= 1.0) {
            return Err(Error::Config("analysis.selection_fraction must be in (0, 1]".into()));
        }
        if !(self.eval_fraction >= 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config("train.eval_fraction must be in [0, 1)".into()));
        }
        if self.lr < 0.0 {
            return Err(Error::Config("train.lr must be >= 0".into()));
        }
        if self.train_steps > 0 && self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("train.checkpoint_every must be >= 1".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Model config for a given vocabulary size.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            vocab_size,
            max_seq_len: self.max_seq_len,
            init_seed: self.init_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            seed: self.train_seed,
            eval_fraction: self.eval_fraction,
            ..TrainConfig::default()
        }
    }

    pub fn prompt_count_for(&self, label: &str) -> usize {
        self.count_overrides.get(label).copied().unwrap_or(self.prompt_count)
    }

    pub fn prompt_seed_for(&self, label: &str) -> u64 {
        self.seed_overrides.get(label).copied().unwrap_or(self.prompt_seed)
    }

    /// `--seed-override N`: every seed replaced by a stream derived from N.
    pub fn apply_seed_override(&mut self, n: u64) {
        self.lexicon_seed = mix_seed(n, "lexicon_seed");
        self.prompt_seed = mix_seed(n, "prompt_seed");
        self.init_seed = mix_seed(n, "init_seed");
        self.train_seed = mix_seed(n, "train_seed");
        self.corpus_seed = mix_seed(n, "corpus_seed");
        self.seed_overrides.clear();
    }

    /// Canonical serialization: fixed order, normalized values.
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        let labels = |vs: &[StructureKind]| -> String {
            vs.iter().map(StructureKind::label).collect::<Vec<_>>().join(", ")
        };
        let _ = writeln!(s, "[experiment]");
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        let _ = writeln!(s, "cache_dir = {}", self.cache_dir.display());
        let _ = writeln!(s, "\n[lexicon]");
        let _ = writeln!(s, "seed = {}", self.lexicon_seed);
        let _ = writeln!(s, "\n[prompts]");
        let _ = writeln!(s, "seed = {}", self.prompt_seed);
        let _ = writeln!(s, "count = {}", self.prompt_count);
        let _ = writeln!(s, "heldout_count = {}", self.heldout_count);
        let _ = writeln!(s, "structures = {}", labels(&self.structures));
        let _ = writeln!(s, "sweep_structures = {}", labels(&self.sweep_structures));
        for (label, count) in &self.count_overrides {
            let _ = writeln!(s, "count.{label} = {count}");
        }
        for (label, seed) in &self.seed_overrides {
            let _ = writeln!(s, "seed.{label} = {seed}");
        }
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "n_layers = {}", self.n_layers);
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "n_heads = {}", self.n_heads);
        let _ = writeln!(s, "max_seq_len = {}", self.max_seq_len);
        let _ = writeln!(s, "init_seed = {}", self.init_seed);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "steps = {}", self.train_steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        let _ = writeln!(s, "seed = {}", self.train_seed);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "corpus_size = {}", self.corpus_size);
        let _ = writeln!(s, "corpus_seed = {}", self.corpus_seed);
        let _ = writeln!(s, "eval_fraction = {}", self.eval_fraction);
        let _ = writeln!(s, "\n[effects]");
        let _ = writeln!(s, "policy = {}", self.policy.label());
        let _ = writeln!(
            s,
            "error_policy = {}",
            match self.error_policy {
                ItemPolicy::Abort => "abort",
                ItemPolicy::SkipAndCount => "skip",
            }
        );
        let _ = writeln!(
            s,
            "interventions = {}",
            self.interventions.iter().map(|i| i.label()).collect::<Vec<_>>().join(", ")
        );
        let _ = writeln!(s, "\n[analysis]");
        let _ = writeln!(s, "selection_fraction = {}", self.selection_fraction);
        s
    }

    /// Digest over the experiment parameters (paths excluded).
    pub fn digest(&self) -> String {
        let canonical = self.to_canonical_string();
        let start = canonical.find("[lexicon]").unwrap_or(0);
        let mut h = Sha256::new();
        h.update(canonical[start..].as_bytes());
        let out = h.finalize();
        hex16(&out)
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_roundtrip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_canonical_string();
        let back = ExperimentConfig::parse_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.digest(), back.digest());
    }

    #[test]
    fn digest_ignores_paths_but_not_seeds() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        b.cache_dir = PathBuf::from("elsewhere_cache");
        assert_eq!(a.digest(), b.digest());
        let mut c = a.clone();
        c.prompt_seed = 999;
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        assert!(ExperimentConfig::parse_str("[prompts]\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::parse_str("[nope]\nseed = 1\n").is_err());
        assert!(ExperimentConfig::parse_str("[prompts]\nseed 17\n").is_err());
        assert!(ExperimentConfig::parse_str("[prompts\nseed = 1\n").is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = ExperimentConfig::parse_str(
            "# a comment\n\n[lexicon]\nseed = 5\n\n# more\n[prompts]\ncount = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.lexicon_seed, 5);
        assert_eq!(cfg.prompt_count, 10);
    }

    #[test]
    fn validation_catches_bad_sweep_set() {
        let mut cfg = ExperimentConfig::default();
        cfg.structures = vec![StructureKind::simple()];
        cfg.sweep_structures = StructureKind::default_sweep();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn nocomp_requires_twin() {
        let text = "[prompts]\nstructures = within_rc_sg_nocomp\nsweep_structures = \n";
        assert!(ExperimentConfig::parse_str(text).is_err());
    }

    #[test]
    fn seed_override_changes_all_seeds() {
        let mut cfg = ExperimentConfig::default();
        let before = (cfg.lexicon_seed, cfg.prompt_seed, cfg.init_seed, cfg.train_seed, cfg.corpus_seed);
        cfg.apply_seed_override(1234);
        let after = (cfg.lexicon_seed, cfg.prompt_seed, cfg.init_seed, cfg.train_seed, cfg.corpus_seed);
        assert_ne!(before, after);
        let mut again = ExperimentConfig::default();
        again.apply_seed_override(1234);
        assert_eq!(cfg, again);
    }

    #[test]
    fn per_structure_overrides() {
        let text = "[prompts]\ncount.simple = 50\nseed.across_pp_sg = 7\n";
        let cfg = ExperimentConfig::parse_str(text).unwrap();
        assert_eq!(cfg.prompt_count_for("simple"), 50);
        assert_eq!(cfg.prompt_count_for("across_pp_sg"), cfg.prompt_count);
        assert_eq!(cfg.prompt_seed_for("across_pp_sg"), 7);
    }
}
