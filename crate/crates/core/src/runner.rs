//! Experiment stages: generate, train, effects, analyze, report.
//!
//! Every stage revalidates the config digest against the run manifest, so
//! outputs from different configurations can never mix. Effect sweeps shard
//! per (variant, layer) into the cache directory and resume from completed
//! shards; all parallel work is sharded and merged in a fixed order, so
//! outputs are byte-identical across runs and worker counts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::analysis::{
    best_layer, hypothesis_matrix, l1_difference, layer_contour, overlap_matrix, paired_contrast,
    top_k_per_layer, LayerContour, MediatorMean, SimilarityMatrix,
};
use crate::config::ExperimentConfig;
use crate::effects::{
    average_total_effect, compute_counterfactual_traces, compute_null_runs, sweep_heads,
    sweep_neuron_layer, total_effect, verb_probability_profile, InterventionKind, ItemPolicy,
    TotalEffect,
};
use crate::error::{Error, Result};
use crate::grammar::{
    generate_prompts, generate_prompts_filtered, make_training_corpus, read_corpus,
    read_prompts_jsonl, render_tokens, write_corpus, write_prompts_jsonl, Kind, PairFilter,
    Prompt, StructureKind,
};
use crate::lexicon::{build_lexicon, Lexicon, Number};
use crate::manifest::{file_digest, RunManifest};
use crate::model::{
    eval_mean_loss, init_model, init_train_state, load_model_expecting, load_train_state,
    save_model, save_train_state, split_corpus, train_chunk, ModelSnapshot, TrainState,
};
use crate::svgplot;
use crate::trace_cache::{load_traces, save_traces, CacheKey};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub jobs: usize,
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> RunOptions {
        let jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        RunOptions { jobs, resume: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EffectFamily {
    Total,
    Grammaticality,
    VerbProfile,
    Neurons,
    Heads,
    ZeroHeads,
}

impl EffectFamily {
    pub fn parse(s: &str) -> Result<EffectFamily> {
        match s {
            "total" => Ok(EffectFamily::Total),
            "grammaticality" => Ok(EffectFamily::Grammaticality),
            "verb-profile" => Ok(EffectFamily::VerbProfile),
            "neurons" => Ok(EffectFamily::Neurons),
            "heads" => Ok(EffectFamily::Heads),
            "zero-heads" => Ok(EffectFamily::ZeroHeads),
            other => Err(Error::Config(format!(
                "unknown effect family `{other}` \
                 (total|grammaticality|neurons|heads|zero-heads|verb-profile)"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EffectFamily::Total => "total",
            EffectFamily::Grammaticality => "grammaticality",
            EffectFamily::VerbProfile => "verb-profile",
            EffectFamily::Neurons => "neurons",
            EffectFamily::Heads => "heads",
            EffectFamily::ZeroHeads => "zero-heads",
        }
    }

    pub fn all() -> [EffectFamily; 6] {
        [
            EffectFamily::Total,
            EffectFamily::Grammaticality,
            EffectFamily::VerbProfile,
            EffectFamily::Neurons,
            EffectFamily::Heads,
            EffectFamily::ZeroHeads,
        ]
    }

    fn csv_name(self) -> &'static str {
        match self {
            EffectFamily::Total => "effects_total.csv",
            EffectFamily::Grammaticality => "effects_grammaticality.csv",
            EffectFamily::VerbProfile => "effects_verb_profile.csv",
            EffectFamily::Neurons => "effects_neurons.csv",
            EffectFamily::Heads => "effects_heads_swap.csv",
            EffectFamily::ZeroHeads => "effects_heads_zero.csv",
        }
    }
}

pub const EFFECT_HEADER: &str = "structure,variant,prompt_id,verb,intervention,layer,\
neuron_or_head,position_policy,y_null,y_intervened,effect,config_digest";

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn prompts_file(label: &str) -> String {
    format!("prompts_{label}.jsonl")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Simple CSV reader for our own files: no quoting, header row first.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty CSV", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Config(format!("bad numeric CSV field `{s}` in {what}")))
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Emits per-structure prompt files, the held-out evaluation prompts, and the
/// training corpus; starts a fresh manifest.
pub fn run_generate(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let t0 = Instant::now();
    create_dir(&cfg.output_dir)?;
    let lexicon = build_lexicon(cfg.lexicon_seed);
    cfg.model_config(lexicon.vocab().len()).validate()?;

    let mut outputs = BTreeMap::new();
    let mut generated: BTreeMap<String, Vec<Prompt>> = BTreeMap::new();

    // complementizer-present variants first; ablated twins re-render them
    let mut ordered: Vec<&StructureKind> = cfg.structures.iter().collect();
    ordered.sort_by_key(|v| v.complementizer == Some(false));
    for v in ordered {
        let label = v.label();
        let prompts = if v.complementizer == Some(false) {
            let twin = StructureKind { complementizer: Some(true), ..*v }.label();
            let base = generated.get(&twin).ok_or_else(|| {
                Error::Config(format!("variant `{label}` generated before its twin `{twin}`"))
            })?;
            base.iter().map(|p| render_tokens(p, false)).collect::<Result<Vec<_>>>()?
        } else {
            generate_prompts(v, cfg.prompt_count_for(&label), &lexicon, cfg.prompt_seed_for(&label))?
        };
        let rel = prompts_file(&label);
        write_prompts_jsonl(&cfg.output_dir.join(&rel), &prompts)?;
        outputs.insert(rel.clone(), file_digest(&cfg.output_dir.join(&rel))?);
        generated.insert(label, prompts);
    }

    if cfg.heldout_count > 0 {
        let simple = StructureKind::simple();
        let held = generate_prompts_filtered(
            &simple,
            cfg.heldout_count,
            &lexicon,
            crate::mix_seed(cfg.prompt_seed, "heldout"),
            PairFilter::HeldOutOnly,
        );
        let held = match held {
            Ok(p) => p,
            Err(Error::InsufficientCombinations { available, .. }) if available > 0 => {
                generate_prompts_filtered(
                    &simple,
                    available,
                    &lexicon,
                    crate::mix_seed(cfg.prompt_seed, "heldout"),
                    PairFilter::HeldOutOnly,
                )?
            }
            Err(e) => return Err(e),
        };
        let rel = "prompts_simple_heldout.jsonl".to_string();
        write_prompts_jsonl(&cfg.output_dir.join(&rel), &held)?;
        outputs.insert(rel.clone(), file_digest(&cfg.output_dir.join(&rel))?);
    }

    let corpus = make_training_corpus(&lexicon, cfg.corpus_size, cfg.corpus_seed)?;
    write_corpus(&cfg.output_dir.join("corpus.txt"), &corpus)?;
    outputs.insert("corpus.txt".into(), file_digest(&cfg.output_dir.join("corpus.txt"))?);

    let mut manifest = RunManifest::new(&cfg.digest());
    manifest.record_stage("generate", t0.elapsed().as_millis() as u64, outputs);
    manifest.save(&cfg.output_dir)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn tokenize_corpus(lexicon: &Lexicon, lines: &[String]) -> Result<Vec<Vec<u32>>> {
    lines
        .iter()
        .map(|line| {
            let toks: Vec<String> = line.split_whitespace().map(str::to_string).collect();
            lexicon.vocab().encode_with_bos(&toks)
        })
        .collect()
}

fn write_loss_curve(cfg: &ExperimentConfig, state: &TrainState) -> Result<()> {
    let digest = cfg.digest();
    let mut out = String::from("step,loss,config_digest\n");
    for (step, loss) in &state.curve {
        out.push_str(&format!("{step},{},{digest}\n", fmt(*loss)));
    }
    write_text(&cfg.output_dir.join("loss_curve.csv"), &out)
}

/// Trains to `cfg.train_steps`, checkpointing every `checkpoint_every` steps;
/// with `resume`, picks up from the saved optimizer state.
pub fn run_train(cfg: &ExperimentConfig, opts: RunOptions) -> Result<()> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut manifest = RunManifest::load_matching(&cfg.output_dir, &cfg.digest())?;
    manifest.require_stage("generate")?;
    manifest.verify_output("generate", &cfg.output_dir, "corpus.txt")?;

    let lexicon = build_lexicon(cfg.lexicon_seed);
    let corpus_lines = read_corpus(&cfg.output_dir.join("corpus.txt"))?;
    let seqs = tokenize_corpus(&lexicon, &corpus_lines)?;
    let mcfg = cfg.model_config(lexicon.vocab().len());

    let state_path = cfg.output_dir.join("train_state.sacm");
    let mut state = if opts.resume && state_path.exists() {
        let st = load_train_state(&state_path)?;
        if st.model.config != mcfg {
            return Err(Error::CorruptCheckpoint {
                path: state_path.clone(),
                reason: "training state architecture differs from config".into(),
            });
        }
        st
    } else {
        init_train_state(init_model(&mcfg)?)
    };

    let tcfg = cfg.train_config();
    let (train_seqs, eval_seqs) = split_corpus(&seqs, tcfg.eval_fraction);
    let train_seqs: Vec<Vec<u32>> = train_seqs.to_vec();
    let eval_seqs: Vec<Vec<u32>> = eval_seqs.to_vec();

    let worker_pool = pool(opts.jobs)?;
    worker_pool.install(|| -> Result<()> {
        while state.step < cfg.train_steps {
            let until = (state.step + cfg.checkpoint_every).min(cfg.train_steps);
            train_chunk(&mut state, &train_seqs, &tcfg, until)?;
            let tmp = cfg.output_dir.join("train_state.sacm.tmp");
            save_train_state(&tmp, &state)?;
            fs::rename(&tmp, &state_path).map_err(|e| Error::io(&state_path, e))?;
            write_loss_curve(cfg, &state)?;
        }
        Ok(())
    })?;
    if state.curve.is_empty() {
        write_loss_curve(cfg, &state)?;
    }

    save_model(&cfg.output_dir.join("model.sacm"), &state.model)?;
    let eval_loss = worker_pool.install(|| eval_mean_loss(&state.model, &eval_seqs))?;
    let final_train_loss = state.curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
    let digest = cfg.digest();
    write_text(
        &cfg.output_dir.join("train_summary.csv"),
        &format!(
            "final_step,final_train_loss,eval_loss,config_digest\n{},{},{},{digest}\n",
            state.step,
            fmt(final_train_loss),
            fmt(eval_loss)
        ),
    )?;

    let mut outputs = BTreeMap::new();
    for rel in ["model.sacm", "loss_curve.csv", "train_summary.csv"] {
        outputs.insert(rel.to_string(), file_digest(&cfg.output_dir.join(rel))?);
    }
    manifest.checkpoint_digest = Some(file_digest(&cfg.output_dir.join("model.sacm"))?);
    manifest.record_stage("train", t0.elapsed().as_millis() as u64, outputs);
    manifest.save(&cfg.output_dir)
}

// ---------------------------------------------------------------------------
// effects
// ---------------------------------------------------------------------------

struct EffectsCtx<'a> {
    cfg: &'a ExperimentConfig,
    lexicon: Lexicon,
    model: ModelSnapshot,
    checkpoint_digest: String,
    digest: String,
}

impl<'a> EffectsCtx<'a> {
    fn prompts(&self, label: &str, manifest: &RunManifest) -> Result<Vec<Prompt>> {
        let rel = prompts_file(label);
        manifest.verify_output("generate", &self.cfg.output_dir, &rel)?;
        read_prompts_jsonl(&self.cfg.output_dir.join(rel))
    }
}

fn effect_line(
    ctx: &EffectsCtx,
    variant: &StructureKind,
    prompt_id: usize,
    verb: &str,
    intervention: InterventionKind,
    layer: Option<usize>,
    index: Option<usize>,
    policy: Option<&str>,
    y_null: f64,
    y_intervened: Option<f64>,
    effect: f64,
) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        variant.kind.base_label(),
        variant.label(),
        prompt_id,
        verb,
        intervention.label(),
        layer.map(|l| l.to_string()).unwrap_or_default(),
        index.map(|i| i.to_string()).unwrap_or_default(),
        policy.unwrap_or_default(),
        fmt(y_null),
        y_intervened.map(fmt).unwrap_or_default(),
        fmt(effect),
        ctx.digest
    )
}

fn family_total(ctx: &EffectsCtx, manifest: &RunManifest) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for v in &ctx.cfg.structures {
        let label = v.label();
        let prompts = ctx.prompts(&label, manifest)?;
        let results: Vec<Result<TotalEffect>> =
            prompts.par_iter().map(|p| total_effect(&ctx.model, &ctx.lexicon, p)).collect();
        let mut skipped = 0usize;
        for (pid, (p, r)) in prompts.iter().zip(results).enumerate() {
            match r {
                Ok(t) => lines.push(effect_line(
                    ctx,
                    v,
                    pid,
                    &p.verb.lemma,
                    InterventionKind::SwapNumber,
                    None,
                    None,
                    None,
                    t.y_null,
                    Some(t.y_swap),
                    t.te,
                )),
                Err(e) => match ctx.cfg.error_policy {
                    ItemPolicy::Abort => return Err(e),
                    ItemPolicy::SkipAndCount => skipped += 1,
                },
            }
        }
        if skipped > 0 {
            eprintln!("effects total `{label}`: skipped {skipped} degenerate items");
        }
    }
    Ok(lines)
}

fn family_grammaticality(ctx: &EffectsCtx, manifest: &RunManifest) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for v in &ctx.cfg.structures {
        let label = v.label();
        let prompts = ctx.prompts(&label, manifest)?;
        let runs = compute_null_runs(&ctx.model, &ctx.lexicon, &prompts)?;
        for (pid, (p, run)) in prompts.iter().zip(&runs).enumerate() {
            let (sg_id, pl_id) = ctx.lexicon.verb_ids(&p.verb)?;
            let (lp_sg, lp_pl) = (run.logprobs[sg_id as usize], run.logprobs[pl_id as usize]);
            if !lp_sg.is_finite() || !lp_pl.is_finite() {
                match ctx.cfg.error_policy {
                    ItemPolicy::Abort => {
                        return Err(Error::DegenerateProbability(format!(
                            "`{label}` prompt {pid}"
                        )))
                    }
                    ItemPolicy::SkipAndCount => continue,
                }
            }
            let log_y = match p.subject_number {
                Number::Sg => lp_pl - lp_sg,
                Number::Pl => lp_sg - lp_pl,
            };
            lines.push(effect_line(
                ctx,
                v,
                pid,
                &p.verb.lemma,
                InterventionKind::Null,
                None,
                None,
                None,
                log_y.exp(),
                None,
                (-log_y).exp(),
            ));
        }
    }
    Ok(lines)
}

fn family_verb_profile(ctx: &EffectsCtx, manifest: &RunManifest) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for v in &ctx.cfg.structures {
        if !matches!(
            v.kind,
            Kind::SimpleAgreement | Kind::AcrossOneDistractor | Kind::AcrossTwoDistractors
        ) {
            continue;
        }
        let label = v.label();
        let prompts = ctx.prompts(&label, manifest)?;
        for row in verb_probability_profile(&ctx.model, &ctx.lexicon, &prompts)? {
            lines.push(format!(
                "{},{},{},{},{},{},{}",
                v.kind.base_label(),
                label,
                row.prompt_id,
                row.verb,
                row.form,
                fmt(row.probability),
                ctx.digest
            ));
        }
    }
    Ok(lines)
}

fn counterfactuals_for(
    ctx: &EffectsCtx,
    manifest: &RunManifest,
    label: &str,
    prompts: &[Prompt],
) -> Result<Vec<crate::model::ActivationTrace>> {
    create_dir(&ctx.cfg.cache_dir)?;
    let rel = prompts_file(label);
    let prompts_digest = manifest
        .require_stage("generate")?
        .outputs
        .get(&rel)
        .cloned()
        .ok_or_else(|| Error::MissingPrerequisite(format!("digest for {rel}")))?;
    let key = CacheKey {
        checkpoint_digest: ctx.checkpoint_digest.clone(),
        prompts_digest,
        variant: label.to_string(),
    };
    let path = ctx.cfg.cache_dir.join(format!("traces_{label}.sacm"));
    if let Some(traces) = load_traces(&path, &key, &ctx.model.config)? {
        return Ok(traces);
    }
    let traces = compute_counterfactual_traces(&ctx.model, &ctx.lexicon, prompts)?;
    save_traces(&path, &key, &ctx.model.config, &traces)?;
    Ok(traces)
}

fn family_neurons(
    ctx: &EffectsCtx,
    manifest: &RunManifest,
    opts: RunOptions,
    out_path: &Path,
) -> Result<()> {
    let shard_dir = ctx.cfg.cache_dir.join("shards");
    create_dir(&shard_dir)?;
    let f = fs::File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{EFFECT_HEADER}").map_err(|e| Error::io(out_path, e))?;

    for v in &ctx.cfg.sweep_structures {
        let label = v.label();
        let prompts = ctx.prompts(&label, manifest)?;
        let cf = counterfactuals_for(ctx, manifest, &label, &prompts)?;
        let nulls = compute_null_runs(&ctx.model, &ctx.lexicon, &prompts)?;
        for layer in 0..=ctx.model.config.n_layers {
            let shard = shard_dir.join(format!(
                "neurons_{}_{}_{label}_L{layer}.csv",
                ctx.digest, ctx.checkpoint_digest
            ));
            if !(opts.resume && shard.exists()) {
                let rows = sweep_neuron_layer(
                    &ctx.model,
                    &ctx.lexicon,
                    &prompts,
                    &nulls,
                    &cf,
                    layer,
                    ctx.cfg.policy,
                )?;
                let mut text = String::with_capacity(rows.len() * 96);
                for r in rows {
                    text.push_str(&effect_line(
                        ctx,
                        v,
                        r.prompt_id,
                        &r.verb,
                        InterventionKind::SwapNumber,
                        Some(r.layer),
                        Some(r.index),
                        Some(ctx.cfg.policy.label()),
                        r.y_null,
                        Some(r.y_patched),
                        r.effect,
                    ));
                    text.push('\n');
                }
                let tmp = shard.with_extension("csv.tmp");
                write_text(&tmp, &text)?;
                fs::rename(&tmp, &shard).map_err(|e| Error::io(&shard, e))?;
            }
            let shard_text = fs::read_to_string(&shard).map_err(|e| Error::io(&shard, e))?;
            w.write_all(shard_text.as_bytes()).map_err(|e| Error::io(out_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(out_path, e))
}

fn family_heads(
    ctx: &EffectsCtx,
    manifest: &RunManifest,
    zero: bool,
) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for v in &ctx.cfg.sweep_structures {
        let label = v.label();
        let prompts = ctx.prompts(&label, manifest)?;
        let nulls = compute_null_runs(&ctx.model, &ctx.lexicon, &prompts)?;
        let cf;
        let cf_ref = if zero {
            None
        } else {
            cf = counterfactuals_for(ctx, manifest, &label, &prompts)?;
            Some(cf.as_slice())
        };
        let rows = sweep_heads(
            &ctx.model,
            &ctx.lexicon,
            &prompts,
            &nulls,
            cf_ref,
            ctx.cfg.policy,
            zero,
        )?;
        let (intervention, policy_label) = if zero {
            (InterventionKind::Zero, "all_positions")
        } else {
            (InterventionKind::SwapNumber, ctx.cfg.policy.label())
        };
        for r in rows {
            lines.push(effect_line(
                ctx,
                v,
                r.prompt_id,
                &r.verb,
                intervention,
                Some(r.layer),
                Some(r.index),
                Some(policy_label),
                r.y_null,
                Some(r.y_patched),
                r.effect,
            ));
        }
    }
    Ok(lines)
}

/// Computes the requested effect families against the checkpoint in the
/// output directory, one CSV per family.
pub fn run_effects(
    cfg: &ExperimentConfig,
    families: &[EffectFamily],
    opts: RunOptions,
) -> Result<()> {
    cfg.validate()?;
    let mut manifest = RunManifest::load_matching(&cfg.output_dir, &cfg.digest())?;
    manifest.require_stage("generate")?;

    let needs_swap = families
        .iter()
        .any(|f| matches!(f, EffectFamily::Neurons | EffectFamily::Heads | EffectFamily::Total));
    if needs_swap && !cfg.interventions.contains(&InterventionKind::SwapNumber) {
        return Err(Error::Config(
            "requested families need the swap-number intervention, which the config disables"
                .into(),
        ));
    }
    if families.contains(&EffectFamily::ZeroHeads)
        && !cfg.interventions.contains(&InterventionKind::Zero)
    {
        return Err(Error::Config(
            "zero-heads requested but the zero intervention is disabled in the config".into(),
        ));
    }

    let lexicon = build_lexicon(cfg.lexicon_seed);
    let mcfg = cfg.model_config(lexicon.vocab().len());
    let model_path = cfg.output_dir.join("model.sacm");
    if !model_path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "{} (run `sacm train`, or place a checkpoint there)",
            model_path.display()
        )));
    }
    let model = load_model_expecting(&model_path, &mcfg)?;
    let checkpoint_digest = file_digest(&model_path)?;
    if let Some(prev) = &manifest.checkpoint_digest {
        if prev != &checkpoint_digest {
            return Err(Error::DigestMismatch(format!(
                "checkpoint digest {checkpoint_digest} differs from manifest {prev}"
            )));
        }
    } else {
        manifest.checkpoint_digest = Some(checkpoint_digest.clone());
    }

    let ctx = EffectsCtx { cfg, lexicon, model, checkpoint_digest, digest: cfg.digest() };
    let worker_pool = pool(opts.jobs)?;

    let mut families = families.to_vec();
    families.sort();
    families.dedup();
    for family in families {
        let t0 = Instant::now();
        let rel = family.csv_name();
        let path = cfg.output_dir.join(rel);
        worker_pool.install(|| -> Result<()> {
            match family {
                EffectFamily::Neurons => family_neurons(&ctx, &manifest, opts, &path)?,
                EffectFamily::VerbProfile => {
                    let lines = family_verb_profile(&ctx, &manifest)?;
                    let header = "structure,variant,prompt_id,verb,form,probability,config_digest";
                    write_text(&path, &format!("{header}\n{}\n", lines.join("\n")))?;
                }
                other => {
                    let lines = match other {
                        EffectFamily::Total => family_total(&ctx, &manifest)?,
                        EffectFamily::Grammaticality => family_grammaticality(&ctx, &manifest)?,
                        EffectFamily::Heads => family_heads(&ctx, &manifest, false)?,
                        EffectFamily::ZeroHeads => family_heads(&ctx, &manifest, true)?,
                        _ => unreachable!(),
                    };
                    write_text(&path, &format!("{EFFECT_HEADER}\n{}\n", lines.join("\n")))?;
                }
            }
            Ok(())
        })?;
        let mut outputs = BTreeMap::new();
        outputs.insert(rel.to_string(), file_digest(&path)?);
        manifest.record_stage(
            &format!("effects:{}", family.label()),
            t0.elapsed().as_millis() as u64,
            outputs,
        );
        manifest.save(&cfg.output_dir)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

fn matrix_csv(m: &SimilarityMatrix, digest: &str) -> String {
    let mut s = String::from("label,");
    s.push_str(&m.labels.join(","));
    s.push_str(",config_digest\n");
    for (i, label) in m.labels.iter().enumerate() {
        s.push_str(label);
        for j in 0..m.n() {
            s.push(',');
            s.push_str(&fmt(m.get(i, j)));
        }
        s.push(',');
        s.push_str(digest);
        s.push('\n');
    }
    s
}

struct NeuronTable {
    /// variant label -> mean NIE per (layer, neuron), in config sweep order.
    variants: Vec<(String, Vec<MediatorMean>)>,
}

fn load_neuron_means(path: &Path) -> Result<NeuronTable> {
    let (header, rows) = read_csv(path)?;
    let col = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| {
            Error::Config(format!("{}: missing column `{name}`", path.display()))
        })
    };
    let (c_variant, c_layer, c_index, c_effect) =
        (col("variant")?, col("layer")?, col("neuron_or_head")?, col("effect")?);
    let mut order: Vec<String> = Vec::new();
    let mut sums: BTreeMap<(String, usize, usize), (f64, usize)> = BTreeMap::new();
    for row in &rows {
        let variant = row[c_variant].clone();
        if !order.contains(&variant) {
            order.push(variant.clone());
        }
        let layer: usize = row[c_layer]
            .parse()
            .map_err(|_| Error::Config(format!("bad layer `{}`", row[c_layer])))?;
        let neuron: usize = row[c_index]
            .parse()
            .map_err(|_| Error::Config(format!("bad neuron `{}`", row[c_index])))?;
        let effect = parse_f64(&row[c_effect], "effects_neurons.csv")?;
        let e = sums.entry((variant, layer, neuron)).or_insert((0.0, 0));
        e.0 += effect;
        e.1 += 1;
    }
    let mut variants = Vec::new();
    for label in order {
        let mut means = Vec::new();
        for ((v, layer, neuron), (sum, n)) in &sums {
            if v == &label {
                means.push(MediatorMean { layer: *layer, neuron: *neuron, nie: sum / *n as f64 });
            }
        }
        variants.push((label, means));
    }
    Ok(NeuronTable { variants })
}

/// Contours, per-layer overlap matrices, the hypothesis matrix, best-layer
/// report, effect summaries, paired complementizer contrasts, and SVG plots.
pub fn run_analyze(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut manifest = RunManifest::load_matching(&cfg.output_dir, &cfg.digest())?;
    let digest = cfg.digest();
    let out = |rel: &str| cfg.output_dir.join(rel);
    let mut outputs: BTreeMap<String, String> = BTreeMap::new();
    let emit = |rel: &str, text: &str, outputs: &mut BTreeMap<String, String>| -> Result<()> {
        write_text(&out(rel), text)?;
        outputs.insert(rel.to_string(), file_digest(&out(rel))?);
        Ok(())
    };

    for stage in ["effects:neurons", "effects:total", "effects:grammaticality"] {
        manifest.require_stage(stage).map_err(|_| {
            Error::MissingPrerequisite(format!(
                "stage `{stage}` (run `sacm effects --which {}`)",
                stage.trim_start_matches("effects:")
            ))
        })?;
    }

    let lexicon = build_lexicon(cfg.lexicon_seed);
    let mcfg = cfg.model_config(lexicon.vocab().len());

    // ---- contours + per-layer top-k sets
    let table = load_neuron_means(&out("effects_neurons.csv"))?;
    let mut contour_csv = String::from("variant,layer,mean_nie,fraction,config_digest\n");
    let mut contours: Vec<(String, LayerContour)> = Vec::new();
    let mut selections: Vec<(String, Vec<std::collections::BTreeSet<usize>>)> = Vec::new();
    for (label, means) in &table.variants {
        let sel = top_k_per_layer(means, cfg.selection_fraction, mcfg.n_layers, mcfg.d_model)?;
        let contour = layer_contour(&sel, means, cfg.selection_fraction)?;
        for &(layer, v) in &contour.points {
            contour_csv.push_str(&format!(
                "{label},{layer},{},{},{digest}\n",
                fmt(v),
                fmt(cfg.selection_fraction)
            ));
        }
        contours.push((label.clone(), contour));
        selections.push((label.clone(), sel));
    }
    emit("analysis_contour.csv", &contour_csv, &mut outputs)?;
    {
        let series: Vec<(String, &LayerContour)> =
            contours.iter().map(|(l, c)| (l.clone(), c)).collect();
        emit(
            "analysis_contour.svg",
            &svgplot::contour_svg(&series, "Top-fraction neuron NIE by layer", &digest),
            &mut outputs,
        )?;
    }

    // ---- overlap per layer + hypothesis + best layer
    let labels: Vec<String> = selections.iter().map(|(l, _)| l.clone()).collect();
    let variants: Vec<StructureKind> =
        labels.iter().map(|l| StructureKind::parse(l)).collect::<Result<_>>()?;
    let hyp = hypothesis_matrix(&variants);
    emit("analysis_hypothesis.csv", &matrix_csv(&hyp, &digest), &mut outputs)?;
    emit(
        "analysis_hypothesis.svg",
        &svgplot::heatmap_svg(&hyp, "Feature-based similarity hypothesis", &digest),
        &mut outputs,
    )?;

    let mut per_layer: Vec<(usize, SimilarityMatrix)> = Vec::new();
    for layer in 0..=mcfg.n_layers {
        let sets: Vec<std::collections::BTreeSet<usize>> =
            selections.iter().map(|(_, sel)| sel[layer].clone()).collect();
        let m = overlap_matrix(&labels, &sets)?;
        emit(&format!("analysis_overlap_layer{layer}.csv"), &matrix_csv(&m, &digest), &mut outputs)?;
        emit(
            &format!("analysis_overlap_layer{layer}.svg"),
            &svgplot::heatmap_svg(&m, &format!("Top-neuron overlap, layer {layer}"), &digest),
            &mut outputs,
        )?;
        per_layer.push((layer, m));
    }
    let (best, best_norm) = best_layer(&per_layer, &hyp)?;
    let mut best_csv = String::from("layer,l1_norm,is_best,config_digest\n");
    for (layer, m) in &per_layer {
        let norm = l1_difference(m, &hyp)?;
        best_csv.push_str(&format!(
            "{layer},{},{},{digest}\n",
            fmt(norm),
            if *layer == best { 1 } else { 0 }
        ));
    }
    emit("analysis_best_layer.csv", &best_csv, &mut outputs)?;
    let _ = best_norm;

    // ---- TE and grammaticality summaries
    let (h_tot, rows_tot) = read_csv(&out("effects_total.csv"))?;
    let col_tot = |name: &str| h_tot.iter().position(|h| h == name).unwrap();
    let (tv, tp, te_col) = (col_tot("variant"), col_tot("prompt_id"), col_tot("effect"));
    let mut te_by_variant: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    for row in &rows_tot {
        let label = row[tv].clone();
        let pid: usize = row[tp].parse().unwrap_or(0);
        let te = parse_f64(&row[te_col], "effects_total.csv")?;
        match te_by_variant.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push((pid, te)),
            None => te_by_variant.push((label, vec![(pid, te)])),
        }
    }
    let mut te_summary = String::from("structure,variant,mean_te,n,config_digest\n");
    for (label, items) in &te_by_variant {
        let mean: f64 = items.iter().map(|(_, t)| t).sum::<f64>() / items.len() as f64;
        let kind = StructureKind::parse(label)?.kind.base_label();
        te_summary.push_str(&format!("{kind},{label},{},{},{digest}\n", fmt(mean), items.len()));
    }
    emit("analysis_te_summary.csv", &te_summary, &mut outputs)?;

    let (h_g, rows_g) = read_csv(&out("effects_grammaticality.csv"))?;
    let col_g = |name: &str| h_g.iter().position(|h| h == name).unwrap();
    let (gv, gp, ge) = (col_g("variant"), col_g("prompt_id"), col_g("effect"));
    // subject number via the prompt files
    let mut g_summary = String::from("structure,variant,subject_number,mean_g,n,config_digest\n");
    let mut g_groups: Vec<(String, Number, Vec<f64>)> = Vec::new();
    let mut prompt_numbers: BTreeMap<String, Vec<Number>> = BTreeMap::new();
    for row in &rows_g {
        let label = row[gv].clone();
        let pid: usize = row[gp].parse().unwrap_or(0);
        let g = parse_f64(&row[ge], "effects_grammaticality.csv")?;
        let numbers = match prompt_numbers.get(&label) {
            Some(n) => n,
            None => {
                let prompts = read_prompts_jsonl(&out(&prompts_file(&label)))?;
                prompt_numbers
                    .insert(label.clone(), prompts.iter().map(|p| p.subject_number).collect());
                &prompt_numbers[&label]
            }
        };
        let number = *numbers.get(pid).ok_or_else(|| {
            Error::UnmatchedPrompts(format!("prompt {pid} missing from {}", prompts_file(&label)))
        })?;
        match g_groups.iter_mut().find(|(l, n, _)| *l == label && *n == number) {
            Some((_, _, v)) => v.push(g),
            None => g_groups.push((label.clone(), number, vec![g])),
        }
    }
    for (label, number, vals) in &g_groups {
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let kind = StructureKind::parse(label)?.kind.base_label();
        g_summary.push_str(&format!(
            "{kind},{label},{},{},{},{digest}\n",
            number.label(),
            fmt(mean),
            vals.len()
        ));
    }
    emit("analysis_grammaticality_summary.csv", &g_summary, &mut outputs)?;
    {
        // grouped bars: mean G by variant, sg vs pl
        let groups: Vec<String> = te_by_variant.iter().map(|(l, _)| l.clone()).collect();
        let series: Vec<(String, Vec<f64>)> = [Number::Sg, Number::Pl]
            .iter()
            .map(|num| {
                let vals = groups
                    .iter()
                    .map(|label| {
                        g_groups
                            .iter()
                            .find(|(l, n, _)| l == label && n == num)
                            .map(|(_, _, v)| v.iter().sum::<f64>() / v.len() as f64)
                            .unwrap_or(0.0)
                    })
                    .collect();
                (num.label().to_string(), vals)
            })
            .collect();
        emit(
            "analysis_grammaticality.svg",
            &svgplot::grouped_bars_svg(&groups, &series, "Grammaticality margin", &digest),
            &mut outputs,
        )?;
    }

    // ---- paired complementizer contrasts
    let mut contrast_csv =
        String::from("pair,prompt_id,te_with,te_without,abs_delta,rel_delta,config_digest\n");
    let mut contrast_summary =
        String::from("pair,mean_with,mean_without,mean_abs_delta,n,config_digest\n");
    let mut any_pair = false;
    for (label, with_rows) in &te_by_variant {
        let v = StructureKind::parse(label)?;
        if v.complementizer != Some(true) {
            continue;
        }
        let twin = StructureKind { complementizer: Some(false), ..v }.label();
        let Some((_, without_rows)) = te_by_variant.iter().find(|(l, _)| *l == twin) else {
            continue;
        };
        let contour_a = contours.iter().find(|(l, _)| l == label).map(|(_, c)| c);
        let contour_b = contours.iter().find(|(l, _)| *l == twin).map(|(_, c)| c);
        let c = paired_contrast(with_rows, without_rows, contour_a, contour_b)?;
        for (pid, a, b, d, r) in &c.te_rows {
            contrast_csv.push_str(&format!(
                "{label},{pid},{},{},{},{},{digest}\n",
                fmt(*a),
                fmt(*b),
                fmt(*d),
                fmt(*r)
            ));
        }
        contrast_summary.push_str(&format!(
            "{label},{},{},{},{},{digest}\n",
            fmt(c.mean_a),
            fmt(c.mean_b),
            fmt(c.mean_abs_delta),
            c.te_rows.len()
        ));
        any_pair = true;
    }
    if any_pair {
        emit("analysis_paired_contrast.csv", &contrast_csv, &mut outputs)?;
        emit("analysis_paired_summary.csv", &contrast_summary, &mut outputs)?;
    }

    manifest.record_stage("analyze", t0.elapsed().as_millis() as u64, outputs);
    manifest.save(&cfg.output_dir)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn csv_as_md_table(path: &Path, drop_cols: &[&str]) -> Result<String> {
    let (header, rows) = read_csv(path)?;
    let keep: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| !drop_cols.contains(&h.as_str()))
        .map(|(i, _)| i)
        .collect();
    let mut s = String::new();
    s.push('|');
    for &i in &keep {
        s.push_str(&header[i]);
        s.push('|');
    }
    s.push('\n');
    s.push('|');
    for _ in &keep {
        s.push_str("---|");
    }
    s.push('\n');
    for row in rows {
        s.push('|');
        for &i in &keep {
            s.push_str(row.get(i).map(String::as_str).unwrap_or(""));
            s.push('|');
        }
        s.push('\n');
    }
    Ok(s)
}

/// One self-contained summary document; regenerating from unchanged inputs
/// yields identical bytes.
pub fn run_report(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut manifest = RunManifest::load_matching(&cfg.output_dir, &cfg.digest())?;
    manifest.require_stage("analyze").map_err(|_| {
        Error::MissingPrerequisite("stage `analyze` (run `sacm analyze` first)".into())
    })?;
    let out = |rel: &str| cfg.output_dir.join(rel);

    let mut md = String::new();
    md.push_str("# Agreement intervention report\n\n");
    md.push_str(&format!("- config digest: `{}`\n", cfg.digest()));
    if let Some(ck) = &manifest.checkpoint_digest {
        md.push_str(&format!("- checkpoint digest: `{ck}`\n"));
    }
    md.push('\n');

    md.push_str("## Mean total effect per structure\n\n");
    md.push_str(&csv_as_md_table(&out("analysis_te_summary.csv"), &["config_digest"])?);
    md.push('\n');

    md.push_str("## Grammaticality margin by subject number\n\n");
    md.push_str(&csv_as_md_table(
        &out("analysis_grammaticality_summary.csv"),
        &["config_digest"],
    )?);
    md.push_str("\n![grammaticality](analysis_grammaticality.svg)\n\n");

    md.push_str("## Layer-wise indirect effect contours\n\n");
    md.push_str("![contours](analysis_contour.svg)\n\n");

    md.push_str("## Neuron overlap vs. hypothesis\n\n");
    let (h_best, rows_best) = read_csv(&out("analysis_best_layer.csv"))?;
    let li = h_best.iter().position(|h| h == "layer").unwrap_or(0);
    let ni = h_best.iter().position(|h| h == "l1_norm").unwrap_or(1);
    let bi = h_best.iter().position(|h| h == "is_best").unwrap_or(2);
    for row in &rows_best {
        if row.get(bi).map(String::as_str) == Some("1") {
            md.push_str(&format!(
                "Best-matching layer: **{}** (l1 difference {}).\n\n",
                row[li], row[ni]
            ));
        }
    }
    md.push_str(&csv_as_md_table(&out("analysis_best_layer.csv"), &["config_digest"])?);
    md.push_str("\n![hypothesis](analysis_hypothesis.svg)\n");
    for row in &rows_best {
        if row.get(bi).map(String::as_str) == Some("1") {
            md.push_str(&format!(
                "![overlap](analysis_overlap_layer{}.svg)\n",
                row[li]
            ));
        }
    }
    md.push('\n');

    if out("analysis_paired_summary.csv").exists() {
        md.push_str("## Complementizer contrast (with vs. without)\n\n");
        md.push_str(&csv_as_md_table(&out("analysis_paired_summary.csv"), &["config_digest"])?);
        md.push('\n');
    }
    if out("train_summary.csv").exists() {
        md.push_str("## Training\n\n");
        md.push_str(&csv_as_md_table(&out("train_summary.csv"), &["config_digest"])?);
        md.push('\n');
    }

    write_text(&out("report.md"), &md)?;
    let mut outputs = BTreeMap::new();
    outputs.insert("report.md".into(), file_digest(&out("report.md"))?);
    manifest.record_stage("report", t0.elapsed().as_millis() as u64, outputs);
    manifest.save(&cfg.output_dir)
}

// ---------------------------------------------------------------------------
// shared helpers for tests and the acceptance suite
// ---------------------------------------------------------------------------

/// Writes an untrained (random-init) checkpoint for the configured model,
/// which doubles as the random-weights control.
pub fn write_random_init_checkpoint(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let lexicon = build_lexicon(cfg.lexicon_seed);
    let mcfg = cfg.model_config(lexicon.vocab().len());
    let model = init_model(&mcfg)?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("model.sacm");
    save_model(&path, &model)?;
    Ok(path)
}

/// Mean total effect for one structure label, straight from the library path
/// (used by tests as an independent check against the CSVs).
pub fn mean_te_for_label(cfg: &ExperimentConfig, label: &str) -> Result<f64> {
    let lexicon = build_lexicon(cfg.lexicon_seed);
    let mcfg = cfg.model_config(lexicon.vocab().len());
    let model = load_model_expecting(&cfg.output_dir.join("model.sacm"), &mcfg)?;
    let prompts = read_prompts_jsonl(&cfg.output_dir.join(prompts_file(label)))?;
    Ok(average_total_effect(&model, &lexicon, &prompts, cfg.error_policy)?.mean)
}
