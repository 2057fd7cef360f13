//! End-to-end pipeline tests at small scale: determinism, resume equality,
//! provenance gating, and report regeneration.

use std::fs;
use std::path::Path;

use sacm_core::config::ExperimentConfig;
use sacm_core::grammar::read_prompts_jsonl;
use sacm_core::lexicon::build_lexicon;
use sacm_core::manifest::RunManifest;
use sacm_core::model::{init_model, init_train_state, load_train_state, save_train_state, train_chunk};
use sacm_core::runner::{
    run_analyze, run_effects, run_generate, run_report, run_train, EffectFamily, RunOptions,
};
use sacm_core::Error;

fn small_config(dir: &Path) -> ExperimentConfig {
    let text = format!(
        "[experiment]\n\
         output_dir = {}\n\
         cache_dir = {}\n\
         [prompts]\n\
         count = 10\n\
         heldout_count = 4\n\
         structures = simple, across_1_distractor, across_pp_sg, within_rc_sg, within_rc_sg_nocomp, across_rc_pl, across_rc_pl_nocomp\n\
         sweep_structures = simple, across_pp_sg, within_rc_sg\n\
         [model]\n\
         n_layers = 2\n\
         d_model = 32\n\
         n_heads = 4\n\
         max_seq_len = 16\n\
         [train]\n\
         steps = 24\n\
         batch_size = 8\n\
         checkpoint_every = 8\n\
         corpus_size = 400\n\
         eval_fraction = 0.05\n",
        dir.join("out").display(),
        dir.join("cache").display()
    );
    ExperimentConfig::parse_str(&text).unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn full_pipeline_is_deterministic_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = cfg.output_dir.clone();
    let opts = RunOptions { jobs: 2, resume: false };

    run_generate(&cfg).unwrap();
    // generated prompt files parse and balance numbers
    let prompts = read_prompts_jsonl(&out.join("prompts_simple.jsonl")).unwrap();
    assert_eq!(prompts.len(), 10);
    let lex = build_lexicon(cfg.lexicon_seed);
    for p in &prompts {
        assert!(sacm_core::grammar::check_prompt_template(p, &lex));
    }

    // regenerating produces byte-identical artifacts
    let before: Vec<(String, Vec<u8>)> = ["prompts_simple.jsonl", "corpus.txt"]
        .iter()
        .map(|f| (f.to_string(), read(&out.join(f))))
        .collect();
    run_generate(&cfg).unwrap();
    for (name, bytes) in &before {
        assert_eq!(&read(&out.join(name)), bytes, "{name} changed across reruns");
    }

    run_train(&cfg, opts).unwrap();
    let model_bytes = read(&out.join("model.sacm"));

    run_effects(&cfg, &EffectFamily::all(), opts).unwrap();
    run_analyze(&cfg).unwrap();
    run_report(&cfg).unwrap();

    let csvs = [
        "effects_total.csv",
        "effects_grammaticality.csv",
        "effects_verb_profile.csv",
        "effects_neurons.csv",
        "effects_heads_swap.csv",
        "effects_heads_zero.csv",
        "analysis_contour.csv",
        "analysis_hypothesis.csv",
        "analysis_best_layer.csv",
        "analysis_te_summary.csv",
        "analysis_grammaticality_summary.csv",
        "analysis_paired_contrast.csv",
        "analysis_paired_summary.csv",
        "report.md",
    ];
    let snapshot: Vec<(String, Vec<u8>)> =
        csvs.iter().map(|f| (f.to_string(), read(&out.join(f)))).collect();

    // rerun effects + analyze + report with a different worker count
    run_effects(&cfg, &EffectFamily::all(), RunOptions { jobs: 1, resume: false }).unwrap();
    run_analyze(&cfg).unwrap();
    run_report(&cfg).unwrap();
    for (name, bytes) in &snapshot {
        assert_eq!(&read(&out.join(name)), bytes, "{name} changed across reruns/thread counts");
    }

    // resumed sweep (shards already on disk) gives the same bytes
    run_effects(&cfg, &[EffectFamily::Neurons], RunOptions { jobs: 2, resume: true }).unwrap();
    assert_eq!(
        read(&out.join("effects_neurons.csv")),
        snapshot.iter().find(|(n, _)| n == "effects_neurons.csv").unwrap().1
    );

    // training is idempotent once the step budget is exhausted
    run_train(&cfg, RunOptions { jobs: 2, resume: true }).unwrap();
    assert_eq!(read(&out.join("model.sacm")), model_bytes);
}

#[test]
fn train_resume_after_interruption_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = cfg.output_dir.clone();
    run_generate(&cfg).unwrap();
    let opts = RunOptions { jobs: 2, resume: false };

    // uninterrupted run
    run_train(&cfg, opts).unwrap();
    let finished = read(&out.join("model.sacm"));
    let finished_curve = read(&out.join("loss_curve.csv"));

    // emulate a kill at step 8: rebuild the partial training state by hand,
    // then let `--resume` finish the schedule
    let lexicon = build_lexicon(cfg.lexicon_seed);
    let corpus = sacm_core::grammar::read_corpus(&out.join("corpus.txt")).unwrap();
    let seqs: Vec<Vec<u32>> = corpus
        .iter()
        .map(|l| {
            lexicon
                .vocab()
                .encode_with_bos(&l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                .unwrap()
        })
        .collect();
    let tcfg = cfg.train_config();
    let (train_seqs, _) = sacm_core::model::split_corpus(&seqs, tcfg.eval_fraction);
    let mut state = init_train_state(
        init_model(&cfg.model_config(lexicon.vocab().len())).unwrap(),
    );
    train_chunk(&mut state, train_seqs, &tcfg, 8).unwrap();
    fs::remove_file(out.join("model.sacm")).unwrap();
    save_train_state(&out.join("train_state.sacm"), &state).unwrap();
    let reloaded = load_train_state(&out.join("train_state.sacm")).unwrap();
    assert_eq!(reloaded.step, 8);

    run_train(&cfg, RunOptions { jobs: 2, resume: true }).unwrap();
    assert_eq!(read(&out.join("model.sacm")), finished, "resumed weights differ");
    assert_eq!(read(&out.join("loss_curve.csv")), finished_curve, "resumed curve differs");
}

#[test]
fn stage_gating_and_digest_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let opts = RunOptions { jobs: 1, resume: false };

    // effects before generate
    assert!(matches!(
        run_effects(&cfg, &[EffectFamily::Total], opts),
        Err(Error::MissingPrerequisite(_))
    ));

    run_generate(&cfg).unwrap();

    // effects before any checkpoint exists
    assert!(matches!(
        run_effects(&cfg, &[EffectFamily::Total], opts),
        Err(Error::MissingPrerequisite(_))
    ));

    // analyze before effects
    sacm_core::runner::write_random_init_checkpoint(&cfg).unwrap();
    assert!(matches!(run_analyze(&cfg), Err(Error::MissingPrerequisite(_))));

    // a config change must abort against the old manifest
    let mut other = cfg.clone();
    other.prompt_seed = 999;
    assert!(matches!(run_train(&other, opts), Err(Error::DigestMismatch(_))));

    // tampering with a recorded output is caught
    run_effects(&cfg, &[EffectFamily::Total, EffectFamily::Grammaticality], opts).unwrap();
    let manifest = RunManifest::load(&cfg.output_dir).unwrap().unwrap();
    manifest.verify_output("generate", &cfg.output_dir, "corpus.txt").unwrap();
    fs::write(cfg.output_dir.join("corpus.txt"), "tampered\n").unwrap();
    assert!(matches!(
        run_train(&cfg, opts),
        Err(Error::DigestMismatch(_)) | Err(Error::MissingPrerequisite(_))
    ));
}

#[test]
fn heldout_prompts_use_unseen_pairs_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    run_generate(&cfg).unwrap();
    let lex = build_lexicon(cfg.lexicon_seed);
    let held = read_prompts_jsonl(&cfg.output_dir.join("prompts_simple_heldout.jsonl")).unwrap();
    assert!(!held.is_empty());
    for p in &held {
        let (noun, _) = lex.noun_index_of(&p.tokens[p.subject_index]).unwrap();
        let verb = lex
            .verbs
            .iter()
            .position(|v| v.lemma == p.verb.lemma)
            .expect("verb in lexicon");
        assert!(lex.is_held_out(noun, verb), "held-out prompt uses a training pair");
    }
}
