//! Acceptance suite. Each test covers one numbered criterion at its stated
//! tolerance and prints one PASS line (visible with `--nocapture`); a failed
//! assert is the FAIL line. Criteria run serialized so the timing bounds are
//! measured without contention.
//!
//! Run: cargo test --test acceptance -- --nocapture

use std::collections::BTreeSet;
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sacm_core::analysis::{
    feature_vector, hypothesis_matrix, l1_difference, layer_contour, overlap_matrix,
    top_k_per_layer, FeatureVector, MediatorMean, SimilarityMatrix,
};
use sacm_core::config::ExperimentConfig;
use sacm_core::effects::{
    average_total_effect, compute_counterfactual_traces, compute_null_runs, grammaticality,
    sweep_neuron_layer, total_effect, y_ratio, ItemPolicy,
};
use sacm_core::grammar::{
    apply_swap_number, generate_prompts, generate_prompts_filtered, make_training_corpus,
    PairFilter, Prompt, StructureKind,
};
use sacm_core::lexicon::{build_lexicon, Lexicon};
use sacm_core::model::{
    forward_instrumented, forward_logits_all, forward_patched, init_model, sequence_loss,
    sequence_loss_and_grad, train, ModelConfig, ModelSnapshot, NeuronId, Params, PatchSet,
    TrainConfig,
};
use sacm_core::runner::{
    run_analyze, run_effects, run_generate, write_random_init_checkpoint, EffectFamily,
    RunOptions,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn fixture() -> (ExperimentConfig, Lexicon, ModelSnapshot) {
    let cfg = ExperimentConfig::default();
    let lexicon = build_lexicon(cfg.lexicon_seed);
    let mcfg = cfg.model_config(lexicon.vocab().len());
    let model = init_model(&mcfg).unwrap();
    (cfg, lexicon, model)
}

/// ~100 prompts spread over all nine canonical variants.
fn mixed_prompts(lexicon: &Lexicon, per_variant: usize, seed: u64) -> Vec<Prompt> {
    let mut out = Vec::new();
    for v in StructureKind::canonical_variants() {
        out.extend(generate_prompts(&v, per_variant, lexicon, seed).unwrap());
    }
    out
}

#[test]
fn criterion_01_reciprocal_identity() {
    let _guard = SERIAL.lock().unwrap();
    let t0 = Instant::now();
    let (_, lexicon, model) = fixture();
    let prompts = mixed_prompts(&lexicon, 12, 41);
    let prompts = &prompts[..100];
    for p in prompts {
        let t = total_effect(&model, &lexicon, p).unwrap();
        let swapped = apply_swap_number(p, &lexicon);
        let y_null_swapped = y_ratio(&model, &lexicon, &swapped).unwrap();
        let prod = t.y_swap * y_null_swapped;
        assert!(
            (prod - 1.0).abs() < 1e-12,
            "y_swap * y_null(swapped) = {prod} for `{}`",
            p.text()
        );
    }
    let dt = t0.elapsed();
    assert!(dt.as_secs_f64() < 10.0, "took {dt:?}, budget 10 s");
    println!(
        "ACCEPTANCE 1 PASS: reciprocal identity within 1e-12 on 100 prompts ({:.2}s)",
        dt.as_secs_f64()
    );
}

#[test]
fn criterion_02_te_relabeling_invariance() {
    let _guard = SERIAL.lock().unwrap();
    let (_, lexicon, model) = fixture();
    let prompts = mixed_prompts(&lexicon, 12, 43);
    for p in &prompts[..100] {
        let fwd = total_effect(&model, &lexicon, p).unwrap().te;
        let rev = total_effect(&model, &lexicon, &apply_swap_number(p, &lexicon)).unwrap().te;
        assert!(
            (fwd - rev).abs() < 1e-12,
            "TE from sg-start {fwd} vs pl-start {rev} for `{}`",
            p.text()
        );
    }
    println!("ACCEPTANCE 2 PASS: TE relabeling invariance within 1e-12 on 100 prompts");
}

#[test]
fn criterion_03_self_patch_neutrality() {
    let _guard = SERIAL.lock().unwrap();
    let (_, lexicon, model) = fixture();
    let prompts = mixed_prompts(&lexicon, 8, 47);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = &model.config;

    for k in 0..50 {
        let p = &prompts[rng.gen_range(0..prompts.len())];
        let run = forward_instrumented(&model, &p.encode(&lexicon).unwrap()).unwrap();
        let layer = rng.gen_range(0..=cfg.n_layers);
        let neuron = rng.gen_range(0..cfg.d_model);
        let pos = rng.gen_range(0..p.tokens.len() + 1);
        let val = run.trace.neuron_value(NeuronId { layer, neuron }, pos);
        let toks = p.encode(&lexicon).unwrap();
        let ps = PatchSet::new().neuron(NeuronId { layer, neuron }, pos, val).unwrap();
        let lp = forward_patched(&model, &toks, &ps).unwrap();
        // identical log-probs give an NIE of exactly zero
        let nie: f64 = lp
            .iter()
            .zip(&run.logprobs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(nie <= 1e-12, "neuron self-patch {k} perturbed outputs by {nie}");
    }
    for k in 0..20 {
        let p = &prompts[rng.gen_range(0..prompts.len())];
        let toks = p.encode(&lexicon).unwrap();
        let run = forward_instrumented(&model, &toks).unwrap();
        let layer = rng.gen_range(1..=cfg.n_layers);
        let head = rng.gen_range(0..cfg.n_heads);
        let pos = rng.gen_range(0..toks.len());
        let vals = run.trace.head_ctx_at(layer, head, pos).to_vec();
        let ps = PatchSet::new()
            .head(sacm_core::model::HeadId { layer, head }, pos, vals)
            .unwrap();
        let lp = forward_patched(&model, &toks, &ps).unwrap();
        let diff: f64 = lp
            .iter()
            .zip(&run.logprobs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff <= 1e-12, "head self-patch {k} perturbed outputs by {diff}");
    }
    println!("ACCEPTANCE 3 PASS: self-patch NIE 0 within 1e-12 (50 neuron + 20 head pairs)");
}

#[test]
fn criterion_04_full_patch_equivalence() {
    let _guard = SERIAL.lock().unwrap();
    let (_, lexicon, model) = fixture();
    for v in StructureKind::default_sweep() {
        let prompts = generate_prompts(&v, 20, &lexicon, 53).unwrap();
        for p in &prompts {
            let toks = p.encode(&lexicon).unwrap();
            let run = forward_instrumented(&model, &toks).unwrap();
            let swapped = apply_swap_number(p, &lexicon);
            let cf = forward_instrumented(&model, &swapped.encode(&lexicon).unwrap()).unwrap();

            let mut ps = PatchSet::new();
            for pos in 0..toks.len() {
                let row = cf.trace.residual_at(0, pos);
                for (j, &val) in row.iter().enumerate() {
                    ps = ps.neuron(NeuronId { layer: 0, neuron: j }, pos, val).unwrap();
                }
            }
            let lp = forward_patched(&model, &toks, &ps).unwrap();

            let (sg, pl) = lexicon.verb_ids(&p.verb).unwrap();
            let log_y = |lp: &[f64]| match p.subject_number {
                sacm_core::lexicon::Number::Sg => lp[pl as usize] - lp[sg as usize],
                sacm_core::lexicon::Number::Pl => lp[sg as usize] - lp[pl as usize],
            };
            let nie = (log_y(&lp) - log_y(&run.logprobs)).exp() - 1.0;
            let te = total_effect(&model, &lexicon, p).unwrap().te;
            let rel = (nie - te).abs() / te.abs().max(1e-300);
            assert!(rel < 1e-9, "variant {} prompt `{}`: NIE {nie} vs TE {te} (rel {rel})",
                v.label(), p.text());
        }
    }
    println!(
        "ACCEPTANCE 4 PASS: full layer-0 patch reproduces per-prompt TE within 1e-9 \
         (20 prompts x 6 structures)"
    );
}

#[test]
fn criterion_05_gradient_check() {
    let _guard = SERIAL.lock().unwrap();
    let t0 = Instant::now();
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        vocab_size: 23,
        max_seq_len: 10,
        init_seed: 59,
    };
    let model = init_model(&cfg).unwrap();
    let seqs: Vec<Vec<u32>> = vec![vec![0, 4, 9, 2, 17, 5], vec![0, 11, 3, 20]];

    let mut grads = Params::zeros_like(&cfg);
    let mut n_pred = 0usize;
    for s in &seqs {
        let (_, n) = sequence_loss_and_grad(&model, s, &mut grads).unwrap();
        n_pred += n;
    }
    let scale = 1.0 / n_pred as f64;
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
    let n_blocks = model.params.blocks().len();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0usize;
    for bi in 0..n_blocks {
        let (name, block) = {
            let blocks = model.params.blocks();
            (blocks[bi].0.clone(), blocks[bi].1.len())
        };
        let mut coords: BTreeSet<usize> = BTreeSet::new();
        coords.insert(0);
        coords.insert(block - 1);
        while coords.len() < 3.min(block) {
            coords.insert(rng.gen_range(0..block));
        }
        for ci in coords {
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
                "block {name} coord {ci}: analytic {analytic} vs central-diff {numeric} (rel {rel})"
            );
            checked += 1;
        }
    }
    let dt = t0.elapsed();
    assert!(dt.as_secs_f64() < 60.0, "took {dt:?}, budget 60 s");
    println!(
        "ACCEPTANCE 5 PASS: {checked} coordinates across {n_blocks} blocks match central \
         differences (rel < 1e-4, {:.1}s)",
        dt.as_secs_f64()
    );
}

#[test]
fn criterion_06_causality_bitwise() {
    let _guard = SERIAL.lock().unwrap();
    let (_, _, model) = fixture();
    let v = model.config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for case in 0..50 {
        let len = rng.gen_range(3..=12usize);
        let toks: Vec<u32> = (0..len).map(|_| rng.gen_range(0..v as u32)).collect();
        let t = rng.gen_range(0..len - 1);
        let mut mutated = toks.clone();
        for tok in mutated.iter_mut().skip(t + 1) {
            *tok = rng.gen_range(0..v as u32);
        }
        let a = forward_logits_all(&model, &toks).unwrap();
        let b = forward_logits_all(&model, &mutated).unwrap();
        assert!(
            a[..(t + 1) * v] == b[..(t + 1) * v],
            "case {case}: logits at positions <= {t} changed after mutating later tokens"
        );
    }
    println!("ACCEPTANCE 6 PASS: prefix logits bitwise invariant to future-token edits (50 cases)");
}

#[test]
fn criterion_07_random_weights_control() {
    let _guard = SERIAL.lock().unwrap();
    let (cfg, lexicon, model) = fixture();

    // |mean TE| < 0.5 per structure on the untrained model
    for v in StructureKind::canonical_variants() {
        let prompts = generate_prompts(&v, 300, &lexicon, cfg.prompt_seed).unwrap();
        let avg = average_total_effect(&model, &lexicon, &prompts, ItemPolicy::Abort).unwrap();
        assert!(
            avg.mean.abs() < 0.5,
            "random-weights mean TE for {} is {}",
            v.label(),
            avg.mean
        );
    }

    // indirect effects peak at layer 0 on a separated structure
    let s = StructureKind::parse("across_pp_sg").unwrap();
    let prompts = generate_prompts(&s, 300, &lexicon, cfg.prompt_seed).unwrap();
    let nulls = compute_null_runs(&model, &lexicon, &prompts).unwrap();
    let cf = compute_counterfactual_traces(&model, &lexicon, &prompts).unwrap();
    let mut means = Vec::new();
    for layer in 0..=model.config.n_layers {
        let rows =
            sweep_neuron_layer(&model, &lexicon, &prompts, &nulls, &cf, layer, cfg.policy).unwrap();
        for neuron in 0..model.config.d_model {
            let base = neuron * prompts.len();
            let sum: f64 = rows[base..base + prompts.len()].iter().map(|r| r.effect).sum();
            means.push(MediatorMean { layer, neuron, nie: sum / prompts.len() as f64 });
        }
    }
    let sel = top_k_per_layer(&means, 0.05, model.config.n_layers, model.config.d_model).unwrap();
    let contour = layer_contour(&sel, &means, 0.05).unwrap();
    let l0 = contour.points[0].1.abs();
    for &(layer, v) in &contour.points[1..] {
        assert!(
            v.abs() <= 1.1 * l0,
            "layer {layer} top-5% NIE {v} exceeds 110% of layer-0 magnitude {l0}"
        );
    }
    println!(
        "ACCEPTANCE 7 PASS: random-weights |mean TE| < 0.5 on 9 variants; top-5% NIE peaks \
         at layer 0 (contour {:?})",
        contour.points.iter().map(|(_, v)| format!("{v:.2e}")).collect::<Vec<_>>()
    );
}

#[test]
fn criterion_08_trained_model_behavior() {
    let _guard = SERIAL.lock().unwrap();
    let t0 = Instant::now();
    let (cfg, lexicon, random_model) = fixture();
    let mcfg = cfg.model_config(lexicon.vocab().len());

    let corpus_lines = make_training_corpus(&lexicon, cfg.corpus_size, cfg.corpus_seed).unwrap();
    let seqs: Vec<Vec<u32>> = corpus_lines
        .iter()
        .map(|l| {
            lexicon
                .vocab()
                .encode_with_bos(&l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                .unwrap()
        })
        .collect();
    let tcfg = TrainConfig { ..cfg.train_config() };
    let (trained, _) = train(init_model(&mcfg).unwrap(), &seqs, &tcfg).unwrap();
    let train_time = t0.elapsed();
    assert!(
        train_time.as_secs_f64() <= 30.0 * 60.0,
        "default recipe took {train_time:?}, budget 30 min"
    );

    let simple = StructureKind::simple();
    let held = generate_prompts_filtered(
        &simple,
        cfg.heldout_count,
        &lexicon,
        sacm_core::mix_seed(cfg.prompt_seed, "heldout"),
        PairFilter::HeldOutOnly,
    )
    .unwrap();
    let good = held
        .iter()
        .filter(|p| grammaticality(&trained, &lexicon, p).unwrap() > 1.0)
        .count();
    assert!(
        good * 10 >= held.len() * 9,
        "G > 1 on only {good}/{} held-out prompts",
        held.len()
    );

    let prompts = generate_prompts(&simple, 300, &lexicon, cfg.prompt_seed).unwrap();
    let te_trained =
        average_total_effect(&trained, &lexicon, &prompts, ItemPolicy::Abort).unwrap().mean;
    let te_random =
        average_total_effect(&random_model, &lexicon, &prompts, ItemPolicy::Abort).unwrap().mean;
    assert!(
        te_trained >= 10.0 * te_random.abs(),
        "trained mean TE {te_trained} vs random {te_random}: gap below 10x"
    );
    println!(
        "ACCEPTANCE 8 PASS: G>1 on {good}/{} held-out prompts; trained TE {te_trained:.1} vs \
         random {te_random:.4} ({:.0}x); training {:.1}s",
        held.len(),
        te_trained / te_random.abs(),
        train_time.as_secs_f64()
    );
}

/// Independent brute-force implementation of the feature-similarity
/// computation, kept free of the shipped code path.
fn hypothesis_oracle(variants: &[StructureKind]) -> Vec<f64> {
    let feats: Vec<FeatureVector> = variants.iter().map(feature_vector).collect();
    let n = feats.len();
    let num = |f: &FeatureVector| f.distance as f64;
    let mut max_dd: f64 = 0.0;
    for a in &feats {
        for b in &feats {
            max_dd = max_dd.max((num(a) - num(b)).abs());
        }
    }
    let mut dists = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (&feats[i], &feats[j]);
            let mut d = 0.0;
            for mismatch in [
                a.separated != b.separated,
                a.has_distractor != b.has_distractor,
                a.has_attractor != b.has_attractor,
                a.attractor_number != b.attractor_number,
                a.has_rc != b.has_rc,
                a.has_pp != b.has_pp,
            ] {
                if mismatch {
                    d += 1.0;
                }
            }
            if max_dd > 0.0 {
                d += (num(a) - num(b)).abs() * (2.0 / max_dd);
            }
            dists[i * n + j] = d;
        }
    }
    let max_d = dists.iter().cloned().fold(0.0f64, f64::max);
    dists
        .iter()
        .map(|d| if max_d > 0.0 { 100.0 * (max_d - d) / max_d } else { 100.0 })
        .collect()
}

#[test]
fn criterion_09_hypothesis_matrix_oracle() {
    let _guard = SERIAL.lock().unwrap();
    let variants = StructureKind::canonical_variants();
    let shipped = hypothesis_matrix(&variants);
    let oracle = hypothesis_oracle(&variants);
    assert!(shipped.is_symmetric_with_unit_diagonal(0.0), "symmetry / diagonal-100");
    for i in 0..shipped.n() {
        for j in 0..shipped.n() {
            assert_eq!(
                shipped.get(i, j),
                oracle[i * shipped.n() + j],
                "hypothesis[{i}][{j}] differs from the brute-force oracle"
            );
        }
    }
    // also over the complementizer-ablated variant set
    let mut extended = variants.clone();
    extended.extend(
        variants
            .iter()
            .filter(|v| v.kind.is_rc())
            .map(|v| StructureKind { complementizer: Some(false), ..*v }),
    );
    let shipped2 = hypothesis_matrix(&extended);
    let oracle2 = hypothesis_oracle(&extended);
    for i in 0..shipped2.n() {
        for j in 0..shipped2.n() {
            assert_eq!(shipped2.get(i, j), oracle2[i * shipped2.n() + j]);
        }
    }
    println!(
        "ACCEPTANCE 9 PASS: hypothesis matrix matches the independent oracle exactly \
         ({} and {} variants)",
        shipped.n(),
        shipped2.n()
    );
}

#[test]
fn criterion_10_analysis_oracles() {
    let _guard = SERIAL.lock().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(97);

    for case in 0..100 {
        let n_layers = rng.gen_range(1..4usize);
        let d = rng.gen_range(4..24usize);
        let fraction = *[0.05, 0.1, 0.25, 0.5, 1.0]
            .get(rng.gen_range(0..5usize))
            .unwrap();
        let mut effects = Vec::new();
        for layer in 0..=n_layers {
            for neuron in 0..d {
                // coarse grid forces ties
                let nie = (rng.gen_range(-4i32..5) as f64) * 0.25;
                effects.push(MediatorMean { layer, neuron, nie });
            }
        }
        let sel = top_k_per_layer(&effects, fraction, n_layers, d).unwrap();
        let k = (fraction * d as f64).ceil() as usize;
        for layer in 0..=n_layers {
            // oracle: stable sort-and-slice
            let mut vals: Vec<(usize, f64)> = effects
                .iter()
                .filter(|e| e.layer == layer)
                .map(|e| (e.neuron, e.nie))
                .collect();
            vals.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let expect: BTreeSet<usize> = vals.iter().take(k).map(|(n, _)| *n).collect();
            assert_eq!(sel[layer], expect, "case {case} layer {layer}");
        }

        // overlap vs bitset-intersection oracle
        let k2 = rng.gen_range(1..6usize);
        let sets: Vec<BTreeSet<usize>> = (0..3)
            .map(|_| {
                let mut s = BTreeSet::new();
                while s.len() < k2 {
                    s.insert(rng.gen_range(0..24usize));
                }
                s
            })
            .collect();
        let labels: Vec<String> = (0..3).map(|i| format!("v{i}")).collect();
        let m = overlap_matrix(&labels, &sets).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut inter = 0usize;
                for x in 0..24 {
                    if sets[i].contains(&x) && sets[j].contains(&x) {
                        inter += 1;
                    }
                }
                assert_eq!(m.get(i, j), 100.0 * inter as f64 / k2 as f64, "case {case}");
            }
        }

        // l1 vs direct lower-triangle sums
        let dim = rng.gen_range(2..6usize);
        let rand_matrix = |rng: &mut ChaCha8Rng| {
            let mut vals = vec![0.0; dim * dim];
            for i in 0..dim {
                vals[i * dim + i] = 100.0;
                for j in 0..i {
                    let v: f64 = rng.gen_range(0.0..100.0);
                    vals[i * dim + j] = v;
                    vals[j * dim + i] = v;
                }
            }
            SimilarityMatrix::new((0..dim).map(|i| format!("l{i}")).collect(), vals)
        };
        let a = rand_matrix(&mut rng);
        let b = rand_matrix(&mut rng);
        let c = rand_matrix(&mut rng);
        let mut direct = 0.0;
        for i in 0..dim {
            for j in 0..i {
                direct += (a.get(i, j) - b.get(i, j)).abs();
            }
        }
        let dab = l1_difference(&a, &b).unwrap();
        assert!((dab - direct).abs() < 1e-9, "case {case}: l1 {dab} vs direct {direct}");

        // metric properties on the triple
        let dba = l1_difference(&b, &a).unwrap();
        let dac = l1_difference(&a, &c).unwrap();
        let dcb = l1_difference(&c, &b).unwrap();
        assert!(dab >= 0.0 && dab == dba);
        assert_eq!(l1_difference(&a, &a).unwrap(), 0.0);
        assert!(dab <= dac + dcb + 1e-9, "triangle inequality violated in case {case}");
    }
    println!(
        "ACCEPTANCE 10 PASS: top-k, overlap, and l1 match brute-force oracles on 100 random \
         tables; l1 satisfies metric properties"
    );
}

#[test]
fn criterion_11_pipeline_budget_and_byte_identity() {
    let _guard = SERIAL.lock().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = tmp.path().join("out");
    cfg.cache_dir = tmp.path().join("cache");
    let opts = RunOptions { jobs: 8, resume: false };

    let t0 = Instant::now();
    run_generate(&cfg).unwrap();
    write_random_init_checkpoint(&cfg).unwrap();
    run_effects(&cfg, &[EffectFamily::Neurons], opts).unwrap();
    run_analyze(&cfg).unwrap();
    let dt = t0.elapsed();
    assert!(
        dt.as_secs_f64() <= 15.0 * 60.0,
        "generate -> effects(neurons) -> analyze took {dt:?}, budget 15 min"
    );

    let files: Vec<String> = {
        let mut v = vec!["effects_neurons.csv".to_string(), "analysis_contour.csv".into(),
            "analysis_hypothesis.csv".into(), "analysis_best_layer.csv".into()];
        for layer in 0..=cfg.n_layers {
            v.push(format!("analysis_overlap_layer{layer}.csv"));
        }
        v
    };
    let snapshot: Vec<(String, Vec<u8>)> = files
        .iter()
        .map(|f| (f.clone(), std::fs::read(cfg.output_dir.join(f)).unwrap()))
        .collect();

    // full recompute: drop the trace cache and shards, use a different
    // worker count, and compare bytes
    std::fs::remove_dir_all(&cfg.cache_dir).unwrap();
    run_effects(&cfg, &[EffectFamily::Neurons], RunOptions { jobs: 2, resume: false }).unwrap();
    run_analyze(&cfg).unwrap();
    for (name, bytes) in &snapshot {
        let now = std::fs::read(cfg.output_dir.join(name)).unwrap();
        assert_eq!(&now, bytes, "{name} differs across reruns");
    }
    println!(
        "ACCEPTANCE 11 PASS: 6 structures x 300 prompts pipeline in {:.0}s (budget 900s); \
         rerun byte-identical across worker counts",
        dt.as_secs_f64()
    );
}
