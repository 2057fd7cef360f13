use std::time::Instant;
use sacm_core::config::ExperimentConfig;
use sacm_core::effects::{average_total_effect, grammaticality, ItemPolicy};
use sacm_core::grammar::{generate_prompts, generate_prompts_filtered, make_training_corpus, PairFilter, StructureKind};
use sacm_core::lexicon::build_lexicon;
use sacm_core::model::{init_model, train, TrainConfig};

fn main() {
    let cfg = ExperimentConfig::default();
    let lex = build_lexicon(cfg.lexicon_seed);
    let mcfg = cfg.model_config(lex.vocab().len());
    let corpus_lines = make_training_corpus(&lex, cfg.corpus_size, cfg.corpus_seed).unwrap();
    let seqs: Vec<Vec<u32>> = corpus_lines.iter().map(|l| {
        lex.vocab().encode_with_bos(&l.split_whitespace().map(str::to_string).collect::<Vec<_>>()).unwrap()
    }).collect();

    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let tcfg = TrainConfig { steps, seed: cfg.train_seed, ..cfg.train_config() };
    let t0 = Instant::now();
    let (model, curve) = train(init_model(&mcfg).unwrap(), &seqs, &tcfg).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    println!("trained {} steps in {:.1}s, last losses: {:?}", steps, train_secs,
        &curve[curve.len().saturating_sub(3)..].iter().map(|(_, l)| *l).collect::<Vec<_>>());

    // held-out simple prompts: G > 1 fraction
    let simple = StructureKind::simple();
    let held = generate_prompts_filtered(&simple, 30, &lex, sacm_core::mix_seed(cfg.prompt_seed, "heldout"), PairFilter::HeldOutOnly)
        .or_else(|_| generate_prompts_filtered(&simple, 20, &lex, sacm_core::mix_seed(cfg.prompt_seed, "heldout"), PairFilter::HeldOutOnly))
        .unwrap();
    let good = held.iter().filter(|p| grammaticality(&model, &lex, p).unwrap() > 1.0).count();
    println!("held-out G>1: {}/{}", good, held.len());

    // trained vs random mean TE on simple agreement
    let prompts = generate_prompts(&simple, 300, &lex, cfg.prompt_seed).unwrap();
    let te_trained = average_total_effect(&model, &lex, &prompts, ItemPolicy::Abort).unwrap().mean;
    let rand_model = init_model(&mcfg).unwrap();
    let te_random = average_total_effect(&rand_model, &lex, &prompts, ItemPolicy::Abort).unwrap().mean;
    println!("mean TE trained={te_trained:.3} random={te_random:.5} ratio={:.1}", te_trained / te_random.abs().max(1e-12));
}
