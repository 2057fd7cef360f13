use std::time::Instant;
use sacm_core::config::ExperimentConfig;
use sacm_core::effects::{compute_counterfactual_traces, compute_null_runs, sweep_neuron_layer};
use sacm_core::grammar::{generate_prompts, StructureKind};
use sacm_core::lexicon::build_lexicon;
use sacm_core::model::init_model;

fn main() {
    let cfg = ExperimentConfig::default();
    let lex = build_lexicon(cfg.lexicon_seed);
    let mcfg = cfg.model_config(lex.vocab().len());
    let model = init_model(&mcfg).unwrap();
    let s = StructureKind::parse("across_pp_sg").unwrap();
    let prompts = generate_prompts(&s, 300, &lex, 17).unwrap();

    let t0 = Instant::now();
    let nulls = compute_null_runs(&model, &lex, &prompts).unwrap();
    let cf = compute_counterfactual_traces(&model, &lex, &prompts).unwrap();
    println!("traces+nulls: {:.2}s", t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let mut total_rows = 0usize;
    for layer in 0..=mcfg.n_layers {
        let rows = sweep_neuron_layer(&model, &lex, &prompts, &nulls, &cf, layer, cfg.policy).unwrap();
        total_rows += rows.len();
    }
    let dt = t1.elapsed().as_secs_f64();
    println!("sweep: {total_rows} rows in {dt:.2}s  ({:.0} patched fwd/s)", total_rows as f64 / dt);
    println!("extrapolated 6 variants: {:.1}s", dt * 6.0);
}
