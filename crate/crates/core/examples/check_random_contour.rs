use sacm_core::analysis::{layer_contour, top_k_per_layer, MediatorMean};
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
    for label in ["across_pp_sg", "simple"] {
        let s = StructureKind::parse(label).unwrap();
        let prompts = generate_prompts(&s, 300, &lex, cfg.prompt_seed).unwrap();
        let nulls = compute_null_runs(&model, &lex, &prompts).unwrap();
        let cf = compute_counterfactual_traces(&model, &lex, &prompts).unwrap();
        let mut means = Vec::new();
        for layer in 0..=mcfg.n_layers {
            let rows = sweep_neuron_layer(&model, &lex, &prompts, &nulls, &cf, layer, cfg.policy).unwrap();
            for neuron in 0..mcfg.d_model {
                let base = neuron * prompts.len();
                let sum: f64 = rows[base..base + prompts.len()].iter().map(|r| r.effect).sum();
                means.push(MediatorMean { layer, neuron, nie: sum / prompts.len() as f64 });
            }
        }
        let sel = top_k_per_layer(&means, 0.05, mcfg.n_layers, mcfg.d_model).unwrap();
        let c = layer_contour(&sel, &means, 0.05).unwrap();
        println!("{label}: contour {:?}", c.points.iter().map(|(l, v)| format!("L{l}={v:.2e}")).collect::<Vec<_>>());
        let l0 = c.points[0].1.abs();
        for &(l, v) in &c.points[1..] {
            println!("  layer {l}: |{v:.3e}| <= 1.1*|{l0:.3e}| ? {}", v.abs() <= 1.1 * l0);
        }
    }
}
