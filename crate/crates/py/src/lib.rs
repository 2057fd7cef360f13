//! Python bindings: lexicon/prompt generation, the toy LM, and the effect
//! and similarity-matrix operations. Build, then import the cdylib as
//! `sacm_py` (see python/smoke_test.py).

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use sacm_core::analysis;
use sacm_core::effects;
use sacm_core::effects::PatchPositionPolicy;
use sacm_core::grammar;
use sacm_core::grammar::StructureKind;
use sacm_core::lexicon;
use sacm_core::model;
use sacm_core::model::{HeadId, ModelConfig, NeuronId, TrainConfig};

fn to_py(e: sacm_core::Error) -> PyErr {
    match e.exit_code() {
        4 => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct Lexicon {
    inner: lexicon::Lexicon,
}

#[pymethods]
impl Lexicon {
    #[new]
    fn new(seed: u64) -> Lexicon {
        Lexicon { inner: lexicon::build_lexicon(seed) }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn vocab_size(&self) -> usize {
        self.inner.vocab().len()
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.vocab().tokens().to_vec()
    }

    fn noun_count(&self) -> usize {
        self.inner.nouns.len()
    }

    fn verb_count(&self) -> usize {
        self.inner.verbs.len()
    }

    fn held_out_pair_count(&self) -> usize {
        self.inner.held_out_pairs().len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Lexicon(seed={}, nouns={}, verbs={})",
            self.inner.seed,
            self.inner.nouns.len(),
            self.inner.verbs.len()
        )
    }
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct Prompt {
    inner: grammar::Prompt,
}

#[pymethods]
impl Prompt {
    #[getter]
    fn tokens(&self) -> Vec<String> {
        self.inner.tokens.clone()
    }

    #[getter]
    fn text(&self) -> String {
        self.inner.text()
    }

    #[getter]
    fn structure(&self) -> String {
        self.inner.structure.label()
    }

    #[getter]
    fn subject_index(&self) -> usize {
        self.inner.subject_index
    }

    #[getter]
    fn subject_number(&self) -> String {
        self.inner.subject_number.label().to_string()
    }

    #[getter]
    fn attractor_index(&self) -> Option<usize> {
        self.inner.attractor_index
    }

    #[getter]
    fn verb_sg(&self) -> String {
        self.inner.verb.surface_sg.clone()
    }

    #[getter]
    fn verb_pl(&self) -> String {
        self.inner.verb.surface_pl.clone()
    }

    /// The swap-number counterfactual (an involution).
    fn swap_number(&self, lexicon: &Lexicon) -> Prompt {
        Prompt { inner: grammar::apply_swap_number(&self.inner, &lexicon.inner) }
    }

    /// Re-render with the complementizer present or absent (RC structures).
    fn with_complementizer(&self, present: bool) -> PyResult<Prompt> {
        Ok(Prompt { inner: grammar::render_tokens(&self.inner, present).map_err(to_py)? })
    }

    fn __repr__(&self) -> String {
        format!("Prompt({:?} -> {}/{})", self.inner.text(), self.verb_sg(), self.verb_pl())
    }
}

#[pyclass]
struct Model {
    inner: model::ModelSnapshot,
}

fn parse_policy(policy: &str) -> PyResult<PatchPositionPolicy> {
    PatchPositionPolicy::parse(policy).map_err(to_py)
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (lexicon, n_layers=4, d_model=128, n_heads=4, max_seq_len=32, init_seed=0))]
    fn new(
        lexicon: &Lexicon,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        max_seq_len: usize,
        init_seed: u64,
    ) -> PyResult<Model> {
        let cfg = ModelConfig {
            n_layers,
            d_model,
            n_heads,
            vocab_size: lexicon.inner.vocab().len(),
            max_seq_len,
            init_seed,
        };
        Ok(Model { inner: model::init_model(&cfg).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        Ok(Model { inner: model::load_model(std::path::Path::new(path)).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_model(std::path::Path::new(path), &self.inner).map_err(to_py)
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.config.n_layers
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.config.d_model
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.config.n_heads
    }

    /// Final-position log-probabilities for a prompt (BOS added internally).
    fn forward_logprobs(&self, lexicon: &Lexicon, prompt: &Prompt) -> PyResult<Vec<f64>> {
        let toks = prompt.inner.encode(&lexicon.inner).map_err(to_py)?;
        let (lp, _) = model::forward(&self.inner, &toks).map_err(to_py)?;
        Ok(lp)
    }

    fn continuation_logprob(
        &self,
        lexicon: &Lexicon,
        prompt: &Prompt,
        token: &str,
    ) -> PyResult<f64> {
        let toks = prompt.inner.encode(&lexicon.inner).map_err(to_py)?;
        let id = lexicon.inner.vocab().id(token).map_err(to_py)?;
        model::continuation_logprob(&self.inner, &toks, id).map_err(to_py)
    }

    fn y_ratio(&self, lexicon: &Lexicon, prompt: &Prompt) -> PyResult<f64> {
        effects::y_ratio(&self.inner, &lexicon.inner, &prompt.inner).map_err(to_py)
    }

    fn grammaticality(&self, lexicon: &Lexicon, prompt: &Prompt) -> PyResult<f64> {
        effects::grammaticality(&self.inner, &lexicon.inner, &prompt.inner).map_err(to_py)
    }

    /// (te, y_null, y_swap, g_sg, g_pl)
    fn total_effect(&self, lexicon: &Lexicon, prompt: &Prompt) -> PyResult<(f64, f64, f64, f64, f64)> {
        let t = effects::total_effect(&self.inner, &lexicon.inner, &prompt.inner).map_err(to_py)?;
        Ok((t.te, t.y_null, t.y_swap, t.g_sg, t.g_pl))
    }

    #[pyo3(signature = (lexicon, prompts, layer, neuron, policy="subject_only"))]
    fn neuron_nie(
        &self,
        lexicon: &Lexicon,
        prompts: Vec<Prompt>,
        layer: usize,
        neuron: usize,
        policy: &str,
    ) -> PyResult<f64> {
        let prompts: Vec<grammar::Prompt> = prompts.into_iter().map(|p| p.inner).collect();
        let eff = effects::neuron_nie(
            &self.inner,
            &lexicon.inner,
            &prompts,
            NeuronId { layer, neuron },
            parse_policy(policy)?,
        )
        .map_err(to_py)?;
        Ok(eff.nie)
    }

    #[pyo3(signature = (lexicon, prompts, layer, head, policy="subject_only"))]
    fn head_nie_swap(
        &self,
        lexicon: &Lexicon,
        prompts: Vec<Prompt>,
        layer: usize,
        head: usize,
        policy: &str,
    ) -> PyResult<f64> {
        let prompts: Vec<grammar::Prompt> = prompts.into_iter().map(|p| p.inner).collect();
        let eff = effects::head_nie_swap(
            &self.inner,
            &lexicon.inner,
            &prompts,
            HeadId { layer, head },
            parse_policy(policy)?,
        )
        .map_err(to_py)?;
        Ok(eff.nie)
    }

    fn head_cie_zero(
        &self,
        lexicon: &Lexicon,
        prompts: Vec<Prompt>,
        layer: usize,
        head: usize,
    ) -> PyResult<f64> {
        let prompts: Vec<grammar::Prompt> = prompts.into_iter().map(|p| p.inner).collect();
        let eff =
            effects::head_cie_zero(&self.inner, &lexicon.inner, &prompts, HeadId { layer, head })
                .map_err(to_py)?;
        Ok(eff.nie)
    }

    /// Trains in place on corpus lines; returns the (step, loss) curve.
    #[pyo3(signature = (lexicon, corpus, steps, batch_size=32, lr=1e-3, seed=0))]
    fn train(
        &mut self,
        lexicon: &Lexicon,
        corpus: Vec<String>,
        steps: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<Vec<(u64, f64)>> {
        let seqs: Vec<Vec<u32>> = corpus
            .iter()
            .map(|line| {
                let toks: Vec<String> = line.split_whitespace().map(str::to_string).collect();
                lexicon.inner.vocab().encode_with_bos(&toks)
            })
            .collect::<sacm_core::Result<_>>()
            .map_err(to_py)?;
        let cfg = TrainConfig {
            steps,
            batch_size,
            lr,
            seed,
            warmup_steps: (steps / 20).max(1),
            eval_fraction: 0.0,
            ..TrainConfig::default()
        };
        let (trained, curve) =
            model::train(self.inner.clone(), &seqs, &cfg).map_err(to_py)?;
        self.inner = trained;
        Ok(curve)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Model(layers={}, d_model={}, heads={})", c.n_layers, c.d_model, c.n_heads)
    }
}

#[pyfunction]
#[pyo3(signature = (structure, n, lexicon, seed, held_out_only=false))]
fn generate_prompts(
    structure: &str,
    n: usize,
    lexicon: &Lexicon,
    seed: u64,
    held_out_only: bool,
) -> PyResult<Vec<Prompt>> {
    let s = StructureKind::parse(structure).map_err(to_py)?;
    let filter =
        if held_out_only { grammar::PairFilter::HeldOutOnly } else { grammar::PairFilter::All };
    let prompts = grammar::generate_prompts_filtered(&s, n, &lexicon.inner, seed, filter)
        .map_err(to_py)?;
    Ok(prompts.into_iter().map(|inner| Prompt { inner }).collect())
}

#[pyfunction]
fn make_training_corpus(lexicon: &Lexicon, size: usize, seed: u64) -> PyResult<Vec<String>> {
    grammar::make_training_corpus(&lexicon.inner, size, seed).map_err(to_py)
}

#[pyfunction]
fn structure_labels() -> Vec<String> {
    StructureKind::canonical_variants().iter().map(StructureKind::label).collect()
}

/// Feature-based similarity matrix for the given variant labels, as rows.
#[pyfunction]
fn hypothesis_matrix(labels: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
    let variants: Vec<StructureKind> = labels
        .iter()
        .map(|l| StructureKind::parse(l))
        .collect::<sacm_core::Result<_>>()
        .map_err(to_py)?;
    let m = analysis::hypothesis_matrix(&variants);
    Ok((0..m.n()).map(|i| (0..m.n()).map(|j| m.get(i, j)).collect()).collect())
}

/// Overlap matrix (percent) of equal-size neuron index sets.
#[pyfunction]
fn overlap_matrix(labels: Vec<String>, sets: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
    let sets: Vec<std::collections::BTreeSet<usize>> =
        sets.into_iter().map(|s| s.into_iter().collect()).collect();
    let m = analysis::overlap_matrix(&labels, &sets).map_err(to_py)?;
    Ok((0..m.n()).map(|i| (0..m.n()).map(|j| m.get(i, j)).collect()).collect())
}

/// l1 difference over the strictly-lower triangle of two square matrices.
#[pyfunction]
fn l1_difference(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("matrices differ in size"));
    }
    let mut sum = 0.0;
    for i in 0..a.len() {
        if a[i].len() != a.len() || b[i].len() != b.len() {
            return Err(PyValueError::new_err("matrices must be square"));
        }
        for j in 0..i {
            sum += (a[i][j] - b[i][j]).abs();
        }
    }
    Ok(sum)
}

#[pymodule]
fn sacm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Lexicon>()?;
    m.add_class::<Prompt>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(make_training_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(structure_labels, m)?)?;
    m.add_function(wrap_pyfunction!(hypothesis_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(l1_difference, m)?)?;
    Ok(())
}
