//! The six syntactic structures: templates, prompt sampling, the swap-number
//! counterfactual, complementizer re-rendering, and the synthetic training
//! corpus with an independent agreement checker.
//!
//! A prompt is a left context ending immediately before the target verb slot.
//! Swap-number replaces only the subject token with the opposite-number form
//! of the same lexeme, so token counts never change.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{
    Lexicon, Number, TokenCategory, VerbLexeme, AND, PERIOD, THAT, THE,
};
use crate::mix_seed;

/// The six structure kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    SimpleAgreement,
    WithinObjRC,
    AcrossOneDistractor,
    AcrossTwoDistractors,
    AcrossPP,
    AcrossObjRC,
}

impl Kind {
    pub fn has_attractor(self) -> bool {
        matches!(self, Kind::WithinObjRC | Kind::AcrossPP | Kind::AcrossObjRC)
    }

    pub fn is_rc(self) -> bool {
        matches!(self, Kind::WithinObjRC | Kind::AcrossObjRC)
    }

    pub fn base_label(self) -> &'static str {
        match self {
            Kind::SimpleAgreement => "simple",
            Kind::WithinObjRC => "within_rc",
            Kind::AcrossOneDistractor => "across_1_distractor",
            Kind::AcrossTwoDistractors => "across_2_distractors",
            Kind::AcrossPP => "across_pp",
            Kind::AcrossObjRC => "across_rc",
        }
    }

    pub fn all() -> [Kind; 6] {
        [
            Kind::SimpleAgreement,
            Kind::WithinObjRC,
            Kind::AcrossOneDistractor,
            Kind::AcrossTwoDistractors,
            Kind::AcrossPP,
            Kind::AcrossObjRC,
        ]
    }
}

/// A structure kind plus its variant flags: attractor number for attractor
/// structures, complementizer presence for RC structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StructureKind {
    pub kind: Kind,
    pub attractor_number: Option<Number>,
    pub complementizer: Option<bool>,
}

impl StructureKind {
    pub fn new(
        kind: Kind,
        attractor_number: Option<Number>,
        complementizer: Option<bool>,
    ) -> Result<StructureKind> {
        if kind.has_attractor() != attractor_number.is_some() {
            return Err(Error::Config(format!(
                "attractor_number must be set iff the structure has an attractor ({})",
                kind.base_label()
            )));
        }
        if kind.is_rc() != complementizer.is_some() {
            return Err(Error::Config(format!(
                "complementizer flag applies only to RC structures ({})",
                kind.base_label()
            )));
        }
        Ok(StructureKind { kind, attractor_number, complementizer })
    }

    pub fn simple() -> StructureKind {
        StructureKind { kind: Kind::SimpleAgreement, attractor_number: None, complementizer: None }
    }

    pub fn label(&self) -> String {
        let mut s = self.kind.base_label().to_string();
        if let Some(n) = self.attractor_number {
            s.push('_');
            s.push_str(n.label());
        }
        if self.complementizer == Some(false) {
            s.push_str("_nocomp");
        }
        s
    }

    pub fn parse(label: &str) -> Result<StructureKind> {
        let (rest, comp_absent) = match label.strip_suffix("_nocomp") {
            Some(r) => (r, true),
            None => (label, false),
        };
        let (kind, attr) = match rest {
            "simple" => (Kind::SimpleAgreement, None),
            "across_1_distractor" => (Kind::AcrossOneDistractor, None),
            "across_2_distractors" => (Kind::AcrossTwoDistractors, None),
            other => {
                let (base, num) = match other.rfind('_') {
                    Some(i) => (&other[..i], Number::parse(&other[i + 1..])?),
                    None => return Err(Error::Config(format!("unknown structure `{label}`"))),
                };
                let kind = match base {
                    "across_pp" => Kind::AcrossPP,
                    "within_rc" => Kind::WithinObjRC,
                    "across_rc" => Kind::AcrossObjRC,
                    _ => return Err(Error::Config(format!("unknown structure `{label}`"))),
                };
                (kind, Some(num))
            }
        };
        if comp_absent && !kind.is_rc() {
            return Err(Error::Config(format!("`{label}`: _nocomp applies only to RC structures")));
        }
        let comp = if kind.is_rc() { Some(!comp_absent) } else { None };
        StructureKind::new(kind, attr, comp)
    }

    /// The nine canonical variants (complementizer present for RC kinds),
    /// in the fixed reporting order.
    pub fn canonical_variants() -> Vec<StructureKind> {
        let mut out = Vec::new();
        out.push(StructureKind::simple());
        out.push(StructureKind::new(Kind::AcrossOneDistractor, None, None).unwrap());
        out.push(StructureKind::new(Kind::AcrossTwoDistractors, None, None).unwrap());
        for num in [Number::Sg, Number::Pl] {
            out.push(StructureKind::new(Kind::AcrossPP, Some(num), None).unwrap());
        }
        for num in [Number::Sg, Number::Pl] {
            out.push(StructureKind::new(Kind::WithinObjRC, Some(num), Some(true)).unwrap());
        }
        for num in [Number::Sg, Number::Pl] {
            out.push(StructureKind::new(Kind::AcrossObjRC, Some(num), Some(true)).unwrap());
        }
        out
    }

    /// One variant per kind (singular attractors), used as the default
    /// mediator-sweep set.
    pub fn default_sweep() -> Vec<StructureKind> {
        vec![
            StructureKind::simple(),
            StructureKind::new(Kind::AcrossOneDistractor, None, None).unwrap(),
            StructureKind::new(Kind::AcrossTwoDistractors, None, None).unwrap(),
            StructureKind::new(Kind::AcrossPP, Some(Number::Sg), None).unwrap(),
            StructureKind::new(Kind::WithinObjRC, Some(Number::Sg), Some(true)).unwrap(),
            StructureKind::new(Kind::AcrossObjRC, Some(Number::Sg), Some(true)).unwrap(),
        ]
    }
}

/// A rendered left context with structural annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub tokens: Vec<String>,
    pub structure: StructureKind,
    pub subject_index: usize,
    pub subject_number: Number,
    pub attractor_index: Option<usize>,
    pub verb: VerbLexeme,
    pub seed: u64,
}

impl Prompt {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Model input: BOS followed by the prompt tokens.
    pub fn encode(&self, lexicon: &Lexicon) -> Result<Vec<u32>> {
        lexicon.vocab().encode_with_bos(&self.tokens)
    }

    /// Tokens between the subject and the verb slot.
    pub fn subject_verb_distance(&self) -> usize {
        self.tokens.len() - self.subject_index - 1
    }

    /// The correct / incorrect verb forms for this prompt's subject number.
    pub fn verb_forms(&self) -> (&str, &str) {
        match self.subject_number {
            Number::Sg => (&self.verb.surface_sg, &self.verb.surface_pl),
            Number::Pl => (&self.verb.surface_pl, &self.verb.surface_sg),
        }
    }
}

/// Restricts prompt sampling by the lexicon's held-out noun-verb split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairFilter {
    All,
    HeldOutOnly,
    TrainingOnly,
}

/// Samples `n` prompts without replacement from the cross product of
/// eligible subjects x attractors x verbs. Subject numbers are balanced
/// (odd sample indices singular), adverbs/prepositions/embedded verbs are
/// sampled uniformly per prompt.
pub fn generate_prompts(
    structure: &StructureKind,
    n: usize,
    lexicon: &Lexicon,
    seed: u64,
) -> Result<Vec<Prompt>> {
    generate_prompts_filtered(structure, n, lexicon, seed, PairFilter::All)
}

pub fn generate_prompts_filtered(
    structure: &StructureKind,
    n: usize,
    lexicon: &Lexicon,
    seed: u64,
    filter: PairFilter,
) -> Result<Vec<Prompt>> {
    let subjects = lexicon.subject_nouns();
    let attractors: Vec<usize> = match structure.kind {
        Kind::SimpleAgreement | Kind::AcrossOneDistractor | Kind::AcrossTwoDistractors => vec![],
        Kind::AcrossPP | Kind::WithinObjRC => (0..lexicon.nouns.len()).collect(),
        Kind::AcrossObjRC => lexicon.animate_nouns(),
    };

    // Deterministic cross-product order: subject asc, attractor asc, verb asc.
    let mut combos: Vec<(usize, Option<usize>, usize)> = Vec::new();
    for &s in &subjects {
        for v in 0..lexicon.verbs.len() {
            let keep = match filter {
                PairFilter::All => true,
                PairFilter::HeldOutOnly => lexicon.is_held_out(s, v),
                PairFilter::TrainingOnly => !lexicon.is_held_out(s, v),
            };
            if !keep {
                continue;
            }
            if structure.kind.has_attractor() {
                for &a in &attractors {
                    if a != s {
                        combos.push((s, Some(a), v));
                    }
                }
            } else {
                combos.push((s, None, v));
            }
        }
    }
    // Regroup to subject-major, attractor-major, verb-minor order.
    combos.sort_unstable();

    if combos.len() < n {
        return Err(Error::InsufficientCombinations { needed: n, available: combos.len() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &structure.label()));
    let (picked, _) = combos.partial_shuffle(&mut rng, n);
    let picked: Vec<(usize, Option<usize>, usize)> = picked.to_vec();

    let mut prompts = Vec::with_capacity(n);
    for (i, (s, a, v)) in picked.into_iter().enumerate() {
        let subject_number = if i % 2 == 1 { Number::Sg } else { Number::Pl };
        prompts.push(render_prompt(structure, lexicon, s, a, v, subject_number, seed, &mut rng)?);
    }
    Ok(prompts)
}

#[allow(clippy::too_many_arguments)]
fn render_prompt(
    structure: &StructureKind,
    lexicon: &Lexicon,
    subject: usize,
    attractor: Option<usize>,
    verb: usize,
    subject_number: Number,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Prompt> {
    let subj = lexicon.nouns[subject].surface(subject_number).to_string();
    let attr_num = structure.attractor_number;
    let attr = attractor.map(|a| lexicon.nouns[a].surface(attr_num.unwrap()).to_string());
    let the = THE.to_string();

    let (tokens, subject_index, attractor_index) = match structure.kind {
        Kind::SimpleAgreement => (vec![the, subj], 1, None),
        Kind::AcrossOneDistractor => {
            let adv = lexicon.adverbs[rng.gen_range(0..lexicon.adverbs.len())].clone();
            (vec![the, subj, adv], 1, None)
        }
        Kind::AcrossTwoDistractors => {
            let i = rng.gen_range(0..lexicon.adverbs.len());
            let mut j = rng.gen_range(0..lexicon.adverbs.len() - 1);
            if j >= i {
                j += 1;
            }
            let adv1 = lexicon.adverbs[i].clone();
            let adv2 = lexicon.adverbs[j].clone();
            (vec![the, subj, adv1, AND.to_string(), adv2], 1, None)
        }
        Kind::AcrossPP => {
            let prep = lexicon.prepositions[rng.gen_range(0..lexicon.prepositions.len())].clone();
            (vec![the, subj, prep, THE.to_string(), attr.unwrap()], 1, Some(4))
        }
        Kind::WithinObjRC => {
            if structure.complementizer == Some(true) {
                (vec![the, attr.unwrap(), THAT.to_string(), THE.to_string(), subj], 4, Some(1))
            } else {
                (vec![the, attr.unwrap(), THE.to_string(), subj], 3, Some(1))
            }
        }
        Kind::AcrossObjRC => {
            // Embedded verb agrees with the attractor (the RC subject).
            let mut ev = rng.gen_range(0..lexicon.verbs.len() - 1);
            if ev >= verb {
                ev += 1;
            }
            let emb = lexicon.verbs[ev].surface(attr_num.unwrap()).to_string();
            if structure.complementizer == Some(true) {
                (
                    vec![the, subj, THAT.to_string(), THE.to_string(), attr.unwrap(), emb],
                    1,
                    Some(4),
                )
            } else {
                (vec![the, subj, THE.to_string(), attr.unwrap(), emb], 1, Some(3))
            }
        }
    };

    Ok(Prompt {
        tokens,
        structure: *structure,
        subject_index,
        subject_number,
        attractor_index,
        verb: lexicon.verbs[verb].clone(),
        seed,
    })
}

/// Replaces the subject with the same lexeme in the opposite number.
/// Involution: applying twice restores the original prompt.
pub fn apply_swap_number(prompt: &Prompt, lexicon: &Lexicon) -> Prompt {
    let (idx, num) = lexicon
        .noun_index_of(&prompt.tokens[prompt.subject_index])
        .expect("subject token must be a known noun form");
    debug_assert_eq!(num, prompt.subject_number);
    let mut out = prompt.clone();
    out.subject_number = num.flip();
    out.tokens[prompt.subject_index] = lexicon.nouns[idx].surface(out.subject_number).to_string();
    out
}

/// Re-renders a prompt with the complementizer present or absent, shifting
/// annotation indices consistently. Only RC structures accept `true`;
/// `false` on a non-RC structure is a no-op (those templates never carry a
/// complementizer).
pub fn render_tokens(prompt: &Prompt, complementizer: bool) -> Result<Prompt> {
    if !prompt.structure.kind.is_rc() {
        if complementizer {
            return Err(Error::InvalidFlag { structure: prompt.structure.label() });
        }
        return Ok(prompt.clone());
    }
    let has = prompt.structure.complementizer == Some(true);
    let mut out = prompt.clone();
    out.structure.complementizer = Some(complementizer);
    // In both RC templates the complementizer sits at position 2.
    const COMP_POS: usize = 2;
    if has && !complementizer {
        out.tokens.remove(COMP_POS);
        if out.subject_index > COMP_POS {
            out.subject_index -= 1;
        }
        if let Some(a) = out.attractor_index {
            if a > COMP_POS {
                out.attractor_index = Some(a - 1);
            }
        }
    } else if !has && complementizer {
        out.tokens.insert(COMP_POS, THAT.to_string());
        if out.subject_index >= COMP_POS {
            out.subject_index += 1;
        }
        if let Some(a) = out.attractor_index {
            if a >= COMP_POS {
                out.attractor_index = Some(a + 1);
            }
        }
    }
    Ok(out)
}

/// Checks a prompt against its structure's template: category pattern,
/// annotation indices, and number marking.
pub fn check_prompt_template(prompt: &Prompt, lexicon: &Lexicon) -> bool {
    use TokenCategory as C;
    let cats: Option<Vec<C>> =
        prompt.tokens.iter().map(|t| lexicon.categorize(t)).collect();
    let Some(cats) = cats else { return false };

    let subj_ok = |i: usize| {
        matches!(cats.get(i), Some(C::Noun(_, n)) if *n == prompt.subject_number)
            && prompt.subject_index == i
    };
    let attr_ok = |i: usize| {
        matches!(cats.get(i), Some(C::Noun(_, n)) if Some(*n) == prompt.structure.attractor_number)
            && prompt.attractor_index == Some(i)
    };
    let the = |i: usize| matches!(cats.get(i), Some(C::The));
    let that = |i: usize| matches!(cats.get(i), Some(C::That));
    let adv = |i: usize| matches!(cats.get(i), Some(C::Adverb(_)));
    let comp = prompt.structure.complementizer;

    match prompt.structure.kind {
        Kind::SimpleAgreement => cats.len() == 2 && the(0) && subj_ok(1),
        Kind::AcrossOneDistractor => cats.len() == 3 && the(0) && subj_ok(1) && adv(2),
        Kind::AcrossTwoDistractors => {
            cats.len() == 5
                && the(0)
                && subj_ok(1)
                && adv(2)
                && matches!(cats[3], C::And)
                && adv(4)
                && prompt.tokens[2] != prompt.tokens[4]
        }
        Kind::AcrossPP => {
            cats.len() == 5
                && the(0)
                && subj_ok(1)
                && matches!(cats[2], C::Preposition(_))
                && the(3)
                && attr_ok(4)
        }
        Kind::WithinObjRC => {
            if comp == Some(true) {
                cats.len() == 5 && the(0) && attr_ok(1) && that(2) && the(3) && subj_ok(4)
            } else {
                cats.len() == 4 && the(0) && attr_ok(1) && the(2) && subj_ok(3)
            }
        }
        Kind::AcrossObjRC => {
            let emb_ok = |i: usize| {
                matches!(cats.get(i), Some(C::Verb(_, n))
                    if Some(*n) == prompt.structure.attractor_number)
            };
            if comp == Some(true) {
                cats.len() == 6
                    && the(0)
                    && subj_ok(1)
                    && that(2)
                    && the(3)
                    && attr_ok(4)
                    && emb_ok(5)
            } else {
                cats.len() == 5 && the(0) && subj_ok(1) && the(2) && attr_ok(3) && emb_ok(4)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training corpus
// ---------------------------------------------------------------------------

/// Emits `size` complete grammatical sentences drawn from all six structures
/// plus filler clauses. Held-out noun-verb pairs never occur as an agreeing
/// subject-verb combination.
pub fn make_training_corpus(lexicon: &Lexicon, size: usize, seed: u64) -> Result<Vec<String>> {
    if size == 0 {
        return Err(Error::Config("corpus size must be >= 1".into()));
    }
    let subjects = lexicon.subject_nouns();
    // Per-subject verbs that are not held out.
    let allowed: Vec<Vec<usize>> = (0..lexicon.nouns.len())
        .map(|s| (0..lexicon.verbs.len()).filter(|&v| !lexicon.is_held_out(s, v)).collect())
        .collect();
    let available: usize = subjects.iter().map(|&s| allowed[s].len()).sum();
    if available == 0 {
        return Err(Error::InsufficientCombinations { needed: 1, available });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "corpus"));
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        out.push(sample_sentence(lexicon, &subjects, &allowed, &mut rng));
    }
    Ok(out)
}

fn sample_sentence(
    lexicon: &Lexicon,
    subjects: &[usize],
    allowed: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
) -> String {
    let number = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { Number::Sg } else { Number::Pl };
    // (subject noun, verb) pair with the held-out split respected.
    let pick_pair = |rng: &mut ChaCha8Rng| loop {
        let s = subjects[rng.gen_range(0..subjects.len())];
        if !allowed[s].is_empty() {
            let v = allowed[s][rng.gen_range(0..allowed[s].len())];
            return (s, v);
        }
    };

    let mut toks: Vec<String> = Vec::with_capacity(12);
    let (s, v) = pick_pair(rng);
    let s_num = number(rng);
    let subj = lexicon.nouns[s].surface(s_num).to_string();
    let verb = lexicon.verbs[v].surface(s_num).to_string();
    let any_noun = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(0..lexicon.nouns.len());
        lexicon.nouns[n].surface(number(rng)).to_string()
    };

    let roll = rng.gen_range(0..100u32);
    let mut with_object = rng.gen_bool(0.5);
    match roll {
        // the N V [obj] .
        0..=17 => {
            toks.extend([THE.into(), subj, verb]);
        }
        // the N adv V [obj] .
        18..=27 => {
            let adv = lexicon.adverbs[rng.gen_range(0..lexicon.adverbs.len())].clone();
            toks.extend([THE.into(), subj, adv, verb]);
        }
        // the N adv and adv' V [obj] .
        28..=37 => {
            let i = rng.gen_range(0..lexicon.adverbs.len());
            let mut j = rng.gen_range(0..lexicon.adverbs.len() - 1);
            if j >= i {
                j += 1;
            }
            toks.extend([
                THE.into(),
                subj,
                lexicon.adverbs[i].clone(),
                AND.into(),
                lexicon.adverbs[j].clone(),
                verb,
            ]);
        }
        // the N prep the A V [obj] .
        38..=55 => {
            let prep = lexicon.prepositions[rng.gen_range(0..lexicon.prepositions.len())].clone();
            let mut a = rng.gen_range(0..lexicon.nouns.len() - 1);
            if a >= s {
                a += 1;
            }
            let attr = lexicon.nouns[a].surface(number(rng)).to_string();
            toks.extend([THE.into(), subj, prep, THE.into(), attr, verb]);
        }
        // the N [that] the E Ve V [obj] .   (Ve agrees with E)
        56..=79 => {
            let with_comp = roll < 72;
            let (e, ev) = loop {
                let (e, ev) = pick_pair(rng);
                if e != s && ev != v {
                    break (e, ev);
                }
            };
            let e_num = number(rng);
            let emb_subj = lexicon.nouns[e].surface(e_num).to_string();
            let emb_verb = lexicon.verbs[ev].surface(e_num).to_string();
            toks.push(THE.into());
            toks.push(subj);
            if with_comp {
                toks.push(THAT.into());
            }
            toks.extend([THE.into(), emb_subj, emb_verb, verb]);
        }
        // filler: the N V the O prep the O2 .
        _ => {
            let prep = lexicon.prepositions[rng.gen_range(0..lexicon.prepositions.len())].clone();
            let o1 = any_noun(rng);
            let o2 = any_noun(rng);
            toks.extend([THE.into(), subj, verb, THE.into(), o1, prep, THE.into(), o2]);
            with_object = false;
        }
    }
    if with_object {
        let o = any_noun(rng);
        toks.push(THE.into());
        toks.push(o);
    }
    toks.push(PERIOD.into());
    toks.join(" ")
}

/// One subject-verb agreement link found by the sentence parser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgreementLink {
    pub noun: usize,
    pub noun_number: Number,
    pub verb: usize,
    pub verb_number: Number,
}

/// Parses a corpus sentence against the closed set of sentence shapes and
/// returns its agreement links, or None if the sentence fits no shape.
/// Independent of the generator: works purely from token categories.
pub fn sentence_agreement_links(line: &str, lexicon: &Lexicon) -> Option<Vec<AgreementLink>> {
    use TokenCategory as C;
    let toks: Vec<&str> = line.split_whitespace().collect();
    let cats: Option<Vec<C>> = toks.iter().map(|t| lexicon.categorize(t)).collect();
    let cats = cats?;
    if cats.len() < 4 || *cats.last()? != C::Period {
        return None;
    }
    let body = &cats[..cats.len() - 1];
    if body[0] != C::The {
        return None;
    }
    let C::Noun(n1, n1num) = body[1] else { return None };
    let link = |n, nn, v, vn| AgreementLink { noun: n, noun_number: nn, verb: v, verb_number: vn };

    // Optional "the N" object at the tail; returns the consumed length.
    fn strip_object(rest: &[C]) -> Option<usize> {
        match rest {
            [] => Some(0),
            [C::The, C::Noun(_, _)] => Some(2),
            _ => None,
        }
    }

    match body.get(2)? {
        // the N V ...
        C::Verb(v1, v1num) => {
            let rest = &body[3..];
            match rest {
                // the N V the O prep the O2 .
                [C::The, C::Noun(_, _), C::Preposition(_), C::The, C::Noun(_, _)] => {}
                _ => {
                    strip_object(rest)?;
                }
            }
            Some(vec![link(n1, n1num, *v1, *v1num)])
        }
        // the N adv [and adv] V [obj] .
        C::Adverb(_) => {
            let mut i = 3;
            if body.get(i) == Some(&C::And) {
                if !matches!(body.get(i + 1), Some(C::Adverb(_))) {
                    return None;
                }
                i += 2;
            }
            let C::Verb(v1, v1num) = *body.get(i)? else { return None };
            strip_object(&body[i + 1..])?;
            Some(vec![link(n1, n1num, v1, v1num)])
        }
        // the N prep the A V [obj] .
        C::Preposition(_) => {
            if body.get(3) != Some(&C::The) {
                return None;
            }
            let C::Noun(_, _) = *body.get(4)? else { return None };
            let C::Verb(v1, v1num) = *body.get(5)? else { return None };
            strip_object(&body[6..])?;
            Some(vec![link(n1, n1num, v1, v1num)])
        }
        // the N [that] the E Ve V [obj] .
        C::That | C::The => {
            let mut i = 2;
            if body[i] == C::That {
                i += 1;
            }
            if body.get(i) != Some(&C::The) {
                return None;
            }
            let C::Noun(n2, n2num) = *body.get(i + 1)? else { return None };
            let C::Verb(v1, v1num) = *body.get(i + 2)? else { return None };
            let C::Verb(v2, v2num) = *body.get(i + 3)? else { return None };
            strip_object(&body[i + 4..])?;
            Some(vec![link(n2, n2num, v1, v1num), link(n1, n1num, v2, v2num)])
        }
        _ => None,
    }
}

/// True iff the sentence parses and every agreement link matches in number.
pub fn check_sentence_agreement(line: &str, lexicon: &Lexicon) -> bool {
    match sentence_agreement_links(line, lexicon) {
        Some(links) => links.iter().all(|l| l.noun_number == l.verb_number),
        None => false,
    }
}

/// (noun lemma, verb lemma) pairs that occur as agreeing subject-verb
/// combinations; used to verify the held-out split.
pub fn sentence_agreement_pairs(line: &str, lexicon: &Lexicon) -> Option<Vec<(usize, usize)>> {
    sentence_agreement_links(line, lexicon)
        .map(|links| links.into_iter().map(|l| (l.noun, l.verb)).collect())
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PromptRecord {
    tokens: Vec<String>,
    structure: String,
    subject_index: usize,
    subject_number: String,
    attractor_index: Option<usize>,
    verb_sg: String,
    verb_pl: String,
    seed: u64,
}

/// Writes prompts as line-oriented JSON, one record per line.
pub fn write_prompts_jsonl(path: &Path, prompts: &[Prompt]) -> Result<()> {
    let mut buf = Vec::new();
    for p in prompts {
        let rec = PromptRecord {
            tokens: p.tokens.clone(),
            structure: p.structure.label(),
            subject_index: p.subject_index,
            subject_number: p.subject_number.label().to_string(),
            attractor_index: p.attractor_index,
            verb_sg: p.verb.surface_sg.clone(),
            verb_pl: p.verb.surface_pl.clone(),
            seed: p.seed,
        };
        serde_json::to_writer(&mut buf, &rec)
            .map_err(|e| Error::Config(format!("prompt serialization: {e}")))?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_prompts_jsonl(path: &Path) -> Result<Vec<Prompt>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PromptRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Config(format!("{}:{}: bad prompt record: {e}", path.display(), lineno + 1))
        })?;
        let structure = StructureKind::parse(&rec.structure)?;
        if rec.subject_index >= rec.tokens.len() {
            return Err(Error::Config(format!(
                "{}:{}: subject_index out of range",
                path.display(),
                lineno + 1
            )));
        }
        out.push(Prompt {
            tokens: rec.tokens,
            structure,
            subject_index: rec.subject_index,
            subject_number: Number::parse(&rec.subject_number)?,
            attractor_index: rec.attractor_index,
            verb: VerbLexeme {
                lemma: rec.verb_pl.clone(),
                surface_sg: rec.verb_sg,
                surface_pl: rec.verb_pl,
            },
            seed: rec.seed,
        });
    }
    Ok(out)
}

/// Writes the corpus as plain text, one sentence per line.
pub fn write_corpus(path: &Path, sentences: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in sentences {
        writeln!(f, "{s}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Distinct (subject, attractor, verb) identity of a prompt, used by tests
/// and by uniqueness checks.
pub fn prompt_identity(p: &Prompt, lexicon: &Lexicon) -> (String, Option<usize>, String) {
    let subj = lexicon
        .noun_index_of(&p.tokens[p.subject_index])
        .map(|(i, _)| lexicon.nouns[i].lemma.clone())
        .unwrap_or_default();
    (subj, p.attractor_index.map(|i| {
        lexicon.noun_index_of(&p.tokens[i]).map(|(n, _)| n).unwrap_or(usize::MAX)
    }), p.verb.lemma.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::build_lexicon;
    use std::collections::BTreeSet;

    #[test]
    fn labels_roundtrip() {
        for v in StructureKind::canonical_variants() {
            assert_eq!(StructureKind::parse(&v.label()).unwrap(), v);
        }
        let nocomp =
            StructureKind::new(Kind::WithinObjRC, Some(Number::Pl), Some(false)).unwrap();
        assert_eq!(nocomp.label(), "within_rc_pl_nocomp");
        assert_eq!(StructureKind::parse("within_rc_pl_nocomp").unwrap(), nocomp);
        assert!(StructureKind::parse("simple_nocomp").is_err());
        assert!(StructureKind::parse("bogus").is_err());
    }

    #[test]
    fn structure_invariants_enforced() {
        assert!(StructureKind::new(Kind::SimpleAgreement, Some(Number::Sg), None).is_err());
        assert!(StructureKind::new(Kind::AcrossPP, None, None).is_err());
        assert!(StructureKind::new(Kind::AcrossPP, Some(Number::Sg), Some(true)).is_err());
        assert!(StructureKind::new(Kind::WithinObjRC, Some(Number::Sg), None).is_err());
    }

    #[test]
    fn generates_balanced_and_unique_prompts() {
        let lex = build_lexicon(0);
        let s = StructureKind::simple();
        let prompts = generate_prompts(&s, 300, &lex, 7).unwrap();
        assert_eq!(prompts.len(), 300);
        let sg = prompts.iter().filter(|p| p.subject_number == Number::Sg).count();
        assert_eq!(sg, 150);
        let ids: BTreeSet<_> =
            prompts.iter().map(|p| prompt_identity(p, &lex)).collect();
        assert_eq!(ids.len(), 300, "no duplicate (subject, attractor, verb) triples");
        for p in &prompts {
            assert!(check_prompt_template(p, &lex), "template check failed: {}", p.text());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let lex = build_lexicon(0);
        let s = StructureKind::parse("across_pp_sg").unwrap();
        let a = generate_prompts(&s, 50, &lex, 3).unwrap();
        let b = generate_prompts(&s, 50, &lex, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_prompts(&s, 50, &lex, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn attractor_rendered_with_variant_number() {
        let lex = build_lexicon(0);
        let s = StructureKind::parse("across_pp_sg").unwrap();
        for p in generate_prompts(&s, 4, &lex, 1).unwrap() {
            let a = p.attractor_index.expect("attractor present");
            let (_, num) = lex.noun_index_of(&p.tokens[a]).unwrap();
            assert_eq!(num, Number::Sg);
        }
    }

    #[test]
    fn within_rc_prompts_unique_triples() {
        let lex = build_lexicon(0);
        let s = StructureKind::parse("within_rc_sg").unwrap();
        let prompts = generate_prompts(&s, 10, &lex, 3).unwrap();
        let ids: BTreeSet<_> = prompts.iter().map(|p| prompt_identity(p, &lex)).collect();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn insufficient_combinations_reports_available() {
        let lex = build_lexicon(0);
        let s = StructureKind::simple();
        let subjects = lex.subject_nouns().len();
        let total = subjects * lex.verbs.len();
        match generate_prompts(&s, total + 1, &lex, 0) {
            Err(Error::InsufficientCombinations { needed, available }) => {
                assert_eq!(needed, total + 1);
                assert_eq!(available, total);
            }
            other => panic!("expected InsufficientCombinations, got {other:?}"),
        }
    }

    #[test]
    fn swap_number_is_length_preserving_involution() {
        let lex = build_lexicon(0);
        for label in ["simple", "across_pp_pl", "within_rc_sg", "across_rc_pl"] {
            let s = StructureKind::parse(label).unwrap();
            for p in generate_prompts(&s, 20, &lex, 5).unwrap() {
                let swapped = apply_swap_number(&p, &lex);
                assert_eq!(swapped.tokens.len(), p.tokens.len());
                assert_eq!(swapped.subject_number, p.subject_number.flip());
                // only the subject token differs
                for (i, (a, b)) in p.tokens.iter().zip(&swapped.tokens).enumerate() {
                    if i == p.subject_index {
                        assert_ne!(a, b);
                    } else {
                        assert_eq!(a, b);
                    }
                }
                assert_eq!(apply_swap_number(&swapped, &lex), p);
            }
        }
    }

    #[test]
    fn swap_on_simple_prompt_changes_number_form() {
        let lex = build_lexicon(0);
        let p = generate_prompts(&StructureKind::simple(), 2, &lex, 1).unwrap();
        for prompt in p {
            let swapped = apply_swap_number(&prompt, &lex);
            let (i, n) = lex.noun_index_of(&prompt.tokens[prompt.subject_index]).unwrap();
            assert_eq!(swapped.tokens[prompt.subject_index], lex.nouns[i].surface(n.flip()));
        }
    }

    #[test]
    fn render_tokens_complementizer_ablation() {
        let lex = build_lexicon(0);
        let s = StructureKind::parse("within_rc_sg").unwrap();
        let p = &generate_prompts(&s, 1, &lex, 2).unwrap()[0];
        let without = render_tokens(p, false).unwrap();
        assert_eq!(without.tokens.len(), p.tokens.len() - 1);
        assert_eq!(without.subject_index, p.subject_index - 1);
        assert!(!without.tokens.contains(&THAT.to_string()));
        assert!(check_prompt_template(&without, &lex));
        let back = render_tokens(&without, true).unwrap();
        assert_eq!(&back, p);

        let simple = &generate_prompts(&StructureKind::simple(), 1, &lex, 2).unwrap()[0];
        assert!(matches!(render_tokens(simple, true), Err(Error::InvalidFlag { .. })));
        assert_eq!(&render_tokens(simple, false).unwrap(), simple);
    }

    #[test]
    fn across_rc_render_shifts_attractor_and_keeps_template() {
        let lex = build_lexicon(0);
        let s = StructureKind::parse("across_rc_pl").unwrap();
        let p = &generate_prompts(&s, 3, &lex, 9).unwrap()[0];
        let without = render_tokens(p, false).unwrap();
        assert_eq!(without.attractor_index, Some(p.attractor_index.unwrap() - 1));
        assert_eq!(without.subject_index, p.subject_index);
        assert!(check_prompt_template(&without, &lex));
    }

    #[test]
    fn corpus_is_grammatical_and_respects_holdout() {
        let lex = build_lexicon(1);
        let corpus = make_training_corpus(&lex, 2000, 1).unwrap();
        assert_eq!(corpus.len(), 2000);
        for line in &corpus {
            assert!(check_sentence_agreement(line, &lex), "ungrammatical: {line}");
            for (n, v) in sentence_agreement_pairs(line, &lex).unwrap() {
                assert!(!lex.is_held_out(n, v), "held-out pair used in training: {line}");
            }
        }
    }

    #[test]
    fn corpus_covers_vocabulary_at_default_size() {
        let lex = build_lexicon(1);
        let corpus = make_training_corpus(&lex, 50_000, 1).unwrap();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for line in &corpus {
            seen.extend(line.split_whitespace());
        }
        for tok in lex.vocab().tokens() {
            if tok == crate::lexicon::BOS {
                continue;
            }
            assert!(seen.contains(tok.as_str()), "vocab item `{tok}` never appears");
        }
    }

    #[test]
    fn corpus_deterministic() {
        let lex = build_lexicon(0);
        let a = make_training_corpus(&lex, 500, 9).unwrap();
        let b = make_training_corpus(&lex, 500, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn agreement_checker_rejects_mismatches() {
        let lex = build_lexicon(0);
        let noun = &lex.nouns[lex.subject_nouns()[0]];
        let verb = &lex.verbs[0];
        let good = format!("the {} {} .", noun.surface_sg, verb.surface_sg);
        let bad = format!("the {} {} .", noun.surface_sg, verb.surface_pl);
        assert!(check_sentence_agreement(&good, &lex));
        assert!(!check_sentence_agreement(&bad, &lex));
        assert!(!check_sentence_agreement("the unknown word .", &lex));
    }

    #[test]
    fn prompts_jsonl_roundtrip() {
        let lex = build_lexicon(0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.jsonl");
        let s = StructureKind::parse("across_rc_sg").unwrap();
        let prompts = generate_prompts(&s, 12, &lex, 4).unwrap();
        write_prompts_jsonl(&path, &prompts).unwrap();
        let back = read_prompts_jsonl(&path).unwrap();
        assert_eq!(prompts, back);
    }
}
