//! Lexicon and word-level vocabulary.
//!
//! Every inflected surface form is a single token, and singular/plural forms
//! come in pairs so the swap-number counterfactual is always length-preserving.
//! The lexicon also owns the held-out noun-verb pair split: pairs reserved for
//! evaluation never appear as an agreeing subject-verb combination in the
//! training corpus.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mix_seed;

pub const BOS: &str = "<bos>";
pub const PERIOD: &str = ".";
pub const THE: &str = "the";
pub const THAT: &str = "that";
pub const AND: &str = "and";

/// Grammatical number of a noun or verb form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Number {
    Sg,
    Pl,
}

impl Number {
    pub fn flip(self) -> Number {
        match self {
            Number::Sg => Number::Pl,
            Number::Pl => Number::Sg,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Number::Sg => "sg",
            Number::Pl => "pl",
        }
    }

    pub fn parse(s: &str) -> Result<Number> {
        match s {
            "sg" => Ok(Number::Sg),
            "pl" => Ok(Number::Pl),
            other => Err(Error::Config(format!("unknown number `{other}`"))),
        }
    }
}

impl fmt::Display for Number {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Subject slots take animate nouns; attractor slots take any noun.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Animacy {
    Animate,
    Inanimate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NounLexeme {
    pub lemma: String,
    pub surface_sg: String,
    pub surface_pl: String,
    pub animacy: Animacy,
}

impl NounLexeme {
    pub fn surface(&self, n: Number) -> &str {
        match n {
            Number::Sg => &self.surface_sg,
            Number::Pl => &self.surface_pl,
        }
    }

    pub fn subject_eligible(&self) -> bool {
        self.animacy == Animacy::Animate
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerbLexeme {
    pub lemma: String,
    /// Third-person singular form ("confuses").
    pub surface_sg: String,
    /// Plural / base form ("confuse").
    pub surface_pl: String,
}

impl VerbLexeme {
    pub fn surface(&self, n: Number) -> &str {
        match n {
            Number::Sg => &self.surface_sg,
            Number::Pl => &self.surface_pl,
        }
    }
}

/// Category of a token under this lexicon, used by the template and
/// agreement checkers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenCategory {
    The,
    That,
    And,
    Period,
    Bos,
    Noun(usize, Number),
    Verb(usize, Number),
    Adverb(usize),
    Preposition(usize),
}

/// Word-level token inventory with stable ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn new(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { token: id, vocab_size: self.tokens.len() })
    }

    pub fn bos(&self) -> u32 {
        self.index[BOS]
    }

    /// Encodes surface tokens, prepending BOS.
    pub fn encode_with_bos(&self, tokens: &[String]) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(tokens.len() + 1);
        out.push(self.bos());
        for t in tokens {
            out.push(self.id(t)?);
        }
        Ok(out)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// The full lexical inventory plus the held-out noun-verb split.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub seed: u64,
    pub nouns: Vec<NounLexeme>,
    pub verbs: Vec<VerbLexeme>,
    pub adverbs: Vec<String>,
    pub prepositions: Vec<String>,
    held_out: BTreeSet<(u16, u16)>,
    vocab: Vocab,
    categories: HashMap<String, TokenCategory>,
}

// Base pools. All forms are single lowercase tokens with regular -s
// inflection, and the four surface sets (noun sg/pl, verb sg/pl) are
// pairwise disjoint so token categorization is unambiguous.
const ANIMATE_POOL: &[&str] = &[
    "athlete", "friend", "lawyer", "parent", "farmer", "mother", "father", "kid", "teacher",
    "doctor", "student", "writer", "singer", "dancer", "pilot", "nurse", "artist", "banker",
    "editor", "actor", "guard", "driver", "painter", "poet", "neighbor", "soldier",
];
const INANIMATE_POOL: &[&str] = &[
    "car", "tree", "book", "door", "table", "bridge", "garden", "machine", "mirror", "ladder",
    "engine", "window",
];
const VERB_POOL: &[&str] = &[
    "confuse", "admire", "avoid", "approve", "like", "love", "see", "watch", "follow", "describe",
    "praise", "blame", "respect", "support", "observe", "ignore", "mention", "notice", "remember",
    "discuss", "examine", "visit", "greet", "trust", "consult", "assist",
];
const ADVERB_POOL: &[&str] = &[
    "gently", "openly", "deliberately", "quietly", "quickly", "carefully", "happily", "slowly",
    "bravely", "calmly", "eagerly", "proudly", "rarely", "often",
];
const PREPOSITION_POOL: &[&str] = &[
    "behind", "near", "beside", "above", "below", "around", "beneath",
];

pub const NOUN_COUNT: usize = 20;
pub const ANIMATE_COUNT: usize = 16;
pub const VERB_COUNT: usize = 20;
pub const ADVERB_COUNT: usize = 10;
pub const PREPOSITION_COUNT: usize = 5;
/// Fraction of noun-verb pairs reserved for evaluation.
pub const HELD_OUT_FRACTION: f64 = 0.10;

fn sample<'a>(pool: &[&'a str], k: usize, rng: &mut ChaCha8Rng) -> Vec<&'a str> {
    let mut items: Vec<&str> = pool.to_vec();
    let (picked, _) = items.partial_shuffle(rng, k);
    picked.to_vec()
}

/// Builds the default-size lexicon. Deterministic per seed; different seeds
/// differ in at least the sampled subsets and the held-out split.
pub fn build_lexicon(seed: u64) -> Lexicon {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "lexicon"));

    let animate = sample(ANIMATE_POOL, ANIMATE_COUNT, &mut rng);
    let inanimate = sample(INANIMATE_POOL, NOUN_COUNT - ANIMATE_COUNT, &mut rng);
    let verbs_raw = sample(VERB_POOL, VERB_COUNT, &mut rng);
    let adverbs = sample(ADVERB_POOL, ADVERB_COUNT, &mut rng);
    let prepositions = sample(PREPOSITION_POOL, PREPOSITION_COUNT, &mut rng);

    let mut nouns: Vec<NounLexeme> = Vec::with_capacity(NOUN_COUNT);
    for lemma in animate {
        nouns.push(NounLexeme {
            lemma: lemma.to_string(),
            surface_sg: lemma.to_string(),
            surface_pl: format!("{lemma}s"),
            animacy: Animacy::Animate,
        });
    }
    for lemma in inanimate {
        nouns.push(NounLexeme {
            lemma: lemma.to_string(),
            surface_sg: lemma.to_string(),
            surface_pl: format!("{lemma}s"),
            animacy: Animacy::Inanimate,
        });
    }
    let verbs: Vec<VerbLexeme> = verbs_raw
        .iter()
        .map(|lemma| VerbLexeme {
            lemma: lemma.to_string(),
            surface_sg: format!("{lemma}s"),
            surface_pl: lemma.to_string(),
        })
        .collect();

    // Held-out split over the noun x verb cross product.
    let n_pairs = nouns.len() * verbs.len();
    let k_held = ((n_pairs as f64) * HELD_OUT_FRACTION).ceil() as usize;
    let mut all_pairs: Vec<(u16, u16)> = (0..nouns.len() as u16)
        .flat_map(|n| (0..verbs.len() as u16).map(move |v| (n, v)))
        .collect();
    let (held, _) = all_pairs.partial_shuffle(&mut rng, k_held);
    let held_out: BTreeSet<(u16, u16)> = held.iter().copied().collect();

    let adverbs: Vec<String> = adverbs.into_iter().map(str::to_string).collect();
    let prepositions: Vec<String> = prepositions.into_iter().map(str::to_string).collect();

    let mut tokens: Vec<String> = vec![
        BOS.to_string(),
        PERIOD.to_string(),
        THE.to_string(),
        THAT.to_string(),
        AND.to_string(),
    ];
    let mut categories: HashMap<String, TokenCategory> = HashMap::new();
    categories.insert(BOS.to_string(), TokenCategory::Bos);
    categories.insert(PERIOD.to_string(), TokenCategory::Period);
    categories.insert(THE.to_string(), TokenCategory::The);
    categories.insert(THAT.to_string(), TokenCategory::That);
    categories.insert(AND.to_string(), TokenCategory::And);
    for (i, n) in nouns.iter().enumerate() {
        tokens.push(n.surface_sg.clone());
        categories.insert(n.surface_sg.clone(), TokenCategory::Noun(i, Number::Sg));
    }
    for (i, n) in nouns.iter().enumerate() {
        tokens.push(n.surface_pl.clone());
        categories.insert(n.surface_pl.clone(), TokenCategory::Noun(i, Number::Pl));
    }
    for (i, v) in verbs.iter().enumerate() {
        tokens.push(v.surface_sg.clone());
        categories.insert(v.surface_sg.clone(), TokenCategory::Verb(i, Number::Sg));
    }
    for (i, v) in verbs.iter().enumerate() {
        tokens.push(v.surface_pl.clone());
        categories.insert(v.surface_pl.clone(), TokenCategory::Verb(i, Number::Pl));
    }
    for (i, a) in adverbs.iter().enumerate() {
        tokens.push(a.clone());
        categories.insert(a.clone(), TokenCategory::Adverb(i));
    }
    for (i, p) in prepositions.iter().enumerate() {
        tokens.push(p.clone());
        categories.insert(p.clone(), TokenCategory::Preposition(i));
    }
    debug_assert_eq!(tokens.len(), categories.len(), "surface forms must be distinct");

    Lexicon {
        seed,
        nouns,
        verbs,
        adverbs,
        prepositions,
        held_out,
        vocab: Vocab::new(tokens),
        categories,
    }
}

impl Lexicon {
    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn categorize(&self, token: &str) -> Option<TokenCategory> {
        self.categories.get(token).copied()
    }

    /// Indices of nouns eligible as target subjects.
    pub fn subject_nouns(&self) -> Vec<usize> {
        self.nouns
            .iter()
            .enumerate()
            .filter(|(_, n)| n.subject_eligible())
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of animate nouns (embedded subjects of object RCs).
    pub fn animate_nouns(&self) -> Vec<usize> {
        self.subject_nouns()
    }

    pub fn is_held_out(&self, noun: usize, verb: usize) -> bool {
        self.held_out.contains(&(noun as u16, verb as u16))
    }

    pub fn held_out_pairs(&self) -> &BTreeSet<(u16, u16)> {
        &self.held_out
    }

    /// Verb ids (sg, pl) in the vocab for a verb lexeme.
    pub fn verb_ids(&self, verb: &VerbLexeme) -> Result<(u32, u32)> {
        Ok((self.vocab.id(&verb.surface_sg)?, self.vocab.id(&verb.surface_pl)?))
    }

    pub fn noun_index_of(&self, surface: &str) -> Option<(usize, Number)> {
        match self.categorize(surface) {
            Some(TokenCategory::Noun(i, n)) => Some((i, n)),
            _ => None,
        }
    }

    pub fn verb_index_of(&self, surface: &str) -> Option<(usize, Number)> {
        match self.categorize(surface) {
            Some(TokenCategory::Verb(i, n)) => Some((i, n)),
            _ => None,
        }
    }
}
