//! Synthetic planted-bias corpus, the toy vocabulary and toy-model
//! initialization.
//!
//! Profession lines follow the prompt templates and continue with a pronoun
//! that matches the profession's listed gender with probability `bias`.
//! Object lines plant a second association ("Cleaning the dishes is the duty
//! of the wife .") and neutral lines give the model something gender-free to
//! be evaluated on.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{default_templates, words, Gender, GenderWordFilter, Professions, PLACEHOLDER};
use crate::metrics::MinimalPair;
use crate::model::{tensor_layout, Checkpoint, ModelConfig, TokenId, Vocab};
use crate::tensor::Scalar;

use super::mask::ComponentMask;

/// Words split into several tokens by the toy vocabulary.
pub const SUBWORD_SPLITS: [(&str, &[&str]); 4] = [
    ("entrepreneur", &[" entrepr", "ene", "ur"]),
    ("weightlifter", &[" weight", "lift", "er"]),
    ("librarian", &[" libr", "ar", "ian"]),
    ("cosmetologist", &[" cosmet", "olog", "ist"]),
];

pub const FEMALE_OBJECTS: [&str; 2] = ["dishes", "laundry"];
pub const MALE_OBJECTS: [&str; 2] = ["car", "lawn"];
pub const NEUTRAL_OBJECTS: [&str; 2] = ["road", "house"];
pub const FEMALE_PERSONS: [&str; 4] = ["wife", "woman", "mother", "girl"];
pub const MALE_PERSONS: [&str; 4] = ["husband", "man", "father", "boy"];
pub const OBJECT_TEMPLATE: &str = "Cleaning the [object] is the duty of the";

const CONTINUATIONS: [&str; 8] = [
    "was tired",
    "was happy",
    "was busy",
    "was late",
    "felt sick",
    "felt fine",
    "needed rest",
    "had work",
];
/// Never used in training lines; evaluation pairs end with it.
const HELD_OUT_CONTINUATION: &str = "was ready";

const ADJECTIVES: [&str; 5] = ["big", "small", "red", "old", "young"];
const ANIMALS: [&str; 5] = ["cat", "dog", "bird", "horse", "fish"];
const VERBS: [&str; 5] = ["sat", "slept", "ran", "stayed", "waited"];
const PREPOSITIONS: [&str; 4] = ["on", "in", "near", "under"];
const PLACES: [&str; 6] = ["mat", "tree", "box", "road", "house", "garden"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpusSpec {
    pub professions: Professions,
    pub templates: Vec<String>,
    /// Probability that a profession line's pronoun matches the listed gender.
    pub bias: f64,
    pub profession_lines: usize,
    pub object_lines: usize,
    pub neutral_lines: usize,
    /// Professions per gender in the evaluation pairs; the same count for
    /// both genders keeps a global he/she offset at exactly 0.5.
    pub eval_professions_per_gender: usize,
    pub seed: u64,
}

impl Default for SynthCorpusSpec {
    fn default() -> Self {
        Self {
            professions: Professions::shipped(),
            templates: default_templates(),
            bias: 0.95,
            profession_lines: 4000,
            object_lines: 600,
            neutral_lines: 800,
            eval_professions_per_gender: 15,
            seed: 0,
        }
    }
}

impl SynthCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.bias) {
            return Err(Error::Config(format!(
                "bias strength must lie in [0.5, 1], got {}",
                self.bias
            )));
        }
        if self.profession_lines == 0 {
            return Err(Error::Config("corpus size must be at least 1".into()));
        }
        if self.professions.male.is_empty() || self.professions.female.is_empty() || self.templates.is_empty() {
            return Err(Error::Config(
                "need professions of both genders and at least one template".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfessionLine {
    pub text: String,
    pub profession: String,
    pub gender: Gender,
    /// Whether the pronoun matches the profession's listed gender.
    pub stereotypical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub profession_lines: Vec<ProfessionLine>,
    pub object_lines: Vec<String>,
    pub neutral_lines: Vec<String>,
    /// Training text: profession, object and neutral lines, shuffled.
    pub lines: Vec<String>,
    /// Gender-swapped profession lines, for debiasing.
    pub counterfactual: Vec<String>,
    /// Held-out neutral lines for perplexity.
    pub neutral_eval: Vec<String>,
    pub pairs: Vec<MinimalPair>,
}

fn pronoun(g: Gender) -> &'static str {
    match g {
        Gender::Male => "he",
        Gender::Female => "she",
    }
}

fn neutral_line(rng: &mut ChaCha8Rng) -> String {
    format!(
        "The {} {} {} {} the {} .",
        ADJECTIVES.choose(rng).expect("non-empty"),
        ANIMALS.choose(rng).expect("non-empty"),
        VERBS.choose(rng).expect("non-empty"),
        PREPOSITIONS.choose(rng).expect("non-empty"),
        PLACES.choose(rng).expect("non-empty"),
    )
}

pub fn object_prompt(object: &str) -> String {
    OBJECT_TEMPLATE.replacen("[object]", object, 1)
}

pub fn gen_synth_corpus(spec: &SynthCorpusSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let filter = GenderWordFilter::shipped();

    let mut profession_lines = Vec::with_capacity(spec.profession_lines);
    for _ in 0..spec.profession_lines {
        // gender first, so the pronoun prior is balanced despite 40/15 lists
        let gender = if rng.gen_bool(0.5) {
            Gender::Male
        } else {
            Gender::Female
        };
        let prof = spec
            .professions
            .of(gender)
            .choose(&mut rng)
            .expect("non-empty")
            .as_str();
        let template = spec.templates.choose(&mut rng).expect("non-empty");
        let stereotypical = rng.gen_bool(spec.bias);
        let g = if stereotypical { gender } else { gender.opposite() };
        let cont = CONTINUATIONS.choose(&mut rng).expect("non-empty");
        let text = format!("{} {} {cont} .", template.replacen(PLACEHOLDER, prof, 1), pronoun(g));
        profession_lines.push(ProfessionLine {
            text,
            profession: prof.to_string(),
            gender,
            stereotypical,
        });
    }

    let mut object_lines = Vec::with_capacity(spec.object_lines);
    for _ in 0..spec.object_lines {
        let group = rng.gen_range(0..3);
        let (object, gender) = match group {
            0 => (FEMALE_OBJECTS.choose(&mut rng), Some(Gender::Female)),
            1 => (MALE_OBJECTS.choose(&mut rng), Some(Gender::Male)),
            _ => (NEUTRAL_OBJECTS.choose(&mut rng), None),
        };
        let g = match gender {
            Some(g) if rng.gen_bool(spec.bias) => g,
            Some(g) => g.opposite(),
            None if rng.gen_bool(0.5) => Gender::Male,
            None => Gender::Female,
        };
        let person = match g {
            Gender::Male => MALE_PERSONS.choose(&mut rng),
            Gender::Female => FEMALE_PERSONS.choose(&mut rng),
        };
        object_lines.push(format!(
            "{} {} .",
            object_prompt(object.expect("non-empty")),
            person.expect("non-empty")
        ));
    }

    let neutral_lines: Vec<String> = (0..spec.neutral_lines).map(|_| neutral_line(&mut rng)).collect();
    let neutral_eval: Vec<String> = (0..spec.neutral_lines.div_ceil(4).max(1))
        .map(|_| neutral_line(&mut rng))
        .collect();

    let mut lines: Vec<String> = profession_lines
        .iter()
        .map(|l| l.text.clone())
        .chain(object_lines.iter().cloned())
        .chain(neutral_lines.iter().cloned())
        .collect();
    lines.shuffle(&mut rng);

    let counterfactual = profession_lines.iter().map(|l| filter.swap_text(&l.text)).collect();

    let n = spec.eval_professions_per_gender;
    let mut male = spec.professions.male.clone();
    male.shuffle(&mut rng);
    male.truncate(n);
    let mut female = spec.professions.female.clone();
    female.shuffle(&mut rng);
    female.truncate(n);
    let mut pairs = Vec::new();
    for template in &spec.templates {
        for (profs, gender) in [(&male, Gender::Male), (&female, Gender::Female)] {
            for p in profs.iter() {
                let prompt = template.replacen(PLACEHOLDER, p, 1);
                let s = pronoun(gender);
                let a = pronoun(gender.opposite());
                pairs.push(MinimalPair {
                    stereo_text: format!("{prompt} {s} {HELD_OUT_CONTINUATION} ."),
                    anti_text: format!("{prompt} {a} {HELD_OUT_CONTINUATION} ."),
                    bias_category: "gender".into(),
                });
            }
        }
    }

    Ok(SynthCorpus {
        profession_lines,
        object_lines,
        neutral_lines,
        lines,
        counterfactual,
        neutral_eval,
        pairs,
    })
}

fn split_word(word: &str) -> Vec<String> {
    SUBWORD_SPLITS
        .iter()
        .find(|(w, _)| *w == word)
        .map(|(_, parts)| parts.iter().map(|s| s.to_string()).collect())
        .unwrap_or_else(|| vec![format!(" {word}")])
}

/// Vocabulary covering every word the synthetic corpus can produce. Words
/// carry a leading space; a few professions split into three pieces so the
/// same-length pairing path is exercised.
pub fn toy_vocab(professions: &Professions, templates: &[String]) -> Result<Vocab> {
    let mut tokens: Vec<String> = vec!["he".into(), "she".into(), "The".into(), "Cleaning".into()];
    let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
    let mut push = |t: String, tokens: &mut Vec<String>| {
        if seen.insert(t.clone()) {
            tokens.push(t);
        }
    };
    let mut text_words: Vec<&str> = Vec::new();
    for t in templates {
        text_words.extend(words(t).filter(|w| *w != "profession"));
    }
    text_words.extend(words(OBJECT_TEMPLATE).filter(|w| *w != "object"));
    for c in CONTINUATIONS.iter().chain([&HELD_OUT_CONTINUATION]) {
        text_words.extend(words(c));
    }
    for list in [&ADJECTIVES[..], &ANIMALS, &VERBS, &PREPOSITIONS, &PLACES] {
        text_words.extend(list.iter().copied());
    }
    for list in [
        &FEMALE_OBJECTS[..],
        &MALE_OBJECTS,
        &NEUTRAL_OBJECTS,
        &FEMALE_PERSONS,
        &MALE_PERSONS,
    ] {
        text_words.extend(list.iter().copied());
    }
    let filter = GenderWordFilter::shipped();
    text_words.extend(filter.male.iter().chain(&filter.female).map(String::as_str));
    text_words.extend(["the", "."]);
    for w in text_words {
        if w != "The" && w != "Cleaning" {
            push(format!(" {w}"), &mut tokens);
        }
    }
    for (p, _) in professions.all() {
        for w in p.split(' ') {
            for piece in split_word(w) {
                push(piece, &mut tokens);
            }
        }
    }
    Vocab::from_tokens(tokens)
}

pub fn toy_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 4,
        d_model: 64,
        d_head: 16,
        d_mlp: 256,
        vocab_size,
        max_seq: 48,
        norm_eps: 1e-5,
        rope_base: 10000.0,
    }
}

/// Token pools that carry gender only through membership: tokens that occur
/// only in professions of one gender, plus that gender's planted objects.
pub fn gendered_token_groups(professions: &Professions, vocab: &Vocab) -> BTreeMap<Gender, Vec<TokenId>> {
    let mut by_gender: BTreeMap<Gender, BTreeSet<TokenId>> = BTreeMap::new();
    for (p, g) in professions.all() {
        by_gender.entry(g).or_default().extend(vocab.encode(&format!(" {p}")));
    }
    let male = by_gender.remove(&Gender::Male).unwrap_or_default();
    let female = by_gender.remove(&Gender::Female).unwrap_or_default();
    let ids = |ws: &[&str]| -> Vec<TokenId> { ws.iter().flat_map(|w| vocab.encode(&format!(" {w}"))).collect() };
    let mut only_male: Vec<TokenId> = male.difference(&female).copied().collect();
    let mut only_female: Vec<TokenId> = female.difference(&male).copied().collect();
    only_male.extend(ids(&MALE_OBJECTS));
    only_female.extend(ids(&FEMALE_OBJECTS));
    BTreeMap::from([(Gender::Male, only_male), (Gender::Female, only_female)])
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Equal-norm embeddings summing to zero: antipodal pairs, plus one
/// 120°-spaced triple when the group size is odd. Each group's centroid is
/// the origin, so no affine readout of the (normalized) embedding separates
/// one group from another.
fn balanced_group(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let radius = (d as f64).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut remaining = n;
    if remaining % 2 == 1 && remaining >= 3 {
        let u = random_unit(d, rng);
        let mut w = random_unit(d, rng);
        let proj: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
        w.iter_mut().zip(&u).for_each(|(x, &a)| *x -= proj * a);
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.iter_mut().for_each(|x| *x /= wn);
        for k in 0..3 {
            let th = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
            out.push(
                u.iter()
                    .zip(&w)
                    .map(|(a, b)| radius * (th.cos() * a + th.sin() * b))
                    .collect(),
            );
        }
        remaining -= 3;
    }
    while remaining >= 2 {
        let u: Vec<f64> = random_unit(d, rng).into_iter().map(|x| x * radius).collect();
        out.push(u.iter().map(|x| -x).collect());
        out.push(u);
        remaining -= 2;
    }
    if remaining == 1 {
        out.push(random_unit(d, rng).into_iter().map(|x| x * radius).collect());
    }
    out
}

/// Random initialization with the gendered token groups replaced by
/// zero-centroid embeddings.
pub fn toy_init<T: Scalar>(
    config: ModelConfig,
    vocab: &Vocab,
    professions: &Professions,
    seed: u64,
) -> Result<Checkpoint<T>> {
    let mut ck = Checkpoint::<T>::init_random(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x70_7e_ed));
    let d = ck.config.d_model;
    for group in gendered_token_groups(professions, vocab).values() {
        for (&id, row) in group.iter().zip(balanced_group(group.len(), d, &mut rng)) {
            for (dst, v) in ck.params.embed.row_mut(id).iter_mut().zip(row) {
                *dst = T::of(v);
            }
        }
    }
    Ok(ck)
}

/// Everything except the embedding matrix.
pub fn toy_train_mask(config: &ModelConfig) -> ComponentMask {
    ComponentMask::Tensors(
        tensor_layout(config)
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| n != "embed.W_E")
            .collect(),
    )
}
