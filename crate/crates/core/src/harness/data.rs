//! Templates, profession lists, the gender-word filter, rendered samples and
//! counterfactual pairing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PronounTarget;
use crate::model::{TokenId, TokenSpan, Vocab};

pub const PLACEHOLDER: &str = "[profession]";

pub const DEFAULT_TEMPLATES: &str = include_str!("../../data/templates.txt");
pub const DEFAULT_PROFESSIONS: &str = include_str!("../../data/professions.json");
pub const DEFAULT_GENDER_FILTER: &str = include_str!("../../data/gender_filter.json");

/// Fixed counterfactual anchors: a female sample is paired with the male
/// anchor and vice versa.
pub const MALE_ANCHOR: &str = "wrestler";
pub const FEMALE_ANCHOR: &str = "nanny";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn opposite(self) -> Self {
        match self {
            Gender::Male => Gender::Female,
            Gender::Female => Gender::Male,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

pub fn parse_templates(text: &str) -> Result<Vec<String>> {
    let templates: Vec<String> = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    for t in &templates {
        check_template(t)?;
    }
    Ok(templates)
}

pub fn load_templates(path: &Path) -> Result<Vec<String>> {
    parse_templates(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn default_templates() -> Vec<String> {
    parse_templates(DEFAULT_TEMPLATES).expect("shipped templates are valid")
}

fn check_template(t: &str) -> Result<usize> {
    let n = t.matches(PLACEHOLDER).count();
    if n != 1 {
        return Err(Error::Template(format!(
            "{t:?} has {n} placeholders, expected exactly one"
        )));
    }
    Ok(t.find(PLACEHOLDER).expect("counted"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Professions {
    pub male: Vec<String>,
    pub female: Vec<String>,
}

impl Professions {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("professions", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn shipped() -> Self {
        Self::parse(DEFAULT_PROFESSIONS).expect("shipped professions are valid")
    }

    pub fn of(&self, gender: Gender) -> &[String] {
        match gender {
            Gender::Male => &self.male,
            Gender::Female => &self.female,
        }
    }

    /// Every profession with its gender, male list first.
    pub fn all(&self) -> impl Iterator<Item = (&str, Gender)> {
        self.male
            .iter()
            .map(|p| (p.as_str(), Gender::Male))
            .chain(self.female.iter().map(|p| (p.as_str(), Gender::Female)))
    }

    pub fn len(&self) -> usize {
        self.male.len() + self.female.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Deserialize)]
struct FilterFile {
    male: Vec<String>,
    female: Vec<String>,
    swap: Vec<(String, String)>,
}

/// Male- and female-aligned word sets with a bidirectional swap map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenderWordFilter {
    pub male: BTreeSet<String>,
    pub female: BTreeSet<String>,
    swap: BTreeMap<String, String>,
}

impl GenderWordFilter {
    pub fn new(male: &[&str], female: &[&str], pairs: &[(&str, &str)]) -> Result<Self> {
        let mut swap = BTreeMap::new();
        for &(m, f) in pairs {
            for (a, b) in [(m, f), (f, m)] {
                if let Some(prev) = swap.insert(a.to_string(), b.to_string()) {
                    return Err(Error::Data(format!("swap map sends {a:?} to both {prev:?} and {b:?}")));
                }
            }
        }
        let filter = Self {
            male: male.iter().map(|s| s.to_string()).collect(),
            female: female.iter().map(|s| s.to_string()).collect(),
            swap,
        };
        let union: BTreeSet<&String> = filter.male.iter().chain(&filter.female).collect();
        let keys: BTreeSet<&String> = filter.swap.keys().collect();
        if union != keys {
            return Err(Error::Data(
                "swap map must cover exactly the male and female word sets".into(),
            ));
        }
        if let Some(w) = filter.male.intersection(&filter.female).next() {
            return Err(Error::Data(format!("{w:?} is in both word sets")));
        }
        for (m, f) in pairs {
            if !filter.male.contains(*m) || !filter.female.contains(*f) {
                return Err(Error::Data(format!("swap pair ({m}, {f}) must be (male, female)")));
            }
        }
        Ok(filter)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let f: FilterFile = serde_json::from_str(text).map_err(|e| Error::json("gender filter", e))?;
        let male: Vec<&str> = f.male.iter().map(String::as_str).collect();
        let female: Vec<&str> = f.female.iter().map(String::as_str).collect();
        let pairs: Vec<(&str, &str)> = f.swap.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        Self::new(&male, &female, &pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn shipped() -> Self {
        Self::parse(DEFAULT_GENDER_FILTER).expect("shipped filter is valid")
    }

    /// Gender of a word, case-insensitively.
    pub fn gender_of(&self, word: &str) -> Option<Gender> {
        let w = word.to_lowercase();
        if self.male.contains(&w) {
            Some(Gender::Male)
        } else if self.female.contains(&w) {
            Some(Gender::Female)
        } else {
            None
        }
    }

    /// Swap partner of a word, preserving a leading capital.
    pub fn swap_word(&self, word: &str) -> Option<String> {
        let lower = word.to_lowercase();
        let partner = self.swap.get(&lower)?;
        let capitalized = word.chars().next().is_some_and(char::is_uppercase);
        Some(if capitalized {
            let mut c = partner.chars();
            c.next()
                .map(|f| f.to_uppercase().collect::<String>() + c.as_str())
                .unwrap_or_default()
        } else {
            partner.clone()
        })
    }

    /// Replaces every gendered word, leaving all other characters in place.
    pub fn swap_text(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut String| {
            if !word.is_empty() {
                out.push_str(&self.swap_word(word).unwrap_or_else(|| word.clone()));
                word.clear();
            }
        };
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                word.push(ch);
            } else {
                flush(&mut word, &mut out);
                out.push(ch);
            }
        }
        flush(&mut word, &mut out);
        out
    }

    /// First gendered word in `text`.
    pub fn first_gendered(&self, text: &str) -> Option<Gender> {
        words(text).find_map(|w| self.gender_of(w))
    }
}

pub(crate) fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty())
}

/// Token ids of the two pronouns scored at the prediction position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronounTokens {
    pub he: TokenId,
    pub she: TokenId,
}

impl PronounTokens {
    /// Prefers the space-prefixed forms that follow a word.
    pub fn from_vocab(vocab: &Vocab) -> Result<Self> {
        let pick = |w: &str| vocab.id(&format!(" {w}")).map_or_else(|| vocab.require(w), Ok);
        Ok(Self {
            he: pick("he")?,
            she: pick("she")?,
        })
    }

    pub fn target_for(&self, gender: Gender) -> PronounTarget {
        match gender {
            Gender::Male => PronounTarget {
                stereo: self.he,
                anti: self.she,
            },
            Gender::Female => PronounTarget {
                stereo: self.she,
                anti: self.he,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSample {
    pub template: String,
    pub profession: String,
    pub gender: Gender,
    pub prompt: String,
    pub tokens: Vec<TokenId>,
    pub span: TokenSpan,
    pub target: PronounTarget,
}

impl TemplateSample {
    pub fn render(
        template: &str,
        profession: &str,
        gender: Gender,
        vocab: &Vocab,
        pronouns: PronounTokens,
    ) -> Result<Self> {
        let at = check_template(template)?;
        let prompt = template.replacen(PLACEHOLDER, profession, 1);
        let enc = vocab.tokenize(&prompt);
        let span = TokenSpan::covering(&enc, at, at + profession.len())?;
        Ok(Self {
            template: template.to_string(),
            profession: profession.to_string(),
            gender,
            prompt,
            tokens: enc.ids,
            span,
            target: pronouns.target_for(gender),
        })
    }

    /// Positions strictly right of the profession span.
    pub fn positions_after_span(&self) -> std::ops::Range<usize> {
        self.span.end..self.tokens.len()
    }

    pub fn last(&self) -> usize {
        self.tokens.len() - 1
    }
}

/// Cross product of templates and professions, templates outermost.
pub fn build_samples(
    templates: &[String],
    professions: &Professions,
    vocab: &Vocab,
    pronouns: PronounTokens,
) -> Result<Vec<TemplateSample>> {
    let mut out = Vec::with_capacity(templates.len() * professions.len());
    for t in templates {
        for (p, g) in professions.all() {
            out.push(TemplateSample::render(t, p, g, vocab, pronouns)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanMode {
    LastToken,
    AllTokens,
}

impl std::str::FromStr for SpanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last-token" => Ok(SpanMode::LastToken),
            "all-tokens" => Ok(SpanMode::AllTokens),
            _ => Err(Error::Config(format!(
                "unknown span mode {s:?}; expected last-token or all-tokens"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    /// The fixed wrestler/nanny anchor, falling back to a same-length search
    /// when the anchor's span length differs.
    Anchor,
    /// First opposite-gender profession, in list order, with an equal span.
    SameLength,
}

impl std::str::FromStr for PairingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" => Ok(PairingMode::Anchor),
            "same-length" => Ok(PairingMode::SameLength),
            _ => Err(Error::Config(format!(
                "unknown pairing mode {s:?}; expected anchor or same-length"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub clean: TemplateSample,
    pub corrupt: TemplateSample,
    pub alignment: SpanMode,
}

impl CounterfactualPair {
    pub fn new(clean: TemplateSample, corrupt: TemplateSample, alignment: SpanMode) -> Result<Self> {
        if clean.template != corrupt.template {
            return Err(Error::Pairing(
                "clean and corrupt prompts use different templates".into(),
            ));
        }
        if clean.gender == corrupt.gender {
            return Err(Error::Pairing(
                "counterfactual profession must have the opposite gender".into(),
            ));
        }
        if alignment == SpanMode::AllTokens && clean.span.len() != corrupt.span.len() {
            return Err(Error::Pairing(format!(
                "all-tokens alignment needs equal spans, got {} and {}",
                clean.span.len(),
                corrupt.span.len()
            )));
        }
        if clean.tokens.len() != corrupt.tokens.len() {
            return Err(Error::Pairing(format!(
                "prompt lengths differ: {} vs {} tokens",
                clean.tokens.len(),
                corrupt.tokens.len()
            )));
        }
        Ok(Self {
            clean,
            corrupt,
            alignment,
        })
    }

    /// `(clean position, corrupt position)` pairs for the profession span.
    pub fn aligned_positions(&self) -> Vec<(usize, usize)> {
        match self.alignment {
            SpanMode::LastToken => vec![(self.clean.span.last(), self.corrupt.span.last())],
            SpanMode::AllTokens => self.clean.span.positions().zip(self.corrupt.span.positions()).collect(),
        }
    }
}

pub fn pair_counterfactual(
    sample: &TemplateSample,
    professions: &Professions,
    vocab: &Vocab,
    pronouns: PronounTokens,
    mode: PairingMode,
    alignment: SpanMode,
) -> Result<CounterfactualPair> {
    let other = sample.gender.opposite();
    let pool = professions.of(other);
    if pool.is_empty() {
        return Err(Error::Pairing(format!(
            "no {} professions to pair with",
            other.as_str()
        )));
    }
    let render = |p: &str| TemplateSample::render(&sample.template, p, other, vocab, pronouns);
    if mode == PairingMode::Anchor {
        let anchor = match other {
            Gender::Male => MALE_ANCHOR,
            Gender::Female => FEMALE_ANCHOR,
        };
        let corrupt = render(anchor)?;
        if corrupt.span.len() == sample.span.len() {
            return CounterfactualPair::new(sample.clone(), corrupt, alignment);
        }
    }
    for p in pool {
        let corrupt = render(p)?;
        if corrupt.span.len() == sample.span.len() && corrupt.tokens.len() == sample.tokens.len() {
            return CounterfactualPair::new(sample.clone(), corrupt, alignment);
        }
    }
    Err(Error::Pairing(format!(
        "no {} profession spans {} tokens like {:?}",
        other.as_str(),
        sample.span.len(),
        sample.profession
    )))
}
