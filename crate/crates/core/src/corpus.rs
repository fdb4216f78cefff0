//! Synthetic factor-controlled sentences, their role tags, a closed-vocab
//! tokenizer and JSON-lines I/O.
//!
//! Every sentence instantiates `{subject} [negation] {verb} {object} [modifier]`
//! with one value per factor, so the factor tuple is ground truth for the
//! disentanglement metrics and [`parse`] doubles as a well-formedness oracle.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const UNK_TEXT: &str = "<unk>";

/// Semantic role of a word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "ARG0")]
    Arg0,
    #[serde(rename = "V")]
    V,
    #[serde(rename = "ARG1")]
    Arg1,
    #[serde(rename = "MOD")]
    Mod,
    #[serde(rename = "NEG")]
    Neg,
    #[serde(rename = "O")]
    O,
}

impl Role {
    pub const ALL: [Role; 6] = [Role::Arg0, Role::V, Role::Arg1, Role::Mod, Role::Neg, Role::O];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        Role::ALL.iter().position(|&r| r == self).unwrap()
    }
}

/// Template slots in sentence order. Each factor fills exactly one.
const SLOTS: [(&str, Role); 5] = [
    ("subject_class", Role::Arg0),
    ("negation", Role::Neg),
    ("verb_class", Role::V),
    ("object_class", Role::Arg1),
    ("modifier", Role::Mod),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    /// Surface phrase per value; `""` realises an absent optional slot.
    pub values: Vec<String>,
}

/// Ordered factors and their value sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub factors: Vec<Factor>,
}

fn factor(name: &str, values: &[&str]) -> Factor {
    Factor {
        name: name.into(),
        values: values.iter().map(|v| v.to_string()).collect(),
    }
}

impl Default for FactorSpec {
    fn default() -> Self {
        FactorSpec {
            factors: vec![
                factor("subject_class", &["animals", "plants", "humans", "birds", "fish"]),
                factor("verb_class", &["require", "produce", "absorb", "use"]),
                factor("object_class", &["food", "water", "energy", "light", "oxygen"]),
                factor("negation", &["", "do not"]),
                factor("modifier", &["", "to survive", "to grow"]),
            ],
        }
    }
}

impl FactorSpec {
    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.factors.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.values.len()).collect()
    }

    pub fn total_combinations(&self) -> usize {
        self.cardinalities().iter().product()
    }

    /// Checks that the factors fill the template and that every combination
    /// parses back to itself.
    pub fn validate(&self) -> Result<()> {
        let mut names = self.names();
        names.sort_unstable();
        let mut expected: Vec<&str> = SLOTS.iter().map(|s| s.0).collect();
        expected.sort_unstable();
        if names != expected {
            return Err(Error::Config(format!(
                "factors must be exactly {expected:?}, got {names:?}"
            )));
        }
        for f in &self.factors {
            if f.values.is_empty() {
                return Err(Error::Config(format!("factor {} has no values", f.name)));
            }
            let required = matches!(f.name.as_str(), "subject_class" | "verb_class" | "object_class");
            if required && f.values.iter().any(|v| v.trim().is_empty()) {
                return Err(Error::Config(format!("factor {} cannot be empty", f.name)));
            }
            if f.values.iter().any(|v| v.split_whitespace().collect::<Vec<_>>().join(" ") != *v) {
                return Err(Error::Config(format!("factor {} has irregular whitespace", f.name)));
            }
        }
        for combo in self.combinations() {
            let s = self.realise(&combo)?;
            let words: Vec<&str> = s.text.split_whitespace().collect();
            if parse(self, &words).map(|p| p.factors) != Some(combo.clone()) {
                return Err(Error::Config(format!("ambiguous grammar at \"{}\"", s.text)));
            }
        }
        Ok(())
    }

    fn factor_index(&self, name: &str) -> usize {
        self.factors.iter().position(|f| f.name == name).unwrap()
    }

    /// All factor tuples in lexicographic order.
    pub fn combinations(&self) -> Vec<Vec<usize>> {
        let cards = self.cardinalities();
        let mut out = vec![Vec::new()];
        for &c in &cards {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..c).map(move |v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out
    }

    /// Build the sentence for a factor tuple.
    pub fn realise(&self, factors: &[usize]) -> Result<FactorSentence> {
        if factors.len() != self.n_factors()
            || factors.iter().zip(self.cardinalities()).any(|(&v, c)| v >= c)
        {
            return Err(Error::Invalid(format!("factor tuple {factors:?} out of range")));
        }
        let mut words = Vec::new();
        let mut roles = Vec::new();
        for (name, role) in SLOTS {
            let k = self.factor_index(name);
            for w in self.factors[k].values[factors[k]].split_whitespace() {
                words.push(w.to_string());
                roles.push(role);
            }
        }
        Ok(FactorSentence {
            text: words.join(" "),
            factors: factors.to_vec(),
            roles,
        })
    }

    /// Every word the grammar can emit, in first-appearance order.
    pub fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (name, _) in SLOTS {
            for v in &self.factors[self.factor_index(name)].values {
                for w in v.split_whitespace() {
                    if !out.iter().any(|o| o == w) {
                        out.push(w.to_string());
                    }
                }
            }
        }
        out
    }
}

/// One generated sentence with its ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorSentence {
    pub text: String,
    /// Value index per factor, in spec order.
    pub factors: Vec<usize>,
    /// One role per whitespace-separated word.
    pub roles: Vec<Role>,
}

impl FactorSentence {
    pub fn words(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }
}

/// Result of a successful parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parse {
    pub factors: Vec<usize>,
    pub roles: Vec<Role>,
}

/// Parse a word sequence against the template grammar. Returns `None` unless
/// exactly one derivation exists.
pub fn parse(spec: &FactorSpec, words: &[&str]) -> Option<Parse> {
    let mut found = Vec::new();
    let mut chosen = vec![0; spec.n_factors()];
    descend(spec, words, 0, 0, &mut chosen, &mut found);
    if found.len() != 1 {
        return None;
    }
    let factors = found.pop().unwrap();
    let roles = spec.realise(&factors).ok()?.roles;
    Some(Parse { factors, roles })
}

fn descend(
    spec: &FactorSpec,
    words: &[&str],
    slot: usize,
    at: usize,
    chosen: &mut Vec<usize>,
    found: &mut Vec<Vec<usize>>,
) {
    if found.len() > 1 {
        return;
    }
    if slot == SLOTS.len() {
        if at == words.len() {
            found.push(chosen.clone());
        }
        return;
    }
    let k = spec.factor_index(SLOTS[slot].0);
    for (v, phrase) in spec.factors[k].values.iter().enumerate() {
        let parts: Vec<&str> = phrase.split_whitespace().collect();
        if words.len() - at >= parts.len() && words[at..at + parts.len()] == parts[..] {
            chosen[k] = v;
            descend(spec, words, slot + 1, at + parts.len(), chosen, found);
        }
    }
}

/// Draw `n` sentences. Without replacement `n` may not exceed the number of
/// combinations.
pub fn generate_corpus(
    spec: &FactorSpec,
    n: usize,
    seed: u64,
    with_replacement: bool,
) -> Result<Vec<FactorSentence>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos = spec.combinations();
    let picked: Vec<Vec<usize>> = if with_replacement {
        (0..n)
            .map(|_| combos[rng.random_range(0..combos.len())].clone())
            .collect()
    } else {
        if n > combos.len() {
            return Err(Error::Config(format!(
                "cannot draw {n} distinct sentences from {} combinations",
                combos.len()
            )));
        }
        combos.shuffle(&mut rng);
        combos.truncate(n);
        combos
    };
    picked.iter().map(|f| spec.realise(f)).collect()
}

/// Per-factor value counts.
pub fn marginals(spec: &FactorSpec, corpus: &[FactorSentence]) -> Vec<Vec<usize>> {
    let mut counts: Vec<Vec<usize>> = spec.cardinalities().iter().map(|&c| vec![0; c]).collect();
    for s in corpus {
        for (k, &v) in s.factors.iter().enumerate() {
            counts[k][v] += 1;
        }
    }
    counts
}

/// Deterministic train/validation split that keeps every factor value
/// present in the training part.
pub fn split(
    corpus: &[FactorSentence],
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<FactorSentence>, Vec<FactorSentence>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train_frac {train_frac} not in (0, 1)")));
    }
    let n = corpus.len();
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_val = n - n_train.min(n);
    if n_val == 0 {
        return Err(Error::Config(format!(
            "validation split of {n} sentences at train_frac {train_frac} is empty"
        )));
    }
    let mut remaining: Vec<BTreeMap<usize, usize>> = Vec::new();
    for s in corpus {
        if remaining.len() < s.factors.len() {
            remaining.resize(s.factors.len(), BTreeMap::new());
        }
        for (k, &v) in s.factors.iter().enumerate() {
            *remaining[k].entry(v).or_default() += 1;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    let mut taken = 0;
    for &i in &order {
        if taken == n_val {
            break;
        }
        let s = &corpus[i];
        if s.factors.iter().enumerate().all(|(k, v)| remaining[k][v] > 1) {
            for (k, v) in s.factors.iter().enumerate() {
                *remaining[k].get_mut(v).unwrap() -= 1;
            }
            is_val[i] = true;
            taken += 1;
        }
    }
    if taken < n_val {
        return Err(Error::Invalid(format!(
            "could only move {taken} of {n_val} sentences to validation without losing a factor value"
        )));
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for &i in &order {
        if is_val[i] {
            val.push(corpus[i].clone());
        } else {
            train.push(corpus[i].clone());
        }
    }
    Ok((train, val))
}

/// Closed-vocabulary whitespace tokenizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    /// Words in id order, starting at id 4.
    words: Vec<String>,
}

impl Tokenizer {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for w in &words {
            if w.is_empty() || w.contains(char::is_whitespace) || w == UNK_TEXT || !seen.insert(w) {
                return Err(Error::Config(format!("bad vocabulary word {w:?}")));
            }
        }
        Ok(Tokenizer { words })
    }

    pub fn from_spec(spec: &FactorSpec) -> Result<Self> {
        Tokenizer::new(spec.words())
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len() + 4
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.words
            .iter()
            .position(|w| w == word)
            .map_or(UNK, |i| i as u32 + 4)
    }

    /// `[BOS, words…, EOS]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(text.split_whitespace().map(|w| self.id(w)));
        ids.push(EOS);
        ids
    }

    /// Drops PAD/BOS/EOS; UNK renders as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| {
                if i == UNK {
                    UNK_TEXT
                } else {
                    self.words.get(i as usize - 4).map_or(UNK_TEXT, |w| w.as_str())
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Serialize, Deserialize)]
struct Line {
    text: String,
    factors: BTreeMap<String, usize>,
    roles: Vec<Role>,
}

pub fn write_jsonl<W: Write>(spec: &FactorSpec, corpus: &[FactorSentence], mut out: W) -> Result<()> {
    for s in corpus {
        let line = Line {
            text: s.text.clone(),
            factors: spec
                .names()
                .iter()
                .zip(&s.factors)
                .map(|(n, &v)| (n.to_string(), v))
                .collect(),
            roles: s.roles.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(spec: &FactorSpec, input: R) -> Result<Vec<FactorSentence>> {
    let mut out = Vec::new();
    for (no, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line)?;
        let factors = spec
            .factors
            .iter()
            .map(|f| {
                l.factors
                    .get(&f.name)
                    .copied()
                    .filter(|&v| v < f.values.len())
                    .ok_or_else(|| Error::Invalid(format!("line {}: bad or missing factor {}", no + 1, f.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        if l.roles.len() != l.text.split_whitespace().count() {
            return Err(Error::Invalid(format!("line {}: roles do not align with words", no + 1)));
        }
        out.push(FactorSentence {
            text: l.text,
            factors,
            roles: l.roles,
        });
    }
    Ok(out)
}

pub fn save_jsonl(spec: &FactorSpec, corpus: &[FactorSentence], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_jsonl(spec, corpus, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(spec: &FactorSpec, path: &Path) -> Result<Vec<FactorSentence>> {
    let f = std::fs::File::open(path)?;
    read_jsonl(spec, std::io::BufReader::new(f))
}
