//! Synthetic relational corpora.
//!
//! Stems are pseudo-words built from consonant-vowel syllables. Systematic
//! relations attach suffixes: a fusional scheme has one suffix, an
//! agglutinative scheme stacks several slots, one relation per slot, each
//! mapping the previous form to the next. Arbitrary relations map stems to
//! unrelated lookup words.
//!
//! Every relation has two frames, `<cue> subject object` and
//! `<cue>~ subject object`. A fraction of each relation's subjects never
//! appears with its object in the first frame, which is the one prompts
//! use, so completing them requires generalizing from the second frame.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prompt::LINE_SEPARATOR;
use super::{Group, RelationCategory, RelationPair, Vocab};
use crate::error::{Error, Result};

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SuffixScheme {
    Fusional { suffix: String },
    Agglutinative { slots: Vec<String> },
}

impl SuffixScheme {
    fn slots(&self) -> Vec<&str> {
        match self {
            SuffixScheme::Fusional { suffix } => vec![suffix.as_str()],
            SuffixScheme::Agglutinative { slots } => slots.iter().map(String::as_str).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mapping {
    /// Every stem maps to one of `targets` words.
    ManyToFew,
    /// A random one-to-one map onto fresh words; `targets` is ignored.
    Bijective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArbitrarySpec {
    pub name: String,
    pub targets: usize,
    pub mapping: Mapping,
    /// Zipf exponent of the target shares of a many-to-few map; 0 spreads
    /// stems evenly.
    #[serde(default)]
    pub zipf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_stems: usize,
    pub scheme: SuffixScheme,
    pub arbitrary: Vec<ArbitrarySpec>,
    /// Fraction of each relation's subjects kept out of the prompt frame.
    pub held_out_fraction: f64,
    pub n_sentences: usize,
    /// Sampling weight of each systematic relation relative to an
    /// arbitrary one.
    pub systematic_weight: f64,
    /// Sentences hold between one and this many lines of one relation.
    pub max_lines: usize,
    pub vocab_budget: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_stems: 200,
            scheme: SuffixScheme::Fusional { suffix: "s".into() },
            arbitrary: vec![ArbitrarySpec {
                name: "color".into(),
                targets: 8,
                mapping: Mapping::ManyToFew,
                zipf: 1.0,
            }],
            held_out_fraction: 0.2,
            n_sentences: 4000,
            systematic_weight: 1.0,
            max_lines: 9,
            vocab_budget: 1024,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("data.synthetic.{f}");
        if self.n_stems < 2 {
            return Err(Error::config(field("n_stems"), "need at least 2 stems"));
        }
        let capacity = VOWELS.len() * CONSONANTS.len();
        let max_stems = capacity * capacity + capacity * capacity * capacity;
        if self.n_stems > max_stems / 2 {
            return Err(Error::config(
                field("n_stems"),
                format!("at most {} stems can be generated", max_stems / 2),
            ));
        }
        let slots = self.scheme.slots();
        if slots.is_empty() {
            return Err(Error::config(field("scheme"), "no suffix slots"));
        }
        for s in &slots {
            if s.is_empty() || !s.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(Error::config(
                    field("scheme"),
                    format!("suffix {s:?} must be non-empty lowercase ASCII"),
                ));
            }
        }
        let mut names: HashSet<String> = (0..slots.len()).map(|k| self.systematic_id(k)).collect();
        for a in &self.arbitrary {
            if a.name.is_empty() || !a.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
                return Err(Error::config(field("arbitrary.name"), format!("bad name {:?}", a.name)));
            }
            if !names.insert(a.name.clone()) {
                return Err(Error::config(field("arbitrary.name"), format!("{:?} used twice", a.name)));
            }
            if a.mapping == Mapping::ManyToFew && !(1..=self.n_stems).contains(&a.targets) {
                return Err(Error::config(field("arbitrary.targets"), "must lie in 1..=n_stems"));
            }
            if !(a.zipf >= 0.0 && a.zipf.is_finite()) {
                return Err(Error::config(field("arbitrary.zipf"), "must be non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return Err(Error::config(field("held_out_fraction"), "must lie in [0, 1)"));
        }
        if self.n_sentences == 0 {
            return Err(Error::config(field("n_sentences"), "must be positive"));
        }
        if !(self.systematic_weight > 0.0 && self.systematic_weight.is_finite()) {
            return Err(Error::config(field("systematic_weight"), "must be positive"));
        }
        if self.max_lines == 0 {
            return Err(Error::config(field("max_lines"), "must be positive"));
        }
        let needed = self.vocab_size();
        if needed > self.vocab_budget {
            return Err(Error::config(
                field("vocab_budget"),
                format!(
                    "{} stems need {needed} vocabulary entries, budget is {}",
                    self.n_stems, self.vocab_budget
                ),
            ));
        }
        Ok(())
    }

    /// Number of vocabulary entries the generated data will use.
    pub fn vocab_size(&self) -> usize {
        let relations = self.scheme.slots().len() + self.arbitrary.len();
        let targets: usize = self
            .arbitrary
            .iter()
            .map(|a| match a.mapping {
                Mapping::ManyToFew => a.targets,
                Mapping::Bijective => self.n_stems,
            })
            .sum();
        // pad, unk, separator, two cues per relation, stems and their forms
        3 + 2 * relations + self.n_stems * (1 + self.scheme.slots().len()) + targets
    }

    fn systematic_id(&self, slot: usize) -> String {
        let slots = self.scheme.slots();
        format!("suffix-{}", slots[..=slot].join("-"))
    }

    /// Longest token sequence a corpus sentence can have.
    pub fn max_sentence_len(&self) -> usize {
        4 * self.max_lines - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRelation {
    pub category: RelationCategory,
    pub systematic: bool,
    /// Subjects whose pair never appears in the prompt frame of the corpus.
    pub held_out: Vec<String>,
    pub alt_template: String,
}

impl SyntheticRelation {
    pub fn held_out_pairs(&self) -> Vec<RelationPair> {
        self.category
            .pairs
            .iter()
            .filter(|p| self.held_out.contains(&p.subject))
            .cloned()
            .collect()
    }

    pub fn seen_pairs(&self) -> Vec<RelationPair> {
        self.category
            .pairs
            .iter()
            .filter(|p| !self.held_out.contains(&p.subject))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// One sentence per entry, words separated by single spaces.
    pub corpus: Vec<String>,
    pub relations: Vec<SyntheticRelation>,
    pub vocab: Vocab,
}

impl SyntheticData {
    pub fn categories(&self) -> Vec<RelationCategory> {
        self.relations.iter().map(|r| r.category.clone()).collect()
    }

    pub fn relation(&self, id: &str) -> Option<&SyntheticRelation> {
        self.relations.iter().find(|r| r.category.id == id)
    }

    pub fn corpus_text(&self) -> String {
        let mut s = self.corpus.join("\n");
        s.push('\n');
        s
    }

    pub fn encoded_corpus(&self) -> Result<Vec<Vec<usize>>> {
        self.corpus.iter().map(|s| self.vocab.encode(s)).collect()
    }
}

fn syllable(rng: &mut ChaCha8Rng) -> String {
    let c = CONSONANTS[rng.gen_range(0..CONSONANTS.len())];
    let v = VOWELS[rng.gen_range(0..VOWELS.len())];
    format!("{c}{v}")
}

fn fresh_word(rng: &mut ChaCha8Rng, used: &HashSet<String>, closed: bool) -> String {
    loop {
        let n = rng.gen_range(2..=3);
        let mut w: String = (0..n).map(|_| syllable(rng)).collect();
        if closed {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())]);
        }
        if !used.contains(&w) {
            return w;
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = spec.scheme.slots();

    let mut cues: Vec<String> = (0..slots.len()).map(|k| spec.systematic_id(k)).collect();
    cues.extend(spec.arbitrary.iter().map(|a| a.name.clone()));
    let mut used: HashSet<String> = cues.iter().flat_map(|c| [c.clone(), format!("{c}~")]).collect();
    used.insert(LINE_SEPARATOR.to_string());

    // stems together with every suffixed form, all distinct
    let mut forms: Vec<Vec<String>> = Vec::with_capacity(spec.n_stems);
    while forms.len() < spec.n_stems {
        let stem = fresh_word(&mut rng, &used, false);
        let mut chain = vec![stem.clone()];
        for s in &slots {
            let next = format!("{}{s}", chain.last().expect("non-empty"));
            chain.push(next);
        }
        let distinct: HashSet<&String> = chain.iter().collect();
        if distinct.len() == chain.len() && chain.iter().all(|w| !used.contains(w)) {
            used.extend(chain.iter().cloned());
            forms.push(chain);
        }
    }

    let mut relations = Vec::new();
    for (k, cue) in cues.iter().enumerate().take(slots.len()) {
        let pairs = forms
            .iter()
            .map(|f| RelationPair::new(f[k].clone(), vec![f[k + 1].clone()]))
            .collect::<Result<Vec<_>>>()?;
        relations.push((cue.clone(), true, pairs));
    }
    let mut targets_all = Vec::new();
    for a in &spec.arbitrary {
        let n = match a.mapping {
            Mapping::ManyToFew => a.targets,
            Mapping::Bijective => spec.n_stems,
        };
        let targets: Vec<String> = (0..n)
            .map(|_| {
                let w = fresh_word(&mut rng, &used, true);
                used.insert(w.clone());
                w
            })
            .collect();
        let mut order: Vec<usize> = (0..spec.n_stems).collect();
        order.shuffle(&mut rng);
        let counts = match a.mapping {
            Mapping::ManyToFew => target_counts(spec.n_stems, n, a.zipf),
            Mapping::Bijective => vec![1; n],
        };
        let mut assigned = vec![0; spec.n_stems];
        let mut ranks = order.iter();
        for (t, &c) in counts.iter().enumerate() {
            for &stem in ranks.by_ref().take(c) {
                assigned[stem] = t;
            }
        }
        let pairs = forms
            .iter()
            .zip(&assigned)
            .map(|(f, &t)| RelationPair::new(f[0].clone(), vec![targets[t].clone()]))
            .collect::<Result<Vec<_>>>()?;
        targets_all.extend(targets);
        relations.push((a.name.clone(), false, pairs));
    }

    let mut out = Vec::new();
    for (cue, systematic, pairs) in relations {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let n_held = (spec.held_out_fraction * pairs.len() as f64).floor() as usize;
        let mut held_out: Vec<String> = order[..n_held]
            .iter()
            .map(|&i| pairs[i].subject.clone())
            .collect();
        held_out.sort();
        let template = format!("{cue} {{subject}} {{object}}");
        let alt_template = format!("{cue}~ {{subject}} {{object}}");
        out.push(SyntheticRelation {
            category: RelationCategory::new(cue, Group::Synthetic, template, pairs)?,
            systematic,
            held_out,
            alt_template,
        });
    }

    let mut corpus = Vec::with_capacity(spec.n_sentences);
    let seen: Vec<Vec<RelationPair>> = out.iter().map(|r| r.seen_pairs()).collect();
    let weights: Vec<f64> = out
        .iter()
        .map(|r| if r.systematic { spec.systematic_weight } else { 1.0 })
        .collect();
    let pick = rand::distributions::WeightedIndex::new(&weights)
        .map_err(|e| Error::config("data.synthetic.systematic_weight", e.to_string()))?;
    for _ in 0..spec.n_sentences {
        let r = rng.sample(&pick);
        let alt = rng.gen_bool(0.5);
        let (pool, template) = if alt {
            (&out[r].category.pairs, &out[r].alt_template)
        } else {
            (&seen[r], &out[r].category.template)
        };
        let lines = rng.gen_range(1..=spec.max_lines).min(pool.len());
        let picks = rand::seq::index::sample(&mut rng, pool.len(), lines);
        let text: Vec<String> = picks
            .iter()
            .map(|i| render_line(template, &pool[i]))
            .collect();
        corpus.push(text.join(&format!(" {LINE_SEPARATOR} ")));
    }

    let mut words: Vec<String> = vec![LINE_SEPARATOR.to_string()];
    for c in &cues {
        words.push(c.clone());
        words.push(format!("{c}~"));
    }
    for k in 0..=slots.len() {
        words.extend(forms.iter().map(|f| f[k].clone()));
    }
    words.extend(targets_all);
    let vocab = Vocab::from_words(&words)?;
    debug_assert_eq!(vocab.len(), spec.vocab_size());

    Ok(SyntheticData {
        corpus,
        relations: out,
        vocab,
    })
}

/// Splits `n` items over `k` targets with shares proportional to
/// `1 / (rank + 1)^zipf`, every target getting at least one item.
fn target_counts(n: usize, k: usize, zipf: f64) -> Vec<usize> {
    let weights: Vec<f64> = (0..k).map(|r| ((r + 1) as f64).powf(-zipf)).collect();
    let total: f64 = weights.iter().sum();
    let spare = n - k;
    let exact: Vec<f64> = weights.iter().map(|w| w / total * spare as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| 1 + e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..k).collect();
    rest.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &i in rest.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// One completed template line using the pair's first object.
pub fn render_line(template: &str, pair: &RelationPair) -> String {
    template
        .replace("{subject}", &pair.subject)
        .replace("{object}", pair.object())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusional_pairs_are_suffixed_stems() {
        let data = generate_synthetic(&SyntheticSpec::default(), 1).unwrap();
        let plural = data.relation("suffix-s").unwrap();
        assert!(plural.systematic);
        assert_eq!(plural.category.pairs.len(), 200);
        for p in &plural.category.pairs {
            assert_eq!(p.objects, vec![format!("{}s", p.subject)]);
        }
        assert_eq!(plural.held_out.len(), 40);
        assert_eq!(data.vocab.len(), SyntheticSpec::default().vocab_size());
    }

    #[test]
    fn held_out_pairs_stay_out_of_the_prompt_frame() {
        let data = generate_synthetic(&SyntheticSpec::default(), 2).unwrap();
        for r in &data.relations {
            let cue = r.category.id.as_str();
            for p in r.held_out_pairs() {
                let line = format!("{cue} {} {}", p.subject, p.object());
                assert!(data
                    .corpus
                    .iter()
                    .all(|s| !s.split(" ; ").any(|l| l == line)));
            }
        }
    }

    #[test]
    fn agglutinative_chains_slots() {
        let spec = SyntheticSpec {
            scheme: SuffixScheme::Agglutinative {
                slots: vec!["ler".into(), "im".into()],
            },
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec, 3).unwrap();
        let first = data.relation("suffix-ler").unwrap();
        let second = data.relation("suffix-ler-im").unwrap();
        for (a, b) in first.category.pairs.iter().zip(&second.category.pairs) {
            assert_eq!(a.object(), b.subject);
            assert_eq!(b.object(), format!("{}im", a.object()));
        }
        assert_eq!(data.vocab.len(), spec.vocab_size());
    }

    #[test]
    fn target_counts_follow_the_shares() {
        assert_eq!(target_counts(16, 8, 0.0), vec![2; 8]);
        let c = target_counts(200, 8, 1.0);
        assert_eq!(c.iter().sum::<usize>(), 200);
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
        assert!(c.iter().all(|&x| x >= 1));
        assert_eq!(target_counts(8, 8, 3.0), vec![1; 8]);
    }

    #[test]
    fn budget_is_enforced() {
        let spec = SyntheticSpec {
            vocab_budget: 300,
            ..SyntheticSpec::default()
        };
        match generate_synthetic(&spec, 0) {
            Err(Error::Config { field, .. }) => assert!(field.ends_with("vocab_budget")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bijective_relations_are_one_to_one() {
        let spec = SyntheticSpec {
            n_stems: 30,
            arbitrary: vec![ArbitrarySpec {
                name: "capital".into(),
                targets: 0,
                mapping: Mapping::Bijective,
                zipf: 0.0,
            }],
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec, 4).unwrap();
        let r = data.relation("capital").unwrap();
        let objects: HashSet<&str> = r.category.pairs.iter().map(|p| p.object()).collect();
        assert_eq!(objects.len(), 30);
    }
}
