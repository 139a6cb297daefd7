//! Prompt construction, train/test splits, and known-pair filtering.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::synthetic::render_line;
use super::{RelationCategory, RelationPair, Vocab};
use crate::error::{Error, Result};
use crate::model::{predict_next, Parameters};

/// Token between prompt lines.
pub const LINE_SEPARATOR: &str = ";";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    /// Index of the query subject's last token.
    pub subject_position: usize,
}

/// Completed template lines for `icl`, then the query line cut right after
/// the subject.
pub fn build_prompt(
    vocab: &Vocab,
    category: &RelationCategory,
    query_subject: &str,
    icl: &[RelationPair],
) -> Result<Prompt> {
    if icl.iter().any(|p| p.subject == query_subject) {
        return Err(Error::Protocol(format!(
            "query subject {query_subject:?} is among its own examples"
        )));
    }
    let mut text = String::new();
    for pair in icl {
        text.push_str(&render_line(&category.template, pair));
        text.push(' ');
        text.push_str(LINE_SEPARATOR);
        text.push(' ');
    }
    let (head, _) = category
        .template
        .split_once("{subject}")
        .ok_or_else(|| Error::config("template", "missing {subject} slot"))?;
    text.push_str(head);
    text.push_str(query_subject);
    let tokens = vocab.encode(&text)?;
    Ok(Prompt {
        subject_position: tokens.len() - 1,
        tokens,
    })
}

/// Shuffles the pairs under `seed` and returns the first `n_train` as the
/// training split and the rest as the test split.
pub fn split_pairs(
    category: &RelationCategory,
    n_train: usize,
    seed: u64,
) -> Result<(Vec<RelationPair>, Vec<RelationPair>)> {
    if category.pairs.len() <= n_train {
        return Err(Error::Split(format!(
            "{} has {} pairs, need more than {n_train}",
            category.id,
            category.pairs.len()
        )));
    }
    let mut order: Vec<usize> = (0..category.pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| idx.iter().map(|&i| category.pairs[i].clone()).collect();
    Ok((take(&order[..n_train]), take(&order[n_train..])))
}

/// Examples for a query: `icl` without the query pair itself.
pub fn examples_for(icl: &[RelationPair], subject: &str) -> Vec<RelationPair> {
    icl.iter().filter(|p| p.subject != subject).cloned().collect()
}

/// Keeps the pairs whose prompt the model completes with the first token of
/// one of the pair's objects. Each prompt uses `icl` minus the pair itself.
pub fn filter_known(
    params: &Parameters,
    vocab: &Vocab,
    category: &RelationCategory,
    pairs: &[RelationPair],
    icl: &[RelationPair],
) -> Result<Vec<RelationPair>> {
    let keep = pairs
        .par_iter()
        .map(|pair| {
            let targets: Vec<usize> = pair
                .objects
                .iter()
                .filter_map(|o| o.split_whitespace().next())
                .filter_map(|w| vocab.id(w).ok())
                .collect();
            if targets.is_empty() {
                log::warn!(
                    "{}: no object of {:?} is in the vocabulary; pair skipped",
                    category.id,
                    pair.subject
                );
                return Ok(false);
            }
            let prompt = build_prompt(vocab, category, &pair.subject, &examples_for(icl, &pair.subject))?;
            Ok(targets.contains(&predict_next(params, &prompt.tokens)?))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(pairs
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| p.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relations::{Group, DEFAULT_TEMPLATE};

    fn category(n: usize) -> RelationCategory {
        let pairs = (0..n)
            .map(|i| RelationPair::new(format!("s{i}"), vec![format!("o{i}")]).unwrap())
            .collect();
        RelationCategory::new("r", Group::Synthetic, "cue {subject} {object}", pairs).unwrap()
    }

    fn vocab(n: usize) -> Vocab {
        let mut words = vec![";".to_string(), "cue".to_string()];
        for i in 0..n {
            words.push(format!("s{i}"));
            words.push(format!("o{i}"));
        }
        Vocab::from_words(words).unwrap()
    }

    #[test]
    fn prompt_has_examples_then_query() {
        let c = category(12);
        let v = vocab(12);
        let p = build_prompt(&v, &c, "s9", &c.pairs[..8]).unwrap();
        let text = v.decode(&p.tokens).unwrap();
        assert_eq!(text.split(" ; ").count(), 9);
        assert!(text.starts_with("cue s0 o0 ; cue s1 o1 ;"));
        assert!(text.ends_with("; cue s9"));
        assert_eq!(p.subject_position, p.tokens.len() - 1);
        assert_eq!(v.word(p.tokens[p.subject_position]), Some("s9"));
    }

    #[test]
    fn prompt_errors() {
        let c = category(12);
        let v = vocab(12);
        assert!(matches!(
            build_prompt(&v, &c, "s1", &c.pairs[..8]),
            Err(Error::Protocol(_))
        ));
        match build_prompt(&v, &c, "zebra", &c.pairs[..8]) {
            Err(Error::Vocab(w)) => assert_eq!(w, "zebra"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn default_template_has_no_cue() {
        let pairs = vec![
            RelationPair::new("s0", vec!["o0".into()]).unwrap(),
            RelationPair::new("s1", vec!["o1".into()]).unwrap(),
        ];
        let c = RelationCategory::new("r", Group::Inflectional, DEFAULT_TEMPLATE, pairs).unwrap();
        let v = vocab(2);
        let p = build_prompt(&v, &c, "s1", &c.pairs[..1]).unwrap();
        assert_eq!(v.decode(&p.tokens).unwrap(), "s0 o0 ; s1");
    }

    #[test]
    fn splits() {
        let c = category(50);
        let (train, test) = split_pairs(&c, 8, 3).unwrap();
        assert_eq!((train.len(), test.len()), (8, 42));
        assert!(train.iter().all(|p| !test.contains(p)));
        assert_eq!(split_pairs(&c, 8, 3).unwrap().0, train);
        assert!(matches!(split_pairs(&category(8), 8, 0), Err(Error::Split(_))));
    }
}
