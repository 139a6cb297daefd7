//! Relation datasets: categories of subject/object pairs, their prompts,
//! splits, and the synthetic corpora the toy model is trained on.

pub mod bats;
pub mod prompt;
pub mod synthetic;
pub mod tokenize;
pub mod vocab;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bats::{parse_bats_dir, parse_category, serialize_category};
pub use prompt::{build_prompt, filter_known, split_pairs, Prompt, LINE_SEPARATOR};
pub use synthetic::{generate_synthetic, render_line, ArbitrarySpec, Mapping, SuffixScheme, SyntheticData, SyntheticSpec};
pub use tokenize::{PieceTokenizer, Tokenizer};
pub use vocab::Vocab;

pub const DEFAULT_TEMPLATE: &str = "{subject} {object}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Inflectional,
    Derivational,
    Encyclopedic,
    Lexicographic,
    Synthetic,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Group::Inflectional => "inflectional",
            Group::Derivational => "derivational",
            Group::Encyclopedic => "encyclopedic",
            Group::Lexicographic => "lexicographic",
            Group::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationPair {
    pub subject: String,
    pub objects: Vec<String>,
}

impl RelationPair {
    pub fn new(subject: impl Into<String>, objects: Vec<String>) -> Result<Self> {
        let subject = subject.into();
        if subject.trim().is_empty() {
            return Err(Error::Input("pair subject is empty".into()));
        }
        if objects.is_empty() || objects.iter().any(|o| o.trim().is_empty()) {
            return Err(Error::Input(format!("pair {subject:?} has an empty object")));
        }
        for (i, o) in objects.iter().enumerate() {
            if objects[..i].contains(o) {
                return Err(Error::Input(format!(
                    "pair {subject:?} lists object {o:?} twice"
                )));
            }
        }
        Ok(RelationPair { subject, objects })
    }

    /// The object used when the pair is written out as a completed example.
    pub fn object(&self) -> &str {
        &self.objects[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationCategory {
    pub id: String,
    pub group: Group,
    /// One prompt line, with a `{subject}` slot directly followed by an
    /// `{object}` slot. Query lines are cut right after the subject.
    pub template: String,
    pub pairs: Vec<RelationPair>,
}

impl RelationCategory {
    pub fn new(
        id: impl Into<String>,
        group: Group,
        template: impl Into<String>,
        pairs: Vec<RelationPair>,
    ) -> Result<Self> {
        let template = template.into();
        check_template(&template)?;
        let category = RelationCategory {
            id: id.into(),
            group,
            template,
            pairs,
        };
        for (i, p) in category.pairs.iter().enumerate() {
            if category.pairs[..i].iter().any(|q| q.subject == p.subject) {
                return Err(Error::Input(format!(
                    "category {} repeats subject {:?}",
                    category.id, p.subject
                )));
            }
        }
        Ok(category)
    }

    pub fn pair(&self, subject: &str) -> Option<&RelationPair> {
        self.pairs.iter().find(|p| p.subject == subject)
    }
}

/// Checks that a line template has exactly one subject slot followed, after
/// whitespace only, by exactly one object slot.
pub fn check_template(template: &str) -> Result<()> {
    let bad = |reason: &str| Error::config("template", format!("{template:?}: {reason}"));
    if template.matches("{subject}").count() != 1 {
        return Err(bad("needs exactly one {subject} slot"));
    }
    if template.matches("{object}").count() != 1 {
        return Err(bad("needs exactly one {object} slot"));
    }
    let (_, after) = template.split_once("{subject}").expect("counted above");
    let gap = after.split("{object}").next().unwrap_or("");
    if !after.contains("{object}") || !gap.trim().is_empty() {
        return Err(bad("{object} must directly follow {subject}"));
    }
    if template.contains(LINE_SEPARATOR) {
        return Err(bad("must not contain the line separator"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates() {
        assert!(check_template("{subject} {object}").is_ok());
        assert!(check_template("plural {subject} {object} .").is_ok());
        assert!(check_template("{object} {subject}").is_err());
        assert!(check_template("{subject} is {object}").is_err());
        assert!(check_template("{subject} {subject} {object}").is_err());
        assert!(check_template("{subject}").is_err());
    }

    #[test]
    fn pairs_reject_duplicates_and_blanks() {
        assert!(RelationPair::new("a", vec!["b".into(), "b".into()]).is_err());
        assert!(RelationPair::new(" ", vec!["b".into()]).is_err());
        assert!(RelationPair::new("a", vec![]).is_err());
        let p = RelationPair::new("album", vec!["albums".into(), "records".into()]).unwrap();
        assert_eq!(p.object(), "albums");
    }

    #[test]
    fn categories_reject_repeated_subjects() {
        let p = RelationPair::new("a", vec!["b".into()]).unwrap();
        let r = RelationCategory::new("x", Group::Synthetic, DEFAULT_TEMPLATE, vec![p.clone(), p]);
        assert!(r.is_err());
    }
}
