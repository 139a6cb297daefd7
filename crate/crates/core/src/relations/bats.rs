//! Reader and writer for BATS-style category files.
//!
//! A category file holds one pair per line, `subject<TAB>object1/object2`.
//! An optional `# template: ...` line sets the prompt template; other `#`
//! lines and blank lines are ignored. Files live either directly in the
//! dataset directory or in group folders such as `1_Inflectional_morphology`.

use std::path::{Path, PathBuf};

use super::{Group, RelationCategory, RelationPair, DEFAULT_TEMPLATE};
use crate::error::{Error, Result};

const TEMPLATE_PREFIX: &str = "# template:";

pub fn parse_bats_dir(dir: &Path) -> Result<Vec<RelationCategory>> {
    let mut files = Vec::new();
    for entry in read_dir_sorted(dir)? {
        if entry.is_dir() {
            files.extend(read_dir_sorted(&entry)?.into_iter().filter(|p| is_category_file(p)));
        } else if is_category_file(&entry) {
            files.push(entry);
        }
    }
    if files.is_empty() {
        return Err(Error::Parse {
            path: dir.display().to_string(),
            line: 0,
            reason: "no category files".into(),
        });
    }
    files.iter().map(|f| parse_bats_file(f)).collect()
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn is_category_file(path: &Path) -> bool {
    path.is_file() && path.extension().is_some_and(|e| e == "txt")
}

pub fn parse_bats_file(path: &Path) -> Result<RelationCategory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let folder = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let label = path.display().to_string();
    let group = infer_group(&folder, &name).ok_or_else(|| Error::Parse {
        path: label.clone(),
        line: 0,
        reason: "cannot infer the relation group from folder or file name".into(),
    })?;
    parse_category(&label, &category_id(&name), group, &text)
}

/// `"I01 [noun - plural_reg]"` becomes `"I01-noun-plural_reg"`.
pub fn category_id(file_stem: &str) -> String {
    let joined = |s: &str| {
        s.split_whitespace()
            .filter(|w| *w != "-")
            .collect::<Vec<_>>()
            .join("-")
    };
    match (file_stem.find('['), file_stem.rfind(']')) {
        (Some(open), Some(close)) if open < close => {
            let code = joined(&file_stem[..open]);
            let inner = joined(&file_stem[open + 1..close]);
            if code.is_empty() {
                inner
            } else {
                format!("{code}-{inner}")
            }
        }
        _ => joined(file_stem),
    }
}

fn infer_group(folder: &str, file_stem: &str) -> Option<Group> {
    let folder = folder.to_lowercase();
    let named = [
        ("inflectional", Group::Inflectional),
        ("derivational", Group::Derivational),
        ("encyclopedic", Group::Encyclopedic),
        ("lexicographic", Group::Lexicographic),
    ];
    if let Some((_, g)) = named.iter().find(|(n, _)| folder.contains(n)) {
        return Some(*g);
    }
    match file_stem.chars().next() {
        Some('I') => Some(Group::Inflectional),
        Some('D') => Some(Group::Derivational),
        Some('E') => Some(Group::Encyclopedic),
        Some('L') => Some(Group::Lexicographic),
        _ => None,
    }
}

/// Parses the text of one category file. `label` is used in error messages.
pub fn parse_category(label: &str, id: &str, group: Group, text: &str) -> Result<RelationCategory> {
    let err = |line: usize, reason: String| Error::Parse {
        path: label.to_string(),
        line,
        reason,
    };
    let mut template: Option<String> = None;
    let mut pairs: Vec<RelationPair> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(TEMPLATE_PREFIX) {
            if template.is_some() {
                return Err(err(n, "second template line".into()));
            }
            let t = rest.trim().to_string();
            super::check_template(&t).map_err(|e| err(n, e.to_string()))?;
            template = Some(t);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let (subject, objects) = line
            .split_once('\t')
            .ok_or_else(|| err(n, "missing tab between subject and objects".into()))?;
        let subject = subject.trim();
        if subject.is_empty() {
            return Err(err(n, "empty subject".into()));
        }
        let mut list: Vec<String> = Vec::new();
        for o in objects.split('/').map(str::trim).filter(|o| !o.is_empty()) {
            if !list.iter().any(|x| x == o) {
                list.push(o.to_string());
            }
        }
        if list.is_empty() {
            return Err(err(n, format!("empty object list for {subject:?}")));
        }
        if pairs.iter().any(|p| p.subject == subject) {
            return Err(err(n, format!("duplicate subject {subject:?}")));
        }
        pairs.push(RelationPair::new(subject, list).map_err(|e| err(n, e.to_string()))?);
    }
    if pairs.is_empty() {
        return Err(err(0, "file has no pairs".into()));
    }
    let template = template.unwrap_or_else(|| DEFAULT_TEMPLATE.to_string());
    RelationCategory::new(id, group, template, pairs).map_err(|e| err(0, e.to_string()))
}

/// The normalized file text for a category: an optional template line, then
/// one pair per line.
pub fn serialize_category(category: &RelationCategory) -> String {
    let mut out = String::new();
    if category.template != DEFAULT_TEMPLATE {
        out.push_str(&format!("{TEMPLATE_PREFIX} {}\n", category.template));
    }
    for p in &category.pairs {
        out.push_str(&p.subject);
        out.push('\t');
        out.push_str(&p.objects.join("/"));
        out.push('\n');
    }
    out
}
