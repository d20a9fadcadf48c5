//! Sectioned `key = value` text with line tracking.
//!
//! `#` and `;` start comments, blank lines are ignored and keys are case
//! sensitive. Keys before the first `[section]` header are rejected.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Dotted `section.key` location of a value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct KeyPath {
    pub section: String,
    pub key: String,
}

impl KeyPath {
    pub fn new(section: &str, key: &str) -> Self {
        Self { section: section.to_string(), key: key.to_string() }
    }
}

impl fmt::Display for KeyPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.section, self.key)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: `{key}` is set twice (first on line {first})")]
    Duplicate { key: KeyPath, line: usize, first: usize },
    #[error("missing required key `{0}`")]
    Missing(KeyPath),
    #[error("line {line}: unknown key `{key}`")]
    Unknown { key: KeyPath, line: usize },
    #[error("line {line}: `{key}`: {msg}")]
    Invalid { key: KeyPath, line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub value: String,
    pub line: usize,
}

/// A parsed document; lookups remove entries so leftovers can be reported.
#[derive(Debug, Clone, Default)]
pub struct Ini {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self, SchemaError> {
        let mut doc = Ini::default();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.find(['#', ';']).map_or(raw, |c| &raw[..c]).trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| !n.is_empty())
                    .ok_or_else(|| SchemaError::Syntax { line, msg: format!("malformed section header `{content}`") })?;
                doc.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| SchemaError::Syntax { line, msg: format!("expected `key = value`, got `{content}`") })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(SchemaError::Syntax { line, msg: "empty key".into() });
            }
            let section =
                current.as_ref().ok_or_else(|| SchemaError::Syntax { line, msg: format!("`{key}` appears before any section") })?;
            let entries = doc.sections.get_mut(section).expect("section registered on its header");
            if let Some(prev) = entries.get(key) {
                return Err(SchemaError::Duplicate { key: KeyPath::new(section, key), line, first: prev.line });
            }
            entries.insert(key.to_string(), Entry { value: value.trim().to_string(), line });
        }
        Ok(doc)
    }

    pub fn take(&mut self, section: &str, key: &str) -> Option<Entry> {
        self.sections.get_mut(section)?.remove(key)
    }

    pub fn require(&mut self, section: &str, key: &str) -> Result<Entry, SchemaError> {
        self.take(section, key).ok_or_else(|| SchemaError::Missing(KeyPath::new(section, key)))
    }

    /// Removes and returns every remaining entry of `section` in key order.
    pub fn drain_section(&mut self, section: &str) -> Vec<(String, Entry)> {
        self.sections.get_mut(section).map(std::mem::take).unwrap_or_default().into_iter().collect()
    }

    /// The first entry nobody asked for, if any.
    pub fn first_leftover(&self) -> Option<(KeyPath, usize)> {
        self.sections
            .iter()
            .flat_map(|(s, entries)| entries.iter().map(move |(k, e)| (KeyPath::new(s, k), e.line)))
            .min_by_key(|(_, line)| *line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rendered_documents_parse_back(
            doc in prop::collection::btree_map("[a-z][a-z0-9_]{0,6}", prop::collection::btree_map("[A-Za-z][A-Za-z0-9_]{0,6}", "[A-Za-z0-9_.,+ -]{0,12}", 0..5), 1..4)
        ) {
            let mut text = String::new();
            let mut expected = Vec::new();
            for (section, entries) in &doc {
                text.push_str(&format!("[{section}]\n"));
                for (k, v) in entries {
                    text.push_str(&format!("  {k} =  {v}   # note\n"));
                    expected.push((section.clone(), k.clone(), v.trim().to_string(), text.lines().count()));
                }
            }
            let mut ini = Ini::parse(&text).unwrap();
            for (s, k, v, line) in expected {
                prop_assert_eq!(ini.take(&s, &k), Some(Entry { value: v, line }));
            }
            prop_assert_eq!(ini.first_leftover(), None);
        }
    }

    #[test]
    fn parses_sections_comments_and_lines() {
        let mut doc = Ini::parse("# header\n[horizon]\nN = 17 ; inline\n\nTs=0.02\n[model]\nname = two_dof\n").unwrap();
        assert_eq!(doc.take("horizon", "N"), Some(Entry { value: "17".into(), line: 3 }));
        assert_eq!(doc.require("horizon", "Ts").unwrap().line, 5);
        assert_eq!(doc.first_leftover(), Some((KeyPath::new("model", "name"), 7)));
    }

    #[test]
    fn missing_key_names_the_path() {
        let mut doc = Ini::parse("[horizon]\nTs = 0.02\n").unwrap();
        let err = doc.require("horizon", "N").unwrap_err();
        assert_eq!(err.to_string(), "missing required key `horizon.N`");
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(Ini::parse("N = 3\n"), Err(SchemaError::Syntax { line: 1, .. })));
        assert!(matches!(Ini::parse("[a]\njunk\n"), Err(SchemaError::Syntax { line: 2, .. })));
        assert!(matches!(Ini::parse("[a\n"), Err(SchemaError::Syntax { line: 1, .. })));
        assert!(matches!(Ini::parse("[a]\nx = 1\nx = 2\n"), Err(SchemaError::Duplicate { line: 3, first: 2, .. })));
    }
}
