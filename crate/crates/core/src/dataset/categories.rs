use std::collections::BTreeMap;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{read_to_string, Error, Result};

/// The sixteen answer categories, in the order that defines category ids.
pub const CATEGORIES: [&str; 16] = [
    "activity", "animal", "attribute", "binary", "color", "count", "food", "location", "material", "object", "other",
    "predicate", "shape", "spatial", "stuff", "time",
];

pub fn category_id(name: &str) -> Option<usize> {
    CATEGORIES.iter().position(|&c| c == name)
}

pub fn category_name(id: usize) -> Option<&'static str> {
    CATEGORIES.get(id).copied()
}

/// Lookup key: NFC, trimmed, inner whitespace collapsed, lowercased.
pub fn normalize_answer(answer: &str) -> String {
    let nfc: String = answer.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Answer → category id mapping loaded from `answer<TAB>category` rows.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CategoryMap {
    entries: BTreeMap<String, usize>,
}

impl CategoryMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, answer: &str, category: usize) {
        self.entries.insert(normalize_answer(answer), category);
    }

    pub fn lookup(&self, answer: &str) -> Option<usize> {
        self.entries.get(&normalize_answer(answer)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn distinct_categories(&self) -> usize {
        let mut seen = [false; CATEGORIES.len()];
        self.entries.values().for_each(|&c| seen[c] = true);
        seen.iter().filter(|&&s| s).count()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut map = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let (answer, category) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `answer<TAB>category`".into()))?;
            let category = category.trim();
            let id = category_id(category).ok_or_else(|| {
                err(format!("unknown category `{category}` (expected one of {})", CATEGORIES.join(", ")))
            })?;
            if normalize_answer(answer).is_empty() {
                return Err(err("empty answer".into()));
            }
            if let Some(prev) = map.lookup(answer).filter(|&p| p != id) {
                return Err(err(format!(
                    "answer `{answer}` already mapped to `{}`",
                    CATEGORIES[prev]
                )));
            }
            map.insert(answer, id);
        }
        Ok(map)
    }

    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|(a, &c)| format!("{a}\t{}\n", CATEGORIES[c]))
            .collect()
    }
}

pub fn load_category_map(path: &Path) -> Result<CategoryMap> {
    CategoryMap::parse(&read_to_string(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_known_and_rejects_unknown() {
        let p = Path::new("map.tsv");
        let m = CategoryMap::parse("লাল\tcolor\n", p).unwrap();
        assert_eq!(m.lookup("লাল"), category_id("color"));
        match CategoryMap::parse("a\tcount\nx\tweather\n", p).unwrap_err() {
            Error::Parse { line, reason, .. } => {
                assert_eq!(line, 2);
                assert!(reason.contains("weather"));
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn lookup_is_normalized() {
        let m = CategoryMap::parse("Light  Blue\tcolor\n", Path::new("m")).unwrap();
        assert_eq!(m.lookup("  light blue "), category_id("color"));
        assert_eq!(m.lookup("lightblue"), None);
    }

    #[test]
    fn conflicting_rows_are_rejected() {
        assert!(CategoryMap::parse("a\tcolor\na\tcount\n", Path::new("m")).is_err());
        assert!(CategoryMap::parse("a\tcolor\na\tcolor\n", Path::new("m")).is_ok());
    }

    #[test]
    fn five_hundred_rows_cover_sixteen_categories() {
        let text: String = (0..500).map(|i| format!("answer{i}\t{}\n", CATEGORIES[i % 16])).collect();
        let m = CategoryMap::parse(&text, Path::new("m")).unwrap();
        assert_eq!(m.len(), 500);
        assert_eq!(m.distinct_categories(), 16);
    }
}
