use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::title::{normalize_title, normalize_title_with_year, strip_trailing_year};
use super::CorpusError;
use crate::jsonl::id_string;

/// One catalog entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    #[serde(deserialize_with = "id_string")]
    pub item_id: String,
    pub title: String,
    #[serde(default)]
    pub year: Option<i32>,
    #[serde(default, rename = "abstract")]
    pub abstract_text: String,
}

impl Item {
    /// Title with the release year attached, e.g. `"Heat (1995)"`.
    ///
    /// Titles that already carry a trailing `(YYYY)` are returned as-is.
    pub fn display_title(&self) -> String {
        match (strip_trailing_year(&self.title).1, self.year) {
            (None, Some(year)) => format!("{} ({year})", self.title.trim()),
            _ => self.title.trim().to_string(),
        }
    }

    /// `"TITLE (YEAR): ABSTRACT"`, or the bare display title when the
    /// abstract is empty.
    pub fn describe(&self) -> String {
        let abstract_text = self.abstract_text.trim();
        if abstract_text.is_empty() {
            self.display_title()
        } else {
            format!("{}: {}", self.display_title(), abstract_text)
        }
    }

    /// Text embedded into the retrieval index: `"TITLE. ABSTRACT"`.
    pub fn index_text(&self) -> String {
        let abstract_text = self.abstract_text.trim();
        if abstract_text.is_empty() {
            self.title.trim().to_string()
        } else {
            format!("{}. {}", self.title.trim(), abstract_text)
        }
    }

    fn year_hint(&self) -> Option<i32> {
        self.year.or_else(|| strip_trailing_year(&self.title).1)
    }
}

/// The universal item set, immutable after load.
#[derive(Debug, Clone, Default)]
pub struct ItemCatalog {
    items: Vec<Item>,
    by_id: HashMap<String, usize>,
    /// year-free normalized title -> items sharing it
    by_title: HashMap<String, Vec<usize>>,
    /// per item lookup key; carries the year only when the base title is shared
    keys: Vec<String>,
}

impl ItemCatalog {
    /// Builds a catalog from items, rejecting duplicate ids and empty titles.
    pub fn from_items(items: Vec<Item>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(items.len());
        for (pos, item) in items.iter().enumerate() {
            if item.title.trim().is_empty() {
                return Err(CorpusError::Record {
                    line: pos + 1,
                    message: format!("empty title for item `{}`", item.item_id),
                });
            }
            if let Some(first) = by_id.insert(item.item_id.clone(), pos) {
                return Err(CorpusError::DuplicateItem {
                    item_id: item.item_id.clone(),
                    first_line: first + 1,
                    second_line: pos + 1,
                });
            }
        }

        let mut by_title: HashMap<String, Vec<usize>> = HashMap::new();
        for (pos, item) in items.iter().enumerate() {
            by_title.entry(normalize_title(&item.title)).or_default().push(pos);
        }
        let keys = items
            .iter()
            .map(|item| {
                let base = normalize_title(&item.title);
                match item.year_hint() {
                    Some(year) if by_title[&base].len() > 1 => format!("{base} {year}"),
                    _ => base,
                }
            })
            .collect();

        Ok(Self {
            items,
            by_id,
            by_title,
            keys,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, item_id: &str) -> Option<&Item> {
        self.by_id.get(item_id).map(|&pos| &self.items[pos])
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.by_id.contains_key(item_id)
    }

    /// Lookup key of an item: its normalized title, plus the year when
    /// another catalog item shares the same normalized title.
    pub fn lookup_key(&self, item_id: &str) -> Option<&str> {
        self.by_id.get(item_id).map(|&pos| self.keys[pos].as_str())
    }

    /// Items whose normalized title equals that of `raw`.
    ///
    /// When several items share the title, a year in `raw` narrows the
    /// result; without one all of them are returned in catalog order.
    pub fn find_by_title(&self, raw: &str) -> Vec<&Item> {
        let base = normalize_title(raw);
        let Some(positions) = self.by_title.get(&base) else {
            return Vec::new();
        };
        if positions.len() > 1 {
            let with_year = normalize_title_with_year(raw);
            let narrowed: Vec<&Item> = positions
                .iter()
                .filter(|&&p| self.keys[p] == with_year)
                .map(|&p| &self.items[p])
                .collect();
            if !narrowed.is_empty() {
                return narrowed;
            }
        }
        positions.iter().map(|&p| &self.items[p]).collect()
    }

    /// Resolves a dialogue reference: an exact item id first, otherwise a
    /// title that identifies exactly one item.
    pub fn resolve(&self, reference: &str) -> Option<&Item> {
        if let Some(item) = self.get(reference) {
            return Some(item);
        }
        match self.find_by_title(reference).as_slice() {
            [only] => Some(only),
            _ => None,
        }
    }
}

/// Reads line-delimited `{item_id, title, year, abstract}` records.
pub fn load_catalog<R: BufRead>(source: R) -> Result<ItemCatalog, CorpusError> {
    let mut items = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: Item = serde_json::from_str(&line).map_err(|e| CorpusError::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        if item.title.trim().is_empty() {
            return Err(CorpusError::Record {
                line: line_no,
                message: format!("empty title for item `{}`", item.item_id),
            });
        }
        if let Some(&first) = seen.get(&item.item_id) {
            return Err(CorpusError::DuplicateItem {
                item_id: item.item_id,
                first_line: first,
                second_line: line_no,
            });
        }
        seen.insert(item.item_id.clone(), line_no);
        items.push(item);
    }
    ItemCatalog::from_items(items)
}
