//! Knowledge base of items × property columns and the preference bias term.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::encoding::tokenize;
use crate::error::{Error, Result};

/// One `<item> R_<column> <value>` fact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbFact {
    pub item: String,
    pub column: String,
    pub value: String,
}

impl KbFact {
    pub fn new(item: &str, column: &str, value: &str) -> Self {
        KbFact {
            item: item.into(),
            column: column.into(),
            value: value.into(),
        }
    }

    /// Parses `<item> R_<column> <value>`, with an optional leading line number.
    pub fn parse(line: &str) -> Option<KbFact> {
        let mut parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() == 4 && parts[0].parse::<usize>().is_ok() {
            parts.remove(0);
        }
        match parts.as_slice() {
            [item, col, value] => col.strip_prefix("R_").map(|c| KbFact::new(item, c, value)),
            _ => None,
        }
    }

    pub fn to_line(&self) -> String {
        format!("{} R_{} {}", self.item, self.column, self.value)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MentionRule {
    /// The item's name token occurs in the context or query.
    #[default]
    ItemName,
    /// The item's name or any of its entity values occurs.
    AnyEntityOfItem,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KnowledgeBase {
    columns: Vec<String>,
    items: Vec<String>,
    /// `values[i][j]` is `e_{i,j}`.
    values: Vec<Vec<String>>,
    #[serde(skip)]
    entity_index: HashMap<String, (usize, usize)>,
    #[serde(skip)]
    item_index: HashMap<String, usize>,
}

impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        self.columns == other.columns && self.items == other.items && self.values == other.values
    }
}

impl KnowledgeBase {
    /// Builds the KB; columns are ordered by first appearance.
    pub fn load(records: &[KbFact]) -> Result<Self> {
        let mut columns: Vec<String> = Vec::new();
        let mut items: Vec<String> = Vec::new();
        let mut cells: Vec<BTreeMap<usize, String>> = Vec::new();
        let mut item_pos: HashMap<&str, usize> = HashMap::new();
        for fact in records {
            let j = match columns.iter().position(|c| c == &fact.column) {
                Some(j) => j,
                None => {
                    columns.push(fact.column.clone());
                    columns.len() - 1
                }
            };
            let i = *item_pos.entry(fact.item.as_str()).or_insert_with(|| {
                items.push(fact.item.clone());
                cells.push(BTreeMap::new());
                items.len() - 1
            });
            if cells[i].insert(j, fact.value.clone()).is_some() {
                return Err(Error::data(format!(
                    "item {} has two values for column {}",
                    fact.item, fact.column
                )));
            }
        }
        if columns.is_empty() {
            return Err(Error::data("knowledge base has no columns"));
        }
        let mut values = Vec::with_capacity(items.len());
        for (i, row) in cells.into_iter().enumerate() {
            if row.len() != columns.len() {
                let missing: Vec<&str> = (0..columns.len())
                    .filter(|j| !row.contains_key(j))
                    .map(|j| columns[j].as_str())
                    .collect();
                return Err(Error::data(format!(
                    "item {} lacks columns {missing:?}",
                    items[i]
                )));
            }
            values.push(row.into_values().collect());
        }
        let mut kb = KnowledgeBase {
            columns,
            items,
            values,
            entity_index: HashMap::new(),
            item_index: HashMap::new(),
        };
        kb.reindex()?;
        Ok(kb)
    }

    pub(crate) fn reindex(&mut self) -> Result<()> {
        self.entity_index.clear();
        self.item_index.clear();
        for (i, row) in self.values.iter().enumerate() {
            for (j, value) in row.iter().enumerate() {
                let key = normalize(value);
                if self.entity_index.insert(key, (i, j)).is_some() {
                    return Err(Error::data(format!("duplicate entity {value}")));
                }
            }
        }
        for (i, name) in self.items.iter().enumerate() {
            self.item_index.insert(normalize(name), i);
        }
        Ok(())
    }

    /// An empty KB with the given columns (used when a corpus has no KB file).
    pub fn empty(columns: Vec<String>) -> Self {
        KnowledgeBase {
            columns,
            items: Vec::new(),
            values: Vec::new(),
            entity_index: HashMap::new(),
            item_index: HashMap::new(),
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    /// `K`
    pub fn column_count(&self) -> usize {
        self.columns.len()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn entity(&self, item: usize, column: usize) -> &str {
        &self.values[item][column]
    }

    pub fn entity_count(&self) -> usize {
        self.entity_index.len()
    }

    /// `(item, column)` of an entity string.
    pub fn resolve(&self, entity: &str) -> Option<(usize, usize)> {
        self.entity_index.get(&normalize(entity)).copied()
    }

    pub fn item_id(&self, name: &str) -> Option<usize> {
        self.item_index.get(&normalize(name)).copied()
    }

    pub fn facts(&self) -> Vec<KbFact> {
        let mut out = Vec::new();
        for (i, item) in self.items.iter().enumerate() {
            for (j, col) in self.columns.iter().enumerate() {
                out.push(KbFact::new(item, col, &self.values[i][j]));
            }
        }
        out
    }

    pub fn facts_of(&self, item: usize) -> Vec<KbFact> {
        self.columns
            .iter()
            .enumerate()
            .map(|(j, col)| KbFact::new(&self.items[item], col, &self.values[item][j]))
            .collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for fact in self.facts() {
            writeln!(w, "{}", fact.to_line())?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut facts = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fact = KbFact::parse(&line).ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected `<item> R_<column> <value>`, got {line:?}"),
            })?;
            facts.push(fact);
        }
        KnowledgeBase::load(&facts)
    }
}

fn normalize(s: &str) -> String {
    s.to_lowercase()
}

/// `(item, column)` of the single KB entity in a candidate, if any.
pub fn candidate_entity(
    candidate_text: &str,
    kb: &KnowledgeBase,
) -> Result<Option<(usize, usize)>> {
    let found: BTreeSet<(usize, usize)> = tokenize(candidate_text)
        .iter()
        .filter_map(|t| kb.entity_index.get(t).copied())
        .collect();
    match found.len() {
        0 => Ok(None),
        1 => Ok(found.into_iter().next()),
        _ => Err(Error::data(format!(
            "candidate {candidate_text:?} contains more than one KB entity"
        ))),
    }
}

/// Items mentioned in any context utterance or in the current query.
pub fn mentioned_items<'a>(
    utterances: impl IntoIterator<Item = &'a str>,
    kb: &KnowledgeBase,
    rule: MentionRule,
) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for text in utterances {
        for token in tokenize(text) {
            if let Some(&i) = kb.item_index.get(&token) {
                out.insert(i);
            } else if rule == MentionRule::AnyEntityOfItem {
                if let Some(&(i, _)) = kb.entity_index.get(&token) {
                    out.insert(i);
                }
            }
        }
    }
    out
}

/// `b_k = v_j` when candidate `k` holds entity `e_{i,j}` and item `i` is
/// mentioned; `0` otherwise.
pub fn bias_from_coords(
    preference: &[f64],
    candidate_coords: &[Option<(usize, usize)>],
    mentioned: &BTreeSet<usize>,
) -> Vec<f64> {
    candidate_coords
        .iter()
        .map(|c| match c {
            Some((i, j)) if mentioned.contains(i) => preference[*j],
            _ => 0.0,
        })
        .collect()
}

/// Bias vector over `candidates` for a conversation with the given context.
pub fn bias_vector<'a>(
    preference: &[f64],
    candidates: &[&str],
    context: impl IntoIterator<Item = &'a str>,
    kb: &KnowledgeBase,
    rule: MentionRule,
) -> Result<Vec<f64>> {
    if preference.len() != kb.column_count() {
        return Err(Error::invalid(format!(
            "preference vector has length {}, KB has {} columns",
            preference.len(),
            kb.column_count()
        )));
    }
    let coords = candidates
        .iter()
        .map(|c| candidate_entity(c, kb))
        .collect::<Result<Vec<_>>>()?;
    let mentioned = mentioned_items(context, kb, rule);
    Ok(bias_from_coords(preference, &coords, &mentioned))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn place_kb() -> KnowledgeBase {
        KnowledgeBase::load(&[
            KbFact::new("The_Place", "Phone", "The_Place_Phone"),
            KbFact::new("The_Place", "Social", "The_Place_Social"),
            KbFact::new("The_Place", "Address", "The_Place_Address"),
            KbFact::new("Other", "Phone", "Other_Phone"),
            KbFact::new("Other", "Social", "Other_Social"),
            KbFact::new("Other", "Address", "Other_Address"),
        ])
        .unwrap()
    }

    #[test]
    fn load_builds_reverse_index() {
        let kb = place_kb();
        assert_eq!(kb.column_count(), 3);
        assert_eq!(kb.entity_count(), 6);
        assert_eq!(kb.resolve("The_Place_Phone"), Some((0, 0)));
        assert_eq!(kb.items()[0], "The_Place");
        assert_eq!(kb.columns()[0], "Phone");
    }

    #[test]
    fn duplicate_entity_is_rejected() {
        let err = KnowledgeBase::load(&[
            KbFact::new("a", "phone", "shared"),
            KbFact::new("b", "phone", "shared"),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("shared"));
    }

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(KnowledgeBase::load(&[
            KbFact::new("a", "phone", "a_phone"),
            KbFact::new("a", "social", "a_social"),
            KbFact::new("b", "phone", "b_phone"),
        ])
        .is_err());
    }

    #[test]
    fn candidate_entity_resolution() {
        let kb = place_kb();
        assert_eq!(
            candidate_entity("Here is the information: The_Place_Phone", &kb).unwrap(),
            Some((0, 0))
        );
        assert_eq!(
            candidate_entity("what price range are you looking for", &kb).unwrap(),
            None
        );
        assert!(candidate_entity("The_Place_Phone or Other_Phone", &kb).is_err());
    }

    #[test]
    fn mention_rules() {
        let kb = place_kb();
        let m = mentioned_items(
            ["The_Place is a nice restaurant"],
            &kb,
            MentionRule::ItemName,
        );
        assert_eq!(m, BTreeSet::from([0]));
        assert!(mentioned_items([], &kb, MentionRule::ItemName).is_empty());

        // An entity of the item is not a mention of its name.
        let ctx = ["call The_Place_Phone"];
        assert!(mentioned_items(ctx, &kb, MentionRule::ItemName).is_empty());
        assert_eq!(
            mentioned_items(ctx, &kb, MentionRule::AnyEntityOfItem),
            BTreeSet::from([0])
        );
    }

    #[test]
    fn bias_examples() {
        let kb = place_kb();
        let v = [0.7, 0.2, 0.1];
        let cands = [
            "Here is the information: The_Place_Phone",
            "what price range are you looking for",
            "Here is the information: Other_Phone",
        ];
        let b = bias_vector(&v, &cands, ["i like The_Place"], &kb, MentionRule::ItemName).unwrap();
        assert_eq!(b, vec![0.7, 0.0, 0.0]);
        assert!(bias_vector(&[1.0], &cands, [], &kb, MentionRule::ItemName).is_err());
    }

    #[test]
    fn kb_file_round_trip() {
        let kb = place_kb();
        let mut buf = Vec::new();
        kb.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("The_Place R_Phone The_Place_Phone\n"));
        assert_eq!(KnowledgeBase::read_from(&buf[..]).unwrap(), kb);
        assert!(KnowledgeBase::read_from(&b"x phone y\n"[..]).is_err());
        // numbered bAbI-style lines are accepted
        let kb2 = KnowledgeBase::read_from(&b"1 a R_phone a_phone\n"[..]).unwrap();
        assert_eq!(kb2.resolve("a_phone"), Some((0, 0)));
    }

    proptest! {
        #[test]
        fn bias_is_zero_for_zero_preference_and_monotone(
            v in proptest::collection::vec(0.0f64..5.0, 3),
            bump in 0.0f64..3.0,
            col in 0usize..3,
            mention_mask in 0u8..4,
        ) {
            let kb = place_kb();
            let coords: Vec<Option<(usize, usize)>> = vec![
                Some((0, 0)), Some((0, 1)), Some((1, 2)), None, Some((0, 0)),
            ];
            let mentioned: BTreeSet<usize> = (0..2).filter(|i| mention_mask & (1 << i) != 0).collect();
            let zero = bias_from_coords(&[0.0; 3], &coords, &mentioned);
            prop_assert!(zero.iter().all(|&x| x == 0.0));

            let b = bias_from_coords(&v, &coords, &mentioned);
            let mut v2 = v.clone();
            v2[col] += bump;
            let b2 = bias_from_coords(&v2, &coords, &mentioned);
            for (x, y) in b.iter().zip(&b2) {
                prop_assert!(y >= x);
                prop_assert!(*x >= 0.0);
            }
            // same coordinates, same bias
            prop_assert_eq!(b[0], b[4]);
            prop_assert_eq!(b[3], 0.0);
            let _ = kb;
        }
    }
}
