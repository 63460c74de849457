//! Hierarchical entity type labels.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A hierarchical type label such as `location/city`.
///
/// Level names are non-empty, lowercase and free of whitespace; the canonical
/// id joins them with `/`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityType {
    path: Vec<String>,
}

impl EntityType {
    pub fn new<I, S>(levels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let path: Vec<String> = levels.into_iter().map(Into::into).collect();
        if path.is_empty() {
            return Err(Error::Schema("entity type has an empty path".into()));
        }
        for level in &path {
            if level.is_empty() {
                return Err(Error::Schema(format!(
                    "empty level name in type {:?}",
                    path.join("/")
                )));
            }
            if level.chars().any(|c| c.is_whitespace() || c == '/') {
                return Err(Error::Schema(format!(
                    "level name {level:?} contains whitespace or '/'"
                )));
            }
            if level.chars().any(char::is_uppercase) {
                return Err(Error::Schema(format!(
                    "level name {level:?} is not lowercase"
                )));
            }
        }
        Ok(Self { path })
    }

    /// Parses a canonical id (`a/b/c`).
    pub fn parse(canonical_id: &str) -> Result<Self> {
        Self::new(canonical_id.split('/'))
    }

    pub fn path(&self) -> &[String] {
        &self.path
    }

    pub fn depth(&self) -> usize {
        self.path.len()
    }

    pub fn leaf(&self) -> &str {
        self.path.last().expect("non-empty path")
    }

    pub fn root(&self) -> &str {
        &self.path[0]
    }

    pub fn canonical_id(&self) -> String {
        self.path.join("/")
    }

    /// All non-empty prefixes, shortest first.
    pub fn prefixes(&self) -> impl Iterator<Item = String> + '_ {
        (1..=self.path.len()).map(move |n| self.path[..n].join("/"))
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_id())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl Serialize for EntityType {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.canonical_id())
    }
}

impl<'de> Deserialize<'de> for EntityType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Canonical ids of every non-empty prefix of `t`, e.g. `person/artist` gives
/// `{person, person/artist}`.
pub fn expand_hierarchy(t: &EntityType) -> Vec<String> {
    t.prefixes().collect()
}

/// The set of types a dataset is labelled with.
///
/// Types are kept sorted by canonical id, which fixes the order of every
/// per-type vector downstream (scores, head rows, verbalizer entries).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSchema {
    name: String,
    types: Vec<EntityType>,
    index: BTreeMap<String, usize>,
}

impl LabelSchema {
    pub fn from_types(name: impl Into<String>, types: Vec<EntityType>) -> Result<Self> {
        if types.is_empty() {
            return Err(Error::Schema("label schema has no types".into()));
        }
        let mut sorted = types;
        sorted.sort();
        let mut index = BTreeMap::new();
        for (i, t) in sorted.iter().enumerate() {
            if index.insert(t.canonical_id(), i).is_some() {
                return Err(Error::Schema(format!(
                    "duplicate canonical id {:?}",
                    t.canonical_id()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            types: sorted,
            index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn types(&self) -> &[EntityType] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn index_of(&self, t: &EntityType) -> Option<usize> {
        self.index.get(&t.canonical_id()).copied()
    }

    pub fn index_of_id(&self, canonical_id: &str) -> Option<usize> {
        self.index.get(canonical_id).copied()
    }

    pub fn contains(&self, t: &EntityType) -> bool {
        self.index_of(t).is_some()
    }

    /// Closest canonical id by edit distance, for error messages.
    pub fn nearest(&self, label: &str) -> Option<&str> {
        nearest_label(label, self.index.keys().map(String::as_str))
    }

    /// Schema without the given types (used for evaluation-time filtering).
    pub fn without(&self, excluded: &[EntityType]) -> Result<Self> {
        let kept = self
            .types
            .iter()
            .filter(|t| !excluded.contains(t))
            .cloned()
            .collect();
        Self::from_types(self.name.clone(), kept)
    }
}

pub(crate) fn nearest_label<'a>(
    label: &str,
    candidates: impl Iterator<Item = &'a str>,
) -> Option<&'a str> {
    let needle = label.to_lowercase();
    candidates.min_by(|a, b| {
        let da = strsim::levenshtein(&needle, a);
        let db = strsim::levenshtein(&needle, b);
        da.cmp(&db).then_with(|| a.cmp(b))
    })
}

/// Normalizes one raw dataset label into an [`EntityType`]: trims leading and
/// trailing separators, lowercases, and splits on `separator` (and `/`).
pub fn normalize_label(raw: &str, separator: &str) -> Result<EntityType> {
    if separator.is_empty() {
        return Err(Error::Config("label separator must be non-empty".into()));
    }
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(Error::Schema("empty label string".into()));
    }
    let unified = trimmed.replace(separator, "/").to_lowercase();
    let levels: Vec<&str> = unified.trim_matches('/').split('/').collect();
    EntityType::new(levels.iter().map(|l| l.trim().to_string()))
        .map_err(|e| Error::Schema(format!("label {raw:?}: {e}")))
}

/// Builds a schema from raw dataset labels. Distinct raw labels that normalize
/// to the same canonical id are rejected.
pub fn parse_label_schema(raw_labels: &[impl AsRef<str>], separator: &str) -> Result<LabelSchema> {
    if raw_labels.is_empty() {
        return Err(Error::Schema("no labels given".into()));
    }
    let mut seen: BTreeMap<String, (String, EntityType)> = BTreeMap::new();
    for raw in raw_labels {
        let raw = raw.as_ref();
        let t = normalize_label(raw, separator)?;
        let id = t.canonical_id();
        match seen.get(&id) {
            Some((first, _)) if first != raw => {
                return Err(Error::Schema(format!(
                    "duplicate canonical id {id:?} (from {first:?} and {raw:?})"
                )));
            }
            Some(_) => {}
            None => {
                seen.insert(id, (raw.to_string(), t));
            }
        }
    }
    LabelSchema::from_types("schema", seen.into_values().map(|(_, t)| t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_slash_labels() {
        let s = parse_label_schema(&["Location/City"], "/").unwrap();
        assert_eq!(s.types()[0].path(), ["location", "city"]);
    }

    #[test]
    fn parses_dash_labels() {
        let s = parse_label_schema(&["person-artist"], "-").unwrap();
        assert_eq!(s.types()[0].path(), ["person", "artist"]);
    }

    #[test]
    fn case_collision_is_an_error() {
        let err = parse_label_schema(&["A/B", "a/b"], "/").unwrap_err();
        assert!(err.to_string().contains("\"a/b\""), "{err}");
    }

    #[test]
    fn empty_label_is_an_error() {
        assert!(matches!(
            parse_label_schema(&[""], "/"),
            Err(Error::Schema(_))
        ));
        assert!(parse_label_schema(&["a//b"], "/").is_err());
    }

    #[test]
    fn leading_slash_is_stripped() {
        let s = parse_label_schema(&["/organization/company"], "/").unwrap();
        assert_eq!(s.types()[0].canonical_id(), "organization/company");
    }

    #[test]
    fn hierarchy_prefixes() {
        let t = EntityType::parse("person/artist").unwrap();
        assert_eq!(expand_hierarchy(&t), ["person", "person/artist"]);
        let t = EntityType::parse("organization").unwrap();
        assert_eq!(expand_hierarchy(&t), ["organization"]);
        let t = EntityType::parse("a/b/c").unwrap();
        assert_eq!(expand_hierarchy(&t), ["a", "a/b", "a/b/c"]);
    }

    #[test]
    fn rejects_bad_levels() {
        assert!(EntityType::new(Vec::<String>::new()).is_err());
        assert!(EntityType::new(["Upper"]).is_err());
        assert!(EntityType::new(["has space"]).is_err());
    }

    #[test]
    fn nearest_match() {
        let s = parse_label_schema(&["location/city", "person/artist"], "/").unwrap();
        assert_eq!(s.nearest("location/cty"), Some("location/city"));
    }

    proptest! {
        #[test]
        fn canonical_id_round_trips(levels in proptest::collection::vec("[a-z][a-z_-]{0,8}", 1..4)) {
            let t = EntityType::new(levels.clone()).unwrap();
            let back = EntityType::parse(&t.canonical_id()).unwrap();
            prop_assert_eq!(back.path(), &levels[..]);
            prop_assert_eq!(expand_hierarchy(&t).len(), t.depth());
        }
    }
}
