//! Label-word sets per entity type.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{EntityType, LabelSchema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelWord {
    pub word: String,
    pub weight: f64,
}

/// Ranked related words per head word, loaded from a JSON map
/// `{"city": ["metropolis", "town", ...], ...}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelatedWordSource {
    lookup: BTreeMap<String, Vec<String>>,
}

impl RelatedWordSource {
    pub fn new(lookup: BTreeMap<String, Vec<String>>) -> Self {
        Self { lookup }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
    }

    pub fn related(&self, word: &str) -> &[String] {
        self.lookup.get(word).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Label words for every type of a schema, with importance weights, plus the
/// union vocabulary over all types in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct Verbalizer {
    entries: Vec<(EntityType, Vec<LabelWord>)>,
    union: Vec<String>,
    union_index: HashMap<String, usize>,
    // per type: (union index, weight)
    slots: Vec<Vec<usize>>,
    shared_base_words: Vec<String>,
}

impl Verbalizer {
    /// Builds a verbalizer from explicit word lists. Types are ordered by
    /// canonical id.
    pub fn from_entries(mut entries: Vec<(EntityType, Vec<LabelWord>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("verbalizer has no types".into()));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::Config(format!("type {} listed twice", pair[0].0)));
            }
        }
        let mut union = Vec::new();
        let mut union_index = HashMap::new();
        let mut slots = Vec::with_capacity(entries.len());
        for (t, words) in &entries {
            if words.is_empty() {
                return Err(Error::Config(format!("type {t} has no label words")));
            }
            if words
                .iter()
                .any(|w| !w.weight.is_finite() || w.weight < 0.0)
            {
                return Err(Error::Config(format!(
                    "type {t} has a negative or non-finite weight"
                )));
            }
            if words.iter().all(|w| w.weight == 0.0) {
                return Err(Error::Config(format!("type {t} has only zero weights")));
            }
            let mut row = Vec::with_capacity(words.len());
            for w in words {
                if w.word.is_empty() {
                    return Err(Error::Config(format!("type {t} has an empty label word")));
                }
                let idx = *union_index.entry(w.word.clone()).or_insert_with(|| {
                    union.push(w.word.clone());
                    union.len() - 1
                });
                if row.contains(&idx) {
                    return Err(Error::Config(format!(
                        "type {t} repeats label word {:?}",
                        w.word
                    )));
                }
                row.push(idx);
            }
            slots.push(row);
        }
        Ok(Self {
            entries,
            union,
            union_index,
            slots,
            shared_base_words: Vec::new(),
        })
    }

    pub fn types(&self) -> impl Iterator<Item = &EntityType> {
        self.entries.iter().map(|(t, _)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(EntityType, Vec<LabelWord>)] {
        &self.entries
    }

    pub fn words(&self, t: &EntityType) -> Option<&[LabelWord]> {
        self.entries
            .binary_search_by(|(e, _)| e.cmp(t))
            .ok()
            .map(|i| self.entries[i].1.as_slice())
    }

    pub fn union_vocabulary(&self) -> &[String] {
        &self.union
    }

    pub fn union_position(&self, word: &str) -> Option<usize> {
        self.union_index.get(word).copied()
    }

    /// Union-vocabulary positions of each type's words, in word order.
    pub fn slots(&self) -> &[Vec<usize>] {
        &self.slots
    }

    /// Base words that several types share (e.g. a common parent level).
    pub fn shared_base_words(&self) -> &[String] {
        &self.shared_base_words
    }

    /// The schema this verbalizer covers.
    pub fn schema(&self) -> LabelSchema {
        LabelSchema::from_types("verbalizer", self.types().cloned().collect())
            .expect("verbalizer types are unique and non-empty")
    }

    /// Flattened weights, type by type.
    pub fn weights(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, ws)| ws.iter().map(|w| w.weight))
            .collect()
    }

    pub fn weight_count(&self) -> usize {
        self.entries.iter().map(|(_, ws)| ws.len()).sum()
    }

    /// Overwrites the weights from a flattened vector, clamping at zero. A type
    /// whose weights all clamp to zero keeps a floor of `1e-6` on its first word
    /// so that it still scores.
    pub fn set_weights(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.weight_count() {
            return Err(Error::Config(format!(
                "expected {} weights, got {}",
                self.weight_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for (_, ws) in &mut self.entries {
            for w in ws.iter_mut() {
                w.weight = it.next().copied().unwrap_or(0.0).max(0.0);
            }
            if ws.iter().all(|w| w.weight == 0.0) {
                ws[0].weight = 1e-6;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<String, Vec<(String, f64)>> = self
            .entries
            .iter()
            .map(|(t, ws)| {
                (
                    t.canonical_id(),
                    ws.iter().map(|w| (w.word.clone(), w.weight)).collect(),
                )
            })
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, Vec<(String, f64)>> = serde_json::from_str(text)?;
        let entries = map
            .into_iter()
            .map(|(id, ws)| {
                let t = EntityType::parse(&id)?;
                let words = ws
                    .into_iter()
                    .map(|(word, weight)| LabelWord { word, weight })
                    .collect();
                Ok((t, words))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_entries(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::data(path, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

fn is_single_word(w: &str) -> bool {
    !w.is_empty() && !w.chars().any(char::is_whitespace)
}

/// Builds the verbalizer for a schema.
///
/// Every level name of a type's path is a base word. With `expansion_k > 0`
/// up to `expansion_k` related words of the leaf level are appended, skipping
/// multi-word entries and words already held by another type. All weights
/// start at 1.
pub fn build_verbalizer(
    schema: &LabelSchema,
    source: Option<&RelatedWordSource>,
    expansion_k: usize,
) -> Result<Verbalizer> {
    if expansion_k > 0 && source.is_none() {
        return Err(Error::Config(
            "related-word expansion requested without a related-word source".into(),
        ));
    }

    let mut lists: Vec<Vec<String>> = Vec::with_capacity(schema.len());
    // word -> indices of types holding it
    let mut owners: HashMap<String, BTreeSet<usize>> = HashMap::new();
    for (i, t) in schema.types().iter().enumerate() {
        let mut words: Vec<String> = Vec::new();
        for level in t.path() {
            if !words.contains(level) {
                words.push(level.clone());
                owners.entry(level.clone()).or_default().insert(i);
            }
        }
        lists.push(words);
    }

    let mut shared: Vec<String> = owners
        .iter()
        .filter(|(_, o)| o.len() > 1)
        .map(|(w, _)| w.clone())
        .collect();
    shared.sort();

    if let Some(source) = source.filter(|_| expansion_k > 0) {
        for (i, t) in schema.types().iter().enumerate() {
            let mut added = 0;
            for cand in source.related(t.leaf()) {
                if added == expansion_k {
                    break;
                }
                let cand = cand.trim();
                if !is_single_word(cand) || lists[i].iter().any(|w| w == cand) {
                    continue;
                }
                if owners.get(cand).is_some_and(|o| o.iter().any(|&j| j != i)) {
                    log::debug!("skipping related word {cand:?} for {t}: held by another type");
                    continue;
                }
                lists[i].push(cand.to_string());
                owners.entry(cand.to_string()).or_default().insert(i);
                added += 1;
            }
        }
    }

    let entries = schema
        .types()
        .iter()
        .cloned()
        .zip(lists)
        .map(|(t, words)| {
            let words = words
                .into_iter()
                .map(|word| LabelWord { word, weight: 1.0 })
                .collect();
            (t, words)
        })
        .collect();
    let mut v = Verbalizer::from_entries(entries)?;
    v.shared_base_words = shared;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::parse_label_schema;
    use proptest::prelude::*;

    fn city_source() -> RelatedWordSource {
        let mut m = BTreeMap::new();
        m.insert(
            "city".to_string(),
            [
                "metropolis",
                "town",
                "municipality",
                "urban",
                "suburb",
                "municipal",
                "megalopolis",
                "civilization",
                "downtown",
                "country",
            ]
            .map(String::from)
            .to_vec(),
        );
        m.insert(
            "mountain".to_string(),
            ["peak", "town", "summit", "mountain range", "location"]
                .map(String::from)
                .to_vec(),
        );
        RelatedWordSource::new(m)
    }

    fn words_of(v: &Verbalizer, id: &str) -> Vec<(String, f64)> {
        v.words(&EntityType::parse(id).unwrap())
            .unwrap()
            .iter()
            .map(|w| (w.word.clone(), w.weight))
            .collect()
    }

    #[test]
    fn base_words_are_path_levels() {
        let s = parse_label_schema(&["Location/City"], "/").unwrap();
        let v = build_verbalizer(&s, None, 0).unwrap();
        assert_eq!(
            words_of(&v, "location/city"),
            [("location".to_string(), 1.0), ("city".to_string(), 1.0)]
        );
    }

    #[test]
    fn expansion_takes_top_related_words() {
        let s = parse_label_schema(&["Location/City"], "/").unwrap();
        let src = city_source();
        let v = build_verbalizer(&s, Some(&src), 10).unwrap();
        let words: Vec<String> = words_of(&v, "location/city")
            .into_iter()
            .map(|w| w.0)
            .collect();
        assert_eq!(&words[..2], ["location", "city"]);
        assert_eq!(words.len(), 12);
        assert_eq!(&words[2..], src.related("city"));
    }

    #[test]
    fn expansion_skips_collisions_and_phrases() {
        let s = parse_label_schema(&["location/city", "location/mountain"], "/").unwrap();
        let v = build_verbalizer(&s, Some(&city_source()), 10).unwrap();
        let mountain: Vec<String> = words_of(&v, "location/mountain")
            .into_iter()
            .map(|w| w.0)
            .collect();
        // "town" went to city first; "location" is a base word of both; the phrase is dropped
        assert_eq!(mountain, ["location", "mountain", "peak", "summit"]);
        assert_eq!(v.shared_base_words(), ["location"]);
    }

    #[test]
    fn single_type_union() {
        let s = parse_label_schema(&["other"], "/").unwrap();
        let v = build_verbalizer(&s, None, 0).unwrap();
        assert_eq!(v.union_vocabulary(), ["other"]);
    }

    #[test]
    fn expansion_without_source_is_config_error() {
        let s = parse_label_schema(&["other"], "/").unwrap();
        assert!(matches!(
            build_verbalizer(&s, None, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn json_is_sorted_and_round_trips() {
        let s = parse_label_schema(&["person/artist", "location/city"], "/").unwrap();
        let v = build_verbalizer(&s, Some(&city_source()), 2).unwrap();
        let json = v.to_json().unwrap();
        assert!(json.find("location/city").unwrap() < json.find("person/artist").unwrap());
        let back = Verbalizer::from_json(&json).unwrap();
        assert_eq!(back.to_json().unwrap(), json);
        assert_eq!(back.union_vocabulary(), v.union_vocabulary());
    }

    #[test]
    fn weight_projection_clamps() {
        let s = parse_label_schema(&["a/b", "c"], "/").unwrap();
        let mut v = build_verbalizer(&s, None, 0).unwrap();
        v.set_weights(&[-1.0, 2.0, -3.0]).unwrap();
        assert_eq!(v.weights(), [0.0, 2.0, 1e-6]);
    }

    #[test]
    fn rejects_invalid_entries() {
        let t = EntityType::parse("x").unwrap();
        assert!(Verbalizer::from_entries(vec![(t.clone(), vec![])]).is_err());
        let zero = vec![LabelWord {
            word: "x".into(),
            weight: 0.0,
        }];
        assert!(Verbalizer::from_entries(vec![(t, zero)]).is_err());
    }

    proptest! {
        #[test]
        fn deterministic_and_collision_free(
            labels in proptest::collection::btree_set("[a-c]/[a-f]", 1..8),
            k in 0usize..6,
        ) {
            let labels: Vec<String> = labels.into_iter().collect();
            let s = parse_label_schema(&labels, "/").unwrap();
            let mut m = BTreeMap::new();
            for leaf in ["a", "b", "c", "d", "e", "f"] {
                m.insert(leaf.to_string(), ["g", "h", "a", "i", "j k", "l"].map(String::from).to_vec());
            }
            let src = RelatedWordSource::new(m);
            let v1 = build_verbalizer(&s, Some(&src), k).unwrap();
            let v2 = build_verbalizer(&s, Some(&src), k).unwrap();
            prop_assert_eq!(v1.to_json().unwrap(), v2.to_json().unwrap());

            let base_count = |t: &EntityType| {
                let mut levels = t.path().to_vec();
                levels.dedup();
                levels.len()
            };
            let mut all_base: HashMap<&str, Vec<&EntityType>> = HashMap::new();
            for (t, ws) in v1.entries() {
                for w in &ws[..base_count(t)] {
                    prop_assert!(t.path().contains(&w.word), "{} is not a level of {}", w.word, t);
                    all_base.entry(&w.word).or_default().push(t);
                }
            }
            let mut owner: HashMap<&str, &EntityType> = HashMap::new();
            for (t, ws) in v1.entries() {
                for w in &ws[base_count(t)..] {
                    if let Some(prev) = owner.insert(&w.word, t) {
                        prop_assert!(false, "expansion word {} shared by {} and {}", w.word, prev, t);
                    }
                    prop_assert!(!all_base.contains_key(w.word.as_str()), "expansion word {} is a base word", w.word);
                }
            }
            let mut union: Vec<&str> = v1.entries().iter().flat_map(|(_, ws)| ws.iter().map(|w| w.word.as_str())).collect();
            union.sort();
            union.dedup();
            let mut got: Vec<&str> = v1.union_vocabulary().iter().map(String::as_str).collect();
            got.sort();
            prop_assert_eq!(got, union);
        }
    }
}
