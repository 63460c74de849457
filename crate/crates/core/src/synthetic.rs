//! Synthetic typing worlds for tests, benches and demos.
//!
//! A world has a set of types, each with its own keywords and entity names.
//! Sentences mix filler words with one entity and one keyword of the entity's
//! type. The toy backend's rule table knows a few keywords and some entity
//! names per type; everything else has to be learned.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{RuleTable, ToyConfig, ToyMlm, Trigger};
use crate::datasets::{fewnerd_label_table, TypingDataset, TypingExample};
use crate::error::Result;
use crate::schema::{EntityType, LabelSchema};
use crate::selfsup::{LinkedSentence, TypeDictionary};
use crate::verbalizer::{build_verbalizer, Verbalizer};

pub const DEFAULT_TYPES: [&str; 6] = [
    "location/city",
    "location/mountain",
    "organization/company",
    "organization/sportsteam",
    "person/artist",
    "person/athlete",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub types: Vec<String>,
    pub keywords_per_type: usize,
    /// Keywords per type the rule table knows about.
    pub known_keywords: usize,
    pub entities_per_type: usize,
    /// Fraction of entities with a mention rule.
    pub known_entity_fraction: f64,
    pub fillers: usize,
    /// Filler words per sentence, inclusive range.
    pub filler_range: (usize, usize),
    pub rule_mass: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            types: DEFAULT_TYPES.iter().map(|s| s.to_string()).collect(),
            keywords_per_type: 8,
            known_keywords: 2,
            entities_per_type: 40,
            known_entity_fraction: 0.3,
            fillers: 40,
            filler_range: (3, 6),
            rule_mass: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    config: WorldConfig,
    schema: LabelSchema,
    keywords: Vec<Vec<String>>,
    entities: Vec<Vec<String>>,
    fillers: Vec<String>,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| {
            format!(
                "{}{}",
                ONSETS.choose(rng).unwrap(),
                VOWELS.choose(rng).unwrap()
            )
        })
        .collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        let types = config
            .types
            .iter()
            .map(|t| EntityType::parse(t))
            .collect::<Result<Vec<_>>>()?;
        let schema = LabelSchema::from_types("synthetic", types)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut used: HashSet<String> = HashSet::new();
        for t in schema.types() {
            used.extend(t.path().iter().cloned());
        }
        let mut fresh = |rng: &mut ChaCha8Rng, syllables: usize| loop {
            let w = pseudo_word(rng, syllables);
            if used.insert(w.clone()) {
                return w;
            }
        };
        let mut keywords = Vec::new();
        let mut entities = Vec::new();
        for _ in schema.types() {
            keywords.push(
                (0..config.keywords_per_type)
                    .map(|_| fresh(&mut rng, 3))
                    .collect(),
            );
            entities.push(
                (0..config.entities_per_type)
                    .map(|_| capitalize(&fresh(&mut rng, 3)))
                    .collect(),
            );
        }
        let fillers = (0..config.fillers).map(|_| fresh(&mut rng, 2)).collect();
        Ok(Self {
            config,
            schema,
            keywords,
            entities,
            fillers,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn keywords(&self, type_index: usize) -> &[String] {
        &self.keywords[type_index]
    }

    pub fn entities(&self, type_index: usize) -> &[String] {
        &self.entities[type_index]
    }

    fn known_entities(&self) -> usize {
        (self.config.entities_per_type as f64 * self.config.known_entity_fraction).round() as usize
    }

    /// Rules for the known keywords and known entities, each pointing at the
    /// type's leaf word.
    pub fn rules(&self) -> RuleTable {
        let mut rules = RuleTable::default();
        for (i, t) in self.schema.types().iter().enumerate() {
            for k in self.keywords[i].iter().take(self.config.known_keywords) {
                rules.push(Trigger::Keyword(k.clone()), t.leaf(), self.config.rule_mass);
            }
            for e in self.entities[i].iter().take(self.known_entities()) {
                rules.push(Trigger::Mention(e.clone()), t.leaf(), self.config.rule_mass);
            }
        }
        rules
    }

    pub fn verbalizer(&self) -> Result<Verbalizer> {
        build_verbalizer(&self.schema, None, 0)
    }

    /// Every word the world can produce.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut out: Vec<String> = self.fillers.clone();
        out.extend(self.keywords.iter().flatten().cloned());
        out.extend(self.entities.iter().flatten().cloned());
        out.push(".".into());
        out
    }

    /// A toy backend that knows the world's words, label words and rules.
    pub fn backend(&self, config: ToyConfig) -> Result<ToyMlm> {
        let v = self.verbalizer()?;
        ToyMlm::builder(config)
            .words(self.vocabulary())
            .words(v.union_vocabulary().iter().cloned())
            .rules(self.rules())
            .build()
    }

    /// Tokens of one sentence and the position of its entity.
    fn sentence(
        &self,
        rng: &mut ChaCha8Rng,
        type_index: usize,
        entity: &str,
    ) -> (Vec<String>, usize) {
        let (lo, hi) = self.config.filler_range;
        let n = rng.random_range(lo..=hi);
        let mut tokens: Vec<String> = (0..n)
            .map(|_| self.fillers.choose(rng).unwrap().clone())
            .collect();
        let kw = self.keywords[type_index].choose(rng).unwrap().clone();
        let e_pos = rng.random_range(0..=tokens.len());
        tokens.insert(e_pos, entity.to_string());
        let k_pos = rng.random_range(0..=tokens.len());
        tokens.insert(k_pos, kw);
        let e_pos = if k_pos <= e_pos { e_pos + 1 } else { e_pos };
        tokens.push(".".into());
        (tokens, e_pos)
    }

    fn example(&self, rng: &mut ChaCha8Rng, type_index: usize, id: String) -> TypingExample {
        let entity = self.entities[type_index].choose(rng).unwrap().clone();
        let (tokens, e) = self.sentence(rng, type_index, &entity);
        TypingExample {
            id,
            tokens,
            mention_span: (e, e + 1),
            gold_type: self.schema.types()[type_index].clone(),
        }
    }

    /// `n` examples with uniformly drawn types.
    pub fn dataset(&self, n: usize, seed: u64, split: &str) -> Result<TypingDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = (0..n)
            .map(|i| {
                let t = rng.random_range(0..self.schema.len());
                self.example(&mut rng, t, format!("{split}-{i}"))
            })
            .collect();
        TypingDataset::new(xs, self.schema.clone(), split)
    }

    /// Exactly `per_type` examples of every type, type by type.
    pub fn balanced_dataset(
        &self,
        per_type: usize,
        seed: u64,
        split: &str,
    ) -> Result<TypingDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(per_type * self.schema.len());
        for t in 0..self.schema.len() {
            for j in 0..per_type {
                xs.push(self.example(&mut rng, t, format!("{split}-{t}-{j}")));
            }
        }
        TypingDataset::new(xs, self.schema.clone(), split)
    }

    fn entity_id(type_index: usize, entity_index: usize) -> String {
        format!("E{type_index}.{entity_index}")
    }

    /// An entity-linked corpus of `n` sentences.
    pub fn linked_corpus(&self, n: usize, seed: u64) -> Result<Vec<LinkedSentence>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let t = rng.random_range(0..self.schema.len());
                let e = rng.random_range(0..self.entities[t].len());
                let (tokens, pos) = self.sentence(&mut rng, t, &self.entities[t][e]);
                LinkedSentence::new(tokens, (pos, pos + 1), Some(Self::entity_id(t, e)))
            })
            .collect()
    }

    /// Entity id → canonical type id for every entity.
    pub fn dictionary(&self) -> TypeDictionary {
        let mut d = TypeDictionary::default();
        for (t, ty) in self.schema.types().iter().enumerate() {
            for e in 0..self.entities[t].len() {
                d.insert(Self::entity_id(t, e), ty.canonical_id());
            }
        }
        d
    }
}

/// The 66-type Few-NERD schema.
pub fn fewnerd_schema() -> LabelSchema {
    let types = fewnerd_label_table()
        .iter()
        .map(|(_, c)| EntityType::parse(c).expect("valid table entry"))
        .collect();
    LabelSchema::from_types("fewnerd", types).expect("table ids are unique")
}

/// A world over the 66-type Few-NERD schema.
pub fn fewnerd_world(entities_per_type: usize, seed: u64) -> Result<SyntheticWorld> {
    SyntheticWorld::new(WorldConfig {
        types: fewnerd_schema()
            .types()
            .iter()
            .map(EntityType::canonical_id)
            .collect(),
        entities_per_type,
        seed,
        ..WorldConfig::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MaskedLm;
    use crate::templates::TemplateSpec;
    use crate::typing_model::{predict, BoundVerbalizer};

    #[test]
    fn world_is_deterministic() {
        let a = SyntheticWorld::new(WorldConfig::default()).unwrap();
        let b = SyntheticWorld::new(WorldConfig::default()).unwrap();
        assert_eq!(a.vocabulary(), b.vocabulary());
        let da = a.dataset(50, 1, "x").unwrap();
        let db = b.dataset(50, 1, "x").unwrap();
        assert_eq!(da.examples(), db.examples());
    }

    #[test]
    fn sentences_hold_entity_and_keyword() {
        let w = SyntheticWorld::new(WorldConfig::default()).unwrap();
        let ds = w.balanced_dataset(5, 3, "train").unwrap();
        assert_eq!(ds.len(), 30);
        for x in ds.examples() {
            let t = w.schema().index_of(&x.gold_type).unwrap();
            assert!(w.entities(t).contains(&x.mention()[0]));
            assert_eq!(
                x.tokens
                    .iter()
                    .filter(|k| w.keywords(t).contains(k))
                    .count(),
                1
            );
            assert_eq!(x.tokens.last().unwrap(), ".");
        }
    }

    #[test]
    fn rules_only_help() {
        let w = SyntheticWorld::new(WorldConfig::default()).unwrap();
        let backend = w.backend(ToyConfig::default()).unwrap();
        let v = w.verbalizer().unwrap();
        let bound = BoundVerbalizer::new(&v, &backend).unwrap();
        let ds = w.dataset(300, 5, "test").unwrap();
        let spec = TemplateSpec::default();
        let mut known_right = 0;
        let mut known = 0;
        for x in ds.examples() {
            let t = w.schema().index_of(&x.gold_type).unwrap();
            let fires = x.tokens.iter().any(|k| w.keywords(t)[..2].contains(k))
                || w.entities(t)[..12].contains(&x.mention()[0]);
            if fires {
                known += 1;
                known_right +=
                    (predict(x, &spec, &bound, &backend).unwrap() == x.gold_type) as usize;
            }
        }
        assert!(known > 50);
        assert_eq!(known_right, known);
        assert!(backend.vocabulary().id("athlete").is_some());
    }

    #[test]
    fn linked_corpus_matches_dictionary() {
        let w = SyntheticWorld::new(WorldConfig::default()).unwrap();
        let corpus = w.linked_corpus(200, 2).unwrap();
        let dict = w.dictionary();
        for s in &corpus {
            let ty = dict.lookup(s).unwrap();
            let t = w.schema().index_of_id(ty).unwrap();
            assert!(w.entities(t).contains(&s.surface));
        }
    }

    #[test]
    fn fewnerd_world_has_66_types() {
        let w = fewnerd_world(5, 0).unwrap();
        assert_eq!(w.schema().len(), 66);
        assert_eq!(w.balanced_dataset(2, 0, "train").unwrap().len(), 132);
    }
}
