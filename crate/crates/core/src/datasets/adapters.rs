//! Dataset format adapters.
//!
//! Expected layouts:
//!
//! * `canonical`: JSONL, one object per line:
//!   `{"id": "...", "tokens": [...], "mention_span": [start, end], "label": "a/b"}`;
//!   `id` is optional and defaults to `<split>-<line>`.
//! * `fewnerd`: the supervised Few-NERD release: one `token<TAB>label` pair
//!   per line, blank lines between sentences, `O` for non-entity tokens.
//!   Maximal runs of one label form a mention. Labels go through
//!   [`fewnerd_label_table`].
//! * `ontonotes`: tab-separated `start<TAB>end<TAB>tokens<TAB>labels` with a
//!   space-tokenized sentence, an exclusive end, and space-separated
//!   `/a/b/c` labels.
//! * `bbn`: JSONL with `{"tokens": [...], "mentions": [{"start", "end", "labels": [...]}]}`.
//!
//! OntoNotes and BBN list every ancestor of a mention's type; the deepest
//! label is kept (the first one on ties).

use std::str::FromStr;

use serde::Deserialize;

use super::{unknown_label, CanonicalRecord, TypingExample};
use crate::error::{Error, Result};
use crate::schema::{nearest_label, normalize_label, EntityType, LabelSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    Canonical,
    FewNerd,
    OntoNotes,
    Bbn,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "canonical" | "jsonl" => Ok(Self::Canonical),
            "fewnerd" | "few-nerd" => Ok(Self::FewNerd),
            "ontonotes" => Ok(Self::OntoNotes),
            "bbn" => Ok(Self::Bbn),
            other => Err(Error::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

const FEWNERD_LABELS: &[(&str, &str)] = &[
    ("art-broadcastprogram", "art/broadcastprogram"),
    ("art-film", "art/film"),
    ("art-music", "art/music"),
    ("art-other", "art/other"),
    ("art-painting", "art/painting"),
    ("art-writtenart", "art/writtenart"),
    ("building-airport", "building/airport"),
    ("building-hospital", "building/hospital"),
    ("building-hotel", "building/hotel"),
    ("building-library", "building/library"),
    ("building-other", "building/other"),
    ("building-restaurant", "building/restaurant"),
    ("building-sportsfacility", "building/sportsfacility"),
    ("building-theater", "building/theater"),
    (
        "event-attack/battle/war/militaryconflict",
        "event/attack-or-battle-or-war-or-militaryconflict",
    ),
    ("event-disaster", "event/disaster"),
    ("event-election", "event/election"),
    ("event-other", "event/other"),
    ("event-protest", "event/protest"),
    ("event-sportsevent", "event/sportsevent"),
    ("location-GPE", "location/gpe"),
    ("location-bodiesofwater", "location/bodiesofwater"),
    ("location-island", "location/island"),
    ("location-mountain", "location/mountain"),
    ("location-other", "location/other"),
    ("location-park", "location/park"),
    (
        "location-road/railway/highway/transit",
        "location/road-or-railway-or-highway-or-transit",
    ),
    ("organization-company", "organization/company"),
    ("organization-education", "organization/education"),
    (
        "organization-government/governmentagency",
        "organization/government-or-governmentagency",
    ),
    (
        "organization-media/newspaper",
        "organization/media-or-newspaper",
    ),
    ("organization-other", "organization/other"),
    ("organization-politicalparty", "organization/politicalparty"),
    ("organization-religion", "organization/religion"),
    (
        "organization-showorganization",
        "organization/showorganization",
    ),
    ("organization-sportsleague", "organization/sportsleague"),
    ("organization-sportsteam", "organization/sportsteam"),
    ("other-astronomything", "other/astronomything"),
    ("other-award", "other/award"),
    ("other-biologything", "other/biologything"),
    ("other-chemicalthing", "other/chemicalthing"),
    ("other-currency", "other/currency"),
    ("other-disease", "other/disease"),
    ("other-educationaldegree", "other/educationaldegree"),
    ("other-god", "other/god"),
    ("other-language", "other/language"),
    ("other-law", "other/law"),
    ("other-livingthing", "other/livingthing"),
    ("other-medical", "other/medical"),
    ("person-actor", "person/actor"),
    ("person-artist/author", "person/artist-or-author"),
    ("person-athlete", "person/athlete"),
    ("person-director", "person/director"),
    ("person-other", "person/other"),
    ("person-politician", "person/politician"),
    ("person-scholar", "person/scholar"),
    ("person-soldier", "person/soldier"),
    ("product-airplane", "product/airplane"),
    ("product-car", "product/car"),
    ("product-food", "product/food"),
    ("product-game", "product/game"),
    ("product-other", "product/other"),
    ("product-ship", "product/ship"),
    ("product-software", "product/software"),
    ("product-train", "product/train"),
    ("product-weapon", "product/weapon"),
];

/// Few-NERD fine-grained labels and their canonical ids. The coarse/fine
/// separator `-` becomes `/`; alternatives joined by `/` inside the fine label
/// become `-or-`.
pub fn fewnerd_label_table() -> &'static [(&'static str, &'static str)] {
    FEWNERD_LABELS
}

pub fn normalize_fewnerd_label(raw: &str) -> Result<EntityType> {
    FEWNERD_LABELS
        .iter()
        .find(|(r, _)| r.eq_ignore_ascii_case(raw))
        .map(|(_, canonical)| EntityType::parse(canonical).expect("table entries are valid"))
        .ok_or_else(|| {
            let near = nearest_label(raw, FEWNERD_LABELS.iter().map(|(r, _)| *r)).unwrap_or("");
            Error::Validation(format!(
                "unknown Few-NERD label {raw:?} (nearest: {near:?})"
            ))
        })
}

fn deepest(labels: &[String], line: usize) -> std::result::Result<EntityType, String> {
    let mut best: Option<EntityType> = None;
    for raw in labels {
        let t = normalize_label(raw, "/").map_err(|e| format!("{e} at line {line}"))?;
        if best.as_ref().is_none_or(|b| t.depth() > b.depth()) {
            best = Some(t);
        }
    }
    best.ok_or_else(|| format!("mention without labels at line {line}"))
}

fn check_schema(t: &EntityType, schema: Option<&LabelSchema>, line: usize) -> Result<()> {
    if let Some(schema) = schema {
        if !schema.contains(t) {
            let Error::Validation(m) = unknown_label(&t.canonical_id(), schema) else {
                unreachable!()
            };
            return Err(Error::Validation(format!("{m} at line {line}")));
        }
    }
    Ok(())
}

fn build(
    id: String,
    tokens: Vec<String>,
    start: usize,
    end: usize,
    gold_type: EntityType,
    line: usize,
) -> Result<TypingExample> {
    let x = TypingExample {
        id,
        tokens,
        mention_span: (start, end),
        gold_type,
    };
    x.check_span()
        .map_err(|m| Error::Validation(format!("{m} at line {line}")))?;
    Ok(x)
}

pub(super) fn parse(
    text: &str,
    format: DatasetFormat,
    split: &str,
    schema: Option<&LabelSchema>,
) -> Result<Vec<TypingExample>> {
    match format {
        DatasetFormat::Canonical => parse_canonical(text, split, schema),
        DatasetFormat::FewNerd => parse_fewnerd(text, split, schema),
        DatasetFormat::OntoNotes => parse_ontonotes(text, split, schema),
        DatasetFormat::Bbn => parse_bbn(text, split, schema),
    }
}

fn parse_canonical(
    text: &str,
    split: &str,
    schema: Option<&LabelSchema>,
) -> Result<Vec<TypingExample>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: CanonicalRecord = serde_json::from_str(raw)
            .map_err(|e| Error::Validation(format!("malformed row at line {line}: {e}")))?;
        let [start, end] = rec.mention_span;
        if start >= end {
            return Err(Error::Validation(format!("empty mention at line {line}")));
        }
        let t = normalize_label(&rec.label, "/")
            .map_err(|e| Error::Validation(format!("{e} at line {line}")))?;
        check_schema(&t, schema, line)?;
        let id = rec.id.unwrap_or_else(|| format!("{split}-{line}"));
        out.push(build(id, rec.tokens, start, end, t, line)?);
    }
    Ok(out)
}

fn parse_fewnerd(
    text: &str,
    split: &str,
    schema: Option<&LabelSchema>,
) -> Result<Vec<TypingExample>> {
    let mut out = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut labels: Vec<(String, usize)> = Vec::new();
    let mut sentence = 0usize;

    let mut flush = |tokens: &mut Vec<String>,
                     labels: &mut Vec<(String, usize)>,
                     sentence: &mut usize|
     -> Result<()> {
        let mut i = 0;
        let mut mention = 0;
        while i < labels.len() {
            let (label, line) = &labels[i];
            if label == "O" {
                i += 1;
                continue;
            }
            let start = i;
            while i < labels.len() && labels[i].0 == *label {
                i += 1;
            }
            let t = normalize_fewnerd_label(label).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("{m} at line {line}")),
                other => other,
            })?;
            check_schema(&t, schema, *line)?;
            let id = format!("{split}-{sentence}-{mention}");
            out.push(build(id, tokens.clone(), start, i, t, *line)?);
            mention += 1;
        }
        tokens.clear();
        labels.clear();
        *sentence += 1;
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            if !tokens.is_empty() {
                flush(&mut tokens, &mut labels, &mut sentence)?;
            }
            continue;
        }
        let (tok, label) = raw
            .split_once('\t')
            .ok_or_else(|| Error::Validation(format!("expected token<TAB>label at line {line}")))?;
        if tok.is_empty() {
            return Err(Error::Validation(format!("empty token at line {line}")));
        }
        tokens.push(tok.to_string());
        labels.push((label.trim().to_string(), line));
    }
    if !tokens.is_empty() {
        flush(&mut tokens, &mut labels, &mut sentence)?;
    }
    Ok(out)
}

fn parse_ontonotes(
    text: &str,
    split: &str,
    schema: Option<&LabelSchema>,
) -> Result<Vec<TypingExample>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Validation(format!(
                "expected 4 tab-separated columns at line {line}"
            )));
        }
        let parse_idx = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Validation(format!("bad span offset {s:?} at line {line}")))
        };
        let (start, end) = (parse_idx(cols[0])?, parse_idx(cols[1])?);
        if start >= end {
            return Err(Error::Validation(format!("empty mention at line {line}")));
        }
        let tokens: Vec<String> = cols[2].split_whitespace().map(String::from).collect();
        let labels: Vec<String> = cols[3].split_whitespace().map(String::from).collect();
        let t = deepest(&labels, line).map_err(Error::Validation)?;
        check_schema(&t, schema, line)?;
        out.push(build(
            format!("{split}-{line}"),
            tokens,
            start,
            end,
            t,
            line,
        )?);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct BbnRow {
    tokens: Vec<String>,
    mentions: Vec<BbnMention>,
}

#[derive(Deserialize)]
struct BbnMention {
    start: usize,
    end: usize,
    labels: Vec<String>,
}

fn parse_bbn(text: &str, split: &str, schema: Option<&LabelSchema>) -> Result<Vec<TypingExample>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let row: BbnRow = serde_json::from_str(raw)
            .map_err(|e| Error::Validation(format!("malformed row at line {line}: {e}")))?;
        for (j, m) in row.mentions.iter().enumerate() {
            if m.start >= m.end {
                return Err(Error::Validation(format!("empty mention at line {line}")));
            }
            let t = deepest(&m.labels, line).map_err(Error::Validation)?;
            check_schema(&t, schema, line)?;
            out.push(build(
                format!("{split}-{line}-{j}"),
                row.tokens.clone(),
                m.start,
                m.end,
                t,
                line,
            )?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fewnerd_table_has_66_unique_types() {
        let mut ids: Vec<&str> = FEWNERD_LABELS.iter().map(|(_, c)| *c).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 66);
        for (_, c) in FEWNERD_LABELS {
            EntityType::parse(c).unwrap();
        }
    }

    #[test]
    fn fewnerd_label_normalization() {
        assert_eq!(
            normalize_fewnerd_label("person-artist/author")
                .unwrap()
                .canonical_id(),
            "person/artist-or-author"
        );
        assert_eq!(
            normalize_fewnerd_label("location-GPE")
                .unwrap()
                .canonical_id(),
            "location/gpe"
        );
        let err = normalize_fewnerd_label("person-athelete")
            .unwrap_err()
            .to_string();
        assert!(err.contains("person-athlete"), "{err}");
    }

    #[test]
    fn fewnerd_sentences_and_runs() {
        let text = "Steve\tperson-other\nJobs\tperson-other\nfound\tO\nApple\torganization-company\n.\tO\n\nParis\tlocation-GPE\n";
        let xs = parse(text, DatasetFormat::FewNerd, "dev", None).unwrap();
        assert_eq!(xs.len(), 3);
        assert_eq!(xs[0].mention(), ["Steve", "Jobs"]);
        assert_eq!(xs[0].gold_type.canonical_id(), "person/other");
        assert_eq!(xs[1].mention_span, (3, 4));
        assert_eq!(xs[2].id, "dev-1-0");
    }

    #[test]
    fn ontonotes_picks_deepest_label() {
        let text = "0\t2\tSteve Jobs founded Apple\t/person /person/business\n";
        let xs = parse(text, DatasetFormat::OntoNotes, "t", None).unwrap();
        assert_eq!(xs[0].gold_type.canonical_id(), "person/business");
        assert!(parse("0\t0\ta\t/x\n", DatasetFormat::OntoNotes, "t", None)
            .unwrap_err()
            .to_string()
            .contains("empty mention at line 1"));
    }

    #[test]
    fn bbn_rows() {
        let text = r#"{"tokens":["IBM","hired","Ann"],"mentions":[{"start":0,"end":1,"labels":["/ORGANIZATION","/ORGANIZATION/CORPORATION"]},{"start":2,"end":3,"labels":["/PERSON"]}]}"#;
        let xs = parse(text, DatasetFormat::Bbn, "t", None).unwrap();
        assert_eq!(xs[0].gold_type.canonical_id(), "organization/corporation");
        assert_eq!(xs[1].gold_type.canonical_id(), "person");
    }
}
