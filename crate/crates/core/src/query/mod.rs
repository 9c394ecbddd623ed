//! Expanded-query data model.
//!
//! An [`ExpandedQuery`] is the structured enrichment of a user question that an
//! external LLM produces from the prompt in [`prompt`]. The [`grammar`] module
//! parses the LLM's five-line reply and serializes queries back into it.

pub mod grammar;
pub mod prompt;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use grammar::{parse_expansion_response, serialize_expansion, ParseOutcome, TripletSeparator};
pub use prompt::render_expansion_prompt;

/// Relation connecting two object phrases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelationType {
    /// Both objects visible in the same frame.
    Spatial,
    /// Objects appear in different frames, subject first, within a short horizon.
    Time,
    /// The object phrase describes an attribute of the subject.
    Attribute,
    /// Ordered appearance with a cause-effect reading.
    Causal,
}

impl RelationType {
    pub const ALL: [RelationType; 4] = [
        RelationType::Spatial,
        RelationType::Time,
        RelationType::Attribute,
        RelationType::Causal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationType::Spatial => "spatial",
            RelationType::Time => "time",
            RelationType::Attribute => "attribute",
            RelationType::Causal => "causal",
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let word = s.trim();
        RelationType::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(word))
            .ok_or_else(|| Error::invalid(format!("unknown relation type `{word}`")))
    }
}

impl Serialize for RelationType {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RelationType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTriplet {
    pub subject: String,
    pub relation: RelationType,
    pub object: String,
}

impl RelationTriplet {
    /// Builds a triplet with normalized endpoints. Fails if either endpoint is
    /// empty after trimming.
    pub fn new(subject: &str, relation: RelationType, object: &str) -> Result<Self> {
        let subject = normalize_phrase(subject);
        let object = normalize_phrase(object);
        if subject.is_empty() || object.is_empty() {
            return Err(Error::invalid("relation endpoints must be non-empty"));
        }
        Ok(RelationTriplet {
            subject,
            relation,
            object,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpandedQuery {
    pub question: String,
    pub key_objects: Vec<String>,
    pub cue_objects: Vec<String>,
    pub relations: Vec<RelationTriplet>,
    pub descriptions: BTreeMap<String, Vec<String>>,
    pub semantics: Vec<String>,
}

impl ExpandedQuery {
    /// Key objects followed by cue objects, without duplicates.
    pub fn all_objects(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for p in self.key_objects.iter().chain(&self.cue_objects) {
            if !out.contains(&p.as_str()) {
                out.push(p);
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.key_objects.is_empty()
            && self.cue_objects.is_empty()
            && self.relations.is_empty()
            && self.descriptions.is_empty()
            && self.semantics.is_empty()
    }

    /// Relation endpoints that name neither a key nor a cue object.
    pub fn dangling_endpoints(&self) -> Vec<String> {
        let objects = self.all_objects();
        let mut out = Vec::new();
        for rel in &self.relations {
            for end in [&rel.subject, &rel.object] {
                if !objects.contains(&end.as_str()) && !out.contains(end) {
                    out.push(end.clone());
                }
            }
        }
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut q: ExpandedQuery = serde_json::from_str(text)?;
        q.normalize();
        Ok(q)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ExpandedQuery serializes")
    }

    /// Applies phrase normalization and first-occurrence deduplication in place.
    pub fn normalize(&mut self) {
        self.key_objects = dedup_phrases(self.key_objects.iter().map(String::as_str));
        self.cue_objects = dedup_phrases(self.cue_objects.iter().map(String::as_str));
        for rel in &mut self.relations {
            rel.subject = normalize_phrase(&rel.subject);
            rel.object = normalize_phrase(&rel.object);
        }
        let descriptions = std::mem::take(&mut self.descriptions);
        for (obj, des) in descriptions {
            let entry = self.descriptions.entry(normalize_phrase(&obj)).or_default();
            for d in des {
                let d = collapse_whitespace(&d);
                if !d.is_empty() && !entry.contains(&d) {
                    entry.push(d);
                }
            }
        }
        let mut sem = Vec::new();
        for s in self.semantics.drain(..) {
            let s = collapse_whitespace(&s);
            if !s.is_empty() && !sem.contains(&s) {
                sem.push(s);
            }
        }
        self.semantics = sem;
        self.question = self.question.trim().to_string();
    }
}

/// Lowercases and collapses internal whitespace so phrases from the LLM and
/// from the detector compare equal.
pub fn normalize_phrase(s: &str) -> String {
    collapse_whitespace(s).to_lowercase()
}

pub(crate) fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn dedup_phrases<'a>(items: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for item in items {
        let p = normalize_phrase(item);
        if !p.is_empty() && !out.contains(&p) {
            out.push(p);
        }
    }
    out
}
