//! Label spaces: the food-safety concept model used for provision
//! classification and the compliance rulesets used for artifact checking.
//!
//! Both are loaded from line-delimited JSON files. A concept file holds an
//! optional `{"version": ...}` record followed by one record per concept:
//!
//! ```text
//! {"version": "2024-1"}
//! {"id": "Traceability", "name": "Traceability", "scarce": false}
//! {"id": "Pathogen", "name": "Pathogen", "scarce": true, "keywords": ["pathogen", "listeria"]}
//! ```
//!
//! A ruleset file holds an optional `{"name": ...}` record followed by one
//! record per rule:
//!
//! ```text
//! {"name": "gdpr-art28"}
//! {"id": "R5", "text": "The processor shall assist ...", "source_ref": "GDPR Art. 28(3)(e)"}
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::normalize_whitespace;
use crate::records;

/// Identifier the model answers with when no rule applies.
pub const NOT_APPLICABLE: &str = "R99";

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> TaxonomyError {
    TaxonomyError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

static RULE_ID: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^R[0-9]+$").unwrap());
static CONCEPT_ID: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[A-Za-z][A-Za-z0-9_]*$").unwrap());

/// `R<digits>`
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RuleId(String);

impl RuleId {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_not_applicable(&self) -> bool {
        self.0 == NOT_APPLICABLE
    }
}

impl FromStr for RuleId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if RULE_ID.is_match(s) {
            Ok(RuleId(s.to_string()))
        } else {
            Err(format!("'{s}' does not match R<digits>"))
        }
    }
}

impl TryFrom<String> for RuleId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<RuleId> for String {
    fn from(id: RuleId) -> String {
        id.0
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub scarce: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConceptModel {
    pub concepts: Vec<Concept>,
    pub version: String,
}

impl ConceptModel {
    pub fn new(concepts: Vec<Concept>, version: impl Into<String>) -> Result<Self, TaxonomyError> {
        let model = ConceptModel {
            concepts,
            version: version.into(),
        };
        model.validate(|i| format!("concepts[{i}]"))?;
        Ok(model)
    }

    fn validate(&self, locate: impl Fn(usize) -> String) -> Result<(), TaxonomyError> {
        let mut seen = HashSet::new();
        for (i, c) in self.concepts.iter().enumerate() {
            let at = locate(i);
            if !CONCEPT_ID.is_match(&c.id) || c.id == "NONE" {
                return Err(schema(format!("{at}.id"), format!("invalid concept id '{}'", c.id)));
            }
            if !seen.insert(c.id.to_lowercase()) {
                return Err(schema(format!("{at}.id"), format!("duplicate concept id '{}'", c.id)));
            }
            if c.scarce && c.keywords.is_empty() {
                return Err(schema(
                    format!("{at}.keywords"),
                    format!("scarce concept '{}' needs at least one keyword", c.id),
                ));
            }
            if !c.scarce && !c.keywords.is_empty() {
                return Err(schema(
                    format!("{at}.keywords"),
                    format!("non-scarce concept '{}' must not carry keywords", c.id),
                ));
            }
            if let Some(k) = c.keywords.iter().position(|k| k.trim().is_empty()) {
                return Err(schema(format!("{at}.keywords[{k}]"), "empty keyword"));
            }
        }
        if !self.concepts.iter().any(|c| !c.scarce) {
            return Err(schema("concepts", "at least one non-scarce concept is required"));
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Concept> {
        self.concepts.iter().find(|c| c.id == id)
    }

    pub fn scarce(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.iter().filter(|c| c.scarce)
    }

    pub fn learnable(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.iter().filter(|c| !c.scarce)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub id: RuleId,
    pub text: String,
    #[serde(default)]
    pub source_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Ruleset {
    pub name: String,
    pub rules: Vec<RuleSpec>,
}

impl Ruleset {
    pub fn new(name: impl Into<String>, rules: Vec<RuleSpec>) -> Result<Self, TaxonomyError> {
        let rs = Ruleset {
            name: name.into(),
            rules,
        };
        rs.validate(|i| format!("rules[{i}]"))?;
        Ok(rs)
    }

    fn validate(&self, locate: impl Fn(usize) -> String) -> Result<(), TaxonomyError> {
        if self.rules.is_empty() {
            return Err(schema("rules", "ruleset is empty"));
        }
        let mut seen = HashSet::new();
        for (i, r) in self.rules.iter().enumerate() {
            let at = locate(i);
            if r.id.is_not_applicable() {
                return Err(schema(
                    format!("{at}.id"),
                    format!("{NOT_APPLICABLE} is reserved for 'no rule applies'"),
                ));
            }
            if !seen.insert(r.id.clone()) {
                return Err(schema(format!("{at}.id"), format!("duplicate rule id '{}'", r.id)));
            }
            if r.text.trim().is_empty() {
                return Err(schema(format!("{at}.text"), "empty rule text"));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = &RuleId> {
        self.rules.iter().map(|r| &r.id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rules.iter().any(|r| r.id.as_str() == id)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConceptLine {
    Concept(Concept),
    Meta { version: String },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RuleLine {
    Rule(RuleSpec),
    Meta { name: String },
}

fn read(path: &Path) -> Result<String, TaxonomyError> {
    std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_concept_model(path: &Path) -> Result<ConceptModel, TaxonomyError> {
    parse_concept_model(&read(path)?)
}

pub fn parse_concept_model(text: &str) -> Result<ConceptModel, TaxonomyError> {
    let lines = records::parse_lines::<ConceptLine>(text)
        .map_err(|(line, e)| schema(format!("line {line}"), e.to_string()))?;
    let mut version = String::new();
    let mut concepts = Vec::new();
    let mut line_of = Vec::new();
    for (line, rec) in lines {
        match rec {
            ConceptLine::Concept(c) => {
                concepts.push(c);
                line_of.push(line);
            }
            ConceptLine::Meta { version: v } => version = v,
        }
    }
    let model = ConceptModel { concepts, version };
    model.validate(|i| format!("line {}", line_of[i]))?;
    Ok(model)
}

pub fn load_ruleset(path: &Path) -> Result<Ruleset, TaxonomyError> {
    let default_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_ruleset(&read(path)?, &default_name)
}

pub fn parse_ruleset(text: &str, default_name: &str) -> Result<Ruleset, TaxonomyError> {
    let lines = records::parse_lines::<RuleLine>(text)
        .map_err(|(line, e)| schema(format!("line {line}"), e.to_string()))?;
    let mut name = default_name.to_string();
    let mut rules = Vec::new();
    let mut line_of = Vec::new();
    for (line, rec) in lines {
        match rec {
            RuleLine::Rule(r) => {
                rules.push(r);
                line_of.push(line);
            }
            RuleLine::Meta { name: n } => name = n,
        }
    }
    let rs = Ruleset { name, rules };
    rs.validate(|i| format!("line {}", line_of.get(i).copied().unwrap_or(0)))?;
    Ok(rs)
}

/// Canonical `R<k>: <text>` listing, one rule per line in file order.
pub fn render_rules(rs: &Ruleset) -> String {
    rs.rules
        .iter()
        .map(|r| format!("{}: {}", r.id, normalize_whitespace(&r.text)))
        .collect::<Vec<_>>()
        .join("\n")
}
