//! Zero-shot compliance checking of a regulatory artifact against a
//! ruleset: prompt construction, inference, response parsing and the
//! coverage report.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Passage, Provision};
use crate::grammar::leading_clause;
use crate::llm::{Backend, CostLedger, LlmError, Usage};
use crate::taxonomy::{render_rules, RuleId, Ruleset, NOT_APPLICABLE};

pub use crate::llm::{ChatMessage, Role};

/// Prompt template shipped with the crate.
pub const DEFAULT_TEMPLATE: &str = include_str!("../assets/compliance_prompt.txt");

const REQUIRED_PLACEHOLDERS: [&str; 3] = ["{rules}", "{text}", "{context}"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template is missing the {0} placeholder")]
    MissingPlaceholder(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{message}")]
pub struct ParseError {
    pub message: String,
    pub raw: String,
}

#[derive(Debug, Error)]
pub enum CheckError {
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error("unparseable response for {unit}: {source}")]
    Parse {
        unit: String,
        #[source]
        source: ParseError,
        usage: Usage,
    },
}

/// A piece of artifact text to check, with optional surrounding context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckUnit {
    pub unit_ref: String,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

impl CheckUnit {
    pub fn new(unit_ref: impl Into<String>, text: impl Into<String>) -> Self {
        CheckUnit {
            unit_ref: unit_ref.into(),
            text: text.into(),
            context: None,
        }
    }

    pub fn with_context(mut self, context: Option<String>) -> Self {
        self.context = context.filter(|c| !c.trim().is_empty());
        self
    }
}

impl From<&Passage> for CheckUnit {
    fn from(p: &Passage) -> Self {
        CheckUnit::new(p.id.to_string(), p.text.clone())
    }
}

impl From<&Provision> for CheckUnit {
    fn from(p: &Provision) -> Self {
        CheckUnit::new(p.id.to_string(), p.text.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptBundle {
    pub messages: Vec<ChatMessage>,
    pub passage_ref: String,
    pub ruleset_ref: String,
}

pub fn validate_template(template: &str) -> Result<(), TemplateError> {
    for p in REQUIRED_PLACEHOLDERS {
        if !template.contains(p) {
            return Err(TemplateError::MissingPlaceholder(p));
        }
    }
    Ok(())
}

/// Renders the user message: the unit text, then its context when given.
pub fn render_user_message(text: &str, context: Option<&str>) -> String {
    match context {
        Some(ctx) => format!("Text:\n{text}\n\nContext:\n{ctx}"),
        None => format!("Text:\n{text}"),
    }
}

/// System message = template with `{rules}` replaced by the rendered
/// ruleset. The `{text}` and `{context}` mentions stay as written; they name
/// the labelled sections of the user message.
pub fn build_prompt(unit: &CheckUnit, rules: &Ruleset, template: &str) -> Result<PromptBundle, TemplateError> {
    validate_template(template)?;
    let system = template.replace("{rules}", &render_rules(rules));
    Ok(PromptBundle {
        messages: vec![
            ChatMessage::system(system),
            ChatMessage::user(render_user_message(&unit.text, unit.context.as_deref())),
        ],
        passage_ref: unit.unit_ref.clone(),
        ruleset_ref: rules.name.clone(),
    })
}

static RULE_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bR[0-9]+\b").unwrap());

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    /// Ruleset order, no duplicates. Empty means "no rule applies".
    pub rule_ids: Vec<RuleId>,
    pub rationale: String,
}

/// Reads the rule identifiers from the leading clause of a response.
///
/// `R99` anywhere in the response yields the empty set, even when other
/// identifiers are present. Identifiers outside the ruleset are an error,
/// as is a leading clause without any identifier.
pub fn parse_response(raw: &str, rules: &Ruleset) -> Result<ParsedResponse, ParseError> {
    let fail = |message: String| ParseError {
        message,
        raw: raw.to_string(),
    };
    let (clause, rest) = leading_clause(raw);
    let rationale = rest.to_string();
    let found: Vec<&str> = RULE_TOKEN.find_iter(clause).map(|m| m.as_str()).collect();

    if RULE_TOKEN.find_iter(raw).any(|m| m.as_str() == NOT_APPLICABLE) {
        let others: Vec<_> = found.iter().filter(|t| **t != NOT_APPLICABLE).collect();
        if !others.is_empty() {
            log::warn!("response names {NOT_APPLICABLE} together with {others:?}; treating as not applicable");
        }
        return Ok(ParsedResponse {
            rule_ids: Vec::new(),
            rationale,
        });
    }
    if found.is_empty() {
        return Err(fail("no rule identifier in the leading clause".into()));
    }
    if let Some(unknown) = found.iter().find(|t| !rules.contains(t)) {
        return Err(fail(format!("{unknown} is not in ruleset '{}'", rules.name)));
    }
    let named: BTreeSet<&str> = found.into_iter().collect();
    let rule_ids = rules.ids().filter(|id| named.contains(id.as_str())).cloned().collect();
    Ok(ParsedResponse { rule_ids, rationale })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub passage_ref: String,
    pub rule_ids: Vec<RuleId>,
    pub rationale: String,
    pub raw_response: String,
    /// Index of the call in the run's cost ledger.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage_ref: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

impl Finding {
    pub fn is_parse_failure(&self) -> bool {
        self.parse_error.is_some()
    }
}

/// Sends one prompt and parses the answer.
pub fn check_passage(bundle: &PromptBundle, rules: &Ruleset, backend: &Backend) -> Result<(Finding, Usage), CheckError> {
    let completion = backend.complete(&bundle.messages)?;
    match parse_response(&completion.text, rules) {
        Ok(parsed) => Ok((
            Finding {
                passage_ref: bundle.passage_ref.clone(),
                rule_ids: parsed.rule_ids,
                rationale: parsed.rationale,
                raw_response: completion.text,
                usage_ref: None,
                parse_error: None,
            },
            completion.usage,
        )),
        Err(source) => Err(CheckError::Parse {
            unit: bundle.passage_ref.clone(),
            source,
            usage: completion.usage,
        }),
    }
}

/// Checks every unit, at most `backend.effective_parallelism()` at a time.
/// Findings and ledger entries come back in unit order; unparseable
/// responses become findings with `parse_error` set.
pub fn check_units(
    units: &[CheckUnit],
    rules: &Ruleset,
    template: &str,
    backend: &Backend,
    ledger: &CostLedger,
) -> Result<Vec<Finding>, CheckError> {
    validate_template(template).map_err(|e| LlmError::InvalidMessages(e.to_string()))?;
    let bundles = units
        .iter()
        .map(|u| build_prompt(u, rules, template))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| LlmError::InvalidMessages(e.to_string()))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(backend.effective_parallelism())
        .build()
        .expect("thread pool");
    let outcomes: Vec<Result<(Finding, Usage), CheckError>> = pool.install(|| {
        use rayon::prelude::*;
        bundles.par_iter().map(|b| check_passage(b, rules, backend)).collect()
    });

    let model = &backend.config().model_name;
    let mut findings = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        let (mut finding, usage) = match outcome {
            Ok(pair) => pair,
            Err(CheckError::Parse { unit, source, usage }) => (
                Finding {
                    passage_ref: unit,
                    rule_ids: Vec::new(),
                    rationale: String::new(),
                    raw_response: source.raw.clone(),
                    usage_ref: None,
                    parse_error: Some(source.message),
                },
                usage,
            ),
            Err(e) => return Err(e),
        };
        let rec = ledger.record(&finding.passage_ref, model, &usage)?;
        finding.usage_ref = Some(rec.call);
        findings.push(finding);
    }
    Ok(findings)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTotals {
    pub findings: usize,
    pub parse_failures: usize,
    pub not_applicable: usize,
    pub rules: usize,
    pub rules_covered: usize,
    pub rules_uncovered: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub artifact_ref: String,
    pub ruleset: String,
    /// Rules with at least one supporting unit, in ruleset order.
    pub per_rule: IndexMap<RuleId, Vec<String>>,
    /// Rules no unit satisfies: the artifact's non-compliance areas.
    pub uncovered_rules: Vec<RuleId>,
    pub findings: Vec<Finding>,
    pub totals: ReportTotals,
}

pub fn assemble_report(findings: Vec<Finding>, rules: &Ruleset, artifact: &str) -> ComplianceReport {
    let mut per_rule: IndexMap<RuleId, Vec<String>> = IndexMap::new();
    let mut uncovered_rules = Vec::new();
    for id in rules.ids() {
        let units: Vec<String> = findings
            .iter()
            .filter(|f| !f.is_parse_failure() && f.rule_ids.contains(id))
            .map(|f| f.passage_ref.clone())
            .collect();
        if units.is_empty() {
            uncovered_rules.push(id.clone());
        } else {
            per_rule.insert(id.clone(), units);
        }
    }
    let totals = ReportTotals {
        findings: findings.len(),
        parse_failures: findings.iter().filter(|f| f.is_parse_failure()).count(),
        not_applicable: findings
            .iter()
            .filter(|f| !f.is_parse_failure() && f.rule_ids.is_empty())
            .count(),
        rules: rules.rules.len(),
        rules_covered: per_rule.len(),
        rules_uncovered: uncovered_rules.len(),
    };
    ComplianceReport {
        artifact_ref: artifact.to_string(),
        ruleset: rules.name.clone(),
        per_rule,
        uncovered_rules,
        findings,
        totals,
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").replace('|', "\\|")
}

/// Human-readable rendering of a report.
pub fn render_markdown(report: &ComplianceReport, rules: &Ruleset) -> String {
    let mut md = String::new();
    let t = &report.totals;
    md.push_str(&format!("# Compliance report: {}\n\n", report.artifact_ref));
    md.push_str(&format!("Ruleset: `{}`\n\n", report.ruleset));
    md.push_str("## Summary\n\n");
    md.push_str(&format!("- Units checked: {}\n", t.findings));
    md.push_str(&format!("- Rules covered: {} of {}\n", t.rules_covered, t.rules));
    md.push_str(&format!("- Units with no applicable rule ({NOT_APPLICABLE}): {}\n", t.not_applicable));
    md.push_str(&format!("- Unparseable responses: {}\n\n", t.parse_failures));

    md.push_str("## Non-compliance: rules not covered by any unit\n\n");
    if report.uncovered_rules.is_empty() {
        md.push_str("None.\n\n");
    }
    for id in &report.uncovered_rules {
        let rule = rules.rules.iter().find(|r| &r.id == id);
        let text = rule.map(|r| one_line(&r.text)).unwrap_or_default();
        let source = rule.map(|r| r.source_ref.as_str()).unwrap_or("");
        if source.is_empty() {
            md.push_str(&format!("- **{id}**: {text}\n"));
        } else {
            md.push_str(&format!("- **{id}** ({source}): {text}\n"));
        }
    }
    if !report.uncovered_rules.is_empty() {
        md.push('\n');
    }

    md.push_str("## Covered rules\n\n");
    if report.per_rule.is_empty() {
        md.push_str("None.\n\n");
    }
    for (id, units) in &report.per_rule {
        md.push_str(&format!("- **{id}**: {}\n", units.join(", ")));
    }
    if !report.per_rule.is_empty() {
        md.push('\n');
    }

    md.push_str("## Findings\n\n| Unit | Rules | Rationale |\n|---|---|---|\n");
    for f in &report.findings {
        let rules_cell = if let Some(err) = &f.parse_error {
            format!("parse error: {}", one_line(err))
        } else if f.rule_ids.is_empty() {
            NOT_APPLICABLE.to_string()
        } else {
            f.rule_ids.iter().map(RuleId::as_str).collect::<Vec<_>>().join(", ")
        };
        md.push_str(&format!("| {} | {} | {} |\n", f.passage_ref, rules_cell, one_line(&f.rationale)));
    }
    md
}
