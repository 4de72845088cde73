//! Concept classification of provisions: a model backend labels the
//! learnable concepts, a keyword gazetteer labels the scarce ones, and the
//! two label sets are fused.

use std::collections::BTreeMap;
use std::fmt;

use rust_stemmers::{Algorithm, Stemmer};
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::Provision;
use crate::grammar::leading_clause;
use crate::llm::{Backend, ChatMessage, CostLedger, LlmError, Role, Usage};
use crate::taxonomy::ConceptModel;

pub const DEFAULT_TEMPLATE: &str = include_str!("../assets/classification_prompt.txt");

/// Literal answer meaning "no concept occurs".
pub const NO_CONCEPT: &str = "NONE";

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error("unparseable response: {message}")]
    Parse { message: String, raw: String, usage: Usage },
    #[error("provision {0} is empty")]
    EmptyProvision(String),
    #[error("classification template: {0}")]
    Template(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Llm,
    Keyword,
    Both,
}

impl Provenance {
    fn join(self, other: Provenance) -> Provenance {
        if self == other {
            self
        } else {
            Provenance::Both
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Llm => "llm",
            Provenance::Keyword => "keyword",
            Provenance::Both => "both",
        })
    }
}

/// Concept labels of one provision with the classifier(s) that produced
/// each. The label set is exactly the key set of the provenance map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelSet {
    provenance: BTreeMap<String, Provenance>,
}

impl LabelSet {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>, source: Provenance) -> Self {
        LabelSet {
            provenance: labels.into_iter().map(|l| (l.to_string(), source)).collect(),
        }
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.provenance.keys().map(String::as_str)
    }

    pub fn provenance(&self) -> &BTreeMap<String, Provenance> {
        &self.provenance
    }

    pub fn get(&self, label: &str) -> Option<Provenance> {
        self.provenance.get(label).copied()
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("LabelSet", 2)?;
        st.serialize_field("labels", &self.labels().collect::<Vec<_>>())?;
        st.serialize_field("provenance", &self.provenance)?;
        st.end()
    }
}

/// Union of both label sets; a label present in both gets the joined
/// provenance.
pub fn fuse_labels(a: &LabelSet, b: &LabelSet) -> LabelSet {
    let mut provenance = a.provenance.clone();
    for (label, src) in &b.provenance {
        provenance
            .entry(label.clone())
            .and_modify(|p| *p = p.join(*src))
            .or_insert(*src);
    }
    LabelSet { provenance }
}

// ---------------------------------------------------------------------------
// keyword classification

/// Whole-word, case-insensitive keyword gazetteer over the scarce concepts.
/// Multi-word keywords match as contiguous word sequences.
pub struct KeywordMatcher {
    stemmer: Option<Stemmer>,
    patterns: Vec<(String, Vec<Vec<String>>)>,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl KeywordMatcher {
    pub fn new(model: &ConceptModel, stem: bool) -> Self {
        let stemmer = stem.then(|| Stemmer::create(Algorithm::English));
        let mut m = KeywordMatcher {
            stemmer,
            patterns: Vec::new(),
        };
        m.patterns = model
            .scarce()
            .map(|c| {
                let kws = c.keywords.iter().map(|k| m.tokens(k)).filter(|t| !t.is_empty()).collect();
                (c.id.clone(), kws)
            })
            .collect();
        m
    }

    fn tokens(&self, text: &str) -> Vec<String> {
        match &self.stemmer {
            Some(s) => words(text).map(|w| s.stem(&w).into_owned()).collect(),
            None => words(text).collect(),
        }
    }

    pub fn classify(&self, text: &str) -> LabelSet {
        let tokens = self.tokens(text);
        let hit = |kw: &Vec<String>| tokens.windows(kw.len()).any(|w| w == kw.as_slice());
        LabelSet::from_labels(
            self.patterns
                .iter()
                .filter(|(_, kws)| kws.iter().any(hit))
                .map(|(id, _)| id.as_str()),
            Provenance::Keyword,
        )
    }
}

pub fn classify_keywords(p: &Provision, model: &ConceptModel) -> LabelSet {
    KeywordMatcher::new(model, false).classify(&p.text)
}

// ---------------------------------------------------------------------------
// model-based classification

/// Role-structured prompt: `[system]`, `[user]` and `[assistant]` lines open
/// sections; `{concept_list}` and `{text}` are substituted everywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationTemplate {
    sections: Vec<(Role, String)>,
}

impl ClassificationTemplate {
    pub fn parse(text: &str) -> Result<Self, ClassifyError> {
        let mut sections: Vec<(Role, String)> = Vec::new();
        for line in text.lines() {
            let role = match line.trim() {
                "[system]" => Some(Role::System),
                "[user]" => Some(Role::User),
                "[assistant]" => Some(Role::Assistant),
                _ => None,
            };
            match (role, sections.last_mut()) {
                (Some(r), _) => sections.push((r, String::new())),
                (None, Some((_, body))) => {
                    body.push_str(line);
                    body.push('\n');
                }
                (None, None) if line.trim().is_empty() => {}
                (None, None) => return Err(ClassifyError::Template("text before the first role marker".into())),
            }
        }
        for (_, body) in &mut sections {
            let trimmed = body.trim_end_matches('\n').to_string();
            *body = trimmed;
        }
        let t = ClassificationTemplate { sections };
        let roles: Vec<ChatMessage> = t
            .sections
            .iter()
            .map(|(r, b)| ChatMessage { role: *r, content: b.clone() })
            .collect();
        crate::llm::validate_messages(&roles).map_err(ClassifyError::Template)?;
        for p in ["{concept_list}", "{text}"] {
            if !t.sections.iter().any(|(_, b)| b.contains(p)) {
                return Err(ClassifyError::Template(format!("missing the {p} placeholder")));
            }
        }
        Ok(t)
    }

    pub fn render(&self, model: &ConceptModel, text: &str) -> Vec<ChatMessage> {
        let concept_list = model
            .learnable()
            .map(|c| format!("{}: {}", c.id, c.name))
            .collect::<Vec<_>>()
            .join("\n");
        self.sections
            .iter()
            .map(|(role, body)| ChatMessage {
                role: *role,
                content: body.replace("{concept_list}", &concept_list).replace("{text}", text),
            })
            .collect()
    }
}

impl Default for ClassificationTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

/// Reads concept identifiers from the leading clause of a response. Only
/// learnable concepts count; `NONE` means the empty set.
pub fn parse_concepts(raw: &str, model: &ConceptModel) -> Result<LabelSet, String> {
    let (clause, _) = leading_clause(raw);
    let tokens: Vec<&str> = clause
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.contains(&NO_CONCEPT) {
        return Ok(LabelSet::default());
    }
    let found: Vec<&str> = model
        .learnable()
        .filter(|c| tokens.iter().any(|t| t.eq_ignore_ascii_case(&c.id)))
        .map(|c| c.id.as_str())
        .collect();
    if found.is_empty() {
        return Err(format!("no known concept identifier and no {NO_CONCEPT} in '{clause}'"));
    }
    Ok(LabelSet::from_labels(found, Provenance::Llm))
}

pub struct LlmClassification {
    pub labels: LabelSet,
    pub raw_response: String,
    pub usage: Usage,
}

pub fn classify_llm(
    p: &Provision,
    model: &ConceptModel,
    backend: &Backend,
    template: &ClassificationTemplate,
) -> Result<LlmClassification, ClassifyError> {
    if p.text.trim().is_empty() {
        return Err(ClassifyError::EmptyProvision(p.id.to_string()));
    }
    let completion = backend.complete(&template.render(model, &p.text))?;
    match parse_concepts(&completion.text, model) {
        Ok(labels) => Ok(LlmClassification {
            labels,
            raw_response: completion.text,
            usage: completion.usage,
        }),
        Err(message) => Err(ClassifyError::Parse {
            message,
            raw: completion.text,
            usage: completion.usage,
        }),
    }
}

/// Output record for one provision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassificationRecord {
    pub prov_id: String,
    pub text: String,
    pub labels: Vec<String>,
    pub provenance: BTreeMap<String, Provenance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

pub struct ClassifyOptions<'a> {
    /// `None` runs the keyword classifier alone.
    pub backend: Option<&'a Backend>,
    pub template: &'a ClassificationTemplate,
    pub stem_keywords: bool,
}

/// Runs model and keyword classification over every provision and fuses
/// the results. A response that cannot be parsed leaves the provision with
/// its keyword labels and records the error.
pub fn classify_provisions(
    provisions: &[Provision],
    model: &ConceptModel,
    opts: &ClassifyOptions<'_>,
    ledger: &CostLedger,
) -> Result<Vec<ClassificationRecord>, ClassifyError> {
    let matcher = KeywordMatcher::new(model, opts.stem_keywords);
    type Outcome = Option<Result<LlmClassification, ClassifyError>>;
    let llm: Vec<Outcome> = match opts.backend {
        None => provisions.iter().map(|_| None).collect(),
        Some(backend) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(backend.effective_parallelism())
                .build()
                .expect("thread pool");
            pool.install(|| {
                use rayon::prelude::*;
                provisions
                    .par_iter()
                    .map(|p| Some(classify_llm(p, model, backend, opts.template)))
                    .collect()
            })
        }
    };

    let mut out = Vec::with_capacity(provisions.len());
    for (p, outcome) in provisions.iter().zip(llm) {
        let keyword = matcher.classify(&p.text);
        let (llm_labels, raw_response, parse_error, usage) = match outcome {
            None => (LabelSet::default(), None, None, None),
            Some(Ok(c)) => (c.labels, Some(c.raw_response), None, Some(c.usage)),
            Some(Err(ClassifyError::Parse { message, raw, usage })) => {
                (LabelSet::default(), Some(raw), Some(message), Some(usage))
            }
            Some(Err(e)) => return Err(e),
        };
        if let (Some(usage), Some(backend)) = (usage, opts.backend) {
            ledger.record(&p.id.to_string(), &backend.config().model_name, &usage)?;
        }
        let fused = fuse_labels(&llm_labels, &keyword);
        out.push(ClassificationRecord {
            prov_id: p.id.to_string(),
            text: p.text.clone(),
            labels: fused.labels().map(String::from).collect(),
            provenance: fused.provenance().clone(),
            raw_response,
            parse_error,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Origin, ProvisionId};
    use crate::llm::{BackendConfig, PriceTable, StubScript};
    use crate::taxonomy::parse_concept_model;
    use proptest::prelude::*;

    fn model() -> ConceptModel {
        parse_concept_model(include_str!("../fixtures/food_safety_concepts.jsonl")).unwrap()
    }

    fn prov(text: &str) -> Provision {
        Provision {
            id: ProvisionId {
                doc_id: "d".into(),
                block: 0,
                sentence: 0,
            },
            text: text.into(),
            origin: Origin::Plain,
        }
    }

    fn labels(s: &LabelSet) -> Vec<&str> {
        s.labels().collect()
    }

    #[test]
    fn keyword_direct_containment() {
        let got = classify_keywords(&prov("Listeria is a pathogen of concern."), &model());
        assert_eq!(labels(&got), vec!["Pathogen"]);
        assert_eq!(got.get("Pathogen"), Some(Provenance::Keyword));
    }

    #[test]
    fn keyword_whole_word_only() {
        let m = ConceptModel::new(
            vec![
                crate::taxonomy::Concept {
                    id: "Other".into(),
                    name: "o".into(),
                    scarce: false,
                    keywords: vec![],
                },
                crate::taxonomy::Concept {
                    id: "Pathogen".into(),
                    name: "p".into(),
                    scarce: true,
                    keywords: vec!["pathogen".into()],
                },
            ],
            "t",
        )
        .unwrap();
        assert!(classify_keywords(&prov("The empathogenic compound is regulated."), &m).is_empty());
        assert_eq!(labels(&classify_keywords(&prov("A PATHOGEN."), &m)), vec!["Pathogen"]);
    }

    #[test]
    fn keyword_multiple_concepts_and_phrases() {
        let got = classify_keywords(
            &prov("Dried fruit must retain its natural colour and a moisture level below 20%."),
            &model(),
        );
        assert_eq!(labels(&got), vec!["Colour", "WaterContent"]);
        let got = classify_keywords(&prov("Test for E. coli and measure the water activity."), &model());
        assert_eq!(labels(&got), vec!["Pathogen", "WaterContent"]);
        assert!(classify_keywords(&prov("Water is supplied; content is checked."), &model()).get("WaterContent").is_none());
    }

    #[test]
    fn stemming_is_opt_in() {
        let m = model();
        let text = "Tomatoes showing discolourations must be removed; pathogens are tested.";
        assert_eq!(labels(&KeywordMatcher::new(&m, false).classify(text)), Vec::<&str>::new());
        assert_eq!(labels(&KeywordMatcher::new(&m, true).classify(text)), vec!["Colour", "Pathogen"]);
    }

    #[test]
    fn fusion_examples() {
        let empty = LabelSet::default();
        assert!(fuse_labels(&empty, &empty).is_empty());
        let a = LabelSet::from_labels(["Traceability"], Provenance::Llm);
        let b = LabelSet::from_labels(["Pathogen"], Provenance::Keyword);
        assert_eq!(labels(&fuse_labels(&a, &b)), vec!["Pathogen", "Traceability"]);
        let a = LabelSet::from_labels(["Pathogen"], Provenance::Llm);
        assert_eq!(fuse_labels(&a, &b).get("Pathogen"), Some(Provenance::Both));
    }

    #[test]
    fn label_set_serialization() {
        let s = fuse_labels(
            &LabelSet::from_labels(["Pathogen", "Storage"], Provenance::Llm),
            &LabelSet::from_labels(["Pathogen"], Provenance::Keyword),
        );
        assert_eq!(
            serde_json::to_string(&s).unwrap(),
            r#"{"labels":["Pathogen","Storage"],"provenance":{"Pathogen":"both","Storage":"llm"}}"#
        );
    }

    #[test]
    fn parse_concept_responses() {
        let m = model();
        assert_eq!(labels(&parse_concepts("Traceability. The provision requires records.", &m).unwrap()), vec!["Traceability"]);
        assert_eq!(labels(&parse_concepts("storage, Temperature\nBecause ...", &m).unwrap()), vec!["Storage", "Temperature"]);
        assert!(parse_concepts("NONE. Nothing relevant.", &m).unwrap().is_empty());
        assert!(parse_concepts("IrrelevantConcept", &m).is_err());
        // scarce concepts are never taken from the model
        assert!(parse_concepts("Pathogen", &m).is_err());
    }

    #[test]
    fn template_validation() {
        assert!(ClassificationTemplate::parse("[system]\n{concept_list}\n[user]\n{text}").is_ok());
        assert!(ClassificationTemplate::parse("[system]\n{concept_list}\n[user]\nno text").is_err());
        assert!(ClassificationTemplate::parse("[user]\n{text} {concept_list}").is_err());
        assert!(ClassificationTemplate::parse("stray\n[system]\n{concept_list}\n[user]\n{text}").is_err());
        let t = ClassificationTemplate::default();
        let msgs = t.render(&model(), "Keep records.");
        assert_eq!(msgs.len(), 2);
        assert!(msgs[0].content.contains("Traceability: Traceability and record keeping\nTemperature:"));
        assert!(!msgs[0].content.contains("Pathogen"));
        assert_eq!(msgs[1].content, "Keep records.");
    }

    fn backend(script: &str) -> Backend {
        Backend::stub(BackendConfig::default(), StubScript::parse(script).unwrap()).unwrap()
    }

    #[test]
    fn llm_classification_with_stub() {
        let b = backend(
            r#"{"contains": "records", "response": "Traceability. It is a record-keeping duty."}
{"contains": "odd", "response": "IrrelevantConcept"}"#,
        );
        let t = ClassificationTemplate::default();
        let got = classify_llm(&prov("The operator must keep records of each lot."), &model(), &b, &t).unwrap();
        assert_eq!(labels(&got.labels), vec!["Traceability"]);
        assert_eq!(got.labels.get("Traceability"), Some(Provenance::Llm));
        assert!(matches!(
            classify_llm(&prov("An odd sentence."), &model(), &b, &t),
            Err(ClassifyError::Parse { .. })
        ));
    }

    #[test]
    fn empty_provision_never_reaches_backend() {
        let b = backend("");
        let t = ClassificationTemplate::default();
        assert!(matches!(
            classify_llm(&prov("  "), &model(), &b, &t),
            Err(ClassifyError::EmptyProvision(_))
        ));
    }

    #[test]
    fn pipeline_fuses_and_records_parse_failures() {
        let b = backend(
            r#"{"contains": "Listeria", "response": "Testing. Sampling is required."}
{"contains": "odd", "response": "No idea."}"#,
        );
        let t = ClassificationTemplate::default();
        let provs = vec![prov("Samples must be tested for Listeria."), prov("An odd pathogen sentence.")];
        let ledger = CostLedger::new(PriceTable::free());
        let opts = ClassifyOptions {
            backend: Some(&b),
            template: &t,
            stem_keywords: false,
        };
        let recs = classify_provisions(&provs, &model(), &opts, &ledger).unwrap();
        assert_eq!(recs[0].labels, vec!["Pathogen", "Testing"]);
        assert_eq!(recs[0].provenance["Testing"], Provenance::Llm);
        assert_eq!(recs[0].provenance["Pathogen"], Provenance::Keyword);
        assert_eq!(recs[1].labels, vec!["Pathogen"]);
        assert!(recs[1].parse_error.is_some());
        assert_eq!(ledger.len(), 2);

        let keyword_only = ClassifyOptions {
            backend: None,
            template: &t,
            stem_keywords: false,
        };
        let recs = classify_provisions(&provs, &model(), &keyword_only, &CostLedger::new(PriceTable::free())).unwrap();
        assert_eq!(recs[0].labels, vec!["Pathogen"]);
        assert!(recs[0].raw_response.is_none());
    }

    fn arb_labels() -> impl Strategy<Value = LabelSet> {
        prop::collection::btree_map(
            prop::sample::select(vec!["A", "B", "C", "D"]),
            prop::sample::select(vec![Provenance::Llm, Provenance::Keyword, Provenance::Both]),
            0..4,
        )
        .prop_map(|m| LabelSet {
            provenance: m.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        })
    }

    proptest! {
        #[test]
        fn fusion_is_a_semilattice(a in arb_labels(), b in arb_labels(), c in arb_labels()) {
            prop_assert_eq!(fuse_labels(&a, &b), fuse_labels(&b, &a));
            prop_assert_eq!(fuse_labels(&fuse_labels(&a, &b), &c), fuse_labels(&a, &fuse_labels(&b, &c)));
            prop_assert_eq!(fuse_labels(&a, &a), a.clone());
        }

        #[test]
        fn keywords_ignore_case(words in prop::collection::vec(
            prop::sample::select(vec!["colour", "Moisture", "the", "firm", "SALMONELLA", "water", "content", "rules", "e", "coli"]), 0..12)
        ) {
            let text = words.join(" ");
            let m = model();
            let base = classify_keywords(&prov(&text), &m);
            prop_assert_eq!(&classify_keywords(&prov(&text.to_uppercase()), &m), &base);
            prop_assert_eq!(&classify_keywords(&prov(&text.to_lowercase()), &m), &base);
            prop_assert!(base.labels().all(|l| m.get(l).unwrap().scarce));
        }
    }
}
