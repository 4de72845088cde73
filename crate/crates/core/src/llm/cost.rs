use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{LlmError, Usage};

/// Prices per 1,000 tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub input_per_1k: f64,
    pub output_per_1k: f64,
}

/// `{"<model>": {"input_per_1k": .., "output_per_1k": ..}, ...}`
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PriceTable {
    #[serde(flatten)]
    models: BTreeMap<String, ModelPrice>,
    #[serde(skip)]
    fallback: Option<ModelPrice>,
}

impl PriceTable {
    pub fn new(models: impl IntoIterator<Item = (String, ModelPrice)>) -> Self {
        PriceTable {
            models: models.into_iter().collect(),
            fallback: None,
        }
    }

    /// Every model costs nothing; used when no price table is configured.
    pub fn free() -> Self {
        PriceTable {
            models: BTreeMap::new(),
            fallback: Some(ModelPrice {
                input_per_1k: 0.0,
                output_per_1k: 0.0,
            }),
        }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn price(&self, model: &str) -> Result<ModelPrice, LlmError> {
        self.models
            .get(model)
            .copied()
            .or(self.fallback)
            .ok_or_else(|| LlmError::UnknownModelPrice(model.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub call: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub unit: String,
    pub model: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: f64,
    pub cached: bool,
    pub monetary_cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub calls: usize,
    pub cached_calls: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: f64,
    pub monetary_cost: f64,
}

impl CostTotals {
    fn add(&mut self, r: &CostRecord) {
        self.calls += 1;
        self.cached_calls += usize::from(r.cached);
        self.prompt_tokens += r.prompt_tokens;
        self.completion_tokens += r.completion_tokens;
        self.latency_ms += r.latency_ms;
        self.monetary_cost += r.monetary_cost;
    }
}

fn price_call(prices: &PriceTable, call: usize, unit: &str, model: &str, usage: &Usage) -> Result<CostRecord, LlmError> {
    let price = prices.price(model)?;
    let monetary_cost = usage.prompt_tokens as f64 / 1000.0 * price.input_per_1k
        + usage.completion_tokens as f64 / 1000.0 * price.output_per_1k;
    Ok(CostRecord {
        call,
        unit: unit.to_string(),
        model: model.to_string(),
        prompt_tokens: usage.prompt_tokens,
        completion_tokens: usage.completion_tokens,
        latency_ms: usage.latency.as_secs_f64() * 1000.0,
        cached: usage.cached,
        monetary_cost,
    })
}

/// Prices a stream of `(model, usage)` pairs; returns the totals and the
/// per-call ledger.
pub fn record_cost<'a>(
    prices: &PriceTable,
    usages: impl IntoIterator<Item = (&'a str, Usage)>,
) -> Result<(CostTotals, Vec<CostRecord>), LlmError> {
    let ledger = CostLedger::new(prices.clone());
    for (model, usage) in usages {
        ledger.record("", model, &usage)?;
    }
    Ok((ledger.totals(), ledger.entries()))
}

/// Append-only per-call cost ledger, safe to share between threads.
pub struct CostLedger {
    prices: PriceTable,
    entries: Mutex<Vec<CostRecord>>,
}

impl CostLedger {
    pub fn new(prices: PriceTable) -> Self {
        CostLedger {
            prices,
            entries: Mutex::new(Vec::new()),
        }
    }

    pub fn record(&self, unit: &str, model: &str, usage: &Usage) -> Result<CostRecord, LlmError> {
        let mut entries = self.entries.lock().unwrap();
        let rec = price_call(&self.prices, entries.len(), unit, model, usage)?;
        entries.push(rec.clone());
        Ok(rec)
    }

    pub fn entries(&self) -> Vec<CostRecord> {
        self.entries.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn totals(&self) -> CostTotals {
        let mut t = CostTotals::default();
        for r in self.entries.lock().unwrap().iter() {
            t.add(r);
        }
        t
    }
}
