use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EndpointConfig, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub endpoint: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub dollar_cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EndpointUsage {
    pub requests: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub price_per_1k_prompt_tokens: f64,
    pub price_per_1k_completion_tokens: f64,
}

impl EndpointUsage {
    pub fn dollar_cost(&self) -> f64 {
        cost(self.prompt_tokens, self.completion_tokens, self.price_per_1k_prompt_tokens, self.price_per_1k_completion_tokens)
    }
}

fn cost(prompt: u64, completion: u64, price_prompt: f64, price_completion: f64) -> f64 {
    prompt as f64 / 1000.0 * price_prompt + completion as f64 / 1000.0 * price_completion
}

/// Cumulative token usage per endpoint plus the individual records it was
/// summed from. Totals only grow.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub endpoints: BTreeMap<String, EndpointUsage>,
    pub records: Vec<UsageRecord>,
}

impl CostLedger {
    pub fn record(&mut self, endpoint: &EndpointConfig, usage: Usage) {
        let entry = self.endpoints.entry(endpoint.name.clone()).or_default();
        entry.price_per_1k_prompt_tokens = endpoint.price_per_1k_prompt_tokens;
        entry.price_per_1k_completion_tokens = endpoint.price_per_1k_completion_tokens;
        entry.requests += 1;
        entry.prompt_tokens += usage.prompt_tokens;
        entry.completion_tokens += usage.completion_tokens;
        self.records.push(UsageRecord {
            endpoint: endpoint.name.clone(),
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            dollar_cost: cost(
                usage.prompt_tokens,
                usage.completion_tokens,
                endpoint.price_per_1k_prompt_tokens,
                endpoint.price_per_1k_completion_tokens,
            ),
        });
    }

    pub fn dollar_cost(&self, endpoint: &str) -> f64 {
        self.endpoints.get(endpoint).map(EndpointUsage::dollar_cost).unwrap_or(0.0)
    }

    pub fn total_dollar_cost(&self) -> f64 {
        self.endpoints.values().map(EndpointUsage::dollar_cost).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub endpoint: String,
    pub requests: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub dollar_cost: f64,
}

/// One row per endpoint, ordered by endpoint name.
pub fn ledger_report(ledger: &CostLedger) -> Vec<CostRow> {
    ledger
        .endpoints
        .iter()
        .map(|(name, u)| CostRow {
            endpoint: name.clone(),
            requests: u.requests,
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
            dollar_cost: u.dollar_cost(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn endpoint(name: &str, prompt: f64, completion: f64) -> EndpointConfig {
        EndpointConfig {
            price_per_1k_prompt_tokens: prompt,
            price_per_1k_completion_tokens: completion,
            ..EndpointConfig::mock(name)
        }
    }

    #[test]
    fn empty_report() {
        assert!(ledger_report(&CostLedger::default()).is_empty());
        assert_eq!(CostLedger::default().total_dollar_cost(), 0.0);
    }

    #[test]
    fn million_prompt_tokens() {
        let mut l = CostLedger::default();
        l.record(&endpoint("teacher", 0.0015, 0.002), Usage { prompt_tokens: 1_000_000, completion_tokens: 0 });
        let rows = ledger_report(&l);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].dollar_cost - 1.5).abs() < 1e-12);
    }

    #[test]
    fn endpoints_are_independent() {
        let mut l = CostLedger::default();
        let a = endpoint("a", 1.0, 2.0);
        let b = endpoint("b", 0.5, 0.0);
        l.record(&a, Usage { prompt_tokens: 1000, completion_tokens: 500 });
        l.record(&b, Usage { prompt_tokens: 2000, completion_tokens: 100 });
        l.record(&a, Usage { prompt_tokens: 1000, completion_tokens: 0 });
        let rows = ledger_report(&l);
        assert_eq!(rows.iter().map(|r| r.endpoint.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(rows[0].requests, 2);
        assert!((rows[0].dollar_cost - 3.0).abs() < 1e-12);
        assert!((rows[1].dollar_cost - 1.0).abs() < 1e-12);
        assert!((l.total_dollar_cost() - 4.0).abs() < 1e-12);
    }
}
