use std::sync::{Arc, Mutex};

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::templates::PromptTemplate;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
    }
}

/// Dollar rates per million tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pricing {
    pub input_per_mtok: Decimal,
    pub output_per_mtok: Decimal,
}

impl Pricing {
    pub fn cost(&self, usage: Usage) -> Decimal {
        let million = Decimal::from(1_000_000u32);
        (Decimal::from(usage.prompt_tokens) * self.input_per_mtok
            + Decimal::from(usage.completion_tokens) * self.output_per_mtok)
            / million
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub scope: String,
    pub template: PromptTemplate,
    pub usage: Usage,
    pub cost_usd: Decimal,
}

/// Process-wide record of every oracle round trip.
#[derive(Debug, Default)]
pub struct CostLedger {
    records: Mutex<Vec<CallRecord>>,
}

impl CostLedger {
    pub fn new() -> Arc<CostLedger> {
        Arc::new(CostLedger::default())
    }

    pub fn record(&self, rec: CallRecord) {
        self.records.lock().expect("ledger lock").push(rec);
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.records.lock().expect("ledger lock").clone()
    }

    /// Removes and returns everything recorded so far.
    pub fn drain(&self) -> Vec<CallRecord> {
        std::mem::take(&mut *self.records.lock().expect("ledger lock"))
    }

    pub fn total_cost(&self) -> Decimal {
        self.records
            .lock()
            .expect("ledger lock")
            .iter()
            .map(|r| r.cost_usd)
            .sum()
    }

    pub fn total_usage(&self) -> Usage {
        let mut u = Usage::default();
        for r in self.records.lock().expect("ledger lock").iter() {
            u += r.usage;
        }
        u
    }

    pub fn calls(&self) -> usize {
        self.records.lock().expect("ledger lock").len()
    }
}

/// Running cost of one scope (an episode, a page, ...).
#[derive(Debug, Default)]
pub struct ScopeTally {
    inner: Mutex<(Usage, Decimal)>,
}

impl ScopeTally {
    pub(crate) fn add(&self, usage: Usage, cost: Decimal) {
        let mut g = self.inner.lock().expect("tally lock");
        g.0 += usage;
        g.1 += cost;
    }

    pub fn cost(&self) -> Decimal {
        self.inner.lock().expect("tally lock").1
    }

    pub fn usage(&self) -> Usage {
        self.inner.lock().expect("tally lock").0
    }
}
