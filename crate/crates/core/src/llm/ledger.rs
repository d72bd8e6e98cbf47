use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{LlmError, Purpose, Usage};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetCeilings {
    pub max_calls: Option<u64>,
    pub max_prompt_tokens: Option<u64>,
    pub max_output_tokens: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurposeUsage {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

impl PurposeUsage {
    fn add(&mut self, usage: Usage) {
        self.calls += 1;
        self.prompt_tokens += usage.prompt_tokens;
        self.output_tokens += usage.output_tokens;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub by_purpose: BTreeMap<Purpose, PurposeUsage>,
    pub total: PurposeUsage,
    pub ceilings: BudgetCeilings,
}

/// Call and token accounting. Totals only grow.
#[derive(Debug, Default)]
pub struct BudgetLedger {
    ceilings: BudgetCeilings,
    state: Mutex<LedgerSnapshot>,
}

impl BudgetLedger {
    pub fn new(ceilings: BudgetCeilings) -> Self {
        Self { ceilings, state: Mutex::new(LedgerSnapshot { ceilings, ..Default::default() }) }
    }

    /// Fails when a further call would breach a ceiling.
    pub fn check(&self) -> Result<(), LlmError> {
        let s = self.state.lock().unwrap();
        let c = &self.ceilings;
        if let Some(max) = c.max_calls {
            if s.total.calls >= max {
                return Err(LlmError::BudgetExceeded(format!("call ceiling {max} reached")));
            }
        }
        if let Some(max) = c.max_prompt_tokens {
            if s.total.prompt_tokens > max {
                return Err(LlmError::BudgetExceeded(format!("prompt token ceiling {max} exceeded")));
            }
        }
        if let Some(max) = c.max_output_tokens {
            if s.total.output_tokens > max {
                return Err(LlmError::BudgetExceeded(format!("output token ceiling {max} exceeded")));
            }
        }
        Ok(())
    }

    pub fn record(&self, purpose: Purpose, usage: Usage) {
        let mut s = self.state.lock().unwrap();
        s.by_purpose.entry(purpose).or_default().add(usage);
        s.total.add(usage);
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        self.state.lock().unwrap().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purposes_sum_to_total() {
        let ledger = BudgetLedger::default();
        ledger.record(Purpose::Judge, Usage { prompt_tokens: 10, output_tokens: 2 });
        ledger.record(Purpose::Plan, Usage { prompt_tokens: 5, output_tokens: 1 });
        ledger.record(Purpose::Judge, Usage { prompt_tokens: 7, output_tokens: 3 });
        let s = ledger.snapshot();
        let sum = s.by_purpose.values().fold(PurposeUsage::default(), |mut acc, u| {
            acc.calls += u.calls;
            acc.prompt_tokens += u.prompt_tokens;
            acc.output_tokens += u.output_tokens;
            acc
        });
        assert_eq!(sum, s.total);
        assert_eq!(s.by_purpose[&Purpose::Judge].calls, 2);
    }

    #[test]
    fn token_ceiling_halts_after_breach() {
        let ledger = BudgetLedger::new(BudgetCeilings { max_prompt_tokens: Some(10), ..Default::default() });
        ledger.record(Purpose::Judge, Usage { prompt_tokens: 10, output_tokens: 0 });
        assert!(ledger.check().is_ok());
        ledger.record(Purpose::Judge, Usage { prompt_tokens: 1, output_tokens: 0 });
        assert!(ledger.check().is_err());
    }
}
