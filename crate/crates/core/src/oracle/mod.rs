//! Prompt rendering, the chat transport, reply validation and cost
//! accounting.

mod json;
mod ledger;
mod mock;
mod replies;
mod templates;
mod transport;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use json::extract_json;
pub use ledger::{CallRecord, CostLedger, Pricing, ScopeTally, Usage};
pub use mock::{Matcher, MockRule, MockScript, MockScriptError, MockTransport};
pub use replies::{
    CategorizationReply, DiversityReply, DiversitySubscores, NextActionReply, ParsedReply,
    ProposedInteraction, RefineDecision, RefineTaskReply, RefineTrajectoryReply, ReplySchema,
    TaskProposal, UNINTERACTIVE_CATEGORY,
};
pub use templates::{render, vars, PromptTemplate, RenderedPrompt, TEMPLATE_VERSION};
pub use transport::{ChatTransport, Completion, HttpTransport, TransportError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("template {template} has unbound placeholder {{{name}}}")]
    MissingPlaceholder { template: PromptTemplate, name: String },
    #[error("no JSON object found in reply")]
    NoJsonFound,
    #[error("reply violates schema: {0}")]
    SchemaViolation(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("token budget of {limit} exhausted ({used} used)")]
    BudgetExhausted { limit: u64, used: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Transport retries after the first attempt.
    pub max_retries: u32,
    /// Re-requests after an unparseable or invalid reply.
    pub max_reparse: u32,
    /// First backoff delay; doubles on every retry.
    #[serde(with = "millis")]
    pub backoff_base: Duration,
    pub max_in_flight: usize,
    /// Run-wide token cap (prompt + completion); `None` is unlimited.
    pub max_total_tokens: Option<u64>,
    pub pricing: Pricing,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            max_retries: 3,
            max_reparse: 2,
            backoff_base: Duration::from_secs(1),
            max_in_flight: 4,
            max_total_tokens: None,
            pricing: Pricing::default(),
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// A validated reply plus what it cost, summed over any re-requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleReply {
    pub raw_text: String,
    pub parsed: ParsedReply,
    pub usage: Usage,
    pub cost_usd: Decimal,
}

/// Counting semaphore bounding in-flight transport calls.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter lock") += 1;
        self.0.cv.notify_one();
    }
}

struct Shared {
    transport: Box<dyn ChatTransport>,
    config: OracleConfig,
    ledger: Arc<CostLedger>,
    limiter: Limiter,
    tokens_used: Mutex<u64>,
}

/// Shareable oracle client. Clones share the transport, limiter and ledger;
/// [`Oracle::with_scope`] tags the calls of one clone.
#[derive(Clone)]
pub struct Oracle {
    shared: Arc<Shared>,
    scope: String,
    tally: Option<Arc<ScopeTally>>,
}

impl std::fmt::Debug for Oracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Oracle")
            .field("scope", &self.scope)
            .field("config", &self.shared.config)
            .finish_non_exhaustive()
    }
}

impl Oracle {
    pub fn new(transport: Box<dyn ChatTransport>, config: OracleConfig) -> Oracle {
        let limiter = Limiter::new(config.max_in_flight);
        Oracle {
            shared: Arc::new(Shared {
                transport,
                config,
                ledger: CostLedger::new(),
                limiter,
                tokens_used: Mutex::new(0),
            }),
            scope: String::new(),
            tally: None,
        }
    }

    pub fn mock(script: MockScript, config: OracleConfig) -> Oracle {
        Oracle::new(Box::new(MockTransport::new(script)), config)
    }

    /// A handle whose calls are recorded under `scope` and summed into a
    /// fresh tally (see [`Oracle::scope_cost`]).
    pub fn with_scope(&self, scope: impl Into<String>) -> Oracle {
        Oracle {
            shared: Arc::clone(&self.shared),
            scope: scope.into(),
            tally: Some(Arc::new(ScopeTally::default())),
        }
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    /// Cost of the calls made through this scoped handle (zero if unscoped).
    pub fn scope_cost(&self) -> Decimal {
        self.tally.as_ref().map_or(Decimal::ZERO, |t| t.cost())
    }

    pub fn scope_usage(&self) -> Usage {
        self.tally.as_ref().map_or(Usage::default(), |t| t.usage())
    }

    pub fn ledger(&self) -> &Arc<CostLedger> {
        &self.shared.ledger
    }

    pub fn config(&self) -> &OracleConfig {
        &self.shared.config
    }

    pub fn tokens_used(&self) -> u64 {
        *self.shared.tokens_used.lock().expect("token counter")
    }

    /// Sends `prompt`, retrying transport failures with exponential backoff
    /// and re-requesting (with a corrective hint) when the reply does not
    /// parse or validate against `schema`.
    pub fn call(&self, prompt: &RenderedPrompt, schema: &ReplySchema) -> Result<OracleReply, OracleError> {
        debug_assert_eq!(prompt.template, schema.template());
        let mut usage = Usage::default();
        let mut cost = Decimal::ZERO;
        let mut current = prompt.clone();
        let mut last_problem = String::new();
        for _ in 0..=self.shared.config.max_reparse {
            let completion = self.send(&current)?;
            usage += completion.usage;
            cost += self.shared.config.pricing.cost(completion.usage);
            let outcome = extract_json(&completion.text).and_then(|v| schema.parse(&v));
            match outcome {
                Ok(parsed) => {
                    return Ok(OracleReply {
                        raw_text: completion.text,
                        parsed,
                        usage,
                        cost_usd: cost,
                    })
                }
                Err(e) => {
                    last_problem = e.to_string();
                    current = prompt.with_hint(&last_problem);
                }
            }
        }
        Err(OracleError::SchemaViolation(last_problem))
    }

    /// One logical transport call: budget check, rate limit, retries, and
    /// ledger bookkeeping for the successful attempt.
    fn send(&self, prompt: &RenderedPrompt) -> Result<Completion, OracleError> {
        let cfg = &self.shared.config;
        let mut attempt = 0u32;
        loop {
            self.check_budget()?;
            let result = {
                let _permit = self.shared.limiter.acquire();
                self.shared.transport.complete(prompt)
            };
            match result {
                Ok(c) => {
                    self.account(prompt.template, c.usage);
                    return Ok(c);
                }
                Err(TransportError::Retryable(_)) if attempt < cfg.max_retries => {
                    std::thread::sleep(cfg.backoff_base * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn check_budget(&self) -> Result<(), OracleError> {
        if let Some(limit) = self.shared.config.max_total_tokens {
            let used = self.tokens_used();
            if used >= limit {
                return Err(OracleError::BudgetExhausted { limit, used });
            }
        }
        Ok(())
    }

    fn account(&self, template: PromptTemplate, usage: Usage) {
        let cost = self.shared.config.pricing.cost(usage);
        *self.shared.tokens_used.lock().expect("token counter") += usage.total();
        self.shared.ledger.record(CallRecord {
            scope: self.scope.clone(),
            template,
            usage,
            cost_usd: cost,
        });
        if let Some(t) = &self.tally {
            t.add(usage, cost);
        }
    }
}

macro_rules! typed_call {
    ($(#[$m:meta])* $fn:ident, $variant:ident, $ty:ty) => {
        $(#[$m])*
        pub fn $fn(&self, prompt: &RenderedPrompt, schema: &ReplySchema) -> Result<($ty, OracleReply), OracleError> {
            let reply = self.call(prompt, schema)?;
            match &reply.parsed {
                ParsedReply::$variant(r) => Ok((r.clone(), reply)),
                other => Err(OracleError::SchemaViolation(format!(
                    "expected {} reply, got {other:?}",
                    stringify!($variant)
                ))),
            }
        }
    };
}

impl Oracle {
    typed_call!(call_categorize, Categorization, CategorizationReply);
    typed_call!(call_propose_task, TaskProposal, TaskProposal);
    typed_call!(call_next_action, NextAction, NextActionReply);
    typed_call!(call_refine_task, RefineTask, RefineTaskReply);
    typed_call!(call_refine_trajectory, RefineTrajectory, RefineTrajectoryReply);
    typed_call!(call_judge_diversity, Diversity, DiversityReply);
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::str::FromStr;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn quick() -> OracleConfig {
        OracleConfig {
            backoff_base: Duration::ZERO,
            pricing: Pricing {
                input_per_mtok: Decimal::from_str("2").unwrap(),
                output_per_mtok: Decimal::from_str("8").unwrap(),
            },
            ..OracleConfig::default()
        }
    }

    fn refine_prompt() -> RenderedPrompt {
        render(PromptTemplate::RefineTrajectory, &vars([("trajectory", "Length of trajectory: 3")]), &[]).unwrap()
    }

    fn keep3() -> serde_json::Value {
        json!({"task": "t", "score": 90, "decision": "keep", "order": [0, 1, 2],
               "modify_end": false, "append_end": false, "final_none_value": "ok",
               "drop_reason": "", "modification_reason": ""})
    }

    #[test]
    fn duplicate_order_is_rejected_after_reparse() {
        let mut bad = keep3();
        bad["decision"] = json!("refine");
        bad["order"] = json!([0, 0, 1]);
        let oracle = Oracle::mock(
            MockScript::new(vec![MockRule::always(PromptTemplate::RefineTrajectory, bad).with_usage(10, 1)]),
            quick(),
        );
        let err = oracle
            .call(&refine_prompt(), &ReplySchema::RefineTrajectory { steps: 3 })
            .unwrap_err();
        assert!(matches!(err, OracleError::SchemaViolation(_)), "{err}");
        // one original request plus two re-requests
        assert_eq!(oracle.ledger().calls(), 3);
    }

    #[test]
    fn missing_decision_is_schema_violation() {
        let mut v = keep3();
        v.as_object_mut().unwrap().remove("decision");
        let oracle = Oracle::mock(MockScript::new(vec![MockRule::always(PromptTemplate::RefineTrajectory, v)]), quick());
        let err = oracle.call(&refine_prompt(), &ReplySchema::RefineTrajectory { steps: 3 }).unwrap_err();
        assert!(err.to_string().contains("decision"), "{err}");
    }

    #[test]
    fn reparse_hint_recovers() {
        // The re-request carries the parse error as its hint.
        let script = MockScript::new(vec![
            MockRule::always(PromptTemplate::RefineTrajectory, keep3()).when("_hint", "no JSON object"),
            MockRule::always(PromptTemplate::RefineTrajectory, json!("I think you should keep it.")),
        ]);
        let oracle = Oracle::mock(script, quick());
        let (r, reply) = oracle
            .call_refine_trajectory(&refine_prompt(), &ReplySchema::RefineTrajectory { steps: 3 })
            .unwrap();
        assert_eq!(r.decision, RefineDecision::Keep);
        assert_eq!(oracle.ledger().calls(), 2);
        assert_eq!(reply.cost_usd, oracle.ledger().total_cost());
    }

    struct Flaky {
        failures: AtomicUsize,
    }

    impl ChatTransport for Flaky {
        fn complete(&self, _: &RenderedPrompt) -> Result<Completion, TransportError> {
            if self.failures.fetch_sub(1, Ordering::SeqCst) > 0 {
                Err(TransportError::Retryable("503".into()))
            } else {
                Ok(Completion {
                    text: keep3().to_string(),
                    usage: Usage { prompt_tokens: 5, completion_tokens: 5 },
                })
            }
        }
    }

    #[test]
    fn transport_retries_are_bounded() {
        let ok = Oracle::new(Box::new(Flaky { failures: AtomicUsize::new(3) }), quick());
        assert!(ok.call(&refine_prompt(), &ReplySchema::RefineTrajectory { steps: 3 }).is_ok());
        let fail = Oracle::new(Box::new(Flaky { failures: AtomicUsize::new(4) }), quick());
        let err = fail.call(&refine_prompt(), &ReplySchema::RefineTrajectory { steps: 3 }).unwrap_err();
        assert!(matches!(err, OracleError::Transport(TransportError::Retryable(_))));
        assert_eq!(fail.ledger().calls(), 0);
    }

    #[test]
    fn budget_is_enforced() {
        let cfg = OracleConfig { max_total_tokens: Some(15), ..quick() };
        let oracle = Oracle::mock(
            MockScript::new(vec![MockRule::always(PromptTemplate::RefineTrajectory, keep3()).with_usage(8, 2)]),
            cfg,
        );
        let schema = ReplySchema::RefineTrajectory { steps: 3 };
        oracle.call(&refine_prompt(), &schema).unwrap();
        oracle.call(&refine_prompt(), &schema).unwrap();
        assert!(matches!(
            oracle.call(&refine_prompt(), &schema),
            Err(OracleError::BudgetExhausted { limit: 15, used: 20 })
        ));
    }

    #[test]
    fn scopes_tally_separately() {
        let oracle = Oracle::mock(
            MockScript::new(vec![MockRule::always(PromptTemplate::RefineTrajectory, keep3()).with_usage(1000, 100)]),
            quick(),
        );
        let a = oracle.with_scope("a");
        let b = oracle.with_scope("b");
        let schema = ReplySchema::RefineTrajectory { steps: 3 };
        a.call(&refine_prompt(), &schema).unwrap();
        a.call(&refine_prompt(), &schema).unwrap();
        b.call(&refine_prompt(), &schema).unwrap();
        assert_eq!(a.scope_cost(), Decimal::from_str("0.0056").unwrap());
        assert_eq!(b.scope_cost(), Decimal::from_str("0.0028").unwrap());
        assert_eq!(oracle.ledger().total_cost(), a.scope_cost() + b.scope_cost());
        assert_eq!(oracle.ledger().records()[2].scope, "b");
    }
}
