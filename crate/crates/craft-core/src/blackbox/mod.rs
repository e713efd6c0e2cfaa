//! The black-box boundary: prompts go in, an N×K prediction matrix comes
//! out, and nothing else crosses — no features, no weights, no gradients.
//! Every query is metered by a [`QueryLedger`] that refuses to overspend.

pub mod client;
pub mod surrogate;
pub mod wire;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use client::RemoteOracle;
pub use surrogate::{corruption_matrix, SurrogateModel, SurrogateParams};

/// Query budget with atomic check-and-increment semantics: `used` never
/// exceeds `budget`, and a charge either succeeds completely or leaves the
/// counter untouched. Safe to share across threads.
#[derive(Debug)]
pub struct QueryLedger {
    budget: u64,
    used: AtomicU64,
}

impl QueryLedger {
    pub fn new(budget: u64) -> Self {
        Self {
            budget,
            used: AtomicU64::new(0),
        }
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> u64 {
        self.budget - self.used()
    }

    /// Consumes one query, or fails with the budget error without consuming
    /// anything. Lock-free compare-and-swap so concurrent callers can never
    /// push `used` past `budget`.
    pub fn charge(&self) -> Result<()> {
        loop {
            let current = self.used.load(Ordering::SeqCst);
            if current >= self.budget {
                return Err(Error::BudgetExhausted);
            }
            if self
                .used
                .compare_exchange(current, current + 1, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
            {
                return Ok(());
            }
        }
    }
}

/// The prediction API contract. One `predict` call scores every registered
/// image against all K class prompts and costs exactly one query;
/// registration is free. Implementations never reveal model internals.
pub trait BlackBoxOracle: Send + Sync {
    /// Caches image features (N×D_f) under `handle`. Does not charge.
    fn register_images(&self, handle: &str, features: &Matrix) -> Result<()>;

    /// Returns the N×K logit matrix for the registered images under
    /// `handle`, charging exactly one query on success.
    fn predict(&self, handle: &str, prompts: &[Matrix]) -> Result<Matrix>;

    fn queries_used(&self) -> u64;

    fn query_budget(&self) -> u64;
}

/// In-process oracle wrapping a [`SurrogateModel`]. Multiple oracles can
/// share one model (e.g. a budgeted training oracle and an unmetered-ish
/// evaluation oracle with its own separate ledger).
pub struct InProcessOracle {
    model: Arc<SurrogateModel>,
    ledger: QueryLedger,
    datasets: Mutex<HashMap<String, Arc<Matrix>>>,
}

impl InProcessOracle {
    pub fn new(model: Arc<SurrogateModel>, budget: u64) -> Self {
        Self {
            model,
            ledger: QueryLedger::new(budget),
            datasets: Mutex::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &Arc<SurrogateModel> {
        &self.model
    }

    pub fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }
}

impl BlackBoxOracle for InProcessOracle {
    fn register_images(&self, handle: &str, features: &Matrix) -> Result<()> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::InvalidArgument(
                "cannot register an empty feature matrix".into(),
            ));
        }
        if features.cols() != self.model.feat_dim() {
            return Err(Error::ShapeMismatch(format!(
                "features have dim {} but the model serves D_f = {}",
                features.cols(),
                self.model.feat_dim()
            )));
        }
        if !features.is_finite() {
            return Err(Error::InvalidArgument("features must be finite".into()));
        }
        let mut datasets = self.datasets.lock().unwrap();
        if datasets.contains_key(handle) {
            return Err(Error::DuplicateHandle(handle.to_string()));
        }
        datasets.insert(handle.to_string(), Arc::new(features.clone()));
        Ok(())
    }

    fn predict(&self, handle: &str, prompts: &[Matrix]) -> Result<Matrix> {
        let features = {
            let datasets = self.datasets.lock().unwrap();
            datasets
                .get(handle)
                .cloned()
                .ok_or_else(|| Error::UnknownHandle(handle.to_string()))?
        };
        // Validate before charging: a malformed request costs nothing.
        if prompts.len() != self.model.classes() {
            return Err(Error::ShapeMismatch(format!(
                "{} prompts for a {}-class model",
                prompts.len(),
                self.model.classes()
            )));
        }
        for p in prompts {
            if p.rows() * p.cols() != self.model.input_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "prompt is {}x{} but the model takes flattened length {}",
                    p.rows(),
                    p.cols(),
                    self.model.input_dim()
                )));
            }
            if !p.is_finite() {
                return Err(Error::InvalidArgument("prompts must be finite".into()));
            }
        }
        self.ledger.charge()?;
        self.model.predict_logits(&features, prompts)
    }

    fn queries_used(&self) -> u64 {
        self.ledger.used()
    }

    fn query_budget(&self) -> u64 {
        self.ledger.budget()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn oracle(budget: u64) -> InProcessOracle {
        let mut params = SurrogateParams::new(77, 5, 16, 64, 4);
        params.hidden = 24;
        let model = Arc::new(SurrogateModel::new(&params).unwrap());
        InProcessOracle::new(model, budget)
    }

    fn sample_prompts(rng: &mut SeededRng, k: usize) -> Vec<Matrix> {
        (0..k)
            .map(|_| Matrix::from_vec(5, 16, rng.normal_vec(80, 0.5)).unwrap())
            .collect()
    }

    #[test]
    fn registration_is_free_and_handles_are_unique() {
        let oracle = oracle(10);
        let mut rng = SeededRng::new(1);
        let features = Matrix::from_vec(160, 64, rng.normal_vec(160 * 64, 1.0)).unwrap();
        oracle.register_images("train", &features).unwrap();
        assert_eq!(oracle.queries_used(), 0);

        let err = oracle.register_images("train", &features).unwrap_err();
        assert!(matches!(err, Error::DuplicateHandle(_)), "{err}");
        // A different handle for a second dataset is fine (train vs test).
        oracle.register_images("test", &features).unwrap();
        assert_eq!(oracle.queries_used(), 0);
    }

    #[test]
    fn empty_features_rejected() {
        let oracle = oracle(10);
        assert!(oracle.register_images("x", &Matrix::zeros(0, 64)).is_err());
    }

    #[test]
    fn predict_is_deterministic_and_charges_one() {
        let oracle = oracle(10);
        let mut rng = SeededRng::new(2);
        let features = Matrix::from_vec(8, 64, rng.normal_vec(8 * 64, 1.0)).unwrap();
        oracle.register_images("d", &features).unwrap();
        let prompts = sample_prompts(&mut rng, 4);

        let a = oracle.predict("d", &prompts).unwrap();
        let b = oracle.predict("d", &prompts).unwrap();
        assert_eq!(a.data(), b.data(), "identical queries must match bitwise");
        assert_eq!((a.rows(), a.cols()), (8, 4));
        assert_eq!(oracle.queries_used(), 2);
    }

    #[test]
    fn budget_enforced_with_exact_message() {
        let oracle = oracle(1);
        let mut rng = SeededRng::new(3);
        let features = Matrix::from_vec(4, 64, rng.normal_vec(4 * 64, 1.0)).unwrap();
        oracle.register_images("d", &features).unwrap();
        let prompts = sample_prompts(&mut rng, 4);

        oracle.predict("d", &prompts).unwrap();
        assert_eq!(oracle.queries_used(), 1);
        let err = oracle.predict("d", &prompts).unwrap_err();
        assert_eq!(err.to_string(), "query budget exhausted");
        assert_eq!(oracle.queries_used(), 1, "failed call must not charge");
    }

    #[test]
    fn malformed_requests_cost_nothing() {
        let oracle = oracle(5);
        let mut rng = SeededRng::new(4);
        let features = Matrix::from_vec(4, 64, rng.normal_vec(4 * 64, 1.0)).unwrap();
        oracle.register_images("d", &features).unwrap();

        let prompts = sample_prompts(&mut rng, 4);
        assert!(matches!(
            oracle.predict("nope", &prompts),
            Err(Error::UnknownHandle(_))
        ));
        assert!(oracle.predict("d", &prompts[..3]).is_err());
        let bad = vec![Matrix::zeros(3, 3); 4];
        assert!(oracle.predict("d", &bad).is_err());
        assert_eq!(oracle.queries_used(), 0);
    }

    #[test]
    fn ledger_used_equals_successful_calls() {
        let oracle = oracle(100);
        let mut rng = SeededRng::new(5);
        let features = Matrix::from_vec(4, 64, rng.normal_vec(4 * 64, 1.0)).unwrap();
        oracle.register_images("d", &features).unwrap();
        let prompts = sample_prompts(&mut rng, 4);
        for m in 1..=5u64 {
            oracle.predict("d", &prompts).unwrap();
            assert_eq!(oracle.queries_used(), m);
        }
    }

    #[test]
    fn concurrent_charges_never_exceed_budget() {
        let ledger = Arc::new(QueryLedger::new(50));
        let mut handles = Vec::new();
        for _ in 0..8 {
            let ledger = Arc::clone(&ledger);
            handles.push(std::thread::spawn(move || {
                let mut ok = 0u64;
                for _ in 0..10 {
                    if ledger.charge().is_ok() {
                        ok += 1;
                    }
                }
                ok
            }));
        }
        let total: u64 = handles.into_iter().map(|h| h.join().unwrap()).sum();
        assert_eq!(total, 50, "exactly the budget must be granted");
        assert_eq!(ledger.used(), 50);
        assert!(ledger.charge().is_err());
    }

    #[test]
    fn separate_ledgers_share_one_model() {
        let mut params = SurrogateParams::new(88, 5, 16, 64, 4);
        params.hidden = 24;
        let model = Arc::new(SurrogateModel::new(&params).unwrap());
        let train = InProcessOracle::new(Arc::clone(&model), 2);
        let eval = InProcessOracle::new(Arc::clone(&model), 1000);

        let mut rng = SeededRng::new(6);
        let features = Matrix::from_vec(4, 64, rng.normal_vec(4 * 64, 1.0)).unwrap();
        train.register_images("d", &features).unwrap();
        eval.register_images("d", &features).unwrap();
        let prompts = sample_prompts(&mut rng, 4);

        let a = train.predict("d", &prompts).unwrap();
        let b = eval.predict("d", &prompts).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(train.queries_used(), 1);
        assert_eq!(eval.queries_used(), 1);
    }
}
