//! Naive Bayes cause attribution over final-action features.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TicketLabels;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("no training examples")]
    EmptyTrainingSet,
    #[error("cause list is empty")]
    NoCauses,
    #[error("unknown cause `{0}` in training data")]
    UnknownCause(String),
    #[error("cause `{0}` has no examples and smoothing is zero")]
    UnseenCause(String),
    #[error("feature `{feature}` never occurs with cause `{cause}` and smoothing is zero")]
    ZeroConditional { cause: String, feature: String },
    #[error("invalid priors: {0}")]
    InvalidPriors(String),
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// One labeled training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTicket {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ticket_id: Option<String>,
    pub labels: TicketLabels,
    pub cause: String,
}

/// Priors and per-cause feature conditionals. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauseModel {
    pub causes: Vec<String>,
    pub vocabulary: Vec<String>,
    pub alpha: f64,
    pub priors: Vec<f64>,
    /// `conditionals[c][f]` is P(vocabulary[f] | causes[c]).
    pub conditionals: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Auto { cause: String },
    ManualReview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    pub posterior: BTreeMap<String, f64>,
    #[serde(flatten)]
    pub decided: Decision,
    pub threshold_used: f64,
}

impl CauseModel {
    /// Build from explicit probabilities and check the model invariants.
    pub fn from_parts(
        causes: Vec<String>,
        vocabulary: Vec<String>,
        priors: Vec<f64>,
        conditionals: Vec<Vec<f64>>,
        alpha: f64,
    ) -> Result<Self, ModelError> {
        let m = Self { causes, vocabulary, alpha, priors, conditionals };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<(), ModelError> {
        if self.causes.is_empty() {
            return Err(ModelError::NoCauses);
        }
        if self.priors.len() != self.causes.len() || self.conditionals.len() != self.causes.len() {
            return Err(ModelError::Invalid("one prior and one conditional row per cause required".into()));
        }
        let sum: f64 = self.priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.priors.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ModelError::InvalidPriors(format!("priors must be probabilities summing to 1, got sum {sum}")));
        }
        for (c, row) in self.conditionals.iter().enumerate() {
            if row.len() != self.vocabulary.len() {
                return Err(ModelError::Invalid(format!("cause `{}` lacks a conditional per feature", self.causes[c])));
            }
            if let Some(f) = row.iter().position(|p| !(*p > 0.0 && *p <= 1.0)) {
                return Err(ModelError::Invalid(format!(
                    "P({} | {}) = {} is outside (0, 1]",
                    self.vocabulary[f], self.causes[c], row[f]
                )));
            }
        }
        Ok(())
    }

    /// Laplace-smoothed frequency estimates. `expert_priors`, when given,
    /// replace the empirical priors.
    pub fn fit(
        examples: &[LabeledTicket],
        causes: &[String],
        vocabulary: &[String],
        alpha: f64,
        expert_priors: Option<&BTreeMap<String, f64>>,
    ) -> Result<Self, ModelError> {
        if causes.is_empty() {
            return Err(ModelError::NoCauses);
        }
        if examples.is_empty() && alpha <= 0.0 {
            return Err(ModelError::EmptyTrainingSet);
        }
        let mut cause_count = vec![0usize; causes.len()];
        let mut feat_count = vec![vec![0usize; vocabulary.len()]; causes.len()];
        for ex in examples {
            let c = causes.iter().position(|x| *x == ex.cause).ok_or_else(|| ModelError::UnknownCause(ex.cause.clone()))?;
            cause_count[c] += 1;
            let present: BTreeSet<&str> = ex.labels.final_actions.iter().map(String::as_str).collect();
            for (f, name) in vocabulary.iter().enumerate() {
                if present.contains(name.as_str()) {
                    feat_count[c][f] += 1;
                }
            }
        }
        let total = examples.len() as f64;
        let k = causes.len() as f64;
        let mut priors: Vec<f64> = cause_count.iter().map(|&n| (n as f64 + alpha) / (total + alpha * k)).collect();
        if let Some(expert) = expert_priors {
            priors = causes
                .iter()
                .map(|c| expert.get(c).copied().ok_or_else(|| ModelError::InvalidPriors(format!("no expert prior for `{c}`"))))
                .collect::<Result<_, _>>()?;
        }
        let mut conditionals = Vec::with_capacity(causes.len());
        for c in 0..causes.len() {
            let denom = cause_count[c] as f64 + 2.0 * alpha;
            if denom == 0.0 {
                return Err(ModelError::UnseenCause(causes[c].clone()));
            }
            let row: Vec<f64> = (0..vocabulary.len())
                .map(|f| {
                    let p = (feat_count[c][f] as f64 + alpha) / denom;
                    if p == 0.0 {
                        Err(ModelError::ZeroConditional { cause: causes[c].clone(), feature: vocabulary[f].clone() })
                    } else {
                        Ok(p)
                    }
                })
                .collect::<Result<_, _>>()?;
            conditionals.push(row);
        }
        Self::from_parts(causes.to_vec(), vocabulary.to_vec(), priors, conditionals, alpha)
    }

    fn feature_indices(&self, features: &[String]) -> Vec<usize> {
        let set: BTreeSet<&str> = features.iter().map(String::as_str).collect();
        set.into_iter().filter_map(|f| self.vocabulary.iter().position(|v| v == f)).collect()
    }

    /// log P(c) + Σ log P(f|c) per cause.
    pub fn log_scores(&self, features: &[String]) -> Vec<f64> {
        let idx = self.feature_indices(features);
        (0..self.causes.len())
            .map(|c| self.priors[c].ln() + idx.iter().map(|&f| self.conditionals[c][f].ln()).sum::<f64>())
            .collect()
    }

    /// Unnormalized posterior scores P(c)·∏P(f|c).
    pub fn unnormalized(&self, features: &[String]) -> Vec<f64> {
        self.log_scores(features).into_iter().map(f64::exp).collect()
    }

    /// Normalized posterior, in cause order.
    pub fn posterior(&self, features: &[String]) -> Vec<f64> {
        let logs = self.log_scores(features);
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return vec![1.0 / logs.len() as f64; logs.len()];
        }
        let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn posterior_map(&self, features: &[String]) -> BTreeMap<String, f64> {
        self.causes.iter().cloned().zip(self.posterior(features)).collect()
    }

    /// Auto-assign the argmax cause when its posterior reaches `threshold`;
    /// ties at the top go to manual review.
    pub fn assign(&self, labels: &TicketLabels, threshold: f64) -> AssignmentResult {
        self.assign_features(&labels.final_actions, threshold)
    }

    pub fn assign_features(&self, features: &[String], threshold: f64) -> AssignmentResult {
        let post = self.posterior(features);
        let best = post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let top: Vec<usize> = (0..post.len()).filter(|&i| (post[i] - best).abs() <= 1e-12).collect();
        let decided = if top.len() == 1 && best >= threshold {
            Decision::Auto { cause: self.causes[top[0]].clone() }
        } else {
            Decision::ManualReview
        };
        AssignmentResult { posterior: self.causes.iter().cloned().zip(post).collect(), decided, threshold_used: threshold }
    }

    /// Tab-separated probability table: one row per cause, prior first.
    pub fn to_table(&self) -> String {
        let mut out = String::from("cause\tprior");
        for f in &self.vocabulary {
            write!(out, "\tP({f}|c)").unwrap();
        }
        out.push('\n');
        for (c, name) in self.causes.iter().enumerate() {
            write!(out, "{name}\t{:.6}", self.priors[c]).unwrap();
            for p in &self.conditionals[c] {
                write!(out, "\t{p:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let m: Self = serde_json::from_str(text).map_err(|e| ModelError::Invalid(e.to_string()))?;
        m.check()?;
        Ok(m)
    }
}
