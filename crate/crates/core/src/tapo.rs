//! Group-baseline clipped policy optimization over a tabular softmax policy:
//! group baselines, broadcast advantages, importance ratios, the clipped
//! surrogate, an exact categorical KL penalty and the ascent step.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TapoError {
    #[error("group has {0} rollouts; at least 2 are required")]
    GroupTooSmall(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Policy the KL penalty is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlReference {
    /// Snapshot taken at the start of each update round; also the ratio reference.
    #[default]
    Snapshot,
    /// The policy at the start of training, held fixed.
    Initial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TapoConfig {
    pub k_rollouts: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub lr: f64,
    pub group_batch: usize,
    pub std_normalize: bool,
    pub temperature: f64,
    /// Ascent steps taken on each sampled batch.
    pub update_epochs: usize,
    pub optimizer: OptimizerKind,
    pub kl_reference: KlReference,
}

impl Default for TapoConfig {
    fn default() -> Self {
        Self {
            k_rollouts: 8,
            epsilon: 0.2,
            beta: 0.01,
            lr: 1e-3,
            group_batch: 32,
            std_normalize: false,
            temperature: 1.0,
            update_epochs: 2,
            optimizer: OptimizerKind::Adam,
            kl_reference: KlReference::Snapshot,
        }
    }
}

impl TapoConfig {
    pub fn validate(&self) -> Result<(), TapoError> {
        let bad = |m: &str| Err(TapoError::InvalidConfig(m.to_string()));
        if self.k_rollouts < 2 {
            return Err(TapoError::GroupTooSmall(self.k_rollouts));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.group_batch == 0 || self.update_epochs == 0 {
            return bad("group_batch and update_epochs must be positive");
        }
        Ok(())
    }
}

/// Softmax policy with one logit row per state: `pi(a|s) = softmax(theta[s] / T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    temperature: f64,
    logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize, temperature: f64) -> Self {
        Self {
            n_states,
            n_actions,
            temperature,
            logits: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_logits(
        n_states: usize,
        n_actions: usize,
        temperature: f64,
        logits: Vec<f64>,
    ) -> Result<Self, TapoError> {
        if logits.len() != n_states * n_actions {
            return Err(TapoError::LengthMismatch(logits.len(), n_states * n_actions));
        }
        if logits.iter().any(|v| !v.is_finite()) || !(temperature > 0.0 && temperature.is_finite()) {
            return Err(TapoError::NonFinite("policy parameters"));
        }
        Ok(Self {
            n_states,
            n_actions,
            temperature,
            logits,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.logits[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn log_probs(&self, state: usize) -> Vec<f64> {
        let scaled: Vec<f64> = self.row(state).iter().map(|v| v / self.temperature).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        scaled.iter().map(|v| v - lse).collect()
    }

    pub fn probs(&self, state: usize) -> Vec<f64> {
        self.log_probs(state).into_iter().map(f64::exp).collect()
    }

    pub fn logp(&self, state: usize, action: usize) -> f64 {
        self.log_probs(state)[action]
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let p = self.probs(state);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, pa) in p.iter().enumerate() {
            acc += pa;
            if u < acc {
                return a;
            }
        }
        self.n_actions - 1
    }

    pub fn check_finite(&self) -> Result<(), TapoError> {
        if self.logits.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TapoError::NonFinite("policy parameters"))
        }
    }
}

/// One policy decision: the state observed and the action taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub state: usize,
    pub action: usize,
}

/// Mean reward of a group, used as its baseline.
pub fn group_baseline(rewards: &[f64]) -> Result<f64, TapoError> {
    if rewards.len() < 2 {
        return Err(TapoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(TapoError::NonFinite("rewards"));
    }
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// `A_k = R_k - b`.
pub fn advantages(rewards: &[f64], baseline: f64) -> Vec<f64> {
    rewards.iter().map(|r| r - baseline).collect()
}

/// `(R_k - b) / std(R)`; all zeros for a constant group.
pub fn standardized_advantages(rewards: &[f64], baseline: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let var = rewards.iter().map(|r| (r - baseline).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - baseline) / std).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBatch {
    pub baseline: f64,
    pub advantages: Vec<f64>,
    /// `token_advantages[k][t] = advantages[k]` for every policy token.
    pub token_advantages: Vec<Vec<f64>>,
}

pub fn advantage_batch(
    rewards: &[f64],
    token_counts: &[usize],
    std_normalize: bool,
) -> Result<AdvantageBatch, TapoError> {
    if rewards.len() != token_counts.len() {
        return Err(TapoError::LengthMismatch(rewards.len(), token_counts.len()));
    }
    let baseline = group_baseline(rewards)?;
    let adv = if std_normalize {
        standardized_advantages(rewards, baseline)
    } else {
        advantages(rewards, baseline)
    };
    let token_advantages = adv
        .iter()
        .zip(token_counts)
        .map(|(a, n)| vec![*a; *n])
        .collect();
    Ok(AdvantageBatch {
        baseline,
        advantages: adv,
        token_advantages,
    })
}

/// `r_t = exp(logp_current - logp_reference)` elementwise.
pub fn importance_ratios(logp_current: &[f64], logp_reference: &[f64]) -> Result<Vec<f64>, TapoError> {
    if logp_current.len() != logp_reference.len() {
        return Err(TapoError::LengthMismatch(logp_current.len(), logp_reference.len()));
    }
    logp_current
        .iter()
        .zip(logp_reference)
        .map(|(c, r)| {
            if c.is_finite() && r.is_finite() {
                Ok((c - r).exp())
            } else {
                Err(TapoError::NonFinite("log-probabilities"))
            }
        })
        .collect()
}

/// `min(r * A, clip(r, 1 - eps, 1 + eps) * A)`.
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the unclipped branch is the active one, i.e. the term has a
/// nonzero derivative in the ratio (for nonzero advantage).
fn unclipped_active(ratio: f64, advantage: f64, epsilon: f64) -> bool {
    !((advantage > 0.0 && ratio > 1.0 + epsilon) || (advantage < 0.0 && ratio < 1.0 - epsilon))
}

/// Per-token clipped terms and their mean.
pub fn clipped_surrogate(
    ratios: &[f64],
    token_advantages: &[f64],
    epsilon: f64,
) -> Result<(f64, Vec<f64>), TapoError> {
    if ratios.len() != token_advantages.len() {
        return Err(TapoError::LengthMismatch(ratios.len(), token_advantages.len()));
    }
    let terms: Vec<f64> = ratios
        .iter()
        .zip(token_advantages)
        .map(|(r, a)| clipped_term(*r, *a, epsilon))
        .collect();
    let mean = if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    };
    Ok((mean, terms))
}

/// `KL(p || q)` for log-probability vectors.
pub fn categorical_kl(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum()
}

/// `beta` times the mean over `states` (one entry per visit) of the exact
/// categorical KL from `policy` to `reference`.
pub fn kl_penalty(policy: &TabularPolicy, reference: &TabularPolicy, beta: f64, states: &[usize]) -> f64 {
    if states.is_empty() || beta == 0.0 {
        return 0.0;
    }
    let total: f64 = states
        .iter()
        .map(|s| categorical_kl(&policy.log_probs(*s), &reference.log_probs(*s)))
        .sum();
    beta * total / states.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub state: usize,
    pub action: usize,
    pub advantage: f64,
    /// Log-probability under the policy that sampled the batch.
    pub logp_old: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub tokens: Vec<Token>,
    pub baselines: Vec<f64>,
    pub advantages: Vec<Vec<f64>>,
}

/// Decisions and rewards of the K rollouts of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub decisions: Vec<Vec<Decision>>,
    pub rewards: Vec<f64>,
}

/// Flatten groups into loss tokens, broadcasting each rollout's advantage to
/// all of its decisions. Only policy decisions become tokens; observations
/// carry no loss.
pub fn build_token_batch(
    groups: &[GroupSample],
    sampler: &TabularPolicy,
    std_normalize: bool,
) -> Result<TokenBatch, TapoError> {
    let mut batch = TokenBatch::default();
    for g in groups {
        let counts: Vec<usize> = g.decisions.iter().map(Vec::len).collect();
        let adv = advantage_batch(&g.rewards, &counts, std_normalize)?;
        for (decs, a) in g.decisions.iter().zip(&adv.advantages) {
            for d in decs {
                batch.tokens.push(Token {
                    state: d.state,
                    action: d.action,
                    advantage: *a,
                    logp_old: sampler.logp(d.state, d.action),
                });
            }
        }
        batch.baselines.push(adv.baseline);
        batch.advantages.push(adv.advantages);
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTerms {
    pub ratios: Vec<f64>,
    pub clipped_objective: f64,
    pub kl_term: f64,
    pub epsilon: f64,
    pub beta: f64,
}

impl SurrogateTerms {
    /// The maximized quantity: clipped surrogate minus KL penalty.
    pub fn objective(&self) -> f64 {
        self.clipped_objective - self.kl_term
    }

    pub fn clip_fraction(&self) -> f64 {
        if self.ratios.is_empty() {
            return 0.0;
        }
        let n = self
            .ratios
            .iter()
            .filter(|r| (**r - 1.0).abs() > self.epsilon)
            .count();
        n as f64 / self.ratios.len() as f64
    }
}

pub fn surrogate_terms(
    policy: &TabularPolicy,
    batch: &TokenBatch,
    kl_reference: &TabularPolicy,
    epsilon: f64,
    beta: f64,
) -> Result<SurrogateTerms, TapoError> {
    let current: Vec<f64> = batch.tokens.iter().map(|t| policy.logp(t.state, t.action)).collect();
    let old: Vec<f64> = batch.tokens.iter().map(|t| t.logp_old).collect();
    let ratios = importance_ratios(&current, &old)?;
    let adv: Vec<f64> = batch.tokens.iter().map(|t| t.advantage).collect();
    let (clipped_objective, _) = clipped_surrogate(&ratios, &adv, epsilon)?;
    let states: Vec<usize> = batch.tokens.iter().map(|t| t.state).collect();
    let kl_term = kl_penalty(policy, kl_reference, beta, &states);
    Ok(SurrogateTerms {
        ratios,
        clipped_objective,
        kl_term,
        epsilon,
        beta,
    })
}

/// Objective value and its exact gradient with respect to the logits.
pub fn objective_and_grad(
    policy: &TabularPolicy,
    batch: &TokenBatch,
    kl_reference: &TabularPolicy,
    epsilon: f64,
    beta: f64,
) -> Result<(SurrogateTerms, Vec<f64>), TapoError> {
    let terms = surrogate_terms(policy, batch, kl_reference, epsilon, beta)?;
    let na = policy.n_actions;
    let inv_t = 1.0 / policy.temperature;
    let mut grad = vec![0.0; policy.logits.len()];
    let n = batch.tokens.len();
    if n == 0 {
        return Ok((terms, grad));
    }
    let inv_n = 1.0 / n as f64;
    for (tok, r) in batch.tokens.iter().zip(&terms.ratios) {
        let row = &mut grad[tok.state * na..(tok.state + 1) * na];
        let probs = policy.probs(tok.state);
        // d term / d logp = r * A on the unclipped branch, 0 when clipped
        if tok.advantage != 0.0 && unclipped_active(*r, tok.advantage, epsilon) {
            let g = r * tok.advantage * inv_n * inv_t;
            for (b, pb) in probs.iter().enumerate() {
                let indicator = if b == tok.action { 1.0 } else { 0.0 };
                row[b] += g * (indicator - pb);
            }
        }
        if beta != 0.0 {
            let lp = policy.log_probs(tok.state);
            let lq = kl_reference.log_probs(tok.state);
            let kl = categorical_kl(&lp, &lq);
            for (c, pc) in probs.iter().enumerate() {
                row[c] -= beta * inv_n * inv_t * pc * (lp[c] - lq[c] - kl);
            }
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TapoError::NonFinite("gradient"));
    }
    Ok((terms, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Ascent direction for gradient `g`.
    fn direction(&mut self, g: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        g.iter()
            .enumerate()
            .map(|(i, gi)| {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gi;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gi * gi;
                (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(n_params)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub objective: f64,
    pub clipped_objective: f64,
    pub kl_term: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// One ascent step on `clipped surrogate - beta * KL`. Ratios are taken
/// against the `logp_old` recorded in the batch; the KL reference is fixed.
pub fn tapo_update(
    policy: &TabularPolicy,
    batch: &TokenBatch,
    kl_reference: &TabularPolicy,
    cfg: &TapoConfig,
    optimizer: &mut Optimizer,
) -> Result<(TabularPolicy, UpdateStats), TapoError> {
    policy.check_finite()?;
    let (terms, grad) = objective_and_grad(policy, batch, kl_reference, cfg.epsilon, cfg.beta)?;
    let step: Vec<f64> = match optimizer {
        Optimizer::Sgd => grad.clone(),
        Optimizer::Adam(adam) => adam.direction(&grad),
    };
    let mut next = policy.clone();
    for (theta, d) in next.logits.iter_mut().zip(&step) {
        *theta += cfg.lr * d;
    }
    next.check_finite()?;
    let stats = UpdateStats {
        objective: terms.objective(),
        clipped_objective: terms.clipped_objective,
        kl_term: terms.kl_term,
        clip_fraction: terms.clip_fraction(),
        grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
    };
    Ok((next, stats))
}
