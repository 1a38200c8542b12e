//! Finite tabular MDPs, stochastic policies, and the Markov chains they induce.
//!
//! Rewards live on outcomes: each `(s, a)` carries a list of `(s', u, p)`
//! triples, so the reward set and the marginal `p(s' | s, a)` are both derived
//! from the same kernel.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on outcome probability sums and policy row sums.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Default upper bound on the number of deterministic policies we enumerate.
pub const DEFAULT_POLICY_CAP: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub next_state: usize,
    pub reward: f64,
    pub prob: f64,
}

impl Outcome {
    pub fn new(next_state: usize, reward: f64, prob: f64) -> Self {
        Self {
            next_state,
            reward,
            prob,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ViolationKind {
    NoOutcomes,
    ProbabilitySum(f64),
    StateOutOfRange(usize),
    ProbabilityOutOfRange(f64),
    NonFiniteReward,
    WrongActionCount(usize),
    WrongStateCount(usize),
}

/// One broken invariant, located at a state (and action, when it applies).
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub state: usize,
    pub action: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.action {
            Some(a) => write!(f, "(s={}, a={}): ", self.state, a)?,
            None => write!(f, "(s={}): ", self.state)?,
        }
        match &self.kind {
            ViolationKind::NoOutcomes => write!(f, "no outcomes"),
            ViolationKind::ProbabilitySum(sum) => write!(f, "probabilities sum to {sum}"),
            ViolationKind::StateOutOfRange(s) => write!(f, "state index out of range ({s})"),
            ViolationKind::ProbabilityOutOfRange(p) => {
                write!(f, "probability {p} outside (0, 1]")
            }
            ViolationKind::NonFiniteReward => write!(f, "non-finite reward"),
            ViolationKind::WrongActionCount(n) => write!(f, "expected action rows, found {n}"),
            ViolationKind::WrongStateCount(n) => write!(f, "kernel has {n} state rows"),
        }
    }
}

/// Finite MDP with a transition-reward kernel `p(s', u | s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    kernel: Vec<Vec<Vec<Outcome>>>,
}

impl TabularMdp {
    /// Builds and validates an MDP. `kernel[s][a]` lists the outcomes of `(s, a)`.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        kernel: Vec<Vec<Vec<Outcome>>>,
    ) -> Result<Self> {
        let mdp = Self::from_kernel_unchecked(num_states, num_actions, kernel);
        let report = validate(&mdp);
        if report.is_empty() {
            Ok(mdp)
        } else {
            Err(Error::InvalidMdp(report))
        }
    }

    /// Builds an MDP without checking any invariant. Pair with [`validate`].
    pub fn from_kernel_unchecked(
        num_states: usize,
        num_actions: usize,
        kernel: Vec<Vec<Vec<Outcome>>>,
    ) -> Self {
        Self {
            num_states,
            num_actions,
            kernel,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn outcomes(&self, s: usize, a: usize) -> &[Outcome] {
        &self.kernel[s][a]
    }

    /// `Σ_{s',u} p(s', u | s, a) · u`.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        self.kernel[s][a].iter().map(|o| o.prob * o.reward).sum()
    }

    /// The achievable reward set, sorted and deduplicated.
    pub fn reward_set(&self) -> Vec<f64> {
        let mut rewards: Vec<f64> = self
            .kernel
            .iter()
            .flatten()
            .flatten()
            .map(|o| o.reward)
            .collect();
        rewards.sort_by(f64::total_cmp);
        rewards.dedup();
        rewards
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.kernel
            .iter()
            .flatten()
            .flatten()
            .fold(0.0, |m, o| m.max(o.reward.abs()))
    }

    /// Samples `(reward, next_state)` for `(s, a)` by inverse CDF.
    pub fn sample<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> (f64, usize) {
        let outcomes = &self.kernel[s][a];
        let x: f64 = rng.gen();
        let mut acc = 0.0;
        for o in outcomes {
            acc += o.prob;
            if x < acc {
                return (o.reward, o.next_state);
            }
        }
        let last = outcomes.last().expect("validated kernel has outcomes");
        (last.reward, last.next_state)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: MdpFile = serde_json::from_str(text)?;
        let kernel = file
            .kernel
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|outs| {
                        outs.into_iter()
                            .map(|(s, u, p)| Outcome::new(s, u, p))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self::new(file.num_states, file.num_actions, kernel)
    }

    pub fn to_json_string(&self) -> String {
        let file = MdpFile {
            num_states: self.num_states,
            num_actions: self.num_actions,
            kernel: self
                .kernel
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|outs| {
                            outs.iter()
                                .map(|o| (o.next_state, o.reward, o.prob))
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("MDP serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct MdpFile {
    num_states: usize,
    num_actions: usize,
    kernel: Vec<Vec<Vec<(usize, f64, f64)>>>,
}

/// Checks every kernel invariant. An empty report means the MDP is valid.
pub fn validate(mdp: &TabularMdp) -> Vec<Violation> {
    let mut report = Vec::new();
    if mdp.kernel.len() != mdp.num_states || mdp.num_states == 0 {
        report.push(Violation {
            state: 0,
            action: None,
            kind: ViolationKind::WrongStateCount(mdp.kernel.len()),
        });
    }
    for (s, row) in mdp.kernel.iter().enumerate() {
        if row.len() != mdp.num_actions || mdp.num_actions == 0 {
            report.push(Violation {
                state: s,
                action: None,
                kind: ViolationKind::WrongActionCount(row.len()),
            });
        }
        for (a, outcomes) in row.iter().enumerate() {
            let at = |kind| Violation {
                state: s,
                action: Some(a),
                kind,
            };
            if outcomes.is_empty() {
                report.push(at(ViolationKind::NoOutcomes));
                continue;
            }
            for o in outcomes {
                if o.next_state >= mdp.num_states {
                    report.push(at(ViolationKind::StateOutOfRange(o.next_state)));
                }
                if !(o.prob > 0.0 && o.prob <= 1.0) {
                    report.push(at(ViolationKind::ProbabilityOutOfRange(o.prob)));
                }
                if !o.reward.is_finite() {
                    report.push(at(ViolationKind::NonFiniteReward));
                }
            }
            let sum: f64 = outcomes.iter().map(|o| o.prob).sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                report.push(at(ViolationKind::ProbabilitySum(sum)));
            }
        }
    }
    report
}

/// Row-stochastic `num_states × num_actions` action distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions || num_states == 0 || num_actions == 0 {
            return Err(Error::Contract(format!(
                "policy has {} entries, expected {num_states}x{num_actions}",
                probs.len()
            )));
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::Contract(format!(
                    "policy row {s} has a negative entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::Contract(format!("policy row {s} sums to {sum}")));
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    /// One-hot policy choosing `actions[s]` in state `s`.
    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::Contract(format!(
                    "action {a} at state {s} out of range"
                )));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Self::new(actions.len(), num_actions, probs)
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    /// The chosen action per state, if every row is one-hot.
    pub fn actions(&self) -> Option<Vec<usize>> {
        (0..self.num_states)
            .map(|s| {
                let row = self.row(s);
                let a = row.iter().position(|&p| p == 1.0)?;
                row.iter()
                    .enumerate()
                    .all(|(b, &p)| b == a || p == 0.0)
                    .then_some(a)
            })
            .collect()
    }

    pub fn is_deterministic(&self) -> bool {
        self.actions().is_some()
    }

    /// Position of a deterministic policy in the lexicographic enumeration order.
    pub fn lexicographic_index(&self) -> Option<u128> {
        let actions = self.actions()?;
        Some(
            actions
                .iter()
                .fold(0u128, |acc, &a| acc * self.num_actions as u128 + a as u128),
        )
    }
}

/// The Markov reward process a policy induces on an MDP.
#[derive(Clone, Debug)]
pub struct InducedChain {
    /// `transition[(s, s')]` is the one-step probability of moving from `s` to `s'`.
    pub transition: DMatrix<f64>,
    /// Expected one-step reward from each state.
    pub reward: DVector<f64>,
}

pub fn induced_chain(mdp: &TabularMdp, policy: &Policy) -> Result<InducedChain> {
    if policy.num_states != mdp.num_states || policy.num_actions != mdp.num_actions {
        return Err(Error::Contract(format!(
            "policy is {}x{}, MDP is {}x{}",
            policy.num_states, policy.num_actions, mdp.num_states, mdp.num_actions
        )));
    }
    let n = mdp.num_states;
    let mut transition = DMatrix::zeros(n, n);
    let mut reward = DVector::zeros(n);
    for s in 0..n {
        for a in 0..mdp.num_actions {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for o in mdp.outcomes(s, a) {
                transition[(s, o.next_state)] += pa * o.prob;
                reward[s] += pa * o.prob * o.reward;
            }
        }
    }
    Ok(InducedChain { transition, reward })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationaryDistribution {
    pub mu: Vec<f64>,
}

impl StationaryDistribution {
    pub fn as_slice(&self) -> &[f64] {
        &self.mu
    }

    /// `‖μ − μP‖_∞`.
    pub fn balance_residual(&self, transition: &DMatrix<f64>) -> f64 {
        let n = self.mu.len();
        (0..n)
            .map(|j| {
                let flow: f64 = (0..n).map(|i| self.mu[i] * transition[(i, j)]).sum();
                (flow - self.mu[j]).abs()
            })
            .fold(0.0, f64::max)
    }
}

fn check_stochastic(p: &DMatrix<f64>) -> Result<()> {
    if p.nrows() != p.ncols() || p.nrows() == 0 {
        return Err(Error::Contract(format!(
            "transition matrix is {}x{}",
            p.nrows(),
            p.ncols()
        )));
    }
    for (i, row) in p.row_iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&x| x < 0.0) {
            return Err(Error::Contract(format!(
                "transition row {i} is not a distribution (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Number of closed communicating classes in the support graph of `p`.
pub fn recurrent_class_count(p: &DMatrix<f64>) -> usize {
    let n = p.nrows();
    let mut graph = DiGraph::<(), ()>::with_capacity(n, n * n);
    let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
    for i in 0..n {
        for j in 0..n {
            if p[(i, j)] > 0.0 {
                graph.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let sccs = tarjan_scc(&graph);
    let mut component = vec![0usize; n];
    for (c, scc) in sccs.iter().enumerate() {
        for node in scc {
            component[node.index()] = c;
        }
    }
    sccs.iter()
        .enumerate()
        .filter(|(c, scc)| {
            scc.iter().all(|node| {
                let i = node.index();
                (0..n).all(|j| p[(i, j)] == 0.0 || component[j] == *c)
            })
        })
        .count()
}

/// Stationary distribution of a unichain transition matrix.
///
/// Solves `μ(P − I) = 0` with one balance equation swapped for `Σμ = 1`.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<StationaryDistribution> {
    check_stochastic(p)?;
    let classes = recurrent_class_count(p);
    if classes != 1 {
        return Err(Error::NotUnichain {
            recurrent_classes: classes,
        });
    }
    let n = p.nrows();
    let mut a = p.transpose() - DMatrix::identity(n, n);
    a.row_mut(n - 1).fill(1.0);
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let x = a.lu().solve(&b).ok_or(Error::NotUnichain {
        recurrent_classes: classes,
    })?;
    // transient states come back as tiny signed noise
    let mut mu: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = mu.iter().sum();
    mu.iter_mut().for_each(|v| *v /= total);
    Ok(StationaryDistribution { mu })
}

pub fn is_unichain(mdp: &TabularMdp, policy: &Policy) -> bool {
    induced_chain(mdp, policy)
        .map(|c| recurrent_class_count(&c.transition) == 1)
        .unwrap_or(false)
}

/// All deterministic policies of an MDP in lexicographic order of their
/// action vectors (state 0 is the most significant digit).
#[derive(Clone, Debug)]
pub struct DetPolicies {
    num_states: usize,
    num_actions: usize,
    count: u64,
    next: u64,
}

impl DetPolicies {
    pub fn total(&self) -> u64 {
        self.count
    }

    /// Action vector of the `index`-th policy.
    pub fn actions_at(&self, index: u64) -> Vec<usize> {
        let mut actions = vec![0; self.num_states];
        let mut rest = index;
        for slot in actions.iter_mut().rev() {
            *slot = (rest % self.num_actions as u64) as usize;
            rest /= self.num_actions as u64;
        }
        actions
    }

    pub fn policy_at(&self, index: u64) -> Policy {
        Policy::deterministic(self.num_actions, &self.actions_at(index))
            .expect("enumerated actions are in range")
    }
}

impl Iterator for DetPolicies {
    type Item = Policy;

    fn next(&mut self) -> Option<Policy> {
        if self.next >= self.count {
            return None;
        }
        let p = self.policy_at(self.next);
        self.next += 1;
        Some(p)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rest = (self.count - self.next) as usize;
        (rest, Some(rest))
    }
}

impl ExactSizeIterator for DetPolicies {}

pub fn enumerate_det_policies(mdp: &TabularMdp, cap: u64) -> Result<DetPolicies> {
    let count = (mdp.num_actions as u64)
        .checked_pow(mdp.num_states as u32)
        .filter(|&c| c <= cap)
        .ok_or_else(|| Error::PolicyCapExceeded {
            count: format!("{}^{}", mdp.num_actions, mdp.num_states),
            cap,
        })?;
    Ok(DetPolicies {
        num_states: mdp.num_states,
        num_actions: mdp.num_actions,
        count,
        next: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_state() -> TabularMdp {
        TabularMdp::new(1, 1, vec![vec![vec![Outcome::new(0, 1.0, 1.0)]]]).unwrap()
    }

    fn stay_or_switch() -> TabularMdp {
        TabularMdp::new(
            2,
            2,
            vec![
                vec![
                    vec![Outcome::new(0, 0.0, 1.0)],
                    vec![Outcome::new(1, 0.0, 1.0)],
                ],
                vec![
                    vec![Outcome::new(1, 0.0, 1.0)],
                    vec![Outcome::new(0, 0.0, 1.0)],
                ],
            ],
        )
        .unwrap()
    }

    #[test]
    fn valid_single_state_has_empty_report() {
        assert!(validate(&one_state()).is_empty());
    }

    #[test]
    fn probability_sum_violation_is_reported() {
        let mdp = TabularMdp::from_kernel_unchecked(
            1,
            1,
            vec![vec![vec![
                Outcome::new(0, 0.0, 0.5),
                Outcome::new(0, 1.0, 0.4),
            ]]],
        );
        let report = validate(&mdp);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].action, Some(0));
        assert!(report[0].to_string().contains("probabilities sum to 0.9"));
    }

    #[test]
    fn out_of_range_state_is_reported() {
        let mdp =
            TabularMdp::from_kernel_unchecked(1, 1, vec![vec![vec![Outcome::new(1, 0.0, 1.0)]]]);
        let report = validate(&mdp);
        assert_eq!(report.len(), 1);
        assert!(report[0].to_string().contains("state index out of range"));
    }

    #[test]
    fn empty_outcome_list_is_reported() {
        let mdp = TabularMdp::from_kernel_unchecked(1, 1, vec![vec![vec![]]]);
        assert_eq!(validate(&mdp)[0].kind, ViolationKind::NoOutcomes);
    }

    #[test]
    fn new_rejects_invalid_kernel() {
        let err = TabularMdp::new(1, 1, vec![vec![vec![Outcome::new(0, 0.0, 0.7)]]]);
        assert!(matches!(err, Err(Error::InvalidMdp(_))));
    }

    #[test]
    fn single_state_chain() {
        let chain = induced_chain(&one_state(), &Policy::uniform(1, 1)).unwrap();
        assert_eq!(chain.transition[(0, 0)], 1.0);
        assert_eq!(chain.reward[0], 1.0);
    }

    #[test]
    fn uniform_policy_on_stay_or_switch() {
        let chain = induced_chain(&stay_or_switch(), &Policy::uniform(2, 2)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(chain.transition[(i, j)], 0.5);
            }
        }
        let mu = stationary_distribution(&chain.transition).unwrap();
        assert!((mu.mu[0] - 0.5).abs() < 1e-12 && (mu.mu[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let err = induced_chain(&one_state(), &Policy::uniform(2, 1));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn trivial_stationary() {
        let p = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(stationary_distribution(&p).unwrap().mu, vec![1.0]);
    }

    #[test]
    fn two_absorbing_states_are_not_unichain() {
        let mdp = stay_or_switch();
        let stay = Policy::deterministic(2, &[0, 0]).unwrap();
        assert!(!is_unichain(&mdp, &stay));
        let chain = induced_chain(&mdp, &stay).unwrap();
        assert!(matches!(
            stationary_distribution(&chain.transition),
            Err(Error::NotUnichain {
                recurrent_classes: 2
            })
        ));
        assert!(is_unichain(
            &mdp,
            &Policy::deterministic(2, &[1, 0]).unwrap()
        ));
    }

    #[test]
    fn transient_states_get_zero_mass() {
        // 0 -> 1, 1 absorbing
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(recurrent_class_count(&p), 1);
        let mu = stationary_distribution(&p).unwrap();
        assert_eq!(mu.mu, vec![0.0, 1.0]);
    }

    #[test]
    fn policy_counts() {
        let mk = |s: usize, a: usize| {
            let kernel = (0..s)
                .map(|_| (0..a).map(|_| vec![Outcome::new(0, 0.0, 1.0)]).collect())
                .collect();
            TabularMdp::new(s, a, kernel).unwrap()
        };
        assert_eq!(
            enumerate_det_policies(&mk(1, 2), DEFAULT_POLICY_CAP)
                .unwrap()
                .total(),
            2
        );
        assert_eq!(
            enumerate_det_policies(&mk(3, 2), DEFAULT_POLICY_CAP)
                .unwrap()
                .total(),
            8
        );
        let all: Vec<_> = enumerate_det_policies(&mk(5, 3), DEFAULT_POLICY_CAP)
            .unwrap()
            .collect();
        assert_eq!(all.len(), 243);
        let mut ids: Vec<_> = all
            .iter()
            .map(|p| p.lexicographic_index().unwrap())
            .collect();
        ids.dedup();
        assert_eq!(ids, (0..243).collect::<Vec<_>>());
    }

    #[test]
    fn policy_cap_is_enforced() {
        let kernel = (0..20)
            .map(|_| (0..3).map(|_| vec![Outcome::new(0, 0.0, 1.0)]).collect())
            .collect();
        let mdp = TabularMdp::new(20, 3, kernel).unwrap();
        let err = enumerate_det_policies(&mdp, DEFAULT_POLICY_CAP).unwrap_err();
        assert!(err.to_string().contains("3^20"));
    }

    #[test]
    fn json_round_trip() {
        let mdp = stay_or_switch();
        let back = TabularMdp::from_json_str(&mdp.to_json_string()).unwrap();
        assert_eq!(mdp, back);
    }

    #[test]
    fn json_loader_rejects_invalid() {
        let text = r#"{"num_states": 1, "num_actions": 1, "kernel": [[[[0, 1.0, 0.5]]]]}"#;
        let err = TabularMdp::from_json_str(text).unwrap_err();
        assert!(err.to_string().contains("probabilities sum to 0.5"));
    }

    #[test]
    fn policy_rejects_bad_rows() {
        assert!(Policy::new(1, 2, vec![0.7, 0.7]).is_err());
        assert!(Policy::new(1, 2, vec![1.5, -0.5]).is_err());
        assert!(Policy::deterministic(2, &[2]).is_err());
    }
}
