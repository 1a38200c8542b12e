//! Model-free tabular learners: discounted Q-learning, RVI Q-learning and
//! R-learning, sharing one training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::record::{config_hash, AgentKind, EvalPoint, RunRecord};

/// Largest `states × actions` table the training loop will allocate.
pub const MAX_TABLE_ENTRIES: usize = 10_000_000;

// evaluation rollouts draw from their own stream
const EVAL_STREAM: u64 = 0x5eed_e7a1_0000_0001;

/// One observed transition `(s, a, u, s')`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Experience {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// Action-value table (`Q` or `R`) plus the average-reward estimate `Ũ`
/// when the learner keeps one.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueStore {
    num_actions: usize,
    table: Vec<f64>,
    u_tilde: Option<f64>,
}

impl ValueStore {
    pub fn new(num_states: usize, num_actions: usize, with_average: bool) -> Self {
        Self {
            num_actions,
            table: vec![0.0; num_states * num_actions],
            u_tilde: with_average.then_some(0.0),
        }
    }

    pub fn num_states(&self) -> usize {
        self.table.len() / self.num_actions
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.table[s * self.num_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, value: f64) {
        self.table[s * self.num_actions + a] = value;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.table[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn row_max(&self, s: usize) -> f64 {
        self.row(s)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn greedy(&self, s: usize) -> usize {
        argmax(self.row(s))
    }

    pub fn u_tilde(&self) -> Option<f64> {
        self.u_tilde
    }

    pub fn set_u_tilde(&mut self, value: f64) {
        self.u_tilde = Some(value);
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    fn apply(&mut self, s: usize, a: usize, alpha: f64, td: f64) {
        let v = &mut self.table[s * self.num_actions + a];
        *v += alpha * td;
        debug_assert!(v.is_finite(), "non-finite value at ({s}, {a})");
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Uniform action with probability `epsilon`, otherwise the greedy one.
/// Always consumes one uniform draw, plus one more when exploring.
pub fn epsilon_greedy<R: Rng + ?Sized>(q_row: &[f64], epsilon: f64, rng: &mut R) -> usize {
    assert!(!q_row.is_empty(), "empty action-value row");
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q_row.len())
    } else {
        argmax(q_row)
    }
}

/// `Q(s,a) += α (u + γ max Q(s',·) − Q(s,a))`.
pub fn q_learning_update(store: &mut ValueStore, e: &Experience, gamma: f64, alpha: f64) {
    let td = e.reward + gamma * store.row_max(e.next_state) - store.get(e.state, e.action);
    store.apply(e.state, e.action, alpha, td);
}

/// `Q(s,a) += α (u + max Q(s',·) − max Q(s_ref,·) − Q(s,a))`.
pub fn rvi_q_update(store: &mut ValueStore, e: &Experience, ref_state: usize, alpha: f64) {
    let td = e.reward + store.row_max(e.next_state)
        - store.row_max(ref_state)
        - store.get(e.state, e.action);
    store.apply(e.state, e.action, alpha, td);
}

/// `R(s,a) += α_R (u − Ũ + max R(s',·) − R(s,a))`. Leaves `Ũ` alone.
pub fn r_learning_update(store: &mut ValueStore, e: &Experience, alpha_r: f64) {
    let u_tilde = store.u_tilde.unwrap_or(0.0);
    let td = e.reward - u_tilde + store.row_max(e.next_state) - store.get(e.state, e.action);
    store.apply(e.state, e.action, alpha_r, td);
}

/// Average-reward step of R-learning, applied right after
/// [`r_learning_update`] on the same transition. `Ũ` moves only when the
/// freshly updated `R(s,a)` equals the row maximum of `s` (ties pass).
pub fn r_learning_avg_update(store: &mut ValueStore, e: &Experience, alpha_u: f64) {
    let r_sa = store.get(e.state, e.action);
    if r_sa != store.row_max(e.state) {
        return;
    }
    let u = store.u_tilde.unwrap_or(0.0);
    let next = u + alpha_u * (e.reward + store.row_max(e.next_state) - r_sa - u);
    debug_assert!(next.is_finite());
    store.u_tilde = Some(next);
}

fn default_alpha() -> f64 {
    0.1
}
fn default_alpha_u() -> f64 {
    0.01
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    0.9
}
fn default_eval_horizon() -> usize {
    10_000
}
fn default_eval_burn_in() -> usize {
    1_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Final value learning rate of a linear decay; constant when absent.
    #[serde(default)]
    pub alpha_final: Option<f64>,
    #[serde(default = "default_alpha_u")]
    pub alpha_u: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Final exploration rate of a linear anneal; constant when absent.
    #[serde(default)]
    pub epsilon_final: Option<f64>,
    /// Discount factor, used by the discounted Q-learning baseline only.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub ref_state: usize,
    pub steps: usize,
    pub eval_every: usize,
    #[serde(default = "default_eval_horizon")]
    pub eval_horizon: usize,
    #[serde(default = "default_eval_burn_in")]
    pub eval_burn_in: usize,
    #[serde(default)]
    pub seed: u64,
}

impl LearningConfig {
    pub fn new(steps: usize, eval_every: usize, seed: u64) -> Self {
        Self {
            alpha: default_alpha(),
            alpha_final: None,
            alpha_u: default_alpha_u(),
            epsilon: default_epsilon(),
            epsilon_final: None,
            gamma: default_gamma(),
            ref_state: 0,
            steps,
            eval_every,
            eval_horizon: default_eval_horizon(),
            eval_burn_in: default_eval_burn_in(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if x > 0.0 && x <= 1.0 {
                Ok(())
            } else {
                Err(Error::Contract(format!("{name} = {x} outside (0, 1]")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("alpha_u", self.alpha_u)?;
        if let Some(a) = self.alpha_final {
            unit("alpha_final", a)?;
        }
        for eps in std::iter::once(self.epsilon).chain(self.epsilon_final) {
            if !(0.0..=1.0).contains(&eps) {
                return Err(Error::Contract(format!("epsilon {eps} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Contract(format!(
                "gamma {} outside [0, 1)",
                self.gamma
            )));
        }
        if self.steps > 0 && self.eval_every == 0 {
            return Err(Error::Contract("eval_every must be positive".into()));
        }
        if self.eval_horizon <= self.eval_burn_in {
            return Err(Error::Contract(
                "evaluation horizon must exceed the burn-in".into(),
            ));
        }
        Ok(())
    }

    fn linear(&self, start: f64, end: Option<f64>, t: usize) -> f64 {
        match end {
            Some(end) if self.steps > 1 => {
                start + (end - start) * t as f64 / (self.steps - 1) as f64
            }
            _ => start,
        }
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.linear(self.alpha, self.alpha_final, t)
    }

    pub fn epsilon_at(&self, t: usize) -> f64 {
        self.linear(self.epsilon, self.epsilon_final, t)
    }
}

/// Mean reward of a greedy rollout, ignoring the first `burn_in` rewards.
pub fn evaluate_greedy_table(
    store: &ValueStore,
    template: &dyn Environment,
    horizon: usize,
    burn_in: usize,
    seed: u64,
) -> Result<f64> {
    let mut env = template.boxed_clone();
    env.reset(seed ^ EVAL_STREAM);
    let mut total = 0.0;
    for t in 0..horizon {
        let u = env.step(store.greedy(env.state_index()))?;
        if t >= burn_in {
            total += u;
        }
    }
    Ok(total / (horizon - burn_in) as f64)
}

/// Trains one tabular agent, evaluating the frozen greedy policy every
/// `eval_every` steps. Fully determined by `config.seed`.
pub fn train_tabular(
    kind: AgentKind,
    env: &dyn Environment,
    config: &LearningConfig,
) -> Result<RunRecord> {
    train_tabular_store(kind, env, config).map(|(_, record)| record)
}

/// As [`train_tabular`], also returning the learned table.
pub fn train_tabular_store(
    kind: AgentKind,
    env: &dyn Environment,
    config: &LearningConfig,
) -> Result<(ValueStore, RunRecord)> {
    if kind.is_deep() {
        return Err(Error::Contract(format!("`{kind}` is not a tabular agent")));
    }
    config.validate()?;
    let num_states = env
        .num_states()
        .filter(|&n| n.saturating_mul(env.num_actions()) <= MAX_TABLE_ENTRIES)
        .ok_or_else(|| Error::Contract("state space too large for a table".into()))?;
    if kind == AgentKind::Rviq && config.ref_state >= num_states {
        return Err(Error::Contract(format!(
            "reference state {} out of range",
            config.ref_state
        )));
    }
    let mut store = ValueStore::new(num_states, env.num_actions(), kind == AgentKind::Rlearn);
    let mut train_env = env.boxed_clone();
    train_env.reset(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut series = Vec::new();

    for t in 0..config.steps {
        let s = train_env.state_index();
        let a = epsilon_greedy(store.row(s), config.epsilon_at(t), &mut rng);
        let u = train_env.step(a)?;
        let e = Experience {
            state: s,
            action: a,
            reward: u,
            next_state: train_env.state_index(),
        };
        let alpha = config.alpha_at(t);
        match kind {
            AgentKind::Q => q_learning_update(&mut store, &e, config.gamma, alpha),
            AgentKind::Rviq => rvi_q_update(&mut store, &e, config.ref_state, alpha),
            AgentKind::Rlearn => {
                r_learning_update(&mut store, &e, alpha);
                r_learning_avg_update(&mut store, &e, config.alpha_u);
            }
            _ => unreachable!(),
        }
        if (t + 1) % config.eval_every == 0 {
            let score = evaluate_greedy_table(
                &store,
                env,
                config.eval_horizon,
                config.eval_burn_in,
                config.seed,
            )?;
            series.push(EvalPoint {
                step: (t + 1) as u64,
                eval_avg_reward: score,
                u_tilde: store.u_tilde(),
                loss: None,
                target_syncs: None,
            });
        }
    }

    let record = RunRecord {
        agent: kind,
        env: String::new(),
        seed: config.seed,
        ref_id: None,
        config_hash: config_hash(&(kind, config)),
        series,
    };
    Ok((store, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TabularEnv;
    use crate::mdp::{Outcome, TabularMdp};

    fn one_state() -> TabularEnv {
        TabularEnv::new(TabularMdp::new(1, 1, vec![vec![vec![Outcome::new(0, 1.0, 1.0)]]]).unwrap())
    }

    fn exp(s: usize, a: usize, u: f64, next: usize) -> Experience {
        Experience {
            state: s,
            action: a,
            reward: u,
            next_state: next,
        }
    }

    #[test]
    fn greedy_choices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(epsilon_greedy(&[1.0, 3.0, 2.0], 0.0, &mut rng), 1);
        assert_eq!(epsilon_greedy(&[5.0, 5.0], 0.0, &mut rng), 0);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[epsilon_greedy(&[0.0, 9.0, 1.0, 2.0], 1.0, &mut rng)] += 1;
        }
        // chi-square with 3 dof; 3-sigma-ish bound
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 3.0 + 3.0 * 6f64.sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn q_single_step_and_zero_rate() {
        let mut store = ValueStore::new(2, 2, false);
        q_learning_update(&mut store, &exp(0, 1, 1.0, 1), 0.5, 1.0);
        assert_eq!(store.get(0, 1), 1.0);
        let before = store.clone();
        q_learning_update(&mut store, &exp(0, 0, 7.0, 0), 0.5, 0.0);
        assert_eq!(store, before);
    }

    #[test]
    fn q_converges_to_geometric_value() {
        let mut store = ValueStore::new(1, 1, false);
        for _ in 0..10_000 {
            q_learning_update(&mut store, &exp(0, 0, 1.0, 0), 0.5, 0.1);
        }
        assert!((store.get(0, 0) - 2.0).abs() < 1e-3);
    }

    #[test]
    fn rvi_single_step() {
        let mut store = ValueStore::new(3, 2, false);
        rvi_q_update(&mut store, &exp(1, 0, 1.0, 2), 0, 1.0);
        assert_eq!(store.get(1, 0), 1.0);
    }

    #[test]
    fn rvi_self_reference_stays_bounded() {
        let mut store = ValueStore::new(1, 1, false);
        for _ in 0..10_000 {
            rvi_q_update(&mut store, &exp(0, 0, 3.0, 0), 0, 1.0);
            assert!(store.get(0, 0).abs() <= 3.0);
        }
        let mut store = ValueStore::new(1, 1, false);
        for _ in 0..10_000 {
            rvi_q_update(&mut store, &exp(0, 0, 3.0, 0), 0, 0.1);
        }
        // fixed point of Q += α(c − Q) is Q = c
        assert!((store.get(0, 0) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn r_learning_single_step_and_fixed_point() {
        let mut store = ValueStore::new(2, 2, true);
        r_learning_update(&mut store, &exp(0, 0, 1.0, 1), 1.0);
        assert_eq!(store.get(0, 0), 1.0);
        assert_eq!(store.u_tilde(), Some(0.0));

        let mut store = ValueStore::new(1, 1, true);
        store.set(0, 0, 4.0);
        store.set_u_tilde(2.0);
        let before = store.clone();
        r_learning_update(&mut store, &exp(0, 0, 2.0, 0), 0.7);
        assert_eq!(store, before);
    }

    #[test]
    fn r_learning_with_fixed_average_stays_bounded() {
        let mut store = ValueStore::new(1, 1, true);
        store.set_u_tilde(1.0);
        for _ in 0..1000 {
            r_learning_update(&mut store, &exp(0, 0, 1.0, 0), 0.5);
        }
        assert_eq!(store.get(0, 0), 0.0);
    }

    #[test]
    fn average_step_gate() {
        let mut store = ValueStore::new(1, 1, true);
        r_learning_avg_update(&mut store, &exp(0, 0, 1.0, 0), 0.5);
        assert_eq!(store.u_tilde(), Some(0.5));

        let mut store = ValueStore::new(2, 2, true);
        store.set(0, 1, 2.0);
        store.set_u_tilde(0.25);
        r_learning_avg_update(&mut store, &exp(0, 0, 5.0, 1), 0.5);
        assert_eq!(store.u_tilde().unwrap().to_bits(), 0.25f64.to_bits());
    }

    #[test]
    fn average_estimate_converges_on_single_state() {
        let mut store = ValueStore::new(1, 1, true);
        for _ in 0..10_000 {
            let e = exp(0, 0, 1.0, 0);
            r_learning_update(&mut store, &e, 0.1);
            r_learning_avg_update(&mut store, &e, 0.05);
        }
        assert!((store.u_tilde().unwrap() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn zero_step_run_is_empty() {
        let config = LearningConfig::new(0, 10, 1);
        let rec = train_tabular(AgentKind::Rlearn, &one_state(), &config).unwrap();
        assert!(rec.series.is_empty());
    }

    #[test]
    fn single_state_run_scores_exactly_one() {
        let config = LearningConfig::new(2000, 500, 1);
        let rec = train_tabular(AgentKind::Rlearn, &one_state(), &config).unwrap();
        assert_eq!(rec.series.len(), 4);
        assert_eq!(rec.final_eval(), Some(1.0));
        assert!(rec.series.iter().all(|p| p.u_tilde.is_some()));
        let rec = train_tabular(AgentKind::Q, &one_state(), &config).unwrap();
        assert!(rec.series.iter().all(|p| p.u_tilde.is_none()));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut config = LearningConfig::new(10, 5, 0);
        config.alpha = 0.0;
        assert!(train_tabular(AgentKind::Q, &one_state(), &config).is_err());
        let mut config = LearningConfig::new(10, 5, 0);
        config.ref_state = 4;
        assert!(train_tabular(AgentKind::Rviq, &one_state(), &config).is_err());
        let config = LearningConfig::new(10, 5, 0);
        assert!(train_tabular(AgentKind::Ddr, &one_state(), &config).is_err());
    }

    #[test]
    fn schedules_interpolate() {
        let mut config = LearningConfig::new(11, 1, 0);
        config.epsilon = 1.0;
        config.epsilon_final = Some(0.0);
        assert_eq!(config.epsilon_at(0), 1.0);
        assert!((config.epsilon_at(5) - 0.5).abs() < 1e-12);
        assert_eq!(config.epsilon_at(10), 0.0);
        assert_eq!(config.alpha_at(7), config.alpha);
    }
}
