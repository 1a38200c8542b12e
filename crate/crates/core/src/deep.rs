//! Deep agents on the dueling network: DDR (differential R-learning with a
//! batch, target-network average-reward update), DDRVIQ (RVI Q-learning with
//! a fixed reference input) and a discounted DQN baseline.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::neural::{sync_target, DuelingNet, Optimizer, OptimizerKind};
use crate::record::{config_hash, AgentKind, EvalPoint, RunRecord};
use crate::tabular::argmax;

const INIT_STREAM: u64 = 0x1a17_0000_0000_0001;
const REPLAY_STREAM: u64 = 0x4e91_0000_0000_0002;
const EVAL_STREAM: u64 = 0x5eed_e7a1_0000_0001;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Inserts, overwriting the oldest item once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Distinct positions drawn uniformly, without replacement.
    pub fn sample_indices(&mut self, batch: usize) -> Result<Vec<usize>> {
        if batch == 0 || batch > self.items.len() {
            return Err(Error::Contract(format!(
                "cannot draw {batch} items from a buffer of {}",
                self.items.len()
            )));
        }
        Ok(index::sample(&mut self.rng, self.items.len(), batch).into_vec())
    }

    pub fn sample(&mut self, batch: usize) -> Result<Vec<&Transition>> {
        let idx = self.sample_indices(batch)?;
        Ok(idx.into_iter().map(|i| &self.items[i]).collect())
    }
}

fn max_of(q: &[f64]) -> f64 {
    q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn non_empty(batch: &[&Transition]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::Contract("empty batch".into()))
    } else {
        Ok(())
    }
}

/// Regresses `online` toward per-sample targets and takes one optimizer step.
fn regress(
    online: &mut DuelingNet,
    batch: &[&Transition],
    targets: &[f64],
    optimizer: &mut Optimizer,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = online.batch_gradient(
        batch
            .iter()
            .zip(targets)
            .map(|(t, &y)| (t.state.as_slice(), t.action, y)),
    )?;
    optimizer.step(online, &grads, lr)?;
    Ok(loss)
}

/// Value step of DDR: `y = u − Ũ + max R_target(s', ·)`.
pub fn ddr_value_step(
    online: &mut DuelingNet,
    target: &DuelingNet,
    u_tilde: f64,
    batch: &[&Transition],
    optimizer: &mut Optimizer,
    lr: f64,
) -> Result<f64> {
    non_empty(batch)?;
    let targets = batch
        .iter()
        .map(|t| Ok(t.reward - u_tilde + max_of(&target.forward(&t.next_state)?)))
        .collect::<Result<Vec<_>>>()?;
    regress(online, batch, &targets, optimizer, lr)
}

/// Average-reward step of DDR. Every sample contributes, greedy or not, and
/// all value terms come from the target network:
/// `Ũ += α_U · mean[u + max R_target(s', ·) − R_target(s, a) − Ũ]`.
pub fn ddr_average_step(
    target: &DuelingNet,
    u_tilde: f64,
    batch: &[&Transition],
    alpha_u: f64,
) -> Result<f64> {
    non_empty(batch)?;
    let mut total = 0.0;
    for t in batch {
        let next = max_of(&target.forward(&t.next_state)?);
        let here = target.forward(&t.state)?[t.action];
        total += t.reward + next - here - u_tilde;
    }
    Ok(u_tilde + alpha_u * total / batch.len() as f64)
}

/// One DDR batch update: value step, then the average-reward step.
pub fn ddr_learn_batch(
    online: &mut DuelingNet,
    target: &DuelingNet,
    u_tilde: &mut f64,
    batch: &[&Transition],
    alpha_u: f64,
    optimizer: &mut Optimizer,
    lr: f64,
) -> Result<f64> {
    let loss = ddr_value_step(online, target, *u_tilde, batch, optimizer, lr)?;
    *u_tilde = ddr_average_step(target, *u_tilde, batch, alpha_u)?;
    Ok(loss)
}

/// DDRVIQ: `y = u + max Q_target(s', ·) − max Q_target(ref, ·)`.
pub fn ddrviq_learn_batch(
    online: &mut DuelingNet,
    target: &DuelingNet,
    ref_features: &[f64],
    batch: &[&Transition],
    optimizer: &mut Optimizer,
    lr: f64,
) -> Result<f64> {
    non_empty(batch)?;
    let anchor = max_of(&target.forward(ref_features)?);
    let targets = batch
        .iter()
        .map(|t| Ok(t.reward + max_of(&target.forward(&t.next_state)?) - anchor))
        .collect::<Result<Vec<_>>>()?;
    regress(online, batch, &targets, optimizer, lr)
}

/// Discounted DQN: `y = u + γ max Q_target(s', ·)`.
pub fn dqn_learn_batch(
    online: &mut DuelingNet,
    target: &DuelingNet,
    gamma: f64,
    batch: &[&Transition],
    optimizer: &mut Optimizer,
    lr: f64,
) -> Result<f64> {
    non_empty(batch)?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Domain(format!(
            "discount factor {gamma} outside [0, 1)"
        )));
    }
    let targets = batch
        .iter()
        .map(|t| Ok(t.reward + gamma * max_of(&target.forward(&t.next_state)?)))
        .collect::<Result<Vec<_>>>()?;
    regress(online, batch, &targets, optimizer, lr)
}

/// ε-greedy over the network's action values, lowest index on ties.
pub fn act<R: Rng + ?Sized>(
    net: &DuelingNet,
    features: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    let q = net.forward(features)?;
    Ok(if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        argmax(&q)
    })
}

/// Mean reward of the greedy policy over `horizon` steps, excluding the first
/// `burn_in`.
pub fn evaluate_policy(
    net: &DuelingNet,
    env: &dyn Environment,
    horizon: usize,
    burn_in: usize,
    seed: u64,
) -> Result<f64> {
    if horizon <= burn_in {
        return Err(Error::Contract("horizon must exceed the burn-in".into()));
    }
    let mut env = env.boxed_clone();
    env.reset(seed ^ EVAL_STREAM);
    let mut total = 0.0;
    for t in 0..horizon {
        let a = argmax(&net.forward(&env.encode())?);
        let u = env.step(a)?;
        if t >= burn_in {
            total += u;
        }
    }
    Ok(total / (horizon - burn_in) as f64)
}

fn default_gamma() -> f64 {
    0.9
}
fn default_alpha_u() -> f64 {
    0.01
}
fn default_lr() -> f64 {
    1e-3
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn default_batch() -> usize {
    32
}
fn default_capacity() -> usize {
    10_000
}
fn default_sync() -> usize {
    200
}
fn default_eps_start() -> f64 {
    1.0
}
fn default_eps_end() -> f64 {
    0.05
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_eval_horizon() -> usize {
    2_000
}
fn default_eval_burn_in() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepAgentConfig {
    /// Discount factor of the DQN baseline.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_alpha_u")]
    pub alpha_u: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
    /// Learning starts once the buffer holds this many items (at least one batch).
    #[serde(default)]
    pub learn_start: usize,
    #[serde(default = "default_sync")]
    pub target_sync_every: usize,
    #[serde(default = "default_eps_start")]
    pub epsilon_start: f64,
    #[serde(default = "default_eps_end")]
    pub epsilon_end: f64,
    /// Steps over which ε falls linearly; defaults to half the run.
    #[serde(default)]
    pub epsilon_decay_steps: Option<usize>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Encoded reference state of DDRVIQ, fixed for the whole run.
    #[serde(default)]
    pub ref_features: Option<Vec<f64>>,
    pub steps: usize,
    pub eval_every: usize,
    #[serde(default = "default_eval_horizon")]
    pub eval_horizon: usize,
    #[serde(default = "default_eval_burn_in")]
    pub eval_burn_in: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DeepAgentConfig {
    pub fn new(steps: usize, eval_every: usize, seed: u64) -> Self {
        Self {
            gamma: default_gamma(),
            alpha_u: default_alpha_u(),
            lr: default_lr(),
            optimizer: default_optimizer(),
            batch_size: default_batch(),
            buffer_capacity: default_capacity(),
            learn_start: 0,
            target_sync_every: default_sync(),
            epsilon_start: default_eps_start(),
            epsilon_end: default_eps_end(),
            epsilon_decay_steps: None,
            hidden: default_hidden(),
            ref_features: None,
            steps,
            eval_every,
            eval_horizon: default_eval_horizon(),
            eval_burn_in: default_eval_burn_in(),
            seed,
        }
    }

    pub fn validate(&self, kind: AgentKind, feature_dim: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(m));
        if !kind.is_deep() {
            return fail(format!("`{kind}` is not a deep agent"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if !(self.alpha_u > 0.0 && self.alpha_u <= 1.0) {
            return fail(format!("alpha_u {} outside (0, 1]", self.alpha_u));
        }
        if self.lr.is_nan() || self.lr < 0.0 {
            return fail("learning rate must be non-negative".into());
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_capacity {
            return fail("batch size must be in 1..=buffer_capacity".into());
        }
        if self.target_sync_every == 0 {
            return fail("target_sync_every must be positive".into());
        }
        for eps in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&eps) {
                return fail(format!("epsilon {eps} outside [0, 1]"));
            }
        }
        if self.steps > 0 && self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        if self.eval_horizon <= self.eval_burn_in {
            return fail("evaluation horizon must exceed the burn-in".into());
        }
        if kind == AgentKind::Ddrviq {
            match &self.ref_features {
                Some(r) if r.len() == feature_dim => {}
                Some(r) => {
                    return fail(format!(
                        "reference features have length {}, expected {feature_dim}",
                        r.len()
                    ))
                }
                None => return fail("DDRVIQ needs ref_features".into()),
            }
        }
        Ok(())
    }

    pub fn epsilon_at(&self, t: usize) -> f64 {
        let decay = self.epsilon_decay_steps.unwrap_or(self.steps / 2).max(1);
        let frac = (t as f64 / decay as f64).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Learned state at the end of a deep training run.
#[derive(Clone, Debug)]
pub struct DeepOutcome {
    pub online: DuelingNet,
    pub target: DuelingNet,
    pub u_tilde: Option<f64>,
    pub record: RunRecord,
}

pub fn train_deep(
    kind: AgentKind,
    env: &dyn Environment,
    config: &DeepAgentConfig,
) -> Result<RunRecord> {
    train_deep_full(kind, env, config).map(|o| o.record)
}

/// Runs one deep agent: one gradient step per environment step once the
/// buffer holds a batch, hard target sync every `target_sync_every` steps,
/// greedy evaluation every `eval_every` steps.
pub fn train_deep_full(
    kind: AgentKind,
    env: &dyn Environment,
    config: &DeepAgentConfig,
) -> Result<DeepOutcome> {
    train_deep_from(kind, env, config, None)
}

/// As [`train_deep_full`], optionally starting from saved parameters instead
/// of a fresh initialization.
pub fn train_deep_from(
    kind: AgentKind,
    env: &dyn Environment,
    config: &DeepAgentConfig,
    init: Option<DuelingNet>,
) -> Result<DeepOutcome> {
    config.validate(kind, env.feature_dim())?;
    let mut online = match init {
        Some(net) => {
            if net.input_dim() != env.feature_dim() || net.num_actions() != env.num_actions() {
                return Err(Error::Shape(format!(
                    "checkpoint maps {} inputs to {} actions, environment has {} and {}",
                    net.input_dim(),
                    net.num_actions(),
                    env.feature_dim(),
                    env.num_actions()
                )));
            }
            net
        }
        None => {
            let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed ^ INIT_STREAM);
            DuelingNet::new(
                env.feature_dim(),
                &config.hidden,
                env.num_actions(),
                &mut init_rng,
            )
        }
    };
    let mut target = sync_target(&online);
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity, config.seed ^ REPLAY_STREAM);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train_env = env.boxed_clone();
    train_env.reset(config.seed);
    let mut u_tilde = 0.0;
    let mut syncs = 0u64;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut series = Vec::new();
    let learn_start = config.learn_start.max(config.batch_size);

    for t in 0..config.steps {
        let state = train_env.encode();
        let action = act(&online, &state, config.epsilon_at(t), &mut rng)?;
        let reward = train_env.step(action)?;
        buffer.push(Transition {
            state,
            action,
            reward,
            next_state: train_env.encode(),
        });

        if buffer.len() >= learn_start {
            let idx = buffer.sample_indices(config.batch_size)?;
            let batch: Vec<&Transition> = idx.iter().map(|&i| &buffer.items[i]).collect();
            let loss = match kind {
                AgentKind::Ddr => ddr_learn_batch(
                    &mut online,
                    &target,
                    &mut u_tilde,
                    &batch,
                    config.alpha_u,
                    &mut optimizer,
                    config.lr,
                )?,
                AgentKind::Ddrviq => ddrviq_learn_batch(
                    &mut online,
                    &target,
                    config.ref_features.as_deref().expect("validated"),
                    &batch,
                    &mut optimizer,
                    config.lr,
                )?,
                AgentKind::Ddqn => dqn_learn_batch(
                    &mut online,
                    &target,
                    config.gamma,
                    &batch,
                    &mut optimizer,
                    config.lr,
                )?,
                _ => unreachable!("validated as deep"),
            };
            loss_sum += loss;
            loss_count += 1;
        }

        if (t + 1) % config.target_sync_every == 0 {
            target = sync_target(&online);
            syncs += 1;
        }

        if (t + 1) % config.eval_every == 0 {
            let score = evaluate_policy(
                &online,
                env,
                config.eval_horizon,
                config.eval_burn_in,
                config.seed,
            )?;
            series.push(EvalPoint {
                step: (t + 1) as u64,
                eval_avg_reward: score,
                u_tilde: (kind == AgentKind::Ddr).then_some(u_tilde),
                loss: (loss_count > 0).then(|| loss_sum / loss_count as f64),
                target_syncs: Some(syncs),
            });
            loss_sum = 0.0;
            loss_count = 0;
        }
    }

    if !online.is_finite() {
        return Err(Error::Domain("network parameters diverged".into()));
    }
    let record = RunRecord {
        agent: kind,
        env: String::new(),
        seed: config.seed,
        ref_id: None,
        config_hash: config_hash(&(kind, config)),
        series,
    };
    Ok(DeepOutcome {
        online,
        target,
        u_tilde: (kind == AgentKind::Ddr).then_some(u_tilde),
        record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{delayed_payoff_mdp, TabularEnv};
    use crate::mdp::{Outcome, TabularMdp};

    fn one_state_env() -> TabularEnv {
        TabularEnv::new(TabularMdp::new(1, 1, vec![vec![vec![Outcome::new(0, 1.0, 1.0)]]]).unwrap())
    }

    fn constant_net(c: f64, actions: usize) -> DuelingNet {
        let mut net = DuelingNet::zeros(1, &[4], actions);
        net.value.bias[0] = c;
        net
    }

    fn tr(u: f64) -> Transition {
        Transition {
            state: vec![1.0],
            action: 0,
            reward: u,
            next_state: vec![1.0],
        }
    }

    #[test]
    fn ddr_fixed_point() {
        let mut online = constant_net(3.0, 1);
        let target = constant_net(3.0, 1);
        let items = vec![tr(1.0); 8];
        let batch: Vec<&Transition> = items.iter().collect();
        let mut u = 1.0;
        let loss = ddr_learn_batch(
            &mut online,
            &target,
            &mut u,
            &batch,
            0.5,
            &mut Optimizer::sgd(),
            0.1,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(u, 1.0);
    }

    #[test]
    fn ddr_zero_rate_keeps_average() {
        let mut online = constant_net(0.0, 2);
        let target = constant_net(0.7, 2);
        let items = [tr(5.0), tr(-2.0)];
        let batch: Vec<&Transition> = items.iter().collect();
        let mut u = 0.3;
        ddr_learn_batch(
            &mut online,
            &target,
            &mut u,
            &batch,
            0.0,
            &mut Optimizer::sgd(),
            0.1,
        )
        .unwrap();
        assert_eq!(u, 0.3);
    }

    #[test]
    fn empty_batches_are_rejected() {
        let mut online = constant_net(0.0, 1);
        let target = online.clone();
        let mut opt = Optimizer::sgd();
        let mut u = 0.0;
        assert!(ddr_learn_batch(&mut online, &target, &mut u, &[], 0.1, &mut opt, 0.1).is_err());
        assert!(ddrviq_learn_batch(&mut online, &target, &[1.0], &[], &mut opt, 0.1).is_err());
        assert!(dqn_learn_batch(&mut online, &target, 0.5, &[], &mut opt, 0.1).is_err());
    }

    #[test]
    fn ddrviq_targets_are_rewards_on_zero_nets() {
        // with zero nets each sample's target is its reward, so the SGD step
        // on the value bias equals lr · mean(reward)
        let mut online = DuelingNet::zeros(1, &[], 2);
        let target = online.clone();
        let items = vec![tr(2.0); 4];
        let batch: Vec<&Transition> = items.iter().collect();
        let loss = ddrviq_learn_batch(
            &mut online,
            &target,
            &[0.5],
            &batch,
            &mut Optimizer::sgd(),
            0.1,
        )
        .unwrap();
        assert_eq!(loss, 2.0);
        assert!((online.value.bias[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn dqn_targets() {
        let mut online = DuelingNet::zeros(1, &[], 1);
        let target = online.clone();
        let items = [tr(3.0)];
        let batch: Vec<&Transition> = items.iter().collect();
        let loss = dqn_learn_batch(
            &mut online,
            &target,
            0.0,
            &batch,
            &mut Optimizer::sgd(),
            0.0,
        )
        .unwrap();
        assert_eq!(loss, 4.5);
        let mut online = constant_net(2.0, 1);
        let target = constant_net(2.0, 1);
        let items = [tr(1.0)];
        let batch: Vec<&Transition> = items.iter().collect();
        let loss = dqn_learn_batch(
            &mut online,
            &target,
            0.5,
            &batch,
            &mut Optimizer::sgd(),
            0.1,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(dqn_learn_batch(
            &mut online,
            &target,
            1.0,
            &batch,
            &mut Optimizer::sgd(),
            0.1
        )
        .is_err());
    }

    #[test]
    fn act_rules() {
        let mut net = DuelingNet::zeros(1, &[], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(act(&net, &[1.0], 0.0, &mut rng).unwrap(), 0);
        net.advantage.bias[2] = 1.0;
        assert_eq!(act(&net, &[1.0], 0.0, &mut rng).unwrap(), 2);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            counts[act(&net, &[1.0], 1.0, &mut rng).unwrap()] += 1;
        }
        assert!(
            counts.iter().all(|&c| (800..1200).contains(&c)),
            "{counts:?}"
        );
    }

    #[test]
    fn evaluation_cases() {
        let net = DuelingNet::zeros(1, &[], 1);
        assert_eq!(
            evaluate_policy(&net, &one_state_env(), 50, 10, 0).unwrap(),
            1.0
        );
        assert_eq!(
            evaluate_policy(&net, &one_state_env(), 11, 10, 0).unwrap(),
            1.0
        );
        assert!(evaluate_policy(&net, &one_state_env(), 10, 10, 0).is_err());

        // one-hot features; bias toward action 1 at s0 plays the 3-cycle
        let mut net = DuelingNet::zeros(3, &[], 2);
        net.advantage.weights[3] = 1.0;
        let env = TabularEnv::new(delayed_payoff_mdp());
        let horizon = 3001;
        let score = evaluate_policy(&net, &env, horizon, 1, 0).unwrap();
        assert!((score - 10.0 / 3.0).abs() <= 10.0 / (horizon - 1) as f64);
    }

    #[test]
    fn replay_ring_and_sampling() {
        let mut buf = ReplayBuffer::new(3, 0);
        for i in 0..5 {
            buf.push(tr(i as f64));
        }
        assert_eq!(buf.len(), 3);
        let mut rewards: Vec<f64> = buf.sample(3).unwrap().iter().map(|t| t.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
        assert!(buf.sample(4).is_err());
    }

    #[test]
    fn zero_step_deep_run() {
        let config = DeepAgentConfig::new(0, 10, 0);
        let rec = train_deep(AgentKind::Ddr, &one_state_env(), &config).unwrap();
        assert!(rec.series.is_empty());
    }

    #[test]
    fn ddrviq_requires_reference() {
        let config = DeepAgentConfig::new(10, 5, 0);
        assert!(train_deep(AgentKind::Ddrviq, &one_state_env(), &config).is_err());
        let mut config = DeepAgentConfig::new(10, 5, 0);
        config.ref_features = Some(vec![1.0, 0.0]);
        assert!(train_deep(AgentKind::Ddrviq, &one_state_env(), &config).is_err());
    }
}
