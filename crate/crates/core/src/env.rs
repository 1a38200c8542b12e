//! Continuing environments: simulated tabular MDPs, the delayed-payoff
//! criterion-gap witness, and a reduced age-of-information status-update
//! model. Small environments export their exact kernel for the DP oracles.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Outcome, TabularMdp};

/// Default cap on the number of reachable states `to_tabular` will export.
pub const DEFAULT_STATE_CAP: usize = 100_000;

/// Mixing mass spread uniformly over all next states by [`random_unichain`].
pub const UNICHAIN_MIX: f64 = 0.05;

// keeps environment and agent random streams apart for equal seeds
const ENV_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// A continuing task. `reset` only starts a run; there are no terminal states.
pub trait Environment: Send + Sync {
    fn num_actions(&self) -> usize;

    fn feature_dim(&self) -> usize;

    fn reset(&mut self, seed: u64);

    /// Applies `action` and returns the reward; the new state is held internally.
    fn step(&mut self, action: usize) -> Result<f64>;

    /// Feature encoding of the current state.
    fn encode(&self) -> Vec<f64>;

    /// Flat index of the current state, in `0..num_states()`.
    fn state_index(&self) -> usize;

    /// Size of the state index range, or `None` if it does not fit in `usize`.
    fn num_states(&self) -> Option<usize>;

    /// Exact kernel of the reachable part of the environment.
    fn to_tabular(&self, cap: usize) -> Result<TabularMdp>;

    fn boxed_clone(&self) -> Box<dyn Environment>;
}

impl Clone for Box<dyn Environment> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

fn check_action(action: usize, num_actions: usize) -> Result<()> {
    if action < num_actions {
        Ok(())
    } else {
        Err(Error::InvalidAction {
            action,
            num_actions,
        })
    }
}

/// Simulates a [`TabularMdp`], starting every run from `start`.
#[derive(Clone, Debug)]
pub struct TabularEnv {
    mdp: Arc<TabularMdp>,
    start: usize,
    state: usize,
    rng: ChaCha8Rng,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp) -> Self {
        Self::with_start(Arc::new(mdp), 0)
    }

    pub fn with_start(mdp: Arc<TabularMdp>, start: usize) -> Self {
        Self {
            mdp,
            start,
            state: start,
            rng: ChaCha8Rng::seed_from_u64(ENV_STREAM),
        }
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }
}

impl Environment for TabularEnv {
    fn num_actions(&self) -> usize {
        self.mdp.num_actions()
    }

    fn feature_dim(&self) -> usize {
        self.mdp.num_states()
    }

    fn reset(&mut self, seed: u64) {
        self.state = self.start;
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ ENV_STREAM);
    }

    fn step(&mut self, action: usize) -> Result<f64> {
        check_action(action, self.mdp.num_actions())?;
        let (u, next) = self.mdp.sample(self.state, action, &mut self.rng);
        self.state = next;
        Ok(u)
    }

    fn encode(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.mdp.num_states()];
        x[self.state] = 1.0;
        x
    }

    fn state_index(&self) -> usize {
        self.state
    }

    fn num_states(&self) -> Option<usize> {
        Some(self.mdp.num_states())
    }

    fn to_tabular(&self, cap: usize) -> Result<TabularMdp> {
        if self.mdp.num_states() > cap {
            return Err(Error::StateCapExceeded {
                count: self.mdp.num_states().to_string(),
                cap,
            });
        }
        Ok((*self.mdp).clone())
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

/// Random MDP whose every `(s, a)` row puts at least `UNICHAIN_MIX / S` mass
/// on each state, so every policy induces an irreducible chain.
pub fn random_unichain(
    num_states: usize,
    num_actions: usize,
    seed: u64,
    reward_range: (f64, f64),
) -> TabularMdp {
    assert!(
        num_states >= 1 && num_actions >= 1,
        "sizes must be positive"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = reward_range;
    let uniform = UNICHAIN_MIX / num_states as f64;
    let kernel = (0..num_states)
        .map(|_| {
            (0..num_actions)
                .map(|_| {
                    let w: Vec<f64> = (0..num_states).map(|_| rng.gen::<f64>()).collect();
                    let total: f64 = w.iter().sum();
                    let mut probs: Vec<f64> = w
                        .iter()
                        .map(|x| (1.0 - UNICHAIN_MIX) * x / total + uniform)
                        .collect();
                    // absorb rounding so the row sums to 1 to the last bit we can manage
                    let drift: f64 = probs.iter().sum::<f64>() - 1.0;
                    let largest = (0..num_states)
                        .max_by(|&i, &j| probs[i].total_cmp(&probs[j]))
                        .unwrap();
                    probs[largest] -= drift;
                    probs
                        .into_iter()
                        .enumerate()
                        .map(|(s, p)| Outcome::new(s, lo + (hi - lo) * rng.gen::<f64>(), p))
                        .collect()
                })
                .collect()
        })
        .collect();
    TabularMdp::new(num_states, num_actions, kernel).expect("generator output is valid")
}

/// Three states; at `s0` action 0 collects 1 and stays, action 1 moves to `s1`
/// for nothing. `s1 → s2` pays 0 and `s2 → s0` pays 10 under either action.
pub fn delayed_payoff_mdp() -> TabularMdp {
    let det = |s, u| vec![Outcome::new(s, u, 1.0)];
    TabularMdp::new(
        3,
        2,
        vec![
            vec![det(0, 1.0), det(1, 0.0)],
            vec![det(2, 0.0), det(2, 0.0)],
            vec![det(0, 10.0), det(0, 10.0)],
        ],
    )
    .expect("delayed payoff kernel is valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    /// Action 0 idles, action `k + 1` activates sensor `k`.
    OneHot,
    /// Action is a bit mask over sensors.
    Subset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AoiConfig {
    pub sensors: usize,
    pub users: usize,
    pub delta_max: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub energy_costs: Vec<f64>,
    pub request_prob: f64,
    pub action_mode: ActionMode,
}

impl AoiConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::EnvSpec(msg));
        if self.sensors == 0 || self.users == 0 {
            return bad("K and N must be at least 1".into());
        }
        if self.delta_max < 2 {
            return bad(format!("dmax must be at least 2, got {}", self.delta_max));
        }
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0) {
            return bad("reward weights must be non-negative".into());
        }
        if self.energy_costs.len() != self.sensors
            || self.energy_costs.iter().any(|&e| e.is_nan() || e < 0.0)
        {
            return bad("need one non-negative energy cost per sensor".into());
        }
        if !(0.0..=1.0).contains(&self.request_prob) {
            return bad(format!(
                "request probability {} outside [0, 1]",
                self.request_prob
            ));
        }
        if self.action_mode == ActionMode::Subset && self.sensors > 16 {
            return bad("subset actions support at most 16 sensors".into());
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        match self.action_mode {
            ActionMode::OneHot => self.sensors + 1,
            ActionMode::Subset => 1 << self.sensors,
        }
    }

    fn activated(&self, action: usize, k: usize) -> bool {
        match self.action_mode {
            ActionMode::OneHot => action == k + 1,
            ActionMode::Subset => action >> k & 1 == 1,
        }
    }

    /// Number of AoI counters in a state.
    pub fn state_dims(&self) -> usize {
        self.sensors * (self.users + 1)
    }

    fn state_space_label(&self) -> String {
        format!("{}^{}", self.delta_max, self.state_dims())
    }
}

/// AoI of each sensor's cached update at the edge node and of each user's
/// copy (`users × sensors`, row-major).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AoiState {
    pub ecn_aoi: Vec<u32>,
    pub user_aoi: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct AoiEnv {
    config: AoiConfig,
    state: AoiState,
    rng: ChaCha8Rng,
}

pub fn aoi_env(config: AoiConfig) -> Result<AoiEnv> {
    config.validate()?;
    let state = initial_aoi_state(&config);
    Ok(AoiEnv {
        config,
        state,
        rng: ChaCha8Rng::seed_from_u64(ENV_STREAM),
    })
}

fn initial_aoi_state(config: &AoiConfig) -> AoiState {
    AoiState {
        ecn_aoi: vec![1; config.sensors],
        user_aoi: vec![1; config.sensors * config.users],
    }
}

impl AoiEnv {
    pub fn config(&self) -> &AoiConfig {
        &self.config
    }

    pub fn state(&self) -> &AoiState {
        &self.state
    }

    fn energy(&self, action: usize) -> f64 {
        (0..self.config.sensors)
            .filter(|&k| self.config.activated(action, k))
            .map(|k| self.config.energy_costs[k])
            .sum()
    }

    fn next_ecn(&self, state: &AoiState, action: usize) -> Vec<u32> {
        let dmax = self.config.delta_max;
        state
            .ecn_aoi
            .iter()
            .enumerate()
            .map(|(k, &age)| {
                if self.config.activated(action, k) {
                    1
                } else {
                    (age + 1).min(dmax)
                }
            })
            .collect()
    }

    fn reward(&self, next: &AoiState, action: usize) -> f64 {
        let mean_age =
            next.user_aoi.iter().map(|&x| x as f64).sum::<f64>() / next.user_aoi.len() as f64;
        -(self.config.beta1 * mean_age + self.config.beta2 * self.energy(action))
    }

    /// Encodes a state the same way [`Environment::encode`] does.
    pub fn features_of(&self, state: &AoiState) -> Vec<f64> {
        let d = self.config.delta_max as f64;
        state
            .ecn_aoi
            .iter()
            .chain(&state.user_aoi)
            .map(|&x| x as f64 / d)
            .collect()
    }

    fn index_of(&self, state: &AoiState) -> usize {
        let base = self.config.delta_max as usize;
        state
            .ecn_aoi
            .iter()
            .chain(&state.user_aoi)
            .fold(0usize, |acc, &x| {
                acc.wrapping_mul(base).wrapping_add(x as usize - 1)
            })
    }
}

impl Environment for AoiEnv {
    fn num_actions(&self) -> usize {
        self.config.num_actions()
    }

    fn feature_dim(&self) -> usize {
        self.config.state_dims()
    }

    fn reset(&mut self, seed: u64) {
        self.state = initial_aoi_state(&self.config);
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ ENV_STREAM);
    }

    fn step(&mut self, action: usize) -> Result<f64> {
        check_action(action, self.num_actions())?;
        let ecn = self.next_ecn(&self.state, action);
        let (k_count, dmax, p) = (
            self.config.sensors,
            self.config.delta_max,
            self.config.request_prob,
        );
        let mut users = self.state.user_aoi.clone();
        for (i, age) in users.iter_mut().enumerate() {
            let k = i % k_count;
            *age = if self.rng.gen::<f64>() < p {
                ecn[k]
            } else {
                (*age + 1).min(dmax)
            };
        }
        let next = AoiState {
            ecn_aoi: ecn,
            user_aoi: users,
        };
        let u = self.reward(&next, action);
        self.state = next;
        Ok(u)
    }

    fn encode(&self) -> Vec<f64> {
        self.features_of(&self.state)
    }

    fn state_index(&self) -> usize {
        self.index_of(&self.state)
    }

    fn num_states(&self) -> Option<usize> {
        (self.config.delta_max as usize).checked_pow(self.config.state_dims() as u32)
    }

    fn to_tabular(&self, cap: usize) -> Result<TabularMdp> {
        to_tabular(self, cap).map(|(mdp, _)| mdp)
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

/// Environments whose one-step distributions can be enumerated exactly.
pub trait ExactModel {
    type State: Clone + Eq + Hash;

    fn initial_state(&self) -> Self::State;

    fn model_actions(&self) -> usize;

    /// `(next_state, reward, prob)` triples; equal `(next_state, reward)`
    /// pairs may repeat and are merged by the exporter.
    fn transitions(
        &self,
        state: &Self::State,
        action: usize,
    ) -> Result<Vec<(Self::State, f64, f64)>>;

    /// Human-readable size of the full state space, for error messages.
    fn state_space_label(&self) -> String;
}

impl ExactModel for TabularEnv {
    type State = usize;

    fn initial_state(&self) -> usize {
        self.start
    }

    fn model_actions(&self) -> usize {
        self.mdp.num_actions()
    }

    fn transitions(&self, state: &usize, action: usize) -> Result<Vec<(usize, f64, f64)>> {
        Ok(self
            .mdp
            .outcomes(*state, action)
            .iter()
            .map(|o| (o.next_state, o.reward, o.prob))
            .collect())
    }

    fn state_space_label(&self) -> String {
        self.mdp.num_states().to_string()
    }
}

// 2^20 request patterns per (state, action) is already far past desk scale
const MAX_RANDOM_REQUESTS: usize = 20;

impl ExactModel for AoiEnv {
    type State = AoiState;

    fn initial_state(&self) -> AoiState {
        initial_aoi_state(&self.config)
    }

    fn model_actions(&self) -> usize {
        self.config.num_actions()
    }

    fn transitions(&self, state: &AoiState, action: usize) -> Result<Vec<(AoiState, f64, f64)>> {
        let p = self.config.request_prob;
        let pairs = state.user_aoi.len();
        let random = p > 0.0 && p < 1.0;
        if random && pairs > MAX_RANDOM_REQUESTS {
            return Err(Error::StateCapExceeded {
                count: self.config.state_space_label(),
                cap: DEFAULT_STATE_CAP,
            });
        }
        let ecn = self.next_ecn(state, action);
        let dmax = self.config.delta_max;
        let patterns: u64 = if random { 1 << pairs } else { 1 };
        let mut out = Vec::with_capacity(patterns as usize);
        for mask in 0..patterns {
            let mut prob = 1.0;
            let users = state
                .user_aoi
                .iter()
                .enumerate()
                .map(|(i, &age)| {
                    let requested = if random { mask >> i & 1 == 1 } else { p == 1.0 };
                    if random {
                        prob *= if requested { p } else { 1.0 - p };
                    }
                    if requested {
                        ecn[i % self.config.sensors]
                    } else {
                        (age + 1).min(dmax)
                    }
                })
                .collect();
            let next = AoiState {
                ecn_aoi: ecn.clone(),
                user_aoi: users,
            };
            let u = self.reward(&next, action);
            out.push((next, u, prob));
        }
        Ok(out)
    }

    fn state_space_label(&self) -> String {
        self.config.state_space_label()
    }
}

/// Bijection between exported tabular indices and model states.
#[derive(Clone, Debug)]
pub struct StateIndexer<S> {
    states: Vec<S>,
    index: HashMap<S, usize>,
}

impl<S: Clone + Eq + Hash> StateIndexer<S> {
    fn new() -> Self {
        Self {
            states: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, state: S) -> (usize, bool) {
        if let Some(&i) = self.index.get(&state) {
            return (i, false);
        }
        let i = self.states.len();
        self.index.insert(state.clone(), i);
        self.states.push(state);
        (i, true)
    }

    pub fn index_of(&self, state: &S) -> Option<usize> {
        self.index.get(state).copied()
    }

    pub fn state(&self, index: usize) -> &S {
        &self.states[index]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Exports the states reachable from the initial state, in breadth-first order.
pub fn to_tabular<M: ExactModel>(
    model: &M,
    cap: usize,
) -> Result<(TabularMdp, StateIndexer<M::State>)> {
    let num_actions = model.model_actions();
    let mut indexer = StateIndexer::new();
    let mut queue = VecDeque::new();
    let (start, _) = indexer.insert(model.initial_state());
    queue.push_back(start);
    let mut kernel: Vec<Vec<Vec<Outcome>>> = Vec::new();
    while let Some(s) = queue.pop_front() {
        let state = indexer.state(s).clone();
        let mut row = Vec::with_capacity(num_actions);
        for a in 0..num_actions {
            let mut outcomes: Vec<Outcome> = Vec::new();
            for (next, u, p) in model.transitions(&state, a)? {
                if p == 0.0 {
                    continue;
                }
                let (j, fresh) = indexer.insert(next);
                if fresh {
                    if indexer.len() > cap {
                        return Err(Error::StateCapExceeded {
                            count: format!(
                                "more than {cap} reachable (full space {})",
                                model.state_space_label()
                            ),
                            cap,
                        });
                    }
                    queue.push_back(j);
                }
                match outcomes
                    .iter_mut()
                    .find(|o| o.next_state == j && o.reward == u)
                {
                    Some(o) => o.prob += p,
                    None => outcomes.push(Outcome::new(j, u, p)),
                }
            }
            row.push(outcomes);
        }
        debug_assert_eq!(kernel.len(), s);
        kernel.push(row);
    }
    let mdp = TabularMdp::new(indexer.len(), num_actions, kernel)?;
    Ok((mdp, indexer))
}

/// Parsed form of the environment spec strings accepted on the command line:
/// `random:S=5,A=2,seed=7`, `delayed`, `aoi:K=2,N=2,dmax=8,b1=1,b2=1,p=0.5`,
/// or `file:<path>` for an MDP JSON document.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvSpec {
    Random {
        states: usize,
        actions: usize,
        seed: u64,
        reward_lo: f64,
        reward_hi: f64,
    },
    Delayed,
    Aoi(AoiConfig),
    File(String),
}

fn parse_fields(body: &str) -> Result<Vec<(String, String)>> {
    body.split(',')
        .filter(|f| !f.trim().is_empty())
        .map(|field| {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::EnvSpec(format!("field `{field}` is not key=value")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::EnvSpec(format!("invalid value `{value}` for field `{key}`")))
}

fn require<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::EnvSpec(format!("missing field `{key}`")))
}

impl FromStr for EnvSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, body) = s.split_once(':').unwrap_or((s, ""));
        match kind.trim() {
            "delayed" if body.is_empty() => Ok(EnvSpec::Delayed),
            "delayed" => Err(Error::EnvSpec("`delayed` takes no fields".into())),
            "file" if !body.is_empty() => Ok(EnvSpec::File(body.to_string())),
            "file" => Err(Error::EnvSpec("missing path after `file:`".into())),
            "random" => {
                let (mut states, mut actions, mut seed) = (None, None, None);
                let (mut lo, mut hi) = (0.0, 1.0);
                for (k, v) in parse_fields(body)? {
                    match k.as_str() {
                        "S" => states = Some(parse_value(&k, &v)?),
                        "A" => actions = Some(parse_value(&k, &v)?),
                        "seed" => seed = Some(parse_value(&k, &v)?),
                        "lo" => lo = parse_value(&k, &v)?,
                        "hi" => hi = parse_value(&k, &v)?,
                        _ => return Err(Error::EnvSpec(format!("unknown field `{k}`"))),
                    }
                }
                let states: usize = require(states, "S")?;
                let actions: usize = require(actions, "A")?;
                if states == 0 {
                    return Err(Error::EnvSpec("field `S` must be at least 1".into()));
                }
                if actions == 0 {
                    return Err(Error::EnvSpec("field `A` must be at least 1".into()));
                }
                Ok(EnvSpec::Random {
                    states,
                    actions,
                    seed: require(seed, "seed")?,
                    reward_lo: lo,
                    reward_hi: hi,
                })
            }
            "aoi" => {
                let (mut k_, mut n_, mut dmax, mut p) = (None, None, None, None);
                let (mut b1, mut b2, mut e) = (1.0, 1.0, 1.0);
                let mut mode = ActionMode::OneHot;
                for (k, v) in parse_fields(body)? {
                    match k.as_str() {
                        "K" => k_ = Some(parse_value(&k, &v)?),
                        "N" => n_ = Some(parse_value(&k, &v)?),
                        "dmax" => dmax = Some(parse_value(&k, &v)?),
                        "p" => p = Some(parse_value(&k, &v)?),
                        "b1" => b1 = parse_value(&k, &v)?,
                        "b2" => b2 = parse_value(&k, &v)?,
                        "e" => e = parse_value(&k, &v)?,
                        "mode" => {
                            mode = match v.as_str() {
                                "onehot" => ActionMode::OneHot,
                                "subset" => ActionMode::Subset,
                                _ => {
                                    return Err(Error::EnvSpec(format!(
                                        "invalid value `{v}` for field `mode`"
                                    )))
                                }
                            }
                        }
                        _ => return Err(Error::EnvSpec(format!("unknown field `{k}`"))),
                    }
                }
                let sensors: usize = require(k_, "K")?;
                let config = AoiConfig {
                    sensors,
                    users: require(n_, "N")?,
                    delta_max: require(dmax, "dmax")?,
                    beta1: b1,
                    beta2: b2,
                    energy_costs: vec![e; sensors],
                    request_prob: require(p, "p")?,
                    action_mode: mode,
                };
                config.validate()?;
                Ok(EnvSpec::Aoi(config))
            }
            other => Err(Error::EnvSpec(format!(
                "unknown environment kind `{other}`"
            ))),
        }
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvSpec::Random {
                states,
                actions,
                seed,
                reward_lo,
                reward_hi,
            } => write!(
                f,
                "random:S={states},A={actions},seed={seed},lo={reward_lo},hi={reward_hi}"
            ),
            EnvSpec::Delayed => write!(f, "delayed"),
            EnvSpec::Aoi(c) => {
                write!(
                    f,
                    "aoi:K={},N={},dmax={},b1={},b2={},p={},e={}",
                    c.sensors,
                    c.users,
                    c.delta_max,
                    c.beta1,
                    c.beta2,
                    c.request_prob,
                    c.energy_costs[0]
                )?;
                if c.action_mode == ActionMode::Subset {
                    write!(f, ",mode=subset")?;
                }
                Ok(())
            }
            EnvSpec::File(path) => write!(f, "file:{path}"),
        }
    }
}

impl EnvSpec {
    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvSpec::Random {
                states,
                actions,
                seed,
                reward_lo,
                reward_hi,
            } => Box::new(TabularEnv::new(random_unichain(
                *states,
                *actions,
                *seed,
                (*reward_lo, *reward_hi),
            ))),
            EnvSpec::Delayed => Box::new(TabularEnv::new(delayed_payoff_mdp())),
            EnvSpec::Aoi(config) => Box::new(aoi_env(config.clone())?),
            EnvSpec::File(path) => Box::new(TabularEnv::new(TabularMdp::load(path)?)),
        })
    }
}
