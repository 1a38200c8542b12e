//! Multi-seed experiments, envelope aggregation, tail summaries and the
//! discounted-versus-average gap table.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deep::{train_deep, DeepAgentConfig};
use crate::env::{EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::mdp::{Policy, TabularMdp};
use crate::record::{config_hash, content_digest, AgentKind, RunRecord};
use crate::solvers::{
    argmax_tol, average_reward, brute_force_gain_optimal, discounted_value_iteration,
    discounted_values,
};
use crate::tabular::{train_tabular, LearningConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_TAIL: usize = 10;
const REF_STREAM: u64 = 0x7ef5_0000_0000_0003;

/// Where DDRVIQ reference inputs come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefFeatureSpec {
    /// Explicit encoded reference inputs.
    Explicit(Vec<Vec<f64>>),
    /// One sample from each of `count` disjoint slices of the state space.
    Sampled { count: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: String,
    pub agent: AgentKind,
    /// Tabular agent settings; `seed` and `ref_state` are set per cell.
    #[serde(default)]
    pub learning: Option<LearningConfig>,
    /// Deep agent settings; `seed` and `ref_features` are set per cell.
    #[serde(default)]
    pub deep: Option<DeepAgentConfig>,
    pub seeds: Vec<u64>,
    /// RVI Q-learning reference states, one cell column each.
    #[serde(default)]
    pub ref_states: Option<Vec<usize>>,
    #[serde(default)]
    pub ref_features: Option<RefFeatureSpec>,
    /// Overrides the agent config's evaluation horizon.
    #[serde(default)]
    pub eval_horizon: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub execution: Execution,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    /// Hash of the settings that determine results; output location and
    /// execution mode are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.execution = Execution::default();
        config_hash(&c)
    }

    fn env_spec(&self) -> Result<EnvSpec> {
        self.env.parse()
    }
}

/// Fully resolved settings of one (seed, reference) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum CellConfig {
    Tabular(LearningConfig),
    Deep(DeepAgentConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub seed: u64,
    pub ref_id: Option<usize>,
    pub config: CellConfig,
}

impl Cell {
    pub fn file_name(&self, agent: AgentKind) -> String {
        match self.ref_id {
            Some(r) => format!("{agent}_seed{}_ref{r}.csv", self.seed),
            None => format!("{agent}_seed{}.csv", self.seed),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: Cell,
    pub config_hash: String,
    pub result: std::result::Result<RunRecord, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: Option<String>,
    pub seed: u64,
    pub ref_id: Option<usize>,
    pub config_hash: String,
    pub digest: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment_hash: String,
    pub agent: AgentKind,
    pub env: String,
    pub records: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(dir.as_ref().join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reads back every successful record, checking digests.
    pub fn load_records(&self, dir: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
        let dir = dir.as_ref();
        let mut out = Vec::new();
        for entry in &self.records {
            let (Some(file), Some(digest)) = (&entry.file, &entry.digest) else {
                continue;
            };
            let bytes = fs::read(dir.join(file))?;
            if content_digest(&bytes) != *digest {
                return Err(Error::Contract(format!("digest mismatch for `{file}`")));
            }
            let mut rec = RunRecord::read_csv(&bytes[..], self.agent)?;
            rec.env = self.env.clone();
            rec.ref_id = entry.ref_id;
            rec.config_hash = entry.config_hash.clone();
            out.push(rec);
        }
        Ok(out)
    }
}

/// Reference inputs for DDRVIQ, one per slice of the state space.
///
/// AoI counters are split into `count` disjoint ranges; reference `i` draws
/// every counter from range `i` (integers when the range is wide enough,
/// otherwise continuous values), then normalizes by `dmax`. Tabular
/// environments use one-hot states spread evenly over the index range.
pub fn reference_features(spec: &EnvSpec, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::Contract("need at least one reference".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ REF_STREAM);
    match spec {
        EnvSpec::Aoi(c) => {
            let dmax = c.delta_max as f64;
            let dims = c.state_dims();
            Ok((0..count)
                .map(|i| {
                    (0..dims)
                        .map(|_| {
                            let age = if c.delta_max as usize >= count {
                                let lo = i * c.delta_max as usize / count + 1;
                                let hi = (i + 1) * c.delta_max as usize / count;
                                rng.gen_range(lo..=hi) as f64
                            } else {
                                1.0 + (dmax - 1.0) * (i as f64 + rng.gen::<f64>()) / count as f64
                            };
                            age / dmax
                        })
                        .collect()
                })
                .collect())
        }
        _ => {
            let env = spec.build()?;
            let n = env
                .num_states()
                .ok_or_else(|| Error::Contract("environment has no state count".into()))?;
            Ok((0..count)
                .map(|i| {
                    let mut x = vec![0.0; n];
                    x[i * n / count] = 1.0;
                    x
                })
                .collect())
        }
    }
}

/// Expands the seeds × references grid into per-cell configs.
pub fn plan_cells(config: &ExperimentConfig) -> Result<Vec<Cell>> {
    if config.seeds.is_empty() {
        return Err(Error::Contract("experiment needs at least one seed".into()));
    }
    let spec = config.env_spec()?;
    let agent = config.agent;
    let mut cells = Vec::new();
    if agent.is_deep() {
        let mut base = config
            .deep
            .clone()
            .ok_or_else(|| Error::Contract(format!("agent `{agent}` needs a `deep` config")))?;
        if let Some(h) = config.eval_horizon {
            base.eval_horizon = h;
        }
        let refs: Vec<Option<Vec<f64>>> = if agent == AgentKind::Ddrviq {
            match &config.ref_features {
                Some(RefFeatureSpec::Explicit(list)) => list.iter().cloned().map(Some).collect(),
                Some(RefFeatureSpec::Sampled { count, seed }) => {
                    reference_features(&spec, *count, *seed)?
                        .into_iter()
                        .map(Some)
                        .collect()
                }
                None => vec![base.ref_features.clone()],
            }
        } else {
            vec![None]
        };
        if refs.is_empty() {
            return Err(Error::Contract("empty reference list".into()));
        }
        let indexed = agent == AgentKind::Ddrviq;
        for &seed in &config.seeds {
            for (r, features) in refs.iter().enumerate() {
                let mut c = base.clone();
                c.seed = seed;
                if indexed {
                    c.ref_features = features.clone();
                }
                cells.push(Cell {
                    seed,
                    ref_id: indexed.then_some(r),
                    config: CellConfig::Deep(c),
                });
            }
        }
    } else {
        let mut base = config
            .learning
            .clone()
            .ok_or_else(|| Error::Contract(format!("agent `{agent}` needs a `learning` config")))?;
        if let Some(h) = config.eval_horizon {
            base.eval_horizon = h;
        }
        let refs: Vec<Option<usize>> = match (&config.ref_states, agent) {
            (Some(list), AgentKind::Rviq) => list.iter().copied().map(Some).collect(),
            _ => vec![None],
        };
        if refs.is_empty() {
            return Err(Error::Contract("empty reference list".into()));
        }
        for &seed in &config.seeds {
            for r in &refs {
                let mut c = base.clone();
                c.seed = seed;
                if let Some(s) = r {
                    c.ref_state = *s;
                }
                cells.push(Cell {
                    seed,
                    ref_id: *r,
                    config: CellConfig::Tabular(c),
                });
            }
        }
    }
    Ok(cells)
}

fn run_cell(agent: AgentKind, env: &dyn Environment, cell: &Cell) -> Result<RunRecord> {
    match &cell.config {
        CellConfig::Tabular(c) => train_tabular(agent, env, c),
        CellConfig::Deep(c) => train_deep(agent, env, c),
    }
}

/// Runs every cell, in parallel when the config asks for it. A failing cell
/// is recorded and does not stop its siblings. Records are written as CSV
/// with a manifest when `output_dir` is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<CellOutcome>> {
    let cells = plan_cells(config)?;
    let env = config.env_spec()?.build()?;
    let env = env.as_ref();
    let agent = config.agent;
    let outcomes = map_slice(&cells, config.execution, |cell| {
        let hash = config_hash(&(&config.env, agent, cell));
        let result = run_cell(agent, env, cell)
            .map(|mut rec| {
                rec.env = config.env.clone();
                rec.ref_id = cell.ref_id;
                rec.config_hash = hash.clone();
                rec
            })
            .map_err(|e| e.to_string());
        CellOutcome {
            cell: cell.clone(),
            config_hash: hash,
            result,
        }
    });
    if let Some(dir) = &config.output_dir {
        write_outputs(config, &outcomes, dir)?;
    }
    Ok(outcomes)
}

pub fn write_outputs(
    config: &ExperimentConfig,
    outcomes: &[CellOutcome],
    dir: &Path,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let mut entry = ManifestEntry {
            file: None,
            seed: o.cell.seed,
            ref_id: o.cell.ref_id,
            config_hash: o.config_hash.clone(),
            digest: None,
            error: None,
        };
        match &o.result {
            Ok(rec) => {
                let bytes = rec.to_csv_bytes();
                let name = o.cell.file_name(config.agent);
                fs::write(dir.join(&name), &bytes)?;
                entry.digest = Some(content_digest(&bytes));
                entry.file = Some(name);
            }
            Err(e) => entry.error = Some(e.clone()),
        }
        records.push(entry);
    }
    let manifest = Manifest {
        experiment_hash: config.hash(),
        agent: config.agent,
        env: config.env.clone(),
        records,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnvelopePoint {
    pub step: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl EnvelopePoint {
    pub fn width(&self) -> f64 {
        self.max - self.min
    }
}

/// Pointwise mean, min and max across runs sharing one evaluation grid.
pub fn aggregate_envelope(records: &[RunRecord]) -> Result<Vec<EnvelopePoint>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let grid: Vec<u64> = first.series.iter().map(|p| p.step).collect();
    for r in records {
        if r.series.len() != grid.len() || r.series.iter().zip(&grid).any(|(p, &s)| p.step != s) {
            return Err(Error::GridMismatch);
        }
    }
    Ok(grid
        .iter()
        .enumerate()
        .map(|(i, &step)| {
            let mut sum = 0.0;
            let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
            for r in records {
                let v = r.series[i].eval_avg_reward;
                sum += v;
                min = min.min(v);
                max = max.max(v);
            }
            EnvelopePoint {
                step,
                mean: sum / records.len() as f64,
                min,
                max,
            }
        })
        .collect())
}

pub fn write_envelope_csv<W: std::io::Write>(points: &[EnvelopePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and population standard deviation of the last `n` evaluations.
pub fn summarize_tail(record: &RunRecord, n: usize) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::Contract("tail window must be positive".into()));
    }
    let have = record.series.len();
    if have < n {
        return Err(Error::SeriesTooShort { needed: n, have });
    }
    let tail: Vec<f64> = record.series[have - n..]
        .iter()
        .map(|p| p.eval_avg_reward)
        .collect();
    let mean = tail.iter().sum::<f64>() / n as f64;
    let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapRow {
    pub gamma: f64,
    /// Lexicographic index of the discounted-optimal policy's action vector.
    pub policy_id: u128,
    pub policy: Vec<usize>,
    pub policy_gain: f64,
    pub optimal_gain: f64,
    pub gap: f64,
}

/// Discounted-optimal deterministic policy: value iteration followed by
/// exact policy iteration, keeping the incumbent action on near-ties.
pub fn discounted_optimal_policy(mdp: &TabularMdp, gamma: f64) -> Result<Policy> {
    let vi = discounted_value_iteration(mdp, gamma, 1e-10)?;
    let mut actions = vi.policy.actions().expect("greedy policy is deterministic");
    let mut q = Vec::with_capacity(mdp.num_actions());
    for _ in 0..1000 {
        let policy = Policy::deterministic(mdp.num_actions(), &actions)?;
        let v = discounted_values(mdp, &policy, gamma)?;
        let mut changed = false;
        for (s, current) in actions.iter_mut().enumerate() {
            q.clear();
            q.extend((0..mdp.num_actions()).map(|a| {
                mdp.outcomes(s, a)
                    .iter()
                    .map(|o| o.prob * (o.reward + gamma * v[o.next_state]))
                    .sum::<f64>()
            }));
            let best = argmax_tol(&q);
            if q[best] > q[*current] + 1e-10 * (1.0 + q[*current].abs()) {
                *current = best;
                changed = true;
            }
        }
        if !changed {
            return Ok(policy);
        }
    }
    Err(Error::NonConvergence {
        iterations: 1000,
        residual: f64::NAN,
    })
}

/// For each γ, how much average reward the discounted-optimal policy gives up.
pub fn gap_report(mdp: &TabularMdp, gammas: &[f64]) -> Result<Vec<GapRow>> {
    let (_, optimal_gain) = brute_force_gain_optimal(mdp)?;
    gammas
        .iter()
        .map(|&gamma| {
            let policy = discounted_optimal_policy(mdp, gamma)?;
            let policy_gain = average_reward(mdp, &policy)?;
            Ok(GapRow {
                gamma,
                policy_id: policy.lexicographic_index().expect("deterministic"),
                policy: policy.actions().expect("deterministic"),
                policy_gain,
                optimal_gain,
                gap: optimal_gain - policy_gain,
            })
        })
        .collect()
}
