//! Evaluation time series produced by training runs, and their CSV form.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    /// Discounted tabular Q-learning.
    Q,
    /// Tabular RVI Q-learning.
    Rviq,
    /// Tabular R-learning.
    Rlearn,
    /// Differential dueling R-learning with batch, target-net average-reward updates.
    Ddr,
    /// Dueling deep RVI Q-learning with a reference state.
    Ddrviq,
    /// Discounted dueling DQN.
    Ddqn,
}

impl AgentKind {
    pub fn is_deep(self) -> bool {
        matches!(self, AgentKind::Ddr | AgentKind::Ddrviq | AgentKind::Ddqn)
    }

    pub fn tracks_average(self) -> bool {
        matches!(self, AgentKind::Rlearn | AgentKind::Ddr)
    }

    pub fn uses_reference(self) -> bool {
        matches!(self, AgentKind::Rviq | AgentKind::Ddrviq)
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Q => "q",
            AgentKind::Rviq => "rviq",
            AgentKind::Rlearn => "rlearn",
            AgentKind::Ddr => "ddr",
            AgentKind::Ddrviq => "ddrviq",
            AgentKind::Ddqn => "ddqn",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "q" => AgentKind::Q,
            "rviq" => AgentKind::Rviq,
            "rlearn" => AgentKind::Rlearn,
            "ddr" => AgentKind::Ddr,
            "ddrviq" => AgentKind::Ddrviq,
            "ddqn" => AgentKind::Ddqn,
            other => return Err(Error::Contract(format!("unknown agent `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub eval_avg_reward: f64,
    pub u_tilde: Option<f64>,
    pub loss: Option<f64>,
    pub target_syncs: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub agent: AgentKind,
    pub env: String,
    pub seed: u64,
    pub ref_id: Option<usize>,
    pub config_hash: String,
    pub series: Vec<EvalPoint>,
}

/// Hex SHA-256 prefix of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&bytes)[..16])
}

/// Git-style object digest: SHA-256 over `blob <len>\0` followed by the bytes.
pub fn content_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunRecord {
    pub fn final_eval(&self) -> Option<f64> {
        self.series.last().map(|p| p.eval_avg_reward)
    }

    pub fn eval_scores(&self) -> Vec<f64> {
        self.series.iter().map(|p| p.eval_avg_reward).collect()
    }

    /// Writes the CSV form: `step,eval_avg_reward,u_tilde,seed`, plus
    /// `loss,target_syncs` for deep agents.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let deep = self.agent.is_deep();
        let mut header = vec!["step", "eval_avg_reward", "u_tilde", "seed"];
        if deep {
            header.extend(["loss", "target_syncs"]);
        }
        w.write_record(&header)?;
        for p in &self.series {
            let mut row = vec![
                p.step.to_string(),
                p.eval_avg_reward.to_string(),
                opt(p.u_tilde),
                self.seed.to_string(),
            ];
            if deep {
                row.push(opt(p.loss));
                row.push(opt(p.target_syncs));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        buf
    }

    /// Reads a series back from CSV. Agent and hash are not stored in the
    /// file, so the caller supplies the agent kind.
    pub fn read_csv<R: Read>(input: R, agent: AgentKind) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let step = col("step").ok_or_else(|| Error::Contract("CSV lacks `step`".into()))?;
        let eval = col("eval_avg_reward")
            .ok_or_else(|| Error::Contract("CSV lacks `eval_avg_reward`".into()))?;
        let (u, seed, loss, syncs) = (
            col("u_tilde"),
            col("seed"),
            col("loss"),
            col("target_syncs"),
        );
        let mut series = Vec::new();
        let mut seed_value = 0;
        for row in r.records() {
            let row = row?;
            let field = |i: Option<usize>| i.and_then(|i| row.get(i)).filter(|s| !s.is_empty());
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Contract(format!("bad number `{s}` in CSV")))
            };
            let int = |s: &str| -> Result<u64> {
                s.parse()
                    .map_err(|_| Error::Contract(format!("bad integer `{s}` in CSV")))
            };
            if let Some(s) = field(seed) {
                seed_value = int(s)?;
            }
            series.push(EvalPoint {
                step: int(field(Some(step)).unwrap_or(""))?,
                eval_avg_reward: num(field(Some(eval)).unwrap_or(""))?,
                u_tilde: field(u).map(num).transpose()?,
                loss: field(loss).map(num).transpose()?,
                target_syncs: field(syncs).map(int).transpose()?,
            });
        }
        Ok(RunRecord {
            agent,
            env: String::new(),
            seed: seed_value,
            ref_id: None,
            config_hash: String::new(),
            series,
        })
    }

    pub fn load_csv(path: impl AsRef<Path>, agent: AgentKind) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, agent)
    }
}
