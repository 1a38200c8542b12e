//! Exact dynamic programming for both optimality criteria.
//!
//! Policy evaluation goes through dense linear solves; value iteration and
//! relative value iteration handle optimization. Brute-force enumeration over
//! deterministic policies provides the gain-optimal reference answer.

use nalgebra::DMatrix;
#[cfg(test)]
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{map_range, Execution};
use crate::mdp::{
    enumerate_det_policies, induced_chain, recurrent_class_count, stationary_distribution, Policy,
    TabularMdp, DEFAULT_POLICY_CAP,
};

/// Relative slack used when breaking ties between greedy actions.
const TIE_TOL: f64 = 1e-10;

/// Average-optimal value decomposition from relative value iteration.
#[derive(Clone, Debug, Serialize)]
pub struct GainBias {
    pub gain: f64,
    pub bias: Vec<f64>,
    #[serde(skip)]
    pub policy: Policy,
    pub ref_state: usize,
    /// Span of the last value difference, rescaled to gain units.
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiscountedSolution {
    pub values: Vec<f64>,
    #[serde(skip)]
    pub policy: Policy,
    pub gamma: f64,
    pub residual: f64,
    pub iterations: usize,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "discount factor {gamma} outside [0, 1)"
        )))
    }
}

/// Long-run average reward of a unichain policy.
pub fn average_reward(mdp: &TabularMdp, policy: &Policy) -> Result<f64> {
    let chain = induced_chain(mdp, policy)?;
    let mu = stationary_distribution(&chain.transition)?;
    Ok(mu
        .mu
        .iter()
        .zip(chain.reward.iter())
        .map(|(m, r)| m * r)
        .sum())
}

/// Discounted state values of a policy, from `(I − γP) V = r`.
pub fn discounted_values(mdp: &TabularMdp, policy: &Policy, gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    let chain = induced_chain(mdp, policy)?;
    let n = mdp.num_states();
    let a = DMatrix::identity(n, n) - chain.transition * gamma;
    let v = a
        .lu()
        .solve(&chain.reward)
        .ok_or_else(|| Error::Domain("singular discounted system".into()))?;
    Ok(v.iter().copied().collect())
}

/// `|Σ_s μ(s) V^γ(s) − Û / (1 − γ)|`, which is zero up to rounding.
pub fn identity_residual(mdp: &TabularMdp, policy: &Policy, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let chain = induced_chain(mdp, policy)?;
    let mu = stationary_distribution(&chain.transition)?;
    let gain: f64 = mu
        .mu
        .iter()
        .zip(chain.reward.iter())
        .map(|(m, r)| m * r)
        .sum();
    let values = discounted_values(mdp, policy, gamma)?;
    let weighted: f64 = mu.mu.iter().zip(&values).map(|(m, v)| m * v).sum();
    Ok((weighted - gain / (1.0 - gamma)).abs())
}

/// One-step lookahead `Σ p(s',u|s,a) (u + weight · h(s'))` for every action.
fn lookahead(mdp: &TabularMdp, s: usize, h: &[f64], weight: f64, out: &mut Vec<f64>) {
    out.clear();
    out.extend((0..mdp.num_actions()).map(|a| {
        mdp.outcomes(s, a)
            .iter()
            .map(|o| o.prob * (o.reward + weight * h[o.next_state]))
            .sum::<f64>()
    }));
}

/// Index of the largest entry; near-ties go to the lowest index.
pub fn argmax_tol(values: &[f64]) -> usize {
    let mut best = 0;
    for (a, &q) in values.iter().enumerate().skip(1) {
        if q > values[best] + TIE_TOL * (1.0 + values[best].abs()) {
            best = a;
        }
    }
    best
}

fn greedy_policy(mdp: &TabularMdp, h: &[f64], weight: f64) -> Policy {
    let mut row = Vec::with_capacity(mdp.num_actions());
    let actions: Vec<usize> = (0..mdp.num_states())
        .map(|s| {
            lookahead(mdp, s, h, weight, &mut row);
            argmax_tol(&row)
        })
        .collect();
    Policy::deterministic(mdp.num_actions(), &actions).expect("greedy actions are in range")
}

const VI_MAX_ITERS: usize = 10_000_000;

/// Discounted value iteration until the sup-norm Bellman residual is at most `tol`.
pub fn discounted_value_iteration(
    mdp: &TabularMdp,
    gamma: f64,
    tol: f64,
) -> Result<DiscountedSolution> {
    check_gamma(gamma)?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Domain(format!("tolerance {tol} must be positive")));
    }
    let n = mdp.num_states();
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut row = Vec::with_capacity(mdp.num_actions());
    let mut iterations = 0;
    loop {
        let mut residual: f64 = 0.0;
        for s in 0..n {
            lookahead(mdp, s, &v, gamma, &mut row);
            next[s] = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((next[s] - v[s]).abs());
        }
        if residual <= tol {
            return Ok(DiscountedSolution {
                policy: greedy_policy(mdp, &v, gamma),
                values: v,
                gamma,
                residual,
                iterations,
            });
        }
        if iterations >= VI_MAX_ITERS {
            return Err(Error::NonConvergence {
                iterations,
                residual,
            });
        }
        std::mem::swap(&mut v, &mut next);
        iterations += 1;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RviOptions {
    pub max_iters: usize,
    /// Self-loop mixing weight `τ` of the aperiodicity transform
    /// `P ← τP + (1 − τ)I`. The gain is unchanged and bias is preserved.
    pub tau: f64,
}

impl Default for RviOptions {
    fn default() -> Self {
        Self {
            max_iters: 1_000_000,
            tau: 0.5,
        }
    }
}

/// Relative value iteration, stopped when the span of successive value
/// differences (in gain units) is at most `tol`.
pub fn relative_value_iteration(mdp: &TabularMdp, ref_state: usize, tol: f64) -> Result<GainBias> {
    relative_value_iteration_with(mdp, ref_state, tol, RviOptions::default())
}

pub fn relative_value_iteration_with(
    mdp: &TabularMdp,
    ref_state: usize,
    tol: f64,
    opts: RviOptions,
) -> Result<GainBias> {
    if ref_state >= mdp.num_states() {
        return Err(Error::Contract(format!(
            "reference state {ref_state} out of range"
        )));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Domain(format!("tolerance {tol} must be positive")));
    }
    let tau = opts.tau;
    let n = mdp.num_states();
    let mut h = vec![0.0; n];
    let mut th = vec![0.0; n];
    let mut row = Vec::with_capacity(mdp.num_actions());
    let mut residual = f64::INFINITY;
    for iterations in 0..opts.max_iters {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in 0..n {
            lookahead(mdp, s, &h, 1.0, &mut row);
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            th[s] = tau * best + (1.0 - tau) * h[s];
            let d = th[s] - h[s];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        residual = (hi - lo) / tau;
        let anchor = th[ref_state];
        for s in 0..n {
            h[s] = th[s] - anchor;
        }
        if residual <= tol {
            let policy = greedy_policy(mdp, &h, 1.0);
            let chain = induced_chain(mdp, &policy)?;
            let classes = recurrent_class_count(&chain.transition);
            if classes != 1 {
                return Err(Error::NotUnichain {
                    recurrent_classes: classes,
                });
            }
            return Ok(GainBias {
                gain: (hi + lo) / (2.0 * tau),
                bias: h,
                policy,
                ref_state,
                residual,
                iterations: iterations + 1,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iters,
        residual,
    })
}

/// Gain-optimal deterministic policy by exhaustive enumeration.
pub fn brute_force_gain_optimal(mdp: &TabularMdp) -> Result<(Policy, f64)> {
    brute_force_gain_optimal_with(mdp, DEFAULT_POLICY_CAP, Execution::default())
}

pub fn brute_force_gain_optimal_with(
    mdp: &TabularMdp,
    cap: u64,
    exec: Execution,
) -> Result<(Policy, f64)> {
    let policies = enumerate_det_policies(mdp, cap)?;
    let gains = map_range(policies.total() as usize, exec, |i| {
        average_reward(mdp, &policies.policy_at(i as u64))
    });
    let mut best: Option<(usize, f64)> = None;
    for (i, gain) in gains.into_iter().enumerate() {
        let gain = gain?;
        match best {
            Some((_, g)) if gain <= g + 1e-12 * (1.0 + g.abs()) => {}
            _ => best = Some((i, gain)),
        }
    }
    let (index, gain) = best.expect("at least one policy");
    Ok((policies.policy_at(index as u64), gain))
}

/// `max_s |(1 − γ) V^γ(s) − Û|` for each requested discount factor.
pub fn abel_limit_profile(
    mdp: &TabularMdp,
    policy: &Policy,
    gammas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let gain = average_reward(mdp, policy)?;
    gammas
        .iter()
        .map(|&gamma| {
            let v = discounted_values(mdp, policy, gamma)?;
            let dev = v
                .iter()
                .map(|x| ((1.0 - gamma) * x - gain).abs())
                .fold(0.0, f64::max);
            Ok((gamma, dev))
        })
        .collect()
}

/// Empirical average reward of a simulated trajectory, discarding `burn_in` steps.
pub fn rollout_average_reward(
    mdp: &TabularMdp,
    policy: &Policy,
    start: usize,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> f64 {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = start;
    let mut total = 0.0;
    for t in 0..steps {
        let x: f64 = rng.gen();
        let mut acc = 0.0;
        let row = policy.row(s);
        let a = row
            .iter()
            .position(|&p| {
                acc += p;
                x < acc
            })
            .unwrap_or(row.len() - 1);
        let (u, next) = mdp.sample(s, a, &mut rng);
        if t >= burn_in {
            total += u;
        }
        s = next;
    }
    total / (steps - burn_in) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{delayed_payoff_mdp, random_unichain};
    use crate::mdp::Outcome;

    fn one_state() -> TabularMdp {
        TabularMdp::new(1, 1, vec![vec![vec![Outcome::new(0, 1.0, 1.0)]]]).unwrap()
    }

    fn x() -> Policy {
        Policy::deterministic(2, &[0, 0, 0]).unwrap()
    }

    fn y() -> Policy {
        Policy::deterministic(2, &[1, 0, 0]).unwrap()
    }

    /// Fixed-point iteration `V ← r + γPV`, the evaluation oracle.
    fn iterative_values(mdp: &TabularMdp, policy: &Policy, gamma: f64) -> Vec<f64> {
        let chain = induced_chain(mdp, policy).unwrap();
        let mut v = DVector::zeros(mdp.num_states());
        for _ in 0..20_000 {
            v = &chain.reward + &chain.transition * &v * gamma;
        }
        v.iter().copied().collect()
    }

    #[test]
    fn single_state_average_reward() {
        assert_eq!(
            average_reward(&one_state(), &Policy::uniform(1, 1)).unwrap(),
            1.0
        );
    }

    #[test]
    fn delayed_payoff_gains() {
        let mdp = delayed_payoff_mdp();
        assert!((average_reward(&mdp, &x()).unwrap() - 1.0).abs() < 1e-12);
        assert!((average_reward(&mdp, &y()).unwrap() - 10.0 / 3.0).abs() < 1e-12);
        let chain = induced_chain(&mdp, &y()).unwrap();
        assert_eq!(chain.reward.as_slice(), &[0.0, 0.0, 10.0]);
        let mu = stationary_distribution(&chain.transition).unwrap();
        for m in mu.mu {
            assert!((m - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_agrees_with_exact_gain() {
        let mdp = delayed_payoff_mdp();
        let est = rollout_average_reward(&mdp, &y(), 0, 100_000, 1_000, 1);
        assert!((est - 10.0 / 3.0).abs() < 1e-3);
        let est = rollout_average_reward(&mdp, &x(), 2, 100_000, 1_000, 1);
        assert_eq!(est, 1.0);
    }

    #[test]
    fn discounted_geometric_series() {
        let mdp = one_state();
        let p = Policy::uniform(1, 1);
        assert!((discounted_values(&mdp, &p, 0.5).unwrap()[0] - 2.0).abs() < 1e-12);
        assert!((discounted_values(&mdp, &p, 0.9).unwrap()[0] - 10.0).abs() < 1e-12);
        assert!(matches!(
            discounted_values(&mdp, &p, 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn delayed_payoff_discounted_closed_form() {
        let mdp = delayed_payoff_mdp();
        let g: f64 = 0.1;
        let v = discounted_values(&mdp, &y(), g).unwrap();
        let closed = 10.0 * g * g / (1.0 - g.powi(3));
        assert!((v[0] - closed).abs() < 1e-12);
        let oracle = iterative_values(&mdp, &y(), g);
        for (a, b) in v.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_residuals() {
        assert_eq!(
            identity_residual(&one_state(), &Policy::uniform(1, 1), 0.5).unwrap(),
            0.0
        );
        assert!(identity_residual(&delayed_payoff_mdp(), &y(), 0.1).unwrap() <= 1e-10);
    }

    #[test]
    fn value_iteration_on_delayed_payoff() {
        let mdp = delayed_payoff_mdp();
        let low = discounted_value_iteration(&mdp, 0.1, 1e-12).unwrap();
        assert_eq!(low.policy.actions().unwrap()[0], 0);
        assert!(low.residual <= 1e-12);
        let high = discounted_value_iteration(&mdp, 0.9, 1e-12).unwrap();
        assert_eq!(high.policy.actions().unwrap()[0], 1);
        let single = discounted_value_iteration(&one_state(), 0.9, 1e-12).unwrap();
        assert!((single.values[0] - 10.0).abs() < 1e-10);
    }

    #[test]
    fn value_iteration_matches_enumeration() {
        for seed in 0..5 {
            let mdp = random_unichain(4, 3, seed, (0.0, 1.0));
            let sol = discounted_value_iteration(&mdp, 0.8, 1e-12).unwrap();
            // the discounted-optimal policy dominates every other policy state-wise
            let best = enumerate_det_policies(&mdp, DEFAULT_POLICY_CAP)
                .unwrap()
                .map(|p| discounted_values(&mdp, &p, 0.8).unwrap())
                .fold(vec![f64::NEG_INFINITY; 4], |acc, v| {
                    acc.iter().zip(&v).map(|(a, b)| a.max(*b)).collect()
                });
            for (a, b) in sol.values.iter().zip(&best) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rvi_trivial_and_delayed() {
        let gb = relative_value_iteration(&one_state(), 0, 1e-10).unwrap();
        assert!((gb.gain - 1.0).abs() < 1e-10);
        assert_eq!(gb.bias, vec![0.0]);
        let gb = relative_value_iteration(&delayed_payoff_mdp(), 0, 1e-10).unwrap();
        assert!((gb.gain - 10.0 / 3.0).abs() < 1e-9);
        assert_eq!(gb.policy.actions().unwrap()[0], 1);
        assert_eq!(gb.bias[0], 0.0);
    }

    #[test]
    fn rvi_matches_brute_force_seed_7() {
        let mdp = random_unichain(5, 3, 7, (0.0, 1.0));
        let gb = relative_value_iteration(&mdp, 0, 1e-9).unwrap();
        let (_, oracle) = brute_force_gain_optimal(&mdp).unwrap();
        assert!((gb.gain - oracle).abs() < 1e-6);
    }

    #[test]
    fn rvi_rejects_bad_reference() {
        assert!(relative_value_iteration(&one_state(), 3, 1e-9).is_err());
    }

    #[test]
    fn rvi_reports_nonconvergence() {
        let err = relative_value_iteration_with(
            &delayed_payoff_mdp(),
            0,
            1e-12,
            RviOptions {
                max_iters: 2,
                tau: 0.5,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 2, .. }));
    }

    #[test]
    fn brute_force_cases() {
        let (p, g) = brute_force_gain_optimal(&one_state()).unwrap();
        assert_eq!(p.actions().unwrap(), vec![0]);
        assert_eq!(g, 1.0);
        let (p, g) = brute_force_gain_optimal(&delayed_payoff_mdp()).unwrap();
        assert_eq!(p.actions().unwrap(), vec![1, 0, 0]);
        assert!((g - 10.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn brute_force_degenerate_tie_picks_first() {
        let same = vec![Outcome::new(0, 0.5, 0.5), Outcome::new(1, 1.0, 0.5)];
        let mdp = TabularMdp::new(
            2,
            2,
            vec![vec![same.clone(), same.clone()], vec![same.clone(), same]],
        )
        .unwrap();
        let (p, g) = brute_force_gain_optimal(&mdp).unwrap();
        assert_eq!(p.actions().unwrap(), vec![0, 0]);
        assert!((g - 0.75).abs() < 1e-12);
    }

    #[test]
    fn brute_force_modes_agree() {
        let mdp = random_unichain(6, 3, 11, (0.0, 1.0));
        let par = brute_force_gain_optimal_with(&mdp, DEFAULT_POLICY_CAP, Execution::Parallel);
        let seq = brute_force_gain_optimal_with(&mdp, DEFAULT_POLICY_CAP, Execution::Sequential);
        let (pp, gp) = par.unwrap();
        let (ps, gs) = seq.unwrap();
        assert_eq!(pp, ps);
        assert_eq!(gp, gs);
    }

    #[test]
    fn abel_profile() {
        let prof = abel_limit_profile(&one_state(), &Policy::uniform(1, 1), &[0.3, 0.9]).unwrap();
        assert!(prof.iter().all(|&(_, d)| d < 1e-12));
        let prof =
            abel_limit_profile(&delayed_payoff_mdp(), &y(), &[0.5, 0.9, 0.99, 0.999]).unwrap();
        assert!(prof[3].1 < prof[0].1);
        let mdp = random_unichain(5, 2, 3, (0.0, 1.0));
        let uniform = Policy::uniform(5, 2);
        let gain = average_reward(&mdp, &uniform).unwrap();
        let prof = abel_limit_profile(&mdp, &uniform, &[0.999]).unwrap();
        assert!(prof[0].1 <= 0.01 * (1.0 + gain.abs()));
    }
}
