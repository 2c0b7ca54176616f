//! Finite-horizon tabular MDPs, exact backward induction and a checker for
//! optimal-policy invariance under time-indexed potential-based shaping.
//!
//! Shaping adds `Phi(s', t + 1) - Phi(s, t)` to the reward of every
//! transition (`gamma = 1`). With a terminal potential that is the same for
//! every state, the shaped action values satisfy
//! `Q'_t(s, a) = Q_t(s, a) - Phi(s, t) + Phi_H`, so the optimal action sets
//! cannot change.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CocaError, Result};

/// Absolute tolerance used to decide argmax ties.
pub const TIE_TOL: f64 = 1e-9;
/// Tolerance of the Q-offset law.
pub const OFFSET_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    /// `P(s' | s, a)` at `[(s * A + a) * S + s']`, stationary.
    pub transition: Vec<f64>,
    /// `R(s, a, s', t)` at `[((t * S + s) * A + a) * S + s']`.
    pub reward: Vec<f64>,
    pub initial: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        states: usize,
        actions: usize,
        horizon: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Self { states, actions, horizon, transition, reward, initial };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a, h) = (self.states, self.actions, self.horizon);
        let bad = |m: String| Err(CocaError::InvalidMdp(m));
        if s == 0 || a == 0 || h == 0 {
            return bad("state, action and horizon counts must be positive".into());
        }
        if self.transition.len() != s * a * s || self.reward.len() != h * s * a * s || self.initial.len() != s {
            return bad("table sizes do not match (S, A, H)".into());
        }
        for (row, p) in self.transition.chunks(s).enumerate() {
            if p.iter().any(|v| *v < 0.0 || !v.is_finite()) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return bad(format!("transition row {row} is not a distribution"));
            }
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return bad("non-finite reward".into());
        }
        Ok(())
    }

    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.actions + a) * self.states + next]
    }

    fn reward_index(&self, t: usize, s: usize, a: usize, next: usize) -> usize {
        ((t * self.states + s) * self.actions + a) * self.states + next
    }

    pub fn r(&self, t: usize, s: usize, a: usize, next: usize) -> f64 {
        self.reward[self.reward_index(t, s, a, next)]
    }

    /// Copy with rewards replaced by `R + f(t, s, a, s')`.
    pub fn with_reward_offset<F: Fn(usize, usize, usize, usize) -> f64>(&self, f: F) -> Self {
        let mut out = self.clone();
        for t in 0..self.horizon {
            for s in 0..self.states {
                for a in 0..self.actions {
                    for n in 0..self.states {
                        let i = self.reward_index(t, s, a, n);
                        out.reward[i] = self.reward[i] + f(t, s, a, n);
                    }
                }
            }
        }
        out
    }
}

/// Time-indexed potential `Phi(s, t)` for `t in 0..=H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialFn {
    pub horizon: usize,
    pub states: usize,
    /// `Phi(s, t)` at `[t * S + s]`.
    pub values: Vec<f64>,
}

impl PotentialFn {
    pub fn new(horizon: usize, states: usize, values: Vec<f64>) -> Result<Self> {
        let p = Self { horizon, states, values };
        p.validate()?;
        Ok(p)
    }

    pub fn zero(horizon: usize, states: usize) -> Self {
        Self { horizon, states, values: vec![0.0; (horizon + 1) * states] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != (self.horizon + 1) * self.states {
            return Err(CocaError::InvalidPotential(format!(
                "expected {} entries, got {}",
                (self.horizon + 1) * self.states,
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(CocaError::InvalidPotential(format!("entry {i} is not finite")));
        }
        Ok(())
    }

    pub fn at(&self, s: usize, t: usize) -> f64 {
        self.values[t * self.states + s]
    }

    /// The terminal value when it is shared by every state.
    pub fn terminal_constant(&self) -> Option<f64> {
        let row = &self.values[self.horizon * self.states..];
        let first = row[0];
        row.iter().all(|v| *v == first).then_some(first)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalSolution {
    pub horizon: usize,
    pub states: usize,
    pub actions: usize,
    /// `Q_t(s, a)` at `[(t * S + s) * A + a]`.
    pub q: Vec<f64>,
    /// `V_t(s)` for `t in 0..=H`, with `V_H = 0`.
    pub value: Vec<f64>,
    /// Optimal action set per `(t, s)` at `[t * S + s]`.
    pub optimal_actions: Vec<Vec<usize>>,
}

impl OptimalSolution {
    pub fn q_at(&self, t: usize, s: usize, a: usize) -> f64 {
        self.q[(t * self.states + s) * self.actions + a]
    }

    pub fn actions_at(&self, t: usize, s: usize) -> &[usize] {
        &self.optimal_actions[t * self.states + s]
    }
}

/// Exact finite-horizon backward induction; ties within [`TIE_TOL`] are kept.
pub fn solve_optimal(mdp: &TabularMdp) -> OptimalSolution {
    let (ns, na, h) = (mdp.states, mdp.actions, mdp.horizon);
    let mut q = vec![0.0; h * ns * na];
    let mut value = vec![0.0; (h + 1) * ns];
    let mut optimal_actions = vec![Vec::new(); h * ns];
    for t in (0..h).rev() {
        for s in 0..ns {
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let qa: f64 = (0..ns).map(|n| mdp.p(s, a, n) * (mdp.r(t, s, a, n) + value[(t + 1) * ns + n])).sum();
                q[(t * ns + s) * na + a] = qa;
                best = best.max(qa);
            }
            value[t * ns + s] = best;
            optimal_actions[t * ns + s] = (0..na).filter(|&a| q[(t * ns + s) * na + a] >= best - TIE_TOL).collect();
        }
    }
    OptimalSolution { horizon: h, states: ns, actions: na, q, value, optimal_actions }
}

/// `R'(s, a, s', t) = R(s, a, s', t) + Phi(s', t + 1) - Phi(s, t)`.
pub fn apply_shaping(mdp: &TabularMdp, potential: &PotentialFn) -> Result<TabularMdp> {
    potential.validate()?;
    if potential.horizon != mdp.horizon || potential.states != mdp.states {
        return Err(CocaError::InvalidPotential(format!(
            "potential covers (H={}, S={}), MDP has (H={}, S={})",
            potential.horizon, potential.states, mdp.horizon, mdp.states
        )));
    }
    Ok(mdp.with_reward_offset(|t, s, _, n| potential.at(n, t + 1) - potential.at(s, t)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    ArgmaxChanged,
    OffsetDependsOnAction,
    OffsetMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub kind: ViolationKind,
    pub t: usize,
    pub state: usize,
    pub original_actions: Vec<usize>,
    pub shaped_actions: Vec<usize>,
    pub original_q: Vec<f64>,
    pub shaped_q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub passed: bool,
    pub argmax_identical: bool,
    pub offset_action_independent: bool,
    /// `None` when no potential was supplied or its terminal row varies.
    pub offset_matches_potential: Option<bool>,
    pub max_offset_spread: f64,
    pub max_offset_error: f64,
    pub counterexample: Option<Counterexample>,
}

/// Solves both MDPs and compares optimal action sets and Q offsets.
///
/// With a potential, the offset must equal `-Phi(s, t) + Phi_H`; a terminal
/// row that differs across states cannot satisfy this and fails the check.
pub fn compare_solutions(
    original: &TabularMdp,
    shaped: &TabularMdp,
    potential: Option<&PotentialFn>,
) -> InvarianceReport {
    let base = solve_optimal(original);
    let new = solve_optimal(shaped);
    let (ns, na) = (original.states, original.actions);
    let boundary = potential.and_then(PotentialFn::terminal_constant);
    let mut report = InvarianceReport {
        passed: true,
        argmax_identical: true,
        offset_action_independent: true,
        offset_matches_potential: potential.map(|_| boundary.is_some()),
        max_offset_spread: 0.0,
        max_offset_error: 0.0,
        counterexample: None,
    };
    let note = |report: &mut InvarianceReport, kind, t, s| {
        if report.counterexample.is_none() {
            report.counterexample = Some(Counterexample {
                kind,
                t,
                state: s,
                original_actions: base.actions_at(t, s).to_vec(),
                shaped_actions: new.actions_at(t, s).to_vec(),
                original_q: (0..na).map(|a| base.q_at(t, s, a)).collect(),
                shaped_q: (0..na).map(|a| new.q_at(t, s, a)).collect(),
            });
        }
    };
    for t in 0..original.horizon {
        for s in 0..ns {
            if base.actions_at(t, s) != new.actions_at(t, s) {
                report.argmax_identical = false;
                note(&mut report, ViolationKind::ArgmaxChanged, t, s);
            }
            let offsets: Vec<f64> = (0..na).map(|a| new.q_at(t, s, a) - base.q_at(t, s, a)).collect();
            let lo = offsets.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = offsets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            report.max_offset_spread = report.max_offset_spread.max(hi - lo);
            if hi - lo > OFFSET_TOL {
                report.offset_action_independent = false;
                note(&mut report, ViolationKind::OffsetDependsOnAction, t, s);
            }
            if let (Some(phi), Some(b)) = (potential, boundary) {
                let expected = -phi.at(s, t) + b;
                let err = offsets.iter().map(|o| (o - expected).abs()).fold(0.0, f64::max);
                report.max_offset_error = report.max_offset_error.max(err);
                if err > OFFSET_TOL {
                    report.offset_matches_potential = Some(false);
                    note(&mut report, ViolationKind::OffsetMismatch, t, s);
                }
            }
        }
    }
    report.passed =
        report.argmax_identical && report.offset_action_independent && report.offset_matches_potential.unwrap_or(true);
    report
}

/// Shapes `mdp` with `potential` and checks optimal-policy invariance.
pub fn check_invariance(mdp: &TabularMdp, potential: &PotentialFn) -> Result<InvarianceReport> {
    let shaped = apply_shaping(mdp, potential)?;
    Ok(compare_solutions(mdp, &shaped, Some(potential)))
}

fn random_distribution<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    if rng.random_bool(0.3) {
        let mut row = vec![0.0; n];
        row[rng.random_range(0..n)] = 1.0;
        return row;
    }
    let mut row: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() }).collect();
    if row.iter().all(|v| *v == 0.0) {
        row[rng.random_range(0..n)] = 1.0;
    }
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= total);
    // Push the rounding residue into the largest entry.
    let residue = 1.0 - row.iter().sum::<f64>();
    let imax = (0..n).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("n > 0");
    row[imax] += residue;
    row
}

/// Random MDP with `S <= max_states`, `A <= max_actions`, `H <= max_horizon`.
/// A fifth of the instances use small integer rewards to produce exact ties.
pub fn random_mdp<R: Rng + ?Sized>(
    max_states: usize,
    max_actions: usize,
    max_horizon: usize,
    rng: &mut R,
) -> TabularMdp {
    let states = rng.random_range(1..=max_states);
    let actions = rng.random_range(1..=max_actions);
    let horizon = rng.random_range(1..=max_horizon);
    let transition: Vec<f64> = (0..states * actions).flat_map(|_| random_distribution(states, rng)).collect();
    let integer = rng.random_bool(0.2);
    let reward = (0..horizon * states * actions * states)
        .map(|_| if integer { rng.random_range(-2..=2) as f64 } else { rng.random_range(-1.0..1.0) })
        .collect();
    let initial = random_distribution(states, rng);
    TabularMdp::new(states, actions, horizon, transition, reward, initial).expect("generated MDP is valid")
}

/// Random potential in `[-5, 5]` with a state-independent terminal row.
pub fn random_potential<R: Rng + ?Sized>(mdp: &TabularMdp, rng: &mut R) -> PotentialFn {
    let (h, ns) = (mdp.horizon, mdp.states);
    let mut values: Vec<f64> = (0..h * ns).map(|_| rng.random_range(-5.0..5.0)).collect();
    let terminal = rng.random_range(-5.0..5.0);
    values.extend(std::iter::repeat_n(terminal, ns));
    PotentialFn { horizon: h, states: ns, values }
}

/// Deterministic chain `0 -> 1 -> ... -> H` with one action and the terminal
/// reward paid on the last transition, mirroring a denoising trajectory.
pub fn chain_mdp(horizon: usize, terminal_reward: f64) -> Result<TabularMdp> {
    let ns = horizon + 1;
    let mut transition = vec![0.0; ns * ns];
    for s in 0..ns {
        transition[s * ns + (s + 1).min(horizon)] = 1.0;
    }
    let mut reward = vec![0.0; horizon * ns * ns];
    reward[((horizon - 1) * ns + horizon - 1) * ns + horizon] = terminal_reward;
    let mut initial = vec![0.0; ns];
    initial[0] = 1.0;
    TabularMdp::new(ns, 1, horizon, transition, reward, initial)
}

/// Time-indexed potential that turns the sparse chain reward into the
/// credit-assigned rewards `w_t * r`: `Phi_t = r * sum_{k<t} w_k` for
/// `t < H` and `Phi_H = r * (sum_k w_k - 1)`, identical for every state.
pub fn coca_potential(weights: &[f64], terminal_reward: f64, states: usize) -> PotentialFn {
    let horizon = weights.len();
    let mut values = Vec::with_capacity((horizon + 1) * states);
    let mut prefix = 0.0;
    for w in weights {
        values.extend(std::iter::repeat_n(terminal_reward * prefix, states));
        prefix += w;
    }
    values.extend(std::iter::repeat_n(terminal_reward * (prefix - 1.0), states));
    PotentialFn { horizon, states, values }
}

/// Three-state MDP where an action-dependent bonus flips the optimal first
/// action. From state 0, action 0 leads to state 1 (later reward 1.0) and
/// action 1 to state 2 (later reward 0.8). Paying 0.5 extra for taking
/// action 1 at `t = 0` is not of the form `Phi(s') - Phi(s)` and makes
/// action 1 optimal.
pub fn non_potential_counterexample() -> (TabularMdp, TabularMdp) {
    let (ns, na, h) = (3, 2, 2);
    let idx = |s: usize, a: usize, next: usize| (s * na + a) * ns + next;
    let mut transition = vec![0.0; ns * na * ns];
    transition[idx(0, 0, 1)] = 1.0;
    transition[idx(0, 1, 2)] = 1.0;
    for s in 1..ns {
        for a in 0..na {
            transition[idx(s, a, s)] = 1.0;
        }
    }
    let mut reward = vec![0.0; h * ns * na * ns];
    for a in 0..na {
        reward[((ns + 1) * na + a) * ns + 1] = 1.0;
        reward[((ns + 2) * na + a) * ns + 2] = 0.8;
    }
    let mdp = TabularMdp::new(ns, na, h, transition, reward, vec![1.0, 0.0, 0.0]).expect("valid");
    let shaped = mdp.with_reward_offset(|t, _, a, _| if t == 0 && a == 1 { 0.5 } else { 0.0 });
    (mdp, shaped)
}

/// Adds an action-dependent bonus on top of a potential shaping.
pub fn corrupt_shaping(shaped: &TabularMdp, bonus: f64) -> TabularMdp {
    shaped.with_reward_offset(|_, _, a, _| if a == 0 { bonus } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub instance: usize,
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub counterexample: Option<Counterexample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub instances: usize,
    pub passed: usize,
    pub max_offset_spread: f64,
    pub max_offset_error: f64,
    pub failures: Vec<InstanceFailure>,
    pub counterexample_detected: bool,
    pub counterexample: Option<Counterexample>,
    pub chain_max_error: f64,
    pub corrupted: bool,
    pub success: bool,
}

/// Random-instance sweep plus the fixed suite (chain equivalence and the
/// non-potential counterexample). With `corrupt`, every random instance gets
/// an action-dependent bonus on top of its potential shaping, and the sweep
/// is expected to fail.
pub fn verify_suite(count: usize, seed: u64, corrupt: bool) -> Result<SuiteReport> {
    let mut passed = 0;
    let mut failures = Vec::new();
    let (mut spread, mut offset_err) = (0.0f64, 0.0f64);
    for i in 0..count {
        let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Verify, &[i as u64]);
        let mdp = random_mdp(20, 4, 10, &mut rng);
        let phi = random_potential(&mdp, &mut rng);
        let mut shaped = apply_shaping(&mdp, &phi)?;
        if corrupt {
            shaped = corrupt_shaping(&shaped, 10.0);
        }
        let report = compare_solutions(&mdp, &shaped, Some(&phi));
        spread = spread.max(report.max_offset_spread);
        offset_err = offset_err.max(report.max_offset_error);
        if report.passed {
            passed += 1;
        } else {
            failures.push(InstanceFailure {
                instance: i,
                states: mdp.states,
                actions: mdp.actions,
                horizon: mdp.horizon,
                counterexample: report.counterexample,
            });
        }
    }

    let (mdp, shaped) = non_potential_counterexample();
    let cx = compare_solutions(&mdp, &shaped, None);
    let counterexample_detected = !cx.argmax_identical;

    // Chain equivalence on a fixed weight profile with a negative entry.
    let weights = [0.05, 0.2, -0.05, 0.3, 0.25, 0.25];
    let r = 1.7;
    let chain = chain_mdp(weights.len(), r)?;
    let phi = coca_potential(&weights, r, chain.states);
    let chain_shaped = apply_shaping(&chain, &phi)?;
    let chain_max_error =
        (0..weights.len()).map(|t| (chain_shaped.r(t, t, 0, t + 1) - weights[t] * r).abs()).fold(0.0, f64::max);
    let chain_ok = chain_max_error <= 1e-12 && check_invariance(&chain, &phi)?.passed;

    let success = failures.is_empty() && counterexample_detected && chain_ok;
    Ok(SuiteReport {
        seed,
        instances: count,
        passed,
        max_offset_spread: spread,
        max_offset_error: offset_err,
        failures,
        counterexample_detected,
        counterexample: cx.counterexample,
        chain_max_error,
        corrupted: corrupt,
        success,
    })
}
