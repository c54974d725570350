//! 2D navigation: move from the origin to a goal in the unit square.
//!
//! The state is the 2D position, the action a 2D velocity clamped to
//! `[-0.1, 0.1]` per coordinate, the reward the negative squared distance to
//! the goal. An episode ends within 0.01 of the goal or at the 100-step
//! horizon.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const HORIZON: usize = 100;
pub const ACTION_LIMIT: f64 = 0.1;
pub const GOAL_RADIUS: f64 = 0.01;
const BASELINE_RIDGE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavTask {
    pub goal: [f64; 2],
}

pub fn sample_nav_task(rng: &mut ChaCha8Rng) -> NavTask {
    NavTask {
        goal: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub next: [f64; 2],
    pub reward: f64,
    pub done: bool,
}

/// One environment transition. The action is clamped before the dynamics;
/// `step_index` is the zero-based index of this step, so the episode is done
/// when it reaches the horizon.
pub fn env_step(task: &NavTask, state: [f64; 2], action: [f64; 2], step_index: usize) -> StepOutcome {
    let ax = action[0].clamp(-ACTION_LIMIT, ACTION_LIMIT);
    let ay = action[1].clamp(-ACTION_LIMIT, ACTION_LIMIT);
    let next = [state[0] + ax, state[1] + ay];
    let dx = next[0] - task.goal[0];
    let dy = next[1] - task.goal[1];
    let dist_sq = dx * dx + dy * dy;
    StepOutcome {
        next,
        reward: -dist_sq,
        done: dist_sq.sqrt() < GOAL_RADIUS || step_index + 1 == HORIZON,
    }
}

/// A rollout: per-step states, unclamped sampled actions, rewards and the
/// log-probabilities recorded at sampling time. Returns and advantages are
/// filled in afterwards.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub states: Vec<[f64; 2]>,
    pub actions: Vec<[f64; 2]>,
    pub rewards: Vec<f64>,
    pub logps: Vec<f64>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    fn fill_returns(&mut self, gamma: f64) {
        let n = self.rewards.len();
        self.returns = vec![0.0; n];
        let mut acc = 0.0;
        for i in (0..n).rev() {
            acc = self.rewards[i] + gamma * acc;
            self.returns[i] = acc;
        }
    }
}

/// A diagonal-Gaussian policy over 2D actions: a mean function of the state
/// and a per-dimension log standard deviation.
pub struct GaussianPolicy<'a> {
    pub mean: Box<dyn Fn(&[f64; 2]) -> Vec<f64> + 'a>,
    pub logstd: [f64; 2],
}

pub fn gaussian_logp(action: &[f64; 2], mean: &[f64], logstd: &[f64; 2]) -> f64 {
    let mut lp = 0.0;
    for d in 0..2 {
        let sigma = logstd[d].exp();
        let z = (action[d] - mean[d]) / sigma;
        lp += -logstd[d] - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z * z;
    }
    lp
}

/// Roll out `n_traj` episodes from the origin. Actions are sampled from the
/// policy; log-probs are recorded against the unclamped samples. Returns are
/// discounted with `gamma`; advantages stay empty until a baseline is fitted.
pub fn collect_trajectories(
    policy: &GaussianPolicy,
    task: &NavTask,
    n_traj: usize,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Trajectory> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let mut traj = Trajectory::default();
        let mut state = [0.0, 0.0];
        for t in 0..HORIZON {
            let mean = (policy.mean)(&state);
            debug_assert_eq!(mean.len(), 2);
            let action = [
                mean[0] + policy.logstd[0].exp() * unit.sample(rng),
                mean[1] + policy.logstd[1].exp() * unit.sample(rng),
            ];
            let logp = gaussian_logp(&action, &mean, &policy.logstd);
            let step = env_step(task, state, action, t);
            traj.states.push(state);
            traj.actions.push(action);
            traj.rewards.push(step.reward);
            traj.logps.push(logp);
            state = step.next;
            if step.done {
                break;
            }
        }
        traj.fill_returns(gamma);
        out.push(traj);
    }
    out
}

/// Features for the linear return baseline: state, state squared, and a cubic
/// in normalized time, plus a constant.
pub fn baseline_features(state: &[f64; 2], t: usize) -> [f64; 8] {
    let tt = t as f64 / HORIZON as f64;
    [
        state[0],
        state[1],
        state[0] * state[0],
        state[1] * state[1],
        tt,
        tt * tt,
        tt * tt * tt,
        1.0,
    ]
}

/// Ridge least-squares fit of per-step returns on [`baseline_features`].
pub fn fit_linear_baseline(trajectories: &[Trajectory]) -> [f64; 8] {
    let mut xtx = DMatrix::<f64>::zeros(8, 8);
    let mut xty = DVector::<f64>::zeros(8);
    for traj in trajectories {
        for (t, state) in traj.states.iter().enumerate() {
            let f = baseline_features(state, t);
            for i in 0..8 {
                xty[i] += f[i] * traj.returns[t];
                for j in 0..8 {
                    xtx[(i, j)] += f[i] * f[j];
                }
            }
        }
    }
    for i in 0..8 {
        xtx[(i, i)] += BASELINE_RIDGE;
    }
    let coef = xtx
        .lu()
        .solve(&xty)
        .unwrap_or_else(|| DVector::zeros(8));
    let mut out = [0.0; 8];
    for i in 0..8 {
        out[i] = coef[i];
    }
    out
}

pub fn baseline_value(coef: &[f64; 8], state: &[f64; 2], t: usize) -> f64 {
    baseline_features(state, t)
        .iter()
        .zip(coef)
        .map(|(f, c)| f * c)
        .sum()
}

/// Advantages for one trajectory set: returns minus the fitted baseline,
/// then mean-centered over the whole set. With `normalize` they are also
/// scaled to unit standard deviation, which keeps one policy-gradient step
/// bounded regardless of the return scale.
pub fn compute_advantages(trajectories: &mut [Trajectory], coef: &[f64; 8], normalize: bool) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for traj in trajectories.iter_mut() {
        traj.advantages = traj
            .states
            .iter()
            .enumerate()
            .map(|(t, s)| traj.returns[t] - baseline_value(coef, s, t))
            .collect();
        sum += traj.advantages.iter().sum::<f64>();
        count += traj.advantages.len();
    }
    if count == 0 {
        return;
    }
    let mean = sum / count as f64;
    for traj in trajectories.iter_mut() {
        for a in traj.advantages.iter_mut() {
            *a -= mean;
        }
    }
    if normalize {
        let var: f64 = trajectories
            .iter()
            .flat_map(|t| t.advantages.iter())
            .map(|a| a * a)
            .sum::<f64>()
            / count as f64;
        let std = var.sqrt().max(1e-8);
        for traj in trajectories.iter_mut() {
            for a in traj.advantages.iter_mut() {
                *a /= std;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};

    #[test]
    fn reward_is_negative_squared_distance() {
        let task = NavTask { goal: [0.0, 0.0] };
        let out = env_step(&task, [0.3, 0.4], [0.0, 0.0], 0);
        assert!((out.reward + 0.25).abs() < 1e-15);
        assert!(!out.done);
    }

    #[test]
    fn actions_are_clamped() {
        let task = NavTask { goal: [5.0, 5.0] };
        let out = env_step(&task, [0.0, 0.0], [0.5, -0.5], 0);
        assert_eq!(out.next, [0.1, -0.1]);
    }

    #[test]
    fn done_near_goal_and_at_horizon() {
        let task = NavTask { goal: [0.1, 0.0] };
        let out = env_step(&task, [0.0, 0.0], [0.095, 0.0], 3);
        assert!(out.done);
        let far = NavTask { goal: [9.0, 9.0] };
        let out = env_step(&far, [0.0, 0.0], [0.0, 0.0], HORIZON - 1);
        assert!(out.done);
    }

    fn frozen_policy() -> GaussianPolicy<'static> {
        GaussianPolicy {
            mean: Box::new(|_s| vec![0.0, 0.0]),
            logstd: [-30.0, -30.0],
        }
    }

    #[test]
    fn frozen_agent_return_matches_closed_form() {
        let task = NavTask { goal: [0.6, 0.8] };
        let mut rng = stream(5, domain::ROLLOUT, 0);
        let trajs = collect_trajectories(&frozen_policy(), &task, 1, 0.99, &mut rng);
        let expected = -(HORIZON as f64) * (0.36 + 0.64);
        assert!((trajs[0].total_reward() - expected).abs() < 1e-6);
        assert_eq!(trajs[0].len(), HORIZON);
    }

    #[test]
    fn empty_collection_and_determinism() {
        let task = NavTask { goal: [0.5, 0.5] };
        let policy = GaussianPolicy {
            mean: Box::new(|s| vec![0.05 - s[0] * 0.01, 0.05]),
            logstd: [-2.3, -2.3],
        };
        let mut r1 = stream(9, domain::ROLLOUT, 7);
        let mut r2 = stream(9, domain::ROLLOUT, 7);
        let a = collect_trajectories(&policy, &task, 3, 0.99, &mut r1);
        let b = collect_trajectories(&policy, &task, 3, 0.99, &mut r2);
        assert_eq!(a.len(), 3);
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.len(), tb.len());
            for i in 0..ta.len() {
                assert_eq!(ta.actions[i][0].to_bits(), tb.actions[i][0].to_bits());
                assert_eq!(ta.rewards[i].to_bits(), tb.rewards[i].to_bits());
            }
        }
        let none = collect_trajectories(&policy, &task, 0, 0.99, &mut r1);
        assert!(none.is_empty());
    }

    #[test]
    fn returns_follow_discount_recursion() {
        let mut traj = Trajectory {
            states: vec![[0.0, 0.0]; 3],
            actions: vec![[0.0, 0.0]; 3],
            rewards: vec![1.0, 2.0, 3.0],
            logps: vec![0.0; 3],
            returns: vec![],
            advantages: vec![],
        };
        traj.fill_returns(0.5);
        assert_eq!(traj.returns, vec![1.0 + 0.5 * (2.0 + 0.5 * 3.0), 2.0 + 1.5, 3.0]);
    }

    #[test]
    fn baseline_reproduces_constant_returns() {
        let mut traj = Trajectory {
            states: vec![[0.1, 0.2], [0.3, 0.1], [0.5, 0.9]],
            actions: vec![[0.0, 0.0]; 3],
            rewards: vec![0.0; 3],
            logps: vec![0.0; 3],
            returns: vec![4.2, 4.2, 4.2],
            advantages: vec![],
        };
        let coef = fit_linear_baseline(std::slice::from_ref(&traj));
        for (t, s) in traj.states.iter().enumerate() {
            assert!((baseline_value(&coef, s, t) - 4.2).abs() < 1e-4);
        }
        let mut set = [traj.clone()];
        compute_advantages(&mut set, &coef, false);
        let mean: f64 =
            set[0].advantages.iter().sum::<f64>() / set[0].advantages.len() as f64;
        assert!(mean.abs() < 1e-10);
        traj.advantages.clear();
    }

    #[test]
    fn baseline_fits_exactly_linear_returns() {
        // returns constructed as an exact linear function of the
        // well-conditioned features (the cubic time terms are nearly
        // collinear, so an instance exercising them cannot beat the ridge)
        let coef_true = [0.3, -0.2, 0.5, 0.1, 0.0, 0.0, 0.0, 0.05];
        let mut rng = stream(3, domain::ROLLOUT, 1);
        let mut trajs = Vec::new();
        for _ in 0..20 {
            let mut traj = Trajectory::default();
            for t in 0..HORIZON {
                let s = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
                traj.states.push(s);
                traj.actions.push([0.0, 0.0]);
                traj.rewards.push(0.0);
                traj.logps.push(0.0);
                traj.returns.push(
                    baseline_features(&s, t)
                        .iter()
                        .zip(&coef_true)
                        .map(|(f, c)| f * c)
                        .sum(),
                );
            }
            trajs.push(traj);
        }
        let coef = fit_linear_baseline(&trajs);
        for traj in &trajs {
            for (t, s) in traj.states.iter().enumerate() {
                let resid = baseline_value(&coef, s, t) - traj.returns[t];
                assert!(resid.abs() < 1e-8, "residual {resid}");
            }
        }
    }
}
