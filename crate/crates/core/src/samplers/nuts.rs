//! No-U-Turn sampler with multinomial trajectory sampling, the generalized
//! no-U-turn criterion (including the checks across merged subtrees), an
//! identity mass matrix and dual-averaging step-size adaptation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A differentiable log density.
pub trait LogDensity {
    fn dim(&self) -> usize;

    /// Writes `∇ log p(x)` into `grad` and returns `log p(x)`.
    fn log_density_and_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NutsConfig {
    pub target_accept: f64,
    pub max_tree_depth: u32,
    /// Transitions (counted from the first) during which the step size adapts.
    pub adapt_iterations: u64,
    /// `None` picks a starting step size with the doubling/halving heuristic.
    pub initial_step_size: Option<f64>,
    /// Energy error beyond which a trajectory is declared divergent.
    pub max_energy_error: f64,
}

impl Default for NutsConfig {
    fn default() -> Self {
        Self {
            target_accept: 0.8,
            max_tree_depth: 10,
            adapt_iterations: 2000,
            initial_step_size: None,
            max_energy_error: 1000.0,
        }
    }
}

impl NutsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!(
                "target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if self.max_tree_depth == 0 || self.max_tree_depth > 15 {
            return Err(Error::Config(format!(
                "max_tree_depth must be in 1..=15, got {}",
                self.max_tree_depth
            )));
        }
        if let Some(e) = self.initial_step_size {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::Config(format!(
                    "initial_step_size must be finite and >= 0, got {e}"
                )));
            }
        }
        Ok(())
    }
}

/// Dual averaging of the log step size (Nesterov's scheme as used by NUTS).
#[derive(Debug, Clone)]
pub struct DualAverage {
    mu: f64,
    log_step: f64,
    log_step_bar: f64,
    h_bar: f64,
    count: u64,
    gamma: f64,
    t0: f64,
    kappa: f64,
}

impl DualAverage {
    pub fn new(initial_step: f64) -> Self {
        Self {
            mu: (10.0 * initial_step).ln(),
            log_step: initial_step.ln(),
            log_step_bar: initial_step.ln(),
            h_bar: 0.0,
            count: 0,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
        }
    }

    pub fn update(&mut self, accept_stat: f64, target: f64) {
        self.count += 1;
        let m = self.count as f64;
        let w = 1.0 / (m + self.t0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (target - accept_stat);
        self.log_step = self.mu - m.sqrt() / self.gamma * self.h_bar;
        let eta = m.powf(-self.kappa);
        self.log_step_bar = eta * self.log_step + (1.0 - eta) * self.log_step_bar;
    }

    pub fn current(&self) -> f64 {
        self.log_step.exp()
    }

    pub fn averaged(&self) -> f64 {
        self.log_step_bar.exp()
    }
}

/// Diagnostics of one transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionStats {
    pub accept_stat: f64,
    pub n_leapfrog: u64,
    pub depth: u32,
    pub diverged: bool,
    pub step_size: f64,
    /// Log density at the returned point.
    pub log_density: f64,
}

#[derive(Clone)]
struct Point {
    x: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

impl Point {
    fn energy(&self) -> f64 {
        -self.logp + 0.5 * dot(&self.p, &self.p)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// A subtree in time order: `first` is the earliest state, `last` the latest.
struct Tree {
    first: Point,
    last: Point,
    proposal: Point,
    log_weight: f64,
    rho: Vec<f64>,
    n_leapfrog: u64,
    sum_accept: f64,
    diverged: bool,
    turning: bool,
}

impl Tree {
    fn invalid(&self) -> bool {
        self.diverged || self.turning
    }
}

/// No U-turn between two ends of a span whose summed momentum is `rho`.
fn no_u_turn(p_begin: &[f64], p_end: &[f64], rho: &[f64]) -> bool {
    dot(p_begin, rho) > 0.0 && dot(p_end, rho) > 0.0
}

fn merged_turning(left: &Tree, right: &Tree, rho: &[f64]) -> bool {
    let mut persist = no_u_turn(&left.first.p, &right.last.p, rho);
    let ext: Vec<f64> = left
        .rho
        .iter()
        .zip(&right.first.p)
        .map(|(a, b)| a + b)
        .collect();
    persist &= no_u_turn(&left.first.p, &right.first.p, &ext);
    let ext: Vec<f64> = right
        .rho
        .iter()
        .zip(&left.last.p)
        .map(|(a, b)| a + b)
        .collect();
    persist &= no_u_turn(&left.last.p, &right.last.p, &ext);
    !persist
}

struct Integrator<'a, D: LogDensity> {
    target: &'a mut D,
    step: f64,
    h0: f64,
    max_energy_error: f64,
}

impl<D: LogDensity> Integrator<'_, D> {
    fn leapfrog(&mut self, from: &Point, direction: f64) -> Point {
        let eps = direction * self.step;
        let mut p: Vec<f64> = from
            .p
            .iter()
            .zip(&from.grad)
            .map(|(p, g)| p + 0.5 * eps * g)
            .collect();
        let x: Vec<f64> = from.x.iter().zip(&p).map(|(x, p)| x + eps * p).collect();
        let mut grad = vec![0.0; x.len()];
        let logp = self.target.log_density_and_grad(&x, &mut grad);
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * eps * g;
        }
        Point { x, p, grad, logp }
    }

    fn leaf(&mut self, from: &Point, direction: f64) -> Tree {
        let point = self.leapfrog(from, direction);
        let h = point.energy();
        let delta = self.h0 - h;
        let diverged = !h.is_finite()
            || !point.grad.iter().all(|g| g.is_finite())
            || -delta > self.max_energy_error;
        let (log_weight, accept) = if diverged {
            (f64::NEG_INFINITY, 0.0)
        } else {
            (delta, delta.exp().min(1.0))
        };
        Tree {
            rho: point.p.clone(),
            first: point.clone(),
            last: point.clone(),
            proposal: point,
            log_weight,
            n_leapfrog: 1,
            sum_accept: accept,
            diverged,
            turning: false,
        }
    }

    /// Builds a subtree of `2^depth` states continuing from `edge` in `direction`.
    fn build<R: Rng>(&mut self, edge: &Point, depth: u32, direction: f64, rng: &mut R) -> Tree {
        if depth == 0 {
            return self.leaf(edge, direction);
        }
        let inner = self.build(edge, depth - 1, direction, rng);
        if inner.invalid() {
            return inner;
        }
        let next_edge = if direction > 0.0 {
            &inner.last
        } else {
            &inner.first
        };
        let outer = self.build(next_edge, depth - 1, direction, rng);
        let n_leapfrog = inner.n_leapfrog + outer.n_leapfrog;
        let sum_accept = inner.sum_accept + outer.sum_accept;
        if outer.invalid() {
            return Tree {
                n_leapfrog,
                sum_accept,
                ..outer
            };
        }
        let log_weight = log_add_exp(inner.log_weight, outer.log_weight);
        let take_outer = rng.random::<f64>() < (outer.log_weight - log_weight).exp();
        let (left, right) = if direction > 0.0 {
            (inner, outer)
        } else {
            (outer, inner)
        };
        let rho: Vec<f64> = left
            .rho
            .iter()
            .zip(&right.rho)
            .map(|(a, b)| a + b)
            .collect();
        let turning = merged_turning(&left, &right, &rho);
        let outer_is_right = direction > 0.0;
        let proposal = match (take_outer, outer_is_right) {
            (true, true) | (false, false) => right.proposal,
            _ => left.proposal,
        };
        Tree {
            first: left.first,
            last: right.last,
            proposal,
            log_weight,
            rho,
            n_leapfrog,
            sum_accept,
            diverged: false,
            turning,
        }
    }
}

/// NUTS transition kernel with its step-size adaptation state.
#[derive(Debug, Clone)]
pub struct Nuts {
    config: NutsConfig,
    step_size: Option<f64>,
    dual: Option<DualAverage>,
    adapted: u64,
}

impl Nuts {
    pub fn new(config: NutsConfig) -> Self {
        Self {
            step_size: config.initial_step_size,
            dual: config.initial_step_size.map(DualAverage::new),
            config,
            adapted: 0,
        }
    }

    pub fn config(&self) -> &NutsConfig {
        &self.config
    }

    pub fn step_size(&self) -> Option<f64> {
        self.step_size
    }

    /// Overrides the step size and stops adaptation.
    pub fn fix_step_size(&mut self, step: f64) {
        self.step_size = Some(step);
        self.dual = None;
        self.adapted = self.config.adapt_iterations;
    }

    fn adapting(&self) -> bool {
        self.adapted < self.config.adapt_iterations
    }

    /// Starting step size: double or halve until the one-step acceptance crosses 1/2.
    fn initial_step<D: LogDensity, R: Rng>(
        &self,
        start: &Point,
        target: &mut D,
        rng: &mut R,
    ) -> f64 {
        let mut step = 1.0;
        let mut p0 = start.clone();
        p0.p = (0..start.x.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let h0 = p0.energy();
        let mut integ = Integrator {
            target,
            step,
            h0,
            max_energy_error: f64::INFINITY,
        };
        let log_ratio = |integ: &mut Integrator<'_, D>| {
            let q = integ.leapfrog(&p0, 1.0);
            let d = h0 - q.energy();
            if d.is_finite() {
                d
            } else {
                f64::NEG_INFINITY
            }
        };
        let first = log_ratio(&mut integ);
        let up = first > 0.5f64.ln();
        for _ in 0..100 {
            step = if up { step * 2.0 } else { step * 0.5 };
            integ.step = step;
            let d = log_ratio(&mut integ);
            if up != (d > 0.5f64.ln()) {
                break;
            }
        }
        step
    }

    /// One transition from `x` in place. During the first
    /// `adapt_iterations` calls the step size is tuned by dual averaging;
    /// afterwards it is frozen at the averaged value.
    pub fn transition<D: LogDensity, R: Rng>(
        &mut self,
        x: &mut [f64],
        target: &mut D,
        rng: &mut R,
    ) -> Result<TransitionStats> {
        let dim = target.dim();
        if x.len() != dim {
            return Err(Error::Dimension(format!(
                "state has length {}, target dimension {dim}",
                x.len()
            )));
        }
        let mut grad = vec![0.0; dim];
        let logp = target.log_density_and_grad(x, &mut grad);
        if !logp.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Sampler(format!(
                "log density is not finite at the current point ({logp})"
            )));
        }
        let mut start = Point {
            x: x.to_vec(),
            p: Vec::new(),
            grad,
            logp,
        };
        let step = match self.step_size {
            Some(s) => s,
            None => {
                let s = self.initial_step(&start, target, rng);
                self.step_size = Some(s);
                self.dual = Some(DualAverage::new(s));
                s
            }
        };
        start.p = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let h0 = start.energy();
        let mut integ = Integrator {
            target,
            step,
            h0,
            max_energy_error: self.config.max_energy_error,
        };

        let mut tree = Tree {
            rho: start.p.clone(),
            first: start.clone(),
            last: start.clone(),
            proposal: start.clone(),
            log_weight: 0.0,
            n_leapfrog: 0,
            sum_accept: 0.0,
            diverged: false,
            turning: false,
        };
        let mut depth = 0;
        while depth < self.config.max_tree_depth {
            let direction = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let edge = if direction > 0.0 {
                tree.last.clone()
            } else {
                tree.first.clone()
            };
            let sub = integ.build(&edge, depth, direction, rng);
            depth += 1;
            tree.n_leapfrog += sub.n_leapfrog;
            tree.sum_accept += sub.sum_accept;
            if sub.diverged {
                tree.diverged = true;
                break;
            }
            if sub.turning {
                break;
            }
            // Biased progressive sampling favours the new half.
            if rng.random::<f64>() < (sub.log_weight - tree.log_weight).exp() {
                tree.proposal = sub.proposal.clone();
            }
            tree.log_weight = log_add_exp(tree.log_weight, sub.log_weight);
            let (left, right) = if direction > 0.0 {
                (tree, sub)
            } else {
                (sub, tree)
            };
            let rho: Vec<f64> = left
                .rho
                .iter()
                .zip(&right.rho)
                .map(|(a, b)| a + b)
                .collect();
            let turning = merged_turning(&left, &right, &rho);
            let (kept, other) = if direction > 0.0 {
                (left, right)
            } else {
                (right, left)
            };
            tree = Tree {
                first: if direction > 0.0 {
                    kept.first
                } else {
                    other.first
                },
                last: if direction > 0.0 {
                    other.last
                } else {
                    kept.last
                },
                proposal: kept.proposal,
                log_weight: kept.log_weight,
                rho,
                n_leapfrog: kept.n_leapfrog,
                sum_accept: kept.sum_accept,
                diverged: false,
                turning,
            };
            if turning {
                break;
            }
        }

        let accept_stat = if tree.n_leapfrog > 0 {
            tree.sum_accept / tree.n_leapfrog as f64
        } else {
            0.0
        };
        // A divergent subtree is dropped whole; the draw comes from the
        // trajectory built before it, which may be the starting point.
        x.copy_from_slice(&tree.proposal.x);
        let (log_density, diverged) = (tree.proposal.logp, tree.diverged);

        if self.adapting() {
            let dual = self.dual.get_or_insert_with(|| DualAverage::new(step));
            dual.update(accept_stat, self.config.target_accept);
            self.adapted += 1;
            let still = self.adapted < self.config.adapt_iterations;
            self.step_size = Some(if still {
                dual.current()
            } else {
                dual.averaged()
            });
        }

        Ok(TransitionStats {
            accept_stat,
            n_leapfrog: tree.n_leapfrog,
            depth,
            diverged,
            step_size: step,
            log_density,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct StdNormal(usize);

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density_and_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
            for (g, v) in grad.iter_mut().zip(x) {
                *g = -v;
            }
            -0.5 * dot(x, x)
        }
    }

    /// Independent Exp(1) coordinates with the sigmoid relaxation of `x ≥ 0`.
    struct RelaxedExp {
        eta: f64,
    }

    impl LogDensity for RelaxedExp {
        fn dim(&self) -> usize {
            2
        }
        fn log_density_and_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
            let mut v = 0.0;
            for (g, &xi) in grad.iter_mut().zip(x) {
                let z = self.eta * xi;
                let log_sig = if z > 0.0 {
                    -(-z).exp().ln_1p()
                } else {
                    z - z.exp().ln_1p()
                };
                let sig_neg = 1.0 / (1.0 + z.exp());
                v += -xi + log_sig;
                *g = -1.0 + self.eta * sig_neg;
            }
            v
        }
    }

    fn moments(draws: &[Vec<f64>], d: usize) -> (f64, f64) {
        let n = draws.len() as f64;
        let m = draws.iter().map(|x| x[d]).sum::<f64>() / n;
        let v = draws.iter().map(|x| (x[d] - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn standard_gaussian_moments() {
        let mut target = StdNormal(10);
        let mut nuts = Nuts::new(NutsConfig {
            adapt_iterations: 1000,
            ..NutsConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = vec![0.5; 10];
        for _ in 0..1000 {
            nuts.transition(&mut x, &mut target, &mut rng).unwrap();
        }
        let draws: Vec<Vec<f64>> = (0..20_000)
            .map(|_| {
                nuts.transition(&mut x, &mut target, &mut rng).unwrap();
                x.clone()
            })
            .collect();
        for d in 0..10 {
            let (m, v) = moments(&draws, d);
            assert!(m.abs() < 0.05, "mean {m}");
            assert!((v - 1.0).abs() < 0.1, "var {v}");
        }
    }

    #[test]
    fn relaxed_exponential_mean() {
        let mut target = RelaxedExp { eta: 100.0 };
        let mut nuts = Nuts::new(NutsConfig {
            adapt_iterations: 1000,
            ..NutsConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = vec![1.0, 1.0];
        for _ in 0..1000 {
            nuts.transition(&mut x, &mut target, &mut rng).unwrap();
        }
        let draws: Vec<Vec<f64>> = (0..20_000)
            .map(|_| {
                nuts.transition(&mut x, &mut target, &mut rng).unwrap();
                x.clone()
            })
            .collect();
        for d in 0..2 {
            let (m, _) = moments(&draws, d);
            assert!((m - 1.0).abs() < 0.05, "mean {m}");
        }
    }

    #[test]
    fn zero_step_size_leaves_state_unchanged() {
        let mut target = StdNormal(4);
        let mut nuts = Nuts::new(NutsConfig {
            max_tree_depth: 4,
            ..NutsConfig::default()
        });
        nuts.fix_step_size(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let start = vec![0.3, -1.0, 2.0, 0.1];
        let mut x = start.clone();
        for _ in 0..10 {
            let s = nuts.transition(&mut x, &mut target, &mut rng).unwrap();
            assert_eq!(x, start);
            assert!(!s.diverged);
        }
    }

    #[test]
    fn divergence_discards_the_divergent_subtree() {
        let mut target = StdNormal(3);
        let mut nuts = Nuts::new(NutsConfig {
            max_energy_error: 1e-12,
            ..NutsConfig::default()
        });
        nuts.fix_step_size(5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let start = vec![1.0, 2.0, 3.0];
        let mut x = start.clone();
        let s = nuts.transition(&mut x, &mut target, &mut rng).unwrap();
        assert!(s.diverged);
        assert_eq!(x, start);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        struct Bad;
        impl LogDensity for Bad {
            fn dim(&self) -> usize {
                1
            }
            fn log_density_and_grad(&mut self, _: &[f64], g: &mut [f64]) -> f64 {
                g[0] = 0.0;
                f64::NAN
            }
        }
        let mut nuts = Nuts::new(NutsConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            nuts.transition(&mut [0.0], &mut Bad, &mut rng),
            Err(Error::Sampler(_))
        ));
    }

    #[test]
    fn adaptation_reaches_target_acceptance() {
        let mut target = StdNormal(50);
        let mut nuts = Nuts::new(NutsConfig {
            adapt_iterations: 500,
            ..NutsConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = vec![0.0; 50];
        for _ in 0..500 {
            nuts.transition(&mut x, &mut target, &mut rng).unwrap();
        }
        let frozen = nuts.step_size().unwrap();
        let mut acc = 0.0;
        for _ in 0..500 {
            let s = nuts.transition(&mut x, &mut target, &mut rng).unwrap();
            assert_eq!(s.step_size, frozen);
            acc += s.accept_stat;
        }
        let acc = acc / 500.0;
        assert!((acc - 0.8).abs() < 0.1, "mean acceptance {acc}");
    }

    #[test]
    fn same_seed_same_draws() {
        let run = || {
            let mut target = StdNormal(5);
            let mut nuts = Nuts::new(NutsConfig::default());
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut x = vec![0.1; 5];
            (0..50)
                .map(|_| {
                    nuts.transition(&mut x, &mut target, &mut rng).unwrap();
                    x.clone()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
