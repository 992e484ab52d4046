//! Multinomial NUTS with the generalized no-U-turn criterion, dual-averaging
//! step-size adaptation and a diagonal metric learned during warmup.
//!
//! Warmup schedule (for `warmup >= 20`): the first 15% adapts only the step
//! size; two metric windows follow (up to the warmup midpoint, then up to 90%),
//! each ending with a regularized variance update and a step-size restart; the
//! final 10% settles the step size. The metric in use after warmup therefore
//! comes from draws in the latter half of warmup.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{ChainDraws, IterationStats, ModelDensity, RawDraws, SamplerConfig, SamplerError};

const INIT_RETRIES: usize = 100;

/// Progress notification handed to the observer once every few iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub chain: usize,
    /// Iterations completed, warmup included.
    pub iteration: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

fn sum(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

fn eval<M: ModelDensity + ?Sized>(m: &M, q: &[f64], grad: &mut [f64]) -> f64 {
    let lp = m.log_density(q, grad);
    if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
        lp
    } else {
        f64::NEG_INFINITY
    }
}

fn leapfrog_in_place<M: ModelDensity + ?Sized>(m: &M, z: &mut State, step: f64, inv_mass: &[f64]) {
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += 0.5 * step * g;
    }
    for ((q, p), w) in z.q.iter_mut().zip(&z.p).zip(inv_mass) {
        *q += step * w * p;
    }
    z.logp = eval(m, &z.q, &mut z.grad);
    if z.logp.is_finite() {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * step * g;
        }
    }
}

/// One leapfrog step (half kick, drift, half kick) under a diagonal mass
/// matrix. Returns the new position and momentum.
pub fn leapfrog<M: ModelDensity + ?Sized>(
    m: &M,
    position: &[f64],
    momentum: &[f64],
    step: f64,
    mass: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), SamplerError> {
    let n = m.dim();
    if position.len() != n || momentum.len() != n || mass.len() != n {
        return Err(SamplerError::InvalidConfig("dimension mismatch".into()));
    }
    if mass.iter().any(|w| !(*w > 0.0)) {
        return Err(SamplerError::InvalidConfig("mass entries must be > 0".into()));
    }
    let inv_mass: Vec<f64> = mass.iter().map(|w| 1.0 / w).collect();
    let mut grad = vec![0.0; n];
    let logp = eval(m, position, &mut grad);
    if !logp.is_finite() {
        return Err(SamplerError::NonFiniteDensity(position.to_vec()));
    }
    let mut z = State { q: position.to_vec(), p: momentum.to_vec(), grad, logp };
    leapfrog_in_place(m, &mut z, step, &inv_mass);
    if !z.logp.is_finite() {
        return Err(SamplerError::NonFiniteDensity(z.q));
    }
    Ok((z.q, z.p))
}

#[derive(Default)]
struct TreeStats {
    n_leapfrog: u32,
    sum_metro_prob: f64,
    divergent: bool,
}

/// Ends of a (sub)trajectory: momenta and mass-scaled momenta at both
/// extremes, in build order.
struct Ends {
    p_beg: Vec<f64>,
    p_sharp_beg: Vec<f64>,
    p_end: Vec<f64>,
    p_sharp_end: Vec<f64>,
}

struct Chain<'a, M: ModelDensity + ?Sized> {
    model: &'a M,
    inv_mass: Vec<f64>,
    step: f64,
    max_depth: u32,
    max_delta_h: f64,
    rng: ChaCha8Rng,
}

impl<M: ModelDensity + ?Sized> Chain<'_, M> {
    fn hamiltonian(&self, z: &State) -> f64 {
        if !z.logp.is_finite() {
            return f64::INFINITY;
        }
        let kinetic: f64 = z.p.iter().zip(&self.inv_mass).map(|(p, w)| p * p * w).sum::<f64>() * 0.5;
        -z.logp + kinetic
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_mass).map(|(p, w)| p * w).collect()
    }

    fn sample_momentum(&mut self, z: &mut State) {
        for (p, w) in z.p.iter_mut().zip(&self.inv_mass) {
            let n: f64 = self.rng.sample(StandardNormal);
            *p = n / w.sqrt();
        }
    }

    /// Builds a subtree of `2^depth` leapfrog steps from `z` in direction
    /// `sign`. Returns `None` when the subtree diverged or U-turned internally.
    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: u32,
        z: &mut State,
        z_propose: &mut State,
        rho: &mut Vec<f64>,
        h0: f64,
        sign: f64,
        stats: &mut TreeStats,
        log_sum_weight: &mut f64,
    ) -> Option<Ends> {
        if depth == 0 {
            let inv_mass = std::mem::take(&mut self.inv_mass);
            leapfrog_in_place(self.model, z, sign * self.step, &inv_mass);
            self.inv_mass = inv_mass;
            stats.n_leapfrog += 1;
            let mut h = self.hamiltonian(z);
            if h.is_nan() {
                h = f64::INFINITY;
            }
            if h - h0 > self.max_delta_h {
                stats.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            stats.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            if stats.divergent {
                return None;
            }
            z_propose.clone_from(z);
            add_into(rho, &z.p);
            let p_sharp = self.p_sharp(&z.p);
            return Some(Ends { p_beg: z.p.clone(), p_sharp_beg: p_sharp.clone(), p_end: z.p.clone(), p_sharp_end: p_sharp });
        }

        let n = z.q.len();
        let mut rho_left = vec![0.0; n];
        let mut lsw_left = f64::NEG_INFINITY;
        let left = self.build_tree(depth - 1, z, z_propose, &mut rho_left, h0, sign, stats, &mut lsw_left)?;

        let mut z_propose_right = z.clone();
        let mut rho_right = vec![0.0; n];
        let mut lsw_right = f64::NEG_INFINITY;
        let right =
            self.build_tree(depth - 1, z, &mut z_propose_right, &mut rho_right, h0, sign, stats, &mut lsw_right)?;

        let lsw_subtree = log_sum_exp(lsw_left, lsw_right);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_right > lsw_subtree {
            *z_propose = z_propose_right;
        } else {
            let accept = (lsw_right - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *z_propose = z_propose_right;
            }
        }

        let rho_subtree = sum(&rho_left, &rho_right);
        add_into(rho, &rho_subtree);

        let mut persist = criterion(&left.p_sharp_beg, &right.p_sharp_end, &rho_subtree);
        let rho_ext = sum(&rho_left, &right.p_beg);
        persist &= criterion(&left.p_sharp_beg, &right.p_sharp_beg, &rho_ext);
        let rho_ext = sum(&rho_right, &left.p_end);
        persist &= criterion(&left.p_sharp_end, &right.p_sharp_end, &rho_ext);

        if persist {
            Some(Ends { p_beg: left.p_beg, p_sharp_beg: left.p_sharp_beg, p_end: right.p_end, p_sharp_end: right.p_sharp_end })
        } else {
            None
        }
    }

    /// One NUTS transition from `z0`.
    fn transition(&mut self, z0: &State) -> (State, IterationStats) {
        let mut z = z0.clone();
        self.sample_momentum(&mut z);
        let h0 = self.hamiltonian(&z);

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let p_sharp0 = self.p_sharp(&z.p);
        // Trajectory extremes: backward end and forward end.
        let mut p_bck = z.p.clone();
        let mut p_sharp_bck = p_sharp0.clone();
        let mut p_fwd = z.p.clone();
        let mut p_sharp_fwd = p_sharp0;
        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let mut depth = 0;
        let mut stats = TreeStats::default();
        let n = z.q.len();

        while depth < self.max_depth {
            let mut rho_sub = vec![0.0; n];
            let mut lsw_sub = f64::NEG_INFINITY;
            let forward = self.rng.random::<f64>() > 0.5;
            let built = if forward {
                let mut edge = z_fwd.clone();
                let ends =
                    self.build_tree(depth, &mut edge, &mut z_propose, &mut rho_sub, h0, 1.0, &mut stats, &mut lsw_sub);
                z_fwd = edge;
                ends
            } else {
                let mut edge = z_bck.clone();
                let ends =
                    self.build_tree(depth, &mut edge, &mut z_propose, &mut rho_sub, h0, -1.0, &mut stats, &mut lsw_sub);
                z_bck = edge;
                ends
            };
            let Some(sub) = built else { break };
            depth += 1;

            if lsw_sub > log_sum_weight {
                z_sample = z_propose.clone();
            } else {
                let accept = (lsw_sub - log_sum_weight).exp();
                if self.rng.random::<f64>() < accept {
                    z_sample = z_propose.clone();
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_sub);

            let rho_old = std::mem::take(&mut rho);
            rho = sum(&rho_old, &rho_sub);
            let persist = if forward {
                let mut ok = criterion(&p_sharp_bck, &sub.p_sharp_end, &rho);
                ok &= criterion(&p_sharp_bck, &sub.p_sharp_beg, &sum(&rho_old, &sub.p_beg));
                ok &= criterion(&p_sharp_fwd, &sub.p_sharp_end, &sum(&rho_sub, &p_fwd));
                p_fwd = sub.p_end;
                p_sharp_fwd = sub.p_sharp_end;
                ok
            } else {
                let mut ok = criterion(&sub.p_sharp_end, &p_sharp_fwd, &rho);
                ok &= criterion(&sub.p_sharp_end, &p_sharp_bck, &sum(&rho_sub, &p_bck));
                ok &= criterion(&sub.p_sharp_beg, &p_sharp_fwd, &sum(&rho_old, &sub.p_beg));
                p_bck = sub.p_end;
                p_sharp_bck = sub.p_sharp_end;
                ok
            };
            if !persist {
                break;
            }
        }

        let accept_stat = if stats.n_leapfrog > 0 { stats.sum_metro_prob / stats.n_leapfrog as f64 } else { 0.0 };
        let energy = self.hamiltonian(&z_sample);
        let it = IterationStats {
            divergent: stats.divergent,
            treedepth: depth,
            max_treedepth_hit: depth >= self.max_depth,
            n_leapfrog: stats.n_leapfrog,
            energy,
            step_size: self.step,
            accept_stat,
            log_density: z_sample.logp,
        };
        (z_sample, it)
    }

    /// Doubling/halving heuristic for a step size with acceptance near 0.8.
    fn init_step_size(&mut self, z0: &State, chain: usize) -> Result<(), SamplerError> {
        let fail = |reason: &str| SamplerError::AdaptationFailure { chain, reason: reason.to_string() };
        let log_08 = 0.8_f64.ln();
        let attempt = |me: &mut Self| -> f64 {
            let mut z = z0.clone();
            me.sample_momentum(&mut z);
            let h0 = me.hamiltonian(&z);
            let inv_mass = std::mem::take(&mut me.inv_mass);
            leapfrog_in_place(me.model, &mut z, me.step, &inv_mass);
            me.inv_mass = inv_mass;
            let h = me.hamiltonian(&z);
            let dh = h0 - h;
            if dh.is_nan() {
                f64::NEG_INFINITY
            } else {
                dh
            }
        };
        let dh = attempt(self);
        let direction = if dh > log_08 { 1 } else { -1 };
        for _ in 0..200 {
            let dh = attempt(self);
            if (direction == 1 && !(dh > log_08)) || (direction == -1 && !(dh < log_08)) {
                return Ok(());
            }
            self.step = if direction == 1 { 2.0 * self.step } else { 0.5 * self.step };
            if self.step > 1e7 {
                return Err(fail("step size diverged to infinity"));
            }
            if self.step < 1e-12 {
                return Err(fail("step size underflow during initialization"));
            }
        }
        Ok(())
    }
}

struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(step: f64, delta: f64) -> Self {
        DualAveraging { mu: (10.0 * step).ln(), s_bar: 0.0, x_bar: 0.0, counter: 0.0, delta }
    }

    fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Boundaries (iteration indices) at which a metric window closes.
fn metric_windows(warmup: usize) -> Vec<(usize, usize)> {
    if warmup < 20 {
        return Vec::new();
    }
    let init = (warmup as f64 * 0.15).ceil() as usize;
    let mid = warmup / 2;
    let term_start = warmup - (warmup as f64 * 0.10).ceil() as usize;
    vec![(init, mid), (mid, term_start)]
}

fn regularized_variance(window: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let n = window.len() as f64;
    (0..dim)
        .map(|i| {
            let xs: Vec<f64> = window.iter().map(|d| d[i]).collect();
            let var = crate::math::variance(&xs);
            (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
        })
        .collect()
}

fn initial_state<M: ModelDensity + ?Sized>(m: &M, rng: &mut ChaCha8Rng) -> Result<State, SamplerError> {
    let n = m.dim();
    let center = m.init_center();
    let radius = m.init_radius();
    let mut last = vec![0.0; n];
    for _ in 0..INIT_RETRIES {
        let q: Vec<f64> = center.iter().map(|c| c + rng.random_range(-radius..radius)).collect();
        let mut grad = vec![0.0; n];
        let logp = eval(m, &q, &mut grad);
        if logp.is_finite() {
            return Ok(State { q, p: vec![0.0; n], grad, logp });
        }
        last = q;
    }
    Err(SamplerError::NonFiniteDensity(last))
}

fn run_chain<M: ModelDensity + ?Sized>(
    m: &M,
    cfg: &SamplerConfig,
    chain: usize,
    observer: &(dyn Fn(Progress) -> bool + Sync),
) -> Result<ChainDraws, SamplerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    let mut z = initial_state(m, &mut rng)?;
    let dim = m.dim();
    let mut ch = Chain {
        model: m,
        inv_mass: vec![1.0; dim],
        step: 1.0,
        max_depth: cfg.max_treedepth,
        max_delta_h: cfg.divergence_energy_threshold,
        rng,
    };
    ch.init_step_size(&z, chain)?;
    let mut da = DualAveraging::new(ch.step, cfg.target_accept);
    let windows = metric_windows(cfg.warmup);
    let mut window_draws: Vec<Vec<f64>> = Vec::new();
    let total = cfg.warmup + cfg.samples;
    let mut draws = Vec::with_capacity(cfg.samples);
    let mut stats = Vec::with_capacity(cfg.samples);

    for it in 0..total {
        let (next, st) = ch.transition(&z);
        z = next;
        if it < cfg.warmup {
            ch.step = da.update(st.accept_stat);
            if let Some(&(_, end)) = windows.iter().find(|(s, e)| it >= *s && it < *e) {
                window_draws.push(z.q.clone());
                if it + 1 == end && window_draws.len() >= 10 {
                    ch.inv_mass = regularized_variance(&window_draws, dim);
                    window_draws.clear();
                    ch.init_step_size(&z, chain)?;
                    da = DualAveraging::new(ch.step, cfg.target_accept);
                }
            }
            if it + 1 == cfg.warmup {
                ch.step = da.final_step();
            }
            if !ch.step.is_finite() || ch.step < 1e-12 {
                return Err(SamplerError::AdaptationFailure {
                    chain,
                    reason: format!("step size {} after iteration {}", ch.step, it + 1),
                });
            }
        } else {
            draws.push(z.q.clone());
            stats.push(st);
        }
        if (it + 1) % 10 == 0 || it + 1 == total {
            if !observer(Progress { chain, iteration: it + 1, total }) {
                return Err(SamplerError::Cancelled);
            }
        }
    }
    Ok(ChainDraws { draws, stats, step_size: ch.step, inv_mass: ch.inv_mass })
}

/// Runs `cfg.chains` independent chains, concurrently. Chain `c` draws from
/// the ChaCha stream `c` of `cfg.seed`, so the output does not depend on
/// scheduling.
pub fn nuts_sample<M: ModelDensity + ?Sized>(m: &M, cfg: &SamplerConfig) -> Result<RawDraws, SamplerError> {
    nuts_sample_with_progress(m, cfg, &|_| true)
}

/// As [`nuts_sample`], reporting progress; the observer returns `false` to cancel.
pub fn nuts_sample_with_progress<M: ModelDensity + ?Sized>(
    m: &M,
    cfg: &SamplerConfig,
    observer: &(dyn Fn(Progress) -> bool + Sync),
) -> Result<RawDraws, SamplerError> {
    cfg.validate()?;
    if m.dim() < 1 {
        return Err(SamplerError::InvalidConfig("model dimension must be >= 1".into()));
    }
    let chains: Result<Vec<ChainDraws>, SamplerError> =
        (0..cfg.chains).into_par_iter().map(|c| run_chain(m, cfg, c, observer)).collect();
    Ok(RawDraws { dim: m.dim(), chains: chains? })
}
