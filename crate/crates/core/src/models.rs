//! Deterministic models propagated by runners.
//!
//! `Lorenz96` is the chaotic benchmark used for twin experiments. `VarCost`
//! applies a cheap smoothing map and then sleeps for a state-dependent
//! duration whose distribution mimics measured propagation walltimes: a
//! Beta(2, 3) draw scaled to `[base, base + spread]`, i.e. a mean at 40% of the
//! spread above the minimum.

use std::thread;
use std::time::Duration;

use rand::Rng;
use rand_distr::Beta;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::partition::{make_layout, DynamicState, StateLayout};
use crate::rng::{keyed_stream, StreamDomain};

/// Mean of the unit-interval duration distribution used by `VarCost`.
pub const VARCOST_FIT_MEAN: f64 = 0.4;
const VARCOST_BETA: (f64, f64) = (2.0, 3.0);

const LORENZ_SPINUP_STEPS: u32 = 1000;

pub trait Model: Send + Sync {
    fn n_dynamic(&self) -> usize;

    fn n_assimilated(&self) -> usize;

    /// Unperturbed state every member is derived from.
    fn base_state(&self) -> Vec<f64>;

    /// Pure state transition over `nsteps`. Fails if the state leaves the
    /// finite range.
    fn advance(&self, state: &mut [f64], nsteps: u32) -> Result<()>;

    /// Extra walltime the propagation of `state` takes.
    fn propagation_cost(&self, _state: &[f64]) -> Duration {
        Duration::ZERO
    }

    /// What a runner does per assignment: compute, then pay the cost.
    fn propagate(&self, state: &mut [f64], nsteps: u32) -> Result<()> {
        let cost = self.propagation_cost(state);
        self.advance(state, nsteps)?;
        if !cost.is_zero() {
            thread::sleep(cost);
        }
        Ok(())
    }
}

fn check_finite(state: &[f64]) -> Result<()> {
    match state.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::ModelFailure(format!(
            "non-finite value at state index {i}"
        ))),
        None => Ok(()),
    }
}

fn lorenz96_tendency(x: &[f64], forcing: f64, out: &mut [f64]) {
    let n = x.len();
    for j in 0..n {
        let ahead = x[(j + 1) % n];
        let back2 = x[(j + n - 2) % n];
        let back1 = x[(j + n - 1) % n];
        out[j] = (ahead - back2) * back1 - x[j] + forcing;
    }
}

fn lorenz96_rk4_step(x: &mut [f64], forcing: f64, dt: f64, scratch: &mut [Vec<f64>; 5]) {
    let n = x.len();
    let [k1, k2, k3, k4, tmp] = scratch;
    lorenz96_tendency(x, forcing, k1);
    for j in 0..n {
        tmp[j] = x[j] + 0.5 * dt * k1[j];
    }
    lorenz96_tendency(tmp, forcing, k2);
    for j in 0..n {
        tmp[j] = x[j] + 0.5 * dt * k2[j];
    }
    lorenz96_tendency(tmp, forcing, k3);
    for j in 0..n {
        tmp[j] = x[j] + dt * k3[j];
    }
    lorenz96_tendency(tmp, forcing, k4);
    for j in 0..n {
        x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
}

/// `nsteps` of classical RK4 on `dx_j/dt = (x_{j+1} − x_{j−2}) x_{j−1} − x_j + F`
/// with cyclic indices.
pub fn lorenz96_propagate(state: &[f64], nsteps: u32, forcing: f64, dt: f64) -> Result<Vec<f64>> {
    if state.len() < 4 {
        return Err(Error::config("Lorenz-96 needs at least 4 variables"));
    }
    let mut x = state.to_vec();
    let mut scratch: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; x.len()]);
    for _ in 0..nsteps {
        lorenz96_rk4_step(&mut x, forcing, dt, &mut scratch);
    }
    check_finite(&x)?;
    Ok(x)
}

/// Lorenz-96 on the assimilated prefix; any remaining dynamic entries are
/// non-assimilated diagnostics, entry `i` accumulating the time integral of
/// variable `i mod N` (trapezoidal rule).
#[derive(Debug, Clone)]
pub struct Lorenz96 {
    n_dynamic: usize,
    n_vars: usize,
    forcing: f64,
    dt: f64,
}

impl Lorenz96 {
    pub fn new(n_dynamic: usize, n_vars: usize, forcing: f64, dt: f64) -> Result<Self> {
        make_layout(n_dynamic, n_vars)?;
        if n_vars < 4 {
            return Err(Error::config("Lorenz-96 needs at least 4 variables"));
        }
        if !(dt > 0.0) || !dt.is_finite() || !forcing.is_finite() {
            return Err(Error::config("Lorenz-96 needs a finite forcing and dt > 0"));
        }
        Ok(Self {
            n_dynamic,
            n_vars,
            forcing,
            dt,
        })
    }
}

impl Model for Lorenz96 {
    fn n_dynamic(&self) -> usize {
        self.n_dynamic
    }

    fn n_assimilated(&self) -> usize {
        self.n_vars
    }

    fn base_state(&self) -> Vec<f64> {
        let mut x = vec![self.forcing; self.n_vars];
        x[0] += 0.01;
        let mut state = x;
        state.resize(self.n_dynamic, 0.0);
        self.advance(&mut state, LORENZ_SPINUP_STEPS)
            .expect("spin-up from the perturbed equilibrium stays finite");
        state[self.n_vars..].iter_mut().for_each(|v| *v = 0.0);
        state
    }

    fn advance(&self, state: &mut [f64], nsteps: u32) -> Result<()> {
        if state.len() != self.n_dynamic {
            return Err(Error::config(format!(
                "state has {} entries, model expects {}",
                state.len(),
                self.n_dynamic
            )));
        }
        let (vars, tail) = state.split_at_mut(self.n_vars);
        let mut scratch: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; self.n_vars]);
        let mut prev = vars.to_vec();
        for _ in 0..nsteps {
            lorenz96_rk4_step(vars, self.forcing, self.dt, &mut scratch);
            for (i, acc) in tail.iter_mut().enumerate() {
                let j = i % self.n_vars;
                *acc += 0.5 * self.dt * (prev[j] + vars[j]);
            }
            prev.copy_from_slice(vars);
        }
        check_finite(state)
    }
}

fn smoothing_step(x: &mut [f64]) {
    let n = x.len();
    if n < 2 {
        return;
    }
    let first = x[0];
    for j in 0..n {
        let next = if j + 1 < n { x[j + 1] } else { first };
        x[j] += 0.01 * (next - x[j]);
    }
}

fn state_fingerprint(state: &[f64]) -> u64 {
    let mut h = Sha256::new();
    for v in state {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Duration `base + spread·u`, `u ~ Beta(2, 3)`, keyed on the state contents.
pub fn varcost_duration(state: &[f64], base_ms: f64, spread_ms: f64) -> Duration {
    let mut rng = keyed_stream(StreamDomain::PropagationCost, state_fingerprint(state), 0, 0);
    let beta = Beta::new(VARCOST_BETA.0, VARCOST_BETA.1).expect("valid Beta parameters");
    let u: f64 = rng.sample(beta);
    Duration::from_secs_f64((base_ms + spread_ms * u).max(0.0) / 1e3)
}

/// `count` independent draws from the varcost duration law, in milliseconds.
pub fn sample_varcost_durations(count: usize, base_ms: f64, spread_ms: f64, seed: u64) -> Vec<f64> {
    let beta = Beta::new(VARCOST_BETA.0, VARCOST_BETA.1).expect("valid Beta parameters");
    (0..count as u64)
        .map(|i| {
            let mut rng = keyed_stream(StreamDomain::PropagationCost, seed, 1, i);
            (base_ms + spread_ms * rng.sample(beta)).max(0.0)
        })
        .collect()
}

/// Applies `nsteps` of the smoothing map, then sleeps for the state's cost.
pub fn varcost_propagate(state: &[f64], nsteps: u32, base_ms: f64, spread_ms: f64) -> Result<Vec<f64>> {
    let cost = varcost_duration(state, base_ms, spread_ms);
    let mut x = state.to_vec();
    for _ in 0..nsteps {
        smoothing_step(&mut x);
    }
    check_finite(&x)?;
    thread::sleep(cost);
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct VarCost {
    n_dynamic: usize,
    n_assimilated: usize,
    base_ms: f64,
    spread_ms: f64,
}

impl VarCost {
    pub fn new(n_dynamic: usize, n_assimilated: usize, base_ms: f64, spread_ms: f64) -> Result<Self> {
        make_layout(n_dynamic, n_assimilated)?;
        if !(base_ms >= 0.0) || !(spread_ms >= 0.0) {
            return Err(Error::config("varcost base_ms and spread_ms must be >= 0"));
        }
        Ok(Self {
            n_dynamic,
            n_assimilated,
            base_ms,
            spread_ms,
        })
    }
}

impl Model for VarCost {
    fn n_dynamic(&self) -> usize {
        self.n_dynamic
    }

    fn n_assimilated(&self) -> usize {
        self.n_assimilated
    }

    fn base_state(&self) -> Vec<f64> {
        (0..self.n_dynamic).map(|j| 1.0 + (0.3 * j as f64).sin()).collect()
    }

    fn advance(&self, state: &mut [f64], nsteps: u32) -> Result<()> {
        for _ in 0..nsteps {
            smoothing_step(state);
        }
        check_finite(state)
    }

    fn propagation_cost(&self, state: &[f64]) -> Duration {
        varcost_duration(state, self.base_ms, self.spread_ms)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Lorenz96 { forcing: f64, dt: f64 },
    VarCost { base_ms: f64, spread_ms: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n_dynamic: usize,
    pub n_assimilated: usize,
}

impl ModelSpec {
    pub fn layout(&self) -> Result<StateLayout> {
        make_layout(self.n_dynamic, self.n_assimilated)
    }

    pub fn build(&self) -> Result<Box<dyn Model>> {
        Ok(match self.kind {
            ModelKind::Lorenz96 { forcing, dt } => {
                Box::new(Lorenz96::new(self.n_dynamic, self.n_assimilated, forcing, dt)?)
            }
            ModelKind::VarCost { base_ms, spread_ms } => Box::new(VarCost::new(
                self.n_dynamic,
                self.n_assimilated,
                base_ms,
                spread_ms,
            )?),
        })
    }
}

/// Member `i` is the base state plus `Uniform(−a, a)` noise per component,
/// drawn from the stream keyed on `(seed, 0, i)`.
pub fn init_ensemble(model: &dyn Model, members: usize, noise_amplitude: f64, seed: u64) -> Result<Vec<DynamicState>> {
    if members < 2 {
        return Err(Error::DegenerateEnsemble { members });
    }
    let base = model.base_state();
    Ok((0..members as u32)
        .map(|id| DynamicState {
            member_id: id,
            values: perturbed(&base, noise_amplitude, StreamDomain::EnsembleInit, seed, 0, id as u64),
        })
        .collect())
}

pub(crate) fn perturbed(base: &[f64], amplitude: f64, domain: StreamDomain, seed: u64, cycle: u64, member: u64) -> Vec<f64> {
    let mut rng = keyed_stream(domain, seed, cycle, member);
    base.iter()
        .map(|b| {
            let u: f64 = rng.random();
            b + amplitude * (2.0 * u - 1.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::time::Instant;

    use super::*;

    #[test]
    fn lorenz_equilibrium_is_fixed_point() {
        let x = vec![8.0; 40];
        let y = lorenz96_propagate(&x, 50, 8.0, 0.05).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn lorenz_zero_steps_is_identity() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.37).collect();
        assert_eq!(lorenz96_propagate(&x, 0, 8.0, 0.05).unwrap(), x);
    }

    #[test]
    fn lorenz_is_deterministic() {
        let m = Lorenz96::new(40, 40, 8.0, 0.05).unwrap();
        let base = m.base_state();
        let mut a = base.clone();
        let mut b = base.clone();
        m.advance(&mut a, 200).unwrap();
        m.advance(&mut b, 200).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite() && v.abs() < 30.0));
    }

    #[test]
    fn lorenz_needs_four_variables() {
        assert!(lorenz96_propagate(&[1.0; 3], 1, 8.0, 0.05).is_err());
        assert!(Lorenz96::new(3, 3, 8.0, 0.05).is_err());
        assert!(Lorenz96::new(10, 10, 8.0, 0.0).is_err());
    }

    #[test]
    fn lorenz_nan_is_model_failure() {
        let m = Lorenz96::new(8, 8, 8.0, 0.05).unwrap();
        let mut s = m.base_state();
        s[0] = f64::NAN;
        assert!(matches!(m.advance(&mut s, 1), Err(Error::ModelFailure(_))));
    }

    #[test]
    fn lorenz_tail_integrates_without_feedback() {
        let with_tail = Lorenz96::new(12, 8, 8.0, 0.05).unwrap();
        let plain = Lorenz96::new(8, 8, 8.0, 0.05).unwrap();
        let mut s = with_tail.base_state();
        assert!(s[8..].iter().all(|&v| v == 0.0));
        let mut p = s[..8].to_vec();
        with_tail.advance(&mut s, 10).unwrap();
        plain.advance(&mut p, 10).unwrap();
        assert_eq!(&s[..8], &p[..]);
        assert!(s[8..].iter().all(|&v| v != 0.0));
    }

    #[test]
    fn varcost_constant_without_spread() {
        let s = vec![0.5; 16];
        let d = varcost_duration(&s, 20.0, 0.0);
        assert_eq!(d, Duration::from_millis(20));
        let started = Instant::now();
        varcost_propagate(&s, 1, 20.0, 0.0).unwrap();
        assert!(started.elapsed() >= Duration::from_millis(20));
    }

    #[test]
    fn varcost_duration_is_deterministic() {
        let s: Vec<f64> = (0..32).map(|i| i as f64).collect();
        assert_eq!(varcost_duration(&s, 150.0, 100.0), varcost_duration(&s, 150.0, 100.0));
        let mut t = s.clone();
        t[3] += 1e-9;
        assert_ne!(varcost_duration(&s, 150.0, 100.0), varcost_duration(&t, 150.0, 100.0));
    }

    #[test]
    fn varcost_empirical_mean_matches_fit() {
        let (base, spread) = (150.0, 100.0);
        let samples: Vec<f64> = (0..1000)
            .map(|i| {
                let state = perturbed(&[0.0; 8], 5.0, StreamDomain::EnsembleInit, 99, 0, i);
                varcost_duration(&state, base, spread).as_secs_f64() * 1e3
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let expected = base + spread * VARCOST_FIT_MEAN;
        assert!((mean - expected).abs() <= 0.1 * expected, "mean {mean} vs {expected}");
        assert!(samples.iter().all(|&d| (base..=base + spread).contains(&d)));
    }

    #[test]
    fn ensemble_without_noise_is_identical() {
        let m = Lorenz96::new(10, 10, 8.0, 0.05).unwrap();
        let e = init_ensemble(&m, 4, 0.0, 1).unwrap();
        assert!(e.iter().all(|s| s.values == e[0].values));
        assert_eq!(e.iter().map(|s| s.member_id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn ensemble_is_reproducible_and_bounded() {
        let m = VarCost::new(20, 10, 1.0, 1.0).unwrap();
        let a = init_ensemble(&m, 6, 0.5, 3).unwrap();
        let b = init_ensemble(&m, 6, 0.5, 3).unwrap();
        assert_eq!(a, b);
        let base = m.base_state();
        for s in &a {
            for (v, b) in s.values.iter().zip(&base) {
                assert!(*v >= b - 0.5 && *v <= b + 0.5);
            }
        }
        assert_ne!(a[0].values, a[1].values);
        assert!(init_ensemble(&m, 1, 0.5, 3).is_err());
    }
}
