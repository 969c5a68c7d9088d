//! Ensemble Kalman filter mathematics.
//!
//! The background covariance is never materialized. It is carried by the
//! anomaly factor `A` (N×M), with `P_b = A Aᵀ / (M−1)`, and the gain is applied
//! as `A · (HA)ᵀ · C⁻¹ · d / (M−1)` where `C = HA (HA)ᵀ / (M−1) + R` is the K×K
//! innovation covariance. The observation operator is index selection and `R`
//! is diagonal.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{keyed_stream, StreamDomain};

/// Relative tolerance on the asymmetry of the innovation covariance.
const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// The part of a member state that the update phase reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct AssimilatedState {
    values: Vec<f64>,
}

impl AssimilatedState {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("assimilated state must not be empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "assimilated state has a non-finite entry at index {i}"
            )));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn observe(&self, obs: &ObservationSet) -> Result<Vec<f64>> {
        apply_observation_operator(&self.values, obs)
    }
}

/// Observation values, the grid indices they were taken at, and their error
/// variances (the diagonal of `R`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationSet {
    values: Vec<f64>,
    indices: Vec<usize>,
    variances: Vec<f64>,
}

impl ObservationSet {
    /// Validates lengths and uniqueness of indices. Variances must be
    /// non-negative; zero is accepted so tests can switch perturbation noise
    /// off, but `build_kalman_gain` still needs a positive definite system.
    pub fn new(values: Vec<f64>, indices: Vec<usize>, variances: Vec<f64>) -> Result<Self> {
        if values.len() != indices.len() || values.len() != variances.len() {
            return Err(Error::config(format!(
                "observation set lengths differ: {} values, {} indices, {} variances",
                values.len(),
                indices.len(),
                variances.len()
            )));
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("observation indices must be unique"));
        }
        if variances.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::config("observation variances must be finite and >= 0"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("observation values must be finite"));
        }
        Ok(Self {
            values,
            indices,
            variances,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Same observations with a different error variance vector.
    pub fn with_variances(&self, variances: Vec<f64>) -> Result<Self> {
        Self::new(self.values.clone(), self.indices.clone(), variances)
    }
}

/// M member states of dimension N stored column-wise, each column labeled with
/// its member id.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMatrix {
    member_ids: Vec<u32>,
    states: DMatrix<f64>,
}

impl EnsembleMatrix {
    /// Columns labeled `0..M`.
    pub fn new(columns: Vec<Vec<f64>>) -> Result<Self> {
        let ids = (0..columns.len() as u32).collect();
        Self::with_member_ids(ids, columns)
    }

    pub fn with_member_ids(member_ids: Vec<u32>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if member_ids.len() != columns.len() {
            return Err(Error::config("one member id per column required"));
        }
        if columns.len() < 2 {
            return Err(Error::DegenerateEnsemble {
                members: columns.len(),
            });
        }
        let n = columns[0].len();
        if n == 0 {
            return Err(Error::config("ensemble states must not be empty"));
        }
        if let Some(bad) = columns.iter().position(|c| c.len() != n) {
            return Err(Error::config(format!(
                "member column {bad} has length {}, expected {n}",
                columns[bad].len()
            )));
        }
        for (id, col) in member_ids.iter().zip(&columns) {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "member {id} has a non-finite state entry"
                )));
            }
        }
        let m = columns.len();
        let states = DMatrix::from_iterator(n, m, columns.into_iter().flatten());
        Ok(Self { member_ids, states })
    }

    pub fn state_dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn members(&self) -> usize {
        self.states.ncols()
    }

    pub fn member_ids(&self) -> &[u32] {
        &self.member_ids
    }

    pub fn column(&self, i: usize) -> &[f64] {
        let n = self.state_dim();
        &self.states.as_slice()[i * n..(i + 1) * n]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn into_columns(self) -> Vec<(u32, Vec<f64>)> {
        let n = self.state_dim();
        let data = self.states.as_slice();
        self.member_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, data[i * n..(i + 1) * n].to_vec()))
            .collect()
    }
}

/// `H(x)`: selects the observed entries of `x`.
pub fn apply_observation_operator(x: &[f64], obs: &ObservationSet) -> Result<Vec<f64>> {
    obs.indices
        .iter()
        .map(|&i| {
            x.get(i).copied().ok_or_else(|| {
                Error::config(format!(
                    "observation index {i} out of range for state of length {}",
                    x.len()
                ))
            })
        })
        .collect()
}

/// Ensemble mean and the anomaly matrix `A` whose column i is `x_i − mean`.
pub fn ensemble_mean_and_anomalies(ensemble: &EnsembleMatrix) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = ensemble.members();
    if m < 2 {
        return Err(Error::DegenerateEnsemble { members: m });
    }
    let states = ensemble.matrix();
    let mean = states.column_mean();
    let mut anomalies = states.clone();
    for mut col in anomalies.column_iter_mut() {
        col -= &mean;
    }
    Ok((mean, anomalies))
}

/// Factored Kalman gain `K = P_b Hᵀ (H P_b Hᵀ + R)⁻¹`.
#[derive(Debug, Clone)]
pub struct KalmanGain {
    anomalies: DMatrix<f64>,
    projected: DMatrix<f64>,
    innovation_cov: Cholesky<f64, Dyn>,
    scale: f64,
}

impl KalmanGain {
    pub fn observations(&self) -> usize {
        self.projected.nrows()
    }

    /// State increment `K · innovation`.
    pub fn apply(&self, innovation: &[f64]) -> Result<DVector<f64>> {
        if innovation.len() != self.observations() {
            return Err(Error::config(format!(
                "innovation has length {}, gain expects {}",
                innovation.len(),
                self.observations()
            )));
        }
        let d = DMatrix::from_column_slice(innovation.len(), 1, innovation);
        Ok(self.apply_columns(&d).column(0).into_owned())
    }

    /// Applies the gain to every column of a K×M innovation matrix. After the
    /// K×K solve, either an M×M weight matrix is formed (M²(N+K) flops) or the
    /// dense N×K gain (2NMK), whichever is cheaper. The choice depends on the
    /// shapes only, so equal inputs always take the same path.
    pub fn apply_columns(&self, innovations: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self.innovation_cov.solve(innovations);
        let (n, m) = self.anomalies.shape();
        let k = self.observations();
        if m * (n + k) <= 2 * n * k {
            let weights = self.projected.tr_mul(&z) * self.scale;
            &self.anomalies * weights
        } else {
            let gain = (&self.anomalies * self.projected.transpose()) * self.scale;
            gain * z
        }
    }

    /// Dense N×K gain, only sensible for small problems (tests, diagnostics).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let k = self.observations();
        self.apply_columns(&DMatrix::identity(k, k))
    }
}

pub fn build_kalman_gain(anomalies: &DMatrix<f64>, obs: &ObservationSet) -> Result<KalmanGain> {
    let (n, m) = anomalies.shape();
    if m < 2 {
        return Err(Error::DegenerateEnsemble { members: m });
    }
    if obs.is_empty() {
        return Err(Error::config("Kalman gain needs at least one observation"));
    }
    if let Some(&bad) = obs.indices.iter().find(|&&i| i >= n) {
        return Err(Error::config(format!(
            "observation index {bad} out of range for state of length {n}"
        )));
    }
    let k = obs.len();
    let scale = 1.0 / (m as f64 - 1.0);
    let projected = DMatrix::from_fn(k, m, |row, col| anomalies[(obs.indices[row], col)]);

    let mut cov = (&projected * projected.transpose()) * scale;
    let magnitude = cov.amax().max(obs.variances.iter().cloned().fold(0.0, f64::max));
    for i in 0..k {
        for j in 0..i {
            let (a, b) = (cov[(i, j)], cov[(j, i)]);
            if (a - b).abs() > SYMMETRY_TOLERANCE * magnitude.max(f64::MIN_POSITIVE) {
                return Err(Error::Numerical(format!(
                    "innovation covariance not symmetric at ({i},{j}): {a} vs {b}"
                )));
            }
            let avg = 0.5 * (a + b);
            cov[(i, j)] = avg;
            cov[(j, i)] = avg;
        }
        cov[(i, i)] += obs.variances[i];
    }
    let innovation_cov = Cholesky::new(cov).ok_or_else(|| {
        Error::Numerical("innovation covariance is not positive definite".into())
    })?;

    Ok(KalmanGain {
        anomalies: anomalies.clone(),
        projected,
        innovation_cov,
        scale,
    })
}

/// `y + ε`, `ε ~ N(0, R)`, drawn from the stream keyed on `(seed, cycle, member)`.
pub fn perturb_observations(obs: &ObservationSet, member_id: u32, cycle: u32, seed: u64) -> Vec<f64> {
    let mut rng = keyed_stream(
        StreamDomain::ObservationPerturbation,
        seed,
        cycle as u64,
        member_id as u64,
    );
    obs.values
        .iter()
        .zip(&obs.variances)
        .map(|(y, r)| {
            let z: f64 = rng.sample(StandardNormal);
            y + r.sqrt() * z
        })
        .collect()
}

/// Whether each member sees its own perturbed copy of the observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Perturbation {
    #[default]
    Stochastic,
    /// Every member is updated against the unperturbed `y`.
    Disabled,
}

/// Analysis ensemble: `x_a^i = x_b^i + K (y_i − H x_b^i)`.
pub fn enkf_update(
    background: &EnsembleMatrix,
    obs: &ObservationSet,
    cycle: u32,
    seed: u64,
    perturbation: Perturbation,
) -> Result<EnsembleMatrix> {
    let (_, anomalies) = ensemble_mean_and_anomalies(background)?;
    if obs.is_empty() {
        return Ok(background.clone());
    }

    let k = obs.len();
    let m = background.members();
    let mut innovations = DMatrix::zeros(k, m);
    for (i, &member) in background.member_ids().iter().enumerate() {
        let target = match perturbation {
            Perturbation::Stochastic => perturb_observations(obs, member, cycle, seed),
            Perturbation::Disabled => obs.values.clone(),
        };
        let predicted = apply_observation_operator(background.column(i), obs)?;
        for row in 0..k {
            innovations[(row, i)] = target[row] - predicted[row];
        }
    }

    // K·0 = 0 for any K, including when C is singular (R = 0, no spread)
    if innovations.iter().all(|&d| d == 0.0) {
        return Ok(background.clone());
    }
    let gain = build_kalman_gain(&anomalies, obs)?;
    let increments = gain.apply_columns(&innovations);
    Ok(EnsembleMatrix {
        member_ids: background.member_ids.clone(),
        states: &background.states + increments,
    })
}
