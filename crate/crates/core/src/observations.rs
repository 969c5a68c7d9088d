//! Per-cycle observation sources.
//!
//! Cycle `c` assimilates observations of the truth after `c + 1` propagation
//! phases, matching the background the ensemble holds at that point.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{ObservationMode, StudyConfig};
use crate::da::ObservationSet;
use crate::error::{Error, Result};
use crate::models::{perturbed, Model};
use crate::rng::{keyed_stream, StreamDomain};

/// `count` indices spread evenly over `[0, n)`.
pub fn evenly_spaced_indices(n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|k| k * n / count).collect()
}

/// Synthetic truth run of the study model, observed with Gaussian noise.
pub struct TwinExperiment {
    model: Box<dyn Model>,
    nsteps: u32,
    indices: Vec<usize>,
    variance: f64,
    seed: u64,
    initial: Vec<f64>,
    truth: Vec<f64>,
    phases_applied: u32,
}

impl TwinExperiment {
    pub fn new(model: Box<dyn Model>, cfg: &StudyConfig) -> Self {
        let initial = perturbed(
            &model.base_state(),
            cfg.noise_amplitude,
            StreamDomain::TwinTruth,
            cfg.seed,
            0,
            0,
        );
        Self {
            indices: evenly_spaced_indices(cfg.n_assimilated(), cfg.obs_count()),
            nsteps: cfg.nsteps,
            variance: cfg.obs_variance,
            seed: cfg.seed,
            truth: initial.clone(),
            initial,
            phases_applied: 0,
            model,
        }
    }

    /// True state the observations of `cycle` are taken from.
    pub fn truth_for_cycle(&mut self, cycle: u32) -> Result<&[f64]> {
        let target = cycle + 1;
        if self.phases_applied > target {
            self.truth.clone_from(&self.initial);
            self.phases_applied = 0;
        }
        while self.phases_applied < target {
            self.model.advance(&mut self.truth, self.nsteps)?;
            self.phases_applied += 1;
        }
        Ok(&self.truth)
    }

    pub fn observations(&mut self, cycle: u32) -> Result<ObservationSet> {
        let variance = self.variance;
        let indices = self.indices.clone();
        let seed = self.seed;
        let truth = self.truth_for_cycle(cycle)?;
        let mut rng = keyed_stream(StreamDomain::TwinNoise, seed, cycle as u64, 0);
        let values = indices
            .iter()
            .map(|&i| {
                let z: f64 = rng.sample(StandardNormal);
                truth[i] + variance.sqrt() * z
            })
            .collect();
        ObservationSet::new(values, indices.clone(), vec![variance; indices.len()])
    }
}

/// Parses `cycle index value variance` lines; `#` starts a comment.
pub fn parse_observation_file(text: &str) -> Result<BTreeMap<u32, ObservationSet>> {
    let mut raw: BTreeMap<u32, (Vec<f64>, Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::config(format!("observation file line {}: expected `cycle index value variance`", lineno + 1));
        if fields.len() != 4 {
            return Err(bad());
        }
        let cycle: u32 = fields[0].parse().map_err(|_| bad())?;
        let index: usize = fields[1].parse().map_err(|_| bad())?;
        let value: f64 = fields[2].parse().map_err(|_| bad())?;
        let variance: f64 = fields[3].parse().map_err(|_| bad())?;
        let entry = raw.entry(cycle).or_default();
        entry.0.push(value);
        entry.1.push(index);
        entry.2.push(variance);
    }
    raw.into_iter()
        .map(|(c, (y, idx, r))| Ok((c, ObservationSet::new(y, idx, r)?)))
        .collect()
}

pub enum ObservationSource {
    None,
    Twin(Box<TwinExperiment>),
    File(BTreeMap<u32, ObservationSet>),
}

impl ObservationSource {
    pub fn from_config(cfg: &StudyConfig) -> Result<Self> {
        Ok(match cfg.observations {
            ObservationMode::None => ObservationSource::None,
            ObservationMode::Twin if cfg.obs_count() == 0 => ObservationSource::None,
            ObservationMode::Twin => {
                ObservationSource::Twin(Box::new(TwinExperiment::new(cfg.model_spec().build()?, cfg)))
            }
            ObservationMode::File => {
                let path = cfg.observation_file.as_deref().unwrap_or(Path::new(""));
                let text = fs::read_to_string(path).map_err(|e| {
                    Error::config(format!("cannot read observation file {}: {e}", path.display()))
                })?;
                let sets = parse_observation_file(&text)?;
                let n = cfg.n_assimilated();
                if let Some(bad) = sets.values().flat_map(|s| s.indices()).find(|&&i| i >= n) {
                    return Err(Error::config(format!(
                        "observation index {bad} outside the assimilated state (size {n})"
                    )));
                }
                ObservationSource::File(sets)
            }
        })
    }

    /// Observations for `cycle`; cycles missing from a file are unobserved.
    pub fn for_cycle(&mut self, cycle: u32) -> Result<ObservationSet> {
        match self {
            ObservationSource::None => Ok(ObservationSet::empty()),
            ObservationSource::Twin(t) => t.observations(cycle),
            ObservationSource::File(sets) => Ok(sets.get(&cycle).cloned().unwrap_or_default()),
        }
    }
}
