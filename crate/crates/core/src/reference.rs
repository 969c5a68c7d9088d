//! The whole study in one loop, without server, runners or sockets. Tests use
//! it as the oracle the distributed run must reproduce bit for bit.

use std::collections::BTreeSet;

use crate::checkpoint::{ArtifactKind, ServerCheckpoint};
use crate::config::StudyConfig;
use crate::da::{enkf_update, EnsembleMatrix, Perturbation};
use crate::error::Result;
use crate::models::init_ensemble;
use crate::observations::ObservationSource;

pub fn run_reference(cfg: &StudyConfig) -> Result<ServerCheckpoint> {
    run_reference_excluding(cfg, &BTreeSet::new())
}

/// Like `run_reference`, with `excluded` members removed before the first
/// update; this is what the drop policy converges to for members that can
/// never be propagated.
pub fn run_reference_excluding(cfg: &StudyConfig, excluded: &BTreeSet<u32>) -> Result<ServerCheckpoint> {
    cfg.validate()?;
    let model = cfg.model_spec().build()?;
    let mut states = init_ensemble(model.as_ref(), cfg.members, cfg.noise_amplitude, cfg.seed)?;
    states.retain(|s| !excluded.contains(&s.member_id));
    let mut observations = ObservationSource::from_config(cfg)?;
    let n_assim = cfg.n_assimilated();
    let perturbation = if cfg.perturb_observations {
        Perturbation::Stochastic
    } else {
        Perturbation::Disabled
    };

    for cycle in 0..cfg.cycles {
        for s in &mut states {
            model.advance(&mut s.values, cfg.nsteps)?;
        }
        let obs = observations.for_cycle(cycle)?;
        let ensemble = EnsembleMatrix::with_member_ids(
            states.iter().map(|s| s.member_id).collect(),
            states.iter().map(|s| s.values[..n_assim].to_vec()).collect(),
        )?;
        let updated = enkf_update(&ensemble, &obs, cycle, cfg.seed, perturbation)?;
        for (s, (_, prefix)) in states.iter_mut().zip(updated.into_columns()) {
            s.values[..n_assim].copy_from_slice(&prefix);
        }
    }

    Ok(ServerCheckpoint {
        kind: ArtifactKind::FinalEnsemble,
        cycle: cfg.cycles,
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        n_dynamic: cfg.n_dynamic,
        n_assimilated: n_assim,
        members: states,
    })
}
