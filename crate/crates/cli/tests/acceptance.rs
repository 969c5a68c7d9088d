//! Acceptance gate. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and fails if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=2,7` restricts the run to the listed criteria.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use ensda::config::{MemberFailurePolicy, ModelName, RunnerKill, StudyConfig};
use ensda::da::{enkf_update, EnsembleMatrix, ObservationSet, Perturbation};
use ensda::metrics::{read_metrics, MetricRecord};
use ensda::models::init_ensemble;
use ensda::observations::{ObservationSource, TwinExperiment};
use ensda::reference::{run_reference, run_reference_excluding};
use ensda::report::fit_quadratic;
use ensda::scheduler::simulate_schedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};

type Outcome = Result<String, String>;

struct Study {
    code: Option<i32>,
    stderr: String,
    metrics: Vec<MetricRecord>,
    hash: Option<String>,
    elapsed: Duration,
}

fn base_config(work: &Path) -> StudyConfig {
    StudyConfig {
        work_dir: work.to_path_buf(),
        runner_timeout_ms: 2_000,
        server_timeout_ms: 2_000,
        connect_timeout_ms: 5_000,
        ..StudyConfig::default()
    }
}

/// Runs `studyctl run` on `cfg` and collects what it left behind.
fn run_study(cfg: &StudyConfig, limit: Duration) -> Study {
    fs::create_dir_all(&cfg.work_dir).unwrap();
    let input = cfg.work_dir.join("input.toml");
    fs::write(&input, cfg.to_toml()).unwrap();
    let t0 = Instant::now();
    let mut child = Command::new(env!("CARGO_BIN_EXE_studyctl"))
        .arg("run")
        .arg(&input)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .env("RUST_LOG", "warn")
        .spawn()
        .unwrap();
    let code = loop {
        if let Some(status) = child.try_wait().unwrap() {
            break status.code();
        }
        if t0.elapsed() > limit {
            let _ = child.kill();
            let _ = child.wait();
            break None;
        }
        std::thread::sleep(Duration::from_millis(20));
    };
    let elapsed = t0.elapsed();
    let out = child.wait_with_output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let hash = stdout
        .lines()
        .find_map(|l| l.strip_prefix("ensemble hash "))
        .map(str::to_string);
    Study {
        code,
        stderr: String::from_utf8_lossy(&out.stderr).to_string(),
        metrics: read_metrics(&cfg.metrics_path()).unwrap_or_default(),
        hash,
        elapsed,
    }
}

/// Processes still running with `dir` on their command line.
fn leftover_processes(dir: &Path) -> Vec<String> {
    let needle = dir.to_string_lossy().to_string();
    let mut found = Vec::new();
    for entry in fs::read_dir("/proc").into_iter().flatten().flatten() {
        if let Ok(cmd) = fs::read(entry.path().join("cmdline")) {
            let cmd = String::from_utf8_lossy(&cmd).replace('\0', " ");
            if cmd.contains(&needle) && cmd.contains("studyctl") {
                found.push(cmd);
            }
        }
    }
    found
}

fn check_clean(study: &Study, work: &Path, what: &str) -> Result<(), String> {
    if study.code != Some(0) {
        return Err(format!("{what}: exit {:?}, stderr: {}", study.code, study.stderr.trim()));
    }
    let left = leftover_processes(work);
    if !left.is_empty() {
        return Err(format!("{what}: orphan processes {left:?}"));
    }
    Ok(())
}

fn ensemble_mean(cols: &[Vec<f64>]) -> Vec<f64> {
    let n = cols[0].len();
    (0..n).map(|i| cols.iter().map(|c| c[i]).sum::<f64>() / cols.len() as f64).collect()
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn criterion_1() -> Outcome {
    let (mu0, var0, r, y): (f64, f64, f64, f64) = (1.0, 2.0, 0.5, 3.0);
    let m = 10_000;
    let post_mean = mu0 + var0 / (var0 + r) * (y - mu0);
    let post_var = var0 * r / (var0 + r);

    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let prior = Normal::new(mu0, var0.sqrt()).unwrap();
    let cols: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.sample(prior)]).collect();
    let ens = EnsembleMatrix::new(cols).map_err(|e| e.to_string())?;
    let obs = ObservationSet::new(vec![y], vec![0], vec![r]).map_err(|e| e.to_string())?;
    let out = enkf_update(&ens, &obs, 0, 7, Perturbation::Stochastic).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();

    let xs: Vec<f64> = (0..m).map(|j| out.column(j)[0]).collect();
    let mean = xs.iter().sum::<f64>() / m as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    let se_mean = (post_var / m as f64).sqrt();
    let se_var = post_var * (2.0 / (m as f64 - 1.0)).sqrt();
    let z_mean = (mean - post_mean) / se_mean;
    let z_var = (var - post_var) / se_var;
    let detail = format!(
        "mean {mean:.4} vs {post_mean:.4} ({z_mean:+.2} SE), variance {var:.4} vs {post_var:.4} ({z_var:+.2} SE), {:.2} s",
        elapsed.as_secs_f64()
    );
    if z_mean.abs() <= 3.0 && z_var.abs() <= 3.0 && elapsed < Duration::from_secs(5) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Time-averaged RMSE of the analysis and free-run means against the truth,
/// plus the final analysis mean.
fn twin_rmse(cfg: &StudyConfig) -> Result<(f64, f64, Vec<f64>), String> {
    let model = cfg.model_spec().build().map_err(|e| e.to_string())?;
    let init = init_ensemble(model.as_ref(), cfg.members, cfg.noise_amplitude, cfg.seed).map_err(|e| e.to_string())?;
    let mut analysis: Vec<Vec<f64>> = init.iter().map(|s| s.values.clone()).collect();
    let mut free = analysis.clone();
    let ids: Vec<u32> = init.iter().map(|s| s.member_id).collect();
    let mut truth = TwinExperiment::new(cfg.model_spec().build().unwrap(), cfg);
    let mut obs_source = ObservationSource::from_config(cfg).map_err(|e| e.to_string())?;
    let (mut sum_a, mut sum_f) = (0.0, 0.0);
    for cycle in 0..cfg.cycles {
        for x in analysis.iter_mut().chain(free.iter_mut()) {
            model.advance(x, cfg.nsteps).map_err(|e| e.to_string())?;
        }
        let obs = obs_source.for_cycle(cycle).map_err(|e| e.to_string())?;
        let ens = EnsembleMatrix::with_member_ids(ids.clone(), analysis.clone()).map_err(|e| e.to_string())?;
        analysis = enkf_update(&ens, &obs, cycle, cfg.seed, Perturbation::Stochastic)
            .map_err(|e| e.to_string())?
            .into_columns()
            .into_iter()
            .map(|(_, c)| c)
            .collect();
        let t = truth.truth_for_cycle(cycle).map_err(|e| e.to_string())?.to_vec();
        sum_a += rmse(&ensemble_mean(&analysis), &t);
        sum_f += rmse(&ensemble_mean(&free), &t);
    }
    let n = cfg.cycles as f64;
    Ok((sum_a / n, sum_f / n, ensemble_mean(&analysis)))
}

fn criterion_2(root: &Path) -> Outcome {
    let work = root.join("c2");
    let cfg = StudyConfig {
        model: ModelName::Lorenz96,
        n_dynamic: 40,
        forcing: 8.0,
        members: 32,
        cycles: 50,
        nsteps: 1,
        obs_count: Some(20),
        obs_variance: 0.5,
        noise_amplitude: 0.5,
        runners: 4,
        ..base_config(&work)
    };
    let study = run_study(&cfg, Duration::from_secs(120));
    check_clean(&study, &work, "study")?;
    let reference = run_reference(&cfg).map_err(|e| e.to_string())?;
    if study.hash.as_deref() != Some(reference.ensemble_hash().as_str()) {
        return Err("final ensemble differs from the sequential oracle".into());
    }
    let (_, _, final_analysis) = twin_rmse(&cfg)?;
    let final_mean = ensemble_mean(&reference.members.iter().map(|s| s.values.clone()).collect::<Vec<_>>());
    if rmse(&final_mean, &final_analysis) > 1e-12 {
        return Err("RMSE trajectory does not end at the study's final ensemble".into());
    }

    // the same twin experiment must hold for every seed, not just the launched one
    let mut worst = (0.0f64, 0.0, 0.0, 0u64);
    for seed in 1..=8 {
        let (a, f, _) = twin_rmse(&StudyConfig { seed, ..cfg.clone() })?;
        if a / f > worst.0 {
            worst = (a / f, a, f, seed);
        }
    }
    let (ratio, a, f, seed) = worst;
    let secs = study.elapsed.as_secs_f64();
    let detail = format!("worst of 8 seeds (seed {seed}): analysis RMSE {a:.3}, free-run RMSE {f:.3}, ratio {ratio:.3}; study {secs:.1} s");
    if ratio < 0.5 && secs < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_3() -> Outcome {
    let n = 10_000;
    let k = 288;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let indices: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    let obs = ObservationSet::new(
        (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        indices,
        vec![1.0; k],
    )
    .map_err(|e| e.to_string())?;
    let mut points = Vec::new();
    let mut detail = Vec::new();
    for m in [8usize, 16, 32, 64, 128] {
        let cols: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let ens = EnsembleMatrix::new(cols).map_err(|e| e.to_string())?;
        let mut best = f64::INFINITY;
        for rep in 0..5 {
            let t0 = Instant::now();
            let out = enkf_update(&ens, &obs, rep, 1, Perturbation::Stochastic).map_err(|e| e.to_string())?;
            best = best.min(t0.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);
        }
        points.push((m as f64, best));
        detail.push(format!("M={m}: {best:.1} ms"));
    }
    let fit = fit_quadratic(&points).map_err(|e| e.to_string())?;
    let detail = format!("{}; a={:.2} b={:.5} R²={:.4}", detail.join(", "), fit.a, fit.b, fit.r2);
    if fit.r2 >= 0.9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn brute_force_optimum(durations: &[f64], runners: usize) -> f64 {
    let mut best = f64::INFINITY;
    let mut loads = vec![0.0; runners];
    for code in 0..runners.pow(durations.len() as u32) {
        loads.iter_mut().for_each(|l| *l = 0.0);
        let mut c = code;
        for d in durations {
            loads[c % runners] += d;
            c /= runners;
        }
        best = best.min(loads.iter().cloned().fold(0.0, f64::max));
    }
    best
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let members = rng.random_range(1..=10);
        let runners = rng.random_range(1..=3);
        let durations: Vec<f64> = (0..members).map(|_| rng.random_range(0.0..100.0)).collect();
        let sim = simulate_schedule(&durations, runners);
        let opt = brute_force_optimum(&durations, runners);
        let bound = (2.0 - 1.0 / runners as f64) * opt;
        if sim.makespan > bound + 1e-9 {
            return Err(format!("instance {i}: makespan {} exceeds bound {bound}", sim.makespan));
        }
        if opt > 0.0 {
            worst = worst.max(sim.makespan / opt);
        }
    }
    Ok(format!("200 instances within (2 - 1/R)·OPT, worst ratio {worst:.3}"))
}

/// Summed propagation walltime of cycles ≥ 1, and the runner count seen there.
fn propagation_after_startup(metrics: &[MetricRecord]) -> (f64, BTreeSet<usize>) {
    let mut total = 0.0;
    let mut runners = BTreeSet::new();
    for r in metrics {
        if let MetricRecord::Propagation { cycle, wall_ms, runners: n, .. } = r {
            if *cycle >= 1 {
                total += wall_ms;
                runners.insert(*n);
            }
        }
    }
    (total, runners)
}

fn criterion_5(root: &Path) -> Outcome {
    let t0 = Instant::now();
    let config = |runners: usize| {
        let work = root.join(format!("c5-{runners}"));
        StudyConfig {
            model: ModelName::Varcost,
            n_dynamic: 64,
            base_ms: 150.0,
            spread_ms: 100.0,
            members: 128,
            cycles: 3,
            nsteps: 1,
            runners,
            runner_timeout_ms: 10_000,
            ..base_config(&work)
        }
    };
    let mut walls = BTreeMap::new();
    let mut hashes = BTreeSet::new();
    for runners in [1usize, 8, 16] {
        let cfg = config(runners);
        let study = run_study(&cfg, Duration::from_secs(300));
        check_clean(&study, &cfg.work_dir, &format!("{runners} runners"))?;
        let (wall, seen) = propagation_after_startup(&study.metrics);
        if seen != BTreeSet::from([runners]) {
            return Err(format!("{runners} runners configured, cycles ran with {seen:?}"));
        }
        walls.insert(runners, wall);
        hashes.insert(study.hash.unwrap_or_default());
    }
    if hashes.len() != 1 {
        return Err("runs with different fleets produced different ensembles".into());
    }
    let eff = |r: usize| walls[&1] / (r as f64 * walls[&r]);
    let (e8, e16) = (eff(16), eff(8));
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "8 members/runner {:.1}%, 16 members/runner {:.1}% (single runner {:.1} s per cycle), {secs:.0} s",
        e8 * 100.0,
        e16 * 100.0,
        walls[&1] / 2e3
    );
    if e8 >= 0.85 && e16 >= 0.93 && secs < 600.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn l96_small(work: &Path, members: usize, runners: usize) -> StudyConfig {
    StudyConfig {
        model: ModelName::Lorenz96,
        n_dynamic: 40,
        members,
        cycles: 5,
        nsteps: 2,
        runners,
        propagation_delay_ms: 40,
        kill_delay_ms: 10,
        ..base_config(work)
    }
}

fn criterion_6(root: &Path) -> Outcome {
    let oracle = run_reference(&l96_small(root, 16, 1)).map_err(|e| e.to_string())?.ensemble_hash();
    let mut lines = Vec::new();
    for runners in [1usize, 2, 4, 8] {
        for kill in [false, true] {
            let work = root.join(format!("c6-{runners}-{kill}"));
            let mut cfg = l96_small(&work, 16, runners);
            if kill {
                cfg.kill_runners = vec![RunnerKill { cycle: 3, count: 2 }];
            }
            let study = run_study(&cfg, Duration::from_secs(60));
            check_clean(&study, &work, &format!("{runners} runners, kill {kill}"))?;
            if study.hash.as_deref() != Some(oracle.as_str()) {
                return Err(format!("{runners} runners, kill {kill}: hash {:?} differs from oracle", study.hash));
            }
            let killed = study
                .metrics
                .iter()
                .filter(|r| matches!(r, MetricRecord::Launcher { event, .. } if event == "kill_runner"))
                .count();
            if kill && killed == 0 {
                return Err(format!("{runners} runners: no runner was killed"));
            }
            lines.push(format!("{runners}{}", if kill { "k" } else { "" }));
        }
    }
    Ok(format!("8 configurations [{}] all hash {}", lines.join(" "), &oracle[..16]))
}

fn criterion_7(root: &Path) -> Outcome {
    let work = root.join("c7");
    let mut cfg = l96_small(&work, 27, 9);
    cfg.cycles = 6;
    cfg.kill_runners = vec![RunnerKill { cycle: 3, count: 4 }];
    let study = run_study(&cfg, Duration::from_secs(60));
    check_clean(&study, &work, "study")?;
    let oracle = run_reference(&cfg).map_err(|e| e.to_string())?.ensemble_hash();
    if study.hash.as_deref() != Some(oracle.as_str()) {
        return Err("final ensemble differs from the sequential oracle".into());
    }
    let kills: Vec<(u32, u64)> = study
        .metrics
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Launcher { event, runner: Some(id), t_ms, .. } if event == "kill_runner" => Some((*id, *t_ms)),
            _ => None,
        })
        .collect();
    if kills.len() != 4 {
        return Err(format!("{} runners killed, expected 4", kills.len()));
    }
    let kill_t = kills.iter().map(|k| k.1).min().unwrap();
    let mut joins: Vec<u64> = study
        .metrics
        .iter()
        .filter_map(|r| match r {
            MetricRecord::RunnerJoined { runner, t_ms } if *runner > 9 => Some(*t_ms),
            _ => None,
        })
        .collect();
    joins.sort();
    if joins.len() < 4 {
        return Err(format!("only {} replacement runners joined", joins.len()));
    }
    let worst = joins[3].saturating_sub(kill_t);
    let next_cycle = study.metrics.iter().find_map(|r| match r {
        MetricRecord::Propagation { cycle: 4, runners, busy_ms, .. } => Some((*runners, busy_ms.keys().cloned().collect::<Vec<_>>())),
        _ => None,
    });
    let Some((active, ids)) = next_cycle else {
        return Err("no propagation record for cycle 4".into());
    };
    let detail = format!(
        "cycle 4 propagated by {active} runners {ids:?}, replacements joined {worst} ms after the kill (limit {} ms)",
        2 * cfg.runner_timeout_ms
    );
    if active == 9 && worst <= 2 * cfg.runner_timeout_ms {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8(root: &Path) -> Outcome {
    let clean_work = root.join("c8-clean");
    let clean = run_study(&l96_small(&clean_work, 16, 4), Duration::from_secs(60));
    check_clean(&clean, &clean_work, "uninterrupted run")?;
    let work = root.join("c8-kill");
    let mut cfg = l96_small(&work, 16, 4);
    cfg.kill_server_after_cycle = Some(2);
    let study = run_study(&cfg, Duration::from_secs(60));
    check_clean(&study, &work, "killed run")?;
    let restored = study.metrics.iter().find_map(|r| match r {
        MetricRecord::Restore { cycle, .. } => Some(*cycle),
        _ => None,
    });
    if restored != Some(3) {
        return Err(format!("expected a restore at cycle 3, got {restored:?}"));
    }
    if study.hash.is_none() || study.hash != clean.hash {
        return Err(format!("final hash {:?} differs from uninterrupted {:?}", study.hash, clean.hash));
    }
    Ok(format!("server killed after cycle 2, restored at cycle 3, final hash {}", &clean.hash.unwrap()[..16]))
}

fn criterion_9(root: &Path) -> Outcome {
    let poisoned = |work: &Path, policy, max_restarts| StudyConfig {
        members: 8,
        cycles: 3,
        runners: 2,
        poison_member: Some(3),
        max_member_restarts: 2,
        member_failure_policy: policy,
        max_restarts,
        ..l96_small(work, 8, 2)
    };
    let mut detail = Vec::new();

    let work = root.join("c9-drop");
    let cfg = poisoned(&work, MemberFailurePolicy::Drop, 10);
    let study = run_study(&cfg, Duration::from_secs(60));
    check_clean(&study, &work, "drop policy")?;
    let dropped = study.metrics.iter().find_map(|r| match r {
        MetricRecord::MemberDropped { member: 3, restarts, .. } => Some(*restarts),
        _ => None,
    });
    if dropped != Some(3) {
        return Err(format!("drop policy: expected member 3 dropped after 3 failures, got {dropped:?}"));
    }
    let oracle = run_reference_excluding(&StudyConfig { poison_member: None, ..cfg.clone() }, &BTreeSet::from([3]))
        .map_err(|e| e.to_string())?;
    if study.hash.as_deref() != Some(oracle.ensemble_hash().as_str()) {
        return Err("drop policy: result differs from the 7-member oracle".into());
    }
    detail.push("drop: 7-member result matches oracle".to_string());

    let work = root.join("c9-replace");
    let cfg = poisoned(&work, MemberFailurePolicy::ReplaceWithPerturbed, 10);
    let study = run_study(&cfg, Duration::from_secs(60));
    check_clean(&study, &work, "replace policy")?;
    let replaced = study
        .metrics
        .iter()
        .any(|r| matches!(r, MetricRecord::MemberReplaced { member: 3, restarts: 3, .. }));
    let done = study.metrics.iter().find_map(|r| match r {
        MetricRecord::StudyDone { cycles, members, .. } => Some((*cycles, *members)),
        _ => None,
    });
    if !replaced || done != Some((3, 8)) {
        return Err(format!("replace policy: replaced {replaced}, completion {done:?}"));
    }
    detail.push("replace: 8 members after 3 cycles".to_string());

    let work = root.join("c9-budget");
    let cfg = poisoned(&work, MemberFailurePolicy::Drop, 1);
    let study = run_study(&cfg, Duration::from_secs(60));
    let left = leftover_processes(&work);
    if study.code != Some(4) || !study.stderr.contains("restart budget exhausted") || !left.is_empty() {
        return Err(format!(
            "budget: exit {:?}, stderr {:?}, leftovers {left:?}",
            study.code,
            study.stderr.trim()
        ));
    }
    let message = study.stderr.lines().find(|l| l.contains("restart budget")).unwrap_or("").trim().to_string();
    detail.push(format!("budget: exit 4, \"{message}\""));
    Ok(detail.join("; "))
}

#[test]
fn acceptance() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let tmp = tempfile::tempdir().unwrap();
    let root: PathBuf = tmp.path().to_path_buf();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "scalar linear-Gaussian posterior, M=10000", Box::new(criterion_1)),
        (2, "Lorenz-96 twin, analysis RMSE < 0.5 x free run", Box::new(|| criterion_2(&root))),
        (3, "update walltime fits a + bM^2", Box::new(criterion_3)),
        (4, "list scheduling within Graham bound", Box::new(criterion_4)),
        (5, "varcost propagation efficiency", Box::new(|| criterion_5(&root))),
        (6, "bit-identical results across fleets and kills", Box::new(|| criterion_6(&root))),
        (7, "fleet recovers from 4 of 9 runners killed", Box::new(|| criterion_7(&root))),
        (8, "server crash recovery from checkpoint", Box::new(|| criterion_8(&root))),
        (9, "member failure policy and restart budget", Box::new(|| criterion_9(&root))),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(n)) {
            continue;
        }
        // written past the test harness capture so the verdicts always show
        let line = match check() {
            Ok(d) => format!("criterion {n} PASS: {name}: {d}"),
            Err(d) => {
                failed.push(*n);
                format!("criterion {n} FAIL: {name}: {d}")
            }
        };
        let _ = writeln!(std::io::stderr(), "{line}");
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
