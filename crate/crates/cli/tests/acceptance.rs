//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;

use mima_cli::commands::compare_fits;
use mima_core::config::RunConfig;
use mima_core::diagnostics::{convergence_report, ess, summarize_posterior, DEFAULT_QUANTILES};
use mima_core::evidence::parse_evidence_str;
use mima_core::prediction::{loo_crossval, run_pipeline, PipelineResult, PredictionMode};
use mima_core::sampler::derive_seed;
use mima_core::synthetic::{
    calibration_run, conjugate_posterior, generate, grid_posterior, run_replication, EffectMode, GridOptions,
    ScenarioSpec, WithinTau,
};
use mima_core::{run, EndpointMode, EvidenceSet, ModelSpec, PosteriorDraws, SamplerConfig, SharingStructure};

const HEADER: &str = "study_id,indication,lhr_pfs,se_pfs,pfs_report_date,lhr_os,se_os,os_report_date\n";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Worst convergence statistics over every fit in the suite.
#[derive(Debug)]
struct Guard {
    fits: usize,
    max_rhat: (f64, String),
    min_ess: (f64, String),
}

static GUARD: Mutex<Guard> = Mutex::new(Guard {
    fits: 0,
    max_rhat: (f64::NEG_INFINITY, String::new()),
    min_ess: (f64::INFINITY, String::new()),
});

fn record(label: &str, rhat: f64, ess: f64) {
    let mut g = GUARD.lock().unwrap();
    g.fits += 1;
    if rhat > g.max_rhat.0 {
        g.max_rhat = (rhat, label.to_string());
    }
    if ess < g.min_ess.0 {
        g.min_ess = (ess, label.to_string());
    }
}

/// Records the indication-level columns of a fit.
fn guard(label: &str, d: &PosteriorDraws) {
    let fam = d.family_columns();
    let conv = convergence_report(d, Some(&fam), false).unwrap();
    for e in &conv.entries {
        record(&format!("{label} {}", e.name), e.rhat, e.ess);
    }
}

fn median(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}

fn uni(sharing: SharingStructure, within: bool) -> ModelSpec {
    let mut s = ModelSpec::new(EndpointMode::UnivariatePfs, sharing);
    s.common_effect_within_indication = within;
    s
}

fn pfs_data(rows: &[(&str, &str, f64, f64)]) -> EvidenceSet {
    let mut s = HEADER.to_string();
    for (id, ind, y, se) in rows {
        s += &format!("{id},{ind},{y},{se},,,,\n");
    }
    parse_evidence_str(&s).unwrap()
}

/// `|mean - oracle| / MCSE`, with the MCSE from per-chain ESS.
fn mcse_distance(d: &PosteriorDraws, name: &str, oracle_mean: f64) -> f64 {
    let s = summarize_posterior(&d.column(name).unwrap(), &[]).unwrap();
    let n_eff: f64 = d.chains_of(name).unwrap().iter().map(|c| ess(c).unwrap()).sum();
    (s.mean - oracle_mean).abs() / (s.sd / n_eff.sqrt())
}

fn conjugate() -> Outcome {
    let t0 = Instant::now();
    let e = pfs_data(&[("S1", "A", -0.3, 0.1)]);
    let d = run(&uni(SharingStructure::CP, true), &e, &SamplerConfig::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    guard("conjugate", &d);
    let s = summarize_posterior(&d.column("effect[A]").unwrap(), &[]).unwrap();
    let (m, sd) = conjugate_posterior(-0.3, 0.1, 0.0, 10.0);
    let err = (s.mean - m).abs();
    let ratio = s.sd / sd;
    outcome(
        err < 0.003 && (ratio - 1.0).abs() < 0.05 && secs < 10.0,
        format!("mean error {err:.5}, sd ratio {ratio:.4}, {secs:.1} s"),
    )
}

fn quadrature() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_p: f64 = 0.0;

    let e = pfs_data(&[("S1", "A", -0.3, 0.1)]);
    let spec = uni(SharingStructure::IP, false);
    let grid = grid_posterior(&spec, &e, &GridOptions::default()).unwrap();
    let d = run(&spec, &e, &SamplerConfig::with_seed(21)).unwrap();
    guard("quadrature IP", &d);
    for name in ["d[A]", "tau[A]"] {
        worst = worst.max(mcse_distance(&d, name, grid.get(name).unwrap().mean));
    }

    let e = pfs_data(&[("S1", "A", -0.3, 0.1), ("S2", "B", -0.1, 0.12), ("S3", "B", 0.05, 0.15)]);
    for sharing in [SharingStructure::MCIP, SharingStructure::MRIP] {
        let spec = uni(sharing, true);
        let grid = grid_posterior(&spec, &e, &GridOptions::default()).unwrap();
        let d = run(&spec, &e, &SamplerConfig::with_seed(5)).unwrap();
        guard(&format!("quadrature {sharing}"), &d);
        for l in ["A", "B"] {
            let c = d.column(&format!("c[{l}]")).unwrap();
            let freq = c.iter().sum::<f64>() / c.len() as f64;
            worst_p = worst_p.max((freq - grid.p_c(&format!("c[{l}]")).unwrap()).abs());
            let name = format!("effect[{l}]");
            worst = worst.max(mcse_distance(&d, &name, grid.get(&name).unwrap().mean));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < 3.0 && worst_p < 0.02 && secs < 120.0,
        format!("worst mean distance {worst:.2} MCSE, worst P(c=1) error {worst_p:.4}, {secs:.1} s"),
    )
}

fn calibration() -> Outcome {
    let t0 = Instant::now();
    let s = ScenarioSpec {
        n_indications: 4,
        trials_per_indication: 3,
        effect_mode: EffectMode::Exchangeable { m: -0.3, tau: 0.3 },
        within_tau: WithinTau::HalfNormal(0.5),
        seed: 301,
        ..Default::default()
    };
    let rep = calibration_run(
        &s,
        &uni(SharingStructure::IP, false),
        200,
        &SamplerConfig::with_seed(302),
    )
    .unwrap();
    for r in &rep.replications {
        record(&format!("calibration rep {}", r.replication), r.max_rhat, r.min_ess);
    }
    let all = rep.pooled();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        (all.coverage - 0.95).abs() <= 0.04 && secs < 1800.0,
        format!(
            "coverage {:.3} over {} intervals, bias {:.4}, {secs:.0} s",
            all.coverage, all.n, all.bias
        ),
    )
}

fn mean_width(r: &mima_core::synthetic::ReplicationResult) -> f64 {
    r.estimands.iter().map(|e| e.width()).sum::<f64>() / r.estimands.len() as f64
}

fn borrowing() -> Outcome {
    let s = ScenarioSpec {
        n_indications: 4,
        trials_per_indication: 3,
        effect_mode: EffectMode::Common { d: -0.3 },
        within_tau: WithinTau::Fixed(0.05),
        seed: 401,
        ..Default::default()
    };
    let cfg = SamplerConfig::with_seed(402);
    let n = 100;
    let wins: Vec<(bool, bool)> = (0..n)
        .into_par_iter()
        .map(|r| {
            let fit = |sharing| {
                let (res, d) = run_replication(&s, &uni(sharing, false), &cfg, r).unwrap();
                guard(&format!("borrowing {sharing} rep {r}"), &d);
                mean_width(&res)
            };
            let ip = fit(SharingStructure::IP);
            (fit(SharingStructure::CP) < ip, fit(SharingStructure::RP) < ip)
        })
        .collect();
    let cp = wins.iter().filter(|w| w.0).count();
    let rp = wins.iter().filter(|w| w.1).count();
    outcome(
        cp * 100 >= 95 * n && rp * 100 >= 95 * n,
        format!("CP narrower than IP in {cp}/{n}, RP narrower in {rp}/{n}"),
    )
}

fn mixture() -> Outcome {
    let s = ScenarioSpec {
        n_indications: 4,
        trials_per_indication: 4,
        effect_mode: EffectMode::OneExtreme { d: -0.3, offset: 1.0 },
        within_tau: WithinTau::Fixed(0.05),
        seed: 501,
        ..Default::default()
    };
    let cfg = SamplerConfig::with_seed(502);
    let probs: Vec<(f64, f64)> = (0..50)
        .into_par_iter()
        .map(|r| {
            let (res, d) = run_replication(&s, &uni(SharingStructure::MCIP, false), &cfg, r).unwrap();
            guard(&format!("mixture rep {r}"), &d);
            let conforming = (1..=3)
                .map(|j| res.mixture_prob(&format!("c[I{j}]")).unwrap())
                .sum::<f64>()
                / 3.0;
            (res.mixture_prob("c[I4]").unwrap(), conforming)
        })
        .collect();
    let extreme = median(probs.iter().map(|p| p.0).collect());
    let conforming = median(probs.iter().map(|p| p.1).collect());
    outcome(
        extreme < conforming,
        format!("median mixture probability extreme {extreme:.3}, conforming {conforming:.3}"),
    )
}

fn selection() -> Outcome {
    let s = ScenarioSpec {
        n_indications: 4,
        trials_per_indication: 3,
        effect_mode: EffectMode::Common { d: -0.3 },
        within_tau: WithinTau::Fixed(0.05),
        ..Default::default()
    };
    let n = 20;
    let picks: Vec<SharingStructure> = (0..n)
        .into_par_iter()
        .map(|r| {
            let (e, _) = generate(&ScenarioSpec {
                seed: derive_seed(601, r as u64),
                ..s.clone()
            })
            .unwrap();
            let cfg = RunConfig {
                spec: uni(SharingStructure::CP, false),
                sampler: SamplerConfig::with_seed(derive_seed(602, r as u64)),
            };
            let cmp = compare_fits(&cfg, &e).unwrap();
            for x in &cmp.entries {
                guard(&format!("selection {} rep {r}", x.sharing), &x.draws);
            }
            cmp.selected
        })
        .collect();
    let cp = picks.iter().filter(|s| **s == SharingStructure::CP).count();
    let others: Vec<String> = picks
        .iter()
        .filter(|s| **s != SharingStructure::CP)
        .map(|s| s.to_string())
        .collect();
    outcome(
        cp * 100 >= 80 * n,
        format!("CP selected in {cp}/{n}; others {others:?}"),
    )
}

fn interval(draws: &[f64]) -> (f64, f64) {
    let s = summarize_posterior(draws, &DEFAULT_QUANTILES).unwrap();
    (s.lo95(), s.hi95())
}

fn guard_pipeline(label: &str, p: &PipelineResult) {
    guard(&format!("{label} univariate"), &p.univariate);
    guard(&format!("{label} bivariate"), &p.bivariate);
}

fn prediction() -> Outcome {
    let s = ScenarioSpec {
        n_indications: 4,
        trials_per_indication: 4,
        effect_mode: EffectMode::Common { d: -0.3 },
        within_tau: WithinTau::Fixed(0.1),
        lambda0: vec![0.0],
        lambda1: vec![0.8],
        psi: vec![0.02],
        ..Default::default()
    };
    let spec = ModelSpec::new(EndpointMode::BivariateSurrogacy, SharingStructure::CP);
    let n = 50;
    let reps: Vec<(bool, bool)> = (0..n)
        .into_par_iter()
        .map(|r| {
            let (e, truth) = generate(&ScenarioSpec {
                seed: derive_seed(701, r as u64),
                ..s.clone()
            })
            .unwrap();
            let cfg = SamplerConfig::with_seed(derive_seed(702, r as u64));
            let matched = run_pipeline(&spec, &e, &cfg, false, PredictionMode::Matched).unwrap();
            let ip = run_pipeline(&spec, &e, &cfg, false, PredictionMode::IpPfs).unwrap();
            guard_pipeline(&format!("prediction matched rep {r}"), &matched);
            guard_pipeline(&format!("prediction IP-PFS rep {r}"), &ip);
            let covered = matched.predictions.iter().all(|p| {
                let (lo, hi) = interval(&p.draws);
                (lo..=hi).contains(&truth.indication(&p.indication).unwrap().d_os)
            });
            let width = |x: &PipelineResult| {
                x.predictions
                    .iter()
                    .map(|p| {
                        let (lo, hi) = interval(&p.draws);
                        hi - lo
                    })
                    .sum::<f64>()
            };
            (covered, width(&ip) >= width(&matched))
        })
        .collect();
    let covered = reps.iter().filter(|r| r.0).count();
    let wider = reps.iter().filter(|r| r.1).count();
    outcome(
        covered * 100 >= 90 * n && wider == n,
        format!("matched CP covers planted OS effects in {covered}/{n}; IP-PFS at least as wide in {wider}/{n}"),
    )
}

fn crossval() -> Outcome {
    let s = ScenarioSpec {
        n_indications: 3,
        trials_per_indication: 5,
        effect_mode: EffectMode::Common { d: -0.3 },
        within_tau: WithinTau::Fixed(0.2),
        lambda0: vec![0.0],
        lambda1: vec![0.8],
        psi: vec![0.1],
        ..Default::default()
    };
    let spec = ModelSpec::new(EndpointMode::BivariateSurrogacy, SharingStructure::CP);
    let mut rows = Vec::new();
    for r in 0..3 {
        let (e, _) = generate(&ScenarioSpec {
            seed: derive_seed(801, r),
            ..s.clone()
        })
        .unwrap();
        let rep = loo_crossval(&spec, &e, &SamplerConfig::with_seed(derive_seed(802, r))).unwrap();
        rows.extend(rep.rows);
    }
    for r in &rows {
        record(&format!("crossval {}", r.study_id), r.max_rhat, r.min_ess);
    }
    let inside = rows.iter().filter(|r| r.inside).count();
    let coverage = inside as f64 / rows.len() as f64;
    outcome(
        rows.len() >= 40 && (coverage - 0.95).abs() <= 0.10,
        format!(
            "{inside}/{} masked OS estimates inside (coverage {coverage:.3})",
            rows.len()
        ),
    )
}

fn mima(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_mima"))
        .args(args)
        .output()
        .expect("binary runs")
        .status
        .success()
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

/// Records the indication-level rows of a CLI `convergence.csv`.
fn guard_convergence_csv(label: &str, path: &Path) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    for row in rdr.records() {
        let row = row.unwrap();
        let name = &row[0];
        if ["effect[", "intercept[", "slope[", "cond_sd["]
            .iter()
            .any(|f| name.starts_with(f))
        {
            record(
                &format!("{label} {name}"),
                row[1].parse().unwrap(),
                row[2].parse().unwrap(),
            );
        }
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let scen = dir.path().join("scenario.txt");
    std::fs::write(
        &scen,
        "n_indications = 2\ntrials_per_indication = 3\nmissing_os_fraction = 0.2\nseed = 9\n",
    )
    .unwrap();
    let sim = dir.path().join("sim");
    assert!(mima(&[
        "simulate",
        "--scenario",
        scen.to_str().unwrap(),
        "--out",
        sim.to_str().unwrap()
    ]));
    let data = sim.join("evidence.csv");
    let data = data.to_str().unwrap();
    let commands: [&[&str]; 6] = [
        &["validate"],
        &["fit", "--sharing", "rp"],
        &[
            "fit",
            "--endpoint-mode",
            "bivariate-surrogacy",
            "--sharing",
            "mrip",
            "--tie-mixture",
        ],
        &["compare"],
        &["predict", "--sharing", "cp", "--include-psi"],
        &["crossval"],
    ];
    let mut mismatched = Vec::new();
    let mut files = 0;
    for (k, cmd) in commands.iter().enumerate() {
        let outs: Vec<_> = ["a", "b"]
            .iter()
            .map(|tag| {
                let out = dir.path().join(format!("{k}{tag}"));
                let mut args = cmd.to_vec();
                args.extend(["--data", data, "--seed", "11", "--out", out.to_str().unwrap()]);
                assert!(mima(&args), "{cmd:?}");
                out
            })
            .collect();
        if cmd[0] == "fit" {
            guard_convergence_csv(
                &format!("determinism {}", cmd.join(" ")),
                &outs[0].join("convergence.csv"),
            );
        }
        let (a, b) = (csv_files(&outs[0]), csv_files(&outs[1]));
        files += a.len();
        if a != b {
            mismatched.push(cmd.join(" "));
        }
    }
    let (a, b) = (csv_files(&sim), {
        let again = dir.path().join("sim2");
        assert!(mima(&[
            "simulate",
            "--scenario",
            scen.to_str().unwrap(),
            "--out",
            again.to_str().unwrap()
        ]));
        csv_files(&again)
    });
    files += a.len();
    if a != b {
        mismatched.push("simulate".into());
    }
    outcome(
        mismatched.is_empty() && files >= 8,
        format!("{files} CSV outputs compared; mismatches {mismatched:?}"),
    )
}

fn convergence() -> Outcome {
    let g = GUARD.lock().unwrap();
    outcome(
        g.max_rhat.0 <= 1.05 && g.min_ess.0 >= 400.0,
        format!(
            "{} monitored columns; max R-hat {:.4} ({}), min ESS {:.0} ({})",
            g.fits, g.max_rhat.0, g.max_rhat.1, g.min_ess.0, g.min_ess.1
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("conjugate oracle", conjugate),
        ("quadrature oracle", quadrature),
        ("IP calibration", calibration),
        ("borrowing strength", borrowing),
        ("mixture discrimination", mixture),
        ("DIC selection", selection),
        ("prediction pipeline", prediction),
        ("cross-validation calibration", crossval),
        ("convergence guardrails", convergence),
        ("determinism", determinism),
    ];
    // Criterion 9 summarizes the fits of all the others, so it runs last.
    let order = [0, 1, 2, 3, 4, 5, 6, 7, 9, 8];
    let mut results: Vec<Option<Outcome>> = (0..10).map(|_| None).collect();
    for k in order {
        let t0 = Instant::now();
        let o = (criteria[k].1)();
        let mut err = std::io::stderr();
        let _ = writeln!(
            err,
            "criterion {:>2} {} {}: {} [{:.0} s]",
            k + 1,
            if o.pass { "PASS" } else { "FAIL" },
            criteria[k].0,
            o.detail,
            t0.elapsed().as_secs_f64()
        );
        results[k] = Some(o);
    }
    let failed: Vec<usize> = (0..10)
        .filter(|k| !results[*k].as_ref().unwrap().pass)
        .map(|k| k + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
