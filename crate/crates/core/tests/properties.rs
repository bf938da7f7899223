use std::collections::BTreeMap;

use chrono::NaiveDate;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mima_core::diagnostics::{dic, ess, rhat, summarize_posterior};
use mima_core::evidence::{parse_evidence_str, Estimate};
use mima_core::likelihood::{density_terms, log_joint};
use mima_core::model::Support;
use mima_core::prediction::{predict_new_indication, predict_os, PfsEstimate, PredictionMode};
use mima_core::sampler::{conjugate_conditional, ChainDraws};
use mima_core::{
    run, EndpointMode, EvidenceSet, Model, ModelSpec, ParameterValues, PosteriorDraws, SamplerConfig, SharingStructure,
    TrialRecord,
};

fn estimate() -> impl Strategy<Value = Option<Estimate>> {
    prop::option::weighted(
        0.8,
        (-2.0f64..2.0, 0.01f64..1.0, prop::option::of(0u32..3000)).prop_map(|(lhr, se, day)| Estimate {
            lhr,
            se,
            report_date: day.map(|d| NaiveDate::from_ymd_opt(2000, 1, 1).unwrap() + chrono::Days::new(d as u64)),
        }),
    )
}

fn evidence() -> impl Strategy<Value = EvidenceSet> {
    prop::collection::vec((0usize..4, estimate(), estimate()), 1..20).prop_map(|rows| {
        let records = rows
            .into_iter()
            .enumerate()
            .map(|(k, (j, pfs, os))| {
                let pfs = if pfs.is_none() && os.is_none() {
                    Some(Estimate {
                        lhr: -0.1,
                        se: 0.2,
                        report_date: None,
                    })
                } else {
                    pfs
                };
                TrialRecord {
                    study_id: format!("S{k}"),
                    indication: ["lung", "colorectal", "breast", "ovarian"][j].to_string(),
                    pfs,
                    os,
                }
            })
            .collect();
        EvidenceSet::new(records).unwrap()
    })
}

fn date(d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 1).unwrap() + chrono::Days::new(d as u64)
}

fn retained(e: &EvidenceSet) -> Vec<(String, bool, bool)> {
    e.records()
        .iter()
        .map(|r| (r.study_id.clone(), r.pfs.is_some(), r.os.is_some()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip(e in evidence()) {
        let back = parse_evidence_str(&e.to_csv_string()).unwrap();
        prop_assert_eq!(back.records(), e.records());
        prop_assert_eq!(back.indications(), e.indications());
    }

    #[test]
    fn snapshot_idempotent_and_monotone(e in evidence(), c1 in 0u32..3000, gap in 0u32..1000) {
        let early = e.snapshot(Some(date(c1)));
        let again = early.snapshot(Some(date(c1)));
        prop_assert_eq!(again.records(), early.records());
        let late = e.snapshot(Some(date(c1 + gap)));
        let late_map: BTreeMap<_, _> = retained(&late).into_iter().map(|(id, p, o)| (id, (p, o))).collect();
        for (id, p, o) in retained(&early) {
            let (lp, lo) = late_map.get(&id).copied().unwrap_or((false, false));
            prop_assert!(lp || !p);
            prop_assert!(lo || !o);
        }
        for r in early.records() {
            for est in [r.pfs, r.os].into_iter().flatten() {
                prop_assert!(est.report_date.is_some_and(|d| d <= date(c1)));
            }
        }
    }

    #[test]
    fn layout_invariant_to_study_order(e in evidence(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut recs = e.records().to_vec();
        recs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = EvidenceSet::new(recs).unwrap();
        for sharing in SharingStructure::ALL {
            let spec = ModelSpec::new(EndpointMode::UnivariatePfs, sharing);
            let (a, b) = (Model::new(&spec, &e), Model::new(&spec, &shuffled));
            prop_assert_eq!(a.is_ok(), b.is_ok());
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert_eq!(a.layout.shape(), b.layout.shape());
                let mut ia = a.indications.clone();
                let mut ib = b.indications.clone();
                ia.sort();
                ib.sort();
                prop_assert_eq!(ia, ib);
            }
        }
    }

    #[test]
    fn rhat_affine_invariant(
        chains in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 20), 2..4),
        a in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
        b in -100.0f64..100.0,
    ) {
        let r = rhat(&chains).unwrap();
        let t: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|x| a * x + b).collect()).collect();
        let rt = rhat(&t).unwrap();
        prop_assert!((r - rt).abs() < 1e-8 * r.max(1.0), "{} {}", r, rt);
    }

    #[test]
    fn ess_affine_invariant_and_bounded(
        x in prop::collection::vec(-5.0f64..5.0, 8..300),
        a in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
        b in -100.0f64..100.0,
    ) {
        let n = x.len() as f64;
        let e1 = ess(&x).unwrap();
        let e2 = ess(&x.iter().map(|v| a * v + b).collect::<Vec<_>>()).unwrap();
        prop_assert!(e1 > 0.0 && e1 <= n);
        prop_assert!((e1 - e2).abs() < 1e-6 * n, "{} {}", e1, e2);
    }

    #[test]
    fn dic_shift(trace in prop::collection::vec(0.0f64..50.0, 1..100), d0 in 0.0f64..50.0, k in -20.0f64..20.0) {
        let a = dic(&trace, d0).unwrap();
        let b = dic(&trace.iter().map(|x| x + k).collect::<Vec<_>>(), d0 + k).unwrap();
        prop_assert!((b.dbar - a.dbar - k).abs() < 1e-9);
        prop_assert!((b.dic - a.dic - k).abs() < 1e-9);
        prop_assert!((b.pd - a.pd).abs() < 1e-9);
    }

    #[test]
    fn log_joint_is_sum_of_terms(seed in any::<u64>(), spec_ix in 0usize..15) {
        let e = demo();
        let spec = all_specs()[spec_ix];
        let model = Model::new(&spec, &e).unwrap();
        let v = random_values(&model, seed);
        let r = density_terms(&model, &v).unwrap();
        let sum = r.log_prior + r.study_loglik.iter().sum::<f64>() + r.hierarchical.iter().map(|h| h.1).sum::<f64>();
        prop_assert!((r.total - sum).abs() < 1e-9 * (1.0 + sum.abs()));
        prop_assert_eq!(log_joint(&model, &v).unwrap(), r.total);
    }

    #[test]
    fn conditional_mode_maximizes_log_joint(seed in any::<u64>(), spec_ix in 0usize..15) {
        let e = demo();
        let spec = all_specs()[spec_ix];
        let model = Model::new(&spec, &e).unwrap();
        let v = random_values(&model, seed);
        let offs: Vec<usize> = model
            .layout
            .blocks
            .iter()
            .filter(|b| b.update == mima_core::model::UpdateKind::ConjugateNormal)
            .flat_map(|b| b.range())
            .collect();
        let off = offs[(seed % offs.len() as u64) as usize];
        let (m, var) = conjugate_conditional(&model, &v, off).unwrap();
        let f = |x: f64| {
            let mut w = v.clone();
            w.0[off] = x;
            log_joint(&model, &w).unwrap()
        };
        let sd = var.sqrt();
        let mode = golden_max(f, m - 20.0 * sd, m + 20.0 * sd);
        prop_assert!((mode - m).abs() < 1e-6 * (1.0 + sd), "{} vs {}", mode, m);
    }

    #[test]
    fn predict_os_linear_consistent(a in prop_oneof![-3.0f64..-0.2, 0.2f64..3.0], m in -1.0f64..1.0, s in 0.05f64..0.5) {
        let n = 20_000;
        let l1: Vec<f64> = (0..n).map(|t| 0.8 + 0.1 * ((t % 13) as f64 / 13.0)).collect();
        let base = fake_biv(vec![0.1; n], l1.clone());
        let scaled = fake_biv(vec![0.1; n], l1.iter().map(|x| x / a).collect());
        let pfs = |mean: f64, sd: f64| PfsEstimate {
            indication: "A".into(),
            mean,
            sd,
            source_sharing: SharingStructure::IP,
        };
        let p1 = predict_os(&base, &pfs(m, s), false, PredictionMode::Matched, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p2 = predict_os(&scaled, &pfs(a * m, a.abs() * s), false, PredictionMode::Matched, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (s1, s2) = (summarize_posterior(&p1.draws, &[]).unwrap(), summarize_posterior(&p2.draws, &[]).unwrap());
        let mc = 4.0 * s1.sd / (n as f64).sqrt();
        prop_assert!((s1.mean - s2.mean).abs() < 2.0 * mc, "{} {}", s1.mean, s2.mean);
        prop_assert!((s1.sd / s2.sd - 1.0).abs() < 0.05, "{} {}", s1.sd, s2.sd);
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
        if b - a < 1e-12 {
            break;
        }
    }
    (a + b) / 2.0
}

fn demo() -> EvidenceSet {
    parse_evidence_str(
        "study_id,indication,lhr_pfs,se_pfs,pfs_report_date,lhr_os,se_os,os_report_date\n\
         A1,A,-0.3,0.1,,-0.2,0.12,\nA2,A,-0.4,0.15,,,,\nB1,B,-0.1,0.2,,-0.05,0.2,\n\
         B2,B,-0.25,0.2,,-0.1,0.3,\nC1,C,-0.5,0.15,,-0.4,0.2,\n",
    )
    .unwrap()
}

fn all_specs() -> Vec<ModelSpec> {
    [
        EndpointMode::UnivariatePfs,
        EndpointMode::UnivariateOs,
        EndpointMode::BivariateSurrogacy,
    ]
    .iter()
    .flat_map(|&m| SharingStructure::ALL.iter().map(move |&s| ModelSpec::new(m, s)))
    .collect()
}

fn random_values(model: &Model, seed: u64) -> ParameterValues {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = ParameterValues::zeros(&model.layout);
    for b in &model.layout.blocks {
        for k in b.range() {
            v.0[k] = match b.support {
                Support::Real => rng.random_range(-1.0..1.0),
                Support::Positive => rng.random_range(0.05..1.0),
                Support::UnitInterval => rng.random_range(0.05..0.95),
                Support::Binary => f64::from(rng.random_bool(0.5)),
                Support::Correlation => rng.random_range(-0.9..0.9),
            };
        }
    }
    v
}

fn fake_biv(l0: Vec<f64>, l1: Vec<f64>) -> PosteriorDraws {
    let e = parse_evidence_str(
        "study_id,indication,lhr_pfs,se_pfs,pfs_report_date,lhr_os,se_os,os_report_date\nS1,A,-0.3,0.1,,-0.2,0.1,\n",
    )
    .unwrap();
    let model = Model::new(
        &ModelSpec::new(EndpointMode::BivariateSurrogacy, SharingStructure::IP),
        &e,
    )
    .unwrap();
    let values = l0.iter().zip(&l1).flat_map(|(a, b)| [*a, *b]).collect();
    PosteriorDraws {
        config: SamplerConfig::default(),
        columns: vec!["intercept[A]".into(), "slope[A]".into()],
        chains: vec![ChainDraws {
            values,
            deviance: vec![0.0; l0.len()],
            acceptance: BTreeMap::new(),
            param_means: vec![0.0; model.layout.len],
            initial: ParameterValues::zeros(&model.layout),
        }],
        model,
    }
}

#[test]
fn cp_new_indication_draws_are_theta_draws() {
    let e = demo();
    let cfg = SamplerConfig {
        burn_in: 200,
        samples_per_chain: 500,
        ..Default::default()
    };
    let d = run(
        &ModelSpec::new(EndpointMode::UnivariatePfs, SharingStructure::CP),
        &e,
        &cfg,
    )
    .unwrap();
    let p = predict_new_indication(&d, 0.4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(p, d.column("theta").unwrap());
}
