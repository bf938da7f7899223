use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use mima_core::config::RunConfig;
use mima_core::diagnostics::{
    convergence_report, fit_stats, select_model, ConvergenceReport, FitStats, COMPLEXITY_ORDER,
};
use mima_core::prediction::{loo_crossval, predict_new_indication, run_pipeline, CrossvalReport, PredictionMode};
use mima_core::sampler::derive_seed;
use mima_core::synthetic::{generate, ScenarioSpec};
use mima_core::{run_model, EndpointMode, EvidenceSet, Model, ModelSpec, PosteriorDraws, RunOptions, SharingStructure};

use crate::output::{
    num, summary_rows, write_convergence, write_draws, write_forest, write_json, write_rows, write_summary, SummaryRow,
};
use crate::{input_err, io_err, CliResult, GlobalArgs, ModeArg};

#[derive(Debug, Serialize)]
struct DataRecord {
    path: Option<PathBuf>,
    sha256: String,
    n_records: usize,
    snapshot: Option<String>,
    exclude_indication: Option<String>,
}

/// Everything needed to repeat a run.
#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    config: String,
    seed: u64,
    data: DataRecord,
    sensitivity: BTreeMap<&'static str, bool>,
    wall_clock_seconds: f64,
    acceptance: BTreeMap<String, BTreeMap<String, f64>>,
    convergence_flags: BTreeMap<String, Vec<String>>,
    outputs: Vec<String>,
}

impl Manifest {
    fn new(command: &str, g: &GlobalArgs, cfg: &RunConfig, bytes: &[u8], e: &EvidenceSet) -> Self {
        let sensitivity = BTreeMap::from([
            ("independent_psi", g.independent_psi),
            ("tie_mixture", g.tie_mixture),
            ("common_effect_within", g.common_effect_within),
        ]);
        Self {
            tool: "mima",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config: cfg.to_config_string(),
            seed: cfg.sampler.seed,
            data: DataRecord {
                path: g.data.clone(),
                sha256: hex::encode(Sha256::digest(bytes)),
                n_records: e.len(),
                snapshot: g.snapshot.map(|d| d.to_string()),
                exclude_indication: g.exclude_indication.clone(),
            },
            sensitivity,
            wall_clock_seconds: 0.0,
            acceptance: BTreeMap::new(),
            convergence_flags: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn record_fit(&mut self, key: &str, draws: &PosteriorDraws, conv: &ConvergenceReport) {
        self.acceptance.insert(key.to_string(), draws.acceptance());
        self.convergence_flags
            .insert(key.to_string(), conv.flagged().map(|e| e.name.clone()).collect());
    }

    fn finish(mut self, dir: &Path, started: Instant, outputs: &[&str]) -> CliResult<()> {
        self.wall_clock_seconds = started.elapsed().as_secs_f64();
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        write_json(&dir.join("manifest.json"), &self)
    }
}

pub fn validate(g: &GlobalArgs, json: bool) -> CliResult<()> {
    let (bytes, e) = match g.evidence() {
        Ok(x) => x,
        Err(err) => {
            if json {
                println!("{}", serde_json::json!({ "valid": false, "error": err.message() }));
            }
            return Err(err);
        }
    };
    let s = e.summarize();
    let report = serde_json::json!({
        "valid": true,
        "sha256": hex::encode(Sha256::digest(&bytes)),
        "n_records": e.len(),
        "n_indications": e.n_indications(),
        "indications": s.per_indication.iter().map(|c| serde_json::json!({
            "indication": c.indication,
            "n_trials": c.n_trials,
            "n_pfs": c.n_pfs,
            "n_os": c.n_os,
        })).collect::<Vec<_>>(),
        "total": {
            "n_trials": s.total.n_trials,
            "n_pfs": s.total.n_pfs,
            "n_os": s.total.n_os,
        },
    });
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("json value"));
    } else {
        println!("{:<24} {:>7} {:>5} {:>5}", "indication", "trials", "pfs", "os");
        for c in s.per_indication.iter().chain(std::iter::once(&s.total)) {
            println!("{:<24} {:>7} {:>5} {:>5}", c.indication, c.n_trials, c.n_pfs, c.n_os);
        }
    }
    if g.out.is_some() {
        let dir = g.out_dir()?;
        write_json(&dir.join("validation.json"), &report)?;
    }
    Ok(())
}

/// Posterior summary of the effect in a new indication, for univariate
/// fits with a cross-indication estimand.
fn new_indication_row(draws: &PosteriorDraws, cfg: &RunConfig) -> CliResult<Option<SummaryRow>> {
    let spec = &draws.model.spec;
    if spec.endpoint_mode.is_bivariate() || spec.sharing == SharingStructure::IP {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.sampler.seed, 7));
    let d = predict_new_indication(draws, spec.p_new, &mut rng)?;
    SummaryRow::from_draws("effect[new]", "new_indication", &d).map(Some)
}

#[derive(Debug, Serialize)]
struct FitJson {
    #[serde(flatten)]
    stats: FitStats,
    negative_pd: bool,
    status: &'static str,
    flagged: Vec<String>,
}

fn fit_json(stats: FitStats, conv: &ConvergenceReport) -> FitJson {
    let flagged: Vec<String> = conv.flagged().map(|e| e.name.clone()).collect();
    FitJson {
        stats,
        negative_pd: stats.negative_pd(),
        status: if flagged.is_empty() && !stats.negative_pd() {
            "ok"
        } else {
            "warning"
        },
        flagged,
    }
}

fn warn_flags(label: &str, conv: &ConvergenceReport, stats: &FitStats) {
    let flagged: Vec<&str> = conv.flagged().map(|e| e.name.as_str()).collect();
    if !flagged.is_empty() {
        eprintln!("warning: {label}: convergence flags on {}", flagged.join(", "));
    }
    if stats.negative_pd() {
        eprintln!("warning: {label}: negative pD ({:.3})", stats.pd);
    }
}

pub fn fit(g: &GlobalArgs, with_draws: bool) -> CliResult<()> {
    let started = Instant::now();
    let cfg = g.run_config()?;
    let (bytes, e) = g.evidence()?;
    let dir = g.out_dir()?;
    let model = Model::new(&cfg.spec, &e)?;
    let draws = run_model(&model, &cfg.sampler, &RunOptions::default())?;
    let mut rows = summary_rows(&draws)?;
    rows.extend(new_indication_row(&draws, &cfg)?);
    let conv = convergence_report(&draws, None, false)?;
    let stats = fit_stats(&draws)?;
    write_summary(&dir, &rows)?;
    write_forest(&dir, &rows)?;
    write_convergence(&dir, &conv)?;
    write_json(&dir.join("fit.json"), &fit_json(stats, &conv))?;
    let mut outputs = vec!["summary.csv", "forest.csv", "convergence.csv", "fit.json"];
    if with_draws {
        write_draws(&dir.join("draws.bin"), &draws)?;
        outputs.push("draws.bin");
    }
    warn_flags(cfg.spec.sharing.as_str(), &conv, &stats);
    let mut m = Manifest::new("fit", g, &cfg, &bytes, &e);
    m.record_fit(cfg.spec.sharing.as_str(), &draws, &conv);
    m.finish(&dir, started, &outputs)?;
    println!(
        "{} {}: DIC {:.2} (Dbar {:.2}, pD {:.2}); {} rows written to {}",
        cfg.spec.endpoint_mode,
        cfg.spec.sharing,
        stats.dic,
        stats.dbar,
        stats.pd,
        rows.len(),
        dir.display()
    );
    Ok(())
}

/// One sharing structure's fit in a comparison.
#[derive(Debug, Clone)]
pub struct CompareEntry {
    pub sharing: SharingStructure,
    pub stats: FitStats,
    pub convergence: ConvergenceReport,
    pub draws: PosteriorDraws,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub entries: Vec<CompareEntry>,
    pub selected: SharingStructure,
}

/// The spec of `base` with `sharing` swapped in; tying is dropped for
/// non-mixture structures.
pub fn spec_for(base: &ModelSpec, sharing: SharingStructure) -> ModelSpec {
    let mut s = *base;
    s.sharing = sharing;
    s.tie_mixture_probabilities &= sharing.is_mixture();
    s
}

/// Fits all five structures (sampler seed derived per structure) and
/// applies the DIC selection rule.
pub fn compare_fits(cfg: &RunConfig, e: &EvidenceSet) -> CliResult<Comparison> {
    let mut entries = Vec::new();
    for (k, &sharing) in SharingStructure::ALL.iter().enumerate() {
        let model = Model::new(&spec_for(&cfg.spec, sharing), e)?;
        let sampler = mima_core::SamplerConfig {
            seed: derive_seed(cfg.sampler.seed, k as u64),
            ..cfg.sampler
        };
        let draws = run_model(&model, &sampler, &RunOptions::default())?;
        let fam: Vec<&str> = draws.family_columns();
        let convergence = convergence_report(&draws, Some(&fam), false)?;
        let stats = fit_stats(&draws)?;
        entries.push(CompareEntry {
            sharing,
            stats,
            convergence,
            draws,
        });
    }
    let table: Vec<(SharingStructure, FitStats)> = entries.iter().map(|x| (x.sharing, x.stats)).collect();
    let selected = select_model(&table, &COMPLEXITY_ORDER)?;
    Ok(Comparison { entries, selected })
}

pub fn compare(g: &GlobalArgs) -> CliResult<Comparison> {
    let started = Instant::now();
    let cfg = g.run_config()?;
    let (bytes, e) = g.evidence()?;
    let dir = g.out_dir()?;
    let cmp = compare_fits(&cfg, &e)?;
    let best = cmp.entries.iter().map(|x| x.stats.dic).fold(f64::INFINITY, f64::min);
    write_rows(
        &dir.join("dic_table.csv"),
        &["structure", "dbar", "pd", "dic", "delta_dic", "selected", "converged"],
        cmp.entries.iter().map(|x| {
            vec![
                x.sharing.as_str().to_string(),
                num(x.stats.dbar),
                num(x.stats.pd),
                num(x.stats.dic),
                num(x.stats.dic - best),
                (x.sharing == cmp.selected).to_string(),
                (!x.convergence.any_flagged()).to_string(),
            ]
        }),
    )?;
    let mut m = Manifest::new("compare", g, &cfg, &bytes, &e);
    for x in &cmp.entries {
        warn_flags(x.sharing.as_str(), &x.convergence, &x.stats);
        m.record_fit(x.sharing.as_str(), &x.draws, &x.convergence);
    }
    m.finish(&dir, started, &["dic_table.csv"])?;
    if e.n_indications() == 1 {
        println!("note: one indication; IP and CP describe the same model");
    }
    println!("selected: {}", cmp.selected);
    Ok(cmp)
}

fn bivariate(cfg: &RunConfig) -> CliResult<ModelSpec> {
    let mut spec = cfg.spec;
    spec.endpoint_mode = EndpointMode::BivariateSurrogacy;
    spec.validate()?;
    Ok(spec)
}

pub fn predict(g: &GlobalArgs, mode: ModeArg, include_psi: bool) -> CliResult<()> {
    let started = Instant::now();
    let cfg = g.run_config()?;
    let (bytes, e) = g.evidence()?;
    let dir = g.out_dir()?;
    let spec = bivariate(&cfg)?;
    let mode = match mode {
        ModeArg::IpPfs => PredictionMode::IpPfs,
        ModeArg::Matched => PredictionMode::Matched,
    };
    let res = run_pipeline(&spec, &e, &cfg.sampler, include_psi, mode)?;
    let mut rows = Vec::new();
    for p in &res.predictions {
        let pfs = res
            .pfs
            .iter()
            .find(|x| x.indication == p.indication)
            .expect("PFS estimate per prediction");
        let s = SummaryRow::from_draws(&p.indication, "os_prediction", &p.draws)?;
        rows.push(vec![
            p.indication.clone(),
            mode.as_str().to_string(),
            p.includes_conditional_variance.to_string(),
            pfs.source_sharing.as_str().to_string(),
            num(pfs.mean),
            num(pfs.sd),
            num(s.mean),
            num(s.sd),
            num(s.lo95),
            num(s.median),
            num(s.hi95),
        ]);
    }
    let missing: Vec<&String> = res
        .pfs
        .iter()
        .map(|p| &p.indication)
        .filter(|l| !res.predictions.iter().any(|p| &p.indication == *l))
        .collect();
    if !missing.is_empty() {
        eprintln!(
            "note: no dual-endpoint surrogacy fit for {}",
            missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        );
    }
    write_rows(
        &dir.join("predictions.csv"),
        &[
            "indication",
            "mode",
            "include_psi",
            "pfs_source",
            "pfs_mean",
            "pfs_sd",
            "mean",
            "sd",
            "q2.5",
            "median",
            "q97.5",
        ],
        rows,
    )?;
    let mut m = Manifest::new("predict", g, &cfg, &bytes, &e);
    for (key, d) in [("univariate", &res.univariate), ("bivariate", &res.bivariate)] {
        let fam: Vec<&str> = d.family_columns();
        let conv = convergence_report(d, Some(&fam), false)?;
        m.record_fit(key, d, &conv);
    }
    m.finish(&dir, started, &["predictions.csv"])?;
    println!(
        "{} predictions ({}) written to {}",
        res.predictions.len(),
        mode.as_str(),
        dir.display()
    );
    Ok(())
}

pub fn crossval_rows(rep: &CrossvalReport) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = rep
        .rows
        .iter()
        .map(|r| {
            vec![
                "study".into(),
                r.study_id.clone(),
                r.indication.clone(),
                num(r.predicted_mean),
                num(r.predicted_sd),
                num(r.lo95),
                num(r.hi95),
                num(r.observed),
                num(r.se_os),
                num(r.residual),
                r.inside.to_string(),
                String::new(),
            ]
        })
        .collect();
    for (l, note) in &rep.skipped {
        let mut r = vec![String::new(); 12];
        r[0] = "skipped".into();
        r[2] = l.clone();
        r[11] = note.clone();
        rows.push(r);
    }
    let mut r = vec![String::new(); 12];
    r[0] = "coverage".into();
    r[10] = rep.coverage().map(num).unwrap_or_default();
    r[11] = format!("{} masked studies", rep.rows.len());
    rows.push(r);
    rows
}

pub fn crossval(g: &GlobalArgs) -> CliResult<()> {
    let started = Instant::now();
    let cfg = g.run_config()?;
    let (bytes, e) = g.evidence()?;
    let dir = g.out_dir()?;
    let spec = bivariate(&cfg)?;
    let rep = loo_crossval(&spec, &e, &cfg.sampler)?;
    write_rows(
        &dir.join("crossval.csv"),
        &[
            "kind",
            "study_id",
            "indication",
            "predicted_mean",
            "predicted_sd",
            "lo95",
            "hi95",
            "observed",
            "se_os",
            "residual",
            "inside",
            "note",
        ],
        crossval_rows(&rep),
    )?;
    for (l, note) in &rep.skipped {
        eprintln!("notice: indication `{l}` skipped: {note}");
    }
    Manifest::new("crossval", g, &cfg, &bytes, &e).finish(&dir, started, &["crossval.csv"])?;
    match rep.coverage() {
        Some(c) => println!("{} masked studies; 95% interval coverage {:.3}", rep.rows.len(), c),
        None => println!("no indication has two dual-endpoint studies; nothing to validate"),
    }
    Ok(())
}

pub fn simulate(g: &GlobalArgs, scenario: &Path) -> CliResult<()> {
    let text = std::fs::read_to_string(scenario).map_err(|e| input_err(format!("{}: {e}", scenario.display())))?;
    let mut s = ScenarioSpec::parse(&text)?;
    if let Some(seed) = g.seed {
        s.seed = seed;
    }
    let dir = g.out_dir()?;
    let (e, truth) = generate(&s)?;
    let path = dir.join("evidence.csv");
    std::fs::write(&path, e.to_csv_string()).map_err(|err| io_err(&path, err))?;
    write_json(&dir.join("truth.json"), &truth)?;
    println!(
        "{} trials in {} indications written to {}",
        e.len(),
        e.n_indications(),
        dir.display()
    );
    Ok(())
}
