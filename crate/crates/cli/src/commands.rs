use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rankchoice::equivalence::{check_equivalence, random_equivalence_suite, EquivalenceReport};
use rankchoice::estimation::{
    cross_validate, fit as fit_model, fitted_nll, BatchMode, Fitted, Grid, ModelSpec, TrainConfig,
};
use rankchoice::io::{load_rankings, save_rankings, DataFormat};
use rankchoice::metrics::{
    disaggregate, kth_consistency, kth_prediction_hits, mean_defined, nll_by_rank,
    sampled_tau_matrix, write_metric_rows, MetricRow,
};
use rankchoice::paramfile::ParamFile;
use rankchoice::synthetic::{default_truth, generate_district, sample_dataset, LengthDistribution};
use rankchoice::{explode_rankings, ContextPolicy, RankingDataset};
use serde::{Deserialize, Serialize};

use crate::config::{self, ConfigError, ConfigFile};
use crate::output::{ensure_dir, write_csv, write_json, write_text};
use crate::{
    CompareArgs, EquivArgs, EvaluateArgs, ExplodeArgs, FitArgs, Format, GenerateArgs, MetricArgs,
    ModelArgs, PlotDataArgs, TrainArgs, TuneArgs,
};

fn invalid(message: impl Into<String>) -> anyhow::Error {
    ConfigError(message.into()).into()
}

fn load_data(path: &Path) -> Result<RankingDataset> {
    load_rankings(path, DataFormat::infer(path))
        .with_context(|| format!("loading rankings from {}", path.display()))
}

fn load_model(path: &Path, data: &RankingDataset) -> Result<Fitted> {
    let file = ParamFile::load(path)
        .with_context(|| format!("loading parameters from {}", path.display()))?;
    Ok(file.bind(&data.catalog, data.covariates.d())?.clone())
}

fn resolve_train(
    file: &ConfigFile,
    model: &ModelArgs,
    train: &TrainArgs,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut cfg = config::train_config(file, model.model)?;
    if let Some(v) = train.strata {
        cfg.strata = v;
    }
    if let Some(v) = train.laplacian {
        cfg.laplacian = v;
    }
    if let Some(v) = train.l2 {
        cfg.l2 = v;
    }
    if let Some(v) = train.rank {
        cfg.rank = v;
    }
    if let Some(v) = train.step_size {
        cfg.step_size = v;
    }
    if let Some(v) = train.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = train.tolerance {
        cfg.tolerance = v;
    }
    if let Some(size) = train.batch_size {
        cfg.batch = BatchMode::Mini { size };
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------- generate

pub fn generate(a: GenerateArgs) -> Result<()> {
    let file = config::load(a.common.config.as_deref())?;
    let mut spec = file.district.clone().unwrap_or_default();
    if let Some(v) = a.agents {
        spec.n = v;
    }
    if let Some(v) = a.alternatives {
        spec.m = v;
    }
    if let Some(v) = a.schools {
        spec.n_schools = v;
    }
    if let Some(v) = a.program_types {
        spec.n_ptypes = v;
    }
    if let Some(s) = a.common.seed {
        spec.seed = s;
    }
    if file.district.is_none() {
        if let LengthDistribution::Uniform { max, .. } = &mut spec.lengths {
            *max = (*max).min(spec.m);
        }
    }
    spec.validate()?;
    if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
        return Err(invalid("--test-fraction must lie strictly between 0 and 1"));
    }
    let n_test = (spec.n as f64 * a.test_fraction).round() as usize;
    if n_test == 0 || n_test >= spec.n {
        return Err(invalid(format!(
            "a test fraction of {} leaves an empty split of {} households",
            a.test_fraction, spec.n
        )));
    }

    let district = generate_district(&spec)?;
    let truth: Fitted = default_truth(&district, a.model.model, a.model.policy, spec.seed)?.into();
    let data = sample_dataset(&district, &truth, a.model.policy, spec.lengths, spec.seed)?;
    let n_train = spec.n - n_test;
    let train = data.subset(&(0..n_train).collect::<Vec<_>>());
    let test = data.subset(&(n_train..spec.n).collect::<Vec<_>>());

    let out = &a.common.out;
    ensure_dir(out)?;
    let (format, train_path, test_path) = match a.format {
        Format::Delimited => (DataFormat::Delimited, out.join("train"), out.join("test")),
        Format::Structured => (
            DataFormat::Structured,
            out.join("train.json"),
            out.join("test.json"),
        ),
    };
    save_rankings(&train, &train_path, format)?;
    save_rankings(&test, &test_path, format)?;
    ParamFile::new(truth, &district.catalog, district.covariates.d())
        .save(&out.join("truth.json"))?;
    let used = ConfigFile {
        district: Some(spec.clone()),
        ..ConfigFile::default()
    };
    write_text(&out.join("district.toml"), &config::render(&used))?;
    println!(
        "generated {} households ({} train, {} test) over {} programs at {} schools",
        spec.n, n_train, n_test, spec.m, spec.n_schools
    );
    println!(
        "ground truth: {} ({}), {} ranked choices",
        a.model.model,
        a.model.policy,
        data.total_choices()
    );
    Ok(())
}

// ---------------------------------------------------------------- explode

#[derive(Serialize)]
struct ExplodedRow {
    agent: String,
    rank: usize,
    chosen: String,
    context: String,
    choice_set: String,
}

pub fn explode(a: ExplodeArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let choices = explode_rankings(&data, a.policy)?;
    let names = |ids: &mut dyn Iterator<Item = usize>| -> String {
        ids.map(|j| data.catalog.alternatives[j].as_str())
            .collect::<Vec<_>>()
            .join(";")
    };
    let rows: Vec<ExplodedRow> = choices
        .records
        .iter()
        .map(|rec| {
            let context = match &rec.context {
                rankchoice::Context::Set(ids) => names(&mut ids.iter().copied()),
                rankchoice::Context::Forward => {
                    names(&mut rec.choice_set.iter().copied().filter(|&j| j != rec.chosen))
                }
            };
            ExplodedRow {
                agent: data.agent_ids[rec.agent].clone(),
                rank: rec.rank,
                chosen: data.catalog.alternatives[rec.chosen].clone(),
                context,
                choice_set: names(&mut rec.choice_set.iter().copied()),
            }
        })
        .collect();
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_csv(&a.out, &rows)?;
    println!(
        "{} choice records from {} households under {} context",
        rows.len(),
        data.n(),
        a.policy
    );
    Ok(())
}

// ---------------------------------------------------------------- fit

#[derive(Serialize)]
struct TraceRow {
    epoch: usize,
    objective: f64,
}

#[derive(Serialize)]
struct FitSummary {
    model: String,
    policy: String,
    config: TrainConfig,
    epochs: usize,
    converged: bool,
    objective: f64,
    train_nll: f64,
}

pub fn fit(a: FitArgs) -> Result<()> {
    let file = config::load(a.common.config.as_deref())?;
    let cfg = resolve_train(&file, &a.model, &a.train, a.common.seed)?;
    let data = load_data(&a.data)?;
    let spec = ModelSpec::new(a.model.model, a.model.policy);
    let result = fit_model(&spec, &data, &cfg)?;
    let choices = explode_rankings(&data, a.model.policy)?;
    let train_nll = fitted_nll(&result.fitted, &choices)?;

    let out = &a.common.out;
    ensure_dir(out)?;
    ParamFile::new(result.fitted.clone(), &data.catalog, data.covariates.d())
        .save(&out.join("params.json"))?;
    let trace: Vec<TraceRow> = result
        .trace
        .iter()
        .enumerate()
        .map(|(epoch, &objective)| TraceRow { epoch, objective })
        .collect();
    write_csv(&out.join("trace.csv"), &trace)?;
    let objective = result.trace.last().copied().unwrap_or(f64::NAN);
    write_json(
        &out.join("summary.json"),
        &FitSummary {
            model: a.model.model.to_string(),
            policy: a.model.policy.to_string(),
            config: cfg.clone(),
            epochs: result.epochs,
            converged: result.converged,
            objective,
            train_nll,
        },
    )?;
    println!(
        "{} ({}), {} strata: objective {objective:.6} after {} epochs ({}), train nll {train_nll:.6}",
        a.model.model,
        a.model.policy,
        cfg.strata,
        result.epochs,
        if result.converged { "converged" } else { "epoch limit" }
    );
    Ok(())
}

// ---------------------------------------------------------------- tune

#[derive(Serialize)]
struct FoldRow {
    l2: f64,
    rank: usize,
    strata: usize,
    laplacian: f64,
    fold: usize,
    nll: f64,
}

#[derive(Serialize)]
struct CellRow {
    l2: f64,
    rank: usize,
    strata: usize,
    laplacian: f64,
    mean_nll: f64,
    best: bool,
}

pub fn tune(a: TuneArgs) -> Result<()> {
    let file = config::load(a.common.config.as_deref())?;
    let cfg = resolve_train(&file, &a.model, &a.train, a.common.seed)?;
    let data = load_data(&a.data)?;
    let from_file = file.grid.clone().unwrap_or_default();
    let grid = Grid {
        l2: a.l2_grid.or(from_file.l2).unwrap_or(vec![cfg.l2]),
        rank: a.rank_grid.or(from_file.rank).unwrap_or(vec![cfg.rank]),
        strata: a
            .strata_grid
            .or(from_file.strata)
            .unwrap_or(vec![cfg.strata]),
        laplacian: a
            .laplacian_grid
            .or(from_file.laplacian)
            .unwrap_or(vec![cfg.laplacian]),
    };
    let spec = ModelSpec::new(a.model.model, a.model.policy);
    let cv = cross_validate(&spec, &data, &grid, a.folds, &cfg)?;

    let out = &a.common.out;
    ensure_dir(out)?;
    let mut folds = Vec::new();
    let mut cells = Vec::new();
    for cell in &cv.cells {
        let p = cell.point;
        for (fold, &nll) in cell.fold_nll.iter().enumerate() {
            folds.push(FoldRow {
                l2: p.l2,
                rank: p.rank,
                strata: p.strata,
                laplacian: p.laplacian,
                fold,
                nll,
            });
        }
        cells.push(CellRow {
            l2: p.l2,
            rank: p.rank,
            strata: p.strata,
            laplacian: p.laplacian,
            mean_nll: cell.mean_nll,
            best: p == cv.best,
        });
    }
    write_csv(&out.join("cv_folds.csv"), &folds)?;
    write_csv(&out.join("cv_grid.csv"), &cells)?;
    let best = ConfigFile {
        train: Some(toml::Table::try_from(&cv.best_config)?),
        ..ConfigFile::default()
    };
    write_text(&out.join("best.toml"), &config::render(&best))?;
    println!(
        "best of {} grid points over {} folds: l2 {}, rank {}, strata {}, laplacian {}",
        cv.cells.len(),
        a.folds,
        cv.best.l2,
        cv.best.rank,
        cv.best.strata,
        cv.best.laplacian
    );
    Ok(())
}

// ---------------------------------------------------------------- metrics

#[derive(Serialize)]
struct AgentRow {
    agent: String,
    metric: &'static str,
    k: usize,
    value: f64,
}

const ALL: &str = "all";

fn label_names(data: &RankingDataset, requested: &Option<Vec<String>>) -> Vec<String> {
    match requested {
        Some(names) => names.clone(),
        None => data
            .group_labels
            .iter()
            .flat_map(|l| l.keys().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    }
}

fn push_grouped(
    rows: &mut Vec<MetricRow>,
    metric: &str,
    k: usize,
    values: &[Option<f64>],
    data: &RankingDataset,
    labels: &[String],
) {
    let Some(mean) = mean_defined(values) else {
        return;
    };
    rows.push(MetricRow {
        metric: metric.to_string(),
        k: Some(k),
        group: ALL.to_string(),
        value: mean,
        count: values.iter().flatten().count(),
    });
    for label in labels {
        for g in disaggregate(values, &data.group_labels, label) {
            rows.push(MetricRow {
                metric: metric.to_string(),
                k: Some(k),
                group: format!("{label}={}", g.group),
                value: g.mean,
                count: g.count,
            });
        }
    }
}

fn model_policy(model: &Fitted) -> ContextPolicy {
    model.base().policy().unwrap_or(ContextPolicy::Backward)
}

/// Aggregate and per-household metrics of one model.
fn metric_rows(
    model: &Fitted,
    data: &RankingDataset,
    args: &MetricArgs,
) -> Result<(Vec<MetricRow>, Vec<AgentRow>)> {
    let policy = model_policy(model);
    let choices = explode_rankings(data, policy)?;
    let mut rows = vec![MetricRow {
        metric: "nll".into(),
        k: None,
        group: ALL.into(),
        value: fitted_nll(model, &choices)?,
        count: choices.len(),
    }];
    for r in nll_by_rank(model, &choices)? {
        rows.push(MetricRow {
            metric: "nll".into(),
            k: Some(r.rank),
            group: ALL.into(),
            value: r.mean_nll,
            count: r.count,
        });
    }
    let labels = label_names(data, &args.group_by);
    let mut agents = Vec::new();
    for k in 1..=args.max_k.min(data.max_length()) {
        let hits = kth_prediction_hits(model, data, policy, k)?;
        push_grouped(&mut rows, "accuracy", k, &hits, data, &labels);
        let cons = kth_consistency(model, data, policy, k, args.samples, args.seed)?;
        push_grouped(&mut rows, "consistency", k, &cons, data, &labels);
        for (i, (h, c)) in hits.iter().zip(&cons).enumerate() {
            for (metric, v) in [("accuracy", h), ("consistency", c)] {
                if let Some(value) = v {
                    agents.push(AgentRow {
                        agent: data.agent_ids[i].clone(),
                        metric,
                        k,
                        value: *value,
                    });
                }
            }
        }
    }
    Ok((rows, agents))
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let m = &a.metrics;
    let data = load_data(&m.data)?;
    let model = load_model(&a.params, &data)?;
    let (mut rows, agents) = metric_rows(&model, &data, m)?;
    let tau = sampled_tau_matrix(&[&model], &data, m.samples, m.weights.into(), m.seed)?;
    rows.push(MetricRow {
        metric: "tau".into(),
        k: None,
        group: "self".into(),
        value: tau[0][0],
        count: data.n(),
    });
    ensure_dir(&m.out)?;
    write_metric_rows(&m.out.join("metrics.csv"), &rows)?;
    write_csv(&m.out.join("agents.csv"), &agents)?;
    println!(
        "test nll {:.6} over {} choice records",
        rows[0].value, rows[0].count
    );
    for row in rows
        .iter()
        .filter(|r| r.group == ALL && r.metric == "accuracy")
    {
        println!(
            "accuracy@{}: {:.4} ({} households)",
            row.k.unwrap_or(0),
            row.value,
            row.count
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- compare

#[derive(Serialize, Deserialize)]
struct ComparisonRow {
    model: String,
    metric: String,
    k: Option<usize>,
    group: String,
    value: f64,
    count: usize,
}

#[derive(Serialize)]
struct TauRow {
    model_a: String,
    model_b: String,
    tau: f64,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn compare(a: CompareArgs) -> Result<()> {
    let m = &a.metrics;
    let names = match &a.names {
        Some(n) if n.len() == a.params.len() => n.clone(),
        Some(n) => {
            return Err(invalid(format!(
                "{} names for {} parameter files",
                n.len(),
                a.params.len()
            )))
        }
        None => {
            let stems: Vec<String> = a.params.iter().map(|p| stem(p)).collect();
            let unique: BTreeSet<&String> = stems.iter().collect();
            if unique.len() == stems.len() {
                stems
            } else {
                a.params
                    .iter()
                    .map(|p| {
                        p.parent()
                            .map(stem)
                            .filter(|s| !s.is_empty())
                            .unwrap_or_else(|| stem(p))
                    })
                    .collect()
            }
        }
    };
    let data = load_data(&m.data)?;
    let models: Vec<Fitted> = a
        .params
        .iter()
        .map(|p| load_model(p, &data))
        .collect::<Result<_>>()?;
    let mut table = Vec::new();
    for (name, model) in names.iter().zip(&models) {
        let (rows, _) = metric_rows(model, &data, m)?;
        for r in rows {
            table.push(ComparisonRow {
                model: name.clone(),
                metric: r.metric,
                k: r.k,
                group: r.group,
                value: r.value,
                count: r.count,
            });
        }
    }
    let refs: Vec<&Fitted> = models.iter().collect();
    let tau = sampled_tau_matrix(&refs, &data, m.samples, m.weights.into(), m.seed)?;
    let mut tau_rows = Vec::new();
    for (i, a_name) in names.iter().enumerate() {
        for (j, b_name) in names.iter().enumerate() {
            tau_rows.push(TauRow {
                model_a: a_name.clone(),
                model_b: b_name.clone(),
                tau: tau[i][j],
            });
        }
    }
    ensure_dir(&m.out)?;
    write_csv(&m.out.join("comparison.csv"), &table)?;
    write_csv(&m.out.join("tau.csv"), &tau_rows)?;
    for row in table
        .iter()
        .filter(|r| r.metric == "nll" && r.k.is_none() && r.group == ALL)
    {
        println!("{:<20} test nll {:.6}", row.model, row.value);
    }
    Ok(())
}

// ---------------------------------------------------------------- equiv-check

#[derive(Serialize)]
struct EquivEntry {
    case: String,
    #[serde(flatten)]
    report: EquivalenceReport,
}

const MAX_ENUMERATED: usize = 8;

pub fn equiv_check(a: EquivArgs) -> Result<()> {
    let mut entries = Vec::new();
    match (&a.params, &a.data) {
        (Some(params), Some(data_path)) => {
            let data = load_data(data_path)?;
            if data.m() > MAX_ENUMERATED {
                return Err(invalid(format!(
                    "{} alternatives is too many to enumerate every ranking (at most {MAX_ENUMERATED})",
                    data.m()
                )));
            }
            if a.agent >= data.n() {
                return Err(invalid(format!(
                    "household {} out of range for {} households",
                    a.agent,
                    data.n()
                )));
            }
            let model = load_model(params, &data)?;
            for (s, theta) in model.strata().iter().enumerate() {
                let report = check_equivalence(theta, &data.catalog, &data.covariates, a.agent)?;
                entries.push(EquivEntry {
                    case: format!("stratum {}", s + 1),
                    report,
                });
            }
        }
        _ => {
            for &m in &a.sizes {
                if !(2..=MAX_ENUMERATED).contains(&m) {
                    return Err(invalid(format!(
                        "suite sizes must lie in 2..={MAX_ENUMERATED}, got {m}"
                    )));
                }
                entries.push(EquivEntry {
                    case: format!("m={m}"),
                    report: random_equivalence_suite(m, a.trials, a.seed)?,
                });
            }
        }
    }
    for e in &entries {
        println!(
            "{}: max ranking-probability deviation {:.3e}, involution deviation {:.3e}, {} rankings",
            e.case,
            e.report.max_probability_deviation,
            e.report.involution_deviation,
            e.report.rankings_checked
        );
    }
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(dir)?;
        }
        write_json(out, &entries)?;
    }
    let worst = entries
        .iter()
        .map(|e| e.report.max_probability_deviation)
        .fold(0.0, f64::max);
    if !(worst <= a.tolerance) {
        bail!(
            "deviation {worst:.3e} exceeds tolerance {:.3e}",
            a.tolerance
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- plot-data

#[derive(Deserialize)]
struct AnyMetricRow {
    #[serde(default)]
    model: Option<String>,
    metric: String,
    k: Option<usize>,
    group: String,
    value: f64,
}

/// metric → series in first-seen order, and k → series → value.
type Pivot = BTreeMap<String, (Vec<String>, BTreeMap<Option<usize>, BTreeMap<String, f64>>)>;

pub fn plot_data(a: PlotDataArgs) -> Result<()> {
    let mut pivot: Pivot = BTreeMap::new();
    let several = a.input.len() > 1;
    for path in &a.input {
        let mut reader =
            csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let source = path
            .parent()
            .map(stem)
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| stem(path));
        for row in reader.deserialize::<AnyMetricRow>() {
            let row = row.with_context(|| format!("parsing {}", path.display()))?;
            let model = row.model.or_else(|| several.then(|| source.clone()));
            let series = match model {
                Some(m) if row.group == ALL => m,
                Some(m) => format!("{m}|{}", row.group),
                None => row.group,
            };
            let (order, by_k) = pivot.entry(row.metric).or_default();
            if !order.contains(&series) {
                order.push(series.clone());
            }
            by_k.entry(row.k).or_default().insert(series, row.value);
        }
    }
    ensure_dir(&a.out)?;
    let mut written = Vec::new();
    for (metric, (order, by_k)) in &pivot {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["k".to_string()];
        header.extend(order.iter().cloned());
        w.write_record(&header)?;
        for (k, values) in by_k {
            let mut record = vec![k.map(|k| k.to_string()).unwrap_or_else(|| "overall".into())];
            for s in order {
                record.push(values.get(s).map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&record)?;
        }
        let path: PathBuf = a.out.join(format!("{metric}.csv"));
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        write_text(&path, std::str::from_utf8(&bytes)?)?;
        written.push(path);
    }
    println!("wrote {} tables to {}", written.len(), a.out.display());
    Ok(())
}
