//! Regularized maximum-likelihood estimation: loss, objective, analytic
//! gradients, an Adam loop and k-fold cross-validation.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    explode_rankings, ChoiceDataset, Context, ContextPolicy, Covariates, ProgramCatalog,
    RankingDataset,
};
use crate::error::{Error, Result};
use crate::model::{
    draw_index, squash_derivative, ContextAggregation, FamilyKind, ModelParams, ParamLayout,
    Scratch,
};
use crate::stratified::{stratum_of, StratifiedParams};

/// Records per parallel work unit. Fixed so that reductions do not depend
/// on the number of worker threads.
pub const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BatchMode {
    Full,
    Mini { size: usize },
}

/// Optimizer and regularization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub l2: f64,
    pub laplacian: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub batch: BatchMode,
    pub seed: u64,
    pub rank: usize,
    pub strata: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_size: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2: 1e-5,
            laplacian: 1e-4,
            max_epochs: 1000,
            tolerance: 1e-4,
            batch: BatchMode::Full,
            seed: 0,
            rank: 10,
            strata: 1,
        }
    }
}

impl TrainConfig {
    /// Tuned defaults for a family: ten strata and a family-specific
    /// Laplacian gain.
    pub fn tuned(kind: FamilyKind) -> Self {
        TrainConfig {
            strata: 10,
            laplacian: match kind {
                FamilyKind::Fixed | FamilyKind::Linear => 1e-4,
                _ => 1e-3,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return bad("step_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decays must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.l2 >= 0.0) || !(self.laplacian >= 0.0) {
            return bad("regularization gains must be non-negative");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.strata == 0 {
            return bad("strata must be at least 1");
        }
        if let BatchMode::Mini { size: 0 } = self.batch {
            return bad("batch size must be positive");
        }
        Ok(())
    }
}

/// Which model to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: FamilyKind,
    pub policy: ContextPolicy,
    #[serde(default)]
    pub aggregation: ContextAggregation,
}

impl ModelSpec {
    pub fn new(kind: FamilyKind, policy: ContextPolicy) -> Self {
        ModelSpec {
            kind,
            policy,
            aggregation: ContextAggregation::Mean,
        }
    }
}

/// A fitted model: a single parameter set or one per rank stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "snake_case")]
pub enum Fitted {
    Single { params: ModelParams },
    Stratified { params: StratifiedParams },
}

impl From<ModelParams> for Fitted {
    fn from(params: ModelParams) -> Self {
        Fitted::Single { params }
    }
}

impl From<StratifiedParams> for Fitted {
    fn from(params: StratifiedParams) -> Self {
        Fitted::Stratified { params }
    }
}

impl Fitted {
    pub fn strata(&self) -> &[ModelParams] {
        match self {
            Fitted::Single { params } => std::slice::from_ref(params),
            Fitted::Stratified { params } => &params.strata,
        }
    }

    pub fn laplacian(&self) -> f64 {
        match self {
            Fitted::Single { .. } => 0.0,
            Fitted::Stratified { params } => params.laplacian,
        }
    }

    /// Parameters governing a choice at 1-based rank `rank_position`.
    pub fn for_rank(&self, rank_position: usize) -> &ModelParams {
        let s = self.strata();
        &s[stratum_of(rank_position, s.len()) - 1]
    }

    pub fn base(&self) -> &ModelParams {
        &self.strata()[0]
    }

    pub fn check(&self, catalog: &ProgramCatalog, d: usize) -> Result<()> {
        match self {
            Fitted::Single { params } => params.check(catalog, d),
            Fitted::Stratified { params } => params.check(catalog, d),
        }
    }

    pub fn to_vector(&self) -> Vec<f64> {
        self.strata().iter().flat_map(|s| s.to_vector()).collect()
    }

    pub fn with_vector(&self, v: &[f64]) -> Fitted {
        match self {
            Fitted::Single { params } => params.with_vector(v).into(),
            Fitted::Stratified { params } => params.with_vector(v).into(),
        }
    }

    /// Draws the first `k` entries of a ranking for `agent` by sequential
    /// sampling, each step governed by the stratum of its rank.
    pub fn sample_prefix<R: Rng + ?Sized>(
        &self,
        catalog: &ProgramCatalog,
        covariates: &Covariates,
        agent: usize,
        policy: ContextPolicy,
        k: usize,
        rng: &mut R,
    ) -> Vec<usize> {
        let x = covariates.agent_block(agent);
        let mut remaining: Vec<usize> = (0..catalog.m()).collect();
        let mut ranking = Vec::with_capacity(k);
        let (mut u, mut p) = (Vec::new(), Vec::new());
        while ranking.len() < k.min(catalog.m()) {
            let pos = ranking.len() + 1;
            let context = match policy.context_len(pos) {
                Some(l) => Context::Set(ranking[..l].to_vec()),
                None => Context::Forward,
            };
            self.for_rank(pos)
                .log_probs_into(catalog, x, &context, &remaining, &mut u, &mut p);
            p.iter_mut().for_each(|v| *v = v.exp());
            let pick = draw_index(&p, rng);
            ranking.push(remaining.remove(pick));
        }
        ranking
    }
}

/// Gradient laid out like [`ModelParams::to_vector`], one block per
/// stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layout: ParamLayout,
    pub strata: usize,
    pub values: Vec<f64>,
}

impl Gradient {
    /// Entries of the named block (see [`ParamLayout::blocks`]) of a
    /// 0-based stratum.
    pub fn block(&self, stratum: usize, name: &str) -> Option<&[f64]> {
        let p = self.layout.len();
        self.layout
            .blocks()
            .into_iter()
            .find(|(n, _, _)| *n == name)
            .map(|(_, a, b)| &self.values[stratum * p + a..stratum * p + b])
    }
}

/// Per-epoch progress of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub fitted: Fitted,
    /// Full-data objective at each evaluated iterate.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub epochs: usize,
    pub wall_time: Duration,
}

struct Job {
    stratum: usize,
    records: Vec<usize>,
}

fn make_jobs(data: &ChoiceDataset, records: &[usize], k: usize) -> Vec<Job> {
    let mut by_stratum: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &r in records {
        by_stratum[stratum_of(data.records[r].rank, k) - 1].push(r);
    }
    let mut jobs = Vec::new();
    for (stratum, recs) in by_stratum.into_iter().enumerate() {
        for chunk in recs.chunks(CHUNK) {
            jobs.push(Job {
                stratum,
                records: chunk.to_vec(),
            });
        }
    }
    jobs
}

/// Objective and gradient over optimizer coordinates of `k` strata.
struct Evaluator<'a> {
    data: &'a ChoiceDataset,
    templates: Vec<ModelParams>,
    layout: ParamLayout,
    p: usize,
    l2: f64,
    laplacian: f64,
    counts: Vec<usize>,
    full_jobs: Vec<Job>,
}

impl<'a> Evaluator<'a> {
    fn new(data: &'a ChoiceDataset, model: &Fitted, l2: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        model.check(&data.catalog, data.covariates.d())?;
        let templates = model.strata().to_vec();
        let k = templates.len();
        let layout = templates[0].layout(&data.catalog);
        let mut counts = vec![0usize; k];
        for rec in &data.records {
            counts[stratum_of(rec.rank, k) - 1] += 1;
        }
        let all: Vec<usize> = (0..data.len()).collect();
        let full_jobs = make_jobs(data, &all, k);
        Ok(Evaluator {
            data,
            p: layout.len(),
            layout,
            templates,
            l2,
            laplacian: model.laplacian(),
            counts,
            full_jobs,
        })
    }

    fn k(&self) -> usize {
        self.templates.len()
    }

    fn params_of(&self, v: &[f64]) -> Result<Vec<ModelParams>> {
        let params: Vec<ModelParams> = self
            .templates
            .iter()
            .zip(v.chunks(self.p.max(1)))
            .map(|(t, chunk)| t.with_vector(chunk))
            .collect();
        for p in &params {
            p.check(&self.data.catalog, self.data.covariates.d())?;
        }
        Ok(params)
    }

    /// Data term `Σ_k (1/denom_k) Σ_{r∈jobs, k(r)=k} −log p_r` plus penalties.
    /// With `smooth_only` the returned gradient omits the Laplacian term,
    /// which the optimizer handles through its proximal step.
    fn eval(
        &self,
        v: &[f64],
        jobs: &[Job],
        denom: &[f64],
        want_grad: bool,
        smooth_only: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let params = self.params_of(v)?;
        let data = self.data;
        let p = self.p;
        let layout = &self.layout;
        let partials: Vec<(usize, f64, Vec<f64>)> = jobs
            .par_iter()
            .map(|job| {
                let theta = &params[job.stratum];
                let mut sc = Scratch::default();
                let mut grad = if want_grad { vec![0.0; p] } else { Vec::new() };
                let mut loss = 0.0;
                for &r in &job.records {
                    let rec = &data.records[r];
                    let x = data.covariates.agent_block(rec.agent);
                    let lp = if want_grad {
                        theta.accumulate_record(
                            layout,
                            &data.catalog,
                            x,
                            rec,
                            1.0,
                            &mut grad,
                            &mut sc,
                        )
                    } else {
                        theta.record_log_prob(&data.catalog, x, rec, &mut sc)
                    };
                    loss -= lp;
                }
                (job.stratum, loss, grad)
            })
            .collect();

        let k = self.k();
        let mut loss_k = vec![0.0; k];
        let mut grad = if want_grad {
            vec![0.0; k * p]
        } else {
            Vec::new()
        };
        for (stratum, loss, g) in &partials {
            loss_k[*stratum] += loss;
            if want_grad {
                for (a, b) in grad[stratum * p..(stratum + 1) * p].iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        let mut f = 0.0;
        for s in 0..k {
            f += loss_k[s] / denom[s];
            if want_grad {
                grad[s * p..(s + 1) * p]
                    .iter_mut()
                    .for_each(|g| *g /= denom[s]);
            }
        }
        if want_grad && layout.kind == FamilyKind::Nested {
            let e = layout.extra_start();
            for s in 0..k {
                for i in s * p + e..(s + 1) * p {
                    grad[i] *= squash_derivative(v[i]);
                }
            }
        }

        f += self.l2 * v.iter().map(|x| x * x).sum::<f64>();
        if want_grad {
            for (g, x) in grad.iter_mut().zip(v) {
                *g += 2.0 * self.l2 * x;
            }
        }
        if self.laplacian > 0.0 && k > 1 {
            let mut lap = 0.0;
            for s in 1..k {
                for i in 0..p {
                    let diff = v[s * p + i] - v[(s - 1) * p + i];
                    lap += diff * diff;
                    if want_grad && !smooth_only {
                        grad[s * p + i] += 2.0 * self.laplacian * diff;
                        grad[(s - 1) * p + i] -= 2.0 * self.laplacian * diff;
                    }
                }
            }
            f += self.laplacian * lap;
        }
        Ok((f, want_grad.then_some(grad)))
    }

    fn full_denom(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c.max(1) as f64).collect()
    }

    fn full(&self, v: &[f64], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let denom = self.full_denom();
        self.eval(v, &self.full_jobs, &denom, want_grad, false)
    }
}

/// Log-probability of every record under `model`, in record order.
pub fn record_log_probs(model: &Fitted, choices: &ChoiceDataset) -> Result<Vec<f64>> {
    model.check(&choices.catalog, choices.covariates.d())?;
    let chunks: Vec<Vec<f64>> = choices
        .records
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sc = Scratch::default();
            chunk
                .iter()
                .map(|rec| {
                    let x = choices.covariates.agent_block(rec.agent);
                    model
                        .for_rank(rec.rank)
                        .record_log_prob(&choices.catalog, x, rec, &mut sc)
                })
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// Mean negative log-likelihood over records, each record scored by the
/// stratum of its rank.
pub fn fitted_nll(model: &Fitted, choices: &ChoiceDataset) -> Result<f64> {
    if choices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let lps = record_log_probs(model, choices)?;
    let total: f64 = lps
        .chunks(CHUNK)
        .map(|c| c.iter().fold(0.0, |acc, lp| acc - lp))
        .sum();
    Ok(total / choices.len() as f64)
}

/// `−(1/|D|) Σ log P(r | i, A, S)`.
pub fn nll(params: &ModelParams, choices: &ChoiceDataset) -> Result<f64> {
    fitted_nll(&Fitted::from(params.clone()), choices)
}

/// Mean negative log-likelihood plus `λ‖θ‖²`.
pub fn objective(
    params: &ModelParams,
    choices: &ChoiceDataset,
    config: &TrainConfig,
) -> Result<f64> {
    fitted_objective(&Fitted::from(params.clone()), choices, config.l2)
}

/// Analytic gradient of [`objective`] in optimizer coordinates.
pub fn gradient(
    params: &ModelParams,
    choices: &ChoiceDataset,
    config: &TrainConfig,
) -> Result<Gradient> {
    fitted_gradient(&Fitted::from(params.clone()), choices, config.l2)
}

/// `Σ_k [ℓ(D_k; θ_k) + λ‖θ_k‖²] + λ_ℒ Σ_k ‖θ_k − θ_{k−1}‖²`, each stratum
/// loss averaged over its own records (empty strata contribute zero).
pub fn stratified_objective(
    params: &StratifiedParams,
    choices: &ChoiceDataset,
    config: &TrainConfig,
) -> Result<f64> {
    fitted_objective(&Fitted::from(params.clone()), choices, config.l2)
}

pub fn stratified_gradient(
    params: &StratifiedParams,
    choices: &ChoiceDataset,
    config: &TrainConfig,
) -> Result<Gradient> {
    fitted_gradient(&Fitted::from(params.clone()), choices, config.l2)
}

pub fn fitted_objective(model: &Fitted, choices: &ChoiceDataset, l2: f64) -> Result<f64> {
    let ev = Evaluator::new(choices, model, l2)?;
    Ok(ev.full(&model.to_vector(), false)?.0)
}

pub fn fitted_gradient(model: &Fitted, choices: &ChoiceDataset, l2: f64) -> Result<Gradient> {
    let ev = Evaluator::new(choices, model, l2)?;
    let (_, g) = ev.full(&model.to_vector(), true)?;
    Ok(Gradient {
        layout: ev.layout,
        strata: ev.k(),
        values: g.expect("gradient requested"),
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, config: &TrainConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: config.step_size,
            b1: config.beta1,
            b2: config.beta2,
            eps: config.epsilon,
        }
    }

    /// One update. `g` excludes the Laplacian term; when `laplacian > 0`
    /// and there are several strata (`x` holds `strata` blocks) the update
    /// ends with the exact proximal map of that term under Adam's
    /// per-coordinate step sizes.
    fn step(&mut self, x: &mut [f64], g: &[f64], strata: usize, laplacian: f64) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        let prox = laplacian > 0.0 && strata > 1;
        let mut rates = if prox { vec![0.0; x.len()] } else { Vec::new() };
        for i in 0..x.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            let rate = self.lr / (vh.sqrt() + self.eps);
            x[i] -= rate * mh;
            if prox {
                rates[i] = rate;
            }
        }
        if prox {
            chain_prox(x, &rates, strata, laplacian);
        }
    }
}

/// Solves `argmin_θ Σ_k (θ_k − y_k)²/(2 a_k) + λ Σ_k (θ_k − θ_{k−1})²`
/// coordinate by coordinate across strata, in place (`x` holds `y`).
fn chain_prox(x: &mut [f64], rates: &[f64], strata: usize, laplacian: f64) {
    let p = x.len() / strata;
    let mut upper = vec![0.0; strata];
    let mut rhs = vec![0.0; strata];
    for i in 0..p {
        // Row k: −c_k θ_{k−1} + (1 + c_k deg_k) θ_k − c_k θ_{k+1} = y_k,
        // c_k = 2 λ a_k. Thomas elimination.
        for k in 0..strata {
            let c = 2.0 * laplacian * rates[k * p + i];
            let deg = if k == 0 || k + 1 == strata { 1.0 } else { 2.0 };
            let lower = if k > 0 { -c } else { 0.0 };
            let up = if k + 1 < strata { -c } else { 0.0 };
            let mut diag = 1.0 + c * deg;
            let mut y = x[k * p + i];
            if k > 0 {
                diag -= lower * upper[k - 1];
                y -= lower * rhs[k - 1];
            }
            upper[k] = up / diag;
            rhs[k] = y / diag;
        }
        for k in (0..strata).rev() {
            let next = if k + 1 < strata {
                x[(k + 1) * p + i]
            } else {
                0.0
            };
            x[k * p + i] = rhs[k] - upper[k] * next;
        }
    }
}

/// Initial parameters for `spec` under `config` (strata replicated).
pub fn initial_model(spec: &ModelSpec, dataset: &RankingDataset, config: &TrainConfig) -> Fitted {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut base = ModelParams::initial(
        spec.kind,
        &dataset.catalog,
        dataset.d(),
        config.rank,
        spec.policy,
        &mut rng,
    );
    base.set_aggregation(spec.aggregation);
    if config.strata > 1 {
        StratifiedParams::replicate(&base, config.strata, config.laplacian).into()
    } else {
        base.into()
    }
}

/// Fits `spec` to `train` from the default initialization.
pub fn fit(spec: &ModelSpec, train: &RankingDataset, config: &TrainConfig) -> Result<FitResult> {
    config.validate()?;
    if spec.kind == FamilyKind::Cdm && config.rank == 0 {
        return Err(Error::Config("low-rank CDM needs rank ≥ 1".into()));
    }
    if train.n() == 0 {
        return Err(Error::EmptyDataset);
    }
    let choices = explode_rankings(train, spec.policy)?;
    let init = initial_model(spec, train, config);
    fit_from(init, &choices, config)
}

/// Runs the optimizer from `initial` on exploded choices. The Laplacian
/// gain is taken from `initial`.
pub fn fit_from(
    initial: Fitted,
    choices: &ChoiceDataset,
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    if let Some(policy) = initial.base().policy() {
        if policy != choices.policy {
            return Err(Error::Config(format!(
                "model policy {policy} does not match data policy {}",
                choices.policy
            )));
        }
    }
    let start = Instant::now();
    let ev = Evaluator::new(choices, &initial, config.l2)?;
    let mut x = initial.to_vector();
    let mut adam = Adam::new(x.len(), config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..choices.len()).collect();
    let mut trace = Vec::new();
    let mut converged = false;

    for epoch in 0..config.max_epochs {
        let full_batch = matches!(config.batch, BatchMode::Full);
        let (f, g) = ev
            .eval(&x, &ev.full_jobs, &ev.full_denom(), full_batch, true)
            .map_err(|e| match e {
                Error::NestScale { .. } => Error::Diverged { epoch },
                other => other,
            })?;
        if !f.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if (f - prev).abs() < config.tolerance {
                trace.push(f);
                converged = true;
                break;
            }
        }
        trace.push(f);
        if epoch + 1 == config.max_epochs {
            break;
        }
        match config.batch {
            BatchMode::Full => {
                let g = g.expect("gradient requested");
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged { epoch });
                }
                adam.step(&mut x, &g, ev.k(), ev.laplacian);
            }
            BatchMode::Mini { size } => {
                order.shuffle(&mut rng);
                let base = ev.full_denom();
                for batch in order.chunks(size) {
                    let jobs = make_jobs(choices, batch, ev.k());
                    let scale = batch.len() as f64 / choices.len() as f64;
                    let denom: Vec<f64> = base.iter().map(|b| b * scale).collect();
                    let (_, g) = ev.eval(&x, &jobs, &denom, true, true)?;
                    let g = g.expect("gradient requested");
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Diverged { epoch });
                    }
                    adam.step(&mut x, &g, ev.k(), ev.laplacian);
                }
            }
        }
    }
    Ok(FitResult {
        fitted: initial.with_vector(&x),
        epochs: trace.len(),
        trace,
        converged,
        wall_time: start.elapsed(),
    })
}

/// Low-rank CDM initialized at a fitted linear model: fixed effects and β
/// copied, target embeddings random, context embeddings zero, so the
/// starting probabilities equal the linear model's.
pub fn warm_start_cdm(
    linear: &ModelParams,
    catalog: &crate::ProgramCatalog,
    rank: usize,
    policy: ContextPolicy,
    seed: u64,
) -> Result<ModelParams> {
    if linear.kind() != FamilyKind::Linear {
        return Err(Error::Unsupported("warm start needs a linear model".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cdm =
        ModelParams::initial(FamilyKind::Cdm, catalog, linear.d(), rank, policy, &mut rng);
    cdm.delta_school = linear.delta_school.clone();
    cdm.delta_ptype = linear.delta_ptype.clone();
    cdm.beta = linear.beta.clone();
    if let crate::Family::CdmLowRank { context, .. } = &mut cdm.family {
        context.fill(0.0);
    }
    Ok(cdm)
}

/// One hyperparameter combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub l2: f64,
    /// Embedding rank; 0 selects the linear model.
    pub rank: usize,
    pub strata: usize,
    pub laplacian: f64,
}

impl GridPoint {
    fn lexicographic(&self, other: &GridPoint) -> Ordering {
        self.l2
            .total_cmp(&other.l2)
            .then(self.rank.cmp(&other.rank))
            .then(self.strata.cmp(&other.strata))
            .then(self.laplacian.total_cmp(&other.laplacian))
    }

    fn apply(&self, spec: &ModelSpec, config: &TrainConfig) -> (ModelSpec, TrainConfig) {
        let mut spec = *spec;
        if spec.kind == FamilyKind::Cdm && self.rank == 0 {
            spec.kind = FamilyKind::Linear;
        }
        let config = TrainConfig {
            l2: self.l2,
            rank: self.rank,
            strata: self.strata,
            laplacian: self.laplacian,
            ..config.clone()
        };
        (spec, config)
    }
}

/// Values to search for each hyperparameter; the grid is their product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub l2: Vec<f64>,
    pub rank: Vec<usize>,
    pub strata: Vec<usize>,
    pub laplacian: Vec<f64>,
}

impl Grid {
    /// Single-point grid at the values in `config`.
    pub fn point(config: &TrainConfig) -> Self {
        Grid {
            l2: vec![config.l2],
            rank: vec![config.rank],
            strata: vec![config.strata],
            laplacian: vec![config.laplacian],
        }
    }

    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &l2 in &self.l2 {
            for &rank in &self.rank {
                for &strata in &self.strata {
                    for &laplacian in &self.laplacian {
                        out.push(GridPoint {
                            l2,
                            rank,
                            strata,
                            laplacian,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Validation results of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub point: GridPoint,
    pub fold_nll: Vec<f64>,
    pub mean_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best: GridPoint,
    pub best_config: TrainConfig,
    pub cells: Vec<CvCell>,
}

impl CvResult {
    /// Mean validation nll over strata × Laplacian gain, other values
    /// held at the best cell.
    pub fn heat_map(&self) -> Vec<(usize, f64, f64)> {
        self.cells
            .iter()
            .filter(|c| c.point.l2 == self.best.l2 && c.point.rank == self.best.rank)
            .map(|c| (c.point.strata, c.point.laplacian, c.mean_nll))
            .collect()
    }

    /// Validation curve over `l2` with other values held at the best cell.
    pub fn l2_curve(&self) -> Vec<(f64, f64)> {
        self.cells
            .iter()
            .filter(|c| {
                c.point.rank == self.best.rank
                    && c.point.strata == self.best.strata
                    && c.point.laplacian == self.best.laplacian
            })
            .map(|c| (c.point.l2, c.mean_nll))
            .collect()
    }

    /// Validation curve over the embedding rank.
    pub fn rank_curve(&self) -> Vec<(usize, f64)> {
        self.cells
            .iter()
            .filter(|c| {
                c.point.l2 == self.best.l2
                    && c.point.strata == self.best.strata
                    && c.point.laplacian == self.best.laplacian
            })
            .map(|c| (c.point.rank, c.mean_nll))
            .collect()
    }
}

/// Partitions agents `0..n` into `folds` groups by a seeded shuffle.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    order.shuffle(&mut rng);
    let mut out = vec![Vec::new(); folds];
    for (pos, agent) in order.into_iter().enumerate() {
        out[pos % folds].push(agent);
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    out
}

/// k-fold cross-validation over `grid`, folding agents (not records).
pub fn cross_validate(
    spec: &ModelSpec,
    dataset: &RankingDataset,
    grid: &Grid,
    folds: usize,
    config: &TrainConfig,
) -> Result<CvResult> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    if folds < 2 || dataset.n() < folds {
        return Err(Error::Config(format!(
            "{folds} folds need at least {folds} agents and 2 folds"
        )));
    }
    let assignment = fold_assignment(dataset.n(), folds, config.seed);
    let splits: Vec<(RankingDataset, RankingDataset)> = (0..folds)
        .map(|f| {
            let train: Vec<usize> = (0..folds)
                .filter(|&g| g != f)
                .flat_map(|g| assignment[g].iter().copied())
                .collect();
            let mut train = train;
            train.sort_unstable();
            (dataset.subset(&train), dataset.subset(&assignment[f]))
        })
        .collect();

    let tasks: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|c| (0..folds).map(move |f| (c, f)))
        .collect();
    let scores: Vec<Result<f64>> = tasks
        .par_iter()
        .map(|&(c, f)| {
            let (spec, cfg) = points[c].apply(spec, config);
            let (train, valid) = &splits[f];
            let result = fit(&spec, train, &cfg)?;
            let valid = explode_rankings(valid, spec.policy)?;
            fitted_nll(&result.fitted, &valid)
        })
        .collect();

    let mut cells = Vec::with_capacity(points.len());
    let mut it = scores.into_iter();
    for point in points {
        let fold_nll = (0..folds)
            .map(|_| it.next().expect("one score per task"))
            .collect::<Result<Vec<f64>>>()?;
        let mean_nll = fold_nll.iter().sum::<f64>() / folds as f64;
        cells.push(CvCell {
            point,
            fold_nll,
            mean_nll,
        });
    }
    let best = cells
        .iter()
        .min_by(|a, b| {
            a.mean_nll
                .total_cmp(&b.mean_nll)
                .then(a.point.lexicographic(&b.point))
        })
        .expect("non-empty grid")
        .point;
    let (_, best_config) = best.apply(spec, config);
    Ok(CvResult {
        best,
        best_config,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Covariates, ProgramCatalog};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    #[test]
    fn chain_prox_satisfies_stationarity() {
        let (strata, p) = (4, 3);
        let y: Vec<f64> = (0..strata * p)
            .map(|i| ((i * 7 % 5) as f64) - 2.0)
            .collect();
        let rates: Vec<f64> = (0..strata * p).map(|i| 0.01 + 0.003 * i as f64).collect();
        for lambda in [0.5, 1e6] {
            let mut x = y.clone();
            chain_prox(&mut x, &rates, strata, lambda);
            for i in 0..p {
                for k in 0..strata {
                    let at = |k: usize| x[k * p + i];
                    let mut g = (at(k) - y[k * p + i]) / rates[k * p + i];
                    if k > 0 {
                        g += 2.0 * lambda * (at(k) - at(k - 1));
                    }
                    if k + 1 < strata {
                        g -= 2.0 * lambda * (at(k + 1) - at(k));
                    }
                    assert!(g.abs() < 1e-6, "λ={lambda} k={k} i={i} residual {g}");
                }
            }
        }
    }

    fn uniform_dataset() -> RankingDataset {
        let cat = Arc::new(ProgramCatalog::simple(4));
        RankingDataset::new(
            cat,
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![0], vec![1], vec![2]],
            Arc::new(Covariates::zeros(3, 4, vec![])),
            vec![BTreeMap::new(); 3],
        )
        .unwrap()
    }

    #[test]
    fn uniform_nll_is_log_m() {
        let ds = uniform_dataset();
        let choices = explode_rankings(&ds, ContextPolicy::Backward).unwrap();
        let p = ModelParams::zeros(
            FamilyKind::Fixed,
            &ds.catalog,
            0,
            0,
            ContextPolicy::Backward,
        );
        assert!((nll(&p, &choices).unwrap() - 4f64.ln()).abs() < 1e-15);
        let cfg = TrainConfig {
            l2: 0.0,
            ..TrainConfig::default()
        };
        assert_eq!(
            objective(&p, &choices, &cfg).unwrap(),
            nll(&p, &choices).unwrap()
        );
    }

    #[test]
    fn squared_penalty() {
        let ds = uniform_dataset();
        let choices = explode_rankings(&ds, ContextPolicy::Backward).unwrap();
        let mut p = ModelParams::zeros(
            FamilyKind::Fixed,
            &ds.catalog,
            0,
            0,
            ContextPolicy::Backward,
        );
        let base = nll(&p, &choices).unwrap();
        p.delta_ptype[0] = 2.0;
        let cfg = TrainConfig {
            l2: 1.0,
            ..TrainConfig::default()
        };
        // A shared program-type shift leaves probabilities unchanged.
        assert!((objective(&p, &choices, &cfg).unwrap() - (base + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = uniform_dataset();
        let mut choices = explode_rankings(&ds, ContextPolicy::Backward).unwrap();
        choices.records.clear();
        let p = ModelParams::zeros(
            FamilyKind::Fixed,
            &ds.catalog,
            0,
            0,
            ContextPolicy::Backward,
        );
        assert!(matches!(nll(&p, &choices), Err(Error::EmptyDataset)));
    }

    #[test]
    fn folds_partition_agents() {
        let folds = fold_assignment(23, 5, 7);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.len() == 4 || f.len() == 5));
        assert_eq!(folds, fold_assignment(23, 5, 7));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            l2: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let tuned = TrainConfig::tuned(FamilyKind::Cdm);
        assert_eq!((tuned.strata, tuned.laplacian, tuned.rank), (10, 1e-3, 10));
    }
}
