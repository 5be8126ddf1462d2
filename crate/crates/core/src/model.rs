//! Representative utilities, choice probabilities and ranking likelihoods
//! for every model family.
//!
//! All families share the decomposed fixed effect `δ_school[s(j)] +
//! δ_ptype[p(j)]`; all but the fixed-effect family add a covariate term
//! `βᵀx_ij`. Context-dependent families add an averaged (or summed)
//! interaction with the resolved context set, and the nested family
//! reshapes probabilities through per-nest scales.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    explode_ranking, ChoiceRecord, Context, ContextPolicy, Covariates, ProgramCatalog,
};
use crate::error::{Error, Result};

/// How interactions with the context set are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextAggregation {
    /// `(1/|A|) Σ_{k∈A}`, zero for an empty context.
    #[default]
    Mean,
    /// `Σ_{k∈A}` without normalization. Forward and backward models are
    /// related by an exact reparameterization only under this aggregation.
    Sum,
}

/// Family-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    FixedEffect,
    Linear,
    /// Context effects `u_jk = t_jᵀ c_k`; `target` and `context` are `m × r`.
    CdmLowRank {
        target: Array2<f64>,
        context: Array2<f64>,
        policy: ContextPolicy,
        #[serde(default)]
        aggregation: ContextAggregation,
    },
    /// Unfactorized `m × m` interactions; the diagonal is never read.
    CdmFull {
        interactions: Array2<f64>,
        policy: ContextPolicy,
        #[serde(default)]
        aggregation: ContextAggregation,
    },
    /// Per-nest scales in `(0, 1]`.
    Nested {
        scales: Vec<f64>,
    },
}

/// Family tag without parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    Fixed,
    Linear,
    Cdm,
    CdmFull,
    Nested,
}

impl FamilyKind {
    pub fn uses_covariates(self) -> bool {
        !matches!(self, FamilyKind::Fixed)
    }

    pub fn is_cdm(self) -> bool {
        matches!(self, FamilyKind::Cdm | FamilyKind::CdmFull)
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FamilyKind::Fixed => "fixed",
            FamilyKind::Linear => "linear",
            FamilyKind::Cdm => "cdm",
            FamilyKind::CdmFull => "cdm-full",
            FamilyKind::Nested => "nested",
        };
        f.write_str(s)
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(FamilyKind::Fixed),
            "linear" => Ok(FamilyKind::Linear),
            "cdm" => Ok(FamilyKind::Cdm),
            "cdm-full" => Ok(FamilyKind::CdmFull),
            "nested" => Ok(FamilyKind::Nested),
            _ => Err(Error::Config(format!("unknown model family {s:?}"))),
        }
    }
}

/// Parameters of one choice model bound to a catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub delta_school: Vec<f64>,
    pub delta_ptype: Vec<f64>,
    /// Covariate weights; empty for the fixed-effect family.
    pub beta: Vec<f64>,
    /// Per-alternative additive offsets produced by the forward/backward
    /// maps. Empty when absent. Not trained.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offset: Vec<f64>,
    #[serde(flatten)]
    pub family: Family,
}

/// Maps an unconstrained value to a nest scale in `(0, 1]`.
#[inline]
pub fn squash(eta: f64) -> f64 {
    (-eta * eta).exp()
}

/// Derivative of [`squash`].
#[inline]
pub fn squash_derivative(eta: f64) -> f64 {
    -2.0 * eta * squash(eta)
}

/// Non-negative preimage of a nest scale under [`squash`].
#[inline]
pub fn unsquash(scale: f64) -> f64 {
    (-scale.ln()).max(0.0).sqrt()
}

/// Block offsets of the flat (optimizer) parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_schools: usize,
    pub n_ptypes: usize,
    pub d: usize,
    pub m: usize,
    pub rank: usize,
    pub kind: FamilyKind,
    pub n_nests: usize,
}

impl ParamLayout {
    pub fn ptype_start(&self) -> usize {
        self.n_schools
    }

    pub fn beta_start(&self) -> usize {
        self.n_schools + self.n_ptypes
    }

    pub fn extra_start(&self) -> usize {
        self.beta_start() + self.d
    }

    /// Start of the context-embedding block of a low-rank model.
    pub fn context_start(&self) -> usize {
        self.extra_start() + self.m * self.rank
    }

    pub fn len(&self) -> usize {
        self.extra_start()
            + match self.kind {
                FamilyKind::Fixed | FamilyKind::Linear => 0,
                FamilyKind::Cdm => 2 * self.m * self.rank,
                FamilyKind::CdmFull => self.m * (self.m - 1),
                FamilyKind::Nested => self.n_nests,
            }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of the off-diagonal interaction `u_{row,col}`.
    #[inline]
    pub fn interaction_index(&self, row: usize, col: usize) -> usize {
        debug_assert_ne!(row, col);
        let c = if col < row { col } else { col - 1 };
        self.extra_start() + row * (self.m - 1) + c
    }

    /// Named blocks `(name, start, end)` of the flat vector.
    pub fn blocks(&self) -> Vec<(&'static str, usize, usize)> {
        let mut blocks = vec![
            ("delta_school", 0, self.n_schools),
            ("delta_ptype", self.n_schools, self.beta_start()),
        ];
        if self.d > 0 {
            blocks.push(("beta", self.beta_start(), self.extra_start()));
        }
        let e = self.extra_start();
        match self.kind {
            FamilyKind::Cdm => {
                blocks.push(("target", e, self.context_start()));
                blocks.push(("context", self.context_start(), self.len()));
            }
            FamilyKind::CdmFull => blocks.push(("interactions", e, self.len())),
            FamilyKind::Nested => blocks.push(("nest_eta", e, self.len())),
            _ => {}
        }
        blocks
    }
}

impl ModelParams {
    /// All-zero parameters (nest scales at 1). Low-rank embeddings get
    /// `rank` columns of zeros.
    pub fn zeros(
        kind: FamilyKind,
        catalog: &ProgramCatalog,
        d: usize,
        rank: usize,
        policy: ContextPolicy,
    ) -> Self {
        let m = catalog.m();
        let family = match kind {
            FamilyKind::Fixed => Family::FixedEffect,
            FamilyKind::Linear => Family::Linear,
            FamilyKind::Cdm => Family::CdmLowRank {
                target: Array2::zeros((m, rank)),
                context: Array2::zeros((m, rank)),
                policy,
                aggregation: ContextAggregation::Mean,
            },
            FamilyKind::CdmFull => Family::CdmFull {
                interactions: Array2::zeros((m, m)),
                policy,
                aggregation: ContextAggregation::Mean,
            },
            FamilyKind::Nested => Family::Nested {
                scales: vec![1.0; catalog.n_nests()],
            },
        };
        ModelParams {
            delta_school: vec![0.0; catalog.n_schools()],
            delta_ptype: vec![0.0; catalog.n_ptypes()],
            beta: if kind.uses_covariates() {
                vec![0.0; d]
            } else {
                Vec::new()
            },
            offset: Vec::new(),
            family,
        }
    }

    /// Training initialization: fixed effects and β at zero, embeddings
    /// uniform in `±0.1/√r`, nest scales at 0.5.
    pub fn initial<R: Rng + ?Sized>(
        kind: FamilyKind,
        catalog: &ProgramCatalog,
        d: usize,
        rank: usize,
        policy: ContextPolicy,
        rng: &mut R,
    ) -> Self {
        let mut params = Self::zeros(kind, catalog, d, rank, policy);
        match &mut params.family {
            Family::CdmLowRank {
                target, context, ..
            } => {
                let bound = 0.1 / (rank.max(1) as f64).sqrt();
                target.mapv_inplace(|_| rng.random_range(-bound..=bound));
                context.mapv_inplace(|_| rng.random_range(-bound..=bound));
            }
            Family::Nested { scales } => scales.iter_mut().for_each(|s| *s = 0.5),
            _ => {}
        }
        params
    }

    pub fn kind(&self) -> FamilyKind {
        match self.family {
            Family::FixedEffect => FamilyKind::Fixed,
            Family::Linear => FamilyKind::Linear,
            Family::CdmLowRank { .. } => FamilyKind::Cdm,
            Family::CdmFull { .. } => FamilyKind::CdmFull,
            Family::Nested { .. } => FamilyKind::Nested,
        }
    }

    /// Context policy of a context-dependent model.
    pub fn policy(&self) -> Option<ContextPolicy> {
        match &self.family {
            Family::CdmLowRank { policy, .. } | Family::CdmFull { policy, .. } => Some(*policy),
            _ => None,
        }
    }

    pub fn set_policy(&mut self, new: ContextPolicy) {
        if let Family::CdmLowRank { policy, .. } | Family::CdmFull { policy, .. } = &mut self.family
        {
            *policy = new;
        }
    }

    pub fn aggregation(&self) -> Option<ContextAggregation> {
        match &self.family {
            Family::CdmLowRank { aggregation, .. } | Family::CdmFull { aggregation, .. } => {
                Some(*aggregation)
            }
            _ => None,
        }
    }

    pub fn set_aggregation(&mut self, new: ContextAggregation) {
        if let Family::CdmLowRank { aggregation, .. } | Family::CdmFull { aggregation, .. } =
            &mut self.family
        {
            *aggregation = new;
        }
    }

    /// Embedding rank of a low-rank model, zero otherwise.
    pub fn rank(&self) -> usize {
        match &self.family {
            Family::CdmLowRank { target, .. } => target.ncols(),
            _ => 0,
        }
    }

    pub fn d(&self) -> usize {
        self.beta.len()
    }

    /// Checks dimensions against a catalog and covariate width.
    pub fn check(&self, catalog: &ProgramCatalog, d: usize) -> Result<()> {
        let m = catalog.m();
        let dim = |what: String| Err(Error::Dimension(what));
        if self.delta_school.len() != catalog.n_schools() {
            return dim(format!(
                "{} school effects for {} schools",
                self.delta_school.len(),
                catalog.n_schools()
            ));
        }
        if self.delta_ptype.len() != catalog.n_ptypes() {
            return dim(format!(
                "{} program-type effects for {} program types",
                self.delta_ptype.len(),
                catalog.n_ptypes()
            ));
        }
        let expected_beta = if self.kind().uses_covariates() { d } else { 0 };
        if self.beta.len() != expected_beta {
            return dim(format!(
                "beta has {} entries, expected {expected_beta}",
                self.beta.len()
            ));
        }
        if !self.offset.is_empty() && self.offset.len() != m {
            return dim(format!(
                "offset has {} entries for m = {m}",
                self.offset.len()
            ));
        }
        match &self.family {
            Family::CdmLowRank {
                target, context, ..
            } => {
                if target.nrows() != m || context.nrows() != m || target.ncols() != context.ncols()
                {
                    return dim(format!(
                        "embeddings {:?} and {:?} do not match m = {m}",
                        target.dim(),
                        context.dim()
                    ));
                }
                if target.ncols() == 0 {
                    return dim("embedding rank must be at least 1".into());
                }
            }
            Family::CdmFull { interactions, .. } => {
                if interactions.dim() != (m, m) {
                    return dim(format!("interactions {:?} for m = {m}", interactions.dim()));
                }
            }
            Family::Nested { scales } => {
                if scales.len() != catalog.n_nests() {
                    return dim(format!(
                        "{} nest scales for {} nests",
                        scales.len(),
                        catalog.n_nests()
                    ));
                }
                for (nest, &value) in scales.iter().enumerate() {
                    if !(value > 0.0 && value <= 1.0) {
                        return Err(Error::NestScale { nest, value });
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn layout(&self, catalog: &ProgramCatalog) -> ParamLayout {
        ParamLayout {
            n_schools: self.delta_school.len(),
            n_ptypes: self.delta_ptype.len(),
            d: self.beta.len(),
            m: catalog.m(),
            rank: self.rank(),
            kind: self.kind(),
            n_nests: match &self.family {
                Family::Nested { scales } => scales.len(),
                _ => 0,
            },
        }
    }

    /// Flattens trainable parameters into optimizer coordinates. Nest
    /// scales appear through their unconstrained preimage; offsets and the
    /// interaction diagonal are excluded.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(&self.delta_school);
        v.extend_from_slice(&self.delta_ptype);
        v.extend_from_slice(&self.beta);
        match &self.family {
            Family::CdmLowRank {
                target, context, ..
            } => {
                v.extend(target.iter());
                v.extend(context.iter());
            }
            Family::CdmFull { interactions, .. } => {
                let m = interactions.nrows();
                for k in 0..m {
                    for l in 0..m {
                        if k != l {
                            v.push(interactions[[k, l]]);
                        }
                    }
                }
            }
            Family::Nested { scales } => v.extend(scales.iter().map(|&s| unsquash(s))),
            _ => {}
        }
        v
    }

    /// Inverse of [`ModelParams::to_vector`], using `self` as the shape
    /// template.
    pub fn with_vector(&self, v: &[f64]) -> ModelParams {
        let mut out = self.clone();
        out.assign_vector(v);
        out
    }

    pub fn assign_vector(&mut self, v: &[f64]) {
        let mut it = v.iter().copied();
        for x in self
            .delta_school
            .iter_mut()
            .chain(self.delta_ptype.iter_mut())
            .chain(self.beta.iter_mut())
        {
            *x = it.next().expect("vector too short");
        }
        match &mut self.family {
            Family::CdmLowRank {
                target, context, ..
            } => {
                for x in target.iter_mut().chain(context.iter_mut()) {
                    *x = it.next().expect("vector too short");
                }
            }
            Family::CdmFull { interactions, .. } => {
                let m = interactions.nrows();
                for k in 0..m {
                    for l in 0..m {
                        if k != l {
                            interactions[[k, l]] = it.next().expect("vector too short");
                        }
                    }
                }
            }
            Family::Nested { scales } => {
                for s in scales.iter_mut() {
                    *s = squash(it.next().expect("vector too short"));
                }
            }
            _ => {}
        }
        debug_assert!(it.next().is_none(), "vector too long");
    }

    /// Per-alternative fixed effect `δ_s(j) + δ_p(j)` plus any offset.
    #[inline]
    pub fn fixed_effect(&self, catalog: &ProgramCatalog, j: usize) -> f64 {
        let base = self.delta_school[catalog.school_of[j]] + self.delta_ptype[catalog.ptype_of[j]];
        if self.offset.is_empty() {
            base
        } else {
            base + self.offset[j]
        }
    }

    /// Context-free part of the utility: fixed effect plus `βᵀx`.
    #[inline]
    fn base_utility(&self, catalog: &ProgramCatalog, x: &[f64], j: usize) -> f64 {
        let mut v = self.fixed_effect(catalog, j);
        if !self.beta.is_empty() {
            let d = self.beta.len();
            let row = &x[j * d..(j + 1) * d];
            v += dot(&self.beta, row);
        }
        v
    }

    /// Representative utilities of every alternative in `choice_set`.
    /// `x` is the agent's `m × d` covariate block.
    pub(crate) fn utilities_into(
        &self,
        catalog: &ProgramCatalog,
        x: &[f64],
        context: &Context,
        choice_set: &[usize],
        out: &mut Vec<f64>,
    ) {
        out.clear();
        out.extend(choice_set.iter().map(|&j| self.base_utility(catalog, x, j)));
        match &self.family {
            Family::CdmLowRank {
                target,
                context: ctx_emb,
                aggregation,
                ..
            } => {
                let r = target.ncols();
                match context {
                    Context::Set(a) => {
                        if a.is_empty() {
                            return;
                        }
                        let scale = aggregation_scale(*aggregation, a.len());
                        let mut cbar = vec![0.0; r];
                        for &l in a {
                            for (c, e) in cbar.iter_mut().zip(ctx_emb.row(l)) {
                                *c += e;
                            }
                        }
                        cbar.iter_mut().for_each(|c| *c *= scale);
                        for (u, &j) in out.iter_mut().zip(choice_set) {
                            *u += dot_row(target.row(j), &cbar);
                        }
                    }
                    Context::Forward => {
                        if choice_set.len() < 2 {
                            return;
                        }
                        let scale = aggregation_scale(*aggregation, choice_set.len() - 1);
                        let mut csum = vec![0.0; r];
                        for &l in choice_set {
                            for (c, e) in csum.iter_mut().zip(ctx_emb.row(l)) {
                                *c += e;
                            }
                        }
                        for (u, &j) in out.iter_mut().zip(choice_set) {
                            let t = target.row(j);
                            let c = ctx_emb.row(j);
                            let mut s = 0.0;
                            for q in 0..r {
                                s += t[q] * (csum[q] - c[q]);
                            }
                            *u += scale * s;
                        }
                    }
                }
            }
            Family::CdmFull {
                interactions,
                aggregation,
                ..
            } => {
                let (others, count): (&[usize], usize) = match context {
                    Context::Set(a) => (a.as_slice(), a.len()),
                    Context::Forward => (choice_set, choice_set.len().saturating_sub(1)),
                };
                if count == 0 {
                    return;
                }
                let scale = aggregation_scale(*aggregation, count);
                for (u, &j) in out.iter_mut().zip(choice_set) {
                    let row = interactions.row(j);
                    let s: f64 = others.iter().filter(|&&l| l != j).map(|&l| row[l]).sum();
                    *u += scale * s;
                }
            }
            _ => {}
        }
    }

    /// Log choice probabilities over `choice_set`, in `choice_set` order.
    pub(crate) fn log_probs_into(
        &self,
        catalog: &ProgramCatalog,
        x: &[f64],
        context: &Context,
        choice_set: &[usize],
        utilities: &mut Vec<f64>,
        out: &mut Vec<f64>,
    ) {
        self.utilities_into(catalog, x, context, choice_set, utilities);
        out.clear();
        match &self.family {
            Family::Nested { scales } => {
                let nests = NestedTerms::new(catalog, scales, choice_set, utilities);
                out.extend(choice_set.iter().zip(utilities.iter()).map(|(&j, &v)| {
                    let b = catalog.nest_of[j];
                    let lam = scales[b];
                    v / lam - nests.inclusive[b] * (1.0 - lam) - nests.log_total
                }));
            }
            _ => {
                let lse = log_sum_exp(utilities);
                out.extend(utilities.iter().map(|&v| v - lse));
            }
        }
    }
}

#[inline]
fn aggregation_scale(aggregation: ContextAggregation, count: usize) -> f64 {
    match aggregation {
        ContextAggregation::Mean => 1.0 / count as f64,
        ContextAggregation::Sum => 1.0,
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn dot_row(row: ndarray::ArrayView1<'_, f64>, v: &[f64]) -> f64 {
    row.iter().zip(v).map(|(x, y)| x * y).sum()
}

/// Numerically stable `log Σ exp(v)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-nest quantities of the nested logit restricted to a choice set.
pub(crate) struct NestedTerms {
    /// `log Σ_{k∈B_ℓ∩S} exp(V_k/λ_ℓ)`, NaN for nests missing from S.
    pub inclusive: Vec<f64>,
    /// `log Σ_ℓ exp(λ_ℓ · inclusive_ℓ)` over nests present in S.
    pub log_total: f64,
}

impl NestedTerms {
    pub fn new(
        catalog: &ProgramCatalog,
        scales: &[f64],
        choice_set: &[usize],
        utilities: &[f64],
    ) -> Self {
        let k = scales.len();
        let mut max = vec![f64::NEG_INFINITY; k];
        for (&j, &v) in choice_set.iter().zip(utilities) {
            let b = catalog.nest_of[j];
            max[b] = max[b].max(v / scales[b]);
        }
        let mut sums = vec![0.0; k];
        for (&j, &v) in choice_set.iter().zip(utilities) {
            let b = catalog.nest_of[j];
            sums[b] += (v / scales[b] - max[b]).exp();
        }
        let inclusive: Vec<f64> = (0..k)
            .map(|b| {
                if max[b] == f64::NEG_INFINITY {
                    f64::NAN
                } else {
                    max[b] + sums[b].ln()
                }
            })
            .collect();
        let present: Vec<f64> = (0..k)
            .filter(|&b| !inclusive[b].is_nan())
            .map(|b| scales[b] * inclusive[b])
            .collect();
        NestedTerms {
            log_total: log_sum_exp(&present),
            inclusive,
        }
    }
}

/// Evaluation inputs for a single candidate.
#[derive(Debug, Clone, Copy)]
pub struct UtilityContext<'a> {
    pub agent: usize,
    pub candidate: usize,
    pub context: &'a Context,
    pub choice_set: &'a [usize],
}

/// Representative utility `V(j | i, A, S)` of one candidate.
pub fn representative_utility(
    params: &ModelParams,
    catalog: &ProgramCatalog,
    covariates: &Covariates,
    ctx: UtilityContext<'_>,
) -> Result<f64> {
    params.check(catalog, covariates.d())?;
    let pos = ctx
        .choice_set
        .iter()
        .position(|&j| j == ctx.candidate)
        .ok_or_else(|| {
            Error::Dimension(format!("candidate {} not in choice set", ctx.candidate))
        })?;
    let mut u = Vec::new();
    params.utilities_into(
        catalog,
        covariates.agent_block(ctx.agent),
        ctx.context,
        ctx.choice_set,
        &mut u,
    );
    Ok(u[pos])
}

/// Representative utilities of every alternative in `choice_set`.
pub fn utilities(
    params: &ModelParams,
    catalog: &ProgramCatalog,
    covariates: &Covariates,
    agent: usize,
    context: &Context,
    choice_set: &[usize],
) -> Result<Vec<f64>> {
    params.check(catalog, covariates.d())?;
    let mut u = Vec::new();
    params.utilities_into(
        catalog,
        covariates.agent_block(agent),
        context,
        choice_set,
        &mut u,
    );
    Ok(u)
}

/// Log choice probabilities over `choice_set` (same order).
pub fn log_choice_probabilities(
    params: &ModelParams,
    catalog: &ProgramCatalog,
    covariates: &Covariates,
    agent: usize,
    context: &Context,
    choice_set: &[usize],
) -> Result<Vec<f64>> {
    if choice_set.is_empty() {
        return Err(Error::EmptyChoiceSet);
    }
    params.check(catalog, covariates.d())?;
    let (mut u, mut lp) = (Vec::new(), Vec::new());
    params.log_probs_into(
        catalog,
        covariates.agent_block(agent),
        context,
        choice_set,
        &mut u,
        &mut lp,
    );
    Ok(lp)
}

/// Choice probabilities over `choice_set` (same order).
pub fn choice_probabilities(
    params: &ModelParams,
    catalog: &ProgramCatalog,
    covariates: &Covariates,
    agent: usize,
    context: &Context,
    choice_set: &[usize],
) -> Result<Vec<f64>> {
    let mut p = log_choice_probabilities(params, catalog, covariates, agent, context, choice_set)?;
    p.iter_mut().for_each(|v| *v = v.exp());
    Ok(p)
}

/// Log-likelihood of one (partial) ranking under repeated selection.
pub fn ranking_log_likelihood(
    params: &ModelParams,
    catalog: &ProgramCatalog,
    covariates: &Covariates,
    agent: usize,
    ranking: &[usize],
    policy: ContextPolicy,
) -> Result<f64> {
    params.check(catalog, covariates.d())?;
    let x = covariates.agent_block(agent);
    let (mut u, mut lp) = (Vec::new(), Vec::new());
    let mut total = 0.0;
    for rec in explode_ranking(agent, ranking, catalog.m(), policy) {
        params.log_probs_into(catalog, x, &rec.context, &rec.choice_set, &mut u, &mut lp);
        let pos = rec
            .choice_set
            .iter()
            .position(|&j| j == rec.chosen)
            .expect("chosen item is in its choice set");
        total += lp[pos];
    }
    Ok(total)
}

/// Draws an index from a discrete distribution given as probabilities.
pub(crate) fn draw_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples a full ranking by repeated selection.
pub fn sample_ranking<R: Rng + ?Sized>(
    params: &ModelParams,
    catalog: &ProgramCatalog,
    covariates: &Covariates,
    agent: usize,
    policy: ContextPolicy,
    rng: &mut R,
) -> Result<Vec<usize>> {
    sample_prefix(params, catalog, covariates, agent, policy, catalog.m(), rng)
}

/// Samples the first `length` entries of a ranking by repeated selection.
pub fn sample_prefix<R: Rng + ?Sized>(
    params: &ModelParams,
    catalog: &ProgramCatalog,
    covariates: &Covariates,
    agent: usize,
    policy: ContextPolicy,
    length: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    params.check(catalog, covariates.d())?;
    let m = catalog.m();
    let x = covariates.agent_block(agent);
    let mut remaining: Vec<usize> = (0..m).collect();
    let mut ranking = Vec::with_capacity(length.min(m));
    let (mut u, mut lp) = (Vec::new(), Vec::new());
    while ranking.len() < length.min(m) {
        let context = match policy.context_len(ranking.len() + 1) {
            Some(l) => Context::Set(ranking[..l].to_vec()),
            None => Context::Forward,
        };
        params.log_probs_into(catalog, x, &context, &remaining, &mut u, &mut lp);
        lp.iter_mut().for_each(|v| *v = v.exp());
        let pick = draw_index(&lp, rng);
        ranking.push(remaining.remove(pick));
    }
    Ok(ranking)
}

/// Reusable buffers for per-record evaluation.
#[derive(Debug, Default)]
pub(crate) struct Scratch {
    utilities: Vec<f64>,
    log_probs: Vec<f64>,
    grad_v: Vec<f64>,
    buf_a: Vec<f64>,
    buf_b: Vec<f64>,
}

impl ModelParams {
    /// Log-probability of the recorded choice.
    pub(crate) fn record_log_prob(
        &self,
        catalog: &ProgramCatalog,
        x: &[f64],
        rec: &ChoiceRecord,
        sc: &mut Scratch,
    ) -> f64 {
        self.log_probs_into(
            catalog,
            x,
            &rec.context,
            &rec.choice_set,
            &mut sc.utilities,
            &mut sc.log_probs,
        );
        let pos = chosen_position(rec);
        sc.log_probs[pos]
    }

    /// Adds `-weight · ∇ log P(chosen)` into `grad` (laid out per `layout`)
    /// and returns the log-probability. Nest entries receive the
    /// derivative with respect to the scale itself, not its preimage.
    pub(crate) fn accumulate_record(
        &self,
        layout: &ParamLayout,
        catalog: &ProgramCatalog,
        x: &[f64],
        rec: &ChoiceRecord,
        weight: f64,
        grad: &mut [f64],
        sc: &mut Scratch,
    ) -> f64 {
        let s = &rec.choice_set;
        self.log_probs_into(
            catalog,
            x,
            &rec.context,
            s,
            &mut sc.utilities,
            &mut sc.log_probs,
        );
        let pos = chosen_position(rec);
        let log_p = sc.log_probs[pos];

        // d log P(chosen) / dV_k for every k in S.
        sc.grad_v.clear();
        match &self.family {
            Family::Nested { scales } => {
                let nests = NestedTerms::new(catalog, scales, s, &sc.utilities);
                let b = catalog.nest_of[rec.chosen];
                let lam_b = scales[b];
                let k_n = scales.len();
                // Weighted mean utility per nest, for the scale derivatives.
                sc.buf_a.clear();
                sc.buf_a.resize(k_n, 0.0);
                for (i, &k) in s.iter().enumerate() {
                    let l = catalog.nest_of[k];
                    let v = sc.utilities[i];
                    let q = (v / scales[l] - nests.inclusive[l]).exp();
                    let share = (scales[l] * nests.inclusive[l] - nests.log_total).exp();
                    let mut g = -share * q;
                    if i == pos {
                        g += 1.0 / lam_b;
                    }
                    if l == b {
                        g -= q * (1.0 - lam_b) / lam_b;
                    }
                    sc.grad_v.push(g);
                    sc.buf_a[l] += q * v;
                }
                let es = layout.extra_start();
                for l in 0..k_n {
                    let incl = nests.inclusive[l];
                    if incl.is_nan() {
                        continue;
                    }
                    let lam = scales[l];
                    let d_incl = -sc.buf_a[l] / (lam * lam);
                    let share = (lam * incl - nests.log_total).exp();
                    let d_total = share * (incl + lam * d_incl);
                    let mut d = -d_total;
                    if l == b {
                        let vj = sc.utilities[pos];
                        d += -vj / (lam * lam) + incl - (1.0 - lam) * d_incl;
                    }
                    grad[es + l] -= weight * d;
                }
            }
            _ => {
                for (i, &lp) in sc.log_probs.iter().enumerate() {
                    let ind = if i == pos { 1.0 } else { 0.0 };
                    sc.grad_v.push(ind - lp.exp());
                }
            }
        }

        // Chain through the utility.
        let pstart = layout.ptype_start();
        let bstart = layout.beta_start();
        let d = layout.d;
        for (i, &k) in s.iter().enumerate() {
            let g = -weight * sc.grad_v[i];
            grad[catalog.school_of[k]] += g;
            grad[pstart + catalog.ptype_of[k]] += g;
            if d > 0 {
                let row = &x[k * d..(k + 1) * d];
                for (gb, xv) in grad[bstart..bstart + d].iter_mut().zip(row) {
                    *gb += g * xv;
                }
            }
        }
        match &self.family {
            Family::CdmLowRank {
                target,
                context,
                aggregation,
                ..
            } => {
                let r = target.ncols();
                let t0 = layout.extra_start();
                let c0 = layout.context_start();
                // h = Σ_k G_k t_k
                sc.buf_b.clear();
                sc.buf_b.resize(r, 0.0);
                for (i, &k) in s.iter().enumerate() {
                    let g = -weight * sc.grad_v[i];
                    for (h, t) in sc.buf_b.iter_mut().zip(target.row(k)) {
                        *h += g * t;
                    }
                }
                match &rec.context {
                    Context::Set(a) if !a.is_empty() => {
                        let scale = aggregation_scale(*aggregation, a.len());
                        sc.buf_a.clear();
                        sc.buf_a.resize(r, 0.0);
                        for &l in a {
                            for (c, e) in sc.buf_a.iter_mut().zip(context.row(l)) {
                                *c += e;
                            }
                        }
                        for (i, &k) in s.iter().enumerate() {
                            let g = -weight * sc.grad_v[i];
                            for q in 0..r {
                                grad[t0 + k * r + q] += g * scale * sc.buf_a[q];
                            }
                        }
                        for &l in a {
                            for q in 0..r {
                                grad[c0 + l * r + q] += scale * sc.buf_b[q];
                            }
                        }
                    }
                    Context::Forward if s.len() >= 2 => {
                        let scale = aggregation_scale(*aggregation, s.len() - 1);
                        sc.buf_a.clear();
                        sc.buf_a.resize(r, 0.0);
                        for &l in s {
                            for (c, e) in sc.buf_a.iter_mut().zip(context.row(l)) {
                                *c += e;
                            }
                        }
                        for (i, &k) in s.iter().enumerate() {
                            let g = -weight * sc.grad_v[i];
                            let t = target.row(k);
                            let c = context.row(k);
                            for q in 0..r {
                                grad[t0 + k * r + q] += g * scale * (sc.buf_a[q] - c[q]);
                                grad[c0 + k * r + q] += scale * (sc.buf_b[q] - g * t[q]);
                            }
                        }
                    }
                    _ => {}
                }
            }
            Family::CdmFull { aggregation, .. } => {
                let (others, count): (&[usize], usize) = match &rec.context {
                    Context::Set(a) => (a.as_slice(), a.len()),
                    Context::Forward => (s.as_slice(), s.len().saturating_sub(1)),
                };
                if count > 0 {
                    let scale = aggregation_scale(*aggregation, count);
                    for (i, &k) in s.iter().enumerate() {
                        let g = -weight * sc.grad_v[i] * scale;
                        for &l in others {
                            if l != k {
                                grad[layout.interaction_index(k, l)] += g;
                            }
                        }
                    }
                }
            }
            _ => {}
        }
        log_p
    }
}

#[inline]
fn chosen_position(rec: &ChoiceRecord) -> usize {
    rec.choice_set
        .iter()
        .position(|&j| j == rec.chosen)
        .expect("chosen item is in its choice set")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn catalog3() -> ProgramCatalog {
        ProgramCatalog::simple(3)
    }

    fn nested_catalog() -> ProgramCatalog {
        ProgramCatalog::from_rows(&[
            ["a", "s0", "ge", "ge"],
            ["b", "s1", "ge", "ge"],
            ["c", "s2", "sp", "sp"],
            ["d", "s3", "sp", "sp"],
            ["e", "s4", "ed", "ed"],
        ])
        .unwrap()
    }

    fn random_covariates(n: usize, m: usize, d: usize, rng: &mut ChaCha8Rng) -> Covariates {
        let values = (0..n * m * d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Covariates::new(n, m, (0..d).map(|f| format!("f{f}")).collect(), values).unwrap()
    }

    fn randomize(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
        let v: Vec<f64> = params
            .to_vector()
            .iter()
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        params.assign_vector(&v);
    }

    #[test]
    fn zero_params_zero_utility() {
        let cat = catalog3();
        let cov = Covariates::zeros(1, 3, vec!["f".into()]);
        for kind in [
            FamilyKind::Fixed,
            FamilyKind::Linear,
            FamilyKind::Cdm,
            FamilyKind::CdmFull,
        ] {
            let p = ModelParams::zeros(kind, &cat, 1, 2, ContextPolicy::Backward);
            let ctx = Context::Set(vec![1]);
            let u = representative_utility(
                &p,
                &cat,
                &cov,
                UtilityContext {
                    agent: 0,
                    candidate: 0,
                    context: &ctx,
                    choice_set: &[0, 2],
                },
            )
            .unwrap();
            assert_eq!(u, 0.0);
        }
    }

    #[test]
    fn lowrank_averaged_context() {
        let cat = catalog3();
        let cov = Covariates::zeros(1, 3, vec![]);
        let mut p = ModelParams::zeros(FamilyKind::Cdm, &cat, 0, 1, ContextPolicy::Backward);
        if let Family::CdmLowRank {
            target, context, ..
        } = &mut p.family
        {
            target
                .column_mut(0)
                .assign(&ndarray::arr1(&[1.0, 2.0, 3.0]));
            context.fill(1.0);
        }
        let ctx = Context::Set(vec![1, 2]);
        let u = utilities(&p, &cat, &cov, 0, &ctx, &[0]).unwrap();
        assert!((u[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_context_matches_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cat = nested_catalog();
        let cov = random_covariates(2, 5, 3, &mut rng);
        let mut cdm = ModelParams::zeros(FamilyKind::Cdm, &cat, 3, 2, ContextPolicy::Backward);
        randomize(&mut cdm, &mut rng);
        let mut lin = ModelParams::zeros(FamilyKind::Linear, &cat, 3, 0, ContextPolicy::Backward);
        lin.delta_school = cdm.delta_school.clone();
        lin.delta_ptype = cdm.delta_ptype.clone();
        lin.beta = cdm.beta.clone();
        let s = [0, 1, 2, 3, 4];
        let a = utilities(&cdm, &cat, &cov, 1, &Context::empty(), &s).unwrap();
        let b = utilities(&lin, &cat, &cov, 1, &Context::empty(), &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_examples() {
        let cat = ProgramCatalog::simple(4);
        let cov = Covariates::zeros(1, 4, vec![]);
        let p = ModelParams::zeros(FamilyKind::Fixed, &cat, 0, 0, ContextPolicy::Backward);
        let probs =
            choice_probabilities(&p, &cat, &cov, 0, &Context::empty(), &[0, 1, 2, 3]).unwrap();
        assert!(probs.iter().all(|&q| (q - 0.25).abs() < 1e-15));

        let mut p = p;
        p.delta_school[0] = 2f64.ln();
        let probs = choice_probabilities(&p, &cat, &cov, 0, &Context::empty(), &[0, 1]).unwrap();
        assert!((probs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((probs[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_choice_set_rejected() {
        let cat = catalog3();
        let cov = Covariates::zeros(1, 3, vec![]);
        let p = ModelParams::zeros(FamilyKind::Fixed, &cat, 0, 0, ContextPolicy::Backward);
        assert!(matches!(
            choice_probabilities(&p, &cat, &cov, 0, &Context::empty(), &[]),
            Err(Error::EmptyChoiceSet)
        ));
    }

    #[test]
    fn nested_scale_out_of_range() {
        let cat = nested_catalog();
        let cov = Covariates::zeros(1, 5, vec![]);
        let mut p = ModelParams::zeros(FamilyKind::Nested, &cat, 0, 0, ContextPolicy::Backward);
        if let Family::Nested { scales } = &mut p.family {
            scales[1] = 1.5;
        }
        assert!(matches!(
            choice_probabilities(&p, &cat, &cov, 0, &Context::empty(), &[0, 1]),
            Err(Error::NestScale { nest: 1, .. })
        ));
    }

    #[test]
    fn nested_unit_scales_is_mnl() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cat = nested_catalog();
        let cov = random_covariates(1, 5, 2, &mut rng);
        let mut lin = ModelParams::zeros(FamilyKind::Linear, &cat, 2, 0, ContextPolicy::Backward);
        randomize(&mut lin, &mut rng);
        let mut nested =
            ModelParams::zeros(FamilyKind::Nested, &cat, 2, 0, ContextPolicy::Backward);
        nested.delta_school = lin.delta_school.clone();
        nested.delta_ptype = lin.delta_ptype.clone();
        nested.beta = lin.beta.clone();
        for s in [vec![0, 1, 2, 3, 4], vec![1, 3], vec![0, 2, 4], vec![4]] {
            let a = choice_probabilities(&lin, &cat, &cov, 0, &Context::empty(), &s).unwrap();
            let b = choice_probabilities(&nested, &cat, &cov, 0, &Context::empty(), &s).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn nested_matches_two_factor_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cat = nested_catalog();
        let cov = random_covariates(1, 5, 2, &mut rng);
        let mut p = ModelParams::zeros(FamilyKind::Nested, &cat, 2, 0, ContextPolicy::Backward);
        randomize(&mut p, &mut rng);
        let scales = match &p.family {
            Family::Nested { scales } => scales.clone(),
            _ => unreachable!(),
        };
        let s = [0, 1, 2, 4];
        let v = utilities(&p, &cat, &cov, 0, &Context::empty(), &s).unwrap();
        let probs = choice_probabilities(&p, &cat, &cov, 0, &Context::empty(), &s).unwrap();
        // Direct evaluation of P(j|B(j)) · P(B(j)) without log-space tricks.
        let inner = |b: usize| -> f64 {
            s.iter()
                .zip(&v)
                .filter(|(&j, _)| cat.nest_of[j] == b)
                .map(|(_, &u)| (u / scales[b]).exp())
                .sum()
        };
        let denom: f64 = [0usize, 1, 2]
            .iter()
            .map(|&b| inner(b))
            .zip(&scales)
            .filter(|(i, _)| *i > 0.0)
            .map(|(i, &l)| i.powf(l))
            .sum();
        for (idx, &j) in s.iter().enumerate() {
            let b = cat.nest_of[j];
            let expected = (v[idx] / scales[b]).exp() / inner(b) * inner(b).powf(scales[b]) / denom;
            assert!((probs[idx] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_ranking_likelihood() {
        let cat = ProgramCatalog::simple(4);
        let cov = Covariates::zeros(1, 4, vec![]);
        let p = ModelParams::zeros(FamilyKind::Fixed, &cat, 0, 0, ContextPolicy::Backward);
        let ll =
            ranking_log_likelihood(&p, &cat, &cov, 0, &[2, 0, 3], ContextPolicy::Backward).unwrap();
        let expected = (0.25f64).ln() + (1.0f64 / 3.0).ln() + 0.5f64.ln();
        assert!((ll - expected).abs() < 1e-12);
        let single =
            ranking_log_likelihood(&p, &cat, &cov, 0, &[1], ContextPolicy::Backward).unwrap();
        assert!((single - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_sampling() {
        let cat = ProgramCatalog::simple(2);
        let cov = Covariates::zeros(1, 2, vec![]);
        let mut p = ModelParams::zeros(FamilyKind::Fixed, &cat, 0, 0, ContextPolicy::Backward);
        p.delta_school[1] = 50.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hits = (0..10_000)
            .filter(|_| {
                sample_ranking(&p, &cat, &cov, 0, ContextPolicy::Backward, &mut rng).unwrap()
                    == vec![1, 0]
            })
            .count();
        assert!(hits as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn uniform_permutations() {
        let cat = catalog3();
        let cov = Covariates::zeros(1, 3, vec![]);
        let p = ModelParams::zeros(FamilyKind::Fixed, &cat, 0, 0, ContextPolicy::Backward);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = std::collections::HashMap::new();
        let draws = 100_000;
        for _ in 0..draws {
            let r = sample_ranking(&p, &cat, &cov, 0, ContextPolicy::Backward, &mut rng).unwrap();
            *counts.entry(r).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for c in counts.values() {
            assert!((*c as f64 / draws as f64 - 1.0 / 6.0).abs() < 0.02);
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cat = nested_catalog();
        let cov = random_covariates(1, 5, 2, &mut rng);
        let mut p = ModelParams::zeros(FamilyKind::Cdm, &cat, 2, 2, ContextPolicy::Backward);
        randomize(&mut p, &mut rng);
        let a = sample_ranking(
            &p,
            &cat,
            &cov,
            0,
            ContextPolicy::Backward,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let b = sample_ranking(
            &p,
            &cat,
            &cov,
            0,
            ContextPolicy::Backward,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn vector_roundtrip_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cat = nested_catalog();
        for kind in [
            FamilyKind::Fixed,
            FamilyKind::Linear,
            FamilyKind::Cdm,
            FamilyKind::CdmFull,
            FamilyKind::Nested,
        ] {
            let mut p = ModelParams::zeros(kind, &cat, 3, 2, ContextPolicy::Backward);
            randomize(&mut p, &mut rng);
            let v = p.to_vector();
            assert_eq!(v.len(), p.layout(&cat).len());
            let q = p.with_vector(&v);
            for (a, b) in q.to_vector().iter().zip(&v) {
                assert!((a - b.abs()).abs() < 1e-12 || (a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn squash_covers_unit_interval() {
        assert_eq!(squash(0.0), 1.0);
        assert!((squash(unsquash(0.5)) - 0.5).abs() < 1e-15);
        assert!(squash(10.0) > 0.0);
        let h = 1e-6;
        let fd = (squash(0.7 + h) - squash(0.7 - h)) / (2.0 * h);
        assert!((fd - squash_derivative(0.7)).abs() < 1e-8);
    }
}
