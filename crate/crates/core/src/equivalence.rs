//! Forward ↔ backward reparameterizations of context-dependent models.
//!
//! Under summed context aggregation, a forward model with parameters θ
//! and a backward model with parameters `map(θ)` assign identical
//! probabilities to every ranking. Both maps are involutions.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ContextPolicy, Covariates, ProgramCatalog};
use crate::error::{Error, Result};
use crate::model::{ranking_log_likelihood, ContextAggregation, Family, FamilyKind, ModelParams};

fn flip(policy: ContextPolicy) -> Result<ContextPolicy> {
    match policy {
        ContextPolicy::Forward => Ok(ContextPolicy::Backward),
        ContextPolicy::Backward => Ok(ContextPolicy::Forward),
        ContextPolicy::TopK(_) => Err(Error::Unsupported(
            "equivalence maps need a forward or backward policy".into(),
        )),
    }
}

fn require_sum(aggregation: ContextAggregation) -> Result<()> {
    if aggregation == ContextAggregation::Sum {
        Ok(())
    } else {
        Err(Error::Unsupported(
            "equivalence maps need summed context aggregation".into(),
        ))
    }
}

fn shifted_offset(params: &ModelParams, shift: &[f64]) -> Vec<f64> {
    let out: Vec<f64> = if params.offset.is_empty() {
        shift.to_vec()
    } else {
        params
            .offset
            .iter()
            .zip(shift)
            .map(|(o, s)| o + s)
            .collect()
    };
    if out.iter().all(|&v| v == 0.0) {
        Vec::new()
    } else {
        out
    }
}

/// `{δ_i + Σ_{j≠i} u_ij, β, −U}` with the policy flipped. The shift is
/// carried in the per-alternative offset.
pub fn map_full(params: &ModelParams) -> Result<ModelParams> {
    let Family::CdmFull {
        interactions,
        policy,
        aggregation,
    } = &params.family
    else {
        return Err(Error::Unsupported("map_full needs a full CDM".into()));
    };
    require_sum(*aggregation)?;
    let m = interactions.nrows();
    let shift: Vec<f64> = (0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| j != i)
                .map(|j| interactions[[i, j]])
                .sum()
        })
        .collect();
    let mut negated = interactions.mapv(|u| -u);
    for i in 0..m {
        negated[[i, i]] = interactions[[i, i]];
    }
    Ok(ModelParams {
        delta_school: params.delta_school.clone(),
        delta_ptype: params.delta_ptype.clone(),
        beta: params.beta.clone(),
        offset: shifted_offset(params, &shift),
        family: Family::CdmFull {
            interactions: negated,
            policy: flip(*policy)?,
            aggregation: *aggregation,
        },
    })
}

/// `{δ_i + t_iᵀ Σ_{j≠i} c_j, β, T, −C}` with the policy flipped.
pub fn map_lowrank(params: &ModelParams) -> Result<ModelParams> {
    let Family::CdmLowRank {
        target,
        context,
        policy,
        aggregation,
    } = &params.family
    else {
        return Err(Error::Unsupported(
            "map_lowrank needs a low-rank CDM".into(),
        ));
    };
    require_sum(*aggregation)?;
    let (m, r) = target.dim();
    let shift: Vec<f64> = (0..m)
        .map(|i| {
            (0..r)
                .map(|q| {
                    let s: f64 = (0..m).filter(|&j| j != i).map(|j| context[[j, q]]).sum();
                    target[[i, q]] * s
                })
                .sum()
        })
        .collect();
    let negated: Array2<f64> = context.mapv(|c| -c);
    Ok(ModelParams {
        delta_school: params.delta_school.clone(),
        delta_ptype: params.delta_ptype.clone(),
        beta: params.beta.clone(),
        offset: shifted_offset(params, &shift),
        family: Family::CdmLowRank {
            target: target.clone(),
            context: negated,
            policy: flip(*policy)?,
            aggregation: *aggregation,
        },
    })
}

/// Applies whichever map matches the family of `params`.
pub fn map_params(params: &ModelParams) -> Result<ModelParams> {
    match params.family {
        Family::CdmFull { .. } => map_full(params),
        Family::CdmLowRank { .. } => map_lowrank(params),
        _ => Err(Error::Unsupported(
            "equivalence maps apply to context-dependent models only".into(),
        )),
    }
}

/// Every ranking (ordered prefix of distinct alternatives) of every length
/// `1..=m`.
pub fn enumerate_rankings(m: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                prefix.push(j);
                out.push(prefix.clone());
                extend(prefix, used, out);
                prefix.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), &mut vec![false; m], &mut out);
    out
}

/// Largest absolute difference between ranking probabilities under `a`
/// and `b` over every ranking of every length, each model evaluated with
/// its own policy.
pub fn max_ranking_deviation(
    a: &ModelParams,
    b: &ModelParams,
    catalog: &ProgramCatalog,
    covariates: &Covariates,
    agent: usize,
) -> Result<f64> {
    let pa = a
        .policy()
        .ok_or_else(|| Error::Unsupported("first model has no context policy".into()))?;
    let pb = b
        .policy()
        .ok_or_else(|| Error::Unsupported("second model has no context policy".into()))?;
    let mut worst: f64 = 0.0;
    for ranking in enumerate_rankings(catalog.m()) {
        let la = ranking_log_likelihood(a, catalog, covariates, agent, &ranking, pa)?;
        let lb = ranking_log_likelihood(b, catalog, covariates, agent, &ranking, pb)?;
        worst = worst.max((la.exp() - lb.exp()).abs());
    }
    Ok(worst)
}

/// Largest absolute difference between two parameter sets of the same
/// shape, treating a missing offset as zeros.
pub fn max_param_difference(a: &ModelParams, b: &ModelParams) -> f64 {
    let va = a.to_vector();
    let vb = b.to_vector();
    let mut worst = va.iter().zip(&vb).map(|(x, y)| (x - y).abs()).fold(
        if va.len() == vb.len() {
            0.0
        } else {
            f64::INFINITY
        },
        f64::max,
    );
    let m = a.offset.len().max(b.offset.len());
    for j in 0..m {
        let oa = a.offset.get(j).copied().unwrap_or(0.0);
        let ob = b.offset.get(j).copied().unwrap_or(0.0);
        worst = worst.max((oa - ob).abs());
    }
    if a.policy() != b.policy() {
        worst = f64::INFINITY;
    }
    worst
}

/// Outcome of the distributional-equivalence check on one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_probability_deviation: f64,
    pub involution_deviation: f64,
    pub rankings_checked: usize,
}

/// Maps `params`, compares ranking probabilities of the original and the
/// mapped model over every ranking, and checks the involution.
pub fn check_equivalence(
    params: &ModelParams,
    catalog: &ProgramCatalog,
    covariates: &Covariates,
    agent: usize,
) -> Result<EquivalenceReport> {
    let mapped = map_params(params)?;
    let back = map_params(&mapped)?;
    Ok(EquivalenceReport {
        max_probability_deviation: max_ranking_deviation(
            params, &mapped, catalog, covariates, agent,
        )?,
        involution_deviation: max_param_difference(params, &back),
        rankings_checked: enumerate_rankings(catalog.m()).len(),
    })
}

/// Runs [`check_equivalence`] on `trials` random context models over `m`
/// alternatives (alternating full and low-rank interactions and forward
/// and backward policies, summed aggregation, two covariates) and returns
/// the worst deviations seen.
pub fn random_equivalence_suite(m: usize, trials: usize, seed: u64) -> Result<EquivalenceReport> {
    let catalog = ProgramCatalog::simple(m);
    let d = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(m as u64);
    let mut report = EquivalenceReport {
        max_probability_deviation: 0.0,
        involution_deviation: 0.0,
        rankings_checked: 0,
    };
    for trial in 0..trials {
        let values = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let covariates = Covariates::new(1, m, vec!["x0".into(), "x1".into()], values)?;
        let kind = if trial % 2 == 0 {
            FamilyKind::CdmFull
        } else {
            FamilyKind::Cdm
        };
        let policy = if trial % 4 < 2 {
            ContextPolicy::Forward
        } else {
            ContextPolicy::Backward
        };
        let mut params = ModelParams::zeros(kind, &catalog, d, 1 + trial % 3, policy);
        params.set_aggregation(ContextAggregation::Sum);
        let v: Vec<f64> = params
            .to_vector()
            .iter()
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        params.assign_vector(&v);
        let r = check_equivalence(&params, &catalog, &covariates, 0)?;
        report.max_probability_deviation = report
            .max_probability_deviation
            .max(r.max_probability_deviation);
        report.involution_deviation = report.involution_deviation.max(r.involution_deviation);
        report.rankings_checked += r.rankings_checked;
    }
    Ok(report)
}
