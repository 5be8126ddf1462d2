//! Rank-position stratification with a path-graph Laplacian coupling
//! adjacent strata.

use serde::{Deserialize, Serialize};

use crate::data::ProgramCatalog;
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// 1-based stratum of a 1-based rank position: ranks beyond `k` share the
/// last stratum.
pub fn stratum_of(rank_position: usize, k: usize) -> usize {
    rank_position.clamp(1, k.max(1))
}

/// `K` copies of a base model, one per rank stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedParams {
    pub strata: Vec<ModelParams>,
    pub laplacian: f64,
}

impl StratifiedParams {
    /// `k` identical copies of `base`.
    pub fn replicate(base: &ModelParams, k: usize, laplacian: f64) -> Self {
        StratifiedParams {
            strata: vec![base.clone(); k.max(1)],
            laplacian,
        }
    }

    pub fn k(&self) -> usize {
        self.strata.len()
    }

    /// Parameters used for a choice at 1-based rank `rank_position`.
    pub fn for_rank(&self, rank_position: usize) -> &ModelParams {
        &self.strata[stratum_of(rank_position, self.k()) - 1]
    }

    pub fn check(&self, catalog: &ProgramCatalog, d: usize) -> Result<()> {
        if self.strata.is_empty() {
            return Err(Error::Dimension("stratified model with no strata".into()));
        }
        if !(self.laplacian >= 0.0) {
            return Err(Error::Config(format!(
                "laplacian gain {} must be non-negative",
                self.laplacian
            )));
        }
        let first = &self.strata[0];
        let layout = first.layout(catalog);
        for (k, theta) in self.strata.iter().enumerate() {
            theta.check(catalog, d)?;
            if theta.layout(catalog) != layout || theta.policy() != first.policy() {
                return Err(Error::Dimension(format!(
                    "stratum {} differs in shape from stratum 1",
                    k + 1
                )));
            }
        }
        Ok(())
    }

    /// Concatenated optimizer vectors of all strata.
    pub fn to_vector(&self) -> Vec<f64> {
        self.strata.iter().flat_map(|s| s.to_vector()).collect()
    }

    pub fn with_vector(&self, v: &[f64]) -> StratifiedParams {
        let p = v.len() / self.k();
        StratifiedParams {
            strata: self
                .strata
                .iter()
                .zip(v.chunks(p))
                .map(|(s, chunk)| s.with_vector(chunk))
                .collect(),
            laplacian: self.laplacian,
        }
    }
}

/// `λ_ℒ Σ_{k≥2} ‖θ_k − θ_{k−1}‖²` over flattened parameter vectors.
pub fn laplacian_penalty(params: &StratifiedParams) -> Result<f64> {
    let vectors: Vec<Vec<f64>> = params.strata.iter().map(|s| s.to_vector()).collect();
    let mut total = 0.0;
    for pair in vectors.windows(2) {
        if pair[0].len() != pair[1].len() {
            return Err(Error::Dimension("strata differ in parameter count".into()));
        }
        total += pair[0]
            .iter()
            .zip(&pair[1])
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>();
    }
    Ok(params.laplacian * total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ContextPolicy;
    use crate::model::FamilyKind;

    #[test]
    fn stratum_clamps() {
        assert_eq!(stratum_of(1, 10), 1);
        assert_eq!(stratum_of(10, 10), 10);
        assert_eq!(stratum_of(17, 10), 10);
        assert_eq!(stratum_of(3, 1), 1);
    }

    #[test]
    fn penalty_examples() {
        let cat = ProgramCatalog::simple(3);
        let base = ModelParams::zeros(FamilyKind::Linear, &cat, 2, 0, ContextPolicy::Backward);
        let mut sp = StratifiedParams::replicate(&base, 4, 5.0);
        assert_eq!(laplacian_penalty(&sp).unwrap(), 0.0);

        let mut sp2 = StratifiedParams::replicate(&base, 2, 2.0);
        sp2.strata[1].beta[0] = 3.0;
        assert_eq!(laplacian_penalty(&sp2).unwrap(), 18.0);

        sp.laplacian = 0.0;
        sp.strata[2].delta_school[1] = 1.0;
        assert_eq!(laplacian_penalty(&sp).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cat = ProgramCatalog::simple(3);
        let a = ModelParams::zeros(FamilyKind::Linear, &cat, 2, 0, ContextPolicy::Backward);
        let b = ModelParams::zeros(FamilyKind::Linear, &cat, 1, 0, ContextPolicy::Backward);
        let sp = StratifiedParams {
            strata: vec![a, b],
            laplacian: 1.0,
        };
        assert!(laplacian_penalty(&sp).is_err());
    }
}
