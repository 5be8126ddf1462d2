use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankchoice::estimation::{fitted_gradient, fitted_objective, Fitted};
use rankchoice::{
    explode_rankings, ContextAggregation, ContextPolicy, Covariates, FamilyKind, ModelParams,
    ProgramCatalog, RankingDataset, StratifiedParams,
};

fn catalog() -> ProgramCatalog {
    ProgramCatalog::from_rows(&[
        ["a", "s0", "ge", "n0"],
        ["b", "s0", "sp", "n1"],
        ["c", "s1", "ge", "n0"],
        ["d", "s2", "im", "n2"],
        ["e", "s2", "ge", "n1"],
    ])
    .unwrap()
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize) -> RankingDataset {
    let cat = Arc::new(catalog());
    let m = cat.m();
    let values = (0..n * m * d)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let cov = Covariates::new(n, m, (0..d).map(|f| format!("f{f}")).collect(), values).unwrap();
    let rankings = (0..n)
        .map(|_| {
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(rng);
            let k = rng.random_range(1..=m);
            perm.truncate(k);
            perm
        })
        .collect();
    RankingDataset::new(
        cat,
        (0..n).map(|i| format!("agent{i}")).collect(),
        rankings,
        Arc::new(cov),
        vec![BTreeMap::new(); n],
    )
    .unwrap()
}

fn randomize(p: &mut ModelParams, rng: &mut ChaCha8Rng) {
    let v: Vec<f64> = p
        .to_vector()
        .iter()
        .map(|_| rng.random_range(-0.8..0.8))
        .collect();
    p.assign_vector(&v);
}

fn relative_error(model: &Fitted, choices: &rankchoice::ChoiceDataset, l2: f64) -> f64 {
    let g = fitted_gradient(model, choices, l2).unwrap();
    let v = model.to_vector();
    let h = 1e-5;
    let mut fd = vec![0.0; v.len()];
    for i in 0..v.len() {
        let mut up = v.clone();
        up[i] += h;
        let mut dn = v.clone();
        dn[i] -= h;
        let fu = fitted_objective(&model.with_vector(&up), choices, l2).unwrap();
        let fdn = fitted_objective(&model.with_vector(&dn), choices, l2).unwrap();
        fd[i] = (fu - fdn) / (2.0 * h);
    }
    let p = g.layout.len();
    let mut worst: f64 = 0.0;
    for s in 0..g.strata {
        for (_, a, b) in g.layout.blocks() {
            let an = &g.values[s * p + a..s * p + b];
            let nu = &fd[s * p + a..s * p + b];
            let diff: f64 = an
                .iter()
                .zip(nu)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm = an.iter().map(|x| x * x).sum::<f64>().sqrt()
                + nu.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                worst = worst.max(diff / norm);
            }
        }
    }
    worst
}

#[test]
fn all_families_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let policies = [
        ContextPolicy::Backward,
        ContextPolicy::Forward,
        ContextPolicy::TopK(2),
    ];
    for trial in 0..6 {
        let ds = random_dataset(&mut rng, 10, 3);
        for kind in [
            FamilyKind::Fixed,
            FamilyKind::Linear,
            FamilyKind::Cdm,
            FamilyKind::CdmFull,
            FamilyKind::Nested,
        ] {
            for (pi, &policy) in policies.iter().enumerate() {
                if !kind.is_cdm() && pi > 0 {
                    continue;
                }
                let choices = explode_rankings(&ds, policy).unwrap();
                let mut p = ModelParams::zeros(kind, &ds.catalog, 3, 2, policy);
                if trial % 2 == 1 {
                    p.set_aggregation(ContextAggregation::Sum);
                }
                randomize(&mut p, &mut rng);
                let err = relative_error(&p.clone().into(), &choices, 0.01);
                assert!(err <= 1e-5, "{kind} {policy}: {err}");

                let strata: Vec<ModelParams> = (0..3)
                    .map(|_| {
                        let mut q = p.clone();
                        randomize(&mut q, &mut rng);
                        q
                    })
                    .collect();
                let sp = StratifiedParams {
                    strata,
                    laplacian: 0.3,
                };
                let err = relative_error(&sp.into(), &choices, 0.01);
                assert!(err <= 1e-5, "stratified {kind} {policy}: {err}");
            }
        }
    }
}
