//! Out-of-sample evaluation: loss by rank, modal-prediction accuracy,
//! sampled-choice consistency, weighted Kendall's τ and subgroup tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ChoiceDataset, Context, ContextPolicy, RankingDataset};
use crate::error::{Error, Result};
use crate::estimation::{record_log_probs, Fitted, CHUNK};
use crate::model::draw_index;

/// Mean nll of the records at one rank position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankNll {
    pub rank: usize,
    pub mean_nll: f64,
    pub count: usize,
}

/// Mean nll per rank position; ranks without records are omitted.
pub fn nll_by_rank(model: &Fitted, test: &ChoiceDataset) -> Result<Vec<RankNll>> {
    let lps = record_log_probs(model, test)?;
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (rec, lp) in test.records.iter().zip(&lps) {
        let e = acc.entry(rec.rank).or_insert((0.0, 0));
        e.0 -= lp;
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(rank, (sum, count))| RankNll {
            rank,
            mean_nll: sum / count as f64,
            count,
        })
        .collect())
}

/// Inputs of the k-th choice of one agent: remaining choice set and the
/// context formed from the true first `k − 1` choices.
fn kth_choice_inputs(
    ranking: &[usize],
    m: usize,
    policy: ContextPolicy,
    k: usize,
) -> (Context, Vec<usize>) {
    let prior = &ranking[..k - 1];
    let context = match policy.context_len(k) {
        Some(l) => Context::Set(prior[..l].to_vec()),
        None => Context::Forward,
    };
    let choice_set = (0..m).filter(|j| !prior.contains(j)).collect();
    (context, choice_set)
}

/// Probabilities of the k-th choice of `agent` given its true first
/// `k − 1` choices, as `(choice set, probabilities)`.
pub fn kth_choice_distribution(
    model: &Fitted,
    test: &RankingDataset,
    policy: ContextPolicy,
    agent: usize,
    k: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if k == 0 || k > test.rankings[agent].len() {
        return Err(Error::Config(format!(
            "agent {agent} has no choice at rank {k}"
        )));
    }
    let (context, s) = kth_choice_inputs(&test.rankings[agent], test.m(), policy, k);
    let probs = crate::model::choice_probabilities(
        model.for_rank(k),
        &test.catalog,
        &test.covariates,
        agent,
        &context,
        &s,
    )?;
    Ok((s, probs))
}

fn check_model(model: &Fitted, test: &RankingDataset, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("rank position k must be at least 1".into()));
    }
    model.check(&test.catalog, test.d())
}

/// Per-agent hit indicator for the modal k-th prediction; `None` for
/// agents whose ranking is shorter than `k`. Ties go to the lowest index.
pub fn kth_prediction_hits(
    model: &Fitted,
    test: &RankingDataset,
    policy: ContextPolicy,
    k: usize,
) -> Result<Vec<Option<f64>>> {
    check_model(model, test, k)?;
    let theta = model.for_rank(k);
    let m = test.m();
    Ok((0..test.n())
        .into_par_iter()
        .with_min_len(CHUNK)
        .map(|i| {
            let ranking = &test.rankings[i];
            if ranking.len() < k {
                return None;
            }
            let (context, s) = kth_choice_inputs(ranking, m, policy, k);
            let (mut u, mut lp) = (Vec::new(), Vec::new());
            theta.log_probs_into(
                &test.catalog,
                test.covariates.agent_block(i),
                &context,
                &s,
                &mut u,
                &mut lp,
            );
            let mut best = 0;
            for idx in 1..s.len() {
                if lp[idx] > lp[best] {
                    best = idx;
                }
            }
            Some(if s[best] == ranking[k - 1] { 1.0 } else { 0.0 })
        })
        .collect())
}

/// Mean of the defined per-agent values, `None` if there are none.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let (sum, count) = values
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Fraction of agents with `k_i ≥ k` whose modal k-th prediction is their
/// actual k-th choice; `None` when no agent ranked `k` alternatives.
pub fn accuracy_in_kth_prediction(
    model: &Fitted,
    test: &RankingDataset,
    policy: ContextPolicy,
    k: usize,
) -> Result<Option<f64>> {
    Ok(mean_defined(&kth_prediction_hits(model, test, policy, k)?))
}

/// Per-agent fraction of agreeing pairs among `samples` sampled k-th
/// choices. Each agent draws from its own seeded stream.
pub fn kth_consistency(
    model: &Fitted,
    test: &RankingDataset,
    policy: ContextPolicy,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    check_model(model, test, k)?;
    if samples < 2 {
        return Err(Error::Config("consistency needs at least 2 samples".into()));
    }
    let theta = model.for_rank(k);
    let m = test.m();
    let pairs = (samples * (samples - 1) / 2) as f64;
    Ok((0..test.n())
        .into_par_iter()
        .with_min_len(CHUNK)
        .map(|i| {
            let ranking = &test.rankings[i];
            if ranking.len() < k {
                return None;
            }
            let (context, s) = kth_choice_inputs(ranking, m, policy, k);
            let (mut u, mut p) = (Vec::new(), Vec::new());
            theta.log_probs_into(
                &test.catalog,
                test.covariates.agent_block(i),
                &context,
                &s,
                &mut u,
                &mut p,
            );
            p.iter_mut().for_each(|v| *v = v.exp());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut counts = vec![0usize; s.len()];
            for _ in 0..samples {
                counts[draw_index(&p, &mut rng)] += 1;
            }
            let agree: usize = counts.iter().map(|c| c * c.saturating_sub(1) / 2).sum();
            Some(agree as f64 / pairs)
        })
        .collect())
}

/// Mean pairwise agreement of sampled k-th choices over agents with
/// `k_i ≥ k`.
pub fn consistency_at_k(
    model: &Fitted,
    test: &RankingDataset,
    policy: ContextPolicy,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<Option<f64>> {
    Ok(mean_defined(&kth_consistency(
        model, test, policy, k, samples, seed,
    )?))
}

/// Per-agent collision probability `Σ p_j²` of the k-th choice, the
/// expected value of [`kth_consistency`].
pub fn kth_collision_probability(
    model: &Fitted,
    test: &RankingDataset,
    policy: ContextPolicy,
    k: usize,
) -> Result<Vec<Option<f64>>> {
    check_model(model, test, k)?;
    (0..test.n())
        .map(|i| {
            if test.rankings[i].len() < k {
                return Ok(None);
            }
            let (_, p) = kth_choice_distribution(model, test, policy, i, k)?;
            Ok(Some(p.iter().map(|q| q * q).sum()))
        })
        .collect()
}

/// Pair weighting for [`weighted_kendall_tau`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankWeights {
    /// Pair weight is the average, over the two orders, of one over the
    /// 1-based position of the pair's better-placed element.
    #[default]
    Hyperbolic,
    Unit,
}

/// Weighted Kendall's τ between two total orders of the same items.
pub fn weighted_kendall_tau(a: &[usize], b: &[usize], weights: RankWeights) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "orders of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let m = a.len();
    let positions = |order: &[usize]| -> Result<Vec<usize>> {
        let mut pos = vec![usize::MAX; m];
        for (p, &x) in order.iter().enumerate() {
            if x >= m || pos[x] != usize::MAX {
                return Err(Error::Dimension("order is not a permutation".into()));
            }
            pos[x] = p;
        }
        Ok(pos)
    };
    let pa = positions(a)?;
    let pb = positions(b)?;
    let (mut num, mut den) = (0.0, 0.0);
    for x in 0..m {
        for y in x + 1..m {
            let w = match weights {
                RankWeights::Unit => 1.0,
                RankWeights::Hyperbolic => {
                    0.5 * (1.0 / (1 + pa[x].min(pa[y])) as f64
                        + 1.0 / (1 + pb[x].min(pb[y])) as f64)
                }
            };
            let concordant = (pa[x] < pa[y]) == (pb[x] < pb[y]);
            num += if concordant { w } else { -w };
            den += w;
        }
    }
    Ok(if den > 0.0 { num / den } else { 1.0 })
}

/// Pairwise τ matrix between orders.
pub fn kendall_tau_matrix(orders: &[Vec<usize>], weights: RankWeights) -> Result<Vec<Vec<f64>>> {
    orders
        .iter()
        .map(|a| {
            orders
                .iter()
                .map(|b| weighted_kendall_tau(a, b, weights))
                .collect()
        })
        .collect()
}

/// Average weighted τ between full rankings sampled from each pair of
/// models. Per agent, each model draws `samples` rankings; entry (a, b)
/// averages τ between the n-th draws of a and b, and the diagonal pairs
/// consecutive draws of the same model. Each model samples under its own
/// context policy (backward for families without one).
pub fn sampled_tau_matrix(
    models: &[&Fitted],
    test: &RankingDataset,
    samples: usize,
    weights: RankWeights,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if samples < 2 {
        return Err(Error::Config("τ needs at least 2 samples".into()));
    }
    for model in models {
        model.check(&test.catalog, test.covariates.d())?;
    }
    let m = test.m();
    let q = models.len();
    let per_agent: Vec<Vec<f64>> = (0..test.n())
        .into_par_iter()
        .map(|i| {
            let draws: Vec<Vec<Vec<usize>>> = models
                .iter()
                .enumerate()
                .map(|(a, model)| {
                    let policy = model.base().policy().unwrap_or(ContextPolicy::Backward);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(a as u64));
                    rng.set_stream(i as u64);
                    (0..samples)
                        .map(|_| {
                            model.sample_prefix(
                                &test.catalog,
                                &test.covariates,
                                i,
                                policy,
                                m,
                                &mut rng,
                            )
                        })
                        .collect()
                })
                .collect();
            let mut out = vec![0.0; q * q];
            for a in 0..q {
                for b in a..q {
                    let mut total = 0.0;
                    for n in 0..samples {
                        let other = if a == b {
                            &draws[b][(n + 1) % samples]
                        } else {
                            &draws[b][n]
                        };
                        total += weighted_kendall_tau(&draws[a][n], other, weights)
                            .expect("sampled rankings are permutations");
                    }
                    out[a * q + b] = total / samples as f64;
                    out[b * q + a] = out[a * q + b];
                }
            }
            out
        })
        .collect();
    let n = per_agent.len().max(1) as f64;
    let mut sums = vec![0.0; q * q];
    for row in &per_agent {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    Ok((0..q)
        .map(|a| (0..q).map(|b| sums[a * q + b] / n).collect())
        .collect())
}

/// One row of a subgroup table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub mean: f64,
    pub count: usize,
}

pub const UNLABELED: &str = "unlabeled";

/// Per-group means of per-agent values (agents with `None` are skipped),
/// grouped by `label` and ordered by descending group size then name.
/// Agents without the label form an explicit "unlabeled" row.
pub fn disaggregate(
    values: &[Option<f64>],
    labels: &[BTreeMap<String, String>],
    label: &str,
) -> Vec<GroupRow> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (i, v) in values.iter().enumerate() {
        let Some(v) = v else { continue };
        let group = labels
            .get(i)
            .and_then(|l| l.get(label))
            .cloned()
            .unwrap_or_else(|| UNLABELED.to_string());
        let e = acc.entry(group).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let mut rows: Vec<GroupRow> = acc
        .into_iter()
        .map(|(group, (sum, count))| GroupRow {
            group,
            mean: sum / count as f64,
            count,
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.group.cmp(&b.group)));
    rows
}

/// A metric record as written to metric files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub k: Option<usize>,
    pub group: String,
    pub value: f64,
    pub count: usize,
}

pub fn write_metric_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_metric_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{explode_rankings, Covariates, ProgramCatalog};
    use crate::model::{FamilyKind, ModelParams};
    use std::sync::Arc;

    fn uniform_full(n: usize, m: usize) -> (Fitted, RankingDataset) {
        let cat = Arc::new(ProgramCatalog::simple(m));
        let ds = RankingDataset::new(
            Arc::clone(&cat),
            (0..n).map(|i| i.to_string()).collect(),
            (0..n)
                .map(|i| (0..m).map(|j| (i + j) % m).collect())
                .collect(),
            Arc::new(Covariates::zeros(n, m, vec![])),
            vec![BTreeMap::new(); n],
        )
        .unwrap();
        let p = ModelParams::zeros(FamilyKind::Fixed, &cat, 0, 0, ContextPolicy::Backward);
        (p.into(), ds)
    }

    #[test]
    fn uniform_rank_losses() {
        let (model, ds) = uniform_full(3, 4);
        let choices = explode_rankings(&ds, ContextPolicy::Backward).unwrap();
        let table = nll_by_rank(&model, &choices).unwrap();
        let expected = [4f64.ln(), 3f64.ln(), 2f64.ln(), 0.0];
        assert_eq!(table.len(), 4);
        for (row, e) in table.iter().zip(expected) {
            assert!((row.mean_nll - e).abs() < 1e-15);
            assert_eq!(row.count, 3);
        }
    }

    #[test]
    fn tau_extremes() {
        let a = vec![0, 1, 2, 3, 4];
        let rev: Vec<usize> = a.iter().rev().copied().collect();
        for w in [RankWeights::Unit, RankWeights::Hyperbolic] {
            assert_eq!(weighted_kendall_tau(&a, &a, w).unwrap(), 1.0);
            assert_eq!(weighted_kendall_tau(&a, &rev, w).unwrap(), -1.0);
        }
        assert!(weighted_kendall_tau(&a, &[0, 1], RankWeights::Unit).is_err());
    }

    #[test]
    fn unit_tau_is_classical() {
        // One adjacent swap among 4 items: (6 − 2·1)/6.
        let t = weighted_kendall_tau(&[0, 1, 2, 3], &[1, 0, 2, 3], RankWeights::Unit).unwrap();
        assert!((t - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn undefined_accuracy_beyond_lengths() {
        let (model, ds) = uniform_full(3, 4);
        assert_eq!(
            accuracy_in_kth_prediction(&model, &ds, ContextPolicy::Backward, 5).unwrap(),
            None
        );
        assert!(accuracy_in_kth_prediction(&model, &ds, ContextPolicy::Backward, 0).is_err());
    }

    #[test]
    fn group_tables() {
        let labels: Vec<BTreeMap<String, String>> = (0..6)
            .map(|i| {
                let mut l = BTreeMap::new();
                if i < 5 {
                    l.insert(
                        "g".to_string(),
                        if i % 2 == 0 { "x" } else { "y" }.to_string(),
                    );
                }
                l
            })
            .collect();
        let values: Vec<Option<f64>> = vec![
            Some(1.0),
            Some(0.0),
            Some(1.0),
            Some(1.0),
            Some(0.0),
            Some(1.0),
        ];
        let rows = disaggregate(&values, &labels, "g");
        assert_eq!(rows[0].group, "x");
        assert_eq!(rows[0].count, 3);
        assert!((rows[0].mean - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rows[1].group, "y");
        assert!((rows[1].mean - 0.5).abs() < 1e-15);
        assert_eq!(rows[2].group, UNLABELED);
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), 6);
    }

    #[test]
    fn metric_rows_roundtrip() {
        let rows = vec![
            MetricRow {
                metric: "accuracy".into(),
                k: Some(1),
                group: "all".into(),
                value: 0.5,
                count: 10,
            },
            MetricRow {
                metric: "nll".into(),
                k: None,
                group: "all".into(),
                value: 1.25,
                count: 30,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metric_rows(&path, &rows).unwrap();
        assert_eq!(read_metric_rows(&path).unwrap(), rows);
    }
}
