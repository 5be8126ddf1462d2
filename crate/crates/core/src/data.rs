//! Alternative catalogs, partial-ranking datasets and the ranking → choice
//! explosion (repeated selection).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The universe of alternatives with their school, program-type and nest
/// assignments. Alternatives are dense indices `0..m` in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramCatalog {
    pub alternatives: Vec<String>,
    pub schools: Vec<String>,
    pub program_types: Vec<String>,
    pub nests: Vec<String>,
    pub school_of: Vec<usize>,
    pub ptype_of: Vec<usize>,
    pub nest_of: Vec<usize>,
}

impl ProgramCatalog {
    pub fn new(
        alternatives: Vec<String>,
        schools: Vec<String>,
        program_types: Vec<String>,
        nests: Vec<String>,
        school_of: Vec<usize>,
        ptype_of: Vec<usize>,
        nest_of: Vec<usize>,
    ) -> Result<Self> {
        let catalog = ProgramCatalog {
            alternatives,
            schools,
            program_types,
            nests,
            school_of,
            ptype_of,
            nest_of,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    /// Builds a catalog from `(alternative, school, program_type, nest)`
    /// label rows; school, program-type and nest indices follow first
    /// appearance.
    pub fn from_rows<S: AsRef<str>>(rows: &[[S; 4]]) -> Result<Self> {
        fn intern(labels: &mut Vec<String>, label: &str) -> usize {
            match labels.iter().position(|l| l == label) {
                Some(i) => i,
                None => {
                    labels.push(label.to_string());
                    labels.len() - 1
                }
            }
        }
        let mut alternatives = Vec::with_capacity(rows.len());
        let (mut schools, mut ptypes, mut nests) = (Vec::new(), Vec::new(), Vec::new());
        let (mut school_of, mut ptype_of, mut nest_of) = (Vec::new(), Vec::new(), Vec::new());
        for row in rows {
            alternatives.push(row[0].as_ref().to_string());
            school_of.push(intern(&mut schools, row[1].as_ref()));
            ptype_of.push(intern(&mut ptypes, row[2].as_ref()));
            nest_of.push(intern(&mut nests, row[3].as_ref()));
        }
        Self::new(
            alternatives,
            schools,
            ptypes,
            nests,
            school_of,
            ptype_of,
            nest_of,
        )
    }

    /// A catalog where every alternative is its own school, all share one
    /// program type and one nest.
    pub fn simple(m: usize) -> Self {
        let rows: Vec<[String; 4]> = (0..m)
            .map(|j| {
                [
                    format!("alt{j}"),
                    format!("school{j}"),
                    "general".to_string(),
                    "general".to_string(),
                ]
            })
            .collect();
        Self::from_rows(&rows).expect("simple catalog is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.alternatives.len();
        if m == 0 {
            return Err(Error::InvalidCatalog("no alternatives".into()));
        }
        if self.schools.is_empty() || self.program_types.is_empty() || self.nests.is_empty() {
            return Err(Error::InvalidCatalog(
                "need at least one school, program type and nest".into(),
            ));
        }
        for (name, map, bound) in [
            ("school", &self.school_of, self.schools.len()),
            ("program type", &self.ptype_of, self.program_types.len()),
            ("nest", &self.nest_of, self.nests.len()),
        ] {
            if map.len() != m {
                return Err(Error::InvalidCatalog(format!(
                    "{name} map has {} entries for {m} alternatives",
                    map.len()
                )));
            }
            if let Some(bad) = map.iter().find(|&&v| v >= bound) {
                return Err(Error::InvalidCatalog(format!(
                    "{name} index {bad} out of range (have {bound})"
                )));
            }
        }
        let mut seen = HashSet::new();
        for a in &self.alternatives {
            if !seen.insert(a.as_str()) {
                return Err(Error::InvalidCatalog(format!(
                    "duplicate alternative {a:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.alternatives.len()
    }

    pub fn n_schools(&self) -> usize {
        self.schools.len()
    }

    pub fn n_ptypes(&self) -> usize {
        self.program_types.len()
    }

    pub fn n_nests(&self) -> usize {
        self.nests.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.alternatives.iter().position(|a| a == label)
    }

    /// Hex digest of the nest assignment.
    pub fn nest_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for &k in &self.nest_of {
            hasher.update((k as u64).to_le_bytes());
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Agent × alternative × feature covariate tensor, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    pub n: usize,
    pub m: usize,
    pub feature_names: Vec<String>,
    pub values: Vec<f64>,
}

impl Covariates {
    pub fn new(n: usize, m: usize, feature_names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let d = feature_names.len();
        if values.len() != n * m * d {
            return Err(Error::Dimension(format!(
                "covariate tensor has {} values, expected {n}x{m}x{d}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(
                "covariates contain non-finite values".into(),
            ));
        }
        Ok(Covariates {
            n,
            m,
            feature_names,
            values,
        })
    }

    pub fn zeros(n: usize, m: usize, feature_names: Vec<String>) -> Self {
        let d = feature_names.len();
        Covariates {
            n,
            m,
            feature_names,
            values: vec![0.0; n * m * d],
        }
    }

    pub fn d(&self) -> usize {
        self.feature_names.len()
    }

    #[inline]
    pub fn row(&self, agent: usize, alternative: usize) -> &[f64] {
        let d = self.d();
        let start = (agent * self.m + alternative) * d;
        &self.values[start..start + d]
    }

    #[inline]
    pub fn row_mut(&mut self, agent: usize, alternative: usize) -> &mut [f64] {
        let d = self.d();
        let start = (agent * self.m + alternative) * d;
        &mut self.values[start..start + d]
    }

    /// All alternatives' rows for one agent (`m * d` values).
    #[inline]
    pub fn agent_block(&self, agent: usize) -> &[f64] {
        let width = self.m * self.d();
        &self.values[agent * width..(agent + 1) * width]
    }
}

/// Agents' partial rankings over a catalog plus their covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingDataset {
    pub catalog: Arc<ProgramCatalog>,
    pub agent_ids: Vec<String>,
    pub rankings: Vec<Vec<usize>>,
    pub covariates: Arc<Covariates>,
    /// Per-agent categorical labels (label name → value); empty maps when
    /// no labels are known.
    pub group_labels: Vec<BTreeMap<String, String>>,
}

impl RankingDataset {
    pub fn new(
        catalog: Arc<ProgramCatalog>,
        agent_ids: Vec<String>,
        rankings: Vec<Vec<usize>>,
        covariates: Arc<Covariates>,
        group_labels: Vec<BTreeMap<String, String>>,
    ) -> Result<Self> {
        let dataset = RankingDataset {
            catalog,
            agent_ids,
            rankings,
            covariates,
            group_labels,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        self.catalog.validate()?;
        let n = self.rankings.len();
        let m = self.catalog.m();
        if self.agent_ids.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{} agent ids for {n} rankings",
                self.agent_ids.len()
            )));
        }
        if self.group_labels.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{} label maps for {n} agents",
                self.group_labels.len()
            )));
        }
        if self.covariates.n != n || self.covariates.m != m {
            return Err(Error::Dimension(format!(
                "covariates are {}x{}, dataset is {n}x{m}",
                self.covariates.n, self.covariates.m
            )));
        }
        let mut ids = HashSet::new();
        for (i, id) in self.agent_ids.iter().enumerate() {
            if !ids.insert(id.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate agent id {id:?}")));
            }
            validate_ranking(id, &self.rankings[i], m)?;
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.rankings.len()
    }

    pub fn m(&self) -> usize {
        self.catalog.m()
    }

    pub fn d(&self) -> usize {
        self.covariates.d()
    }

    pub fn total_choices(&self) -> usize {
        self.rankings.iter().map(Vec::len).sum()
    }

    pub fn max_length(&self) -> usize {
        self.rankings.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Dataset restricted to the given agents, in the given order. The
    /// catalog is shared; covariate rows are copied.
    pub fn subset(&self, agents: &[usize]) -> RankingDataset {
        let d = self.d();
        let m = self.m();
        let mut values = Vec::with_capacity(agents.len() * m * d);
        for &i in agents {
            values.extend_from_slice(self.covariates.agent_block(i));
        }
        RankingDataset {
            catalog: Arc::clone(&self.catalog),
            agent_ids: agents.iter().map(|&i| self.agent_ids[i].clone()).collect(),
            rankings: agents.iter().map(|&i| self.rankings[i].clone()).collect(),
            covariates: Arc::new(Covariates {
                n: agents.len(),
                m,
                feature_names: self.covariates.feature_names.clone(),
                values,
            }),
            group_labels: agents
                .iter()
                .map(|&i| self.group_labels[i].clone())
                .collect(),
        }
    }
}

fn validate_ranking(agent: &str, ranking: &[usize], m: usize) -> Result<()> {
    let invalid = |reason: String| Error::InvalidRanking {
        agent: agent.to_string(),
        reason,
    };
    if ranking.is_empty() {
        return Err(invalid("empty ranking".into()));
    }
    if ranking.len() > m {
        return Err(invalid(format!("length {} exceeds m = {m}", ranking.len())));
    }
    let mut seen = vec![false; m];
    for &r in ranking {
        if r >= m {
            return Err(invalid(format!("alternative index {r} out of range")));
        }
        if seen[r] {
            return Err(invalid(format!("alternative {r} repeated")));
        }
        seen[r] = true;
    }
    Ok(())
}

/// How the context set of each choice is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextPolicy {
    /// Context is every previously chosen alternative.
    Backward,
    /// Context of candidate j is the rest of the choice set, `S \ {j}`.
    Forward,
    /// Context is the first `min(k, j - 1)` chosen alternatives.
    TopK(usize),
}

impl ContextPolicy {
    /// Number of prior choices in the context of the choice at 1-based rank
    /// `position`; `None` for the forward policy.
    pub fn context_len(&self, position: usize) -> Option<usize> {
        let prior = position.saturating_sub(1);
        match *self {
            ContextPolicy::Backward => Some(prior),
            ContextPolicy::TopK(k) => Some(prior.min(k)),
            ContextPolicy::Forward => None,
        }
    }
}

impl Default for ContextPolicy {
    fn default() -> Self {
        ContextPolicy::Backward
    }
}

impl fmt::Display for ContextPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextPolicy::Backward => write!(f, "backward"),
            ContextPolicy::Forward => write!(f, "forward"),
            ContextPolicy::TopK(k) => write!(f, "topk:{k}"),
        }
    }
}

impl FromStr for ContextPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "backward" => Ok(ContextPolicy::Backward),
            "forward" => Ok(ContextPolicy::Forward),
            other => {
                let k = other
                    .strip_prefix("topk:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown context policy {s:?}")))?;
                Ok(ContextPolicy::TopK(k))
            }
        }
    }
}

/// Resolved context of a single choice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Context {
    /// An explicit set of alternatives (already chosen, or truncated).
    Set(Vec<usize>),
    /// Forward dependence: each candidate's context is the rest of the
    /// choice set.
    Forward,
}

impl Context {
    pub fn empty() -> Self {
        Context::Set(Vec::new())
    }
}

/// One exploded choice: agent `agent` picked `chosen` from `choice_set`
/// at 1-based position `rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceRecord {
    pub agent: usize,
    pub rank: usize,
    pub chosen: usize,
    pub context: Context,
    pub choice_set: Vec<usize>,
}

/// Choice records plus the catalog and covariates they refer to.
#[derive(Debug, Clone)]
pub struct ChoiceDataset {
    pub catalog: Arc<ProgramCatalog>,
    pub covariates: Arc<Covariates>,
    pub policy: ContextPolicy,
    pub records: Vec<ChoiceRecord>,
}

impl ChoiceDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records whose rank position satisfies `keep`.
    pub fn filter_ranks(&self, keep: impl Fn(usize) -> bool) -> ChoiceDataset {
        ChoiceDataset {
            catalog: Arc::clone(&self.catalog),
            covariates: Arc::clone(&self.covariates),
            policy: self.policy,
            records: self
                .records
                .iter()
                .filter(|r| keep(r.rank))
                .cloned()
                .collect(),
        }
    }
}

/// Explodes one ranking into its sequence of choice records.
pub fn explode_ranking(
    agent: usize,
    ranking: &[usize],
    m: usize,
    policy: ContextPolicy,
) -> Vec<ChoiceRecord> {
    let mut remaining: Vec<usize> = (0..m).collect();
    let mut records = Vec::with_capacity(ranking.len());
    for (pos, &chosen) in ranking.iter().enumerate() {
        let rank = pos + 1;
        let context = match policy.context_len(rank) {
            Some(l) => Context::Set(ranking[..l].to_vec()),
            None => Context::Forward,
        };
        records.push(ChoiceRecord {
            agent,
            rank,
            chosen,
            context,
            choice_set: remaining.clone(),
        });
        remaining.retain(|&a| a != chosen);
    }
    records
}

/// Repeated-selection decomposition of every ranking in `dataset`.
pub fn explode_rankings(dataset: &RankingDataset, policy: ContextPolicy) -> Result<ChoiceDataset> {
    dataset.validate()?;
    let m = dataset.m();
    let records = dataset
        .rankings
        .iter()
        .enumerate()
        .flat_map(|(i, r)| explode_ranking(i, r, m, policy))
        .collect();
    Ok(ChoiceDataset {
        catalog: Arc::clone(&dataset.catalog),
        covariates: Arc::clone(&dataset.covariates),
        policy,
        records,
    })
}

/// Summary statistics of a ranking dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub m: usize,
    pub n_schools: usize,
    pub n_program_types: usize,
    pub mean_length: f64,
    pub total_choices: usize,
    /// label name → label value → population fraction.
    pub group_fractions: BTreeMap<String, BTreeMap<String, f64>>,
}

pub fn summarize(dataset: &RankingDataset) -> DatasetSummary {
    let n = dataset.n();
    let total = dataset.total_choices();
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for labels in &dataset.group_labels {
        for (name, value) in labels {
            *counts
                .entry(name.clone())
                .or_default()
                .entry(value.clone())
                .or_default() += 1;
        }
    }
    let group_fractions = counts
        .into_iter()
        .map(|(name, values)| {
            let fr = values
                .into_iter()
                .map(|(v, c)| (v, c as f64 / n as f64))
                .collect();
            (name, fr)
        })
        .collect();
    DatasetSummary {
        n,
        m: dataset.m(),
        n_schools: dataset.catalog.n_schools(),
        n_program_types: dataset.catalog.n_ptypes(),
        mean_length: if n == 0 { 0.0 } else { total as f64 / n as f64 },
        total_choices: total,
        group_fractions,
    }
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<40} {:>10}",
            "No. participating households, n", self.n
        )?;
        writeln!(f, "{:<40} {:>10}", "Total offerings, m", self.m)?;
        writeln!(
            f,
            "{:<40} {:>10}",
            "No. unique schools, n_s", self.n_schools
        )?;
        writeln!(
            f,
            "{:<40} {:>10}",
            "No. unique program types, n_p", self.n_program_types
        )?;
        writeln!(
            f,
            "{:<40} {:>10.2}",
            "Avg. length of ranking, k", self.mean_length
        )?;
        writeln!(
            f,
            "{:<40} {:>10}",
            "Size of choice dataset, sum k_i", self.total_choices
        )?;
        for (name, values) in &self.group_fractions {
            for (value, fr) in values {
                let label = format!("Percent {name}={value}");
                writeln!(f, "{label:<40} {:>9.1}%", 100.0 * fr)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abcd() -> RankingDataset {
        let catalog = Arc::new(ProgramCatalog::simple(4));
        RankingDataset::new(
            catalog,
            vec!["1".into()],
            vec![vec![1, 3, 2]],
            Arc::new(Covariates::zeros(1, 4, vec![])),
            vec![BTreeMap::new()],
        )
        .unwrap()
    }

    fn contexts(ds: &ChoiceDataset) -> Vec<Vec<usize>> {
        ds.records
            .iter()
            .map(|r| match &r.context {
                Context::Set(a) => a.clone(),
                Context::Forward => panic!("forward"),
            })
            .collect()
    }

    #[test]
    fn worked_example_backward() {
        // U = {a,b,c,d}, R = (b,d,c)
        let ds = explode_rankings(&abcd(), ContextPolicy::Backward).unwrap();
        let sets: Vec<_> = ds.records.iter().map(|r| r.choice_set.clone()).collect();
        assert_eq!(sets, vec![vec![0, 1, 2, 3], vec![0, 2, 3], vec![0, 2]]);
        let chosen: Vec<_> = ds.records.iter().map(|r| r.chosen).collect();
        assert_eq!(chosen, vec![1, 3, 2]);
        assert_eq!(contexts(&ds), vec![vec![], vec![1], vec![1, 3]]);
    }

    #[test]
    fn top1_truncates() {
        let ds = explode_rankings(&abcd(), ContextPolicy::TopK(1)).unwrap();
        assert_eq!(contexts(&ds), vec![vec![], vec![1], vec![1]]);
        let ds = explode_rankings(&abcd(), ContextPolicy::TopK(0)).unwrap();
        assert!(contexts(&ds).iter().all(Vec::is_empty));
    }

    #[test]
    fn forward_is_marker() {
        let ds = explode_rankings(&abcd(), ContextPolicy::Forward).unwrap();
        assert!(ds.records.iter().all(|r| r.context == Context::Forward));
    }

    #[test]
    fn single_item_ranking() {
        let records = explode_ranking(0, &[2], 4, ContextPolicy::Backward);
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].context, Context::empty());
        assert_eq!(records[0].choice_set, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_repeats_and_out_of_range() {
        let mut ds = abcd();
        ds.rankings[0] = vec![1, 1];
        assert!(matches!(
            explode_rankings(&ds, ContextPolicy::Backward),
            Err(Error::InvalidRanking { .. })
        ));
        ds.rankings[0] = vec![4];
        assert!(explode_rankings(&ds, ContextPolicy::Backward).is_err());
    }

    #[test]
    fn policy_parse_roundtrip() {
        for p in [
            ContextPolicy::Backward,
            ContextPolicy::Forward,
            ContextPolicy::TopK(3),
        ] {
            assert_eq!(p.to_string().parse::<ContextPolicy>().unwrap(), p);
        }
        assert!("topk:x".parse::<ContextPolicy>().is_err());
    }

    #[test]
    fn summary_constant_lengths() {
        let m = 8;
        let n = 100;
        let catalog = Arc::new(ProgramCatalog::simple(m));
        let ds = RankingDataset::new(
            catalog,
            (0..n).map(|i| i.to_string()).collect(),
            (0..n)
                .map(|i| (0..5).map(|j| (i + j) % m).collect())
                .collect(),
            Arc::new(Covariates::zeros(n, m, vec![])),
            vec![BTreeMap::new(); n],
        )
        .unwrap();
        let s = summarize(&ds);
        assert_eq!(s.mean_length, 5.0);
        assert_eq!(s.total_choices, 500);
        assert!(s.group_fractions.is_empty());
        assert!(!s.to_string().contains("Percent"));
    }

    #[test]
    fn summary_of_a_district_scale_fixture() {
        let (n, m) = (5115, 154);
        let rows: Vec<[String; 4]> = (0..m)
            .map(|j| {
                [
                    format!("p{j}"),
                    format!("s{}", j % 72),
                    format!("t{}", j % 22),
                    "all".into(),
                ]
            })
            .collect();
        let catalog = Arc::new(ProgramCatalog::from_rows(&rows).unwrap());
        // 3847 rankings of length 10 and the rest of length 9 give 49882 choices.
        let rankings = (0..n)
            .map(|i| {
                (0..9 + usize::from(i < 3847))
                    .map(|j| (i + j) % m)
                    .collect()
            })
            .collect();
        let labels = (0..n)
            .map(|i| BTreeMap::from([("ctip1".to_string(), (i % 5 == 0).to_string())]))
            .collect();
        let ds = RankingDataset::new(
            catalog,
            (0..n).map(|i| i.to_string()).collect(),
            rankings,
            Arc::new(Covariates::zeros(n, m, vec![])),
            labels,
        )
        .unwrap();
        let s = summarize(&ds);
        assert_eq!(
            (s.n, s.m, s.n_schools, s.n_program_types),
            (5115, 154, 72, 22)
        );
        assert_eq!(s.total_choices, 49882);
        assert!((s.mean_length - 49882.0 / 5115.0).abs() < 1e-12);
        assert!((s.group_fractions["ctip1"]["true"] - 1023.0 / 5115.0).abs() < 1e-12);
        let text = s.to_string();
        assert!(text.contains("9.75"));
        assert!(text.contains("49882"));
        assert!(text.contains("20.0%"));
    }
}
