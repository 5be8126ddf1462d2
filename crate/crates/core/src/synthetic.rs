//! Synthetic school districts: geography, program catalogs, priority-style
//! labels expanded into covariates, and ranking datasets sampled from a
//! ground-truth model.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ContextPolicy, Covariates, ProgramCatalog, RankingDataset};
use crate::error::{Error, Result};
use crate::estimation::Fitted;
use crate::model::{draw_index, ContextAggregation, Family, FamilyKind, ModelParams};

/// Every feature the generator can emit, in the fixed column order.
pub const FEATURES: [&str; 12] = [
    "distance",
    "sqrt_distance",
    "sqrt_distance_x_ctip1",
    "within_half_mile",
    "bus_route",
    "sibling_match",
    "language_match",
    "attendance_area",
    "prek_tk_continuation",
    "avg_color_x_ctip1",
    "frac_reduced_lunch_x_ctip1",
    "before_after_school_x_ctip1",
];

const LANGUAGES: [&str; 3] = ["spanish", "cantonese", "korean"];
const GROUPS: [&str; 5] = ["group1", "group2", "group3", "group4", "group5"];
const GROUP_PRIOR: [f64; 5] = [0.35, 0.25, 0.2, 0.12, 0.08];

/// How alternatives are grouped into nests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NestScheme {
    #[default]
    ByProgramType,
    Single,
}

/// Distribution of ranking lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LengthDistribution {
    /// Every agent ranks all alternatives.
    Full,
    Fixed {
        length: usize,
    },
    Uniform {
        min: usize,
        max: usize,
    },
}

impl Default for LengthDistribution {
    fn default() -> Self {
        LengthDistribution::Uniform { min: 1, max: 12 }
    }
}

impl LengthDistribution {
    pub fn validate(&self, m: usize) -> Result<()> {
        let ok = match *self {
            LengthDistribution::Full => true,
            LengthDistribution::Fixed { length } => (1..=m).contains(&length),
            LengthDistribution::Uniform { min, max } => min >= 1 && min <= max && max <= m,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "ranking lengths {self:?} not supported on 1..={m}"
            )))
        }
    }

    fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> usize {
        match *self {
            LengthDistribution::Full => m,
            LengthDistribution::Fixed { length } => length,
            LengthDistribution::Uniform { min, max } => rng.random_range(min..=max),
        }
    }
}

/// Declarative description of a synthetic district.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistrictSpec {
    pub n: usize,
    pub m: usize,
    pub n_schools: usize,
    pub n_ptypes: usize,
    pub nest_scheme: NestScheme,
    /// Subset of [`FEATURES`]; emitted in the fixed order regardless of
    /// the order given here.
    pub features: Vec<String>,
    /// Side of the square district, in miles.
    pub extent_miles: f64,
    pub household_clusters: usize,
    /// Standard deviation of household placement around a cluster centre,
    /// as a fraction of the side.
    pub cluster_spread: f64,
    pub ctip1_fraction: f64,
    pub sibling_fraction: f64,
    pub prek_fraction: f64,
    pub language_fraction: f64,
    /// Make the last program type a rare one.
    pub rare_program_type: bool,
    pub lengths: LengthDistribution,
    pub seed: u64,
}

impl Default for DistrictSpec {
    fn default() -> Self {
        DistrictSpec {
            n: 1000,
            m: 40,
            n_schools: 15,
            n_ptypes: 5,
            nest_scheme: NestScheme::ByProgramType,
            features: FEATURES.iter().map(|s| s.to_string()).collect(),
            extent_miles: 7.0,
            household_clusters: 6,
            cluster_spread: 0.12,
            ctip1_fraction: 0.2,
            sibling_fraction: 0.15,
            prek_fraction: 0.1,
            language_fraction: 0.25,
            rare_program_type: true,
            lengths: LengthDistribution::default(),
            seed: 0,
        }
    }
}

impl DistrictSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n == 0 || self.m == 0 || self.n_schools == 0 || self.n_ptypes == 0 {
            return bad("n, m, n_schools and n_ptypes must be positive".into());
        }
        if self.n_schools > self.m {
            return bad(format!(
                "{} schools cannot fit in {} alternatives",
                self.n_schools, self.m
            ));
        }
        if self.n_ptypes > 1 && self.m - self.n_schools < self.n_ptypes - 1 {
            return bad(format!(
                "{} program types need at least {} alternatives beyond one per school",
                self.n_ptypes,
                self.n_ptypes - 1
            ));
        }
        for (name, v) in [
            ("ctip1_fraction", self.ctip1_fraction),
            ("sibling_fraction", self.sibling_fraction),
            ("prek_fraction", self.prek_fraction),
            ("language_fraction", self.language_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if !(self.extent_miles > 0.0)
            || !(self.cluster_spread >= 0.0)
            || self.household_clusters == 0
        {
            return bad("geography parameters must be positive".into());
        }
        for f in &self.features {
            if !FEATURES.contains(&f.as_str()) {
                return bad(format!("unknown feature {f:?}"));
            }
        }
        self.lengths.validate(self.m)
    }

    /// Selected features in the fixed column order.
    pub fn feature_names(&self) -> Vec<String> {
        FEATURES
            .iter()
            .filter(|f| self.features.iter().any(|g| g == *f))
            .map(|f| f.to_string())
            .collect()
    }
}

/// School-level attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct School {
    pub x: f64,
    pub y: f64,
    pub bus_radius: f64,
    pub avg_color: f64,
    pub frac_reduced_lunch: f64,
    pub before_after_school: bool,
}

/// A generated district: catalog, covariates and per-agent labels.
#[derive(Debug, Clone)]
pub struct District {
    pub catalog: Arc<ProgramCatalog>,
    pub covariates: Arc<Covariates>,
    pub agent_ids: Vec<String>,
    pub labels: Vec<BTreeMap<String, String>>,
    pub schools: Vec<School>,
    /// Home coordinates in miles.
    pub homes: Vec<(f64, f64)>,
    /// Language of each alternative, if it is a language program.
    pub program_language: Vec<Option<String>>,
}

fn agent_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Labels an agent carries before covariates are derived.
struct AgentDraw {
    home: (f64, f64),
    ctip1: bool,
    sibling: Option<usize>,
    prek: Option<usize>,
    language: Option<usize>,
    group: usize,
}

/// Generates a district from `spec`. Deterministic in `spec.seed`.
pub fn generate_district(spec: &DistrictSpec) -> Result<District> {
    spec.validate()?;
    let mut rng = agent_rng(spec.seed, 0);
    let ext = spec.extent_miles;

    let schools: Vec<School> = (0..spec.n_schools)
        .map(|_| School {
            x: rng.random::<f64>() * ext,
            y: rng.random::<f64>() * ext,
            bus_radius: rng.random_range(0.5..2.0),
            avg_color: rng.random_range(1.0..5.0),
            frac_reduced_lunch: rng.random(),
            before_after_school: rng.random_bool(0.5),
        })
        .collect();

    // Program types: "GE" first, then P1.., the last renamed "SE" when rare.
    let mut ptypes: Vec<String> = (0..spec.n_ptypes)
        .map(|p| {
            if p == 0 {
                "GE".to_string()
            } else {
                format!("P{p}")
            }
        })
        .collect();
    let rare = spec.rare_program_type && spec.n_ptypes >= 3;
    if rare {
        *ptypes.last_mut().expect("at least one program type") = "SE".to_string();
    }
    let mut school_of: Vec<usize> = (0..spec.n_schools).collect();
    let mut ptype_of: Vec<usize> = vec![0; spec.n_schools];
    let common = if rare {
        spec.n_ptypes - 2
    } else {
        spec.n_ptypes - 1
    };
    for q in 0..spec.m - spec.n_schools {
        school_of.push(rng.random_range(0..spec.n_schools));
        let p = if q + 1 < spec.n_ptypes {
            1 + q
        } else if common == 0 {
            0
        } else {
            1 + rng.random_range(0..common)
        };
        ptype_of.push(p);
    }
    let nest_of = match spec.nest_scheme {
        NestScheme::ByProgramType => ptype_of.clone(),
        NestScheme::Single => vec![0; spec.m],
    };
    let nests = match spec.nest_scheme {
        NestScheme::ByProgramType => ptypes.clone(),
        NestScheme::Single => vec!["all".to_string()],
    };
    let alternatives: Vec<String> = (0..spec.m)
        .map(|j| format!("S{:02}-{}-{j}", school_of[j], ptypes[ptype_of[j]]))
        .collect();
    let program_language: Vec<Option<String>> = (0..spec.m)
        .map(|j| {
            let p = ptype_of[j];
            let is_language = p != 0 && !(rare && p == spec.n_ptypes - 1) && rng.random_bool(0.5);
            is_language.then(|| LANGUAGES[rng.random_range(0..LANGUAGES.len())].to_string())
        })
        .collect();
    let catalog = ProgramCatalog::new(
        alternatives,
        (0..spec.n_schools).map(|s| format!("S{s:02}")).collect(),
        ptypes,
        nests,
        school_of,
        ptype_of,
        nest_of,
    )?;

    let centres: Vec<(f64, f64)> = (0..spec.household_clusters)
        .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    let spread = Normal::new(0.0, spec.cluster_spread.max(1e-12))
        .map_err(|e| Error::Config(e.to_string()))?;

    let draws: Vec<AgentDraw> = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut r = agent_rng(spec.seed, 1 + i as u64);
            let (cx, cy) = centres[r.random_range(0..centres.len())];
            let hx = (cx + spread.sample(&mut r)).clamp(0.0, 1.0) * ext;
            let hy = (cy + spread.sample(&mut r)).clamp(0.0, 1.0) * ext;
            let ctip1 = r.random_bool(spec.ctip1_fraction);
            let sibling = r
                .random_bool(spec.sibling_fraction)
                .then(|| r.random_range(0..spec.n_schools));
            let prek = r
                .random_bool(spec.prek_fraction)
                .then(|| r.random_range(0..spec.n_schools));
            let language = r
                .random_bool(spec.language_fraction)
                .then(|| r.random_range(0..LANGUAGES.len()));
            let group = draw_index(&GROUP_PRIOR, &mut r);
            AgentDraw {
                home: (hx, hy),
                ctip1,
                sibling,
                prek,
                language,
                group,
            }
        })
        .collect();

    let names = spec.feature_names();
    let d = names.len();
    let m = spec.m;
    let blocks: Vec<(Vec<f64>, BTreeMap<String, String>)> = draws
        .par_iter()
        .map(|a| {
            let dist_to = |s: &School| ((s.x - a.home.0).powi(2) + (s.y - a.home.1).powi(2)).sqrt();
            let attendance = (0..schools.len())
                .min_by(|&p, &q| dist_to(&schools[p]).total_cmp(&dist_to(&schools[q])))
                .expect("at least one school");
            let ctip = if a.ctip1 { 1.0 } else { 0.0 };
            let mut block = Vec::with_capacity(m * d);
            for j in 0..m {
                let s = catalog.school_of[j];
                let school = &schools[s];
                let dist = dist_to(school);
                let lang_match = match (&program_language[j], a.language) {
                    (Some(l), Some(k)) => l == LANGUAGES[k],
                    _ => false,
                };
                for name in &names {
                    let v = match name.as_str() {
                        "distance" => dist,
                        "sqrt_distance" => dist.sqrt(),
                        "sqrt_distance_x_ctip1" => dist.sqrt() * ctip,
                        "within_half_mile" => indicator(dist < 0.5),
                        "bus_route" => indicator(dist < school.bus_radius),
                        "sibling_match" => indicator(a.sibling == Some(s)),
                        "language_match" => indicator(lang_match),
                        "attendance_area" => indicator(attendance == s),
                        "prek_tk_continuation" => indicator(a.prek == Some(s)),
                        "avg_color_x_ctip1" => school.avg_color * ctip,
                        "frac_reduced_lunch_x_ctip1" => school.frac_reduced_lunch * ctip,
                        "before_after_school_x_ctip1" => {
                            indicator(school.before_after_school) * ctip
                        }
                        _ => unreachable!("features validated"),
                    };
                    block.push(v);
                }
            }
            let mut labels = BTreeMap::new();
            let priority = if a.sibling.is_some() {
                "sibling"
            } else if a.prek.is_some() {
                "prek_tk"
            } else if a.ctip1 {
                "ctip1"
            } else {
                "attendance_area"
            };
            labels.insert("priority".to_string(), priority.to_string());
            labels.insert(
                "ctip1".to_string(),
                if a.ctip1 { "yes" } else { "no" }.to_string(),
            );
            labels.insert("ethnicity".to_string(), GROUPS[a.group].to_string());
            labels.insert(
                "home_language".to_string(),
                a.language.map_or("english", |k| LANGUAGES[k]).to_string(),
            );
            (block, labels)
        })
        .collect();

    let mut values = Vec::with_capacity(spec.n * m * d);
    let mut labels = Vec::with_capacity(spec.n);
    for (block, l) in blocks {
        values.extend(block);
        labels.push(l);
    }
    let covariates = Covariates::new(spec.n, m, names, values)?;
    Ok(District {
        catalog: Arc::new(catalog),
        covariates: Arc::new(covariates),
        agent_ids: (0..spec.n).map(|i| format!("A{i:06}")).collect(),
        labels,
        schools,
        homes: draws.iter().map(|a| a.home).collect(),
        program_language,
    })
}

#[inline]
fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Samples rankings from `truth` on `district`: lengths from `lengths`,
/// then the first `k_i` entries of a sequentially sampled ranking, each
/// step governed by the stratum of its rank. Adds a
/// "first_program_type" label.
pub fn sample_dataset(
    district: &District,
    truth: &Fitted,
    policy: ContextPolicy,
    lengths: LengthDistribution,
    seed: u64,
) -> Result<RankingDataset> {
    let catalog = &district.catalog;
    let cov = &district.covariates;
    truth.check(catalog, cov.d())?;
    lengths.validate(catalog.m())?;
    let m = catalog.m();
    let rankings: Vec<Vec<usize>> = (0..cov.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = agent_rng(seed, i as u64);
            let k = lengths.sample(m, &mut rng);
            truth.sample_prefix(catalog, cov, i, policy, k, &mut rng)
        })
        .collect();
    let labels: Vec<BTreeMap<String, String>> = district
        .labels
        .iter()
        .zip(&rankings)
        .map(|(l, r)| {
            let mut l = l.clone();
            l.insert(
                "first_program_type".to_string(),
                catalog.program_types[catalog.ptype_of[r[0]]].clone(),
            );
            l
        })
        .collect();
    RankingDataset::new(
        Arc::clone(catalog),
        district.agent_ids.clone(),
        rankings,
        Arc::clone(cov),
        labels,
    )
}

/// Covariate weight used by [`default_truth`] for a named feature.
pub fn default_weight(feature: &str) -> f64 {
    match feature {
        "distance" => -0.6,
        "sqrt_distance" => -0.8,
        "sqrt_distance_x_ctip1" => 0.3,
        "within_half_mile" => 0.5,
        "bus_route" => 0.2,
        "sibling_match" => 3.0,
        "language_match" => 1.2,
        "attendance_area" => 0.8,
        "prek_tk_continuation" => 1.5,
        "avg_color_x_ctip1" => 0.2,
        "frac_reduced_lunch_x_ctip1" => -0.5,
        "before_after_school_x_ctip1" => 0.3,
        _ => 0.0,
    }
}

/// Low-rank CDM whose context effect is a program-type affinity:
/// `t_j = strength[p(j)] e_{p(j)}`, `c_k = e_{p(k)}`, so `u_jk` is
/// `strength[p(j)]` when `j` and `k` share a program type and zero
/// otherwise. Fixed effects and β are copied from `base`.
pub fn block_affinity_cdm(
    base: &ModelParams,
    catalog: &ProgramCatalog,
    strength: &[f64],
    policy: ContextPolicy,
) -> Result<ModelParams> {
    let r = catalog.n_ptypes();
    if strength.len() != r {
        return Err(Error::Dimension(format!(
            "{} affinity strengths for {r} program types",
            strength.len()
        )));
    }
    let m = catalog.m();
    let mut target = Array2::zeros((m, r));
    let mut context = Array2::zeros((m, r));
    for j in 0..m {
        let p = catalog.ptype_of[j];
        target[[j, p]] = strength[p];
        context[[j, p]] = 1.0;
    }
    Ok(ModelParams {
        delta_school: base.delta_school.clone(),
        delta_ptype: base.delta_ptype.clone(),
        beta: base.beta.clone(),
        offset: Vec::new(),
        family: Family::CdmLowRank {
            target,
            context,
            policy,
            aggregation: ContextAggregation::Mean,
        },
    })
}

/// A ground truth for `district`: random fixed effects, the default
/// covariate weights, and for context-dependent kinds a program-type
/// affinity (stronger for the rare program type).
pub fn default_truth(
    district: &District,
    kind: FamilyKind,
    policy: ContextPolicy,
    seed: u64,
) -> Result<ModelParams> {
    let catalog = &district.catalog;
    let mut rng = agent_rng(seed, u64::MAX);
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    let mut linear = ModelParams::zeros(
        FamilyKind::Linear,
        catalog,
        district.covariates.d(),
        0,
        policy,
    );
    linear
        .delta_school
        .iter_mut()
        .for_each(|v| *v = normal.sample(&mut rng));
    for (p, v) in linear.delta_ptype.iter_mut().enumerate() {
        *v = if p == 0 { 0.0 } else { normal.sample(&mut rng) };
    }
    for (b, name) in linear
        .beta
        .iter_mut()
        .zip(&district.covariates.feature_names)
    {
        *b = default_weight(name);
    }
    match kind {
        FamilyKind::Linear => Ok(linear),
        FamilyKind::Fixed => {
            let mut p = ModelParams::zeros(FamilyKind::Fixed, catalog, 0, 0, policy);
            p.delta_school = linear.delta_school;
            p.delta_ptype = linear.delta_ptype;
            Ok(p)
        }
        FamilyKind::Cdm => {
            let strength: Vec<f64> = catalog
                .program_types
                .iter()
                .map(|p| if p == "SE" { 4.0 } else { 2.0 })
                .collect();
            block_affinity_cdm(&linear, catalog, &strength, policy)
        }
        FamilyKind::CdmFull => {
            let m = catalog.m();
            let mut u = Array2::zeros((m, m));
            for j in 0..m {
                for k in 0..m {
                    if j != k && catalog.ptype_of[j] == catalog.ptype_of[k] {
                        u[[j, k]] = 2.0;
                    }
                }
            }
            Ok(ModelParams {
                family: Family::CdmFull {
                    interactions: u,
                    policy,
                    aggregation: ContextAggregation::Mean,
                },
                ..linear
            })
        }
        FamilyKind::Nested => Ok(ModelParams {
            family: Family::Nested {
                scales: vec![0.6; catalog.n_nests()],
            },
            ..linear
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DistrictSpec {
        DistrictSpec {
            n: 200,
            m: 20,
            n_schools: 8,
            n_ptypes: 4,
            seed: 3,
            ..DistrictSpec::default()
        }
    }

    #[test]
    fn derived_features_are_consistent() {
        let spec = small_spec();
        let d = generate_district(&spec).unwrap();
        let names = &d.covariates.feature_names;
        let col = |n: &str| names.iter().position(|f| f == n).unwrap();
        for i in 0..spec.n {
            let ctip = d.labels[i]["ctip1"] == "yes";
            for j in 0..spec.m {
                let row = d.covariates.row(i, j);
                let dist = row[col("distance")];
                assert!((row[col("sqrt_distance")] - dist.sqrt()).abs() <= 1e-12);
                assert_eq!(row[col("within_half_mile")], indicator(dist < 0.5));
                if !ctip {
                    for f in [
                        "sqrt_distance_x_ctip1",
                        "avg_color_x_ctip1",
                        "frac_reduced_lunch_x_ctip1",
                        "before_after_school_x_ctip1",
                    ] {
                        assert_eq!(row[col(f)], 0.0);
                    }
                }
                for f in [
                    "bus_route",
                    "sibling_match",
                    "language_match",
                    "attendance_area",
                ] {
                    assert!(row[col(f)] == 0.0 || row[col(f)] == 1.0);
                }
            }
        }
    }

    #[test]
    fn catalog_shape() {
        let spec = small_spec();
        let d = generate_district(&spec).unwrap();
        assert_eq!(d.catalog.m(), 20);
        assert_eq!(d.catalog.n_schools(), 8);
        assert_eq!(d.catalog.n_ptypes(), 4);
        for p in 0..4 {
            assert!(d.catalog.ptype_of.contains(&p));
        }
        assert_eq!(d.catalog.n_nests(), 4);
        assert_eq!(d.catalog.program_types[3], "SE");
    }

    #[test]
    fn regeneration_is_identical() {
        let spec = small_spec();
        let a = generate_district(&spec).unwrap();
        let b = generate_district(&spec).unwrap();
        assert_eq!(a.covariates, b.covariates);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.catalog, b.catalog);
    }

    #[test]
    fn infeasible_specs() {
        let spec = DistrictSpec {
            n_schools: 30,
            m: 20,
            ..small_spec()
        };
        assert!(generate_district(&spec).is_err());
        let spec = DistrictSpec {
            features: vec!["shoe_size".into()],
            ..small_spec()
        };
        assert!(generate_district(&spec).is_err());
        let d = generate_district(&small_spec()).unwrap();
        let truth: Fitted = default_truth(&d, FamilyKind::Linear, ContextPolicy::Backward, 0)
            .unwrap()
            .into();
        let r = sample_dataset(
            &d,
            &truth,
            ContextPolicy::Backward,
            LengthDistribution::Fixed { length: 21 },
            0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn full_lengths_give_permutations() {
        let d = generate_district(&small_spec()).unwrap();
        let truth: Fitted = default_truth(&d, FamilyKind::Cdm, ContextPolicy::Backward, 1)
            .unwrap()
            .into();
        let ds = sample_dataset(
            &d,
            &truth,
            ContextPolicy::Backward,
            LengthDistribution::Full,
            5,
        )
        .unwrap();
        assert!(ds.rankings.iter().all(|r| r.len() == 20));
        assert!(ds
            .group_labels
            .iter()
            .all(|l| l.contains_key("first_program_type")));
    }
}
