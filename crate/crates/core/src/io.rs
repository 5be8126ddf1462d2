//! On-disk dataset formats.
//!
//! Delimited tables live in one directory:
//!
//! * `catalog.csv`   : `alternative,school,program_type,nest`
//! * `rankings.csv`  : `agent,rank,alternative` (rank is 1-based)
//! * `covariates.csv`: `agent,alternative,<feature_1>,...,<feature_d>`
//! * `labels.csv`    : `agent,label_name,label_value` (optional)
//!
//! The structured-record format is a single JSON document bundling the same
//! information (see [`DatasetBundle`]).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Covariates, ProgramCatalog, RankingDataset};
use crate::error::{Error, Result};

pub const CATALOG_FILE: &str = "catalog.csv";
pub const RANKINGS_FILE: &str = "rankings.csv";
pub const COVARIATES_FILE: &str = "covariates.csv";
pub const LABELS_FILE: &str = "labels.csv";

const CATALOG_HEADER: [&str; 4] = ["alternative", "school", "program_type", "nest"];
const RANKINGS_HEADER: [&str; 3] = ["agent", "rank", "alternative"];
const LABELS_HEADER: [&str; 3] = ["agent", "label_name", "label_value"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    /// Directory of CSV tables.
    Delimited,
    /// Single JSON bundle.
    Structured,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delimited" | "csv" => Ok(DataFormat::Delimited),
            "structured" | "json" => Ok(DataFormat::Structured),
            _ => Err(Error::Config(format!("unknown data format {s:?}"))),
        }
    }
}

impl DataFormat {
    /// Structured when `path` is a `.json` file, delimited otherwise.
    pub fn infer(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => DataFormat::Structured,
            _ => DataFormat::Delimited,
        }
    }
}

pub fn load_rankings(path: &Path, format: DataFormat) -> Result<RankingDataset> {
    match format {
        DataFormat::Delimited => load_delimited(path),
        DataFormat::Structured => load_structured(path),
    }
}

pub fn save_rankings(dataset: &RankingDataset, path: &Path, format: DataFormat) -> Result<()> {
    match format {
        DataFormat::Delimited => save_delimited(dataset, path),
        DataFormat::Structured => save_structured(dataset, path),
    }
}

fn file_name(path: &Path) -> String {
    path.display().to_string()
}

fn open_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn check_header(
    path: &Path,
    reader: &mut csv::Reader<fs::File>,
    expected: &[&str],
) -> Result<csv::StringRecord> {
    let header = reader.headers()?.clone();
    let ok =
        header.len() >= expected.len() && expected.iter().zip(header.iter()).all(|(e, h)| *e == h);
    if !ok {
        return Err(Error::Schema {
            file: file_name(path),
            record: 0,
            message: format!(
                "header {:?} does not start with {:?}",
                header.iter().collect::<Vec<_>>(),
                expected
            ),
        });
    }
    Ok(header)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file_name(path),
        line,
        message: message.into(),
    }
}

fn load_catalog(path: &Path) -> Result<ProgramCatalog> {
    let mut reader = open_reader(path)?;
    check_header(path, &mut reader, &CATALOG_HEADER)?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, i + 2, e.to_string()))?;
        if rec.len() != 4 {
            return Err(Error::Schema {
                file: file_name(path),
                record: i + 1,
                message: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        rows.push([
            rec[0].to_string(),
            rec[1].to_string(),
            rec[2].to_string(),
            rec[3].to_string(),
        ]);
    }
    ProgramCatalog::from_rows(&rows)
}

fn load_delimited(dir: &Path) -> Result<RankingDataset> {
    let catalog = load_catalog(&dir.join(CATALOG_FILE))?;
    let m = catalog.m();
    let alt_index: HashMap<&str, usize> = catalog
        .alternatives
        .iter()
        .enumerate()
        .map(|(i, a)| (a.as_str(), i))
        .collect();

    // Rankings: each agent's rows form one contiguous block.
    let path = dir.join(RANKINGS_FILE);
    let mut reader = open_reader(&path)?;
    check_header(&path, &mut reader, &RANKINGS_HEADER)?;
    let mut agent_ids: Vec<String> = Vec::new();
    let mut agent_index: HashMap<String, usize> = HashMap::new();
    let mut raw: Vec<Vec<(usize, usize)>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let record = i + 1;
        let rec = rec.map_err(|e| parse_err(&path, i + 2, e.to_string()))?;
        if rec.len() != 3 {
            return Err(Error::Schema {
                file: file_name(&path),
                record,
                message: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        let id = &rec[0];
        let rank: usize = rec[1]
            .parse()
            .map_err(|_| parse_err(&path, i + 2, format!("bad rank {:?}", &rec[1])))?;
        let alt = *alt_index
            .get(&rec[2])
            .ok_or_else(|| Error::UnknownAlternative {
                file: file_name(&path),
                record,
                label: rec[2].to_string(),
            })?;
        let slot = match agent_index.get(id) {
            Some(&a) if a + 1 == agent_ids.len() => a,
            Some(_) => {
                return Err(Error::DuplicateAgent {
                    file: file_name(&path),
                    record,
                    id: id.to_string(),
                })
            }
            None => {
                agent_index.insert(id.to_string(), agent_ids.len());
                agent_ids.push(id.to_string());
                raw.push(Vec::new());
                agent_ids.len() - 1
            }
        };
        raw[slot].push((rank, alt));
    }
    let mut rankings = Vec::with_capacity(raw.len());
    for (a, mut rows) in raw.into_iter().enumerate() {
        rows.sort_by_key(|&(rank, _)| rank);
        if rows
            .iter()
            .enumerate()
            .any(|(pos, &(rank, _))| rank != pos + 1)
        {
            return Err(Error::Schema {
                file: file_name(&path),
                record: 0,
                message: format!("ranks of agent {:?} are not 1..k", agent_ids[a]),
            });
        }
        rankings.push(rows.into_iter().map(|(_, alt)| alt).collect::<Vec<_>>());
    }
    let n = agent_ids.len();

    // Covariates.
    let path = dir.join(COVARIATES_FILE);
    let mut reader = open_reader(&path)?;
    let header = check_header(&path, &mut reader, &["agent", "alternative"])?;
    let feature_names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let d = feature_names.len();
    let mut values = vec![0.0; n * m * d];
    let mut filled = vec![false; n * m];
    for (i, rec) in reader.records().enumerate() {
        let record = i + 1;
        let rec = rec.map_err(|e| parse_err(&path, i + 2, e.to_string()))?;
        if rec.len() != d + 2 {
            return Err(Error::Schema {
                file: file_name(&path),
                record,
                message: format!("expected {} fields, found {}", d + 2, rec.len()),
            });
        }
        let agent = *agent_index.get(&rec[0]).ok_or_else(|| Error::Schema {
            file: file_name(&path),
            record,
            message: format!("agent {:?} has no ranking", &rec[0]),
        })?;
        let alt = *alt_index
            .get(&rec[1])
            .ok_or_else(|| Error::UnknownAlternative {
                file: file_name(&path),
                record,
                label: rec[1].to_string(),
            })?;
        let cell = agent * m + alt;
        if filled[cell] {
            return Err(Error::Schema {
                file: file_name(&path),
                record,
                message: format!("duplicate covariate row for ({}, {})", &rec[0], &rec[1]),
            });
        }
        filled[cell] = true;
        for (f, field) in rec.iter().skip(2).enumerate() {
            values[cell * d + f] = field
                .parse()
                .map_err(|_| parse_err(&path, i + 2, format!("bad number {field:?}")))?;
        }
    }
    if let Some(cell) = filled.iter().position(|f| !f) {
        return Err(Error::Schema {
            file: file_name(&path),
            record: 0,
            message: format!(
                "missing covariates for agent {:?}, alternative {:?}",
                agent_ids[cell / m],
                catalog.alternatives[cell % m]
            ),
        });
    }
    let covariates = Covariates::new(n, m, feature_names, values)?;

    // Optional labels.
    let mut group_labels = vec![BTreeMap::new(); n];
    let path = dir.join(LABELS_FILE);
    if path.exists() {
        let mut reader = open_reader(&path)?;
        check_header(&path, &mut reader, &LABELS_HEADER)?;
        for (i, rec) in reader.records().enumerate() {
            let record = i + 1;
            let rec = rec.map_err(|e| parse_err(&path, i + 2, e.to_string()))?;
            if rec.len() != 3 {
                return Err(Error::Schema {
                    file: file_name(&path),
                    record,
                    message: format!("expected 3 fields, found {}", rec.len()),
                });
            }
            let agent = *agent_index.get(&rec[0]).ok_or_else(|| Error::Schema {
                file: file_name(&path),
                record,
                message: format!("label for unknown agent {:?}", &rec[0]),
            })?;
            group_labels[agent].insert(rec[1].to_string(), rec[2].to_string());
        }
    }

    RankingDataset::new(
        Arc::new(catalog),
        agent_ids,
        rankings,
        Arc::new(covariates),
        group_labels,
    )
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn save_catalog(catalog: &ProgramCatalog, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(CATALOG_HEADER)?;
    for j in 0..catalog.m() {
        w.write_record([
            catalog.alternatives[j].as_str(),
            catalog.schools[catalog.school_of[j]].as_str(),
            catalog.program_types[catalog.ptype_of[j]].as_str(),
            catalog.nests[catalog.nest_of[j]].as_str(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn save_delimited(dataset: &RankingDataset, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let catalog = &dataset.catalog;
    save_catalog(catalog, &dir.join(CATALOG_FILE))?;

    let path = dir.join(RANKINGS_FILE);
    let mut w = writer(&path)?;
    w.write_record(RANKINGS_HEADER)?;
    for (id, ranking) in dataset.agent_ids.iter().zip(&dataset.rankings) {
        for (pos, &alt) in ranking.iter().enumerate() {
            w.write_record([
                id.as_str(),
                &(pos + 1).to_string(),
                catalog.alternatives[alt].as_str(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(COVARIATES_FILE);
    let mut w = writer(&path)?;
    let mut header = vec!["agent".to_string(), "alternative".to_string()];
    header.extend(dataset.covariates.feature_names.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in dataset.agent_ids.iter().enumerate() {
        for (j, alt) in catalog.alternatives.iter().enumerate() {
            let mut row = vec![id.clone(), alt.clone()];
            row.extend(dataset.covariates.row(i, j).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(LABELS_FILE);
    if dataset.group_labels.iter().any(|l| !l.is_empty()) {
        let mut w = writer(&path)?;
        w.write_record(LABELS_HEADER)?;
        for (id, labels) in dataset.agent_ids.iter().zip(&dataset.group_labels) {
            for (name, value) in labels {
                w.write_record([id.as_str(), name.as_str(), value.as_str()])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    } else if path.exists() {
        fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// One catalog row of the structured format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub alternative: String,
    pub school: String,
    pub program_type: String,
    pub nest: String,
}

/// One agent of the structured format. `covariates` holds one row of
/// `feature_names.len()` values per catalog alternative, in catalog order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentRecord {
    pub id: String,
    pub ranking: Vec<String>,
    pub covariates: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
}

/// Structured-record dataset: catalog, feature names and agents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub catalog: Vec<CatalogEntry>,
    pub feature_names: Vec<String>,
    pub agents: Vec<AgentRecord>,
}

impl DatasetBundle {
    pub fn from_dataset(dataset: &RankingDataset) -> Self {
        let c = &dataset.catalog;
        let catalog = (0..c.m())
            .map(|j| CatalogEntry {
                alternative: c.alternatives[j].clone(),
                school: c.schools[c.school_of[j]].clone(),
                program_type: c.program_types[c.ptype_of[j]].clone(),
                nest: c.nests[c.nest_of[j]].clone(),
            })
            .collect();
        let agents = (0..dataset.n())
            .map(|i| AgentRecord {
                id: dataset.agent_ids[i].clone(),
                ranking: dataset.rankings[i]
                    .iter()
                    .map(|&a| c.alternatives[a].clone())
                    .collect(),
                covariates: (0..c.m())
                    .map(|j| dataset.covariates.row(i, j).to_vec())
                    .collect(),
                labels: dataset.group_labels[i].clone(),
            })
            .collect();
        DatasetBundle {
            catalog,
            feature_names: dataset.covariates.feature_names.clone(),
            agents,
        }
    }

    pub fn into_dataset(self, file: &str) -> Result<RankingDataset> {
        let rows: Vec<[String; 4]> = self
            .catalog
            .into_iter()
            .map(|e| [e.alternative, e.school, e.program_type, e.nest])
            .collect();
        let catalog = ProgramCatalog::from_rows(&rows)?;
        let m = catalog.m();
        let d = self.feature_names.len();
        let n = self.agents.len();
        let mut ids = HashMap::new();
        let mut agent_ids = Vec::with_capacity(n);
        let mut rankings = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * m * d);
        for (i, agent) in self.agents.into_iter().enumerate() {
            let record = i + 1;
            if ids.insert(agent.id.clone(), i).is_some() {
                return Err(Error::DuplicateAgent {
                    file: file.to_string(),
                    record,
                    id: agent.id,
                });
            }
            let ranking = agent
                .ranking
                .iter()
                .map(|label| {
                    catalog
                        .index_of(label)
                        .ok_or_else(|| Error::UnknownAlternative {
                            file: file.to_string(),
                            record,
                            label: label.clone(),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            if agent.covariates.len() != m || agent.covariates.iter().any(|r| r.len() != d) {
                return Err(Error::Schema {
                    file: file.to_string(),
                    record,
                    message: format!("covariates of agent {:?} are not {m}x{d}", agent.id),
                });
            }
            for row in &agent.covariates {
                values.extend_from_slice(row);
            }
            agent_ids.push(agent.id);
            rankings.push(ranking);
            labels.push(agent.labels);
        }
        let covariates = Covariates::new(n, m, self.feature_names, values)?;
        RankingDataset::new(
            Arc::new(catalog),
            agent_ids,
            rankings,
            Arc::new(covariates),
            labels,
        )
    }
}

fn load_structured(path: &Path) -> Result<RankingDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bundle: DatasetBundle = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: file_name(path),
        line: e.line(),
        message: e.to_string(),
    })?;
    bundle.into_dataset(&file_name(path))
}

fn save_structured(dataset: &RankingDataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let text = serde_json::to_string(&DatasetBundle::from_dataset(dataset))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) {
        fs::write(dir.join(name), text).unwrap();
    }

    fn fixture(dir: &Path) {
        write(
            dir,
            CATALOG_FILE,
            "alternative,school,program_type,nest\n\
             a,s1,GE,GE\nb,s1,SP,SP\nc,s2,GE,GE\nd,s3,GE,GE\n",
        );
        write(
            dir,
            RANKINGS_FILE,
            "agent,rank,alternative\nx,1,b\nx,2,d\ny,1,a\nz,2,c\nz,1,d\n",
        );
        let mut cov = String::from("agent,alternative,dist,sib\n");
        for agent in ["x", "y", "z"] {
            for (k, alt) in ["a", "b", "c", "d"].iter().enumerate() {
                cov.push_str(&format!("{agent},{alt},{}.5,{}\n", k, k % 2));
            }
        }
        write(dir, COVARIATES_FILE, &cov);
        write(
            dir,
            LABELS_FILE,
            "agent,label_name,label_value\nx,ctip1,yes\n",
        );
    }

    #[test]
    fn loads_shape() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ds = load_rankings(dir.path(), DataFormat::Delimited).unwrap();
        assert_eq!((ds.n(), ds.m(), ds.d()), (3, 4, 2));
        assert_eq!(ds.rankings[2], vec![3, 2]);
        assert_eq!(ds.covariates.feature_names, vec!["dist", "sib"]);
        assert_eq!(ds.covariates.row(1, 2), &[2.5, 0.0]);
        assert_eq!(ds.group_labels[0]["ctip1"], "yes");
    }

    #[test]
    fn unknown_label_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write(dir.path(), RANKINGS_FILE, "agent,rank,alternative\nx,1,q\n");
        let err = load_rankings(dir.path(), DataFormat::Delimited).unwrap_err();
        match err {
            Error::UnknownAlternative { label, record, .. } => {
                assert_eq!(label, "q");
                assert_eq!(record, 1);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_agent_block() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write(
            dir.path(),
            RANKINGS_FILE,
            "agent,rank,alternative\nx,1,b\ny,1,a\nx,2,d\nz,1,d\n",
        );
        let err = load_rankings(dir.path(), DataFormat::Delimited).unwrap_err();
        assert!(
            matches!(err, Error::DuplicateAgent { record: 3, .. }),
            "{err}"
        );
    }

    #[test]
    fn bad_header_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write(
            dir.path(),
            CATALOG_FILE,
            "alt,school,program_type,nest\na,s,p,n\n",
        );
        assert!(matches!(
            load_rankings(dir.path(), DataFormat::Delimited),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn missing_covariate_row() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        write(
            dir.path(),
            COVARIATES_FILE,
            "agent,alternative,dist\nx,a,1\n",
        );
        assert!(matches!(
            load_rankings(dir.path(), DataFormat::Delimited),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn round_trips_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ds = load_rankings(dir.path(), DataFormat::Delimited).unwrap();

        let out = dir.path().join("copy");
        save_rankings(&ds, &out, DataFormat::Delimited).unwrap();
        assert_eq!(load_rankings(&out, DataFormat::Delimited).unwrap(), ds);

        let json = dir.path().join("bundle.json");
        save_rankings(&ds, &json, DataFormat::Structured).unwrap();
        assert_eq!(load_rankings(&json, DataFormat::Structured).unwrap(), ds);
    }

    #[test]
    fn structured_duplicate_agent() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ds = load_rankings(dir.path(), DataFormat::Delimited).unwrap();
        let mut bundle = DatasetBundle::from_dataset(&ds);
        bundle.agents[2].id = "x".into();
        assert!(matches!(
            bundle.into_dataset("b.json"),
            Err(Error::DuplicateAgent { record: 3, .. })
        ));
    }
}
