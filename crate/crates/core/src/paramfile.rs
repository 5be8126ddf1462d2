//! Parameter files: fitted models tagged with the fingerprint of the
//! catalog and covariate schema they were fitted against.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ProgramCatalog;
use crate::error::{Error, Result};
use crate::estimation::Fitted;

/// Shape summary used to refuse evaluating parameters on foreign data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub m: usize,
    pub n_schools: usize,
    pub n_ptypes: usize,
    pub d: usize,
    pub rank: usize,
    pub nest_hash: String,
}

impl Fingerprint {
    pub fn new(catalog: &ProgramCatalog, d: usize, rank: usize) -> Self {
        Fingerprint {
            m: catalog.m(),
            n_schools: catalog.n_schools(),
            n_ptypes: catalog.n_ptypes(),
            d,
            rank,
            nest_hash: catalog.nest_hash(),
        }
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "m={} n_s={} n_p={} d={} r={} nests={}",
            self.m, self.n_schools, self.n_ptypes, self.d, self.rank, self.nest_hash
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub fingerprint: Fingerprint,
    pub model: Fitted,
}

impl ParamFile {
    pub fn new(model: Fitted, catalog: &ProgramCatalog, d: usize) -> Self {
        let rank = model.base().rank();
        ParamFile {
            fingerprint: Fingerprint::new(catalog, d, rank),
            model,
        }
    }

    /// The stored model, after checking it matches `catalog` and `d`.
    pub fn bind(&self, catalog: &ProgramCatalog, d: usize) -> Result<&Fitted> {
        let expected = Fingerprint::new(catalog, d, self.model.base().rank());
        if expected != self.fingerprint {
            return Err(Error::Fingerprint {
                expected: expected.to_string(),
                found: self.fingerprint.to_string(),
            });
        }
        self.model.check(catalog, d)?;
        Ok(&self.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
