//! The closed registry of location codes, spatial scales, and populations.

use crate::error::{FlusionError, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialScale {
    State,
    Region,
    National,
}

impl SpatialScale {
    pub fn parse(s: &str) -> Result<SpatialScale> {
        match s {
            "state" => Ok(SpatialScale::State),
            "region" => Ok(SpatialScale::Region),
            "national" => Ok(SpatialScale::National),
            other => Err(FlusionError::Domain(format!(
                "unknown spatial scale {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocationInfo {
    pub code: String,
    pub scale: SpatialScale,
    pub population: f64,
}

/// Closed set of location codes, loaded once at startup. Iteration order is
/// the file order, which fixes the one-hot encoding order downstream.
#[derive(Debug, Clone)]
pub struct LocationRegistry {
    entries: Vec<LocationInfo>,
    index: HashMap<String, usize>,
}

impl LocationRegistry {
    pub fn from_entries(entries: Vec<LocationInfo>) -> Result<LocationRegistry> {
        let mut index = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.population <= 0.0 {
                return Err(FlusionError::Domain(format!(
                    "nonpositive population for location {:?}",
                    e.code
                )));
            }
            if index.insert(e.code.clone(), i).is_some() {
                return Err(FlusionError::Integrity(format!(
                    "duplicate location code {:?} in registry",
                    e.code
                )));
            }
        }
        Ok(LocationRegistry { entries, index })
    }

    /// Load from delimited text with header `location_code,scale,population`.
    pub fn load(path: &Path) -> Result<LocationRegistry> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut entries = Vec::new();
        for (lineno, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse_err = |msg: String| FlusionError::Parse {
                path: path.display().to_string(),
                line: lineno + 2,
                msg,
            };
            if rec.len() != 3 {
                return Err(parse_err(format!("expected 3 columns, got {}", rec.len())));
            }
            let population: f64 = rec[2]
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad population: {e}")))?;
            entries.push(LocationInfo {
                code: rec[0].trim().to_string(),
                scale: SpatialScale::parse(rec[1].trim())?,
                population,
            });
        }
        LocationRegistry::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, code: &str) -> Result<&LocationInfo> {
        self.index
            .get(code)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| FlusionError::UnknownLocation(code.to_string()))
    }

    pub fn position(&self, code: &str) -> Result<usize> {
        self.index
            .get(code)
            .copied()
            .ok_or_else(|| FlusionError::UnknownLocation(code.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &LocationInfo> {
        self.entries.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn entry(code: &str, scale: SpatialScale, pop: f64) -> LocationInfo {
        LocationInfo {
            code: code.to_string(),
            scale,
            population: pop,
        }
    }

    #[test]
    fn lookup_and_order() {
        let reg = LocationRegistry::from_entries(vec![
            entry("MA", SpatialScale::State, 7_000_000.0),
            entry("US", SpatialScale::National, 334_000_000.0),
        ])
        .unwrap();
        assert_eq!(reg.len(), 2);
        assert_eq!(reg.position("US").unwrap(), 1);
        assert!(matches!(
            reg.get("ZZ"),
            Err(FlusionError::UnknownLocation(_))
        ));
    }

    #[test]
    fn duplicate_codes_rejected() {
        let res = LocationRegistry::from_entries(vec![
            entry("MA", SpatialScale::State, 1.0),
            entry("MA", SpatialScale::State, 2.0),
        ]);
        assert!(matches!(res, Err(FlusionError::Integrity(_))));
    }

    #[test]
    fn loads_delimited_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "location_code,scale,population").unwrap();
        writeln!(f, "MA,state,7001399").unwrap();
        writeln!(f, "R01,region,15116205").unwrap();
        writeln!(f, "US,national,334914895").unwrap();
        let reg = LocationRegistry::load(f.path()).unwrap();
        assert_eq!(reg.len(), 3);
        assert_eq!(reg.get("R01").unwrap().scale, SpatialScale::Region);
        assert_eq!(reg.get("US").unwrap().population, 334914895.0);
    }
}
