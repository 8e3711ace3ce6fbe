use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cohort, CohortError, PatientRecord};

pub const COHORT_SCHEMA: &str = "twm-cohort";
pub const COHORT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    version: u32,
    latent_tokens: usize,
    token_width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CohortSummary {
    pub patients: usize,
    pub visits: usize,
    pub pairs: usize,
    pub events: usize,
    pub latent_tokens: usize,
    pub token_width: usize,
}

/// Header line, then one JSON record per patient, each terminated by `\n`.
pub fn write_cohort<W: Write>(cohort: &Cohort, mut out: W) -> Result<(), CohortError> {
    let header = Header {
        schema: COHORT_SCHEMA.into(),
        version: COHORT_VERSION,
        latent_tokens: cohort.latent_tokens,
        token_width: cohort.token_width,
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for p in &cohort.patients {
        serde_json::to_writer(&mut out, p).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_cohort<R: Read>(input: R) -> Result<Cohort, CohortError> {
    let mut lines = BufReader::new(input).lines();
    let line_err = |line: usize, reason: String| CohortError::Line { line, reason };
    let first = lines
        .next()
        .ok_or_else(|| line_err(1, "missing header".into()))??;
    let raw: serde_json::Value = serde_json::from_str(&first).map_err(|e| line_err(1, format!("header: {e}")))?;
    if let Some(v) = raw.get("version").and_then(|v| v.as_u64()) {
        if v != u64::from(COHORT_VERSION) {
            return Err(CohortError::Version {
                found: u32::try_from(v).unwrap_or(u32::MAX),
                expected: COHORT_VERSION,
            });
        }
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| line_err(1, format!("header: {e}")))?;
    if header.schema != COHORT_SCHEMA {
        return Err(line_err(1, format!("unknown schema {:?}", header.schema)));
    }
    let mut cohort = Cohort {
        latent_tokens: header.latent_tokens,
        token_width: header.token_width,
        patients: Vec::new(),
    };
    let mut ids = HashSet::new();
    for (k, line) in lines.enumerate() {
        let n = k + 2;
        let line = line?;
        if line.trim().is_empty() {
            return Err(line_err(n, "empty line".into()));
        }
        let record: PatientRecord = serde_json::from_str(&line).map_err(|e| line_err(n, e.to_string()))?;
        let v = record.violations(cohort.latent_tokens, cohort.token_width);
        if !v.is_empty() {
            return Err(line_err(n, format!("patient {}: {}", record.id, v.join("; "))));
        }
        if !ids.insert(record.id.clone()) {
            return Err(line_err(n, format!("duplicate patient id {}", record.id)));
        }
        cohort.patients.push(record);
    }
    Ok(cohort)
}

pub fn export_cohort(cohort: &Cohort, path: &Path) -> Result<(), CohortError> {
    write_cohort(cohort, BufWriter::new(File::create(path)?))
}

pub fn import_cohort(path: &Path) -> Result<Cohort, CohortError> {
    read_cohort(File::open(path)?)
}

/// Reads and checks a cohort file, reporting its size.
pub fn validate_cohort_file(path: &Path) -> Result<CohortSummary, CohortError> {
    let c = import_cohort(path)?;
    Ok(CohortSummary {
        patients: c.patients.len(),
        visits: c.patients.iter().map(|p| p.visits.len()).sum(),
        pairs: c.patients.iter().map(|p| p.actions.len()).sum(),
        events: c.patients.iter().filter(|p| p.survival.event).count(),
        latent_tokens: c.latent_tokens,
        token_width: c.token_width,
    })
}
