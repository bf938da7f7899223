//! Trial-level evidence: parsing, validation, time-point snapshots and
//! indication filters.
//!
//! An [`EvidenceSet`] is immutable once built. Indications are indexed in
//! order of first appearance and every downstream table uses that order.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::Serialize;

use crate::error::{Error, Result};

/// Exact CSV header of the evidence file.
pub const CSV_HEADER: [&str; 8] = [
    "study_id",
    "indication",
    "lhr_pfs",
    "se_pfs",
    "pfs_report_date",
    "lhr_os",
    "se_os",
    "os_report_date",
];

/// Which endpoint an estimate refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Endpoint {
    Pfs,
    Os,
}

/// A log hazard ratio with its standard error and optional report date.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub lhr: f64,
    pub se: f64,
    pub report_date: Option<NaiveDate>,
}

/// One randomized comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub study_id: String,
    pub indication: String,
    pub pfs: Option<Estimate>,
    pub os: Option<Estimate>,
}

impl TrialRecord {
    pub fn estimate(&self, endpoint: Endpoint) -> Option<&Estimate> {
        match endpoint {
            Endpoint::Pfs => self.pfs.as_ref(),
            Endpoint::Os => self.os.as_ref(),
        }
    }

    pub fn has_both(&self) -> bool {
        self.pfs.is_some() && self.os.is_some()
    }

    fn check(&self, row: usize) -> Result<()> {
        if self.pfs.is_none() && self.os.is_none() {
            return Err(Error::Row {
                row,
                msg: "no endpoint data".into(),
            });
        }
        for est in [self.pfs, self.os].into_iter().flatten() {
            if !est.lhr.is_finite() {
                return Err(Error::Row {
                    row,
                    msg: "non-finite log hazard ratio".into(),
                });
            }
            if !(est.se > 0.0) || !est.se.is_finite() {
                return Err(Error::Row {
                    row,
                    msg: "non-positive standard error".into(),
                });
            }
        }
        Ok(())
    }
}

/// Validated, ordered collection of trial records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvidenceSet {
    records: Vec<TrialRecord>,
    indications: Vec<String>,
    index: HashMap<String, usize>,
}

/// Per-indication counts produced by [`EvidenceSet::summarize`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IndicationCounts {
    pub indication: String,
    pub n_trials: usize,
    pub n_pfs: usize,
    pub n_os: usize,
}

/// Counts table with totals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EvidenceSummary {
    pub per_indication: Vec<IndicationCounts>,
    pub total: IndicationCounts,
}

impl EvidenceSet {
    /// Builds and validates a set. Rows in error messages are numbered as in
    /// a CSV file (first record is row 2).
    pub fn new(records: Vec<TrialRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut indications = Vec::new();
        let mut index = HashMap::new();
        for (k, rec) in records.iter().enumerate() {
            let row = k + 2;
            rec.check(row)?;
            if !seen.insert(rec.study_id.clone()) {
                return Err(Error::Row {
                    row,
                    msg: format!("duplicate study_id `{}`", rec.study_id),
                });
            }
            if !index.contains_key(&rec.indication) {
                index.insert(rec.indication.clone(), indications.len());
                indications.push(rec.indication.clone());
            }
        }
        Ok(Self {
            records,
            indications,
            index,
        })
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn indications(&self) -> &[String] {
        &self.indications
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_indications(&self) -> usize {
        self.indications.len()
    }

    pub fn indication_index(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Index of the indication of `record` (which must belong to this set).
    pub fn indication_of(&self, record: &TrialRecord) -> usize {
        self.index[&record.indication]
    }

    /// Evidence available at `cutoff`. Each endpoint is kept only if it was
    /// reported on or before the cutoff; `None` means present day (everything
    /// is kept, including undated estimates).
    pub fn snapshot(&self, cutoff: Option<NaiveDate>) -> EvidenceSet {
        let Some(cutoff) = cutoff else {
            return self.clone();
        };
        let keep = |est: &Option<Estimate>| est.filter(|e| e.report_date.is_some_and(|d| d <= cutoff));
        let records = self
            .records
            .iter()
            .filter_map(|r| {
                let pfs = keep(&r.pfs);
                let os = keep(&r.os);
                (pfs.is_some() || os.is_some()).then(|| TrialRecord {
                    study_id: r.study_id.clone(),
                    indication: r.indication.clone(),
                    pfs,
                    os,
                })
            })
            .collect();
        EvidenceSet::new(records).expect("subset of a valid set is valid")
    }

    /// Removes every record of `label` and re-packs indication indices.
    pub fn exclude_indication(&self, label: &str) -> Result<EvidenceSet> {
        if !self.index.contains_key(label) {
            return Err(Error::UnknownIndication(label.to_string()));
        }
        let records = self.records.iter().filter(|r| r.indication != label).cloned().collect();
        EvidenceSet::new(records)
    }

    /// Keeps only records satisfying `pred`.
    pub fn filter(&self, pred: impl Fn(&TrialRecord) -> bool) -> EvidenceSet {
        let records = self.records.iter().filter(|r| pred(r)).cloned().collect();
        EvidenceSet::new(records).expect("subset of a valid set is valid")
    }

    /// Returns a copy with the OS estimate of `study_id` removed.
    pub fn mask_os(&self, study_id: &str) -> Result<EvidenceSet> {
        let mut found = false;
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if r.study_id == study_id {
                    found = true;
                    r.os = None;
                }
                r
            })
            .collect();
        if !found {
            return Err(Error::Prediction(format!("unknown study `{study_id}`")));
        }
        EvidenceSet::new(records)
    }

    pub fn summarize(&self) -> EvidenceSummary {
        let mut per_indication: Vec<IndicationCounts> = self
            .indications
            .iter()
            .map(|label| IndicationCounts {
                indication: label.clone(),
                n_trials: 0,
                n_pfs: 0,
                n_os: 0,
            })
            .collect();
        for r in &self.records {
            let row = &mut per_indication[self.index[&r.indication]];
            row.n_trials += 1;
            row.n_pfs += usize::from(r.pfs.is_some());
            row.n_os += usize::from(r.os.is_some());
        }
        let total = per_indication.iter().fold(
            IndicationCounts {
                indication: "TOTAL".into(),
                n_trials: 0,
                n_pfs: 0,
                n_os: 0,
            },
            |mut acc, c| {
                acc.n_trials += c.n_trials;
                acc.n_pfs += c.n_pfs;
                acc.n_os += c.n_os;
                acc
            },
        );
        EvidenceSummary { per_indication, total }
    }

    /// Writes the set in the evidence CSV dialect.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        let num = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let date = |d: Option<NaiveDate>| d.map(|d| d.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.study_id.clone(),
                r.indication.clone(),
                num(r.pfs.map(|e| e.lhr)),
                num(r.pfs.map(|e| e.se)),
                date(r.pfs.and_then(|e| e.report_date)),
                num(r.os.map(|e| e.lhr)),
                num(r.os.map(|e| e.se)),
                date(r.os.and_then(|e| e.report_date)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

/// Parses the evidence CSV dialect.
pub fn parse_evidence<R: Read>(reader: R) -> Result<EvidenceSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut col = [0usize; 8];
    for (k, name) in CSV_HEADER.iter().enumerate() {
        col[k] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::MissingColumn((*name).to_string()))?;
    }

    let mut records = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let row_no = k + 2;
        let row = row?;
        let field = |c: usize| row.get(col[c]).unwrap_or("");
        let number = |c: usize| -> Result<Option<f64>> {
            let s = field(c);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>().map(Some).map_err(|_| Error::Row {
                row: row_no,
                msg: format!("malformed number `{s}` in `{}`", CSV_HEADER[c]),
            })
        };
        let date = |c: usize| -> Result<Option<NaiveDate>> {
            let s = field(c);
            if s.is_empty() {
                return Ok(None);
            }
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .map(Some)
                .map_err(|_| Error::Row {
                    row: row_no,
                    msg: format!("malformed date `{s}` in `{}`", CSV_HEADER[c]),
                })
        };
        let estimate = |lhr: usize, se: usize, d: usize| -> Result<Option<Estimate>> {
            match (number(lhr)?, number(se)?) {
                (None, None) => Ok(None),
                (Some(lhr), Some(se)) => Ok(Some(Estimate {
                    lhr,
                    se,
                    report_date: date(d)?,
                })),
                (Some(_), None) => Err(Error::Row {
                    row: row_no,
                    msg: format!("missing `{}`", CSV_HEADER[se]),
                }),
                (None, Some(_)) => Err(Error::Row {
                    row: row_no,
                    msg: format!("`{}` given without `{}`", CSV_HEADER[se], CSV_HEADER[lhr]),
                }),
            }
        };

        let study_id = field(0).to_string();
        if study_id.is_empty() {
            return Err(Error::Row {
                row: row_no,
                msg: "empty study_id".into(),
            });
        }
        let indication = field(1).to_string();
        if indication.is_empty() {
            return Err(Error::Row {
                row: row_no,
                msg: "empty indication".into(),
            });
        }
        let rec = TrialRecord {
            study_id,
            indication,
            pfs: estimate(2, 3, 4)?,
            os: estimate(5, 6, 7)?,
        };
        rec.check(row_no)?;
        records.push(rec);
    }
    EvidenceSet::new(records)
}

pub fn parse_evidence_str(text: &str) -> Result<EvidenceSet> {
    parse_evidence(text.as_bytes())
}
