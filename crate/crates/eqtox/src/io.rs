//! Data ingestion and report emission: subject/aggregated CSV parsing,
//! JSON report documents, and plot-ready curve tables.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bootstrap::{EquivalenceReport, GroupParams, TestConfig};
use crate::error::{EqtoxError, Result};
use crate::model::{link_prob, CountTable, DoseDesign, LinkParams};

/// One subject-level row of an input file.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub group: String,
    pub dose: f64,
    pub y_eff: u8,
    pub y_tox: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Schema {
    Subject { with_tox: bool },
    AggregatedUniv,
    AggregatedBivar,
}

fn detect_schema(headers: &[String]) -> Result<Schema> {
    let has = |name: &str| headers.iter().any(|h| h == name);
    if !has("group") || !has("dose") {
        return Err(EqtoxError::invalid(
            "csv header",
            "columns 'group' and 'dose' are required",
        ));
    }
    let subject = has("y_eff");
    let agg_univ = has("n") && has("z");
    let agg_bivar = has("z00") && has("z01") && has("z10") && has("z11");
    match (subject, agg_univ || agg_bivar) {
        (true, true) => Err(EqtoxError::MixedSchema),
        (true, false) => Ok(Schema::Subject {
            with_tox: has("y_tox"),
        }),
        (false, true) => {
            if agg_univ && agg_bivar {
                Err(EqtoxError::MixedSchema)
            } else if agg_univ {
                Ok(Schema::AggregatedUniv)
            } else {
                Ok(Schema::AggregatedBivar)
            }
        }
        (false, false) => Err(EqtoxError::invalid(
            "csv header",
            "expected subject columns (y_eff[, y_tox]) or count columns (n, z | z00..z11)",
        )),
    }
}

fn col_idx(headers: &[String], name: &str) -> usize {
    headers.iter().position(|h| h == name).unwrap()
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    line: usize,
    what: &str,
) -> Result<T> {
    record
        .get(idx)
        .ok_or_else(|| EqtoxError::MalformedRow {
            line,
            why: format!("missing {what}"),
        })?
        .trim()
        .parse()
        .map_err(|_| EqtoxError::MalformedRow {
            line,
            why: format!("unparseable {what}: {:?}", record.get(idx).unwrap_or("")),
        })
}

fn parse_binary(record: &csv::StringRecord, idx: usize, line: usize, what: &str) -> Result<u8> {
    let v: u8 = parse_field(record, idx, line, what)?;
    if v > 1 {
        return Err(EqtoxError::MalformedRow {
            line,
            why: format!("{what} must be 0 or 1, got {v}"),
        });
    }
    Ok(v)
}

// dose keyed by an order-preserving bit pattern so BTreeMap sorts numerically
fn dose_key(d: f64) -> u64 {
    let bits = d.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits ^ (1 << 63)
    }
}

#[derive(Default, Clone)]
struct DoseAcc {
    n: u64,
    cells: [u64; 4], // (00, 01, 10, 11); univariate uses cells[3] for z
}

fn build_table(
    group: &str,
    per_dose: &BTreeMap<u64, (f64, DoseAcc)>,
    bivariate: bool,
) -> Result<CountTable> {
    if per_dose.len() < 2 {
        return Err(EqtoxError::EmptyGroup {
            group: group.to_string(),
        });
    }
    let doses: Vec<f64> = per_dose.values().map(|(d, _)| *d).collect();
    let sizes: Vec<u64> = per_dose.values().map(|(_, a)| a.n).collect();
    let range = (doses[0], *doses.last().unwrap());
    let design = DoseDesign::new(doses, sizes, range)?;
    if bivariate {
        let cells = per_dose.values().map(|(_, a)| a.cells).collect();
        CountTable::bivariate(design, cells)
    } else {
        let z = per_dose.values().map(|(_, a)| a.cells[3]).collect();
        CountTable::univariate(design, z)
    }
}

/// Parse a CSV file into the two groups' count tables, (reference, test).
///
/// Accepts subject-level rows (`group,dose,y_eff[,y_tox]`) or pre-aggregated
/// count rows (`group,dose,n,z` or `group,dose,n,z00,z01,z10,z11`), detected
/// from the header. A group label starting with "ref" is taken as the
/// reference; otherwise the first label seen is.
pub fn parse_subject_csv(path: &Path) -> Result<(CountTable, CountTable)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| EqtoxError::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| EqtoxError::Csv {
            path: path.display().to_string(),
            source: e,
        })?
        .iter()
        .map(|h| h.trim().to_lowercase())
        .collect();
    let schema = detect_schema(&headers)?;

    let gi = col_idx(&headers, "group");
    let di = col_idx(&headers, "dose");

    let mut groups: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, BTreeMap<u64, (f64, DoseAcc)>> = BTreeMap::new();

    for (row, record) in reader.records().enumerate() {
        let line = row + 2; // header is line 1
        let record = record.map_err(|e| EqtoxError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        let group = record
            .get(gi)
            .ok_or_else(|| EqtoxError::MalformedRow {
                line,
                why: "missing group".into(),
            })?
            .trim()
            .to_string();
        let dose: f64 = parse_field(&record, di, line, "dose")?;
        if !dose.is_finite() {
            return Err(EqtoxError::MalformedRow {
                line,
                why: "dose must be finite".into(),
            });
        }
        if !groups.contains(&group) {
            groups.push(group.clone());
        }
        let slot = acc
            .entry(group)
            .or_default()
            .entry(dose_key(dose))
            .or_insert((dose, DoseAcc::default()));

        match schema {
            Schema::Subject { with_tox } => {
                let ye = parse_binary(&record, col_idx(&headers, "y_eff"), line, "y_eff")?;
                let yt = if with_tox {
                    Some(parse_binary(&record, col_idx(&headers, "y_tox"), line, "y_tox")?)
                } else {
                    None
                };
                slot.1.n += 1;
                match yt {
                    Some(yt) => slot.1.cells[(ye * 2 + yt) as usize] += 1,
                    None => slot.1.cells[3] += ye as u64,
                }
            }
            Schema::AggregatedUniv => {
                let n: u64 = parse_field(&record, col_idx(&headers, "n"), line, "n")?;
                let z: u64 = parse_field(&record, col_idx(&headers, "z"), line, "z")?;
                if z > n {
                    return Err(EqtoxError::MalformedRow {
                        line,
                        why: format!("z = {z} exceeds n = {n}"),
                    });
                }
                slot.1.n += n;
                slot.1.cells[3] += z;
            }
            Schema::AggregatedBivar => {
                let mut total = 0;
                for (q, name) in ["z00", "z01", "z10", "z11"].iter().enumerate() {
                    let c: u64 = parse_field(&record, col_idx(&headers, name), line, name)?;
                    slot.1.cells[q] += c;
                    total += c;
                }
                slot.1.n += total;
            }
        }
    }

    if groups.len() != 2 {
        return Err(EqtoxError::invalid(
            "csv",
            format!("expected exactly 2 groups, found {}", groups.len()),
        ));
    }
    // reference first
    if !groups[0].to_lowercase().starts_with("ref") && groups[1].to_lowercase().starts_with("ref") {
        groups.swap(0, 1);
    }
    let bivariate = matches!(
        schema,
        Schema::Subject { with_tox: true } | Schema::AggregatedBivar
    );
    // subject-level univariate stores successes in cells[3]
    let table_a = build_table(&groups[0], &acc[&groups[0]], bivariate)?;
    let table_b = build_table(&groups[1], &acc[&groups[1]], bivariate)?;
    Ok((table_a, table_b))
}

/// The reproducibility envelope written around every test report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub version: String,
    pub config: TestConfig,
    pub result: EquivalenceReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub report: ReportDocument,
    /// Run metadata excluded from determinism comparisons.
    pub metadata: ReportMetadata,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub generated_at_unix_secs: u64,
}

pub fn make_document(config: &TestConfig, result: &EquivalenceReport) -> ReportDocument {
    ReportDocument {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        result: result.clone(),
    }
}

/// Write the report as pretty JSON. The statistical content round-trips
/// losslessly through `read_report`.
pub fn emit_report(doc: &ReportDocument, path: &Path) -> Result<()> {
    let file = ReportFile {
        report: doc.clone(),
        metadata: ReportMetadata {
            generated_at_unix_secs: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        },
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| EqtoxError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    std::fs::write(path, json + "\n").map_err(|e| EqtoxError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_report(path: &Path) -> Result<ReportDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| EqtoxError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: ReportFile = serde_json::from_str(&text).map_err(|e| EqtoxError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(file.report)
}

/// Plot-ready curve table: per grid node, both groups' curves and the
/// absolute differences.
pub fn emit_curve_table(params: &GroupParams, grid: &[f64], path: &Path) -> Result<()> {
    let mut out = File::create(path).map_err(|e| EqtoxError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let io_err = |e: std::io::Error| EqtoxError::Io {
        path: path.display().to_string(),
        source: e,
    };
    match params {
        GroupParams::Univariate { a, b } => {
            writeln!(out, "dose,eta_ref_e,eta_test_e,abs_diff_e").map_err(io_err)?;
            for &d in grid {
                let (pa, pb) = (link_prob(a, d), link_prob(b, d));
                writeln!(out, "{d},{pa},{pb},{}", (pa - pb).abs()).map_err(io_err)?;
            }
        }
        GroupParams::Bivariate { a, b } => {
            writeln!(
                out,
                "dose,eta_ref_e,eta_test_e,eta_ref_t,eta_test_t,abs_diff_e,abs_diff_t"
            )
            .map_err(io_err)?;
            for &d in grid {
                let (ae, at) = crate::model::gumbel_marginals(a, d);
                let (be, bt) = crate::model::gumbel_marginals(b, d);
                writeln!(
                    out,
                    "{d},{ae},{be},{at},{bt},{},{}",
                    (ae - be).abs(),
                    (at - bt).abs()
                )
                .map_err(io_err)?;
            }
        }
    }
    Ok(())
}

/// Curve helper reused by the CLI `fit` mode.
pub fn univ_group(a: LinkParams, b: LinkParams) -> GroupParams {
    GroupParams::Univariate { a, b }
}
