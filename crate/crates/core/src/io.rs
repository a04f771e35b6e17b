//! File formats: binary-response CSV, raw three-valued vote tables and
//! their A/B binary encoding, and versioned JSON documents for fits, grids,
//! reports, and simulation ground truth.
//!
//! JSON is the archival format (full precision, round-trips exactly); CSV
//! is the presentation format (flat tables ready for plotting). All files
//! are UTF-8 with LF line endings.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ecm::FitResult;
use crate::error::{Error, Result};
use crate::eval::{branch_response_rates, median_profiles, EvaluationReport};
use crate::model::{BinaryDataset, LatentAssignment, MltcnParams};
use crate::select::SelectionGrid;

/// Version stamped into every JSON document this crate writes.
pub const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Binary-response CSV
// ---------------------------------------------------------------------------

/// Reads an n x M binary CSV. With `has_header`, the first row names the
/// variables; `label_column` (matched case-insensitively against the header)
/// is extracted into the dataset's labels instead of the response matrix.
pub fn read_binary_csv(
    path: &Path,
    has_header: bool,
    label_column: Option<&str>,
) -> Result<BinaryDataset> {
    let rows = read_all_rows(path)?;
    parse_binary_rows(&rows, has_header, label_column)
}

/// Reads a binary CSV, inferring the layout: a first row of pure 0/1 cells
/// means no header; otherwise the first row is a header and a column named
/// `label` or `party` (any case) is treated as the label column.
pub fn read_binary_csv_auto(path: &Path) -> Result<BinaryDataset> {
    let rows = read_all_rows(path)?;
    if rows.is_empty() {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            msg: "empty file".into(),
        });
    }
    let headerless = rows[0].iter().all(|cell| cell == "0" || cell == "1");
    if headerless {
        parse_binary_rows(&rows, false, None)
    } else {
        let label = rows[0]
            .iter()
            .find(|name| {
                let lower = name.to_lowercase();
                lower == "label" || lower == "party"
            })
            .cloned();
        parse_binary_rows(&rows, true, label.as_deref())
    }
}

/// Writes a dataset as CSV. A header row is emitted whenever the dataset
/// carries variable names or labels (labels need a named column); the label
/// column, when present, comes first and is called `label`.
pub fn write_binary_csv(data: &BinaryDataset, path: &Path) -> Result<()> {
    let mut out = csv::Writer::from_writer(open_write(path)?);
    let header_needed = data.variable_names.is_some() || data.labels.is_some();
    let names: Vec<String> = match &data.variable_names {
        Some(names) => names.clone(),
        None => (1..=data.n_variables()).map(|i| format!("v{i}")).collect(),
    };
    if header_needed {
        let mut header = Vec::new();
        if data.labels.is_some() {
            header.push("label".to_string());
        }
        header.extend(names);
        out.write_record(&header).map_err(csv_io(path))?;
    }
    for (i, row) in data.rows().enumerate() {
        let mut record: Vec<String> = Vec::with_capacity(row.len() + 1);
        if let Some(labels) = &data.labels {
            record.push(labels[i].clone());
        }
        record.extend(row.iter().map(|v| v.to_string()));
        out.write_record(&record).map_err(csv_io(path))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_all_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: idx + 1,
            col: 1,
            msg: e.to_string(),
        })?;
        rows.push(record.iter().map(|s| s.to_string()).collect());
    }
    Ok(rows)
}

fn parse_binary_rows(
    rows: &[Vec<String>],
    has_header: bool,
    label_column: Option<&str>,
) -> Result<BinaryDataset> {
    if rows.is_empty() || (has_header && rows.len() == 1) {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            msg: "no data rows".into(),
        });
    }
    let width = rows[0].len();
    for (idx, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Parse {
                row: idx + 1,
                col: row.len().min(width) + 1,
                msg: format!("ragged row: expected {width} fields, found {}", row.len()),
            });
        }
    }

    let label_idx = match label_column {
        Some(name) => {
            if !has_header {
                return Err(Error::ParameterDomain(
                    "a label column requires a header row".into(),
                ));
            }
            let idx = rows[0]
                .iter()
                .position(|h| h.eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::Parse {
                    row: 1,
                    col: 1,
                    msg: format!("label column '{name}' not found in header"),
                })?;
            Some(idx)
        }
        None => None,
    };

    let data_rows = &rows[has_header as usize..];
    let n = data_rows.len();
    let m = width - label_idx.map_or(0, |_| 1);
    if m == 0 {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            msg: "no response columns".into(),
        });
    }
    let mut responses = Vec::with_capacity(n * m);
    let mut labels = Vec::with_capacity(if label_idx.is_some() { n } else { 0 });
    for (r, row) in data_rows.iter().enumerate() {
        for (cdx, cell) in row.iter().enumerate() {
            if Some(cdx) == label_idx {
                labels.push(cell.clone());
                continue;
            }
            match cell.as_str() {
                "0" => responses.push(0),
                "1" => responses.push(1),
                other => {
                    return Err(Error::Parse {
                        row: r + 1 + has_header as usize,
                        col: cdx + 1,
                        msg: format!("expected 0 or 1, found '{other}'"),
                    })
                }
            }
        }
    }

    let mut data = BinaryDataset::new(n, m, responses)?;
    if has_header {
        let names: Vec<String> = rows[0]
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != label_idx)
            .map(|(_, s)| s.clone())
            .collect();
        data = data.with_variable_names(names)?;
    }
    if label_idx.is_some() {
        data = data.with_labels(labels)?;
    }
    Ok(data)
}

// ---------------------------------------------------------------------------
// Raw vote tables and the A/B encoding
// ---------------------------------------------------------------------------

/// One three-valued vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vote {
    Yes,
    No,
    Undecided,
}

impl Vote {
    /// Case-insensitive, trimmed parse. `?`, `undecided`, and the empty
    /// cell all mean undecided; copies of the historical data vary.
    pub fn parse(cell: &str) -> Option<Vote> {
        match cell.trim().to_ascii_lowercase().as_str() {
            "y" | "yes" => Some(Vote::Yes),
            "n" | "no" => Some(Vote::No),
            "?" | "undecided" | "" => Some(Vote::Undecided),
            _ => None,
        }
    }
}

/// An n x Q table of raw votes with optional party labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVoteTable {
    n: usize,
    q: usize,
    votes: Vec<Vote>,
    pub party: Option<Vec<String>>,
    pub issue_names: Vec<String>,
}

impl RawVoteTable {
    pub fn new(n: usize, q: usize, votes: Vec<Vote>) -> Result<Self> {
        if n == 0 || q == 0 || votes.len() != n * q {
            return Err(Error::ParameterDomain(format!(
                "vote table must be non-empty and rectangular, got {n} x {q} with {} cells",
                votes.len()
            )));
        }
        Ok(RawVoteTable {
            n,
            q,
            votes,
            party: None,
            issue_names: (1..=q).map(|i| format!("q{i}")).collect(),
        })
    }

    pub fn with_party(mut self, party: Vec<String>) -> Result<Self> {
        if party.len() != self.n {
            return Err(Error::ParameterDomain(format!(
                "{} party labels for {} rows",
                party.len(),
                self.n
            )));
        }
        self.party = Some(party);
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_issues(&self) -> usize {
        self.q
    }

    pub fn vote(&self, i: usize, q: usize) -> Vote {
        self.votes[i * self.q + q]
    }
}

/// Reads a raw vote CSV. The layout is inferred:
///
/// - at most one column may hold non-vote strings; it becomes the party
///   column (the historical file format puts it first, unnamed);
/// - a header row is assumed when any vote column's first cell is not a
///   vote symbol, or when a column is named `party` or `label`.
pub fn read_raw_votes(path: &Path) -> Result<RawVoteTable> {
    let rows = read_all_rows(path)?;
    if rows.is_empty() {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            msg: "empty file".into(),
        });
    }
    let width = rows[0].len();
    for (idx, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Parse {
                row: idx + 1,
                col: row.len().min(width) + 1,
                msg: format!("ragged row: expected {width} fields, found {}", row.len()),
            });
        }
    }

    // A column is vote-like if every cell below the first row parses.
    let vote_like: Vec<bool> = (0..width)
        .map(|cdx| rows[1..].iter().all(|row| Vote::parse(&row[cdx]).is_some()))
        .collect();
    let named_party = rows[0].iter().position(|h| {
        let lower = h.to_lowercase();
        lower == "party" || lower == "label"
    });

    let non_vote: Vec<usize> = (0..width).filter(|&cdx| !vote_like[cdx]).collect();
    let party_col = match (named_party, non_vote.as_slice()) {
        (Some(idx), _) => Some(idx),
        (None, []) => None,
        (None, [single]) => Some(*single),
        (None, [_, second, ..]) => {
            let bad_row = rows[1..]
                .iter()
                .position(|row| Vote::parse(&row[*second]).is_none())
                .unwrap_or(0);
            return Err(Error::Parse {
                row: bad_row + 2,
                col: second + 1,
                msg: "more than one non-vote column".into(),
            });
        }
    };

    // Header detection: any vote column whose first cell is not a vote
    // symbol, or an explicitly named party column, implies a header row.
    let has_header = named_party.is_some()
        || (0..width).any(|cdx| {
            Some(cdx) != party_col && Vote::parse(&rows[0][cdx]).is_none()
        });

    let data_rows = &rows[has_header as usize..];
    if data_rows.is_empty() {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            msg: "no data rows".into(),
        });
    }
    let n = data_rows.len();
    let q = width - party_col.map_or(0, |_| 1);
    if q == 0 {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            msg: "no vote columns".into(),
        });
    }

    let mut votes = Vec::with_capacity(n * q);
    let mut party = Vec::new();
    for (r, row) in data_rows.iter().enumerate() {
        for (cdx, cell) in row.iter().enumerate() {
            if Some(cdx) == party_col {
                party.push(cell.clone());
                continue;
            }
            match Vote::parse(cell) {
                Some(v) => votes.push(v),
                None => {
                    return Err(Error::Parse {
                        row: r + 1 + has_header as usize,
                        col: cdx + 1,
                        msg: format!("unrecognized vote symbol '{cell}'"),
                    })
                }
            }
        }
    }

    let mut table = RawVoteTable::new(n, q, votes)?;
    if has_header {
        table.issue_names = rows[0]
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != party_col)
            .map(|(_, s)| s.clone())
            .collect();
    }
    if party_col.is_some() {
        table = table.with_party(party)?;
    }
    Ok(table)
}

/// Expands each issue into the two binary variables of the A/B coding, in
/// column order (1A, 1B, 2A, 2B, ...):
///
/// - A = 1 when a vote was cast (yes or no), 0 when undecided;
/// - B = 1 for yes, 0 for no or undecided.
///
/// Party labels pass through as dataset labels.
pub fn encode_votes(raw: &RawVoteTable) -> Result<BinaryDataset> {
    let n = raw.n_rows();
    let q = raw.n_issues();
    let mut responses = Vec::with_capacity(n * 2 * q);
    for i in 0..n {
        for issue in 0..q {
            let v = raw.vote(i, issue);
            responses.push((v != Vote::Undecided) as u8);
            responses.push((v == Vote::Yes) as u8);
        }
    }
    let mut names = Vec::with_capacity(2 * q);
    for issue in 1..=q {
        names.push(format!("{issue}A"));
        names.push(format!("{issue}B"));
    }
    let mut data = BinaryDataset::new(n, 2 * q, responses)?.with_variable_names(names)?;
    if let Some(party) = &raw.party {
        data = data.with_labels(party.clone())?;
    }
    Ok(data)
}

// ---------------------------------------------------------------------------
// Versioned JSON documents
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format_version: u32,
    kind: String,
    payload: T,
}

fn write_json<T: Serialize>(payload: &T, kind: &str, path: &Path) -> Result<()> {
    let envelope = Envelope {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        payload,
    };
    let mut writer = BufWriter::new(open_write(path)?);
    serde_json::to_writer_pretty(&mut writer, &envelope).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    writer
        .write_all(b"\n")
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(kind: &str, path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let envelope: Envelope<serde_json::Value> =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
    if envelope.format_version != FORMAT_VERSION || envelope.kind != kind {
        return Err(Error::Version {
            expected: format!("{kind} v{FORMAT_VERSION}"),
            found: format!("{} v{}", envelope.kind, envelope.format_version),
        });
    }
    serde_json::from_value(envelope.payload).map_err(|e| Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn write_fit(fit: &FitResult, path: &Path) -> Result<()> {
    write_json(fit, "fit", path)
}

pub fn read_fit(path: &Path) -> Result<FitResult> {
    read_json("fit", path)
}

pub fn write_grid(grid: &SelectionGrid, path: &Path) -> Result<()> {
    write_json(grid, "selection-grid", path)
}

pub fn read_grid(path: &Path) -> Result<SelectionGrid> {
    read_json("selection-grid", path)
}

pub fn write_report(report: &EvaluationReport, path: &Path) -> Result<()> {
    write_json(report, "evaluation-report", path)
}

pub fn read_report(path: &Path) -> Result<EvaluationReport> {
    read_json("evaluation-report", path)
}

/// Ground truth saved alongside simulated datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTruth {
    pub params: MltcnParams,
    pub seed: u64,
    /// True component per observation.
    pub group: Vec<usize>,
    /// True branch per observation; true = normal, false = extreme.
    pub normal: Vec<bool>,
    /// True latent positions.
    pub latent: Vec<Vec<f64>>,
}

impl SimulationTruth {
    pub fn from_assignment(
        params: &MltcnParams,
        seed: u64,
        assignment: &LatentAssignment,
    ) -> Self {
        SimulationTruth {
            params: params.clone(),
            seed,
            group: assignment.z_hard.clone().unwrap_or_default(),
            normal: assignment.c_hard.clone().unwrap_or_default(),
            latent: assignment.y.clone().unwrap_or_default(),
        }
    }
}

pub fn write_truth(truth: &SimulationTruth, path: &Path) -> Result<()> {
    write_json(truth, "simulation-truth", path)
}

pub fn read_truth(path: &Path) -> Result<SimulationTruth> {
    read_json("simulation-truth", path)
}

/// Reads plain-text labels, one per line; interior blank lines are
/// preserved as empty labels, trailing blank lines are not.
pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
    while labels.last().is_some_and(|l| l.is_empty()) {
        labels.pop();
    }
    Ok(labels)
}

// ---------------------------------------------------------------------------
// Presentation CSV tables
// ---------------------------------------------------------------------------

/// BIC grid as a D-by-G matrix (rows are latent dimensions, columns are
/// component counts); failed cells are left empty.
pub fn write_grid_csv(grid: &SelectionGrid, path: &Path) -> Result<()> {
    let mut gs: Vec<usize> = grid.cells.iter().map(|c| c.g).collect();
    gs.sort_unstable();
    gs.dedup();
    let mut ds: Vec<usize> = grid.cells.iter().map(|c| c.d).collect();
    ds.sort_unstable();
    ds.dedup();

    let mut out = csv::Writer::from_writer(open_write(path)?);
    let mut header = vec!["d".to_string()];
    header.extend(gs.iter().map(|g| format!("g{g}")));
    out.write_record(&header).map_err(csv_io(path))?;
    for &d in &ds {
        let mut record = vec![d.to_string()];
        for &g in &gs {
            let bic = grid.cell(g, d).and_then(|c| c.bic());
            record.push(bic.map_or(String::new(), |b| format!("{b:.3}")));
        }
        out.write_record(&record).map_err(csv_io(path))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Long-format per-cell series (one row per (G, D) cell) for plotting BIC
/// and ARI against the number of components.
pub fn write_grid_series_csv(grid: &SelectionGrid, path: &Path) -> Result<()> {
    let mut out = csv::Writer::from_writer(open_write(path)?);
    out.write_record(["g", "d", "bic", "bound", "converged", "iterations", "ari", "error"])
        .map_err(csv_io(path))?;
    for cell in &grid.cells {
        let record = match &cell.fit {
            Some(fit) => vec![
                cell.g.to_string(),
                cell.d.to_string(),
                format!("{:.6}", fit.bic),
                format!("{:.6}", fit.bound()),
                fit.converged.to_string(),
                fit.iterations.to_string(),
                cell.ari.map_or(String::new(), |a| format!("{a:.6}")),
                String::new(),
            ],
            None => vec![
                cell.g.to_string(),
                cell.d.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                cell.error.clone().unwrap_or_default(),
            ],
        };
        out.write_record(&record).map_err(csv_io(path))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Median-individual profile table: per (component, variable), the model
/// probability sigmoid(alpha) plus the empirical normal/extreme response
/// rates.
pub fn write_profiles_csv(fit: &FitResult, data: &BinaryDataset, path: &Path) -> Result<()> {
    let model = median_profiles(&fit.params);
    let (normal, extreme) = branch_response_rates(data, &fit.z, &fit.c);
    let names: Vec<String> = match &data.variable_names {
        Some(names) => names.clone(),
        None => (1..=data.n_variables()).map(|i| format!("v{i}")).collect(),
    };

    let mut out = csv::Writer::from_writer(open_write(path)?);
    out.write_record(["group", "variable", "median_prob", "normal_rate", "extreme_rate"])
        .map_err(csv_io(path))?;
    for g in 0..fit.params.g {
        for (m, name) in names.iter().enumerate() {
            out.write_record([
                format!("g{}", g + 1),
                name.clone(),
                format!("{:.6}", model[g][m]),
                format!("{:.6}", normal[g][m]),
                format!("{:.6}", extreme[g][m]),
            ])
            .map_err(csv_io(path))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Cross-tabulation of true labels against (component, normal/extreme).
pub fn write_report_csv(report: &EvaluationReport, path: &Path) -> Result<()> {
    let mut out = csv::Writer::from_writer(open_write(path)?);
    out.write_record(["class", "group", "total", "normal", "extreme"])
        .map_err(csv_io(path))?;
    for (cls, row) in report.classes.iter().zip(&report.cross_tab) {
        for (g, cell) in row.iter().enumerate() {
            out.write_record([
                cls.clone(),
                format!("g{}", g + 1),
                cell.total.to_string(),
                cell.normal.to_string(),
                cell.extreme.to_string(),
            ])
            .map_err(csv_io(path))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn open_write(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{other:?}")),
        ),
    }
}
