//! Irregular multi-series time-series table: `(ID, time, responses, covariates)`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Name of the series identifier column; it is also exposed as a factor.
pub const ID_COLUMN: &str = "ID";
pub const TIME_COLUMN: &str = "time";

/// Contiguous block of rows belonging to one series.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Series {
    pub id: String,
    pub start: usize,
    pub end: usize,
}

impl Series {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn rows(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    ids: Vec<String>,
    times: Vec<f64>,
    responses: Vec<(String, Vec<Option<f64>>)>,
    covariates: BTreeMap<String, Vec<f64>>,
    factors: BTreeMap<String, Vec<String>>,
    series: Vec<Series>,
}

impl Dataset {
    /// Build a dataset from row-aligned columns.
    ///
    /// Rows are grouped by ID in order of first appearance. Within a series
    /// the input order must already have strictly increasing times.
    pub fn new(
        ids: Vec<String>,
        times: Vec<f64>,
        responses: Vec<(String, Vec<Option<f64>>)>,
        covariates: Vec<(String, Vec<f64>)>,
        factors: Vec<(String, Vec<String>)>,
    ) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if times.len() != n {
            return Err(Error::Dimension(format!(
                "time column has {} rows, expected {n}",
                times.len()
            )));
        }
        for (name, col) in &responses {
            check_len(name, col.len(), n)?;
        }
        for (name, col) in &covariates {
            check_len(name, col.len(), n)?;
        }
        for (name, col) in &factors {
            check_len(name, col.len(), n)?;
        }
        if let Some(row) = times.iter().position(|t| !t.is_finite()) {
            return Err(Error::Data(format!("non-finite time at row {}", row + 1)));
        }

        // stable grouping by ID
        let mut order_of: BTreeMap<&str, usize> = BTreeMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (row, id) in ids.iter().enumerate() {
            let g = *order_of.entry(id.as_str()).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(row);
        }

        let mut duplicates = Vec::new();
        let mut decreasing = Vec::new();
        for rows in &groups {
            for w in rows.windows(2) {
                let (a, b) = (times[w[0]], times[w[1]]);
                if b == a {
                    duplicates.push(w[1] + 1);
                } else if b < a {
                    decreasing.push(w[1] + 1);
                }
            }
        }
        if !duplicates.is_empty() {
            return Err(Error::Data(format!(
                "duplicate timestamps within a series at row(s) {}",
                join_rows(&duplicates)
            )));
        }
        if !decreasing.is_empty() {
            return Err(Error::Data(format!(
                "time is not increasing within a series at row(s) {}",
                join_rows(&decreasing)
            )));
        }

        let perm: Vec<usize> = groups.iter().flatten().copied().collect();
        let mut series = Vec::with_capacity(groups.len());
        let mut start = 0;
        for rows in &groups {
            series.push(Series {
                id: ids[rows[0]].clone(),
                start,
                end: start + rows.len(),
            });
            start += rows.len();
        }

        let ids: Vec<String> = perm.iter().map(|&i| ids[i].clone()).collect();
        let times = permute(&times, &perm);
        let responses = responses
            .into_iter()
            .map(|(name, col)| (name, permute(&col, &perm)))
            .collect();
        let covariates = covariates
            .into_iter()
            .map(|(name, col)| (name, permute(&col, &perm)))
            .collect();
        let mut factors: BTreeMap<String, Vec<String>> = factors
            .into_iter()
            .map(|(name, col)| (name, permute(&col, &perm)))
            .collect();
        factors.insert(ID_COLUMN.to_string(), ids.clone());

        Ok(Self {
            ids,
            times,
            responses,
            covariates,
            factors,
            series,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.times.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn series(&self) -> &[Series] {
        &self.series
    }

    pub fn response_names(&self) -> Vec<&str> {
        self.responses.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn response(&self, name: &str) -> Result<&[Option<f64>]> {
        self.responses
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn covariate(&self, name: &str) -> Result<&[f64]> {
        self.covariates
            .get(name)
            .map(|c| c.as_slice())
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn factor(&self, name: &str) -> Result<&[String]> {
        self.factors
            .get(name)
            .map(|c| c.as_slice())
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    pub fn covariate_names(&self) -> impl Iterator<Item = &str> {
        self.covariates.keys().map(|s| s.as_str())
    }

    pub fn has_covariate(&self, name: &str) -> bool {
        self.covariates.contains_key(name)
    }

    pub fn has_factor(&self, name: &str) -> bool {
        self.factors.contains_key(name)
    }

    /// Time steps `t[i+1] - t[i]` within each series; `None` on the last row
    /// of a series.
    pub fn time_step(&self, row: usize) -> Option<f64> {
        let s = self.series.iter().find(|s| s.rows().contains(&row))?;
        (row + 1 < s.end).then(|| self.times[row + 1] - self.times[row])
    }

    /// Copy of the dataset with the series reordered.
    pub fn with_series_order(&self, order: &[usize]) -> Result<Self> {
        let rows: Vec<usize> = order
            .iter()
            .flat_map(|&s| self.series[s].rows())
            .collect();
        let pick_f = |c: &Vec<f64>| rows.iter().map(|&r| c[r]).collect::<Vec<_>>();
        Dataset::new(
            rows.iter().map(|&r| self.ids[r].clone()).collect(),
            pick_f(&self.times),
            self.responses
                .iter()
                .map(|(n, c)| (n.clone(), rows.iter().map(|&r| c[r]).collect()))
                .collect(),
            self.covariates
                .iter()
                .map(|(n, c)| (n.clone(), pick_f(c)))
                .collect(),
            self.factors
                .iter()
                .filter(|(n, _)| n.as_str() != ID_COLUMN)
                .map(|(n, c)| (n.clone(), rows.iter().map(|&r| c[r].clone()).collect()))
                .collect(),
        )
    }

    /// Write as CSV: `ID,time,<responses>,<covariates>,<factors>`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![ID_COLUMN.to_string(), TIME_COLUMN.to_string()];
        header.extend(self.responses.iter().map(|(n, _)| n.clone()));
        header.extend(self.covariates.keys().cloned());
        let extra_factors: Vec<&String> =
            self.factors.keys().filter(|k| k.as_str() != ID_COLUMN).collect();
        header.extend(extra_factors.iter().map(|s| s.to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for row in 0..self.n_rows() {
            let mut rec = vec![self.ids[row].clone(), fmt_f64(self.times[row])];
            for (_, c) in &self.responses {
                rec.push(c[row].map(fmt_f64).unwrap_or_default());
            }
            for c in self.covariates.values() {
                rec.push(fmt_f64(c[row]));
            }
            for f in &extra_factors {
                rec.push(self.factors[*f][row].clone());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<csv>".into(),
            source: e,
        })?;
        Ok(())
    }
}

/// Float formatting used for every CSV output: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "Inf".into()
    } else {
        "-Inf".into()
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("CSV error: {e}"))
}

fn check_len(name: &str, len: usize, n: usize) -> Result<()> {
    if len != n {
        return Err(Error::Dimension(format!(
            "column '{name}' has {len} rows, expected {n}"
        )));
    }
    Ok(())
}

fn permute<T: Clone>(col: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| col[i].clone()).collect()
}

fn join_rows(rows: &[usize]) -> String {
    rows.iter()
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Options controlling how a CSV file is validated on ingestion.
#[derive(Clone, Debug, Default)]
pub struct IngestOptions {
    /// Columns holding the observed process.
    pub responses: Vec<String>,
    /// Whether empty response cells are accepted as missing observations
    /// (only meaningful for latent-state families filtered by Kalman).
    pub allow_missing_response: bool,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

/// Read and validate a CSV file. Row numbers in errors are 1-based data rows
/// (the header is not counted).
pub fn ingest_csv(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_csv(file, opts)
}

pub fn read_csv<R: std::io::Read>(input: R, opts: &IngestOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|_| Error::Data("file is empty or has no header row".into()))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::Data("file is empty or has no header row".into()));
    }
    let records: Vec<csv::StringRecord> = rdr
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)?;
    if records.is_empty() {
        return Err(Error::Data("file has a header but no data rows".into()));
    }
    let col = |name: &str| header.iter().position(|h| h == name);
    let id_idx = col(ID_COLUMN).ok_or_else(|| Error::Data("missing 'ID' column".into()))?;
    let time_idx = col(TIME_COLUMN).ok_or_else(|| Error::Data("missing 'time' column".into()))?;

    let cell = |rec: &csv::StringRecord, j: usize| rec.get(j).unwrap_or("").to_string();

    let ids: Vec<String> = records.iter().map(|r| cell(r, id_idx)).collect();
    let mut times = Vec::with_capacity(records.len());
    for (row, r) in records.iter().enumerate() {
        let s = cell(r, time_idx);
        let t: f64 = s
            .parse()
            .map_err(|_| Error::Data(format!("non-numeric time '{s}' at row {}", row + 1)))?;
        times.push(t);
    }

    let mut responses = Vec::new();
    for name in &opts.responses {
        let j = col(name).ok_or_else(|| Error::UnknownName(name.clone()))?;
        let mut values = Vec::with_capacity(records.len());
        let mut missing_rows = Vec::new();
        for (row, r) in records.iter().enumerate() {
            let s = cell(r, j);
            if is_missing(&s) {
                missing_rows.push(row + 1);
                values.push(None);
            } else {
                let v: f64 = s.parse().map_err(|_| {
                    Error::Data(format!(
                        "non-numeric response '{s}' in column '{name}' at row {}",
                        row + 1
                    ))
                })?;
                values.push(Some(v));
            }
        }
        if !missing_rows.is_empty() && !opts.allow_missing_response {
            return Err(Error::Data(format!(
                "missing response '{name}' at row(s) {} (missing observations are only supported for latent-state families)",
                join_rows(&missing_rows)
            )));
        }
        responses.push((name.clone(), values));
    }

    let mut covariates = Vec::new();
    let mut factors = Vec::new();
    for (j, name) in header.iter().enumerate() {
        if j == id_idx || j == time_idx || opts.responses.contains(name) {
            continue;
        }
        let cells: Vec<String> = records.iter().map(|r| cell(r, j)).collect();
        let missing: Vec<usize> = cells
            .iter()
            .enumerate()
            .filter(|(_, c)| is_missing(c))
            .map(|(i, _)| i + 1)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "missing covariate '{name}' at row(s) {}",
                join_rows(&missing)
            )));
        }
        let parsed: Option<Vec<f64>> = cells.iter().map(|c| c.parse().ok()).collect();
        match parsed {
            Some(v) => covariates.push((name.clone(), v)),
            None => factors.push((name.clone(), cells)),
        }
    }

    Dataset::new(ids, times, responses, covariates, factors)
}
