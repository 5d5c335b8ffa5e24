//! Observation records, CSV ingestion and covariate-by-year cells.
//!
//! A [`Dataset`] always holds its observations sorted by `(group, year)` with
//! the year stored centered (raw year minus [`Dataset::center_year`]). Every
//! group therefore occupies one contiguous run of rows, chronologically
//! ordered, which is the layout the block-structured random-effect predictor
//! relies on.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Kind of a declared covariate column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    /// Values restricted to {0, 1}.
    Binary,
    /// Any finite real.
    Real,
    /// String levels, expanded at load into one binary dummy per non-baseline level.
    Categorical,
}

/// One declared covariate as it appears in the input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
}

/// Covariate declaration handed to [`load_csv`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub covariates: Vec<CovariateSpec>,
}

impl Schema {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Parses `name:kind,name:kind`; a bare `name` means `binary`.
    pub fn parse(decl: &str) -> Result<Self> {
        let mut covariates = Vec::new();
        for item in decl.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, kind) = match item.split_once(':') {
                Some((n, k)) => (n.trim(), k.trim()),
                None => (item, "binary"),
            };
            let kind = match kind {
                "binary" => CovariateKind::Binary,
                "real" => CovariateKind::Real,
                "categorical" => CovariateKind::Categorical,
                other => {
                    return Err(Error::Schema(format!(
                        "covariate `{name}` has unknown kind `{other}`"
                    )))
                }
            };
            if RESERVED.contains(&name) {
                return Err(Error::Schema(format!(
                    "`{name}` is a reserved column and cannot be a covariate"
                )));
            }
            covariates.push(CovariateSpec {
                name: name.to_string(),
                kind,
            });
        }
        Ok(Self { covariates })
    }
}

const RESERVED: [&str; 4] = ["group", "year", "day", "count_weight"];

/// A covariate column of a loaded dataset (categoricals already expanded).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub kind: CovariateKind,
}

/// One recorded individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub group: String,
    /// Centered year.
    pub year: i64,
    pub day: f64,
    pub covariates: Vec<f64>,
    pub count_weight: f64,
}

impl Observation {
    pub fn new(group: impl Into<String>, year: i64, day: f64) -> Self {
        Self {
            group: group.into(),
            year,
            day,
            covariates: Vec::new(),
            count_weight: 1.0,
        }
    }

    pub fn with_covariates(mut self, covariates: Vec<f64>) -> Self {
        self.covariates = covariates;
        self
    }
}

/// Immutable, sorted, year-centered collection of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    schema: Vec<Covariate>,
    observations: Vec<Observation>,
    center_year: i64,
}

impl Dataset {
    /// Builds a dataset from observations whose `year` holds the raw calendar
    /// year. Years are shifted by `center_year` (integer median when `None`)
    /// and rows are stably sorted by `(group, year)`.
    pub fn from_raw(
        schema: Vec<Covariate>,
        mut observations: Vec<Observation>,
        center_year: Option<i64>,
    ) -> Result<Self> {
        for (i, obs) in observations.iter().enumerate() {
            if obs.covariates.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "observation {i} has {} covariates, schema declares {}",
                    obs.covariates.len(),
                    schema.len()
                )));
            }
            if !obs.day.is_finite() {
                return Err(Error::Precondition(format!("observation {i} has non-finite day")));
            }
            if !(obs.count_weight.is_finite() && obs.count_weight > 0.0) {
                return Err(Error::Precondition(format!(
                    "observation {i} has non-positive count weight"
                )));
            }
        }
        let center = match center_year {
            Some(c) => c,
            None => median_year(&observations),
        };
        for obs in &mut observations {
            obs.year -= center;
        }
        Ok(Self::from_centered(schema, observations, center))
    }

    /// Builds a dataset from observations whose years are already centered.
    pub fn from_centered(
        schema: Vec<Covariate>,
        mut observations: Vec<Observation>,
        center_year: i64,
    ) -> Self {
        observations.sort_by(|a, b| a.group.cmp(&b.group).then(a.year.cmp(&b.year)));
        Self {
            schema,
            observations,
            center_year,
        }
    }

    pub fn schema(&self) -> &[Covariate] {
        &self.schema
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn center_year(&self) -> i64 {
        self.center_year
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.schema.iter().map(|c| c.name.clone()).collect()
    }

    /// Contiguous row range of every group, in sorted group order.
    pub fn groups(&self) -> Vec<(String, Range<usize>)> {
        let mut out: Vec<(String, Range<usize>)> = Vec::new();
        for (i, obs) in self.observations.iter().enumerate() {
            match out.last_mut() {
                Some((g, r)) if *g == obs.group => r.end = i + 1,
                _ => out.push((obs.group.clone(), i..i + 1)),
            }
        }
        out
    }

    pub fn group_names(&self) -> Vec<String> {
        self.groups().into_iter().map(|(g, _)| g).collect()
    }

    /// Smallest and largest centered year.
    pub fn year_range(&self) -> Option<(i64, i64)> {
        let min = self.observations.iter().map(|o| o.year).min()?;
        let max = self.observations.iter().map(|o| o.year).max()?;
        Some((min, max))
    }

    /// Checks that each group is one contiguous run and chronologically ordered.
    pub fn check_ordering(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut prev: Option<&Observation> = None;
        for (i, obs) in self.observations.iter().enumerate() {
            match prev {
                Some(p) if p.group == obs.group => {
                    if obs.year < p.year {
                        return Err(Error::Ordering(format!(
                            "row {i}: year {} precedes {} within group `{}`",
                            obs.year, p.year, obs.group
                        )));
                    }
                }
                _ => {
                    if !seen.insert(obs.group.as_str()) {
                        return Err(Error::Ordering(format!(
                            "group `{}` is not contiguous (resumes at row {i})",
                            obs.group
                        )));
                    }
                }
            }
            prev = Some(obs);
        }
        Ok(())
    }

    /// Dataset made of the rows at `indices` (repeats allowed), re-sorted.
    pub fn resample(&self, indices: &[usize]) -> Dataset {
        let observations = indices.iter().map(|&i| self.observations[i].clone()).collect();
        Self::from_centered(self.schema.clone(), observations, self.center_year)
    }

    /// Dataset restricted to one group.
    pub fn group_subset(&self, group: &str) -> Dataset {
        let observations = self
            .observations
            .iter()
            .filter(|o| o.group == group)
            .cloned()
            .collect();
        Self::from_centered(self.schema.clone(), observations, self.center_year)
    }

    /// Writes the dataset in the ingestion CSV format with raw years.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["group".to_string(), "year".into(), "day".into()];
        header.extend(self.schema.iter().map(|c| c.name.clone()));
        header.push("count_weight".into());
        w.write_record(&header)?;
        for obs in &self.observations {
            let mut rec = vec![
                obs.group.clone(),
                (obs.year + self.center_year).to_string(),
                obs.day.to_string(),
            ];
            rec.extend(obs.covariates.iter().map(|v| v.to_string()));
            rec.push(obs.count_weight.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Lower integer median of the raw years.
fn median_year(observations: &[Observation]) -> i64 {
    if observations.is_empty() {
        return 0;
    }
    let mut years: Vec<i64> = observations.iter().map(|o| o.year).collect();
    years.sort_unstable();
    years[(years.len() - 1) / 2]
}

/// Reads a dataset from a CSV file. See [`read_csv`].
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema, center_year: Option<i64>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema, center_year)
}

/// Reads a dataset from CSV with a header row containing `group`, `year`,
/// `day`, every declared covariate, and optionally `count_weight`.
///
/// Any unparseable or out-of-domain cell fails the whole load with its
/// 1-based line number.
pub fn read_csv<R: Read>(reader: R, schema: &Schema, center_year: Option<i64>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing required column `{name}`")))
    };
    let group_col = column("group")?;
    let year_col = column("year")?;
    let day_col = column("day")?;
    let weight_col = headers.iter().position(|h| h == "count_weight");
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| column(&c.name))
        .collect::<Result<Vec<_>>>()?;

    struct RawRow {
        line: u64,
        group: String,
        year: i64,
        day: f64,
        weight: f64,
        values: Vec<String>,
    }

    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |col: usize| record.get(col).unwrap_or("");
        let row_err = |message: String| Error::Row { line, message };

        let group = field(group_col).to_string();
        if group.is_empty() {
            return Err(row_err("empty group".into()));
        }
        let year = field(year_col)
            .parse::<i64>()
            .map_err(|_| row_err(format!("cannot parse year `{}`", field(year_col))))?;
        let day = parse_real(field(day_col)).ok_or_else(|| {
            row_err(format!("cannot parse day `{}`", field(day_col)))
        })?;
        let weight = match weight_col {
            Some(c) if !field(c).is_empty() => match parse_real(field(c)) {
                Some(w) if w > 0.0 => w,
                _ => return Err(row_err(format!("invalid count_weight `{}`", field(c)))),
            },
            _ => 1.0,
        };
        let values = cov_cols.iter().map(|&c| field(c).to_string()).collect::<Vec<_>>();
        for (spec, v) in schema.covariates.iter().zip(&values) {
            if v.is_empty() {
                return Err(row_err(format!("missing value for covariate `{}`", spec.name)));
            }
        }
        rows.push(RawRow {
            line,
            group,
            year,
            day,
            weight,
            values,
        });
    }

    // Categorical levels in sorted order; the first level is the baseline.
    let levels: Vec<Vec<String>> = schema
        .covariates
        .iter()
        .enumerate()
        .map(|(k, spec)| match spec.kind {
            CovariateKind::Categorical => rows
                .iter()
                .map(|r| r.values[k].clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            _ => Vec::new(),
        })
        .collect();

    let mut columns = Vec::new();
    for (spec, lv) in schema.covariates.iter().zip(&levels) {
        match spec.kind {
            CovariateKind::Categorical => {
                for level in lv.iter().skip(1) {
                    columns.push(Covariate {
                        name: format!("{}={}", spec.name, level),
                        kind: CovariateKind::Binary,
                    });
                }
            }
            kind => columns.push(Covariate {
                name: spec.name.clone(),
                kind,
            }),
        }
    }

    let mut observations = Vec::with_capacity(rows.len());
    for row in rows {
        let mut covariates = Vec::with_capacity(columns.len());
        for ((spec, lv), raw) in schema.covariates.iter().zip(&levels).zip(&row.values) {
            match spec.kind {
                CovariateKind::Categorical => {
                    for level in lv.iter().skip(1) {
                        covariates.push(if raw == level { 1.0 } else { 0.0 });
                    }
                }
                CovariateKind::Binary => match parse_real(raw) {
                    Some(v) if v == 0.0 || v == 1.0 => covariates.push(v),
                    _ => {
                        return Err(Error::Row {
                            line: row.line,
                            message: format!("binary covariate `{}` has value `{raw}`", spec.name),
                        })
                    }
                },
                CovariateKind::Real => match parse_real(raw) {
                    Some(v) => covariates.push(v),
                    None => {
                        return Err(Error::Row {
                            line: row.line,
                            message: format!("cannot parse covariate `{}` value `{raw}`", spec.name),
                        })
                    }
                },
            }
        }
        observations.push(Observation {
            group: row.group,
            year: row.year,
            day: row.day,
            covariates,
            count_weight: row.weight,
        });
    }
    Dataset::from_raw(columns, observations, center_year)
}

fn parse_real(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Drops every group with fewer than `min_n` observations.
pub fn filter_min_count(ds: &Dataset, min_n: usize) -> Result<Dataset> {
    if min_n == 0 {
        return Err(Error::Precondition("min_n must be at least 1".into()));
    }
    let keep: BTreeSet<String> = ds
        .groups()
        .into_iter()
        .filter(|(_, r)| r.len() >= min_n)
        .map(|(g, _)| g)
        .collect();
    let observations = ds
        .observations
        .iter()
        .filter(|o| keep.contains(&o.group))
        .cloned()
        .collect();
    Ok(Dataset {
        schema: ds.schema.clone(),
        observations,
        center_year: ds.center_year,
    })
}

/// Members of one nonempty (group, year, covariate-combination) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub group: String,
    pub year: i64,
    pub covariates: Vec<f64>,
    /// Member days, nondecreasing.
    pub days: Vec<f64>,
}

impl Cell {
    /// Member count, the weight that gives each individual equal weight.
    pub fn weight(&self) -> usize {
        self.days.len()
    }

    pub fn quantile(&self, tau: f64) -> Result<f64> {
        empirical_quantile(&self.days, tau)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTable {
    pub schema: Vec<Covariate>,
    pub center_year: i64,
    pub cells: Vec<Cell>,
}

impl CellTable {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn total_weight(&self) -> usize {
        self.cells.iter().map(Cell::weight).sum()
    }

    /// Contiguous cell range of every group.
    pub fn groups(&self) -> Vec<(String, Range<usize>)> {
        let mut out: Vec<(String, Range<usize>)> = Vec::new();
        for (i, cell) in self.cells.iter().enumerate() {
            match out.last_mut() {
                Some((g, r)) if *g == cell.group => r.end = i + 1,
                _ => out.push((cell.group.clone(), i..i + 1)),
            }
        }
        out
    }
}

fn cmp_covariates(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Groups observations into one cell per observed (group, year, covariates)
/// combination. Cells come out sorted by that key.
pub fn build_cells(ds: &Dataset) -> Result<CellTable> {
    if ds.is_empty() {
        return Err(Error::Precondition("cannot build cells from an empty dataset".into()));
    }
    let obs = &ds.observations;
    let key = |a: &Observation, b: &Observation| {
        a.group
            .cmp(&b.group)
            .then(a.year.cmp(&b.year))
            .then_with(|| cmp_covariates(&a.covariates, &b.covariates))
    };
    let mut order: Vec<usize> = (0..obs.len()).collect();
    order.sort_by(|&i, &j| key(&obs[i], &obs[j]));

    let mut cells: Vec<Cell> = Vec::new();
    for i in order {
        let o = &obs[i];
        match cells.last_mut() {
            Some(c)
                if c.group == o.group
                    && c.year == o.year
                    && cmp_covariates(&c.covariates, &o.covariates).is_eq() =>
            {
                c.days.push(o.day)
            }
            _ => cells.push(Cell {
                group: o.group.clone(),
                year: o.year,
                covariates: o.covariates.clone(),
                days: vec![o.day],
            }),
        }
    }
    for c in &mut cells {
        c.days.sort_by(f64::total_cmp);
    }
    Ok(CellTable {
        schema: ds.schema.clone(),
        center_year: ds.center_year,
        cells,
    })
}

/// Left-continuous inverse of the empirical CDF: the smallest element `y`
/// with `F(y) >= tau`, i.e. the `ceil(n * tau)`-th order statistic.
pub fn empirical_quantile(sorted_days: &[f64], tau: f64) -> Result<f64> {
    let n = sorted_days.len();
    if n == 0 {
        return Err(Error::Precondition("empirical quantile of an empty list".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Precondition(format!("quantile level {tau} outside (0, 1)")));
    }
    Ok(sorted_days[order_statistic_index(n, tau)])
}

/// Zero-based index `k - 1` of the smallest `k` with `k / n >= tau`.
///
/// `k / n` is compared in floating point exactly as the CDF value would be,
/// so products like `100 * 0.07` rounding up do not shift the result.
pub(crate) fn order_statistic_index(n: usize, tau: f64) -> usize {
    let nf = n as f64;
    let mut k = ((nf * tau).ceil() as usize).clamp(1, n);
    while k > 1 && ((k - 1) as f64) / nf >= tau {
        k -= 1;
    }
    while k < n && (k as f64) / nf < tau {
        k += 1;
    }
    k - 1
}
