//! Balanced long-format panels: ingestion, validation and outcome differences.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Display;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column roles in a long-format CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelSchema {
    pub unit_column: String,
    pub period_column: String,
    pub outcome_column: String,
    pub treatment_columns: Vec<String>,
    pub covariate_columns: Vec<String>,
}

impl PanelSchema {
    pub fn new(
        unit: impl Into<String>,
        period: impl Into<String>,
        outcome: impl Into<String>,
        treatments: &[&str],
        covariates: &[&str],
    ) -> Self {
        Self {
            unit_column: unit.into(),
            period_column: period.into(),
            outcome_column: outcome.into(),
            treatment_columns: treatments.iter().map(|s| s.to_string()).collect(),
            covariate_columns: covariates.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn all_columns(&self) -> impl Iterator<Item = &String> {
        [&self.unit_column, &self.period_column, &self.outcome_column]
            .into_iter()
            .chain(&self.treatment_columns)
            .chain(&self.covariate_columns)
    }

    pub fn validate(&self) -> Result<()> {
        if self.treatment_columns.is_empty() {
            return Err(Error::InvalidSchema("at least one treatment column is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in self.all_columns() {
            if !seen.insert(c.as_str()) {
                return Err(Error::InvalidSchema(format!("column `{c}` used more than once")));
            }
        }
        Ok(())
    }
}

/// Balanced panel with time-invariant covariates.
///
/// Periods are addressed 1-based (`1..=n_periods`) throughout the public API.
/// The value type only needs ring operations, so exact types such as
/// rationals work for storage and differencing.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset<T> {
    n_units: usize,
    n_periods: usize,
    treatment_dim: usize,
    outcomes: Vec<T>,
    treatments: Vec<T>,
    covariates: Vec<T>,
    unit_ids: Vec<String>,
    period_labels: Vec<String>,
    outcome_name: String,
    treatment_names: Vec<String>,
    covariate_names: Vec<String>,
}

impl<T: Num + Clone> PanelDataset<T> {
    /// Assembles a panel from per-unit rows.
    ///
    /// `outcomes[i][t]`, `treatments[i][t][k]` and `covariates[i][j]` use
    /// 0-based indices here; shapes are checked.
    pub fn from_rows(
        unit_ids: Vec<String>,
        period_labels: Vec<String>,
        outcomes: Vec<Vec<T>>,
        treatments: Vec<Vec<Vec<T>>>,
        covariates: Vec<Vec<T>>,
    ) -> Result<Self> {
        let n = unit_ids.len();
        let t = period_labels.len();
        if n == 0 || t == 0 {
            return Err(Error::UnbalancedPanel("panel has no units or no periods".into()));
        }
        if outcomes.len() != n || treatments.len() != n || covariates.len() != n {
            return Err(Error::UnbalancedPanel("row count differs from number of units".into()));
        }
        let dim = treatments[0].first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::InvalidSchema("treatments need at least one component".into()));
        }
        let n_cov = covariates[0].len();
        let mut flat_y = Vec::with_capacity(n * t);
        let mut flat_d = Vec::with_capacity(n * t * dim);
        let mut flat_x = Vec::with_capacity(n * n_cov);
        for i in 0..n {
            if outcomes[i].len() != t || treatments[i].len() != t {
                return Err(Error::UnbalancedPanel(format!(
                    "unit `{}` does not have exactly {t} periods",
                    unit_ids[i]
                )));
            }
            if covariates[i].len() != n_cov {
                return Err(Error::InvalidSchema(format!(
                    "unit `{}` has {} covariates, expected {n_cov}",
                    unit_ids[i],
                    covariates[i].len()
                )));
            }
            flat_y.extend(outcomes[i].iter().cloned());
            for d in &treatments[i] {
                if d.len() != dim {
                    return Err(Error::InvalidSchema("treatment dimension varies".into()));
                }
                flat_d.extend(d.iter().cloned());
            }
            flat_x.extend(covariates[i].iter().cloned());
        }
        Ok(Self {
            n_units: n,
            n_periods: t,
            treatment_dim: dim,
            outcomes: flat_y,
            treatments: flat_d,
            covariates: flat_x,
            unit_ids,
            period_labels,
            outcome_name: "y".into(),
            treatment_names: (1..=dim).map(|k| format!("d{k}")).collect(),
            covariate_names: (1..=n_cov).map(|k| format!("x{k}")).collect(),
        })
    }

    /// Replaces the column names used when writing the panel back out.
    pub fn with_names(
        mut self,
        outcome: impl Into<String>,
        treatments: Vec<String>,
        covariates: Vec<String>,
    ) -> Self {
        assert_eq!(treatments.len(), self.treatment_dim);
        assert_eq!(covariates.len(), self.n_covariates());
        self.outcome_name = outcome.into();
        self.treatment_names = treatments;
        self.covariate_names = covariates;
        self
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn treatment_dim(&self) -> usize {
        self.treatment_dim
    }

    pub fn n_covariates(&self) -> usize {
        if self.n_units == 0 {
            0
        } else {
            self.covariates.len() / self.n_units
        }
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn period_labels(&self) -> &[String] {
        &self.period_labels
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Outcome of unit `i` (0-based) in period `t` (1-based).
    #[inline]
    pub fn outcome(&self, i: usize, t: usize) -> &T {
        &self.outcomes[i * self.n_periods + t - 1]
    }

    /// Treatment vector of unit `i` (0-based) in period `t` (1-based).
    #[inline]
    pub fn treatment(&self, i: usize, t: usize) -> &[T] {
        let start = (i * self.n_periods + t - 1) * self.treatment_dim;
        &self.treatments[start..start + self.treatment_dim]
    }

    #[inline]
    pub fn covariates(&self, i: usize) -> &[T] {
        let k = self.n_covariates();
        &self.covariates[i * k..(i + 1) * k]
    }

    pub fn treatment_path(&self, i: usize) -> TreatmentPath<'_, T> {
        let len = self.n_periods * self.treatment_dim;
        TreatmentPath {
            values: &self.treatments[i * len..(i + 1) * len],
            dim: self.treatment_dim,
        }
    }

    /// `Y[i][t] - Y[i][s]` for every unit.
    pub fn outcome_difference(&self, t: usize, s: usize) -> Result<Vec<T>> {
        if !(1 <= s && s < t && t <= self.n_periods) {
            return Err(Error::InvalidPeriods {
                t,
                s,
                n_periods: self.n_periods,
            });
        }
        Ok((0..self.n_units)
            .map(|i| self.outcome(i, t).clone() - self.outcome(i, s).clone())
            .collect())
    }
}

/// One unit's treatment history, periods 1-based.
#[derive(Debug, Clone, Copy)]
pub struct TreatmentPath<'a, T> {
    values: &'a [T],
    dim: usize,
}

impl<'a, T: Num> TreatmentPath<'a, T> {
    pub fn n_periods(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn at(&self, t: usize) -> &'a [T] {
        &self.values[(t - 1) * self.dim..t * self.dim]
    }

    /// A treatment is "zero" only when every component is exactly zero.
    pub fn is_treated(&self, t: usize) -> bool {
        self.at(t).iter().any(|d| !d.is_zero())
    }
}

fn sort_labels(labels: &mut [String]) {
    let all_numeric = labels.iter().all(|l| l.trim().parse::<f64>().is_ok());
    if all_numeric {
        labels.sort_by(|a, b| {
            let x: f64 = a.trim().parse().unwrap();
            let y: f64 = b.trim().parse().unwrap();
            x.partial_cmp(&y).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
        });
    } else {
        labels.sort();
    }
}

fn parse_cell<T: FromStr>(raw: &str, row: usize, column: &str) -> Result<T> {
    if raw.is_empty() {
        return Err(Error::EmptyValue {
            row,
            column: column.to_string(),
        });
    }
    raw.parse::<T>().map_err(|_| Error::NonNumeric {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })
}

/// Reads a long-format panel from any reader. Rows may come in any order;
/// units and periods are sorted (numerically when every label parses as a
/// number, lexicographically otherwise).
pub fn read_panel_csv<T, R>(reader: R, schema: &PanelSchema) -> Result<PanelDataset<T>>
where
    T: Num + Clone + FromStr,
    R: Read,
{
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let unit_col = find(&schema.unit_column)?;
    let period_col = find(&schema.period_column)?;
    let outcome_col = find(&schema.outcome_column)?;
    let treat_cols = schema
        .treatment_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let cov_cols = schema
        .covariate_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    struct Obs<T> {
        y: T,
        d: Vec<T>,
        x: Vec<T>,
        row: usize,
    }
    let mut by_unit: HashMap<String, HashMap<String, Obs<T>>> = HashMap::new();
    let mut periods: Vec<String> = Vec::new();
    let mut period_seen = std::collections::HashSet::new();

    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let get = |col: usize, name: &str| -> Result<&str> {
            let v = rec.get(col).unwrap_or("");
            if v.is_empty() {
                Err(Error::EmptyValue {
                    row,
                    column: name.to_string(),
                })
            } else {
                Ok(v)
            }
        };
        let unit = get(unit_col, &schema.unit_column)?.to_string();
        let period = get(period_col, &schema.period_column)?.to_string();
        let y = parse_cell(rec.get(outcome_col).unwrap_or(""), row, &schema.outcome_column)?;
        let d = treat_cols
            .iter()
            .zip(&schema.treatment_columns)
            .map(|(&c, name)| parse_cell(rec.get(c).unwrap_or(""), row, name))
            .collect::<Result<Vec<T>>>()?;
        let x = cov_cols
            .iter()
            .zip(&schema.covariate_columns)
            .map(|(&c, name)| parse_cell(rec.get(c).unwrap_or(""), row, name))
            .collect::<Result<Vec<T>>>()?;
        if period_seen.insert(period.clone()) {
            periods.push(period.clone());
        }
        let entry = by_unit.entry(unit.clone()).or_default();
        if entry.contains_key(&period) {
            return Err(Error::UnbalancedPanel(format!(
                "unit `{unit}` has duplicate rows for period `{period}`"
            )));
        }
        entry.insert(period, Obs { y, d, x, row });
    }

    sort_labels(&mut periods);
    let mut units: Vec<String> = by_unit.keys().cloned().collect();
    sort_labels(&mut units);

    let mut outcomes = Vec::with_capacity(units.len());
    let mut treatments = Vec::with_capacity(units.len());
    let mut covariates = Vec::with_capacity(units.len());
    for unit in &units {
        let obs = &by_unit[unit];
        let mut ys = Vec::with_capacity(periods.len());
        let mut ds = Vec::with_capacity(periods.len());
        let mut x0: Option<&Vec<T>> = None;
        for p in &periods {
            let o = obs.get(p).ok_or_else(|| {
                Error::UnbalancedPanel(format!("unit `{unit}` is missing period `{p}`"))
            })?;
            if let Some(x0) = x0 {
                if let Some(j) = (0..x0.len()).find(|&j| x0[j] != o.x[j]) {
                    log::debug!("covariate mismatch at data row {}", o.row);
                    return Err(Error::TimeVaryingCovariate {
                        unit: unit.clone(),
                        column: schema.covariate_columns[j].clone(),
                    });
                }
            } else {
                x0 = Some(&o.x);
            }
            ys.push(o.y.clone());
            ds.push(o.d.clone());
        }
        outcomes.push(ys);
        treatments.push(ds);
        covariates.push(x0.cloned().unwrap_or_default());
    }

    Ok(PanelDataset::from_rows(units, periods, outcomes, treatments, covariates)?.with_names(
        schema.outcome_column.clone(),
        schema.treatment_columns.clone(),
        schema.covariate_columns.clone(),
    ))
}

pub fn load_panel_csv<T>(path: impl AsRef<Path>, schema: &PanelSchema) -> Result<PanelDataset<T>>
where
    T: Num + Clone + FromStr,
{
    let file = std::fs::File::open(path)?;
    read_panel_csv(std::io::BufReader::new(file), schema)
}

/// Schema matching the column names [`write_panel_csv`] emits.
pub fn default_schema<T: Num + Clone>(panel: &PanelDataset<T>) -> PanelSchema {
    PanelSchema {
        unit_column: "unit".into(),
        period_column: "period".into(),
        outcome_column: panel.outcome_name.clone(),
        treatment_columns: panel.treatment_names.clone(),
        covariate_columns: panel.covariate_names.clone(),
    }
}

/// Writes the panel in long format with columns
/// `unit, period, <outcome>, <treatments..>, <covariates..>`.
pub fn write_panel_csv<T, W>(panel: &PanelDataset<T>, writer: W) -> Result<()>
where
    T: Num + Clone + Display,
    W: Write,
{
    let mut wtr = csv::Writer::from_writer(writer);
    let schema = default_schema(panel);
    let mut header = vec![
        schema.unit_column.clone(),
        schema.period_column.clone(),
        schema.outcome_column.clone(),
    ];
    header.extend(schema.treatment_columns.iter().cloned());
    header.extend(schema.covariate_columns.iter().cloned());
    wtr.write_record(&header)?;
    for i in 0..panel.n_units {
        for t in 1..=panel.n_periods {
            let mut rec = vec![
                panel.unit_ids[i].clone(),
                panel.period_labels[t - 1].clone(),
                panel.outcome(i, t).to_string(),
            ];
            rec.extend(panel.treatment(i, t).iter().map(|d| d.to_string()));
            rec.extend(panel.covariates(i).iter().map(|x| x.to_string()));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}
