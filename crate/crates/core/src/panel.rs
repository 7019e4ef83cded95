//! Balanced-panel ingestion and the first-difference / lag transforms feeding
//! the moment builders.
//!
//! A panel is strongly balanced: every unit is observed at every time point.
//! Unit identifiers are opaque strings; time identifiers are numeric and only
//! their order matters. All downstream work is positional on the sorted
//! (unit, time) layout.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// One raw observation: unit id, time id, and the numeric cells by column.
#[derive(Debug, Clone)]
pub struct Record {
    pub unit: String,
    pub time: f64,
    /// Parsed values in `var_names` order; `None` marks an empty cell.
    pub values: Vec<Option<f64>>,
}

/// Immutable balanced panel: `n` units observed at `t_len` time points.
#[derive(Debug, Clone)]
pub struct PanelData {
    unit_ids: Vec<String>,
    time_ids: Vec<f64>,
    var_names: Vec<String>,
    /// One n x T matrix per variable; masked cells hold NaN.
    series: Vec<DMatrix<f64>>,
    /// Missing-value mask per variable (true = missing).
    masks: Vec<DMatrix<bool>>,
    index: HashMap<String, usize>,
}

impl PanelData {
    /// Assemble a balanced panel from raw records. Rows are re-sorted by
    /// (unit, time); numeric-looking unit ids sort numerically so that
    /// "10" comes after "2".
    pub fn from_records(var_names: Vec<String>, mut records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::TooShort { needed: 1, have: 0 });
        }
        let numeric_units = records.iter().all(|r| r.unit.parse::<f64>().is_ok());
        records.sort_by(|a, b| {
            let unit_ord = if numeric_units {
                a.unit
                    .parse::<f64>()
                    .unwrap()
                    .partial_cmp(&b.unit.parse::<f64>().unwrap())
                    .unwrap()
            } else {
                a.unit.cmp(&b.unit)
            };
            unit_ord.then(a.time.partial_cmp(&b.time).unwrap())
        });

        let mut unit_ids: Vec<String> = Vec::new();
        for r in &records {
            if unit_ids.last().map(|u| u != &r.unit).unwrap_or(true)
                && !unit_ids.contains(&r.unit)
            {
                unit_ids.push(r.unit.clone());
            }
        }
        let mut time_ids: Vec<f64> = records.iter().map(|r| r.time).collect();
        time_ids.sort_by(|a, b| a.partial_cmp(b).unwrap());
        time_ids.dedup();

        let n = unit_ids.len();
        let t_len = time_ids.len();
        let unit_pos: HashMap<&str, usize> = unit_ids
            .iter()
            .enumerate()
            .map(|(i, u)| (u.as_str(), i))
            .collect();
        let time_pos: HashMap<u64, usize> = time_ids
            .iter()
            .enumerate()
            .map(|(j, t)| (t.to_bits(), j))
            .collect();

        let k = var_names.len();
        let mut series = vec![DMatrix::from_element(n, t_len, f64::NAN); k];
        let mut masks = vec![DMatrix::from_element(n, t_len, true); k];
        let mut seen = DMatrix::from_element(n, t_len, false);

        for r in &records {
            let i = unit_pos[r.unit.as_str()];
            let j = time_pos[&r.time.to_bits()];
            if seen[(i, j)] {
                return Err(Error::DuplicateObservation {
                    unit: r.unit.clone(),
                    time: r.time,
                });
            }
            seen[(i, j)] = true;
            for (v, cell) in r.values.iter().enumerate() {
                if let Some(x) = cell {
                    series[v][(i, j)] = *x;
                    masks[v][(i, j)] = false;
                }
            }
        }

        // Strong balance: the full unit x time grid must be covered.
        for i in 0..n {
            for j in 0..t_len {
                if !seen[(i, j)] {
                    return Err(Error::UnbalancedPanel {
                        unit: unit_ids[i].clone(),
                        time: time_ids[j],
                    });
                }
            }
        }

        let index = var_names
            .iter()
            .enumerate()
            .map(|(v, name)| (name.clone(), v))
            .collect();
        Ok(PanelData {
            unit_ids,
            time_ids,
            var_names,
            series,
            masks,
            index,
        })
    }

    pub fn n(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn t_len(&self) -> usize {
        self.time_ids.len()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn time_ids(&self) -> &[f64] {
        &self.time_ids
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    pub fn has_var(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Level matrix (n x T) of a variable.
    pub fn series(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.index
            .get(name)
            .map(|&v| &self.series[v])
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    /// Missing-value mask of a variable (true = missing).
    pub fn mask(&self, name: &str) -> Result<&DMatrix<bool>> {
        self.index
            .get(name)
            .map(|&v| &self.masks[v])
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    /// Error out if any of the named variables has a missing cell, reporting
    /// the first offending (unit, time).
    pub fn require_complete<'a, I: IntoIterator<Item = &'a str>>(&self, vars: I) -> Result<()> {
        for name in vars {
            let mask = self.mask(name)?;
            for i in 0..self.n() {
                for j in 0..self.t_len() {
                    if mask[(i, j)] {
                        return Err(Error::MissingValue {
                            var: name.to_string(),
                            unit: self.unit_ids[i].clone(),
                            time: self.time_ids[j],
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Load a balanced panel from a comma-delimited UTF-8 file with one header
/// row. `id_col` holds unit identifiers, `time_col` numeric time points, and
/// every other column is read as a numeric series (empty cells are recorded
/// as missing).
pub fn load_csv<P: AsRef<Path>>(path: P, id_col: &str, time_col: &str) -> Result<PanelData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let id_idx = headers
        .iter()
        .position(|h| h == id_col)
        .ok_or_else(|| Error::MissingColumn(id_col.to_string()))?;
    let time_idx = headers
        .iter()
        .position(|h| h == time_col)
        .ok_or_else(|| Error::MissingColumn(time_col.to_string()))?;

    let var_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != id_idx && *c != time_idx)
        .map(|(c, h)| (c, h.to_string()))
        .collect();
    let var_names: Vec<String> = var_cols.iter().map(|(_, h)| h.clone()).collect();

    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let line = row + 2; // header is line 1
        let record = result?;
        let unit = record
            .get(id_idx)
            .ok_or_else(|| Error::MissingColumn(id_col.to_string()))?
            .to_string();
        let time_raw = record
            .get(time_idx)
            .ok_or_else(|| Error::MissingColumn(time_col.to_string()))?;
        let time: f64 = time_raw.parse().map_err(|_| Error::NonNumericCell {
            column: time_col.to_string(),
            line,
            value: time_raw.to_string(),
        })?;
        let mut values = Vec::with_capacity(var_cols.len());
        for (c, name) in &var_cols {
            let cell = record.get(*c).unwrap_or("");
            if cell.is_empty() {
                values.push(None);
            } else {
                let x: f64 = cell.parse().map_err(|_| Error::NonNumericCell {
                    column: name.clone(),
                    line,
                    value: cell.to_string(),
                })?;
                values.push(Some(x));
            }
        }
        records.push(Record { unit, time, values });
    }
    PanelData::from_records(var_names, records)
}

/// First difference along time: out[i][t] = in[i][t+1] - in[i][t].
pub fn first_difference(series: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t_len = series.ncols();
    if t_len < 2 {
        return Err(Error::TooShort {
            needed: 2,
            have: t_len,
        });
    }
    let n = series.nrows();
    let mut out = DMatrix::zeros(n, t_len - 1);
    for i in 0..n {
        for t in 0..t_len - 1 {
            out[(i, t)] = series[(i, t + 1)] - series[(i, t)];
        }
    }
    Ok(out)
}

/// A lagged series: the first `valid_from` columns carry no data and must
/// never be consumed.
#[derive(Debug, Clone)]
pub struct LaggedSeries {
    pub values: DMatrix<f64>,
    pub valid_from: usize,
}

/// Shift a series back by `k` periods: out[i][t] = in[i][t-k] for t >= k.
pub fn build_lag(series: &DMatrix<f64>, k: usize) -> Result<LaggedSeries> {
    let t_len = series.ncols();
    if k >= t_len {
        return Err(Error::LagTooDeep {
            lag: k,
            periods: t_len,
        });
    }
    let n = series.nrows();
    let mut values = DMatrix::from_element(n, t_len, f64::NAN);
    for i in 0..n {
        for t in k..t_len {
            values[(i, t)] = series[(i, t - k)];
        }
    }
    Ok(LaggedSeries {
        values,
        valid_from: k,
    })
}

/// Panel transformed for first-difference estimation: differenced dependent
/// variable, the regressor design in levels (lagged dependent variable first
/// when the model is dynamic), and the threshold series.
#[derive(Debug, Clone)]
pub struct TransformedPanel {
    pub n: usize,
    pub t_len: usize,
    pub dynamic: bool,
    /// Design regressor names; for dynamic models the first is the dependent
    /// variable lag.
    pub regressor_names: Vec<String>,
    /// Dependent-variable levels, n x T.
    pub y: DMatrix<f64>,
    /// dy[i][t] = y[i][t+1] - y[i][t], n x (T-1).
    pub dy: DMatrix<f64>,
    /// One n x T level matrix per design regressor.
    pub x_levels: Vec<DMatrix<f64>>,
    /// First usable time column per design regressor (1 for the auto lag).
    pub x_valid_from: Vec<usize>,
    /// Threshold-variable levels, n x T.
    pub q: DMatrix<f64>,
}

impl TransformedPanel {
    /// Build the estimation view of a panel. `regressors` are the design
    /// regressors in reporting order, excluding the dependent-variable lag
    /// which is prepended automatically when `dynamic` is set.
    pub fn build(
        data: &PanelData,
        depvar: &str,
        threshold_var: &str,
        regressors: &[String],
        dynamic: bool,
    ) -> Result<Self> {
        let min_t = if dynamic { 3 } else { 2 };
        if data.t_len() < min_t {
            return Err(Error::TooShort {
                needed: min_t,
                have: data.t_len(),
            });
        }
        let mut used: Vec<&str> = vec![depvar, threshold_var];
        used.extend(regressors.iter().map(|s| s.as_str()));
        data.require_complete(used)?;

        let y = data.series(depvar)?.clone();
        let q = data.series(threshold_var)?.clone();
        let dy = first_difference(&y)?;

        let mut regressor_names = Vec::new();
        let mut x_levels = Vec::new();
        let mut x_valid_from = Vec::new();
        if dynamic {
            let lag = build_lag(&y, 1)?;
            regressor_names.push(format!("L.{depvar}"));
            x_levels.push(lag.values);
            x_valid_from.push(lag.valid_from);
        }
        for name in regressors {
            regressor_names.push(name.clone());
            x_levels.push(data.series(name)?.clone());
            x_valid_from.push(0);
        }

        Ok(TransformedPanel {
            n: data.n(),
            t_len: data.t_len(),
            dynamic,
            regressor_names,
            y,
            dy,
            x_levels,
            x_valid_from,
            q,
        })
    }

    pub fn k1(&self) -> usize {
        self.x_levels.len()
    }

    /// Pooled threshold values over all units and time points, ascending.
    pub fn pooled_q_sorted(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.q.iter().copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    /// Pooled threshold values over time points `t0..=T` (1-based), the
    /// periods entering the moment conditions.
    pub fn pooled_q_estimation(&self, t0: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n * (self.t_len - t0 + 1));
        for j in (t0 - 1)..self.t_len {
            for i in 0..self.n {
                v.push(self.q[(i, j)]);
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn loads_smallest_dynamic_panel() {
        let f = write_csv("id,time,y,x\n1,1,1.0,0.5\n1,2,2.0,0.4\n1,3,3.0,0.3\n2,1,0.0,1.5\n2,2,1.0,1.4\n2,3,2.0,1.3\n");
        let p = load_csv(f.path(), "id", "time").unwrap();
        assert_eq!(p.n(), 2);
        assert_eq!(p.t_len(), 3);
        assert_eq!(p.series("y").unwrap()[(1, 2)], 2.0);
    }

    #[test]
    fn rejects_unbalanced_panel() {
        let f = write_csv("id,time,y\nA,1,1\nA,2,2\nA,3,3\nB,1,1\nB,2,2\n");
        match load_csv(f.path(), "id", "time") {
            Err(Error::UnbalancedPanel { unit, time }) => {
                assert_eq!(unit, "B");
                assert_eq!(time, 3.0);
            }
            other => panic!("expected UnbalancedPanel, got {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_observation() {
        let f = write_csv("id,time,y\nA,1,1\nA,1,2\n");
        assert!(matches!(
            load_csv(f.path(), "id", "time"),
            Err(Error::DuplicateObservation { .. })
        ));
    }

    #[test]
    fn rejects_non_numeric_cell() {
        let f = write_csv("id,time,y\nA,1,oops\nA,2,2\n");
        assert!(matches!(
            load_csv(f.path(), "id", "time"),
            Err(Error::NonNumericCell { .. })
        ));
    }

    #[test]
    fn rejects_missing_column() {
        let f = write_csv("id,time,y\nA,1,1\n");
        assert!(matches!(
            load_csv(f.path(), "panel", "time"),
            Err(Error::MissingColumn(_))
        ));
    }

    #[test]
    fn shuffled_rows_load_identically() {
        let sorted = write_csv("id,time,y\n1,1,10\n1,2,11\n2,1,20\n2,2,21\n");
        let shuffled = write_csv("id,time,y\n2,2,21\n1,2,11\n2,1,20\n1,1,10\n");
        let a = load_csv(sorted.path(), "id", "time").unwrap();
        let b = load_csv(shuffled.path(), "id", "time").unwrap();
        assert_eq!(a.unit_ids(), b.unit_ids());
        assert_eq!(a.time_ids(), b.time_ids());
        assert_eq!(a.series("y").unwrap(), b.series("y").unwrap());
    }

    #[test]
    fn numeric_unit_ids_sort_numerically() {
        let f = write_csv("id,time,y\n10,1,1\n2,1,2\n");
        let p = load_csv(f.path(), "id", "time").unwrap();
        assert_eq!(p.unit_ids(), &["2".to_string(), "10".to_string()]);
    }

    #[test]
    fn missing_cell_reported_when_variable_used() {
        let f = write_csv("id,time,y,w\nA,1,1,\nA,2,2,5\n");
        let p = load_csv(f.path(), "id", "time").unwrap();
        assert!(p.require_complete(["y"]).is_ok());
        match p.require_complete(["w"]) {
            Err(Error::MissingValue { var, unit, time }) => {
                assert_eq!(var, "w");
                assert_eq!(unit, "A");
                assert_eq!(time, 1.0);
            }
            other => panic!("expected MissingValue, got {other:?}"),
        }
    }

    #[test]
    fn first_difference_examples() {
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 3.0, 6.0]);
        let d = first_difference(&m).unwrap();
        assert_eq!(d, DMatrix::from_row_slice(1, 2, &[2.0, 3.0]));

        let c = DMatrix::from_element(3, 4, 7.5);
        assert!(first_difference(&c).unwrap().iter().all(|&v| v == 0.0));

        let m2 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 5.0, 5.0]);
        let d2 = first_difference(&m2).unwrap();
        assert_eq!(d2[(0, 0)], 1.0);
        assert_eq!(d2[(1, 0)], 0.0);

        let short = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(matches!(
            first_difference(&short),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn lag_shifts_and_flags() {
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let l1 = build_lag(&m, 1).unwrap();
        assert_eq!(l1.valid_from, 1);
        assert_eq!(l1.values[(0, 1)], 1.0);
        assert_eq!(l1.values[(0, 2)], 2.0);

        let l2 = build_lag(&m, 2).unwrap();
        assert_eq!(l2.valid_from, 2);
        assert_eq!(l2.values[(0, 2)], 1.0);

        // lag 1 applied twice agrees with lag 2 on the valid region
        let twice = build_lag(&l1.values, 1).unwrap();
        for t in 2..3 {
            assert_eq!(twice.values[(0, t)], l2.values[(0, t)]);
        }

        assert!(matches!(build_lag(&m, 3), Err(Error::LagTooDeep { .. })));
    }

    #[test]
    fn difference_round_trip_reconstructs_levels() {
        let m = DMatrix::from_row_slice(2, 4, &[1.0, -2.5, 0.25, 9.0, 4.0, 4.5, 4.25, -1.0]);
        let d = first_difference(&m).unwrap();
        for i in 0..2 {
            let mut level = m[(i, 0)];
            for t in 0..3 {
                level += d[(i, t)];
                assert_relative_eq!(level, m[(i, t + 1)], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn transformed_panel_prepends_lag_for_dynamic() {
        let f = write_csv(
            "id,time,y,x\n1,1,1,0.1\n1,2,2,0.2\n1,3,4,0.3\n2,1,1,0.4\n2,2,3,0.5\n2,3,6,0.6\n",
        );
        let p = load_csv(f.path(), "id", "time").unwrap();
        let tp = TransformedPanel::build(&p, "y", "x", &["x".to_string()], true).unwrap();
        assert_eq!(tp.regressor_names, vec!["L.y".to_string(), "x".to_string()]);
        assert_eq!(tp.x_valid_from, vec![1, 0]);
        // L.y at t=2 (0-based col 1) equals y at t=1
        assert_eq!(tp.x_levels[0][(0, 1)], 1.0);
        assert_eq!(tp.dy[(0, 0)], 1.0);
        assert_eq!(tp.dy[(1, 1)], 3.0);
    }
}
