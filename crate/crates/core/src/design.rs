//! Matched-dataset data model, CSV ingestion and balance diagnostics.
//!
//! A [`MatchedDataset`] owns its units and the partition of those units into
//! matched sets. It is immutable once built; every analysis in this crate
//! borrows it.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;

/// One row of a matched (or not yet matched) study.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub set_id: String,
    /// Treatment (or instrument) indicator.
    pub z: bool,
    pub y: f64,
    /// Treatment dose received, used by instrumental-variable analyses.
    pub d: Option<f64>,
    pub x: Vec<f64>,
    pub e_hat: Option<f64>,
    pub p_hat: Option<f64>,
}

impl UnitRecord {
    pub fn new(set_id: impl Into<String>, z: bool, y: f64, x: Vec<f64>) -> Self {
        Self {
            set_id: set_id.into(),
            z,
            y,
            d: None,
            x,
            e_hat: None,
            p_hat: None,
        }
    }

    pub fn with_dose(mut self, d: f64) -> Self {
        self.d = Some(d);
        self
    }

    pub fn zf(&self) -> f64 {
        if self.z {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchedSet {
    pub id: String,
    /// Indices into [`MatchedDataset::units`], in input order.
    pub units: Vec<usize>,
    pub treated: usize,
}

impl MatchedSet {
    pub fn size(&self) -> usize {
        self.units.len()
    }

    pub fn controls(&self) -> usize {
        self.units.len() - self.treated
    }

    /// `min(m, n - m) == 1`, the only set shape the probability formulas cover.
    pub fn is_supported(&self) -> bool {
        self.size() >= 2 && self.treated >= 1 && self.controls() >= 1 && self.treated.min(self.controls()) == 1
    }
}

#[derive(Debug, Clone)]
pub struct MatchedDataset {
    units: Vec<UnitRecord>,
    sets: Vec<MatchedSet>,
    covariate_names: Vec<String>,
}

impl MatchedDataset {
    /// Groups units by `set_id`. Sets appear in order of first occurrence and
    /// keep the input order of their members.
    pub fn from_units(units: Vec<UnitRecord>, covariate_names: Vec<String>) -> Result<Self> {
        let k = covariate_names.len();
        if let Some((row, u)) = units.iter().enumerate().find(|(_, u)| u.x.len() != k) {
            return Err(Error::InvalidRow {
                row: row + 1,
                message: format!("expected {k} covariates, found {}", u.x.len()),
            });
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut sets: Vec<MatchedSet> = Vec::new();
        for (i, u) in units.iter().enumerate() {
            let slot = *index.entry(u.set_id.as_str()).or_insert_with(|| {
                sets.push(MatchedSet {
                    id: u.set_id.clone(),
                    units: Vec::new(),
                    treated: 0,
                });
                sets.len() - 1
            });
            sets[slot].units.push(i);
            sets[slot].treated += usize::from(u.z);
        }
        if let Some(s) = sets.iter().find(|s| s.size() < 2) {
            return Err(Error::SetTooSmall {
                set: s.id.clone(),
                size: s.size(),
            });
        }
        Ok(Self {
            units,
            sets,
            covariate_names,
        })
    }

    /// Builds a dataset from a partition given as index lists. Units not named
    /// in any set are left out; set ids are `S1`, `S2`, ... in partition order.
    pub fn from_partition(
        units: &[UnitRecord],
        partition: &[Vec<usize>],
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(units.len());
        for (s, members) in partition.iter().enumerate() {
            for &i in members {
                let mut u = units[i].clone();
                u.set_id = format!("S{}", s + 1);
                out.push(u);
            }
        }
        Self::from_units(out, covariate_names)
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn sets(&self) -> &[MatchedSet] {
        &self.sets
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Total number of units, N.
    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    /// Number of matched sets, I.
    pub fn n_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn has_dose(&self) -> bool {
        !self.units.is_empty() && self.units.iter().all(|u| u.d.is_some())
    }

    /// Fails on the first set with `min(m, n - m) != 1`.
    pub fn require_supported(&self) -> Result<()> {
        match self.sets.iter().find(|s| !s.is_supported()) {
            Some(s) => Err(Error::UnsupportedDesign {
                set: s.id.clone(),
                treated: s.treated,
                size: s.size(),
            }),
            None => Ok(()),
        }
    }

    /// Returns a copy with `p_hat` replaced by the given column.
    pub fn with_p_hat(&self, p: &[f64]) -> Self {
        let mut ds = self.clone();
        for (u, &v) in ds.units.iter_mut().zip(p) {
            u.p_hat = Some(v);
        }
        ds
    }

    /// Returns a copy with `e_hat` replaced by the given column.
    pub fn with_e_hat(&self, e: &[f64]) -> Self {
        let mut ds = self.clone();
        for (u, &v) in ds.units.iter_mut().zip(e) {
            u.e_hat = Some(v);
        }
        ds
    }

    /// Column of an optional per-unit field, if every unit carries it.
    pub fn column(&self, field: fn(&UnitRecord) -> Option<f64>) -> Option<Vec<f64>> {
        self.units.iter().map(field).collect()
    }
}

/// Human-readable violations of `min(m, n - m) = 1`; empty when the design is valid.
pub fn validate_design(ds: &MatchedDataset) -> Vec<String> {
    ds.sets()
        .iter()
        .filter(|s| !s.is_supported())
        .map(|s| {
            let m = s.treated;
            let n = s.size();
            if m == 0 {
                format!("set `{}`: no treated units (n = {n})", s.id)
            } else if m == n {
                format!("set `{}`: no control units (n = {n})", s.id)
            } else {
                format!(
                    "set `{}`: min(m, n - m) = {} with m = {m}, n = {n}",
                    s.id,
                    m.min(n - m)
                )
            }
        })
        .collect()
}

/// Set weights `w_i = I n_i / N`.
pub fn set_weights(ds: &MatchedDataset) -> Vec<f64> {
    let i = ds.n_sets() as f64;
    let n = ds.n_units() as f64;
    ds.sets().iter().map(|s| i * s.size() as f64 / n).collect()
}

/// Column names in the input file. Covariates default to every `x<digits>`
/// column in header order.
#[derive(Debug, Clone)]
pub struct ColumnMap {
    pub set_id: String,
    pub z: String,
    pub y: String,
    pub d: String,
    pub e_hat: String,
    pub p_hat: String,
    pub covariates: Option<Vec<String>>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            set_id: "set_id".into(),
            z: "z".into(),
            y: "y".into(),
            d: "d".into(),
            e_hat: "e_hat".into(),
            p_hat: "p_hat".into(),
            covariates: None,
        }
    }
}

fn is_default_covariate(name: &str) -> bool {
    name.len() > 1 && name.starts_with('x') && name[1..].bytes().all(|b| b.is_ascii_digit())
}

/// Reads unit rows from CSV. When `require_set_id` is false the `set_id`
/// column may be absent (unmatched tables); units then get an empty id.
pub fn read_units<R: Read>(
    reader: R,
    map: &ColumnMap,
    require_set_id: bool,
) -> Result<(Vec<UnitRecord>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));

    let set_col = if require_set_id {
        Some(need(&map.set_id)?)
    } else {
        find(&map.set_id)
    };
    let z_col = need(&map.z)?;
    let y_col = need(&map.y)?;
    let d_col = find(&map.d);
    let e_col = find(&map.e_hat);
    let p_col = find(&map.p_hat);
    let cov_names: Vec<String> = match &map.covariates {
        Some(c) => c.clone(),
        None => headers
            .iter()
            .filter(|h| is_default_covariate(h))
            .map(str::to_string)
            .collect(),
    };
    let cov_cols = cov_names
        .iter()
        .map(|c| need(c))
        .collect::<Result<Vec<_>>>()?;

    let mut units = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 1;
        let rec = rec?;
        let field = |col: usize| rec.get(col).unwrap_or("");
        let num = |col: usize, name: &str| -> Result<f64> {
            let raw = field(col);
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::InvalidRow {
                    row,
                    message: format!("column `{name}`: `{raw}` is not a finite number"),
                })
        };
        let opt_num = |col: Option<usize>, name: &str| -> Result<Option<f64>> {
            match col {
                Some(c) if !field(c).is_empty() => num(c, name).map(Some),
                _ => Ok(None),
            }
        };
        let z = match field(z_col) {
            "0" | "0.0" => false,
            "1" | "1.0" => true,
            other => {
                return Err(Error::InvalidRow {
                    row,
                    message: format!("treatment `{}` must be 0 or 1, found `{other}`", map.z),
                })
            }
        };
        let y = num(y_col, &map.y)?;
        let d = opt_num(d_col, &map.d)?;
        let e_hat = opt_num(e_col, &map.e_hat)?;
        let p_hat = opt_num(p_col, &map.p_hat)?;
        for (v, name) in [(e_hat, &map.e_hat), (p_hat, &map.p_hat)] {
            if let Some(v) = v {
                if !(v > 0.0 && v < 1.0) {
                    return Err(Error::InvalidRow {
                        row,
                        message: format!("column `{name}` must lie in (0, 1), found {v}"),
                    });
                }
            }
        }
        let x = cov_cols
            .iter()
            .zip(&cov_names)
            .map(|(&c, n)| num(c, n))
            .collect::<Result<Vec<_>>>()?;
        units.push(UnitRecord {
            set_id: set_col.map(|c| field(c).to_string()).unwrap_or_default(),
            z,
            y,
            d,
            x,
            e_hat,
            p_hat,
        });
    }
    if units.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok((units, cov_names))
}

/// Loads a matched dataset from a CSV file with header
/// `set_id, z, y [, d] [, e_hat] [, p_hat], x1..xK`.
pub fn load_dataset(path: impl AsRef<Path>, map: &ColumnMap) -> Result<MatchedDataset> {
    let file = std::fs::File::open(path)?;
    let (units, names) = read_units(file, map, true)?;
    MatchedDataset::from_units(units, names)
}

/// Writes units in the standard schema. Optional columns are emitted only if
/// every unit has a value.
pub fn write_units<W: Write>(writer: W, units: &[UnitRecord], covariate_names: &[String]) -> Result<()> {
    let has = |f: fn(&UnitRecord) -> Option<f64>| !units.is_empty() && units.iter().all(|u| f(u).is_some());
    let has_d = has(|u| u.d);
    let has_e = has(|u| u.e_hat);
    let has_p = has(|u| u.p_hat);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["set_id".to_string(), "z".into(), "y".into()];
    if has_d {
        header.push("d".into());
    }
    if has_e {
        header.push("e_hat".into());
    }
    if has_p {
        header.push("p_hat".into());
    }
    header.extend(covariate_names.iter().cloned());
    w.write_record(&header)?;
    for u in units {
        let mut row = vec![u.set_id.clone(), u8::from(u.z).to_string(), fmt_f64(u.y)];
        if has_d {
            row.push(fmt_f64(u.d.unwrap_or(f64::NAN)));
        }
        if has_e {
            row.push(fmt_f64(u.e_hat.unwrap_or(f64::NAN)));
        }
        if has_p {
            row.push(fmt_f64(u.p_hat.unwrap_or(f64::NAN)));
        }
        row.extend(u.x.iter().map(|&v| fmt_f64(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Per-covariate standardized mean differences before and after matching.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub covariate_index: usize,
    pub covariate: String,
    pub smd_pre: f64,
    pub smd_post: f64,
    /// Pooled SD was zero, so neither SMD is defined.
    pub degenerate: bool,
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    (mean, pairwise_sum(&ss) / (n - 1.0))
}

/// Standardized mean differences for every covariate.
///
/// The denominator is `sqrt((s_T^2 + s_C^2) / 2)` computed on `pre_matching`
/// when given, otherwise on the dataset's own units; it is shared by the pre
/// and post columns. Post-matching means average within-set arm means with
/// weights `n_i / N` (sets lacking an arm are skipped and the weights
/// renormalised).
pub fn balance_table(ds: &MatchedDataset, pre_matching: Option<&[UnitRecord]>) -> Result<Vec<BalanceRow>> {
    let k = ds.n_covariates();
    if k == 0 {
        return Err(Error::Domain("balance table needs at least one covariate".into()));
    }
    let pre = pre_matching.unwrap_or(ds.units());
    if let Some(u) = pre.iter().find(|u| u.x.len() != k) {
        return Err(Error::Domain(format!(
            "pre-matching table has {} covariates, matched data has {k}",
            u.x.len()
        )));
    }
    let mut rows = Vec::with_capacity(k);
    for c in 0..k {
        let treated: Vec<f64> = pre.iter().filter(|u| u.z).map(|u| u.x[c]).collect();
        let control: Vec<f64> = pre.iter().filter(|u| !u.z).map(|u| u.x[c]).collect();
        let (mt, vt) = mean_var(&treated);
        let (mc, vc) = mean_var(&control);
        let sd = ((vt + vc) / 2.0).sqrt();

        let mut wt = 0.0;
        let mut post_t = 0.0;
        let mut post_c = 0.0;
        for s in ds.sets() {
            if s.treated == 0 || s.controls() == 0 {
                continue;
            }
            let w = s.size() as f64;
            let (mut st, mut sc) = (0.0, 0.0);
            for &j in &s.units {
                let u = &ds.units()[j];
                if u.z {
                    st += u.x[c];
                } else {
                    sc += u.x[c];
                }
            }
            post_t += w * st / s.treated as f64;
            post_c += w * sc / s.controls() as f64;
            wt += w;
        }
        let degenerate = !(sd > 0.0 && sd.is_finite()) || wt == 0.0;
        let (smd_pre, smd_post) = if degenerate {
            (f64::NAN, f64::NAN)
        } else {
            ((mt - mc) / sd, (post_t / wt - post_c / wt) / sd)
        };
        rows.push(BalanceRow {
            covariate_index: c,
            covariate: ds.covariate_names()[c].clone(),
            smd_pre,
            smd_post,
            degenerate,
        });
    }
    Ok(rows)
}

/// Writes a balance table with columns `covariate, smd_pre, smd_post, degenerate`.
pub fn write_balance<W: Write>(writer: W, rows: &[BalanceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["covariate", "smd_pre", "smd_post", "degenerate"])?;
    for r in rows {
        w.write_record([
            r.covariate.clone(),
            fmt_f64(r.smd_pre),
            fmt_f64(r.smd_post),
            r.degenerate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(csv: &str) -> Result<MatchedDataset> {
        let (units, names) = read_units(csv.as_bytes(), &ColumnMap::default(), true)?;
        MatchedDataset::from_units(units, names)
    }

    #[test]
    fn groups_four_rows_into_two_sets() {
        let ds = parse("set_id,z,y,x1\na,1,1.0,0.1\nb,0,2.0,0.2\na,0,0.5,0.3\nb,1,3.0,0.4\n").unwrap();
        assert_eq!(ds.n_sets(), 2);
        assert_eq!(ds.n_units(), 4);
        assert_eq!(ds.sets()[0].units, vec![0, 2]);
        assert_eq!(ds.sets()[1].units, vec![1, 3]);
        assert!(validate_design(&ds).is_empty());
    }

    #[test]
    fn non_binary_treatment_names_the_row() {
        let err = parse("set_id,z,y\na,1,1\na,0,1\nb,2,1\nb,0,1\n").unwrap_err();
        match err {
            Error::InvalidRow { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn singleton_set_rejected() {
        let err = parse("set_id,z,y\na,1,1\na,0,1\nb,1,1\n").unwrap_err();
        assert!(err.to_string().contains("set `b` below minimum size"));
    }

    #[test]
    fn missing_column_and_empty_file() {
        assert!(matches!(parse("set_id,z\na,1\n"), Err(Error::MissingColumn(c)) if c == "y"));
        assert!(matches!(parse("set_id,z,y\n"), Err(Error::EmptyInput)));
        assert!(matches!(
            parse("set_id,z,y,x1\na,1,1,abc\na,0,1,2\n"),
            Err(Error::InvalidRow { row: 1, .. })
        ));
    }

    #[test]
    fn design_violations() {
        let ds = parse("set_id,z,y\na,1,0\na,1,0\na,0,0\na,0,0\na,0,0\nb,0,0\nb,0,0\nc,1,0\nc,0,0\n").unwrap();
        let v = validate_design(&ds);
        assert_eq!(v.len(), 2);
        assert!(v[0].contains("min(m, n - m) = 2"));
        assert!(v[1].contains("no treated"));
        assert!(ds.require_supported().is_err());
    }

    #[test]
    fn weights() {
        let ds = parse("set_id,z,y\na,1,0\na,0,0\nb,1,0\nb,0,0\nb,0,0\nb,0,0\n").unwrap();
        let w = set_weights(&ds);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 4.0 / 3.0).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);

        let single = parse("set_id,z,y\na,1,0\na,0,0\na,0,0\n").unwrap();
        assert_eq!(set_weights(&single), vec![1.0]);
    }

    #[test]
    fn smd_identical_arms_is_zero() {
        let ds = parse("set_id,z,y,x1,x2\na,1,0,1,5\na,0,0,1,5\nb,1,0,3,2\nb,0,0,3,2\n").unwrap();
        for r in balance_table(&ds, None).unwrap() {
            assert_eq!(r.smd_pre, 0.0);
            assert_eq!(r.smd_post, 0.0);
            assert!(!r.degenerate);
        }
    }

    #[test]
    fn smd_unit_difference() {
        // treated x = {1 - 1/sqrt2, 1 + 1/sqrt2}: mean 1, variance 1; controls
        // likewise around 0. Pooled SD is 1 so the SMD is exactly the mean gap.
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let csv = format!(
            "set_id,z,y,x1\na,1,0,{}\na,0,0,{}\nb,1,0,{}\nb,0,0,{}\n",
            1.0 - h,
            -h,
            1.0 + h,
            h
        );
        let ds = parse(&csv).unwrap();
        let r = &balance_table(&ds, None).unwrap()[0];
        assert!((r.smd_pre - 1.0).abs() < 1e-12);
        assert!((r.smd_post - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_sd_is_flagged() {
        let ds = parse("set_id,z,y,x1\na,1,0,2\na,0,0,2\n").unwrap();
        let r = &balance_table(&ds, None).unwrap()[0];
        assert!(r.degenerate);
    }

    #[test]
    fn write_then_read_keeps_memberships() {
        let ds = parse("set_id,z,y,d,x1\na,1,1.5,1,0.25\nb,0,2,0,1e-3\na,0,0.5,0,3\nb,1,3,1,-4\nb,0,1,1,2\n").unwrap();
        let mut buf = Vec::new();
        write_units(&mut buf, ds.units(), ds.covariate_names()).unwrap();
        let (units, names) = read_units(buf.as_slice(), &ColumnMap::default(), true).unwrap();
        let back = MatchedDataset::from_units(units, names).unwrap();
        assert_eq!(back.sets(), ds.sets());
        assert_eq!(back.units(), ds.units());
    }
}
