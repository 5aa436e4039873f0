//! Observational data: column roles, validation and CSV ingestion.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of reals, one row per observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMatrix {
    data: Vec<f64>,
    nrows: usize,
    ncols: usize,
}

impl RowMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            data: vec![0.0; nrows * ncols],
            nrows,
            ncols,
        }
    }

    pub fn from_row_major(nrows: usize, ncols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nrows * ncols {
            return Err(Error::Dimension(format!(
                "expected {} entries for a {nrows}x{ncols} matrix, got {}",
                nrows * ncols,
                data.len()
            )));
        }
        Ok(Self { data, nrows, ncols })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != ncols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {ncols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            data,
            nrows: rows.len(),
            ncols,
        })
    }

    /// Builds a matrix from column vectors of equal length.
    pub fn from_columns(cols: &[Vec<f64>], nrows: usize) -> Result<Self> {
        let ncols = cols.len();
        let mut out = Self::zeros(nrows, ncols);
        for (j, c) in cols.iter().enumerate() {
            if c.len() != nrows {
                return Err(Error::Dimension(format!(
                    "column {j} has length {}, expected {nrows}",
                    c.len()
                )));
            }
            for (i, v) in c.iter().enumerate() {
                out.data[i * ncols + j] = *v;
            }
        }
        Ok(out)
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.ncols + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.nrows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.ncols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            data,
            nrows: idx.len(),
            ncols: self.ncols,
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            nrows: self.nrows,
            ncols: self.ncols,
        }
    }
}

/// How the covariate block of a dataset relates to the raw covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CovariateForm {
    #[default]
    Raw,
    /// `x -> sqrt(|x|) + 3`, applied coordinate-wise.
    Misspecified,
}

/// The coordinate-wise transform used to misspecify bridge models.
#[inline]
pub fn misspecify_coordinate(x: f64) -> f64 {
    x.abs().sqrt() + 3.0
}

/// Borrowed view of a single observation.
#[derive(Debug, Clone, Copy)]
pub struct Obs<'a> {
    pub y: f64,
    pub a: f64,
    pub m: f64,
    pub x: &'a [f64],
    pub w: &'a [f64],
    pub z: &'a [f64],
}

/// Validated observational sample `(Y, A, M, X, W, Z)`.
///
/// Immutable after construction. The exposure is stored as reals that are
/// exactly `0.0` or `1.0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    y: Vec<f64>,
    a: Vec<f64>,
    m: Vec<f64>,
    x: RowMatrix,
    w: RowMatrix,
    z: RowMatrix,
    covariate_form: CovariateForm,
    dropped_rows: usize,
}

impl Dataset {
    pub fn new(
        y: Vec<f64>,
        a: Vec<f64>,
        m: Vec<f64>,
        x: RowMatrix,
        w: RowMatrix,
        z: RowMatrix,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::EmptyData("dataset has no rows".into()));
        }
        for (name, len) in [
            ("a", a.len()),
            ("m", m.len()),
            ("x", x.nrows()),
            ("w", w.nrows()),
            ("z", z.nrows()),
        ] {
            if len != n {
                return Err(Error::Dimension(format!(
                    "column block {name} has {len} rows, outcome has {n}"
                )));
            }
        }
        if w.ncols() == 0 || z.ncols() == 0 {
            return Err(Error::Schema(
                "at least one w_proxy and one z_proxy column are required".into(),
            ));
        }
        if let Some(bad) = a.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain(format!(
                "exposure must be 0 or 1, found {bad}"
            )));
        }
        let finite = y
            .iter()
            .chain(&m)
            .chain(x.as_slice())
            .chain(w.as_slice())
            .chain(z.as_slice())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain("non-finite value in dataset".into()));
        }
        Ok(Self {
            y,
            a,
            m,
            x,
            w,
            z,
            covariate_form: CovariateForm::Raw,
            dropped_rows: 0,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn y(&self) -> &[f64] {
        &self.y
    }
    pub fn a(&self) -> &[f64] {
        &self.a
    }
    pub fn m(&self) -> &[f64] {
        &self.m
    }
    pub fn x(&self) -> &RowMatrix {
        &self.x
    }
    pub fn w(&self) -> &RowMatrix {
        &self.w
    }
    pub fn z(&self) -> &RowMatrix {
        &self.z
    }
    pub fn p_x(&self) -> usize {
        self.x.ncols()
    }
    pub fn p_w(&self) -> usize {
        self.w.ncols()
    }
    pub fn p_z(&self) -> usize {
        self.z.ncols()
    }
    pub fn covariate_form(&self) -> CovariateForm {
        self.covariate_form
    }
    pub fn dropped_rows(&self) -> usize {
        self.dropped_rows
    }

    /// Number of exposed units.
    pub fn n_exposed(&self) -> usize {
        self.a.iter().filter(|&&v| v == 1.0).count()
    }

    /// True when both exposure arms are present.
    pub fn has_both_arms(&self) -> bool {
        let k = self.n_exposed();
        k > 0 && k < self.n()
    }

    #[inline]
    pub fn obs(&self, i: usize) -> Obs<'_> {
        Obs {
            y: self.y[i],
            a: self.a[i],
            m: self.m[i],
            x: self.x.row(i),
            w: self.w.row(i),
            z: self.z.row(i),
        }
    }

    /// Rows `idx` in the given order (repeats allowed).
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            m: idx.iter().map(|&i| self.m[i]).collect(),
            x: self.x.select_rows(idx),
            w: self.w.select_rows(idx),
            z: self.z.select_rows(idx),
            covariate_form: self.covariate_form,
            dropped_rows: 0,
        }
    }

    /// Copy with the covariates replaced by `sqrt(|x|) + 3`.
    ///
    /// Refuses to transform a dataset that has already been transformed.
    pub fn misspecify_x(&self) -> Result<Self> {
        if self.covariate_form == CovariateForm::Misspecified {
            return Err(Error::Precondition(
                "covariates are already misspecified".into(),
            ));
        }
        if self.p_x() != 2 {
            return Err(Error::Dimension(format!(
                "misspecification expects p_x = 2, dataset has {}",
                self.p_x()
            )));
        }
        let mut out = self.clone();
        out.x = self.x.map(misspecify_coordinate);
        out.covariate_form = CovariateForm::Misspecified;
        Ok(out)
    }

    /// Copy with each covariate column centred and scaled to unit variance.
    /// Constant columns are only centred.
    pub fn standardize_x(&self) -> Self {
        let n = self.n() as f64;
        let p = self.p_x();
        let mut out = self.clone();
        for j in 0..p {
            let col = self.x.column(j);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for (i, v) in col.iter().enumerate() {
                out.x.data[i * p + j] = (v - mean) / sd;
            }
        }
        out
    }

    /// Same data with `y` shifted by a constant.
    pub fn shift_y(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.y.iter_mut().for_each(|v| *v += c);
        out
    }

    /// Writes the dataset with generic headers `y,a,m,x1..,w1..,z1..`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(self.header())?;
        for i in 0..self.n() {
            let o = self.obs(i);
            let mut rec: Vec<String> = vec![fmt_real(o.y), fmt_real(o.a), fmt_real(o.m)];
            rec.extend(o.x.iter().chain(o.w).chain(o.z).map(|v| fmt_real(*v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Column names produced by [`Dataset::write_csv`].
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["y".to_string(), "a".to_string(), "m".to_string()];
        h.extend((1..=self.p_x()).map(|j| format!("x{j}")));
        h.extend((1..=self.p_w()).map(|j| format!("w{j}")));
        h.extend((1..=self.p_z()).map(|j| format!("z{j}")));
        h
    }

    /// Roles matching [`Dataset::header`].
    pub fn default_roles(&self) -> ColumnRoles {
        let mut roles = ColumnRoles::default();
        for name in self.header() {
            let role = match name.chars().next() {
                Some('y') => Role::Outcome,
                Some('a') => Role::Exposure,
                Some('m') => Role::Mediator,
                Some('x') => Role::Covariate,
                Some('w') => Role::WProxy,
                _ => Role::ZProxy,
            };
            roles.insert(name, role);
        }
        roles
    }
}

/// Shortest decimal text that parses back to the same `f64`.
fn fmt_real(v: f64) -> String {
    format!("{v:?}")
}

/// Arithmetic mean of the outcome.
pub fn empirical_mean_y(d: &Dataset) -> f64 {
    d.y().iter().sum::<f64>() / d.n() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Outcome,
    Exposure,
    Mediator,
    Covariate,
    WProxy,
    ZProxy,
    Ignore,
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "outcome" | "y" => Role::Outcome,
            "exposure" | "a" => Role::Exposure,
            "mediator" | "m" => Role::Mediator,
            "covariate" | "x" => Role::Covariate,
            "w_proxy" | "w" => Role::WProxy,
            "z_proxy" | "z" => Role::ZProxy,
            "ignore" => Role::Ignore,
            other => return Err(Error::Schema(format!("unknown role '{other}'"))),
        })
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Outcome => "outcome",
            Role::Exposure => "exposure",
            Role::Mediator => "mediator",
            Role::Covariate => "covariate",
            Role::WProxy => "w_proxy",
            Role::ZProxy => "z_proxy",
            Role::Ignore => "ignore",
        };
        f.write_str(s)
    }
}

/// Assignment of CSV column names to data roles.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    map: BTreeMap<String, Role>,
}

impl ColumnRoles {
    pub fn insert(&mut self, column: impl Into<String>, role: Role) {
        self.map.insert(column.into(), role);
    }

    pub fn role_of(&self, column: &str) -> Option<Role> {
        self.map.get(column).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Role)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Parses `column=role` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut roles = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Schema(format!("roles line {}: expected column=role", lineno + 1))
            })?;
            let key = k.trim();
            if roles.map.contains_key(key) {
                return Err(Error::Schema(format!("column '{key}' assigned twice")));
            }
            roles.insert(key, v.parse()?);
        }
        Ok(roles)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.map
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Checks the role counts: one outcome, exposure and mediator, at least
    /// one proxy of each kind.
    pub fn validate(&self) -> Result<()> {
        let count = |r: Role| self.map.values().filter(|&&v| v == r).count();
        for (role, label) in [
            (Role::Outcome, "outcome"),
            (Role::Exposure, "exposure"),
            (Role::Mediator, "mediator"),
        ] {
            match count(role) {
                1 => {}
                0 => return Err(Error::Schema(format!("missing {label} role"))),
                k => return Err(Error::Schema(format!("{k} columns mapped to {label}"))),
            }
        }
        if count(Role::WProxy) == 0 {
            return Err(Error::Schema("missing w_proxy role".into()));
        }
        if count(Role::ZProxy) == 0 {
            return Err(Error::Schema("missing z_proxy role".into()));
        }
        Ok(())
    }
}

/// Reads a CSV file with a header row and maps its columns by `roles`.
///
/// Rows with an empty cell in any role-mapped column are dropped and counted
/// in [`Dataset::dropped_rows`]. Columns absent from `roles` are ignored.
pub fn load_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Dataset> {
    roles.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();

    for (col, role) in roles.iter() {
        if role != Role::Ignore && !header.iter().any(|h| h == col) {
            return Err(Error::Schema(format!(
                "column '{col}' ({role}) not found in header"
            )));
        }
    }
    let col_roles: Vec<Role> = header
        .iter()
        .map(|h| roles.role_of(h).unwrap_or(Role::Ignore))
        .collect();

    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut m = Vec::new();
    let (mut xs, mut ws, mut zs) = (Vec::new(), Vec::new(), Vec::new());
    let mut dropped = 0;

    for (rowno, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut missing = false;
        let mut vals = Vec::with_capacity(rec.len());
        for (j, cell) in rec.iter().enumerate() {
            let role = col_roles.get(j).copied().unwrap_or(Role::Ignore);
            if role == Role::Ignore {
                vals.push(f64::NAN);
                continue;
            }
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                missing = true;
                break;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Domain(format!(
                    "row {}: column '{}' holds non-numeric value '{cell}'",
                    rowno + 1,
                    header[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Domain(format!(
                    "row {}: column '{}' is not finite",
                    rowno + 1,
                    header[j]
                )));
            }
            vals.push(v);
        }
        if missing {
            dropped += 1;
            continue;
        }
        let (mut xr, mut wr, mut zr) = (Vec::new(), Vec::new(), Vec::new());
        for (j, role) in col_roles.iter().enumerate() {
            let v = vals.get(j).copied().unwrap_or(f64::NAN);
            match role {
                Role::Outcome => y.push(v),
                Role::Exposure => {
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::Domain(format!(
                            "row {}: exposure '{}' must be 0 or 1, found {v}",
                            rowno + 1,
                            header[j]
                        )));
                    }
                    a.push(v)
                }
                Role::Mediator => m.push(v),
                Role::Covariate => xr.push(v),
                Role::WProxy => wr.push(v),
                Role::ZProxy => zr.push(v),
                Role::Ignore => {}
            }
        }
        xs.push(xr);
        ws.push(wr);
        zs.push(zr);
    }

    if y.is_empty() {
        return Err(Error::EmptyData(format!(
            "no complete rows remain ({dropped} dropped)"
        )));
    }
    let p_x = col_roles.iter().filter(|r| **r == Role::Covariate).count();
    let x = if p_x == 0 {
        RowMatrix::zeros(y.len(), 0)
    } else {
        RowMatrix::from_rows(&xs)?
    };
    let mut d = Dataset::new(y, a, m, x, RowMatrix::from_rows(&ws)?, RowMatrix::from_rows(&zs)?)?;
    d.dropped_rows = dropped;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn roles() -> ColumnRoles {
        ColumnRoles::parse("Y=outcome\nA=exposure\nM=mediator\nX1=covariate\nX2=covariate\nW=w_proxy\nZ=z_proxy\n")
            .unwrap()
    }

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    const SIX_ROWS: &str = "Y,A,M,X1,X2,W,Z\n\
        1.0,0,0.5,0.1,0.2,1.1,-0.3\n\
        2.0,1,0.4,0.3,0.1,0.2,0.3\n\
        0.5,0,-0.2,0.0,0.5,0.7,1.2\n\
        3.1,1,1.5,0.9,0.4,-0.2,0.0\n\
        -1.0,0,0.0,0.2,0.2,0.3,0.4\n\
        2.2,1,0.9,0.6,0.8,1.0,-1.0\n";

    #[test]
    fn loads_six_rows() {
        let f = write(SIX_ROWS);
        let d = load_csv(f.path(), &roles()).unwrap();
        assert_eq!(d.n(), 6);
        assert_eq!((d.p_x(), d.p_w(), d.p_z()), (2, 1, 1));
        assert_eq!(d.dropped_rows(), 0);
        assert_eq!(d.x().row(1), &[0.3, 0.1]);
    }

    #[test]
    fn exposure_out_of_domain() {
        let f = write("Y,A,M,X1,X2,W,Z\n1,2,0,0,0,0,0\n1,0,0,0,0,0,0\n");
        assert!(matches!(load_csv(f.path(), &roles()), Err(Error::Domain(_))));
    }

    #[test]
    fn drops_incomplete_rows() {
        let text = SIX_ROWS.replacen("0.4,0.3,0.1", ",0.3,0.1", 1);
        let f = write(&text);
        let d = load_csv(f.path(), &roles()).unwrap();
        assert_eq!(d.n(), 5);
        assert_eq!(d.dropped_rows(), 1);
    }

    #[test]
    fn missing_role_column_is_schema_error() {
        let f = write("Y,A,M,X1,X2,W\n1,0,0,0,0,0\n");
        assert!(matches!(load_csv(f.path(), &roles()), Err(Error::Schema(_))));
    }

    #[test]
    fn roles_require_z_proxy() {
        let r = ColumnRoles::parse("Y=outcome\nA=exposure\nM=mediator\nW=w_proxy\n").unwrap();
        let err = r.validate().unwrap_err();
        assert!(err.to_string().contains("z_proxy"));
    }

    #[test]
    fn all_rows_dropped_is_empty_error() {
        let f = write("Y,A,M,X1,X2,W,Z\n,0,0,0,0,0,0\n");
        assert!(matches!(load_csv(f.path(), &roles()), Err(Error::EmptyData(_))));
    }

    #[test]
    fn mean_y() {
        let d = Dataset::new(
            vec![1.0, 2.0, 3.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0; 3],
            RowMatrix::zeros(3, 0),
            RowMatrix::zeros(3, 1),
            RowMatrix::zeros(3, 1),
        )
        .unwrap();
        assert_eq!(empirical_mean_y(&d), 2.0);
        let c = d.shift_y(-2.0).shift_y(7.25);
        assert_eq!(empirical_mean_y(&c), 7.25);
    }

    #[test]
    fn misspecify_twice_refused() {
        let x = RowMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 4.0]]).unwrap();
        let d = Dataset::new(
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
            x,
            RowMatrix::zeros(2, 1),
            RowMatrix::zeros(2, 1),
        )
        .unwrap();
        let s = d.misspecify_x().unwrap();
        assert_eq!(s.x().row(0), &[3.0, 3.0]);
        assert_eq!(s.x().row(1), &[4.0, 5.0]);
        assert!(s.misspecify_x().is_err());
        // applying the map twice by hand differs from once
        assert_ne!(misspecify_coordinate(misspecify_coordinate(0.0)), 3.0);
    }
}
