//! Long-format CSV input and output for grouped linear mixed model data.
//!
//! Columns are selected by a formula `y ~ 1 + x | re(1) + re(x)`: the
//! response, the fixed-effect terms and the random-effect terms. Each random
//! term gets its own scale parameter unless it carries a label, as in
//! `re(1):a + re(x):a`; terms sharing a label share one scale.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::lmm::{LmmData, LmmGroup};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Intercept,
    Column(String),
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => f.write_str("1"),
            Term::Column(c) => f.write_str(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomTerm {
    pub term: Term,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Formula {
    pub response: String,
    pub fixed: Vec<Term>,
    pub random: Vec<RandomTerm>,
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_' || c == '.')
}

fn parse_term(s: &str) -> Result<Term> {
    match s {
        "1" => Ok(Term::Intercept),
        _ if is_identifier(s) => Ok(Term::Column(s.to_string())),
        _ => Err(Error::Formula(format!("invalid term `{s}`"))),
    }
}

fn split_terms(s: &str) -> Vec<&str> {
    s.split('+').map(str::trim).collect()
}

impl Formula {
    pub fn parse(src: &str) -> Result<Self> {
        let (lhs, rhs) = src
            .split_once('~')
            .ok_or_else(|| Error::Formula("expected `response ~ fixed | random`".into()))?;
        let response = lhs.trim();
        if !is_identifier(response) {
            return Err(Error::Formula(format!("invalid response `{response}`")));
        }
        let (fixed_src, random_src) = rhs
            .split_once('|')
            .ok_or_else(|| Error::Formula("missing `|` before the random-effect terms".into()))?;
        let fixed = split_terms(fixed_src).into_iter().map(parse_term).collect::<Result<Vec<_>>>()?;
        let mut random = Vec::new();
        for t in split_terms(random_src) {
            let (body, label) = match t.rsplit_once(':') {
                Some((b, l)) => {
                    let l = l.trim();
                    if !is_identifier(l) {
                        return Err(Error::Formula(format!("invalid scale label `{l}`")));
                    }
                    (b.trim(), Some(l.to_string()))
                }
                None => (t, None),
            };
            let inner = body
                .strip_prefix("re(")
                .and_then(|b| b.strip_suffix(')'))
                .ok_or_else(|| Error::Formula(format!("random terms are written `re(term)`, got `{t}`")))?;
            random.push(RandomTerm {
                term: parse_term(inner.trim())?,
                label,
            });
        }
        for (name, list) in [("fixed", fixed.clone()), ("random", random.iter().map(|r| r.term.clone()).collect())] {
            for (i, a) in list.iter().enumerate() {
                if list[..i].contains(a) {
                    return Err(Error::Formula(format!("duplicate {name} term `{a}`")));
                }
            }
        }
        Ok(Self {
            response: response.to_string(),
            fixed,
            random,
        })
    }

    /// Scale index of each random term, numbered by first appearance.
    pub fn scale_map(&self) -> Vec<usize> {
        let mut next = 0;
        let mut out = Vec::with_capacity(self.random.len());
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for r in &self.random {
            match &r.label {
                Some(l) => {
                    let idx = *seen.entry(l.as_str()).or_insert_with(|| {
                        next += 1;
                        next - 1
                    });
                    out.push(idx);
                }
                None => {
                    out.push(next);
                    next += 1;
                }
            }
        }
        out
    }

    /// One name per scale parameter: its label, or the term it scales.
    pub fn scale_names(&self) -> Vec<String> {
        let map = self.scale_map();
        let n = map.iter().max().map_or(0, |m| m + 1);
        let mut names = vec![String::new(); n];
        for (r, &j) in self.random.iter().zip(&map) {
            if names[j].is_empty() {
                names[j] = r.label.clone().unwrap_or_else(|| r.term.to_string());
            }
        }
        names
    }

    pub fn fixed_names(&self) -> Vec<String> {
        self.fixed.iter().map(|t| t.to_string()).collect()
    }

    /// Predictor columns used by either part, in order of first appearance.
    pub fn predictor_columns(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in self.fixed.iter().chain(self.random.iter().map(|r| &r.term)) {
            if let Term::Column(c) = t {
                if !out.contains(c) {
                    out.push(c.clone());
                }
            }
        }
        out
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fixed: Vec<String> = self.fixed_names();
        let random: Vec<String> = self
            .random
            .iter()
            .map(|r| match &r.label {
                Some(l) => format!("re({}):{l}", r.term),
                None => format!("re({})", r.term),
            })
            .collect();
        write!(f, "{} ~ {} | {}", self.response, fixed.join(" + "), random.join(" + "))
    }
}

/// Parsed data with the group identifiers in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub data: LmmData,
    pub group_ids: Vec<String>,
    pub formula: Formula,
    pub group_column: String,
}

fn design_row(terms: &[&Term], values: &HashMap<&str, f64>) -> Vec<f64> {
    terms
        .iter()
        .map(|t| match t {
            Term::Intercept => 1.0,
            Term::Column(c) => values[c.as_str()],
        })
        .collect()
}

pub fn parse_long_csv_reader<R: Read>(reader: R, formula: &Formula, group_column: &str) -> Result<GroupedDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let group_idx = find(group_column)?;
    let mut numeric: Vec<(String, usize)> = vec![(formula.response.clone(), find(&formula.response)?)];
    for c in formula.predictor_columns() {
        let i = find(&c)?;
        numeric.push((c, i));
    }
    let fixed: Vec<&Term> = formula.fixed.iter().collect();
    let random: Vec<&Term> = formula.random.iter().map(|r| &r.term).collect();

    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let id = rec.get(group_idx).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::EmptyGroup(format!("<empty identifier at row {row}>")));
        }
        let mut values: HashMap<&str, f64> = HashMap::new();
        for (name, i) in &numeric {
            let cell = rec.get(*i).unwrap_or("");
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::NonNumericCell {
                row,
                column: name.clone(),
                value: cell.to_string(),
            })?;
            values.insert(name.as_str(), v);
        }
        let g = *index.entry(id.clone()).or_insert_with(|| {
            ids.push(id);
            rows.push((Vec::new(), Vec::new(), Vec::new()));
            ids.len() - 1
        });
        let (y, x, z) = &mut rows[g];
        y.push(values[formula.response.as_str()]);
        x.extend(design_row(&fixed, &values));
        z.extend(design_row(&random, &values));
    }
    if ids.is_empty() {
        return Err(Error::EmptyGroup("<no rows>".into()));
    }
    let groups = rows
        .into_iter()
        .map(|(y, x, z)| {
            let m = y.len();
            LmmGroup::new(
                DVector::from_vec(y),
                DMatrix::from_row_slice(m, fixed.len(), &x),
                DMatrix::from_row_slice(m, random.len(), &z),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupedDataset {
        data: LmmData::new(groups, formula.scale_map())?,
        group_ids: ids,
        formula: formula.clone(),
        group_column: group_column.to_string(),
    })
}

pub fn parse_long_csv(path: impl AsRef<Path>, formula: &Formula, group_column: &str) -> Result<GroupedDataset> {
    let f = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_long_csv_reader(std::io::BufReader::new(f), formula, group_column)
}

/// Numbers are written with 17 significant digits, which round-trips `f64`.
pub fn format_number(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write the dataset back in long format: group, response, then every
/// predictor column.
pub fn write_long_csv_writer<W: Write>(ds: &GroupedDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let f = &ds.formula;
    let cols = f.predictor_columns();
    let mut header = vec![ds.group_column.clone(), f.response.clone()];
    header.extend(cols.iter().cloned());
    w.write_record(&header)?;
    let locate = |c: &str| -> (bool, usize) {
        let t = Term::Column(c.to_string());
        match f.fixed.iter().position(|x| *x == t) {
            Some(i) => (true, i),
            None => (false, f.random.iter().position(|r| r.term == t).expect("predictor column in formula")),
        }
    };
    let places: Vec<(bool, usize)> = cols.iter().map(|c| locate(c)).collect();
    for (g, id) in ds.data.groups().iter().zip(&ds.group_ids) {
        for i in 0..g.len() {
            let mut rec = vec![id.clone(), format_number(g.y()[i])];
            for &(fixed, k) in &places {
                let v = if fixed { g.x()[(i, k)] } else { g.z()[(i, k)] };
                rec.push(format_number(v));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_long_csv(ds: &GroupedDataset, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    write_long_csv_writer(ds, std::io::BufWriter::new(f))
}
