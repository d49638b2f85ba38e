//! MPS reader and writer.
//!
//! Lines are split on whitespace, which covers free format and fixed-format
//! files whose names contain no blanks. Integer columns without any BOUNDS
//! entry get the classic default domain [0, 1].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::model::{Instance, InstanceBuilder, ModelError};

#[derive(Debug, Error)]
pub enum MpsError {
    #[error("line {line}: malformed section: {message}")]
    MalformedSection { line: usize, message: String },
    #[error("line {line}: unknown row `{row}`")]
    UnknownRowReference { line: usize, row: String },
    #[error("line {line}: unknown column `{column}`")]
    UnknownColumnReference { line: usize, column: String },
    #[error("line {line}: field `{field}` is not a number")]
    NonNumericField { line: usize, field: String },
    #[error("invalid model: {0}")]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ParseDiagnostics {
    pub source: String,
    pub warnings: Vec<(usize, String)>,
    /// The file asked for maximisation; the instance holds the negated
    /// objective.
    pub maximize: bool,
}

impl ParseDiagnostics {
    fn warn(&mut self, line: usize, message: impl Into<String>) {
        let message = message.into();
        debug_assert!(!message.is_empty());
        self.warnings.push((line, message));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Section {
    Start,
    Name,
    ObjSense,
    Rows,
    Columns,
    Rhs,
    Ranges,
    Bounds,
    End,
}

impl Section {
    fn parse(word: &str) -> Option<Section> {
        Some(match word {
            "NAME" => Section::Name,
            "OBJSENSE" => Section::ObjSense,
            "ROWS" => Section::Rows,
            "COLUMNS" => Section::Columns,
            "RHS" => Section::Rhs,
            "RANGES" => Section::Ranges,
            "BOUNDS" => Section::Bounds,
            "ENDATA" => Section::End,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sense {
    Eq,
    Le,
    Ge,
}

struct RowSpec {
    name: String,
    sense: Sense,
    coefs: Vec<(usize, f64)>,
    rhs: f64,
    range: Option<f64>,
}

struct ColSpec {
    name: String,
    cost: f64,
    integer: bool,
    lower: f64,
    upper: f64,
    lower_set: bool,
    bounded: bool,
}

enum RowRef {
    Objective,
    Ignored,
    Row(usize),
}

#[derive(Default)]
struct Reader {
    name: String,
    objective_row: Option<String>,
    ignored_rows: Vec<String>,
    rows: Vec<RowSpec>,
    row_index: HashMap<String, usize>,
    cols: Vec<ColSpec>,
    col_index: HashMap<String, usize>,
    in_integer_block: bool,
    diag: ParseDiagnostics,
}

fn number(field: &str, line: usize) -> Result<f64, MpsError> {
    match field.parse::<f64>() {
        Ok(v) if !v.is_nan() => Ok(v),
        _ => Err(MpsError::NonNumericField {
            line,
            field: field.to_string(),
        }),
    }
}

fn malformed(line: usize, message: impl Into<String>) -> MpsError {
    MpsError::MalformedSection {
        line,
        message: message.into(),
    }
}

impl Reader {
    fn row_ref(&self, name: &str, line: usize) -> Result<RowRef, MpsError> {
        if self.objective_row.as_deref() == Some(name) {
            Ok(RowRef::Objective)
        } else if let Some(&i) = self.row_index.get(name) {
            Ok(RowRef::Row(i))
        } else if self.ignored_rows.iter().any(|r| r == name) {
            Ok(RowRef::Ignored)
        } else {
            Err(MpsError::UnknownRowReference {
                line,
                row: name.to_string(),
            })
        }
    }

    fn rows_line(&mut self, t: &[&str], line: usize) -> Result<(), MpsError> {
        if t.len() < 2 {
            return Err(malformed(line, "ROWS entry needs a type and a name"));
        }
        let name = t[1].to_string();
        if self.row_index.contains_key(&name) || self.objective_row.as_ref() == Some(&name) {
            return Err(malformed(line, format!("row `{name}` declared twice")));
        }
        let sense = match t[0] {
            "N" | "n" => {
                if self.objective_row.is_none() {
                    self.objective_row = Some(name);
                } else {
                    self.diag.warn(line, format!("extra objective row `{name}` ignored"));
                    self.ignored_rows.push(name);
                }
                return Ok(());
            }
            "E" | "e" => Sense::Eq,
            "L" | "l" => Sense::Le,
            "G" | "g" => Sense::Ge,
            other => return Err(malformed(line, format!("unknown row type `{other}`"))),
        };
        self.row_index.insert(name.clone(), self.rows.len());
        self.rows.push(RowSpec {
            name,
            sense,
            coefs: Vec::new(),
            rhs: 0.0,
            range: None,
        });
        Ok(())
    }

    fn columns_line(&mut self, t: &[&str], line: usize) -> Result<(), MpsError> {
        if t.len() >= 3 && t[1].trim_matches('\'') == "MARKER" {
            match t[2].trim_matches('\'') {
                "INTORG" => self.in_integer_block = true,
                "INTEND" => self.in_integer_block = false,
                other => return Err(malformed(line, format!("unknown marker `{other}`"))),
            }
            return Ok(());
        }
        if t.len() != 3 && t.len() != 5 {
            return Err(malformed(line, "COLUMNS entry needs a column and one or two row/value pairs"));
        }
        let col = match self.col_index.get(t[0]) {
            Some(&j) => j,
            None => {
                let j = self.cols.len();
                self.col_index.insert(t[0].to_string(), j);
                self.cols.push(ColSpec {
                    name: t[0].to_string(),
                    cost: 0.0,
                    integer: self.in_integer_block,
                    lower: 0.0,
                    upper: f64::INFINITY,
                    lower_set: false,
                    bounded: false,
                });
                j
            }
        };
        for pair in t[1..].chunks(2) {
            let value = number(pair[1], line)?;
            match self.row_ref(pair[0], line)? {
                RowRef::Objective => self.cols[col].cost += value,
                RowRef::Ignored => {}
                RowRef::Row(i) => self.rows[i].coefs.push((col, value)),
            }
        }
        Ok(())
    }

    /// RHS and RANGES lines: an optional set name, then row/value pairs.
    fn pairs<'t>(t: &'t [&'t str], line: usize, section: &str) -> Result<&'t [&'t str], MpsError> {
        match t.len() {
            2 | 4 => Ok(t),
            3 | 5 => Ok(&t[1..]),
            _ => Err(malformed(line, format!("{section} entry needs one or two row/value pairs"))),
        }
    }

    fn rhs_line(&mut self, t: &[&str], line: usize) -> Result<(), MpsError> {
        for pair in Self::pairs(t, line, "RHS")?.chunks(2) {
            let value = number(pair[1], line)?;
            match self.row_ref(pair[0], line)? {
                RowRef::Objective => self
                    .diag
                    .warn(line, "objective constant ignored: solutions report the objective without it"),
                RowRef::Ignored => {}
                RowRef::Row(i) => self.rows[i].rhs = value,
            }
        }
        Ok(())
    }

    fn ranges_line(&mut self, t: &[&str], line: usize) -> Result<(), MpsError> {
        for pair in Self::pairs(t, line, "RANGES")?.chunks(2) {
            let value = number(pair[1], line)?;
            match self.row_ref(pair[0], line)? {
                RowRef::Objective | RowRef::Ignored => self.diag.warn(line, "range on a free row ignored"),
                RowRef::Row(i) => self.rows[i].range = Some(value),
            }
        }
        Ok(())
    }

    fn bounds_line(&mut self, t: &[&str], line: usize) -> Result<(), MpsError> {
        if t.is_empty() {
            return Ok(());
        }
        let kind = t[0].to_ascii_uppercase();
        let needs_value = !matches!(kind.as_str(), "FR" | "MI" | "PL" | "BV");
        // with a value: TYPE [set] COL VALUE; without: TYPE [set] COL [VALUE for BV]
        let (col_name, value) = match (needs_value, t.len()) {
            (true, 3) => (t[1], Some(t[2])),
            (true, 4) => (t[2], Some(t[3])),
            (false, 2) => (t[1], None),
            (false, 3) if kind == "BV" => {
                if t[2].parse::<f64>().is_ok() {
                    (t[1], None)
                } else {
                    (t[2], None)
                }
            }
            (false, 3) => (t[2], None),
            (false, 4) => (t[2], None),
            _ => return Err(malformed(line, format!("bad {kind} bound entry"))),
        };
        let j = *self
            .col_index
            .get(col_name)
            .ok_or_else(|| MpsError::UnknownColumnReference {
                line,
                column: col_name.to_string(),
            })?;
        let value = value.map(|v| number(v, line)).transpose()?;
        let col = &mut self.cols[j];
        col.bounded = true;
        match (kind.as_str(), value) {
            ("UP", Some(v)) | ("UI", Some(v)) => {
                if v < 0.0 && col.lower == 0.0 && !col.lower_set {
                    self.diag
                        .warn(line, format!("negative upper bound on `{}` sets lower bound to -inf", col.name));
                    col.lower = f64::NEG_INFINITY;
                }
                col.upper = v;
                if kind == "UI" {
                    col.integer = true;
                }
            }
            ("LO", Some(v)) | ("LI", Some(v)) => {
                col.lower = v;
                col.lower_set = true;
                if kind == "LI" {
                    col.integer = true;
                }
            }
            ("FX", Some(v)) => {
                col.lower = v;
                col.upper = v;
                col.lower_set = true;
            }
            ("FR", None) => {
                col.lower = f64::NEG_INFINITY;
                col.upper = f64::INFINITY;
                col.lower_set = true;
            }
            ("MI", None) => {
                col.lower = f64::NEG_INFINITY;
                col.lower_set = true;
            }
            ("PL", None) => col.upper = f64::INFINITY,
            ("BV", None) => {
                col.lower = 0.0;
                col.upper = 1.0;
                col.integer = true;
                col.lower_set = true;
            }
            (other, _) => return Err(malformed(line, format!("unsupported bound type `{other}`"))),
        }
        Ok(())
    }

    fn finish(self) -> Result<(Instance, ParseDiagnostics), MpsError> {
        let mut b = InstanceBuilder::new(self.name);
        for c in &self.cols {
            let upper = if c.integer && !c.bounded { 1.0 } else { c.upper };
            let cost = if self.diag.maximize { -c.cost } else { c.cost };
            b.add_var(c.name.clone(), c.lower, upper, c.integer, cost);
        }
        for r in &self.rows {
            let rhs = r.rhs;
            match (r.sense, r.range) {
                (Sense::Le, None) => b.add_le(r.name.clone(), &r.coefs, rhs),
                (Sense::Ge, None) => b.add_ge(r.name.clone(), &r.coefs, rhs),
                (Sense::Eq, None) => b.add_eq(r.name.clone(), &r.coefs, rhs),
                (sense, Some(range)) => {
                    let (lo, hi) = match sense {
                        Sense::Le => (rhs - range.abs(), rhs),
                        Sense::Ge => (rhs, rhs + range.abs()),
                        Sense::Eq if range >= 0.0 => (rhs, rhs + range),
                        Sense::Eq => (rhs + range, rhs),
                    };
                    b.add_le(r.name.clone(), &r.coefs, hi);
                    b.add_ge(format!("{}__range", r.name), &r.coefs, lo);
                }
            }
        }
        Ok((b.build()?, self.diag))
    }
}

/// Parses MPS text.
pub fn parse_mps(text: &str) -> Result<(Instance, ParseDiagnostics), MpsError> {
    let mut r = Reader::default();
    let mut section = Section::Start;
    let mut expect_sense = false;
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        if raw.trim().is_empty() || raw.starts_with('*') {
            continue;
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        let header = !raw.starts_with(|c: char| c.is_whitespace());
        if header {
            let Some(next) = Section::parse(tokens[0]) else {
                return Err(malformed(line, format!("unknown section `{}`", tokens[0])));
            };
            if next <= section {
                return Err(malformed(line, format!("section `{}` out of order", tokens[0])));
            }
            section = next;
            match next {
                Section::Name => r.name = tokens[1..].join(" "),
                Section::ObjSense => match tokens.get(1) {
                    Some(s) => r.diag.maximize = parse_sense(s, line)?,
                    None => expect_sense = true,
                },
                Section::Rhs | Section::Ranges | Section::Bounds | Section::Rows | Section::Columns => {
                    if tokens.len() > 1 {
                        r.diag.warn(line, "text after section header ignored");
                    }
                }
                Section::End => break,
                Section::Start => unreachable!(),
            }
            continue;
        }
        match section {
            Section::ObjSense if expect_sense => {
                r.diag.maximize = parse_sense(tokens[0], line)?;
                expect_sense = false;
            }
            Section::Rows => r.rows_line(&tokens, line)?,
            Section::Columns => r.columns_line(&tokens, line)?,
            Section::Rhs => r.rhs_line(&tokens, line)?,
            Section::Ranges => r.ranges_line(&tokens, line)?,
            Section::Bounds => r.bounds_line(&tokens, line)?,
            _ => return Err(malformed(line, "data line outside a section")),
        }
    }
    if section != Section::End {
        r.diag.warn(0, "missing ENDATA");
    }
    r.finish()
}

fn parse_sense(word: &str, line: usize) -> Result<bool, MpsError> {
    match word.to_ascii_uppercase().as_str() {
        "MAX" | "MAXIMIZE" => Ok(true),
        "MIN" | "MINIMIZE" => Ok(false),
        other => Err(malformed(line, format!("unknown objective sense `{other}`"))),
    }
}

/// Parses arbitrary bytes; invalid UTF-8 is replaced, never rejected.
pub fn parse_mps_bytes(bytes: &[u8]) -> Result<(Instance, ParseDiagnostics), MpsError> {
    parse_mps(&String::from_utf8_lossy(bytes))
}

pub fn read_mps(path: &Path) -> Result<(Instance, ParseDiagnostics), MpsError> {
    let text = fs::read(path).map_err(|source| MpsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (inst, mut diag) = parse_mps_bytes(&text)?;
    diag.source = path.display().to_string();
    Ok((inst, diag))
}

fn mps_name(name: &str, fallback: String, taken: &mut HashMap<String, ()>) -> String {
    let clean: String = name.chars().map(|c| if c.is_whitespace() { '_' } else { c }).collect();
    let pick = if clean.is_empty() || clean.starts_with(['*', '\'']) || taken.contains_key(&clean) {
        fallback
    } else {
        clean
    };
    taken.insert(pick.clone(), ());
    pick
}

/// Free-format MPS text with explicit bounds for every column.
pub fn to_mps_string(inst: &Instance) -> String {
    let mut taken = HashMap::new();
    taken.insert("obj".to_string(), ());
    let cols: Vec<String> = (0..inst.num_vars())
        .map(|j| mps_name(inst.var_name(j), format!("C{j}"), &mut taken))
        .collect();
    let rows: Vec<String> = (0..inst.num_rows())
        .map(|i| mps_name(inst.row_name(i), format!("R{i}"), &mut taken))
        .collect();
    let mut entries: Vec<Vec<(usize, f64)>> = vec![Vec::new(); inst.num_vars()];
    for (i, row) in inst.rows().iter().enumerate() {
        for &(j, a) in &row.coefs {
            entries[j].push((i, a));
        }
    }

    let mut out = String::new();
    let name = if inst.name().trim().is_empty() { "unnamed" } else { inst.name() };
    let _ = writeln!(out, "NAME {}", name.split_whitespace().collect::<Vec<_>>().join("_"));
    out.push_str("ROWS\n N obj\n");
    for r in &rows {
        let _ = writeln!(out, " L {r}");
    }
    out.push_str("COLUMNS\n");
    let mut in_int = false;
    let mut markers = 0;
    for j in 0..inst.num_vars() {
        if inst.is_integer(j) != in_int {
            let kind = if in_int { "INTEND" } else { "INTORG" };
            let _ = writeln!(out, " M{markers} 'MARKER' '{kind}'");
            markers += 1;
            in_int = !in_int;
        }
        let _ = writeln!(out, " {} obj {}", cols[j], inst.objective()[j]);
        for &(i, a) in &entries[j] {
            let _ = writeln!(out, " {} {} {}", cols[j], rows[i], a);
        }
    }
    if in_int {
        let _ = writeln!(out, " M{markers} 'MARKER' 'INTEND'");
    }
    out.push_str("RHS\n");
    for (i, row) in inst.rows().iter().enumerate() {
        if row.rhs != 0.0 {
            let _ = writeln!(out, " RHS {} {}", rows[i], row.rhs);
        }
    }
    out.push_str("BOUNDS\n");
    for j in 0..inst.num_vars() {
        let (l, u) = (inst.lower()[j], inst.upper()[j]);
        if l == u {
            let _ = writeln!(out, " FX BND {} {}", cols[j], l);
            continue;
        }
        if l == f64::NEG_INFINITY {
            let _ = writeln!(out, " MI BND {}", cols[j]);
        } else {
            let _ = writeln!(out, " LO BND {} {}", cols[j], l);
        }
        if u == f64::INFINITY {
            let _ = writeln!(out, " PL BND {}", cols[j]);
        } else {
            let _ = writeln!(out, " UP BND {} {}", cols[j], u);
        }
    }
    out.push_str("ENDATA\n");
    out
}

pub fn write_mps(inst: &Instance, path: &Path) -> Result<(), MpsError> {
    fs::write(path, to_mps_string(inst)).map_err(|source| MpsError::Io {
        path: path.to_path_buf(),
        source,
    })
}
