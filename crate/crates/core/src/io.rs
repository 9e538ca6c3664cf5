//! Design tables, class tables, reports and traces on disk.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::aberration::{format_value, ReportLine};
use crate::error::{Error, Result};
use crate::sib::TraceRecord;
use crate::structure::BlockStructure;

/// A two-level design with named columns, coded `±1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DesignTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<i8>>,
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c == ';' || c == '\t' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect()
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Parses a delimiter-separated design. The header line is optional;
/// levels may be `±1` or `0/1` (with `0` read as `+1`).
pub fn parse_design(text: &str) -> Result<DesignTable> {
    let mut names: Option<Vec<String>> = None;
    let mut raw: Vec<Vec<i64>> = Vec::new();
    for (line_no, line) in data_lines(text) {
        let fields = split_fields(line);
        let parsed: std::result::Result<Vec<i64>, _> =
            fields.iter().map(|f| f.parse::<i64>()).collect();
        match parsed {
            Ok(v) => raw.push(v),
            Err(_) if names.is_none() && raw.is_empty() => {
                names = Some(fields.iter().map(|s| s.to_string()).collect());
            }
            Err(_) => {
                return Err(Error::Parse {
                    position: line_no,
                    message: format!("non-numeric field in `{line}`"),
                })
            }
        }
    }
    let width = raw
        .first()
        .map_or_else(|| names.as_ref().map_or(0, Vec::len), Vec::len);
    if let Some((i, _)) = raw.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(Error::DimensionMismatch(format!(
            "row {} has the wrong number of columns",
            i + 1
        )));
    }
    let zero_one =
        raw.iter().flatten().all(|&x| x == 0 || x == 1) && raw.iter().flatten().any(|&x| x == 0);
    let mut rows = Vec::with_capacity(raw.len());
    for r in &raw {
        let mut out = Vec::with_capacity(width);
        for &x in r {
            out.push(match (zero_one, x) {
                (true, 0) => 1,
                (true, 1) => -1,
                (false, 1) => 1,
                (false, -1) => -1,
                _ => return Err(Error::Invalid(format!("level {x} is not two-level"))),
            });
        }
        rows.push(out);
    }
    let names = match names {
        Some(n) if n.len() == width => n,
        Some(n) => {
            return Err(Error::DimensionMismatch(format!(
                "header has {} names for {width} columns",
                n.len()
            )))
        }
        None => crate::gf2::letters(width),
    };
    Ok(DesignTable { names, rows })
}

pub fn read_design(path: &Path) -> Result<DesignTable> {
    parse_design(&fs::read_to_string(path)?)
}

pub fn render_design(d: &DesignTable) -> String {
    let mut s = d.names.join(",");
    s.push('\n');
    for r in &d.rows {
        let fields: Vec<String> = r.iter().map(|x| x.to_string()).collect();
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}

pub fn write_design(path: &Path, d: &DesignTable) -> Result<()> {
    fs::write(path, render_design(d))?;
    Ok(())
}

/// Parses a class table: a header of factor names, then one line of integer
/// class labels per unit.
pub fn parse_class_table(text: &str) -> Result<BlockStructure> {
    let mut lines = data_lines(text);
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Invalid("empty class table".into()))?;
    let names: Vec<String> = split_fields(header).iter().map(|s| s.to_string()).collect();
    let mut columns = vec![Vec::new(); names.len()];
    for (line_no, line) in lines {
        let fields = split_fields(line);
        if fields.len() != names.len() {
            return Err(Error::Parse {
                position: line_no,
                message: format!("expected {} labels", names.len()),
            });
        }
        for (c, f) in fields.iter().enumerate() {
            let v = f.parse::<usize>().map_err(|_| Error::Parse {
                position: line_no,
                message: format!("bad class label `{f}`"),
            })?;
            columns[c].push(v);
        }
    }
    BlockStructure::from_class_table(&names, &columns)
}

pub fn read_class_table(path: &Path) -> Result<BlockStructure> {
    parse_class_table(&fs::read_to_string(path)?)
}

#[derive(Serialize)]
struct JsonLine<'a> {
    label: &'a str,
    members: &'a [String],
    values: Vec<String>,
    approx: Vec<f64>,
}

/// Report lines as JSON; exact values are kept as `p/q` strings.
pub fn report_json(lines: &[ReportLine]) -> serde_json::Value {
    let items: Vec<JsonLine> = lines
        .iter()
        .map(|l| JsonLine {
            label: &l.label,
            members: &l.members,
            values: l.values.iter().map(|v| v.to_string()).collect(),
            approx: l.values.iter().map(crate::aberration::to_f64).collect(),
        })
        .collect();
    serde_json::to_value(items).unwrap_or(serde_json::Value::Null)
}

pub fn render_report(lines: &[ReportLine]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

/// One line per iteration: the iteration number, then the global best
/// criterion vector.
pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in trace {
        let values: Vec<String> = r.best.iter().map(format_value).collect();
        writeln!(f, "{},{}", r.iteration, values.join(","))?;
    }
    Ok(())
}
