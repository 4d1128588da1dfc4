//! COO text format for partial tensors.
//!
//! Line 1: `D N_1 N_2 ... N_D`. Each subsequent non-empty line:
//! `i_1 i_2 ... i_D value` with 1-based indices. Lines starting with `#`
//! are comments. Exactly one entry per index.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{MultiIndex, ObservedEntry, ObservedEntrySet};

/// Parses a COO file; 1-based indices on disk become 0-based in memory.
pub fn load_coo(path: impl AsRef<Path>) -> Result<ObservedEntrySet> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);

    let mut dims: Option<Vec<usize>> = None;
    let mut entries = Vec::new();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();

    for (line_no, line) in reader.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();

        let dims = match &dims {
            Some(d) => d,
            None => {
                // Header: D followed by D extents.
                let header_err = |reason: String| Error::CooHeader {
                    path: path_str.clone(),
                    line: line_no,
                    reason,
                };
                let d: usize = fields[0]
                    .parse()
                    .map_err(|_| header_err(format!("mode count `{}` is not an integer", fields[0])))?;
                if d < 2 {
                    return Err(header_err(format!("need at least 2 modes, got {d}")));
                }
                if fields.len() != d + 1 {
                    return Err(header_err(format!(
                        "expected {} extents after mode count, found {}",
                        d,
                        fields.len() - 1
                    )));
                }
                let mut extents = Vec::with_capacity(d);
                for f in &fields[1..] {
                    let n: usize = f
                        .parse()
                        .map_err(|_| header_err(format!("extent `{f}` is not an integer")))?;
                    if n == 0 {
                        return Err(header_err("zero extent".to_string()));
                    }
                    extents.push(n);
                }
                dims = Some(extents);
                continue;
            }
        };

        let entry_err = |reason: String| Error::CooEntry {
            path: path_str.clone(),
            line: line_no,
            reason,
        };
        if fields.len() != dims.len() + 1 {
            return Err(entry_err(format!(
                "expected {} indices and a value, found {} fields",
                dims.len(),
                fields.len()
            )));
        }
        let mut index = Vec::with_capacity(dims.len());
        for (d, f) in fields[..dims.len()].iter().enumerate() {
            let one_based: usize = f
                .parse()
                .map_err(|_| entry_err(format!("index `{f}` is not an integer")))?;
            if one_based == 0 || one_based > dims[d] {
                return Err(Error::CooIndexOutOfRange {
                    path: path_str.clone(),
                    line: line_no,
                    index: fields[..dims.len()]
                        .iter()
                        .map(|s| s.parse().unwrap_or(0))
                        .collect(),
                    dims: dims.clone(),
                });
            }
            index.push(one_based - 1);
        }
        let value: f64 = fields[dims.len()]
            .parse()
            .map_err(|_| entry_err(format!("value `{}` is not a number", fields[dims.len()])))?;
        if !value.is_finite() {
            return Err(entry_err(format!("value `{value}` is not finite")));
        }
        if !seen.insert(index.clone()) {
            return Err(Error::CooDuplicateIndex {
                path: path_str.clone(),
                line: line_no,
                index: index.iter().map(|i| i + 1).collect(),
            });
        }
        entries.push(ObservedEntry {
            index: MultiIndex::new(index),
            value,
        });
    }

    let dims = dims.ok_or_else(|| Error::CooHeader {
        path: path_str.clone(),
        line: 0,
        reason: "empty file; missing header".to_string(),
    })?;
    ObservedEntrySet::new(dims, entries)
}

/// Writes entries in their stored order; loading the result reproduces
/// the set exactly.
pub fn save_coo(path: impl AsRef<Path>, entries: &ObservedEntrySet) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "{}", entries.dims().len())?;
    for n in entries.dims() {
        write!(out, " {n}")?;
    }
    writeln!(out)?;
    for entry in entries.entries() {
        for i in entry.index.indices() {
            write!(out, "{} ", i + 1)?;
        }
        writeln!(out, "{}", entry.value)?;
    }
    out.flush()?;
    Ok(())
}
