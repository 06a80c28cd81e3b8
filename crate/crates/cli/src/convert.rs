//! Binary-row benchmark files (one object per line, one 0/1 column per
//! attribute, `?` or empty for missing) to a unary-relation dataset.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

fn parse_rows(text: &str, path: &Path) -> Result<Vec<Vec<Option<u32>>>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> =
            if line.contains(',') { line.split(',').map(str::trim).collect() } else { line.split_whitespace().collect() };
        let row = fields
            .iter()
            .map(|f| match *f {
                "0" => Ok(Some(0)),
                "1" => Ok(Some(1)),
                "" | "?" | "NA" => Ok(None),
                other => bail!("{}:{}: expected 0, 1 or ?, found `{other}`", path.display(), n + 1),
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            let first: &Vec<Option<u32>> = first;
            if first.len() != row.len() {
                bail!("{}:{}: {} columns, expected {}", path.display(), n + 1, row.len(), first.len());
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Schema with one unary Bernoulli relation `c{j}` per column over domain `Obj`.
pub fn schema_text(columns: usize) -> String {
    (0..columns).map(|j| format!("bernoulli c{j} Obj\n")).collect()
}

/// Observations `c{j},v,r{i}` for every present cell.
pub fn observations_text(rows: &[Vec<Option<u32>>]) -> String {
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if let Some(v) = v {
                writeln!(out, "c{j},{v},r{i}").unwrap();
            }
        }
    }
    out
}

/// Query lines `c{j},v,~t{i}`: each test object is one fresh entity, so its
/// cells form one jointly scored row.
pub fn queries_text(rows: &[Vec<Option<u32>>]) -> String {
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if let Some(v) = v {
                writeln!(out, "c{j},{v},~t{i}").unwrap();
            }
        }
    }
    out
}

pub fn cmd_convert(train: &Path, test: Option<&Path>, out: &Path) -> Result<()> {
    let text = fs::read_to_string(train).with_context(|| format!("reading {}", train.display()))?;
    let rows = parse_rows(&text, train)?;
    let Some(columns) = rows.first().map(Vec::len) else { bail!("{} has no rows", train.display()) };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("schema.txt"), schema_text(columns))?;
    fs::write(out.join("obs.csv"), observations_text(&rows))?;
    if let Some(test) = test {
        let text = fs::read_to_string(test).with_context(|| format!("reading {}", test.display()))?;
        let test_rows = parse_rows(&text, test)?;
        if let Some(r) = test_rows.first() {
            if r.len() != columns {
                bail!("{} has {} columns, training data has {columns}", test.display(), r.len());
            }
        }
        fs::write(out.join("query.csv"), queries_text(&test_rows))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use hirm::query::parse_queries;
    use hirm::Dataset;

    #[test]
    fn converts_rows_and_queries() {
        let rows = parse_rows("1,0,?\n0 1 1\n", Path::new("x")).unwrap();
        assert_eq!(rows, vec![vec![Some(1), Some(0), None], vec![Some(0), Some(1), Some(1)]]);
        let ds = Dataset::parse(&schema_text(3), &observations_text(&rows)).unwrap();
        assert_eq!(ds.system.num_relations(), 3);
        assert_eq!(ds.store.num_entities(0), 2);
        assert_eq!(ds.store.num_observations(), 5);
        let queries = parse_queries(&ds, &queries_text(&rows)).unwrap();
        assert_eq!(queries.len(), 2);
        assert_eq!(queries[1].cells.len(), 3);
    }

    #[test]
    fn rejects_ragged_and_non_binary_rows() {
        assert!(parse_rows("1,0\n1\n", Path::new("x")).is_err());
        assert!(parse_rows("1,2\n", Path::new("x")).is_err());
    }
}
