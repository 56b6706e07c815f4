use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use clue_tensor::Tensor;

use super::{mean_std, split_indices, ColumnKind, ColumnSpec, EncodedDataset, TargetSpec};
use crate::error::{io_err, ClueError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaKind {
    Continuous,
    Categorical,
    /// Whole days between the dates in `start` and `end`.
    DaysBetween,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaColumn {
    pub name: String,
    pub kind: SchemaKind,
    #[serde(default)]
    pub target: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<String>,
}

impl SchemaColumn {
    pub fn new(name: &str, kind: SchemaKind) -> Self {
        Self {
            name: name.into(),
            kind,
            target: false,
            start: None,
            end: None,
        }
    }

    pub fn target(mut self) -> Self {
        self.target = true;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Counts { train: usize, test: usize },
    /// Fraction of rows held out for testing.
    Fraction { test: f64 },
}

pub fn load_tabular(
    path: impl AsRef<Path>,
    schema: &[SchemaColumn],
    split: Split,
    seed: u64,
) -> Result<EncodedDataset> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(io_err(path.as_ref()))?;
    parse_tabular(&text, schema, split, seed)
}

enum Raw {
    Num(Vec<f64>),
    Cat(Vec<String>),
}

pub fn parse_tabular(
    text: &str,
    schema: &[SchemaColumn],
    split: Split,
    seed: u64,
) -> Result<EncodedDataset> {
    let header_line = text.lines().next().ok_or(ClueError::Empty("csv"))?;
    let delimiter = if header_line.contains(';') && !header_line.contains(',') {
        b';'
    } else {
        b','
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| ClueError::Config(format!("csv header: {e}")))?
        .iter()
        .map(|h| h.trim_matches('"').to_string())
        .collect();
    let records: Vec<csv::StringRecord> = reader
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| ClueError::Config(format!("csv: {e}")))?;
    if records.is_empty() {
        return Err(ClueError::Empty("csv body"));
    }
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ClueError::MissingColumn(name.to_string()))
    };
    let targets: Vec<&SchemaColumn> = schema.iter().filter(|c| c.target).collect();
    if targets.len() != 1 {
        return Err(ClueError::Config(format!(
            "schema must mark exactly one target column, found {}",
            targets.len()
        )));
    }

    let mut raws = Vec::with_capacity(schema.len());
    for col in schema {
        let raw = match col.kind {
            SchemaKind::Continuous => {
                let j = find(&col.name)?;
                Raw::Num(
                    records
                        .iter()
                        .enumerate()
                        .map(|(r, rec)| parse_num(rec.get(j).unwrap_or(""), r, &col.name))
                        .collect::<Result<_>>()?,
                )
            }
            SchemaKind::Categorical => {
                let j = find(&col.name)?;
                Raw::Cat(
                    records
                        .iter()
                        .enumerate()
                        .map(|(r, rec)| {
                            let v = rec.get(j).unwrap_or("").trim_matches('"').to_string();
                            if v.is_empty() {
                                Err(ClueError::Parse {
                                    row: r,
                                    column: col.name.clone(),
                                    value: v,
                                })
                            } else {
                                Ok(v)
                            }
                        })
                        .collect::<Result<_>>()?,
                )
            }
            SchemaKind::DaysBetween => {
                let (s, e) = match (&col.start, &col.end) {
                    (Some(s), Some(e)) => (find(s)?, find(e)?),
                    _ => {
                        return Err(ClueError::Config(format!(
                            "column `{}` needs `start` and `end`",
                            col.name
                        )))
                    }
                };
                Raw::Num(
                    records
                        .iter()
                        .enumerate()
                        .map(|(r, rec)| {
                            let a = parse_date(rec.get(s).unwrap_or(""), r, &col.name)?;
                            let b = parse_date(rec.get(e).unwrap_or(""), r, &col.name)?;
                            Ok((b - a).floor())
                        })
                        .collect::<Result<_>>()?,
                )
            }
        };
        raws.push(raw);
    }

    let n = records.len();
    let (n_train, n_test) = match split {
        Split::Counts { train, test } => (train, test),
        Split::Fraction { test } => {
            if !(0.0..1.0).contains(&test) {
                return Err(ClueError::Config(format!("test fraction {test} not in [0, 1)")));
            }
            let t = (n as f64 * test).round() as usize;
            (n - t, t)
        }
    };
    let (train, test) = split_indices(n, n_train, n_test, seed)?;

    let mut columns = Vec::new();
    let mut encoded_cols: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut target = None;
    let mut y = vec![0.0; n];
    for (col, raw) in schema.iter().zip(&raws) {
        match raw {
            Raw::Num(vals) => {
                let train_vals: Vec<f64> = train.iter().map(|&i| vals[i]).collect();
                let (mean, std) = mean_std(&train_vals);
                if !(std > 0.0) {
                    return Err(ClueError::ZeroVariance(col.name.clone()));
                }
                let z: Vec<f64> = vals.iter().map(|v| (v - mean) / std).collect();
                if col.target {
                    y = z;
                    target = Some(TargetSpec::Regression {
                        name: col.name.clone(),
                        mean,
                        std,
                    });
                } else {
                    columns.push(ColumnSpec::continuous(col.name.clone(), mean, std));
                    encoded_cols.push(z.into_iter().map(|v| vec![v]).collect());
                }
            }
            Raw::Cat(vals) => {
                let categories: Vec<String> = train
                    .iter()
                    .map(|&i| vals[i].clone())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                let mut codes = vec![usize::MAX; n];
                for &i in train.iter().chain(&test) {
                    codes[i] = categories.binary_search(&vals[i]).map_err(|_| {
                        ClueError::UnknownCategory {
                            column: col.name.clone(),
                            value: vals[i].clone(),
                        }
                    })?;
                }
                if col.target {
                    if categories.len() < 2 {
                        return Err(ClueError::Config(format!(
                            "target `{}` has a single class",
                            col.name
                        )));
                    }
                    y = codes.iter().map(|&c| c as f64).collect();
                    target = Some(TargetSpec::Classification {
                        name: col.name.clone(),
                        classes: categories,
                    });
                } else {
                    let k = categories.len();
                    let spec = ColumnSpec {
                        name: col.name.clone(),
                        kind: ColumnKind::Categorical { categories },
                    };
                    spec.validate()?;
                    columns.push(spec);
                    encoded_cols.push(
                        codes
                            .iter()
                            .map(|&c| (0..k).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
                            .collect(),
                    );
                }
            }
        }
    }

    // Rows outside both splits keep placeholder codes; they are dropped by
    // compacting to train + test.
    let keep: Vec<usize> = train.iter().chain(&test).copied().collect();
    let mut data = Vec::new();
    for &r in &keep {
        for col in &encoded_cols {
            data.extend_from_slice(&col[r]);
        }
    }
    let d = super::encoded_width(&columns);
    let x = Tensor::new(vec![keep.len(), d.max(1)], data)
        .map_err(|_| ClueError::Config("schema has no input columns".into()))?;
    let y_kept = keep.iter().map(|&r| y[r]).collect();
    let n_train = train.len();
    let train_idx = (0..n_train).collect();
    let test_idx = (n_train..keep.len()).collect();
    EncodedDataset::from_encoded(
        columns,
        x,
        y_kept,
        target.expect("one target checked above"),
        train_idx,
        test_idx,
    )
}

fn parse_num(s: &str, row: usize, column: &str) -> Result<f64> {
    let t = s.trim_matches('"');
    t.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| ClueError::Parse {
            row,
            column: column.to_string(),
            value: t.to_string(),
        })
}

/// Days since 1970-01-01 for `YYYY-MM-DD[ HH:MM[:SS]]` (time as a fraction
/// of a day).
fn parse_date(s: &str, row: usize, column: &str) -> Result<f64> {
    let bad = || ClueError::Parse {
        row,
        column: column.to_string(),
        value: s.to_string(),
    };
    let s = s.trim_matches('"').trim();
    let (date, time) = match s.split_once([' ', 'T']) {
        Some((d, t)) => (d, Some(t)),
        None => (s, None),
    };
    let mut parts = date.split('-').map(|p| p.parse::<i64>());
    let (Some(Ok(y)), Some(Ok(m)), Some(Ok(d)), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(bad());
    };
    if !(1..=12).contains(&m) || !(1..=31).contains(&d) {
        return Err(bad());
    }
    let mut days = days_from_civil(y, m, d) as f64;
    if let Some(t) = time {
        let hms: Vec<f64> = t
            .split(':')
            .map(|p| p.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let secs = hms.first().copied().unwrap_or(0.0) * 3600.0
            + hms.get(1).copied().unwrap_or(0.0) * 60.0
            + hms.get(2).copied().unwrap_or(0.0);
        days += secs / 86400.0;
    }
    Ok(days)
}

fn days_from_civil(y: i64, m: i64, d: i64) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146097 + doe - 719468
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn civil_days() {
        assert_eq!(days_from_civil(1970, 1, 1), 0);
        assert_eq!(days_from_civil(2000, 3, 1), 11017);
        assert_eq!(
            parse_date("2013-01-02 12:00:00", 0, "c").unwrap() - parse_date("2013-01-01", 0, "c").unwrap(),
            1.5
        );
    }
}
