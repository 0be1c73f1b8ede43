use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::Shard;
use crate::error::{Error, Result};
use crate::model::{Dataset, Matrix};

/// Read a headed CSV whose last column is the target.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let width = reader.headers()?.len();
    if width < 2 {
        return Err(Error::invalid(format!(
            "{}: need at least one feature column and a target column",
            path.display()
        )));
    }

    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // Data rows are numbered from 1; the header is row 0.
        let row = i + 1;
        if record.len() != width {
            return Err(Error::invalid(format!(
                "{}: row {row} has {} fields, header has {width}",
                path.display(),
                record.len()
            )));
        }
        for (column, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| Error::Csv {
                path: path.to_owned(),
                row,
                column,
                message: format!("`{cell}` is not a number"),
            })?;
            if !value.is_finite() {
                return Err(Error::Csv {
                    path: path.to_owned(),
                    row,
                    column,
                    message: format!("`{cell}` is not finite"),
                });
            }
            if column + 1 == width {
                targets.push(value);
            } else {
                features.push(value);
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::invalid(format!("{}: no data rows", path.display())));
    }
    Dataset::new(Matrix::new(targets.len(), width - 1, features)?, targets)
}

/// Write `data` with header `x0,…,x{d-1},y`.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(data.dim() + 1);
    for i in 0..data.len() {
        let (x, y) = data.row(i);
        record.clear();
        record.extend(x.iter().map(f64::to_string));
        record.push(y.to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShardSummary {
    pub learner_index: u16,
    pub rows: usize,
    pub target_min: f64,
    pub target_max: f64,
    pub target_mean: f64,
}

impl ShardSummary {
    pub fn of(shard: &Shard) -> Self {
        let t = shard.data.targets();
        ShardSummary {
            learner_index: shard.learner_index,
            rows: t.len(),
            target_min: t.iter().copied().fold(f64::INFINITY, f64::min),
            target_max: t.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            target_mean: t.iter().sum::<f64>() / t.len() as f64,
        }
    }
}

/// One `shard_<k>.csv` per learner plus `manifest.csv` with row counts and
/// target ranges.
pub fn write_shards(dir: &Path, shards: &[Shard]) -> Result<Vec<ShardSummary>> {
    fs::create_dir_all(dir)?;
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
    let mut summaries = Vec::with_capacity(shards.len());
    for shard in shards {
        write_csv(
            &dir.join(format!("shard_{}.csv", shard.learner_index)),
            &shard.data,
        )?;
        let summary = ShardSummary::of(shard);
        manifest.serialize(&summary)?;
        summaries.push(summary);
    }
    manifest.flush()?;
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file_with(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_features_and_targets() {
        let f = file_with("a,b,y\n1,2,3\n4,5,6\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.features().as_slice(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(ds.targets(), &[3.0, 6.0]);
    }

    #[test]
    fn rejects_empty_ragged_and_nan() {
        assert!(load_csv(file_with("a,b,y\n").path()).is_err());
        assert!(load_csv(file_with("a,b,y\n1,2,3\n4,5\n").path()).is_err());
        let err = load_csv(file_with("a,b,y\n1,2,3\n4,NaN,6\n").path()).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Csv {
                    row: 2,
                    column: 1,
                    ..
                }
            ),
            "{err}"
        );
        let err = load_csv(file_with("a,b,y\n1,x,3\n").path()).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Csv {
                    row: 1,
                    column: 1,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn write_then_read_preserves_values() {
        let ds = Dataset::from_rows(
            &[vec![0.1, -2.5e-7], vec![1e300, 3.0]],
            vec![45.123456789, 81.0],
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(f.path(), &ds).unwrap();
        assert_eq!(load_csv(f.path()).unwrap(), ds);
    }
}
