//! Per-instance CSV and summary JSON.

use std::path::Path;

use crate::error::{Error, Result};

use super::metrics::{EvalRecord, Summary};

pub fn write_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format { format: "csv", reason: format!("{}: {e}", path.display()) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Category;
    use crate::geometry::pose::{axis_angle, Pose};

    #[test]
    fn csv_round_trips_exactly() {
        let gt = Pose::new(axis_angle([0.1, 0.7, 0.2], 0.3), [0.1 / 3.0, -0.2, 1e-17]).unwrap();
        let pred = Pose::new(axis_angle([0.3, 0.7, 0.2], 0.31), [0.1, 0.2 / 7.0, 0.3]).unwrap();
        let records = vec![
            EvalRecord::new("box-3", "box", None, &gt, 0.2, &pred, 0.21, 0.7, 0.0123),
            EvalRecord::new("cyl-1", "cylinder", Category::Cylinder.symmetry(), &pred, 0.15, &gt, 0.1, 0.0, 1.0 / 3.0),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_csv(&path, &records).unwrap();
        assert_eq!(read_csv(&path).unwrap(), records);
    }
}
