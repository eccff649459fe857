//! `metrics.csv`: one row per round, written in full after every round.

use std::fs;
use std::path::Path;

use crate::distill::RoundMetrics;
use crate::error::{DfkdError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "round,l_ce,l_kd,l_fea,l_csd,student_acc,aux_acc";

pub fn write_metrics(path: &Path, rows: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(METRICS_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| DfkdError::Io(e.into_error()))?;
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    if !path.exists() {
        return Err(DfkdError::MissingMetrics(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(DfkdError::MissingMetrics(format!(
            "{}: unexpected header `{}`",
            path.display(),
            header.join(",")
        )));
    }
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(METRICS_FILE);
        let rows = vec![
            RoundMetrics {
                round: 0,
                l_ce: 0.0,
                l_kd: 0.0,
                l_fea: 0.0,
                l_csd: 0.0,
                student_acc: 0.1,
                aux_acc: 0.025,
            },
            RoundMetrics {
                round: 1,
                l_ce: 1.5,
                l_kd: 0.25,
                l_fea: 3.0,
                l_csd: 2.0,
                student_acc: 0.5,
                aux_acc: 0.125,
            },
        ];
        write_metrics(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }

    #[test]
    fn missing_file_is_reported() {
        assert!(matches!(
            read_metrics(Path::new("/nonexistent/metrics.csv")),
            Err(DfkdError::MissingMetrics(_))
        ));
    }
}
