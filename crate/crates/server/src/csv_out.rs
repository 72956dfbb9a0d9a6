//! One CSV file per metric, next to the metrics JSON written by `analyze`.

use std::path::Path;

use care_core::analytics::Metrics;

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn opt(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `reltime_histogram.csv`, `page_reading_times.csv`,
/// `task_timings.csv` and `deletion_rate.csv` into `dir`.
pub fn write_all(dir: &Path, m: &Metrics) -> Result<(), CsvError> {
    std::fs::create_dir_all(dir)?;

    let h = &m.reltime_histogram;
    let mut w = csv::Writer::from_path(dir.join("reltime_histogram.csv"))?;
    w.write_record(["bin", "lower", "upper", "count"])?;
    for (i, c) in h.counts.iter().enumerate() {
        let lower = i as f64 / h.bins as f64;
        let upper = (i + 1) as f64 / h.bins as f64;
        w.write_record([i.to_string(), lower.to_string(), upper.to_string(), c.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("page_reading_times.csv"))?;
    w.write_record(["user_id", "document_id", "page_index", "share"])?;
    for p in &m.page_reading_times {
        for (page, share) in &p.pages {
            w.write_record([p.user_id.as_str(), p.document_id.as_str(), page, &share.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("task_timings.csv"))?;
    w.write_record(["user_id", "document_id", "time_to_completion_ms", "time_to_first_interaction_ms", "synthetic_leave"])?;
    for t in &m.task_timings.per_pair {
        w.write_record([
            t.user_id.to_string(),
            t.document_id.to_string(),
            opt(t.time_to_completion_ms),
            opt(t.time_to_first_interaction_ms),
            t.synthetic_leave.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("deletion_rate.csv"))?;
    w.write_record(["deletion_rate"])?;
    w.write_record([m.deletion_rate.to_string()])?;
    w.flush()?;
    Ok(())
}
