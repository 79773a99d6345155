//! `metrics.csv` and `history.csv`.
//!
//! `metrics.csv` has one row per evaluation point with the header
//! `round,overall_acc,per_class_acc_0..per_class_acc_{C-1},global_t,selected_user_freq_snapshot`.
//! An undefined per-class accuracy (no test samples of that class) is an
//! empty field. The snapshot column holds the empirical selection frequency
//! of every user up to that round, joined by `;`.

use fedcvar_core::fed::RunHistory;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("metrics file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub overall_acc: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub global_t: f64,
    pub selection_freq: Vec<f64>,
}

pub fn header(num_classes: usize) -> Vec<String> {
    let mut h = vec!["round".to_string(), "overall_acc".to_string()];
    h.extend((0..num_classes).map(|k| format!("per_class_acc_{k}")));
    h.push("global_t".into());
    h.push("selected_user_freq_snapshot".into());
    h
}

/// Shortest round-tripping decimal; scientific notation for very small or
/// very large magnitudes.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

pub fn write_metrics(rows: &[MetricsRow], num_classes: usize) -> Result<Vec<u8>, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(num_classes))?;
    for row in rows {
        if row.per_class_acc.len() != num_classes {
            return Err(MetricsError::Format(format!(
                "round {}: {} per-class values for {num_classes} classes",
                row.round,
                row.per_class_acc.len()
            )));
        }
        let mut rec = vec![row.round.to_string(), num(row.overall_acc)];
        rec.extend(row.per_class_acc.iter().map(|a| a.map(num).unwrap_or_default()));
        rec.push(num(row.global_t));
        rec.push(row.selection_freq.iter().map(|&f| num(f)).collect::<Vec<_>>().join(";"));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| MetricsError::Format(e.to_string()))
}

fn parse_f64(field: &str, what: &str) -> Result<f64, MetricsError> {
    field.parse().map_err(|_| MetricsError::Format(format!("bad {what} value {field:?}")))
}

/// Parses a `metrics.csv` produced by [`write_metrics`].
pub fn read_metrics(bytes: &[u8]) -> Result<(usize, Vec<MetricsRow>), MetricsError> {
    let mut r = csv::Reader::from_reader(bytes);
    let head: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if head.len() < 4 {
        return Err(MetricsError::Format("header too short".into()));
    }
    let c = head.len() - 4;
    if head != header(c) {
        return Err(MetricsError::Format(format!("unexpected header {head:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let round = rec[0].parse().map_err(|_| MetricsError::Format(format!("bad round {:?}", &rec[0])))?;
        let per_class_acc = (0..c)
            .map(|k| {
                let f = &rec[2 + k];
                if f.is_empty() { Ok(None) } else { parse_f64(f, "accuracy").map(Some) }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let freq = &rec[3 + c];
        let selection_freq = if freq.is_empty() {
            Vec::new()
        } else {
            freq.split(';').map(|f| parse_f64(f, "frequency")).collect::<Result<Vec<_>, _>>()?
        };
        rows.push(MetricsRow {
            round,
            overall_acc: parse_f64(&rec[1], "overall_acc")?,
            per_class_acc,
            global_t: parse_f64(&rec[2 + c], "global_t")?,
            selection_freq,
        });
    }
    Ok((c, rows))
}

/// `round,selected_user,global_t,train_loss_selected`, one row per round.
pub fn write_history(history: &RunHistory) -> Result<Vec<u8>, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "selected_user", "global_t", "train_loss_selected"])?;
    for rec in &history.records {
        w.write_record([
            rec.round.to_string(),
            rec.selected_user.to_string(),
            num(rec.t_global),
            num(rec.train_loss_selected),
        ])?;
    }
    w.into_inner().map_err(|e| MetricsError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<MetricsRow> {
        vec![
            MetricsRow {
                round: 25,
                overall_acc: 0.5,
                per_class_acc: vec![Some(1.0), None, Some(0.1 + 0.2)],
                global_t: -1e-300,
                selection_freq: vec![0.52, 0.4, 0.08],
            },
            MetricsRow {
                round: 50,
                overall_acc: 2.0 / 3.0,
                per_class_acc: vec![Some(0.0), None, Some(1.0)],
                global_t: 0.25,
                selection_freq: vec![0.5, 0.38, 0.12],
            },
        ]
    }

    #[test]
    fn header_is_fixed() {
        let bytes = write_metrics(&[], 3).unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            "round,overall_acc,per_class_acc_0,per_class_acc_1,per_class_acc_2,global_t,selected_user_freq_snapshot\n"
        );
    }

    #[test]
    fn rows_round_trip_exactly() {
        let rows = sample();
        let bytes = write_metrics(&rows, 3).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("25,0.5,1,,0.30000000000000004,-1e-300,0.52;0.4;0.08"), "{text}");
        let (c, back) = read_metrics(&bytes).unwrap();
        assert_eq!(c, 3);
        assert_eq!(back, rows);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(read_metrics(b"round,acc\n1,2\n").is_err());
        let mut text = String::from_utf8(write_metrics(&sample(), 3).unwrap()).unwrap();
        text = text.replace("0.25", "x");
        assert!(read_metrics(text.as_bytes()).is_err());
        assert!(write_metrics(&sample(), 2).is_err());
    }
}
