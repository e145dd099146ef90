//! Per-epoch training metrics and the append-only CSV log
//! (`epoch,train_loss,val_accuracy`), plus the side-by-side fusion
//! comparison report built from two such logs.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_accuracy";

impl MetricsRecord {
    pub fn to_csv_line(&self) -> String {
        format!("{},{:.6},{:.6}", self.epoch, self.train_loss, self.val_accuracy)
    }
}

/// Appends one record, writing the header first when the file is new.
pub fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    use std::io::Write;
    let new_file = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if new_file {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    writeln!(f, "{}", record.to_csv_line())?;
    Ok(())
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    let mut offset = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line_offset = offset;
        offset += line.len() + 1;
        if line.is_empty() || (i == 0 && line == METRICS_HEADER) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                line_offset,
                format!("expected 3 CSV fields, got {}", fields.len()),
            ));
        }
        let parse_err =
            |what: &str| Error::format(line_offset, format!("invalid {what} `{line}`"));
        out.push(MetricsRecord {
            epoch: fields[0].parse().map_err(|_| parse_err("epoch"))?,
            train_loss: fields[1].parse().map_err(|_| parse_err("train_loss"))?,
            val_accuracy: fields[2].parse().map_err(|_| parse_err("val_accuracy"))?,
        });
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    parse_metrics_csv(&std::fs::read_to_string(path)?)
}

/// Side-by-side comparison of two training runs, epoch-aligned:
/// `epoch,<a>_loss,<a>_acc,<b>_loss,<b>_acc`. Rows where one run has no
/// record leave its fields empty.
pub fn fusion_report(
    label_a: &str,
    a: &[MetricsRecord],
    label_b: &str,
    b: &[MetricsRecord],
) -> String {
    let mut s = format!("epoch,{label_a}_loss,{label_a}_acc,{label_b}_loss,{label_b}_acc\n");
    let find = |records: &[MetricsRecord], epoch: usize| {
        records.iter().find(|r| r.epoch == epoch).copied()
    };
    let last = a
        .iter()
        .chain(b)
        .map(|r| r.epoch)
        .max()
        .unwrap_or(0);
    let first = a
        .iter()
        .chain(b)
        .map(|r| r.epoch)
        .min()
        .unwrap_or(0);
    for epoch in first..=last {
        let (ra, rb) = (find(a, epoch), find(b, epoch));
        if ra.is_none() && rb.is_none() {
            continue;
        }
        let cell = |r: Option<MetricsRecord>| match r {
            Some(r) => format!("{:.6},{:.6}", r.train_loss, r.val_accuracy),
            None => ",".to_string(),
        };
        s.push_str(&format!("{epoch},{},{}\n", cell(ra), cell(rb)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let records = [
            MetricsRecord {
                epoch: 0,
                train_loss: 2.079442,
                val_accuracy: 0.125,
            },
            MetricsRecord {
                epoch: 1,
                train_loss: 1.5,
                val_accuracy: 0.5,
            },
        ];
        for r in &records {
            append_metrics(&path, r).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        let parsed = read_metrics(&path).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1].epoch, 1);
        assert!((parsed[0].train_loss - 2.079442).abs() < 1e-9);
    }

    #[test]
    fn report_aligns_epochs() {
        let a = [MetricsRecord {
            epoch: 0,
            train_loss: 2.0,
            val_accuracy: 0.2,
        }];
        let b = [
            MetricsRecord {
                epoch: 0,
                train_loss: 1.9,
                val_accuracy: 0.3,
            },
            MetricsRecord {
                epoch: 1,
                train_loss: 1.0,
                val_accuracy: 0.7,
            },
        ];
        let report = fusion_report("concat", &a, "kron", &b);
        let lines: Vec<&str> = report.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,concat_loss,concat_acc,kron_loss,kron_acc");
        assert!(lines[1].starts_with("0,2.000000,0.200000,1.900000,"));
        assert!(lines[2].starts_with("1,,,1.000000,"));
    }

    #[test]
    fn parse_rejects_malformed_lines() {
        assert!(parse_metrics_csv("epoch,train_loss,val_accuracy\n1,2\n").is_err());
        assert!(parse_metrics_csv("0,abc,0.5\n").is_err());
    }
}
