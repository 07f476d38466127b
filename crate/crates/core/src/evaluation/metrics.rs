use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, io_err, Error, Result};

/// Mean absolute error.
pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    contract!(
        preds.len() == labels.len(),
        "{} predictions for {} labels",
        preds.len(),
        labels.len()
    );
    contract!(!preds.is_empty(), "MAE of an empty set");
    Ok(preds
        .iter()
        .zip(labels)
        .map(|(p, l)| (p - l).abs())
        .sum::<f64>()
        / preds.len() as f64)
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(preds: &[f64], labels: &[f64]) -> Result<f64> {
    contract!(
        preds.len() == labels.len(),
        "{} predictions for {} labels",
        preds.len(),
        labels.len()
    );
    contract!(preds.len() >= 2, "R² needs at least two samples");
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let ss_tot: f64 = labels.iter().map(|l| (l - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Numeric("R² is undefined for constant labels".into()));
    }
    let ss_res: f64 = preds.iter().zip(labels).map(|(p, l)| (p - l).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Evaluation summary of one run, or the mean of several seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub mae: Option<f64>,
    pub r2: Option<f64>,
    pub dice_ed: Option<f64>,
    pub dice_es: Option<f64>,
    pub dice_unlabeled: Option<f64>,
    /// Number of test sequences.
    pub n: usize,
    pub seeds: Vec<u64>,
}

#[derive(Serialize)]
struct ReportRow<'a> {
    name: &'a str,
    mae: Option<f64>,
    r2: Option<f64>,
    dice_ed: Option<f64>,
    dice_es: Option<f64>,
    dice_unlabeled: Option<f64>,
    n: usize,
    seeds: String,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.mae {
            contract!(m >= 0.0, "negative MAE {m}");
        }
        if let Some(r) = self.r2 {
            contract!(r <= 1.0, "R² above one: {r}");
        }
        for d in [self.dice_ed, self.dice_es, self.dice_unlabeled]
            .into_iter()
            .flatten()
        {
            contract!((0.0..=1.0).contains(&d), "Dice {d} outside [0, 1]");
        }
        Ok(())
    }

    /// Field-wise mean over runs; a field is kept only if every run has it.
    pub fn mean(name: impl Into<String>, runs: &[MetricReport]) -> Result<Self> {
        contract!(!runs.is_empty(), "no runs to average");
        let avg = |f: fn(&MetricReport) -> Option<f64>| -> Option<f64> {
            let vals: Option<Vec<f64>> = runs.iter().map(f).collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        Ok(Self {
            name: name.into(),
            mae: avg(|r| r.mae),
            r2: avg(|r| r.r2),
            dice_ed: avg(|r| r.dice_ed),
            dice_es: avg(|r| r.dice_es),
            dice_unlabeled: avg(|r| r.dice_unlabeled),
            n: runs[0].n,
            seeds: runs.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
        })
    }

    /// One line per populated metric.
    pub fn summary(&self) -> String {
        let mut out = format!("{} (n={}, seeds {:?})\n", self.name, self.n, self.seeds);
        let fields = [
            ("MAE", self.mae, 1.0, ""),
            ("R2", self.r2, 100.0, "%"),
            ("Dice ED", self.dice_ed, 100.0, "%"),
            ("Dice ES", self.dice_es, 100.0, "%"),
            ("Dice unlabeled", self.dice_unlabeled, 100.0, "%"),
        ];
        for (label, v, k, unit) in fields {
            if let Some(v) = v {
                out.push_str(&format!("  {label:<15} {:.2}{unit}\n", v * k));
            }
        }
        out
    }
}

/// Writes reports as CSV, one row each.
pub fn write_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(ReportRow {
            name: &r.name,
            mae: r.mae,
            r2: r.r2,
            dice_ed: r.dice_ed,
            dice_es: r.dice_es,
            dice_unlabeled: r.dice_unlabeled,
            n: r.n,
            seeds: r
                .seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(" "),
        })?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[50.0, 60.0], &[55.0, 65.0]).unwrap(), 5.0);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn r_squared_examples() {
        let labels = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&labels, &labels).unwrap(), 1.0);
        assert_eq!(r_squared(&[2.0; 3], &labels).unwrap(), 0.0);
        assert!((r_squared(&[1.0, 2.0, 4.0], &labels).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            r_squared(&[1.0, 2.0], &[3.0, 3.0]),
            Err(Error::Numeric(_))
        ));
        assert!(r_squared(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn mean_report_and_csv() {
        let a = MetricReport {
            name: "a".into(),
            mae: Some(4.0),
            r2: Some(0.5),
            n: 3,
            seeds: vec![1],
            ..Default::default()
        };
        let b = MetricReport {
            mae: Some(6.0),
            r2: None,
            seeds: vec![2],
            ..a.clone()
        };
        let m = MetricReport::mean("avg", &[a, b]).unwrap();
        assert_eq!(m.mae, Some(5.0));
        assert_eq!(m.r2, None);
        assert_eq!(m.seeds, vec![1, 2]);
        m.validate().unwrap();
        assert!(m.summary().contains("MAE"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_reports(&path, &[m]).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("name,mae,r2,dice_ed,dice_es,dice_unlabeled,n,seeds"));
        assert!(text.contains("avg,5.0,,,,,3,1 2"));
    }

    #[test]
    fn invalid_reports_are_caught() {
        let r = MetricReport {
            dice_ed: Some(1.5),
            ..Default::default()
        };
        assert!(r.validate().is_err());
    }
}
