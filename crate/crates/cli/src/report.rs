//! Aggregation of per-scene evaluation reports into text and CSV tables.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::{EvalReport, RE_BUCKETS_DEG, TE_BUCKETS};

/// One table row: the headline numbers of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub name: String,
    pub rr: f64,
    pub rr_translation_only: f64,
    pub mean_re_deg: f64,
    pub median_re_deg: f64,
    pub mean_te: f64,
    pub median_te: f64,
    pub re_ecdf: [f64; 5],
    pub te_ecdf: [f64; 5],
}

impl Row {
    fn from_report(name: &str, r: &EvalReport) -> Self {
        let take = |b: &[crate::eval::Bucket]| -> [f64; 5] { std::array::from_fn(|i| b.get(i).map_or(0.0, |x| x.fraction)) };
        Row {
            name: name.to_string(),
            rr: r.rr,
            rr_translation_only: r.rr_translation_only,
            mean_re_deg: r.mean_re_deg,
            median_re_deg: r.median_re_deg,
            mean_te: r.mean_te,
            median_te: r.median_te,
            re_ecdf: take(&r.re_ecdf),
            te_ecdf: take(&r.te_ecdf),
        }
    }

    fn values(&self) -> Vec<f64> {
        let mut v = vec![
            self.rr,
            self.rr_translation_only,
            self.mean_re_deg,
            self.median_re_deg,
            self.mean_te,
            self.median_te,
        ];
        v.extend(self.re_ecdf);
        v.extend(self.te_ecdf);
        v
    }

    fn from_values(name: &str, v: &[f64]) -> Self {
        Row {
            name: name.to_string(),
            rr: v[0],
            rr_translation_only: v[1],
            mean_re_deg: v[2],
            median_re_deg: v[3],
            mean_te: v[4],
            median_te: v[5],
            re_ecdf: std::array::from_fn(|i| v[6 + i]),
            te_ecdf: std::array::from_fn(|i| v[11 + i]),
        }
    }
}

pub fn columns() -> Vec<String> {
    let mut c: Vec<String> = ["rr", "rr_t", "mean_re", "med_re", "mean_te", "med_te"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    c.extend(RE_BUCKETS_DEG.iter().map(|t| format!("re<={t}")));
    c.extend(TE_BUCKETS.iter().map(|t| format!("te<={t}")));
    c
}

/// Per-report rows plus their column means.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<Row>,
    pub mean: Row,
}

pub fn aggregate(reports: &[(String, EvalReport)]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rows: Vec<Row> = reports.iter().map(|(n, r)| Row::from_report(n, r)).collect();
    let width = rows[0].values().len();
    let mut sum = vec![0.0; width];
    for r in &rows {
        for (s, v) in sum.iter_mut().zip(r.values()) {
            *s += v;
        }
    }
    let k = rows.len() as f64;
    let means: Vec<f64> = sum.iter().map(|s| s / k).collect();
    Ok(Summary {
        mean: Row::from_values("mean", &means),
        rows,
    })
}

impl Summary {
    pub fn to_text(&self) -> String {
        let cols = columns();
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}", "scene");
        for c in &cols {
            let _ = write!(out, " {c:>9}");
        }
        out.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let _ = write!(out, "{:<name_w$}", r.name);
            for v in r.values() {
                let _ = write!(out, " {v:>9.4}");
            }
            out.push('\n');
        }
        out
    }

    /// Full-precision CSV with a trailing `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene");
        for c in columns() {
            out.push(',');
            out.push_str(&c);
        }
        out.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&r.name.replace(',', "_"));
            for v in r.values() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate, EvalThresholds};
    use mdgd_core::geometry::RigidPose;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn report(seed: u64) -> EvalReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<RigidPose> = (0..6).map(|_| RigidPose::random(&mut rng, 3.0)).collect();
        let pred: Vec<RigidPose> = gt.iter().map(|p| p.compose(&RigidPose::random(&mut rng, 0.2))).collect();
        evaluate(
            &pred,
            &gt,
            EvalThresholds {
                te: 0.2,
                re_gate_deg: 15.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn single_report_is_its_own_mean() {
        let r = report(1);
        let s = aggregate(&[("a".into(), r.clone())]).unwrap();
        assert_eq!(s.mean.values(), s.rows[0].values());
        assert_eq!(s.mean.rr, r.rr);
        assert_eq!(s.mean.median_te, r.median_te);
    }

    #[test]
    fn identical_reports_average_to_either() {
        let r = report(2);
        let s = aggregate(&[("a".into(), r.clone()), ("b".into(), r)]).unwrap();
        assert_eq!(s.mean.values(), s.rows[0].values());
    }

    #[test]
    fn mixed_reports_match_column_recomputation() {
        let rs: Vec<(String, EvalReport)> = (0..5).map(|i| (format!("s{i}"), report(10 + i))).collect();
        let s = aggregate(&rs).unwrap();
        let col = |f: &dyn Fn(&EvalReport) -> f64| rs.iter().map(|(_, r)| f(r)).sum::<f64>() / 5.0;
        assert!((s.mean.mean_re_deg - col(&|r| r.mean_re_deg)).abs() < 1e-9);
        assert!((s.mean.median_te - col(&|r| r.median_te)).abs() < 1e-9);
        assert!((s.mean.rr - col(&|r| r.rr)).abs() < 1e-9);
        assert!((s.mean.te_ecdf[3] - col(&|r| r.te_ecdf[3].fraction)).abs() < 1e-9);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(aggregate(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn csv_has_one_line_per_report_plus_mean() {
        let rs: Vec<(String, EvalReport)> = (0..3).map(|i| (format!("s{i}"), report(i))).collect();
        let s = aggregate(&rs).unwrap();
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("mean,"));
        assert_eq!(lines[0].split(',').count(), 1 + columns().len());
        let parsed: f64 = lines[1].split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(parsed, rs[0].1.mean_re_deg);
        assert_eq!(s.to_text().lines().count(), 5);
    }
}
