//! Verification reports: every estimate carries a standard error, every
//! pass/fail traces to a named tolerance, and emission is bit-stable for a
//! given report (JSON + Markdown + CSV sample dumps + plot-data CSVs).

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub target: f64,
    /// The named tolerance this check traces to, e.g. "example31_rel=0.1".
    pub tolerance: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub label: String,
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableData {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Raw replication samples destined for CSV (not embedded in the JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDump {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvInfo {
    pub package_version: String,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub criteria: Vec<CriterionResult>,
    pub estimates: Vec<Estimate>,
    pub tables: Vec<TableData>,
    /// Names and shapes of the CSV sample dumps emitted alongside.
    pub sample_index: Vec<String>,
    pub environment: EnvInfo,
    #[serde(skip)]
    pub samples: Vec<SampleDump>,
}

impl VerificationReport {
    pub fn new(experiment: impl Into<String>, config_hash: String, seed: u64) -> Self {
        VerificationReport {
            experiment: experiment.into(),
            config_hash,
            seed,
            criteria: Vec::new(),
            estimates: Vec::new(),
            tables: Vec::new(),
            sample_index: Vec::new(),
            environment: EnvInfo {
                package_version: env!("CARGO_PKG_VERSION").to_string(),
                threads: rayon::current_num_threads(),
            },
            samples: Vec::new(),
        }
    }

    pub fn push_estimate(&mut self, label: impl Into<String>, value: f64, se: f64) {
        self.estimates.push(Estimate {
            label: label.into(),
            value,
            se,
        });
    }

    pub fn push_criterion(
        &mut self,
        name: impl Into<String>,
        passed: bool,
        observed: f64,
        target: f64,
        tolerance: impl Into<String>,
        detail: impl Into<String>,
    ) {
        self.criteria.push(CriterionResult {
            name: name.into(),
            passed,
            observed,
            target,
            tolerance: tolerance.into(),
            detail: detail.into(),
        });
    }

    pub fn push_sample(&mut self, dump: SampleDump) {
        self.sample_index
            .push(format!("{} ({} rows)", dump.name, dump.rows.len()));
        self.samples.push(dump);
    }

    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {} report", self.experiment);
        let _ = writeln!(out);
        let _ = writeln!(out, "- config hash: `{}`", self.config_hash);
        let _ = writeln!(out, "- seed: {}", self.seed);
        let _ = writeln!(
            out,
            "- package: {} ({} threads)",
            self.environment.package_version, self.environment.threads
        );
        if !self.criteria.is_empty() {
            let _ = writeln!(out, "\n## Criteria\n");
            let _ = writeln!(out, "| criterion | status | observed | target | tolerance |");
            let _ = writeln!(out, "|---|---|---|---|---|");
            for c in &self.criteria {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} |",
                    c.name,
                    if c.passed { "pass" } else { "FAIL" },
                    c.observed,
                    c.target,
                    c.tolerance
                );
            }
        }
        if !self.estimates.is_empty() {
            let _ = writeln!(out, "\n## Estimates\n");
            let _ = writeln!(out, "| label | value | se |");
            let _ = writeln!(out, "|---|---|---|");
            for e in &self.estimates {
                let _ = writeln!(out, "| {} | {} | {} |", e.label, e.value, e.se);
            }
        }
        for t in &self.tables {
            let _ = writeln!(out, "\n## {}\n", t.name);
            let _ = writeln!(out, "| {} |", t.columns.join(" | "));
            let _ = writeln!(
                out,
                "|{}|",
                t.columns.iter().map(|_| "---").collect::<Vec<_>>().join("|")
            );
            for row in &t.rows {
                let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                let _ = writeln!(out, "| {} |", cells.join(" | "));
            }
        }
        if !self.sample_index.is_empty() {
            let _ = writeln!(out, "\n## Samples\n");
            for s in &self.sample_index {
                let _ = writeln!(out, "- {s}");
            }
        }
        out
    }
}

fn csv_of(columns: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    out.push_str(&columns.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Equal-width histogram plot data (bin_lo, bin_hi, count).
pub fn histogram_rows(values: &[f64], bins: usize) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || lo == hi {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let mut b = ((v - lo) / width) as usize;
        if b >= bins {
            b = bins - 1;
        }
        counts[b] += 1;
    }
    let rows = (0..bins)
        .map(|b| {
            vec![
                lo + b as f64 * width,
                lo + (b + 1) as f64 * width,
                counts[b] as f64,
            ]
        })
        .collect();
    (
        vec!["bin_lo".into(), "bin_hi".into(), "count".into()],
        rows,
    )
}

/// Normal QQ plot data: (theoretical quantile of N(0, sd²), sorted sample).
pub fn qq_rows(values: &[f64], sd: f64) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let rows = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = (i as f64 + 0.5) / n as f64;
            vec![sd * normal_quantile(p), v]
        })
        .collect();
    (vec!["theoretical".into(), "empirical".into()], rows)
}

/// Acklam-style rational approximation of the standard normal quantile
/// (absolute error below 1.2e-9, ample for plot data).
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    let plow = 0.02425;
    if p < plow {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - plow {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

/// Write report.json, report.md, per-sample CSVs and plot-data CSVs into
/// `dir`. Byte-stable for a given report.
pub fn emit_report(report: &VerificationReport, dir: &Path) -> io::Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let json_path = dir.join("report.json");
    fs::write(&json_path, report.to_json())?;
    written.push(json_path.display().to_string());
    let md_path = dir.join("report.md");
    fs::write(&md_path, report.to_markdown())?;
    written.push(md_path.display().to_string());
    if !report.samples.is_empty() {
        let samples_dir = dir.join("samples");
        let plots_dir = dir.join("plots");
        fs::create_dir_all(&samples_dir)?;
        fs::create_dir_all(&plots_dir)?;
        for dump in &report.samples {
            let path = samples_dir.join(format!("{}.csv", dump.name));
            fs::write(&path, csv_of(&dump.columns, &dump.rows))?;
            written.push(path.display().to_string());
            // Plot data for the first column of each dump.
            if !dump.rows.is_empty() && !dump.rows[0].is_empty() {
                let col: Vec<f64> = dump.rows.iter().map(|r| r[0]).collect();
                let (hc, hr) = histogram_rows(&col, 40);
                let hpath = plots_dir.join(format!("{}_hist.csv", dump.name));
                fs::write(&hpath, csv_of(&hc, &hr))?;
                written.push(hpath.display().to_string());
                let sd = fluctlab_core::statistics::variance(&col).sqrt();
                let (qc, qr) = qq_rows(&col, if sd > 0.0 { sd } else { 1.0 });
                let qpath = plots_dir.join(format!("{}_qq.csv", dump.name));
                fs::write(&qpath, csv_of(&qc, &qr))?;
                written.push(qpath.display().to_string());
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_report() -> VerificationReport {
        let mut r = VerificationReport::new("demo", "abc".into(), 5);
        r.push_estimate("x", 1.25, 0.01);
        r.push_criterion("check", true, 1.25, 1.3, "rel=0.1", "ok");
        r.tables.push(TableData {
            name: "matrix".into(),
            columns: vec!["a".into(), "b".into()],
            rows: vec![vec![1.0, 2.0]],
        });
        r.push_sample(SampleDump {
            name: "xs".into(),
            columns: vec!["v".into()],
            rows: (0..100).map(|i| vec![i as f64 * 0.01]).collect(),
        });
        r
    }

    #[test]
    fn empty_report_is_valid() {
        let r = VerificationReport::new("empty", "h".into(), 0);
        assert!(r.all_passed());
        let json = r.to_json();
        assert!(json.contains("\"criteria\": []"));
        let md = r.to_markdown();
        assert!(md.starts_with("# empty report"));
    }

    #[test]
    fn emission_is_bit_stable() {
        let r = demo_report();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        emit_report(&r, d1.path()).unwrap();
        emit_report(&r, d2.path()).unwrap();
        for name in ["report.json", "report.md"] {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
        let a = fs::read(d1.path().join("samples/xs.csv")).unwrap();
        let b = fs::read(d2.path().join("samples/xs.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_roundtrips() {
        let r = demo_report();
        let back: VerificationReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back.criteria, r.criteria);
        assert_eq!(back.estimates, r.estimates);
        assert_eq!(back.tables, r.tables);
        assert_eq!(back.config_hash, r.config_hash);
    }

    #[test]
    fn histogram_and_qq_shapes() {
        let vals: Vec<f64> = (0..1000).map(|i| (i as f64) / 100.0).collect();
        let (hc, hr) = histogram_rows(&vals, 20);
        assert_eq!(hc.len(), 3);
        assert_eq!(hr.len(), 20);
        let total: f64 = hr.iter().map(|r| r[2]).sum();
        assert_eq!(total, 1000.0);
        let (qc, qr) = qq_rows(&vals, 1.0);
        assert_eq!(qc.len(), 2);
        assert_eq!(qr.len(), 1000);
    }

    #[test]
    fn normal_quantile_reference() {
        assert!((normal_quantile(0.5)).abs() < 1e-12);
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-5);
        assert!((normal_quantile(0.025) + 1.959964).abs() < 1e-5);
    }
}
