//! Long-format result tables, aggregation and verdicts.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{summarize, Histogram};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    Accuracy,
    Loss,
    OffdiagRatio,
}

impl Metric {
    pub fn tag(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Accuracy => "accuracy",
            Metric::Loss => "loss",
            Metric::OffdiagRatio => "offdiag_ratio",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub family: String,
    pub noise: String,
    pub photons: f64,
    pub trial: usize,
    pub metric: Metric,
    pub value: f64,
}

/// First line of every CSV this crate writes.
pub fn provenance_line(hash: Option<&str>) -> String {
    match hash {
        Some(h) => format!("# spc {VERSION} config-sha256={h}"),
        None => format!("# spc {VERSION}"),
    }
}

/// Streams result rows to a CSV file, flushing after every batch so a
/// failed run leaves its completed cells on disk.
pub struct ResultWriter {
    inner: csv::Writer<BufWriter<File>>,
    path: std::path::PathBuf,
    rows: usize,
}

impl ResultWriter {
    pub fn create(path: &Path, hash: &str) -> Result<Self> {
        let mut file = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        writeln!(file, "{}", provenance_line(Some(hash))).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner: csv::Writer::from_writer(file),
            path: path.to_path_buf(),
            rows: 0,
        })
    }

    pub fn write_all(&mut self, rows: &[ResultRow]) -> Result<()> {
        for r in rows {
            self.inner.serialize(r)?;
        }
        self.rows += rows.len();
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Appends a `# FAILED` marker line and closes the file.
    pub fn fail(self, err: &Error) -> Result<()> {
        let path = self.path.clone();
        let mut file = self.inner.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        let msg = err.to_string().replace('\n', " ");
        writeln!(file, "# FAILED: {msg}").map_err(|e| Error::io(&path, e))?;
        file.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn finish(mut self) -> Result<usize> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.rows)
    }
}

/// Parses a result CSV; `#` lines are comments. Schema violations carry the
/// 1-based line number.
pub fn read_results<R: Read>(input: R, source_name: &str) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let expected = ["experiment", "family", "noise", "photons", "trial", "metric", "value"];
    let headers = rdr.headers().map_err(|e| csv_line_error(e, source_name))?.clone();
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::ParseLine {
            source_name: source_name.to_string(),
            line: headers.position().map_or(1, |p| p.line()),
            message: format!("expected header {}, got {}", expected.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<ResultRow>() {
        rows.push(rec.map_err(|e| csv_line_error(e, source_name))?);
    }
    Ok(rows)
}

pub fn load_results(path: &Path) -> Result<Vec<ResultRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_results(file, &path.display().to_string())
}

fn csv_line_error(e: csv::Error, source_name: &str) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    let message = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
        _ => e.to_string(),
    };
    Error::ParseLine {
        source_name: source_name.to_string(),
        line,
        message,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub experiment: String,
    pub family: String,
    pub noise: String,
    pub photons: f64,
    pub metric: Metric,
    pub n: usize,
    pub mean: f64,
    /// Undefined for a single value.
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    /// `None` for informational lines without a pass criterion.
    pub passed: Option<bool>,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Relative tolerance on the Poisson HB/RS MSE ratio of 2.
    pub ratio_tolerance: f64,
    /// Allowed accuracy shortfall against the impulse-imaging baseline.
    pub baseline_margin: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            ratio_tolerance: 0.05,
            baseline_margin: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cells: Vec<CellSummary>,
    pub verdicts: Vec<Verdict>,
}

/// Mean and standard error per (experiment, family, noise, photons,
/// metric), in a canonical order independent of the row order.
pub fn aggregate(rows: &[ResultRow]) -> Result<Vec<CellSummary>> {
    let mut keyed: Vec<&ResultRow> = rows.iter().collect();
    let key = |r: &ResultRow| (r.experiment.clone(), r.noise.clone(), r.metric, r.family.clone());
    keyed.sort_by(|a, b| {
        key(a)
            .cmp(&key(b))
            .then(a.photons.total_cmp(&b.photons))
            .then(a.trial.cmp(&b.trial))
    });
    let mut cells = Vec::new();
    let mut i = 0;
    while i < keyed.len() {
        let head = keyed[i];
        let mut j = i;
        while j < keyed.len() && key(keyed[j]) == key(head) && keyed[j].photons == head.photons {
            j += 1;
        }
        let values: Vec<f64> = keyed[i..j].iter().map(|r| r.value).collect();
        let s = summarize(&values)?;
        cells.push(CellSummary {
            experiment: head.experiment.clone(),
            family: head.family.clone(),
            noise: head.noise.clone(),
            photons: head.photons,
            metric: head.metric,
            n: s.n,
            mean: s.mean,
            stderr: s.stderr,
        });
        i = j;
    }
    Ok(cells)
}

fn find<'a>(group: &[&'a CellSummary], family: &str) -> Option<&'a CellSummary> {
    group.iter().copied().find(|c| c.family == family)
}

/// Ratio and ordering checks over aggregated cells.
pub fn verdicts(cells: &[CellSummary], opts: &ReportOptions) -> Vec<Verdict> {
    let mut out = Vec::new();
    let mut groups: Vec<Vec<&CellSummary>> = Vec::new();
    for c in cells {
        match groups.iter_mut().find(|g| {
            let h = g[0];
            h.experiment == c.experiment && h.noise == c.noise && h.metric == c.metric && h.photons == c.photons
        }) {
            Some(g) => g.push(c),
            None => groups.push(vec![c]),
        }
    }
    for g in &groups {
        let h = g[0];
        let at = format!("{} {} photons={:e}", h.experiment, h.noise, h.photons);
        match h.metric {
            Metric::Mse => {
                if let (Some(hb), Some(rs)) = (find(g, "HB"), find(g, "RS")) {
                    let ratio = hb.mean / rs.mean;
                    let passed = (h.noise == "poisson")
                        .then(|| (ratio / 2.0 - 1.0).abs() <= opts.ratio_tolerance);
                    out.push(Verdict {
                        check: "HB/RS mse ratio".into(),
                        passed,
                        detail: format!("{at}: {ratio:.4}"),
                    });
                }
            }
            Metric::Accuracy => {
                if let (Some(onn), Some(pca), Some(th)) = (find(g, "ONN"), find(g, "PCA"), find(g, "TH")) {
                    out.push(Verdict {
                        check: "ONN >= PCA > TH".into(),
                        passed: Some(onn.mean >= pca.mean && pca.mean > th.mean),
                        detail: format!("{at}: ONN {:.4}, PCA {:.4}, TH {:.4}", onn.mean, pca.mean, th.mean),
                    });
                }
                if let Some(ii) = find(g, "II") {
                    for c in g.iter().filter(|c| c.family != "II") {
                        out.push(Verdict {
                            check: format!("{} within {:.0} pp of II", c.family, opts.baseline_margin * 100.0),
                            passed: Some(c.mean >= ii.mean - opts.baseline_margin),
                            detail: format!("{at}: {} {:.4}, II {:.4}", c.family, c.mean, ii.mean),
                        });
                    }
                }
            }
            _ => {}
        }
    }
    out
}

pub fn report(rows: &[ResultRow], opts: &ReportOptions) -> Result<Report> {
    let cells = aggregate(rows)?;
    let verdicts = verdicts(&cells, opts);
    Ok(Report { cells, verdicts })
}

pub fn write_cells_csv<W: Write>(cells: &[CellSummary], mut out: W) -> Result<()> {
    writeln!(out, "{}", provenance_line(None)).map_err(|e| Error::io("<summary csv>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["experiment", "family", "noise", "photons", "metric", "n", "mean", "stderr"])?;
    for c in cells {
        w.write_record([
            c.experiment.clone(),
            c.family.clone(),
            c.noise.clone(),
            c.photons.to_string(),
            c.metric.tag().to_string(),
            c.n.to_string(),
            c.mean.to_string(),
            c.stderr.map_or_else(String::new, |s| s.to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<summary csv>", e))
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "INFO",
        };
        write!(f, "[{tag}] {}: {}", self.check, self.detail)
    }
}

pub fn write_histogram_csv<W: Write>(h: &Histogram, hash: Option<&str>, mut out: W) -> Result<()> {
    writeln!(out, "{}", provenance_line(hash)).map_err(|e| Error::io("<histogram csv>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["center", "count"])?;
    for (c, n) in h.centers.iter().zip(&h.counts) {
        w.write_record([c.to_string(), n.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<histogram csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(family: &str, photons: f64, trial: usize, metric: Metric, value: f64) -> ResultRow {
        ResultRow {
            experiment: "e".into(),
            family: family.into(),
            noise: "poisson".into(),
            photons,
            trial,
            metric,
            value,
        }
    }

    #[test]
    fn single_row_has_undefined_stderr() {
        let cells = aggregate(&[row("RS", 10.0, 0, Metric::Mse, 0.25)]).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!((cells[0].n, cells[0].mean, cells[0].stderr), (1, 0.25, None));
    }

    #[test]
    fn identical_trials_have_zero_stderr() {
        let rows = [row("RS", 10.0, 0, Metric::Mse, 0.5), row("RS", 10.0, 1, Metric::Mse, 0.5)];
        assert_eq!(aggregate(&rows).unwrap()[0].stderr, Some(0.0));
    }

    #[test]
    fn known_mean_and_stderr() {
        // values 1, 2, 3, 6: mean 3, sample variance 14/3, stderr sqrt(14/12)
        let rows: Vec<_> = [1.0, 2.0, 3.0, 6.0]
            .iter()
            .enumerate()
            .map(|(t, v)| row("HB", 1e3, t, Metric::Loss, *v))
            .collect();
        let c = &aggregate(&rows).unwrap()[0];
        assert_eq!(c.mean, 3.0);
        assert!((c.stderr.unwrap() - (14.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn aggregation_ignores_row_order() {
        let mut rows = vec![
            row("RS", 10.0, 0, Metric::Mse, 1.0),
            row("HB", 10.0, 0, Metric::Mse, 2.0),
            row("RS", 100.0, 0, Metric::Mse, 3.0),
            row("RS", 10.0, 1, Metric::Mse, 4.0),
        ];
        let a = aggregate(&rows).unwrap();
        rows.reverse();
        assert_eq!(a, aggregate(&rows).unwrap());
    }

    #[test]
    fn ratio_and_ordering_verdicts() {
        let rows = vec![
            row("RS", 10.0, 0, Metric::Mse, 1.0),
            row("HB", 10.0, 0, Metric::Mse, 2.04),
            row("ONN", 1e5, 0, Metric::Accuracy, 0.9),
            row("PCA", 1e5, 0, Metric::Accuracy, 0.89),
            row("TH", 1e5, 0, Metric::Accuracy, 0.8),
            row("II", 1e5, 0, Metric::Accuracy, 0.91),
        ];
        let r = report(&rows, &ReportOptions::default()).unwrap();
        let v: Vec<String> = r.verdicts.iter().map(|v| v.to_string()).collect();
        assert!(v.iter().any(|s| s.starts_with("[PASS] HB/RS mse ratio") && s.contains("2.0400")), "{v:?}");
        assert!(v.iter().any(|s| s.starts_with("[PASS] ONN >= PCA > TH")), "{v:?}");
        assert!(v.iter().any(|s| s.starts_with("[PASS] PCA within 3 pp of II")), "{v:?}");
        assert!(v.iter().any(|s| s.starts_with("[FAIL] TH within 3 pp of II")), "{v:?}");
    }

    #[test]
    fn csv_round_trip_with_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![row("RS", 1e10, 3, Metric::OffdiagRatio, 0.1 + 0.2)];
        let mut w = ResultWriter::create(&path, "abc").unwrap();
        w.write_all(&rows).unwrap();
        w.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# spc "));
        assert!(text.contains("config-sha256=abc"));
        assert!(text.contains("offdiag_ratio"));
        assert_eq!(load_results(&path).unwrap(), rows);
    }

    #[test]
    fn failure_marker_keeps_completed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut w = ResultWriter::create(&path, "h").unwrap();
        w.write_all(&[row("RS", 1.0, 0, Metric::Mse, 1.0)]).unwrap();
        w.fail(&Error::Config("boom".into())).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.trim_end().ends_with("# FAILED: configuration error: boom"));
        assert_eq!(load_results(&path).unwrap().len(), 1);
    }

    #[test]
    fn schema_violation_reports_line() {
        let text = "experiment,family,noise,photons,trial,metric,value\ne,RS,poisson,10,0,mse,1\ne,RS,poisson,10,0,psnr,1\n";
        match read_results(text.as_bytes(), "x.csv") {
            Err(Error::ParseLine { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let bad_header = "a,b\n1,2\n";
        assert!(matches!(read_results(bad_header.as_bytes(), "y"), Err(Error::ParseLine { line: 1, .. })));
    }
}
