//! Report emission: JSON documents, versioned CSV tables with
//! full-precision scientific formatting, and JUnit-style XML summaries.
//! Reports carry no timestamps so that reruns are byte-identical.

use anyhow::{Context, Result};
use qliom_core::verify::{CheckResult, CheckStatus};
use serde::Serialize;
use std::io::Write;
use std::path::Path;

pub const CSV_SCHEMA_VERSION: &str = "v1";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).context("serialize report")?;
    std::fs::write(path, text.as_bytes())
        .with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

/// Locale-independent full-precision float cell.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

pub struct CsvTable {
    writer: csv::Writer<std::fs::File>,
}

impl CsvTable {
    /// Create `<stem>.<version>.csv` in `dir` with the given header row.
    pub fn create(dir: &Path, stem: &str, header: &[&str]) -> Result<Self> {
        let path = dir.join(format!("{stem}.{CSV_SCHEMA_VERSION}.csv"));
        let file = std::fs::File::create(&path)
            .with_context(|| format!("create {}", path.display()))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header)?;
        Ok(Self { writer })
    }

    pub fn row(&mut self, cells: &[String]) -> Result<()> {
        self.writer.write_record(cells)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// JUnit-style summary: one testcase per check, failures carry the measured
/// value and tolerance in the message.
pub fn write_junit(path: &Path, suite_name: &str, checks: &[(String, CheckResult)]) -> Result<()> {
    let failures = checks.iter().filter(|(_, c)| c.status == CheckStatus::Fail).count();
    let skipped = checks.iter().filter(|(_, c)| c.status == CheckStatus::Skipped).count();
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str(&format!(
        "<testsuite name=\"{}\" tests=\"{}\" failures=\"{}\" skipped=\"{}\">\n",
        xml_escape(suite_name),
        checks.len(),
        failures,
        skipped
    ));
    for (case, check) in checks {
        let name = xml_escape(case);
        match check.status {
            CheckStatus::Fail => {
                out.push_str(&format!(
                    "  <testcase name=\"{name}\"><failure message=\"{}\">measured={:?} reference={:?} tolerance={:?}</failure></testcase>\n",
                    xml_escape(&check.detail),
                    check.measured,
                    check.reference,
                    check.tolerance
                ));
            }
            CheckStatus::Skipped => {
                out.push_str(&format!(
                    "  <testcase name=\"{name}\"><skipped message=\"{}\"/></testcase>\n",
                    xml_escape(&check.detail)
                ));
            }
            CheckStatus::Pass | CheckStatus::Info => {
                out.push_str(&format!("  <testcase name=\"{name}\"/>\n"));
            }
        }
    }
    out.push_str("</testsuite>\n");
    let mut file = std::fs::File::create(path)
        .with_context(|| format!("create {}", path.display()))?;
    file.write_all(out.as_bytes())?;
    Ok(())
}
