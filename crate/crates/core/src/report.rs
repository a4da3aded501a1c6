//! Vulnerability report: rows extracted from the run log by the report
//! generator, validated and written as CSV.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::llm::{AgentRole, Gateway, LlmError};
use crate::runlog::IterationRecord;
use crate::text::fenced_blocks;

pub const REPORT_HEADER: [&str; 14] = [
    "CVE number",
    "CVSS score",
    "Risk level",
    "Protocol",
    "Port",
    "Vulnerability name",
    "Synopsis",
    "Description",
    "Solution",
    "Hostname",
    "IP address",
    "OS",
    "Reference URL",
    "VPR",
];

/// Reply keys, in column order.
const KEYS: [&str; 14] = [
    "cve_number",
    "cvss_score",
    "risk_level",
    "protocol",
    "port",
    "vulnerability_name",
    "synopsis",
    "description",
    "solution",
    "hostname",
    "ip_address",
    "os",
    "reference_url",
    "vpr",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("header differs from the report header")]
    Header,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RiskLevel {
    Critical,
    High,
    Medium,
    Low,
    Info,
}

impl RiskLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskLevel::Critical => "Critical",
            RiskLevel::High => "High",
            RiskLevel::Medium => "Medium",
            RiskLevel::Low => "Low",
            RiskLevel::Info => "Info",
        }
    }

    /// 9+ Critical, 7+ High, 4+ Medium, 0.1+ Low, otherwise Info.
    pub fn from_cvss(score: Option<f64>) -> Self {
        match score {
            Some(s) if s >= 9.0 => RiskLevel::Critical,
            Some(s) if s >= 7.0 => RiskLevel::High,
            Some(s) if s >= 4.0 => RiskLevel::Medium,
            Some(s) if s >= 0.1 => RiskLevel::Low,
            _ => RiskLevel::Info,
        }
    }
}

impl fmt::Display for RiskLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RiskLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "critical" => RiskLevel::Critical,
            "high" => RiskLevel::High,
            "medium" | "moderate" => RiskLevel::Medium,
            "low" => RiskLevel::Low,
            "info" | "informational" | "none" => RiskLevel::Info,
            other => return Err(format!("unknown risk level {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityRecord {
    pub cve_number: String,
    pub cvss_score: Option<f64>,
    pub risk_level: RiskLevel,
    pub protocol: String,
    pub port: Option<u16>,
    pub vulnerability_name: String,
    pub synopsis: String,
    pub description: String,
    pub solution: String,
    pub hostname: String,
    pub ip_address: String,
    pub os: String,
    pub reference_url: String,
    pub vpr: Option<f64>,
}

impl VulnerabilityRecord {
    fn fields(&self) -> [String; 14] {
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.cve_number.clone(),
            num(self.cvss_score),
            self.risk_level.to_string(),
            self.protocol.clone(),
            self.port.map(|p| p.to_string()).unwrap_or_default(),
            self.vulnerability_name.clone(),
            self.synopsis.clone(),
            self.description.clone(),
            self.solution.clone(),
            self.hostname.clone(),
            self.ip_address.clone(),
            self.os.clone(),
            self.reference_url.clone(),
            num(self.vpr),
        ]
    }

    fn dedup_key(&self) -> (String, Option<u16>, String) {
        (
            self.cve_number.to_ascii_uppercase(),
            self.port,
            self.vulnerability_name.trim().to_ascii_lowercase(),
        )
    }
}

fn cve_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^CVE-\d{4}-\d{4,}$").expect("cve regex"))
}

fn score(v: &str, what: &str) -> Result<Option<f64>, String> {
    if v.is_empty() {
        return Ok(None);
    }
    let s: f64 = v.parse().map_err(|_| format!("{what} {v:?} is not a number"))?;
    if !(0.0..=10.0).contains(&s) {
        return Err(format!("{what} {s} outside 0-10"));
    }
    Ok(Some(s))
}

/// Validates one row given as 14 column strings. Returns the record and
/// whether the risk level was derived from the score.
pub fn validate_row(cols: &[String; 14], targets: &[String]) -> Result<(VulnerabilityRecord, bool), String> {
    let c = |i: usize| cols[i].trim().to_string();
    let cve = c(0).to_ascii_uppercase();
    if !cve.is_empty() && !cve_re().is_match(&cve) {
        return Err(format!("malformed CVE number {cve:?}"));
    }
    let cvss_score = score(&c(1), "CVSS score")?;
    let (risk_level, derived) = if c(2).is_empty() {
        (RiskLevel::from_cvss(cvss_score), true)
    } else {
        (c(2).parse::<RiskLevel>()?, false)
    };
    let port = match c(4) {
        p if p.is_empty() => None,
        p => Some(p.parse::<u16>().map_err(|_| format!("port {p:?} is not a port number"))?),
    };
    let name = c(5);
    if name.is_empty() {
        return Err("vulnerability name is empty".into());
    }
    let mut ip = c(10);
    if ip.is_empty() {
        match targets {
            [only] => ip = only.clone(),
            _ => return Err("IP address is empty".into()),
        }
    }
    if !targets.iter().any(|t| t.eq_ignore_ascii_case(&ip)) {
        return Err(format!("IP address {ip} is not a scoped target"));
    }
    Ok((
        VulnerabilityRecord {
            cve_number: cve,
            cvss_score,
            risk_level,
            protocol: c(3),
            port,
            vulnerability_name: name,
            synopsis: c(6),
            description: c(7),
            solution: c(8),
            hostname: c(9),
            ip_address: ip,
            os: c(11),
            reference_url: c(12),
            vpr: score(&c(13), "VPR")?,
        },
        derived,
    ))
}

pub fn write_csv<W: std::io::Write>(out: W, rows: &[VulnerabilityRecord]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush().map_err(|e| ReportError::Csv(e.into()))?;
    Ok(())
}

pub fn report_to_string(rows: &[VulnerabilityRecord]) -> Result<String, ReportError> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    String::from_utf8(buf).map_err(|e| ReportError::Io {
        path: PathBuf::new(),
        message: e.to_string(),
    })
}

/// Parses a report; the header must match exactly.
pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<VulnerabilityRecord>, ReportError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    if r.headers()?.iter().ne(REPORT_HEADER) {
        return Err(ReportError::Header);
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let cols: [String; 14] = std::array::from_fn(|j| rec.get(j).unwrap_or("").to_string());
        let c = |j: usize| cols[j].as_str();
        let bad = |message: String| ReportError::Row { row: i + 1, message };
        rows.push(VulnerabilityRecord {
            cve_number: c(0).into(),
            cvss_score: score(c(1), "CVSS score").map_err(bad)?,
            risk_level: c(2).parse().map_err(bad)?,
            protocol: c(3).into(),
            port: if c(4).is_empty() {
                None
            } else {
                Some(c(4).parse().map_err(|_| bad(format!("bad port {:?}", c(4))))?)
            },
            vulnerability_name: c(5).into(),
            synopsis: c(6).into(),
            description: c(7).into(),
            solution: c(8).into(),
            hostname: c(9).into(),
            ip_address: c(10).into(),
            os: c(11).into(),
            reference_url: c(12).into(),
            vpr: score(c(13), "VPR").map_err(bad)?,
        });
    }
    Ok(rows)
}

fn value_text(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(Value::Bool(b)) => b.to_string(),
        Some(other) => other.to_string(),
    }
}

fn parse_rows(reply: &str) -> Option<Vec<Value>> {
    for (_, body) in fenced_blocks(reply) {
        if let Ok(Value::Array(a)) = serde_json::from_str(&body) {
            return Some(a);
        }
    }
    let start = reply.find('[')?;
    let end = reply.rfind(']')?;
    match serde_json::from_str(reply.get(start..=end)?) {
        Ok(Value::Array(a)) => Some(a),
        _ => None,
    }
}

fn report_prompt(records: &[IterationRecord], targets: &[String]) -> String {
    let mut p = format!("Scoped targets: {}\n\n", targets.join(", "));
    if let Some(last) = records.last() {
        p.push_str(&format!("Final task tree:\n```ptt\n{}```\n\n", last.ptt_text));
    }
    p.push_str("Run log:\n");
    for r in records {
        let step = r.final_decision().map(|d| d.step_statement.as_str()).unwrap_or("-");
        p.push_str(&format!("Iteration {}: {step}\n", r.index));
        if !r.summary.is_empty() {
            p.push_str(&format!("  Summary: {}\n", r.summary.trim()));
        }
        for a in &r.attempts {
            if let Some(v) = &a.verdict {
                p.push_str(&format!("  Verdict {:?}: {}\n", v.outcome, v.rationale));
            }
        }
        if let Some(f) = &r.feedback {
            p.push_str(&format!("  Operator observation: {f}\n"));
        }
    }
    p.push_str("\nList every vulnerability found.");
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutcome {
    pub rows: Vec<VulnerabilityRecord>,
    pub dropped: Vec<String>,
    pub derived_risk: usize,
}

/// Asks the report generator for rows, keeps the valid distinct ones.
pub fn build_report(records: &[IterationRecord], targets: &[String], gateway: &Gateway) -> Result<ReportOutcome, ReportError> {
    let mut outcome = ReportOutcome {
        rows: Vec::new(),
        dropped: Vec::new(),
        derived_risk: 0,
    };
    if records.is_empty() {
        return Ok(outcome);
    }
    let mut session = gateway.open_role_session(AgentRole::ReportGenerator);
    let reply = gateway.chat(&mut session, &report_prompt(records, targets))?;
    let Some(items) = parse_rows(&reply) else {
        tracing::warn!("report generator reply holds no json array");
        outcome.dropped.push("reply holds no json array".into());
        return Ok(outcome);
    };
    let mut seen = HashSet::new();
    for (i, item) in items.iter().enumerate() {
        let cols: [String; 14] = std::array::from_fn(|j| value_text(item.get(KEYS[j])));
        match validate_row(&cols, targets) {
            Ok((row, derived)) => {
                if seen.insert(row.dedup_key()) {
                    outcome.derived_risk += derived as usize;
                    outcome.rows.push(row);
                }
            }
            Err(e) => {
                tracing::warn!("dropping report row {}: {e}", i + 1);
                outcome.dropped.push(format!("row {}: {e}", i + 1));
            }
        }
    }
    Ok(outcome)
}

/// Writes via a temporary file renamed into place.
pub fn write_report_file(path: &Path, rows: &[VulnerabilityRecord]) -> Result<(), ReportError> {
    let io = |e: std::io::Error| ReportError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("csv.tmp");
    let text = report_to_string(rows)?;
    fs::write(&tmp, text).map_err(io)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io(e)
    })
}

pub fn generate_report(
    records: &[IterationRecord],
    targets: &[String],
    gateway: &Gateway,
    out_path: &Path,
) -> Result<ReportOutcome, ReportError> {
    let outcome = build_report(records, targets, gateway)?;
    write_report_file(out_path, &outcome.rows)?;
    Ok(outcome)
}
