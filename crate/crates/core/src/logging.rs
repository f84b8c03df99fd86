//! Tab-separated run log: `ISO8601\tstage=k epoch=e step=s loss=… lr=… [val_top1=…]`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

/// One training progress line.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_top1: Option<f64>,
}

impl LogRecord {
    pub fn body(&self) -> String {
        let mut s = format!(
            "stage={} epoch={} step={} loss={:?} lr={:?}",
            self.stage, self.epoch, self.step, self.loss, self.lr
        );
        if let Some(v) = self.val_top1 {
            s.push_str(&format!(" val_top1={v:?}"));
        }
        s
    }

    /// Parse a full log line (timestamp included). Non-record lines give `None`.
    pub fn parse(line: &str) -> Option<LogRecord> {
        let body = line.split_once('\t')?.1;
        let mut fields = std::collections::HashMap::new();
        for kv in body.split(' ') {
            let (k, v) = kv.split_once('=')?;
            fields.insert(k, v);
        }
        Some(LogRecord {
            stage: fields.get("stage")?.parse().ok()?,
            epoch: fields.get("epoch")?.parse().ok()?,
            step: fields.get("step")?.parse().ok()?,
            loss: fields.get("loss")?.parse().ok()?,
            lr: fields.get("lr")?.parse().ok()?,
            val_top1: match fields.get("val_top1") {
                Some(v) => Some(v.parse().ok()?),
                None => None,
            },
        })
    }
}

/// Drop the leading timestamp column.
pub fn strip_timestamp(line: &str) -> &str {
    line.split_once('\t').map_or(line, |(_, rest)| rest)
}

/// Writes to an optional file and keeps every line in memory.
pub struct RunLog {
    file: Option<BufWriter<File>>,
    echo: bool,
    lines: Vec<String>,
}

impl RunLog {
    pub fn new(path: Option<&Path>, echo: bool) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::storage(dir, e))?;
                }
                Some(BufWriter::new(File::create(p).map_err(|e| crate::error::Error::storage(p, e))?))
            }
            None => None,
        };
        Ok(RunLog { file, echo, lines: Vec::new() })
    }

    pub fn line(&mut self, body: &str) {
        let ts = chrono::Local::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, false);
        let line = format!("{ts}\t{body}");
        if self.echo {
            println!("{line}");
        }
        if let Some(f) = &mut self.file {
            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                log::warn!("could not write run log: {e}");
                self.file = None;
            }
        }
        self.lines.push(line);
    }

    pub fn record(&mut self, r: &LogRecord) {
        self.line(&r.body());
    }

    pub fn notice(&mut self, msg: &str) {
        log::info!("{msg}");
        self.line(&format!("notice| {msg}"));
    }

    pub fn warning(&mut self, msg: &str) {
        log::warn!("{msg}");
        self.line(&format!("warning| {msg}"));
    }

    pub fn config_echo(&mut self, yaml: &str) {
        for l in yaml.lines() {
            self.line(&format!("config| {l}"));
        }
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

/// The resolved config embedded at the top of a log.
pub fn extract_config(log_text: &str) -> String {
    let mut out = String::new();
    for l in log_text.lines() {
        if let Some(rest) = strip_timestamp(l).strip_prefix("config| ") {
            out.push_str(rest);
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let r = LogRecord { stage: 2, epoch: 3, step: 40, loss: 0.1 + 0.2, lr: 1e-3, val_top1: Some(91.25) };
        let line = format!("2024-01-01T00:00:00.000+00:00\t{}", r.body());
        assert_eq!(LogRecord::parse(&line), Some(r));
        assert!(LogRecord::parse("ts\tnotice| hello").is_none());
    }

    #[test]
    fn config_lines_round_trip() {
        let yaml = "a: 1\nb:\n  - x\n";
        let mut log = RunLog::new(None, false).unwrap();
        log.config_echo(yaml);
        log.line("stage=1 epoch=1 step=1 loss=1.0 lr=0.1");
        assert_eq!(extract_config(&log.lines().join("\n")), yaml);
    }
}
