use std::path::Path;
use std::str::FromStr;

use super::{Label, ProtocolEntry};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_text};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolFormat {
    /// `utt_id label algo_id`
    Native,
    /// Five-field countermeasure listing: `speaker utt_id - algo_id label`.
    AsvspoofCm,
}

impl FromStr for ProtocolFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(ProtocolFormat::Native),
            "asvspoof_cm" | "asvspoof-cm" => Ok(ProtocolFormat::AsvspoofCm),
            other => Err(Error::Config(format!("unknown protocol format {other:?}"))),
        }
    }
}

pub fn parse_protocol(path: &Path, format: ProtocolFormat) -> Result<Vec<ProtocolEntry>> {
    parse_protocol_str(&read_text(path)?, format)
}

pub fn parse_protocol_str(text: &str, format: ProtocolFormat) -> Result<Vec<ProtocolEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let malformed = || Error::MalformedLine {
            line_no,
            line: line.to_string(),
        };
        let (utt, label, algo) = match (format, fields.as_slice()) {
            (ProtocolFormat::Native, [u, l, a]) => (*u, *l, *a),
            (ProtocolFormat::AsvspoofCm, [_, u, _, a, l]) => (*u, *l, *a),
            _ => return Err(malformed()),
        };
        let label: Label = label.parse()?;
        out.push(ProtocolEntry::new(utt, label, algo).map_err(|_| malformed())?);
    }
    Ok(out)
}

pub fn write_protocol(path: &Path, entries: &[ProtocolEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{} {} {}\n", e.utt_id, e.label, e.algo_id));
    }
    atomic_write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn native_lines() {
        let got = parse_protocol_str("u1 bonafide -\n\nu2 spoof S3\n", ProtocolFormat::Native).unwrap();
        assert_eq!(got[0], ProtocolEntry::new("u1", Label::Bonafide, "-").unwrap());
        assert_eq!(got[1], ProtocolEntry::new("u2", Label::Spoof, "S3").unwrap());
    }

    #[test]
    fn unknown_label() {
        let err = parse_protocol_str("u3 real -", ProtocolFormat::Native).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel(ref l) if l == "real"));
    }

    #[test]
    fn malformed_reports_line_number() {
        let err = parse_protocol_str("u1 bonafide -\nu2 spoof\n", ProtocolFormat::Native).unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line_no: 2, .. }));
        let err = parse_protocol_str("u1 bonafide S1\n", ProtocolFormat::Native).unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line_no: 1, .. }));
    }

    #[test]
    fn asvspoof_cm_field_order() {
        let text = "LA_0079 LA_T_1138215 - - bonafide\nLA_0079 LA_T_1271820 - A01 spoof\n";
        let got = parse_protocol_str(text, ProtocolFormat::AsvspoofCm).unwrap();
        assert_eq!(got[0], ProtocolEntry::new("LA_T_1138215", Label::Bonafide, "-").unwrap());
        assert_eq!(got[1], ProtocolEntry::new("LA_T_1271820", Label::Spoof, "A01").unwrap());
    }

    #[test]
    fn write_then_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.txt");
        let entries = vec![
            ProtocolEntry::new("a", Label::Bonafide, "-").unwrap(),
            ProtocolEntry::new("b", Label::Spoof, "S4").unwrap(),
        ];
        write_protocol(&p, &entries).unwrap();
        assert_eq!(parse_protocol(&p, ProtocolFormat::Native).unwrap(), entries);
    }
}
