//! Score files and equal error rate.
//!
//! Higher scores mean "more bonafide". A record is accepted at threshold `t`
//! when `score >= t`.

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_text};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub utt_id: String,
    pub score: f64,
    pub label: Label,
}

impl ScoreRecord {
    pub fn new(utt_id: impl Into<String>, score: f64, label: Label) -> Self {
        ScoreRecord {
            utt_id: utt_id.into(),
            score,
            label,
        }
    }
}

/// One operating point: false acceptance and false rejection at `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

struct Sorted {
    /// Distinct scores, ascending.
    thresholds: Vec<f64>,
    /// `frr[i]`: bonafide below `thresholds[i]`; `far[i]`: spoof at or above.
    frr: Vec<f64>,
    far: Vec<f64>,
}

fn sweep(records: &[ScoreRecord]) -> Result<Sorted> {
    let mut bona: Vec<f64> = Vec::new();
    let mut spoof: Vec<f64> = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::invalid("score", format!("{} has non-finite score", r.utt_id)));
        }
        match r.label {
            Label::Bonafide => bona.push(r.score),
            Label::Spoof => spoof.push(r.score),
        }
    }
    if bona.is_empty() {
        return Err(Error::OneClassOnly("spoof"));
    }
    if spoof.is_empty() {
        return Err(Error::OneClassOnly("bonafide"));
    }
    bona.sort_by(f64::total_cmp);
    spoof.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = bona.iter().chain(&spoof).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (nb, ns) = (bona.len() as f64, spoof.len() as f64);
    let (mut ib, mut is) = (0, 0);
    let mut frr = Vec::with_capacity(thresholds.len());
    let mut far = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        while ib < bona.len() && bona[ib] < t {
            ib += 1;
        }
        while is < spoof.len() && spoof[is] < t {
            is += 1;
        }
        frr.push(ib as f64 / nb);
        far.push((spoof.len() - is) as f64 / ns);
    }
    Ok(Sorted { thresholds, frr, far })
}

/// One point per distinct score, ascending in threshold.
pub fn det_points(records: &[ScoreRecord]) -> Result<Vec<DetPoint>> {
    let s = sweep(records)?;
    Ok((0..s.thresholds.len())
        .map(|i| DetPoint {
            threshold: s.thresholds[i],
            far: s.far[i],
            frr: s.frr[i],
        })
        .collect())
}

/// Returns `(eer, threshold)`.
///
/// The sweep runs over every distinct score plus a final point above the
/// maximum (everything rejected). The first point with `FRR >= FAR` is the
/// crossing. On an exact meet the threshold reported is the midpoint between
/// that score and the previous one, which yields the same decisions. Otherwise
/// EER and threshold are linearly interpolated between the two neighbouring
/// points.
pub fn compute_eer(records: &[ScoreRecord]) -> Result<(f64, f64)> {
    let mut s = sweep(records)?;
    let top = *s.thresholds.last().expect("non-empty");
    s.thresholds.push(top);
    s.frr.push(1.0);
    s.far.push(0.0);

    // far[0] is 1 and frr[0] is 0, so the crossing index is at least 1.
    let i = (1..s.thresholds.len())
        .find(|&i| s.frr[i] >= s.far[i])
        .expect("the final point always crosses");
    let (t0, t1) = (s.thresholds[i - 1], s.thresholds[i]);
    if s.frr[i] == s.far[i] {
        return Ok((s.frr[i], 0.5 * (t0 + t1)));
    }
    let d0 = s.far[i - 1] - s.frr[i - 1];
    let d1 = s.far[i] - s.frr[i];
    let alpha = d0 / (d0 - d1);
    let eer = s.frr[i - 1] + alpha * (s.frr[i] - s.frr[i - 1]);
    Ok((eer, t0 + alpha * (t1 - t0)))
}

/// `utt_id score label` per line, sorted by utterance id.
pub fn format_scores(records: &[ScoreRecord]) -> String {
    let mut sorted: Vec<&ScoreRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let mut out = String::new();
    for r in sorted {
        let _ = writeln!(out, "{} {:.9} {}", r.utt_id, r.score, r.label);
    }
    out
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = || Error::MalformedLine {
            line_no: i + 1,
            line: line.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, score, label] = fields[..] else {
            return Err(malformed());
        };
        let score: f64 = score.parse().map_err(|_| malformed())?;
        if !score.is_finite() {
            return Err(malformed());
        }
        let label: Label = label.parse().map_err(|_| malformed())?;
        out.push(ScoreRecord::new(id, score, label));
    }
    Ok(out)
}

pub fn write_scores(records: &[ScoreRecord], path: &Path) -> Result<()> {
    atomic_write(path, format_scores(records).as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    parse_scores(&read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(bona: &[f64], spoof: &[f64]) -> Vec<ScoreRecord> {
        let b = bona.iter().enumerate().map(|(i, &s)| ScoreRecord::new(format!("b{i}"), s, Label::Bonafide));
        let s = spoof.iter().enumerate().map(|(i, &s)| ScoreRecord::new(format!("s{i}"), s, Label::Spoof));
        b.chain(s).collect()
    }

    #[test]
    fn perfect_separation() {
        let (eer, t) = compute_eer(&recs(&[0.9, 0.8], &[0.2, 0.1])).unwrap();
        assert_eq!(eer, 0.0);
        assert!(t > 0.2 && t <= 0.8);
    }

    #[test]
    fn all_equal_is_half() {
        let (eer, _) = compute_eer(&recs(&[0.3; 4], &[0.3; 5])).unwrap();
        assert!((eer - 0.5).abs() < 1e-12);
    }

    #[test]
    fn three_by_three() {
        let (eer, t) = compute_eer(&recs(&[0.8, 0.6, 0.4], &[0.7, 0.3, 0.2])).unwrap();
        assert!((eer - 1.0 / 3.0).abs() < 1e-12);
        assert!((t - 0.5).abs() < 1e-12);
    }

    #[test]
    fn one_class_only() {
        assert!(matches!(compute_eer(&recs(&[0.1], &[])), Err(Error::OneClassOnly(_))));
        assert!(matches!(det_points(&recs(&[], &[0.1])), Err(Error::OneClassOnly(_))));
    }

    #[test]
    fn det_two_points() {
        let p = det_points(&recs(&[1.0], &[0.0])).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.iter().any(|p| p.far == 0.0 && p.frr == 0.0));
    }

    #[test]
    fn score_lines() {
        let r = parse_scores("u1 0.500000000 bonafide\n").unwrap();
        assert_eq!(r, vec![ScoreRecord::new("u1", 0.5, Label::Bonafide)]);
        assert!(matches!(parse_scores("u1 abc bonafide"), Err(Error::MalformedLine { line_no: 1, .. })));
        assert!(matches!(parse_scores("u1 0.5"), Err(Error::MalformedLine { .. })));
        assert!(matches!(parse_scores("u1 0.5 maybe"), Err(Error::MalformedLine { .. })));
    }

    #[test]
    fn file_sorted_and_round_trips() {
        let r = recs(&[0.123456789123, -2.5], &[1e-3]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        write_scores(&r, &path).unwrap();
        let text = read_text(&path).unwrap();
        assert!(text.starts_with("b0 0.123456789 bonafide\nb1 -2.500000000 bonafide\ns0"));
        let back = read_scores(&path).unwrap();
        for (a, b) in r.iter().zip(&back) {
            assert_eq!(a.utt_id, b.utt_id);
            assert!((a.score - b.score).abs() <= 1e-9);
        }
    }
}
