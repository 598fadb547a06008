//! Helpers shared by integration tests.
#![allow(dead_code)]

use rand::Rng;

use loraudio::corpus::Label;
use loraudio::metrics::ScoreRecord;
use loraudio::rng::rng_for;

/// Brute-force sweep: counts every class at every candidate threshold from
/// scratch, then linearly interpolates FAR − FRR to zero.
pub fn oracle_eer(bona: &[f64], spoof: &[f64]) -> f64 {
    let mut ts: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut pts: Vec<(f64, f64)> = ts
        .iter()
        .map(|&t| {
            let frr = bona.iter().filter(|&&s| s < t).count() as f64 / bona.len() as f64;
            let far = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
            (frr, far)
        })
        .collect();
    pts.push((1.0, 0.0));
    for w in pts.windows(2) {
        let ((r0, a0), (r1, a1)) = (w[0], w[1]);
        if r1 >= a1 {
            if r1 == a1 {
                return r1;
            }
            // Solve (a0 − r0) + u·((a1 − r1) − (a0 − r0)) = 0 along the segment.
            let u = (a0 - r0) / ((a0 - r0) - (a1 - r1));
            return r0 + u * (r1 - r0);
        }
    }
    unreachable!("the closing point always has FRR >= FAR")
}

pub fn records(bona: &[f64], spoof: &[f64]) -> Vec<ScoreRecord> {
    let mut out = Vec::new();
    for (i, &s) in bona.iter().enumerate() {
        out.push(ScoreRecord::new(format!("b{i}"), s, Label::Bonafide));
    }
    for (i, &s) in spoof.iter().enumerate() {
        out.push(ScoreRecord::new(format!("s{i}"), s, Label::Spoof));
    }
    out
}

pub fn random_set(k: usize) -> (Vec<f64>, Vec<f64>, bool) {
    let mut rng = rng_for(77, &["eer-set", &k.to_string()]);
    let nb = rng.gen_range(1..60);
    let ns = rng.gen_range(1..60);
    let shift = rng.gen_range(-1.0..3.0);
    // A quarter of the sets are coarsely quantised so ties are common.
    let coarse = k % 4 == 0;
    let mut draw = |mu: f64| {
        let v: f64 = mu + rng.gen_range(-1.5..1.5);
        if coarse {
            (v * 4.0).round() / 4.0
        } else {
            v
        }
    };
    let bona = (0..nb).map(|_| draw(shift)).collect();
    let spoof = (0..ns).map(|_| draw(0.0)).collect();
    (bona, spoof, coarse)
}
