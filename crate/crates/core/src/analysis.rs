//! Attention-ratio interpretability: the share of above-threshold attention
//! entries whose query token lies in a region, compared between two models
//! with a per-layer/head Welch test.

use std::collections::BTreeMap;

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::encoder::AttentionRecord;
use crate::tokenization::chunk_spans;

pub const DEFAULT_MU: f64 = 0.01;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("sample {sample}: mask has {mask} tokens but attention covers {tokens}")]
    MaskLengthMismatch { sample: usize, mask: usize, tokens: usize },
    #[error("attention grids differ: {0}")]
    GridMismatch(String),
    #[error("need at least two samples per side, found {a} and {b}")]
    InsufficientSamples { a: usize, b: usize },
    #[error("both sample sets have zero variance")]
    ZeroVariance,
    #[error("{transcript}: interval [{start}, {end}) outside sequence of length {len}")]
    IntervalOutOfBounds { transcript: String, start: usize, end: usize, len: usize },
    #[error("{transcript}: intervals [{a_start}, {a_end}) and [{b_start}, {b_end}) overlap")]
    OverlappingIntervals { transcript: String, a_start: usize, a_end: usize, b_start: usize, b_end: usize },
    #[error("threshold must lie in (0,1), got {0}")]
    InvalidThreshold(f64),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Per-sequence ratio for one attention matrix; `None` when no entry exceeds `mu`.
pub fn sequence_ratio(attention: &crate::tensor::Matrix<f64>, mask: &[bool], mu: f64) -> Option<f64> {
    let (mut num, mut den) = (0usize, 0usize);
    for (i, &f) in mask.iter().enumerate().take(attention.rows()) {
        let above = attention.row(i).iter().filter(|&&a| a > mu).count();
        den += above;
        if f {
            num += above;
        }
    }
    (den > 0).then(|| num as f64 / den as f64)
}

/// ρ for one layer/head: mean of the defined per-sample ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioCell {
    pub rho: Option<f64>,
    pub samples: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRatioMap {
    pub cells: Vec<Vec<RatioCell>>,
}

impl AttentionRatioMap {
    pub fn num_layers(&self) -> usize {
        self.cells.len()
    }

    pub fn num_heads(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }
}

pub fn attention_ratio(records: &[AttentionRecord], masks: &[Vec<bool>], mu: f64) -> Result<AttentionRatioMap, AnalysisError> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(AnalysisError::InvalidThreshold(mu));
    }
    if records.len() != masks.len() {
        return Err(AnalysisError::GridMismatch(format!("{} records but {} masks", records.len(), masks.len())));
    }
    let (layers, heads) = records.first().map_or((0, 0), |r| (r.num_layers(), r.num_heads()));
    for (s, (r, m)) in records.iter().zip(masks).enumerate() {
        if r.num_layers() != layers || r.weights.iter().any(|l| l.len() != heads) {
            return Err(AnalysisError::GridMismatch(format!("sample {s} has a different layer/head grid")));
        }
        for a in r.weights.iter().flatten() {
            if a.rows() != m.len() {
                return Err(AnalysisError::MaskLengthMismatch {
                    sample: s,
                    mask: m.len(),
                    tokens: a.rows(),
                });
            }
        }
    }
    let cells = (0..layers)
        .map(|l| {
            (0..heads)
                .map(|h| {
                    let samples: Vec<f64> = records
                        .iter()
                        .zip(masks)
                        .filter_map(|(r, m)| sequence_ratio(&r.weights[l][h], m, mu))
                        .collect();
                    let rho = (!samples.is_empty()).then(|| samples.iter().sum::<f64>() / samples.len() as f64);
                    RatioCell { rho, samples }
                })
                .collect()
        })
        .collect();
    Ok(AttentionRatioMap { cells })
}

/// `(ρ_a − ρ_b)/ρ_b` capped above at 1; `None` when either side is
/// undefined or `ρ_b = 0`.
pub fn delta_rho(rho_a: &AttentionRatioMap, rho_b: &AttentionRatioMap) -> Result<Vec<Vec<Option<f64>>>, AnalysisError> {
    if rho_a.num_layers() != rho_b.num_layers() || rho_a.num_heads() != rho_b.num_heads() {
        return Err(AnalysisError::GridMismatch(format!(
            "{}x{} vs {}x{}",
            rho_a.num_layers(),
            rho_a.num_heads(),
            rho_b.num_layers(),
            rho_b.num_heads()
        )));
    }
    Ok(rho_a
        .cells
        .iter()
        .zip(&rho_b.cells)
        .map(|(ra, rb)| {
            ra.iter()
                .zip(rb)
                .map(|(a, b)| match (a.rho, b.rho) {
                    (Some(a), Some(b)) if b != 0.0 => Some(((a - b) / b).min(1.0)),
                    _ => None,
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub selected: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch test for unequal variances.
pub fn significance_test(a: &[f64], b: &[f64]) -> Result<TTest, AnalysisError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(AnalysisError::InsufficientSamples { a: a.len(), b: b.len() });
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        t,
        df,
        p_value,
        selected: p_value < SIGNIFICANCE_LEVEL,
    })
}

/// One output row per layer/head.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaCell {
    pub layer: usize,
    pub head: usize,
    pub rho_a: Option<f64>,
    pub rho_b: Option<f64>,
    /// Reported value: Δρ when significant, 0 when defined but not significant.
    pub delta_rho: Option<f64>,
    pub p_value: Option<f64>,
    pub selected: bool,
}

/// Δρ with the significance filter applied; cells whose test cannot be run
/// keep their p-value empty and are not selected.
pub fn compare(rho_a: &AttentionRatioMap, rho_b: &AttentionRatioMap) -> Result<Vec<DeltaCell>, AnalysisError> {
    let delta = delta_rho(rho_a, rho_b)?;
    let mut out = Vec::new();
    for (l, row) in delta.iter().enumerate() {
        for (h, &d) in row.iter().enumerate() {
            let (ca, cb) = (&rho_a.cells[l][h], &rho_b.cells[l][h]);
            let test = significance_test(&ca.samples, &cb.samples).ok();
            let selected = test.is_some_and(|t| t.selected);
            out.push(DeltaCell {
                layer: l,
                head: h,
                rho_a: ca.rho,
                rho_b: cb.rho,
                delta_rho: d.map(|v| if selected { v } else { 0.0 }),
                p_value: test.map(|t| t.p_value),
                selected,
            });
        }
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn delta_tsv(cells: &[DeltaCell]) -> String {
    let mut out = String::from("layer\thead\trho_a\trho_b\tdelta_rho\tp_value\tselected\n");
    for c in cells {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            c.layer,
            c.head,
            opt(c.rho_a),
            opt(c.rho_b),
            opt(c.delta_rho),
            opt(c.p_value),
            c.selected
        ));
    }
    out
}

/// Layer-by-head matrix of reported Δρ values (`NA` for undefined cells).
pub fn delta_matrix_text(cells: &[DeltaCell]) -> String {
    let layers = cells.iter().map(|c| c.layer + 1).max().unwrap_or(0);
    let mut out = String::new();
    for l in 0..layers {
        let row: Vec<String> = cells.iter().filter(|c| c.layer == l).map(|c| opt(c.delta_rho)).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// One row of a region table: a half-open character interval on the RNA sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionInterval {
    pub transcript_id: String,
    pub region: String,
    pub start: usize,
    pub end: usize,
}

pub const REGION_HEADER: [&str; 4] = ["transcript_id", "region_name", "start", "end"];

pub fn parse_region_table(text: &str) -> Result<Vec<RegionInterval>, AnalysisError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(AnalysisError::Parse {
        line: 1,
        reason: "empty region table".into(),
    })?;
    if header.split('\t').map(str::trim).collect::<Vec<_>>() != REGION_HEADER {
        return Err(AnalysisError::Parse {
            line: 1,
            reason: format!("expected header {}", REGION_HEADER.join("\\t")),
        });
    }
    lines
        .map(|(i, line)| {
            let bad = |reason: String| AnalysisError::Parse { line: i + 1, reason };
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", f.len())));
            }
            if f[0].is_empty() || f[1].is_empty() {
                return Err(bad("empty transcript or region name".into()));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("'{s}': {e}")));
            let (start, end) = (num(f[2])?, num(f[3])?);
            if start > end {
                return Err(bad(format!("start {start} after end {end}")));
            }
            Ok(RegionInterval {
                transcript_id: f[0].to_string(),
                region: f[1].to_string(),
                start,
                end,
            })
        })
        .collect()
}

pub fn region_table_text(rows: &[RegionInterval]) -> String {
    let mut out = REGION_HEADER.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.transcript_id, r.region, r.start, r.end));
    }
    out
}

/// Token-level masks per region name for one transcript of `seq_len`
/// characters under k-mer chunking. A token belongs to a region when
/// strictly more than half of its characters lie inside one of the
/// region's intervals.
pub fn annotate_regions(
    transcript_id: &str,
    seq_len: usize,
    k: usize,
    intervals: &[RegionInterval],
) -> Result<BTreeMap<String, Vec<bool>>, AnalysisError> {
    let mine: Vec<&RegionInterval> = intervals.iter().filter(|r| r.transcript_id == transcript_id).collect();
    for r in &mine {
        if r.end > seq_len {
            return Err(AnalysisError::IntervalOutOfBounds {
                transcript: transcript_id.to_string(),
                start: r.start,
                end: r.end,
                len: seq_len,
            });
        }
    }
    let mut sorted = mine.clone();
    sorted.sort_by_key(|r| (r.start, r.end));
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(AnalysisError::OverlappingIntervals {
                transcript: transcript_id.to_string(),
                a_start: w[0].start,
                a_end: w[0].end,
                b_start: w[1].start,
                b_end: w[1].end,
            });
        }
    }
    let spans = chunk_spans(seq_len, k);
    let mut masks: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for r in &mine {
        let mask = masks.entry(r.region.clone()).or_insert_with(|| vec![false; spans.len()]);
        for (t, &(s, e)) in spans.iter().enumerate() {
            let inside = e.min(r.end).saturating_sub(s.max(r.start));
            if 2 * inside > e - s {
                mask[t] = true;
            }
        }
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Matrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn record(mats: Vec<Vec<Matrix<f64>>>) -> AttentionRecord {
        AttentionRecord { weights: mats }
    }

    #[test]
    fn two_by_two_example() {
        let a = Matrix::from_vec(2, 2, vec![0.9, 0.1, 0.4, 0.6]);
        assert_eq!(sequence_ratio(&a, &[true, false], 0.01), Some(0.5));
        assert_eq!(sequence_ratio(&a, &[true, true], 0.01), Some(1.0));
        assert_eq!(sequence_ratio(&a, &[false, false], 0.01), Some(0.0));
        // Strict inequality: entries equal to mu do not count.
        assert_eq!(sequence_ratio(&a, &[true, false], 0.9), None);
        assert_eq!(sequence_ratio(&a, &[true, false], 0.6), Some(1.0));
    }

    fn naive(a: &Matrix<f64>, f: &[bool], mu: f64) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                let ind = if a.get(i, j) > mu { 1.0 } else { 0.0 };
                num += if f[i] { ind } else { 0.0 };
                den += ind;
            }
        }
        if den == 0.0 {
            None
        } else {
            Some(num / den)
        }
    }

    fn random_attention<R: Rng>(n: usize, r: &mut R) -> Matrix<f64> {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            let raw: Vec<f64> = (0..n).map(|_| r.random::<f64>().powi(4)).collect();
            let s: f64 = raw.iter().sum();
            for j in 0..n {
                m.set(i, j, raw[j] / s);
            }
        }
        m
    }

    #[test]
    fn matches_double_loop() {
        let mut r = rng::stream(1, "attention");
        for _ in 0..500 {
            let a = random_attention(8, &mut r);
            let f: Vec<bool> = (0..8).map(|_| r.random_bool(0.5)).collect();
            let mu = r.random_range(0.001..0.3);
            match (sequence_ratio(&a, &f, mu), naive(&a, &f, mu)) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                (x, y) => assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn map_layout_and_errors() {
        let mut r = rng::stream(2, "attention");
        let recs: Vec<AttentionRecord> = (0..3)
            .map(|_| record((0..2).map(|_| (0..4).map(|_| random_attention(5, &mut r)).collect()).collect()))
            .collect();
        let masks = vec![vec![true, false, true, false, false]; 3];
        let m = attention_ratio(&recs, &masks, DEFAULT_MU).unwrap();
        assert_eq!((m.num_layers(), m.num_heads()), (2, 4));
        assert_eq!(m.cells[1][3].samples.len(), 3);
        let bad = vec![vec![true; 4]; 3];
        assert!(matches!(attention_ratio(&recs, &bad, 0.01), Err(AnalysisError::MaskLengthMismatch { .. })));
        assert!(matches!(attention_ratio(&recs, &masks, 0.0), Err(AnalysisError::InvalidThreshold(_))));
        // A uniform 4x4 attention has no entry above 0.3: undefined.
        let flat = record(vec![vec![Matrix::from_vec(4, 4, vec![0.25; 16])]]);
        let m = attention_ratio(&[flat], &[vec![true; 4]], 0.3).unwrap();
        assert_eq!(m.cells[0][0].rho, None);
    }

    fn single(rho: Option<f64>, samples: Vec<f64>) -> AttentionRatioMap {
        AttentionRatioMap {
            cells: vec![vec![RatioCell { rho, samples }]],
        }
    }

    #[test]
    fn delta_examples() {
        let d = |a, b| delta_rho(&single(Some(a), vec![]), &single(Some(b), vec![])).unwrap()[0][0];
        assert_eq!(d(0.3, 0.3), Some(0.0));
        assert_eq!(d(0.9, 0.3), Some(1.0));
        assert_eq!(d(0.15, 0.3), Some(-0.5));
        assert_eq!(d(0.1, 0.0), None);
        assert_eq!(delta_rho(&single(Some(0.1), vec![]), &single(None, vec![])).unwrap()[0][0], None);
        let two = AttentionRatioMap {
            cells: vec![vec![RatioCell { rho: None, samples: vec![] }; 2]],
        };
        assert!(matches!(delta_rho(&two, &single(None, vec![])), Err(AnalysisError::GridMismatch(_))));
    }

    #[test]
    fn welch_examples() {
        let x = [0.1, 0.2, 0.3, 0.4];
        let t = significance_test(&x, &x).unwrap();
        assert_eq!(t.t, 0.0);
        assert!(!t.selected);
        assert!(matches!(significance_test(&[0.1], &x), Err(AnalysisError::InsufficientSamples { .. })));
        assert!(matches!(significance_test(&[1.0, 1.0], &[1.0, 1.0]), Err(AnalysisError::ZeroVariance)));
        let mut r = rng::stream(3, "welch");
        let a: Vec<f64> = (0..30).map(|_| 0.8 + r.random_range(-0.02..0.02)).collect();
        let b: Vec<f64> = (0..30).map(|_| 0.2 + r.random_range(-0.05..0.05)).collect();
        let t = significance_test(&a, &b).unwrap();
        assert!(t.p_value < 1e-6 && t.selected);
    }

    /// p-values from scipy.stats.ttest_ind(a, b, equal_var=False).
    #[test]
    fn welch_matches_reference_values() {
        let cases: [(&[f64], &[f64], f64, f64); 3] = [
            (&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0], -2.3763541031440183, 0.04928433820673049),
            (&[0.31, 0.42, 0.29, 0.55, 0.47], &[0.35, 0.33, 0.41, 0.38], 0.7808339776069239, 0.47034276058300195),
            (&[10.0, 11.5, 9.8, 10.2], &[7.1, 8.3, 6.9, 7.7, 7.5, 8.0, 7.2], 6.638977810440874, 0.0016953766697857706),
        ];
        for (a, b, t, p) in cases {
            let r = significance_test(a, b).unwrap();
            assert!((r.t - t).abs() < 1e-10, "{} vs {t}", r.t);
            assert!((r.p_value - p).abs() < 1e-8, "{} vs {p}", r.p_value);
        }
    }

    #[test]
    fn compare_zeroes_non_significant_cells() {
        let a = single(Some(0.6), vec![0.5, 0.6, 0.7]);
        let b = single(Some(0.5), vec![0.4, 0.5, 0.6]);
        let c = compare(&a, &b).unwrap();
        assert!(!c[0].selected);
        assert_eq!(c[0].delta_rho, Some(0.0));
        let a = single(Some(0.9), vec![0.89, 0.9, 0.91, 0.9]);
        let b = single(Some(0.3), vec![0.29, 0.3, 0.31, 0.3]);
        let c = compare(&a, &b).unwrap();
        assert!(c[0].selected);
        assert_eq!(c[0].delta_rho, Some(1.0));
        assert_eq!(delta_tsv(&c).lines().count(), 2);
        assert_eq!(delta_matrix_text(&c), "1\n");
    }

    fn iv(region: &str, start: usize, end: usize) -> RegionInterval {
        RegionInterval {
            transcript_id: "T".into(),
            region: region.into(),
            start,
            end,
        }
    }

    #[test]
    fn region_annotation_rules() {
        let m = annotate_regions("T", 10, 1, &[iv("CDS", 2, 5)]).unwrap();
        let want: Vec<bool> = (0..10).map(|i| (2..5).contains(&i)).collect();
        assert_eq!(m["CDS"], want);
        let m = annotate_regions("T", 12, 6, &[iv("5UTR", 0, 3)]).unwrap();
        assert_eq!(m["5UTR"], vec![false, false]);
        let m = annotate_regions("T", 12, 6, &[iv("5UTR", 0, 4)]).unwrap();
        assert_eq!(m["5UTR"], vec![true, false]);
        assert!(annotate_regions("T", 12, 6, &[]).unwrap().is_empty());
        assert!(annotate_regions("U", 12, 6, &[iv("CDS", 0, 4)]).unwrap().is_empty());
        assert!(matches!(annotate_regions("T", 5, 1, &[iv("CDS", 2, 6)]), Err(AnalysisError::IntervalOutOfBounds { .. })));
        assert!(matches!(
            annotate_regions("T", 10, 1, &[iv("CDS", 2, 6), iv("3UTR", 5, 8)]),
            Err(AnalysisError::OverlappingIntervals { .. })
        ));
    }

    #[test]
    fn region_table_round_trip() {
        let rows = vec![iv("5UTR", 0, 10), iv("CDS", 10, 40)];
        let text = region_table_text(&rows);
        assert_eq!(parse_region_table(&text).unwrap(), rows);
        assert!(matches!(parse_region_table("a\tb\n"), Err(AnalysisError::Parse { line: 1, .. })));
        assert!(matches!(
            parse_region_table("transcript_id\tregion_name\tstart\tend\nT\tCDS\t5\t2\n"),
            Err(AnalysisError::Parse { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn token_masks_match_character_brute_force(len in 1usize..60, k in 1usize..7, a in 0usize..60, b in 0usize..60) {
            let (s, e) = (a.min(b).min(len), a.max(b).min(len));
            let m = annotate_regions("T", len, k, &[iv("R", s, e)]).unwrap();
            let chars: Vec<bool> = (0..len).map(|i| i >= s && i < e).collect();
            let want: Vec<bool> = chunk_spans(len, k)
                .iter()
                .map(|&(ts, te)| 2 * chars[ts..te].iter().filter(|&&c| c).count() > te - ts)
                .collect();
            prop_assert_eq!(&m["R"], &want);
        }

        #[test]
        fn partition_ratios_sum_to_one(n in 2usize..12, cut1 in 0usize..12, cut2 in 0usize..12, seed in 0u64..1000, mu in 0.001f64..0.2) {
            let mut r = rng::stream(seed, "partition");
            let a = random_attention(n, &mut r);
            let (c1, c2) = (cut1.min(cut2).min(n), cut1.max(cut2).min(n));
            let regions = [iv("5UTR", 0, c1), iv("CDS", c1, c2), iv("3UTR", c2, n)];
            let masks = annotate_regions("T", n, 1, &regions).unwrap();
            let total: Option<f64> = masks.values().map(|m| sequence_ratio(&a, m, mu)).sum();
            if let Some(t) = total {
                prop_assert!((t - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn raising_mu_keeps_ratio_in_unit_interval(seed in 0u64..1000, mu in 0.001f64..0.5, bump in 0.0f64..0.4) {
            let mut r = rng::stream(seed, "mu");
            let a = random_attention(6, &mut r);
            let f: Vec<bool> = (0..6).map(|_| r.random_bool(0.5)).collect();
            let count = |m: f64| (0..6).flat_map(|i| (0..6).map(move |j| (i, j))).filter(|&(i, j)| a.get(i, j) > m).count();
            prop_assert!(count(mu + bump) <= count(mu));
            if let Some(v) = sequence_ratio(&a, &f, mu + bump) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
