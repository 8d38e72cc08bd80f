//! Dataset construction: sequence and table parsers, triplet assembly
//! around transcription start sites, target normalization, gene-level
//! splits, and a synthetic generator with planted signal.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::config::KeyValues;
use crate::rng;

pub const NORMALIZATION_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}:{line}: {reason}")]
    Parse { file: String, line: usize, reason: String },
    #[error("missing {kind} sequence '{id}'")]
    MissingSequence { kind: &'static str, id: String },
    #[error("negative expression value {value} for {transcript_id} in tissue {tissue}")]
    NegativeExpression { transcript_id: String, tissue: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("too few genes ({genes}) for the requested split")]
    TooFewGenes { genes: usize },
    #[error("expected {expected} tissues, found {found}")]
    TissueMismatch { expected: usize, found: usize },
    #[error("i/o failure on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn parse_err(file: &str, line: usize, reason: impl Into<String>) -> DataError {
    DataError::Parse {
        file: file.to_string(),
        line,
        reason: reason.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strand {
    Forward,
    Reverse,
}

impl fmt::Display for Strand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strand::Forward => "+",
            Strand::Reverse => "-",
        })
    }
}

impl FromStr for Strand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "+" => Ok(Strand::Forward),
            "-" => Ok(Strand::Reverse),
            _ => Err(format!("strand must be '+' or '-', found '{s}'")),
        }
    }
}

/// Whether a record's targets are raw TPM or normalized log-expression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetScale {
    RawTpm,
    Normalized,
}

impl fmt::Display for TargetScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetScale::RawTpm => "raw_tpm",
            TargetScale::Normalized => "normalized",
        })
    }
}

impl FromStr for TargetScale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw_tpm" => Ok(TargetScale::RawTpm),
            "normalized" => Ok(TargetScale::Normalized),
            _ => Err(format!("unknown target scale '{s}'")),
        }
    }
}

/// One DNA/RNA/protein triplet with per-tissue targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptRecord {
    pub transcript_id: String,
    pub gene_id: String,
    pub dna_window: String,
    pub rna_seq: String,
    /// `None` for non-coding transcripts.
    pub protein_seq: Option<String>,
    pub targets: Vec<f64>,
    pub scale: TargetScale,
    pub strand: Strand,
}

pub fn parse_fasta(text: &str, file: &str) -> Result<Vec<(String, String)>, DataError> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if let Some(header) = line.strip_prefix('>') {
            let id = header.split_whitespace().next().unwrap_or("");
            if id.is_empty() {
                return Err(parse_err(file, i + 1, "empty FASTA header"));
            }
            if !seen.insert(id.to_string()) {
                return Err(parse_err(file, i + 1, format!("duplicate id '{id}'")));
            }
            out.push((id.to_string(), String::new()));
        } else if line.trim().is_empty() || line.starts_with(';') {
            continue;
        } else {
            let Some((_, seq)) = out.last_mut() else {
                return Err(parse_err(file, i + 1, "sequence data before the first header"));
            };
            let s = line.trim();
            if let Some(c) = s.chars().find(|c| !c.is_ascii_alphabetic() && *c != '*' && *c != '-') {
                return Err(parse_err(file, i + 1, format!("unexpected character {c:?}")));
            }
            seq.push_str(s);
        }
    }
    Ok(out)
}

pub fn write_fasta(entries: &[(String, String)]) -> String {
    let mut out = String::new();
    for (id, seq) in entries {
        out.push('>');
        out.push_str(id);
        out.push('\n');
        for chunk in seq.as_bytes().chunks(60) {
            out.push_str(std::str::from_utf8(chunk).expect("ASCII sequence"));
            out.push('\n');
        }
    }
    out
}

/// Mean TPM per transcript and tissue.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionTable {
    pub tissues: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

fn split_tab(line: &str) -> Vec<&str> {
    line.trim_end_matches('\r').split('\t').collect()
}

fn parse_f64(s: &str, file: &str, line: usize, what: &str) -> Result<f64, DataError> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| parse_err(file, line, format!("{what}: '{s}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(file, line, format!("{what}: non-finite value")));
    }
    Ok(v)
}

impl ExpressionTable {
    pub fn parse(text: &str, file: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| parse_err(file, 1, "missing header"))?;
        let cols = split_tab(header);
        if cols[0] != "transcript_id" || cols.len() < 2 {
            return Err(parse_err(file, 1, "header must be transcript_id followed by tissue names"));
        }
        let tissues: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in lines {
            let f = split_tab(line);
            if f.len() != tissues.len() + 1 {
                return Err(parse_err(file, i + 1, format!("expected {} fields, found {}", tissues.len() + 1, f.len())));
            }
            if f[0].is_empty() || !seen.insert(f[0].to_string()) {
                return Err(parse_err(file, i + 1, format!("empty or duplicate transcript id '{}'", f[0])));
            }
            let values = f[1..]
                .iter()
                .map(|s| parse_f64(s, file, i + 1, "TPM"))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(t) = values.iter().position(|&v| v < 0.0) {
                return Err(DataError::NegativeExpression {
                    transcript_id: f[0].to_string(),
                    tissue: t,
                    value: values[t],
                });
            }
            rows.push((f[0].to_string(), values));
        }
        Ok(Self { tissues, rows })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("transcript_id\t{}\n", self.tissues.join("\t"));
        for (id, v) in &self.rows {
            out.push_str(id);
            for x in v {
                out.push('\t');
                out.push_str(&x.to_string());
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub transcript_id: String,
    pub gene_id: String,
    pub protein_id: Option<String>,
    pub chromosome: String,
    /// 0-based.
    pub tss: u64,
    pub strand: Strand,
}

pub const MANIFEST_HEADER: &str = "transcript_id\tgene_id\tprotein_id\tchromosome\ttss\tstrand";

pub fn parse_manifest(text: &str, file: &str) -> Result<Vec<ManifestRow>, DataError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line.starts_with("transcript_id")) {
            continue;
        }
        let f = split_tab(line);
        if f.len() != 6 {
            return Err(parse_err(file, i + 1, format!("expected 6 fields, found {}", f.len())));
        }
        if f[0].is_empty() || f[1].is_empty() || f[3].is_empty() {
            return Err(parse_err(file, i + 1, "empty transcript, gene or chromosome"));
        }
        if !seen.insert(f[0].to_string()) {
            return Err(parse_err(file, i + 1, format!("duplicate transcript id '{}'", f[0])));
        }
        let tss = f[4]
            .trim()
            .parse::<u64>()
            .map_err(|_| parse_err(file, i + 1, format!("tss '{}' is not a non-negative integer", f[4])))?;
        let strand = f[5].trim().parse::<Strand>().map_err(|e| parse_err(file, i + 1, e))?;
        out.push(ManifestRow {
            transcript_id: f[0].to_string(),
            gene_id: f[1].to_string(),
            protein_id: (!f[2].is_empty()).then(|| f[2].to_string()),
            chromosome: f[3].to_string(),
            tss,
            strand,
        });
    }
    Ok(out)
}

pub fn reverse_complement(seq: &str) -> String {
    seq.chars()
        .rev()
        .map(|c| match c.to_ascii_uppercase() {
            'A' => 'T',
            'T' => 'A',
            'C' => 'G',
            'G' => 'C',
            'U' => 'A',
            other => other,
        })
        .collect()
}

/// Reference bases `[tss − w/2, tss + w/2)`, reverse-complemented on the
/// reverse strand; `None` if the window leaves the chromosome.
pub fn extract_window(chromosome: &str, tss: u64, window: usize, strand: Strand) -> Option<String> {
    let half = (window / 2) as u64;
    let start = tss.checked_sub(half)?;
    let end = tss.checked_add(half)?;
    if end > chromosome.len() as u64 {
        return None;
    }
    let w = chromosome.get(start as usize..end as usize)?.to_ascii_uppercase();
    Some(match strand {
        Strand::Forward => w,
        Strand::Reverse => reverse_complement(&w),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SkipReason {
    NotInExpressionTable,
    MissingRna,
    MissingProtein(String),
    WindowOutOfBounds { tss: u64, chromosome_length: usize },
    NotInManifest,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::NotInExpressionTable => f.write_str("not_in_expression_table"),
            SkipReason::MissingRna => f.write_str("missing_rna_sequence"),
            SkipReason::MissingProtein(p) => write!(f, "missing_protein_sequence:{p}"),
            SkipReason::WindowOutOfBounds { tss, chromosome_length } => {
                write!(f, "window_out_of_bounds:tss={tss},chromosome_length={chromosome_length}")
            }
            SkipReason::NotInManifest => f.write_str("not_in_manifest"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SkipReport {
    pub skipped: Vec<(String, SkipReason)>,
}

impl SkipReport {
    pub fn len(&self) -> usize {
        self.skipped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skipped.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("transcript_id\treason\n");
        for (id, r) in &self.skipped {
            out.push_str(&format!("{id}\t{r}\n"));
        }
        out
    }
}

/// Parsed inputs of `build_triplets`.
pub struct TripletSources<'a> {
    pub expression: &'a ExpressionTable,
    pub genome: &'a [(String, String)],
    pub rna: &'a [(String, String)],
    pub protein: &'a [(String, String)],
    pub manifest: &'a [ManifestRow],
}

/// Joins the sources on transcript id. Records come out sorted by
/// transcript id; unmappable transcripts are skipped and reported.
pub fn build_triplets(src: &TripletSources<'_>, window: usize) -> Result<(Vec<TranscriptRecord>, SkipReport), DataError> {
    if window == 0 || window % 2 != 0 {
        return Err(DataError::InvalidConfig(format!("window must be a positive even number, found {window}")));
    }
    let genome: HashMap<&str, &str> = src.genome.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let rna: HashMap<&str, &str> = src.rna.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let protein: HashMap<&str, &str> = src.protein.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let expression: HashMap<&str, &Vec<f64>> = src.expression.rows.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let mut manifest: Vec<&ManifestRow> = src.manifest.iter().collect();
    manifest.sort_by(|a, b| a.transcript_id.cmp(&b.transcript_id));

    let mut records = Vec::new();
    let mut report = SkipReport::default();
    for row in manifest {
        let id = row.transcript_id.clone();
        let chrom = genome.get(row.chromosome.as_str()).ok_or_else(|| DataError::MissingSequence {
            kind: "chromosome",
            id: row.chromosome.clone(),
        })?;
        let Some(targets) = expression.get(id.as_str()) else {
            report.skipped.push((id, SkipReason::NotInExpressionTable));
            continue;
        };
        let Some(rna_seq) = rna.get(id.as_str()) else {
            report.skipped.push((id, SkipReason::MissingRna));
            continue;
        };
        let protein_seq = match &row.protein_id {
            None => None,
            Some(p) => match protein.get(p.as_str()) {
                Some(s) => Some(s.trim_end_matches('*').to_ascii_uppercase()),
                None => {
                    report.skipped.push((id, SkipReason::MissingProtein(p.clone())));
                    continue;
                }
            },
        };
        let Some(dna_window) = extract_window(chrom, row.tss, window, row.strand) else {
            log::warn!("{id}: window around TSS {} leaves {}", row.tss, row.chromosome);
            report.skipped.push((
                id,
                SkipReason::WindowOutOfBounds {
                    tss: row.tss,
                    chromosome_length: chrom.len(),
                },
            ));
            continue;
        };
        records.push(TranscriptRecord {
            transcript_id: id,
            gene_id: row.gene_id.clone(),
            dna_window,
            rna_seq: rna_seq.to_ascii_uppercase(),
            protein_seq,
            targets: (*targets).clone(),
            scale: TargetScale::RawTpm,
            strand: row.strand,
        });
    }
    let in_manifest: BTreeSet<&str> = src.manifest.iter().map(|r| r.transcript_id.as_str()).collect();
    for (id, _) in &src.expression.rows {
        if !in_manifest.contains(id.as_str()) {
            report.skipped.push((id.clone(), SkipReason::NotInManifest));
        }
    }
    Ok((records, report))
}

/// Per-tissue mean and standard deviation of log-transformed values.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    pub tissues: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn to_text(&self) -> String {
        let mut out = String::from("tissue\tmean\tstd\n");
        for ((t, m), s) in self.tissues.iter().zip(&self.mean).zip(&self.std) {
            out.push_str(&format!("{t}\t{m}\t{s}\n"));
        }
        out
    }

    pub fn parse(text: &str, file: &str) -> Result<Self, DataError> {
        let mut stats = Self {
            tissues: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || (i == 0 && line.starts_with("tissue\t")) {
                continue;
            }
            let f = split_tab(line);
            if f.len() != 3 {
                return Err(parse_err(file, i + 1, format!("expected 3 fields, found {}", f.len())));
            }
            let std = parse_f64(f[2], file, i + 1, "std")?;
            if std < NORMALIZATION_EPS {
                return Err(parse_err(file, i + 1, "std below epsilon"));
            }
            stats.tissues.push(f[0].to_string());
            stats.mean.push(parse_f64(f[1], file, i + 1, "mean")?);
            stats.std.push(std);
        }
        if stats.tissues.is_empty() {
            return Err(parse_err(file, 1, "no tissues"));
        }
        Ok(stats)
    }
}

pub fn default_tissue_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("tissue_{i}")).collect()
}

/// `log(1+v)` then per-tissue standardization. Statistics are computed from
/// `rows` unless `stats` is supplied. The standard deviation is the
/// population one, floored at `NORMALIZATION_EPS`.
pub fn normalize_targets(
    rows: &[Vec<f64>],
    tissues: &[String],
    stats: Option<&NormalizationStats>,
) -> Result<(Vec<Vec<f64>>, NormalizationStats), DataError> {
    let n_t = tissues.len();
    for (r, row) in rows.iter().enumerate() {
        if row.len() != n_t {
            return Err(DataError::TissueMismatch {
                expected: n_t,
                found: row.len(),
            });
        }
        if let Some(t) = row.iter().position(|&v| v < 0.0) {
            return Err(DataError::NegativeExpression {
                transcript_id: format!("row {r}"),
                tissue: t,
                value: row[t],
            });
        }
    }
    let logged: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v.ln_1p()).collect()).collect();
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != n_t {
                return Err(DataError::TissueMismatch {
                    expected: s.mean.len(),
                    found: n_t,
                });
            }
            s.clone()
        }
        None => {
            if logged.is_empty() {
                return Err(DataError::InvalidConfig("cannot compute statistics of an empty table".into()));
            }
            let n = logged.len() as f64;
            let mean: Vec<f64> = (0..n_t).map(|t| logged.iter().map(|r| r[t]).sum::<f64>() / n).collect();
            let std = (0..n_t)
                .map(|t| {
                    let var = logged.iter().map(|r| (r[t] - mean[t]).powi(2)).sum::<f64>() / n;
                    var.sqrt().max(NORMALIZATION_EPS)
                })
                .collect();
            NormalizationStats {
                tissues: tissues.to_vec(),
                mean,
                std,
            }
        }
    };
    let normalized = logged
        .iter()
        .map(|r| r.iter().enumerate().map(|(t, v)| (v - stats.mean[t]) / stats.std[t]).collect())
        .collect();
    Ok((normalized, stats))
}

/// Normalizes the raw targets of `records` in place.
pub fn normalize_records(
    records: &mut [TranscriptRecord],
    tissues: &[String],
    stats: Option<&NormalizationStats>,
) -> Result<NormalizationStats, DataError> {
    if let Some(r) = records.iter().find(|r| r.scale != TargetScale::RawTpm) {
        return Err(DataError::InvalidConfig(format!("{} is already normalized", r.transcript_id)));
    }
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.targets.clone()).collect();
    let (norm, stats) = normalize_targets(&rows, tissues, stats)?;
    for (r, t) in records.iter_mut().zip(norm) {
        r.targets = t;
        r.scale = TargetScale::Normalized;
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        })
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Partition::Train),
            "validation" => Ok(Partition::Validation),
            "test" => Ok(Partition::Test),
            _ => Err(format!("unknown partition '{s}'")),
        }
    }
}

/// Transcript ids of each partition, in record order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn partition_of(&self) -> HashMap<&str, Partition> {
        let mut m = HashMap::new();
        for (ids, p) in [(&self.train, Partition::Train), (&self.validation, Partition::Validation), (&self.test, Partition::Test)] {
            for id in ids {
                m.insert(id.as_str(), p);
            }
        }
        m
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# seed={}\ntranscript_id\tpartition\n", self.seed);
        for (ids, p) in [(&self.train, Partition::Train), (&self.validation, Partition::Validation), (&self.test, Partition::Test)] {
            for id in ids {
                out.push_str(&format!("{id}\t{p}\n"));
            }
        }
        out
    }

    pub fn parse(text: &str, file: &str) -> Result<Self, DataError> {
        let mut split = Self {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
            seed: 0,
        };
        for (i, line) in text.lines().enumerate() {
            if let Some(s) = line.strip_prefix("# seed=") {
                split.seed = s.trim().parse().map_err(|_| parse_err(file, i + 1, "bad seed"))?;
                continue;
            }
            if line.trim().is_empty() || line.starts_with("transcript_id\t") {
                continue;
            }
            let f = split_tab(line);
            if f.len() != 2 {
                return Err(parse_err(file, i + 1, "expected transcript_id and partition"));
            }
            let p: Partition = f[1].parse().map_err(|e: String| parse_err(file, i + 1, e))?;
            let target = match p {
                Partition::Train => &mut split.train,
                Partition::Validation => &mut split.validation,
                Partition::Test => &mut split.test,
            };
            target.push(f[0].to_string());
        }
        Ok(split)
    }
}

/// Gene-level split: genes are shuffled by `seed`, the first
/// `round(test_fraction · genes)` go to test, then
/// `round(val_fraction · train genes)` of the rest go to validation.
pub fn split_by_gene(records: &[TranscriptRecord], test_fraction: f64, val_fraction: f64, seed: u64) -> Result<DatasetSplit, DataError> {
    let valid = |f: f64| f > 0.0 && f < 1.0;
    if !valid(test_fraction) || !valid(val_fraction) || test_fraction + val_fraction >= 1.0 {
        return Err(DataError::InvalidConfig(format!(
            "fractions must lie in (0,1) with a sum below 1, found test={test_fraction} val={val_fraction}"
        )));
    }
    let genes: BTreeSet<&str> = records.iter().map(|r| r.gene_id.as_str()).collect();
    let mut genes: Vec<&str> = genes.into_iter().collect();
    genes.shuffle(&mut rng::stream(seed, rng::SPLIT));
    let n = genes.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let n_train_all = n.saturating_sub(n_test);
    let n_val = (val_fraction * n_train_all as f64).round() as usize;
    if n_test == 0 || n_val == 0 || n_val >= n_train_all {
        return Err(DataError::TooFewGenes { genes: n });
    }
    let mut part: HashMap<&str, Partition> = HashMap::new();
    for (i, g) in genes.iter().enumerate() {
        let p = if i < n_test {
            Partition::Test
        } else if i < n_test + n_val {
            Partition::Validation
        } else {
            Partition::Train
        };
        part.insert(g, p);
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for r in records {
        let dst = match part[r.gene_id.as_str()] {
            Partition::Train => &mut split.train,
            Partition::Validation => &mut split.validation,
            Partition::Test => &mut split.test,
        };
        dst.push(r.transcript_id.clone());
    }
    Ok(split)
}

/// Gene expression as the sum of its transcripts' raw values per tissue.
pub fn gene_sums(records: &[TranscriptRecord]) -> BTreeMap<String, Vec<f64>> {
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        let acc = sums.entry(r.gene_id.clone()).or_insert_with(|| vec![0.0; r.targets.len()]);
        for (a, v) in acc.iter_mut().zip(&r.targets) {
            *a += v;
        }
    }
    sums
}

/// Per-gene residual `reference − Σ transcripts` for every gene in both sets.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneSumReport {
    pub sums: BTreeMap<String, Vec<f64>>,
    pub residuals: BTreeMap<String, Vec<f64>>,
    pub max_abs_residual: f64,
}

pub fn check_gene_sum(records: &[TranscriptRecord], reference: &BTreeMap<String, Vec<f64>>) -> Result<GeneSumReport, DataError> {
    if let Some(r) = records.iter().find(|r| r.scale != TargetScale::RawTpm) {
        return Err(DataError::InvalidConfig(format!("{} has normalized targets", r.transcript_id)));
    }
    let sums = gene_sums(records);
    let mut residuals = BTreeMap::new();
    let mut max_abs_residual = 0.0f64;
    for (g, s) in &sums {
        if let Some(refv) = reference.get(g) {
            let res: Vec<f64> = refv.iter().zip(s).map(|(a, b)| a - b).collect();
            max_abs_residual = res.iter().fold(max_abs_residual, |m, v| m.max(v.abs()));
            residuals.insert(g.clone(), res);
        }
    }
    Ok(GeneSumReport {
        sums,
        residuals,
        max_abs_residual,
    })
}

/// A `#tissues` header line naming the target columns, then one record per
/// line: transcript_id, gene_id, dna_window, rna_seq, protein_seq (empty if
/// non-coding), comma-separated targets, strand, target scale.
pub fn write_dataset(records: &[TranscriptRecord], tissues: &[String]) -> String {
    let mut out = format!("{TISSUES_TAG}\t{}\n", tissues.join("\t"));
    for r in records {
        let targets: Vec<String> = r.targets.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.transcript_id,
            r.gene_id,
            r.dna_window,
            r.rna_seq,
            r.protein_seq.as_deref().unwrap_or(""),
            targets.join(","),
            r.strand,
            r.scale
        ));
    }
    out
}

pub const TISSUES_TAG: &str = "#tissues";

/// Parsed dataset file. Without a `#tissues` header, tissues get default names.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tissues: Vec<String>,
    pub records: Vec<TranscriptRecord>,
}

pub fn parse_dataset(text: &str, file: &str) -> Result<Dataset, DataError> {
    let mut out = Vec::new();
    let mut tissues: Option<Vec<String>> = None;
    let mut n_tissues = None;
    let mut window = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(TISSUES_TAG).filter(|r| r.is_empty() || r.starts_with('\t')) {
            if tissues.is_some() || !out.is_empty() {
                return Err(parse_err(file, i + 1, "tissue header must come first and only once"));
            }
            let names: Vec<String> = rest.split('\t').skip(1).map(|t| t.trim().to_string()).collect();
            if names.is_empty() || names.iter().any(String::is_empty) {
                return Err(parse_err(file, i + 1, "empty tissue name"));
            }
            n_tissues = Some(names.len());
            tissues = Some(names);
            continue;
        }
        let f = split_tab(line);
        if f.len() != 8 {
            return Err(parse_err(file, i + 1, format!("expected 8 fields, found {}", f.len())));
        }
        if f[0].is_empty() || f[1].is_empty() || f[2].is_empty() || f[3].is_empty() {
            return Err(parse_err(file, i + 1, "empty id or sequence field"));
        }
        let targets = f[5]
            .split(',')
            .map(|s| parse_f64(s, file, i + 1, "target"))
            .collect::<Result<Vec<_>, _>>()?;
        if *n_tissues.get_or_insert(targets.len()) != targets.len() {
            return Err(parse_err(file, i + 1, "inconsistent number of targets"));
        }
        if *window.get_or_insert(f[2].len()) != f[2].len() {
            return Err(parse_err(file, i + 1, "inconsistent DNA window length"));
        }
        out.push(TranscriptRecord {
            transcript_id: f[0].to_string(),
            gene_id: f[1].to_string(),
            dna_window: f[2].to_string(),
            rna_seq: f[3].to_string(),
            protein_seq: (!f[4].is_empty()).then(|| f[4].to_string()),
            targets,
            strand: f[6].parse().map_err(|e: String| parse_err(file, i + 1, e))?,
            scale: f[7].parse().map_err(|e: String| parse_err(file, i + 1, e))?,
        });
    }
    if out.is_empty() {
        return Err(parse_err(file, 1, "no records"));
    }
    let tissues = tissues.unwrap_or_else(|| default_tissue_names(n_tissues.unwrap_or(0)));
    Ok(Dataset { tissues, records: out })
}

/// Settings of the planted-signal generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub genes: usize,
    pub isoforms_per_gene: usize,
    pub num_tissues: usize,
    pub dna_length: usize,
    pub rna_length: usize,
    /// Protein lengths are drawn uniformly from `[protein_min, protein_cap]`.
    pub protein_min: usize,
    /// The `P` of the `min(len, P)/P` protein feature.
    pub protein_cap: usize,
    /// Largest number of DNA motif copies per gene.
    pub max_dna_motifs: usize,
    pub motif_length: usize,
    /// Motifs start at multiples of this (match the nucleotide k-mer size so
    /// motifs stay whole tokens).
    pub motif_alignment: usize,
    pub rna_motif_probability: f64,
    pub noncoding_fraction: f64,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            genes: 200,
            isoforms_per_gene: 3,
            num_tissues: 30,
            dna_length: 96,
            rna_length: 96,
            protein_min: 4,
            protein_cap: 24,
            max_dna_motifs: 3,
            motif_length: 6,
            motif_alignment: 3,
            rna_motif_probability: 0.5,
            noncoding_fraction: 0.0,
            noise: 0.1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.genes == 0 || self.isoforms_per_gene == 0 || self.num_tissues == 0 {
            return fail("genes, isoforms and tissues must be positive");
        }
        if self.motif_length == 0 || self.motif_alignment == 0 {
            return fail("motif length and alignment must be positive");
        }
        let slot = self.motif_length.div_ceil(self.motif_alignment) * self.motif_alignment;
        if self.dna_length / slot < self.max_dna_motifs || self.dna_length < self.motif_length {
            return fail("dna_length too short for the motif copies");
        }
        if self.rna_length < self.motif_length {
            return fail("rna_length shorter than the motif");
        }
        if self.protein_min == 0 || self.protein_min > self.protein_cap {
            return fail("need 1 <= protein_min <= protein_cap");
        }
        if !(0.0..=1.0).contains(&self.rna_motif_probability) || !(0.0..1.0).contains(&self.noncoding_fraction) {
            return fail("probabilities must lie in [0,1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be a non-negative number");
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("synthetic.genes", self.genes);
        kv.set("synthetic.isoforms_per_gene", self.isoforms_per_gene);
        kv.set("synthetic.num_tissues", self.num_tissues);
        kv.set("synthetic.dna_length", self.dna_length);
        kv.set("synthetic.rna_length", self.rna_length);
        kv.set("synthetic.protein_min", self.protein_min);
        kv.set("synthetic.protein_cap", self.protein_cap);
        kv.set("synthetic.max_dna_motifs", self.max_dna_motifs);
        kv.set("synthetic.motif_length", self.motif_length);
        kv.set("synthetic.motif_alignment", self.motif_alignment);
        kv.set("synthetic.rna_motif_probability", self.rna_motif_probability);
        kv.set("synthetic.noncoding_fraction", self.noncoding_fraction);
        kv.set("synthetic.noise", self.noise);
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self, crate::config::ConfigError> {
        let d = Self::default();
        let get = |k: &str, v: usize| kv.parsed::<usize>(k).map(|o| o.unwrap_or(v));
        let getf = |k: &str, v: f64| kv.parsed::<f64>(k).map(|o| o.unwrap_or(v));
        Ok(Self {
            genes: get("synthetic.genes", d.genes)?,
            isoforms_per_gene: get("synthetic.isoforms_per_gene", d.isoforms_per_gene)?,
            num_tissues: get("synthetic.num_tissues", d.num_tissues)?,
            dna_length: get("synthetic.dna_length", d.dna_length)?,
            rna_length: get("synthetic.rna_length", d.rna_length)?,
            protein_min: get("synthetic.protein_min", d.protein_min)?,
            protein_cap: get("synthetic.protein_cap", d.protein_cap)?,
            max_dna_motifs: get("synthetic.max_dna_motifs", d.max_dna_motifs)?,
            motif_length: get("synthetic.motif_length", d.motif_length)?,
            motif_alignment: get("synthetic.motif_alignment", d.motif_alignment)?,
            rna_motif_probability: getf("synthetic.rna_motif_probability", d.rna_motif_probability)?,
            noncoding_fraction: getf("synthetic.noncoding_fraction", d.noncoding_fraction)?,
            noise: getf("synthetic.noise", d.noise)?,
        })
    }
}

/// Everything needed to recompute the planted signal.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub config: SyntheticConfig,
    pub seed: u64,
    pub dna_motif: String,
    pub rna_motif: String,
    pub base: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl GroundTruth {
    /// Noise-free `log(1 + TPM)` for the given features.
    pub fn signal(&self, tissue: usize, dna_count: usize, rna_has_motif: bool, protein_feature: f64) -> f64 {
        let ci = if rna_has_motif { dna_count as f64 } else { 0.0 };
        self.base[tissue] + self.a[tissue] * ci + self.b[tissue] * protein_feature
    }

    /// `min(len, P) / P`, zero for non-coding records.
    pub fn protein_feature(&self, protein: Option<&str>) -> f64 {
        let cap = self.config.protein_cap;
        protein.map_or(0.0, |p| p.len().min(cap) as f64 / cap as f64)
    }

    pub fn to_text(&self) -> String {
        let mut kv = self.config.to_key_values();
        kv.set("truth.seed", self.seed);
        kv.set("truth.dna_motif", &self.dna_motif);
        kv.set("truth.rna_motif", &self.rna_motif);
        kv.set("truth.target", "log1p(tpm) = max(0, base_t + a_t*dna_motif_count*rna_motif_present + b_t*min(len(protein),P)/P + noise)");
        for t in 0..self.a.len() {
            kv.set(&format!("truth.base.{t}"), self.base[t]);
            kv.set(&format!("truth.a.{t}"), self.a[t]);
            kv.set(&format!("truth.b.{t}"), self.b[t]);
        }
        kv.to_text()
    }
}

/// Non-overlapping occurrences of `motif` in `seq`.
pub fn count_motif(seq: &str, motif: &str) -> usize {
    if motif.is_empty() {
        return 0;
    }
    seq.match_indices(motif).count()
}

const BASES: [u8; 4] = *b"ACGT";
const RESIDUES: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

fn random_bases<R: Rng>(n: usize, r: &mut R) -> Vec<u8> {
    (0..n).map(|_| BASES[r.random_range(0..4)]).collect()
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Random sequence of `len` bases with `motif` at each of `count` distinct
/// aligned slots and nowhere else (also not across slot boundaries).
fn planted<R: Rng>(len: usize, motif: &[u8], count: usize, align: usize, avoid: &[u8], r: &mut R) -> Vec<u8> {
    let slot = motif.len().div_ceil(align) * align;
    let n_slots = (len - motif.len()) / slot + 1;
    loop {
        let mut s = random_bases(len, r);
        let mut slots: Vec<usize> = (0..n_slots).collect();
        slots.shuffle(r);
        for &k in &slots[..count] {
            s[k * slot..k * slot + motif.len()].copy_from_slice(motif);
        }
        let found = s.windows(motif.len()).filter(|w| *w == motif).count();
        if found == count && !contains(&s, avoid) {
            return s;
        }
    }
}

/// Planted-signal dataset. Each gene draws a DNA motif count `c`; each
/// isoform carries the RNA motif with fixed probability; the target is
/// planted in `log(1 + TPM)` space so that normalized targets are affine in
/// `a_t · c · 1[rna motif] + b_t · min(len(protein), P)/P`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<(Vec<TranscriptRecord>, GroundTruth), DataError> {
    config.validate()?;
    let mut r = rng::stream(seed, rng::SYNTHETIC);
    let truth = draw_truth(config, seed, &mut r);
    let records = draw_genes(&truth, config.genes, "GENE", &mut r);
    Ok((records, truth))
}

/// Unlabeled-style corpus for encoder warm-up: the motifs and coefficients
/// of `generate_synthetic(config, seed)` but `genes` fresh genes drawn from
/// a separate stream, so no sequence is shared with the labeled set.
pub fn generate_synthetic_corpus(config: &SyntheticConfig, seed: u64, genes: usize) -> Result<Vec<TranscriptRecord>, DataError> {
    config.validate()?;
    let truth = draw_truth(config, seed, &mut rng::stream(seed, rng::SYNTHETIC));
    let mut r = rng::stream(seed, &format!("{}/corpus", rng::SYNTHETIC));
    Ok(draw_genes(&truth, genes, "CORPUS", &mut r))
}

fn draw_truth<R: Rng>(config: &SyntheticConfig, seed: u64, r: &mut R) -> GroundTruth {
    let dna_motif = random_bases(config.motif_length, r);
    let rna_motif = loop {
        let m = random_bases(config.motif_length, r);
        if m != dna_motif {
            break m;
        }
    };
    let nt = config.num_tissues;
    let base: Vec<f64> = (0..nt).map(|_| r.random_range(1.0..2.0)).collect();
    let a: Vec<f64> = (0..nt).map(|_| r.random_range(0.5..1.5)).collect();
    let b: Vec<f64> = (0..nt).map(|_| r.random_range(0.5..1.5)).collect();
    GroundTruth {
        config: config.clone(),
        seed,
        dna_motif: String::from_utf8(dna_motif).expect("ASCII"),
        rna_motif: String::from_utf8(rna_motif).expect("ASCII"),
        base,
        a,
        b,
    }
}

fn draw_genes<R: Rng>(truth: &GroundTruth, genes: usize, prefix: &str, r: &mut R) -> Vec<TranscriptRecord> {
    let config = &truth.config;
    let nt = config.num_tissues;
    let dna_motif = truth.dna_motif.as_bytes();
    let rna_motif = truth.rna_motif.as_bytes();
    let noise = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let gene_width = genes.to_string().len();
    let iso_width = config.isoforms_per_gene.to_string().len();
    let mut records = Vec::with_capacity(genes * config.isoforms_per_gene);
    for g in 0..genes {
        let c = r.random_range(0..=config.max_dna_motifs);
        let dna = planted(config.dna_length, dna_motif, c, config.motif_alignment, rna_motif, r);
        let gene_id = format!("{prefix}{:0gene_width$}", g);
        for i in 0..config.isoforms_per_gene {
            let has = r.random_bool(config.rna_motif_probability);
            let rna = planted(config.rna_length, rna_motif, usize::from(has), config.motif_alignment, dna_motif, r);
            let coding = !r.random_bool(config.noncoding_fraction);
            let protein = coding.then(|| {
                let len = r.random_range(config.protein_min..=config.protein_cap);
                let mut p = vec![b'M'];
                p.extend((1..len).map(|_| RESIDUES[r.random_range(0..20)]));
                String::from_utf8(p).expect("ASCII")
            });
            let pf = truth.protein_feature(protein.as_deref());
            let targets = (0..nt)
                .map(|t| {
                    let eps = if config.noise > 0.0 { noise.sample(r) } else { 0.0 };
                    (truth.signal(t, c, has, pf) + eps).max(0.0).exp_m1()
                })
                .collect();
            records.push(TranscriptRecord {
                transcript_id: format!("{gene_id}.T{:0iso_width$}", i),
                gene_id: gene_id.clone(),
                dna_window: String::from_utf8(dna.clone()).expect("ASCII"),
                rna_seq: String::from_utf8(rna).expect("ASCII"),
                protein_seq: protein,
                targets,
                scale: TargetScale::RawTpm,
                strand: Strand::Forward,
            });
        }
    }
    records
}
