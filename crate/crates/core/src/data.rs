//! Datasets: file formats, normalization, splits, synthetic generators and
//! label jitter.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hasher;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{encode_sequence, PropertySchema, Schema, TokenizedSequence, Vocabulary};

/// One record: pre-tokenized text, optional segment ranges, property values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub tokens: Vec<String>,
    /// Half-open `[start, end)` token ranges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<(usize, usize)>>,
    #[serde(default)]
    pub props: BTreeMap<String, f64>,
}

impl Example {
    pub fn new(tokens: Vec<String>, props: BTreeMap<String, f64>) -> Self {
        Self { tokens, segments: None, props }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.tokens.is_empty() {
            return Err("empty token list".into());
        }
        if let Some((name, v)) = self.props.iter().find(|(_, v)| !v.is_finite()) {
            return Err(format!("property {name} is not finite ({v})"));
        }
        if let Some(segs) = &self.segments {
            for &(s, e) in segs {
                if s >= e || e > self.tokens.len() {
                    return Err(format!("segment [{s}, {e}) invalid for {} tokens", self.tokens.len()));
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self, vocab: &Vocabulary) -> Result<TokenizedSequence> {
        encode_sequence(&self.props, &self.tokens, vocab)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// Guesses from the file extension; defaults to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

pub fn load(path: impl AsRef<Path>, format: Format) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    match format {
        Format::Jsonl => parse_jsonl(&text, &name),
        Format::Csv => parse_csv(&text, &name),
    }
}

fn record_error(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Record { path: path.to_string(), line, message: message.into() }
}

pub fn parse_jsonl(text: &str, source: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(line).map_err(|e| record_error(source, i + 1, e.to_string()))?;
        ex.validate().map_err(|m| record_error(source, i + 1, m))?;
        out.push(ex);
    }
    Ok(out)
}

fn parse_segments(field: &str) -> std::result::Result<Vec<(usize, usize)>, String> {
    field
        .split_whitespace()
        .map(|s| {
            let (a, b) = s.split_once(':').ok_or_else(|| format!("bad segment {s:?}"))?;
            let a = a.parse().map_err(|_| format!("bad segment {s:?}"))?;
            let b = b.parse().map_err(|_| format!("bad segment {s:?}"))?;
            Ok((a, b))
        })
        .collect()
}

/// CSV with a `tokens` column (whitespace-joined), an optional `segments`
/// column (`start:end` pairs), and one column per property.
pub fn parse_csv(text: &str, source: &str) -> Result<Vec<Example>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| record_error(source, 1, e.to_string()))?.clone();
    let tokens_col = headers
        .iter()
        .position(|h| h == "tokens")
        .ok_or_else(|| record_error(source, 1, "missing tokens column"))?;
    let segments_col = headers.iter().position(|h| h == "segments");
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = rec.as_ref().ok().and_then(|r| r.position()).map_or(i + 2, |p| p.line() as usize);
        let rec = rec.map_err(|e| record_error(source, line, e.to_string()))?;
        let mut ex = Example::new(rec[tokens_col].split_whitespace().map(str::to_string).collect(), BTreeMap::new());
        for (c, h) in headers.iter().enumerate() {
            if c == tokens_col || Some(c) == segments_col {
                continue;
            }
            let v: f64 = rec[c]
                .trim()
                .parse()
                .map_err(|_| record_error(source, line, format!("column {h}: bad number {:?}", &rec[c])))?;
            ex.props.insert(h.to_string(), v);
        }
        if let Some(c) = segments_col {
            if !rec[c].trim().is_empty() {
                ex.segments = Some(parse_segments(&rec[c]).map_err(|m| record_error(source, line, m))?);
            }
        }
        ex.validate().map_err(|m| record_error(source, line, m))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn to_jsonl(data: &[Example]) -> String {
    let mut out = String::new();
    for ex in data {
        out.push_str(&serde_json::to_string(ex).expect("example serializes"));
        out.push('\n');
    }
    out
}

pub fn to_csv(data: &[Example]) -> Result<String> {
    let names: BTreeSet<&str> = data.iter().flat_map(|e| e.props.keys().map(String::as_str)).collect();
    let with_segments = data.iter().any(|e| e.segments.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["tokens"];
    if with_segments {
        header.push("segments");
    }
    header.extend(names.iter().copied());
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for ex in data {
        let mut row = vec![ex.tokens.join(" ")];
        if with_segments {
            let segs = ex.segments.as_deref().unwrap_or(&[]);
            row.push(segs.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(" "));
        }
        for name in &names {
            let v = ex
                .props
                .get(*name)
                .ok_or_else(|| Error::UnknownProperty(format!("{name} missing from a CSV row")))?;
            row.push(format!("{v}"));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn save(path: impl AsRef<Path>, data: &[Example], format: Format) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        Format::Jsonl => to_jsonl(data),
        Format::Csv => to_csv(data)?,
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// 64-bit FNV-1a.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// FNV-1a over the canonical JSONL serialization.
pub fn dataset_hash(data: &[Example]) -> u64 {
    fnv64(to_jsonl(data).as_bytes())
}

pub fn round_to(x: f64, decimals: u32) -> f64 {
    let s = 10f64.powi(decimals as i32);
    (x * s).round() / s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormRange {
    pub min: f64,
    pub max: f64,
}

impl NormRange {
    pub fn of(values: &[f64]) -> Option<Self> {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min.is_finite() && max.is_finite()).then_some(Self { min, max })
    }
}

/// Maps `range` onto [0, 1], clamping values outside it, rounded to `decimals`.
pub fn normalize(values: &[f64], range: NormRange, decimals: u32) -> Result<Vec<f64>> {
    let span = range.max - range.min;
    if !(span > 0.0 && span.is_finite()) {
        return Err(Error::Config(format!("degenerate normalization range [{}, {}]", range.min, range.max)));
    }
    Ok(values.iter().map(|&x| round_to(((x - range.min) / span).clamp(0.0, 1.0), decimals)).collect())
}

pub fn denormalize(values: &[f64], range: NormRange) -> Vec<f64> {
    values.iter().map(|&v| range.min + v * (range.max - range.min)).collect()
}

/// Normalizes one property of every example in place.
pub fn normalize_property(data: &mut [Example], name: &str, range: NormRange, decimals: u32) -> Result<()> {
    let values: Vec<f64> = data
        .iter()
        .map(|e| e.props.get(name).copied().ok_or_else(|| Error::UnknownProperty(name.to_string())))
        .collect::<Result<_>>()?;
    for (ex, v) in data.iter_mut().zip(normalize(&values, range, decimals)?) {
        ex.props.insert(name.to_string(), v);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    FractionOfA,
    WeightedSum,
    /// Three delimited segments, each with its own target symbol; the
    /// property is the mean share of target symbols per segment. Generated
    /// segments hold at most [`SEGMENT_TARGET_CAP`] target symbols, so the
    /// best segments never occur in generated data.
    SegmentedYield,
}

/// Symbol separating segments in generated segmented sequences.
pub const SEGMENT_DELIMITER: &str = ">";

/// Parameters of a synthetic dataset. For [`SynthKind::SegmentedYield`],
/// `len` is the length of each of the three segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub len: usize,
    pub alphabet: Vec<String>,
    #[serde(default = "default_decimals")]
    pub decimals: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_property")]
    pub property: String,
}

fn default_decimals() -> u32 {
    3
}

fn default_property() -> String {
    "y".into()
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n: usize, len: usize, alphabet_size: usize, decimals: u32, seed: u64) -> Self {
        Self { kind, n, len, alphabet: letters(alphabet_size), decimals, seed, property: default_property() }
    }
}

/// `A`, `B`, `C`, ...
pub fn letters(n: usize) -> Vec<String> {
    (0..n).map(|i| char::from(b'A' + (i % 26) as u8).to_string()).collect()
}

/// Number of segments in [`SynthKind::SegmentedYield`] sequences.
pub const SEGMENTS: usize = 3;

/// Largest share of target symbols in a generated segment.
pub const SEGMENT_TARGET_CAP: f64 = 0.7;

impl SynthKind {
    /// Exact, unrounded property of `tokens`. `segments` is only consulted
    /// for [`SynthKind::SegmentedYield`].
    pub fn oracle(&self, tokens: &[String], segments: Option<&[(usize, usize)]>, alphabet: &[String]) -> f64 {
        match self {
            SynthKind::FractionOfA => {
                let target = alphabet.first().map_or("A", String::as_str);
                let target = if alphabet.iter().any(|a| a == "A") { "A" } else { target };
                tokens.iter().filter(|t| *t == target).count() as f64 / tokens.len().max(1) as f64
            }
            SynthKind::WeightedSum => {
                let w = |t: &String| alphabet.iter().position(|a| a == t).map_or(0.0, |i| weight(i, alphabet.len()));
                tokens.iter().map(w).sum::<f64>() / tokens.len().max(1) as f64
            }
            SynthKind::SegmentedYield => {
                let owned;
                let segs = match segments {
                    Some(s) => s,
                    None => {
                        owned = delimited_segments(tokens);
                        &owned
                    }
                };
                if segs.is_empty() {
                    return 0.0;
                }
                let total: f64 = segs
                    .iter()
                    .enumerate()
                    .map(|(s, &(a, b))| {
                        let target = &alphabet[s % alphabet.len()];
                        tokens[a..b].iter().filter(|t| *t == target).count() as f64 / (b - a) as f64
                    })
                    .sum();
                total / segs.len() as f64
            }
        }
    }
}

fn weight(index: usize, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        index as f64 / (size - 1) as f64
    }
}

/// Ranges between [`SEGMENT_DELIMITER`] tokens.
pub fn delimited_segments(tokens: &[String]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t == SEGMENT_DELIMITER {
            out.push((start, i));
            start = i + 1;
        }
    }
    out.push((start, tokens.len()));
    out.retain(|&(a, b)| b > a);
    out
}

/// Draws from `weights`-proportional categorical.
fn categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Seeded synthetic dataset whose property is [`SynthKind::oracle`] rounded
/// to `decimals`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Example>> {
    let k = spec.alphabet.len();
    if k < 2 || spec.len == 0 {
        return Err(Error::Config("synthetic data needs an alphabet of at least 2 and len >= 1".into()));
    }
    if spec.kind == SynthKind::SegmentedYield && spec.alphabet.iter().any(|a| a == SEGMENT_DELIMITER) {
        return Err(Error::Config(format!("alphabet may not contain {SEGMENT_DELIMITER:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let alpha = &spec.alphabet;
    let mut out = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let (tokens, segments) = match spec.kind {
            SynthKind::FractionOfA => {
                let target = if alpha.iter().any(|a| a == "A") { "A" } else { alpha[0].as_str() };
                let others: Vec<&String> = alpha.iter().filter(|a| *a != target).collect();
                let f: f64 = rng.random();
                let tokens = (0..spec.len)
                    .map(|_| {
                        if rng.random::<f64>() < f {
                            target.to_string()
                        } else {
                            others[rng.random_range(0..others.len())].clone()
                        }
                    })
                    .collect();
                (tokens, None)
            }
            SynthKind::WeightedSum => {
                let beta: f64 = rng.random_range(-5.0..5.0);
                let probs: Vec<f64> = (0..k).map(|i| (beta * weight(i, k)).exp()).collect();
                let tokens = (0..spec.len).map(|_| alpha[categorical(&probs, &mut rng)].clone()).collect();
                (tokens, None)
            }
            SynthKind::SegmentedYield => {
                let mut tokens = Vec::with_capacity(SEGMENTS * (spec.len + 1));
                let mut segments = Vec::with_capacity(SEGMENTS);
                for s in 0..SEGMENTS {
                    if s > 0 {
                        tokens.push(SEGMENT_DELIMITER.to_string());
                    }
                    let target = &alpha[s % k];
                    let f: f64 = rng.random();
                    let start = tokens.len();
                    for _ in 0..spec.len {
                        let t = if rng.random::<f64>() < f {
                            target.clone()
                        } else {
                            alpha[rng.random_range(0..k)].clone()
                        };
                        tokens.push(t);
                    }
                    let cap = (SEGMENT_TARGET_CAP * spec.len as f64).floor() as usize;
                    let mut hits: Vec<usize> = (start..tokens.len()).filter(|&i| tokens[i] == *target).collect();
                    while hits.len() > cap {
                        let i = hits.swap_remove(rng.random_range(0..hits.len()));
                        let mut other = rng.random_range(0..k - 1);
                        if other >= s % k {
                            other += 1;
                        }
                        tokens[i] = alpha[other].clone();
                    }
                    segments.push((start, tokens.len()));
                }
                (tokens, Some(segments))
            }
        };
        let value = round_to(spec.kind.oracle(&tokens, segments.as_deref(), alpha), spec.decimals);
        let mut ex = Example::new(tokens, BTreeMap::from([(spec.property.clone(), value)]));
        ex.segments = segments;
        out.push(ex);
    }
    Ok(out)
}

/// Seeded disjoint split by `ratios` (train, valid, test).
pub fn split(data: &[Example], ratios: [f64; 3], seed: u64) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = data.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_valid = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let pick = |r: &[usize]| r.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    Ok((pick(&idx[..n_train]), pick(&idx[n_train..n_train + n_valid]), pick(&idx[n_train + n_valid..])))
}

/// Adds `N(0, sigma^2)` noise to labels of `property` whose exact value holds
/// more than `threshold` of the dataset, then clips to [0, 1] and rounds.
pub fn jitter_labels(
    data: &[Example],
    property: &str,
    sigma: f64,
    threshold: f64,
    decimals: u32,
    seed: u64,
) -> Result<Vec<Example>> {
    let mut out = data.to_vec();
    if sigma <= 0.0 || data.is_empty() {
        return Ok(out);
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("jitter sigma: {e}")))?;
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for ex in data {
        if let Some(v) = ex.props.get(property) {
            *counts.entry(v.to_bits()).or_default() += 1;
        }
    }
    let limit = threshold * data.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ex in &mut out {
        if let Some(v) = ex.props.get_mut(property) {
            if counts[&v.to_bits()] as f64 > limit {
                *v = round_to((*v + noise.sample(&mut rng)).clamp(0.0, 1.0), decimals);
            }
        }
    }
    Ok(out)
}

/// Appends `factor - 1` rewritten copies of every example.
pub fn augment<F>(data: &[Example], factor: usize, seed: u64, mut rewrite: F) -> Vec<Example>
where
    F: FnMut(&Example, &mut ChaCha8Rng) -> Example,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = data.to_vec();
    for _ in 1..factor {
        for ex in data {
            out.push(rewrite(ex, &mut rng));
        }
    }
    out
}

/// Vocabulary over the text symbols of `data` (sorted) with one unsigned
/// `1.<decimals>` property schema per property name.
pub fn build_vocabulary(data: &[Example], decimals: u32) -> Result<Vocabulary> {
    let names: BTreeSet<&String> = data.iter().flat_map(|e| e.props.keys()).collect();
    let schema = Schema::new(names.into_iter().map(|n| PropertySchema::new(n.clone(), 1, decimals)).collect());
    let symbols: BTreeSet<&String> = data.iter().flat_map(|e| e.tokens.iter()).collect();
    Vocabulary::new(schema, symbols)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(tokens: &str, y: f64) -> Example {
        Example::new(tokens.split_whitespace().map(str::to_string).collect(), BTreeMap::from([("y".into(), y)]))
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let mut data = vec![ex("A B C", 0.5), ex("C", 1.0)];
        data[1].segments = Some(vec![(0, 1)]);
        let text = to_jsonl(&data);
        assert_eq!(parse_jsonl(&text, "x").unwrap(), data);
        assert!(parse_jsonl("", "x").unwrap().is_empty());
        let bad = format!("{}{{\"tokens\": 3}}\n", to_jsonl(&data[..1]));
        match parse_jsonl(&bad, "f.jsonl") {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let empty_tokens = "{\"tokens\": [], \"props\": {}}\n";
        assert!(matches!(parse_jsonl(empty_tokens, "f"), Err(Error::Record { line: 1, .. })));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let mut data = vec![ex("A B", 0.25), ex("B B A", 0.125)];
        data[0].segments = Some(vec![(0, 1), (1, 2)]);
        let text = to_csv(&data).unwrap();
        let back = parse_csv(&text, "x").unwrap();
        assert_eq!(back[0], data[0]);
        assert_eq!(back[1].tokens, data[1].tokens);
        assert_eq!(back[1].props, data[1].props);
        assert!(parse_csv("tokens,y\n", "x").unwrap().is_empty());
        match parse_csv("tokens,y\nA,0.1\nB,oops\n", "f.csv") {
            Err(Error::Record { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_generate(&SynthSpec::new(SynthKind::WeightedSum, 20, 6, 5, 3, 1)).unwrap();
        for (name, fmt) in [("d.jsonl", Format::Jsonl), ("d.csv", Format::Csv)] {
            let path = dir.path().join(name);
            save(&path, &data, fmt).unwrap();
            assert_eq!(Format::from_path(&path), fmt);
            assert_eq!(load(&path, fmt).unwrap(), data);
        }
    }

    #[test]
    fn normalization() {
        let r = NormRange { min: 0.0, max: 2.0 };
        assert_eq!(normalize(&[0.0, 1.0, 2.0], r, 3).unwrap(), vec![0.0, 0.5, 1.0]);
        let r = NormRange { min: -3.0, max: 7.0 };
        let xs: Vec<f64> = (0..200).map(|i| -3.0 + i as f64 * 0.0502).collect();
        let back = denormalize(&normalize(&xs, r, 3).unwrap(), r);
        for (a, b) in xs.iter().zip(back) {
            assert!(((a - b) / 10.0).abs() <= 0.5e-3 + 1e-12);
        }
        assert!(normalize(&[1.0], NormRange { min: 1.0, max: 1.0 }, 3).is_err());
    }

    #[test]
    fn fraction_oracle_examples() {
        let t = |s: &str| s.chars().map(|c| c.to_string()).collect::<Vec<_>>();
        let alpha = letters(10);
        assert_eq!(round_to(SynthKind::FractionOfA.oracle(&t("AAB"), None, &alpha), 3), 0.667);
        assert_eq!(SynthKind::FractionOfA.oracle(&t("AAAA"), None, &alpha), 1.0);
        // segment targets are A, B, C; shares 1/2, 1/4 and 1
        let y = SynthKind::SegmentedYield.oracle(&t("AABC>BXXX>CCCC"), None, &alpha);
        assert!((y - 7.0 / 12.0).abs() < 1e-12);
        let explicit = SynthKind::SegmentedYield.oracle(&t("AXBXCC"), Some(&[(0, 2), (2, 4), (4, 6)]), &alpha);
        assert!((explicit - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn synth_is_reproducible() {
        for kind in [SynthKind::FractionOfA, SynthKind::WeightedSum, SynthKind::SegmentedYield] {
            let spec = SynthSpec::new(kind, 50, 8, 6, 3, 42);
            let a = synth_generate(&spec).unwrap();
            let b = synth_generate(&spec).unwrap();
            assert_eq!(dataset_hash(&a), dataset_hash(&b));
            let c = synth_generate(&SynthSpec { seed: 43, ..spec.clone() }).unwrap();
            assert_ne!(dataset_hash(&a), dataset_hash(&c));
            for e in &a {
                let y = e.props["y"];
                assert!((0.0..=1.0).contains(&y));
                let exact = kind.oracle(&e.tokens, e.segments.as_deref(), &spec.alphabet);
                assert_eq!(round_to(exact, 3), y);
            }
        }
    }

    #[test]
    fn segmented_layout() {
        let data = synth_generate(&SynthSpec::new(SynthKind::SegmentedYield, 5, 4, 5, 3, 0)).unwrap();
        for e in &data {
            assert_eq!(e.tokens.len(), 3 * 4 + 2);
            assert_eq!(e.segments.as_deref().unwrap(), &[(0, 4), (5, 9), (10, 14)]);
            assert_eq!(delimited_segments(&e.tokens), vec![(0, 4), (5, 9), (10, 14)]);
        }
        let data = synth_generate(&SynthSpec::new(SynthKind::SegmentedYield, 500, 10, 5, 3, 1)).unwrap();
        for e in &data {
            for (s, &(a, b)) in e.segments.as_deref().unwrap().iter().enumerate() {
                let hits = e.tokens[a..b].iter().filter(|t| **t == letters(5)[s]).count();
                assert!(hits <= 7);
            }
        }
        assert!(data.iter().any(|e| e.props["y"] == 0.7));
    }

    #[test]
    fn splits() {
        let data = synth_generate(&SynthSpec::new(SynthKind::FractionOfA, 101, 5, 4, 2, 3)).unwrap();
        let (tr, va, te) = split(&data, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (101, 0, 0));
        let (tr, va, te) = split(&data, [0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!(tr.len() + va.len() + te.len(), 101);
        let again = split(&data, [0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!(tr, again.0);
        let mut all: Vec<String> = tr.iter().chain(&va).chain(&te).map(|e| to_jsonl(std::slice::from_ref(e))).collect();
        let mut orig: Vec<String> = data.iter().map(|e| to_jsonl(std::slice::from_ref(e))).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert!(split(&data, [0.5, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn jitter() {
        let mut data: Vec<Example> = (0..100).map(|i| ex("A", (i % 50) as f64 / 50.0)).collect();
        assert_eq!(jitter_labels(&data, "y", 0.0, 0.05, 3, 0).unwrap(), data);
        assert_eq!(jitter_labels(&data, "y", 0.1, 0.05, 3, 0).unwrap(), data);
        for e in data.iter_mut().take(30) {
            e.props.insert("y".into(), 0.5);
        }
        let out = jitter_labels(&data, "y", 0.05, 0.05, 3, 0).unwrap();
        let mut counts: HashMap<u64, usize> = HashMap::new();
        for e in &out {
            let v = e.props["y"];
            assert!((0.0..=1.0).contains(&v));
            *counts.entry(v.to_bits()).or_default() += 1;
        }
        assert!((*counts.values().max().unwrap() as f64) / 100.0 < 0.05);
    }

    #[test]
    fn vocabulary_from_data() {
        let data = vec![ex("B A", 0.1), ex("C", 0.2)];
        let v = build_vocabulary(&data, 3).unwrap();
        assert!(v.text_id("A").is_ok() && v.text_id("C").is_ok());
        let seq = data[0].encode(&v).unwrap();
        assert_eq!(seq.text_len(), 2);
        assert_eq!(seq.blocks.len(), 1);
    }
}
