//! Aggregation feature sets: per-segment score statistics and speech-graph
//! measures over tokenized transcripts.
//!
//! Statistic conventions (the upstream description leaves them open):
//! - standard deviation is the population form (1/n);
//! - skewness is the adjusted Fisher-Pearson coefficient
//!   `G1 = g1 * sqrt(n(n-1)) / (n-2)` with `g1 = m3 / m2^(3/2)`;
//! - kurtosis is the adjusted excess form
//!   `G2 = ((n+1)g2 + 6)(n-1) / ((n-2)(n-3))` with `g2 = m4 / m2^2 - 3`;
//! - zero-variance inputs (and lengths too short for the adjusted formulas)
//!   define skewness and kurtosis as 0;
//! - percentiles interpolate linearly at position `(n-1) * p / 100`;
//! - range-exceedance fractions use a strict `> min + f * range` comparison,
//!   so a zero range yields fractions of 0;
//! - the set is completed to its stated width of 31 with the mean absolute
//!   deviation around the mean and the root mean square of the raw values.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::TempNormError;

/// Number of statistics emitted per scalar dimension.
pub const STAT_COUNT: usize = 31;
/// Number of measures emitted per speech graph.
pub const GRAPH_MEASURE_COUNT: usize = 12;

/// Names of the 31 statistics, in output order. This ordering is normative
/// for file formats.
pub const STAT_NAMES: [&str; STAT_COUNT] = [
    "mean",
    "std",
    "skewness",
    "kurtosis",
    "min",
    "max",
    "range",
    "p1",
    "p10",
    "p25",
    "p50",
    "p75",
    "p90",
    "p99",
    "d25_50",
    "d50_75",
    "d25_75",
    "d10_90",
    "d1_99",
    "slope",
    "intercept",
    "r_squared",
    "mean_error",
    "mse",
    "frac_above_10",
    "frac_above_25",
    "frac_above_50",
    "frac_above_75",
    "frac_above_90",
    "mad",
    "rms",
];

/// Linear-interpolation percentile on the sorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, TempNormError> {
    if values.is_empty() {
        return Err(TempNormError::InsufficientData(
            "percentile of empty input".into(),
        ));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(TempNormError::InvalidParameter(format!(
            "percentile p must be in [0,100], got {p}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Ordinary least squares fit of `values` against indices `0..n-1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Mean residual; zero by construction, kept for format fidelity.
    pub mean_error: f64,
    pub mse: f64,
}

pub fn linear_fit_stats(values: &[f64]) -> Result<LinearFit, TempNormError> {
    let n = values.len();
    if n < 2 {
        return Err(TempNormError::InsufficientData(format!(
            "linear fit needs at least 2 points, got {n}"
        )));
    }
    let nf = n as f64;
    let x_mean = (nf - 1.0) / 2.0;
    let y_mean = values.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (i, &y) in values.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxx += dx * dx;
        sxy += dx * (y - y_mean);
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    let mut err_sum = 0.0;
    for (i, &y) in values.iter().enumerate() {
        let r = y - (slope * i as f64 + intercept);
        ss_res += r * r;
        err_sum += r;
        let d = y - y_mean;
        ss_tot += d * d;
    }
    let r_squared = if ss_tot == 0.0 {
        // Constant input fit exactly by a flat line.
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
        mean_error: err_sum / nf,
        mse: ss_res / nf,
    })
}

/// The 31 statistics over one scalar sequence, in [`STAT_NAMES`] order.
pub fn segment_stats(values: &[f64]) -> Result<[f64; STAT_COUNT], TempNormError> {
    let n = values.len();
    if n < 2 {
        return Err(TempNormError::InsufficientData(format!(
            "segment statistics need at least 2 values, got {n}"
        )));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(TempNormError::InvalidInput(format!(
            "non-finite value {bad}"
        )));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &v in values {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    let std = m2.sqrt();
    let skewness = if m2 > 0.0 && n >= 3 {
        (m3 / m2.powf(1.5)) * (nf * (nf - 1.0)).sqrt() / (nf - 2.0)
    } else {
        0.0
    };
    let kurtosis = if m2 > 0.0 && n >= 4 {
        let g2 = m4 / (m2 * m2) - 3.0;
        ((nf + 1.0) * g2 + 6.0) * (nf - 1.0) / ((nf - 2.0) * (nf - 3.0))
    } else {
        0.0
    };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;

    let pct = |p: f64| percentile(values, p);
    let p1 = pct(1.0)?;
    let p10 = pct(10.0)?;
    let p25 = pct(25.0)?;
    let p50 = pct(50.0)?;
    let p75 = pct(75.0)?;
    let p90 = pct(90.0)?;
    let p99 = pct(99.0)?;

    let fit = linear_fit_stats(values)?;

    let frac_above = |f: f64| {
        let threshold = min + f * range;
        values.iter().filter(|&&v| v > threshold).count() as f64 / nf
    };

    Ok([
        mean,
        std,
        skewness,
        kurtosis,
        min,
        max,
        range,
        p1,
        p10,
        p25,
        p50,
        p75,
        p90,
        p99,
        p50 - p25,
        p75 - p50,
        p75 - p25,
        p90 - p10,
        p99 - p1,
        fit.slope,
        fit.intercept,
        fit.r_squared,
        fit.mean_error,
        fit.mse,
        frac_above(0.10),
        frac_above(0.25),
        frac_above(0.50),
        frac_above(0.75),
        frac_above(0.90),
        values.iter().map(|v| (v - mean).abs()).sum::<f64>() / nf,
        (values.iter().map(|v| v * v).sum::<f64>() / nf).sqrt(),
    ])
}

/// Ordered per-segment score vectors, one fixed-width vector per segment.
/// The default width is 6 (three activation bins plus three valence bins).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScoreSeries {
    pub segments: Vec<Vec<f64>>,
}

impl SegmentScoreSeries {
    pub fn width(&self) -> usize {
        self.segments.first().map_or(0, Vec::len)
    }
}

/// Concatenated [`segment_stats`] per score dimension. With `expected_width`
/// of 6 this yields the 186-value vector.
pub fn emotion_feature_vector(
    series: &SegmentScoreSeries,
    expected_width: usize,
) -> Result<Vec<f64>, TempNormError> {
    if series.segments.len() < 2 {
        return Err(TempNormError::InsufficientData(
            "need at least 2 segments".into(),
        ));
    }
    let width = series.width();
    if width != expected_width {
        return Err(TempNormError::InvalidInput(format!(
            "expected {expected_width} score dimensions per segment, got {width}"
        )));
    }
    if let Some(bad) = series.segments.iter().find(|s| s.len() != width) {
        return Err(TempNormError::InvalidInput(format!(
            "ragged segment of width {}, expected {width}",
            bad.len()
        )));
    }
    let mut out = Vec::with_capacity(width * STAT_COUNT);
    for dim in 0..width {
        let column: Vec<f64> = series.segments.iter().map(|s| s[dim]).collect();
        out.extend_from_slice(&segment_stats(&column)?);
    }
    Ok(out)
}

/// One token of a transcript, carrying the three label variants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub word: String,
    pub lemma: String,
    pub pos: String,
}

/// Ordered segments of tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub segments: Vec<Vec<Token>>,
}

impl TranscriptRecord {
    pub fn word_count(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }
}

/// Which token label forms the graph nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphVariant {
    Word,
    Lemma,
    Pos,
}

/// Directed multigraph over token labels. Edges connect consecutive tokens
/// within a segment; no edges cross segment boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeechGraph {
    labels: Vec<String>,
    /// Edge multiset as (from, to) node indices.
    edges: Vec<(usize, usize)>,
}

impl SpeechGraph {
    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }
}

pub fn build_speech_graph(record: &TranscriptRecord, variant: GraphVariant) -> SpeechGraph {
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut labels = Vec::new();
    let mut edges = Vec::new();
    for segment in &record.segments {
        let mut prev: Option<usize> = None;
        for token in segment {
            let label = match variant {
                GraphVariant::Word => &token.word,
                GraphVariant::Lemma => &token.lemma,
                GraphVariant::Pos => &token.pos,
            };
            let id = *index.entry(label.clone()).or_insert_with(|| {
                labels.push(label.clone());
                labels.len() - 1
            });
            if let Some(p) = prev {
                edges.push((p, id));
            }
            prev = Some(id);
        }
    }
    SpeechGraph { labels, edges }
}

/// Names of the 12 graph measures, in output order.
pub const GRAPH_MEASURE_NAMES: [&str; GRAPH_MEASURE_COUNT] = [
    "nodes",
    "edges",
    "parallel_edges",
    "l1_loops",
    "l2_loops",
    "l3_loops",
    "largest_connected_component",
    "largest_strongly_connected_component",
    "average_total_degree",
    "density",
    "diameter",
    "average_shortest_path",
];

/// The 12 graph measures in [`GRAPH_MEASURE_NAMES`] order.
///
/// Conventions: parallel edges are edges beyond the first between an ordered
/// node pair; L1 counts self-loop edges with multiplicity; L2 counts distinct
/// node pairs with reciprocal edges; L3 counts distinct directed 3-cycles on
/// the binary adjacency; connectivity, diameter, and average shortest path
/// treat edges as undirected and are computed on the largest weakly connected
/// component, excluding infinite distances. An empty graph yields all zeros.
pub fn graph_measures(g: &SpeechGraph) -> [f64; GRAPH_MEASURE_COUNT] {
    let n = g.node_count();
    if n == 0 {
        return [0.0; GRAPH_MEASURE_COUNT];
    }
    let e = g.edge_count();

    let distinct: BTreeSet<(usize, usize)> = g.edges.iter().copied().collect();
    let parallel = e - distinct.len();
    let l1 = g.edges.iter().filter(|(a, b)| a == b).count();

    // Binary adjacency without self-loops for the cycle counts.
    let mut adj = vec![BTreeSet::new(); n];
    for &(a, b) in &distinct {
        if a != b {
            adj[a].insert(b);
        }
    }
    let mut l2 = 0usize;
    for a in 0..n {
        for &b in &adj[a] {
            if b > a && adj[b].contains(&a) {
                l2 += 1;
            }
        }
    }
    let mut l3 = 0usize;
    for a in 0..n {
        for &b in &adj[a] {
            for &c in &adj[b] {
                if c != a && adj[c].contains(&a) {
                    l3 += 1;
                }
            }
        }
    }
    l3 /= 3;

    // Undirected adjacency for weak connectivity and path measures.
    let mut und = vec![BTreeSet::new(); n];
    for &(a, b) in &distinct {
        if a != b {
            und[a].insert(b);
            und[b].insert(a);
        }
    }
    let (wcc, largest_wcc) = largest_component(&und, n);
    let largest_scc = largest_scc_size(&adj, n);

    let avg_degree = 2.0 * e as f64 / n as f64;
    let density = if n > 1 {
        e as f64 / (n as f64 * (n as f64 - 1.0))
    } else {
        0.0
    };

    let (diameter, asp) = path_measures(&und, &wcc);

    [
        n as f64,
        e as f64,
        parallel as f64,
        l1 as f64,
        l2 as f64,
        l3 as f64,
        largest_wcc as f64,
        largest_scc as f64,
        avg_degree,
        density,
        diameter,
        asp,
    ]
}

/// Returns the node set of the largest undirected component and its size.
fn largest_component(und: &[BTreeSet<usize>], n: usize) -> (Vec<usize>, usize) {
    let mut seen = vec![false; n];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &und[u] {
                if !seen[v] {
                    seen[v] = true;
                    comp.push(v);
                    queue.push_back(v);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let size = best.len();
    (best, size)
}

/// Size of the largest strongly connected component (iterative Tarjan).
fn largest_scc_size(adj: &[BTreeSet<usize>], n: usize) -> usize {
    let mut index = vec![usize::MAX; n];
    let mut lowlink = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut next_index = 0usize;
    let mut best = 0usize;

    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        // call stack of (node, neighbor iterator position)
        let mut call: Vec<(usize, Vec<usize>, usize)> = Vec::new();
        index[root] = next_index;
        lowlink[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;
        call.push((root, adj[root].iter().copied().collect(), 0));
        while let Some(top) = call.last() {
            let u = top.0;
            let pos = top.2;
            if pos < top.1.len() {
                let v = top.1[pos];
                call.last_mut().expect("nonempty").2 += 1;
                if index[v] == usize::MAX {
                    index[v] = next_index;
                    lowlink[v] = next_index;
                    next_index += 1;
                    stack.push(v);
                    on_stack[v] = true;
                    call.push((v, adj[v].iter().copied().collect(), 0));
                } else if on_stack[v] {
                    lowlink[u] = lowlink[u].min(index[v]);
                }
            } else {
                call.pop();
                if let Some(parent) = call.last() {
                    let p = parent.0;
                    lowlink[p] = lowlink[p].min(lowlink[u]);
                }
                if lowlink[u] == index[u] {
                    let mut size = 0;
                    loop {
                        let w = stack.pop().expect("tarjan stack underflow");
                        on_stack[w] = false;
                        size += 1;
                        if w == u {
                            break;
                        }
                    }
                    best = best.max(size);
                }
            }
        }
    }
    best
}

/// Diameter and average shortest path over the given undirected component.
fn path_measures(und: &[BTreeSet<usize>], component: &[usize]) -> (f64, f64) {
    if component.len() < 2 {
        return (0.0, 0.0);
    }
    let mut diameter = 0usize;
    let mut dist_sum = 0usize;
    let mut pair_count = 0usize;
    for &start in component {
        let mut dist: HashMap<usize, usize> = HashMap::new();
        dist.insert(start, 0);
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            let du = dist[&u];
            for &v in &und[u] {
                if !dist.contains_key(&v) {
                    dist.insert(v, du + 1);
                    queue.push_back(v);
                }
            }
        }
        for (&v, &d) in &dist {
            if v != start {
                diameter = diameter.max(d);
                dist_sum += d;
                pair_count += 1;
            }
        }
    }
    (diameter as f64, dist_sum as f64 / pair_count as f64)
}

/// The 72-value transcript feature vector: 12 measures for each of the
/// word, lemma, and POS graphs, followed by the same 36 values divided by
/// the total word count.
pub fn transcript_graph_features(record: &TranscriptRecord) -> Result<Vec<f64>, TempNormError> {
    let words = record.word_count();
    if words == 0 {
        return Err(TempNormError::InsufficientData(
            "transcript has no words".into(),
        ));
    }
    let mut raw = Vec::with_capacity(3 * GRAPH_MEASURE_COUNT);
    for variant in [GraphVariant::Word, GraphVariant::Lemma, GraphVariant::Pos] {
        let g = build_speech_graph(record, variant);
        raw.extend_from_slice(&graph_measures(&g));
    }
    let mut out = raw.clone();
    out.extend(raw.iter().map(|v| v / words as f64));
    Ok(out)
}

/// One feature vector tied to a (subject, week) sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub subject_id: String,
    pub week: u32,
    pub features: Vec<f64>,
    /// Identifier of the feature ordering this vector follows.
    pub set: String,
}

/// Writes feature records as JSON Lines.
pub fn write_feature_records<W: Write>(
    records: &[FeatureRecord],
    mut writer: W,
) -> Result<(), TempNormError> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads feature records from JSON Lines.
pub fn read_feature_records<R: BufRead>(reader: R) -> Result<Vec<FeatureRecord>, TempNormError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
