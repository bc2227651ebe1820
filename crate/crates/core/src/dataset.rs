//! Full-information ranking data: LETOR ingestion, binarization, group
//! assignment, query construction and a synthetic generator.
//!
//! Snapshot format (JSON lines, one query per line):
//!
//! ```text
//! {"qid":"7#0","items":[{"x":[0.5,0.0,2.0],"rel":1,"g":0}, ...]}
//! ```
//!
//! A split directory holds `train.jsonl`, `validation.jsonl`, `test.jsonl`
//! and `meta.json` (feature and group counts, group-indicator feature ids and
//! the standardization statistics).

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    #[serde(rename = "x")]
    pub features: Vec<f64>,
    #[serde(rename = "rel")]
    pub relevance: u8,
    #[serde(rename = "g")]
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    #[serde(rename = "qid")]
    pub id: String,
    pub items: Vec<Item>,
}

impl Query {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn relevances(&self) -> Vec<u8> {
        self.items.iter().map(|it| it.relevance).collect()
    }

    pub fn groups(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.group).collect()
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.items.iter().map(|it| it.features.as_slice()).collect()
    }

    /// Number of candidates of `group` in this query, `|G_i^q|`.
    pub fn group_size(&self, group: usize) -> usize {
        self.items.iter().filter(|it| it.group == group).count()
    }

    /// Number of relevant candidates.
    pub fn relevant_count(&self) -> usize {
        self.items.iter().filter(|it| it.relevance == 1).count()
    }
}

/// Train / validation / test queries sharing one feature space and group set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Query>,
    pub validation: Vec<Query>,
    pub test: Vec<Query>,
    pub feature_count: usize,
    pub group_count: usize,
    /// Feature ids that encode group membership; zeroed for group-blind training.
    #[serde(default)]
    pub group_feature_ids: Vec<usize>,
    #[serde(default)]
    pub standardization: Option<Standardizer>,
}

impl DatasetSplit {
    /// Checks the structural invariants: query sizes, feature widths, group
    /// labels, binary relevance and disjoint query ids across splits.
    pub fn validate(&self) -> Result<()> {
        if self.group_count < 2 {
            return Err(Error::Domain(format!("need at least 2 groups, got {}", self.group_count)));
        }
        let mut seen = HashSet::new();
        for (name, split) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            for q in split {
                if q.len() < 2 {
                    return Err(Error::Domain(format!("{name} query {} has {} items (need >= 2)", q.id, q.len())));
                }
                if !seen.insert(q.id.as_str()) {
                    return Err(Error::Domain(format!("query id {} appears in more than one place", q.id)));
                }
                for it in &q.items {
                    if it.features.len() != self.feature_count {
                        return Err(Error::DimensionMismatch { expected: self.feature_count, got: it.features.len() });
                    }
                    if it.relevance > 1 {
                        return Err(Error::Domain(format!("non-binary relevance {} in query {}", it.relevance, q.id)));
                    }
                    if it.group >= self.group_count {
                        return Err(Error::Domain(format!(
                            "group {} out of range for {} groups in query {}",
                            it.group, self.group_count, q.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_queries_jsonl(BufWriter::new(File::create(dir.join("train.jsonl"))?), &self.train)?;
        write_queries_jsonl(BufWriter::new(File::create(dir.join("validation.jsonl"))?), &self.validation)?;
        write_queries_jsonl(BufWriter::new(File::create(dir.join("test.jsonl"))?), &self.test)?;
        let meta = SplitMeta {
            feature_count: self.feature_count,
            group_count: self.group_count,
            group_feature_ids: self.group_feature_ids.clone(),
            standardization: self.standardization.clone(),
        };
        let mut w = BufWriter::new(File::create(dir.join("meta.json"))?);
        serde_json::to_writer_pretty(&mut w, &meta)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: SplitMeta = serde_json::from_reader(BufReader::new(File::open(dir.join("meta.json"))?))?;
        let read =
            |name: &str| -> Result<Vec<Query>> { read_queries_jsonl(BufReader::new(File::open(dir.join(name))?)) };
        let split = Self {
            train: read("train.jsonl")?,
            validation: read("validation.jsonl")?,
            test: read("test.jsonl")?,
            feature_count: meta.feature_count,
            group_count: meta.group_count,
            group_feature_ids: meta.group_feature_ids,
            standardization: meta.standardization,
        };
        split.validate()?;
        Ok(split)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitMeta {
    feature_count: usize,
    group_count: usize,
    group_feature_ids: Vec<usize>,
    standardization: Option<Standardizer>,
}

pub fn write_queries_jsonl<W: Write>(mut w: W, queries: &[Query]) -> Result<()> {
    for q in queries {
        serde_json::to_writer(&mut w, q)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_queries_jsonl<R: BufRead>(r: R) -> Result<Vec<Query>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// LETOR / SVMlight text

/// One line of a LETOR file, features densified.
#[derive(Debug, Clone, PartialEq)]
pub struct LetorRecord {
    pub grade: u8,
    pub qid: String,
    pub features: Vec<f64>,
}

/// Parses `<grade> qid:<id> <fid>:<val> ...` lines.
///
/// Feature ids are 1-based and may be sparse; the dense width is the largest
/// id seen anywhere in the stream and missing entries are 0. Blank lines and
/// trailing `#` comments are ignored.
pub fn parse_letor<R: BufRead>(reader: R) -> Result<Vec<LetorRecord>> {
    let mut sparse = Vec::new();
    let mut width = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: lineno, message };
        let mut tokens = body.split_whitespace();
        let grade_tok = tokens.next().ok_or_else(|| err("missing grade".into()))?;
        let grade: u8 = grade_tok.parse().map_err(|_| err(format!("non-numeric grade {grade_tok:?}")))?;
        let qid_tok = tokens.next().ok_or_else(|| err("missing qid".into()))?;
        let qid = qid_tok
            .strip_prefix("qid:")
            .filter(|s| !s.is_empty())
            .ok_or_else(|| err(format!("expected qid:<id>, got {qid_tok:?}")))?;
        let mut feats = Vec::new();
        for tok in tokens {
            let (fid, val) = tok.split_once(':').ok_or_else(|| err(format!("malformed feature {tok:?}")))?;
            let fid: usize = fid.parse().map_err(|_| err(format!("bad feature id in {tok:?}")))?;
            if fid == 0 {
                return Err(err("feature ids are 1-based".into()));
            }
            let val: f64 = val.parse().map_err(|_| err(format!("bad feature value in {tok:?}")))?;
            width = width.max(fid);
            feats.push((fid - 1, val));
        }
        sparse.push((grade, qid.to_string(), feats));
    }
    Ok(sparse
        .into_iter()
        .map(|(grade, qid, feats)| {
            let mut features = vec![0.0; width];
            for (i, v) in feats {
                features[i] = v;
            }
            LetorRecord { grade, qid, features }
        })
        .collect())
}

/// Writes records back in LETOR form with every feature listed densely.
pub fn write_letor(records: &[LetorRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = write!(out, "{} qid:{}", r.grade, r.qid);
        for (i, v) in r.features.iter().enumerate() {
            let _ = write!(out, " {}:{}", i + 1, v);
        }
        out.push('\n');
    }
    out
}

/// Maps a 0..=4 judgment to binary relevance: grades 3 and 4 are relevant.
pub fn binarize(grade: i64) -> Result<u8> {
    match grade {
        0..=2 => Ok(0),
        3 | 4 => Ok(1),
        _ => Err(Error::Domain(format!("relevance grade {grade} outside 0..=4"))),
    }
}

// ---------------------------------------------------------------------------
// Groups

/// How group thresholds on the attribute feature are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Thresholds {
    /// Raw attribute values.
    Values(Vec<f64>),
    /// Percentile ranks in (0, 100], resolved against the training split.
    Percentiles(Vec<f64>),
}

/// Resolves percentile thresholds against attribute values (training split
/// only). A percentile of 100 or more bounds nothing and is dropped.
pub fn resolve_thresholds(spec: &Thresholds, training_values: &[f64]) -> Result<Vec<f64>> {
    let resolved = match spec {
        Thresholds::Values(v) => v.clone(),
        Thresholds::Percentiles(ps) => {
            if training_values.is_empty() {
                return Err(Error::Domain("cannot resolve percentiles without training values".into()));
            }
            let mut data = Data::new(training_values.to_vec());
            let mut out = Vec::new();
            for &p in ps {
                if !(p > 0.0) || p.is_nan() {
                    return Err(Error::Domain(format!("percentile {p} must be in (0, 100]")));
                }
                if p >= 100.0 {
                    continue;
                }
                out.push(data.quantile(p / 100.0));
            }
            out
        }
    };
    check_thresholds(&resolved)?;
    Ok(resolved)
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Domain("empty threshold list: need at least 2 groups".into()));
    }
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Domain(format!("thresholds must be strictly ascending: {thresholds:?}")));
    }
    Ok(())
}

/// Group index of an attribute value: the number of thresholds strictly below it.
pub fn group_of(value: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().filter(|&&t| t < value).count()
}

/// Labels every item by its attribute feature. Returns the group count
/// (`thresholds.len() + 1`).
pub fn assign_groups(items: &mut [Item], attribute_feature_id: usize, thresholds: &[f64]) -> Result<usize> {
    check_thresholds(thresholds)?;
    for it in items.iter_mut() {
        let value = *it
            .features
            .get(attribute_feature_id)
            .ok_or(Error::DimensionMismatch { expected: attribute_feature_id + 1, got: it.features.len() })?;
        it.group = group_of(value, thresholds);
    }
    Ok(thresholds.len() + 1)
}

// ---------------------------------------------------------------------------
// Query construction

/// A labelled item together with the source query it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    pub qid: String,
    pub item: Item,
}

impl PoolRecord {
    /// Binarizes a LETOR record; the group is left at 0 for later assignment.
    pub fn from_letor(record: &LetorRecord) -> Result<Self> {
        Ok(Self {
            qid: record.qid.clone(),
            item: Item { features: record.features.clone(), relevance: binarize(record.grade as i64)?, group: 0 },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySampling {
    /// Candidates per constructed query, `n`.
    pub candidates: usize,
    /// Relevant candidates per constructed query, `m`.
    pub relevant: usize,
    /// Number of queries to construct, `N`.
    pub count: usize,
    /// Allow one source query to yield several constructed queries. Needed
    /// when the whole pool is a single population (credit-scoring style data).
    #[serde(default)]
    pub reuse_sources: bool,
}

/// Builds queries of exactly `candidates` items with exactly `relevant`
/// relevant ones, sampling without replacement inside a source query.
pub fn construct_queries(pool: &[PoolRecord], cfg: &QuerySampling, rng_seed: u64) -> Result<Vec<Query>> {
    if cfg.relevant >= cfg.candidates {
        return Err(Error::Domain(format!(
            "relevant per query ({}) must be below candidates per query ({})",
            cfg.relevant, cfg.candidates
        )));
    }
    let mut by_source: BTreeMap<&str, (Vec<&Item>, Vec<&Item>)> = BTreeMap::new();
    for rec in pool {
        let entry = by_source.entry(rec.qid.as_str()).or_default();
        if rec.item.relevance == 1 {
            entry.0.push(&rec.item);
        } else {
            entry.1.push(&rec.item);
        }
    }
    let eligible: Vec<(&str, &Vec<&Item>, &Vec<&Item>)> = by_source
        .iter()
        .filter(|(_, (rel, irr))| rel.len() >= cfg.relevant && irr.len() >= cfg.candidates - cfg.relevant)
        .map(|(qid, (rel, irr))| (*qid, rel, irr))
        .collect();
    if eligible.is_empty() || (!cfg.reuse_sources && eligible.len() < cfg.count) {
        return Err(Error::InsufficientQueries { requested: cfg.count, available: eligible.len() });
    }

    let mut rng = seed::rng(rng_seed);
    let sources: Vec<usize> = if cfg.reuse_sources {
        (0..cfg.count).map(|_| rng.random_range(0..eligible.len())).collect()
    } else {
        let mut idx: Vec<usize> = (0..eligible.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(cfg.count);
        idx
    };

    let mut uses: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(cfg.count);
    for src in sources {
        let (qid, rel, irr) = eligible[src];
        let k = uses.entry(src).or_insert(0);
        let id = format!("{qid}#{k}");
        *k += 1;
        let mut items: Vec<Item> = rel
            .choose_multiple(&mut rng, cfg.relevant)
            .chain(irr.choose_multiple(&mut rng, cfg.candidates - cfg.relevant))
            .map(|it| (*it).clone())
            .collect();
        items.shuffle(&mut rng);
        out.push(Query { id, items });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Standardization and masking

/// Per-feature z-scoring fitted on training items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(queries: &[Query], feature_count: usize) -> Self {
        let mut sum = vec![0.0; feature_count];
        let mut sq = vec![0.0; feature_count];
        let mut n = 0.0;
        for it in queries.iter().flat_map(|q| &q.items) {
            for (f, &x) in it.features.iter().enumerate() {
                sum[f] += x;
                sq[f] += x * x;
            }
            n += 1.0;
        }
        let n = f64::max(n, 1.0);
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                // constant features are only centred
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, queries: &mut [Query]) {
        for it in queries.iter_mut().flat_map(|q| q.items.iter_mut()) {
            for (f, x) in it.features.iter_mut().enumerate() {
                *x = (*x - self.mean[f]) / self.std[f];
            }
        }
    }
}

/// Fits z-scoring on the training split and applies it to every split.
pub fn standardize(split: &mut DatasetSplit) {
    let st = Standardizer::fit(&split.train, split.feature_count);
    st.apply(&mut split.train);
    st.apply(&mut split.validation);
    st.apply(&mut split.test);
    split.standardization = Some(st);
}

/// Zeroes the given feature ids in every item (group-blind inputs).
pub fn mask_features(queries: &mut [Query], feature_ids: &[usize]) {
    for it in queries.iter_mut().flat_map(|q| q.items.iter_mut()) {
        for &f in feature_ids {
            if let Some(x) = it.features.get_mut(f) {
                *x = 0.0;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Synthetic two-or-more-group ranking data.
///
/// Every item draws its group from `group_proportions` and its relevance from
/// `relevance_probs[group]`. Features are laid out as
/// `[signal; noise; one-hot group]`: each signal dimension is
/// `signal_strength[group] * rel + N(0, 1)`, each noise dimension is `N(0, 1)`.
/// Groups with weaker signal are harder to rank, so a utility-maximizing
/// scorer concentrates exposure on the group it can rank confidently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_queries: usize,
    pub validation_queries: usize,
    pub test_queries: usize,
    pub items_per_query: usize,
    pub signal_dims: usize,
    pub noise_dims: usize,
    pub group_proportions: Vec<f64>,
    pub relevance_probs: Vec<f64>,
    pub signal_strength: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_queries: 500,
            validation_queries: 500,
            test_queries: 500,
            items_per_query: 20,
            signal_dims: 10,
            noise_dims: 50,
            group_proportions: vec![0.5, 0.5],
            relevance_probs: vec![0.7, 0.69],
            signal_strength: vec![0.6, 0.15],
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// A config for `groups` equally sized groups with signal strength falling
    /// linearly from `strongest` to `weakest`.
    pub fn with_groups(groups: usize, relevance: f64, strongest: f64, weakest: f64) -> Self {
        let span = (groups.max(2) - 1) as f64;
        Self {
            group_proportions: vec![1.0 / groups as f64; groups],
            relevance_probs: vec![relevance; groups],
            signal_strength: (0..groups).map(|g| strongest + (weakest - strongest) * g as f64 / span).collect(),
            ..Self::default()
        }
    }

    pub fn group_count(&self) -> usize {
        self.group_proportions.len()
    }

    pub fn feature_count(&self) -> usize {
        self.signal_dims + self.noise_dims + self.group_count()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.group_count();
        if g < 2 {
            return Err(Error::Domain(format!("need at least 2 groups, got {g}")));
        }
        if self.relevance_probs.len() != g || self.signal_strength.len() != g {
            return Err(Error::Domain(format!(
                "per-group settings must have {g} entries (relevance {}, strength {})",
                self.relevance_probs.len(),
                self.signal_strength.len()
            )));
        }
        if self.relevance_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Domain("relevance probabilities must lie in [0, 1]".into()));
        }
        if self.group_proportions.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Domain("group proportions must be non-negative".into()));
        }
        let total: f64 = self.group_proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("group proportions sum to {total}, expected 1")));
        }
        if self.items_per_query < 2 {
            return Err(Error::Domain("need at least 2 items per query".into()));
        }
        Ok(())
    }
}

/// Generates a standardized synthetic split. Deterministic in `config.seed`.
pub fn synth_generate(config: &SynthConfig) -> Result<DatasetSplit> {
    config.validate()?;
    let groups = config.group_count();
    let feature_count = config.feature_count();
    let group_dist =
        WeightedIndex::new(&config.group_proportions).map_err(|e| Error::Domain(format!("group proportions: {e}")))?;

    let make = |name: &str, count: usize| -> Vec<Query> {
        let mut rng = seed::rng(seed::derive(config.seed, name));
        (0..count)
            .map(|qi| {
                let items = (0..config.items_per_query)
                    .map(|_| {
                        let group = group_dist.sample(&mut rng);
                        let relevance = u8::from(rng.random_bool(config.relevance_probs[group]));
                        let mut features = Vec::with_capacity(feature_count);
                        for _ in 0..config.signal_dims {
                            let noise: f64 = StandardNormal.sample(&mut rng);
                            features.push(config.signal_strength[group] * relevance as f64 + noise);
                        }
                        for _ in 0..config.noise_dims {
                            features.push(StandardNormal.sample(&mut rng));
                        }
                        features.extend((0..groups).map(|g| if g == group { 1.0 } else { 0.0 }));
                        Item { features, relevance, group }
                    })
                    .collect();
                Query { id: format!("{name}-{qi}"), items }
            })
            .collect()
    };

    let mut split = DatasetSplit {
        train: make("train", config.train_queries),
        validation: make("validation", config.validation_queries),
        test: make("test", config.test_queries),
        feature_count,
        group_count: groups,
        group_feature_ids: (config.signal_dims + config.noise_dims..feature_count).collect(),
        standardization: None,
    };
    standardize(&mut split);
    Ok(split)
}
