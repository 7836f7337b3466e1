//! Synthetic head/torso/tail retrieval corpora on the sphere, and ingestion
//! of click-log files in the same schema.
//!
//! The generator draws one direction per query, then samples its relevant
//! items around that direction with a stratum-dependent angular spread:
//! head queries get many, widely scattered items; tail queries get few,
//! tightly clustered ones. Background noise items are uniform on the
//! sphere and never appear in any click record. Ground-truth relevance is
//! exactly the set of generated (query, item) pairs, so recall can be
//! computed without approximation.
//!
//! File formats (line-delimited text, `#` lines are comments):
//!
//! - click log: `query_id<TAB>item_id[<TAB>stratum]` with stratum one of
//!   `head`, `torso`, `tail`. Either every line carries a stratum or none
//!   does; unlabeled logs are stratified by query-frequency terciles.
//!   Duplicate pairs are deduplicated with a count.
//! - feature tables: `id<TAB>v1 v2 ...` (dense mode, space-separated reals)
//!   or `id<TAB>tok1 tok2 ...` (token mode), with the mode declared by a
//!   `# feature-mode: dense|tokens` header line. Dense is assumed when the
//!   header is absent.
//!
//! A dataset directory holds `clicklog.tsv`, `queries.features`, and
//! `items.features`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kv::{atomic_write, hash_header, KvError, KvMap};
use crate::model::FeatureRecord;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("no records in click log")]
    NoRecords,
    #[error("unknown id {id:?} referenced by click log (not in {table} feature table)")]
    UnknownId { id: String, table: &'static str },
    #[error("duplicate id {0:?} in feature table")]
    DuplicateId(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Config(#[from] KvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Query popularity stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stratum {
    Head,
    Torso,
    Tail,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Head, Stratum::Torso, Stratum::Tail];

    pub fn parse(s: &str) -> Option<Stratum> {
        Some(match s {
            "head" => Stratum::Head,
            "torso" => Stratum::Torso,
            "tail" => Stratum::Tail,
            _ => return None,
        })
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stratum::Head => "head",
            Stratum::Torso => "torso",
            Stratum::Tail => "tail",
        })
    }
}

/// Per-stratum generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumSpec {
    /// Number of queries in the stratum.
    pub queries: usize,
    /// Mean relevant items per query; actual counts are uniform in
    /// `[mean/2, 3·mean/2]`.
    pub mean_items: usize,
    /// Angular spread of relevant items around the query direction; the
    /// item direction is `normalize(u_q + spread · t · e)` with `e` uniform
    /// on the sphere and `t` uniform on [0, 1]. The per-item scale fills
    /// the spherical cap (a fixed scale would concentrate every item on a
    /// thin shell in high dimension, leaving no within-cluster score
    /// variance). Smaller spread = higher concentration.
    pub spread: f64,
}

/// Settings for the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub head: StratumSpec,
    pub torso: StratumSpec,
    pub tail: StratumSpec,
    /// Ambient (feature) dimension.
    pub dim: usize,
    /// Uniform background items that never appear in a click record.
    pub noise_items: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            head: StratumSpec {
                queries: 60,
                mean_items: 800,
                spread: 0.9,
            },
            torso: StratumSpec {
                queries: 120,
                mean_items: 150,
                spread: 0.45,
            },
            tail: StratumSpec {
                queries: 300,
                mean_items: 25,
                spread: 0.15,
            },
            dim: 32,
            noise_items: 20_000,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, s) in [
            ("head", &self.head),
            ("torso", &self.torso),
            ("tail", &self.tail),
        ] {
            if s.queries < 1 || s.mean_items < 1 {
                return Err(DataError::InvalidSpec(format!(
                    "{name}: queries and mean_items must be at least 1"
                )));
            }
            if !(s.spread > 0.0) || !s.spread.is_finite() {
                return Err(DataError::InvalidSpec(format!(
                    "{name}: spread must be positive, got {}",
                    s.spread
                )));
            }
        }
        if self.dim < 2 {
            return Err(DataError::InvalidSpec("dim must be at least 2".into()));
        }
        Ok(())
    }

    pub fn from_kv(mut kv: KvMap) -> Result<Self, DataError> {
        fn stratum_overrides(kv: &mut KvMap, name: &str, s: &mut StratumSpec) -> Result<(), DataError> {
            let mut sub = kv.take_prefixed(name);
            if let Some(v) = sub.take_usize("queries")? {
                s.queries = v;
            }
            if let Some(v) = sub.take_usize("mean_items")? {
                s.mean_items = v;
            }
            if let Some(v) = sub.take_f64("spread")? {
                s.spread = v;
            }
            sub.finish()?;
            Ok(())
        }
        let mut spec = SynthSpec::default();
        stratum_overrides(&mut kv, "head", &mut spec.head)?;
        stratum_overrides(&mut kv, "torso", &mut spec.torso)?;
        stratum_overrides(&mut kv, "tail", &mut spec.tail)?;
        if let Some(v) = kv.take_usize("dim")? {
            spec.dim = v;
        }
        if let Some(v) = kv.take_usize("noise_items")? {
            spec.noise_items = v;
        }
        if let Some(v) = kv.take_u64("seed")? {
            spec.seed = v;
        }
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    /// Field-stable serialization used for config hashing and `.resolved`
    /// artifacts.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for (name, sub) in [
            ("head", &self.head),
            ("torso", &self.torso),
            ("tail", &self.tail),
        ] {
            s.push_str(&format!("{name}.queries = {}\n", sub.queries));
            s.push_str(&format!("{name}.mean_items = {}\n", sub.mean_items));
            s.push_str(&format!("{name}.spread = {}\n", sub.spread));
        }
        s.push_str(&format!("dim = {}\n", self.dim));
        s.push_str(&format!("noise_items = {}\n", self.noise_items));
        s.push_str(&format!("seed = {}\n", self.seed));
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMeta {
    pub id: String,
    pub features: FeatureRecord,
    pub stratum: Stratum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemMeta {
    pub id: String,
    pub features: FeatureRecord,
}

/// A deduplicated click: indices into the query and item tables plus the
/// number of times the pair occurred.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClickRecord {
    pub query: u32,
    pub item: u32,
    pub count: u32,
}

/// Positive (query, item) pairs with feature tables and per-query strata.
/// The relevance set of a query is exactly its set of clicked items.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickLogDataset {
    queries: Vec<QueryMeta>,
    items: Vec<ItemMeta>,
    records: Vec<ClickRecord>,
    /// Per query: sorted indices of its relevant items.
    relevance: Vec<Vec<u32>>,
}

impl ClickLogDataset {
    fn assemble(
        queries: Vec<QueryMeta>,
        items: Vec<ItemMeta>,
        records: Vec<ClickRecord>,
    ) -> Self {
        let mut relevance = vec![Vec::new(); queries.len()];
        for r in &records {
            relevance[r.query as usize].push(r.item);
        }
        for rel in &mut relevance {
            rel.sort_unstable();
            rel.dedup();
        }
        ClickLogDataset {
            queries,
            items,
            records,
            relevance,
        }
    }

    pub fn queries(&self) -> &[QueryMeta] {
        &self.queries
    }

    pub fn items(&self) -> &[ItemMeta] {
        &self.items
    }

    pub fn records(&self) -> &[ClickRecord] {
        &self.records
    }

    /// Sorted relevant item indices for a query.
    pub fn relevant(&self, query: usize) -> &[u32] {
        &self.relevance[query]
    }

    pub fn query_indices_of(&self, stratum: Stratum) -> Vec<usize> {
        self.queries
            .iter()
            .enumerate()
            .filter(|(_, q)| q.stratum == stratum)
            .map(|(i, _)| i)
            .collect()
    }

    /// Serializes to the three canonical file bodies
    /// (clicklog, query features, item features).
    pub fn to_file_strings(&self, config_hash: u64) -> (String, String, String) {
        let header = hash_header(config_hash);
        let mut log = String::new();
        log.push_str(&header);
        log.push('\n');
        log.push_str("# columns: query_id\titem_id\tstratum\n");
        for r in &self.records {
            let q = &self.queries[r.query as usize];
            let it = &self.items[r.item as usize];
            for _ in 0..r.count {
                log.push_str(&format!("{}\t{}\t{}\n", q.id, it.id, q.stratum));
            }
        }
        let feats = |mode_dense: bool, rows: Vec<(&str, &FeatureRecord)>| {
            let mut s = String::new();
            s.push_str(&header);
            s.push('\n');
            s.push_str(if mode_dense {
                "# feature-mode: dense\n"
            } else {
                "# feature-mode: tokens\n"
            });
            for (id, rec) in rows {
                match rec {
                    FeatureRecord::Dense(v) => {
                        let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
                        s.push_str(&format!("{id}\t{}\n", vals.join(" ")));
                    }
                    FeatureRecord::Tokens(toks) => {
                        s.push_str(&format!("{id}\t{}\n", toks.join(" ")));
                    }
                }
            }
            s
        };
        let dense = matches!(
            self.queries.first().map(|q| &q.features),
            Some(FeatureRecord::Dense(_)) | None
        );
        let queries = feats(
            dense,
            self.queries
                .iter()
                .map(|q| (q.id.as_str(), &q.features))
                .collect(),
        );
        let items = feats(
            dense,
            self.items
                .iter()
                .map(|i| (i.id.as_str(), &i.features))
                .collect(),
        );
        (log, queries, items)
    }

    /// Writes `clicklog.tsv`, `queries.features`, `items.features` into
    /// `dir` (created if absent).
    pub fn write_dir(&self, dir: &Path, config_hash: u64) -> Result<(), DataError> {
        std::fs::create_dir_all(dir)?;
        let (log, queries, items) = self.to_file_strings(config_hash);
        atomic_write(&dir.join("clicklog.tsv"), log.as_bytes())?;
        atomic_write(&dir.join("queries.features"), queries.as_bytes())?;
        atomic_write(&dir.join("items.features"), items.as_bytes())?;
        Ok(())
    }

    /// Reads a dataset from a directory holding the canonical file names,
    /// or from a click-log path whose siblings hold the feature tables.
    pub fn read_path(path: &Path) -> Result<Self, DataError> {
        let (log_path, dir) = if path.is_dir() {
            (path.join("clicklog.tsv"), path.to_path_buf())
        } else {
            (
                path.to_path_buf(),
                path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            )
        };
        let log = std::fs::read_to_string(&log_path)?;
        let queries = std::fs::read_to_string(dir.join("queries.features"))?;
        let items = std::fs::read_to_string(dir.join("items.features"))?;
        ingest_strings(
            (&log_path.display().to_string(), &log),
            ("queries.features", &queries),
            ("items.features", &items),
        )
    }
}

/// Generates a corpus. Deterministic: a fixed spec always produces the
/// same dataset.
pub fn generate(spec: &SynthSpec) -> Result<ClickLogDataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut queries = Vec::new();
    let mut items = Vec::new();
    let mut records = Vec::new();

    for stratum in Stratum::ALL {
        let sub = match stratum {
            Stratum::Head => &spec.head,
            Stratum::Torso => &spec.torso,
            Stratum::Tail => &spec.tail,
        };
        for qi in 0..sub.queries {
            let direction = random_unit(&mut rng, spec.dim);
            let lo = (sub.mean_items / 2).max(1);
            let hi = (sub.mean_items * 3) / 2;
            let count = if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            };
            let query_index = queries.len() as u32;
            queries.push(QueryMeta {
                id: format!("q_{stratum}_{qi:05}"),
                features: FeatureRecord::Dense(direction.to_vec()),
                stratum,
            });
            for _ in 0..count {
                let e = random_unit(&mut rng, spec.dim);
                let scale = sub.spread * rng.gen_range(0.0..=1.0);
                let raw = &direction + &(e * scale);
                let norm = raw.dot(&raw).sqrt();
                let pos = raw / norm;
                let item_index = items.len() as u32;
                items.push(ItemMeta {
                    id: format!("i_{item_index:07}"),
                    features: FeatureRecord::Dense(pos.to_vec()),
                });
                records.push(ClickRecord {
                    query: query_index,
                    item: item_index,
                    count: 1,
                });
            }
        }
    }
    for _ in 0..spec.noise_items {
        let direction = random_unit(&mut rng, spec.dim);
        let item_index = items.len() as u32;
        items.push(ItemMeta {
            id: format!("i_{item_index:07}"),
            features: FeatureRecord::Dense(direction.to_vec()),
        });
    }

    let data = ClickLogDataset::assemble(queries, items, records);
    if !stratum_counts_ordered(&data) {
        return Err(DataError::InvalidSpec(
            "generated stratum mean item counts are not strictly decreasing \
             head > torso > tail; widen the mean_items gaps"
                .into(),
        ));
    }
    Ok(data)
}

// Mean relevant-item count must decrease strictly head -> torso -> tail.
fn stratum_counts_ordered(data: &ClickLogDataset) -> bool {
    let mean = |s: Stratum| {
        let idx = data.query_indices_of(s);
        idx.iter().map(|&q| data.relevant(q).len()).sum::<usize>() as f64 / idx.len() as f64
    };
    mean(Stratum::Head) > mean(Stratum::Torso) && mean(Stratum::Torso) > mean(Stratum::Tail)
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(dim, |_| standard_normal(rng));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

// Box-Muller; two uniforms per draw keeps the stream deterministic.
fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Parses the three file bodies into a dataset. Each argument pairs a name
/// (for error messages) with the file content.
pub fn ingest_strings(
    clicklog: (&str, &str),
    query_features: (&str, &str),
    item_features: (&str, &str),
) -> Result<ClickLogDataset, DataError> {
    let (queries_order, query_feats) = parse_feature_table(query_features.0, query_features.1)?;
    let (items_order, item_feats) = parse_feature_table(item_features.0, item_features.1)?;

    let query_index: BTreeMap<&str, u32> = queries_order
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i as u32))
        .collect();
    let item_index: BTreeMap<&str, u32> = items_order
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i as u32))
        .collect();

    let (file, body) = clicklog;
    let mut pair_counts: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    let mut pair_order: Vec<(u32, u32)> = Vec::new();
    let mut strata: Vec<Option<Stratum>> = vec![None; queries_order.len()];
    let mut labeled = 0usize;
    let mut unlabeled = 0usize;
    let mut any = false;
    for (lineno, raw) in body.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err(DataError::Parse {
                file: file.to_string(),
                line,
                message: format!(
                    "expected query_id<TAB>item_id[<TAB>stratum], got {} fields",
                    fields.len()
                ),
            });
        }
        let q = *query_index
            .get(fields[0])
            .ok_or_else(|| DataError::UnknownId {
                id: fields[0].to_string(),
                table: "query",
            })?;
        let it = *item_index
            .get(fields[1])
            .ok_or_else(|| DataError::UnknownId {
                id: fields[1].to_string(),
                table: "item",
            })?;
        if fields.len() == 3 {
            let s = Stratum::parse(fields[2]).ok_or_else(|| DataError::Parse {
                file: file.to_string(),
                line,
                message: format!("unknown stratum label {:?}", fields[2]),
            })?;
            match strata[q as usize] {
                None => strata[q as usize] = Some(s),
                Some(prev) if prev != s => {
                    return Err(DataError::Parse {
                        file: file.to_string(),
                        line,
                        message: format!(
                            "query {:?} labeled both {prev} and {s}",
                            fields[0]
                        ),
                    })
                }
                _ => {}
            }
            labeled += 1;
        } else {
            unlabeled += 1;
        }
        any = true;
        let entry = pair_counts.entry((q, it)).or_insert(0);
        if *entry == 0 {
            pair_order.push((q, it));
        }
        *entry += 1;
    }
    if !any {
        return Err(DataError::NoRecords);
    }
    if labeled > 0 && unlabeled > 0 {
        return Err(DataError::Parse {
            file: file.to_string(),
            line: 0,
            message: "click log mixes labeled and unlabeled lines".into(),
        });
    }

    let records: Vec<ClickRecord> = pair_order
        .iter()
        .map(|&(q, it)| ClickRecord {
            query: q,
            item: it,
            count: pair_counts[&(q, it)],
        })
        .collect();

    // Stratum assignment: explicit labels, or frequency terciles.
    let final_strata: Vec<Stratum> = if labeled > 0 {
        strata
            .iter()
            .map(|s| s.unwrap_or(Stratum::Tail))
            .collect()
    } else {
        terciles_by_frequency(queries_order.len(), &records, &queries_order)
    };

    let queries: Vec<QueryMeta> = queries_order
        .into_iter()
        .zip(query_feats)
        .zip(&final_strata)
        .map(|((id, features), stratum)| QueryMeta {
            id,
            features,
            stratum: *stratum,
        })
        .collect();
    let items: Vec<ItemMeta> = items_order
        .into_iter()
        .zip(item_feats)
        .map(|(id, features)| ItemMeta { id, features })
        .collect();

    Ok(ClickLogDataset::assemble(queries, items, records))
}

// Queries sorted by (click frequency desc, id asc); the first third is
// head, the next third torso, the rest tail.
fn terciles_by_frequency(
    n_queries: usize,
    records: &[ClickRecord],
    ids: &[String],
) -> Vec<Stratum> {
    let mut freq = vec![0u64; n_queries];
    for r in records {
        freq[r.query as usize] += r.count as u64;
    }
    let mut order: Vec<usize> = (0..n_queries).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then_with(|| ids[a].cmp(&ids[b])));
    let third = n_queries.div_ceil(3);
    let mut out = vec![Stratum::Tail; n_queries];
    for (rank, &q) in order.iter().enumerate() {
        out[q] = if rank < third {
            Stratum::Head
        } else if rank < 2 * third {
            Stratum::Torso
        } else {
            Stratum::Tail
        };
    }
    out
}

fn parse_feature_table(
    file: &str,
    body: &str,
) -> Result<(Vec<String>, Vec<FeatureRecord>), DataError> {
    let mut mode_dense: Option<bool> = None;
    let mut ids = Vec::new();
    let mut feats = Vec::new();
    let mut seen: BTreeMap<String, ()> = BTreeMap::new();
    let mut dense_dim: Option<usize> = None;
    for (lineno, raw) in body.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            if let Some(mode) = rest.trim().strip_prefix("feature-mode:") {
                mode_dense = Some(match mode.trim() {
                    "dense" => true,
                    "tokens" => false,
                    other => {
                        return Err(DataError::Parse {
                            file: file.to_string(),
                            line,
                            message: format!("unknown feature-mode {other:?}"),
                        })
                    }
                });
            }
            continue;
        }
        let Some((id, rest)) = trimmed.split_once('\t') else {
            return Err(DataError::Parse {
                file: file.to_string(),
                line,
                message: "expected id<TAB>features".into(),
            });
        };
        if seen.insert(id.to_string(), ()).is_some() {
            return Err(DataError::DuplicateId(id.to_string()));
        }
        let dense = mode_dense.unwrap_or(true);
        let rec = if dense {
            let mut vals = Vec::new();
            for tok in rest.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| DataError::Parse {
                    file: file.to_string(),
                    line,
                    message: format!("cannot parse {tok:?} as a real number"),
                })?;
                vals.push(v);
            }
            if vals.is_empty() {
                return Err(DataError::Parse {
                    file: file.to_string(),
                    line,
                    message: "empty feature vector".into(),
                });
            }
            match dense_dim {
                None => dense_dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(DataError::Parse {
                        file: file.to_string(),
                        line,
                        message: format!("feature length {} but table uses {d}", vals.len()),
                    })
                }
                _ => {}
            }
            FeatureRecord::Dense(vals)
        } else {
            let toks: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
            if toks.is_empty() {
                return Err(DataError::Parse {
                    file: file.to_string(),
                    line,
                    message: "empty token list".into(),
                });
            }
            FeatureRecord::Tokens(toks)
        };
        ids.push(id.to_string());
        feats.push(rec);
    }
    Ok((ids, feats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            head: StratumSpec {
                queries: 3,
                mean_items: 40,
                spread: 0.9,
            },
            torso: StratumSpec {
                queries: 4,
                mean_items: 15,
                spread: 0.45,
            },
            tail: StratumSpec {
                queries: 5,
                mean_items: 5,
                spread: 0.15,
            },
            dim: 8,
            noise_items: 50,
            seed: 7,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&tiny_spec()).unwrap();
        let b = generate(&tiny_spec()).unwrap();
        assert_eq!(a, b);
        let (la, qa, ia) = a.to_file_strings(1);
        let (lb, qb, ib) = b.to_file_strings(1);
        assert_eq!(crate::kv::fnv1a64(la.as_bytes()), crate::kv::fnv1a64(lb.as_bytes()));
        assert_eq!(qa, qb);
        assert_eq!(ia, ib);
    }

    #[test]
    fn tight_spread_pins_items_to_query_direction() {
        let mut spec = tiny_spec();
        spec.tail.spread = 1e-3;
        let data = generate(&spec).unwrap();
        for q in data.query_indices_of(Stratum::Tail) {
            let FeatureRecord::Dense(qv) = &data.queries()[q].features else {
                panic!()
            };
            for &it in data.relevant(q) {
                let FeatureRecord::Dense(iv) = &data.items()[it as usize].features else {
                    panic!()
                };
                let cos: f64 = qv.iter().zip(iv).map(|(a, b)| a * b).sum();
                assert!(cos > 1.0 - 1e-6, "cos={cos}");
            }
        }
    }

    #[test]
    fn head_items_are_more_dispersed_than_tail() {
        let data = generate(&tiny_spec()).unwrap();
        let mean_pairwise = |stratum: Stratum| {
            let mut total = 0.0;
            let mut count = 0usize;
            for q in data.query_indices_of(stratum) {
                let rel = data.relevant(q);
                for (ai, &a) in rel.iter().enumerate() {
                    for &b in rel.iter().skip(ai + 1).take(20) {
                        let FeatureRecord::Dense(va) = &data.items()[a as usize].features
                        else {
                            panic!()
                        };
                        let FeatureRecord::Dense(vb) = &data.items()[b as usize].features
                        else {
                            panic!()
                        };
                        total += va.iter().zip(vb).map(|(x, y)| x * y).sum::<f64>();
                        count += 1;
                    }
                }
            }
            total / count as f64
        };
        assert!(mean_pairwise(Stratum::Head) < mean_pairwise(Stratum::Tail));
    }

    #[test]
    fn stratum_mean_counts_strictly_decrease() {
        let data = generate(&tiny_spec()).unwrap();
        let mean = |s: Stratum| {
            let idx = data.query_indices_of(s);
            idx.iter().map(|&q| data.relevant(q).len()).sum::<usize>() as f64 / idx.len() as f64
        };
        assert!(mean(Stratum::Head) > mean(Stratum::Torso));
        assert!(mean(Stratum::Torso) > mean(Stratum::Tail));
    }

    #[test]
    fn write_read_roundtrip() {
        let data = generate(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.write_dir(dir.path(), 0xabc).unwrap();
        let back = ClickLogDataset::read_path(dir.path()).unwrap();
        assert_eq!(back, data);
        // Also accepts the click-log file path directly.
        let via_file = ClickLogDataset::read_path(&dir.path().join("clicklog.tsv")).unwrap();
        assert_eq!(via_file, data);
    }

    #[test]
    fn empty_log_is_an_error() {
        let err = ingest_strings(
            ("log", "# nothing here\n"),
            ("q", "q1\t0.1 0.2\n"),
            ("i", "i1\t0.3 0.4\n"),
        )
        .unwrap_err();
        assert!(matches!(err, DataError::NoRecords));
    }

    #[test]
    fn three_valid_lines_make_three_pairs() {
        let data = ingest_strings(
            ("log", "q1\ti1\nq1\ti2\nq2\ti1\n"),
            ("q", "q1\t0.1\nq2\t0.2\n"),
            ("i", "i1\t0.3\ni2\t0.4\n"),
        )
        .unwrap();
        assert_eq!(data.records().len(), 3);
    }

    #[test]
    fn duplicates_are_counted() {
        let data = ingest_strings(
            ("log", "q1\ti1\nq1\ti1\nq1\ti1\n"),
            ("q", "q1\t0.1\n"),
            ("i", "i1\t0.3\n"),
        )
        .unwrap();
        assert_eq!(data.records().len(), 1);
        assert_eq!(data.records()[0].count, 3);
    }

    #[test]
    fn malformed_lines_carry_line_numbers() {
        let err = ingest_strings(
            ("log", "q1\ti1\nbroken line without tabs\n"),
            ("q", "q1\t0.1\n"),
            ("i", "i1\t0.3\n"),
        )
        .unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_stratum_label_is_an_error() {
        let err = ingest_strings(
            ("log", "q1\ti1\tmega\n"),
            ("q", "q1\t0.1\n"),
            ("i", "i1\t0.3\n"),
        )
        .unwrap_err();
        match err {
            DataError::Parse { message, .. } => assert!(message.contains("stratum")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let err = ingest_strings(
            ("log", "ghost\ti1\n"),
            ("q", "q1\t0.1\n"),
            ("i", "i1\t0.3\n"),
        )
        .unwrap_err();
        assert!(matches!(err, DataError::UnknownId { table: "query", .. }));
    }

    #[test]
    fn frequency_terciles_assign_strata() {
        // q1: 4 clicks, q2: 2, q3: 1 -> head, torso, tail.
        let data = ingest_strings(
            (
                "log",
                "q1\ti1\nq1\ti2\nq1\ti3\nq1\ti4\nq2\ti1\nq2\ti2\nq3\ti1\n",
            ),
            ("q", "q1\t0.1\nq2\t0.2\nq3\t0.3\n"),
            ("i", "i1\t1\ni2\t2\ni3\t3\ni4\t4\n"),
        )
        .unwrap();
        assert_eq!(data.queries()[0].stratum, Stratum::Head);
        assert_eq!(data.queries()[1].stratum, Stratum::Torso);
        assert_eq!(data.queries()[2].stratum, Stratum::Tail);
    }

    #[test]
    fn token_feature_tables_parse() {
        let data = ingest_strings(
            ("log", "q1\ti1\n"),
            ("q", "# feature-mode: tokens\nq1\tred running shoes\n"),
            ("i", "# feature-mode: tokens\ni1\tsneaker red\n"),
        )
        .unwrap();
        assert_eq!(
            data.queries()[0].features,
            FeatureRecord::Tokens(vec![
                "red".to_string(),
                "running".to_string(),
                "shoes".to_string()
            ])
        );
    }
}
