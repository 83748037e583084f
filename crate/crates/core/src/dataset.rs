//! Labeled and unlabeled data: the seed set, the unlabeled pool and the
//! held-out test set, plus CSV ingestion and a synthetic generator that
//! produces data with the same shape (a few labeled examples per class, a
//! large pool contaminated with irrelevant items, a clean test set).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Class names used by [`generate_synthetic`] for the first eight classes.
pub const DISASTER_CLASSES: [&str; 8] = [
    "cyclone",
    "drought",
    "earthquake",
    "floods",
    "landslides",
    "thunderstorm",
    "snowstorm",
    "wildfires",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// Opaque, globally unique instance identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(String);

impl InstanceId {
    pub fn new(id: impl Into<String>) -> Self {
        InstanceId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for InstanceId {
    fn from(s: &str) -> Self {
        InstanceId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: InstanceId,
    pub features: Vec<f64>,
    /// For irrelevant pool items this is the noisy, keyword-derived class.
    pub true_class: Option<usize>,
    pub relevant: bool,
    pub source_tag: Option<String>,
}

impl Example {
    pub fn new(id: impl Into<String>, features: Vec<f64>, true_class: Option<usize>) -> Self {
        Example {
            id: InstanceId::new(id),
            features,
            true_class,
            relevant: true,
            source_tag: None,
        }
    }

    pub fn irrelevant(mut self) -> Self {
        self.relevant = false;
        self
    }

    pub fn with_source_tag(mut self, tag: impl Into<String>) -> Self {
        self.source_tag = Some(tag.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    Seed,
    Pool,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Seed => "seed",
            Partition::Pool => "pool",
            Partition::Test => "test",
        }
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "seed" => Ok(Partition::Seed),
            "pool" => Ok(Partition::Pool),
            "test" => Ok(Partition::Test),
            other => Err(format!("unknown partition {other:?}")),
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Seed set, unlabeled pool and test set over a fixed feature space.
///
/// Construction goes through [`Dataset::new`], which enforces id uniqueness,
/// feature dimensionality and finiteness, and class ranges; a `Dataset` is
/// immutable afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    class_names: Vec<String>,
    seed_set: Vec<Example>,
    pool: Vec<Example>,
    test_set: Vec<Example>,
}

impl Dataset {
    pub fn new(
        class_names: Vec<String>,
        dim: usize,
        seed_set: Vec<Example>,
        pool: Vec<Example>,
        test_set: Vec<Example>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(DatasetError::Integrity("dimensionality must be positive".into()));
        }
        if class_names.is_empty() {
            return Err(DatasetError::Integrity("at least one class is required".into()));
        }
        let mut names = HashSet::new();
        for name in &class_names {
            if !names.insert(name.as_str()) {
                return Err(DatasetError::Integrity(format!("duplicate class name {name:?}")));
            }
        }
        let m = class_names.len();
        let mut ids = HashSet::new();
        let parts = [
            (Partition::Seed, &seed_set),
            (Partition::Pool, &pool),
            (Partition::Test, &test_set),
        ];
        for (part, examples) in parts {
            for ex in examples.iter() {
                if !ids.insert(ex.id.as_str()) {
                    return Err(DatasetError::Integrity(format!("duplicate id {}", ex.id)));
                }
                if ex.features.len() != dim {
                    return Err(DatasetError::Integrity(format!(
                        "{} has {} features, expected {dim}",
                        ex.id,
                        ex.features.len()
                    )));
                }
                if ex.features.iter().any(|v| !v.is_finite()) {
                    return Err(DatasetError::Integrity(format!("{} has a non-finite feature", ex.id)));
                }
                match ex.true_class {
                    Some(c) if c >= m => {
                        return Err(DatasetError::Integrity(format!(
                            "{} has class {c}, but only {m} classes are declared",
                            ex.id
                        )))
                    }
                    None if part != Partition::Pool => {
                        return Err(DatasetError::Integrity(format!(
                            "{} in the {part} partition has no class",
                            ex.id
                        )))
                    }
                    _ => {}
                }
                if part == Partition::Test && !ex.relevant {
                    return Err(DatasetError::Integrity(format!(
                        "{} in the test partition is marked irrelevant",
                        ex.id
                    )));
                }
            }
        }
        Ok(Dataset {
            dim,
            class_names,
            seed_set,
            pool,
            test_set,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn seed_set(&self) -> &[Example] {
        &self.seed_set
    }

    pub fn pool(&self) -> &[Example] {
        &self.pool
    }

    pub fn test_set(&self) -> &[Example] {
        &self.test_set
    }

    pub fn partition(&self, part: Partition) -> &[Example] {
        match part {
            Partition::Seed => &self.seed_set,
            Partition::Pool => &self.pool,
            Partition::Test => &self.test_set,
        }
    }

    /// Iterates over every example together with the partition it lives in.
    pub fn iter(&self) -> impl Iterator<Item = (Partition, &Example)> {
        self.seed_set
            .iter()
            .map(|e| (Partition::Seed, e))
            .chain(self.pool.iter().map(|e| (Partition::Pool, e)))
            .chain(self.test_set.iter().map(|e| (Partition::Test, e)))
    }

    pub fn len(&self) -> usize {
        self.seed_set.len() + self.pool.len() + self.test_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks feature vectors into an `n × d` row-major matrix.
pub fn feature_matrix<'a, I>(rows: I, dim: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut flat = Vec::new();
    let mut n = 0;
    for row in rows {
        debug_assert_eq!(row.len(), dim);
        flat.extend_from_slice(row);
        n += 1;
    }
    Array2::from_shape_vec((n, dim), flat).expect("rows have the declared dimensionality")
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Where the class vocabulary comes from when loading a CSV file.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ClassList {
    /// Fixed vocabulary; a class not in it is an integrity error.
    Declared(Vec<String>),
    /// Vocabulary built from the file in order of first appearance.
    #[default]
    Infer,
}

/// How rows are assigned to seed/pool/test.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum PartitionSource {
    #[default]
    Column,
    /// Explicit id → partition listing; the partition column may be absent.
    Listing(HashMap<String, Partition>),
}

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub id_column: String,
    pub partition_column: String,
    pub class_column: String,
    pub relevant_column: String,
    pub source_column: String,
    /// Feature columns are `{prefix}0 … {prefix}{d-1}`.
    pub feature_prefix: String,
    pub classes: ClassList,
    pub partitions: PartitionSource,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            id_column: "id".into(),
            partition_column: "partition".into(),
            class_column: "class".into(),
            relevant_column: "relevant".into(),
            source_column: "source_tag".into(),
            feature_prefix: "f".into(),
            classes: ClassList::Infer,
            partitions: PartitionSource::Column,
        }
    }
}

impl CsvSchema {
    pub fn with_classes(classes: Vec<String>) -> Self {
        CsvSchema {
            classes: ClassList::Declared(classes),
            ..CsvSchema::default()
        }
    }
}

/// Formats a feature value with nine significant digits, trimming redundant
/// zeros from the mantissa (`0.5` → `5e-1`).
pub fn format_feature(v: f64) -> String {
    let s = format!("{v:.8e}");
    match s.split_once('e') {
        Some((mantissa, exp)) if mantissa.contains('.') => {
            let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
            format!("{mantissa}e{exp}")
        }
        _ => s,
    }
}

struct Columns {
    id: usize,
    partition: Option<usize>,
    class: Option<usize>,
    relevant: Option<usize>,
    source: Option<usize>,
    /// Column index of feature `j` at position `j`.
    features: Vec<usize>,
}

fn resolve_columns(header: &csv::StringRecord, schema: &CsvSchema) -> Result<Columns> {
    let err = |message: String| DatasetError::Parse { line: 1, message };
    let mut id = None;
    let mut partition = None;
    let mut class = None;
    let mut relevant = None;
    let mut source = None;
    let mut features: Vec<(usize, usize)> = Vec::new();
    for (col, name) in header.iter().enumerate() {
        let slot = if name == schema.id_column {
            &mut id
        } else if name == schema.partition_column {
            &mut partition
        } else if name == schema.class_column {
            &mut class
        } else if name == schema.relevant_column {
            &mut relevant
        } else if name == schema.source_column {
            &mut source
        } else if let Some(idx) = name
            .strip_prefix(schema.feature_prefix.as_str())
            .filter(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
        {
            let idx: usize = idx.parse().map_err(|_| err(format!("bad feature column {name:?}")))?;
            features.push((idx, col));
            continue;
        } else {
            return Err(err(format!("unexpected column {name:?}")));
        };
        if slot.replace(col).is_some() {
            return Err(err(format!("duplicate column {name:?}")));
        }
    }
    let id = id.ok_or_else(|| err(format!("missing {:?} column", schema.id_column)))?;
    if partition.is_none() && matches!(schema.partitions, PartitionSource::Column) {
        return Err(err(format!("missing {:?} column", schema.partition_column)));
    }
    features.sort_unstable();
    if features.is_empty() {
        return Err(err("no feature columns".into()));
    }
    for (expected, &(idx, _)) in features.iter().enumerate() {
        if idx != expected {
            return Err(err(format!(
                "feature columns must be {p}0..{p}{}, found {p}{idx}",
                features.len() - 1,
                p = schema.feature_prefix
            )));
        }
    }
    Ok(Columns {
        id,
        partition,
        class,
        relevant,
        source,
        features: features.into_iter().map(|(_, col)| col).collect(),
    })
}

/// Reads a dataset from CSV text. See [`write_csv`] for the canonical layout.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let cols = resolve_columns(&header, schema)?;
    let dim = cols.features.len();

    let mut class_names: Vec<String> = match &schema.classes {
        ClassList::Declared(names) => names.clone(),
        ClassList::Infer => Vec::new(),
    };
    let mut class_index: HashMap<String, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();

    let mut seen = HashSet::new();
    let (mut seed, mut pool, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let perr = |message: String| DatasetError::Parse { line, message };
        if record.len() != header.len() {
            return Err(perr(format!(
                "expected {} fields, found {}",
                header.len(),
                record.len()
            )));
        }
        let id = record[cols.id].to_owned();
        if id.is_empty() {
            return Err(perr("empty id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(DatasetError::Integrity(format!("duplicate id {id:?} on line {line}")));
        }
        let part = match &schema.partitions {
            PartitionSource::Column => {
                let raw = &record[cols.partition.expect("checked in resolve_columns")];
                raw.parse::<Partition>().map_err(perr)?
            }
            PartitionSource::Listing(listing) => *listing
                .get(&id)
                .ok_or_else(|| perr(format!("id {id:?} missing from the partition listing")))?,
        };
        let true_class = match cols.class.map(|c| &record[c]) {
            None | Some("") => None,
            Some(name) => match class_index.get(name) {
                Some(&c) => Some(c),
                None => match schema.classes {
                    ClassList::Declared(_) => {
                        return Err(DatasetError::Integrity(format!(
                            "line {line}: class {name:?} is not declared"
                        )))
                    }
                    ClassList::Infer => {
                        class_names.push(name.to_owned());
                        class_index.insert(name.to_owned(), class_names.len() - 1);
                        Some(class_names.len() - 1)
                    }
                },
            },
        };
        if true_class.is_none() && part != Partition::Pool {
            return Err(perr(format!("class is required for the {part} partition")));
        }
        let relevant = match cols.relevant.map(|c| &record[c]) {
            None => true,
            Some("1") => true,
            Some("0") => false,
            Some(other) => return Err(perr(format!("relevant must be 0 or 1, found {other:?}"))),
        };
        let source_tag = cols
            .source
            .map(|c| &record[c])
            .filter(|s| !s.is_empty())
            .map(str::to_owned);
        let mut features = Vec::with_capacity(dim);
        for (j, &c) in cols.features.iter().enumerate() {
            let raw = record[c].trim();
            let v: f64 = raw
                .parse()
                .map_err(|_| perr(format!("feature f{j} is not a number: {raw:?}")))?;
            if !v.is_finite() {
                return Err(perr(format!("feature f{j} is not finite: {raw:?}")));
            }
            features.push(v);
        }
        let ex = Example {
            id: InstanceId(id),
            features,
            true_class,
            relevant,
            source_tag,
        };
        match part {
            Partition::Seed => seed.push(ex),
            Partition::Pool => pool.push(ex),
            Partition::Test => test.push(ex),
        }
    }
    if class_names.is_empty() {
        return Err(DatasetError::Integrity("no classes declared or present".into()));
    }
    Dataset::new(class_names, dim, seed, pool, test)
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = File::open(path)?;
    read_csv(BufReader::new(file), schema)
}

/// Writes the canonical layout `id,partition,class,relevant,f0,…,f{d-1}`
/// (plus a trailing `source_tag` column when any example carries one).
/// Rows are emitted seed first, then pool, then test, each in stored order.
pub fn write_csv_to<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let with_source = ds.iter().any(|(_, e)| e.source_tag.is_some());
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut header: Vec<String> = ["id", "partition", "class", "relevant"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..ds.dim()).map(|j| format!("f{j}")));
    if with_source {
        header.push("source_tag".into());
    }
    wtr.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for (part, ex) in ds.iter() {
        row.clear();
        row.push(ex.id.0.clone());
        row.push(part.as_str().into());
        row.push(
            ex.true_class
                .map(|c| ds.class_names[c].clone())
                .unwrap_or_default(),
        );
        row.push(if ex.relevant { "1" } else { "0" }.into());
        row.extend(ex.features.iter().map(|&v| format_feature(v)));
        if with_source {
            row.push(ex.source_tag.clone().unwrap_or_default());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    write_csv_to(ds, &mut out)?;
    out.flush()?;
    Ok(())
}

/// One class name per line; the companion of a dataset CSV written by tools
/// that need the class order preserved.
pub fn write_class_list(names: &[String], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for name in names {
        writeln!(out, "{name}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_class_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub seed_per_class: usize,
    pub pool_per_class: usize,
    pub irrelevant_count: usize,
    pub test_per_class: usize,
    /// Minimum distance between class means, in cluster standard deviations.
    pub cluster_separation: f64,
    pub rng_seed: u64,
}

/// Desk-scale defaults: eight overlapping 2-D clusters, a 160-item seed and a
/// pool that is 30% irrelevant.
impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 8,
            dim: 2,
            seed_per_class: 20,
            pool_per_class: 200,
            irrelevant_count: 686,
            test_per_class: 100,
            cluster_separation: 2.0,
            rng_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(DatasetError::InvalidSpec("at least two classes are required".into()));
        }
        if self.dim == 0 {
            return Err(DatasetError::InvalidSpec("dimensionality must be positive".into()));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return Err(DatasetError::InvalidSpec(
                "cluster separation must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Class names for `m` classes: the eight disaster types, then `class8`, ….
pub fn default_class_names(m: usize) -> Vec<String> {
    (0..m)
        .map(|c| match DISASTER_CLASSES.get(c) {
            Some(name) => (*name).to_owned(),
            None => format!("class{c}"),
        })
        .collect()
}

/// Class means drawn from `N(0, s²I)` until every pair sits at least
/// `separation` apart (cluster σ = 1). The spread `s` starts at
/// `separation / 2` and widens slowly on rejection, which keeps the clusters
/// packed about as tightly as the separation allows.
fn class_means(m: usize, d: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut spread = separation / 2.0;
    loop {
        let means: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                (0..d)
                    .map(|_| spread * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let far_enough = (0..m).all(|a| {
            (a + 1..m).all(|b| {
                let sq: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                sq.sqrt() >= separation
            })
        });
        if far_enough {
            return means;
        }
        spread *= 1.02;
    }
}

/// Isotropic Gaussian clusters with irrelevant items spread uniformly over
/// the clusters' ±3σ bounding box. Pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (m, d) = (spec.num_classes, spec.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let means = class_means(m, d, spec.cluster_separation, &mut rng);

    let draw = |c: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        means[c]
            .iter()
            .map(|mu| mu + rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let mut seed = Vec::with_capacity(m * spec.seed_per_class);
    let mut pool_raw: Vec<(Vec<f64>, usize, bool)> = Vec::new();
    let mut test = Vec::with_capacity(m * spec.test_per_class);
    for c in 0..m {
        for _ in 0..spec.seed_per_class {
            let id = format!("seed-{:05}", seed.len());
            seed.push(Example::new(id, draw(c, &mut rng), Some(c)));
        }
        for _ in 0..spec.pool_per_class {
            pool_raw.push((draw(c, &mut rng), c, true));
        }
        for _ in 0..spec.test_per_class {
            let id = format!("test-{:05}", test.len());
            test.push(Example::new(id, draw(c, &mut rng), Some(c)));
        }
    }

    let lo: Vec<f64> = (0..d)
        .map(|j| means.iter().map(|mu| mu[j]).fold(f64::INFINITY, f64::min) - 3.0)
        .collect();
    let hi: Vec<f64> = (0..d)
        .map(|j| means.iter().map(|mu| mu[j]).fold(f64::NEG_INFINITY, f64::max) + 3.0)
        .collect();
    for _ in 0..spec.irrelevant_count {
        let x = (0..d).map(|j| rng.random_range(lo[j]..hi[j])).collect();
        let noisy_class = rng.random_range(0..m);
        pool_raw.push((x, noisy_class, false));
    }
    pool_raw.shuffle(&mut rng);
    let pool = pool_raw
        .into_iter()
        .enumerate()
        .map(|(i, (x, c, relevant))| Example {
            id: InstanceId(format!("pool-{i:05}")),
            features: x,
            true_class: Some(c),
            relevant,
            source_tag: None,
        })
        .collect();

    Dataset::new(default_class_names(m), d, seed, pool, test)
}

/// Number of irrelevant items that makes them `fraction` of a pool that
/// already holds `relevant` items.
pub fn irrelevant_for_fraction(relevant: usize, fraction: f64) -> usize {
    assert!((0.0..1.0).contains(&fraction), "fraction must be in [0, 1)");
    (relevant as f64 * fraction / (1.0 - fraction)).round() as usize
}
