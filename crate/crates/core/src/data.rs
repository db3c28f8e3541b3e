//! Dataset ingestion and the party-side data preparation: vertical feature
//! split, alignment to the PSI result and sequential worker sharding.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::psi::{Id, IdSet};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad vertical split: {0}")]
    Split(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One sample as held by one party.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: Id,
    pub features: Vec<f64>,
    /// Present on the active party only.
    pub label: Option<u8>,
}

pub fn ids_of(records: &[Record]) -> IdSet {
    IdSet::from_raw(records.iter().map(|r| r.id.clone()))
}

pub fn feature_dim(records: &[Record]) -> usize {
    records.first().map_or(0, |r| r.features.len())
}

/// Parses `label idx:val ...` lines with 1-based, strictly increasing
/// indices. Labels `-1`/`+1` (or `0`/`1`) become `0`/`1`; ids are the
/// zero-based row index in decimal. Rows are densified to the larger of the
/// maximum observed index and `min_dim`.
pub fn parse_libsvm<R: BufRead>(reader: R, min_dim: Option<usize>) -> Result<Vec<Record>, DataError> {
    let mut rows: Vec<(u8, Vec<(usize, f64)>)> = Vec::new();
    let mut dim = min_dim.unwrap_or(0);
    for (lineno, line) in reader.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.map_err(|e| DataError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| DataError::Parse { line: line_no, msg };
        let mut tokens = line.split_whitespace();
        let label = match tokens.next().unwrap_or("") {
            "+1" | "1" | "1.0" | "+1.0" => 1,
            "-1" | "0" | "-1.0" | "0.0" => 0,
            other => return Err(bad(format!("label {other:?} is not binary"))),
        };
        let mut entries = Vec::new();
        let mut last = 0usize;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| bad(format!("expected idx:val, got {tok:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| bad(format!("bad feature index {idx:?}")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| bad(format!("bad feature value {val:?}")))?;
            if idx == 0 {
                return Err(bad("feature indices are 1-based".into()));
            }
            if idx <= last {
                return Err(bad(format!("index {idx} does not increase (previous {last})")));
            }
            last = idx;
            entries.push((idx - 1, val));
        }
        dim = dim.max(last);
        rows.push((label, entries));
    }

    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(row, (label, entries))| {
            let mut features = vec![0.0; dim];
            for (i, v) in entries {
                features[i] = v;
            }
            Record {
                id: row.to_string().into_bytes(),
                features,
                label: Some(label),
            }
        })
        .collect())
}

pub fn load_libsvm(path: &Path, min_dim: Option<usize>) -> Result<Vec<Record>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_libsvm(BufReader::new(file), min_dim)
}

/// Which source columns each party keeps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerticalSplitSpec {
    pub active_cols: Vec<usize>,
    pub passive_cols: Vec<usize>,
}

impl VerticalSplitSpec {
    /// First `⌈dim/2⌉` columns active, the rest passive.
    pub fn halves(dim: usize) -> Self {
        Self::active_prefix(dim.div_ceil(2), dim)
    }

    pub fn active_prefix(active: usize, dim: usize) -> Self {
        Self {
            active_cols: (0..active.min(dim)).collect(),
            passive_cols: (active.min(dim)..dim).collect(),
        }
    }

    /// `"a:b"` selects columns `a..b` for the active party.
    pub fn parse_range(range: &str, dim: usize) -> Result<Self, DataError> {
        let bad = || DataError::Split(format!("expected start:end, got {range:?}"));
        let (a, b) = range.split_once(':').ok_or_else(bad)?;
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b || b > dim {
            return Err(DataError::Split(format!("range {a}:{b} outside 0:{dim}")));
        }
        Ok(Self {
            active_cols: (a..b).collect(),
            passive_cols: (0..a).chain(b..dim).collect(),
        })
    }

    fn validate(&self, dim: usize) -> Result<(), DataError> {
        let mut seen = vec![false; dim];
        for &c in self.active_cols.iter().chain(&self.passive_cols) {
            if c >= dim {
                return Err(DataError::Split(format!("column {c} beyond dimension {dim}")));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(DataError::Split(format!("column {c} assigned twice")));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(DataError::Split(format!("column {missing} unassigned")));
        }
        Ok(())
    }
}

/// Splits records column-wise. Both sides keep every id; only the active
/// side keeps labels.
pub fn vertical_split(
    records: &[Record],
    spec: &VerticalSplitSpec,
) -> Result<(Vec<Record>, Vec<Record>), DataError> {
    spec.validate(feature_dim(records))?;
    let pick = |r: &Record, cols: &[usize]| cols.iter().map(|&c| r.features[c]).collect();
    let active = records
        .iter()
        .map(|r| Record {
            id: r.id.clone(),
            features: pick(r, &spec.active_cols),
            label: r.label,
        })
        .collect();
    let passive = records
        .iter()
        .map(|r| Record {
            id: r.id.clone(),
            features: pick(r, &spec.passive_cols),
            label: None,
        })
        .collect();
    Ok((active, passive))
}

/// Keeps records whose id is in `intersection`, sorted by id bytes. Both
/// parties apply the same rule and end up in the same order.
pub fn align_to_intersection(records: &[Record], intersection: &IdSet) -> Vec<Record> {
    let mut out: Vec<Record> = records
        .iter()
        .filter(|r| intersection.contains(&r.id))
        .cloned()
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

/// Contiguous worker shards of a party's aligned data.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedDataset {
    pub shards: Vec<Vec<Record>>,
    pub feature_dim: usize,
}

impl PartitionedDataset {
    pub fn n(&self) -> usize {
        self.shards.len()
    }
}

/// Cuts `records` into `n` contiguous shards, the first `L mod n` of which
/// get one extra row.
pub fn sequential_partition(records: Vec<Record>, n: usize) -> PartitionedDataset {
    assert!(n >= 1, "at least one shard");
    let feature_dim = feature_dim(&records);
    let len = records.len();
    if n > len {
        log::warn!("{n} shards for {len} rows: some shards are empty");
    }
    let (base, extra) = (len / n, len % n);
    let mut rest = records.into_iter();
    let shards = (0..n)
        .map(|i| {
            let size = base + usize::from(i < extra);
            rest.by_ref().take(size).collect()
        })
        .collect();
    PartitionedDataset {
        shards,
        feature_dim,
    }
}

/// Repeats the dataset `k` times. Copy `j` prefixes every id with `jjjjjj/`,
/// so after id-sorted alignment each copy is one contiguous block in the
/// original relative order.
pub fn replicate(records: &[Record], k: usize) -> Vec<Record> {
    let mut out = Vec::with_capacity(records.len() * k);
    for j in 0..k {
        let prefix = format!("{j:06}/");
        for r in records {
            let mut id = prefix.as_bytes().to_vec();
            id.extend_from_slice(&r.id);
            out.push(Record {
                id,
                ..r.clone()
            });
        }
    }
    out
}

/// Writes `id,label,f0,...` (labelled) or `id,f0,...`.
pub fn write_csv<W: Write>(writer: W, records: &[Record], with_label: bool) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = feature_dim(records);
    let mut header = vec!["id".to_string()];
    if with_label {
        header.push("label".into());
    }
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![String::from_utf8_lossy(&r.id).into_owned()];
        if with_label {
            row.push(r.label.map_or(String::new(), |l| l.to_string()));
        }
        row.extend(r.features.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a party CSV; a `label` second column marks the active side.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<Record>, DataError> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.get(0) != Some("id") {
        return Err(DataError::Parse {
            line: 1,
            msg: "first column must be `id`".into(),
        });
    }
    let labelled = header.get(1) == Some("label");
    let first_feature = if labelled { 2 } else { 1 };
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let bad = |msg: String| DataError::Parse { line, msg };
        let label = if labelled {
            match row.get(1).unwrap_or("") {
                "0" => Some(0),
                "1" => Some(1),
                other => return Err(bad(format!("label {other:?} is not 0/1"))),
            }
        } else {
            None
        };
        let features = row
            .iter()
            .skip(first_feature)
            .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value {v:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(Record {
            id: row.get(0).unwrap_or("").as_bytes().to_vec(),
            features,
            label,
        });
    }
    Ok(out)
}

pub fn load_csv(path: &Path) -> Result<Vec<Record>, DataError> {
    read_csv(File::open(path).map_err(io_err(path))?)
}

pub fn save_csv(path: &Path, records: &[Record], with_label: bool) -> Result<(), DataError> {
    write_csv(File::create(path).map_err(io_err(path))?, records, with_label)
}

/// Loads LIBSVM or party CSV depending on the extension (`.csv` → CSV).
pub fn load_any(path: &Path, min_dim: Option<usize>) -> Result<Vec<Record>, DataError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => load_csv(path),
        _ => load_libsvm(path, min_dim),
    }
}
