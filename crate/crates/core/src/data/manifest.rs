use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

const HEADER_TAG: &str = "#dcac-manifest";
const VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    /// Path relative to the manifest's directory.
    pub image_path: PathBuf,
    pub identity: usize,
    pub camera: usize,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub split: Split,
    pub num_identities: usize,
    /// Directory the relative image paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn identities(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.identity).collect()
    }

    pub fn cameras(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.camera).collect()
    }

    /// Domain tags present in the manifest, sorted.
    pub fn domains(&self) -> Vec<String> {
        let mut d: Vec<String> = self.records.iter().map(|r| r.domain.clone()).collect();
        d.sort();
        d.dedup();
        d
    }

    /// Record indices grouped by identity; index `j` holds identity `j`.
    pub fn indices_by_identity(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_identities];
        for (i, r) in self.records.iter().enumerate() {
            if r.identity < groups.len() {
                groups[r.identity].push(i);
            }
        }
        groups
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER_TAG} {VERSION} n_ids={} split={}\n",
            self.num_identities, self.split
        );
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.image_path.to_string_lossy().replace('\\', "/"),
                r.identity,
                r.camera,
                r.domain
            ));
        }
        out
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    fs::write(path, manifest.to_text()).map_err(|e| Error::io(path, e))
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedManifest {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn parse_header(path: &Path, line: &str) -> Result<(usize, Split)> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(HEADER_TAG) {
        return Err(malformed(path, 1, format!("expected header starting with {HEADER_TAG}")));
    }
    if parts.next() != Some(VERSION) {
        return Err(malformed(path, 1, "unsupported manifest version"));
    }
    let mut n_ids = None;
    let mut split = None;
    for kv in parts {
        match kv.split_once('=') {
            Some(("n_ids", v)) => {
                n_ids = Some(v.parse::<usize>().map_err(|_| malformed(path, 1, "bad n_ids"))?)
            }
            Some(("split", v)) => split = Some(v.parse::<Split>().map_err(|e| malformed(path, 1, e))?),
            _ => return Err(malformed(path, 1, format!("unexpected header field {kv:?}"))),
        }
    }
    match (n_ids, split) {
        (Some(n), Some(s)) => Ok((n, s)),
        _ => Err(malformed(path, 1, "header must carry n_ids and split")),
    }
}

/// Reads and validates a manifest. Train-split labels are remapped to the
/// contiguous range `0..N` in ascending order of the original label.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::EmptyManifest(path.to_path_buf()))?;
    let (declared, split) = parse_header(path, header)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut records = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(malformed(path, lineno, format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        let identity = fields[1]
            .parse::<usize>()
            .map_err(|_| malformed(path, lineno, format!("bad identity {:?}", fields[1])))?;
        let camera = fields[2]
            .parse::<usize>()
            .map_err(|_| malformed(path, lineno, format!("bad camera {:?}", fields[2])))?;
        if fields[3].is_empty() {
            return Err(malformed(path, lineno, "empty domain tag"));
        }
        let record = ImageRecord {
            image_path: PathBuf::from(fields[0]),
            identity,
            camera,
            domain: fields[3].to_string(),
        };
        let full = root.join(&record.image_path);
        if !full.is_file() {
            return Err(Error::MissingImage(full));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest(path.to_path_buf()));
    }

    let num_identities = if split == Split::Train {
        let remap: BTreeMap<usize, usize> = {
            let mut ids: Vec<usize> = records.iter().map(|r| r.identity).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.into_iter().enumerate().map(|(new, old)| (old, new)).collect()
        };
        if remap.len() != declared {
            return Err(malformed(
                path,
                1,
                format!("declares n_ids={declared} but contains {} identities", remap.len()),
            ));
        }
        for r in &mut records {
            r.identity = remap[&r.identity];
        }
        remap.len()
    } else {
        if let Some(r) = records.iter().find(|r| r.identity >= declared) {
            return Err(malformed(
                path,
                0,
                format!("identity {} out of declared range n_ids={declared}", r.identity),
            ));
        }
        declared
    };

    Ok(DatasetManifest {
        records,
        split,
        num_identities,
        root,
    })
}
