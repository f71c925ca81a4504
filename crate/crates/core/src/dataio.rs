//! Paired-dataset discovery, manifests, and loading.
//!
//! Three layouts are understood:
//! - GoPro: `root/{train,test}/<sequence>/{blur,sharp}/<frame>.png`
//! - Köhler: `Blurry<i>_<j>.png` and `GroundTruth<i>.png` anywhere under
//!   the root, 4 latents with 12 blurs each
//! - custom: `root/blur/<name>.png` paired with `root/sharp/<name>.png`

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imgcore::{read_png, Image};

pub const KOHLER_LATENTS: usize = 4;
pub const KOHLER_KERNELS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Gopro,
    Kohler,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub blurred: PathBuf,
    pub sharp: PathBuf,
    pub split: Split,
}

/// Paired samples sorted by id. `warnings` lists frames excluded during the
/// scan and is not persisted.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub source: Source,
    pub entries: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    source: Source,
    entries: usize,
    content_hash: String,
}

#[derive(Clone, Debug)]
pub struct SamplePair {
    pub id: String,
    pub source: Source,
    pub blurred: Image,
    pub sharp: Image,
}

impl DatasetManifest {
    fn new(source: Source, mut entries: Vec<ManifestEntry>, warnings: Vec<String>) -> Result<Self> {
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        for w in entries.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Data(format!("duplicate sample id {}", w[0].id)));
            }
        }
        Ok(DatasetManifest {
            source,
            entries,
            warnings,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// A manifest restricted to one split.
    pub fn filter(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            source: self.source,
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
            warnings: Vec::new(),
        }
    }

    fn entry_lines(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("manifest entry serializes"))
            .collect()
    }

    /// Hex sha256 over the serialized entry lines.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for line in self.entry_lines() {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Header line followed by one JSON record per entry.
    pub fn to_ndjson(&self) -> String {
        let header = ManifestHeader {
            source: self.source,
            entries: self.entries.len(),
            content_hash: self.content_hash(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for line in self.entry_lines() {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_ndjson().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_ndjson(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(lines.next().ok_or_else(|| Error::Data("empty manifest".into()))?)
            .map_err(|e| Error::Data(format!("manifest header: {e}")))?;
        let entries = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 2))))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        if entries.len() != header.entries {
            return Err(Error::Integrity(format!(
                "manifest declares {} entries but holds {}",
                header.entries,
                entries.len()
            )));
        }
        let m = DatasetManifest::new(header.source, entries, Vec::new())?;
        let hash = m.content_hash();
        if hash != header.content_hash {
            return Err(Error::Integrity(format!(
                "manifest content hash {hash} does not match recorded {}",
                header.content_hash
            )));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse_ndjson(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().is_some_and(|x| x.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Matches `blur` and `sharp` frames by file stem; unmatched frames become
/// warnings.
fn pair_dirs(blur: &Path, sharp: &Path, prefix: &str, split: Split, warnings: &mut Vec<String>) -> Result<Vec<ManifestEntry>> {
    let b = png_stems(blur)?;
    let s = png_stems(sharp)?;
    let mut out = Vec::new();
    for (stem, bp) in &b {
        match s.get(stem) {
            Some(sp) => out.push(ManifestEntry {
                id: format!("{prefix}{stem}"),
                blurred: bp.clone(),
                sharp: sp.clone(),
                split,
            }),
            None => warnings.push(format!("orphan blurred frame {}", bp.display())),
        }
    }
    for (stem, sp) in &s {
        if !b.contains_key(stem) {
            warnings.push(format!("orphan sharp frame {}", sp.display()));
        }
    }
    Ok(out)
}

/// Scans a GoPro-layout tree. Ids are `<split>/<sequence>/<frame>`.
pub fn scan_gopro(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.name());
        if !dir.is_dir() {
            continue;
        }
        for seq in subdirs(&dir)? {
            let prefix = format!("{}/{}/", split.name(), file_name(&seq));
            entries.extend(pair_dirs(&seq.join("blur"), &seq.join("sharp"), &prefix, split, &mut warnings)?);
        }
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("no blurred/sharp pairs found under {}", root.display())));
    }
    DatasetManifest::new(Source::Gopro, entries, warnings)
}

/// Scans a flat `blur/` + `sharp/` pair of directories.
pub fn scan_custom(root: &Path, split: Split) -> Result<DatasetManifest> {
    let mut warnings = Vec::new();
    let entries = pair_dirs(&root.join("blur"), &root.join("sharp"), "", split, &mut warnings)?;
    if entries.is_empty() {
        return Err(Error::Data(format!("no blurred/sharp pairs found under {}", root.display())));
    }
    DatasetManifest::new(Source::Custom, entries, warnings)
}

fn walk_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            walk_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Scans a Köhler-layout tree and enforces its 4×12 structure. Ids are
/// `kohler_<latent>_<kernel>`; every pair is a test pair.
pub fn scan_kohler(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let blurry = Regex::new(r"(?i)^blurry(\d+)_(\d+)\.png$").expect("valid regex");
    let truth = Regex::new(r"(?i)^groundtruth(\d+)\.png$").expect("valid regex");
    let mut files = Vec::new();
    walk_files(root, &mut files)?;
    files.sort();
    let mut latents: BTreeMap<usize, PathBuf> = BTreeMap::new();
    let mut blurs: BTreeMap<(usize, usize), PathBuf> = BTreeMap::new();
    for f in files {
        let name = file_name(&f);
        if let Some(c) = blurry.captures(&name) {
            let key = (c[1].parse().unwrap_or(0), c[2].parse().unwrap_or(0));
            if blurs.insert(key, f.clone()).is_some() {
                return Err(Error::Integrity(format!("blurred image {name} appears twice")));
            }
        } else if let Some(c) = truth.captures(&name) {
            if latents.insert(c[1].parse().unwrap_or(0), f.clone()).is_some() {
                return Err(Error::Integrity(format!("latent image {name} appears twice")));
            }
        }
    }
    let mut problems = Vec::new();
    for i in 1..=KOHLER_LATENTS {
        if !latents.contains_key(&i) {
            problems.push(format!("missing latent GroundTruth{i}.png"));
        }
        for j in 1..=KOHLER_KERNELS {
            if !blurs.contains_key(&(i, j)) {
                problems.push(format!("missing blurred Blurry{i}_{j}.png"));
            }
        }
    }
    let valid = |i: usize| (1..=KOHLER_LATENTS).contains(&i);
    problems.extend(latents.keys().filter(|&&i| !valid(i)).map(|i| format!("unexpected latent index {i}")));
    problems.extend(
        blurs
            .keys()
            .filter(|&&(i, j)| !valid(i) || !(1..=KOHLER_KERNELS).contains(&j))
            .map(|(i, j)| format!("unexpected blurred index {i}_{j}")),
    );
    if !problems.is_empty() {
        return Err(Error::Integrity(format!(
            "Köhler tree has {} blurred and {} latent images (expected {} and {}): {}",
            blurs.len(),
            latents.len(),
            KOHLER_LATENTS * KOHLER_KERNELS,
            KOHLER_LATENTS,
            problems.join("; ")
        )));
    }
    let entries = blurs
        .into_iter()
        .map(|((i, j), p)| ManifestEntry {
            id: format!("kohler_{i}_{j:02}"),
            blurred: p,
            sharp: latents[&i].clone(),
            split: Split::Test,
        })
        .collect();
    DatasetManifest::new(Source::Kohler, entries, Vec::new())
}

/// Decodes both images of a pair to unit range.
pub fn load_entry(source: Source, e: &ManifestEntry) -> Result<SamplePair> {
    let blurred = read_png(&e.blurred)?;
    let sharp = read_png(&e.sharp)?;
    if blurred.shape() != sharp.shape() {
        return Err(Error::Dimension(format!(
            "pair {}: blurred {:?} and sharp {:?} differ in shape",
            e.id,
            blurred.shape(),
            sharp.shape()
        )));
    }
    Ok(SamplePair {
        id: e.id.clone(),
        source,
        blurred,
        sharp,
    })
}

pub fn load_pair(manifest: &DatasetManifest, id: &str) -> Result<SamplePair> {
    let e = manifest
        .get(id)
        .ok_or_else(|| Error::Data(format!("no pair with id {id}")))?;
    load_entry(manifest.source, e)
}

/// Loads every entry once and reports all failures together.
pub fn preflight(manifest: &DatasetManifest) -> Result<()> {
    let failures: Vec<String> = manifest
        .entries
        .iter()
        .filter_map(|e| load_entry(manifest.source, e).err().map(|err| err.to_string()))
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "{} of {} pairs failed to load: {}",
            failures.len(),
            manifest.len(),
            failures.join("; ")
        )))
    }
}

/// Distinct sharp images referenced by the manifest.
pub fn distinct_sharp(manifest: &DatasetManifest) -> BTreeSet<&Path> {
    manifest.entries.iter().map(|e| e.sharp.as_path()).collect()
}
