//! On-disk episode sets and the checksummed manifest that seals them.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use worldflow::numerics::NdArray;
use worldflow::worldsim::{prompt, Episode};

pub const MANIFEST: &str = "manifest.json";
pub const EPISODE_DIR: &str = "episodes";
const ARRAYS: [&str; 4] = ["video", "flow", "semantic_raw", "spatial_raw"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub name: String,
    pub prompt: String,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fingerprint: String,
    pub episodes: Vec<EpisodeEntry>,
    pub held_out_prompts: Vec<String>,
    /// SHA-256 over the serialized manifest with this field empty.
    pub checksum: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    fn body_hash(&self) -> String {
        let mut body = self.clone();
        body.checksum.clear();
        sha256_hex(serde_json::to_string(&body).expect("manifest serializes").as_bytes())
    }

    pub fn seal(mut self) -> Self {
        self.checksum = self.body_hash();
        self
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| format!("no dataset manifest at {} (run gen-data first)", path.display()))?;
        let m: Self = serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))?;
        if m.body_hash() != m.checksum {
            bail!("manifest {} fails its checksum; the dataset was partially written or edited", path.display());
        }
        Ok(m)
    }
}

pub fn episode_name(index: usize) -> String {
    format!("ep_{index:05}")
}

/// Writes one episode's arrays and prompt under `root/episodes/<name>/`.
pub fn write_episode(root: &Path, name: &str, ep: &Episode) -> Result<EpisodeEntry> {
    let rel = PathBuf::from(EPISODE_DIR).join(name);
    let dir = root.join(&rel);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = Vec::new();
    for (label, array) in ARRAYS.iter().zip([&ep.video, &ep.flow, &ep.semantic_raw, &ep.spatial_raw]) {
        let bytes = array.to_bytes();
        let file = rel.join(format!("{label}.nda"));
        std::fs::write(root.join(&file), &bytes).with_context(|| format!("writing {}", file.display()))?;
        files.push(FileEntry {
            path: file.to_string_lossy().into_owned(),
            sha256: sha256_hex(&bytes),
        });
    }
    Ok(EpisodeEntry {
        name: name.to_string(),
        prompt: prompt::to_text(&ep.prompt),
        files,
    })
}

/// Reads an episode back, verifying every file against the manifest.
pub fn read_episode(root: &Path, entry: &EpisodeEntry) -> Result<Episode> {
    if entry.files.len() != ARRAYS.len() {
        bail!("manifest entry {} lists {} files, expected {}", entry.name, entry.files.len(), ARRAYS.len());
    }
    let mut arrays = Vec::with_capacity(ARRAYS.len());
    for f in &entry.files {
        let path = root.join(&f.path);
        let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        if sha256_hex(&bytes) != f.sha256 {
            bail!("{} does not match its manifest checksum", path.display());
        }
        arrays.push(NdArray::<f32>::read_from(&mut bytes.as_slice()).with_context(|| format!("decoding {}", path.display()))?);
    }
    let tokens = prompt::parse(&entry.prompt).with_context(|| format!("episode {} has an unparsable prompt", entry.name))?;
    let mut it = arrays.into_iter();
    Ok(Episode {
        video: it.next().unwrap(),
        flow: it.next().unwrap(),
        semantic_raw: it.next().unwrap(),
        spatial_raw: it.next().unwrap(),
        prompt: tokens,
    })
}

pub fn read_all(root: &Path, manifest: &Manifest) -> Result<Vec<Episode>> {
    manifest.episodes.iter().map(|e| read_episode(root, e)).collect()
}

/// True when `dir` exists and holds at least one entry.
pub fn non_empty(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}
