//! On-disk corpus layout: clip manifest, PCM files, and caption files.
//!
//! Manifest: one record per line, `path,sample_rate,duration,id0;id1;...`.
//! Caption file: one caption per line; a caption id is its line number.

use crate::audio::{AudioClip, AudioError};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed manifest record: {detail}")]
    BadRecord { path: String, line: usize, detail: String },
    #[error("caption id {id} out of range ({len} captions)")]
    BadCaptionId { id: usize, len: usize },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub caption_ids: Vec<usize>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let mut out = String::new();
    for e in entries {
        let ids: Vec<String> = e.caption_ids.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.path,
            e.sample_rate,
            e.duration_s,
            ids.join(";")
        ));
    }
    fs::write(path, out).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| DataError::BadRecord {
            path: path.display().to_string(),
            line: lineno + 1,
            detail,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        }
        let sample_rate = fields[1].parse().map_err(|_| bad(format!("bad sample rate {:?}", fields[1])))?;
        let duration_s = fields[2].parse().map_err(|_| bad(format!("bad duration {:?}", fields[2])))?;
        let caption_ids = fields[3]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| bad(format!("bad caption id {:?}", s))))
            .collect::<Result<Vec<usize>, _>>()?;
        entries.push(ManifestEntry {
            path: fields[0].to_string(),
            sample_rate,
            duration_s,
            caption_ids,
        });
    }
    Ok(entries)
}

pub fn write_captions(path: &Path, captions: &[String]) -> Result<(), DataError> {
    let mut out = String::new();
    for c in captions {
        out.push_str(c);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_captions(path: &Path) -> Result<Vec<String>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// A split loaded back from disk: clips paired with their reference captions.
#[derive(Debug, Clone)]
pub struct LoadedItem {
    pub id: String,
    pub clip: AudioClip,
    pub captions: Vec<String>,
}

/// Reads `<stem>.manifest` + `<stem>.captions.txt` and the PCM files the
/// manifest points at (relative to the manifest's directory).
pub fn load_split(dir: &Path, stem: &str) -> Result<Vec<LoadedItem>, DataError> {
    let manifest = read_manifest(&dir.join(format!("{stem}.manifest")))?;
    let captions = read_captions(&dir.join(format!("{stem}.captions.txt")))?;
    let mut items = Vec::with_capacity(manifest.len());
    for e in &manifest {
        let clip_path: PathBuf = dir.join(&e.path);
        let clip = AudioClip::read_pcm(&clip_path, e.sample_rate)?;
        let mut refs = Vec::with_capacity(e.caption_ids.len());
        for &id in &e.caption_ids {
            let c = captions.get(id).ok_or(DataError::BadCaptionId { id, len: captions.len() })?;
            refs.push(c.clone());
        }
        let id = Path::new(&e.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| e.path.clone());
        items.push(LoadedItem { id, clip, captions: refs });
    }
    Ok(items)
}

/// Token vocabulary shared by the text encoder and the caption decoder.
/// Ids 0..3 are reserved for pad/bos/eos/unk.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: std::collections::HashMap<String, usize>,
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

impl Vocab {
    pub fn build(captions: &[String]) -> Self {
        let mut words: Vec<String> =
            ["<pad>", "<bos>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
        let mut index: std::collections::HashMap<String, usize> =
            words.iter().cloned().zip(0..).collect();
        let mut seen: Vec<String> = captions
            .iter()
            .flat_map(|c| crate::metrics::tokenize_caption(c))
            .collect();
        seen.sort();
        seen.dedup();
        for w in seen {
            if !index.contains_key(&w) {
                index.insert(w.clone(), words.len());
                words.push(w);
            }
        }
        Vocab { words, index }
    }

    /// Rebuilds a vocabulary from a previously serialized word list.
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().cloned().zip(0..).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved specials always present
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        crate::metrics::tokenize_caption(text)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Renders ids back to text, skipping the reserved specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i > UNK && i < self.words.len())
            .map(|&i| self.words[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}
