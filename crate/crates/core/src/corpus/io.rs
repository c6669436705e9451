use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::composer::SpeechEmbeddingSequence;
use crate::error::{Error, Result};
use crate::numkit::Tensor;

pub const SLPE_MAGIC: &[u8; 4] = b"SLPE";
pub const SLPE_VERSION: u8 = 1;

/// Serializes frames as `SLPE`, version, `S`, `d` (u32 LE), then f32 LE
/// values row-major.
pub fn encode_embeddings(frames: &Tensor) -> Result<Vec<u8>> {
    if frames.rank() != 2 {
        return Err(Error::shape(format!("embeddings must be a matrix, got {:?}", frames.shape())));
    }
    let (s, d) = (frames.rows(), frames.cols());
    let mut out = Vec::with_capacity(13 + 4 * s * d);
    out.extend_from_slice(SLPE_MAGIC);
    out.push(SLPE_VERSION);
    out.extend_from_slice(&(s as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &x in frames.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != SLPE_MAGIC {
        return Err(Error::format(0, "bad magic, expected SLPE"));
    }
    match bytes.get(4) {
        Some(&SLPE_VERSION) => {}
        Some(v) => return Err(Error::format(4, format!("unsupported version {v}"))),
        None => return Err(Error::format(4, "truncated header")),
    }
    if bytes.len() < 13 {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let s = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if s == 0 {
        return Err(Error::format(5, "zero frames"));
    }
    if d == 0 {
        return Err(Error::format(9, "zero embedding width"));
    }
    let expected = 13 + 4 * s * d;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!("{s}x{d} payload needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let data = bytes[13..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![s, d], data)
}

pub fn write_embeddings(path: &Path, frames: &Tensor) -> Result<()> {
    let bytes = encode_embeddings(frames)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<SpeechEmbeddingSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let frames = decode_embeddings(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })?;
    SpeechEmbeddingSequence::new(frames, path.display().to_string())
}

/// One utterance: id, embedding file (relative to the manifest directory
/// unless absolute), transcript and linearized frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub embedding: String,
    pub transcript: String,
    pub frame: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub comments: Vec<String>,
    pub records: Vec<ManifestRecord>,
}

fn check_field(name: &str, v: &str) -> Result<()> {
    if v.contains('\t') || v.contains('\n') || v.contains('\r') {
        return Err(Error::Data(format!("{name} {v:?} contains a tab or newline")));
    }
    Ok(())
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        for c in &self.comments {
            check_field("comment", c)?;
            s.push_str("# ");
            s.push_str(c);
            s.push('\n');
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.id.is_empty() || !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("empty or duplicate utterance id {:?}", r.id)));
            }
            for (n, v) in [
                ("id", &r.id),
                ("embedding path", &r.embedding),
                ("transcript", &r.transcript),
                ("frame", &r.frame),
            ] {
                check_field(n, v)?;
            }
            s.push_str(&format!("{}\t{}\t{}\t{}\n", r.id, r.embedding, r.transcript, r.frame));
        }
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        let mut seen = HashSet::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len() as u64;
            let line = line.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                m.comments.push(c.strip_prefix(' ').unwrap_or(c).to_string());
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::format(
                    start,
                    format!("expected 4 tab-separated fields, found {}", fields.len()),
                ));
            }
            if fields[0].is_empty() || !seen.insert(fields[0].to_string()) {
                return Err(Error::format(start, format!("empty or duplicate id {:?}", fields[0])));
            }
            m.records.push(ManifestRecord {
                id: fields[0].to_string(),
                embedding: fields[1].to_string(),
                transcript: fields[2].to_string(),
                frame: fields[3].to_string(),
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_text()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest; with `check_files` every embedding path must exist.
    pub fn load(path: &Path, check_files: bool) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::from_text(&text)?;
        if check_files {
            let base = path.parent().unwrap_or(Path::new("."));
            for r in &m.records {
                let p = resolve(base, &r.embedding);
                if !p.is_file() {
                    return Err(Error::Data(format!(
                        "{}: embedding file {} for {} is missing",
                        path.display(),
                        p.display(),
                        r.id
                    )));
                }
            }
        }
        Ok(m)
    }
}

/// Embedding path of a record relative to `base` unless already absolute.
pub fn resolve(base: &Path, embedding: &str) -> PathBuf {
    let p = Path::new(embedding);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
