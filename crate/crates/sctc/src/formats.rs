//! Feature files, manifests and dataset directories.
//!
//! A dataset directory holds `vocab.txt` (one token per line, blank
//! implicit), one manifest per split (`train.tsv`, `dev.tsv`, `test.tsv`)
//! and the feature files under `feats/<split>/`.
//!
//! Manifest lines are `<id>\t<space-separated tokens>\t<feature path>`, the
//! path relative to the manifest's directory. Feature files are the bytes
//! `FEAT`, then little-endian `u32` version, `u32` frames and `u32` dims,
//! then `frames · dims` little-endian `f32` values, row-major.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sctc_core::ctc::Vocabulary;
use sctc_core::synth::{Dataset, Utterance, SPLITS};
use sctc_core::Tensor;

use crate::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"FEAT";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    if features.shape().len() != 2 {
        return Err(Error::Usage(format!(
            "feature matrix must be 2-D, got {:?}",
            features.shape()
        )));
    }
    let mut out = Vec::with_capacity(16 + 4 * features.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "not a feature file (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported feature version {version}")));
    }
    let (frames, dims) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    if body.len() != 4 * frames * dims {
        return Err(Error::format(
            path,
            format!("expected {frames}x{dims} values, found {} bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::from_vec(&[frames, dims], data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    fs::write(path, encode_features(features)?).map_err(Error::io(path))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_features(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub tokens: Vec<String>,
    /// Relative to the manifest's directory.
    pub feature_path: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.id, e.tokens.join(" "), e.feature_path));
    }
    fs::write(path, text).map_err(Error::io(path))
}

/// Parses a manifest and checks that every referenced feature file exists.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let entries = parse_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &entries {
        let feat = base.join(&e.feature_path);
        if !feat.is_file() {
            return Err(Error::format(
                &feat,
                format!("feature file of utterance {} is missing", e.id),
            ));
        }
    }
    Ok(entries)
}

/// Parses a manifest without touching the feature files.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: msg.to_string(),
        };
        if fields.len() != 3 {
            return Err(bad("expected three tab-separated fields"));
        }
        if fields[0].is_empty() || fields[2].is_empty() {
            return Err(bad("empty utterance id or feature path"));
        }
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            tokens: fields[1].split_whitespace().map(str::to_string).collect(),
            feature_path: fields[2].to_string(),
        });
    }
    Ok(entries)
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let tokens: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    Vocabulary::new(&tokens).map_err(|e| Error::format(path, e.to_string()))
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.tsv"))
}

/// Writes a dataset directory; `dir` is created if needed.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    write_vocab(&dir.join("vocab.txt"), &data.vocab)?;
    for split in SPLITS {
        let utts = data.split(split).unwrap_or_default();
        let feat_dir = dir.join("feats").join(split);
        fs::create_dir_all(&feat_dir).map_err(Error::io(&feat_dir))?;
        let mut entries = Vec::with_capacity(utts.len());
        for u in utts {
            let rel = format!("feats/{split}/{}.feat", u.id);
            write_features(&dir.join(&rel), &u.features)?;
            entries.push(ManifestEntry {
                id: u.id.clone(),
                tokens: data.vocab.decode(&u.labels).into_iter().map(str::to_string).collect(),
                feature_path: rel,
            });
        }
        write_manifest(&manifest_path(dir, split), &entries)?;
    }
    Ok(())
}

/// Loads one split of a dataset directory.
pub fn read_split(dir: &Path, split: &str, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
    let path = manifest_path(dir, split);
    let entries = read_manifest(&path)?;
    entries
        .into_iter()
        .enumerate()
        .map(|(n, e)| {
            let labels = vocab.encode(&e.tokens).map_err(|err| Error::Parse {
                path: path.clone(),
                line: n + 1,
                msg: err.to_string(),
            })?;
            Ok(Utterance {
                features: read_features(&dir.join(&e.feature_path))?,
                id: e.id,
                labels,
            })
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let vocab = read_vocab(&dir.join("vocab.txt"))?;
    Ok(Dataset {
        train: read_split(dir, "train", &vocab)?,
        dev: read_split(dir, "dev", &vocab)?,
        test: read_split(dir, "test", &vocab)?,
        vocab,
    })
}

/// Writes `lines` to `path`, one per line.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(Error::io(path))?;
    for l in lines {
        writeln!(f, "{l}").map_err(Error::io(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "u1\ta b\tx.feat\nbroken line\n").unwrap();
        let err = parse_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("m.tsv:2"), "{err}");
    }

    #[test]
    fn empty_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "").unwrap();
        assert!(read_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn missing_feature_file_is_reported_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "u1\ta\tfeats/u1.feat\n").unwrap();
        let err = read_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("feats/u1.feat"), "{err}");
    }

    #[test]
    fn feature_header_is_checked() {
        let p = Path::new("x.feat");
        assert!(decode_features(b"NOPE\x01\0\0\0", p).is_err());
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut bytes = encode_features(&t).unwrap();
        assert_eq!(&bytes[..4], b"FEAT");
        assert_eq!(decode_features(&bytes, p).unwrap(), t);
        bytes.pop();
        assert!(decode_features(&bytes, p).is_err());
    }
}
