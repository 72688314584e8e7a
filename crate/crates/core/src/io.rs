//! Shared helpers for the on-disk artifact formats.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("refusing to overwrite existing artifact {}", path.display())]
    Exists { path: PathBuf },
}

impl ArtifactError {
    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        ArtifactError::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ArtifactError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn is_format(&self) -> bool {
        matches!(self, ArtifactError::Format { .. })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, ArtifactError> {
    Ok(sha256_hex(&read_file(path)?))
}

/// Hash of a file, or of a directory as the sorted list of
/// `relative-path<TAB>file-hash` lines of every file beneath it.
pub fn artifact_sha256(path: &Path) -> Result<String, ArtifactError> {
    if !path.is_dir() {
        return file_sha256(path);
    }
    let mut lines = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| ArtifactError::io(&dir, e))?;
        for entry in entries {
            let p = entry.map_err(|e| ArtifactError::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(path).expect("beneath root");
                let rel: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect();
                lines.push(format!("{}\t{}\n", rel.join("/"), file_sha256(&p)?));
            }
        }
    }
    lines.sort();
    Ok(sha256_hex(lines.concat().as_bytes()))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, ArtifactError> {
    fs::read(path).map_err(|e| ArtifactError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String, ArtifactError> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|_| ArtifactError::format(path, "not valid UTF-8"))
}

/// Writes through a temporary sibling and renames, so readers never observe
/// a half-written file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ArtifactError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| ArtifactError::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| ArtifactError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ArtifactError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<(), ArtifactError> {
    fs::create_dir_all(path).map_err(|e| ArtifactError::io(path, e))
}

/// Little-endian cursor over a byte buffer; every short read is a format error.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path) -> Self {
        ByteReader { buf, pos: 0, path }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], ArtifactError> {
        if self.remaining() < n {
            return Err(ArtifactError::format(
                self.path,
                format!("truncated: wanted {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<(), ArtifactError> {
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(ArtifactError::format(self.path, "bad magic bytes"));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8, ArtifactError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, ArtifactError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32, ArtifactError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32(&mut self) -> Result<f32, ArtifactError> {
        Ok(f32::from_bits(self.u32()?))
    }

    pub fn u16_vec(&mut self, n: usize) -> Result<Vec<u16>, ArtifactError> {
        let b = self.take(n * 2)?;
        Ok(b.chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect())
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>, ArtifactError> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<(), ArtifactError> {
        if self.remaining() != 0 {
            return Err(ArtifactError::format(
                self.path,
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

pub fn put_u16s(out: &mut Vec<u8>, values: &[u16]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn put_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Parses a `key=value` header line, ignoring surrounding whitespace.
pub fn split_kv(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_reads_are_format_errors() {
        let path = Path::new("mem");
        let mut r = ByteReader::new(&[1, 0, 2], path);
        assert_eq!(r.u16().unwrap(), 1);
        assert!(r.u16().unwrap_err().is_format());
    }

    #[test]
    fn magic_mismatch() {
        let path = Path::new("mem");
        let mut r = ByteReader::new(b"ABCD", path);
        assert!(r.expect_magic(b"ABCE").unwrap_err().is_format());
    }
}
