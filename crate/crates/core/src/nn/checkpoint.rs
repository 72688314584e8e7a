//! Versioned binary checkpoints: magic, version, the encoder config as a
//! `key=value` text block, then named little-endian f32 tensors.

use std::path::Path;

use super::{EncoderConfig, EncoderModel, HeadKind, NnError};
use crate::io::{self, ArtifactError, ByteReader};

const MAGIC: &[u8; 8] = b"SGCBCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(model: &EncoderModel, path: &Path) -> Result<(), NnError> {
    let mut out = Vec::from(&MAGIC[..]);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = model.config.to_text(model.head);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    let mut tensors = Vec::new();
    model.params.for_each(|name, dims, values| {
        tensors.push((name.to_string(), dims.to_vec(), values.to_vec()));
    });
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, values) in tensors {
        if values.iter().any(|&v| v as f32 as f64 != v && !v.is_nan()) {
            return Err(NnError::NotF32Representable { tensor: name });
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dims.len() as u8);
        for d in &dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        io::put_f32s(&mut out, values.iter().map(|&v| v as f32));
    }
    io::write_file(path, &out)?;
    Ok(())
}

fn parse_config(text: &str, path: &Path) -> Result<(EncoderConfig, HeadKind), ArtifactError> {
    let mut cfg = EncoderConfig::default();
    let mut head = None;
    let mut seen = std::collections::BTreeSet::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = io::split_kv(line)
            .ok_or_else(|| ArtifactError::format(path, format!("bad config line {line:?}")))?;
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| ArtifactError::format(path, format!("bad value for {k}: {v:?}")))
        };
        match k {
            "input_dim" => cfg.input_dim = num(v)?,
            "num_layers" => cfg.num_layers = num(v)?,
            "hidden_dim" => cfg.hidden_dim = num(v)?,
            "num_heads" => cfg.num_heads = num(v)?,
            "ffn_dim" => cfg.ffn_dim = num(v)?,
            "downsample_factor" => cfg.downsample_factor = num(v)?,
            "num_buckets" => cfg.num_buckets = num(v)?,
            "max_distance" => cfg.max_distance = num(v)?,
            "vocab_size" => cfg.vocab_size = num(v)?,
            "dropout" => {
                cfg.dropout = v
                    .parse()
                    .map_err(|_| ArtifactError::format(path, "bad dropout"))?
            }
            "head" => {
                head = Some(
                    HeadKind::parse(v)
                        .ok_or_else(|| ArtifactError::format(path, format!("bad head {v:?}")))?,
                )
            }
            other => {
                return Err(ArtifactError::format(path, format!("unknown config key {other:?}")))
            }
        }
        seen.insert(k.to_string());
    }
    if seen.len() != 11 {
        return Err(ArtifactError::format(path, "incomplete config block"));
    }
    cfg.validate()
        .map_err(|e| ArtifactError::format(path, e.to_string()))?;
    Ok((cfg, head.expect("head key seen")))
}

fn read_header<'a>(
    reader: &mut ByteReader<'a>,
    path: &Path,
) -> Result<(EncoderConfig, HeadKind), ArtifactError> {
    reader.expect_magic(MAGIC)?;
    let version = reader.u32()?;
    if version != VERSION {
        return Err(ArtifactError::format(path, format!("unsupported version {version}")));
    }
    let len = reader.u32()? as usize;
    let text = std::str::from_utf8(reader.take(len)?)
        .map_err(|_| ArtifactError::format(path, "config block is not UTF-8"))?;
    parse_config(text, path)
}

/// Reads only the header (config and head kind).
pub fn read_checkpoint_header(path: &Path) -> Result<(EncoderConfig, HeadKind), NnError> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| ArtifactError::io(path, e))?;
    let mut prefix = [0u8; 16];
    f.read_exact(&mut prefix)
        .map_err(|_| ArtifactError::format(path, "truncated header"))?;
    let len = u32::from_le_bytes([prefix[12], prefix[13], prefix[14], prefix[15]]) as usize;
    if len > 1 << 20 {
        return Err(ArtifactError::format(path, "config block too large").into());
    }
    let mut buf = prefix.to_vec();
    buf.resize(16 + len, 0);
    f.read_exact(&mut buf[16..])
        .map_err(|_| ArtifactError::format(path, "truncated config block"))?;
    let mut r = ByteReader::new(&buf, path);
    Ok(read_header(&mut r, path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderModel, NnError> {
    let bytes = io::read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    let (config, head) = read_header(&mut r, path)?;
    let mut model = EncoderModel::new(config, head, 0)?;

    let mut expected = Vec::new();
    model
        .params
        .for_each(|name, dims, _| expected.push((name.to_string(), dims.to_vec())));
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(ArtifactError::format(
            path,
            format!("{count} tensors, config implies {}", expected.len()),
        )
        .into());
    }
    let mut data = Vec::with_capacity(count);
    for (want_name, want_dims) in &expected {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ArtifactError::format(path, "tensor name is not UTF-8"))?;
        if name != want_name {
            return Err(ArtifactError::format(
                path,
                format!("expected tensor {want_name}, found {name}"),
            )
            .into());
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if &dims != want_dims {
            return Err(ArtifactError::format(
                path,
                format!("tensor {name} has dims {dims:?}, expected {want_dims:?}"),
            )
            .into());
        }
        let n: usize = dims.iter().product();
        data.push(r.f32_vec(n)?);
    }
    r.finish()?;
    let mut it = data.into_iter();
    model.params.for_each_mut(|_, values| {
        let src = it.next().expect("tensor count checked");
        for (dst, s) in values.iter_mut().zip(src) {
            *dst = f64::from(s);
        }
    });
    Ok(model)
}
