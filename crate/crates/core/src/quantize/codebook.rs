use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::QuantizeError;
use crate::io::{self, ArtifactError, ByteReader};

const CODEBOOK_HEADER: &str = "#sgcb-codebook";
const CODEBOOK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// Stacked raw input frames.
    Raw,
    /// Hidden states of a supervised CTC model.
    CtcLatent,
    /// Hidden states of a masked-prediction model.
    PretrainedLatent,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Raw => "raw",
            FeatureKind::CtcLatent => "ctc-latent",
            FeatureKind::PretrainedLatent => "pretrained-latent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw" => Some(FeatureKind::Raw),
            "ctc-latent" => Some(FeatureKind::CtcLatent),
            "pretrained-latent" => Some(FeatureKind::PretrainedLatent),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookSource {
    pub kind: FeatureKind,
    pub model_hash: Option<String>,
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// K×F, every value exactly representable as f32.
    pub centroids: Array2<f64>,
    pub source: CodebookSource,
    pub seed: u64,
    pub distortion_history: Vec<f64>,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }
}

/// Writes `codebook.txt` (header plus distortion history) and
/// `centroids.bin` (little-endian f32 rows).
pub fn save_codebook(codebook: &Codebook, dir: &Path) -> Result<(), QuantizeError> {
    io::create_dir(dir)?;
    let mut text = format!(
        "{CODEBOOK_HEADER}\nversion={CODEBOOK_VERSION}\nk={}\nf={}\nsource={}\nmodel_hash={}\nlayer={}\nseed={}\n",
        codebook.k(),
        codebook.dim(),
        codebook.source.kind.as_str(),
        codebook.source.model_hash.as_deref().unwrap_or("-"),
        codebook.source.layer.map_or("-".to_string(), |l| l.to_string()),
        codebook.seed,
    );
    let history: Vec<String> = codebook
        .distortion_history
        .iter()
        .map(|d| format!("{d:?}"))
        .collect();
    text.push_str(&format!("distortion={}\n", history.join(",")));
    let mut bin = Vec::new();
    io::put_f32s(&mut bin, codebook.centroids.iter().map(|&v| v as f32));
    io::write_file(&dir.join("codebook.txt"), text.as_bytes())?;
    io::write_file(&dir.join("centroids.bin"), &bin)?;
    Ok(())
}

pub fn load_codebook(dir: &Path) -> Result<Codebook, QuantizeError> {
    let path = dir.join("codebook.txt");
    let text = io::read_text(&path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CODEBOOK_HEADER) {
        return Err(ArtifactError::format(&path, "missing codebook header").into());
    }
    let mut fields = std::collections::BTreeMap::new();
    for line in lines {
        let (k, v) = io::split_kv(line)
            .ok_or_else(|| ArtifactError::format(&path, format!("malformed line {line:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |key: &str| {
        fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ArtifactError::format(&path, format!("missing {key}")))
    };
    let num = |key: &str| -> Result<u64, ArtifactError> {
        get(key)?
            .parse()
            .map_err(|_| ArtifactError::format(&path, format!("bad {key}")))
    };
    if num("version")? != CODEBOOK_VERSION as u64 {
        return Err(ArtifactError::format(&path, "unsupported codebook version").into());
    }
    let k = num("k")? as usize;
    let f = num("f")? as usize;
    let kind = FeatureKind::parse(get("source")?)
        .ok_or_else(|| ArtifactError::format(&path, "bad source"))?;
    let model_hash = match get("model_hash")? {
        "-" => None,
        h => Some(h.to_string()),
    };
    let layer = match get("layer")? {
        "-" => None,
        _ => Some(num("layer")? as usize),
    };
    let seed = num("seed")?;
    let distortion_history = match get("distortion")? {
        "" => Vec::new(),
        s => s
            .split(',')
            .map(|d| d.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| ArtifactError::format(&path, "bad distortion history"))?,
    };

    let bin_path = dir.join("centroids.bin");
    let bytes = io::read_file(&bin_path)?;
    let mut r = ByteReader::new(&bytes, &bin_path);
    let values = r.f32_vec(k * f)?;
    r.finish()?;
    let centroids = Array2::from_shape_vec((k, f), values.into_iter().map(f64::from).collect())
        .expect("length checked");
    Ok(Codebook {
        centroids,
        source: CodebookSource {
            kind,
            model_hash,
            layer,
        },
        seed,
        distortion_history,
    })
}
