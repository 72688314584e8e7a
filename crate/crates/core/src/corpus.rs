//! Synthetic speech-like corpora with exact ground-truth phoneme alignments.
//!
//! Utterances are sampled from a left-to-right phoneme HMM: a silence-bounded
//! phoneme sequence from a bigram chain, a per-phoneme duration, and diagonal
//! Gaussian frames per phoneme state. Frames carry an additional isotropic
//! observation noise term whose scale separates the "clean" and "noisy"
//! evaluation conditions.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, ArtifactError, ByteReader};

/// Phoneme id of silence. It only occurs at utterance boundaries.
pub const SILENCE: u16 = 0;

const FEATURES_MAGIC: &[u8; 8] = b"SGCBFEAT";
const ALIGN_MAGIC: &[u8; 8] = b"SGCBALGN";
const CORPUS_FORMAT: &str = "sgcb-corpus";
const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("invalid labeled fraction {fraction} for {total} utterances")]
    InvalidFraction { fraction: f64, total: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

impl CorpusError {
    pub fn is_format(&self) -> bool {
        matches!(self, CorpusError::Artifact(e) if e.is_format())
    }
}

/// Phoneme duration in frames: `min + Binomial(max - min, q)` with `q` chosen
/// so the expectation is exactly `mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationModel {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

impl DurationModel {
    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        if self.max == self.min {
            return self.min;
        }
        let span = (self.max - self.min) as u64;
        let q = (self.mean - self.min as f64) / span as f64;
        let extra = Binomial::new(span, q.clamp(0.0, 1.0))
            .expect("validated duration model")
            .sample(rng);
        self.min + extra as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionModel {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_utterances: usize,
    pub phoneme_inventory_size: usize,
    pub feature_dim: usize,
    pub durations: Vec<DurationModel>,
    pub emissions: Vec<EmissionModel>,
    /// Row `p` is the (unnormalized) distribution of the phoneme following `p`.
    /// Row 0 (silence) is the utterance-initial distribution. The silence
    /// column and the diagonal must be zero.
    pub transitions: Vec<Vec<f64>>,
    /// Inclusive range of non-silence phonemes per utterance.
    pub phones_per_utterance: (usize, usize),
    pub noise_scale: f64,
}

/// Knobs for drawing a random "language": emission means, durations and a
/// bigram chain. The same world seed must be shared by every corpus that is
/// meant to describe the same language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub phoneme_inventory_size: usize,
    pub feature_dim: usize,
    /// Standard deviation of the per-phoneme emission means.
    pub mean_spread: f64,
    /// Per-dimension emission variances are drawn uniformly from this range.
    pub var_range: (f64, f64),
    pub duration_mean_range: (f64, f64),
    pub duration_min: usize,
    pub duration_max: usize,
    pub phones_per_utterance: (usize, usize),
    /// Log-weights of bigram successors are `sharpness * N(0, 1)`.
    pub transition_sharpness: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            phoneme_inventory_size: 12,
            feature_dim: 8,
            mean_spread: 1.0,
            var_range: (0.6, 1.2),
            duration_mean_range: (5.0, 8.0),
            duration_min: 3,
            duration_max: 12,
            phones_per_utterance: (6, 12),
            transition_sharpness: 1.5,
        }
    }
}

impl CorpusSpec {
    /// Builds a spec whose language tables come from `world` and `world_seed`,
    /// sampled with `seed`.
    pub fn from_world(
        world: &WorldParams,
        world_seed: u64,
        seed: u64,
        num_utterances: usize,
        noise_scale: f64,
    ) -> Self {
        let p = world.phoneme_inventory_size;
        let d = world.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(world_seed ^ 0x5eed_0f_1a11_0a9e);
        let emissions = (0..p)
            .map(|_| EmissionModel {
                mean: (0..d)
                    .map(|_| world.mean_spread * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                var: (0..d)
                    .map(|_| rng.gen_range(world.var_range.0..=world.var_range.1))
                    .collect(),
            })
            .collect();
        let durations = (0..p)
            .map(|_| DurationModel {
                mean: rng.gen_range(world.duration_mean_range.0..=world.duration_mean_range.1),
                min: world.duration_min,
                max: world.duration_max,
            })
            .collect();
        let transitions = (0..p)
            .map(|from| {
                (0..p)
                    .map(|to| {
                        let w = (world.transition_sharpness * rng.sample::<f64, _>(StandardNormal))
                            .exp();
                        if to == SILENCE as usize || to == from {
                            0.0
                        } else {
                            w
                        }
                    })
                    .collect()
            })
            .collect();
        CorpusSpec {
            seed,
            num_utterances,
            phoneme_inventory_size: p,
            feature_dim: d,
            durations,
            emissions,
            transitions,
            phones_per_utterance: world.phones_per_utterance,
            noise_scale,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        let p = self.phoneme_inventory_size;
        if p < 2 {
            return bad(format!("phoneme_inventory_size {p} < 2"));
        }
        if p > u16::MAX as usize {
            return bad(format!("phoneme_inventory_size {p} does not fit in u16"));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        if self.durations.len() != p || self.emissions.len() != p || self.transitions.len() != p {
            return bad("per-phoneme tables must have phoneme_inventory_size rows".into());
        }
        for (i, dm) in self.durations.iter().enumerate() {
            if dm.min == 0 || dm.max < dm.min {
                return bad(format!("phoneme {i}: duration bounds [{}, {}]", dm.min, dm.max));
            }
            if !(dm.mean >= dm.min as f64 && dm.mean <= dm.max as f64) {
                return bad(format!("phoneme {i}: duration mean {} outside bounds", dm.mean));
            }
        }
        for (i, em) in self.emissions.iter().enumerate() {
            if em.mean.len() != self.feature_dim || em.var.len() != self.feature_dim {
                return bad(format!("phoneme {i}: emission dims != feature_dim"));
            }
            if em.var.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return bad(format!("phoneme {i}: variances must be positive"));
            }
            if em.mean.iter().any(|m| !m.is_finite()) {
                return bad(format!("phoneme {i}: non-finite mean"));
            }
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.len() != p {
                return bad(format!("transition row {i} has wrong length"));
            }
            if row.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
                return bad(format!("transition row {i} has negative or non-finite weights"));
            }
            if row[SILENCE as usize] != 0.0 || (i != SILENCE as usize && row[i] != 0.0) {
                return bad(format!("transition row {i} allows silence or self loops"));
            }
            if row.iter().sum::<f64>() <= 0.0 {
                return bad(format!("transition row {i} is all zero"));
            }
        }
        let (lo, hi) = self.phones_per_utterance;
        if lo == 0 || hi < lo {
            return bad(format!("phones_per_utterance ({lo}, {hi}) invalid"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be non-negative".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        io::sha256_hex(&json)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// T×D frames.
    pub features: Array2<f32>,
    pub transcript: Option<Vec<u16>>,
    /// Ground-truth phoneme per frame. Synthetic corpora only; evaluation use.
    pub truth_alignment: Option<Vec<u16>>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.features.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusRole {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub role: CorpusRole,
    pub spec_hash: String,
    pub feature_dim: usize,
    pub inventory_size: usize,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::num_frames).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.utterances.iter().map(|u| u.id.as_str())
    }

    /// Copy with every transcript removed.
    pub fn without_transcripts(&self) -> Corpus {
        let mut out = self.clone();
        out.role = CorpusRole::Unlabeled;
        for u in &mut out.utterances {
            u.transcript = None;
        }
        out
    }
}

/// Merges consecutive repeats: `[1, 1, 2, 2, 1] -> [1, 2, 1]`.
pub fn collapse_runs(labels: &[u16]) -> Vec<u16> {
    let mut out: Vec<u16> = Vec::new();
    for &l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let samplers = spec
        .transitions
        .iter()
        .map(|row| WeightedIndex::new(row).expect("validated transitions"))
        .collect::<Vec<_>>();
    let d = spec.feature_dim;
    let std: Vec<Vec<f64>> = spec
        .emissions
        .iter()
        .map(|e| e.var.iter().map(|v| v.sqrt()).collect())
        .collect();

    let mut utterances = Vec::with_capacity(spec.num_utterances);
    for index in 0..spec.num_utterances {
        let (lo, hi) = spec.phones_per_utterance;
        let n = rng.gen_range(lo..=hi);
        let mut phones = Vec::with_capacity(n + 2);
        phones.push(SILENCE);
        let mut prev = SILENCE as usize;
        for _ in 0..n {
            let next = samplers[prev].sample(&mut rng);
            phones.push(next as u16);
            prev = next;
        }
        phones.push(SILENCE);

        let mut alignment = Vec::new();
        for &p in &phones {
            let dur = spec.durations[p as usize].sample(&mut rng);
            alignment.extend(std::iter::repeat(p).take(dur));
        }

        let t = alignment.len();
        let mut features = Array2::<f32>::zeros((t, d));
        for (frame, &p) in alignment.iter().enumerate() {
            let em = &spec.emissions[p as usize];
            for k in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                let noise: f64 = rng.sample(StandardNormal);
                let x = em.mean[k] + std[p as usize][k] * z + spec.noise_scale * noise;
                features[[frame, k]] = x as f32;
            }
        }

        utterances.push(Utterance {
            id: format!("utt{index:06}"),
            features,
            transcript: Some(phones),
            truth_alignment: Some(alignment),
        });
    }

    Ok(Corpus {
        role: CorpusRole::Labeled,
        spec_hash: spec.hash(),
        feature_dim: d,
        inventory_size: spec.phoneme_inventory_size,
        utterances,
    })
}

/// Disjoint labeled/unlabeled partition. The unlabeled part loses its
/// transcripts; ground-truth alignments stay attached for evaluation only.
pub fn split_corpus(
    corpus: &Corpus,
    labeled_fraction: f64,
    seed: u64,
) -> Result<(Corpus, Corpus), CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let total = corpus.len();
    let invalid = CorpusError::InvalidFraction {
        fraction: labeled_fraction,
        total,
    };
    if !(labeled_fraction > 0.0 && labeled_fraction < 1.0) {
        return Err(invalid);
    }
    let n_labeled = (labeled_fraction * total as f64).round() as usize;
    if n_labeled == 0 || n_labeled >= total {
        return Err(invalid);
    }
    if let Some(u) = corpus.utterances.iter().find(|u| u.transcript.is_none()) {
        return Err(CorpusError::InvalidSpec(format!(
            "cannot split: utterance {} has no transcript",
            u.id
        )));
    }

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labeled_idx = order[..n_labeled].to_vec();
    let mut unlabeled_idx = order[n_labeled..].to_vec();
    labeled_idx.sort_unstable();
    unlabeled_idx.sort_unstable();

    let pick = |idx: &[usize], role: CorpusRole| Corpus {
        role,
        spec_hash: corpus.spec_hash.clone(),
        feature_dim: corpus.feature_dim,
        inventory_size: corpus.inventory_size,
        utterances: idx.iter().map(|&i| corpus.utterances[i].clone()).collect(),
    };
    let labeled = pick(&labeled_idx, CorpusRole::Labeled);
    let unlabeled = pick(&unlabeled_idx, CorpusRole::Unlabeled).without_transcripts();
    Ok((labeled, unlabeled))
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    format: String,
    version: u32,
    role: CorpusRole,
    feature_dim: usize,
    inventory_size: usize,
    spec_hash: String,
    num_utterances: usize,
    has_alignments: bool,
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    io::create_dir(dir)?;
    let n_aligned = corpus
        .utterances
        .iter()
        .filter(|u| u.truth_alignment.is_some())
        .count();
    if n_aligned != 0 && n_aligned != corpus.len() {
        return Err(CorpusError::InvalidSpec(
            "either all or no utterances may carry alignments".into(),
        ));
    }
    let has_alignments = n_aligned == corpus.len() && !corpus.is_empty();

    let mut seen = HashSet::new();
    let mut manifest = String::new();
    let mut features = Vec::from(&FEATURES_MAGIC[..]);
    features.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    let mut alignments = Vec::from(&ALIGN_MAGIC[..]);
    alignments.extend_from_slice(&CORPUS_VERSION.to_le_bytes());

    for u in &corpus.utterances {
        if u.id.is_empty() || u.id.contains(['\t', '\n', '\r', ' ']) || !seen.insert(&u.id) {
            return Err(CorpusError::InvalidSpec(format!(
                "utterance id {:?} is empty, duplicated or contains whitespace",
                u.id
            )));
        }
        if u.features.ncols() != corpus.feature_dim {
            return Err(CorpusError::InvalidSpec(format!(
                "utterance {} has feature dim {}",
                u.id,
                u.features.ncols()
            )));
        }
        let transcript = match &u.transcript {
            Some(t) if !t.is_empty() => t
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            _ => "-".to_string(),
        };
        writeln!(manifest, "{}\t{}\t{}", u.id, u.num_frames(), transcript).unwrap();
        io::put_f32s(&mut features, u.features.iter().copied());
        if let Some(a) = &u.truth_alignment {
            if a.len() != u.num_frames() {
                return Err(CorpusError::InvalidSpec(format!(
                    "utterance {}: alignment length {} != {} frames",
                    u.id,
                    a.len(),
                    u.num_frames()
                )));
            }
            io::put_u16s(&mut alignments, a);
        }
    }

    let meta = CorpusMeta {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        role: corpus.role,
        feature_dim: corpus.feature_dim,
        inventory_size: corpus.inventory_size,
        spec_hash: corpus.spec_hash.clone(),
        num_utterances: corpus.len(),
        has_alignments,
    };
    let meta = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    io::write_file(&dir.join("meta.json"), meta.as_bytes())?;
    io::write_file(&dir.join("manifest.tsv"), manifest.as_bytes())?;
    io::write_file(&dir.join("features.bin"), &features)?;
    let align_path = dir.join("alignments.bin");
    if has_alignments {
        io::write_file(&align_path, &alignments)?;
    } else if align_path.exists() {
        std::fs::remove_file(&align_path).map_err(|e| ArtifactError::io(&align_path, e))?;
    }
    Ok(())
}

/// Reads only the header of a saved corpus.
pub fn read_corpus_meta(dir: &Path) -> Result<serde_json::Value, CorpusError> {
    let path = dir.join("meta.json");
    let text = io::read_text(&path)?;
    let meta: CorpusMeta = serde_json::from_str(&text)
        .map_err(|e| ArtifactError::format(&path, format!("bad meta.json: {e}")))?;
    check_meta(&meta, &path)?;
    Ok(serde_json::to_value(&meta).expect("meta serializes"))
}

fn check_meta(meta: &CorpusMeta, path: &Path) -> Result<(), CorpusError> {
    if meta.format != CORPUS_FORMAT {
        return Err(ArtifactError::format(path, format!("unknown format {:?}", meta.format)).into());
    }
    if meta.version != CORPUS_VERSION {
        return Err(
            ArtifactError::format(path, format!("unsupported version {}", meta.version)).into(),
        );
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let meta_path = dir.join("meta.json");
    let meta: CorpusMeta = serde_json::from_str(&io::read_text(&meta_path)?)
        .map_err(|e| ArtifactError::format(&meta_path, format!("bad meta.json: {e}")))?;
    check_meta(&meta, &meta_path)?;

    let manifest_path = dir.join("manifest.tsv");
    let manifest = io::read_text(&manifest_path)?;
    let mut rows = Vec::new();
    for (line_no, line) in manifest.lines().enumerate() {
        let fmt_err = |why: &str| ArtifactError::format(&manifest_path, format!("line {}: {why}", line_no + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(fmt_err("expected 3 tab-separated columns").into());
        }
        let frames: usize = cols[1].parse().map_err(|_| fmt_err("bad frame count"))?;
        let transcript = if cols[2] == "-" {
            None
        } else {
            Some(
                cols[2]
                    .split(' ')
                    .map(|p| p.parse::<u16>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| fmt_err("bad transcript"))?,
            )
        };
        rows.push((cols[0].to_string(), frames, transcript));
    }
    if rows.len() != meta.num_utterances {
        return Err(ArtifactError::format(
            &manifest_path,
            format!("{} rows but meta declares {}", rows.len(), meta.num_utterances),
        )
        .into());
    }

    let feat_path = dir.join("features.bin");
    let feat_bytes = io::read_file(&feat_path)?;
    let mut feats = ByteReader::new(&feat_bytes, &feat_path);
    feats.expect_magic(FEATURES_MAGIC)?;
    if feats.u32()? != CORPUS_VERSION {
        return Err(ArtifactError::format(&feat_path, "version mismatch").into());
    }

    let align_path = dir.join("alignments.bin");
    let align_bytes = if meta.has_alignments {
        Some(io::read_file(&align_path)?)
    } else {
        None
    };
    let mut aligns = match &align_bytes {
        Some(bytes) => {
            let mut r = ByteReader::new(bytes, &align_path);
            r.expect_magic(ALIGN_MAGIC)?;
            if r.u32()? != CORPUS_VERSION {
                return Err(ArtifactError::format(&align_path, "version mismatch").into());
            }
            Some(r)
        }
        None => None,
    };

    let d = meta.feature_dim;
    let mut utterances = Vec::with_capacity(rows.len());
    for (id, frames, transcript) in rows {
        let data = feats.f32_vec(frames * d)?;
        let features = Array2::from_shape_vec((frames, d), data).expect("shape matches length");
        let truth_alignment = match aligns.as_mut() {
            Some(r) => Some(r.u16_vec(frames)?),
            None => None,
        };
        utterances.push(Utterance {
            id,
            features,
            transcript,
            truth_alignment,
        });
    }
    feats.finish()?;
    if let Some(r) = &aligns {
        r.finish()?;
    }

    Ok(Corpus {
        role: meta.role,
        spec_hash: meta.spec_hash,
        feature_dim: d,
        inventory_size: meta.inventory_size,
        utterances,
    })
}

/// Per-phoneme mean duration over all runs in the ground-truth alignments.
pub fn empirical_durations(corpus: &Corpus) -> BTreeMap<u16, (f64, usize)> {
    let mut acc: BTreeMap<u16, (usize, usize)> = BTreeMap::new();
    for u in &corpus.utterances {
        let Some(a) = &u.truth_alignment else { continue };
        let mut start = 0;
        while start < a.len() {
            let mut end = start;
            while end < a.len() && a[end] == a[start] {
                end += 1;
            }
            let e = acc.entry(a[start]).or_default();
            e.0 += end - start;
            e.1 += 1;
            start = end;
        }
    }
    acc.into_iter()
        .map(|(p, (frames, runs))| (p, (frames as f64 / runs as f64, runs)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(n: usize) -> CorpusSpec {
        CorpusSpec::from_world(&WorldParams::default(), 3, 11, n, 0.1)
    }

    #[test]
    fn empty_corpus() {
        let c = generate_corpus(&small_spec(0)).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small_spec(20)).unwrap();
        let b = generate_corpus(&small_spec(20)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn alignment_collapses_to_transcript() {
        let c = generate_corpus(&small_spec(50)).unwrap();
        for u in &c.utterances {
            let a = u.truth_alignment.as_ref().unwrap();
            assert_eq!(a.len(), u.num_frames());
            assert_eq!(&collapse_runs(a), u.transcript.as_ref().unwrap());
            assert_eq!(a[0], SILENCE);
            assert_eq!(*a.last().unwrap(), SILENCE);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small_spec(1);
        s.phoneme_inventory_size = 1;
        assert!(matches!(generate_corpus(&s), Err(CorpusError::InvalidSpec(_))));

        let mut s = small_spec(1);
        s.emissions[2].var[0] = 0.0;
        assert!(matches!(generate_corpus(&s), Err(CorpusError::InvalidSpec(_))));

        let mut s = small_spec(1);
        s.durations[1].min = 0;
        assert!(matches!(generate_corpus(&s), Err(CorpusError::InvalidSpec(_))));

        let mut s = small_spec(1);
        s.feature_dim = 0;
        assert!(matches!(generate_corpus(&s), Err(CorpusError::InvalidSpec(_))));
    }

    #[test]
    fn split_counts_and_errors() {
        let c = generate_corpus(&small_spec(40)).unwrap();
        let (l, u) = split_corpus(&c, 0.25, 1).unwrap();
        assert_eq!(l.len(), 10);
        assert_eq!(u.len(), 30);
        assert!(u.utterances.iter().all(|u| u.transcript.is_none()));
        assert!(matches!(
            split_corpus(&c, 0.999, 1),
            Err(CorpusError::InvalidFraction { .. })
        ));
        assert!(matches!(
            split_corpus(&c, 0.0, 1),
            Err(CorpusError::InvalidFraction { .. })
        ));
        let empty = generate_corpus(&small_spec(0)).unwrap();
        assert!(matches!(split_corpus(&empty, 0.5, 1), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn duration_sampler_respects_bounds() {
        let dm = DurationModel { mean: 4.5, min: 2, max: 9 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let d = dm.sample(&mut rng);
            assert!((2..=9).contains(&d));
        }
        let fixed = DurationModel { mean: 3.0, min: 3, max: 3 };
        assert_eq!(fixed.sample(&mut rng), 3);
    }
}
