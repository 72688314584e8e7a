//! Frame-level discrete targets at the encoder frame rate.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ctc::{ctc_forced_align, BLANK};
use super::{AlignError, CtcError};
use crate::corpus::{Utterance, SILENCE};
use crate::io::{self, ArtifactError, ByteReader};
use crate::nn::{log_softmax_rows, EncoderModel, HeadKind};

const TARGETS_MAGIC: &[u8; 8] = b"SGCBTGTS";
const TARGETS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RawKmeans,
    CtcKmeans,
    LatentKmeans,
    PhonemeAlign,
    ModelPredict,
    GroundTruth,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::RawKmeans => "raw-kmeans",
            Provenance::CtcKmeans => "ctc-kmeans",
            Provenance::LatentKmeans => "latent-kmeans",
            Provenance::PhonemeAlign => "phoneme-align",
            Provenance::ModelPredict => "model-predict",
            Provenance::GroundTruth => "ground-truth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Provenance::RawKmeans,
            Provenance::CtcKmeans,
            Provenance::LatentKmeans,
            Provenance::PhonemeAlign,
            Provenance::ModelPredict,
            Provenance::GroundTruth,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetEntry {
    pub id: String,
    pub labels: Vec<u16>,
}

/// Per-utterance label sequences, in manifest order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSet {
    pub vocab_size: usize,
    pub provenance: Provenance,
    pub entries: Vec<TargetEntry>,
}

impl TargetSet {
    pub fn new(vocab_size: usize, provenance: Provenance) -> Self {
        TargetSet {
            vocab_size,
            provenance,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index(&self) -> HashMap<&str, &[u16]> {
        self.entries
            .iter()
            .map(|e| (e.id.as_str(), e.labels.as_slice()))
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&[u16]> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.labels.as_slice())
    }

    pub fn total_frames(&self) -> usize {
        self.entries.iter().map(|e| e.labels.len()).sum()
    }

    /// Every label is below `vocab_size`.
    pub fn is_valid(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.labels.iter().all(|&l| (l as usize) < self.vocab_size))
    }

    /// Concatenation, keeping `self`'s order first. Vocab sizes must agree.
    pub fn extend(&mut self, other: TargetSet) {
        assert_eq!(self.vocab_size, other.vocab_size, "vocabularies differ");
        self.entries.extend(other.entries);
    }
}

/// How CTC blank frames become phoneme targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BlankPolicy {
    /// A blank takes the nearest preceding label; leading blanks take the
    /// first following label; an all-blank utterance becomes silence.
    #[default]
    InheritPrevious,
    /// Every blank becomes the silence phoneme.
    AsSilence,
}

impl BlankPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            BlankPolicy::InheritPrevious => "inherit-previous",
            BlankPolicy::AsSilence => "as-silence",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "inherit-previous" => Some(BlankPolicy::InheritPrevious),
            "as-silence" | "blank-as-silence-label" => Some(BlankPolicy::AsSilence),
            _ => None,
        }
    }
}

/// Turns per-frame CTC classes (0 = blank, `p + 1` = phoneme `p`) into
/// phoneme ids.
pub fn resolve_blanks(frames: &[u16], policy: BlankPolicy) -> Vec<u16> {
    match policy {
        BlankPolicy::AsSilence => frames
            .iter()
            .map(|&c| if c == BLANK { SILENCE } else { c - 1 })
            .collect(),
        BlankPolicy::InheritPrevious => {
            let Some(first) = frames.iter().copied().find(|&c| c != BLANK) else {
                return vec![SILENCE; frames.len()];
            };
            let mut current = first;
            frames
                .iter()
                .map(|&c| {
                    if c != BLANK {
                        current = c;
                    }
                    current - 1
                })
                .collect()
        }
    }
}

/// Majority label in each window of `factor` frames; ties go to the label
/// that appears first in the window. Trailing partial windows are dropped.
pub fn downsample_labels(labels: &[u16], factor: usize) -> Vec<u16> {
    labels
        .chunks_exact(factor)
        .map(|w| {
            let mut best = w[0];
            let mut best_count = 0;
            for &cand in w {
                let count = w.iter().filter(|&&x| x == cand).count();
                if count > best_count {
                    best = cand;
                    best_count = count;
                }
            }
            best
        })
        .collect()
}

/// Ground-truth alignments downsampled to the encoder frame rate.
pub fn ground_truth_targets<'a>(
    utterances: impl IntoIterator<Item = &'a Utterance>,
    downsample_factor: usize,
    inventory_size: usize,
) -> Result<TargetSet, AlignError> {
    let mut set = TargetSet::new(inventory_size, Provenance::GroundTruth);
    for u in utterances {
        let truth = u
            .truth_alignment
            .as_ref()
            .ok_or_else(|| AlignError::MissingTruth(u.id.clone()))?;
        set.entries.push(TargetEntry {
            id: u.id.clone(),
            labels: downsample_labels(truth, downsample_factor),
        });
    }
    Ok(set)
}

pub enum TargetMode<'a> {
    /// Forced alignment of a phoneme transcript per utterance id.
    Align {
        transcripts: &'a BTreeMap<String, Vec<u16>>,
    },
    /// Per-frame argmax of the unmasked logits.
    Predict,
}

#[derive(Debug, Clone)]
pub struct TargetReport {
    pub targets: TargetSet,
    /// Utterances dropped because their transcript did not fit.
    pub skipped: Vec<String>,
}

/// Frame targets from a model's logits. CTC-head models yield phoneme ids
/// (`V - 1` of them) after blank resolution; target-head models yield their
/// own label space.
pub fn frame_targets_from_model(
    model: &EncoderModel,
    utterances: &[Utterance],
    mode: TargetMode<'_>,
    blank_policy: BlankPolicy,
) -> Result<TargetReport, AlignError> {
    let provenance = match mode {
        TargetMode::Align { .. } => {
            if model.head != HeadKind::Ctc {
                return Err(AlignError::WrongHead("forced alignment needs a CTC head"));
            }
            Provenance::PhonemeAlign
        }
        TargetMode::Predict => Provenance::ModelPredict,
    };
    let vocab = match model.head {
        HeadKind::Ctc => model.config.vocab_size - 1,
        HeadKind::Targets => model.config.vocab_size,
    };

    let results: Vec<Result<Option<TargetEntry>, AlignError>> = utterances
        .par_iter()
        .map(|u| {
            let out = model.infer(&u.features)?;
            let labels = match &mode {
                TargetMode::Align { transcripts } => {
                    let transcript = transcripts
                        .get(&u.id)
                        .ok_or_else(|| AlignError::MissingTranscript(u.id.clone()))?;
                    let ctc_labels: Vec<u16> = transcript.iter().map(|&p| p + 1).collect();
                    let log_probs = log_softmax_rows(&out.logits.view());
                    match ctc_forced_align(&log_probs.view(), &ctc_labels) {
                        Ok(path) => resolve_blanks(&path, blank_policy),
                        Err(CtcError::InfeasibleTarget { .. }) => return Ok(None),
                        Err(e) => return Err(e.into()),
                    }
                }
                TargetMode::Predict => {
                    let argmax: Vec<u16> = out
                        .logits
                        .rows()
                        .into_iter()
                        .map(|row| {
                            let mut best = 0;
                            for (i, &v) in row.iter().enumerate() {
                                if v > row[best] {
                                    best = i;
                                }
                            }
                            best as u16
                        })
                        .collect();
                    match model.head {
                        HeadKind::Ctc => resolve_blanks(&argmax, blank_policy),
                        HeadKind::Targets => argmax,
                    }
                }
            };
            Ok(Some(TargetEntry {
                id: u.id.clone(),
                labels,
            }))
        })
        .collect();

    let mut targets = TargetSet::new(vocab, provenance);
    let mut skipped = Vec::new();
    for (u, r) in utterances.iter().zip(results) {
        match r? {
            Some(entry) => targets.entries.push(entry),
            None => skipped.push(u.id.clone()),
        }
    }
    Ok(TargetReport { targets, skipped })
}

pub fn save_targets(targets: &TargetSet, dir: &Path) -> Result<(), AlignError> {
    io::create_dir(dir)?;
    let mut manifest = format!(
        "#sgcb-targets\tversion={TARGETS_VERSION}\tvocab_size={}\tprovenance={}\n",
        targets.vocab_size,
        targets.provenance.as_str()
    );
    let mut bin = Vec::from(&TARGETS_MAGIC[..]);
    bin.extend_from_slice(&TARGETS_VERSION.to_le_bytes());
    for e in &targets.entries {
        writeln!(
            manifest,
            "{}\t{}\t{}",
            e.id,
            e.labels.len(),
            targets.provenance.as_str()
        )
        .unwrap();
        io::put_u16s(&mut bin, &e.labels);
    }
    io::write_file(&dir.join("targets.tsv"), manifest.as_bytes())?;
    io::write_file(&dir.join("targets.bin"), &bin)?;
    Ok(())
}

fn parse_targets_header(line: &str, path: &Path) -> Result<(usize, Provenance), ArtifactError> {
    let mut cols = line.split('\t');
    if cols.next() != Some("#sgcb-targets") {
        return Err(ArtifactError::format(path, "missing #sgcb-targets header"));
    }
    let mut version = None;
    let mut vocab = None;
    let mut prov = None;
    for col in cols {
        match io::split_kv(col) {
            Some(("version", v)) => version = v.parse::<u32>().ok(),
            Some(("vocab_size", v)) => vocab = v.parse::<usize>().ok(),
            Some(("provenance", v)) => prov = Provenance::parse(v),
            _ => return Err(ArtifactError::format(path, format!("bad header field {col:?}"))),
        }
    }
    if version != Some(TARGETS_VERSION) {
        return Err(ArtifactError::format(path, "unsupported targets version"));
    }
    match (vocab, prov) {
        (Some(v), Some(p)) => Ok((v, p)),
        _ => Err(ArtifactError::format(path, "header lacks vocab_size or provenance")),
    }
}

/// Header of a saved target set: `(vocab_size, provenance, entry count)`.
pub fn read_targets_header(dir: &Path) -> Result<(usize, Provenance, usize), AlignError> {
    let path = dir.join("targets.tsv");
    let text = io::read_text(&path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| ArtifactError::format(&path, "empty manifest"))?;
    let (vocab, prov) = parse_targets_header(header, &path)?;
    Ok((vocab, prov, lines.count()))
}

pub fn load_targets(dir: &Path) -> Result<TargetSet, AlignError> {
    let path = dir.join("targets.tsv");
    let text = io::read_text(&path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| ArtifactError::format(&path, "empty manifest"))?;
    let (vocab_size, provenance) = parse_targets_header(header, &path)?;

    let bin_path = dir.join("targets.bin");
    let bytes = io::read_file(&bin_path)?;
    let mut r = ByteReader::new(&bytes, &bin_path);
    r.expect_magic(TARGETS_MAGIC)?;
    if r.u32()? != TARGETS_VERSION {
        return Err(ArtifactError::format(&bin_path, "version mismatch").into());
    }

    let mut set = TargetSet::new(vocab_size, provenance);
    for (n, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || ArtifactError::format(&path, format!("line {}: malformed row", n + 2));
        if cols.len() != 3 || Provenance::parse(cols[2]) != Some(provenance) {
            return Err(bad().into());
        }
        let len: usize = cols[1].parse().map_err(|_| bad())?;
        let labels = r.u16_vec(len)?;
        set.entries.push(TargetEntry {
            id: cols[0].to_string(),
            labels,
        });
    }
    r.finish()?;
    if !set.is_valid() {
        return Err(ArtifactError::format(&bin_path, "label exceeds vocab_size").into());
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inherit_previous_policy() {
        assert_eq!(
            resolve_blanks(&[0, 0, 3, 0, 0, 5, 5, 0], BlankPolicy::InheritPrevious),
            vec![2, 2, 2, 2, 2, 4, 4, 4]
        );
        assert_eq!(resolve_blanks(&[0, 0], BlankPolicy::InheritPrevious), vec![0, 0]);
        assert_eq!(
            resolve_blanks(&[0, 3, 0], BlankPolicy::AsSilence),
            vec![SILENCE, 2, SILENCE]
        );
    }

    #[test]
    fn downsample_majority() {
        assert_eq!(downsample_labels(&[1, 1, 2, 2, 2, 3, 4], 2), vec![1, 2, 2]);
        assert_eq!(downsample_labels(&[1, 2, 2, 3, 3, 3], 3), vec![2, 3]);
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = TargetSet::new(7, Provenance::CtcKmeans);
        set.entries.push(TargetEntry { id: "a".into(), labels: vec![0, 6, 3] });
        set.entries.push(TargetEntry { id: "b".into(), labels: vec![] });
        save_targets(&set, dir.path()).unwrap();
        assert_eq!(load_targets(dir.path()).unwrap(), set);
        assert_eq!(read_targets_header(dir.path()).unwrap(), (7, Provenance::CtcKmeans, 2));

        let bin = dir.path().join("targets.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[1] = b'X';
        std::fs::write(&bin, &bytes).unwrap();
        assert!(load_targets(dir.path()).unwrap_err().is_format());
    }
}
