//! Acquisition-sequence and abnormality labels used for conditioning.

use serde::{Deserialize, Serialize};

/// The five acquisition-sequence analogues. Labeled (normal/abnormal)
/// volumes exist only for the first three; `T1Pre` and `T2` volumes are
/// always unlabeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sequence {
    Flair,
    T1,
    T1Post,
    T1Pre,
    T2,
}

impl Sequence {
    pub const ALL: [Sequence; 5] =
        [Sequence::Flair, Sequence::T1, Sequence::T1Post, Sequence::T1Pre, Sequence::T2];

    /// Sequences that carry normal/abnormal volume labels.
    pub const LABELED: [Sequence; 3] = [Sequence::Flair, Sequence::T1, Sequence::T1Post];

    /// Sequences generated only as unlabeled volumes.
    pub const UNLABELED: [Sequence; 2] = [Sequence::T1Pre, Sequence::T2];

    pub fn name(self) -> &'static str {
        match self {
            Sequence::Flair => "FLAIR",
            Sequence::T1 => "T1",
            Sequence::T1Post => "T1POST",
            Sequence::T1Pre => "T1PRE",
            Sequence::T2 => "T2",
        }
    }

    pub fn from_name(s: &str) -> Option<Sequence> {
        Sequence::ALL.iter().copied().find(|q| q.name().eq_ignore_ascii_case(s))
    }

    pub fn index(self) -> usize {
        Sequence::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn has_class_labels(self) -> bool {
        Sequence::LABELED.contains(&self)
    }
}

/// Volume-level class assigned by the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VolumeClass {
    Normal,
    Abnormal,
    Unlabeled,
}

impl VolumeClass {
    pub const ALL: [VolumeClass; 3] =
        [VolumeClass::Normal, VolumeClass::Abnormal, VolumeClass::Unlabeled];

    pub fn name(self) -> &'static str {
        match self {
            VolumeClass::Normal => "normal",
            VolumeClass::Abnormal => "abnormal",
            VolumeClass::Unlabeled => "unlabeled",
        }
    }

    pub fn from_name(s: &str) -> Option<VolumeClass> {
        VolumeClass::ALL.iter().copied().find(|c| c.name() == s)
    }

    pub fn is_labeled(self) -> bool {
        !matches!(self, VolumeClass::Unlabeled)
    }
}

/// Abnormality token at the patch level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Abnormality {
    Normal,
    Abnormal,
    Unknown,
}

/// Sequence-conditioning token; `Null` is the classifier-free-guidance
/// dropout token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SeqToken {
    Seq(Sequence),
    Null,
}

impl SeqToken {
    /// Embedding index; the five sequences occupy 0..5, `Null` is 5.
    pub fn embed_index(self) -> usize {
        match self {
            SeqToken::Seq(s) => s.index(),
            SeqToken::Null => Sequence::ALL.len(),
        }
    }

    pub const VOCAB: usize = 6;
}

/// Abnormality-conditioning token; `Null` is the guidance dropout token
/// and `Unknown` marks unlabeled-sequence samples in Stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathToken {
    Abn(Abnormality),
    Null,
}

impl PathToken {
    pub fn embed_index(self) -> usize {
        match self {
            PathToken::Abn(Abnormality::Normal) => 0,
            PathToken::Abn(Abnormality::Abnormal) => 1,
            PathToken::Abn(Abnormality::Unknown) => 2,
            PathToken::Null => 3,
        }
    }

    pub const VOCAB: usize = 4;
}

/// Full conditioning label carried by patches and latent samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionLabel {
    pub sequence: SeqToken,
    pub abnormality: PathToken,
}

impl ConditionLabel {
    /// Stage-1 label: sequence only, abnormality path unused.
    pub fn stage1(seq: Sequence) -> Self {
        ConditionLabel { sequence: SeqToken::Seq(seq), abnormality: PathToken::Null }
    }

    pub fn new(seq: Sequence, abn: Abnormality) -> Self {
        ConditionLabel { sequence: SeqToken::Seq(seq), abnormality: PathToken::Abn(abn) }
    }
}

/// Patch-level abnormality drawn from the volume class and box overlap.
pub fn patch_abnormality(class: VolumeClass, overlaps_box: bool) -> Abnormality {
    match class {
        VolumeClass::Abnormal if overlaps_box => Abnormality::Abnormal,
        VolumeClass::Abnormal | VolumeClass::Normal => Abnormality::Normal,
        VolumeClass::Unlabeled => Abnormality::Unknown,
    }
}
