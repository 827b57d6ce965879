//! Rule-based label extraction from free text.
//!
//! Each label has a list of trigger phrases matched at word boundaries. A
//! negation cue earlier in the same clause turns a mention negative, a hedge
//! turns it uncertain. Across sentences, positive beats uncertain beats
//! negative. "No Finding" is derived: positive iff no pathology is positive.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Finding, FindingLabel, Polarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mention {
    Positive,
    Negative,
    Uncertain,
    NotMentioned,
}

impl Mention {
    fn rank(self) -> u8 {
        match self {
            Mention::Positive => 3,
            Mention::Uncertain => 2,
            Mention::Negative => 1,
            Mention::NotMentioned => 0,
        }
    }

    pub fn polarity(self) -> Option<Polarity> {
        match self {
            Mention::Positive => Some(Polarity::Present),
            Mention::Negative => Some(Polarity::Absent),
            Mention::Uncertain => Some(Polarity::Uncertain),
            Mention::NotMentioned => None,
        }
    }
}

fn triggers(label: FindingLabel) -> &'static [&'static str] {
    use FindingLabel::*;
    match label {
        Atelectasis => &["atelectasis", "atelectatic", "atelectases"],
        Cardiomegaly => &[
            "cardiomegaly",
            "enlarged heart",
            "cardiac enlargement",
            "heart is enlarged",
            "enlarged cardiac silhouette",
            "cardiac silhouette is enlarged",
        ],
        Consolidation => &["consolidation", "consolidations", "consolidative"],
        Edema => &["edema", "oedema", "pulmonary vascular congestion"],
        EnlargedCardiomediastinum => &[
            "enlarged cardiomediastinum",
            "widened mediastinum",
            "mediastinal widening",
            "mediastinum is widened",
        ],
        Fracture => &["fracture", "fractures", "fractured"],
        LungLesion => &["lung lesion", "nodule", "nodules", "mass", "masses", "pulmonary lesion"],
        LungOpacity => &["lung opacity", "opacity", "opacities", "opacification"],
        NoFinding => &[],
        PleuralEffusion => &["pleural effusion", "pleural effusions", "effusion", "effusions"],
        PleuralOther => &["pleural thickening", "pleural plaque", "pleural plaques", "fibrothorax"],
        Pneumonia => &["pneumonia"],
        Pneumothorax => &["pneumothorax", "pneumothoraces"],
        SupportDevices => &[
            "support device",
            "support devices",
            "endotracheal tube",
            "tube",
            "catheter",
            "pacemaker",
            "central line",
            "picc line",
        ],
        TrachealDeviation => &[
            "tracheal deviation",
            "trachea is deviated",
            "deviated trachea",
            "tracheal shift",
            "trachea is shifted",
            "deviation of the trachea",
        ],
        DiaphragmElevation => &[
            "diaphragm elevation",
            "diaphragmatic elevation",
            "hemidiaphragm elevation",
            "elevated hemidiaphragm",
            "elevated left hemidiaphragm",
            "elevated right hemidiaphragm",
            "hemidiaphragm is elevated",
        ],
    }
}

/// Phrases that state the finding is absent without a separate negation cue.
fn negative_phrases(label: FindingLabel) -> &'static [&'static str] {
    match label {
        FindingLabel::TrachealDeviation => &["trachea is midline", "midline trachea", "trachea remains midline"],
        FindingLabel::Cardiomegaly => &["heart size is normal", "normal heart size"],
        _ => &[],
    }
}

/// Words that name the anatomy a label is about, used only to recognize which
/// finding a question asks about.
fn topic_words(label: FindingLabel) -> &'static [&'static str] {
    match label {
        FindingLabel::TrachealDeviation => &["trachea", "tracheal"],
        FindingLabel::DiaphragmElevation => &["hemidiaphragm", "hemidiaphragms", "diaphragm", "diaphragms"],
        FindingLabel::Cardiomegaly => &["heart size", "cardiac silhouette", "cardiothoracic ratio"],
        _ => &[],
    }
}

const NEGATION_CUES: &[&str] = &[
    "no", "not", "without", "absent", "resolved", "free of", "negative for", "neither", "nor", "clear of",
];
const POST_NEGATION_CUES: &[&str] = &["is absent", "are absent", "has resolved", "have resolved", "not seen", "is not", "are not"];
const HEDGE_CUES: &[&str] = &[
    "possible",
    "possibly",
    "may",
    "might",
    "cannot be excluded",
    "can not be excluded",
    "questionable",
    "uncertain",
    "indeterminate",
    "suspected",
    "equivocal",
];
const CLAUSE_BREAKS: &[&str] = &["but", "however", "although", "though", "whereas", "while"];

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric()
}

/// Byte offsets of `needle` in `hay` at word boundaries. Both lowercase.
pub(crate) fn phrase_positions(hay: &str, needle: &str) -> Vec<usize> {
    let bytes = hay.as_bytes();
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(i) = hay[from..].find(needle) {
        let start = from + i;
        let end = start + needle.len();
        let left_ok = start == 0 || !is_word_byte(bytes[start - 1]);
        let right_ok = end == bytes.len() || !is_word_byte(bytes[end]);
        if left_ok && right_ok {
            out.push(start);
        }
        from = start + 1;
    }
    out
}

fn contains_phrase(hay: &str, needle: &str) -> bool {
    !phrase_positions(hay, needle).is_empty()
}

fn sentences(text: &str) -> impl Iterator<Item = &str> {
    text.split(['.', '?', '!', ';', '\n']).map(str::trim).filter(|s| !s.is_empty())
}

/// Start of the clause containing byte `pos`.
fn clause_start(sentence: &str, pos: usize) -> usize {
    let prefix = &sentence[..pos];
    CLAUSE_BREAKS
        .iter()
        .flat_map(|b| phrase_positions(prefix, b).into_iter().map(|p| p + b.len()))
        .max()
        .unwrap_or(0)
}

fn clause_end(sentence: &str, pos: usize) -> usize {
    let suffix = &sentence[pos..];
    CLAUSE_BREAKS
        .iter()
        .filter_map(|b| phrase_positions(suffix, b).first().map(|p| pos + p))
        .min()
        .unwrap_or(sentence.len())
}

fn classify_mention(sentence: &str, pos: usize, len: usize) -> Mention {
    let start = clause_start(sentence, pos);
    let end = clause_end(sentence, pos + len);
    let before = &sentence[start..pos];
    let after = &sentence[pos + len..end];
    if NEGATION_CUES.iter().any(|c| contains_phrase(before, c))
        || POST_NEGATION_CUES.iter().any(|c| contains_phrase(after, c))
    {
        return Mention::Negative;
    }
    if HEDGE_CUES.iter().any(|c| contains_phrase(before, c) || contains_phrase(after, c)) {
        return Mention::Uncertain;
    }
    Mention::Positive
}

fn mention_in_sentence(sentence: &str, label: FindingLabel) -> Mention {
    let mut best = Mention::NotMentioned;
    for phrase in negative_phrases(label) {
        if contains_phrase(sentence, phrase) {
            best = Mention::Negative;
        }
    }
    let display = std::iter::once(label.display_name()).filter(|_| label != FindingLabel::NoFinding);
    for phrase in triggers(label).iter().copied().chain(display) {
        for pos in phrase_positions(sentence, phrase) {
            let m = classify_mention(sentence, pos, phrase.len());
            if m.rank() > best.rank() {
                best = m;
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedLabels {
    mentions: BTreeMap<FindingLabel, Mention>,
}

impl ExtractedLabels {
    pub fn get(&self, label: FindingLabel) -> Mention {
        self.mentions.get(&label).copied().unwrap_or(Mention::NotMentioned)
    }

    pub fn is_positive(&self, label: FindingLabel) -> bool {
        self.get(label) == Mention::Positive
    }

    pub fn iter(&self) -> impl Iterator<Item = (FindingLabel, Mention)> + '_ {
        self.mentions.iter().map(|(l, m)| (*l, *m))
    }
}

/// Labels every finding in [`FindingLabel::ALL`].
pub fn extract_labels(text: &str) -> ExtractedLabels {
    let lower = text.to_lowercase();
    let mut mentions = BTreeMap::new();
    for &label in FindingLabel::ALL {
        let mut best = Mention::NotMentioned;
        for sentence in sentences(&lower) {
            let m = mention_in_sentence(sentence, label);
            if m.rank() > best.rank() {
                best = m;
            }
        }
        mentions.insert(label, best);
    }
    let any_pathology = FindingLabel::CHEXPERT
        .iter()
        .filter(|l| **l != FindingLabel::NoFinding && **l != FindingLabel::SupportDevices)
        .any(|l| mentions[l] == Mention::Positive);
    mentions.insert(
        FindingLabel::NoFinding,
        if any_pathology {
            Mention::Negative
        } else {
            Mention::Positive
        },
    );
    ExtractedLabels { mentions }
}

/// Labels named anywhere in `text`, in order of first appearance.
pub fn labels_mentioned(text: &str) -> Vec<FindingLabel> {
    let lower = text.to_lowercase();
    let mut found: Vec<(usize, usize, FindingLabel)> = Vec::new();
    for &label in FindingLabel::ALL {
        let mut first: Option<(usize, usize)> = None;
        let names = triggers(label)
            .iter()
            .chain(negative_phrases(label))
            .chain(topic_words(label))
            .copied();
        let display = std::iter::once(label.display_name());
        for phrase in names.chain(display) {
            if let Some(&pos) = phrase_positions(&lower, phrase).first() {
                // Earliest start wins; on equal starts prefer the longer phrase.
                let key = (pos, usize::MAX - phrase.len());
                if first.is_none_or(|f| key < f) {
                    first = Some(key);
                }
            }
        }
        if let Some((pos, len_key)) = first {
            found.push((pos, len_key, label));
        }
    }
    found.sort();
    found.into_iter().map(|(_, _, l)| l).collect()
}

/// One sentence stating `finding`, phrased so that [`extract_labels`] reads
/// back the same polarity.
pub fn finding_sentence(finding: &Finding) -> String {
    match finding.polarity {
        Polarity::Present => present_sentence(finding),
        Polarity::Absent => absent_sentence(finding.label),
        Polarity::Uncertain => format!("Possible {}.", finding.label.display_name()),
    }
}

pub fn absent_sentence(label: FindingLabel) -> String {
    match label {
        FindingLabel::TrachealDeviation => "The trachea is midline.".to_string(),
        FindingLabel::DiaphragmElevation => "No hemidiaphragm elevation.".to_string(),
        FindingLabel::NoFinding => "Abnormal findings are present.".to_string(),
        other => format!("No {} is seen.", other.display_name()),
    }
}

fn present_sentence(finding: &Finding) -> String {
    let attrs = &finding.attributes;
    match finding.label {
        FindingLabel::TrachealDeviation => match attrs.first() {
            Some(dir) => format!("The trachea is deviated {dir}."),
            None => "The trachea is deviated.".to_string(),
        },
        FindingLabel::DiaphragmElevation => match finding.laterality {
            crate::model::Laterality::Right => "Elevated right hemidiaphragm.".to_string(),
            _ => "Elevated left hemidiaphragm.".to_string(),
        },
        FindingLabel::NoFinding => "No acute cardiopulmonary abnormality.".to_string(),
        FindingLabel::SupportDevices => "Support devices are present.".to_string(),
        label if attrs.is_empty() => format!("{} is present.", label.capitalized()),
        label => format!("There is {} {}.", attrs.join(" "), label.display_name()),
    }
}
