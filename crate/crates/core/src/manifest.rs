//! Trial manifests: a TSV table binding trial ids to audio files, labels,
//! attack tags, bona fide origins and subsets.
//!
//! Columns are tab-separated:
//!
//! ```text
//! trial_id  path  label  attack_tag  source_id  subset
//! T0001  wav/T0001.wav  bonafide  -  T0001  train
//! T0001-lpc16  vocoded/T0001-lpc16.wav  spoof  lpc16  T0001  train
//! ```
//!
//! Relative paths resolve against the directory holding the manifest.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "trial_id\tpath\tlabel\tattack_tag\tsource_id\tsubset";
pub const NO_ATTACK: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn is_bonafide(self) -> bool {
        self == Label::Bonafide
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonafide" | "bona-fide" | "genuine" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Dev,
    Eval,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Train => "train",
            Subset::Dev => "dev",
            Subset::Eval => "eval",
        })
    }
}

impl FromStr for Subset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "trn" => Ok(Subset::Train),
            "dev" => Ok(Subset::Dev),
            "eval" | "test" => Ok(Subset::Eval),
            other => Err(Error::Data(format!("unknown subset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialRecord {
    pub trial_id: String,
    pub path: PathBuf,
    pub label: Label,
    pub attack_tag: String,
    pub source_id: String,
    pub subset: Subset,
}

impl TrialRecord {
    pub fn bonafide(trial_id: impl Into<String>, path: impl Into<PathBuf>, subset: Subset) -> Self {
        let trial_id = trial_id.into();
        Self {
            source_id: trial_id.clone(),
            trial_id,
            path: path.into(),
            label: Label::Bonafide,
            attack_tag: NO_ATTACK.to_string(),
            subset,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.trial_id.is_empty() || self.trial_id.contains(char::is_whitespace) {
            return Err(Error::Data(format!("bad trial id {:?}", self.trial_id)));
        }
        if self.label == Label::Spoof
            && (self.source_id == self.trial_id || self.attack_tag == NO_ATTACK)
        {
            return Err(Error::Data(format!(
                "spoofed trial {} needs a distinct source id and an attack tag",
                self.trial_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialManifest {
    pub records: Vec<TrialRecord>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

impl TrialManifest {
    pub fn new(records: Vec<TrialRecord>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            records,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.trial_id.as_str()) {
                return Err(Error::Data(format!("duplicate trial id {}", r.trial_id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, r: &TrialRecord) -> PathBuf {
        if r.path.is_absolute() {
            r.path.clone()
        } else {
            self.root.join(&r.path)
        }
    }

    pub fn get(&self, trial_id: &str) -> Option<&TrialRecord> {
        self.records.iter().find(|r| r.trial_id == trial_id)
    }

    pub fn subset(&self, subset: Subset) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter(move |r| r.subset == subset)
    }

    pub fn bonafide(&self) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter(|r| r.label.is_bonafide())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.trial_id,
                r.path.display(),
                r.label,
                r.attack_tag,
                r.source_id,
                r.subset
            ));
        }
        out
    }

    pub fn parse_tsv(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            Some((_, h)) => return Err(Error::Data(format!("unexpected manifest header {h:?}"))),
            None => return Err(Error::Data("empty manifest".into())),
        }
        let mut records = Vec::new();
        for (no, line) in lines {
            let cols: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            if cols.len() != 6 {
                return Err(Error::Data(format!(
                    "manifest line {}: expected 6 columns, got {}",
                    no + 1,
                    cols.len()
                )));
            }
            records.push(TrialRecord {
                trial_id: cols[0].to_string(),
                path: PathBuf::from(cols[1]),
                label: cols[2].parse()?,
                attack_tag: cols[3].to_string(),
                source_id: cols[4].to_string(),
                subset: cols[5].parse()?,
            });
        }
        Self::new(records, root)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse_tsv(&text, root)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the TSV serialization.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }

    /// Bona fide id -> ids of spoofed trials derived from it.
    pub fn pairing_index(&self) -> BTreeMap<String, Vec<String>> {
        let mut index: BTreeMap<String, Vec<String>> = self
            .bonafide()
            .map(|r| (r.trial_id.clone(), Vec::new()))
            .collect();
        for r in self.records.iter().filter(|r| !r.label.is_bonafide()) {
            index.entry(r.source_id.clone()).or_default().push(r.trial_id.clone());
        }
        for v in index.values_mut() {
            v.sort();
        }
        index
    }

    pub fn merged(&self, other: &TrialManifest) -> Result<TrialManifest> {
        let mut records = self.records.clone();
        for r in &other.records {
            let mut r = r.clone();
            r.path = other.resolve(&r);
            records.push(r);
        }
        let mut out = TrialManifest::new(records, self.root.clone())?;
        out.records.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrialManifest {
        TrialManifest::new(
            vec![
                TrialRecord::bonafide("A", "wav/A.wav", Subset::Train),
                TrialRecord {
                    trial_id: "A-lpc16".into(),
                    path: "voc/A-lpc16.wav".into(),
                    label: Label::Spoof,
                    attack_tag: "lpc16".into(),
                    source_id: "A".into(),
                    subset: Subset::Train,
                },
                TrialRecord::bonafide("B", "/abs/B.wav", Subset::Eval),
            ],
            "/data",
        )
        .unwrap()
    }

    #[test]
    fn tsv_roundtrip() {
        let m = sample();
        let back = TrialManifest::parse_tsv(&m.to_tsv(), "/data").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn paths_resolve_against_root() {
        let m = sample();
        assert_eq!(m.resolve(&m.records[0]), PathBuf::from("/data/wav/A.wav"));
        assert_eq!(m.resolve(&m.records[2]), PathBuf::from("/abs/B.wav"));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let r = TrialRecord::bonafide("A", "a.wav", Subset::Train);
        assert!(TrialManifest::new(vec![r.clone(), r], "").is_err());
    }

    #[test]
    fn spoof_without_source_is_rejected() {
        let mut r = TrialRecord::bonafide("A", "a.wav", Subset::Train);
        r.label = Label::Spoof;
        assert!(TrialManifest::new(vec![r], "").is_err());
    }

    #[test]
    fn bad_header_and_columns() {
        assert!(TrialManifest::parse_tsv("id\tpath\n", "").is_err());
        let text = format!("{MANIFEST_HEADER}\nA\ta.wav\tbonafide\n");
        assert!(TrialManifest::parse_tsv(&text, "").is_err());
    }

    #[test]
    fn pairing_index_groups_by_source() {
        let idx = sample().pairing_index();
        assert_eq!(idx["A"], vec!["A-lpc16".to_string()]);
        assert!(idx["B"].is_empty());
    }
}
