use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{copy_synthesize, log_spectral_distance, VocoderChannel};
use crate::dsp::wav::{read_wav, write_wav};
use crate::error::{Error, Result};
use crate::manifest::{Label, TrialManifest, TrialRecord};
use crate::seed::derive_seed;

/// Bona fide trials plus one copy-synthesized spoof per (trial, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTrialSet {
    pub manifest: TrialManifest,
    /// Bona fide id -> spoof ids, sorted.
    pub pairing: BTreeMap<String, Vec<String>>,
    pub channels: Vec<String>,
}

impl PairedTrialSet {
    pub fn spoofs_of(&self, bonafide_id: &str) -> &[String] {
        self.pairing.get(bonafide_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn n_bonafide(&self) -> usize {
        self.pairing.len()
    }

    pub fn n_spoof(&self) -> usize {
        self.pairing.values().map(Vec::len).sum()
    }

    /// Every spoof has exactly one bona fide origin and every origin has one
    /// spoof per channel.
    pub fn check_invariants(&self) -> Result<()> {
        for (bona, spoofs) in &self.pairing {
            if spoofs.len() != self.channels.len() {
                return Err(Error::Data(format!(
                    "{bona} has {} spoofs for {} channels",
                    spoofs.len(),
                    self.channels.len()
                )));
            }
            for s in spoofs {
                let r = self
                    .manifest
                    .get(s)
                    .ok_or_else(|| Error::Data(format!("spoof {s} missing from manifest")))?;
                if r.source_id != *bona || r.label != Label::Spoof {
                    return Err(Error::Data(format!("spoof {s} is not paired with {bona}")));
                }
            }
        }
        Ok(())
    }
}

/// Copy-synthesizes every bona fide trial of `manifest` through every channel,
/// writing `vocoded/<trial>-<channel>.wav` under `out_dir`. Stochastic
/// channels are re-seeded per trial from the channel seed and trial id.
///
/// Trials whose audio cannot be read or synthesized are logged and dropped
/// together with their spoofs; the build fails only if none succeed.
pub fn build_vocoded_set(
    manifest: &TrialManifest,
    channels: &[VocoderChannel],
    out_dir: &Path,
) -> Result<PairedTrialSet> {
    if channels.is_empty() {
        return Err(Error::Config("no vocoder channels given".into()));
    }
    for ch in channels {
        ch.validate()?;
    }
    let mut names: Vec<String> = channels.iter().map(VocoderChannel::name).collect();
    names.sort();
    names.dedup();
    if names.len() != channels.len() {
        return Err(Error::Config("duplicate vocoder channel names".into()));
    }
    let bona: Vec<&TrialRecord> = manifest.bonafide().collect();
    if bona.is_empty() {
        return Err(Error::EmptyInput("manifest has no bona fide trials".into()));
    }

    let results: Vec<Option<Vec<TrialRecord>>> = bona
        .par_iter()
        .map(|r| match synthesize_trial(manifest, r, channels, out_dir) {
            Ok(spoofs) => Some(spoofs),
            Err(e) => {
                log::error!("skipping {}: {e}", r.trial_id);
                None
            }
        })
        .collect();

    let mut records = Vec::new();
    for (r, spoofs) in bona.iter().zip(results) {
        if let Some(spoofs) = spoofs {
            let mut b = (*r).clone();
            b.path = absolute(&manifest.resolve(r));
            records.push(b);
            records.extend(spoofs);
        }
    }
    if records.is_empty() {
        return Err(Error::Data("copy-synthesis failed for every bona fide trial".into()));
    }
    records.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
    let manifest = TrialManifest::new(records, out_dir)?;
    let pairing = manifest.pairing_index();
    let set = PairedTrialSet {
        manifest,
        pairing,
        channels: channels.iter().map(VocoderChannel::name).collect(),
    };
    set.check_invariants()?;
    Ok(set)
}

fn synthesize_trial(
    manifest: &TrialManifest,
    r: &TrialRecord,
    channels: &[VocoderChannel],
    out_dir: &Path,
) -> Result<Vec<TrialRecord>> {
    let audio = read_wav(manifest.resolve(r))?;
    channels
        .iter()
        .map(|ch| {
            let ch = ch.reseeded(derive_seed(ch.seed(), &["copy-synth", &r.trial_id]));
            let y = copy_synthesize(&audio, &ch)?;
            let trial_id = format!("{}-{}", r.trial_id, ch.name());
            let rel = PathBuf::from("vocoded").join(format!("{}.wav", trial_id.replace('@', "_")));
            write_wav(out_dir.join(&rel), &y)?;
            Ok(TrialRecord {
                trial_id,
                path: rel,
                label: Label::Spoof,
                attack_tag: ch.name(),
                source_id: r.trial_id.clone(),
                subset: r.subset,
            })
        })
        .collect()
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Mean log-spectral distance (dB) between each spoof and its origin, per
/// attack tag.
pub fn pair_distances(set: &PairedTrialSet) -> Result<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (bona, spoofs) in &set.pairing {
        let b = set.manifest.get(bona).expect("pairing keys come from the manifest");
        let bw = read_wav(set.manifest.resolve(b))?;
        for s in spoofs {
            let r = set.manifest.get(s).expect("pairing values come from the manifest");
            let sw = read_wav(set.manifest.resolve(r))?;
            let e = sums.entry(r.attack_tag.clone()).or_default();
            e.0 += log_spectral_distance(&bw, &sw)?;
            e.1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}
