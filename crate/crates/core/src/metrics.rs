//! Equal error rate, pooled EER, seed averaging and per-attack breakdowns.
//!
//! Convention: higher scores mean "more bona fide". At threshold `t`,
//! FRR(t) = P(bona < t) and FAR(t) = P(spoof >= t). Thresholds sweep the
//! sorted unique scores and `+inf`. At the first operating point `k` where
//! FRR - FAR >= 0, an exact zero gives EER = FRR_k (threshold halfway between
//! t_{k-1} and t_k); otherwise both rates are interpolated linearly between
//! points `k-1` and `k` to where they meet.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::manifest::{Label, TrialManifest};

pub const HISTOGRAM_BINS: usize = 64;
pub const OTHER_CATEGORY: &str = "other";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreEntry {
    pub trial_id: String,
    pub score: f64,
    pub label: Label,
    pub attack_tag: String,
    pub set_name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScoreSet {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Result<Self> {
        let s = Self { entries };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !e.score.is_finite() {
                return Err(Error::Metric(format!("non-finite score for {}", e.trial_id)));
            }
            if !seen.insert((e.set_name.as_str(), e.trial_id.as_str())) {
                return Err(Error::Metric(format!("duplicate trial {} in set {}", e.trial_id, e.set_name)));
            }
        }
        Ok(())
    }

    /// Builds a set by labelling `scores` from `manifest`. Ids missing from
    /// the manifest are an error.
    pub fn from_scores(scores: &[(String, f64)], manifest: &TrialManifest, set_name: &str) -> Result<Self> {
        let by_id: BTreeMap<&str, _> = manifest.records.iter().map(|r| (r.trial_id.as_str(), r)).collect();
        let entries = scores
            .iter()
            .map(|(id, score)| {
                let r = by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::Data(format!("scored trial {id} is not in the manifest")))?;
                Ok(ScoreEntry {
                    trial_id: id.clone(),
                    score: *score,
                    label: r.label,
                    attack_tag: r.attack_tag.clone(),
                    set_name: set_name.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn bona_scores(&self) -> Vec<f64> {
        self.scores_of(Label::Bonafide)
    }

    pub fn spoof_scores(&self) -> Vec<f64> {
        self.scores_of(Label::Spoof)
    }

    fn scores_of(&self, label: Label) -> Vec<f64> {
        self.entries.iter().filter(|e| e.label == label).map(|e| e.score).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    pub n_tar: usize,
    pub n_non: usize,
}

pub fn compute_eer(s: &ScoreSet) -> Result<EerResult> {
    eer_from_scores(&s.bona_scores(), &s.spoof_scores())
}

pub fn eer_from_scores(bona: &[f64], spoof: &[f64]) -> Result<EerResult> {
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::Metric(format!(
            "EER needs both classes, got {} bona fide and {} spoofed",
            bona.len(),
            spoof.len()
        )));
    }
    if bona.iter().chain(spoof).any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let mut b = bona.to_vec();
    let mut s = spoof.to_vec();
    b.sort_by(f64::total_cmp);
    s.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = b.iter().chain(&s).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let (nb, ns) = (b.len() as f64, s.len() as f64);
    let (mut ib, mut is) = (0usize, 0usize);
    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in &thresholds {
        // Sorted scans: ib = #bona < t, is = #spoof < t.
        while ib < b.len() && b[ib] < t {
            ib += 1;
        }
        while is < s.len() && s[is] < t {
            is += 1;
        }
        let frr = ib as f64 / nb;
        let far = (s.len() - is) as f64 / ns;
        let d = frr - far;
        if d >= 0.0 {
            let (pt, pfrr, pfar) = prev.expect("the lowest threshold has FRR 0 and FAR 1");
            let (eer, threshold) = if d == 0.0 {
                (frr, 0.5 * (pt + t))
            } else {
                let pd = pfrr - pfar;
                let lambda = -pd / (d - pd);
                let eer = pfrr + lambda * (frr - pfrr);
                let threshold = if t.is_finite() { pt + lambda * (t - pt) } else { pt };
                (eer, threshold)
            };
            return Ok(EerResult {
                eer,
                threshold,
                n_tar: b.len(),
                n_non: s.len(),
            });
        }
        prev = Some((t, frr, far));
    }
    unreachable!("at +inf FRR is 1 and FAR is 0")
}

/// EER of the concatenation of `sets`.
pub fn pooled_eer(sets: &[ScoreSet]) -> Result<EerResult> {
    let all = ScoreSet::new(sets.iter().flat_map(|s| s.entries.iter().cloned()).collect())?;
    compute_eer(&all)
}

pub fn mean_eer_over_seeds(runs: &[EerResult]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::Metric("no runs to average".into()));
    }
    Ok(runs.iter().map(|r| r.eer).sum::<f64>() / runs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `HISTOGRAM_BINS + 1` bin edges.
    pub edges: Vec<f64>,
    pub bona: Vec<usize>,
    pub spoof: Vec<usize>,
}

impl Histogram {
    fn over(lo: f64, hi: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Self {
            edges: (0..=HISTOGRAM_BINS)
                .map(|i| lo + (hi - lo) * i as f64 / HISTOGRAM_BINS as f64)
                .collect(),
            bona: vec![0; HISTOGRAM_BINS],
            spoof: vec![0; HISTOGRAM_BINS],
        }
    }

    fn bin(&self, v: f64) -> usize {
        let (lo, hi) = (self.edges[0], self.edges[HISTOGRAM_BINS]);
        (((v - lo) / (hi - lo) * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
    }

    fn add(&mut self, v: f64, label: Label) {
        let i = self.bin(v);
        match label {
            Label::Bonafide => self.bona[i] += 1,
            Label::Spoof => self.spoof[i] += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub eer: EerResult,
    pub histogram: Histogram,
}

/// Per-category EER of all bona fide trials against the spoofed trials of
/// that category, with score histograms over the whole set's range.
/// Attack tags missing from `grouping` fall into `other`.
pub fn group_analysis(s: &ScoreSet, grouping: &BTreeMap<String, String>) -> Result<BTreeMap<String, GroupResult>> {
    let bona = s.bona_scores();
    if bona.is_empty() {
        return Err(Error::Metric("no bona fide trials to group against".into()));
    }
    let category = |tag: &str| grouping.get(tag).cloned().unwrap_or_else(|| OTHER_CATEGORY.to_string());
    let mut spoof_by_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in s.entries.iter().filter(|e| e.label == Label::Spoof) {
        spoof_by_cat.entry(category(&e.attack_tag)).or_default().push(e.score);
    }
    for cat in grouping.values() {
        if !spoof_by_cat.contains_key(cat) {
            log::warn!("category {cat} has no spoofed trials; omitted");
        }
    }
    let (lo, hi) = s
        .entries
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e.score), hi.max(e.score)));
    let mut out = BTreeMap::new();
    for (cat, spoof) in spoof_by_cat {
        let mut histogram = Histogram::over(lo, hi);
        bona.iter().for_each(|&v| histogram.add(v, Label::Bonafide));
        spoof.iter().for_each(|&v| histogram.add(v, Label::Spoof));
        out.insert(
            cat,
            GroupResult {
                eer: eer_from_scores(&bona, &spoof)?,
                histogram,
            },
        );
    }
    Ok(out)
}

/// Attack tag to category map where every tag is its own category.
pub fn identity_grouping(s: &ScoreSet) -> BTreeMap<String, String> {
    s.entries
        .iter()
        .filter(|e| e.label == Label::Spoof)
        .map(|e| (e.attack_tag.clone(), e.attack_tag.clone()))
        .collect()
}

pub fn group_report_csv(groups: &BTreeMap<String, GroupResult>) -> String {
    let mut out = String::from("category,n_bona,n_spoof,eer,threshold\n");
    for (cat, g) in groups {
        let _ = writeln!(out, "{cat},{},{},{},{}", g.eer.n_tar, g.eer.n_non, g.eer.eer, g.eer.threshold);
    }
    out
}

pub fn histogram_csv(groups: &BTreeMap<String, GroupResult>) -> String {
    let mut out = String::from("category,bin,lo,hi,bona,spoof\n");
    for (cat, g) in groups {
        let h = &g.histogram;
        for i in 0..HISTOGRAM_BINS {
            let _ = writeln!(out, "{cat},{i},{},{},{},{}", h.edges[i], h.edges[i + 1], h.bona[i], h.spoof[i]);
        }
    }
    out
}

/// `trial_id<TAB>score` lines.
pub fn scores_to_text(scores: &[(String, f64)]) -> String {
    let mut out = String::new();
    for (id, s) in scores {
        let _ = writeln!(out, "{id}\t{s}");
    }
    out
}

pub fn parse_scores(text: &str) -> Result<Vec<(String, f64)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(no, l)| {
            let (id, v) = l
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("score line {}: expected trial_id<TAB>score", no + 1)))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("score line {}: bad score {v:?}", no + 1)))?;
            Ok((id.to_string(), v))
        })
        .collect()
}

pub fn write_scores(path: &Path, scores: &[(String, f64)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, scores_to_text(scores)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, f64)>> {
    parse_scores(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
