//! Pairwise significance tests between systems' EERs with Holm-Bonferroni
//! correction over all pairs.
//!
//! The pairwise statistic is a two-sided two-proportion z-test that treats
//! each EER as an error proportion over all of that system's trials.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::metrics::EerResult;

pub const DEFAULT_ALPHA: f64 = 0.05;

pub fn pairwise_eer_test(e1: &EerResult, e2: &EerResult) -> Result<f64> {
    let n1 = (e1.n_tar + e1.n_non) as f64;
    let n2 = (e2.n_tar + e2.n_non) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Metric("EER results carry no trial counts".into()));
    }
    let c1 = (e1.eer * n1).round();
    let c2 = (e2.eer * n2).round();
    let pooled = (c1 + c2) / (n1 + n2);
    if pooled <= 0.0 || pooled >= 1.0 {
        return Ok(if e1.eer == e2.eer { 1.0 } else { 0.0 });
    }
    let z = (e1.eer - e2.eer) / (pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2)).sqrt();
    let normal = Normal::standard();
    Ok((2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0))
}

/// Step-down Holm procedure; flags are in the input order.
pub fn holm_bonferroni(p: &[f64], alpha: f64) -> Vec<bool> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut reject = vec![false; m];
    for (j, &i) in order.iter().enumerate() {
        if p[i] <= alpha / (m - j) as f64 {
            reject[i] = true;
        } else {
            break;
        }
    }
    reject
}

pub fn bonferroni(p: &[f64], alpha: f64) -> Vec<bool> {
    let m = p.len() as f64;
    p.iter().map(|&v| v <= alpha / m).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignificanceMatrix {
    pub systems: Vec<String>,
    pub p_values: Vec<Vec<f64>>,
    pub reject: Vec<Vec<bool>>,
    pub alpha: f64,
}

impl SignificanceMatrix {
    pub fn p_values_csv(&self) -> String {
        self.csv(|i, j| {
            if i == j {
                String::new()
            } else {
                self.p_values[i][j].to_string()
            }
        })
    }

    pub fn reject_csv(&self) -> String {
        self.csv(|i, j| u8::from(self.reject[i][j]).to_string())
    }

    fn csv(&self, cell: impl Fn(usize, usize) -> String) -> String {
        let mut out = String::from("system");
        for s in &self.systems {
            let _ = write!(out, ",{s}");
        }
        out.push('\n');
        for (i, s) in self.systems.iter().enumerate() {
            out.push_str(s);
            for j in 0..self.systems.len() {
                let _ = write!(out, ",{}", cell(i, j));
            }
            out.push('\n');
        }
        out
    }
}

/// All pairwise tests, Holm-Bonferroni corrected jointly over the pairs.
pub fn significance_matrix(results: &BTreeMap<String, EerResult>, alpha: f64) -> Result<SignificanceMatrix> {
    if results.len() < 2 {
        return Err(Error::Metric("significance testing needs at least two systems".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let systems: Vec<String> = results.keys().cloned().collect();
    let n = systems.len();
    let mut pairs = Vec::new();
    let mut pvals = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
            pvals.push(pairwise_eer_test(&results[&systems[i]], &results[&systems[j]])?);
        }
    }
    let flags = holm_bonferroni(&pvals, alpha);
    let mut p_values = vec![vec![1.0; n]; n];
    let mut reject = vec![vec![false; n]; n];
    for (k, &(i, j)) in pairs.iter().enumerate() {
        p_values[i][j] = pvals[k];
        p_values[j][i] = pvals[k];
        reject[i][j] = flags[k];
        reject[j][i] = flags[k];
    }
    Ok(SignificanceMatrix {
        systems,
        p_values,
        reject,
        alpha,
    })
}
