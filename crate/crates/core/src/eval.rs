//! Threshold-free evaluation of membership scores.
//!
//! Scores are oriented so that higher means "more likely a member". AUC is
//! the Mann–Whitney statistic with half credit for ties, the ROC curve groups
//! tied scores into one threshold step, and TPR at a target FPR takes the best
//! empirical operating point whose FPR does not exceed the target.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::util::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need at least one member and one non-member score (got {members} / {non_members})")]
    Class { members: usize, non_members: usize },
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error("invalid argument: {0}")]
    Argument(String),
}

fn check(members: &[f64], non_members: &[f64]) -> Result<(), EvalError> {
    if members.is_empty() || non_members.is_empty() {
        return Err(EvalError::Class { members: members.len(), non_members: non_members.len() });
    }
    if let Some(&bad) = members.iter().chain(non_members).find(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite(bad));
    }
    Ok(())
}

/// P(member > non-member) + ½ P(tie), by sorting and mid-ranks.
pub fn auc(members: &[f64], non_members: &[f64]) -> Result<f64, EvalError> {
    check(members, non_members)?;
    Ok(auc_unchecked(members, non_members))
}

fn auc_unchecked(members: &[f64], non_members: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> =
        members.iter().map(|&s| (s, true)).chain(non_members.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (m, n) = (members.len() as f64, non_members.len() as f64);
    (rank_sum - m * (m + 1.0) / 2.0) / (m * n)
}

/// ROC points `(fpr, tpr)` from (0,0) to (1,1), one per distinct score
/// threshold in descending order.
pub fn roc_curve(members: &[f64], non_members: &[f64]) -> Result<Vec<(f64, f64)>, EvalError> {
    check(members, non_members)?;
    let mut all: Vec<(f64, bool)> =
        members.iter().map(|&s| (s, true)).chain(non_members.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (m, n) = (members.len() as f64, non_members.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let thr = all[i].0;
        while i < all.len() && all[i].0 == thr {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n, tp as f64 / m));
    }
    if points.last() != Some(&(1.0, 1.0)) {
        points.push((1.0, 1.0));
    }
    Ok(points)
}

/// Trapezoidal area under a piecewise-linear curve.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Highest TPR among thresholds whose empirical FPR ≤ `fpr_target`.
pub fn tpr_at_fpr(members: &[f64], non_members: &[f64], fpr_target: f64) -> Result<f64, EvalError> {
    if !(fpr_target > 0.0 && fpr_target < 1.0) {
        return Err(EvalError::Argument(format!("fpr target {fpr_target} outside (0, 1)")));
    }
    let points = roc_curve(members, non_members)?;
    Ok(points.iter().filter(|(fpr, _)| *fpr <= fpr_target).map(|p| p.1).fold(0.0, f64::max))
}

/// One-sided permutation p-value of the observed AUC under random
/// relabelling: `(1 + #{perm AUC ≥ observed}) / (1 + permutations)`.
pub fn permutation_pvalue(
    members: &[f64],
    non_members: &[f64],
    permutations: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if permutations == 0 {
        return Err(EvalError::Argument("permutations must be positive".into()));
    }
    let observed = auc(members, non_members)?;
    let mut pool: Vec<f64> = members.iter().chain(non_members).copied().collect();
    let mut r = rng(seed);
    let m = members.len();
    let mut hits = 0usize;
    for _ in 0..permutations {
        pool.shuffle(&mut r);
        if auc_unchecked(&pool[..m], &pool[m..]) >= observed - 1e-12 {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + permutations) as f64)
}

/// ROC summary of one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub attack: String,
    pub auc: f64,
    pub roc_points: Vec<(f64, f64)>,
    /// FPR target (formatted, e.g. `"0.05"`) → TPR.
    pub tpr_at: BTreeMap<String, f64>,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

impl RocResult {
    pub fn compute(attack: &str, members: &[f64], non_members: &[f64], targets: &[f64]) -> Result<Self, EvalError> {
        let auc = auc(members, non_members)?;
        let roc_points = roc_curve(members, non_members)?;
        let mut tpr_at = BTreeMap::new();
        for &t in targets {
            tpr_at.insert(format_target(t), tpr_at_fpr(members, non_members, t)?);
        }
        Ok(RocResult {
            attack: attack.to_string(),
            auc,
            roc_points,
            tpr_at,
            n_members: members.len(),
            n_nonmembers: non_members.len(),
        })
    }
}

pub fn format_target(t: f64) -> String {
    format!("{t}")
}

/// Percent with one decimal: 0.698 → "69.8".
pub fn format_percent(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

/// One scored sample as fed to [`build_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow<'a> {
    pub attack: &'a str,
    pub score: Option<f64>,
    pub label: Option<Label>,
}

/// Per-attack evaluation of a score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub results: Vec<RocResult>,
    /// Attacks that could not be evaluated, with the reason.
    pub errors: Vec<(String, String)>,
    pub fpr_targets: Vec<f64>,
}

/// Groups rows by attack (first-appearance order) and evaluates each one.
/// Rows without a score or a label are ignored; an attack lacking one class
/// is reported in `errors` without affecting the others.
pub fn build_report(rows: &[ReportRow<'_>], fpr_targets: &[f64]) -> Report {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(r.attack) {
            order.push(r.attack);
        }
        let g = groups.entry(r.attack).or_default();
        match (r.score, r.label) {
            (Some(s), Some(Label::Member)) => g.0.push(s),
            (Some(s), Some(Label::NonMember)) => g.1.push(s),
            _ => {}
        }
    }
    let mut results = Vec::new();
    let mut errors = Vec::new();
    for attack in order {
        let (m, n) = &groups[attack];
        match RocResult::compute(attack, m, n, fpr_targets) {
            Ok(r) => results.push(r),
            Err(e) => errors.push((attack.to_string(), e.to_string())),
        }
    }
    Report { results, errors, fpr_targets: fpr_targets.to_vec() }
}

impl Report {
    pub fn get(&self, attack: &str) -> Option<&RocResult> {
        self.results.iter().find(|r| r.attack == attack)
    }

    /// `attack,auc,tpr_at_<t>...,n_members,n_nonmembers` with AUC and TPR in
    /// percent to one decimal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("attack,auc");
        for t in &self.fpr_targets {
            let _ = write!(out, ",tpr_at_{}", format_target(*t));
        }
        out.push_str(",n_members,n_nonmembers\n");
        for r in &self.results {
            let _ = write!(out, "{},{}", r.attack, format_percent(r.auc));
            for t in &self.fpr_targets {
                let _ = write!(out, ",{}", format_percent(r.tpr_at[&format_target(*t)]));
            }
            let _ = writeln!(out, ",{},{}", r.n_members, r.n_nonmembers);
        }
        out
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut header = vec!["Method".to_string(), "AUC".to_string()];
        header.extend(self.fpr_targets.iter().map(|t| format!("TPR@{}%FPR", format_target(t * 100.0))));
        header.push("Members".into());
        header.push("Non-members".into());
        let mut table = vec![header];
        for r in &self.results {
            let mut row = vec![r.attack.clone(), format_percent(r.auc)];
            row.extend(self.fpr_targets.iter().map(|t| format_percent(r.tpr_at[&format_target(*t)])));
            row.push(r.n_members.to_string());
            row.push(r.n_nonmembers.to_string());
            table.push(row);
        }
        let cols = table[0].len();
        let widths: Vec<usize> = (0..cols).map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, row) in table.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
                out.push('\n');
            }
        }
        for (attack, err) in &self.errors {
            let _ = writeln!(out, "{attack}: not evaluated ({err})");
        }
        out
    }

    /// ROC points per attack, for external plotting.
    pub fn roc_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .results
            .iter()
            .map(|r| (r.attack.clone(), serde_json::json!({ "auc": r.auc, "points": r.roc_points })))
            .collect();
        serde_json::Value::Object(map)
    }
}
