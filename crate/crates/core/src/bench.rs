//! Reader-study protocol: uncertainty tiers, panel aggregation, and
//! per-tier and per-rater scoring.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Hard,
    Medium,
    Easy,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Hard, Tier::Medium, Tier::Easy];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCase {
    pub case_id: String,
    pub tier: Tier,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSubset {
    /// Hard, then medium, then easy; each tier in rank order.
    pub cases: Vec<BenchmarkCase>,
    pub k: usize,
}

impl BenchmarkSubset {
    pub fn tier(&self, tier: Tier) -> Vec<&str> {
        self.cases.iter().filter(|c| c.tier == tier).map(|c| c.case_id.as_str()).collect()
    }

    pub fn tier_of(&self, case_id: &str) -> Option<Tier> {
        self.cases.iter().find(|c| c.case_id == case_id).map(|c| c.tier)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,tier,probability\n");
        for c in &self.cases {
            out += &format!("{},{},{}\n", c.case_id, serde_json::to_value(c.tier).expect("tier").as_str().unwrap_or(""), c.probability);
        }
        out
    }
}

/// Orders cases by `(|p − 0.5|, id)`: the first `k` are hard, the last `k`
/// easy, and medium is the `k`-wide window centered in what remains.
pub fn stratify_by_uncertainty(probabilities: &BTreeMap<String, f64>, k: usize) -> Result<BenchmarkSubset> {
    let n = probabilities.len();
    if k == 0 || n < 3 * k {
        return Err(Error::TooFewCases { needed: 3 * k.max(1), got: n });
    }
    let mut ranked: Vec<(&String, f64)> = probabilities.iter().map(|(id, &p)| (id, p)).collect();
    ranked.sort_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()).then_with(|| a.0.cmp(b.0)));
    let rest = n - 2 * k;
    let start = k + (rest - k) / 2;
    let pick = |range: std::ops::Range<usize>, tier: Tier| {
        ranked[range].iter().map(move |(id, p)| BenchmarkCase { case_id: (*id).clone(), tier, probability: *p })
    };
    let cases = pick(0..k, Tier::Hard).chain(pick(start..start + k, Tier::Medium)).chain(pick(n - k..n, Tier::Easy)).collect();
    Ok(BenchmarkSubset { cases, k })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRatioCheck {
    pub subset_prevalence: f64,
    pub source_prevalence: f64,
    /// Set when the two differ by more than 10 percentage points.
    pub flagged: bool,
}

pub fn class_ratio_check(subset: &BenchmarkSubset, truth: &BTreeMap<String, u8>) -> Result<ClassRatioCheck> {
    let prevalence = |ids: &mut dyn Iterator<Item = &str>| -> Result<f64> {
        let (mut n, mut ones) = (0usize, 0usize);
        for id in ids {
            let y = truth.get(id).ok_or_else(|| Error::UnknownFeature(format!("no truth for case {id}")))?;
            n += 1;
            ones += *y as usize;
        }
        Ok(if n == 0 { 0.0 } else { ones as f64 / n as f64 })
    };
    let subset_prevalence = prevalence(&mut subset.cases.iter().map(|c| c.case_id.as_str()))?;
    let source_prevalence = prevalence(&mut truth.keys().map(|s| s.as_str()))?;
    Ok(ClassRatioCheck { subset_prevalence, source_prevalence, flagged: (subset_prevalence - source_prevalence).abs() > 0.10 })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertLabel {
    pub rater: String,
    pub case_id: String,
    pub call: u8,
    pub confidence: u8,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub revision: u32,
}

pub fn check_confidence(confidence: i64) -> Result<u8> {
    if (1..=5).contains(&confidence) {
        Ok(confidence as u8)
    } else {
        Err(Error::MalformedConfidence(confidence))
    }
}

/// Latest revision per `(rater, case)`.
pub fn latest_labels<'a>(events: impl IntoIterator<Item = &'a ExpertLabel>) -> BTreeMap<(String, String), ExpertLabel> {
    let mut out: BTreeMap<(String, String), ExpertLabel> = BTreeMap::new();
    for e in events {
        let key = (e.rater.clone(), e.case_id.clone());
        if out.get(&key).is_none_or(|cur| e.revision >= cur.revision) {
            out.insert(key, e.clone());
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMethod {
    Majority,
    ConfidenceTieBreak,
    DeepTieRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelDecision {
    pub case_id: String,
    pub votes: [usize; 2],
    pub confidence: [u32; 2],
    pub decision: u8,
    pub method: DecisionMethod,
}

/// Majority call; a vote tie goes to the larger summed confidence, and a
/// tie on both goes to class 0.
pub fn panel_decide(case_id: &str, labels: &[ExpertLabel]) -> Result<PanelDecision> {
    if labels.is_empty() {
        return Err(Error::TooFewCases { needed: 1, got: 0 });
    }
    let mut votes = [0usize; 2];
    let mut confidence = [0u32; 2];
    for l in labels {
        let c = (l.call == 1) as usize;
        votes[c] += 1;
        confidence[c] += l.confidence as u32;
    }
    let (decision, method) = if votes[0] != votes[1] {
        ((votes[1] > votes[0]) as u8, DecisionMethod::Majority)
    } else if confidence[0] != confidence[1] {
        ((confidence[1] > confidence[0]) as u8, DecisionMethod::ConfidenceTieBreak)
    } else {
        (0, DecisionMethod::DeepTieRule)
    };
    Ok(PanelDecision { case_id: case_id.to_string(), votes, confidence, decision, method })
}

/// Panel decision per case using the latest label of each listed rater.
pub fn panel_calls(latest: &BTreeMap<(String, String), ExpertLabel>, raters: &[String]) -> Result<BTreeMap<String, PanelDecision>> {
    let mut by_case: BTreeMap<String, Vec<ExpertLabel>> = BTreeMap::new();
    for ((rater, case), l) in latest {
        if raters.contains(rater) {
            by_case.entry(case.clone()).or_default().push(l.clone());
        }
    }
    by_case.iter().map(|(case, ls)| Ok((case.clone(), panel_decide(case, ls)?))).collect()
}

/// Rater → case → call.
pub type RaterCalls = BTreeMap<String, BTreeMap<String, u8>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierAccuracy {
    /// Accuracy on hard, medium, easy per rater.
    pub per_rater: BTreeMap<String, [f64; 3]>,
    /// Mean over raters of each tier accuracy.
    pub pooled: [f64; 3],
}

pub fn tier_accuracy(calls: &RaterCalls, truth: &BTreeMap<String, u8>, subset: &BenchmarkSubset) -> Result<TierAccuracy> {
    let mut per_rater = BTreeMap::new();
    for (rater, rc) in calls {
        let mut acc = [0.0; 3];
        for (t, tier) in Tier::ALL.iter().enumerate() {
            let ids = subset.tier(*tier);
            let mut correct = 0;
            for id in &ids {
                let call = rc
                    .get(*id)
                    .ok_or_else(|| Error::IncompleteCoverage { rater: rater.clone(), case: id.to_string() })?;
                let y = truth.get(*id).ok_or_else(|| Error::UnknownFeature(format!("no truth for case {id}")))?;
                correct += (call == y) as usize;
            }
            acc[t] = if ids.is_empty() { 0.0 } else { correct as f64 / ids.len() as f64 };
        }
        per_rater.insert(rater.clone(), acc);
    }
    let m = per_rater.len().max(1) as f64;
    let pooled = [0, 1, 2].map(|t| per_rater.values().map(|a| a[t]).sum::<f64>() / m);
    Ok(TierAccuracy { per_rater, pooled })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaterRow {
    pub rater: String,
    pub cases: usize,
    pub report: EvalReport,
}

/// Standard metrics per rater over the cases that rater called.
pub fn rater_report(calls: &RaterCalls, truth: &BTreeMap<String, u8>) -> Result<Vec<RaterRow>> {
    calls
        .iter()
        .map(|(rater, rc)| {
            let (mut yt, mut yp) = (Vec::new(), Vec::new());
            for (case, &call) in rc {
                if let Some(&y) = truth.get(case) {
                    yt.push(y);
                    yp.push(call);
                }
            }
            if yt.is_empty() {
                return Err(Error::IncompleteCoverage { rater: rater.clone(), case: "*".into() });
            }
            Ok(RaterRow { rater: rater.clone(), cases: yt.len(), report: evaluate(&yt, &yp)? })
        })
        .collect()
}

pub fn rater_table(rows: &[RaterRow]) -> String {
    let mut out = format!("{:<12} {:>5} {:>8} {:>6} {:>6} {:>6} {:>6}\n", "rater", "n", "accuracy", "P0", "R0", "P1", "R1");
    for r in rows {
        let p = &r.report.per_class;
        out += &format!(
            "{:<12} {:>5} {:>8.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3}\n",
            r.rater, r.cases, r.report.accuracy, p[0].precision, p[0].recall, p[1].precision, p[1].recall
        );
    }
    out
}
