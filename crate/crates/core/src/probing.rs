//! Factual probing: prompt-template ranking, fact reliability checks and
//! top-k accuracy over per-snapshot answer logits.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FactEntry, Group, Relation, SnapshotId};

/// Gold first-token probability must exceed this for a fact to be reliable.
pub const RELIABLE_TOP1_PROB: f64 = 0.75;
/// Runner-up probability must stay below this.
pub const RELIABLE_RUNNER_UP_PROB: f64 = 0.10;
/// Depth of stored candidate lists.
pub const CANDIDATE_DEPTH: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: String,
    pub prob: f64,
}

impl Candidate {
    pub fn new(token: impl Into<String>, prob: f64) -> Self {
        Self {
            token: token.into(),
            prob,
        }
    }
}

/// Ranked first-answer-position candidates for one fact at one snapshot.
///
/// Records without `template_id` use the relation's chosen template; tagged
/// records belong to template evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitSnapshot {
    pub snapshot: SnapshotId,
    pub fact_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
    pub candidates: Vec<Candidate>,
    pub gold_first_token_prob: f64,
    pub runner_up_prob: f64,
}

impl LogitSnapshot {
    /// Builds a record from ranked candidates, deriving the gold and runner-up
    /// probabilities. `gold_prob_outside` is used when the gold token is not
    /// among the candidates.
    pub fn from_candidates(
        snapshot: SnapshotId,
        fact_id: impl Into<String>,
        candidates: Vec<Candidate>,
        gold_token: &str,
        gold_prob_outside: f64,
    ) -> Self {
        let gold = candidates
            .iter()
            .find(|c| c.token == gold_token)
            .map_or(gold_prob_outside, |c| c.prob);
        let runner_up = candidates
            .iter()
            .find(|c| c.token != gold_token)
            .map_or(0.0, |c| c.prob);
        Self {
            snapshot,
            fact_id: fact_id.into(),
            template_id: None,
            candidates,
            gold_first_token_prob: gold,
            runner_up_prob: runner_up,
        }
    }

    pub fn with_template(mut self, template_id: impl Into<String>) -> Self {
        self.template_id = Some(template_id.into());
        self
    }

    /// 1-based rank of `token`, if listed.
    pub fn rank_of(&self, token: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c.token == token).map(|i| i + 1)
    }

    pub fn top1_is(&self, token: &str) -> bool {
        self.candidates.first().is_some_and(|c| c.token == token)
    }

    /// Broken invariants given the fact's gold first token.
    pub fn check(&self, gold_token: &str) -> Vec<String> {
        let mut out = Vec::new();
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        if self.candidates.iter().any(|c| !in_unit(c.prob)) {
            out.push("candidate probability outside [0, 1]".to_string());
        }
        if self.candidates.windows(2).any(|w| w[0].prob < w[1].prob) {
            out.push("candidates are not ranked by descending probability".to_string());
        }
        if !in_unit(self.gold_first_token_prob) || !in_unit(self.runner_up_prob) {
            out.push("gold or runner-up probability outside [0, 1]".to_string());
        }
        if let Some(c) = self.candidates.iter().find(|c| c.token == gold_token) {
            if c.prob != self.gold_first_token_prob {
                out.push(format!(
                    "gold_first_token_prob {} disagrees with listed candidate {}",
                    self.gold_first_token_prob, c.prob
                ));
            }
        }
        if let Some(c) = self.candidates.iter().find(|c| c.token != gold_token) {
            if c.prob != self.runner_up_prob {
                out.push(format!(
                    "runner_up_prob {} disagrees with best non-gold candidate {}",
                    self.runner_up_prob, c.prob
                ));
            }
        }
        out
    }
}

/// Pairs each fact with its logit record among `logits`, failing with every
/// missing fact id.
fn pair_up<'a>(
    facts: &[&'a FactEntry],
    logits: impl IntoIterator<Item = &'a LogitSnapshot>,
) -> Result<Vec<(&'a FactEntry, &'a LogitSnapshot)>> {
    let by_fact: HashMap<&str, &LogitSnapshot> = logits.into_iter().map(|l| (l.fact_id.as_str(), l)).collect();
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(facts.len());
    for &f in facts {
        match by_fact.get(f.fact_id.as_str()) {
            Some(l) => out.push((f, *l)),
            None => missing.push(f.fact_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingLogits(missing));
    }
    Ok(out)
}

fn template_logits<'a>(
    template_id: &'a str,
    logits: &'a [LogitSnapshot],
) -> impl Iterator<Item = &'a LogitSnapshot> + 'a {
    logits.iter().filter(move |l| l.template_id.as_deref() == Some(template_id))
}

/// Mean gold probability over facts whose top-1 candidate is the gold token;
/// 0 when no fact is correct.
pub fn first_token_score(template_id: &str, facts: &[&FactEntry], logits: &[LogitSnapshot]) -> Result<f64> {
    let pairs = pair_up(facts, template_logits(template_id, logits))?;
    let correct: Vec<f64> = pairs
        .iter()
        .filter(|(f, l)| l.top1_is(f.gold_first_token()))
        .map(|(_, l)| l.gold_first_token_prob)
        .collect();
    if correct.is_empty() {
        return Ok(0.0);
    }
    Ok(correct.iter().sum::<f64>() / correct.len() as f64)
}

/// Fraction of facts whose runner-up probability is below 10% (strict).
pub fn second_token_reliability(template_id: &str, facts: &[&FactEntry], logits: &[LogitSnapshot]) -> Result<f64> {
    if facts.is_empty() {
        return Err(Error::Input("second-token reliability of an empty fact list".into()));
    }
    let pairs = pair_up(facts, template_logits(template_id, logits))?;
    let valid = pairs
        .iter()
        .filter(|(_, l)| l.runner_up_prob < RELIABLE_RUNNER_UP_PROB)
        .count();
    Ok(valid as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemplateScore {
    pub template_id: String,
    pub first_token_score: f64,
    pub second_token_reliability: f64,
    pub combined: f64,
}

/// Default combiner: arithmetic mean of the two template scores.
pub fn mean_combiner(first: f64, second: f64) -> f64 {
    (first + second) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemplateSelection {
    pub best: String,
    /// Scores in ascending template-id order.
    pub scores: Vec<TemplateScore>,
    /// Templates sharing the best combined score, when more than one.
    pub tied: Vec<String>,
}

/// Ranks templates by `combiner(first_token_score, second_token_reliability)`.
/// Ties go to the lowest template id and are reported.
pub fn select_best_template(
    template_ids: &[String],
    facts: &[&FactEntry],
    logits: &[LogitSnapshot],
    combiner: &dyn Fn(f64, f64) -> f64,
) -> Result<TemplateSelection> {
    if template_ids.is_empty() {
        return Err(Error::Input("no templates to select from".into()));
    }
    let mut ids: Vec<&String> = template_ids.iter().collect();
    ids.sort();
    ids.dedup();
    let scores = ids
        .into_iter()
        .map(|id| {
            let first = first_token_score(id, facts, logits)?;
            let second = second_token_reliability(id, facts, logits)?;
            Ok(TemplateScore {
                template_id: id.clone(),
                first_token_score: first,
                second_token_reliability: second,
                combined: combiner(first, second),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best_score = scores
        .iter()
        .map(|s| s.combined)
        .fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<String> = scores
        .iter()
        .filter(|s| s.combined == best_score)
        .map(|s| s.template_id.clone())
        .collect();
    let best = tied[0].clone();
    Ok(TemplateSelection {
        best,
        scores,
        tied: if tied.len() > 1 { tied } else { Vec::new() },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    WrongTop1,
    Top1Margin,
    RunnerUp,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::WrongTop1 => "wrong-top1",
            RejectReason::Top1Margin => "top1-margin",
            RejectReason::RunnerUp => "runner-up",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FactValidity {
    Reliable,
    Rejected(RejectReason),
}

/// Reliable iff the gold token is top-1 with probability above 75% and the
/// runner-up is below 10%.
pub fn validate_fact(fact: &FactEntry, logits: &LogitSnapshot) -> FactValidity {
    if !logits.top1_is(fact.gold_first_token()) {
        FactValidity::Rejected(RejectReason::WrongTop1)
    } else if logits.gold_first_token_prob <= RELIABLE_TOP1_PROB {
        FactValidity::Rejected(RejectReason::Top1Margin)
    } else if logits.runner_up_prob >= RELIABLE_RUNNER_UP_PROB {
        FactValidity::Rejected(RejectReason::RunnerUp)
    } else {
        FactValidity::Reliable
    }
}

/// Fraction of `facts` whose gold first token is among the top `k` candidates
/// at `snapshot`, using untagged logit records.
pub fn topk_accuracy(k: usize, snapshot: SnapshotId, facts: &[&FactEntry], logits: &[LogitSnapshot]) -> Result<f64> {
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    if facts.is_empty() {
        return Err(Error::Input("top-k accuracy of an empty fact list".into()));
    }
    let pairs = pair_up(
        facts,
        logits
            .iter()
            .filter(|l| l.snapshot == snapshot && l.template_id.is_none()),
    )?;
    let mut hits = 0usize;
    for (f, l) in &pairs {
        if l.candidates.len() < k {
            return Err(Error::Input(format!(
                "fact {} at {snapshot} lists {} candidates, fewer than k = {k}",
                f.fact_id,
                l.candidates.len()
            )));
        }
        if l.rank_of(f.gold_first_token()).is_some_and(|r| r <= k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Scope of an accuracy value: all facts, one relation group or one relation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum AccuracyScope {
    All,
    Group(Group),
    Relation(String),
}

impl fmt::Display for AccuracyScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccuracyScope::All => f.write_str("all"),
            AccuracyScope::Group(g) => write!(f, "{g}"),
            AccuracyScope::Relation(r) => write!(f, "relation:{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyPoint {
    pub snapshot: SnapshotId,
    pub scope: AccuracyScope,
    pub k: usize,
    pub accuracy: f64,
}

/// Top-k accuracy per snapshot for all facts, each group and each relation.
/// Scopes without facts are skipped.
pub fn accuracy_series(
    relations: &[Relation],
    snapshots: &[SnapshotId],
    logits: &[LogitSnapshot],
    ks: &[usize],
) -> Result<Vec<AccuracyPoint>> {
    let mut scopes: BTreeMap<AccuracyScope, Vec<&FactEntry>> = BTreeMap::new();
    for r in relations {
        for f in &r.facts {
            scopes.entry(AccuracyScope::All).or_default().push(f);
            scopes.entry(AccuracyScope::Group(r.group)).or_default().push(f);
            scopes
                .entry(AccuracyScope::Relation(r.relation_id.clone()))
                .or_default()
                .push(f);
        }
    }
    let mut out = Vec::new();
    for &snapshot in snapshots {
        for (scope, facts) in &scopes {
            for &k in ks {
                out.push(AccuracyPoint {
                    snapshot,
                    scope: scope.clone(),
                    k,
                    accuracy: topk_accuracy(k, snapshot, facts, logits)?,
                });
            }
        }
    }
    Ok(out)
}
