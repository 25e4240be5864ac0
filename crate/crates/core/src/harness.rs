//! Evaluation over datasets and backends: per-angle score tables,
//! forced-choice candidate ranking, the explanation feedback pipeline,
//! risk-coverage curves and per-category aggregation of manual scores.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{sequence_probability, Backend, DecodeOptions};
use crate::codec::{encode_input, marker, parse_output, validate_value, OrderPolicy};
use crate::error::{Error, Result};
use crate::metrics::{normalize_answer, parse_mc_options, score_slot, MetricKind, SlotScore};
use crate::par::{self, Execution};
use crate::sampler::angle_applicable;
use crate::slots::{Angle, Dataset, Instance, SlotRegistry, ANSWER, CONTEXT, EXPLANATION, MCOPTIONS, QUESTION};

/// Which metric scores which target slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub per_slot: BTreeMap<String, MetricKind>,
    pub fallback: MetricKind,
}

impl Default for MetricConfig {
    fn default() -> Self {
        let mut per_slot = BTreeMap::new();
        per_slot.insert(ANSWER.to_string(), MetricKind::McAccuracy);
        Self {
            per_slot,
            fallback: MetricKind::RougeL,
        }
    }
}

impl MetricConfig {
    pub fn with(mut self, slot: &str, metric: MetricKind) -> Self {
        self.per_slot.insert(slot.to_string(), metric);
        self
    }

    /// MC accuracy degrades to exact match on instances without options.
    pub fn resolve(&self, slot: &str, instance: &Instance) -> MetricKind {
        match self.per_slot.get(slot).copied().unwrap_or(self.fallback) {
            MetricKind::McAccuracy if !instance.has(MCOPTIONS) => MetricKind::ExactMatch,
            m => m,
        }
    }
}

/// One (angle, target slot) cell of an evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleRow {
    pub angle: String,
    pub slot: String,
    pub metric: MetricKind,
    pub mean: f64,
    /// Evaluated instances (applicable to the angle).
    pub n: usize,
    /// Evaluated instances whose output lacked this slot.
    pub failures: usize,
    /// Instances the angle does not apply to.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AngleReport {
    /// Column order.
    pub angles: Vec<String>,
    pub rows: Vec<AngleRow>,
}

impl AngleReport {
    pub fn row(&self, angle: &str, slot: &str) -> Option<&AngleRow> {
        self.rows.iter().find(|r| r.angle == angle && r.slot == slot)
    }

    /// Aligned text table with one column per angle.
    pub fn render_table(&self, registry: &SlotRegistry) -> String {
        let mut slots: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !slots.contains(&r.slot.as_str()) {
                slots.push(&r.slot);
            }
        }
        slots.sort_by_key(|s| registry.position(s).unwrap_or(usize::MAX));
        let letter = |s: &str| registry.abbrev(s).map(String::from).unwrap_or_else(|_| s.to_string());

        let mut lines: Vec<(String, Vec<String>)> = Vec::new();
        let cell = |angle: &str, slot: &str, f: &dyn Fn(&AngleRow) -> String| {
            self.row(angle, slot).map(f).unwrap_or_else(|| "-".to_string())
        };
        for slot in &slots {
            let metric = self
                .rows
                .iter()
                .find(|r| r.slot == *slot)
                .map(|r| r.metric.name())
                .unwrap_or("");
            let cells = self
                .angles
                .iter()
                .map(|a| cell(a, slot, &|r| format!("{:.1}", r.mean * 100.0)))
                .collect();
            lines.push((format!("{} ({metric})", letter(slot)), cells));
        }
        let per_angle = |f: &dyn Fn(&AngleRow) -> String| -> Vec<String> {
            self.angles
                .iter()
                .map(|a| {
                    self.rows
                        .iter()
                        .find(|r| &r.angle == a)
                        .map(f)
                        .unwrap_or_else(|| "-".to_string())
                })
                .collect()
        };
        lines.push(("n".to_string(), per_angle(&|r| r.n.to_string())));
        lines.push(("skipped".to_string(), per_angle(&|r| r.skipped.to_string())));
        for slot in &slots {
            let cells = self
                .angles
                .iter()
                .map(|a| cell(a, slot, &|r| r.failures.to_string()))
                .collect();
            lines.push((format!("failures {}", letter(slot)), cells));
        }

        let label_w = lines.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
        let col_w: Vec<usize> = self
            .angles
            .iter()
            .enumerate()
            .map(|(i, a)| lines.iter().map(|(_, c)| c[i].len()).max().unwrap_or(0).max(a.len()))
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{:<label_w$}", "angle");
        for (a, w) in self.angles.iter().zip(&col_w) {
            let _ = write!(out, "  {a:>w$}");
        }
        out.push('\n');
        for (label, cells) in &lines {
            let _ = write!(out, "{label:<label_w$}");
            for (c, w) in cells.iter().zip(&col_w) {
                let _ = write!(out, "  {c:>w$}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_records<W: Write>(&self, mut writer: W) -> Result<()> {
        for row in &self.rows {
            serde_json::to_writer(&mut writer, row)?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
        Ok(())
    }
}

struct Job {
    angle: usize,
    instance: usize,
}

/// Generates every applicable (instance, angle) pair, parses the output
/// and scores each target slot. A missing slot scores 0 and counts as a
/// failure.
///
/// On a backend error the returned [`Error::EvalInterrupted`] carries the
/// report over all pairs that did complete.
pub fn eval_all_angles(
    registry: &SlotRegistry,
    dataset: &Dataset,
    backend: &dyn Backend,
    policy: OrderPolicy,
    metrics: &MetricConfig,
    opts: &DecodeOptions,
    exec: Execution,
) -> Result<AngleReport> {
    let mut skipped = vec![0usize; dataset.angles.len()];
    let mut jobs = Vec::new();
    for (a, angle) in dataset.angles.iter().enumerate() {
        for (i, inst) in dataset.instances.iter().enumerate() {
            if angle_applicable(inst, angle) {
                jobs.push(Job { angle: a, instance: i });
            } else {
                skipped[a] += 1;
            }
        }
    }
    jobs.sort_by(|x, y| {
        x.angle
            .cmp(&y.angle)
            .then_with(|| dataset.instances[x.instance].id.cmp(&dataset.instances[y.instance].id))
    });

    let outcomes = par::map(exec, &jobs, |job| -> Result<Vec<SlotScore>> {
        let angle = &dataset.angles[job.angle];
        let inst = &dataset.instances[job.instance];
        let input = encode_input(registry, inst, angle, policy)?;
        let generated = backend.generate(&input, opts)?;
        let parsed = parse_output(registry, &generated.output, &angle.targets);
        angle
            .targets
            .iter()
            .map(|slot| {
                score_slot(
                    metrics.resolve(slot, inst),
                    parsed.get(slot),
                    &inst.golds(slot),
                    inst.get(MCOPTIONS),
                )
            })
            .collect()
    });

    // (sum, n, failures, metric) per (angle, target position)
    type Cell = (f64, usize, usize, Option<MetricKind>);
    let mut acc: Vec<Vec<Cell>> = dataset
        .angles
        .iter()
        .map(|a| vec![(0.0, 0, 0, None); a.targets.len()])
        .collect();
    let mut first_error = None;
    for (job, outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(scores) => {
                for (cell, s) in acc[job.angle].iter_mut().zip(scores) {
                    cell.0 += s.value;
                    cell.1 += 1;
                    cell.2 += usize::from(s.failed);
                    cell.3.get_or_insert(s.metric);
                }
            }
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }

    let mut report = AngleReport::default();
    for (a, angle) in dataset.angles.iter().enumerate() {
        let notation = angle.notation(registry)?;
        report.angles.push(notation.clone());
        for (t, slot) in angle.targets.iter().enumerate() {
            let (sum, n, failures, metric) = acc[a][t];
            let metric = metric.unwrap_or_else(|| metrics.per_slot.get(slot).copied().unwrap_or(metrics.fallback));
            report.rows.push(AngleRow {
                angle: notation.clone(),
                slot: slot.clone(),
                metric,
                mean: if n == 0 { 0.0 } else { sum / n as f64 },
                n,
                failures,
                skipped: skipped[a],
            });
        }
    }
    match first_error {
        None => Ok(report),
        Some(source) => Err(Error::EvalInterrupted {
            partial: Box::new(report),
            source: Box::new(source),
        }),
    }
}

/// A forced-decoded candidate answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate: String,
    pub logprob_sum: f64,
    pub probability: f64,
}

/// The string forced through the decoder for a candidate answer.
pub fn forced_answer(candidate: &str) -> String {
    format!("{} = {}", marker(ANSWER), candidate.trim())
}

/// Input used for candidate ranking: every available slot except the
/// answer (and the options unless `include_m`), with context last.
pub fn ranking_input(
    registry: &SlotRegistry,
    instance: &Instance,
    include_m: bool,
    policy: OrderPolicy,
) -> Result<String> {
    let sources = instance
        .values()
        .keys()
        .filter(|s| s.as_str() != ANSWER && (include_m || s.as_str() != MCOPTIONS))
        .cloned();
    let angle = Angle::canonical(registry, sources, vec![ANSWER.to_string()])?;
    encode_input(registry, instance, &angle, policy)
}

/// Scores each candidate answer by the product of its forced token
/// probabilities and returns them most probable first.
pub fn rank_candidates<S: AsRef<str>>(
    registry: &SlotRegistry,
    instance: &Instance,
    candidates: &[S],
    backend: &dyn Backend,
    include_m: bool,
    policy: OrderPolicy,
) -> Result<Vec<CandidateScore>> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut seen = HashSet::new();
    for c in candidates {
        let c = c.as_ref().trim();
        validate_value(registry, c)?;
        if !seen.insert(c) {
            return Err(Error::DuplicateCandidates(c.to_string()));
        }
    }
    let input = ranking_input(registry, instance, include_m, policy)?;
    let mut scored = candidates
        .iter()
        .map(|c| {
            let c = c.as_ref().trim();
            let logprobs = backend.force_score(&input, &forced_answer(c))?;
            let (logprob_sum, probability) = sequence_probability(&logprobs);
            Ok(CandidateScore {
                candidate: c.to_string(),
                logprob_sum,
                probability,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.logprob_sum.total_cmp(&a.logprob_sum));
    Ok(scored)
}

/// Candidate ranking for one multiple-choice instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedInstance {
    pub id: String,
    pub ranking: Vec<CandidateScore>,
    /// Whether the top candidate matches the gold answer.
    pub correct: Option<bool>,
}

/// Ranks the options of every instance that carries `mcoptions`.
pub fn rank_dataset(
    registry: &SlotRegistry,
    dataset: &Dataset,
    backend: &dyn Backend,
    include_m: bool,
    policy: OrderPolicy,
    exec: Execution,
) -> Result<Vec<RankedInstance>> {
    let with_options: Vec<&Instance> = dataset.instances.iter().filter(|i| i.has(MCOPTIONS)).collect();
    par::map(exec, &with_options, |inst| {
        let options = parse_mc_options(inst.get(MCOPTIONS).unwrap_or_default())?;
        let candidates: Vec<&str> = options.iter().map(|(_, t)| t.as_str()).collect();
        let ranking = rank_candidates(registry, inst, &candidates, backend, include_m, policy)?;
        let golds = inst.golds(ANSWER);
        let correct = (!golds.is_empty()).then(|| {
            let top = normalize_answer(&ranking[0].candidate);
            golds.iter().any(|g| normalize_answer(g) == top)
        });
        Ok(RankedInstance {
            id: inst.id.clone(),
            ranking,
            correct,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum FeedbackFlag {
    /// Stage 1 produced no explanation to feed back.
    MissingExplanation,
    /// The generated explanation could not be re-encoded.
    MarkerCollision(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub id: String,
    pub direct_answer: Option<String>,
    pub explanation: Option<String>,
    pub fed_back_answer: Option<String>,
    pub flag: Option<FeedbackFlag>,
}

/// Runs `QC->AE` (or `Q->AE`), then feeds the generated explanation back
/// as input to `QEC->A` (or `QE->A`).
pub fn explanation_feedback(
    registry: &SlotRegistry,
    instance: &Instance,
    backend: &dyn Backend,
    policy: OrderPolicy,
    opts: &DecodeOptions,
) -> Result<FeedbackOutcome> {
    let with_context = |mut sources: Vec<String>| {
        if instance.has(CONTEXT) {
            sources.push(CONTEXT.to_string());
        }
        sources
    };
    let stage1 = Angle::canonical(
        registry,
        with_context(vec![QUESTION.to_string()]),
        vec![ANSWER.to_string(), EXPLANATION.to_string()],
    )?;
    let input = encode_input(registry, instance, &stage1, policy)?;
    let parsed = parse_output(registry, &backend.generate(&input, opts)?.output, &stage1.targets);
    let mut outcome = FeedbackOutcome {
        id: instance.id.clone(),
        direct_answer: parsed.get(ANSWER).map(str::to_string),
        explanation: parsed.get(EXPLANATION).map(str::to_string),
        fed_back_answer: None,
        flag: None,
    };
    let Some(explanation) = parsed.get(EXPLANATION) else {
        outcome.flag = Some(FeedbackFlag::MissingExplanation);
        return Ok(outcome);
    };
    if let Err(e) = validate_value(registry, explanation) {
        outcome.flag = Some(FeedbackFlag::MarkerCollision(e.to_string()));
        return Ok(outcome);
    }
    let fed = instance.with_value(registry, EXPLANATION, explanation)?;
    let stage2 = Angle::canonical(
        registry,
        with_context(vec![QUESTION.to_string(), EXPLANATION.to_string()]),
        vec![ANSWER.to_string()],
    )?;
    let input = encode_input(registry, &fed, &stage2, policy)?;
    let parsed = parse_output(registry, &backend.generate(&input, opts)?.output, &stage2.targets);
    outcome.fed_back_answer = parsed.get(ANSWER).map(str::to_string);
    Ok(outcome)
}

/// `(k/n, accuracy of the k most confident)` for k = 1..n. Ties in
/// confidence keep input order.
pub fn risk_coverage(items: &[(f64, bool)]) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].0.total_cmp(&items[a].0));
    let n = items.len() as f64;
    let mut correct = 0usize;
    order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            correct += usize::from(items[i].1);
            ((k + 1) as f64 / n, correct as f64 / (k + 1) as f64)
        })
        .collect()
}

/// One manually graded answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: String,
    pub model: String,
    pub score: f64,
    #[serde(default)]
    pub incoherent: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSheet {
    entries: Vec<ScoreEntry>,
}

pub const UNCATEGORIZED: &str = "uncategorized";

impl ScoreSheet {
    pub fn new(entries: Vec<ScoreEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !(0.0..=1.0).contains(&e.score) {
                return Err(Error::ScoreOutOfRange(e.score));
            }
            if !seen.insert((e.id.as_str(), e.model.as_str())) {
                return Err(Error::DuplicateId(format!("{} / {}", e.id, e.model)));
            }
        }
        Ok(Self { entries })
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: no + 1,
                message: e.to_string(),
            })?);
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    /// Distinct questions in the category.
    pub questions: usize,
    pub means: BTreeMap<String, f64>,
    pub average_of_averages: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    /// Models in order of first appearance.
    pub models: Vec<String>,
    /// Retained categories, best average-of-averages first.
    pub rows: Vec<CategoryRow>,
    pub all: CategoryRow,
    pub incoherent: BTreeMap<String, usize>,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn summarize(category: &str, entries: &[&ScoreEntry], models: &[String]) -> CategoryRow {
    let mut by_model: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut ids = HashSet::new();
    for e in entries {
        by_model.entry(&e.model).or_default().push(e.score);
        ids.insert(e.id.as_str());
    }
    let means: BTreeMap<String, f64> = models
        .iter()
        .filter_map(|m| by_model.get(m.as_str()).map(|v| (m.clone(), mean(v))))
        .collect();
    let averages: Vec<f64> = models.iter().filter_map(|m| means.get(m).copied()).collect();
    CategoryRow {
        category: category.to_string(),
        questions: ids.len(),
        average_of_averages: mean(&averages),
        means,
    }
}

/// Per-category mean score of each model, ordered by average-of-averages
/// (highest first). Categories with fewer than `min_questions` questions
/// are left out of `rows` but still count towards `all`.
pub fn aggregate_categories(sheet: &ScoreSheet, min_questions: usize) -> CategoryReport {
    let mut models: Vec<String> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&ScoreEntry>> = BTreeMap::new();
    let mut incoherent: BTreeMap<String, usize> = BTreeMap::new();
    for e in sheet.entries() {
        if !models.contains(&e.model) {
            models.push(e.model.clone());
        }
        groups
            .entry(e.category.as_deref().unwrap_or(UNCATEGORIZED))
            .or_default()
            .push(e);
        *incoherent.entry(e.model.clone()).or_default() += usize::from(e.incoherent);
    }
    let mut rows: Vec<CategoryRow> = groups
        .iter()
        .map(|(cat, entries)| summarize(cat, entries, &models))
        .filter(|r| r.questions >= min_questions)
        .collect();
    rows.sort_by(|a, b| {
        b.average_of_averages
            .total_cmp(&a.average_of_averages)
            .then_with(|| a.category.cmp(&b.category))
    });
    let everything: Vec<&ScoreEntry> = sheet.entries().iter().collect();
    let all = summarize("ALL", &everything, &models);
    CategoryReport {
        models,
        rows,
        all,
        incoherent,
    }
}

impl CategoryReport {
    pub fn render_table(&self) -> String {
        let cat_w = self
            .rows
            .iter()
            .map(|r| r.category.len())
            .chain([8])
            .max()
            .unwrap_or(8);
        let col_w: Vec<usize> = self.models.iter().map(|m| m.len().max(5)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:<cat_w$}  {:>6}", "category", "# qns");
        for (m, w) in self.models.iter().zip(&col_w) {
            let _ = write!(out, "  {m:>w$}");
        }
        out.push_str("  avg-of-avgs\n");
        let line = |out: &mut String, row: &CategoryRow| {
            let _ = write!(out, "{:<cat_w$}  {:>6}", row.category, row.questions);
            for (m, w) in self.models.iter().zip(&col_w) {
                match row.means.get(m) {
                    Some(v) => {
                        let _ = write!(out, "  {v:>w$.2}");
                    }
                    None => {
                        let _ = write!(out, "  {:>w$}", "-");
                    }
                }
            }
            let _ = writeln!(out, "  {:>11.2}", row.average_of_averages);
        };
        for row in &self.rows {
            line(&mut out, row);
        }
        line(&mut out, &self.all);
        let _ = write!(out, "{:<cat_w$}  {:>6}", "incoherent", "");
        for (m, w) in self.models.iter().zip(&col_w) {
            let _ = write!(out, "  {:>w$}", self.incoherent.get(m).copied().unwrap_or(0));
        }
        out.push('\n');
        out
    }
}

/// An ad-hoc request: slot values to condition on and slots to generate.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub instance: Instance,
    pub angle: Angle,
}

/// Everything observed while answering a [`Query`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub raw_input: String,
    pub raw_output: String,
    pub parsed: BTreeMap<String, String>,
    pub missing: Vec<String>,
}

impl Query {
    /// Slot keys may be names or abbreviations. Sources follow registry
    /// order with context last; targets keep the order given.
    pub fn new<I, K, V, T>(registry: &SlotRegistry, slots: I, targets: T) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
        T: IntoIterator,
        T::Item: AsRef<str>,
    {
        let mut values = Vec::new();
        for (k, v) in slots {
            let name = registry.resolve(k.as_ref())?.name.clone();
            validate_value(registry, v.as_ref())?;
            values.push((name, v.as_ref().to_string()));
        }
        let targets = targets
            .into_iter()
            .map(|t| registry.resolve(t.as_ref()).map(|d| d.name.clone()))
            .collect::<Result<Vec<_>>>()?;
        let instance = Instance::new(registry, "query", values)?;
        let angle = Angle::canonical(registry, instance.values().keys().cloned(), targets)?;
        Ok(Self { instance, angle })
    }

    pub fn input(&self, registry: &SlotRegistry, policy: OrderPolicy) -> Result<String> {
        encode_input(registry, &self.instance, &self.angle, policy)
    }

    pub fn run(
        &self,
        registry: &SlotRegistry,
        backend: &dyn Backend,
        policy: OrderPolicy,
        opts: &DecodeOptions,
    ) -> Result<QueryOutcome> {
        opts.validate()?;
        let raw_input = self.input(registry, policy)?;
        let raw_output = backend.generate(&raw_input, opts)?.output;
        let parsed = parse_output(registry, &raw_output, &self.angle.targets);
        Ok(QueryOutcome {
            raw_input,
            raw_output,
            parsed: parsed.values,
            missing: parsed.missing,
        })
    }
}
