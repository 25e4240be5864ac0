//! Dataset loaders and the two data-preparation steps: retrieval context
//! construction and explanation building from CENTRAL sentences.
//!
//! All files are UTF-8 with one JSON record per line.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{normalize_answer, parse_mc_options};
use crate::par::{self, Execution};
use crate::seed::SeedMixer;
use crate::slots::{Dataset, Instance, SlotRegistry, ANSWER, CONTEXT, EXPLANATION, MCOPTIONS, QUESTION};

/// Most CENTRAL sentences kept in one explanation.
pub const MAX_EXPLANATION_SENTENCES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

/// Multiple-choice record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub id: String,
    pub question: String,
    pub choices: Vec<Choice>,
    #[serde(rename = "answerKey")]
    pub answer_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

/// Direct-answer record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaRecord {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengeRecord {
    pub id: String,
    pub question: String,
    pub category: String,
}

/// Generic record carrying arbitrary registered slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub slots: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralRecord {
    pub id: String,
    pub sentences: Vec<String>,
}

fn read_records<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: no + 1,
            message: e.to_string(),
        })?;
        out.push((no + 1, rec));
    }
    Ok(out)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string()
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn finish(name: String, instances: Vec<(usize, Instance)>) -> Result<Dataset> {
    if instances.is_empty() {
        log::warn!("dataset `{name}` is empty");
    }
    let mut seen = HashSet::new();
    for (line, inst) in &instances {
        if !seen.insert(inst.id.clone()) {
            return Err(Error::Parse {
                line: *line,
                message: format!("duplicate id `{}`", inst.id),
            });
        }
    }
    Dataset::new(name, instances.into_iter().map(|(_, i)| i).collect(), Vec::new())
}

fn at_line<T>(line: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { .. } | Error::BadAnswerKey { .. } | Error::NoGoldAnswers(_) => e,
        other => Error::Parse {
            line,
            message: other.to_string(),
        },
    })
}

impl McRecord {
    pub fn to_instance(&self, registry: &SlotRegistry, source: &str) -> Result<Instance> {
        for (i, c) in self.choices.iter().enumerate() {
            let expected = char::from(b'A' + i as u8).to_string();
            if c.label != expected {
                return Err(Error::Parse {
                    line: 0,
                    message: format!(
                        "record `{}`: choice label `{}` out of order (expected `{expected}`)",
                        self.id, c.label
                    ),
                });
            }
        }
        let answer = self
            .choices
            .iter()
            .find(|c| c.label == self.answer_key)
            .ok_or_else(|| Error::BadAnswerKey {
                id: self.id.clone(),
                key: self.answer_key.clone(),
            })?;
        let texts: Vec<&str> = self.choices.iter().map(|c| c.text.as_str()).collect();
        let options = crate::metrics::render_mc_options(&texts);
        Ok(Instance::new(
            registry,
            self.id.clone(),
            [(QUESTION, self.question.as_str()), (MCOPTIONS, &options), (ANSWER, &answer.text)],
        )?
        .with_category(self.category.clone())
        .with_source(Some(source.to_string())))
    }
}

pub fn read_mc_dataset<R: BufRead>(registry: &SlotRegistry, name: &str, reader: R) -> Result<Dataset> {
    let mut instances = Vec::new();
    for (line, rec) in read_records::<McRecord, _>(reader)? {
        let inst = rec.to_instance(registry, name).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse { line, message },
            other => other,
        });
        instances.push((line, at_line(line, inst)?));
    }
    finish(name.to_string(), instances)
}

pub fn load_mc_dataset(registry: &SlotRegistry, path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    read_mc_dataset(registry, &dataset_name(path), open(path)?)
}

pub fn read_da_dataset<R: BufRead>(registry: &SlotRegistry, name: &str, reader: R) -> Result<Dataset> {
    let mut instances = Vec::new();
    for (line, rec) in read_records::<DaRecord, _>(reader)? {
        let answers: Vec<String> = rec
            .answers
            .iter()
            .map(|a| a.trim().to_string())
            .filter(|a| !a.is_empty())
            .collect();
        let Some(first) = answers.first() else {
            return Err(Error::NoGoldAnswers(rec.id));
        };
        let inst = Instance::new(registry, rec.id.clone(), [(QUESTION, rec.question.as_str()), (ANSWER, first)])
            .map(|i| {
                i.with_category(rec.category.clone())
                    .with_source(Some(name.to_string()))
                    .with_references(answers.clone())
            });
        instances.push((line, at_line(line, inst)?));
    }
    finish(name.to_string(), instances)
}

pub fn load_da_dataset(registry: &SlotRegistry, path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    read_da_dataset(registry, &dataset_name(path), open(path)?)
}

pub fn read_challenge_suite<R: BufRead>(registry: &SlotRegistry, name: &str, reader: R) -> Result<Dataset> {
    let mut instances = Vec::new();
    for (line, rec) in read_records::<ChallengeRecord, _>(reader)? {
        let inst = Instance::new(registry, rec.id.clone(), [(QUESTION, rec.question.as_str())])
            .map(|i| i.with_category(Some(rec.category.clone())).with_source(Some(name.to_string())));
        instances.push((line, at_line(line, inst)?));
    }
    finish(name.to_string(), instances)
}

pub fn load_challenge_suite(registry: &SlotRegistry, path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    read_challenge_suite(registry, &dataset_name(path), open(path)?)
}

pub fn read_instances<R: BufRead>(registry: &SlotRegistry, name: &str, reader: R) -> Result<Dataset> {
    let mut instances = Vec::new();
    for (line, rec) in read_records::<InstanceRecord, _>(reader)? {
        let inst = Instance::new(registry, rec.id.clone(), rec.slots.iter().map(|(k, v)| (k.clone(), v)))
            .map(|i| {
                i.with_category(rec.category.clone())
                    .with_source(Some(name.to_string()))
                    .with_references(rec.references.clone())
            });
        instances.push((line, at_line(line, inst)?));
    }
    finish(name.to_string(), instances)
}

pub fn load_instances(registry: &SlotRegistry, path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    read_instances(registry, &dataset_name(path), open(path)?)
}

pub fn instance_record(instance: &Instance) -> InstanceRecord {
    InstanceRecord {
        id: instance.id.clone(),
        slots: instance.values().clone(),
        category: instance.category.clone(),
        references: instance.references.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    MultipleChoice,
    DirectAnswer,
    Challenge,
    Instances,
}

impl DatasetFormat {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "mc" => Some(Self::MultipleChoice),
            "da" => Some(Self::DirectAnswer),
            "challenge" => Some(Self::Challenge),
            "instances" => Some(Self::Instances),
            _ => None,
        }
    }

    /// Guesses the format from the keys of the first record.
    pub fn detect(path: impl AsRef<Path>) -> Result<Self> {
        let reader = open(path.as_ref())?;
        for (no, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: no + 1,
                message: e.to_string(),
            })?;
            let has = |k: &str| value.get(k).is_some();
            return Ok(if has("slots") {
                Self::Instances
            } else if has("choices") {
                Self::MultipleChoice
            } else if has("answers") {
                Self::DirectAnswer
            } else {
                Self::Challenge
            });
        }
        Ok(Self::Instances)
    }
}

pub fn load_dataset(registry: &SlotRegistry, path: impl AsRef<Path>, format: Option<DatasetFormat>) -> Result<Dataset> {
    let path = path.as_ref();
    let format = match format {
        Some(f) => f,
        None => DatasetFormat::detect(path)?,
    };
    match format {
        DatasetFormat::MultipleChoice => load_mc_dataset(registry, path),
        DatasetFormat::DirectAnswer => load_da_dataset(registry, path),
        DatasetFormat::Challenge => load_challenge_suite(registry, path),
        DatasetFormat::Instances => load_instances(registry, path),
    }
}

/// Sentences available for retrieval.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SentenceCorpus {
    pub sentences: Vec<String>,
}

impl SentenceCorpus {
    pub fn new(sentences: Vec<String>) -> Self {
        Self { sentences }
    }

    /// One sentence per non-empty line.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut sentences = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let line = line.trim();
            if !line.is_empty() {
                sentences.push(line.to_string());
            }
        }
        Ok(Self { sentences })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(open(path.as_ref())?)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

fn token_set(text: &str) -> HashSet<String> {
    normalize_answer(text).split_whitespace().map(str::to_string).collect()
}

/// Overlap scorer: sum of `ln(1 + N / df(t))` over distinct query tokens
/// found in the sentence.
#[derive(Debug, Clone)]
pub struct LexicalScorer {
    sentence_tokens: Vec<HashSet<String>>,
    idf: HashMap<String, f64>,
}

impl LexicalScorer {
    pub fn new(corpus: &SentenceCorpus) -> Self {
        let sentence_tokens: Vec<HashSet<String>> = corpus.sentences.iter().map(|s| token_set(s)).collect();
        let mut df: HashMap<String, usize> = HashMap::new();
        for toks in &sentence_tokens {
            for t in toks {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
        let n = sentence_tokens.len() as f64;
        let idf = df
            .into_iter()
            .map(|(t, d)| (t, (1.0 + n / d as f64).ln()))
            .collect();
        Self { sentence_tokens, idf }
    }

    pub fn score(&self, sentence: usize, query: &HashSet<String>) -> f64 {
        let toks = &self.sentence_tokens[sentence];
        // sorted so the float sum is independent of hash order
        let mut hits: Vec<f64> = query
            .iter()
            .filter(|t| toks.contains(*t))
            .map(|t| self.idf[t])
            .collect();
        hits.sort_by(f64::total_cmp);
        hits.iter().sum()
    }

    pub fn scores(&self, query: &HashSet<String>, exec: Execution) -> Vec<f64> {
        let idx: Vec<usize> = (0..self.sentence_tokens.len()).collect();
        par::map(exec, &idx, |&i| self.score(i, query))
    }
}

/// Builds a context paragraph of `k` corpus sentences.
///
/// With options, each sentence is scored against `question + option` for
/// every option and keeps its best score; the top sentence for each option
/// is always included, the rest of the `k` slots go to the highest scores.
/// Sentences are joined in descending score order (ties in corpus order).
pub fn retrieve_context(
    question: &str,
    mcoptions: Option<&str>,
    corpus: &SentenceCorpus,
    k: usize,
    exec: Execution,
) -> Result<String> {
    let scorer = LexicalScorer::new(corpus);
    retrieve_with(&scorer, question, mcoptions, corpus, k, exec)
}

/// [`retrieve_context`] with a prebuilt scorer, for repeated queries.
pub fn retrieve_with(
    scorer: &LexicalScorer,
    question: &str,
    mcoptions: Option<&str>,
    corpus: &SentenceCorpus,
    k: usize,
    exec: Execution,
) -> Result<String> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let q = token_set(question);
    let queries: Vec<HashSet<String>> = match mcoptions {
        Some(opts) => {
            let options = parse_mc_options(opts)?;
            if k < options.len() {
                return Err(Error::KTooSmall { k, options: options.len() });
            }
            options
                .iter()
                .map(|(_, text)| q.union(&token_set(text)).cloned().collect())
                .collect()
        }
        None => vec![q],
    };
    let per_query: Vec<Vec<f64>> = queries.iter().map(|query| scorer.scores(query, exec)).collect();
    let n = corpus.len();
    let global: Vec<f64> = (0..n)
        .map(|i| per_query.iter().map(|s| s[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();

    let mut chosen = vec![false; n];
    if mcoptions.is_some() {
        for scores in &per_query {
            let mut best = 0;
            for i in 1..n {
                if scores[i] > scores[best] {
                    best = i;
                }
            }
            chosen[best] = true;
        }
    }
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| global[b].total_cmp(&global[a]).then(a.cmp(&b)));
    let mut count = chosen.iter().filter(|c| **c).count();
    for &i in &ranked {
        if count >= k.min(n) {
            break;
        }
        if !chosen[i] {
            chosen[i] = true;
            count += 1;
        }
    }
    Ok(ranked
        .into_iter()
        .filter(|&i| chosen[i])
        .map(|i| corpus.sentences[i].as_str())
        .collect::<Vec<_>>()
        .join(" "))
}

/// Returns a copy of `dataset` with a retrieved context slot on every
/// instance that has a question.
pub fn attach_context(
    registry: &SlotRegistry,
    dataset: &Dataset,
    corpus: &SentenceCorpus,
    k: usize,
    exec: Execution,
) -> Result<Dataset> {
    let scorer = LexicalScorer::new(corpus);
    let instances = dataset
        .instances
        .iter()
        .map(|inst| match inst.get(QUESTION) {
            Some(q) => {
                // inner scoring is already parallel
                let ctx = retrieve_with(&scorer, q, inst.get(MCOPTIONS), corpus, k, exec)?;
                inst.with_value(registry, CONTEXT, &ctx)
            }
            None => Ok(inst.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(dataset.name.clone(), instances, dataset.angles.clone())
}

/// Shuffles (and if needed subsamples to five) CENTRAL sentences into one
/// explanation paragraph.
pub fn build_explanation<S: AsRef<str>>(central_sentences: &[S], seed: u64) -> Result<String> {
    if central_sentences.is_empty() {
        return Err(Error::EmptyExplanation);
    }
    let mut rng = SeedMixer::new(seed).rng();
    let mut picked: Vec<&str> = central_sentences
        .choose_multiple(&mut rng, MAX_EXPLANATION_SENTENCES.min(central_sentences.len()))
        .map(|s| s.as_ref().trim())
        .collect();
    picked.shuffle(&mut rng);
    Ok(picked.join(" "))
}

pub fn read_central_sentences<R: BufRead>(reader: R) -> Result<HashMap<String, Vec<String>>> {
    Ok(read_records::<CentralRecord, _>(reader)?
        .into_iter()
        .map(|(_, r)| (r.id, r.sentences))
        .collect())
}

pub fn load_central_sentences(path: impl AsRef<Path>) -> Result<HashMap<String, Vec<String>>> {
    read_central_sentences(open(path.as_ref())?)
}

/// Adds an explanation slot to every instance with CENTRAL sentences. The
/// per-instance seed mixes `seed` with the instance id.
pub fn attach_explanations(
    registry: &SlotRegistry,
    dataset: &Dataset,
    central: &HashMap<String, Vec<String>>,
    seed: u64,
) -> Result<Dataset> {
    let instances = dataset
        .instances
        .iter()
        .map(|inst| match central.get(&inst.id).filter(|s| !s.is_empty()) {
            Some(sentences) => {
                let text = build_explanation(sentences, SeedMixer::new(seed).str(&inst.id).finish())?;
                inst.with_value(registry, EXPLANATION, &text)
            }
            None => Ok(inst.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(dataset.name.clone(), instances, dataset.angles.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mc_select;

    fn reg() -> SlotRegistry {
        SlotRegistry::default()
    }

    const MC_LINE: &str = r#"{"id":"roller","question":"Which surface is best for rollerskating?","choices":[{"label":"A","text":"gravel"},{"label":"B","text":"sand"},{"label":"C","text":"blacktop"}],"answerKey":"C","category":"science"}"#;

    #[test]
    fn mc_record_rendering() {
        let ds = read_mc_dataset(&reg(), "arc", MC_LINE.as_bytes()).unwrap();
        let inst = &ds.instances[0];
        assert_eq!(inst.get(MCOPTIONS), Some("(A) gravel (B) sand (C) blacktop"));
        assert_eq!(inst.get(ANSWER), Some("blacktop"));
        assert_eq!(inst.category.as_deref(), Some("science"));
        assert_eq!(mc_select(inst.get(ANSWER).unwrap(), inst.get(MCOPTIONS).unwrap()).unwrap(), 'C');
    }

    #[test]
    fn mc_bad_key_and_labels() {
        let bad = MC_LINE.replace(r#""answerKey":"C""#, r#""answerKey":"D""#);
        assert!(matches!(read_mc_dataset(&reg(), "arc", bad.as_bytes()), Err(Error::BadAnswerKey { .. })));
        let bad = MC_LINE.replace(r#""label":"B""#, r#""label":"X""#);
        assert!(matches!(read_mc_dataset(&reg(), "arc", bad.as_bytes()), Err(Error::Parse { line: 1, .. })));
        let text = format!("{MC_LINE}\n{{not json\n");
        assert!(matches!(read_mc_dataset(&reg(), "arc", text.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = read_mc_dataset(&reg(), "arc", "".as_bytes()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn da_records() {
        let line = r#"{"id":"d1","question":"What gas do producers produce that consumers need to survive?","answers":["oxygen"]}"#;
        let ds = read_da_dataset(&reg(), "arc-da", line.as_bytes()).unwrap();
        assert_eq!(ds.instances[0].get(ANSWER), Some("oxygen"));

        let line = r#"{"id":"d2","question":"q","answers":["a","b","c"]}"#;
        let ds = read_da_dataset(&reg(), "arc-da", line.as_bytes()).unwrap();
        assert_eq!(ds.instances[0].golds(ANSWER).len(), 3);

        let line = r#"{"id":"d3","question":"q","answers":[]}"#;
        assert!(matches!(read_da_dataset(&reg(), "arc-da", line.as_bytes()), Err(Error::NoGoldAnswers(_))));
    }

    #[test]
    fn challenge_suite() {
        let text = "{\"id\":\"1\",\"question\":\"q1\",\"category\":\"riddle\"}\n{\"id\":\"2\",\"question\":\"q2\",\"category\":\"math\"}\n";
        let ds = read_challenge_suite(&reg(), "c300", text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.instances[0].category.as_deref(), Some("riddle"));
        assert!(!ds.instances[0].has(ANSWER));

        let dup = "{\"id\":\"1\",\"question\":\"q1\",\"category\":\"riddle\"}\n{\"id\":\"1\",\"question\":\"q2\",\"category\":\"math\"}\n";
        assert!(matches!(read_challenge_suite(&reg(), "c300", dup.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn instance_records() {
        let line = r#"{"id":"x","slots":{"question":"q","explanation":"e"},"references":["a1","a2"]}"#;
        let ds = read_instances(&reg(), "toy", line.as_bytes()).unwrap();
        assert_eq!(ds.instances[0].get(EXPLANATION), Some("e"));
        assert_eq!(instance_record(&ds.instances[0]).references.len(), 2);
        let bad = r#"{"id":"x","slots":{"hint":"q"}}"#;
        assert!(matches!(read_instances(&reg(), "toy", bad.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    fn corpus(lines: &[&str]) -> SentenceCorpus {
        SentenceCorpus::new(lines.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn plain_top_one() {
        let c = corpus(&[
            "Plants need sunlight.",
            "Producers make oxygen that animals breathe.",
            "Rocks are hard.",
        ]);
        let ctx = retrieve_context("What gas do producers make?", None, &c, 1, Execution::Sequential).unwrap();
        assert_eq!(ctx, "Producers make oxygen that animals breathe.");
    }

    #[test]
    fn whole_corpus_in_score_order() {
        let c = corpus(&["zebra", "skating on smooth blacktop", "skating"]);
        let ctx = retrieve_context("skating blacktop", None, &c, 3, Execution::Parallel).unwrap();
        assert_eq!(ctx, "skating on smooth blacktop skating zebra");
    }

    #[test]
    fn option_best_sentences_are_forced_in() {
        // N = 12. Gravel sentences score 3·ln(1+12/9) + ln(1+12/10) ≈ 3.33
        // for option A but only ≈ 2.48 for B and C, below the lone "sand" /
        // "blacktop" sentences (ln 13 ≈ 2.56). Globally the nine gravel
        // sentences fill the top 3, so B and C must be forced in.
        let mut lines: Vec<String> = (0..9)
            .map(|i| format!("best rollerskating surface gravel path number{i}"))
            .collect();
        lines.push("sand".into());
        lines.push("blacktop".into());
        lines.push("surface".into());
        let c = SentenceCorpus::new(lines);
        let plain = retrieve_context("best rollerskating surface gravel", None, &c, 3, Execution::Sequential).unwrap();
        assert!(!plain.contains("sand") && !plain.contains("blacktop"));
        let ctx = retrieve_context(
            "best rollerskating surface",
            Some("(A) gravel (B) sand (C) blacktop"),
            &c,
            3,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(ctx, "best rollerskating surface gravel path number0 sand blacktop");
    }

    #[test]
    fn retrieval_errors() {
        assert!(matches!(
            retrieve_context("q", None, &SentenceCorpus::default(), 3, Execution::Sequential),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            retrieve_context("q", Some("(A) x (B) y (C) z"), &corpus(&["a"]), 2, Execution::Sequential),
            Err(Error::KTooSmall { k: 2, options: 3 })
        ));
    }

    #[test]
    fn explanation_building() {
        let six: Vec<String> = (0..6).map(|i| format!("Fact {i} holds.")).collect();
        let e = build_explanation(&six, 3).unwrap();
        assert_eq!(e.matches("holds.").count(), 5);
        assert_eq!(e, build_explanation(&six, 3).unwrap());
        assert_eq!(build_explanation(&["Only one."], 9).unwrap(), "Only one.");
        assert!(matches!(build_explanation::<&str>(&[], 0), Err(Error::EmptyExplanation)));
    }

    #[test]
    fn explanation_invents_no_words() {
        let sents = ["Gravity pulls objects down.", "Mass attracts mass.", "Objects fall."];
        for seed in 0..20 {
            let e = build_explanation(&sents, seed).unwrap();
            let mut pool: Vec<&str> = sents.iter().flat_map(|s| s.split_whitespace()).collect();
            for w in e.split_whitespace() {
                let pos = pool.iter().position(|p| *p == w).expect("word from input");
                pool.swap_remove(pos);
            }
        }
    }

    #[test]
    fn attaching_slots() {
        let reg = reg();
        let ds = read_mc_dataset(&reg, "arc", MC_LINE.as_bytes()).unwrap();
        let c = corpus(&["Skaters prefer blacktop.", "Sand is soft.", "Gravel is bumpy.", "Unrelated."]);
        let with_ctx = attach_context(&reg, &ds, &c, 3, Execution::Sequential).unwrap();
        let ctx = with_ctx.instances[0].get(CONTEXT).unwrap();
        for s in ["blacktop", "Sand", "Gravel"] {
            assert!(ctx.contains(s), "{ctx}");
        }
        let mut central = HashMap::new();
        central.insert("roller".to_string(), vec!["A wheeled vehicle requires smooth surfaces.".to_string()]);
        let with_e = attach_explanations(&reg, &with_ctx, &central, 1).unwrap();
        assert_eq!(with_e.instances[0].get(EXPLANATION), Some("A wheeled vehicle requires smooth surfaces."));
        // the source dataset is untouched
        assert!(!ds.instances[0].has(CONTEXT));
    }
}
