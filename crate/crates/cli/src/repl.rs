//! Line-oriented query loop.
//!
//! ```text
//! q: Which surface is best for rollerskating?
//! m: (A) gravel (B) sand (C) blacktop
//! -> a,e
//! e: !explanation
//! -> a
//! ```
//!
//! `slot: value` edits the draft (`!slot` copies that slot from the last
//! answer, an empty value removes the slot) and `-> targets` runs it.
//! `:next` continues a story with the last answer, `:besides` re-asks the
//! last question excluding the answers so far. Other commands: `:show`,
//! `:clear`, `:history`, `:save <file>`, `:quit`.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, IsTerminal, Write};
use std::path::Path;

use clap::Args;
use multiangle::backend::{Backend, DecodeOptions};
use multiangle::codec::OrderPolicy;
use multiangle::harness::Query;
use multiangle::slots::{SlotRegistry, ANSWER, QUESTION};
use serde::{Deserialize, Serialize};

use crate::commands::DecodeArgs;
use crate::config::Settings;
use crate::Failure;

pub const NEXT_PROMPT: &str = "What happens next?";

#[derive(Debug, Args)]
pub struct ReplArgs {
    /// Turns kept in the session history
    #[arg(long, default_value_t = 50)]
    pub history_limit: usize,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

/// One executed query, as stored in session files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub slots: BTreeMap<String, String>,
    pub targets: Vec<String>,
    pub raw_input: String,
    pub raw_output: String,
    pub parsed: BTreeMap<String, String>,
    pub missing: Vec<String>,
}

/// Appends `answer` to the story in `question` and asks for the next event.
pub fn next_question(question: &str, answer: &str) -> String {
    let q = question.trim();
    let mut story = q.strip_suffix(NEXT_PROMPT).unwrap_or(q).trim_end().to_string();
    if !story.is_empty() && !story.ends_with(['.', '!', '?']) {
        story.push('.');
    }
    let mut answer = answer.trim().to_string();
    if !answer.ends_with(['.', '!', '?']) {
        answer.push('.');
    }
    if story.is_empty() {
        format!("{answer} {NEXT_PROMPT}")
    } else {
        format!("{story} {answer} {NEXT_PROMPT}")
    }
}

/// `question` rephrased to exclude earlier answers:
/// "X, besides a?", "X, besides a and b?", "X, besides a, b, and c?".
pub fn besides_question(question: &str, excluded: &[String]) -> String {
    let stem = question.trim().trim_end_matches('?').trim_end();
    let list = match excluded {
        [] => return format!("{stem}?"),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    };
    format!("{stem}, besides {list}?")
}

#[derive(Debug, Clone)]
struct Besides {
    base: String,
    excluded: Vec<String>,
    asked: String,
}

pub struct Session<'a> {
    registry: &'a SlotRegistry,
    backend: &'a dyn Backend,
    policy: OrderPolicy,
    opts: DecodeOptions,
    limit: usize,
    pub draft: BTreeMap<String, String>,
    pub history: VecDeque<Turn>,
    besides: Option<Besides>,
}

/// What a line asks the loop to do next.
#[derive(Debug, PartialEq)]
pub enum Step {
    Continue,
    Quit,
}

impl<'a> Session<'a> {
    pub fn new(
        registry: &'a SlotRegistry,
        backend: &'a dyn Backend,
        policy: OrderPolicy,
        opts: DecodeOptions,
        limit: usize,
    ) -> Self {
        Self {
            registry,
            backend,
            policy,
            opts,
            limit: limit.max(1),
            draft: BTreeMap::new(),
            history: VecDeque::new(),
            besides: None,
        }
    }

    fn last(&self) -> Result<&Turn, Failure> {
        self.history.back().ok_or_else(|| Failure::Input("no previous turn".into()))
    }

    fn last_value(&self, slot: &str) -> Result<String, Failure> {
        let name = &self.registry.resolve(slot)?.name;
        self.last()?
            .parsed
            .get(name)
            .cloned()
            .ok_or_else(|| Failure::Input(format!("previous turn produced no {name}")))
    }

    /// Targets as names or letters: `a,e`, `answer explanation`, `AE`.
    fn targets(&self, spec: &str) -> Result<Vec<String>, Failure> {
        let mut out = Vec::new();
        for tok in spec.split([',', ' ']).map(str::trim).filter(|t| !t.is_empty()) {
            match self.registry.resolve(tok) {
                Ok(d) => out.push(d.name.clone()),
                Err(_) if tok.chars().all(|c| c.is_ascii_uppercase()) => {
                    for c in tok.chars() {
                        out.push(self.registry.resolve(&c.to_string())?.name.clone());
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(out)
    }

    fn run_turn(&mut self, targets: Vec<String>) -> Result<&Turn, Failure> {
        let query = Query::new(self.registry, &self.draft, &targets)?;
        let outcome = query.run(self.registry, self.backend, self.policy, &self.opts)?;
        if self.history.len() == self.limit {
            self.history.pop_front();
        }
        self.history.push_back(Turn {
            slots: query.instance.values().clone(),
            targets: query.angle.targets.clone(),
            raw_input: outcome.raw_input,
            raw_output: outcome.raw_output,
            parsed: outcome.parsed,
            missing: outcome.missing,
        });
        self.last()
    }

    fn last_question_and_answer(&self) -> Result<(String, String), Failure> {
        let turn = self.last()?;
        let q = turn
            .slots
            .get(QUESTION)
            .cloned()
            .ok_or_else(|| Failure::Input("previous turn had no question".into()))?;
        Ok((q, self.last_value(ANSWER)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), Failure> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.history {
            serde_json::to_writer(&mut w, t)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Handles one input line, writing results to `out`.
    pub fn handle(&mut self, line: &str, out: &mut dyn Write) -> Result<Step, Failure> {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return Ok(Step::Continue);
        }
        if let Some(spec) = line.strip_prefix("->") {
            let targets = self.targets(spec)?;
            let turn = self.run_turn(targets)?;
            writeln!(out, "input:  {}", turn.raw_input)?;
            writeln!(out, "output: {}", turn.raw_output)?;
            for (k, v) in &turn.parsed {
                writeln!(out, "{k} = {v}")?;
            }
            if !turn.missing.is_empty() {
                writeln!(out, "missing: {}", turn.missing.join(", "))?;
            }
            return Ok(Step::Continue);
        }
        if let Some(cmd) = line.strip_prefix(':') {
            let (cmd, arg) = cmd.split_once(' ').map_or((cmd, ""), |(c, a)| (c, a.trim()));
            match cmd {
                "quit" | "q" | "exit" => return Ok(Step::Quit),
                "show" => {
                    for (k, v) in &self.draft {
                        writeln!(out, "{k}: {v}")?;
                    }
                }
                "clear" => {
                    self.draft.clear();
                    self.besides = None;
                }
                "history" => {
                    for (i, t) in self.history.iter().enumerate() {
                        writeln!(out, "{}\t{}\t{}", i + 1, t.raw_input, t.raw_output)?;
                    }
                }
                "save" if !arg.is_empty() => {
                    self.save(Path::new(arg))?;
                    writeln!(out, "saved {} turns to {arg}", self.history.len())?;
                }
                "next" => {
                    let (q, a) = self.last_question_and_answer()?;
                    let next = next_question(&q, &a);
                    writeln!(out, "q: {next}")?;
                    self.draft.insert(QUESTION.to_string(), next);
                }
                "besides" => {
                    let (q, a) = self.last_question_and_answer()?;
                    let state = match self.besides.take() {
                        Some(mut b) if b.asked == q => {
                            b.excluded.push(a);
                            b
                        }
                        _ => Besides {
                            base: q,
                            excluded: vec![a],
                            asked: String::new(),
                        },
                    };
                    let asked = besides_question(&state.base, &state.excluded);
                    writeln!(out, "q: {asked}")?;
                    self.draft.insert(QUESTION.to_string(), asked.clone());
                    self.besides = Some(Besides { asked, ..state });
                }
                _ => return Err(Failure::Input(format!("unknown command `:{cmd}`"))),
            }
            return Ok(Step::Continue);
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(Failure::Input(format!("expected `slot: value`, `-> targets` or `:command`, got `{line}`")));
        };
        let name = self.registry.resolve(key)?.name.clone();
        let value = value.trim();
        if value.is_empty() {
            self.draft.remove(&name);
        } else if let Some(slot) = value.strip_prefix('!') {
            let v = self.last_value(slot)?;
            self.draft.insert(name, v);
        } else {
            self.draft.insert(name, value.to_string());
        }
        Ok(Step::Continue)
    }
}

pub fn run(args: ReplArgs, settings: &Settings) -> Result<(), Failure> {
    let loaded = settings.load_backend()?;
    let opts = args.decode.options()?;
    let mut session = Session::new(
        &settings.registry,
        loaded.backend.as_ref(),
        settings.policy(),
        opts,
        args.history_limit,
    );
    let stdin = std::io::stdin();
    let interactive = stdin.is_terminal();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut lines = stdin.lock().lines();
    loop {
        if interactive {
            eprint!("> ");
        }
        let Some(line) = lines.next() else { break };
        match session.handle(&line?, &mut out) {
            Ok(Step::Quit) => break,
            Ok(Step::Continue) => {}
            Err(e) => eprintln!("error: {e}"),
        }
        out.flush()?;
    }
    Ok(())
}
