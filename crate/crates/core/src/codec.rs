//! Text encoding of angle input/output pairs and the inverse parser.
//!
//! ```text
//! INPUT:  $answer$ ; $explanation$ ; $question$ = Which ...? ; $mcoptions$ = (A) ...
//! OUTPUT: $answer$ = blacktop ; $explanation$ = A wheeled vehicle ...
//! ```
//!
//! Values may contain `;` but never a registered marker such as `$answer$`;
//! that restriction makes [`parse_output`] an exact inverse of
//! [`encode_output`].

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::SeedMixer;
use crate::slots::{Angle, Instance, SlotRegistry, CONTEXT};

const SEP: &str = " ; ";

/// Slot ordering applied when encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OrderPolicy {
    /// Declaration order of the angle.
    #[default]
    AsGiven,
    /// Targets and sources independently permuted by a seeded generator;
    /// the context slot, when a source, always comes last.
    Scrambled { seed: u64 },
}

impl OrderPolicy {
    /// Same mode, with the seed further mixed by `salt` (no-op for `AsGiven`).
    pub fn derive(self, salt: u64) -> Self {
        match self {
            OrderPolicy::AsGiven => OrderPolicy::AsGiven,
            OrderPolicy::Scrambled { seed } => OrderPolicy::Scrambled {
                seed: SeedMixer::new(seed).u64(salt).finish(),
            },
        }
    }
}

pub fn marker(slot: &str) -> String {
    format!("${slot}$")
}

/// Checks that `value` is non-empty and embeds no registered slot marker.
pub fn validate_value(registry: &SlotRegistry, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        return Err(Error::EmptyValue);
    }
    for name in registry.names() {
        let m = marker(name);
        if value.contains(&m) {
            return Err(Error::MarkerCollision(m));
        }
    }
    Ok(())
}

/// Target and source order for one (instance, angle) under `policy`.
fn slot_order<'a>(instance_id: &str, angle: &'a Angle, policy: OrderPolicy) -> (Vec<&'a str>, Vec<&'a str>) {
    let mut targets: Vec<&str> = angle.targets.iter().map(String::as_str).collect();
    let mut sources: Vec<&str> = angle.sources.iter().map(String::as_str).collect();
    if let OrderPolicy::Scrambled { seed } = policy {
        let mut rng = SeedMixer::new(seed)
            .str(instance_id)
            .str(&angle.sources.join(","))
            .str(&angle.targets.join(","))
            .rng();
        targets.shuffle(&mut rng);
        sources.shuffle(&mut rng);
        // stable: everything else keeps its shuffled order
        sources.sort_by_key(|s| *s == CONTEXT);
    }
    (targets, sources)
}

/// Encodes the model input: valueless target markers, then source assignments.
pub fn encode_input(
    registry: &SlotRegistry,
    instance: &Instance,
    angle: &Angle,
    policy: OrderPolicy,
) -> Result<String> {
    let (targets, sources) = slot_order(&instance.id, angle, policy);
    let mut parts = Vec::with_capacity(targets.len() + sources.len());
    for t in targets {
        parts.push(marker(t));
    }
    for s in sources {
        let value = instance.get(s).ok_or_else(|| Error::MissingSourceSlot {
            id: instance.id.clone(),
            slot: s.to_string(),
        })?;
        validate_value(registry, value)?;
        parts.push(format!("{} = {}", marker(s), value));
    }
    Ok(parts.join(SEP))
}

/// Encodes the expected model output: one assignment per target slot.
pub fn encode_output(
    registry: &SlotRegistry,
    instance: &Instance,
    angle: &Angle,
    policy: OrderPolicy,
) -> Result<String> {
    let (targets, _) = slot_order(&instance.id, angle, policy);
    let mut parts = Vec::with_capacity(targets.len());
    for t in targets {
        let value = instance.get(t).ok_or_else(|| Error::MissingTargetSlot {
            id: instance.id.clone(),
            slot: t.to_string(),
        })?;
        validate_value(registry, value)?;
        parts.push(format!("{} = {}", marker(t), value));
    }
    Ok(parts.join(SEP))
}

/// A registered marker found in a text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerSpan {
    pub slot: String,
    /// Byte offset of the opening `$`.
    pub start: usize,
    /// Byte offset just past the closing `$`, or past the `=` for assignments.
    pub end: usize,
    /// Whether the marker is followed by `=`.
    pub assigned: bool,
}

/// Finds registered markers left to right, non-overlapping.
pub fn scan_markers(registry: &SlotRegistry, text: &str) -> Vec<MarkerSpan> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'$' {
            i += 1;
            continue;
        }
        let rest = &text[i + 1..];
        let hit = registry.names().find(|name| {
            rest.starts_with(name) && rest.as_bytes().get(name.len()) == Some(&b'$')
        });
        let Some(name) = hit else {
            i += 1;
            continue;
        };
        let close = i + 1 + name.len() + 1;
        let after = &text[close..];
        let trimmed = after.trim_start();
        let (assigned, end) = if let Some(stripped) = trimmed.strip_prefix('=') {
            (true, text.len() - stripped.len())
        } else {
            (false, close)
        };
        spans.push(MarkerSpan {
            slot: name.to_string(),
            start: i,
            end,
            assigned,
        });
        i = end;
    }
    spans
}

/// Slot values recovered from a raw model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub values: BTreeMap<String, String>,
    pub missing: Vec<String>,
    pub raw: String,
}

impl ParsedOutput {
    pub fn get(&self, slot: &str) -> Option<&str> {
        self.values.get(slot).map(String::as_str)
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Recovers slot values from arbitrary model output.
///
/// Each `$name$ =` assignment owns the text up to the next assignment
/// marker (or end of text), trimmed, minus one trailing `;` separator when
/// another assignment follows. Later duplicates overwrite earlier ones.
/// `expected` slots without a non-empty value are reported as missing.
pub fn parse_output<S: AsRef<str>>(registry: &SlotRegistry, raw: &str, expected: &[S]) -> ParsedOutput {
    let assignments: Vec<MarkerSpan> = scan_markers(registry, raw)
        .into_iter()
        .filter(|m| m.assigned)
        .collect();
    let mut values = BTreeMap::new();
    for (idx, m) in assignments.iter().enumerate() {
        let next = assignments.get(idx + 1);
        let stop = next.map_or(raw.len(), |n| n.start);
        let mut value = raw[m.end..stop].trim();
        if next.is_some() {
            if let Some(v) = value.strip_suffix(';') {
                value = v.trim_end();
            }
        }
        if value.is_empty() {
            values.remove(&m.slot);
        } else {
            values.insert(m.slot.clone(), value.to_string());
        }
    }
    let missing = expected
        .iter()
        .map(AsRef::as_ref)
        .filter(|s| !values.contains_key(*s))
        .map(str::to_string)
        .collect();
    ParsedOutput {
        values,
        missing,
        raw: raw.to_string(),
    }
}

/// Splits an encoded input back into requested targets and source values.
pub fn parse_input(registry: &SlotRegistry, text: &str) -> (Vec<String>, BTreeMap<String, String>) {
    let targets = scan_markers(registry, text)
        .into_iter()
        .take_while(|m| !m.assigned)
        .map(|m| m.slot)
        .collect();
    (targets, parse_output::<&str>(registry, text, &[]).values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slots::{ANSWER, EXPLANATION};

    const QUESTION_TEXT: &str = "Which surface is best for rollerskating?";
    const OPTIONS: &str = "(A) gravel (B) sand (C) blacktop";
    const EXPLANATION_TEXT: &str = "A wheeled vehicle requires smooth surfaces.";

    fn rollerskating(reg: &SlotRegistry) -> Instance {
        Instance::new(
            reg,
            "roller",
            [
                ("question", QUESTION_TEXT),
                ("mcoptions", OPTIONS),
                ("answer", "blacktop"),
                ("explanation", EXPLANATION_TEXT),
                ("context", "Roller skating is a popular hobby these days."),
            ],
        )
        .unwrap()
    }

    #[test]
    fn validate_value_cases() {
        let reg = SlotRegistry::default();
        assert!(validate_value(&reg, "blacktop").is_ok());
        assert!(matches!(
            validate_value(&reg, "see $answer$ above"),
            Err(Error::MarkerCollision(m)) if m == "$answer$"
        ));
        assert!(validate_value(&reg, "a ; b").is_ok());
        assert!(validate_value(&reg, "costs $5 or $answer").is_ok());
        assert!(matches!(validate_value(&reg, " \t"), Err(Error::EmptyValue)));
    }

    #[test]
    fn semicolon_value_round_trips() {
        let reg = SlotRegistry::default();
        let inst = Instance::new(&reg, "x", [("answer", "a ; b")]).unwrap();
        let angle = Angle::parse(&reg, "->A").unwrap();
        let out = encode_output(&reg, &inst, &angle, OrderPolicy::AsGiven).unwrap();
        assert_eq!(out, "$answer$ = a ; b");
        assert_eq!(parse_output(&reg, &out, &[ANSWER]).get(ANSWER), Some("a ; b"));
    }

    #[test]
    fn input_fixture() {
        let reg = SlotRegistry::default();
        let angle = Angle::parse(&reg, "QM->AE").unwrap();
        let input = encode_input(&reg, &rollerskating(&reg), &angle, OrderPolicy::AsGiven).unwrap();
        assert_eq!(
            input,
            "$answer$ ; $explanation$ ; $question$ = Which surface is best for rollerskating? ; \
             $mcoptions$ = (A) gravel (B) sand (C) blacktop"
        );
    }

    #[test]
    fn output_fixtures() {
        let reg = SlotRegistry::default();
        let inst = rollerskating(&reg);
        let angle = Angle::parse(&reg, "QM->AE").unwrap();
        assert_eq!(
            encode_output(&reg, &inst, &angle, OrderPolicy::AsGiven).unwrap(),
            "$answer$ = blacktop ; $explanation$ = A wheeled vehicle requires smooth surfaces."
        );
        let single = Angle::parse(&reg, "QM->A").unwrap();
        assert_eq!(
            encode_output(&reg, &inst, &single, OrderPolicy::AsGiven).unwrap(),
            "$answer$ = blacktop"
        );
    }

    #[test]
    fn scrambled_output_seed_with_explanation_first() {
        let reg = SlotRegistry::default();
        let inst = rollerskating(&reg);
        let angle = Angle::parse(&reg, "QM->AE").unwrap();
        let policy = OrderPolicy::Scrambled { seed: 0 };
        let out = encode_output(&reg, &inst, &angle, policy).unwrap();
        assert_eq!(
            out,
            "$explanation$ = A wheeled vehicle requires smooth surfaces. ; $answer$ = blacktop"
        );
        // The input requests the targets in the same order.
        let input = encode_input(&reg, &inst, &angle, policy).unwrap();
        assert!(input.starts_with("$explanation$ ; $answer$ ; "));
    }

    #[test]
    fn scrambling_is_deterministic() {
        let reg = SlotRegistry::default();
        let inst = rollerskating(&reg);
        let angle = Angle::parse(&reg, "QMEC->A").unwrap();
        let p = OrderPolicy::Scrambled { seed: 99 };
        assert_eq!(
            encode_input(&reg, &inst, &angle, p).unwrap(),
            encode_input(&reg, &inst, &angle, p).unwrap()
        );
    }

    #[test]
    fn context_always_last_when_scrambled() {
        let reg = SlotRegistry::default();
        let inst = rollerskating(&reg);
        let angle = Angle::parse(&reg, "CQME->A").unwrap();
        let mut first_slots = std::collections::BTreeSet::new();
        for seed in 0..200 {
            let input = encode_input(&reg, &inst, &angle, OrderPolicy::Scrambled { seed }).unwrap();
            let last = input.rsplit(" ; ").next().unwrap();
            assert!(last.starts_with("$context$ = "), "{input}");
            let first_source = input.split(" ; ").nth(1).unwrap();
            first_slots.insert(first_source.split(' ').next().unwrap().to_string());
        }
        // the non-context sources do actually move around
        assert_eq!(first_slots.len(), 3);
    }

    #[test]
    fn missing_slots_are_errors() {
        let reg = SlotRegistry::default();
        let inst = Instance::new(&reg, "x", [("question", "q")]).unwrap();
        let angle = Angle::parse(&reg, "QM->A").unwrap();
        assert!(matches!(
            encode_input(&reg, &inst, &angle, OrderPolicy::AsGiven),
            Err(Error::MissingSourceSlot { slot, .. }) if slot == "mcoptions"
        ));
        let angle = Angle::parse(&reg, "Q->A").unwrap();
        assert!(matches!(
            encode_output(&reg, &inst, &angle, OrderPolicy::AsGiven),
            Err(Error::MissingTargetSlot { slot, .. }) if slot == "answer"
        ));
    }

    #[test]
    fn marker_collision_propagates() {
        let reg = SlotRegistry::default();
        let inst = Instance::new(&reg, "x", [("question", "what is $answer$?")]).unwrap();
        let angle = Angle::parse(&reg, "Q->A").unwrap();
        assert!(matches!(
            encode_input(&reg, &inst, &angle, OrderPolicy::AsGiven),
            Err(Error::MarkerCollision(_))
        ));
    }

    #[test]
    fn parse_examples() {
        let reg = SlotRegistry::default();
        let p = parse_output(
            &reg,
            "$answer$ = blacktop ; $explanation$ = A wheeled vehicle requires smooth surfaces.",
            &[ANSWER, EXPLANATION],
        );
        assert_eq!(p.get(ANSWER), Some("blacktop"));
        assert_eq!(p.get(EXPLANATION), Some(EXPLANATION_TEXT));
        assert!(p.missing.is_empty());

        let p = parse_output(&reg, "blacktop", &[ANSWER]);
        assert!(p.values.is_empty());
        assert_eq!(p.missing, vec![ANSWER.to_string()]);

        let p = parse_output(
            &reg,
            "$answer$ = first ; second ; $explanation$ = e",
            &[ANSWER, EXPLANATION],
        );
        assert_eq!(p.get(ANSWER), Some("first ; second"));
        assert_eq!(p.get(EXPLANATION), Some("e"));
    }

    #[test]
    fn parse_is_whitespace_tolerant() {
        let reg = SlotRegistry::default();
        let p = parse_output(&reg, "$answer$=blacktop;$explanation$  =\n e ", &[ANSWER, EXPLANATION]);
        assert_eq!(p.get(ANSWER), Some("blacktop"));
        assert_eq!(p.get(EXPLANATION), Some("e"));
    }

    #[test]
    fn duplicate_markers_last_wins() {
        let reg = SlotRegistry::default();
        let p = parse_output(&reg, "$answer$ = one ; $answer$ = two", &[ANSWER]);
        assert_eq!(p.get(ANSWER), Some("two"));
    }

    #[test]
    fn unregistered_markers_are_text() {
        let reg = SlotRegistry::default();
        let p = parse_output(&reg, "$answer$ = $foo$ = bar", &[ANSWER]);
        assert_eq!(p.get(ANSWER), Some("$foo$ = bar"));
    }

    #[test]
    fn empty_assignment_is_missing() {
        let reg = SlotRegistry::default();
        let p = parse_output(&reg, "$answer$ = ; $explanation$ = e", &[ANSWER, EXPLANATION]);
        assert_eq!(p.missing, vec![ANSWER.to_string()]);
    }

    #[test]
    fn trailing_semicolon_kept_on_last_value() {
        let reg = SlotRegistry::default();
        let p = parse_output(&reg, "$answer$ = first ;", &[ANSWER]);
        assert_eq!(p.get(ANSWER), Some("first ;"));
    }

    #[test]
    fn input_marker_counts() {
        let reg = SlotRegistry::default();
        let inst = rollerskating(&reg);
        let angle = Angle::parse(&reg, "QMC->AE").unwrap();
        let input = encode_input(&reg, &inst, &angle, OrderPolicy::AsGiven).unwrap();
        let spans = scan_markers(&reg, &input);
        assert_eq!(spans.iter().filter(|m| !m.assigned).count(), 2);
        assert_eq!(spans.iter().filter(|m| m.assigned).count(), 3);
        let (targets, sources) = parse_input(&reg, &input);
        assert_eq!(targets, vec!["answer", "explanation"]);
        assert_eq!(sources.get("mcoptions").map(String::as_str), Some(OPTIONS));
    }
}
