//! Slots, instances, angles and datasets.
//!
//! A slot is identified by its canonical lowercase name (`answer`); the
//! single-letter abbreviation (`A`) only shows up in angle notation such as
//! `QMC->AE` and in reports.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const QUESTION: &str = "question";
pub const ANSWER: &str = "answer";
pub const MCOPTIONS: &str = "mcoptions";
pub const CONTEXT: &str = "context";
pub const EXPLANATION: &str = "explanation";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDef {
    pub name: String,
    pub abbrev: char,
}

/// Ordered set of known slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRegistry {
    entries: Vec<SlotDef>,
}

impl Default for SlotRegistry {
    fn default() -> Self {
        let entries = [
            (QUESTION, 'Q'),
            (ANSWER, 'A'),
            (MCOPTIONS, 'M'),
            (CONTEXT, 'C'),
            (EXPLANATION, 'E'),
        ]
        .into_iter()
        .map(|(name, abbrev)| SlotDef {
            name: name.to_string(),
            abbrev,
        })
        .collect();
        Self { entries }
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| !c.is_whitespace() && !c.is_uppercase() && c != '$' && c != ';')
}

impl SlotRegistry {
    /// A registry with no slots at all.
    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn register(mut self, name: &str, abbrev: char) -> Result<Self> {
        if !valid_name(name) {
            return Err(Error::InvalidName(name.to_string()));
        }
        if !abbrev.is_ascii_uppercase() {
            return Err(Error::InvalidAbbrev(abbrev));
        }
        if self.by_name(name).is_some() || self.by_abbrev(abbrev).is_some() {
            return Err(Error::DuplicateSlot {
                name: name.to_string(),
                abbrev,
            });
        }
        self.entries.push(SlotDef {
            name: name.to_string(),
            abbrev,
        });
        Ok(self)
    }

    pub fn entries(&self) -> &[SlotDef] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name(name).is_some()
    }

    pub fn by_name(&self, name: &str) -> Option<&SlotDef> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn by_abbrev(&self, abbrev: char) -> Option<&SlotDef> {
        self.entries.iter().find(|e| e.abbrev == abbrev)
    }

    pub fn abbrev(&self, name: &str) -> Result<char> {
        self.by_name(name)
            .map(|e| e.abbrev)
            .ok_or_else(|| Error::UnknownSlot(name.to_string()))
    }

    /// Position of `name` in declaration order.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Resolves a slot given either its name or (case-insensitively) its letter.
    pub fn resolve(&self, key: &str) -> Result<&SlotDef> {
        let key = key.trim();
        if let Some(def) = self.by_name(&key.to_lowercase()) {
            return Ok(def);
        }
        let mut chars = key.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            if let Some(def) = self.by_abbrev(c.to_ascii_uppercase()) {
                return Ok(def);
            }
        }
        Err(Error::UnknownSlot(key.to_string()))
    }
}

/// One QA example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    values: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Gold answers used for scoring when there are several acceptable ones.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
}

impl Instance {
    /// Builds an instance, trimming every value. Empty values and
    /// unregistered slots are rejected.
    pub fn new<I, K, V>(registry: &SlotRegistry, id: impl Into<String>, values: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: AsRef<str>,
    {
        let mut map = BTreeMap::new();
        for (slot, value) in values {
            let slot = slot.into();
            if !registry.contains(&slot) {
                return Err(Error::UnknownSlot(slot));
            }
            let value = value.as_ref().trim();
            if value.is_empty() {
                return Err(Error::EmptyValue);
            }
            map.insert(slot, value.to_string());
        }
        Ok(Self {
            id: id.into(),
            values: map,
            category: None,
            source: None,
            references: Vec::new(),
        })
    }

    pub fn with_category(mut self, category: Option<String>) -> Self {
        self.category = category;
        self
    }

    pub fn with_source(mut self, source: Option<String>) -> Self {
        self.source = source;
        self
    }

    pub fn with_references(mut self, references: Vec<String>) -> Self {
        self.references = references;
        self
    }

    /// Returns a copy with `slot` set to `value`.
    pub fn with_value(&self, registry: &SlotRegistry, slot: &str, value: &str) -> Result<Self> {
        if !registry.contains(slot) {
            return Err(Error::UnknownSlot(slot.to_string()));
        }
        let value = value.trim();
        if value.is_empty() {
            return Err(Error::EmptyValue);
        }
        let mut next = self.clone();
        next.values.insert(slot.to_string(), value.to_string());
        Ok(next)
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.values.get(slot).map(String::as_str)
    }

    pub fn has(&self, slot: &str) -> bool {
        self.values.contains_key(slot)
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Gold strings for `slot`: the reference list for answers when
    /// present, else the slot value.
    pub fn golds(&self, slot: &str) -> Vec<String> {
        if slot == ANSWER && !self.references.is_empty() {
            return self.references.clone();
        }
        self.get(slot).map(|v| vec![v.to_string()]).unwrap_or_default()
    }
}

/// A transformation task: given the source slots, generate the targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Angle {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub weight: f64,
}

impl Angle {
    pub fn new(
        registry: &SlotRegistry,
        sources: Vec<String>,
        targets: Vec<String>,
        weight: f64,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::EmptyTargets);
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::InvalidWeight(weight));
        }
        let mut seen = HashSet::new();
        for slot in sources.iter().chain(&targets) {
            if !registry.contains(slot) {
                return Err(Error::UnknownSlot(slot.clone()));
            }
            if !seen.insert(slot.as_str()) {
                return Err(Error::OverlappingSlots(slot.clone()));
            }
        }
        Ok(Self {
            sources,
            targets,
            weight,
        })
    }

    /// Parses arrow notation such as `QMC->AE`.
    pub fn parse(registry: &SlotRegistry, spec: &str) -> Result<Self> {
        let (lhs, rhs) = spec
            .trim()
            .split_once("->")
            .ok_or_else(|| Error::MalformedAngle(spec.to_string()))?;
        let letters = |side: &str| -> Result<Vec<String>> {
            side.trim()
                .chars()
                .map(|c| {
                    registry
                        .by_abbrev(c)
                        .map(|e| e.name.clone())
                        .ok_or(Error::UnknownAbbrev(c))
                })
                .collect()
        };
        let sources = letters(lhs)?;
        let targets = letters(rhs)?;
        if let Some(dup) = sources.iter().find(|s| targets.contains(s)) {
            return Err(Error::OverlappingSlots(dup.clone()));
        }
        Self::new(registry, sources, targets, 1.0)
    }

    /// Parses `QM->AE` or `QM->AE:2.5` (weighted).
    pub fn parse_weighted(registry: &SlotRegistry, spec: &str) -> Result<Self> {
        match spec.rsplit_once(':') {
            Some((notation, weight)) => {
                let weight: f64 = weight
                    .trim()
                    .parse()
                    .map_err(|_| Error::MalformedAngle(spec.to_string()))?;
                Self::parse(registry, notation)?.with_weight(weight)
            }
            None => Self::parse(registry, spec),
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::InvalidWeight(weight));
        }
        self.weight = weight;
        Ok(self)
    }

    /// Arrow notation, e.g. `QMC->AE`.
    pub fn notation(&self, registry: &SlotRegistry) -> Result<String> {
        let side = |slots: &[String]| -> Result<String> {
            slots.iter().map(|s| registry.abbrev(s)).collect()
        };
        Ok(format!("{}->{}", side(&self.sources)?, side(&self.targets)?))
    }

    /// Builds an angle whose sources follow registry order with the
    /// context slot moved to the end.
    pub fn canonical(
        registry: &SlotRegistry,
        sources: impl IntoIterator<Item = String>,
        targets: Vec<String>,
    ) -> Result<Self> {
        let mut sources: Vec<String> = sources.into_iter().collect();
        for s in &sources {
            if !registry.contains(s) {
                return Err(Error::UnknownSlot(s.clone()));
            }
        }
        sources.sort_by_key(|s| {
            let pos = registry.position(s).unwrap_or(usize::MAX);
            (s == CONTEXT, pos)
        });
        sources.dedup();
        Self::new(registry, sources, targets, 1.0)
    }
}

/// A named collection of instances with its configured angle set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<Instance>,
    pub angles: Vec<Angle>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, instances: Vec<Instance>, angles: Vec<Angle>) -> Result<Self> {
        let mut seen = HashSet::new();
        for inst in &instances {
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::DuplicateId(inst.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            instances,
            angles,
        })
    }

    pub fn with_angles(mut self, angles: Vec<Angle>) -> Self {
        self.angles = angles;
        self
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Named angle sets used for training the multi-angle models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnglePreset {
    /// BoolQ, NarrativeQA, SQuAD 2.0 in the multi-angle UnifiedQA stage.
    UnifiedQaExtractive,
    /// ARC and OBQA in the multi-angle UnifiedQA stage.
    UnifiedQaArc,
    /// RACE and MCTest in the multi-angle UnifiedQA stage.
    UnifiedQaRace,
    /// ARC with explanations.
    Arc,
    /// ARC-DA with explanations.
    ArcDa,
}

impl AnglePreset {
    pub const ALL: [AnglePreset; 5] = [
        AnglePreset::UnifiedQaExtractive,
        AnglePreset::UnifiedQaArc,
        AnglePreset::UnifiedQaRace,
        AnglePreset::Arc,
        AnglePreset::ArcDa,
    ];

    pub fn specs(self) -> &'static [&'static str] {
        match self {
            AnglePreset::UnifiedQaExtractive => &["QC->A", "AC->Q"],
            AnglePreset::UnifiedQaArc => &["QMC->A", "QC->A", "QM->A", "QAC->M", "MAC->Q", "AC->QM"],
            AnglePreset::UnifiedQaRace => &["QMC->A", "QC->A", "QAC->M", "MAC->Q"],
            AnglePreset::Arc => &[
                "QMC->AE", "AQC->M", "CQME->A", "QME->A", "QE->A", "QMC->A", "QC->AE", "QM->AE",
                "QMAC->E", "QMA->E",
            ],
            AnglePreset::ArcDa => &[
                "QC->AE", "Q->AE", "QC->A", "Q->A", "CQE->A", "QE->A", "AE->Q", "AC->Q", "QA->E",
                "AQC->E",
            ],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AnglePreset::UnifiedQaExtractive => "uqa-extractive",
            AnglePreset::UnifiedQaArc => "uqa-arc",
            AnglePreset::UnifiedQaRace => "uqa-race",
            AnglePreset::Arc => "arc",
            AnglePreset::ArcDa => "arc-da",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn angles(self, registry: &SlotRegistry) -> Result<Vec<Angle>> {
        self.specs().iter().map(|s| Angle::parse(registry, s)).collect()
    }
}

impl fmt::Display for AnglePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a comma-separated list of (optionally weighted) angle specs.
pub fn parse_angle_list(registry: &SlotRegistry, list: &str) -> Result<Vec<Angle>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| Angle::parse_weighted(registry, s))
        .collect()
}
