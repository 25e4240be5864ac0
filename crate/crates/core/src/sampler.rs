//! Training and evaluation pair generation.
//!
//! Training draws one angle per instance per epoch, weighted by the angle's
//! scale factor; an angle the instance cannot support is redrawn from the
//! applicable ones. Every item is seeded from `(seed, epoch, index)` alone,
//! so any shard of the stream can be regenerated independently.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::codec::{encode_input, encode_output, OrderPolicy};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::seed::SeedMixer;
use crate::slots::{Angle, Dataset, Instance, SlotRegistry};

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub input: String,
    pub output: String,
    pub instance_id: String,
    pub angle: Angle,
}

/// Line-delimited wire form of an [`EncodedPair`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub input: String,
    pub output: String,
    pub id: String,
    pub angle: String,
}

impl EncodedPair {
    pub fn encode(
        registry: &SlotRegistry,
        instance: &Instance,
        angle: &Angle,
        policy: OrderPolicy,
    ) -> Result<Self> {
        Ok(Self {
            input: encode_input(registry, instance, angle, policy)?,
            output: encode_output(registry, instance, angle, policy)?,
            instance_id: instance.id.clone(),
            angle: angle.clone(),
        })
    }

    pub fn to_record(&self, registry: &SlotRegistry) -> Result<PairRecord> {
        Ok(PairRecord {
            input: self.input.clone(),
            output: self.output.clone(),
            id: self.instance_id.clone(),
            angle: if self.angle.weight == 1.0 {
                self.angle.notation(registry)?
            } else {
                format!("{}:{}", self.angle.notation(registry)?, self.angle.weight)
            },
        })
    }

    pub fn from_record(registry: &SlotRegistry, record: PairRecord) -> Result<Self> {
        Ok(Self {
            angle: Angle::parse_weighted(registry, &record.angle)?,
            input: record.input,
            output: record.output,
            instance_id: record.id,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub epochs: usize,
    pub seed: u64,
    pub max_resample_attempts: usize,
    pub policy: OrderPolicy,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            seed: 0,
            max_resample_attempts: 100,
            policy: OrderPolicy::AsGiven,
        }
    }
}

impl SamplerConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.max_resample_attempts == 0 {
            return Err(Error::InvalidConfig(
                "max_resample_attempts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// True iff every source and target slot of `angle` has a value.
pub fn angle_applicable(instance: &Instance, angle: &Angle) -> bool {
    angle
        .sources
        .iter()
        .chain(&angle.targets)
        .all(|s| instance.has(s))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleRun {
    pub pairs: Vec<EncodedPair>,
    /// Instances that matched no angle; each is skipped in every epoch.
    pub skipped_instances: usize,
    /// Draws that hit an inapplicable angle and were redrawn.
    pub resampled: usize,
}

/// Samples `epochs × applicable-instances` training pairs.
pub fn sample_training_pairs(
    registry: &SlotRegistry,
    dataset: &Dataset,
    config: &SamplerConfig,
    exec: Execution,
) -> Result<SampleRun> {
    config.validate()?;
    if dataset.angles.is_empty() {
        return Err(Error::NoAngles(dataset.name.clone()));
    }
    let weights: Vec<f64> = dataset.angles.iter().map(|a| a.weight).collect();
    let all = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidConfig(format!("angle weights: {e}")))?;

    // (applicable angle indices, their weighted index) per instance
    let applicable: Vec<Option<(Vec<usize>, WeightedIndex<f64>)>> = dataset
        .instances
        .iter()
        .map(|inst| {
            let idx: Vec<usize> = (0..dataset.angles.len())
                .filter(|&a| angle_applicable(inst, &dataset.angles[a]))
                .collect();
            if idx.is_empty() {
                log::warn!(
                    "dataset `{}`: instance `{}` matches no angle, skipping",
                    dataset.name,
                    inst.id
                );
                return None;
            }
            let w: Vec<f64> = idx.iter().map(|&a| weights[a]).collect();
            let dist = WeightedIndex::new(&w).ok()?;
            Some((idx, dist))
        })
        .collect();

    let skipped_instances = applicable.iter().filter(|a| a.is_none()).count();
    if skipped_instances == dataset.instances.len() {
        return Err(Error::NoApplicableAngle(dataset.name.clone()));
    }

    let n = dataset.instances.len();
    let items = par::map_range(exec, config.epochs * n, |item| {
        let (epoch, index) = (item / n, item % n);
        let Some((idx, restricted)) = &applicable[index] else {
            return Ok(None);
        };
        let mixer = SeedMixer::new(config.seed).u64(epoch as u64).u64(index as u64);
        let mut rng = mixer.rng();
        let mut choice = all.sample(&mut rng);
        let mut redrawn = false;
        let mut attempts = 0;
        while !idx.contains(&choice) && attempts < config.max_resample_attempts {
            choice = idx[restricted.sample(&mut rng)];
            redrawn = true;
            attempts += 1;
        }
        let instance = &dataset.instances[index];
        let angle = &dataset.angles[choice];
        let policy = config.policy.derive(mixer.finish());
        EncodedPair::encode(registry, instance, angle, policy).map(|p| Some((p, redrawn)))
    });

    let mut run = SampleRun {
        skipped_instances,
        ..SampleRun::default()
    };
    for item in items {
        if let Some((pair, redrawn)) = item? {
            run.resampled += usize::from(redrawn);
            run.pairs.push(pair);
        }
    }
    Ok(run)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Enumeration {
    pub pairs: Vec<EncodedPair>,
    /// Inapplicable (instance, angle) combinations.
    pub skipped: usize,
}

/// One pair per applicable (instance, angle), instance-major.
pub fn enumerate_all_angles(
    registry: &SlotRegistry,
    dataset: &Dataset,
    policy: OrderPolicy,
) -> Result<Enumeration> {
    let mut out = Enumeration::default();
    for instance in &dataset.instances {
        for angle in &dataset.angles {
            if angle_applicable(instance, angle) {
                out.pairs
                    .push(EncodedPair::encode(registry, instance, angle, policy)?);
            } else {
                out.skipped += 1;
            }
        }
    }
    Ok(out)
}

/// Interleaves per-dataset streams one item at a time so each dataset
/// contributes equally until it runs out.
pub fn interleave_round_robin(streams: Vec<Vec<EncodedPair>>) -> Vec<EncodedPair> {
    let total = streams.iter().map(Vec::len).sum();
    let mut iters: Vec<_> = streams.into_iter().map(Vec::into_iter).collect();
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        for it in iters.iter_mut() {
            if let Some(p) = it.next() {
                out.push(p);
            }
        }
    }
    out
}

pub fn write_pairs<W: Write>(
    registry: &SlotRegistry,
    pairs: &[EncodedPair],
    mut writer: W,
) -> Result<()> {
    for pair in pairs {
        serde_json::to_writer(&mut writer, &pair.to_record(registry)?)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_pairs<R: BufRead>(registry: &SlotRegistry, reader: R) -> Result<Vec<EncodedPair>> {
    let mut pairs = Vec::new();
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: no + 1,
            message: e.to_string(),
        })?;
        pairs.push(EncodedPair::from_record(registry, record)?);
    }
    Ok(pairs)
}

/// Distinct angles in order of first appearance.
pub fn distinct_angles(pairs: &[EncodedPair]) -> Vec<Angle> {
    let mut seen = HashSet::new();
    pairs
        .iter()
        .filter(|p| seen.insert((p.angle.sources.clone(), p.angle.targets.clone())))
        .map(|p| p.angle.clone())
        .collect()
}
