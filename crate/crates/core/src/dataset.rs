//! Demonstration data: announced planner strategies paired with the driver's
//! observed action, organized as decision trees rooted at `t = 0`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Scenario, VehicleState};
use crate::error::{Error, Result};
use crate::game::StateSets;
use crate::simplex::Strategy;

/// One observed `(announced planner strategy, driver action)` pair at `(t, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyPair {
    pub t: usize,
    pub x: VehicleState,
    #[serde(rename = "yL")]
    pub leader: Strategy,
    #[serde(rename = "uF", with = "action_index")]
    pub follower: Action,
}

impl StrategyPair {
    pub fn observation(&self) -> Observation<'_> {
        Observation { leader: self.leader.as_slice(), response: self.follower.index() }
    }

    /// One-hot encoding of the observed action.
    pub fn follower_one_hot(&self) -> Strategy {
        Strategy::one_hot(crate::env::NUM_ACTIONS, self.follower.index())
    }
}

/// Borrowed view used by the loss functions: a leader mixed strategy and the
/// index of the observed response.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub leader: &'a [f64],
    pub response: usize,
}

mod action_index {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::env::Action;

    pub fn serialize<S: Serializer>(a: &Action, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(a.index() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Action, D::Error> {
        let i = usize::deserialize(d)?;
        Action::from_index(i).ok_or_else(|| serde::de::Error::custom(format!("action index {i} out of range")))
    }
}

/// One decision tree plus the single rollout path drawn through it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    #[serde(rename = "type")]
    pub driver_type: u32,
    pub root: VehicleState,
    pub pairs: Vec<StrategyPair>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub path: Vec<VehicleState>,
}

impl Sample {
    /// Checks the record invariants against a scenario.
    pub fn validate(&self, s: &Scenario) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidDataset(msg));
        if !s.in_bounds(self.root) {
            return bad(format!("root {} outside grid", self.root));
        }
        let mut by_time: BTreeMap<usize, Vec<&StrategyPair>> = BTreeMap::new();
        for pair in &self.pairs {
            if pair.t >= s.horizon {
                return bad(format!("pair time {} beyond horizon", pair.t));
            }
            if !s.in_bounds(pair.x) {
                return bad(format!("pair state {} outside grid", pair.x));
            }
            if pair.leader.len() != crate::env::NUM_ACTIONS || !pair.leader.is_valid() {
                return bad(format!("invalid leader strategy at t={} x={}", pair.t, pair.x));
            }
            if !s.sigma.decides(pair.t) && pair.follower != Action::Keep {
                return bad(format!("driver acted at non-decision stage t={}", pair.t));
            }
            by_time.entry(pair.t).or_default().push(pair);
        }
        if self.pairs.is_empty() {
            return Ok(());
        }
        if !by_time.get(&0).is_some_and(|ps| ps.iter().any(|p| p.x == self.root)) {
            return bad(format!("no pair at the root {}", self.root));
        }
        for (&t, pairs) in by_time.range(1..) {
            let parents = by_time.get(&(t - 1)).map(Vec::as_slice).unwrap_or_default();
            for pair in pairs {
                let reachable = parents.iter().any(|p| {
                    Action::ALL
                        .iter()
                        .any(|&a| p.leader[a.index()] > 0.0 && s.transition(p.x, a, p.follower) == pair.x)
                });
                if !reachable {
                    return bad(format!("state {} at t={t} not reachable from recorded t={}", pair.x, t - 1));
                }
            }
        }
        Ok(())
    }
}

/// All samples recorded for one driver type.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub driver_type: u32,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(driver_type: u32) -> Self {
        Self { driver_type, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self, s: &Scenario) -> Result<()> {
        for sample in &self.samples {
            if sample.driver_type != self.driver_type {
                return Err(Error::InvalidDataset(format!(
                    "sample of type {} in dataset of type {}",
                    sample.driver_type, self.driver_type
                )));
            }
            sample.validate(s)?;
        }
        Ok(())
    }

    /// JSON Lines, one sample per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for sample in &self.samples {
            serde_json::to_writer(&mut w, sample)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Reads JSON Lines and validates every sample. An empty input yields an
    /// empty dataset of type `fallback_type`.
    pub fn read_jsonl<R: BufRead>(r: R, s: &Scenario, fallback_type: u32) -> Result<Self> {
        let mut samples = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: Sample = serde_json::from_str(&line)
                .map_err(|e| Error::InvalidDataset(format!("line {}: {e}", n + 1)))?;
            samples.push(sample);
        }
        let driver_type = samples.first().map_or(fallback_type, |s| s.driver_type);
        let d = Self { driver_type, samples };
        d.validate(s)?;
        Ok(d)
    }

    pub fn load(path: &Path, s: &Scenario, fallback_type: u32) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(BufReader::new(file), s, fallback_type)
    }
}

/// Seeded disjoint split of `0..len` into `n_train` and `n_test` indices.
pub fn split_indices<R: Rng + ?Sized>(len: usize, n_train: usize, n_test: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    let need = n_train + n_test;
    if need > len {
        return Err(Error::InsufficientSamples { need, have: len });
    }
    let picked = rand::seq::index::sample(rng, len, need).into_vec();
    let (train, test) = picked.split_at(n_train);
    Ok((train.to_vec(), test.to_vec()))
}

/// Pairs grouped by `(t, state index)`.
#[derive(Debug, Default)]
pub struct PairIndex<'a> {
    cells: BTreeMap<(usize, usize), Vec<&'a StrategyPair>>,
}

impl<'a> PairIndex<'a> {
    pub fn build<I>(samples: I, s: &Scenario) -> Self
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let mut cells: BTreeMap<(usize, usize), Vec<&'a StrategyPair>> = BTreeMap::new();
        for sample in samples {
            for pair in &sample.pairs {
                cells.entry((pair.t, s.encode(pair.x))).or_default().push(pair);
            }
        }
        Self { cells }
    }

    pub fn get(&self, t: usize, state: usize) -> &[&'a StrategyPair] {
        self.cells.get(&(t, state)).map(Vec::as_slice).unwrap_or_default()
    }

    pub fn observations(&self, t: usize, state: usize) -> Vec<Observation<'a>> {
        self.get(t, state).iter().map(|p| p.observation()).collect()
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cells.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// States carrying data, per time step.
    pub fn state_sets(&self, horizon: usize) -> StateSets {
        let mut sets = vec![Vec::new(); horizon];
        for &(t, i) in self.cells.keys() {
            sets[t].push(i);
        }
        StateSets::new(sets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(t: usize, x: [usize; 3], leader: Strategy, follower: Action) -> StrategyPair {
        StrategyPair { t, x: x.into(), leader, follower }
    }

    #[test]
    fn jsonl_record_shape() {
        let sample = Sample {
            driver_type: 2,
            root: [0, 1, 0].into(),
            pairs: vec![pair(0, [0, 1, 0], Strategy::one_hot(6, 1), Action::Decel)],
            path: Vec::new(),
        };
        let v = serde_json::to_value(&sample).unwrap();
        assert_eq!(v["type"], 2);
        assert_eq!(v["root"], serde_json::json!([0, 1, 0]));
        assert_eq!(v["pairs"][0]["uF"], 2);
        assert_eq!(v["pairs"][0]["yL"][1], 1.0);
    }

    #[test]
    fn loader_rejects_driver_action_at_non_decision_stage() {
        let s = Scenario::default();
        let line = r#"{"type":1,"root":[0,0,0],"pairs":[{"t":0,"x":[0,0,0],"yL":[1,0,0,0,0,0],"uF":0},{"t":1,"x":[0,0,0],"yL":[1,0,0,0,0,0],"uF":1}]}"#;
        let err = Dataset::read_jsonl(line.as_bytes(), &s, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidDataset(_)));
    }

    #[test]
    fn loader_rejects_unreachable_states() {
        let s = Scenario::default();
        let line = r#"{"type":1,"root":[0,0,0],"pairs":[{"t":0,"x":[0,0,0],"yL":[1,0,0,0,0,0],"uF":0},{"t":1,"x":[5,2,2],"yL":[1,0,0,0,0,0],"uF":0}]}"#;
        assert!(Dataset::read_jsonl(line.as_bytes(), &s, 1).is_err());
        let ok = r#"{"type":1,"root":[0,0,0],"pairs":[{"t":0,"x":[0,0,0],"yL":[0,1,0,0,0,0],"uF":1},{"t":1,"x":[2,0,2],"yL":[1,0,0,0,0,0],"uF":0}]}"#;
        let d = Dataset::read_jsonl(ok.as_bytes(), &s, 1).unwrap();
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (train, test) = split_indices(15, 10, 5, &mut rng).unwrap();
        assert_eq!((train.len(), test.len()), (10, 5));
        let mut all: Vec<_> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..15).collect::<Vec<_>>());
        let mut again = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        assert_eq!(split_indices(15, 10, 5, &mut again).unwrap(), (train, test));
        assert!(matches!(split_indices(4, 3, 2, &mut rng), Err(Error::InsufficientSamples { need: 5, have: 4 })));
    }

    #[test]
    fn empty_input_is_an_empty_dataset() {
        let d = Dataset::read_jsonl("".as_bytes(), &Scenario::default(), 4).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.driver_type, 4);
    }
}
