//! Tabular utilities: one leader-by-follower reward matrix per state.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2};
use serde_json::{Map, Value};

use crate::env::{Scenario, NUM_ACTIONS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityTable {
    data: Array3<f64>,
}

impl UtilityTable {
    pub fn zeros(num_states: usize) -> Self {
        Self { data: Array3::zeros((num_states, NUM_ACTIONS, NUM_ACTIONS)) }
    }

    pub fn for_scenario(s: &Scenario) -> Self {
        Self::zeros(s.num_states())
    }

    pub fn from_array(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn num_states(&self) -> usize {
        self.data.dim().0
    }

    pub fn block(&self, state: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(ndarray::Axis(0), state)
    }

    pub fn block_mut(&mut self, state: usize) -> ArrayViewMut2<'_, f64> {
        self.data.index_axis_mut(ndarray::Axis(0), state)
    }

    pub fn set_block(&mut self, state: usize, block: &Array2<f64>) {
        self.block_mut(state).assign(block);
    }

    pub fn get(&self, state: usize, leader: usize, follower: usize) -> f64 {
        self.data[[state, leader, follower]]
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_scenario(&self, s: &Scenario) -> Result<()> {
        if self.num_states() != s.num_states() {
            return Err(Error::TableShape { expected: s.num_states(), found: self.num_states() });
        }
        Ok(())
    }

    /// JSON document `{ "<state>": [[..6..] x6], ..., "meta": meta }`.
    pub fn to_json(&self, meta: Option<Value>) -> Value {
        let mut map = Map::new();
        for i in 0..self.num_states() {
            let rows: Vec<Vec<f64>> = self.block(i).outer_iter().map(|r| r.to_vec()).collect();
            map.insert(i.to_string(), serde_json::to_value(rows).expect("finite floats"));
        }
        if let Some(meta) = meta {
            map.insert("meta".into(), meta);
        }
        Value::Object(map)
    }

    /// Parses the format written by [`to_json`](Self::to_json), returning the `meta` entry too.
    pub fn from_json(value: &Value) -> Result<(Self, Option<Value>)> {
        let obj = value.as_object().ok_or_else(|| Error::Parse("utility table must be an object".into()))?;
        let mut blocks = BTreeMap::new();
        let mut meta = None;
        for (key, v) in obj {
            if key == "meta" {
                meta = Some(v.clone());
                continue;
            }
            let idx: usize = key.parse().map_err(|_| Error::Parse(format!("bad state key `{key}`")))?;
            let rows: Vec<Vec<f64>> = serde_json::from_value(v.clone())?;
            if rows.len() != NUM_ACTIONS || rows.iter().any(|r| r.len() != NUM_ACTIONS) {
                return Err(Error::Parse(format!("state {idx}: block must be 6x6")));
            }
            blocks.insert(idx, rows);
        }
        let n = blocks.len();
        if blocks.keys().copied().ne(0..n) {
            return Err(Error::Parse("state keys must be contiguous from 0".into()));
        }
        let mut table = Self::zeros(n);
        for (i, rows) in blocks {
            for (a, row) in rows.iter().enumerate() {
                for (b, &x) in row.iter().enumerate() {
                    table.data[[i, a, b]] = x;
                }
            }
        }
        Ok((table, meta))
    }

    pub fn save(&self, path: &Path, meta: Option<Value>) -> Result<()> {
        let text = serde_json::to_string(&self.to_json(meta))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Value>)> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&serde_json::from_str(&text)?)
    }
}
