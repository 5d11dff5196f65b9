//! Summation matrices for temporal and cross-sectional hierarchies.
//!
//! Nodes are ordered coarse to fine: every aggregate row comes before the
//! `m` bottom rows, so `S = [S_T; I_m]`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::matops::{max_abs, Mat};

/// A named group of nodes, used for per-level reporting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Level {
    pub label: String,
    pub nodes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Hierarchy {
    s: Mat,
    labels: Vec<String>,
    m: usize,
    levels: Vec<Level>,
}

/// Row selection `S_I` for an ordered node subset `I`.
#[derive(Clone, Debug)]
pub struct NodeSelection {
    pub indices: Vec<usize>,
    pub s_i: Mat,
}

impl NodeSelection {
    pub fn q(&self) -> usize {
        self.indices.len()
    }
}

impl Hierarchy {
    fn from_top(s_top: Mat, labels: Vec<String>, levels: Vec<Level>) -> Result<Self> {
        let m = s_top.ncols();
        let k = s_top.nrows();
        if k == 0 {
            return Err(Error::InvalidHierarchy("no aggregate rows".into()));
        }
        for (i, row) in s_top.row_iter().enumerate() {
            let ones = row.iter().filter(|x| **x != 0.0).count();
            if ones < 2 {
                return Err(Error::InvalidHierarchy(format!(
                    "aggregate '{}' covers {} bottom series; at least 2 are required",
                    labels[i], ones
                )));
            }
        }
        let n = k + m;
        if labels.len() != n {
            return Err(shape("hierarchy labels", (n, 1), (labels.len(), 1)));
        }
        let mut seen = BTreeSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidHierarchy(format!("duplicate node label '{l}'")));
            }
        }
        let mut s = Mat::zeros(n, m);
        s.view_mut((0, 0), (k, m)).copy_from(&s_top);
        s.view_mut((k, 0), (m, m)).fill_with_identity();
        Ok(Self { s, labels, m, levels })
    }

    /// Temporal hierarchy for one forecast-origin window of `period` steps.
    ///
    /// `levels` are block lengths; the smallest is the bottom level.
    pub fn temporal(period: usize, levels: &[usize]) -> Result<Self> {
        if period == 0 || levels.is_empty() {
            return Err(Error::InvalidHierarchy("empty period or level list".into()));
        }
        let mut lv: Vec<usize> = levels.to_vec();
        lv.sort_unstable_by(|a, b| b.cmp(a));
        for w in lv.windows(2) {
            if w[0] == w[1] {
                return Err(Error::InvalidHierarchy(format!("duplicate level {}", w[0])));
            }
        }
        for &l in &lv {
            if l == 0 || period % l != 0 {
                return Err(Error::InvalidHierarchy(format!(
                    "level {l} does not divide period {period}"
                )));
            }
        }
        let bottom = *lv.last().unwrap();
        for &l in &lv {
            if l % bottom != 0 {
                return Err(Error::InvalidHierarchy(format!(
                    "level {l} is not a multiple of the bottom level {bottom}"
                )));
            }
        }
        let m = period / bottom;
        let k: usize = lv[..lv.len() - 1].iter().map(|l| period / l).sum();
        let mut s_top = Mat::zeros(k, m);
        let mut labels = Vec::with_capacity(k + m);
        let mut out_levels = Vec::with_capacity(lv.len());
        let mut row = 0;
        for &l in &lv {
            let count = period / l;
            let width = l / bottom;
            let mut nodes = Vec::with_capacity(count);
            for j in 0..count {
                labels.push(format!("k{l}_{}", j + 1));
                nodes.push(row);
                if l != bottom {
                    for c in j * width..(j + 1) * width {
                        s_top[(row, c)] = 1.0;
                    }
                }
                row += 1;
            }
            out_levels.push(Level {
                label: format!("k{l}"),
                nodes,
            });
        }
        Self::from_top(s_top, labels, out_levels)
    }

    /// Cross-sectional hierarchy from aggregate membership sets (0-based
    /// bottom indices).
    pub fn structural(
        rows: &[Vec<usize>],
        agg_labels: Option<&[String]>,
        bottom_labels: &[String],
    ) -> Result<Self> {
        let m = bottom_labels.len();
        if m == 0 {
            return Err(Error::InvalidHierarchy("no bottom series".into()));
        }
        if rows.is_empty() {
            return Err(Error::InvalidHierarchy("no aggregate rows".into()));
        }
        let mut s_top = Mat::zeros(rows.len(), m);
        for (i, set) in rows.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::InvalidHierarchy(format!("aggregate {i} is empty")));
            }
            for &j in set {
                if j >= m {
                    return Err(Error::InvalidHierarchy(format!(
                        "aggregate {i} references bottom index {j} but m = {m}"
                    )));
                }
                s_top[(i, j)] = 1.0;
            }
        }
        let mut labels: Vec<String> = match agg_labels {
            Some(l) if l.len() == rows.len() => l.to_vec(),
            Some(l) => return Err(shape("aggregate labels", (rows.len(), 1), (l.len(), 1))),
            None => (0..rows.len()).map(|i| format!("agg{}", i + 1)).collect(),
        };
        let mut levels: Vec<Level> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| Level {
                label: l.clone(),
                nodes: vec![i],
            })
            .collect();
        levels.push(Level {
            label: "bottom".into(),
            nodes: (rows.len()..rows.len() + m).collect(),
        });
        labels.extend(bottom_labels.iter().cloned());
        Self::from_top(s_top, labels, levels)
    }

    pub fn from_spec(spec: &HierarchySpec) -> Result<Self> {
        match spec {
            HierarchySpec::Temporal { period, levels } => Self::temporal(*period, levels),
            HierarchySpec::Structural { bottom, aggregates } => {
                let mut rows = Vec::with_capacity(aggregates.len());
                let mut names = Vec::with_capacity(aggregates.len());
                for a in aggregates {
                    let mut set = Vec::with_capacity(a.members.len());
                    for mem in &a.members {
                        let j = bottom.iter().position(|b| b == mem).ok_or_else(|| {
                            Error::InvalidHierarchy(format!(
                                "aggregate '{}' lists unknown member '{mem}'",
                                a.label
                            ))
                        })?;
                        set.push(j);
                    }
                    rows.push(set);
                    names.push(a.label.clone());
                }
                Self::structural(&rows, Some(&names), bottom)
            }
        }
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of aggregate nodes, `n - m`.
    pub fn k(&self) -> usize {
        self.n() - self.m
    }

    pub fn s(&self) -> &Mat {
        &self.s
    }

    pub fn s_top(&self) -> Mat {
        self.s.rows(0, self.k()).into_owned()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn bottom_labels(&self) -> &[String] {
        &self.labels[self.k()..]
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    /// `J = [0 I_m]`, the bottom-row selector (m × n).
    pub fn j(&self) -> Mat {
        let mut j = Mat::zeros(self.m, self.n());
        j.view_mut((0, self.k()), (self.m, self.m)).fill_with_identity();
        j
    }

    /// `U = [I_{n-m}; -S_Tᵀ]` (n × (n−m)); its columns span the null space of `Sᵀ`.
    pub fn u(&self) -> Mat {
        let k = self.k();
        let mut u = Mat::zeros(self.n(), k);
        u.view_mut((0, 0), (k, k)).fill_with_identity();
        u.view_mut((k, 0), (self.m, k)).copy_from(&(-self.s_top().transpose()));
        u
    }

    pub fn select(&self, indices: &[usize]) -> Result<NodeSelection> {
        if indices.is_empty() {
            return Err(Error::InvalidParameter("empty node selection".into()));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidParameter(
                    "node selection must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(Error::InvalidParameter(format!(
                "node index {bad} out of range for n = {}",
                self.n()
            )));
        }
        Ok(NodeSelection {
            indices: indices.to_vec(),
            s_i: self.s.select_rows(indices),
        })
    }

    pub fn select_all(&self) -> NodeSelection {
        NodeSelection {
            indices: (0..self.n()).collect(),
            s_i: self.s.clone(),
        }
    }

    /// `true` iff `‖P S − I‖_max ≤ tol`.
    pub fn check_coherency(&self, p: &Mat, tol: f64) -> Result<bool> {
        Ok(self.coherency_error(p)? <= tol)
    }

    pub fn coherency_error(&self, p: &Mat) -> Result<f64> {
        if p.shape() != (self.m, self.n()) {
            return Err(shape("weight matrix", (self.m, self.n()), p.shape()));
        }
        Ok(max_abs(&(p * &self.s - Mat::identity(self.m, self.m))))
    }

    pub fn node_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateSpec {
    pub label: String,
    pub members: Vec<String>,
}

/// JSON hierarchy description.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HierarchySpec {
    Temporal { period: usize, levels: Vec<usize> },
    Structural {
        bottom: Vec<String>,
        aggregates: Vec<AggregateSpec>,
    },
}
