//! Agglomerative clustering of matrix rows under Euclidean distance.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compare::SimilarityMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    #[default]
    Average,
    Complete,
    Ward,
}

impl Linkage {
    pub fn as_str(self) -> &'static str {
        match self {
            Linkage::Average => "average",
            Linkage::Complete => "complete",
            Linkage::Ward => "ward",
        }
    }
}

impl fmt::Display for Linkage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Linkage::Average),
            "complete" => Ok(Linkage::Complete),
            "ward" => Ok(Linkage::Ward),
            _ => Err(Error::Config(format!("unknown linkage {s:?}"))),
        }
    }
}

/// One merge. Leaves are clusters `0..k`; the cluster created by merge `t`
/// gets id `k + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: Vec<String>,
    pub linkage: Linkage,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: Dendrogram = serde_json::from_str(text)?;
        let k = d.leaves.len();
        if d.merges.len() + 1 != k {
            return Err(Error::Matrix(format!("{} merges for {k} leaves", d.merges.len())));
        }
        for (t, m) in d.merges.iter().enumerate() {
            if m.a >= k + t || m.b >= k + t || m.a == m.b {
                return Err(Error::Matrix(format!("merge {t} references an unknown cluster")));
            }
        }
        Ok(d)
    }

    /// Leaf order that draws the tree without crossings.
    pub fn leaf_order(&self) -> Vec<usize> {
        let k = self.leaves.len();
        let Some(last) = self.merges.len().checked_sub(1) else { return (0..k).collect() };
        let mut out = Vec::with_capacity(k);
        let mut stack = vec![k + last];
        while let Some(c) = stack.pop() {
            if c < k {
                out.push(c);
            } else {
                let m = &self.merges[c - k];
                stack.push(m.b);
                stack.push(m.a);
            }
        }
        out
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Clusters the matrix's row vectors.
pub fn cluster(matrix: &SimilarityMatrix, linkage: Linkage) -> Result<Dendrogram> {
    let leaves = matrix.tasks.iter().map(|t| t.id.clone()).collect();
    cluster_rows(leaves, &matrix.values, linkage)
}

/// Lance-Williams agglomeration. The closest active pair merges first; ties
/// go to the pair with the lowest cluster ids. Ward works on squared
/// distances and reports their square root.
pub fn cluster_rows(leaves: Vec<String>, rows: &[Vec<f64>], linkage: Linkage) -> Result<Dendrogram> {
    let k = rows.len();
    if k < 2 {
        return Err(Error::Matrix("clustering needs at least two rows".into()));
    }
    if leaves.len() != k {
        return Err(Error::Matrix("one label per row is required".into()));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Matrix("rows differ in length".into()));
    }
    let ward = linkage == Linkage::Ward;
    let total = 2 * k - 1;
    let mut dist = vec![vec![0.0; total]; total];
    for i in 0..k {
        for j in 0..i {
            let d = euclidean(&rows[i], &rows[j]);
            let d = if ward { d * d } else { d };
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut size = vec![1usize; total];
    let mut active: Vec<usize> = (0..k).collect();
    let mut merges = Vec::with_capacity(k - 1);
    for t in 0..k - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for (x, &i) in active.iter().enumerate() {
            for &j in &active[x + 1..] {
                let d = dist[i][j];
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let (d, i, j) = best.expect("two active clusters");
        let new = k + t;
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        size[new] = size[i] + size[j];
        active.retain(|&c| c != i && c != j);
        for &x in &active {
            let nx = size[x] as f64;
            let v = match linkage {
                Linkage::Average => (ni * dist[i][x] + nj * dist[j][x]) / (ni + nj),
                Linkage::Complete => dist[i][x].max(dist[j][x]),
                Linkage::Ward => ((ni + nx) * dist[i][x] + (nj + nx) * dist[j][x] - nx * d) / (ni + nj + nx),
            };
            dist[new][x] = v;
            dist[x][new] = v;
        }
        active.push(new);
        let distance = if ward { d.max(0.0).sqrt() } else { d };
        merges.push(Merge { a: i, b: j, distance, size: size[new] });
    }
    Ok(Dendrogram { leaves, linkage, merges })
}
