//! Agglomerative clustering of panel columns with Ward's minimum-variance
//! linkage, and cuts of the resulting dendrogram into `K` clusters.
//!
//! Each column of a standardised panel is a point in `R^n`. Dissimilarities
//! start as squared Euclidean distances and are updated with the
//! Lance–Williams recurrence for Ward linkage, so the dissimilarity between
//! clusters `A` and `B` is `2 |A||B| / (|A|+|B|) * ||c_A - c_B||^2`, i.e. twice
//! the increase in total within-cluster sum of squares caused by merging them.
//! Merge heights are reported as the square root of that quantity, the usual
//! convention of dendrogram plotters.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::StandardizedPanel;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("clustering needs at least 2 columns, got {0}")]
    TooFewColumns(usize),
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("cluster count {k} out of range 1..={max}")]
    OutOfRange { k: usize, max: usize },
    #[error("label {0:?} has no category")]
    MissingCategory(String),
    #[error("assignment does not match panel columns")]
    LabelMismatch,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One agglomeration step. Leaves are nodes `0..d`; merge `m` creates node `d + m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub labels: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn n_leaves(&self) -> usize {
        self.labels.len()
    }

    /// Writes `left,right,height,size` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ClusterError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["left", "right", "height", "size"])?;
        for m in &self.merges {
            wtr.write_record([
                m.left.to_string(),
                m.right.to_string(),
                format!("{:.16e}", m.height),
                m.size.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Ward clustering of the columns of a standardised panel.
pub fn ward_cluster<T: Scalar>(panel: &StandardizedPanel<T>) -> Result<Dendrogram, ClusterError> {
    let merges = ward_linkage(panel.values())?;
    Ok(Dendrogram {
        labels: panel.labels().to_vec(),
        merges,
    })
}

/// Ward linkage of the columns of `points` (each column one observation).
///
/// Every step scans all active pairs; equal dissimilarities resolve to the
/// lexicographically smallest pair, where a cluster is identified by its
/// smallest leaf index.
pub fn ward_linkage<T: Scalar>(points: ArrayView2<T>) -> Result<Vec<Merge>, ClusterError> {
    let d = points.ncols();
    if d < 2 {
        return Err(ClusterError::TooFewColumns(d));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(ClusterError::NonFinite);
    }
    let mut dist = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in (i + 1)..d {
            let dij: f64 = points
                .column(i)
                .iter()
                .zip(points.column(j).iter())
                .map(|(&a, &b)| {
                    let diff = (a - b).as_f64();
                    diff * diff
                })
                .sum();
            dist[[i, j]] = dij;
            dist[[j, i]] = dij;
        }
    }

    // slot s holds the cluster whose smallest leaf is s
    let mut active = vec![true; d];
    let mut size = vec![1usize; d];
    let mut node = (0..d).collect::<Vec<usize>>();
    let mut merges = Vec::with_capacity(d - 1);
    for step in 0..(d - 1) {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in (0..d).filter(|&i| active[i]) {
            for j in ((i + 1)..d).filter(|&j| active[j]) {
                if best.is_none_or(|(_, _, b)| dist[[i, j]] < b) {
                    best = Some((i, j, dist[[i, j]]));
                }
            }
        }
        let (a, b, dab) = best.expect("at least two active clusters");
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for k in (0..d).filter(|&k| active[k] && k != a && k != b) {
            let nk = size[k] as f64;
            let updated =
                ((na + nk) * dist[[a, k]] + (nb + nk) * dist[[b, k]] - nk * dab) / (na + nb + nk);
            dist[[a, k]] = updated;
            dist[[k, a]] = updated;
        }
        active[b] = false;
        size[a] += size[b];
        merges.push(Merge {
            left: node[a],
            right: node[b],
            height: dab.max(0.0).sqrt(),
            size: size[a],
        });
        node[a] = d + step;
    }
    Ok(merges)
}

/// Partition of labelled columns into clusters `1..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    labels: Vec<String>,
    /// Cluster id (1-based) per label, aligned with `labels`.
    ids: Vec<usize>,
    /// Name per cluster, index `k - 1`.
    names: Vec<String>,
}

impl ClusterAssignment {
    /// Builds an assignment from raw ids; ids are renumbered by ascending
    /// smallest member index.
    pub fn from_raw(labels: Vec<String>, raw: &[usize], names: Option<Vec<(usize, String)>>) -> Self {
        let mut renumber: BTreeMap<usize, usize> = BTreeMap::new();
        for &r in raw {
            let next = renumber.len() + 1;
            renumber.entry(r).or_insert(next);
        }
        let ids: Vec<usize> = raw.iter().map(|r| renumber[r]).collect();
        let k = renumber.len();
        let mut out_names: Vec<String> = (1..=k).map(|c| format!("cluster_{c}")).collect();
        if let Some(named) = names {
            for (r, name) in named {
                if let Some(&c) = renumber.get(&r) {
                    out_names[c - 1] = name;
                }
            }
        }
        Self {
            labels,
            ids,
            names: out_names,
        }
    }

    /// One cluster per distinct category, named after it.
    pub fn from_categories(
        labels: &[String],
        categories: &BTreeMap<String, String>,
    ) -> Result<Self, ClusterError> {
        let mut cat_ids: BTreeMap<&str, usize> = BTreeMap::new();
        let mut raw = Vec::with_capacity(labels.len());
        let mut names = Vec::new();
        for label in labels {
            let cat = categories
                .get(label)
                .ok_or_else(|| ClusterError::MissingCategory(label.clone()))?;
            let next = cat_ids.len();
            let id = *cat_ids.entry(cat.as_str()).or_insert_with(|| {
                names.push((next, cat.clone()));
                next
            });
            raw.push(id);
        }
        Ok(Self::from_raw(labels.to_vec(), &raw, Some(names)))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_clusters(&self) -> usize {
        self.names.len()
    }

    pub fn cluster_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label).map(|i| self.ids[i])
    }

    /// Column indices of cluster `k` (1-based), ascending.
    pub fn members(&self, k: usize) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        if names.len() == self.names.len() {
            self.names = names;
        }
        self
    }

    /// Writes `label,cluster` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ClusterError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["label", "cluster"])?;
        for (label, id) in self.labels.iter().zip(&self.ids) {
            wtr.write_record([label.clone(), id.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Undoes the last `K - 1` merges and labels the remaining components.
pub fn cut(dendrogram: &Dendrogram, k: usize) -> Result<ClusterAssignment, ClusterError> {
    let d = dendrogram.n_leaves();
    if k == 0 || k > d {
        return Err(ClusterError::OutOfRange { k, max: d });
    }
    // union-find over leaves; node ids >= d map to a representative leaf
    let mut parent: Vec<usize> = (0..d).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut representative: Vec<usize> = (0..d).collect();
    for (m, merge) in dendrogram.merges.iter().enumerate() {
        let leaf_of = |node: usize, rep: &[usize]| if node < d { node } else { rep[node - d] };
        let a = leaf_of(merge.left, &representative[d..]);
        let b = leaf_of(merge.right, &representative[d..]);
        representative.push(a);
        if m < d - k {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[hi] = lo;
        }
    }
    let raw: Vec<usize> = (0..d).map(|i| find(&mut parent, i)).collect();
    Ok(ClusterAssignment::from_raw(dendrogram.labels.clone(), &raw, None))
}

/// Rand index between two labelings of the same items.
pub fn rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}
