//! Gradient aggregation rules.

use std::fmt;
use std::str::FromStr;

use crate::learning::{sq_distance, GradientVector};
use crate::par::Exec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GarKind {
    Krum,
    Median,
    Average,
}

impl fmt::Display for GarKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GarKind::Krum => "krum",
            GarKind::Median => "median",
            GarKind::Average => "average",
        })
    }
}

impl FromStr for GarKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "krum" => Ok(GarKind::Krum),
            "median" => Ok(GarKind::Median),
            "average" => Ok(GarKind::Average),
            other => Err(Error::config(format!("unknown aggregation rule {other:?}"))),
        }
    }
}

/// An aggregation rule together with the Byzantine count it is sized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GarSpec {
    pub kind: GarKind,
    pub f: usize,
}

impl GarSpec {
    pub fn new(kind: GarKind, f: usize) -> Self {
        Self { kind, f }
    }

    pub fn aggregate(&self, grads: &[GradientVector]) -> Result<GradientVector> {
        self.aggregate_with(grads, Exec::default())
    }

    pub fn aggregate_with(&self, grads: &[GradientVector], exec: Exec) -> Result<GradientVector> {
        match self.kind {
            GarKind::Krum => krum_select_with(grads, self.f, exec).map(|(_, g)| g),
            GarKind::Median => median_aggregate(grads),
            GarKind::Average => average_aggregate(grads),
        }
    }
}

fn common_dim(grads: &[GradientVector]) -> Result<usize> {
    let first = grads
        .first()
        .ok_or_else(|| Error::invalid("no gradients to aggregate"))?;
    let d = first.dim();
    if let Some((i, g)) = grads.iter().enumerate().find(|(_, g)| g.dim() != d) {
        return Err(Error::invalid(format!(
            "gradient {i} has dimension {}, expected {d}",
            g.dim()
        )));
    }
    Ok(d)
}

/// Row-major `n×n` matrix of squared Euclidean distances.
pub fn pairwise_sq_distances(grads: &[GradientVector]) -> Result<Vec<Vec<f64>>> {
    pairwise_sq_distances_with(grads, Exec::default())
}

pub fn pairwise_sq_distances_with(grads: &[GradientVector], exec: Exec) -> Result<Vec<Vec<f64>>> {
    if grads.len() < 2 {
        return Err(Error::invalid("need at least two gradients"));
    }
    common_dim(grads)?;
    let n = grads.len();
    let upper: Vec<Vec<f64>> = exec.map(n, |i| {
        (i + 1..n)
            .map(|j| sq_distance(grads[i].as_slice(), grads[j].as_slice()))
            .collect()
    });
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + 1 + off;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

/// Krum score of every input: the sum of its `n−f−2` smallest squared
/// distances to the other inputs.
pub fn krum_scores(grads: &[GradientVector], f: usize) -> Result<Vec<f64>> {
    krum_scores_with(grads, f, Exec::default())
}

pub fn krum_scores_with(grads: &[GradientVector], f: usize, exec: Exec) -> Result<Vec<f64>> {
    let n = grads.len();
    if n < f + 3 {
        return Err(Error::invalid(format!("krum needs n >= f+3, got n={n}, f={f}")));
    }
    let m = pairwise_sq_distances_with(grads, exec)?;
    let keep = n - f - 2;
    Ok(exec.map(n, |i| {
        let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| m[i][j]).collect();
        row.sort_unstable_by(f64::total_cmp);
        row[..keep].iter().sum()
    }))
}

/// Index and value of the lowest-scoring input; ties go to the lowest index.
pub fn krum_select(grads: &[GradientVector], f: usize) -> Result<(usize, GradientVector)> {
    krum_select_with(grads, f, Exec::default())
}

pub fn krum_select_with(grads: &[GradientVector], f: usize, exec: Exec) -> Result<(usize, GradientVector)> {
    let scores = krum_scores_with(grads, f, exec)?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s < scores[best] {
            best = i;
        }
    }
    Ok((best, grads[best].clone()))
}

/// Coordinate-wise median; even counts average the two middle values.
pub fn median_aggregate(grads: &[GradientVector]) -> Result<GradientVector> {
    let d = common_dim(grads)?;
    let n = grads.len();
    let mut column = vec![0.0; n];
    let values = (0..d)
        .map(|j| {
            for (c, g) in column.iter_mut().zip(grads) {
                *c = g.as_slice()[j];
            }
            column.sort_unstable_by(f64::total_cmp);
            if n % 2 == 1 {
                column[n / 2]
            } else {
                (column[n / 2 - 1] + column[n / 2]) / 2.0
            }
        })
        .collect();
    GradientVector::new(values)
}

/// Coordinate-wise arithmetic mean, summed in input order.
pub fn average_aggregate(grads: &[GradientVector]) -> Result<GradientVector> {
    let d = common_dim(grads)?;
    let mut sum = vec![0.0; d];
    for g in grads {
        for (s, v) in sum.iter_mut().zip(g.as_slice()) {
            *s += v;
        }
    }
    let n = grads.len() as f64;
    GradientVector::new(sum.into_iter().map(|s| s / n).collect())
}
