use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::cloud::{centroid, dist2, Point};
use crate::error::{Error, Result};

/// How farthest point sampling picks its first index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    /// Point farthest from the centroid.
    #[default]
    FarthestFromCentroid,
    IndexZero,
}

pub(crate) fn lex_cmp(a: &Point, b: &Point) -> Ordering {
    for i in 0..3 {
        match a[i].partial_cmp(&b[i]).expect("coordinates are finite") {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// True when candidate `i` should replace the current best `best`: larger
/// score first, then lexicographically smaller point, then lower index.
pub(crate) fn beats(
    points: &[Point],
    i: usize,
    score_i: f64,
    best: usize,
    score_best: f64,
) -> bool {
    match score_i
        .partial_cmp(&score_best)
        .expect("distances are finite")
    {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => match lex_cmp(&points[i], &points[best]) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => i < best,
        },
    }
}

pub(crate) fn start_index(points: &[Point], rule: StartRule) -> usize {
    match rule {
        StartRule::IndexZero => 0,
        StartRule::FarthestFromCentroid => {
            let c = centroid(points);
            let mut best = 0;
            let mut best_d = dist2(&points[0], &c);
            for (i, p) in points.iter().enumerate().skip(1) {
                let d = dist2(p, &c);
                if beats(points, i, d, best, best_d) {
                    best = i;
                    best_d = d;
                }
            }
            best
        }
    }
}

/// Greedy maximin subset of `m` indices.
///
/// Each pick maximizes the squared distance to the nearest already-picked
/// point among the points not yet picked.
pub fn fps(points: &[Point], m: usize, start: StartRule) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::contract(
            "fps",
            format!("need 1 <= m <= N, got m={m}, N={n}"),
        ));
    }
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];

    let mut current = start_index(points, start);
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == m {
            break;
        }
        let cp = points[current];
        let mut best: Option<usize> = None;
        for i in 0..n {
            let d = dist2(&points[i], &cp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if taken[i] {
                continue;
            }
            best = match best {
                Some(b) if !beats(points, i, min_d[i], b, min_d[b]) => Some(b),
                _ => Some(i),
            };
        }
        current = best.expect("m <= N leaves an untaken point");
    }
    Ok(selected)
}

/// Indices of the `k` nearest points to each center, sorted by (distance, index).
pub fn knn_group(points: &[Point], centers: &[Point], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::contract(
            "knn_group",
            format!("need 1 <= k <= N, got k={k}, N={n}"),
        ));
    }
    let mut out = Vec::with_capacity(centers.len());
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.partial_cmp(&b.0)
            .expect("distances are finite")
            .then(a.1.cmp(&b.1))
    };
    for c in centers {
        cand.clear();
        cand.extend(points.iter().enumerate().map(|(i, p)| (dist2(p, c), i)));
        if k < n {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let mut head: Vec<(f64, usize)> = cand[..k].to_vec();
        head.sort_by(cmp);
        out.push(head.into_iter().map(|(_, i)| i).collect());
    }
    Ok(out)
}
