//! Farthest point sampling (greedy max-min) with deterministic tie-breaks.

use crate::embedding::euclidean;

/// A candidate point: stable sample id and its coordinates.
#[derive(Clone, Copy, Debug)]
pub struct FpsPoint<'a> {
    pub id: u64,
    pub coords: &'a [f64],
}

/// Picks up to `budget` points by greedy max-min distance.
///
/// The first pick is the point farthest from `anchor`; every later pick
/// maximizes the distance to its nearest already-picked point. Ties go to
/// the smallest id. When the budget covers every point, all ids are
/// returned in input order.
pub fn fps_select(points: &[FpsPoint<'_>], budget: usize, anchor: &[f64]) -> Vec<u64> {
    if points.len() <= budget {
        return points.iter().map(|p| p.id).collect();
    }
    if budget == 0 {
        return Vec::new();
    }

    let better = |cand: usize, best: Option<usize>, score: &[f64]| match best {
        None => true,
        Some(b) => score[cand] > score[b] || (score[cand] == score[b] && points[cand].id < points[b].id),
    };

    let mut picked = vec![false; points.len()];
    let mut out = Vec::with_capacity(budget);
    let mut min_dist: Vec<f64> = points.iter().map(|p| euclidean(p.coords, anchor)).collect();

    // the anchor only seeds the first pick; afterwards distances are to picks
    let mut first = None;
    for i in 0..points.len() {
        if better(i, first, &min_dist) {
            first = Some(i);
        }
    }
    let mut current = first.expect("nonempty");
    min_dist.fill(f64::INFINITY);

    loop {
        picked[current] = true;
        out.push(points[current].id);
        if out.len() == budget {
            break;
        }
        let mut next = None;
        for i in 0..points.len() {
            if picked[i] {
                continue;
            }
            let d = euclidean(points[i].coords, points[current].coords);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if better(i, next, &min_dist) {
                next = Some(i);
            }
        }
        current = next.expect("budget below point count");
    }
    out
}
