//! The curation loop: score each super-batch against the prototypes, trim
//! outliers, keep the distant tail, under-sample each prototype cluster with
//! farthest point sampling, and refresh the prototypes from the emitted
//! mini-batch.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embedding::{unify_all, unify_halves, CurationSpace};
use crate::error::{Error, Result};
use crate::fps::{fps_select, FpsPoint};
use crate::prototypes::{kmeans, PrototypeBank};
use crate::trainer::{stack_rows, AdamWConfig, LossPoint, ProjectionHead, Trainer};
use crate::transport::SinkhornParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub superbatch_size: usize,
    pub outlier_frac: f64,
    pub keep_frac: f64,
    pub per_cluster_budget: usize,
    pub k: usize,
    pub ema_alpha: f64,
    pub curation_space: CurationSpace,
    pub seed: u64,
    pub sinkhorn: SinkhornParams,
    pub warmup_samples: usize,
    pub kmeans_max_iters: usize,
    pub target_subset_size: Option<usize>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            superbatch_size: 640,
            outlier_frac: 0.05,
            keep_frac: 0.10,
            per_cluster_budget: 10,
            k: 6,
            ema_alpha: 0.1,
            curation_space: CurationSpace::Concat,
            seed: 0,
            sinkhorn: SinkhornParams::default(),
            warmup_samples: 6400,
            kmeans_max_iters: 100,
            target_subset_size: None,
        }
    }
}

impl CurationConfig {
    /// Checks every knob; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::config(key, why));
        if !(0.0..1.0).contains(&self.outlier_frac) {
            return bad("outlier_frac", format!("{} not in [0, 1)", self.outlier_frac));
        }
        if !(self.keep_frac > 0.0 && self.keep_frac < 1.0) {
            return bad("keep_frac", format!("{} not in (0, 1)", self.keep_frac));
        }
        if self.outlier_frac + self.keep_frac >= 1.0 {
            return bad(
                "keep_frac",
                format!("outlier_frac + keep_frac = {} must be below 1", self.outlier_frac + self.keep_frac),
            );
        }
        if self.per_cluster_budget < 1 {
            return bad("per_cluster_budget", "must be at least 1".into());
        }
        if self.k < 2 {
            return bad("K", format!("{} prototypes; need at least 2", self.k));
        }
        if self.superbatch_size < self.k {
            return bad("superbatch_size", format!("{} is smaller than K = {}", self.superbatch_size, self.k));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad("ema_alpha", format!("{} not in [0, 1]", self.ema_alpha));
        }
        if !(self.sinkhorn.epsilon > 0.0 && self.sinkhorn.epsilon.is_finite()) {
            return bad("sinkhorn_epsilon", "must be positive".into());
        }
        if self.sinkhorn.max_iters == 0 {
            return bad("sinkhorn_max_iters", "must be positive".into());
        }
        if !(self.sinkhorn.tol > 0.0) {
            return bad("sinkhorn_tol", "must be positive".into());
        }
        if self.warmup_samples < self.k {
            return bad("warmup_samples", format!("{} is smaller than K = {}", self.warmup_samples, self.k));
        }
        if self.kmeans_max_iters == 0 {
            return bad("kmeans_max_iters", "must be positive".into());
        }
        if self.target_subset_size == Some(0) {
            return bad("target_subset_size", "must be positive when set".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Distant,
    Fps,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Reason::Distant => "distant",
            Reason::Fps => "fps",
        }
    }
}

/// Nearest-prototype score of one super-batch member.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub id: u64,
    /// Row of the sample inside its super-batch.
    pub row: usize,
    pub proto: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionEntry {
    pub id: u64,
    pub iteration: usize,
    pub reason: Reason,
    pub proto: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub superbatch: usize,
    pub trimmed: usize,
    pub distant: usize,
    pub pool: usize,
    pub fps: usize,
    pub minibatch: usize,
    pub cluster_sizes: Vec<usize>,
    pub assign_residual: f64,
    pub assign_iterations: usize,
    pub update_residual: f64,
    pub update_iterations: usize,
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CuratedSelection {
    pub entries: Vec<SelectionEntry>,
    pub stats: Vec<IterationStats>,
}

impl CuratedSelection {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,iteration,reason,proto,distance\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.id,
                e.iteration,
                e.reason.as_str(),
                e.proto,
                crate::fmt::sig9(e.distance)
            );
        }
        out
    }

    pub fn stats_json(&self) -> String {
        serde_json::to_string_pretty(&self.stats).expect("stats serialize") + "\n"
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("id,iteration,reason,proto,distance") => {}
            other => {
                return Err(Error::format("header", 0, format!("unexpected selection header {other:?}")))
            }
        }
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for line in lines {
            offset += 1;
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::format("row", offset, format!("{what}: `{line}`"));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(bad("expected 5 columns"));
            }
            entries.push(SelectionEntry {
                id: cols[0].parse().map_err(|_| bad("bad id"))?,
                iteration: cols[1].parse().map_err(|_| bad("bad iteration"))?,
                reason: match cols[2] {
                    "distant" => Reason::Distant,
                    "fps" => Reason::Fps,
                    _ => return Err(bad("bad reason")),
                },
                proto: cols[3].parse().map_err(|_| bad("bad proto"))?,
                distance: cols[4].parse().map_err(|_| bad("bad distance"))?,
            });
        }
        Ok(CuratedSelection { entries, stats: Vec::new() })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Nearest-prototype distance of every row of `embeddings`.
pub fn score_superbatch(ids: &[u64], embeddings: ArrayView2<'_, f64>, bank: &PrototypeBank) -> Result<Vec<Scored>> {
    if ids.len() != embeddings.nrows() {
        return Err(Error::Shape(format!("{} ids for {} embeddings", ids.len(), embeddings.nrows())));
    }
    let embeddings = embeddings.as_standard_layout();
    embeddings
        .rows()
        .into_iter()
        .enumerate()
        .map(|(row, z)| {
            let (proto, distance) = bank.nearest(z.to_slice().expect("standard layout"))?;
            Ok(Scored { id: ids[row], row, proto, distance })
        })
        .collect()
}

/// Drops the `⌊frac·m⌋` largest-distance samples (larger id first among
/// ties). The kept list preserves input order.
pub fn trim_outliers(scored: &[Scored], outlier_frac: f64) -> (Vec<Scored>, Vec<u64>) {
    let n_trim = (outlier_frac * scored.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .distance
            .total_cmp(&scored[a].distance)
            .then(scored[b].id.cmp(&scored[a].id))
    });
    let trimmed: HashSet<usize> = order[..n_trim].iter().copied().collect();
    let kept = scored
        .iter()
        .enumerate()
        .filter(|(i, _)| !trimmed.contains(i))
        .map(|(_, s)| *s)
        .collect();
    let trimmed_ids = order[..n_trim].iter().map(|&i| scored[i].id).collect();
    (kept, trimmed_ids)
}

/// Splits off the `⌊frac·|kept|⌋` largest-distance samples (smaller id
/// first among ties), in descending-distance order. The pool keeps input
/// order.
pub fn select_distant(kept: &[Scored], keep_frac: f64) -> (Vec<Scored>, Vec<Scored>) {
    let n_keep = (keep_frac * kept.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.sort_by(|&a, &b| {
        kept[b]
            .distance
            .total_cmp(&kept[a].distance)
            .then(kept[a].id.cmp(&kept[b].id))
    });
    let chosen: HashSet<usize> = order[..n_keep].iter().copied().collect();
    let distant = order[..n_keep].iter().map(|&i| kept[i]).collect();
    let pool = kept
        .iter()
        .enumerate()
        .filter(|(i, _)| !chosen.contains(i))
        .map(|(_, s)| *s)
        .collect();
    (distant, pool)
}

/// Result of curating one super-batch.
#[derive(Clone, Debug)]
pub struct SuperbatchOutcome {
    /// Selected samples in emission order: distant tail first, then the
    /// farthest-point picks cluster by cluster.
    pub selected: Vec<(Scored, Reason)>,
    pub trimmed: Vec<u64>,
    pub stats: IterationStats,
}

impl SuperbatchOutcome {
    pub fn ids(&self) -> Vec<u64> {
        self.selected.iter().map(|(s, _)| s.id).collect()
    }

    pub fn rows(&self) -> Vec<usize> {
        self.selected.iter().map(|(s, _)| s.row).collect()
    }
}

/// Runs one curation iteration and updates `bank` from the emitted mini-batch.
pub fn curate_superbatch(
    ids: &[u64],
    embeddings: ArrayView2<'_, f64>,
    bank: &mut PrototypeBank,
    config: &CurationConfig,
    iteration: usize,
) -> Result<SuperbatchOutcome> {
    if !bank.is_warm() {
        return Err(Error::State("prototype bank has not been warmed up".into()));
    }
    let embeddings = embeddings.as_standard_layout();
    let scored = score_superbatch(ids, embeddings.view(), bank)?;
    let (kept, trimmed) = trim_outliers(&scored, config.outlier_frac);
    let (distant, pool) = select_distant(&kept, config.keep_frac);

    let mut cluster_sizes = vec![0; bank.k()];
    let mut assign_residual = 0.0;
    let mut assign_iterations = 0;
    let mut selected: Vec<(Scored, Reason)> = distant.iter().map(|s| (*s, Reason::Distant)).collect();

    if !pool.is_empty() {
        let rows: Vec<usize> = pool.iter().map(|s| s.row).collect();
        let pool_emb = embeddings.select(Axis(0), &rows);
        let plan = bank.transport_plan(pool_emb.view(), &config.sinkhorn)?;
        if !plan.converged {
            return Err(Error::NumericalFailure(format!(
                "pool assignment did not converge in {} iterations (residual {:.3e})",
                plan.iterations, plan.residual
            )));
        }
        assign_residual = plan.residual;
        assign_iterations = plan.iterations;
        let clusters = plan.hard_assignments();
        for c in 0..bank.k() {
            let members: Vec<&Scored> = pool.iter().zip(&clusters).filter(|(_, &a)| a == c).map(|(s, _)| s).collect();
            cluster_sizes[c] = members.len();
            if members.is_empty() {
                continue;
            }
            let points: Vec<FpsPoint<'_>> = members
                .iter()
                .map(|s| FpsPoint {
                    id: s.id,
                    coords: embeddings.row(s.row).to_slice().expect("standard layout"),
                })
                .collect();
            let picks = fps_select(&points, config.per_cluster_budget, bank.prototype(c));
            for id in picks {
                let s = members.iter().find(|s| s.id == id).expect("pick comes from members");
                selected.push((**s, Reason::Fps));
            }
        }
    }

    let mut update_residual = 0.0;
    let mut update_iterations = 0;
    if !selected.is_empty() {
        let rows: Vec<usize> = selected.iter().map(|(s, _)| s.row).collect();
        let mini = embeddings.select(Axis(0), &rows);
        let plan = bank.transport_plan(mini.view(), &config.sinkhorn)?;
        if !plan.converged {
            return Err(Error::NumericalFailure(format!(
                "prototype update plan did not converge in {} iterations (residual {:.3e})",
                plan.iterations, plan.residual
            )));
        }
        update_residual = plan.residual;
        update_iterations = plan.iterations;
        bank.update(&plan, mini.view())?;
    }

    let stats = IterationStats {
        iteration,
        superbatch: ids.len(),
        trimmed: trimmed.len(),
        distant: distant.len(),
        pool: pool.len(),
        fps: selected.len() - distant.len(),
        minibatch: selected.len(),
        cluster_sizes,
        assign_residual,
        assign_iterations,
        update_residual,
        update_iterations,
        loss: None,
    };
    Ok(SuperbatchOutcome { selected, trimmed, stats })
}

/// How the curation space relates to training.
#[derive(Clone, Debug)]
pub enum CurationMode {
    /// Curate the ingested vectors as they are.
    Frozen,
    /// Curate through a projection head that takes one contrastive step per
    /// emitted mini-batch.
    Joint { head: ProjectionHead, optimizer: AdamWConfig },
}

#[derive(Clone, Debug)]
pub struct CurationOutcome {
    pub selection: CuratedSelection,
    pub bank: PrototypeBank,
    /// Trained head (joint mode only).
    pub head: Option<ProjectionHead>,
    pub losses: Vec<LossPoint>,
}

/// Seeded permutation of corpus positions.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn embed_positions(
    corpus: &Corpus,
    positions: &[usize],
    space: CurationSpace,
    head: Option<&ProjectionHead>,
) -> Result<Array2<f64>> {
    match head {
        None => unify_all(positions.iter().map(|&p| &corpus.records[p]), space),
        Some(head) => {
            let img = stack_rows(positions.iter().map(|&p| corpus.records[p].img.as_slice()), corpus.d_img);
            let txt = stack_rows(positions.iter().map(|&p| corpus.records[p].txt.as_slice()), corpus.d_txt);
            let u = head.project_img(img.view())?;
            let v = head.project_txt(txt.view())?;
            let dim = space.dim(u.ncols(), v.ncols());
            let mut out = Array2::zeros((positions.len(), dim));
            for i in 0..positions.len() {
                let z = unify_halves(
                    u.row(i).as_slice().expect("owned"),
                    v.row(i).as_slice().expect("owned"),
                    space,
                )?;
                out.row_mut(i).assign(&ndarray::ArrayView1::from(z.as_slice()));
            }
            Ok(out)
        }
    }
}

/// One curation epoch over `corpus`.
///
/// The corpus is visited in a seeded order. The first `warmup_samples`
/// positions warm up the prototypes with k-means and are not curated; the
/// rest is consumed in consecutive super-batches (the last one may be
/// short). Stops early once `target_subset_size` samples are selected,
/// truncating the final mini-batch in emission order.
pub fn run_curation(corpus: &Corpus, config: &CurationConfig, mode: CurationMode) -> Result<CurationOutcome> {
    config.validate()?;
    if corpus.len() < config.warmup_samples {
        return Err(Error::InsufficientWarmup { needed: config.warmup_samples, got: corpus.len() });
    }
    let order = shuffled_order(corpus.len(), config.seed);
    let (warm, rest) = order.split_at(config.warmup_samples);
    let n_iters = rest.len().div_ceil(config.superbatch_size) as u64;

    let mut trainer = match mode {
        CurationMode::Frozen => None,
        CurationMode::Joint { head, optimizer } => {
            if head.d_img() != corpus.d_img || head.d_txt() != corpus.d_txt {
                return Err(Error::Shape(format!(
                    "head expects ({}, {}) inputs, corpus has ({}, {})",
                    head.d_img(),
                    head.d_txt(),
                    corpus.d_img,
                    corpus.d_txt
                )));
            }
            Some(Trainer::new(head, optimizer, n_iters.max(1)))
        }
    };

    let warm_emb = embed_positions(corpus, warm, config.curation_space, trainer.as_ref().map(|t| &t.head))?;
    let fit = kmeans(warm_emb.view(), config.k, config.kmeans_max_iters, config.seed)?;
    let mut bank = PrototypeBank::from_centroids(fit.centroids, config.ema_alpha)?;

    let mut selection = CuratedSelection::default();
    let mut losses = Vec::new();
    let cap = config.target_subset_size.unwrap_or(usize::MAX);

    for (iteration, chunk) in rest.chunks(config.superbatch_size).enumerate() {
        if selection.len() >= cap {
            break;
        }
        let ids: Vec<u64> = chunk.iter().map(|&p| corpus.records[p].id).collect();
        let emb = embed_positions(corpus, chunk, config.curation_space, trainer.as_ref().map(|t| &t.head))?;
        let mut outcome = curate_superbatch(&ids, emb.view(), &mut bank, config, iteration)?;

        if let Some(trainer) = trainer.as_mut() {
            let positions: Vec<usize> = outcome.rows().iter().map(|&r| chunk[r]).collect();
            if positions.len() >= 2 {
                let img = stack_rows(positions.iter().map(|&p| corpus.records[p].img.as_slice()), corpus.d_img);
                let txt = stack_rows(positions.iter().map(|&p| corpus.records[p].txt.as_slice()), corpus.d_txt);
                let step = trainer.step_count();
                let (loss, lr) = trainer.train_step(img.view(), txt.view())?;
                losses.push(LossPoint { step, epoch: 0, lr, loss });
                outcome.stats.loss = Some(loss);
            }
        }

        for (s, reason) in &outcome.selected {
            if selection.len() >= cap {
                break;
            }
            selection.entries.push(SelectionEntry {
                id: s.id,
                iteration,
                reason: *reason,
                proto: s.proto,
                distance: s.distance,
            });
        }
        selection.stats.push(outcome.stats);
    }

    Ok(CurationOutcome {
        selection,
        bank,
        head: trainer.map(Trainer::into_head),
        losses,
    })
}
