//! Evolving prototype bank: k-means warm-up, transport-weighted
//! recomputation and EMA blending.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::squared_euclidean;
use crate::error::{Error, Result};
use crate::transport::{sinkhorn, SinkhornParams, TransportPlan};

pub const PROTO_MAGIC: &[u8; 8] = b"XFICPRO1";
pub const DEFAULT_EMA_ALPHA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    protos: Array2<f64>,
    ema_alpha: f64,
    warmup_done: bool,
    update_count: u64,
}

impl PrototypeBank {
    /// A bank with `k` zero prototypes that has not been warmed up yet.
    pub fn uninitialized(k: usize, dim: usize, ema_alpha: f64) -> Self {
        PrototypeBank {
            protos: Array2::zeros((k, dim)),
            ema_alpha,
            warmup_done: false,
            update_count: 0,
        }
    }

    pub fn from_centroids(protos: Array2<f64>, ema_alpha: f64) -> Result<Self> {
        if protos.nrows() == 0 {
            return Err(Error::Parameter("prototype bank needs at least one prototype".into()));
        }
        if !(0.0..=1.0).contains(&ema_alpha) {
            return Err(Error::Parameter(format!("ema_alpha {ema_alpha} outside [0, 1]")));
        }
        if protos.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("non-finite prototype".into()));
        }
        Ok(PrototypeBank {
            protos,
            ema_alpha,
            warmup_done: true,
            update_count: 0,
        })
    }

    pub fn with_ema_alpha(mut self, ema_alpha: f64) -> Self {
        self.ema_alpha = ema_alpha;
        self
    }

    pub fn k(&self) -> usize {
        self.protos.nrows()
    }

    pub fn dim(&self) -> usize {
        self.protos.ncols()
    }

    pub fn prototypes(&self) -> ArrayView2<'_, f64> {
        self.protos.view()
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        self.protos
            .row(k)
            .to_slice()
            .expect("prototype rows are contiguous")
    }

    pub fn ema_alpha(&self) -> f64 {
        self.ema_alpha
    }

    pub fn is_warm(&self) -> bool {
        self.warmup_done
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    fn ensure_warm(&self) -> Result<()> {
        if self.warmup_done {
            Ok(())
        } else {
            Err(Error::State("prototype bank has not been warmed up".into()))
        }
    }

    /// Index and distance of the closest prototype; ties go to the smallest index.
    pub fn nearest(&self, z: &[f64]) -> Result<(usize, f64)> {
        self.ensure_warm()?;
        if z.len() != self.dim() {
            return Err(Error::Shape(format!(
                "query dimension {} vs prototype dimension {}",
                z.len(),
                self.dim()
            )));
        }
        let mut best = (0, f64::INFINITY);
        for k in 0..self.k() {
            let d = squared_euclidean(z, self.prototype(k));
            if d < best.1 {
                best = (k, d);
            }
        }
        Ok((best.0, best.1.sqrt()))
    }

    /// Transport plan between `embeddings` (rows) and the current prototypes,
    /// with squared Euclidean cost.
    pub fn transport_plan(
        &self,
        embeddings: ArrayView2<'_, f64>,
        params: &SinkhornParams,
    ) -> Result<TransportPlan> {
        self.ensure_warm()?;
        if embeddings.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "embedding dimension {} vs prototype dimension {}",
                embeddings.ncols(),
                self.dim()
            )));
        }
        let embeddings = embeddings.as_standard_layout();
        let mut cost = Array2::zeros((embeddings.nrows(), self.k()));
        for (i, z) in embeddings.rows().into_iter().enumerate() {
            let z = z.to_slice().expect("standard layout");
            for k in 0..self.k() {
                cost[[i, k]] = squared_euclidean(z, self.prototype(k));
            }
        }
        sinkhorn(cost.view(), params)
    }

    /// Column-normalized transport-weighted means of `embeddings`, blended
    /// into the bank: `p ← (1 − α)·p + α·p̂`.
    ///
    /// Prototypes whose plan column carries no mass are left in place.
    pub fn update(&mut self, plan: &TransportPlan, embeddings: ArrayView2<'_, f64>) -> Result<()> {
        self.ensure_warm()?;
        let (n, k) = plan.plan.dim();
        if n != embeddings.nrows() || k != self.k() || embeddings.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "plan {n}x{k}, embeddings {}x{}, bank {}x{}",
                embeddings.nrows(),
                embeddings.ncols(),
                self.k(),
                self.dim()
            )));
        }
        let alpha = self.ema_alpha;
        for c in 0..k {
            let weights = plan.plan.column(c);
            let mass = weights.sum();
            if !(mass > 0.0) {
                log::warn!("prototype {c} received no transport mass; left unchanged");
                continue;
            }
            let candidate = weights.dot(&embeddings) / mass;
            let mut proto = self.protos.row_mut(c);
            proto.zip_mut_with(&candidate, |p, &q| *p = (1.0 - alpha) * *p + alpha * q);
        }
        if self.protos.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("prototype update produced non-finite values".into()));
        }
        self.update_count += 1;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 + self.protos.len() * 8 + 16);
        out.extend_from_slice(PROTO_MAGIC);
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.protos.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.ema_alpha.to_le_bytes());
        out.extend_from_slice(&self.update_count.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::corpus::ByteReader::new(bytes);
        let magic = r.take("magic", 8)?;
        if magic != PROTO_MAGIC {
            return Err(Error::format("magic", 0, "not a prototype checkpoint"));
        }
        let k = r.u32("K")? as usize;
        let dim = r.u32("dim")? as usize;
        let expected = 16 + k * dim * 8 + 16;
        if bytes.len() != expected {
            return Err(Error::format(
                "K",
                8,
                format!("K={k}, dim={dim} imply {expected} bytes, file has {}", bytes.len()),
            ));
        }
        let mut values = Vec::with_capacity(k * dim);
        for _ in 0..k * dim {
            values.push(r.f64("prototypes")?);
        }
        let ema_alpha = r.f64("ema_alpha")?;
        let update_count = r.u64("update_count")?;
        let protos = Array2::from_shape_vec((k, dim), values)
            .map_err(|e| Error::format("dim", 12, e.to_string()))?;
        let mut bank = PrototypeBank::from_centroids(protos, ema_alpha)?;
        bank.update_count = update_count;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Nearest prototype of `z`; ties go to the smallest index.
pub fn nearest_prototype(z: &[f64], bank: &PrototypeBank) -> Result<(usize, f64)> {
    bank.nearest(z)
}

/// Builds the transport plan of `embeddings` against `bank`.
pub fn sinkhorn_plan(
    embeddings: ArrayView2<'_, f64>,
    bank: &PrototypeBank,
    params: &SinkhornParams,
) -> Result<TransportPlan> {
    bank.transport_plan(embeddings, params)
}

/// Returns a copy of `bank` after one transport-weighted EMA update.
pub fn update_prototypes(
    plan: &TransportPlan,
    embeddings: ArrayView2<'_, f64>,
    bank: &PrototypeBank,
) -> Result<PrototypeBank> {
    let mut next = bank.clone();
    next.update(plan, embeddings)?;
    Ok(next)
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn assign(samples: ArrayView2<'_, f64>, centroids: &Array2<f64>) -> Vec<(usize, f64)> {
    samples
        .rows()
        .into_iter()
        .map(|row| {
            let row = row.to_vec();
            let mut best = (0, f64::INFINITY);
            for (k, c) in centroids.rows().into_iter().enumerate() {
                let d = squared_euclidean(&row, c.as_slice().expect("owned centroids"));
                if d < best.1 {
                    best = (k, d);
                }
            }
            best
        })
        .collect()
}

/// Lloyd's k-means from `k` distinct seeded samples.
///
/// Stops when assignments stop changing or after `max_iters` rounds. A
/// cluster that empties is re-seeded at the sample farthest from its own
/// centroid (ties to the smallest index), skipping samples already used as
/// re-seeds in that round.
pub fn kmeans(samples: ArrayView2<'_, f64>, k: usize, max_iters: usize, seed: u64) -> Result<KMeansFit> {
    let n = samples.nrows();
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InsufficientWarmup { needed: k, got: n });
    }
    let samples = samples.as_standard_layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = rand::seq::index::sample(&mut rng, n, k).into_vec();
    init.sort_unstable();
    let mut centroids = samples.select(Axis(0), &init);
    let mut assignments: Vec<usize> = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let scored = assign(samples.view(), &centroids);
        let mut next: Vec<usize> = scored.iter().map(|s| s.0).collect();
        let mut counts = vec![0usize; k];
        for &a in &next {
            counts[a] += 1;
        }

        let mut reseeded = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|i| !reseeded.contains(i))
                .fold(None::<usize>, |best, i| match best {
                    Some(b) if scored[b].1 >= scored[i].1 => Some(b),
                    _ => Some(i),
                })
                .expect("n >= k leaves a candidate");
            reseeded.push(far);
            counts[next[far]] -= 1;
            next[far] = c;
            counts[c] = 1;
        }

        let mut sums = Array2::<f64>::zeros((k, samples.ncols()));
        for (i, &a) in next.iter().enumerate() {
            let mut s = sums.row_mut(a);
            s += &samples.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }

        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
    }

    Ok(KMeansFit {
        centroids,
        assignments,
        iterations,
    })
}

/// Warms up a bank of `k` prototypes with k-means over `samples`.
pub fn init_kmeans(samples: ArrayView2<'_, f64>, k: usize, max_iters: usize, seed: u64) -> Result<PrototypeBank> {
    let fit = kmeans(samples, k, max_iters, seed)?;
    PrototypeBank::from_centroids(fit.centroids, DEFAULT_EMA_ALPHA)
}
