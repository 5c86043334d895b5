//! Density and distribution analysis: kNN profiles, low-density proportion,
//! ECDFs, a 2-D PCA projection and label histograms.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::corpus::Corpus;
use crate::embedding::squared_euclidean;
use crate::error::{Error, Result};
use crate::fmt::sig9;

pub const DEFAULT_KNN_K: usize = 20;
pub const DEFAULT_LOW_DENSITY_QUANTILE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityProfile {
    /// Mean distance of each point to its `k` nearest other points.
    pub values: Vec<f64>,
    pub k: usize,
    pub mean: f64,
    pub sd: f64,
}

impl DensityProfile {
    fn from_values(values: Vec<f64>, k: usize) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { values, k, mean, sd }
    }

    /// Profile restricted to the given positions.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self::from_values(positions.iter().map(|&p| self.values[p]).collect(), self.k)
    }
}

/// Per-row list of the `k` smallest squared distances seen so far.
struct NearestK {
    k: usize,
    dist: Vec<f64>,
    len: Vec<usize>,
    /// position of the current maximum in each full row
    worst: Vec<usize>,
}

impl NearestK {
    fn new(n: usize, k: usize) -> Self {
        Self { k, dist: vec![0.0; n * k], len: vec![0; n], worst: vec![0; n] }
    }

    #[inline]
    fn offer(&mut self, i: usize, d: f64) {
        let k = self.k;
        let row = &mut self.dist[i * k..(i + 1) * k];
        if self.len[i] < k {
            row[self.len[i]] = d;
            self.len[i] += 1;
            if self.len[i] == k {
                self.worst[i] = argmax(row);
            }
        } else if d < row[self.worst[i]] {
            row[self.worst[i]] = d;
            self.worst[i] = argmax(row);
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Exact kNN mean distance over all points with one symmetric pairwise scan.
/// The effective `k` is `min(k, n − 1)`.
pub fn knn_mean_distance(points: ArrayView2<'_, f64>, k: usize) -> Result<DensityProfile> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::Usage(format!("kNN density needs at least 2 points, got {n}")));
    }
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    let k = k.min(n - 1);
    let points = points.as_standard_layout();
    let rows: Vec<&[f64]> = points.rows().into_iter().map(|r| r.to_slice().expect("standard layout")).collect();
    let mut nearest = NearestK::new(n, k);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = squared_euclidean(rows[i], rows[j]);
            nearest.offer(i, d);
            nearest.offer(j, d);
        }
    }
    let values = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = nearest.dist[i * k..(i + 1) * k].iter().map(|d| d.sqrt()).collect();
            row.sort_by(f64::total_cmp);
            row.iter().sum::<f64>() / k as f64
        })
        .collect();
    Ok(DensityProfile::from_values(values, k))
}

/// Nearest-rank quantile: the `⌈q·n⌉`-th smallest value.
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Usage("quantile of an empty list".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Parameter(format!("quantile {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Fraction of the subset at or above the threshold that marks the full
/// set's lowest-density `quantile` share: the `⌈quantile·n⌉`-th largest full
/// value, i.e. a nearest-rank quantile counted from the top.
pub fn low_density_proportion(subset: &[f64], full: &[f64], quantile: f64) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Usage("low-density proportion of an empty subset".into()));
    }
    if full.is_empty() {
        return Err(Error::Usage("low-density proportion against an empty full profile".into()));
    }
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::Parameter(format!("low-density quantile {quantile} outside (0, 1]")));
    }
    let mut sorted = full.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let rank = ((quantile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let threshold = sorted[rank - 1];
    Ok(subset.iter().filter(|&&v| v >= threshold).count() as f64 / subset.len() as f64)
}

/// Step points `(value, fraction ≤ value)` with ties collapsed.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    out
}

fn ecdf_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("value,fraction\n");
    for (v, f) in points {
        let _ = writeln!(out, "{},{}", sig9(*v), sig9(*f));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    /// n × 2 projections of the centred data.
    pub projections: Array2<f64>,
    /// 2 × d principal directions.
    pub components: Array2<f64>,
    pub explained_variance: [f64; 2],
    pub explained_ratio: [f64; 2],
}

const PCA_TOL: f64 = 1e-8;
const PCA_MAX_ITERS: usize = 100_000;

/// Dominant eigenpair of a symmetric PSD matrix by power iteration.
fn power_iteration(c: &Array2<f64>) -> Option<(Array1<f64>, f64)> {
    // start from the largest column: never orthogonal to the top eigenvector
    // unless that column is zero
    let norms: Vec<f64> = c.columns().into_iter().map(|col| col.dot(&col)).collect();
    let j = argmax(&norms);
    if norms[j] == 0.0 {
        return None;
    }
    let mut v = c.column(j).to_owned();
    v /= norms[j].sqrt();
    for _ in 0..PCA_MAX_ITERS {
        let mut w = c.dot(&v);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            return None;
        }
        w /= wn;
        let delta = (&w - &v).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        v = w;
        if delta < PCA_TOL {
            break;
        }
    }
    let lambda = v.dot(&c.dot(&v));
    Some((v, lambda))
}

fn orient(mut v: Array1<f64>) -> Array1<f64> {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = j;
        }
    }
    if v[best] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
    v
}

/// Unit vector orthogonal to `v`, from the first basis vector that survives
/// Gram–Schmidt.
fn orthogonal_to(v: &Array1<f64>) -> Array1<f64> {
    let d = v.len();
    let mut best: Option<Array1<f64>> = None;
    for j in 0..d {
        let mut e = Array1::zeros(d);
        e[j] = 1.0;
        let proj = v[j];
        e.scaled_add(-proj, v);
        let n = e.dot(&e).sqrt();
        if n > 0.5 {
            best = Some(e / n);
            break;
        }
    }
    best.expect("some basis vector is far from any unit v when d ≥ 2")
}

/// Two leading principal components by power iteration with deflation.
pub fn pca2(points: ArrayView2<'_, f64>) -> Result<Pca2> {
    let (n, d) = points.dim();
    if n < 3 || d < 2 {
        return Err(Error::Usage(format!("PCA needs n ≥ 3 and d ≥ 2, got {n}×{d}")));
    }
    let mean = points.mean_axis(Axis(0)).expect("n > 0");
    let centred = &points - &mean;
    let cov = centred.t().dot(&centred) / (n - 1) as f64;
    let trace: f64 = cov.diag().sum();
    let (v1, l1) = match power_iteration(&cov) {
        Some(p) if trace > 0.0 => p,
        _ => return Err(Error::DegenerateVector("zero-variance data".into())),
    };
    let v1 = orient(v1);
    let mut deflated = cov.clone();
    for a in 0..d {
        for b in 0..d {
            deflated[[a, b]] -= l1 * v1[a] * v1[b];
        }
    }
    let scale = deflated.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let v2 = match power_iteration(&deflated) {
        Some((v, _)) if scale > 1e-12 * l1 => {
            // re-orthogonalize against v1 to remove deflation round-off
            let mut v = &v - &(&v1 * v1.dot(&v));
            let nv = v.dot(&v).sqrt();
            v /= nv;
            v
        }
        _ => orthogonal_to(&v1),
    };
    // Rayleigh–Ritz on span{v1, v2}: one exact 2×2 rotation removes the
    // cross-covariance left by the iteration tolerance
    let cv1 = cov.dot(&v1);
    let cv2 = cov.dot(&v2);
    let (b11, b12, b22) = (v1.dot(&cv1), v1.dot(&cv2), v2.dot(&cv2));
    let theta = 0.5 * (2.0 * b12).atan2(b11 - b22);
    let (s, c) = theta.sin_cos();
    let r1 = orient(&v1 * c + &v2 * s);
    let r2 = orient(&v2 * c - &v1 * s);
    let l1 = r1.dot(&cov.dot(&r1));
    let l2 = r2.dot(&cov.dot(&r2)).max(0.0);
    let mut components = Array2::zeros((2, d));
    components.row_mut(0).assign(&r1);
    components.row_mut(1).assign(&r2);
    let projections = centred.dot(&components.t());
    Ok(Pca2 {
        projections,
        components,
        explained_variance: [l1, l2],
        explained_ratio: [l1 / trace, l2 / trace],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelHistogram {
    pub n: usize,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
}

/// Per-class label counts over the whole corpus or the records at `ids`.
pub fn label_histogram(corpus: &Corpus, ids: Option<&[u64]>) -> Result<LabelHistogram> {
    if corpus.n_labels == 0 {
        return Err(Error::Usage("corpus carries no labels".into()));
    }
    let records: Vec<&crate::embedding::EmbeddingPair> = match ids {
        None => corpus.records.iter().collect(),
        Some(ids) => {
            let index: HashMap<u64, usize> = corpus.records.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
            ids.iter()
                .map(|id| {
                    index
                        .get(id)
                        .map(|&i| &corpus.records[i])
                        .ok_or_else(|| Error::Usage(format!("id {id} not in corpus")))
                })
                .collect::<Result<_>>()?
        }
    };
    let mut counts = vec![0usize; corpus.n_labels];
    for r in &records {
        if let Some(mask) = &r.labels {
            for (c, count) in counts.iter_mut().enumerate() {
                if mask.contains(c) {
                    *count += 1;
                }
            }
        }
    }
    let n = records.len();
    let fractions = counts.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect();
    Ok(LabelHistogram { n, counts, fractions })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelDelta {
    pub class: usize,
    pub full_count: usize,
    pub full_fraction: f64,
    pub subset_count: usize,
    pub subset_fraction: f64,
    pub delta: f64,
}

pub fn compare_histograms(full: &LabelHistogram, subset: &LabelHistogram) -> Vec<LabelDelta> {
    (0..full.counts.len())
        .map(|c| LabelDelta {
            class: c,
            full_count: full.counts[c],
            full_fraction: full.fractions[c],
            subset_count: subset.counts[c],
            subset_fraction: subset.fractions[c],
            delta: subset.fractions[c] - full.fractions[c],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetTests {
    pub n_full: usize,
    pub n_subset: usize,
    pub knn_k: usize,
    pub full_mean: f64,
    pub subset_mean: f64,
    pub welch: crate::stats::TestResult,
    pub low_density_quantile: f64,
    pub low_density_proportion: f64,
}

/// Everything the analysis bundle writes out.
#[derive(Clone, Debug)]
pub struct AnalysisBundle {
    pub ids: Vec<u64>,
    pub full: DensityProfile,
    pub subset: Option<DensityProfile>,
    pub tests: Option<SubsetTests>,
    pub pca: Pca2,
    pub labels: Option<Vec<LabelDelta>>,
}

impl AnalysisBundle {
    pub fn knn_csv(&self) -> String {
        let mut out = String::from("id,knn_mean\n");
        for (id, v) in self.ids.iter().zip(&self.full.values) {
            let _ = writeln!(out, "{id},{}", sig9(*v));
        }
        out
    }

    pub fn ecdf_full_csv(&self) -> String {
        ecdf_csv(&ecdf(&self.full.values))
    }

    pub fn ecdf_subset_csv(&self) -> Option<String> {
        self.subset.as_ref().map(|s| ecdf_csv(&ecdf(&s.values)))
    }

    pub fn pca_csv(&self) -> String {
        let mut out = String::from("id,pc1,pc2\n");
        for (id, row) in self.ids.iter().zip(self.pca.projections.rows()) {
            let _ = writeln!(out, "{id},{},{}", sig9(row[0]), sig9(row[1]));
        }
        out
    }

    pub fn tests_json(&self) -> String {
        #[derive(Serialize)]
        struct Tests<'a> {
            full_knn_mean: f64,
            full_knn_sd: f64,
            pca_explained_variance: [f64; 2],
            pca_explained_ratio: [f64; 2],
            subset: Option<&'a SubsetTests>,
        }
        let t = Tests {
            full_knn_mean: self.full.mean,
            full_knn_sd: self.full.sd,
            pca_explained_variance: self.pca.explained_variance,
            pca_explained_ratio: self.pca.explained_ratio,
            subset: self.tests.as_ref(),
        };
        serde_json::to_string_pretty(&t).expect("tests serialize") + "\n"
    }

    pub fn labels_csv(&self) -> Option<String> {
        self.labels.as_ref().map(|rows| {
            let mut out = String::from("class,full_count,full_fraction,subset_count,subset_fraction,delta\n");
            for r in rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.class,
                    r.full_count,
                    sig9(r.full_fraction),
                    r.subset_count,
                    sig9(r.subset_fraction),
                    sig9(r.delta)
                );
            }
            out
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub knn_k: usize,
    pub low_density_quantile: f64,
    pub space: crate::embedding::CurationSpace,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            knn_k: DEFAULT_KNN_K,
            low_density_quantile: DEFAULT_LOW_DENSITY_QUANTILE,
            space: crate::embedding::CurationSpace::Concat,
        }
    }
}

/// Density profile of the full corpus in the configured space; when a subset
/// is given its values are read off the full profile, so both share one
/// neighbourhood structure.
pub fn analyze_corpus(corpus: &Corpus, subset: Option<&[u64]>, config: &AnalysisConfig) -> Result<AnalysisBundle> {
    let points = crate::embedding::unify_all(&corpus.records, config.space)?;
    let full = knn_mean_distance(points.view(), config.knn_k)?;
    let pca = pca2(points.view())?;
    let ids: Vec<u64> = corpus.records.iter().map(|r| r.id).collect();

    let (subset_profile, tests, labels) = match subset {
        None => {
            let labels = if corpus.n_labels > 0 {
                let h = label_histogram(corpus, None)?;
                Some(compare_histograms(&h, &h))
            } else {
                None
            };
            (None, None, labels)
        }
        Some(sel) => {
            let index: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
            let positions: Vec<usize> = sel
                .iter()
                .map(|id| index.get(id).copied().ok_or_else(|| Error::Usage(format!("selected id {id} not in corpus"))))
                .collect::<Result<_>>()?;
            let sub = full.select(&positions);
            let welch = crate::stats::welch_t(&sub.values, &full.values)?;
            let ldp = low_density_proportion(&sub.values, &full.values, config.low_density_quantile)?;
            let tests = SubsetTests {
                n_full: full.values.len(),
                n_subset: sub.values.len(),
                knn_k: full.k,
                full_mean: full.mean,
                subset_mean: sub.mean,
                welch,
                low_density_quantile: config.low_density_quantile,
                low_density_proportion: ldp,
            };
            let labels = if corpus.n_labels > 0 {
                Some(compare_histograms(&label_histogram(corpus, None)?, &label_histogram(corpus, Some(sel))?))
            } else {
                None
            };
            (Some(sub), Some(tests), labels)
        }
    };
    Ok(AnalysisBundle { ids, full, subset: subset_profile, tests, pca, labels })
}
