//! Toy contrastive trainer: two linear projection heads with a learnable
//! temperature, symmetric InfoNCE, AdamW with cosine annealing.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ByteReader, Corpus};
use crate::error::{Error, Result};

pub const HEAD_MAGIC: &[u8; 8] = b"XFICHEAD";
pub const TAU_INIT: f64 = 0.01;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 0.5;

/// Linear maps from each modality into a shared space, plus `log τ`.
///
/// Inputs are row vectors: `u = x·W_img + b_img`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub w_img: Array2<f64>,
    pub b_img: Array1<f64>,
    pub w_txt: Array2<f64>,
    pub b_txt: Array1<f64>,
    pub log_tau: f64,
}

impl ProjectionHead {
    /// Gaussian weights with variance `1/d_in`, zero biases, τ = 0.01.
    pub fn random(d_img: usize, d_txt: usize, d_shared: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |rows: usize| {
            let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid sd");
            Array2::from_shape_simple_fn((rows, d_shared), || normal.sample(&mut rng))
        };
        let w_img = init(d_img);
        let w_txt = init(d_txt);
        ProjectionHead {
            w_img,
            b_img: Array1::zeros(d_shared),
            w_txt,
            b_txt: Array1::zeros(d_shared),
            log_tau: TAU_INIT.ln(),
        }
    }

    /// Identity maps on both sides (requires `d_img = d_txt = d`).
    pub fn identity(d: usize) -> Self {
        ProjectionHead {
            w_img: Array2::eye(d),
            b_img: Array1::zeros(d),
            w_txt: Array2::eye(d),
            b_txt: Array1::zeros(d),
            log_tau: TAU_INIT.ln(),
        }
    }

    pub fn d_img(&self) -> usize {
        self.w_img.nrows()
    }

    pub fn d_txt(&self) -> usize {
        self.w_txt.nrows()
    }

    pub fn d_shared(&self) -> usize {
        self.w_img.ncols()
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn n_params(&self) -> usize {
        self.w_img.len() + self.b_img.len() + self.w_txt.len() + self.b_txt.len() + 1
    }

    /// Parameters in checkpoint order: W_img (row-major), b_img, W_txt, b_txt, log τ.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.w_img.iter());
        out.extend(self.b_img.iter());
        out.extend(self.w_txt.iter());
        out.extend(self.b_txt.iter());
        out.push(self.log_tau);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "parameter count");
        let mut it = flat.iter().copied();
        for v in self
            .w_img
            .iter_mut()
            .chain(self.b_img.iter_mut())
            .chain(self.w_txt.iter_mut())
            .chain(self.b_txt.iter_mut())
        {
            *v = it.next().expect("length checked");
        }
        self.log_tau = it.next().expect("length checked");
    }

    fn check_input(x: &ArrayView2<'_, f64>, w: &Array2<f64>, side: &str) -> Result<()> {
        if x.ncols() != w.nrows() {
            return Err(Error::Shape(format!(
                "{side} input has dimension {}, head expects {}",
                x.ncols(),
                w.nrows()
            )));
        }
        Ok(())
    }

    pub fn project_img(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Self::check_input(&x, &self.w_img, "image")?;
        Ok(x.dot(&self.w_img) + &self.b_img)
    }

    pub fn project_txt(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Self::check_input(&x, &self.w_txt, "text")?;
        Ok(x.dot(&self.w_txt) + &self.b_txt)
    }

    /// Projected and row-normalized image embeddings.
    pub fn embed_img(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        normalize_rows(self.project_img(x)?).map(|(u, _)| u)
    }

    pub fn embed_txt(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        normalize_rows(self.project_txt(x)?).map(|(u, _)| u)
    }

    pub fn clamp_tau(&mut self) {
        self.log_tau = self.log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 12 + 8 * self.n_params());
        out.extend_from_slice(HEAD_MAGIC);
        for d in [self.d_img(), self.d_txt(), self.d_shared()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.to_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take("magic", 8)? != HEAD_MAGIC {
            return Err(Error::format("magic", 0, "not a head checkpoint"));
        }
        let d_img = r.u32("d_img")? as usize;
        let d_txt = r.u32("d_txt")? as usize;
        let d_shared = r.u32("d_shared")? as usize;
        let mut head = ProjectionHead {
            w_img: Array2::zeros((d_img, d_shared)),
            b_img: Array1::zeros(d_shared),
            w_txt: Array2::zeros((d_txt, d_shared)),
            b_txt: Array1::zeros(d_shared),
            log_tau: 0.0,
        };
        let expected = 20 + 8 * head.n_params();
        if bytes.len() != expected {
            return Err(Error::format(
                "d_shared",
                16,
                format!("dimensions imply {expected} bytes, file has {}", bytes.len()),
            ));
        }
        let mut flat = Vec::with_capacity(head.n_params());
        for _ in 0..head.n_params() {
            flat.push(r.f64("parameters")?);
        }
        head.set_flat(&flat);
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Gradient of the loss with respect to every head parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub w_img: Array2<f64>,
    pub b_img: Array1<f64>,
    pub w_txt: Array2<f64>,
    pub b_txt: Array1<f64>,
    pub log_tau: f64,
}

impl HeadGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w_img.iter());
        out.extend(self.b_img.iter());
        out.extend(self.w_txt.iter());
        out.extend(self.b_txt.iter());
        out.push(self.log_tau);
        out
    }
}

fn normalize_rows(a: Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = a.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::DegenerateVector(format!("projected row {i} has norm {}", norms[i])));
    }
    let u = &a / &norms.view().insert_axis(Axis(1));
    Ok((u, norms))
}

fn row_lse(s: &Array2<f64>) -> Array1<f64> {
    s.map_axis(Axis(1), |r| {
        let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    })
}

/// Symmetric InfoNCE over unit-norm rows `u` (image) and `v` (text).
pub fn info_nce(u: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if u.dim() != v.dim() || u.nrows() == 0 {
        return Err(Error::Shape(format!("image batch {:?} vs text batch {:?}", u.dim(), v.dim())));
    }
    let s = u.dot(&v.t()) / tau;
    Ok(loss_from_logits(&s))
}

fn loss_from_logits(s: &Array2<f64>) -> f64 {
    let b = s.nrows() as f64;
    let rows = row_lse(s);
    let cols = row_lse(&s.t().to_owned());
    let diag: f64 = s.diag().sum();
    0.5 * ((rows.sum() - diag) / b + (cols.sum() - diag) / b)
}

/// Loss and analytic gradients of InfoNCE composed with projection and row
/// normalization.
pub fn info_nce_grad(
    raw_img: ArrayView2<'_, f64>,
    raw_txt: ArrayView2<'_, f64>,
    head: &ProjectionHead,
) -> Result<(f64, HeadGrads)> {
    if raw_img.nrows() != raw_txt.nrows() || raw_img.nrows() == 0 {
        return Err(Error::Shape(format!(
            "batch sizes {} (image) vs {} (text)",
            raw_img.nrows(),
            raw_txt.nrows()
        )));
    }
    let (u, ru) = normalize_rows(head.project_img(raw_img)?)?;
    let (v, rv) = normalize_rows(head.project_txt(raw_txt)?)?;
    let tau = head.tau();
    let bsz = u.nrows();
    let s = u.dot(&v.t()) / tau;
    let loss = loss_from_logits(&s);

    // dL/dS = (softmax_rows − I + softmax_cols − I) / 2B
    let row_l = row_lse(&s);
    let col_l = row_lse(&s.t().to_owned());
    let scale = 0.5 / bsz as f64;
    let mut g = Array2::<f64>::zeros((bsz, bsz));
    for i in 0..bsz {
        for j in 0..bsz {
            let pr = (s[[i, j]] - row_l[i]).exp();
            let pc = (s[[i, j]] - col_l[j]).exp();
            let eye = if i == j { 2.0 } else { 0.0 };
            g[[i, j]] = scale * (pr + pc - eye);
        }
    }
    let d_log_tau = -(&g * &s).sum();
    let du = g.dot(&v) / tau;
    let dv = g.t().dot(&u) / tau;

    let back = |unit: &Array2<f64>, grad: Array2<f64>, norms: &Array1<f64>| {
        let radial = (unit * &grad).sum_axis(Axis(1)).insert_axis(Axis(1));
        (grad - unit * &radial) / &norms.view().insert_axis(Axis(1))
    };
    let da = back(&u, du, &ru);
    let db = back(&v, dv, &rv);

    Ok((
        loss,
        HeadGrads {
            w_img: raw_img.t().dot(&da),
            b_img: da.sum_axis(Axis(0)),
            w_txt: raw_txt.t().dot(&db),
            b_txt: db.sum_axis(Axis(0)),
            log_tau: d_log_tau,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// `base · ½(1 + cos(π t / T))`.
pub fn cosine_lr(base: f64, t: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos())
}

/// AdamW moments and step counter for a flat parameter vector.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
    decay: Vec<bool>,
}

impl OptimizerState {
    pub fn new(n_params: usize, config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            steps: 0,
            decay: vec![true; n_params],
        }
    }

    /// Moments for a head; the temperature is excluded from weight decay.
    pub fn for_head(head: &ProjectionHead, config: AdamWConfig) -> Self {
        let mut state = Self::new(head.n_params(), config);
        *state.decay.last_mut().expect("head has parameters") = false;
        state
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One AdamW update at schedule position `t` of `total`; returns the
    /// learning rate used.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], t: u64, total: u64) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if t >= total {
            return Err(Error::Parameter(format!("schedule step {t} not below horizon {total}")));
        }
        let c = self.config;
        let lr = cosine_lr(c.lr, t, total);
        self.steps += 1;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            if self.decay[i] {
                params[i] -= lr * c.weight_decay * params[i];
            }
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        if self.m.iter().chain(&self.v).chain(params.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure("optimizer state became non-finite".into()));
        }
        Ok(lr)
    }
}

/// Applies one AdamW step to `head`, then clamps τ.
pub fn optimizer_step(
    state: &mut OptimizerState,
    head: &mut ProjectionHead,
    grads: &HeadGrads,
    t: u64,
    total: u64,
) -> Result<f64> {
    let mut flat = head.to_flat();
    let lr = state.step(&mut flat, &grads.to_flat(), t, total)?;
    head.set_flat(&flat);
    head.clamp_tau();
    Ok(lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Head plus optimizer advancing along a fixed cosine horizon.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub head: ProjectionHead,
    state: OptimizerState,
    total_steps: u64,
    step: u64,
}

impl Trainer {
    pub fn new(head: ProjectionHead, config: AdamWConfig, total_steps: u64) -> Self {
        let state = OptimizerState::for_head(&head, config);
        Trainer { head, state, total_steps, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One InfoNCE step on a batch of raw pairs. Returns the pre-update loss
    /// and the learning rate used.
    pub fn train_step(&mut self, img: ArrayView2<'_, f64>, txt: ArrayView2<'_, f64>) -> Result<(f64, f64)> {
        let (loss, grads) = info_nce_grad(img, txt, &self.head)?;
        let lr = optimizer_step(&mut self.state, &mut self.head, &grads, self.step, self.total_steps)?;
        self.step += 1;
        Ok((loss, lr))
    }

    pub fn into_head(self) -> ProjectionHead {
        self.head
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub d_shared: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 120,
            d_shared: 32,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub head: ProjectionHead,
    pub curve: Vec<LossPoint>,
}

/// Seeded-shuffled batches of `n` indices for one epoch. A trailing batch of
/// a single sample is folded into the previous one.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

pub(crate) fn stack_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Array2<f64> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, dim), data).expect("rows share the stated dimension")
}

/// Trains a head over `ids` (or the whole corpus) for `config.epochs` epochs.
///
/// Starts from `init` when given, otherwise from a seeded random head.
pub fn train_head(
    corpus: &Corpus,
    ids: Option<&[u64]>,
    config: &TrainConfig,
    init: Option<ProjectionHead>,
) -> Result<TrainOutcome> {
    let data = match ids {
        Some(ids) => corpus.subset(ids)?,
        None => corpus.clone(),
    };
    if data.is_empty() {
        return Err(Error::Usage("cannot train on an empty selection".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Usage("batch_size and epochs must be positive".into()));
    }
    let head = init.unwrap_or_else(|| ProjectionHead::random(data.d_img, data.d_txt, config.d_shared, config.seed));
    let per_epoch = epoch_batches(data.len(), config.batch_size, config.seed, 0).len() as u64;
    let mut trainer = Trainer::new(head, config.optimizer, per_epoch * config.epochs);
    let mut curve = Vec::with_capacity((per_epoch * config.epochs) as usize);
    for epoch in 0..config.epochs {
        for batch in epoch_batches(data.len(), config.batch_size, config.seed, epoch) {
            let img = stack_rows(batch.iter().map(|&i| data.records[i].img.as_slice()), data.d_img);
            let txt = stack_rows(batch.iter().map(|&i| data.records[i].txt.as_slice()), data.d_txt);
            let step = trainer.step_count();
            let (loss, lr) = trainer.train_step(img.view(), txt.view())?;
            curve.push(LossPoint { step, epoch, lr, loss });
        }
    }
    Ok(TrainOutcome { head: trainer.into_head(), curve })
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("step,epoch,lr,loss\n");
    for p in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.step,
            p.epoch,
            crate::fmt::sig9(p.lr),
            crate::fmt::sig9(p.loss)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingPair;
    use ndarray::array;
    use rand::Rng;

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((b, d), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let u = array![[0.6, 0.8]];
        assert_eq!(info_nce(u.view(), u.view(), 0.07).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_pair_closed_form() {
        let u = array![[1.0, 0.0], [0.0, 1.0]];
        let loss = info_nce(u.view(), u.view(), 1.0).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn equal_similarities_give_ln_b() {
        let u = Array2::from_elem((5, 3), 1.0 / 3f64.sqrt());
        let loss = info_nce(u.view(), u.view(), 0.3).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_positive_tau() {
        let u = array![[1.0, 0.0]];
        assert!(matches!(info_nce(u.view(), u.view(), 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn loss_is_permutation_invariant_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (u, _) = normalize_rows(random_batch(&mut rng, 6, 4)).unwrap();
        let (v, _) = normalize_rows(random_batch(&mut rng, 6, 4)).unwrap();
        let base = info_nce(u.view(), v.view(), 0.2).unwrap();
        assert!(base >= 0.0);
        let perm = [3, 0, 5, 1, 4, 2];
        let up = u.select(Axis(0), &perm);
        let vp = v.select(Axis(0), &perm);
        assert!((info_nce(up.view(), vp.view(), 0.2).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn single_pair_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = ProjectionHead::random(3, 4, 2, 0);
        let (loss, g) = info_nce_grad(random_batch(&mut rng, 1, 3).view(), random_batch(&mut rng, 1, 4).view(), &head).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.to_flat().iter().all(|&x| x == 0.0));
    }

    fn loss_at(head: &ProjectionHead, img: &Array2<f64>, txt: &Array2<f64>) -> f64 {
        let u = head.embed_img(img.view()).unwrap();
        let v = head.embed_txt(txt.view()).unwrap();
        info_nce(u.view(), v.view(), head.tau()).unwrap()
    }

    pub(crate) fn max_rel_fd_error(head: &ProjectionHead, img: &Array2<f64>, txt: &Array2<f64>) -> f64 {
        let (_, g) = info_nce_grad(img.view(), txt.view(), head).unwrap();
        let analytic = g.to_flat();
        let base = head.to_flat();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut plus = head.clone();
            let mut p = base.clone();
            p[i] += h;
            plus.set_flat(&p);
            let mut minus = head.clone();
            p[i] -= 2.0 * h;
            minus.set_flat(&p);
            let numeric = (loss_at(&plus, img, txt) - loss_at(&minus, img, txt)) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs());
            let err = if scale > 1e-6 { (analytic[i] - numeric).abs() / scale } else { (analytic[i] - numeric).abs() };
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut head = ProjectionHead::random(16, 16, 8, 2);
        head.log_tau = 0.3f64.ln();
        let img = random_batch(&mut rng, 8, 16);
        let txt = random_batch(&mut rng, 8, 16);
        assert!(max_rel_fd_error(&head, &img, &txt) < 1e-4);

        // duplicated pairs: different loss, gradient still exact
        let img2 = ndarray::concatenate![Axis(0), img, img];
        let txt2 = ndarray::concatenate![Axis(0), txt, txt];
        assert!((loss_at(&head, &img2, &txt2) - loss_at(&head, &img, &txt)).abs() > 1e-6);
        assert!(max_rel_fd_error(&head, &img2, &txt2) < 1e-4);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-18);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut st = OptimizerState::new(3, cfg);
        let mut p = vec![1.0, -2.0, 0.5];
        for t in 0..4 {
            st.step(&mut p, &[0.0; 3], t, 5).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert!(st.step(&mut p, &[0.0; 3], 5, 5).is_err());
    }

    #[test]
    fn scalar_trace_matches_hand_computation() {
        // lr 0.1, wd 0.01, T = 4; grads 1.0, -0.5, 2.0
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut st = OptimizerState::new(1, cfg);
        let mut p = [1.0];
        let grads = [1.0, -0.5, 2.0];

        let mut want = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let lr = 0.1 * 0.5 * (1.0 + (PI * t as f64 / 4.0).cos());
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            want = want * (1.0 - lr * 0.01) - lr * mh / (vh.sqrt() + 1e-8);
            st.step(&mut p, &[*g], t as u64, 4).unwrap();
            assert!((p[0] - want).abs() < 1e-15, "step {t}: {} vs {want}", p[0]);
        }
        // first step by hand: 1 − 0.1·0.01 − 0.1·1/(1+1e-8)
        let mut st = OptimizerState::new(1, cfg);
        let mut p = [1.0];
        st.step(&mut p, &[1.0], 0, 4).unwrap();
        assert!((p[0] - (1.0 - 0.001 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn tau_is_clamped() {
        let mut head = ProjectionHead::random(2, 2, 2, 0);
        let cfg = AdamWConfig { lr: 50.0, ..Default::default() };
        let mut st = OptimizerState::for_head(&head, cfg);
        let mut grads = HeadGrads {
            w_img: Array2::zeros((2, 2)),
            b_img: Array1::zeros(2),
            w_txt: Array2::zeros((2, 2)),
            b_txt: Array1::zeros(2),
            log_tau: 1.0,
        };
        optimizer_step(&mut st, &mut head, &grads, 0, 10).unwrap();
        assert!((head.tau() - TAU_MIN).abs() < 1e-15);
        grads.log_tau = -1.0;
        for t in 1..10 {
            optimizer_step(&mut st, &mut head, &grads, t, 10).unwrap();
        }
        assert!(head.tau() <= TAU_MAX + 1e-15 && head.tau() >= TAU_MIN - 1e-15);
    }

    fn toy_corpus(n: usize, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Corpus::new(6, 6, 0);
        for id in 0..n as u64 {
            let img: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let txt = img.iter().map(|x| x + rng.random_range(-0.1..0.1)).collect();
            c.records.push(EmbeddingPair { id, img, txt, labels: None });
        }
        c
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let corpus = toy_corpus(64, 5);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            d_shared: 6,
            seed: 3,
            optimizer: AdamWConfig { lr: 0.05, ..Default::default() },
        };
        let a = train_head(&corpus, None, &cfg, None).unwrap();
        assert!(a.curve.last().unwrap().loss < a.curve[0].loss);
        let b = train_head(&corpus, None, &cfg, None).unwrap();
        assert_eq!(loss_curve_csv(&a.curve), loss_curve_csv(&b.curve));
        assert_eq!(a.head, b.head);
        assert!(a.head.tau() >= TAU_MIN && a.head.tau() <= TAU_MAX);
        assert!(train_head(&corpus, Some(&[]), &cfg, None).is_err());
    }

    #[test]
    fn head_checkpoint_round_trip() {
        let head = ProjectionHead::random(3, 5, 2, 9);
        let bytes = head.to_bytes();
        assert_eq!(&bytes[..8], b"XFICHEAD");
        assert_eq!(bytes.len(), 20 + 8 * (6 + 2 + 10 + 2 + 1));
        let back = ProjectionHead::from_bytes(&bytes).unwrap();
        assert_eq!(back, head);
        assert!(ProjectionHead::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let batches = epoch_batches(9, 4, 0, 0);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
    }
}
