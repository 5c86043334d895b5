//! Unified multimodal embedding space.
//!
//! Each paired sample carries an image-side and a text-side vector. Curation
//! operates on the concatenation of the two unit-normalized halves, so every
//! unified vector has norm √2 and Euclidean distance orders pairs exactly as
//! cosine similarity does (reversed).

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label bitmask over a corpus-wide number of classes, stored LSB-first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelMask(Vec<u8>);

impl LabelMask {
    pub fn new(n_labels: usize) -> Self {
        LabelMask(vec![0; n_labels.div_ceil(8)])
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        LabelMask(bytes)
    }

    pub fn one_hot(n_labels: usize, class: usize) -> Self {
        let mut mask = Self::new(n_labels);
        mask.set(class);
        mask
    }

    pub fn set(&mut self, class: usize) {
        self.0[class / 8] |= 1 << (class % 8);
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0
            .get(class / 8)
            .is_some_and(|byte| byte & (1 << (class % 8)) != 0)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

/// One paired sample as produced by the upstream encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair {
    pub id: u64,
    pub img: Vec<f64>,
    pub txt: Vec<f64>,
    pub labels: Option<LabelMask>,
}

/// Which modality halves make up the curation space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurationSpace {
    ImageOnly,
    TextOnly,
    #[default]
    Concat,
}

impl std::str::FromStr for CurationSpace {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "image_only" => Ok(CurationSpace::ImageOnly),
            "text_only" => Ok(CurationSpace::TextOnly),
            "concat" => Ok(CurationSpace::Concat),
            other => Err(format!(
                "expected one of image_only, text_only, concat; got `{other}`"
            )),
        }
    }
}

impl CurationSpace {
    pub fn dim(self, d_img: usize, d_txt: usize) -> usize {
        match self {
            CurationSpace::ImageOnly => d_img,
            CurationSpace::TextOnly => d_txt,
            CurationSpace::Concat => d_img + d_txt,
        }
    }
}

/// A vector in the curation space.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedEmbedding(pub Vec<f64>);

impl UnifiedEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Returns `v` scaled to unit Euclidean norm.
///
/// Inputs already at unit norm (to within a few ulps of the squared norm) are
/// returned unchanged, so normalizing twice is a bitwise no-op.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateVector("non-finite entry".into()));
    }
    let sq: f64 = v.iter().map(|x| x * x).sum();
    if sq == 0.0 {
        return Err(Error::DegenerateVector("all-zero vector".into()));
    }
    if (sq - 1.0).abs() <= 4.0 * f64::EPSILON * v.len() as f64 {
        return Ok(v.to_vec());
    }
    let n = sq.sqrt();
    Ok(v.iter().map(|x| x / n).collect())
}

/// Builds the curation-space vector of a pair.
pub fn unify(pair: &EmbeddingPair, mode: CurationSpace) -> Result<UnifiedEmbedding> {
    unify_halves(&pair.img, &pair.txt, mode)
}

pub(crate) fn unify_halves(img: &[f64], txt: &[f64], mode: CurationSpace) -> Result<UnifiedEmbedding> {
    let out = match mode {
        CurationSpace::ImageOnly => l2_normalize(img)?,
        CurationSpace::TextOnly => l2_normalize(txt)?,
        CurationSpace::Concat => {
            let mut v = l2_normalize(img)?;
            v.extend(l2_normalize(txt)?);
            v
        }
    };
    Ok(UnifiedEmbedding(out))
}

/// Stacks the unified embeddings of `pairs` as rows.
pub fn unify_all<'a, I>(pairs: I, mode: CurationSpace) -> Result<Array2<f64>>
where
    I: IntoIterator<Item = &'a EmbeddingPair>,
{
    let mut rows = Vec::new();
    let mut dim = None;
    let mut count = 0;
    for pair in pairs {
        let u = unify(pair, mode).map_err(|e| match e {
            Error::DegenerateVector(why) => {
                Error::DegenerateVector(format!("sample {}: {why}", pair.id))
            }
            other => other,
        })?;
        match dim {
            None => dim = Some(u.0.len()),
            Some(d) if d != u.0.len() => {
                return Err(Error::Shape(format!(
                    "sample {} has unified dimension {}, expected {d}",
                    pair.id,
                    u.0.len()
                )))
            }
            _ => {}
        }
        rows.extend(u.0);
        count += 1;
    }
    Array2::from_shape_vec((count, dim.unwrap_or(0)), rows).map_err(|e| Error::Shape(e.to_string()))
}

#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_euclidean(a, b).sqrt()
}

#[inline]
pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four independent accumulators keep the adds pipelined
    let mut acc = [0.0f64; 4];
    let (ca, ra) = a.as_chunks::<4>();
    let (cb, rb) = b.as_chunks::<4>();
    for (x, y) in ca.iter().zip(cb) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Euclidean distance between every row of `a` and every row of `b`.
pub fn pairwise_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "row dimension {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        let ra = ra.to_slice().expect("standard layout");
        for (j, rb) in b.rows().into_iter().enumerate() {
            out[[i, j]] = euclidean(ra, rb.to_slice().expect("standard layout"));
        }
    }
    Ok(out)
}
