//! Zero-shot evaluation: prompt-pair classification, macro AUROC/AUPRC and
//! cross-modal Recall@1.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embedding::l2_normalize;
use crate::error::{Error, Result};
use crate::trainer::{stack_rows, ProjectionHead};

/// Positive ("⟨class⟩") and negative ("no ⟨class⟩") text-side prompt embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub class: String,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub prompts: Vec<PromptPair>,
}

impl PromptSet {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("prompts", e.column() as u64, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prompts serialize") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-way softmax of `(s_pos/τ, s_neg/τ)`, positive component.
fn two_way_softmax(s_pos: f64, s_neg: f64, tau: f64) -> f64 {
    1.0 / (1.0 + ((s_neg - s_pos) / tau).exp())
}

/// Probability that `image_emb` shows `prompt.class`.
///
/// With a head, the image goes through the image projection and the prompts
/// through the text projection; everything is normalized before taking
/// cosine similarities.
pub fn zero_shot_prob(
    image_emb: &[f64],
    prompt: &PromptPair,
    head: Option<&ProjectionHead>,
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let (img, pos, neg) = match head {
        None => (image_emb.to_vec(), prompt.pos.clone(), prompt.neg.clone()),
        Some(h) => {
            let img = h.project_img(ndarray::ArrayView2::from_shape((1, image_emb.len()), image_emb)
                .map_err(|e| Error::Shape(e.to_string()))?)?;
            let txt = stack_rows([prompt.pos.as_slice(), prompt.neg.as_slice()].into_iter(), prompt.pos.len());
            let txt = h.project_txt(txt.view())?;
            (img.row(0).to_vec(), txt.row(0).to_vec(), txt.row(1).to_vec())
        }
    };
    if img.len() != pos.len() || pos.len() != neg.len() {
        return Err(Error::Shape(format!(
            "image embedding {} vs prompt embeddings {}/{}",
            img.len(),
            pos.len(),
            neg.len()
        )));
    }
    let img = l2_normalize(&img)?;
    let pos = l2_normalize(&pos)?;
    let neg = l2_normalize(&neg)?;
    Ok(two_way_softmax(dot(&img, &pos), dot(&img, &neg), tau))
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Parameter("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve with pair-counting semantics: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (n_pos, n_neg) = check_binary(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both positives and negatives".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the positive rank sum, using midranks over ties
    let mut rank_sum_x2 = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank_x2 = (i + 1 + j + 1) as f64;
        let positives = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum_x2 += midrank_x2 * positives as f64;
        i = j + 1;
    }
    let p = n_pos as f64;
    let u_x2 = rank_sum_x2 - p * (p + 1.0);
    Ok(u_x2 / (2.0 * p * n_neg as f64))
}

/// Average precision over a descending-score sweep with tied scores taken
/// as one step: `Σ (R_k − R_{k−1}) · P_k`.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (n_pos, _) = check_binary(scores, labels)?;
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Unweighted mean over defined values; returns the mean and how many
/// classes were excluded as undefined.
pub fn macro_average(per_class: &[Option<f64>]) -> Result<(f64, usize)> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no class has a defined value".into()));
    }
    let excluded = per_class.len() - defined.len();
    Ok((defined.iter().sum::<f64>() / defined.len() as f64, excluded))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrievalDirection {
    /// Rows are image queries ranked against text candidates.
    ImageToText,
    /// Columns are text queries ranked against image candidates.
    TextToImage,
}

/// Fraction of queries whose top-1 candidate (ties to the smallest index) is
/// the paired item on the diagonal.
pub fn recall_at_1(sim: ArrayView2<'_, f64>, direction: RetrievalDirection) -> Result<f64> {
    let (n, m) = sim.dim();
    if n != m {
        return Err(Error::Shape(format!("similarity matrix is {n}x{m}, expected square")));
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("empty similarity matrix".into()));
    }
    let lanes = match direction {
        RetrievalDirection::ImageToText => sim.rows(),
        RetrievalDirection::TextToImage => sim.columns(),
    };
    let hits = lanes
        .into_iter()
        .enumerate()
        .filter(|(q, lane)| {
            let mut best = 0;
            for (c, &v) in lane.iter().enumerate() {
                if v > lane[best] {
                    best = c;
                }
            }
            best == *q
        })
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: String,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub tau: f64,
    pub macro_auroc: Option<f64>,
    pub macro_auprc: Option<f64>,
    pub auroc_excluded: usize,
    pub auprc_excluded: usize,
    pub recall_at_1_image_to_text: f64,
    pub recall_at_1_text_to_image: f64,
    pub classes: Vec<ClassMetrics>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize") + "\n"
    }

    pub fn per_class_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(crate::fmt::sig9).unwrap_or_default();
        let mut out = String::from("class,auroc,auprc,n_pos,n_neg\n");
        for c in &self.classes {
            let _ = writeln!(out, "{},{},{},{},{}", c.class, opt(c.auroc), opt(c.auprc), c.n_pos, c.n_neg);
        }
        out
    }
}

fn normalized_rows(m: Array2<f64>) -> Result<Array2<f64>> {
    let mut m = m;
    for mut row in m.rows_mut() {
        let n = l2_normalize(row.as_slice().expect("owned rows"))?;
        row.assign(&Array1::from(n));
    }
    Ok(m)
}

/// Zero-shot classification over every prompt class and Recall@1 over the
/// corpus pairs. `tau` defaults to the head's trained temperature.
pub fn evaluate(corpus: &Corpus, head: &ProjectionHead, prompts: &PromptSet, tau: Option<f64>) -> Result<MetricReport> {
    if corpus.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty corpus".into()));
    }
    let tau = tau.unwrap_or_else(|| head.tau());
    let img = stack_rows(corpus.records.iter().map(|r| r.img.as_slice()), corpus.d_img);
    let txt = stack_rows(corpus.records.iter().map(|r| r.txt.as_slice()), corpus.d_txt);
    let u = normalized_rows(head.project_img(img.view())?)?;
    let v = normalized_rows(head.project_txt(txt.view())?)?;

    let mut classes = Vec::with_capacity(prompts.prompts.len());
    for (c, prompt) in prompts.prompts.iter().enumerate() {
        let pair = stack_rows([prompt.pos.as_slice(), prompt.neg.as_slice()].into_iter(), corpus.d_txt);
        let pn = normalized_rows(head.project_txt(pair.view())?)?;
        let s_pos = u.dot(&pn.row(0));
        let s_neg = u.dot(&pn.row(1));
        let scores: Vec<f64> = s_pos.iter().zip(s_neg.iter()).map(|(&p, &n)| two_way_softmax(p, n, tau)).collect();
        let labels: Vec<bool> = corpus
            .records
            .iter()
            .map(|r| r.labels.as_ref().is_some_and(|l| l.contains(c)))
            .collect();
        let n_pos = labels.iter().filter(|&&l| l).count();
        classes.push(ClassMetrics {
            class: prompt.class.clone(),
            auroc: auroc(&scores, &labels).ok(),
            auprc: auprc(&scores, &labels).ok(),
            n_pos,
            n_neg: labels.len() - n_pos,
        });
    }
    let aurocs: Vec<Option<f64>> = classes.iter().map(|c| c.auroc).collect();
    let auprcs: Vec<Option<f64>> = classes.iter().map(|c| c.auprc).collect();
    let (macro_auroc, auroc_excluded) = match macro_average(&aurocs) {
        Ok((m, e)) => (Some(m), e),
        Err(_) => (None, aurocs.len()),
    };
    let (macro_auprc, auprc_excluded) = match macro_average(&auprcs) {
        Ok((m, e)) => (Some(m), e),
        Err(_) => (None, auprcs.len()),
    };

    let sim = u.dot(&v.t());
    Ok(MetricReport {
        n_samples: corpus.len(),
        tau,
        macro_auroc,
        macro_auprc,
        auroc_excluded,
        auprc_excluded,
        recall_at_1_image_to_text: recall_at_1(sim.view(), RetrievalDirection::ImageToText)?,
        recall_at_1_text_to_image: recall_at_1(sim.view(), RetrievalDirection::TextToImage)?,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pp(pos: Vec<f64>, neg: Vec<f64>) -> PromptPair {
        PromptPair { class: "c".into(), pos, neg }
    }

    #[test]
    fn zero_shot_examples() {
        let p = zero_shot_prob(&[1.0, 0.0], &pp(vec![1.0, 0.0], vec![0.0, 1.0]), None, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p - e / (e + 1.0)).abs() < 1e-12);
        assert!((p - 0.7311).abs() < 1e-4);

        let p = zero_shot_prob(&[0.3, 0.7], &pp(vec![1.0, 2.0], vec![1.0, 2.0]), None, 0.1).unwrap();
        assert_eq!(p, 0.5);

        let a = zero_shot_prob(&[0.3, 0.7], &pp(vec![1.0, 0.2], vec![-0.4, 1.0]), None, 0.3).unwrap();
        let b = zero_shot_prob(&[0.3, 0.7], &pp(vec![-0.4, 1.0], vec![1.0, 0.2]), None, 0.3).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);

        assert!(matches!(
            zero_shot_prob(&[1.0, 0.0, 0.0], &pp(vec![1.0, 0.0], vec![0.0, 1.0]), None, 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_shot_through_identity_head() {
        let head = ProjectionHead::identity(2);
        let p = zero_shot_prob(&[2.0, 0.0], &pp(vec![3.0, 0.0], vec![0.0, 1.0]), Some(&head), 1.0).unwrap();
        assert!((p - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn zero_shot_monotone_in_positive_similarity() {
        // neg fixed at e2; rotate pos towards img = e1 in the e1/e3 plane
        let mut last = 0.0;
        for step in 0..=10 {
            let a = step as f64 / 10.0 * std::f64::consts::FRAC_PI_2;
            let pos = vec![a.sin(), 0.0, a.cos()];
            let p = zero_shot_prob(&[1.0, 0.0, 0.0], &pp(pos, vec![0.0, 1.0, 0.0]), None, 0.5).unwrap();
            assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.2, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let (mut p, mut n) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            if li {
                p += 1.0;
            } else {
                n += 1.0;
            }
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / (p * n)
    }

    #[test]
    fn auroc_matches_pair_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.random_range(2..=200);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 / 4.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            assert_eq!(auroc(&scores, &labels).unwrap(), auroc_pairs(&scores, &labels));
        }
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_transform(
            data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| (d.0 * 4.0).round() / 4.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let t: Vec<f64> = scores.iter().map(|s| s.powi(3) + 2.0 * s).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&t, &labels).unwrap());
        }
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        for n in 2..10 {
            let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
            let mut labels = vec![false; n];
            labels[n - 1] = true;
            assert!((auprc(&scores, &labels).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        }
        assert!(matches!(auprc(&[0.1], &[false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn macro_average_examples() {
        assert_eq!(macro_average(&[Some(1.0), Some(0.5)]).unwrap(), (0.75, 0));
        assert_eq!(macro_average(&[Some(0.8)]).unwrap(), (0.8, 0));
        let (m, ex) = macro_average(&[Some(0.9), None, Some(0.7)]).unwrap();
        assert!((m - 0.8).abs() < 1e-15);
        assert_eq!(ex, 1);
        assert!(macro_average(&[None, None]).is_err());
    }

    #[test]
    fn recall_examples() {
        let eye = Array2::<f64>::eye(5) + 0.1;
        assert_eq!(recall_at_1(eye.view(), RetrievalDirection::ImageToText).unwrap(), 1.0);
        let flat = Array2::from_elem((4, 4), 0.3);
        assert_eq!(recall_at_1(flat.view(), RetrievalDirection::ImageToText).unwrap(), 0.25);
        assert_eq!(recall_at_1(flat.view(), RetrievalDirection::TextToImage).unwrap(), 0.25);
        let rect = Array2::<f64>::zeros((2, 3));
        assert!(matches!(recall_at_1(rect.view(), RetrievalDirection::ImageToText), Err(Error::Shape(_))));
        let m = array![[0.9, 0.1], [0.95, 0.2]];
        assert_eq!(recall_at_1(m.view(), RetrievalDirection::ImageToText).unwrap(), 0.5);
        assert_eq!(recall_at_1(m.view(), RetrievalDirection::TextToImage).unwrap(), 0.5);
    }

    #[test]
    fn recall_is_invariant_under_joint_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 30;
        // continuous entries, so no ties that a permutation could reorder
        let sim = Array2::from_shape_simple_fn((n, n), || rng.random::<f64>());
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permuted = Array2::from_shape_fn((n, n), |(i, j)| sim[[perm[i], perm[j]]]);
        for dir in [RetrievalDirection::ImageToText, RetrievalDirection::TextToImage] {
            assert_eq!(recall_at_1(sim.view(), dir).unwrap(), recall_at_1(permuted.view(), dir).unwrap());
        }
    }

    #[test]
    fn report_csv_layout() {
        let report = MetricReport {
            n_samples: 3,
            tau: 0.5,
            macro_auroc: Some(0.75),
            macro_auprc: None,
            auroc_excluded: 0,
            auprc_excluded: 1,
            recall_at_1_image_to_text: 1.0,
            recall_at_1_text_to_image: 1.0,
            classes: vec![ClassMetrics { class: "a".into(), auroc: Some(0.75), auprc: None, n_pos: 1, n_neg: 2 }],
        };
        assert_eq!(report.per_class_csv(), "class,auroc,auprc,n_pos,n_neg\na,0.75,,1,2\n");
        let json = report.to_json();
        let keys: Vec<usize> = ["n_samples", "tau", "macro_auroc", "recall_at_1_text_to_image", "classes"]
            .iter()
            .map(|k| json.find(k).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
    }
}
