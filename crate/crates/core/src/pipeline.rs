//! File-to-file stages: generate, curate, train, eval and analyze.

use std::path::{Path, PathBuf};

use crate::analysis::{analyze_corpus, AnalysisBundle};
use crate::config::EngineConfig;
use crate::corpus::{read_corpus, write_corpus};
use crate::curation::{run_curation, CuratedSelection, CurationMode, CurationOutcome};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, PromptSet};
use crate::synth::{generate_corpus, generate_prompts, write_manifest, MixtureSpec};
use crate::trainer::{loss_curve_csv, train_head, LossPoint, ProjectionHead};

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `<corpus>.manifest.json`
pub fn manifest_path(corpus: &Path) -> PathBuf {
    let mut name = corpus.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Writes the corpus, its manifest and (optionally) the prompt file.
pub fn generate(spec: &MixtureSpec, corpus_out: &Path, prompts_out: Option<&Path>) -> Result<()> {
    let corpus = generate_corpus(spec)?;
    write_corpus(corpus_out, &corpus)?;
    write_manifest(&manifest_path(corpus_out), spec)?;
    if let Some(p) = prompts_out {
        generate_prompts(spec)?.save(p)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Frozen,
    Joint,
}

impl std::str::FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "frozen" => Ok(RunMode::Frozen),
            "joint" => Ok(RunMode::Joint),
            other => Err(format!("expected frozen or joint, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CurateOutputs<'a> {
    pub selection: Option<&'a Path>,
    pub prototypes: Option<&'a Path>,
    pub stats: Option<&'a Path>,
    /// Joint mode only.
    pub head: Option<&'a Path>,
}

fn joint_mode(config: &EngineConfig, d_img: usize, d_txt: usize, init: Option<ProjectionHead>) -> CurationMode {
    let head =
        init.unwrap_or_else(|| ProjectionHead::random(d_img, d_txt, config.train.d_shared, config.train.seed));
    CurationMode::Joint { head, optimizer: config.train.optimizer }
}

/// One curation epoch over the corpus file.
pub fn curate(
    config: &EngineConfig,
    corpus_path: &Path,
    mode: RunMode,
    init_head: Option<ProjectionHead>,
    out: &CurateOutputs<'_>,
) -> Result<CurationOutcome> {
    config.validate()?;
    let corpus = read_corpus(corpus_path)?;
    let mode = match mode {
        RunMode::Frozen => CurationMode::Frozen,
        RunMode::Joint => joint_mode(config, corpus.d_img, corpus.d_txt, init_head),
    };
    let outcome = run_curation(&corpus, &config.curation, mode)?;
    if let Some(p) = out.selection {
        outcome.selection.write_csv(p)?;
    }
    if let Some(p) = out.prototypes {
        outcome.bank.save(p)?;
    }
    if let Some(p) = out.stats {
        write_text(p, &outcome.selection.stats_json())?;
    }
    if let (Some(p), Some(h)) = (out.head, outcome.head.as_ref()) {
        h.save(p)?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub head: ProjectionHead,
    pub curve: Vec<LossPoint>,
    /// The selection curated on the fly when none was given.
    pub selection: Option<CuratedSelection>,
}

/// Trains a head. With a selection file, every epoch reuses that selection.
/// Without one, the first epoch is a joint curation pass and the remaining
/// epochs reuse what it selected.
pub fn train(
    config: &EngineConfig,
    corpus_path: &Path,
    selection_path: Option<&Path>,
    head_out: &Path,
    loss_out: Option<&Path>,
    selection_out: Option<&Path>,
) -> Result<TrainResult> {
    config.validate()?;
    let corpus = read_corpus(corpus_path)?;
    let result = match selection_path {
        Some(p) => {
            let ids = CuratedSelection::read_csv(p)?.ids();
            let out = train_head(&corpus, Some(&ids), &config.train, None)?;
            TrainResult { head: out.head, curve: out.curve, selection: None }
        }
        None => {
            let joint = run_curation(&corpus, &config.curation, joint_mode(config, corpus.d_img, corpus.d_txt, None))?;
            let head = joint.head.expect("joint mode returns a head");
            let mut curve = joint.losses;
            let ids = joint.selection.ids();
            let head = if config.train.epochs > 1 && !ids.is_empty() {
                let reuse = crate::trainer::TrainConfig { epochs: config.train.epochs - 1, ..config.train.clone() };
                let out = train_head(&corpus, Some(&ids), &reuse, Some(head))?;
                let offset = curve.len() as u64;
                curve.extend(out.curve.into_iter().map(|p| LossPoint { step: p.step + offset, epoch: p.epoch + 1, ..p }));
                out.head
            } else {
                head
            };
            TrainResult { head, curve, selection: Some(joint.selection) }
        }
    };
    result.head.save(head_out)?;
    if let Some(p) = loss_out {
        write_text(p, &loss_curve_csv(&result.curve))?;
    }
    if let (Some(p), Some(sel)) = (selection_out, result.selection.as_ref()) {
        sel.write_csv(p)?;
    }
    Ok(result)
}

/// Zero-shot classification and retrieval of a head on a corpus file.
pub fn eval(
    config: &EngineConfig,
    corpus_path: &Path,
    head_path: &Path,
    prompts_path: &Path,
    report_out: &Path,
    per_class_out: Option<&Path>,
) -> Result<MetricReport> {
    config.validate()?;
    let corpus = read_corpus(corpus_path)?;
    let head = ProjectionHead::load(head_path)?;
    let prompts = PromptSet::load(prompts_path)?;
    let report = evaluate(&corpus, &head, &prompts, config.zero_shot_tau)?;
    write_text(report_out, &report.to_json())?;
    if let Some(p) = per_class_out {
        write_text(p, &report.per_class_csv())?;
    }
    Ok(report)
}

/// Writes the analysis bundle into `out_dir` (created if missing).
pub fn analyze(
    config: &EngineConfig,
    corpus_path: &Path,
    selection_path: Option<&Path>,
    out_dir: &Path,
) -> Result<AnalysisBundle> {
    config.validate()?;
    let corpus = read_corpus(corpus_path)?;
    let ids = selection_path.map(|p| CuratedSelection::read_csv(p).map(|s| s.ids())).transpose()?;
    let mut analysis = config.analysis;
    analysis.space = config.curation.curation_space;
    let bundle = analyze_corpus(&corpus, ids.as_deref(), &analysis)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&out_dir.join("knn_profile.csv"), &bundle.knn_csv())?;
    write_text(&out_dir.join("ecdf_full.csv"), &bundle.ecdf_full_csv())?;
    if let Some(s) = bundle.ecdf_subset_csv() {
        write_text(&out_dir.join("ecdf_subset.csv"), &s)?;
    }
    write_text(&out_dir.join("pca2.csv"), &bundle.pca_csv())?;
    write_text(&out_dir.join("tests.json"), &bundle.tests_json())?;
    if let Some(s) = bundle.labels_csv() {
        write_text(&out_dir.join("labels.csv"), &s)?;
    }
    Ok(bundle)
}
