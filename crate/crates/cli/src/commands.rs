//! The pipeline steps behind each subcommand. Every step writes into an
//! output directory and every manifest it emits carries a fingerprint.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use pvseg_core::annotation::{apply_sparse_ignore, SparseAnnotation};
use pvseg_core::eval::{aggregate_report, case_metrics, stratified_kfold, ClassSel, FoldAssignment, Grouping, MetricsReport};
use pvseg_core::manifest::{canonical_json, CaseEntry, Manifest, Provenance};
use pvseg_core::nifti::{read_labels, read_volume, write_labels, write_volume};
use pvseg_core::phantom::{phantom_cohort, CohortConfig, PhantomConfig};
use pvseg_core::preprocess::{preprocess_case, CaseInputs};
use pvseg_net::checkpoint::{self, Checkpoint};
use pvseg_net::data::{load_train_case, SPARSE_AXIS};
use pvseg_net::pseudo::{check_channels, merge_training_set, pseudo_label_round};
use pvseg_net::sampling::TrainCase;
use pvseg_net::train::EpochRecord;
use pvseg_net::{train, TrainOutcome, TrainRequest};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{sha256_hex, PipelineConfig};
use crate::error::{CliError, Result};
use crate::log;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FOLDS_FILE: &str = "folds.json";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.ckpt";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| CliError::io(p, e))
}

/// Logs failures and turns them into a partial-failure error.
fn finish(failures: &[(String, String)], total: usize) -> Result<()> {
    for (id, reason) in failures {
        log::error("case_failed", json!({"id": id, "reason": reason}));
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial {
            failed: failures.len(),
            total,
        })
    }
}

fn preprocess_one(case: &CaseEntry, cfg: &PipelineConfig, out: &Path) -> Result<CaseEntry> {
    let mut labels = case.labels.as_ref().map(read_labels).transpose()?;
    // Sparse slices are resolved before any resampling moves them.
    if let (Some(l), Some(slices)) = (&labels, &case.annotated_slices) {
        labels = Some(apply_sparse_ignore(l, &SparseAnnotation::new(slices.iter().copied(), SPARSE_AXIS))?);
    }
    let inputs = CaseInputs {
        image: Some(read_volume(&case.image)?),
        image2: case.image2.as_ref().map(read_volume).transpose()?,
        labels,
        parcellation: case.parcellation.as_ref().map(read_volume).transpose()?,
        wmh: case.wmh.as_ref().map(read_volume).transpose()?,
    };
    let res = preprocess_case(&inputs, &cfg.preprocess)?;
    let file = format!("{}.nii.gz", case.id);
    let mut entry = CaseEntry::new(&case.id, &case.dataset, out.join("images").join(&file));
    write_volume(&res.image, &entry.image)?;
    if let Some(v) = &res.image2 {
        let p = out.join("images2").join(&file);
        write_volume(v, &p)?;
        entry.image2 = Some(p);
    }
    if let Some(l) = &res.labels {
        let p = out.join("labels").join(&file);
        write_labels(l, &p)?;
        entry.labels = Some(p);
    }
    entry.burden = case.burden;
    entry.provenance = case.provenance;
    Ok(entry)
}

/// Applies the spacing policy and intensity chain to every case.
///
/// Parcellation and WMH maps are consumed here (ROI retention, label merge)
/// and are not carried into the output manifest. Sparse annotations are
/// baked into the labels as ignore voxels.
pub fn cmd_preprocess(manifest: &Path, cfg: &PipelineConfig, out: &Path) -> Result<Manifest> {
    let input = Manifest::load(manifest)?;
    for sub in ["images", "images2", "labels"] {
        create_dir(&out.join(sub))?;
    }
    let results: Vec<Result<CaseEntry>> = input.cases.par_iter().map(|c| preprocess_one(c, cfg, out)).collect();
    let mut cases = Vec::new();
    let mut failures = Vec::new();
    for (c, r) in input.cases.iter().zip(results) {
        match r {
            Ok(e) => {
                log::info("case_preprocessed", json!({"id": c.id}));
                cases.push(e);
            }
            Err(e) => failures.push((c.id.clone(), e.to_string())),
        }
    }
    let m = Manifest {
        cases,
        fingerprint: Some(cfg.fingerprint()),
        preprocess_fingerprint: Some(cfg.preprocess_fingerprint()),
    };
    m.save(out.join(MANIFEST_FILE))?;
    finish(&failures, input.cases.len())?;
    Ok(m)
}

pub fn load_folds(path: &Path) -> Result<FoldAssignment> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("folds file {}: {e}", path.display())))
}

pub fn cmd_cv_split(manifest: &Path, k: usize, seed: u64, out: &Path) -> Result<FoldAssignment> {
    let m = Manifest::load(manifest)?;
    let folds = stratified_kfold(&m.cases, k, seed).map_err(|e| CliError::Invalid(e.to_string()))?;
    create_dir(out)?;
    write_text(&out.join(FOLDS_FILE), &(canonical_json(&folds)? + "\n"))?;
    for f in 0..k {
        log::info("fold", json!({"fold": f, "validation": folds.validation_ids(f)}));
    }
    Ok(folds)
}

/// The training cases of a fold: gold cases outside the validation split plus
/// every pseudo-labelled case. Without a folds file all cases train.
pub fn select_training_cases(m: &Manifest, folds: Option<(&FoldAssignment, usize)>) -> Result<Vec<CaseEntry>> {
    let Some((fa, fold)) = folds else {
        return Ok(m.cases.clone());
    };
    fa.check_fold(fold).map_err(|e| CliError::Invalid(e.to_string()))?;
    let validation: BTreeSet<String> = fa.validation_ids(fold).into_iter().map(String::from).collect();
    let mut gold = Vec::new();
    let mut pseudo = Vec::new();
    for c in &m.cases {
        match (c.provenance, fa.folds.get(&c.id)) {
            (Provenance::Pseudo, _) => pseudo.push(c.clone()),
            (Provenance::Gold, Some(&f)) if f != fold => gold.push(c.clone()),
            (Provenance::Gold, Some(_)) => {}
            (Provenance::Gold, None) => {
                return Err(CliError::Invalid(format!("gold case {} is missing from the folds file", c.id)));
            }
        }
    }
    merge_training_set(&gold, &pseudo, &validation).map_err(|e| CliError::Invalid(e.to_string()))
}

pub struct TrainArgs<'a> {
    pub manifest: &'a Path,
    pub folds: Option<&'a Path>,
    pub fold: Option<usize>,
    pub config: &'a PipelineConfig,
    pub out: &'a Path,
    /// Checkpoint to resume from.
    pub resume: Option<&'a Path>,
}

pub fn cmd_train(args: TrainArgs) -> Result<TrainOutcome> {
    let cfg = args.config;
    let m = Manifest::load(args.manifest)?;
    cfg.check_channels(&m)?;
    let fa = args.folds.map(load_folds).transpose()?;
    let sel = match (&fa, args.fold) {
        (Some(fa), Some(f)) => Some((fa, f)),
        (Some(_), None) => return Err(CliError::Invalid("--folds requires --fold".into())),
        (None, Some(_)) => return Err(CliError::Invalid("--fold requires --folds".into())),
        (None, None) => None,
    };
    let entries = select_training_cases(&m, sel)?;
    if let Some(c) = entries.iter().find(|c| c.labels.is_none()) {
        return Err(CliError::Invalid(format!("training case {} has no labels", c.id)));
    }
    let cases: Vec<TrainCase> = entries
        .par_iter()
        .map(load_train_case)
        .collect::<std::result::Result<_, _>>()?;
    let resume = args.resume.map(checkpoint::load).transpose()?;
    create_dir(args.out)?;
    let log_path = args.out.join(TRAIN_LOG);
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    log::info(
        "train_start",
        json!({"cases": cases.len(), "fold": args.fold, "resume_epoch": resume.as_ref().map(|c| c.epoch)}),
    );
    let mut write_err = None;
    let outcome = train(
        TrainRequest {
            cases: &cases,
            net: &cfg.net,
            train: &cfg.train,
            augment: &cfg.augment,
            foreground: &cfg.label_scheme.foreground_ids,
            resume,
        },
        |r: &EpochRecord| {
            let line = serde_json::to_string(r).expect("record serializes");
            log::info("epoch", serde_json::to_value(r).expect("record serializes"));
            if let Err(e) = writeln!(log_file, "{line}") {
                write_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(CliError::io(log_path, e));
    }
    let stamp = |mut ck: Checkpoint| {
        ck.config_fingerprint = Some(cfg.fingerprint());
        ck.preprocess_fingerprint = m.preprocess_fingerprint.clone();
        ck
    };
    let outcome = TrainOutcome {
        last: stamp(outcome.last),
        best: outcome.best.map(stamp),
        log: outcome.log,
    };
    checkpoint::save(&outcome.last, args.out.join(LAST_CHECKPOINT))?;
    if let Some(b) = &outcome.best {
        checkpoint::save(b, args.out.join(BEST_CHECKPOINT))?;
    }
    log::info("train_done", json!({"epochs": outcome.last.epoch}));
    Ok(outcome)
}

fn fingerprints_agree(a: &Option<String>, b: &Option<String>, what: &str, force: bool) -> Result<()> {
    if a == b {
        return Ok(());
    }
    let fields = json!({"what": what, "left": a, "right": b});
    if force {
        log::emit(log::Level::Warn, "fingerprint_mismatch_forced", fields);
        Ok(())
    } else {
        Err(CliError::Invalid(format!(
            "{what}: preprocessing fingerprints differ ({a:?} vs {b:?}); pass --force-fingerprint-mismatch to override"
        )))
    }
}

/// Predicts every case of the manifest with a checkpoint and writes the
/// label maps plus a manifest of pseudo-labelled entries.
pub fn cmd_infer(checkpoint_path: &Path, manifest: &Path, out: &Path, force: bool) -> Result<Manifest> {
    let bytes = std::fs::read(checkpoint_path).map_err(|e| CliError::io(checkpoint_path, e))?;
    let ck = checkpoint::from_bytes(&bytes)?;
    let m = Manifest::load(manifest)?;
    fingerprints_agree(&ck.preprocess_fingerprint, &m.preprocess_fingerprint, "checkpoint vs manifest", force)?;
    check_channels(&ck.model, &m.cases).map_err(|e| CliError::Invalid(e.to_string()))?;
    create_dir(out)?;
    let res = pseudo_label_round(&ck.model, &m.cases, &out.join("predictions"))?;
    for e in &res.entries {
        log::info("case_predicted", json!({"id": e.id}));
    }
    let pred = Manifest {
        cases: res.entries,
        fingerprint: Some(ck.config_fingerprint.clone().unwrap_or_else(|| sha256_hex(&bytes))),
        preprocess_fingerprint: m.preprocess_fingerprint.clone(),
    };
    pred.save(out.join(MANIFEST_FILE))?;
    finish(&res.failures, m.cases.len())?;
    Ok(pred)
}

pub struct EvaluateArgs<'a> {
    pub predictions: &'a Path,
    pub reference: &'a Path,
    pub config: &'a PipelineConfig,
    pub out: &'a Path,
    pub csv: Option<&'a Path>,
    pub force: bool,
    /// Pool confusion counts across cases instead of averaging per case.
    pub pooled: bool,
}

fn case_rows(
    p: &CaseEntry,
    reference: &Manifest,
    cfg: &PipelineConfig,
) -> Result<Vec<pvseg_core::eval::CaseMetrics>> {
    let r = reference
        .get(&p.id)
        .ok_or_else(|| CliError::Invalid(format!("case {} is not in the reference manifest", p.id)))?;
    let path = |e: &CaseEntry| {
        e.labels
            .clone()
            .ok_or_else(|| CliError::Invalid(format!("case {} has no labels", e.id)))
    };
    let pred = read_labels(path(p)?)?;
    let refl = read_labels(path(r)?)?;
    let conn = cfg.eval.connectivity;
    let mut rows = vec![case_metrics(&p.id, &r.dataset, &pred, &refl, ClassSel::AnyForeground, conn)?];
    for &c in &cfg.label_scheme.foreground_ids {
        rows.push(case_metrics(&p.id, &r.dataset, &pred, &refl, ClassSel::Class(c), conn)?);
    }
    Ok(rows)
}

pub fn cmd_evaluate(args: EvaluateArgs) -> Result<MetricsReport> {
    let pred = Manifest::load(args.predictions)?;
    let reference = Manifest::load(args.reference)?;
    fingerprints_agree(
        &pred.preprocess_fingerprint,
        &reference.preprocess_fingerprint,
        "predictions vs reference",
        args.force,
    )?;
    let results: Vec<Result<_>> = pred.cases.par_iter().map(|p| case_rows(p, &reference, args.config)).collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (p, r) in pred.cases.iter().zip(results) {
        match r {
            Ok(rs) => rows.extend(rs),
            Err(e) => failures.push((p.id.clone(), e.to_string())),
        }
    }
    if rows.is_empty() {
        finish(&failures, pred.cases.len())?;
        return Err(CliError::Invalid("no cases to evaluate".into()));
    }
    let mut report = aggregate_report(
        &rows,
        &[Grouping::Overall, Grouping::ByDataset, Grouping::ByClass],
        args.config.eval.connectivity,
        args.pooled,
        args.config.eval.bootstrap,
    )?;
    report.config_fingerprint = Some(args.config.fingerprint());
    create_dir(args.out)?;
    write_text(&args.out.join(REPORT_FILE), &(canonical_json(&report)? + "\n"))?;
    if let Some(csv) = args.csv {
        write_text(csv, &report.to_csv())?;
    }
    finish(&failures, pred.cases.len())?;
    Ok(report)
}

/// Phantom generator settings: the per-case template and cohort layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub template: PhantomConfig,
    pub cohort: CohortConfig,
}

impl PhantomSpec {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("phantom config {}: {e}", p.display())))
            }
            None => Ok(PhantomSpec::default()),
        }
    }
}

pub fn cmd_phantom(spec: &PhantomSpec, n: Option<usize>, seed: Option<u64>, out: &Path) -> Result<Manifest> {
    let mut spec = spec.clone();
    if let Some(n) = n {
        spec.cohort.n_cases = n;
    }
    if let Some(s) = seed {
        spec.cohort.seed = s;
    }
    spec.template.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
    let mut m = phantom_cohort(&spec.template, &spec.cohort, out)?;
    m.fingerprint = Some(sha256_hex(canonical_json(&spec)?.as_bytes()));
    m.save(out.join(MANIFEST_FILE))?;
    log::info("phantom_cohort", json!({"cases": m.cases.len(), "out": out}));
    Ok(m)
}

/// Output directory entry for a manifest written by a command.
pub fn manifest_path(out: &Path) -> PathBuf {
    out.join(MANIFEST_FILE)
}
