//! The five subcommands: train, prune, eval, report, anchors.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::admm::{run_pipeline, Phase, PipelineObserver, ProgressRecord, PruneSchedule};
use crate::error::{Error, Result};
use crate::metrics::{
    count_flops, count_params, group_by_scale, kmeans_anchors_with, map_sweep,
    reference_cross_checks, storage_bytes, AnchorConfig, BoundingBox, EvalSweep, ImageEval,
    LayerReportRow, PruneReport, ReferenceResults,
};
use crate::nets::{
    decode_batch, desk_anchors, synth_classifier_dataset, synth_detect_dataset, tiny_classifier,
    tiny_detect, train_classifier_baseline, ClassifierTrainer, DecodeConfig, DetectTrainer,
    Network, PipelineTask, CLASSIFIER_CLASSES,
};
use crate::sparsity::{retained_from_ratio, MaskSet, SparsityConstraint, SparsityMode};

use super::archive::{write_atomic, ModelArchive};
use super::config::{require_exists, DatasetKind, NetKindConfig, RunConfig};
use super::data::{
    read_boxes_jsonl, read_images, synthetic_image_id, write_boxes_jsonl,
};

fn dataset_seed(cfg: &RunConfig) -> u64 {
    cfg.dataset.seed.unwrap_or(cfg.seed)
}

fn build_classifier_trainer(cfg: &RunConfig, planned_epochs: usize) -> Result<ClassifierTrainer> {
    let ds = &cfg.dataset;
    if ds.kind != DatasetKind::Synthetic {
        return Err(Error::usage(
            "classifier training supports the synthetic dataset only",
        ));
    }
    let seed = dataset_seed(cfg);
    let train = synth_classifier_dataset(ds.train_count, ds.image_size, seed);
    let eval = synth_classifier_dataset(ds.eval_count, ds.image_size, seed.wrapping_add(1));
    let batches = ds.train_count.div_ceil(cfg.train.batch_size);
    let lr = cfg.train.lr_schedule(batches, batches * planned_epochs)?;
    Ok(ClassifierTrainer::new(
        train,
        eval,
        cfg.train.batch_size,
        lr,
        cfg.train.mixup(),
        cfg.seed.wrapping_add(0x7041),
    ))
}

fn decode_config(cfg: &RunConfig) -> DecodeConfig {
    let sz = cfg.dataset.image_size;
    let mut d = DecodeConfig::new(desk_anchors(sz), (sz, sz));
    d.score_threshold = cfg.eval.score_threshold;
    d.nms_iou = cfg.eval.nms_iou;
    d
}

fn build_detect_trainer(cfg: &RunConfig, planned_epochs: usize) -> Result<DetectTrainer> {
    let ds = &cfg.dataset;
    if ds.kind != DatasetKind::Synthetic {
        return Err(Error::usage(
            "detector training supports the synthetic dataset only",
        ));
    }
    let seed = dataset_seed(cfg);
    let train = synth_detect_dataset(ds.train_count, ds.image_size, seed);
    let eval = synth_detect_dataset(ds.eval_count, ds.image_size, seed.wrapping_add(1));
    let batches = ds.train_count.div_ceil(cfg.train.batch_size);
    let lr = cfg.train.lr_schedule(batches, batches * planned_epochs)?;
    Ok(DetectTrainer::new(
        train,
        eval,
        decode_config(cfg),
        cfg.train.batch_size,
        lr,
        cfg.train.mixup(),
        cfg.seed.wrapping_add(0x7041),
    ))
}

fn fresh_network(cfg: &RunConfig) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.net.kind {
        NetKindConfig::Classifier => tiny_classifier(CLASSIFIER_CLASSES, &mut rng),
        NetKindConfig::Detector => tiny_detect(&mut rng),
    }
}

/// Train a model from scratch and archive it.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let mut net = fresh_network(cfg);
    let epochs = cfg.train.epochs;
    let (losses, metric) = match cfg.net.kind {
        NetKindConfig::Classifier => {
            let mut trainer = build_classifier_trainer(cfg, epochs)?;
            let losses = train_classifier_baseline(&mut net, &mut trainer, epochs)?;
            let acc = trainer.evaluate(&mut net)?;
            (losses, acc)
        }
        NetKindConfig::Detector => {
            let mut trainer = build_detect_trainer(cfg, epochs)?;
            let mut losses = Vec::with_capacity(epochs);
            for _ in 0..epochs {
                losses.push(trainer.train_epoch(&mut net, None, None)?);
            }
            let map50 = trainer.evaluate(&mut net)?;
            (losses, map50)
        }
    };
    let archive = ModelArchive::from_network(
        &net,
        cfg.dataset.image_size,
        CLASSIFIER_CLASSES,
        cfg.seed,
        cfg.to_value(),
        None,
    )?;
    archive.save(&cfg.out.join("model"))?;
    let summary = serde_json::json!({
        "epoch_losses": losses,
        "eval_metric": metric,
        "seed": cfg.seed,
    });
    write_atomic(
        &cfg.out.join("train_summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    eprintln!(
        "trained {} epochs, eval metric {metric:.4}, archived to {}",
        epochs,
        cfg.out.join("model").display()
    );
    Ok(())
}

/// Build the per-layer constraints a prune run uses.
pub fn build_schedule(cfg: &RunConfig, net: &Network) -> Result<PruneSchedule> {
    let p = &cfg.prune;
    let mut constraints = Vec::new();
    for ordinal in net.prunable_ordinals() {
        let (rows, cols) = net.gemm_dims(ordinal)?;
        let over = p.per_layer.get(&ordinal.to_string());
        let alpha_f = over
            .and_then(|o| o.alpha_filters)
            .unwrap_or_else(|| retained_from_ratio(p.keep_filters, rows));
        let alpha_c = over
            .and_then(|o| o.alpha_columns)
            .unwrap_or_else(|| retained_from_ratio(p.keep_columns, cols));
        let alpha_w = over
            .and_then(|o| o.alpha_weights)
            .unwrap_or_else(|| retained_from_ratio(p.keep_weights, rows * cols));
        let c = match p.mode {
            SparsityMode::Irregular => SparsityConstraint::irregular(alpha_w),
            SparsityMode::Filter => SparsityConstraint::filter(alpha_f),
            SparsityMode::Column => SparsityConstraint::column(alpha_c),
            SparsityMode::Combined => SparsityConstraint::combined(alpha_f, alpha_c),
        };
        constraints.push((ordinal, c));
    }
    let mut schedule = PruneSchedule::new(constraints);
    schedule.admm_iterations = p.admm_iterations;
    schedule.epochs_per_iteration = p.epochs_per_iteration;
    schedule.retrain_epochs = p.retrain_epochs;
    schedule.rho = p.rho;
    schedule.strategy = p.strategy;
    schedule.validate(net)?;
    Ok(schedule)
}

/// Writes the line-oriented progress log and per-phase checkpoints.
struct FileObserver {
    out: PathBuf,
    progress: String,
    input_size: usize,
    seed: u64,
    creation: serde_json::Value,
}

impl FileObserver {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            out: cfg.out.clone(),
            progress: String::new(),
            input_size: cfg.dataset.image_size,
            seed: cfg.seed,
            creation: cfg.to_value(),
        }
    }

    fn flush_progress(&self) -> Result<()> {
        write_atomic(&self.out.join("progress.jsonl"), self.progress.as_bytes())
    }
}

impl PipelineObserver for FileObserver {
    fn on_progress(&mut self, record: &ProgressRecord) -> Result<()> {
        self.progress.push_str(&serde_json::to_string(record)?);
        self.progress.push('\n');
        Ok(())
    }

    fn on_phase_complete(
        &mut self,
        pass: usize,
        phase: Phase,
        net: &Network,
        masks: Option<&MaskSet>,
    ) -> Result<()> {
        let name = match phase {
            Phase::PrePruning => "prepruned",
            Phase::MaskedMapping => "mapped",
            Phase::Retraining => "retrained",
        };
        let dir = self.out.join("checkpoints").join(format!("pass{pass}_{name}"));
        let archive = ModelArchive::from_network(
            net,
            self.input_size,
            CLASSIFIER_CLASSES,
            self.seed,
            self.creation.clone(),
            masks,
        )?;
        archive.save(&dir)?;
        self.flush_progress()?;
        eprintln!("phase complete: pass {pass} {name}");
        Ok(())
    }
}

/// Full mAP sweep of a detector over the synthetic eval split.
fn detector_sweep(net: &mut Network, cfg: &RunConfig, input: usize) -> Result<EvalSweep> {
    let seed = dataset_seed(cfg).wrapping_add(1);
    let ds = synth_detect_dataset(cfg.dataset.eval_count, input, seed);
    let mut d = decode_config(cfg);
    d.input = (input, input);
    d.anchors = desk_anchors(input);
    let out = net.forward(&ds.images, false)?;
    let decoded = decode_batch(&out, &d)?;
    let images: Vec<ImageEval> = decoded
        .into_iter()
        .zip(ds.boxes)
        .map(|(predictions, truths)| ImageEval {
            predictions,
            truths,
        })
        .collect();
    Ok(map_sweep(
        &images,
        &cfg.eval.sweep_thresholds()?,
        cfg.prune.interpolation,
    ))
}

/// The three-phase pruning pipeline over an archived model, emitting the
/// pruned archive, a JSON + table report, and per-phase checkpoints.
pub fn cmd_prune(cfg: &RunConfig) -> Result<()> {
    let archive = ModelArchive::load(cfg.require_model()?)?;
    let mut net = archive.to_network()?;
    let sz = archive.meta.input_size;
    if sz != cfg.dataset.image_size {
        return Err(Error::usage(format!(
            "archive input size {sz} disagrees with dataset.image_size {}",
            cfg.dataset.image_size
        )));
    }

    let schedule = build_schedule(cfg, &net)?;
    let passes = if cfg.prune.mode == SparsityMode::Combined
        && schedule.strategy == crate::admm::CombinedStrategy::Sequential
    {
        2
    } else {
        1
    };
    let planned_epochs =
        passes * (schedule.admm_iterations * schedule.epochs_per_iteration + schedule.retrain_epochs);

    let mut task: Box<dyn PipelineTask> = match archive.meta.net_kind {
        NetKindConfig::Classifier => Box::new(build_classifier_trainer(cfg, planned_epochs)?),
        NetKindConfig::Detector => Box::new(build_detect_trainer(cfg, planned_epochs)?),
    };

    let is_detector = archive.meta.net_kind == NetKindConfig::Detector;
    let metric_before = task.evaluate(&mut net)?;
    let eval_before = is_detector
        .then(|| detector_sweep(&mut net, cfg, sz))
        .transpose()?;
    let manifest_before = net.to_manifest(sz, sz);
    let params_before = count_params(&manifest_before, None)?;
    let flops_before = count_flops(&manifest_before, None)?;

    let mut observer = FileObserver::new(cfg);
    let outcome = run_pipeline(&mut net, &schedule, task.as_mut(), &mut observer)?;
    let metric_after = task.evaluate(&mut net)?;
    let eval_after = is_detector
        .then(|| detector_sweep(&mut net, cfg, sz))
        .transpose()?;

    let manifest = net.to_manifest(sz, sz);
    let params_after = count_params(&manifest, Some(&outcome.masks))?;
    let flops_after = count_flops(&manifest, Some(&outcome.masks))?;

    let feasibility: BTreeMap<usize, bool> = outcome.layer_feasibility.iter().copied().collect();
    let mut rows = Vec::new();
    for (ordinal, (_, spec)) in manifest.conv_layers().enumerate() {
        let (rows_g, cols_g) = spec.gemm_dims();
        let dense = spec.weight_params();
        let retained = outcome
            .masks
            .get(ordinal)
            .map(|m| m.popcount() as u64)
            .unwrap_or(dense);
        let spatial = (spec.h_out * spec.w_out) as u64;
        rows.push(LayerReportRow {
            ordinal,
            name: spec
                .name
                .clone()
                .unwrap_or_else(|| format!("conv{ordinal}")),
            gemm_rows: rows_g,
            gemm_cols: cols_g,
            mode: outcome
                .masks
                .get(ordinal)
                .map(|_| cfg.prune.mode.to_string()),
            params_before: dense,
            params_after: retained,
            flops_before: 2 * dense * spatial,
            flops_after: 2 * retained * spatial,
            feasible: feasibility.get(&ordinal).copied().unwrap_or(true),
        });
    }

    let report = PruneReport {
        seed: cfg.seed,
        mode: cfg.prune.mode.to_string(),
        params_before,
        params_after,
        compression_ratio: PruneReport::ratio(params_before, params_after),
        flops_before,
        flops_after,
        storage_before_bytes: storage_bytes(params_before),
        storage_after_bytes: storage_bytes(params_after),
        layers: rows,
        loss_trajectory: outcome.loss_trajectory.clone(),
        accuracy_before: Some(metric_before),
        accuracy_after: Some(metric_after),
        eval_before,
        eval_after,
        ap_interpolation: cfg.prune.interpolation.to_string(),
        config: cfg.to_value(),
        reference: ReferenceResults::published(),
    };

    let pruned = ModelArchive::from_network(
        &net,
        sz,
        CLASSIFIER_CLASSES,
        cfg.seed,
        cfg.to_value(),
        Some(&outcome.masks),
    )?;
    pruned.save(&cfg.out.join("pruned"))?;
    write_atomic(
        &cfg.out.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    write_atomic(&cfg.out.join("report.txt"), report.render_table().as_bytes())?;
    eprintln!(
        "pruned {:.2}x ({} -> {} params), metric {:.4} -> {:.4}",
        report.compression_ratio, params_before, params_after, metric_before, metric_after
    );
    Ok(())
}

fn truths_with_ids(cfg: &RunConfig) -> Result<BTreeMap<String, Vec<BoundingBox>>> {
    match &cfg.eval.truths {
        Some(path) => read_boxes_jsonl(path),
        None => {
            let seed = dataset_seed(cfg).wrapping_add(1);
            let ds = synth_detect_dataset(cfg.dataset.eval_count, cfg.dataset.image_size, seed);
            Ok(ds
                .boxes
                .iter()
                .enumerate()
                .map(|(i, b)| (synthetic_image_id(i), b.clone()))
                .collect())
        }
    }
}

/// Evaluate predictions (from a file or by running an archived model) as an
/// mAP sweep over the IoU thresholds.
pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let thresholds = cfg.eval.sweep_thresholds()?;

    let sweep: EvalSweep = if let Some(pred_path) = &cfg.eval.predictions {
        require_exists(pred_path, "predictions file")?;
        if let Some(t) = &cfg.eval.truths {
            require_exists(t, "truths file")?;
        }
        let predictions = read_boxes_jsonl(pred_path)?;
        let truths = truths_with_ids(cfg)?;
        let mut ids: Vec<&String> = truths.keys().chain(predictions.keys()).collect();
        ids.sort();
        ids.dedup();
        let images: Vec<ImageEval> = ids
            .into_iter()
            .map(|id| ImageEval {
                predictions: predictions.get(id).cloned().unwrap_or_default(),
                truths: truths.get(id).cloned().unwrap_or_default(),
            })
            .collect();
        map_sweep(&images, &thresholds, cfg.eval.interpolation)
    } else {
        let archive = ModelArchive::load(cfg.require_model()?)?;
        let mut net = archive.to_network()?;
        match archive.meta.net_kind {
            NetKindConfig::Classifier => {
                let seed = dataset_seed(cfg).wrapping_add(1);
                let ds = synth_classifier_dataset(
                    cfg.dataset.eval_count,
                    archive.meta.input_size,
                    seed,
                );
                let acc = crate::nets::accuracy(&mut net, &ds.images, &ds.labels)?;
                let summary = serde_json::json!({ "accuracy": acc, "seed": cfg.seed });
                write_atomic(
                    &cfg.out.join("eval.json"),
                    serde_json::to_string_pretty(&summary)?.as_bytes(),
                )?;
                println!("accuracy {acc:.4}");
                return Ok(());
            }
            NetKindConfig::Detector => {
                let (images_t, truths): (crate::nets::Tensor4, Vec<Vec<BoundingBox>>) =
                    match (&cfg.dataset.kind, &cfg.dataset.images) {
                        (DatasetKind::Files, Some(blob)) => {
                            let images = read_images(blob)?;
                            let truth_map = truths_with_ids(cfg)?;
                            let (n, _, _, _) = images.shape();
                            let truths = (0..n)
                                .map(|i| {
                                    truth_map
                                        .get(&synthetic_image_id(i))
                                        .cloned()
                                        .unwrap_or_default()
                                })
                                .collect();
                            (images, truths)
                        }
                        _ => {
                            let seed = dataset_seed(cfg).wrapping_add(1);
                            let ds = synth_detect_dataset(
                                cfg.dataset.eval_count,
                                archive.meta.input_size,
                                seed,
                            );
                            (ds.images, ds.boxes)
                        }
                    };
                let mut d = decode_config(cfg);
                d.input = (archive.meta.input_size, archive.meta.input_size);
                d.anchors = desk_anchors(archive.meta.input_size);
                let out = net.forward(&images_t, false)?;
                let decoded = decode_batch(&out, &d)?;
                // Persist the predictions for reuse alongside the sweep.
                let pred_map: BTreeMap<String, Vec<BoundingBox>> = decoded
                    .iter()
                    .enumerate()
                    .map(|(i, b)| (synthetic_image_id(i), b.clone()))
                    .collect();
                write_boxes_jsonl(&cfg.out.join("predictions.jsonl"), &pred_map)?;
                let images: Vec<ImageEval> = decoded
                    .into_iter()
                    .zip(truths)
                    .map(|(predictions, truths)| ImageEval {
                        predictions,
                        truths,
                    })
                    .collect();
                map_sweep(&images, &thresholds, cfg.eval.interpolation)
            }
        }
    };

    write_atomic(
        &cfg.out.join("eval.json"),
        serde_json::to_string_pretty(&sweep)?.as_bytes(),
    )?;
    let mut table = String::from("T(IoU) ");
    for t in &sweep.thresholds {
        table.push_str(&format!("{t:>7.2}"));
    }
    table.push_str("\nmAP    ");
    for v in &sweep.map_values {
        table.push_str(&format!("{v:>7.3}"));
    }
    table.push('\n');
    write_atomic(&cfg.out.join("eval.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

/// Accounting report for an archived model, including the reference
/// arithmetic self-test.
pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let archive = ModelArchive::load(cfg.require_model()?)?;
    let checks = reference_cross_checks();
    if let Some(bad) = checks.iter().find(|c| !c.pass) {
        return Err(Error::usage(format!(
            "reference self-test failed: {} (computed {}, reported {})",
            bad.label, bad.computed, bad.reported
        )));
    }
    let params_before = count_params(&archive.manifest, None)?;
    let params_after = count_params(&archive.manifest, archive.masks.as_ref())?;
    let flops_before = count_flops(&archive.manifest, None)?;
    let flops_after = count_flops(&archive.manifest, archive.masks.as_ref())?;
    let report = serde_json::json!({
        "seed": archive.meta.seed,
        "params_before": params_before,
        "params_after": params_after,
        "compression_ratio": PruneReport::ratio(params_before, params_after),
        "flops_before": flops_before,
        "flops_after": flops_after,
        "storage_before_bytes": storage_bytes(params_before),
        "storage_after_bytes": storage_bytes(params_after),
        "compaction_eligible": archive.meta.compaction_eligible,
        "reference_cross_checks": checks,
        "reference": ReferenceResults::published(),
    });
    write_atomic(
        &cfg.out.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    println!(
        "params {params_before} -> {params_after} ({:.2}x), flops {flops_before} -> {flops_after}",
        PruneReport::ratio(params_before, params_after)
    );
    Ok(())
}

/// Cluster ground-truth box sizes into anchor priors, sorted by area and
/// grouped by scale.
pub fn cmd_anchors(cfg: &RunConfig) -> Result<()> {
    let sizes: Vec<(f64, f64)> = match &cfg.anchors.boxes {
        Some(path) => {
            require_exists(path, "boxes file")?;
            read_boxes_jsonl(path)?
                .values()
                .flatten()
                .map(|b| (b.width(), b.height()))
                .collect()
        }
        None => {
            let ds = synth_detect_dataset(
                cfg.dataset.train_count,
                cfg.dataset.image_size,
                dataset_seed(cfg),
            );
            ds.boxes
                .iter()
                .flatten()
                .map(|b| (b.width(), b.height()))
                .collect()
        }
    };
    let mut ac = AnchorConfig::new(cfg.anchors.k, cfg.seed);
    ac.distance = cfg.anchors.distance;
    let centers = kmeans_anchors_with(&sizes, &ac)?;
    let groups = group_by_scale(centers, cfg.anchors.scales);
    let flat: Vec<(f64, f64)> = groups.iter().flatten().copied().collect();
    let doc = serde_json::json!({
        "anchors": flat,
        "scale_groups": groups,
        "k": cfg.anchors.k,
        "seed": cfg.seed,
    });
    write_atomic(
        &cfg.out.join("anchors.json"),
        serde_json::to_string_pretty(&doc)?.as_bytes(),
    )?;
    for (i, g) in groups.iter().enumerate() {
        let row: Vec<String> = g.iter().map(|(w, h)| format!("{w:.1}x{h:.1}")).collect();
        println!("scale {i}: {}", row.join(", "));
    }
    Ok(())
}
