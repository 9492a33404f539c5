//! Command implementations. Every command writes its resolved configuration
//! and the hashes of its input checkpoints next to its outputs, so a run is
//! reconstructible from the output directory alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cloak_core::adversary::{Discriminator, Student, StudentSpec};
use cloak_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
use cloak_core::dataset::{
    generate_synthetic_identities, load_dataset, split_dataset, write_dataset, LabeledImage,
    LoadedDataset, Split,
};
use cloak_core::distill::{distill, DistillConfig};
use cloak_core::embedder::{
    calibrate_threshold, identity_reference, train_embedder, Embedder, EmbedderSpec, Embedding,
    VerificationThreshold,
};
use cloak_core::evaluation::{
    attack_success_rate, detectability_probe, embedding_shift_stats, render_scatter,
    robustness_under_blur, ssim_report, tsne, write_tsne_csv, Cloaker, EvalMode, EvalProtocol,
    EvalReport, TsneConfig, TsnePoint,
};
use cloak_core::imaging::{linf_norm, Image};
use cloak_core::losses::AdvLossVariant;
use cloak_core::pngio;
use cloak_core::training::{
    cloak, train_attack, write_loss_log_csv, AttackConfig, AttackModel, CloakModel,
};
use cloak_core::{Error, Result};
use ndarray::{Array1, Array2};

use crate::config::RunConfig;

pub struct Ctx {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
    pub deterministic: bool,
}

impl Ctx {
    pub fn dataset_dir(&self) -> PathBuf {
        self.cfg
            .paths
            .dataset_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("dataset"))
    }

    fn cloak_threshold(&self) -> f64 {
        self.cfg
            .eval
            .cloak_threshold
            .unwrap_or(self.cfg.attack.config.pert.threshold)
    }

    /// Writes `resolved_config.<cmd>.json` so the exact settings of this
    /// invocation are recoverable.
    fn write_resolved(&self, cmd: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        let doc = serde_json::json!({
            "command": cmd,
            "deterministic": self.deterministic,
            "config": self.cfg,
        });
        std::fs::write(
            self.out_dir.join(format!("resolved_config.{cmd}.json")),
            serde_json::to_string_pretty(&doc)?,
        )?;
        Ok(())
    }

    /// Records which checkpoints fed this command, by hash.
    fn write_inputs(&self, cmd: &str, inputs: &[(&str, &CheckpointManifest)]) -> Result<()> {
        let map: BTreeMap<&str, &str> = inputs
            .iter()
            .map(|(name, m)| (*name, m.weights_sha256.as_str()))
            .collect();
        std::fs::write(
            self.out_dir.join(format!("inputs.{cmd}.json")),
            serde_json::to_string_pretty(&map)?,
        )?;
        Ok(())
    }
}

pub fn cmd_synth_data(ctx: &Ctx) -> Result<()> {
    let d = &ctx.cfg.dataset;
    d.synthetic.validate()?;
    let samples = generate_synthetic_identities(&d.synthetic)?;
    let labeled: Vec<LabeledImage> = samples.iter().map(|s| s.labeled.clone()).collect();
    let (train, val, test) = split_dataset(&labeled, d.fractions, d.split_mode, d.split_seed)?;
    let mut splits = BTreeMap::new();
    for (set, split) in [(&train, Split::Train), (&val, Split::Val), (&test, Split::Test)] {
        for s in set.iter() {
            splits.insert((s.identity_id, s.image_id), split);
        }
    }
    let dir = ctx.dataset_dir();
    write_dataset(&dir, &samples, &splits, &d.synthetic, d.split_mode, d.fractions)?;
    ctx.write_resolved("synth-data")?;
    println!(
        "wrote {} images ({} train / {} val / {} test) to {}",
        labeled.len(),
        train.len(),
        val.len(),
        test.len(),
        dir.display()
    );
    Ok(())
}

fn require_dataset(ctx: &Ctx) -> Result<LoadedDataset> {
    load_dataset(&ctx.dataset_dir())
}

fn train_one_embedder(
    ctx: &Ctx,
    ds: &LoadedDataset,
    spec: &EmbedderSpec,
    name: &str,
) -> Result<()> {
    let mut emb = train_embedder(&ds.train, spec)?;
    let th = calibrate_threshold(&mut emb, &ds.val, ctx.cfg.embedder.metric, ctx.cfg.embedder.pair_seed)?;
    let meta = serde_json::json!({
        "spec": spec,
        "threshold": th,
        "feature_tap": spec.feature_tap,
    });
    save_checkpoint(
        &ctx.out_dir,
        name,
        &emb,
        "embedder",
        emb.param_count(),
        spec.train.seed,
        meta,
    )?;
    println!("{name}: {} params, eer {:.4}, tau {:.4}", emb.param_count(), th.eer, th.tau);
    Ok(())
}

pub fn cmd_train_embedder(ctx: &Ctx) -> Result<()> {
    let ds = require_dataset(ctx)?;
    let cfg = &ds.manifest.config;
    let wb_spec = ctx
        .cfg
        .embedder
        .spec
        .clone()
        .unwrap_or_else(|| EmbedderSpec::whitebox_default(cfg.image_size, cfg.channels));
    train_one_embedder(ctx, &ds, &wb_spec, "embedder.whitebox")?;
    if ctx.cfg.blackbox.enabled {
        let bb_spec = ctx
            .cfg
            .blackbox
            .spec
            .clone()
            .unwrap_or_else(|| EmbedderSpec::blackbox_default(cfg.image_size, cfg.channels));
        train_one_embedder(ctx, &ds, &bb_spec, "embedder.blackbox")?;
    }
    ctx.write_resolved("train-embedder")
}

fn load_embedder(ctx: &Ctx, name: &str) -> Result<(Embedder, VerificationThreshold, CheckpointManifest)> {
    let manifest_path = ctx.out_dir.join(format!("{name}.manifest.json"));
    let (emb, manifest): (Embedder, _) = load_checkpoint(&manifest_path)?;
    let th: VerificationThreshold =
        serde_json::from_value(manifest.metadata["threshold"].clone())?;
    Ok((emb, th, manifest))
}

/// Resolves the attack config, building the target reference embedding when
/// `attack.target_identity` is set.
fn effective_attack_config(
    ctx: &Ctx,
    embedder: &mut Embedder,
    train: &[LabeledImage],
) -> Result<(AttackConfig, Option<Embedding>)> {
    let mut cfg = ctx.cfg.attack.config.clone();
    let mut target = None;
    if let Some(id) = ctx.cfg.attack.target_identity {
        let imgs: Vec<&Image> = train
            .iter()
            .filter(|s| s.identity_id == id)
            .map(|s| &s.image)
            .collect();
        if imgs.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "target identity {id} has no training images"
            )));
        }
        let reference = identity_reference(embedder, &imgs)?;
        cfg.adv = AdvLossVariant::targeted(cfg.adv.kind, reference.clone());
        target = Some(reference);
    }
    cfg.validate()?;
    Ok((cfg, target))
}

pub fn cmd_train_attack(ctx: &Ctx) -> Result<()> {
    let ds = require_dataset(ctx)?;
    let (mut emb, _, emb_manifest) = load_embedder(ctx, "embedder.whitebox")?;
    let (acfg, target) = effective_attack_config(ctx, &mut emb, &ds.train)?;
    let (model, disc, report) = train_attack(&mut emb, &ds.train, &acfg)?;
    let meta = serde_json::json!({
        "targeted": acfg.adv.targeted,
        "target_identity": ctx.cfg.attack.target_identity,
        "target": target.as_ref().map(|t| t.values().to_vec()),
        "pert": acfg.pert,
        "use_discriminator": acfg.use_discriminator,
        "embedder_sha": emb_manifest.weights_sha256,
    });
    save_checkpoint(
        &ctx.out_dir,
        "attack",
        &model,
        "attack",
        model.param_count(),
        acfg.seed,
        meta,
    )?;
    if let Some(d) = &disc {
        save_checkpoint(
            &ctx.out_dir,
            "discriminator",
            d,
            "discriminator",
            d.param_count(),
            d.spec.seed,
            serde_json::json!({ "spec": d.spec }),
        )?;
    }
    write_loss_log_csv(&ctx.out_dir.join("attack_loss.csv"), &report.loss_log)?;
    std::fs::write(
        ctx.out_dir.join("attack_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    ctx.write_inputs("train-attack", &[("embedder.whitebox", &emb_manifest)])?;
    ctx.write_resolved("train-attack")?;
    println!(
        "attack trained: {} params, {} steps, {:.1}s",
        model.param_count(),
        report.loss_log.len(),
        report.total_seconds()
    );
    Ok(())
}

fn load_attack(ctx: &Ctx) -> Result<(AttackModel, CheckpointManifest)> {
    load_checkpoint(&ctx.out_dir.join("attack.manifest.json"))
}

fn load_student(ctx: &Ctx) -> Result<(Student, CheckpointManifest)> {
    load_checkpoint(&ctx.out_dir.join("student.manifest.json"))
}

pub fn cmd_distill(ctx: &Ctx) -> Result<()> {
    let ds = require_dataset(ctx)?;
    let (mut teacher, teacher_manifest) = load_attack(ctx)?;
    let mut dcfg: DistillConfig = ctx.cfg.distill.clone();
    if dcfg.student_spec.is_none() {
        dcfg.student_spec = Some(StudentSpec::default_for(teacher.generator.spec.output_shape));
    }
    let (student, report) = distill(&mut teacher, &ds.train, &dcfg)?;
    let meta = serde_json::json!({
        "teacher_sha": teacher_manifest.weights_sha256,
        "config": dcfg,
        "spec": student.spec,
    });
    save_checkpoint(
        &ctx.out_dir,
        "student",
        &student,
        "student",
        report.student_params,
        student.spec.seed,
        meta,
    )?;
    std::fs::write(
        ctx.out_dir.join("distill_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    ctx.write_inputs("distill", &[("attack", &teacher_manifest)])?;
    ctx.write_resolved("distill")?;
    println!(
        "student: {} params ({:.3}x teacher), final val mse {:.3e}",
        report.student_params,
        report.student_params as f64 / report.teacher_params as f64,
        report.val_loss_per_epoch.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval_mode_from_attack(manifest: &CheckpointManifest) -> Result<EvalMode> {
    if manifest.metadata["targeted"].as_bool() == Some(true) {
        let values: Vec<f64> = serde_json::from_value(manifest.metadata["target"].clone())?;
        Ok(EvalMode::Targeted { target: Embedding::new(Array1::from_vec(values))? })
    } else {
        Ok(EvalMode::Untargeted)
    }
}

pub fn cmd_evaluate(ctx: &Ctx) -> Result<()> {
    let ds = require_dataset(ctx)?;
    let (mut wb, wb_th, wb_manifest) = load_embedder(ctx, "embedder.whitebox")?;
    let (mut model, attack_manifest) = load_attack(ctx)?;
    let threshold = ctx.cloak_threshold();
    let mode = eval_mode_from_attack(&attack_manifest)?;
    let p = EvalProtocol::build(&mut wb, &ds.test, mode, wb_th)?;

    // cloak once to collect visual/timing statistics
    let originals: Vec<Image> = ds.test.iter().map(|s| s.image.clone()).collect();
    let mut cloaked = Vec::with_capacity(originals.len());
    let mut linf_sum = 0.0;
    let mut secs_sum = 0.0;
    for img in &originals {
        let out = cloak(CloakModel::Teacher(&mut model), img, threshold)?;
        linf_sum += linf_norm(&out.delta);
        secs_sum += out.seconds;
        cloaked.push(out.image);
    }
    let n = originals.len() as f64;

    let mut teacher = Cloaker::Teacher { model: &mut model, threshold };
    let clean = attack_success_rate(&mut wb, &mut Cloaker::Identity, &ds.test, &p)?;
    let wb_rate = attack_success_rate(&mut wb, &mut teacher, &ds.test, &p)?;
    let blurred = robustness_under_blur(&mut wb, &mut teacher, &ds.test, &p, ctx.cfg.eval.blur)?;

    let bb_rate = if ctx.cfg.blackbox.enabled {
        let (mut bb, bb_th, _) = load_embedder(ctx, "embedder.blackbox")?;
        let mode = eval_mode_from_attack(&attack_manifest)?;
        let bb_p = EvalProtocol::build(&mut bb, &ds.test, mode, bb_th)?;
        Some(attack_success_rate(&mut bb, &mut teacher, &ds.test, &bb_p)?)
    } else {
        None
    };

    let detectability = {
        let disc_manifest = ctx.out_dir.join("discriminator.manifest.json");
        if disc_manifest.exists() {
            let (mut disc, _): (Discriminator, _) = load_checkpoint(&disc_manifest)?;
            Some(detectability_probe(&mut disc, &originals, &cloaked)?)
        } else {
            None
        }
    };

    let report = EvalReport {
        success_rate_whitebox: wb_rate,
        success_rate_blackbox: bb_rate,
        success_rate_whitebox_blurred: blurred,
        clean_false_non_match_rate: clean,
        ssim: ssim_report(&originals, &cloaked, &ctx.cfg.eval.ssim)?,
        mean_linf_delta: linf_sum / n,
        mean_cloak_seconds: secs_sum / n,
        shift: embedding_shift_stats(&mut wb, &originals, &cloaked, &p)?,
        detectability,
        blur: ctx.cfg.eval.blur,
    };
    report.validate()?;
    std::fs::write(
        ctx.out_dir.join("eval_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    ctx.write_inputs(
        "evaluate",
        &[("embedder.whitebox", &wb_manifest), ("attack", &attack_manifest)],
    )?;
    ctx.write_resolved("evaluate")?;
    println!(
        "whitebox {:.3}  blackbox {}  blurred {:.3}  clean-fnmr {:.3}  ssim {:.4}",
        report.success_rate_whitebox,
        report
            .success_rate_blackbox
            .map(|r| format!("{r:.3}"))
            .unwrap_or_else(|| "-".into()),
        report.success_rate_whitebox_blurred,
        report.clean_false_non_match_rate,
        report.ssim.mean
    );
    Ok(())
}

pub fn cmd_visualize(ctx: &Ctx) -> Result<()> {
    let ds = require_dataset(ctx)?;
    let (mut wb, _, wb_manifest) = load_embedder(ctx, "embedder.whitebox")?;
    let (mut model, attack_manifest) = load_attack(ctx)?;
    let threshold = ctx.cloak_threshold();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut meta: Vec<(u32, u32, &'static str)> = Vec::new();
    for s in &ds.test {
        let e = wb.embed(&s.image)?;
        rows.push(e.values().to_vec());
        meta.push((s.identity_id, s.image_id, "original"));
    }
    for s in &ds.test {
        let out = cloak(CloakModel::Teacher(&mut model), &s.image, threshold)?;
        let e = wb.embed(&out.image)?;
        rows.push(e.values().to_vec());
        meta.push((s.identity_id, s.image_id, "cloaked"));
    }
    if let EvalMode::Targeted { target } = eval_mode_from_attack(&attack_manifest)? {
        let id = attack_manifest.metadata["target_identity"].as_u64().unwrap_or(0) as u32;
        rows.push(target.values().to_vec());
        meta.push((id, 0, "target"));
    }

    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let matrix = Array2::from_shape_vec((rows.len(), d), flat)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let tsne_cfg = TsneConfig::for_n(rows.len(), ctx.cfg.eval.tsne_seed);
    let result = tsne(&matrix, &tsne_cfg)?;
    let points: Vec<TsnePoint> = meta
        .iter()
        .zip(result.points.rows())
        .map(|(&(identity_id, image_id, kind), row)| TsnePoint {
            identity_id,
            image_id,
            kind: kind.to_string(),
            x: row[0],
            y: row[1],
        })
        .collect();
    write_tsne_csv(&ctx.out_dir.join("tsne.csv"), &points)?;
    cloak_core::embedder::write_embeddings_csv(
        &ctx.out_dir.join("embeddings.csv"),
        &mut wb,
        &ds.test,
    )?;
    render_scatter(&points, ctx.cfg.eval.plot_side, &ctx.out_dir.join("tsne.png"))?;
    ctx.write_inputs(
        "visualize",
        &[("embedder.whitebox", &wb_manifest), ("attack", &attack_manifest)],
    )?;
    ctx.write_resolved("visualize")?;
    println!("wrote tsne.csv and tsne.png ({} points)", points.len());
    Ok(())
}

pub fn cmd_cloak(ctx: &Ctx, input: &Path, output: &Path, use_student: bool) -> Result<()> {
    let image = pngio::load_png(input)?;
    let threshold = ctx.cloak_threshold();
    let out = if use_student {
        let (mut student, _) = load_student(ctx)?;
        cloak(CloakModel::Student(&mut student), &image, threshold)?
    } else {
        let (mut model, _) = load_attack(ctx)?;
        cloak(CloakModel::Teacher(&mut model), &image, threshold)?
    };
    pngio::save_png(&out.image, output)?;
    println!("{:.6}", out.seconds);
    Ok(())
}

pub fn cmd_pipeline(ctx: &Ctx) -> Result<()> {
    cmd_synth_data(ctx)?;
    cmd_train_embedder(ctx)?;
    cmd_train_attack(ctx)?;
    cmd_distill(ctx)?;
    cmd_evaluate(ctx)?;
    cmd_visualize(ctx)?;
    ctx.write_resolved("pipeline")
}
