//! Knowledge distillation: regresses the student U-Net's perturbation onto
//! the frozen teacher's perturbation per image (plain MSE — the outputs are
//! continuous, so no logit-temperature machinery applies).

use std::time::Instant;

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{build_student, Student, StudentSpec};
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::nn::{stack_samples, Adam, Tensor};
use crate::training::{AttackModel, OptimizerConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Derived from the teacher's output shape when absent.
    #[serde(default)]
    pub student_spec: Option<StudentSpec>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            optimizer: OptimizerConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999 },
            epochs: 40,
            batch_size: 32,
            seed: 53,
            student_spec: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(Error::InvalidConfig("optimizer lr must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DistillReport {
    pub teacher_params: usize,
    pub student_params: usize,
    pub epoch_seconds: Vec<f64>,
    /// (step, batch MSE) per optimisation step.
    pub loss_log: Vec<(usize, f64)>,
    /// MSE on a fixed held-back batch at the end of each epoch.
    pub val_loss_per_epoch: Vec<f64>,
    /// Attack success rates on the test split; filled by the evaluation
    /// layer after distillation.
    pub teacher_success: Option<f64>,
    pub student_success: Option<f64>,
}

fn batch_mse_and_grad(student_out: &Tensor, teacher_out: &Tensor) -> (f64, Tensor) {
    let diff = student_out - teacher_out;
    let n = diff.len() as f64;
    let mse = diff.mapv(|v| v * v).sum() / n;
    (mse, diff.mapv(|v| 2.0 * v / n))
}

/// Teacher perturbations for a batch, evaluation mode (frozen weights).
fn teacher_deltas(teacher: &mut AttackModel, x: &Tensor) -> Tensor {
    let feats = teacher.features.forward(x, false);
    teacher.generator.forward_batch(&feats, false)
}

/// Distills the teacher into a fresh student built from `cfg.student_spec`
/// (or the default for the teacher's output shape). The teacher is read-only;
/// its weights are bit-identical afterwards.
pub fn distill(
    teacher: &mut AttackModel,
    data: &[LabeledImage],
    cfg: &DistillConfig,
) -> Result<(Student, DistillReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("distillation set is empty".into()));
    }
    let out_shape = teacher.generator.spec.output_shape;
    let spec = cfg
        .student_spec
        .clone()
        .unwrap_or_else(|| StudentSpec::default_for(out_shape));
    if spec.input_shape != out_shape {
        return Err(Error::shape(
            format!("{out_shape:?}"),
            format!("{:?}", spec.input_shape),
        ));
    }
    let teacher_params = teacher.param_count();
    let mut student = build_student(&spec, teacher_params)?;

    let mut report = DistillReport {
        teacher_params,
        student_params: student.param_count(),
        ..DistillReport::default()
    };

    // fixed validation batch: the first images, never shuffled
    let val_count = cfg.batch_size.min(data.len());
    let val_samples: Vec<Array3<f64>> =
        data[..val_count].iter().map(|s| s.image.data().clone()).collect();
    let val_x = stack_samples(&val_samples);
    let val_teacher = teacher_deltas(teacher, &val_x);

    let mut adam = Adam::new(cfg.optimizer.lr, cfg.optimizer.beta1, cfg.optimizer.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<Array3<f64>> =
                chunk.iter().map(|&i| data[i].image.data().clone()).collect();
            let x = stack_samples(&samples);
            let target = teacher_deltas(teacher, &x);
            let out = student.forward_batch(&x, true);
            let (mse, grad) = batch_mse_and_grad(&out, &target);
            student.backward(&grad);
            adam.step(student.params_mut());
            report.loss_log.push((step, mse));
            step += 1;
        }
        let val_out = student.forward_batch(&val_x, false);
        report.val_loss_per_epoch.push(batch_mse_and_grad(&val_out, &val_teacher).0);
        report.epoch_seconds.push(t0.elapsed().as_secs_f64());
    }

    student.clear_caches();
    teacher.clear_caches();
    Ok((student, report))
}
