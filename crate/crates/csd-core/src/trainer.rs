//! The joint student/teacher training loop: one weight-shared backbone
//! forwarded at two widths, L1 reconstruction on both outputs, and the
//! contrastive term steering the student slice — with the teacher branch
//! held constant (stop-gradient) in the default strategy.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{build_backbone, BackboneConfig, BackboneGrads, SRBackbone, WidthMultiplier};
use crate::checkpoint::{meta_field, Container};
use crate::data::{make_negatives, sample_batch, NegativeSet, PairedDataset, PatchBatch};
use crate::embedding::Extractor;
use crate::error::{Error, Result};
use crate::eval::{psnr, rgb_to_y};
use crate::losses::{
    contrastive_loss_with_grad, infonce_loss_with_grad, perceptual_loss_with_grad,
    reconstruction_loss, reconstruction_loss_with_grad, LossReport,
};

/// Training strategy: the default plus the ablations it is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Joint recon + contrastive loss, teacher constant in the contrastive
    /// term (stop-gradient).
    Csd,
    /// Csd without the teacher reconstruction term.
    CsdA,
    /// Csd without the stop-gradient: contrastive gradients also reach
    /// teacher-exclusive parameters.
    CsdB,
    /// Joint reconstruction only; no contrastive term.
    Jt1,
    /// Train the configured width alone with plain reconstruction.
    Individual,
    /// Csd with the ground-truth patch as the contrastive positive.
    CsdGtPos,
    /// Student is an independent network (no weight sharing with the teacher).
    TsSeparate,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Strategy> {
        Ok(match s {
            "csd" => Strategy::Csd,
            "csd-a" => Strategy::CsdA,
            "csd-b" => Strategy::CsdB,
            "jt1" => Strategy::Jt1,
            "individual" => Strategy::Individual,
            "gt-pos" => Strategy::CsdGtPos,
            "ts-separate" => Strategy::TsSeparate,
            other => {
                return Err(Error::Config(format!(
                    "unknown strategy `{other}` (expected csd|csd-a|csd-b|jt1|individual|gt-pos|ts-separate)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Csd => "csd",
            Strategy::CsdA => "csd-a",
            Strategy::CsdB => "csd-b",
            Strategy::Jt1 => "jt1",
            Strategy::Individual => "individual",
            Strategy::CsdGtPos => "gt-pos",
            Strategy::TsSeparate => "ts-separate",
        }
    }

    /// Does this strategy forward the teacher branch at all?
    fn uses_teacher(self) -> bool {
        self != Strategy::Individual
    }

    /// Does the total loss include the teacher reconstruction term?
    fn teacher_recon(self) -> bool {
        matches!(
            self,
            Strategy::Csd | Strategy::CsdB | Strategy::Jt1 | Strategy::CsdGtPos | Strategy::TsSeparate
        )
    }

    /// Does the total loss include a contrastive term?
    pub fn uses_contrast(self) -> bool {
        matches!(
            self,
            Strategy::Csd | Strategy::CsdA | Strategy::CsdB | Strategy::CsdGtPos | Strategy::TsSeparate
        )
    }

    /// Do contrastive gradients flow into the positive (teacher) branch?
    fn backprops_positive(self) -> bool {
        self == Strategy::CsdB
    }
}

/// Which auxiliary loss couples student to teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// The ratio loss: feature L1 to the positive over summed feature L1 to
    /// the negatives.
    Csd,
    /// Softmax contrast over cosine similarities on the deepest tap.
    InfoNce,
    /// Feature L1 to the positive alone; negatives unused.
    Perceptual,
    /// No auxiliary term.
    None,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<LossKind> {
        Ok(match s {
            "csd" => LossKind::Csd,
            "infonce" => LossKind::InfoNce,
            "perceptual" => LossKind::Perceptual,
            "none" => LossKind::None,
            other => {
                return Err(Error::Config(format!(
                    "unknown loss kind `{other}` (expected csd|infonce|perceptual|none)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Csd => "csd",
            LossKind::InfoNce => "infonce",
            LossKind::Perceptual => "perceptual",
            LossKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TeacherInit {
    Random,
    Checkpoint(PathBuf),
}

/// Hyperparameters of one training run. `default()` gives the reference
/// recipe: batch 16, 300 epochs of 1000 steps, Adam(0.9, 0.999, 1e-8) at
/// 1e-4 decayed 10x every 2e5 iterations, lambda_T 1, lambda_C 200, K 10
/// negatives, 192-pixel HR patches, width 0.25.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub r_w: WidthMultiplier,
    pub batch: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr0: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda_t: f64,
    pub lambda_c: f64,
    pub k_negatives: usize,
    pub negatives_shared: bool,
    pub patch: usize,
    pub seed: u64,
    pub teacher_init: TeacherInit,
    pub loss_kind: LossKind,
    pub epsilon: f64,
    pub temperature: f64,
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            r_w: WidthMultiplier::new(0.25).expect("valid width"),
            batch: 16,
            epochs: 300,
            steps_per_epoch: 1000,
            lr0: 1e-4,
            decay_every: 200_000,
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_t: 1.0,
            lambda_c: 200.0,
            k_negatives: 10,
            negatives_shared: false,
            patch: 192,
            seed: 0,
            teacher_init: TeacherInit::Random,
            loss_kind: LossKind::Csd,
            epsilon: crate::losses::DEFAULT_EPSILON,
            temperature: 0.07,
            validate_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch == 0 {
            errs.push("batch must be >= 1".to_string());
        }
        if self.steps_per_epoch == 0 {
            errs.push("steps_per_epoch must be >= 1".to_string());
        }
        if self.lr0 <= 0.0 {
            errs.push("lr0 must be positive".to_string());
        }
        if self.decay_every == 0 {
            errs.push("decay_every must be >= 1".to_string());
        }
        if !(0.0 < self.decay_factor && self.decay_factor <= 1.0) {
            errs.push("decay_factor must be in (0, 1]".to_string());
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 <= v && v < 1.0) {
                errs.push(format!("{name} must be in [0, 1)"));
            }
        }
        if self.adam_eps <= 0.0 {
            errs.push("adam epsilon must be positive".to_string());
        }
        if self.lambda_t < 0.0 || self.lambda_c < 0.0 {
            errs.push("loss weights must be non-negative".to_string());
        }
        if self.k_negatives == 0 {
            errs.push("k_negatives must be >= 1".to_string());
        }
        if self.patch == 0 {
            errs.push("patch must be >= 1".to_string());
        }
        if self.epsilon <= 0.0 {
            errs.push("contrastive epsilon must be positive".to_string());
        }
        if self.temperature <= 0.0 {
            errs.push("temperature must be positive".to_string());
        }
        if self.validate_every == 0 {
            errs.push("validate_every must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else if errs.len() == 1 {
            Err(Error::Config(errs.pop().unwrap()))
        } else {
            Err(Error::ConfigList(errs))
        }
    }
}

/// Step-decayed learning rate: `lr0 * decay_factor^floor(iter / decay_every)`.
pub fn lr_at(iteration: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((iteration / cfg.decay_every as u64) as i32)
}

/// The data RNG for one iteration, a pure function of `(seed, iteration)` so
/// a resumed run draws exactly the batches the uninterrupted run would.
/// Stream 0 is reserved for weight initialization.
pub fn step_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration.wrapping_add(1));
    rng
}

/// Adam with bias correction, one moment pair per conv layer. Layers whose
/// gradient is identically zero retain zero moments and do not move.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    pub t: u64,
    m: Vec<(Array4<f64>, Array1<f64>)>,
    v: Vec<(Array4<f64>, Array1<f64>)>,
}

impl Adam {
    pub fn new(net: &SRBackbone, beta1: f64, beta2: f64, eps: f64) -> Adam {
        let zeros: Vec<(Array4<f64>, Array1<f64>)> = net
            .layers()
            .iter()
            .map(|l| (Array4::zeros(l.weight.dim()), Array1::zeros(l.bias.dim())))
            .collect();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, net: &mut SRBackbone, grads: &BackboneGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((layer, (mw, mb)), (vw, vb)), (gw, gb)) in net
            .layers_mut()
            .into_iter()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .zip(grads.layers.iter())
        {
            ndarray::Zip::from(&mut layer.weight)
                .and(mw)
                .and(vw)
                .and(gw)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
            ndarray::Zip::from(&mut layer.bias)
                .and(mb)
                .and(vb)
                .and(gb)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

/// What a finished run amounts to, for command-line reporting.
#[derive(Debug, Clone, Copy)]
pub struct TrainerSummary {
    pub iterations: u64,
    pub final_loss: f64,
    pub best_psnr: f64,
}

/// One history CSV row; columns `iter,loss_total,loss_recS,loss_recT,loss_cl,lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iter: u64,
    pub loss_total: f64,
    pub loss_rec_s: f64,
    pub loss_rec_t: f64,
    pub loss_cl: f64,
    pub lr: f64,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let to_io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    w.write_record(["iter", "loss_total", "loss_recS", "loss_recT", "loss_cl", "lr"])
        .map_err(to_io)?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            r.loss_total.to_string(),
            r.loss_rec_s.to_string(),
            r.loss_rec_t.to_string(),
            r.loss_cl.to_string(),
            r.lr.to_string(),
        ])
        .map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A training run: the shared backbone (and the separate student for the
/// no-sharing ablation), optimizer state, and progress counters.
pub struct Trainer {
    pub net: SRBackbone,
    pub student: Option<SRBackbone>,
    pub opt: Adam,
    pub opt_student: Option<Adam>,
    pub extractor: Extractor,
    pub cfg: TrainConfig,
    pub strategy: Strategy,
    pub iteration: u64,
    pub epoch: usize,
    pub best_psnr: f64,
}

impl Trainer {
    pub fn new(
        backbone: &BackboneConfig,
        cfg: TrainConfig,
        strategy: Strategy,
        extractor: Extractor,
    ) -> Result<Trainer> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = match &cfg.teacher_init {
            TeacherInit::Random => build_backbone(backbone, &mut rng)?,
            TeacherInit::Checkpoint(path) => {
                let net = SRBackbone::load(path)?;
                if net.cfg != *backbone {
                    return Err(Error::Config(format!(
                        "teacher checkpoint architecture {:?} does not match the configured {:?}",
                        net.cfg, backbone
                    )));
                }
                net
            }
        };
        let (student, opt_student) = if strategy == Strategy::TsSeparate {
            let scfg = BackboneConfig {
                base_width: cfg.r_w.channels(backbone.base_width),
                ..backbone.clone()
            };
            let s = build_backbone(&scfg, &mut rng)?;
            let o = Adam::new(&s, cfg.beta1, cfg.beta2, cfg.adam_eps);
            (Some(s), Some(o))
        } else {
            (None, None)
        };
        let opt = Adam::new(&net, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Trainer {
            net,
            student,
            opt,
            opt_student,
            extractor,
            cfg,
            strategy,
            iteration: 0,
            epoch: 0,
            best_psnr: f64::NEG_INFINITY,
        })
    }

    /// One optimizer update. Gradient routing per strategy:
    /// - reconstruction gradients flow to the branch that produced them;
    /// - the contrastive term pushes only the student branch unless the
    ///   strategy disables the stop-gradient;
    /// - the extractor never receives parameter gradients.
    pub fn train_step(
        &mut self,
        batch: &PatchBatch,
        negatives: Option<&NegativeSet>,
    ) -> Result<LossReport> {
        let r = self.cfg.r_w;
        let full = WidthMultiplier::FULL;
        let hr = &batch.hr;

        // Student branch forward.
        let separate = self.strategy == Strategy::TsSeparate;
        let (o_s, cache_s) = if separate {
            self.student
                .as_ref()
                .expect("separate student")
                .forward_train(&batch.lr, full)?
        } else {
            self.net.forward_train(&batch.lr, r)?
        };

        // Teacher branch forward.
        let teacher = if self.strategy.uses_teacher() {
            Some(self.net.forward_train(&batch.lr, full)?)
        } else {
            None
        };

        // Reconstruction terms.
        let (rec_s, g_rec_s) = reconstruction_loss_with_grad(&o_s, hr);
        let rec_t = teacher
            .as_ref()
            .map(|(o_t, _)| reconstruction_loss(o_t, hr))
            .unwrap_or(0.0);

        // Contrastive term.
        let mut cl = 0.0;
        let mut g_cl_student: Option<Array4<f64>> = None;
        let mut g_cl_teacher: Option<Array4<f64>> = None;
        let wants_contrast =
            self.strategy.uses_contrast() && self.cfg.loss_kind != LossKind::None;
        if wants_contrast {
            let negs = negatives.ok_or_else(|| {
                Error::Config(format!(
                    "strategy {} with loss kind {} needs negative samples",
                    self.strategy.name(),
                    self.cfg.loss_kind.name()
                ))
            })?;
            let positive_img: &Array4<f64> = match (self.strategy, &teacher) {
                (Strategy::CsdGtPos, _) => hr,
                (_, Some((o_t, _))) => o_t,
                (s, None) => {
                    return Err(Error::Config(format!(
                        "strategy {} has no positive branch",
                        s.name()
                    )))
                }
            };
            let (feat_a, cache_a) = self.extractor.features_train(&o_s);
            // The positive only needs a backward path when the stop-gradient
            // is disabled.
            let backprop_pos = self.strategy.backprops_positive();
            let (feat_p, cache_p) = if backprop_pos {
                let (f, c) = self.extractor.features_train(positive_img);
                (f, Some(c))
            } else {
                (self.extractor.features(positive_img), None)
            };
            let lam_c = self.cfg.lambda_c;
            match self.cfg.loss_kind {
                LossKind::Csd | LossKind::Perceptual => {
                    let neg_feats: Vec<Vec<Array4<f64>>> = negs
                        .imgs
                        .iter()
                        .map(|img| self.extractor.features(img))
                        .collect();
                    let parts = if self.cfg.loss_kind == LossKind::Csd {
                        contrastive_loss_with_grad(
                            &feat_a,
                            &feat_p,
                            &neg_feats,
                            &self.extractor.tap_weights,
                            self.cfg.epsilon,
                        )?
                    } else {
                        perceptual_loss_with_grad(&feat_a, &feat_p, &self.extractor.tap_weights)?
                    };
                    cl = parts.loss;
                    let scaled: Vec<Array4<f64>> = parts
                        .anchor_grads
                        .iter()
                        .map(|g| g.mapv(|v| v * lam_c))
                        .collect();
                    g_cl_student = Some(self.extractor.backward_to_input(&cache_a, &scaled));
                    if let Some(cp) = &cache_p {
                        let scaled_p: Vec<Array4<f64>> = parts
                            .positive_grads
                            .iter()
                            .map(|g| g.mapv(|v| v * lam_c))
                            .collect();
                        g_cl_teacher = Some(self.extractor.backward_to_input(cp, &scaled_p));
                    }
                }
                LossKind::InfoNce => {
                    let deep = feat_a.len() - 1;
                    let neg_deep: Vec<Array4<f64>> = negs
                        .imgs
                        .iter()
                        .map(|img| {
                            self.extractor
                                .features(img)
                                .pop()
                                .expect("at least one tap")
                        })
                        .collect();
                    let parts = infonce_loss_with_grad(
                        &feat_a[deep],
                        &feat_p[deep],
                        &neg_deep,
                        self.cfg.temperature,
                    )?;
                    cl = parts.loss;
                    let mut taps: Vec<Array4<f64>> = feat_a
                        .iter()
                        .map(|f| Array4::zeros(f.dim()))
                        .collect();
                    taps[deep] = parts.anchor_grads[0].mapv(|v| v * lam_c);
                    g_cl_student = Some(self.extractor.backward_to_input(&cache_a, &taps));
                    if let Some(cp) = &cache_p {
                        let mut taps: Vec<Array4<f64>> = feat_p
                            .iter()
                            .map(|f| Array4::zeros(f.dim()))
                            .collect();
                        taps[deep] = parts.positive_grads[0].mapv(|v| v * lam_c);
                        g_cl_teacher = Some(self.extractor.backward_to_input(cp, &taps));
                    }
                }
                LossKind::None => unreachable!("guarded above"),
            }
        }

        // Assemble the scalar total mirroring the gradient flow below.
        let student_rec_coeff = if self.strategy == Strategy::Individual {
            1.0
        } else {
            self.cfg.lambda_t
        };
        let mut total = student_rec_coeff * rec_s + self.cfg.lambda_c * cl;
        if self.strategy.teacher_recon() {
            total += rec_t;
        }
        if !total.is_finite() {
            return Err(Error::TrainAbort {
                iteration: self.iteration,
                reason: format!(
                    "non-finite loss (total={total}, rec_s={rec_s}, rec_t={rec_t}, cl={cl})"
                ),
            });
        }

        // Student branch backward.
        let mut g_s = g_rec_s.mapv(|v| v * student_rec_coeff);
        if let Some(g) = &g_cl_student {
            g_s += g;
        }
        let mut grads = BackboneGrads::zero_like(&self.net);
        let mut grads_sep = separate.then(|| {
            BackboneGrads::zero_like(self.student.as_ref().expect("separate student"))
        });
        if separate {
            self.student.as_ref().expect("separate student").backward(
                &cache_s,
                &g_s,
                grads_sep.as_mut().expect("separate grads"),
            );
        } else {
            self.net.backward(&cache_s, &g_s, &mut grads);
        }

        // Teacher branch backward.
        if let Some((o_t, cache_t)) = &teacher {
            let mut g_t: Option<Array4<f64>> = None;
            if self.strategy.teacher_recon() {
                let (_, g) = reconstruction_loss_with_grad(o_t, hr);
                g_t = Some(g);
            }
            if let Some(gp) = g_cl_teacher {
                g_t = Some(match g_t {
                    Some(mut g) => {
                        g += &gp;
                        g
                    }
                    None => gp,
                });
            }
            if let Some(g) = g_t {
                self.net.backward(cache_t, &g, &mut grads);
            }
        }

        let lr = lr_at(self.iteration, &self.cfg);
        self.opt.step(&mut self.net, &grads, lr);
        if let (Some(student), Some(opt), Some(g)) = (
            self.student.as_mut(),
            self.opt_student.as_mut(),
            grads_sep.as_ref(),
        ) {
            opt.step(student, g, lr);
        }
        self.iteration += 1;

        Ok(LossReport {
            total,
            rec_student: rec_s,
            rec_teacher: rec_t,
            contrastive: cl,
        })
    }

    /// Mean student / teacher validation PSNR over at most `max_images`.
    pub fn validate(&self, val: &PairedDataset, max_images: usize) -> Result<(f64, f64)> {
        let n = val.len().min(max_images);
        if n == 0 {
            return Err(Error::Config("empty validation set".into()));
        }
        let shave = self.net.cfg.scale;
        let (mut ps, mut pt) = (0.0, 0.0);
        for i in 0..n {
            let (lr_img, hr_img) = val.load_pair(i)?;
            let (c, h, w) = lr_img.dim();
            let mut x = Array4::<f64>::zeros((1, c, h, w));
            x.index_axis_mut(ndarray::Axis(0), 0).assign(&lr_img);
            let hr_y = rgb_to_y(&hr_img);
            let student_out = if let Some(s) = &self.student {
                s.forward(&x, WidthMultiplier::FULL)?
            } else {
                self.net.forward(&x, self.cfg.r_w)?
            };
            let sr = student_out
                .index_axis(ndarray::Axis(0), 0)
                .mapv(|v| v.clamp(0.0, 1.0));
            ps += psnr(&rgb_to_y(&sr), &hr_y, shave)?;
            let teacher_out = self.net.forward(&x, WidthMultiplier::FULL)?;
            let sr_t = teacher_out
                .index_axis(ndarray::Axis(0), 0)
                .mapv(|v| v.clamp(0.0, 1.0));
            pt += psnr(&rgb_to_y(&sr_t), &hr_y, shave)?;
        }
        Ok((ps / n as f64, pt / n as f64))
    }

    /// Run the remaining epochs. Emits `history.csv` after every epoch,
    /// validates every `validate_every` epochs (when a validation set is
    /// given), and keeps `best.csdc` / `last.csdc` under `out_dir`. On a
    /// non-finite loss the state is dumped to `abort_state.csdc` and the
    /// error propagates.
    pub fn fit(
        &mut self,
        train: &PairedDataset,
        val: Option<&PairedDataset>,
        out_dir: &Path,
    ) -> Result<Vec<HistoryRow>> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let needs_negs = self.strategy.uses_contrast() && self.cfg.loss_kind != LossKind::None;
        let mut history = Vec::new();
        while self.epoch < self.cfg.epochs {
            for _ in 0..self.cfg.steps_per_epoch {
                let mut rng = step_rng(self.cfg.seed, self.iteration);
                let batch = sample_batch(train, self.cfg.batch, self.cfg.patch, &mut rng)?;
                let negs = if needs_negs {
                    Some(make_negatives(
                        &batch,
                        self.cfg.k_negatives,
                        &mut rng,
                        self.cfg.negatives_shared,
                    )?)
                } else {
                    None
                };
                let lr = lr_at(self.iteration, &self.cfg);
                let report = match self.train_step(&batch, negs.as_ref()) {
                    Ok(rep) => rep,
                    Err(e) => {
                        if matches!(e, Error::TrainAbort { .. }) {
                            let _ = self.save_state(&out_dir.join("abort_state.csdc"));
                            let _ = write_history(&out_dir.join("history.csv"), &history);
                        }
                        return Err(e);
                    }
                };
                history.push(HistoryRow {
                    iter: self.iteration,
                    loss_total: report.total,
                    loss_rec_s: report.rec_student,
                    loss_rec_t: report.rec_teacher,
                    loss_cl: report.contrastive,
                    lr,
                });
            }
            self.epoch += 1;
            write_history(&out_dir.join("history.csv"), &history)?;
            if let Some(val) = val {
                if self.epoch % self.cfg.validate_every == 0 || self.epoch == self.cfg.epochs {
                    let (ps, pt) = self.validate(val, 10)?;
                    eprintln!(
                        "epoch {:>4}  iter {:>8}  val psnr: student {ps:.3} dB, teacher {pt:.3} dB",
                        self.epoch, self.iteration
                    );
                    if ps > self.best_psnr {
                        self.best_psnr = ps;
                        self.save_state(&out_dir.join("best.csdc"))?;
                    }
                    self.save_state(&out_dir.join("last.csdc"))?;
                }
            }
        }
        write_history(&out_dir.join("history.csv"), &history)?;
        self.save_state(&out_dir.join("last.csdc"))?;
        Ok(history)
    }

    /// Serialize the full training state: weights, optimizer moments and
    /// counters. Loading reproduces the run bit-for-bit because each
    /// iteration's data RNG derives from `(seed, iteration)`.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(serde_json::json!({
            "kind": "train_state",
            "iteration": self.iteration,
            "epoch": self.epoch,
            // JSON cannot hold -inf (the starting value), so absent == none yet.
            "best_psnr": self.best_psnr.is_finite().then_some(self.best_psnr),
            "strategy": self.strategy.name(),
            "adam_t": self.opt.t,
            "student_adam_t": self.opt_student.as_ref().map(|o| o.t),
            "r_w": self.cfg.r_w.value(),
            "seed": self.cfg.seed,
            "backbone": {
                "base_width": self.net.cfg.base_width,
                "n_blocks": self.net.cfg.n_blocks,
                "scale": self.net.cfg.scale,
                "res_scale": self.net.cfg.res_scale,
                "rgb_mean": self.net.cfg.rgb_mean,
            },
        }));
        let pack = |c: &mut Container, prefix: &str, net: &SRBackbone, opt: &Adam| {
            for (name, layer) in net.layer_names().iter().zip(net.layers()) {
                c.insert(&format!("{prefix}.{name}.weight"), layer.weight.clone());
                c.insert(&format!("{prefix}.{name}.bias"), layer.bias.clone());
            }
            for (i, ((mw, mb), (vw, vb))) in opt.m.iter().zip(opt.v.iter()).enumerate() {
                c.insert(&format!("{prefix}.opt.{i}.mw"), mw.clone());
                c.insert(&format!("{prefix}.opt.{i}.mb"), mb.clone());
                c.insert(&format!("{prefix}.opt.{i}.vw"), vw.clone());
                c.insert(&format!("{prefix}.opt.{i}.vb"), vb.clone());
            }
        };
        pack(&mut c, "net", &self.net, &self.opt);
        if let (Some(s), Some(o)) = (&self.student, &self.opt_student) {
            pack(&mut c, "student", s, o);
        }
        c.save(path)
    }

    /// Restore a trainer saved by [`Self::save_state`]. The caller supplies
    /// the same config and extractor the original run used; counters,
    /// weights and moments come from the file.
    pub fn load_state(
        path: &Path,
        cfg: TrainConfig,
        extractor: Extractor,
    ) -> Result<Trainer> {
        let c = Container::load(path)?;
        let kind: String = meta_field(path, &c.meta, "kind")?;
        if kind != "train_state" {
            return Err(Error::checkpoint(
                path,
                format!("expected a train_state container, found kind `{kind}`"),
            ));
        }
        let strategy = Strategy::parse(&meta_field::<String>(path, &c.meta, "strategy")?)?;
        let backbone_meta = c
            .meta
            .get("backbone")
            .cloned()
            .ok_or_else(|| Error::checkpoint(path, "missing backbone metadata"))?;
        let backbone = BackboneConfig {
            base_width: meta_field(path, &backbone_meta, "base_width")?,
            n_blocks: meta_field(path, &backbone_meta, "n_blocks")?,
            scale: meta_field(path, &backbone_meta, "scale")?,
            res_scale: meta_field(path, &backbone_meta, "res_scale")?,
            rgb_mean: meta_field(path, &backbone_meta, "rgb_mean")?,
        };

        let mut trainer = Trainer::new(
            &backbone,
            TrainConfig {
                teacher_init: TeacherInit::Random,
                ..cfg
            },
            strategy,
            extractor,
        )?;
        trainer.iteration = meta_field(path, &c.meta, "iteration")?;
        trainer.epoch = meta_field(path, &c.meta, "epoch")?;
        trainer.best_psnr = meta_field::<Option<f64>>(path, &c.meta, "best_psnr")?
            .unwrap_or(f64::NEG_INFINITY);
        trainer.opt.t = meta_field(path, &c.meta, "adam_t")?;
        if let Some(o) = trainer.opt_student.as_mut() {
            o.t = meta_field(path, &c.meta, "student_adam_t")?;
        }

        let unpack = |net: &mut SRBackbone, opt: &mut Adam, prefix: &str| -> Result<()> {
            let names = net.layer_names();
            for (name, layer) in names.iter().zip(net.layers_mut()) {
                let w = c.get(path, &format!("{prefix}.{name}.weight"))?;
                layer.weight = w
                    .clone()
                    .into_dimensionality()
                    .map_err(|e| Error::checkpoint(path, e.to_string()))?;
                let b = c.get(path, &format!("{prefix}.{name}.bias"))?;
                layer.bias = b
                    .clone()
                    .into_dimensionality()
                    .map_err(|e| Error::checkpoint(path, e.to_string()))?;
            }
            for i in 0..opt.m.len() {
                opt.m[i].0 = c
                    .get(path, &format!("{prefix}.opt.{i}.mw"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(|e| Error::checkpoint(path, e.to_string()))?;
                opt.m[i].1 = c
                    .get(path, &format!("{prefix}.opt.{i}.mb"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(|e| Error::checkpoint(path, e.to_string()))?;
                opt.v[i].0 = c
                    .get(path, &format!("{prefix}.opt.{i}.vw"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(|e| Error::checkpoint(path, e.to_string()))?;
                opt.v[i].1 = c
                    .get(path, &format!("{prefix}.opt.{i}.vb"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(|e| Error::checkpoint(path, e.to_string()))?;
            }
            Ok(())
        };
        // Split borrows: temporarily move the optimizer out.
        let mut opt = std::mem::replace(&mut trainer.opt, Adam::new(&trainer.net, 0.9, 0.999, 1e-8));
        unpack(&mut trainer.net, &mut opt, "net")?;
        trainer.opt = opt;
        if trainer.student.is_some() {
            let mut s = trainer.student.take().expect("student");
            let mut o = trainer.opt_student.take().expect("student optimizer");
            unpack(&mut s, &mut o, "student")?;
            trainer.student = Some(s);
            trainer.opt_student = Some(o);
        }
        Ok(trainer)
    }
}
