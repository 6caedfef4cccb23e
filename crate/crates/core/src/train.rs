//! The three training stages: foundation consistency training with
//! perceptual and adversarial terms, kernel-estimator pretraining on the
//! reblur loss, and control training over a frozen foundation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::Codec;
use crate::control::{ControlConfig, Discriminator, KernelControlNet, KernelEstimator, T_RANGE_MAX};
use crate::dataset::{BatchItem, LoadedDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::ImageArray;
use crate::losses::{discriminator_loss, ea_lpips_var, generator_gan_loss, reblur_loss, time_loss};
use crate::nn::{clip_grad_norm, cosine_lr, Adam, Bind};
use crate::pipeline::{conditioned_restore_var, load_estimator, save_estimator, Foundation};
use crate::schedule::ScheduleConfig;
use crate::tensor::Tensor;
use crate::unet::UNetConfig;

pub const METRICS_HEADER: &str = "step,l1,ealpips,gan_g,gan_d,reblur,time,grad_norm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Edge-aware perceptual term.
    pub lambda1: f64,
    /// Generator adversarial term.
    pub lambda2: f64,
    /// Reblur term.
    pub lambda3: f64,
    /// Timestep regression term.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.05, lambda3: 1.0, lambda4: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3), ("lambda4", self.lambda4)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 8, lr: 1e-4, checkpoint_every: 250 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub weights: LossWeights,
    pub clip_norm: f64,
    /// Per-point timesteps; `false` trains every point at `fixed_t`.
    pub consistency: bool,
    pub fixed_t: f64,
    /// Step at which the discriminator is created and the GAN terms start.
    pub gan_start: usize,
    pub disc_lr: f64,
    /// Batch share of `(sharp, sharp, t = 0)` pairs in stages 2 and 3.
    pub identity_fraction: f64,
    /// Random square symmetry and channel order per pair, shared by input
    /// and target.
    pub augment: bool,
    pub t_scale: f64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            weights: LossWeights::default(),
            clip_norm: 1.0,
            consistency: true,
            fixed_t: 200.0,
            gan_start: 0,
            disc_lr: 1e-4,
            identity_fraction: 0.125,
            augment: true,
            t_scale: T_RANGE_MAX,
            stage1: StageConfig::default(),
            stage2: StageConfig::default(),
            stage3: StageConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.clip_norm > 0.0) || !(self.t_scale > 0.0) || !(0.0..1.0).contains(&self.identity_fraction) {
            return Err(Error::Config("clip_norm and t_scale must be > 0, identity_fraction in [0, 1)".into()));
        }
        if !(1.0..=T_RANGE_MAX).contains(&self.fixed_t) {
            return Err(Error::Config(format!("fixed_t must lie in [1, {T_RANGE_MAX}]")));
        }
        for (i, s) in [&self.stage1, &self.stage2, &self.stage3].into_iter().enumerate() {
            if s.batch_size == 0 || !(s.lr > 0.0) {
                return Err(Error::Config(format!("stage{} needs batch_size >= 1 and lr > 0", i + 1)));
            }
        }
        Ok(())
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Foundation => &self.stage1,
            Stage::Estimator => &self.stage2,
            Stage::Control => &self.stage3,
        }
    }

    /// Conditioning timestep of a trajectory point.
    pub fn train_t(&self, t: usize) -> f64 {
        if self.consistency || t == 0 {
            t as f64
        } else {
            self.fixed_t
        }
    }
}

/// Architecture of the trainable models.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub control: ControlConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Foundation,
    Estimator,
    Control,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Self::Foundation),
            2 => Ok(Self::Estimator),
            3 => Ok(Self::Control),
            _ => Err(Error::InvalidArgument(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Self::Foundation => 1,
            Self::Estimator => 2,
            Self::Control => 3,
        }
    }

    fn kind(self) -> &'static str {
        match self {
            Self::Foundation => "foundation",
            Self::Estimator => "estimator",
            Self::Control => "control",
        }
    }
}

/// Fixed file layout of a training run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("{}.ckpt", stage.kind()))
    }

    pub fn metrics(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("stage{}_metrics.csv", stage.number()))
    }
}

/// Scalars of one optimizer step. Terms a stage does not use are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l1: Option<f64>,
    pub ealpips: Option<f64>,
    pub gan_g: Option<f64>,
    pub gan_d: Option<f64>,
    pub reblur: Option<f64>,
    pub time: Option<f64>,
    pub grad_norm: f64,
}

impl StepLosses {
    pub fn csv_row(&self, step: usize) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        format!(
            "{step},{},{},{},{},{},{},{:.9e}",
            f(self.l1),
            f(self.ealpips),
            f(self.gan_g),
            f(self.gan_d),
            f(self.reblur),
            f(self.time),
            self.grad_norm
        )
    }
}

fn ensure_finite(step: usize, lr: f64, values: &[(&str, f64)]) -> Result<()> {
    if let Some((name, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { step, detail: format!("{name} = {v} (lr {lr:.3e})") });
    }
    Ok(())
}

fn scalar(g: &Graph, v: crate::graph::Var) -> f64 {
    g.value(v).data()[0]
}

fn images_tensor(items: &[BatchItem], pick: impl Fn(&BatchItem) -> &ImageArray) -> Result<Tensor> {
    let refs: Vec<&ImageArray> = items.iter().map(pick).collect();
    ImageArray::batch_tensor(&refs)
}

/// Per-step RNG so resumed runs draw the same batches.
pub fn step_rng(seed: u64, stage: Stage, step: usize) -> ChaCha8Rng {
    let mix = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((stage.number() as u64) << 56) ^ step as u64;
    ChaCha8Rng::seed_from_u64(mix)
}

/// Batch with roughly `identity_fraction` of items replaced by
/// `(sharp, sharp, t = 0)` pairs, optionally augmented.
pub fn draw_batch(
    data: &LoadedDataset,
    size: usize,
    identity_fraction: f64,
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchItem>> {
    let mut items = data.sample_batch(size, rng)?;
    for it in items.iter_mut() {
        if identity_fraction > 0.0 && rng.random::<f64>() < identity_fraction {
            it.input = it.sharp.clone();
            it.t = 0;
        }
        if augment {
            let k = rng.random_range(0..8u8);
            let mut order: Vec<usize> = (0..it.sharp.channels()).collect();
            order.shuffle(rng);
            it.input = it.input.dihedral(k).permute_channels(&order)?;
            it.sharp = it.sharp.dihedral(k).permute_channels(&order)?;
        }
    }
    Ok(items)
}

/// Unweighted image-space losses of a plain foundation restore.
pub fn foundation_image_losses(f: &Foundation, items: &[BatchItem], ts: &[f64]) -> Result<(f64, f64)> {
    let g = Graph::new();
    let (bu, bc) = (Bind::new(&g, &f.unet.params, false), Bind::new(&g, &f.codec.params, false));
    let x = g.constant(images_tensor(items, |i| &i.input)?);
    let hq = g.constant(images_tensor(items, |i| &i.sharp)?);
    let (img, _, _) = f.restore_var(&bu, &bc, x, ts, None)?;
    let ea = ea_lpips_var(&g, img, hq)?;
    Ok((scalar(&g, g.l1_loss(img, hq)), scalar(&g, ea)))
}

/// Generator state of stage 1.
pub struct FoundationTrainer {
    pub foundation: Foundation,
    pub opt: Adam,
    pub disc: Option<(Discriminator, Adam)>,
}

impl FoundationTrainer {
    pub fn new(foundation: Foundation) -> Self {
        let opt = Adam::new(&foundation.unet.params);
        Self { foundation, opt, disc: None }
    }

    /// Creates the discriminator from the current denoiser encoder.
    pub fn start_gan(&mut self, seed: u64) {
        let d = Discriminator::new(&self.foundation.unet, seed);
        let opt = Adam::new(&d.params);
        self.disc = Some((d, opt));
    }

    /// One generator update followed by one discriminator update.
    pub fn step(&mut self, items: &[BatchItem], ts: &[f64], cfg: &TrainConfig, lr: f64, step: usize) -> Result<StepLosses> {
        let w = &cfg.weights;
        let f = &self.foundation;
        let g = Graph::new();
        let (bu, bc) = (Bind::new(&g, &f.unet.params, true), Bind::new(&g, &f.codec.params, false));
        let x = g.constant(images_tensor(items, |i| &i.input)?);
        let hq_img = images_tensor(items, |i| &i.sharp)?;
        let hq = g.constant(hq_img.clone());
        let (img, z0, _) = f.restore_var(&bu, &bc, x, ts, None)?;
        let l1 = g.l1_loss(img, hq);
        let ea = ea_lpips_var(&g, img, hq)?;
        let mut loss = g.add(l1, g.scale(ea, w.lambda1));
        let mut gan_g = None;
        if let Some((d, _)) = &self.disc {
            let bd = Bind::new(&g, &d.params, false);
            let lg = generator_gan_loss(&g, d.forward(&bd, z0));
            gan_g = Some(scalar(&g, lg));
            loss = g.add(loss, g.scale(lg, w.lambda2));
        }
        let (l1v, eav) = (scalar(&g, l1), scalar(&g, ea));
        ensure_finite(step, lr, &[("l1", l1v), ("ealpips", eav), ("gan_g", gan_g.unwrap_or(0.0)), ("loss", scalar(&g, loss))])?;
        let mut grads = g.backward(loss).for_store(&f.unet.params);
        let grad_norm = clip_grad_norm(&mut [&mut grads], cfg.clip_norm);
        ensure_finite(step, lr, &[("grad_norm", grad_norm)])?;
        let z0_value = (*g.value(z0)).clone();
        self.opt.apply(&mut self.foundation.unet.params, &grads, lr);

        let mut gan_d = None;
        if let Some((d, dopt)) = &mut self.disc {
            let gd = Graph::new();
            let bc = Bind::new(&gd, &self.foundation.codec.params, false);
            let z_hq = self.foundation.codec.encode_var(&bc, gd.constant(hq_img));
            let bd = Bind::new(&gd, &d.params, true);
            let ld = discriminator_loss(&gd, d.forward(&bd, z_hq), d.forward(&bd, gd.constant(z0_value)));
            let ldv = scalar(&gd, ld);
            ensure_finite(step, lr, &[("gan_d", ldv)])?;
            let mut dgrads = gd.backward(ld).for_store(&d.params);
            clip_grad_norm(&mut [&mut dgrads], cfg.clip_norm);
            dopt.apply(&mut d.params, &dgrads, cfg.disc_lr * lr / cfg.stage1.lr);
            gan_d = Some(ldv);
        }
        Ok(StepLosses { l1: Some(l1v), ealpips: Some(eav), gan_g, gan_d, grad_norm, ..Default::default() })
    }
}

/// One kernel-estimator update on the reblur loss.
pub fn estimator_step(
    est: &mut KernelEstimator,
    opt: &mut Adam,
    items: &[BatchItem],
    clip: f64,
    lr: f64,
    step: usize,
) -> Result<StepLosses> {
    let g = Graph::new();
    let b = Bind::new(&g, &est.params, true);
    let blur = g.constant(images_tensor(items, |i| &i.input)?);
    let sharp = g.constant(images_tensor(items, |i| &i.sharp)?);
    let field = est.forward(&b, blur);
    let loss = reblur_loss(&g, field, sharp, blur, est.config.kernel_size);
    let lv = scalar(&g, loss);
    ensure_finite(step, lr, &[("reblur", lv)])?;
    let mut grads = g.backward(loss).for_store(&est.params);
    let grad_norm = clip_grad_norm(&mut [&mut grads], clip);
    opt.apply(&mut est.params, &grads, lr);
    Ok(StepLosses { reblur: Some(lv), grad_norm, ..Default::default() })
}

/// Stage-3 state: the frozen foundation and the trainable control net.
pub struct ControlTrainer {
    pub foundation: Foundation,
    pub net: KernelControlNet,
    pub opt_est: Adam,
    pub opt_ctrl: Adam,
    frozen_hash: String,
}

impl ControlTrainer {
    pub fn new(foundation: Foundation, net: KernelControlNet) -> Self {
        let opt_est = Adam::new(&net.estimator.params);
        let opt_ctrl = Adam::new(&net.params);
        let frozen_hash = frozen_hash(&foundation);
        Self { foundation, net, opt_est, opt_ctrl, frozen_hash }
    }

    /// Fails if the foundation changed since construction.
    pub fn verify_frozen(&self) -> Result<()> {
        let now = frozen_hash(&self.foundation);
        if now != self.frozen_hash {
            return Err(Error::FrozenGradient(format!("foundation hash moved from {} to {now}", self.frozen_hash)));
        }
        Ok(())
    }

    /// Losses without an update, for inspection and tests.
    pub fn evaluate(&self, items: &[BatchItem], ts: &[f64], cfg: &TrainConfig) -> Result<StepLosses> {
        self.forward_backward(items, ts, cfg, 0, 0.0, false).map(|(l, _, _)| l)
    }

    pub fn step(&mut self, items: &[BatchItem], ts: &[f64], cfg: &TrainConfig, lr: f64, step: usize) -> Result<StepLosses> {
        let (losses, ge, gc) = self.forward_backward(items, ts, cfg, step, lr, true)?;
        let (mut ge, mut gc) = (ge.expect("gradients requested"), gc.expect("gradients requested"));
        let grad_norm = clip_grad_norm(&mut [&mut ge, &mut gc], cfg.clip_norm);
        ensure_finite(step, lr, &[("grad_norm", grad_norm)])?;
        self.opt_est.apply(&mut self.net.estimator.params, &ge, lr);
        self.opt_ctrl.apply(&mut self.net.params, &gc, lr);
        Ok(StepLosses { grad_norm, ..losses })
    }

    #[allow(clippy::type_complexity)]
    fn forward_backward(
        &self,
        items: &[BatchItem],
        ts: &[f64],
        cfg: &TrainConfig,
        step: usize,
        lr: f64,
        grads: bool,
    ) -> Result<(StepLosses, Option<Vec<Option<Tensor>>>, Option<Vec<Option<Tensor>>>)> {
        let w = &cfg.weights;
        let f = &self.foundation;
        let g = Graph::new();
        let bu = Bind::new(&g, &f.unet.params, false);
        let bcodec = Bind::new(&g, &f.codec.params, false);
        let be = Bind::new(&g, &self.net.estimator.params, grads);
        let bctrl = Bind::new(&g, &self.net.params, grads);
        let x = g.constant(images_tensor(items, |i| &i.input)?);
        let hq = g.constant(images_tensor(items, |i| &i.sharp)?);
        let out = conditioned_restore_var(f, &self.net, (&bu, &bcodec, &be, &bctrl), x, ts)?;
        let l1 = g.l1_loss(out.image, hq);
        let ea = ea_lpips_var(&g, out.image, hq)?;
        let rb = reblur_loss(&g, out.control.field, hq, x, self.net.config.kernel_size);
        let t_true: Vec<f64> = items.iter().map(|i| i.t as f64).collect();
        let tl = time_loss(&g, out.control.t_hat, &t_true, cfg.t_scale);
        let loss = g.add(g.add(l1, g.scale(ea, w.lambda1)), g.add(g.scale(rb, w.lambda3), g.scale(tl, w.lambda4)));
        let losses = StepLosses {
            l1: Some(scalar(&g, l1)),
            ealpips: Some(scalar(&g, ea)),
            reblur: Some(scalar(&g, rb)),
            time: Some(scalar(&g, tl)),
            ..Default::default()
        };
        ensure_finite(
            step,
            lr,
            &[
                ("l1", losses.l1.unwrap()),
                ("ealpips", losses.ealpips.unwrap()),
                ("reblur", losses.reblur.unwrap()),
                ("time", losses.time.unwrap()),
            ],
        )?;
        if !grads {
            return Ok((losses, None, None));
        }
        let all = g.backward(loss);
        if let Some(pid) = all.for_store(&f.unet.params).iter().position(Option::is_some) {
            return Err(Error::FrozenGradient(format!("gradient reached foundation parameter '{}'", f.unet.params.name(pid))));
        }
        Ok((losses, Some(all.for_store(&self.net.estimator.params)), Some(all.for_store(&self.net.params))))
    }
}

fn frozen_hash(f: &Foundation) -> String {
    format!("{}{}", f.unet.params.content_hash(), f.codec.params.content_hash())
}

/// Outcome of [`run_stage`].
#[derive(Clone, Debug)]
pub struct StageReport {
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    /// Steps executed in this call (excludes resumed ones).
    pub steps_run: usize,
    pub last: StepLosses,
}

/// Shared inputs of a stage run.
pub struct RunContext<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub data: &'a LoadedDataset,
    pub layout: &'a RunLayout,
    /// Effective-config hash recorded in every artifact.
    pub config_hash: &'a str,
    /// Continue from an interrupted checkpoint of the same stage.
    pub resume: bool,
    /// Save and return after this many total steps of the stage.
    pub stop_after: Option<usize>,
}

impl RunContext<'_> {
    fn end_step(&self, stage: Stage) -> usize {
        let steps = self.train.stage(stage).steps;
        self.stop_after.map_or(steps, |s| s.min(steps))
    }
}

struct CsvLog {
    path: PathBuf,
    text: String,
}

impl CsvLog {
    /// Keeps the header and the first `keep` rows of an existing log.
    fn open(path: PathBuf, keep: usize) -> Self {
        let mut text = String::from(METRICS_HEADER);
        text.push('\n');
        if keep > 0 {
            if let Ok(old) = fs::read_to_string(&path) {
                for line in old.lines().skip(1).take(keep) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
        Self { path, text }
    }

    fn push(&mut self, row: String) {
        let _ = writeln!(self.text, "{row}");
    }

    fn flush(&self) -> Result<()> {
        fs::write(&self.path, &self.text).map_err(|e| Error::io(&self.path, e))
    }
}

fn stamp(ck: &mut Checkpoint, ctx: &RunContext, stage: Stage, step: usize) {
    ck.set_meta("stage", stage.number() as u64);
    ck.set_meta("step", step as u64);
    ck.set_meta("steps_total", ctx.train.stage(stage).steps as u64);
    ck.set_meta("run_config_hash", ctx.config_hash);
    ck.set_meta("consistency", ctx.train.consistency);
    ck.set_meta("train", serde_json::to_value(ctx.train).expect("config serializes"));
}

fn resume_point(path: &Path, ctx: &RunContext, stage: Stage) -> Result<Option<Checkpoint>> {
    if !ctx.resume || !path.exists() {
        return Ok(None);
    }
    let ck = Checkpoint::load(path)?;
    if ck.kind() != Some(stage.kind()) {
        return Err(Error::Checkpoint(format!("{} is not a {} checkpoint", path.display(), stage.kind())));
    }
    let total = ctx.train.stage(stage).steps as u64;
    if ck.meta_u64("steps_total") != Some(total) {
        return Err(Error::Checkpoint(format!(
            "{} belongs to a {:?}-step schedule, this run has {total} steps",
            path.display(),
            ck.meta_u64("steps_total")
        )));
    }
    Ok(Some(ck))
}

fn require(path: &Path, stage: Stage) -> Result<()> {
    if !path.exists() {
        return Err(Error::Prerequisite(format!("{} not found: run stage {} first", path.display(), stage.number())));
    }
    Ok(())
}

/// Runs one stage end to end, writing its checkpoint and per-step CSV under
/// the run layout. Stage 1 needs `codec`; stage 3 reads the stage-1 and
/// stage-2 checkpoints.
pub fn run_stage(stage: Stage, ctx: &RunContext, codec: Option<Codec>) -> Result<StageReport> {
    ctx.train.validate()?;
    fs::create_dir_all(&ctx.layout.root).map_err(|e| Error::io(&ctx.layout.root, e))?;
    match stage {
        Stage::Foundation => run_foundation(ctx, codec.ok_or_else(|| Error::InvalidArgument("stage 1 needs a codec".into()))?),
        Stage::Estimator => run_estimator(ctx),
        Stage::Control => {
            require(&ctx.layout.checkpoint(Stage::Foundation), Stage::Foundation)?;
            require(&ctx.layout.checkpoint(Stage::Estimator), Stage::Estimator)?;
            run_control(ctx)
        }
    }
}

fn run_foundation(ctx: &RunContext, codec: Codec) -> Result<StageReport> {
    let stage = Stage::Foundation;
    let sc = &ctx.train.stage1;
    let path = ctx.layout.checkpoint(stage);
    let foundation = Foundation::new(ctx.model.unet.clone(), codec, ctx.model.schedule.clone(), ctx.train.seed)?;
    let mut tr = FoundationTrainer::new(foundation);
    let mut start = 0;
    if let Some(ck) = resume_point(&path, ctx, stage)? {
        tr.foundation = Foundation::from_checkpoint(&ck)?;
        ck.load_adam("adam", &mut tr.opt)?;
        if ck.has_store("disc") {
            tr.start_gan(ctx.train.seed ^ 0xd15c);
            let (d, dopt) = tr.disc.as_mut().expect("just created");
            ck.load_store("disc", &mut d.params)?;
            ck.load_adam("adam_d", dopt)?;
        }
        start = ck.meta_u64("step").unwrap_or(0) as usize;
    }
    let save = |tr: &FoundationTrainer, step: usize| -> Result<()> {
        let mut ck = tr.foundation.to_checkpoint();
        stamp(&mut ck, ctx, stage, step);
        ck.add_adam("adam", &tr.opt);
        if let Some((d, dopt)) = &tr.disc {
            ck.add_store("disc", &d.params);
            ck.add_adam("adam_d", dopt);
        }
        ck.save(&path)
    };
    let mut log = CsvLog::open(ctx.layout.metrics(stage), start);
    let mut last = StepLosses::default();
    let end = ctx.end_step(stage);
    for step in start..end {
        if tr.disc.is_none() && step >= ctx.train.gan_start && ctx.train.weights.lambda2 > 0.0 {
            tr.start_gan(ctx.train.seed ^ 0xd15c);
        }
        let mut rng = step_rng(ctx.train.seed, stage, step);
        let items = draw_batch(ctx.data, sc.batch_size, 0.0, ctx.train.augment, &mut rng)?;
        let ts: Vec<f64> = items.iter().map(|i| ctx.train.train_t(i.t)).collect();
        let lr = cosine_lr(sc.lr, step, sc.steps);
        last = tr.step(&items, &ts, ctx.train, lr, step + 1)?;
        log.push(last.csv_row(step + 1));
        if sc.checkpoint_every > 0 && (step + 1) % sc.checkpoint_every == 0 && step + 1 < end {
            save(&tr, step + 1)?;
            log.flush()?;
        }
        if (step + 1) % 50 == 0 {
            log::info!("stage 1 step {}: {}", step + 1, last.csv_row(step + 1));
        }
    }
    save(&tr, end)?;
    log.flush()?;
    Ok(StageReport { checkpoint: path, metrics_csv: log.path, steps_run: end.saturating_sub(start), last })
}

fn run_estimator(ctx: &RunContext) -> Result<StageReport> {
    let stage = Stage::Estimator;
    let sc = &ctx.train.stage2;
    let path = ctx.layout.checkpoint(stage);
    let mut est = KernelEstimator::new(ctx.model.control.clone(), ctx.train.seed ^ 0xe57)?;
    let mut opt = Adam::new(&est.params);
    let mut start = 0;
    if let Some(ck) = resume_point(&path, ctx, stage)? {
        est = load_estimator(&path)?.0;
        opt = Adam::new(&est.params);
        ck.load_adam("adam", &mut opt)?;
        start = ck.meta_u64("step").unwrap_or(0) as usize;
    }
    let save = |est: &KernelEstimator, opt: &Adam, step: usize| -> Result<()> {
        let mut ck = Checkpoint::new(stage.kind());
        save_estimator(est, &mut ck);
        stamp(&mut ck, ctx, stage, step);
        ck.add_adam("adam", opt);
        ck.save(&path)
    };
    let mut log = CsvLog::open(ctx.layout.metrics(stage), start);
    let mut last = StepLosses::default();
    let end = ctx.end_step(stage);
    for step in start..end {
        let mut rng = step_rng(ctx.train.seed, stage, step);
        let items = draw_batch(ctx.data, sc.batch_size, ctx.train.identity_fraction, ctx.train.augment, &mut rng)?;
        let lr = cosine_lr(sc.lr, step, sc.steps);
        last = estimator_step(&mut est, &mut opt, &items, ctx.train.clip_norm, lr, step + 1)?;
        log.push(last.csv_row(step + 1));
        if sc.checkpoint_every > 0 && (step + 1) % sc.checkpoint_every == 0 && step + 1 < end {
            save(&est, &opt, step + 1)?;
            log.flush()?;
        }
        if (step + 1) % 50 == 0 {
            log::info!("stage 2 step {}: {}", step + 1, last.csv_row(step + 1));
        }
    }
    save(&est, &opt, end)?;
    log.flush()?;
    Ok(StageReport { checkpoint: path, metrics_csv: log.path, steps_run: end.saturating_sub(start), last })
}

fn run_control(ctx: &RunContext) -> Result<StageReport> {
    let stage = Stage::Control;
    let sc = &ctx.train.stage3;
    let path = ctx.layout.checkpoint(stage);
    let foundation = Foundation::load(&ctx.layout.checkpoint(Stage::Foundation))?;
    let mut start = 0;
    let mut tr = match resume_point(&path, ctx, stage)? {
        Some(ck) => {
            let net = KernelControlNet::from_checkpoint(&ck, &foundation)?;
            let mut tr = ControlTrainer::new(foundation, net);
            ck.load_adam("adam_est", &mut tr.opt_est)?;
            ck.load_adam("adam_ctrl", &mut tr.opt_ctrl)?;
            start = ck.meta_u64("step").unwrap_or(0) as usize;
            tr
        }
        None => {
            let (est, _) = load_estimator(&ctx.layout.checkpoint(Stage::Estimator))?;
            if est.config != ctx.model.control {
                log::warn!("stage-2 estimator config differs from the model config; using the checkpoint's");
            }
            let net = KernelControlNet::new(est.config.clone(), &foundation.unet, foundation.codec.factor(), est, ctx.train.seed ^ 0xc7)?;
            ControlTrainer::new(foundation, net)
        }
    };
    let save = |tr: &ControlTrainer, step: usize| -> Result<()> {
        let mut ck = tr.net.to_checkpoint(&tr.foundation);
        stamp(&mut ck, ctx, stage, step);
        ck.add_adam("adam_est", &tr.opt_est);
        ck.add_adam("adam_ctrl", &tr.opt_ctrl);
        ck.save(&path)
    };
    let mut log = CsvLog::open(ctx.layout.metrics(stage), start);
    let mut last = StepLosses::default();
    let end = ctx.end_step(stage);
    for step in start..end {
        let mut rng = step_rng(ctx.train.seed, stage, step);
        let items = draw_batch(ctx.data, sc.batch_size, ctx.train.identity_fraction, ctx.train.augment, &mut rng)?;
        let ts: Vec<f64> = items.iter().map(|i| ctx.train.train_t(i.t)).collect();
        let lr = cosine_lr(sc.lr, step, sc.steps);
        last = tr.step(&items, &ts, ctx.train, lr, step + 1)?;
        log.push(last.csv_row(step + 1));
        if sc.checkpoint_every > 0 && (step + 1) % sc.checkpoint_every == 0 && step + 1 < end {
            tr.verify_frozen()?;
            save(&tr, step + 1)?;
            log.flush()?;
        }
        if (step + 1) % 50 == 0 {
            log::info!("stage 3 step {}: {}", step + 1, last.csv_row(step + 1));
        }
    }
    tr.verify_frozen()?;
    save(&tr, end)?;
    log.flush()?;
    Ok(StageReport { checkpoint: path, metrics_csv: log.path, steps_run: end.saturating_sub(start), last })
}

/// Loads a stage-3 bundle: the frozen foundation plus its control net.
pub fn load_trained(layout: &RunLayout) -> Result<(Foundation, Option<KernelControlNet>)> {
    let fpath = layout.checkpoint(Stage::Foundation);
    require(&fpath, Stage::Foundation)?;
    let foundation = Foundation::load(&fpath)?;
    let cpath = layout.checkpoint(Stage::Control);
    let net = if cpath.exists() { Some(KernelControlNet::load(&cpath, &foundation)?) } else { None };
    Ok((foundation, net))
}
