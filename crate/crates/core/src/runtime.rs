//! One-step inference and the evaluation harness.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blur::BlurKernelField;
use crate::codec::resize_trick_wrap;
use crate::control::{KernelControlNet, T_RANGE_MAX};
use crate::dataset::{BatchItem, LoadedDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::ImageArray;
use crate::losses::EdgePerceptual;
use crate::metrics::{psnr, ssim};
use crate::nn::Bind;
use crate::par;
use crate::pipeline::{conditioned_restore_var, Foundation};

/// How the conditioning timestep is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TMode {
    Fixed(f64),
    Predicted,
}

impl FromStr for TMode {
    type Err = Error;

    /// `fixed:<t>` or `predicted`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "predicted" {
            return Ok(Self::Predicted);
        }
        let t = s
            .strip_prefix("fixed:")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::InvalidArgument(format!("t mode must be 'fixed:<t>' or 'predicted', got '{s}'")))?;
        Ok(Self::Fixed(t))
    }
}

impl TryFrom<String> for TMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TMode> for String {
    fn from(m: TMode) -> Self {
        m.to_string()
    }
}

impl std::fmt::Display for TMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Fixed(t) => write!(f, "fixed:{t}"),
            Self::Predicted => f.write_str("predicted"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub t_mode: TMode,
    /// Upsample 2× before and resize back after the pipeline.
    pub resize_trick: bool,
    /// Use the kernel control net when one is loaded.
    pub use_control: bool,
    /// Images per denoiser batch during evaluation.
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { t_mode: TMode::Fixed(200.0), resize_trick: false, use_control: true, batch_size: 8 }
    }
}

/// One restored image.
#[derive(Clone, Debug)]
pub struct Restored {
    pub image: ImageArray,
    pub t_used: f64,
    pub field: Option<BlurKernelField>,
}

/// Frozen foundation plus optional control net.
#[derive(Clone, Debug)]
pub struct Deblurrer {
    pub foundation: Foundation,
    pub control: Option<KernelControlNet>,
}

impl Deblurrer {
    pub fn new(foundation: Foundation, control: Option<KernelControlNet>) -> Self {
        Self { foundation, control }
    }

    fn validate(&self, cfg: &InferenceConfig) -> Result<()> {
        match cfg.t_mode {
            TMode::Fixed(t) if !(1.0..=T_RANGE_MAX).contains(&t) => {
                Err(Error::InvalidArgument(format!("fixed t must lie in [1, {T_RANGE_MAX}], got {t}")))
            }
            TMode::Predicted if self.control.is_none() => {
                Err(Error::Prerequisite("predicted t needs a kernel control checkpoint: run stage 3 first".into()))
            }
            _ if cfg.batch_size == 0 => Err(Error::InvalidArgument("batch_size must be >= 1".into())),
            _ => Ok(()),
        }
    }

    fn check_dims(&self, img: &ImageArray) -> Result<()> {
        let mut m = self.foundation.codec.factor() * self.foundation.unet.config.spatial_multiple();
        if let Some(c) = &self.control {
            m = m.max(c.estimator.spatial_multiple());
        }
        if !img.height().is_multiple_of(m) || !img.width().is_multiple_of(m) {
            return Err(Error::Shape(format!("image {}x{} must have sides divisible by {m}", img.height(), img.width())));
        }
        if img.channels() != self.foundation.codec.config.image_channels {
            return Err(Error::Shape(format!(
                "model expects {} channels, got {}",
                self.foundation.codec.config.image_channels,
                img.channels()
            )));
        }
        Ok(())
    }

    /// Restores a batch of equally sized blurry images with exactly one
    /// denoiser forward per image.
    pub fn deblur_batch(&self, cfg: &InferenceConfig, imgs: &[&ImageArray]) -> Result<Vec<Restored>> {
        self.validate(cfg)?;
        if imgs.is_empty() {
            return Ok(Vec::new());
        }
        for img in imgs {
            self.check_dims(img)?;
        }
        let x = ImageArray::batch_tensor(imgs)?;
        let control = self.control.as_ref().filter(|_| cfg.use_control || cfg.t_mode == TMode::Predicted);
        let ts: Vec<f64> = match cfg.t_mode {
            TMode::Fixed(t) => vec![t; imgs.len()],
            TMode::Predicted => control.expect("validated").predict_timesteps(&x),
        };
        let f = &self.foundation;
        let g = Graph::new();
        let bu = Bind::new(&g, &f.unet.params, false);
        let bcodec = Bind::new(&g, &f.codec.params, false);
        let (image, field) = match control {
            Some(net) => {
                let be = Bind::new(&g, &net.estimator.params, false);
                let bctrl = Bind::new(&g, &net.params, false);
                let out = conditioned_restore_var(f, net, (&bu, &bcodec, &be, &bctrl), g.constant(x), &ts)?;
                (out.image, Some(out.control.field))
            }
            None => (f.restore_var(&bu, &bcodec, g.constant(x), &ts, None)?.0, None),
        };
        let out = g.value(image);
        let fields = field.map(|v| g.value(v));
        let (h, w) = (imgs[0].height(), imgs[0].width());
        (0..imgs.len())
            .map(|i| {
                let field = match &fields {
                    Some(ft) => {
                        let m = self.control.as_ref().expect("field implies control").config.kernel_size;
                        Some(BlurKernelField::new(m, h, w, ft.batch_item(i).into_data())?)
                    }
                    None => None,
                };
                Ok(Restored { image: ImageArray::from_tensor(&out, i)?.clamp01(), t_used: ts[i], field })
            })
            .collect()
    }

    /// Single-image form, honoring the resize trick.
    pub fn deblur_one_step(&self, cfg: &InferenceConfig, blur: &ImageArray) -> Result<Restored> {
        if !cfg.resize_trick {
            return Ok(self.deblur_batch(cfg, &[blur])?.pop().expect("one image in, one out"));
        }
        let mut meta = None;
        let image = resize_trick_wrap(blur, |up| {
            let r = self.deblur_batch(cfg, &[up])?.pop().expect("one image in, one out");
            meta = Some((r.t_used, r.field));
            Ok(r.image)
        })?;
        let (t_used, field) = meta.expect("inner ran");
        Ok(Restored { image: image.clamp01(), t_used, field })
    }

    /// Restores items in batches, fanning batches out over workers.
    pub fn restore_items(&self, cfg: &InferenceConfig, items: &[BatchItem]) -> Result<Vec<Restored>> {
        if cfg.resize_trick {
            return par::map_slice(items, |it| self.deblur_one_step(cfg, &it.input)).into_iter().collect();
        }
        let chunks: Vec<&[BatchItem]> = items.chunks(cfg.batch_size.max(1)).collect();
        let out = par::map_slice(&chunks, |chunk| {
            let refs: Vec<&ImageArray> = chunk.iter().map(|i| &i.input).collect();
            self.deblur_batch(cfg, &refs)
        });
        let mut all = Vec::with_capacity(items.len());
        for r in out {
            all.extend(r?);
        }
        Ok(all)
    }
}

/// Per-image metrics of one evaluated pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub sample_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips_proxy: f64,
    pub t_used: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
    /// Blurry input scored against the sharp target.
    pub blurry_baseline: MetricRow,
    pub metadata: Vec<(String, String)>,
}

pub const REPORT_HEADER: &str = "sample_id,psnr,ssim,lpips_proxy,t_used";

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let meta: Vec<String> = self.metadata.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "# {}", meta.join(" "));
        let _ = writeln!(s, "{REPORT_HEADER}");
        for r in self.rows.iter().chain([&self.mean, &self.blurry_baseline]) {
            let t = r.t_used.map(|t| format!("{t:.4}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{t}", r.sample_id, r.psnr, r.ssim, r.lpips_proxy);
        }
        s
    }
}

fn pair_id(item: &BatchItem) -> String {
    format!("{}/t{}", item.sample_id, item.t)
}

fn mean_row(id: &str, rows: &[MetricRow]) -> MetricRow {
    let n = rows.len().max(1) as f64;
    let ts: Vec<f64> = rows.iter().filter_map(|r| r.t_used).collect();
    MetricRow {
        sample_id: id.into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        lpips_proxy: rows.iter().map(|r| r.lpips_proxy).sum::<f64>() / n,
        t_used: (!ts.is_empty()).then(|| ts.iter().sum::<f64>() / ts.len() as f64),
    }
}

fn score(id: String, out: &ImageArray, target: &ImageArray, t: Option<f64>, proxy: &EdgePerceptual) -> Result<MetricRow> {
    Ok(MetricRow { sample_id: id, psnr: psnr(out, target), ssim: ssim(out, target), lpips_proxy: proxy.distance(out, target)?, t_used: t })
}

/// Every blurred point of every sample, ordered by sample then point.
pub fn evaluation_items(data: &LoadedDataset) -> Vec<BatchItem> {
    data.manifest.eligible_pairs().into_iter().map(|(s, p)| data.item(s, p)).collect()
}

/// Restores every blurred point once and scores it against its sharp frame.
pub fn evaluate(deblurrer: &Deblurrer, cfg: &InferenceConfig, data: &LoadedDataset) -> Result<MetricReport> {
    let items = evaluation_items(data);
    if items.is_empty() {
        return Err(Error::InvalidArgument("manifest has no blurred points to evaluate".into()));
    }
    let restored = deblurrer.restore_items(cfg, &items)?;
    let proxy = EdgePerceptual::shared(items[0].sharp.channels());
    let pairs: Vec<(&BatchItem, &Restored)> = items.iter().zip(&restored).collect();
    let rows: Vec<MetricRow> = par::map_slice(&pairs, |(it, r)| score(pair_id(it), &r.image, &it.sharp, Some(r.t_used), &proxy))
        .into_iter()
        .collect::<Result<_>>()?;
    let base: Vec<MetricRow> =
        par::map_slice(&items, |it| score(pair_id(it), &it.input, &it.sharp, None, &proxy)).into_iter().collect::<Result<_>>()?;
    let f = &deblurrer.foundation;
    let mut metadata = vec![
        ("checkpoint".to_string(), f.unet.params.content_hash()[..16].to_string()),
        ("config".to_string(), f.config_hash()),
        ("lpips_proxy".to_string(), proxy.hash()),
        ("t_mode".to_string(), cfg.t_mode.to_string()),
        ("manifest".to_string(), data.manifest.content_hash()[..16].to_string()),
    ];
    if let Some(c) = deblurrer.control.as_ref().filter(|_| cfg.use_control || cfg.t_mode == TMode::Predicted) {
        metadata.push(("control".to_string(), c.params.content_hash()[..16].to_string()));
    }
    Ok(MetricReport { mean: mean_row("mean", &rows), blurry_baseline: mean_row("blurry_input", &base), rows, metadata })
}

/// Aggregate metrics at one fixed timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub t: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips_proxy: f64,
}

pub const SWEEP_HEADER: &str = "t,psnr,ssim,lpips_proxy";

/// Evaluates fixed-`t` inference at every value of `t_values`.
pub fn timestep_sweep(deblurrer: &Deblurrer, base: &InferenceConfig, data: &LoadedDataset, t_values: &[f64]) -> Result<Vec<SweepRow>> {
    if t_values.is_empty() {
        return Err(Error::InvalidArgument("timestep sweep needs at least one t".into()));
    }
    t_values
        .iter()
        .map(|&t| {
            let cfg = InferenceConfig { t_mode: TMode::Fixed(t), ..base.clone() };
            let m = evaluate(deblurrer, &cfg, data)?.mean;
            Ok(SweepRow { t, psnr: m.psnr, ssim: m.ssim, lpips_proxy: m.lpips_proxy })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow], metadata: &str) -> String {
    let mut s = format!("# {metadata}\n{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.t, r.psnr, r.ssim, r.lpips_proxy);
    }
    s
}

/// Largest relative PSNR drop below the sweep's peak, `(peak − min)/peak`.
pub fn relative_psnr_drop(rows: &[SweepRow]) -> f64 {
    let peak = rows.iter().map(|r| r.psnr).fold(f64::MIN, f64::max);
    let low = rows.iter().map(|r| r.psnr).fold(f64::MAX, f64::min);
    (peak - low) / peak
}

/// Timestep a model uses for a trajectory point under its training
/// convention: the point's own `t`, or one shared value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PointTimestep {
    Own,
    Shared(f64),
}

/// Mean over samples of the largest pairwise per-pixel L1 distance between
/// one-step restorations of that sample's blurred points.
pub fn cross_timestep_spread(deblurrer: &Deblurrer, data: &LoadedDataset, convention: PointTimestep, use_control: bool) -> Result<f64> {
    let mut total = 0.0;
    let mut counted = 0;
    for (si, s) in data.manifest.samples.iter().enumerate() {
        let items: Vec<BatchItem> = (1..s.points.len()).map(|p| data.item(si, p)).collect();
        if items.len() < 2 {
            continue;
        }
        let mut outs = Vec::with_capacity(items.len());
        for it in &items {
            let t = match convention {
                PointTimestep::Own => it.t as f64,
                PointTimestep::Shared(t) => t,
            };
            let cfg = InferenceConfig { t_mode: TMode::Fixed(t), use_control, ..Default::default() };
            outs.push(deblurrer.deblur_batch(&cfg, &[&it.input])?.pop().expect("one out").image);
        }
        let mut worst: f64 = 0.0;
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                worst = worst.max(outs[i].mean_abs_diff(&outs[j]));
            }
        }
        total += worst;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::InvalidArgument("no sample has two or more blurred points".into()));
    }
    Ok(total / counted as f64)
}
