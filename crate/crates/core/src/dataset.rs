//! Trajectory-grouped datasets: every sample is one sharp frame plus several
//! blur levels of the same physical motion, each tagged with its timestep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blur::{self, AdditiveNoiseSpec, MotionTrajectory, TrajectoryParams};
use crate::error::{Error, Result};
use crate::image::{validate_pipeline_dims, ImageArray};
use crate::par;
use crate::scenes::render_scene;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
/// Frame counts a sample may use for its blurred points.
pub const FRAME_COUNT_CHOICES: [usize; 6] = [5, 7, 9, 11, 13, 15];
/// Timestep spacing between consecutive odd frame counts.
pub const TIMESTEP_PER_FRAME_PAIR: usize = 40;

const HEADER_TAG: &str = "trajectory-manifest";

/// Timestep of an `n`-frame average: `(n − 1) · 20`.
pub fn g(n_frames: usize) -> Result<usize> {
    if n_frames == 0 || n_frames.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("frame count must be odd and positive, got {n_frames}")));
    }
    Ok((n_frames - 1) * 20)
}

/// Inverse of [`g`] on its image.
pub fn frames_for_timestep(t: usize) -> Result<usize> {
    if !t.is_multiple_of(TIMESTEP_PER_FRAME_PAIR) {
        return Err(Error::InvalidArgument(format!("timestep {t} is not a multiple of 40")));
    }
    Ok(t / 20 + 1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrajectoryPoint {
    pub image_path: String,
    pub n_frames: usize,
    pub t: usize,
}

impl TrajectoryPoint {
    pub fn new(image_path: impl Into<String>, n_frames: usize) -> Result<Self> {
        Ok(Self { image_path: image_path.into(), n_frames, t: g(n_frames)? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurMethod {
    FrameAverage,
    KernelField,
}

impl BlurMethod {
    fn as_str(self) -> &'static str {
        match self {
            BlurMethod::FrameAverage => "frame_average",
            BlurMethod::KernelField => "kernel_field",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "frame_average" => Some(BlurMethod::FrameAverage),
            "kernel_field" => Some(BlurMethod::KernelField),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrajectorySample {
    pub sample_id: String,
    pub blur_method: BlurMethod,
    pub scene_seed: u64,
    /// Ascending by `t`; the first point is the sharp frame.
    pub points: Vec<TrajectoryPoint>,
}

impl TrajectorySample {
    pub fn sharp_path(&self) -> &str {
        &self.points[0].image_path
    }

    pub fn blurred_points(&self) -> &[TrajectoryPoint] {
        &self.points[1..]
    }

    fn validate(&self, split: Split) -> Result<()> {
        let id = &self.sample_id;
        if self.points.is_empty() || self.points[0].t != 0 || self.points[0].n_frames != 1 {
            return Err(Error::InvalidArgument(format!("sample {id}: first point must be the sharp frame (t=0)")));
        }
        for p in &self.points {
            if g(p.n_frames)? != p.t {
                return Err(Error::InvalidArgument(format!("sample {id}: t={} does not match n={}", p.t, p.n_frames)));
            }
        }
        if self.points.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::InvalidArgument(format!("sample {id}: timesteps must be strictly increasing")));
        }
        let min_points = if split == Split::Train { 3 } else { 2 };
        if self.points.len() < min_points {
            return Err(Error::InvalidArgument(format!(
                "sample {id}: {} points, {split} split needs at least {min_points}",
                self.points.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Sample list plus the directory image paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: Split,
    /// Hash of the generating configuration, `-` when unknown.
    pub config_hash: String,
    pub samples: Vec<TrajectorySample>,
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Count of blurred points per frame count.
    pub fn frame_count_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for s in &self.samples {
            for p in s.blurred_points() {
                *hist.entry(p.n_frames).or_insert(0) += 1;
            }
        }
        hist
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{HEADER_TAG} version={} split={} config={} samples={}",
            self.version,
            self.split,
            self.config_hash,
            self.samples.len()
        );
        let hist: Vec<String> = self.frame_count_histogram().iter().map(|(n, c)| format!("{n}:{c}")).collect();
        let _ = writeln!(out, "# frames {}", hist.join(","));
        for s in &self.samples {
            let _ = write!(out, "{} | {} | {} |", s.sample_id, s.blur_method.as_str(), s.scene_seed);
            for p in &s.points {
                let _ = write!(out, " point:t={},n={},path={}", p.t, p.n_frames, p.image_path);
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty manifest".into() })?;
        let perr = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
        let mut fields = header.split_whitespace();
        if fields.next() != Some(HEADER_TAG) {
            return Err(perr(0, format!("expected '{HEADER_TAG}' header")));
        }
        let mut kv = BTreeMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| perr(0, format!("malformed header field '{f}'")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| perr(0, format!("header lacks '{k}'")));
        let version: u32 = get("version")?.parse().map_err(|_| perr(0, "bad version".into()))?;
        if version != MANIFEST_VERSION {
            return Err(perr(0, format!("unsupported manifest version {version}")));
        }
        let split = match get("split")? {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(perr(0, format!("unknown split '{other}'"))),
        };
        let config_hash = get("config")?.to_string();
        let declared: usize = get("samples")?.parse().map_err(|_| perr(0, "bad sample count".into()))?;

        let mut samples = Vec::new();
        let mut declared_hist = None;
        for (ln, line) in lines {
            if let Some(rest) = line.strip_prefix("# frames") {
                declared_hist = Some((ln, rest.trim().to_string()));
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.splitn(4, " | ").collect();
            if parts.len() != 4 {
                return Err(perr(ln, "expected 'id | method | seed | points'".into()));
            }
            let blur_method = BlurMethod::parse(parts[1]).ok_or_else(|| perr(ln, format!("unknown blur method '{}'", parts[1])))?;
            let scene_seed = parts[2].parse().map_err(|_| perr(ln, format!("bad scene seed '{}'", parts[2])))?;
            let body = parts[3].strip_suffix(" |").unwrap_or(parts[3]);
            let body = body.strip_prefix('|').unwrap_or(body);
            let mut points = Vec::new();
            for tok in body.split_whitespace() {
                let spec = tok.strip_prefix("point:").ok_or_else(|| perr(ln, format!("bad point token '{tok}'")))?;
                let mut t = None;
                let mut n = None;
                let mut path = None;
                for item in spec.splitn(3, ',') {
                    match item.split_once('=') {
                        Some(("t", v)) => t = v.parse::<usize>().ok(),
                        Some(("n", v)) => n = v.parse::<usize>().ok(),
                        Some(("path", v)) => path = Some(v.to_string()),
                        _ => return Err(perr(ln, format!("bad point field '{item}'"))),
                    }
                }
                let (t, n, path) = match (t, n, path) {
                    (Some(t), Some(n), Some(p)) => (t, n, p),
                    _ => return Err(perr(ln, format!("incomplete point '{tok}'"))),
                };
                points.push(TrajectoryPoint { image_path: path, n_frames: n, t });
            }
            let sample = TrajectorySample { sample_id: parts[0].to_string(), blur_method, scene_seed, points };
            sample.validate(split).map_err(|e| perr(ln, e.to_string()))?;
            samples.push(sample);
        }
        if samples.len() != declared {
            return Err(perr(0, format!("header declares {declared} samples, found {}", samples.len())));
        }
        let manifest = Self { version, split, config_hash, samples, root: root.into() };
        if let Some((ln, text)) = declared_hist {
            let actual: Vec<String> = manifest.frame_count_histogram().iter().map(|(n, c)| format!("{n}:{c}")).collect();
            if text != actual.join(",") {
                return Err(perr(ln, format!("frame histogram '{text}' disagrees with samples")));
            }
        }
        Ok(manifest)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads `dir/manifest.txt` (or a manifest file path directly).
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    /// Checks that every referenced image exists and decodes.
    pub fn verify_files(&self) -> Result<()> {
        for s in &self.samples {
            for p in &s.points {
                ImageArray::load_png(&self.resolve(&p.image_path))?;
            }
        }
        Ok(())
    }

    /// All `(sample index, point index)` pairs with `t > 0`.
    pub fn eligible_pairs(&self) -> Vec<(usize, usize)> {
        self.samples.iter().enumerate().flat_map(|(si, s)| (1..s.points.len()).map(move |pi| (si, pi))).collect()
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Configuration of the procedural training-set builder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetConfig {
    pub num_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_frames_choices: Vec<usize>,
    pub min_points_per_trajectory: usize,
    /// Emit every odd centered sub-average from 5 up to the longest choice.
    pub emit_all_subaverages: bool,
    pub blur_method: BlurMethod,
    pub noise_sigma: f64,
    pub trajectory: TrajectoryParams,
    /// Kernel window for kernel-field blur.
    pub kernel_size: usize,
    pub smoothness: f64,
    pub split: Split,
    pub seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self {
            num_scenes: 64,
            height: 32,
            width: 32,
            channels: 3,
            n_frames_choices: vec![5, 11, 15],
            min_points_per_trajectory: 3,
            emit_all_subaverages: false,
            blur_method: BlurMethod::FrameAverage,
            noise_sigma: AdditiveNoiseSpec::DEFAULT_SIGMA,
            trajectory: TrajectoryParams::default(),
            kernel_size: 9,
            smoothness: 1.0,
            split: Split::Train,
            seed: 0,
        }
    }
}

impl ToyDatasetConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    /// Frame counts of the blurred points every sample carries.
    pub fn frame_counts(&self) -> Result<Vec<usize>> {
        if self.n_frames_choices.is_empty() {
            return Err(Error::InvalidArgument("n_frames_choices must not be empty".into()));
        }
        if let Some(bad) = self.n_frames_choices.iter().find(|n| !FRAME_COUNT_CHOICES.contains(n)) {
            return Err(Error::InvalidArgument(format!("frame count {bad} not in {FRAME_COUNT_CHOICES:?}")));
        }
        let longest = *self.n_frames_choices.iter().max().unwrap();
        let mut counts: Vec<usize> = if self.emit_all_subaverages {
            FRAME_COUNT_CHOICES.iter().copied().filter(|&n| n <= longest).collect()
        } else {
            let mut c = self.n_frames_choices.clone();
            c.sort_unstable();
            c.dedup();
            c
        };
        // Top up with the shortest unused sub-averages until the point budget holds.
        let needed = self.min_points_per_trajectory.max(if self.split == Split::Train { 3 } else { 2 });
        for &n in FRAME_COUNT_CHOICES.iter().filter(|&&n| n < longest) {
            if counts.len() + 1 >= needed {
                break;
            }
            if !counts.contains(&n) {
                counts.push(n);
            }
        }
        counts.sort_unstable();
        if counts.len() + 1 < needed {
            return Err(Error::InvalidArgument(format!("longest frame count {longest} cannot supply {needed} points per trajectory")));
        }
        Ok(counts)
    }
}

fn sample_seed(seed: u64, scene: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene as u64 + 1);
    rng.random()
}

/// Blurred renditions of one scene, ascending by frame count.
pub struct SceneTrajectory {
    pub sharp: ImageArray,
    pub blurred: Vec<(usize, ImageArray)>,
    /// Sub-frames of the longest average (frame-average method only).
    pub subframes: Vec<ImageArray>,
}

/// Synthesizes all blur levels of scene `scene_seed` from one motion.
pub fn synthesize_scene(cfg: &ToyDatasetConfig, counts: &[usize], scene_seed: u64) -> Result<SceneTrajectory> {
    let sharp = render_scene(scene_seed, cfg.height, cfg.width, cfg.channels);
    let longest = *counts.iter().max().ok_or_else(|| Error::InvalidArgument("no frame counts".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let noise = |n: usize| -> Result<AdditiveNoiseSpec> {
        if cfg.noise_sigma == 0.0 {
            Ok(AdditiveNoiseSpec::none())
        } else {
            AdditiveNoiseSpec::new(cfg.noise_sigma, scene_seed.wrapping_mul(31).wrapping_add(n as u64))
        }
    };
    match cfg.blur_method {
        BlurMethod::FrameAverage => {
            let traj = MotionTrajectory::generate(longest, &cfg.trajectory, &mut rng)?;
            let (_, subframes) = blur::synthesize_frame_average(&sharp, &traj, longest, &AdditiveNoiseSpec::none())?;
            let blurred = counts
                .iter()
                .map(|&n| Ok((n, noise(n)?.apply(&blur::centered_average(&subframes, n)?).clamp01())))
                .collect::<Result<Vec<_>>>()?;
            Ok(SceneTrajectory { sharp, blurred, subframes })
        }
        BlurMethod::KernelField => {
            let fields =
                blur::kernel_field_family(cfg.height, cfg.width, &cfg.trajectory, counts, cfg.kernel_size, cfg.smoothness, rng.random())?;
            let blurred = counts
                .iter()
                .zip(&fields)
                .map(|(&n, f)| {
                    let clean = blur::convolve_pixelwise_unclamped(&sharp, f)?;
                    Ok((n, noise(n)?.apply(&clean).clamp01()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SceneTrajectory { sharp, blurred, subframes: Vec::new() })
        }
    }
}

/// Renders `num_scenes` trajectories into `out_dir` and writes the manifest.
pub fn build_toy_dataset(cfg: &ToyDatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    validate_pipeline_dims(cfg.height, cfg.width)?;
    if cfg.channels != 1 && cfg.channels != 3 {
        return Err(Error::InvalidArgument(format!("channels must be 1 or 3, got {}", cfg.channels)));
    }
    let counts = cfg.frame_counts()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let samples = par::map_range(cfg.num_scenes, |i| -> Result<TrajectorySample> {
        let scene_seed = sample_seed(cfg.seed, i);
        let traj = synthesize_scene(cfg, &counts, scene_seed)?;
        let sample_id = format!("s{i:05}");
        let save = |n: usize, img: &ImageArray| -> Result<TrajectoryPoint> {
            let rel = format!("images/{sample_id}_n{n:02}.png");
            img.save_png(&out_dir.join(&rel))?;
            TrajectoryPoint::new(rel, n)
        };
        let mut points = vec![save(1, &traj.sharp)?];
        for (n, img) in &traj.blurred {
            points.push(save(*n, img)?);
        }
        Ok(TrajectorySample { sample_id, blur_method: cfg.blur_method, scene_seed, points })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let manifest =
        DatasetManifest { version: MANIFEST_VERSION, split: cfg.split, config_hash: cfg.hash(), samples, root: out_dir.to_path_buf() };
    for s in &manifest.samples {
        s.validate(manifest.split)?;
    }
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Pairs `<blur_dir>/<name>` with `<sharp_dir>/<name>` as two-point test
/// trajectories at `t = g(assumed_n)`. Paths are stored relative to the
/// common parent when possible, absolute otherwise.
pub fn import_paired_directory(blur_dir: &Path, sharp_dir: &Path, assumed_n: usize) -> Result<DatasetManifest> {
    let t = g(assumed_n)?;
    if t == 0 {
        return Err(Error::InvalidArgument("assumed frame count must be > 1".into()));
    }
    let list = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                out.insert(entry.file_name().to_string_lossy().into_owned(), path);
            }
        }
        Ok(out)
    };
    let blurs = list(blur_dir)?;
    let sharps = list(sharp_dir)?;
    let mut orphans: Vec<String> =
        blurs.keys().filter(|k| !sharps.contains_key(*k)).map(|k| blur_dir.join(k).display().to_string()).collect();
    orphans.extend(sharps.keys().filter(|k| !blurs.contains_key(*k)).map(|k| sharp_dir.join(k).display().to_string()));
    if !orphans.is_empty() {
        return Err(Error::Orphans(orphans));
    }
    if blurs.is_empty() {
        log::warn!("no image pairs found in {} and {}", blur_dir.display(), sharp_dir.display());
    }
    let root = common_parent(blur_dir, sharp_dir);
    let rel = |p: &Path| -> String {
        match &root {
            Some(r) => p.strip_prefix(r).unwrap_or(p).to_string_lossy().into_owned(),
            None => p.to_string_lossy().into_owned(),
        }
    };
    let samples = blurs
        .iter()
        .enumerate()
        .map(|(i, (name, bpath))| {
            let stem = Path::new(name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(TrajectorySample {
                sample_id: stem.replace(char::is_whitespace, "_"),
                blur_method: BlurMethod::FrameAverage,
                scene_seed: i as u64,
                points: vec![TrajectoryPoint::new(rel(&sharps[name]), 1)?, TrajectoryPoint::new(rel(bpath), assumed_n)?],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest { version: MANIFEST_VERSION, split: Split::Test, config_hash: "-".into(), samples, root: root.unwrap_or_default() })
}

fn common_parent(a: &Path, b: &Path) -> Option<PathBuf> {
    let a = a.parent()?;
    let b = b.parent()?;
    (a == b).then(|| a.to_path_buf())
}

/// One training pair: a blurred point and the sharp frame of its trajectory.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub input: ImageArray,
    pub sharp: ImageArray,
    pub t: usize,
    pub sample_id: String,
}

/// Draws `batch_size` pairs uniformly (with replacement) over all `t > 0`
/// points, reading images from disk.
pub fn load_batch<R: Rng + ?Sized>(manifest: &DatasetManifest, batch_size: usize, rng: &mut R) -> Result<Vec<BatchItem>> {
    let picks = draw_pairs(manifest, batch_size, rng)?;
    picks
        .into_iter()
        .map(|(si, pi)| {
            let s = &manifest.samples[si];
            let p = &s.points[pi];
            Ok(BatchItem {
                input: ImageArray::load_png(&manifest.resolve(&p.image_path))?,
                sharp: ImageArray::load_png(&manifest.resolve(s.sharp_path()))?,
                t: p.t,
                sample_id: s.sample_id.clone(),
            })
        })
        .collect()
}

/// Uniform draw of `(sample, point)` indices over eligible pairs.
pub fn draw_pairs<R: Rng + ?Sized>(manifest: &DatasetManifest, batch_size: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let pairs = manifest.eligible_pairs();
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("manifest has no blurred points".into()));
    }
    Ok((0..batch_size).map(|_| pairs[rng.random_range(0..pairs.len())]).collect())
}

/// Manifest with every image decoded in memory, for training loops.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    /// `images[sample][point]`.
    pub images: Vec<Vec<ImageArray>>,
}

impl LoadedDataset {
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let images = par::map_slice(&manifest.samples, |s| {
            s.points.iter().map(|p| ImageArray::load_png(&manifest.resolve(&p.image_path))).collect::<Result<Vec<_>>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, images })
    }

    pub fn item(&self, sample: usize, point: usize) -> BatchItem {
        let s = &self.manifest.samples[sample];
        BatchItem {
            input: self.images[sample][point].clone(),
            sharp: self.images[sample][0].clone(),
            t: s.points[point].t,
            sample_id: s.sample_id.clone(),
        }
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<BatchItem>> {
        Ok(draw_pairs(&self.manifest, batch_size, rng)?.into_iter().map(|(s, p)| self.item(s, p)).collect())
    }

    /// All points at frame count `n`, one per sample that has one.
    pub fn items_at_frames(&self, n: usize) -> Vec<BatchItem> {
        self.manifest
            .samples
            .iter()
            .enumerate()
            .filter_map(|(si, s)| s.points.iter().position(|p| p.n_frames == n).map(|pi| self.item(si, pi)))
            .collect()
    }
}
