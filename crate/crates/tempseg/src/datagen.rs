//! Procedural moving-shapes video generator and the on-disk dataset format
//! (PPM frames + PGM label maps + key=value manifest).
//!
//! Scenes are a deterministic function of their seed: a handful of colored
//! shapes (one class per shape kind) glide over a low-frequency background
//! gradient, bouncing off the borders, under a global sinusoidal illumination
//! and i.i.d. Gaussian pixel noise. Labels are exact silhouettes, unaffected
//! by illumination and noise.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::{LabelVolume, IGNORE};
use crate::netpbm;
use crate::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_speed: f64,
    pub max_speed: f64,
    pub illumination_amplitude: f64,
    pub illumination_period: f64,
    pub noise_sigma: f64,
    pub occlusion: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            frames: 30,
            height: 64,
            width: 64,
            num_classes: 6,
            min_shapes: 3,
            max_shapes: 8,
            min_speed: 0.5,
            max_speed: 2.5,
            illumination_amplitude: 0.25,
            illumination_period: 20.0,
            // strong enough that single-frame predictions visibly flicker;
            // temporal models exist to fix exactly this
            noise_sigma: 0.10,
            occlusion: true,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::InvalidConfig("scene needs at least 2 frames".into()));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("scene dims must be positive multiples of 4".into()));
        }
        if self.num_classes < 2 || self.num_classes > 6 {
            return Err(Error::InvalidConfig(
                "num_classes must be in 2..=6 (background + up to 5 shape kinds)".into(),
            ));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::InvalidConfig("bad shapes_per_scene range".into()));
        }
        if self.min_speed < 0.0 || self.min_speed > self.max_speed {
            return Err(Error::InvalidConfig("bad speed range".into()));
        }
        if self.illumination_amplitude < 0.0
            || self.illumination_amplitude >= 1.0
            || self.illumination_period <= 0.0
        {
            return Err(Error::InvalidConfig("bad illumination settings".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// key=value echo for the manifest.
    pub fn to_block(&self) -> String {
        format!(
            "seed={}\nframes={}\nheight={}\nwidth={}\nnum_classes={}\nmin_shapes={}\nmax_shapes={}\nmin_speed={}\nmax_speed={}\nillumination_amplitude={}\nillumination_period={}\nnoise_sigma={}\nocclusion={}\n",
            self.seed,
            self.frames,
            self.height,
            self.width,
            self.num_classes,
            self.min_shapes,
            self.max_shapes,
            self.min_speed,
            self.max_speed,
            self.illumination_amplitude,
            self.illumination_period,
            self.noise_sigma,
            self.occlusion
        )
    }

    pub fn apply_pair(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::InvalidConfig(format!("bad value '{}' for {}", v, k)))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "min_shapes" => self.min_shapes = num(key, value)?,
            "max_shapes" => self.max_shapes = num(key, value)?,
            "min_speed" => self.min_speed = num(key, value)?,
            "max_speed" => self.max_speed = num(key, value)?,
            "illumination_amplitude" => self.illumination_amplitude = num(key, value)?,
            "illumination_period" => self.illumination_period = num(key, value)?,
            "noise_sigma" => self.noise_sigma = num(key, value)?,
            "occlusion" => self.occlusion = num(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown scene config key '{}'", other))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Bar,
}

const ALL_KINDS: [ShapeKind; 5] =
    [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Ring, ShapeKind::Bar];

impl ShapeKind {
    /// Each kind is its own semantic class; background is class 0.
    pub fn class(self) -> u8 {
        match self {
            ShapeKind::Disk => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
            ShapeKind::Ring => 4,
            ShapeKind::Bar => 5,
        }
    }

    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => {
                // upward-pointing isoceles triangle inscribed in the box
                dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            ShapeKind::Bar => dx.abs() <= r && dy.abs() <= 0.35 * r,
        }
    }
}

/// Fixed, saturated base color per class so classes are visually separable.
pub fn class_color(class: u8) -> [f64; 3] {
    match class {
        1 => [0.95, 0.25, 0.20],
        2 => [0.20, 0.80, 0.25],
        3 => [0.25, 0.35, 0.95],
        4 => [0.95, 0.85, 0.20],
        5 => [0.85, 0.25, 0.90],
        _ => [0.0, 0.0, 0.0],
    }
}

/// One moving shape; `cx/cy` are the center at t = 0, in pixels.
#[derive(Debug, Clone)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub vx: f64,
    pub vy: f64,
    pub radius: f64,
    /// vertical band [lo, hi) the center bounces inside (used to prevent
    /// overlap when occlusion is disabled)
    pub band: (f64, f64),
    pub brightness: f64,
}

impl Shape {
    /// Center at frame t: constant velocity with reflection at the band and
    /// image borders (triangle-wave fold of the free trajectory).
    fn center_at(&self, t: usize, width: f64) -> (f64, f64) {
        let fold = |p0: f64, v: f64, lo: f64, hi: f64, t: f64| -> f64 {
            if hi - lo <= 0.0 {
                return (lo + hi) / 2.0;
            }
            let span = hi - lo;
            let raw = (p0 - lo + v * t).rem_euclid(2.0 * span);
            lo + if raw <= span { raw } else { 2.0 * span - raw }
        };
        let x = fold(self.cx, self.vx, self.radius, width - 1.0 - self.radius, t as f64);
        let y = fold(self.cy, self.vy, self.band.0, self.band.1, t as f64);
        (x, y)
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    /// one [3,M,N] tensor per frame, values in [0,1]
    pub frames: Vec<Tensor>,
    pub labels: LabelVolume,
}

/// Background gradient coefficients, fixed per scene.
#[derive(Debug, Clone)]
pub struct Background {
    pub base: [f64; 3],
    pub gx: [f64; 3],
    pub gy: [f64; 3],
}

fn sample_shapes(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let n = rng.gen_range(config.min_shapes..=config.max_shapes);
    let kinds: Vec<ShapeKind> = ALL_KINDS
        .iter()
        .copied()
        .filter(|k| (k.class() as usize) < config.num_classes)
        .collect();
    let (h, w) = (config.height as f64, config.width as f64);
    let mut shapes = Vec::with_capacity(n);
    for i in 0..n {
        let kind = kinds[rng.gen_range(0..kinds.len())];
        let band = if config.occlusion {
            (0.0, h - 1.0)
        } else {
            // disjoint horizontal bands so shapes never overlap
            let bh = h / n as f64;
            (i as f64 * bh, (i + 1) as f64 * bh - 1.0)
        };
        let band_span = band.1 - band.0;
        let max_r = (band_span / 2.0).min(w / 6.0).max(2.0);
        let radius = rng.gen_range((max_r * 0.45).max(2.0)..=max_r);
        let band = (band.0 + radius, (band.1 - radius).max(band.0 + radius));
        let speed = rng.gen_range(config.min_speed..=config.max_speed);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        shapes.push(Shape {
            kind,
            cx: rng.gen_range(radius..=(w - 1.0 - radius)),
            cy: rng.gen_range(band.0..=band.1),
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            radius,
            band,
            brightness: rng.gen_range(0.9..=1.1),
        });
    }
    shapes
}

fn sample_background(rng: &mut ChaCha8Rng) -> Background {
    let mut base = [0.0; 3];
    let mut gx = [0.0; 3];
    let mut gy = [0.0; 3];
    for c in 0..3 {
        base[c] = rng.gen_range(0.10..=0.30);
        gx[c] = rng.gen_range(-0.15..=0.15);
        gy[c] = rng.gen_range(-0.15..=0.15);
    }
    Background { base, gx, gy }
}

/// Renders a scene from explicit shapes and background (the deterministic
/// core of `generate_scene`, exposed for oracle tests). Later shapes draw on
/// top of earlier ones.
pub fn render_scene(config: &SceneConfig, shapes: &[Shape], bg: &Background) -> Result<Scene> {
    config.validate()?;
    let (t_max, h, w) = (config.frames, config.height, config.width);
    let plane = h * w;
    let mut labels = LabelVolume::new(t_max, h, w, 0);
    let mut frames = Vec::with_capacity(t_max);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x517c_c1b7_2722_0a95));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for t in 0..t_max {
        let centers: Vec<(f64, f64)> =
            shapes.iter().map(|s| s.center_at(t, w as f64)).collect();
        let illum = 1.0 + config.illumination_amplitude
            * (std::f64::consts::TAU * t as f64 / config.illumination_period).sin();
        let mut frame = Tensor::zeros(&[3, h, w]);
        for m in 0..h {
            for n in 0..w {
                // topmost shape wins
                let mut rgb = [
                    bg.base[0] + bg.gx[0] * n as f64 / w as f64 + bg.gy[0] * m as f64 / h as f64,
                    bg.base[1] + bg.gx[1] * n as f64 / w as f64 + bg.gy[1] * m as f64 / h as f64,
                    bg.base[2] + bg.gx[2] * n as f64 / w as f64 + bg.gy[2] * m as f64 / h as f64,
                ];
                let mut label = 0u8;
                for (s, &(cx, cy)) in shapes.iter().zip(&centers) {
                    if s.kind.covers(n as f64 - cx, m as f64 - cy, s.radius) {
                        label = s.kind.class();
                        let col = class_color(label);
                        for c in 0..3 {
                            rgb[c] = (col[c] * s.brightness).clamp(0.0, 1.0);
                        }
                    }
                }
                labels.set(t, m, n, label);
                for c in 0..3 {
                    let noisy = rgb[c] * illum
                        + config.noise_sigma * normal.sample(&mut noise_rng);
                    frame.data_mut()[c * plane + m * w + n] = noisy.clamp(0.0, 1.0);
                }
            }
        }
        frames.push(frame);
    }
    Ok(Scene { frames, labels })
}

/// Deterministic scene from `config.seed`.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shapes = sample_shapes(config, &mut rng);
    let bg = sample_background(&mut rng);
    render_scene(config, &shapes, &bg)
}

/// Per-scene seed for scene index k of a dataset seeded with `base_seed`
/// (splitmix-style mixing so nearby bases do not share scene seeds).
pub fn scene_seed(base_seed: u64, index: usize) -> u64 {
    let mut z = base_seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub config: SceneConfig,
    pub split: String,
    pub scenes: Vec<Scene>,
}

/// Generates `count` scenes; scene k uses `scene_seed(config.seed, k)`.
pub fn generate_dataset(config: &SceneConfig, count: usize, split: &str) -> Result<SceneDataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one scene".into()));
    }
    let mut scenes = Vec::with_capacity(count);
    for k in 0..count {
        let mut c = config.clone();
        c.seed = scene_seed(config.seed, k);
        scenes.push(generate_scene(&c)?);
    }
    Ok(SceneDataset { config: config.clone(), split: split.to_string(), scenes })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_dataset(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.txt");
    let mut manifest = String::new();
    manifest.push_str("version=1\n");
    manifest.push_str(&format!("split={}\n", dataset.split));
    manifest.push_str(&format!("scenes={}\n", dataset.scenes.len()));
    manifest.push_str(&dataset.config.to_block());
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;

    for (k, scene) in dataset.scenes.iter().enumerate() {
        let scene_dir = dir.join(format!("scene_{:05}", k));
        fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
        let (h, w) = (scene.labels.height, scene.labels.width);
        let plane = h * w;
        for (t, frame) in scene.frames.iter().enumerate() {
            let mut img = netpbm::Image::new(w, h, 3);
            for m in 0..h {
                for n in 0..w {
                    for c in 0..3 {
                        img.data[(m * w + n) * 3 + c] = quantize(frame.data()[c * plane + m * w + n]);
                    }
                }
            }
            let path = scene_dir.join(format!("frame_{:03}.ppm", t));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut bw = BufWriter::new(file);
            netpbm::write_ppm(&mut bw, &img).map_err(|e| Error::io(&path, e))?;
            bw.flush().map_err(|e| Error::io(&path, e))?;

            let mut limg = netpbm::Image::new(w, h, 1);
            limg.data.copy_from_slice(scene.labels.frame(t));
            let lpath = scene_dir.join(format!("label_{:03}.pgm", t));
            let lfile = fs::File::create(&lpath).map_err(|e| Error::io(&lpath, e))?;
            let mut lw = BufWriter::new(lfile);
            netpbm::write_pgm(&mut lw, &limg).map_err(|e| Error::io(&lpath, e))?;
            lw.flush().map_err(|e| Error::io(&lpath, e))?;
        }
    }
    Ok(())
}

fn parse_manifest(path: &Path) -> Result<(SceneConfig, String, usize)> {
    let text = fs::read_to_string(path)
        .map_err(|_| Error::format(path, "no manifest (is this a dataset directory?)"))?;
    let mut config = SceneConfig::default();
    let mut split = String::new();
    let mut scenes = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad manifest line '{}'", line)))?;
        match k {
            "version" => {
                if v != "1" {
                    return Err(Error::format(path, format!("unsupported version '{}'", v)));
                }
            }
            "split" => split = v.to_string(),
            "scenes" => {
                scenes = Some(v.parse().map_err(|_| {
                    Error::format(path, format!("bad scene count '{}'", v))
                })?)
            }
            other => config
                .apply_pair(other, v)
                .map_err(|e| Error::format(path, e.to_string()))?,
        }
    }
    let scenes = scenes.ok_or_else(|| Error::format(path, "manifest missing 'scenes'"))?;
    Ok((config, split, scenes))
}

fn read_scene(scene_dir: &Path, config: &SceneConfig) -> Result<Scene> {
    let (t_max, h, w) = (config.frames, config.height, config.width);
    let plane = h * w;
    let mut frames = Vec::with_capacity(t_max);
    let mut labels = LabelVolume::new(t_max, h, w, 0);
    for t in 0..t_max {
        let fpath = scene_dir.join(format!("frame_{:03}.ppm", t));
        let file = fs::File::open(&fpath)
            .map_err(|_| Error::format(&fpath, "missing frame image"))?;
        let img = netpbm::read_ppm(&mut BufReader::new(file))
            .map_err(|e| Error::format(&fpath, e.to_string()))?;
        if img.width != w || img.height != h {
            return Err(Error::format(
                &fpath,
                format!("frame is {}x{}, manifest says {}x{}", img.width, img.height, w, h),
            ));
        }
        let mut frame = Tensor::zeros(&[3, h, w]);
        for m in 0..h {
            for n in 0..w {
                for c in 0..3 {
                    frame.data_mut()[c * plane + m * w + n] =
                        img.data[(m * w + n) * 3 + c] as f64 / 255.0;
                }
            }
        }
        frames.push(frame);

        let lpath = scene_dir.join(format!("label_{:03}.pgm", t));
        let lfile = fs::File::open(&lpath)
            .map_err(|_| Error::format(&lpath, "missing label image"))?;
        let limg = netpbm::read_pgm(&mut BufReader::new(lfile))
            .map_err(|e| Error::format(&lpath, e.to_string()))?;
        if limg.width != w || limg.height != h {
            return Err(Error::format(&lpath, "label size mismatch"));
        }
        for (px, &v) in limg.data.iter().enumerate() {
            if v != IGNORE && v as usize >= config.num_classes {
                return Err(Error::format(
                    &lpath,
                    format!("label value {} exceeds {} classes", v, config.num_classes),
                ));
            }
            labels.set(t, px / w, px % w, v);
        }
    }
    Ok(Scene { frames, labels })
}

pub fn read_dataset(dir: &Path) -> Result<SceneDataset> {
    let (config, split, count) = parse_manifest(&dir.join("manifest.txt"))?;
    let mut scenes = Vec::with_capacity(count);
    for k in 0..count {
        let scene_dir: PathBuf = dir.join(format!("scene_{:05}", k));
        if !scene_dir.is_dir() {
            return Err(Error::format(
                &scene_dir,
                format!("manifest promises {} scenes but scene {} is missing", count, k),
            ));
        }
        scenes.push(read_scene(&scene_dir, &config)?);
    }
    Ok(SceneDataset { config, split, scenes })
}

/// Labels visible only at frame indices t with (t + 1) divisible by
/// `stride`; all other frames are fully IGNORE. Stride 1 is the identity.
pub fn sparse_labels(labels: &LabelVolume, stride: usize) -> Result<LabelVolume> {
    if stride == 0 {
        return Err(Error::InvalidArgument("sparse stride must be positive".into()));
    }
    let mut out = labels.clone();
    for t in 0..labels.frames {
        if (t + 1) % stride != 0 {
            let (h, w) = (labels.height, labels.width);
            for m in 0..h {
                for n in 0..w {
                    out.set(t, m, n, IGNORE);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::omega_norm;

    fn small_config() -> SceneConfig {
        SceneConfig { frames: 6, height: 16, width: 16, ..Default::default() }
    }

    fn static_config() -> SceneConfig {
        SceneConfig {
            min_speed: 0.0,
            max_speed: 0.0,
            illumination_amplitude: 0.0,
            noise_sigma: 0.0,
            ..small_config()
        }
    }

    #[test]
    fn static_scene_is_constant() {
        let scene = generate_scene(&static_config()).unwrap();
        for t in 1..scene.frames.len() {
            assert_eq!(scene.frames[t], scene.frames[0]);
            assert_eq!(scene.labels.frame(t), scene.labels.frame(0));
        }
        assert_eq!(omega_norm(&scene.labels).unwrap(), (6 - 1) * 16 * 16);
    }

    #[test]
    fn same_seed_is_bitwise_identical_and_seeds_differ() {
        let config = small_config();
        let a = generate_scene(&config).unwrap();
        let b = generate_scene(&config).unwrap();
        assert_eq!(a.labels.data(), b.labels.data());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa, fb);
        }
        let c = generate_scene(&SceneConfig { seed: 1, ..config }).unwrap();
        assert_ne!(a.labels.data(), c.labels.data());
    }

    #[test]
    fn disk_centroid_tracks_velocity() {
        let config = SceneConfig {
            frames: 8,
            height: 32,
            width: 64,
            noise_sigma: 0.0,
            illumination_amplitude: 0.0,
            ..Default::default()
        };
        let shapes = vec![Shape {
            kind: ShapeKind::Disk,
            cx: 10.0,
            cy: 16.0,
            vx: 2.0,
            vy: 0.0,
            radius: 5.0,
            band: (5.0, 26.0),
            brightness: 1.0,
        }];
        let bg = Background { base: [0.2; 3], gx: [0.0; 3], gy: [0.0; 3] };
        let scene = render_scene(&config, &shapes, &bg).unwrap();
        let centroid_x = |t: usize| -> f64 {
            let (mut sum, mut count) = (0.0, 0u32);
            for m in 0..32 {
                for n in 0..64 {
                    if scene.labels.get(t, m, n) == 1 {
                        sum += n as f64;
                        count += 1;
                    }
                }
            }
            sum / count as f64
        };
        for t in 0..7 {
            let step = centroid_x(t + 1) - centroid_x(t);
            assert!((step - 2.0).abs() <= 0.1, "t={} step={}", t, step);
        }
    }

    #[test]
    fn silhouette_matches_label_on_clean_scenes() {
        let config = static_config();
        let scene = generate_scene(&config).unwrap();
        let plane = 16 * 16;
        // every labeled pixel carries exactly its class color; background
        // pixels never do (colors are far from the background range)
        for m in 0..16 {
            for n in 0..16 {
                let label = scene.labels.get(0, m, n);
                let rgb = [
                    scene.frames[0].data()[m * 16 + n],
                    scene.frames[0].data()[plane + m * 16 + n],
                    scene.frames[0].data()[2 * plane + m * 16 + n],
                ];
                if label > 0 {
                    let col = class_color(label);
                    // per-shape brightness is within ±10%
                    for c in 0..3 {
                        assert!((rgb[c] - col[c]).abs() <= 0.11 * col[c] + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn shapes_stay_in_band_without_occlusion() {
        let config = SceneConfig { occlusion: false, frames: 20, ..small_config() };
        let scene = generate_scene(&config).unwrap();
        // labels exist (at least one shape pixel somewhere)
        assert!(scene.labels.data().iter().any(|&v| v > 0));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        let ds = generate_dataset(&config, 2, "train").unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.scenes.len(), 2);
        assert_eq!(back.split, "train");
        for (a, b) in ds.scenes.iter().zip(&back.scenes) {
            assert_eq!(a.labels.data(), b.labels.data());
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                for (x, y) in fa.iter().zip(fb.iter()) {
                    assert!((x - y).abs() <= 1.0 / 510.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn writing_twice_is_bitwise_identical() {
        let config = small_config();
        let ds = generate_dataset(&config, 1, "train").unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_dataset(&ds, d1.path()).unwrap();
        write_dataset(&ds, d2.path()).unwrap();
        let f1 = fs::read(d1.path().join("scene_00000/frame_000.ppm")).unwrap();
        let f2 = fs::read(d2.path().join("scene_00000/frame_000.ppm")).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn load_errors_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));

        let config = small_config();
        let ds = generate_dataset(&config, 1, "val").unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        // corrupt the manifest scene count
        let manifest = dir.path().join("manifest.txt");
        let text = fs::read_to_string(&manifest).unwrap().replace("scenes=1", "scenes=3");
        fs::write(&manifest, text).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("scene_00001"), "{err}");
    }

    #[test]
    fn sparse_view_hides_unlabeled_frames() {
        let config = SceneConfig { frames: 30, ..small_config() };
        let scene = generate_scene(&config).unwrap();
        let sparse = sparse_labels(&scene.labels, 20).unwrap();
        for t in 0..30 {
            let all_ignore = sparse.frame(t).iter().all(|&v| v == IGNORE);
            if t == 19 {
                assert!(!all_ignore);
                assert_eq!(sparse.frame(t), scene.labels.frame(t));
            } else {
                assert!(all_ignore, "frame {} should be hidden", t);
            }
        }
        let identity = sparse_labels(&scene.labels, 1).unwrap();
        assert_eq!(identity.data(), scene.labels.data());
    }
}
