//! Point-annotated scenes: loading, augmentation, and desk-scale synthesis.
//!
//! Annotation sidecars are JSON arrays of `[x, y]` pixel pairs (origin
//! top-left, x rightward, y downward), one file per image with the same
//! basename. Point coordinates snap to a 1/1024-pixel grid on entry, which
//! makes the geometric ops exact: crop shifts subtract integers and the
//! horizontal mirror `x -> (W-1) - x` round-trips bit-identically.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Coordinate grid denominator for snapped point positions.
const COORD_GRID: f64 = 1024.0;

/// An image plus its ground-truth annotation points.
#[derive(Clone, Debug)]
pub struct Scene {
    pub id: String,
    /// `(3, H, W)` image with values in `[0, 1]`.
    pub image: Array3<f32>,
    /// `(x, y)` pixel coordinates, `0 <= x < W`, `0 <= y < H`.
    pub points: Vec<(f64, f64)>,
}

impl Scene {
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.size();
        for &(x, y) in &self.points {
            if !(0.0..w as f64).contains(&x) || !(0.0..h as f64).contains(&y) {
                return Err(Error::Annotation {
                    id: self.id.clone(),
                    msg: format!("point ({x}, {y}) outside {w}x{h} image bounds"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    pub crop_size: usize,
    pub flip_probability: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_size: 128,
            flip_probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "crop_size {} must be a positive multiple of 32",
                self.crop_size
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip_probability must be in [0,1]".into()));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Snap a coordinate to the 1/1024-pixel grid, clamped into `[0, limit)`.
fn snap(x: f64, limit: usize) -> f64 {
    let max_ticks = (limit as f64 * COORD_GRID) as i64 - 1;
    let ticks = (x * COORD_GRID).round() as i64;
    ticks.clamp(0, max_ticks) as f64 / COORD_GRID
}

/// Load every image in `root` with its JSON point sidecar; scenes sorted
/// by id (file stem).
pub fn load_annotations(root: &Path) -> Result<Vec<Scene>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::Io {
            path: root.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::invalid(format!(
            "no images found under {}",
            root.display()
        )));
    }
    let mut scenes = Vec::with_capacity(entries.len());
    for img_path in entries {
        let id = img_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let sidecar = img_path.with_extension("json");
        if !sidecar.exists() {
            return Err(Error::Annotation {
                id: id.clone(),
                msg: format!(
                    "missing annotation sidecar {} for image {}",
                    sidecar.display(),
                    img_path.display()
                ),
            });
        }
        let image = load_image(&img_path)?;
        let raw = std::fs::read_to_string(&sidecar).map_err(|e| Error::Io {
            path: sidecar.clone(),
            source: e,
        })?;
        let pairs: Vec<[f64; 2]> = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: sidecar.clone(),
            msg: e.to_string(),
        })?;
        let (_, h, w) = image.dim();
        let mut scene = Scene {
            id,
            image,
            points: Vec::with_capacity(pairs.len()),
        };
        for [x, y] in pairs {
            // Validate the raw value first so a bad annotation is reported
            // as written, then snap.
            if !(0.0..w as f64).contains(&x) || !(0.0..h as f64).contains(&y) {
                return Err(Error::Annotation {
                    id: scene.id.clone(),
                    msg: format!("point ({x}, {y}) outside {w}x{h} image bounds"),
                });
            }
            scene.points.push((snap(x, w), snap(y, h)));
        }
        scene.validate()?;
        scenes.push(scene);
    }
    scenes.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(scenes)
}

fn load_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = pixel.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Save a scene as PNG + JSON sidecar in the canonical format.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let (h, w) = scene.size();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (scene.image[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    let img_path = dir.join(format!("{}.png", scene.id));
    img.save(&img_path).map_err(|e| Error::Parse {
        path: img_path.clone(),
        msg: e.to_string(),
    })?;
    let pairs: Vec<[f64; 2]> = scene.points.iter().map(|&(x, y)| [x, y]).collect();
    let json_path = dir.join(format!("{}.json", scene.id));
    std::fs::write(&json_path, serde_json::to_string(&pairs).unwrap()).map_err(|e| Error::Io {
        path: json_path,
        source: e,
    })?;
    Ok(())
}

/// Crop a random `crop_size` square; points inside shift by the origin,
/// points outside drop.
pub fn random_crop(scene: &Scene, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = scene.size();
    let cs = cfg.crop_size;
    if cs > h.min(w) {
        return Err(Error::invalid(format!(
            "crop_size {cs} exceeds image extent {h}x{w}"
        )));
    }
    let oy = rng.random_range(0..=h - cs);
    let ox = rng.random_range(0..=w - cs);
    crop_at(scene, oy, ox, cs)
}

/// Deterministic core of [`random_crop`]: crop the `size` square at origin
/// `(oy, ox)`.
pub fn crop_at(scene: &Scene, oy: usize, ox: usize, size: usize) -> Result<Scene> {
    let (h, w) = scene.size();
    if oy + size > h || ox + size > w {
        return Err(Error::invalid(format!(
            "crop window {size} at ({ox},{oy}) exceeds image extent {h}x{w}"
        )));
    }
    let image = scene
        .image
        .slice(ndarray::s![.., oy..oy + size, ox..ox + size])
        .to_owned();
    let points = scene
        .points
        .iter()
        .filter(|&&(x, y)| {
            x >= ox as f64 && x < (ox + size) as f64 && y >= oy as f64 && y < (oy + size) as f64
        })
        .map(|&(x, y)| (x - ox as f64, y - oy as f64))
        .collect();
    Ok(Scene {
        id: scene.id.clone(),
        image,
        points,
    })
}

/// Mirror horizontally with probability `flip_probability`; x coordinates
/// map to `(W-1) - x`.
pub fn random_flip(scene: &Scene, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Scene> {
    cfg.validate()?;
    let draw: f64 = rng.random_range(0.0..1.0);
    if draw >= cfg.flip_probability {
        return Ok(scene.clone());
    }
    Ok(flip_horizontal(scene))
}

/// Unconditional horizontal mirror (the deterministic core of
/// [`random_flip`]).
pub fn flip_horizontal(scene: &Scene) -> Scene {
    let (_, w) = scene.size();
    let mut image = scene.image.clone();
    image.invert_axis(ndarray::Axis(2));
    let points = scene
        .points
        .iter()
        .map(|&(x, y)| ((w - 1) as f64 - x, y))
        .collect();
    Scene {
        id: scene.id.clone(),
        image,
        points,
    }
}

/// Generate deterministic synthetic scenes: a constant background with one
/// Gaussian blob (sigma = 2 px) per point. Point counts draw uniformly from
/// `density_range` (inclusive); placements keep a small margin and mutual
/// separation so localization at a 4 px threshold stays well-posed.
pub fn synth_scenes(
    count: usize,
    density_range: (usize, usize),
    size: usize,
    seed: u64,
) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(Error::invalid("scene count must be positive"));
    }
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::invalid(format!(
            "scene size {size} must be a positive multiple of 32"
        )));
    }
    let (lo, hi) = density_range;
    if lo > hi {
        return Err(Error::invalid("density range must satisfy min <= max"));
    }
    const SIGMA: f64 = 2.0;
    const AMPLITUDE: f32 = 0.75;
    const BACKGROUND: f32 = 0.15;
    const MARGIN: f64 = 4.0;
    const MIN_SEP: f64 = 8.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(count);
    for idx in 0..count {
        let n = rng.random_range(lo..=hi);
        let mut points: Vec<(f64, f64)> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut placed = None;
            for _attempt in 0..100 {
                let x = snap(rng.random_range(MARGIN..size as f64 - MARGIN), size);
                let y = snap(rng.random_range(MARGIN..size as f64 - MARGIN), size);
                let ok = points
                    .iter()
                    .all(|&(px, py)| ((px - x).powi(2) + (py - y).powi(2)).sqrt() >= MIN_SEP);
                if ok {
                    placed = Some((x, y));
                    break;
                }
            }
            if let Some(p) = placed {
                points.push(p);
            }
        }
        let mut image = Array3::<f32>::from_elem((3, size, size), BACKGROUND);
        let radius = (3.0 * SIGMA).ceil() as i64;
        for &(px, py) in &points {
            let (cx, cy) = (px.round() as i64, py.round() as i64);
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let (ix, iy) = (cx + dx, cy + dy);
                    if ix < 0 || iy < 0 || ix >= size as i64 || iy >= size as i64 {
                        continue;
                    }
                    let d2 = (ix as f64 - px).powi(2) + (iy as f64 - py).powi(2);
                    let v = AMPLITUDE * (-d2 / (2.0 * SIGMA * SIGMA)).exp() as f32;
                    for c in 0..3 {
                        let cell = &mut image[[c, iy as usize, ix as usize]];
                        *cell = (*cell + v).min(1.0);
                    }
                }
            }
        }
        scenes.push(Scene {
            id: format!("synth_{idx:04}"),
            image,
            points,
        });
    }
    Ok(scenes)
}
