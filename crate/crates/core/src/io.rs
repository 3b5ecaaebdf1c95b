//! On-disk scenes, checkpoint metadata and loss logs.
//!
//! A scene directory holds `scene.toml`, one PNG per view and optionally
//! ground-truth depth maps and a ground-truth cloud:
//!
//! ```toml
//! gt_cloud = "gt.ply"            # optional
//!
//! [[views]]
//! K = [fx, 0, cx, 0, fy, cy, 0, 0, 1]   # row-major intrinsics
//! R = [1, 0, 0, 0, 1, 0, 0, 0, 1]       # world-to-camera rotation, row-major
//! t = [0, 0, 0]                         # world-to-camera translation
//! image_path = "view_000.png"
//! d_min = 4.0
//! d_max = 10.0
//! depth_path = "depth_000.nr2d"         # optional ground truth
//! ```
//!
//! Paths are relative to the directory. A camera maps a world point `X` to
//! camera coordinates `R X + t` and to pixel `K (R X + t)`, with pixel
//! centres at integer coordinates.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use nalgebra::{Matrix3, Vector3};
use nlmvs_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraView};
use crate::cloud::{PlyEncoding, PointCloud};
use crate::depth::DepthMap;
use crate::error::{MvsError, Result};
use crate::inference::ModelConfig;
use crate::scene::Scene;

pub const MANIFEST: &str = "scene.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub image_path: String,
    pub d_min: f64,
    pub d_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_cloud: Option<String>,
    pub views: Vec<ViewEntry>,
}

impl SceneManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| MvsError::io(&path, e))?;
        toml::from_str(&text).map_err(|e| MvsError::Format(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MvsError::Format(e.to_string()))
    }

    pub fn camera(&self, i: usize, width: usize, height: usize) -> Result<Camera> {
        let v = &self.views[i];
        let k = Matrix3::from_row_slice(&v.k);
        let r = Matrix3::from_row_slice(&v.r);
        Camera::new(k, r, Vector3::from(v.t), width, height)
            .map_err(|e| MvsError::Geometry(format!("view {i}: {e}")))
    }
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

/// Writes `[C,H,W]` values in `[0, 1]` as an 8-bit RGB PNG. One channel is
/// replicated to gray.
pub fn write_png(path: impl AsRef<Path>, image: &[f64], height: usize, width: usize) -> Result<()> {
    let hw = height * width;
    if hw == 0 || image.len() % hw != 0 {
        return Err(MvsError::Invalid("image size does not match its extent".into()));
    }
    let channels = image.len() / hw;
    let buf = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        let px = |c: usize| (image[c.min(channels - 1) * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save_with_format(path.as_ref(), image::ImageFormat::Png)
        .map_err(|e| MvsError::Format(format!("{}: {e}", path.as_ref().display())))
}

/// Reads an image as `[3,H,W]` values in `[0, 1]`.
pub fn read_png<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let img = image::open(path.as_ref())
        .map_err(|e| MvsError::Format(format!("{}: {e}", path.as_ref().display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = T::of(p[c] as f64 / 255.0);
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

fn view_file(prefix: &str, i: usize, ext: &str) -> String {
    format!("{prefix}_{i:03}.{ext}")
}

/// Writes a scene directory. Existing files of the same names are replaced.
pub fn save_scene<T: Scalar>(dir: impl AsRef<Path>, scene: &Scene<T>, gt_cloud: Option<&PointCloud>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| MvsError::io(dir, e))?;
    let mut views = Vec::with_capacity(scene.len());
    for (i, v) in scene.views.iter().enumerate() {
        let cam = &v.camera;
        let image_path = view_file("view", i, "png");
        let img: Vec<f64> = v.image.data().iter().map(|x| x.to_f64().unwrap_or(0.0)).collect();
        write_png(dir.join(&image_path), &img, cam.height(), cam.width())?;
        let depth_path = match scene.gt_depths.get(i).and_then(Option::as_ref) {
            Some(map) => {
                let p = view_file("depth", i, "nr2d");
                map.write(dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        views.push(ViewEntry {
            k: row_major(cam.k()),
            r: row_major(cam.rotation()),
            t: [cam.translation().x, cam.translation().y, cam.translation().z],
            image_path,
            d_min: scene.d_min,
            d_max: scene.d_max,
            depth_path,
        });
    }
    let gt_name = match gt_cloud {
        Some(cloud) => {
            cloud.save_ply(dir.join("gt.ply"), PlyEncoding::BinaryLittleEndian)?;
            Some("gt.ply".to_string())
        }
        None => None,
    };
    let manifest = SceneManifest {
        gt_cloud: gt_name,
        views,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest.to_toml()?).map_err(|e| MvsError::io(&path, e))
}

/// Scene read from disk.
#[derive(Debug, Clone)]
pub struct LoadedScene<T> {
    pub dir: PathBuf,
    pub manifest: SceneManifest,
    pub scene: Scene<T>,
}

impl<T: Scalar> LoadedScene<T> {
    /// The ground-truth cloud named by the manifest.
    pub fn gt_cloud(&self) -> Result<PointCloud> {
        let name = self
            .manifest
            .gt_cloud
            .as_ref()
            .ok_or_else(|| MvsError::Invalid(format!("{} names no ground-truth cloud", self.dir.display())))?;
        PointCloud::load_ply(self.dir.join(name))
    }
}

/// Loads a scene directory. Its depth range is the union of the views'
/// ranges.
pub fn load_scene<T: Scalar>(dir: impl AsRef<Path>) -> Result<LoadedScene<T>> {
    let dir = dir.as_ref();
    let manifest = SceneManifest::read(dir.join(MANIFEST))?;
    if manifest.views.is_empty() {
        return Err(MvsError::Invalid(format!("{} lists no views", dir.display())));
    }
    let mut views = Vec::with_capacity(manifest.views.len());
    let mut gt_depths = Vec::with_capacity(manifest.views.len());
    let (mut d_min, mut d_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, v) in manifest.views.iter().enumerate() {
        if !(v.d_min > 0.0 && v.d_max > v.d_min && v.d_max.is_finite()) {
            return Err(MvsError::Geometry(format!(
                "view {i}: invalid depth range [{}, {}]",
                v.d_min, v.d_max
            )));
        }
        d_min = d_min.min(v.d_min);
        d_max = d_max.max(v.d_max);
        let image: Tensor<T> = read_png(dir.join(&v.image_path))?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let camera = manifest.camera(i, w, h)?;
        let gt = match &v.depth_path {
            Some(p) => {
                let map = DepthMap::read(dir.join(p))?;
                if map.height != h || map.width != w {
                    return Err(MvsError::Format(format!(
                        "view {i}: depth map {}x{} for a {h}x{w} image",
                        map.height, map.width
                    )));
                }
                Some(map)
            }
            None => None,
        };
        views.push(CameraView::new(camera, image)?);
        gt_depths.push(gt);
    }
    Ok(LoadedScene {
        dir: dir.to_path_buf(),
        manifest,
        scene: Scene {
            views,
            d_min,
            d_max,
            gt_depths,
        },
    })
}

/// Training state stored next to a parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub model: ModelConfig,
}

impl CheckpointMeta {
    /// `<checkpoint>.meta.toml`.
    pub fn path_for(checkpoint: impl AsRef<Path>) -> PathBuf {
        let mut s = checkpoint.as_ref().as_os_str().to_owned();
        s.push(".meta.toml");
        PathBuf::from(s)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| MvsError::io(&path, e))?;
        toml::from_str(&text).map_err(|e| MvsError::Format(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| MvsError::Format(e.to_string()))?;
        fs::write(path.as_ref(), text).map_err(|e| MvsError::io(&path, e))
    }
}

/// Appends `epoch,loss` rows, writing the header to a new file.
pub fn append_loss_csv(path: impl AsRef<Path>, rows: &[(usize, f64)]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| MvsError::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("epoch,loss\n");
    }
    for (epoch, loss) in rows {
        text.push_str(&format!("{epoch},{loss}\n"));
    }
    f.write_all(text.as_bytes()).map_err(|e| MvsError::io(path, e))
}

/// Reads rows written by [`append_loss_csv`].
pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<(usize, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MvsError::io(path, e))?;
    let bad = |line: &str| MvsError::Format(format!("{}: bad loss row {line:?}", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (e, l) = line.split_once(',').ok_or_else(|| bad(line))?;
            Ok((e.trim().parse().map_err(|_| bad(line))?, l.trim().parse().map_err(|_| bad(line))?))
        })
        .collect()
}
