//! Pinhole camera, synthetic scene generation, and KITTI label/calibration
//! files.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::Config;
use crate::heads::{wrap_angle, GroundTruthObject};
use crate::imageio::{self, ImageError, RgbImage};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("point at depth {0} is not in front of the camera")]
    BehindCamera(f64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("calibration has no P2 row")]
    MissingP2,
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("image {0} has extents not divisible by 32")]
    ImageSize(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

/// 3×4 projection matrix in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub p: [[f64; 4]; 3],
}

impl CameraIntrinsics {
    pub fn new(p: [[f64; 4]; 3]) -> Result<Self, DataError> {
        if p[0][0] <= 0.0 || p[1][1] <= 0.0 {
            return Err(DataError::Intrinsics(format!("focal lengths {} and {}", p[0][0], p[1][1])));
        }
        Ok(Self { p })
    }

    /// Square pixels with the principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            p: [
                [focal, 0.0, width as f64 / 2.0, 0.0],
                [0.0, focal, height as f64 / 2.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    pub fn fx(&self) -> f64 {
        self.p[0][0]
    }
    pub fn fy(&self) -> f64 {
        self.p[1][1]
    }
    pub fn cx(&self) -> f64 {
        self.p[0][2]
    }
    pub fn cy(&self) -> f64 {
        self.p[1][2]
    }

    /// Pixel coordinates and depth of a camera-frame point.
    pub fn project(&self, point: [f64; 3]) -> Result<(f64, f64, f64), DataError> {
        let [x, y, z] = point;
        if z <= 0.0 {
            return Err(DataError::BehindCamera(z));
        }
        Ok((self.fx() * x / z + self.cx(), self.fy() * y / z + self.cy(), z))
    }

    /// Camera-frame point at depth `z` seen at pixel `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx()) * z / self.fx(), (v - self.cy()) * z / self.fy(), z]
    }
}

/// The eight corners of a yaw-rotated box whose bottom centre is `location`.
pub fn box_corners(location: [f64; 3], dims: [f64; 3], heading: f64) -> [[f64; 3]; 8] {
    let [h, w, l] = dims;
    let (s, c) = heading.sin_cos();
    let mut out = [[0.0; 3]; 8];
    let mut k = 0;
    for dy in [0.0, -h] {
        for (sx, sz) in [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)] {
            let (x, z) = (sx * l / 2.0, sz * w / 2.0);
            out[k] = [location[0] + c * x + s * z, location[1] + dy, location[2] - s * x + c * z];
            k += 1;
        }
    }
    out
}

/// Projected 3D centre, normalised by the image extent.
pub fn projected_center(
    cam: &CameraIntrinsics,
    location: [f64; 3],
    height: f64,
    width_px: usize,
    height_px: usize,
) -> Result<[f64; 2], DataError> {
    let (u, v, _) = cam.project([location[0], location[1] - height / 2.0, location[2]])?;
    Ok([u / width_px as f64, v / height_px as f64])
}

/// Tight pixel bounds of the projected corners, clipped to the image.
pub fn projected_box(cam: &CameraIntrinsics, corners: &[[f64; 3]; 8], w: usize, h: usize) -> Result<[f64; 4], DataError> {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for &c in corners {
        let (u, v, _) = cam.project(c)?;
        b = [b[0].min(u), b[1].min(v), b[2].max(u), b[3].max(v)];
    }
    let (w, h) = (w as f64, h as f64);
    Ok([b[0].clamp(0.0, w), b[1].clamp(0.0, h), b[2].clamp(0.0, w), b[3].clamp(0.0, h)])
}

/// One image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub camera: CameraIntrinsics,
    pub objects: Vec<GroundTruthObject>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub focal: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub num_classes: usize,
}

impl SceneSpec {
    /// Object depths stay one meter inside the model's depth range.
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            image_height: cfg.image_height,
            image_width: cfg.image_width,
            focal: cfg.focal_length,
            min_objects: cfg.min_objects,
            max_objects: cfg.max_objects,
            depth_min: cfg.scene_depth_min.max(cfg.depth_min + 1.0),
            depth_max: cfg.scene_depth_max.min(cfg.depth_max - 1.0),
            num_classes: cfg.num_classes,
        }
    }
}

pub const CLASS_NAMES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

/// Height, width and length ranges per class.
const SIZE_RANGES: [[(f64, f64); 3]; 3] = [
    [(1.4, 1.7), (1.5, 1.9), (3.5, 4.6)],
    [(1.6, 1.9), (0.5, 0.8), (0.6, 1.0)],
    [(1.6, 1.8), (0.5, 0.8), (1.6, 1.9)],
];

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.35, 0.9],
    [0.9, 0.8, 0.2],
    [0.7, 0.3, 0.8],
    [0.2, 0.8, 0.8],
];

pub const BACKGROUND: [f64; 3] = [0.4, 0.4, 0.4];
const CAMERA_HEIGHT: f64 = 1.65;
const MIN_BOX_AREA: f64 = 16.0;
const MAX_TRIES: usize = 200;

pub fn class_color(class_id: usize) -> [f64; 3] {
    PALETTE[class_id % PALETTE.len()]
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = CameraIntrinsics::centered(spec.focal, spec.image_width, spec.image_height);
    let (w, h) = (spec.image_width, spec.image_height);
    let count = if spec.max_objects > spec.min_objects {
        rng.random_range(spec.min_objects..=spec.max_objects)
    } else {
        spec.min_objects
    };
    let mut objects: Vec<GroundTruthObject> = Vec::with_capacity(count);
    let mut polygons: Vec<Vec<[f64; 2]>> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..MAX_TRIES {
            let class_id = rng.random_range(0..spec.num_classes);
            let ranges = SIZE_RANGES[class_id % SIZE_RANGES.len()];
            let dims = ranges.map(|(lo, hi)| rng.random_range(lo..hi));
            let z = rng.random_range(spec.depth_min..spec.depth_max);
            let u = rng.random_range(0.05 * w as f64..0.95 * w as f64);
            let y = CAMERA_HEIGHT + rng.random_range(-0.15..0.15);
            let heading = rng.random_range(-PI..PI);
            let x = cam.back_project(u, cam.cy(), z)[0];
            let location = [x, y, z];
            let corners = box_corners(location, dims, heading);
            if corners.iter().any(|c| c[2] <= 0.5) {
                continue;
            }
            let Ok(center) = projected_center(&cam, location, dims[0], w, h) else { continue };
            if !(0.0..1.0).contains(&center[0]) || !(0.0..1.0).contains(&center[1]) {
                continue;
            }
            let box2d = projected_box(&cam, &corners, w, h).expect("corners in front");
            if (box2d[2] - box2d[0]) * (box2d[3] - box2d[1]) < MIN_BOX_AREA {
                continue;
            }
            // keep objects mostly distinguishable from one another
            if objects.iter().any(|o| box_iou(o.box2d, box2d) > 0.5) {
                continue;
            }
            let hull = convex_hull(corners.iter().map(|&c| {
                let (u, v, _) = cam.project(c).expect("corners in front");
                [u, v]
            }));
            polygons.push(hull);
            objects.push(GroundTruthObject {
                class_id,
                center3d_norm: center,
                box2d,
                depth: z,
                dims,
                heading: wrap_angle(heading),
                location,
            });
            break;
        }
    }
    let image = render(h, w, &objects, &polygons);
    SceneSample { id: format!("{seed:06}"), image, camera: cam, objects }
}

fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    inter / (area(a) + area(b) - inter).max(1e-12)
}

/// Counter-clockwise (in image coordinates) hull by monotone chain.
pub fn convex_hull(points: impl Iterator<Item = [f64; 2]>) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    if poly.len() < 3 {
        return false;
    }
    (0..poly.len()).all(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
    })
}

/// Flat-shaded silhouettes, farthest first so nearer objects cover them.
fn render(h: usize, w: usize, objects: &[GroundTruthObject], polygons: &[Vec<[f64; 2]>]) -> Tensor {
    let mut planes = vec![0.0; 3 * h * w];
    for c in 0..3 {
        planes[c * h * w..(c + 1) * h * w].fill(BACKGROUND[c]);
    }
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].depth.total_cmp(&objects[a].depth));
    for k in order {
        let color = class_color(objects[k].class_id);
        let poly = &polygons[k];
        let (lo, hi) = poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
        let (ylo, yhi) = ((lo.floor().max(0.0)) as usize, (hi.ceil().min(h as f64)) as usize);
        for i in ylo..yhi {
            for j in 0..w {
                if inside(poly, [j as f64 + 0.5, i as f64 + 0.5]) {
                    for c in 0..3 {
                        planes[c * h * w + i * w + j] = color[c];
                    }
                }
            }
        }
    }
    Tensor::new(&[3, h, w], planes).expect("positive extents")
}

/// Mirrors the image and annotations about the vertical centre line. Exact
/// when the principal point sits at the image centre.
pub fn flip_horizontal(scene: &SceneSample) -> SceneSample {
    let (h, w) = (scene.height(), scene.width());
    let src = scene.image.values();
    let mut planes = vec![0.0; src.len()];
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                planes[(c * h + i) * w + j] = src[(c * h + i) * w + (w - 1 - j)];
            }
        }
    }
    let wf = w as f64;
    let objects = scene
        .objects
        .iter()
        .map(|o| GroundTruthObject {
            center3d_norm: [1.0 - o.center3d_norm[0], o.center3d_norm[1]],
            box2d: [wf - o.box2d[2], o.box2d[1], wf - o.box2d[0], o.box2d[3]],
            heading: wrap_angle(PI - o.heading),
            location: [-o.location[0], o.location[1], o.location[2]],
            ..o.clone()
        })
        .collect();
    let mut camera = scene.camera;
    camera.p[0][2] = wf - camera.cx();
    SceneSample {
        id: scene.id.clone(),
        image: Tensor::new(&[3, h, w], planes).expect("same shape"),
        camera,
        objects,
    }
}

/// One line of a KITTI label or result file.
#[derive(Clone, Debug, PartialEq)]
pub struct KittiObject {
    /// `None` for DontCare and unknown types.
    pub class_id: Option<usize>,
    pub type_name: String,
    pub truncated: f64,
    pub occluded: i64,
    pub alpha: f64,
    pub box2d: [f64; 4],
    pub dims: [f64; 3],
    pub location: [f64; 3],
    pub heading: f64,
    pub score: Option<f64>,
}

impl KittiObject {
    pub fn is_ignored(&self) -> bool {
        self.class_id.is_none()
    }

    pub fn to_ground_truth(&self, cam: &CameraIntrinsics, w: usize, h: usize) -> Option<GroundTruthObject> {
        let class_id = self.class_id?;
        let center = projected_center(cam, self.location, self.dims[0], w, h).ok()?;
        Some(GroundTruthObject {
            class_id,
            center3d_norm: center,
            box2d: self.box2d,
            depth: self.location[2],
            dims: self.dims,
            heading: wrap_angle(self.heading),
            location: self.location,
        })
    }

    pub fn from_ground_truth(o: &GroundTruthObject, score: Option<f64>) -> Self {
        Self {
            class_id: Some(o.class_id),
            type_name: class_name(o.class_id),
            truncated: 0.0,
            occluded: 0,
            alpha: observation_angle(o.heading, o.location),
            box2d: o.box2d,
            dims: o.dims,
            location: o.location,
            heading: o.heading,
            score,
        }
    }
}

pub fn class_name(id: usize) -> String {
    CLASS_NAMES.get(id).map_or_else(|| format!("Class{id}"), |s| s.to_string())
}

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&n| n == name).or_else(|| name.strip_prefix("Class")?.parse().ok())
}

/// Viewing-angle-relative heading.
pub fn observation_angle(heading: f64, location: [f64; 3]) -> f64 {
    wrap_angle(heading - location[0].atan2(location[2]))
}

pub fn parse_kitti_line(line: &str, number: usize) -> Result<KittiObject, DataError> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 15 && f.len() != 16 {
        return Err(DataError::Parse { line: number, msg: format!("expected 15 or 16 fields, found {}", f.len()) });
    }
    let num = |i: usize| -> Result<f64, DataError> {
        f[i].parse::<f64>()
            .map_err(|_| DataError::Parse { line: number, msg: format!("field {} ({:?}) is not a number", i + 1, f[i]) })
    };
    let occluded = num(2)?;
    Ok(KittiObject {
        class_id: class_id(f[0]),
        type_name: f[0].to_string(),
        truncated: num(1)?,
        occluded: occluded as i64,
        alpha: num(3)?,
        box2d: [num(4)?, num(5)?, num(6)?, num(7)?],
        dims: [num(8)?, num(9)?, num(10)?],
        location: [num(11)?, num(12)?, num(13)?],
        heading: num(14)?,
        score: if f.len() == 16 { Some(num(15)?) } else { None },
    })
}

/// Every non-blank line; line numbers in errors are 1-based.
pub fn parse_kitti_labels(text: &str) -> Result<Vec<KittiObject>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_kitti_line(l, i + 1))
        .collect()
}

pub fn format_kitti_line(o: &KittiObject) -> String {
    let mut s = format!("{} {:.6} {} {:.6}", o.type_name, o.truncated, o.occluded, o.alpha);
    for v in o.box2d.iter().chain(&o.dims).chain(&o.location) {
        write!(s, " {v:.6}").expect("string write");
    }
    write!(s, " {:.6}", o.heading).expect("string write");
    if let Some(score) = o.score {
        write!(s, " {score:.6}").expect("string write");
    }
    s
}

pub fn write_kitti_file(path: &Path, objects: &[KittiObject]) -> Result<(), DataError> {
    let text: String = objects.iter().map(|o| format_kitti_line(o) + "\n").collect();
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_kitti_file(path: &Path) -> Result<Vec<KittiObject>, DataError> {
    parse_kitti_labels(&fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn parse_kitti_calib(text: &str) -> Result<CameraIntrinsics, DataError> {
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim().strip_prefix("P2:") else { continue };
        let v: Vec<f64> = rest
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| DataError::Parse { line: i + 1, msg: format!("bad number {t:?}") }))
            .collect::<Result<_, _>>()?;
        if v.len() != 12 {
            return Err(DataError::Parse { line: i + 1, msg: format!("P2 needs 12 values, found {}", v.len()) });
        }
        let mut p = [[0.0; 4]; 3];
        for (k, x) in v.into_iter().enumerate() {
            p[k / 4][k % 4] = x;
        }
        return CameraIntrinsics::new(p);
    }
    Err(DataError::MissingP2)
}

pub fn format_kitti_calib(cam: &CameraIntrinsics) -> String {
    let row: Vec<String> = cam.p.iter().flatten().map(|v| format!("{v:.6}")).collect();
    format!("P2: {}\n", row.join(" "))
}

/// Writes `image_2/`, `label_2/` and `calib/` entries for one scene.
pub fn write_scene(dir: &Path, scene: &SceneSample) -> Result<(), DataError> {
    for sub in ["image_2", "label_2", "calib"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let img = RgbImage { height: scene.height(), width: scene.width(), planes: scene.image.values().to_vec() };
    imageio::write_ppm(&dir.join("image_2").join(format!("{}.ppm", scene.id)), &img)?;
    let labels: Vec<KittiObject> = scene.objects.iter().map(|o| KittiObject::from_ground_truth(o, None)).collect();
    write_kitti_file(&dir.join("label_2").join(format!("{}.txt", scene.id)), &labels)?;
    let calib = dir.join("calib").join(format!("{}.txt", scene.id));
    fs::write(&calib, format_kitti_calib(&scene.camera)).map_err(io_err(&calib))
}

/// Sorted ids of the labels in a dataset directory.
pub fn dataset_ids(dir: &Path) -> Result<Vec<String>, DataError> {
    let labels = dir.join("label_2");
    let mut ids: Vec<String> = fs::read_dir(&labels)
        .map_err(io_err(&labels))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".txt").map(str::to_string))
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn read_scene(dir: &Path, id: &str) -> Result<SceneSample, DataError> {
    let img = imageio::read_ppm(&dir.join("image_2").join(format!("{id}.ppm")))?;
    if img.height % 32 != 0 || img.width % 32 != 0 {
        return Err(DataError::ImageSize(id.to_string()));
    }
    let calib_path = dir.join("calib").join(format!("{id}.txt"));
    let camera = parse_kitti_calib(&fs::read_to_string(&calib_path).map_err(io_err(&calib_path))?)?;
    let labels = read_kitti_file(&dir.join("label_2").join(format!("{id}.txt")))?;
    let objects = labels.iter().filter_map(|l| l.to_ground_truth(&camera, img.width, img.height)).collect();
    Ok(SceneSample {
        id: id.to_string(),
        image: Tensor::new(&[3, img.height, img.width], img.planes).expect("decoded extents"),
        camera,
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec::from_config(&Config::default())
    }

    #[test]
    fn projection_examples() {
        let cam = CameraIntrinsics::centered(100.0, 100, 100);
        assert_eq!(cam.project([0.0, 0.0, 7.0]).unwrap(), (50.0, 50.0, 7.0));
        assert_eq!(cam.project([1.0, 0.0, 10.0]).unwrap(), (60.0, 50.0, 10.0));
        let (u, v, _) = cam.project([1.3, -0.4, 9.0]).unwrap();
        let (u2, v2, _) = cam.project([2.6, -0.8, 18.0]).unwrap();
        assert!((u - u2).abs() < 1e-12 && (v - v2).abs() < 1e-12);
        assert!(matches!(cam.project([0.0, 0.0, 0.0]), Err(DataError::BehindCamera(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_scene(17, &spec()), generate_scene(17, &spec()));
    }

    #[test]
    fn empty_scene_is_blank() {
        let s = SceneSpec { min_objects: 0, max_objects: 0, ..spec() };
        let scene = generate_scene(3, &s);
        assert!(scene.objects.is_empty());
        let n = 96 * 320;
        for c in 0..3 {
            assert!(scene.image.values()[c * n..(c + 1) * n].iter().all(|&v| v == BACKGROUND[c]));
        }
    }

    #[test]
    fn generator_postconditions() {
        let s = spec();
        let cam = CameraIntrinsics::centered(s.focal, s.image_width, s.image_height);
        for seed in 0..1000 {
            let scene = generate_scene(seed, &s);
            for o in &scene.objects {
                assert!(o.depth >= 1.0 && o.depth <= 79.0);
                let b = o.box2d;
                assert!((b[2] - b[0]) * (b[3] - b[1]) >= 16.0);
                let (u, v, _) = cam.project([o.location[0], o.location[1] - o.dims[0] / 2.0, o.location[2]]).unwrap();
                assert!(u >= b[0] && u <= b[2] && v >= b[1] && v <= b[3], "seed {seed}");
            }
        }
    }

    #[test]
    fn nearest_object_owns_overlap_pixels() {
        let s = SceneSpec { min_objects: 4, max_objects: 4, ..spec() };
        let (h, w) = (s.image_height, s.image_width);
        let mut checked = 0;
        for seed in 0..200 {
            let scene = generate_scene(seed, &s);
            let cam = scene.camera;
            let hulls: Vec<Vec<[f64; 2]>> = scene
                .objects
                .iter()
                .map(|o| {
                    convex_hull(box_corners(o.location, o.dims, o.heading).iter().map(|&c| {
                        let (u, v, _) = cam.project(c).unwrap();
                        [u, v]
                    }))
                })
                .collect();
            for i in 0..h {
                for j in 0..w {
                    let p = [j as f64 + 0.5, i as f64 + 0.5];
                    let covering: Vec<usize> = (0..hulls.len()).filter(|&k| inside(&hulls[k], p)).collect();
                    if covering.len() < 2 {
                        continue;
                    }
                    let near = *covering.iter().min_by(|&&a, &&b| scene.objects[a].depth.total_cmp(&scene.objects[b].depth)).unwrap();
                    let color = class_color(scene.objects[near].class_id);
                    for c in 0..3 {
                        assert_eq!(scene.image.values()[c * h * w + i * w + j], color[c]);
                    }
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn flip_is_an_involution_and_consistent() {
        let scene = generate_scene(5, &spec());
        let f = flip_horizontal(&scene);
        let back = flip_horizontal(&f);
        assert_eq!(back.image, scene.image);
        for (a, b) in back.objects.iter().zip(&scene.objects) {
            assert!((a.heading - b.heading).abs() < 1e-12 || (a.heading - b.heading).abs() > 2.0 * PI - 1e-9);
            assert!((a.box2d[0] - b.box2d[0]).abs() < 1e-9);
        }
        for o in &f.objects {
            let c = projected_center(&f.camera, o.location, o.dims[0], 320, 96).unwrap();
            assert!((c[0] - o.center3d_norm[0]).abs() < 1e-12);
            let b = projected_box(&f.camera, &box_corners(o.location, o.dims, o.heading), 320, 96).unwrap();
            for k in 0..4 {
                assert!((b[k] - o.box2d[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn parses_kitti_label() {
        let o = parse_kitti_line("Car 0.0 0 -1.57 100 120 200 220 1.5 1.6 3.9 2.0 1.5 15.0 -1.2", 1).unwrap();
        assert_eq!(o.class_id, Some(0));
        assert_eq!(o.location[2], 15.0);
        assert_eq!(o.dims, [1.5, 1.6, 3.9]);
        assert_eq!(o.score, None);
        let d = parse_kitti_line("DontCare -1 -1 -10 1 2 3 4 -1 -1 -1 -1000 -1000 -1000 -10", 2).unwrap();
        assert!(d.is_ignored());
        let err = parse_kitti_labels("Car 0 0 0 1 2 3 4 5 6\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 1, .. }));
    }

    #[test]
    fn result_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.txt");
        write_kitti_file(&path, &[]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        let scene = generate_scene(9, &spec());
        let objs: Vec<KittiObject> =
            scene.objects.iter().enumerate().map(|(i, o)| KittiObject::from_ground_truth(o, Some(0.1 * i as f64 + 0.3))).collect();
        write_kitti_file(&path, &objs).unwrap();
        let back = read_kitti_file(&path).unwrap();
        assert_eq!(back.len(), objs.len());
        for (a, b) in back.iter().zip(&objs) {
            let fa = [a.alpha, a.heading, a.score.unwrap()].into_iter().chain(a.box2d).chain(a.dims).chain(a.location);
            let fb = [b.alpha, b.heading, b.score.unwrap()].into_iter().chain(b.box2d).chain(b.dims).chain(b.location);
            for (x, y) in fa.zip(fb) {
                assert!((x - y).abs() <= 1e-6);
            }
            assert!((0.0..=1.0).contains(&a.score.unwrap()));
        }
    }

    #[test]
    fn calib_round_trip() {
        let cam = CameraIntrinsics::centered(180.0, 320, 96);
        assert_eq!(parse_kitti_calib(&format_kitti_calib(&cam)).unwrap(), cam);
        assert!(matches!(parse_kitti_calib("P0: 1 2"), Err(DataError::MissingP2)));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(21, &spec());
        write_scene(dir.path(), &scene).unwrap();
        assert_eq!(dataset_ids(dir.path()).unwrap(), vec![scene.id.clone()]);
        let back = read_scene(dir.path(), &scene.id).unwrap();
        assert_eq!(back.objects.len(), scene.objects.len());
        for (a, b) in back.image.values().iter().zip(scene.image.values()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        for (a, b) in back.objects.iter().zip(&scene.objects) {
            assert!((a.depth - b.depth).abs() < 1e-6);
            assert!((a.center3d_norm[0] - b.center3d_norm[0]).abs() < 1e-6);
        }
    }
}
