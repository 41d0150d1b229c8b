//! Synthetic LiDAR sequences, search-region cropping, augmentation and file formats.
//!
//! Box convention: `l` extends along the heading (local x), `w` along local y,
//! `h` vertically. `theta` is the heading in the world xy-plane.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::DataError;

/// Frames between re-draws of speed and yaw rate.
pub const MOTION_SEGMENT: usize = 5;
/// Width of the edge/corner band as a fraction of each face extent.
pub const EDGE_BAND: f64 = 0.05;
/// Default isotropic sensor noise in meters.
pub const SENSOR_NOISE: f64 = 0.02;
/// Background points per square meter.
pub const DEFAULT_CLUTTER_DENSITY: f64 = 0.5;
/// Points within this distance of a box count as object points during augmentation.
pub const OBJECT_MARGIN: f64 = 0.1;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjectClass {
    Car,
    Pedestrian,
}

impl ObjectClass {
    /// Per-axis crop limits in the box frame, meters.
    pub fn extended_range(self) -> [(f64, f64); 3] {
        match self {
            ObjectClass::Car => [(-4.8, 4.8), (-4.8, 4.8), (-1.5, 1.5)],
            ObjectClass::Pedestrian => [(-1.92, 1.92), (-1.92, 1.92), (-1.5, 1.5)],
        }
    }

    /// Nominal `(w, h, l)`.
    pub fn nominal_size(self) -> (f64, f64, f64) {
        match self {
            ObjectClass::Car => (1.8, 1.6, 4.2),
            ObjectClass::Pedestrian => (0.7, 1.75, 0.8),
        }
    }

    /// Maximum center displacement per frame.
    pub fn v_max(self) -> f64 {
        match self {
            ObjectClass::Car => 1.5,
            ObjectClass::Pedestrian => 0.3,
        }
    }

    /// Maximum heading change per frame.
    pub fn yaw_rate_max(self) -> f64 {
        match self {
            ObjectClass::Car => 0.05,
            ObjectClass::Pedestrian => 0.15,
        }
    }

    pub fn default_object_points(self) -> usize {
        match self {
            ObjectClass::Car => 320,
            ObjectClass::Pedestrian => 120,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Pedestrian => "pedestrian",
        }
    }
}

impl FromStr for ObjectClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "car" => Ok(ObjectClass::Car),
            "pedestrian" | "human" => Ok(ObjectClass::Pedestrian),
            other => Err(format!("unknown class `{other}` (expected car or pedestrian)")),
        }
    }
}

/// Oriented 3D box `(x, y, z, w, h, l, θ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub h: f64,
    pub l: f64,
    pub theta: f64,
}

impl Box3D {
    /// Validates sizes and wraps `theta` into `(-π, π]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(x: f64, y: f64, z: f64, w: f64, h: f64, l: f64, theta: f64) -> Result<Self, DataError> {
        let all = [x, y, z, w, h, l, theta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("non-finite box parameter in {all:?}")));
        }
        if w <= 0.0 || h <= 0.0 || l <= 0.0 {
            return Err(DataError::Invalid(format!("box sizes must be positive, got w={w} h={h} l={l}")));
        }
        Ok(Self {
            x,
            y,
            z,
            w,
            h,
            l,
            theta: wrap_angle(theta),
        })
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn volume(&self) -> f64 {
        self.w * self.h * self.l
    }

    /// World point to box frame.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.z]
    }

    /// Box frame point to world.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1], self.z + p[2]]
    }

    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= self.l / 2.0 + margin && q[1].abs() <= self.w / 2.0 + margin && q[2].abs() <= self.h / 2.0 + margin
    }

    /// Unsigned distance from `p` to the box surface.
    pub fn distance_to_surface(&self, p: [f64; 3]) -> f64 {
        let q = self.to_local(p);
        let half = [self.l / 2.0, self.w / 2.0, self.h / 2.0];
        let d: Vec<f64> = (0..3).map(|i| q[i].abs() - half[i]).collect();
        let outside = d.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
        let inside = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(0.0);
        outside + inside.abs()
    }

    /// Footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[a, b]| {
            let p = self.to_world([a, b, 0.0]);
            [p[0], p[1]]
        })
    }

    /// This box expressed in `reference`'s frame.
    pub fn relative_to(&self, reference: &Box3D) -> Box3D {
        let c = reference.to_local(self.center());
        Box3D {
            x: c[0],
            y: c[1],
            z: c[2],
            theta: wrap_angle(self.theta - reference.theta),
            ..*self
        }
    }

    /// Inverse of [`Box3D::relative_to`].
    pub fn from_relative(local: &Box3D, reference: &Box3D) -> Box3D {
        let c = reference.to_world(local.center());
        Box3D {
            x: c[0],
            y: c[1],
            z: c[2],
            theta: wrap_angle(local.theta + reference.theta),
            ..*local
        }
    }
}

/// Unordered 3D points with optional per-point intensity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            intensity: None,
        }
    }

    pub fn with_intensity(points: Vec<[f64; 3]>, intensity: Vec<f64>) -> Self {
        assert_eq!(points.len(), intensity.len());
        Self {
            points,
            intensity: Some(intensity),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn intensity_at(&self, i: usize) -> f64 {
        self.intensity.as_ref().map_or(0.0, |v| v[i])
    }

    /// Keeps points passing `keep`, mapping survivors through `map`.
    fn filter_map(&self, mut f: impl FnMut([f64; 3]) -> Option<[f64; 3]>) -> PointCloud {
        let mut points = Vec::new();
        let mut intensity = self.intensity.as_ref().map(|_| Vec::new());
        for (i, p) in self.points.iter().enumerate() {
            if let Some(q) = f(*p) {
                points.push(q);
                if let Some(v) = intensity.as_mut() {
                    v.push(self.intensity_at(i));
                }
            }
        }
        PointCloud { points, intensity }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMeta {
    pub seed: u64,
    pub class: ObjectClass,
    /// Frames in which no object point was produced.
    pub empty_object_frames: Vec<usize>,
    /// Object points per frame (they precede clutter points in each frame).
    pub object_points: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<PointCloud>,
    pub gt_boxes: Vec<Box3D>,
    pub meta: SequenceMeta,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Generator knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub seed: u64,
    pub n_frames: usize,
    pub class: ObjectClass,
    /// Background points per square meter of ground.
    pub clutter_density: f64,
    /// Fraction of object points drawn from face interiors rather than the edge band.
    pub surface_bias: f64,
    pub object_points: usize,
    pub noise_sigma: f64,
    pub v_max: f64,
    pub yaw_rate_max: f64,
    /// Per-frame probability that an object point is not observed.
    pub point_dropout: f64,
}

impl SceneParams {
    pub fn new(seed: u64, n_frames: usize, class: ObjectClass) -> Self {
        Self {
            seed,
            n_frames,
            class,
            clutter_density: DEFAULT_CLUTTER_DENSITY,
            surface_bias: 1.0,
            object_points: class.default_object_points(),
            noise_sigma: SENSOR_NOISE,
            v_max: class.v_max(),
            yaw_rate_max: class.yaw_rate_max(),
            point_dropout: 0.0,
        }
    }
}

/// Samples `n` points on the surface of an axis-aligned `l×w×h` box centered at the origin.
pub fn sample_box_surface<R: Rng + ?Sized>(n: usize, w: f64, h: f64, l: f64, surface_bias: f64, rng: &mut R) -> Vec<[f64; 3]> {
    // (normal axis, sign, in-plane axes); face area ∝ product of in-plane extents.
    let ext = [l, w, h];
    let faces: Vec<(usize, f64, usize, usize)> = [0usize, 1, 2]
        .iter()
        .flat_map(|&ax| {
            let (a, b) = match ax {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            [(ax, 1.0, a, b), (ax, -1.0, a, b)]
        })
        .collect();
    let areas: Vec<f64> = faces.iter().map(|f| ext[f.2] * ext[f.3]).collect();
    let total: f64 = areas.iter().sum();

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let interior = rng.random::<f64>() < surface_bias;
        let mut pick = rng.random::<f64>() * total;
        let mut fi = faces.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                fi = i;
                break;
            }
            pick -= a;
        }
        let (ax, sign, ua, va) = faces[fi];
        let (eu, ev) = (ext[ua], ext[va]);
        let (u, v) = loop {
            let u = rng.random::<f64>();
            let v = rng.random::<f64>();
            let in_core = (EDGE_BAND..=1.0 - EDGE_BAND).contains(&u) && (EDGE_BAND..=1.0 - EDGE_BAND).contains(&v);
            if interior {
                // Uniform on the inner rectangle directly.
                let u = EDGE_BAND + u * (1.0 - 2.0 * EDGE_BAND);
                let v = EDGE_BAND + v * (1.0 - 2.0 * EDGE_BAND);
                break (u, v);
            } else if !in_core {
                break (u, v);
            }
        };
        let mut p = [0.0; 3];
        p[ax] = sign * ext[ax] / 2.0;
        p[ua] = (u - 0.5) * eu;
        p[va] = (v - 0.5) * ev;
        out.push(p);
    }
    out
}

/// Rigid object on a piecewise-constant speed/yaw-rate trajectory, embedded in uniform clutter.
pub fn generate_sequence(params: &SceneParams) -> Result<Sequence, DataError> {
    if params.n_frames < 2 {
        return Err(DataError::Invalid(format!("need at least 2 frames, got {}", params.n_frames)));
    }
    if !(0.0..=1.0).contains(&params.surface_bias) {
        return Err(DataError::Invalid(format!("surface_bias {} outside [0, 1]", params.surface_bias)));
    }
    if params.clutter_density < 0.0 || params.v_max < 0.0 || params.noise_sigma < 0.0 {
        return Err(DataError::Invalid("clutter density, v_max and noise must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (w0, h0, l0) = params.class.nominal_size();
    let w = w0 * rng.random_range(0.9..1.1);
    let h = h0 * rng.random_range(0.9..1.1);
    let l = l0 * rng.random_range(0.9..1.1);
    let local = sample_box_surface(params.object_points, w, h, l, params.surface_bias, &mut rng);

    let mut x = rng.random_range(-5.0..5.0);
    let mut y = rng.random_range(-5.0..5.0);
    let mut theta = rng.random_range(-PI..PI);
    let (mut speed, mut yaw_rate) = (0.0, 0.0);
    let mut boxes = Vec::with_capacity(params.n_frames);
    for t in 0..params.n_frames {
        if t % MOTION_SEGMENT == 0 && params.v_max > 0.0 {
            speed = rng.random_range(0.0..=params.v_max);
            yaw_rate = if params.yaw_rate_max > 0.0 {
                rng.random_range(-params.yaw_rate_max..=params.yaw_rate_max)
            } else {
                0.0
            };
        }
        if t > 0 {
            theta = wrap_angle(theta + yaw_rate);
            x += speed * theta.cos();
            y += speed * theta.sin();
        }
        boxes.push(Box3D::new(x, y, h / 2.0, w, h, l, theta)?);
    }

    let margin = 10.0;
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for b in &boxes {
        xmin = xmin.min(b.x);
        xmax = xmax.max(b.x);
        ymin = ymin.min(b.y);
        ymax = ymax.max(b.y);
    }
    let (xmin, xmax, ymin, ymax) = (xmin - margin, xmax + margin, ymin - margin, ymax + margin);
    let clutter_count = (params.clutter_density * (xmax - xmin) * (ymax - ymin)).round() as usize;

    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut frames = Vec::with_capacity(params.n_frames);
    let mut empty = Vec::new();
    let mut object_counts = Vec::with_capacity(params.n_frames);
    for (t, b) in boxes.iter().enumerate() {
        let mut points = Vec::with_capacity(local.len() + clutter_count);
        let mut intensity = Vec::with_capacity(local.len() + clutter_count);
        for p in &local {
            if params.point_dropout > 0.0 && rng.random::<f64>() < params.point_dropout {
                continue;
            }
            let mut q = b.to_world(*p);
            if params.noise_sigma > 0.0 {
                for v in q.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            points.push(q);
            intensity.push(rng.random::<f64>());
        }
        object_counts.push(points.len());
        if points.is_empty() {
            empty.push(t);
        }
        for _ in 0..clutter_count {
            points.push([
                rng.random_range(xmin..xmax),
                rng.random_range(ymin..ymax),
                rng.random_range(-0.5..2.5),
            ]);
            intensity.push(rng.random::<f64>());
        }
        frames.push(PointCloud::with_intensity(points, intensity));
    }
    Ok(Sequence {
        frames,
        gt_boxes: boxes,
        meta: SequenceMeta {
            seed: params.seed,
            class: params.class,
            empty_object_frames: empty,
            object_points: object_counts,
        },
    })
}

/// Whether a box-frame point survives the 2× crop and the class range clip.
pub fn in_search_region(local: [f64; 3], prev_box: &Box3D, class: ObjectClass) -> bool {
    let range = class.extended_range();
    local[0].abs() <= prev_box.l
        && local[1].abs() <= prev_box.w
        && local[2].abs() <= prev_box.h
        && (0..3).all(|i| local[i] >= range[i].0 && local[i] <= range[i].1)
}

/// Points inside twice the extents of `prev_box`, in `prev_box`'s frame, clipped to the class range.
pub fn crop_search_region(frame: &PointCloud, prev_box: &Box3D, class: ObjectClass) -> PointCloud {
    frame.filter_map(|p| {
        let q = prev_box.to_local(p);
        in_search_region(q, prev_box, class).then_some(q)
    })
}

/// Random draw for [`augment_frame`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Yaw perturbation in radians.
    pub delta: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { flip: false, delta: 0.0 };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let max = 5f64.to_radians();
        Self {
            flip: rng.random_bool(0.5),
            delta: rng.random_range(-max..=max),
        }
    }
}

/// Rotates the object (points within the box) about its center by `draw.delta`,
/// then optionally mirrors the whole frame across the x–z plane.
pub fn augment_frame(points: &PointCloud, bx: &Box3D, draw: &AugmentDraw) -> (PointCloud, Box3D) {
    let (s, c) = draw.delta.sin_cos();
    let rotate = draw.delta != 0.0;
    let mut out = points.filter_map(|p| {
        if rotate && bx.contains(p, OBJECT_MARGIN) {
            let (dx, dy) = (p[0] - bx.x, p[1] - bx.y);
            Some([bx.x + c * dx - s * dy, bx.y + s * dx + c * dy, p[2]])
        } else {
            Some(p)
        }
    });
    let mut b = *bx;
    b.theta = wrap_angle(b.theta + draw.delta);
    if draw.flip {
        for p in out.points.iter_mut() {
            p[1] = -p[1];
        }
        b.y = -b.y;
        b.theta = wrap_angle(-b.theta);
    }
    (out, b)
}

pub fn augment_frame_seeded(points: &PointCloud, bx: &Box3D, seed: u64) -> (PointCloud, Box3D) {
    let draw = AugmentDraw::sample(&mut ChaCha8Rng::seed_from_u64(seed));
    augment_frame(points, bx, &draw)
}

/// Writes little-endian f32 `(x, y, z, intensity)` records.
pub fn write_bin(path: &Path, cloud: &PointCloud) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points.iter().enumerate() {
        for v in [p[0], p[1], p[2], cloud.intensity_at(i)] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| DataError::io(path, e))
}

pub fn read_bin(path: &Path) -> Result<PointCloud, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(DataError::format(path, format!("length {} is not a multiple of 16", bytes.len())));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
        let p = [f(0), f(1), f(2)];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(DataError::format(path, "non-finite coordinate"));
        }
        points.push(p);
        intensity.push(f(3));
    }
    Ok(PointCloud::with_intensity(points, intensity))
}

/// Header line plus one `frame_idx,x,y,z,w,h,l,theta` line per box.
pub fn format_boxes_csv(boxes: &[(usize, Box3D)]) -> String {
    let mut s = String::from(BOXES_CSV_HEADER);
    s.push('\n');
    for (i, b) in boxes {
        s.push_str(&format!("{i},{},{},{},{},{},{},{}\n", b.x, b.y, b.z, b.w, b.h, b.l, b.theta));
    }
    s
}

pub const BOXES_CSV_HEADER: &str = "frame_idx,x,y,z,w,h,l,theta";

pub fn write_boxes_csv(path: &Path, boxes: &[(usize, Box3D)]) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(format_boxes_csv(boxes).as_bytes()).map_err(|e| DataError::io(path, e))
}

pub fn read_boxes_csv(path: &Path) -> Result<Vec<(usize, Box3D)>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (ln == 0 && line == BOXES_CSV_HEADER) {
            continue;
        }
        let perr = |msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line: ln + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(perr(format!("expected 8 fields, got {}", fields.len())));
        }
        let idx: usize = fields[0].trim().parse().map_err(|e| perr(format!("frame index: {e}")))?;
        let mut v = [0.0; 7];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f.trim().parse().map_err(|e| perr(format!("field {}: {e}", k + 2)))?;
        }
        let b = Box3D::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6]).map_err(|e| perr(e.to_string()))?;
        out.push((idx, b));
    }
    Ok(out)
}

/// Writes `NNNNNN.bin` per frame plus `gt.csv` into `dir`.
pub fn write_sequence_dir(dir: &Path, seq: &Sequence) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        write_bin(&dir.join(format!("{i:06}.bin")), frame)?;
    }
    let boxes: Vec<(usize, Box3D)> = seq.gt_boxes.iter().copied().enumerate().collect();
    write_boxes_csv(&dir.join("gt.csv"), &boxes)
}

/// Reads a directory written by [`write_sequence_dir`].
pub fn read_sequence_dir(dir: &Path, class: ObjectClass) -> Result<Sequence, DataError> {
    let boxes = read_boxes_csv(&dir.join("gt.csv"))?;
    if boxes.len() < 2 {
        return Err(DataError::format(dir.join("gt.csv"), "a sequence needs at least 2 frames"));
    }
    let mut frames = Vec::with_capacity(boxes.len());
    let mut gt = Vec::with_capacity(boxes.len());
    for (expected, (idx, b)) in boxes.into_iter().enumerate() {
        if idx != expected {
            return Err(DataError::format(dir.join("gt.csv"), format!("frame {idx} out of order")));
        }
        frames.push(read_bin(&dir.join(format!("{idx:06}.bin")))?);
        gt.push(b);
    }
    let n = frames.len();
    Ok(Sequence {
        frames,
        gt_boxes: gt,
        meta: SequenceMeta {
            seed: 0,
            class,
            empty_object_frames: Vec::new(),
            object_points: vec![0; n],
        },
    })
}

/// Sequence directories (`seq_*`) under `root`, sorted by name.
pub fn list_sequence_dirs(root: &Path) -> Result<Vec<std::path::PathBuf>, DataError> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| DataError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("gt.csv").exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}
