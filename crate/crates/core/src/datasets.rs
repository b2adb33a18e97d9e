//! Paired satellite/panorama data: the CVUSA directory layout, a procedural
//! scene generator with exact cross-view correspondence, and caption sourcing.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, ResizeMode, ValueRange};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Class {
    Ground,
    Road,
    Building,
    Tree,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Ground, Class::Road, Class::Building, Class::Tree];

    pub fn color(self) -> [u8; 3] {
        match self {
            Class::Ground => [210, 180, 140],
            Class::Road => [128, 128, 128],
            Class::Building => [150, 75, 60],
            Class::Tree => [40, 130, 50],
        }
    }

    /// Raised classes occlude the view; road and ground lie flat.
    pub fn is_raised(self) -> bool {
        matches!(self, Class::Building | Class::Tree)
    }
}

const SKY_TOP: [u8; 3] = [100, 150, 230];
const SKY_HORIZON: [u8; 3] = [190, 215, 245];
/// Camera height above the ground plane, in grid cells.
pub const CAMERA_HEIGHT: f64 = 2.0;
/// Default scene grid side in cells.
pub const SCENE_SIZE: usize = 64;
const MARCH_STEP: f64 = 0.25;

/// Top-down class map, row 0 is north and column 0 is west.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub grid: Vec<Class>,
    pub seed: u64,
    pub road_count: usize,
    pub building_count: usize,
    pub tree_count: usize,
    pub bent_roads: usize,
}

impl SceneSpec {
    pub fn uniform(class: Class, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            grid: vec![class; height * width],
            seed: 0,
            road_count: 0,
            building_count: 0,
            tree_count: 0,
            bent_roads: 0,
        }
    }

    pub fn at(&self, r: usize, c: usize) -> Class {
        self.grid[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, class: Class) {
        self.grid[r * self.width + c] = class;
    }

    pub fn count(&self, class: Class) -> usize {
        self.grid.iter().filter(|&&c| c == class).count()
    }

    /// Rotation by 90 degrees counter-clockwise seen from above: east moves to north.
    pub fn rotate90_ccw(&self) -> SceneSpec {
        let (h, w) = (self.height, self.width);
        let mut grid = vec![Class::Ground; h * w];
        for r in 0..h {
            for c in 0..w {
                grid[(w - 1 - c) * h + r] = self.at(r, c);
            }
        }
        SceneSpec { height: w, width: h, grid, ..self.clone() }
    }

    /// Short description derived from the scene contents.
    pub fn caption(&self) -> String {
        let roads = match self.road_count {
            1 => "one road",
            2 => "two roads",
            _ => "three roads",
        };
        let buildings = match self.building_count {
            0 => "no buildings",
            1..=3 => "a few buildings",
            _ => "many buildings",
        };
        let tree_frac = self.tree_count as f64 / self.grid.len() as f64;
        let trees = if self.tree_count == 0 {
            "no trees"
        } else if tree_frac < 0.02 {
            "sparse trees"
        } else {
            "dense trees"
        };
        let turn = if self.bent_roads > 0 { " with a turn" } else { "" };
        format!("street view of {roads}{turn}, {buildings} and {trees}")
    }
}

/// Fills rows `r0..r1`, columns `c0..c1` (clipped) with road.
fn paint_road(scene: &mut SceneSpec, r0: i64, r1: i64, c0: i64, c1: i64) {
    let (h, w) = (scene.height as i64, scene.width as i64);
    for r in r0.max(0)..r1.min(h) {
        for c in c0.max(0)..c1.min(w) {
            scene.set(r as usize, c as usize, Class::Road);
        }
    }
}

pub fn generate_scene(seed: u64, height: usize, width: usize) -> Result<SceneSpec> {
    if height < 16 || width < 16 {
        return Err(Error::InvalidArgument(format!("scene must be at least 16x16, got {height}x{width}")));
    }
    let mut rng = RngStream::new(seed, "scene");
    let mut scene = SceneSpec::uniform(Class::Ground, height, width);
    scene.seed = seed;
    let (h, w) = (height as i64, width as i64);
    let (cr, cc) = (h / 2, w / 2);

    let roads = rng.int_inclusive(1, 3) as usize;
    for _ in 0..roads {
        let horizontal = rng.below(2) == 0;
        let bent = rng.below(3) == 0;
        let width_cells = rng.int_inclusive(2, 3);
        let (span, centre) = if horizontal { (h, cr) } else { (w, cc) };
        let spread = (span / 8).max(1);
        let pos = rng.int_inclusive(centre - spread, centre + spread - width_cells);
        if !bent {
            if horizontal {
                paint_road(&mut scene, pos, pos + width_cells, 0, w);
            } else {
                paint_road(&mut scene, 0, h, pos, pos + width_cells);
            }
            continue;
        }
        scene.bent_roads += 1;
        let (other_span, other_centre) = if horizontal { (w, cc) } else { (h, cr) };
        let other_spread = (other_span / 8).max(1);
        let turn = rng.int_inclusive(other_centre - other_spread, other_centre + other_spread - width_cells);
        let from_low = rng.below(2) == 0;
        let to_low = rng.below(2) == 0;
        let (a0, a1) = if from_low { (0, turn + width_cells) } else { (turn, other_span) };
        let (b0, b1) = if to_low { (0, pos + width_cells) } else { (pos, span) };
        if horizontal {
            paint_road(&mut scene, pos, pos + width_cells, a0, a1);
            paint_road(&mut scene, b0, b1, turn, turn + width_cells);
        } else {
            paint_road(&mut scene, a0, a1, pos, pos + width_cells);
            paint_road(&mut scene, turn, turn + width_cells, b0, b1);
        }
    }
    scene.road_count = roads;

    // Buildings keep clear of a small square around the camera so no view is fully blocked.
    let clear = 3;
    let in_clearance = |r: i64, c: i64| (r - cr).abs() <= clear && (c - cc).abs() <= clear;
    let target = rng.int_inclusive(0, 8) as usize;
    let max_side = (h.min(w) / 8).max(3);
    let mut placed = 0;
    for _ in 0..target {
        for _attempt in 0..30 {
            let bh = rng.int_inclusive(3, max_side);
            let bw = rng.int_inclusive(3, max_side);
            let r0 = rng.int_inclusive(0, h - bh);
            let c0 = rng.int_inclusive(0, w - bw);
            let free = (r0..r0 + bh).all(|r| {
                (c0..c0 + bw).all(|c| scene.at(r as usize, c as usize) == Class::Ground && !in_clearance(r, c))
            });
            if free {
                for r in r0..r0 + bh {
                    for c in c0..c0 + bw {
                        scene.set(r as usize, c as usize, Class::Building);
                    }
                }
                placed += 1;
                break;
            }
        }
    }
    scene.building_count = placed;

    let density = rng.uniform_in(0.0, 0.05);
    let mut trees = 0;
    for r in 0..h {
        for c in 0..w {
            let ground = scene.at(r as usize, c as usize) == Class::Ground;
            if rng.uniform() < density && ground && !in_clearance(r, c) {
                scene.set(r as usize, c as usize, Class::Tree);
                trees += 1;
            }
        }
    }
    scene.tree_count = trees;
    Ok(scene)
}

fn rgb_image(height: usize, width: usize, pixel: impl Fn(usize, usize) -> [u8; 3]) -> Result<ImageTensor> {
    let plane = height * width;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..height {
        for x in 0..width {
            let p = pixel(y, x);
            for ch in 0..3 {
                data[ch * plane + y * width + x] = p[ch] as f32 / 255.0;
            }
        }
    }
    ImageTensor::new(3, height, width, data, ValueRange::Unit)
}

/// Palette raster at native grid size, nearest-resized to `(height, width)`.
pub fn render_satellite(scene: &SceneSpec, height: usize, width: usize) -> Result<ImageTensor> {
    let native = rgb_image(scene.height, scene.width, |y, x| scene.at(y, x).color())?;
    native.resize(height, width, ResizeMode::Nearest)
}

/// Inverse palette lookup by nearest color; exact on native-size renders.
pub fn classify_pixel(rgb: [f32; 3]) -> Class {
    let dist = |c: Class| {
        let p = c.color();
        (0..3).map(|i| (rgb[i] * 255.0 - p[i] as f32).powi(2)).sum::<f32>()
    };
    Class::ALL.into_iter().min_by(|a, b| dist(*a).total_cmp(&dist(*b))).unwrap()
}

/// Cell lookup along a viewing ray.
///
/// Rays for column `j = q * W/4 + r` are marched in the first quadrant at angle
/// `2 pi r / W` and the touched cell offsets are turned by `q` quarter turns with
/// integer arithmetic, so rotating the scene shifts the panorama exactly.
struct Ray {
    cos: f64,
    sin: f64,
    quarter_turns: usize,
}

impl Ray {
    fn for_column(j: usize, pano_width: usize) -> Self {
        let quarter = pano_width / 4;
        let r = j % quarter;
        let phi = 2.0 * std::f64::consts::PI * r as f64 / pano_width as f64;
        Ray { cos: phi.cos(), sin: phi.sin(), quarter_turns: j / quarter }
    }

    /// Offset `(dc, dr)` from the grid center of the cell at distance `t`.
    fn offset(&self, t: f64) -> (i64, i64) {
        let (mut a, mut b) = ((t * self.cos).floor() as i64, (-t * self.sin).floor() as i64);
        for _ in 0..self.quarter_turns {
            (a, b) = (b, -a - 1);
        }
        (a, b)
    }

    fn cell(&self, scene: &SceneSpec, t: f64) -> Option<Class> {
        let (a, b) = self.offset(t);
        let c = (scene.width / 2) as i64 + a;
        let r = (scene.height / 2) as i64 + b;
        if r < 0 || c < 0 || r >= scene.height as i64 || c >= scene.width as i64 {
            None
        } else {
            Some(scene.at(r as usize, c as usize))
        }
    }

    /// First raised cell and its distance.
    fn first_hit(&self, scene: &SceneSpec) -> Option<(Class, f64)> {
        let mut k = 1u32;
        loop {
            let t = k as f64 * MARCH_STEP;
            match self.cell(scene, t) {
                None => return None,
                Some(c) if c.is_raised() => return Some((c, t)),
                Some(_) => k += 1,
            }
        }
    }
}

/// Vertical extent in rows of an occluder at distance `d`.
pub fn occluder_extent(height: usize, d: f64) -> usize {
    let ext = (2.0 * height as f64 / d).round();
    ext.clamp(1.0, (height / 2).max(1) as f64) as usize
}

fn lerp_color(a: [u8; 3], b: [u8; 3], s: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] as f64 + s * (b[i] as f64 - a[i] as f64))
}

/// Equirectangular view from the grid center: column `j` looks at azimuth
/// `2 pi j / width` (0 east, counter-clockwise), horizon at `height / 2`.
pub fn render_panorama(scene: &SceneSpec, height: usize, width: usize) -> Result<ImageTensor> {
    if width != 4 * height || height < 2 {
        return Err(Error::InvalidArgument(format!("panorama must be h x 4h, got {height}x{width}")));
    }
    let horizon = height / 2;
    let rad_per_row = std::f64::consts::PI / (2.0 * height as f64);
    let plane = height * width;
    let mut data = vec![0.0f32; 3 * plane];
    let mut put = |y: usize, x: usize, rgb: [f64; 3]| {
        for ch in 0..3 {
            data[ch * plane + y * width + x] = (rgb[ch] / 255.0) as f32;
        }
    };
    let as_f = |c: [u8; 3]| c.map(|v| v as f64);
    for j in 0..width {
        let ray = Ray::for_column(j, width);
        let hit = ray.first_hit(scene);
        let block = hit.map(|(_, d)| {
            let ext = occluder_extent(height, d);
            let top = horizon - ext / 2;
            (top, top + ext)
        });
        for y in 0..height {
            if let (Some((class, _)), Some((top, bottom))) = (hit, block) {
                if y >= top && y < bottom {
                    put(y, j, as_f(class.color()));
                    continue;
                }
            }
            if y < horizon {
                let s = (y as f64 + 0.5) / horizon as f64;
                put(y, j, lerp_color(SKY_TOP, SKY_HORIZON, s));
                continue;
            }
            let alpha = (y as f64 + 0.5 - horizon as f64) * rad_per_row;
            let dist = CAMERA_HEIGHT / alpha.tan();
            let rgb = match hit {
                Some((class, d)) if dist >= d => class.color(),
                _ => ray.cell(scene, dist).unwrap_or(Class::Ground).color(),
            };
            put(y, j, as_f(rgb));
        }
    }
    ImageTensor::new(3, height, width, data, ValueRange::Unit)
}

// ---- captions and prompts ----

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bag-of-tokens histogram over `dim` hash buckets, normalized to sum 1.
pub fn embed_caption(caption: &str, dim: usize) -> Vec<f32> {
    let mut v = vec![0.0f32; dim];
    if dim == 0 {
        return v;
    }
    let lower = caption.to_lowercase();
    let mut n = 0usize;
    for tok in lower.split_whitespace() {
        v[(fnv1a64(tok.as_bytes()) % dim as u64) as usize] += 1.0;
        n += 1;
    }
    if n > 0 {
        for x in &mut v {
            *x /= n as f32;
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Fixed,
    PerImage,
}

pub const DEFAULT_PROMPT: &str = "street view";

#[derive(Debug, Clone)]
pub struct PromptSource {
    pub mode: PromptMode,
    pub fixed_text: String,
    pub caption_file: Option<PathBuf>,
    captions: HashMap<String, String>,
}

impl PromptSource {
    pub fn fixed(text: impl Into<String>) -> Self {
        Self { mode: PromptMode::Fixed, fixed_text: text.into(), caption_file: None, captions: HashMap::new() }
    }

    /// Reads a tab-separated `id<TAB>caption` file.
    pub fn per_image(caption_file: impl AsRef<Path>) -> Result<Self> {
        let path = caption_file.as_ref().to_path_buf();
        let text = fs::read_to_string(&path).map_err(|_| Error::MissingFile(path.clone()))?;
        let mut captions = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, cap) = line
                .split_once('\t')
                .ok_or_else(|| Error::MalformedRow { row: i + 1, reason: "caption line needs id<TAB>caption".into() })?;
            captions.insert(id.to_string(), cap.to_string());
        }
        Ok(Self { mode: PromptMode::PerImage, fixed_text: DEFAULT_PROMPT.into(), caption_file: Some(path), captions })
    }

    pub fn text_for(&self, id: &str) -> Result<&str> {
        match self.mode {
            PromptMode::Fixed => Ok(&self.fixed_text),
            PromptMode::PerImage => self
                .captions
                .get(id)
                .map(String::as_str)
                .ok_or_else(|| Error::InvalidArgument(format!("no caption for sample {id:?}"))),
        }
    }
}

// ---- CVUSA layout ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn csv_path(self, root: &Path) -> PathBuf {
        root.join(format!("{}.csv", self.as_str()))
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub satellite: ImageTensor,
    pub panorama: ImageTensor,
    pub caption: String,
}

/// Target sizes a consumer expects; non-matching aspect ratios are stretched, never cropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResizeContract {
    pub satellite: (usize, usize),
    pub panorama: (usize, usize),
}

impl ResizeContract {
    /// Both images square, as the diffusion branch sees them.
    pub fn diffusion(size: usize) -> Self {
        Self { satellite: (size, size), panorama: (size, size) }
    }

    /// Square satellite and a 1:4 panorama, as the GAN branches see them.
    pub fn gan(satellite_size: usize, pano_height: usize) -> Self {
        Self { satellite: (satellite_size, satellite_size), panorama: (pano_height, 4 * pano_height) }
    }

    pub fn apply(&self, s: &PairedSample) -> Result<PairedSample> {
        Ok(PairedSample {
            id: s.id.clone(),
            satellite: s.satellite.resize(self.satellite.0, self.satellite.1, ResizeMode::Bilinear)?,
            panorama: s.panorama.resize(self.panorama.0, self.panorama.1, ResizeMode::Bilinear)?,
            caption: s.caption.clone(),
        })
    }
}

/// Lazy reader over one split CSV. Rows are numbered from 1, excluding the header.
pub struct CvusaIter {
    root: PathBuf,
    records: csv::StringRecordsIntoIter<fs::File>,
    row: usize,
    header_seen: bool,
    remaining: Option<usize>,
}

pub fn load_cvusa_layout(root: impl AsRef<Path>, split: Split, limit: Option<usize>) -> Result<CvusaIter> {
    let root = root.as_ref().to_path_buf();
    let path = split.csv_path(&root);
    let file = fs::File::open(&path).map_err(|_| Error::MissingCsv(path.clone()))?;
    let records = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file).into_records();
    Ok(CvusaIter { root, records, row: 0, header_seen: false, remaining: limit })
}

impl CvusaIter {
    fn resolve(&self, field: &str) -> Result<PathBuf> {
        let p = self.root.join(field);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingReferencedFile { row: self.row, path: p })
        }
    }

    fn parse(&self, rec: &csv::StringRecord) -> Result<PairedSample> {
        let malformed = |reason: String| Error::MalformedRow { row: self.row, reason };
        if rec.len() < 2 || rec.len() > 3 {
            return Err(malformed(format!("expected 2 or 3 fields, got {}", rec.len())));
        }
        let (sat, pano) = (rec[0].trim(), rec[1].trim());
        if sat.is_empty() || pano.is_empty() {
            return Err(malformed("empty image path".into()));
        }
        let sat_path = self.resolve(sat)?;
        let pano_path = self.resolve(pano)?;
        let caption = match rec.get(2).map(str::trim).filter(|s| !s.is_empty()) {
            Some(c) => {
                let p = self.resolve(c)?;
                fs::read_to_string(&p)?.lines().next().unwrap_or("").trim().to_string()
            }
            None => String::new(),
        };
        let id = sat_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| malformed("satellite path has no file stem".into()))?;
        let satellite = ImageTensor::load_png(&sat_path)?;
        let panorama = ImageTensor::load_png(&pano_path)?;
        if satellite.channels() != 3 || panorama.channels() != 3 {
            return Err(malformed("images must be RGB".into()));
        }
        Ok(PairedSample { id, satellite, panorama, caption })
    }
}

impl Iterator for CvusaIter {
    type Item = Result<PairedSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == Some(0) {
            return None;
        }
        loop {
            let rec = match self.records.next()? {
                Ok(r) => r,
                Err(e) => {
                    self.row += 1;
                    return Some(Err(Error::MalformedRow { row: self.row, reason: e.to_string() }));
                }
            };
            if !self.header_seen {
                self.header_seen = true;
                if rec.get(0).map(str::trim) == Some("sat_path") {
                    continue;
                }
            }
            if rec.iter().all(|f| f.trim().is_empty()) {
                continue;
            }
            self.row += 1;
            if let Some(n) = self.remaining.as_mut() {
                *n -= 1;
            }
            return Some(self.parse(&rec));
        }
    }
}

/// Loads a whole split and applies a resizing contract.
pub fn load_split(root: impl AsRef<Path>, split: Split, limit: Option<usize>, contract: ResizeContract) -> Result<Vec<PairedSample>> {
    load_cvusa_layout(root, split, limit)?.map(|s| s.and_then(|s| contract.apply(&s))).collect()
}

// ---- synthetic writer ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSizes {
    pub scene: usize,
    pub satellite: usize,
    pub pano_height: usize,
}

impl Default for SyntheticSizes {
    fn default() -> Self {
        Self { scene: SCENE_SIZE, satellite: 64, pano_height: 32 }
    }
}

/// Stable per-sample scene seed.
pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(split.as_str().as_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn synthetic_sample(seed: u64, split: Split, index: usize, sizes: SyntheticSizes) -> Result<(PairedSample, SceneSpec)> {
    let scene = generate_scene(scene_seed(seed, split, index), sizes.scene, sizes.scene)?;
    let sample = PairedSample {
        id: format!("{}_{index:05}", split.as_str()),
        satellite: render_satellite(&scene, sizes.satellite, sizes.satellite)?,
        panorama: render_panorama(&scene, sizes.pano_height, 4 * sizes.pano_height)?,
        caption: scene.caption(),
    };
    Ok((sample, scene))
}

/// Writes `{train,test}.csv`, the referenced PNG/caption files, and `captions.tsv`.
pub fn write_synthetic(out: impl AsRef<Path>, seed: u64, train_count: usize, test_count: usize, sizes: SyntheticSizes) -> Result<()> {
    let out = out.as_ref();
    let mut tsv = String::new();
    for (split, count) in [(Split::Train, train_count), (Split::Test, test_count)] {
        let name = split.as_str();
        for sub in ["sat", "pano", "caption"] {
            fs::create_dir_all(out.join(name).join(sub))?;
        }
        let mut csv = csv::Writer::from_writer(Vec::new());
        csv.write_record(["sat_path", "pano_path", "caption_path"]).map_err(csv_io)?;
        for i in 0..count {
            let (s, _) = synthetic_sample(seed, split, i, sizes)?;
            let sat = format!("{name}/sat/{}.png", s.id);
            let pano = format!("{name}/pano/{}.png", s.id);
            let cap = format!("{name}/caption/{}.txt", s.id);
            s.satellite.save_png(out.join(&sat))?;
            s.panorama.save_png(out.join(&pano))?;
            fs::write(out.join(&cap), format!("{}\n", s.caption))?;
            tsv.push_str(&format!("{}\t{}\n", s.id, s.caption));
            csv.write_record([sat, pano, cap]).map_err(csv_io)?;
        }
        let bytes = csv.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        fs::write(split.csv_path(out), bytes)?;
    }
    fs::write(out.join("captions.tsv"), tsv)?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circular_shift_eq(a: &ImageTensor, b: &ImageTensor, shift: usize) -> bool {
        let (c, h, w) = a.dims();
        (0..c).all(|ch| (0..h).all(|y| (0..w).all(|x| b.get(ch, y, (x + shift) % w) == a.get(ch, y, x))))
    }

    #[test]
    fn scenes_are_deterministic_and_have_roads() {
        for seed in 0..40 {
            let a = generate_scene(seed, 64, 64).unwrap();
            assert_eq!(a, generate_scene(seed, 64, 64).unwrap());
            assert!(a.count(Class::Road) >= 1, "seed {seed}");
            assert!((1..=3).contains(&a.road_count) && a.building_count <= 8);
            assert_eq!(a.tree_count, a.count(Class::Tree));
        }
        assert!(generate_scene(0, 15, 64).is_err());
    }

    #[test]
    fn road_fraction_distribution() {
        let mut f = 0.0;
        for seed in 0..100 {
            let s = generate_scene(seed, 64, 64).unwrap();
            f += s.count(Class::Road) as f64 / 4096.0;
        }
        f /= 100.0;
        assert!(f > 0.02 && f < 0.40, "mean road fraction {f}");
    }

    #[test]
    fn rotation_is_circular_shift() {
        for seed in 0..5 {
            let s = generate_scene(seed, 64, 64).unwrap();
            let p = render_panorama(&s, 32, 128).unwrap();
            let q = render_panorama(&s.rotate90_ccw(), 32, 128).unwrap();
            assert!(circular_shift_eq(&p, &q, 32), "seed {seed}");
        }
    }

    #[test]
    fn four_rotations_are_identity() {
        let s = generate_scene(3, 32, 48).unwrap();
        let r = s.rotate90_ccw();
        assert_eq!((r.height, r.width), (48, 32));
        assert_eq!(r.rotate90_ccw().rotate90_ccw().rotate90_ccw(), s);
    }

    #[test]
    fn all_ground_scene_renders() {
        let s = SceneSpec::uniform(Class::Ground, 32, 32);
        let sat = render_satellite(&s, 16, 16).unwrap();
        let tan = Class::Ground.color();
        for ch in 0..3 {
            assert!(sat.data()[ch * 256..(ch + 1) * 256].iter().all(|&v| v == tan[ch] as f32 / 255.0));
        }
        let p = render_panorama(&s, 16, 64).unwrap();
        for x in 1..64 {
            for y in 0..16 {
                assert_eq!(p.get(0, y, x), p.get(0, y, 0));
            }
        }
        assert_eq!(classify_pixel([p.get(0, 15, 3), p.get(1, 15, 3), p.get(2, 15, 3)]), Class::Ground);
        assert!(p.get(2, 0, 0) > p.get(0, 0, 0), "sky is blue");
        assert!(render_panorama(&s, 16, 60).is_err());
    }

    #[test]
    fn east_building_hand_traced() {
        let mut s = SceneSpec::uniform(Class::Ground, 64, 64);
        for r in 30..34 {
            for c in 50..54 {
                s.set(r, c, Class::Building);
            }
        }
        let p = render_panorama(&s, 32, 128).unwrap();
        let is_building = |y: usize, x: usize| classify_pixel([p.get(0, y, x), p.get(1, y, x), p.get(2, y, x)]) == Class::Building;
        // Column 0 hits column 50 at t = 18: extent round(64/18) = 4, rows 14..18.
        for y in 0..32 {
            assert_eq!(is_building(y, 0), (14..18).contains(&y), "row {y}");
        }
        let hit: Vec<usize> = (0..128).filter(|&x| is_building(16, x)).collect();
        let right = hit.iter().filter(|&&x| x < 64).count();
        let left = hit.len() - right;
        assert!(hit.iter().all(|&x| !(8..=120).contains(&x)), "{hit:?}");
        assert!(right >= 1 && left >= 1 && right.abs_diff(left + 1) <= 1, "{hit:?}");
    }

    #[test]
    fn palette_round_trip_at_native_size() {
        let s = generate_scene(11, 64, 64).unwrap();
        let img = render_satellite(&s, 64, 64).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                let px = [img.get(0, r, c), img.get(1, r, c), img.get(2, r, c)];
                assert_eq!(classify_pixel(px), s.at(r, c));
            }
        }
    }

    #[test]
    fn satellite_render_golden_hash() {
        let img = render_satellite(&generate_scene(7, 64, 64).unwrap(), 64, 64).unwrap();
        let bytes: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, "9493afa082bccce7a72aade4ee3f07850ac4548d1464a6c9cbcf48670aa88ba6");
    }

    #[test]
    fn caption_embedding() {
        assert!(embed_caption("", 16).iter().all(|&v| v == 0.0));
        assert!(embed_caption("   ", 16).iter().all(|&v| v == 0.0));
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        let a = embed_caption("Street View", 16);
        assert_eq!(a, embed_caption("street   view", 16));
        let expect = |t: &str| (fnv1a64(t.as_bytes()) % 16) as usize;
        let mut oracle = vec![0.0f32; 16];
        oracle[expect("street")] += 0.5;
        oracle[expect("view")] += 0.5;
        assert_eq!(a, oracle);
        assert_ne!(a, embed_caption("desert road", 16));
        assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn prompt_sources() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.tsv");
        fs::write(&f, "a\tone road\nb\ttwo roads\n").unwrap();
        let p = PromptSource::per_image(&f).unwrap();
        assert_eq!(p.text_for("b").unwrap(), "two roads");
        assert!(p.text_for("z").is_err());
        assert_eq!(PromptSource::fixed(DEFAULT_PROMPT).text_for("z").unwrap(), "street view");
        assert!(matches!(PromptSource::per_image(dir.path().join("nope")), Err(Error::MissingFile(_))));
    }
}
