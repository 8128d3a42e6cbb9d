//! Synthetic long-range-context segmentation tiles and their on-disk layout.
//!
//! Tiles are painted on a grid of square cells. Background blocks use the
//! regular classes `0..K-2`. The last two classes `A = K-2` and `B = K-1`
//! appear either as plainly textured rectangles or, with probability
//! `ambiguity_rate`, inside an *ambiguous quadrant*: the top-left quarter of
//! the tile, split into two halves, each painted with its own texture that is shared
//! by `A` and `B`. One half is `A` and the other `B`, chosen at random; each
//! half's label is revealed only by the colour of its 2×2-cell marker,
//! placed at least `marker_distance` pixels outside the quadrant. Marker
//! pixels carry the ignore label.
//!
//! With the halves inside one coarse block, a model that only adds per-scale
//! class maps cannot beat chance there: the coarse map shifts both halves
//! alike, and nothing finer sees the markers.

mod batches;
pub mod netpbm;

pub use batches::epoch_batches;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 8;

const CLASS_COLORS: [[f64; 3]; MAX_CLASSES] = [
    [0.75, 0.75, 0.72],
    [0.20, 0.30, 0.80],
    [0.30, 0.75, 0.30],
    [0.10, 0.40, 0.10],
    [0.85, 0.80, 0.20],
    [0.80, 0.20, 0.20],
    [0.55, 0.30, 0.65],
    [0.15, 0.70, 0.75],
];
/// Textures shared by the two confusable classes, one per quadrant half.
const AMBIGUOUS_COLORS: [[f64; 3]; 2] = [[0.50, 0.42, 0.30], [0.40, 0.40, 0.55]];
/// `MARKER_COLORS[texture][label is B]`
const MARKER_COLORS: [[[f64; 3]; 2]; 2] = [
    [[1.0, 0.0, 1.0], [0.0, 1.0, 0.55]],
    [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// `[H₀, W₀]`
    pub tile: [usize; 2],
    pub num_classes: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub ambiguity_rate: f64,
    /// Minimum gap in pixels, per axis, between a marker and the ambiguous quadrant.
    pub marker_distance: usize,
    /// Half-width of the uniform per-pixel colour noise.
    pub noise: f64,
    /// Edge of the square layout cell, in pixels.
    pub cell: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            tile: [32, 32],
            num_classes: 6,
            num_train: 3000,
            num_val: 100,
            num_test: 200,
            ambiguity_rate: 0.5,
            marker_distance: 9,
            noise: 0.08,
            cell: 4,
            seed: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [h, w] = self.tile;
        if !(3..=MAX_CLASSES).contains(&self.num_classes) {
            return bad(format!(
                "generator supports 3..={MAX_CLASSES} classes, got {}",
                self.num_classes
            ));
        }
        let quad_cell = 2 * self.cell;
        if self.cell == 0 || h % quad_cell != 0 || w % quad_cell != 0 {
            return bad(format!(
                "tile {h}×{w} is not a multiple of twice the cell {}",
                self.cell
            ));
        }
        if h / quad_cell < 2 || w / quad_cell < 2 {
            return bad("tile must span at least 4×4 cells".into());
        }
        if self.marker_distance >= h.min(w) {
            return bad(format!(
                "marker distance {} must be below the tile extent",
                self.marker_distance
            ));
        }
        if self.num_train == 0 || self.num_val == 0 || self.num_test == 0 {
            return bad("split sizes must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return bad(format!("ambiguity_rate {} outside [0, 1]", self.ambiguity_rate));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 0.5]", self.noise));
        }
        Ok(())
    }

    /// The two classes that share the ambiguous textures.
    pub fn confusable_pair(&self) -> (u8, u8) {
        ((self.num_classes - 2) as u8, (self.num_classes - 1) as u8)
    }
}

/// Pixel rectangle `[y, y+h) × [x, x+w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    /// Chebyshev distance between the closest pixels of two rectangles; 0
    /// when they overlap. The Euclidean distance is never smaller.
    pub fn gap(&self, other: &Rect) -> usize {
        let axis = |a0: usize, a1: usize, b0: usize, b1: usize| {
            // a1, b1 exclusive
            if b0 >= a1 {
                b0 - a1 + 1
            } else if a0 >= b1 {
                a0 - b1 + 1
            } else {
                0
            }
        };
        let dy = axis(self.y, self.y + self.h, other.y, other.y + other.h);
        let dx = axis(self.x, self.x + self.w, other.x, other.x + other.w);
        dy.max(dx)
    }
}

/// One half of an ambiguous quadrant and the marker that decides its label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbiguousRegion {
    pub region: Rect,
    /// Index of the shared texture painted in `region`.
    pub texture: usize,
    pub label: u8,
    pub marker: Rect,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H₀×W₀`, values in `[0, 1]`
    pub image: Tensor,
    pub labels: LabelMap,
    /// Known for generated tiles; empty after reading from disk.
    pub ambiguous: Vec<AmbiguousRegion>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown split {s:?}; use train, val or test")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Generates all three splits. Deterministic in `config.seed`.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let make = |split: Split, count: usize| -> Result<Vec<Sample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(split as u64);
        (0..count).map(|_| generate_tile(config, &mut rng)).collect()
    };
    Ok(Dataset {
        config: config.clone(),
        train: make(Split::Train, config.num_train)?,
        val: make(Split::Val, config.num_val)?,
        test: make(Split::Test, config.num_test)?,
    })
}

struct Canvas {
    w: usize,
    rgb: Vec<[f64; 3]>,
    labels: Vec<u8>,
}

impl Canvas {
    fn fill<R: Rng>(&mut self, rect: Rect, color: [f64; 3], label: u8, noise: f64, rng: &mut R) {
        for y in rect.y..rect.y + rect.h {
            for x in rect.x..rect.x + rect.w {
                let i = y * self.w + x;
                self.rgb[i] = paint(color, noise, rng);
                self.labels[i] = label;
            }
        }
    }
}

/// One textured pixel: the base colour plus independent uniform noise,
/// snapped to the 8-bit grid so tiles survive a PPM round trip unchanged.
fn paint<R: Rng>(color: [f64; 3], noise: f64, rng: &mut R) -> [f64; 3] {
    color.map(|c| {
        let n = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
        f64::from(netpbm::quantize(c + n)) / 255.0
    })
}

fn random_rect<R: Rng>(rng: &mut R, grid: (usize, usize), cell: usize, side: (usize, usize)) -> Rect {
    let ch = rng.gen_range(side.0..=side.1).min(grid.0);
    let cw = rng.gen_range(side.0..=side.1).min(grid.1);
    let cy = rng.gen_range(0..=grid.0 - ch);
    let cx = rng.gen_range(0..=grid.1 - cw);
    Rect {
        y: cy * cell,
        x: cx * cell,
        h: ch * cell,
        w: cw * cell,
    }
}

fn generate_tile<R: Rng>(config: &GeneratorConfig, rng: &mut R) -> Result<Sample> {
    let [h, w] = config.tile;
    let cell = config.cell;
    let grid = (h / cell, w / cell);
    let regular = config.num_classes - 2;
    let (class_a, class_b) = config.confusable_pair();
    let mut canvas = Canvas {
        w,
        rgb: vec![[0.0; 3]; h * w],
        labels: vec![0; h * w],
    };

    // background: four blocks split at random cell boundaries
    let split_y = rng.gen_range(1..grid.0) * cell;
    let split_x = rng.gen_range(1..grid.1) * cell;
    for (y, bh) in [(0, split_y), (split_y, h - split_y)] {
        for (x, bw) in [(0, split_x), (split_x, w - split_x)] {
            let class = rng.gen_range(0..regular);
            let rect = Rect { y, x, h: bh, w: bw };
            canvas.fill(rect, CLASS_COLORS[class], class as u8, config.noise, rng);
        }
    }

    let mut ambiguous = Vec::new();
    if rng.gen_bool(config.ambiguity_rate) {
        let (qh, qw) = (h / 2, w / 2);
        let quad = Rect { y: 0, x: 0, h: qh, w: qw };
        let m = 2 * cell;
        let candidates: Vec<Rect> = (0..h / m)
            .flat_map(|cy| (0..w / m).map(move |cx| (cy, cx)))
            .map(|(cy, cx)| Rect {
                y: cy * m,
                x: cx * m,
                h: m,
                w: m,
            })
            .filter(|r| r.gap(&quad) >= config.marker_distance)
            .collect();
        if candidates.len() < 2 {
            return Err(Error::Generation(format!(
                "no room for two markers {} px from the ambiguous quadrant",
                config.marker_distance
            )));
        }
        let picked: Vec<Rect> = candidates.choose_multiple(rng, 2).copied().collect();
        let markers = [picked[0], picked[1]];
        let mut halves = if rng.gen_bool(0.5) {
            let half = Rect { w: qw / 2, ..quad };
            [half, Rect { x: quad.x + qw / 2, ..half }]
        } else {
            let half = Rect { h: qh / 2, ..quad };
            [half, Rect { y: quad.y + qh / 2, ..half }]
        };
        if rng.gen_bool(0.5) {
            halves.swap(0, 1);
        }
        let first_is_b = rng.gen_bool(0.5);
        for (texture, (region, marker)) in halves.into_iter().zip(markers).enumerate() {
            let is_b = first_is_b != (texture == 1);
            let label = if is_b { class_b } else { class_a };
            // the texture never depends on `label`
            canvas.fill(region, AMBIGUOUS_COLORS[texture], label, config.noise, rng);
            canvas.fill(marker, MARKER_COLORS[texture][usize::from(is_b)], IGNORE_LABEL, 0.0, rng);
            ambiguous.push(AmbiguousRegion {
                region,
                texture,
                label,
                marker,
            });
        }
    } else if rng.gen_bool(0.5) {
        // a plainly textured rectangle of one confusable class
        let rect = random_rect(rng, grid, cell, (2, 3));
        let class = if rng.gen_bool(0.5) { class_a } else { class_b };
        canvas.fill(rect, CLASS_COLORS[class as usize], class, config.noise, rng);
    }

    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (i, rgb) in canvas.rgb.iter().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = rgb[c];
        }
    }
    Ok(Sample {
        image: Tensor::new(&[3, h, w], data)?,
        labels: LabelMap::new(h, w, canvas.labels)?,
        ambiguous,
    })
}

/// Fraction of scored pixels per class over `samples`.
pub fn class_fractions(samples: &[Sample], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for s in samples {
        for &l in s.labels.data() {
            if l != IGNORE_LABEL {
                counts[l as usize] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

fn tile_paths(root: &Path, split: Split, index: usize) -> (PathBuf, PathBuf) {
    let dir = root.join(split.as_str());
    (
        dir.join(format!("img_{index:05}.ppm")),
        dir.join(format!("lab_{index:05}.pgm")),
    )
}

pub fn write_tile(sample: &Sample, image_path: &Path, label_path: &Path) -> Result<()> {
    netpbm::write_ppm(&sample.image, image_path)?;
    netpbm::write_pgm(&sample.labels, label_path)
}

/// Reads one tile and checks it against the expected tile extent and class count.
pub fn read_tile(
    image_path: &Path,
    label_path: &Path,
    tile: [usize; 2],
    classes: usize,
) -> Result<Sample> {
    let image = netpbm::read_ppm(image_path)?;
    let labels = netpbm::read_pgm(label_path, classes)?;
    let (_, h, w) = image.chw()?;
    for (path, dims) in [(image_path, (h, w)), (label_path, labels.dims())] {
        if dims != (tile[0], tile[1]) {
            return Err(Error::Parse {
                path: Some(path.to_path_buf()),
                offset: 0,
                message: format!(
                    "extent {}×{} does not match configured tile {}×{}",
                    dims.0, dims.1, tile[0], tile[1]
                ),
            });
        }
    }
    Ok(Sample {
        image,
        labels,
        ambiguous: Vec::new(),
    })
}

/// Writes `<root>/{train,val,test}/img_%05d.ppm`, `lab_%05d.pgm` and `meta.json`.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for split in Split::ALL {
        fs::create_dir_all(root.join(split.as_str()))?;
        for (i, sample) in dataset.split(split).iter().enumerate() {
            let (img, lab) = tile_paths(root, split, i);
            write_tile(sample, &img, &lab)?;
        }
    }
    let meta = serde_json::to_string_pretty(&dataset.config)?;
    fs::write(root.join("meta.json"), meta + "\n")?;
    Ok(())
}

pub fn read_meta(root: &Path) -> Result<GeneratorConfig> {
    let text = fs::read_to_string(root.join("meta.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads one split using the tile size and class count recorded in `meta.json`.
pub fn read_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let meta = read_meta(root)?;
    let count = match split {
        Split::Train => meta.num_train,
        Split::Val => meta.num_val,
        Split::Test => meta.num_test,
    };
    (0..count)
        .map(|i| {
            let (img, lab) = tile_paths(root, split, i);
            read_tile(&img, &lab, meta.tile, meta.num_classes)
        })
        .collect()
}
