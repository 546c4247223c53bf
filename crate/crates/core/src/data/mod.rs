//! Dataset model: grid classes, semantic category masks, sequence sampling,
//! the synthetic scene generator, and the on-disk manifest format.

pub mod manifest;
pub mod pgm;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// Class-id palette for rendered rasters.
pub const CLASS_VOID: u8 = 0;
pub const CLASS_ROAD: u8 = 1;
pub const CLASS_SIDEWALK: u8 = 2;
pub const CLASS_BUILDING: u8 = 3;
pub const CLASS_SIGN: u8 = 4;
pub const CLASS_VEHICLE: u8 = 5;
pub const CLASS_PERSON: u8 = 6;
pub const CLASS_RIDER: u8 = 7;
pub const NUM_CLASS_IDS: u8 = 8;

/// Categories fed to the interaction module, in fixed order: target
/// pedestrian, other people, riders, vehicles, static context.
pub const NUM_CATEGORIES: usize = 5;
pub const CATEGORY_NAMES: [&str; NUM_CATEGORIES] = ["p", "pl", "b", "v", "st"];

/// Rasters shrink by this factor before entering the convolution stack.
pub const MAP_DOWNSAMPLE: usize = 5;

// ---------------------------------------------------------------------------
// boxes and grid

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox { x1, y1, x2, y2 }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_ordered(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn clamp_to(&self, width: usize, height: usize) -> BoundingBox {
        let w = (width - 1) as f64;
        let h = (height - 1) as f64;
        BoundingBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Image-plane grid; a cell is a class of the auxiliary location task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub cell_px: usize,
    pub image_width: usize,
    pub image_height: usize,
}

impl GridSpec {
    pub fn new(cell_px: usize, image_width: usize, image_height: usize) -> Result<GridSpec> {
        if cell_px == 0 || image_width == 0 || image_height == 0 {
            return Err(Error::Config("grid extents must be positive".to_string()));
        }
        if image_width % cell_px != 0 || image_height % cell_px != 0 {
            return Err(Error::Config(format!(
                "cell size {cell_px} does not divide image {image_width}x{image_height}"
            )));
        }
        Ok(GridSpec {
            rows: image_height / cell_px,
            cols: image_width / cell_px,
            cell_px,
            image_width,
            image_height,
        })
    }

    /// 18x32 grid of 60 px cells over a 1920x1080 image.
    pub fn default_spec() -> GridSpec {
        GridSpec::new(60, 1920, 1080).expect("default grid divides evenly")
    }

    pub fn classes(&self) -> usize {
        self.rows * self.cols
    }

    /// Class of the cell whose center is nearest the box center
    /// (row-major id, ties to the smaller id).
    pub fn grid_class(&self, b: &BoundingBox) -> usize {
        let (cx, cy) = b.center();
        let col = nearest_cell(cx, self.cell_px, self.cols);
        let row = nearest_cell(cy, self.cell_px, self.rows);
        row * self.cols + col
    }
}

fn nearest_cell(coord: f64, cell_px: usize, count: usize) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for i in 0..count {
        let center = (i * cell_px) as f64 + cell_px as f64 / 2.0;
        let d = (coord - center).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// category masks

/// Split a class-id raster into the five category masks and shrink each by
/// [`MAP_DOWNSAMPLE`] via max-pooling. The target pedestrian mask holds the
/// person pixels inside `target_box`; surrounding people get the rest.
pub fn build_category_maps(
    raster: &[u8],
    width: usize,
    height: usize,
    target_box: &BoundingBox,
) -> Result<[Vec<u8>; NUM_CATEGORIES]> {
    if raster.len() != width * height {
        return Err(Error::Input(format!(
            "raster holds {} bytes, expected {}x{}={}",
            raster.len(),
            width,
            height,
            width * height
        )));
    }
    if width % MAP_DOWNSAMPLE != 0 || height % MAP_DOWNSAMPLE != 0 {
        return Err(Error::Input(format!(
            "raster {width}x{height} not divisible by the downsample factor {MAP_DOWNSAMPLE}"
        )));
    }
    let mut full: [Vec<u8>; NUM_CATEGORIES] = [
        vec![0; raster.len()],
        vec![0; raster.len()],
        vec![0; raster.len()],
        vec![0; raster.len()],
        vec![0; raster.len()],
    ];
    for y in 0..height {
        let fy = y as f64;
        for x in 0..width {
            let cls = raster[y * width + x];
            let idx = y * width + x;
            match cls {
                CLASS_VOID => {}
                CLASS_PERSON => {
                    let fx = x as f64;
                    let inside = fx >= target_box.x1
                        && fx <= target_box.x2
                        && fy >= target_box.y1
                        && fy <= target_box.y2;
                    if inside {
                        full[0][idx] = 1;
                    } else {
                        full[1][idx] = 1;
                    }
                }
                CLASS_RIDER => full[2][idx] = 1,
                CLASS_VEHICLE => full[3][idx] = 1,
                CLASS_ROAD | CLASS_SIDEWALK | CLASS_BUILDING | CLASS_SIGN => full[4][idx] = 1,
                other => {
                    return Err(Error::Input(format!("unknown class id {other} in raster")));
                }
            }
        }
    }
    let p = downsample_max(&full[0], width, height, MAP_DOWNSAMPLE);
    let mut pl = downsample_max(&full[1], width, height, MAP_DOWNSAMPLE);
    // pooling can merge target and bystander pixels into one cell; the
    // target mask stays disjoint from pl by construction
    for (pv, plv) in p.iter().zip(pl.iter_mut()) {
        if *pv == 1 {
            *plv = 0;
        }
    }
    Ok([
        p,
        pl,
        downsample_max(&full[2], width, height, MAP_DOWNSAMPLE),
        downsample_max(&full[3], width, height, MAP_DOWNSAMPLE),
        downsample_max(&full[4], width, height, MAP_DOWNSAMPLE),
    ])
}

/// Max-pool a binary mask over factor x factor blocks.
pub fn downsample_max(mask: &[u8], width: usize, height: usize, factor: usize) -> Vec<u8> {
    let ow = width / factor;
    let oh = height / factor;
    let mut out = vec![0u8; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut v = 0u8;
            'block: for dy in 0..factor {
                let row = (oy * factor + dy) * width + ox * factor;
                for dx in 0..factor {
                    if mask[row + dx] != 0 {
                        v = 1;
                        break 'block;
                    }
                }
            }
            out[oy * ow + ox] = v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// tracks and samples

/// One pedestrian observed over contiguous frames, clipped at the crossing
/// event when there is one.
#[derive(Clone, Debug)]
pub struct Track {
    pub id: u32,
    pub boxes: Vec<BoundingBox>,
    pub grid: Vec<usize>,
    pub ego: Vec<[f64; 3]>,
    /// Crossing event frame; tracks are clipped here.
    pub event_frame: Option<usize>,
    /// Sampling anchor: the event frame for crossing tracks, the frame of
    /// nearest lateral approach otherwise.
    pub anchor_frame: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other} (train|val|test)"))),
        }
    }
}

/// One training/eval instance: an observed window plus its future targets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSample {
    pub id: u32,
    pub track_id: u32,
    pub split: Split,
    pub start_frame: usize,
    pub obs_boxes: Vec<BoundingBox>,
    pub obs_grid: Vec<usize>,
    pub obs_ego: Vec<[f64; 3]>,
    pub future_boxes: Vec<BoundingBox>,
    pub future_ego: Vec<[f64; 3]>,
    pub crossing: bool,
    pub final_grid: usize,
    /// Frames until the event/anchor, counted from the last observed frame.
    pub tte: usize,
    /// Per-observed-frame class rasters, relative to the dataset root;
    /// empty when the dataset was generated without rasters.
    pub raster_paths: Vec<String>,
}

/// Window positions selected by [`sample_sequences`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub track_index: usize,
    pub start: usize,
    pub tte: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SamplingReport {
    pub windows: usize,
    pub tracks_too_short: usize,
}

/// Slide observation windows of length `m` with 50% overlap
/// (stride = round(m/2)) and keep those whose last observed frame lies
/// `tte_min..=tte_max` frames before the track anchor, with a full future
/// window of `tau` frames available.
pub fn sample_sequences(
    tracks: &[Track],
    m: usize,
    tau: usize,
    tte_min: usize,
    tte_max: usize,
) -> Result<(Vec<WindowRef>, SamplingReport)> {
    if m == 0 || tau == 0 {
        return Err(Error::Contract("window lengths must be positive".to_string()));
    }
    let stride = (m + 1) / 2;
    let mut out = Vec::new();
    let mut report = SamplingReport::default();
    for (ti, track) in tracks.iter().enumerate() {
        let len = track.boxes.len();
        if len < m + tau {
            report.tracks_too_short += 1;
            continue;
        }
        if track.grid.len() != len || track.ego.len() != len {
            return Err(Error::Contract(format!(
                "track {}: per-frame arrays disagree in length",
                track.id
            )));
        }
        let anchor = track.anchor_frame.min(len - 1);
        let mut start = 0usize;
        while start + m + tau <= len {
            let last_obs = start + m - 1;
            if anchor >= last_obs {
                let tte = anchor - last_obs;
                if tte >= tte_min && tte <= tte_max {
                    out.push(WindowRef { track_index: ti, start, tte });
                }
            }
            start += stride;
        }
    }
    report.windows = out.len();
    Ok((out, report))
}
