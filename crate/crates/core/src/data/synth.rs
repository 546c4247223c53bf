//! Synthetic ego-centric driving scenes.
//!
//! A straight road runs along +z with the camera on a forward-moving ego
//! vehicle. Pedestrians walk the sidewalks; crossing ones drift toward the
//! curb and step into the road at a scripted event frame. Everything is
//! projected through a fixed-height pinhole camera onto the image plane,
//! and class-id rasters are rendered by painting ground bands, a building
//! strip, and agent boxes in depth order.
//!
//! Generation is deterministic: every scenario derives its own stream from
//! the master seed, so outputs are byte-identical across runs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::{self, ManifestHeader, FORMAT_TAG};
use crate::data::pgm;
use crate::data::{
    sample_sequences, BoundingBox, GridSpec, SceneSample, Split, Track, CLASS_BUILDING,
    CLASS_PERSON, CLASS_RIDER, CLASS_ROAD, CLASS_SIDEWALK, CLASS_SIGN, CLASS_VEHICLE,
    MAP_DOWNSAMPLE,
};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// configuration

#[derive(Clone, Debug, PartialEq)]
pub enum EgoProfile {
    /// One speed for the whole track.
    Constant,
    /// Slow sinusoidal modulation around a base speed.
    Varied,
    /// Independent random speed per fixed-length block of frames; future
    /// speeds are unpredictable from the observed window.
    Blocks,
}

impl std::str::FromStr for EgoProfile {
    type Err = Error;
    fn from_str(s: &str) -> Result<EgoProfile> {
        match s {
            "constant" => Ok(EgoProfile::Constant),
            "varied" => Ok(EgoProfile::Varied),
            "blocks" => Ok(EgoProfile::Blocks),
            other => Err(Error::Config(format!(
                "unknown ego_profile {other} (constant|varied|blocks)"
            ))),
        }
    }
}

/// World description for [`synthesize_dataset`]; parsed from a plain
/// `key = value` file.
#[derive(Clone, Debug)]
pub struct WorldConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub focal_px: f64,
    pub camera_height: f64,
    pub lane_half_width: f64,
    pub road_half_width: f64,
    pub sidewalk_width: f64,
    pub obs_len: usize,
    pub pred_len: usize,
    pub tte_min: usize,
    pub tte_max: usize,
    pub crossing_scenes: usize,
    pub non_crossing_scenes: usize,
    pub background_people: usize,
    pub background_vehicles: usize,
    pub background_riders: usize,
    pub ego_speed_min: f64,
    pub ego_speed_max: f64,
    pub ego_profile: EgoProfile,
    pub ego_block_len: usize,
    pub render_rasters: bool,
    pub split_train: f64,
    pub split_val: f64,
    pub fps: f64,
    pub grid_cell_px: usize,
    /// Frames past the track end that the crossing label looks ahead.
    pub label_horizon: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            image_width: 1920,
            image_height: 1080,
            focal_px: 1000.0,
            camera_height: 1.5,
            lane_half_width: 1.8,
            road_half_width: 3.6,
            sidewalk_width: 2.5,
            obs_len: 15,
            pred_len: 30,
            tte_min: 30,
            tte_max: 60,
            crossing_scenes: 8,
            non_crossing_scenes: 16,
            background_people: 2,
            background_vehicles: 2,
            background_riders: 1,
            ego_speed_min: 6.0,
            ego_speed_max: 12.0,
            ego_profile: EgoProfile::Constant,
            ego_block_len: 15,
            render_rasters: true,
            split_train: 0.7,
            split_val: 0.15,
            fps: 30.0,
            grid_cell_px: 60,
            label_horizon: 90,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.focal_px <= 0.0 {
            return Err(Error::Config(format!("focal_px must be positive, got {}", self.focal_px)));
        }
        if self.camera_height <= 0.0 {
            return Err(Error::Config("camera_height must be positive".to_string()));
        }
        if self.fps <= 0.0 {
            return Err(Error::Config("fps must be positive".to_string()));
        }
        if self.obs_len == 0 || self.pred_len == 0 {
            return Err(Error::Config("window lengths must be positive".to_string()));
        }
        if self.tte_min > self.tte_max {
            return Err(Error::Config(format!(
                "tte_min {} exceeds tte_max {}",
                self.tte_min, self.tte_max
            )));
        }
        if self.pred_len > self.tte_max {
            return Err(Error::Config(format!(
                "pred_len {} exceeds tte_max {}: no window can ever be sampled",
                self.pred_len, self.tte_max
            )));
        }
        if self.lane_half_width >= self.road_half_width {
            return Err(Error::Config("ego lane wider than the road".to_string()));
        }
        if self.ego_speed_min <= 0.0 || self.ego_speed_max < self.ego_speed_min {
            return Err(Error::Config("bad ego speed range".to_string()));
        }
        if !(0.0..=1.0).contains(&self.split_train)
            || !(0.0..=1.0).contains(&self.split_val)
            || self.split_train + self.split_val > 1.0
        {
            return Err(Error::Config("split fractions must lie in [0,1] and sum <= 1".to_string()));
        }
        GridSpec::new(self.grid_cell_px, self.image_width, self.image_height)?;
        if self.render_rasters
            && (self.image_width % MAP_DOWNSAMPLE != 0 || self.image_height % MAP_DOWNSAMPLE != 0)
        {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by the raster downsample factor {}",
                self.image_width, self.image_height, MAP_DOWNSAMPLE
            )));
        }
        Ok(())
    }

    pub fn parse_file(path: &Path) -> Result<WorldConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse_str(&text, &path.display().to_string())
    }

    pub fn parse_str(text: &str, origin: &str) -> Result<WorldConfig> {
        let mut cfg = WorldConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("{origin}: line {}: expected key = value", ln + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad =
                |what: &str| Error::Parse(format!("{origin}: line {}: bad {what}: {value}", ln + 1));
            match key {
                "image_width" => cfg.image_width = value.parse().map_err(|_| bad("usize"))?,
                "image_height" => cfg.image_height = value.parse().map_err(|_| bad("usize"))?,
                "focal_px" => cfg.focal_px = value.parse().map_err(|_| bad("float"))?,
                "camera_height" => cfg.camera_height = value.parse().map_err(|_| bad("float"))?,
                "lane_half_width" => cfg.lane_half_width = value.parse().map_err(|_| bad("float"))?,
                "road_half_width" => cfg.road_half_width = value.parse().map_err(|_| bad("float"))?,
                "sidewalk_width" => cfg.sidewalk_width = value.parse().map_err(|_| bad("float"))?,
                "obs_len" => cfg.obs_len = value.parse().map_err(|_| bad("usize"))?,
                "pred_len" => cfg.pred_len = value.parse().map_err(|_| bad("usize"))?,
                "tte_min" => cfg.tte_min = value.parse().map_err(|_| bad("usize"))?,
                "tte_max" => cfg.tte_max = value.parse().map_err(|_| bad("usize"))?,
                "crossing_scenes" => cfg.crossing_scenes = value.parse().map_err(|_| bad("usize"))?,
                "non_crossing_scenes" => {
                    cfg.non_crossing_scenes = value.parse().map_err(|_| bad("usize"))?
                }
                "background_people" => {
                    cfg.background_people = value.parse().map_err(|_| bad("usize"))?
                }
                "background_vehicles" => {
                    cfg.background_vehicles = value.parse().map_err(|_| bad("usize"))?
                }
                "background_riders" => {
                    cfg.background_riders = value.parse().map_err(|_| bad("usize"))?
                }
                "ego_speed_min" => cfg.ego_speed_min = value.parse().map_err(|_| bad("float"))?,
                "ego_speed_max" => cfg.ego_speed_max = value.parse().map_err(|_| bad("float"))?,
                "ego_profile" => cfg.ego_profile = value.parse()?,
                "ego_block_len" => cfg.ego_block_len = value.parse().map_err(|_| bad("usize"))?,
                "render_rasters" => {
                    cfg.render_rasters = parse_bool(value).ok_or_else(|| bad("bool"))?
                }
                "split_train" => cfg.split_train = value.parse().map_err(|_| bad("float"))?,
                "split_val" => cfg.split_val = value.parse().map_err(|_| bad("float"))?,
                "fps" => cfg.fps = value.parse().map_err(|_| bad("float"))?,
                "grid_cell_px" => cfg.grid_cell_px = value.parse().map_err(|_| bad("usize"))?,
                "label_horizon" => cfg.label_horizon = value.parse().map_err(|_| bad("usize"))?,
                other => {
                    return Err(Error::Parse(format!(
                        "{origin}: line {}: unknown key {other}",
                        ln + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// camera

#[derive(Clone, Copy, Debug)]
struct Camera {
    focal: f64,
    cx: f64,
    cy: f64,
    height: f64,
    image_w: usize,
    image_h: usize,
}

const NEAR_CLIP: f64 = 0.5;

impl Camera {
    /// Project an upright box (lateral center x, relative depth z, physical
    /// width and height in meters) and clamp it to the image.
    fn project_box(&self, x: f64, rel_z: f64, width: f64, height: f64) -> Option<BoundingBox> {
        if rel_z < NEAR_CLIP {
            return None;
        }
        let scale = self.focal / rel_z;
        let u = self.cx + x * scale;
        let hw = width / 2.0 * scale;
        let y_bottom = self.cy + self.height * scale;
        let y_top = self.cy + (self.height - height) * scale;
        let raw = BoundingBox::new(u - hw, y_top, u + hw, y_bottom);
        Some(raw.clamp_to(self.image_w, self.image_h))
    }

    /// Depth of the ground plane seen at image row v (below the horizon).
    fn ground_depth(&self, v: f64) -> Option<f64> {
        let dv = v - self.cy;
        if dv <= 0.0 {
            return None;
        }
        Some(self.focal * self.height / dv)
    }

    fn column_of(&self, x: f64, rel_z: f64) -> f64 {
        self.cx + x * self.focal / rel_z
    }
}

// ---------------------------------------------------------------------------
// world state

#[derive(Clone, Copy, Debug, PartialEq)]
enum AgentKind {
    Person,
    Vehicle,
    Rider,
    Sign,
}

impl AgentKind {
    fn class(&self) -> u8 {
        match self {
            AgentKind::Person => CLASS_PERSON,
            AgentKind::Vehicle => CLASS_VEHICLE,
            AgentKind::Rider => CLASS_RIDER,
            AgentKind::Sign => CLASS_SIGN,
        }
    }
}

/// Background element; position is (x, z) on the ground plane.
#[derive(Clone, Debug)]
struct Agent {
    kind: AgentKind,
    x0: f64,
    z0: f64,
    vz: f64,
    width: f64,
    height: f64,
}

impl Agent {
    fn position(&self, t: usize, fps: f64) -> (f64, f64) {
        (self.x0, self.z0 + self.vz * t as f64 / fps)
    }
}

/// Scripted target pedestrian: linear drift from the sidewalk to the curb
/// until the event frame, then either crossing motion or holding position.
#[derive(Clone, Debug)]
struct TargetScript {
    start_x: f64,
    curb_x: f64,
    event_frame: usize,
    cross_vx: f64,
    z0: f64,
    vz: f64,
    width: f64,
    height: f64,
    crossing: bool,
}

impl TargetScript {
    /// World position at frame t, defined past the clipped track so the
    /// label oracle can look ahead.
    fn position(&self, t: usize, fps: f64) -> (f64, f64) {
        let z = self.z0 + self.vz * t as f64 / fps;
        let x = if t <= self.event_frame {
            let frac =
                if self.event_frame == 0 { 1.0 } else { t as f64 / self.event_frame as f64 };
            self.start_x + (self.curb_x - self.start_x) * frac
        } else if self.crossing {
            self.curb_x + self.cross_vx * (t - self.event_frame) as f64 / fps
        } else {
            self.curb_x
        };
        (x, z)
    }
}

struct Scenario {
    target: TargetScript,
    agents: Vec<Agent>,
    ego_speed: Vec<f64>,
    ego_vx: Vec<f64>,
    /// Cumulative ego displacement per frame.
    disp: Vec<f64>,
    track_len: usize,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn scenario_rng(seed: u64, scenario_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(scenario_index)))
}

fn ego_speeds(cfg: &WorldConfig, rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    match cfg.ego_profile {
        EgoProfile::Constant => {
            let s = rng.gen_range(cfg.ego_speed_min..=cfg.ego_speed_max);
            vec![s; len]
        }
        EgoProfile::Varied => {
            let base = rng.gen_range(cfg.ego_speed_min..=cfg.ego_speed_max);
            let amp = rng.gen_range(0.3..1.5);
            let period = rng.gen_range(40.0..80.0);
            (0..len)
                .map(|t| {
                    let s = base + amp * (2.0 * std::f64::consts::PI * t as f64 / period).sin();
                    s.max(0.5)
                })
                .collect()
        }
        EgoProfile::Blocks => {
            let bl = cfg.ego_block_len.max(1);
            let blocks = len / bl + 2;
            let speeds: Vec<f64> = (0..blocks)
                .map(|_| rng.gen_range(cfg.ego_speed_min..=cfg.ego_speed_max))
                .collect();
            (0..len).map(|t| speeds[t / bl]).collect()
        }
    }
}

fn build_scenario(cfg: &WorldConfig, rng: &mut ChaCha8Rng, crossing: bool) -> Scenario {
    let m = cfg.obs_len;
    // earliest time-to-event a sampled window can carry: the future window
    // must fit inside the track, which is clipped at the event
    let lo = cfg.tte_min.max(cfg.pred_len);
    let anchor = (m - 1) + lo + rng.gen_range(0..=(cfg.tte_max - lo));
    let track_len = anchor + 1;

    let ego_speed = ego_speeds(cfg, rng, track_len);
    let ego_vx: Vec<f64> = (0..track_len).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let mut disp = vec![0.0f64; track_len];
    for t in 1..track_len {
        disp[t] = disp[t - 1] + ego_speed[t - 1] / cfg.fps;
    }

    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let sw_inner = cfg.road_half_width + 0.6;
    let sw_outer = cfg.road_half_width + cfg.sidewalk_width - 0.6;
    let start_x = side * rng.gen_range(sw_inner..sw_outer);
    let curb_x = side * (cfg.road_half_width + 0.25);
    let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let vz = dir * rng.gen_range(0.8..1.8);
    let height = rng.gen_range(1.55..1.9);
    let width = rng.gen_range(0.45..0.6);

    // keep the target comfortably in frame for the whole track; relative
    // depth is monotone decreasing since the ego always outpaces walkers
    let t_last = (track_len - 1) as f64;
    let min_rel = 7.0 + rng.gen_range(0.0..6.0);
    let z0 = min_rel + disp[track_len - 1] - vz * t_last / cfg.fps;

    let target = TargetScript {
        start_x,
        curb_x,
        event_frame: anchor,
        cross_vx: -side * rng.gen_range(2.2..3.0),
        z0,
        vz,
        width,
        height,
        crossing,
    };

    let mut agents = Vec::new();
    let sign_x = cfg.road_half_width + 0.2;
    let far = disp[track_len - 1] + 80.0;
    let mut sz = 10.0;
    while sz < far {
        agents.push(Agent {
            kind: AgentKind::Sign,
            x0: sign_x,
            z0: sz,
            vz: 0.0,
            width: 0.25,
            height: 2.4,
        });
        agents.push(Agent {
            kind: AgentKind::Sign,
            x0: -sign_x,
            z0: sz + 9.0,
            vz: 0.0,
            width: 0.25,
            height: 2.4,
        });
        sz += 20.0;
    }
    for _ in 0..rng.gen_range(0..=cfg.background_people) {
        let pside = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        agents.push(Agent {
            kind: AgentKind::Person,
            x0: pside * rng.gen_range(sw_inner..sw_outer),
            z0: rng.gen_range(10.0..disp[track_len - 1] + 45.0),
            vz: rng.gen_range(-1.5..1.5),
            width: rng.gen_range(0.45..0.6),
            height: rng.gen_range(1.5..1.9),
        });
    }
    for _ in 0..rng.gen_range(0..=cfg.background_vehicles) {
        let vside = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        agents.push(Agent {
            kind: AgentKind::Vehicle,
            x0: vside * (cfg.road_half_width - 0.95),
            z0: rng.gen_range(12.0..disp[track_len - 1] + 50.0),
            vz: 0.0,
            width: 1.8,
            height: 1.5,
        });
    }
    for _ in 0..rng.gen_range(0..=cfg.background_riders) {
        let rside = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        agents.push(Agent {
            kind: AgentKind::Rider,
            x0: rside * (cfg.lane_half_width + 0.5),
            z0: rng.gen_range(8.0..30.0),
            vz: rng.gen_range(4.0..6.5),
            width: 0.6,
            height: 1.7,
        });
    }

    Scenario { target, agents, ego_speed, ego_vx, disp, track_len }
}

/// The crossing label: the target's ground-truth lateral path enters the
/// ego lane within `horizon` frames of the track start.
fn path_enters_lane(lane_half: f64, horizon: usize, fps: f64, script: &TargetScript) -> bool {
    (0..horizon).any(|t| script.position(t, fps).0.abs() <= lane_half)
}

/// Ground-truth lateral positions per scenario, for an independent
/// lane-intersection check against the emitted labels. Frame range covers
/// the track plus the label horizon.
pub fn world_lateral_paths(cfg: &WorldConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let total = cfg.crossing_scenes + cfg.non_crossing_scenes;
    let mut out = Vec::with_capacity(total);
    for si in 0..total {
        let crossing = si < cfg.crossing_scenes;
        let mut rng = scenario_rng(seed, si as u64);
        let scenario = build_scenario(cfg, &mut rng, crossing);
        let frames = scenario.track_len + cfg.label_horizon;
        out.push((0..frames).map(|t| scenario.target.position(t, cfg.fps).0).collect());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// rendering

fn render_frame(cfg: &WorldConfig, cam: &Camera, scenario: &Scenario, t: usize) -> Vec<u8> {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let mut raster = vec![0u8; w * h];

    // building strip hugging the horizon
    let strip = (h as f64 * 0.12) as usize;
    let horizon = (cam.cy as usize).min(h - 1);
    for v in horizon.saturating_sub(strip)..=horizon {
        raster[v * w..(v + 1) * w].fill(CLASS_BUILDING);
    }

    // ground bands below the horizon
    let sw_outer = cfg.road_half_width + cfg.sidewalk_width;
    for v in (horizon + 1)..h {
        let Some(depth) = cam.ground_depth(v as f64 + 0.5) else { continue };
        let row = &mut raster[v * w..(v + 1) * w];
        let clampc = |x: f64| cam.column_of(x, depth).clamp(0.0, w as f64) as usize;
        let (b0, b1) = (clampc(-sw_outer), clampc(sw_outer));
        let (s0, s1) = (clampc(-cfg.road_half_width), clampc(cfg.road_half_width));
        row.fill(CLASS_BUILDING);
        row[b0..b1.min(w)].fill(CLASS_SIDEWALK);
        row[s0..s1.min(w)].fill(CLASS_ROAD);
    }

    // agents plus the target, far to near
    struct Paint {
        rel: f64,
        x: f64,
        width: f64,
        height: f64,
        class: u8,
    }
    let mut paints: Vec<Paint> = Vec::new();
    for a in &scenario.agents {
        let (x, z) = a.position(t, cfg.fps);
        paints.push(Paint {
            rel: z - scenario.disp[t],
            x,
            width: a.width,
            height: a.height,
            class: a.kind.class(),
        });
    }
    let (tx, tz) = scenario.target.position(t, cfg.fps);
    paints.push(Paint {
        rel: tz - scenario.disp[t],
        x: tx,
        width: scenario.target.width,
        height: scenario.target.height,
        class: CLASS_PERSON,
    });
    paints.sort_by(|a, b| b.rel.partial_cmp(&a.rel).expect("finite depths"));
    for p in paints {
        if let Some(b) = cam.project_box(p.x, p.rel, p.width, p.height) {
            let (x1, x2) = (b.x1 as usize, b.x2 as usize);
            let (y1, y2) = (b.y1 as usize, b.y2 as usize);
            if x2 > x1 && y2 > y1 {
                for v in y1..=y2.min(h - 1) {
                    raster[v * w + x1..v * w + x2.min(w - 1) + 1].fill(p.class);
                }
            }
        }
    }
    raster
}

// ---------------------------------------------------------------------------
// dataset assembly

#[derive(Clone, Debug, Default)]
pub struct SynthSummary {
    pub crossing_scenes: usize,
    pub non_crossing_scenes: usize,
    pub samples: usize,
    pub crossing_samples: usize,
    pub tracks_too_short: usize,
    pub split_counts: BTreeMap<String, usize>,
}

impl std::fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let ratio = if self.samples > 0 {
            self.crossing_samples as f64 / self.samples as f64
        } else {
            0.0
        };
        write!(
            f,
            "scenes: {} crossing / {} non-crossing; samples: {} ({} crossing, ratio {:.3})",
            self.crossing_scenes,
            self.non_crossing_scenes,
            self.samples,
            self.crossing_samples,
            ratio
        )?;
        for (k, v) in &self.split_counts {
            write!(f, "; {k}: {v}")?;
        }
        if self.tracks_too_short > 0 {
            write!(f, "; skipped short tracks: {}", self.tracks_too_short)?;
        }
        Ok(())
    }
}

/// Generate a dataset tree (manifest plus rasters) under `out_dir`.
pub fn synthesize_dataset(cfg: &WorldConfig, seed: u64, out_dir: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir, e))?;
    let cam = Camera {
        focal: cfg.focal_px,
        cx: cfg.image_width as f64 / 2.0,
        cy: cfg.image_height as f64 / 2.0,
        height: cfg.camera_height,
        image_w: cfg.image_width,
        image_h: cfg.image_height,
    };
    let grid = GridSpec::new(cfg.grid_cell_px, cfg.image_width, cfg.image_height)?;

    let total_scenes = cfg.crossing_scenes + cfg.non_crossing_scenes;
    let mut tracks: Vec<Track> = Vec::with_capacity(total_scenes);
    let mut scenarios: Vec<Scenario> = Vec::with_capacity(total_scenes);
    let mut labels: Vec<bool> = Vec::with_capacity(total_scenes);
    let mut splits: Vec<Split> = Vec::with_capacity(total_scenes);

    // index-proportional split within each scene kind: exact and stable
    let split_of = |index: usize, count: usize| -> Split {
        let f = (index as f64 + 0.5) / count.max(1) as f64;
        if f <= cfg.split_train {
            Split::Train
        } else if f <= cfg.split_train + cfg.split_val {
            Split::Val
        } else {
            Split::Test
        }
    };

    for si in 0..total_scenes {
        let crossing = si < cfg.crossing_scenes;
        let mut rng = scenario_rng(seed, si as u64);
        let scenario = build_scenario(cfg, &mut rng, crossing);

        let mut boxes = Vec::with_capacity(scenario.track_len);
        let mut egos = Vec::with_capacity(scenario.track_len);
        for t in 0..scenario.track_len {
            let (x, z) = scenario.target.position(t, cfg.fps);
            let rel = z - scenario.disp[t];
            let b = cam
                .project_box(x, rel, scenario.target.width, scenario.target.height)
                .ok_or_else(|| {
                    Error::Contract(format!("scenario {si}: target left the view frustum"))
                })?;
            boxes.push(b);
            egos.push([scenario.ego_speed[t], scenario.ego_vx[t], scenario.ego_speed[t]]);
        }
        let grid_ids: Vec<usize> = boxes.iter().map(|b| grid.grid_class(b)).collect();
        let anchor = scenario.target.event_frame;
        labels.push(path_enters_lane(
            cfg.lane_half_width,
            scenario.track_len + cfg.label_horizon,
            cfg.fps,
            &scenario.target,
        ));
        tracks.push(Track {
            id: si as u32,
            boxes,
            grid: grid_ids,
            ego: egos,
            event_frame: if crossing { Some(anchor) } else { None },
            anchor_frame: anchor,
        });
        let (kind_index, kind_count) = if crossing {
            (si, cfg.crossing_scenes)
        } else {
            (si - cfg.crossing_scenes, cfg.non_crossing_scenes)
        };
        splits.push(split_of(kind_index, kind_count));
        scenarios.push(scenario);
    }

    let (windows, report) =
        sample_sequences(&tracks, cfg.obs_len, cfg.pred_len, cfg.tte_min, cfg.tte_max)?;

    let rasters_dir = out_dir.join("rasters");
    if cfg.render_rasters && !windows.is_empty() {
        std::fs::create_dir_all(&rasters_dir).map_err(|e| Error::io_at(&rasters_dir, e))?;
    }

    let mut samples: Vec<SceneSample> = Vec::with_capacity(windows.len());
    let mut summary = SynthSummary {
        crossing_scenes: cfg.crossing_scenes,
        non_crossing_scenes: cfg.non_crossing_scenes,
        tracks_too_short: report.tracks_too_short,
        ..Default::default()
    };

    for (sid, w) in windows.iter().enumerate() {
        let track = &tracks[w.track_index];
        let scenario = &scenarios[w.track_index];
        let (m, tau, s) = (cfg.obs_len, cfg.pred_len, w.start);

        let mut raster_paths = Vec::new();
        if cfg.render_rasters {
            let sample_dir = rasters_dir.join(format!("s{sid:05}"));
            std::fs::create_dir_all(&sample_dir).map_err(|e| Error::io_at(&sample_dir, e))?;
            for k in 0..m {
                let frame = render_frame(cfg, &cam, scenario, s + k);
                let rel = format!("rasters/s{sid:05}/f{k:02}.pgm");
                pgm::write_pgm(&out_dir.join(&rel), cfg.image_width, cfg.image_height, &frame)?;
                raster_paths.push(rel);
            }
        }

        let future_boxes: Vec<BoundingBox> = track.boxes[s + m..s + m + tau].to_vec();
        let final_grid = grid.grid_class(future_boxes.last().expect("tau > 0"));
        let sample = SceneSample {
            id: sid as u32,
            track_id: track.id,
            split: splits[w.track_index],
            start_frame: s,
            obs_boxes: track.boxes[s..s + m].to_vec(),
            obs_grid: track.grid[s..s + m].to_vec(),
            obs_ego: track.ego[s..s + m].to_vec(),
            future_boxes,
            future_ego: track.ego[s + m..s + m + tau].to_vec(),
            crossing: labels[w.track_index],
            final_grid,
            tte: w.tte,
            raster_paths,
        };
        if sample.crossing {
            summary.crossing_samples += 1;
        }
        *summary.split_counts.entry(sample.split.to_string()).or_insert(0) += 1;
        samples.push(sample);
    }
    summary.samples = samples.len();

    let header = ManifestHeader {
        format: FORMAT_TAG.to_string(),
        image_width: cfg.image_width,
        image_height: cfg.image_height,
        grid_cell_px: cfg.grid_cell_px,
        obs_len: cfg.obs_len,
        pred_len: cfg.pred_len,
        map_downsample: MAP_DOWNSAMPLE,
        crossing_scenes: cfg.crossing_scenes,
        non_crossing_scenes: cfg.non_crossing_scenes,
    };
    manifest::save(out_dir, &header, &samples)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::Dataset;

    pub(crate) fn tiny_config() -> WorldConfig {
        WorldConfig {
            image_width: 240,
            image_height: 120,
            focal_px: 125.0,
            grid_cell_px: 30,
            obs_len: 4,
            pred_len: 6,
            tte_min: 6,
            tte_max: 12,
            crossing_scenes: 2,
            non_crossing_scenes: 2,
            background_people: 1,
            background_vehicles: 1,
            background_riders: 1,
            split_train: 1.0,
            split_val: 0.0,
            label_horizon: 60,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn zero_pedestrians_yield_valid_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = WorldConfig { crossing_scenes: 0, non_crossing_scenes: 0, ..tiny_config() };
        let summary = synthesize_dataset(&cfg, 1, dir.path()).unwrap();
        assert_eq!(summary.samples, 0);
        let ds = Dataset::load(dir.path()).unwrap();
        assert!(ds.samples.is_empty());
    }

    #[test]
    fn crossing_scenes_get_label_one_and_road_band_cells() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        synthesize_dataset(&cfg, 3, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert!(!ds.samples.is_empty());
        let spec = ds.header.grid_spec().unwrap();
        let mut saw_crossing = false;
        let mut saw_non_crossing = false;
        for s in &ds.samples {
            let from_crossing_scene = (s.track_id as usize) < cfg.crossing_scenes;
            assert_eq!(s.crossing, from_crossing_scene, "label must match the scripted path");
            if s.crossing {
                saw_crossing = true;
                // the target walks the lower image half, where road rows project
                let row = s.final_grid / spec.cols;
                assert!(row >= spec.rows / 2, "crossing target should sit in the road-band rows");
            } else {
                saw_non_crossing = true;
            }
        }
        assert!(saw_crossing && saw_non_crossing);
    }

    #[test]
    fn labels_agree_with_world_path_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        synthesize_dataset(&cfg, 11, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let paths = world_lateral_paths(&cfg, 11).unwrap();
        for s in &ds.samples {
            let oracle = paths[s.track_id as usize]
                .iter()
                .any(|x| x.abs() <= cfg.lane_half_width);
            assert_eq!(s.crossing, oracle, "sample {}", s.id);
        }
    }

    #[test]
    fn generation_is_byte_identical_for_a_seed() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        synthesize_dataset(&cfg, 9, d1.path()).unwrap();
        synthesize_dataset(&cfg, 9, d2.path()).unwrap();
        let m1 = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m1, m2);
        let ds = Dataset::load(d1.path()).unwrap();
        let rel = &ds.samples[0].raster_paths[0];
        assert_eq!(
            std::fs::read(d1.path().join(rel)).unwrap(),
            std::fs::read(d2.path().join(rel)).unwrap()
        );
    }

    #[test]
    fn generated_maps_partition_agent_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        synthesize_dataset(&cfg, 5, dir.path()).unwrap();
        let mut ds = Dataset::load(dir.path()).unwrap();
        ds.load_maps().unwrap();
        let maps = ds.maps.as_ref().unwrap();
        for frames in maps {
            for frame in frames {
                assert_eq!(frame.len(), 5);
                assert!(frame[0].iter().any(|&v| v > 0.0), "target mask must be nonempty");
            }
        }
    }

    #[test]
    fn invalid_camera_is_a_config_error() {
        let cfg = WorldConfig { focal_px: -1.0, ..tiny_config() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_file_round_trip_and_unknown_key() {
        let good =
            "image_width = 240\nimage_height=120 # comment\nfocal_px = 125\ngrid_cell_px = 30\npred_len = 6\ntte_min=6\ntte_max=12\n";
        let cfg = WorldConfig::parse_str(good, "test").unwrap();
        assert_eq!(cfg.image_width, 240);
        assert_eq!(cfg.grid_cell_px, 30);
        let bad = "imaeg_width = 240\n";
        let err = WorldConfig::parse_str(bad, "test").unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");
    }
}
