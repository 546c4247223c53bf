//! On-disk dataset format: `manifest.jsonl` (one header line, then one JSON
//! record per sample) next to a `rasters/` tree of PGM class maps.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::pgm;
use crate::data::{build_category_maps, GridSpec, SceneSample, Split, NUM_CATEGORIES};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const FORMAT_TAG: &str = "biped-dataset-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub image_width: usize,
    pub image_height: usize,
    pub grid_cell_px: usize,
    pub obs_len: usize,
    pub pred_len: usize,
    pub map_downsample: usize,
    pub crossing_scenes: usize,
    pub non_crossing_scenes: usize,
}

impl ManifestHeader {
    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid_cell_px, self.image_width, self.image_height)
    }
}

/// Loaded dataset. Category maps are absent until [`Dataset::load_maps`].
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub samples: Vec<SceneSample>,
    /// Per sample, per observed frame, the five downsampled binary masks.
    pub maps: Option<Vec<Vec<[Rc<Vec<f64>>; NUM_CATEGORIES]>>>,
}

pub fn save(dir: &Path, header: &ManifestHeader, samples: &[SceneSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    let path = dir.join(MANIFEST_NAME);
    let mut out = String::new();
    out.push_str(&serde_json::to_string(header).map_err(|e| Error::Io(e.to_string()))?);
    out.push('\n');
    for s in samples {
        out.push_str(&serde_json::to_string(s).map_err(|e| Error::Io(e.to_string()))?);
        out.push('\n');
    }
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io_at(&path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io_at(&path, e))?;
    Ok(())
}

impl Dataset {
    /// Parse and validate a dataset rooted at `dir`.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join(MANIFEST_NAME);
        let file = std::fs::File::open(&path).map_err(|e| Error::io_at(&path, e))?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let header: ManifestHeader = match lines.next() {
            Some((_, Ok(line))) => serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}: line 1: {e}", path.display())))?,
            Some((_, Err(e))) => return Err(Error::io_at(&path, e)),
            None => return Err(Error::Parse(format!("{}: empty manifest", path.display()))),
        };
        if header.format != FORMAT_TAG {
            return Err(Error::Parse(format!(
                "{}: unknown format tag {:?}",
                path.display(),
                header.format
            )));
        }
        let spec = header.grid_spec()?;

        let mut samples = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io_at(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: SceneSample = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}: line {}: {e}", path.display(), i + 1)))?;
            validate_sample(&sample, &header, &spec)?;
            samples.push(sample);
        }
        Ok(Dataset { root: dir.to_path_buf(), header, samples, maps: None })
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Recompute grid classes from boxes under a different grid geometry
    /// (the auxiliary-task ablation axis).
    pub fn regrid(&mut self, spec: &GridSpec) -> Result<()> {
        if spec.image_width != self.header.image_width
            || spec.image_height != self.header.image_height
        {
            return Err(Error::Config(format!(
                "grid image {}x{} does not match dataset image {}x{}",
                spec.image_width,
                spec.image_height,
                self.header.image_width,
                self.header.image_height
            )));
        }
        for s in &mut self.samples {
            for (g, b) in s.obs_grid.iter_mut().zip(s.obs_boxes.iter()) {
                *g = spec.grid_class(b);
            }
            s.final_grid = spec.grid_class(s.future_boxes.last().expect("validated non-empty"));
        }
        self.header.grid_cell_px = spec.cell_px;
        Ok(())
    }

    /// Read every sample's rasters and derive category masks.
    pub fn load_maps(&mut self) -> Result<()> {
        if self.header.map_downsample != crate::data::MAP_DOWNSAMPLE {
            return Err(Error::Input(format!(
                "dataset downsample factor {} unsupported (expected {})",
                self.header.map_downsample,
                crate::data::MAP_DOWNSAMPLE
            )));
        }
        let mut all = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            if s.raster_paths.len() != s.obs_boxes.len() {
                return Err(Error::Input(format!(
                    "sample {}: {} raster paths for {} observed frames (dataset generated without rasters?)",
                    s.id,
                    s.raster_paths.len(),
                    s.obs_boxes.len()
                )));
            }
            let mut frames = Vec::with_capacity(s.raster_paths.len());
            for (fi, rel) in s.raster_paths.iter().enumerate() {
                let (w, h, raster) = pgm::read_pgm(&self.root.join(rel))?;
                if w != self.header.image_width || h != self.header.image_height {
                    return Err(Error::Input(format!(
                        "sample {}: raster {rel} is {w}x{h}, dataset declares {}x{}",
                        s.id, self.header.image_width, self.header.image_height
                    )));
                }
                let masks = build_category_maps(&raster, w, h, &s.obs_boxes[fi])?;
                let as_f64 = |m: Vec<u8>| -> Rc<Vec<f64>> {
                    Rc::new(m.into_iter().map(|v| v as f64).collect())
                };
                let [p, pl, b, v, st] = masks;
                frames.push([as_f64(p), as_f64(pl), as_f64(b), as_f64(v), as_f64(st)]);
            }
            all.push(frames);
        }
        self.maps = Some(all);
        Ok(())
    }

    /// Downsampled map extents (height, width).
    pub fn map_extents(&self) -> (usize, usize) {
        (
            self.header.image_height / self.header.map_downsample,
            self.header.image_width / self.header.map_downsample,
        )
    }
}

fn validate_sample(s: &SceneSample, header: &ManifestHeader, spec: &GridSpec) -> Result<()> {
    let fail = |field: &str, detail: String| {
        Err(Error::Input(format!("sample {}: {field}: {detail}", s.id)))
    };
    if s.obs_boxes.len() != header.obs_len
        || s.obs_grid.len() != header.obs_len
        || s.obs_ego.len() != header.obs_len
    {
        return fail(
            "observed window",
            format!(
                "lengths {}/{}/{} do not equal obs_len {}",
                s.obs_boxes.len(),
                s.obs_grid.len(),
                s.obs_ego.len(),
                header.obs_len
            ),
        );
    }
    if s.future_boxes.len() != header.pred_len || s.future_ego.len() != header.pred_len {
        return fail(
            "future window",
            format!(
                "lengths {}/{} do not equal pred_len {}",
                s.future_boxes.len(),
                s.future_ego.len(),
                header.pred_len
            ),
        );
    }
    if !s.raster_paths.is_empty() && s.raster_paths.len() != header.obs_len {
        return fail("raster_paths", format!("{} paths", s.raster_paths.len()));
    }
    let w = header.image_width as f64;
    let h = header.image_height as f64;
    for (bi, b) in s.obs_boxes.iter().chain(s.future_boxes.iter()).enumerate() {
        if !b.is_ordered() {
            return fail("boxes", format!("box {bi} corners unordered: {:?}", b.coords()));
        }
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
            return fail("boxes", format!("box {bi} outside image: {:?}", b.coords()));
        }
    }
    let classes = spec.classes();
    for (gi, &g) in s.obs_grid.iter().enumerate() {
        if g >= classes {
            return fail("obs_grid", format!("class {g} at frame {gi} >= {classes}"));
        }
    }
    if s.final_grid >= classes {
        return fail("final_grid", format!("class {} >= {classes}", s.final_grid));
    }
    let derived = spec.grid_class(s.future_boxes.last().expect("pred_len > 0"));
    if derived != s.final_grid {
        return fail(
            "final_grid",
            format!("declared {} but the last future box maps to {derived}", s.final_grid),
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BoundingBox;

    fn tiny_header() -> ManifestHeader {
        ManifestHeader {
            format: FORMAT_TAG.to_string(),
            image_width: 1920,
            image_height: 1080,
            grid_cell_px: 60,
            obs_len: 2,
            pred_len: 3,
            map_downsample: 5,
            crossing_scenes: 1,
            non_crossing_scenes: 0,
        }
    }

    fn tiny_sample(spec: &GridSpec) -> SceneSample {
        let obs = vec![
            BoundingBox::new(100.0, 200.0, 140.0, 300.0),
            BoundingBox::new(104.0, 200.0, 144.0, 300.0),
        ];
        let fut = vec![
            BoundingBox::new(108.0, 200.0, 148.0, 300.0),
            BoundingBox::new(112.0, 200.0, 152.0, 300.0),
            BoundingBox::new(116.0, 200.0, 156.0, 300.0),
        ];
        SceneSample {
            id: 0,
            track_id: 0,
            split: Split::Train,
            start_frame: 0,
            obs_grid: obs.iter().map(|b| spec.grid_class(b)).collect(),
            obs_ego: vec![[8.0, 0.0, 8.0]; 2],
            future_ego: vec![[8.0, 0.0, 8.0]; 3],
            crossing: true,
            final_grid: spec.grid_class(&fut[2]),
            tte: 30,
            raster_paths: vec![],
            obs_boxes: obs,
            future_boxes: fut,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let header = tiny_header();
        let spec = header.grid_spec().unwrap();
        let samples = vec![tiny_sample(&spec)];
        save(dir.path(), &header, &samples).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 1);
        assert_eq!(ds.samples[0].final_grid, samples[0].final_grid);
        assert_eq!(ds.header.obs_len, 2);
    }

    #[test]
    fn out_of_range_grid_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let header = tiny_header();
        let spec = header.grid_spec().unwrap();
        let mut s = tiny_sample(&spec);
        s.final_grid = 600;
        save(dir.path(), &header, &[s]).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("600"), "{err}");
    }

    #[test]
    fn unordered_box_is_rejected_with_field_and_id() {
        let dir = tempfile::tempdir().unwrap();
        let header = tiny_header();
        let spec = header.grid_spec().unwrap();
        let mut s = tiny_sample(&spec);
        s.id = 7;
        s.obs_boxes[1] = BoundingBox::new(140.0, 200.0, 100.0, 300.0);
        save(dir.path(), &header, &[s]).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("sample 7") && err.contains("boxes"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let header = tiny_header();
        save(dir.path(), &header, &[]).unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        std::fs::write(&path, text).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
