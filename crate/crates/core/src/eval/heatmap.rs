use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::power_reduction_db;
use crate::cruse::{separate_streaming, CruseParams, StreamingSeparator};
use crate::dsp::{channel_average, fft_convolve_many, AudioBuffer, MultichannelBuffer};
use crate::error::{Error, Result};
use crate::roomsim::{simulate_rir, ArraySpec, Position, RirOptions, RoomSpec};
use crate::scenegen::dataset::clip_seed;
use crate::scenegen::{classify_position, synth_speech, Region, DEFAULT_ROI_ANGLE_DEG};

/// PR at or above this maps to white in the PGM image.
const PGM_WHITE_DB: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapConfig {
    pub room_dims: [f64; 3],
    pub t60: f64,
    pub array_center: Position,
    pub spacing: f64,
    /// Cells closer than this to the array center are skipped.
    pub min_distance: f64,
    pub utterance_s: f64,
    /// Level of the channel-averaged mixture.
    pub level_dbfs: f64,
    pub roi_angle_deg: f64,
    pub seed: u64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            room_dims: [12.0, 12.0, 2.0],
            t60: 0.5,
            array_center: [6.0, 6.0, 1.0],
            spacing: 0.2,
            min_distance: 0.5,
            utterance_s: 4.0,
            level_dbfs: -28.0,
            roi_angle_deg: DEFAULT_ROI_ANGLE_DEG,
            seed: 0,
        }
    }
}

impl HeatmapConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("heatmap.{field}: {why}")));
        if !(self.spacing > 0.0) {
            return bad("spacing", format!("must be positive, got {}", self.spacing));
        }
        if !(self.utterance_s > 0.0) {
            return bad("utterance_s", format!("must be positive, got {}", self.utterance_s));
        }
        if !(self.roi_angle_deg > 0.0 && self.roi_angle_deg < 180.0) {
            return bad("roi_angle_deg", format!("must lie in (0, 180), got {}", self.roi_angle_deg));
        }
        let room = RoomSpec::from_t60(self.room_dims, self.t60)?;
        if !room.contains(&self.array_center) {
            return bad("array_center", format!("{:?} is outside the room", self.array_center));
        }
        Ok(())
    }

    pub fn array(&self) -> ArraySpec {
        // Axis along +x, so the broadside points to +y.
        ArraySpec::horizontal(self.array_center, 0.0)
    }

    /// Cell centres: columns across the whole room width, rows from
    /// `min_distance` in front of the array to the far wall.
    fn lattice(&self) -> (Vec<f64>, Vec<f64>) {
        let axis = |len: f64| -> Vec<f64> {
            let n = (len / self.spacing + 1e-9).floor() as usize;
            (0..n).map(|i| (i as f64 + 0.5) * self.spacing).collect()
        };
        let xs = axis(self.room_dims[0]);
        let front = self.array_center[1] + self.min_distance - 1e-9;
        let ys = axis(self.room_dims[1]).into_iter().filter(|&y| y >= front).collect();
        (xs, ys)
    }
}

/// Produces the estimate `t_hat` for a stereo mixture.
#[derive(Clone, Debug)]
pub enum Separator {
    /// Returns the channel-averaged target stem: the mixture itself for an
    /// inside-ROI source, silence otherwise.
    Oracle,
    Model(CruseParams),
}

impl Separator {
    pub fn name(&self) -> &'static str {
        match self {
            Separator::Oracle => "oracle",
            Separator::Model(_) => "model",
        }
    }

    fn apply(&self, y: &MultichannelBuffer, t_phi: &AudioBuffer) -> Result<AudioBuffer> {
        match self {
            Separator::Oracle => Ok(t_phi.clone()),
            Separator::Model(p) => separate_streaming(&mut StreamingSeparator::new(p)?, y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapCell {
    pub x_m: f64,
    pub y_m: f64,
    pub region: Region,
    /// NaN when rendering or separation failed at this point.
    pub pr_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    /// Centre of cell (0, 0).
    pub origin: [f64; 2],
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
    /// Row-major, `ny` rows of `nx`; `None` for skipped cells.
    pub cells: Vec<Option<HeatmapCell>>,
    pub array: ArraySpec,
    pub room: RoomSpec,
}

impl HeatmapGrid {
    pub fn cell(&self, ix: usize, iy: usize) -> Option<&HeatmapCell> {
        self.cells.get(iy * self.nx + ix).and_then(Option::as_ref)
    }

    pub fn computed(&self) -> impl Iterator<Item = &HeatmapCell> {
        self.cells.iter().flatten()
    }

    /// Mean PR over finite cells of `region`.
    pub fn mean_pr(&self, region: Region) -> Option<f64> {
        let v: Vec<f64> = self
            .computed()
            .filter(|c| c.region == region && c.pr_db.is_finite())
            .map(|c| c.pr_db)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean PR outside the ROI minus mean PR inside.
    pub fn contrast_db(&self) -> Option<f64> {
        Some(self.mean_pr(Region::Outside)? - self.mean_pr(Region::InsideRoi)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_m,y_m,pr_db\n");
        for c in self.computed() {
            let _ = writeln!(out, "{:.2},{:.2},{}", c.x_m, c.y_m, c.pr_db);
        }
        out
    }

    /// Binary PGM, far wall at the top; 0 dB black, 20 dB and above white.
    /// Skipped and failed cells are black.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.nx, self.ny).into_bytes();
        for iy in (0..self.ny).rev() {
            for ix in 0..self.nx {
                let v = match self.cell(ix, iy) {
                    Some(c) if c.pr_db.is_finite() => (c.pr_db / PGM_WHITE_DB).clamp(0.0, 1.0),
                    _ => 0.0,
                };
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

struct Rendered {
    y: MultichannelBuffer,
    y_phi: AudioBuffer,
    t_phi: AudioBuffer,
}

fn render_point(config: &HeatmapConfig, room: &RoomSpec, array: &ArraySpec, pos: &Position, region: Region, index: u64) -> Result<Rendered> {
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(config.seed, index));
    let dry = synth_speech(&mut rng, config.utterance_s);
    let opts = RirOptions::for_room(room);
    let rirs = array
        .mic_positions()
        .iter()
        .map(|mic| simulate_rir(room, pos, mic, opts))
        .collect::<Result<Vec<_>>>()?;
    let kernels: Vec<&[f32]> = rirs.iter().map(|r| r.taps.as_slice()).collect();
    let wet = fft_convolve_many(dry.samples(), &kernels)?;
    let len = dry.len();
    let raw = MultichannelBuffer::new(wet.into_iter().map(|mut c| {
        c.truncate(len);
        c
    }).collect())?;
    let avg = channel_average(&raw);
    let ms = avg.samples().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / len as f64;
    if ms == 0.0 {
        return Err(Error::SilentTarget);
    }
    let gain = (10f64.powf(config.level_dbfs / 20.0) / ms.sqrt()) as f32;
    let y = MultichannelBuffer::new(raw.channels().iter().map(|c| c.iter().map(|v| v * gain).collect()).collect())?;
    let y_phi = channel_average(&y);
    let t_phi = if region == Region::InsideRoi { y_phi.clone() } else { AudioBuffer::zeros(len) };
    Ok(Rendered { y, y_phi, t_phi })
}

/// Renders one lone synthetic-speech source per grid point (reverberant,
/// no noise or interferer) and evaluates every separator on the same
/// rendering. Points are processed concurrently, each with a seed derived
/// from the run seed and its index; a failing point becomes a NaN cell.
pub fn pr_heatmap_many(separators: &[Separator], config: &HeatmapConfig) -> Result<Vec<HeatmapGrid>> {
    config.validate()?;
    let room = RoomSpec::from_t60(config.room_dims, config.t60)?;
    let array = config.array();
    let (xs, ys) = config.lattice();
    let (nx, ny) = (xs.len(), ys.len());
    let points: Vec<(usize, Position)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| [x, y, config.array_center[2]]))
        .enumerate()
        .collect();

    let results: Vec<Option<(Region, Vec<f64>)>> = points
        .par_iter()
        .map(|(i, pos)| {
            let dx = pos[0] - config.array_center[0];
            let dy = pos[1] - config.array_center[1];
            if dx.hypot(dy) < config.min_distance {
                return Ok(None);
            }
            let region = classify_position(&array, config.roi_angle_deg, pos)?;
            let prs = match render_point(config, &room, &array, pos, region, *i as u64) {
                Ok(r) => separators
                    .iter()
                    .map(|s| {
                        s.apply(&r.y, &r.t_phi)
                            .and_then(|t_hat| power_reduction_db(&r.y_phi, &t_hat))
                            .unwrap_or_else(|e| {
                                warn!("{} separator failed at ({:.2}, {:.2}): {e}", s.name(), pos[0], pos[1]);
                                f64::NAN
                            })
                    })
                    .collect(),
                Err(e) => {
                    warn!("rendering failed at ({:.2}, {:.2}): {e}", pos[0], pos[1]);
                    vec![f64::NAN; separators.len()]
                }
            };
            Ok(Some((region, prs)))
        })
        .collect::<Result<_>>()?;

    Ok((0..separators.len())
        .map(|s| HeatmapGrid {
            origin: [xs.first().copied().unwrap_or(0.0), ys.first().copied().unwrap_or(0.0)],
            spacing: config.spacing,
            nx,
            ny,
            cells: points
                .iter()
                .zip(&results)
                .map(|((_, pos), r)| {
                    r.as_ref().map(|(region, prs)| HeatmapCell {
                        x_m: pos[0],
                        y_m: pos[1],
                        region: *region,
                        pr_db: prs[s],
                    })
                })
                .collect(),
            array: array.clone(),
            room: room.clone(),
        })
        .collect())
}

pub fn pr_heatmap(separator: &Separator, config: &HeatmapConfig) -> Result<HeatmapGrid> {
    let mut grids = pr_heatmap_many(std::slice::from_ref(separator), config)?;
    Ok(grids.pop().expect("one separator"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cruse::{CruseConfig, MaskMode};

    fn small() -> HeatmapConfig {
        HeatmapConfig {
            room_dims: [4.0, 4.0, 2.0],
            t60: 0.2,
            array_center: [2.0, 2.0, 1.0],
            spacing: 0.4,
            utterance_s: 0.5,
            ..Default::default()
        }
    }

    #[test]
    fn default_lattice() {
        let (xs, ys) = HeatmapConfig::default().lattice();
        assert_eq!(xs.len(), 60);
        assert!((xs[0] - 0.1).abs() < 1e-12 && (xs[59] - 11.9).abs() < 1e-9);
        assert!((ys[0] - 6.5).abs() < 1e-9, "{}", ys[0]);
        assert!((ys.last().unwrap() - 11.9).abs() < 1e-9);
        assert_eq!(ys.len(), 28);
    }

    #[test]
    fn oracle_and_unit_mask() {
        let mut unit = CruseParams::init(&CruseConfig::toy(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        unit.config.mask = MaskMode::Unit;
        let grids = pr_heatmap_many(&[Separator::Oracle, Separator::Model(unit)], &small()).unwrap();
        let (oracle, unit) = (&grids[0], &grids[1]);
        assert_eq!(oracle.nx, 10);
        let mut inside = 0;
        for c in oracle.computed() {
            let expected = if c.region == Region::InsideRoi { 0.0 } else { 60.0 };
            assert_eq!(c.pr_db, expected, "{c:?}");
            inside += usize::from(c.region == Region::InsideRoi);
        }
        assert!(inside > 0 && inside < oracle.computed().count());
        assert!(unit.computed().all(|c| c.pr_db.abs() < 1e-4), "{:?}", unit.computed().map(|c| c.pr_db).fold(0.0, f64::max));
    }

    #[test]
    fn exports() {
        let grid = pr_heatmap(&Separator::Oracle, &small()).unwrap();
        let csv = grid.to_csv();
        assert!(csv.starts_with("x_m,y_m,pr_db\n"));
        assert_eq!(csv.lines().count(), 1 + grid.computed().count());
        let pgm = grid.to_pgm();
        let header = format!("P5\n{} {}\n255\n", grid.nx, grid.ny);
        assert!(pgm.starts_with(header.as_bytes()));
        assert_eq!(pgm.len(), header.len() + grid.nx * grid.ny);
        assert!(pgm[header.len()..].iter().all(|&v| v == 0 || v == 255));
        assert_eq!(grid.contrast_db(), Some(60.0));
    }
}
