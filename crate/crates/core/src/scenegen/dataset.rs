//! Dataset generation: per-clip seeding, source material, WAV stems and the
//! JSON Lines manifest.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::geometry::{classify_position, source_angle_deg, Region, DEFAULT_ROI_ANGLE_DEG};
use super::scene::{render_scene, sample_scene, DrySources, MixtureClip, SceneRecipe, SceneSpec, SirDraw};
use super::speech::{synth_noise, synth_speech};
use crate::dsp::{channel_average, AudioBuffer, MultichannelBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::roomsim::{ArraySpec, Position, RoomSpec};
use crate::wav::{read_wav, write_wav};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CLIP_DIR: &str = "clips";

/// SplitMix64 finalizer, used to derive independent per-clip seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn clip_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(master_seed ^ index)
}

/// Dataset presets: the two training setups and the four test scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "train-simple")]
    TrainSimple,
    #[serde(rename = "train-complex")]
    TrainComplex,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
    #[serde(rename = "4")]
    Four,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::TrainSimple,
        Scenario::TrainComplex,
        Scenario::One,
        Scenario::Two,
        Scenario::Three,
        Scenario::Four,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::TrainSimple => "train-simple",
            Scenario::TrainComplex => "train-complex",
            Scenario::One => "1",
            Scenario::Two => "2",
            Scenario::Three => "3",
            Scenario::Four => "4",
        }
    }

    /// Scenarios 3 and 4 sweep fixed SIRs without background noise.
    pub fn is_sir_sweep(self) -> bool {
        matches!(self, Scenario::Three | Scenario::Four)
    }

    pub fn recipe(self, noise: Option<bool>, sir_db: Option<f64>) -> Result<SceneRecipe> {
        let (targets, interferers) = match self {
            Scenario::TrainSimple | Scenario::One | Scenario::Three => ((1, 1), (1, 1)),
            Scenario::TrainComplex => ((1, 4), (1, 4)),
            Scenario::Two | Scenario::Four => ((2, 4), (1, 4)),
        };
        if self.is_sir_sweep() && noise == Some(true) {
            return Err(Error::Config(format!("scenario {} has no noise source", self.name())));
        }
        let sir = match (sir_db, self.is_sir_sweep()) {
            (Some(v), _) => SirDraw::Fixed(v),
            (None, true) => SirDraw::OneOf(vec![0.0, 5.0, 10.0]),
            (None, false) => SirDraw::Uniform(0.0, 10.0),
        };
        Ok(SceneRecipe {
            targets,
            interferers,
            noise: !self.is_sir_sweep() && noise.unwrap_or(true),
            sir,
            roi_angle_deg: DEFAULT_ROI_ANGLE_DEG,
        })
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceMaterial {
    Synthetic,
    /// Mono speech WAVs; noise WAVs are optional and synthesized otherwise.
    Corpus {
        speech_dir: PathBuf,
        noise_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub noise: Option<bool>,
    #[serde(default)]
    pub sir_db: Option<f64>,
    pub count: usize,
    #[serde(default = "default_clip_seconds")]
    pub clip_seconds: f64,
    pub master_seed: u64,
    #[serde(default = "default_material")]
    pub material: SourceMaterial,
    #[serde(default = "default_roi")]
    pub roi_angle_deg: f64,
}

fn default_clip_seconds() -> f64 {
    10.0
}

fn default_material() -> SourceMaterial {
    SourceMaterial::Synthetic
}

fn default_roi() -> f64 {
    DEFAULT_ROI_ANGLE_DEG
}

impl DatasetConfig {
    pub fn new(scenario: Scenario, count: usize, master_seed: u64) -> Self {
        Self {
            scenario,
            noise: None,
            sir_db: None,
            count,
            clip_seconds: default_clip_seconds(),
            master_seed,
            material: SourceMaterial::Synthetic,
            roi_angle_deg: DEFAULT_ROI_ANGLE_DEG,
        }
    }

    pub fn num_samples(&self) -> usize {
        (self.clip_seconds * SAMPLE_RATE as f64).round() as usize
    }

    pub fn recipe(&self) -> Result<SceneRecipe> {
        let mut recipe = self.scenario.recipe(self.noise, self.sir_db)?;
        recipe.roi_angle_deg = self.roi_angle_deg;
        Ok(recipe)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count: must be at least 1".into()));
        }
        if !(self.clip_seconds > 0.0) {
            return Err(Error::Config(format!("clip_seconds: must be positive, got {}", self.clip_seconds)));
        }
        if !(self.roi_angle_deg > 0.0 && self.roi_angle_deg < 180.0) {
            return Err(Error::Config(format!(
                "roi_angle_deg: must be in (0, 180), got {}",
                self.roi_angle_deg
            )));
        }
        self.recipe().map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceRole {
    Target,
    Interferer,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Utterance {
    SyntheticSpeech { seed: u64 },
    SyntheticNoise { seed: u64 },
    File { path: PathBuf, offset: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub role: SourceRole,
    pub position: Position,
    pub angle_deg: f64,
    pub inside_roi: bool,
    pub region: Region,
    pub utterance: Utterance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub y_path: String,
    pub t_path: String,
    pub k_path: String,
    pub n_path: String,
    pub room_dims: [f64; 3],
    pub t60: f64,
    pub absorption: f64,
    pub array: ArraySpec,
    pub roi_angle_deg: f64,
    pub sources: Vec<SourceRecord>,
    pub sir_db: f64,
    pub snr_db: Option<f64>,
    pub level_dbfs: f64,
    pub achieved_level_dbfs: f64,
    pub level_clamped: bool,
    pub num_samples: usize,
    pub scenario: Scenario,
    pub seed: u64,
}

impl ManifestRecord {
    pub fn scene(&self) -> SceneSpec {
        let positions = |role| {
            self.sources
                .iter()
                .filter(|s| s.role == role)
                .map(|s| s.position)
                .collect::<Vec<_>>()
        };
        SceneSpec {
            room: RoomSpec {
                dims: self.room_dims,
                t60: self.t60,
                absorption: self.absorption,
                speed_of_sound: crate::roomsim::SPEED_OF_SOUND,
            },
            array: self.array.clone(),
            roi_angle_deg: self.roi_angle_deg,
            targets: positions(SourceRole::Target),
            interferers: positions(SourceRole::Interferer),
            noise_pos: positions(SourceRole::Noise).first().copied(),
            sir_db: self.sir_db,
            snr_db: self.snr_db,
            level_dbfs: self.level_dbfs,
            seed: self.seed,
        }
    }

    fn utterances(&self, role: SourceRole) -> impl Iterator<Item = &Utterance> {
        self.sources.iter().filter(move |s| s.role == role).map(|s| &s.utterance)
    }
}

/// Sorted lists of speech (and optional noise) files.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub speech: Vec<PathBuf>,
    pub noise: Vec<PathBuf>,
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

impl Corpus {
    pub fn load(material: &SourceMaterial) -> Result<Self> {
        match material {
            SourceMaterial::Synthetic => Ok(Self::default()),
            SourceMaterial::Corpus { speech_dir, noise_dir } => {
                let speech = list_wavs(speech_dir)?;
                if speech.is_empty() {
                    return Err(Error::Corpus(format!("no WAV files in {}", speech_dir.display())));
                }
                let noise = match noise_dir {
                    Some(d) => list_wavs(d)?,
                    None => Vec::new(),
                };
                Ok(Self { speech, noise })
            }
        }
    }

    fn is_synthetic(&self) -> bool {
        self.speech.is_empty()
    }
}

fn load_excerpt(path: &Path, offset: usize, len: usize) -> Result<AudioBuffer> {
    let audio = read_wav(path)?;
    let mono = channel_average(&audio).into_samples();
    let mut out: Vec<f32> = mono.iter().skip(offset).take(len).copied().collect();
    out.resize(len, 0.0);
    AudioBuffer::new(out)
}

fn render_utterance(u: &Utterance, len: usize) -> Result<AudioBuffer> {
    let seconds = len as f64 / SAMPLE_RATE as f64;
    match u {
        Utterance::SyntheticSpeech { seed } => Ok(synth_speech(&mut ChaCha8Rng::seed_from_u64(*seed), seconds)),
        Utterance::SyntheticNoise { seed } => Ok(synth_noise(&mut ChaCha8Rng::seed_from_u64(*seed), seconds)),
        Utterance::File { path, offset } => load_excerpt(path, *offset, len),
    }
}

fn wav_len(path: &Path) -> Result<usize> {
    Ok(hound::WavReader::open(path)?.duration() as usize)
}

/// Picks distinct utterances for every simultaneous speaker, plus the noise.
fn choose_utterances<R: Rng + ?Sized>(
    rng: &mut R,
    corpus: &Corpus,
    speakers: usize,
    noise: bool,
    len: usize,
) -> Result<(Vec<Utterance>, Option<Utterance>)> {
    let excerpt = |rng: &mut R, path: &Path| -> Result<Utterance> {
        let total = wav_len(path)?;
        let offset = if total > len { rng.random_range(0..=total - len) } else { 0 };
        Ok(Utterance::File {
            path: path.to_path_buf(),
            offset,
        })
    };
    let speech = if corpus.is_synthetic() {
        (0..speakers)
            .map(|_| Utterance::SyntheticSpeech { seed: rng.next_u64() })
            .collect()
    } else {
        if corpus.speech.len() < speakers {
            return Err(Error::Corpus(format!(
                "clip needs {speakers} distinct utterances, corpus has {}",
                corpus.speech.len()
            )));
        }
        sample_indices(rng, corpus.speech.len(), speakers)
            .into_iter()
            .map(|i| excerpt(rng, &corpus.speech[i]))
            .collect::<Result<Vec<_>>>()?
    };
    let noise = if !noise {
        None
    } else if corpus.noise.is_empty() {
        Some(Utterance::SyntheticNoise { seed: rng.next_u64() })
    } else {
        let i = rng.random_range(0..corpus.noise.len());
        Some(excerpt(rng, &corpus.noise[i])?)
    };
    Ok((speech, noise))
}

fn dry_sources(record: &ManifestRecord) -> Result<DrySources> {
    let len = record.num_samples;
    Ok(DrySources {
        targets: record
            .utterances(SourceRole::Target)
            .map(|u| render_utterance(u, len))
            .collect::<Result<_>>()?,
        interferers: record
            .utterances(SourceRole::Interferer)
            .map(|u| render_utterance(u, len))
            .collect::<Result<_>>()?,
        noise: record
            .utterances(SourceRole::Noise)
            .next()
            .map(|u| render_utterance(u, len))
            .transpose()?,
    })
}

fn clip_id(index: usize) -> String {
    format!("{index:06}")
}

/// Samples and renders clip `index` of the dataset.
pub fn generate_clip(config: &DatasetConfig, corpus: &Corpus, index: usize) -> Result<(ManifestRecord, MixtureClip)> {
    let seed = clip_seed(config.master_seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recipe = config.recipe()?;
    let scene = sample_scene(&mut rng, &recipe, seed)?;
    let len = config.num_samples();
    let speakers = scene.targets.len() + scene.interferers.len();
    let (speech, noise) = choose_utterances(&mut rng, corpus, speakers, scene.noise_pos.is_some(), len)?;

    let mut sources = Vec::with_capacity(scene.num_sources());
    let placed = scene
        .targets
        .iter()
        .map(|p| (SourceRole::Target, p))
        .chain(scene.interferers.iter().map(|p| (SourceRole::Interferer, p)));
    for ((role, pos), utt) in placed.zip(speech) {
        sources.push(source_record(&scene, role, pos, utt)?);
    }
    if let (Some(pos), Some(utt)) = (&scene.noise_pos, noise) {
        sources.push(source_record(&scene, SourceRole::Noise, pos, utt)?);
    }

    let id = clip_id(index);
    let path = |stem: &str| format!("{CLIP_DIR}/{id}_{stem}.wav");
    let mut record = ManifestRecord {
        y_path: path("y"),
        t_path: path("t"),
        k_path: path("k"),
        n_path: path("n"),
        clip_id: id,
        room_dims: scene.room.dims,
        t60: scene.room.t60,
        absorption: scene.room.absorption,
        array: scene.array.clone(),
        roi_angle_deg: scene.roi_angle_deg,
        sources,
        sir_db: scene.sir_db,
        snr_db: scene.snr_db,
        level_dbfs: scene.level_dbfs,
        achieved_level_dbfs: 0.0,
        level_clamped: false,
        num_samples: len,
        scenario: config.scenario,
        seed,
    };
    let clip = render_scene(&scene, &dry_sources(&record)?, len)?;
    record.achieved_level_dbfs = clip.achieved_level_dbfs;
    record.level_clamped = clip.level_clamped;
    Ok((record, clip))
}

fn source_record(scene: &SceneSpec, role: SourceRole, pos: &Position, utterance: Utterance) -> Result<SourceRecord> {
    let region = classify_position(&scene.array, scene.roi_angle_deg, pos)?;
    Ok(SourceRecord {
        role,
        position: *pos,
        angle_deg: source_angle_deg(&scene.array, pos)?,
        inside_roi: region == Region::InsideRoi,
        region,
        utterance,
    })
}

/// Rebuilds a clip from its manifest record (and the corpus files it names).
pub fn regenerate_clip(record: &ManifestRecord) -> Result<MixtureClip> {
    render_scene(&record.scene(), &dry_sources(record)?, record.num_samples)
}

/// Writes `count` clips and `manifest.jsonl` under `out_dir`. Clips are
/// rendered on the current rayon pool; output does not depend on its size.
pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    config.validate()?;
    let corpus = Corpus::load(&config.material)?;
    fs::create_dir_all(out_dir.join(CLIP_DIR))?;
    let records = (0..config.count)
        .into_par_iter()
        .map(|index| {
            let (record, clip) = generate_clip(config, &corpus, index)?;
            write_wav(out_dir.join(&record.y_path), &clip.y)?;
            write_wav(out_dir.join(&record.t_path), &clip.t)?;
            write_wav(out_dir.join(&record.k_path), &clip.k)?;
            write_wav(out_dir.join(&record.n_path), &clip.n)?;
            log::debug!("clip {} rendered", record.clip_id);
            Ok(record)
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&out_dir.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// The four stems of a stored clip.
#[derive(Clone, Debug)]
pub struct ClipStems {
    pub y: MultichannelBuffer,
    pub t: MultichannelBuffer,
    pub k: MultichannelBuffer,
    pub n: MultichannelBuffer,
}

pub fn load_stems(dataset_dir: &Path, record: &ManifestRecord) -> Result<ClipStems> {
    Ok(ClipStems {
        y: read_wav(dataset_dir.join(&record.y_path))?,
        t: read_wav(dataset_dir.join(&record.t_path))?,
        k: read_wav(dataset_dir.join(&record.k_path))?,
        n: read_wav(dataset_dir.join(&record.n_path))?,
    })
}

fn phi_power(x: &MultichannelBuffer) -> f64 {
    channel_average(x).samples().iter().map(|&v| (v as f64).powi(2)).sum()
}

/// SIR and SNR (dB) re-measured from stems on channel averages.
pub fn measure_ratios(t: &MultichannelBuffer, k: &MultichannelBuffer, n: &MultichannelBuffer) -> (f64, f64) {
    let speech: Vec<Vec<f32>> = t
        .channels()
        .iter()
        .zip(k.channels())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    let speech = MultichannelBuffer::new(speech).expect("stems share a shape");
    let sir = 10.0 * (phi_power(t) / phi_power(k)).log10();
    let snr = 10.0 * (phi_power(&speech) / phi_power(n)).log10();
    (sir, snr)
}
