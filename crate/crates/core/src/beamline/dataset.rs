use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sim::{BeamlineParams, JitterParams, Simulator};
use super::{Calibration, PhaseVector, ScreenGeometry, ScreenImage, WorkingPoint};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::model::sub_seed;

pub const DATASET_MAGIC: &[u8; 4] = b"PSAE";
pub const DATASET_VERSION: u16 = 1;
const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn flag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_flag(f: u8) -> Result<Self> {
        match f {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            _ => Err(Error::Format(format!("invalid split flag {f}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shot {
    pub phases: PhaseVector,
    pub image: ScreenImage,
    pub split: Split,
}

/// Preprocessed shots of one working point sharing image size and calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub working_point: WorkingPoint,
    pub height: usize,
    pub width: usize,
    pub calibration: Calibration,
    pub shots: Vec<Shot>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.shots.len())
            .filter(|&i| self.shots[i].split == split)
            .collect()
    }

    /// (train, test) shot counts.
    pub fn split_counts(&self) -> (usize, usize) {
        let train = self
            .shots
            .iter()
            .filter(|s| s.split == Split::Train)
            .count();
        (train, self.shots.len() - train)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.working_point.phase_dim();
        for (i, s) in self.shots.iter().enumerate() {
            if s.phases.to_vec().len() != dim {
                return Err(Error::Format(format!(
                    "shot {i}: phase vector does not match {}",
                    self.working_point
                )));
            }
            if (s.image.height, s.image.width) != (self.height, self.width) {
                return Err(Error::Format(format!(
                    "shot {i}: image is {}x{}",
                    s.image.height, s.image.width
                )));
            }
        }
        Ok(())
    }

    /// Serialises to the little-endian container format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let dim = self.working_point.phase_dim();
        let mut out = Vec::with_capacity(
            48 + self.shots.len() * (dim * 8 + self.height * self.width * 4 + 1),
        );
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.push(self.working_point.tag());
        for v in [self.shots.len(), self.height, self.width] {
            let v = u32::try_from(v).map_err(|_| Error::Format("dataset too large".into()))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        let c = &self.calibration;
        for v in [
            c.time_per_px_ps,
            c.energy_per_px_mev,
            c.charge_pc,
            c.reference_energy_mev,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.shots {
            for p in s.phases.to_vec() {
                out.extend_from_slice(&p.to_le_bytes());
            }
            for px in &s.image.pixels {
                out.extend_from_slice(&px.to_le_bytes());
            }
            out.push(s.split.flag());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let working_point = WorkingPoint::from_tag(r.take(1)?[0])?;
        let n = u32::from_le_bytes(r.array()?) as usize;
        let height = u32::from_le_bytes(r.array()?) as usize;
        let width = u32::from_le_bytes(r.array()?) as usize;
        let mut cal = [0.0; 4];
        for v in cal.iter_mut() {
            *v = f64::from_le_bytes(r.array()?);
        }
        let calibration = Calibration {
            time_per_px_ps: cal[0],
            energy_per_px_mev: cal[1],
            charge_pc: cal[2],
            reference_energy_mev: cal[3],
        };
        let dim = working_point.phase_dim();
        let per_shot = dim * 8 + height * width * 4 + 1;
        if bytes.len() - r.pos != n * per_shot {
            return Err(Error::Format(format!(
                "expected {} bytes of shot data, found {} (truncated or padded file)",
                n * per_shot,
                bytes.len() - r.pos
            )));
        }
        let mut shots = Vec::with_capacity(n);
        for _ in 0..n {
            let phases: Vec<f64> = (0..dim)
                .map(|_| r.array().map(f64::from_le_bytes))
                .collect::<Result<_>>()?;
            let pixels: Vec<f32> = r
                .take(height * width * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let split = Split::from_flag(r.take(1)?[0])?;
            shots.push(Shot {
                phases: PhaseVector::from_slice(working_point, &phases)?,
                image: ScreenImage::new(height, width, pixels, calibration)?,
                split,
            });
        }
        Ok(Self {
            working_point,
            height,
            width,
            calibration,
            shots,
        })
    }

    /// Hex SHA-256 of the serialised container.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("unexpected end of file (truncated)".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    std::fs::write(path, dataset.to_bytes()?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}

/// Generation settings beyond working point, size and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    pub geometry: ScreenGeometry,
    pub particles: usize,
    pub jitter: JitterParams,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            geometry: ScreenGeometry::desk(),
            particles: 200_000,
            jitter: JitterParams::default(),
        }
    }
}

impl GenOptions {
    pub fn full_scale() -> Self {
        Self {
            geometry: ScreenGeometry::full_scale(),
            particles: 4_000_000,
            ..Self::default()
        }
    }

    pub fn params(&self, wp: WorkingPoint) -> BeamlineParams {
        let mut p = BeamlineParams::for_working_point(wp);
        p.particles = self.particles;
        p.jitter = self.jitter;
        p
    }

    pub fn simulator(&self, wp: WorkingPoint) -> Result<Simulator> {
        Simulator::new(self.params(wp), self.geometry)
    }
}

fn draw_phases(wp: WorkingPoint, rng: &mut impl Rng) -> PhaseVector {
    let v: Vec<f64> = wp
        .phase_ranges()
        .iter()
        .map(|&r| rng.gen_range(-r..=r))
        .collect();
    PhaseVector::from_slice(wp, &v).expect("dimension matches working point")
}

/// Draws `n_shots` distinct phase vectors uniformly in the scan ranges,
/// simulates and preprocesses each shot (in parallel, independent of
/// scheduling) and assigns a seeded 80/20 train/test split. Shots that come
/// out empty or off-sensor are replaced by fresh draws.
pub fn sample_dataset(
    wp: WorkingPoint,
    n_shots: usize,
    seed: u64,
    options: &GenOptions,
) -> Result<Dataset> {
    if n_shots == 0 {
        return Err(Error::Input("n_shots must be positive".into()));
    }
    let sim = options.simulator(wp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 21));
    let mut seen = HashSet::new();
    let mut kept: Vec<(PhaseVector, ScreenImage)> = Vec::with_capacity(n_shots);
    let mut attempts = 0u64;
    let budget = 4 * n_shots as u64 + 64;
    while kept.len() < n_shots {
        let mut candidates = Vec::with_capacity(n_shots - kept.len());
        while candidates.len() < n_shots - kept.len() {
            let phases = draw_phases(wp, &mut rng);
            let key: Vec<u64> = phases.to_vec().iter().map(|p| p.to_bits()).collect();
            if seen.insert(key) {
                candidates.push((phases, sub_seed(seed, 1_000 + attempts)));
                attempts += 1;
            }
        }
        if attempts > budget {
            return Err(Error::Generation(format!(
                "too many rejected shots for {wp} on this screen"
            )));
        }
        let images: Vec<Result<ScreenImage>> = candidates
            .par_iter()
            .map(|(p, s)| sim.shot(p, *s))
            .collect();
        for ((phases, _), img) in candidates.into_iter().zip(images) {
            match img {
                Ok(img) => kept.push((phases, img)),
                Err(Error::EmptyImage | Error::Generation(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }

    let mut order: Vec<usize> = (0..n_shots).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, 22)));
    let n_train = (n_shots as f64 * TRAIN_FRACTION).round() as usize;
    let mut split = vec![Split::Test; n_shots];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }
    let (height, width) = options.geometry.output_dims();
    Ok(Dataset {
        working_point: wp,
        height,
        width,
        calibration: options.geometry.output_calibration(),
        shots: kept
            .into_iter()
            .zip(split)
            .map(|((phases, image), split)| Shot {
                phases,
                image,
                split,
            })
            .collect(),
    })
}
