use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::preprocess::Screen;
use super::{PhaseVector, ScreenGeometry, ScreenImage, WorkingPoint};
use crate::error::{Error, Result};
use crate::model::sub_seed;

/// Magnitudes of the per-shot disturbances that are not part of the model input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    /// RMS bunch arrival time jitter (ps).
    pub arrival_ps: f64,
    /// RMS relative bunch charge jitter.
    pub charge_rel: f64,
    /// RMS beam pointing jitter on the screen (raw pixels, both axes).
    pub pointing_px: f64,
    /// RMS relative A1 amplitude jitter.
    pub a1_amplitude_rel: f64,
    /// RMS camera read-out noise (raw intensity units).
    pub readout_noise: f64,
}

impl JitterParams {
    pub fn none() -> Self {
        Self {
            arrival_ps: 0.0,
            charge_rel: 0.0,
            pointing_px: 0.0,
            a1_amplitude_rel: 0.0,
            readout_noise: 0.0,
        }
    }
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            arrival_ps: 0.12,
            charge_rel: 0.02,
            pointing_px: 0.5,
            a1_amplitude_rel: 1.0e-4,
            readout_noise: 0.002,
        }
    }
}

/// One realisation of the hidden disturbances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HiddenJitter {
    pub arrival_ps: f64,
    pub charge_rel: f64,
    /// (rows, columns) in raw pixels.
    pub pointing_px: (f64, f64),
    pub a1_amplitude_rel: f64,
}

impl HiddenJitter {
    pub fn draw(params: &JitterParams, rng: &mut impl Rng) -> Self {
        let mut n = || rng.sample::<f64, _>(StandardNormal);
        Self {
            arrival_ps: params.arrival_ps * n(),
            charge_rel: params.charge_rel * n(),
            pointing_px: (params.pointing_px * n(), params.pointing_px * n()),
            a1_amplitude_rel: params.a1_amplitude_rel * n(),
        }
    }
}

/// Machine constants of the synthetic injector. Reference phases are arbitrary
/// constants: A1 on crest, AH1 at zero crossing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamlineParams {
    pub reference_energy_mev: f64,
    pub gun_energy_mev: f64,
    pub v_a1_mev: f64,
    /// Zero switches AH1 off.
    pub v_ah1_mev: f64,
    pub rf_frequency_ghz: f64,
    pub phi_gun_ref_deg: f64,
    pub phi_a1_ref_deg: f64,
    pub phi_ah1_ref_deg: f64,
    /// RMS bunch length at nominal gun phase (ps).
    pub bunch_length_ps: f64,
    /// Quadratic distortion of the Gaussian time profile.
    pub bunch_skew: f64,
    /// Relative bunch-length change per degree of gun phase.
    pub length_per_gun_deg: f64,
    /// Arrival-time shift per degree of gun phase (ps).
    pub tof_ps_per_gun_deg: f64,
    pub initial_chirp_mev_per_ps: f64,
    pub slice_spread_mev: f64,
    /// Extra slice spread in the bunch head, relative.
    pub head_spread_gain: f64,
    pub charge_pc: f64,
    pub particles: usize,
    /// Point-spread RMS in raw pixels.
    pub psf_sigma_px: f64,
    /// Peak level of the signal before background is added.
    pub peak_level: f64,
    /// Largest tolerated fraction of particles landing off the sensor.
    pub max_loss_fraction: f64,
    pub jitter: JitterParams,
}

impl BeamlineParams {
    pub fn for_working_point(wp: WorkingPoint) -> Self {
        let mut p = Self {
            reference_energy_mev: 130.0,
            gun_energy_mev: 6.5,
            v_a1_mev: 123.5,
            v_ah1_mev: 3.0,
            rf_frequency_ghz: 1.3,
            phi_gun_ref_deg: 0.0,
            phi_a1_ref_deg: 0.0,
            phi_ah1_ref_deg: -90.0,
            bunch_length_ps: 2.0,
            bunch_skew: 0.12,
            length_per_gun_deg: 0.03,
            tof_ps_per_gun_deg: 0.7,
            initial_chirp_mev_per_ps: 0.02,
            slice_spread_mev: 0.05,
            head_spread_gain: 1.5,
            charge_pc: 250.0,
            particles: 200_000,
            psf_sigma_px: 1.0,
            peak_level: 0.9,
            max_loss_fraction: 0.05,
            jitter: JitterParams::default(),
        };
        if wp == WorkingPoint::Wp2 {
            p.v_ah1_mev = 0.0;
        }
        p.balance_a1();
        p
    }

    fn omega(&self) -> f64 {
        // rad per ps
        2.0 * std::f64::consts::PI * self.rf_frequency_ghz * 1e-3
    }

    fn bunch_length(&self, gun_deg: f64) -> f64 {
        self.bunch_length_ps * (1.0 + self.length_per_gun_deg * gun_deg)
    }

    /// Maps a standard normal draw onto the (skewed) time profile.
    fn profile_time(&self, z: f64, sigma: f64) -> f64 {
        sigma * (z + self.bunch_skew * (z * z - 1.0))
    }

    /// Energy of a particle at bunch time `t0` arriving `arrival` ps late,
    /// without the uncorrelated spread.
    fn particle_energy(&self, phases: &PhaseVector, t0: f64, arrival: f64, a1_scale: f64) -> f64 {
        let w = self.omega();
        let t = t0 + arrival;
        let gun =
            self.gun_energy_mev * ((self.phi_gun_ref_deg + phases.gun).to_radians() + w * t0).cos();
        let a1 = self.v_a1_mev
            * a1_scale
            * ((self.phi_a1_ref_deg + phases.a1).to_radians() + w * t).cos();
        let ah1 = match phases.ah1 {
            Some(p) if self.v_ah1_mev != 0.0 => {
                self.v_ah1_mev * ((self.phi_ah1_ref_deg + p).to_radians() + 3.0 * w * t).cos()
            }
            _ => 0.0,
        };
        gun + self.initial_chirp_mev_per_ps * t0 + a1 + ah1
    }

    /// Bunch-mean energy without jitter, by quadrature over the time profile.
    pub fn expected_energy(&self, phases: &PhaseVector) -> f64 {
        self.expect(phases, |e| e)
    }

    fn expect(&self, phases: &PhaseVector, f: impl Fn(f64) -> f64) -> f64 {
        const STEPS: usize = 4000;
        const LIM: f64 = 8.0;
        let sigma = self.bunch_length(phases.gun);
        let arrival = self.tof_ps_per_gun_deg * phases.gun;
        let h = 2.0 * LIM / STEPS as f64;
        let norm = (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = 0.0;
        for i in 0..=STEPS {
            let z = -LIM + h * i as f64;
            let w = if i == 0 || i == STEPS { 0.5 } else { 1.0 };
            let t0 = self.profile_time(z, sigma);
            acc +=
                w * (-0.5 * z * z).exp() / norm * f(self.particle_energy(phases, t0, arrival, 1.0));
        }
        acc * h
    }

    /// Solves the (linear) energy-sum equation for the A1 amplitude so that the
    /// bunch-mean energy at zero phases equals the reference energy.
    pub fn balance_a1(&mut self) {
        let phases = if self.v_ah1_mev != 0.0 {
            PhaseVector::wp1(0.0, 0.0, 0.0)
        } else {
            PhaseVector::wp2(0.0, 0.0)
        };
        let mut unit = self.clone();
        unit.v_a1_mev = 0.0;
        let rest = unit.expected_energy(&phases);
        unit.v_a1_mev = 1.0;
        let per_volt = unit.expected_energy(&phases) - rest;
        self.v_a1_mev = (self.reference_energy_mev - rest) / per_volt;
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Generation("zero macro-particles requested".into()));
        }
        let positive = [
            self.bunch_length_ps,
            self.rf_frequency_ghz,
            self.charge_pc,
            self.peak_level,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.psf_sigma_px < 0.0 {
            return Err(Error::Config("beamline constants must be positive".into()));
        }
        if self.bunch_skew.abs() >= 0.5 || self.peak_level > 1.0 {
            return Err(Error::Config(
                "bunch skew must be below 0.5 and peak level at most 1".into(),
            ));
        }
        Ok(())
    }
}

/// Output of one simulated shot before preprocessing.
#[derive(Clone, Debug)]
pub struct RawShot {
    pub image: ScreenImage,
    /// Macro-particle histogram on the raw grid.
    pub counts: Vec<u32>,
    pub survivors: usize,
    /// Charge (pC) carried by one macro-particle.
    pub particle_charge_pc: f64,
    pub hidden: HiddenJitter,
}

impl RawShot {
    /// Deposited charge before point-spread and peak normalisation.
    pub fn deposited_charge_pc(&self) -> f64 {
        self.counts.iter().map(|&c| c as f64).sum::<f64>() * self.particle_charge_pc
    }
}

const BACKGROUND_SEED: u64 = 0x00B4_C6A0_0D5E_ED01;
const BACKGROUND_LEVEL: f64 = 0.03;

/// Phase-to-image generator for one working point and screen geometry.
#[derive(Clone, Debug)]
pub struct Simulator {
    params: BeamlineParams,
    screen: Screen,
}

impl Simulator {
    pub fn new(params: BeamlineParams, geometry: ScreenGeometry) -> Result<Self> {
        params.validate()?;
        geometry.validate()?;
        let background = background_frame(&geometry);
        Ok(Self {
            params,
            screen: Screen::new(geometry, background)?,
        })
    }

    pub fn params(&self) -> &BeamlineParams {
        &self.params
    }

    pub fn screen(&self) -> &Screen {
        &self.screen
    }

    pub fn geometry(&self) -> &ScreenGeometry {
        self.screen.geometry()
    }

    /// Simulates a shot; hidden jitter is drawn from `seed`.
    pub fn simulate_shot(&self, phases: &PhaseVector, seed: u64) -> Result<RawShot> {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 11));
        let hidden = HiddenJitter::draw(&self.params.jitter, &mut rng);
        self.simulate_with_jitter(phases, seed, &hidden)
    }

    /// Simulates a shot with an explicit jitter realisation. `seed` drives the
    /// macro-particle sampling and read-out noise.
    pub fn simulate_with_jitter(
        &self,
        phases: &PhaseVector,
        seed: u64,
        hidden: &HiddenJitter,
    ) -> Result<RawShot> {
        let p = &self.params;
        let g = self.screen.geometry();
        let (rows, cols) = g.raw;
        let cal = g.raw_calibration;
        let sigma_t = p.bunch_length(phases.gun);
        if !(sigma_t > 0.0) {
            return Err(Error::Generation(format!(
                "non-positive bunch length at gun phase {}",
                phases.gun
            )));
        }
        let arrival = p.tof_ps_per_gun_deg * phases.gun + hidden.arrival_ps;
        let a1_scale = 1.0 + hidden.a1_amplitude_rel;
        let row0 = g.crop_origin.0 as f64 + g.crop.0 as f64 / 2.0 + hidden.pointing_px.0;
        let col0 = g.crop_origin.1 as f64 + g.crop.1 as f64 / 2.0 + hidden.pointing_px.1;

        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 12));
        let mut counts = vec![0u32; rows * cols];
        let mut survivors = 0usize;
        for _ in 0..p.particles {
            let z: f64 = rng.sample(StandardNormal);
            let n: f64 = rng.sample(StandardNormal);
            let t0 = p.profile_time(z, sigma_t);
            let spread = p.slice_spread_mev * (1.0 + p.head_spread_gain * (-z).max(0.0));
            let e = p.particle_energy(phases, t0, arrival, a1_scale) + spread * n;
            let r = (e - p.reference_energy_mev) / cal.energy_per_px_mev + row0;
            let c = (t0 + arrival) / cal.time_per_px_ps + col0;
            if r >= 0.0 && c >= 0.0 && r < rows as f64 && c < cols as f64 {
                counts[r as usize * cols + c as usize] += 1;
                survivors += 1;
            }
        }
        let lost = (p.particles - survivors) as f64 / p.particles as f64;
        if survivors == 0 || lost > p.max_loss_fraction {
            return Err(Error::Generation(format!(
                "{:.1}% of the bunch falls outside the {rows}x{cols} sensor",
                lost * 100.0
            )));
        }

        let particle_charge_pc = p.charge_pc * (1.0 + hidden.charge_rel) / p.particles as f64;
        let mut signal: Vec<f64> = counts
            .iter()
            .map(|&c| c as f64 * particle_charge_pc)
            .collect();
        gaussian_blur(&mut signal, rows, cols, p.psf_sigma_px);
        let peak = signal.iter().copied().fold(0.0, f64::max);
        let scale = p.peak_level / peak;
        let bg = self.screen.background();
        let pixels = signal
            .iter()
            .zip(bg)
            .map(|(&s, &b)| {
                let noise = if p.jitter.readout_noise > 0.0 {
                    p.jitter.readout_noise * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                (s * scale + b as f64 + noise).max(0.0) as f32
            })
            .collect();
        Ok(RawShot {
            image: ScreenImage::new(rows, cols, pixels, cal)?,
            counts,
            survivors,
            particle_charge_pc,
            hidden: *hidden,
        })
    }

    /// Simulates and preprocesses in one go.
    pub fn shot(&self, phases: &PhaseVector, seed: u64) -> Result<ScreenImage> {
        self.screen
            .preprocess(&self.simulate_shot(phases, seed)?.image)
    }
}

fn background_frame(g: &ScreenGeometry) -> Vec<f32> {
    let (rows, cols) = g.raw;
    let mut rng = ChaCha8Rng::seed_from_u64(BACKGROUND_SEED);
    let tau = std::f64::consts::TAU;
    (0..rows * cols)
        .map(|i| {
            let (r, c) = ((i / cols) as f64, (i % cols) as f64);
            let wave = 0.5 + 0.25 * (tau * r / 37.0 + 0.3).sin() * (tau * c / 53.0).sin();
            let grain: f64 = rng.gen_range(0.0..0.25);
            (BACKGROUND_LEVEL * (wave + grain)) as f32
        })
        .collect()
}

/// Separable Gaussian blur with zero boundary, truncated at 4 sigma.
fn gaussian_blur(img: &mut [f64], rows: usize, cols: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let mut tmp = vec![0.0; img.len()];
    for r in 0..rows {
        let line = &img[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let cc = c as isize + j as isize - radius;
                if cc >= 0 && (cc as usize) < cols {
                    acc += k * line[cc as usize];
                }
            }
            tmp[r * cols + c] = acc;
        }
    }
    for c in 0..cols {
        for r in 0..rows {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let rr = r as isize + j as isize - radius;
                if rr >= 0 && (rr as usize) < rows {
                    acc += k * tmp[rr as usize * cols + c];
                }
            }
            img[r * cols + c] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(wp: WorkingPoint, particles: usize) -> Simulator {
        let mut p = BeamlineParams::for_working_point(wp);
        p.particles = particles;
        p.jitter = JitterParams::none();
        Simulator::new(p, ScreenGeometry::desk()).unwrap()
    }

    fn mean_row(counts: &[u32], cols: usize) -> f64 {
        let (mut w, mut s) = (0.0, 0.0);
        for (i, &c) in counts.iter().enumerate() {
            w += c as f64;
            s += c as f64 * (i / cols) as f64;
        }
        s / w
    }

    #[test]
    fn balanced_amplitude_hits_reference_energy() {
        for wp in [WorkingPoint::Wp1, WorkingPoint::Wp2] {
            let p = BeamlineParams::for_working_point(wp);
            let e = p.expected_energy(&PhaseVector::zero(wp));
            assert!((e - 130.0).abs() < 1e-9, "{wp}: {e}");
        }
    }

    #[test]
    fn blur_preserves_interior_mass() {
        let mut img = vec![0.0; 21 * 21];
        img[10 * 21 + 10] = 1.0;
        gaussian_blur(&mut img, 21, 21, 1.0);
        assert!((img.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(img[10 * 21 + 10] > img[10 * 21 + 11]);
    }

    #[test]
    fn reference_shot_is_centred() {
        let sim = quiet(WorkingPoint::Wp1, 50_000);
        let shot = sim
            .simulate_shot(&PhaseVector::zero(WorkingPoint::Wp1), 3)
            .unwrap();
        let g = sim.geometry();
        let centre = g.crop_origin.0 as f64 + g.crop.0 as f64 / 2.0 - 0.5;
        assert!((mean_row(&shot.counts, g.raw.1) - centre).abs() < 0.5);
    }

    #[test]
    fn working_points_share_the_reference_row() {
        let rows: Vec<f64> = [WorkingPoint::Wp1, WorkingPoint::Wp2]
            .into_iter()
            .map(|wp| {
                let sim = quiet(wp, 50_000);
                let shot = sim.simulate_shot(&PhaseVector::zero(wp), 5).unwrap();
                mean_row(&shot.counts, sim.geometry().raw.1)
            })
            .collect();
        assert!((rows[0] - rows[1]).abs() < 1.0, "{rows:?}");
    }

    #[test]
    fn zero_particles_is_a_generation_error() {
        let mut p = BeamlineParams::for_working_point(WorkingPoint::Wp1);
        p.particles = 0;
        assert!(matches!(
            Simulator::new(p, ScreenGeometry::desk()),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn tiny_sensor_is_a_generation_error() {
        let mut g = ScreenGeometry::desk();
        g.raw = (40, 40);
        g.crop = (20, 20);
        g.crop_origin = (10, 10);
        let mut p = BeamlineParams::for_working_point(WorkingPoint::Wp1);
        p.particles = 1000;
        let sim = Simulator::new(p, g).unwrap();
        let err = sim
            .simulate_shot(&PhaseVector::zero(WorkingPoint::Wp1), 0)
            .unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }
}
