//! Physics observables of a screen image and dataset quality statistics.
//!
//! All extractors normalise by the total intensity, so they are invariant to
//! a positive rescaling of the image.

use serde::{Deserialize, Serialize};

use crate::beamline::{Dataset, ScreenImage};
use crate::error::{Error, Result};

/// Columns holding less than this fraction of the total intensity have no
/// defined slice energy spread.
pub const DEFAULT_SLICE_FLOOR: f64 = 1e-3;

fn total(img: &ScreenImage) -> Result<f64> {
    let t = img.total();
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::EmptyImage);
    }
    Ok(t)
}

fn column_sums(img: &ScreenImage) -> Vec<f64> {
    let mut cols = vec![0.0; img.width];
    for row in img.pixels.chunks(img.width) {
        for (acc, &p) in cols.iter_mut().zip(row) {
            *acc += p as f64;
        }
    }
    cols
}

fn row_sums(img: &ScreenImage) -> Vec<f64> {
    img.pixels
        .chunks(img.width)
        .map(|row| row.iter().map(|&p| p as f64).sum())
        .collect()
}

/// Current per time column in amperes: the column's share of the bunch charge
/// divided by the column duration.
pub fn current_profile(img: &ScreenImage) -> Result<Vec<f64>> {
    let t = total(img)?;
    let scale = img.calibration.charge_pc / img.calibration.time_per_px_ps;
    Ok(column_sums(img)
        .into_iter()
        .map(|c| c / t * scale)
        .collect())
}

/// Row sums scaled to unit maximum.
pub fn energy_spectrum(img: &ScreenImage) -> Result<Vec<f64>> {
    total(img)?;
    let rows = row_sums(img);
    let max = rows.iter().copied().fold(0.0, f64::max);
    Ok(rows.into_iter().map(|r| r / max).collect())
}

/// Row sums scaled to unit area, for comparing peak heights across images.
pub fn energy_density(img: &ScreenImage) -> Result<Vec<f64>> {
    let t = total(img)?;
    Ok(row_sums(img).into_iter().map(|r| r / t).collect())
}

/// Intensity-weighted mean (row, column).
pub fn center_of_mass(img: &ScreenImage) -> Result<(f64, f64)> {
    let t = total(img)?;
    let r: f64 = row_sums(img)
        .iter()
        .enumerate()
        .map(|(i, s)| i as f64 * s)
        .sum();
    let c: f64 = column_sums(img)
        .iter()
        .enumerate()
        .map(|(i, s)| i as f64 * s)
        .sum();
    Ok((r / t, c / t))
}

/// RMS energy spread (MeV) per time column with the default floor.
pub fn slice_energy_spread(img: &ScreenImage) -> Vec<Option<f64>> {
    slice_energy_spread_with_floor(img, DEFAULT_SLICE_FLOOR)
}

/// RMS energy spread per column; `None` where the column carries less than
/// `floor` of the total intensity (or the image is empty).
pub fn slice_energy_spread_with_floor(img: &ScreenImage, floor: f64) -> Vec<Option<f64>> {
    let t = img.total();
    let (w, de) = (img.width, img.calibration.energy_per_px_mev);
    (0..w)
        .map(|c| {
            let (mut s0, mut s1) = (0.0f64, 0.0f64);
            for r in 0..img.height {
                let p = img.pixels[r * w + c] as f64;
                s0 += p;
                s1 += p * r as f64;
            }
            if !(t > 0.0) || s0 <= 0.0 || s0 < floor * t {
                return None;
            }
            let mean = s1 / s0;
            let var: f64 = (0..img.height)
                .map(|r| img.pixels[r * w + c] as f64 * (r as f64 - mean).powi(2))
                .sum::<f64>()
                / s0;
            Some(de * var.sqrt())
        })
        .collect()
}

/// Mean absolute discrete Laplacian over interior pixels; a measure of
/// high-frequency content (lower means blurrier).
pub fn mean_abs_laplacian(img: &ScreenImage) -> f64 {
    let (h, w) = (img.height, img.width);
    if h < 3 || w < 3 {
        return 0.0;
    }
    let p = |r: usize, c: usize| img.pixels[r * w + c] as f64;
    let mut acc = 0.0;
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            acc += (4.0 * p(r, c) - p(r - 1, c) - p(r + 1, c) - p(r, c - 1) - p(r, c + 1)).abs();
        }
    }
    acc / ((h - 2) * (w - 2)) as f64
}

/// The observables compared between measured and predicted images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpsSummary {
    pub current_profile: Vec<f64>,
    pub energy_spectrum: Vec<f64>,
    pub slice_sigma_e: Vec<Option<f64>>,
    pub center_of_mass: (f64, f64),
}

impl LpsSummary {
    pub fn of(img: &ScreenImage) -> Result<Self> {
        Ok(Self {
            current_profile: current_profile(img)?,
            energy_spectrum: energy_spectrum(img)?,
            slice_sigma_e: slice_energy_spread(img),
            center_of_mass: center_of_mass(img)?,
        })
    }

    /// Current-weighted mean slice spread over columns where it is defined.
    pub fn mean_slice_spread(&self) -> Option<f64> {
        let (mut w, mut s) = (0.0, 0.0);
        for (i, sig) in self.current_profile.iter().zip(&self.slice_sigma_e) {
            if let Some(sig) = sig {
                w += i;
                s += i * sig;
            }
        }
        (w > 0.0).then(|| s / w)
    }

    /// Per-column CSV: column, time_ps, current_a, sigma_e_mev (blank if undefined).
    pub fn profile_csv(&self, time_per_px_ps: f64) -> String {
        let mut out = String::from("column,time_ps,current_a,sigma_e_mev\n");
        for (k, (i, s)) in self
            .current_profile
            .iter()
            .zip(&self.slice_sigma_e)
            .enumerate()
        {
            let s = s.map(|v| v.to_string()).unwrap_or_default();
            out += &format!("{k},{},{i},{s}\n", k as f64 * time_per_px_ps);
        }
        out
    }

    /// Per-row CSV: row, energy_offset_mev, spectrum.
    pub fn spectrum_csv(&self, energy_per_px_mev: f64) -> String {
        let mut out = String::from("row,energy_offset_mev,spectrum\n");
        let centre = (self.energy_spectrum.len() as f64 - 1.0) / 2.0;
        for (r, v) in self.energy_spectrum.iter().enumerate() {
            out += &format!("{r},{},{v}\n", (r as f64 - centre) * energy_per_px_mev);
        }
        out
    }
}

/// Differences between a reference image and a prediction of it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Largest absolute current difference over all columns (A).
    pub current_max_error_a: f64,
    /// Peak of the area-normalised energy spectrum, prediction over reference.
    pub spectrum_peak_ratio: f64,
    /// Current-weighted mean slice spread, prediction over reference.
    pub sigma_e_ratio: Option<f64>,
}

pub fn compare(reference: &ScreenImage, prediction: &ScreenImage) -> Result<Comparison> {
    if (reference.height, reference.width) != (prediction.height, prediction.width) {
        return Err(Error::shape(
            "compare",
            &[reference.height, reference.width],
            &[prediction.height, prediction.width],
        ));
    }
    let (a, b) = (current_profile(reference)?, current_profile(prediction)?);
    let current_max_error_a = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let peak = |img| energy_density(img).map(|d| d.into_iter().fold(0.0, f64::max));
    let spectrum_peak_ratio = peak(prediction)? / peak(reference)?;
    let sa = LpsSummary::of(reference)?.mean_slice_spread();
    let sb = LpsSummary::of(prediction)?.mean_slice_spread();
    let sigma_e_ratio = match (sa, sb) {
        (Some(x), Some(y)) if x > 0.0 => Some(y / x),
        _ => None,
    };
    Ok(Comparison {
        current_max_error_a,
        spectrum_peak_ratio,
        sigma_e_ratio,
    })
}

/// Minimum Euclidean distance from each vector to all others (brute force).
pub fn min_phase_distances(phases: &[Vec<f64>]) -> Vec<f64> {
    (0..phases.len())
        .map(|i| {
            phases
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| {
                    phases[i]
                        .iter()
                        .zip(q)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Bounding box of per-shot centres of mass, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComBox {
    pub row_min: f64,
    pub row_max: f64,
    pub col_min: f64,
    pub col_max: f64,
}

impl ComBox {
    /// (horizontal, vertical) extent.
    pub fn extent(&self) -> (f64, f64) {
        (self.col_max - self.col_min, self.row_max - self.row_min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub shots: usize,
    pub min_distances: Vec<f64>,
    pub smallest_min_distance: f64,
    pub duplicate: bool,
    pub centers_of_mass: Vec<(f64, f64)>,
    pub com_box: ComBox,
    /// (columns, rows) spanned by the centres of mass.
    pub com_extent: (f64, f64),
}

/// Phase-coverage and centre-of-mass statistics of a dataset.
pub fn dataset_qa(dataset: &Dataset) -> Result<QaReport> {
    if dataset.len() < 2 {
        return Err(Error::Input("dataset QA needs at least 2 shots".into()));
    }
    let phases: Vec<Vec<f64>> = dataset.shots.iter().map(|s| s.phases.to_vec()).collect();
    let min_distances = min_phase_distances(&phases);
    let smallest = min_distances.iter().copied().fold(f64::INFINITY, f64::min);
    let coms = dataset
        .shots
        .iter()
        .map(|s| center_of_mass(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let mut b = ComBox {
        row_min: f64::INFINITY,
        row_max: f64::NEG_INFINITY,
        col_min: f64::INFINITY,
        col_max: f64::NEG_INFINITY,
    };
    for &(r, c) in &coms {
        b.row_min = b.row_min.min(r);
        b.row_max = b.row_max.max(r);
        b.col_min = b.col_min.min(c);
        b.col_max = b.col_max.max(c);
    }
    Ok(QaReport {
        shots: dataset.len(),
        duplicate: smallest == 0.0,
        smallest_min_distance: smallest,
        min_distances,
        centers_of_mass: coms,
        com_extent: b.extent(),
        com_box: b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamline::Calibration;

    fn img(h: usize, w: usize, px: &[(usize, usize, f32)]) -> ScreenImage {
        let mut im = ScreenImage::zeros(h, w, Calibration::CAMERA);
        for &(r, c, v) in px {
            im.set(r, c, v);
        }
        im
    }

    #[test]
    fn two_equal_columns_share_the_charge() {
        let im = img(3, 4, &[(1, 1, 1.0), (2, 2, 1.0)]);
        let i = current_profile(&im).unwrap();
        assert!((i[1] - 125.0 / 0.047).abs() < 1e-9);
        assert!((i[1] - 2659.574).abs() < 1e-3);
        assert_eq!(i[0], 0.0);
        let q: f64 = i.iter().sum::<f64>() * 0.047;
        assert!((q - 250.0).abs() < 1e-9);
    }

    #[test]
    fn single_pixel_observables() {
        let im = img(5, 6, &[(3, 2, 0.7)]);
        assert_eq!(center_of_mass(&im).unwrap(), (3.0, 2.0));
        assert_eq!(energy_spectrum(&im).unwrap(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!((current_profile(&im).unwrap()[2] - 250.0 / 0.047).abs() < 1e-9);
        assert_eq!(slice_energy_spread(&im)[2], Some(0.0));
        assert_eq!(slice_energy_spread(&im)[0], None);
    }

    #[test]
    fn com_of_two_rows_and_uniform_image() {
        let im = img(25, 3, &[(10, 1, 1.0), (20, 1, 1.0)]);
        assert_eq!(center_of_mass(&im).unwrap().0, 15.0);
        let u = ScreenImage::new(4, 7, vec![0.3; 28], Calibration::CAMERA).unwrap();
        assert_eq!(center_of_mass(&u).unwrap(), (1.5, 3.0));
    }

    #[test]
    fn two_point_slice_spread() {
        let im = img(6, 2, &[(1, 0, 1.0), (3, 0, 1.0)]);
        let s = slice_energy_spread(&im)[0].unwrap();
        assert!((s - 0.0031).abs() < 1e-15);
    }

    #[test]
    fn empty_image_is_an_error() {
        let im = ScreenImage::zeros(3, 3, Calibration::CAMERA);
        assert!(matches!(current_profile(&im), Err(Error::EmptyImage)));
        assert!(matches!(center_of_mass(&im), Err(Error::EmptyImage)));
        assert!(slice_energy_spread(&im).iter().all(Option::is_none));
    }

    #[test]
    fn peak_ratio_of_broadened_spectrum() {
        // same area, peak lowered by 20%
        let reference = img(5, 1, &[(2, 0, 1.0)]);
        let prediction = img(5, 1, &[(1, 0, 0.1), (2, 0, 0.8), (3, 0, 0.1)]);
        let c = compare(&reference, &prediction).unwrap();
        assert!((c.spectrum_peak_ratio - 0.8).abs() < 1e-6);
        assert!(c.current_max_error_a.abs() < 1e-6);
    }

    #[test]
    fn csv_layout() {
        let im = img(2, 2, &[(0, 0, 1.0), (1, 0, 1.0)]);
        let s = LpsSummary::of(&im).unwrap();
        let csv = s.profile_csv(0.047);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().ends_with(",0,"));
        assert_eq!(
            s.spectrum_csv(0.0031).lines().nth(1).unwrap(),
            "0,-0.00155,1"
        );
    }

    #[test]
    fn laplacian_of_ramp_and_spike() {
        let ramp = ScreenImage::new(
            3,
            3,
            (0..9).map(|i| (i % 3) as f32).collect(),
            Calibration::CAMERA,
        )
        .unwrap();
        assert_eq!(mean_abs_laplacian(&ramp), 0.0);
        let spike = img(3, 3, &[(1, 1, 1.0)]);
        assert_eq!(mean_abs_laplacian(&spike), 4.0);
    }

    #[test]
    fn three_four_five() {
        let d = min_phase_distances(&[vec![0.0, 0.0, 0.0], vec![3.0, 4.0, 0.0]]);
        assert_eq!(d, vec![5.0, 5.0]);
    }
}
