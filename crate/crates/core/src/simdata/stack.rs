use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{apply_shift, project, Image, Rotation, Volume};
use crate::polarfft::ShiftVector;
use crate::{Error, Result};

/// Projection images `h̃_k` with the optional ground truth they were made
/// from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    side: usize,
    images: Vec<Image>,
    pub true_rotations: Option<Vec<Rotation>>,
    pub true_shifts: Option<ShiftVector>,
    pub snr: Option<f64>,
    pub seed: Option<u64>,
}

impl ProjectionStack {
    pub fn new(images: Vec<Image>) -> Result<Self> {
        let side = images
            .first()
            .map(Image::side)
            .ok_or_else(|| Error::invalid("empty projection stack"))?;
        if images.iter().any(|im| im.side() != side) {
            return Err(Error::invalid("projection images differ in size"));
        }
        Ok(ProjectionStack {
            side,
            images,
            true_rotations: None,
            true_shifts: None,
            snr: None,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn image(&self, k: usize) -> &Image {
        &self.images[k]
    }

    /// Population variance over every pixel of the stack.
    pub fn pixel_variance(&self) -> f64 {
        let count = (self.images.len() * self.side * self.side) as f64;
        let mean = self.images.iter().map(Image::sum).sum::<f64>() / count;
        self.images
            .iter()
            .flat_map(|im| im.data().iter())
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / count
    }

    /// Keeps only the images selected by `order` (in that order), permuting
    /// the ground truth with them.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        if order.iter().any(|&i| i >= self.len()) {
            return Err(Error::invalid("reorder index out of range"));
        }
        Ok(ProjectionStack {
            side: self.side,
            images: order.iter().map(|&i| self.images[i].clone()).collect(),
            true_rotations: self
                .true_rotations
                .as_ref()
                .map(|r| order.iter().map(|&i| r[i]).collect()),
            true_shifts: self
                .true_shifts
                .as_ref()
                .map(|s| ShiftVector::new(order.iter().map(|&i| s.as_slice()[i]).collect())),
            snr: self.snr,
            seed: self.seed,
        })
    }
}

/// Adds i.i.d. Gaussian noise with variance `var(signal) / snr`, where the
/// signal variance is taken over all pixels of the clean stack.
pub fn add_noise(stack: &ProjectionStack, snr: f64, seed: u64) -> Result<ProjectionStack> {
    if !(snr > 0.0) || !snr.is_finite() {
        return Err(Error::invalid(format!("snr must be positive, got {snr}")));
    }
    let sigma = (stack.pixel_variance() / snr).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = stack.clone();
    for im in &mut out.images {
        for v in im.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    out.snr = Some(snr);
    out.seed = Some(seed);
    Ok(out)
}

/// Shifts drawn uniformly from `[-max_shift, max_shift]` and made zero-mean
/// per axis. Draws are repeated until every component is within `side/8`.
pub fn random_shifts(n: usize, max_shift: f64, side: usize, seed: u64) -> Result<ShiftVector> {
    let limit = side as f64 / 8.0;
    if !(max_shift >= 0.0 && max_shift <= limit) {
        return Err(Error::invalid(format!(
            "max shift {max_shift} outside [0, side/8 = {limit}]"
        )));
    }
    if max_shift == 0.0 {
        return Ok(ShiftVector::zeros(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let mut s: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-max_shift..=max_shift),
                    rng.random_range(-max_shift..=max_shift),
                ]
            })
            .collect();
        for axis in 0..2 {
            let mean = s.iter().map(|v| v[axis]).sum::<f64>() / n as f64;
            s.iter_mut().for_each(|v| v[axis] -= mean);
        }
        if s.iter().all(|v| v[0].abs() <= limit && v[1].abs() <= limit) {
            return Ok(ShiftVector::new(s));
        }
    }
    Err(Error::invalid("could not draw shifts within side/8"))
}

/// Projects `vol` at every rotation, translates each image by its shift and
/// optionally adds noise at `snr`.
pub fn simulate_stack(
    vol: &Volume,
    rotations: &[Rotation],
    shifts: Option<&ShiftVector>,
    snr: Option<f64>,
    seed: u64,
) -> Result<ProjectionStack> {
    if let Some(s) = shifts {
        if s.len() != rotations.len() {
            return Err(Error::invalid("shift count differs from rotation count"));
        }
    }
    let images = rotations
        .par_iter()
        .enumerate()
        .map(|(k, rot)| {
            let img = project(vol, rot);
            match shifts {
                Some(s) => {
                    let [dx, dy] = s.as_slice()[k];
                    apply_shift(&img, dx, dy)
                }
                None => Ok(img),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stack = ProjectionStack::new(images)?;
    stack.true_rotations = Some(rotations.to_vec());
    stack.true_shifts = Some(shifts.cloned().unwrap_or_else(|| ShiftVector::zeros(rotations.len())));
    stack.seed = Some(seed);
    match snr {
        Some(snr) => add_noise(&stack, snr, seed),
        None => Ok(stack),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdata::{make_phantom, random_rotations, GaussianBlobPhantom};

    fn clean_stack(n: usize, side: usize) -> ProjectionStack {
        let vol = make_phantom(&GaussianBlobPhantom::asymmetric(), side).unwrap();
        let rots = random_rotations(n, 1).unwrap();
        simulate_stack(&vol, &rots, None, None, 0).unwrap()
    }

    #[test]
    fn huge_snr_leaves_images_unchanged() {
        let stack = clean_stack(3, 48);
        let noisy = add_noise(&stack, 1e12, 5).unwrap();
        for (a, b) in stack.images().iter().zip(noisy.images()) {
            assert!(a.max_abs_diff(b) / a.max_abs() < 1e-4);
        }
    }

    #[test]
    fn measured_snr_matches_request() {
        // 24 images of 48² = 55k pixels per run is below the 1e6 contract, so
        // use a cheap synthetic stack with ~1.2e6 pixels instead.
        let side = 64;
        let images: Vec<Image> = (0..300)
            .map(|k| {
                let data = (0..side * side)
                    .map(|i| ((i * 31 + k * 17) % 97) as f64 / 97.0)
                    .collect();
                Image::new(side, data).unwrap()
            })
            .collect();
        let stack = ProjectionStack::new(images).unwrap();
        let noisy = add_noise(&stack, 0.1, 77).unwrap();
        let signal_var = stack.pixel_variance();
        let noise: Vec<f64> = stack
            .images()
            .iter()
            .zip(noisy.images())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| y - x).collect::<Vec<_>>())
            .collect();
        let mean = noise.iter().sum::<f64>() / noise.len() as f64;
        let noise_var = noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / noise.len() as f64;
        let ratio = signal_var / noise_var;
        assert!((0.099..=0.101).contains(&ratio), "snr ratio {ratio}");
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let stack = clean_stack(2, 48);
        let a = add_noise(&stack, 0.5, 3).unwrap();
        let b = add_noise(&stack, 0.5, 3).unwrap();
        assert_eq!(a, b);
        let c = add_noise(&stack, 0.5, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_shifts_are_zero_mean_and_bounded() {
        let s = random_shifts(20, 5.0, 64, 9).unwrap();
        for axis in 0..2 {
            let mean: f64 = s.as_slice().iter().map(|v| v[axis]).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-12);
        }
        assert!(s.as_slice().iter().all(|v| v[0].abs() <= 8.0 && v[1].abs() <= 8.0));
        assert!(random_shifts(4, 9.0, 64, 0).is_err());
    }
}
