//! 2-D toy distributions standing in for image datasets.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::rng::{normal_vec, Rng};
use crate::numerics::Tensor;

/// Named toy dataset with `[n, 2]` points.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub name: String,
    pub points: Tensor,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `gaussian-ring`: 8 modes equally spaced on the unit circle, per-mode
/// std 0.05. `swiss-roll`: the standard 2-D spiral rescaled to unit RMS
/// radius.
pub fn make_toy_dataset(name: &str, n: usize, rng: &mut Rng) -> Result<ToyDataset> {
    if n < 1 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    let points = match name {
        "gaussian-ring" => {
            let noise = normal_vec(rng, 2 * n);
            let mut data = Vec::with_capacity(2 * n);
            for i in 0..n {
                let k = rng.random_range(0..8u32);
                let angle = std::f64::consts::TAU * k as f64 / 8.0;
                data.push(angle.cos() + 0.05 * noise[2 * i]);
                data.push(angle.sin() + 0.05 * noise[2 * i + 1]);
            }
            Tensor::new(vec![n, 2], data)?
        }
        "swiss-roll" => {
            let mut data = Vec::with_capacity(2 * n);
            let mut sq_radius = 0.0;
            for _ in 0..n {
                let u: f64 = rng.random();
                let theta = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * u);
                data.push(theta * theta.cos());
                data.push(theta * theta.sin());
                sq_radius += theta * theta;
            }
            let rms = (sq_radius / n as f64).sqrt();
            Tensor::new(vec![n, 2], data.iter().map(|v| v / rms).collect())?
        }
        other => {
            return Err(Error::Config(format!("unknown dataset {other:?}")));
        }
    };
    Ok(ToyDataset {
        name: name.to_string(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seed_rng;

    #[test]
    fn ring_is_centered_with_unit_mean_radius() {
        let ds = make_toy_dataset("gaussian-ring", 8000, &mut seed_rng(1)).unwrap();
        let n = ds.len() as f64;
        let (mut mx, mut my, mut mr) = (0.0, 0.0, 0.0);
        for p in ds.points.data().chunks(2) {
            mx += p[0];
            my += p[1];
            mr += (p[0] * p[0] + p[1] * p[1]).sqrt();
        }
        assert!((mx / n).abs() < 0.05 && (my / n).abs() < 0.05);
        let mean_radius = mr / n;
        assert!((0.9..=1.1).contains(&mean_radius), "mean radius {mean_radius}");
    }

    #[test]
    fn swiss_roll_has_unit_rms_radius() {
        let ds = make_toy_dataset("swiss-roll", 4000, &mut seed_rng(2)).unwrap();
        let n = ds.len() as f64;
        let rms: f64 = (ds
            .points
            .data()
            .chunks(2)
            .map(|p| p[0] * p[0] + p[1] * p[1])
            .sum::<f64>()
            / n)
            .sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_name_errors() {
        assert!(make_toy_dataset("checkerboard", 10, &mut seed_rng(3)).is_err());
        assert!(make_toy_dataset("gaussian-ring", 0, &mut seed_rng(3)).is_err());
    }
}
