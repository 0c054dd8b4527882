//! Synthetic datasets: labeled 2D Gaussian mixtures and simple raster
//! targets for the splat generator.

use serde::{Deserialize, Serialize};

use crate::rng::{lane, stream};
use crate::tensor::{c, Scalar, Tensor};
use crate::{Error, Result};

/// Per-class isotropic Gaussian mixture in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture2d {
    /// `modes[class]` lists that class's component centers.
    pub modes: Vec<Vec<[f64; 2]>>,
    /// Shared isotropic standard deviation.
    pub std: f64,
}

impl Mixture2d {
    /// Two classes, two vertically separated modes each, on opposite sides
    /// of the y axis.
    pub fn two_class_two_mode() -> Self {
        Mixture2d {
            modes: vec![
                vec![[-1.5, -1.5], [-1.5, 1.5]],
                vec![[1.5, -1.5], [1.5, 1.5]],
            ],
            std: 0.3,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.modes.len()
    }

    /// Balanced labeled sample: `per_class` points from each class.
    pub fn sample<T: Scalar>(&self, per_class: usize, seed: u64) -> Result<(Tensor<T>, Vec<usize>)> {
        if self.modes.is_empty() || per_class == 0 {
            return Err(Error::Invalid {
                what: "mixture sample".into(),
                expected: "classes > 0 and per_class > 0".into(),
                got: format!("{} classes, {per_class} per class", self.modes.len()),
            });
        }
        let n = per_class * self.n_classes();
        let mut data = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        let mut rng = stream(seed, &[lane::DATA]);
        for (cls, modes) in self.modes.iter().enumerate() {
            for i in 0..per_class {
                let m = modes[i % modes.len()];
                data.push(c::<T>(m[0]) + c::<T>(self.std) * T::std_normal(&mut rng));
                data.push(c::<T>(m[1]) + c::<T>(self.std) * T::std_normal(&mut rng));
                labels.push(cls);
            }
        }
        Ok((Tensor::from_vec(data, &[n, 2])?, labels))
    }

    /// Sample from a single class.
    pub fn sample_class<T: Scalar>(&self, class: usize, n: usize, seed: u64) -> Result<Tensor<T>> {
        if class >= self.n_classes() {
            return Err(Error::UnknownCondition {
                id: class,
                rows: self.n_classes(),
            });
        }
        let modes = &self.modes[class];
        let mut data = Vec::with_capacity(n * 2);
        let mut rng = stream(seed, &[lane::DATA, class as u64]);
        for i in 0..n {
            let m = modes[i % modes.len()];
            data.push(c::<T>(m[0]) + c::<T>(self.std) * T::std_normal(&mut rng));
            data.push(c::<T>(m[1]) + c::<T>(self.std) * T::std_normal(&mut rng));
        }
        Tensor::from_vec(data, &[n, 2])
    }
}

/// Filled disk on a dark background, shape `[1, h, w]`, values in [0, 1].
/// Used as an editing/rendering target for splat scenes.
pub fn disk_image<T: Scalar>(w: usize, h: usize, cx: f64, cy: f64, radius: f64) -> Tensor<T> {
    let mut data = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let x = (col as f64 + 0.5) / w as f64;
            let y = (row as f64 + 0.5) / h as f64;
            let inside = (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius;
            data.push(c(if inside { 0.9 } else { 0.05 }));
        }
    }
    Tensor::from_vec(data, &[1, h, w]).expect("disk layout")
}
