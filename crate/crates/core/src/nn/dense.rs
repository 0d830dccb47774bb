use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_same_shape, check_width, Layer, Matrix, ParamGrads};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

/// Fully connected layer applied independently to every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

pub struct DenseCache {
    x: Matrix,
    y: Matrix,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("dense bias length", weight.rows(), bias.len()));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    /// Uniform(-s, s) init with `s = 1/sqrt(input_dim)`.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let s = 1.0 / (input_dim.max(1) as f64).sqrt();
        let weight = Matrix::uniform(output_dim, input_dim, s, rng);
        let bias = (0..output_dim)
            .map(|_| rng.random_range(-1.0..1.0) * s)
            .collect();
        DenseLayer {
            weight,
            bias,
            activation,
        }
    }
}

impl Layer for DenseLayer {
    type Cache = DenseCache;

    fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, DenseCache)> {
        check_width("dense input", x, self.input_dim())?;
        let mut y = Matrix::zeros(x.rows(), self.output_dim());
        for t in 0..x.rows() {
            y.row_mut(t).copy_from_slice(&self.bias);
        }
        self.weight.apply_rows_add(x, &mut y);
        if self.activation == Activation::Tanh {
            y.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
        }
        Ok((y.clone(), DenseCache { x: x.clone(), y }))
    }

    fn backward_cached(&self, cache: &DenseCache, dy: &Matrix) -> Result<(Matrix, ParamGrads)> {
        check_same_shape("dense upstream gradient", &cache.y, dy)?;
        let mut dx = Matrix::zeros(cache.x.rows(), self.input_dim());
        let mut dw = Matrix::zeros(self.output_dim(), self.input_dim());
        let mut db = vec![0.0; self.output_dim()];
        let mut dz = vec![0.0; self.output_dim()];
        for t in 0..dy.rows() {
            dz.copy_from_slice(dy.row(t));
            if self.activation == Activation::Tanh {
                for (d, y) in dz.iter_mut().zip(cache.y.row(t)) {
                    *d *= 1.0 - y * y;
                }
            }
            dw.add_outer(1.0, &dz, cache.x.row(t));
            super::axpy(1.0, &dz, &mut db);
            self.weight.matvec_t_add(&dz, dx.row_mut(t));
        }
        Ok((dx, vec![dw.into_vec(), db]))
    }

    fn param_blocks(&self) -> Vec<(String, &[f64])> {
        vec![
            ("weight".into(), self.weight.as_slice()),
            ("bias".into(), &self.bias),
        ]
    }

    fn param_blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("weight".into(), self.weight.as_mut_slice()),
            ("bias".into(), &mut self.bias),
        ]
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn naive_forward(layer: &DenseLayer, x: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(x.rows(), layer.output_dim());
        for t in 0..x.rows() {
            for o in 0..layer.output_dim() {
                let mut acc = layer.bias[o];
                for i in 0..layer.input_dim() {
                    acc += layer.weight[(o, i)] * x[(t, i)];
                }
                y[(t, o)] = match layer.activation {
                    Activation::Tanh => acc.tanh(),
                    Activation::Linear => acc,
                };
            }
        }
        y
    }

    #[test]
    fn identity_linear_is_pass_through() {
        let layer = DenseLayer::new(Matrix::identity(3), vec![0.0; 3], Activation::Linear).unwrap();
        let x = Matrix::from_rows(&[[1.5, -2.25, 3.0], [0.125, 7.0, -0.5]]).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), x);
    }

    #[test]
    fn scalar_affine() {
        let layer = DenseLayer::new(
            Matrix::from_rows(&[[2.0]]).unwrap(),
            vec![1.0],
            Activation::Linear,
        )
        .unwrap();
        let y = layer
            .forward(&Matrix::from_rows(&[[3.0]]).unwrap())
            .unwrap();
        assert_eq!(y.as_slice(), &[7.0]);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for act in [Activation::Tanh, Activation::Linear] {
            let layer = DenseLayer::init(3, 4, act, &mut rng);
            let x = Matrix::uniform(5, 3, 1.0, &mut rng);
            let y = layer.forward(&x).unwrap();
            assert!(y.max_abs_diff(&naive_forward(&layer, &x)) < 1e-12);
        }
    }

    #[test]
    fn wrong_width_names_both_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = DenseLayer::init(3, 4, Activation::Tanh, &mut rng);
        let err = layer.forward(&Matrix::zeros(2, 5)).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('5'), "{err}");
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = DenseLayer::init(3, 2, Activation::Tanh, &mut rng);
        let x = Matrix::uniform(4, 3, 1.0, &mut rng);
        let (dx, grads) = layer.backward(&x, &Matrix::zeros(4, 2)).unwrap();
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
        assert!(grads.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_chain_rule() {
        let layer = DenseLayer::new(
            Matrix::from_rows(&[[2.0]]).unwrap(),
            vec![1.0],
            Activation::Linear,
        )
        .unwrap();
        let (dx, g) = layer
            .backward(
                &Matrix::from_rows(&[[3.0]]).unwrap(),
                &Matrix::from_rows(&[[1.0]]).unwrap(),
            )
            .unwrap();
        assert_eq!(g[0], vec![3.0]);
        assert_eq!(g[1], vec![1.0]);
        assert_eq!(dx.as_slice(), &[2.0]);
    }

    #[test]
    fn mismatched_upstream_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = DenseLayer::init(3, 2, Activation::Tanh, &mut rng);
        let x = Matrix::uniform(4, 3, 1.0, &mut rng);
        assert!(layer.backward(&x, &Matrix::zeros(4, 3)).is_err());
        assert!(layer.backward(&x, &Matrix::zeros(3, 2)).is_err());
    }
}
