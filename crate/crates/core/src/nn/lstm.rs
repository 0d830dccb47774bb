use rand::Rng;

use super::{axpy, check_same_shape, check_width, sigmoid, Layer, Matrix, ParamGrads};
use crate::error::{Error, Result};

/// A single-direction LSTM cell.
///
/// Gate pre-activations are stacked in the order `[input, forget, output,
/// candidate]`, so `w_input` is `4h × input_dim`, `w_recurrent` is `4h × h`
/// and `bias` has length `4h`. Gates use the logistic sigmoid, the
/// candidate and the cell output use tanh, and the scan starts from a zero
/// hidden and cell state.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w_input: Matrix,
    pub w_recurrent: Matrix,
    pub bias: Vec<f64>,
    /// Scan right to left when set.
    pub reverse: bool,
}

/// Per-step activations kept for backpropagation through time.
pub struct LstmCache {
    x: Matrix,
    /// Activated gates per frame, `[i, f, o, g]`, width `4h`.
    gates: Matrix,
    cell: Matrix,
    cell_tanh: Matrix,
    hidden: Matrix,
}

impl LstmCell {
    pub fn new(
        w_input: Matrix,
        w_recurrent: Matrix,
        bias: Vec<f64>,
        reverse: bool,
    ) -> Result<Self> {
        let four_h = w_recurrent.rows();
        if four_h % 4 != 0 || w_recurrent.cols() * 4 != four_h {
            return Err(Error::shape(
                "lstm recurrent weight rows",
                w_recurrent.cols() * 4,
                four_h,
            ));
        }
        if w_input.rows() != four_h {
            return Err(Error::shape(
                "lstm input weight rows",
                four_h,
                w_input.rows(),
            ));
        }
        if bias.len() != four_h {
            return Err(Error::shape("lstm bias length", four_h, bias.len()));
        }
        Ok(LstmCell {
            w_input,
            w_recurrent,
            bias,
            reverse,
        })
    }

    /// Uniform(-s, s) init with `s = 1/sqrt(input_dim + hidden)`.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        reverse: bool,
        rng: &mut R,
    ) -> Self {
        let s = 1.0 / ((input_dim + hidden).max(1) as f64).sqrt();
        let w_input = Matrix::uniform(4 * hidden, input_dim, s, rng);
        let w_recurrent = Matrix::uniform(4 * hidden, hidden, s, rng);
        let bias = (0..4 * hidden)
            .map(|_| rng.random_range(-1.0..1.0) * s)
            .collect();
        LstmCell {
            w_input,
            w_recurrent,
            bias,
            reverse,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_recurrent.cols()
    }

    fn order(&self, len: usize) -> Box<dyn Iterator<Item = usize>> {
        if self.reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        }
    }
}

impl Layer for LstmCell {
    type Cache = LstmCache;

    fn input_dim(&self) -> usize {
        self.w_input.cols()
    }

    fn output_dim(&self) -> usize {
        self.hidden()
    }

    fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, LstmCache)> {
        check_width("lstm input", x, self.input_dim())?;
        let h = self.hidden();
        let len = x.rows();
        let mut gates = Matrix::zeros(len, 4 * h);
        let mut cell = Matrix::zeros(len, h);
        let mut cell_tanh = Matrix::zeros(len, h);
        let mut hidden = Matrix::zeros(len, h);
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for t in 0..len {
            gates.row_mut(t).copy_from_slice(&self.bias);
        }
        self.w_input.apply_rows_add(x, &mut gates);
        let w_rec_t = self.w_recurrent.transpose();

        for t in self.order(len) {
            let z = gates.row_mut(t);
            w_rec_t.matvec_t_add(&h_prev, z);
            for v in &mut z[..3 * h] {
                *v = sigmoid(*v);
            }
            for v in &mut z[3 * h..] {
                *v = v.tanh();
            }
            let (ifo, g) = z.split_at(3 * h);
            let c = cell.row_mut(t);
            for j in 0..h {
                c[j] = ifo[h + j] * c_prev[j] + ifo[j] * g[j];
            }
            c_prev.copy_from_slice(c);
            let ct = cell_tanh.row_mut(t);
            for j in 0..h {
                ct[j] = c_prev[j].tanh();
            }
            let hr = hidden.row_mut(t);
            for j in 0..h {
                hr[j] = ifo[2 * h + j] * ct[j];
            }
            h_prev.copy_from_slice(hr);
        }

        Ok((
            hidden.clone(),
            LstmCache {
                x: x.clone(),
                gates,
                cell,
                cell_tanh,
                hidden,
            },
        ))
    }

    fn backward_cached(&self, cache: &LstmCache, dy: &Matrix) -> Result<(Matrix, ParamGrads)> {
        check_same_shape("lstm upstream gradient", &cache.hidden, dy)?;
        let h = self.hidden();
        let len = dy.rows();
        let mut dx = Matrix::zeros(len, self.input_dim());
        let mut dz_all = Matrix::zeros(len, 4 * h);
        let mut dwh_t = Matrix::zeros(h, 4 * h);
        let mut db = vec![0.0; 4 * h];

        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let zeros = vec![0.0; h];

        // Visit steps in the reverse of the scan order; the "previous" step is
        // the one the scan saw just before `t`.
        let steps: Vec<usize> = self.order(len).collect();
        for (k, &t) in steps.iter().enumerate().rev() {
            let prev = if k > 0 { Some(steps[k - 1]) } else { None };
            let c_prev = prev.map_or(&zeros[..], |p| cache.cell.row(p));
            let h_prev = prev.map_or(&zeros[..], |p| cache.hidden.row(p));
            let gate = cache.gates.row(t);
            let (i, rest) = gate.split_at(h);
            let (f, rest) = rest.split_at(h);
            let (o, g) = rest.split_at(h);
            let ct = cache.cell_tanh.row(t);
            let dy_t = dy.row(t);

            for j in 0..h {
                let dh = dy_t[j] + dh_next[j];
                let d_o = dh * ct[j];
                let dc = dh * o[j] * (1.0 - ct[j] * ct[j]) + dc_next[j];
                let d_i = dc * g[j];
                let d_g = dc * i[j];
                let d_f = dc * c_prev[j];
                dc_next[j] = dc * f[j];
                dz[j] = d_i * i[j] * (1.0 - i[j]);
                dz[h + j] = d_f * f[j] * (1.0 - f[j]);
                dz[2 * h + j] = d_o * o[j] * (1.0 - o[j]);
                dz[3 * h + j] = d_g * (1.0 - g[j] * g[j]);
            }

            dwh_t.add_outer(1.0, h_prev, &dz);
            dz_all.row_mut(t).copy_from_slice(&dz);
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            self.w_recurrent.matvec_t_add(&dz, &mut dh_next);
        }

        let mut dwx_t = Matrix::zeros(self.input_dim(), 4 * h);
        for t in 0..len {
            let dz = dz_all.row(t);
            axpy(1.0, dz, &mut db);
            dwx_t.add_outer(1.0, cache.x.row(t), dz);
            self.w_input.matvec_t_add(dz, dx.row_mut(t));
        }
        let (dwx, dwh) = (dwx_t.transpose(), dwh_t.transpose());

        Ok((dx, vec![dwx.into_vec(), dwh.into_vec(), db]))
    }

    fn param_blocks(&self) -> Vec<(String, &[f64])> {
        vec![
            ("w_input".into(), self.w_input.as_slice()),
            ("w_recurrent".into(), self.w_recurrent.as_slice()),
            ("bias".into(), &self.bias),
        ]
    }

    fn param_blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("w_input".into(), self.w_input.as_mut_slice()),
            ("w_recurrent".into(), self.w_recurrent.as_mut_slice()),
            ("bias".into(), &mut self.bias),
        ]
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar per-gate recurrence, written without the stacked-matrix helpers.
    pub(crate) fn scalar_oracle(cell: &LstmCell, x: &Matrix) -> Matrix {
        let h = cell.hidden();
        let n_in = cell.input_dim();
        let len = x.rows();
        let mut out = Matrix::zeros(len, h);
        let mut hp = vec![0.0; h];
        let mut cp = vec![0.0; h];
        let order: Vec<usize> = if cell.reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let mut hn = vec![0.0; h];
            let mut cn = vec![0.0; h];
            for j in 0..h {
                let pre = |gate: usize| {
                    let row = gate * h + j;
                    let mut acc = cell.bias[row];
                    for k in 0..n_in {
                        acc += cell.w_input[(row, k)] * x[(t, k)];
                    }
                    for k in 0..h {
                        acc += cell.w_recurrent[(row, k)] * hp[k];
                    }
                    acc
                };
                let ig = sig(pre(0));
                let fg = sig(pre(1));
                let og = sig(pre(2));
                let cand = pre(3).tanh();
                cn[j] = fg * cp[j] + ig * cand;
                hn[j] = og * cn[j].tanh();
            }
            out.row_mut(t).copy_from_slice(&hn);
            hp = hn;
            cp = cn;
        }
        out
    }

    #[test]
    fn matches_scalar_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for reverse in [false, true] {
            let cell = LstmCell::init(5, 4, reverse, &mut rng);
            let x = Matrix::uniform(3, 5, 1.0, &mut rng);
            let y = cell.forward(&x).unwrap();
            assert!(y.max_abs_diff(&scalar_oracle(&cell, &x)) < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = LstmCell::init(3, 4, false, &mut rng);
        let x = Matrix::uniform(5, 3, 1.0, &mut rng);
        let (dx, g) = cell.backward(&x, &Matrix::zeros(5, 4)).unwrap();
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn inconsistent_blocks_rejected() {
        assert!(LstmCell::new(
            Matrix::zeros(8, 3),
            Matrix::zeros(8, 2),
            vec![0.0; 7],
            false
        )
        .is_err());
        assert!(LstmCell::new(
            Matrix::zeros(4, 3),
            Matrix::zeros(8, 2),
            vec![0.0; 8],
            false
        )
        .is_err());
        assert!(LstmCell::new(
            Matrix::zeros(8, 3),
            Matrix::zeros(8, 2),
            vec![0.0; 8],
            false
        )
        .is_ok());
    }
}
