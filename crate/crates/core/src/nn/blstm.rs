use rand::Rng;

use super::{check_same_shape, check_width, Layer, LstmCache, LstmCell, Matrix, ParamGrads};
use crate::error::{Error, Result};

/// Bidirectional LSTM: per frame output is `[forward_h_t ; backward_h_t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlstmLayer {
    pub forward_cell: LstmCell,
    pub backward_cell: LstmCell,
}

pub struct BlstmCache {
    fwd: LstmCache,
    bwd: LstmCache,
    frames: usize,
}

impl BlstmLayer {
    pub fn new(forward_cell: LstmCell, backward_cell: LstmCell) -> Result<Self> {
        if forward_cell.input_dim() != backward_cell.input_dim() {
            return Err(Error::shape(
                "blstm cell input widths",
                forward_cell.input_dim(),
                backward_cell.input_dim(),
            ));
        }
        if forward_cell.hidden() != backward_cell.hidden() {
            return Err(Error::shape(
                "blstm cell widths",
                forward_cell.hidden(),
                backward_cell.hidden(),
            ));
        }
        if forward_cell.reverse || !backward_cell.reverse {
            return Err(Error::config(
                "blstm cells must scan in opposite directions",
            ));
        }
        Ok(BlstmLayer {
            forward_cell,
            backward_cell,
        })
    }

    /// `output_dim` is the concatenated width and must be even.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, rng: &mut R) -> Result<Self> {
        if output_dim % 2 != 0 || output_dim == 0 {
            return Err(Error::config(format!(
                "blstm width must be even and positive, got {output_dim}"
            )));
        }
        let h = output_dim / 2;
        Ok(BlstmLayer {
            forward_cell: LstmCell::init(input_dim, h, false, rng),
            backward_cell: LstmCell::init(input_dim, h, true, rng),
        })
    }

    fn half(&self) -> usize {
        self.forward_cell.hidden()
    }
}

impl Layer for BlstmLayer {
    type Cache = BlstmCache;

    fn input_dim(&self) -> usize {
        self.forward_cell.input_dim()
    }

    fn output_dim(&self) -> usize {
        2 * self.half()
    }

    fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, BlstmCache)> {
        check_width("blstm input", x, self.input_dim())?;
        let (yf, fwd) = self.forward_cell.forward_cached(x)?;
        let (yb, bwd) = self.backward_cell.forward_cached(x)?;
        let h = self.half();
        let mut y = Matrix::zeros(x.rows(), 2 * h);
        for t in 0..x.rows() {
            let row = y.row_mut(t);
            row[..h].copy_from_slice(yf.row(t));
            row[h..].copy_from_slice(yb.row(t));
        }
        Ok((
            y,
            BlstmCache {
                fwd,
                bwd,
                frames: x.rows(),
            },
        ))
    }

    fn backward_cached(&self, cache: &BlstmCache, dy: &Matrix) -> Result<(Matrix, ParamGrads)> {
        check_same_shape(
            "blstm upstream gradient",
            &Matrix::zeros(cache.frames, self.output_dim()),
            dy,
        )?;
        let h = self.half();
        let mut dyf = Matrix::zeros(dy.rows(), h);
        let mut dyb = Matrix::zeros(dy.rows(), h);
        for t in 0..dy.rows() {
            dyf.row_mut(t).copy_from_slice(&dy.row(t)[..h]);
            dyb.row_mut(t).copy_from_slice(&dy.row(t)[h..]);
        }
        let (mut dx, mut grads) = self.forward_cell.backward_cached(&cache.fwd, &dyf)?;
        let (dxb, gb) = self.backward_cell.backward_cached(&cache.bwd, &dyb)?;
        dx.add_assign(&dxb)?;
        grads.extend(gb);
        Ok((dx, grads))
    }

    fn param_blocks(&self) -> Vec<(String, &[f64])> {
        let mut blocks: Vec<(String, &[f64])> = self
            .forward_cell
            .param_blocks()
            .into_iter()
            .map(|(n, b)| (format!("fwd.{n}"), b))
            .collect();
        blocks.extend(
            self.backward_cell
                .param_blocks()
                .into_iter()
                .map(|(n, b)| (format!("bwd.{n}"), b)),
        );
        blocks
    }

    fn param_blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut blocks: Vec<(String, &mut [f64])> = self
            .forward_cell
            .param_blocks_mut()
            .into_iter()
            .map(|(n, b)| (format!("fwd.{n}"), b))
            .collect();
        blocks.extend(
            self.backward_cell
                .param_blocks_mut()
                .into_iter()
                .map(|(n, b)| (format!("bwd.{n}"), b)),
        );
        blocks
    }
}
