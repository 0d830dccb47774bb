//! Speaker-specific linear-network adapters.
//!
//! A Full-LN adapter applies `ĥ = W·h + b` with an unconstrained `k × k`
//! matrix. An LRPD adapter restricts the matrix to `U·V + I` with `U` of
//! shape `k × r` and `V` of shape `r × k`; the identity diagonal is implicit,
//! never stored and never trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{axpy, check_same_shape, check_width, Layer, Matrix, ParamGrads};

/// Half-width of the uniform distribution used for fresh `U` and `V`.
pub const LRPD_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum AdapterKind {
    Full,
    Lrpd { rank: usize },
}

impl AdapterKind {
    pub fn validate(self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::config("adapter width must be at least 1"));
        }
        if let AdapterKind::Lrpd { rank } = self {
            if rank == 0 {
                return Err(Error::config("lrpd rank must be at least 1"));
            }
            if rank >= k {
                return Err(Error::config(format!(
                    "lrpd rank {rank} must be smaller than width {k}"
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdapterKind::Full => write!(f, "full"),
            AdapterKind::Lrpd { rank } => write!(f, "lrpd(r={rank})"),
        }
    }
}

/// Adapter size under the published accounting: `k²` for Full-LN and
/// `k(2r+1)` for LRPD-LN.
pub fn param_count(kind: AdapterKind, k: usize) -> usize {
    match kind {
        AdapterKind::Full => k * k,
        AdapterKind::Lrpd { rank } => k * (2 * rank + 1),
    }
}

/// Number of values actually trained, including every bias.
pub fn trainable_count(kind: AdapterKind, k: usize) -> usize {
    match kind {
        AdapterKind::Full => k * k + k,
        AdapterKind::Lrpd { rank } => 2 * k * rank + k,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullLnAdapter {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl FullLnAdapter {
    pub fn identity(k: usize) -> Self {
        FullLnAdapter {
            w: Matrix::identity(k),
            b: vec![0.0; k],
        }
    }

    pub fn new(w: Matrix, b: Vec<f64>) -> Result<Self> {
        if w.rows() != w.cols() {
            return Err(Error::shape(
                "full-ln transform columns",
                w.rows(),
                w.cols(),
            ));
        }
        if b.len() != w.rows() {
            return Err(Error::shape("full-ln bias length", w.rows(), b.len()));
        }
        Ok(FullLnAdapter { w, b })
    }

    pub fn width(&self) -> usize {
        self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrpdAdapter {
    pub u: Matrix,
    pub v: Matrix,
    pub b: Vec<f64>,
}

impl LrpdAdapter {
    pub fn new(u: Matrix, v: Matrix, b: Vec<f64>) -> Result<Self> {
        let k = b.len();
        let r = u.cols();
        if u.rows() != k {
            return Err(Error::shape("lrpd U rows", k, u.rows()));
        }
        if v.rows() != r {
            return Err(Error::shape("lrpd V rows", r, v.rows()));
        }
        if v.cols() != k {
            return Err(Error::shape("lrpd V columns", k, v.cols()));
        }
        AdapterKind::Lrpd { rank: r }.validate(k)?;
        Ok(LrpdAdapter { u, v, b })
    }

    pub fn width(&self) -> usize {
        self.b.len()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    /// `U·V + I`, for inspection and testing only.
    pub fn materialize(&self) -> Matrix {
        let mut w = self.u.matmul(&self.v).expect("consistent lrpd shapes");
        for i in 0..self.width() {
            w[(i, i)] += 1.0;
        }
        w
    }
}

/// An adapter installed in a model slot.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Full(FullLnAdapter),
    Lrpd(LrpdAdapter),
}

impl Adapter {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Full(_) => AdapterKind::Full,
            Adapter::Lrpd(a) => AdapterKind::Lrpd { rank: a.rank() },
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Adapter::Full(a) => a.width(),
            Adapter::Lrpd(a) => a.width(),
        }
    }
}

/// Fresh adapter: Full-LN starts at exactly `W = I, b = 0`; LRPD starts with
/// `U, V ~ uniform(-0.01, 0.01)` drawn from `seed` and `b = 0`.
pub fn init_adapter(kind: AdapterKind, k: usize, seed: u64) -> Result<Adapter> {
    kind.validate(k)?;
    Ok(match kind {
        AdapterKind::Full => Adapter::Full(FullLnAdapter::identity(k)),
        AdapterKind::Lrpd { rank } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = Matrix::uniform(k, rank, LRPD_INIT_SCALE, &mut rng);
            let v = Matrix::uniform(rank, k, LRPD_INIT_SCALE, &mut rng);
            Adapter::Lrpd(LrpdAdapter {
                u,
                v,
                b: vec![0.0; k],
            })
        }
    })
}

pub struct AdapterCache {
    x: Matrix,
    /// `V·h` per frame; empty for Full-LN.
    projected: Matrix,
}

impl Layer for FullLnAdapter {
    type Cache = AdapterCache;

    fn input_dim(&self) -> usize {
        self.width()
    }

    fn output_dim(&self) -> usize {
        self.width()
    }

    fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, AdapterCache)> {
        check_width("full-ln input", x, self.width())?;
        let mut y = Matrix::zeros(x.rows(), self.width());
        for t in 0..x.rows() {
            let out = y.row_mut(t);
            out.copy_from_slice(&self.b);
            self.w.matvec_add(x.row(t), out);
        }
        Ok((
            y,
            AdapterCache {
                x: x.clone(),
                projected: Matrix::zeros(0, 0),
            },
        ))
    }

    fn backward_cached(&self, cache: &AdapterCache, dy: &Matrix) -> Result<(Matrix, ParamGrads)> {
        check_same_shape("full-ln upstream gradient", &cache.x, dy)?;
        let k = self.width();
        let mut dx = Matrix::zeros(dy.rows(), k);
        let mut dw = Matrix::zeros(k, k);
        let mut db = vec![0.0; k];
        for t in 0..dy.rows() {
            let g = dy.row(t);
            dw.add_outer(1.0, g, cache.x.row(t));
            axpy(1.0, g, &mut db);
            self.w.matvec_t_add(g, dx.row_mut(t));
        }
        Ok((dx, vec![dw.into_vec(), db]))
    }

    fn param_blocks(&self) -> Vec<(String, &[f64])> {
        vec![("w".into(), self.w.as_slice()), ("b".into(), &self.b)]
    }

    fn param_blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("w".into(), self.w.as_mut_slice()),
            ("b".into(), &mut self.b),
        ]
    }
}

impl Layer for LrpdAdapter {
    type Cache = AdapterCache;

    fn input_dim(&self) -> usize {
        self.width()
    }

    fn output_dim(&self) -> usize {
        self.width()
    }

    fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, AdapterCache)> {
        check_width("lrpd input", x, self.width())?;
        let r = self.rank();
        let mut projected = Matrix::zeros(x.rows(), r);
        let mut y = Matrix::zeros(x.rows(), self.width());
        for t in 0..x.rows() {
            let h = x.row(t);
            self.v.matvec_into(h, projected.row_mut(t));
            let out = y.row_mut(t);
            out.copy_from_slice(&self.b);
            self.u.matvec_add(projected.row(t), out);
            axpy(1.0, h, out);
        }
        Ok((
            y,
            AdapterCache {
                x: x.clone(),
                projected,
            },
        ))
    }

    fn backward_cached(&self, cache: &AdapterCache, dy: &Matrix) -> Result<(Matrix, ParamGrads)> {
        check_same_shape("lrpd upstream gradient", &cache.x, dy)?;
        let k = self.width();
        let r = self.rank();
        let mut dx = Matrix::zeros(dy.rows(), k);
        let mut du = Matrix::zeros(k, r);
        let mut dv = Matrix::zeros(r, k);
        let mut db = vec![0.0; k];
        let mut dp = vec![0.0; r];
        for t in 0..dy.rows() {
            let g = dy.row(t);
            du.add_outer(1.0, g, cache.projected.row(t));
            dp.iter_mut().for_each(|v| *v = 0.0);
            self.u.matvec_t_add(g, &mut dp);
            dv.add_outer(1.0, &dp, cache.x.row(t));
            axpy(1.0, g, &mut db);
            let dxr = dx.row_mut(t);
            dxr.copy_from_slice(g);
            self.v.matvec_t_add(&dp, dxr);
        }
        Ok((dx, vec![du.into_vec(), dv.into_vec(), db]))
    }

    fn param_blocks(&self) -> Vec<(String, &[f64])> {
        vec![
            ("u".into(), self.u.as_slice()),
            ("v".into(), self.v.as_slice()),
            ("b".into(), &self.b),
        ]
    }

    fn param_blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("u".into(), self.u.as_mut_slice()),
            ("v".into(), self.v.as_mut_slice()),
            ("b".into(), &mut self.b),
        ]
    }
}

impl Layer for Adapter {
    type Cache = AdapterCache;

    fn input_dim(&self) -> usize {
        self.width()
    }

    fn output_dim(&self) -> usize {
        self.width()
    }

    fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, AdapterCache)> {
        match self {
            Adapter::Full(a) => a.forward_cached(x),
            Adapter::Lrpd(a) => a.forward_cached(x),
        }
    }

    fn backward_cached(&self, cache: &AdapterCache, dy: &Matrix) -> Result<(Matrix, ParamGrads)> {
        match self {
            Adapter::Full(a) => a.backward_cached(cache, dy),
            Adapter::Lrpd(a) => a.backward_cached(cache, dy),
        }
    }

    fn param_blocks(&self) -> Vec<(String, &[f64])> {
        match self {
            Adapter::Full(a) => a.param_blocks(),
            Adapter::Lrpd(a) => a.param_blocks(),
        }
    }

    fn param_blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        match self {
            Adapter::Full(a) => a.param_blocks_mut(),
            Adapter::Lrpd(a) => a.param_blocks_mut(),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::nn::grad_check;

    fn naive_affine(w: &Matrix, b: &[f64], x: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(x.rows(), w.rows());
        for t in 0..x.rows() {
            for i in 0..w.rows() {
                let mut acc = b[i];
                for j in 0..w.cols() {
                    acc += w[(i, j)] * x[(t, j)];
                }
                y[(t, i)] = acc;
            }
        }
        y
    }

    fn random_lrpd(k: usize, r: usize, seed: u64) -> LrpdAdapter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LrpdAdapter::new(
            Matrix::uniform(k, r, 0.5, &mut rng),
            Matrix::uniform(r, k, 0.5, &mut rng),
            (0..k).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fresh_full_is_exact_identity() {
        let a = init_adapter(AdapterKind::Full, 4, 0).unwrap();
        let x = Matrix::uniform(7, 4, 3.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a.forward(&x).unwrap(), x);
    }

    #[test]
    fn full_hand_arithmetic() {
        let a = FullLnAdapter::new(
            Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap(),
            vec![1.0, 1.0],
        )
        .unwrap();
        let y = a
            .forward(&Matrix::from_rows(&[[2.0, 3.0]]).unwrap())
            .unwrap();
        assert_eq!(y.as_slice(), &[4.0, 3.0]);
    }

    #[test]
    fn full_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = FullLnAdapter::new(
            Matrix::uniform(8, 8, 1.0, &mut rng),
            (0..8).map(|i| i as f64 * 0.1).collect(),
        )
        .unwrap();
        let x = Matrix::uniform(6, 8, 1.0, &mut rng);
        assert!(
            a.forward(&x)
                .unwrap()
                .max_abs_diff(&naive_affine(&a.w, &a.b, &x))
                < 1e-12
        );
    }

    #[test]
    fn lrpd_with_zero_u_is_identity() {
        let mut a = random_lrpd(6, 2, 3);
        a.u = Matrix::zeros(6, 2);
        a.b = vec![0.0; 6];
        let x = Matrix::uniform(4, 6, 2.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a.forward(&x).unwrap(), x);
    }

    #[test]
    fn lrpd_hand_arithmetic() {
        let a = LrpdAdapter::new(
            Matrix::from_rows(&[[1.0], [0.0]]).unwrap(),
            Matrix::from_rows(&[[1.0, 1.0]]).unwrap(),
            vec![0.0, 0.0],
        )
        .unwrap();
        let y = a
            .forward(&Matrix::from_rows(&[[2.0, 3.0]]).unwrap())
            .unwrap();
        assert_eq!(y.as_slice(), &[7.0, 3.0]);
    }

    #[test]
    fn lrpd_equals_materialized_full() {
        let a = random_lrpd(8, 2, 9);
        let x = Matrix::uniform(5, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let full = FullLnAdapter::new(a.materialize(), a.b.clone()).unwrap();
        assert!(
            a.forward(&x)
                .unwrap()
                .max_abs_diff(&full.forward(&x).unwrap())
                < 1e-12
        );
    }

    #[test]
    fn full_input_grad_is_transpose_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = FullLnAdapter::new(Matrix::uniform(3, 3, 1.0, &mut rng), vec![0.0; 3]).unwrap();
        let x = Matrix::uniform(2, 3, 1.0, &mut rng);
        let dy = Matrix::uniform(2, 3, 1.0, &mut rng);
        let (dx, _) = a.backward(&x, &dy).unwrap();
        let wt = a.w.transpose();
        for t in 0..2 {
            let mut expect = vec![0.0; 3];
            wt.matvec_add(dy.row(t), &mut expect);
            for (e, g) in expect.iter().zip(dx.row(t)) {
                assert!((e - g).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let a = Adapter::Lrpd(random_lrpd(5, 2, 1));
        let x = Matrix::uniform(3, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let (dx, g) = a.backward(&x, &Matrix::zeros(3, 5)).unwrap();
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(g.len(), 3, "only U, V and b receive gradients");
    }

    #[test]
    fn lrpd_gradients_match_finite_differences() {
        let a = random_lrpd(6, 2, 12);
        let x = Matrix::uniform(4, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let report = grad_check(&a, &x, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn fresh_lrpd_stays_near_identity() {
        let (k, r) = (8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..100 {
            let a = init_adapter(AdapterKind::Lrpd { rank: r }, k, seed).unwrap();
            let mut h = Matrix::uniform(1, k, 1.0, &mut rng);
            let norm = h.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
            h.as_mut_slice().iter_mut().for_each(|v| *v /= norm);
            let y = a.forward(&h).unwrap();
            let bound = 0.01 * (r * k) as f64 * h.max_abs();
            assert!(y.max_abs_diff(&h) <= bound);
        }
    }

    #[test]
    fn init_rejects_rank_not_below_width() {
        assert!(matches!(
            init_adapter(AdapterKind::Lrpd { rank: 4 }, 4, 0),
            Err(Error::Config(_))
        ));
        assert!(init_adapter(AdapterKind::Lrpd { rank: 0 }, 4, 0).is_err());
        assert!(init_adapter(AdapterKind::Full, 0, 0).is_err());
    }

    #[test]
    fn lrpd_init_is_seeded() {
        let kind = AdapterKind::Lrpd { rank: 3 };
        assert_eq!(
            init_adapter(kind, 10, 4).unwrap(),
            init_adapter(kind, 10, 4).unwrap()
        );
        assert_ne!(
            init_adapter(kind, 10, 4).unwrap(),
            init_adapter(kind, 10, 5).unwrap()
        );
    }

    #[test]
    fn published_counts() {
        assert_eq!(param_count(AdapterKind::Full, 1024), 1_048_576);
        assert_eq!(param_count(AdapterKind::Lrpd { rank: 10 }, 1024), 21_504);
        assert_eq!(param_count(AdapterKind::Lrpd { rank: 10 }, 32), 672);
        assert_eq!(trainable_count(AdapterKind::Full, 32), 32 * 33);
        assert_eq!(trainable_count(AdapterKind::Lrpd { rank: 10 }, 32), 672);
        let ratio = param_count(AdapterKind::Lrpd { rank: 10 }, 1024) as f64
            / param_count(AdapterKind::Full, 1024) as f64;
        assert!(ratio < 0.18);
    }

    #[test]
    fn trainable_count_matches_blocks() {
        let a = init_adapter(AdapterKind::Lrpd { rank: 3 }, 9, 0).unwrap();
        assert_eq!(a.param_count(), trainable_count(a.kind(), 9));
        let f = init_adapter(AdapterKind::Full, 9, 0).unwrap();
        assert_eq!(f.param_count(), trainable_count(f.kind(), 9));
    }
}
