//! Dense check that slicing an MLP's weights into CC / CG / GG blocks and
//! summing the block outputs gives back the unsliced result.
//!
//! `W1` (`M x H`) is split by columns and `W2` (`H x O`) by the matching rows.
//! Because the activation is elementwise, `A(X W1)` restricted to a column
//! block equals `A(X W1_block)`, so `Y = sum_b A(X W1_b) W2_b`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::SlicingRates;

#[derive(Debug, Error, PartialEq)]
pub enum SliceError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("n_g = {n_g} is outside 0..={tokens}")]
    TokenCountOutOfRange { n_g: usize, tokens: usize },
}

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, SliceError> {
        if data.len() != rows * cols {
            return Err(SliceError::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn column_block(&self, start: usize, end: usize) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, end - start, |i, j| self.get(i, start + j))
    }

    fn row_block(&self, start: usize, end: usize) -> DenseMatrix {
        DenseMatrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Silu,
    /// Tanh approximation.
    Gelu,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Identity, Activation::Silu, Activation::Gelu];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
            }
        }
    }
}

/// Which executor a block product is charged to. Tags never affect values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Executor {
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "CG")]
    Cg,
    #[serde(rename = "GG")]
    Gg,
    /// CC weights run on the GPU for diverted prompt tokens.
    #[serde(rename = "CG'")]
    CgPrime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    Cc,
    Cg,
    Gg,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::Cc, Block::Cg, Block::Gg];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlicedWeights {
    pub rates: SlicingRates,
    /// `[0, b1, b2, H]`: block `k` covers columns `bounds[k]..bounds[k + 1]`.
    pub bounds: [usize; 4],
    pub w1: [DenseMatrix; 3],
    pub w2: [DenseMatrix; 3],
}

impl SlicedWeights {
    pub fn widths(&self) -> [usize; 3] {
        [
            self.bounds[1] - self.bounds[0],
            self.bounds[2] - self.bounds[1],
            self.bounds[3] - self.bounds[2],
        ]
    }

    pub fn model_dim(&self) -> usize {
        self.w1[0].rows
    }
}

/// Column boundaries `floor(r_cc H)` and `floor((r_cc + r_cg) H)`; GG takes
/// the remainder.
pub fn block_bounds(rates: &SlicingRates, hidden: usize) -> [usize; 4] {
    let h = hidden as f64;
    // Tolerance so that e.g. 0.3 * 10 = 2.9999999999999996 still floors to 3.
    let cut = |x: f64| (((x * h) + 1e-9).floor() as usize).min(hidden);
    let b1 = cut(rates.r_cc());
    let b2 = cut(rates.r_cc() + rates.r_cg()).max(b1);
    [0, b1, b2, hidden]
}

pub fn slice_weights(w1: &DenseMatrix, w2: &DenseMatrix, rates: &SlicingRates) -> Result<SlicedWeights, SliceError> {
    if w1.cols != w2.rows {
        return Err(SliceError::ShapeMismatch(format!(
            "W1 is {}x{} but W2 is {}x{}",
            w1.rows, w1.cols, w2.rows, w2.cols
        )));
    }
    let bounds = block_bounds(rates, w1.cols);
    let w1b = |k: usize| w1.column_block(bounds[k], bounds[k + 1]);
    let w2b = |k: usize| w2.row_block(bounds[k], bounds[k + 1]);
    Ok(SlicedWeights {
        rates: *rates,
        bounds,
        w1: [w1b(0), w1b(1), w1b(2)],
        w2: [w2b(0), w2b(1), w2b(2)],
    })
}

/// One block product and the executor it was charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTask {
    pub block: Block,
    pub executor: Executor,
    /// Row range of `X` the product covered.
    pub row_start: usize,
    pub row_end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlicedOutput {
    pub y: DenseMatrix,
    pub tasks: Vec<BlockTask>,
}

/// Adds `A(X[rows] W1_b) W2_b` into `y[rows]`, accumulating in ascending
/// hidden index.
fn accumulate_block(
    x: &DenseMatrix,
    rows: (usize, usize),
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    activation: Activation,
    y: &mut DenseMatrix,
) {
    let width = w1.cols;
    let out = w2.cols;
    let mut z = vec![0.0; width];
    for t in rows.0..rows.1 {
        let xr = x.row(t);
        for (h, zh) in z.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (m, &xv) in xr.iter().enumerate() {
                acc += xv * w1.get(m, h);
            }
            *zh = activation.apply(acc);
        }
        let yr = &mut y.data[t * out..(t + 1) * out];
        for (h, &zh) in z.iter().enumerate() {
            for (o, yo) in yr.iter_mut().enumerate() {
                *yo += zh * w2.get(h, o);
            }
        }
    }
}

fn check_x(x: &DenseMatrix, model_dim: usize, n_g: usize) -> Result<(), SliceError> {
    if x.cols != model_dim {
        return Err(SliceError::ShapeMismatch(format!(
            "X has {} columns, weights expect {model_dim}",
            x.cols
        )));
    }
    if n_g > x.rows {
        return Err(SliceError::TokenCountOutOfRange { n_g, tokens: x.rows });
    }
    Ok(())
}

/// Sliced forward pass, blocks summed in CC, CG, GG order.
pub fn mlp_forward_sliced(
    x: &DenseMatrix,
    sw: &SlicedWeights,
    activation: Activation,
    n_g: usize,
) -> Result<SlicedOutput, SliceError> {
    mlp_forward_sliced_ordered(x, sw, activation, n_g, Block::ALL)
}

/// As [`mlp_forward_sliced`] with an explicit block summation order.
pub fn mlp_forward_sliced_ordered(
    x: &DenseMatrix,
    sw: &SlicedWeights,
    activation: Activation,
    n_g: usize,
    order: [Block; 3],
) -> Result<SlicedOutput, SliceError> {
    check_x(x, sw.model_dim(), n_g)?;
    let t = x.rows;
    let split = t - n_g;
    let mut y = DenseMatrix::zeros(t, sw.w2[0].cols);
    let mut tasks = Vec::new();
    // X1 = first T - n_g rows, X2 = last n_g rows.
    for (rows, diverted) in [((0, split), false), ((split, t), true)] {
        if rows.0 == rows.1 {
            continue;
        }
        for block in order {
            let k = block.index();
            if sw.w1[k].cols == 0 {
                continue;
            }
            let executor = match (block, diverted) {
                (Block::Cc, false) => Executor::Cc,
                (Block::Cc, true) => Executor::CgPrime,
                (Block::Cg, _) => Executor::Cg,
                (Block::Gg, _) => Executor::Gg,
            };
            accumulate_block(x, rows, &sw.w1[k], &sw.w2[k], activation, &mut y);
            tasks.push(BlockTask {
                block,
                executor,
                row_start: rows.0,
                row_end: rows.1,
            });
        }
    }
    Ok(SlicedOutput { y, tasks })
}

/// Unsliced `A(X W1) W2`.
pub fn mlp_forward_reference(
    x: &DenseMatrix,
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    activation: Activation,
) -> Result<DenseMatrix, SliceError> {
    if w1.cols != w2.rows || x.cols != w1.rows {
        return Err(SliceError::ShapeMismatch(format!(
            "X {}x{}, W1 {}x{}, W2 {}x{}",
            x.rows, x.cols, w1.rows, w1.cols, w2.rows, w2.cols
        )));
    }
    let mut y = DenseMatrix::zeros(x.rows, w2.cols);
    accumulate_block(x, (0, x.rows), w1, w2, activation, &mut y);
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..=1.0))
    }

    fn rates(a: f64, b: f64, c: f64) -> SlicingRates {
        SlicingRates::new(a, b, c).unwrap()
    }

    #[test]
    fn widths_follow_floor_rule() {
        let w1 = DenseMatrix::zeros(2, 8);
        let w2 = DenseMatrix::zeros(8, 2);
        assert_eq!(
            slice_weights(&w1, &w2, &rates(0.5, 0.25, 0.25)).unwrap().widths(),
            [4, 2, 2]
        );
        let w1 = DenseMatrix::zeros(2, 10);
        let w2 = DenseMatrix::zeros(10, 2);
        let third = 1.0 / 3.0;
        assert_eq!(
            slice_weights(&w1, &w2, &rates(third, third, 1.0 - 2.0 * third))
                .unwrap()
                .widths(),
            [3, 3, 4]
        );
        let sw = slice_weights(&w1, &w2, &SlicingRates::ALL_CPU).unwrap();
        assert_eq!(sw.widths(), [10, 0, 0]);
        assert_eq!(sw.w1[0], w1);
        assert_eq!(sw.w2[0], w2);
    }

    #[test]
    fn shape_mismatch() {
        let e = slice_weights(
            &DenseMatrix::zeros(2, 3),
            &DenseMatrix::zeros(4, 2),
            &SlicingRates::ALL_GPU,
        );
        assert!(matches!(e, Err(SliceError::ShapeMismatch(_))));
        assert!(DenseMatrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        let sw = slice_weights(
            &DenseMatrix::zeros(3, 4),
            &DenseMatrix::zeros(4, 3),
            &SlicingRates::ALL_GPU,
        )
        .unwrap();
        assert!(matches!(
            mlp_forward_sliced(&DenseMatrix::zeros(2, 5), &sw, Activation::Identity, 0),
            Err(SliceError::ShapeMismatch(_))
        ));
        assert_eq!(
            mlp_forward_sliced(&DenseMatrix::zeros(2, 3), &sw, Activation::Identity, 3),
            Err(SliceError::TokenCountOutOfRange { n_g: 3, tokens: 2 })
        );
    }

    #[test]
    fn identity_matches_reference_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, w1, w2) = (random(&mut rng, 4, 6), random(&mut rng, 6, 8), random(&mut rng, 8, 6));
        let sw = slice_weights(&w1, &w2, &rates(0.5, 0.5, 0.0)).unwrap();
        let reference = mlp_forward_reference(&x, &w1, &w2, Activation::Identity).unwrap();
        for n_g in 0..=4 {
            assert_eq!(
                mlp_forward_sliced(&x, &sw, Activation::Identity, n_g).unwrap().y,
                reference
            );
        }
    }

    #[test]
    fn all_diverted_tokens_carry_cg_prime() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, w1, w2) = (random(&mut rng, 5, 4), random(&mut rng, 4, 7), random(&mut rng, 7, 4));
        let sw = slice_weights(&w1, &w2, &SlicingRates::ALL_CPU).unwrap();
        let out = mlp_forward_sliced(&x, &sw, Activation::Silu, 5).unwrap();
        assert_eq!(out.tasks.len(), 1);
        assert_eq!(out.tasks[0].executor, Executor::CgPrime);
        assert_eq!(out.y, mlp_forward_reference(&x, &w1, &w2, Activation::Silu).unwrap());
    }

    #[test]
    fn block_order_is_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x, w1, w2) = (random(&mut rng, 6, 9), random(&mut rng, 9, 12), random(&mut rng, 12, 5));
        let sw = slice_weights(&w1, &w2, &rates(0.25, 0.5, 0.25)).unwrap();
        let base = mlp_forward_sliced(&x, &sw, Activation::Gelu, 2).unwrap().y;
        let rev = mlp_forward_sliced_ordered(&x, &sw, Activation::Gelu, 2, [Block::Gg, Block::Cg, Block::Cc])
            .unwrap()
            .y;
        assert!(base.max_abs_diff(&rev) <= 1e-12);
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Identity.apply(-2.5), -2.5);
        assert_eq!(Activation::Silu.apply(0.0), 0.0);
        assert!((Activation::Silu.apply(1.0) - 0.7310585786300049).abs() < 1e-15);
        assert!((Activation::Gelu.apply(1.0) - 0.8411919906082768).abs() < 1e-15);
    }
}
