//! Affine functions of one variable and their crossings, used to locate the
//! breakpoints of piecewise-linear completion times.

use std::ops::{Add, Mul, Sub};

/// `offset + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Affine {
    pub offset: f64,
    pub slope: f64,
}

impl Affine {
    pub const fn new(offset: f64, slope: f64) -> Self {
        Self { offset, slope }
    }

    pub const fn constant(offset: f64) -> Self {
        Self { offset, slope: 0.0 }
    }

    pub fn at(&self, x: f64) -> f64 {
        self.offset + self.slope * x
    }

    /// `x` where `self(x) == other(x)`, if the lines are not parallel.
    pub fn crossing(&self, other: &Affine) -> Option<f64> {
        let ds = self.slope - other.slope;
        let scale = self.slope.abs().max(other.slope.abs());
        if ds == 0.0 || ds.abs() <= 1e-14 * scale {
            return None;
        }
        let x = (other.offset - self.offset) / ds;
        x.is_finite().then_some(x)
    }
}

impl Add for Affine {
    type Output = Affine;

    fn add(self, rhs: Affine) -> Affine {
        Affine::new(self.offset + rhs.offset, self.slope + rhs.slope)
    }
}

impl Sub for Affine {
    type Output = Affine;

    fn sub(self, rhs: Affine) -> Affine {
        Affine::new(self.offset - rhs.offset, self.slope - rhs.slope)
    }
}

impl Mul<Affine> for f64 {
    type Output = Affine;

    fn mul(self, rhs: Affine) -> Affine {
        Affine::new(self * rhs.offset, self * rhs.slope)
    }
}

/// Stage times as affine functions of one decision variable, valid on an
/// open interval where no rate or token count crosses zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AffineStages {
    pub launch: Affine,
    pub transfer: Affine,
    pub gpu: Affine,
    pub cpu: Affine,
}

/// Which boundary produced an edge point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSource {
    LowerBound,
    /// Just above the lower bound, past the jump where startup and launch
    /// terms switch on.
    AboveLowerBound,
    /// Just below the upper bound, before the jump where a term switches off.
    BelowUpperBound,
    UpperBound,
    LaunchEqTransfer,
    GpuEqTransfer,
    LaunchEqGpu,
    /// Copy-dominated GPU finish meets the CPU finish.
    Case1EqCpu,
    /// GPU-compute-dominated GPU finish meets the CPU finish.
    Case2EqCpu,
    /// Launch-dominated GPU finish meets the CPU finish.
    Case3EqCpu,
}

impl AffineStages {
    /// All interior boundary crossings: the three pairwise stage equalities,
    /// then each closed-form GPU finish against `n_l * t_C`.
    pub fn boundary_roots(&self, n_l: usize) -> Vec<(f64, EdgeSource)> {
        let n = n_l as f64;
        let (l, x, g) = (self.launch, self.transfer, self.gpu);
        let cpu_finish = n * self.cpu;
        let case1 = l + n * x + g;
        let case2 = l + x + n * g;
        let case3 = n * l + x + g;
        [
            (l.crossing(&x), EdgeSource::LaunchEqTransfer),
            (g.crossing(&x), EdgeSource::GpuEqTransfer),
            (l.crossing(&g), EdgeSource::LaunchEqGpu),
            (case1.crossing(&cpu_finish), EdgeSource::Case1EqCpu),
            (case2.crossing(&cpu_finish), EdgeSource::Case2EqCpu),
            (case3.crossing(&cpu_finish), EdgeSource::Case3EqCpu),
        ]
        .into_iter()
        .filter_map(|(root, src)| root.map(|r| (r, src)))
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossings() {
        let a = Affine::new(1.0, 2.0);
        let b = Affine::new(4.0, -1.0);
        assert_eq!(a.crossing(&b), Some(1.0));
        assert_eq!(a.crossing(&Affine::new(0.0, 2.0)), None);
        assert_eq!((a + b).at(2.0), a.at(2.0) + b.at(2.0));
        assert_eq!((3.0 * a).at(1.0), 9.0);
        assert_eq!((a - a).at(7.0), 0.0);
    }

    #[test]
    fn roots_cover_every_boundary() {
        let st = AffineStages {
            launch: Affine::constant(1.0),
            transfer: Affine::new(0.0, 4.0),
            gpu: Affine::new(0.5, 1.0),
            cpu: Affine::new(10.0, -10.0),
        };
        let roots = st.boundary_roots(2);
        assert_eq!(roots.len(), 6);
        for (r, src) in roots {
            let (l, x, g, c) = (st.launch.at(r), st.transfer.at(r), st.gpu.at(r), 2.0 * st.cpu.at(r));
            let (lhs, rhs) = match src {
                EdgeSource::LaunchEqTransfer => (l, x),
                EdgeSource::GpuEqTransfer => (g, x),
                EdgeSource::LaunchEqGpu => (l, g),
                EdgeSource::Case1EqCpu => (l + 2.0 * x + g, c),
                EdgeSource::Case2EqCpu => (l + x + 2.0 * g, c),
                EdgeSource::Case3EqCpu => (2.0 * l + x + g, c),
                _ => unreachable!(),
            };
            assert!((lhs - rhs).abs() < 1e-12, "{src:?}");
        }
    }
}
