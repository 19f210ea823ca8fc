//! Fixtures shared by the benchmarks.

use gridgp::{ambient_alpha, eigenspace, ChannelSpec, EigenSpace, GridModel, Quantity, SelectionSet};
use nalgebra::{DMatrix, DVector};

/// Ring of `n` buses with a chord every fifth bus and uneven inertias.
pub fn ring_model(n: usize) -> GridModel {
    let mut l = DMatrix::zeros(n, n);
    let mut line = |a: usize, b: usize, y: f64| {
        l[(a, a)] += y;
        l[(b, b)] += y;
        l[(a, b)] -= y;
        l[(b, a)] -= y;
    };
    for k in 0..n {
        line(k, (k + 1) % n, 1.0 + (k % 3) as f64);
        if k % 5 == 0 && n > 4 {
            line(k, (k + n / 2) % n, 0.5);
        }
    }
    let m = DVector::from_fn(n, |i, _| 0.03 + 0.01 * (i % 4) as f64);
    GridModel::new(m.clone(), &m * 0.5, l, 60.0).unwrap()
}

pub struct Fixture {
    pub model: GridModel,
    pub space: EigenSpace,
    pub alpha: DMatrix<f64>,
}

pub fn fixture(n: usize) -> Fixture {
    let model = ring_model(n);
    let space = eigenspace(&model, None).unwrap();
    let alpha = ambient_alpha(&model, &space, 0.02).unwrap();
    Fixture { model, space, alpha }
}

/// Speed channels on the first `buses` buses over `len` samples at 15 Hz.
pub fn speeds(buses: usize, len: usize, noise: f64) -> SelectionSet {
    let chans = (0..buses).map(|b| ChannelSpec::new(b, Quantity::Speed, noise)).collect();
    SelectionSet::uniform(chans, 0.0, 15.0, len).unwrap()
}
