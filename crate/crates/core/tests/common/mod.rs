//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};

use isaqn::scenario::{VibrationEvent, WaveformKind, WaveformSpec};

/// Parameters of one point in the key-rate oracle grid.
#[derive(Debug, Clone, Copy)]
pub struct GridPoint {
    pub v_a: f64,
    pub t: f64,
    pub eps: f64,
    pub eta: f64,
    pub v_el: f64,
}

fn omega(modes: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(2 * modes, 2 * modes);
    for k in 0..modes {
        m[(2 * k, 2 * k + 1)] = 1.0;
        m[(2 * k + 1, 2 * k)] = -1.0;
    }
    m
}

/// Symplectic eigenvalues, ascending, from the spectrum of
/// γ^{1/2} Ω γ Ωᵀ γ^{1/2}, whose eigenvalues are ν² with multiplicity two.
pub fn symplectic_eigenvalues(gamma: &DMatrix<f64>) -> Vec<f64> {
    let n = gamma.nrows() / 2;
    let eig = SymmetricEigen::new(gamma.clone());
    let sqrt_d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    let root = &eig.eigenvectors * sqrt_d * eig.eigenvectors.transpose();
    let o = omega(n);
    let m = &root * &o * gamma * o.transpose() * &root;
    let m = (&m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev.chunks(2)
        .map(|p| ((p[0] + p[1]) / 2.0).max(0.0).sqrt())
        .collect()
}

fn two_mode(a: f64, b: f64, c: f64) -> DMatrix<f64> {
    // [[a I, c Z], [c Z, b I]] with Z = diag(1, -1)
    DMatrix::from_row_slice(
        4,
        4,
        &[
            a, 0.0, c, 0.0, //
            0.0, a, 0.0, -c, //
            c, 0.0, b, 0.0, //
            0.0, -c, 0.0, b,
        ],
    )
}

/// Covariance of Alice's EPR mode and Bob's mode after the channel.
pub fn channel_covariance(p: &GridPoint) -> DMatrix<f64> {
    let v = p.v_a + 1.0;
    let chi_line = 1.0 / p.t - 1.0 + p.eps;
    two_mode(v, p.t * (v + chi_line), (p.t * (v * v - 1.0)).sqrt())
}

/// Covariance of (A, F0', G) conditioned on heterodyne detection of Bob's
/// mode after the detector's loss η, with the trusted noise modelled by an
/// EPR pair (F0, G) of variance 1 + 2v_el/(1 − η).
pub fn conditional_covariance(p: &GridPoint) -> DMatrix<f64> {
    let ab = channel_covariance(p);
    let v = 1.0 + 2.0 * p.v_el / (1.0 - p.eta);
    let fg = two_mode(v, v, (v * v - 1.0).sqrt());
    // mode order A, B, F0, G
    let mut g = DMatrix::zeros(8, 8);
    g.view_mut((0, 0), (4, 4)).copy_from(&ab);
    g.view_mut((4, 4), (4, 4)).copy_from(&fg);
    let (s, c) = (p.eta.sqrt(), (1.0 - p.eta).sqrt());
    let mut bs = DMatrix::identity(8, 8);
    for q in 0..2 {
        let (b, f) = (2 + q, 4 + q);
        bs[(b, b)] = s;
        bs[(b, f)] = c;
        bs[(f, b)] = -c;
        bs[(f, f)] = s;
    }
    let g = &bs * g * bs.transpose();
    let rest = [0usize, 1, 4, 5, 6, 7];
    let meas = [2usize, 3];
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| g[(rows[i], cols[j])])
    };
    let gr = pick(&rest, &rest);
    let gm = pick(&meas, &meas) + DMatrix::identity(2, 2);
    let sigma = pick(&rest, &meas);
    let inv = gm
        .try_inverse()
        .expect("heterodyne covariance is invertible");
    &gr - &sigma * inv * sigma.transpose()
}

/// Largest relative deviation between the closed-form eigenvalues and the
/// covariance-matrix oracle at one point.
pub fn lambda_deviation(p: &GridPoint, closed: &[f64; 5]) -> f64 {
    let mut first = symplectic_eigenvalues(&channel_covariance(p));
    let mut cond = symplectic_eigenvalues(&conditional_covariance(p));
    let mut want12 = vec![closed[0], closed[1]];
    let mut want345 = vec![closed[2], closed[3], closed[4]];
    for v in [&mut first, &mut cond, &mut want12, &mut want345] {
        v.sort_by(f64::total_cmp);
    }
    first
        .iter()
        .zip(&want12)
        .chain(cond.iter().zip(&want345))
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// A uniformly random point of the oracle grid.
pub fn grid_point<R: rand::Rng>(rng: &mut R) -> GridPoint {
    GridPoint {
        v_a: rng.random_range(1.0..40.0),
        t: rng.random_range(0.01..1.0),
        eps: rng.random_range(0.0..0.1),
        eta: rng.random_range(0.3..0.99),
        v_el: rng.random_range(0.0..0.3),
    }
}

pub fn sine_event(
    nodes: &[u32],
    frequency_hz: f64,
    amplitude_v: f64,
    castdown_db: f64,
) -> VibrationEvent {
    VibrationEvent {
        nodes: nodes.to_vec(),
        delays_s: Vec::new(),
        source_xy: None,
        start_s: 0.0,
        waveform: WaveformSpec {
            kind: WaveformKind::Sine,
            frequency_hz,
            amplitude_v,
            cycles: 3.0,
            duration_s: None,
        },
        wave_speed_mps: None,
        attenuation: None,
        castdown_db,
    }
}

/// Pearson correlation.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Least-squares slope of y against x.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}
