mod common;

use isaqn::qkd::secret_key_rate;
use isaqn::receiver::DetectorParams;

use common::{grid_point, lambda_deviation, GridPoint};

fn det(eta: f64, v_el: f64) -> DetectorParams {
    DetectorParams {
        quantum_efficiency: eta,
        electronic_noise_snu: v_el,
        ..DetectorParams::default()
    }
}

#[test]
fn closed_form_eigenvalues_match_covariance_oracle() {
    let mut rng = isaqn::dsp::rng(2024, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = grid_point(&mut rng);
        let r = secret_key_rate(p.v_a, p.t, p.eps, &det(p.eta, p.v_el), 0.98, 50e6).unwrap();
        worst = worst.max(lambda_deviation(&p, &r.lambdas));
    }
    println!("worst relative deviation {worst:e}");
    assert!(worst < 1e-9, "worst relative deviation {worst:e}");
}

#[test]
fn oracle_sees_pure_state_without_loss() {
    // T = 1, ε = 0: Alice and Bob share a pure EPR state.
    let p = GridPoint {
        v_a: 5.0,
        t: 1.0,
        eps: 0.0,
        eta: 0.5,
        v_el: 0.0,
    };
    let nu = common::symplectic_eigenvalues(&common::channel_covariance(&p));
    for v in nu {
        assert!((v - 1.0).abs() < 1e-9);
    }
}

#[test]
fn thermal_state_eigenvalue() {
    let g = nalgebra::DMatrix::from_diagonal_element(2, 2, 3.5);
    let nu = common::symplectic_eigenvalues(&g);
    assert!((nu[0] - 3.5).abs() < 1e-12);
}

#[test]
fn oracle_detects_a_wrong_excess_noise() {
    let p = GridPoint {
        v_a: 12.0,
        t: 0.079,
        eps: 0.01,
        eta: 0.42,
        v_el: 0.18,
    };
    let r = secret_key_rate(p.v_a, p.t, p.eps + 0.01, &det(p.eta, p.v_el), 0.98, 50e6).unwrap();
    assert!(lambda_deviation(&p, &r.lambdas) > 1e-5);
}
