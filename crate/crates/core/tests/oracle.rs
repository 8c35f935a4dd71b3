//! Full-space oracle cross-checks of the diagonalization scheme: the local
//! nested-commutator assembly must reproduce the brute-force expansion
//! coefficients of `e^{ad_A} H`, order by order.

use ndarray::Array2;
use qliom_core::kam;
use qliom_core::linalg::{self, Mat};
use qliom_core::model::{self, FieldRealization};
use qliom_core::opalg::OperatorSum;
use qliom_core::ChainParams;

fn comm(x: &Mat, y: &Mat) -> Mat {
    &linalg::matmul(x, y) - &linalg::matmul(y, x)
}

fn scale_dense(out: &kam::KamOutput, m: usize, pick: impl Fn(&kam::AnchorData) -> Option<&qliom_core::opalg::LocalOperator>) -> Mat {
    let n = out.h0.n_sites();
    let mut sum = OperatorSum::new(n);
    for (&i, data) in &out.scale(m).anchors {
        if let Some(op) = pick(data) {
            sum.push(m as u32, i, op.clone()).unwrap();
        }
    }
    sum.to_dense(14).unwrap_or_else(|_| Array2::zeros((1 << n, 1 << n)))
}

/// The scale-m coefficient of `e^{ad_A} H` must equal `D^(m) + W^(m,res)`
/// densely, through third order, resonances present or not.
#[test]
fn expansion_coefficients_match_through_third_order() {
    for (seed, delta) in [(11u64, 1e-9f64), (19, 0.35), (23, 0.2)] {
        let mut p = ChainParams::new(5, 2, 0.07, 0.5, 0.5).unwrap();
        p.overrides.n_star = Some(3);
        p.overrides.delta = Some(delta);
        let fields = model::sample_fields(&p, seed);
        let out = kam::run_scheme(&p, &fields).unwrap();
        let h0 = out.h0.to_dense(14).unwrap();
        let v = out.v.to_dense(14).unwrap();
        let a1 = scale_dense(&out, 1, |d| d.a.as_ref());
        let a2 = scale_dense(&out, 2, |d| d.a.as_ref());
        let a3 = scale_dense(&out, 3, |d| d.a.as_ref());

        // brute-force coefficients of e^{ad_A}(H0 + JV) with A = Σ J^m A^(m)
        let g1 = &comm(&a1, &h0) + &v;
        let g2 = &(&comm(&a1, &comm(&a1, &h0)).mapv(|z| z * 0.5) + &comm(&a1, &v)) + &comm(&a2, &h0);
        let g3_terms: Vec<Mat> = vec![
            comm(&a3, &h0),
            comm(&a2, &v),
            comm(&a1, &comm(&a2, &h0)).mapv(|z| z * 0.5),
            comm(&a2, &comm(&a1, &h0)).mapv(|z| z * 0.5),
            comm(&a1, &comm(&a1, &v)).mapv(|z| z * 0.5),
            comm(&a1, &comm(&a1, &comm(&a1, &h0))).mapv(|z| z * (1.0 / 6.0)),
        ];
        let g3 = g3_terms.into_iter().reduce(|a, b| &a + &b).unwrap();

        for (m, g) in [(1usize, g1), (2, g2), (3, g3)] {
            let expect = &scale_dense(&out, m, |d| d.d.as_ref())
                + &scale_dense(&out, m, |d| d.w_res.as_ref());
            let defect = linalg::frobenius(&(&g - &expect));
            let scale = linalg::frobenius(&g).max(1.0);
            assert!(
                defect <= 1e-10 * scale,
                "seed {seed} delta {delta}: order {m} coefficient defect {defect:.3e}"
            );
        }
    }
}

/// Remainder norm falls as `J^{n*+1}` on a geometric grid: the log-log slope
/// sits within the acceptance band for n* = 1 and 2.
#[test]
fn remainder_order_bookkeeping() {
    for n_star in [1usize, 2] {
        let mut p = ChainParams::new(6, 2, 0.05, 0.5, 0.5).unwrap();
        p.overrides.n_star = Some(n_star);
        p.overrides.delta = Some(1e-9);
        let study = qliom_core::verify::run_scaling_suite(
            &p,
            qliom_core::verify::ScalingQuantity::Remainder,
            41,
        )
        .unwrap();
        assert!(
            study.pass,
            "n* = {n_star}: slope {:.3} outside {} ± {}",
            study.slope, study.expected, study.band
        );
    }
}

/// The explicit first-scale generator matrix elements: numerator over the
/// classical energy difference, zero diagonal, anti-Hermitian.
#[test]
fn first_scale_generator_matches_definition() {
    let p = ChainParams::new(4, 2, 0.05, 0.5, 0.5).unwrap();
    let fields = FieldRealization {
        h: vec![0.81, 0.33, 0.57, 0.92],
        seed: 0,
        rng_id: model::RNG_ID.into(),
    };
    let out = kam::run_scheme(&p, &fields).unwrap();
    for (&i, data) in &out.scale(1).anchors {
        if out.resonance.resonant(i, 1) {
            continue;
        }
        let a = data.a.as_ref().unwrap();
        let w = data.w_nonres.as_ref().unwrap();
        let support = a.support();
        for r in 0..a.dim() {
            for c in 0..a.dim() {
                if r == c {
                    assert_eq!(a.matrix()[(r, r)].norm(), 0.0);
                    continue;
                }
                let er = model::local_energy(&fields, support, r);
                let ec = model::local_energy(&fields, support, c);
                let expect = w.matrix()[(r, c)] / (er - ec);
                assert!((a.matrix()[(r, c)] - expect).norm() < 1e-14);
            }
        }
    }
}

/// Conjugating forward and backward with the exact dressing returns the
/// operator, and the dressed transform preserves commutators.
#[test]
fn dressing_is_an_algebra_isomorphism() {
    let mut p = ChainParams::new(5, 2, 0.06, 0.5, 0.5).unwrap();
    p.overrides.delta = Some(1e-9);
    let fields = model::sample_fields(&p, 8);
    let out = kam::run_scheme(&p, &fields).unwrap();
    let dressing = kam::Dressing::new(&out.generator(), 14).unwrap();
    let h = &out.dense.as_ref().unwrap().h;
    let x2 = {
        let mut s = OperatorSum::new(5);
        s.push(0, 2, qliom_core::opalg::LocalOperator::pauli_x(2)).unwrap();
        s.to_dense(14).unwrap()
    };
    // commutes with conjugation: e^{ad}([H, X]) = [H', X']
    let lhs = dressing.forward(&comm(h, &x2));
    let rhs = comm(&dressing.forward(h), &dressing.forward(&x2));
    assert!(linalg::frobenius(&(&lhs - &rhs)) <= 1e-11 * linalg::frobenius(&lhs).max(1.0));
    let back = dressing.backward(&dressing.forward(&x2));
    assert!(linalg::frobenius(&(&back - &x2)) <= 1e-11);
}
