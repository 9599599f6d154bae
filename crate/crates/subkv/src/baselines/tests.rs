use super::*;
use crate::linalg::{random_gaussian, random_orthonormal, relative_error, RngState};

fn reconstruction_error_sq(data: &Matrix, basis: &Matrix) -> f64 {
    let recon = data
        .matmul(basis)
        .unwrap()
        .matmul(&basis.transpose())
        .unwrap();
    data.sub(&recon).unwrap().frobenius_norm().powi(2)
}

fn projector_distance(a: &Matrix, b: &Matrix) -> f64 {
    let pa = a.matmul(&a.transpose()).unwrap();
    let pb = b.matmul(&b.transpose()).unwrap();
    pa.sub(&pb).unwrap().frobenius_norm()
}

#[test]
fn ksvd_rank_one_data() {
    let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
    let p = ksvd_basis(&k, 1).unwrap();
    assert!((p.get(0, 0).abs() - 1.0).abs() < 1e-12);
    assert!(p.get(1, 0).abs() < 1e-12);
    assert!(reconstruction_error_sq(&k, &p) < 1e-20);
}

#[test]
fn ksvd_full_rank_is_exact() {
    let mut rng = RngState::new(1);
    let k = random_gaussian(20, 6, &mut rng);
    let p = ksvd_basis(&k, 6).unwrap();
    assert!(reconstruction_error_sq(&k, &p).sqrt() / k.frobenius_norm() < 1e-10);
}

#[test]
fn ksvd_eckart_young_identity() {
    let mut rng = RngState::new(2);
    let k = random_gaussian(32, 8, &mut rng);
    let p = ksvd_basis(&k, 4).unwrap();
    let err_sq = reconstruction_error_sq(&k, &p);
    let (_, sigma, _) = crate::linalg::svd(&k).unwrap();
    let tail: f64 = sigma[4..].iter().map(|s| s * s).sum();
    assert!((err_sq - tail).abs() <= 1e-8 * sigma[0] * sigma[0]);
}

#[test]
fn ksvd_beats_random_bases() {
    let mut rng = RngState::new(3);
    for trial in 0..3 {
        let k = random_gaussian(24, 8, &mut rng);
        let p = ksvd_basis(&k, 4).unwrap();
        let optimal = reconstruction_error_sq(&k, &p);
        for _ in 0..100 {
            let q = random_orthonormal(8, 4, &mut rng);
            let e = reconstruction_error_sq(&k, &q);
            assert!(
                optimal <= e + 1e-10,
                "trial {trial}: random basis beat the SVD optimum"
            );
        }
    }
}

#[test]
fn ksvd_objective_monotone_in_rank() {
    let mut rng = RngState::new(4);
    let k = random_gaussian(30, 8, &mut rng);
    let mut prev = f64::INFINITY;
    for r in 1..=8 {
        let e = reconstruction_error_sq(&k, &ksvd_basis(&k, r).unwrap());
        assert!(e <= prev + 1e-10, "objective increased at rank {r}");
        prev = e;
    }
    // Same monotonicity for the stacked objective.
    let q = random_gaussian(30, 8, &mut rng);
    let z = Matrix::concat_rows(&[&k, &q]).unwrap();
    let mut prev = f64::INFINITY;
    for r in 1..=8 {
        let e = reconstruction_error_sq(&z, &eigen_basis(&k, &q, r).unwrap());
        assert!(e <= prev + 1e-10);
        prev = e;
    }
}

#[test]
fn ksvd_orthonormal_and_degenerate() {
    let mut rng = RngState::new(5);
    let k = random_gaussian(16, 6, &mut rng);
    for r in 1..=6 {
        let p = ksvd_basis(&k, r).unwrap();
        let res = p
            .transpose()
            .matmul(&p)
            .unwrap()
            .sub(&Matrix::identity(r))
            .unwrap()
            .frobenius_norm();
        assert!(res < 1e-10);
    }
    assert!(matches!(
        ksvd_basis(&Matrix::zeros(8, 4), 2),
        Err(Error::DegenerateInput { .. })
    ));
    assert!(ksvd_basis(&k, 0).is_err());
    assert!(ksvd_basis(&k, 7).is_err());
}

#[test]
fn eigen_degenerate_reductions_are_bit_exact() {
    let mut rng = RngState::new(6);
    let k = random_gaussian(20, 6, &mut rng);
    let ksvd = ksvd_basis(&k, 3).unwrap();

    // Duplicated block: identical blocks only rescale the spectrum.
    let dup = eigen_basis(&k, &k, 3).unwrap();
    assert_eq!(dup.data(), ksvd.data());

    // Zero block contributes nothing.
    let zero = eigen_basis(&k, &Matrix::zeros(20, 6), 3).unwrap();
    assert_eq!(zero.data(), ksvd.data());
}

#[test]
fn eigen_scaling_biases_toward_dominant_block() {
    let mut rng = RngState::new(7);
    let k = random_gaussian(24, 6, &mut rng);
    let q = random_gaussian(24, 6, &mut rng);
    let r = 3;
    let toward_q = ksvd_basis(&q, r).unwrap();
    let balanced = eigen_basis(&k, &q, r).unwrap();
    let q_heavy = eigen_basis(&k, &q.scale(100.0), r).unwrap();
    assert!(
        projector_distance(&q_heavy, &toward_q) < projector_distance(&balanced, &toward_q),
        "scaling q by 100 should pull the basis toward q's singular directions"
    );
}

#[test]
fn eigen_value_basis_delegates() {
    let mut rng = RngState::new(8);
    let v = random_gaussian(18, 5, &mut rng);
    let a = eigen_value_basis(&v, 3).unwrap();
    let b = ksvd_basis(&v, 3).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn kqsvd_full_rank_recovers_scores() {
    let mut rng = RngState::new(9);
    let q = random_gaussian(12, 5, &mut rng);
    let k = random_gaussian(12, 5, &mut rng);
    let s = q.matmul(&k.transpose()).unwrap();
    let (p_q, p_k) = kqsvd_factors(&q, &k, 5).unwrap();
    let approx = q
        .matmul(&p_q)
        .unwrap()
        .matmul(&k.matmul(&p_k).unwrap().transpose())
        .unwrap();
    assert!(relative_error(&s, &approx).unwrap() < 1e-8);
}

#[test]
fn kqsvd_rank_one_scores_exact() {
    // d_h = 1 keeps Q and K full column rank while S = a b^T is rank one.
    let mut rng = RngState::new(10);
    let a = random_gaussian(9, 1, &mut rng);
    let b = random_gaussian(9, 1, &mut rng);
    let s = a.matmul(&b.transpose()).unwrap();
    let (p_q, p_k) = kqsvd_factors(&a, &b, 1).unwrap();
    let approx = a
        .matmul(&p_q)
        .unwrap()
        .matmul(&b.matmul(&p_k).unwrap().transpose())
        .unwrap();
    assert!(relative_error(&s, &approx).unwrap() < 1e-10);
}

#[test]
fn kqsvd_beats_ksvd_on_score_residual() {
    let mut wins = 0;
    for seed in 0..10u64 {
        let mut rng = RngState::new(100 + seed);
        let q = random_gaussian(32, 8, &mut rng);
        let k = random_gaussian(32, 8, &mut rng);
        let s = q.matmul(&k.transpose()).unwrap();
        let r = 4;
        let (p_q, p_k) = kqsvd_factors(&q, &k, r).unwrap();
        let kq_approx = q
            .matmul(&p_q)
            .unwrap()
            .matmul(&k.matmul(&p_k).unwrap().transpose())
            .unwrap();
        let kq_res = s.sub(&kq_approx).unwrap().frobenius_norm();

        let pq_svd = ksvd_basis(&q, r).unwrap();
        let pk_svd = ksvd_basis(&k, r).unwrap();
        let both = q
            .matmul(&pq_svd)
            .unwrap()
            .matmul(&pq_svd.transpose())
            .unwrap()
            .matmul(
                &k.matmul(&pk_svd)
                    .unwrap()
                    .matmul(&pk_svd.transpose())
                    .unwrap()
                    .transpose(),
            )
            .unwrap();
        let svd_res = s.sub(&both).unwrap().frobenius_norm();
        if kq_res <= svd_res + 1e-12 {
            wins += 1;
        }
    }
    assert!(wins >= 9, "kq factors won only {wins}/10 seeds");
}

#[test]
fn kqsvd_rank_deficient_inputs_rejected() {
    let mut rng = RngState::new(11);
    let q = random_gaussian(10, 4, &mut rng);
    // Make k rank deficient by duplicating a column.
    let base = random_gaussian(10, 3, &mut rng);
    let first = base.slice_cols(0, 1).unwrap();
    let k = Matrix::concat_cols(&[&base, &first]).unwrap();
    assert!(matches!(
        kqsvd_factors(&q, &k, 2),
        Err(Error::RankDeficient { .. })
    ));
}

#[test]
fn kqsvd_value_identity_weighting_reduces_to_ksvd_subspace() {
    let mut rng = RngState::new(12);
    let v = random_gaussian(20, 6, &mut rng);
    let p_kq = kqsvd_value_basis(&v, &Matrix::identity(6), 3).unwrap();
    let p_svd = ksvd_basis(&v, 3).unwrap();
    assert!(
        projector_distance(&p_kq, &p_svd) < 1e-8,
        "identity weighting must give the same subspace as plain value SVD"
    );
}

#[test]
fn kqsvd_value_full_rank_preserves_output() {
    let mut rng = RngState::new(13);
    let v = random_gaussian(20, 6, &mut rng);
    let w_o = random_gaussian(6, 10, &mut rng);
    let p = kqsvd_value_basis(&v, &w_o, 6).unwrap();
    let target = v.matmul(&w_o).unwrap();
    let recon = v
        .matmul(&p)
        .unwrap()
        .matmul(&p.transpose())
        .unwrap()
        .matmul(&w_o)
        .unwrap();
    assert!(relative_error(&target, &recon).unwrap() < 1e-8);
}

#[test]
fn kqsvd_value_ignores_annihilated_directions() {
    let mut rng = RngState::new(14);
    let d_h = 8;
    let v = random_gaussian(30, d_h, &mut rng);
    // Output weighting that kills the last four coordinates.
    let mut w_o = Matrix::zeros(d_h, 12);
    let dense = random_gaussian(4, 12, &mut rng);
    for i in 0..4 {
        for j in 0..12 {
            w_o.set(i, j, dense.get(i, j));
        }
    }
    let p = kqsvd_value_basis(&v, &w_o, 3).unwrap();
    // The projector must not touch the annihilated coordinate directions.
    let projector = p.matmul(&p.transpose()).unwrap();
    for dead in 4..d_h {
        let mut col_norm = 0.0;
        for i in 0..d_h {
            col_norm += projector.get(i, dead) * projector.get(i, dead);
        }
        assert!(
            col_norm.sqrt() < 1e-8,
            "projector acts on annihilated direction {dead}"
        );
    }
}

#[test]
fn build_store_shapes_and_audit() {
    use crate::decoder::{capture_calibration, init_stack, DecoderConfig};
    let cfg = DecoderConfig {
        d_model: 16,
        n_heads_q: 4,
        n_heads_kv: 2,
        d_h: 4,
        d_ff: 24,
        n_layers: 2,
        ..DecoderConfig::default()
    };
    let stack = init_stack(&cfg, &mut RngState::new(15)).unwrap();
    let mut rng = RngState::new(16);
    let inputs: Vec<Matrix> = (0..4)
        .map(|_| random_gaussian(10, cfg.d_model, &mut rng))
        .collect();
    let records = capture_calibration(&stack, &inputs).unwrap();
    let w_o: Vec<&Matrix> = stack.layers.iter().map(|l| &l.w_o).collect();
    for kind in [BaselineKind::KSvd, BaselineKind::Eigen, BaselineKind::KqSvd] {
        let store = build_store(kind, &cfg, &w_o, &records, &[2, 4], &[2, 3, 4]).unwrap();
        assert_eq!(store.layers.len(), 2);
        assert_eq!(store.layers[0].key.len(), 2);
        assert_eq!(store.layers[0].value.len(), 3);
        assert_eq!(store.layers[0].value[0].len(), cfg.n_heads_kv);
        store.audit_orthonormality(1e-8).unwrap();
        assert_eq!(store.key_basis(1, 4).unwrap().shape(), (4, 4));
        assert!(store.key_basis(0, 3).is_err());
    }
}
