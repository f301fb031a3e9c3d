mod common;

#[test]
fn split_matches_monolith_over_many_configs() {
    for seed in 0..30 {
        for n in [3, 4, 6] {
            let e = common::split_equivalence(seed, n);
            assert_eq!(e.h0_max_abs, 0.0, "seed {seed} n {n}: {e:?}");
            assert!(e.logits_max_abs <= 1e-9, "seed {seed} n {n}: {e:?}");
            assert!(e.boundary_rel <= 1e-9, "seed {seed} n {n}: {e:?}");
            assert!(e.param_grad_rel <= 1e-9, "seed {seed} n {n}: {e:?}");
        }
    }
}

#[test]
fn stacked_body_matches_solo_runs() {
    for m in [2, 4] {
        let worst = common::client_batch_equivalence(m as u64, m);
        assert!(worst <= 1e-9, "m = {m}: {worst}");
    }
}
