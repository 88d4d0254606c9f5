use uapscan::oracle::gradcheck::{check_all, OPS};

const TOL: f64 = 1e-3;

#[test]
fn every_op_matches_finite_differences() {
    let results = check_all(1);
    assert_eq!(results.len(), OPS.len());
    for r in &results {
        assert!(r.probes >= 100, "{}: only {} probes", r.op, r.probes);
        assert!(
            r.max_rel_err < TOL,
            "{}: rel err {} at {:?}",
            r.op,
            r.max_rel_err,
            r.worst
        );
    }
}

#[test]
fn a_wrong_reference_is_detected() {
    use uapscan::autodiff::{Graph, NodeId};
    use uapscan::oracle::gradcheck::{check_op, Case};
    use uapscan::Tensor;
    // the tape computes x * x, the reference claims x * x * x
    let make: fn(&mut rand_chacha::ChaCha8Rng) -> Case = |_| {
        (
            vec![Tensor::from_fn(&[8], |i| 0.2 + i as f32 * 0.1)],
            Box::new(|g: &mut Graph, ids: &[NodeId]| g.mul(ids[0], ids[0]).unwrap()),
            Box::new(|v: &[Vec<f64>]| v[0].iter().map(|a| a * a * a).collect()),
        )
    };
    assert!(check_op("bad", make, 0).max_rel_err > 0.1);
}
