use latentlab::fixtures;
use latentlab::graph::{node_set, DimMap, LatentGraph, Mask, NodeId, NodeKind};
use latentlab::locate::{locate, SharedInfo};
use latentlab::scm::{build_scm, extract_blocks, Layer, MixingFunction, ScmConfig, ScmSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn chain() -> LatentGraph {
    LatentGraph::from_json_str(
        r#"{"nodes":[{"id":"z","kind":"latent"},{"id":"x","kind":"observable"}],
            "edges":[["z","x"]],"layout":["x"]}"#,
    )
    .unwrap()
}

fn fig4_scm(seed: u64) -> ScmSpec<f64> {
    build_scm(&fixtures::fig4(), &ScmConfig { seed, ..Default::default() }).unwrap()
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

#[test]
fn fig4_dims_follow_the_additive_rule() {
    let scm = fig4_scm(0);
    let expected = [
        ("z1", 1), ("z2", 1), ("z3", 2), ("z4", 3), ("z5", 2), ("z6", 2),
        ("x1", 3), ("x2", 6), ("x3", 6), ("x4", 5), ("x5", 5), ("x6", 3),
    ];
    for (id, d) in expected {
        assert_eq!(scm.dim(id).unwrap(), d, "{id}");
    }
    assert_eq!(scm.dim("x6").unwrap(), scm.dim("z6").unwrap() + 1);
}

#[test]
fn additivity_holds_on_every_fixture() {
    for (name, g) in fixtures::all() {
        let mut exo = DimMap::new();
        for (i, id) in g.nodes_of(NodeKind::Exogenous).enumerate() {
            exo.insert(id.clone(), 1 + i % 3);
        }
        let scm: ScmSpec<f64> = build_scm(&g, &ScmConfig { exo_dims: exo.clone(), ..Default::default() }).unwrap();
        for (id, kind) in g.nodes() {
            let d = scm.dim(id.as_str()).unwrap();
            if kind == NodeKind::Exogenous {
                assert_eq!(d, exo[id], "{name}: {id}");
            } else {
                let sum: usize = g.parents(id.as_str()).unwrap().iter().map(|p| scm.dim(p.as_str()).unwrap()).sum();
                assert_eq!(d, sum, "{name}: {id}");
                assert_eq!(scm.mixer(id.as_str()).unwrap().dim(), d);
            }
        }
    }
}

#[test]
fn same_seed_gives_identical_mixers() {
    let a = fig4_scm(7);
    let b = fig4_scm(7);
    let c = fig4_scm(8);
    for id in ["z2", "x2", "x6"] {
        assert_eq!(a.mixer(id).unwrap(), b.mixer(id).unwrap());
    }
    // one-dimensional orthogonal factors are only ever +1 or -1
    for id in ["x2", "x6"] {
        assert_ne!(a.mixer(id).unwrap(), c.mixer(id).unwrap());
    }
}

#[test]
fn sampling_is_deterministic() {
    let scm = fig4_scm(0);
    let a = scm.sample(4, 0);
    let b = scm.sample(4, 0);
    assert_eq!(a.values.as_slice(), b.values.as_slice());
    assert_ne!(a.values, scm.sample(4, 1).values);
    // a longer draw extends a shorter one (up to rounding in the batched products)
    let long = scm.sample(9, 0);
    assert!((long.values.rows(0, 4) - &a.values).amax() < 1e-12);
}

#[test]
fn sampling_ignores_input_order() {
    let g = fixtures::fig4();
    let mut file = g.to_graph_file();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    file.nodes.shuffle(&mut rng);
    file.edges.shuffle(&mut rng);
    let h = LatentGraph::from_graph_file(file).unwrap();
    let cfg = ScmConfig { seed: 3, ..Default::default() };
    let a: ScmSpec<f64> = build_scm(&g, &cfg).unwrap();
    let b: ScmSpec<f64> = build_scm(&h, &cfg).unwrap();
    assert_eq!(a.sample(10, 2), b.sample(10, 2));
}

#[test]
fn empty_sample_keeps_spans() {
    let scm = fig4_scm(0);
    let ds = scm.sample(0, 0);
    assert_eq!(ds.n(), 0);
    let total: usize = scm.dims().values().sum();
    assert_eq!(ds.width(), total);
    let mut next = 0;
    for &(off, d) in ds.spans.values() {
        assert_eq!(off, next);
        next += d;
    }
    assert_eq!(next, total);
}

#[test]
fn exogenous_means_are_near_zero() {
    let scm: ScmSpec<f64> = build_scm(&chain(), &ScmConfig::default()).unwrap();
    let n = 1000;
    let ds = scm.sample(n, 11);
    let bound = 5.0 / (n as f64).sqrt();
    for id in ["eps_z", "eps_x"] {
        let col = ds.block(id).unwrap();
        assert!(col.mean().abs() <= bound, "{id}: {}", col.mean());
    }
}

#[test]
fn forward_then_invert_node_recovers_parents() {
    let scm = fig4_scm(1);
    let ds = scm.sample(20, 4);
    for id in ["z2", "z4", "x2", "x6"] {
        let blocks = scm.input_blocks(id).unwrap();
        for r in 0..ds.n() {
            let input = DVector::from_iterator(
                blocks.iter().map(|b| b.1).sum(),
                blocks.iter().flat_map(|(p, _)| ds.block(p.as_str()).unwrap().row(r).iter().copied().collect::<Vec<_>>()),
            );
            let y = scm.forward_node(id, &input).unwrap();
            let stored = ds.block(id).unwrap().row(r).transpose();
            assert!(rel(&y, &stored) <= 1e-12);
            let back = scm.invert_node(id, &y).unwrap();
            assert_eq!(back.len(), blocks.len());
            for (p, v) in back {
                let truth = ds.block(p.as_str()).unwrap().row(r).transpose();
                assert!(rel(&v, &truth) <= 1e-9, "{id} -> {p}");
            }
        }
    }
}

#[test]
fn zero_maps_to_zero() {
    let scm = fig4_scm(2);
    let d = scm.dim("x2").unwrap();
    let out = scm.invert_node("x2", &DVector::zeros(d)).unwrap();
    assert!(out.values().all(|v| v.iter().all(|&t| t == 0.0)));
    assert!(scm.forward_node("x2", &DVector::zeros(d)).unwrap().iter().all(|&t| t == 0.0));
}

#[test]
fn chain_inversion_recovers_exogenous_draws() {
    let mut cfg = ScmConfig::default();
    cfg.exo_dims.insert("eps_z".into(), 2);
    let scm: ScmSpec<f64> = build_scm(&chain(), &cfg).unwrap();
    let ds = scm.sample(50, 0);
    let rec = scm.invert_from_observables(&ds).unwrap();
    for id in ["eps_z", "eps_x", "z"] {
        let diff = (rec.block(id).unwrap() - ds.block(id).unwrap()).amax();
        assert!(diff <= 1e-6 * ds.block(id).unwrap().amax(), "{id}: {diff}");
    }
}

#[test]
fn every_fixture_inverts_from_the_observables() {
    for (name, g) in fixtures::all() {
        let scm: ScmSpec<f64> = build_scm(&g, &ScmConfig { seed: 9, ..Default::default() }).unwrap();
        let ds = scm.sample(100, 10);
        let err = scm.max_exogenous_relative_error(&ds).unwrap();
        assert!(err <= 1e-6, "{name}: {err}");
    }
}

#[test]
fn inversion_uses_only_observable_columns() {
    let scm = fig4_scm(0);
    let mut ds = scm.sample(5, 0);
    let obs: Vec<NodeId> = scm.graph().observables();
    // scramble everything that is not an observable
    for (id, &(off, d)) in ds.spans.clone().iter() {
        if !obs.contains(id) {
            ds.values.columns_mut(off, d).fill(123.0);
        }
    }
    let clean = scm.sample(5, 0);
    let rec = scm.invert_from_observables(&ds).unwrap();
    assert!((rec.values - clean.values).amax() < 1e-9);
}

#[test]
fn jacobian_of_a_linear_orthogonal_layer_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = MixingFunction::<f64>::random(4, 1, 1.0, false, &mut rng);
    let s = m.min_singular_value(&gaussian(&mut rng, 4));
    assert!((s - 1.0).abs() < 1e-12, "{s}");
}

#[test]
fn jacobian_with_all_negative_preactivations_is_the_slope() {
    let w = DMatrix::<f64>::identity(3, 3);
    let layer = Layer { weight: w, bias: DVector::zeros(3), slope: 0.2 };
    let m = MixingFunction::new(3, vec![layer]).unwrap();
    let s = m.min_singular_value(&DVector::from_vec(vec![-1.0, -0.5, -2.0]));
    assert!((s - 0.2).abs() < 1e-12, "{s}");
}

#[test]
fn jacobian_bound_holds_at_random_points() {
    let scm = fig4_scm(0);
    let bound = scm.alpha().powi(scm.layers() as i32);
    let d = scm.dim("x6").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let p = gaussian(&mut rng, d) * 3.0;
        let s = scm.jacobian_min_singular_value("x6", &p).unwrap();
        assert!(s >= bound - 1e-12, "{s} < {bound}");
    }
    assert!(scm.jacobian_min_singular_value("x6", &DVector::zeros(d + 1)).is_err());
}

#[test]
fn jacobian_matches_finite_differences() {
    let cfg = ScmConfig { bias: true, ..Default::default() };
    let scm: ScmSpec<f64> = build_scm(&fixtures::fig4(), &cfg).unwrap();
    let m = scm.mixer("x4").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = gaussian(&mut rng, m.dim());
    let j = m.jacobian(&x);
    let h = 1e-6;
    for k in 0..m.dim() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        let col = (m.forward(&xp) - m.forward(&xm)) / (2.0 * h);
        assert!((col - j.column(k)).amax() < 1e-6);
    }
}

#[test]
fn blocks_have_the_expected_widths() {
    let g = fixtures::fig4();
    let scm = fig4_scm(0);
    let ds = scm.sample(7, 0);
    let mask = Mask::new(&g, node_set(["x1", "x2", "x3"])).unwrap();
    let info = locate(&g, &mask).unwrap();
    let b = extract_blocks(&ds, &g, &mask, &info).unwrap();
    assert_eq!(b.c.ncols(), scm.dim("z2").unwrap());
    assert_eq!(b.c.ncols(), 1);
    assert_eq!(b.s_m.ncols(), 6);
    assert_eq!(b.s_mc.ncols(), 5);
    assert_eq!((b.x_m.ncols(), b.x_mc.ncols()), (15, 13));
    let total: usize = g.observables().iter().map(|x| scm.dim(x.as_str()).unwrap()).sum();
    assert_eq!(b.x_m.ncols() + b.x_mc.ncols(), total);
    assert!([&b.c, &b.s_m, &b.s_mc, &b.x_m, &b.x_mc].iter().all(|m| m.nrows() == 7));
    assert_eq!(b.c, ds.block("z2").unwrap());

    let empty = SharedInfo { s_mc: Default::default(), ..info };
    let b = extract_blocks(&ds, &g, &mask, &empty).unwrap();
    assert_eq!((b.s_mc.nrows(), b.s_mc.ncols()), (7, 0));

    let bogus = SharedInfo { c: node_set(["nope"]), ..Default::default() };
    assert!(extract_blocks(&ds, &g, &mask, &bogus).is_err());
}

#[test]
fn binary_and_csv_export() {
    let scm = fig4_scm(0);
    let ds = scm.sample(6, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    ds.write_binary(&path).unwrap();
    let back = latentlab::scm::Dataset::<f64>::read_binary(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, 6 * ds.width() * 8);
    let header: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data.bin.json")).unwrap()).unwrap();
    assert_eq!(header["order"], "column-major");
    assert_eq!(header["seed"], 3);
    assert_eq!(header["dims"]["x2"], 6);
    assert!(latentlab::scm::Dataset::<f32>::read_binary(&path).is_err());

    // first value on disk is row 0 of column 0
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(f64::from_le_bytes(bytes[..8].try_into().unwrap()), ds.values[(0, 0)]);
    assert_eq!(f64::from_le_bytes(bytes[8..16].try_into().unwrap()), ds.values[(1, 0)]);

    let mut csv = Vec::new();
    ds.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("eps_x1[0],eps_x2[0]"), "{header}");
    assert!(header.ends_with("z4[2],z5[0],z5[1],z6[0],z6[1]"), "{header}");
    assert_eq!(lines.count(), 6);
}

#[test]
fn single_precision_model_round_trips() {
    let g = fixtures::fig4();
    let scm: ScmSpec<f32> = build_scm(&g, &ScmConfig::default()).unwrap();
    let ds = scm.sample(50, 0);
    let err = scm.max_exogenous_relative_error(&ds).unwrap();
    assert!(err <= 1e-3, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mixing_functions_are_bijective(
        dim in 1usize..9,
        layers in 1usize..5,
        alpha in 0.05f64..1.0,
        bias in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = MixingFunction::<f64>::random(dim, layers, alpha, bias, &mut rng);
        let scale = rng.random_range(0.1..10.0);
        let x = gaussian(&mut rng, dim) * scale;
        let y = m.forward(&x);
        prop_assert!(rel(&m.inverse(&y), &x) <= 1e-9);
        prop_assert!(m.min_singular_value(&x) >= alpha.powi(layers as i32) * (1.0 - 1e-9));
    }
}
