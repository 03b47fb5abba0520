use latentlab::fixtures;
use latentlab::graph::{node_set, Mask, NodeId};
use latentlab::mae::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ids(n: usize) -> Vec<NodeId> {
    (1..=n).map(|i| NodeId::new(format!("x{i}"))).collect()
}

fn fig4_mask(names: &[&str]) -> Mask {
    Mask::new(&fixtures::fig4(), node_set(names.iter().copied())).unwrap()
}

fn small_model(d_c: usize, d_sm: usize, hidden: Vec<usize>, seed: u64) -> MaeModel<f64> {
    let layout = ObservableLayout::unit(&fixtures::fig4());
    MaeModel::new(layout, d_c, d_sm, &ModelConfig { hidden, slope: 0.2, seed }).unwrap()
}

fn random_batch(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
}

/// Zeroes the decoder's last layer and sets its bias, so the output is constant.
fn constant_decoder(model: &mut MaeModel<f64>, value: f64) {
    let last = model.decoder.layers.last_mut().unwrap();
    last.weight.fill(0.0);
    last.bias.fill(value);
}

#[test]
fn sampler_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = MaskSampler::new(&ids(8), 0.5, 2).unwrap();
    assert_eq!(s.sample_mask(&mut rng).masked().len(), 4);
    let s = MaskSampler::new(&ids(10), 0.9, 1).unwrap();
    assert_eq!(s.sample_mask(&mut rng).masked().len(), 9);
    let s = MaskSampler::new(&ids(4), 0.05, 2).unwrap();
    assert_eq!(s.masked_patches(), 1);
    assert_eq!(s.sample_mask(&mut rng).masked().len(), 2);
}

#[test]
fn sampler_rejects_bad_input() {
    assert!(matches!(MaskSampler::new(&ids(1), 0.5, 1), Err(MaeError::LayoutTooSmall { .. })));
    assert!(matches!(MaskSampler::new(&ids(4), 0.5, 4), Err(MaeError::LayoutTooSmall { .. })));
    assert!(MaskSampler::new(&ids(4), 0.0, 1).is_err());
    assert!(MaskSampler::new(&ids(4), 0.5, 0).is_err());
}

#[test]
fn sampler_masks_are_valid_for_the_graph() {
    let g = fixtures::fig4();
    let s = MaskSampler::for_graph(&g, 0.5, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let m = s.sample_mask(&mut rng);
        assert!(Mask::new(&g, m.masked().clone()).is_ok());
    }
}

#[test]
fn empirical_mask_ratio() {
    let layout = ids(24);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for r in (1..=9).map(|i| i as f64 / 10.0) {
        for s in [1, 2, 4] {
            let sampler = MaskSampler::new(&layout, r, s).unwrap();
            let bound = 1.0 / sampler.num_patches() as f64;
            let mut total = 0.0;
            for _ in 0..10_000 {
                let frac = sampler.sample_mask(&mut rng).masked().len() as f64 / layout.len() as f64;
                assert!((frac - r).abs() <= bound + 1e-12, "r={r} s={s} frac={frac}");
                total += frac;
            }
            assert!((total / 10_000.0 - r).abs() <= bound, "r={r} s={s}");
        }
    }
}

#[test]
fn uneven_last_patch() {
    let s = MaskSampler::new(&ids(5), 0.5, 2).unwrap();
    assert_eq!(s.num_patches(), 3);
    let sizes: Vec<usize> = s.patches().map(<[NodeId]>::len).collect();
    assert_eq!(sizes, vec![2, 2, 1]);
}

#[test]
fn output_widths() {
    let m = small_model(2, 3, vec![8], 0);
    assert_eq!(m.encoder.outputs(), 2);
    assert_eq!(m.encoder.inputs(), 12);
    assert_eq!(m.decoder.inputs(), 2 + 3 + 6);
    assert_eq!(m.decoder.outputs(), 6);
    let mask = fig4_mask(&["x1", "x2", "x3"]);
    let x = random_batch(5, 6, 0);
    assert_eq!(m.encode_batch(&x, &mask).unwrap().shape(), (5, 2));
    let noise = m.draw_noise(5, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(m.reconstruct(&x, &noise, &mask).unwrap().shape(), (5, 6));
}

#[test]
fn encode_zero_input_zero_final_layer() {
    let mut m = small_model(2, 1, vec![8, 8], 1);
    let last = m.encoder.layers.last_mut().unwrap();
    last.weight.fill(0.0);
    last.bias.fill(0.0);
    let mask = fig4_mask(&["x1", "x2", "x3"]);
    let chat = m.encode(&DVector::zeros(3), &mask).unwrap();
    assert_eq!(chat, DVector::zeros(2));
}

#[test]
fn encode_is_deterministic_and_ignores_masked_slots() {
    let m = small_model(2, 1, vec![8], 2);
    let mask = fig4_mask(&["x1", "x2", "x3"]);
    let visible = DVector::from_vec(vec![0.3, -1.2, 0.8]);
    let a = m.encode(&visible, &mask).unwrap();
    assert_eq!(a, m.encode(&visible, &mask).unwrap());
    let full = DMatrix::from_row_slice(1, 6, &[9.0, -9.0, 4.0, 0.3, -1.2, 0.8]);
    assert_eq!(m.encode_batch(&full, &mask).unwrap().row(0).transpose(), a);
}

#[test]
fn permuting_visible_coordinates_changes_chat() {
    let m = small_model(2, 1, vec![16, 16], 3);
    let mask = fig4_mask(&["x1", "x2", "x3"]);
    let a = m.encode(&DVector::from_vec(vec![0.3, -1.2, 0.8]), &mask).unwrap();
    let b = m.encode(&DVector::from_vec(vec![-1.2, 0.3, 0.8]), &mask).unwrap();
    assert!((a - b).norm() > 1e-6);
}

#[test]
fn encode_width_mismatch() {
    let m = small_model(1, 1, vec![4], 0);
    let mask = fig4_mask(&["x1", "x2", "x3"]);
    assert!(matches!(m.encode(&DVector::zeros(4), &mask), Err(MaeError::Width { .. })));
    assert!(matches!(m.encode_batch(&DMatrix::zeros(2, 5), &mask), Err(MaeError::Width { .. })));
}

#[test]
fn decode_determinism_and_widths() {
    let m = small_model(2, 3, vec![8], 4);
    let mask = fig4_mask(&["x4", "x5"]);
    let chat = DVector::from_vec(vec![0.5, -0.5]);
    let s = DVector::from_vec(vec![0.1, 0.2, 0.3]);
    let out = m.decode(&chat, &s, &mask).unwrap();
    assert_eq!(out.len(), 6);
    assert_eq!(out, m.decode(&chat, &s, &mask).unwrap());
    assert!(matches!(m.decode(&chat, &DVector::zeros(2), &mask), Err(MaeError::Width { .. })));
    assert!(matches!(m.decode(&DVector::zeros(3), &s, &mask), Err(MaeError::Width { .. })));
}

#[test]
fn zero_noise_width_is_deterministic() {
    let m = small_model(1, 0, vec![8], 5);
    let mask = fig4_mask(&["x1", "x2", "x3"]);
    let x = random_batch(6, 6, 5);
    let a = m.loss(&x, &mask, &mut ChaCha8Rng::seed_from_u64(1), false).unwrap();
    let b = m.loss(&x, &mask, &mut ChaCha8Rng::seed_from_u64(2), false).unwrap();
    assert_eq!(a, b);
    assert_eq!(m.draw_noise(6, &mut ChaCha8Rng::seed_from_u64(0)).shape(), (6, 0));
}

#[test]
fn noise_is_standard_normal() {
    let m = small_model(1, 4, vec![4], 0);
    let noise = m.draw_noise(5000, &mut ChaCha8Rng::seed_from_u64(9));
    for col in noise.column_iter() {
        assert!(col.mean().abs() < 0.06);
        assert!((col.variance() - 1.0).abs() < 0.08);
    }
}

#[test]
fn loss_is_zero_on_exact_output() {
    let mut m = small_model(1, 1, vec![8], 0);
    constant_decoder(&mut m, 0.7);
    let mask = fig4_mask(&["x1", "x2", "x3"]);
    let mut x = random_batch(4, 6, 1);
    x.columns_mut(0, 3).fill(0.7);
    let loss = m.loss(&x, &mask, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn loss_of_constant_offset() {
    let mut m = small_model(1, 1, vec![8], 0);
    constant_decoder(&mut m, 0.7);
    let mask = fig4_mask(&["x1", "x2", "x3"]);
    let mut x = random_batch(4, 6, 1);
    let delta = 0.25;
    x.columns_mut(0, 3).fill(0.7 + delta);
    let loss = m.loss(&x, &mask, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
    assert!((loss - delta * delta).abs() < 1e-12);
}

#[test]
fn boundary_exclusion_drops_adjacent_observable() {
    let layout = ObservableLayout::unit(&fixtures::fig4());
    let mask = fig4_mask(&["x1", "x2", "x3"]);
    assert_eq!(layout.boundary(&mask), node_set(["x3"]));
    assert_eq!(layout.loss_coords(&mask, true).unwrap(), vec![0, 1]);
    assert_eq!(layout.loss_coords(&mask, false).unwrap(), vec![0, 1, 2]);

    // an error only on x3 vanishes once x3 is excluded
    let mut m = small_model(1, 1, vec![8], 0);
    constant_decoder(&mut m, 0.0);
    let mut x = DMatrix::zeros(3, 6);
    x.column_mut(2).fill(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(m.loss(&x, &mask, &mut rng, true).unwrap(), 0.0);
    assert!((m.loss(&x, &mask, &mut rng, false).unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn boundary_exclusion_can_empty_the_loss() {
    let layout = ObservableLayout::unit(&fixtures::fig4());
    let mask = fig4_mask(&["x3", "x4"]);
    assert!(matches!(layout.loss_coords(&mask, true), Err(MaeError::EmptyLoss)));
}

#[test]
fn multi_width_layout_coordinates() {
    let g = fixtures::fig4();
    let dims = [3, 6, 6, 5, 5, 3];
    let layout = ObservableLayout::new(g.layout().to_vec(), dims.to_vec()).unwrap();
    assert_eq!(layout.width(), 28);
    let mask = fig4_mask(&["x1", "x2", "x3"]);
    assert_eq!(layout.masked_coords(&mask), (0..15).collect::<Vec<_>>());
    assert_eq!(layout.visible_coords(&mask), (15..28).collect::<Vec<_>>());
    let ind: DVector<f64> = layout.indicator(&mask);
    assert_eq!(ind.sum(), 15.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_is_permutation_equivariant(seed in 0u64..1000, rows in 2usize..12) {
        let m = small_model(1, 2, vec![6], seed);
        let mask = fig4_mask(&["x1", "x2", "x3"]);
        let x = random_batch(rows, 6, seed + 1);
        let noise = m.draw_noise(rows, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let mut perm: Vec<usize> = (0..rows).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let base = m.loss_with_noise(&x, &mask, &noise, false).unwrap();
        let permuted = m.loss_with_noise(&x.select_rows(&perm), &mask, &noise.select_rows(&perm), false).unwrap();
        prop_assert!((base - permuted).abs() <= 1e-12 * base.abs().max(1.0));
    }
}

#[test]
fn grad_check_on_random_models() {
    let g = fixtures::fig4();
    let sampler = MaskSampler::for_graph(&g, 0.5, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..20u64 {
        let d_c = rng.random_range(1..=3);
        let d_sm = rng.random_range(0..=3);
        let hidden = vec![rng.random_range(3..=10), rng.random_range(3..=10)];
        let m = small_model(d_c, d_sm, hidden, trial);
        assert!(m.param_count() <= 10_000);
        let mask = sampler.sample_mask(&mut rng);
        let x = random_batch(8, 6, 100 + trial);
        let report = grad_check(&m, &x, &mask).unwrap();
        assert!(report.max_rel_dev <= 1e-4, "trial {trial}: {report:?}");
        assert_eq!(report.checked, m.param_count());
    }
}

#[test]
fn grad_check_with_normalizer() {
    let mut m = small_model(2, 1, vec![6, 6], 7);
    let x = random_batch(10, 6, 7).map(|v| 3.0 * v + 1.5);
    m.set_normalizer(Some(Normalizer::fit(&x))).unwrap();
    let report = grad_check(&m, &x, &fig4_mask(&["x4", "x5", "x6"])).unwrap();
    assert!(report.max_rel_dev <= 1e-4, "{report:?}");
}

#[test]
fn grad_check_skips_frozen_layers() {
    let mut m = small_model(2, 1, vec![5, 5], 8);
    m.encoder.layers[1].frozen = true;
    let frozen = m.encoder.layers[1].param_count();
    let mask = fig4_mask(&["x1", "x2", "x3"]);
    let x = random_batch(6, 6, 8);
    let report = grad_check(&m, &x, &mask).unwrap();
    assert_eq!(report.frozen, frozen);
    assert_eq!(report.checked + report.frozen, m.param_count());
    assert!(report.max_rel_dev <= 1e-4);

    let noise = m.draw_noise(6, &mut ChaCha8Rng::seed_from_u64(0));
    let coords = m.layout.loss_coords(&mask, false).unwrap();
    let (_, grad) = m.loss_and_grad(&x, &mask, &noise, &coords).unwrap();
    let flags = m.frozen_flags();
    for (g, f) in grad.flat().iter().zip(flags) {
        if f {
            assert_eq!(*g, 0.0);
        }
    }
}

#[test]
fn sign_flipped_gradient_fails_the_check() {
    let m = small_model(2, 1, vec![6], 9);
    let x = random_batch(6, 6, 9);
    let report = grad_check_with(&m, &x, &fig4_mask(&["x1", "x2", "x3"]), |g| {
        g.iter_mut().for_each(|v| *v = -*v)
    })
    .unwrap();
    assert!(report.max_rel_dev > 1.0, "{report:?}");
}

#[test]
fn frozen_layers_do_not_move_in_training() {
    let mut m = small_model(1, 1, vec![6], 10);
    m.decoder.layers[0].frozen = true;
    let before = m.decoder.layers[0].clone();
    let x = random_batch(64, 6, 10);
    let cfg = TrainConfig { epochs: 3, batch_size: 16, ..Default::default() };
    let out = train(&x, &MaskSource::Fixed(fig4_mask(&["x1", "x2", "x3"])), m, &cfg).unwrap();
    assert_eq!(out.model.decoder.layers[0], before);
    assert_ne!(out.model.decoder.layers[1], small_model(1, 1, vec![6], 10).decoder.layers[1]);
}

#[test]
fn constant_target_is_learned() {
    let x = DMatrix::from_fn(2048, 6, |_, j| 0.5 - 0.1 * j as f64);
    let mask = fig4_mask(&["x1", "x2", "x3"]);
    // no specific information is known, so the noise width is 0
    for standardize in [true, false] {
        let m = small_model(1, 0, vec![16, 16], 0);
        let cfg = TrainConfig { epochs: 200, standardize, ..Default::default() };
        let out = train(&x, &MaskSource::Fixed(mask.clone()), m, &cfg).unwrap();
        let last = *out.losses.last().unwrap();
        assert!(last <= 1e-6, "standardize={standardize}: final loss {last}");
    }
}

#[test]
fn training_is_deterministic() {
    let x = random_batch(300, 6, 12);
    let g = fixtures::fig4();
    let sampler = MaskSampler::for_graph(&g, 0.5, 2).unwrap();
    let cfg = TrainConfig { epochs: 4, batch_size: 32, seed: 5, ..Default::default() };
    let run = || train(&x, &MaskSource::Resampled(sampler.clone()), small_model(1, 2, vec![8], 3), &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.model, b.model);
    let other = train(&x, &MaskSource::Resampled(sampler), small_model(1, 2, vec![8], 3), &TrainConfig { seed: 6, ..cfg })
        .unwrap();
    assert_ne!(a.losses, other.losses);
}

#[test]
fn training_lowers_the_loss() {
    // masked coordinates are a deterministic function of visible ones
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x: DMatrix<f64> = DMatrix::from_fn(1024, 6, |_, _| rng.random_range(-1.0..1.0));
    let x = DMatrix::from_fn(1024, 6, |i, j| if j < 3 { (x[(i, j + 3)] * 2.0).tanh() } else { x[(i, j)] });
    let cfg = TrainConfig { epochs: 30, ..Default::default() };
    let out = train(&x, &MaskSource::Fixed(fig4_mask(&["x1", "x2", "x3"])), small_model(3, 0, vec![32, 32], 1), &cfg)
        .unwrap();
    assert!(out.losses[29] < 0.2 * out.losses[0], "{:?}", out.losses);
    assert!(count_loss_spikes(&out.losses, SPIKE_TOLERANCE) <= spike_allowance(30));
}

#[test]
fn training_rejects_bad_input() {
    let mask = MaskSource::Fixed(fig4_mask(&["x1"]));
    let m = small_model(1, 1, vec![4], 0);
    assert!(matches!(train(&DMatrix::<f64>::zeros(0, 6), &mask, m.clone(), &TrainConfig::default()), Err(MaeError::Config(_))));
    assert!(matches!(train(&DMatrix::<f64>::zeros(4, 5), &mask, m.clone(), &TrainConfig::default()), Err(MaeError::Width { .. })));
    let bad = TrainConfig { beta1: 1.0, ..Default::default() };
    assert!(matches!(train(&DMatrix::<f64>::zeros(4, 6), &mask, m, &bad), Err(MaeError::Config(_))));
}

#[test]
fn divergence_is_reported() {
    let mut x = random_batch(32, 6, 0);
    x[(0, 0)] = f64::INFINITY;
    let cfg = TrainConfig { epochs: 2, standardize: false, ..Default::default() };
    let err = train(&x, &MaskSource::Fixed(fig4_mask(&["x1"])), small_model(1, 1, vec![4], 0), &cfg).unwrap_err();
    assert!(matches!(err, MaeError::Diverged { epoch: 0, .. }), "{err}");
}

#[test]
fn spike_counting() {
    assert_eq!(count_loss_spikes(&[1.0, 0.9, 0.905, 0.8, 0.95], 0.01), 1);
    assert_eq!(count_loss_spikes(&[1.0, 0.9, 0.905], 0.0), 1);
    assert_eq!(spike_allowance(1), 1);
    assert_eq!(spike_allowance(50), 1);
    assert_eq!(spike_allowance(100), 2);
    assert_eq!(spike_allowance(101), 3);
}

#[test]
fn psnr_examples() {
    let target = DMatrix::from_element(10, 10, 0.5);
    let off = target.map(|v| v + 0.1);
    let m = reconstruction_metrics(&off, &target, 1.0).unwrap();
    assert!((m.mse - 0.01).abs() < 1e-12);
    assert!((m.psnr - 20.0).abs() < 1e-9);

    let exact = reconstruction_metrics(&target, &target, 1.0).unwrap();
    assert_eq!(exact.mse, 0.0);
    assert_eq!(exact.psnr, f64::INFINITY);
    assert_eq!(serde_json::to_value(exact).unwrap()["psnr"], "inf");

    let mut last = f64::INFINITY;
    for k in 1..20 {
        let p = reconstruction_metrics(&target.map(|v| v + 0.02 * k as f64), &target, 1.0).unwrap().psnr;
        assert!(p < last);
        last = p;
    }
    assert!(reconstruction_metrics(&target, &target, 0.0).is_err());
    assert!(reconstruction_metrics(&DMatrix::zeros(10, 9), &target, 1.0).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let x = random_batch(100, 6, 20).map(|v| v * 4.0 - 1.0);
    let cfg = TrainConfig { epochs: 2, ..Default::default() };
    let mask = fig4_mask(&["x1", "x2", "x3"]);
    let mut m = small_model(2, 1, vec![5], 20);
    m.encoder.layers[0].frozen = true;
    let model = train(&x, &MaskSource::Fixed(mask.clone()), m, &cfg).unwrap().model;
    assert!(model.normalizer.is_some());

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model, Some(&cfg)).unwrap();
    let (loaded, loaded_cfg) = load_checkpoint::<f64>(dir.path()).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(loaded_cfg, Some(cfg));
    let noise = model.draw_noise(100, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(loaded.reconstruct(&x, &noise, &mask).unwrap(), model.reconstruct(&x, &noise, &mask).unwrap());

    assert!(load_checkpoint::<f32>(dir.path()).is_err());
    let missing = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint::<f64>(missing.path()), Err(MaeError::Io { .. })));
}

#[test]
fn loss_csv_round_trip() {
    let losses = vec![1.5, 0.25, 1e-7];
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, &losses).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("epoch,loss\n1,"));
    assert_eq!(read_loss_csv(&text).unwrap(), losses);
    assert!(read_loss_csv("epoch,loss\n1,x\n").is_err());
}

#[test]
fn single_precision_model() {
    let layout = ObservableLayout::unit(&fixtures::fig4());
    let m = MaeModel::<f32>::new(layout, 1, 1, &ModelConfig { hidden: vec![8], ..Default::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = DMatrix::<f32>::from_fn(64, 6, |_, _| rng.random_range(-1.0..1.0));
    let mask = fig4_mask(&["x1", "x2", "x3"]);
    let out = train(&x, &MaskSource::Fixed(mask), m, &TrainConfig { epochs: 3, ..Default::default() }).unwrap();
    assert!(out.losses.iter().all(|l| l.is_finite()));
}
