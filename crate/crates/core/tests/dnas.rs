use micronas::data::{DataSource, DatasetSpec, SplitFractions, SyntheticRecipe, WindowedDataset};
use micronas::dnas::{
    hardware_loss, hardware_loss_value, pseudo_prob, total_loss, write_trace, GumbelNoise, SearchConfig, SearchError,
    Searcher, TRACE_HEADER,
};
use micronas::hwcost::{characterize, enumerate_signatures, DeviceProfile, HardwareModel, HardwareNodes, Precision};
use micronas::space::{SearchSpaceConfig, SuperNet};
use micronas::tensor::{Dims, Graph, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_space(ts_s: usize, sf_s: usize) -> SearchSpaceConfig {
    let mut cfg = SearchSpaceConfig::new(32, ts_s, 4);
    cfg.sf_s = sf_s;
    cfg.f_max_tr = 8;
    cfg.g_tr = 4;
    cfg.f_max_sf = 8;
    cfg.g_sf = 4;
    cfg
}

fn dataset(ts_s: usize, per_class: usize, seed: u64) -> WindowedDataset {
    DatasetSpec {
        source: DataSource::Synthetic(SyntheticRecipe::new(4, 32, ts_s, per_class, seed)),
        ts_l: 32,
        window_stride: None,
        split: SplitFractions::default(),
        seed,
    }
    .build()
    .unwrap()
}

fn hardware(net: &SuperNet) -> HardwareModel {
    let table = characterize(&DeviceProfile::default(), &enumerate_signatures(net.layout())).unwrap();
    HardwareModel::new(net.layout(), &table, Precision::Int8).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn relaxed_values(logits: &[f64], tau: f64, noise: Option<&[f64]>) -> Vec<f64> {
    let mut g = Graph::new();
    let l = g.leaf(logits.to_vec(), Dims::vector(logits.len()), false).unwrap();
    let p = pseudo_prob(&mut g, l, tau, noise).unwrap();
    g.value(p).to_vec()
}

#[test]
fn symmetric_logits_give_uniform_probabilities() {
    for tau in [5.0, 1.0, 0.1, 1e-3] {
        let p = relaxed_values(&[0.0, 0.0], tau, None);
        assert_eq!(p, vec![0.5, 0.5]);
    }
}

#[test]
fn lower_temperature_sharpens_without_reordering() {
    let mut prev = 0.0;
    for tau in [2.0, 1.0, 0.5, 0.1, 0.01, 1e-4] {
        let p = relaxed_values(&[1.0, 0.0], tau, None);
        assert!(p[0] >= prev);
        prev = p[0];
    }
    assert!(prev > 1.0 - 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..500 {
        let n = rng.random_range(2..6);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tau = rng.random_range(1e-3..10.0);
        let p = relaxed_values(&logits, tau, None);
        let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
        assert_eq!(argmax(&p), argmax(&logits));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let noise = GumbelNoise::new(rng.random()).sample_groups(&[n]).remove(0);
        let q = relaxed_values(&logits, tau, Some(&noise));
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(q.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn gumbel_softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let noise = GumbelNoise::new(7).sample_groups(&[4]).remove(0);
    let weights = [0.3, -1.2, 2.0, 0.7];
    let f = |l: &[f64]| -> f64 { relaxed_values(l, 0.7, Some(&noise)).iter().zip(&weights).map(|(p, w)| p * w).sum() };
    let mut g = Graph::new();
    let leaf = g.leaf(logits.clone(), Dims::vector(4), true).unwrap();
    let p = pseudo_prob(&mut g, leaf, 0.7, Some(&noise)).unwrap();
    let out = g.dot(p, &weights).unwrap();
    let grads = g.backward(out).unwrap();
    let h = 1e-6;
    for j in 0..4 {
        let mut a = logits.clone();
        a[j] += h;
        let mut b = logits.clone();
        b[j] -= h;
        let numeric = (f(&a) - f(&b)) / (2.0 * h);
        assert!(rel_err(grads.get(leaf).unwrap()[j], numeric) < 1e-5);
    }
}

#[test]
fn hinge_log_examples_and_shape() {
    assert_eq!(hardware_loss_value(100.0, 200.0, 2.0), 0.0);
    assert!((hardware_loss_value(400.0, 200.0, 2.0) - 1.3863).abs() < 1e-4);
    assert_eq!(hardware_loss_value(200.0, 200.0, 2.0), 0.0);
    let target = 3.0;
    for v in [0.0, 0.5, 1.0, 2.9, 3.0] {
        assert_eq!(hardware_loss_value(v, target, 4.0), 0.0);
    }
    assert!(hardware_loss_value(target * (1.0 + 1e-12), target, 4.0) < 1e-10);
    let mut prev = 0.0;
    for i in 1..200 {
        let v = target + i as f64 * 0.05;
        let l = hardware_loss_value(v, target, 4.0);
        assert!(l > prev);
        prev = l;
    }
}

#[test]
fn hinge_log_graph_matches_closed_form_and_gradient() {
    for (v, t, gamma) in [(5.0, 2.0, 2.0), (1.0, 2.0, 2.0), (7.5, 7.0, 4.0)] {
        let mut g = Graph::new();
        let x = g.leaf(vec![v], Dims::vector(1), true).unwrap();
        let l = hardware_loss(&mut g, x, t, gamma).unwrap();
        assert!((g.scalar(l) - hardware_loss_value(v, t, gamma)).abs() < 1e-12);
        let d = g.backward(l).unwrap().get(x).map_or(0.0, |d| d[0]);
        let h = 1e-6;
        let numeric = (hardware_loss_value(v + h, t, gamma) - hardware_loss_value(v - h, t, gamma)) / (2.0 * h);
        assert!(rel_err(d, numeric) < 1e-6, "{d} vs {numeric}");
    }
}

fn constant_hw(g: &mut Graph, lat: f64, mem: f64) -> HardwareNodes {
    HardwareNodes {
        latency: g.constant(vec![lat]),
        peak_mem: g.constant(vec![mem]),
    }
}

#[test]
fn total_loss_examples() {
    let cfg = SearchConfig {
        lat_target_ms: Some(10.0),
        mem_target_bytes: Some(1000.0),
        ..SearchConfig::default()
    };
    let mut g = Graph::new();
    let val = g.constant(vec![0.8125]);
    let hw = constant_hw(&mut g, 9.0, 999.0);
    let total = total_loss(&mut g, val, hw, &cfg).unwrap();
    assert_eq!(g.scalar(total), 0.8125);

    let cfg = SearchConfig {
        lat_target_ms: Some(10.0),
        mem_target_bytes: None,
        ..SearchConfig::default()
    };
    let mut g = Graph::new();
    let val = g.constant(vec![0.5]);
    let hw = constant_hw(&mut g, 20.0, 1e9);
    let total = total_loss(&mut g, val, hw, &cfg).unwrap();
    assert!((g.scalar(total) - (0.5 + 1.3863)).abs() < 1e-4);
}

#[test]
fn total_loss_gradient_wrt_logits() {
    let space = tiny_space(10, 0);
    let mut net = SuperNet::new(&space, 2).unwrap();
    let hw = hardware(&net);
    let data = dataset(10, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for grp in net.groups_mut() {
        grp.logits.iter_mut().for_each(|l| *l = rng.random_range(-1.0..1.0));
    }
    let noise = GumbelNoise::new(5).sample_groups(&net.groups().iter().map(|g| g.len()).collect::<Vec<_>>());
    let cfg = SearchConfig {
        lat_target_ms: Some(0.05),
        mem_target_bytes: Some(200.0),
        ..SearchConfig::default()
    };
    let batch: Vec<usize> = data.val_indices()[..2].to_vec();
    let eval = |logits: &[Vec<f64>], grad: bool| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut g = Graph::new();
        let w = net.weights().bind(&mut g, false);
        let leaves: Vec<NodeId> = logits
            .iter()
            .map(|l| g.leaf(l.clone(), Dims::vector(l.len()), grad).unwrap())
            .collect();
        let relaxed: Vec<NodeId> = leaves
            .iter()
            .zip(&noise)
            .map(|(l, n)| pseudo_prob(&mut g, *l, 0.8, Some(n)).unwrap())
            .collect();
        let mut ce = Vec::new();
        for &i in &batch {
            let (x, y) = data.sample(i);
            let xn = g.input(x);
            let out = net.forward(&mut g, &w, &relaxed, xn, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            ce.push(g.softmax_cross_entropy(out.logits, y).unwrap());
        }
        let sum = g.sum(&ce).unwrap();
        let val = g.affine(sum, 1.0 / batch.len() as f64, 0.0);
        let nodes = hw.estimate(&mut g, &relaxed).unwrap();
        let total = total_loss(&mut g, val, nodes, &cfg).unwrap();
        let v = g.scalar(total);
        let grads = grad.then(|| {
            let gr = g.backward(total).unwrap();
            leaves.iter().map(|l| gr.get(*l).unwrap().to_vec()).collect()
        });
        (v, grads)
    };
    let logits: Vec<Vec<f64>> = net.groups().iter().map(|g| g.logits.clone()).collect();
    let (v0, Some(grads)) = eval(&logits, true) else { panic!() };
    assert!(v0 > 0.0);
    let h = 1e-5;
    for (gi, l) in logits.iter().enumerate() {
        for j in 0..l.len() {
            let mut a = logits.clone();
            a[gi][j] += h;
            let mut b = logits.clone();
            b[gi][j] -= h;
            let numeric = (eval(&a, false).0 - eval(&b, false).0) / (2.0 * h);
            let err = rel_err(grads[gi][j], numeric);
            assert!(err < 1e-3 || (grads[gi][j] - numeric).abs() < 1e-7, "{}[{j}] {} vs {numeric}", net.groups()[gi].id, grads[gi][j]);
        }
    }
}

#[test]
fn temperature_follows_closed_form() {
    let cfg = SearchConfig::default();
    for n in [0, 1, 10, 137, 1000, 5000] {
        let expected = cfg.tau0 * cfg.epsilon.powi(n as i32);
        assert!(rel_err(cfg.tau_after(n), expected) < 1e-12);
    }
    assert!((cfg.tau_after(1000) - 6.654e-3).abs() < 5e-7);

    let space = tiny_space(10, 0);
    let net = SuperNet::new(&space, 0).unwrap();
    let hw = hardware(&net);
    let data = dataset(10, 5, 0);
    let mut s = Searcher::new(net, &hw, &data, cfg.clone()).unwrap();
    for _ in 0..1000 {
        s.anneal();
    }
    assert!(rel_err(s.tau(), cfg.tau0 * cfg.epsilon.powi(1000)) < 1e-12);
}

#[test]
fn alpha_and_weight_steps_touch_disjoint_sets() {
    let space = tiny_space(10, 0);
    let net = SuperNet::new(&space, 0).unwrap();
    let hw = hardware(&net);
    let data = dataset(10, 5, 0);
    let cfg = SearchConfig {
        lat_target_ms: Some(0.05),
        mem_target_bytes: Some(100.0),
        ..SearchConfig::default()
    };
    let mut s = Searcher::new(net, &hw, &data, cfg).unwrap();
    let val: Vec<usize> = data.val_indices()[..4].to_vec();
    let train: Vec<usize> = data.train_indices()[..4].to_vec();
    for _ in 0..3 {
        let (a0, w0) = (s.alpha_fingerprint(), s.weight_fingerprint());
        s.alpha_step(&val).unwrap();
        assert_ne!(s.alpha_fingerprint(), a0);
        assert_eq!(s.weight_fingerprint(), w0);
        let a1 = s.alpha_fingerprint();
        s.weight_step(&train).unwrap();
        assert_ne!(s.weight_fingerprint(), w0);
        assert_eq!(s.alpha_fingerprint(), a1);
        s.anneal();
    }
}

#[test]
fn fixed_seed_search_is_bit_reproducible() {
    let space = tiny_space(10, 0);
    let data = dataset(10, 10, 4);
    let cfg = SearchConfig {
        epochs: 2,
        batch_size: 8,
        seed: 11,
        ..SearchConfig::default()
    };
    let run = || {
        let net = SuperNet::new(&space, 1).unwrap();
        let hw = hardware(&net);
        let out = Searcher::new(net, &hw, &data, cfg.clone()).unwrap().run().unwrap();
        let fp_a = micronas::dnas::fingerprint(out.supernet.groups().iter().flat_map(|g| g.logits.iter()));
        let fp_w = micronas::dnas::fingerprint(out.supernet.weights().iter().flat_map(|p| p.value.iter()));
        (out.trace, out.descriptor, fp_a, fp_w)
    };
    let (t1, d1, a1, w1) = run();
    let (t2, d2, a2, w2) = run();
    assert_eq!(t1, t2);
    assert_eq!(d1, d2);
    assert_eq!((a1, w1), (a2, w2));
    assert_eq!(t1.len(), 2 * data.train_indices().len().div_ceil(8));

    let mut csv = Vec::new();
    write_trace(&mut csv, &t1).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), TRACE_HEADER);
    assert_eq!(text.lines().count(), t1.len() + 1);
}

#[test]
fn empty_validation_split_is_rejected() {
    let space = tiny_space(10, 0);
    let net = SuperNet::new(&space, 0).unwrap();
    let hw = hardware(&net);
    let data = DatasetSpec {
        source: DataSource::Synthetic(SyntheticRecipe::new(4, 32, 10, 5, 0)),
        ts_l: 32,
        window_stride: None,
        split: SplitFractions {
            train: 0.8,
            val: 0.0,
            test: 0.2,
        },
        seed: 0,
    }
    .build()
    .unwrap();
    assert!(matches!(
        Searcher::new(net, &hw, &data, SearchConfig::default()),
        Err(SearchError::EmptySplit(_))
    ));
}

#[test]
fn search_without_hardware_loss_fits_separable_data() {
    let space = tiny_space(10, 0);
    assert_eq!(space.num_time_reduce_cells() + space.num_sensor_fusion_cells().total + 1, 3);
    let data = dataset(10, 100, 5);
    let net = SuperNet::new(&space, 5).unwrap();
    let hw = hardware(&net);
    let cfg = SearchConfig {
        epochs: 30,
        batch_size: 16,
        seed: 5,
        ..SearchConfig::default()
    };
    let out = Searcher::new(net, &hw, &data, cfg).unwrap().run().unwrap();
    let val = data.val();
    let correct = val
        .iter()
        .filter(|(x, y)| {
            let p = out.supernet.predict_one_hot(x, &out.descriptor).unwrap();
            p.iter().enumerate().fold(0, |b, (i, v)| if *v > p[b] { i } else { b }) == *y
        })
        .count();
    let acc = correct as f64 / val.len() as f64;
    assert!(acc >= 0.95, "validation accuracy {acc}");
}
