use std::io::Write;

use micronas::deploy::replay_cost;
use micronas::hwcost::{
    characterize, dyn_op_cost, enumerate_signatures, CostMatrix, DeviceProfile, HardwareModel, HwError, LatencyTable,
    OpKind, Precision, Provider,
};
use micronas::space::{Network, SearchSpaceConfig, SpaceLayout, SuperNet};
use micronas::tensor::{Dims, Graph, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sf_space() -> SearchSpaceConfig {
    let mut cfg = SearchSpaceConfig::new(64, 20, 4);
    cfg.f_max_sf = 16;
    cfg.g_sf = 4;
    cfg
}

fn setup(cfg: &SearchSpaceConfig) -> (SuperNet, LatencyTable, HardwareModel) {
    let net = SuperNet::new(cfg, 0).unwrap();
    let table = characterize(&DeviceProfile::default(), &enumerate_signatures(net.layout())).unwrap();
    let model = HardwareModel::new(net.layout(), &table, Precision::Int8).unwrap();
    (net, table, model)
}

#[test]
fn one_hot_estimates_equal_replay() {
    let cfg = sf_space();
    let (net, table, model) = setup(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..60 {
        let desc = net.layout().random_descriptor(&mut rng);
        let est = model.estimate_descriptor(&desc).unwrap();
        let concrete = Network::extract(&net, &desc).unwrap();
        let (lat, peak) = replay_cost(&concrete, &table, Precision::Int8).unwrap();
        assert!((est.latency_ms - lat).abs() <= 1e-9 * lat, "{} vs {lat}", est.latency_ms);
        assert_eq!(est.peak_mem_bytes, peak as f64, "{}", desc.to_json());
    }
}

#[test]
fn float_memory_is_four_times_activations() {
    let cfg = SearchSpaceConfig::new(32, 3, 2);
    let net = SuperNet::new(&cfg, 0).unwrap();
    let mut profile = DeviceProfile::default();
    if let Provider::Simulated(d) = &mut profile.provider {
        d.a_us_per_mac = 0.0;
    }
    let table = characterize(&profile, &enumerate_signatures(net.layout())).unwrap();
    let desc = net.discretize();
    let concrete = Network::extract(&net, &desc).unwrap();
    let (_, p8) = replay_cost(&concrete, &table, Precision::Int8).unwrap();
    let (_, p32) = replay_cost(&concrete, &table, Precision::Float32).unwrap();
    // Scratch bytes do not scale with precision.
    assert!(p32 > 3 * p8 && p32 <= 4 * p8);
    let m32 = HardwareModel::new(net.layout(), &table, Precision::Float32).unwrap();
    assert_eq!(m32.estimate_descriptor(&desc).unwrap().peak_mem_bytes, p32 as f64);
}

#[test]
fn table_covers_every_sampled_architecture() {
    let cfg = SearchSpaceConfig::new(64, 30, 10);
    let net = SuperNet::new(&cfg, 0).unwrap();
    let table = characterize(&DeviceProfile::default(), &enumerate_signatures(net.layout())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..30 {
        let desc = net.layout().random_descriptor(&mut rng);
        let concrete = Network::extract(&net, &desc).unwrap();
        replay_cost(&concrete, &table, Precision::Int8).unwrap();
    }
    assert!(HardwareModel::new(net.layout(), &table, Precision::Int8).is_ok());
}

#[test]
fn wider_filters_never_reduce_latency() {
    let cfg = sf_space();
    let (net, _, model) = setup(&cfg);
    let layout = net.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let base: Vec<usize> = layout.groups().iter().map(|g| rng.random_range(0..g.len())).collect();
        for (gi, g) in layout.groups().iter().enumerate() {
            if g.filter_options().is_none() {
                continue;
            }
            let mut prev = f64::NEG_INFINITY;
            for opt in 0..g.len() {
                let mut c = base.clone();
                c[gi] = opt;
                let lat = model.estimate_descriptor(&layout.descriptor(&c)).unwrap().latency_ms;
                assert!(lat >= prev, "{} option {opt}", g.id);
                prev = lat;
            }
        }
    }
}

#[test]
fn relaxed_estimate_gradients_match_finite_differences() {
    let cfg = sf_space();
    let (net, _, model) = setup(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits: Vec<Vec<f64>> = net
        .groups()
        .iter()
        .map(|g| (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let eval = |logits: &[Vec<f64>], grad: bool| {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = logits
            .iter()
            .map(|l| g.leaf(l.clone(), Dims::vector(l.len()), grad).unwrap())
            .collect();
        let relaxed: Vec<NodeId> = leaves.iter().map(|l| g.tempered_softmax(*l, None, 1.0).unwrap()).collect();
        let est = model.estimate(&mut g, &relaxed).unwrap();
        let value = g.scalar(est.latency);
        let grads = grad.then(|| {
            let gr = g.backward(est.latency).unwrap();
            leaves.iter().map(|l| gr.get(*l).unwrap().to_vec()).collect::<Vec<_>>()
        });
        (value, grads)
    };
    let (_, Some(grads)) = eval(&logits, true) else { panic!() };
    let h = 1e-6;
    for (gi, l) in logits.iter().enumerate() {
        for j in 0..l.len() {
            let mut p = logits.clone();
            p[gi][j] += h;
            let mut m = logits.clone();
            m[gi][j] -= h;
            let numeric = (eval(&p, false).0 - eval(&m, false).0) / (2.0 * h);
            let a = grads[gi][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(err < 1e-5, "{}[{j}]: {a} vs {numeric}", net.groups()[gi].id);
        }
    }
}

#[test]
fn dyn_op_cost_gradient_on_random_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..10.0)).collect();
    let ax: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
    let ay: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
    let m = CostMatrix {
        in_options: vec![4, 8, 12, 16],
        out_options: vec![4, 8, 12, 16],
        latency_ms: h.clone(),
        memory_bytes: h.clone(),
    };
    let mut g = Graph::new();
    let x = g.leaf(ax.clone(), Dims::vector(4), true).unwrap();
    let y = g.leaf(ay.clone(), Dims::vector(4), true).unwrap();
    let out = g.bilinear(y, &h, x).unwrap();
    assert!((g.scalar(out) - dyn_op_cost(&m, &ax, &ay).unwrap().0).abs() < 1e-12);
    let grads = g.backward(out).unwrap();
    let step = 1e-6;
    for (leaf, v, is_x) in [(x, &ax, true), (y, &ay, false)] {
        for j in 0..4 {
            let mut p = v.clone();
            p[j] += step;
            let mut q = v.clone();
            q[j] -= step;
            let f = |w: &[f64]| {
                let (a, b) = if is_x { (w, ay.as_slice()) } else { (ax.as_slice(), w) };
                dyn_op_cost(&m, a, b).unwrap().0
            };
            let numeric = (f(&p) - f(&q)) / (2.0 * step);
            let a = grads.get(leaf).unwrap()[j];
            assert!((a - numeric).abs() / a.abs().max(1e-12) < 1e-6);
        }
    }
}

#[test]
fn measured_table_round_trip_and_missing_rows() {
    let cfg = SearchSpaceConfig::new(32, 3, 2);
    let layout = SpaceLayout::new(&cfg).unwrap();
    let sigs = enumerate_signatures(&layout);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("measured.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "op_kind,t,s,f_in,k_t,k_s,stride_t,stride_s,padding,f_out,latency_us,extra_mem_bytes").unwrap();
    for (i, s) in sigs.iter().enumerate() {
        let (kt, ks) = s.kernel.unwrap_or((0, 0));
        let pad = if s.kind == OpKind::Conv { "same" } else { "valid" };
        writeln!(
            f,
            "{},{},{},{},{kt},{ks},{},{},{pad},{},{},{}",
            s.kind.as_str(),
            s.input.t,
            s.input.s,
            s.input.f,
            s.stride.t,
            s.stride.s,
            s.f_out,
            100 + i,
            i
        )
        .unwrap();
    }
    drop(f);
    let profile = DeviceProfile {
        device: "bench".into(),
        provider: Provider::MeasuredTable { path: path.clone() },
    };
    let table = characterize(&profile, &sigs).unwrap();
    assert_eq!(table.len(), sigs.len());
    assert_eq!(table.get(&sigs[3]).unwrap().latency_ms, 0.103);
    let back = LatencyTable::from_json(&table.to_json()).unwrap();
    assert_eq!(back, table);

    let lines: Vec<String> = std::fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    std::fs::write(&path, lines[..lines.len() - 1].join("\n")).unwrap();
    match characterize(&profile, &sigs) {
        Err(HwError::MissingRows(missing)) => assert_eq!(missing, vec![sigs.last().unwrap().canonical()]),
        other => panic!("expected missing rows, got {other:?}"),
    }
}
