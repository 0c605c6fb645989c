use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::reference_domains;
use crate::nn::{param_finite_diff_check, Mode};

pub(crate) fn tiny_config(variant: Variant) -> ModelConfig {
    let features = vec![
        FeatureDecl { name: "seq".into(), kind: FeatureKind::Sequence, dim: 3 },
        FeatureDecl { name: "ge2e".into(), kind: FeatureKind::Vector, dim: 4 },
        FeatureDecl { name: "byol".into(), kind: FeatureKind::Vector, dim: 4 },
    ];
    let mut cfg = ModelConfig::new(variant, reference_domains(), features);
    cfg.encoders.insert(
        "seq".into(),
        EncoderConfig { conv_widths: vec![3], conv_filters: 2, lstm_layers: 1, lstm_hidden: 2, attention_dim: 3 },
    );
    for t in cfg.towers.values_mut() {
        *t = TowerSpec { hidden: vec![6], activations: vec![Activation::Tanh], dropout: 0.0 };
    }
    cfg.common_dim = 5;
    cfg
}

/// A corpus matching [`tiny_config`]: `seq` informative for English, `byol`
/// for German and French.
pub(crate) fn tiny_corpus(per_class: usize, seed: u64) -> crate::data::Corpus {
    use crate::data::{generate_synthetic, SyntheticSpec};
    let mut spec = SyntheticSpec::default();
    spec.seed = seed;
    spec.features = tiny_config(Variant::Single).features;
    spec.seq_len = [3, 6];
    let informative = ["seq", "byol", "byol"];
    for (d, inf) in spec.domains.iter_mut().zip(informative) {
        d.samples_per_class = per_class;
        d.informative = vec![inf.into()];
    }
    generate_synthetic(&spec).unwrap()
}

pub(crate) fn random_inputs(r: &mut ChaCha8Rng, len: usize) -> Vec<Tensor> {
    let mut v = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    };
    vec![v(&[len, 3]), v(&[4]), v(&[4])]
}

#[test]
fn predict_ties_and_monotonicity() {
    assert_eq!(predict(&[0.1, 0.9, 0.3]), 1);
    assert_eq!(predict(&[2.0, 2.0, 2.0]), 0);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let z: Vec<f64> = (0..6).map(|_| r.random_range(-5.0..5.0)).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        assert_eq!(predict(&z), predict(&e));
    }
}

#[test]
fn structure_per_variant() {
    let base = Model::build(tiny_config(Variant::Base), 0).unwrap();
    assert_eq!(base.towers.len(), 1);
    assert_eq!(base.towers[0].classes, 8);
    assert!(base.gates.is_none() && base.projections.is_empty());

    let omoe = Model::build(tiny_config(Variant::Omoe), 0).unwrap();
    assert_eq!(omoe.gates.as_ref().unwrap().gates.len(), 1);
    let mmoe = Model::build(tiny_config(Variant::Mmoe), 0).unwrap();
    assert_eq!(mmoe.gates.as_ref().unwrap().gates.len(), 3);
    assert_eq!(mmoe.towers.len(), 3);
    assert_eq!(mmoe.towers[1].classes, 7);

    let mut cfg = tiny_config(Variant::Ours);
    for name in ["mfcc", "allosaurus"] {
        cfg.features.push(FeatureDecl { name: name.into(), kind: FeatureKind::Vector, dim: 2 });
    }
    let ours = Model::build(cfg, 0).unwrap();
    let nas = ours.nas.as_ref().unwrap();
    assert_eq!(nas.transitions.len(), 25);
    let kappas: usize = nas.log_kappa.iter().map(|&id| ours.store.get(id).numel()).sum();
    assert_eq!(kappas, 75);
    let total = ours.param_counts().last().unwrap().1;
    assert_eq!(total, ours.store.num_scalars());
}

#[test]
fn config_validation() {
    assert!(Variant::parse("MMoE").is_ok());
    assert!(Variant::parse("moe").is_err());
    let mut cfg = tiny_config(Variant::Mmoe);
    cfg.selector = "missing".into();
    assert!(Model::build(cfg, 0).is_err());
    let mut cfg = tiny_config(Variant::Mmoe);
    cfg.selector = "seq".into();
    assert!(Model::build(cfg, 0).is_err());
    let mut cfg = tiny_config(Variant::Sb);
    cfg.towers.remove("french");
    assert!(Model::build(cfg, 0).is_err());
    let mut cfg = tiny_config(Variant::Sb);
    cfg.towers.get_mut("german").unwrap().activations.clear();
    assert!(Model::build(cfg, 0).is_err());
    let model = Model::build(tiny_config(Variant::Sb), 0).unwrap();
    let mut s = Session::eval(&model.store);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    assert!(model.forward(&mut s, 3, &random_inputs(&mut r, 4)).is_err());
    assert!(model.forward(&mut s, 0, &random_inputs(&mut r, 4)[..2]).is_err());
}

#[test]
fn shared_bottom_inputs_do_not_depend_on_domain() {
    let model = Model::build(tiny_config(Variant::Sb), 1).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = random_inputs(&mut r, 5);
    let a = model.infer(0, &x).unwrap();
    let b = model.infer(2, &x).unwrap();
    assert_eq!(a.rep, b.rep);
    assert_ne!(a.logits.len(), b.logits.len());
}

#[test]
fn one_hot_gate_selects_projected_feature() {
    let mut model = Model::build(tiny_config(Variant::Mmoe), 2).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut x = random_inputs(&mut r, 4);
    x[1] = Tensor::vector(vec![0.5, 1.0, 0.25, 2.0]);
    let norm2: f64 = x[1].data().iter().map(|v| v * v).sum();
    let mut w = Tensor::zeros(&[3, 4]);
    for c in 0..4 {
        w.data_mut()[4 + c] = 2000.0 * x[1].data()[c] / norm2;
    }
    let gate = model.gates.as_ref().unwrap().gates[1];
    *model.store.get_mut(gate) = w;
    let out = model.infer(1, &x).unwrap();
    assert_eq!(out.gate.as_ref().unwrap(), &vec![0.0, 1.0, 0.0]);

    let mut s = Session::eval(&model.store);
    let e = model.features[1].encode(&mut s, &x[1]).unwrap();
    let p = model.projections[1].forward(&mut s, e).unwrap();
    assert_eq!(out.rep, s.value(p).data());
    // Another domain's gate is still uniform.
    let other = model.infer(0, &x).unwrap();
    assert!(other.gate.unwrap().iter().all(|&g| (g - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn base_restricts_to_domain_labels() {
    let model = Model::build(tiny_config(Variant::Base), 3).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let x = random_inputs(&mut r, 4);
    let mut s = Session::eval(&model.store);
    let fwd = model.forward(&mut s, 2, &x).unwrap();
    let all = s.value(fwd.logits).data().to_vec();
    let out = model.infer(2, &x).unwrap();
    let picks = [0, 1, 2, 3, 4, 7, 6];
    assert_eq!(out.logits, picks.iter().map(|&i| all[i]).collect::<Vec<_>>());
    assert_eq!(model.target(2, 5), 7);
    assert_eq!(model.target(1, 5), 5);
}

#[test]
fn eval_forward_is_deterministic_for_every_variant() {
    for v in [Variant::Single, Variant::Base, Variant::Sb, Variant::Omoe, Variant::Mmoe, Variant::Ours] {
        let model = Model::build(tiny_config(v), 4).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = random_inputs(&mut r, 6);
        let a = model.infer(1, &x).unwrap();
        let b = model.infer(1, &x).unwrap();
        assert_eq!(a, b);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.logits), bits(&b.logits));
    }
}

/// Frozen eval logits of a seed-5 `ours` model on a seed-5 input.
#[test]
fn golden_ours_logits() {
    let model = Model::build(tiny_config(Variant::Ours), 5).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let x = random_inputs(&mut r, 7);
    let out = model.infer(0, &x).unwrap();
    assert_eq!(out.logits.len(), GOLDEN.len());
    for (a, b) in out.logits.iter().zip(GOLDEN) {
        assert!((a - b).abs() < 1e-12, "{:?}", out.logits);
    }
}

const GOLDEN: [f64; 4] = [
    -0.09813474132771852,
    0.05454959305413488,
    -0.012635438329817197,
    -0.12736774670852535,
];

fn domain_loss(model: &Model, s: &mut Session<'_>, domain: usize, x: &[Tensor], label: usize) -> Var {
    let fwd = model.forward(s, domain, x).unwrap();
    crate::nn::cross_entropy(&mut s.graph, fwd.logits, &[model.target(domain, label)]).unwrap()
}

#[test]
fn gradients_stay_inside_the_batch_domain() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let x = random_inputs(&mut r, 5);
    for v in [Variant::Sb, Variant::Omoe, Variant::Mmoe, Variant::Ours] {
        let model = Model::build(tiny_config(v), 6).unwrap();
        let mut s = Session::eval(&model.store);
        let loss = domain_loss(&model, &mut s, 0, &x, 1);
        let grads = s.backward(loss).unwrap();
        for other in 1..3 {
            for id in model.domain_params(other) {
                assert!(grads.get(id).is_none(), "{v}: {}", model.store.name(id));
            }
        }
        for t in model.towers[0].params() {
            assert!(grads.get(t).is_some());
        }
        if v == Variant::Omoe {
            // The shared gate is reached from every domain.
            let g = model.gates.as_ref().unwrap().gates[0];
            for d in 0..3 {
                let mut s = Session::eval(&model.store);
                let loss = domain_loss(&model, &mut s, d, &x, 0);
                assert!(s.backward(loss).unwrap().touches(g));
            }
        }
    }
}

#[test]
fn ours_loss_passes_gradcheck() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let mut model = Model::build(tiny_config(Variant::Ours), 7).unwrap();
    // Move gates and routing off their symmetric starting points.
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        if name.starts_with("gates.") || name.starts_with("nas.") {
            let t = model.store.get_mut(id);
            for v in t.data_mut() {
                *v += r.random_range(-0.5..0.5);
            }
        }
    }
    let x = random_inputs(&mut r, 4);
    let err = param_finite_diff_check(
        &model.store,
        |s| {
            let fwd = model.forward(s, 1, &x)?;
            Ok::<_, Error>(crate::nn::cross_entropy(&mut s.graph, fwd.logits, &[3])?)
        },
        Mode::Train,
        11,
        None,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn checkpoint_round_trip() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let x = random_inputs(&mut r, 5);
    for v in [Variant::Single, Variant::Base, Variant::Ours] {
        let mut model = Model::build(tiny_config(v), 8).unwrap();
        for id in model.store.ids().collect::<Vec<_>>() {
            for val in model.store.get_mut(id).data_mut() {
                *val += r.random_range(-0.1..0.1);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(back.config, model.config);
        assert_eq!(back.infer(0, &x).unwrap(), model.infer(0, &x).unwrap());
        let table = std::fs::read_to_string(dir.path().join("params.tsv")).unwrap();
        assert!(table.starts_with("name\tshape\toffset\tlen\n"));
        assert!(table.contains("similarity.w\t\t"));
    }
    assert!(load_checkpoint(std::path::Path::new("/nonexistent/ckpt")).is_err());
}

#[test]
fn checkpoint_rejects_a_mismatched_table() {
    let model = Model::build(tiny_config(Variant::Sb), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let path = dir.path().join("params.tsv");
    let table = std::fs::read_to_string(&path).unwrap();
    let cut: Vec<&str> = table.lines().filter(|l| !l.starts_with("tower.french.out.bias")).collect();
    std::fs::write(&path, cut.join("\n")).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}
