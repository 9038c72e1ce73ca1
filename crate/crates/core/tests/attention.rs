use erfseg::layers::ParamStore;
use erfseg::model::{build_unet, FpaBlock, FpaConfig, Network, NetworkSpec, RfnaBlock, RfnaConfig, Variant};
use erfseg::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn zero_prefix(params: &mut ParamStore<f32>, prefix: &str) {
    for (name, t) in params.iter_mut() {
        if name.starts_with(prefix) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn fpa_shapes() {
    let block = FpaBlock::new("stage1", 32, FpaConfig::default()).unwrap();
    let params = ParamStore::<f32>::init(&block.param_defs(), 0).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(randn(&[1, 32, 64, 64], 1));
    let out = block.forward(&mut tape, &bound, x).unwrap();
    assert_eq!(tape.value(out.y).shape(), &[1, 64, 32, 32]);
    assert_eq!(tape.value(out.a).shape(), &[1, 64, 32, 32]);
    assert_eq!(tape.value(out.f).shape(), &[1, 64, 32, 32]);
}

#[test]
fn rfna_shapes() {
    let cfg = RfnaConfig::default();
    let block = RfnaBlock::new("stage1", 32, cfg).unwrap();
    assert_eq!(block.attention_map_shape(64, 64), [4 * 64, 4, 4]);
    let params = ParamStore::<f32>::init(&block.param_defs(), 0).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(randn(&[1, 32, 64, 64], 2));
    let len_before = tape.len();
    let out = block.forward(&mut tape, &bound, x).unwrap();
    assert!(tape.len() > len_before);
    assert_eq!(tape.value(out.y).shape(), &[1, 64, 32, 32]);
    assert_eq!(tape.value(out.a).shape(), &[1, 64, 32, 32]);
}

#[test]
fn fpa_with_zeroed_projection_scales_f() {
    let block = FpaBlock::new("s", 3, FpaConfig::default()).unwrap();
    let mut params = ParamStore::<f32>::init(&block.param_defs(), 3).unwrap();
    zero_prefix(&mut params, "s.attn.wa3");
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(randn(&[2, 3, 16, 16], 4));
    let out = block.forward(&mut tape, &bound, x).unwrap();
    assert!(tape.value(out.a).data().iter().all(|&a| a == 0.5));
    for (y, f) in tape.value(out.y).data().iter().zip(tape.value(out.f).data()) {
        assert_eq!(*y, 1.5 * f);
    }
}

#[test]
fn rfna_with_zeroed_projection_is_bounded() {
    let block = RfnaBlock::new("s", 3, RfnaConfig { ratio: 4, ..Default::default() }).unwrap();
    let mut params = ParamStore::<f32>::init(&block.param_defs(), 5).unwrap();
    zero_prefix(&mut params, "s.attn.wa4");
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(randn(&[1, 3, 16, 16], 6));
    let out = block.forward(&mut tape, &bound, x).unwrap();
    let f = tape.value(out.f).data();
    let a = tape.value(out.a).data();
    let y = tape.value(out.y).data();
    for i in 0..f.len() {
        assert!(f[i] >= 0.0);
        assert_eq!(a[i], erfseg::autograd::stable_sigmoid(f[i]));
        assert!((0.5..1.0).contains(&a[i]) || (a[i] == 1.0 && f[i] > 15.0));
        assert!(y[i] >= 1.5 * f[i] && y[i] <= 2.0 * f[i]);
    }
}

#[test]
fn blocks_reject_bad_extents() {
    let fpa = FpaBlock::new("s", 2, FpaConfig::default()).unwrap();
    let rfna = RfnaBlock::new("s", 2, RfnaConfig::default()).unwrap();
    let params_f = ParamStore::<f32>::init(&fpa.param_defs(), 0).unwrap();
    let params_r = ParamStore::<f32>::init(&rfna.param_defs(), 0).unwrap();
    let mut tape = Tape::new();
    let bf = params_f.bind(&mut tape, false);
    let br = params_r.bind(&mut tape, false);
    let odd = tape.constant(randn(&[1, 2, 7, 8], 0));
    assert!(fpa.forward(&mut tape, &bf, odd).is_err());
    let short = tape.constant(randn(&[1, 2, 8, 8], 0));
    let err = rfna.forward(&mut tape, &br, short).unwrap_err().to_string();
    assert!(err.contains("16"), "{err}");
    let wrong_c = tape.constant(randn(&[1, 3, 16, 16], 0));
    assert!(fpa.forward(&mut tape, &bf, wrong_c).is_err());
}

fn ablation_grid() -> Vec<NetworkSpec> {
    let mut specs = Vec::new();
    for d in [6, 9, 12] {
        for (depthwise, exps) in [(false, vec![1, 2]), (true, vec![2, 4, 8])] {
            for e in exps {
                specs.push(NetworkSpec::new(Variant::Fpa).with_fpa(FpaConfig { dilation: d, depthwise, expansion: e }));
            }
        }
    }
    for ratio in [2, 4, 8] {
        for depthwise in [false, true] {
            for e in [2, 4, 8] {
                specs.push(NetworkSpec::new(Variant::Rfna).with_rfna(RfnaConfig { ratio, depthwise, expansion: e }));
            }
        }
    }
    specs
}

#[test]
fn equation_identity_and_open_interval_over_ablation_grid() {
    for (i, spec) in ablation_grid().into_iter().enumerate() {
        let spec = spec.with_base_channels(2);
        let (net, params) = build_unet::<f32>(&spec, i as u64).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(randn(&[1, 4, 64, 64], 100 + i as u64));
        let out = net.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(out.attention.len(), 3);
        for st in &out.attention {
            let f = tape.value(st.out.f).data();
            let a = tape.value(st.out.a).data();
            let y = tape.value(st.out.y).data();
            for k in 0..f.len() {
                assert_eq!(y[k].to_bits(), (f[k] * a[k] + f[k]).to_bits(), "{spec:?} stage {}", st.stage);
                assert!(a[k] > 0.0 && a[k] < 1.0, "{spec:?}: A = {}", a[k]);
            }
        }
    }
}

#[test]
fn network_shape_contract() {
    for v in [Variant::Unet, Variant::Fpa] {
        let spec = NetworkSpec::new(v).with_base_channels(2);
        let (net, params) = build_unet::<f32>(&spec, 0).unwrap();
        let y = net.predict(&params, &randn(&[1, 4, 160, 160], 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 160, 160]);
    }
    let rfna = Network::build(&NetworkSpec::new(Variant::Rfna)).unwrap();
    assert!(rfna.check_input(&[1, 4, 160, 160]).unwrap_err().to_string().contains("64"));
}

#[test]
fn zeroed_head_gives_bias_logits() {
    let spec = NetworkSpec::new(Variant::Fpa).with_base_channels(2);
    let (net, mut params) = build_unet::<f32>(&spec, 0).unwrap();
    let head = net.head_prefix().to_string();
    zero_prefix(&mut params, &format!("{head}.weight"));
    params.get_mut(&format!("{head}.bias")).unwrap().data_mut()[0] = 0.75;
    let y = net.predict(&params, &Tensor::full(&[2, 4, 16, 16], 0.3)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.75));
}

#[test]
fn forward_is_deterministic() {
    for v in Variant::ALL {
        let spec = NetworkSpec::new(v).with_base_channels(2);
        let x = randn(&[2, 4, 64, 64], 9);
        let a = {
            let (net, p) = build_unet::<f32>(&spec, 42).unwrap();
            net.predict(&p, &x).unwrap()
        };
        let (net, p) = build_unet::<f32>(&spec, 42).unwrap();
        let b = net.predict(&p, &x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()), "{v}");
    }
}

#[test]
fn every_parameter_receives_a_gradient() {
    for v in Variant::ALL {
        let spec = NetworkSpec::new(v).with_base_channels(2);
        let (net, params) = build_unet::<f32>(&spec, 1).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.constant(randn(&[1, 4, 64, 64], 2));
        let out = net.forward(&mut tape, &bound, x).unwrap();
        let loss = tape.sum(out.logits);
        let grads = tape.backward(loss).unwrap();
        assert!(bound.unreached(&grads).is_empty(), "{v}: {:?}", bound.unreached(&grads));
    }
}

#[test]
fn shared_dilated_weight_affects_both_applications() {
    let block = FpaBlock::new("s", 2, FpaConfig { dilation: 2, ..Default::default() }).unwrap();
    let names: Vec<String> = block.param_defs().into_iter().map(|d| d.name).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("s.attn.wa2.weight")).count(), 1);
    let params = ParamStore::<f64>::init(&block.param_defs(), 0).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant(Tensor::randn(&[1, 2, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
    let before = tape.len();
    let out = block.forward(&mut tape, &bound, x).unwrap();
    assert!(tape.len() > before);
    let s = tape.sum(out.y);
    let g = tape.backward(s).unwrap();
    assert!(g.reached(bound.get("s.attn.wa2.weight").unwrap()));
}

#[test]
fn parameter_count_anchors() {
    let count = |spec: NetworkSpec| build_unet::<f32>(&spec, 0).unwrap().1.count_params();
    let unet = count(NetworkSpec::new(Variant::Unet));
    let wunet = count(NetworkSpec::new(Variant::Wunet));
    let fpa = count(NetworkSpec::new(Variant::Fpa));
    let rfna = count(NetworkSpec::new(Variant::Rfna));
    assert_eq!(count(NetworkSpec::new(Variant::D6unet)), unet);
    assert_eq!(count(NetworkSpec::new(Variant::D9unet)), unet);
    let ratio = wunet as f64 / unet as f64;
    assert!(ratio > 3.9 && ratio < 4.0, "{ratio}");
    assert!(unet < fpa && fpa < rfna);
    for (n, paper) in [(unet, 3.13e6), (fpa, 4.2e6), (rfna, 5.63e6)] {
        let rel = (n as f64 - paper) / paper;
        assert!(rel.abs() <= 0.4, "{n} vs {paper}: {rel}");
    }
}
