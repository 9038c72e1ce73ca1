use erfseg::autograd::{stable_sigmoid, INSTANCE_NORM_EPS};
use erfseg::{ConvSpec, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.conv2d(xv, wv, bv, spec).unwrap();
    tape.value(y).clone()
}

/// Direct nested-loop cross-correlation.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: &ConvSpec) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims4().unwrap();
    let (kh, kw) = s.kernel;
    let (ph, pw) = s.padding;
    let d = s.dilation;
    let oh = (h + 2 * ph - d * (kh - 1) - 1) / s.stride + 1;
    let ow = (wd + 2 * pw - d * (kw - 1) - 1) / s.stride + 1;
    let cin_g = cin / s.groups;
    let cout_g = s.out_channels / s.groups;
    let mut out = vec![0.0; n * s.out_channels * oh * ow];
    for bi in 0..n {
        for co in 0..s.out_channels {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s.stride + ky * d) as isize - ph as isize;
                                let ix = (ox * s.stride + kx * d) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((bi * cin + g * cin_g + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin_g + ci) * kh + ky) * kw + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[((bi * s.out_channels + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![n, s.out_channels, oh, ow], out).unwrap()
}

fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut rng(0));
    let w = Tensor::ones(&[1, 1, 1, 1]);
    let spec = ConvSpec::same(1, 1, 1);
    assert_eq!(conv(&x, &w, None, &spec), x);
}

#[test]
fn dilated_ones_kernel_sums_nine() {
    let x = Tensor::ones(&[1, 1, 5, 5]);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let spec = ConvSpec::same(1, 1, 3).dilated(2).with_padding(0);
    let y = conv(&x, &w, None, &spec);
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[9.0]);
}

#[test]
fn strided_conv_matches_loop_oracle() {
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng(1));
    let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng(2));
    let b = Tensor::randn(&[4], 1.0, &mut rng(3));
    let spec = ConvSpec::same(3, 4, 3).strided(2);
    assert!(max_rel(&conv(&x, &w, Some(&b), &spec), &conv_oracle(&x, &w, Some(&b), &spec)) <= 1e-6);
    let spec = ConvSpec::same(3, 4, 3).strided(2).with_padding(0);
    assert!(max_rel(&conv(&x, &w, None, &spec), &conv_oracle(&x, &w, None, &spec)) <= 1e-6);
}

#[test]
fn dilated_and_depthwise_conv_match_loop_oracle() {
    let x = Tensor::randn(&[2, 4, 9, 7], 1.0, &mut rng(4));
    let cases = [
        ConvSpec::same(4, 6, 3).dilated(2),
        ConvSpec::same(4, 4, 3).dilated(3).depthwise(),
        ConvSpec::same(4, 4, 3).strided(2).depthwise(),
        ConvSpec::same(4, 2, 1),
        ConvSpec::same(4, 8, 5),
    ];
    for (i, spec) in cases.iter().enumerate() {
        let ws = spec.weight_shape();
        let w = Tensor::randn(&ws, 1.0, &mut rng(10 + i as u64));
        let b = Tensor::randn(&[spec.out_channels], 1.0, &mut rng(20 + i as u64));
        let err = max_rel(&conv(&x, &w, Some(&b), spec), &conv_oracle(&x, &w, Some(&b), spec));
        assert!(err <= 1e-6, "{spec:?}: {err}");
    }
}

#[test]
fn conv_rejects_inconsistent_specs() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
    assert!(tape.conv2d(x, w, None, &ConvSpec::same(4, 2, 3)).is_err());
    let w9 = tape.constant(Tensor::zeros(&[2, 3, 3, 3]));
    let oversize = ConvSpec::same(3, 2, 3).dilated(9).with_padding(0);
    assert!(tape.conv2d(x, w9, None, &oversize).is_err());
}

#[test]
fn delta_weight_touches_exactly_the_dilated_extent() {
    for (d, k) in [(1, 3), (2, 3), (3, 3), (2, 5), (4, 3)] {
        let spec = ConvSpec::same(1, 1, k).dilated(d);
        let extent = d * (k - 1) + 1;
        let size = extent + 6;
        let mut x = Tensor::zeros(&[1, 1, size, size]);
        x.data_mut()[(size / 2) * size + size / 2] = 1.0;
        let w = Tensor::ones(&[1, 1, k, k]);
        let y = conv(&x, &w, None, &spec);
        let rows: Vec<usize> = (0..size).filter(|r| (0..size).any(|c| y.data()[r * size + c] != 0.0)).collect();
        let cols: Vec<usize> = (0..size).filter(|c| (0..size).any(|r| y.data()[r * size + c] != 0.0)).collect();
        assert_eq!(rows.last().unwrap() - rows[0] + 1, extent, "d={d} k={k}");
        assert_eq!(cols.last().unwrap() - cols[0] + 1, extent, "d={d} k={k}");
    }
}

fn pool(x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.maxpool2d(v).unwrap();
    tape.value(y).clone()
}

#[test]
fn maxpool_examples() {
    let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(pool(&x).data(), &[4.0]);

    let x = Tensor::randn(&[1, 1, 6, 6], 1.0, &mut rng(5));
    let y = pool(&x);
    for oy in 0..3 {
        for ox in 0..3 {
            let mut m = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    m = m.max(x.data()[(2 * oy + dy) * 6 + 2 * ox + dx]);
                }
            }
            assert_eq!(y.data()[oy * 3 + ox], m);
        }
    }

    let mut tape = Tape::<f64>::new();
    let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
    assert!(tape.maxpool2d(odd).is_err());
}

#[test]
fn maxpool_ties_route_to_top_left() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[1, 1, 4, 4], 2.5f64));
    let y = tape.maxpool2d(x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap().get(x);
    for r in 0..4 {
        for c in 0..4 {
            let expected = if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 };
            assert_eq!(g.data()[r * 4 + c], expected);
        }
    }
}

fn upsample(x: &Tensor<f64>, s: usize) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.bilinear_upsample(v, s).unwrap();
    tape.value(y).clone()
}

#[test]
fn upsample_single_pixel_and_constant() {
    let x = Tensor::from_vec(vec![1, 1, 1, 1], vec![3.25]).unwrap();
    assert_eq!(upsample(&x, 2).data(), &[3.25; 4]);
    for s in [2, 4, 8] {
        let y = upsample(&Tensor::full(&[2, 3, 3, 2], -1.5), s);
        assert_eq!(y.shape(), &[2, 3, 3 * s, 2 * s]);
        assert!(y.data().iter().all(|&v| (v + 1.5).abs() < 1e-12));
    }
}

#[test]
fn upsample_matches_hand_weights() {
    // Half-pixel centers, scale 2, 2×2 source: source coordinate of output i is
    // (i + 0.5)/2 − 0.5 ∈ {−0.25, 0.25, 0.75, 1.25}, clamped to [0, 1]:
    // weights on (src0, src1) per output index: (1,0), (0.75,0.25), (0.25,0.75), (0,1).
    let taps = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
    let src = [1.0, 2.0, 3.0, 4.0];
    let x = Tensor::from_vec(vec![1, 1, 2, 2], src.to_vec()).unwrap();
    let y = upsample(&x, 2);
    for oy in 0..4 {
        for ox in 0..4 {
            let mut v = 0.0;
            for sy in 0..2 {
                for sx in 0..2 {
                    v += taps[oy][sy] * taps[ox][sx] * src[sy * 2 + sx];
                }
            }
            assert!((y.data()[oy * 4 + ox] - v).abs() < 1e-14, "({oy},{ox})");
        }
    }
}

fn norm(x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let g = tape.constant(gamma.clone());
    let b = tape.constant(beta.clone());
    let y = tape.instance_norm(v, g, b, INSTANCE_NORM_EPS).unwrap();
    tape.value(y).clone()
}

#[test]
fn instance_norm_matches_two_pass_oracle() {
    let x = Tensor::randn(&[2, 3, 4, 4], 2.0, &mut rng(6));
    let gamma = Tensor::randn(&[3], 1.0, &mut rng(7));
    let beta = Tensor::randn(&[3], 1.0, &mut rng(8));
    let y = norm(&x, &gamma, &beta);
    for plane in 0..6 {
        let c = plane % 3;
        let xs = &x.data()[plane * 16..(plane + 1) * 16];
        let mean = xs.iter().sum::<f64>() / 16.0;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        for (i, v) in xs.iter().enumerate() {
            let expected = gamma.data()[c] * (v - mean) / (var + INSTANCE_NORM_EPS).sqrt() + beta.data()[c];
            assert!((y.data()[plane * 16 + i] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn instance_norm_standardizes_and_handles_constants() {
    let x = Tensor::randn(&[2, 2, 5, 3], 4.0, &mut rng(9));
    let y = norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]));
    for plane in y.data().chunks(15) {
        let mean = plane.iter().sum::<f64>() / 15.0;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 15.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
    let beta = Tensor::from_vec(vec![2], vec![0.3, -0.7]).unwrap();
    let y = norm(&Tensor::full(&[1, 2, 3, 3], 5.0), &Tensor::ones(&[2]), &beta);
    assert!(y.data()[..9].iter().all(|&v| v == 0.3));
    assert!(y.data()[9..].iter().all(|&v| v == -0.7));
}

#[test]
fn instance_norm_rejects_single_pixel_planes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(tape.instance_norm(x, g, b, 1e-5).is_err());
}

#[test]
fn pointwise_examples() {
    assert_eq!(stable_sigmoid(0.0f64), 0.5);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(vec![3], vec![-2.0, -0.5, 3.0]).unwrap());
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
    let y = tape.constant(Tensor::zeros(&[4]));
    assert!(tape.add(x, y).is_err());
    assert!(tape.mul(x, y).is_err());
}

fn rand_tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::from_vec(shape.to_vec(), d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear(
        x in rand_tensor(&[1, 2, 6, 6]),
        y in rand_tensor(&[1, 2, 6, 6]),
        w in rand_tensor(&[3, 2, 3, 3]),
        a in -2.0f64..2.0,
        d in 1usize..3,
    ) {
        let spec = ConvSpec::same(2, 3, 3).dilated(d);
        let mixed: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + q).collect();
        let lhs = conv(&Tensor::from_vec(vec![1, 2, 6, 6], mixed).unwrap(), &w, None, &spec);
        let cx = conv(&x, &w, None, &spec);
        let cy = conv(&y, &w, None, &spec);
        let scale = lhs.max_abs().max(1.0);
        for i in 0..lhs.numel() {
            let rhs = a * cx.data()[i] + cy.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn instance_norm_ignores_positive_affine_input_maps(
        x in rand_tensor(&[2, 2, 4, 4]),
        scales in prop::collection::vec(0.1f64..10.0, 4),
        shifts in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        let vars: Vec<f64> = x.data().chunks(16).map(|p| {
            let m = p.iter().sum::<f64>() / 16.0;
            p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0
        }).collect();
        prop_assume!(vars.iter().all(|&v| v > 0.05));
        let moved: Vec<f64> = x.data().iter().enumerate()
            .map(|(i, v)| scales[i / 16] * v + shifts[i / 16])
            .collect();
        let g = Tensor::ones(&[2]);
        let b = Tensor::zeros(&[2]);
        let a = norm(&x, &g, &b);
        let m = norm(&Tensor::from_vec(vec![2, 2, 4, 4], moved).unwrap(), &g, &b);
        // z − z' = d·(1/√(v+ε) − 1/√(v+ε/s²)) with |d|/√v < 4, hence ≤ 2ε·max(1, s⁻²)/v
        for (i, (p, q)) in a.data().iter().zip(m.data()).enumerate() {
            let (v, s) = (vars[i / 16], scales[i / 16]);
            let bound = 2.0 * 1e-5 * (1.0f64).max(1.0 / (s * s)) / v + 1e-12;
            prop_assert!((p - q).abs() <= bound, "{} vs {} (bound {bound})", p, q);
        }
    }

    #[test]
    fn upsample_is_linear(x in rand_tensor(&[1, 2, 3, 3]), y in rand_tensor(&[1, 2, 3, 3]), a in -2.0f64..2.0, s in prop::sample::select(vec![2usize, 4, 8])) {
        let mixed: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + q).collect();
        let lhs = upsample(&Tensor::from_vec(vec![1, 2, 3, 3], mixed).unwrap(), s);
        let ux = upsample(&x, s);
        let uy = upsample(&y, s);
        for i in 0..lhs.numel() {
            prop_assert!((lhs.data()[i] - (a * ux.data()[i] + uy.data()[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn upsample_preserves_constants(c in -10.0f64..10.0, s in prop::sample::select(vec![2usize, 4, 8])) {
        let y = upsample(&Tensor::full(&[1, 1, 2, 3], c), s);
        prop_assert!(y.data().iter().all(|v| (v - c).abs() <= 1e-12));
    }

    #[test]
    fn forward_ops_keep_finite_values(x in rand_tensor(&[1, 2, 4, 4])) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.sigmoid(v);
        let p = tape.maxpool2d(s).unwrap();
        let u = tape.bilinear_upsample(p, 2).unwrap();
        prop_assert!(tape.value(u).all_finite());
        prop_assert!(tape.is_topologically_ordered());
    }
}
