mod common;

use common::*;
use newton_cnn::config::{init_params, LayerSpec, ModelConfig};
use newton_cnn::forward::{kink_margin, Network};
use newton_cnn::gauss_newton::{build_jacobian_cache, GNContext};
use newton_cnn::solver::estimate_resources;
use proptest::prelude::*;

const EPS: f64 = 1e-6;

fn point(cfg: &ModelConfig, l: usize, seed: u64) -> (Network, Vec<f64>, Vec<f64>) {
    let net = Network::new(cfg.clone()).unwrap();
    let mut r = rng(seed);
    for attempt in 0..200 {
        let images = uniform(&mut r, l * net.input_len());
        let theta = init_params(cfg, seed * 1000 + attempt).unwrap().into_vec();
        if kink_margin(&net, &theta, &images).unwrap() > 1e-4 {
            return (net, theta, images);
        }
    }
    panic!("no kink-free point found");
}

/// Dense `K·l × n` Jacobian of the stacked outputs by central differences.
fn fd_jacobian(net: &Network, theta: &[f64], images: &[f64]) -> Vec<Vec<f64>> {
    let n = theta.len();
    let rows = net.outputs(theta, images).unwrap().len();
    let mut jac = vec![vec![0.0; n]; rows];
    let mut t = theta.to_vec();
    for j in 0..n {
        t[j] = theta[j] + EPS;
        let p = net.outputs(&t, images).unwrap();
        t[j] = theta[j] - EPS;
        let m = net.outputs(&t, images).unwrap();
        t[j] = theta[j];
        for r in 0..rows {
            jac[r][j] = (p[r] - m[r]) / (2.0 * EPS);
        }
    }
    jac
}

#[test]
fn assembled_jacobian_matches_output_differences() {
    let (net, theta, images) = point(&tiny_cnn(), 3, 30);
    let cache = net.forward(&theta, &images).unwrap();
    let ctx = GNContext::new(&net, &theta, &cache, 0.05, 0.0).unwrap();
    let j = ctx.assemble_jacobian().unwrap();
    let fd = fd_jacobian(&net, &theta, &images);
    for (r, row) in fd.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            assert!((j.get(r, c) - v).abs() <= 1e-6 * v.abs().max(1.0), "J[{r},{c}] {} vs {v}", j.get(r, c));
        }
    }
}

#[test]
fn jv_and_jtq_equal_explicit_products() {
    let (net, theta, images) = point(&tiny_cnn(), 4, 31);
    let cache = net.forward(&theta, &images).unwrap();
    let ctx = GNContext::new(&net, &theta, &cache, 0.05, 0.3).unwrap();
    let j = ctx.assemble_jacobian().unwrap();
    let (rows, n) = (j.rows(), j.cols());
    let mut r = rng(2);
    for _ in 0..5 {
        let v = normal(&mut r, n);
        let want: Vec<f64> = (0..rows).map(|i| (0..n).map(|c| j.get(i, c) * v[c]).sum()).collect();
        assert!(rel_err(&ctx.jv(&v).unwrap(), &want) <= 1e-10);
        let q = normal(&mut r, rows);
        let want: Vec<f64> = (0..n).map(|c| (0..rows).map(|i| j.get(i, c) * q[i]).sum()).collect();
        assert!(rel_err(&ctx.jtq(&q).unwrap(), &want) <= 1e-10);
        // (1/C + λ)v + (2/|S|) Jᵀ J v
        let jv: Vec<f64> = (0..rows).map(|i| (0..n).map(|c| j.get(i, c) * v[c]).sum()).collect();
        let want: Vec<f64> = (0..n)
            .map(|c| (1.0 / 0.05 + 0.3) * v[c] + 2.0 / 4.0 * (0..rows).map(|i| j.get(i, c) * jv[i]).sum::<f64>())
            .collect();
        assert!(rel_err(&ctx.gn_matvec(&v).unwrap(), &want) <= 1e-10);
    }
    assert_eq!(ctx.jv(&vec![0.0; n]).unwrap(), vec![0.0; rows]);
    assert_eq!(ctx.jtq(&vec![0.0; rows]).unwrap(), vec![0.0; n]);
}

#[test]
fn squared_output_identity() {
    // qᵀ(Jv) with q = B·Jv/2 = Jv is ‖Jv‖², and ⟨v, Jᵀ q⟩ must agree.
    let (net, theta, images) = point(&tiny_cnn(), 3, 32);
    let cache = net.forward(&theta, &images).unwrap();
    let ctx = GNContext::new(&net, &theta, &cache, 0.05, 0.0).unwrap();
    let v = normal(&mut rng(3), net.num_params());
    let jv = ctx.jv(&v).unwrap();
    let (a, b) = (dot(&jv, &jv), dot(&v, &ctx.jtq(&jv).unwrap()));
    assert!((a - b).abs() <= 1e-10 * a);
}

#[test]
fn linear_network_cache_is_identity() {
    let cfg = ModelConfig {
        input: (4, 1, 1),
        layers: vec![LayerSpec::Fc { out_neurons: 3 }],
    };
    let (net, theta, images) = point(&cfg, 2, 33);
    let cache = net.forward(&theta, &images).unwrap();
    let jc = build_jacobian_cache(&net, &theta, &cache).unwrap();
    for i in 0..2 {
        for u in 0..3 {
            let want: Vec<f64> = (0..3).map(|t| (t == u) as u8 as f64).collect();
            assert_eq!(jc.block(0, u, i), &want[..]);
        }
    }
}

#[test]
fn dead_hidden_layer_has_zero_blocks_and_ridge_only_product() {
    let cfg = tiny_cnn();
    let net = Network::new(cfg.clone()).unwrap();
    let mut theta = init_params(&cfg, 1).unwrap().into_vec();
    let conv = net.layout.segments[0];
    for b in &mut theta[conv.bias_range()] {
        *b = -1e3;
    }
    let images = uniform(&mut rng(34), 2 * net.input_len());
    let cache = net.forward(&theta, &images).unwrap();
    let (c, lambda) = (0.05, 0.7);
    let ctx = GNContext::new(&net, &theta, &cache, c, lambda).unwrap();
    assert!(ctx.jacobian.layer(0).iter().all(|&x| x == 0.0));
    // Only the output bias reaches z; away from it J vanishes.
    let fc = net.layout.segments[1];
    let mut v = normal(&mut rng(35), net.num_params());
    for x in &mut v[fc.bias_range()] {
        *x = 0.0;
    }
    let gv = ctx.gn_matvec(&v).unwrap();
    let want: Vec<f64> = v.iter().map(|x| (1.0 / c + lambda) * x).collect();
    assert!(rel_err(&gv, &want) <= 1e-15);
}

#[test]
fn jacobian_memory_is_about_k_times_activations() {
    // Deep padded conv stack whose pre-activations match its inputs in size.
    let mut text = String::from("input a=16 b=16 d=8\n");
    for _ in 0..6 {
        text.push_str("conv h=3 out=8 pad=1\n");
    }
    text.push_str("fc out=10\n");
    let cfg = ModelConfig::parse(&text).unwrap();
    let rep = estimate_resources(&cfg, 100, 100).unwrap();
    let ratio = rep.jacobian as f64 / rep.activations as f64;
    assert!((ratio / 10.0 - 1.0).abs() < 0.2, "ratio {ratio}");
}

#[test]
fn table3_report_matches_hand_sums() {
    let cfg = ModelConfig::three_layer_cnn((28, 28, 1), 10);
    let (l, s) = (60_000usize, 3_000usize);
    let rep = estimate_resources(&cfg, l, s).unwrap();
    // conv1 28→24 (pool 12), conv2 12→10 (pool 5), conv3 5→3 (pool 1), fc 64→10
    assert_eq!(rep.weights, 32 * 25 + 64 * 9 * 32 + 64 * 9 * 64 + 10 * 64);
    assert_eq!(rep.gradient, rep.weights);
    assert_eq!(rep.phi_index, 25 * 576 + 9 * 32 * 100 + 9 * 64 * 9);
    assert_eq!(rep.activations, l * (784 + 12 * 12 * 32 + 5 * 5 * 64 + 64 + 10));
    assert_eq!(rep.phi_temp, l * (9 * 32 * 100));
    assert_eq!(rep.backward, l * (32 * 576 + 64 * 100));
    assert_eq!(rep.jacobian, s * 10 * (32 * 576 + 64 * 100 + 64 * 9 + 10));
    let macs = [32 * 25 * 576u128, 64 * 288 * 100, 64 * 576 * 9, 10 * 64];
    for (c, &m) in rep.layers.iter().zip(&macs) {
        assert_eq!(c.function, l as u128 * m);
        assert_eq!(c.gradient, 2 * l as u128 * m);
        assert_eq!(c.jacobian, (s * 10) as u128 * m);
        assert_eq!(c.matvec, 2 * s as u128 * m);
        assert_eq!(c.line_search, l as u128 * m);
    }
}

#[test]
fn degenerate_config_is_rejected() {
    let cfg = ModelConfig {
        input: (4, 4, 1),
        layers: vec![],
    };
    assert!(estimate_resources(&cfg, 10, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operator_is_adjoint_symmetric_and_ridge_bounded(seed in any::<u64>(), lambda in 0.0f64..5.0, c in 0.01f64..10.0) {
        let cfg = tiny_cnn();
        let net = Network::new(cfg.clone()).unwrap();
        let mut r = rng(seed);
        let theta = init_params(&cfg, seed).unwrap().into_vec();
        let images = uniform(&mut r, 3 * net.input_len());
        let cache = net.forward(&theta, &images).unwrap();
        let ctx = GNContext::new(&net, &theta, &cache, c, lambda).unwrap();
        let (u, w) = (normal(&mut r, theta.len()), normal(&mut r, theta.len()));
        let q = normal(&mut r, ctx.output_len());
        let (a, b) = (dot(&ctx.jv(&u).unwrap(), &q), dot(&u, &ctx.jtq(&q).unwrap()));
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()));
        let (gu, gw) = (ctx.gn_matvec(&u).unwrap(), ctx.gn_matvec(&w).unwrap());
        let (x, y) = (dot(&gu, &w), dot(&u, &gw));
        prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(y.abs()));
        prop_assert!(dot(&u, &gu) >= (1.0 / c + lambda) * dot(&u, &u) - 1e-10);
    }
}
