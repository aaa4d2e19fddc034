//! Finite-difference verification of every differentiable operation and of
//! the full KernelWarehouse layer stack.

use kw_core::kwconv::{kw_forward_tape, AttentionFn, KWConvLayer, Warehouse};
use kw_core::planner::{parse_arch_spec, plan_warehouses, BudgetRatio};
use kw_core::tensor::gradcheck::finite_diff_check;
use kw_core::tensor::tape::GradTape;
use kw_core::tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn random_tensor(shape: &[usize], rng: &mut StdRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random values bounded away from zero, for inputs feeding kinked ops.
fn random_offzero(shape: &[usize], rng: &mut StdRng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = StdRng::seed_from_u64(21);
    let x = random_tensor(&[2, 3, 6, 6], &mut rng);
    let w = random_tensor(&[2, 3, 3, 3], &mut rng);

    let mut tape = GradTape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let y = tape.conv2d(xv, wv, 2, 1).unwrap();
    let loss = tape.sum_all(y);
    let grads = tape.backward(loss).unwrap();
    let analytic = [grads.wrt(&tape, xv), grads.wrt(&tape, wv)];

    let report = finite_diff_check(&[x, w], &analytic, 1e-5, 40, |p| {
        let mut t = GradTape::new();
        let a = t.leaf(p[0].clone());
        let b = t.leaf(p[1].clone());
        let y = t.conv2d(a, b, 2, 1)?;
        let l = t.sum_all(y);
        t.value(l).item()
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{:?}", report);
}

#[test]
fn pool_affine_relu_and_cross_entropy_gradients() {
    let mut rng = StdRng::seed_from_u64(33);
    let x = random_offzero(&[2, 3, 4, 4], &mut rng);
    let m = random_tensor(&[5, 3], &mut rng);
    let bias = random_tensor(&[5], &mut rng);
    let labels = [3usize, 1];

    let forward = |p: &[Tensor]| -> kw_core::tensor::Result<f64> {
        let mut t = GradTape::new();
        let xv = t.leaf(p[0].clone());
        let mv = t.leaf(p[1].clone());
        let bv = t.leaf(p[2].clone());
        let pooled = t.global_avg_pool(xv)?;
        let aff = t.dense_affine(pooled, mv, bv)?;
        let act = t.relu(aff);
        let loss = t.softmax_cross_entropy(act, &labels)?;
        t.value(loss).item()
    };

    let mut tape = GradTape::new();
    let xv = tape.leaf(x.clone());
    let mv = tape.leaf(m.clone());
    let bv = tape.leaf(bias.clone());
    let pooled = tape.global_avg_pool(xv).unwrap();
    let aff = tape.dense_affine(pooled, mv, bv).unwrap();
    let act = tape.relu(aff);
    let loss = tape.softmax_cross_entropy(act, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic = [
        grads.wrt(&tape, xv),
        grads.wrt(&tape, mv),
        grads.wrt(&tape, bv),
    ];

    let report = finite_diff_check(&[x, m, bias], &analytic, 1e-5, 30, forward).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{:?}", report);
}

struct LayerFixture {
    layer: KWConvLayer,
    warehouse: Warehouse,
    x: Tensor,
}

/// Move freshly initialized (zero) biases off the ReLU and |z| kinks so the
/// loss is smooth in an epsilon-neighborhood of the evaluation point; central
/// differences are meaningless across the kinks themselves.
fn jitter_biases(layer: &mut KWConvLayer, rng: &mut StdRng) {
    let a = &mut layer.attention;
    a.fc1_bias = Tensor::from_fn(a.fc1_bias.shape(), |_| rng.gen_range(0.2..0.5));
    a.fc2_bias = Tensor::from_fn(a.fc2_bias.shape(), |_| {
        let v: f64 = rng.gen_range(0.1..0.5);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
}

/// One KW layer over a shared-warehouse plan with a zero cell (b = 1/2).
fn single_layer_fixture(seed: u64, fun: AttentionFn) -> LayerFixture {
    let text = r#"{
        "layers": [ { "id": "l0", "kernel": [4, 8, 3, 3], "stride": 1, "pad": 1,
                      "kind": "standard", "warehouse_group": "g" },
                    { "id": "l1", "kernel": [4, 4, 3, 3], "stride": 1, "pad": 1,
                      "kind": "standard", "warehouse_group": "g" } ],
        "groups": [ { "name": "g", "cell_policy": "gcd" } ]
    }"#;
    let arch = parse_arch_spec(text).unwrap();
    let plan = plan_warehouses(&arch, BudgetRatio::new(1, 2).unwrap(), None).unwrap();
    let group = &plan.groups[0];
    assert!(group.has_zero_cell);

    let mut rng = StdRng::seed_from_u64(seed);
    let warehouse = Warehouse::from_plan(group, &mut rng);
    let mut layer = KWConvLayer::from_plan(&arch.layers[0], group, 0, fun, true, &mut rng);
    jitter_biases(&mut layer, &mut rng);
    let x = random_tensor(&[1, 8, 6, 6], &mut rng);
    LayerFixture { layer, warehouse, x }
}

fn layer_params(fix: &LayerFixture) -> Vec<Tensor> {
    let mut p = fix.warehouse.cells.clone();
    p.push(fix.layer.attention.fc1_weight.clone());
    p.push(fix.layer.attention.fc1_bias.clone());
    p.push(fix.layer.attention.fc2_weight.clone());
    p.push(fix.layer.attention.fc2_bias.clone());
    p
}

fn layer_loss(fix: &LayerFixture, params: &[Tensor], tau: f64) -> kw_core::tensor::Result<f64> {
    let n = fix.warehouse.cells.len();
    let mut tape = GradTape::new();
    let xv = tape.leaf(fix.x.clone());
    let cells: Vec<_> = params[..n].iter().map(|c| tape.leaf(c.clone())).collect();
    let attn = kw_core::kwconv::AttentionVars {
        fc1_weight: tape.leaf(params[n].clone()),
        fc1_bias: tape.leaf(params[n + 1].clone()),
        fc2_weight: tape.leaf(params[n + 2].clone()),
        fc2_bias: tape.leaf(params[n + 3].clone()),
    };
    let y = kw_forward_tape(&mut tape, xv, &fix.layer, &attn, &cells, tau)?;
    let loss = tape.sum_all(y);
    tape.value(loss).item()
}

#[test]
fn full_layer_gradients_at_three_temperatures() {
    for (seed, fun) in [
        (401, AttentionFn::Naf),
        (402, AttentionFn::Softmax),
        (403, AttentionFn::Sigmoid),
        (404, AttentionFn::ReluNorm),
    ] {
        let fix = single_layer_fixture(seed, fun);
        let params = layer_params(&fix);
        for tau in [0.0, 0.37, 1.0] {
            let n = fix.warehouse.cells.len();
            // Analytic gradients via the tape.
            let mut tape = GradTape::new();
            let xv = tape.leaf(fix.x.clone());
            let cells: Vec<_> = params[..n].iter().map(|c| tape.leaf(c.clone())).collect();
            let attn = kw_core::kwconv::AttentionVars {
                fc1_weight: tape.leaf(params[n].clone()),
                fc1_bias: tape.leaf(params[n + 1].clone()),
                fc2_weight: tape.leaf(params[n + 2].clone()),
                fc2_bias: tape.leaf(params[n + 3].clone()),
            };
            let y = kw_forward_tape(&mut tape, xv, &fix.layer, &attn, &cells, tau).unwrap();
            let loss = tape.sum_all(y);
            let grads = tape.backward(loss).unwrap();
            let mut analytic: Vec<Tensor> =
                cells.iter().map(|&c| grads.wrt(&tape, c)).collect();
            analytic.push(grads.wrt(&tape, attn.fc1_weight));
            analytic.push(grads.wrt(&tape, attn.fc1_bias));
            analytic.push(grads.wrt(&tape, attn.fc2_weight));
            analytic.push(grads.wrt(&tape, attn.fc2_bias));

            let report =
                finite_diff_check(&params, &analytic, 1e-5, 12, |p| layer_loss(&fix, p, tau))
                    .unwrap();
            assert!(
                report.max_rel_error <= 1e-4,
                "fun {fun:?} tau {tau}: {report:?}"
            );
        }
    }
}

/// Two layers sharing one warehouse; gradient contributions from both layers
/// accumulate into the same cells.
#[test]
fn two_layer_shared_warehouse_gradients() {
    let text = r#"{
        "layers": [ { "id": "l0", "kernel": [4, 3, 3, 3], "stride": 1, "pad": 1,
                      "kind": "standard", "warehouse_group": "g" },
                    { "id": "l1", "kernel": [4, 4, 3, 3], "stride": 2, "pad": 1,
                      "kind": "standard", "warehouse_group": "g" } ],
        "groups": [ { "name": "g", "cell_policy": "gcd" } ],
        "budget_b": "1/7"
    }"#;
    let arch = parse_arch_spec(text).unwrap();
    let b = arch.budget_b.unwrap();
    let plan = plan_warehouses(&arch, b, None).unwrap();
    let group = &plan.groups[0];
    assert_eq!(group.m_t, 63);
    assert_eq!(group.n, 9);

    let mut rng = StdRng::seed_from_u64(77);
    let warehouse = Warehouse::from_plan(group, &mut rng);
    let mut l0 =
        KWConvLayer::from_plan(&arch.layers[0], group, 0, AttentionFn::Naf, true, &mut rng);
    let mut l1 =
        KWConvLayer::from_plan(&arch.layers[1], group, 1, AttentionFn::Naf, true, &mut rng);
    jitter_biases(&mut l0, &mut rng);
    jitter_biases(&mut l1, &mut rng);
    let x = random_tensor(&[1, 3, 6, 6], &mut rng);

    let n = warehouse.cells.len();
    let pack = |w: &Warehouse, a: &KWConvLayer, b2: &KWConvLayer| -> Vec<Tensor> {
        let mut p = w.cells.clone();
        for at in [&a.attention, &b2.attention] {
            p.push(at.fc1_weight.clone());
            p.push(at.fc1_bias.clone());
            p.push(at.fc2_weight.clone());
            p.push(at.fc2_bias.clone());
        }
        p
    };
    let params = pack(&warehouse, &l0, &l1);

    let run = |p: &[Tensor], tau: f64| -> kw_core::tensor::Result<(GradTape, Vec<kw_core::tensor::tape::Var>, kw_core::tensor::tape::Var)> {
        let mut tape = GradTape::new();
        let xv = tape.leaf(x.clone());
        let mut vars = Vec::new();
        let cells: Vec<_> = p[..n].iter().map(|c| tape.leaf(c.clone())).collect();
        vars.extend(cells.iter().copied());
        let a0 = kw_core::kwconv::AttentionVars {
            fc1_weight: tape.leaf(p[n].clone()),
            fc1_bias: tape.leaf(p[n + 1].clone()),
            fc2_weight: tape.leaf(p[n + 2].clone()),
            fc2_bias: tape.leaf(p[n + 3].clone()),
        };
        let a1 = kw_core::kwconv::AttentionVars {
            fc1_weight: tape.leaf(p[n + 4].clone()),
            fc1_bias: tape.leaf(p[n + 5].clone()),
            fc2_weight: tape.leaf(p[n + 6].clone()),
            fc2_bias: tape.leaf(p[n + 7].clone()),
        };
        for v in [a0.fc1_weight, a0.fc1_bias, a0.fc2_weight, a0.fc2_bias, a1.fc1_weight, a1.fc1_bias, a1.fc2_weight, a1.fc2_bias] {
            vars.push(v);
        }
        let h = kw_forward_tape(&mut tape, xv, &l0, &a0, &cells, tau)?;
        let h = tape.relu(h);
        let y = kw_forward_tape(&mut tape, h, &l1, &a1, &cells, tau)?;
        let loss = tape.sum_all(y);
        Ok((tape, vars, loss))
    };

    for tau in [0.0, 0.37, 1.0] {
        let (tape, vars, loss) = run(&params, tau).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
        let report = finite_diff_check(&params, &analytic, 1e-5, 10, |p| {
            let (tape, _, loss) = run(p, tau)?;
            tape.value(loss).item()
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "tau {tau}: {report:?}");
    }
}

/// At tau = 1 the mixture is the frozen beta tiling, so warehouse-cell
/// gradients must match the gradients of the statically tiled convolution.
#[test]
fn tau_one_cell_gradients_match_static_tiling() {
    let fix = single_layer_fixture(500, AttentionFn::Naf);
    let n = fix.warehouse.cells.len();
    let params = layer_params(&fix);

    let mut tape = GradTape::new();
    let xv = tape.leaf(fix.x.clone());
    let cells: Vec<_> = params[..n].iter().map(|c| tape.leaf(c.clone())).collect();
    let attn = kw_core::kwconv::AttentionVars {
        fc1_weight: tape.leaf(params[n].clone()),
        fc1_bias: tape.leaf(params[n + 1].clone()),
        fc2_weight: tape.leaf(params[n + 2].clone()),
        fc2_bias: tape.leaf(params[n + 3].clone()),
    };
    let y = kw_forward_tape(&mut tape, xv, &fix.layer, &attn, &cells, 1.0).unwrap();
    let loss = tape.sum_all(y);
    let grads = tape.backward(loss).unwrap();

    // Independent static route: tile W from beta, convolve, backprop.
    let mut tape2 = GradTape::new();
    let xv2 = tape2.leaf(fix.x.clone());
    let cells2: Vec<_> = params[..n].iter().map(|c| tape2.leaf(c.clone())).collect();
    let alpha = tape2.leaf(fix.layer.beta.clone());
    let part = std::rc::Rc::new(fix.layer.partition.clone());
    let w = kw_core::kwconv::assemble_kernel_tape(&mut tape2, alpha, &cells2, &part).unwrap();
    let y2 = tape2
        .conv2d(xv2, w, fix.layer.spec.stride, fix.layer.spec.pad)
        .unwrap();
    let loss2 = tape2.sum_all(y2);
    let grads2 = tape2.backward(loss2).unwrap();

    for (c1, c2) in cells.iter().zip(&cells2) {
        let g1 = grads.wrt(&tape, *c1);
        let g2 = grads2.wrt(&tape2, *c2);
        assert!(g1.max_abs_diff(&g2).unwrap() <= 1e-12);
    }
    // Attention parameters receive no gradient at tau = 1 with the blend
    // fully on beta.
    let ga = grads.wrt(&tape, attn.fc2_weight);
    assert!(ga.data().iter().all(|&v| v == 0.0));
}
