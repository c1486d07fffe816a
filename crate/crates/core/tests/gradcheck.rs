//! Backprop versus central finite differences, in double precision.

mod common;

use common::*;
use tinyunet::graph::{BnState, Mode, Tape};
use tinyunet::model::{UNetConfig, Variant};
use tinyunet::train::loss::LossTarget;
use tinyunet::{Shape, Tensor};

const TOL: f64 = 1e-4;

fn assert_ok(name: &str, err: f64) {
    assert!(err <= TOL, "{name}: max relative error {err:e}");
}

#[test]
fn conv3x3() {
    let x = random(Shape::new(2, 3, 5, 4), 1);
    let k = random(Shape::new(4, 3, 3, 3), 2);
    assert_ok(
        "conv3x3",
        check_inputs(&[x, k], |g, v| {
            let y = g.conv2d(&v[0], &v[1]).unwrap();
            project(g, y, 3)
        }),
    );
}

#[test]
fn conv1x1() {
    let x = random(Shape::new(1, 5, 3, 3), 4);
    let k = random(Shape::new(2, 5, 1, 1), 5);
    assert_ok(
        "conv1x1",
        check_inputs(&[x, k], |g, v| {
            let y = g.conv2d(&v[0], &v[1]).unwrap();
            project(g, y, 6)
        }),
    );
}

#[test]
fn maxpool() {
    let x = random_kinkless(Shape::new(2, 2, 4, 6), 7);
    assert_ok(
        "maxpool2",
        check_inputs(&[x], |g, v| {
            let y = g.maxpool2(&v[0]).unwrap();
            project(g, y, 8)
        }),
    );
}

#[test]
fn upsample() {
    let x = random(Shape::new(1, 3, 3, 2), 9);
    assert_ok(
        "upsample2",
        check_inputs(&[x], |g, v| {
            let y = g.upsample2(&v[0]).unwrap();
            project(g, y, 10)
        }),
    );
}

#[test]
fn batchnorm_train() {
    let x = random(Shape::new(3, 2, 3, 3), 11);
    assert_ok(
        "batchnorm/train",
        check_inputs(&[x], |g, v| {
            let mut bn = BnState::new(2);
            let y = g.batchnorm(&v[0], &mut bn, Mode::Train).unwrap();
            project(g, y, 12)
        }),
    );
}

#[test]
fn batchnorm_infer() {
    let x = random(Shape::new(2, 3, 2, 2), 13);
    assert_ok(
        "batchnorm/infer",
        check_inputs(&[x], |g, v| {
            let mut bn = BnState::new(3);
            bn.running_mean = vec![0.3, -0.2, 0.1];
            bn.running_var = vec![0.5, 2.0, 1.3];
            let y = g.batchnorm(&v[0], &mut bn, Mode::Infer).unwrap();
            project(g, y, 14)
        }),
    );
}

#[test]
fn relu() {
    let x = random_kinkless(Shape::new(2, 2, 3, 3), 15);
    assert_ok(
        "relu",
        check_inputs(&[x], |g, v| {
            let y = g.relu(&v[0]).unwrap();
            project(g, y, 16)
        }),
    );
}

#[test]
fn softmax() {
    let x = random(Shape::new(2, 2, 3, 4), 17);
    assert_ok(
        "softmax2",
        check_inputs(&[x], |g, v| {
            let y = g.softmax2(&v[0]).unwrap();
            project(g, y, 18)
        }),
    );
}

#[test]
fn concat_and_add() {
    let a = random(Shape::new(2, 1, 3, 3), 19);
    let b = random(Shape::new(2, 2, 3, 3), 20);
    let c = random(Shape::new(2, 3, 3, 3), 21);
    assert_ok(
        "concat+add",
        check_inputs(&[a, b, c], |g, v| {
            let y = g.concat(&v[0], &v[1]).unwrap();
            let y = g.add(&y, &v[2]).unwrap();
            project(g, y, 22)
        }),
    );
}

#[test]
fn reductions_and_scale() {
    let x = random(Shape::new(1, 2, 3, 3), 23);
    assert_ok(
        "sum/sum_squares/scale",
        check_inputs(&[x], |g, v| {
            let a = g.sum_squares(v[0]);
            let b = g.sum(v[0]);
            let b = g.scale(b, 0.7);
            let s = g.add(&a, &b).unwrap();
            g.scale(s, -1.3)
        }),
    );
}

#[test]
fn focal_loss_through_softmax() {
    use std::sync::Arc;
    let s = Shape::new(2, 1, 3, 3);
    let labels = Tensor::from_fn(s, |n, _, y, x| ((n + y * 3 + x) % 3 == 0) as u8 as f64);
    let weights = Tensor::from_fn(s, |_, _, y, x| 0.5 + (y + x) as f64 * 0.3);
    let mask = Tensor::from_fn(s, |_, _, y, x| if y == 1 && x == 1 { 0.0 } else { 1.0 });
    for gamma in [0.0, 0.5, 2.0] {
        let target = Arc::new(LossTarget::new(labels.clone(), weights.clone(), mask.clone(), gamma).unwrap());
        let logits = random(Shape::new(2, 2, 3, 3), 24).map(|v| 2.0 * v);
        assert_ok(
            &format!("focal gamma={gamma}"),
            check_inputs(&[logits], |g, v| {
                let p = g.softmax2(&v[0]).unwrap();
                g.focal_loss(p, target.clone()).unwrap()
            }),
        );
    }
}

#[test]
fn full_network_l3_f2() {
    let obj = Objective::synthetic(2, 8, 8, 2.0, 1e-4, 31);
    assert_ok("U(L=3,f=2)", check_network(UNetConfig::new(3, 2), &obj, 1));
}

#[test]
fn objective_on_tiny_model() {
    let obj = Objective::synthetic(2, 6, 6, 2.0, 1e-2, 32);
    assert_ok("U(L=1,f=1)", check_network(UNetConfig::new(1, 1), &obj, 2));
}

#[test]
fn network_variants() {
    let obj = Objective::synthetic(2, 8, 8, 2.0, 1e-4, 33);
    for cfg in [
        UNetConfig::new(2, 2).with_variant(Variant::Residual),
        UNetConfig::new(2, 2).with_variant(Variant::Dense),
        UNetConfig::new(3, 2).with_variant(Variant::SideOutput),
        UNetConfig::new(2, 2).with_relu(false),
        UNetConfig::new(2, 2).with_convs(1),
    ] {
        // seed picked so no ReLU or max-pool switch falls within the step
        assert_ok(&format!("{cfg:?}"), check_network(cfg, &obj, 4));
    }
}
