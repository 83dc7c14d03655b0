mod support;

use support::gradients::{joint_loss_check, op_error, E2E_TOL, OPS, OP_TOL};

fn check(names: &[&str]) {
    for &name in names {
        assert!(OPS.contains(&name));
        let e = op_error(name);
        assert!(e < OP_TOL, "{name}: max relative error {e:e}");
    }
}

#[test]
fn conv2d_all_geometries() {
    check(&["conv2d", "conv2d/stride2", "conv2d/dilated", "conv2d/valid"]);
}

#[test]
fn relu_and_sigmoid() {
    check(&["relu", "sigmoid"]);
}

#[test]
fn bilinear_sample() {
    check(&["sample"]);
}

#[test]
fn softmax_and_gate() {
    check(&["softmax", "gate"]);
}

#[test]
fn structural_ops() {
    check(&["concat/add/scale/mean", "mul_const"]);
}

#[test]
fn pooling_linear_and_norm() {
    check(&["gap/linear/l2"]);
}

#[test]
fn oim_loss() {
    check(&["oim"]);
}

#[test]
fn joint_loss_end_to_end() {
    let c = joint_loss_check();
    assert!((150..=300).contains(&c.params), "toy has {} parameters", c.params);
    assert!(c.worst < E2E_TOL, "{}: relative error {:e}", c.worst_key, c.worst);
}
