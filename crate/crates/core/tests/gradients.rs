use caupsi::tensor::op_suite;

const OPS: [&str; 18] = [
    "matmul", "bmm", "add", "sub", "mul", "scale", "relu", "tanh", "sigmoid", "log", "dropout", "concat", "slice", "reshape",
    "mean", "sum", "softmax", "layer_norm",
];

#[test]
fn every_op_passes_central_differences() {
    let report = op_suite(0, 10, 1e-4).unwrap();
    for op in OPS {
        assert!(report.iter().any(|c| c.op == op), "{op} missing");
    }
    for c in &report {
        assert!(c.shapes >= 10, "{c:?}");
        assert!(c.max_error < 1e-5, "{c:?}");
    }
}
