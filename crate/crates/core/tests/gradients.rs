//! Reverse-mode gradients against central finite differences.

use modalcompose::numcore::{finite_diff_grad, Activation, Graph, Mlp, MlpSpec, ParamSet, Tensor};
use modalcompose::rng::{seeded, uniform, uniform_inclusive, Rng};
use modalcompose::Result;

const H: f64 = 1e-5;

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over all coordinates.
fn relative_error(analytic: &ParamSet, numeric: &ParamSet) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for name in analytic.names() {
        let a = analytic.grad(name).unwrap().data();
        let n = numeric.get(name).unwrap().data();
        for (x, y) in a.iter().zip(n) {
            diff += (x - y) * (x - y);
            na += x * x;
            nn += y * y;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-300)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| uniform(rng, -1.0, 1.0)).collect(),
    )
    .unwrap()
}

fn check(
    params: &mut ParamSet,
    mut build: impl FnMut(&mut Graph, &ParamSet) -> Result<modalcompose::numcore::NodeId>,
) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, params).unwrap();
    g.backward(loss, params).unwrap();
    let numeric = finite_diff_grad(
        |p| {
            let mut g = Graph::new();
            let l = build(&mut g, p)?;
            Ok(g.value(l).data()[0])
        },
        params,
        H,
    )
    .unwrap();
    relative_error(params, &numeric)
}

#[test]
fn random_three_layer_mlps() {
    let mut rng = seeded(2024);
    for case in 0..50 {
        let input_dim = uniform_inclusive(&mut rng, 1, 6);
        let hidden = [
            uniform_inclusive(&mut rng, 1, 8),
            uniform_inclusive(&mut rng, 1, 8),
        ];
        let output_dim = uniform_inclusive(&mut rng, 1, 4);
        let batch = uniform_inclusive(&mut rng, 1, 5);
        let mlp = Mlp::new(
            "net",
            MlpSpec::new(input_dim, &hidden, output_dim, Activation::Tanh).unwrap(),
        );
        let mut params = ParamSet::new();
        mlp.init(&mut params, &mut rng).unwrap();
        let x = random_matrix(batch, input_dim, &mut rng);
        let target = random_matrix(batch, output_dim, &mut rng);
        let err = check(&mut params, |g, p| {
            let xi = g.constant(x.clone())?;
            let out = mlp.forward(g, p, xi)?;
            let t = g.constant(target.clone())?;
            let d = g.sub(out, t)?;
            let sq = g.square(d)?;
            g.sum(sq)
        });
        assert!(err <= 1e-6, "case {case}: relative error {err}");
    }
}

#[test]
fn every_graph_op() {
    let mut rng = seeded(7);
    let mut params = ParamSet::new();
    params.insert("a", random_matrix(3, 4, &mut rng)).unwrap();
    params.insert("b", random_matrix(4, 2, &mut rng)).unwrap();
    params.insert("c", random_matrix(3, 2, &mut rng)).unwrap();
    params
        .insert("bias", random_matrix(1, 2, &mut rng))
        .unwrap();
    params
        .insert("logits", random_matrix(3, 3, &mut rng))
        .unwrap();
    let err = check(&mut params, |g, p| {
        let a = g.param(p, "a")?;
        let b = g.param(p, "b")?;
        let c = g.param(p, "c")?;
        let bias = g.param(p, "bias")?;
        let logits = g.param(p, "logits")?;
        let ab = g.matmul(a, b)?;
        let x = g.add_row(ab, bias)?;
        let t = g.tanh(x)?;
        let r = g.relu(c)?;
        let m = g.mul(t, c)?;
        let s = g.sub(m, r)?;
        let y = g.add(s, t)?;
        let y = g.scale(y, 0.7)?;
        let cat = g.concat_cols(&[y, c])?;
        let w = g.softmax_rows(logits)?;
        let mixed = g.mix(w, &[y, c, t])?;
        let sq1 = g.square(cat)?;
        let sq2 = g.square(mixed)?;
        let l1 = g.sum(sq1)?;
        let l2 = g.sum(sq2)?;
        g.add(l1, l2)
    });
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn relu_network() {
    let mut rng = seeded(99);
    let mlp = Mlp::new("r", MlpSpec::new(3, &[5, 4], 2, Activation::Relu).unwrap());
    let mut params = ParamSet::new();
    mlp.init(&mut params, &mut rng).unwrap();
    let x = random_matrix(4, 3, &mut rng);
    let err = check(&mut params, |g, p| {
        let xi = g.constant(x.clone())?;
        let out = mlp.forward(g, p, xi)?;
        let sq = g.square(out)?;
        g.sum(sq)
    });
    assert!(err <= 1e-6, "relative error {err}");
}
