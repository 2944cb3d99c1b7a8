//! Central finite-difference checking and brute-force references shared by
//! the gradient tests and the acceptance run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wa_tensor::{concat_rows, Tape, Tensor, Var};

pub type Build = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

/// Relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) per input,
/// using central differences with step `h`.
pub fn gradcheck(inputs: &[Tensor], build: &Build, h: f64) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = build(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let eval = |delta: f64| {
                let tape = Tape::new();
                let vars: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] += delta;
                        }
                        tape.constant(t)
                    })
                    .collect();
                build(&tape, &vars).value().item()
            };
            numeric[j] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn).max(1e-10);
        worst = worst.max(diff / denom);
    }
    worst
}

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Weighted-sum readout so every output element gets a distinct cotangent.
pub fn readout<'t>(tape: &'t Tape, x: Var<'t>, seed: u64) -> Var<'t> {
    let w = tape.constant(rand_t(&x.shape(), seed ^ 0xABCD));
    x.mul(w).unwrap().sum()
}

/// Attention by explicit loops over rows and keys.
pub fn brute_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let (nk, dv) = (k.shape()[0], v.shape()[1]);
    let mut out = vec![0.0; nq * dv];
    for i in 0..nq {
        let scores: Vec<f64> = (0..nk)
            .map(|j| (0..d).map(|t| q.data()[i * d + t] * k.data()[j * d + t]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = w.iter().sum();
        for j in 0..nk {
            for c in 0..dv {
                out[i * dv + c] += w[j] / z * v.data()[j * dv + c];
            }
        }
    }
    out
}

/// Step used by the operation suite.
pub const STEP: f64 = 1e-5;

/// Worst relative error of every differentiable operation, one entry per
/// operation, plus a composed attention block.
pub fn operation_suite() -> Vec<(&'static str, f64)> {
    let a = rand_t(&[3, 4], 10);
    let b = rand_t(&[3, 4], 11);
    let mat = rand_t(&[4, 5], 3);
    let rows = rand_t(&[6, 4], 20);
    let bias = rand_t(&[4], 21);
    let gamma = rand_t(&[6], 31);
    let beta = rand_t(&[6], 32);
    let logits = rand_t(&[4, 3], 40).scale(2.0);
    let target = rand_t(&[4, 3], 41);
    let bits = target.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let pair = || vec![a.clone(), b.clone()];
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: Vec<Tensor>, build: Box<Build>| {
        out.push((name, gradcheck(&inputs, build.as_ref(), STEP)));
    };
    check("add", pair(), Box::new(|t, v| readout(t, v[0].add(v[1]).unwrap(), 1)));
    check("sub", pair(), Box::new(|t, v| readout(t, v[0].sub(v[1]).unwrap(), 2)));
    check("mul", pair(), Box::new(|t, v| readout(t, v[0].mul(v[1]).unwrap(), 3)));
    check("scale", pair(), Box::new(|t, v| readout(t, v[0].scale(-2.5), 4)));
    check("gelu", pair(), Box::new(|t, v| readout(t, v[0].gelu(), 5)));
    check("clamp", pair(), Box::new(|t, v| readout(t, v[0].clamp(-0.7, 0.9), 6)));
    check("sum", pair(), Box::new(|_, v| v[0].sum()));
    check("mean", pair(), Box::new(|_, v| v[0].mean()));
    check("matmul", vec![b.clone(), mat], Box::new(|t, v| readout(t, v[0].matmul(v[1]).unwrap(), 7)));
    let rb = || vec![rows.clone(), bias.clone()];
    check("add_row", rb(), Box::new(|t, v| readout(t, v[0].add_row(v[1]).unwrap(), 1)));
    check("gather_rows", rb(), Box::new(|t, v| readout(t, v[0].gather_rows(&[5, 0, 0, 3]).unwrap(), 2)));
    check("cumsum_rows", rb(), Box::new(|t, v| readout(t, v[0].cumsum_rows(3).unwrap(), 3)));
    check("mean_rows", rb(), Box::new(|t, v| readout(t, v[0].mean_rows(2).unwrap(), 4)));
    check("reshape", rb(), Box::new(|t, v| readout(t, v[0].reshape(&[3, 8]).unwrap(), 5)));
    check(
        "concat_rows",
        rb(),
        Box::new(|t, v| {
            let top = v[0].gather_rows(&[0, 1]).unwrap();
            readout(t, concat_rows(&[top, v[0]]).unwrap(), 6)
        }),
    );
    check("softmax_rows", rb(), Box::new(|t, v| readout(t, v[0].softmax(1).unwrap(), 7)));
    check("softmax_cols", rb(), Box::new(|t, v| readout(t, v[0].softmax(0).unwrap(), 8)));
    check(
        "layer_norm",
        vec![rand_t(&[5, 6], 30), gamma, beta],
        Box::new(|t, v| readout(t, v[0].layer_norm(v[1], v[2], 1e-5).unwrap(), 9)),
    );
    let t1 = target.clone();
    check("smooth_l1_sum", vec![logits.clone()], Box::new(move |_, v| v[0].smooth_l1_sum(&t1).unwrap()));
    check("bce_with_logits_mean", vec![logits.clone()], Box::new(move |_, v| v[0].bce_with_logits_mean(&bits).unwrap()));
    check(
        "cross_entropy_mean",
        vec![logits.clone()],
        Box::new(|_, v| v[0].cross_entropy_mean(&[2, 0, 1, 1]).unwrap()),
    );
    check("mse_mean", vec![logits], Box::new(move |_, v| v[0].mse_mean(&target).unwrap()));
    check(
        "attention",
        vec![rand_t(&[6, 8], 50), rand_t(&[10, 8], 51), rand_t(&[10, 8], 52)],
        Box::new(|t, v| readout(t, v[0].attention(v[1], v[2], 2, 2).unwrap(), 11)),
    );
    check(
        "attention_block",
        vec![
            rand_t(&[4, 8], 60),
            rand_t(&[6, 8], 61),
            rand_t(&[8, 8], 62).scale(0.3),
            rand_t(&[8, 8], 63).scale(0.3),
            rand_t(&[8, 16], 64).scale(0.3),
            rand_t(&[16, 8], 65).scale(0.3),
            rand_t(&[8], 66),
            rand_t(&[8], 67),
        ],
        Box::new(|t, v| {
            let n = v[0].layer_norm(v[6], v[7], 1e-5).unwrap();
            let q = n.matmul(v[2]).unwrap();
            let k = v[1].matmul(v[3]).unwrap();
            let a = q.attention(k, v[1], 4, 1).unwrap();
            let h = v[0].add(a).unwrap();
            let m = h.matmul(v[4]).unwrap().gelu().matmul(v[5]).unwrap();
            readout(t, h.add(m).unwrap().cumsum_rows(2).unwrap(), 12)
        }),
    );
    out
}
