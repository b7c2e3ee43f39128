//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use dtss::graph::{Graph, NormMode, Var};
use dtss::rng;
use dtss::Tensor;
use rand::Rng as _;

pub fn random_tensor(r: &mut rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// Scale-normalized error `max|analytic - numeric| / max|numeric|` of the
/// tape gradient of `Σ R ⊙ build(inputs)` for a fixed random `R`, against
/// central differences with step `h`.
pub fn gradcheck(inputs: &[Tensor<f64>], build: &Build, h: f64, r: &mut rng::Rng) -> f64 {
    let probe = {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vs);
        g.shape(out).to_vec()
    };
    let weights = random_tensor(r, &probe, -1.0, 1.0);
    let loss = |ins: &[Tensor<f64>]| -> (Graph<f64>, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vs);
        let w = g.constant(weights.clone());
        let p = g.mul(out, w).unwrap();
        let l = g.sum(p);
        (g, vs, l)
    };
    let (g, vs, l) = loss(inputs);
    let grads = g.backward(l).unwrap();
    let (mut max_err, mut max_num) = (0.0f64, 0.0f64);
    for (i, v) in vs.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let (gp, _, lp) = loss(&plus);
            let (gm, _, lm) = loss(&minus);
            let num = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
            max_err = max_err.max((analytic.data()[j] - num).abs());
            max_num = max_num.max(num.abs());
        }
    }
    if max_num == 0.0 {
        max_err
    } else {
        max_err / max_num
    }
}

/// One randomized instance of a differentiable op: inputs plus a builder.
pub struct Case {
    pub op: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Build>,
}

/// Random instances of every smooth op on the tape. Spike and threshold ops
/// are not differentiable and are checked against their surrogate forms instead.
pub fn gradcheck_cases(r: &mut rng::Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let d = |r: &mut rng::Rng| r.random_range(1..4usize);
    let (a, b, c) = (d(r), d(r) + 1, d(r));
    cases.push(Case {
        op: "add",
        inputs: vec![
            random_tensor(r, &[a, b], -1.0, 1.0),
            random_tensor(r, &[a, b], -1.0, 1.0),
        ],
        build: Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
    });
    cases.push(Case {
        op: "mul",
        inputs: vec![
            random_tensor(r, &[a, b], -1.0, 1.0),
            random_tensor(r, &[a, b], -1.0, 1.0),
        ],
        build: Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
    });
    let s = r.random_range(-2.0..2.0);
    cases.push(Case {
        op: "scale",
        inputs: vec![random_tensor(r, &[a, b], -1.0, 1.0)],
        build: Box::new(move |g, v| g.scale(v[0], s)),
    });
    cases.push(Case {
        op: "reshape",
        inputs: vec![random_tensor(r, &[a, b, c], -1.0, 1.0)],
        build: Box::new(move |g, v| g.reshape(v[0], &[a * b * c]).unwrap()),
    });
    cases.push(Case {
        op: "permute",
        inputs: vec![random_tensor(r, &[a, b, c], -1.0, 1.0)],
        build: Box::new(|g, v| g.permute(v[0], &[2, 0, 1]).unwrap()),
    });
    cases.push(Case {
        op: "transpose",
        inputs: vec![random_tensor(r, &[a, b], -1.0, 1.0)],
        build: Box::new(|g, v| g.transpose(v[0]).unwrap()),
    });
    cases.push(Case {
        op: "matmul",
        inputs: vec![
            random_tensor(r, &[2, a, b], -1.0, 1.0),
            random_tensor(r, &[b, c], -1.0, 1.0),
        ],
        build: Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
    });
    let (cin, cout) = (d(r), d(r));
    let (stride, k) = if r.random_bool(0.5) { (1, 3) } else { (2, 4) };
    cases.push(Case {
        op: "conv2d",
        inputs: vec![
            random_tensor(r, &[2, cin, 4, 4], -1.0, 1.0),
            random_tensor(r, &[cout, cin, k, k], -1.0, 1.0),
        ],
        build: Box::new(move |g, v| g.conv2d(v[0], v[1], stride, 1).unwrap()),
    });
    let ch = d(r) + 1;
    cases.push(Case {
        op: "batchnorm",
        inputs: vec![
            random_tensor(r, &[3, ch, 2, 2], -1.0, 1.0),
            random_tensor(r, &[ch], 0.5, 1.5),
            random_tensor(r, &[ch], -0.5, 0.5),
        ],
        build: Box::new(|g, v| {
            g.batchnorm(v[0], v[1], v[2], NormMode::Batch { eps: 1e-5 })
                .unwrap()
                .0
        }),
    });
    let mean = random_tensor(r, &[ch], -0.5, 0.5).into_data();
    let var = random_tensor(r, &[ch], 0.5, 2.0).into_data();
    cases.push(Case {
        op: "batchnorm_running",
        inputs: vec![
            random_tensor(r, &[3, ch, 2, 2], -1.0, 1.0),
            random_tensor(r, &[ch], 0.5, 1.5),
            random_tensor(r, &[ch], -0.5, 0.5),
        ],
        build: Box::new(move |g, v| {
            g.batchnorm(
                v[0],
                v[1],
                v[2],
                NormMode::Running {
                    mean: &mean,
                    var: &var,
                    eps: 1e-5,
                },
            )
            .unwrap()
            .0
        }),
    });
    cases.push(Case {
        op: "sum",
        inputs: vec![random_tensor(r, &[a, b], -1.0, 1.0)],
        build: Box::new(|g, v| g.sum(v[0])),
    });
    cases.push(Case {
        op: "mean",
        inputs: vec![random_tensor(r, &[a, b], -1.0, 1.0)],
        build: Box::new(|g, v| g.mean(v[0])),
    });
    cases.push(Case {
        op: "mean_trailing",
        inputs: vec![random_tensor(r, &[a, b, c, 2], -1.0, 1.0)],
        build: Box::new(|g, v| g.mean_trailing(v[0], 2).unwrap()),
    });
    let classes = b + 1;
    let labels: Vec<usize> = (0..a + 1).map(|_| r.random_range(0..classes)).collect();
    cases.push(Case {
        op: "cross_entropy",
        inputs: vec![random_tensor(r, &[a + 1, classes], -2.0, 2.0)],
        build: Box::new(move |g, v| g.cross_entropy(v[0], &labels).unwrap()),
    });
    let t = d(r) + 1;
    cases.push(Case {
        op: "suffix_sum",
        inputs: vec![random_tensor(r, &[t], 0.0, 1.0)],
        build: Box::new(|g, v| g.suffix_sum(v[0]).unwrap()),
    });
    cases.push(Case {
        op: "time_mask",
        inputs: vec![
            random_tensor(r, &[t, a, b], -1.0, 1.0),
            random_tensor(r, &[t], 0.0, 1.0),
        ],
        build: Box::new(|g, v| g.time_mask(v[0], v[1]).unwrap()),
    });
    let w: Vec<f64> = (0..t).map(|i| if i < t - 1 { 1.0 } else { 0.0 }).collect();
    cases.push(Case {
        op: "time_average",
        inputs: vec![random_tensor(r, &[t, a * b], -1.0, 1.0)],
        build: Box::new(move |g, v| g.time_average(v[0], &w, (t - 1) as f64).unwrap()),
    });
    cases
}

/// Scalar LIF simulator over `drive[t][neuron]`: `H = λU + x`, spike `V_th`
/// when `H > V_th`, soft reset `U = H - O`.
pub fn scalar_lif(drive: &[Vec<f64>], leak: f64, vth: f64) -> Vec<Vec<f64>> {
    let n = drive[0].len();
    let mut u = vec![0.0; n];
    let mut out = Vec::new();
    for x in drive {
        let mut row = vec![0.0; n];
        for i in 0..n {
            let h = leak * u[i] + x[i];
            let o = if h > vth { vth } else { 0.0 };
            row[i] = o;
            u[i] = h - o;
        }
        out.push(row);
    }
    out
}

/// Scores, mask and active count by explicit lower-triangular coefficient
/// matrix product (`coeff[i][t] = 1` for `i >= t`).
pub fn brute_mask(tp: &[f64]) -> (Vec<f64>, Vec<f64>, usize) {
    let n = tp.len();
    let mut ts = vec![0.0; n];
    for (t, score) in ts.iter_mut().enumerate() {
        for (i, &p) in tp.iter().enumerate() {
            let coeff = if i >= t { 1.0 } else { 0.0 };
            *score += p * coeff;
        }
    }
    let tm: Vec<f64> = ts
        .iter()
        .map(|&s| if s >= 1.0 { 1.0 } else { 0.0 })
        .collect();
    let count = ts.iter().filter(|&&s| s >= 1.0).count();
    (ts, tm, count)
}

/// Executes a spike-gated linear layer `y = W x` one multiplication at a time,
/// skipping zero inputs, and returns how many multiplications ran.
pub fn brute_force_linear_ops(w: &[Vec<f64>], x: &[f64]) -> (Vec<f64>, u64) {
    let mut y = vec![0.0; w.len()];
    let mut ops = 0;
    for (o, row) in w.iter().enumerate() {
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                y[o] += row[i] * xi;
                ops += 1;
            }
        }
    }
    (y, ops)
}
