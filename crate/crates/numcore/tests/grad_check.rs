//! Central finite-difference gradient checks for every differentiable op.
//!
//! The oracle is an independent f64 re-implementation of each op's forward
//! pass. For a fixed random linear functional L(out) = Σ rᵢ·outᵢ we compare
//! the graph's analytic gradient against (L(x+h) − L(x−h)) / 2h computed with
//! the f64 reference, h = 1e-3, on ≥ 10 random inputs per op.

use numcore::rng::seeded_rng;
use numcore::{Graph, Tensor, Var};
use rand::Rng;

const H: f64 = 1e-3;
const REL_TOL: f64 = 1e-4;
const TRIALS: usize = 10;

// ── f64 reference forwards ──────────────────────────────────────────────

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn ref_conv1d(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let l_out = (len + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; batch * c_out * l_out];
    for b in 0..batch {
        for co in 0..c_out {
            for l in 0..l_out {
                let mut s = bias[co];
                for ci in 0..c_in {
                    for kk in 0..k {
                        let xi = (l * stride + kk) as isize - pad as isize;
                        if xi >= 0 && (xi as usize) < len {
                            s += x[(b * c_in + ci) * len + xi as usize]
                                * w[(co * c_in + ci) * k + kk];
                        }
                    }
                }
                out[(b * c_out + co) * l_out + l] = s;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn ref_conv_t1d(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    batch: usize,
    c_in: usize,
    frames: usize,
    c_out: usize,
    k: usize,
    stride: usize,
) -> Vec<f64> {
    let l_out = frames * stride;
    let trim_l = (k - stride) / 2;
    let mut out = vec![0.0; batch * c_out * l_out];
    for b in 0..batch {
        for co in 0..c_out {
            for l in 0..l_out {
                out[(b * c_out + co) * l_out + l] = bias[co];
            }
        }
        for ci in 0..c_in {
            for f in 0..frames {
                let xf = x[(b * c_in + ci) * frames + f];
                for co in 0..c_out {
                    for kk in 0..k {
                        let j = f * stride + kk;
                        if j >= trim_l && j - trim_l < l_out {
                            out[(b * c_out + co) * l_out + (j - trim_l)] +=
                                xf * w[(ci * c_out + co) * k + kk];
                        }
                    }
                }
            }
        }
    }
    out
}

fn ref_softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn ref_cross_entropy(x: &[f64], v: usize, targets: &[i64]) -> Vec<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        if t < 0 {
            continue;
        }
        let row = &x[r * v..(r + 1) * v];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&a| (a - m).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
        count += 1;
    }
    vec![total / count as f64]
}

fn ref_layer_norm(x: &[f64], n: usize, eps: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

fn ref_gelu(x: f64) -> f64 {
    let c = (2.0f64 / std::f64::consts::PI).sqrt() as f64;
    // Matches the f32 path's tanh approximation (with its truncated constant).
    let c32 = 0.797_884_6_f32 as f64;
    let _ = c;
    0.5 * x * (1.0 + (c32 * (x + 0.044715 * x * x * x)).tanh())
}

// ── harness ─────────────────────────────────────────────────────────────

struct Case {
    name: &'static str,
    /// f32 input tensors; gradient is checked w.r.t. every one of them.
    inputs: Vec<Tensor>,
    /// Build the graph output from leaves.
    build: Box<dyn Fn(&mut Graph, &[Var]) -> Var>,
    /// Independent f64 forward.
    reference: Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>,
}

fn check_case(case: &Case, probe_seed: u64) {
    // Fixed linear functional over the output.
    let mut g = Graph::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            g.param(&t)
        })
        .collect();
    let out = (case.build)(&mut g, &vars);
    let out_len = g.data(out).len();
    let r: Vec<f32> = {
        let mut rng = seeded_rng(probe_seed);
        (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let rv = g.constant(&[out_len], r.clone());
    let flat = g.reshape(out, &[out_len]).unwrap();
    let weighted = g.mul(flat, rv).unwrap();
    let loss = g.sum_all(weighted).unwrap();
    let grads = g.backward(loss).unwrap();

    let f64_inputs: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let loss_of = |inputs: &[Vec<f64>]| -> f64 {
        let out = (case.reference)(inputs);
        out.iter().zip(&r).map(|(o, &w)| o * w as f64).sum()
    };

    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap_or_else(|| {
            panic!("{}: no gradient for input {i}", case.name);
        });
        let mut fd = vec![0.0f64; analytic.len()];
        for j in 0..fd.len() {
            let mut plus = f64_inputs.clone();
            plus[i][j] += H;
            let mut minus = f64_inputs.clone();
            minus[i][j] -= H;
            fd[j] = (loss_of(&plus) - loss_of(&minus)) / (2.0 * H);
        }
        let num: f64 = analytic
            .iter()
            .zip(&fd)
            .map(|(&a, &b)| (a as f64 - b) * (a as f64 - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = fd.iter().map(|&b| b * b).sum::<f64>().sqrt().max(1e-3);
        let rel = num / den;
        assert!(
            rel < REL_TOL,
            "{} input {i}: rel err {rel:.3e} over {} elements",
            case.name,
            fd.len()
        );
    }
}

fn rand_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Uniform values bounded away from zero (for abs and ln/sqrt domains).
fn rand_tensor_away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::rand_uniform(shape, 0.1, 1.0, rng);
    for v in t.data_mut().iter_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn run_op(name: &'static str, mk: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Case) {
    for trial in 0..TRIALS {
        let mut rng = seeded_rng(1000 + trial as u64);
        let case = mk(&mut rng);
        assert_eq!(case.name, name);
        check_case(&case, 9000 + trial as u64);
    }
}

// ── per-op cases ────────────────────────────────────────────────────────

#[test]
fn grad_add_sub_mul() {
    run_op("add", |rng| Case {
        name: "add",
        inputs: vec![rand_tensor(&[3, 4], -1.0, 1.0, rng), rand_tensor(&[3, 4], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
        reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
    });
    run_op("sub", |rng| Case {
        name: "sub",
        inputs: vec![rand_tensor(&[3, 4], -1.0, 1.0, rng), rand_tensor(&[3, 4], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
        reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect()),
    });
    run_op("mul", |rng| Case {
        name: "mul",
        inputs: vec![rand_tensor(&[3, 4], -1.0, 1.0, rng), rand_tensor(&[3, 4], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
        reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
    });
}

#[test]
fn grad_row_broadcasts_and_scalars() {
    run_op("add_row", |rng| Case {
        name: "add_row",
        inputs: vec![rand_tensor(&[4, 5], -1.0, 1.0, rng), rand_tensor(&[5], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.add_row(v[0], v[1]).unwrap()),
        reference: Box::new(|x| x[0].iter().enumerate().map(|(i, a)| a + x[1][i % 5]).collect()),
    });
    run_op("mul_row", |rng| Case {
        name: "mul_row",
        inputs: vec![rand_tensor(&[4, 5], -1.0, 1.0, rng), rand_tensor(&[5], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.mul_row(v[0], v[1]).unwrap()),
        reference: Box::new(|x| x[0].iter().enumerate().map(|(i, a)| a * x[1][i % 5]).collect()),
    });
    run_op("scale", |rng| Case {
        name: "scale",
        inputs: vec![rand_tensor(&[7], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.scale(v[0], 1.7).unwrap()),
        reference: Box::new(|x| x[0].iter().map(|a| a * 1.7f32 as f64).collect()),
    });
    run_op("add_scalar", |rng| Case {
        name: "add_scalar",
        inputs: vec![rand_tensor(&[7], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.add_scalar(v[0], 0.3).unwrap()),
        reference: Box::new(|x| x[0].iter().map(|a| a + 0.3f32 as f64).collect()),
    });
}

#[test]
fn grad_matmul_all_variants() {
    let (m, k, n) = (4usize, 3usize, 5usize);
    run_op("matmul_nn", move |rng| Case {
        name: "matmul_nn",
        inputs: vec![rand_tensor(&[m, k], -1.0, 1.0, rng), rand_tensor(&[k, n], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
        reference: Box::new(move |x| ref_matmul(&x[0], &x[1], m, k, n)),
    });
    run_op("matmul_nt", move |rng| Case {
        name: "matmul_nt",
        inputs: vec![rand_tensor(&[m, k], -1.0, 1.0, rng), rand_tensor(&[n, k], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.matmul_nt(v[0], v[1]).unwrap()),
        reference: Box::new(move |x| {
            let mut bt = vec![0.0; k * n];
            for j in 0..n {
                for p in 0..k {
                    bt[p * n + j] = x[1][j * k + p];
                }
            }
            ref_matmul(&x[0], &bt, m, k, n)
        }),
    });
    run_op("matmul_tn", move |rng| Case {
        name: "matmul_tn",
        inputs: vec![rand_tensor(&[k, m], -1.0, 1.0, rng), rand_tensor(&[k, n], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.matmul_tn(v[0], v[1]).unwrap()),
        reference: Box::new(move |x| {
            let mut at = vec![0.0; m * k];
            for p in 0..k {
                for i in 0..m {
                    at[i * k + p] = x[0][p * m + i];
                }
            }
            ref_matmul(&at, &x[1], m, k, n)
        }),
    });
}

#[test]
fn grad_matmul_chain_4x4() {
    // Random 4×4 matmul chain with a nonlinearity in the middle.
    run_op("chain", |rng| Case {
        name: "chain",
        inputs: vec![
            rand_tensor(&[4, 4], -0.8, 0.8, rng),
            rand_tensor(&[4, 4], -0.8, 0.8, rng),
            rand_tensor(&[4, 4], -0.8, 0.8, rng),
        ],
        build: Box::new(|g, v| {
            let ab = g.matmul(v[0], v[1]).unwrap();
            let act = g.gelu(ab).unwrap();
            g.matmul(act, v[2]).unwrap()
        }),
        reference: Box::new(|x| {
            let ab = ref_matmul(&x[0], &x[1], 4, 4, 4);
            let act: Vec<f64> = ab.iter().map(|&v| ref_gelu(v)).collect();
            ref_matmul(&act, &x[2], 4, 4, 4)
        }),
    });
}

#[test]
fn grad_conv1d() {
    let (b, ci, l, co, k) = (2usize, 2usize, 8usize, 3usize, 3usize);
    for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
        run_op("conv1d", move |rng| Case {
            name: "conv1d",
            inputs: vec![
                rand_tensor(&[b, ci, l], -1.0, 1.0, rng),
                rand_tensor(&[co, ci, k], -1.0, 1.0, rng),
                rand_tensor(&[co], -0.5, 0.5, rng),
            ],
            build: Box::new(move |g, v| g.conv1d(v[0], v[1], Some(v[2]), stride, pad).unwrap()),
            reference: Box::new(move |x| {
                ref_conv1d(&x[0], &x[1], &x[2], b, ci, l, co, k, stride, pad)
            }),
        });
    }
}

#[test]
fn grad_conv_transpose1d() {
    let (b, ci, f, co, k, s) = (2usize, 2usize, 4usize, 3usize, 4usize, 2usize);
    run_op("conv_t1d", move |rng| Case {
        name: "conv_t1d",
        inputs: vec![
            rand_tensor(&[b, ci, f], -1.0, 1.0, rng),
            rand_tensor(&[ci, co, k], -1.0, 1.0, rng),
            rand_tensor(&[co], -0.5, 0.5, rng),
        ],
        build: Box::new(move |g, v| g.conv_transpose1d(v[0], v[1], Some(v[2]), s).unwrap()),
        reference: Box::new(move |x| ref_conv_t1d(&x[0], &x[1], &x[2], b, ci, f, co, k, s)),
    });
}

#[test]
fn grad_embedding() {
    let (v, d) = (6usize, 4usize);
    let ids = vec![1u32, 3, 3, 0, 5];
    let ids2 = ids.clone();
    run_op("embedding", move |rng| {
        let ids = ids.clone();
        let ids_ref = ids2.clone();
        Case {
            name: "embedding",
            inputs: vec![rand_tensor(&[v, d], -1.0, 1.0, rng)],
            build: Box::new(move |g, vars| g.embedding(vars[0], &ids).unwrap()),
            reference: Box::new(move |x| {
                let mut out = Vec::new();
                for &i in &ids_ref {
                    out.extend_from_slice(&x[0][i as usize * d..(i as usize + 1) * d]);
                }
                out
            }),
        }
    });
}

#[test]
fn grad_softmax_and_cross_entropy() {
    run_op("softmax", |rng| Case {
        name: "softmax",
        inputs: vec![rand_tensor(&[3, 6], -2.0, 2.0, rng)],
        build: Box::new(|g, v| g.softmax_rows(v[0]).unwrap()),
        reference: Box::new(|x| ref_softmax_rows(&x[0], 6)),
    });
    let targets = vec![2i64, -1, 0, 4];
    let t2 = targets.clone();
    run_op("cross_entropy", move |rng| {
        let targets = targets.clone();
        let t_ref = t2.clone();
        Case {
            name: "cross_entropy",
            inputs: vec![rand_tensor(&[4, 5], -2.0, 2.0, rng)],
            build: Box::new(move |g, v| g.cross_entropy(v[0], &targets).unwrap()),
            reference: Box::new(move |x| ref_cross_entropy(&x[0], 5, &t_ref)),
        }
    });
}

#[test]
fn grad_layer_norm() {
    run_op("layer_norm", |rng| Case {
        name: "layer_norm",
        inputs: vec![rand_tensor(&[3, 8], -2.0, 2.0, rng)],
        build: Box::new(|g, v| g.layer_norm(v[0], 1e-5).unwrap()),
        reference: Box::new(|x| ref_layer_norm(&x[0], 8, 1e-5f32 as f64)),
    });
}

#[test]
fn grad_unary_activations() {
    run_op("gelu", |rng| Case {
        name: "gelu",
        inputs: vec![rand_tensor(&[10], -2.0, 2.0, rng)],
        build: Box::new(|g, v| g.gelu(v[0]).unwrap()),
        reference: Box::new(|x| x[0].iter().map(|&v| ref_gelu(v)).collect()),
    });
    run_op("silu", |rng| Case {
        name: "silu",
        inputs: vec![rand_tensor(&[10], -2.0, 2.0, rng)],
        build: Box::new(|g, v| g.silu(v[0]).unwrap()),
        reference: Box::new(|x| x[0].iter().map(|&v| v / (1.0 + (-v).exp())).collect()),
    });
    run_op("tanh", |rng| Case {
        name: "tanh",
        inputs: vec![rand_tensor(&[10], -2.0, 2.0, rng)],
        build: Box::new(|g, v| g.tanh(v[0]).unwrap()),
        reference: Box::new(|x| x[0].iter().map(|&v| v.tanh()).collect()),
    });
    run_op("exp", |rng| Case {
        name: "exp",
        inputs: vec![rand_tensor(&[10], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.exp(v[0]).unwrap()),
        reference: Box::new(|x| x[0].iter().map(|&v| v.exp()).collect()),
    });
    run_op("ln", |rng| Case {
        name: "ln",
        inputs: vec![rand_tensor(&[10], 0.2, 3.0, rng)],
        build: Box::new(|g, v| g.ln(v[0]).unwrap()),
        reference: Box::new(|x| x[0].iter().map(|&v| v.ln()).collect()),
    });
    run_op("sqrt", |rng| Case {
        name: "sqrt",
        inputs: vec![rand_tensor(&[10], 0.2, 3.0, rng)],
        build: Box::new(|g, v| g.sqrt(v[0]).unwrap()),
        reference: Box::new(|x| x[0].iter().map(|&v| v.sqrt()).collect()),
    });
    run_op("abs", |rng| Case {
        name: "abs",
        inputs: vec![rand_tensor_away_from_zero(&[10], rng)],
        build: Box::new(|g, v| g.abs(v[0]).unwrap()),
        reference: Box::new(|x| x[0].iter().map(|&v| v.abs()).collect()),
    });
}

#[test]
fn grad_reductions_and_layout_ops() {
    run_op("mean_all", |rng| Case {
        name: "mean_all",
        inputs: vec![rand_tensor(&[4, 3], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.mean_all(v[0]).unwrap()),
        reference: Box::new(|x| vec![x[0].iter().sum::<f64>() / x[0].len() as f64]),
    });
    run_op("sum_all", |rng| Case {
        name: "sum_all",
        inputs: vec![rand_tensor(&[4, 3], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.sum_all(v[0]).unwrap()),
        reference: Box::new(|x| vec![x[0].iter().sum::<f64>()]),
    });
    run_op("mean_axis0", |rng| Case {
        name: "mean_axis0",
        inputs: vec![rand_tensor(&[5, 3], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.mean_axis0(v[0]).unwrap()),
        reference: Box::new(|x| {
            let mut out = vec![0.0; 3];
            for row in x[0].chunks(3) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.iter().map(|v| v / 5.0).collect()
        }),
    });
    run_op("transpose2d", |rng| Case {
        name: "transpose2d",
        inputs: vec![rand_tensor(&[3, 5], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.transpose2d(v[0]).unwrap()),
        reference: Box::new(|x| {
            let mut out = vec![0.0; 15];
            for i in 0..3 {
                for j in 0..5 {
                    out[j * 3 + i] = x[0][i * 5 + j];
                }
            }
            out
        }),
    });
    run_op("reshape", |rng| Case {
        name: "reshape",
        inputs: vec![rand_tensor(&[3, 4], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.reshape(v[0], &[2, 6]).unwrap()),
        reference: Box::new(|x| x[0].clone()),
    });
    run_op("concat", |rng| Case {
        name: "concat",
        inputs: vec![rand_tensor(&[2, 3], -1.0, 1.0, rng), rand_tensor(&[2, 2], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.concat(&[v[0], v[1]], 1).unwrap()),
        reference: Box::new(|x| {
            let mut out = Vec::new();
            for r in 0..2 {
                out.extend_from_slice(&x[0][r * 3..(r + 1) * 3]);
                out.extend_from_slice(&x[1][r * 2..(r + 1) * 2]);
            }
            out
        }),
    });
    run_op("slice", |rng| Case {
        name: "slice",
        inputs: vec![rand_tensor(&[3, 6], -1.0, 1.0, rng)],
        build: Box::new(|g, v| g.slice(v[0], 1, 2, 3).unwrap()),
        reference: Box::new(|x| {
            let mut out = Vec::new();
            for r in 0..3 {
                out.extend_from_slice(&x[0][r * 6 + 2..r * 6 + 5]);
            }
            out
        }),
    });
}
