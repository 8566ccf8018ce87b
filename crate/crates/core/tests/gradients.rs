//! Finite-difference verification of every differentiable operation.
//!
//! Each op is checked on at least 20 random instances at f64 with a central
//! difference step of 1e-6 and a max relative error budget of 1e-6. The
//! loss is a randomly weighted sum of the op's output so that no gradient
//! component can cancel silently.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssmb_core::gradcheck::{central_diff, max_rel_error, DEFAULT_STEP};
use ssmb_core::ssmb::channel_stats;
use ssmb_core::tape::{Tape, Var};
use ssmb_core::tensor::Tensor;

const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Max relative error of the analytic gradient w.r.t. `init` for the graph
/// `forward` builds; the closure must produce a rank-0 loss.
fn fd_check(init: &Tensor<f64>, forward: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let p = tape.param(init.clone());
    let loss = forward(&mut tape, p);
    assert_eq!(tape.value(loss).rank(), 0, "loss must be rank-0");
    tape.backward(loss).unwrap();
    let analytic = tape.grad(p).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; init.numel()]);
    // Stop-gradient constants are part of the function definition: the
    // numeric evaluation must hold them at their base-point values.
    let pinned: Vec<Tensor<f64>> = tape.detach_values().to_vec();

    let numeric = central_diff(init.data(), DEFAULT_STEP, |xs| {
        let mut tape = Tape::new();
        tape.pin_detaches(pinned.clone());
        let p = tape.leaf(Tensor::from_vec(init.shape().to_vec(), xs.to_vec()).unwrap());
        let loss = forward(&mut tape, p);
        tape.value(loss).item()
    });
    max_rel_error(&analytic, &numeric)
}

/// Weighted sum of all elements with fixed pseudo-random weights.
fn weighted_loss(tape: &mut Tape<f64>, out: Var, weight_seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let mut wrng = ChaCha8Rng::seed_from_u64(weight_seed);
    let w = rand_tensor(&mut wrng, &shape, -1.0, 1.0);
    let w = tape.leaf(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum_all(prod).unwrap()
}

fn broadcast_shape_pair(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    // Random trailing-broadcastable pair of rank <= 3 shapes.
    let rank_out = rng.random_range(1..4usize);
    let out: Vec<usize> = (0..rank_out).map(|_| rng.random_range(1..4usize)).collect();
    let shrink = |rng: &mut ChaCha8Rng, out: &[usize]| {
        let rank = rng.random_range(1..=out.len());
        let mut s: Vec<usize> = out[out.len() - rank..].to_vec();
        for e in &mut s {
            if rng.random_range(0..3) == 0 {
                *e = 1;
            }
        }
        s
    };
    (shrink(rng, &out), shrink(rng, &out))
}

#[test]
fn elementwise_binary_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for instance in 0..20 {
        let (sa, sb) = broadcast_shape_pair(&mut rng);
        let a = rand_tensor(&mut rng, &sa, -2.0, 2.0);
        let b = rand_tensor(&mut rng, &sb, -2.0, 2.0);
        // denominators bounded away from zero
        let b_pos = b.map(|v| if v.abs() < 0.3 { 0.3 + v.abs() } else { v });

        for (name, wrt_a) in [("a", true), ("b", false)] {
            let check = |op: &str, other: Tensor<f64>| {
                let opname = op.to_string();
                let (init, fixed) = if wrt_a { (a.clone(), other) } else { (other, a.clone()) };
                let err = fd_check(&init, |tape, p| {
                    let q = tape.leaf(fixed.clone());
                    let (x, y) = if wrt_a { (p, q) } else { (q, p) };
                    let out = match opname.as_str() {
                        "add" => tape.add(x, y).unwrap(),
                        "sub" => tape.sub(x, y).unwrap(),
                        "mul" => tape.mul(x, y).unwrap(),
                        "div" => tape.div(x, y).unwrap(),
                        _ => tape.max_with(x, y).unwrap(),
                    };
                    weighted_loss(tape, out, 900 + instance)
                });
                assert!(err < TOL, "{opname} d/d{name} instance {instance}: rel err {err}");
            };
            check("add", b.clone());
            check("sub", b.clone());
            check("mul", b.clone());
            check("div", b_pos.clone());
            check("max", b.clone());
        }
    }
}

#[test]
fn elementwise_unary_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for instance in 0..20 {
        let rank = rng.random_range(1..4usize);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..4)).collect();
        let signed = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        // keep relu/max inputs away from the kink by at least the step
        let signed = signed.map(|v| if v.abs() < 1e-4 { 1e-4 + v } else { v });
        let positive = rand_tensor(&mut rng, &shape, 0.2, 3.0);
        let scalar = rng.random_range(-1.0..1.0);

        let cases: Vec<(&str, Tensor<f64>)> = vec![
            ("relu", signed.clone()),
            ("neg", signed.clone()),
            ("exp", signed.clone()),
            ("add_scalar", signed.clone()),
            ("mul_scalar", signed.clone()),
            ("max_with_scalar", signed.clone()),
            ("sqrt", positive.clone()),
            ("log", positive.clone()),
        ];
        for (op, init) in cases {
            let opname = op.to_string();
            let err = fd_check(&init, |tape, p| {
                let out = match opname.as_str() {
                    "relu" => tape.relu(p),
                    "neg" => tape.neg(p),
                    "exp" => tape.exp(p),
                    "add_scalar" => tape.add_scalar(p, scalar),
                    "mul_scalar" => tape.mul_scalar(p, scalar),
                    "max_with_scalar" => tape.max_with_scalar(p, scalar),
                    "sqrt" => tape.sqrt(p).unwrap(),
                    _ => tape.log(p).unwrap(),
                };
                weighted_loss(tape, out, 300 + instance)
            });
            assert!(err < TOL, "{opname} instance {instance}: rel err {err}");
        }
    }
}

#[test]
fn matmul_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for instance in 0..20 {
        let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let a = rand_tensor(&mut rng, &[m, k], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[k, n], -2.0, 2.0);
        for wrt_a in [true, false] {
            let init = if wrt_a { a.clone() } else { b.clone() };
            let fixed = if wrt_a { b.clone() } else { a.clone() };
            let err = fd_check(&init, |tape, p| {
                let q = tape.leaf(fixed.clone());
                let out = if wrt_a { tape.matmul(p, q) } else { tape.matmul(q, p) }.unwrap();
                weighted_loss(tape, out, 400 + instance)
            });
            assert!(err < TOL, "matmul wrt_a={wrt_a} instance {instance}: rel err {err}");
        }
    }
}

#[test]
fn matmul_grad_example_frozen_from_oracle() {
    // d sum(A B) / dA at A = I2, B = [[2,3],[4,5]]
    let a = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = Tensor::from_vec(vec![2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
    let numeric = central_diff(a.data(), DEFAULT_STEP, |xs| {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![2, 2], xs.to_vec()).unwrap());
        let q = tape.leaf(b.clone());
        let out = tape.matmul(p, q).unwrap();
        let loss = tape.sum_all(out).unwrap();
        tape.value(loss).item()
    });
    let frozen = [5.0, 9.0, 5.0, 9.0];
    assert!(max_rel_error(&frozen, &numeric) < 1e-7);
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for instance in 0..20 {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..3);
        let oc = rng.random_range(1..3);
        let h = rng.random_range(3..6);
        let w = rng.random_range(3..6);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let x = rand_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let kw = rand_tensor(&mut rng, &[oc, c, 3, 3], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[oc], -0.5, 0.5);
        if h + 2 * pad < 3 || w + 2 * pad < 3 {
            continue;
        }
        for target in 0..3 {
            let init = match target {
                0 => x.clone(),
                1 => kw.clone(),
                _ => bias.clone(),
            };
            let (fx, fw, fb) = (x.clone(), kw.clone(), bias.clone());
            let err = fd_check(&init, |tape, p| {
                let xv = if target == 0 { p } else { tape.leaf(fx.clone()) };
                let wv = if target == 1 { p } else { tape.leaf(fw.clone()) };
                let bv = if target == 2 { p } else { tape.leaf(fb.clone()) };
                let out = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
                weighted_loss(tape, out, 500 + instance)
            });
            assert!(err < TOL, "conv2d target {target} instance {instance}: rel err {err}");
        }
    }
}

#[test]
fn conv2d_weight_gradient_example() {
    // random 2x2x5x5 input, 3x3 kernel: weight gradient vs finite differences
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let x = rand_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
    let b = Tensor::zeros(vec![1]);
    let err = fd_check(&w, |tape, p| {
        let xv = tape.leaf(x.clone());
        let bv = tape.leaf(b.clone());
        let out = tape.conv2d(xv, p, bv, 1, 1).unwrap();
        tape.sum_all(out).unwrap()
    });
    assert!(err < TOL, "conv2d weight example rel err {err}");
}

#[test]
fn reductions_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for instance in 0..20 {
        let rank = rng.random_range(1..4usize);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..4)).collect();
        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let n_axes = rng.random_range(1..=rank);
        let mut axes: Vec<usize> = (0..rank).collect();
        for _ in 0..(rank - n_axes) {
            axes.remove(rng.random_range(0..axes.len()));
        }
        for kind in ["sum", "mean", "max"] {
            let axes = axes.clone();
            let kindname = kind.to_string();
            let err = fd_check(&x, |tape, p| {
                let out = match kindname.as_str() {
                    "sum" => tape.reduce_sum(p, &axes).unwrap(),
                    "mean" => tape.reduce_mean(p, &axes).unwrap(),
                    _ => tape.reduce_max(p, &axes).unwrap(),
                };
                weighted_loss(tape, out, 600 + instance)
            });
            assert!(err < TOL, "reduce {kindname} axes {axes:?} instance {instance}: rel err {err}");
        }
    }
}

#[test]
fn softmax_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for instance in 0..20 {
        let rank = rng.random_range(1..3usize);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(2..5)).collect();
        let axis = rng.random_range(0..rank);
        let x = rand_tensor(&mut rng, &shape, -3.0, 3.0);
        let err = fd_check(&x, |tape, p| {
            let out = tape.softmax(p, axis).unwrap();
            weighted_loss(tape, out, 700 + instance)
        });
        assert!(err < TOL, "softmax instance {instance}: rel err {err}");
    }
}

#[test]
fn softmax_jacobian_on_random_4_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let x = rand_tensor(&mut rng, &[4], -2.0, 2.0);
    // full Jacobian row by row: gradient of each output component
    for j in 0..4 {
        let mut tape = Tape::new();
        let p = tape.param(x.clone());
        let s = tape.softmax(p, 0).unwrap();
        let row = tape.narrow(s, 0, j, 1).unwrap();
        let loss = tape.sum_all(row).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(p).unwrap().data().to_vec();
        let numeric = central_diff(x.data(), DEFAULT_STEP, |xs| {
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::from_vec(vec![4], xs.to_vec()).unwrap());
            let s = tape.softmax(p, 0).unwrap();
            tape.value(s).data()[j]
        });
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < TOL, "softmax Jacobian row {j}: rel err {err}");
    }
}

#[test]
fn shape_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for instance in 0..20 {
        let rows = rng.random_range(2..5);
        let cols = rng.random_range(2..5);
        let x = rand_tensor(&mut rng, &[rows, cols], -2.0, 2.0);
        let y = rand_tensor(&mut rng, &[rows, cols], -2.0, 2.0);

        let err = fd_check(&x, |tape, p| {
            let out = tape.reshape(p, vec![cols * rows]).unwrap();
            weighted_loss(tape, out, 810 + instance)
        });
        assert!(err < TOL, "reshape instance {instance}: rel err {err}");

        let fixed = y.clone();
        let err = fd_check(&x, |tape, p| {
            let q = tape.leaf(fixed.clone());
            let out = tape.concat(&[p, q], 1).unwrap();
            weighted_loss(tape, out, 820 + instance)
        });
        assert!(err < TOL, "concat instance {instance}: rel err {err}");

        let start = rng.random_range(0..cols);
        let len = rng.random_range(1..=cols - start);
        let err = fd_check(&x, |tape, p| {
            let out = tape.narrow(p, 1, start, len).unwrap();
            weighted_loss(tape, out, 830 + instance)
        });
        assert!(err < TOL, "narrow instance {instance}: rel err {err}");

        // index_select with repeats exercises the scatter-add backward
        let indices: Vec<usize> = (0..rows + 1).map(|_| rng.random_range(0..rows)).collect();
        let idx = indices.clone();
        let err = fd_check(&x, |tape, p| {
            let out = tape.index_select(p, &idx).unwrap();
            weighted_loss(tape, out, 840 + instance)
        });
        assert!(err < TOL, "index_select {indices:?} instance {instance}: rel err {err}");
    }
}

#[test]
fn max_pool_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for instance in 0..20 {
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4], -2.0, 2.0);
        let err = fd_check(&x, |tape, p| {
            let out = ssmb_core::backbone::max_pool2(tape, p).unwrap();
            weighted_loss(tape, out, 1000 + instance)
        });
        assert!(err < TOL, "max_pool2 instance {instance}: rel err {err}");
    }
}

#[test]
fn channel_stats_sigma_gradient_example() {
    // gradient of sum(sigma) on a random 1x2x3x3 map
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let f = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
    let err = fd_check(&f, |tape, p| {
        let (_, sigma) = channel_stats(tape, p, 1e-5).unwrap();
        tape.sum_all(sigma).unwrap()
    });
    assert!(err < TOL, "channel stats sigma rel err {err}");
}

#[test]
fn ssmb_block_parameters_match_finite_differences_in_both_gate_modes() {
    use ssmb_core::ssmb::{forward_on_tape, GateMode, SsmbBlock, SsmbConfig};

    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    for mode in [GateMode::GateScaled, GateMode::ValuePreserving] {
        for instance in 0..5 {
            let config = SsmbConfig::new(2, 3, mode);
            let block: SsmbBlock<f64> = SsmbBlock::new(config, 50 + instance);
            let feature = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.5, 1.5);

            // every block tensor, checked one at a time through the full
            // modulation path including the gate term
            let mut targets: Vec<(String, Tensor<f64>)> = vec![
                ("router.weight".into(), block.router_weight.clone()),
                ("router.bias".into(), block.router_bias.clone()),
            ];
            for i in 0..3 {
                targets.push((format!("expert.{i}.weight"), block.expert_weights[i].clone()));
                targets.push((format!("expert.{i}.bias"), block.expert_biases[i].clone()));
            }

            for (name, init) in targets {
                let block = block.clone();
                let feature = feature.clone();
                let target = name.clone();
                let err = fd_check(&init, move |tape, p| {
                    let mut b = block.clone();
                    // route the perturbed tensor into its slot
                    let set = |t: &mut Tensor<f64>, v: &Tensor<f64>| *t = v.clone();
                    match target.as_str() {
                        "router.weight" => set(&mut b.router_weight, tape.value(p)),
                        "router.bias" => set(&mut b.router_bias, tape.value(p)),
                        other => {
                            let idx: usize = other.split('.').nth(1).unwrap().parse().unwrap();
                            if other.ends_with("weight") {
                                set(&mut b.expert_weights[idx], tape.value(p));
                            } else {
                                set(&mut b.expert_biases[idx], tape.value(p));
                            }
                        }
                    }
                    // rebind so the perturbed tensor is the tracked param
                    let mut vars = b.bind_with(tape, false);
                    match target.as_str() {
                        "router.weight" => vars.router_weight = p,
                        "router.bias" => vars.router_bias = p,
                        other => {
                            let idx: usize = other.split('.').nth(1).unwrap().parse().unwrap();
                            if other.ends_with("weight") {
                                vars.experts[idx].0 = p;
                            } else {
                                vars.experts[idx].1 = p;
                            }
                        }
                    }
                    let f = tape.leaf(feature.clone());
                    let (out, _) = forward_on_tape(tape, &vars, f, &b.config).unwrap();
                    weighted_loss(tape, out, 2000 + instance)
                });
                assert!(err < 1e-4, "{mode:?} {name} instance {instance}: rel err {err}");
            }
        }
    }
}

#[test]
fn softmax_sums_to_one_at_large_magnitudes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    for _ in 0..100 {
        let scale = 10f64.powf(rng.random_range(0.0..4.0));
        let shape = vec![rng.random_range(1..4), rng.random_range(2..6)];
        let x = rand_tensor(&mut rng, &shape, -scale, scale);
        let mut tape = Tape::new();
        let p = tape.leaf(x);
        let s = tape.softmax(p, 1).unwrap();
        let v = tape.value(s);
        assert!(v.is_finite());
        for r in 0..shape[0] {
            let total: f64 = v.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-6, "row sum {total} at scale {scale}");
        }
    }
}

#[test]
fn forward_results_are_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1313);
    let x = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let w = rand_tensor(&mut rng, &[4, 5], -2.0, 2.0);
    let run = || -> Vec<u64> {
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let b = tape.leaf(w.clone());
        let mm = tape.matmul(a, b).unwrap();
        let sm = tape.softmax(mm, 1).unwrap();
        let e = tape.exp(sm);
        let s = tape.reduce_mean(e, &[0, 1]).unwrap();
        tape.value(s).data().iter().map(|v| v.to_bits()).collect()
    };
    assert_eq!(run(), run());
}

#[test]
fn broadcasting_matches_scalar_reference() {
    // Naive reference: explicit per-coordinate index arithmetic.
    fn reference_add(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let rank = a.rank().max(b.rank());
        let pad = |s: &[usize]| {
            let mut p = vec![1usize; rank];
            p[rank - s.len()..].copy_from_slice(s);
            p
        };
        let (sa, sb) = (pad(a.shape()), pad(b.shape()));
        let out_shape: Vec<usize> = sa.iter().zip(&sb).map(|(&x, &y)| x.max(y)).collect();
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        for (flat, o) in out.iter_mut().enumerate() {
            let mut rem = flat;
            let mut coords = vec![0usize; rank];
            for d in (0..rank).rev() {
                coords[d] = rem % out_shape[d];
                rem /= out_shape[d];
            }
            let flat_of = |s: &[usize]| {
                let mut f = 0usize;
                let mut stride = 1usize;
                for d in (0..rank).rev() {
                    let c = if s[d] == 1 { 0 } else { coords[d] };
                    f += c * stride;
                    stride *= s[d];
                }
                f
            };
            *o = a.data()[flat_of(&sa)] + b.data()[flat_of(&sb)];
        }
        out
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1414);
    for _ in 0..50 {
        let (sa, sb) = broadcast_shape_pair(&mut rng);
        let a = rand_tensor(&mut rng, &sa, -2.0, 2.0);
        let b = rand_tensor(&mut rng, &sb, -2.0, 2.0);
        let expected = reference_add(&a, &b);
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let bv = tape.leaf(b.clone());
        let out = tape.add(av, bv).unwrap();
        assert_eq!(tape.value(out).data(), &expected[..], "shapes {sa:?} + {sb:?}");
    }
}
