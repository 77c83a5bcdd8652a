mod common;

use common::{away_from_zero, fd_check, randn, rel_err};
use ldp_core::autodiff::{BnState, Tape};
use ldp_core::harness::model::{Architecture, Model, ModelSpec, QuantPlan};
use ldp_core::Tensor;

const H: f32 = 1e-3;
const TOL: f64 = 1e-3;

fn assert_fd(errs: &[f64]) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < TOL, "input {i}: relative error {e:e}");
    }
}

#[test]
fn matmul() {
    let errs = fd_check(&[randn(&[3, 4], 1), randn(&[4, 5], 2)], H, |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    assert_fd(&errs);
}

#[test]
fn add_and_mul() {
    let inputs = [randn(&[2, 3], 3), randn(&[2, 3], 4)];
    assert_fd(&fd_check(&inputs, H, |t, v| t.add(v[0], v[1]).unwrap()));
    assert_fd(&fd_check(&inputs, H, |t, v| t.mul(v[0], v[1]).unwrap()));
}

#[test]
fn add_bias() {
    let errs = fd_check(&[randn(&[4, 3], 5), randn(&[3], 6)], H, |t, v| {
        t.add_bias(v[0], v[1]).unwrap()
    });
    assert_fd(&errs);
}

#[test]
fn relu_away_from_kink() {
    let x = away_from_zero(randn(&[3, 5], 7), 0.05);
    assert_fd(&fd_check(&[x], H, |t, v| t.relu(v[0])));
}

#[test]
fn reductions() {
    let x = randn(&[3, 4], 8);
    assert_fd(&fd_check(std::slice::from_ref(&x), H, |t, v| t.sum(v[0])));
    assert_fd(&fd_check(&[x], H, |t, v| t.mean(v[0]).unwrap()));
}

#[test]
fn reshape_and_flatten() {
    let x = randn(&[2, 3, 2, 2], 9);
    assert_fd(&fd_check(std::slice::from_ref(&x), H, |t, v| {
        t.reshape(v[0], &[6, 4]).unwrap()
    }));
    assert_fd(&fd_check(&[x], H, |t, v| t.flatten(v[0]).unwrap()));
}

#[test]
fn global_avg_pool() {
    let x = randn(&[2, 3, 3, 3], 10);
    assert_fd(&fd_check(&[x], H, |t, v| t.global_avg_pool(v[0]).unwrap()));
}

#[test]
fn im2col() {
    let x = randn(&[2, 2, 5, 5], 11);
    assert_fd(&fd_check(&[x], H, |t, v| {
        t.im2col(v[0], 3, 3, 2, 1).unwrap()
    }));
}

#[test]
fn conv2d() {
    for (stride, pad, size) in [(1, 1, 5), (2, 1, 5), (1, 0, 4), (2, 0, 5)] {
        let inputs = [randn(&[2, 3, size, size], 12), randn(&[4, 3, 3, 3], 13)];
        let errs = fd_check(&inputs, H, |t, v| {
            t.conv2d(v[0], v[1], stride, pad).unwrap()
        });
        assert_fd(&errs);
    }
}

#[test]
fn conv2d_pointwise() {
    let inputs = [randn(&[2, 3, 5, 5], 14), randn(&[2, 3, 1, 1], 15)];
    assert_fd(&fd_check(&inputs, H, |t, v| {
        t.conv2d(v[0], v[1], 2, 0).unwrap()
    }));
}

#[test]
fn batch_norm_training() {
    for shape in [vec![6, 3], vec![3, 2, 3, 3]] {
        let c = shape[1];
        let inputs = [randn(&shape, 16), randn(&[c], 17), randn(&[c], 18)];
        let errs = fd_check(&inputs, H, |t, v| {
            let mut state = BnState::new(c);
            t.batch_norm(v[0], v[1], v[2], &mut state, true).unwrap()
        });
        assert_fd(&errs);
    }
}

#[test]
fn batch_norm_inference() {
    let mut state = BnState::new(3);
    state.running_mean = vec![0.2, -0.1, 0.4];
    state.running_var = vec![0.5, 2.0, 1.3];
    let inputs = [randn(&[4, 3, 2, 2], 19), randn(&[3], 20), randn(&[3], 21)];
    let errs = fd_check(&inputs, H, |t, v| {
        let mut s = state.clone();
        t.batch_norm(v[0], v[1], v[2], &mut s, false).unwrap()
    });
    assert_fd(&errs);
}

#[test]
fn softmax_cross_entropy() {
    let logits = randn(&[4, 5], 22);
    let labels = [0, 3, 4, 1];
    assert_fd(&fd_check(&[logits], H, |t, v| {
        t.softmax_cross_entropy(v[0], &labels).unwrap()
    }));
}

#[test]
fn composed_mlp() {
    let x = randn(&[5, 4], 23);
    let labels = [0, 1, 2, 1, 0];
    let inputs = [
        randn(&[4, 6], 24),
        randn(&[6], 25),
        randn(&[6, 3], 26),
        randn(&[3], 27),
    ];
    let errs = fd_check(&inputs, H, |t, v| {
        let xv = t.leaf(x.clone());
        let h = t.matmul(xv, v[0]).unwrap();
        let h = t.add_bias(h, v[1]).unwrap();
        let h = t.relu(h);
        let o = t.matmul(h, v[2]).unwrap();
        let o = t.add_bias(o, v[3]).unwrap();
        t.softmax_cross_entropy(o, &labels).unwrap()
    });
    assert_fd(&errs);
}

fn cross_entropy_f64(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let mut total = 0.0;
    for (row, &l) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = row
            .iter()
            .map(|&v| (v as f64 - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        total += lse - row[l] as f64;
    }
    total / labels.len() as f64
}

/// Gradients of the built model's loss, unquantized, against central
/// differences on every parameter.
fn model_fd(spec: &ModelSpec, x: Tensor, labels: &[usize]) {
    let mut model = Model::build(spec, 3, 0.1, None).unwrap();
    let plan = QuantPlan::unquantized(true);
    let loss_of = |m: &mut Model| -> f64 {
        let mut tape = Tape::new();
        let fp = m.forward(&mut tape, x.clone(), &plan).unwrap();
        cross_entropy_f64(tape.value(fp.logits), labels)
    };
    let mut tape = Tape::new();
    let fp = model.forward(&mut tape, x.clone(), &plan).unwrap();
    let l = tape.softmax_cross_entropy(fp.logits, labels).unwrap();
    tape.backward(l).unwrap();
    model.collect_grads(&tape, &fp.param_vars).unwrap();
    for pi in 0..model.params.len() {
        let analytic: Vec<f64> = model.params[pi]
            .grad
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .map(|&g| g as f64)
            .collect();
        let mut numeric = Vec::new();
        for j in 0..model.params[pi].value.numel() {
            let orig = model.params[pi].value.data()[j];
            model.params[pi].value.data_mut()[j] = orig + H;
            let lp = loss_of(&mut model);
            model.params[pi].value.data_mut()[j] = orig - H;
            let lm = loss_of(&mut model);
            model.params[pi].value.data_mut()[j] = orig;
            numeric.push((lp - lm) / ((orig + H) as f64 - (orig - H) as f64));
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < TOL, "{}: relative error {e:e}", model.params[pi].name);
    }
}

#[test]
fn mlp_model_end_to_end() {
    let spec = ModelSpec::new(Architecture::Mlp {
        widths: vec![3, 8, 6, 2],
    });
    model_fd(&spec, randn(&[6, 3], 30), &[0, 1, 1, 0, 1, 0]);
}

#[test]
fn conv_direct_loop_oracle() {
    let (n, c, h, w, f, k) = (2, 3, 6, 6, 4, 3);
    let x = randn(&[n, c, h, w], 40);
    let wt = randn(&[f, c, k, k], 41);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let oh = (h + 2 * pad - k) / stride + 1;
        if (h + 2 * pad - k) % stride != 0 {
            continue;
        }
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(wt.clone()));
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        let got = tape.value(y);
        assert_eq!(got.shape(), &[n, f, oh, oh]);
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..oh {
                        let mut acc = 0.0f64;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = x.data()
                                        [((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                    let wi = wt.data()[((fi * c + ci) * k + ky) * k + kx];
                                    acc += xi as f64 * wi as f64;
                                }
                            }
                        }
                        let g = got.data()[((ni * f + fi) * oh + oy) * oh + ox] as f64;
                        assert!(
                            (g - acc).abs() < 1e-5,
                            "({ni},{fi},{oy},{ox}): {g} vs {acc}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn smooth_residual_chain() {
    let x = randn(&[4, 2, 5, 5], 50);
    let labels = [0, 1, 2, 1];
    let inputs = [
        randn(&[3, 2, 3, 3], 51),
        randn(&[3], 52),
        randn(&[3], 53),
        randn(&[3, 3, 3, 3], 54),
        randn(&[3, 2, 1, 1], 55),
        randn(&[3, 3], 56),
    ];
    let errs = fd_check(&inputs, H, |t, v| {
        let xv = t.leaf(x.clone());
        let mut s1 = BnState::new(3);
        let h = t.conv2d(xv, v[0], 2, 1).unwrap();
        let h = t.batch_norm(h, v[1], v[2], &mut s1, true).unwrap();
        let h = t.conv2d(h, v[3], 1, 1).unwrap();
        let sc = t.conv2d(xv, v[4], 2, 0).unwrap();
        let h = t.add(h, sc).unwrap();
        let p = t.global_avg_pool(h).unwrap();
        let o = t.matmul(p, v[5]).unwrap();
        t.softmax_cross_entropy(o, &labels).unwrap()
    });
    assert_fd(&errs);
}

/// Batch statistics over a few pixels and ReLU kinks make the tiny residual
/// net strongly curved at a 1e-3 step, so its gradient is checked along one
/// random direction over all parameters with a smaller step.
#[test]
fn resnet_directional_derivative() {
    let spec = ModelSpec::new(Architecture::TinyResnet {
        in_channels: 1,
        image_size: 5,
        stem_channels: 2,
        blocks: [1, 1, 1],
        classes: 3,
    });
    let x = randn(&[4, 1, 5, 5], 31);
    let labels = [0usize, 2, 1, 2];
    let mut model = Model::build(&spec, 3, 0.1, None).unwrap();
    let plan = QuantPlan::unquantized(true);
    let mut tape = Tape::new();
    let fp = model.forward(&mut tape, x.clone(), &plan).unwrap();
    let l = tape.softmax_cross_entropy(fp.logits, &labels).unwrap();
    tape.backward(l).unwrap();
    model.collect_grads(&tape, &fp.param_vars).unwrap();

    let dirs: Vec<Tensor> = model
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| randn(p.value.shape(), 200 + i as u64))
        .collect();
    let dot = |a: &Tensor, b: &Tensor| -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum()
    };
    let analytic: f64 = model
        .params
        .iter()
        .zip(&dirs)
        .map(|(p, d)| dot(p.grad.as_ref().unwrap(), d))
        .sum();
    let h = 3e-4f32;
    let loss_at = |sign: f32| {
        let mut m = model.clone();
        for (p, d) in m.params.iter_mut().zip(&dirs) {
            for (w, &dv) in p.value.data_mut().iter_mut().zip(d.data()) {
                *w += sign * h * dv;
            }
        }
        let mut tape = Tape::new();
        let fp = m.forward(&mut tape, x.clone(), &plan).unwrap();
        cross_entropy_f64(tape.value(fp.logits), &labels)
    };
    let numeric = (loss_at(1.0) - loss_at(-1.0)) / (2.0 * h as f64);
    let rel = (numeric - analytic).abs() / analytic.abs();
    assert!(
        rel < 2e-3,
        "analytic {analytic}, numeric {numeric}, relative {rel:e}"
    );
}
