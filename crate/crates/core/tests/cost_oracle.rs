use ldp_core::cost::{
    balance, cost_grad, cost_loss, forward_cost, forward_cost_bits, layer_full_bitops, static_cost,
    static_target, training_bitops_report, BalanceConfig, LayerCost, LayerDesc,
};
use ldp_core::harness::model::{Architecture, Model, ModelSpec};
use ldp_core::quantizer::PrecisionParam;
use ldp_core::rng::{stream_rng, Stream};
use ldp_core::schedule::ScheduleRecord;
use proptest::prelude::*;
use rand::Rng;

/// Counts multiply-accumulates of a direct convolution by walking every
/// window that fits the padded input and every tap inside it.
fn count_conv_macs(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> u64 {
    let mut macs = 0u64;
    for _ in 0..n {
        for _ in 0..f {
            let mut y = 0;
            while y + k <= h + 2 * pad {
                let mut x = 0;
                while x + k <= w + 2 * pad {
                    for _ in 0..c {
                        for _ in 0..k {
                            for _ in 0..k {
                                macs += 1;
                            }
                        }
                    }
                    x += stride;
                }
                y += stride;
            }
        }
    }
    macs
}

fn count_matmul_macs(m: usize, k: usize, n: usize) -> u64 {
    let mut macs = 0u64;
    for _ in 0..m {
        for _ in 0..n {
            for _ in 0..k {
                macs += 1;
            }
        }
    }
    macs
}

#[test]
fn conv_and_matmul_counts_match_loops() {
    let mut rng = stream_rng(21, Stream::Weights);
    for _ in 0..200 {
        let (n, c, f): (usize, usize, usize) = (
            rng.gen_range(1..3),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let k: usize = rng.gen_range(1..4);
        let stride: usize = rng.gen_range(1..3);
        let pad: usize = rng.gen_range(0..2);
        let h = k + stride * rng.gen_range(0..5);
        let w = k + stride * rng.gen_range(0..5);
        let (h, w) = (
            h.saturating_sub(2 * pad).max(1),
            w.saturating_sub(2 * pad).max(1),
        );
        let desc = LayerDesc::Conv2d {
            n,
            c,
            h,
            w,
            f,
            kh: k,
            kw: k,
            stride,
            pad,
        };
        let Ok(cost) = layer_full_bitops(0, "conv", &desc) else {
            continue;
        };
        assert_eq!(
            cost.macs,
            count_conv_macs(n, c, h, w, f, k, stride, pad),
            "{desc:?}"
        );
        assert_eq!(cost.o_full, cost.macs * 1024);
    }
    for (m, k, n) in [(1, 784, 256), (3, 5, 7), (32, 64, 10)] {
        let cost = layer_full_bitops(0, "fc", &LayerDesc::MatMul { m, k, n }).unwrap();
        assert_eq!(cost.macs, count_matmul_macs(m, k, n));
    }
    assert!(layer_full_bitops(0, "bn", &LayerDesc::Other("batch_norm".into())).is_err());
}

#[test]
fn tiny_resnet_hand_count() {
    let spec = ModelSpec::new(Architecture::TinyResnet {
        in_channels: 1,
        image_size: 13,
        stem_channels: 16,
        blocks: [2, 2, 2],
        classes: 10,
    });
    let model = Model::build(&spec, 0, 0.1, None).unwrap();
    let all = model.all_costs();
    let by_prefix = |p: &str| {
        all.iter()
            .filter(|c| c.name.starts_with(p))
            .map(|c| c.macs)
            .sum::<u64>()
    };
    // stem: 13*13 positions * 16 filters * 9 taps
    assert_eq!(by_prefix("stem"), 24_336);
    // 4 convs of 16->16 at 13x13
    assert_eq!(by_prefix("stage0"), 4 * 169 * 16 * 16 * 9);
    assert_eq!(by_prefix("stage0"), 1_557_504);
    // 7x7 outputs: 16->32, three 32->32, 1x1 shortcut
    assert_eq!(
        by_prefix("stage1"),
        49 * 32 * 16 * 9 + 3 * 49 * 32 * 32 * 9 + 49 * 32 * 16
    );
    assert_eq!(by_prefix("stage1"), 1_605_632);
    // 4x4 outputs: 32->64, three 64->64, 1x1 shortcut
    assert_eq!(
        by_prefix("stage2"),
        16 * 64 * 32 * 9 + 3 * 16 * 64 * 64 * 9 + 16 * 64 * 32
    );
    assert_eq!(by_prefix("stage2"), 2_097_152);
    assert_eq!(by_prefix("fc"), 640);
    assert_eq!(all.iter().map(|c| c.macs).sum::<u64>(), 5_285_264);

    let exempt: Vec<String> = model.exempt_costs().into_iter().map(|c| c.name).collect();
    assert_eq!(exempt, ["stem", "fc"]);
    let q: u64 = model.quantized_costs().iter().map(|c| c.macs).sum();
    assert_eq!(q, 5_285_264 - 24_336 - 640);
}

#[test]
fn mlp_cost_report_hand_count() {
    let spec = ModelSpec::new(Architecture::Mlp {
        widths: vec![784, 256, 128, 10],
    });
    let model = Model::build(&spec, 0, 0.1, None).unwrap();
    let costs = model.quantized_costs();
    assert_eq!(costs.len(), 1);
    assert_eq!(costs[0].name, "fc1");
    assert_eq!(costs[0].macs, 32_768);
    assert_eq!(costs[0].o_full, 33_554_432);
    assert_eq!(static_cost(&costs, 8), 2_097_152.0);
    assert_eq!(static_target(&costs, 8, 0.6), 0.6 * 2_097_152.0);
    assert!((static_target(&costs, 8, 0.6) - 1_258_291.2).abs() < 1e-6);
    assert_eq!(static_cost(&costs, 3), 294_912.0);
    assert_eq!(static_cost(&costs, 32), 33_554_432.0);
    let exempt: u64 = model.exempt_costs().iter().map(|c| c.macs).sum();
    assert_eq!(exempt, 784 * 256 + 128 * 10);
}

fn costs_of(macs: &[u64]) -> Vec<LayerCost> {
    macs.iter()
        .enumerate()
        .map(|(i, &m)| LayerCost {
            layer_id: i,
            name: format!("l{i}"),
            macs: m,
            o_full: m * 1024,
        })
        .collect()
}

#[test]
fn cost_gradient_matches_finite_difference_of_surrogate() {
    let mut rng = stream_rng(22, Stream::Weights);
    for _ in 0..100 {
        let layers = rng.gen_range(1..6);
        let macs: Vec<u64> = (0..layers).map(|_| rng.gen_range(1..100_000)).collect();
        let costs = costs_of(&macs);
        let mut ps: Vec<PrecisionParam> = (0..layers)
            .map(|i| PrecisionParam::new(i, 8, 2, 8, 0.1).unwrap())
            .collect();
        for p in ps.iter_mut() {
            p.beta = rng.gen_range(0.25..1.0);
        }
        let surrogate = |betas: &[f64]| -> f64 {
            betas
                .iter()
                .zip(&costs)
                .map(|(b, c)| c.o_full as f64 * (b * 8.0 / 32.0).powi(2))
                .sum()
        };
        let betas: Vec<f64> = ps.iter().map(|p| p.beta).collect();
        let g = cost_grad(&ps, &costs, 1.0, 0.0).unwrap();
        for l in 0..layers {
            let h = 1e-6;
            let (mut up, mut dn) = (betas.clone(), betas.clone());
            up[l] += h;
            dn[l] -= h;
            let numeric = (surrogate(&up) - surrogate(&dn)) / (2.0 * h);
            assert!(
                (numeric - g[l]).abs() / g[l].abs() < 1e-6,
                "{numeric} vs {}",
                g[l]
            );
        }
        assert_eq!(cost_grad(&ps, &costs, 1.0, 2.0).unwrap(), vec![0.0; layers]);
    }
}

#[test]
fn hinge_and_forward_cost() {
    assert_eq!(cost_loss(5.0, 6.0), 0.0);
    assert_eq!(cost_loss(6.0, 6.0), 6.0);
    assert_eq!(cost_loss(7.0, 6.0), 7.0);
    let costs = costs_of(&[100, 300]);
    let mut ps: Vec<PrecisionParam> = (0..2)
        .map(|i| PrecisionParam::new(i, 8, 2, 8, 0.1).unwrap())
        .collect();
    ps[0].set_beta(4.0 / 8.0);
    ps[1].set_beta(6.0 / 8.0);
    let want = 100.0 * 16.0 + 300.0 * 36.0;
    assert_eq!(forward_cost(&ps, &costs).unwrap(), want);
    assert_eq!(forward_cost_bits(&[4, 6], &costs).unwrap(), want);
    assert!(forward_cost_bits(&[4], &costs).is_err());
}

#[test]
fn training_report_matches_hand_sum() {
    let costs = costs_of(&[10, 20]);
    let bits = [[8u32, 4], [6, 6], [3, 8]];
    let log: Vec<ScheduleRecord> = bits
        .iter()
        .enumerate()
        .flat_map(|(it, row)| {
            row.iter().enumerate().map(move |(l, &b)| ScheduleRecord {
                iteration: it as u64,
                layer_id: l,
                layer_name: format!("l{l}"),
                beta: b as f64 / 8.0,
                bits: b,
                fwd_bitops: 0.0,
                cum_fwd_bitops: 0.0,
            })
        })
        .collect();
    let report = training_bitops_report(&log, &costs, Some(8)).unwrap();
    let mut fwd = 0.0;
    let mut train = 0.0;
    for row in bits {
        for (l, &b) in row.iter().enumerate() {
            let m = costs[l].macs as f64;
            let b = b as f64;
            fwd += m * b * b;
            train += m * (b * b + 2.0 * b * 8.0);
        }
    }
    assert_eq!(report.total_fwd_bitops, fwd);
    assert_eq!(report.total_train_bitops, train);
    assert_eq!(report.per_iteration.len(), 3);
    assert_eq!(report.per_iteration[2].cumulative_train_bitops, train);
    let fwd_only = training_bitops_report(&log, &costs, None).unwrap();
    assert_eq!(fwd_only.total_train_bitops, fwd);
}

#[test]
fn balance_is_invariant_to_cost_gradient_scale() {
    let mut rng = stream_rng(23, Stream::Weights);
    let cfg = BalanceConfig {
        alpha: 1.0,
        epsilon: 0.0,
    };
    for _ in 0..1000 {
        let len = rng.gen_range(1..10);
        let gt: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gc: Vec<f64> = (0..len).map(|_| rng.gen_range(0.1..1e6)).collect();
        let k = 10f64.powf(rng.gen_range(-6.0..6.0));
        let scaled: Vec<f64> = gc.iter().map(|g| g * k).collect();
        let a = balance(&gt, &gc, cfg).unwrap();
        let b = balance(&gt, &scaled, cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
    }
}

proptest! {
    #[test]
    fn balance_rescaled_cost_matches_task_magnitude(
        gt in prop::collection::vec(-10.0f64..10.0, 1..8),
        seed in any::<u64>(),
    ) {
        let mut rng = stream_rng(seed, Stream::Weights);
        let gc: Vec<f64> = gt.iter().map(|_| rng.gen_range(1.0..1e5)).collect();
        let cfg = BalanceConfig { alpha: 1.0, epsilon: 0.0 };
        let g = balance(&gt, &gc, cfg).unwrap();
        let mean = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
        let added: Vec<f64> = g.iter().zip(&gt).map(|(a, b)| a - b).collect();
        prop_assert!((mean(&added) - mean(&gt)).abs() <= 1e-9 * mean(&gt).max(1.0));
        let zero = balance(&gt, &vec![0.0; gt.len()], cfg).unwrap();
        prop_assert_eq!(zero, gt);
    }

    #[test]
    fn forward_cost_is_monotone_in_bits(macs in prop::collection::vec(1u64..10_000, 1..6), b in 2u32..8) {
        let costs = costs_of(&macs);
        let lo = forward_cost_bits(&vec![b; macs.len()], &costs).unwrap();
        let hi = forward_cost_bits(&vec![b + 1; macs.len()], &costs).unwrap();
        prop_assert!(lo < hi);
        prop_assert_eq!(lo, static_cost(&costs, b));
    }
}
