use super::*;
use crate::schema::presets;
use rand::Rng;

fn small(mode: Mode, channels: usize, width: usize, levels: usize) -> ModelConfig {
    ModelConfig {
        input_channels: 1,
        base_width: width,
        levels,
        norm_eps: 1e-5,
        mode,
        output_channels: channels,
        output_sigmoid: false,
        normalize_stem: false,
        input_mean: 0.0,
        input_std: 1.0,
    }
}

fn input(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor {
        channels: 1,
        height: h,
        width: w,
        data: (0..h * w).map(|_| rng.gen_range(1.0..10.0)).collect(),
    }
}

/// Gives the head random weights so gradients reach the trunk.
fn randomize_head(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in model.blocks.iter_mut().filter(|b| b.name.starts_with("head.")) {
        for v in &mut b.data {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    model.bump_version();
}

fn weighted_sum(y: &Tensor<f64>, w: &[f64]) -> f64 {
    y.data.iter().zip(w).map(|(a, b)| a * b).sum()
}

#[test]
fn zero_head_gives_zero_logits() {
    let model = Model::<f64>::new(small(Mode::Gss, 13, 4, 2), 1).unwrap();
    let (y, _) = model.forward(&input(8, 8, 2)).unwrap();
    assert_eq!((y.channels, y.height, y.width), (13, 8, 8));
    assert!(y.data.iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut model = Model::<f64>::new(small(Mode::Dss, 5, 4, 2), 1).unwrap();
    randomize_head(&mut model, 9);
    let x = input(8, 8, 3);
    let a = model.forward(&x).unwrap().0;
    let b = model.forward(&x).unwrap().0;
    assert_eq!(a, b);
    let m32 = model.cast::<f32>();
    let x32 = Tensor {
        channels: 1,
        height: 8,
        width: 8,
        data: x.data.iter().map(|&v| v as f32).collect(),
    };
    assert_eq!(m32.forward(&x32).unwrap().0, m32.forward(&x32).unwrap().0);
}

#[test]
fn rejects_bad_dimensions() {
    let model = Model::<f64>::new(small(Mode::Dss, 5, 4, 2), 1).unwrap();
    assert!(matches!(model.forward(&input(6, 8, 0)), Err(NetError::Dimension { divisor: 4, .. })));
}

#[test]
fn stale_cache_is_rejected() {
    let mut model = Model::<f64>::new(small(Mode::Dss, 3, 2, 1), 1).unwrap();
    let x = input(4, 4, 0);
    let (y, cache) = model.forward(&x).unwrap();
    model.bump_version();
    assert_eq!(model.backward(cache, &y), Err(NetError::StaleCache));
    let other = model.clone();
    let (y, cache) = model.forward(&x).unwrap();
    assert_eq!(other.backward(cache, &y), Err(NetError::StaleCache));
    let (_, cache) = model.forward(&x).unwrap();
    let wrong = Tensor::zeros(2, 4, 4);
    assert!(matches!(model.backward(cache, &wrong), Err(NetError::GradShape { .. })));
}

#[test]
fn backward_is_linear_in_upstream() {
    let mut model = Model::<f64>::new(small(Mode::Dss, 3, 2, 1), 4).unwrap();
    randomize_head(&mut model, 5);
    let x = input(4, 4, 1);
    let (y, cache) = model.forward(&x).unwrap();
    let zero = model.backward(cache, &Tensor::zeros(y.channels, y.height, y.width)).unwrap();
    assert!(zero.iter().flatten().all(|&v| v == 0.0));
    let g = Tensor {
        data: (0..y.data.len()).map(|i| (i as f64 * 0.3).sin()).collect(),
        ..y.clone()
    };
    let g2 = Tensor {
        data: g.data.iter().map(|v| 2.0 * v).collect(),
        ..y.clone()
    };
    let a = model.backward(model.forward(&x).unwrap().1, &g).unwrap();
    let b = model.backward(model.forward(&x).unwrap().1, &g2).unwrap();
    for (ga, gb) in a.iter().flatten().zip(b.iter().flatten()) {
        assert!((2.0 * ga - gb).abs() <= 1e-12 * (1.0 + gb.abs()));
    }
}

#[test]
fn network_gradient_matches_finite_differences() {
    for (sigmoid, normalize_stem) in [(false, false), (true, false), (false, true)] {
        let mut cfg = small(Mode::Gss, 6, 2, 1);
        cfg.output_sigmoid = sigmoid;
        cfg.normalize_stem = normalize_stem;
        let mut model = Model::<f64>::new(cfg, 21).unwrap();
        randomize_head(&mut model, 22);
        let x = input(4, 4, 23);
        let (y, cache) = model.forward(&x).unwrap();
        let w: Vec<f64> = (0..y.data.len()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let upstream = Tensor { data: w.clone(), ..y };
        let grads = model.backward(cache, &upstream).unwrap();
        let h = 1e-6;
        for bi in 0..model.blocks.len() {
            for k in (0..model.blocks[bi].data.len()).step_by(5) {
                let mut plus = model.clone();
                plus.blocks[bi].data[k] += h;
                let mut minus = model.clone();
                minus.blocks[bi].data[k] -= h;
                let fd = (weighted_sum(&plus.forward(&x).unwrap().0, &w)
                    - weighted_sum(&minus.forward(&x).unwrap().0, &w))
                    / (2.0 * h);
                let an = grads[bi][k];
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + fd.abs().max(an.abs())),
                    "{} [{k}]: fd {fd} analytic {an}",
                    model.blocks[bi].name
                );
            }
        }
    }
}

#[test]
fn parity_between_heads() {
    let schema = presets::toy();
    let g = ModelConfig::for_schema(Mode::Gss, &schema);
    let d = ModelConfig::for_schema(Mode::Dss, &schema);
    let mg = Model::<f32>::new(g.clone(), 5).unwrap();
    let md = Model::<f32>::new(d.clone(), 5).unwrap();
    assert_eq!(mg.trunk_parameter_count(), md.trunk_parameter_count());
    let extra = g.output_channels - d.output_channels;
    // one extra channel per group for p, one void slot per foreground group
    assert_eq!(extra, 2 * schema.num_groups() - 1);
    // the head reads the last decoder block and, with a plain stem, the stem features
    let head_in = if g.normalize_stem { g.base_width } else { 2 * g.base_width };
    assert_eq!(g.parameter_count() - d.parameter_count(), extra * (head_in + 1));
    assert_eq!(mg.parameter_count(), g.parameter_count());
    // identical seeds give identical trunks
    for (a, b) in mg.blocks.iter().zip(&md.blocks).filter(|(a, _)| !a.name.starts_with("head.")) {
        assert_eq!(a, b);
    }
    let full = presets::indoor(true);
    assert_eq!(ModelConfig::for_schema(Mode::Gss, &full).output_channels, 46);
}

#[test]
fn checkpoint_blocks_match_layout() {
    let cfg = small(Mode::Dss, 3, 2, 2);
    let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
    let values: Vec<Vec<f32>> = model.blocks.iter().map(|b| b.data.clone()).collect();
    let rebuilt = Model::from_blocks(cfg.clone(), values.clone()).unwrap();
    assert_eq!(rebuilt.blocks, model.blocks);
    let mut short = values;
    short[0].pop();
    assert!(matches!(Model::from_blocks(cfg, short), Err(NetError::BlockSize { .. })));
}
