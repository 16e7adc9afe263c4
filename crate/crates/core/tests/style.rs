use candle_core::{DType, Device, Tensor};
use hstyle_core::style::{channel_statistics, FeatureNetSpec, StyleStats};
use hstyle_core::*;

fn micro() -> Model {
    let cfg = ModelConfig::micro();
    let tok = Tokenizer::build(["a"], cfg.text.max_text_tokens);
    Model::new(cfg, tok).unwrap()
}

fn level_sums(s: &StyleStats) -> Vec<(f64, f64)> {
    s.levels
        .iter()
        .map(|l| (l.mean.iter().sum(), l.std.iter().sum()))
        .collect()
}

#[test]
fn black_image_statistics_match_the_recorded_fixture() {
    let m = micro();
    let black = Tensor::zeros((3, 32, 32), DType::F32, &Device::Cpu).unwrap();
    let stats = m.style_encoder().statistics(&black).unwrap();
    let again = micro().style_encoder().statistics(&black).unwrap();
    assert_eq!(stats, again);
    // Recorded from one forward pass of the seeded micro feature network.
    let golden = GOLDEN_BLACK;
    for ((mean, std), (gm, gs)) in level_sums(&stats).into_iter().zip(golden) {
        assert!((mean - gm).abs() <= 1e-6 * gm.abs().max(1.0), "{mean} vs {gm}");
        assert!((std - gs).abs() <= 1e-6 * gs.abs().max(1.0), "{std} vs {gs}");
    }
}

// Per-level (sum of means, sum of stds).
const GOLDEN_BLACK: [(f64, f64); 3] = [
    (5.983192042796873, 3.186298926299389),
    (11.296351616736501, 7.861423018810266),
    (12.751546323299408, 11.124877224056037),
];

#[test]
fn same_image_gives_the_same_pyramid() {
    let m = micro();
    let img = toy::render(&toy::toy_styles()[3], "cross", "left", 40, 2).unwrap();
    let a = m.style_encoder().statistics(&img).unwrap();
    let b = m.style_encoder().statistics(&img).unwrap();
    assert_eq!(a, b);
    let e = m.encode_style(&img).unwrap();
    assert_eq!(e.tokens().dims(), [9, m.config().diffusion.context_dim]);
}

#[test]
fn desk_taps_have_the_documented_widths() {
    let cfg = ModelConfig::desk();
    assert_eq!(
        cfg.style.feature_net,
        FeatureNetSpec::RandomVgg {
            seed: 0x5eed,
            widths: [128, 256, 512]
        }
    );
    let tok = Tokenizer::build(["a"], cfg.text.max_text_tokens);
    let m = Model::new(cfg, tok).unwrap();
    assert_eq!(m.style_encoder().feature_net().tap_channels(), [128, 256, 512]);
}

#[test]
fn fresh_level_networks_emit_zero_tokens() {
    let m = micro();
    let img = toy::render(&toy::toy_styles()[0], "circle", "center", 32, 1).unwrap();
    let v = m.encode_style(&img).unwrap().tokens().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(v.iter().all(|x| *x == 0.0));
}

#[test]
fn non_rgb_input_is_a_format_error() {
    let m = micro();
    let gray = Tensor::zeros((1, 32, 32), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(m.encode_style(&gray), Err(Error::Format(_))));
}

#[test]
fn statistics_edge_cases() {
    let constant = Tensor::full(2.5f32, (3, 4, 1), &Device::Cpu).unwrap();
    let s = channel_statistics(&constant).unwrap();
    assert_eq!((s.mean[0], s.std[0]), (2.5, 0.0));

    let twin = Tensor::from_vec(vec![1f32, 1., 4., 4., -2., -2.], (3, 2), &Device::Cpu).unwrap();
    let s = channel_statistics(&twin).unwrap();
    assert_eq!(s.mean[0], s.mean[1]);
    assert_eq!(s.std[0], s.std[1]);
    assert_eq!(s.to_vec().len(), 4);

    let empty = Tensor::zeros((0, 3), DType::F32, &Device::Cpu).unwrap();
    assert!(matches!(channel_statistics(&empty), Err(Error::Shape(_))));
}
