//! Golden stream trace of a 4x4 delta-kernel depthwise convolution.

use std::path::PathBuf;

use dscnn_core::ir::layer::ConvKind;
use dscnn_core::ir::tensor::{Shape, Tensor};
use dscnn_core::kernel::conv::{first_output_latency, WindowConvStage};
use dscnn_core::kernel::stream::{format_trace, run_round_robin, Stage};
use dscnn_core::quant::qnet::{FusedActivation, QConv};
use dscnn_core::quant::requant::{RequantMode, Requantizer};
use dscnn_core::quant::spec::{Granularity, QuantMode, QuantSpec};

fn delta_kernel() -> QConv {
    let act = QuantSpec::from_range(-1.0, 2.0, 4, QuantMode::Asymmetric).unwrap();
    let w_spec = QuantSpec {
        scale: vec![1.0],
        zero_point: vec![3],
        bw: 4,
        mode: QuantMode::Asymmetric,
        granularity: Granularity::PerLayer,
        clip_range: [-3.0, 12.0],
    };
    let mut weights = vec![3; 9];
    weights[4] = 4;
    QConv {
        name: "dw".into(),
        kind: ConvKind::Depthwise,
        n: 1,
        m: 1,
        k: 3,
        stride: 1,
        groups: 1,
        weights,
        w_spec,
        bias: vec![0],
        in_spec: act.clone(),
        out_spec: act,
        requant: vec![Requantizer::new(1.0, RequantMode::FixedPoint).unwrap()],
        activation: FusedActivation::None,
    }
}

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/delta_kernel.trace")
}

#[test]
fn delta_kernel_trace_matches_golden() {
    let x = Tensor::new(Shape::new(1, 4, 4), (0..16).collect()).unwrap();
    let stage = WindowConvStage::new(delta_kernel(), 4, 4).unwrap();
    assert_eq!(stage.first_output_at(), None);
    let mut stages: Vec<Box<dyn Stage>> = vec![Box::new(stage)];
    let run = run_round_robin(&mut stages, &x.to_pixel_major(), 1, true).unwrap();
    assert_eq!(run.output, x.to_pixel_major());
    let events = run.trace.unwrap();

    // The first output needs real pixel (1, 1): the padded fill count
    // (K-1)*Wp + K less the padding row and column injected in-stage.
    let first_out = events.iter().position(|e| e.channel == 1).unwrap();
    let inputs_before = events[..first_out].iter().filter(|e| e.channel == 0).count();
    assert_eq!(first_output_latency(3, 6), 2 * 6 + 3);
    assert_eq!(inputs_before, 4 + 2);

    let text = format_trace(&events);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(fixture(), &text).unwrap();
    }
    let golden = std::fs::read_to_string(fixture()).expect("golden trace present");
    assert_eq!(text, golden);
}
