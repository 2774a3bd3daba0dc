use ternsim::config::TileConfig;
use ternsim::dfp::{DfpTensor, RoundingMode};
use ternsim::engine::RunOptions;
use ternsim::graph::{
    build_resnet50, build_toy, fp_forward, quantize_model, ExecOptions, MemoryPlan, NetworkGraph, QuantizedModel,
    ResNetSpec, Simulator,
};
use ternsim::model::{self, synth_fp_model, synth_tensor};
use ternsim::oracle;
use ternsim::quantizer::FusedLayerWeights;
use ternsim::regs::{LayerGeometry, LANES};
use ternsim::tensor::{ConvParams, Shape3, Trit};
use ternsim::validation;

fn small_classifier() -> NetworkGraph {
    ResNetSpec {
        name: "mini".into(),
        channel_scale: 1,
        input_hw: 32,
        widths: vec![64, 64],
        blocks: vec![1, 2],
        input_channels: 3,
        expansion: 2,
        stem: true,
        head: true,
        classes: 10,
    }
    .build()
    .unwrap()
}

#[test]
fn resnet50_descriptor_roundtrips_through_json() {
    let g = build_resnet50(1).unwrap();
    let back = NetworkGraph::from_json(&g.to_json()).unwrap();
    assert_eq!(back, g);
    assert_eq!(g.accelerator_convs().len(), 52);
    assert_eq!(g.eltwise_nodes().len(), 16);
    g.validate_schedule(&g.schedule()).unwrap();
}

#[test]
fn memory_plan_regions_are_disjoint_and_aligned() {
    for g in [build_resnet50(1).unwrap(), build_toy(), small_classifier()] {
        let plan = MemoryPlan::new(&g, 1).unwrap();
        let mut regions: Vec<_> = plan.slots.clone();
        regions.extend(plan.partials);
        for w in plan.weights.iter().flatten() {
            regions.extend([w.weights, w.scales, w.bias]);
        }
        for (i, a) in regions.iter().enumerate() {
            assert_eq!(a.base % 64, 0);
            assert!(a.end() <= plan.total_bytes);
            for b in &regions[i + 1..] {
                assert!(!a.overlaps(b), "{a:?} overlaps {b:?} in {}", g.name);
            }
        }
    }
}

#[test]
fn all_ones_layer_yields_64() {
    let geom = LayerGeometry::conv(64, 64, 1, 1, ConvParams::new(1, 1, 1, 0), false);
    let x = DfpTensor::from_vec(Shape3::new(64, 1, 1), vec![1; 64], 0);
    let mut w = FusedLayerWeights::zeros(64, 64, 1, 1, LANES);
    for b in &mut w.blocks {
        b.trits = vec![Trit::Pos; 64];
        b.alpha_q = 1;
    }
    let r = validation::run_on_engine(&TileConfig::arria10(), &geom, &x, &w, RoundingMode::RoundAndBias, 1, RunOptions::default())
        .unwrap();
    assert!(r.acc.data.iter().all(|&v| v == 64));
    assert_eq!(r.shift, 0);
    assert!(r.out.data.iter().all(|&v| v == 64));
}

#[test]
fn zero_model_gives_zero_output() {
    let g = build_toy();
    let q = QuantizedModel::zeros(&g);
    let mut sim = Simulator::new(&g, TileConfig::arria10(), ExecOptions::default()).unwrap();
    let out = sim.run(&q, &synth_tensor(g.nodes[0].shape, 3)).unwrap();
    assert!(out.scores().iter().all(|&v| v == 0.0));
    assert!(out.shifts.iter().all(|(_, s)| *s == 0));
}

#[test]
fn classifier_runs_end_to_end_and_is_deterministic() {
    let g = small_classifier();
    let fp = synth_fp_model(&g, 21);
    let calib = synth_tensor(g.nodes[0].shape, 22);
    let q = quantize_model(&fp, &calib, 64).unwrap();
    let blob = model::encode_quantized(&q);
    let q2 = model::decode_quantized(&blob).unwrap();
    assert_eq!(q2, q);

    let input = synth_tensor(g.nodes[0].shape, 23);
    let run = || {
        let mut sim = Simulator::new(&g, TileConfig::arria10(), ExecOptions::default()).unwrap();
        sim.run(&q2, &input).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let probs = a.probs.as_ref().unwrap();
    assert_eq!(probs.len(), 10);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(a.shifts.len(), g.accelerator_convs().len());

    // The FP pass is the calibration reference; quantized scores should at
    // least correlate with it.
    let fp_out = fp_forward(&fp, &input).unwrap();
    let fc = g.find("fc").unwrap();
    let fp_logits: Vec<f64> = fp_out[fc].data.iter().map(|&v| v as f64).collect();
    let logits = a.logits.unwrap();
    let dot: f64 = fp_logits.iter().zip(&logits).map(|(x, y)| x * y).sum();
    assert!(dot > 0.0);
}

#[test]
fn toy_network_matches_reference_for_every_rounding_and_pass_split() {
    let g = build_toy();
    let fp = synth_fp_model(&g, 5);
    let input = synth_tensor(g.nodes[0].shape, 6);
    let q = quantize_model(&fp, &input, 64).unwrap();
    let xq = ternsim::quantizer::quantize_activations(&input);
    for mode in RoundingMode::ALL {
        let reference = oracle::ref_network(&q, &xq, mode).unwrap();
        for groups in [1, 2] {
            let cfg = TileConfig { ifm_groups_per_pass: groups, ..TileConfig::arria10() };
            let opts = ExecOptions { rounding: mode, ..Default::default() };
            let out = Simulator::new(&g, cfg, opts).unwrap().run(&q, &input).unwrap();
            for (i, r) in reference.iter().enumerate() {
                assert_eq!(out.activations[i].as_ref(), Some(r), "{} {mode} groups={groups}", g.nodes[i].name);
            }
        }
    }
}

#[test]
fn trace_is_written_and_stable() {
    use std::sync::{Arc, Mutex};
    #[derive(Clone, Default)]
    struct Sink(Arc<Mutex<Vec<u8>>>);
    impl std::io::Write for Sink {
        fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(b);
            Ok(b.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }
    let g = build_toy();
    let q = quantize_model(&synth_fp_model(&g, 1), &synth_tensor(g.nodes[0].shape, 2), 64).unwrap();
    let input = synth_tensor(g.nodes[0].shape, 3);
    let trace = || {
        let sink = Sink::default();
        let mut sim = Simulator::new(&g, TileConfig::arria10(), ExecOptions::default())
            .unwrap()
            .with_trace(Box::new(sink.clone()));
        sim.run(&q, &input).unwrap();
        drop(sim);
        let bytes = sink.0.lock().unwrap().clone();
        String::from_utf8(bytes).unwrap()
    };
    let t = trace();
    assert!(t.lines().any(|l| l.contains("op=mac")));
    assert!(t.lines().any(|l| l.contains("op=downconvert")));
    assert!(t.lines().any(|l| l.contains("op=eltwise")));
    assert_eq!(t, trace());
}
