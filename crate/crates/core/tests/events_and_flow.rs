//! Simulated events through voxelization, contrast maximization and the flow predictor.

use evsplat_core::contrast::{cm_grid_search, EventWindow};
use evsplat_core::events::{SimulatorConfig, DEFAULT_BINS};
use evsplat_core::flow::{quantize_f32, FlowSample, LoraAdapter, PredictorConfig, TiledFlowPredictor};
use evsplat_core::synth::Translation;

#[test]
fn grid_search_recovers_diagonal_motion_and_its_reversal() {
    let tr = Translation::new(48, 48, [3.0, -2.0]);
    let stream = tr.events(2, &SimulatorConfig::default()).unwrap();
    let forward = cm_grid_search(&EventWindow::whole(&stream), 0.0, 6.0, 0.5).unwrap();
    // the grid resolves the motion to within one step
    assert!((forward.flow[0] - 3.0).hypot(forward.flow[1] + 2.0) <= 0.5, "{:?}", forward.flow);
    let reversed = stream.time_reversed();
    let backward = cm_grid_search(&EventWindow::whole(&reversed), 0.0, 6.0, 0.5).unwrap();
    assert!((backward.flow[0] + 3.0).hypot(backward.flow[1] - 2.0) <= 0.5, "{:?}", backward.flow);
}

#[test]
fn sliding_samples_conserve_polarity_mass() {
    let tr = Translation::new(32, 32, [4.0, 1.0]).with_windows(3);
    let stream = tr.events(6, &SimulatorConfig::default()).unwrap();
    let samples = FlowSample::sliding(&stream, tr.window_us, tr.window_us / 3, DEFAULT_BINS).unwrap();
    assert!(samples.len() >= 7);
    for s in &samples {
        let net: f64 = s.events.events().iter().map(|e| e.p.sign()).sum();
        assert!((s.grid.sum() - net).abs() < 1e-9);
        assert!(s.events.events().iter().all(|e| e.t >= s.grid.t_start && e.t <= s.grid.t_end));
    }
}

#[test]
fn checkpoints_reproduce_predictions_bit_for_bit() {
    let cfg = PredictorConfig::new(32, 32);
    // trained weights are f32-rounded, which is what a checkpoint stores
    let mut base = TiledFlowPredictor::new(cfg.clone(), 4).unwrap().base_params().to_vec();
    quantize_f32(&mut base);
    let predictor = TiledFlowPredictor::from_params(cfg.clone(), base).unwrap();
    let mut adapter = LoraAdapter::new(&cfg, 4, 2).unwrap();
    adapter.params_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 1e-3 * (i % 7) as f64);
    let adapter = LoraAdapter::from_checkpoint(&adapter.to_checkpoint(&cfg), &cfg).unwrap();
    let loaded = TiledFlowPredictor::from_checkpoint(&predictor.to_checkpoint()).unwrap();
    let adapter2 = LoraAdapter::from_checkpoint(&adapter.to_checkpoint(&cfg), &cfg).unwrap();

    let tr = Translation::new(32, 32, [2.0, 2.0]);
    let stream = tr.events(1, &SimulatorConfig::default()).unwrap();
    let sample = FlowSample::new(&stream, 0, tr.window_us, DEFAULT_BINS).unwrap();
    let a = predictor.predict(&sample.grid, Some(&adapter)).unwrap();
    let b = loaded.predict(&sample.grid, Some(&adapter2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(predictor.base_checksum(), loaded.base_checksum());
}
