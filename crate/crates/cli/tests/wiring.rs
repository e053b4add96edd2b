use std::collections::BTreeSet;

use freqdet_cli::optim::AdamW;
use freqdet_cli::train::loss_and_grads;
use freqdet_cli::{Detector, DetectorConfig};
use freqdet_core::boxes::BoxSet;
use freqdet_core::scenes::{batch_images, generate, SceneSpec};

fn small() -> DetectorConfig {
    DetectorConfig { stem_channels: 8, image_size: 32, batch_size: 2, lr: 1e-3, ..DetectorConfig::default() }
}

/// Every parameter of the full model sees a nonzero gradient within the
/// first two steps of some seed. The FF spectral convs sit behind α = 0 at
/// initialization and only wake up once the first step has moved α.
#[test]
fn no_dead_branches_with_everything_enabled() {
    let cfg = small();
    let det = Detector::new(&cfg).unwrap();
    let mut alive = BTreeSet::new();
    let mut names = BTreeSet::new();
    for seed in 0..5 {
        let spec = SceneSpec { height: 32, width: 32, max_objects: 4, max_size: 6, seed, ..SceneSpec::default() };
        let data = generate(&spec, 2).unwrap();
        let gts: Vec<BoxSet> = data.iter().map(|s| s.gt.clone()).collect();
        let mut store = det.init_params::<f64>(seed).unwrap();
        names.extend(store.names().map(String::from));
        let mut opt = AdamW::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
        for _ in 0..2 {
            let (_, grads) = loss_and_grads(&det, &store, batch_images(&data, &[0, 1]).unwrap(), &gts).unwrap();
            for (name, g) in &grads {
                assert!(g.is_finite(), "{name} has a non-finite gradient");
                if g.data().iter().any(|v| *v != 0.0) {
                    alive.insert(name.clone());
                }
            }
            opt.step(&mut store, &grads);
        }
    }
    let dead: Vec<_> = names.difference(&alive).collect();
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}

#[test]
fn ablation_parameter_sets_differ_only_in_their_modules() {
    let base = small();
    let full = Detector::new(&base).unwrap().init_params::<f64>(0).unwrap();
    for cfg in base.ablations() {
        let store = Detector::new(&cfg).unwrap().init_params::<f64>(0).unwrap();
        for (name, t) in store.iter() {
            if let Some(f) = full.get(name) {
                assert_eq!(f, t, "{name} differs under {}", cfg.label());
            }
        }
        for prefix in ["stem.", "head."] {
            assert!(store.names().any(|n| n.starts_with(prefix)));
        }
    }
}
