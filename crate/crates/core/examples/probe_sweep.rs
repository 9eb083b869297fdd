//! Scratch probe: find a detection-regime classifier configuration that
//! learns above chance on the desk corpora, then time a full size sweep.

use std::time::Instant;

use ndarray::Array3;
use volsynth_core::detect::{
    sweep_nodule_sizes, ClassifierConfig, FireSpec, Regime, RegimeConfig, SweepInputs,
    DEFAULT_SWEEP_SIZES,
};
use volsynth_core::evalmetrics::{train_extractor, FeatExConfig};
use volsynth_core::losses::{train_sgan, TrainConfig};
use volsynth_core::nodulesim::{
    init_nodule_gans, make_voi_examples, train_nodule_gans, voi_candidates, NoduleDists,
    NoduleGans, VoiGanTrainConfig, VOI_EDGE,
};
use volsynth_core::sgan::{generate_volume, init_model, ModelState, SganConfig};
use volsynth_core::voldata::{
    estimate_lung_mask, generate_cohort, generate_phantom, NoiseDomain, PhantomConfig, Volume,
};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn usable_phantoms(n: usize, seed0: u64) -> Vec<Volume> {
    let mut out = Vec::new();
    let mut seed = seed0;
    while out.len() < n {
        let p = generate_phantom(&PhantomConfig {
            depth: 32,
            height: 32,
            width: 32,
            domain: if seed % 2 == 0 { NoiseDomain::A } else { NoiseDomain::B },
            seed,
        });
        seed += 1;
        if voi_candidates(&estimate_lung_mask(&p.volume.data), VOI_EDGE).len() >= 50 {
            out.push(p.volume);
        }
    }
    out
}

fn trained_state() -> ModelState {
    let dims = (32, 32, 32);
    let cohort = generate_cohort(200, 0, dims);
    let data: Vec<Array3<f32>> = cohort.iter().map(|p| p.volume.data.clone()).collect();
    // extractor is irrelevant here but keeps the fixture identical to the suite
    let _ = train_extractor(&cohort, &FeatExConfig::desk(), 1, 16, 0);
    let mut state = init_model(&SganConfig::desk(), 0);
    let cfg = TrainConfig::desk();
    let (mut opt_d, mut opt_g) = cfg.optimizers();
    train_sgan(&mut state, &data, &cfg, &mut opt_d, &mut opt_g, |_| {}).expect("training");
    state
}

fn trained_gans() -> NoduleGans {
    let vols: Vec<Array3<f32>> = usable_phantoms(12, 400).into_iter().map(|v| v.data).collect();
    let masks: Vec<Array3<bool>> = vols.iter().map(|v| estimate_lung_mask(v)).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let examples =
        make_voi_examples(&vols, &masks, &NoduleDists::desk(), 4, VOI_EDGE, &mut rng).unwrap();
    let mut gans = init_nodule_gans(VOI_EDGE, 8, 0).unwrap();
    train_nodule_gans(&mut gans, &examples, &VoiGanTrainConfig::desk(), |_, _| {}).unwrap();
    gans
}

fn main() {
    let t0 = Instant::now();
    let state = trained_state();
    println!("sgan fixture: {:.1?}", t0.elapsed());
    let t0 = Instant::now();
    let gans = trained_gans();
    println!("nodule fixture: {:.1?}", t0.elapsed());

    let t0 = Instant::now();
    let mut synthetic = Vec::new();
    for i in 0..80 {
        let v = generate_volume(&state, 20_000 + i);
        if voi_candidates(&estimate_lung_mask(&v.data), VOI_EDGE).len() >= 8 {
            synthetic.push(v);
        }
        if synthetic.len() == 24 {
            break;
        }
    }
    let real = usable_phantoms(32, 30_000);
    println!("pools: {} synthetic, {} real, {:.1?}", synthetic.len(), real.len(), t0.elapsed());

    let base = ClassifierConfig {
        stem: 8,
        fires: vec![FireSpec { squeeze: 6, expand: 10 }, FireSpec { squeeze: 8, expand: 12 }],
        pools: vec![true, true],
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        batch: 4,
        max_steps: 240,
        seed: 0,
    };
    let candidates = [
        ("lr1e-3 s240", base.clone()),
        ("lr1e-3 s400", ClassifierConfig { max_steps: 400, ..base.clone() }),
        ("lr3e-3 s240", ClassifierConfig { lr: 3e-3, ..base.clone() }),
    ];

    let root = std::env::temp_dir().join(format!("probe-sweep-{}", std::process::id()));
    for (tag, classifier) in &candidates {
        let t0 = Instant::now();
        let inputs = SweepInputs {
            real_clean: &real,
            synthetic_clean: &synthetic,
            gans: &gans,
            count_probs: vec![0.0, 1.0],
            intensity_range: [0.7, 0.9],
            ratios: [0.75, 0.125, 0.125],
            dir: root.join(tag.replace(' ', "-")),
            seed: 0,
        };
        let cfg = RegimeConfig { classifier: classifier.clone(), seeds: vec![0, 1, 2] };
        let report = sweep_nodule_sizes(&[6.0], &inputs, &cfg).expect("single-size sweep");
        println!("== {tag} (radius 6 only, {:.1?}) ==", t0.elapsed());
        println!("{}", report.table());
        for regime in [Regime::RealOnly, Regime::SyntheticOnly, Regime::PretrainFinetune] {
            let accs = &report.reports[0].result(regime).accuracies;
            println!("  {regime:?}: {accs:?}");
        }
    }

    // full sweep with the baseline candidate: ordering + wall time
    let t0 = Instant::now();
    let inputs = SweepInputs {
        real_clean: &real,
        synthetic_clean: &synthetic,
        gans: &gans,
        count_probs: vec![0.0, 1.0],
        intensity_range: [0.7, 0.9],
        ratios: [0.75, 0.125, 0.125],
        dir: root.join("full"),
        seed: 0,
    };
    let cfg = RegimeConfig { classifier: base, seeds: vec![0, 1, 2] };
    let report = sweep_nodule_sizes(&DEFAULT_SWEEP_SIZES, &inputs, &cfg).expect("full sweep");
    println!("== full sweep lr1e-3 s240 ({:.1?}) ==", t0.elapsed());
    println!("{}", report.table());
    for j in 0..3 {
        let mean_of = |regime: Regime| {
            report.reports.iter().map(|r| r.result(regime).accuracies[j]).sum::<f64>()
                / report.reports.len() as f64
        };
        println!(
            "  seed {j}: pre {:.3} real {:.3} synth {:.3}",
            mean_of(Regime::PretrainFinetune),
            mean_of(Regime::RealOnly),
            mean_of(Regime::SyntheticOnly),
        );
    }
    let _ = std::fs::remove_dir_all(&root);
}
