//! Acceptance suite: ten numbered criteria covering window assembly,
//! the adversarial objectives, the gradient penalty, phase isolation,
//! metric identities, training efficacy, nodule editing, dataset mix
//! fairness, regime ordering, and stage determinism. Each test prints
//! one `ACCEPTANCE n: PASS/FAIL` line (run with `--nocapture` to see
//! the passing lines) and fails if its assertions or its runtime
//! budget are violated. Tests are named `c01`..`c10` so the default
//! alphabetical order runs them in criterion order; the expensive
//! trained models are built once and shared.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use volsynth_core::detect::{
    sweep_nodule_sizes, ClassifierConfig, FireSpec, Regime, RegimeConfig, SweepInputs,
    DEFAULT_SWEEP_SIZES,
};
use volsynth_core::evalmetrics::{
    frechet_distance, gaussian_stats, inception_score_from_probs, slicewise_fid, train_extractor,
    FeatExConfig,
};
use volsynth_core::latent::{slice_count, LatentConfig};
use volsynth_core::losses::{
    d_phase, g_phase, js_discriminator_loss, js_generator_loss, r1_penalty, train_sgan,
    BatchScores, TrainConfig,
};
use volsynth_core::manifest::{
    DetectStage, ExperimentManifest, GenerateStage, MetricsStage, NodulesimStage, PhantomStage,
    SganTrainStage, MANIFEST_VERSION,
};
use volsynth_core::nodulesim::{
    apply_eraser, apply_injector, build_unbiased_dataset, composite_into, erase_nodule,
    extract_voi, init_nodule_gans, inject_nodule, label_domain_mi_bits, make_voi_examples,
    sphere_mask, train_nodule_gans, voi_candidates, Label, NoduleDists, NoduleGans, NoduleSpec,
    Split, VoiGanTrainConfig, SPLIT_RATIOS, VOI_EDGE,
};
use volsynth_core::sgan::{
    dslice_forward, generate_volume, init_model, slice_with_position, to_net, ModelState,
    SganConfig,
};
use volsynth_core::voldata::{
    assemble, decompose, estimate_lung_mask, generate_cohort, generate_phantom,
    mean_adjacent_correlation, NoiseDomain, PhantomConfig, PlaneLabel, Provenance, Volume,
};
use volsynth_nn::params::{ParamSet, Vars};
use volsynth_nn::tensor::{grad, Tensor};

// ---- harness ----

fn criterion(n: usize, name: &str, budget: Duration, body: impl FnOnce() -> Result<(), String>) {
    let t0 = Instant::now();
    let mut outcome = body();
    let elapsed = t0.elapsed();
    if outcome.is_ok() && elapsed > budget {
        outcome = Err(format!("runtime {elapsed:.1?} exceeds the {budget:?} budget"));
    }
    match outcome {
        Ok(()) => println!("ACCEPTANCE {n}: PASS — {name} ({elapsed:.1?})"),
        Err(e) => {
            println!("ACCEPTANCE {n}: FAIL — {name}: {e}");
            panic!("criterion {n} ({name}): {e}");
        }
    }
}

/// 32-cube phantoms whose lung masks clear the placement margin.
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

fn batch_tensor(v: &[f64]) -> Tensor {
    Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).expect("shape"))
}

fn tiny_sgan_cfg() -> SganConfig {
    SganConfig {
        depth: 16,
        out_hw: 16,
        slab_t: 8,
        slices_per_step: 3,
        latent: LatentConfig { d_patient: 6, d_eps: 4, hidden: 8, d_slice: 6 },
        gen_base_hw: 4,
        gen_channels: vec![12, 8],
        dslice_channels: vec![8, 16],
        dslab_channels: vec![4, 8],
    }
}

// ---- shared trained models ----

struct TrainedSgan {
    state: ModelState,
    fid_untrained: f64,
    fid_trained: f64,
    corr_trained: f64,
}

static SGAN: OnceLock<TrainedSgan> = OnceLock::new();

/// Stock model trained once on a 200-phantom cohort; the depth-resolved
/// distance is measured against 50 held-out phantoms before and after.
fn trained_sgan() -> &'static TrainedSgan {
    SGAN.get_or_init(|| {
        let dims = (32, 32, 32);
        let cohort = generate_cohort(200, 0, dims);
        let (fx, _) =
            train_extractor(&cohort, &FeatExConfig::desk(), 240, 16, 0).expect("extractor");
        let held: Vec<Array3<f32>> =
            generate_cohort(50, 200, dims).into_iter().map(|p| p.volume.data).collect();
        let data: Vec<Array3<f32>> = cohort.iter().map(|p| p.volume.data.clone()).collect();

        let measure = |state: &ModelState| -> (f64, f64) {
            let fake: Vec<Array3<f32>> =
                (0..50).map(|i| generate_volume(state, 777 + i).data).collect();
            let (fid, _) = slicewise_fid(&fx, &held, &fake, 4, 25, 0).expect("fid");
            let corr =
                fake.iter().map(|v| mean_adjacent_correlation(v)).sum::<f64>() / fake.len() as f64;
            (fid, corr)
        };

        let mut state = init_model(&SganConfig::desk(), 0);
        let (fid_untrained, _) = measure(&state);
        let cfg = TrainConfig::desk();
        let (mut opt_d, mut opt_g) = cfg.optimizers();
        train_sgan(&mut state, &data, &cfg, &mut opt_d, &mut opt_g, |_| {}).expect("training");
        let (fid_trained, corr_trained) = measure(&state);
        TrainedSgan { state, fid_untrained, fid_trained, corr_trained }
    })
}

static NODULE: OnceLock<NoduleGans> = OnceLock::new();

/// Injector/eraser pair trained at stock desk settings on a 12-volume pool.
fn trained_nodule_gans() -> &'static NoduleGans {
    NODULE.get_or_init(|| {
        let vols: Vec<Array3<f32>> =
            usable_phantoms(12, 400).into_iter().map(|v| v.data).collect();
        let masks: Vec<Array3<bool>> = vols.iter().map(|v| estimate_lung_mask(v)).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let examples =
            make_voi_examples(&vols, &masks, &NoduleDists::desk(), 4, VOI_EDGE, &mut rng)
                .expect("examples");
        let mut gans = init_nodule_gans(VOI_EDGE, 8, 0).expect("init");
        train_nodule_gans(&mut gans, &examples, &VoiGanTrainConfig::desk(), |_, _| {})
            .expect("voi training");
        gans
    })
}

// ---- criteria ----

#[test]
fn c01_assembly_round_trip() {
    criterion(1, "assembly round-trip", Duration::from_secs(10), || {
        for &depth in &[8usize, 32] {
            for i in 0..20u64 {
                let p = generate_phantom(&PhantomConfig {
                    depth,
                    height: 32,
                    width: 32,
                    domain: if i % 2 == 0 { NoiseDomain::A } else { NoiseDomain::B },
                    seed: 1000 * depth as u64 + i,
                });
                let windows = decompose(&p.volume.data);
                if windows.len() != depth - 2 {
                    return Err(format!("depth {depth}: {} windows", windows.len()));
                }
                let rebuilt = assemble(&windows);
                if rebuilt
                    .iter()
                    .zip(p.volume.data.iter())
                    .any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    return Err(format!("depth {depth} phantom {i}: round trip not bit-exact"));
                }
            }
        }
        for (depth, windows) in [(8, 6), (32, 30), (224, 222)] {
            if slice_count(depth) != windows {
                return Err(format!("slice_count({depth}) = {}", slice_count(depth)));
            }
        }
        Ok(())
    });
}

#[test]
fn c02_objective_oracle() {
    criterion(2, "objective oracle equivalence", Duration::from_secs(5), || {
        // direct transcription of the two-discriminator value function:
        // E[ln D] on real scores, E[ln(1 - D)] on fake scores, summed
        // over the slab pair and every slice pair
        let mean_ln_d = |v: &[f64]| {
            v.iter().map(|s| (1.0 / (1.0 + (-s).exp())).ln()).sum::<f64>() / v.len() as f64
        };
        let mean_ln_1md = |v: &[f64]| {
            v.iter().map(|s| (1.0 - 1.0 / (1.0 + (-s).exp())).ln()).sum::<f64>() / v.len() as f64
        };

        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for case in 0..100 {
            let n = rng.gen_range(1..=5);
            let b = rng.gen_range(1..=4);
            let draw = |rng: &mut ChaCha12Rng| -> Vec<f64> {
                (0..b).map(|_| rng.gen_range(-6.0..6.0)).collect()
            };
            let slab_real = draw(&mut rng);
            let slab_fake = draw(&mut rng);
            let slice_real: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut rng)).collect();
            let slice_fake: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut rng)).collect();

            let mut value = mean_ln_d(&slab_real) + mean_ln_1md(&slab_fake);
            let mut gen_value = mean_ln_d(&slab_fake);
            for (r, f) in slice_real.iter().zip(&slice_fake) {
                value += mean_ln_d(r) + mean_ln_1md(f);
                gen_value += mean_ln_d(f);
            }

            let scores = BatchScores {
                slice_real: slice_real.iter().map(|v| batch_tensor(v)).collect(),
                slice_fake: slice_fake.iter().map(|v| batch_tensor(v)).collect(),
                slab_real: batch_tensor(&slab_real),
                slab_fake: batch_tensor(&slab_fake),
            };
            let d_loss = js_discriminator_loss(&scores).item();
            if (d_loss + value).abs() > 1e-6 {
                return Err(format!("case {case}: d loss {d_loss} vs direct value {value}"));
            }
            let g_loss = js_generator_loss(&scores).item();
            if (g_loss + gen_value).abs() > 1e-6 {
                return Err(format!("case {case}: g loss {g_loss} vs direct value {gen_value}"));
            }
        }

        // balanced scorer, D = 1/2 everywhere: with N slice pairs the
        // value is -(2N+2) ln 2, i.e. the loss is (2N+2) ln 2
        for (n, b) in [(1usize, 1usize), (3, 2), (5, 4)] {
            let zeros = vec![0.0; b];
            let scores = BatchScores {
                slice_real: (0..n).map(|_| batch_tensor(&zeros)).collect(),
                slice_fake: (0..n).map(|_| batch_tensor(&zeros)).collect(),
                slab_real: batch_tensor(&zeros),
                slab_fake: batch_tensor(&zeros),
            };
            let want = (2 * n + 2) as f64 * 2f64.ln();
            let got = js_discriminator_loss(&scores).item();
            if (got - want).abs() > 1e-9 {
                return Err(format!("balanced case n={n}: loss {got} vs (2n+2) ln 2 = {want}"));
            }
            let direct = mean_ln_d(&zeros)
                + mean_ln_1md(&zeros)
                + n as f64 * (mean_ln_d(&zeros) + mean_ln_1md(&zeros));
            if (direct + want).abs() > 1e-9 {
                return Err(format!("balanced case n={n}: direct value {direct} vs {}", -want));
            }
        }
        Ok(())
    });
}

#[test]
fn c03_gradient_penalty() {
    criterion(3, "gradient penalty", Duration::from_secs(30), || {
        // linear scorer x·w: the input gradient is w for every row, so
        // the penalty reduces to (gamma/2) ||w||^2 exactly
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for (b, feats, gamma) in [(2usize, 3usize, 10.0), (4, 6, 2.5), (1, 5, 7.0)] {
            let x = Tensor::leaf(ArrayD::from_shape_vec(
                IxDyn(&[b, feats]),
                (0..b * feats).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .expect("shape"));
            let w_vals: Vec<f64> = (0..feats).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let w = Tensor::constant(
                ArrayD::from_shape_vec(IxDyn(&[feats, 1]), w_vals.clone()).expect("shape"),
            );
            let scores = x.matmul(&w).reshape(&[b]);
            let got = r1_penalty(&scores, &x, gamma).item();
            let want = gamma / 2.0 * w_vals.iter().map(|v| v * v).sum::<f64>();
            if (got - want).abs() > 1e-6 {
                return Err(format!("linear case b={b} f={feats}: {got} vs {want}"));
            }
        }

        // finite differences on the slice discriminator: the penalized
        // objective's parameter gradient must match central differences
        let cfg = tiny_sgan_cfg();
        let state = init_model(&cfg, 5);
        let base: BTreeMap<String, ArrayD<f64>> = state
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("dslice."))
            .map(|(n, a)| (n.clone(), a.clone()))
            .collect();

        let windows_of = |seed: u64| {
            let p = generate_phantom(&PhantomConfig {
                depth: 16,
                height: 16,
                width: 16,
                domain: NoiseDomain::A,
                seed,
            });
            decompose(&p.volume.data)
        };
        let centers = vec![5usize, 9];
        let stack = |wins: &[Array3<f32>]| {
            let mut out = ArrayD::zeros(IxDyn(&[2, 3, cfg.out_hw, cfg.out_hw]));
            for (bi, &c) in centers.iter().enumerate() {
                for ((k, j, i), &v) in wins[c - 1].indexed_iter() {
                    out[[bi, k, j, i]] = to_net(v);
                }
            }
            out
        };
        let xr_arr = stack(&windows_of(60));
        let xf_arr = stack(&windows_of(61));

        let objective = |map: &BTreeMap<String, ArrayD<f64>>| -> (Tensor, Vars) {
            let params = ParamSet::from_inner(map.clone());
            let vars = params.bind(|n| n.starts_with("dslice."));
            // the binding is handed back so its leaves can serve as grad roots
            let xr = Tensor::leaf(xr_arr.clone());
            let dr = dslice_forward(&cfg, &vars, &slice_with_position(&xr, &centers, cfg.depth));
            let df = dslice_forward(
                &cfg,
                &vars,
                &slice_with_position(&Tensor::constant(xf_arr.clone()), &centers, cfg.depth),
            );
            let scores = BatchScores {
                slice_real: vec![dr.clone()],
                slice_fake: vec![df],
                slab_real: batch_tensor(&[0.0, 0.0]),
                slab_fake: batch_tensor(&[0.0, 0.0]),
            };
            let total = js_discriminator_loss(&scores).add(&r1_penalty(&dr, &xr, 10.0));
            (total, vars)
        };

        let (total, vars) = objective(&base);
        let trainable = vars.trainable();
        let refs: Vec<&Tensor> = trainable.iter().map(|(_, t)| t).collect();
        let grads = grad(&total, &refs);
        let by_name: BTreeMap<&String, ArrayD<f64>> = trainable
            .iter()
            .map(|(n, _)| n)
            .zip(grads.iter().map(|g| g.value().clone()))
            .collect();

        let h = 1e-4;
        for (name, arr) in &base {
            let len = arr.len();
            let mut coords = vec![0, len / 2, len - 1];
            coords.dedup();
            for k in coords {
                let mut plus = base.clone();
                plus.get_mut(name).expect("param").as_slice_mut().expect("layout")[k] += h;
                let mut minus = base.clone();
                minus.get_mut(name).expect("param").as_slice_mut().expect("layout")[k] -= h;
                let fd = (objective(&plus).0.item() - objective(&minus).0.item()) / (2.0 * h);
                let ad = by_name[name].as_slice().expect("layout")[k];
                let denom = ad.abs().max(fd.abs()).max(1e-3);
                if (ad - fd).abs() > 1e-4 * denom {
                    return Err(format!(
                        "{name}[{k}]: autodiff {ad:.8} vs finite difference {fd:.8}"
                    ));
                }
            }
        }
        Ok(())
    });
}

#[test]
fn c04_phase_isolation() {
    criterion(4, "phase isolation", Duration::from_secs(60), || {
        let cfg = tiny_sgan_cfg();
        let mut state = init_model(&cfg, 3);
        let data: Vec<Array3<f32>> = (0..4)
            .map(|i| {
                generate_phantom(&PhantomConfig {
                    depth: 16,
                    height: 16,
                    width: 16,
                    domain: if i % 2 == 0 { NoiseDomain::A } else { NoiseDomain::B },
                    seed: 80 + i,
                })
                .volume
                .data
            })
            .collect();
        let tc = TrainConfig { batch: 2, ..TrainConfig::desk() };
        let (mut opt_d, mut opt_g) = tc.optimizers();
        let mut rng = ChaCha12Rng::seed_from_u64(9);

        let snap = |state: &ModelState, prefixes: &[&str]| -> Vec<(String, Vec<u64>)> {
            state
                .params
                .iter()
                .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
                .map(|(n, a)| (n.clone(), a.iter().map(|v| v.to_bits()).collect()))
                .collect()
        };
        let gen_side = ["gen.", "rv."];
        let disc_side = ["dslice.", "dslab."];
        let d0 = snap(&state, &disc_side);
        let g0 = snap(&state, &gen_side);

        for step in 0..50 {
            let g_before = snap(&state, &gen_side);
            d_phase(&mut state, &data, &mut opt_d, tc.loss, tc.gamma, tc.batch, &mut rng)
                .map_err(|e| format!("step {step}: {e}"))?;
            if snap(&state, &gen_side) != g_before {
                return Err(format!("step {step}: discriminator phase moved the generator"));
            }
            let d_before = snap(&state, &disc_side);
            g_phase(&mut state, &mut opt_g, tc.loss, tc.batch, &mut rng)
                .map_err(|e| format!("step {step}: {e}"))?;
            if snap(&state, &disc_side) != d_before {
                return Err(format!("step {step}: generator phase moved the discriminators"));
            }
        }
        if snap(&state, &disc_side) == d0 || snap(&state, &gen_side) == g0 {
            return Err("a network never moved in its own phase".to_string());
        }
        Ok(())
    });
}

#[test]
fn c05_metric_identities() {
    criterion(5, "metric identities", Duration::from_secs(5), || {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((40, 6), |_| rng.gen_range(-1.0..1.0));
        let sx = gaussian_stats(x.view());
        let self_fid = frechet_distance(&sx, &sx);
        if self_fid.abs() > 1e-9 {
            return Err(format!("self distance {self_fid}"));
        }

        // shifting every row by delta moves the distance by ||delta||^2
        let delta = [0.3, -0.2, 0.15, 0.0, 0.6, -0.45];
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            for (v, d) in row.iter_mut().zip(delta.iter()) {
                *v += d;
            }
        }
        let want: f64 = delta.iter().map(|d| d * d).sum();
        let got = frechet_distance(&sx, &gaussian_stats(y.view()));
        if (got - want).abs() > 1e-5 {
            return Err(format!("mean shift distance {got} vs ||delta||^2 = {want}"));
        }

        // identical rows carry no class information: score 1
        let p = [0.25, 0.5, 0.125, 0.125];
        let same = Array2::from_shape_fn((8, 4), |(_, j)| p[j]);
        let is_same = inception_score_from_probs(same.view()).map_err(|e| e.to_string())?;
        if (is_same - 1.0).abs() > 1e-9 {
            return Err(format!("identical-row score {is_same}"));
        }

        // one-hot rows uniformly covering C classes: score C
        let one_hot = Array2::from_shape_fn((8, 4), |(i, j)| if i % 4 == j { 1.0 } else { 0.0 });
        let is_hot = inception_score_from_probs(one_hot.view()).map_err(|e| e.to_string())?;
        if (is_hot - 4.0).abs() > 1e-9 {
            return Err(format!("one-hot score {is_hot} vs class count 4"));
        }
        Ok(())
    });
}

#[test]
fn c06_training_efficacy() {
    criterion(6, "toy training efficacy", Duration::from_secs(3 * 3600), || {
        let sgan = trained_sgan();
        let improvement = (sgan.fid_untrained - sgan.fid_trained) / sgan.fid_untrained;
        println!(
            "  slicewise fid untrained {:.3}, trained {:.3} ({:.1}% better); adjacent-plane corr {:.3}",
            sgan.fid_untrained,
            sgan.fid_trained,
            improvement * 100.0,
            sgan.corr_trained,
        );
        if !improvement.is_finite() || improvement < 0.30 {
            return Err(format!(
                "fid improved {:.1}% (untrained {:.3}, trained {:.3}); need >= 30%",
                improvement * 100.0,
                sgan.fid_untrained,
                sgan.fid_trained,
            ));
        }
        if sgan.corr_trained <= 0.8 {
            return Err(format!("adjacent-plane correlation {:.3} <= 0.8", sgan.corr_trained));
        }
        Ok(())
    });
}

#[test]
fn c07_nodule_locality_and_roundtrip() {
    criterion(7, "nodule locality and roundtrip", Duration::from_secs(20 * 60), || {
        let gans = trained_nodule_gans();
        let eval_vols = usable_phantoms(10, 700);
        let half = VOI_EDGE / 2;

        // trained nets edit nothing outside the voi footprint
        for (i, v) in eval_vols.iter().take(3).enumerate() {
            let mask = estimate_lung_mask(&v.data);
            let center = voi_candidates(&mask, VOI_EDGE)[0];
            let spec = NoduleSpec { center, radius_vox: 3.5, intensity: 0.65 };
            let injected =
                inject_nodule(gans, v, &spec, &mask, 70 + i as u64).map_err(|e| e.to_string())?;
            let erased =
                erase_nodule(gans, &injected, &spec, 170 + i as u64).map_err(|e| e.to_string())?;
            for (before, after, what) in
                [(v, &injected, "injector"), (&injected, &erased, "eraser")]
            {
                let mut inside_changed = false;
                for ((z, y, x), &val) in before.data.indexed_iter() {
                    let inside = [z, y, x]
                        .iter()
                        .zip(center.iter())
                        .all(|(c, m)| *c >= m - half && *c < m + half);
                    if inside {
                        inside_changed |= after.data[[z, y, x]].to_bits() != val.to_bits();
                    } else if after.data[[z, y, x]].to_bits() != val.to_bits() {
                        return Err(format!("volume {i}: {what} changed a voxel outside the voi"));
                    }
                }
                if !inside_changed {
                    return Err(format!("volume {i}: {what} left the voi untouched"));
                }
            }
        }

        // erase(inject(v)) stays close to v inside the window
        let mut maes = Vec::new();
        for (i, v) in eval_vols.iter().enumerate() {
            let mask = estimate_lung_mask(&v.data);
            let cands = voi_candidates(&mask, VOI_EDGE);
            let cube = extract_voi(&v.data, cands[i % 7], VOI_EDGE)
                .map_err(|e| e.to_string())?
                .cube;
            let injected = apply_injector(gans, &cube, &sphere_mask(VOI_EDGE, 3.5), 900 + i as u64);
            let erased = apply_eraser(gans, &injected, 1900 + i as u64);
            let mae = erased
                .iter()
                .zip(cube.iter())
                .map(|(a, b)| (*a as f64 - *b as f64).abs())
                .sum::<f64>()
                / cube.len() as f64;
            if mae >= 0.05 {
                return Err(format!("volume {i}: roundtrip voi mae {mae:.4} >= 0.05"));
            }
            maes.push(mae);
        }
        let mean = maes.iter().sum::<f64>() / maes.len() as f64;
        let max = maes.iter().cloned().fold(0.0, f64::max);
        println!("  roundtrip voi mae mean {mean:.4}, max {max:.4} over {} volumes", maes.len());
        Ok(())
    });
}

#[test]
fn c08_dataset_mix_fairness() {
    criterion(8, "dataset mix fairness", Duration::from_secs(60), || {
        let gans = init_nodule_gans(VOI_EDGE, 8, 0).map_err(|e| e.to_string())?;
        let dists = NoduleDists::desk();
        let mut rng = ChaCha12Rng::seed_from_u64(17);

        // domain A arrives with one native nodule per volume
        let mut domain_a: Vec<(Volume, Vec<NoduleSpec>)> = Vec::new();
        let mut seed = 40_000u64;
        while domain_a.len() < 80 {
            let p = generate_phantom(&PhantomConfig {
                depth: 32,
                height: 32,
                width: 32,
                domain: NoiseDomain::A,
                seed,
            });
            seed += 1;
            let cands = voi_candidates(&estimate_lung_mask(&p.volume.data), VOI_EDGE);
            if cands.len() < 8 {
                continue;
            }
            let center = cands[rng.gen_range(0..cands.len())];
            let spec = NoduleSpec {
                center,
                radius_vox: rng.gen_range(2.5..5.0),
                intensity: rng.gen_range(0.55..0.75),
            };
            let mut v = p.volume;
            composite_into(
                &mut v.data,
                [center[0] as f64, center[1] as f64, center[2] as f64],
                spec.radius_vox,
                spec.intensity,
            );
            domain_a.push((v, vec![spec]));
        }

        let mut domain_b = Vec::new();
        let mut seed = 50_001u64;
        while domain_b.len() < 80 {
            let p = generate_phantom(&PhantomConfig {
                depth: 32,
                height: 32,
                width: 32,
                domain: NoiseDomain::B,
                seed,
            });
            seed += 2;
            if voi_candidates(&estimate_lung_mask(&p.volume.data), VOI_EDGE).len() >= 8 {
                domain_b.push(p.volume);
            }
        }

        let mixed = build_unbiased_dataset(&gans, &domain_a, &domain_b, &dists, SPLIT_RATIOS, 23)
            .map_err(|e| e.to_string())?;
        if mixed.len() != 160 {
            return Err(format!("{} mixed volumes from a 160-volume corpus", mixed.len()));
        }

        let count =
            |split: Split| mixed.iter().filter(|m| m.split == split).count();
        let splits = [count(Split::Train), count(Split::Val), count(Split::Test)];
        if splits != [120, 20, 20] {
            return Err(format!("split sizes {splits:?} vs [120, 20, 20]"));
        }

        for tag in ["a", "b"] {
            let nodules = mixed
                .iter()
                .filter(|m| m.domain == tag && m.label == Label::Nodule)
                .count() as i64;
            let cleans = mixed
                .iter()
                .filter(|m| m.domain == tag && m.label == Label::Clean)
                .count() as i64;
            if (nodules - cleans).abs() > 1 {
                return Err(format!("domain {tag}: {nodules} nodule vs {cleans} clean labels"));
            }
        }

        let pairs: Vec<(Label, &str)> =
            mixed.iter().map(|m| (m.label, m.domain.as_str())).collect();
        let mi = label_domain_mi_bits(&pairs);
        println!("  label/domain mutual information {mi:.6} bits");
        if mi >= 0.01 {
            return Err(format!("label/domain mutual information {mi:.6} bits >= 0.01"));
        }
        Ok(())
    });
}

#[test]
fn c09_regime_ordering() {
    criterion(9, "regime ordering", Duration::from_secs(45 * 60), || {
        let sgan = trained_sgan();
        let gans = trained_nodule_gans();

        // synthetic pool: trained-generator output that clears placement qc
        let mut synthetic = Vec::new();
        for i in 0..80 {
            let v = generate_volume(&sgan.state, 20_000 + i);
            if voi_candidates(&estimate_lung_mask(&v.data), VOI_EDGE).len() >= 8 {
                synthetic.push(v);
            }
            if synthetic.len() == 24 {
                break;
            }
        }
        if synthetic.len() < 16 {
            return Err(format!(
                "only {} of 80 generated volumes pass placement qc; the generator is not \
                 usable as a synthetic pool",
                synthetic.len()
            ));
        }
        let real = usable_phantoms(32, 30_000);

        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        // nodules sit brighter than every anatomic structure so that size is
        // the difficulty axis the sweep varies
        let inputs = SweepInputs {
            real_clean: &real,
            synthetic_clean: &synthetic,
            gans,
            count_probs: vec![0.0, 1.0],
            intensity_range: [0.7, 0.9],
            ratios: SPLIT_RATIOS,
            dir: tmp.path().join("sweep"),
            seed: 0,
        };
        let cfg = RegimeConfig {
            classifier: ClassifierConfig {
                stem: 8,
                fires: vec![
                    FireSpec { squeeze: 6, expand: 10 },
                    FireSpec { squeeze: 8, expand: 12 },
                ],
                pools: vec![true, true],
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                batch: 4,
                max_steps: 240,
                seed: 0,
            },
            seeds: vec![0, 1, 2],
        };
        let report =
            sweep_nodule_sizes(&DEFAULT_SWEEP_SIZES, &inputs, &cfg).map_err(|e| e.to_string())?;
        println!("{}", report.table());

        let mut wins = 0;
        let mut lines = Vec::new();
        for j in 0..cfg.seeds.len() {
            let mean_of = |regime: Regime| {
                report.reports.iter().map(|r| r.result(regime).accuracies[j]).sum::<f64>()
                    / report.reports.len() as f64
            };
            let pretrained = mean_of(Regime::PretrainFinetune);
            let real_only = mean_of(Regime::RealOnly);
            lines.push(format!(
                "seed {}: pretrain+finetune {pretrained:.3} vs real-only {real_only:.3}",
                cfg.seeds[j]
            ));
            if pretrained >= real_only {
                wins += 1;
            }
        }
        for line in &lines {
            println!("  {line}");
        }
        if wins < 2 {
            return Err(format!(
                "pretraining wins {wins}/3 seeds ({})",
                lines.join("; ")
            ));
        }
        Ok(())
    });
}

// ---- criterion 10: stage determinism through the binary ----

fn volsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volsynth")).args(args).output().expect("spawn volsynth")
}

fn run_ok(args: &[&str]) -> Result<(), String> {
    let out = volsynth(args);
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`volsynth {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("read_dir") {
            let p = entry.expect("entry").path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).expect("child").to_path_buf(),
                    std::fs::read(&p).expect("read"),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn same_bytes(
    tag: &str,
    before: &BTreeMap<PathBuf, Vec<u8>>,
    after: &BTreeMap<PathBuf, Vec<u8>>,
) -> Result<(), String> {
    if before.keys().ne(after.keys()) {
        return Err(format!("{tag}: file sets differ between runs"));
    }
    for (path, bytes) in before {
        if &after[path] != bytes {
            return Err(format!("{tag}: {} differs between runs", path.display()));
        }
    }
    Ok(())
}

/// Miniature end-to-end manifest: 16-plane phantoms and a tiny model.
fn tiny16(out_dir: &Path) -> ExperimentManifest {
    ExperimentManifest {
        format_version: MANIFEST_VERSION,
        seed: 0,
        output_dir: out_dir.to_path_buf(),
        phantom: Some(PhantomStage { count: 6, dims: [16, 16, 16] }),
        sgan_train: Some(SganTrainStage {
            model: tiny_sgan_cfg(),
            train: TrainConfig { steps: 6, batch: 2, ..TrainConfig::desk() },
            log_every: 2,
        }),
        generate: Some(GenerateStage { count: 3 }),
        metrics: Some(MetricsStage {
            extractor: FeatExConfig { hw: 16, channels: vec![6, 12], classes: PlaneLabel::COUNT },
            extractor_steps: 40,
            extractor_batch: 8,
            eval_count: 4,
            pairings: 2,
            subset: 2,
        }),
        nodulesim: None,
        detect: None,
    }
}

/// 32-plane manifest with the voi pair at its stock edge.
fn tiny32(out_dir: &Path, phantoms: usize, detect: Option<DetectStage>) -> ExperimentManifest {
    ExperimentManifest {
        format_version: MANIFEST_VERSION,
        seed: 0,
        output_dir: out_dir.to_path_buf(),
        phantom: Some(PhantomStage { count: phantoms, dims: [32, 32, 32] }),
        sgan_train: None,
        generate: None,
        metrics: None,
        nodulesim: Some(NodulesimStage {
            edge: VOI_EDGE,
            base: 8,
            dists: NoduleDists {
                count_probs: vec![0.0, 1.0],
                radius_ln_mean: 3.0f64.ln(),
                radius_ln_std: 0.2,
                radius_clip: [2.0, 4.0],
                intensity_range: [0.55, 0.75],
            },
            train: VoiGanTrainConfig { steps: 6, batch: 2, ..VoiGanTrainConfig::desk() },
            examples_per_volume: 2,
            example_volumes: 2,
        }),
        detect,
    }
}

#[test]
fn c10_stage_determinism() {
    criterion(10, "stage determinism", Duration::from_secs(15 * 60), || {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;

        // each pipeline stage, deleted and re-run from the same manifest
        let m = tiny16(&tmp.path().join("chain"));
        let path = tmp.path().join("chain.json");
        m.save(&path).map_err(|e| e.to_string())?;
        let path = path.to_str().expect("utf8 path");
        for cmd in ["phantom", "train-sgan", "generate", "metrics"] {
            run_ok(&[cmd, path])?;
        }
        let stages = [
            ("phantom", m.phantoms_dir()),
            ("train-sgan", m.sgan_dir()),
            ("generate", m.generated_dir()),
            ("metrics", m.metrics_dir()),
        ];
        for (cmd, dir) in &stages {
            let before = dir_bytes(dir);
            std::fs::remove_dir_all(dir).map_err(|e| e.to_string())?;
            run_ok(&[cmd, path])?;
            same_bytes(cmd, &before, &dir_bytes(dir))?;
        }

        // the voi pair trains on first use: delete its artifacts and the
        // edited volume, re-run, and demand identical bytes
        let m2 = tiny32(&tmp.path().join("voi"), 4, None);
        let path2 = tmp.path().join("voi.json");
        m2.save(&path2).map_err(|e| e.to_string())?;
        let path2 = path2.to_str().expect("utf8 path");
        run_ok(&["phantom", path2])?;
        let base = m2.phantoms_dir().join("phantom-a-000000");
        let v = Volume::load(&base).map_err(|e| e.to_string())?;
        let center = voi_candidates(&estimate_lung_mask(&v.data), VOI_EDGE)[0];
        let center_arg = format!("{},{},{}", center[0], center[1], center[2]);
        let edited_dir = tmp.path().join("edited");
        let edited_base = edited_dir.join("x");
        let inject_args = [
            "inject",
            path2,
            "--volume",
            base.to_str().expect("utf8 path"),
            "--out",
            edited_base.to_str().expect("utf8 path"),
            "--center",
            &center_arg,
            "--radius",
            "3",
        ];
        run_ok(&inject_args)?;
        let voi_before = dir_bytes(&m2.nodulesim_dir());
        let edit_before = dir_bytes(&edited_dir);
        std::fs::remove_dir_all(m2.nodulesim_dir()).map_err(|e| e.to_string())?;
        std::fs::remove_dir_all(&edited_dir).map_err(|e| e.to_string())?;
        run_ok(&inject_args)?;
        same_bytes("nodulesim", &voi_before, &dir_bytes(&m2.nodulesim_dir()))?;
        same_bytes("inject", &edit_before, &dir_bytes(&edited_dir))?;

        // detection sweep re-run against prepared pools
        let detect = DetectStage {
            regime: RegimeConfig {
                classifier: ClassifierConfig {
                    stem: 6,
                    fires: vec![
                        FireSpec { squeeze: 4, expand: 6 },
                        FireSpec { squeeze: 4, expand: 8 },
                    ],
                    pools: vec![true, false],
                    lr: 1e-3,
                    beta1: 0.9,
                    beta2: 0.999,
                    batch: 2,
                    max_steps: 12,
                    seed: 0,
                },
                seeds: vec![0],
            },
            sizes: vec![3.0],
            real_count: 8,
            synthetic_count: 8,
            ratios: [0.5, 0.25, 0.25],
            count_probs: vec![0.0, 1.0],
            intensity_range: [0.55, 0.75],
        };
        let m3 = tiny32(&tmp.path().join("detect"), 6, Some(detect));
        let path3 = tmp.path().join("detect.json");
        m3.save(&path3).map_err(|e| e.to_string())?;
        let path3 = path3.to_str().expect("utf8 path");
        run_ok(&["phantom", path3])?;
        let gen_dir = m3.generated_dir();
        std::fs::create_dir_all(&gen_dir).map_err(|e| e.to_string())?;
        let mut kept = 0usize;
        let mut seed = 5000u64;
        while kept < 8 {
            let p = generate_phantom(&PhantomConfig {
                depth: 32,
                height: 32,
                width: 32,
                domain: if seed % 2 == 0 { NoiseDomain::A } else { NoiseDomain::B },
                seed,
            });
            seed += 1;
            if voi_candidates(&estimate_lung_mask(&p.volume.data), VOI_EDGE).len() < 50 {
                continue;
            }
            let mut v = p.volume;
            v.provenance = Provenance::Synthetic;
            v.id = format!("synth-{kept:06}");
            v.save(&gen_dir.join(&v.id)).map_err(|e| e.to_string())?;
            kept += 1;
        }
        run_ok(&["detect", path3])?;
        let sweep_before = dir_bytes(&m3.detect_dir());
        std::fs::remove_dir_all(m3.detect_dir()).map_err(|e| e.to_string())?;
        run_ok(&["detect", path3])?;
        same_bytes("detect", &sweep_before, &dir_bytes(&m3.detect_dir()))?;

        // the whole experiment, wiped and replayed
        let m4 = tiny16(&tmp.path().join("replay"));
        let path4 = tmp.path().join("replay.json");
        m4.save(&path4).map_err(|e| e.to_string())?;
        let path4 = path4.to_str().expect("utf8 path");
        run_ok(&["experiment", path4])?;
        let all_before = dir_bytes(&m4.output_dir);
        std::fs::remove_dir_all(&m4.output_dir).map_err(|e| e.to_string())?;
        run_ok(&["experiment", path4])?;
        same_bytes("experiment", &all_before, &dir_bytes(&m4.output_dir))?;
        Ok(())
    });
}
