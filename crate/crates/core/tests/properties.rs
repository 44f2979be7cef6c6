use std::f64::consts::{PI, TAU};

use holo_core::calibration::{fit_model, generate_dataset, DatasetSpec, FitConfig, ParamGroups};
use holo_core::citl::{Perturbation, PhysicalDisplay};
use holo_core::engine::{Engine, ScaleChoice};
use holo_core::field::{fft2_centered, ifft2_centered, intensity_average};
use holo_core::optimizer::{export_phases, optimize, optimize_from, Method, OptimConfig, OptimState, Problem, Stepper};
use holo_core::propagation::{asm_propagate, build_transfer, model_forward};
use holo_core::quantization::{angular_delta, gumbel_softmax_relax, quantize};
use holo_core::supervision::{depth_to_masks, stft, Objective, RegConfig, StftSpec, Window};
use holo_core::{CalibratedModel, ComplexField, GridSpec, NoiseKey, QuantScheme, SlmPhase, SurrogateKind, SurrogateSpec};
use ndarray::Array2;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PITCH: f64 = 10.8e-6;
const GREEN: f64 = 520e-9;

fn grid(m: usize, n: usize) -> GridSpec {
    GridSpec::new(m, n, PITCH, GREEN).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_field(g: GridSpec, r: &mut ChaCha8Rng) -> ComplexField {
    let v = Array2::from_shape_fn(g.shape(), |_| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)));
    ComplexField::new(g, v).unwrap()
}

fn random_phases(shape: (usize, usize), frames: usize, r: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
    (0..frames).map(|_| Array2::from_shape_fn(shape, |_| r.random_range(-PI..PI))).collect()
}

fn frob(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

fn diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
}

fn brute_nearest(phi: f64, levels: &[f64]) -> usize {
    let mut best = 0;
    for (l, &v) in levels.iter().enumerate() {
        if angular_delta(phi, v).abs() < angular_delta(phi, levels[best]).abs() {
            best = l;
        }
    }
    best
}

fn uneven_levels(l: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..l).map(|_| r.random_range(0.0..TAU)).collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fft_round_trips(m in 2usize..=256, n in 2usize..=256, seed in any::<u64>()) {
        let u = random_field(grid(m, n), &mut rng(seed));
        let a = ifft2_centered(&fft2_centered(&u).unwrap()).unwrap();
        let b = fft2_centered(&ifft2_centered(&u).unwrap()).unwrap();
        let norm = frob(u.values());
        prop_assert!(diff(a.values(), u.values()) <= 1e-10 * norm);
        prop_assert!(diff(b.values(), u.values()) <= 1e-10 * norm);
    }

    #[test]
    fn intensity_average_ignores_frame_order(frames in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = grid(6, 7);
        let mut stack: Vec<ComplexField> = (0..frames).map(|_| random_field(g, &mut r)).collect();
        let a = intensity_average(&stack).unwrap();
        stack.reverse();
        stack.rotate_left(frames / 2);
        prop_assert_eq!(a, intensity_average(&stack).unwrap());
    }

    #[test]
    fn intensity_average_scales_with_modulus(re in -3.0f64..3.0, im in -3.0f64..3.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = grid(5, 5);
        let c = Complex64::new(re, im);
        let stack: Vec<ComplexField> = (0..3).map(|_| random_field(g, &mut r)).collect();
        let scaled: Vec<ComplexField> = stack.iter().map(|f| f.scale(c)).collect();
        let a = intensity_average(&stack).unwrap();
        let b = intensity_average(&scaled).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((c.norm() * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn back_propagation_kernel_is_conjugate(z in -0.2f64..0.2, m in 2usize..24, n in 2usize..24) {
        let g = GridSpec::new(m, n, 0.6e-6, GREEN).unwrap();
        let fwd = build_transfer(&g, z, None).unwrap();
        let back = build_transfer(&g, -z, None).unwrap();
        for (a, b) in fwd.values().iter().zip(back.values()) {
            if a.norm() > 0.0 {
                prop_assert_eq!(*b, a.conj());
            } else {
                prop_assert_eq!(b.norm(), 0.0);
            }
        }
    }

    #[test]
    fn propagation_is_linear(z in -0.1f64..0.1, ar in -2.0f64..2.0, ai in -2.0f64..2.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = grid(16, 12);
        let (u, v) = (random_field(g, &mut r), random_field(g, &mut r));
        let (a, b) = (Complex64::new(ar, ai), Complex64::new(0.5, -1.5));
        let tf = build_transfer(&g, z, None).unwrap();
        let mix = ComplexField::new(g, u.values().mapv(|x| a * x) + v.values().mapv(|x| b * x)).unwrap();
        let lhs = asm_propagate(&mix, &tf).unwrap();
        let pu = asm_propagate(&u, &tf).unwrap();
        let pv = asm_propagate(&v, &tf).unwrap();
        let rhs = pu.values().mapv(|x| a * x) + pv.values().mapv(|x| b * x);
        prop_assert!(diff(lhs.values(), &rhs) < 1e-10 * (1.0 + frob(&rhs)));
    }

    #[test]
    fn one_pixel_shift_commutes(dy in -1isize..=1, dx in -1isize..=1, z in 1e-4f64..2e-3) {
        let g = grid(48, 48);
        let gauss = |i: usize, j: usize, oy: f64, ox: f64| {
            let (y, x) = (i as f64 - 24.0 - oy, j as f64 - 24.0 - ox);
            Complex64::new((-(y * y + x * x) / 8.0).exp(), 0.0)
        };
        let u = ComplexField::new(g, Array2::from_shape_fn((48, 48), |(i, j)| gauss(i, j, 0.0, 0.0))).unwrap();
        let us = ComplexField::new(g, Array2::from_shape_fn((48, 48), |(i, j)| gauss(i, j, dy as f64, dx as f64))).unwrap();
        let tf = build_transfer(&g, z, None).unwrap();
        let p = asm_propagate(&u, &tf).unwrap();
        let ps = asm_propagate(&us, &tf).unwrap();
        let total: f64 = p.values().iter().map(|v| v.norm_sqr()).sum();
        let border: f64 = p.values().indexed_iter()
            .filter(|((i, j), _)| *i < 2 || *j < 2 || *i > 45 || *j > 45)
            .map(|(_, v)| v.norm_sqr())
            .sum();
        prop_assert!(border < 1e-6 * total);
        let mut err = 0.0;
        for ((i, j), v) in p.values().indexed_iter() {
            let (si, sj) = ((i as isize + dy).rem_euclid(48) as usize, (j as isize + dx).rem_euclid(48) as usize);
            err += (ps.values()[(si, sj)] - v).norm_sqr();
        }
        prop_assert!(err.sqrt() < 1e-10 * total.sqrt());
    }

    #[test]
    fn neutral_model_is_plain_asm(z in -0.1f64..0.1, seed in any::<u64>()) {
        let g = grid(12, 10);
        let phase = random_phases((12, 10), 1, &mut rng(seed)).remove(0);
        let model = CalibratedModel::nominal(g, vec![z], 16).unwrap();
        let a = model_forward(SlmPhase::Radians(&phase), &model, z).unwrap();
        let u = ComplexField::from_phase(g, &phase).unwrap();
        let b = asm_propagate(&u, &build_transfer(&g, z, None).unwrap()).unwrap();
        prop_assert_eq!(a.values(), b.values());
    }

    #[test]
    fn quantize_is_idempotent_and_on_levels(bits in 1u32..=8, seed in any::<u64>()) {
        let scheme = QuantScheme::uniform(bits).unwrap();
        let phi = Array2::from_shape_fn((9, 9), {
            let mut r = rng(seed);
            move |_| r.random_range(-20.0..20.0)
        });
        let q = quantize(&phi, &scheme);
        prop_assert_eq!(&quantize(&q, &scheme), &q);
        prop_assert!(q.iter().all(|v| scheme.levels().contains(v)));
    }

    #[test]
    fn uniform_quantization_error_is_bounded(bits in 1u32..=8) {
        let scheme = QuantScheme::uniform(bits).unwrap();
        let l = scheme.len() as f64;
        let phi = Array2::from_shape_fn((1, 20_000), |(_, j)| TAU * j as f64 / 20_000.0);
        let q = quantize(&phi, &scheme);
        let worst = phi.iter().zip(q.iter()).map(|(p, v)| angular_delta(*p, *v).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= PI / l + 1e-12);
    }

    #[test]
    fn uneven_quantizer_matches_enumeration(l in 2usize..40, seed in any::<u64>()) {
        let mut r = rng(seed);
        let levels = uneven_levels(l, &mut r);
        prop_assume!(levels.len() >= 2);
        let scheme = QuantScheme::from_levels(levels.clone(), true).unwrap();
        let phi = Array2::from_shape_fn((1, 500), |_| r.random_range(-10.0..10.0));
        let q = quantize(&phi, &scheme);
        for (p, v) in phi.iter().zip(q.iter()) {
            prop_assert_eq!(*v, levels[brute_nearest(*p, &levels)]);
        }
    }

    #[test]
    fn gumbel_weights_are_a_distribution(bits in 1u32..=6, tau in 0.05f64..4.0, seed in any::<u64>(), it in 0u64..1000) {
        let scheme = QuantScheme::uniform(bits).unwrap();
        let phi = random_phases((6, 6), 1, &mut rng(seed)).remove(0);
        let spec = SurrogateSpec {
            kind: SurrogateKind::GumbelSoftmax,
            slope: 0.65 / scheme.mean_gap(),
            temperature: tau,
            score_scale: 1.0,
            noise_enabled: true,
            rng_seed: seed,
        };
        let key = NoiseKey { iteration: it, frame: 0 };
        let (q, w) = gumbel_softmax_relax(&phi, &scheme, &spec, key).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let row = w.slice(ndarray::s![i, j, ..]);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
        let (q2, w2) = gumbel_softmax_relax(&phi, &scheme, &spec, key).unwrap();
        prop_assert_eq!(q, q2);
        prop_assert_eq!(w, w2);
    }

    #[test]
    fn unit_jacobian_step_is_the_projected_forward_update(bits in 1u32..=6, frames in 1usize..=2, lr in 1e-3f64..0.1, seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = grid(8, 8);
        let target = Array2::from_shape_fn((8, 8), |_| r.random_range(0.0..1.0));
        let obj = Objective::amp2d(g, &target, 0.05).unwrap();
        let model = CalibratedModel::nominal(g, vec![0.05], 16).unwrap();
        let scheme = QuantScheme::uniform(bits).unwrap();
        let cfg = OptimConfig { method: Method::UnitJacobian, frames, lr, stepper: Stepper::Gd, seed, ..Default::default() };
        let problem = Problem::new(&obj, &model, &scheme, &cfg).unwrap();
        let mut state = problem.init().unwrap();
        let phis = state.phases.clone();
        problem.step_surrogate(&mut state).unwrap();
        // the derived update: gradient of the loss at the projected phases, applied to phi
        let q: Vec<Array2<f64>> = phis.iter().map(|p| quantize(p, &scheme)).collect();
        let ev = Engine::new(&obj, &model).unwrap().evaluate(&q, ScaleChoice::ClosedForm, true).unwrap();
        for ((p, g), got) in phis.iter().zip(ev.grad.unwrap()).zip(&state.phases) {
            let want = p - &(g * lr);
            prop_assert_eq!(&want, got);
        }
    }

    #[test]
    fn masks_partition_every_pixel(planes in 1usize..7, seed in any::<u64>()) {
        let mut r = rng(seed);
        let depth = Array2::from_shape_fn((10, 9), |_| r.random_range(-1.0..4.0));
        let d: Vec<f64> = (0..planes).map(|_| r.random_range(0.0..3.0)).collect();
        let set = depth_to_masks(&depth, &d).unwrap();
        let sum = set.masks.iter().fold(Array2::<f64>::zeros((10, 9)), |acc, m| acc + m);
        prop_assert!(sum.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rectangular_stft_preserves_energy(w in 1usize..6, m in 5usize..20, n in 5usize..20, seed in any::<u64>()) {
        let g = grid(m, n);
        let u = random_field(g, &mut rng(seed));
        let spec = StftSpec { window_size: w, hop: w, window: Window::Rectangular };
        let c = stft(&u, &spec).unwrap();
        let e: f64 = c.iter().map(|v| v.norm_sqr()).sum();
        prop_assert!((e - u.energy()).abs() < 1e-9 * u.energy().max(1.0));
    }

    #[test]
    fn losses_are_nonnegative_and_frame_symmetric(kind in 0usize..5, frames in 1usize..4, s in 0.1f64..3.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = grid(8, 8);
        let obj = objective(kind, g, &mut r);
        let model = CalibratedModel::nominal(g, obj.distances(), 16).unwrap();
        let e = Engine::new(&obj, &model).unwrap();
        let mut phis = random_phases((8, 8), frames, &mut r);
        let a = e.evaluate(&phis, ScaleChoice::Fixed(s), false).unwrap();
        prop_assert!(a.loss >= 0.0);
        phis.reverse();
        let b = e.evaluate(&phis, ScaleChoice::Fixed(s), false).unwrap();
        prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }

    #[test]
    fn exported_phases_are_on_levels(m in 0usize..Method::ALL.len(), bits in 1u32..=5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = grid(8, 8);
        let target = Array2::from_shape_fn((8, 8), |_| r.random_range(0.0..1.0));
        let obj = Objective::amp2d(g, &target, 0.05).unwrap();
        let model = CalibratedModel::nominal(g, vec![0.05], 16).unwrap();
        let scheme = QuantScheme::uniform(bits).unwrap();
        let cfg = OptimConfig { method: Method::ALL[m], iterations: 4, frames: 2, seed, ..Default::default() };
        let run = optimize(&obj, &model, &scheme, &cfg).unwrap();
        for p in &run.exported.radians {
            prop_assert!(p.iter().all(|v| scheme.levels().contains(v)));
        }
    }

    #[test]
    fn permuting_initial_frames_permutes_results(m in 0usize..4, seed in any::<u64>()) {
        let method = [Method::Naive, Method::UnitJacobian, Method::Sigmoid, Method::GumbelSoftmax][m];
        let mut r = rng(seed);
        let g = grid(8, 8);
        let target = Array2::from_shape_fn((8, 8), |_| r.random_range(0.0..1.0));
        let obj = Objective::amp2d(g, &target, 0.05).unwrap();
        let model = CalibratedModel::nominal(g, vec![0.05], 16).unwrap();
        let scheme = QuantScheme::uniform(3).unwrap();
        // Gumbel noise is drawn per frame slot, so symmetry needs it off
        let cfg = OptimConfig { method, iterations: 6, frames: 3, gumbel_noise: false, seed, ..Default::default() };
        let problem = Problem::new(&obj, &model, &scheme, &cfg).unwrap();
        let phis = random_phases((8, 8), 3, &mut r);
        let a = optimize_from(&problem, OptimState::new(phis.clone(), 1.0)).unwrap();
        let perm = vec![phis[2].clone(), phis[0].clone(), phis[1].clone()];
        let b = optimize_from(&problem, OptimState::new(perm, 1.0)).unwrap();
        prop_assert_eq!(&a.loss_history, &b.loss_history);
        prop_assert_eq!(&a.phases[2], &b.phases[0]);
        prop_assert_eq!(&a.phases[0], &b.phases[1]);
        prop_assert_eq!(&a.phases[1], &b.phases[2]);
    }

    #[test]
    fn runs_do_not_depend_on_thread_count(m in 0usize..Method::ALL.len(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = grid(8, 8);
        let target = Array2::from_shape_fn((8, 8), |_| r.random_range(0.0..1.0));
        let obj = Objective::amp2d(g, &target, 0.05).unwrap();
        let model = CalibratedModel::nominal(g, vec![0.05], 16).unwrap();
        let scheme = QuantScheme::uniform(4).unwrap();
        let cfg = OptimConfig { method: Method::ALL[m], iterations: 5, frames: 3, seed, ..Default::default() };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
                .install(|| optimize(&obj, &model, &scheme, &cfg).unwrap())
        };
        let (a, b) = (run(1), run(3));
        let bits = |h: &[f64]| h.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.loss_history), bits(&b.loss_history));
        prop_assert_eq!(a.exported, b.exported);
    }

    #[test]
    fn captures_are_nonnegative(noise in 0.0f64..0.2, seed in any::<u64>()) {
        let g = grid(12, 12);
        let scheme = QuantScheme::uniform(3).unwrap();
        let nominal = CalibratedModel::nominal(g, vec![0.03], 8).unwrap();
        let truth = Perturbation { seed, ..Default::default() }.apply(&nominal).unwrap();
        let display = PhysicalDisplay::new(truth, scheme.clone(), noise, seed).unwrap();
        let phis = random_phases((12, 12), 2, &mut rng(seed));
        let exported = export_phases(&phis, &scheme).unwrap();
        let cap = display.capture(&exported.radians, 0.03, seed).unwrap();
        prop_assert!(cap.iter().all(|&v| v >= 0.0));
    }
}

fn objective(kind: usize, g: GridSpec, r: &mut ChaCha8Rng) -> Objective {
    let target = Array2::from_shape_fn(g.shape(), |_| r.random_range(0.0..1.0));
    let depth = Array2::from_shape_fn(g.shape(), |_| r.random_range(0.0..1.0));
    let mut masks = depth_to_masks(&depth, &[0.0, 1.0]).unwrap();
    masks.distances = vec![0.04, 0.06];
    let stft_spec = StftSpec { window_size: 4, hop: 4, window: Window::Rectangular };
    match kind {
        0 => Objective::amp2d(g, &target, 0.05).unwrap(),
        1 => Objective::multiplane(g, &target, &masks, Some(&RegConfig { weight: 0.3, stft: stft_spec })).unwrap(),
        2 => {
            let other = Array2::from_shape_fn(g.shape(), |_| r.random_range(0.0..1.0));
            Objective::focal_stack(g, &[target, other], &[0.04, 0.06]).unwrap()
        }
        3 => {
            let lay = stft_spec.layout(g.shape()).unwrap();
            let (a, b, c, d) = lay.dims();
            let lf = ndarray::Array4::from_shape_fn((a, b, c, d), |_| r.random_range(0.0..1.0));
            Objective::light_field(g, &lf, 0.05, &stft_spec).unwrap()
        }
        _ => Objective::stft_variance(g, &masks, &stft_spec).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn fitting_leaves_disabled_groups_untouched(mask in 1u8..32, seed in 0u64..1000) {
        let g = grid(8, 8);
        let nominal = CalibratedModel::nominal(g, vec![0.03, 0.035, 0.04], 4).unwrap();
        let truth = Perturbation { seed, ..Default::default() }.apply(&nominal).unwrap();
        let display = PhysicalDisplay::new(truth, QuantScheme::uniform(2).unwrap(), 1e-3, seed).unwrap();
        let spec = DatasetSpec { count: 10, seed, optimize_iterations: 3, held_out_plane: Some(1), ..Default::default() };
        let ds = generate_dataset(&display, g, &nominal.distances, &spec).unwrap();
        let groups = ParamGroups {
            a_src: mask & 1 != 0,
            phi_src: mask & 2 != 0,
            phi_f: mask & 4 != 0,
            a_f: mask & 8 != 0,
            lut: mask & 16 != 0,
        };
        let cfg = FitConfig { epochs: 2, lr: 0.01, groups, seed, ..Default::default() };
        let fit = fit_model(&ds, &nominal, &cfg).unwrap().model;
        if !groups.a_src { prop_assert_eq!(&fit.a_src, &nominal.a_src); }
        if !groups.phi_src { prop_assert_eq!(&fit.phi_src, &nominal.phi_src); }
        if !groups.phi_f { prop_assert_eq!(&fit.phi_f, &nominal.phi_f); }
        if !groups.a_f { prop_assert_eq!(&fit.a_f, &nominal.a_f); }
        if !groups.lut { prop_assert_eq!(&fit.lut, &nominal.lut); }
    }
}
