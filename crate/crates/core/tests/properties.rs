use proptest::prelude::*;

use deepflow::datasets::{eight_gaussians_mode, generate_n, DatasetName, DatasetSpec};
use deepflow::evaluation::sliced_wasserstein;
use deepflow::foundation::{grad_check, ParamSet, RngStream, Tensor};
use deepflow::interpolant::{
    assign_branch_times, gt_velocity, interpolate, logit_normal_time, time_gap, TimeGap,
};
use deepflow::io::{parse_run_config, RunConfig};
use deepflow::network::{DataGeometry, DeepFlowModel, ModelConfig, VeraVariant};
use deepflow::sampling::{model_prediction, sample, ModelField, SamplerConfig, SamplerKind};
use deepflow::training::{acceleration_loss, deep_supervision_loss, ema_update, total_loss};

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    RngStream::new(seed, 7).normal(&[rows, cols])
}

proptest! {
    #[test]
    fn rng_streams_replay(seed in any::<u64>(), id in any::<u64>()) {
        let a = RngStream::new(seed, id).normal::<f64>(&[64]);
        let b = RngStream::new(seed, id).normal::<f64>(&[64]);
        prop_assert_eq!(a, b);
        let u = RngStream::new(seed, id).uniform::<f64>(&[256]);
        prop_assert!(u.data().iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn first_order_step_recovers_data(seed in any::<u64>(), t in 0.0f64..=1.0) {
        let (x0, x1) = (tensor(8, 3, seed), tensor(8, 3, seed ^ 1));
        let xt = interpolate(&x0, &x1, t).unwrap();
        let v = gt_velocity(&x0, &x1).unwrap();
        let d = time_gap(t, 0.0).value();
        for i in 0..x0.numel() {
            let back = xt.data()[i] + v.data()[i] * d;
            let scale = x0.data()[i].abs().max(x1.data()[i].abs()).max(1.0);
            prop_assert!((back - x0.data()[i]).abs() <= 4.0 * f64::EPSILON * scale);
        }
    }

    #[test]
    fn branch_times_are_monotone_within_alpha(
        seed in any::<u64>(),
        t1 in 0.0f64..=1.0,
        alpha in 0.0f64..0.5,
        k in 1usize..6,
    ) {
        let bt = assign_branch_times(t1, k, alpha, &mut RngStream::new(seed, 1)).unwrap();
        let ts = bt.times();
        prop_assert_eq!(ts.len(), k);
        prop_assert_eq!(ts[0], t1);
        for w in ts.windows(2) {
            prop_assert!(w[0] >= w[1]);
            prop_assert!(w[0] - w[1] <= alpha + 1e-15);
            prop_assert!((0.0..=1.0).contains(&w[1]));
        }
    }

    #[test]
    fn logit_normal_time_is_inside_the_unit_interval(n in -30.0f64..30.0) {
        let t = logit_normal_time(n);
        prop_assert!(t > 0.0 && t < 1.0);
    }

    #[test]
    fn time_gap_signs(a in 0.0f64..=1.0) {
        prop_assert_eq!(time_gap(a, a), TimeGap(0.0));
        prop_assert_eq!(time_gap(a, 0.0), TimeGap(-a));
    }

    #[test]
    fn loss_ledger(seed in any::<u64>(), k in 1usize..5, lambda in 0.0f64..3.0) {
        let target = tensor(6, 2, seed);
        let preds: Vec<_> = (0..k).map(|i| tensor(6, 2, seed.wrapping_add(i as u64 + 1))).collect();
        let mut betas = vec![0.2; k - 1];
        betas.push(1.0);
        let (deep_star, per) = deep_supervision_loss(&preds, &target, &betas).unwrap();
        let weighted: f64 = per.iter().zip(&betas).map(|(l, b)| l * b).sum();
        prop_assert!((deep_star - weighted).abs() <= 1e-12 * weighted.max(1.0));
        let total = total_loss(deep_star, 0.5, lambda);
        prop_assert_eq!(total, deep_star + lambda * 0.5);
    }

    #[test]
    fn ground_truth_has_zero_acceleration_loss(seed in any::<u64>(), sites in 1usize..4) {
        let (x0, x1) = (tensor(5, 2, seed), tensor(5, 2, seed ^ 9));
        let v = gt_velocity(&x0, &x1).unwrap();
        let mut r = RngStream::new(seed, 2);
        let times: Vec<Vec<f64>> = (0..sites).map(|_| (0..5).map(|_| r.uniform_f64()).collect()).collect();
        let xs: Vec<_> = times
            .iter()
            .map(|ts| deepflow::interpolant::interpolate_rows(&x0, &x1, ts).unwrap())
            .collect();
        let a = vec![Tensor::zeros(x0.shape()); sites];
        let (total, per) = acceleration_loss(&x0, &xs, &vec![v; sites], &a, &times).unwrap();
        prop_assert_eq!(per.len(), sites);
        prop_assert!(total <= 1e-28, "{}", total);
    }

    #[test]
    fn sliced_w2_symmetric_and_order_free(seed in any::<u64>(), n in 2usize..40) {
        let a = tensor(n, 2, seed);
        let b = tensor(n + 3, 2, seed ^ 5);
        let sw = |x: &Tensor<f64>, y: &Tensor<f64>| sliced_wasserstein(x, y, 32, &mut RngStream::new(3, 3)).unwrap();
        let ab = sw(&a, &b);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - sw(&b, &a)).abs() <= 1e-12 * ab.max(1.0));
        prop_assert_eq!(sw(&a, &a), 0.0);
        let rows: Vec<f64> = (0..n).rev().flat_map(|i| a.row(i).to_vec()).collect();
        let reversed = Tensor::from_vec(&[n, 2], rows).unwrap();
        prop_assert!((sw(&reversed, &b) - ab).abs() <= 1e-12 * ab.max(1.0));
    }

    #[test]
    fn grad_check_report_honours_tolerance(seed in any::<u64>(), tol in 1e-12f64..1e-2) {
        let x = tensor(1, 6, seed).reshape(&[6]).unwrap();
        let r = grad_check(|p: &Tensor<f64>| (p.sum_squares(), p.scale(2.0)), &x, 1e-5, tol).unwrap();
        prop_assert_eq!(r.passed, r.max_rel_error <= tol);
    }

    #[test]
    fn ema_matches_closed_form(seed in any::<u64>(), rho in 0.5f64..0.999) {
        let mut r = RngStream::new(seed, 4);
        let init: Tensor<f32> = r.normal(&[5]);
        let mut params = ParamSet::new();
        params.push("w", init.clone());
        let mut ema = params.clone();
        let mut thetas = Vec::new();
        for _ in 0..3 {
            params.get_mut(0).data_mut().iter_mut().for_each(|w| *w += r.normal_f64() as f32);
            thetas.push(params.get(0).clone());
            ema_update(&mut ema, &params, rho);
        }
        for i in 0..5 {
            let mut want = rho.powi(3) * init.data()[i] as f64;
            for (j, th) in thetas.iter().enumerate() {
                want += (1.0 - rho) * rho.powi(2 - j as i32) * th.data()[i] as f64;
            }
            let got = ema.get(0).data()[i] as f64;
            prop_assert!((got - want).abs() <= 1e-5 * want.abs().max(1.0), "{} vs {}", got, want);
        }
    }

    #[test]
    fn eight_gaussians_are_pure_and_labelled(seed in any::<u64>()) {
        let spec = DatasetSpec { name: DatasetName::EightGaussians, noise_std: 0.05, ..DatasetSpec::default() };
        let a = generate_n(&spec, 64, &mut RngStream::new(seed, 1)).unwrap();
        let b = generate_n(&spec, 64, &mut RngStream::new(seed, 1)).unwrap();
        prop_assert_eq!(&a.data, &b.data);
        let classes = a.classes.clone().unwrap();
        for (i, &c) in classes.iter().enumerate() {
            let [mx, my] = eight_gaussians_mode(c);
            let p = a.data.row(i);
            prop_assert!(((p[0] - mx).powi(2) + (p[1] - my).powi(2)).sqrt() < 0.5);
        }
    }

    #[test]
    fn run_config_round_trips(seed in any::<u64>(), steps in 1u64..100_000, lr in 1e-6f64..1e-1, k in 1usize..4) {
        let mut run = RunConfig::default();
        run.seed = seed;
        run.train.steps = steps;
        run.train.lr = lr;
        run.model.k = k;
        let back = parse_run_config(&run.to_json()).unwrap();
        prop_assert_eq!(back, run);
    }
}

fn tiny(k: usize, geometry: DataGeometry, num_classes: usize) -> DeepFlowModel {
    DeepFlowModel::new(&ModelConfig {
        k,
        depth_per_branch: 1,
        hidden: 8,
        heads: 2,
        num_classes,
        geometry,
        vera_variant: if k > 1 { VeraVariant::Concat } else { VeraVariant::None },
        accmlp_multipliers: vec![2.0, 1.0],
        freq_dim: 8,
        ..ModelConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sampler_output_has_data_shape(
        seed in any::<u64>(),
        k in 1usize..4,
        image in any::<bool>(),
        ode in any::<bool>(),
        n in 1usize..5,
    ) {
        let geometry = if image {
            DataGeometry::Image { channels: 1, height: 4, width: 4, patch: 2 }
        } else {
            DataGeometry::Point { dim: 2 }
        };
        let m = tiny(k, geometry, 0);
        let params = m.init_params::<f32>(&mut RngStream::new(seed, 1));
        let cfg = SamplerConfig {
            kind: if ode { SamplerKind::Ode } else { SamplerKind::Sde },
            steps: 3,
            ..SamplerConfig::default()
        };
        let mut field = ModelField::new(&m, &params, 1.0);
        let out = sample(&mut field, &cfg, n, None, &RngStream::new(seed, 3)).unwrap();
        prop_assert_eq!(out.samples.shape().to_vec(), geometry.batch_shape(n));
    }

    #[test]
    fn inference_gaps_are_zero(seed in any::<u64>(), k in 2usize..4, t in 0.01f64..1.0) {
        let m = tiny(k, DataGeometry::Point { dim: 2 }, 3);
        let params = m.init_params::<f32>(&mut RngStream::new(seed, 1));
        let x: Tensor<f32> = RngStream::new(seed, 2).normal(&[3, 2]);
        let p = model_prediction(&m, &params, &x, t, Some(&[0, 1, 2])).unwrap();
        prop_assert_eq!(p.gaps.len(), k - 1);
        prop_assert!(p.gaps.iter().flatten().all(|&g| g == 0.0));
    }
}
