//! Randomized invariants across the public API.

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use snaplab::decoder::{prune_decoder, Decoder, DecoderSpec};
use snaplab::distill::{
    check_grid_nesting, effective_gamma, student_landing, teacher_two_steps, total_loss, vanilla_target, DistillBatch,
    DistillConfig, GammaMode,
};
use snaplab::evaldata::{sliced_wasserstein_with, ConditionalDataset};
use snaplab::evolve::{bottom_k, genome_latency, score_removals, LatencyTable, SyntheticEvaluator};
use snaplab::nets::{ArchitectureGenome, BlockKind, Denoiser, DenoiserConfig, ParamSet, SkipMask};
use snaplab::sampler::{cfg_combine, ddim_step, Condition, Denoise, GuidanceScale};
use snaplab::schedule::{LatentState, NoiseSchedule, Prediction, PredictionKind, TimePoint};

const KINDS: [PredictionKind; 3] = [PredictionKind::Epsilon, PredictionKind::V, PredictionKind::X];

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, e| m.max(e.abs()))
}

fn tiny_model(seed: u64) -> Denoiser {
    let g = ArchitectureGenome::uniform([4, 6, 8], 1, 1).unwrap();
    Denoiser::build(&g, DenoiserConfig { time_features: 4, temb_dim: 8, tokens: 2, token_dim: 4, attn_dim: 4, ..DenoiserConfig::new(2, 3) }, seed)
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn variance_is_preserved(t in 0.0f64..=1.0) {
        let (a, s) = NoiseSchedule::Cosine.alpha_sigma_at(t).unwrap();
        prop_assert!((a * a + s * s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn conversion_cycles_return_the_start(x in matrix(4, 3), eps in matrix(4, 3), t in 0.01f64..0.99, path in prop::collection::vec(0usize..3, 1..6)) {
        let sch = NoiseSchedule::Cosine;
        let tp = TimePoint::new(t).unwrap();
        let z = sch.diffuse(&x, &eps, tp).unwrap();
        let start = sch.v_from_x_eps(&x, &eps, tp).unwrap();
        let mut p = start.clone();
        for k in path {
            p = sch.convert(&p, &z, KINDS[k]).unwrap();
        }
        let back = sch.convert(&p, &z, PredictionKind::V).unwrap();
        prop_assert!(max_abs(&back.value, &start.value) < 1e-6);
        let xr = sch.convert(&start, &z, PredictionKind::X).unwrap();
        let er = sch.convert(&start, &z, PredictionKind::Epsilon).unwrap();
        prop_assert!(max_abs(&xr.value, &x) < 1e-6);
        prop_assert!(max_abs(&er.value, &eps) < 1e-6);
    }

    #[test]
    fn ddim_ignores_parameterization(x in matrix(3, 2), eps in matrix(3, 2), t in 0.05f64..1.0, frac in 0.0f64..1.0) {
        let sch = NoiseSchedule::Cosine;
        let tp = TimePoint::new(t).unwrap();
        let next = TimePoint::new(t * frac).unwrap();
        let z = sch.diffuse(&x, &eps, tp).unwrap();
        let v = sch.v_from_x_eps(&x, &eps, tp).unwrap();
        let reference = ddim_step(&sch, &z, &v, next).unwrap();
        for k in KINDS {
            let p = sch.convert(&v, &z, k).unwrap();
            let out = ddim_step(&sch, &z, &p, next).unwrap();
            prop_assert!(max_abs(&out.z, &reference.z) < 1e-6);
        }
    }

    #[test]
    fn guidance_commutes_with_conversion(a in matrix(3, 2), b in matrix(3, 2), zv in matrix(3, 2), t in 0.05f64..0.95, w in 0.0f64..12.0) {
        let sch = NoiseSchedule::Cosine;
        let z = LatentState::new(zv, TimePoint::new(t).unwrap()).unwrap();
        let w = GuidanceScale::new(w).unwrap();
        let (pa, pb) = (Prediction::new(PredictionKind::V, a), Prediction::new(PredictionKind::V, b));
        for k in KINDS {
            let lhs = sch.convert(&cfg_combine(&pa, &pb, w).unwrap(), &z, k).unwrap();
            let rhs = cfg_combine(&sch.convert(&pa, &z, k).unwrap(), &sch.convert(&pb, &z, k).unwrap(), w).unwrap();
            prop_assert!(max_abs(&lhs.value, &rhs.value) < 1e-6);
        }
    }

    #[test]
    fn target_inverts_the_landing(seed in any::<u64>(), n_s in prop::sample::select(vec![1usize, 2, 4, 8, 16])) {
        let sch = NoiseSchedule::Cosine;
        let teacher = tiny_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small = ConditionalDataset::ring(3, 1.0, 0.1, seed).unwrap();
        let batch = DistillBatch::sample(&small, n_s, 16, 0.2, &mut rng);
        let z = batch.z_t(&sch).unwrap();
        let z2 = teacher_two_steps(&teacher, &sch, &z, &batch.t, &batch.t_mid, &batch.t_next, &batch.cond, None).unwrap();
        let target = vanilla_target(&sch, &z, &z2, &batch.t, &batch.t_next).unwrap();
        let landed = student_landing(&sch, &z, &target, &batch.t, &batch.t_next).unwrap();
        prop_assert!(max_abs(&landed, &z2) < 1e-6);
    }

    #[test]
    fn student_grid_nests_in_teacher_grid(n_s in 1usize..64, factor in 2usize..5) {
        prop_assert!(check_grid_nesting(n_s * factor, n_s).is_ok());
        if n_s > 1 {
            prop_assert!(check_grid_nesting(n_s * factor + 1, n_s).is_err());
        }
    }

    #[test]
    fn total_loss_decomposes(seed in any::<u64>(), p in 0.0f64..=1.0, gamma in 0.0f64..1.0, dynamic in any::<bool>()) {
        let sch = NoiseSchedule::Cosine;
        let data = ConditionalDataset::ring(3, 1.0, 0.1, seed).unwrap();
        let (student, teacher) = (tiny_model(seed), tiny_model(seed ^ 1));
        let config = DistillConfig {
            cfg_probability: p,
            gamma,
            gamma_mode: if dynamic { GammaMode::Dynamic } else { GammaMode::Constant },
            ..DistillConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = DistillBatch::sample(&data, 8, 8, 0.1, &mut rng);
        let (o, _) = total_loss(&student, &teacher, &sch, &batch, &config, &mut rng).unwrap();
        prop_assert!((o.loss_total - (o.loss_dstl + o.gamma_eff * o.loss_ori)).abs() < 1e-6 * o.loss_total.abs().max(1.0));
        prop_assert!((o.gamma_eff - effective_gamma(&config, o.loss_dstl, o.loss_ori)).abs() < 1e-12);
        prop_assert!(o.loss_dstl >= 0.0 && o.loss_ori >= 0.0);
        prop_assert_eq!(o.used_cfg, o.w_sampled.is_some());
    }

    #[test]
    fn masking_matches_removal(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let model = tiny_model(seed);
        let keys: Vec<_> = model.genome().blocks().into_iter().map(|b| b.key).collect();
        let key = keys[pick.index(keys.len())];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, labels) = ConditionalDataset::ring(3, 1.0, 0.1, seed).unwrap().sample_batch(6, &mut rng);
        let t: Vec<f64> = (0..6).map(|i| 0.1 + 0.15 * i as f64).collect();
        let cond: Vec<Condition> = labels.iter().map(|&l| Condition::Label(l)).collect();
        let mask = SkipMask::skip_one(key);
        let masked = model.masked(&mask).predict(&x, &t, &cond).unwrap();
        let mut removed = model.clone();
        removed.remove_block(key).unwrap();
        let cut = removed.predict(&x, &t, &cond).unwrap();
        prop_assert_eq!(masked.value, cut.value);
    }

    #[test]
    fn parameter_count_is_additive(seed in any::<u64>()) {
        let model = tiny_model(seed);
        let blocks: usize = model.genome().blocks().iter().map(|b| model.block_param_count(b.key).unwrap()).sum();
        prop_assert_eq!(model.param_count(), model.backbone_param_count() + blocks);
    }

    #[test]
    fn removals_follow_value_order(contribs in prop::collection::vec(0.0f64..1.0, 14), k in 1usize..5) {
        let model = tiny_model(3);
        let genome = model.genome();
        let mut table = LatencyTable::new(3, "test");
        for (stage, s) in genome.stages.iter().enumerate() {
            table.insert(BlockKind::Resnet, stage, s.width, 1.0 + stage as f64).unwrap();
            table.insert(BlockKind::CrossAttention, stage, s.width, 2.0 + stage as f64).unwrap();
        }
        let mut eval = SyntheticEvaluator { base: 0.0, default_contribution: 0.0, ..Default::default() };
        for (spec, c) in genome.blocks().iter().zip(&contribs) {
            eval.contributions.insert(model.block(spec.key).unwrap().uid(), *c);
        }
        let base = eval.contributions.values().sum::<f64>();
        let scores = score_removals(&model, &mut eval, &table, base).unwrap();
        let picked = bottom_k(&scores, k);
        let max_picked = picked.iter().map(|s| s.value).fold(f64::MIN, f64::max);
        for s in &scores {
            if !picked.iter().any(|p| p.action == s.action) {
                prop_assert!(s.value >= max_picked);
            }
        }
        prop_assert!(genome_latency(&genome, &table).unwrap() > 0.0);
    }

    #[test]
    fn sliced_distance_is_order_free_and_metric(a in matrix(40, 2), b in matrix(40, 2), c in matrix(40, 2), perm_seed in any::<u64>()) {
        let d = |x: &Array2<f64>, y: &Array2<f64>| sliced_wasserstein_with(x, y, 64, 5).unwrap();
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-6);
        let mut idx: Vec<usize> = (0..40).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let shuffled = a.select(ndarray::Axis(0), &idx);
        prop_assert!((d(&a, &b) - d(&shuffled, &b)).abs() < 1e-9);
    }

    #[test]
    fn pruned_decoder_keeps_about_ratio_squared(ratio in 0.3f64..0.8, width in 24usize..64) {
        let spec = DecoderSpec { hidden: vec![width; 3], ..DecoderSpec::default() };
        let teacher = Decoder::new(spec, 0).unwrap();
        let student = prune_decoder(&teacher, ratio, 1).unwrap();
        let r = student.param_count() as f64 / teacher.param_count() as f64;
        prop_assert!((r - ratio * ratio).abs() <= 0.05, "ratio {} gave {}", ratio, r);
    }
}
