//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! fails.
//!
//! Criteria 6 to 8 train 15 models on the 128×128 overfit scene and dominate
//! the runtime (about two hours on one core).

mod common;

use std::io::Write;
use std::time::Instant;

use anr_core::avatar::Avatar;
use anr_core::losses::{mask_loss, total_loss, total_variation, LossTerms, LossWeights};
use anr_core::metrics::{evaluate, ripfip, EvalReport, MethodStats};
use anr_core::parallel;
use anr_core::scene::{generate_sequence, SceneConfig, SyntheticSequence};
use anr_core::training::{greedy_max_coverage, IdentityData, StepKind, TrainConfig, Trainer, Variant};
use anr_core::Tensor;
use fixedbitset::FixedBitSet;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---- 1 to 5: oracles and contracts -------------------------------------

fn sampling_gradient() -> Outcome {
    let worst = [21u64, 40, 77]
        .into_iter()
        .map(common::texture_gradient_error)
        .fold(0.0, f64::max);
    outcome(worst < 1e-4, format!("8x8x4 texture, 16x16 raster, max rel err {worst:.2e} (< 1e-4)"))
}

fn rasterizer_oracle() -> Outcome {
    let s = common::raster_oracle_suite(100);
    outcome(
        s.id_mismatches == 0 && s.max_bary_err < 1e-6,
        format!(
            "{} meshes at 64x64: {} face_id mismatches, max barycentric err {:.1e} (< 1e-6) over {} covered px",
            s.meshes, s.id_mismatches, s.max_bary_err, s.covered
        ),
    )
}

fn loss_values() -> Outcome {
    let target = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let bce = mask_loss(&Tensor::full(&[1, 1, 2, 2], 0.5), &target).unwrap();
    let tv = total_variation(&Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
    let w = LossWeights {
        lambda_p: 1.0,
        lambda_feat: 0.5,
        lambda_mask: 1.0,
        lambda_adv: 0.1,
        lambda_tv: 0.01,
        ..LossWeights::default()
    };
    let terms = LossTerms {
        pixel: 0.2,
        feature: 0.4,
        mask: 0.1,
        adversarial: 1.0,
        tv: 2.0,
    };
    let sum = total_loss(&terms, &w, 0).unwrap();
    let grads = common::loss_gradient_errors();
    let (worst_name, worst) = grads
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e)| (n.clone(), *e))
        .unwrap();
    let pass = (bce - std::f64::consts::LN_2).abs() <= 1e-6
        && (tv - 0.5).abs() <= 1e-9
        && (sum - 0.62).abs() <= 1e-9
        && worst < 1e-4;
    outcome(
        pass,
        format!(
            "BCE {bce:.9} (ln2 +- 1e-6), TV {tv} (0.5 +- 1e-9), hand sum {sum} (0.62 +- 1e-9), {} gradient checks, worst {worst:.2e} ({worst_name})",
            grads.len()
        ),
    )
}

fn bitset(n: usize, on: &[usize]) -> FixedBitSet {
    let mut s = FixedBitSet::with_capacity(n);
    on.iter().for_each(|&i| s.insert(i));
    s
}

fn exhaustive(sets: &[FixedBitSet], budget: usize) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << sets.len()) {
        if mask.count_ones() as usize > budget {
            continue;
        }
        let mut u = FixedBitSet::with_capacity(sets[0].len());
        for (i, s) in sets.iter().enumerate() {
            if mask & (1 << i) != 0 {
                u.union_with(s);
            }
        }
        best = best.max(u.count_ones(..));
    }
    best
}

fn keyframe_selection() -> Outcome {
    let bound = 1.0 - (-1.0f64).exp();
    let mut rng = anr_core::nn::params::seeded_rng(4, 0);
    let mut worst_ratio = f64::INFINITY;
    let mut instances = 0;
    for n in 1..=12usize {
        for budget in 1..=4usize {
            for _ in 0..25 {
                let universe = rng.random_range(4..40);
                let density = rng.random_range(0.05..0.6);
                let sets: Vec<FixedBitSet> = (0..n)
                    .map(|_| {
                        let on: Vec<usize> = (0..universe).filter(|_| rng.random::<f64>() < density).collect();
                        bitset(universe, &on)
                    })
                    .collect();
                let opt = exhaustive(&sets, budget);
                let got = greedy_max_coverage(&sets, budget, 0.0).unwrap().covered_count();
                if opt > 0 {
                    worst_ratio = worst_ratio.min(got as f64 / opt as f64);
                }
                instances += 1;
            }
        }
    }
    let small = [bitset(5, &[1, 2]), bitset(5, &[2, 3]), bitset(5, &[3, 4])];
    let k = greedy_max_coverage(&small, 2, 0.0).unwrap();
    let small_ok = k.frame_indices == [0, 2] && k.covered_count() == 4 && exhaustive(&small, 2) == 4;
    outcome(
        worst_ratio >= bound && small_ok,
        format!(
            "{instances} instances (<= 12 frames, budget <= 4): worst greedy/optimum {worst_ratio:.3} (>= {bound:.3}); 3-frame example picks {:?}",
            k.frame_indices
        ),
    )
}

fn tiny_scene(seed: u64) -> SyntheticSequence {
    let cfg = SceneConfig {
        frames: 12,
        train_frames: 10,
        resolution: 32,
        subdivisions: 6,
        ..SceneConfig::default()
    };
    generate_sequence(&cfg, seed).unwrap()
}

fn tiny_config(variant: Variant, steps: u64) -> TrainConfig {
    let mut c = TrainConfig {
        steps,
        texture_width: 16,
        texture_height: 16,
        keyframe_fraction: 0.1,
        ..TrainConfig::default()
    }
    .with_variant(variant);
    c.renderer.depth = 2;
    c.renderer.base_channels = 4;
    c.renderer.max_channels = 8;
    c.disc_width = 4;
    c
}

fn split_contract() -> Outcome {
    let mut t = Trainer::new(tiny_config(Variant::Full, 40), vec![IdentityData::new("a", tiny_scene(1)).unwrap()]).unwrap();
    let (mut frozen, mut moved, mut broken) = (0, 0, 0);
    while t.step < t.config.steps {
        let plan = t.plan_step();
        let before = t.textures[plan.identity].fingerprint();
        t.execute(&plan).unwrap();
        let changed = t.textures[plan.identity].fingerprint() != before;
        match (plan.kind, changed) {
            (StepKind::Renderer, false) => frozen += 1,
            (StepKind::Keyframe, true) => moved += 1,
            _ => broken += 1,
        }
    }
    outcome(
        broken == 0 && frozen > 0 && moved > 0,
        format!("{frozen} renderer-only steps left the texture hash unchanged, {moved} keyframe steps changed it, {broken} violations"),
    )
}

// ---- 6 to 8: training runs on the overfit scene -------------------------

const SEEDS: [u64; 3] = [0, 1, 2];
const DATA_SEED: u64 = 11;
const STEPS: u64 = 6000;
const MISALIGNMENT: f64 = 0.005;
const OVERHANG: f64 = 0.2;

fn overfit_scene() -> SceneConfig {
    SceneConfig {
        misalignment: MISALIGNMENT,
        overhang: OVERHANG,
        ..SceneConfig::default()
    }
}

fn overfit_config(variant: Variant, seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        steps: STEPS,
        crop_size: 64,
        texture_width: 128,
        texture_height: 128,
        lr_renderer: 1e-3,
        lr_final_scale: 0.05,
        rescale_min: 0.9,
        rescale_max: 1.1,
        ..TrainConfig::default()
    }
    .with_variant(variant);
    c.renderer.depth = 4;
    c.renderer.base_channels = 16;
    c.renderer.max_channels = 64;
    c
}

struct Run {
    variant: Variant,
    report: EvalReport,
}

fn train_runs(variants: &[Variant]) -> (SyntheticSequence, Vec<Run>) {
    let seq = generate_sequence(&overfit_scene(), DATA_SEED).unwrap();
    let test: Vec<usize> = seq.test_indices().collect();
    let mut runs = Vec::new();
    for &variant in variants {
        for seed in SEEDS {
            let start = Instant::now();
            let data = IdentityData::new("a", seq.clone()).unwrap();
            let mut t = Trainer::new(overfit_config(variant, seed), vec![data]).unwrap();
            t.run(None, |_, _| Ok(())).unwrap();
            let avatar = Avatar::from_checkpoint(&t.to_checkpoint()).unwrap();
            let report = evaluate(&avatar, "a", &seq, &test).unwrap();
            let a = &report.aggregate;
            note(&format!(
                "  run {:<8} seed {seed}: l1 {:.4} ssim {:.4} feat {:.4} iou {:.4} band {:.4} ({:.0}s)",
                variant.name(),
                a.masked_l1,
                a.ssim,
                a.feature_distance,
                a.mask_iou,
                report.band_iou,
                start.elapsed().as_secs_f64()
            ));
            runs.push(Run { variant, report });
        }
    }
    (seq, runs)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn med(runs: &[Run], variant: Variant, f: impl Fn(&EvalReport) -> f64) -> f64 {
    median(runs.iter().filter(|r| r.variant == variant).map(|r| f(&r.report)).collect())
}

fn overfit(runs: &[Run], seq: &SyntheticSequence) -> Outcome {
    let l1 = med(runs, Variant::Full, |r| r.aggregate.masked_l1);
    let ssim = med(runs, Variant::Full, |r| r.aggregate.ssim);
    let keyframes = overfit_config(Variant::Full, 0).budget_for(seq.train_indices().len());
    outcome(
        l1 <= 0.08 && ssim >= 0.90,
        format!(
            "1 identity, {} train frames, {keyframes} keyframes, {}px, {STEPS} steps, {} held-out frames: median masked L1 {l1:.4} (<= 0.08), SSIM {ssim:.4} (>= 0.90)",
            seq.train_indices().len(),
            seq.config.resolution,
            seq.test_indices().len()
        ),
    )
}

fn ablation(runs: &[Run]) -> Outcome {
    let order = [Variant::Full, Variant::TwoStageNoSplit, Variant::SingleStage, Variant::PixelOnly];
    let f: Vec<f64> = order
        .iter()
        .map(|&v| med(runs, v, |r| r.aggregate.feature_distance))
        .collect();
    let pass = f[0] < f[1] && f[0] < f[2] && f[0] < f[3] && f[1] <= f[2] && f[2] <= f[3];
    outcome(
        pass,
        format!(
            "median feature distance full {:.4} <= no-split {:.4} <= single-stage {:.4} <= pixel-only {:.4}, full strictly best",
            f[0], f[1], f[2], f[3]
        ),
    )
}

fn dnr_vs_anr(runs: &[Run]) -> Outcome {
    let fa = med(runs, Variant::Full, |r| r.aggregate.feature_distance);
    let fd = med(runs, Variant::Dnr, |r| r.aggregate.feature_distance);
    let ba = med(runs, Variant::Full, |r| r.band_iou);
    let bd = med(runs, Variant::Dnr, |r| r.band_iou);
    outcome(
        fa < fd && ba > bd,
        format!(
            "misalignment {MISALIGNMENT}, overhang {OVERHANG}: median feature distance ANR {fa:.4} < DNR {fd:.4}; overhang-band IoU ANR {ba:.4} > DNR {bd:.4}"
        ),
    )
}

// ---- 9 and 10 -----------------------------------------------------------

fn ripfip_examples() -> Outcome {
    let m = |l: f64, p: u64| MethodStats {
        name: String::new(),
        lpips_like: l,
        param_count: p,
    };
    let same = ripfip(&m(0.08, 100_000_000), &m(0.08, 100_000_000)).unwrap();
    let best = ripfip(&m(0.0, 1), &m(0.08, 100_000_000)).unwrap();
    let mid = ripfip(&m(0.04, 1_000_000), &m(0.08, 100_000_000)).unwrap();
    outcome(
        same.abs() <= 1e-12 && (best - 1.0).abs() <= 1e-12 && (mid - 0.125).abs() <= 1e-12,
        format!("examples give {same}, {best}, {mid} (0, 1, 0.125 to 1e-12)"),
    )
}

fn determinism() -> Outcome {
    parallel::set_sequential(true);
    let run = || {
        let seq = tiny_scene(3);
        let data = IdentityData::new("a", seq.clone()).unwrap();
        let mut t = Trainer::new(tiny_config(Variant::Full, 12), vec![data]).unwrap();
        t.run(None, |_, _| Ok(())).unwrap();
        let ckpt = t.to_checkpoint();
        let avatar = Avatar::from_checkpoint(&ckpt).unwrap();
        let test: Vec<usize> = seq.test_indices().collect();
        let report = evaluate(&avatar, "a", &seq, &test).unwrap();
        (ckpt.to_bytes().unwrap(), report.to_json(), report.to_csv().unwrap())
    };
    let a = run();
    let b = run();
    parallel::set_sequential(false);
    outcome(
        a == b,
        format!(
            "two single-threaded runs: checkpoint {} bytes identical {}, report json/csv identical {}",
            a.0.len(),
            a.0 == b.0,
            a.1 == b.1 && a.2 == b.2
        ),
    )
}

// ---- harness ------------------------------------------------------------

fn note(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn report(id: usize, name: &str, start: Instant, o: Outcome, failed: &mut Vec<usize>) {
    if !o.pass {
        failed.push(id);
    }
    note(&format!(
        "{} [{id:>2}] {name}: {} ({:.1}s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    ));
}

fn main() {
    parallel::init_from_env();
    // Optional criterion numbers select a subset; none runs everything.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| only.is_empty() || only.contains(&id);
    let mut failed = Vec::new();
    let quick: [(usize, &str, fn() -> Outcome); 5] = [
        (1, "sampling gradient oracle", sampling_gradient),
        (2, "rasterizer oracle", rasterizer_oracle),
        (3, "loss unit values", loss_values),
        (4, "keyframe selection", keyframe_selection),
        (5, "split-optimization contract", split_contract),
    ];
    for (id, name, f) in quick.into_iter().filter(|c| wanted(c.0)) {
        let start = Instant::now();
        report(id, name, start, f(), &mut failed);
    }

    if (6..=8).any(wanted) {
        let start = Instant::now();
        let (seq, runs) = train_runs(&[
            Variant::Full,
            Variant::TwoStageNoSplit,
            Variant::SingleStage,
            Variant::PixelOnly,
            Variant::Dnr,
        ]);
        report(6, "overfit acceptance", start, overfit(&runs, &seq), &mut failed);
        report(7, "ablation ordering", start, ablation(&runs), &mut failed);
        report(8, "DNR vs ANR", start, dnr_vs_anr(&runs), &mut failed);
    }

    let tail: [(usize, &str, fn() -> Outcome); 2] = [(9, "rIPFIP formula", ripfip_examples), (10, "determinism", determinism)];
    for (id, name, f) in tail.into_iter().filter(|c| wanted(c.0)) {
        let start = Instant::now();
        report(id, name, start, f(), &mut failed);
    }

    if failed.is_empty() {
        note("acceptance: all selected criteria pass");
    } else {
        note(&format!("acceptance: failed {failed:?}"));
        std::process::exit(1);
    }
}
