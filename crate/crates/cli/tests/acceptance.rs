//! End-to-end acceptance checks, one PASS/FAIL line each. Pass names (or
//! substrings) as arguments to run a subset:
//! `cargo test -p pixclust --test acceptance -- shapes`.

use std::collections::{HashSet, VecDeque};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};
use pixclust::commands::{evaluate, EvalMode, Source};
use pixclust::config::RunConfig;
use pixclust::dataset;
use pixclust_core::autodiff::Fault;
use pixclust_core::eval::{
    average_precision, build_adjacency_graph, chromatic_number_bruteforce, AdjacencyGraph, EvalImage, GtInstance,
    AP_THRESHOLDS,
};
use pixclust_core::grid::Grid;
use pixclust_core::losses::{
    averaged_pair_loss, background_loss, center_smooth_l1_loss, kl_div, loss_diff, loss_same, pair_loss,
    semantic_ce_loss, total_loss, LossBreakdown, LossConfig, LossTargets, LossWeights, ProbMap,
};
use pixclust_core::mask::Mask;
use pixclust_core::network::{
    evaluate_loss, forward, grad_check, init_network, step_pair_set, train, GradCheckConfig, ParameterStore,
    TrainConfig,
};
use pixclust_core::postprocess::{connected_components, ground_truth_outputs, predict_instances, InstancePrediction};
use pixclust_core::rng::{derive_seed, seeded};
use pixclust_core::sampling::{build_pair_set, enumerate_pairs, filter_pairs, Pair, PairSet, Pixel, SamplerConfig};
use pixclust_core::scene::{gen_shapes_scene, Scene, SceneGenConfig};
use pixclust_core::tensor::Tensor;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn config(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    let cfg = RunConfig::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
    cfg.validate().unwrap();
    cfg
}

/// Seed of the held-out scenes for a preset; disjoint from its training stream.
fn held_out_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, 0x00de_5e7)
}

/// Fixed-point arithmetic on big integers for the loss oracle.
mod hp {
    use super::*;

    const DIGITS: u32 = 60;

    fn unit() -> BigInt {
        BigInt::from(10u32).pow(DIGITS)
    }

    pub fn q(num: i64, den: i64) -> BigRational {
        BigRational::new(num.into(), den.into())
    }

    pub fn fixed(r: &BigRational) -> BigInt {
        r.numer() * unit() / r.denom()
    }

    pub fn to_f64(v: &BigInt) -> f64 {
        BigRational::new(v.clone(), unit()).to_f64().unwrap()
    }

    fn atanh(y: &BigInt) -> BigInt {
        let s = unit();
        let y2 = y * y / &s;
        let (mut term, mut sum, mut k) = (y.clone(), BigInt::zero(), 1u32);
        while !term.is_zero() {
            sum += &term / BigInt::from(k);
            term = &term * &y2 / &s;
            k += 2;
        }
        sum
    }

    /// `ln x` via `x = m·2^e`, `m ∈ [1, 2)`, and `ln m = 2 atanh((m−1)/(m+1))`.
    pub fn ln(x: &BigRational) -> BigInt {
        assert!(x.is_positive());
        let two = q(2, 1);
        let (mut m, mut e) = (x.clone(), 0i64);
        while m >= two {
            m /= &two;
            e += 1;
        }
        while m < BigRational::one() {
            m *= &two;
            e -= 1;
        }
        let y = (&m - BigRational::one()) / (&m + BigRational::one());
        let ln2 = BigInt::from(2) * atanh(&fixed(&q(1, 3)));
        BigInt::from(2) * atanh(&fixed(&y)) + ln2 * BigInt::from(e)
    }

    pub fn delta() -> BigRational {
        q(1, 1_000_000_000_000)
    }

    pub fn kl(p: &[BigRational], r: &[BigRational]) -> BigInt {
        let d = delta();
        p.iter()
            .zip(r)
            .filter(|(a, _)| !a.is_zero())
            .map(|(a, b)| {
                let l = ln(&((a + &d) / (b + &d)));
                a.numer() * l / a.denom()
            })
            .sum()
    }

    pub fn same(p: &[BigRational], r: &[BigRational]) -> BigInt {
        kl(p, r) + kl(r, p)
    }

    pub fn diff(p: &[BigRational], r: &[BigRational], sigma: i64) -> BigInt {
        let s = fixed(&q(sigma, 1));
        let hinge = |k: BigInt| (&s - k).max(BigInt::zero());
        hinge(kl(p, r)) + hinge(kl(r, p))
    }

    /// `−ln(x + δ)`.
    pub fn nll(x: &BigRational) -> BigInt {
        -ln(&(x + delta()))
    }

    pub fn smooth_l1(e: &BigRational) -> BigInt {
        let a = e.abs();
        if a < BigRational::one() {
            fixed(&(q(1, 2) * &a * &a))
        } else {
            fixed(&(a - q(1, 2)))
        }
    }
}

fn f(v: &[BigRational]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap()).collect()
}

fn prob_map(channels: usize, h: usize, w: usize, per_pixel: &[Vec<f64>]) -> ProbMap {
    let mut t = Tensor::zeros(&[channels, h, w]);
    for (p, dist) in per_pixel.iter().enumerate() {
        for (c, &v) in dist.iter().enumerate() {
            t.data_mut()[c * h * w + p] = v;
        }
    }
    ProbMap::new(t).unwrap()
}

fn flat_cfg() -> LossConfig {
    LossConfig { n: 1, stride: 1, coloring: false, ..LossConfig::default() }
}

fn loss_oracles() -> Outcome {
    use hp::q;
    const TOL: f64 = 1e-9;
    const PRINTED_TOL: f64 = 5e-7;
    let d = 1e-12;
    let half = [q(1, 2), q(1, 2)];
    let skew = [q(9, 10), q(1, 10)];
    let mixed = [q(3, 10), q(7, 10)];
    let one_zero = [q(1, 1), q(0, 1)];
    let zero_one = [q(0, 1), q(1, 1)];

    // (label, implementation, oracle, printed reference if any)
    let mut cases: Vec<(&str, f64, BigInt, Option<f64>)> = vec![
        ("kl identical", kl_div(&f(&half), &f(&half), d).unwrap(), hp::kl(&half, &half), Some(0.0)),
        ("kl half||skew", kl_div(&f(&half), &f(&skew), d).unwrap(), hp::kl(&half, &skew), Some(0.510826)),
        ("kl skew||half", kl_div(&f(&skew), &f(&half), d).unwrap(), hp::kl(&skew, &half), Some(0.368064)),
        ("same identical", loss_same(&f(&mixed), &f(&mixed), d).unwrap(), hp::same(&mixed, &mixed), Some(0.0)),
        ("same half/skew", loss_same(&f(&half), &f(&skew), d).unwrap(), hp::same(&half, &skew), Some(0.878890)),
        ("same swapped", loss_same(&f(&skew), &f(&half), d).unwrap(), hp::same(&half, &skew), Some(0.878890)),
        ("diff identical", loss_diff(&f(&mixed), &f(&mixed), 2.0, d).unwrap(), hp::diff(&mixed, &mixed, 2), Some(4.0)),
        ("diff half/skew", loss_diff(&f(&half), &f(&skew), 2.0, d).unwrap(), hp::diff(&half, &skew, 2), Some(3.121110)),
        ("diff saturated", loss_diff(&f(&one_zero), &f(&zero_one), 2.0, d).unwrap(), hp::diff(&one_zero, &zero_one, 2), Some(0.0)),
        ("pair r=1 identical", pair_loss(&f(&mixed), &f(&mixed), 1, 2.0, d).unwrap(), hp::same(&mixed, &mixed), Some(0.0)),
        ("pair r=0 identical", pair_loss(&f(&mixed), &f(&mixed), 0, 2.0, d).unwrap(), hp::diff(&mixed, &mixed, 2), Some(4.0)),
        ("pair r=1 half/skew", pair_loss(&f(&half), &f(&skew), 1, 2.0, d).unwrap(), hp::same(&half, &skew), Some(0.878890)),
    ];

    // One instance, one distribution everywhere.
    let g = Grid::filled(1, 3, 1u16);
    let pixels: Vec<Pixel> = (0..3).map(|c| Pixel { row: 0, col: c, instance_id: 1 }).collect();
    let pm = prob_map(2, 1, 3, &vec![f(&mixed); 3]);
    let v = averaged_pair_loss(&pm, &enumerate_pairs(&pixels, &g).unwrap(), &flat_cfg()).unwrap();
    cases.push(("averaged single instance", v, hp::same(&mixed, &mixed), Some(0.0)));
    // A lone self-pair.
    let ps = PairSet {
        pixels: vec![pixels[0]],
        pairs: vec![Pair { a: 0, b: 0, relation: 1, distance: 0.0 }],
    };
    cases.push(("averaged self-pair", averaged_pair_loss(&pm, &ps, &flat_cfg()).unwrap(), hp::same(&mixed, &mixed), Some(0.0)));
    // Two pixels of different instances, both uniform: 2 self + 2 cross pairs.
    let mut g2 = Grid::filled(1, 2, 1u16);
    g2.set(0, 1, 2);
    let two = [Pixel { row: 0, col: 0, instance_id: 1 }, Pixel { row: 0, col: 1, instance_id: 2 }];
    let pm2 = prob_map(2, 1, 2, &vec![f(&half); 2]);
    let v = averaged_pair_loss(&pm2, &enumerate_pairs(&two, &g2).unwrap(), &flat_cfg()).unwrap();
    let oracle = (hp::same(&half, &half) * BigInt::from(2) + hp::diff(&half, &half, 2) * BigInt::from(2)) / BigInt::from(4);
    cases.push(("averaged two pixels", v, oracle, Some(2.0)));

    let bg = Grid::filled(1, 1, 0u16);
    let fg = Grid::filled(1, 1, 1u16);
    let v = background_loss(&prob_map(2, 1, 1, &[vec![1.0, 0.0]]), &bg, d).unwrap();
    cases.push(("background all-bg", v, hp::nll(&q(1, 1)), Some(0.0)));
    let v = background_loss(&prob_map(2, 1, 1, &[vec![0.8, 0.2]]), &bg, d).unwrap();
    cases.push(("background t0=0.8", v, hp::nll(&q(8, 10)), Some(0.223144)));
    let v = background_loss(&prob_map(3, 1, 1, &[vec![0.2, 0.5, 0.3]]), &fg, d).unwrap();
    cases.push(("background fg sum 0.8", v, hp::nll(&(q(5, 10) + q(3, 10))), Some(0.223144)));

    let sem_gt = Grid::filled(1, 1, 1u8);
    let one_hot = prob_map(3, 1, 1, &[vec![0.0, 1.0, 0.0]]);
    cases.push(("semantic one-hot", semantic_ce_loss(one_hot.tensor(), &sem_gt, d).unwrap(), hp::nll(&q(1, 1)), Some(0.0)));
    let uniform = prob_map(3, 1, 1, &[vec![1.0 / 3.0; 3]]);
    cases.push(("semantic uniform", semantic_ce_loss(uniform.tensor(), &sem_gt, d).unwrap(), hp::nll(&q(1, 3)), Some(1.098612)));
    let quarter = prob_map(3, 1, 1, &[vec![0.5, 0.25, 0.25]]);
    cases.push(("semantic p=0.25", semantic_ce_loss(quarter.tensor(), &sem_gt, d).unwrap(), hp::nll(&q(1, 4)), Some(1.386294)));

    let ctr_gt = Grid::filled(1, 1, [1.0, -1.0]);
    for (label, err, printed) in [("center exact", q(0, 1), 0.0), ("center err 0.5", q(1, 2), 0.0625), ("center err 2", q(2, 1), 0.75)] {
        let dx = err.to_f64().unwrap();
        let pred = Tensor::from_vec(&[2, 1, 1], vec![1.0 + dx, -1.0]).unwrap();
        let v = center_smooth_l1_loss(&pred, &ctr_gt, &fg).unwrap();
        let oracle = (hp::smooth_l1(&err) + hp::smooth_l1(&q(0, 1))) / BigInt::from(2);
        cases.push((label, v, oracle, Some(printed)));
    }

    let w = LossWeights { instance: 1.0, semantic: 0.1, center: 0.01 };
    let b = LossBreakdown::combine(2.0, 0.2, 1.0, 0.5, 4, &w);
    let oracle = hp::fixed(&(q(2, 1) + q(2, 10) + q(1, 10) * q(1, 1) + q(1, 100) * q(1, 2)));
    cases.push(("total weighted", b.l_total, oracle, Some(2.305)));

    // Perfect outputs on a real scene: only clamp terms remain.
    let scene = gen_shapes_scene(&SceneGenConfig { height: 32, width: 32, ..Default::default() }, 3).unwrap();
    let out = ground_truth_outputs(&scene, 2).unwrap();
    let targets = LossTargets::from_scene(&scene, 1);
    let sampler = SamplerConfig { per_instance_count: 10, ..Default::default() };
    let ps = build_pair_set(&scene.instances, &sampler, 5).unwrap();
    let cfg = LossConfig { n: scene.instance_count(), stride: 1, coloring: false, ..LossConfig::default() };
    let perfect = total_loss(&out.instance_probs, &out.semantic_probs, &out.center_pred, &targets, &ps, &cfg).unwrap();
    let clamp_only = hp::nll(&q(1, 1)) + hp::nll(&q(1, 1)) / BigInt::from(10);
    cases.push(("total perfect outputs", perfect.l_total, clamp_only, Some(0.0)));
    let ins_only = LossBreakdown::combine(0.7, 0.3, 5.0, 9.0, 1, &LossWeights { instance: 1.0, semantic: 0.0, center: 0.0 });
    ensure(ins_only.l_total == ins_only.l_ins, || "weights (1,0,0) do not give l_total = l_ins".into())?;

    let mut worst = 0.0f64;
    for (label, value, oracle, printed) in &cases {
        let o = hp::to_f64(oracle);
        let err = (value - o).abs();
        worst = worst.max(err);
        ensure(err <= TOL, || format!("{label}: implementation {value:.12} vs oracle {o:.12}"))?;
        if let Some(p) = printed {
            ensure((o - p).abs() <= PRINTED_TOL, || format!("{label}: oracle {o:.9} vs reference {p}"))?;
        }
    }
    Ok(format!("{} values, max |impl - oracle| = {worst:.2e} (tol {TOL:.0e})", cases.len()))
}

fn gradient_check() -> Outcome {
    const TOL: f64 = 1e-4;
    const MUTANT_MIN: f64 = 1e-2;
    let cfg = GradCheckConfig::default();
    ensure((cfg.net.height, cfg.net.width, cfg.net.channels, cfg.net.n) == (16, 16, 8, 4), || "unexpected model".into())?;
    let w = cfg.loss.weights;
    ensure(w.instance > 0.0 && w.semantic > 0.0 && w.center > 0.0, || "all heads must be weighted".into())?;
    let good = grad_check(&cfg).map_err(|e| e.to_string())?;
    ensure(good.max_rel_error <= TOL, || format!("max relative error {:.3e} > {TOL:e} at {:?}", good.max_rel_error, good.worst))?;
    let bad = grad_check(&GradCheckConfig { fault: Some(Fault::ReluPassThrough), ..cfg.clone() }).map_err(|e| e.to_string())?;
    ensure(bad.max_rel_error > MUTANT_MIN, || format!("corrupted ReLU backward only reached {:.3e}", bad.max_rel_error))?;
    Ok(format!(
        "max rel error {:.2e} over {} coords ({} kink-crossing skipped); corrupted ReLU gives {:.2e}",
        good.max_rel_error, good.checked, good.skipped_nonsmooth, bad.max_rel_error
    ))
}

fn random_prob_map(rng: &mut impl rand::Rng, k: usize, h: usize, w: usize) -> ProbMap {
    let mut t = Tensor::zeros(&[k, h, w]);
    for p in 0..h * w {
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (c, l) in logits.iter().enumerate() {
            t.data_mut()[c * h * w + p] = l.exp() / z;
        }
    }
    ProbMap::new(t).unwrap()
}

fn fuzz_scene(rng: &mut impl rand::Rng) -> Scene {
    let cfg = SceneGenConfig { min_instances: 1, max_instances: rng.random_range(2..=6), ..Default::default() };
    gen_shapes_scene(&cfg, rng.random()).unwrap()
}

fn quotient_invariance() -> Outcome {
    const TOL: f64 = 1e-12;
    const SCENES: usize = 100;
    let mut rng = seeded(31);
    let cfg = LossConfig::default();
    let sampler = SamplerConfig { per_instance_count: 12, ..Default::default() };
    let (mut worst_id, mut worst_ch) = (0.0f64, 0.0f64);
    for _ in 0..SCENES {
        let scene = fuzz_scene(&mut rng);
        let (h, w) = (scene.height() / cfg.stride, scene.width() / cfg.stride);
        let pm = random_prob_map(&mut rng, cfg.n + 1, h, w);
        let ps = build_pair_set(&scene.instances, &sampler, rng.random()).unwrap();
        let base = averaged_pair_loss(&pm, &ps, &cfg).unwrap();

        let m = scene.instance_count() as u16;
        let mut perm: Vec<u16> = (1..=m).collect();
        perm.shuffle(&mut rng);
        let relabel = |id: u16| if id == 0 { 0 } else { perm[id as usize - 1] };
        let map = scene.instances.map(|&v| relabel(v));
        let pixels: Vec<Pixel> = ps.pixels.iter().map(|p| Pixel { instance_id: relabel(p.instance_id), ..*p }).collect();
        let permuted = enumerate_pairs(&pixels, &map).unwrap();
        worst_id = worst_id.max((averaged_pair_loss(&pm, &permuted, &cfg).unwrap() - base).abs());

        let mut chans: Vec<usize> = (1..=cfg.n).collect();
        chans.shuffle(&mut rng);
        let src = pm.tensor();
        let mut t = src.clone();
        for (dst, &from) in chans.iter().enumerate() {
            let len = h * w;
            t.data_mut()[(dst + 1) * len..(dst + 2) * len].copy_from_slice(&src.data()[from * len..(from + 1) * len]);
        }
        let pm2 = ProbMap::new(t).unwrap();
        worst_ch = worst_ch.max((averaged_pair_loss(&pm2, &ps, &cfg).unwrap() - base).abs());
    }
    ensure(worst_id <= TOL, || format!("GT-ID permutation changed the loss by {worst_id:e}"))?;
    ensure(worst_ch <= TOL, || format!("channel permutation changed the loss by {worst_ch:e}"))?;
    Ok(format!("{SCENES} scenes: max |Δ| {worst_id:.1e} (IDs), {worst_ch:.1e} (channels); tol {TOL:.0e}"))
}

fn is_subsequence(small: &[Pair], big: &[Pair]) -> bool {
    let mut it = big.iter();
    small.iter().all(|p| it.any(|q| q == p))
}

fn epsilon_consistency() -> Outcome {
    const SCENES: usize = 100;
    let eps = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, f64::INFINITY];
    let mut rng = seeded(47);
    let cfg = LossConfig::default();
    let mut checked = 0;
    for _ in 0..SCENES {
        let scene = fuzz_scene(&mut rng);
        let pm = random_prob_map(&mut rng, cfg.n + 1, scene.height() / 4, scene.width() / 4);
        let seed = rng.random();
        let sampler = SamplerConfig { per_instance_count: rng.random_range(1..=20), ..Default::default() };
        let full = build_pair_set(&scene.instances, &sampler, seed).unwrap();
        let unfiltered = averaged_pair_loss(&pm, &full, &cfg).unwrap();
        let inf = filter_pairs(&full, f64::INFINITY);
        ensure(inf == full, || "filtering at ∞ dropped pairs".into())?;
        let filtered = averaged_pair_loss(&pm, &inf, &cfg).unwrap();
        ensure(filtered.to_bits() == unfiltered.to_bits(), || format!("{filtered:e} != {unfiltered:e} at ε = ∞"))?;
        let via_cfg = build_pair_set(&scene.instances, &SamplerConfig { epsilon: Some(f64::INFINITY), ..sampler }, seed).unwrap();
        ensure(averaged_pair_loss(&pm, &via_cfg, &cfg).unwrap().to_bits() == unfiltered.to_bits(), || {
            "sampler with ε = ∞ differs from the unfiltered loss".into()
        })?;
        let sets: Vec<PairSet> = eps.iter().map(|&e| filter_pairs(&full, e)).collect();
        for (e, pair) in eps.windows(2).zip(sets.windows(2)) {
            ensure(is_subsequence(&pair[0].pairs, &pair[1].pairs), || format!("pairs at ε={} not within ε={}", e[0], e[1]))?;
            ensure(pair[0].pairs.iter().all(|p| p.distance <= e[0]), || format!("pair beyond ε={}", e[0]))?;
            checked += 1;
        }
        for (&e, set) in eps.iter().zip(&sets) {
            let direct = build_pair_set(&scene.instances, &SamplerConfig { epsilon: Some(e), ..sampler }, seed).unwrap();
            ensure(direct == *set, || format!("sampler with ε={e} disagrees with filtering"))?;
        }
    }
    Ok(format!("{SCENES} scenes bit-exact at ε = ∞; {checked} nested ε pairs monotone"))
}

/// Mean held-out `l_pair` with fixed pair sets.
fn held_out_pair_loss(cfg: &TrainConfig, params: &ParameterStore, scenes: &[Scene]) -> f64 {
    let total: f64 = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let ps = step_pair_set(s, &cfg.sampler, 99, i).unwrap();
            evaluate_loss(cfg, params, s, &ps).unwrap().l_pair
        })
        .sum();
    total / scenes.len() as f64
}

fn shapes_training() -> Outcome {
    const MIN_AP50: f64 = 0.5;
    const MAX_RATIO: f64 = 0.5;
    const MAX_SECS: f64 = 20.0 * 60.0;
    let t = Instant::now();
    let cfg = config("shapes.json");
    let (s, n) = (&cfg.scene, &cfg.net);
    ensure((s.height, s.width, s.max_instances) == (64, 64, 4), || "preset is not 64×64 with ≤4 instances".into())?;
    ensure(n.n == 8 && n.channels == 16 && cfg.sampler.epsilon.is_none(), || "preset must use n=8, c=16, ε=∞".into())?;
    ensure(cfg.train.steps == 2000, || "preset must train 2000 steps".into())?;
    let train_set = dataset::generate(&cfg, cfg.seed, cfg.count).unwrap();
    let test_set = dataset::generate(&cfg, held_out_seed(&cfg), 50).unwrap();
    let tc = cfg.train_config();
    let l0 = held_out_pair_loss(&tc, &init_network(&tc.net).unwrap(), &test_set);
    let out = train(&tc, &train_set, cfg.train.steps, |_| {}).map_err(|e| e.to_string())?;
    let l1 = held_out_pair_loss(&tc, &out.params, &test_set);
    let (_, report) = evaluate(&cfg, &test_set, Source::Network(&out.params), EvalMode::Ap).unwrap();
    let ap50 = report.ap50.unwrap_or(0.0);
    let secs = t.elapsed().as_secs_f64();
    let summary = format!("AP50 {ap50:.3} (≥ {MIN_AP50}), held-out l_pair {l0:.3} → {l1:.3} = {:.1}% (≤ 50%), {secs:.0}s", 100.0 * l1 / l0);
    ensure(ap50 >= MIN_AP50 && l1 <= MAX_RATIO * l0 && secs <= MAX_SECS, || summary.clone())?;
    Ok(summary)
}

fn coloring_label_reuse() -> Outcome {
    const MAX_COLORS: usize = 4;
    const MIN_SHARE: f64 = 0.7;
    let cfg = config("coloring.json");
    let eps = cfg.sampler.epsilon.unwrap_or(f64::INFINITY);
    let s = &cfg.scene;
    ensure((s.height, s.width, s.min_instances, s.max_instances) == (64, 256, 10, 16), || "preset is not 64×256 with 10–16 instances".into())?;
    ensure(cfg.net.n == 4 && eps == 32.0, || "preset must use n=4 and ε=32".into())?;
    let train_set = dataset::generate(&cfg, cfg.seed, cfg.count).unwrap();
    let test_set = dataset::generate(&cfg, held_out_seed(&cfg), 50).unwrap();
    let mut max_chi = 0;
    for scene in train_set.iter().chain(&test_set) {
        let g = build_adjacency_graph(&scene.instances, eps).unwrap();
        match chromatic_number_bruteforce(&g, MAX_COLORS).unwrap() {
            Some(chi) => max_chi = max_chi.max(chi),
            None => return Err(format!("scene {} needs more than {MAX_COLORS} colours", scene.seed)),
        }
    }
    let out = train(&cfg.train_config(), &train_set, cfg.train.steps, |_| {}).map_err(|e| e.to_string())?;
    let pp = cfg.postprocess();
    let mut hits = 0;
    for scene in &test_set {
        let outputs = forward(&cfg.net(), &out.params, &scene.image).unwrap().outputs;
        let count = predict_instances(&outputs, &pp).unwrap().len() as i64;
        if (count - scene.instance_count() as i64).abs() <= 1 {
            hits += 1;
        }
    }
    let share = hits as f64 / test_set.len() as f64;
    let summary = format!(
        "max chromatic number {max_chi} over {} GT graphs (≤ {MAX_COLORS}); count within ±1 on {hits}/{} held-out scenes ({:.0}%, need 70%)",
        train_set.len() + test_set.len(),
        test_set.len(),
        100.0 * share
    );
    ensure(share >= MIN_SHARE, || summary.clone())?;
    Ok(summary)
}

fn lane_end_to_end() -> Outcome {
    const MIN_ACC: f64 = 0.85;
    const MAX_FP: f64 = 0.25;
    let cfg = config("lanes.json");
    let s = &cfg.scene;
    ensure((s.min_lanes, s.max_lanes, s.lane_width) == (3, 5, 10), || "preset must draw 3–5 lanes of width 10".into())?;
    ensure(cfg.net.n == 6, || "preset must use n = 6".into())?;
    let train_set = dataset::generate(&cfg, cfg.seed, cfg.count).unwrap();
    let test_set = dataset::generate(&cfg, held_out_seed(&cfg), 50).unwrap();
    let (_, gt) = evaluate(&cfg, &test_set, Source::GroundTruth, EvalMode::Lane).unwrap();
    let gt = gt.lane.unwrap();
    ensure(gt.accuracy == 1.0 && gt.fp == 0.0 && gt.fn_ == 0.0, || format!("GT passthrough scored {gt:?}"))?;
    let out = train(&cfg.train_config(), &train_set, cfg.train.steps, |_| {}).map_err(|e| e.to_string())?;
    let (_, report) = evaluate(&cfg, &test_set, Source::Network(&out.params), EvalMode::Lane).unwrap();
    let lane = report.lane.unwrap();
    let summary = format!(
        "accuracy {:.3} (≥ {MIN_ACC}), fp {:.3} (≤ {MAX_FP}), fn {:.3}; GT passthrough 1/0/0",
        lane.accuracy, lane.fp, lane.fn_
    );
    ensure(lane.accuracy >= MIN_ACC && lane.fp <= MAX_FP, || summary.clone())?;
    Ok(summary)
}

fn pixel_set(m: &Mask) -> HashSet<usize> {
    m.indices().collect()
}

fn iou(a: &HashSet<usize>, b: &HashSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// AP from scratch: every prefix of the ranking is re-matched on its own.
fn brute_force_ap(images: &[EvalImage], cat: u8, thr: f64) -> f64 {
    let mut ranked: Vec<(usize, &InstancePrediction, usize)> = Vec::new();
    for (i, im) in images.iter().enumerate() {
        for p in im.preds.iter().filter(|p| p.category == cat) {
            ranked.push((i, p, ranked.len()));
        }
    }
    ranked.sort_by(|a, b| {
        b.1.confidence
            .partial_cmp(&a.1.confidence)
            .unwrap()
            .then(b.1.mask.area().cmp(&a.1.mask.area()))
            .then(a.2.cmp(&b.2))
    });
    let gts: Vec<Vec<HashSet<usize>>> =
        images.iter().map(|im| im.gts.iter().filter(|g| g.category == cat).map(|g| pixel_set(&g.mask)).collect()).collect();
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    for k in 1..=ranked.len() {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for (img, pred, _) in &ranked[..k] {
            let pm = pixel_set(&pred.mask);
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[*img].iter().enumerate() {
                let v = iou(&pm, g);
                if !used[*img][j] && v >= thr && best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[*img][j] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / k as f64));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        area += (r - prev) * best;
        prev = r;
    }
    area
}

fn random_rect(rng: &mut impl rand::Rng, h: usize, w: usize) -> Mask {
    let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
    let (r1, c1) = (rng.random_range(r0..h), rng.random_range(c0..w));
    Mask::from_indices(h, w, (r0..=r1).flat_map(|r| (c0..=c1).map(move |c| r * w + c))).unwrap()
}

fn flood_fill(ids: &Grid<u16>) -> Vec<(u16, Vec<usize>)> {
    let (h, w) = ids.shape();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        let color = ids.as_slice()[start];
        if color == 0 || seen[start] {
            continue;
        }
        let mut pixels = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (r, c) = ((p / w) as i64, (p % w) as i64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if !seen[q] && ids.as_slice()[q] == color {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        pixels.sort_unstable();
        out.push((color, pixels));
    }
    out
}

fn colorable(g: &AdjacencyGraph, k: usize, colors: &mut Vec<usize>) -> bool {
    let v = colors.len();
    if v == g.vertex_count() {
        return true;
    }
    for c in 0..k {
        if g.neighbors(v).iter().all(|&u| u >= v || colors[u] != c) {
            colors.push(c);
            if colorable(g, k, colors) {
                return true;
            }
            colors.pop();
        }
    }
    false
}

fn metric_oracles() -> Outcome {
    const AP_FIXTURES: usize = 400;
    const ID_MAPS: usize = 1000;
    const GRAPHS: usize = 200;
    let mut rng = seeded(59);

    let mut ap_checks = 0;
    for _ in 0..AP_FIXTURES {
        let (h, w) = (6, 6);
        let n_images = rng.random_range(1..=2);
        let mut budget = rng.random_range(0..=5);
        let mut images = Vec::new();
        for _ in 0..n_images {
            let k = rng.random_range(0..=budget);
            budget -= k;
            let preds = (0..k)
                .map(|_| InstancePrediction {
                    mask: random_rect(&mut rng, h, w),
                    category: rng.random_range(1..=2),
                    confidence: *[0.2, 0.5, 0.5, 0.8, 0.9].choose(&mut rng).unwrap(),
                })
                .collect();
            let gts = (0..rng.random_range(0..=3))
                .map(|_| GtInstance { mask: random_rect(&mut rng, h, w), category: rng.random_range(1..=2) })
                .collect();
            images.push(EvalImage { preds, gts });
        }
        for &thr in &AP_THRESHOLDS {
            for (cat, ap) in average_precision(&images, thr).unwrap() {
                let expected = brute_force_ap(&images, cat, thr);
                ensure((ap - expected).abs() <= 1e-12, || format!("AP {ap} vs brute force {expected} at IoU {thr}"))?;
                ap_checks += 1;
            }
        }
    }

    for _ in 0..ID_MAPS {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let colors = rng.random_range(1..=4u16);
        let ids = Grid::from_vec(h, w, (0..h * w).map(|_| rng.random_range(0..=colors)).collect()).unwrap();
        let segs = connected_components(&ids);
        let expected = flood_fill(&ids);
        ensure(segs.len() == expected.len(), || format!("{} components vs {} by flood fill", segs.len(), expected.len()))?;
        for (s, (color, pixels)) in segs.iter().zip(&expected) {
            let got: Vec<usize> = s.mask.indices().collect();
            ensure(s.color_id == *color && got == *pixels && s.size == pixels.len(), || "component differs from flood fill".into())?;
        }
    }

    let mut max_chi = 0;
    for _ in 0..GRAPHS {
        let n = rng.random_range(1..=10);
        let p: f64 = rng.random_range(0.0..1.0);
        let edges: Vec<(usize, usize)> =
            (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).filter(|_| rng.random_bool(p)).collect();
        let g = AdjacencyGraph::from_edges(n, &edges).unwrap();
        let chi = chromatic_number_bruteforce(&g, n).unwrap().unwrap();
        ensure(chi <= g.max_degree() + 1, || format!("χ = {chi} exceeds Δ + 1 = {}", g.max_degree() + 1))?;
        ensure(colorable(&g, chi, &mut Vec::new()), || format!("no proper {chi}-colouring exists"))?;
        ensure(chi == 1 || !colorable(&g, chi - 1, &mut Vec::new()), || format!("{} colours already suffice", chi - 1))?;
        max_chi = max_chi.max(chi);
    }
    Ok(format!(
        "{ap_checks} AP values equal brute force; {ID_MAPS} ID maps equal flood fill; {GRAPHS} graphs within Δ+1 (max χ {max_chi})"
    ))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pixclust")).args(args).env_remove("PXC_SEED").output().unwrap();
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("pixclust {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn pipeline_determinism() -> Outcome {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.json");
    let cfg = cfg.to_str().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let root = tmp.path().join(run);
        let p = |s: &str| root.join(s).display().to_string();
        run_cli(&["gen", "--config", cfg, "--out", &p("data"), "--seed", "11"])?;
        run_cli(&["train", "--config", cfg, "--data", &p("data"), "--out", &p("run"), "--seed", "11", "--steps", "40"])?;
        let ckpt = p("run/checkpoint.pxc");
        run_cli(&["infer-eval", "--config", cfg, "--ckpt", &ckpt, "--data", &p("data"), "--mode", "ap", "--out", &p("eval")])?;
    }
    let (a, b) = (files(&tmp.path().join("a")), files(&tmp.path().join("b")));
    ensure(a.len() == b.len() && a.iter().map(|f| &f.0).eq(b.iter().map(|f| &f.0)), || "runs wrote different file sets".into())?;
    for (fa, fb) in a.iter().zip(&b) {
        ensure(fa.1 == fb.1, || format!("{} differs between runs", fa.0))?;
    }
    ensure(a.iter().any(|f| f.0.ends_with("checkpoint.pxc")) && a.iter().any(|f| f.0.ends_with("report.json")), || {
        "checkpoint or report missing".into()
    })?;
    let bytes: usize = a.iter().map(|f| f.1.len()).sum();
    Ok(format!("{} files ({bytes} bytes) byte-identical across two gen → train → infer-eval runs", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("loss_oracles", loss_oracles),
        ("gradient_check", gradient_check),
        ("quotient_invariance", quotient_invariance),
        ("epsilon_consistency", epsilon_consistency),
        ("shapes_training", shapes_training),
        ("coloring_label_reuse", coloring_label_reuse),
        ("lane_end_to_end", lane_end_to_end),
        ("metric_oracles", metric_oracles),
        ("pipeline_determinism", pipeline_determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("PASS {}. {name} ({secs:.1}s): {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {}. {name} ({secs:.1}s): {msg}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
