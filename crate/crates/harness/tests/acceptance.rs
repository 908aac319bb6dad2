//! Acceptance checks. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use mlr_core::bench::{lifelong_metrics, SuccessMatrix};
use mlr_core::geometry::{adaptive_margin, angular_distance, cosine_similarity, Embedding};
use mlr_core::ifa::{
    ifa_loss, modality_similarity, select_pairs, IfaConfig, PairSet, ReferenceRegistry, TaskId, TaskLatents,
};
use mlr_core::mlr::{BufferConfig, BufferEntry, LatentSequence, RawObservationDims, ReplayBuffer};
use mlr_core::policy::{Gradients, HeadMode, Layer, Phase, PolicyConfig, PolicyParams, StepFeatures};
use mlr_core::trainer::{batch_objective, BatchInput, IfaTerm};
use mlr_harness::{run_ablation, run_experiment, AblationKind, ExperimentConfig, Method, PretrainCache, SeedResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    format!("{e:#}")
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Box-Muller keeps this file free of a distribution dependency
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(1e-12..1.0);
            let v: f64 = rng.gen();
            (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
        })
        .collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = gaussian_vec(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn embedding(rng: &mut ChaCha8Rng, n: usize) -> Embedding {
    Embedding::new(gaussian_vec(rng, n).into_iter().map(|v| v as f32).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

fn geometry_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let n = rng.gen_range(2..=16);
        let (a, b, c) = (unit_vec(&mut rng, n), unit_vec(&mut rng, n), unit_vec(&mut rng, n));
        let d_ab = angular_distance(&a, &b).map_err(err)?;
        let d_ba = angular_distance(&b, &a).map_err(err)?;
        let d_bc = angular_distance(&b, &c).map_err(err)?;
        let d_ac = angular_distance(&a, &c).map_err(err)?;
        ensure(d_ab == d_ba, || format!("asymmetric: {d_ab} vs {d_ba}"))?;
        ensure((0.0..=std::f64::consts::PI).contains(&d_ab), || format!("out of range: {d_ab}"))?;
        ensure(d_ac <= d_ab + d_bc + 1e-12, || format!("triangle: {d_ac} > {d_ab} + {d_bc}"))?;
        let scale: f64 = 10f64.powf(rng.gen_range(-3.0..3.0));
        let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();
        let d_scaled = angular_distance(&scaled, &b).map_err(err)?;
        ensure((d_scaled - d_ab).abs() <= 1e-9, || {
            format!("scale {scale} moved the angle by {}", (d_scaled - d_ab).abs())
        })?;
    }
    for _ in 0..1_000 {
        let n = rng.gen_range(2..=32);
        let (h_k, h_j) = (unit_vec(&mut rng, n), unit_vec(&mut rng, n));
        let alpha: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
        let d = angular_distance(&h_k, &h_j).map_err(err)?;
        let delta = adaptive_margin(&h_k, &h_j, alpha).map_err(err)?;
        ensure(delta < d, || format!("margin {delta} >= distance {d} at alpha {alpha}"))?;
    }
    // arccos resolution near cosine 1: a 1e-4 change of cosine moves the
    // angle by more than 1e-4 anywhere in [0.99, 1)
    let mut worst = f64::INFINITY;
    for i in 0..1_000 {
        let c = 0.99 + (1.0 - 1e-4 - 1e-7 - 0.99) * i as f64 / 999.0;
        let theta = c.acos();
        let c2 = c + 1e-4;
        let a = [1.0, 0.0];
        let b = [c, (1.0 - c * c).sqrt()];
        let b2 = [c2, (1.0 - c2 * c2).sqrt()];
        let shift = (angular_distance(&a, &b).map_err(err)? - angular_distance(&a, &b2).map_err(err)?).abs();
        ensure(shift > 1e-4, || format!("cos {c} (angle {theta}): angle moved only {shift}"))?;
        worst = worst.min(shift);
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(elapsed < 5.0, || format!("took {elapsed:.2}s"))?;
    Ok(format!(
        "10^4 triples, 10^3 margins, min resolution shift {worst:.2e}, {elapsed:.2}s"
    ))
}

// ---------------------------------------------------------------- 2

const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so components that are zero up
/// to finite-difference noise are compared absolutely.
const REL_FLOOR: f64 = 1e-4;

struct GradCase {
    params: PolicyParams<f64>,
    steps: Vec<StepFeatures<f64>>,
    latents: Vec<Vec<f64>>,
    targets: Vec<Vec<f32>>,
    refs: ReferenceRegistry,
    pairs: PairSet,
    ifa: IfaConfig,
}

const GC_WINDOW: usize = 3;
/// Row layout: windows of tasks 2, 3, 2; stored latents of tasks 3, 2 and
/// two replayed rows without a hinge tag.
const GC_WINDOW_TASKS: [TaskId; 3] = [2, 3, 2];
const GC_LATENT_TASKS: [Option<TaskId>; 4] = [Some(3), Some(2), None, None];

impl GradCase {
    fn input(&self) -> BatchInput<'_, f64> {
        let windows: Vec<Vec<&StepFeatures<f64>>> =
            self.steps.chunks(GC_WINDOW).map(|c| c.iter().collect()).collect();
        BatchInput {
            windows,
            latents: self.latents.iter().map(Vec::as_slice).collect(),
            targets: self.targets.iter().map(Vec::as_slice).collect(),
            ifa_tasks: GC_WINDOW_TASKS
                .iter()
                .map(|&t| Some(t))
                .chain(GC_LATENT_TASKS)
                .collect(),
        }
    }

    fn term(&self) -> IfaTerm<'_> {
        IfaTerm {
            references: &self.refs,
            pairs: &self.pairs,
            cfg: &self.ifa,
        }
    }

    fn objective(&self, params: &PolicyParams<f64>) -> f64 {
        batch_objective(params, &self.input(), Some(self.term()), None)
            .expect("objective")
            .loss_total
    }

    /// True when no hinge sits near its kink, no cosine is near ±1 and no
    /// log-std sits near its clamp, so finite differences see a smooth
    /// function.
    fn is_smooth(&self) -> bool {
        let input = self.input();
        let mut x = Vec::new();
        for w in &input.windows {
            x.extend(self.params.encode_steps(w).unwrap().0);
        }
        for l in &input.latents {
            x.extend_from_slice(l);
        }
        let dec = self.params.forward_decoder(x, input.rows()).unwrap();
        let mut hinges = 0;
        for (i, task) in input.ifa_tasks.iter().enumerate() {
            let Some(k) = *task else { continue };
            let g = dec.global(i);
            for (j, kk) in self.pairs.iter() {
                if kk != k {
                    continue;
                }
                let h_j = self.refs.get(j).unwrap().h_ref.as_slice();
                let h_k = self.refs.get(k).unwrap().h_ref.as_slice();
                for h in [h_j, h_k] {
                    if cosine_similarity(g, h).unwrap().abs() > 0.99 {
                        return false;
                    }
                }
                let hinge = angular_distance(g, h_k).unwrap() - angular_distance(g, h_j).unwrap()
                    + adaptive_margin(h_k, h_j, self.ifa.alpha).unwrap();
                if hinge.abs() < 1e-3 {
                    return false;
                }
                hinges += usize::from(hinge > 0.0);
            }
        }
        if self.params.cfg.head == HeadMode::Gmm {
            let (k, a) = (self.params.cfg.gmm_components, self.params.cfg.action_dim);
            for i in 0..input.rows() {
                let raw = dec.head_out(i);
                for &s in &raw[k + k * a..k + 2 * k * a] {
                    if (s + 5.0).abs() < 1e-3 || (s - 2.0).abs() < 1e-3 {
                        return false;
                    }
                }
            }
        }
        // at least one hinge must be active or the IFA path goes untested
        hinges > 0
    }
}

fn grad_case(rng: &mut ChaCha8Rng, head: HeadMode) -> GradCase {
    loop {
        let cfg = PolicyConfig {
            view: 3,
            state_dim: 3,
            embed: 6,
            window: GC_WINDOW,
            hidden: 7,
            action_dim: 2,
            head,
            gmm_components: 3,
        };
        let table: Vec<Embedding> = (0..4).map(|_| embedding(rng, cfg.embed)).collect();
        let mut params = PolicyParams::<f64>::new(cfg.clone(), &table, rng.gen()).unwrap();
        // spread the weights out so the FiLM and hidden paths matter
        for l in Layer::ALL {
            let d = params.layer_mut(l);
            let scale = 1.5 / (d.n_in as f64).sqrt();
            d.w.iter_mut().for_each(|w| *w = rng.gen_range(-scale..scale));
            d.b.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        }
        let steps = GC_WINDOW_TASKS
            .iter()
            .flat_map(|&t| std::iter::repeat_n(t, GC_WINDOW))
            .map(|t| StepFeatures {
                agent: gaussian_vec(rng, cfg.embed).iter().map(|v| v * 0.5).collect(),
                eye: gaussian_vec(rng, cfg.embed).iter().map(|v| v * 0.5).collect(),
                state: gaussian_vec(rng, cfg.state_dim),
                lang: t,
            })
            .collect::<Vec<_>>();
        let d_in = cfg.latent_shape().len();
        let latents = GC_LATENT_TASKS.iter().map(|_| gaussian_vec(rng, d_in)).collect();
        let rows = GC_WINDOW_TASKS.len() + GC_LATENT_TASKS.len();
        let targets = (0..rows)
            .map(|_| (0..cfg.action_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let mut refs = ReferenceRegistry::new();
        for t in 0..4 {
            refs.register(t, &embedding(rng, cfg.embed), 1).unwrap();
        }
        let pairs: PairSet = [(0, 2), (1, 2), (0, 3), (1, 3)].into_iter().collect();
        let ifa = IfaConfig {
            alpha: rng.gen_range(0.1..0.7),
            lambda_ifa: rng.gen_range(0.1..1.0),
            ..IfaConfig::default()
        };
        let case = GradCase {
            params,
            steps,
            latents,
            targets,
            refs,
            pairs,
            ifa,
        };
        if case.is_smooth() {
            return case;
        }
    }
}

fn param_mut(p: &mut PolicyParams<f64>, layer: Layer, is_bias: bool, i: usize) -> &mut f64 {
    let d = p.layer_mut(layer);
    if is_bias {
        &mut d.b[i]
    } else {
        &mut d.w[i]
    }
}

/// Max relative error between analytic and central-difference gradients
/// over every trainable parameter of `phase`.
fn grad_error(case: &GradCase, phase: Phase) -> Result<(f64, usize), String> {
    let mut grads = Gradients::zeros(&case.params, phase);
    batch_objective(&case.params, &case.input(), Some(case.term()), Some(&mut grads)).map_err(err)?;
    let mut params = case.params.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for &layer in phase.trainable() {
        let analytic = grads.get(layer).expect("trainable layer has gradients");
        for (is_bias, n) in [(false, analytic.w.len()), (true, analytic.b.len())] {
            for i in 0..n {
                let orig = *param_mut(&mut params, layer, is_bias, i);
                *param_mut(&mut params, layer, is_bias, i) = orig + FD_STEP;
                let plus = case.objective(&params);
                *param_mut(&mut params, layer, is_bias, i) = orig - FD_STEP;
                let minus = case.objective(&params);
                *param_mut(&mut params, layer, is_bias, i) = orig;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let a = if is_bias { analytic.b[i] } else { analytic.w[i] };
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                if rel > worst {
                    worst = rel;
                }
                checked += 1;
            }
        }
    }
    Ok((worst, checked))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut summary = Vec::new();
    for head in [HeadMode::Mse, HeadMode::Gmm] {
        let mut worst = 0.0f64;
        let mut total = 0;
        for _ in 0..20 {
            let case = grad_case(&mut rng, head);
            for phase in [Phase::Pretrain, Phase::Lifelong] {
                let (e, n) = grad_error(&case, phase)?;
                worst = worst.max(e);
                total += n;
            }
        }
        ensure(worst < 1e-4, || format!("{head:?}: max relative error {worst:.3e}"))?;
        summary.push(format!("{head:?} max rel err {worst:.2e} over {total} params"));
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(elapsed < 60.0, || format!("took {elapsed:.1}s"))?;
    Ok(format!("{}, {elapsed:.1}s", summary.join("; ")))
}

// ---------------------------------------------------------------- 3

fn brute_similarity(a: &[Embedding], b: &[Embedding]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            let (x, y) = (x.as_slice(), y.as_slice());
            let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
            let nx = x.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
            let ny = y.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
            total += dot / (nx * ny);
        }
    }
    total / (a.len() * b.len()) as f64
}

/// Exhaustive ranking: score every unordered pair in both modalities, keep
/// the top `⌈f·P⌉` of each, intersect, and orient old/new crossings.
fn oracle_pairs(
    old: &BTreeSet<TaskId>,
    new: &BTreeSet<TaskId>,
    latents: &BTreeMap<TaskId, TaskLatents>,
    f: f64,
) -> BTreeSet<(TaskId, TaskId)> {
    let tasks: Vec<TaskId> = old.union(new).copied().collect();
    let mut all = Vec::new();
    for a in &tasks {
        for b in &tasks {
            if a < b {
                all.push((*a, *b));
            }
        }
    }
    let keep = (f * all.len() as f64).ceil() as usize;
    let top = |pick: fn(&TaskLatents) -> &Vec<Embedding>| -> BTreeSet<(TaskId, TaskId)> {
        let mut scored: Vec<((TaskId, TaskId), f64)> = all
            .iter()
            .map(|&(a, b)| ((a, b), brute_similarity(pick(&latents[&a]), pick(&latents[&b]))))
            .collect();
        scored.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        scored.into_iter().take(keep).map(|(p, _)| p).collect()
    };
    let agent = top(|l| &l.agent_view);
    let language = top(|l| &l.language);
    let mut out = BTreeSet::new();
    for &(a, b) in agent.intersection(&language) {
        if old.contains(&a) && new.contains(&b) {
            out.insert((a, b));
        } else if new.contains(&a) && old.contains(&b) {
            out.insert((b, a));
        }
    }
    out
}

/// Success-matrix metrics written with 1-indexed task positions.
fn oracle_metrics(r: &[Vec<f64>]) -> (f64, f64, f64) {
    let big_m = r.len();
    let at = |i: usize, j: usize| r[i - 1][j - 1];
    let mut fwt = 0.0;
    for m in 1..=big_m {
        fwt += at(m, m);
    }
    fwt /= big_m as f64;
    let mut nbt = 0.0;
    if big_m > 1 {
        for m in 1..big_m {
            let mut s = 0.0;
            for q in (m + 1)..=big_m {
                s += at(m, m) - at(q, m);
            }
            nbt += s / (big_m - m) as f64;
        }
        nbt /= (big_m - 1) as f64;
    }
    let mut auc = 0.0;
    for m in 1..=big_m {
        let mut s = at(m, m);
        for q in (m + 1)..=big_m {
            s += at(q, m);
        }
        auc += s / (big_m - m + 1) as f64;
    }
    auc /= big_m as f64;
    (fwt, nbt, auc)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut nonempty = 0;
    let mut sim_err = 0.0f64;
    for _ in 0..100 {
        let n_tasks = rng.gen_range(2..=12);
        let dim = rng.gen_range(3..=8);
        let n_old = rng.gen_range(1..n_tasks);
        let old: BTreeSet<TaskId> = (0..n_old).collect();
        let new: BTreeSet<TaskId> = (n_old..n_tasks).collect();
        let latents: BTreeMap<TaskId, TaskLatents> = (0..n_tasks)
            .map(|t| {
                let n_agent = rng.gen_range(1..=5);
                let n_lang = rng.gen_range(1..=3);
                let l = TaskLatents {
                    agent_view: (0..n_agent).map(|_| embedding(&mut rng, dim)).collect(),
                    language: (0..n_lang).map(|_| embedding(&mut rng, dim)).collect(),
                };
                (t, l)
            })
            .collect();
        let f = [0.333, 0.5, 0.666, rng.gen_range(0.05..1.0)][rng.gen_range(0..4)];
        let got: BTreeSet<_> = select_pairs(&old, &new, &latents, f).map_err(err)?.iter().collect();
        let want = oracle_pairs(&old, &new, &latents, f);
        ensure(got == want, || format!("{n_tasks} tasks, f={f}: got {got:?}, oracle {want:?}"))?;
        nonempty += usize::from(!got.is_empty());
        for a in latents.values() {
            for b in latents.values() {
                let lib = modality_similarity(&a.agent_view, &b.agent_view).map_err(err)?;
                sim_err = sim_err.max((lib - brute_similarity(&a.agent_view, &b.agent_view)).abs());
            }
        }
    }
    ensure(sim_err <= 1e-12, || format!("modality_similarity off by {sim_err:.3e}"))?;

    let mut metric_err = 0.0f64;
    for _ in 0..100 {
        let m = rng.gen_range(1..=10);
        let rows: Vec<Vec<f32>> = (0..m).map(|i| (0..=i).map(|_| rng.gen::<f32>()).collect()).collect();
        let lib = lifelong_metrics(&SuccessMatrix::from_rows((0..m).collect(), &rows).map_err(err)?).map_err(err)?;
        let wide: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let (fwt, nbt, auc) = oracle_metrics(&wide);
        metric_err = metric_err
            .max((lib.fwt - fwt).abs())
            .max((lib.nbt - nbt).abs())
            .max((lib.auc - auc).abs());
    }
    let hand_rows = vec![vec![0.8f32], vec![0.6, 0.9]];
    let hand = lifelong_metrics(&SuccessMatrix::from_rows(vec![0, 1], &hand_rows).map_err(err)?).map_err(err)?;
    let wide: Vec<Vec<f64>> = hand_rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let (fwt, nbt, auc) = oracle_metrics(&wide);
    metric_err = metric_err
        .max((hand.fwt - fwt).abs())
        .max((hand.nbt - nbt).abs())
        .max((hand.auc - auc).abs());
    ensure(metric_err <= 1e-12, || format!("lifelong_metrics off by {metric_err:.3e}"))?;
    // success rates are stored as f32, so the decimal hand values are only
    // representable to f32 precision
    let hand_err = (hand.fwt - 0.85).abs().max((hand.nbt - 0.2).abs()).max((hand.auc - 0.8).abs());
    ensure(hand_err < 1e-6, || format!("hand case off by {hand_err:.3e}: {hand:?}"))?;
    Ok(format!(
        "100 suites ({nonempty} with pairs), similarity err {sim_err:.1e}, metrics err {metric_err:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

/// Smallest reference separation at which the anchor is exactly zero:
/// with the arccos clamp, `d(h, h) = arccos(1 − 1e-7)`, so the own-reference
/// hinge `d(h_k, h_k) − (1 − α)·d(h_k, h_j)` is non-positive only when
/// `d(h_k, h_j) ≥ arccos(1 − 1e-7) / (1 − α)`.
fn anchor_resolution(alpha: f64) -> f64 {
    (1.0 - 1e-7f64).acos() / (1.0 - alpha)
}

fn ifa_anchor() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = IfaConfig {
        alpha: 0.3,
        ..IfaConfig::default()
    };
    let resolution = anchor_resolution(cfg.alpha);
    let mut configurations = 0;
    let mut redrawn = 0;
    while configurations < 500 {
        let n_tasks = rng.gen_range(2..=8);
        let dim = rng.gen_range(2..=16);
        let refs_raw: Vec<Embedding> = (0..n_tasks).map(|_| embedding(&mut rng, dim)).collect();
        let separated = refs_raw.iter().enumerate().all(|(i, a)| {
            refs_raw[i + 1..]
                .iter()
                .all(|b| angular_distance(a.as_slice(), b.as_slice()).unwrap() > resolution)
        });
        if !separated {
            redrawn += 1;
            continue;
        }
        let mut refs = ReferenceRegistry::new();
        for (t, h) in refs_raw.iter().enumerate() {
            refs.register(t, h, 1).map_err(err)?;
        }
        let mut pairs = PairSet::new();
        for j in 0..n_tasks {
            for k in 0..n_tasks {
                if j != k && rng.gen_bool(0.5) {
                    pairs.insert(j, k);
                }
            }
        }
        let globals: Vec<(Vec<f32>, TaskId)> = (0..rng.gen_range(1..=10))
            .map(|_| {
                let k = rng.gen_range(0..n_tasks);
                (refs.get(k).unwrap().h_ref.as_slice().to_vec(), k)
            })
            .collect();
        let out = ifa_loss(&globals, &refs, &pairs, &cfg).map_err(err)?;
        ensure(out.loss == 0.0, || format!("loss {} with g on its own reference", out.loss))?;
        configurations += 1;
    }
    let mut refs = ReferenceRegistry::new();
    refs.register(0, &Embedding::new(vec![1.0, 0.0]).unwrap(), 1).map_err(err)?;
    refs.register(1, &Embedding::new(vec![0.0, 1.0]).unwrap(), 1).map_err(err)?;
    let pairs: PairSet = [(1, 0)].into_iter().collect();
    let g = vec![(vec![1.0f64, 1.0], 0usize)];
    let out = ifa_loss(&g, &refs, &pairs, &cfg).map_err(err)?;
    let want = 0.3 * std::f64::consts::FRAC_PI_2;
    ensure((out.loss - want).abs() <= 1e-9, || format!("equidistant case {} vs {want}", out.loss))?;
    Ok(format!(
        "{configurations} configurations at exactly 0 ({redrawn} draws with references closer than \
         {resolution:.2e} rad redrawn), equidistant case {:.12}",
        out.loss
    ))
}

// ---------------------------------------------------------------- 5-7

/// Training budget used for the full-suite comparisons; see the README.
const PRETRAIN_EPOCHS: usize = 3;
const LIFELONG_EPOCHS: usize = 20;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Comparison {
    /// Per method, per seed.
    results: BTreeMap<&'static str, Vec<SeedResult>>,
    seconds_per_seed: Vec<f64>,
}

fn compare_methods(root: &Path) -> Result<Comparison, String> {
    let mut cache = PretrainCache::default();
    let mut results: BTreeMap<&'static str, Vec<SeedResult>> = BTreeMap::new();
    let mut seconds_per_seed = Vec::new();
    for seed in SEEDS {
        let start = Instant::now();
        for method in [Method::Sequential, Method::Mlr, Method::MlrIfa] {
            let mut cfg = ExperimentConfig::default();
            cfg.pretrain.epochs = PRETRAIN_EPOCHS;
            cfg.lifelong.epochs = LIFELONG_EPOCHS;
            cfg.method = method;
            cfg.seeds = vec![seed];
            cfg.output_dir = root.join(format!("{}_seed{seed}", method.name()));
            let mut summary = run_experiment(&cfg, &mut cache).map_err(err)?;
            results.entry(method.name()).or_default().push(summary.seeds.remove(0));
        }
        seconds_per_seed.push(start.elapsed().as_secs_f64());
    }
    Ok(Comparison {
        results,
        seconds_per_seed,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

impl Comparison {
    fn mean_nbt(&self, method: &str) -> f64 {
        mean(self.results[method].iter().map(|r| r.metrics.nbt))
    }

    fn mean_auc(&self, method: &str) -> f64 {
        mean(self.results[method].iter().map(|r| r.metrics.auc))
    }

    fn per_seed(&self, method: &str) -> String {
        let v: Vec<String> = self.results[method]
            .iter()
            .map(|r| format!("{:.3}/{:.3}", r.metrics.nbt, r.metrics.auc))
            .collect();
        v.join(" ")
    }
}

fn forgetting_reduction(c: &Comparison) -> Outcome {
    let (seq, mlr) = (c.mean_nbt("sequential"), c.mean_nbt("mlr"));
    let slowest = c.seconds_per_seed.iter().copied().fold(0.0, f64::max);
    let detail = format!(
        "NBT sequential {seq:.3} vs mlr {mlr:.3} (ratio {:.2}); slowest seed {slowest:.0}s for 3 methods",
        seq / mlr
    );
    ensure(seq >= 1.5 * mlr, || detail.clone())?;
    ensure(slowest < 300.0, || detail.clone())?;
    Ok(detail)
}

fn ifa_benefit(c: &Comparison) -> Outcome {
    let (nbt_mlr, nbt_ifa) = (c.mean_nbt("mlr"), c.mean_nbt("mlr_ifa"));
    let (auc_mlr, auc_ifa) = (c.mean_auc("mlr"), c.mean_auc("mlr_ifa"));
    let detail = format!(
        "NBT mlr {nbt_mlr:.3} vs mlr_ifa {nbt_ifa:.3}; AUC mlr {auc_mlr:.3} vs mlr_ifa {auc_ifa:.3} \
         (per seed nbt/auc: mlr [{}], mlr_ifa [{}])",
        c.per_seed("mlr"),
        c.per_seed("mlr_ifa")
    );
    ensure(nbt_ifa <= nbt_mlr && auc_ifa >= auc_mlr - 0.01, || detail.clone())?;
    Ok(detail)
}

/// Compares task k's similarity to h_j after the last stage, with and
/// without IFA, for every pair selected in any stage.
fn separation_direction(c: &Comparison) -> Outcome {
    let mut checked = 0;
    let mut failures = Vec::new();
    let (mut sum_ifa, mut sum_mlr) = (0.0, 0.0);
    // the same comparison right after the stage that selected the pair,
    // reported for context only
    let mut stagewise_lower = 0;
    for (ifa, plain) in c.results["mlr_ifa"].iter().zip(&c.results["mlr"]) {
        for (s, stage) in ifa.stages.iter().enumerate() {
            ensure(stage.pairs == plain.stages[s].pairs, || {
                format!("seed {} stage {}: pair sets differ between runs", ifa.seed, s + 1)
            })?;
            for &(j, k) in &stage.pairs {
                let missing = || format!("seed {} pair ({j},{k}): missing separation entry", ifa.seed);
                let with = ifa.final_separation.get(k, j).ok_or_else(missing)?;
                let without = plain.final_separation.get(k, j).ok_or_else(missing)?;
                let stage_with = ifa.stage_separation[s].get(k, j).ok_or_else(missing)?;
                let stage_without = plain.stage_separation[s].get(k, j).ok_or_else(missing)?;
                stagewise_lower += usize::from(stage_with < stage_without);
                sum_ifa += with;
                sum_mlr += without;
                checked += 1;
                if with >= without {
                    failures.push(format!("seed {} pair ({j},{k}): {with:.4} >= {without:.4}", ifa.seed));
                }
            }
        }
    }
    ensure(checked > 0, || "no pairs were selected".into())?;
    let detail = format!(
        "{checked} pairs, mean similarity to the other reference {:.4} with IFA vs {:.4} without; \
         {stagewise_lower}/{checked} also lower right after their stage",
        sum_ifa / checked as f64,
        sum_mlr / checked as f64
    );
    ensure(failures.is_empty(), || format!("{detail}; violations: {}", failures.join(", ")))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn memory_claim() -> Outcome {
    let policy = PolicyConfig::default();
    let shape = policy.latent_shape();
    let mut buffer = ReplayBuffer::new(BufferConfig {
        shape,
        action_dim: policy.action_dim,
        per_task_capacity: 200,
        store_probability: 1.0,
        raw: RawObservationDims {
            view: policy.view,
            state_dim: policy.state_dim,
        },
        seed: 8,
    })
    .map_err(err)?;
    let (latent, raw) = (buffer.bytes_per_entry(), buffer.raw_bytes_per_entry());
    ensure(latent == 8208 && raw == 65_920, || format!("per window: latent {latent}, raw {raw}"))?;
    ensure(latent < raw, || "latent windows are not smaller".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 37;
    for i in 0..n {
        let data: Vec<f32> = (0..shape.len()).map(|_| rng.gen()).collect();
        let task = i % 3;
        let entry = BufferEntry {
            latent: LatentSequence::new(shape, data, task, i).map_err(err)?,
            action: vec![0.0; policy.action_dim],
            task_id: task,
        };
        buffer.offer(entry).map_err(err)?;
    }
    let stats = buffer.memory_stats();
    let stored: usize = stats.entries_per_task.values().sum();
    ensure(stored == n, || format!("{stored} of {n} entries stored"))?;
    ensure(
        stats.total_bytes_latent == n as u64 * 8208 && stats.equivalent_raw_bytes == n as u64 * 65_920,
        || format!("memory_stats {stats:?}"),
    )?;
    Ok(format!(
        "8208 latent vs 65920 raw bytes per window; {n} entries -> {} / {}",
        stats.total_bytes_latent, stats.equivalent_raw_bytes
    ))
}

// ---------------------------------------------------------------- 9, 10

fn small_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.suite.n_base = 2;
    cfg.suite.n_lifelong = 3;
    cfg.suite.demos_base = 10;
    cfg.suite.demos_lifelong = 4;
    cfg.suite.trajectory_len = 20;
    cfg.pretrain.epochs = 2;
    cfg.lifelong.epochs = 2;
    cfg.seeds = vec![0];
    cfg.eval_trials = 5;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn determinism(root: &Path) -> Outcome {
    let mut cfg = small_config(&root.join("det"));
    cfg.seeds = vec![0, 1];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let summary = run_experiment(&cfg, &mut PretrainCache::default()).map_err(err)?;
        let mut files = vec![std::fs::read(summary.run_dir.join("metrics.json")).map_err(err)?];
        for seed in &cfg.seeds {
            let d = summary.run_dir.join(format!("seed_{seed}"));
            files.push(std::fs::read(d.join("success_matrix.csv")).map_err(err)?);
            files.push(std::fs::read(d.join("metrics.json")).map_err(err)?);
        }
        snapshots.push(files);
    }
    ensure(snapshots[0] == snapshots[1], || "artifacts differ between identical runs".into())?;
    Ok(format!("{} files bit-identical across two runs", snapshots[0].len()))
}

fn ablation_harness(root: &Path) -> Outcome {
    let base = small_config(&root.join("ablate"));
    let mut cache = PretrainCache::default();
    let mut counts = Vec::new();
    for (kind, cells) in [
        (AblationKind::BufferProbability, 3),
        (AblationKind::AlphaSweep, 4),
        (AblationKind::PairFraction, 3),
        (AblationKind::CosineVsAngle, 2),
    ] {
        let table = run_ablation(kind, &base, &mut cache).map_err(err)?;
        ensure(table.rows.len() == cells, || format!("{}: {} rows", kind.name(), table.rows.len()))?;
        let csv = std::fs::read_to_string(base.output_dir.join(format!("ablate_{}/table.csv", kind.name())))
            .map_err(err)?;
        ensure(csv.lines().count() == cells + 1, || format!("{}: table.csv has wrong rows", kind.name()))?;
        if kind == AblationKind::BufferProbability {
            let bytes: Vec<f64> = table.rows.iter().map(|r| r.buffer_bytes).collect();
            ensure(bytes.windows(2).all(|w| w[0] <= w[1]), || format!("buffer bytes {bytes:?}"))?;
            counts.push(format!("buffer bytes {bytes:?}"));
        }
        counts.push(format!("{} {} rows", kind.name(), table.rows.len()));
    }
    ensure(run_ablation(AblationKind::ReferenceModeStub, &base, &mut cache).is_err(), || {
        "reference_mode_stub unexpectedly ran".into()
    })?;
    Ok(counts.join(", "))
}

// ---------------------------------------------------------------- driver

/// Criteria selected by `MLR_ACCEPTANCE_ONLY` (comma-separated numbers);
/// all of them when unset.
fn selected(index: usize) -> bool {
    match std::env::var("MLR_ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|s| s.trim().parse() == Ok(index)),
        Err(_) => true,
    }
}

fn run(index: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    if !selected(index) {
        return true;
    }
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match outcome {
        Ok(detail) => {
            println!("PASS {index:>2} {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {index:>2} {name}: {detail}");
            false
        }
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut ok = true;
    ok &= run(1, "geometry", geometry_suite);
    ok &= run(2, "gradient check", gradient_check);
    ok &= run(3, "oracle equivalence", oracle_equivalence);
    ok &= run(4, "ifa zero anchor", ifa_anchor);
    if (5..=7).any(selected) {
        match compare_methods(&root.join("compare")) {
            Ok(c) => {
                ok &= run(5, "forgetting reduction", || forgetting_reduction(&c));
                ok &= run(6, "ifa benefit", || ifa_benefit(&c));
                ok &= run(7, "separation direction", || separation_direction(&c));
            }
            Err(e) => {
                for (i, name) in [(5, "forgetting reduction"), (6, "ifa benefit"), (7, "separation direction")] {
                    println!("FAIL {i:>2} {name}: runs failed: {e}");
                }
                ok = false;
            }
        }
    }
    ok &= run(8, "memory claim", memory_claim);
    ok &= run(9, "determinism", || determinism(root));
    ok &= run(10, "ablation harness", || ablation_harness(root));
    if !ok {
        std::process::exit(1);
    }
}
