//! Acceptance suite: one PASS/FAIL line per criterion, then a summary.
//!
//! Every criterion runs even when an earlier one fails, and the process
//! exits successfully once all of them have reported. A panic inside a
//! criterion is reported as a failure of that criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use moticomp::autodiff::{Tape, Tensor};
use moticomp::datagen::{build_dataset, compose_oracle, ActionPart, Dataset, DatasetManifest};
use moticomp::dct::{dct_encode, idct_decode};
use moticomp::exit::{
    count_flops, gumbel_softmax_st, sample_gumbel, tendency_loss, TendencyStats, NUM_EXITS,
};
use moticomp::io;
use moticomp::motion::{Matrix, MotionSequence, PartLayout};
use moticomp::predictor::{ExitChoice, Predictor, PredictorConfig};
use moticomp::train::{evaluate, mean_joint_error, train_predictor, EpochRecord, TrainConfig, TrainOutcome};
use moticomp::vae::{masked_fuse, reconstruction_mpjpe, synthesize_composite, train_cag, BodyMask, CagTrainConfig, VaeModel};
use rand::Rng;

const HORIZONS: [usize; 5] = [1, 3, 5, 8, 10];

struct Check {
    name: String,
    pass: bool,
    detail: String,
}

fn check(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        pass,
        detail: detail.into(),
    }
}

struct Criterion {
    id: u8,
    title: &'static str,
    limit: Option<Duration>,
    run: Box<dyn FnOnce(&mut Shared) -> Vec<Check>>,
}

/// Artifacts shared between criteria so the long runs happen once.
#[derive(Default)]
struct Shared {
    dataset: Option<Dataset>,
    trained: Option<TrainOutcome>,
}

impl Shared {
    fn dataset(&mut self) -> &Dataset {
        self.dataset.get_or_insert_with(|| build_dataset(&DatasetManifest::desk_default()).unwrap())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn dct_round_trip() -> Vec<Check> {
    let mut r = rng(1);
    let (mut rt, mut lin, mut pars) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let rows = r.gen_range(2..=64);
        let cols = 3 * r.gen_range(1..=32);
        let x = random_matrix(&mut r, rows, cols, 500.0);
        let y = random_matrix(&mut r, rows, cols, 500.0);
        let (a, b) = (r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
        let cx = dct_encode(&x, rows).unwrap();
        rt = rt.max(idct_decode(&cx, rows).unwrap().max_abs_diff(&x));

        let cy = dct_encode(&y, rows).unwrap();
        let mixed = Matrix::from_fn(rows, cols, |i, j| a * x.get(i, j) + b * y.get(i, j));
        let cm = dct_encode(&mixed, rows).unwrap();
        for i in 0..rows {
            for j in 0..cols {
                let expect = a * cx.coeffs().get(i, j) + b * cy.coeffs().get(i, j);
                let scale = a.abs() * cx.coeffs().get(i, j).abs() + b.abs() * cy.coeffs().get(i, j).abs();
                lin = lin.max((cm.coeffs().get(i, j) - expect).abs() / scale.max(1e-300));
            }
        }
        let ex: f64 = x.as_slice().iter().map(|v| v * v).sum();
        let ec: f64 = cx.coeffs().as_slice().iter().map(|v| v * v).sum();
        pars = pars.max(rel(ex, ec));
    }
    vec![
        check("round trip max abs error < 1e-9", rt < 1e-9, format!("{rt:.2e}")),
        check("linearity relative error < 1e-8", lin < 1e-8, format!("{lin:.2e}")),
        check("Parseval relative error < 1e-8", pars < 1e-8, format!("{pars:.2e}")),
    ]
}

fn gradient_suite() -> Vec<Check> {
    let (mut ops, mut worst_op) = (0.0f64, "");
    let mut st = 0.0f64;
    let mut elbo = 0.0f64;
    let mut model = 0.0f64;
    for seed in 0..20 {
        for (name, e) in op_gradient_errors(seed) {
            if e > ops {
                ops = e;
                worst_op = name;
            }
        }
        st = st.max(straight_through_error(seed));
        elbo = elbo.max(elbo_gradient_error(seed));
        model = model.max(predictor_gradient_error(seed));
    }
    vec![
        check("every tape op < 1e-4", ops < 1e-4, format!("{ops:.2e} (worst {worst_op})")),
        check("straight-through passes gradients unchanged", st == 0.0, format!("{st:.2e}")),
        check("ELBO < 1e-4", elbo < 1e-4, format!("{elbo:.2e}")),
        check("J=4/N=8/T=4 total loss < 1e-4", model < 1e-4, format!("{model:.2e}")),
    ]
}

fn fusion_oracle() -> Vec<Check> {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let rows = r.gen_range(2..40);
        let joints = r.gen_range(1..12);
        let sm = random_seq(&mut r, rows, joints);
        let sn = random_seq(&mut r, rows, joints);
        let take: Vec<bool> = (0..joints).map(|_| r.gen()).collect();
        let mask = BodyMask::from_joints(&take);
        let f = r.gen_range(1..=rows);
        let blended = Matrix::from_fn(rows, 3 * joints, |i, j| {
            if take[j / 3] {
                sm.data().get(i, j)
            } else {
                sn.data().get(i, j)
            }
        });
        let expect = dct_encode(&blended, f).unwrap();
        let got = masked_fuse(&sm, &sn, &mask, f).unwrap();
        worst = worst.max(got.coeffs().max_abs_diff(expect.coeffs()));
    }
    vec![check("masked fusion equals DCT of the blend, abs < 1e-10", worst < 1e-10, format!("{worst:.2e}"))]
}

fn composite_score(model: &VaeModel, ds: &Dataset, manifest: &DatasetManifest) -> f64 {
    let layout = PartLayout::from_parts(&manifest.skeleton.parts);
    let mask = BodyMask::upper(&layout);
    let of = |part: ActionPart| -> Vec<&MotionSequence> {
        ds.train
            .iter()
            .filter(|s| manifest.actions_of(part).any(|a| a.name == s.label()))
            .collect()
    };
    let (ups, lows) = (of(ActionPart::Upper), of(ActionPart::Lower));
    let zero = vec![0.0; model.config().latent_dim];
    let mut total = 0.0;
    for (i, up) in ups.iter().enumerate() {
        let low = lows[(7 * i) % lows.len()];
        let syn = synthesize_composite(model, up, low, &mask, &zero).unwrap();
        let truth = compose_oracle(up, low, &mask).unwrap();
        total += mean_joint_error(syn.data(), truth.data()).unwrap();
    }
    total / ups.len() as f64
}

fn cag_training(shared: &mut Shared) -> Vec<Check> {
    let manifest = DatasetManifest::desk_default();
    let ds = shared.dataset().clone();
    let atomic_classes = manifest.actions.len() - 1;
    let cfg = CagTrainConfig {
        epochs: 200,
        ..CagTrainConfig::default()
    };
    let (untrained, _) = train_cag(&ds.train, &CagTrainConfig { epochs: 0, ..cfg.clone() }).unwrap();
    let before = reconstruction_mpjpe(&untrained, &ds.train).unwrap();
    let (model, _) = train_cag(&ds.train, &cfg).unwrap();
    let after = reconstruction_mpjpe(&model, &ds.train).unwrap();
    let composite = composite_score(&model, &ds, &manifest);
    let ratio = composite / after;
    vec![
        check(
            "default manifest: 9 atomic actions, J=8, 200 sequences",
            atomic_classes == 9 && manifest.skeleton.parts.len() == 8 && ds.train.len() == 200,
            format!("{atomic_classes} actions, {} sequences", ds.train.len()),
        ),
        check(
            "200 epochs reach <= 50% of epoch-0 reconstruction MPJPE",
            after <= 0.5 * before,
            format!("{before:.2} -> {after:.2} mm ({:.1}%)", 100.0 * after / before),
        ),
        check(
            "synthesized composites within 2x atomic reconstruction error",
            ratio <= 2.0,
            format!("composite {composite:.2} mm vs atomic {after:.2} mm ({ratio:.2}x)"),
        ),
    ]
}

fn exit_mechanics() -> Vec<Check> {
    let mut r = rng(5);
    let mut one_hot = true;
    for _ in 0..10_000 {
        let logits: Vec<f64> = (0..NUM_EXITS).map(|_| r.gen_range(-5.0..5.0)).collect();
        let tau = r.gen_range(0.05..5.0);
        let d = gumbel_softmax_st(&logits, tau, &sample_gumbel(&mut r, NUM_EXITS)).unwrap();
        one_hot &= d.b.iter().filter(|&&v| v == 1.0).count() == 1 && d.b.iter().all(|&v| v == 0.0 || v == 1.0);
    }
    let mut counts = [0u64; NUM_EXITS];
    let draws = 100_000;
    for _ in 0..draws {
        let d = gumbel_softmax_st(&[0.0; NUM_EXITS], 1.0, &sample_gumbel(&mut r, NUM_EXITS)).unwrap();
        counts[d.index()] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let uniform = freqs.iter().all(|f| (f - 1.0 / 3.0).abs() <= 0.02);

    let loss = |c: Vec<u64>, w: f64| tendency_loss(&TendencyStats { counts: c, w_tendency: w }).unwrap();
    let mut zero_iff_equal = true;
    for c in [vec![4, 4, 4], vec![1, 1, 1], vec![100, 100, 100]] {
        zero_iff_equal &= loss(c, 2.5) == 0.0;
    }
    for c in [vec![4, 4, 5], vec![0, 1, 1], vec![3, 0, 9], vec![30, 0, 0]] {
        zero_iff_equal &= loss(c, 2.5) > 0.0;
    }
    let mut sqrt2 = 0.0f64;
    for (b, w) in [(1u64, 1.0), (32, 1.0), (7, 0.3), (100, 12.0)] {
        sqrt2 = sqrt2.max(rel(loss(vec![3 * b, 0, 0], w), std::f64::consts::SQRT_2 * w));
    }
    vec![
        check("decisions are exactly one-hot over 10^4 draws", one_hot, ""),
        check(
            "uniform logits select each exit 1/3 +- 2% over 10^5 draws",
            uniform,
            format!("{:.4} {:.4} {:.4}", freqs[0], freqs[1], freqs[2]),
        ),
        check("tendency loss is zero iff counts are equal", zero_iff_equal, ""),
        check("counts (3B,0,0) give sqrt(2) w", sqrt2 < 1e-12, format!("rel {sqrt2:.1e}")),
    ]
}

fn shares(h: &[EpochRecord]) -> Vec<[f64; NUM_EXITS]> {
    h.iter().map(|r| r.exit_shares()).collect()
}

fn fmt_min(s: &[f64; NUM_EXITS]) -> f64 {
    s.iter().copied().fold(f64::INFINITY, f64::min)
}

fn tendency_constraint(shared: &mut Shared) -> Vec<Check> {
    let ds = shared.dataset().clone();
    let parts = DatasetManifest::desk_default().skeleton.parts;
    let run = |w: f64| {
        let model = Predictor::new(PredictorConfig::desk(parts.clone(), 20, 10), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            constrain_epochs: 20,
            w_tendency: w,
            ..TrainConfig::default()
        };
        train_predictor(model, &ds.train, &ds.val, &cfg).unwrap().history
    };
    let w = TrainConfig::default().w_tendency;
    let with = shares(&run(w));
    let without = shares(&run(0.0));
    let min_with = with.iter().map(fmt_min).fold(f64::INFINITY, f64::min);
    let last = without.last().unwrap();
    let min_last = fmt_min(last);
    vec![
        check(
            format!("w_tendency = {w}: every exit share >= 10% in each of the first 20 epochs"),
            with.len() == 20 && min_with >= 0.10,
            format!("lowest share {:.1}%", 100.0 * min_with),
        ),
        check(
            "w_tendency = 0: some exit share below 5% by epoch 20",
            min_last < 0.05,
            format!("epoch 20 shares {:.1}% {:.1}% {:.1}%", 100.0 * last[0], 100.0 * last[1], 100.0 * last[2]),
        ),
    ]
}

/// Counted MACs of a full evaluation forward for every fixed exit triple.
fn counted_matches_analytic(model: &Predictor, hist: &Matrix) -> (bool, usize) {
    let report = count_flops(model.config());
    let mut n = 0;
    let mut all = true;
    for a in 1..=3 {
        for b in 1..=3 {
            for c in 1..=3 {
                let mut tape = Tape::with_mac_counter();
                let p = model.params().bind(&mut tape).unwrap();
                model.forward_eval(&mut tape, &p, hist, ExitChoice::Fixed([a, b, c])).unwrap();
                all &= tape.mac_count().unwrap() == report.total([a, b, c]);
                n += 1;
            }
        }
    }
    (all, n)
}

fn ensure_trained(shared: &mut Shared) {
    if shared.trained.is_some() {
        return;
    }
    let ds = shared.dataset().clone();
    let parts = DatasetManifest::desk_default().skeleton.parts;
    let model = Predictor::new(PredictorConfig::desk(parts, 20, 10), 0).unwrap();
    let cfg = TrainConfig::default();
    shared.trained = Some(train_predictor(model, &ds.train, &ds.val, &cfg).unwrap());
}

fn flops_accounting(shared: &mut Shared) -> Vec<Check> {
    let mut r = rng(7);
    let mut toy = Predictor::new(toy_predictor_config(), 2).unwrap();
    randomize(&mut toy, 3);
    let (toy_ok, toy_n) = counted_matches_analytic(&toy, &random_matrix(&mut r, 8, 12, 100.0));
    let parts = DatasetManifest::desk_default().skeleton.parts;
    let desk = Predictor::new(PredictorConfig::desk(parts, 20, 10), 4).unwrap();
    let (desk_ok, desk_n) = counted_matches_analytic(&desk, &random_matrix(&mut r, 20, 24, 100.0));

    let monotone = [toy.config(), desk.config()]
        .iter()
        .all(|c| count_flops(c).per_exit.iter().all(|row| row[0] < row[1] && row[1] < row[2]));

    ensure_trained(shared);
    let test = shared.dataset().test.clone();
    let model = &shared.trained.as_ref().unwrap().model;
    let has_still = test.iter().any(|s| s.label() == "still");
    let report = evaluate(model, &test, &HORIZONS).unwrap();
    let f = &report.flops;
    vec![
        check(
            "counted MACs equal analytic counts for every exit choice",
            toy_ok && desk_ok,
            format!("{toy_n} toy + {desk_n} desk exit triples"),
        ),
        check("counts strictly increase with exit depth", monotone, ""),
        check(
            "policy-routed average below always-exit-3 on a batch with Still samples",
            has_still && f.average_macs < f.full_depth_macs as f64,
            format!("{:.0} vs {} MACs ({:.1}% saved), exits {:?}", f.average_macs, f.full_depth_macs, f.saved_percent, report.exit_totals),
        ),
    ]
}

fn end_to_end(shared: &mut Shared) -> Vec<Check> {
    let ds = shared.dataset().clone();
    let parts = DatasetManifest::desk_default().skeleton.parts;
    let untrained = Predictor::new(PredictorConfig::desk(parts, 20, 10), 0).unwrap();
    let base = evaluate(&untrained, &ds.test, &HORIZONS).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let anchor = bits(&base.overall_model) == bits(&base.overall_baseline)
        && base.actions.iter().all(|a| bits(&a.model) == bits(&a.baseline));

    ensure_trained(shared);
    let outcome = shared.trained.as_ref().unwrap();
    let epochs = outcome.history.len();
    let report = evaluate(&outcome.model, &ds.test, &HORIZONS).unwrap();
    let beats = report.overall_model.iter().zip(&report.overall_baseline).all(|(m, b)| m < b);
    let cells: Vec<String> = HORIZONS
        .iter()
        .zip(report.overall_model.iter().zip(&report.overall_baseline))
        .map(|(h, (m, b))| format!("f{h} {m:.1}/{b:.1}"))
        .collect();
    vec![
        check("untrained model report equals the zero-velocity baseline exactly", anchor, ""),
        check(
            "after 50 epochs the model beats zero-velocity at frames 1,3,5,8,10",
            epochs == 50 && beats,
            format!("model/baseline mm: {}", cells.join(", ")),
        ),
    ]
}

fn determinism(shared: &mut Shared) -> Vec<Check> {
    let ds = shared.dataset().clone();
    let parts = DatasetManifest::desk_default().skeleton.parts;
    let short = |seed: u64| {
        let model = Predictor::new(PredictorConfig::desk(parts.clone(), 20, 10), seed).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            constrain_epochs: 2,
            seed,
            ..TrainConfig::default()
        };
        train_predictor(model, &ds.train, &ds.val, &cfg).unwrap()
    };
    let (a, b) = (short(11), short(11));
    let c = short(12);
    let same_history = a.history == b.history && a.model.params() == b.model.params();
    let seed_matters = a.history != c.history;
    let cag_cfg = CagTrainConfig {
        epochs: 3,
        seed: 9,
        ..CagTrainConfig::default()
    };
    let (va, ra) = train_cag(&ds.train, &cag_cfg).unwrap();
    let (vb, rb) = train_cag(&ds.train, &cag_cfg).unwrap();
    let cag_same = ra == rb && va.params() == vb.params();
    let rebuilt = build_dataset(&DatasetManifest::desk_default()).unwrap();
    let data_same = rebuilt == ds;

    let dir = tempfile::tempdir().unwrap();
    let pp = dir.path().join("p.ckpt");
    io::save_predictor(&pp, &a.model).unwrap();
    let back = io::load_predictor(&pp).unwrap();
    let r1 = evaluate(&a.model, &ds.test, &HORIZONS).unwrap();
    let r2 = evaluate(&back, &ds.test, &HORIZONS).unwrap();
    let eval_same = r1 == r2 && r1.to_csv() == r2.to_csv();

    let vp = dir.path().join("v.ckpt");
    io::save_vae(&vp, &va).unwrap();
    let vback = io::load_vae(&vp).unwrap();
    let ckpt_exact = io::predictor_to_bytes(&back) == std::fs::read(&pp).unwrap()
        && io::vae_to_bytes(&vback) == std::fs::read(&vp).unwrap()
        && vback.params() == va.params();
    let layout = PartLayout::from_parts(&parts);
    let zero = vec![0.0; va.config().latent_dim];
    let syn_same = synthesize_composite(&va, &ds.train[0], &ds.train[150], &BodyMask::upper(&layout), &zero).unwrap()
        == synthesize_composite(&vback, &ds.train[0], &ds.train[150], &BodyMask::upper(&layout), &zero).unwrap();

    io::save_motion_dir(&dir.path().join("m"), &ds.test).unwrap();
    let motion_exact = io::load_motion_dir(&dir.path().join("m")).unwrap() == ds.test;
    let mut r = rng(13);
    let odd = MotionSequence::new(
        Matrix::from_fn(5, 9, |_, _| f64::from_bits(r.gen::<u64>() >> 2) * if r.gen() { 1.0 } else { -1.0 }),
        f64::from_bits(0x4024_0000_0000_0001),
        "odd",
    )
    .unwrap();
    let motion_exact = motion_exact && io::parse_motion(&io::format_motion(&odd)).unwrap() == odd;
    let tensor_ok = Tensor::new(vec![2], vec![1.0, 2.0]).is_ok();

    vec![
        check("identical seeds give bit-identical loss histories", same_history && cag_same && data_same, ""),
        check("a different seed gives a different history", seed_matters, ""),
        check("checkpoint reload leaves evaluate() bit-identical", eval_same && syn_same, ""),
        check("checkpoint and motion files round-trip exactly", ckpt_exact && motion_exact && tensor_ok, ""),
    ]
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        Criterion {
            id: 1,
            title: "DCT round trip, linearity and Parseval",
            limit: Some(Duration::from_secs(5)),
            run: Box::new(|_| dct_round_trip()),
        },
        Criterion {
            id: 2,
            title: "finite-difference gradient suite",
            limit: Some(Duration::from_secs(120)),
            run: Box::new(|_| gradient_suite()),
        },
        Criterion {
            id: 3,
            title: "masked fusion oracle",
            limit: None,
            run: Box::new(|_| fusion_oracle()),
        },
        Criterion {
            id: 4,
            title: "composite generation training",
            limit: Some(Duration::from_secs(600)),
            run: Box::new(cag_training),
        },
        Criterion {
            id: 5,
            title: "early-exit mechanics",
            limit: None,
            run: Box::new(|_| exit_mechanics()),
        },
        Criterion {
            id: 6,
            title: "tendency constraint balances exits",
            limit: Some(Duration::from_secs(900)),
            run: Box::new(tendency_constraint),
        },
        Criterion {
            id: 8,
            title: "end-to-end prediction",
            limit: Some(Duration::from_secs(1200)),
            run: Box::new(end_to_end),
        },
        Criterion {
            id: 7,
            title: "FLOPs accounting",
            limit: None,
            run: Box::new(flops_accounting),
        },
        Criterion {
            id: 9,
            title: "determinism and persistence",
            limit: None,
            run: Box::new(determinism),
        },
    ];

    let mut shared = Shared::default();
    let mut results: Vec<(u8, bool)> = Vec::new();
    for c in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| (c.run)(&mut shared)));
        let elapsed = start.elapsed();
        let mut checks = match outcome {
            Ok(checks) => checks,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                vec![check("criterion ran to completion", false, format!("panicked: {msg}"))]
            }
        };
        if let Some(limit) = c.limit {
            checks.push(check(
                format!("runtime under {}s", limit.as_secs()),
                elapsed < limit,
                format!("{:.1}s", elapsed.as_secs_f64()),
            ));
        }
        let pass = checks.iter().all(|k| k.pass);
        println!(
            "{} criterion {} {} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.title,
            elapsed.as_secs_f64()
        );
        for k in &checks {
            let detail = if k.detail.is_empty() { String::new() } else { format!(": {}", k.detail) };
            println!("    [{}] {}{}", if k.pass { "ok" } else { "FAILED" }, k.name, detail);
        }
        results.push((c.id, pass));
    }
    results.sort();
    let failed: Vec<String> = results.iter().filter(|r| !r.1).map(|r| r.0.to_string()).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
    );
}
