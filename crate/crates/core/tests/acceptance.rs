//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use eyenet_core::checkpoint;
use eyenet_core::label::{one_hot, LabelMap, IRIS, PUPIL, SCLERA};
use eyenet_core::loss::{cross_entropy, dice_per_class, total_loss, LossConfig};
use eyenet_core::metrics::ConfusionMatrix;
use eyenet_core::network::{build, NetworkSpec};
use eyenet_core::postproc::{
    clean_mask, connected_components_8, fill_holes, keep_largest, BinaryMask,
};
use eyenet_core::synth::{self, EyeGeometry};
use eyenet_core::train::schedule_lr;
use eyenet_core::{ForwardOutputs, Tape, Tensor4, TrainConfig, TrainState, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn parameter_budget() -> Outcome {
    let start = Instant::now();
    let spec = NetworkSpec::default();
    let count = spec.parameter_count();
    let built = build(&spec, 0)
        .map_err(|e| e.to_string())?
        .parameter_count();
    let secs = start.elapsed().as_secs_f64();
    ensure((240_000..=260_000).contains(&count), || {
        format!("count {count} outside [240000, 260000]")
    })?;
    ensure(built == count, || {
        format!("built store has {built}, closed form {count}")
    })?;
    ensure(secs < 1.0, || format!("took {secs:.2} s"))?;
    Ok(format!("{count} parameters, {secs:.3} s"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    for seed in 0..5 {
        for case in common::all_cases(seed) {
            let tol = if case.name == "network" { 2e-3 } else { 1e-3 };
            let reports =
                common::check_block(&case, seed).map_err(|e| format!("{}: {e}", case.name))?;
            let s = common::summarize(&reports);
            ensure(s.worst < tol, || {
                format!(
                    "{} seed {seed}: rel error {:.3e} in {} (tol {tol:e})",
                    case.name, s.worst, s.worst_tensor
                )
            })?;
            ensure(s.checked > 0 && s.excluded * 20 <= s.checked, || {
                format!(
                    "{} seed {seed}: {} of {} probes at kinks",
                    case.name,
                    s.excluded,
                    s.checked + s.excluded
                )
            })?;
            match worst.iter_mut().find(|(n, _)| n == case.name) {
                Some(w) => w.1 = w.1.max(s.worst),
                None => worst.push((case.name.to_string(), s.worst)),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.1} s"))?;
    let parts: Vec<String> = worst.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect();
    Ok(format!(
        "5 seeds, worst rel error: {}; {secs:.1} s",
        parts.join(", ")
    ))
}

fn loss_examples() -> Outcome {
    // two-channel embedding of a single-class toy: channel 1 holds y and p
    let y = [1.0, 1.0, 0.0, 0.0];
    let p = [0.8, 0.6, 0.2, 0.1];
    let target = Tensor4::<f64>::from_fn([1, 4, 2, 2], |_, c, r, q| match c {
        0 => 1.0 - y[r * 2 + q],
        1 => y[r * 2 + q],
        _ => 0.0,
    });
    let pred = Tensor4::<f64>::from_fn([1, 4, 2, 2], |_, c, r, q| match c {
        0 => 1.0 - p[r * 2 + q],
        1 => p[r * 2 + q],
        _ => 0.0,
    });
    let dl = dice_per_class(&pred, &target, 1e-6).map_err(|e| e.to_string())?;
    let toy = 1.0 - 2.8 / 3.7;
    ensure(
        (dl[1] - toy).abs() < 1e-4 && (dl[1] - 0.2432).abs() < 1e-4,
        || format!("toy dice loss {}", dl[1]),
    )?;
    ensure(dl[2].abs() < 1e-4 && dl[3].abs() < 1e-4, || {
        format!("absent classes give {} and {}", dl[2], dl[3])
    })?;

    let labels = common::random_labels(4, 4, 3);
    let hot: Tensor4<f64> = one_hot(std::slice::from_ref(&labels)).map_err(|e| e.to_string())?;
    let uniform = Tensor4::<f64>::filled([1, 4, 4, 4], 0.25);
    let ce = cross_entropy(&uniform, &hot).map_err(|e| e.to_string())?;
    ensure((ce - 4f64.ln()).abs() < 1e-4, || format!("uniform CE {ce}"))?;
    let perfect_dice = dice_per_class(&hot, &hot, 1e-6).map_err(|e| e.to_string())?;
    ensure(perfect_dice.iter().all(|v| v.abs() < 1e-4), || {
        format!("perfect dice {perfect_dice:?}")
    })?;

    // logits with a large margin on the true class drive softmax to one-hot
    let logits = hot.map(|v| 40.0 * v);
    let mut tape = Tape::<f64>::new();
    let heads = [0; 4].map(|_| tape.leaf(logits.clone()));
    let outs = ForwardOutputs {
        side1: heads[0],
        side2: heads[1],
        side3: heads[2],
        fused: heads[3],
    };
    let (_, b) =
        total_loss(&mut tape, &outs, &hot, &LossConfig::default()).map_err(|e| e.to_string())?;
    ensure(b.total.abs() < 1e-5, || {
        format!("perfect total {:e}", b.total)
    })?;
    Ok(format!(
        "toy dice {:.4}, uniform CE {:.4}, perfect total {:.1e}",
        dl[1], ce, b.total
    ))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_identity: f64 = 0.0;
    for pair in 0..1000 {
        // vary the class mix so absent classes are exercised too
        let classes = rng.random_range(1..=4u8);
        let p = LabelMap::from_fn(8, 8, |_, _| rng.random_range(0..classes));
        let t = LabelMap::from_fn(8, 8, |_, _| rng.random_range(0..4u8));
        let cm = ConfusionMatrix::from_maps(&p, &t).map_err(|e| e.to_string())?;
        let (mut tp, mut fp, mut fneg, mut truth) = ([0u64; 4], [0u64; 4], [0u64; 4], [0u64; 4]);
        let mut correct = 0u64;
        for (&a, &b) in p.data().iter().zip(t.data()) {
            let (a, b) = (a as usize, b as usize);
            truth[b] += 1;
            if a == b {
                tp[a] += 1;
                correct += 1;
            } else {
                fp[a] += 1;
                fneg[b] += 1;
            }
        }
        let mut ious = Vec::new();
        let mut recalls = Vec::new();
        for c in 0..4 {
            ensure(cm.true_positive(c) == tp[c], || {
                format!("pair {pair}: TP of class {c}")
            })?;
            let u = tp[c] + fp[c] + fneg[c];
            ensure(cm.union(c) == u, || {
                format!("pair {pair}: union of class {c}")
            })?;
            if u > 0 {
                ious.push(tp[c] as f64 / u as f64);
            }
            if truth[c] > 0 {
                recalls.push(tp[c] as f64 / truth[c] as f64);
            }
        }
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        let ma = recalls.iter().sum::<f64>() / recalls.len() as f64;
        let pa = correct as f64 / 64.0;
        ensure(cm.miou().unwrap() == miou, || {
            format!("pair {pair}: MIOU {} vs {miou}", cm.miou().unwrap())
        })?;
        ensure(cm.pixel_accuracy().unwrap() == pa, || {
            format!("pair {pair}: PA")
        })?;
        ensure(cm.mean_accuracy().unwrap() == ma, || {
            format!("pair {pair}: MA")
        })?;
        for s in cm.per_class_scores().unwrap() {
            worst_identity = worst_identity.max((s.dice - 2.0 * s.iou / (1.0 + s.iou)).abs());
        }
    }
    ensure(worst_identity < 1e-9, || {
        format!("dice/iou identity off by {worst_identity:e}")
    })?;
    Ok(format!(
        "1000 pairs exact, identity error {worst_identity:.1e}"
    ))
}

fn random_eye_mask(rng: &mut ChaCha8Rng) -> LabelMap {
    let (h, w) = (24, 32);
    let mut g = EyeGeometry::centered(h, w);
    g.cy += rng.random_range(-3.0..3.0);
    g.cx += rng.random_range(-4.0..4.0);
    g.pupil_r *= rng.random_range(0.6..1.3);
    let mut m = g.mask(h, w);
    for _ in 0..rng.random_range(0..30) {
        let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
        m.set(y, x, rng.random_range(0..4));
    }
    m
}

fn union_find_count(m: &BinaryMask) -> Vec<usize> {
    let (h, w) = (m.height(), m.width());
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            if !m.get(y, x) {
                continue;
            }
            for (dy, dx) in [(0i32, 1i32), (1, -1), (1, 0), (1, 1)] {
                let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                if ny < h as i32 && nx >= 0 && nx < w as i32 && m.get(ny as usize, nx as usize) {
                    let a = find(&mut parent, y * w + x);
                    let b = find(&mut parent, ny as usize * w + nx as usize);
                    parent[a] = b;
                }
            }
        }
    }
    let mut sizes = std::collections::HashMap::new();
    for i in 0..h * w {
        if m.data()[i] {
            *sizes.entry(find(&mut parent, i)).or_insert(0usize) += 1;
        }
    }
    let mut v: Vec<usize> = sizes.into_values().collect();
    v.sort_by(|a, b| b.cmp(a));
    v
}

fn postproc_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..500 {
        let m = random_eye_mask(&mut rng);
        let once = clean_mask(&m).map_err(|e| e.to_string())?;
        ensure(
            clean_mask(&once).map_err(|e| e.to_string())? == once,
            || format!("mask {i} not idempotent"),
        )?;
    }

    // concentric fixed point, then a far-corner iris speck
    let clean = LabelMap::from_fn(24, 32, |y, x| {
        let r = ((y as f64 - 12.0).powi(2) + (x as f64 - 16.0).powi(2)).sqrt();
        if r < 3.0 {
            PUPIL
        } else if r < 6.0 {
            IRIS
        } else if r < 10.0 {
            SCLERA
        } else {
            0
        }
    });
    ensure(clean_mask(&clean).unwrap() == clean, || {
        "concentric mask changed".into()
    })?;
    let mut speck = clean.clone();
    for (y, x) in [(22, 30), (22, 31), (23, 31)] {
        speck.set(y, x, IRIS);
    }
    ensure(clean_mask(&speck).unwrap() == clean, || {
        "corner speck survived".into()
    })?;
    let mut holed = clean.clone();
    holed.set(12, 20, 0);
    ensure(
        holed.get(12, 21) == IRIS && holed.get(12, 19) == IRIS,
        || "hole not inside iris annulus".into(),
    )?;
    ensure(clean_mask(&holed).unwrap() == clean, || {
        "iris hole not filled".into()
    })?;

    // keep_largest with areas (100, 10, 1)
    let mut m = BinaryMask::new(20, 20);
    for i in 0..100 {
        m.set(i / 10, i % 10, true);
    }
    for x in 0..10 {
        m.set(15, x, true);
    }
    m.set(19, 19, true);
    let kept = keep_largest(&m, 2);
    ensure(kept.count() == 110 && !kept.get(19, 19), || {
        "area-1 speck not removed".into()
    })?;

    let ring = BinaryMask::from_ascii(&[".....", ".###.", ".#.#.", ".###.", "....."]);
    let disk = BinaryMask::from_ascii(&[".....", ".###.", ".###.", ".###.", "....."]);
    ensure(fill_holes(&ring) == disk, || "ring not filled".into())?;
    let bay = BinaryMask::from_ascii(&["#.###", "#...#", "#####"]);
    ensure(fill_holes(&bay) == bay, || "border bay filled".into())?;
    let checker = BinaryMask::from_fn(4, 4, |y, x| (y + x) % 2 == 0);
    let cc = connected_components_8(&checker);
    ensure(cc.len() == 1 && cc[0].area == 8, || {
        "checkerboard is not one component of 8".into()
    })?;

    for i in 0..300 {
        let density = rng.random_range(0.2..0.7);
        let m = BinaryMask::from_fn(16, 16, |_, _| rng.random_bool(density));
        let ours: Vec<usize> = connected_components_8(&m).iter().map(|c| c.area).collect();
        ensure(ours == union_find_count(&m), || {
            format!("random mask {i}: component areas differ")
        })?;
    }
    Ok("500 masks idempotent, constructions exact, 300 masks match union-find".into())
}

const OVERFIT_EPOCHS: usize = 200;

struct OverfitRun {
    first_above: Option<usize>,
    final_miou: f64,
    loss0: f64,
    loss19: f64,
    secs: f64,
}

fn overfit_run(seed: u64, side_supervision: bool) -> Result<OverfitRun, String> {
    let data = synth::eye_set(4, 48, 64, 11);
    let mut cfg = TrainConfig {
        max_epochs: OVERFIT_EPOCHS,
        early_stop_patience: 0,
        seed,
        ..Default::default()
    };
    cfg.loss.side_supervision = side_supervision;
    let start = Instant::now();
    let mut t = Trainer::new(NetworkSpec::reduced(), cfg).map_err(|e| e.to_string())?;
    t.fit(&data, &data, |_, _| Ok(()))
        .map_err(|e| e.to_string())?;
    let h = &t.state.history;
    Ok(OverfitRun {
        first_above: h.iter().find(|r| r.val_miou > 0.95).map(|r| r.epoch),
        final_miou: h.last().map_or(0.0, |r| r.val_miou),
        loss0: h[0].train_loss,
        loss19: h[19].train_loss,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn overfit_and_ablation() -> Outcome {
    let mut lines = Vec::new();
    let (mut full_sum, mut ablated_sum) = (0.0, 0.0);
    let mut problems = Vec::new();
    for seed in 0..3 {
        let full = overfit_run(seed, true)?;
        let ablated = overfit_run(seed, false)?;
        for (name, r) in [("full", &full), ("fused-only", &ablated)] {
            match r.first_above {
                None => problems.push(format!(
                    "{name} seed {seed} never exceeded 0.95 (final {:.4})",
                    r.final_miou
                )),
                Some(_) if r.secs >= 600.0 => {
                    problems.push(format!("{name} seed {seed} took {:.0} s", r.secs))
                }
                _ => {}
            }
            if r.loss19 >= r.loss0 {
                problems.push(format!(
                    "{name} seed {seed}: loss did not fall over 20 epochs"
                ));
            }
        }
        let at = |r: &OverfitRun| {
            r.first_above
                .map_or("never".to_string(), |e| format!("epoch {e}"))
        };
        lines.push(format!(
            "seed {seed}: full {:.4} (>0.95 at {}, {:.0} s), fused-only {:.4} (>0.95 at {}, {:.0} s)",
            full.final_miou,
            at(&full),
            full.secs,
            ablated.final_miou,
            at(&ablated),
            ablated.secs
        ));
        full_sum += full.final_miou;
        ablated_sum += ablated.final_miou;
    }
    let (full_mean, ablated_mean) = (full_sum / 3.0, ablated_sum / 3.0);
    if full_mean < ablated_mean {
        problems.push(format!(
            "mean final MIOU full {full_mean:.4} < fused-only {ablated_mean:.4}"
        ));
    }
    for l in &lines {
        println!("      {l}");
    }
    if problems.is_empty() {
        Ok(format!(
            "mean final train MIOU full {full_mean:.4} >= fused-only {ablated_mean:.4}"
        ))
    } else {
        Err(problems.join("; "))
    }
}

fn determinism_and_resume() -> Outcome {
    let data = synth::eye_set(3, 16, 24, 21);
    let cfg = TrainConfig {
        max_epochs: 4,
        seed: 5,
        ..Default::default()
    };
    let run = |max_epochs| {
        let mut t = Trainer::new(
            NetworkSpec::reduced(),
            TrainConfig {
                max_epochs,
                ..cfg.clone()
            },
        )
        .unwrap();
        t.fit(&data, &data, |_, _| Ok(())).unwrap();
        t
    };
    let a = run(4);
    let b = run(4);
    let bytes_a = checkpoint::encode(&a.params).map_err(|e| e.to_string())?;
    ensure(
        bytes_a == checkpoint::encode(&b.params).unwrap() && a.state == b.state,
        || "two runs differ".into(),
    )?;

    let half = run(2);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("half.ckpt");
    checkpoint::save(&half.params, &path).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let again = dir.path().join("again.ckpt");
    checkpoint::save(&loaded, &again).unwrap();
    ensure(
        std::fs::read(&path).unwrap() == std::fs::read(&again).unwrap(),
        || "save/load/save not byte-identical".into(),
    )?;

    let state = TrainState::from_toml(&half.state.to_toml()).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::resume(NetworkSpec::reduced(), cfg.clone(), loaded, state)
        .map_err(|e| e.to_string())?;
    resumed
        .fit(&data, &data, |_, _| Ok(()))
        .map_err(|e| e.to_string())?;
    ensure(
        checkpoint::encode(&resumed.params).unwrap() == bytes_a,
        || "resumed parameters differ".into(),
    )?;
    ensure(resumed.state == a.state, || "resumed state differs".into())?;
    Ok(format!(
        "identical reruns, byte-identical round trip, resume 2+2 == 4 epochs ({} steps)",
        a.state.step
    ))
}

fn lr_schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let mut st = TrainState::new(&cfg);
    let mut lrs = Vec::new();
    for _ in 0..12 {
        schedule_lr(&mut st, 0.75, &cfg);
        lrs.push(st.current_lr);
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b;
    let first_change = lrs.iter().position(|&l| !close(l, 1e-3));
    let second_change = lrs.iter().position(|&l| l < 0.5e-4);
    ensure(first_change == Some(5) && close(lrs[5], 1e-4), || {
        format!("first decay at {first_change:?}: {lrs:?}")
    })?;
    ensure(second_change == Some(10) && close(lrs[10], 1e-5), || {
        format!("second decay at {second_change:?}: {lrs:?}")
    })?;
    Ok("1e-3 -> 1e-4 at epoch 5 -> 1e-5 at epoch 10 (first epoch sets the baseline)".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("parameter budget", parameter_budget),
        ("gradient suite", gradient_suite),
        ("loss correctness", loss_examples),
        ("metric oracle", metric_oracle),
        ("post-processing properties", postproc_properties),
        (
            "overfit sanity and side-loss ablation",
            overfit_and_ablation,
        ),
        ("determinism and resume", determinism_and_resume),
        ("learning-rate schedule", lr_schedule),
    ];
    let only: Option<usize> = std::env::var("EYENET_ACCEPTANCE_ONLY")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {}. {name}: {detail} [{secs:.1} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {}. {name}: {detail} [{secs:.1} s]", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
