//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Trained checkpoints are cached under the cargo target tmp dir, so only
//! the first run pays for training. Failing criteria are reported but do not
//! fail the process unless `RMOT_ACCEPTANCE_STRICT` is set; panics and
//! errors always do.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmot_core::attack::{AttackKind, Perturbation};
use rmot_core::geometry::BBox;
use rmot_core::harness::{self, ExperimentConfig, RunRecord};
use rmot_core::metrics::{evaluate, hota, idf1, idsw, idsw_im, AttackWindow, FrameRecord, GtBox, TrackEntry};
use rmot_core::model::{MemoryBuffer, RmotModel};
use rmot_core::scenegen::gen_scene;
use rmot_core::trainer::{brute_force_assignment, hungarian};
use rmot_autograd::Tensor;

type Outcome = (bool, String);

fn out_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn base_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.run.out = out_dir().join("runs");
    cfg.run.checkpoint_dir = Some(out_dir().join("checkpoints"));
    cfg.run.seeds = (0..10).collect();
    cfg
}

fn with_buffer(t: usize) -> ExperimentConfig {
    let mut cfg = base_config();
    cfg.model.mem_len = t;
    cfg
}

/// Loads the cached model or trains it, remembering the training time next
/// to the checkpoint.
fn model_for(cfg: &ExperimentConfig) -> (RmotModel, Duration) {
    let path = cfg.checkpoint_path();
    let secs = path.with_extension("secs");
    if path.exists() {
        if let Ok(s) = fs::read_to_string(&secs) {
            if let Ok(v) = s.trim().parse::<f64>() {
                return (harness::obtain_model(cfg).expect("cached checkpoint"), Duration::from_secs_f64(v));
            }
        }
    }
    let start = Instant::now();
    let (model, _) = harness::train_model(cfg, None).expect("training");
    let took = start.elapsed();
    fs::write(&secs, format!("{}\n", took.as_secs_f64())).expect("write timing");
    (model, took)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// IDSW_im mean over the runs where it is defined.
fn mean_idsw_im(rows: &[RunRecord], attacked: bool) -> f64 {
    mean(rows.iter().filter_map(|r| if attacked { r.attacked.idsw_im } else { r.clean.idsw_im }))
}

fn runs(cfg: &ExperimentConfig, model: &RmotModel, kind: AttackKind, delta: usize, seeds: &[u64]) -> Vec<(RunRecord, Perturbation)> {
    let mut c = cfg.clone();
    c.run.kind = kind;
    c.attack.delta_attack = delta;
    seeds.iter().map(|&s| harness::execute(&c, model, s).expect("run")).collect()
}

fn records(v: &[(RunRecord, Perturbation)]) -> Vec<RunRecord> {
    v.iter().map(|(r, _)| r.clone()).collect()
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut failed = 0;
    for seed in 0..20 {
        for c in harness::gradient_suite(seed).expect("gradient suite") {
            failed += !c.passed as usize;
            if c.max_rel_error > worst.0 {
                worst = (c.max_rel_error, format!("{} seed {seed}", c.name));
            }
        }
    }
    let took = start.elapsed();
    (
        failed == 0 && took < Duration::from_secs(60),
        format!("20 seeds, {failed} failures, worst {:.2e} ({}), {:.1}s", worst.0, worst.1, took.as_secs_f64()),
    )
}

fn gb(id: u32, cx: f64) -> GtBox {
    GtBox { id, bbox: BBox::new(cx, 0.5, 0.1, 0.1) }
}

fn pe(id: u64, cx: f64) -> TrackEntry {
    TrackEntry { track_id: id, bbox: BBox::new(cx, 0.5, 0.1, 0.1), score: 0.9 }
}

fn relabel(pred: &[FrameRecord], map: &BTreeMap<u64, u64>) -> Vec<FrameRecord> {
    pred.iter()
        .map(|f| f.iter().map(|e| TrackEntry { track_id: map[&e.track_id], ..*e }).collect())
        .collect()
}

fn criterion_metrics() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let rows = rng.gen_range(1..=6);
        let cols = rng.gen_range(1..=6);
        let cost: Vec<Vec<f64>> =
            (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(0..10) as f64 / 3.0).collect()).collect();
        let a = hungarian(&cost).expect("hungarian");
        let b = brute_force_assignment(&cost);
        if a.pairs != b.pairs || (a.total_cost - b.total_cost).abs() > 1e-9 {
            mismatches += 1;
        }
    }

    let mut fixtures = Vec::new();
    // Two tracks whose IDs swap after frame 1: two switches over 8 matches.
    let gt: Vec<Vec<GtBox>> = (0..4).map(|_| vec![gb(1, 0.2), gb(2, 0.7)]).collect();
    let swap: Vec<FrameRecord> = (0..4)
        .map(|t| if t < 2 { vec![pe(1, 0.2), pe(2, 0.7)] } else { vec![pe(2, 0.2), pe(1, 0.7)] })
        .collect();
    fixtures.push(("idsw swap", idsw(&gt, &swap, 0.5), 25.0));
    // A dropout re-matched with the same ID is not a switch.
    let gt1: Vec<Vec<GtBox>> = (0..5).map(|_| vec![gb(1, 0.2)]).collect();
    let gap: Vec<FrameRecord> = (0..5).map(|t| if t == 2 { vec![] } else { vec![pe(1, 0.2)] }).collect();
    fixtures.push(("idsw dropout", idsw(&gt1, &gap, 0.5), 0.0));
    // One of two tracks changes ID right after the window.
    let gt6: Vec<Vec<GtBox>> = (0..6).map(|_| vec![gb(1, 0.2), gb(2, 0.7)]).collect();
    let half: Vec<FrameRecord> = (0..6)
        .map(|t| if t < 2 { vec![pe(1, 0.2), pe(2, 0.7)] } else { vec![pe(1, 0.2), pe(4, 0.7)] })
        .collect();
    let w = AttackWindow { start: 2, end: 4, horizon: 2 };
    fixtures.push(("idsw_im mixed", idsw_im(&gt6, &half, w).unwrap_or(f64::NAN), 50.0));
    // One track covered half by each of two IDs: IDTP = L/2 against L + L.
    let l = 8;
    let gtl: Vec<Vec<GtBox>> = (0..l).map(|_| vec![gb(1, 0.3)]).collect();
    let split: Vec<FrameRecord> = (0..l).map(|t| vec![pe(if t < l / 2 { 1 } else { 2 }, 0.3)]).collect();
    fixtures.push(("idf1 split", idf1(&gtl, &split, 0.5).idf1, 0.5));
    // Six frames, ID change after frame 2 at perfect IoU: AssA = 3/6, DetA = 1.
    let gth: Vec<Vec<GtBox>> = (0..6).map(|_| vec![gb(1, 0.3)]).collect();
    let change: Vec<FrameRecord> = (0..6).map(|t| vec![pe(if t < 3 { 1 } else { 2 }, 0.3)]).collect();
    fixtures.push(("hota id change", hota(&gth, &change).hota, 0.5f64.sqrt()));
    let bad_fixtures: Vec<&str> =
        fixtures.iter().filter(|(_, got, want)| (got - want).abs() > 1e-12).map(|(n, _, _)| *n).collect();

    let mut relabel_failures = 0;
    for _ in 0..50 {
        let t_len = 10;
        let n_obj = rng.gen_range(1..=3);
        let gt: Vec<Vec<GtBox>> = (0..t_len)
            .map(|t| (0..n_obj).map(|k| gb(k as u32, 0.15 + 0.3 * k as f64 + 0.005 * t as f64)).collect())
            .collect();
        let mut pred: Vec<FrameRecord> = Vec::new();
        for f in &gt {
            let mut record = Vec::new();
            for g in f {
                if rng.gen_bool(0.85) {
                    record.push(pe(rng.gen_range(1..5), g.bbox.cx + rng.gen_range(-0.03..0.03)));
                }
            }
            pred.push(record);
        }
        let ids: Vec<u64> = (1..5).collect();
        let mut targets: Vec<u64> = (100..104).collect();
        for i in (1..targets.len()).rev() {
            targets.swap(i, rng.gen_range(0..=i));
        }
        let map: BTreeMap<u64, u64> = ids.into_iter().zip(targets).collect();
        let w = AttackWindow { start: 4, end: 6, horizon: 3 };
        if evaluate(&gt, &pred, Some(w)) != evaluate(&gt, &relabel(&pred, &map), Some(w)) {
            relabel_failures += 1;
        }
    }
    let took = start.elapsed();
    (
        mismatches == 0 && bad_fixtures.is_empty() && relabel_failures == 0 && took < Duration::from_secs(60),
        format!(
            "hungarian mismatches {mismatches}/1000, fixture failures {bad_fixtures:?}, relabel failures {relabel_failures}/50, {:.1}s",
            took.as_secs_f64()
        ),
    )
}

/// Bounds of every persisted perturbation; the per-iteration bounds are
/// asserted inside the PGD step and would have aborted the runs.
fn criterion_projection(cfg: &ExperimentConfig, model: &RmotModel, perts: &[&Perturbation]) -> Outcome {
    let a = &cfg.attack;
    let seed = cfg.run.seeds[0];
    let scene = gen_scene(seed, &cfg.scene_params()).expect("scene");
    let mut checked = 0;
    let mut violations = Vec::new();
    for p in perts {
        for (k, t) in p.window().enumerate() {
            let prm = &p.params[k];
            match p.kind {
                AttackKind::Pixel => {
                    if prm.max_abs() > a.epsilon + 1e-12 {
                        violations.push(format!("pixel linf {:.5}", prm.max_abs()));
                    }
                }
                AttackKind::Aai => {
                    let (len, ang) = (prm.data()[0], prm.data()[1]);
                    if !(0.0..=a.blur_max).contains(&len) || !(0.0..std::f64::consts::PI).contains(&ang) {
                        violations.push(format!("aai params {len:.3} {ang:.3}"));
                    }
                }
                AttackKind::Eai => {
                    if prm.max_abs() > a.eai_amplitude + 1e-12 {
                        violations.push(format!("eai amplitude {:.5}", prm.max_abs()));
                    }
                }
                AttackKind::None => {}
            }
            if p.kind != AttackKind::None && t < scene.length {
                let f = p.apply_frame(k, &scene.frames[t]).expect("apply");
                if f.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    violations.push("pixel outside [0,1]".into());
                }
            }
            checked += 1;
        }
    }
    let _ = model;
    (
        violations.is_empty() && checked > 0,
        format!("{} runs, {checked} perturbed frames, violations {:?}", perts.len(), violations),
    )
}

fn main() -> ExitCode {
    let strict = std::env::var_os("RMOT_ACCEPTANCE_STRICT").is_some();
    let mut lines: Vec<(usize, &str, Result<Outcome, String>)> = Vec::new();
    let guard = |f: &mut dyn FnMut() -> Outcome| -> Result<Outcome, String> {
        catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
            e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into())
        })
    };

    lines.push((1, "gradient suite", guard(&mut criterion_gradients)));
    lines.push((2, "metric oracles", guard(&mut criterion_metrics)));
    fs::create_dir_all(out_dir()).expect("acceptance dir");

    let cfg8 = with_buffer(8);
    let seeds = cfg8.run.seeds.clone();
    let five = &seeds[..5];
    let (m8, train8) = model_for(&cfg8);

    let clean = runs(&cfg8, &m8, AttackKind::None, 2, &seeds);
    let clean_rows = records(&clean);
    let clean_hota = mean(clean_rows.iter().map(|r| r.clean.hota));
    let clean_im = mean_idsw_im(&clean_rows, false);
    lines.push((
        4,
        "clean baseline gate",
        Ok((
            clean_hota >= 70.0 && clean_im == 0.0 && train8 < Duration::from_secs(600),
            format!("hota {clean_hota:.2}, idsw_im {clean_im:.2}, training {:.0}s", train8.as_secs_f64()),
        )),
    ));

    let attack_start = Instant::now();
    let pixel = runs(&cfg8, &m8, AttackKind::Pixel, 2, &seeds);
    let pixel_time = attack_start.elapsed();
    let aai = runs(&cfg8, &m8, AttackKind::Aai, 2, five);
    let eai = runs(&cfg8, &m8, AttackKind::Eai, 2, five);
    let perts: Vec<&Perturbation> = pixel.iter().chain(&aai).chain(&eai).map(|(_, p)| p).collect();
    lines.push((3, "projection invariant", guard(&mut || criterion_projection(&cfg8, &m8, &perts))));

    let px = records(&pixel);
    let drop = |rows: &[RunRecord]| mean(rows.iter().map(|r| r.clean.hota - r.attacked.hota));
    let px_drop = drop(&px);
    let idsw_up = mean(px.iter().map(|r| r.attacked.idsw)) - mean(px.iter().map(|r| r.clean.idsw));
    lines.push((
        5,
        "attack effectiveness",
        Ok((
            px_drop >= 10.0 && idsw_up > 0.0 && pixel_time < Duration::from_secs(1800),
            format!("hota drop {px_drop:.2}, idsw increase {idsw_up:.2}, {} seeds, {:.0}s", px.len(), pixel_time.as_secs_f64()),
        )),
    ));

    let px5: Vec<RunRecord> = px.iter().filter(|r| five.contains(&r.seed)).cloned().collect();
    let (d_px, d_aai, d_eai) = (drop(&px5), drop(&records(&aai)), drop(&records(&eai)));
    lines.push((
        6,
        "physical below digital",
        Ok((d_aai < d_px && d_eai < d_px, format!("hota drop pixel {d_px:.2}, aai {d_aai:.2}, eai {d_eai:.2}, 5 seeds"))),
    ));

    let (m1, _) = model_for(&with_buffer(1));
    let t1_d1 = records(&runs(&with_buffer(1), &m1, AttackKind::Pixel, 1, five));
    let t8_d1 = records(&runs(&cfg8, &m8, AttackKind::Pixel, 1, five));
    let t8_d5 = records(&runs(&cfg8, &m8, AttackKind::Pixel, 5, five));
    let (im_t1, im_t8, im_t8_d5) = (mean_idsw_im(&t1_d1, true), mean_idsw_im(&t8_d1, true), mean_idsw_im(&t8_d5, true));
    lines.push((
        7,
        "memory resilience",
        Ok((
            im_t1 > im_t8 && im_t8_d5 > im_t8,
            format!("idsw_im at delta 1: T=1 {im_t1:.2}, T=8 {im_t8:.2}; T=8 at delta 5 {im_t8_d5:.2}"),
        )),
    ));

    let (m2, _) = model_for(&with_buffer(2));
    let t2 = records(&runs(&with_buffer(2), &m2, AttackKind::Pixel, 2, five));
    let (h8, h2) = (mean(px5.iter().map(|r| r.attacked.hota)), mean(t2.iter().map(|r| r.attacked.hota)));
    let (i8, i2) = (mean_idsw_im(&px5, true), mean_idsw_im(&t2, true));
    lines.push((
        8,
        "buffer size trend",
        Ok((h8 > h2 && i8 < i2, format!("attacked hota T=8 {h8:.2}, T=2 {h2:.2}; idsw_im T=8 {i8:.2}, T=2 {i2:.2}"))),
    ));

    let inspection = guard(&mut || buffer_inspection(&m8, &cfg8));
    let (acc_clean, acc_attacked) =
        (mean(px5.iter().map(|r| r.clean_refer_acc)), mean(px5.iter().map(|r| r.attacked_refer_acc)));
    lines.push((
        9,
        "persistence",
        inspection.map(|(ok, msg)| {
            (
                ok && acc_attacked < acc_clean,
                format!("{msg}; post-window referring accuracy clean {acc_clean:.2}, attacked {acc_attacked:.2}"),
            )
        }),
    ));

    lines.push((10, "determinism", guard(&mut || determinism(&cfg8, &m8))));

    lines.sort_by_key(|l| l.0);
    let mut failed = 0;
    let mut crashed = false;
    for (n, name, result) in &lines {
        match result {
            Ok((true, msg)) => println!("PASS {n:>2} {name}: {msg}"),
            Ok((false, msg)) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {msg}");
            }
            Err(msg) => {
                failed += 1;
                crashed = true;
                println!("FAIL {n:>2} {name}: panicked: {msg}");
            }
        }
    }
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if crashed || (strict && failed > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

/// Pushes a marker through a real tracking buffer and checks it stays
/// readable for exactly `min(T − 1, remaining)` later steps.
fn buffer_inspection(model: &RmotModel, cfg: &ExperimentConfig) -> Outcome {
    let mc = *model.config();
    let scene = gen_scene(cfg.run.seeds[0], &cfg.scene_params()).expect("scene");
    let mut bad = Vec::new();
    for t_mem in [1usize, 2, 8] {
        for pushed_at in [0usize, 5, scene.length - 3, scene.length - 1] {
            let mut buf = MemoryBuffer::new(t_mem, mc.n_queries, mc.d_model);
            let marker = Tensor::full(&[mc.n_queries, mc.d_model], -7.5);
            let mut visible = 0;
            for t in 0..scene.length {
                if t == pushed_at {
                    buf.push(marker.clone()).expect("push");
                    continue;
                }
                buf.push(Tensor::full(&[mc.n_queries, mc.d_model], t as f64)).expect("push");
                if t > pushed_at && buf.slots().any(|s| *s == marker) {
                    visible += 1;
                }
            }
            let remaining = scene.length - 1 - pushed_at;
            let want = (t_mem - 1).min(remaining);
            if visible != want {
                bad.push(format!("T={t_mem} pushed at {pushed_at}: visible {visible}, expected {want}"));
            }
        }
    }
    // The tracker's own buffer: the slot pushed at the last window frame.
    let mut state = model.new_state();
    let tokens = rmot_core::scenegen::gen_query(&scene, cfg.run.seeds[0]).expect("query").tokens;
    let end = cfg.attack.t_attack + cfg.attack.delta_attack;
    let mut pushed = None;
    let mut seen = 0;
    for (t, frame) in scene.frames.iter().enumerate() {
        model.track_step(frame, &tokens, &mut state, harness::SCORE_THRESHOLD).expect("step");
        let mem = state.memory().expect("memory");
        if t + 1 == end {
            pushed = mem.slot(mem.valid_len() - 1).cloned();
        } else if t + 1 > end && pushed.as_ref().is_some_and(|p| mem.slots().any(|s| s == p)) {
            seen += 1;
        }
    }
    let want = (mc.mem_len - 1).min(scene.length - end);
    if seen != want {
        bad.push(format!("tracker buffer: visible {seen}, expected {want}"));
    }
    (bad.is_empty(), if bad.is_empty() { "buffer inspection exact".into() } else { bad.join("; ") })
}

/// Repeats a run set into two directories and compares every written byte.
fn determinism(cfg: &ExperimentConfig, model: &RmotModel) -> Outcome {
    let mut c = cfg.clone();
    c.run.kind = AttackKind::Pixel;
    c.run.seeds = cfg.run.seeds[..3].to_vec();
    let mut dumps = Vec::new();
    for rep in 0..2 {
        let dir = out_dir().join(format!("determinism_{rep}"));
        let _ = fs::remove_dir_all(&dir);
        c.run.out = dir.clone();
        harness::run_seeds(&c, model).expect("runs");
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir.join("runs"))
            .expect("runs dir")
            .map(|e| {
                let p = e.expect("entry").path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).expect("read"))
            })
            .collect();
        files.sort();
        dumps.push(files);
    }
    let csvs = dumps[0].iter().filter(|(n, _)| n.ends_with(".csv")).count();
    (
        dumps[0] == dumps[1] && csvs == c.run.seeds.len(),
        format!("{} files per repetition, identical: {}", dumps[0].len(), dumps[0] == dumps[1]),
    )
}
