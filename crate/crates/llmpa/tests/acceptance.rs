//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use llmpa::config::{BackendConfig, RunConfig};
use llmpa::formats::{load_world, read_json};
use llmpa::http::{HttpBackend, HttpConfig};
use llmpa::runner::Runner;
use llmpa_core::backend::{BackendError, BackendRequest, RoleTag};
use llmpa_core::chain::{align_progress, ChainKind, InstructionChain, DEFAULT_MIN_SCORE};
use llmpa_core::episode::{EpisodeResult, PipelineConfig};
use llmpa_core::history::{template_description, Action, Function};
use llmpa_core::layout::{evaluate_detector, iou, BoundingBox, DetectionFixture, DetectionPrediction};
use llmpa_core::metrics::{
    element_accuracy, mean_operation_f1, operation_f1, step_sr, task_sr, StepOutcome,
};
use llmpa_core::prediction::{parse_action_reply, Candidate, CandidateSet, CandidateSource};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

fn runner(world: &str, script: &str) -> Runner {
    let mut config = RunConfig::new(fixture(world), BackendConfig::Scripted { script: fixture(script) });
    config.key_paths = Some(fixture("keypaths.json"));
    Runner::from_config(&config).expect("fixture config loads")
}

fn quiet(cases: u32) -> Config {
    Config { cases, failure_persistence: None, ..Config::default() }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn oracle_ceiling() -> Check {
    let start = Instant::now();
    for (world, script) in [("worlds/flight.json", "scripts/flight_gold.json"), ("worlds/subway.json", "scripts/subway_gold.json")] {
        let r = runner(world, script);
        let first = r.run_config(&PipelineConfig::default()).map_err(|e| format!("{e:#}"))?;
        let second = r.run_config(&PipelineConfig::default()).map_err(|e| format!("{e:#}"))?;
        let rep = &first.report;
        ensure(rep.step_sr == 1.0 && rep.task_sr == 1.0, || format!("{world}: step {} task {}", rep.step_sr, rep.task_sr))?;
        ensure(first.episodes == second.episodes, || format!("{world}: runs differ"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))
}

fn calibration_efficacy() -> Check {
    let r = runner("worlds/subway.json", "scripts/subway_hallucination.json");
    let on = r.run_config(&PipelineConfig::default()).map_err(|e| format!("{e:#}"))?;
    let ep = &on.episodes[0];
    ensure(ep.success, || format!("calibration on failed: {:?} {:?}", ep.end, ep.end_detail))?;
    let attempts = ep.attempts_per_step();
    ensure(attempts.get(4) == Some(&2), || format!("attempts per step {attempts:?}"))?;
    let rejected = &ep.trace.iter().find(|t| t.step_index == 5).unwrap().attempt;
    ensure(rejected.reply == "CLICK Exchange Rights", || format!("{:?}", rejected.reply))?;

    let off = r.run_config(&PipelineConfig::with_toggles(true, true, false)).map_err(|e| format!("{e:#}"))?;
    let ep = &off.episodes[0];
    ensure(!ep.success, || "calibration off succeeded".into())?;
    let no_op = ep.trace.iter().filter_map(|t| t.execution.as_ref()).any(|e| e.no_op);
    ensure(no_op, || "no no-op execution recorded".into())
}

fn ablation_ordering() -> Check {
    let r = runner("worlds/ablation.json", "scripts/ablation.json");
    let steps: usize = r.tasks.iter().map(|t| t.gold_actions.len()).sum();
    ensure(r.tasks.len() >= 8 && steps >= 30, || format!("{} tasks, {steps} steps", r.tasks.len()))?;
    let sr = |g, i, c| r.run_config(&PipelineConfig::with_toggles(g, i, c)).map(|s| s.report.task_sr).map_err(|e| format!("{e:#}"));
    let full = sr(true, true, true)?;
    let singles = [sr(false, true, true)?, sr(true, false, true)?, sr(true, true, false)?];
    let none = sr(false, false, false)?;
    let ordered = singles.iter().all(|&s| full > s && s > none);
    ensure(ordered, || format!("full {full}, singles {singles:?}, all off {none}"))
}

fn random_outcomes() -> impl Strategy<Value = Vec<StepOutcome>> {
    prop::collection::vec((0u8..6, any::<bool>(), any::<bool>(), 0u8..=10), 1..=100).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (task, e, o, f))| StepOutcome::new(format!("t{task}"), i as u32 + 1, e, o, f as f64 / 10.0))
            .collect()
    })
}

fn metric_correctness() -> Check {
    let mut runner = TestRunner::new(quiet(1000));
    runner
        .run(&random_outcomes(), |outcomes| {
            let n = outcomes.len() as f64;
            let mut ok_steps = 0.0;
            let mut ok_elements = 0.0;
            let mut f1_sum = 0.0;
            let mut per_task: BTreeMap<&str, bool> = BTreeMap::new();
            for o in &outcomes {
                let success = o.element_match && o.operation_match;
                if success {
                    ok_steps += 1.0;
                }
                if o.element_match {
                    ok_elements += 1.0;
                }
                f1_sum += o.operation_f1;
                *per_task.entry(&o.task_id).or_insert(true) &= success;
            }
            let ok_tasks = per_task.values().filter(|v| **v).count() as f64;
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
            prop_assert!(close(step_sr(&outcomes).unwrap(), ok_steps / n));
            prop_assert!(close(element_accuracy(&outcomes).unwrap(), ok_elements / n));
            prop_assert!(close(task_sr(&outcomes).unwrap(), ok_tasks / per_task.len() as f64));
            prop_assert!(close(mean_operation_f1(&outcomes).unwrap(), f1_sum / n));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Multiset intersection by repeated removal.
fn brute_f1(p: &[&str], g: &[&str]) -> f64 {
    let mut pool: Vec<&str> = g.to_vec();
    let mut overlap = 0.0;
    for t in p {
        if let Some(i) = pool.iter().position(|x| x == t) {
            pool.remove(i);
            overlap += 1.0;
        }
    }
    if overlap == 0.0 {
        return 0.0;
    }
    let (precision, recall) = (overlap / p.len() as f64, overlap / g.len() as f64);
    2.0 * precision * recall / (precision + recall)
}

fn operation_f1_spots() -> Check {
    let gold = Action::typing("e", "Beijing").unwrap();
    let cases = [
        (Action::typing("e", "Beijing").unwrap(), 1.0),
        (Action::click("e").unwrap(), 0.0),
        (Action::typing("e", "Hangzhou Beijing").unwrap(), 0.8),
    ];
    for (pred, want) in cases {
        let got = operation_f1(&pred, &gold);
        ensure(got == want, || format!("{pred} vs {gold}: {got} != {want}"))?;
    }
    let oracle = brute_f1(&["type", "hangzhou", "beijing"], &["type", "beijing"]);
    ensure((oracle - 0.8).abs() < 1e-12, || format!("oracle gives {oracle}"))
}

fn raster_iou(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> f64 {
    let inside = |r: (i32, i32, i32, i32), x: i32, y: i32| x >= r.0 && x < r.0 + r.2 && y >= r.1 && y < r.1 + r.3;
    let (mut inter, mut union) = (0, 0);
    for x in -5..40 {
        for y in -5..40 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as i32;
            union += (ia || ib) as i32;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Interpolated precision at each recall level k/|GT|, with matches recomputed
/// from scratch for every ranking cutoff.
fn brute_ap(f: &DetectionFixture, threshold: f64) -> f64 {
    let mut order: Vec<usize> = (0..f.predictions.len()).collect();
    order.sort_by(|&a, &b| f.predictions[b].confidence.partial_cmp(&f.predictions[a].confidence).unwrap());
    let n_gt = f.ground_truth.len();
    let mut points = Vec::new();
    for cut in 1..=order.len() {
        let mut used = vec![false; n_gt];
        let mut tp = 0;
        for &p in &order[..cut] {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in f.ground_truth.iter().enumerate() {
                let v = iou(&f.predictions[p].bounds, gt);
                if !used[g] && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, v)) = best {
                if v >= threshold {
                    used[g] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / cut as f64));
    }
    (1..=n_gt)
        .map(|k| {
            let level = k as f64 / n_gt as f64;
            points.iter().filter(|(r, _)| *r >= level - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / n_gt as f64
}

fn detection_evaluator() -> Check {
    let bb = |x, y, w, h| BoundingBox::new(x, y, w, h);
    let ious = [
        (iou(&bb(0.0, 0.0, 2.0, 2.0), &bb(0.0, 0.0, 2.0, 2.0)), 1.0),
        (iou(&bb(0.0, 0.0, 2.0, 2.0), &bb(10.0, 10.0, 2.0, 2.0)), 0.0),
        (iou(&bb(0.0, 0.0, 2.0, 2.0), &bb(1.0, 1.0, 2.0, 2.0)), 1.0 / 7.0),
    ];
    let rasters = [raster_iou((0, 0, 2, 2), (0, 0, 2, 2)), raster_iou((0, 0, 2, 2), (10, 10, 2, 2)), raster_iou((0, 0, 2, 2), (1, 1, 2, 2))];
    for ((got, want), raster) in ious.iter().zip(rasters) {
        ensure((got - want).abs() < 1e-9 && (raster - want).abs() < 1e-9, || format!("iou {got}, raster {raster}, want {want}"))?;
    }
    let pred = |b, c| DetectionPrediction::new(b, c).unwrap();
    let half = evaluate_detector(
        &[pred(bb(0.0, 0.0, 10.0, 10.0), 0.9), pred(bb(50.0, 50.0, 10.0, 10.0), 0.8)],
        &[bb(0.0, 0.0, 10.0, 10.0), bb(20.0, 0.0, 10.0, 10.0)],
        0.75,
    );
    ensure(half == Ok(0.5), || format!("two-box example gives {half:?}"))?;
    let fixtures: Vec<DetectionFixture> = read_json(&fixture("detection/micro.json")).map_err(|e| e.to_string())?;
    for (i, f) in fixtures.iter().enumerate() {
        ensure(f.ground_truth.len() + f.predictions.len() <= 12 && f.ground_truth.len() <= 6, || format!("fixture {i} too large"))?;
        let got = evaluate_detector(&f.predictions, &f.ground_truth, 0.75).map_err(|e| e.to_string())?;
        let want = brute_ap(f, 0.75);
        ensure(got == want, || format!("fixture {i}: AP {got}, oracle {want}"))?;
    }
    Ok(())
}

fn alignment() -> Check {
    let world = load_world(&fixture("worlds/flight.json")).map_err(|e| e.to_string())?;
    let task = &world.tasks[0];
    let chain = InstructionChain::new(ChainKind::Elaborate, &task.description, task.gold_chain.clone().unwrap()).map_err(|e| e.to_string())?;
    ensure(chain.len() == 7, || format!("chain has {} steps", chain.len()))?;
    // Gold actions executed once chain step k is done.
    let done_after = [0usize, 1, 2, 4, 5, 7, 8, 9];
    let mut page = world.start_page.clone();
    let mut pads = Vec::new();
    for a in &task.gold_actions {
        let step = world.apply(&page, a);
        pads.push(template_description(a, world.page(&page).unwrap(), world.page(&step.next_page).unwrap()));
        page = step.next_page;
    }
    for (k, &n) in done_after.iter().enumerate() {
        let a = align_progress(&chain, &pads[..n], DEFAULT_MIN_SCORE);
        ensure(a.remaining_steps == chain.steps[k..], || format!("prefix {k}: remaining {:?}", a.remaining_steps))?;
    }

    let pool: Vec<String> = pads.iter().cloned().chain(chain.steps.iter().cloned()).chain(["zzz".to_string(), "page changed".to_string()]).collect();
    let mut fuzz = TestRunner::new(quiet(500));
    fuzz.run(&(prop::collection::vec(0..pool.len(), 0..12), 0..pool.len()), |(picks, extra)| {
        let base: Vec<String> = picks.iter().map(|&i| pool[i].clone()).collect();
        let before = align_progress(&chain, &base, DEFAULT_MIN_SCORE).matched_prefix_end;
        let mut longer = base.clone();
        longer.push(pool[extra].clone());
        let after = align_progress(&chain, &longer, DEFAULT_MIN_SCORE).matched_prefix_end;
        prop_assert!(after >= before);
        Ok(())
    })
    .map_err(|e| e.to_string())
}

fn anti_hallucination() -> Check {
    let words = prop::sample::select(vec!["Search", "Exchange Now", "Log in", "PAGE", "7", "0", "1", "", "::", "x y"]);
    let reply = (prop::sample::select(vec!["CLICK", "SCROLL", "TYPE", "click", "Sure:", ""]), words.clone(), prop::option::of(words.clone()), ".*")
        .prop_map(|(f, e, v, tail)| match v {
            Some(v) => format!("{f} {e} :: {v}\n{tail}"),
            None => format!("{f} {e}\n{tail}"),
        });
    let replies = prop_oneof![reply, ".*"];
    let candidates = prop::collection::vec(prop_oneof![words, prop::sample::select(vec!["Date", "Nov 4", "Exchange (under: Rights)"])], 1..6);
    let mut fuzz = TestRunner::new(quiet(2000));
    fuzz.run(&(replies, candidates), |(reply, texts)| {
        let set = CandidateSet {
            entries: texts.iter().map(|t| Candidate { display_text: t.to_string(), source: CandidateSource::PageSections }).collect(),
            max_size: 50,
        };
        if let Ok(action) = parse_action_reply(&reply, &set) {
            let page_scroll = action.function() == Function::Scroll && action.element() == "PAGE";
            prop_assert!(set.contains(action.element()) || page_scroll, "{reply:?} gave {action}");
        }
        Ok(())
    })
    .map_err(|e| e.to_string())
}

fn termination() -> Check {
    let start = Instant::now();
    let configs = [
        PipelineConfig::default(),
        PipelineConfig::with_toggles(false, false, false),
        PipelineConfig::with_toggles(true, true, false),
    ];
    for script in ["scripts/garbage.json", "scripts/loop.json"] {
        for world in ["worlds/flight.json", "worlds/subway.json", "worlds/ablation.json"] {
            let r = runner(world, script);
            for config in &configs {
                let run = r.run_config(config).map_err(|e| format!("{e:#}"))?;
                let over: Vec<&EpisodeResult> = run
                    .episodes
                    .iter()
                    .zip(&r.tasks)
                    .filter(|(e, t)| e.steps_taken() > config.step_cap_for(t))
                    .map(|(e, _)| e)
                    .collect();
                ensure(over.is_empty(), || format!("{script} on {world}: {} episodes over the cap", over.len()))?;
                ensure(run.report.task_sr == 0.0, || format!("{script} on {world} succeeded"))?;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))
}

struct Stub {
    endpoint: String,
    hits: Arc<Mutex<usize>>,
}

/// Serves the canned `(status, body)` responses in order, then 503s.
fn stub_server(responses: Vec<(u16, String)>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let hits = Arc::new(Mutex::new(0));
    let counter = Arc::clone(&hits);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0; length];
            let _ = reader.read_exact(&mut body);
            let n = {
                let mut h = counter.lock().unwrap();
                *h += 1;
                *h
            };
            let (status, text) = responses.get(n - 1).cloned().unwrap_or((503, "exhausted".into()));
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    Stub { endpoint, hits }
}

fn http_contract() -> Check {
    let ok_body = r#"{"choices":[{"index":0,"message":{"role":"assistant","content":"CLICK 3"}}]}"#.to_string();
    let request = BackendRequest::new(RoleTag::ActionPred, "TASK: x").unwrap();
    let backend = |stub: &Stub| {
        let config = HttpConfig { endpoint: stub.endpoint.clone(), model_name: "stub".into(), timeout_ms: 5_000, max_retries: 3, backoff_base_ms: 5 };
        HttpBackend::with_api_key(config, Some("k".into())).unwrap()
    };

    let stub = stub_server(vec![(200, ok_body.clone())]);
    let (result, stats) = backend(&stub).complete_with_stats(&request);
    ensure(result.as_deref() == Ok("CLICK 3") && stats.attempts == 1 && stats.retries == 0, || format!("success: {result:?} {stats:?}"))?;
    ensure(*stub.hits.lock().unwrap() == 1, || "success: server hits".into())?;

    let stub = stub_server(vec![(400, r#"{"error":"bad"}"#.into()), (200, ok_body.clone())]);
    let (result, stats) = backend(&stub).complete_with_stats(&request);
    ensure(matches!(result, Err(BackendError::Request { status: 400, .. })) && stats.attempts == 1, || format!("4xx: {result:?} {stats:?}"))?;
    ensure(*stub.hits.lock().unwrap() == 1, || "4xx: retried".into())?;

    let stub = stub_server(vec![(500, "oops".into()), (500, "oops".into()), (200, ok_body)]);
    let (result, stats) = backend(&stub).complete_with_stats(&request);
    ensure(result.as_deref() == Ok("CLICK 3") && stats.attempts == 3 && stats.retries == 2, || format!("5xx: {result:?} {stats:?}"))?;
    ensure(*stub.hits.lock().unwrap() == 3, || "5xx: server hits".into())?;

    let stub = stub_server(vec![]);
    let (result, stats) = backend(&stub).complete_with_stats(&request);
    ensure(matches!(result, Err(BackendError::Transport { attempts: 4, .. })) && stats.attempts == 4, || format!("exhausted: {result:?} {stats:?}"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("oracle ceiling on gold scripts", oracle_ceiling),
        ("calibration rejects hallucinated element", calibration_efficacy),
        ("ablation task SR ordering", ablation_ordering),
        ("metrics match brute-force recount", metric_correctness),
        ("operation F1 spot values", operation_f1_spots),
        ("detection AP and IoU", detection_evaluator),
        ("progress alignment", alignment),
        ("replies never leave the candidate set", anti_hallucination),
        ("adversarial backends terminate", termination),
        ("http backend contract", http_contract),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(()) => println!("PASS criterion {}: {name}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
