use std::fs;
use std::path::Path;
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use stagehand_core::dsl::parse_str;
use stagehand_core::httpd::wait_until_refused;
use stagehand_core::pipeline::*;
use tempfile::TempDir;

const WAIT: Duration = Duration::from_secs(30);

struct Fixture {
    _root: TempDir,
    repo: std::path::PathBuf,
    data: std::path::PathBuf,
    target: std::path::PathBuf,
}

fn fixture() -> Fixture {
    let root = tempfile::tempdir().unwrap();
    let repo = root.path().join("repo");
    let target = root.path().join("target");
    fs::create_dir_all(&repo).unwrap();
    fs::create_dir_all(&target).unwrap();
    fs::write(repo.join("index.html"), "<h1>hi</h1>\n").unwrap();
    fs::write(repo.join("any.html"), "any\n").unwrap();
    fs::write(repo.join("Jenkinsfile"), "pipeline {}\n").unwrap();
    Fixture { data: root.path().join("data"), repo, target, _root: root }
}

fn spec(src: &str, repo: &Path) -> PipelineSpec {
    let src = src.replace("@REPO@", &repo.to_string_lossy());
    validate(&parse_str(&src, "test.fl").unwrap()).unwrap()
}

fn engine(fx: &Fixture, specs: Vec<PipelineSpec>) -> Engine {
    Engine::start(EngineConfig::new(&fx.data), specs).unwrap()
}

fn full_pipeline(fx: &Fixture, gate_timeout: f64) -> PipelineSpec {
    let src = format!(
        r#"pipeline "site" {{
  trigger {{
    scm = "dir"
    repo = "@REPO@"
  }}
  stage "pull" {{ checkout = true }}
  stage "build" {{ steps = ["test -f index.html", "echo built $REVISION"] }}
  stage "test" {{
    ephemeral_env = true
    job "a" {{ steps = ["echo $JOB_NAME $TEST_ENV_URL"] }}
    job "b" {{ steps = ["test -s any.html"] }}
  }}
  stage "deploy" {{
    approval {{
      prompt = "Ship it?"
      timeout = {gate_timeout}
    }}
    deploy {{
      target = "{}"
      files = ["any.html", "index.html", "Jenkinsfile"]
    }}
  }}
}}"#,
        fx.target.display()
    );
    spec(&src, &fx.repo)
}

fn steps_pipeline(name: &str, stages: &[&str]) -> String {
    let mut src = format!("pipeline \"{name}\" {{\n trigger {{\n scm = \"dir\"\n repo = \"@REPO@\"\n }}\n");
    for (i, cmd) in stages.iter().enumerate() {
        src.push_str(&format!(" stage \"s{}\" {{ steps = [\"{cmd}\"] }}\n", i + 1));
    }
    src.push('}');
    src
}

fn wait_state(e: &Engine, id: &str, state: RunState) -> Run {
    let run = e.wait_for(id, WAIT, |r| r.state == state).unwrap();
    assert_eq!(run.state, state, "{run:#?}");
    run
}

fn full_log(e: &Engine, id: &str) -> Vec<String> {
    e.log(id, 0, usize::MAX).unwrap().events
}

#[test]
fn approved_run_deploys_every_file() {
    let fx = fixture();
    let e = engine(&fx, vec![full_pipeline(&fx, 60.0)]);
    let run = e.enqueue("site", None, Cause::Manual).unwrap();
    assert_eq!(run.id, "site-1");
    let waiting = wait_state(&e, &run.id, RunState::WaitingApproval);
    let statuses: Vec<StageStatus> = waiting.stage_results.iter().map(|s| s.status).collect();
    assert_eq!(
        statuses,
        [StageStatus::Succeeded, StageStatus::Succeeded, StageStatus::Succeeded, StageStatus::WaitingApproval]
    );
    assert_eq!(waiting.waiting_gate().unwrap().1.prompt, "Ship it?");
    assert!(fs::read_dir(&fx.target).unwrap().next().is_none());

    let after = e.resolve_approval(&run.id, Decision::Approve, "ops").unwrap();
    assert_eq!(after.state, RunState::Running);
    let done = e.wait_terminal(&run.id, WAIT).unwrap();
    assert_eq!(done.state, RunState::Succeeded, "{:?}", full_log(&e, &run.id));
    for f in ["any.html", "index.html", "Jenkinsfile"] {
        assert_eq!(fs::read(fx.target.join(f)).unwrap(), fs::read(fx.repo.join(f)).unwrap());
    }

    let log = full_log(&e, &run.id);
    for f in ["any.html", "index.html", "Jenkinsfile"] {
        let want = format!("[deploy] out: '{f}' -> '{}'", fx.target.join(f).display());
        assert!(log.iter().any(|l| l.ends_with(&want)), "missing {want}");
    }
    assert!(log.last().unwrap().ends_with("] [run] sys: Finished: SUCCESS"));
    assert!(log.iter().any(|l| l.contains("[test/a] out: a http://127.0.0.1:")));

    let m = done.metrics.unwrap();
    assert_eq!(m.first_failure_stage_ordinal, None);
    assert!(m.queue_latency_s >= 0.0);
    let max_stage = m.stage_durations.iter().map(|d| d.duration_s).fold(0.0, f64::max);
    assert!(m.total_duration_s >= max_stage);

    // the log file on disk equals the API view, and run.json equals the record
    let dir = fx.data.join("runs/site/site-1");
    let on_disk: Vec<String> = fs::read_to_string(dir.join("log")).unwrap().lines().map(String::from).collect();
    assert_eq!(on_disk, log);
    let persisted: Run = serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(persisted, e.run(&run.id).unwrap());
}

#[test]
fn rejected_run_deploys_nothing() {
    let fx = fixture();
    let e = engine(&fx, vec![full_pipeline(&fx, 60.0)]);
    let run = e.enqueue("site", None, Cause::Manual).unwrap();
    wait_state(&e, &run.id, RunState::WaitingApproval);
    let aborted = e.resolve_approval(&run.id, Decision::Reject, "qa").unwrap();
    assert_eq!(aborted.state, RunState::Aborted);
    let gate = aborted.stage_results[3].approval.as_ref().unwrap();
    assert_eq!(gate.decided_by.as_deref(), Some("qa"));
    assert_eq!(gate.decision, Some(Decision::Reject));
    assert!(matches!(
        e.resolve_approval(&run.id, Decision::Approve, "x"),
        Err(EngineError::NotWaiting { .. })
    ));
    std::thread::sleep(Duration::from_millis(200));
    assert!(fs::read_dir(&fx.target).unwrap().next().is_none());
    assert!(full_log(&e, &run.id).last().unwrap().ends_with("sys: Finished: ABORTED"));
}

#[test]
fn gate_times_out() {
    let fx = fixture();
    let e = engine(&fx, vec![full_pipeline(&fx, 0.3)]);
    let run = e.enqueue("site", None, Cause::Manual).unwrap();
    let done = e.wait_terminal(&run.id, WAIT).unwrap();
    assert_eq!(done.state, RunState::Aborted);
    assert!(done.reason.unwrap().starts_with("ApprovalTimeout"));
    assert!(done.stage_results[3].approval.as_ref().unwrap().timed_out);
    assert!(fs::read_dir(&fx.target).unwrap().next().is_none());
}

#[test]
fn concurrent_decisions_record_exactly_one() {
    let fx = fixture();
    let src = "pipeline \"g\" {\n trigger {\n scm = \"dir\"\n repo = \"@REPO@\"\n }\n stage \"d\" {\n approval {}\n steps = [\"true\"] }\n}";
    let e = engine(&fx, vec![spec(src, &fx.repo)]);
    for i in 0..20 {
        let rev = format!("{:064x}", i);
        let run = e.enqueue("g", Some(&rev), Cause::Manual).unwrap();
        wait_state(&e, &run.id, RunState::WaitingApproval);
        let barrier = Arc::new(Barrier::new(2));
        let results: Vec<_> = [Decision::Approve, Decision::Reject]
            .into_iter()
            .map(|d| {
                let (e, b, id) = (e.clone(), barrier.clone(), run.id.clone());
                std::thread::spawn(move || {
                    b.wait();
                    e.resolve_approval(&id, d, "racer")
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().unwrap())
            .collect();
        let wins = results.iter().filter(|r| r.is_ok()).count();
        let losses = results.iter().filter(|r| matches!(r, Err(EngineError::NotWaiting { .. }))).count();
        assert_eq!((wins, losses), (1, 1));
        let done = e.wait_terminal(&run.id, WAIT).unwrap();
        assert!(done.state.is_terminal());
        assert!(done.stage_results[0].approval.as_ref().unwrap().decision.is_some());
    }
}

#[test]
fn fail_fast_skips_later_stages() {
    let fx = fixture();
    let e = engine(&fx, vec![spec(&steps_pipeline("p", &["true", "exit 3", "true", "true"]), &fx.repo)]);
    let run = e.enqueue("p", None, Cause::Manual).unwrap();
    let done = e.wait_terminal(&run.id, WAIT).unwrap();
    assert_eq!(done.state, RunState::Failed);
    let statuses: Vec<StageStatus> = done.stage_results.iter().map(|s| s.status).collect();
    assert_eq!(statuses, [StageStatus::Succeeded, StageStatus::Failed, StageStatus::Skipped, StageStatus::Skipped]);
    assert_eq!(done.metrics.unwrap().first_failure_stage_ordinal, Some(2));
    assert!(done.reason.unwrap().contains("exited with code 3"));
    let log = full_log(&e, &run.id);
    assert!(log.last().unwrap().ends_with("sys: Finished: FAILURE"));
    assert!(log.iter().any(|l| l.contains("[s2] sys: + exit 3")));
}

#[test]
fn earlier_failure_is_cheaper() {
    let fx = fixture();
    let a = spec(&steps_pipeline("early", &["exit 1", "sleep 0.2", "sleep 0.2"]), &fx.repo);
    let b = spec(&steps_pipeline("late", &["sleep 0.2", "sleep 0.2", "exit 1"]), &fx.repo);
    let e = engine(&fx, vec![a, b]);
    let ra = e.enqueue("early", None, Cause::Manual).unwrap();
    let ma = e.wait_terminal(&ra.id, WAIT).unwrap().metrics.unwrap();
    let rb = e.enqueue("late", None, Cause::Manual).unwrap();
    let mb = e.wait_terminal(&rb.id, WAIT).unwrap().metrics.unwrap();
    assert_eq!((ma.first_failure_stage_ordinal, mb.first_failure_stage_ordinal), (Some(1), Some(3)));
    assert!(ma.time_to_failure_s.unwrap() < mb.time_to_failure_s.unwrap());
}

#[test]
fn dedupe_and_fifo() {
    let fx = fixture();
    let src = "pipeline \"g\" {\n trigger {\n scm = \"dir\"\n repo = \"@REPO@\"\n }\n stage \"d\" {\n approval {}\n steps = [\"echo $REVISION\"] }\n}";
    let e = engine(&fx, vec![spec(src, &fx.repo)]);
    let (ra, rb) = (format!("{:064x}", 0xa), format!("{:064x}", 0xb));
    let blocker = e.enqueue("g", Some(&ra), Cause::Manual).unwrap();
    wait_state(&e, &blocker.id, RunState::WaitingApproval);

    let b1 = e.enqueue("g", Some(&rb), Cause::Poll).unwrap();
    let b2 = e.enqueue("g", Some(&rb), Cause::Webhook).unwrap();
    assert_eq!(b1.id, b2.id);
    let a2 = e.enqueue("g", Some(&ra), Cause::Manual).unwrap();
    assert_ne!(a2.id, blocker.id, "a running run is not a dedupe target");
    assert_eq!(e.run(&b1.id).unwrap().state, RunState::Queued);

    e.resolve_approval(&blocker.id, Decision::Approve, "x").unwrap();
    wait_state(&e, &b1.id, RunState::WaitingApproval);
    assert_eq!(e.run(&a2.id).unwrap().state, RunState::Queued);
    e.resolve_approval(&b1.id, Decision::Approve, "x").unwrap();
    wait_state(&e, &a2.id, RunState::WaitingApproval);
    e.resolve_approval(&a2.id, Decision::Approve, "x").unwrap();
    let last = e.wait_terminal(&a2.id, WAIT).unwrap();

    let first = e.run(&blocker.id).unwrap();
    let second = e.run(&b1.id).unwrap();
    assert!(first.finished_at.unwrap() <= second.started_at.unwrap());
    assert!(second.finished_at.unwrap() <= last.started_at.unwrap());
    assert_eq!(e.runs("g", 10).unwrap().iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["g-3", "g-2", "g-1"]);
    assert!(matches!(e.enqueue("nope", None, Cause::Manual), Err(EngineError::UnknownPipeline(_))));
    assert!(matches!(e.enqueue("g", Some("zz"), Cause::Manual), Err(EngineError::InvalidRevision(_))));
}

fn parallel_pipeline(jobs: &[&str]) -> String {
    let mut src = String::from("pipeline \"par\" {\n trigger {\n scm = \"dir\"\n repo = \"@REPO@\"\n }\n stage \"t\" {\n");
    for (i, cmd) in jobs.iter().enumerate() {
        src.push_str(&format!("  job \"j{i}\" {{ steps = [\"{cmd}\"] }}\n"));
    }
    src.push_str(" }\n}");
    src
}

#[test]
fn parallel_jobs_overlap() {
    let fx = fixture();
    let e = engine(&fx, vec![spec(&parallel_pipeline(&["sleep 1", "sleep 1"]), &fx.repo)]);
    let run = e.enqueue("par", None, Cause::Manual).unwrap();
    let done = e.wait_terminal(&run.id, WAIT).unwrap();
    assert_eq!(done.state, RunState::Succeeded);
    let d = done.stage_results[0].duration_s().unwrap();
    assert!(d < 1.8, "parallel stage took {d}s");
}

#[test]
fn parallel_status_matches_truth_table() {
    let fx = fixture();
    for n in 2..=5usize {
        for mask in 0u32..(1 << n) {
            let cmds: Vec<&str> = (0..n).map(|j| if mask & (1 << j) != 0 { "exit 1" } else { "true" }).collect();
            let e = engine(&fx, vec![spec(&parallel_pipeline(&cmds), &fx.repo)]);
            let run = e.enqueue("par", None, Cause::Manual).unwrap();
            let done = e.wait_terminal(&run.id, WAIT).unwrap();
            let stage = &done.stage_results[0];
            let all_ok = mask == 0;
            assert_eq!(stage.status == StageStatus::Succeeded, all_ok);
            assert_eq!(stage.job_results.len(), n);
            for (j, jr) in stage.job_results.iter().enumerate() {
                let want = if mask & (1 << j) != 0 { StageStatus::Failed } else { StageStatus::Succeeded };
                assert_eq!(jr.status, want, "every sibling runs to completion");
            }
            e.shutdown(Duration::from_secs(5));
            fs::remove_dir_all(&fx.data).unwrap();
        }
    }
}

#[test]
fn test_env_torn_down_after_failure() {
    let fx = fixture();
    let src = "pipeline \"p\" {\n trigger {\n scm = \"dir\"\n repo = \"@REPO@\"\n }\n stage \"pull\" { checkout = true }\n stage \"t\" {\n ephemeral_env = true\n steps = [\"echo url=$TEST_ENV_URL\", \"exit 1\"] }\n}";
    let e = engine(&fx, vec![spec(src, &fx.repo)]);
    let run = e.enqueue("p", None, Cause::Manual).unwrap();
    let done = e.wait_terminal(&run.id, WAIT).unwrap();
    assert_eq!(done.state, RunState::Failed);
    let log = full_log(&e, &run.id);
    let url = log.iter().find_map(|l| l.split_once("out: url=").map(|(_, u)| u.to_string())).unwrap();
    let addr = url.trim_start_matches("http://").parse().unwrap();
    assert!(wait_until_refused(addr, Duration::from_secs(2)));
    assert!(log.iter().any(|l| l.ends_with("Test environment torn down")));
}

#[test]
fn missing_deploy_target_fails_run() {
    let fx = fixture();
    let src = "pipeline \"p\" {\n trigger {\n scm = \"dir\"\n repo = \"@REPO@\"\n }\n stage \"pull\" { checkout = true }\n stage \"d\" { deploy {\n target = local_site.prod.path\n files = [\"index.html\"] } }\n}";
    let e = engine(&fx, vec![spec(src, &fx.repo)]);
    let run = e.enqueue("p", None, Cause::Manual).unwrap();
    let done = e.wait_terminal(&run.id, WAIT).unwrap();
    assert_eq!(done.state, RunState::Failed);
    assert!(done.reason.unwrap().starts_with("DeployTargetMissing"));
}

#[test]
fn log_pages_concatenate_to_file() {
    let fx = fixture();
    let e = engine(&fx, vec![spec(&steps_pipeline("p", &["seq 1 25", "echo done >&2"]), &fx.repo)]);
    let run = e.enqueue("p", None, Cause::Manual).unwrap();
    e.wait_terminal(&run.id, WAIT).unwrap();
    let first = e.log(&run.id, 0, 2).unwrap();
    assert_eq!((first.events.len(), first.next_offset, first.complete), (2, 2, false));
    let mut offset = 0;
    let mut lines = Vec::new();
    loop {
        let page = e.log(&run.id, offset, 7).unwrap();
        lines.extend(page.events);
        offset = page.next_offset;
        if page.complete {
            break;
        }
    }
    let file = fs::read_to_string(fx.data.join("runs/p/p-1/log")).unwrap();
    assert_eq!(lines, file.lines().collect::<Vec<_>>());
    assert!(lines.iter().any(|l| l.ends_with("[s2] err: done")));
    let past = e.log(&run.id, 10_000, 5).unwrap();
    assert!(past.events.is_empty() && past.complete);
    assert!(matches!(e.log("p-99", 0, 1), Err(EngineError::UnknownRun(_))));
}

#[test]
fn runs_survive_restart() {
    let fx = fixture();
    let src = full_pipeline(&fx, 60.0);
    let e = engine(&fx, vec![src.clone()]);
    let done = e.enqueue("site", None, Cause::Manual).unwrap();
    wait_state(&e, &done.id, RunState::WaitingApproval);
    e.shutdown(Duration::from_secs(5));
    drop(e);

    let e2 = engine(&fx, vec![src]);
    let reloaded = e2.run("site-1").unwrap();
    assert_eq!(reloaded.state, RunState::Aborted);
    assert!(full_log(&e2, "site-1").last().unwrap().ends_with("Finished: ABORTED"));
    let next = e2.enqueue("site", None, Cause::Manual).unwrap();
    assert_eq!(next.id, "site-2");
}

#[test]
fn old_workspaces_are_pruned() {
    let fx = fixture();
    let mut cfg = EngineConfig::new(&fx.data);
    cfg.retain_workspaces = 2;
    let e = Engine::start(cfg, vec![spec(&steps_pipeline("p", &["pwd"]), &fx.repo)]).unwrap();
    for i in 0..4 {
        let run = e.enqueue("p", Some(&format!("{i:064x}")), Cause::Manual).unwrap();
        e.wait_terminal(&run.id, WAIT).unwrap();
    }
    let mut left: Vec<String> = fs::read_dir(fx.data.join("workspaces/p"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    left.sort();
    assert_eq!(left, ["p-3", "p-4"]);
}

#[test]
fn poller_triggers_once_per_change() {
    let fx = fixture();
    let src = "pipeline \"p\" {\n trigger {\n scm = \"dir\"\n repo = \"@REPO@\"\n poll_interval = 1\n }\n stage \"pull\" { checkout = true }\n}";
    let e = engine(&fx, vec![spec(src, &fx.repo)]);
    e.start_pollers();
    std::thread::sleep(Duration::from_millis(1300));
    assert!(e.runs("p", 10).unwrap().is_empty(), "startup alone must not trigger");

    fs::write(fx.repo.join("index.html"), "<h1>changed</h1>\n").unwrap();
    let t0 = Instant::now();
    while e.runs("p", 10).unwrap().is_empty() && t0.elapsed() < Duration::from_secs(5) {
        std::thread::sleep(Duration::from_millis(20));
    }
    assert!(t0.elapsed() < Duration::from_secs(2), "trigger took {:?}", t0.elapsed());
    std::thread::sleep(Duration::from_millis(2500));
    let runs = e.runs("p", 10).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].cause, Cause::Poll);
    let done = e.wait_terminal(&runs[0].id, WAIT).unwrap();
    assert_eq!(done.state, RunState::Succeeded);
    e.shutdown(Duration::from_secs(5));
}

#[test]
fn metrics_listing() {
    let fx = fixture();
    let e = engine(&fx, vec![spec(&steps_pipeline("p", &["true"]), &fx.repo)]);
    let run = e.enqueue("p", None, Cause::Manual).unwrap();
    e.wait_terminal(&run.id, WAIT).unwrap();
    let m = e.metrics(Some("p"));
    assert_eq!(m.len(), 1);
    assert_eq!(m[0].metrics.outcome, RunState::Succeeded);
    assert!(e.metrics(Some("other")).is_empty());
}
