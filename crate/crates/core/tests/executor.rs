use std::time::{Duration, Instant};

use edgetier::domain::{ArtifactRef, ResourceVector, RuntimeKind, TaskId, TaskSpec, TaskState};
use edgetier::executor::archive::{self, ArchiveManifest, Dependency};
use edgetier::executor::{ExecEvent, ExecutorConfig, ExecutorHost, StageError};

fn shell_archive(script: &str, deps: Vec<Dependency>) -> Vec<u8> {
    let manifest = ArchiveManifest {
        name: "job".into(),
        runtime: RuntimeKind::ShellScript,
        entry: "run.sh".into(),
        args: Vec::new(),
        dependencies: deps,
    };
    archive::build(&manifest, &[("run.sh", script.as_bytes())]).unwrap()
}

fn shell_spec(bytes: &[u8]) -> TaskSpec {
    let mut spec = TaskSpec::sim("job", "run.sh", ResourceVector::new(0.1, 16));
    spec.runtime = RuntimeKind::ShellScript;
    spec.artifact = ArtifactRef::of(bytes);
    spec
}

fn host(dir: &tempfile::TempDir) -> ExecutorHost {
    let mut config = ExecutorConfig::detect(dir.path(), 1024);
    config.available.insert("sh".into());
    ExecutorHost::new(config)
}

fn wait_for_exit(host: &mut ExecutorHost) -> ExecEvent {
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        if let Some(ev) = host.poll(0).pop() {
            return ev;
        }
        assert!(Instant::now() < deadline, "task never exited");
        std::thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn shell_exit_code_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut host = host(&dir);
    let bytes = shell_archive("echo hello\necho oops >&2\nexit 3\n", vec![]);
    let spec = shell_spec(&bytes);
    let id = TaskId::from("job.1");
    host.stage(&id, &spec, &bytes, 0).unwrap();
    assert!(dir.path().join("job.1/app/run.sh").is_file());
    assert!(dir.path().join("job.1/manifest").is_file());
    assert_eq!(host.run(&id, &spec, 0).unwrap().state, TaskState::Running);

    let ev = wait_for_exit(&mut host);
    assert_eq!((ev.state, ev.exit_status), (TaskState::Failed, Some(3)));
    let (out, err) = host.logs(&id).unwrap();
    assert_eq!((out.as_str(), err.as_str()), ("hello\n", "oops\n"));

    assert!(host.acknowledge(&id).unwrap());
    assert!(!dir.path().join("job.1").exists());
}

#[test]
fn clean_exit_finishes() {
    let dir = tempfile::tempdir().unwrap();
    let mut host = host(&dir);
    let bytes = shell_archive("exit 0\n", vec![]);
    let spec = shell_spec(&bytes);
    let id = TaskId::from("ok.1");
    host.stage(&id, &spec, &bytes, 0).unwrap();
    host.run(&id, &spec, 0).unwrap();
    let ev = wait_for_exit(&mut host);
    assert_eq!((ev.state, ev.exit_status), (TaskState::Finished, Some(0)));
}

#[cfg(unix)]
#[test]
fn kill_reaps_the_whole_group() {
    let dir = tempfile::tempdir().unwrap();
    let mut host = host(&dir);
    // The background child writes its pid so we can check it is gone too.
    let bytes = shell_archive("sleep 60 &\necho $! > child.pid\nwait\n", vec![]);
    let spec = shell_spec(&bytes);
    let id = TaskId::from("long.1");
    host.stage(&id, &spec, &bytes, 0).unwrap();
    host.run(&id, &spec, 0).unwrap();

    let pid_file = dir.path().join("long.1/app/child.pid");
    let deadline = Instant::now() + Duration::from_secs(10);
    let pid: i32 = loop {
        if let Some(pid) = std::fs::read_to_string(&pid_file).ok().and_then(|s| s.trim().parse().ok()) {
            break pid;
        }
        assert!(Instant::now() < deadline, "child never started");
        std::thread::sleep(Duration::from_millis(10));
    };

    let ev = host.kill(&id).unwrap();
    assert_eq!(ev.state, TaskState::Killed);
    assert!(!host.is_live(&id));
    assert!(host.poll(0).is_empty());

    let deadline = Instant::now() + Duration::from_secs(5);
    while std::path::Path::new(&format!("/proc/{pid}")).exists() {
        let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).unwrap_or_default();
        // A zombie reparented to init counts as dead.
        if stat.split_whitespace().nth(2) == Some("Z") {
            break;
        }
        assert!(Instant::now() < deadline, "grandchild {pid} survived the kill");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn tampered_archive_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut host = host(&dir);
    let bytes = shell_archive("exit 0\n", vec![]);
    let spec = shell_spec(&bytes);
    let other = shell_archive("exit 1\n", vec![]);
    let err = host.stage(&"t.1".into(), &spec, &other, 0).unwrap_err();
    assert!(matches!(err, StageError::HashMismatch { ref expected, .. } if *expected == spec.artifact.hash));
    assert!(host.sandbox(&"t.1".into()).is_none());
    assert!(!dir.path().join("t.1").exists());
}

#[test]
fn missing_dependency_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut host = host(&dir);
    let deps = vec![Dependency {
        name: "libfrobnicate".into(),
        version: "2".into(),
    }];
    let bytes = shell_archive("exit 0\n", deps);
    let spec = shell_spec(&bytes);
    let err = host.stage(&"d.1".into(), &spec, &bytes, 0).unwrap_err();
    assert!(matches!(err, StageError::MissingDependency(ref d) if d == "libfrobnicate"));

    let mut spec = spec;
    spec.runtime = RuntimeKind::GroovyApp;
    let mut host = ExecutorHost::new(ExecutorConfig {
        work_dir: dir.path().to_path_buf(),
        available: ["sh".to_string()].into(),
        disk_capacity_mb: 1024,
    });
    let bytes = shell_archive("exit 0\n", vec![]);
    spec.artifact = ArtifactRef::of(&bytes);
    let err = host.stage(&"g.1".into(), &spec, &bytes, 0).unwrap_err();
    assert!(matches!(err, StageError::MissingDependency(ref d) if d == "groovy"));
}

#[test]
fn disk_budget_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let mut host = ExecutorHost::new(ExecutorConfig {
        work_dir: dir.path().to_path_buf(),
        available: ["sh".to_string()].into(),
        disk_capacity_mb: 100,
    });
    let bytes = shell_archive("exit 0\n", vec![]);
    let mut spec = shell_spec(&bytes);
    spec.required = spec.required.with_disk(60);
    host.stage(&"a.1".into(), &spec, &bytes, 0).unwrap();
    assert_eq!(host.free_disk_mb(), 40);
    let err = host.stage(&"a.2".into(), &spec, &bytes, 0).unwrap_err();
    assert!(matches!(err, StageError::NoSpace { needed_mb: 60, free_mb: 40 }));
    assert!(matches!(
        host.stage(&"a.1".into(), &spec, &bytes, 0),
        Err(StageError::AlreadyStaged(_))
    ));
}

#[test]
fn archive_without_manifest_is_rejected() {
    let bytes = {
        use std::io::Write;
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&[0u8; 1024]).unwrap();
        enc.finish().unwrap()
    };
    assert!(archive::inspect(&bytes).is_err());
}
