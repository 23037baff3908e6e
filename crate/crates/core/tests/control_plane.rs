use std::sync::Arc;

use edgetier::control::{
    ActionOutcome, ControlError, ControlPlane, DeploymentManifest, DeploymentRequest, NoLogs, Placement, TaskAction,
    TaskFilter,
};
use edgetier::domain::{
    AgentId, AttributeConstraint, AttributeSet, AttributeValue, Predicate, ResourceVector, RuntimeKind, TaskId, TaskState,
};
use edgetier::events::Outbox;
use edgetier::master::{AgentRecord, AGENT_ID_ATTRIBUTE};
use edgetier::persistence::{MemStore, Store, StoreExt};
use edgetier::protocol::{Body, OperatorCommand};

fn manifest(name: &str, instances: u32) -> DeploymentManifest {
    DeploymentManifest::parse(&format!(
        r#"{{"task_name":"{name}","runtime":"sim-task","entry":"forever","instances":{instances},
            "required":{{"cpus":0.5,"mem_mb":64}}}}"#
    ))
    .unwrap()
}

fn request(name: &str, instances: u32) -> DeploymentRequest {
    DeploymentRequest {
        manifest: manifest(name, instances),
        archive: Vec::new(),
        placement: Placement::Auto,
        request_id: None,
    }
}

fn plane() -> (ControlPlane, Arc<MemStore>) {
    let store = Arc::new(MemStore::new());
    let cp = ControlPlane::new(store.clone() as Arc<dyn Store>, "fw").unwrap();
    (cp, store)
}

fn agent(store: &MemStore, id: &str, attrs: AttributeSet) {
    let rec = AgentRecord::new(
        AgentId::from(id),
        "gw".into(),
        ResourceVector::new(1.0, 512),
        attrs.with(AGENT_ID_ATTRIBUTE, AttributeValue::text(id)),
    );
    store.put_agent(&rec).unwrap();
}

#[test]
fn two_instances_make_two_queued_tasks() {
    let (mut cp, store) = plane();
    let mut out = Outbox::default();
    let ids = cp.submit(request("web", 2), 4, &mut out).unwrap();
    assert_eq!(ids, vec![TaskId::from("web.1"), TaskId::from("web.2")]);
    for id in &ids {
        let rec = store.get_task(id.as_str()).unwrap();
        assert_eq!(rec.state, TaskState::Queued);
        assert_eq!(rec.state_history, vec![(TaskState::Queued, 4)]);
    }
    assert_eq!(out.messages.len(), 1);
    assert_eq!(
        out.messages[0].body,
        Body::Operator(OperatorCommand::Submit { task_ids: ids })
    );
    let rows = cp.list_tasks(&TaskFilter::default()).unwrap();
    assert_eq!(rows[0].task_id.as_str(), "web.2");
    assert!(rows.iter().all(|r| r.runtime == RuntimeKind::SimTask.label() && r.agent.is_none()));
}

#[test]
fn numbering_continues_after_restart() {
    let (mut cp, store) = plane();
    cp.submit(request("web", 3), 0, &mut Outbox::default()).unwrap();
    let mut cp = ControlPlane::new(store as Arc<dyn Store>, "fw").unwrap();
    let ids = cp.submit(request("db", 1), 1, &mut Outbox::default()).unwrap();
    assert_eq!(ids, vec![TaskId::from("db.4")]);
}

#[test]
fn manual_placement_pins_to_named_agents() {
    let (mut cp, store) = plane();
    agent(&store, "gw:a", AttributeSet::new());
    agent(&store, "gw:b", AttributeSet::new());
    let mut req = request("pin", 1);
    req.placement = Placement::Manual {
        agents: vec!["gw:a".into()],
    };
    let ids = cp.submit(req, 0, &mut Outbox::default()).unwrap();
    let spec = store.get_task(ids[0].as_str()).unwrap().spec;
    assert_eq!(
        spec.constraints.last().unwrap(),
        &AttributeConstraint::equals(AGENT_ID_ATTRIBUTE, AttributeValue::text("gw:a"))
    );

    let mut req = request("pin", 1);
    req.placement = Placement::Manual {
        agents: vec!["gw:a".into(), "gw:b".into()],
    };
    let ids = cp.submit(req, 0, &mut Outbox::default()).unwrap();
    let c = store.get_task(ids[0].as_str()).unwrap().spec.constraints.pop().unwrap();
    assert!(matches!(c.predicate, Predicate::OneOf(ref v) if v.len() == 2));

    let mut req = request("pin", 1);
    req.placement = Placement::Manual {
        agents: vec!["gw:zzz".into()],
    };
    assert!(matches!(
        cp.submit(req, 0, &mut Outbox::default()),
        Err(ControlError::UnknownAgent(a)) if a.as_str() == "gw:zzz"
    ));
}

#[test]
fn bad_manifests_are_rejected() {
    assert!(matches!(
        DeploymentManifest::parse(r#"{"task_name":"x","entry":"forever"}"#),
        Err(ControlError::InvalidManifest(_))
    ));
    assert!(matches!(
        DeploymentManifest::parse(r#"{"task_name":"x","runtime":"cobol","entry":"run"}"#),
        Err(ControlError::InvalidManifest(_))
    ));
    let (mut cp, store) = plane();
    let mut req = request("x", 1);
    req.manifest.entry = "dance".into();
    assert!(matches!(
        cp.submit(req, 0, &mut Outbox::default()),
        Err(ControlError::InvalidManifest(_))
    ));
    let mut req = request("x", 1);
    req.manifest.instances = 0;
    assert!(matches!(
        cp.submit(req, 0, &mut Outbox::default()),
        Err(ControlError::InvalidManifest(_))
    ));
    assert!(store.tasks().unwrap().is_empty());
}

#[test]
fn archive_is_stored_by_hash() {
    let (mut cp, store) = plane();
    let mut req = request("app", 1);
    req.archive = b"not really a tarball".to_vec();
    let ids = cp.submit(req, 0, &mut Outbox::default()).unwrap();
    let hash = store.get_task(ids[0].as_str()).unwrap().spec.artifact.hash;
    assert_eq!(store.get_artifact(&hash).unwrap(), b"not really a tarball");
}

#[test]
fn actions_follow_task_state() {
    let (mut cp, store) = plane();
    let id = cp.submit(request("svc", 1), 0, &mut Outbox::default()).unwrap().remove(0);
    let mut rec = store.get_task(id.as_str()).unwrap();
    rec.assign(TaskState::Staging, "gw:a".into(), 1).unwrap();
    rec.transition(TaskState::Running, 2).unwrap();
    store.put_task(&rec).unwrap();

    let mut out = Outbox::default();
    assert!(matches!(
        cp.task_action(&NoLogs, &id, TaskAction::Restart, None, &mut out),
        Err(ControlError::IllegalAction(TaskState::Running))
    ));
    assert!(out.messages.is_empty());
    let done = cp.task_action(&NoLogs, &id, TaskAction::Kill, None, &mut out).unwrap();
    assert!(matches!(done, ActionOutcome::Accepted { action: TaskAction::Kill, .. }));
    assert_eq!(out.messages[0].body, Body::Operator(OperatorCommand::Kill { task_id: id.clone() }));

    rec.transition(TaskState::Failed, 3).unwrap();
    store.put_task(&rec).unwrap();
    assert!(matches!(
        cp.task_action(&NoLogs, &id, TaskAction::Kill, None, &mut Outbox::default()),
        Err(ControlError::IllegalAction(TaskState::Failed))
    ));
    assert!(cp
        .task_action(&NoLogs, &id, TaskAction::Restart, None, &mut Outbox::default())
        .is_ok());
    assert!(matches!(
        cp.task_action(&NoLogs, &"ghost.9".into(), TaskAction::Kill, None, &mut Outbox::default()),
        Err(ControlError::UnknownTask(_))
    ));
    let row = &cp.list_tasks(&TaskFilter::default()).unwrap()[0];
    assert_eq!((row.started, row.stopped), (Some(2), Some(3)));
}

#[test]
fn request_ids_deduplicate() {
    let (mut cp, store) = plane();
    let mut req = request("once", 2);
    req.request_id = Some("r1".into());
    let a = cp.submit(req.clone(), 0, &mut Outbox::default()).unwrap();
    let mut out = Outbox::default();
    let b = cp.submit(req, 0, &mut out).unwrap();
    assert_eq!(a, b);
    assert!(out.messages.is_empty());
    assert_eq!(store.tasks().unwrap().len(), 2);

    let mut out = Outbox::default();
    cp.task_action(&NoLogs, &a[0], TaskAction::Kill, Some("k1"), &mut out).unwrap();
    cp.task_action(&NoLogs, &a[0], TaskAction::Kill, Some("k1"), &mut out).unwrap();
    assert_eq!(out.messages.len(), 1);
}

#[test]
fn attributes_union_and_filter() {
    let (cp, store) = plane();
    agent(
        &store,
        "gw:a",
        AttributeSet::new()
            .with("os", AttributeValue::text("linux"))
            .with("executors", AttributeValue::set(["python", "shell"])),
    );
    agent(
        &store,
        "gw:b",
        AttributeSet::new()
            .with("os", AttributeValue::text("android"))
            .with("executors", AttributeValue::set(["nodejs"])),
    );
    let all = cp.list_attributes(&[]).unwrap();
    assert_eq!(all["os"].iter().collect::<Vec<_>>(), ["android", "linux"]);
    assert_eq!(all["executors"].len(), 3);
    let linux = cp
        .list_attributes(&[AttributeConstraint::equals("os", AttributeValue::text("linux"))])
        .unwrap();
    assert_eq!(linux["executors"].iter().collect::<Vec<_>>(), ["python", "shell"]);
    assert_eq!(cp.list_agents().unwrap().len(), 2);
}

#[test]
fn agent_rows_count_active_tasks() {
    let (mut cp, store) = plane();
    agent(&store, "gw:a", AttributeSet::new());
    let ids = cp.submit(request("w", 3), 0, &mut Outbox::default()).unwrap();
    for (i, id) in ids.iter().enumerate() {
        let mut rec = store.get_task(id.as_str()).unwrap();
        rec.assign(TaskState::Staging, "gw:a".into(), 1).unwrap();
        rec.transition(TaskState::Running, 2).unwrap();
        if i == 2 {
            rec.transition(TaskState::Finished, 3).unwrap();
        }
        store.put_task(&rec).unwrap();
    }
    let rows = cp.list_agents().unwrap();
    assert_eq!(rows[0].allocated, ResourceVector::new(1.0, 128));
}
