use super::*;
use crate::domain::{AttributeSet, AttributeValue, TaskSpec, EXECUTORS_ATTRIBUTE};
use crate::persistence::MemStore;
use crate::protocol::OfferMsg;

struct Rig {
    s: Scheduler,
    store: Arc<MemStore>,
    notes: RecordingNotifier,
    now: Tick,
    offers: u64,
}

fn rig() -> Rig {
    let store = Arc::new(MemStore::new());
    let notes = RecordingNotifier::new();
    let s = Scheduler::new(SchedulerConfig::new("fw"), store.clone(), Box::new(notes.clone()));
    Rig {
        s,
        store,
        notes,
        now: 0,
        offers: 0,
    }
}

fn env(body: Body) -> Envelope {
    Envelope {
        from: "master".into(),
        to: "fw".into(),
        seq: 0,
        sent_at: 0,
        to_epoch: None,
        body,
    }
}

impl Rig {
    fn submit(&mut self, id: &str, spec: TaskSpec) {
        self.store
            .put_task(&TaskRecord::queued(id.into(), spec, self.now))
            .unwrap();
        self.deliver(Body::Operator(OperatorCommand::Submit {
            task_ids: vec![id.into()],
        }));
    }

    fn deliver(&mut self, body: Body) -> Outbox {
        let mut out = Outbox::default();
        self.s.handle(&env(body), self.now, &mut out);
        assert!(
            !out.events.iter().any(|e| matches!(e, Event::Error { .. })),
            "{:?}",
            out.events
        );
        out
    }

    fn offer(&mut self, agent: &str, cpus: f64) -> Outbox {
        self.offers += 1;
        let offer = OfferMsg {
            offer_id: format!("o{}", self.offers),
            agent_id: agent.into(),
            granted: ResourceVector::new(cpus, 1024),
            attributes: AttributeSet::new().with(EXECUTORS_ATTRIBUTE, AttributeValue::set(["sim-task"])),
            issued_at: self.now,
            ttl: 30,
        };
        self.deliver(Body::Offer(OfferBatch {
            framework_id: "fw".into(),
            offers: vec![offer],
        }))
    }

    fn status(&mut self, id: &str, state: TaskState, agent: &str, attempt: u32) -> Outbox {
        self.status_with(id, state, agent, attempt, None, None)
    }

    fn status_with(
        &mut self,
        id: &str,
        state: TaskState,
        agent: &str,
        attempt: u32,
        class: Option<DisconnectClass>,
        grace: Option<Tick>,
    ) -> Outbox {
        self.deliver(Body::Status(StatusUpdate {
            update_id: format!("{id}-{state:?}-{attempt}-{}", self.now),
            task_id: id.into(),
            state,
            agent_id: agent.into(),
            framework_id: "fw".into(),
            attempt,
            class,
            grace,
            reason: None,
            exit_status: None,
            reconcile: false,
        }))
    }

    fn tick(&mut self) -> Outbox {
        let mut out = Outbox::default();
        self.s.tick(self.now, &mut out);
        out
    }

    fn state(&self, id: &str) -> TaskState {
        self.s.record(&id.into()).unwrap().state
    }
}

fn spec(policy: RestartPolicy) -> TaskSpec {
    let mut s = TaskSpec::sim("job", "forever", ResourceVector::new(1.0, 128));
    s.restart_policy = policy;
    s
}

fn accepts(out: &Outbox) -> Vec<&Accept> {
    out.messages
        .iter()
        .filter_map(|m| match &m.body {
            Body::Accept(a) => Some(a),
            _ => None,
        })
        .collect()
}

fn kills(out: &Outbox) -> Vec<&Kill> {
    out.messages
        .iter()
        .filter_map(|m| match &m.body {
            Body::Kill(k) => Some(k),
            _ => None,
        })
        .collect()
}

#[test]
fn registers_then_heartbeats() {
    let mut r = rig();
    let out = r.tick();
    assert!(matches!(out.messages[0].body, Body::Register(Registration::Framework { .. })));
    r.deliver(Body::Heartbeat(Heartbeat::FrameworkAck {
        framework_id: "fw".into(),
        reregister: false,
    }));
    assert!(r.s.is_registered());
    r.now = 1;
    let out = r.tick();
    assert!(matches!(out.messages[0].body, Body::Heartbeat(Heartbeat::Framework { .. })));
}

#[test]
fn staging_is_persisted_before_accept() {
    let mut r = rig();
    r.submit("t", spec(RestartPolicy::Auto));
    let out = r.offer("a", 2.0);
    let acc = accepts(&out);
    assert_eq!(acc.len(), 1);
    assert_eq!(acc[0].launches[0].attempt, 1);
    let stored = r.store.get_task("t").unwrap();
    assert_eq!(stored.state, TaskState::Staging);
    assert_eq!(stored.assigned_agent, Some("a".into()));
    r.status("t", TaskState::Running, "a", 1);
    r.status("t", TaskState::Finished, "a", 1);
    assert_eq!(r.store.get_task("t").unwrap().state, TaskState::Finished);
}

#[test]
fn unmatched_offer_is_declined() {
    let mut r = rig();
    r.submit("t", TaskSpec::sim("big", "forever", ResourceVector::new(8.0, 128)));
    let out = r.offer("a", 2.0);
    assert!(accepts(&out).is_empty());
    assert!(out.messages.iter().any(|m| matches!(m.body, Body::Decline(_))));
}

#[test]
fn one_offer_can_carry_several_launches_fifo() {
    let mut r = rig();
    r.submit("t1", spec(RestartPolicy::Auto));
    r.submit("t2", spec(RestartPolicy::Auto));
    r.submit("t3", spec(RestartPolicy::Auto));
    let out = r.offer("a", 2.0);
    let ids: Vec<&str> = accepts(&out)[0].launches.iter().map(|l| l.task_id.as_str()).collect();
    assert_eq!(ids, ["t1", "t2"]);
    assert_eq!(r.state("t3"), TaskState::Queued);
}

#[test]
fn auto_failure_requeues_once_and_notifies() {
    let mut r = rig();
    r.submit("t", spec(RestartPolicy::Auto));
    r.offer("a", 2.0);
    r.status("t", TaskState::Running, "a", 1);
    r.status("t", TaskState::Failed, "a", 1);
    assert_eq!(r.state("t"), TaskState::Queued);
    let notes = r.notes.take();
    assert_eq!(notes.len(), 1);
    assert_eq!(notes[0].kind, NotificationKind::TaskFailure);
    // the same report again changes nothing
    r.status("t", TaskState::Failed, "a", 1);
    assert_eq!(r.s.queue().count(), 1);
    assert!(r.notes.take().is_empty());
}

#[test]
fn manual_failure_waits_for_operator() {
    let mut r = rig();
    r.submit("t", spec(RestartPolicy::Manual));
    r.offer("a", 2.0);
    r.status("t", TaskState::Running, "a", 1);
    r.status("t", TaskState::Failed, "a", 1);
    assert_eq!(r.state("t"), TaskState::Failed);
    let out = r.offer("a", 2.0);
    assert!(accepts(&out).is_empty());
    r.deliver(Body::Operator(OperatorCommand::Restart { task_id: "t".into() }));
    assert_eq!(r.state("t"), TaskState::Queued);
    let out = r.offer("a", 2.0);
    assert_eq!(accepts(&out)[0].launches[0].attempt, 2);
}

#[test]
fn failure_of_unknown_task() {
    let mut r = rig();
    let mut out = Outbox::default();
    assert_eq!(
        r.s.on_task_failed(&"nope".into(), None, 0, &mut out),
        Err(SchedulerError::UnknownTask("nope".into()))
    );
}

#[test]
fn permanent_loss_requeues_immediately() {
    let mut r = rig();
    r.submit("t", spec(RestartPolicy::Auto));
    r.offer("a", 2.0);
    r.status("t", TaskState::Running, "a", 1);
    r.status_with("t", TaskState::Lost, "a", 1, Some(DisconnectClass::Permanent), None);
    assert_eq!(r.state("t"), TaskState::Queued);
    assert_eq!(r.notes.take()[0].kind, NotificationKind::TaskLost);
}

#[test]
fn transient_loss_defers_then_requeues() {
    let mut r = rig();
    r.submit("t", spec(RestartPolicy::Auto));
    r.offer("a", 2.0);
    r.status("t", TaskState::Running, "a", 1);
    r.now = 5;
    r.status_with("t", TaskState::Lost, "a", 1, Some(DisconnectClass::Transient), Some(10));
    assert_eq!(r.state("t"), TaskState::Lost);
    assert_eq!(r.s.deferred().get(&"t".into()), Some(&15));
    r.now = 14;
    r.tick();
    assert_eq!(r.state("t"), TaskState::Lost);
    r.now = 15;
    r.tick();
    assert_eq!(r.state("t"), TaskState::Queued);
}

#[test]
fn resurfacing_task_is_adopted_without_requeue() {
    let mut r = rig();
    r.submit("t", spec(RestartPolicy::Auto));
    r.offer("a", 2.0);
    r.status("t", TaskState::Running, "a", 1);
    r.status_with("t", TaskState::Lost, "a", 1, Some(DisconnectClass::Transient), Some(10));
    r.now = 3;
    let out = r.status("t", TaskState::Running, "a", 1);
    assert!(kills(&out).is_empty());
    assert_eq!(r.state("t"), TaskState::Running);
    assert!(r.s.deferred().is_empty());
    r.now = 20;
    r.tick();
    assert_eq!(r.state("t"), TaskState::Running);
}

#[test]
fn stale_attempt_is_killed() {
    let mut r = rig();
    r.submit("t", spec(RestartPolicy::Auto));
    r.offer("a", 2.0);
    r.status("t", TaskState::Running, "a", 1);
    r.status_with("t", TaskState::Lost, "a", 1, Some(DisconnectClass::Permanent), None);
    r.offer("b", 2.0);
    r.status("t", TaskState::Running, "b", 2);
    let out = r.status("t", TaskState::Running, "a", 1);
    let k = kills(&out);
    assert_eq!(k.len(), 1);
    assert_eq!(k[0].attempt, Some(1));
    assert_eq!(k[0].agent_id, Some("a".into()));
    assert_eq!(r.s.record(&"t".into()).unwrap().assigned_agent, Some("b".into()));
}

#[test]
fn third_loss_starts_replicas_and_first_runner_wins() {
    let mut r = rig();
    r.submit("t", spec(RestartPolicy::Auto));
    for attempt in 1..=3 {
        let out = r.offer("a", 2.0);
        assert_eq!(accepts(&out)[0].launches[0].attempt, attempt);
        r.status("t", TaskState::Running, "a", attempt);
        r.status_with("t", TaskState::Lost, "a", attempt, Some(DisconnectClass::Permanent), None);
    }
    let replica = TaskId::from("t~r3-1");
    assert_eq!(r.state("t~r3-1"), TaskState::Queued);
    assert_eq!(r.s.record(&replica).unwrap().replica_group, Some("t".into()));
    assert_eq!(r.s.record(&"t".into()).unwrap().replica_group, Some("t".into()));
    // both placed, on different agents
    let out = r.offer("a", 4.0);
    assert_eq!(accepts(&out)[0].launches.len(), 1);
    let out = r.offer("b", 4.0);
    assert_eq!(accepts(&out)[0].launches[0].task_id, replica);
    r.status("t~r3-1", TaskState::Running, "b", 1);
    let out = r.status("t", TaskState::Running, "a", 4);
    assert_eq!(kills(&out).len(), 1);
    assert_eq!(kills(&out)[0].task_id.as_str(), "t");
    assert_eq!(r.state("t"), TaskState::Staging);
    r.status("t", TaskState::Killed, "a", 4);
    let running = r.s.records().filter(|t| t.state == TaskState::Running).count();
    assert_eq!(running, 1);
}

#[test]
fn replica_running_first_kills_queued_sibling() {
    let mut r = rig();
    r.submit("t", spec(RestartPolicy::Auto));
    for attempt in 1..=3 {
        r.offer("a", 2.0);
        r.status_with("t", TaskState::Lost, "a", attempt, Some(DisconnectClass::Permanent), None);
    }
    // only the original fits
    let out = r.offer("a", 1.0);
    assert_eq!(accepts(&out)[0].launches[0].task_id.as_str(), "t");
    r.status("t", TaskState::Running, "a", 4);
    assert_eq!(r.state("t~r3-1"), TaskState::Killed);
}

#[test]
fn operator_kill_of_queued_task() {
    let mut r = rig();
    r.submit("t", spec(RestartPolicy::Auto));
    r.deliver(Body::Operator(OperatorCommand::Kill { task_id: "t".into() }));
    assert_eq!(r.state("t"), TaskState::Killed);
    assert_eq!(r.s.queue().count(), 0);
}

#[test]
fn recovery_requeues_unconfirmed_in_flight_tasks() {
    let mut r = rig();
    r.submit("t", spec(RestartPolicy::Auto));
    r.submit("q", TaskSpec::sim("big", "forever", ResourceVector::new(8.0, 1)));
    r.offer("a", 2.0);
    r.status("t", TaskState::Running, "a", 1);
    let agent = crate::master::AgentRecord::new("a".into(), "gw".into(), ResourceVector::new(2.0, 1024), AttributeSet::new());
    r.store.put_agent(&agent).unwrap();
    let mut out = Outbox::default();
    let store: Arc<dyn Store> = r.store.clone();
    let mut s = Scheduler::recover(SchedulerConfig::new("fw"), store, Box::new(LogNotifier), 100, &mut out).unwrap();
    assert_eq!(s.record(&"t".into()).unwrap().state, TaskState::Running);
    assert_eq!(s.queue().count(), 1);
    let mut out = Outbox::default();
    s.tick(119, &mut out);
    assert_eq!(s.record(&"t".into()).unwrap().state, TaskState::Running);
    s.tick(120, &mut out);
    assert_eq!(s.record(&"t".into()).unwrap().state, TaskState::Queued);
}

#[test]
fn recovery_confirms_in_flight_on_reconcile() {
    let mut r = rig();
    r.submit("t", spec(RestartPolicy::Auto));
    r.offer("a", 2.0);
    r.status("t", TaskState::Running, "a", 1);
    let agent = crate::master::AgentRecord::new("a".into(), "gw".into(), ResourceVector::new(2.0, 1024), AttributeSet::new());
    r.store.put_agent(&agent).unwrap();
    let mut out = Outbox::default();
    let store: Arc<dyn Store> = r.store.clone();
    r.s = Scheduler::recover(SchedulerConfig::new("fw"), store, Box::new(LogNotifier), 100, &mut out).unwrap();
    r.now = 101;
    r.status("t", TaskState::Running, "a", 1);
    r.now = 200;
    r.tick();
    assert_eq!(r.state("t"), TaskState::Running);
}

#[test]
fn recovery_requeues_tasks_on_unknown_agents() {
    let mut r = rig();
    r.submit("t", spec(RestartPolicy::Auto));
    r.offer("a", 2.0);
    r.status("t", TaskState::Running, "a", 1);
    let mut out = Outbox::default();
    let store: Arc<dyn Store> = r.store.clone();
    let s = Scheduler::recover(SchedulerConfig::new("fw"), store, Box::new(LogNotifier), 100, &mut out).unwrap();
    assert_eq!(s.record(&"t".into()).unwrap().state, TaskState::Queued);
    assert_eq!(s.record(&"t".into()).unwrap().losses(), 1);
}
