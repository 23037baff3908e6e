use super::*;
use crate::domain::TaskSpec;
use crate::persistence::MemStore;
use crate::protocol::{Decline, ProbeResult, TaskLaunch};

fn env(from: &str, body: Body) -> Envelope {
    Envelope {
        from: from.into(),
        to: "master".into(),
        seq: 0,
        sent_at: 0,
        to_epoch: None,
        body,
    }
}

fn agent_reg(id: &str, cpus: f64, running: Vec<ReportedTask>, reregister: bool) -> Body {
    Body::Register(Registration::Agent {
        agent_id: id.into(),
        gateway_id: "gw".into(),
        resources: ResourceVector::new(cpus, 1024),
        attributes: AttributeSet::new(),
        running,
        reregister,
        epoch: 0,
    })
}

fn fw_reg(id: &str) -> Body {
    Body::Register(Registration::Framework {
        framework_id: id.into(),
        reregister: false,
    })
}

fn hb(id: &str) -> Body {
    Body::Heartbeat(Heartbeat::Agent { agent_id: id.into() })
}

fn master_with(config: MasterConfig) -> (Master, Arc<MemStore>) {
    let store = Arc::new(MemStore::new());
    (Master::new(config, store.clone(), 0), store)
}

fn master() -> Master {
    master_with(MasterConfig::default()).0
}

fn offers_in(out: &Outbox) -> Vec<(NodeId, Offer)> {
    out.messages
        .iter()
        .filter_map(|m| match &m.body {
            Body::Offer(batch) => Some(batch.offers.iter().map(|o| (m.to.clone(), o.clone())).collect::<Vec<_>>()),
            _ => None,
        })
        .flatten()
        .collect()
}

fn statuses_in(out: &Outbox) -> Vec<StatusUpdate> {
    out.messages
        .iter()
        .filter_map(|m| match &m.body {
            Body::Status(s) => Some(s.clone()),
            _ => None,
        })
        .collect()
}

fn kills_in(out: &Outbox) -> Vec<Kill> {
    out.messages
        .iter()
        .filter_map(|m| match &m.body {
            Body::Kill(k) => Some(k.clone()),
            _ => None,
        })
        .collect()
}

fn launch(task: &str, cpus: f64, attempt: u32) -> TaskLaunch {
    TaskLaunch {
        task_id: task.into(),
        spec: TaskSpec::sim(task, "forever", ResourceVector::new(cpus, 128)),
        attempt,
        archive: None,
    }
}

/// Registers `agents` and framework `fw`, then launches `task` on the first
/// agent via the offer cycle.
fn running_setup(m: &mut Master, agents: &[&str], task: &str) {
    let mut out = Outbox::default();
    for a in agents {
        m.handle(&env("gw", agent_reg(a, 2.0, vec![], false)), 0, &mut out);
    }
    m.handle(&env("fw", fw_reg("fw")), 0, &mut out);
    let mut out = Outbox::default();
    m.tick(0, &mut out);
    let offer = offers_in(&out)
        .into_iter()
        .find(|(_, o)| o.agent_id.as_str() == agents[0])
        .expect("offer for first agent")
        .1;
    let mut out = Outbox::default();
    m.handle(
        &env(
            "fw",
            Body::Accept(Accept {
                framework_id: "fw".into(),
                offer_id: offer.offer_id,
                launches: vec![launch(task, 1.0, 1)],
            }),
        ),
        0,
        &mut out,
    );
    m.handle(
        &env(
            "gw",
            Body::Status(StatusUpdate {
                update_id: format!("{task}-run"),
                task_id: task.into(),
                state: TaskState::Running,
                agent_id: agents[0].into(),
                framework_id: "fw".into(),
                attempt: 1,
                class: None,
                grace: None,
                reason: None,
                exit_status: None,
                reconcile: false,
            }),
        ),
        0,
        &mut out,
    );
    assert_eq!(m.task(&task.into()).unwrap().state, TaskState::Running);
}

/// Ticks with heartbeats only from `alive` until `until` inclusive.
fn run_until(m: &mut Master, alive: &[&str], from: Tick, until: Tick) -> Outbox {
    let mut all = Outbox::default();
    for t in from..=until {
        for a in alive {
            m.handle(&env("gw", hb(a)), t, &mut all);
        }
        m.tick(t, &mut all);
        assert!(m.check_invariants().is_empty(), "{:?}", m.check_invariants());
    }
    all
}

#[test]
fn duplicate_registration_rejected() {
    let mut m = master();
    let mut out = Outbox::default();
    m.handle(&env("gw", agent_reg("a", 1.0, vec![], false)), 0, &mut out);
    m.handle(&env("gw", agent_reg("a", 1.0, vec![], false)), 1, &mut out);
    assert!(out
        .events
        .iter()
        .any(|e| matches!(e, Event::RegistrationRejected { .. })));
    let err = m
        .register_agent("a".into(), "gw".into(), ResourceVector::zero(), AttributeSet::new(), 2)
        .unwrap_err();
    assert_eq!(err, MasterError::DuplicateRegistration("a".into()));
}

#[test]
fn offers_grant_remainder_and_rotate() {
    let mut m = master();
    let mut out = Outbox::default();
    for a in ["a1", "a2", "a3", "a4"] {
        m.handle(&env("gw", agent_reg(a, 2.0, vec![], false)), 0, &mut out);
    }
    m.handle(&env("f1", fw_reg("f1")), 0, &mut out);
    m.handle(&env("f2", fw_reg("f2")), 0, &mut out);
    let mut out = Outbox::default();
    m.tick(0, &mut out);
    let offers = offers_in(&out);
    assert_eq!(offers.len(), 4);
    let to_f1 = offers.iter().filter(|(n, _)| n.as_str() == "f1").count();
    assert_eq!(to_f1, 2);
    for (_, o) in &offers {
        assert_eq!(o.granted, ResourceVector::new(2.0, 1024));
    }
    // no second offer while one is outstanding
    let mut out = Outbox::default();
    m.tick(1, &mut out);
    assert!(offers_in(&out).is_empty());
    assert!(m.check_invariants().is_empty());
}

#[test]
fn declined_and_expired_offers_are_reissued() {
    let mut m = master_with(MasterConfig {
        offer_ttl: 3,
        ..MasterConfig::default()
    })
    .0;
    let mut out = Outbox::default();
    m.handle(&env("gw", agent_reg("a", 2.0, vec![], false)), 0, &mut out);
    m.handle(&env("f", fw_reg("f")), 0, &mut out);
    let mut out = Outbox::default();
    m.tick(0, &mut out);
    let first = offers_in(&out)[0].1.clone();
    m.handle(
        &env(
            "f",
            Body::Decline(Decline {
                framework_id: "f".into(),
                offer_ids: vec![first.offer_id.clone()],
            }),
        ),
        1,
        &mut out,
    );
    let mut out = Outbox::default();
    m.tick(1, &mut out);
    let second = offers_in(&out)[0].1.clone();
    assert_ne!(second.offer_id, first.offer_id);
    let out = run_until(&mut m, &["a"], 2, 5);
    assert!(out
        .events
        .iter()
        .any(|e| matches!(e, Event::OfferExpired { offer_id } if *offer_id == second.offer_id)));
}

#[test]
fn overcommitted_accept_is_rejected_as_lost() {
    let mut m = master();
    let mut out = Outbox::default();
    m.handle(&env("gw", agent_reg("a", 1.0, vec![], false)), 0, &mut out);
    m.handle(&env("f", fw_reg("f")), 0, &mut out);
    let mut out = Outbox::default();
    m.tick(0, &mut out);
    let offer = offers_in(&out)[0].1.clone();
    let mut out = Outbox::default();
    m.handle(
        &env(
            "f",
            Body::Accept(Accept {
                framework_id: "f".into(),
                offer_id: offer.offer_id,
                launches: vec![launch("t1", 1.0, 1), launch("t2", 0.5, 1)],
            }),
        ),
        0,
        &mut out,
    );
    let statuses = statuses_in(&out);
    assert_eq!(statuses.len(), 2);
    assert!(statuses.iter().all(|s| s.state == TaskState::Lost));
    assert!(m.agent(&"a".into()).unwrap().allocated.is_zero());
    assert!(m.check_invariants().is_empty());
}

#[test]
fn accepted_launch_allocates_and_finishing_releases() {
    let mut m = master();
    running_setup(&mut m, &["a"], "t");
    assert_eq!(m.agent(&"a".into()).unwrap().allocated, ResourceVector::new(1.0, 128));
    m.record_status(&"a".into(), &"t".into(), TaskState::Finished).unwrap();
    assert!(m.agent(&"a".into()).unwrap().allocated.is_zero());
    assert!(m.check_invariants().is_empty());
}

#[test]
fn late_running_report_does_not_revive_finished_task() {
    let mut m = master();
    running_setup(&mut m, &["a"], "t");
    let status = |id: &str, state| {
        env(
            "gw",
            Body::Status(StatusUpdate {
                update_id: id.into(),
                task_id: "t".into(),
                state,
                agent_id: "a".into(),
                framework_id: "fw".into(),
                attempt: 1,
                class: None,
                grace: None,
                reason: None,
                exit_status: None,
                reconcile: false,
            }),
        )
    };
    let mut out = Outbox::default();
    m.handle(&status("t-fin", TaskState::Finished), 1, &mut out);
    let mut out = Outbox::default();
    m.handle(&status("t-run-resent", TaskState::Running), 1, &mut out);
    assert!(statuses_in(&out).is_empty());
    assert_eq!(m.task(&"t".into()).unwrap().state, TaskState::Finished);
    assert!(m.agent(&"a".into()).unwrap().allocated.is_zero());
    assert!(m.check_invariants().is_empty());
}

#[test]
fn silent_agent_becomes_suspect_then_permanent() {
    let mut m = master();
    running_setup(&mut m, &["a"], "t");
    let out = run_until(&mut m, &[], 1, 3);
    assert!(out.events.iter().any(|e| matches!(e, Event::AgentSuspect { .. })));
    assert!(matches!(m.agent(&"a".into()).unwrap().liveness, Liveness::Suspect { since: 3 }));
    // base timeout 10 with an empty history
    let out = run_until(&mut m, &[], 4, 13);
    assert!(statuses_in(&out).is_empty());
    let out = run_until(&mut m, &[], 14, 14);
    let lost = statuses_in(&out);
    assert_eq!(lost.len(), 1);
    assert_eq!(lost[0].class, Some(DisconnectClass::Permanent));
    assert_eq!(lost[0].grace, None);
    assert_eq!(m.task(&"t".into()).unwrap().state, TaskState::Lost);
    assert!(m.agent(&"a".into()).unwrap().allocated.is_zero());
}

#[test]
fn short_history_makes_a_loss_transient_with_grace() {
    let mut m = master();
    running_setup(&mut m, &["a"], "t");
    m.agents.get_mut(&"a".into()).unwrap().recovery_durations = vec![2, 3, 4];
    run_until(&mut m, &[], 1, 3);
    let out = run_until(&mut m, &[], 4, 14);
    let lost = statuses_in(&out);
    assert_eq!(lost.len(), 1);
    assert_eq!(lost[0].class, Some(DisconnectClass::Transient));
    assert_eq!(lost[0].grace, Some(10));
    assert_eq!(lost[0].update_id, "lost:t:1:a");
}

#[test]
fn correlated_suspects_are_transient_at_once() {
    let mut m = master();
    running_setup(&mut m, &["a", "b", "c"], "t");
    let out = run_until(&mut m, &["c"], 1, 3);
    let lost = statuses_in(&out);
    assert_eq!(lost.len(), 1, "{:?}", out.events);
    assert_eq!(lost[0].class, Some(DisconnectClass::Transient));
}

#[test]
fn recovery_from_suspect_records_duration() {
    let mut m = master();
    running_setup(&mut m, &["a"], "t");
    run_until(&mut m, &[], 1, 5);
    let out = run_until(&mut m, &["a"], 6, 6);
    assert!(out
        .events
        .iter()
        .any(|e| matches!(e, Event::AgentRecovered { after: 3, .. })));
    assert_eq!(m.agent(&"a".into()).unwrap().recovery_durations, vec![3]);
    assert_eq!(m.task(&"t".into()).unwrap().state, TaskState::Running);
}

fn reported(task: &str, attempt: u32) -> ReportedTask {
    ReportedTask {
        task_id: task.into(),
        framework_id: "fw".into(),
        resources: ResourceVector::new(1.0, 128),
        attempt,
    }
}

#[test]
fn transient_resurfacing_task_is_adopted() {
    let mut m = master();
    running_setup(&mut m, &["a", "b", "c"], "t");
    run_until(&mut m, &["c"], 1, 3);
    assert_eq!(m.task(&"t".into()).unwrap().class, Some(DisconnectClass::Transient));
    let mut out = Outbox::default();
    m.handle(&env("gw", agent_reg("a", 2.0, vec![reported("t", 1)], true)), 5, &mut out);
    let st = statuses_in(&out);
    assert_eq!(st.len(), 1);
    assert_eq!(st[0].state, TaskState::Running);
    assert!(st[0].reconcile);
    assert!(kills_in(&out).is_empty());
    assert_eq!(m.task(&"t".into()).unwrap().state, TaskState::Running);
    assert!(m.check_invariants().is_empty());
}

#[test]
fn permanent_resurfacing_task_is_killed() {
    let mut m = master();
    running_setup(&mut m, &["a"], "t");
    run_until(&mut m, &[], 1, 14);
    let mut out = Outbox::default();
    m.handle(&env("gw", agent_reg("a", 2.0, vec![reported("t", 1)], true)), 20, &mut out);
    let kills = kills_in(&out);
    assert_eq!(kills.len(), 1);
    assert_eq!(kills[0].attempt, Some(1));
    assert!(m.check_invariants().is_empty());
}

#[test]
fn plain_master_ignores_history() {
    let (mut m, _) = master_with(MasterConfig {
        transient_support: false,
        ..MasterConfig::default()
    });
    running_setup(&mut m, &["a", "b", "c"], "t");
    m.agents.get_mut(&"a".into()).unwrap().recovery_durations = vec![1, 1, 1];
    let out = run_until(&mut m, &["c"], 1, 13);
    assert!(statuses_in(&out).is_empty());
    let out = run_until(&mut m, &["c"], 14, 14);
    assert_eq!(statuses_in(&out)[0].class, Some(DisconnectClass::Permanent));
    let mut out = Outbox::default();
    m.handle(&env("gw", agent_reg("a", 2.0, vec![reported("t", 1)], true)), 20, &mut out);
    assert_eq!(kills_in(&out).len(), 1);
}

#[test]
fn unreported_tasks_are_lost_on_reregistration() {
    let mut m = master();
    running_setup(&mut m, &["a"], "t");
    let mut out = Outbox::default();
    m.handle(&env("gw", agent_reg("a", 2.0, vec![], true)), 1, &mut out);
    let st = statuses_in(&out);
    assert_eq!(st.len(), 1);
    assert_eq!(st[0].state, TaskState::Lost);
    assert!(m.agent(&"a".into()).unwrap().allocated.is_zero());
    assert_eq!(kills_in(&out)[0].attempt, Some(1));
}

#[test]
fn in_flight_launch_survives_reregistration() {
    let mut m = master();
    let mut out = Outbox::default();
    m.handle(&env("gw", agent_reg("a", 2.0, vec![], false)), 0, &mut out);
    m.handle(&env("fw", fw_reg("fw")), 0, &mut out);
    let mut out = Outbox::default();
    m.tick(0, &mut out);
    let offer = offers_in(&out).remove(0).1;
    let accept = Accept {
        framework_id: "fw".into(),
        offer_id: offer.offer_id,
        launches: vec![launch("t", 1.0, 1)],
    };
    m.handle(&env("fw", Body::Accept(accept)), 1, &mut out);

    // The gateway re-registers before the launch reaches it.
    let mut out = Outbox::default();
    m.handle(&env("gw", agent_reg("a", 2.0, vec![], true)), 2, &mut out);
    assert!(statuses_in(&out).is_empty());
    assert!(kills_in(&out).is_empty());
    assert_eq!(m.task(&"t".into()).unwrap().state, TaskState::Staging);
    assert!(m.check_invariants().is_empty());
}

#[test]
fn late_report_for_a_written_off_attempt_is_killed() {
    let mut m = master();
    running_setup(&mut m, &["a"], "t");
    let mut out = Outbox::default();
    m.handle(&env("gw", agent_reg("a", 2.0, vec![], true)), 1, &mut out);
    assert_eq!(m.task(&"t".into()).unwrap().state, TaskState::Lost);

    let late = StatusUpdate {
        update_id: "t-late".into(),
        task_id: "t".into(),
        state: TaskState::Running,
        agent_id: "a".into(),
        framework_id: "fw".into(),
        attempt: 1,
        class: None,
        grace: None,
        reason: None,
        exit_status: None,
        reconcile: false,
    };
    let mut out = Outbox::default();
    m.handle(&env("gw", Body::Status(late)), 2, &mut out);
    assert!(statuses_in(&out).is_empty());
    let kills = kills_in(&out);
    assert_eq!((kills.len(), kills[0].attempt), (1, Some(1)));
    assert_eq!(m.task(&"t".into()).unwrap().state, TaskState::Lost);
}

#[test]
fn duplicate_status_is_acked_but_applied_once() {
    let mut m = master();
    running_setup(&mut m, &["a"], "t");
    let finished = StatusUpdate {
        update_id: "fin".into(),
        task_id: "t".into(),
        state: TaskState::Finished,
        agent_id: "a".into(),
        framework_id: "fw".into(),
        attempt: 1,
        class: None,
        grace: None,
        reason: None,
        exit_status: Some(0),
        reconcile: false,
    };
    let mut out = Outbox::default();
    m.handle(&env("gw", Body::Status(finished.clone())), 1, &mut out);
    m.handle(&env("gw", Body::Status(finished)), 2, &mut out);
    assert_eq!(statuses_in(&out).len(), 1);
    let acks = out
        .messages
        .iter()
        .filter(|m| matches!(&m.body, Body::Heartbeat(Heartbeat::AgentAck { acks, .. }) if acks == &vec!["fin".to_string()]))
        .count();
    assert_eq!(acks, 2);
}

#[test]
fn recovered_master_asks_agents_to_reregister() {
    let (mut m, store) = master_with(MasterConfig::default());
    running_setup(&mut m, &["a"], "t");
    let mut m = Master::recover(MasterConfig::default(), store, 50);
    let mut out = Outbox::default();
    m.handle(&env("fw", fw_reg("fw")), 50, &mut out);
    m.handle(&env("gw", hb("a")), 50, &mut out);
    assert!(out
        .messages
        .iter()
        .any(|m| matches!(&m.body, Body::Heartbeat(Heartbeat::AgentAck { reregister: true, .. }))));
    let mut out = Outbox::default();
    m.tick(50, &mut out);
    assert!(offers_in(&out).is_empty());
    // re-registration adopts the task the new master never saw
    let mut out = Outbox::default();
    m.handle(&env("gw", agent_reg("a", 2.0, vec![reported("t", 1)], true)), 51, &mut out);
    assert_eq!(m.task(&"t".into()).unwrap().state, TaskState::Running);
    assert!(m.check_invariants().is_empty());
}

#[test]
fn probe_holds_agents_and_reports_back() {
    let mut m = master();
    let mut out = Outbox::default();
    m.handle(&env("gw", agent_reg("a", 2.0, vec![], false)), 0, &mut out);
    m.handle(&env("gw", agent_reg("b", 2.0, vec![], false)), 0, &mut out);
    m.handle(&env("f", fw_reg("f")), 0, &mut out);
    let mut out = Outbox::default();
    m.handle(
        &env(
            "f",
            Body::Probe(Probe {
                probe_id: "p1".into(),
                framework_id: Some("f".into()),
                agent_ids: vec!["a".into(), "b".into(), "ghost".into()],
                sketch: ResourceVector::new(1.0, 64),
            }),
        ),
        0,
        &mut out,
    );
    let sent = out.messages.iter().filter(|m| matches!(m.body, Body::Probe(_))).count();
    assert_eq!(sent, 2);
    assert_eq!(m.probe_holds().len(), 2);
    let mut out = Outbox::default();
    m.tick(0, &mut out);
    assert!(offers_in(&out).is_empty());
    let reply = |agent: &str, metric: f64| {
        env(
            "gw",
            Body::ProbeReply(ProbeReply {
                probe_id: "p1".into(),
                results: vec![ProbeResult {
                    agent_id: agent.into(),
                    metric: Some(metric),
                    responded: true,
                    rtt: 0,
                }],
                detail: None,
            }),
        )
    };
    let mut out = Outbox::default();
    m.handle(&reply("a", 0.4), 1, &mut out);
    m.handle(&reply("b", 0.7), 2, &mut out);
    let replies: Vec<&ProbeReply> = out
        .messages
        .iter()
        .filter_map(|m| match &m.body {
            Body::ProbeReply(r) => Some(r),
            _ => None,
        })
        .collect();
    assert_eq!(replies.len(), 1);
    let r = &replies[0].results;
    assert_eq!(r[0].metric, Some(0.4));
    assert_eq!(r[0].rtt, 1);
    assert_eq!(r[1].rtt, 2);
    assert!(!r[2].responded);
    assert!(m.probe_holds().is_empty());
}

#[test]
fn probe_times_out() {
    let mut m = master();
    let mut out = Outbox::default();
    m.handle(&env("gw", agent_reg("a", 2.0, vec![], false)), 0, &mut out);
    m.scout_probe("p", None, &["a".into()], ResourceVector::zero(), 0);
    assert!(m.expire_probes(4).is_empty());
    let done = m.expire_probes(5);
    assert_eq!(done.len(), 1);
    assert!(!done[0].results[0].responded);
    assert!(m.probe_holds().is_empty());
}

#[test]
fn unknown_framework_heartbeat_asks_to_register() {
    let mut m = master();
    let mut out = Outbox::default();
    m.handle(
        &env("f", Body::Heartbeat(Heartbeat::Framework { framework_id: "f".into() })),
        0,
        &mut out,
    );
    assert!(matches!(
        &out.messages[0].body,
        Body::Heartbeat(Heartbeat::FrameworkAck { reregister: true, .. })
    ));
}

#[test]
fn agent_records_are_persisted() {
    let (mut m, store) = master_with(MasterConfig::default());
    running_setup(&mut m, &["a"], "t");
    run_until(&mut m, &[], 1, 3);
    let rec = store.get_agent("a").unwrap();
    assert_eq!(rec.liveness, Liveness::Suspect { since: 3 });
}

fn launches_in(out: &Outbox) -> Vec<Launch> {
    out.messages
        .iter()
        .filter_map(|m| match &m.body {
            Body::Launch(l) => Some(l.clone()),
            _ => None,
        })
        .collect()
}

#[test]
fn unconfirmed_launch_is_resent_until_a_status_arrives() {
    let mut m = master();
    let mut out = Outbox::default();
    m.handle(&env("gw", agent_reg("a", 2.0, vec![], false)), 0, &mut out);
    m.handle(&env("fw", fw_reg("fw")), 0, &mut out);
    let mut out = Outbox::default();
    m.tick(0, &mut out);
    let offer = offers_in(&out).remove(0).1;
    let mut out = Outbox::default();
    let accept = Accept {
        framework_id: "fw".into(),
        offer_id: offer.offer_id,
        launches: vec![launch("t", 1.0, 1)],
    };
    m.handle(&env("fw", Body::Accept(accept)), 1, &mut out);
    assert_eq!(launches_in(&out).len(), 1);

    let retry = MasterConfig::default().launch_retry;
    let out = run_until(&mut m, &["a"], 2, retry);
    assert!(launches_in(&out).is_empty());
    let out = run_until(&mut m, &["a"], retry + 1, retry + 1);
    let again = launches_in(&out);
    assert_eq!(again.len(), 1);
    assert_eq!((again[0].task.task_id.as_str(), again[0].task.attempt), ("t", 1));

    m.record_status(&"a".into(), &"t".into(), TaskState::Running).unwrap();
    let out = run_until(&mut m, &["a"], retry + 2, 4 * retry);
    assert!(launches_in(&out).is_empty());
}
