mod common;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use common::{inproc_broker, node, node_via, spin, wait_for};
use metaros::actions::{GoalContext, GoalState, GoalStep};
use metaros::envelope::{Correlation, PayloadType, Value};
use metaros::nodegraph::Node;
use metaros::services::{CallError, TokenState};
use metaros::transport::{BrokerHandle, FaultProfile, FaultyConnector};

const WAIT: Duration = Duration::from_secs(5);

/// Counts down from the goal, one feedback message per step, pausing
/// `pause` between steps. Honors cancel requests.
fn countdown(pause: Duration) -> impl FnMut(&Value) -> Box<dyn FnMut(&mut GoalContext) -> GoalStep + Send> + Send {
    move |goal: &Value| {
        let mut n = goal.as_i64().unwrap();
        Box::new(move |ctx: &mut GoalContext| {
            if ctx.cancel_requested() {
                return GoalStep::Canceled(Value::Int64(n));
            }
            if n == 0 {
                return GoalStep::Succeeded(Value::Int64(0));
            }
            ctx.publish_feedback(n).unwrap();
            n -= 1;
            if pause.is_zero() {
                GoalStep::Continue
            } else {
                GoalStep::Sleep(pause)
            }
        })
    }
}

fn collector() -> (Arc<Mutex<Vec<(Correlation, u64, i64)>>>, impl Fn() -> Box<dyn FnMut(metaros::actions::Feedback) + Send>) {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let s = seen.clone();
    let make = move || -> Box<dyn FnMut(metaros::actions::Feedback) + Send> {
        let s = s.clone();
        Box::new(move |fb| s.lock().unwrap().push((fb.goal_id, fb.sequence, fb.value.as_i64().unwrap())))
    };
    (seen, make)
}

fn pair(broker: &BrokerHandle) -> (Node, Node) {
    (node(broker, "server"), node(broker, "client"))
}

#[test]
fn countdown_sends_feedback_then_succeeds() {
    let broker = inproc_broker();
    let (server, client) = pair(&broker);
    let _srv = server
        .create_action_server("countdown", PayloadType::Int64, countdown(Duration::ZERO))
        .unwrap();
    let _s = spin(&server);
    let _c = spin(&client);
    let (seen, make) = collector();
    let handle = client.send_goal_with_feedback("countdown", 3i64, WAIT, make());
    let outcome = handle.wait_outcome(WAIT).unwrap();
    assert_eq!(outcome.state, GoalState::Succeeded);
    assert_eq!(outcome.result, Value::Int64(0));
    let seen = seen.lock().unwrap();
    let values: Vec<_> = seen.iter().map(|(_, _, v)| *v).collect();
    let seqs: Vec<_> = seen.iter().map(|(_, s, _)| *s).collect();
    assert_eq!(values, vec![3, 2, 1]);
    assert_eq!(seqs, vec![1, 2, 3]);
    assert!(seen.iter().all(|(g, _, _)| *g == handle.goal_id()));
}

#[test]
fn goal_without_feedback_callback_resolves_without_spinning_client() {
    let broker = inproc_broker();
    let (server, client) = pair(&broker);
    let _srv = server
        .create_action_server("countdown", PayloadType::Int64, countdown(Duration::ZERO))
        .unwrap();
    let _s = spin(&server);
    let handle = client.send_goal("countdown", 2i64, WAIT);
    assert_eq!(handle.wait_outcome(WAIT).unwrap().state, GoalState::Succeeded);
    assert_eq!(handle.feedback_counts(), (2, 0));
}

#[test]
fn cancel_during_active_ends_canceled_with_one_result() {
    let broker = inproc_broker();
    let (server, client) = pair(&broker);
    let srv = server
        .create_action_server("countdown", PayloadType::Int64, countdown(Duration::from_millis(20)))
        .unwrap();
    let _s = spin(&server);
    let _c = spin(&client);
    let (seen, make) = collector();
    let handle = client.send_goal_with_feedback("countdown", 1000i64, WAIT, make());
    assert!(wait_for(WAIT, || seen.lock().unwrap().len() >= 2));
    handle.cancel();
    handle.cancel();
    let outcome = handle.wait_outcome(WAIT).unwrap();
    assert_eq!(outcome.state, GoalState::Canceled);
    let after = seen.lock().unwrap().len();
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(seen.lock().unwrap().len(), after, "feedback after the result");
    let stats = srv.stats();
    assert_eq!((stats.canceled, stats.succeeded, stats.aborted), (1, 0, 0));
    assert_eq!(NodeStats::stale(&client), 0);
}

struct NodeStats;

impl NodeStats {
    fn stale(node: &Node) -> u64 {
        metaros::nodegraph::NodeCounters::get(&node.counters().stale_responses)
    }
}

#[test]
fn cancel_of_pending_goal_never_runs_the_handler() {
    let broker = inproc_broker();
    let (server, client) = pair(&broker);
    let ran = Arc::new(AtomicBool::new(false));
    let r = ran.clone();
    let _srv = server
        .create_action_server("job", PayloadType::Int64, move |_goal: &Value| {
            r.store(true, Ordering::SeqCst);
            |_: &mut GoalContext| GoalStep::Succeeded(Value::Null)
        })
        .unwrap();
    // the server is not spun, so the goal stays PENDING
    let handle = client.send_goal("job", 1i64, WAIT);
    std::thread::sleep(Duration::from_millis(50));
    handle.cancel();
    let outcome = handle.wait_outcome(WAIT).unwrap();
    assert_eq!(outcome.state, GoalState::Canceled);
    let _s = spin(&server);
    std::thread::sleep(Duration::from_millis(50));
    assert!(!ran.load(Ordering::SeqCst));
}

#[test]
fn cancel_after_success_changes_nothing() {
    let broker = inproc_broker();
    let (server, client) = pair(&broker);
    let _srv = server
        .create_action_server("countdown", PayloadType::Int64, countdown(Duration::ZERO))
        .unwrap();
    let _s = spin(&server);
    let handle = client.send_goal("countdown", 1i64, WAIT);
    assert_eq!(handle.wait_outcome(WAIT).unwrap().state, GoalState::Succeeded);
    handle.cancel();
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(handle.outcome().unwrap().state, GoalState::Succeeded);
}

#[test]
fn concurrent_goals_keep_their_own_feedback_order() {
    let broker = inproc_broker();
    let (server, client) = pair(&broker);
    let _srv = server
        .create_action_server("countdown", PayloadType::Int64, countdown(Duration::ZERO))
        .unwrap();
    let _s = spin(&server);
    let _c = spin(&client);
    let (seen, make) = collector();
    let a = client.send_goal_with_feedback("countdown", 40i64, WAIT, make());
    let b = client.send_goal_with_feedback("countdown", 40i64, WAIT, make());
    assert_eq!(a.wait_outcome(WAIT).unwrap().state, GoalState::Succeeded);
    assert_eq!(b.wait_outcome(WAIT).unwrap().state, GoalState::Succeeded);
    let seen = seen.lock().unwrap();
    for h in [&a, &b] {
        let mine: Vec<_> = seen.iter().filter(|(g, _, _)| *g == h.goal_id()).collect();
        assert_eq!(mine.len(), 40);
        assert!(mine.windows(2).all(|w| w[0].1 < w[1].1));
        assert_eq!(mine.iter().map(|m| m.2).collect::<Vec<_>>(), (1..=40).rev().collect::<Vec<_>>());
    }
    // the two streams interleave on the wire
    let first_b = seen.iter().position(|(g, _, _)| *g == b.goal_id()).unwrap();
    let last_a = seen.iter().rposition(|(g, _, _)| *g == a.goal_id()).unwrap();
    assert!(first_b < last_a);
}

#[test]
fn reordered_feedback_is_never_delivered_out_of_order() {
    let broker = inproc_broker();
    let profile = FaultProfile {
        seed: 5,
        ..FaultProfile::default().with_delay(Duration::ZERO, Duration::from_millis(4))
    };
    let server = node_via("server", FaultyConnector::new(broker.address().clone(), profile).unwrap());
    let client = node(&broker, "client");
    let _srv = server
        .create_action_server("countdown", PayloadType::Int64, countdown(Duration::ZERO))
        .unwrap();
    let _s = spin(&server);
    let _c = spin(&client);
    let (seen, make) = collector();
    let handle = client.send_goal_with_feedback("countdown", 200i64, WAIT, make());
    assert_eq!(handle.wait_outcome(WAIT).unwrap().state, GoalState::Succeeded);
    let seen = seen.lock().unwrap();
    assert!(seen.windows(2).all(|w| w[0].1 < w[1].1));
    let (accepted, discarded) = handle.feedback_counts();
    assert_eq!(accepted as usize, seen.len());
    assert!(discarded > 0, "the delay window should reorder some feedback");
    // whatever arrives after the result is ignored outright
    assert!(accepted + discarded <= 200);
}

#[test]
fn unknown_action_fails() {
    let broker = inproc_broker();
    let client = node(&broker, "client");
    let handle = client.send_goal("nope", 1i64, WAIT);
    assert_eq!(handle.wait(WAIT), TokenState::Failed);
}

#[test]
fn timeout_resolves_timed_out_and_cancels_the_goal() {
    let broker = inproc_broker();
    let (server, client) = pair(&broker);
    let srv = server
        .create_action_server("countdown", PayloadType::Int64, countdown(Duration::from_millis(20)))
        .unwrap();
    let _s = spin(&server);
    let handle = client.send_goal("countdown", 1000i64, Duration::from_millis(100));
    assert_eq!(handle.wait(WAIT), TokenState::TimedOut);
    assert_eq!(handle.outcome(), Err(CallError::TimedOut));
    assert!(wait_for(WAIT, || srv.stats().canceled == 1));
    assert_eq!(srv.active_goals(), 0);
}

#[test]
fn handler_that_cancels_unprompted_aborts_and_panics_abort() {
    let broker = inproc_broker();
    let (server, client) = pair(&broker);
    let _srv = server
        .create_action_server("weird", PayloadType::Int64, |goal: &Value| {
            let g = goal.as_i64().unwrap();
            move |_: &mut GoalContext| {
                if g == 0 {
                    GoalStep::Canceled(Value::Null)
                } else {
                    panic!("actuator fault")
                }
            }
        })
        .unwrap();
    let _s = spin(&server);
    let a = client.send_goal("weird", 0i64, WAIT).wait_outcome(WAIT).unwrap();
    assert_eq!(a.state, GoalState::Aborted);
    let b = client.send_goal("weird", 1i64, WAIT).wait_outcome(WAIT).unwrap();
    assert_eq!(b.state, GoalState::Aborted);
    assert!(b.result.as_str().unwrap().contains("actuator fault"));
}

#[test]
fn single_step_goal_can_send_feedback() {
    let broker = inproc_broker();
    let (server, client) = pair(&broker);
    let outcome = Arc::new(Mutex::new(None));
    let o = outcome.clone();
    let steps = Arc::new(AtomicU64::new(0));
    let st = steps.clone();
    let _srv = server
        .create_action_server("once", PayloadType::Null, move |_: &Value| {
            let o = o.clone();
            let st = st.clone();
            move |ctx: &mut GoalContext| {
                st.fetch_add(1, Ordering::SeqCst);
                *o.lock().unwrap() = Some(ctx.publish_feedback(1i64).is_ok());
                GoalStep::Succeeded(Value::Null)
            }
        })
        .unwrap();
    let _s = spin(&server);
    let h = client.send_goal("once", Value::Null, WAIT);
    assert_eq!(h.wait_outcome(WAIT).unwrap().state, GoalState::Succeeded);
    assert_eq!(*outcome.lock().unwrap(), Some(true));
    assert_eq!(steps.load(Ordering::SeqCst), 1);
}
