//! A long-running action with feedback, and a second goal canceled while
//! it runs.

use std::time::Duration;

use metaros::actions::{GoalContext, GoalStep};
use metaros::envelope::{PayloadType, Value};
use metaros::executor::{spawn, CfsExecutor, Executor, SchedulerConfig};
use metaros::nodegraph::Node;
use metaros::transport::{broker_serve, BrokerConfig, EndpointAddress};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let broker = broker_serve(&EndpointAddress::inproc("countdown"), BrokerConfig::default())?;
    let server = Node::connect("counter", broker.address())?;
    let client = Node::connect("client", broker.address())?;

    let _srv = server.create_action_server("countdown", PayloadType::Int64, |goal: &Value| {
        let mut n = goal.as_i64().unwrap_or(0);
        move |ctx: &mut GoalContext| {
            if ctx.cancel_requested() {
                return GoalStep::Canceled(Value::Int64(n));
            }
            if n == 0 {
                return GoalStep::Succeeded(Value::String("liftoff".into()));
            }
            let _ = ctx.publish_feedback(n);
            n -= 1;
            GoalStep::Sleep(Duration::from_millis(50))
        }
    })?;
    let mut exec = CfsExecutor::new(SchedulerConfig::default());
    exec.add_node(&server);
    exec.add_node(&client);
    let _exec = spawn(exec);

    let timeout = Duration::from_secs(5);
    let done = client.send_goal_with_feedback("countdown", 5i64, timeout, |fb| {
        println!("feedback #{}: {}", fb.sequence, fb.value)
    });
    let doomed = client.send_goal("countdown", 100i64, timeout);
    std::thread::sleep(Duration::from_millis(120));
    doomed.cancel();

    let a = done.wait_outcome(timeout)?;
    println!("first goal: {} with {}", a.state, a.result);
    let b = doomed.wait_outcome(timeout)?;
    println!("second goal: {} with {} left", b.state, b.result);
    Ok(())
}
