mod common;

use std::time::Duration;

use common::{inproc_broker, node, spin};
use metaros::envelope::Value;
use metaros::nodegraph::{ParameterDecl, ParameterError, Validator};
use metaros::services::CallError;

const WAIT: Duration = Duration::from_secs(2);

#[test]
fn local_parameters_are_typed_and_validated() {
    let broker = inproc_broker();
    let n = node(&broker, "robot");
    n.declare_parameter(
        ParameterDecl::new("max_speed", 10i64).with_validator(Validator::IntRange { min: 0, max: 100 }),
    )
    .unwrap();
    assert_eq!(n.get_parameter("max_speed"), Ok(Value::Int64(10)));
    assert!(matches!(n.set_parameter("max_speed", 2.5), Err(ParameterError::TypeMismatch { .. })));
    assert!(matches!(n.set_parameter("max_speed", 500i64), Err(ParameterError::Invalid { .. })));
    assert_eq!(n.get_parameter("max_speed"), Ok(Value::Int64(10)));
    n.set_parameter("max_speed", 42i64).unwrap();
    assert_eq!(n.get_parameter("max_speed"), Ok(Value::Int64(42)));
    assert!(matches!(n.get_parameter("nope"), Err(ParameterError::Unknown(_))));
}

#[test]
fn remote_nodes_read_and_write_through_services() {
    let broker = inproc_broker();
    let robot = node(&broker, "robot");
    let tool = node(&broker, "tool");
    robot
        .declare_parameter(ParameterDecl::new("gain", 0.5).with_validator(Validator::FloatRange { min: 0.0, max: 1.0 }))
        .unwrap();
    robot.declare_parameter(ParameterDecl::new("label", "arm")).unwrap();
    let _e = spin(&robot);

    assert_eq!(tool.get_remote_parameter("robot", "gain", WAIT), Ok(Value::Float64(0.5)));
    assert_eq!(
        tool.list_remote_parameters("robot", WAIT),
        Ok(vec!["gain".to_string(), "label".to_string()])
    );
    tool.set_remote_parameter("robot", "gain", 0.75, WAIT).unwrap();
    assert_eq!(robot.get_parameter("gain"), Ok(Value::Float64(0.75)));

    for bad in [Value::Float64(3.0), Value::Int64(1), Value::from("x")] {
        assert!(matches!(
            tool.set_remote_parameter("robot", "gain", bad, WAIT),
            Err(CallError::Failed(_))
        ));
    }
    assert_eq!(robot.get_parameter("gain"), Ok(Value::Float64(0.75)));
    assert!(matches!(
        tool.get_remote_parameter("robot", "missing", WAIT),
        Err(CallError::Failed(_))
    ));
    assert!(matches!(
        tool.get_remote_parameter("nobody", "gain", WAIT),
        Err(CallError::Failed(_))
    ));
}
