//! Operator surface for edgetier: an HTTP control-plane service and the
//! client the `edgetier` command uses to reach it.

pub mod api;
pub mod client;
pub mod notify;
pub mod render;

use edgetier::simnet::Scenario;

/// Cluster served by `edgetier serve` when no scenario file is given: two
/// gateways with a handful of sensor devices and no scripted workload.
pub const DEMO_SCENARIO: &str = r#"{
  "name": "demo",
  "seed": 1,
  "until": 0,
  "topology": {
    "frameworks": [{"id": "fw"}],
    "gateways": [{"id": "lobby"}, {"id": "floor"}],
    "devices": [
      {"id": "phone-1", "gateway": "lobby", "resources": {"cpus": 4.0, "mem_mb": 2048},
       "attributes": {"os": "android", "sensors": ["accelerometer", "gyroscope"], "executors": ["nodejs", "sim-task"]}},
      {"id": "phone-2", "gateway": "lobby", "resources": {"cpus": 2.0, "mem_mb": 1024},
       "attributes": {"os": "android", "sensors": ["accelerometer", "magnetometer"], "executors": ["nodejs", "sim-task"]}},
      {"id": "pi-1", "gateway": "floor", "resources": {"cpus": 4.0, "mem_mb": 4096},
       "attributes": {"os": "linux", "sensors": ["motion"], "executors": ["python", "shell", "sim-task"]}},
      {"id": "pi-2", "gateway": "floor", "resources": {"cpus": 4.0, "mem_mb": 4096},
       "attributes": {"os": "linux", "sensors": ["motion", "temperature"], "executors": ["python", "shell", "sim-task"]}}
    ]
  }
}"#;

pub fn demo_scenario() -> Scenario {
    Scenario::parse(DEMO_SCENARIO).expect("demo scenario is valid")
}
