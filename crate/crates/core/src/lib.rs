//! Edge orchestration across a cloud master, edge gateways and edge devices.

pub mod codec;
pub mod control;
pub mod device;
pub mod domain;
pub mod executor;
pub mod gateway;
pub mod events;
pub mod master;
pub mod persistence;
pub mod protocol;
pub mod scheduler;
pub mod simnet;
