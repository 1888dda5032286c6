use thiserror::Error;

use crate::channel::DeviceId;
use crate::runtime::Round;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("device {device} requested round {round} outside its schedule of {schedule} rounds")]
    ScheduleOverrun {
        device: DeviceId,
        round: Round,
        schedule: Round,
    },

    #[error("replay diverged: transcript hash {first:#018x} vs {second:#018x}")]
    NonDeterminism { first: u64, second: u64 },

    #[error("device {0} is outside the ID space or listed twice")]
    BadDeviceSet(DeviceId),

    #[error("no device was elected")]
    NoLeader,

    #[error("partition family not verified after {0} attempts")]
    RetriesExhausted(u32),

    #[error("device {id} exceeded its energy budget of {budget} on some feedback history")]
    BudgetExceeded { id: DeviceId, budget: u64 },

    #[error("malformed input: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
