//! One synchronous slot of a shared single-hop radio channel.
//!
//! The four collision-detection models differ only in which side of the
//! channel can tell a collision apart from silence, and whether a transmitter
//! hears anything at all. [`resolve_slot`] turns the actions of every
//! participating device into the feedback each one observes.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Identifier of a device, drawn from the ID space `[1, N]`.
pub type DeviceId = u64;

/// Collision-detection model of the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CdModel {
    StrongCd,
    SenderCd,
    ReceiverCd,
    NoCd,
}

impl CdModel {
    pub const ALL: [CdModel; 4] = [
        CdModel::StrongCd,
        CdModel::SenderCd,
        CdModel::ReceiverCd,
        CdModel::NoCd,
    ];

    /// Transmitters learn the outcome of their own slot.
    pub fn sender_side(self) -> bool {
        matches!(self, CdModel::StrongCd | CdModel::SenderCd)
    }

    /// Listeners can tell a collision apart from silence.
    pub fn receiver_side(self) -> bool {
        matches!(self, CdModel::StrongCd | CdModel::ReceiverCd)
    }

    /// Partial order on models: `self` offers every capability `other` does
    /// and at least one more. Sender-CD and Receiver-CD are incomparable.
    pub fn strictly_stronger_than(self, other: CdModel) -> bool {
        self != other
            && (self.sender_side() || !other.sender_side())
            && (self.receiver_side() || !other.receiver_side())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CdModel::StrongCd => "strong-cd",
            CdModel::SenderCd => "sender-cd",
            CdModel::ReceiverCd => "receiver-cd",
            CdModel::NoCd => "no-cd",
        }
    }
}

impl fmt::Display for CdModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CdModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "strongcd" | "strong" => Ok(CdModel::StrongCd),
            "sendercd" | "sender" => Ok(CdModel::SenderCd),
            "receivercd" | "receiver" => Ok(CdModel::ReceiverCd),
            "nocd" | "no" | "none" => Ok(CdModel::NoCd),
            _ => Err(format!("unknown collision-detection model `{s}`")),
        }
    }
}

/// Payload carried by a transmission. Lists are shared so that a single
/// broadcast reaching many listeners is not copied per listener.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Message {
    Token,
    Int(u64),
    List(Arc<[u64]>),
}

impl Message {
    pub fn list(ids: impl Into<Vec<u64>>) -> Self {
        Message::List(ids.into().into())
    }

    pub fn as_int(&self) -> Option<u64> {
        match self {
            Message::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[u64]> {
        match self {
            Message::List(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Message::Token => f.write_str("-"),
            Message::Int(v) => write!(f, "{v}"),
            Message::List(ids) => {
                for (i, id) in ids.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{id}")?;
                }
                Ok(())
            }
        }
    }
}

/// What a device does in one slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    Idle,
    Listen,
    Transmit(Message),
}

impl Action {
    pub fn is_idle(&self) -> bool {
        matches!(self, Action::Idle)
    }

    pub fn tag(&self) -> ActionTag {
        match self {
            Action::Idle => ActionTag::Idle,
            Action::Listen => ActionTag::Listen,
            Action::Transmit(_) => ActionTag::Transmit,
        }
    }
}

/// An action with its payload erased.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionTag {
    Idle,
    Listen,
    Transmit,
}

impl ActionTag {
    pub fn letter(self) -> char {
        match self {
            ActionTag::Idle => 'I',
            ActionTag::Listen => 'L',
            ActionTag::Transmit => 'T',
        }
    }
}

/// What a device observes at the end of a slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Feedback {
    None,
    Silence,
    Collision,
    Received(Message),
}

impl Feedback {
    pub fn message(&self) -> Option<&Message> {
        match self {
            Feedback::Received(m) => Some(m),
            _ => None,
        }
    }
}

/// Result of resolving one slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotOutcome {
    pub feedback: BTreeMap<DeviceId, Feedback>,
    pub transmitter_count: usize,
    pub delivered: Option<Message>,
}

/// Feedback for a single device given its action and the slot's aggregate.
///
/// `delivered` must be the unique transmitted message when
/// `transmitter_count == 1` and is ignored otherwise.
pub fn feedback_for(
    model: CdModel,
    action: &Action,
    transmitter_count: usize,
    delivered: Option<&Message>,
) -> Feedback {
    match action {
        Action::Idle => Feedback::None,
        Action::Listen => match transmitter_count {
            0 => Feedback::Silence,
            1 => Feedback::Received(delivered.expect("unique transmission").clone()),
            _ if model.receiver_side() => Feedback::Collision,
            _ => Feedback::Silence,
        },
        Action::Transmit(_) if !model.sender_side() => Feedback::None,
        Action::Transmit(_) => match transmitter_count {
            1 => Feedback::Received(delivered.expect("unique transmission").clone()),
            _ if model == CdModel::StrongCd => Feedback::Collision,
            _ => Feedback::Silence,
        },
    }
}

/// Resolve one slot of the channel.
pub fn resolve_slot<'a, I>(model: CdModel, actions: I) -> SlotOutcome
where
    I: IntoIterator<Item = (DeviceId, &'a Action)>,
{
    let actions: Vec<(DeviceId, &Action)> = actions.into_iter().collect();
    let mut transmitter_count = 0usize;
    let mut last_payload = None;
    for (_, action) in &actions {
        if let Action::Transmit(m) = action {
            transmitter_count += 1;
            last_payload = Some(m);
        }
    }
    let delivered = if transmitter_count == 1 {
        last_payload.cloned()
    } else {
        None
    };
    let feedback = actions
        .iter()
        .map(|(id, action)| {
            (
                *id,
                feedback_for(model, action, transmitter_count, delivered.as_ref()),
            )
        })
        .collect();
    SlotOutcome {
        feedback,
        transmitter_count,
        delivered,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(v: u64) -> Message {
        Message::Int(v)
    }

    #[test]
    fn lone_listener_hears_silence() {
        let out = resolve_slot(CdModel::StrongCd, [(1, &Action::Listen)]);
        assert_eq!(out.feedback[&1], Feedback::Silence);
        assert_eq!(out.transmitter_count, 0);
        assert!(out.delivered.is_none());
    }

    #[test]
    fn sender_cd_collision_sounds_like_silence() {
        let (a, b) = (Action::Transmit(m(1)), Action::Transmit(m(2)));
        let out = resolve_slot(
            CdModel::SenderCd,
            [(1, &a), (2, &b), (3, &Action::Listen)],
        );
        for id in 1..=3 {
            assert_eq!(out.feedback[&id], Feedback::Silence);
        }
    }

    #[test]
    fn no_cd_transmitter_gets_nothing() {
        let a = Action::Transmit(m(7));
        let out = resolve_slot(CdModel::NoCd, [(1, &a), (2, &Action::Listen)]);
        assert_eq!(out.feedback[&1], Feedback::None);
        assert_eq!(out.feedback[&2], Feedback::Received(m(7)));
        assert_eq!(out.delivered, Some(m(7)));
    }

    #[test]
    fn strong_cd_transmitters_detect_collision() {
        let (a, b) = (Action::Transmit(m(1)), Action::Transmit(m(2)));
        let out = resolve_slot(CdModel::StrongCd, [(1, &a), (2, &b)]);
        assert_eq!(out.feedback[&1], Feedback::Collision);
        assert_eq!(out.feedback[&2], Feedback::Collision);
    }

    #[test]
    fn model_order() {
        use CdModel::*;
        assert!(StrongCd.strictly_stronger_than(SenderCd));
        assert!(StrongCd.strictly_stronger_than(NoCd));
        assert!(ReceiverCd.strictly_stronger_than(NoCd));
        assert!(SenderCd.strictly_stronger_than(NoCd));
        assert!(!SenderCd.strictly_stronger_than(ReceiverCd));
        assert!(!ReceiverCd.strictly_stronger_than(SenderCd));
        assert!(!NoCd.strictly_stronger_than(NoCd));
    }

    #[test]
    fn parse_models() {
        assert_eq!("Strong-CD".parse::<CdModel>().unwrap(), CdModel::StrongCd);
        assert_eq!("nocd".parse::<CdModel>().unwrap(), CdModel::NoCd);
        assert!("bogus".parse::<CdModel>().is_err());
    }

    /// Coarsen Strong-CD feedback into what `model` would report.
    fn coarsen(model: CdModel, action: &Action, strong: &Feedback) -> Feedback {
        match (action, strong) {
            (Action::Idle, _) => Feedback::None,
            (Action::Transmit(_), _) if !model.sender_side() => Feedback::None,
            (_, Feedback::Collision) if model == CdModel::StrongCd => Feedback::Collision,
            (Action::Listen, Feedback::Collision) if model.receiver_side() => Feedback::Collision,
            (_, Feedback::Collision) => Feedback::Silence,
            (_, fb) => fb.clone(),
        }
    }

    #[test]
    fn weaker_models_coarsen_strong_cd_exhaustively() {
        // Every assignment of {Idle, Listen, Transmit} to four devices covers
        // transmitter counts 0..=4 and every role.
        let choices = [0u8, 1, 2];
        for a in choices {
            for b in choices {
                for c in choices {
                    for d in choices {
                        let acts: Vec<Action> = [a, b, c, d]
                            .iter()
                            .enumerate()
                            .map(|(i, x)| match x {
                                0 => Action::Idle,
                                1 => Action::Listen,
                                _ => Action::Transmit(m(i as u64 + 10)),
                            })
                            .collect();
                        let pairs = || acts.iter().enumerate().map(|(i, a)| (i as u64 + 1, a));
                        let strong = resolve_slot(CdModel::StrongCd, pairs());
                        assert_eq!(strong.delivered.is_some(), strong.transmitter_count == 1);
                        for model in CdModel::ALL {
                            let out = resolve_slot(model, pairs());
                            assert_eq!(out.transmitter_count, strong.transmitter_count);
                            for (i, act) in acts.iter().enumerate() {
                                let id = i as u64 + 1;
                                let fb = &out.feedback[&id];
                                assert_eq!(*fb, coarsen(model, act, &strong.feedback[&id]));
                                if matches!(fb, Feedback::None) {
                                    assert!(
                                        act.is_idle()
                                            || (matches!(act, Action::Transmit(_))
                                                && !model.sender_side())
                                    );
                                }
                                if matches!(fb, Feedback::Collision) {
                                    assert!(matches!(model, CdModel::StrongCd | CdModel::ReceiverCd));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
