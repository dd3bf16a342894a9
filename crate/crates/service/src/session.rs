use serde::{Deserialize, Serialize};

/// Lifecycle of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Idle,
    Fitting,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    StartFit,
    Succeed,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot {transition:?} while session is {from:?}")]
pub struct TransitionError {
    pub from: SessionStatus,
    pub transition: Transition,
}

impl SessionStatus {
    pub const ALL: [SessionStatus; 4] = [Self::Idle, Self::Fitting, Self::Done, Self::Failed];

    pub fn apply(self, t: Transition) -> Result<SessionStatus, TransitionError> {
        use SessionStatus::*;
        match (self, t) {
            (Idle | Done | Failed, Transition::StartFit) => Ok(Fitting),
            (Fitting, Transition::Succeed) => Ok(Done),
            (Fitting, Transition::Fail) => Ok(Failed),
            (from, transition) => Err(TransitionError { from, transition }),
        }
    }

    /// Landmarks may be edited in every state except while a fit is running.
    pub fn accepts_edits(self) -> bool {
        self != SessionStatus::Fitting
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fitting_only_ends() {
        assert!(SessionStatus::Fitting.apply(Transition::StartFit).is_err());
        assert_eq!(
            SessionStatus::Fitting.apply(Transition::Fail),
            Ok(SessionStatus::Failed)
        );
        assert!(SessionStatus::Idle.apply(Transition::Succeed).is_err());
        assert_eq!(
            SessionStatus::Done.apply(Transition::StartFit),
            Ok(SessionStatus::Fitting)
        );
    }

    #[test]
    fn serde_names() {
        assert_eq!(
            serde_json::to_string(&SessionStatus::Done).unwrap(),
            "\"done\""
        );
    }
}
