//! Pipeline phases and the legal transitions between them.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Summarize,
    Analyze,
    RepetitionCheck,
    AwaitOperator,
    Generate,
    Execute,
    Verify,
    Reporting,
    Done,
}

impl Phase {
    pub const START: Phase = Phase::Summarize;

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Summarize => "summarize",
            Phase::Analyze => "analyze",
            Phase::RepetitionCheck => "repetition_check",
            Phase::AwaitOperator => "await_operator",
            Phase::Generate => "generate",
            Phase::Execute => "execute",
            Phase::Verify => "verify",
            Phase::Reporting => "reporting",
            Phase::Done => "done",
        }
    }

    /// Successors allowed from `self`.
    pub fn successors(self) -> &'static [Phase] {
        use Phase::*;
        match self {
            Summarize => &[Analyze],
            Analyze => &[RepetitionCheck, Generate, Reporting],
            RepetitionCheck => &[Generate, AwaitOperator],
            AwaitOperator => &[Analyze, Generate, Summarize, Reporting],
            Generate => &[Execute],
            Execute => &[Verify],
            Verify => &[Execute, Summarize, Reporting],
            Reporting => &[Done],
            Done => &[],
        }
    }

    pub fn can_go_to(self, next: Phase) -> bool {
        self.successors().contains(&next)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// First illegal transition in `phases`, starting from [`Phase::START`].
pub fn first_illegal(phases: &[Phase]) -> Option<(usize, Phase, Phase)> {
    let first = *phases.first()?;
    if first != Phase::START {
        return Some((0, Phase::START, first));
    }
    phases
        .windows(2)
        .enumerate()
        .find(|(_, w)| !w[0].can_go_to(w[1]))
        .map(|(i, w)| (i + 1, w[0], w[1]))
}

#[cfg(test)]
mod tests {
    use super::Phase::*;
    use super::*;

    #[test]
    fn typical_iteration_is_legal() {
        let run = [
            Summarize, Analyze, RepetitionCheck, Generate, Execute, Verify, Execute, Verify, Summarize,
            Analyze, RepetitionCheck, AwaitOperator, Analyze, RepetitionCheck, Generate, Execute, Verify,
            Reporting, Done,
        ];
        assert_eq!(first_illegal(&run), None);
    }

    #[test]
    fn skipping_execute_is_illegal() {
        assert_eq!(first_illegal(&[Summarize, Analyze, Generate, Verify]), Some((3, Generate, Verify)));
        assert_eq!(first_illegal(&[Analyze]), Some((0, Summarize, Analyze)));
    }

    #[test]
    fn done_is_terminal() {
        assert!(Done.successors().is_empty());
        assert_eq!(serde_json::to_string(&RepetitionCheck).unwrap(), "\"repetition_check\"");
    }
}
