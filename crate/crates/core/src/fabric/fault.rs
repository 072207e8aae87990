use std::fmt;
use std::str::FromStr;

use super::{FabricError, RankId};

/// Condition under which a scheduled rank stops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trigger {
    /// Fires once the rank has absorbed `n` transactions of its initial shard.
    AfterTransactions(usize),
    /// Fires once the rank has completed `n` ring iterations.
    AfterIteration(usize),
    /// Fires once `floor(f * total)` units of the rank's own work are done.
    AtProgressFraction(f64),
}

/// What a rank reports at a fault point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Transactions { done: usize, total: usize },
    Iterations { done: usize, total: usize },
}

impl Trigger {
    pub fn fires(&self, progress: Progress) -> bool {
        match (*self, progress) {
            (Trigger::AfterTransactions(n), Progress::Transactions { done, .. }) => done >= n,
            (Trigger::AfterIteration(n), Progress::Iterations { done, .. }) => done >= n,
            (Trigger::AtProgressFraction(f), Progress::Transactions { done, total })
            | (Trigger::AtProgressFraction(f), Progress::Iterations { done, total }) => {
                done >= fraction_point(f, total)
            }
            _ => false,
        }
    }
}

/// Number of work units after which a fractional trigger fires.
pub fn fraction_point(f: f64, total: usize) -> usize {
    ((f * total as f64) + 1e-9).floor() as usize
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultEvent {
    pub rank: RankId,
    pub trigger: Trigger,
}

/// Declarative fail-stop schedule: at most one event per rank.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FaultSchedule {
    events: Vec<FaultEvent>,
}

impl FaultSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(events: Vec<FaultEvent>) -> Result<Self, FabricError> {
        let mut schedule = Self::default();
        for ev in events {
            schedule.push(ev.rank, ev.trigger)?;
        }
        Ok(schedule)
    }

    pub fn push(&mut self, rank: RankId, trigger: Trigger) -> Result<(), FabricError> {
        if self.events.iter().any(|e| e.rank == rank) {
            return Err(FabricError::InvalidSchedule(format!(
                "rank {rank} has more than one fault event"
            )));
        }
        if let Trigger::AtProgressFraction(f) = trigger {
            if !(0.0..=1.0).contains(&f) {
                return Err(FabricError::InvalidSchedule(format!(
                    "progress fraction {f} outside [0, 1]"
                )));
            }
        }
        self.events.push(FaultEvent { rank, trigger });
        Ok(())
    }

    pub fn with(mut self, rank: RankId, trigger: Trigger) -> Result<Self, FabricError> {
        self.push(rank, trigger)?;
        Ok(self)
    }

    pub fn events(&self) -> &[FaultEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn trigger_for(&self, rank: RankId) -> Option<Trigger> {
        self.events.iter().find(|e| e.rank == rank).map(|e| e.trigger)
    }

    pub(crate) fn validate(&self, p: usize) -> Result<(), FabricError> {
        for ev in &self.events {
            if ev.rank.index() >= p {
                return Err(FabricError::InvalidSchedule(format!(
                    "rank {} out of range for {p} ranks",
                    ev.rank
                )));
            }
        }
        if p > 0 && self.events.len() >= p {
            return Err(FabricError::InvalidSchedule(
                "schedule would fail every rank".into(),
            ));
        }
        Ok(())
    }
}

/// `rank@fraction`, as accepted on the command line.
impl FromStr for FaultEvent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (rank, frac) = s
            .split_once('@')
            .ok_or_else(|| format!("expected rank@fraction, got `{s}`"))?;
        let rank: usize = rank
            .trim()
            .parse()
            .map_err(|_| format!("bad rank in `{s}`"))?;
        let frac: f64 = frac
            .trim()
            .parse()
            .map_err(|_| format!("bad fraction in `{s}`"))?;
        if !(0.0..=1.0).contains(&frac) {
            return Err(format!("fraction {frac} outside [0, 1]"));
        }
        Ok(FaultEvent {
            rank: RankId(rank),
            trigger: Trigger::AtProgressFraction(frac),
        })
    }
}

impl fmt::Display for FaultEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.trigger {
            Trigger::AtProgressFraction(x) => write!(f, "{}@{}", self.rank, x),
            Trigger::AfterTransactions(n) => write!(f, "{}@t{}", self.rank, n),
            Trigger::AfterIteration(n) => write!(f, "{}@i{}", self.rank, n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_trigger_uses_floor() {
        let t = Trigger::AtProgressFraction(0.8);
        assert!(!t.fires(Progress::Transactions { done: 79, total: 100 }));
        assert!(t.fires(Progress::Transactions { done: 80, total: 100 }));
        // 0.1 * 4 iterations -> fires before the first iteration completes
        assert!(Trigger::AtProgressFraction(0.1).fires(Progress::Iterations { done: 0, total: 4 }));
    }

    #[test]
    fn unit_specific_triggers_ignore_other_units() {
        let t = Trigger::AfterIteration(2);
        assert!(!t.fires(Progress::Transactions { done: 10, total: 10 }));
        assert!(t.fires(Progress::Iterations { done: 2, total: 4 }));
    }

    #[test]
    fn one_event_per_rank() {
        let s = FaultSchedule::none()
            .with(RankId(1), Trigger::AfterTransactions(3))
            .unwrap();
        assert!(s.with(RankId(1), Trigger::AfterIteration(1)).is_err());
    }

    #[test]
    fn parses_cli_form() {
        let ev: FaultEvent = "1@0.8".parse().unwrap();
        assert_eq!(ev.rank, RankId(1));
        assert_eq!(ev.trigger, Trigger::AtProgressFraction(0.8));
        assert!("1".parse::<FaultEvent>().is_err());
        assert!("x@0.5".parse::<FaultEvent>().is_err());
        assert!("1@1.5".parse::<FaultEvent>().is_err());
    }
}
