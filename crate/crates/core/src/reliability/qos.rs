use std::time::Duration;

use thiserror::Error;

use super::DEDUP_WINDOW;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReliabilityMode {
    BestEffort,
    Reliable,
}

/// Delivery policy of a publisher or subscription.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QosProfile {
    pub mode: ReliabilityMode,
    pub history_depth: usize,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub backoff_max: Duration,
    pub ack_timeout: Duration,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QosError {
    #[error("history depth must be positive")]
    ZeroDepth,
    #[error("backoff_base exceeds backoff_max")]
    BackoffOrder,
    #[error("RELIABLE mode needs max_retries >= 1")]
    NoRetries,
}

impl Default for QosProfile {
    fn default() -> Self {
        QosProfile {
            mode: ReliabilityMode::BestEffort,
            history_depth: 16,
            max_retries: 5,
            backoff_base: Duration::from_millis(50),
            backoff_max: Duration::from_secs(2),
            ack_timeout: Duration::from_millis(200),
        }
    }
}

impl QosProfile {
    pub fn best_effort() -> QosProfile {
        QosProfile::default()
    }

    pub fn reliable() -> QosProfile {
        QosProfile {
            mode: ReliabilityMode::Reliable,
            ..QosProfile::default()
        }
    }

    pub fn with_depth(mut self, depth: usize) -> QosProfile {
        self.history_depth = depth;
        self
    }

    pub fn with_retries(mut self, max_retries: u32) -> QosProfile {
        self.max_retries = max_retries;
        self
    }

    pub fn with_ack_timeout(mut self, t: Duration) -> QosProfile {
        self.ack_timeout = t;
        self
    }

    pub fn with_backoff(mut self, base: Duration, max: Duration) -> QosProfile {
        self.backoff_base = base;
        self.backoff_max = max;
        self
    }

    pub fn is_reliable(&self) -> bool {
        self.mode == ReliabilityMode::Reliable
    }

    pub fn validate(&self) -> Result<(), QosError> {
        if self.history_depth == 0 {
            return Err(QosError::ZeroDepth);
        }
        if self.backoff_base > self.backoff_max {
            return Err(QosError::BackoffOrder);
        }
        if self.is_reliable() && self.max_retries == 0 {
            return Err(QosError::NoRetries);
        }
        Ok(())
    }

    /// Delay before retransmission attempt `attempt` (1-based):
    /// `min(backoff_base * 2^(attempt-1), backoff_max)`.
    pub fn backoff_delay(&self, attempt: u32) -> Duration {
        backoff_delay(self.backoff_base, self.backoff_max, attempt)
    }

    /// Time from the first transmission until a frame that is never
    /// acknowledged is declared failed.
    pub fn retry_budget(&self) -> Duration {
        let waits = self.ack_timeout * (self.max_retries + 1);
        (1..=self.max_retries).map(|k| self.backoff_delay(k)).sum::<Duration>() + waits
    }

    /// Largest sequence span a reliable publisher keeps unacknowledged.
    pub fn in_flight_window(&self) -> usize {
        self.history_depth.min(DEDUP_WINDOW)
    }
}

pub fn backoff_delay(base: Duration, max: Duration, attempt: u32) -> Duration {
    let exp = attempt.saturating_sub(1).min(63);
    let nanos = base.as_nanos().saturating_mul(1u128 << exp);
    let capped = nanos.min(max.as_nanos());
    Duration::from_nanos(capped as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_backoff_with_cap() {
        let q = QosProfile::reliable();
        let delays: Vec<u128> = (1..=7).map(|k| q.backoff_delay(k).as_millis()).collect();
        assert_eq!(delays, vec![50, 100, 200, 400, 800, 1600, 2000]);
        assert_eq!(q.backoff_delay(200), Duration::from_secs(2));
    }

    #[test]
    fn default_budget() {
        // 6 ack waits of 200 ms plus 50+100+200+400+800 ms of backoff
        assert_eq!(QosProfile::reliable().retry_budget(), Duration::from_millis(2750));
    }

    #[test]
    fn validation() {
        assert_eq!(QosProfile::reliable().with_retries(0).validate(), Err(QosError::NoRetries));
        assert!(QosProfile::best_effort().with_retries(0).validate().is_ok());
        assert_eq!(QosProfile::default().with_depth(0).validate(), Err(QosError::ZeroDepth));
        assert_eq!(
            QosProfile::default()
                .with_backoff(Duration::from_secs(3), Duration::from_secs(1))
                .validate(),
            Err(QosError::BackoffOrder)
        );
    }
}
