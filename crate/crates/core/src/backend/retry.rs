use std::thread;
use std::time::Duration;

use super::BackendError;

/// Exponential backoff for transient failures. Permanent failures and script
/// misses are never retried.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn new(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            ..Default::default()
        }
    }

    pub fn with_base_delay(mut self, d: Duration) -> Self {
        self.base_delay = d;
        self
    }

    pub fn delay_for(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    pub fn run<T>(
        &self,
        record_key: &str,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempts <= self.max_retries => {
                    let delay = self.delay_for(attempts - 1);
                    log::debug!("{record_key}: {e}; retrying in {delay:?}");
                    thread::sleep(delay);
                }
                Err(e) => {
                    return Err(BackendError::Failed {
                        record_key: record_key.to_string(),
                        attempts,
                        source: Box::new(e),
                    })
                }
            }
        }
    }
}
