//! Wall clock with a `SOURCE_DATE_EPOCH` override for reproducible output.

use chrono::{DateTime, TimeZone, Utc};

pub const SOURCE_DATE_EPOCH: &str = "SOURCE_DATE_EPOCH";

/// Current time, or the Unix timestamp in `SOURCE_DATE_EPOCH` when set.
pub fn now() -> DateTime<Utc> {
    std::env::var(SOURCE_DATE_EPOCH)
        .ok()
        .and_then(|v| from_epoch(&v))
        .unwrap_or_else(Utc::now)
}

pub fn from_epoch(seconds: &str) -> Option<DateTime<Utc>> {
    let secs: i64 = seconds.trim().parse().ok()?;
    Utc.timestamp_opt(secs, 0).single()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_epoch() {
        assert_eq!(
            from_epoch("86400").unwrap().to_rfc3339(),
            "1970-01-02T00:00:00+00:00"
        );
        assert!(from_epoch("soon").is_none());
    }
}
