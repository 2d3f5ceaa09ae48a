//! Update policy and its plaintext `key=value` form.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const POLICY_KEYS: [&str; 6] = [
    "commit_interval",
    "max_file_size",
    "version_limit",
    "age_threshold",
    "anomaly_version_threshold",
    "avatar",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("missing policy keys: {}", .0.join(", "))]
    MissingKeys(Vec<String>),
    #[error("unknown policy key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for policy key `{key}`")]
    BadValue { key: String, value: String },
    #[error("malformed policy line `{0}`")]
    BadLine(String),
}

/// User preferences governing commits and auto-deletion.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdatePolicy {
    /// Seconds between scheduled commits.
    pub commit_interval: u64,
    pub max_file_size: u64,
    /// Versions kept per file, counting the live entry. At least 1.
    pub version_limit: u32,
    /// Versions older than this many seconds are aged out. 0 disables aging.
    pub age_threshold: u64,
    pub anomaly_version_threshold: u64,
    pub avatar: String,
}

impl fmt::Debug for UpdatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UpdatePolicy")
            .field("commit_interval", &self.commit_interval)
            .field("max_file_size", &self.max_file_size)
            .field("version_limit", &self.version_limit)
            .field("age_threshold", &self.age_threshold)
            .field("anomaly_version_threshold", &self.anomaly_version_threshold)
            .field("avatar", &"<redacted>")
            .finish()
    }
}

impl Default for UpdatePolicy {
    fn default() -> Self {
        Self {
            commit_interval: 8 * 3600,
            max_file_size: 64 << 20,
            version_limit: 10,
            age_threshold: 365 * 86400,
            anomaly_version_threshold: 100,
            avatar: "lighthouse".to_owned(),
        }
    }
}

fn split_lines(text: &str) -> Result<Vec<(&str, &str)>, PolicyError> {
    let mut out = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PolicyError::BadLine(line.to_owned()))?;
        out.push((k.trim(), v.trim()));
    }
    Ok(out)
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, PolicyError> {
    value.parse().map_err(|_| PolicyError::BadValue {
        key: key.to_owned(),
        value: value.to_owned(),
    })
}

impl UpdatePolicy {
    /// Parses a complete policy; every key must be present exactly once.
    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let mut map = BTreeMap::new();
        for (k, v) in split_lines(text)? {
            if !POLICY_KEYS.contains(&k) {
                return Err(PolicyError::UnknownKey(k.to_owned()));
            }
            map.insert(k, v);
        }
        let missing: Vec<String> = POLICY_KEYS
            .iter()
            .filter(|k| !map.contains_key(*k))
            .map(|k| (*k).to_owned())
            .collect();
        if !missing.is_empty() {
            return Err(PolicyError::MissingKeys(missing));
        }
        let policy = Self {
            commit_interval: number("commit_interval", map["commit_interval"])?,
            max_file_size: number("max_file_size", map["max_file_size"])?,
            version_limit: number("version_limit", map["version_limit"])?,
            age_threshold: number("age_threshold", map["age_threshold"])?,
            anomaly_version_threshold: number("anomaly_version_threshold", map["anomaly_version_threshold"])?,
            avatar: map["avatar"].to_owned(),
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |key: &str, value: String| Err(PolicyError::BadValue { key: key.to_owned(), value });
        if self.version_limit == 0 {
            return bad("version_limit", "0".into());
        }
        if self.commit_interval == 0 {
            return bad("commit_interval", "0".into());
        }
        if self.avatar.is_empty() || self.avatar.contains(['\n', '\t']) {
            return bad("avatar", self.avatar.clone());
        }
        Ok(())
    }

    fn public_fields(&self) -> [(&'static str, String); 5] {
        [
            ("commit_interval", self.commit_interval.to_string()),
            ("max_file_size", self.max_file_size.to_string()),
            ("version_limit", self.version_limit.to_string()),
            ("age_threshold", self.age_threshold.to_string()),
            ("anomaly_version_threshold", self.anomaly_version_threshold.to_string()),
        ]
    }

    /// Full text including the avatar. Only for the operator's own input file.
    pub fn to_text(&self) -> String {
        let mut out = self.to_plaintext();
        out.push_str(&format!("avatar={}\n", self.avatar));
        out
    }

    /// The copy left on the unprotected partition. The avatar is omitted
    /// because it must never reach host-readable storage.
    pub fn to_plaintext(&self) -> String {
        self.public_fields()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn aging_enabled(&self) -> bool {
        self.age_threshold > 0
    }
}

/// Result of comparing the host-side plaintext copy against the sealed policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyCheck {
    Ok,
    /// Offending keys; `<missing>` when the plaintext file is absent or
    /// unreadable.
    Mismatch(Vec<String>),
}

/// The sealed policy always governs; a mismatch is only reported.
pub fn verify_policy(sealed: &UpdatePolicy, plaintext: Option<&str>) -> PolicyCheck {
    let Some(text) = plaintext else {
        return PolicyCheck::Mismatch(vec!["<missing>".into()]);
    };
    let Ok(pairs) = split_lines(text) else {
        return PolicyCheck::Mismatch(vec!["<missing>".into()]);
    };
    let mut seen: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (k, v) in pairs {
        seen.entry(k).or_default().push(v);
    }
    let mut bad = Vec::new();
    for (key, want) in sealed.public_fields() {
        match seen.get(key).map(Vec::as_slice) {
            Some([v]) if *v == want => {}
            _ => bad.push(key.to_owned()),
        }
    }
    for key in seen.keys() {
        if !POLICY_KEYS[..5].contains(key) {
            bad.push((*key).to_owned());
        }
    }
    if bad.is_empty() {
        PolicyCheck::Ok
    } else {
        PolicyCheck::Mismatch(bad)
    }
}
