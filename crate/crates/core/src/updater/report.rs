//! Per-run update report and its tab-separated line form.

use serde::{Deserialize, Serialize};

use super::policy::PolicyCheck;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Provision,
    Commit,
    BrowseDelete,
    AutoDelete,
}

impl RunKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RunKind::Provision => "provision",
            RunKind::Commit => "commit",
            RunKind::BrowseDelete => "browse_delete",
            RunKind::AutoDelete => "auto_delete",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "provision" => RunKind::Provision,
            "commit" => RunKind::Commit,
            "browse_delete" => RunKind::BrowseDelete,
            "auto_delete" => RunKind::AutoDelete,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Committed {
    pub name: String,
    pub version_timestamp: u64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anomaly {
    pub name: String,
    /// Versions accumulated inside the rolling window.
    pub versions: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeletionCause {
    User,
    Aging,
    VersionLimit,
}

impl DeletionCause {
    pub fn as_str(self) -> &'static str {
        match self {
            DeletionCause::User => "user",
            DeletionCause::Aging => "aging",
            DeletionCause::VersionLimit => "version_limit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deletion {
    pub name: String,
    pub cause: DeletionCause,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeStatus {
    Absent,
    Verified(u64),
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub kind: RunKind,
    pub run_timestamp: u64,
    pub avatar_shown: String,
    pub policy_check: Option<PolicyCheck>,
    pub time: TimeStatus,
    pub committed: Vec<Committed>,
    pub skipped: Vec<Skipped>,
    pub anomalies: Vec<Anomaly>,
    pub deletions: Vec<Deletion>,
}

pub const REDACTED: &str = "<redacted>";

impl UpdateReport {
    pub fn new(kind: RunKind, run_timestamp: u64, avatar: &str) -> Self {
        Self {
            kind,
            run_timestamp,
            avatar_shown: avatar.to_owned(),
            policy_check: None,
            time: TimeStatus::Absent,
            committed: Vec::new(),
            skipped: Vec::new(),
            anomalies: Vec::new(),
            deletions: Vec::new(),
        }
    }

    /// Line form. With `redact` the avatar is replaced, which is the form
    /// written to any host-visible transcript.
    pub fn to_lines(&self, redact: bool) -> Vec<String> {
        let mut out = vec![format!("report\t{}\t{}", self.kind.as_str(), self.run_timestamp)];
        let avatar = if redact { REDACTED } else { &self.avatar_shown };
        out.push(format!("avatar\t{avatar}"));
        match &self.policy_check {
            None => {}
            Some(PolicyCheck::Ok) => out.push("policy\tok".into()),
            Some(PolicyCheck::Mismatch(keys)) => out.push(format!("policy\tmismatch\t{}", keys.join(","))),
        }
        match &self.time {
            TimeStatus::Absent => out.push("time\tabsent".into()),
            TimeStatus::Verified(t) => out.push(format!("time\tverified\t{t}")),
            TimeStatus::Rejected(why) => out.push(format!("time\trejected\t{why}")),
        }
        for c in &self.committed {
            out.push(format!("committed\t{}\t{}\t{}", c.name, c.version_timestamp, c.size));
        }
        for s in &self.skipped {
            out.push(format!("skipped\t{}\t{}", s.name, s.reason));
        }
        for a in &self.anomalies {
            out.push(format!("anomaly\t{}\t{}", a.name, a.versions));
        }
        for d in &self.deletions {
            out.push(format!("deleted\t{}\t{}", d.name, d.cause.as_str()));
        }
        out.push("end".into());
        out
    }

    /// Parses every report found in a transcript, skipping unrelated lines.
    pub fn parse_transcript(text: &str) -> Vec<UpdateReport> {
        let mut reports = Vec::new();
        let mut cur: Option<UpdateReport> = None;
        for line in text.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            match (f.as_slice(), cur.as_mut()) {
                (["report", kind, ts], _) => {
                    if let (Some(kind), Ok(ts)) = (RunKind::parse(kind), ts.parse()) {
                        cur = Some(UpdateReport::new(kind, ts, ""));
                    }
                }
                (["avatar", a], Some(r)) => r.avatar_shown = (*a).to_owned(),
                (["policy", "ok"], Some(r)) => r.policy_check = Some(PolicyCheck::Ok),
                (["policy", "mismatch", keys], Some(r)) => {
                    r.policy_check = Some(PolicyCheck::Mismatch(keys.split(',').map(str::to_owned).collect()))
                }
                (["time", "absent"], Some(r)) => r.time = TimeStatus::Absent,
                (["time", "verified", t], Some(r)) => {
                    r.time = TimeStatus::Verified(t.parse().unwrap_or_default())
                }
                (["time", "rejected", why], Some(r)) => r.time = TimeStatus::Rejected((*why).to_owned()),
                (["committed", name, ts, size], Some(r)) => r.committed.push(Committed {
                    name: (*name).to_owned(),
                    version_timestamp: ts.parse().unwrap_or_default(),
                    size: size.parse().unwrap_or_default(),
                }),
                (["skipped", name, reason], Some(r)) => r.skipped.push(Skipped {
                    name: (*name).to_owned(),
                    reason: (*reason).to_owned(),
                }),
                (["anomaly", name, n], Some(r)) => r.anomalies.push(Anomaly {
                    name: (*name).to_owned(),
                    versions: n.parse().unwrap_or_default(),
                }),
                (["deleted", name, cause], Some(r)) => {
                    let cause = match *cause {
                        "aging" => DeletionCause::Aging,
                        "version_limit" => DeletionCause::VersionLimit,
                        _ => DeletionCause::User,
                    };
                    r.deletions.push(Deletion {
                        name: (*name).to_owned(),
                        cause,
                    });
                }
                (["end"], Some(_)) => reports.extend(cur.take()),
                _ => {}
            }
        }
        reports
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip() {
        let mut r = UpdateReport::new(RunKind::Commit, 77, "owl");
        r.policy_check = Some(PolicyCheck::Mismatch(vec!["commit_interval".into()]));
        r.time = TimeStatus::Verified(70);
        r.committed.push(Committed { name: "a.txt".into(), version_timestamp: 77, size: 3 });
        r.skipped.push(Skipped { name: "big".into(), reason: "exceeds max_file_size".into() });
        r.anomalies.push(Anomaly { name: "a.txt".into(), versions: 120 });
        r.deletions.push(Deletion { name: "a.txt.000000000001".into(), cause: DeletionCause::Aging });
        let text = r.to_lines(false).join("\n");
        assert_eq!(UpdateReport::parse_transcript(&format!("noise\n{text}\nmore")), vec![r.clone()]);

        let redacted = r.to_lines(true).join("\n");
        assert!(!redacted.contains("owl"));
        assert_eq!(UpdateReport::parse_transcript(&redacted)[0].avatar_shown, REDACTED);
    }
}
