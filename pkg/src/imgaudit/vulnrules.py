"""Credential and sshd configuration rules producing CWE-tagged findings.

The meaning of ``*`` in a shadow password column is disputed: crypt(3)
treats it as a value no password can hash to, while the audited system was
observed to accept any password for it.  ``RulePolicy.star_is_wildcard``
selects the reading and reports always say which one was applied.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .credparse import PasswdEntry, ShadowEntry, decompose_password_field
from .errors import PolicyError

SEVERITIES = ("critical", "high", "medium", "info")
SEVERITY_RANK = {s: i for i, s in enumerate(SEVERITIES)}

CWE_EMPTY_PASSWORD = 258
CWE_DEFAULT_CREDENTIALS = 1392
CWE_DEFAULT_PASSWORD = 1393
CWE_INSUFFICIENTLY_PROTECTED = 522
CWE_IMPROPER_AUTH = 287
CWE_UNNECESSARY_PRIVILEGES = 250
CWE_ACCESS_CONTROL = 284

STAR_READINGS = {
    True: "'*' read as a wildcard accepting any or no password",
    False: "'*' read as an unmatchable hash (password login disabled)",
}


@dataclass(frozen=True, order=True)
class Subject:
    file: str
    line: int
    name: str

    def __str__(self):
        return f"{self.file}:{self.line} {self.name}"


@dataclass(frozen=True)
class Finding:
    rule_id: str
    cwe_ids: tuple[int, ...]
    severity: str
    subject: Subject
    evidence: str
    recommendation: str
    context: tuple[tuple[int, str], ...] = ()  # further (line, excerpt) pairs

    @property
    def sort_key(self):
        return SEVERITY_RANK[self.severity], self.subject, self.rule_id

    def to_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "severity": self.severity,
            "cwe_ids": list(self.cwe_ids),
            "subject": {"file": self.subject.file, "line": self.subject.line,
                        "name": self.subject.name},
            "evidence": self.evidence,
            "context": [{"line": n, "excerpt": t} for n, t in self.context],
            "recommendation": self.recommendation,
        }


@dataclass(frozen=True)
class RulePolicy:
    star_is_wildcard: bool = True
    privileged_uid_threshold: int = 0
    severity_overrides: dict[str, str] = field(default_factory=dict)

    def __hash__(self):
        return hash((self.star_is_wildcard, self.privileged_uid_threshold,
                     tuple(sorted(self.severity_overrides.items()))))

    def to_text(self) -> str:
        lines = [f"star_is_wildcard={'true' if self.star_is_wildcard else 'false'}",
                 f"privileged_uid_threshold={self.privileged_uid_threshold}"]
        lines += [f"severity.{rule}={sev}" for rule, sev in sorted(self.severity_overrides.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RulePolicy":
        values: dict = {}
        overrides: dict[str, str] = {}
        for no, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise PolicyError(f"policy line {no}: expected key=value")
            key, value = (p.strip() for p in line.split("=", 1))
            if key == "star_is_wildcard":
                if value.lower() not in ("true", "false"):
                    raise PolicyError(f"policy line {no}: star_is_wildcard must be true or false")
                values[key] = value.lower() == "true"
            elif key == "privileged_uid_threshold":
                if not value.isdigit():
                    raise PolicyError(f"policy line {no}: threshold must be a non-negative integer")
                values[key] = int(value)
            elif key.startswith("severity."):
                if value not in SEVERITIES:
                    raise PolicyError(f"policy line {no}: unknown severity {value!r}")
                overrides[key[len("severity."):]] = value
            else:
                raise PolicyError(f"policy line {no}: unknown key {key!r}")
        return cls(severity_overrides=overrides, **values)

    @classmethod
    def load(cls, path) -> "RulePolicy":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())

    def severity(self, rule_id: str, default: str) -> str:
        return self.severity_overrides.get(rule_id, default)


def _finalize(findings: list[Finding], policy: RulePolicy) -> list[Finding]:
    adjusted = []
    for f in findings:
        sev = policy.severity(f.rule_id, f.severity)
        adjusted.append(f if sev == f.severity else Finding(
            f.rule_id, f.cwe_ids, sev, f.subject, f.evidence, f.recommendation, f.context))
    return sorted(adjusted, key=lambda f: f.sort_key)


def audit_credentials(passwd: list[PasswdEntry], shadow: list[ShadowEntry],
                      policy: RulePolicy | None = None,
                      passwd_path: str = "etc/passwd",
                      shadow_path: str = "etc/shadow") -> list[Finding]:
    policy = policy or RulePolicy()
    by_user: dict[str, PasswdEntry] = {}
    for p in passwd:
        by_user.setdefault(p.username, p)
    shadow_users = {s.username for s in shadow}

    def privileged(user: str) -> bool:
        p = by_user.get(user)
        return p is not None and p.uid <= policy.privileged_uid_threshold

    findings = []
    for s in shadow:
        subj = Subject(shadow_path, s.line_no or 0, s.username)
        pw = decompose_password_field(s.password_raw)
        if pw.variant == "empty":
            findings.append(Finding(
                "SHADOW-EMPTY", (CWE_EMPTY_PASSWORD,),
                "critical" if privileged(s.username) else "high", subj, s.raw_line,
                f"Set a password for {s.username} or lock the account with '!'."))
        elif pw.variant == "star" and policy.star_is_wildcard:
            findings.append(Finding(
                "SHADOW-WILDCARD",
                (CWE_EMPTY_PASSWORD, CWE_DEFAULT_CREDENTIALS, CWE_DEFAULT_PASSWORD),
                "critical" if privileged(s.username) else "high", subj, s.raw_line,
                f"Replace '*' for {s.username} with a locked ('!') or hashed password; "
                f"{STAR_READINGS[True]}."))
        elif pw.variant == "star":
            findings.append(Finding(
                "SHADOW-STAR-LOCKED", (CWE_IMPROPER_AUTH,), "info", subj, s.raw_line,
                f"Account {s.username} is locked by convention; {STAR_READINGS[False]}. "
                "Confirm the PAM stack agrees."))
        if s.must_change_password:
            findings.append(Finding(
                "SHADOW-MUST-CHANGE", (CWE_DEFAULT_PASSWORD,), "info", subj, s.raw_line,
                f"{s.username} must give a new password upon login (last change = 0)."))

    for p in passwd:
        subj = Subject(passwd_path, p.line_no or 0, p.username)
        if p.password_marker not in ("x", ""):
            findings.append(Finding(
                "PASSWD-HASH-EXPOSED", (CWE_INSUFFICIENTLY_PROTECTED,), "high", subj,
                p.raw_line,
                f"Move the password of {p.username} into /etc/shadow and set the passwd field to 'x'."))
        if p.username not in shadow_users:
            findings.append(Finding(
                "PASSWD-NO-SHADOW", (CWE_IMPROPER_AUTH,), "medium", subj, p.raw_line,
                f"Add a shadow entry for {p.username}."))
        if p.uid == 0 and p.username != "root":
            findings.append(Finding(
                "PASSWD-UID0-ALIAS", (CWE_UNNECESSARY_PRIVILEGES,), "high", subj, p.raw_line,
                f"Account {p.username} has uid 0; give it an unprivileged uid or remove it."))
    return _finalize(findings, policy)


_DIRECTIVE = re.compile(r"^\s*([A-Za-z][A-Za-z0-9]*)(?:\s*=\s*|\s+)(.*?)\s*$")
SSHD_KEYS = ("permitrootlogin", "passwordauthentication", "port", "permitemptypasswords")


def parse_sshd_config(text: str) -> dict[str, tuple[str, int, str]]:
    """First occurrence of each tracked directive: key -> (value, line, excerpt).

    Parsing stops at the first ``Match`` block; directives inside it are
    conditional and do not set global values.
    """
    found: dict[str, tuple[str, int, str]] = {}
    for no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        m = _DIRECTIVE.match(line)
        if not m:
            continue
        key = m.group(1).lower()
        if key == "match":
            break
        if key in SSHD_KEYS and key not in found:
            found[key] = (m.group(2), no, stripped)
    return found


def _downgrade(sev: str) -> str:
    return SEVERITIES[min(SEVERITY_RANK[sev] + 1, len(SEVERITIES) - 1)]


def audit_sshd_config(text: str, policy: RulePolicy | None = None,
                      path: str = "etc/ssh/sshd_config") -> list[Finding]:
    policy = policy or RulePolicy()
    cfg = parse_sshd_config(text)
    findings = []
    root = cfg.get("permitrootlogin")
    if root and root[0].lower() == "yes":
        sev = "high"
        context = ()
        rec = "Set 'PermitRootLogin no' (or prohibit-password)."
        pw = cfg.get("passwordauthentication")
        if pw and pw[0].lower() == "no":
            sev = _downgrade(sev)
            context = ((pw[1], pw[2]),)
            rec += " Password logins are already refused, which limits exposure to key-based root access."
        findings.append(Finding("SSHD-ROOT-LOGIN", (CWE_ACCESS_CONTROL,), sev,
                                Subject(path, root[1], "PermitRootLogin"), root[2], rec, context))
    empty = cfg.get("permitemptypasswords")
    if empty and empty[0].lower() == "yes":
        findings.append(Finding("SSHD-EMPTY-PASSWORDS", (CWE_EMPTY_PASSWORD,), "critical",
                                Subject(path, empty[1], "PermitEmptyPasswords"), empty[2],
                                "Set 'PermitEmptyPasswords no'."))
    return _finalize(findings, policy)
