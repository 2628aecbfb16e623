"""passwd(5) / shadow(5) parsing and crypt(3) password-field decomposition."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

from .errors import CredentialParseError

EPOCH = dt.date(1970, 1, 1)
SHADOW_NUMERIC = ("last_change_days", "min_days", "max_days", "warn_days",
                  "inactive_days", "expire_days")


@dataclass(frozen=True)
class PasswdEntry:
    username: str
    password_marker: str
    uid: int
    gid: int
    comment: str
    home: str
    shell: str
    raw_line: str
    line_no: int | None = None

    def to_line(self) -> str:
        return ":".join([self.username, self.password_marker, str(self.uid), str(self.gid),
                         self.comment, self.home, self.shell])


@dataclass(frozen=True)
class ShadowEntry:
    username: str
    password_raw: str
    last_change_days: int | None = None
    min_days: int | None = None
    max_days: int | None = None
    warn_days: int | None = None
    inactive_days: int | None = None
    expire_days: int | None = None
    reserved: str | None = None
    field_count: int = 9
    raw_line: str = ""
    line_no: int | None = None
    diagnostics: tuple[str, ...] = ()

    @property
    def must_change_password(self) -> bool:
        return self.last_change_days == 0

    @property
    def password(self) -> "PasswordField":
        return decompose_password_field(self.password_raw)

    def to_line(self) -> str:
        cols = [self.username, self.password_raw]
        cols += ["" if getattr(self, n) is None else str(getattr(self, n))
                 for n in SHADOW_NUMERIC]
        cols.append(self.reserved or "")
        return ":".join(cols[:self.field_count])


@dataclass(frozen=True)
class PasswordField:
    variant: str  # empty | star | locked | hashed | other
    hash_id: str | None = None
    salt: str | None = None
    digest: str | None = None
    options: str | None = None  # e.g. "rounds=5000"
    raw: str = ""

    def to_raw(self) -> str:
        if self.variant != "hashed":
            return self.raw
        parts = ["", self.hash_id]
        if self.options is not None:
            parts.append(self.options)
        parts += [self.salt, self.digest]
        return "$".join(parts)


def _decimal(text: str, what: str, line: str) -> int:
    if not text.isascii() or not text.isdigit():
        raise CredentialParseError(f"non-numeric {what} {text!r} in line {line!r}")
    return int(text)


def parse_passwd_line(line: str, line_no: int | None = None) -> PasswdEntry:
    line = line.rstrip("\n")
    fields = line.split(":")
    if len(fields) != 7:
        raise CredentialParseError(
            f"passwd line has wrong field count: expected 7, found {len(fields)}: {line!r}")
    user, marker, uid, gid, comment, home, shell = fields
    if not user:
        raise CredentialParseError(f"empty username in passwd line {line!r}")
    return PasswdEntry(user, marker, _decimal(uid, "uid", line), _decimal(gid, "gid", line),
                       comment, home, shell, line, line_no)


def parse_shadow_line(line: str, line_no: int | None = None, strict: bool = False) -> ShadowEntry:
    """Parse one shadow row.  Fewer than nine fields is accepted; ``strict``
    records a diagnostic for any count other than nine."""
    line = line.rstrip("\n")
    fields = line.split(":")
    n = len(fields)
    if n < 2 or n > 9:
        raise CredentialParseError(f"shadow line has {n} fields, expected 2 to 9: {line!r}")
    if not fields[0]:
        raise CredentialParseError(f"empty username in shadow line {line!r}")
    numeric = {}
    for name, text in zip(SHADOW_NUMERIC, fields[2:8]):
        numeric[name] = None if text == "" else _decimal(text, name, line)
    diagnostics = ()
    if strict and n != 9:
        diagnostics = (f"nonstandard field count {n} (expected 9)",)
    return ShadowEntry(
        username=fields[0], password_raw=fields[1],
        reserved=fields[8] if n == 9 else None,
        field_count=n, raw_line=line, line_no=line_no, diagnostics=diagnostics,
        **numeric)


def decompose_password_field(raw: str) -> PasswordField:
    """Total: classify any password column value."""
    if raw == "":
        return PasswordField("empty", raw=raw)
    if raw == "*":
        return PasswordField("star", raw=raw)
    if raw.startswith("!"):
        return PasswordField("locked", raw=raw)
    if raw.startswith("$"):
        parts = raw.split("$")
        if len(parts) == 4 and parts[1] and parts[3]:
            return PasswordField("hashed", parts[1], parts[2], parts[3], raw=raw)
        if len(parts) == 5 and parts[1] and parts[2] and parts[4]:
            return PasswordField("hashed", parts[1], parts[3], parts[4], options=parts[2], raw=raw)
    return PasswordField("other", raw=raw)


UID_CLASSES = ("root", "system_daemon", "user_daemon", "standard")


def classify_uid(uid: int) -> str:
    if uid < 0:
        raise ValueError("uid must be non-negative")
    if uid == 0:
        return "root"
    if uid <= 99:
        return "system_daemon"
    if uid <= 999:
        return "user_daemon"
    return "standard"


def days_to_date(days: int) -> dt.date:
    """Calendar date (UTC) for a count of days since 1970-01-01."""
    if days < 0:
        raise ValueError("days must be non-negative")
    return EPOCH + dt.timedelta(days=days)


@dataclass
class CredentialFile:
    """Parsed rows of one passwd or shadow file, with skipped and bad lines."""
    path: str
    text: str
    entries: list = field(default_factory=list)
    skipped_lines: list[int] = field(default_factory=list)
    errors: list[tuple[int, str]] = field(default_factory=list)


def _parse_file(text: str, path: str, parse_line) -> CredentialFile:
    out = CredentialFile(path, text)
    for no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            out.skipped_lines.append(no)
            continue
        try:
            out.entries.append(parse_line(line, no))
        except CredentialParseError as exc:
            out.errors.append((no, str(exc)))
    return out


def parse_passwd(text: str, path: str = "etc/passwd") -> CredentialFile:
    return _parse_file(text, path, parse_passwd_line)


def parse_shadow(text: str, path: str = "etc/shadow", strict: bool = False) -> CredentialFile:
    return _parse_file(text, path, lambda line, no: parse_shadow_line(line, no, strict))
