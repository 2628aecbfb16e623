"""Kernel-blob analysis: printable strings, Linux build banners, canonical
hexdump rendering and byte-range diffs."""

from __future__ import annotations

import datetime as dt
import email.utils
import functools
import re
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator

from .errors import BannerError

WINDOW = 1 << 20


@dataclass(frozen=True)
class StringsHit:
    offset: int
    text: str

    @property
    def length(self) -> int:
        return len(self.text)


_PRINTABLE = bytes(range(0x20, 0x7f))


@functools.lru_cache(maxsize=32)
def _run_pattern(min_len: int, include_tab: bool) -> re.Pattern:
    cls = rb"[\t\x20-\x7e]" if include_tab else rb"[\x20-\x7e]"
    return re.compile(cls + b"{%d,}" % min_len)


def iter_strings(windows: Iterable[bytes], min_len: int = 4,
                 include_tab: bool = False) -> Iterator[StringsHit]:
    """Maximal printable runs across a sequence of windows.

    A run touching the end of a window is carried into the next one, so
    window boundaries never split a hit.
    """
    if min_len < 1:
        raise ValueError("min_len must be at least 1")
    pattern = _run_pattern(min_len, include_tab)
    printable = _PRINTABLE + b"\t" if include_tab else _PRINTABLE
    base = 0
    carry_start, carry = None, b""
    for window in windows:
        if not window:
            continue
        pos = 0
        if carry_start is not None:
            pos = len(window) - len(window.lstrip(printable))
            carry += window[:pos]
            if pos == len(window):
                base += len(window)
                continue
            if len(carry) >= min_len:
                yield StringsHit(carry_start, carry.decode("ascii"))
            carry_start, carry = None, b""
        # the trailing run may continue into the next window
        tail = max(len(window.rstrip(printable)), pos)
        for m in pattern.finditer(window, pos, tail):
            yield StringsHit(base + m.start(), m.group().decode("ascii"))
        if tail < len(window):
            carry_start, carry = base + tail, window[tail:]
        base += len(window)
    if carry_start is not None and len(carry) >= min_len:
        yield StringsHit(carry_start, carry.decode("ascii"))


def _windows(blob: bytes, size: int) -> Iterator[bytes]:
    view = memoryview(blob)
    for i in range(0, len(blob), size):
        yield bytes(view[i:i + size])


def extract_strings(blob: bytes, min_len: int = 4, include_tab: bool = False,
                    window: int = WINDOW) -> list[StringsHit]:
    return list(iter_strings(_windows(blob, window), min_len, include_tab))


def strings_from_file(f: BinaryIO, min_len: int = 4, include_tab: bool = False,
                      window: int = WINDOW) -> list[StringsHit]:
    return list(iter_strings(iter(lambda: f.read(window), b""), min_len, include_tab))


# Build banners -------------------------------------------------------------

_BANNER = re.compile(
    r"(?P<version>[^\s()]+) "
    r"\((?P<user>[^\s()@]+)@(?P<host>[^\s()]+)\) "
    r"(?:\((?:[^()]|\([^()]*\))*\) )*"  # optional toolchain groups, one nesting level
    r"#(?P<number>\d+)"
    r"(?P<rest>.*)"
)
_GIT = re.compile(r"-g([0-9a-f]{7,40})(?:-dirty)?$")
_CTIME = re.compile(
    r"(?P<text>(?:Mon|Tue|Wed|Thu|Fri|Sat|Sun) (?P<mon>[A-Z][a-z]{2}) +(?P<day>\d{1,2}) "
    r"(?P<time>\d{2}:\d{2}:\d{2}) (?P<tz>[A-Z]{1,5}) (?P<year>\d{4}))")
_RFC2822 = re.compile(
    r"(?P<text>(?:Mon|Tue|Wed|Thu|Fri|Sat|Sun), \d{1,2} [A-Z][a-z]{2} \d{4} "
    r"\d{2}:\d{2}:\d{2} [+-]\d{4})")
_UTC_NAMES = {"UTC", "GMT", "UT", "Z"}
_MONTHS = {m: i for i, m in enumerate(
    "Jan Feb Mar Apr May Jun Jul Aug Sep Oct Nov Dec".split(), start=1)}


@dataclass(frozen=True)
class BuildBanner:
    version: str
    git_hash: str | None
    dirty: bool
    builder_user: str
    build_host: str
    build_number: int
    flags: str
    timestamp: dt.datetime | None
    timestamp_text: str | None
    raw: str
    offset: int | None = None
    warning: str | None = None

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "git_hash": self.git_hash,
            "dirty": self.dirty,
            "builder_user": self.builder_user,
            "build_host": self.build_host,
            "build_number": self.build_number,
            "flags": self.flags,
            "timestamp": self.timestamp.strftime("%Y-%m-%dT%H:%M:%SZ") if self.timestamp else None,
            "timestamp_text": self.timestamp_text,
            "offset": self.offset,
            "warning": self.warning,
            "raw": self.raw,
        }


def parse_banner_timestamp(text: str) -> tuple[dt.datetime | None, str | None, str | None]:
    """(UTC instant, matched text, warning) for ctime- or RFC 2822-style stamps."""
    m = _RFC2822.search(text)
    if m:
        stamp = email.utils.parsedate_to_datetime(m.group("text"))
        return stamp.astimezone(dt.timezone.utc), m.group("text"), None
    m = _CTIME.search(text)
    if m:
        if m.group("tz") not in _UTC_NAMES:
            return None, m.group("text"), f"unresolvable time zone {m.group('tz')!r}"
        try:
            h, mi, s = (int(x) for x in m.group("time").split(":"))
            stamp = dt.datetime(int(m.group("year")), _MONTHS[m.group("mon")],
                                int(m.group("day")), h, mi, s, tzinfo=dt.timezone.utc)
        except (KeyError, ValueError) as exc:
            return None, m.group("text"), f"bad timestamp: {exc}"
        return stamp, m.group("text"), None
    return None, None, "no recognisable timestamp"


def parse_banner(text: str, offset: int | None = None) -> BuildBanner | None:
    m = _BANNER.search(text)
    if not m:
        return None
    version = m.group("version")
    git = _GIT.search(version)
    rest = m.group("rest")
    stamp, stamp_text, warning = parse_banner_timestamp(rest)
    flags = rest[:rest.find(stamp_text)] if stamp_text else rest
    return BuildBanner(
        version=version,
        git_hash=git.group(1) if git else None,
        dirty=version.endswith("-dirty"),
        builder_user=m.group("user"),
        build_host=m.group("host"),
        build_number=int(m.group("number")),
        flags=flags.strip(),
        timestamp=stamp,
        timestamp_text=stamp_text,
        raw=m.group(0),
        offset=None if offset is None else offset + m.start(),
        warning=warning,
    )


def find_build_banners(hits: Iterable[StringsHit]) -> list[BuildBanner]:
    out = []
    for hit in hits:
        banner = parse_banner(hit.text, hit.offset)
        if banner:
            out.append(banner)
    return out


_DELTA_FIELDS = {"version": "version", "git": "git_hash", "user": "builder_user",
                 "host": "build_host", "build_number": "build_number"}


@dataclass(frozen=True)
class BannerDelta:
    seconds: int
    equal: dict[str, bool]

    def to_dict(self) -> dict:
        return {"seconds": self.seconds, "equal": dict(self.equal)}


def banner_delta(a: BuildBanner, b: BuildBanner) -> BannerDelta:
    """Signed build-time difference b - a plus per-field equality."""
    if a.timestamp is None or b.timestamp is None:
        raise BannerError("banner delta needs parsed timestamps on both banners")
    seconds = int((b.timestamp - a.timestamp).total_seconds())
    return BannerDelta(seconds, {k: getattr(a, f) == getattr(b, f)
                                 for k, f in _DELTA_FIELDS.items()})


def format_duration(seconds: int) -> str:
    sign = "-" if seconds < 0 else "+"
    rest = abs(seconds)
    h, rem = divmod(rest, 3600)
    m, s = divmod(rem, 60)
    parts = ([f"{h} hours"] if h else []) + ([f"{m} minutes"] if m else []) + [f"{s} seconds"]
    return f"{sign}{abs(seconds)} seconds ({' '.join(parts)})"


# Hexdump -------------------------------------------------------------------

def hex_of_byte(b: int) -> str:
    if not 0 <= b <= 255:
        raise ValueError("byte out of range")
    return f"{b:02x}"


_GUTTER = bytes(c if 0x20 <= c <= 0x7e else 0x2e for c in range(256))


def _hexdump_line(offset: int, line: bytes) -> str:
    hexes = [f"{c:02x} " for c in line] + ["   "] * (16 - len(line))
    return (f"{offset:08x}  " + "".join(hexes[:8]) + " " + "".join(hexes[8:])
            + " |" + line.translate(_GUTTER).decode("ascii") + "|\n")


def iter_hexdump(chunks: Iterable[bytes], base_offset: int = 0) -> Iterator[str]:
    """Canonical ``hexdump -C`` lines; identical consecutive lines collapse to ``*``."""
    offset = base_offset
    prev = None
    squeezing = False
    buf = b""
    for chunk in chunks:
        buf += chunk
        cut = len(buf) - len(buf) % 16
        for i in range(0, cut, 16):
            line = buf[i:i + 16]
            if line == prev:
                if not squeezing:
                    squeezing = True
                    yield "*\n"
            else:
                squeezing = False
                prev = line
                yield _hexdump_line(offset, line)
            offset += 16
        buf = buf[cut:]
    if buf:
        yield _hexdump_line(offset, buf)
        offset += len(buf)
    if offset != base_offset:
        yield f"{offset:08x}\n"


def hexdump(blob: bytes, base_offset: int = 0) -> str:
    return "".join(iter_hexdump(_windows(blob, 1 << 16), base_offset))


# Byte diff -----------------------------------------------------------------

@dataclass(frozen=True)
class ByteDiffRegion:
    offset: int
    length: int
    left_excerpt: bytes
    right_excerpt: bytes

    def to_dict(self) -> dict:
        return {"offset": self.offset, "length": self.length,
                "left_excerpt": self.left_excerpt.hex(), "right_excerpt": self.right_excerpt.hex()}


@dataclass(frozen=True)
class ByteDiffSummary:
    differing_bytes: int
    region_count: int
    size_equal: bool
    left_size: int
    right_size: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _diff_spans(a: bytes, b: bytes, n: int) -> Iterator[tuple[int, int]]:
    block = 4096
    start = None
    for base in range(0, n, block):
        ca, cb = a[base:base + block], b[base:base + block]
        if ca == cb:
            if start is not None:
                yield start, base
                start = None
            continue
        for i, (x, y) in enumerate(zip(ca, cb)):
            if x != y:
                if start is None:
                    start = base + i
            elif start is not None:
                yield start, base + i
                start = None
    if start is not None:
        yield start, n


def diff_bytes(a: bytes, b: bytes) -> tuple[list[ByteDiffRegion], ByteDiffSummary]:
    """Maximal differing regions over the common length; a size mismatch adds
    one trailing region covering the longer input's tail."""
    n = min(len(a), len(b))
    regions = [ByteDiffRegion(s, e - s, a[s:min(e, s + 16)], b[s:min(e, s + 16)])
               for s, e in _diff_spans(a, b, n)]
    if len(a) != len(b):
        tail = max(len(a), len(b)) - n
        if regions and regions[-1].offset + regions[-1].length == n:
            last = regions.pop()
            regions.append(ByteDiffRegion(last.offset, last.length + tail,
                                          a[last.offset:last.offset + 16],
                                          b[last.offset:last.offset + 16]))
        else:
            regions.append(ByteDiffRegion(n, tail, a[n:n + 16], b[n:n + 16]))
    summary = ByteDiffSummary(
        differing_bytes=sum(r.length for r in regions), region_count=len(regions),
        size_equal=len(a) == len(b), left_size=len(a), right_size=len(b))
    return regions, summary
