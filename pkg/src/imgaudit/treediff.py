"""Content-addressed directory snapshots and the two-tree comparison.

A snapshot is a list of :class:`FileRecord` sorted bytewise by relative path.
Snapshots come from a host directory (:func:`snapshot_tree`) or from an ext2
filesystem read directly out of an image (see :mod:`imgaudit.extfs`), and can
be saved to and loaded from a tab-separated interchange format so trees
captured on different machines can be diffed offline.
"""

from __future__ import annotations

import hashlib
import os
import stat
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable

KINDS = ("file", "dir", "symlink", "other")
STATUSES = ("only_left", "only_right", "content_differs", "metadata_differs", "identical")
SPECIAL_BITS = {0o4000: "setuid", 0o2000: "setgid", 0o1000: "sticky"}


@dataclass(frozen=True)
class FileRecord:
    rel_path: str
    kind: str
    size_bytes: int
    mode: int
    uid: int
    gid: int
    digest: str | None = None
    symlink_target: str | None = None
    mtime: int | None = None
    error: str | None = None

    @property
    def sort_key(self) -> bytes:
        return path_key(self.rel_path)

    def to_dict(self) -> dict:
        return {
            "rel_path": self.rel_path,
            "kind": self.kind,
            "size_bytes": self.size_bytes,
            "mode": f"{self.mode:04o}",
            "uid": self.uid,
            "gid": self.gid,
            "digest": self.digest,
            "symlink_target": self.symlink_target,
            "error": self.error,
        }


@dataclass(frozen=True)
class DiffEntry:
    rel_path: str
    status: str
    left: FileRecord | None = None
    right: FileRecord | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "rel_path": self.rel_path,
            "status": self.status,
            "detail": self.detail,
            "left": self.left.to_dict() if self.left else None,
            "right": self.right.to_dict() if self.right else None,
        }


def path_key(rel_path: str) -> bytes:
    return rel_path.encode("utf-8", "surrogateescape")


def decode_name(raw: bytes) -> str:
    return raw.decode("utf-8", "surrogateescape")


def kind_of_mode(mode: int) -> str:
    if stat.S_ISREG(mode):
        return "file"
    if stat.S_ISDIR(mode):
        return "dir"
    if stat.S_ISLNK(mode):
        return "symlink"
    return "other"


def _hash_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _scan(root: str) -> tuple[list[dict], list[str]]:
    """Walk without following symlinks; returns record fields plus the host
    path of every regular file, aligned by position."""
    rows, hosts = [], []

    def visit(dir_path: str, rel_prefix: str):
        try:
            with os.scandir(dir_path) as it:
                names = sorted((e.name for e in it), key=os.fsencode)
        except OSError as exc:
            return f"{type(exc).__name__}: {exc.strerror}"
        for name in names:
            host = os.path.join(dir_path, name)
            rel = rel_prefix + name
            try:
                st = os.lstat(host)
            except OSError as exc:
                rows.append(dict(rel_path=rel, kind="other", size_bytes=0, mode=0, uid=0,
                                 gid=0, error=f"{type(exc).__name__}: {exc.strerror}"))
                hosts.append(None)
                continue
            kind = kind_of_mode(st.st_mode)
            row = dict(rel_path=rel, kind=kind, size_bytes=st.st_size,
                       mode=stat.S_IMODE(st.st_mode), uid=st.st_uid, gid=st.st_gid,
                       mtime=int(st.st_mtime))
            if kind == "symlink":
                row["symlink_target"] = os.fsdecode(os.readlink(host))
            rows.append(row)
            hosts.append(host if kind == "file" else None)
            if kind == "dir":
                err = visit(host, rel + "/")
                if err:
                    row["error"] = err

    err = visit(root, "")
    if err:
        raise OSError(f"cannot read {root}: {err}")
    return rows, hosts


def snapshot_tree(root, jobs: int = 1) -> list[FileRecord]:
    """Snapshot a host directory or an opened ext2 filesystem.

    File hashing fans out over ``jobs`` threads; the result is identical
    for any worker count.
    """
    if hasattr(root, "walk_tree"):
        return root.walk_tree()
    rows, hosts = _scan(os.fspath(root))

    def work(host):
        if host is None:
            return None, None
        try:
            return _hash_file(host), None
        except OSError as exc:
            return None, f"{type(exc).__name__}: {exc.strerror}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, hosts))
    else:
        results = [work(h) for h in hosts]
    records = []
    for row, (digest, err) in zip(rows, results):
        if err:
            row["error"] = err
        records.append(FileRecord(digest=digest, **row))
    records.sort(key=lambda r: r.sort_key)
    return records


_META_FIELDS = ("kind", "mode", "uid", "gid", "symlink_target", "error")


def _differing(a: FileRecord, b: FileRecord, include_mtime: bool) -> list[str]:
    names = list(_META_FIELDS) + (["mtime"] if include_mtime else [])
    return [n for n in names if getattr(a, n) != getattr(b, n)]


def compare_trees(a: Iterable[FileRecord], b: Iterable[FileRecord],
                  include_mtime: bool = False) -> list[DiffEntry]:
    """Merge-join two snapshots on path.

    ``content_differs`` when digests differ; ``metadata_differs`` when the
    digests agree but kind, mode, uid, gid, link target (or mtime, when
    requested) do not.
    """
    left = sorted(a, key=lambda r: r.sort_key)
    right = sorted(b, key=lambda r: r.sort_key)
    out = []
    i = j = 0
    while i < len(left) or j < len(right):
        lk = left[i].sort_key if i < len(left) else None
        rk = right[j].sort_key if j < len(right) else None
        if rk is None or (lk is not None and lk < rk):
            out.append(DiffEntry(left[i].rel_path, "only_left", left=left[i]))
            i += 1
        elif lk is None or rk < lk:
            out.append(DiffEntry(right[j].rel_path, "only_right", right=right[j]))
            j += 1
        else:
            la, rb = left[i], right[j]
            meta = _differing(la, rb, include_mtime)
            if la.digest != rb.digest:
                status, detail = "content_differs", ["digest"] + meta
            elif meta:
                status, detail = "metadata_differs", meta
            else:
                status, detail = "identical", []
            out.append(DiffEntry(la.rel_path, status, la, rb, ",".join(detail)))
            i += 1
            j += 1
    return out


def summarize(entries: Iterable[DiffEntry]) -> dict:
    counts = {s: 0 for s in STATUSES}
    total = 0
    for e in entries:
        counts[e.status] += 1
        total += 1
    counts["total"] = total
    return counts


def audit_special_bits(snapshot: Iterable[FileRecord]) -> list[FileRecord]:
    """Records carrying setuid, setgid or sticky bits, sorted by path."""
    return sorted((r for r in snapshot if r.mode & 0o7000), key=lambda r: r.sort_key)


def describe_bits(mode: int | None) -> str:
    if not mode:
        return "-"
    return ",".join(name for bit, name in SPECIAL_BITS.items() if mode & bit)


@dataclass(frozen=True)
class SpecialBitsDiff:
    rel_path: str
    left_bits: int | None  # None: path absent on that side
    right_bits: int | None

    def to_dict(self) -> dict:
        return {"rel_path": self.rel_path,
                "left": describe_bits(self.left_bits) if self.left_bits is not None else None,
                "right": describe_bits(self.right_bits) if self.right_bits is not None else None}


def compare_special_bits(a: Iterable[FileRecord], b: Iterable[FileRecord]) -> list[SpecialBitsDiff]:
    """Paths whose special bits are set on either side and do not agree."""
    la = {r.rel_path: r.mode & 0o7000 for r in a}
    lb = {r.rel_path: r.mode & 0o7000 for r in b}
    out = []
    for path in sorted(la.keys() | lb.keys(), key=path_key):
        x, y = la.get(path), lb.get(path)
        if not x and not y:
            continue
        if x != y:
            out.append(SpecialBitsDiff(path, x, y))
    return out


# Interchange format: one record per line, tab-separated
#   path kind mode uid gid size digest|- target|- [!error]

SNAPSHOT_HEADER = "# imgaudit snapshot v1"
_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r", "-": "-"}


def _esc(text: str) -> str:
    out = []
    for ch in text:
        if ch in _ESCAPES:
            out.append(_ESCAPES[ch])
        elif 0xDC80 <= ord(ch) <= 0xDCFF:
            out.append(f"\\x{ord(ch) - 0xDC00:02x}")
        else:
            out.append(ch)
    return "\\-" if text == "-" else "".join(out)


def _unesc(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch != "\\":
            out.append(ch)
            i += 1
            continue
        nxt = text[i + 1:i + 2]
        if nxt == "x":
            out.append(chr(0xDC00 + int(text[i + 2:i + 4], 16)))
            i += 4
        elif nxt in _UNESCAPES:
            out.append(_UNESCAPES[nxt])
            i += 2
        else:
            raise ValueError(f"bad escape in snapshot field: {text!r}")
    return "".join(out)


def format_record(r: FileRecord) -> str:
    cols = [_esc(r.rel_path), r.kind, f"{r.mode:04o}", str(r.uid), str(r.gid),
            str(r.size_bytes), r.digest or "-",
            "-" if r.symlink_target is None else _esc(r.symlink_target)]
    if r.error:
        cols.append("!" + _esc(r.error))
    return "\t".join(cols)


def dump_snapshot(records: Iterable[FileRecord]) -> str:
    return "".join(line + "\n" for line in [SNAPSHOT_HEADER] + [format_record(r) for r in records])


def parse_record(line: str) -> FileRecord:
    cols = line.rstrip("\n").split("\t")
    if len(cols) not in (8, 9):
        raise ValueError(f"snapshot line has {len(cols)} fields, expected 8: {line!r}")
    path, kind, mode, uid, gid, size, digest, target = cols[:8]
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    error = None
    if len(cols) == 9:
        if not cols[8].startswith("!"):
            raise ValueError(f"bad error column: {cols[8]!r}")
        error = _unesc(cols[8][1:])
    return FileRecord(
        rel_path=_unesc(path), kind=kind, size_bytes=int(size), mode=int(mode, 8),
        uid=int(uid), gid=int(gid), digest=None if digest == "-" else digest,
        symlink_target=None if target == "-" else _unesc(target), error=error)


def load_snapshot(text: str) -> list[FileRecord]:
    records = [parse_record(line) for line in text.splitlines()
               if line and not line.startswith("#")]
    records.sort(key=lambda r: r.sort_key)
    return records


def is_snapshot_file(path: str | os.PathLike) -> bool:
    try:
        with open(path, "rb") as f:
            return f.read(len(SNAPSHOT_HEADER)) == SNAPSHOT_HEADER.encode()
    except OSError:
        return False


__all__ = [
    "FileRecord", "DiffEntry", "SpecialBitsDiff", "snapshot_tree", "compare_trees",
    "summarize", "audit_special_bits", "compare_special_bits", "dump_snapshot",
    "load_snapshot",
]
