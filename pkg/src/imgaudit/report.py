"""Comparison pipeline and report rendering."""

from __future__ import annotations

import datetime as dt
import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import __version__
from .binmeta import (BannerDelta, BuildBanner, banner_delta,
                      find_build_banners, format_duration, iter_strings)
from .credparse import parse_passwd, parse_shadow
from .errors import ExtError, ImgAuditError
from .extfs import Ext2Filesystem
from .image_io import ByteSource, open_image
from .partitions import (PartitionDiff, PartitionTable, diff_partition_tables,
                         hash_partitions, parse_gpt, partition_source,
                         summarize_partition_diff)
from .treediff import (DiffEntry, FileRecord, SpecialBitsDiff, compare_special_bits,
                       compare_trees, load_snapshot, is_snapshot_file, snapshot_tree,
                       summarize)
from .vulnrules import (STAR_READINGS, Finding, RulePolicy, audit_credentials,
                        audit_sshd_config, parse_sshd_config)

VERDICTS = ("identical", "metadata_only_drift", "content_drift", "findings_present")
SSHD_PATHS = ("etc/ssh/sshd_config", "etc/ssh/sshd.conf")
KERNEL_NAME = re.compile(r"(^|/)vmlinu[xz][^/]*$")
MAX_RAW_SCAN = 256 * 1024 * 1024


# Tree sources ---------------------------------------------------------------

class HostTree:
    kind = "directory"

    def __init__(self, root: str):
        if not os.path.isdir(root):
            raise ImgAuditError(f"not a directory: {root}")
        self.root = root
        self.label = root

    def snapshot(self, jobs: int = 1) -> list[FileRecord]:
        return snapshot_tree(self.root, jobs=jobs)

    def read_file(self, rel: str) -> bytes | None:
        path = os.path.join(self.root, rel)
        for _ in range(40):
            if not os.path.islink(path):
                break
            target = os.readlink(path)
            path = (os.path.join(self.root, target.lstrip("/")) if target.startswith("/")
                    else os.path.join(os.path.dirname(path), target))
        try:
            with open(path, "rb") as f:
                return f.read()
        except OSError:
            return None


class Ext2Tree:
    kind = "ext2"

    def __init__(self, fs: Ext2Filesystem, label: str):
        self.fs = fs
        self.label = label

    def snapshot(self, jobs: int = 1) -> list[FileRecord]:
        return self.fs.walk_tree()

    def read_file(self, rel: str) -> bytes | None:
        try:
            return self.fs.read_path(rel)
        except ExtError:
            return None


class SnapshotTree:
    kind = "snapshot"

    def __init__(self, path: str):
        with open(path, encoding="utf-8") as f:
            self.records = load_snapshot(f.read())
        self.label = path

    def snapshot(self, jobs: int = 1) -> list[FileRecord]:
        return self.records

    def read_file(self, rel: str) -> bytes | None:
        return None


_PART_SPEC = re.compile(r"^(?P<image>.+):part(?P<index>\d+)$")


def open_tree(spec: str):
    """Directory path, saved snapshot file, or ``image:partN`` for an ext2 partition."""
    m = _PART_SPEC.match(spec)
    if m and not os.path.exists(spec):
        _, source = open_image(m.group("image"))
        table = parse_gpt(source)
        entry = table.entry(int(m.group("index")))
        if entry.fs_kind != "ext2":
            raise ImgAuditError(
                f"{spec} holds {entry.fs_kind}, not ext2; mount it on a host and pass the directory")
        return Ext2Tree(Ext2Filesystem(partition_source(source, entry)), spec)
    if os.path.isfile(spec) and is_snapshot_file(spec):
        return SnapshotTree(spec)
    return HostTree(spec)


# Report model ---------------------------------------------------------------

@dataclass
class CredentialAudit:
    source: str
    findings: list[Finding] = field(default_factory=list)
    parse_errors: list[str] = field(default_factory=list)
    files: list[str] = field(default_factory=list)
    sshd: dict = field(default_factory=dict)
    star_reading: str = STAR_READINGS[True]

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "files": list(self.files),
            "star_reading": self.star_reading,
            "sshd": dict(self.sshd),
            "parse_errors": list(self.parse_errors),
            "findings": [f.to_dict() for f in self.findings],
        }


@dataclass
class TreeSection:
    label: str
    summary: dict
    entries: list[DiffEntry]  # non-identical only
    special_bits: list[SpecialBitsDiff]
    notes: list[str] = field(default_factory=list)

    @property
    def has_content_drift(self) -> bool:
        return any(self.summary[s] for s in ("only_left", "only_right", "content_differs"))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "summary": dict(self.summary),
            "metadata_comparison": "extension: mode, uid, gid, kind, link target",
            "entries": [e.to_dict() for e in self.entries],
            "special_bits": [d.to_dict() for d in self.special_bits],
            "notes": list(self.notes),
        }


@dataclass
class ComparisonReport:
    inputs: list[dict]
    partition_tables: list[PartitionTable] | None = None
    partition_diff: list[PartitionDiff] | None = None
    partition_summary: dict | None = None
    trees: list[TreeSection] = field(default_factory=list)
    audits: list[CredentialAudit | None] = field(default_factory=lambda: [None, None])
    banners: list[list[BuildBanner]] = field(default_factory=lambda: [[], []])
    banner_delta: BannerDelta | None = None
    content_drift: bool = False
    digests_equal: bool = False
    notes: list[str] = field(default_factory=list)
    tool_version: str = __version__
    generated_at: str | None = None

    @property
    def findings(self) -> list[Finding]:
        return [f for a in self.audits if a for f in a.findings]

    @property
    def verdict(self) -> str:
        if self.digests_equal:
            return "identical"
        if any(f.severity in ("critical", "high") for f in self.findings):
            return "findings_present"
        return "content_drift" if self.content_drift else "metadata_only_drift"

    def to_dict(self, include_timestamp: bool = True) -> dict:
        out = {"tool": "imgaudit", "tool_version": self.tool_version}
        if include_timestamp and self.generated_at:
            out["generated_at"] = self.generated_at
        out.update({
            "verdict": self.verdict,
            "exit_code": exit_code(self),
            "content_drift": self.content_drift,
            "inputs": self.inputs,
            "partitions": None if self.partition_diff is None else {
                "summary": self.partition_summary,
                "tables": [t.to_dict() for t in self.partition_tables],
                "diff": [d.to_dict() for d in self.partition_diff],
            },
            "trees": [t.to_dict() for t in self.trees],
            "findings": {side: (a.to_dict() if a else None)
                         for side, a in zip(("left", "right"), self.audits)},
            "banners": {
                "left": [b.to_dict() for b in self.banners[0]],
                "right": [b.to_dict() for b in self.banners[1]],
                "delta": self.banner_delta.to_dict() if self.banner_delta else None,
            },
            "notes": list(self.notes),
        })
        return out


def exit_code(report: ComparisonReport) -> int:
    critical = any(f.severity == "critical" for f in report.findings)
    return 1 if critical or report.content_drift else 0


# Pipeline pieces ------------------------------------------------------------

def audit_tree(tree, policy: RulePolicy, label: str | None = None) -> CredentialAudit | None:
    """Audit etc/passwd, etc/shadow and the sshd config under a tree; None when
    the tree holds neither credential file."""
    passwd_text = tree.read_file("etc/passwd")
    shadow_text = tree.read_file("etc/shadow")
    if passwd_text is None and shadow_text is None:
        return None
    audit = CredentialAudit(label or tree.label, star_reading=STAR_READINGS[policy.star_is_wildcard])
    passwd = parse_passwd(passwd_text.decode("utf-8", "surrogateescape")) if passwd_text is not None else None
    shadow = parse_shadow(shadow_text.decode("utf-8", "surrogateescape")) if shadow_text is not None else None
    for cf in (passwd, shadow):
        if cf is not None:
            audit.files.append(cf.path)
            audit.parse_errors += [f"{cf.path}:{no}: {msg}" for no, msg in cf.errors]
    audit.findings = audit_credentials(passwd.entries if passwd else [],
                                       shadow.entries if shadow else [], policy)
    for path in SSHD_PATHS:
        text = tree.read_file(path)
        if text is None:
            continue
        decoded = text.decode("utf-8", "surrogateescape")
        audit.files.append(path)
        audit.sshd = {k: v for k, (v, _n, _e) in parse_sshd_config(decoded).items()}
        audit.findings = sorted(audit.findings + audit_sshd_config(decoded, policy, path),
                                key=lambda f: f.sort_key)
        break
    return audit


def diff_trees(left, right, jobs: int = 1, label: str = "tree") -> TreeSection:
    a = left.snapshot(jobs)
    b = right.snapshot(jobs)
    entries = compare_trees(a, b)
    return TreeSection(label, summarize(entries),
                       [e for e in entries if e.status != "identical"],
                       compare_special_bits(a, b))


def banners_in_blob(blob_windows, min_len: int) -> list[BuildBanner]:
    return find_build_banners(iter_strings(blob_windows, min_len))


def tree_report(left_spec: str, right_spec: str, jobs: int = 1) -> ComparisonReport:
    left, right = open_tree(left_spec), open_tree(right_spec)
    section = diff_trees(left, right, jobs, f"{left.label} vs {right.label}")
    inputs = [{"source_path": t.label, "kind": t.kind} for t in (left, right)]
    report = ComparisonReport(inputs=inputs, trees=[section])
    report.content_drift = section.has_content_drift
    report.digests_equal = section.summary["total"] == section.summary["identical"]
    return report


def _side_analysis(source: ByteSource, table: PartitionTable, policy: RulePolicy,
                   min_len: int, label: str):
    """Credential audit of the root filesystem and build banners from kernels."""
    audit = None
    banners: list[BuildBanner] = []
    ext2 = [e for e in table.entries if e.fs_kind == "ext2"]
    ext2.sort(key=lambda e: (e.fs_label != "ROOT-A", e.index))
    for entry in ext2:
        try:
            fs = Ext2Filesystem(partition_source(source, entry))
        except ExtError:
            continue
        tree = Ext2Tree(fs, f"{label}:part{entry.index}")
        if audit is None:
            audit = audit_tree(tree, policy)
        for rec in fs.walk_tree():
            if rec.kind == "file" and KERNEL_NAME.search(rec.rel_path):
                node = fs.resolve_path(rec.rel_path)
                banners += banners_in_blob(fs.iter_content(node), min_len)
    for entry in table.entries:
        if entry.fs_kind == "vfat" and entry.size_bytes <= MAX_RAW_SCAN:
            banners += banners_in_blob(partition_source(source, entry).chunks(), min_len)
    return audit, banners


def compare_images(path_a: str, path_b: str, policy: RulePolicy | None = None,
                   min_len: int = 4, jobs: int = 1) -> ComparisonReport:
    policy = policy or RulePolicy()
    pool_size = 2 if jobs > 1 else 1
    with ThreadPoolExecutor(max_workers=pool_size) as pool:
        opened = list(pool.map(lambda p: open_image(p[0], label=p[1]),
                               [(path_a, "left"), (path_b, "right")]))
    (desc_a, src_a), (desc_b, src_b) = opened
    try:
        tables = [parse_gpt(src_a), parse_gpt(src_b)]
        digests = [hash_partitions(src_a, tables[0], jobs), hash_partitions(src_b, tables[1], jobs)]
        pdiff = diff_partition_tables(tables[0], digests[0], tables[1], digests[1])
        report = ComparisonReport(
            inputs=[desc_a.to_dict(), desc_b.to_dict()],
            partition_tables=tables, partition_diff=pdiff,
            partition_summary=summarize_partition_diff(tables[0], tables[1], pdiff),
            digests_equal=desc_a.digest == desc_b.digest,
        )
        drift = False
        for rec in pdiff:
            if rec.status in ("only_left", "only_right"):
                drift = True
            elif rec.status == "content_differs":
                if rec.left.fs_kind == rec.right.fs_kind == "ext2":
                    try:
                        section = diff_trees(
                            Ext2Tree(Ext2Filesystem(partition_source(src_a, rec.left)), ""),
                            Ext2Tree(Ext2Filesystem(partition_source(src_b, rec.right)), ""),
                            jobs, f"partition {rec.index} ({rec.left.fs_label or rec.left.name})")
                    except ExtError as exc:
                        report.notes.append(f"partition {rec.index}: {exc}")
                        drift = True
                        continue
                    report.trees.append(section)
                    drift = drift or section.has_content_drift
                else:
                    drift = True
        report.content_drift = drift
        if not report.digests_equal and not any(r.status != "identical" for r in pdiff):
            report.notes.append("image digests differ outside partition contents (GPT headers or gaps)")

        sides = [_side_analysis(src, t, policy, min_len, d.source_path)
                 for src, t, d in ((src_a, tables[0], desc_a), (src_b, tables[1], desc_b))]
        report.audits = [sides[0][0], sides[1][0]]
        report.banners = [sides[0][1], sides[1][1]]
        left_b = [b for b in report.banners[0] if b.timestamp]
        right_b = [b for b in report.banners[1] if b.timestamp]
        if left_b and right_b:
            report.banner_delta = banner_delta(left_b[0], right_b[0])
        return report
    finally:
        src_a.close()
        src_b.close()


def stamp(report: ComparisonReport) -> ComparisonReport:
    report.generated_at = dt.datetime.now(dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return report


# Rendering ------------------------------------------------------------------

def _fmt_size(n: int) -> str:
    for unit in ("B", "K", "M", "G", "T"):
        if n < 1024 or unit == "T":
            text = f"{n:.1f}".rstrip("0").rstrip(".") if unit != "B" else str(n)
            return text + unit
        n /= 1024


def render_finding(f: Finding) -> list[str]:
    cwe = ",".join(f"CWE-{c}" for c in f.cwe_ids) or "-"
    lines = [f"[{f.severity.upper()}] {f.rule_id} {cwe} {f.subject}",
             f"    evidence: {f.evidence}"]
    lines += [f"    context:  line {n}: {t}" for n, t in f.context]
    lines.append(f"    fix: {f.recommendation}")
    return lines


def render_banner(b: BuildBanner) -> str:
    return b.raw + (f"    [warning: {b.warning}]" if b.warning else "")


def partition_rows(table: PartitionTable, digests: list[str] | None = None) -> list[str]:
    head = f"{'NAME':<6} {'START':>10} {'END':>10} {'SIZE':>6} {'FSTYPE':<7} {'FSVER':<6} {'LABEL':<14} UUID"
    rows = [head]
    for i, e in enumerate(table.entries):
        rows.append(f"{'p' + str(e.index):<6} {e.start_lba:>10} {e.end_lba:>10} "
                    f"{_fmt_size(e.size_bytes):>6} {e.fs_kind:<7} {e.fs_version or '':<6} "
                    f"{e.fs_label or e.name or '':<14} {e.fs_uuid or ''}"
                    + (f"  {digests[i]}" if digests else ""))
    return rows


def render_text(report: ComparisonReport, include_timestamp: bool = True) -> str:
    out = [f"imgaudit {report.tool_version} comparison report"]
    if include_timestamp and report.generated_at:
        out.append(f"generated {report.generated_at}")
    out.append("")
    for inp in report.inputs:
        if "digest" in inp:
            out.append(f"{inp['digest']}  {inp['source_path']}")
            out.append(f"    {inp['compression']}, {inp['decompressed_byte_size']} bytes")
        else:
            out.append(f"{inp['kind']}: {inp['source_path']}")

    if report.partition_diff is not None:
        s = report.partition_summary
        out += ["", f"Partitions: {s['left_count']} vs {s['right_count']}"
                + ("  (count mismatch)" if s["count_mismatch"] else "")]
        for side, table in zip(("left", "right"), report.partition_tables):
            out.append(f"  {side}:")
            out += ["    " + r for r in partition_rows(table)]
        out.append("  per-partition digests:")
        for d in report.partition_diff:
            extra = f" [{', '.join(d.mismatches)}]" if d.mismatches else ""
            out.append(f"    p{d.index:<3} {d.status:<16} {d.left_digest or '-'}  "
                       f"{d.right_digest or '-'}{extra}")

    for t in report.trees:
        s = t.summary
        out += ["", f"Tree diff {t.label}: {s['total']} paths, {s['identical']} identical, "
                f"{s['content_differs']} content_differs, {s['metadata_differs']} metadata_differs, "
                f"{s['only_left']} only_left, {s['only_right']} only_right"]
        for e in t.entries:
            out.append(f"  {e.status:<16} {e.rel_path}" + (f"  ({e.detail})" if e.detail else ""))
        if t.special_bits:
            out.append("  special permission bits differ:")
            for d in t.special_bits:
                out.append(f"    {d.rel_path}: {d.to_dict()['left']} vs {d.to_dict()['right']}")
        else:
            out.append("  special permission bits: same on both sides")

    if report.banners[0] or report.banners[1]:
        out += ["", "Build banners:"]
        for side, banners in zip(("left", "right"), report.banners):
            for b in banners:
                out.append(f"  {side}: {render_banner(b)}")
        if report.banner_delta:
            d = report.banner_delta
            same = ", ".join(f"{k} {'equal' if v else 'DIFFERS'}" for k, v in d.equal.items())
            out.append(f"  build time delta: {format_duration(d.seconds)}; {same}")

    for side, audit in zip(("left", "right"), report.audits):
        if audit is None:
            continue
        out += ["", f"Credential audit ({side}: {audit.source}): {len(audit.findings)} findings",
                f"  star policy: {audit.star_reading}"]
        for err in audit.parse_errors:
            out.append(f"  parse error: {err}")
        for f in audit.findings:
            out += ["  " + line for line in render_finding(f)]

    for note in report.notes:
        out.append(f"note: {note}")
    out += ["", f"Verdict: {report.verdict}"]
    return "\n".join(out) + "\n"


def render_report(report: ComparisonReport, fmt: str = "json",
                  include_timestamp: bool = True) -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(include_timestamp), indent=2, ensure_ascii=False) + "\n"
    if fmt == "text":
        return render_text(report, include_timestamp)
    raise ValueError(f"unknown format {fmt!r}")
