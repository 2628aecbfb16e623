"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .binmeta import (banner_delta, diff_bytes, find_build_banners, format_duration,
                      iter_hexdump, iter_strings)
from .errors import ImgAuditError
from .image_io import open_image
from .partitions import hash_partitions, parse_gpt
from .report import (ComparisonReport, audit_tree, compare_images, exit_code,
                     open_tree, partition_rows, render_banner, render_finding,
                     render_report, stamp, tree_report)
from .treediff import dump_snapshot
from .vulnrules import RulePolicy

EXIT_OK, EXIT_FINDINGS, EXIT_USAGE, EXIT_PARSE = 0, 1, 2, 3


def _global_options(defaults: bool) -> argparse.ArgumentParser:
    # Defined on the main parser and every subparser so flags may come before
    # or after the subcommand; subparsers use SUPPRESS to avoid clobbering.
    def d(value):
        return value if defaults else argparse.SUPPRESS

    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--format", choices=("json", "text"), default=d("text"),
                   help="output format (default: text)")
    p.add_argument("--policy", metavar="FILE", default=d(None),
                   help="rule policy file (key=value lines)")
    p.add_argument("--min-str-len", type=int, metavar="N", default=d(4),
                   help="shortest printable run kept by strings extraction (default: 4)")
    p.add_argument("--no-timestamp", action="store_true", default=d(False),
                   help="omit generated_at so repeated runs are byte-identical")
    p.add_argument("--jobs", type=int, metavar="N", default=d(1),
                   help="hashing worker threads; never changes the output (default: 1)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imgaudit", parents=[_global_options(True)],
        description="Compare disk images, partitions, file trees and kernel blobs offline.")
    parser.add_argument("--version", action="version", version=f"imgaudit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = [_global_options(False)]

    def add(name, help_text):
        return sub.add_parser(name, parents=common, help=help_text)

    add("hash", "digest of the decompressed image").add_argument("image")
    add("partitions", "list GPT partitions with filesystem probes").add_argument("image")
    add("part-hash", "digest of every partition").add_argument("image")
    add("tree-snapshot", "snapshot a directory or image:partN").add_argument("tree")
    p = add("tree-diff", "compare two trees (directory, image:partN or snapshot file)")
    p.add_argument("left")
    p.add_argument("right")
    add("audit-creds", "audit credential and sshd files under a root").add_argument("root")
    p = add("binmeta", "strings, build banners and optional diff of kernel blobs")
    p.add_argument("file")
    p.add_argument("other", nargs="?")
    p.add_argument("--hexdump", action="store_true", help="print a canonical hexdump of FILE")
    p = add("compare", "full comparison of two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    return parser


def _emit(out, args, payload, text: str):
    if args.format == "json":
        out.write(json.dumps(payload, indent=2, ensure_ascii=False) + "\n")
    else:
        out.write(text)


def cmd_hash(args, out) -> int:
    desc, source = open_image(args.image)
    source.close()
    _emit(out, args, desc.to_dict(), f"{desc.digest}  {desc.source_path}\n")
    return EXIT_OK


def cmd_partitions(args, out) -> int:
    _, source = open_image(args.image)
    with source:
        table = parse_gpt(source)
    text = "\n".join(partition_rows(table) + [f"note: {n}" for n in table.notes]) + "\n"
    _emit(out, args, table.to_dict(), text)
    return EXIT_OK


def cmd_part_hash(args, out) -> int:
    _, source = open_image(args.image)
    with source:
        table = parse_gpt(source)
        digests = hash_partitions(source, table, args.jobs)
    rows = [{"index": e.index, "name": e.name, "digest": d}
            for e, d in zip(table.entries, digests)]
    text = "".join(f"{r['digest']}  {args.image}:part{r['index']}\n" for r in rows)
    _emit(out, args, rows, text)
    return EXIT_OK


def cmd_tree_snapshot(args, out) -> int:
    records = open_tree(args.tree).snapshot(args.jobs)
    _emit(out, args, [r.to_dict() for r in records], dump_snapshot(records))
    return EXIT_OK


def _finish_report(report: ComparisonReport, args, out) -> int:
    if not args.no_timestamp:
        stamp(report)
    out.write(render_report(report, args.format, include_timestamp=not args.no_timestamp))
    return exit_code(report)


def cmd_tree_diff(args, out) -> int:
    return _finish_report(tree_report(args.left, args.right, args.jobs), args, out)


def cmd_audit_creds(args, out) -> int:
    tree = open_tree(args.root)
    audit = audit_tree(tree, args.policy_obj)
    if audit is None:
        raise ImgAuditError(f"no etc/passwd or etc/shadow under {args.root}")
    text = "\n".join(
        [f"Credential audit of {audit.source}: {len(audit.findings)} findings",
         f"star policy: {audit.star_reading}"]
        + [f"parse error: {e}" for e in audit.parse_errors]
        + [line for f in audit.findings for line in render_finding(f)]) + "\n"
    _emit(out, args, {"policy": args.policy_obj.to_text(), **audit.to_dict()}, text)
    return EXIT_FINDINGS if any(f.severity == "critical" for f in audit.findings) else EXIT_OK


def _blob_summary(path: str, args) -> tuple[dict, list]:
    desc, source = open_image(path)
    with source:
        hits = list(iter_strings(source.chunks(), args.min_str_len))
    banners = find_build_banners(hits)
    return {"path": path, "size": desc.decompressed_byte_size, "digest": desc.digest,
            "strings": len(hits), "banners": [b.to_dict() for b in banners]}, banners


def cmd_binmeta(args, out) -> int:
    if args.hexdump:
        _, source = open_image(args.file)
        with source:
            for line in iter_hexdump(source.chunks()):
                out.write(line)
        return EXIT_OK
    left, left_banners = _blob_summary(args.file, args)
    payload = {"files": [left]}
    lines = [f"{left['digest']}  {left['path']}", f"  {left['size']} bytes, {left['strings']} strings"]
    lines += [f"  banner: {render_banner(b)}" for b in left_banners]
    if args.other:
        right, right_banners = _blob_summary(args.other, args)
        payload["files"].append(right)
        lines += [f"{right['digest']}  {right['path']}",
                  f"  {right['size']} bytes, {right['strings']} strings"]
        lines += [f"  banner: {render_banner(b)}" for b in right_banners]
        _, a = open_image(args.file)
        _, b = open_image(args.other)
        with a, b:
            regions, summary = diff_bytes(a.read_at(0, a.size), b.read_at(0, b.size))
        payload["diff"] = {"summary": summary.to_dict(), "regions": [r.to_dict() for r in regions[:64]]}
        lines.append(f"size equal: {str(summary.size_equal).lower()}; "
                     f"{summary.differing_bytes} differing bytes in {summary.region_count} regions")
        la = [x for x in left_banners if x.timestamp]
        rb = [x for x in right_banners if x.timestamp]
        if la and rb:
            delta = banner_delta(la[0], rb[0])
            payload["delta"] = delta.to_dict()
            lines.append(f"build time delta: {format_duration(delta.seconds)}")
    _emit(out, args, payload, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_compare(args, out) -> int:
    report = compare_images(args.image_a, args.image_b, args.policy_obj,
                            args.min_str_len, args.jobs)
    return _finish_report(report, args, out)


COMMANDS = {
    "hash": cmd_hash, "partitions": cmd_partitions, "part-hash": cmd_part_hash,
    "tree-snapshot": cmd_tree_snapshot, "tree-diff": cmd_tree_diff,
    "audit-creds": cmd_audit_creds, "binmeta": cmd_binmeta, "compare": cmd_compare,
}


def run_cli(argv: list[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.jobs < 1 or args.min_str_len < 1:
        err.write("imgaudit: --jobs and --min-str-len must be at least 1\n")
        return EXIT_USAGE
    try:
        args.policy_obj = RulePolicy.load(args.policy) if args.policy else RulePolicy()
        return COMMANDS[args.command](args, out)
    except (ImgAuditError, OSError) as exc:
        err.write(f"imgaudit: {exc}\n")
        return EXIT_PARSE


def main() -> None:
    sys.exit(run_cli())
