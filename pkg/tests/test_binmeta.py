import datetime as dt
import os
import random
import re
import subprocess

import pytest
from hypothesis import given, settings, strategies as st

import helpers
from imgaudit.binmeta import (BannerError, banner_delta, diff_bytes, extract_strings,
                              find_build_banners, format_duration, hex_of_byte, hexdump,
                              iter_hexdump, parse_banner, strings_from_file)

_OD_LINE = re.compile(r"^([0-9a-f]+)((?: [0-9a-f]{2})+) +>(.*)<$")


def od_hexdump(blob: bytes) -> str:
    """Canonical -C rendering rebuilt from GNU od's segmentation, squeeze and gutter.

    util-linux hexdump is not installed here; od supplies the independent
    byte values, line breaks, '*' squeezing and printable gutter, and this
    function only re-lays them out in the -C column format.
    """
    out = subprocess.run(["od", "-A", "x", "-t", "x1z"], input=blob, capture_output=True,
                         check=True, env={"LC_ALL": "C"}).stdout.decode("ascii")
    lines = out.splitlines()
    if lines == ["000000"]:
        return ""  # -C prints nothing at all for empty input
    rendered = []
    for line in lines:
        if line == "*":
            rendered.append("*")
            continue
        m = _OD_LINE.match(line)
        if not m:
            rendered.append(f"{int(line, 16):08x}")
            continue
        bytes_hex = m.group(2).split()
        cells = [b + " " for b in bytes_hex] + ["   "] * (16 - len(bytes_hex))
        rendered.append(f"{int(m.group(1), 16):08x}  " + "".join(cells[:8]) + " "
                        + "".join(cells[8:]) + " |" + m.group(3) + "|")
    return "\n".join(rendered) + "\n"


def gnu_strings(blob: bytes, n: int):
    out = subprocess.run(["strings", "-a", "-n", str(n), "-t", "d"], input=blob,
                         capture_output=True, check=True).stdout.decode("ascii")
    hits = []
    for line in out.split("\n"):
        if line:
            off, text = line.lstrip(" ").split(" ", 1)
            hits.append((int(off), text))
    return hits


def hexdump_corpus():
    rng = random.Random(606)
    corpus = [b"", b"hello", bytes(64), bytes(16), bytes(17), b"A" * 48 + b"B" * 16 + b"A" * 33]
    while len(corpus) < 100:
        kind = rng.randrange(4)
        n = rng.randrange(0, 600)
        if kind == 0:
            corpus.append(rng.randbytes(n))
        elif kind == 1:
            corpus.append(bytes([rng.randrange(256)]) * n)
        elif kind == 2:
            line = rng.randbytes(16)
            corpus.append(rng.randbytes(rng.randrange(0, 40)) + line * rng.randrange(2, 8)
                          + rng.randbytes(rng.randrange(0, 40)))
        else:
            corpus.append(bytes(rng.choice(b"abc \x00\x7f\xff\n") for _ in range(n)))
    return corpus


def test_hexdump_examples():
    assert hexdump(b"") == ""
    assert hexdump(b"hello") == (
        "00000000  68 65 6c 6c 6f" + " " * 36 + "|hello|\n00000005\n")
    assert hexdump(bytes(64)) == (
        "00000000  00 00 00 00 00 00 00 00  00 00 00 00 00 00 00 00  |................|\n"
        "*\n00000040\n")


def test_hexdump_matches_od_corpus():
    for blob in hexdump_corpus():
        assert hexdump(blob) == od_hexdump(blob), blob[:32]


def test_hexdump_streaming_independent_of_chunking():
    blob = random.Random(4).randbytes(1000) + bytes(200)
    whole = hexdump(blob)
    pieces = [blob[i:i + 7] for i in range(0, len(blob), 7)]
    assert "".join(iter_hexdump(pieces)) == whole


def test_hex_of_byte():
    assert [hex_of_byte(b) for b in (0, 255, 17, 155)] == ["00", "ff", "11", "9b"]
    with pytest.raises(ValueError):
        hex_of_byte(256)


def test_strings_examples():
    assert [(h.offset, h.text) for h in extract_strings(b"hello world")] == [(0, "hello world")]
    assert [(h.offset, h.text) for h in extract_strings(b"ab\0cdef", 4)] == [(3, "cdef")]
    assert gnu_strings(b"ab\0cdef", 4) == [(3, "cdef")]
    with pytest.raises(ValueError):
        extract_strings(b"x", 0)


def test_strings_against_gnu_strings():
    rng = random.Random(77)
    for i in range(40):
        blob = bytes(rng.choice([rng.randrange(256), rng.randrange(0x20, 0x7f), 9])
                     for _ in range(rng.randrange(0, 3000)))
        n = rng.choice([1, 3, 4, 8])
        # GNU strings counts tab as printable
        got = [(h.offset, h.text) for h in extract_strings(blob, n, include_tab=True, window=97)]
        assert got == gnu_strings(blob, n)
        no_tab = blob.replace(b"\t", b"\0")
        got = [(h.offset, h.text) for h in extract_strings(no_tab, n)]
        assert got == gnu_strings(no_tab, n)


@settings(max_examples=80, deadline=None)
@given(st.binary(max_size=400), st.integers(1, 50), st.integers(1, 6))
def test_window_size_never_splits_hits(blob, window, min_len):
    ref = extract_strings(blob, min_len, window=1 << 20)
    assert extract_strings(blob, min_len, window=window) == ref
    for h in ref:
        assert all(0x20 <= ord(c) <= 0x7e for c in h.text) and h.length >= min_len
        assert blob[h.offset:h.offset + h.length] == h.text.encode()


def test_builty_banners_parse():
    b = parse_banner(helpers.BANNER_GLOBAL)
    assert b.version == "5.15.108-18907-gba143be42d3a-dirty"
    assert b.git_hash == "ba143be42d3a" and b.dirty
    assert (b.builder_user, b.build_host, b.build_number) == ("builty", "fydebeast", 2)
    assert b.timestamp == dt.datetime(2023, 11, 15, 7, 25, 36, tzinfo=dt.timezone.utc)
    assert b.flags == "SMP PREEMPT"
    f = parse_banner(helpers.BANNER_FLEX)
    assert (f.builder_user, f.build_host, f.dirty) == ("cros-kernel", "chromium.org", False)
    assert f.git_hash == "921d2194f426"
    assert f.timestamp == dt.datetime(2024, 2, 7, 21, 32, 19, tzinfo=dt.timezone.utc)
    for banner in (b, f):
        for value in (banner.version, banner.builder_user, banner.build_host, banner.timestamp_text):
            assert value in banner.raw


def test_banner_with_toolchain_groups():
    text = ("Linux version 6.1.0-13-amd64 (debian-kernel@lists.debian.org) (gcc-12 (Debian 12.2.0-14) "
            "12.2.0, GNU ld (GNU Binutils for Debian) 2.40) #1 SMP PREEMPT_DYNAMIC Debian 6.1.55-1 "
            "(2023-09-29) Fri, 29 Sep 2023 13:11:16 +0000")
    b = parse_banner(text)
    assert b.version == "6.1.0-13-amd64" and b.build_number == 1 and b.git_hash is None
    assert b.timestamp == dt.datetime(2023, 9, 29, 13, 11, 16, tzinfo=dt.timezone.utc)


def test_unparseable_timestamp_kept_with_warning():
    b = parse_banner("5.1 (u@h) #3 SMP Tue Mar 5 10:00:00 CET 2019")
    assert b is not None and b.timestamp is None and "CET" in b.warning
    b = parse_banner("5.1 (u@h) #3 SMP")
    assert b.timestamp is None and b.warning
    with pytest.raises(BannerError):
        banner_delta(b, b)


def test_no_banners():
    assert find_build_banners(extract_strings(b"nothing to see here\0just text")) == []


def test_delta_722_and_self():
    a, c = parse_banner(helpers.BANNER_GLOBAL), parse_banner(helpers.BANNER_CHINA)
    d = banner_delta(a, c)
    assert d.seconds == 722 and all(d.equal.values())
    assert banner_delta(c, a).seconds == -722
    assert format_duration(722) == "+722 seconds (12 minutes 2 seconds)"
    s = banner_delta(a, a)
    assert s.seconds == 0 and all(s.equal.values())
    v = parse_banner(helpers.BANNER_GLOBAL.replace("5.15.108", "5.15.109"))
    d = banner_delta(a, v)
    assert d.seconds == 0 and not d.equal["version"] and d.equal["host"]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 4000), st.integers(1, 64))
def test_planted_banner_found_at_any_alignment(offset, window):
    rng = random.Random(offset)
    blob = bytearray(rng.randbytes(4200))
    payload = b"\0Linux version " + helpers.BANNER_CHINA.encode() + b"\n\0"
    blob[offset:offset + len(payload)] = payload
    banners = find_build_banners(extract_strings(bytes(blob), 4, window=window))
    assert [b.raw for b in banners] == [helpers.BANNER_CHINA]


def brute_force_regions(a, b):
    regions = []
    n = min(len(a), len(b))
    i = 0
    while i < n:
        if a[i] != b[i]:
            j = i
            while j < n and a[j] != b[j]:
                j += 1
            regions.append((i, j - i))
            i = j
        else:
            i += 1
    if len(a) != len(b):
        tail = max(len(a), len(b)) - n
        if regions and sum(regions[-1]) == n:
            regions[-1] = (regions[-1][0], regions[-1][1] + tail)
        else:
            regions.append((n, tail))
    return regions


def test_diff_examples():
    blob = os.urandom(5000)
    regions, summary = diff_bytes(blob, blob)
    assert regions == [] and summary.size_equal and summary.differing_bytes == 0
    other = bytearray(blob)
    other[100] ^= 0xFF
    regions, summary = diff_bytes(blob, bytes(other))
    assert [(r.offset, r.length) for r in regions] == [(100, 1)]
    assert regions[0].left_excerpt == blob[100:101]


def test_diff_kernel_sized_planted():
    a, _ = helpers.kernel_blob(helpers.BANNER_GLOBAL, 1)
    b = bytearray(a)
    rng = random.Random(9)
    planted = sorted(rng.sample(range(0, len(a) - 50, 50), 40))
    for off in planted:
        b[off] ^= 0x5A
    regions, summary = diff_bytes(a, bytes(b))
    assert [(r.offset, r.length) for r in regions] == [(o, 1) for o in planted]
    assert summary.size_equal and summary.left_size == summary.right_size == 9_038_400


@settings(max_examples=150, deadline=None)
@given(st.binary(max_size=300), st.binary(max_size=300))
def test_diff_matches_brute_force(a, b):
    regions, summary = diff_bytes(a, b)
    got = [(r.offset, r.length) for r in regions]
    assert got == brute_force_regions(a, b)
    assert summary.differing_bytes == sum(length for _, length in got)
    assert summary.region_count == len(got)
    assert summary.size_equal == (len(a) == len(b))


@settings(max_examples=100, deadline=None)
@given(st.binary(min_size=1, max_size=9000))
def test_diff_against_mutation(a):
    rng = random.Random(len(a))
    b = bytearray(a)
    for _ in range(rng.randrange(1, 10)):
        b[rng.randrange(len(b))] = rng.randrange(256)
    regions, _ = diff_bytes(a, bytes(b))
    assert [(r.offset, r.length) for r in regions] == brute_force_regions(a, bytes(b))
    for r in regions:
        assert r.offset == 0 or a[r.offset - 1] == b[r.offset - 1]
        end = r.offset + r.length
        assert end >= len(a) or a[end] == b[end]


def test_strings_from_file(tmp_path):
    p = tmp_path / "k"
    blob, off = helpers.kernel_blob(helpers.BANNER_GLOBAL, 3, 100_000)
    p.write_bytes(blob)
    with open(p, "rb") as f:
        hits = strings_from_file(f, window=4096)
    assert any(h.text == "Linux version " + helpers.BANNER_GLOBAL and h.offset == off for h in hits)
