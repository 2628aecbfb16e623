import os
import struct
import subprocess
import zlib
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

import helpers
from imgaudit.errors import GptError
from imgaudit.image_io import BytesSource, FileSource, hash_bytes
from imgaudit.partitions import (PartitionEntry, PartitionTable, diff_partition_tables,
                                 hash_partition, hash_partitions, parse_gpt,
                                 probe_filesystem, summarize_partition_diff)

CHROMEOS_LABELS = {"STATE", "ROOT-A", "OEM", "EFI-SYSTEM"}


def blkid(path):
    out = subprocess.run(["blkid", "-p", "-o", "export", str(path)],
                         capture_output=True, text=True)
    return dict(line.split("=", 1) for line in out.stdout.splitlines() if "=" in line)


def table_of(path):
    with FileSource.open(path) as src:
        return parse_gpt(src)


def test_matches_partitioning_tool_listing(chromeos_disk):
    path, listing, _ = chromeos_disk
    table = table_of(path)
    assert len(table.entries) == 12
    assert table.header_crc_ok
    for entry, ref in zip(table.entries, listing):
        assert entry.start_lba == ref.first_lba
        assert entry.end_lba == ref.last_lba
        assert entry.name == ref.partition_name
        assert entry.type_guid == ref.type_guid.lower()
        assert entry.unique_guid == ref.partition_guid.lower()
        assert entry.size_bytes == (entry.end_lba - entry.start_lba + 1) * 512
    assert [e.index for e in table.entries] == list(range(1, 13))
    assert CHROMEOS_LABELS <= {e.fs_label for e in table.entries}


def test_single_partition_fixture(tmp_path):
    from gpt_image.disk import Disk
    from gpt_image.partition import Partition

    p = tmp_path / "one.img"
    d = Disk(str(p))
    d.create(2 << 20)
    d.table.partitions.add(Partition("ROOT-A", 1 << 20, helpers.LINUX_FS))
    d.commit()
    ref = Disk.open(str(p)).table.partitions.entries
    table = table_of(p)
    assert len(table.entries) == len(ref) == 1
    e = table.entries[0]
    assert (e.start_lba, e.end_lba, e.name) == (ref[0].first_lba, ref[0].last_lba, "ROOT-A")
    assert e.fs_kind == "empty"


def test_probe_matches_blkid(chromeos_disk):
    path, listing, work = chromeos_disk
    table = table_of(path)
    by_name = {e.name: e for e in table.entries}
    for name, fs in (("STATE", "ext4"), ("ROOT-A", "ext2"), ("OEM", "ext4"), ("EFI-SYSTEM", "vfat")):
        ref = blkid(work / f"{name}.fs")
        e = by_name[name]
        assert e.fs_kind == ref["TYPE"] == fs
        assert e.fs_uuid.lower() == ref["UUID"].lower()
        # blkid's LABEL for FAT comes from the root directory entry; the boot
        # sector label is reported separately as LABEL_FATBOOT
        assert e.fs_label == ref.get("LABEL_FATBOOT", ref["LABEL"]) == name
        if fs == "vfat":
            assert e.fs_version == ref["VERSION"] == "FAT16"
    assert by_name["ROOT-B"].fs_kind == "empty"
    assert by_name["KERN-A"].fs_kind == "unknown"


def test_probe_never_raises_on_random_data():
    import random
    rng = random.Random(7)
    for _ in range(200):
        blob = rng.randbytes(rng.choice([0, 1, 100, 512, 1500, 4096]))
        assert probe_filesystem(BytesSource(blob)).kind in ("ext4", "ext2", "vfat", "empty", "unknown")


@given(st.binary(max_size=3000))
def test_probe_total(blob):
    assert probe_filesystem(BytesSource(blob)).kind in ("ext2", "ext4", "vfat", "empty", "unknown")


def test_probe_all_zero_2mib():
    assert probe_filesystem(BytesSource(bytes(2 << 20))).kind == "empty"


def test_partition_digests_match_dd_pipeline(chromeos_disk):
    path, _, _ = chromeos_disk
    table = table_of(path)
    with FileSource.open(path) as src:
        digests = hash_partitions(src, table)
        assert hash_partitions(src, table, jobs=4) == digests
    for e, d in zip(table.entries, digests):
        assert d == helpers.range_sha256(path, e.offset, e.size_bytes)


def test_whole_image_partition_equals_image_digest():
    data = os.urandom(8192)
    src = BytesSource(data)
    e = PartitionEntry(1, 0, 15, 8192, "t", "u", "all")
    assert hash_partition(src, e) == hash_bytes(data)


def test_one_byte_flip_changes_one_digest(disk_copy):
    path, _ = disk_copy
    before = table_of(path)
    with FileSource.open(path) as src:
        old = hash_partitions(src, before)
    target = before.entry(3)
    with open(path, "r+b") as f:
        f.seek(target.offset + target.size_bytes - 100)
        b = f.read(1)
        f.seek(-1, 1)
        f.write(bytes([b[0] ^ 1]))
    after = table_of(path)
    with FileSource.open(path) as src:
        new = hash_partitions(src, after)
    changed = [e.index for e, x, y in zip(after.entries, old, new) if x != y]
    assert changed == [3]
    recs = diff_partition_tables(before, old, after, new)
    assert [r.status for r in recs].count("content_differs") == 1
    assert recs[2].status == "content_differs"


def test_diff_self_and_counts(chromeos_disk):
    path, _, _ = chromeos_disk
    t = table_of(path)
    digests = [f"{i:064x}" for i in range(12)]
    recs = diff_partition_tables(t, digests, t, digests)
    assert all(r.status == "identical" for r in recs) and len(recs) == 12

    others = [f"{i + 100:064x}" for i in range(12)]
    recs = diff_partition_tables(t, digests, t, others)
    assert [r.status for r in recs] == ["content_differs"] * 12

    short = replace(t, entries=t.entries[:11])
    recs = diff_partition_tables(t, digests, short, digests[:11])
    assert [r.status for r in recs].count("only_left") == 1 and recs[-1].index == 12
    summary = summarize_partition_diff(t, short, recs)
    assert summary["count_mismatch"] and summary["only_left"] == 1

    renamed = replace(t, entries=(replace(t.entries[0], fs_label="OTHER"),) + t.entries[1:])
    recs = diff_partition_tables(t, digests, renamed, digests)
    assert recs[0].status == "metadata_differs" and recs[0].mismatches == ("fs_label",)


# Error paths -------------------------------------------------------------

def rewrite_header(path, **fields):
    """Patch primary header fields and recompute its CRC."""
    offsets = {"entries_lba": (72, "<Q"), "count": (80, "<I"), "entries_crc": (88, "<I")}
    with open(path, "r+b") as f:
        f.seek(512)
        hdr = bytearray(f.read(92))
        for name, value in fields.items():
            off, fmt = offsets[name]
            struct.pack_into(fmt, hdr, off, value)
        hdr[16:20] = b"\0\0\0\0"
        struct.pack_into("<I", hdr, 16, zlib.crc32(hdr))
        f.seek(512)
        f.write(hdr)


@pytest.mark.parametrize("blob", [b"", b"\0" * 100, os.urandom(1 << 16)])
def test_garbage_has_no_gpt(blob):
    with pytest.raises(GptError, match="no GPT found"):
        parse_gpt(BytesSource(blob))


def test_mbr_only_distinguished():
    mbr = bytearray(4096)
    mbr[446 + 4] = 0x83
    mbr[510:512] = b"\x55\xaa"
    with pytest.raises(GptError, match="no GPT found: image carries an MBR"):
        parse_gpt(BytesSource(bytes(mbr)))


def test_4k_sector_rejected():
    blob = bytearray(16384)
    blob[4096:4104] = b"EFI PART"
    with pytest.raises(GptError, match="4096-byte sectors"):
        parse_gpt(BytesSource(bytes(blob)))


def test_primary_crc_failure_uses_backup(disk_copy):
    path, listing = disk_copy
    with open(path, "r+b") as f:
        f.seek(512 + 16)
        f.write(b"\xde\xad\xbe\xef")
    table = table_of(path)
    assert not table.header_crc_ok
    assert any("backup header used" in n for n in table.notes)
    assert [e.start_lba for e in table.entries] == [r.first_lba for r in listing]


def test_both_headers_bad(disk_copy):
    path, _ = disk_copy
    size = os.path.getsize(path)
    with open(path, "r+b") as f:
        for off in (512 + 16, size - 512 + 16):
            f.seek(off)
            f.write(b"\xde\xad\xbe\xef")
    with pytest.raises(GptError, match="header CRC mismatch"):
        table_of(path)


def test_entry_array_crc_mismatch(disk_copy):
    path, _ = disk_copy
    with open(path, "r+b") as f:
        f.seek(1024 + 56)  # inside the first entry's name
        f.write(b"Z")
    with pytest.raises(GptError, match="partition entry array CRC mismatch"):
        table_of(path)


def test_entry_array_out_of_bounds(disk_copy):
    path, _ = disk_copy
    rewrite_header(path, entries_lba=os.path.getsize(path) // 512 - 4)
    with pytest.raises(GptError, match="out of bounds"):
        table_of(path)


def test_overlap_detected(disk_copy):
    path, _ = disk_copy
    with open(path, "r+b") as f:
        f.seek(1024 + 128 + 32)  # start LBA of entry 2
        f.write(struct.pack("<Q", 100))
        f.seek(1024)
        array = f.read(128 * 128)
    rewrite_header(path, entries_crc=zlib.crc32(array))
    with pytest.raises(GptError, match="overlap"):
        table_of(path)


def test_hybrid_mbr_reported(disk_copy):
    path, _ = disk_copy
    with open(path, "r+b") as f:
        f.seek(446 + 16 + 4)
        f.write(b"\x0c")
    table = table_of(path)
    assert table.mbr == "hybrid"
    assert any("hybrid MBR" in n for n in table.notes)


def test_to_dict_is_plain(chromeos_disk):
    import json
    t = table_of(chromeos_disk[0])
    assert isinstance(t, PartitionTable)
    assert json.loads(json.dumps(t.to_dict()))["entries"][0]["index"] == 1
