"""GPT parsing, per-partition filesystem probing, hashing and table comparison."""

from __future__ import annotations

import struct
import uuid
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from .errors import GptError
from .image_io import ByteSource, hash_bytes

SECTOR_SIZE = 512
GPT_SIGNATURE = b"EFI PART"

# signature, revision, header_size, header_crc, reserved, my_lba, alternate_lba,
# first_usable, last_usable, disk_guid, entries_lba, num_entries, entry_size, entries_crc
GPT_HEADER = struct.Struct("<8sIIII QQQQ 16s QIII")
GPT_ENTRY = struct.Struct("<16s16sQQQ72s")
MBR_PART = struct.Struct("<B3sB3sII")

EXT_MAGIC = 0xEF53
# ext2 incompat set: compression, filetype, meta_bg; anything else reads as ext4
EXT2_INCOMPAT = 0x0001 | 0x0002 | 0x0010

FS_KINDS = ("ext2", "ext4", "vfat", "empty", "unknown")


@dataclass(frozen=True)
class PartitionEntry:
    index: int
    start_lba: int
    end_lba: int
    size_bytes: int
    type_guid: str
    unique_guid: str
    name: str
    attributes: int = 0
    fs_kind: str = "unknown"
    fs_label: str | None = None
    fs_uuid: str | None = None
    fs_version: str | None = None

    @property
    def offset(self) -> int:
        return self.start_lba * SECTOR_SIZE

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "start_lba": self.start_lba,
            "end_lba": self.end_lba,
            "size_bytes": self.size_bytes,
            "type_guid": self.type_guid,
            "unique_guid": self.unique_guid,
            "name": self.name,
            "attributes": self.attributes,
            "fs_kind": self.fs_kind,
            "fs_version": self.fs_version,
            "fs_label": self.fs_label,
            "fs_uuid": self.fs_uuid,
        }


@dataclass(frozen=True)
class PartitionTable:
    sector_size: int
    entries: tuple[PartitionEntry, ...]
    header_crc_ok: bool
    disk_guid: str = ""
    mbr: str = "protective"  # protective | hybrid | absent
    notes: tuple[str, ...] = ()

    def entry(self, index: int) -> PartitionEntry:
        for e in self.entries:
            if e.index == index:
                return e
        raise GptError(f"no partition {index}")

    def to_dict(self) -> dict:
        return {
            "sector_size": self.sector_size,
            "disk_guid": self.disk_guid,
            "header_crc_ok": self.header_crc_ok,
            "mbr": self.mbr,
            "notes": list(self.notes),
            "entries": [e.to_dict() for e in self.entries],
        }


@dataclass(frozen=True)
class FsProbe:
    kind: str
    label: str | None = None
    uuid: str | None = None
    version: str | None = None


def _guid(raw: bytes) -> str:
    return str(uuid.UUID(bytes_le=raw))


def _mbr_kind(sector0: bytes) -> str:
    if len(sector0) < 512 or sector0[510:512] != b"\x55\xaa":
        return "absent"
    types = [MBR_PART.unpack_from(sector0, 446 + 16 * i)[2] for i in range(4)]
    used = [t for t in types if t]
    if not used:
        return "absent"
    if 0xEE in used:
        return "protective" if used == [0xEE] else "hybrid"
    return "mbr-only"


def _read_header(image: ByteSource, lba: int):
    raw = image.read_at(lba * SECTOR_SIZE, SECTOR_SIZE)
    if len(raw) < GPT_HEADER.size or raw[:8] != GPT_SIGNATURE:
        return None, False
    hdr = GPT_HEADER.unpack_from(raw)
    header_size = hdr[2]
    if not GPT_HEADER.size <= header_size <= SECTOR_SIZE:
        return hdr, False
    body = bytearray(raw[:header_size])
    body[16:20] = b"\0\0\0\0"
    return hdr, zlib.crc32(body) == hdr[3]


def _read_entries(image: ByteSource, hdr, which: str) -> list[PartitionEntry]:
    entries_lba, count, entry_size, entries_crc = hdr[10], hdr[11], hdr[12], hdr[13]
    if entry_size < GPT_ENTRY.size or entry_size % 8:
        raise GptError(f"{which} header declares invalid entry size {entry_size}")
    start = entries_lba * SECTOR_SIZE
    length = count * entry_size
    if start + length > image.size:
        raise GptError(
            f"partition entry array out of bounds: {count} x {entry_size} bytes at "
            f"LBA {entries_lba} exceeds {image.size}-byte image")
    array = image.read_at(start, length)
    if zlib.crc32(array) != entries_crc:
        raise GptError(f"{which} partition entry array CRC mismatch")

    entries = []
    for slot in range(count):
        raw = array[slot * entry_size:slot * entry_size + GPT_ENTRY.size]
        if not any(raw):
            continue
        type_guid, uniq, first, last, attrs, name = GPT_ENTRY.unpack(raw)
        if type_guid == b"\0" * 16:
            continue
        index = slot + 1
        if first > last:
            raise GptError(f"partition {index}: start LBA {first} > end LBA {last}")
        size = (last - first + 1) * SECTOR_SIZE
        if first * SECTOR_SIZE + size > image.size:
            raise GptError(f"partition {index} extends past the end of the image")
        entries.append(PartitionEntry(
            index=index,
            start_lba=first,
            end_lba=last,
            size_bytes=size,
            type_guid=_guid(type_guid),
            unique_guid=_guid(uniq),
            name=name.decode("utf-16-le", "replace").split("\0", 1)[0],
            attributes=attrs,
        ))
    ordered = sorted(entries, key=lambda e: e.start_lba)
    for a, b in zip(ordered, ordered[1:]):
        if b.start_lba <= a.end_lba:
            raise GptError(f"partitions {a.index} and {b.index} overlap")
    return entries


def parse_gpt(image: ByteSource, probe: bool = True) -> PartitionTable:
    """Parse the GPT at LBA 1.

    The backup header (last LBA) is consulted only when the primary header
    fails its CRC.  With ``probe`` each entry is annotated with its
    filesystem kind, label and UUID.
    """
    if image.size < 2 * SECTOR_SIZE:
        raise GptError("no GPT found: image is smaller than two sectors")
    mbr = _mbr_kind(image.read_at(0, SECTOR_SIZE))
    hdr, crc_ok = _read_header(image, 1)
    if hdr is None:
        if image.read_at(4096, 8) == GPT_SIGNATURE:
            raise GptError("GPT uses 4096-byte sectors; only 512-byte sectors are supported")
        if mbr == "mbr-only":
            raise GptError("no GPT found: image carries an MBR partition table only")
        if mbr in ("protective", "hybrid"):
            raise GptError("no GPT found: protective MBR present but GPT header missing")
        raise GptError("no GPT found")

    notes = []
    if not crc_ok:
        last_lba = image.size // SECTOR_SIZE - 1
        backup, backup_ok = _read_header(image, last_lba)
        if backup is None or not backup_ok:
            raise GptError("GPT header CRC mismatch (primary and backup headers both invalid)")
        notes.append("primary GPT header CRC mismatch; backup header used")
        hdr = backup
        entries = _read_entries(image, hdr, "backup")
    else:
        entries = _read_entries(image, hdr, "primary")

    if probe:
        entries = [annotate(image, e) for e in entries]
    if mbr == "hybrid":
        notes.append("hybrid MBR present; MBR entries not interpreted")
    return PartitionTable(
        sector_size=SECTOR_SIZE,
        entries=tuple(sorted(entries, key=lambda e: e.index)),
        header_crc_ok=crc_ok,
        disk_guid=_guid(hdr[9]),
        mbr="protective" if mbr == "mbr-only" else mbr,
        notes=tuple(notes),
    )


def annotate(image: ByteSource, entry: PartitionEntry) -> PartitionEntry:
    p = probe_filesystem(image, entry)
    return replace(entry, fs_kind=p.kind, fs_label=p.label, fs_uuid=p.uuid,
                   fs_version=p.version)


def partition_source(image: ByteSource, entry: PartitionEntry) -> ByteSource:
    return image.view(entry.offset, entry.size_bytes)


def _probe_ext(part: ByteSource) -> FsProbe | None:
    sb = part.read_at(1024, 1024)
    if len(sb) < 1024 or struct.unpack_from("<H", sb, 56)[0] != EXT_MAGIC:
        return None
    minor = struct.unpack_from("<H", sb, 62)[0]
    rev = struct.unpack_from("<I", sb, 76)[0]
    incompat = struct.unpack_from("<I", sb, 96)[0]
    label = sb[120:136].split(b"\0", 1)[0].decode("utf-8", "replace") or None
    kind = "ext4" if incompat & ~EXT2_INCOMPAT else "ext2"
    return FsProbe(kind, label, str(uuid.UUID(bytes=sb[104:120])), f"{rev}.{minor}")


def _probe_fat(part: ByteSource) -> FsProbe | None:
    bs = part.read_at(0, 512)
    if len(bs) < 512 or bs[510:512] != b"\x55\xaa" or bs[0] not in (0xEB, 0xE9):
        return None
    bps, spc, reserved, nfats, root_entries, total16 = struct.unpack_from("<HBHBHH", bs, 11)
    fatsz16, = struct.unpack_from("<H", bs, 22)
    total32, fatsz32 = struct.unpack_from("<II", bs, 32)
    if bps not in (512, 1024, 2048, 4096) or spc == 0 or spc & (spc - 1) or nfats == 0:
        return None
    fatsz = fatsz16 or fatsz32
    total = total16 or total32
    root_sectors = (root_entries * 32 + bps - 1) // bps
    data = total - (reserved + nfats * fatsz + root_sectors)
    if fatsz == 0 or data <= 0:
        return None
    clusters = data // spc
    version = "FAT12" if clusters < 4085 else "FAT16" if clusters < 65525 else "FAT32"
    ext_at = 66 if fatsz16 == 0 else 38  # extended BPB moves for FAT32
    label = serial = None
    if bs[ext_at] == 0x29:
        serial_n, = struct.unpack_from("<I", bs, ext_at + 1)
        serial = f"{serial_n >> 16:04X}-{serial_n & 0xFFFF:04X}"
        raw_label = bs[ext_at + 5:ext_at + 16].decode("ascii", "replace").rstrip(" ")
        label = None if raw_label in ("", "NO NAME") else raw_label
    return FsProbe("vfat", label, serial, version)


def _all_zero(part: ByteSource) -> bool:
    return all(not any(chunk) for chunk in part.chunks())


def probe_filesystem(image: ByteSource, entry: PartitionEntry | None = None) -> FsProbe:
    """Identify ext2/ext4/vfat content; never raises for unrecognised data."""
    part = image if entry is None else partition_source(image, entry)
    try:
        return _probe_ext(part) or _probe_fat(part) or (
            FsProbe("empty") if _all_zero(part) else FsProbe("unknown"))
    except (struct.error, ValueError):
        return FsProbe("unknown")


def hash_partition(image: ByteSource, entry: PartitionEntry) -> str:
    return hash_bytes(partition_source(image, entry))


def hash_partitions(image: ByteSource, table: PartitionTable, jobs: int = 1) -> list[str]:
    """Digests in table order; scheduling never affects the result."""
    if jobs <= 1:
        return [hash_partition(image, e) for e in table.entries]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda e: hash_partition(image, e), table.entries))


@dataclass(frozen=True)
class PartitionDiff:
    index: int
    status: str  # identical | content_differs | metadata_differs | only_left | only_right
    mismatches: tuple[str, ...] = ()
    left: PartitionEntry | None = None
    right: PartitionEntry | None = None
    left_digest: str | None = None
    right_digest: str | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "status": self.status,
            "mismatches": list(self.mismatches),
            "left_digest": self.left_digest,
            "right_digest": self.right_digest,
            "left": self.left.to_dict() if self.left else None,
            "right": self.right.to_dict() if self.right else None,
        }


_COMPARED_FIELDS = ("size_bytes", "start_lba", "type_guid", "name", "fs_kind", "fs_label")


def diff_partition_tables(a: PartitionTable, a_digests: list[str],
                          b: PartitionTable, b_digests: list[str]) -> list[PartitionDiff]:
    """Pair entries by index and compare layout fields and content digests."""
    left = {e.index: (e, d) for e, d in zip(a.entries, a_digests)}
    right = {e.index: (e, d) for e, d in zip(b.entries, b_digests)}
    out = []
    for index in sorted(left.keys() | right.keys()):
        if index not in right:
            e, d = left[index]
            out.append(PartitionDiff(index, "only_left", left=e, left_digest=d))
            continue
        if index not in left:
            e, d = right[index]
            out.append(PartitionDiff(index, "only_right", right=e, right_digest=d))
            continue
        (le, ld), (re_, rd) = left[index], right[index]
        mismatches = tuple(f for f in _COMPARED_FIELDS if getattr(le, f) != getattr(re_, f))
        if ld != rd:
            status = "content_differs"
        elif mismatches:
            status = "metadata_differs"
        else:
            status = "identical"
        out.append(PartitionDiff(index, status, mismatches, le, re_, ld, rd))
    return out


def summarize_partition_diff(a: PartitionTable, b: PartitionTable,
                             records: list[PartitionDiff]) -> dict:
    counts = {s: 0 for s in ("identical", "content_differs", "metadata_differs",
                             "only_left", "only_right")}
    for r in records:
        counts[r.status] += 1
    return {
        "left_count": len(a.entries),
        "right_count": len(b.entries),
        "count_mismatch": len(a.entries) != len(b.entries),
        **counts,
    }
