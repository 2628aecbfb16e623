"""Read-only ext2 reader working straight off a partition's bytes.

Only block-pointer addressing is understood.  Filesystems using extents or
other ext3/ext4 incompatible features are refused; mount those on a host and
snapshot the directory instead.
"""

from __future__ import annotations

import hashlib
import stat
import struct
from dataclasses import dataclass, replace

from .errors import ExtError, PathNotFound
from .image_io import ByteSource
from .treediff import FileRecord, decode_name, kind_of_mode, path_key

SUPERBLOCK_OFFSET = 1024
EXT2_MAGIC = 0xEF53
ROOT_INO = 2
MAX_SYMLINKS = 40

INCOMPAT_NAMES = {
    0x0001: "compression", 0x0002: "filetype", 0x0004: "needs_recovery",
    0x0008: "journal_dev", 0x0010: "meta_bg", 0x0040: "extents", 0x0080: "64bit",
    0x0100: "mmp", 0x0200: "flex_bg", 0x0400: "ea_inode", 0x1000: "dirdata",
    0x2000: "metadata_csum_seed", 0x4000: "large_dir", 0x8000: "inline_data",
    0x10000: "encrypt", 0x20000: "casefold",
}
INCOMPAT_FILETYPE = 0x0002
SUPPORTED_INCOMPAT = INCOMPAT_FILETYPE
RO_COMPAT_LARGE_FILE = 0x0002

SB = struct.Struct("<13I 6H 4I 2H I 2H 3I 16s 16s")
GROUP_DESC = struct.Struct("<3I")
INODE = struct.Struct("<2H 5I 2H 2I 4x 15I 4I 4x 2H 4x")


@dataclass(frozen=True)
class Ext2Superblock:
    inode_count: int
    block_count: int
    block_size: int
    inodes_per_group: int
    blocks_per_group: int
    first_data_block: int
    magic: int
    rev_level: int
    minor_rev_level: int
    inode_size: int
    volume_label: str
    uuid: bytes
    feature_compat: int
    feature_incompat: int
    feature_ro_compat: int

    @property
    def group_count(self) -> int:
        return -(-(self.block_count - self.first_data_block) // self.blocks_per_group)


@dataclass(frozen=True)
class InodeRecord:
    number: int
    mode: int
    uid: int
    gid: int
    size_bytes: int
    links: int
    mtime: int
    blocks_512: int
    file_acl: int
    block: tuple[int, ...]  # 12 direct, then single, double, triple indirect

    @property
    def kind(self) -> str:
        return kind_of_mode(self.mode)

    @property
    def permissions(self) -> int:
        return stat.S_IMODE(self.mode)

    @property
    def direct(self) -> tuple[int, ...]:
        return self.block[:12]

    @property
    def single_indirect(self) -> int:
        return self.block[12]

    @property
    def double_indirect(self) -> int:
        return self.block[13]

    @property
    def triple_indirect(self) -> int:
        return self.block[14]


def incompat_names(flags: int) -> list[str]:
    names = [name for bit, name in INCOMPAT_NAMES.items() if flags & bit]
    unknown = flags & ~sum(INCOMPAT_NAMES)
    if unknown:
        names.append(f"0x{unknown:x}")
    return names


def read_superblock(partition: ByteSource) -> Ext2Superblock:
    if partition.size < 2048:
        raise ExtError(f"partition too small for an ext2 superblock ({partition.size} bytes)")
    raw = partition.read_at(SUPERBLOCK_OFFSET, 1024)
    f = SB.unpack_from(raw)
    (inodes, blocks, _r, _fb, _fi, first_data, log_bs, _lf, bpg, _fpg, ipg, _mt, _wt,
     _mc, _mmc, magic, _state, _err, minor, _lc, _ci, _os, rev, _ru, _rg,
     _first_ino, inode_size, _bgn, compat, incompat, ro_compat, uuid_, label) = f
    if magic != EXT2_MAGIC:
        raise ExtError(f"bad ext2 magic 0x{magic:04x} (expected 0xef53)")
    if log_bs > 2:
        raise ExtError(f"unsupported block size {1024 << log_bs}")
    unsupported = incompat & ~SUPPORTED_INCOMPAT
    if unsupported:
        raise ExtError(
            "unsupported incompat features: " + ", ".join(incompat_names(unsupported))
            + " (ext4 not supported, extract via host mount)")
    if rev == 0:
        inode_size = 128
    if inode_size < 128 or inode_size & (inode_size - 1):
        raise ExtError(f"invalid inode size {inode_size}")
    if not bpg or not ipg:
        raise ExtError("superblock declares empty block groups")
    return Ext2Superblock(
        inode_count=inodes, block_count=blocks, block_size=1024 << log_bs,
        inodes_per_group=ipg, blocks_per_group=bpg, first_data_block=first_data,
        magic=magic, rev_level=rev, minor_rev_level=minor, inode_size=inode_size,
        volume_label=label.split(b"\0", 1)[0].decode("utf-8", "replace"),
        uuid=uuid_, feature_compat=compat, feature_incompat=incompat,
        feature_ro_compat=ro_compat,
    )


class Ext2Filesystem:
    def __init__(self, source: ByteSource):
        self.source = source
        self.sb = read_superblock(source)
        self.block_size = self.sb.block_size
        self._ppb = self.block_size // 4
        gdt = self.read_block(self.sb.first_data_block + 1)
        need = self.sb.group_count * 32
        if need > len(gdt):
            gdt = self.source.read_at((self.sb.first_data_block + 1) * self.block_size, need)
        self._inode_tables = [GROUP_DESC.unpack_from(gdt, g * 32)[2]
                              for g in range(self.sb.group_count)]

    @property
    def superblock(self) -> Ext2Superblock:
        return self.sb

    def read_block(self, n: int) -> bytes:
        if n >= self.sb.block_count:
            raise ExtError(f"block {n} beyond filesystem end ({self.sb.block_count} blocks)")
        data = self.source.read_at(n * self.block_size, self.block_size)
        if len(data) != self.block_size:
            raise ExtError(f"block {n} lies outside the partition")
        return data

    def read_inode(self, number: int) -> InodeRecord:
        if not 1 <= number <= self.sb.inode_count:
            raise ExtError(f"inode {number} out of range")
        group, index = divmod(number - 1, self.sb.inodes_per_group)
        offset = self._inode_tables[group] * self.block_size + index * self.sb.inode_size
        raw = self.source.read_at(offset, 128)
        if len(raw) < 128:
            raise ExtError(f"inode {number} lies outside the partition")
        v = INODE.unpack(raw)
        mode, uid_lo, size_lo, _at, _ct, mtime, _dt, gid_lo, links, blocks, _fl = v[:11]
        block = v[11:26]
        _gen, file_acl, size_hi, _faddr = v[26:30]
        uid_hi, gid_hi = v[30:32]
        size = size_lo
        if stat.S_ISREG(mode) and self.sb.rev_level >= 1:
            size |= size_hi << 32
        return InodeRecord(
            number=number, mode=mode, uid=uid_lo | uid_hi << 16, gid=gid_lo | gid_hi << 16,
            size_bytes=size, links=links, mtime=mtime, blocks_512=blocks,
            file_acl=file_acl, block=tuple(block))

    # -- block mapping ------------------------------------------------------

    def _expand(self, ptr: int, level: int, count: int, out: list[int]):
        if ptr == 0:
            out.extend([0] * count)
            return
        ptrs = struct.unpack(f"<{self._ppb}I", self.read_block(ptr))
        if level == 1:
            out.extend(ptrs[:count])
            return
        span = self._ppb ** (level - 1)
        for p in ptrs:
            if count <= 0:
                break
            take = min(count, span)
            self._expand(p, level - 1, take, out)
            count -= take

    def block_map(self, inode: InodeRecord) -> list[int]:
        """Physical block of each logical block; 0 marks a hole."""
        nblocks = -(-inode.size_bytes // self.block_size)
        out = list(inode.direct[:nblocks])
        remaining = nblocks - len(out)
        for level, ptr in ((1, inode.single_indirect), (2, inode.double_indirect),
                           (3, inode.triple_indirect)):
            if remaining <= 0:
                break
            take = min(remaining, self._ppb ** level)
            self._expand(ptr, level, take, out)
            remaining -= take
        if remaining > 0:
            raise ExtError(f"inode {inode.number}: size exceeds addressable blocks")
        return out

    def iter_content(self, inode: InodeRecord, max_run: int = 256):
        """Yield file content in chunks; holes read as zeros."""
        remaining = inode.size_bytes
        blocks = self.block_map(inode)
        bs = self.block_size
        i = 0
        while i < len(blocks) and remaining > 0:
            start = blocks[i]
            run = 1
            if start == 0:
                while i + run < len(blocks) and blocks[i + run] == 0 and run < max_run:
                    run += 1
                data = bytes(run * bs)
            else:
                while (i + run < len(blocks) and blocks[i + run] == start + run
                       and run < max_run):
                    run += 1
                if start + run > self.sb.block_count:
                    raise ExtError(f"inode {inode.number}: block {start} beyond filesystem end")
                data = self.source.read_at(start * bs, run * bs)
            data = data[:remaining]
            remaining -= len(data)
            i += run
            yield data

    def read_content(self, inode: InodeRecord) -> bytes:
        return b"".join(self.iter_content(inode))

    def is_fast_symlink(self, inode: InodeRecord) -> bool:
        ea_blocks = (self.block_size >> 9) if inode.file_acl else 0
        return inode.blocks_512 - ea_blocks == 0 and inode.size_bytes < 60

    def read_link(self, inode: InodeRecord) -> str:
        if self.is_fast_symlink(inode):
            raw = struct.pack("<15I", *inode.block)[:inode.size_bytes]
        else:
            raw = self.read_content(inode)
        return decode_name(raw)

    # -- directories --------------------------------------------------------

    def list_dir(self, inode: InodeRecord) -> tuple[list[tuple[bytes, int]], list[str]]:
        """Return (name, inode) pairs excluding "." and "..", plus errors for
        any malformed directory blocks (the rest of such a block is skipped)."""
        if inode.kind != "dir":
            raise ExtError(f"inode {inode.number} is not a directory")
        filetype = bool(self.sb.feature_incompat & INCOMPAT_FILETYPE)
        entries, errors = [], []
        bs = self.block_size
        for lblock, phys in enumerate(self.block_map(inode)):
            if phys == 0:
                continue
            try:
                block = self.read_block(phys)
            except ExtError as exc:
                errors.append(str(exc))
                continue
            pos = 0
            while pos < bs:
                if pos + 8 > bs:
                    errors.append(f"directory inode {inode.number} block {lblock}: "
                                  f"truncated entry at {pos}")
                    break
                ino, rec_len = struct.unpack_from("<IH", block, pos)
                name_len = block[pos + 6] if filetype else struct.unpack_from("<H", block, pos + 6)[0]
                if rec_len < 8 or rec_len % 4 or pos + rec_len > bs or name_len + 8 > rec_len:
                    errors.append(f"directory inode {inode.number} block {lblock}: "
                                  f"corrupt entry at {pos} (rec_len {rec_len})")
                    break
                if ino:
                    name = bytes(block[pos + 8:pos + 8 + name_len])
                    if name not in (b".", b".."):
                        entries.append((name, ino))
                pos += rec_len
        return entries, errors

    def lookup(self, dir_inode: InodeRecord, name: bytes) -> int | None:
        entries, _ = self.list_dir(dir_inode)
        for n, ino in entries:
            if n == name:
                return ino
        return None

    def resolve_path(self, path: str, follow_final: bool = True) -> InodeRecord:
        """Walk ``path`` from the root inode, expanding symlinks (at most 40)."""
        pending = [c for c in path.split("/") if c not in ("", ".")]
        stack = [self.read_inode(ROOT_INO)]
        followed = 0
        walked = []
        while pending:
            comp = pending.pop(0)
            if comp == "..":
                if len(stack) > 1:
                    stack.pop()
                    walked.pop()
                continue
            cur = stack[-1]
            if cur.kind != "dir":
                raise PathNotFound(f"{'/' + '/'.join(walked)}: not a directory")
            ino = self.lookup(cur, comp.encode("utf-8", "surrogateescape"))
            if ino is None:
                raise PathNotFound(f"{'/' + '/'.join(walked + [comp])}: no such file or directory")
            node = self.read_inode(ino)
            if node.kind == "symlink" and (pending or follow_final):
                followed += 1
                if followed > MAX_SYMLINKS:
                    raise ExtError(f"too many levels of symbolic links resolving {path}")
                target = self.read_link(node)
                if target.startswith("/"):
                    stack = stack[:1]
                    walked = []
                pending = [c for c in target.split("/") if c not in ("", ".")] + pending
                continue
            stack.append(node)
            walked.append(comp)
        return stack[-1]

    def read_path(self, path: str) -> bytes:
        node = self.resolve_path(path)
        if node.kind != "file":
            raise ExtError(f"{path} is not a regular file")
        return self.read_content(node)

    # -- whole-tree walk ----------------------------------------------------

    def _record(self, rel: str, node: InodeRecord) -> FileRecord:
        digest = target = error = None
        try:
            if node.kind == "file":
                h = hashlib.sha256()
                for chunk in self.iter_content(node):
                    h.update(chunk)
                digest = h.hexdigest()
            elif node.kind == "symlink":
                target = self.read_link(node)
        except ExtError as exc:
            error = str(exc)
        return FileRecord(rel_path=rel, kind=node.kind, size_bytes=node.size_bytes,
                          mode=node.permissions, uid=node.uid, gid=node.gid,
                          digest=digest, symlink_target=target, mtime=node.mtime,
                          error=error)

    def walk_tree(self) -> list[FileRecord]:
        """Depth-first walk from the root; records are returned sorted
        bytewise by path so they merge-join with host snapshots."""
        records: list[FileRecord] = []
        seen_dirs = {ROOT_INO}

        def visit(dir_node: InodeRecord, prefix: str) -> str | None:
            try:
                entries, errors = self.list_dir(dir_node)
            except ExtError as exc:
                return str(exc)
            for name, ino in sorted(entries):
                rel = prefix + decode_name(name)
                try:
                    node = self.read_inode(ino)
                except ExtError as exc:
                    records.append(FileRecord(rel, "other", 0, 0, 0, 0, error=str(exc)))
                    continue
                rec = self._record(rel, node)
                if node.kind == "dir":
                    if ino in seen_dirs:
                        rec = replace(rec, error="directory cycle")
                    else:
                        seen_dirs.add(ino)
                        err = visit(node, rel + "/")
                        if err:
                            rec = replace(rec, error=err)
                records.append(rec)
            return "; ".join(errors) or None

        err = visit(self.read_inode(ROOT_INO), "")
        if err:
            raise ExtError(f"root directory unreadable: {err}")
        records.sort(key=lambda r: path_key(r.rel_path))
        return records


def open_ext2(source: ByteSource) -> Ext2Filesystem:
    return Ext2Filesystem(source)


def resolve_path(fs: Ext2Filesystem, path: str) -> InodeRecord:
    return fs.resolve_path(path)


def walk_tree(fs: Ext2Filesystem) -> list[FileRecord]:
    return fs.walk_tree()
