"""Disk image loading: raw or XZ-wrapped images behind a random-access byte source."""

from __future__ import annotations

import hashlib
import io
import lzma
import os
import tempfile
from dataclasses import dataclass
from typing import BinaryIO, Iterator

from .errors import ImageError

XZ_MAGIC = b"\xfd7zXZ\x00"
CHUNK = 1 << 20
DEFAULT_SPILL_THRESHOLD = 512 * 1024 * 1024


class ByteSource:
    """Read-only random access over a sequence of bytes.

    Subclasses implement ``_pread``.  Reads past the end are truncated, like
    ``os.pread``.
    """

    size: int = 0

    def _pread(self, offset: int, length: int) -> bytes:
        raise NotImplementedError

    def read_at(self, offset: int, length: int) -> bytes:
        if offset < 0 or length < 0:
            raise ValueError("negative offset or length")
        if offset >= self.size or length == 0:
            return b""
        return self._pread(offset, min(length, self.size - offset))

    def chunks(self, offset: int = 0, length: int | None = None,
               chunk_size: int = CHUNK) -> Iterator[bytes]:
        end = self.size if length is None else min(self.size, offset + length)
        pos = offset
        while pos < end:
            data = self.read_at(pos, min(chunk_size, end - pos))
            if not data:
                raise ImageError(f"short read at offset {pos}")
            yield data
            pos += len(data)

    def view(self, offset: int, length: int) -> "SliceSource":
        return SliceSource(self, offset, length)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class BytesSource(ByteSource):
    def __init__(self, data: bytes | bytearray | memoryview):
        self._data = bytes(data)
        self.size = len(self._data)

    def _pread(self, offset, length):
        return self._data[offset:offset + length]


class FileSource(ByteSource):
    """Backed by an OS file descriptor; ``os.pread`` keeps it thread-safe."""

    def __init__(self, fileobj: BinaryIO, size: int | None = None, owned: bool = True):
        self._file = fileobj
        self._fd = fileobj.fileno()
        self.size = os.fstat(self._fd).st_size if size is None else size
        self._owned = owned

    @classmethod
    def open(cls, path: str | os.PathLike) -> "FileSource":
        return cls(open(path, "rb"))

    def _pread(self, offset, length):
        return os.pread(self._fd, length, offset)

    def close(self):
        if self._owned and not self._file.closed:
            self._file.close()


class SliceSource(ByteSource):
    def __init__(self, parent: ByteSource, offset: int, length: int):
        if offset < 0 or length < 0 or offset + length > parent.size:
            raise ImageError(
                f"range {offset}+{length} lies outside a {parent.size}-byte source")
        self._parent = parent
        self._offset = offset
        self.size = length

    def _pread(self, offset, length):
        return self._parent.read_at(self._offset + offset, length)


@dataclass(frozen=True)
class ImageDescriptor:
    source_path: str
    compression: str  # "none" | "xz"
    decompressed_byte_size: int
    digest: str
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "source_path": self.source_path,
            "label": self.label,
            "compression": self.compression,
            "decompressed_byte_size": self.decompressed_byte_size,
            "digest": self.digest,
        }


def hash_bytes(source, algorithm: str = "sha256") -> str:
    """Hex digest of a whole stream.

    ``source`` may be a bytes-like object, a binary file object, a
    :class:`ByteSource`, or an iterable of byte chunks.  Errors while reading
    propagate; no partial digest is ever returned.
    """
    h = hashlib.new(algorithm)
    if isinstance(source, (bytes, bytearray, memoryview)):
        h.update(source)
    elif isinstance(source, ByteSource):
        for chunk in source.chunks():
            h.update(chunk)
    elif hasattr(source, "read"):
        while True:
            chunk = source.read(CHUNK)
            if not chunk:
                break
            h.update(chunk)
    else:
        for chunk in source:
            h.update(chunk)
    return h.hexdigest()


def byte_size(path: str | os.PathLike) -> int:
    """Apparent size in bytes, as ``du -b`` reports it (not allocated blocks)."""
    try:
        return os.stat(path).st_size
    except FileNotFoundError:
        raise ImageError(f"no such file: {os.fspath(path)}") from None


def detect_compression(path: str | os.PathLike) -> str:
    with open(path, "rb") as f:
        head = f.read(len(XZ_MAGIC))
    return "xz" if head == XZ_MAGIC else "none"


def _decompress_xz(f: BinaryIO, spill_threshold: int) -> tuple[ByteSource, str]:
    dec = lzma.LZMADecompressor(format=lzma.FORMAT_XZ)
    h = hashlib.sha256()
    mem = io.BytesIO()
    spill = None
    out = mem
    consumed = 0
    written = 0

    def emit(data: bytes):
        nonlocal out, spill, written
        if not data:
            return
        h.update(data)
        if spill is None and written + len(data) > spill_threshold:
            spill = tempfile.TemporaryFile()
            spill.write(mem.getbuffer())
            out = spill
        out.write(data)
        written += len(data)

    try:
        while not dec.eof:
            chunk = f.read(CHUNK)
            if not chunk:
                raise ImageError(
                    f"truncated XZ container: stream ends after {consumed} compressed bytes")
            try:
                emit(dec.decompress(chunk, CHUNK))
                while not dec.eof and not dec.needs_input:
                    emit(dec.decompress(b"", CHUNK))
            except lzma.LZMAError as exc:
                raise ImageError(
                    f"corrupt XZ stream in compressed bytes {consumed}..{consumed + len(chunk)}: {exc}"
                ) from None
            consumed += len(chunk)
        trailing = dec.unused_data + f.read()
        if trailing.strip(b"\x00") or len(trailing) % 4:
            raise ImageError(
                "data after the first XZ stream; multi-stream containers are not supported")
    except BaseException:
        if spill is not None:
            spill.close()
        raise

    if spill is None:
        return BytesSource(mem.getvalue()), h.hexdigest()
    spill.flush()
    return FileSource(spill, size=written), h.hexdigest()


def open_image(path: str | os.PathLike, label: str = "",
               spill_threshold: int = DEFAULT_SPILL_THRESHOLD
               ) -> tuple[ImageDescriptor, ByteSource]:
    """Open a raw or XZ image; returns its descriptor and a source over the
    decompressed bytes.  Compression is decided by magic bytes, not suffix."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ImageError(f"no such file: {path}")
    compression = detect_compression(path)
    if compression == "xz":
        with open(path, "rb") as f:
            source, digest = _decompress_xz(f, spill_threshold)
    else:
        source = FileSource.open(path)
        try:
            digest = hash_bytes(source)
        except BaseException:
            source.close()
            raise
    desc = ImageDescriptor(
        source_path=path,
        compression=compression,
        decompressed_byte_size=source.size,
        digest=digest,
        label=label,
    )
    return desc, source
