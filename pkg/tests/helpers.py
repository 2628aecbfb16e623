"""Fixture builders shared by the test modules.

Reference images come from independent tools: mke2fs for ext2/ext4,
gpt-image for GPT layouts and pyfatfs for FAT.
"""

from __future__ import annotations

import os
import random
import shutil
import subprocess
from pathlib import Path

os.environ["PATH"] = os.environ.get("PATH", "") + ":/usr/sbin:/sbin"

BANNER_GLOBAL = ("5.15.108-18907-gba143be42d3a-dirty (builty@fydebeast) #2 SMP PREEMPT "
                 "Wed Nov 15 07:25:36 UTC 2023")
BANNER_CHINA = ("5.15.108-18907-gba143be42d3a-dirty (builty@fydebeast) #2 SMP PREEMPT "
                "Wed Nov 15 07:37:38 UTC 2023")
BANNER_FLEX = ("5.15.140-21046-g921d2194f426 (cros-kernel@chromium.org) #1 SMP "
               "PREEMPT Wed, 7 Feb 2024 21:32:19 +0000")
KERNEL_SIZE = 9_038_400

SHADOW_FIXTURE = "chronos:*:::\nroot:*:::\n"
PASSWD_FIXTURE = ("root:x:0:0:root:/root:/bin/bash\n"
                  "chronos:x:1000:1000:system_user:/home/chronos/user:/bin/bash\n")

# name, size in bytes, filesystem to place in it
CHROMEOS_LAYOUT = [
    ("STATE", 6 << 20, "ext4"),
    ("KERN-A", 1 << 20, None),
    ("ROOT-A", 6 << 20, "ext2"),
    ("KERN-B", 512, None),
    ("ROOT-B", 512, None),
    ("KERN-C", 512, None),
    ("ROOT-C", 512, None),
    ("OEM", 2 << 20, "ext4"),
    ("reserved", 512, None),
    ("reserved", 512, None),
    ("RWFW", 512, None),
    ("EFI-SYSTEM", 8 << 20, "vfat"),
]

LINUX_FS = "0fc63daf-8483-4772-8e79-3d69d8477de4"
EFI_SYSTEM = "c12a7328-f81f-11d2-ba4b-00a0c93ec93b"


def have(tool: str) -> bool:
    return shutil.which(tool) is not None


def mkfs_ext(image: Path, source_dir: Path | None, size_kb: int, fstype: str = "ext2",
             label: str = "", block_size: int = 1024) -> Path:
    cmd = ["mke2fs", "-q", "-F", "-t", fstype, "-b", str(block_size)]
    if label:
        cmd += ["-L", label]
    if source_dir is not None:
        cmd += ["-d", str(source_dir)]
    cmd += [str(image), f"{size_kb}k"]
    env = dict(os.environ, E2FSPROGS_FAKE_TIME="1700000000", MKE2FS_DEVICE_SECTSIZE="512")
    subprocess.run(cmd, check=True, env=env, capture_output=True)
    return image


def mkfs_vfat(image: Path, size: int, label: str = "EFI-SYSTEM", files: dict | None = None) -> Path:
    from pyfatfs.PyFat import PyFat
    from pyfatfs.PyFatFS import PyFatFS

    with open(image, "wb") as f:
        f.truncate(size)
    pf = PyFat()
    pf.mkfs(str(image), fat_type=PyFat.FAT_TYPE_FAT16, label=label, size=size)
    pf.close()
    if files:
        fs = PyFatFS(str(image))
        try:
            for name, data in files.items():
                parent = os.path.dirname(name)
                if parent:
                    fs.makedirs(parent, recreate=True)
                with fs.openbin(name, "w") as out:
                    out.write(data)
        finally:
            fs.close()
    return image


def root_tree(base: Path, shadow: str = SHADOW_FIXTURE, passwd: str = PASSWD_FIXTURE,
              sshd: str | None = None, extra: dict | None = None) -> Path:
    (base / "etc" / "ssh").mkdir(parents=True)
    (base / "etc" / "passwd").write_text(passwd)
    (base / "etc" / "shadow").write_text(shadow)
    if sshd is not None:
        (base / "etc" / "ssh" / "sshd_config").write_text(sshd)
    (base / "bin").mkdir()
    su = base / "bin" / "su"
    su.write_bytes(b"\x7fELF fake su")
    os.chmod(su, 0o4755)
    for rel, data in (extra or {}).items():
        p = base / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
    return base


def kernel_blob(banner: str, seed: int, size: int = KERNEL_SIZE) -> tuple[bytes, int]:
    """Random-ish binary of ``size`` bytes with the banner NUL-delimited at a random offset."""
    rng = random.Random(seed)
    body = bytearray(rng.randbytes(size))
    payload = b"\0Linux version " + banner.encode() + b"\n\0"
    offset = rng.randrange(0, size - len(payload))
    body[offset:offset + len(payload)] = payload
    return bytes(body), offset + 1


def build_disk(path: Path, workdir: Path, layout=CHROMEOS_LAYOUT, root_dir: Path | None = None,
               esp_files: dict | None = None, tweak=None) -> list:
    """Create a GPT disk with gpt-image and write filesystems into it.

    Returns gpt-image's own listing of the entries, used as the oracle.
    """
    from gpt_image.disk import Disk
    from gpt_image.partition import Partition

    total = sum(((size + 4095) // 4096) * 4096 for _, size, _ in layout) + (1 << 20)
    disk = Disk(str(path))
    disk.create(total)
    for name, size, fs in layout:
        guid = EFI_SYSTEM if fs == "vfat" else LINUX_FS
        disk.table.partitions.add(Partition(name, size, guid))
    disk.commit()
    listing = Disk.open(str(path)).table.partitions.entries

    with open(path, "r+b") as out:
        for entry, (name, size, fs) in zip(listing, layout):
            length = (entry.last_lba - entry.first_lba + 1) * 512
            blob = None
            if fs in ("ext2", "ext4"):
                img = workdir / f"{name}.fs"
                src = root_dir if name == "ROOT-A" else None
                mkfs_ext(img, src, length // 1024, fs, label=name)
                blob = img.read_bytes()
            elif fs == "vfat":
                img = workdir / f"{name}.fs"
                mkfs_vfat(img, length, label=name, files=esp_files)
                blob = img.read_bytes()
            elif name.startswith("KERN"):
                blob = random.Random(name).randbytes(length)
            if tweak:
                blob = tweak(name, blob)
            if blob:
                assert len(blob) <= length
                out.seek(entry.first_lba * 512)
                out.write(blob)
    return listing


def range_sha256(path: Path, offset: int, length: int) -> str:
    """Independent range extraction via dd piped to sha256sum."""
    dd = subprocess.run(["dd", f"if={path}", "bs=512", f"skip={offset // 512}",
                         f"count={length // 512}", "status=none"],
                        check=True, capture_output=True)
    out = subprocess.run(["sha256sum"], input=dd.stdout, check=True, capture_output=True)
    return out.stdout.split()[0].decode()
