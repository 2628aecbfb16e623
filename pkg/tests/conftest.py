import shutil

import pytest

import helpers


@pytest.fixture(scope="session")
def chromeos_disk(tmp_path_factory):
    """12-partition disk built by gpt-image with mke2fs/pyfatfs filesystems.

    Yields (image path, gpt-image listing, workdir).
    """
    work = tmp_path_factory.mktemp("chromeos")
    root = helpers.root_tree(work / "root", sshd="PermitRootLogin yes\nPasswordAuthentication no\n")
    kernel, _ = helpers.kernel_blob(helpers.BANNER_GLOBAL, seed=11, size=600_000)
    listing = helpers.build_disk(work / "io.img", work, root_dir=root,
                                 esp_files={"EFI/syslinux/vmlinuz.A": kernel})
    return work / "io.img", listing, work


@pytest.fixture
def disk_copy(chromeos_disk, tmp_path):
    path, listing, _ = chromeos_disk
    dst = tmp_path / "copy.img"
    shutil.copyfile(path, dst)
    return dst, listing


def pytest_report_header(config):
    tools = ["mke2fs", "blkid", "xz", "strings", "od", "sha256sum", "dd"]
    return "reference tools: " + ", ".join(f"{t}={'yes' if shutil.which(t) else 'MISSING'}" for t in tools)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
