import gzip
import struct

import numpy as np
import pytest

from lipnext.trainer.data import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC

# -- synthetic datasets ---------------------------------------------------


def idx_bytes(arr: np.ndarray, magic: int) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def toy_digits(n: int, side: int = 8, seed: int = 0):
    """Ten classes, each a bright square at its own position plus noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    imgs = rng.integers(0, 40, size=(n, side, side)).astype(np.uint8)
    for i, c in enumerate(labels):
        r, col = divmod(int(c), 4)
        imgs[i, 2 * r : 2 * r + 2, 2 * col : 2 * col + 2] = 255
    return imgs, labels.astype(np.uint8)


@pytest.fixture
def mnist_dir_factory(tmp_path):
    def make(n_train=64, n_test=40, side=8, gz=False):
        root = tmp_path / f"mnist_{n_train}_{side}_{int(gz)}"
        root.mkdir()
        for split, n, seed in (("train", n_train, 0), ("t10k", n_test, 1)):
            imgs, labels = toy_digits(n, side, seed)
            for kind, arr, magic in (("images-idx3", imgs, IDX_IMAGES_MAGIC), ("labels-idx1", labels, IDX_LABELS_MAGIC)):
                raw = idx_bytes(arr, magic)
                name = f"{split}-{kind}-ubyte"
                if gz:
                    (root / (name + ".gz")).write_bytes(gzip.compress(raw, mtime=0))
                else:
                    (root / name).write_bytes(raw)
        return root

    return make


# -- acceptance summary ---------------------------------------------------

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _ACCEPTANCE[n] = ("PASS" if rep.passed else "FAIL", item.name, detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, name, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {name}  {detail}".rstrip())
