"""Smoke test for the splice_py extension.

Build and install it first:

    pip install --no-build-isolation ./crates/python

The checkpoint section needs the `splice` binary (`cargo build`); it is found
through $SPLICE_BIN or target/debug/splice and skipped when absent.
"""

import os
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

import splice_py

ROOT = Path(__file__).resolve().parent.parent
TINY = ["--vit-arch", "tiny", "--vit-weights", "random:7", "--vit-resize", "32"]


def check_self_similarity(rng):
    keys = rng.normal(size=(12, 5))
    got = np.array(splice_py.self_similarity(keys.tolist()))
    unit = keys / np.linalg.norm(keys, axis=1, keepdims=True)
    np.testing.assert_allclose(got, unit @ unit.T, atol=1e-9)


def check_interpolation(rng):
    s, t = rng.normal(size=16).astype(np.float32), rng.normal(size=16).astype(np.float32)
    out = np.array(splice_py.interpolate_cls(s.tolist(), t.tolist(), [0.0, 0.5, 1.0]))
    np.testing.assert_array_equal(out[0], s)
    np.testing.assert_array_equal(out[2], t)
    np.testing.assert_allclose(out[1], 0.5 * (s + t), atol=1e-6)


def check_modes(rng):
    pts = np.concatenate([rng.normal(size=(20, 3)) * 0.05, rng.normal(size=(20, 3)) * 0.05 + 5.0])
    modes = splice_py.kmeans_modes(pts.tolist(), 2, seed=3)
    assert len(set(modes.assignments[:20])) == 1 and len(set(modes.assignments[20:])) == 1
    assert modes.assignments[0] != modes.assignments[20]
    assert all(b <= a + 1e-9 for a, b in zip(modes.inertia_trace, modes.inertia_trace[1:]))


def check_pairs(rng):
    desc = rng.normal(size=(6, 8)).astype(np.float32)
    desc[5] = desc[2] + 1e-3
    ids = [f"im{i}.png" for i in range(6)]
    pairs = splice_py.mutual_knn_pairs(ids, desc.tolist(), 1)
    assert ("im2.png", "im5.png") in pairs, pairs
    try:
        splice_py.mutual_knn_pairs(ids, desc.tolist(), 6)
    except ValueError:
        pass
    else:
        raise AssertionError("K >= N should be rejected")


def write_images(directory, n, size, rng):
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        base = rng.uniform(0, 255, size=(4, 4, 3)).astype(np.uint8)
        img = Image.fromarray(base).resize((size, size), Image.BILINEAR)
        img.save(directory / f"img_{i:03d}.png")


def find_binary():
    candidate = os.environ.get("SPLICE_BIN") or ROOT / "target" / "debug" / "splice"
    return Path(candidate) if Path(candidate).is_file() else None


def check_checkpoint(rng):
    binary = find_binary()
    if binary is None:
        print("skip: splice binary not found")
        return
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data = tmp / "data"
        write_images(data, 4, 48, rng)
        ids, desc = splice_py.describe_directory(data, window=2, resize=32, vit_arch="tiny", vit_weights="random:7")
        assert ids == sorted(ids) and len(ids) == 4 and len(desc[0]) > 0
        pairs = tmp / "pairs.tsv"
        pairs.write_text("img_000.png\timg_001.png\nimg_001.png\timg_000.png\n")
        subprocess.run(
            [binary, "splicenet-train", "--pairs", pairs, "--data-dir", data, "--out-dir", tmp / "train",
             "--iterations", "1", *TINY],
            check=True,
            capture_output=True,
        )
        net = splice_py.SpliceNet(tmp / "train" / "checkpoints" / "final.safetensors")
        token = net.cls(data / "img_001.png")
        assert len(token) == net.token_dim
        shape = net.run(data / "img_000.png", tmp / "out.png", appearance=data / "img_001.png")
        assert shape == (48, 48), shape
        with_token = net.run(data / "img_000.png", tmp / "tok.png", token=token)
        assert with_token == shape
        a = np.asarray(Image.open(tmp / "out.png"), dtype=np.int16)
        b = np.asarray(Image.open(tmp / "tok.png"), dtype=np.int16)
        assert np.abs(a - b).max() <= 1, "token and image paths disagree"
        try:
            net.run(data / "img_000.png", tmp / "x.png")
        except ValueError:
            pass
        else:
            raise AssertionError("run without appearance should fail")
        try:
            net.cls(tmp / "missing.png")
        except OSError:
            pass
        else:
            raise AssertionError("missing image should raise OSError")


def main():
    rng = np.random.default_rng(0)
    for check in (check_self_similarity, check_interpolation, check_modes, check_pairs, check_checkpoint):
        check(rng)
        print(f"ok: {check.__name__}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
