"""Builds the extension module and exercises its API.

Usage: python3 python/smoke_test.py
"""

import importlib.util
import pathlib
import random
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "genrec-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / "libgenrec.so"
    dest = pathlib.Path(tempfile.mkdtemp()) / "genrec.so"
    shutil.copy(lib, dest)
    spec = importlib.util.spec_from_file_location("genrec", dest)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    genrec = load_module()

    assert genrec.hit_rate([[1, 2], [3, 4]], [3, 4], 2) == 1
    assert genrec.hit_rate([[1, 2], [3, 4]], [3, 4], 1) == 0
    try:
        genrec.hit_rate([[1, 2]], [1, 2], 0)
        raise AssertionError("k=0 accepted")
    except ValueError:
        pass

    rng = random.Random(0)
    emb = [[rng.gauss(0.0, 1.0) for _ in range(8)] for _ in range(200)]
    sids = genrec.semantic_ids(emb, codebook_size=8, levels=2, epochs=2, seed=1)
    assert len(sids) == 200
    assert all(len(s) == 2 and all(0 <= c < 8 for c in s) for s in sids)
    assert len({tuple(s) for s in sids}) > 8

    csv = genrec.experiment("preset=small\nsft_steps=5\nbaselines=popularity\n")
    rows = [line.split(",") for line in csv.strip().splitlines()]
    assert rows[0] == ["config_id", "task", "hr1", "hr5", "hr10", "hr20", "wall_seconds"]
    means = {r[0]: [float(x) for x in r[2:6]] for r in rows[1:] if r[1] == "mean"}
    assert set(means) == {"full_sid1_id", "popularity"}
    for hr in means.values():
        assert all(0.0 <= a <= b <= 1.0 for a, b in zip(hr, hr[1:]))

    print("python smoke test: ok")


if __name__ == "__main__":
    sys.exit(main())
