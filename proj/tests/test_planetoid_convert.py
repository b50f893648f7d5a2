"""Converts a fabricated miniature Planetoid dump and trains on it for one
epoch with the CLI."""

import json
import pickle
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np
import scipy.sparse as sp

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tools"))
import planetoid_to_tsv  # noqa: E402


def fabricate(raw: Path):
    rng = np.random.default_rng(0)
    n_all, n_test, f, c = 12, 4, 5, 3
    onehot = lambda k: np.eye(c)[rng.integers(0, c, k)]
    # test ids 12..15 listed out of order; node 12 has features [1 0 0 0 0]
    test_index = [14, 12, 15, 13]
    tx = np.zeros((n_test, f))
    tx[1, 0] = 1.0  # second sorted test row is node 13
    objs = {
        "x": sp.csr_matrix(rng.integers(0, 2, (3, f)).astype(float)),
        "y": onehot(3),
        "allx": sp.csr_matrix(rng.integers(0, 2, (n_all, f)).astype(float)),
        "ally": onehot(n_all),
        "tx": sp.csr_matrix(tx),
        "ty": np.eye(c)[[0, 1, 2, 2]],
        "graph": {i: [(i + 1) % 16, (i + 5) % 16, i] for i in range(16)},
    }
    for part, obj in objs.items():
        with open(raw / f"ind.mini.{part}", "wb") as fh:
            pickle.dump(obj, fh)
    (raw / "ind.mini.test.index").write_text("".join(f"{i}\n" for i in test_index))
    return objs, test_index


def main():
    cli = sys.argv[1]
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        raw = tmp / "raw"
        raw.mkdir()
        objs, test_index = fabricate(raw)
        features, labels, split, edges = planetoid_to_tsv.convert(objs, test_index)

        assert features.shape == (16, 5)
        # row 13 of the sorted block moves to node test_index[1] = 12
        assert features[12].tolist() == [1, 0, 0, 0, 0], features[12]
        assert labels[12] == 1 and labels[14] == 0
        assert split[:3] == ["train"] * 3
        assert split[3:12] == ["val"] * 9
        assert all(split[i] == "test" for i in test_index)
        assert all(u < v for u, v in edges) and len(set(edges)) == len(edges)

        planetoid_to_tsv.main(["--raw", str(raw), "--name", "mini", "--out", str(tmp / "data")])
        manifest = json.loads((tmp / "data" / "manifest.json").read_text())
        assert manifest["format"] == "bam-graph v1"

        config = {
            "task": "graph",
            "dataset": str(tmp / "data" / "manifest.json"),
            "model": {"hidden_heads": 2, "hidden_features": 4},
            "train": {"max_epochs": 2},
            "uncertainty": {"samples": 0},
            "output_dir": str(tmp / "out"),
        }
        (tmp / "config.json").write_text(json.dumps(config))
        subprocess.run([cli, "train", str(tmp / "config.json")], check=True, capture_output=True)
        assert (tmp / "out" / "metrics.jsonl").stat().st_size > 0
    print("ok")


if __name__ == "__main__":
    main()
