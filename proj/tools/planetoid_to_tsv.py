#!/usr/bin/env python3
"""Convert the Planetoid citation files (ind.<name>.x, .y, .tx, .ty, .allx,
.ally, .graph, .test.index) into the TSV + manifest layout read by `bam`.

    planetoid_to_tsv.py --raw DIR --name cora --out data/cora

Node order follows allx then tx, with test rows moved to their listed
indices. Train is the first len(y) nodes, val the next 500, test the
indices in .test.index.
"""

import argparse
import hashlib
import json
import pickle
import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp

PARTS = ("x", "y", "tx", "ty", "allx", "ally", "graph")


def load_raw(raw: Path, name: str):
    objs = {}
    for part in PARTS:
        with open(raw / f"ind.{name}.{part}", "rb") as f:
            objs[part] = pickle.load(f, encoding="latin1")
    with open(raw / f"ind.{name}.test.index") as f:
        test_index = [int(line) for line in f if line.strip()]
    return objs, test_index


def dense(m):
    return m.toarray() if sp.issparse(m) else np.asarray(m)


def convert(objs, test_index):
    allx, tx = dense(objs["allx"]), dense(objs["tx"])
    ally, ty = np.asarray(objs["ally"]), np.asarray(objs["ty"])
    n_train = np.asarray(objs["y"]).shape[0]

    # Some test ids are absent from tx (isolated nodes in citeseer); they get
    # zero features and label 0, and stay outside every split.
    lo, hi = min(test_index), max(test_index)
    full_tx = np.zeros((hi - lo + 1, tx.shape[1]))
    full_ty = np.zeros((hi - lo + 1, ty.shape[1]))
    rows = [i - lo for i in sorted(test_index)]
    full_tx[rows] = tx
    full_ty[rows] = ty

    features = np.vstack([allx, full_tx])
    labels = np.vstack([ally, full_ty])
    features[test_index] = features[sorted(test_index)]
    labels[test_index] = labels[sorted(test_index)]
    labels = labels.argmax(axis=1)

    n = features.shape[0]
    split = ["none"] * n
    for i in range(n_train):
        split[i] = "train"
    for i in range(n_train, min(n_train + 500, n)):
        split[i] = "val"
    for i in test_index:
        split[i] = "test"

    edges = set()
    for u, nbrs in objs["graph"].items():
        for v in nbrs:
            if u != v and u < n and v < n:
                edges.add((min(u, v), max(u, v)))
    return features, labels, split, sorted(edges)


def number(v):
    return repr(int(v)) if float(v).is_integer() else repr(float(v))


def write(out: Path, name: str, features, labels, split, edges):
    out.mkdir(parents=True, exist_ok=True)
    text = {
        "features": "".join(
            str(i) + "\t" + "\t".join(number(v) for v in row) + "\n" for i, row in enumerate(features)
        ),
        "edges": "".join(f"{u}\t{v}\n" for u, v in edges),
        "labels": "".join(f"{i}\t{int(l)}\n" for i, l in enumerate(labels)),
        "splits": "".join(f"{i}\t{s}\n" for i, s in enumerate(split)),
    }
    files = {}
    for kind in sorted(text):
        body = text[kind].encode()
        (out / f"{kind}.tsv").write_bytes(body)
        files[kind] = {"path": f"{kind}.tsv", "sha256": hashlib.sha256(body).hexdigest()}
    manifest = {"format": "bam-graph v1", "name": name, "row_normalize": True, "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--raw", type=Path, required=True, help="directory holding the ind.<name>.* files")
    ap.add_argument("--name", required=True, help="dataset name, e.g. cora")
    ap.add_argument("--out", type=Path, required=True, help="output directory")
    args = ap.parse_args(argv)

    objs, test_index = load_raw(args.raw, args.name)
    features, labels, split, edges = convert(objs, test_index)
    write(args.out, args.name, features, labels, split, edges)
    print(f"{args.name}: {features.shape[0]} nodes, {features.shape[1]} features, "
          f"{labels.max() + 1} classes, {len(edges)} edges -> {args.out / 'manifest.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
