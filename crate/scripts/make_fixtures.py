"""Regenerates the checked-in fixtures under fixtures/.

Writes LKD1/LKP1 files with `struct` (independently of the Rust writer) and
computes expected `loki run` outputs with a float64 numpy reference.
Run from the repository root: python3 scripts/make_fixtures.py
"""

import math
import struct
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parent.parent / "fixtures"


def write_lkd(path, mat, layer=0, head=0, stage=1):
    mat = np.asarray(mat, dtype="<f4")
    s, d = mat.shape
    hdr = b"LKD1" + struct.pack("<IIIQIBB", 1, layer, head, s, d, stage, 0)
    path.write_bytes(hdr + mat.tobytes())


def write_lkp(path, proj, eig, layer=0, head=0, stage=1):
    proj = np.asarray(proj, dtype="<f4")
    d = proj.shape[0]
    hdr = b"LKP1" + struct.pack("<IIIIB", 1, layer, head, d, stage)
    path.write_bytes(hdr + np.asarray(eig, dtype="<f4").tobytes() + proj.tobytes())


def budget(frac, n):
    return min(max(int(math.floor(frac * n + 0.5)), 1), n)


def topk(scores, k):
    # descending score, ascending index on ties; returned ascending
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:k])


def softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def attend(q, keys, values, rows):
    d = keys.shape[1]
    w = softmax(np.array([q @ keys[i] for i in rows]) / math.sqrt(d))
    return w @ values[rows]


def run(method, keys, values, queries, proj, kf, df):
    s, d = keys.shape
    k, dd = budget(kf, s), budget(df, d)
    khat = keys @ proj
    rows = []
    if method == "h2o":
        cap = max(k, 2)
        pos, cum = [], []
        for t in range(s):
            pos.append(t)
            cum.append(0.0)
            logits = np.array([queries[t] @ keys[p] for p in pos]) / math.sqrt(d)
            w = softmax(logits)
            rows.append((w @ values[pos], list(pos)))
            cum = [c + wi for c, wi in zip(cum, w)]
            if len(pos) > cap:
                recent = (cap + 1) // 2
                cand = len(pos) - recent
                keep = topk(cum[:cand], cap - recent) + list(range(cand, len(pos)))
                pos = [pos[i] for i in keep]
                cum = [cum[i] for i in keep]
        return rows
    for q in queries:
        qhat = q @ proj
        if method == "vanilla":
            rows.append((attend(q, keys, values, list(range(s))), None))
        elif method == "exact-topk":
            sel = topk(list(keys @ q), k)
            rows.append((attend(q, keys, values, sel), sel))
        elif method == "loki":
            sel = topk(list(khat[:, :dd] @ qhat[:dd]), k)
            rows.append((attend(q, keys, values, sel), sel))
        elif method == "pca-attn":
            w = softmax(khat[:, :dd] @ qhat[:dd] / math.sqrt(d))
            rows.append((w @ values, None))
    return rows


def write_expected(path, rows, d):
    lines = ["query\t" + "\t".join(f"out_{j}" for j in range(d)) + "\tselected"]
    for i, (out, sel) in enumerate(rows):
        sel = "-" if sel is None else ",".join(map(str, sel))
        lines.append(f"{i}\t" + "\t".join(repr(float(v)) for v in out) + f"\t{sel}")
    path.write_text("\n".join(lines) + "\n")


def planted(rng, s, d, r, sigma):
    b, _ = np.linalg.qr(rng.standard_normal((d, r)))
    return rng.standard_normal((s, r)) @ b.T + sigma * rng.standard_normal((s, d))


def main():
    OUT.mkdir(exist_ok=True)
    keys = np.array([[4, 0.1, 0, 0], [1, 0.2, 0, 0], [3, -0.1, 0, 0], [-2, 0.3, 0, 0]])
    values = np.array([[1, 0, 2, -1], [0, 1, 0, 3], [5, 5, -5, 0.5], [2, -2, 1, 1]], dtype=float)
    queries = np.array([[1, 0.5, 0.2, 0.1], [-0.5, 1, 0.3, -0.2]])
    stream = np.array([[1, 0.5, 0.2, 0.1], [-0.5, 1, 0.3, -0.2], [0.3, -0.7, 1, 0.4], [2, 0.1, -0.3, 0.5]])
    # f32-rounded copies so the reference sees exactly what the binary sees
    keys, values, queries, stream = (m.astype(np.float32).astype(float) for m in (keys, values, queries, stream))
    proj = np.eye(4)

    write_lkd(OUT / "hand_keys.lkd", keys)
    write_lkd(OUT / "hand_values.lkd", values)
    write_lkd(OUT / "hand_queries.lkd", queries)
    write_lkd(OUT / "hand_stream.lkd", stream)
    write_lkp(OUT / "hand_identity.lkp", proj, [0.7, 0.2, 0.1, 0.0])

    cases = [
        ("vanilla", queries, 1.0, 1.0),
        ("loki", queries, 0.5, 0.25),
        ("exact-topk", queries, 0.5, 1.0),
        ("pca-attn", queries, 1.0, 0.25),
        ("h2o", stream, 0.5, 1.0),
    ]
    for method, qs, kf, df in cases:
        write_expected(OUT / f"hand_expected_{method}.tsv", run(method, keys, values, qs, proj, kf, df), 4)

    rng = np.random.default_rng(20241016)
    write_lkd(OUT / "planted_r4.lkd", planted(rng, 512, 16, 4, 0.01), layer=1, head=2)
    write_lkd(OUT / "gaussian_full.lkd", rng.standard_normal((64, 8)), layer=0, head=1)


if __name__ == "__main__":
    main()
