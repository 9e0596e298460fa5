# Copyright 2026 The Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Regenerates the frozen fixtures in tests/data.

    python3 tools/reference/make_fixtures.py tests/data

Every value here is computed from first principles with numpy/scipy; the C++
tests compare against the frozen output.
"""

import json
import math
import os
import sys

import numpy as np
from scipy import stats

sys.path.insert(0, os.path.dirname(__file__))
import grdm  # noqa: E402

PROJECTION_SEED = 1234567


def projection_fixtures(out):
    # Identity input: projected row i is column i of the 8 x 16 map.
    ids = ["e%02d" % i for i in range(16)]
    eye = np.eye(16, dtype=np.float32)
    grdm.write(os.path.join(out, "projection_identity_input.grdm"), ids, eye,
               [("w", 16)], normalized=True)
    proj = grdm.project(eye, [("w", 16)], [8], PROJECTION_SEED)
    grdm.write(os.path.join(out, "projection_identity_golden.grdm"), ids, proj,
               [("w", 8)])

    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 16)).astype(np.float32)
    segs = [("attn", 10), ("mlp", 6)]
    dims = grdm.allocate([10, 6], 8)
    assert dims == [5, 3]
    grdm.write(os.path.join(out, "projection_layers_input.grdm"),
               ["r0", "r1", "r2"], x, segs)
    grdm.write(os.path.join(out, "projection_layers_golden.grdm"),
               ["r0", "r1", "r2"], grdm.project(x, segs, dims, PROJECTION_SEED),
               [("attn", 5), ("mlp", 3)])


def bm25(query, docs, k1=1.2, b=0.75):
    n = len(docs)
    avg = sum(sum(d.values()) for d in docs) / n
    out = []
    for d in docs:
        length = sum(d.values())
        s = 0.0
        for t in query:
            df = sum(1 for e in docs if t in e)
            idf = math.log((n - df + 0.5) / (df + 0.5) + 1.0)
            tf = d.get(t, 0)
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * length / avg))
        out.append(s)
    return out


def bag(text):
    out = {}
    for t in text.lower().split():
        out[t] = out.get(t, 0) + 1
    return out


def kl2(p, q):
    return sum(pi * math.log2(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def jsd(p, q):
    m = [(a + b) / 2 for a, b in zip(p, q)]
    return 0.5 * kl2(p, m) + 0.5 * kl2(q, m)


def fl_greedy(ids, sim, costs, lam, k):
    n = len(ids)
    cur = np.zeros(n)
    picked, gains = [], []
    for _ in range(k):
        best, best_gain = None, None
        for j in sorted(range(n), key=lambda j: ids[j]):
            if j in picked:
                continue
            delta = np.maximum(0.0, np.maximum(cur, sim[:, j])).sum() - \
                np.maximum(0.0, cur).sum()
            g = (delta + 1.0) ** lam / costs[j] ** (1.0 - lam)
            if best is None or g > best_gain:
                best, best_gain = j, g
        picked.append(best)
        gains.append(best_gain)
        cur = np.maximum(cur, sim[:, best])
    return [ids[j] for j in picked], gains


def oracles():
    o = {}
    docs = ["the cat sat on the mat", "the dog sat", "a bird sang a song"]
    query = "the cat sang"
    o["bm25"] = {"docs": docs, "query": query,
                 "raw": bm25(list(bag(query)), [bag(d) for d in docs])}

    o["jsd"] = {"p": [0.5, 0.5], "q": [0.9, 0.1],
                "value": jsd([0.5, 0.5], [0.9, 0.1])}

    rng = np.random.default_rng(11)
    a = rng.standard_normal(40)
    b = a + rng.standard_normal(40)
    b[:5] = b[5]  # ties
    o["spearman"] = {"a": a.tolist(), "b": b.tolist(),
                     "value": float(stats.spearmanr(a, b).correlation)}
    n = 4
    d = np.array([1, 2, 3, 4]) - np.array([1, 3, 2, 4])
    o["spearman_small"] = 1 - 6 * float((d ** 2).sum()) / (n * (n * n - 1))

    ys, ks = [0.0, 10.0, 10.0, 0.0], [1, 5, 10, 25]
    area = sum((ys[i] + ys[i - 1]) / 2 * (ks[i] - ks[i - 1]) for i in range(1, 4))
    o["auc"] = {"k": ks, "db": ys, "value": area / (ks[-1] - ks[0])}

    ids = ["c0", "c1", "c2", "c3", "c4"]
    sim = np.array([[1.0, 0.9, 0.2, 0.1, 0.4],
                    [0.9, 1.0, 0.3, 0.2, 0.5],
                    [0.2, 0.3, 1.0, 0.8, 0.1],
                    [0.1, 0.2, 0.8, 1.0, 0.3],
                    [0.4, 0.5, 0.1, 0.3, 1.0]])
    costs = [1.0, 1.2, 1.5, 1.8, 2.0]
    members, gains = fl_greedy(ids, sim, np.array(costs), 0.5, 3)
    o["facility_location"] = {"ids": ids, "sim": sim.tolist(), "costs": costs,
                              "lambda": 0.5, "k": 3, "members": members,
                              "gains": gains}
    return o


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "tests/data"
    os.makedirs(out, exist_ok=True)
    projection_fixtures(out)
    with open(os.path.join(out, "oracles.json"), "w") as f:
        json.dump(oracles(), f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
