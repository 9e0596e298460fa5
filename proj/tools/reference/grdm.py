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

"""Reference GRDM reader/writer and Rademacher projection.

Written independently of the C++ library; used to produce the golden
fixtures under tests/data and by gradient exporters.
"""

import json
import struct

import numpy as np

MASK = (1 << 64) - 1


def mix64(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK
    return x ^ (x >> 31)


def hash_words(words):
    h = 0
    for w in words:
        h = mix64(h ^ (w & MASK))
    return h


def sign_matrix(seed, layer, d, p):
    """p x d matrix of +-1 for one layer."""
    s = np.empty((p, d))
    for c in range(d):
        for r in range(p):
            word = hash_words([seed, layer, c, r // 64])
            s[r, c] = -1.0 if (word >> (r % 64)) & 1 else 1.0
    return s


def allocate(widths, total):
    dims = [max(1, min(w, total * w // sum(widths))) for w in widths]
    while sum(dims) > total:
        i = max(range(len(dims)), key=lambda j: (dims[j], -j))
        dims[i] -= 1
    return dims


def project(values, segments, dims, seed):
    out, off = [], 0
    for layer, ((_, width), p) in enumerate(zip(segments, dims)):
        block = values[:, off:off + width].astype(np.float64)
        out.append(block @ sign_matrix(seed, layer, width, p).T / np.sqrt(p))
        off += width
    return np.hstack(out)


def write(path, ids, values, segments, normalized=False):
    meta = json.dumps({"ids": list(ids),
                       "layer_segments": [[n, w] for n, w in segments]},
                      separators=(",", ":")).encode()
    values = np.ascontiguousarray(values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"GRDM")
        f.write(struct.pack("<HHI", 1, 1 if normalized else 0, len(meta)))
        f.write(meta)
        f.write(struct.pack("<QQ", *values.shape))
        f.write(values.tobytes())


def read(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != b"GRDM":
        raise ValueError("bad magic")
    version, flags, meta_len = struct.unpack_from("<HHI", data, 4)
    if version != 1:
        raise ValueError("unsupported version %d" % version)
    meta = json.loads(data[12:12 + meta_len])
    n, dim = struct.unpack_from("<QQ", data, 12 + meta_len)
    start = 12 + meta_len + 16
    values = np.frombuffer(data, dtype="<f4", count=n * dim, offset=start)
    if start + 4 * n * dim != len(data):
        raise ValueError("size mismatch")
    return (meta["ids"], values.reshape(n, dim),
            [tuple(s) for s in meta["layer_segments"]], bool(flags & 1))
