"""Exact factor constructions used to test assembly without a rank search."""

import numpy as np


def exact_cp_factors(kernel):
    """Rank C*kH*kW CP factors reconstructing `kernel` exactly: one basis
    component per (input channel, tap) with the output column carrying the
    kernel values."""
    o, c, k1, k2 = kernel.shape
    rank = c * k1 * k2
    vo = np.zeros((o, rank), dtype=np.float32)
    vc = np.zeros((c, rank), dtype=np.float32)
    vh = np.zeros((k1, rank), dtype=np.float32)
    vw = np.zeros((k2, rank), dtype=np.float32)
    r = 0
    for ci in range(c):
        for a in range(k1):
            for b in range(k2):
                vc[ci, r] = 1.0
                vh[a, r] = 1.0
                vw[b, r] = 1.0
                vo[:, r] = kernel[:, ci, a, b]
                r += 1
    return [vo, vc, vh, vw]


def exact_tt_cores(kernel):
    """Full-bond-rank TT cores of the (O, kH*kW, C) view via two SVD splits,
    in the stored shapes (O,R1), (R1,kH,kW,R2), (C,R2)."""
    o, c, k1, k2 = kernel.shape
    t3 = kernel.transpose(0, 2, 3, 1).reshape(o, k1 * k2 * c)
    u1, s1, v1 = np.linalg.svd(t3, full_matrices=False)
    r1 = len(s1)
    g1 = u1.astype(np.float32)
    rest = (s1[:, None] * v1).reshape(r1 * k1 * k2, c)
    u2, s2, v2 = np.linalg.svd(rest, full_matrices=False)
    r2 = len(s2)
    g2 = u2.reshape(r1, k1, k2, r2).astype(np.float32)
    g3 = (s2[:, None] * v2).T.astype(np.float32)
    return [g1, g2, g3]


def compressed_entries(factor_lists, kind):
    """Archive (name, tensor) pairs in the compressed naming convention."""
    entries = []
    for i, factors in enumerate(factor_lists):
        if kind == "cp":
            for n, mat in enumerate(factors):
                entries.append((f"layer{i}.factor{n}", mat))
        else:
            for k, core in enumerate(factors):
                entries.append((f"layer{i}.core{k}", core))
    return entries
