"""Straight-line, loop-by-loop reference for the blend pipeline.

Deliberately shares no code with :mod:`tfblender.blender` or
:mod:`tfblender.tensor`: everything is scalar Python arithmetic over nested
index loops.  Only meant for tiny inputs.
"""

import math


def naive_blend(current, members, layers, delta=0.7, variant="concat4",
                enable_tr=True, enable_fa=True, enable_fb=True):
    """Reference blend.

    ``current``: ``[C][H][W]`` nested sequence; ``members``: list of those
    (the current frame included if it should take part); ``layers``: list
    of ``(weights[out][in][k][k], bias[out])``.  Returns a ``[C][H][W]``
    nested list of floats.
    """
    C = len(current)
    H = len(current[0])
    W = len(current[0][0])
    P = len(members)

    def relation(a, b):
        out = []
        for key in {
            "concat2": "ij", "diff": "d", "sum": "s", "concat2_plus_sum": "ijs",
            "diff_plus_sum": "ds", "concat3": "ijd", "concat4": "ijdr",
        }[variant]:
            for c in range(C):
                plane = []
                for y in range(H):
                    row = []
                    for x in range(W):
                        ai = float(a[c][y][x])
                        bj = float(b[c][y][x])
                        if key == "i":
                            row.append(ai)
                        elif key == "j":
                            row.append(bj)
                        elif key == "d":
                            row.append(ai - bj)
                        elif key == "r":
                            row.append(bj - ai)
                        else:
                            row.append(ai + bj)
                    plane.append(row)
                out.append(plane)
        return out

    def conv(inp, weights, bias):
        cout = len(weights)
        cin = len(weights[0])
        k = len(weights[0][0])
        pad = k // 2
        out = []
        for o in range(cout):
            plane = []
            for y in range(H):
                row = []
                for x in range(W):
                    acc = float(bias[o])
                    for c in range(cin):
                        for i in range(k):
                            for j in range(k):
                                yy = y + i - pad
                                xx = x + j - pad
                                if 0 <= yy < H and 0 <= xx < W:
                                    acc += float(weights[o][c][i][j]) * inp[c][yy][xx]
                    row.append(acc)
                plane.append(row)
            out.append(plane)
        return out

    def weight(a, b):
        h = relation(a, b)
        for n, (w, bias) in enumerate(layers):
            h = conv(h, w, bias)
            if n < len(layers) - 1:
                h = [[[v if v > 0 else 0.0 for v in row] for row in plane] for plane in h]
        if not enable_tr:
            total = 0.0
            for plane in h:
                for row in plane:
                    for v in row:
                        total += v
            m = total / (C * H * W)
            h = [[[m] * W for _ in range(H)] for _ in range(C)]
        return h

    deltas = [[[0.0] * W for _ in range(H)] for _ in range(C)]
    for j in range(P):
        fj = members[j]
        w_ij = weight(current, fj)
        if enable_fa and P > 1:
            adj_sum = [[[0.0] * W for _ in range(H)] for _ in range(C)]
            for m in range(P):
                if m == j:
                    continue
                w_jm = weight(fj, members[m])
                for c in range(C):
                    for y in range(H):
                        for x in range(W):
                            adj_sum[c][y][x] += w_jm[c][y][x]
            adjusted = [[[adj_sum[c][y][x] * float(fj[c][y][x]) for x in range(W)]
                         for y in range(H)] for c in range(C)]
        else:
            adjusted = [[[float(fj[c][y][x]) for x in range(W)] for y in range(H)] for c in range(C)]

        if enable_fb:
            w_hat = [[[v if v > 0 else 0.0 for v in row] for row in plane] for plane in w_ij]
            f_hat = [[[0.0] * W for _ in range(H)] for _ in range(C)]
            for y in range(H):
                for x in range(W):
                    top = max(adjusted[c][y][x] for c in range(C))
                    exps = [math.exp(adjusted[c][y][x] - top) for c in range(C)]
                    z = sum(exps)
                    for c in range(C):
                        f_hat[c][y][x] = exps[c] / z
            dot = 0.0
            n1 = 0.0
            n2 = 0.0
            for c in range(C):
                for y in range(H):
                    for x in range(W):
                        u = f_hat[c][y][x]
                        v = float(current[c][y][x])
                        dot += u * v
                        n1 += u * u
                        n2 += v * v
            if n1 > 0 and n2 > 0 and dot / math.sqrt(n1 * n2) > delta:
                continue
            factor_w, factor_f = w_hat, f_hat
        else:
            factor_w, factor_f = w_ij, adjusted

        for c in range(C):
            for y in range(H):
                for x in range(W):
                    deltas[c][y][x] += factor_w[c][y][x] * factor_f[c][y][x]
    return deltas
