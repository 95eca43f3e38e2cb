"""Slow reference implementations the fast code is checked against.

Everything here trades speed for obviousness: plain Python loops,
one arithmetic step per line, no numpy vectorization tricks.
"""

import numpy as np

from mhforge.netspec import validate_shapes
from mhforge.tensor_ops import Tensor


def naive_conv2d(x, w, b, stride, pad):
    """Six nested loops, nothing else. x:(N,C,H,W), w:(Cout,Cin,K,K), b:(Cout,)."""
    n, c, h, wd = x.shape
    cout, cin, k, _ = w.shape
    assert c == cin
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    hout = (h + 2 * pad - k) // stride + 1
    wout = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, hout, wout))
    for ni in range(n):
        for co in range(cout):
            for oh in range(hout):
                for ow in range(wout):
                    acc = b[co]
                    for ci in range(cin):
                        for kh in range(k):
                            for kw in range(k):
                                acc += xp[ni, ci, oh * stride + kh, ow * stride + kw] * w[co, ci, kh, kw]
                    out[ni, co, oh, ow] = acc
    return out


def naive_fc(x, w, b):
    """x:(N,D), w:(F,D), b:(F,) -> (N,F) by scalar loops."""
    n, d = x.shape
    f = w.shape[0]
    out = np.zeros((n, f))
    for ni in range(n):
        for fi in range(f):
            acc = b[fi]
            for di in range(d):
                acc += x[ni, di] * w[fi, di]
            out[ni, fi] = acc
    return out


def finite_diff(fn, array, eps=1e-6):
    """Central-difference gradient of scalar fn() w.r.t. every element of array.

    Perturbs in place and restores, so fn may close over the array.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_err(analytic, numeric):
    """max |a - n| / max(1, |a|, |n|) over all elements."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def rand_tensor(rng, shape, lo=-1.0, hi=1.0, avoid_zero=0.0):
    """Uniform random Tensor; with avoid_zero > 0, values near 0 are pushed away (for relu kinks)."""
    a = rng.uniform(lo, hi, shape)
    if avoid_zero > 0.0:
        a = np.where(np.abs(a) < avoid_zero, np.sign(a) * avoid_zero + (a == 0) * avoid_zero, a)
    return Tensor(a)


def counting_conv2d(x, w, b, stride, pad):
    """naive_conv2d with an explicit multiply counter; returns (out, multiplies)."""
    n, c, h, wd = x.shape
    cout, cin, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    hout = (h + 2 * pad - k) // stride + 1
    wout = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, hout, wout))
    mults = 0
    for ni in range(n):
        for co in range(cout):
            for oh in range(hout):
                for ow in range(wout):
                    acc = b[co]
                    for ci in range(cin):
                        for kh in range(k):
                            for kw in range(k):
                                acc += xp[ni, ci, oh * stride + kh, ow * stride + kw] * w[co, ci, kh, kw]
                                mults += 1
                    out[ni, co, oh, ow] = acc
    return out, mults


def counting_fc(x, w, b):
    n, d = x.shape
    f = w.shape[0]
    out = np.zeros((n, f))
    mults = 0
    for ni in range(n):
        for fi in range(f):
            acc = b[fi]
            for di in range(d):
                acc += x[ni, di] * w[fi, di]
                mults += 1
            out[ni, fi] = acc
    return out, mults


def instrumented_forward_macc(spec, bundle, trained_only=False):
    """Runs one single-image forward with scalar loops, counting every multiply.

    Independent of the analytic cost formulas: the count comes from the
    innermost loop bodies actually executing.
    """
    shapes = validate_shapes(spec)
    rng = np.random.default_rng(0)
    c, h, w = spec.input_shape
    acts = {}
    total = 0
    for lay in spec.layers:
        if lay.kind == "input":
            acts[lay.name] = rng.uniform(-1, 1, (1, c, h, w))
        elif lay.kind == "conv":
            p = bundle.params[lay.name]
            out, mults = counting_conv2d(acts[lay.inputs[0]], p.weights.data, p.bias, lay.stride, lay.pad)
            acts[lay.name] = out
            if not (trained_only and lay.frozen):
                total += mults
        elif lay.kind == "relu":
            acts[lay.name] = np.maximum(acts[lay.inputs[0]], 0.0)
        elif lay.kind == "maxpool":
            x = acts[lay.inputs[0]]
            _, cc, hh, ww = x.shape
            k, s = lay.kernel, lay.stride
            ho, wo = (hh - k) // s + 1, (ww - k) // s + 1
            out = np.zeros((1, cc, ho, wo))
            for ci in range(cc):
                for oh in range(ho):
                    for ow in range(wo):
                        out[0, ci, oh, ow] = x[0, ci, oh * s : oh * s + k, ow * s : ow * s + k].max()
            acts[lay.name] = out
        elif lay.kind == "gavgpool":
            acts[lay.name] = acts[lay.inputs[0]].mean(axis=(2, 3), keepdims=True)
        elif lay.kind == "fc":
            p = bundle.params[lay.name]
            x = acts[lay.inputs[0]].reshape(1, -1)
            out, mults = counting_fc(x, p.weights.data.reshape(p.weights.shape[0], -1), p.bias)
            acts[lay.name] = out.reshape(1, -1, 1, 1)
            if not (trained_only and lay.frozen):
                total += mults
    return total


def random_spec_text(rng, max_mid_layers=4):
    """Emits a small, always-valid network description with random topology.

    Tracks shapes while generating so every conv/pool fits its input. Ends in
    gavgpool plus one or two tagged heads with loss and accuracy layers.
    """
    c = int(rng.integers(1, 4))
    h = int(rng.integers(6, 13))
    w = int(rng.integers(6, 13))
    lines = [f"input name=data shape={c}x{h}x{w}"]
    prev = "data"
    idx = 0
    for _ in range(int(rng.integers(0, max_mid_layers + 1))):
        idx += 1
        kind = rng.choice(["conv", "relu", "maxpool"])
        if kind == "relu":
            lines.append(f"relu name=l{idx} in={prev}")
        elif kind == "conv":
            k = int(rng.integers(1, min(h, w, 4) + 1))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            cout = int(rng.integers(1, 5))
            ho = (h + 2 * pad - k) // stride + 1
            wo = (w + 2 * pad - k) // stride + 1
            if ho < 1 or wo < 1:
                continue
            frozen = " frozen=true" if rng.random() < 0.3 else ""
            lines.append(f"conv name=l{idx} in={prev} out_channels={cout} kernel={k} stride={stride} pad={pad}{frozen}")
            c, h, w = cout, ho, wo
        else:
            k = int(rng.integers(1, min(h, w, 3) + 1))
            stride = int(rng.integers(1, 3))
            ho = (h - k) // stride + 1
            wo = (w - k) // stride + 1
            if ho < 1 or wo < 1:
                continue
            lines.append(f"maxpool name=l{idx} in={prev} kernel={k} stride={stride}")
            h, w = ho, wo
        prev = f"l{idx}"
    lines.append(f"gavgpool name=feat in={prev}")
    n_heads = int(rng.integers(1, 3))
    for hi_ in range(n_heads):
        tag = f"cat{hi_}"
        out = int(rng.integers(2, 7))
        frozen = " frozen=true" if rng.random() < 0.2 else ""
        lines.append(f"fc name=head_{tag} in=feat out={out} in_features={c} head={tag}{frozen}")
        lines.append(f"loss name=loss_{tag} in=head_{tag} label={tag} weight={float(rng.integers(1, 4))}")
        lines.append(f"accuracy name=acc_{tag} in=head_{tag} label={tag}")
    return "\n".join(lines) + "\n"
