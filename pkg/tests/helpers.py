"""Shared test utilities: finite-difference gradient checking with
kink-aware input sampling, and tiny PGM/PPM parsing."""

from __future__ import annotations

import os

import numpy as np

from splitlab import autograd as ag
from splitlab.autograd import Tensor

RTOL = 1e-3
ATOL = 1e-4


def fd_check(f, x: np.ndarray, h: float, rtol: float = RTOL, atol: float = ATOL):
    """Assert backward() agrees with central finite differences on f."""
    xt = Tensor(x, requires_grad=True)
    out = f(xt)
    ag.backward(out)
    got = xt.grad
    want = ag.finite_diff_grad(f, Tensor(x), h).data
    np.testing.assert_allclose(got, want, rtol=rtol, atol=atol)


def relu_safe(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    """Values bounded away from zero so finite differences never cross the
    ReLU kink."""
    x = rng.uniform(margin, 1.0, size=shape).astype(np.float32)
    sign = rng.choice([-1.0, 1.0], size=shape).astype(np.float32)
    return x * sign


def pool_safe(rng: np.random.Generator, shape, gap: float = 0.2) -> np.ndarray:
    """(N,C,H,W) values whose 2x2 window maxima are unique by at least
    ``gap``, so finite differences never flip the argmax. The winning slot
    of each window is lifted directly rather than rejection-sampled."""
    n, c, h, w = shape
    x = rng.uniform(0.0, 0.8, size=shape).astype(np.float32)
    win = np.ascontiguousarray(
        x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    bump = np.zeros_like(win)
    np.put_along_axis(bump, idx[..., None], np.float32(gap), axis=-1)
    win = win + bump
    return np.ascontiguousarray(
        win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(shape)


def net_safe_input(stack, shape, rng: np.random.Generator,
                   margin: float = 0.03, tries: int = 200) -> np.ndarray:
    """Sample an input whose ReLU pre-activations and pooling window gaps
    stay clear of the finite-difference step."""
    from splitlab.layers import MaxPool2x2, ReLU

    for _ in range(tries):
        x = rng.uniform(0.0, 1.0, size=shape).astype(np.float32)
        cur = Tensor(x)
        ok = True
        for layer in stack.layers:
            if isinstance(layer, ReLU) and np.any(np.abs(cur.data) < margin):
                ok = False
                break
            if isinstance(layer, MaxPool2x2):
                n, c, h, w = cur.data.shape
                win = cur.data.reshape(n, c, h // 2, 2, w // 2, 2)
                win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
                top2 = np.sort(win, axis=-1)[..., -2:]
                if np.any(top2[..., 1] - top2[..., 0] < 2 * margin):
                    ok = False
                    break
            cur = layer.forward(cur)
        if ok:
            return x
    raise AssertionError("could not sample a kink-safe input")


def mnist_dir() -> str | None:
    """Path to local MNIST IDX files, or None when absent (skip gate)."""
    root = os.environ.get("SPLITLAB_DATA_DIR", "data")
    path = os.path.join(root, "mnist")
    needed = [
        "train-images-idx3-ubyte", "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte",
    ]
    if all(os.path.exists(os.path.join(path, f)) for f in needed):
        return path
    return None


def params_equal(a, b) -> bool:
    return all(
        np.array_equal(pa.data, pb.data) for pa, pb in zip(a.params(), b.params())
    )


def max_param_diff(a, b) -> float:
    return max(
        float(np.max(np.abs(pa.data.astype(np.float64) - pb.data)))
        for pa, pb in zip(a.params(), b.params())
    )


def gradcheck_suite(n_cases: int, seed: int = 0) -> int:
    """Randomized analytic-vs-numeric gradient comparison across every op
    kind; raises on the first disagreement, returns the case count."""
    rng = np.random.default_rng(seed)
    kinds = ("relu", "sigmoid", "softmax", "linear", "conv", "pool",
             "mse", "xent", "tv")
    done = 0
    while done < n_cases:
        kind = kinds[done % len(kinds)]
        if kind == "relu":
            x = relu_safe(rng, (int(rng.integers(1, 5)), int(rng.integers(2, 9))))
            r = Tensor(rng.uniform(size=x.shape).astype(np.float32))
            fd_check(lambda t: ag.mse_loss(ag.relu(t), r), x, h=1e-2)
        elif kind == "sigmoid":
            x = rng.uniform(-2, 2, size=(int(rng.integers(1, 5)),
                                         int(rng.integers(2, 9)))).astype(np.float32)
            fd_check(lambda t: ag.tsum(ag.sigmoid(t)), x, h=1e-2)
        elif kind == "softmax":
            n = int(rng.integers(1, 5))
            x = rng.uniform(-1, 1, size=(n, 10)).astype(np.float32)
            r = Tensor(rng.uniform(size=(n, 10)).astype(np.float32))
            fd_check(lambda t: ag.mse_loss(ag.softmax(t), r), x, h=1e-2)
        elif kind == "linear":
            n, d, u = (int(rng.integers(1, 5)) for _ in range(3))
            d, u = d + 1, u + 1
            x = rng.uniform(-1, 1, size=(n, d)).astype(np.float32)
            w = rng.uniform(-0.5, 0.5, size=(u, d)).astype(np.float32)
            b = rng.uniform(-0.5, 0.5, size=u).astype(np.float32)
            r = Tensor(rng.uniform(size=(n, u)).astype(np.float32))
            which = done % 3
            if which == 0:
                fd_check(lambda t: ag.mse_loss(
                    ag.linear(t, Tensor(w), Tensor(b)), r), x, h=1e-2)
            elif which == 1:
                fd_check(lambda t: ag.mse_loss(
                    ag.linear(Tensor(x), t, Tensor(b)), r), w, h=1e-2)
            else:
                fd_check(lambda t: ag.mse_loss(
                    ag.linear(Tensor(x), Tensor(w), t), r), b, h=1e-2)
        elif kind == "conv":
            n, ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 3)), \
                int(rng.integers(1, 3))
            hw = int(rng.integers(3, 7))
            x = rng.uniform(-1, 1, size=(n, ci, hw, hw)).astype(np.float32)
            w = rng.uniform(-0.3, 0.3, size=(co, ci, 3, 3)).astype(np.float32)
            b = rng.uniform(-0.3, 0.3, size=co).astype(np.float32)
            r = Tensor(rng.uniform(size=(n, co, hw, hw)).astype(np.float32))
            which = done % 3
            if which == 0:
                fd_check(lambda t: ag.mse_loss(
                    ag.conv2d(t, Tensor(w), Tensor(b), 1), r), x, h=1e-2)
            elif which == 1:
                fd_check(lambda t: ag.mse_loss(
                    ag.conv2d(Tensor(x), t, Tensor(b), 1), r), w, h=1e-2)
            else:
                fd_check(lambda t: ag.mse_loss(
                    ag.conv2d(Tensor(x), Tensor(w), t, 1), r), b, h=1e-2)
        elif kind == "pool":
            shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)),
                     2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4)))
            x = pool_safe(rng, shape)
            r = Tensor(rng.uniform(
                size=(shape[0], shape[1], shape[2] // 2, shape[3] // 2)
            ).astype(np.float32))
            fd_check(lambda t: ag.mse_loss(ag.maxpool2x2(t), r), x, h=1e-2)
        elif kind == "mse":
            shape = (int(rng.integers(1, 5)), int(rng.integers(1, 9)))
            x = rng.uniform(-1, 1, size=shape).astype(np.float32)
            r = Tensor(rng.uniform(-1, 1, size=shape).astype(np.float32))
            fd_check(lambda t: ag.mse_loss(t, r), x, h=1e-2)
        elif kind == "xent":
            n = int(rng.integers(1, 5))
            x = rng.uniform(-1, 1, size=(n, 10)).astype(np.float32)
            y = rng.integers(0, 10, size=n)
            fd_check(lambda t: ag.cross_entropy(ag.softmax(t), y), x, h=1e-2)
        else:  # tv
            hw = int(rng.integers(2, 6))
            # Monotone in both directions keeps every local difference
            # bounded away from zero, where the sqrt is well-conditioned.
            x = np.cumsum(np.cumsum(
                rng.uniform(0.1, 0.4, size=(1, 1, hw, hw)), axis=2), axis=3)
            x = x.astype(np.float32)
            # Mean-scaled so the oracle's f32 evaluation noise stays well
            # below the comparison tolerance.
            fd_check(lambda t: ag.scale(ag.tv_penalty(t, eps=1e-4), 1.0 / x.size),
                     x, h=3e-3)
        done += 1
    return done


def parse_pnm(path: str) -> np.ndarray:
    """Read back a binary PGM/PPM written by the harness; returns (C,H,W)
    floats in [0,1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    assert maxval == 255
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos)
    if magic == b"P5":
        return data.reshape(1, h, w).astype(np.float32) / 255.0
    assert magic == b"P6"
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0
