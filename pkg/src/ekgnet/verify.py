"""Self-checks: oracle comparisons, gradient checks and property tests.

Each suite returns a list of :class:`Case` records carrying the measured
error, the tolerance and enough input description to reproduce a failure.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import functional as F
from .conv import ConvSpec, conv3d, conv3d_forward, conv3d_naive
from .densenet import ArchConfig, build_model
from .expert import ExpertConv3d, dynamic_conv_per_sample_oracle
from .hsi import HsiCube, largest_remainder, pad_and_extract, stratified_split
from .mapping import MappingNetwork
from .tensor import Tensor, backward, no_grad, reset_tape
from .trainer import ConfusionMatrix, metrics


@dataclass
class Case:
    suite: str
    name: str
    passed: bool
    max_abs: float
    tol: float
    rel: float = float("nan")
    inputs: dict = field(default_factory=dict)


def _diff(a, b) -> tuple[float, float]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = np.abs(a - b)
    mx = float(d.max()) if d.size else 0.0
    scale = float(np.abs(b).max()) if b.size else 0.0
    return mx, mx / max(scale, 1e-300)


# ----------------------------------------------------------------------
# Finite differences
# ----------------------------------------------------------------------
def grad_check(loss_fn, tensors, h: float = 1e-4, max_entries: int | None = None, seed: int = 0):
    """Compare analytic and central-difference gradients of ``loss_fn()``.

    ``loss_fn`` must rebuild a scalar loss from the leaf ``tensors`` on each
    call.  Large tensors are subsampled to ``max_entries`` coordinates.
    Returns ``(relative error, max abs diff)`` where the relative error is
    ``||g_a - g_n|| / max(||g_a||, ||g_n||)`` over the checked coordinates.
    """
    rng = np.random.default_rng(seed)
    reset_tape()
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    analytic, numeric = [], []
    for t in tensors:
        g = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
            flat[i] = orig
            numeric.append((fp - fm) / (2 * h))
            analytic.append(g.reshape(-1)[i])
    a = np.array(analytic)
    n = np.array(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
    return float(np.linalg.norm(a - n) / denom), float(np.abs(a - n).max())


def _projection_loss(out: Tensor, proj: np.ndarray) -> Tensor:
    return (out * Tensor(proj)).sum()


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


# ----------------------------------------------------------------------
# Suites
# ----------------------------------------------------------------------
def _random_conv_spec(rng):
    groups = int(rng.choice([1, 2]))
    cin = groups * int(rng.integers(1, 3))
    cout = groups * int(rng.integers(1, 3))
    return ConvSpec(cin, cout, kernel_size=tuple(int(k) for k in rng.integers(1, 4, 3)),
                    stride=tuple(int(s) for s in rng.integers(1, 3, 3)),
                    padding=tuple(int(p) for p in rng.integers(0, 2, 3)),
                    dilation=tuple(int(d) for d in rng.integers(1, 3, 3)), groups=groups)


def conv_oracle(draws: int = 50, seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(draws):
        while True:
            spec = _random_conv_spec(rng)
            size = tuple(int(s) for s in rng.integers(3, 7, 3))
            try:
                spec.output_size(size)
                break
            except ValueError:
                continue
        bsz = int(rng.integers(1, 3))
        x = rng.standard_normal((bsz, spec.in_channels) + size)
        w = rng.standard_normal(spec.weight_shape)
        b = rng.standard_normal(spec.out_channels)
        ref = conv3d_naive(x, w, b, spec)
        for dt, tol in ((np.float64, 1e-10), (np.float32, 1e-5)):
            got = conv3d_forward(x.astype(dt), w.astype(dt), b.astype(dt), spec)
            ref_dt = ref if dt is np.float64 else conv3d_naive(x.astype(dt), w.astype(dt), b.astype(dt), spec)
            mx, rel = _diff(got, ref_dt)
            cases.append(Case("conv-oracle", f"draw{i}-{np.dtype(dt).name}", mx <= tol, mx, tol, rel,
                               {"seed": seed, "draw": i, "spec": repr(spec), "input": (bsz,) + size}))
    return cases


def dynamic_oracle(draws: int = 50, seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(draws):
        bsz = int(rng.integers(1, 5))
        k = int(rng.choice([1, 2, 4]))
        g = int(rng.choice([1, 2, 4]))
        s = int(rng.choice([1, 3]))
        spec = ConvSpec(g * int(rng.integers(1, 3)), g * int(rng.integers(1, 3)), s, padding=s // 2, groups=g)
        size = tuple(int(v) for v in rng.integers(3, 6, 3))
        x = rng.standard_normal((bsz, spec.in_channels) + size)
        logits = rng.standard_normal((bsz, k))
        alpha = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        layer = ExpertConv3d(spec, k, rng=rng, dtype=np.float64)
        layer.bias.data[...] = rng.standard_normal(layer.bias.shape)
        w, b = layer.weight.data.copy(), layer.bias.data.copy()
        ref = dynamic_conv_per_sample_oracle(x, alpha, w, b, spec)
        desc = {"seed": seed, "draw": i, "B": bsz, "K": k, "G": g, "S": s, "spec": repr(spec), "size": size}
        for dt, tol in ((np.float64, 1e-10), (np.float32, 1e-5)):
            layer.weight.data = w.astype(dt)
            layer.bias.data = b.astype(dt)
            with no_grad():
                got = layer.forward_with_alpha(Tensor(x, dtype=dt), Tensor(alpha, dtype=dt)).data
            mx, rel = _diff(got, ref)
            cases.append(Case("dynamic-oracle", f"draw{i}-{np.dtype(dt).name}", mx <= tol, mx, tol, rel, desc))
        # one-hot alpha must select the expert exactly
        j = int(rng.integers(k))
        onehot = np.zeros((bsz, k))
        onehot[:, j] = 1.0
        layer.weight.data, layer.bias.data = w, b
        with no_grad():
            got = layer.forward_with_alpha(Tensor(x), Tensor(onehot)).data
        static = conv3d_forward(x, w[j], b[j], spec)
        mx, rel = _diff(got, static)
        cases.append(Case("dynamic-oracle", f"draw{i}-onehot{j}", mx == 0.0, mx, 0.0, rel, desc))
    return cases


def _grad_cases(seed: int):
    """Yield ``(name, loss_fn, tensors, tol, max_entries)`` for each layer type."""
    rng = np.random.default_rng(seed)

    x = _leaf(rng, (3, 4))
    p = rng.standard_normal((3, 4))
    yield "gelu", lambda: _projection_loss(F.gelu(x), p), [x], 1e-4, None

    xb = _leaf(rng, (4, 3, 2, 2, 2))
    gamma = _leaf(rng, (3,))
    beta = _leaf(rng, (3,))
    state = F.BatchNormState(3, dtype=np.float64)
    p = rng.standard_normal((4, 3, 2, 2, 2))
    yield ("batch-norm", lambda: _projection_loss(F.batch_norm(xb, gamma, beta, state, True), p),
           [xb, gamma, beta], 1e-4, None)

    z = _leaf(rng, (3, 5))
    p = rng.standard_normal((3, 5))
    yield "softmax-temperature", lambda: _projection_loss(F.softmax_with_temperature(z, 2.0), p), [z], 1e-4, None

    zl = _leaf(rng, (4, 3))
    y = rng.integers(0, 3, 4)
    yield "cross-entropy", lambda: F.cross_entropy(zl, y), [zl], 1e-4, None

    for label, spec, size in (
        ("conv3d-direct", ConvSpec(2, 4, 3, padding=1, groups=2), (4, 4, 3)),
        ("conv3d-im2col", ConvSpec(2, 2, (2, 3, 2), stride=2, padding=1, dilation=(1, 1, 2), groups=1), (5, 4, 5)),
        ("conv3d-pointwise", ConvSpec(4, 2, 1, groups=2), (3, 2, 2)),
    ):
        xc = _leaf(rng, (2, spec.in_channels) + size)
        wc = _leaf(rng, spec.weight_shape)
        bc = _leaf(rng, (spec.out_channels,))
        out_shape = (2, spec.out_channels) + spec.output_size(size)
        pc = rng.standard_normal(out_shape)
        yield (label, (lambda xc=xc, wc=wc, bc=bc, spec=spec, pc=pc:
                       _projection_loss(conv3d(xc, wc, bc, spec), pc)), [xc, wc, bc], 1e-4, None)

    xp = _leaf(rng, (2, 2, 5, 3, 4))
    p = rng.standard_normal((2, 2, 3, 2, 2))
    yield "avg-pool-ceil", lambda: _projection_loss(F.avg_pool3d(xp, 2), p), [xp], 1e-4, None

    xg = _leaf(rng, (2, 3, 2, 2, 2))
    p = rng.standard_normal((2, 3, 1, 1, 1))
    yield "global-pool", lambda: _projection_loss(F.adaptive_avg_pool3d_to_unit(xg), p), [xg], 1e-4, None

    xl = _leaf(rng, (3, 5))
    wl = _leaf(rng, (2, 5))
    bl = _leaf(rng, (2,))
    p = rng.standard_normal((3, 2))
    yield "linear-head", lambda: _projection_loss(F.linear(xl, wl, bl), p), [xl, wl, bl], 1e-4, None

    # dynamic conv with external alpha: x, alpha, expert weights and biases
    spec = ConvSpec(4, 4, 3, padding=1, groups=2)
    layer = ExpertConv3d(spec, 3, rng=rng, dtype=np.float64)
    layer.bias.data[...] = rng.standard_normal(layer.bias.shape)
    xd = _leaf(rng, (2, 4, 3, 3, 3))
    al = _leaf(rng, (2, 3))
    p = rng.standard_normal((2, 4, 3, 3, 3))
    yield ("dynamic-conv", lambda: _projection_loss(layer.forward_with_alpha(xd, al), p),
           [xd, al, layer.weight, layer.bias], 1e-4, None)

    net = MappingNetwork(8, 4, rng=rng, dtype=np.float64, tau_start=2.0)
    net.tau = 2.0
    xm = _leaf(rng, (4, 8, 2, 2, 2))
    p = rng.standard_normal((4, 4))
    yield "mapping-network", lambda: _projection_loss(net(xm), p), [xm] + net.parameters(), 1e-4, None

    # expert layer driven by its own mapping network (alpha path included)
    full = ExpertConv3d(ConvSpec(4, 2, 3, padding=1, groups=2), 2, rng=rng, dtype=np.float64, tau_start=1.5)
    full.mapping.tau = 1.5
    full.bias.data[...] = rng.standard_normal(full.bias.shape)
    xf = _leaf(rng, (3, 4, 3, 3, 2))
    p = rng.standard_normal((3, 2, 3, 3, 2))
    yield "expert-conv-with-mapping", lambda: _projection_loss(full(xf), p), [xf] + full.parameters(), 1e-4, None

    cfg = ArchConfig(stages=(1, 1), k0=2, groups=2, experts=2, num_classes=3, patch=(5, 5, 6), dtype="float64")
    model = build_model(cfg, seed)
    model.set_temperature(1.0)
    xs = rng.standard_normal((3, 1, 6, 5, 5))
    ys = np.array([0, 1, 2])
    yield ("micro-model", lambda: F.cross_entropy(model(Tensor(xs)), ys), model.parameters(), 1e-3, 12)


def gradient_checks(seed: int = 0) -> list[Case]:
    cases = []
    for name, fn, tensors, tol, max_entries in _grad_cases(seed):
        rel, mx = grad_check(fn, tensors, max_entries=max_entries, seed=seed)
        cases.append(Case("grad-check", name, rel <= tol, mx, tol, rel, {"seed": seed, "h": 1e-4}))
    return cases


def softmax_properties(vectors: int = 100, seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)
    taus = np.array([0.1, 0.5, 1.0, 2.0, 5.0, 30.0, 100.0])
    cases = []
    for i in range(vectors):
        z = rng.standard_normal(int(rng.integers(2, 9))) * rng.uniform(0.5, 5.0)
        rows = np.stack([F.softmax_with_temperature(Tensor(z), t).data for t in taus])
        sum_err = float(np.abs(rows.sum(axis=1) - 1).max())
        positive = bool((rows > 0).all())
        argmax_ok = bool((rows.argmax(axis=1) == z.argmax()).all())
        peaks = rows.max(axis=1)
        monotone = bool((np.diff(peaks) <= 1e-15).all())
        ok = sum_err <= 1e-6 and positive and argmax_ok and monotone
        cases.append(Case("softmax-properties", f"vector{i}", ok, sum_err, 1e-6, inputs={
            "seed": seed, "vector": i, "positive": positive, "argmax_invariant": argmax_ok,
            "max_non_increasing": monotone}))
    return cases


def metrics_reference(counts) -> tuple[Fraction, Fraction, Fraction]:
    """Exact rational OA, AA (over present classes) and Kappa."""
    counts = [[int(v) for v in row] for row in counts]
    c = len(counts)
    n = sum(map(sum, counts))
    rows = [sum(r) for r in counts]
    cols = [sum(counts[i][j] for i in range(c)) for j in range(c)]
    po = Fraction(sum(counts[i][i] for i in range(c)), n)
    recalls = [Fraction(counts[i][i], rows[i]) for i in range(c) if rows[i]]
    aa = sum(recalls, Fraction(0)) / len(recalls)
    pe = Fraction(sum(r * k for r, k in zip(rows, cols)), n * n)
    kappa = Fraction(1) if pe == 1 else (po - pe) / (1 - pe)
    return po, aa, kappa


def metrics_oracle(matrices: int = 20, seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(matrices):
        c = int(rng.integers(2, 7))
        counts = rng.integers(0, 30, (c, c)) + np.diag(rng.integers(0, 60, c))
        got = metrics(ConfusionMatrix(c, counts))
        ref = metrics_reference(counts)
        mx = max(abs(g - float(r)) for g, r in zip((got.oa, got.aa, got.kappa), ref))
        cases.append(Case("metrics-oracle", f"matrix{i}", mx <= 1e-12, mx, 1e-12,
                          inputs={"seed": seed, "matrix": i, "classes": c}))
    diag = metrics(ConfusionMatrix(4, np.diag([5, 7, 1, 9])))
    exact = (diag.oa, diag.aa, diag.kappa) == (1.0, 1.0, 1.0)
    cases.append(Case("metrics-oracle", "diagonal", exact, 0.0 if exact else 1.0, 0.0))
    return cases


def _labels_cube(counts) -> HsiCube:
    n = sum(counts)
    labels = np.concatenate([np.full(k, c + 1) for c, k in enumerate(counts)]).reshape(1, n)
    return HsiCube(np.zeros((1, 1, n), dtype=np.float32), labels)


def split_properties(seed: int = 0) -> list[Case]:
    cases = []
    ds = pad_and_extract(_labels_cube([100, 100, 100]), 1)
    a = stratified_split(ds, (6, 1, 3), seed)
    b = stratified_split(ds, (6, 1, 3), seed)
    per_class = [[int(((a.labels == c) & (a.partition == s)).sum()) for s in range(3)] for c in range(3)]
    ok = all(row == [60, 10, 30] for row in per_class)
    cases.append(Case("split-properties", "6:1:3-of-100", ok, 0.0 if ok else 1.0, 0.0,
                      inputs={"seed": seed, "counts": per_class}))
    cover = bool(((a.partition >= 0) & (a.partition <= 2)).all())
    cases.append(Case("split-properties", "disjoint-exhaustive", cover, 0.0 if cover else 1.0, 0.0))
    same = bool(np.array_equal(a.partition, b.partition))
    cases.append(Case("split-properties", "seed-reproducible", same, 0.0 if same else 1.0, 0.0))

    rng = np.random.default_rng(seed)
    for i in range(10):
        sizes = [int(v) for v in rng.integers(3, 60, int(rng.integers(2, 5)))]
        ratios = tuple(int(v) for v in rng.integers(1, 8, 3))
        s = stratified_split(pad_and_extract(_labels_cube(sizes), 1), ratios, seed + i)
        worst = 0.0
        ok = True
        for c, n in enumerate(sizes):
            got = [int(((s.labels == c) & (s.partition == k)).sum()) for k in range(3)]
            ok &= got == largest_remainder(n, ratios) and sum(got) == n
            worst = max(worst, max(abs(g - n * r / sum(ratios)) for g, r in zip(got, ratios)))
        ok &= worst < 1.0
        cases.append(Case("split-properties", f"random{i}", ok, worst, 1.0,
                          inputs={"seed": seed + i, "sizes": sizes, "ratios": ratios}))
    return cases


SUITES = {
    "conv-oracle": conv_oracle,
    "dynamic-oracle": dynamic_oracle,
    "grad-check": gradient_checks,
    "softmax-properties": softmax_properties,
    "metrics-oracle": metrics_oracle,
    "split-properties": split_properties,
}


def run_suites(names=None, seed: int = 0) -> list[Case]:
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s): {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    cases = []
    for name in names:
        cases.extend(SUITES[name](seed=seed))
    return cases


def format_report(cases: list[Case]) -> str:
    lines = [f"{'suite':<20} {'case':<28} {'status':<6} {'max_abs':>11} {'rel':>11} {'tol':>9}"]
    for c in cases:
        lines.append(f"{c.suite:<20} {c.name:<28} {'PASS' if c.passed else 'FAIL':<6} "
                     f"{c.max_abs:11.3e} {c.rel:11.3e} {c.tol:9.1e}")
    failed = [c for c in cases if not c.passed]
    lines.append(f"{len(cases) - len(failed)}/{len(cases)} checks passed")
    for c in failed:
        lines.append(f"FAILED {c.suite}/{c.name}: inputs={c.inputs}")
    return "\n".join(lines)
