"""Invariant suite behind ``repq verify``.

Each check returns ``(passed, detail)``.  ``sabotage`` patches one library
function with a deliberately wrong version so the suite can be seen to fail.
"""

from __future__ import annotations

import contextlib
from typing import Callable
from unittest import mock

import numpy as np

from . import batchnorm as bn
from . import quant as Q
from . import reparam as R
from . import tensor as T
from .tensor import Tensor

CheckResult = tuple[bool, str]


def _rand(rng, shape, dtype=np.float64, requires_grad=False):
    return Tensor(rng.normal(size=shape).astype(dtype), requires_grad=requires_grad)


def check_conv_oracle(n: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        B, cin, cout = rng.integers(1, 5, 3)
        kh, kw = rng.integers(1, 4, 2)
        H, D = kh + rng.integers(0, 4), kw + rng.integers(0, 4)
        x, w = _rand(rng, (B, H, D, cin)), _rand(rng, (kh, kw, cin, cout))
        worst = max(worst, float(np.max(np.abs(T.conv2d(x, w).data - T.conv_as_matmul_sum(x, w)))))
    return worst <= 1e-12, f"max |conv2d - sliced matmul sum| = {worst:.2e} over {n} cases (tol 1e-12)"


def _random_bn(rng, c, dtype=np.float64):
    st = bn.BNState.create(c, dtype=dtype)
    st.gamma.data[:] = rng.uniform(0.5, 2.0, c)
    st.beta.data[:] = rng.normal(size=c)
    st.running_mean[:] = rng.normal(size=c)
    st.running_var[:] = rng.uniform(0.5, 2.0, c)
    return st


def check_bn_fold(n: int = 100, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n):
        B, cin, cout = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 5)
        kh, kw = rng.integers(1, 4, 2)
        x = _rand(rng, (B, kh + 3, kw + 3, cin))
        w = _rand(rng, (kh, kw, cin, cout))
        if k % 4 == 0:
            # shrink one output channel so its batch variance is ~1e-6
            w.data[..., 0] *= 1e-3 / max(1e-12, float(np.std(T.conv2d(x, w).data[..., 0])))
        st = _random_bn(rng, cout)
        for mode in ("train", "eval"):
            y = T.conv2d(x, w)
            ref = bn.bn_forward(y, st, mode, update=False)
            mu, var = bn.batch_stats(y) if mode == "train" else (st.running_mean, st.running_var)
            M, b = bn.bn_fold(w, mu, var, st)
            worst = max(worst, float(np.max(np.abs(ref.data - (T.conv2d(x, M) + b).data))))
    return worst <= 1e-9, f"max |BN(conv) - (conv(x, M) + b)| = {worst:.2e} (tol 1e-9)"


def _randomize_block(block: R.ReparamBlock, rng) -> None:
    for _, st in block.bn_states():
        st.gamma.data[:] = rng.uniform(0.5, 1.5, st.channels)
        st.beta.data[:] = rng.normal(size=st.channels)


def check_merged_equivalence(seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    details, ok = [], True
    for topo in R.TOPOLOGIES:
        for dtype, tol in ((np.float64, 1e-9), (np.float32, 1e-4)):
            block = R.make_block(topo, 3, 3, rng, dtype=dtype)
            _randomize_block(block, rng)
            x = _rand(rng, (2, 6, 6, 3), dtype)
            for mode in ("train", "eval"):
                ref = R.block_forward_expanded(block, x, mode, update=False)
                M, b = R.merged_weight(block, x, mode, update=False)
                err = float(np.max(np.abs(ref.data - (T.conv2d(x, M, "same") + b).data)))
                ok &= err <= tol
                details.append(f"{topo}/{np.dtype(dtype).name}/{mode}={err:.1e}")
    return ok, "; ".join(details)


def check_gradient_equivalence(seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for topo in R.TOPOLOGIES:
        block = R.make_block(topo, 3, 3, rng, dtype=np.float64)
        _randomize_block(block, rng)
        x = _rand(rng, (2, 5, 5, 3))
        target = rng.normal(size=(2, 5, 5, 3))
        grads = []
        for path in ("expanded", "merged"):
            for _, p in block.parameters():
                p.grad = None
            if path == "expanded":
                y = R.block_forward_expanded(block, x, "train", update=False)
            else:
                M, b = R.merged_weight(block, x, "train", update=False)
                y = T.conv2d(x, M, "same") + b
            T.sum_all(y * target).backward()
            grads.append([p.grad.copy() for _, p in block.parameters()])
        # relative to the block's largest gradient: some entries are exactly zero
        # in theory (a BN shift followed by another BN) and only carry rounding noise
        scale = max(float(np.max(np.abs(g))) for g in grads[0])
        for ge, gm in zip(*grads):
            worst = max(worst, float(np.max(np.abs(ge - gm))) / scale)
    return worst <= 1e-3, f"max relative gradient gap expanded vs merged = {worst:.2e} (tol 1e-3)"


def diagonal_covariance_input(B: int, H: int, D: int, C: int, rng) -> Tensor:
    """Input whose channels have exactly zero sample covariance.

    Columns of a Sylvester-Hadamard matrix (other than the constant one) are
    zero-mean and mutually orthogonal; each is given a random scale.
    """
    n = B * H * D
    if n & (n - 1) or C >= n:
        raise ValueError("B*H*D must be a power of two larger than C")
    had = np.ones((1, 1))
    while had.shape[0] < n:
        had = np.kron(had, np.array([[1.0, 1.0], [1.0, -1.0]]))
    cols = had[:, 1:C + 1] * rng.uniform(0.5, 3.0, C)
    return Tensor(cols.reshape(B, H, D, C))


def check_bnest_regimes(seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    errs = {}
    x = _rand(rng, (3, 5, 5, 4))
    w1 = _rand(rng, (1, 1, 4, 6))
    errs["mean 1x1"] = np.max(np.abs(bn.bn_est_mean(x, w1).data - T.mean_bhd(T.conv2d(x, w1)).data))
    c = Tensor(np.full((2, 6, 6, 4), 1.7))
    w3 = _rand(rng, (3, 3, 4, 5))
    errs["mean const"] = np.max(np.abs(bn.bn_est_mean(c, w3).data - T.mean_bhd(T.conv2d(c, w3)).data))
    xd = diagonal_covariance_input(4, 4, 4, 4, rng)
    errs["var 1x1 diag"] = np.max(np.abs(bn.bn_est_var(xd, w1).data - T.var_bhd(T.conv2d(xd, w1)).data))
    nonneg = all(np.all(bn.bn_est_var(_rand(rng, (2, 4, 4, 3)), _rand(rng, (3, 3, 3, 2))).data >= 0)
                 for _ in range(50))
    ok = all(e <= 1e-9 for e in errs.values()) and nonneg
    return ok, ", ".join(f"{k}={v:.1e}" for k, v in errs.items()) + f", var>=0: {nonneg}"


def _fd_check(fn: Callable[[], Tensor], params: list[Tensor], h: float = 1e-5,
              samples: int = 6, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        for idx in [tuple(rng.integers(0, n) for n in p.shape) for _ in range(samples)]:
            old = p.data[idx]
            p.data[idx] = old + h
            up = fn().item()
            p.data[idx] = old - h
            down = fn().item()
            p.data[idx] = old
            num = (up - down) / (2 * h)
            worst = max(worst, abs(num - analytic[idx]) / max(1.0, abs(num) + abs(analytic[idx])))
    return worst


def check_gradients(seed: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = _rand(rng, (2, 5, 5, 3), requires_grad=True)
    w = _rand(rng, (3, 3, 3, 4), requires_grad=True)
    # random projections: sum of squares of a BN output is nearly constant in x
    p_same, p_valid = Tensor(rng.normal(size=(2, 5, 5, 4))), Tensor(rng.normal(size=(2, 3, 3, 4)))
    p_vec = Tensor(rng.normal(size=(4,)))
    conv_err = _fd_check(lambda: T.sum_all(T.conv2d(x, w, "same") * p_same), [x, w])
    st = _random_bn(rng, 4)
    bn_err = _fd_check(lambda: T.sum_all(T.square(bn.bn_forward(T.conv2d(x, w), st, "train", update=False)
                                                  * p_valid)), [x, w, st.gamma, st.beta])
    est_err = _fd_check(lambda: T.sum_all(bn.bn_est_forward(x, w, st, "train", update=False)[1] * p_vec),
                        [x, w, st.gamma])
    ok = conv_err <= 1e-6 and bn_err <= 1e-6 and est_err <= 1e-6
    return ok, f"rel. FD error: conv {conv_err:.1e}, conv+BN {bn_err:.1e}, BN-estimate fold {est_err:.1e} (tol 1e-6)"


def enumerated_product_bits(a: int, b: int, signed: bool = False) -> int:
    """Brute force: smallest width holding every product of the two integer ranges."""
    ra = range(-(2 ** (a - 1)), 2 ** (a - 1)) if signed else range(2 ** a)
    rb = range(-(2 ** (b - 1)), 2 ** (b - 1)) if signed else range(2 ** b)
    prods = {i * j for i in ra for j in rb}
    n = 1
    while True:
        lo, hi = (-(2 ** (n - 1)), 2 ** (n - 1) - 1) if signed else (0, 2 ** n - 1)
        if lo <= min(prods) and max(prods) <= hi:
            return n
        n += 1


def check_product_bits() -> CheckResult:
    table = {b: Q.product_bits(b, b) for b in range(1, 9)}
    brute = {b: enumerated_product_bits(b, b) for b in range(1, 9)}
    signed_ok = all(Q.product_bits(a, b, True) == enumerated_product_bits(a, b, True)
                    for a in range(1, 6) for b in range(1, 6))
    # b = 1 gives products {0, 1}, one bit; from b = 2 on the width doubles
    ok = Q.product_bits(2, 2) == 4 and table == brute and signed_ok
    ok &= all(table[b] == 2 * b for b in range(2, 9))
    return ok, "product_bits(b, b) = " + ", ".join(f"{b}:{v}" for b, v in table.items())


def check_quantizer(n: int = 100_000, seed: int = 6) -> CheckResult:
    rng = np.random.default_rng(seed)
    problems = []
    for bits, signed in ((2, False), (4, True), (8, True), (3, False)):
        q = Q.QuantizerState(bits, signed, channel_axis=None)
        v = rng.normal(scale=2.0, size=n)
        Q.min_error_init(v, q)
        vt = Tensor(v, requires_grad=True)
        out = Q.quantize(vt, q)
        s = float(q.step.data)
        k = out.data / s
        if not np.allclose(k, np.round(k), atol=1e-9) or k.min() < q.qmin - 1e-9 or k.max() > q.qmax + 1e-9:
            problems.append(f"lattice {bits}b")
        if not np.array_equal(Q.quantize(Tensor(out.data), q).data, out.data):
            problems.append(f"idempotence {bits}b")
        order = np.argsort(v)
        if np.any(np.diff(out.data[order]) < 0):
            problems.append(f"monotonicity {bits}b")
        T.sum_all(out).backward()
        sat = (v / s > q.qmax) | (v / s < q.qmin)
        if np.any(vt.grad[sat] != 0):
            problems.append(f"saturation gradient {bits}b")
        cand = Q.grid_candidates(float(np.max(np.abs(v))), q.qmax if q.qmax > 0 else -q.qmin)
        errs = Q.reconstruction_error(v, cand, q.qmin, q.qmax)
        if Q.reconstruction_error(v, np.array([s]), q.qmin, q.qmax)[0] > errs.min():
            problems.append(f"MinError beaten {bits}b")
    return not problems, "all properties hold" if not problems else "failed: " + ", ".join(problems)


def estimate_cost_terms(B=2, H=8, cin=8, k=3, outs=(8, 16, 32), seed=7) -> dict:
    """Fit the estimator's multiply count as ``a*BHD*IN + c*Kh*Kw*IN*OUT + rest``.

    Counts are taken at two batch sizes and several OUT values.  If the OUT slope
    does not change with the batch size, no B*H*D*OUT term exists.
    """
    from .flops import stat_costs
    rng = np.random.default_rng(seed)
    counts = {}
    for b in (B, 2 * B):
        for out in outs:
            x, w = _rand(rng, (b, H, H, cin)), _rand(rng, (k, k, cin, out))
            counts[b, out] = stat_costs(x, w)
    slope = {b: [(counts[b, o2][1] - counts[b, o1][1]) / (o2 - o1) for o1, o2 in zip(outs, outs[1:])]
             for b in (B, 2 * B)}
    exact_slope = {b: (counts[b, outs[-1]][0] - counts[b, outs[0]][0]) / (outs[-1] - outs[0]) for b in (B, 2 * B)}
    return {"counts": counts, "est_slope": slope, "exact_slope": exact_slope, "weight_term": k * k * cin}


def check_complexity() -> CheckResult:
    t = estimate_cost_terms()
    s_small, s_big = (t["est_slope"][b] for b in sorted(t["est_slope"]))
    per_out = s_small[0]
    ok = s_small == s_big and len(set(s_small)) == 1 and per_out <= 3 * t["weight_term"]
    e_small, e_big = (t["exact_slope"][b] for b in sorted(t["exact_slope"]))
    ok &= e_big > e_small  # the exact path does scale with B*H*D*OUT
    wide, narrow = pointwise_ratio(64), pointwise_ratio(1)
    ok &= wide <= 1 / 32 and narrow > 0.5
    return ok, (f"estimate multiplies per extra output channel = {per_out:g} at both batch sizes "
                f"(Kh*Kw*IN = {t['weight_term']}); exact path: {e_small:g} -> {e_big:g}; "
                f"1x1 IN=16 ratio: OUT=64 {wide:.4f}, OUT=1 {narrow:.3f}")


def pointwise_ratio(out: int, cin: int = 16, B: int = 32, H: int = 16, seed: int = 8) -> float:
    """Estimate / exact statistic cost for a 1x1 conv on a [B, H, H, cin] batch."""
    from .flops import stat_costs
    rng = np.random.default_rng(seed)
    exact, est = stat_costs(_rand(rng, (B, H, H, cin)), _rand(rng, (1, 1, cin, out)))
    return est / exact


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "conv_oracle": check_conv_oracle,
    "bn_fold_identity": check_bn_fold,
    "merged_equivalence": check_merged_equivalence,
    "gradient_equivalence": check_gradient_equivalence,
    "bnest_exactness": check_bnest_regimes,
    "gradient_check": check_gradients,
    "product_bits": check_product_bits,
    "quantizer_properties": check_quantizer,
    "bnest_complexity": check_complexity,
}


def _bad_fold(orig):
    def fold(w, mu, var, st):
        M, b = orig(w, mu, var, st)
        return M, b + 1e-3
    return fold


def _bad_conv(orig):
    def conv(x, w, spec="valid"):
        return orig(x, w, spec) * 1.0001
    return conv


def _bad_est_var(orig):
    def est(x, w):
        return orig(x, w) * 1.1
    return est


def _bad_parallel(orig):
    def merge(kernels, target):
        return orig(kernels[:1], target) if len(kernels) > 1 else orig(kernels, target) * 0.5
    return merge


def _bad_quantize(orig):
    def quantize(v, q):
        return orig(v, q) + Tensor(np.asarray(0.25 * q.step.data))
    return quantize


SABOTAGE = {
    "bnfold": (bn, "bn_fold", _bad_fold),
    "conv": (T, "conv2d", _bad_conv),
    "bnest": (bn, "bn_est_var", _bad_est_var),
    "merge": (R, "merge_parallel", _bad_parallel),
    "quant": (Q, "quantize", _bad_quantize),
}


@contextlib.contextmanager
def sabotaged(name: str | None):
    if name is None:
        yield
        return
    if name not in SABOTAGE:
        raise KeyError(f"unknown sabotage {name!r}; choose from {sorted(SABOTAGE)}")
    module, attr, wrap = SABOTAGE[name]
    with mock.patch.object(module, attr, wrap(getattr(module, attr))):
        yield


def run_checks(sabotage: str | None = None, only: list[str] | None = None) -> list[dict]:
    results = []
    with sabotaged(sabotage):
        for name, fn in CHECKS.items():
            if only and name not in only:
                continue
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing check is a failing check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append({"name": name, "passed": bool(ok), "detail": detail})
    return results
