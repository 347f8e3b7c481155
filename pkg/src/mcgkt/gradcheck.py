"""Central finite-difference checks for analytic gradients.

The forward functions are evaluated in float64 so that the ``h = 1e-3``
differences are not swamped by float32 round-off.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T

STEP = 1e-3
RTOL = 1e-3
ATOL = 1e-5


def relative_error(analytic, numeric, rtol: float = RTOL, atol: float = ATOL):
    """Error normalised so that ``< rtol`` means "within rtol relative or atol absolute"."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
    return np.abs(analytic - numeric) / scale


@contextmanager
def watch_switches(log: list):
    """Record the ReLU masks and max-pool winners of every forward inside the block.

    A central difference whose two evaluations see different patterns straddles
    a non-differentiable point and is not a valid derivative estimate.
    """
    relu, pool = T.relu, T.maxpool2x2

    def relu_watched(x):
        log.append(np.packbits(x.data > 0))
        return relu(x)

    def pool_watched(x):
        out = pool(x)
        n, c, h, w = x.shape
        win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        log.append(win.reshape(n, c, h // 2, w // 2, 4).argmax(axis=-1))
        return out

    T.relu, T.maxpool2x2 = relu_watched, pool_watched
    try:
        yield log
    finally:
        T.relu, T.maxpool2x2 = relu, pool


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class CheckResult:
    name: str
    worst: float = 0.0
    checked: int = 0
    straddled: int = 0
    instances: int = 0
    errors: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.worst < RTOL and self.checked > 0

    def merge(self, worst: float, checked: int, straddled: int = 0):
        self.worst = max(self.worst, worst)
        self.checked += checked
        self.straddled += straddled
        self.instances += 1
        self.errors.append(worst)


def check_gradients(
    fn: Callable[..., "T.Tensor"],
    inputs: Sequence[np.ndarray],
    h: float = STEP,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    wrt: Optional[Sequence[int]] = None,
) -> tuple:
    """Compare backward() against central differences of the scalar ``fn(*inputs)``.

    Parameters
    ----------
    fn
        Builds a scalar Tensor from Tensors wrapping ``inputs``.
    inputs
        Arrays; cast to float64.
    max_entries
        If set, sample this many entries per checked input instead of all.
    wrt
        Indices of the inputs to check; default all.

    Returns
    -------
    (worst relative error, entries checked, entries skipped because the
    +-h evaluations straddle a ReLU or max-pool switch)
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [T.Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    T.backward(fn(*tensors))

    def value():
        log = []
        with T.no_grad(), watch_switches(log):
            return float(fn(*[T.Tensor(a) for a in arrays]).data), log

    worst, checked, straddled = 0.0, 0, 0
    for i in wrt:
        arr = arrays[i]
        analytic = tensors[i].grad.reshape(-1)
        flat = arr.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            idx = np.arange(flat.size)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            up, pat_up = value()
            flat[k] = orig - h
            down, pat_down = value()
            flat[k] = orig
            if not _same_pattern(pat_up, pat_down):
                straddled += 1
                continue
            err = float(relative_error(analytic[k], (up - down) / (2 * h)))
            worst = max(worst, err)
            checked += 1
    return worst, checked, straddled


def weighted_sum(out: "T.Tensor", weights: np.ndarray) -> "T.Tensor":
    """Reduce a tensor to a scalar with fixed random weights (so every entry matters)."""
    return T.sum_all(T.mul(out, T.Tensor(weights.astype(out.dtype))))


# ---------------------------------------------------------------- op suite

def _away_from_zero(rng, shape, margin=0.05):
    """Values with |x| >= margin so a +-h nudge never crosses a ReLU kink."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def _distinct(rng, shape, gap=0.01):
    """Values pairwise at least ``gap`` apart so max-pool winners are stable under +-h."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def _dims(rng, lo=1, hi=6, k=1):
    return [int(d) for d in rng.integers(lo, hi + 1, size=k)]


def _case_conv2d(rng):
    n, cin, cout = _dims(rng, 1, 3, 3)
    h, w = _dims(rng, 3, 6, 2)
    padding = "same" if rng.random() < 0.7 else "valid"
    x = rng.normal(size=(n, cin, h, w))
    wt = rng.normal(size=(cout, cin, 3, 3))
    b = rng.normal(size=cout)
    ho, wo = (h, w) if padding == "same" else (h - 2, w - 2)
    r = rng.normal(size=(n, cout, ho, wo))
    return lambda x, w_, b_: weighted_sum(T.conv2d(x, w_, b_, padding), r), [x, wt, b]


def _case_maxpool(rng):
    n, c = _dims(rng, 1, 3, 2)
    h, w = (2 * d for d in _dims(rng, 1, 3, 2))
    x = _distinct(rng, (n, c, h, w))
    r = rng.normal(size=(n, c, h // 2, w // 2))
    return lambda x: weighted_sum(T.maxpool2x2(x), r), [x]


def _case_upsample(rng):
    n, c, h, w = _dims(rng, 1, 3, 4)
    x = rng.normal(size=(n, c, h, w))
    r = rng.normal(size=(n, c, 2 * h, 2 * w))
    return lambda x: weighted_sum(T.upsample_nearest2x(x), r), [x]


def _case_dense(rng):
    n, din, dout = _dims(rng, 1, 6, 3)
    r = rng.normal(size=(n, dout))
    return (lambda x, w, b: weighted_sum(T.dense(x, w, b), r),
            [rng.normal(size=(n, din)), rng.normal(size=(dout, din)), rng.normal(size=dout)])


def _unary(op, sampler):
    def case(rng):
        shape = tuple(_dims(rng, 1, 4, 4))
        r = rng.normal(size=shape)
        return lambda x: weighted_sum(op(x), r), [sampler(rng, shape)]
    return case


def _case_gap(rng):
    n, c, h, w = _dims(rng, 1, 4, 4)
    r = rng.normal(size=(n, c))
    return lambda x: weighted_sum(T.global_avg_pool(x), r), [rng.normal(size=(n, c, h, w))]


def _case_concat(rng):
    n, ca, cb, h, w = _dims(rng, 1, 4, 5)
    r = rng.normal(size=(n, ca + cb, h, w))
    return (lambda a, b: weighted_sum(T.concat_channels(a, b), r),
            [rng.normal(size=(n, ca, h, w)), rng.normal(size=(n, cb, h, w))])


def _case_split(rng):
    n, c, h, w = _dims(rng, 1, 3, 4)
    parts = int(rng.integers(1, 5))
    rs = [rng.normal(size=(n, c, h, w)) for _ in range(parts)]

    def fn(x):
        outs = T.split_channels(x, parts)
        total = weighted_sum(outs[0], rs[0])
        for o, r in zip(outs[1:], rs[1:]):
            total = T.add(total, weighted_sum(o, r))
        return total
    return fn, [rng.normal(size=(n, c * parts, h, w))]


def _binary(op):
    def case(rng):
        shape = tuple(_dims(rng, 1, 4, 4))
        r = rng.normal(size=shape)
        return lambda a, b: weighted_sum(op(a, b), r), [rng.normal(size=shape), rng.normal(size=shape)]
    return case


def _case_channel_scale(rng):
    n, c, h, w = _dims(rng, 1, 4, 4)
    r = rng.normal(size=(n, c, h, w))
    return (lambda x, z: weighted_sum(T.channel_scale(x, z), r),
            [rng.normal(size=(n, c, h, w)), rng.normal(size=(n, c))])


def _case_mse(rng):
    shape = tuple(_dims(rng, 1, 4, 4))
    return T.mse_loss, [rng.normal(size=shape), rng.normal(size=shape)]


def _case_sum(rng):
    return T.sum_all, [rng.normal(size=tuple(_dims(rng, 1, 5, 4)))]


def _case_conv_block(rng):
    from .layers import ConvBlockParams, ConvParams, conv_block
    n = 1
    cin, cout = _dims(rng, 1, 3, 2)
    h, w = _dims(rng, 2, 5, 2)
    shapes = [(cout, cin, 3, 3), (cout,), (cout, cout, 3, 3), (cout,), (cout, cout, 3, 3), (cout,)]
    arrays = [rng.normal(size=(n, cin, h, w))] + [rng.normal(size=s) * 0.5 for s in shapes]
    r = rng.normal(size=(n, cout, h, w))

    def fn(x, *p):
        blk = ConvBlockParams(ConvParams(p[0], p[1]), ConvParams(p[2], p[3]), ConvParams(p[4], p[5]))
        return weighted_sum(conv_block(x, blk), r)
    return fn, arrays


def _case_up(rng):
    from .layers import ConvParams, up_transition
    c = 2 * int(rng.integers(1, 3))
    h, w = _dims(rng, 1, 3, 2)
    r = rng.normal(size=(1, c // 2, 2 * h, 2 * w))
    return (lambda x, wt, b: weighted_sum(up_transition(x, ConvParams(wt, b)), r),
            [rng.normal(size=(1, c, h, w)), rng.normal(size=(c // 2, c, 3, 3)), rng.normal(size=c // 2)])


def _case_ikt(rng):
    from .layers import ConvLSTMParams, ikt_fuse
    c = int(rng.integers(1, 3))
    h, w = _dims(rng, 2, 4, 2)
    names = [f.name for f in ConvLSTMParams.__dataclass_fields__.values()]
    shapes = [(c,) if nm.startswith("b_") else (c, c, 3, 3) for nm in names]
    r = rng.normal(size=(1, c, h, w))
    arrays = [rng.normal(size=(1, c, h, w)), rng.normal(size=(1, c, h, w))] + [
        rng.normal(size=s) * 0.5 for s in shapes]

    def fn(e, d, *p):
        return weighted_sum(ikt_fuse(e, d, ConvLSTMParams(*p)), r)
    return fn, arrays


def _case_se(rng):
    from .layers import ConvParams, SEParams, se_gate
    c = int(rng.integers(1, 7))
    ratio = int(rng.integers(1, 4))
    red = SEParams.reduced(c, ratio)
    h, w = _dims(rng, 1, 4, 2)
    r = rng.normal(size=(2, c, h, w))
    arrays = [rng.normal(size=(2, c, h, w)), rng.normal(size=(red, c)), rng.normal(size=red) * 0.1 + 0.3,
              rng.normal(size=(c, red)), rng.normal(size=c)]

    def fn(x, w1, b1, w2, b2):
        return weighted_sum(se_gate(x, SEParams(ConvParams(w1, b1), ConvParams(w2, b2), ratio)), r)
    return fn, arrays


OP_CASES = {
    "conv2d": _case_conv2d,
    "maxpool2x2": _case_maxpool,
    "upsample_nearest2x": _case_upsample,
    "dense": _case_dense,
    "relu": _unary(lambda x: T.relu(x), _away_from_zero),
    "sigmoid": _unary(T.sigmoid, lambda rng, s: rng.normal(size=s) * 2),
    "tanh": _unary(T.tanh, lambda rng, s: rng.normal(size=s)),
    "global_avg_pool": _case_gap,
    "concat_channels": _case_concat,
    "split_channels": _case_split,
    "add": _binary(T.add),
    "mul": _binary(T.mul),
    "channel_scale": _case_channel_scale,
    "mse_loss": _case_mse,
    "sum": _case_sum,
    "conv_block": _case_conv_block,
    "up_transition": _case_up,
    "ikt_fuse": _case_ikt,
    "se_gate": _case_se,
}


def check_op(name: str, instances: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, len(name)] + [ord(ch) for ch in name])
    res = CheckResult(name)
    for _ in range(instances):
        fn, arrays = OP_CASES[name](rng)
        res.merge(*check_gradients(fn, arrays, rng=rng))
    return res


def check_model(instances: int = 20, params_per_instance: int = 50, seed: int = 0,
                base_channels: int = 2, size: int = 8) -> CheckResult:
    """End-to-end check of the full network in float64 on sampled parameters."""
    from .model import ModelConfig, init_model

    res = CheckResult("model")
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(base_channels=base_channels, se_ratio=2)
    for _ in range(instances):
        model = init_model(cfg, seed=int(rng.integers(2 ** 31)), dtype=np.float64)
        # random biases keep units off the exact ReLU kink at zero
        for _, t in model.named_parameters():
            if t.ndim == 1:
                t.data = rng.normal(size=t.shape) * 0.1
        x = rng.uniform(0, 1, size=(1, 3, size, size))
        y = rng.uniform(0, 1, size=(1, 3, size, size))
        params = model.parameters()
        names = list(params)
        ends = np.cumsum([params[n].size for n in names])

        def loss():
            return T.mse_loss(model(T.Tensor(x)), T.Tensor(y))

        model.zero_grad()
        T.backward(loss())
        analytic = {n: params[n].grad.reshape(-1).copy() for n in names}
        model.zero_grad()

        def value():
            log = []
            with T.no_grad(), watch_switches(log):
                return float(loss().data), log

        worst, checked, straddled = 0.0, 0, 0
        order = rng.permutation(ends[-1])
        for pick in order:
            if checked == params_per_instance:
                break
            owner = int(np.searchsorted(ends, pick, side="right"))
            name = names[owner]
            k = pick - (ends[owner] - params[name].size)
            flat = params[name].data.reshape(-1)
            orig = flat[k]
            flat[k] = orig + STEP
            up, pat_up = value()
            flat[k] = orig - STEP
            down, pat_down = value()
            flat[k] = orig
            if not _same_pattern(pat_up, pat_down):
                straddled += 1
                continue
            numeric = (up - down) / (2 * STEP)
            worst = max(worst, float(relative_error(analytic[name][k], numeric)))
            checked += 1
        res.merge(worst, checked, straddled)
    return res


def run_suite(instances: int = 20, seed: int = 0, include_model: bool = True) -> list:
    results = [check_op(name, instances, seed) for name in OP_CASES]
    if include_model:
        results.append(check_model(instances=instances, seed=seed))
    return results
