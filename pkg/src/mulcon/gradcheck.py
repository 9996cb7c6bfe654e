"""Central finite-difference checks of every differentiable operation.

Each case builds a scalar from one primitive (contracted with a fixed random
weight so every output element matters), differentiates it with the tape and
compares against central differences. Errors are reported as
``max |analytic - numeric| / max(1, |numeric|)``.

The end-to-end check trains nothing: it evaluates the combined step-2 loss of a
tiny model and compares, per parameter tensor, the analytic directional
derivative along a random direction with its central-difference estimate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import tensor as T
from .losses import bce_loss, build_anchor_sets, combined_loss, mulcon_con_loss, supcon_image_loss
from .model import EncoderConfig, ModelConfig, MulConModel
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4


def rel_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        gf[k] = (fp - fm) / (2 * h)
    return g


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = STEP) -> float:
    """Max relative error of the gradient of scalar ``fn(*tensors)`` over all inputs."""
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    out.backward()
    worst = 0.0
    for leaf in leaves:
        num = numeric_grad(lambda: float(fn(*leaves).item()), leaf.data, h)
        worst = max(worst, rel_error(leaf.grad, num))
    return worst


# -- per-op cases -------------------------------------------------------------------


def _u(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, shape)


def _away_from(rng, shape, points, margin=0.05, lo=-2.0, hi=2.0):
    """Uniform draws kept ``margin`` away from kinks so differences stay smooth."""
    x = rng.uniform(lo, hi, shape)
    for _ in range(100):
        bad = np.zeros(shape, dtype=bool)
        for p in points:
            bad |= np.abs(x - p) < margin
        if not bad.any():
            break
        x[bad] = rng.uniform(lo, hi, int(bad.sum()))
    return x


def _distinct(rng, shape, gap=0.05):
    """Values whose pairwise gaps exceed ``gap`` (max-pool needs a unique argmax)."""
    n = int(np.prod(shape))
    vals = np.linspace(-2.0, 2.0, n)
    vals += rng.uniform(-0.4, 0.4) * (vals[1] - vals[0]) if n > 1 else 0.0
    assert n < 2 or vals[1] - vals[0] > gap
    return rng.permutation(vals).reshape(shape)


def _contract(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum(out * w)


@dataclass
class OpCase:
    name: str
    make: Callable[[np.random.Generator], tuple]


def _case_elementwise(op, draw=None):
    def make(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        x = draw(rng, shape) if draw else _u(rng, *shape)
        w = _u(rng, *shape)
        return (lambda a: _contract(op(a), w)), [x]

    return make


def _case_binary(op, positive_rhs=False, broadcast=False):
    def make(rng):
        m, n = rng.integers(1, 5, size=2)
        a = _u(rng, m, n)
        bshape = (1, n) if broadcast else (m, n)
        b = rng.uniform(0.5, 2.0, bshape) * rng.choice([-1, 1], bshape) if positive_rhs else _u(rng, *bshape)
        w = _u(rng, m, n)
        return (lambda x, y: _contract(op(x, y), w)), [a, b]

    return make


def _case_matmul(rng):
    m, k, n = rng.integers(1, 5, size=3)
    batch = tuple(rng.integers(1, 3, size=int(rng.integers(0, 2))))
    a, b = _u(rng, *batch, m, k), _u(rng, k, n)
    w = _u(rng, *batch, m, n)
    return (lambda x, y: _contract(T.matmul(x, y), w)), [a, b]


def _case_reduce(op):
    def make(rng):
        shape = tuple(rng.integers(1, 5, size=3))
        axis = [None, 0, 1, 2][int(rng.integers(0, 4))]
        keep = bool(rng.integers(0, 2))
        x = _u(rng, *shape)
        probe = op(Tensor(x), axis=axis, keepdims=keep).data
        w = _u(rng, *np.shape(probe)) if np.ndim(probe) else np.array(rng.uniform(-2, 2))
        return (lambda a: _contract(op(a, axis=axis, keepdims=keep), w)), [x]

    return make


def _case_reshape(rng):
    x = _u(rng, 2, 3, 4)
    w = _u(rng, 6, 4)
    return (lambda a: _contract(T.reshape(a, (6, 4)), w)), [x]


def _case_transpose(rng):
    x = _u(rng, *rng.integers(1, 4, size=3))
    axes = tuple(rng.permutation(3))
    w = _u(rng, *np.transpose(x, axes).shape)
    return (lambda a: _contract(T.transpose(a, axes), w)), [x]


def _case_concat(rng):
    axis = int(rng.integers(0, 2))
    shapes = [[3, 2], [3, 2]]
    shapes[1][axis] = int(rng.integers(1, 4))
    a, b = _u(rng, *shapes[0]), _u(rng, *shapes[1])
    w = _u(rng, *np.concatenate([a, b], axis=axis).shape)
    return (lambda x, y: _contract(T.concat([x, y], axis=axis), w)), [a, b]


def _case_stack(rng):
    a, b = _u(rng, 2, 3), _u(rng, 2, 3)
    w = _u(rng, 2, 2, 3)
    return (lambda x, y: _contract(T.stack([x, y], axis=1), w)), [a, b]


def _case_take(rng):
    x = _u(rng, 5, 3)
    idx = rng.integers(0, 5, size=7)  # repeats exercise gradient accumulation
    w = _u(rng, 7, 3)
    return (lambda a: _contract(T.take(a, idx), w)), [x]


def _case_softmax(rng):
    x = _u(rng, *rng.integers(1, 5, size=2))
    w = _u(rng, *x.shape)
    return (lambda a: _contract(T.softmax_rows(a), w)), [x]


def _case_softmax_axis(rng):
    x = _u(rng, 2, 3, 4)
    axis = int(rng.integers(0, 3))
    w = _u(rng, *x.shape)
    return (lambda a: _contract(T.softmax(a, axis=axis), w)), [x]


def _case_l2(rng):
    x = _u(rng, 3, 4)
    w = _u(rng, 3, 4)
    return (lambda a: _contract(T.l2_normalize(a, axis=-1), w)), [x]


def _case_conv(rng):
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    hw = int(rng.integers(k, 6))
    x, wt, b = _u(rng, n, cin, hw, hw), _u(rng, cout, cin, k, k), _u(rng, cout)
    probe = T.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad).data
    w = _u(rng, *probe.shape)
    return (lambda a, c, d: _contract(T.conv2d(a, c, d, stride, pad), w)), [x, wt, b]


def _case_conv_nhwc(rng):
    x, wt, b = _u(rng, 2, 5, 5, 2), _u(rng, 3, 2, 3, 3), _u(rng, 3)
    probe = T.conv2d_nhwc(Tensor(x), Tensor(wt), Tensor(b), 2, 1).data
    w = _u(rng, *probe.shape)
    return (lambda a, c, d: _contract(T.conv2d_nhwc(a, c, d, 2, 1), w)), [x, wt, b]


def _case_maxpool(rng):
    k = int(rng.integers(1, 3))
    x = _distinct(rng, (1, 2, 4, 4))
    probe = T.max_pool2d(Tensor(x), k).data
    w = _u(rng, *probe.shape)
    return (lambda a: _contract(T.max_pool2d(a, k), w)), [x]


def _case_bce(rng):
    n, L = rng.integers(1, 5, size=2)
    s = rng.uniform(0.05, 0.95, (n, L))
    y = rng.integers(0, 2, (n, L))
    return (lambda a: bce_loss(a, y)), [s]


def _unit_rows(rng, *shape):
    z = rng.normal(size=shape)
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


def _case_mulcon(rng):
    n, L, d = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(2, 6))
    y = rng.integers(0, 2, (n, L))
    y[0, 0] = y[1, 0] = 1
    idx = build_anchor_sets(y)
    z = _unit_rows(rng, n, L, d)
    return (lambda a: mulcon_con_loss(T.l2_normalize(a), idx, 0.2)[0]), [z]


def _case_supcon(rng):
    n, L, d = int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(2, 6))
    y = rng.integers(0, 2, (n, L))
    y[0, 0] = y[1, 0] = 1
    z = _unit_rows(rng, n, d)
    return (lambda a: supcon_image_loss(T.l2_normalize(a), y, 0.2)[0]), [z]


def _case_attention(rng):
    from .attention import MultiHeadParams, multi_att_block

    nq, nk, C, D, h = 3, 4, 4, 4, 2
    scaled = bool(rng.integers(0, 2))
    init = MultiHeadParams.init(C, D, h, rng, scaled=scaled, dtype=np.float64)
    weights = [t.data for t in init.wq + init.wk + init.wv] + [init.wo.data, init.wq_res.data]
    q, k = _u(rng, nq, C), _u(rng, 2, nk, C)
    w = _u(rng, 2, nq, D)

    def fn(a, b, *ws):
        params = MultiHeadParams(list(ws[:h]), list(ws[h : 2 * h]), list(ws[2 * h : 3 * h]), ws[-2], ws[-1], scaled)
        return _contract(multi_att_block(a, b, b, params), w)

    return fn, [q, k] + weights


OP_CASES: List[OpCase] = [
    OpCase("add", _case_binary(T.add)),
    OpCase("add_broadcast", _case_binary(T.add, broadcast=True)),
    OpCase("sub", _case_binary(T.sub)),
    OpCase("mul", _case_binary(T.mul, broadcast=True)),
    OpCase("div", _case_binary(T.div, positive_rhs=True)),
    OpCase("neg", _case_elementwise(T.neg)),
    OpCase("scale", _case_elementwise(lambda a: T.scale(a, -1.7))),
    OpCase("matmul", _case_matmul),
    OpCase("sum", _case_reduce(T.sum)),
    OpCase("mean", _case_reduce(T.mean)),
    OpCase("reshape", _case_reshape),
    OpCase("transpose", _case_transpose),
    OpCase("concat", _case_concat),
    OpCase("stack", _case_stack),
    OpCase("take", _case_take),
    OpCase("exp", _case_elementwise(T.exp)),
    OpCase("log", _case_elementwise(T.log, lambda rng, s: rng.uniform(0.1, 2.0, s))),
    OpCase("sigmoid", _case_elementwise(T.sigmoid)),
    OpCase("relu", _case_elementwise(T.relu, lambda rng, s: _away_from(rng, s, [0.0]))),
    OpCase("clip", _case_elementwise(lambda a: T.clip(a, -1.0, 1.0), lambda rng, s: _away_from(rng, s, [-1.0, 1.0]))),
    OpCase("softmax_rows", _case_softmax),
    OpCase("softmax", _case_softmax_axis),
    OpCase("l2_normalize", _case_l2),
    OpCase("conv2d", _case_conv),
    OpCase("conv2d_nhwc", _case_conv_nhwc),
    OpCase("max_pool2d", _case_maxpool),
    OpCase("bce_loss", _case_bce),
    OpCase("mulcon_con_loss", _case_mulcon),
    OpCase("supcon_image_loss", _case_supcon),
    OpCase("multi_att_block", _case_attention),
]


# -- end to end -----------------------------------------------------------------------


def tiny_config() -> ModelConfig:
    """L=3, C=8, D=8, h=2, d_z=4 on 16 x 16 images."""
    return ModelConfig(num_labels=3, embed_dim=8, heads=2, proj_dim=4,
                       encoder=EncoderConfig(image_size=16, channels=(4, 8)))


def end_to_end_loss(model: MulConModel, images: np.ndarray, labels: np.ndarray,
                    tau: float = 0.2, gamma: float = 0.1) -> Tensor:
    out = model(images)
    bce = bce_loss(out.probs, labels)
    con, _ = mulcon_con_loss(model.project(out.g), build_anchor_sets(labels), tau)
    return combined_loss(bce, con, gamma).tensor


def check_end_to_end(seed: int, h: float = STEP) -> Dict[str, float]:
    """Per-parameter-group directional-derivative error of the combined loss."""
    rng = np.random.default_rng(seed)
    model = MulConModel(tiny_config(), seed=seed, dtype=np.float64)
    images = rng.uniform(0.0, 1.0, (4, 16, 16, 3))
    labels = rng.integers(0, 2, (4, 3))
    labels[0, 0] = labels[1, 0] = 1
    params = model.params()
    model.zero_grad()
    end_to_end_loss(model, images, labels).backward()
    errors = {}
    for name, p in params.items():
        v = rng.normal(size=p.shape)
        v /= np.linalg.norm(v)
        analytic = float(np.sum(p.grad * v))
        base = p.data.copy()
        p.data = base + h * v
        fp = float(end_to_end_loss(model, images, labels).item())
        p.data = base - h * v
        fm = float(end_to_end_loss(model, images, labels).item())
        p.data = base
        errors[name] = rel_error(analytic, (fp - fm) / (2 * h))
    return errors


# -- driver ---------------------------------------------------------------------------


@dataclass
class GradcheckResult:
    name: str
    instances: int
    max_error: float
    passed: bool

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name:<20s} n={self.instances:<3d} max_rel_err={self.max_error:.3e}"


@dataclass
class GradcheckReport:
    results: List[GradcheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "seconds": self.seconds,
            "results": [r.__dict__ for r in self.results],
        }


def run_gradcheck(instances: int = 20, seed: int = 0, tolerance: float = TOLERANCE,
                  ops: Sequence[str] = (), end_to_end: bool = True) -> GradcheckReport:
    t0 = time.perf_counter()
    report = GradcheckReport()
    root = np.random.SeedSequence(seed)
    for case, ss in zip(OP_CASES, root.spawn(len(OP_CASES))):
        if ops and case.name not in ops:
            continue
        rng = np.random.default_rng(ss)
        worst = 0.0
        for _ in range(instances):
            fn, inputs = case.make(rng)
            worst = max(worst, check_function(fn, inputs))
        report.results.append(GradcheckResult(case.name, instances, worst, worst < tolerance))
    if end_to_end and (not ops or "end_to_end" in ops):
        worst = 0.0
        for k in range(instances):
            worst = max(worst, max(check_end_to_end(seed * 7919 + k).values()))
        report.results.append(GradcheckResult("end_to_end", instances, worst, worst < tolerance))
    report.seconds = time.perf_counter() - t0
    return report
