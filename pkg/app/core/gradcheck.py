"""Central finite-difference checks of every differentiable op and of the full training loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from app.core import tensor as T
from app.core.config import Settings
from app.core.model import build_model
from app.core.objectives import gaussian_target
from app.core.sampler import TrainSample
from app.core.tensor import GradTape, Tensor
from app.core.train import sample_loss

EPS = 1e-5
TOLERANCE = 1e-4
# Per-tensor gradient norms below this are compared in absolute terms.
MODEL_GRAD_FLOOR = 1e-3


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_rel_err: float
    passed: bool
    entries: int = 0
    worst: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name:<16} rel_err={self.max_rel_err:.3e} entries={self.entries}"
        return f"{text} worst={self.worst}" if self.worst else text


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def _analytic(f: Callable[[], Tensor], inputs: Sequence[Tensor]) -> List[np.ndarray]:
    with GradTape() as tape:
        loss = f()
    grads = tape.backward(loss, populate=False)
    return [grads.get(id(x), np.zeros_like(x.data)).reshape(x.shape) for x in inputs]


def _numeric(
    f: Callable[[], Tensor],
    x: Tensor,
    eps: float,
    indices: Optional[Sequence[Tuple[int, ...]]] = None,
) -> np.ndarray:
    out = np.zeros_like(x.data)
    for idx in indices if indices is not None else np.ndindex(*x.shape):
        orig = x.data[idx]
        x.data[idx] = orig + eps
        plus = f().item()
        x.data[idx] = orig - eps
        minus = f().item()
        x.data[idx] = orig
        out[idx] = (plus - minus) / (2 * eps)
    return out


def check_op(
    name: str,
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    eps: float = EPS,
    tol: float = TOLERANCE,
) -> GradCheckResult:
    """Compare tape gradients of ``sum(fn(*inputs) * R)`` against central differences."""
    weights = rng.normal(size=fn(*inputs).shape)

    def f() -> Tensor:
        return T.sum_(T.mul(fn(*inputs), weights))

    analytic = _analytic(f, inputs)
    numeric = [_numeric(f, x, eps) for x in inputs]
    err = relative_error(
        np.concatenate([a.ravel() for a in analytic]),
        np.concatenate([n.ravel() for n in numeric]),
    )
    return GradCheckResult(name, err, err <= tol, sum(x.size for x in inputs))


def _leaf(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def op_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[..., Tensor], List[Tensor]]]:
    def normal(*shape: int) -> Tensor:
        return _leaf(rng.normal(size=shape))

    def positive(*shape: int) -> Tensor:
        return _leaf(rng.uniform(0.5, 2.0, size=shape))

    def away_from_zero(*shape: int) -> Tensor:
        v = rng.uniform(0.2, 1.5, size=shape)
        return _leaf(v * rng.choice([-1.0, 1.0], size=shape))

    a, b = normal(3, 4), normal(3, 4)
    # maximum/minimum need distinct operands for a well-defined derivative.
    c = _leaf(a.data + rng.choice([-0.5, 0.5], size=a.shape))
    # clamp inputs sit at least 0.05 away from either bound.
    clamp_input = _leaf(rng.choice([-1.1, -0.3, 0.2, 0.9], size=(2, 3)) + rng.uniform(-0.05, 0.05, size=(2, 3)))
    idx = np.array([2, 0, 3])
    return [
        ("add", T.add, [normal(3, 4), normal(1, 4)]),
        ("sub", T.sub, [normal(3, 4), normal(3, 1)]),
        ("mul", T.mul, [normal(3, 4), normal(3, 4)]),
        ("div", T.div, [normal(3, 4), positive(3, 4)]),
        ("neg", T.neg, [normal(2, 3)]),
        ("scale", lambda x: T.scale(x, 0.37), [normal(2, 3)]),
        ("exp", T.exp, [normal(2, 3)]),
        ("log", T.log, [positive(2, 3)]),
        ("power", lambda x: T.power(x, 2.5), [positive(2, 3)]),
        ("abs", T.abs_, [away_from_zero(2, 3)]),
        ("sigmoid", T.sigmoid, [normal(2, 3)]),
        ("gelu", T.gelu, [normal(2, 3)]),
        ("maximum", T.maximum, [a, c]),
        ("minimum", T.minimum, [b, _leaf(b.data + rng.choice([-0.5, 0.5], size=b.shape))]),
        ("clamp", lambda x: T.clamp(x, -0.5, 0.5), [clamp_input]),
        ("reshape", lambda x: T.reshape(x, (4, 3)), [normal(3, 4)]),
        ("transpose", lambda x: T.transpose(x, (1, 2, 0)), [normal(2, 3, 4)]),
        ("concat", lambda x, y: T.concat([x, y], axis=1), [normal(3, 2), normal(3, 4)]),
        ("gather", lambda x: T.gather(x, idx, axis=0), [normal(5, 3)]),
        ("scatter", lambda x: T.scatter(x, idx, 6, axis=0), [normal(3, 2)]),
        ("sum", lambda x: T.sum_(x, axis=1), [normal(3, 4)]),
        ("mean", lambda x: T.mean(x, axis=0, keepdims=True), [normal(3, 4)]),
        ("matmul", T.matmul, [normal(3, 4), normal(4, 2)]),
        ("softmax_rows", T.softmax_rows, [normal(3, 5)]),
        ("layer_norm", T.layer_norm, [normal(3, 6), normal(6), normal(6)]),
        ("conv2d", T.conv2d, [normal(2, 4, 5), normal(3, 2, 3, 3), normal(3)]),
        ("linear", T.linear, [normal(4, 3), normal(3, 5), normal(5)]),
    ]


def check_model(
    settings: Settings,
    rng: np.random.Generator,
    entries_per_param: Optional[int] = 4,
    eps: float = EPS,
    tol: float = TOLERANCE,
) -> GradCheckResult:
    """Finite-difference check of the encoder + head + total loss on a random sample.

    Every parameter tensor is scored on its own and the result carries the
    worst one. ``entries_per_param=None`` checks every entry; otherwise that
    many random entries per tensor are checked.
    """
    settings = settings.with_overrides(dtype="float64")
    model = build_model(settings, seed=int(rng.integers(2**31)))
    tcfg = settings.tracker_config()
    t_res, s_res = tcfg.template_resolution, tcfg.search_resolution

    def image(res: int) -> np.ndarray:
        return rng.integers(0, 256, size=(res, res, 3), dtype=np.uint8)

    box = np.array([s_res * 0.35, s_res * 0.4, s_res * 0.25, s_res * 0.2])
    grid = s_res // tcfg.patch_size
    sample = TrainSample(
        static=tuple(image(t_res) for _ in tcfg.scales),
        dynamic=tuple(image(t_res) for _ in tcfg.scales),
        search=image(s_res),
        target=gaussian_target(box, grid, grid, tcfg.patch_size, sigma=1.0),
    )

    def f() -> Tensor:
        return sample_loss(model, sample)[0]

    named = model.parameters()
    analytic = _analytic(f, list(named.values()))
    worst, worst_err, entries = "", 0.0, 0
    for (name, p), g in zip(named.items(), analytic):
        if entries_per_param is None or entries_per_param >= p.size:
            a, n = g.ravel(), _numeric(f, p, eps).ravel()
        else:
            flat = rng.choice(p.size, size=entries_per_param, replace=False)
            indices = [np.unravel_index(int(i), p.shape) for i in flat]
            numeric = _numeric(f, p, eps, indices)
            a = np.asarray([g[i] for i in indices])
            n = np.asarray([numeric[i] for i in indices])
        err = relative_error(a, n, floor=MODEL_GRAD_FLOOR)
        entries += a.size
        if err >= worst_err:
            worst, worst_err = name, err
    return GradCheckResult("encoder+head+loss", worst_err, worst_err <= tol, entries, worst=worst)


def run_gradcheck(seed: int = 0, settings: Optional[Settings] = None, include_model: bool = True) -> List[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = [check_op(name, fn, inputs, rng) for name, fn, inputs in op_cases(rng)]
    if include_model:
        results.append(check_model(settings or Settings(), rng))
    return results
