"""Finite-difference verification of the reverse-mode gradients."""

from collections import defaultdict
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from rris.config import ModelConfig
from rris.errors import ModelError
from rris.logging import log_gradcheck
from rris.toy.autograd import Var
from rris.toy.layers import leaf_grads, lift, named_leaves
from rris.toy.model import init_params
from rris.toy.train import batch_loss, synthetic_batch

STEP = 1e-5
TOLERANCE = 1e-4
SAMPLE_SIZE = 100
ERROR_FLOOR = 1e-5
# Weights drawn at the training scale give gradients below ERROR_FLOOR
CHECK_INIT_SCALE = 0.3


class GradCheckReport(BaseModel):
    max_rel_error: float
    worst_param: str
    samples: int
    groups: int
    tol: float
    passed: bool


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ERROR_FLOOR)


def leaf_group(name: str) -> str:
    """``vltfs.0.mhca1.query.weight`` -> ``vltfs.0``; ``head_out.bias`` -> ``head_out``."""
    parts = name.split(".")
    if len(parts) > 1 and parts[1].isdigit():
        return ".".join(parts[:2])
    return parts[0]


def _sample(leaves: List[Tuple[str, np.ndarray]], sample_size: int, rng: np.random.Generator) -> List[Tuple[str, int]]:
    """Scalars drawn round-robin across leaf groups, so every group is covered when the budget allows."""
    groups: Dict[str, List[Tuple[str, int]]] = defaultdict(list)
    for name, leaf in leaves:
        groups[leaf_group(name)] += [(name, i) for i in range(leaf.size)]

    queues = [[members[i] for i in rng.permutation(len(members))] for _, members in sorted(groups.items())]
    picked = []
    while len(picked) < sample_size and any(queues):
        for queue in queues:
            if queue and len(picked) < sample_size:
                picked.append(queue.pop())
    return picked


def grad_check(
    params,
    loss_fn: Callable[[object], Var],
    sample_size: int = SAMPLE_SIZE,
    h: float = STEP,
    tol: float = TOLERANCE,
    seed: int = 0,
    corrupt: bool = False,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences on sampled scalars.

    ``params`` is any bundle of float64 arrays; they are perturbed in place
    and restored. ``corrupt`` skews the analytic side so the harness itself
    can be shown to fail.
    """
    lifted = lift(params)
    loss = loss_fn(lifted)
    if not np.isfinite(loss.value).all():
        raise ModelError("loss is not finite", code="nonfinite-gradient")
    loss.backward()
    grads = leaf_grads(lifted)
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise ModelError(f"gradient of {name} is not finite", code="nonfinite-gradient")

    leaves = dict(named_leaves(params))
    sampled = _sample(list(leaves.items()), sample_size, np.random.default_rng(seed))

    worst_error, worst_name = 0.0, ""
    for name, index in sampled:
        leaf = leaves[name]
        original = leaf.flat[index]
        leaf.flat[index] = original + h
        plus = float(loss_fn(lift(params)).value)
        leaf.flat[index] = original - h
        minus = float(loss_fn(lift(params)).value)
        leaf.flat[index] = original

        numeric = (plus - minus) / (2.0 * h)
        analytic = float(grads[name].flat[index])
        if corrupt:
            analytic = 1.5 * analytic + 1e-3
        if not np.isfinite(numeric):
            raise ModelError(f"finite difference of {name}[{index}] is not finite", code="nonfinite-gradient")

        error = relative_error(analytic, numeric)
        if error > worst_error:
            worst_error, worst_name = error, f"{name}[{index}]"

    report = GradCheckReport(
        max_rel_error=worst_error,
        worst_param=worst_name,
        samples=len(sampled),
        groups=len({leaf_group(name) for name, _ in sampled}),
        tol=tol,
        passed=worst_error < tol,
    )
    log_gradcheck(report.max_rel_error, tol, report.passed, report.samples)
    return report


def check_model_gradients(
    config: Optional[ModelConfig] = None,
    sample_size: int = SAMPLE_SIZE,
    seed: int = 0,
    corrupt: bool = False,
) -> GradCheckReport:
    """Gradient check of the full training loss on a synthetic positive/negative batch.

    Weights are drawn at no less than ``CHECK_INIT_SCALE`` so every path,
    the standardized fusion inputs included, carries a measurable gradient.
    """
    config = config or ModelConfig()
    config = config.model_copy(update={"init_scale": max(config.init_scale, CHECK_INIT_SCALE)})
    params = init_params(config)
    batch = synthetic_batch(config, pairs=1, seed=seed)
    return grad_check(
        params,
        lambda p: batch_loss(p, config, batch),
        sample_size=sample_size,
        seed=seed,
        corrupt=corrupt,
    )
