"""Driving a loss graph forward/backward and checking it by finite differences."""

from __future__ import annotations

from typing import Any, Callable

import numpy as np

from harc.numerics.params import ParameterStore, make_rng
from harc.numerics.tensor import Tensor, record_kinks

# A graph is any callable building a scalar loss from the store's leaves.
Graph = Callable[[ParameterStore, Any, Any], Tensor]


def forward_backward(
    graph: Graph, store: ParameterStore, inputs: Any, targets: Any, zero_grad: bool = True
) -> float:
    """Evaluate ``graph`` and back-propagate into ``store``'s gradient buffers.

    Parameters the graph never touches keep a zero gradient (when
    ``zero_grad`` is set) because only leaves reached by the backward walk
    accumulate anything.
    """
    if zero_grad:
        store.zero_grad()
    loss = graph(store, inputs, targets)
    loss.backward()
    return float(loss.data)


def _loss_and_branches(graph: Graph, store: ParameterStore, inputs: Any, targets: Any) -> tuple[float, list[bytes]]:
    with record_kinks() as log:
        loss = float(graph(store, inputs, targets).data)
    return loss, log


def gradient_check(
    graph: Graph,
    store: ParameterStore,
    inputs: Any,
    targets: Any,
    epsilon: float = 1e-3,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and five-point finite-difference gradients.

    Runs on a float64 copy of ``store``.  Coordinates are sampled per
    parameter in proportion to size (at least three per tensor), preferring
    ones that actually receive gradient.  A coordinate whose probes (at
    +/-epsilon and +/-2 epsilon) change any ReLU/max/clamp branch straddles a
    kink, where the difference quotient is not a derivative; it is replaced
    by another draw.  The fourth-order stencil keeps truncation and roundoff
    error far below the tolerance for gradients down to about 1e-7.  When
    both the analytic value and the quotient sit below the stencil's float64
    resolution the derivative is zero on both sides and the coordinate scores 0.
    """
    work = store.astype(np.float64)
    forward_backward(graph, work, inputs, targets)
    _, base_branches = _loss_and_branches(graph, work, inputs, targets)
    rng = make_rng(seed, 0x6AC)

    names = work.names()
    sizes = np.array([work[n].value.size for n in names], dtype=np.float64)
    quota = np.maximum(3, np.ceil(n_coords * sizes / sizes.sum())).astype(int)

    worst = 0.0
    for name, q in zip(names, quota):
        param = work[name]
        grad = param.grad.reshape(-1)
        view = param.value.reshape(-1)
        live = rng.permutation(np.flatnonzero(grad))
        dead = rng.permutation(np.flatnonzero(grad == 0))
        # mostly live coordinates, plus a few that should stay exactly zero
        n_dead = min(len(dead), max(1, q // 10) if len(live) else q)
        order = np.concatenate([dead[:n_dead], live, dead[n_dead:]]).astype(np.int64)
        checked = 0
        for flat_idx in order:
            if checked >= q:
                break
            orig = view[flat_idx]
            probes = []
            for step in (2, 1, -1, -2):
                view[flat_idx] = orig + step * epsilon
                probes.append(_loss_and_branches(graph, work, inputs, targets))
            view[flat_idx] = orig
            if any(branches != base_branches for _, branches in probes):
                continue
            analytic = float(grad[flat_idx])
            (u2, _), (u1, _), (d1, _), (d2, _) = probes
            numeric = (-u2 + 8 * u1 - 8 * d1 + d2) / (12 * epsilon)
            # smallest slope the stencil can tell apart from zero in float64
            resolution = 8 * np.finfo(np.float64).eps * max(abs(u2), abs(u1), abs(d1), abs(d2)) / epsilon
            if max(abs(analytic), abs(numeric)) <= resolution:
                rel = 0.0  # both sides say zero; a relative error is undefined there
            else:
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
            checked += 1
    return worst
