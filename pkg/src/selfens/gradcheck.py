"""Backprop vs central finite differences on small randomised networks."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import losses, models
from .nn import NetworkSpec, analytic_grad, finite_diff_grad, init_params, relative_error

# tiny instances of each preset: (input shape, width multiplier)
TINY = {
    "mnist_usps": ((16, 16, 1), 1 / 16),
    "conv_small": ((12, 12, 2), 1 / 32),
    "mlp": ((4, 4, 1), 1 / 16),
}


@dataclass
class LayerReport:
    layer: str
    max_rel_err: float
    probed: int
    skipped_kinks: int


def tiny_spec(preset: str, classes: int = 4) -> NetworkSpec:
    shape, width = TINY[preset]
    return models.build(preset, shape, classes, width)


def combined_loss(labels, teacher_probs, mask, weights=losses.LossWeights(), pass_rate=0.75):
    """Supervised + masked consistency + class-balance objective on one batch."""
    se_scale, cb_scale = losses.unsup_scales(weights, pass_rate, epoch=0)

    def value(p):
        return (
            losses.cross_entropy(p, labels)
            + se_scale * losses.self_ensembling_loss(p, teacher_probs, mask)
            + cb_scale * losses.class_balance_loss(p)
        )

    def value_and_grad(p):
        g = (
            losses.cross_entropy_grad(p, labels)
            + se_scale * losses.self_ensembling_grad(p, teacher_probs, mask)
            + cb_scale * losses.class_balance_grad(p)
        )
        return value(p), g

    return value, value_and_grad


def check_network(spec: NetworkSpec, seed: int, batch: int = 3, h: float = 1e-5, max_coords: int = 8) -> dict[str, tuple[float, int, int]]:
    """Per-layer ``(max relative error, probed coords, skipped coords)`` for one seed."""
    rng = np.random.default_rng(seed)
    params = init_params(spec, rng, np.float64)
    for p in params.params.values():
        p.value += rng.normal(0, 0.1, p.value.shape)
    x = rng.standard_normal((batch,) + spec.input_shape)
    c = spec.classes
    labels = rng.integers(0, c, batch)
    teacher = rng.dirichlet(np.ones(c), batch)
    mask = losses.ConfidenceMask((rng.random(batch) < 0.7).astype(float), 0.0)
    value, value_and_grad = combined_loss(labels, teacher, mask)

    ana = analytic_grad(spec, params, x, value_and_grad, seed=seed)
    num = finite_diff_grad(spec, params, x, value, h=h, seed=seed, max_coords=max_coords, rng=rng)

    by_layer = defaultdict(list)
    for name in num:
        by_layer[name.split(".")[0]].append(name)
    out = {}
    for idx, names in by_layer.items():
        a = np.concatenate([ana[n].ravel() for n in names])
        n = np.concatenate([num[n].ravel() for n in names])
        label = f"{idx}:{spec.layers[int(idx)].kind}"
        probed = int((~np.isnan(n)).sum())
        total = sum(min(num[k].size, max_coords) for k in names)
        out[label] = (relative_error(a, n), probed, total - probed)
    return out


def check_preset(preset: str, seeds=range(20), **kw) -> list[LayerReport]:
    agg: dict[str, list] = {}
    for s in seeds:
        for layer, (err, probed, skipped) in check_network(tiny_spec(preset), s, **kw).items():
            e = agg.setdefault(layer, [0.0, 0, 0])
            e[0] = max(e[0], err)
            e[1] += probed
            e[2] += skipped
    return [LayerReport(k, *v) for k, v in agg.items()]
