"""Compare reverse-mode gradients against central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from qdf.tensor import Tensor, no_grad


@dataclass
class GroupResult:
    name: str
    n_checked: int
    rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    groups: list[GroupResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    @property
    def max_rel_error(self) -> float:
        return max((g.rel_error for g in self.groups), default=0.0)

    def format(self) -> str:
        lines = [f"{'group':<28} {'checked':>8} {'rel_error':>12}  status"]
        for g in self.groups:
            status = "ok" if g.passed else "FAIL"
            lines.append(f"{g.name:<28} {g.n_checked:>8d} {g.rel_error:>12.3e}  {status}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def nudge_from_kinks(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Move entries with ``|x| < margin`` to ``±margin`` so ReLU is differentiable there."""
    x = np.array(x, dtype=float)
    close = np.abs(x) < margin
    x[close] = np.where(x[close] >= 0, margin, -margin)
    return x


def check_gradients(
    build_loss: Callable[[], Tensor],
    groups: Mapping[str, Sequence[Tensor]],
    tolerance: float = 1e-6,
    step: float = 1e-5,
    max_per_tensor: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Check d(loss)/d(param) for every parameter group.

    ``build_loss`` must rebuild the graph deterministically from the current
    parameter values.  With ``max_per_tensor`` set, a seeded random subset of
    each tensor's entries is probed instead of all of them.
    """
    rng = np.random.default_rng(seed)
    all_params = [p for ps in groups.values() for p in ps]
    for p in all_params:
        p.grad = None
    build_loss().backward()
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for p in all_params}

    report = GradCheckReport(tolerance=tolerance)
    for name, params in groups.items():
        a_parts, n_parts = [], []
        for p in params:
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_tensor is not None and flat.size > max_per_tensor:
                idx = np.sort(rng.choice(flat.size, size=max_per_tensor, replace=False))
            numeric = np.empty(idx.size)
            with no_grad():
                for j, k in enumerate(idx):
                    orig = flat[k]
                    flat[k] = orig + step
                    up = build_loss().item()
                    flat[k] = orig - step
                    down = build_loss().item()
                    flat[k] = orig
                    numeric[j] = (up - down) / (2.0 * step)
            a_parts.append(analytic[id(p)].reshape(-1)[idx])
            n_parts.append(numeric)
        a = np.concatenate(a_parts) if a_parts else np.zeros(0)
        n = np.concatenate(n_parts) if n_parts else np.zeros(0)
        err = relative_error(a, n)
        report.groups.append(GroupResult(name, int(a.size), err, err <= tolerance))
    for p in all_params:
        p.grad = None
    return report


def model_gradient_suite(sphere_radius: float = 0.75, grid_interval: float = 0.5,
                         n_orbitals: int = 8, layers: int = 2, tolerance: float = 1e-4,
                         step: float = 1e-5, seed: int = 0,
                         max_per_tensor: int | None = None) -> dict[str, GradCheckReport]:
    """Check L_E and L_V gradients end to end on a small diatomic (C-O, 1.13 Å).

    Every parameter group that feeds each loss is probed, the orbital
    exponents included.
    """
    from qdf.basis import instantiate
    from qdf.chem import Atom, Molecule
    from qdf.grid import build_grid
    from qdf.model import ModelConfig, QDFModel, energy_loss, potential_loss, prepare_inputs

    mol = Molecule("diatomic", (Atom("C", (0.0, 0.0, 0.0)), Atom("O", (0.0, 0.0, 1.13))))
    grid = build_grid(mol, sphere_radius, grid_interval)
    model = QDFModel(ModelConfig(n_orbitals, n_orbitals, layers, layers), seed=seed)
    sample = prepare_inputs(mol, grid, instantiate(mol, model.basis), target=-250.0)

    def layer_group(layers_):
        return [p for layer in layers_ for p in layer.parameters()]

    basis = {"log_zeta": [model.basis.log_zeta], "coefficients": [model.basis.coefficients]}
    energy_groups = {**basis,
                     "energy.hidden": layer_group(model.energy_hidden),
                     "energy.head": layer_group([model.energy_head])}
    potential_groups = {**basis,
                        "hk.input": layer_group([model.hk_input]),
                        "hk.hidden": layer_group(model.hk_hidden),
                        "hk.head": layer_group([model.hk_head])}
    return {
        "L_E": check_gradients(lambda: energy_loss(model, [sample])[0], energy_groups,
                               tolerance, step, max_per_tensor, seed),
        "L_V": check_gradients(lambda: potential_loss(model, [sample])[0], potential_groups,
                               tolerance, step, max_per_tensor, seed),
    }
