"""
Finite-difference gradient check of the full training objective, per parameter group.

For every group the entries with the largest analytic gradient are perturbed by +/- h
and the central difference is compared with the tape gradient.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from modules import autodiff as ad
from modules.autodiff import Tensor
from modules.model import PreparedScene, RoutedFusionDetector, batch_objective, parameter_groups

logger = logging.getLogger(__name__)

REL_FLOOR = 1e-7


@dataclass
class GroupResult:
    group: str
    checked: int
    max_rel_error: float
    worst_entry: str
    passed: bool


@dataclass
class GradcheckReport:
    tolerance: float
    groups: List[GroupResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    @property
    def failures(self) -> List[GroupResult]:
        return [g for g in self.groups if not g.passed]

    def format(self) -> str:
        lines = [f"{'group':<28} {'checked':>7} {'max rel err':>12}  status"]
        for g in self.groups:
            status = "ok" if g.passed else f"FAIL ({g.worst_entry})"
            lines.append(f"{g.group:<28} {g.checked:>7} {g.max_rel_error:>12.3e}  {status}")
        lines.append(f"{'PASS' if self.passed else 'FAIL'} at tolerance {self.tolerance:g}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def central_difference(loss_fn: Callable[[], float], param: Tensor, index: tuple, step: float) -> float:
    original = param.data[index]
    try:
        param.data[index] = original + step
        plus = loss_fn()
        param.data[index] = original - step
        minus = loss_fn()
    finally:
        param.data[index] = original
    return (plus - minus) / (2.0 * step)


def gradcheck_model(model: RoutedFusionDetector, batch: Sequence[PreparedScene], vocab_matrix: Tensor,
                    entries_per_group: int = 3, step: float = 1e-5, tolerance: float = 1e-3,
                    groups: Optional[Sequence[str]] = None) -> GradcheckReport:
    """
    Compare tape gradients of the batch objective with central differences

    Args:
        model: Detector under test (parameters are restored after every probe)
        batch: Prepared scenes, typically two
        vocab_matrix: Frozen weather vocabulary
        entries_per_group: Largest-|grad| entries probed per group
        step: Finite-difference step
        tolerance: Maximum accepted relative error
        groups: Restrict to these group names

    Returns:
        GradcheckReport with one row per parameter group
    """
    model.zero_grad()
    total, _, _ = batch_objective(model, batch, vocab_matrix)
    ad.backward(total)

    def loss_fn() -> float:
        with ad.no_grad():
            value, _, _ = batch_objective(model, batch, vocab_matrix)
        return value.item()

    report = GradcheckReport(tolerance=tolerance)
    for name, params in parameter_groups(model).items():
        if groups is not None and name not in groups:
            continue
        # (|grad|, param name, param, flat index) over the whole group
        candidates = []
        for param_name, param in params:
            flat = np.abs(param.grad).reshape(-1)
            top = np.argsort(-flat, kind="stable")[:entries_per_group]
            candidates.extend((float(flat[i]), param_name, param, int(i)) for i in top)
        candidates.sort(key=lambda c: -c[0])

        worst, worst_entry = 0.0, ""
        for _, param_name, param, flat_index in candidates[:entries_per_group]:
            index = np.unravel_index(flat_index, param.shape)
            analytic = float(param.grad[index])
            numeric = central_difference(loss_fn, param, index, step)
            err = relative_error(analytic, numeric)
            if err >= worst:
                worst, worst_entry = err, f"{param_name}{list(map(int, index))}"
        result = GroupResult(name, min(entries_per_group, len(candidates)), worst, worst_entry, worst < tolerance)
        logger.info(f"gradcheck {name}: max rel err {worst:.3e} over {result.checked} entries")
        report.groups.append(result)
    return report
