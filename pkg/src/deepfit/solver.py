"""Dogleg trust-region solver for nonlinear least squares.

``residual_fn(p, jacobian)`` returns ``(r, J)`` where ``J`` is None when
``jacobian`` is False.  Only the masked entries of the full parameter
vector are optimised; the others are passed through untouched.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class SolveOptions:
    max_iterations: int = 30
    initial_radius: float = 1.0
    min_radius: float = 1e-10
    max_radius: float = 1e4
    accept_ratio: float = 0.0
    shrink_ratio: float = 0.05
    expand_ratio: float = 0.75
    shrink_factor: float = 0.5
    expand_factor: float = 2.0
    gradient_tolerance: float = 1e-10
    step_tolerance: float = 1e-10
    regularization: float = 1e-8

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        for name in ("initial_radius", "min_radius", "max_radius", "gradient_tolerance", "step_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.min_radius <= self.initial_radius <= self.max_radius:
            raise ValueError("initial_radius must lie within the radius bounds")
        if not 0.0 <= self.accept_ratio <= self.shrink_ratio < self.expand_ratio:
            raise ValueError("gain-ratio thresholds must satisfy accept <= shrink < expand")
        if not (0.0 < self.shrink_factor < 1.0 < self.expand_factor):
            raise ValueError("radius factors must shrink below 1 and expand above 1")

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return SolveOptions(**d)


@dataclass
class SolveReport:
    params: np.ndarray
    cost_history: list = field(default_factory=list)  # 0.5 |r|^2 after each accepted step
    termination: str = ""
    iterations: int = 0
    accepted: int = 0
    radius_history: list = field(default_factory=list)

    @property
    def residual_norms(self):
        return [float(np.sqrt(2.0 * c)) for c in self.cost_history]

    def monotone(self):
        c = np.asarray(self.cost_history)
        return bool(np.all(np.diff(c) < 0)) if len(c) > 1 else True

    def to_dict(self):
        return {
            "termination": self.termination,
            "iterations": self.iterations,
            "accepted": self.accepted,
            "residual_norms": self.residual_norms,
        }


def apply_mask(p_full, mask):
    """Active entries of ``p_full``."""
    return np.asarray(p_full, dtype=float)[np.asarray(mask, dtype=bool)]


def expand_mask(p_active, mask, p_full):
    """Copy of ``p_full`` with the active entries replaced."""
    out = np.array(p_full, dtype=float, copy=True)
    out[np.asarray(mask, dtype=bool)] = p_active
    return out


def _dense(J):
    return J.toarray() if sp.issparse(J) else np.asarray(J, dtype=float)


def _dogleg_step(g, JtJ, Jg_norm2, radius, eps_rel):
    n = len(g)
    scale = np.trace(JtJ) / max(n, 1)
    A = JtJ + eps_rel * max(scale, 1e-300) * np.eye(n)
    try:
        h_gn = -np.linalg.solve(A, g)
    except np.linalg.LinAlgError:
        h_gn = -np.linalg.lstsq(A, g, rcond=None)[0]
    if np.linalg.norm(h_gn) <= radius:
        return h_gn, "gauss-newton"
    g2 = g @ g
    alpha = g2 / Jg_norm2 if Jg_norm2 > 0 else np.inf
    h_sd = -alpha * g
    if np.linalg.norm(h_sd) >= radius:
        return -(radius / np.sqrt(g2)) * g, "cauchy"
    d = h_gn - h_sd
    a, b, c = d @ d, 2 * (h_sd @ d), h_sd @ h_sd - radius ** 2
    beta = (-b + np.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
    return h_sd + beta * d, "dogleg"


def dogleg_solve(residual_fn, p0, mask=None, options: SolveOptions | None = None) -> SolveReport:
    """Minimise 0.5 |r(p)|^2 over the masked entries of ``p0``.

    A failing ``residual_fn`` (any exception) ends the solve with the last
    accepted parameters and the failure recorded as the termination reason.
    """
    opts = options or SolveOptions()
    p_full = np.array(p0, dtype=float, copy=True)
    mask = np.ones(len(p_full), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != p_full.shape:
        raise ValueError("mask and parameter vector differ in length")
    if not mask.any():
        raise ValueError("mask selects no parameters")
    x = apply_mask(p_full, mask)

    def full(xa):
        return expand_mask(xa, mask, p_full)

    report = SolveReport(params=p_full.copy())
    try:
        r, J = residual_fn(full(x), True)
    except Exception as exc:  # noqa: BLE001 - any evaluation failure ends the solve
        report.termination = f"residual failure: {exc}"
        return report
    r = np.asarray(r, dtype=float)
    cost = 0.5 * float(r @ r)
    report.cost_history.append(cost)
    radius = opts.initial_radius
    if opts.max_iterations == 0:
        report.termination = "max_iterations"
        return report

    J = _dense(J)
    need_model = True
    while True:
        if cost == 0.0:
            report.termination = "zero residual"
            break
        if need_model:
            g = J.T @ r
            JtJ = J.T @ J
            need_model = False
        if np.max(np.abs(g)) <= opts.gradient_tolerance:
            report.termination = "gradient tolerance"
            break
        if report.iterations >= opts.max_iterations:
            report.termination = "max_iterations"
            break
        Jg = J @ g
        h, _ = _dogleg_step(g, JtJ, float(Jg @ Jg), radius, opts.regularization)
        report.iterations += 1
        if np.linalg.norm(h) <= opts.step_tolerance * (np.linalg.norm(x) + opts.step_tolerance):
            report.termination = "step tolerance"
            break
        predicted = -(g @ h + 0.5 * h @ (JtJ @ h))
        x_new = x + h
        try:
            r_new, _ = residual_fn(full(x_new), False)
            r_new = np.asarray(r_new, dtype=float)
            cost_new = 0.5 * float(r_new @ r_new)
            if not np.isfinite(cost_new):
                raise FloatingPointError("non-finite residual")
        except FloatingPointError:
            cost_new = np.inf
        except Exception as exc:  # noqa: BLE001
            report.termination = f"residual failure: {exc}"
            break
        rho = (cost - cost_new) / predicted if predicted > 0 else -np.inf
        if rho < opts.shrink_ratio:
            radius = max(opts.min_radius, opts.shrink_factor * radius)
        elif rho > opts.expand_ratio:
            radius = min(opts.max_radius, max(radius, opts.expand_factor * np.linalg.norm(h)))
        report.radius_history.append(radius)
        if rho > opts.accept_ratio and cost_new < cost:
            x = x_new
            try:
                r, J = residual_fn(full(x), True)
            except Exception as exc:  # noqa: BLE001
                report.termination = f"residual failure: {exc}"
                break
            r = np.asarray(r, dtype=float)
            J = _dense(J)
            cost = 0.5 * float(r @ r)
            report.cost_history.append(cost)
            report.accepted += 1
            need_model = True
        elif radius <= opts.min_radius:
            report.termination = "trust region collapsed"
            break
    report.params = full(x)
    return report
