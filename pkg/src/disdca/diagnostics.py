"""Objectives, duality gap, the deviation terms R and S, and convergence bounds."""
import csv
import io
import math
from dataclasses import dataclass, fields

import numpy as np

from . import kernels
from .errors import ConfigError, DomainError
from .model import LossModel, Regularizer

TRACE_COLUMNS = ("t", "j", "dual_obj", "primal_obj", "gap", "epsilon", "R", "S", "dist_to_opt")


@dataclass(frozen=True)
class TraceRecord:
    t: int
    j: int
    dual_obj: float
    primal_obj: float
    gap: float
    epsilon: float = None
    R: float = None
    S: float = None
    dist_to_opt: float = None

    def row(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                out.append("")
            elif isinstance(v, (int, np.integer)):
                out.append(str(int(v)))
            else:
                out.append(repr(float(v)))
        return out


def _loss(loss):
    return loss if isinstance(loss, LossModel) else LossModel(loss)


def _reg(reg):
    return reg if isinstance(reg, Regularizer) else Regularizer(float(reg))


def primal_objective(ds, w, loss, reg):
    """(1/n) sum phi(x_i.w, y_i) + (lam/2)||w||^2."""
    loss, reg = _loss(loss), _reg(reg)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if w.shape != (ds.dim,):
        raise ConfigError(f"w has shape {w.shape}, data dimension is {ds.dim}")
    indptr, indices, data = ds.csr()
    rows = np.arange(ds.n, dtype=np.int64)
    return kernels.loss_sum(loss.code, indptr, indices, data, ds.y, w, rows) / ds.n + reg.value(w)


def dual_objective(ds, alpha, loss, reg):
    """(1/n) sum -phi*(-alpha_i) - g*((1/n) sum alpha_i x_i)."""
    loss, reg = _loss(loss), _reg(reg)
    alpha = np.ascontiguousarray(alpha, dtype=np.float64)
    if alpha.shape != (ds.n,):
        raise ConfigError(f"alpha has shape {alpha.shape}, expected ({ds.n},)")
    conj = np.array([kernels.conj_neg(loss.code, a, yi) for a, yi in zip(alpha, ds.y)])
    bad = np.flatnonzero(~np.isfinite(conj))
    if bad.size:
        i = int(bad[0])
        raise DomainError(f"alpha[{i}]={alpha[i]!r} is outside the {loss.kind} conjugate domain")
    v = ds.X.T @ alpha / ds.n
    return float(-conj.sum() / ds.n) - reg.conjugate(v)


def primal_of(ds, alpha, lam):
    """w(alpha) = (1/(lam n)) sum alpha_i x_i."""
    return np.asarray(ds.X.T @ np.asarray(alpha, dtype=float)) / (lam * ds.n)


def duality_gap(ds, w, alpha, loss, reg):
    return primal_objective(ds, w, loss, reg) - dual_objective(ds, alpha, loss, reg)


def residual_R(x_rows, omega, alpha, delta, u_locals, w_inner, s, n):
    """Deviation term of one lockstep inner step.

    Row k of ``x_rows``/``u_locals`` and entry k of ``omega``, ``alpha``,
    ``delta`` describe worker k's sampled example: omega = -phi'(x.w_inner),
    alpha before the update, delta the applied change and u the local primal
    the update used.
    """
    x_rows = np.atleast_2d(np.asarray(x_rows, dtype=float))
    u_locals = np.atleast_2d(np.asarray(u_locals, dtype=float))
    coef = s * (np.asarray(omega) - np.asarray(alpha)) - np.asarray(delta)
    proj = np.einsum("kd,kd->k", x_rows, u_locals - np.asarray(w_inner)[None, :])
    return float(coef @ proj) / n


def accumulate_S(R_values, mu):
    """sum_j mu^(m-j) R_j for j = 1..m."""
    S = 0.0
    for r in R_values:
        S = mu * S + r
    return S


def running_S(R_values, mu):
    out = np.empty(len(R_values))
    S = 0.0
    for j, r in enumerate(R_values):
        S = mu * S + r
        out[j] = S
    return out


def practical_s(L, lam, n, K):
    """s = n/(cK + n) with c = L/lam."""
    return n / ((L / lam) * K + n)


def practical_mu(L, lam, n, K):
    return 1.0 - practical_s(L, lam, n, K) * K / n


@dataclass(frozen=True)
class BoundParams:
    L: float
    lam: float
    n: int
    m: int
    K: int
    epsilon0: float
    variant: str

    @property
    def c(self):
        return self.L / self.lam


def theorem_bound(params, t):
    """(dual suboptimality bound, duality gap bound) after t rounds.

    Outside kappa >= 1 (naive) or K <= c + n (orthogonal) the per-round factor
    would be negative, so the bound says nothing and ConfigError is raised.
    """
    c, n, m, K, eps0 = params.c, params.n, params.m, params.K, params.epsilon0
    if params.variant == "naive":
        kappa = c + n / (m * K)
        if kappa < 1.0:
            raise ConfigError(f"naive bound needs c + n/(mK) >= 1, got {kappa:g}")
        dual = (1.0 - 1.0 / kappa) ** t * eps0
        return dual, kappa * dual
    if params.variant == "orthogonal":
        if K > c + n:
            raise ConfigError(f"orthogonal bound needs K <= c + n, got K={K}, c + n={c + n:g}")
        rate = (1.0 - K / (c + n)) ** (m * t)
        return rate * eps0, (c + n) / K * rate * eps0
    raise ConfigError(f"no closed-form bound for the {params.variant!r} variant")


def epsilon_fit(trace):
    """Per-round decay ratios eps(t+1)/eps(t) and S(t,m)/eps(t+1).

    Uses round-level records (j == -1) carrying epsilon; S is taken from the
    record that closes the round.
    """
    rounds = [r for r in trace if r.j == -1 and r.epsilon is not None]
    out = []
    for prev, cur in zip(rounds, rounds[1:]):
        ratio = cur.epsilon / prev.epsilon if prev.epsilon > 0 else math.nan
        s_ratio = None
        if cur.S is not None and cur.epsilon > 0:
            s_ratio = cur.S / cur.epsilon
        out.append({"t": cur.t, "epsilon": cur.epsilon, "decay_ratio": ratio, "S": cur.S, "S_over_epsilon": s_ratio})
    return out


def write_trace_csv(path_or_file, records, config_lines=()):
    """Write '# key=value' lines, the header row, then one row per record."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        for line in config_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())
    finally:
        if own:
            fh.close()


def write_rows_csv(path, header, rows, config_lines=()):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in config_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])


def read_trace_csv(path_or_text):
    """Parse a trace CSV back into TraceRecords (comment lines skipped)."""
    if "\n" in str(path_or_text):
        text = path_or_text
    else:
        with open(path_or_text, encoding="utf-8") as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.reader(io.StringIO("\n".join(lines)))
    header = next(reader)
    if tuple(header) != TRACE_COLUMNS:
        raise ValueError(f"unexpected trace header {header}")
    out = []
    for row in reader:
        vals = {}
        for name, v in zip(header, row):
            if name in ("t", "j"):
                vals[name] = int(v)
            else:
                vals[name] = float(v) if v != "" else None
        out.append(TraceRecord(**vals))
    return out
