"""Distributed dual coordinate ascent: the round loop, its variants and drivers.

Every worker k keeps dual variables for its shard and a local primal ``u``.
A round samples m shard examples per worker, updates their duals, rebuilds
the worker model from its duals and reduces the K models into the global w:

==========  ============  ===================  ========  =======
variant     margin uses   penalty scale        u step    reduce
==========  ============  ===================  ========  =======
naive       w^{t-1}       m K                  (none)    average
practical   u             K                    K/(lam n) average
orthogonal  u             1                    1/(lam n) sum
==========  ============  ===================  ========  =======

All three reduce to w = (1/(lam n)) sum_i alpha_i x_i.
"""
import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from . import comm as comm_mod
from . import kernels
from .diagnostics import TraceRecord, practical_s
from .errors import ConfigError, NotConvergedError, NumericalError, UnsupportedModeError
from .model import LossModel

log = logging.getLogger(__name__)

VARIANTS = ("naive", "practical", "orthogonal")
SAMPLING = ("with_replacement", "without_replacement_per_round")


@dataclass(frozen=True)
class SolverConfig:
    variant: str = "practical"
    K: int = 1
    m: int = 1
    T: int = 1
    lam: float = 1e-3
    loss: str = "squared_hinge"
    seed: int = 0
    one_communication: bool = False
    local_gap_tol: float = 1e-6
    sampling: str = "with_replacement"
    orthogonality_residual: float = None
    orthogonality_threshold: float = 1e-12
    smoothness: float = None
    constrained: bool = True
    max_local_epochs: int = 100_000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.sampling not in SAMPLING:
            raise ConfigError(f"unknown sampling {self.sampling!r}; expected one of {SAMPLING}")
        for name in ("K", "m"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.T < 0:
            raise ConfigError("T must be >= 0")
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if not self.local_gap_tol > 0:
            raise ConfigError("local_gap_tol must be positive")
        if self.variant == "orthogonal" and self.K > 1:
            r = self.orthogonality_residual
            if r is None or not r <= self.orthogonality_threshold:
                raise ConfigError(
                    "the orthogonal variant needs shards whose examples are mutually orthogonal "
                    f"(orthogonality residual {r!r}, threshold {self.orthogonality_threshold})"
                )
        LossModel(self.loss, self.smoothness)

    @property
    def loss_model(self):
        return LossModel(self.loss, self.smoothness)

    @property
    def scale(self):
        if self.variant == "naive":
            return self.m * self.K
        if self.variant == "practical":
            return self.K
        return 1

    @property
    def model_factor(self):
        """Worker model is model_factor/(lam n) * sum over its shard of alpha_i x_i."""
        return 1 if self.variant == "orthogonal" else self.K

    @property
    def reduce_op(self):
        return "sum" if self.variant == "orthogonal" else "average"


@dataclass
class WorkerState:
    worker_id: int
    shard: np.ndarray
    u: np.ndarray
    w_local: np.ndarray
    rng: np.random.Generator


@dataclass
class Reference:
    w: np.ndarray
    alpha: np.ndarray
    dual: float
    primal: float
    gap: float
    rounds: int


@dataclass
class SolverResult:
    w: np.ndarray
    alpha: np.ndarray
    trace: list
    rounds_run: int
    inner: list = field(default_factory=list)
    locally_converged: bool = True
    local_gaps: list = field(default_factory=list)


@dataclass
class InnerDiagnostics:
    """Per-step quantities of one lockstep round (index j-1 holds step j)."""

    t: int
    R: np.ndarray
    S: np.ndarray
    dual: np.ndarray
    primal_before: np.ndarray
    dual_start: float


def draw_picks(rng, size, m, sampling):
    if sampling == "with_replacement":
        return rng.integers(0, size, size=m, dtype=np.int64)
    reps = -(-m // size)
    return np.concatenate([rng.permutation(size) for _ in range(reps)])[:m].astype(np.int64)


class _Problem:
    """Kernel-ready view of (data, loss, lambda)."""

    def __init__(self, ds, cfg):
        loss = cfg.loss_model
        if loss.is_classification and not np.all(np.abs(ds.y) == 1.0):
            raise ConfigError(f"{loss.kind} needs labels in {{-1, +1}}")
        self.ds = ds
        self.code = loss.code
        self.indptr, self.indices, self.data = ds.csr()
        self.xnorm2 = np.ascontiguousarray(ds.row_norms_sq)
        self.y = ds.y
        self.n = ds.n
        self.d = ds.dim
        self.lam = float(cfg.lam)
        self.all_rows = np.arange(ds.n, dtype=np.int64)

    def model(self, alpha, rows, factor):
        return kernels.weighted_row_sum(
            self.indptr, self.indices, self.data, alpha, rows, factor / (self.lam * self.n), self.d
        )

    def primal(self, w):
        return (
            kernels.loss_sum(self.code, self.indptr, self.indices, self.data, self.y, w, self.all_rows) / self.n
            + 0.5 * self.lam * kernels.sq_norm(w)
        )

    def dual_from(self, conj_total, w):
        return conj_total / self.n - 0.5 * self.lam * kernels.sq_norm(w)


def _check_finite(w, alpha, t):
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(alpha))):
        raise NumericalError(f"non-finite iterate after round {t}")


class _Driver:
    """Round machinery shared by the single-thread, threaded and TCP paths."""

    def __init__(self, cfg, ds, part, reference=None):
        if part.K != cfg.K:
            raise ConfigError(f"partition has K={part.K}, config has K={cfg.K}")
        if part.n != ds.n:
            raise ConfigError("partition does not match the dataset")
        self.cfg = cfg
        self.prob = _Problem(ds, cfg)
        self.part = part
        self.reference = reference
        self.alpha = np.zeros(ds.n)
        self.w = np.zeros(ds.dim)

    def new_worker(self, k):
        d = self.prob.d
        return WorkerState(
            worker_id=k,
            shard=np.ascontiguousarray(self.part.shards[k], dtype=np.int64),
            u=np.zeros(d),
            w_local=np.zeros(d),
            rng=np.random.default_rng(self.cfg.seed + k),
        )

    def local_round(self, ws, w_prev, t):
        cfg, pr = self.cfg, self.prob
        picks = draw_picks(ws.rng, len(ws.shard), cfg.m, cfg.sampling)
        ws.u = w_prev.copy()
        status = kernels.worker_round(
            pr.code, pr.indptr, pr.indices, pr.data, pr.xnorm2, pr.y, self.alpha, ws.shard, picks,
            w_prev, ws.u, float(cfg.scale), cfg.model_factor / (pr.lam * pr.n), pr.lam, float(pr.n),
            cfg.variant == "naive", cfg.constrained,
        )
        if status >= 0:
            raise NumericalError(f"worker {ws.worker_id}: dual update failed at round {t}, step {status + 1}")

    def contribution(self, ws):
        pr = self.prob
        ws.w_local = pr.model(self.alpha, ws.shard, self.cfg.model_factor)
        conj = kernels.neg_conj_sum(pr.code, pr.y, self.alpha, ws.shard)
        return np.append(ws.w_local, conj)

    def combine(self, total):
        d = self.prob.d
        w = comm_mod.finish(total[:d], self.cfg.K, self.cfg.reduce_op)
        return w, float(total[d])

    def record(self, t, w, conj_total, S=None):
        pr = self.prob
        dual = pr.dual_from(conj_total, w)
        primal = pr.primal(w)
        eps = dist = None
        if self.reference is not None:
            eps = self.reference.dual - dual
            dist = float(np.linalg.norm(w - self.reference.w))
        return TraceRecord(t, -1, dual, primal, primal - dual, eps, None, S, dist)

    def initial_record(self, sink):
        rec = self.record(0, self.w, 0.0)
        sink(rec)
        return rec


def _emit_inner(sink, driver, diag):
    ref = driver.reference
    m = len(diag.R)
    for j in range(m):
        dual = float(diag.dual[j])
        primal = float(diag.primal_before[j + 1]) if j + 1 < m else None
        if primal is None:
            continue
        eps = ref.dual - dual if ref is not None else None
        sink(TraceRecord(diag.t, j + 1, dual, primal, primal - dual, eps, float(diag.R[j]), float(diag.S[j]), None))


def run_disdca(config, ds, p, comm="in_process", sink=None, reference=None, lockstep=False,
               inner_records=False):
    """Run T rounds and return the final model, duals and trace.

    ``comm`` is ``"in_process"`` (one thread, workers visited in id order) or
    ``"threads"`` (one thread per worker, barrier reduce).  ``lockstep``
    interleaves the workers step by step to measure R and S each round;
    ``inner_records`` additionally traces every inner step.  All paths give
    bit-identical iterates for the same seeds.
    """
    cfg = config
    trace = []
    emit = trace.append if sink is None else (lambda r: (trace.append(r), sink(r)))
    if comm == "threads":
        if lockstep or inner_records:
            raise UnsupportedModeError("R/S diagnostics need the single-thread lockstep mode")
        return _run_threads(cfg, ds, p, emit, trace, reference)
    if comm != "in_process":
        raise ConfigError(f"run_disdca supports comm='in_process' or 'threads', got {comm!r}")

    drv = _Driver(cfg, ds, p, reference)
    workers = [drv.new_worker(k) for k in range(cfg.K)]
    drv.initial_record(emit)
    inner = []
    lockstep = lockstep or inner_records
    for t in range(1, cfg.T + 1):
        S = None
        if lockstep:
            diag = _lockstep_round(drv, workers, drv.w, t)
            inner.append(diag)
            S = float(diag.S[-1])
            if inner_records:
                _emit_inner(emit, drv, diag)
        else:
            for ws in workers:
                drv.local_round(ws, drv.w, t)
        total = comm_mod.fixed_order_sum([drv.contribution(ws) for ws in workers])
        drv.w, conj_total = drv.combine(total)
        _check_finite(drv.w, drv.alpha, t)
        emit(drv.record(t, drv.w, conj_total, S))
    return SolverResult(drv.w, drv.alpha, trace, cfg.T, inner)


def _lockstep_round(drv, workers, w_prev, t):
    cfg, pr = drv.cfg, drv.prob
    K, m = cfg.K, cfg.m
    picks = np.empty((K, m), dtype=np.int64)
    for ws in workers:
        picks[ws.worker_id] = draw_picks(ws.rng, len(ws.shard), m, cfg.sampling)
        ws.u = w_prev.copy()
    shards = drv.part.padded_shards()
    U = np.array([ws.u for ws in workers])
    # the reduced model is (1/(lam n)) sum alpha_i x_i, so u_k - w starts at exactly 0
    w_virtual = w_prev.copy()
    conj = kernels.neg_conj_sum(pr.code, pr.y, drv.alpha, pr.all_rows)
    dual_start = pr.dual_from(conj, w_virtual)
    L = cfg.loss_model.smoothness
    s = practical_s(L, pr.lam, pr.n, K)
    R = np.zeros(m)
    D = np.zeros(m)
    P = np.zeros(m)
    out = kernels.lockstep_round(
        pr.code, pr.indptr, pr.indices, pr.data, pr.xnorm2, pr.y, drv.alpha, shards, picks,
        w_prev, U, w_virtual, float(cfg.scale), cfg.model_factor / (pr.lam * pr.n), 1.0 / (pr.lam * pr.n),
        pr.lam, float(pr.n), cfg.variant == "naive", cfg.constrained, s, conj, True, R, D, P,
    )
    if out != out:
        raise NumericalError(f"dual update failed in lockstep round {t}")
    for ws in workers:
        ws.u = U[ws.worker_id].copy()
    mu = 1.0 - s * K / pr.n
    S = np.empty(m)
    acc = 0.0
    for j in range(m):
        acc = mu * acc + R[j]
        S[j] = acc
    return InnerDiagnostics(t, R, S, D, P, dual_start)


def run_worker(config, ds, p, worker_id, channel, sink=None, reference=None):
    """One worker's side of DisDCA over a reduce channel of dimension d+1.

    The extra slot carries the worker's share of sum -phi*(-alpha_i), so
    every worker can evaluate the global dual after the reduce.  Only
    entries of ``alpha`` on this worker's shard are filled in the result.
    """
    cfg = config
    trace = []
    emit = trace.append if sink is None else (lambda r: (trace.append(r), sink(r)))
    drv = _Driver(cfg, ds, p, reference)
    ws = drv.new_worker(worker_id)
    drv.initial_record(emit)
    for t in range(1, cfg.T + 1):
        drv.local_round(ws, drv.w, t)
        total = channel.allreduce_sum(drv.contribution(ws))
        drv.w, conj_total = drv.combine(total)
        _check_finite(drv.w, drv.alpha, t)
        emit(drv.record(t, drv.w, conj_total))
    return SolverResult(drv.w, drv.alpha, trace, cfg.T)


def _run_threads(cfg, ds, p, emit, trace, reference):
    group = comm_mod.InProcessGroup(cfg.K)
    results = [None] * cfg.K
    errors = []

    def work(k):
        try:
            results[k] = run_worker(cfg, ds, p, k, group.channel(k), emit if k == 0 else None, reference)
        except BaseException as exc:  # noqa: BLE001 - surfaced after join
            errors.append(exc)
            group._barrier.abort()
            group._release.abort()

    threads = [threading.Thread(target=work, args=(k,), name=f"disdca-worker-{k}") for k in range(cfg.K)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    alpha = np.zeros(ds.n)
    for k, res in enumerate(results):
        shard = p.shards[k]
        alpha[shard] = res.alpha[shard]
    return SolverResult(results[0].w, alpha, trace, cfg.T)


def run_one_communication(config, ds, p, reference=None):
    """Solve each shard's sub-problem locally, then reduce once.

    Worker k maximizes (1/n) sum_{i in k} -phi*(-alpha_i) - lam/(2a) ||u||^2
    with u = a/(lam n) sum_{i in k} alpha_i x_i and a = 1 (orthogonal) or K
    (practical), stopping when that sub-problem's duality gap drops below
    ``local_gap_tol``.  The orthogonal sub-problems add up to the full dual.
    """
    cfg = config
    if cfg.variant == "naive":
        raise ConfigError("one-communication runs use the practical or orthogonal updates")
    drv = _Driver(cfg, ds, p, reference)
    pr = drv.prob
    a = float(cfg.model_factor)
    trace = []
    drv.initial_record(trace.append)
    workers = [drv.new_worker(k) for k in range(cfg.K)]
    local_gaps = []
    converged = True
    for ws in workers:
        size = len(ws.shard)
        gap = np.inf
        for _ in range(cfg.max_local_epochs):
            picks = draw_picks(ws.rng, size, size, cfg.sampling)
            status = kernels.worker_round(
                pr.code, pr.indptr, pr.indices, pr.data, pr.xnorm2, pr.y, drv.alpha, ws.shard, picks,
                ws.u, ws.u, float(cfg.scale), a / (pr.lam * pr.n), pr.lam, float(pr.n), False, cfg.constrained,
            )
            if status >= 0:
                raise NumericalError(f"worker {ws.worker_id}: local dual update failed")
            ws.u = pr.model(drv.alpha, ws.shard, a)
            quad = 0.5 * pr.lam / a * kernels.sq_norm(ws.u)
            local_dual = kernels.neg_conj_sum(pr.code, pr.y, drv.alpha, ws.shard) / pr.n - quad
            local_primal = (
                kernels.loss_sum(pr.code, pr.indptr, pr.indices, pr.data, pr.y, ws.u, ws.shard) / pr.n + quad
            )
            gap = local_primal - local_dual
            if gap <= cfg.local_gap_tol:
                break
        else:
            converged = False
            log.warning("worker %d stopped at local gap %.3g after %d epochs",
                        ws.worker_id, gap, cfg.max_local_epochs)
        local_gaps.append(gap)
    total = comm_mod.fixed_order_sum([drv.contribution(ws) for ws in workers])
    drv.w, conj_total = drv.combine(total)
    _check_finite(drv.w, drv.alpha, 1)
    trace.append(drv.record(1, drv.w, conj_total))
    return SolverResult(drv.w, drv.alpha, trace, 1, locally_converged=converged, local_gaps=local_gaps)


def run_sdca_reference(ds, lam, loss="squared_hinge", gap_tol=1e-10, seed=0, max_epochs=10**6,
                       smoothness=None, constrained=True, check_every=1):
    """Single-machine practical run, one epoch per round, until the gap is <= gap_tol."""
    from .data import partition

    cfg = SolverConfig(variant="practical", K=1, m=ds.n, T=0, lam=lam, loss=loss, seed=seed,
                       smoothness=smoothness, constrained=constrained)
    drv = _Driver(cfg, ds, partition(ds, 1), None)
    ws = drv.new_worker(0)
    for t in range(1, max_epochs + 1):
        drv.local_round(ws, drv.w, t)
        drv.w, conj_total = drv.combine(drv.contribution(ws))
        _check_finite(drv.w, drv.alpha, t)
        if t % check_every == 0 or t == max_epochs:
            dual = drv.prob.dual_from(conj_total, drv.w)
            primal = drv.prob.primal(drv.w)
            if primal - dual <= gap_tol:
                return Reference(drv.w, drv.alpha, dual, primal, primal - dual, t)
    raise NotConvergedError(f"reference not converged: gap {primal - dual:.3e} after {max_epochs} epochs")
