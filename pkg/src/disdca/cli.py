"""Experiment runner.

Configuration is a flat ``key=value`` file (``#`` starts a comment) plus
``--set key=value`` overrides.  Every CSV starts with the resolved
configuration as ``# key=value`` lines.  Transport settings (``comm.*``) and
``output.path`` are left out of that header so that runs over TCP and
in-process produce identical files.
"""
import argparse
import logging
import sys
from pathlib import Path

from . import comm as comm_mod
from .data import (
    binarize_labels,
    generate_synthetic,
    load_libsvm,
    normalize_unit_ball,
    orthogonality_residual,
    partition,
    save_libsvm,
)
from .diagnostics import BoundParams, epsilon_fit, theorem_bound, write_rows_csv, write_trace_csv
from .errors import BoundViolation, ConfigError, DataError, DisdcaError
from .model import LossModel
from .solver import SolverConfig, run_disdca, run_one_communication, run_sdca_reference, run_worker

log = logging.getLogger("disdca")


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _str_list(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


# key -> (parser, default)
KEYS = {
    "variant": (str, "practical"),
    "K": (_int_list, "1"),
    "m": (_int_list, "1"),
    "T": (int, "10"),
    "lambda": (float, "1e-3"),
    "loss": (str, "squared_hinge"),
    "loss.smoothness": (float, ""),
    "loss.constrained": (_bool, "true"),
    "seed": (int, "0"),
    "sampling": (str, "with_replacement"),
    "data.path": (str, ""),
    "data.labels": (str, "auto"),
    "data.synthetic.groups": (int, "10"),
    "data.synthetic.group_dim": (int, "5"),
    "data.synthetic.points": (int, "200"),
    "data.synthetic.seed": (int, "0"),
    "partition.scheme": (_str_list, "block"),
    "partition.seed": (int, "0"),
    "comm.mode": (str, "in_process"),
    "comm.listen": (str, "127.0.0.1:5555"),
    "comm.connect": (str, "127.0.0.1:5555"),
    "comm.timeout": (float, "30"),
    "diagnostics.enabled": (_bool, "false"),
    "diagnostics.reference_tol": (float, "1e-10"),
    "diagnostics.lockstep": (_bool, "false"),
    "diagnostics.inner": (_bool, "false"),
    "one_comm.local_gap_tol": (float, "1e-6"),
    "one_comm.max_epochs": (int, "100000"),
    "bounds.slack": (float, "1e-9"),
    "output.path": (str, "trace.csv"),
}
HEADER_EXCLUDE_PREFIXES = ("comm.", "output.")


class ExperimentConfig:
    """Resolved key=value configuration; unknown keys are rejected."""

    def __init__(self, raw=None):
        self.raw = {k: default for k, (_, default) in KEYS.items()}
        for key, value in (raw or {}).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        value = str(value).strip()
        parser = KEYS[key][0]
        if value != "":
            try:
                parser(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        self.raw[key] = value

    def get(self, key):
        value = self.raw[key]
        if value == "":
            return None
        return KEYS[key][0](value)

    def single(self, key):
        values = self.get(key)
        if len(values) != 1:
            raise ConfigError(f"{key} must be a single value here, got {values}")
        return values[0]

    def header_lines(self, **extra):
        items = dict(self.raw)
        items.update({k: str(v) for k, v in extra.items()})
        return [f"{k}={v}" for k, v in sorted(items.items()) if not k.startswith(HEADER_EXCLUDE_PREFIXES)]

    @classmethod
    def from_file(cls, path):
        raw = {}
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from None
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            raw[key.strip()] = value.strip()
        return cls(raw)


def load_config(args):
    cfg = ExperimentConfig.from_file(args.config) if getattr(args, "config", None) else ExperimentConfig()
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value)
    return cfg


def load_dataset(cfg):
    path = cfg.get("data.path")
    if path:
        ds = normalize_unit_ball(load_libsvm(path))
    else:
        ds = generate_synthetic(
            cfg.get("data.synthetic.groups"),
            cfg.get("data.synthetic.group_dim"),
            cfg.get("data.synthetic.points"),
            cfg.get("data.synthetic.seed"),
        )
    labels = cfg.get("data.labels")
    if labels not in ("auto", "raw", "sign"):
        raise ConfigError("data.labels must be auto, raw or sign")
    if labels == "sign" or (labels == "auto" and LossModel(cfg.get("loss")).is_classification):
        ds = binarize_labels(ds)
    return ds


def solver_config(cfg, ds, part, variant=None, K=None, m=None):
    variant = variant or cfg.get("variant")
    residual = None
    if variant == "orthogonal":
        residual = orthogonality_residual(ds, part)
    return SolverConfig(
        variant=variant,
        K=K if K is not None else cfg.single("K"),
        m=m if m is not None else cfg.single("m"),
        T=cfg.get("T"),
        lam=cfg.get("lambda"),
        loss=cfg.get("loss"),
        seed=cfg.get("seed"),
        sampling=cfg.get("sampling"),
        local_gap_tol=cfg.get("one_comm.local_gap_tol"),
        max_local_epochs=cfg.get("one_comm.max_epochs"),
        orthogonality_residual=residual,
        smoothness=cfg.get("loss.smoothness"),
        constrained=cfg.get("loss.constrained"),
    )


def reference_for(cfg, ds):
    return run_sdca_reference(
        ds, cfg.get("lambda"), cfg.get("loss"), gap_tol=cfg.get("diagnostics.reference_tol"),
        seed=cfg.get("seed"), smoothness=cfg.get("loss.smoothness"), constrained=cfg.get("loss.constrained"),
    )


def _suffixed(path, tag):
    p = Path(path)
    return p.with_name(f"{p.stem}_{tag}{p.suffix}")


def cmd_solve(cfg):
    mode = cfg.get("comm.mode")
    if mode not in ("in_process", "threads"):
        raise ConfigError("solve runs in_process or threads; use the coordinator/worker commands for tcp")
    ds = load_dataset(cfg)
    K = cfg.single("K")
    part = partition(ds, K, cfg.single("partition.scheme"), cfg.get("partition.seed"))
    reference = reference_for(cfg, ds) if cfg.get("diagnostics.enabled") else None
    ms = cfg.get("m")
    out = cfg.get("output.path")
    for m in ms:
        sc = solver_config(cfg, ds, part, m=m)
        res = run_disdca(
            sc, ds, part, comm=mode, reference=reference,
            lockstep=cfg.get("diagnostics.lockstep"), inner_records=cfg.get("diagnostics.inner"),
        )
        path = out if len(ms) == 1 else _suffixed(out, f"m{m}")
        write_trace_csv(path, res.trace, cfg.header_lines(m=m))
        last = res.trace[-1]
        log.info("m=%d: final gap %.6g -> %s", m, last.gap, path)
    return 0


def cmd_diagnose(cfg):
    cfg.set("diagnostics.enabled", "true")
    cfg.set("diagnostics.lockstep", "true")
    ds = load_dataset(cfg)
    K = cfg.single("K")
    part = partition(ds, K, cfg.single("partition.scheme"), cfg.get("partition.seed"))
    reference = reference_for(cfg, ds)
    sc = solver_config(cfg, ds, part)
    res = run_disdca(sc, ds, part, reference=reference, lockstep=True, inner_records=cfg.get("diagnostics.inner"))
    out = cfg.get("output.path")
    header = cfg.header_lines()
    write_trace_csv(out, res.trace, header)
    fit = epsilon_fit(res.trace)
    write_rows_csv(
        _suffixed(out, "fit"), ["t", "epsilon", "decay_ratio", "S", "S_over_epsilon"],
        [[r["t"], r["epsilon"], r["decay_ratio"], r["S"], r["S_over_epsilon"]] for r in fit], header,
    )
    return 0


def cmd_one_comm(cfg):
    ds = load_dataset(cfg)
    reference = reference_for(cfg, ds)
    rows = []
    for K in cfg.get("K"):
        for scheme in cfg.get("partition.scheme"):
            part = partition(ds, K, scheme, cfg.get("partition.seed"))
            variant = "orthogonal" if scheme == "block" and orthogonality_residual(ds, part) <= 1e-12 else "practical"
            sc = solver_config(cfg, ds, part, variant=variant, K=K, m=1)
            res = run_one_communication(sc, ds, part, reference=reference)
            last = res.trace[-1]
            rows.append([K, scheme, variant, last.dist_to_opt, last.gap, int(res.locally_converged)])
            log.info("K=%d %s (%s): gap %.3g, |w-w*| %.3g", K, scheme, variant, last.gap, last.dist_to_opt)
    write_rows_csv(
        cfg.get("output.path"), ["K", "scheme", "variant", "dist_to_opt", "gap", "locally_converged"], rows,
        cfg.header_lines(),
    )
    return 0


def cmd_check_bounds(cfg):
    variant = cfg.get("variant")
    if variant not in ("naive", "orthogonal"):
        raise ConfigError(f"no closed-form bound for the {variant!r} variant; use naive or orthogonal")
    ds = load_dataset(cfg)
    K = cfg.single("K")
    part = partition(ds, K, cfg.single("partition.scheme"), cfg.get("partition.seed"))
    sc = solver_config(cfg, ds, part)
    reference = reference_for(cfg, ds)
    res = run_disdca(sc, ds, part, reference=reference)
    eps0 = reference.dual - res.trace[0].dual_obj
    params = BoundParams(sc.loss_model.smoothness, sc.lam, ds.n, sc.m, sc.K, eps0, variant)
    slack = cfg.get("bounds.slack")
    rows, ok = [], True
    for rec in res.trace:
        dual_bound, gap_bound = theorem_bound(params, rec.t)
        within = rec.epsilon <= dual_bound + slack
        ok &= within
        rows.append([rec.t, rec.epsilon, dual_bound, rec.gap, gap_bound, int(within)])
    write_rows_csv(
        cfg.get("output.path"), ["t", "epsilon", "dual_bound", "gap", "gap_bound", "within_bound"], rows,
        cfg.header_lines(),
    )
    if not ok:
        raise BoundViolation("measured dual suboptimality exceeded the bound")
    return 0


def cmd_synth(args):
    ds = generate_synthetic(args.groups, args.group_dim, args.points_per_group, args.seed)
    if args.labels == "sign":
        ds = binarize_labels(ds)
    try:
        save_libsvm(ds, args.output)
    except OSError as exc:
        raise DataError(f"cannot write {args.output}: {exc}") from None
    log.info("wrote %d examples of dimension %d to %s", ds.n, ds.dim, args.output)
    return 0


def cmd_coordinator(args):
    try:
        listen = comm_mod.parse_address(args.listen)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        coord = comm_mod.Coordinator(listen, args.workers, args.dim + 1, timeout=args.timeout)
    except OSError as exc:
        raise DataError(f"cannot bind {args.listen}: {exc}") from None
    log.info("coordinator listening on %s:%d for %d workers", *coord.address, args.workers)
    rounds = coord.serve()
    log.info("coordinator done after %d rounds", rounds)
    return 0


def cmd_worker(cfg, args):
    ds = load_dataset(cfg)
    K = cfg.single("K")
    part = partition(ds, K, cfg.single("partition.scheme"), cfg.get("partition.seed"))
    sc = solver_config(cfg, ds, part)
    if not 0 <= args.worker_id < K:
        raise ConfigError(f"worker id {args.worker_id} out of range for K={K}")
    reference = reference_for(cfg, ds) if cfg.get("diagnostics.enabled") else None
    dim = args.dim if args.dim is not None else ds.dim
    try:
        address = comm_mod.parse_address(args.connect or cfg.get("comm.connect"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    channel = comm_mod.TcpChannel(address, args.worker_id, dim + 1, K, timeout=cfg.get("comm.timeout"))
    try:
        res = run_worker(sc, ds, part, args.worker_id, channel, reference=reference)
    finally:
        channel.close()
    if args.worker_id == 0:
        write_trace_csv(cfg.get("output.path"), res.trace, cfg.header_lines(m=sc.m))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="disdca", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    add = sub.add_parser

    def add_parser(name, **kw):
        return add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    def with_config(p):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return p

    with_config(sub.add_parser("solve", help="run DisDCA and write a trace CSV per m"))
    with_config(sub.add_parser("one-comm", help="one-communication runs over K and partition schemes"))
    with_config(sub.add_parser("check-bounds", help="compare measured suboptimality with the rate bounds"))
    with_config(sub.add_parser("diagnose", help="lockstep run recording R, S and epsilon decay"))

    p = sub.add_parser("synth", help="write the block-sparse synthetic data set as libsvm")
    p.add_argument("--groups", type=int, default=50)
    p.add_argument("--group-dim", type=int, default=5)
    p.add_argument("--points-per-group", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labels", choices=("raw", "sign"), default="raw")
    p.add_argument("--output", required=True)

    p = sub.add_parser("coordinator", help="serve the reduce step for K TCP workers")
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--workers", type=int, required=True)
    p.add_argument("--dim", type=int, required=True, help="model dimension d (frames carry d+1 values)")
    p.add_argument("--timeout", type=float, default=comm_mod.DEFAULT_TIMEOUT)

    p = with_config(sub.add_parser("worker", help="run one DisDCA worker against a coordinator"))
    p.add_argument("--connect", metavar="HOST:PORT")
    p.add_argument("--worker-id", type=int, required=True)
    p.add_argument("--dim", type=int, help="declared model dimension (defaults to the data's)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "coordinator":
            return cmd_coordinator(args)
        cfg = load_config(args)
        if args.command == "worker":
            return cmd_worker(cfg, args)
        handler = {
            "solve": cmd_solve,
            "one-comm": cmd_one_comm,
            "check-bounds": cmd_check_bounds,
            "diagnose": cmd_diagnose,
        }[args.command]
        return handler(cfg)
    except DisdcaError as exc:
        print(f"disdca {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
