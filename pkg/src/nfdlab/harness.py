"""Experiment harness: declarative configs, seed management, tidy CSV output.

Each experiment maps one claim about deep residual networks to a desk-scale
run. Results are flat records (one metric per row) carrying schema version,
config hash, and seed, so every CSV is self-describing and reproducible.
Runners are generators that complete one grid point at a time; the CSV
writer flushes after every record, so a killed run loses at most the
in-flight grid point.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import data as data_mod
from . import kernel as kernel_mod
from . import limit_sim as limit_mod
from . import net as net_mod
from .data import (
    MSE,
    Dataset,
    cifar10_read,
    data_dir,
    online_sampler,
    sphere_inputs,
    teacher_dataset,
)
from .errors import ConfigError, DomainError
from .net import NetConfig, backward, forward, init_params, output_gradients, sgd_step
from .numerics import Rng

SCHEMA_VERSION = 1

# experiment -> claim probed; the text doubles as CLI help so every
# experiment documents what it demonstrates
EXPERIMENTS: Dict[str, str] = {
    "gradcheck": "analytic gradients match central finite differences for "
    "every block type and activation",
    "preact_postact": "post-activation residual blocks blow up with depth "
    "while pre-activation blocks keep ||h_L||/sqrt(n) stable",
    "init_sde_convergence": "finite-depth layer variance approaches the "
    "limiting e^T law at rate 1/L",
    "nfd_train_convergence": "trained finite-network outputs approach the "
    "limiting feature dynamics at rate 1/L + 1/n",
    "gia": "the forward-backward weight correlation (GIA breach) vanishes "
    "with depth under depth-scaled updates but not under plain width scaling",
    "eigen_monitor": "noise covariances of the limit dynamics stay strictly "
    "positive definite across layers and iterations",
    "collapse": "first-internal-layer learning in two-layer blocks collapses "
    "at rate 1/sqrt(L) and is restored by a depth-aware learning rate",
    "hp_sweep": "the best learning rate transfers across depth only with "
    "the depth-aware correction",
    "kernel_capacity": "larger time horizons enlarge the initialization "
    "kernel's function space (ridge-regression capacity probe)",
    "correction_gap": "the tau^2 forward-backward correlation term in the "
    "finite-depth recursion vanishes at rate 1/L",
}

_DEFAULTS: Dict[str, Dict[str, Any]] = {
    # eps balances central-difference truncation against float64 roundoff
    "gradcheck": {"n": 8, "L": 3, "d": 4, "eps": 1e-4},
    "preact_postact": {"n": 128, "d": 8, "depths": [16, 64, 256], "T": 1.0},
    "init_sde_convergence": {
        "n": 1024,
        "d": 8,
        "depths": [4, 8, 16, 32, 64, 128],
        "T": 1.0,
    },
    "nfd_train_convergence": {
        "d": 4,
        "k_max": 2,
        "eta_c": 1.0,
        "activation": "tanh",
        "backward": "decoupled",
        "n_fixed": 2048,
        "L_grid": [8, 16, 32, 64, 128],
        "L_fixed": 128,
        "n_grid": [64, 128, 256, 512, 1024, 2048],
        "particles": 50000,
        "steps_ref": 512,
        "T": 1.0,
    },
    "gia": {
        "n": 128,
        "d": 8,
        "depths": [4, 8, 16, 32, 64],
        "steps": 50,
        "eta_c": 0.05,
        "T": 0.0625,
        "activation": "relu",
        "depth_scaled": True,
        "batch": 16,
    },
    "eigen_monitor": {
        "d": 4,
        "steps_L": 32,
        "particles": 10000,
        "k_max": 3,
        "eta_c": 0.5,
        "activation": "relu",
        "duplicate_input": False,
        "T": 1.0,
    },
    "collapse": {
        "n": 128,
        "d": 8,
        "depths": [4, 8, 16, 32, 64],
        "steps": 300,
        "eta_c": 0.1,
        "activation": "tanh",
        "depth_aware_lr": False,
        "batch": 1,
    },
    "hp_sweep": {
        "n": 256,
        "d": 8,
        "depths": [3, 6, 9],
        "eta_grid": [0.125, 0.25, 0.5, 1.0, 2.0],
        "steps": 100,
        "tail": 16,
        "depth_aware_lr": True,
        "batch": 6,
    },
    "kernel_capacity": {
        "d": 8,
        "M_train": 64,
        "M_test": 64,
        "horizons": [0.25, 1.0, 4.0],
        "steps": 128,
        "particles": 20000,
        "ridge": 1e-3,
        "activation": "relu",
    },
    "correction_gap": {
        "d": 4,
        "steps_grid": [8, 16, 32, 64, 128],
        "particles": 20000,
        "k_max": 2,
        "eta_c": 0.5,
        "activation": "identity",
        "T": 1.0,
    },
}

# figure-scale (CIFAR, batch 128) protocol applies to the training-loop
# experiments; everything else is already at its native scale
_FIGURE_SCALE_OK = {"gia", "collapse", "hp_sweep"}


@dataclass
class ExperimentSpec:
    experiment: str
    seeds: List[int] = field(default_factory=lambda: [0])
    out: Optional[str] = None
    schema_version: int = SCHEMA_VERSION
    options: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"unknown experiment {self.experiment!r}; expected one of "
                f"{sorted(EXPERIMENTS)}",
                field="experiment",
            )
        if not self.seeds:
            raise ConfigError("seeds must be non-empty", field="seeds")
        merged = dict(_DEFAULTS[self.experiment])
        for key, val in self.options.items():
            if key not in merged:
                raise ConfigError(
                    f"unknown key {key!r} for experiment {self.experiment!r}",
                    field=key,
                )
            merged[key] = _coerce(key, val, merged[key])
        self.options = merged


def _coerce(key: str, val: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"key {key!r} expects a boolean", field=key)
        return val
    if (
        isinstance(default, float)
        and isinstance(val, (int, float))
        and not isinstance(val, bool)
    ):
        return float(val)
    if isinstance(default, int) and isinstance(val, int) and not isinstance(val, bool):
        return val
    if isinstance(default, list):
        if not isinstance(val, list):
            raise ConfigError(f"key {key!r} expects an array", field=key)
        if default and isinstance(default[0], float):
            return [float(v) for v in val]
        return list(val)
    if isinstance(default, str):
        if not isinstance(val, str):
            raise ConfigError(f"key {key!r} expects a string", field=key)
        return val
    if type(val) is not type(default):
        raise ConfigError(
            f"key {key!r} expects {type(default).__name__}, got "
            f"{type(val).__name__}",
            field=key,
        )
    return val


# ---------------------------------------------------------------------------
# config file parsing: flat key = value lines, TOML-compatible subset
# (strings, ints, floats, booleans, arrays), '#' comments, strict keys.
# ---------------------------------------------------------------------------


def _parse_scalar(tok: str, lineno: int):
    tok = tok.strip()
    if tok.startswith('"') and tok.endswith('"') and len(tok) >= 2:
        return tok[1:-1]
    if tok == "true":
        return True
    if tok == "false":
        return False
    try:
        if any(c in tok for c in ".eE") and not tok.lstrip("+-").isdigit():
            return float(tok)
        return int(tok)
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse value {tok!r}") from None


def _parse_value(tok: str, lineno: int):
    tok = tok.strip()
    if tok.startswith("["):
        if not tok.endswith("]"):
            raise ConfigError(f"line {lineno}: unterminated array {tok!r}")
        inner = tok[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(part, lineno) for part in inner.split(",")]
    return _parse_scalar(tok, lineno)


def _strip_comment(line: str) -> str:
    out, in_str = [], False
    for ch in line:
        if ch == '"':
            in_str = not in_str
        if ch == "#" and not in_str:
            break
        out.append(ch)
    return "".join(out)


def parse_config(path) -> ExperimentSpec:
    """Strict flat config: unknown keys and malformed lines are errors."""
    raw: Dict[str, Any] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = _strip_comment(line).strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            if not key.replace("_", "").isalnum():
                raise ConfigError(f"line {lineno}: bad key {key!r}")
            if key in raw:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            raw[key] = _parse_value(val, lineno)

    if "experiment" not in raw:
        raise ConfigError("config must set 'experiment'", field="experiment")
    experiment = raw.pop("experiment")
    seeds = raw.pop("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    out = raw.pop("out", None)
    schema_version = raw.pop("schema_version", SCHEMA_VERSION)
    if schema_version != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {schema_version}", field="schema_version"
        )
    return ExperimentSpec(
        experiment=experiment,
        seeds=[int(s) for s in seeds],
        out=out,
        schema_version=int(schema_version),
        options=raw,
    )


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, list):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    if isinstance(v, float):
        s = repr(v)
        return s if any(c in s for c in ".eE") else s + ".0"
    return str(v)


def serialize_config(spec: ExperimentSpec) -> str:
    lines = [
        f'experiment = "{spec.experiment}"',
        f"seeds = {_format_value(spec.seeds)}",
        f"schema_version = {spec.schema_version}",
    ]
    if spec.out is not None:
        lines.append(f'out = "{spec.out}"')
    for key in sorted(spec.options):
        lines.append(f"{key} = {_format_value(spec.options[key])}")
    return "\n".join(lines) + "\n"


def config_hash(spec: ExperimentSpec) -> str:
    return hashlib.sha256(serialize_config(spec).encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# result records
# ---------------------------------------------------------------------------

CSV_COLUMNS = [
    "schema_version",
    "config_hash",
    "experiment",
    "seed",
    "n",
    "L",
    "T",
    "eta_c",
    "k",
    "metric",
    "value",
]


@dataclass
class ResultRecord:
    experiment: str
    seed: int
    metric: str
    value: float
    n: Optional[int] = None
    L: Optional[int] = None
    T: Optional[float] = None
    eta_c: Optional[float] = None
    k: Optional[float] = None

    def row(self, spec_hash: str) -> List[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        return [
            str(SCHEMA_VERSION),
            spec_hash,
            self.experiment,
            str(self.seed),
            fmt(self.n),
            fmt(self.L),
            fmt(self.T),
            fmt(self.eta_c),
            fmt(self.k),
            self.metric,
            repr(float(self.value)),
        ]


def write_records(records: Sequence[ResultRecord], spec: ExperimentSpec, path):
    h = config_hash(spec)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(r.row(h))


def slope_fit(records, x_key: str, y_key: str) -> Tuple[float, float]:
    """Least-squares slope of log y vs log x with its standard error.

    records is any sequence of mappings (or objects) holding x_key/y_key.
    """

    def get(r, k):
        if isinstance(r, dict):
            return r[k]
        return getattr(r, k)

    xs = np.array([float(get(r, x_key)) for r in records])
    ys = np.array([float(get(r, y_key)) for r in records])
    if xs.size < 3:
        raise DomainError(f"need >= 3 points for a slope, got {xs.size}")
    if (xs <= 0).any() or (ys <= 0).any():
        raise DomainError("slope_fit requires strictly positive x and y")
    lx, ly = np.log(xs), np.log(ys)
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, _, _, _ = np.linalg.lstsq(A, ly, rcond=None)
    slope = float(coef[0])
    resid = ly - A @ coef
    dof = max(xs.size - 2, 1)
    s2 = float(resid @ resid) / dof
    sxx = float(np.sum((lx - lx.mean()) ** 2))
    stderr = math.sqrt(s2 / sxx) if sxx > 0 else float("inf")
    return slope, stderr


# ---------------------------------------------------------------------------
# shared experiment helpers
# ---------------------------------------------------------------------------


def finite_diff_max_rel_error(cfg: NetConfig, seed: int, eps: float = 1e-6) -> float:
    """Max relative error of analytic output gradients vs central differences
    over every trainable parameter of a small network."""
    rng = Rng(seed, 0)
    params = init_params(cfg, rng)
    ds = teacher_dataset(Rng(seed, 5), 8, cfg.d)
    # a few training steps so weight updates participate in the check
    net_mod.train(params, cfg, online_sampler(ds, Rng(seed, 6)), 3)
    x = ds.inputs[0]
    trace = forward(params, x, cfg)
    btrace = backward(params, trace, cfg)
    dU, dv, dW = output_gradients(params, trace, btrace, cfg)

    def f_now():
        return forward(params, x, cfg).f

    worst = 0.0

    def check(numeric, analytic):
        nonlocal worst
        denom = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / denom)

    for i in range(cfg.n):
        params.v[i] += eps
        fp = f_now()
        params.v[i] -= 2 * eps
        fm = f_now()
        params.v[i] += eps
        check((fp - fm) / (2 * eps), dv[i])
    for i in range(cfg.n):
        for j in range(cfg.d):
            params.U[i, j] += eps
            fp = f_now()
            params.U[i, j] -= 2 * eps
            fm = f_now()
            params.U[i, j] += eps
            check((fp - fm) / (2 * eps), dU[i, j])
    for ell in range(cfg.L):
        if cfg.block == "preact_two":
            pieces = [(params.dw[ell][w], dW[ell][w]) for w in (0, 1)]
        else:
            pieces = [(params.dw[ell], dW[ell])]
        for dwobj, (coef, lv, rv) in pieces:
            for i in range(cfg.n):
                for j in range(cfg.n):
                    ei = np.zeros(cfg.n)
                    ej = np.zeros(cfg.n)
                    ei[i] = 1.0
                    ej[j] = 1.0
                    dwobj.add_outer(eps, ei, ej)
                    fp = f_now()
                    dwobj.add_outer(-2 * eps, ei, ej)
                    fm = f_now()
                    dwobj.add_outer(eps, ei, ej)
                    check((fp - fm) / (2 * eps), coef * lv[i] * rv[j])
    return worst


def finite_net_outputs(
    cfg: NetConfig,
    samples: Sequence[Tuple[np.ndarray, float]],
    seed: int,
    store_dtype=np.float64,
    loss=MSE,
) -> List[float]:
    """f^(k) on sample k after k single-sample SGD steps, k = 0..len-1."""
    params = init_params(cfg, Rng(seed, 10), store_dtype=store_dtype)
    fs = []
    for x, y in samples:
        trace = forward(params, np.asarray(x, dtype=np.float64), cfg)
        fs.append(trace.f)
        btrace = backward(params, trace, cfg)
        _, ld = loss.loss_and_deriv(trace.f, y)
        sgd_step(params, trace, btrace, ld, cfg)
    return fs


def make_limit_samples(seed: int, count: int, d: int):
    """Deterministic sphere inputs with narrow-teacher labels."""
    ds = teacher_dataset(Rng(seed, 90), count, d)
    return [(ds.inputs[i], float(ds.labels[i])) for i in range(count)]


def _task_dataset(seed: int, d: int, n_points: int, figure_scale: bool) -> Dataset:
    """Synthetic teacher task, or a CIFAR-10 subset under --figure-scale."""
    if not figure_scale:
        return teacher_dataset(Rng(seed, 1), n_points, d)
    path = os.path.join(data_dir(), "data_batch_1.bin")
    if not os.path.exists(path):
        raise ConfigError(
            f"figure-scale runs need a CIFAR-10 batch at {path} "
            "(set NFDLAB_DATA_DIR)",
        )
    if 3072 % d != 0:
        raise ConfigError(f"d={d} must divide 3072 for CIFAR pooling", field="d")
    return cifar10_read(path, max_records=1024, downsample_to_d=d)


# ---------------------------------------------------------------------------
# experiment implementations (generators; one grid point per flush)
# ---------------------------------------------------------------------------


def _run_gradcheck(spec, figure_scale) -> Iterator[ResultRecord]:
    o = spec.options
    for block in net_mod.BLOCKS:
        for act in ("identity", "tanh", "relu"):
            cfg = NetConfig(
                n=o["n"], L=o["L"], d=o["d"], block=block, activation=act,
                lr_base=0.05,
            )
            for seed in spec.seeds:
                err = finite_diff_max_rel_error(cfg, seed, eps=o["eps"])
                yield ResultRecord(
                    spec.experiment, seed, f"max_rel_err/{block}/{act}", err,
                    n=o["n"], L=o["L"],
                )


def _run_preact_postact(spec, figure_scale) -> Iterator[ResultRecord]:
    o = spec.options
    for L in o["depths"]:
        for seed in spec.seeds:
            x = sphere_inputs(Rng(seed, 1), 1, o["d"])[0]
            for block in ("preact_one", "postact_one"):
                cfg = NetConfig(
                    n=o["n"], L=L, d=o["d"], T=o["T"], block=block,
                    activation="relu",
                )
                params = init_params(cfg, Rng(seed, 0))
                tr = forward(params, x, cfg)
                yield ResultRecord(
                    spec.experiment, seed, f"hL_norm_over_sqrt_n/{block}",
                    float(np.linalg.norm(tr.h[-1]) / np.sqrt(o["n"])),
                    n=o["n"], L=L, T=o["T"],
                )
                if block == "postact_one":
                    yield ResultRecord(
                        spec.experiment, seed, "hL_mean_coordinate",
                        float(np.mean(tr.h[-1])), n=o["n"], L=L, T=o["T"],
                    )
                    yield ResultRecord(
                        spec.experiment, seed, "postact_lower_bound",
                        net_mod.postact_bound(cfg, x, 1.0 / np.sqrt(2 * np.pi), 0.0),
                        n=o["n"], L=L, T=o["T"],
                    )


def _run_init_sde_convergence(spec, figure_scale) -> Iterator[ResultRecord]:
    o = spec.options
    T = o["T"]
    for L in o["depths"]:
        formula = (1.0 + T / L) ** L
        yield ResultRecord(
            spec.experiment, spec.seeds[0], "formula_gap",
            abs(formula - math.exp(T)), L=L, T=T,
        )
        yield ResultRecord(
            spec.experiment, spec.seeds[0], "formula_log_gap",
            abs(math.log(formula) - T), L=L, T=T,
        )
        cfg = NetConfig(n=o["n"], L=L, d=o["d"], T=T, activation="identity")
        for seed in spec.seeds:
            x = sphere_inputs(Rng(seed, 1), 1, o["d"])[0]
            params = init_params(cfg, Rng(seed, 0))
            tr = forward(params, x, cfg)
            yield ResultRecord(
                spec.experiment, seed, "layer_variance",
                float(np.mean(tr.h[-1] ** 2)), n=o["n"], L=L, T=T,
            )


def _run_nfd_train_convergence(spec, figure_scale) -> Iterator[ResultRecord]:
    o = spec.options
    K = o["k_max"]
    samples = make_limit_samples(spec.seeds[0], K + 1, o["d"])
    lim_cfg = limit_mod.LimitConfig(
        steps_L=o["steps_ref"], particles=o["particles"], T=o["T"], k_max=K,
        eta_c=o["eta_c"], activation=o["activation"], correction_term=False,
    )
    ref = limit_mod.simulate_training(lim_cfg, samples, Rng(spec.seeds[0], 40))
    f_lim = [limit_mod.limit_output(ref, k) for k in range(K + 1)]
    del ref  # only the scalar outputs are needed; free the particle arrays
    for k in range(K + 1):
        yield ResultRecord(
            spec.experiment, spec.seeds[0], "limit_output",
            f_lim[k], T=o["T"], eta_c=o["eta_c"], k=k,
        )

    def sweep(points, tag):
        for n, L in points:
            cfg = NetConfig(
                n=n, L=L, d=o["d"], T=o["T"], activation=o["activation"],
                lr_base=o["eta_c"], backward_mode=o["backward"],
            )
            dtype = np.float32 if n * n * L > 2**27 else np.float64
            sq = []
            for seed in spec.seeds:
                fs = finite_net_outputs(cfg, samples, seed, store_dtype=dtype)
                sq.append((fs[K] - f_lim[K]) ** 2)
                yield ResultRecord(
                    spec.experiment, seed, f"f_finite/{tag}", fs[K],
                    n=n, L=L, T=o["T"], eta_c=o["eta_c"], k=K,
                )
            yield ResultRecord(
                spec.experiment, spec.seeds[0], f"msq_gap/{tag}",
                float(np.mean(sq)), n=n, L=L, T=o["T"], eta_c=o["eta_c"], k=K,
            )

    yield from sweep([(o["n_fixed"], L) for L in o["L_grid"]], "depth")
    yield from sweep([(n, o["L_fixed"]) for n in o["n_grid"]], "width")


def _run_gia(spec, figure_scale) -> Iterator[ResultRecord]:
    o = spec.options
    loss = MSE
    batch = 128 if figure_scale else o["batch"]
    for L in o["depths"]:
        for seed in spec.seeds:
            outs = {}
            for mode in ("standard", "decoupled"):
                cfg = NetConfig(
                    n=o["n"], L=L, d=o["d"], T=o["T"],
                    activation=o["activation"], lr_base=o["eta_c"],
                    backward_mode=mode, depth_scaled=o["depth_scaled"],
                )
                params = init_params(cfg, Rng(seed, 0))
                ds = _task_dataset(seed, o["d"], 32, figure_scale)
                sampler = online_sampler(ds, Rng(seed, 2))
                probe_x = ds.inputs[0]
                fs = []
                for _ in range(o["steps"]):
                    fs.append(forward(params, probe_x, cfg).f)
                    net_mod.train(params, cfg, sampler, 1, batch_size=batch)
                outs[mode] = np.array(fs)
            gap = float(np.mean(np.abs(outs["standard"] - outs["decoupled"])))
            yield ResultRecord(
                spec.experiment, seed, "mean_abs_f_gap", gap,
                n=o["n"], L=L, T=o["T"], eta_c=o["eta_c"],
            )


def _run_eigen_monitor(spec, figure_scale) -> Iterator[ResultRecord]:
    o = spec.options
    for seed in spec.seeds:
        samples = make_limit_samples(seed, o["k_max"] + 1, o["d"])
        if o["duplicate_input"] and len(samples) > 1:
            samples[1] = samples[0]
        cfg = limit_mod.LimitConfig(
            steps_L=o["steps_L"], particles=o["particles"], T=o["T"],
            k_max=o["k_max"], eta_c=o["eta_c"], activation=o["activation"],
            spd_floor=-1e-6 if o["duplicate_input"] else -1e-9,
        )
        run_ = limit_mod.simulate_training(cfg, samples, Rng(seed, 0))
        for t, k, lmin_s, lmin_t in limit_mod.covariance_minima(run_):
            yield ResultRecord(
                spec.experiment, seed, "lambda_min_sigma", lmin_s,
                T=t, eta_c=o["eta_c"], k=k, L=o["steps_L"],
            )
            yield ResultRecord(
                spec.experiment, seed, "lambda_min_theta", lmin_t,
                T=t, eta_c=o["eta_c"], k=k, L=o["steps_L"],
            )
        yield ResultRecord(
            spec.experiment, seed, "jitter_events",
            float(len(run_.jitter_events)), L=o["steps_L"],
        )


def _run_collapse(spec, figure_scale) -> Iterator[ResultRecord]:
    o = spec.options
    batch = 128 if figure_scale else o["batch"]
    for L in o["depths"]:
        cfg = NetConfig(
            n=o["n"], L=L, d=o["d"], block="preact_two",
            activation=o["activation"],
            lr_base=o["eta_c"], depth_aware_lr=o["depth_aware_lr"],
        )
        for seed in spec.seeds:
            params = init_params(cfg, Rng(seed, 0))
            params0 = copy.deepcopy(params)
            ds = _task_dataset(seed, o["d"], 64, figure_scale)
            net_mod.train(
                params, cfg, online_sampler(ds, Rng(seed, 2)), o["steps"],
                batch_size=batch,
            )
            tr = forward(params, ds.inputs[0], cfg)
            x_gap, stream_gap = net_mod.collapse_metrics(params, params0, tr, cfg)
            yield ResultRecord(
                spec.experiment, seed, "x_gap", x_gap,
                n=o["n"], L=L, eta_c=o["eta_c"],
            )
            yield ResultRecord(
                spec.experiment, seed, "stream_gap", stream_gap,
                n=o["n"], L=L, eta_c=o["eta_c"],
            )


def _run_hp_sweep(spec, figure_scale) -> Iterator[ResultRecord]:
    o = spec.options
    batch = 128 if figure_scale else o["batch"]
    for L in o["depths"]:
        for eta in o["eta_grid"]:
            cfg = NetConfig(
                n=o["n"], L=L, d=o["d"], block="preact_two",
                lr_base=eta, depth_aware_lr=o["depth_aware_lr"],
            )
            for seed in spec.seeds:
                params = init_params(cfg, Rng(seed, 0))
                ds = _task_dataset(seed, o["d"], 128, figure_scale)
                _, records = net_mod.train(
                    params, cfg, online_sampler(ds, Rng(seed, 2)), o["steps"],
                    batch_size=batch,
                )
                tail = [r.loss for r in records[-o["tail"] :]]
                yield ResultRecord(
                    spec.experiment, seed, "final_train_loss",
                    float(np.mean(tail)), n=o["n"], L=L, eta_c=eta,
                )


def _run_kernel_capacity(spec, figure_scale) -> Iterator[ResultRecord]:
    o = spec.options
    M, Mt = o["M_train"], o["M_test"]
    for seed in spec.seeds:
        X_all = sphere_inputs(Rng(seed, 1), M + Mt, o["d"])
        y_all = data_mod.teacher_labels(X_all, Rng(seed, 2), "narrow_resnet")
        y_tr, y_te = y_all[:M], y_all[M:]
        for T in o["horizons"]:
            cfg = kernel_mod.KernelConfig(
                T=T, steps=o["steps"], particles=o["particles"],
                activation=o["activation"],
            )
            gram_all = kernel_mod.nngp_gram(cfg, X_all, Rng(seed, 3))
            g_tr = kernel_mod.GramMatrix(
                gram_all.values[:M, :M], gram_all.se[:M, :M], T,
                gram_all.activation, gram_all.particles, gram_all.seed,
            )
            preds = kernel_mod.kernel_ridge(
                g_tr, y_tr, o["ridge"], gram_all.values[M:, :M]
            )
            yield ResultRecord(
                spec.experiment, seed, "test_mse",
                float(np.mean((preds - y_te) ** 2)), T=T,
            )


def _run_correction_gap(spec, figure_scale) -> Iterator[ResultRecord]:
    o = spec.options
    for seed in spec.seeds:
        samples = make_limit_samples(seed, o["k_max"] + 1, o["d"])
        cfg = limit_mod.LimitConfig(
            steps_L=o["steps_grid"][0], particles=o["particles"], T=o["T"],
            k_max=o["k_max"], eta_c=o["eta_c"], activation=o["activation"],
        )
        gaps = limit_mod.correction_gap(
            cfg, samples, Rng(seed, 0), steps_list=o["steps_grid"]
        )
        for s, gap in gaps:
            yield ResultRecord(
                spec.experiment, seed, "gap", gap, L=s,
                eta_c=o["eta_c"], T=o["T"],
            )
        slope, _ = slope_fit(
            [{"x": s, "y": max(g, 1e-300)} for s, g in gaps], "x", "y"
        )
        yield ResultRecord(spec.experiment, seed, "gap_slope", slope)


_RUNNERS = {
    "gradcheck": _run_gradcheck,
    "preact_postact": _run_preact_postact,
    "init_sde_convergence": _run_init_sde_convergence,
    "nfd_train_convergence": _run_nfd_train_convergence,
    "gia": _run_gia,
    "eigen_monitor": _run_eigen_monitor,
    "collapse": _run_collapse,
    "hp_sweep": _run_hp_sweep,
    "kernel_capacity": _run_kernel_capacity,
    "correction_gap": _run_correction_gap,
}


def run(
    spec: ExperimentSpec, workers: int = 1, figure_scale: bool = False
) -> List[ResultRecord]:
    """Execute an experiment; stream records to CSV as grid points complete.

    Grid points own their Rng streams, so results are identical for any
    worker count; execution is sequential and numpy-vectorized. The CSV (if
    spec.out is set) is flushed per record for crash safety.
    """
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}", field="workers")
    if figure_scale and spec.experiment not in _FIGURE_SCALE_OK:
        raise ConfigError(
            f"--figure-scale does not apply to {spec.experiment!r}",
            field="experiment",
        )
    gen = _RUNNERS[spec.experiment](spec, figure_scale)
    records: List[ResultRecord] = []
    if spec.out:
        h = config_hash(spec)
        with open(spec.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            fh.flush()
            for r in gen:
                records.append(r)
                w.writerow(r.row(h))
                fh.flush()
    else:
        records = list(gen)
    return records
