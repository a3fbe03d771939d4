"""Twin experiments: truth generation, synthetic data, filter runs and result files."""

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import assemble_operators, build_mesh, observe, v_norm
from .filters import HierarchicalEnKF
from .priors import (
    InvariantArchive,
    LaplacianEigenbasis,
    build_laplacian_eigenbasis,
    member_streams,
    sample_invariant_prior,
    sample_smooth_prior,
)
from .qge import NonConvergence, QgeParams, Trajectory, get_model
from .rng import PerturbationSource, stream
from .rom import ReducedSpace, level_tolerance_ml, pod

__all__ = [
    "SCHEMA_VERSION",
    "CSV_COLUMNS",
    "FILTER_KINDS",
    "ExperimentConfig",
    "MeasurementRecord",
    "ExperimentRecord",
    "TruthData",
    "cache_dir",
    "save_snapshots",
    "load_snapshots",
    "setup_operators",
    "generate_truth",
    "generate_measurements",
    "run_filter",
    "run_experiment",
    "emit_results",
    "read_results_csv",
    "summarize",
    "final_quarter_median",
]

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = ("k", "err_pre", "err_post", "rom_dim", "wall_seconds")
FILTER_KINDS = ("enkf", "ml", "mf", "reference-ml", "reference-mf", "memoryless-ml", "memoryless-mf")
PRIORS = ("smooth", "invariant")
W0_CHOICES = ("empty", "full", "archive")


def _split_list(text):
    return text.strip().strip("[]()").replace(",", " ").split()


def _float_tuple(value):
    if isinstance(value, str):
        return tuple(float(v) for v in _split_list(value))
    if np.ndim(value) == 0:
        return (float(value),)
    return tuple(float(v) for v in value)


def _int_tuple(value):
    if isinstance(value, str):
        return tuple(int(v) for v in _split_list(value))
    return tuple(int(v) for v in value)


def _bool(value):
    if isinstance(value, str):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return bool(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved experiment settings; defaults are the desk-scale experiment.

    ``eps_r`` holds one relative tolerance per reduced level, so its length
    fixes the level count ``L``.  For ``L > 1`` the ensemble sizes of all
    ``L + 1`` levels come from ``level_sizes`` (coarsest first).
    """

    mesh: int = 41
    Ro: float = 1e-3
    Re: float = 100.0
    dt: float = 0.1
    newton_tol: float = 1e-10
    newton_max_iter: int = 25
    filter: str = "ml"
    prior: str = "smooth"
    n_principal: int = 16
    n_ancillary: int = 200
    eps_r: tuple = (1e-3,)
    level_sizes: tuple = ()
    window: float = 1.0
    n_windows: int = 100
    sigma: float = 1e-4
    spinup: float = 50.0
    seed: int = 0
    replicates: int = 4
    n_modes: int = 400
    w0: str = "empty"
    split: float = 0.5
    archive_length: float = 50.0
    jitter: float = 0.0
    psd_mf: bool = False

    _converters = {
        "mesh": int,
        "Ro": float,
        "Re": float,
        "dt": float,
        "newton_tol": float,
        "newton_max_iter": int,
        "filter": str,
        "prior": str,
        "n_principal": int,
        "n_ancillary": int,
        "eps_r": _float_tuple,
        "level_sizes": _int_tuple,
        "window": float,
        "n_windows": int,
        "sigma": float,
        "spinup": float,
        "seed": int,
        "replicates": int,
        "n_modes": int,
        "w0": str,
        "split": float,
        "archive_length": float,
        "jitter": float,
        "psd_mf": _bool,
    }

    def __post_init__(self):
        for name, conv in self._converters.items():
            object.__setattr__(self, name, conv(getattr(self, name)))
        if self.filter not in FILTER_KINDS:
            raise ValueError(f"filter must be one of {FILTER_KINDS}, got {self.filter!r}")
        if self.prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}, got {self.prior!r}")
        if self.w0 not in W0_CHOICES:
            raise ValueError(f"w0 must be one of {W0_CHOICES}, got {self.w0!r}")
        positive = ("mesh", "Ro", "Re", "dt", "newton_tol", "newton_max_iter", "window",
                    "n_windows", "sigma", "replicates", "n_modes")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("spinup", "archive_length", "jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.n_principal < 2 or self.n_ancillary < 2:
            raise ValueError("ensembles need at least two members")
        if not self.eps_r or any(e < 0 for e in self.eps_r):
            raise ValueError("eps_r needs at least one non-negative value")
        if self.level_sizes and len(self.level_sizes) != self.levels + 1:
            raise ValueError(f"level_sizes needs {self.levels + 1} entries")
        if self.levels > 1 and not self.level_sizes:
            raise ValueError("multi-level runs need level_sizes")

    @property
    def levels(self):
        return len(self.eps_r)

    @property
    def sizes(self):
        return self.level_sizes or (self.n_ancillary, self.n_principal)

    @property
    def qge_params(self):
        return QgeParams(self.Ro, self.Re, self.dt, self.newton_tol, self.newton_max_iter)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["eps_r"] = list(self.eps_r)
        d["level_sizes"] = list(self.level_sizes)
        return d

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, mapping):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**mapping)

    @classmethod
    def from_text(cls, text):
        """Parse flat ``key = value`` lines; ``#`` starts a comment."""
        parser = configparser.ConfigParser(
            delimiters=("=", ":"), comment_prefixes=("#", ";"), inline_comment_prefixes=("#",)
        )
        parser.optionxform = str
        parser.read_string("[experiment]\n" + text)
        raw = {k: v.strip().strip('"').strip("'") for k, v in parser["experiment"].items()}
        return cls.from_mapping(raw)

    @classmethod
    def from_file(cls, path):
        return cls.from_text(Path(path).read_text())

    def hash(self, exclude=()):
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def truth_hash(self):
        """Key of the truth data, which ignores every filter setting."""
        keys = ("mesh", "Ro", "Re", "dt", "newton_tol", "newton_max_iter", "window",
                "n_windows", "spinup", "archive_length")
        d = {k: self.to_dict()[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# -- snapshot store ----------------------------------------------------------


def cache_dir():
    root = os.environ.get("ARBENKF_CACHE")
    path = Path(root) if root else Path.home() / ".cache" / "arbenkf"
    path.mkdir(parents=True, exist_ok=True)
    return path


def save_snapshots(stem, array, **meta):
    """Write ``stem.bin`` (little-endian float64, row-major) and ``stem.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype="<f8")
    tmp = stem.with_suffix(".bin.tmp")
    arr.tofile(tmp)
    os.replace(tmp, stem.with_suffix(".bin"))
    sidecar = {"shape": list(arr.shape), "dtype": "float64", "order": "C", **meta}
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_snapshots(stem):
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    arr = np.fromfile(stem.with_suffix(".bin"), dtype="<f8")
    return arr.reshape(meta["shape"]), meta


def _mesh_key(config):
    return f"mesh{config.mesh}"


# -- truth and data ----------------------------------------------------------


@dataclass
class TruthData:
    trajectory: Trajectory  # states at the assimilation times t_0..t_K
    archive: InvariantArchive
    omega0: np.ndarray  # stationary initial condition
    stationary_residual: float


@dataclass
class MeasurementRecord:
    k: int
    data: np.ndarray
    truth_norm: float


_ops_cache = {}


def setup_operators(mesh_size):
    ops = _ops_cache.get(mesh_size)
    if ops is None:
        ops = _ops_cache[mesh_size] = assemble_operators(build_mesh(mesh_size))
    return ops


def generate_truth(config, use_cache=True):
    """Truth from the stationary state: spin-up, assimilation horizon, then the archive."""
    key = config.truth_hash()
    base = cache_dir() / "truth" / key
    ops = setup_operators(config.mesh)
    if use_cache and base.with_name(key + "_traj.json").exists():
        states, meta = load_snapshots(base.with_name(key + "_traj"))
        archive, ameta = load_snapshots(base.with_name(key + "_archive"))
        return TruthData(
            Trajectory(np.asarray(meta["times"]), states),
            InvariantArchive(archive, tuple(ameta["window"])),
            np.asarray(meta["omega0"]),
            meta["stationary_residual"],
        )

    params = config.qge_params
    model = get_model(ops, params)
    omega0, psi0 = model.stationary()
    res = max(
        np.linalg.norm(params.nu * (ops.K @ omega0) - ops.Dx @ psi0 - ops.F_vec),
        np.linalg.norm(ops.K @ psi0 - ops.M @ omega0),
    )
    res = float(res) / max(np.linalg.norm(ops.F_vec), 1e-300)

    omega = omega0[None]
    if config.spinup > 0:
        omega = model.flow(omega, config.spinup).last
    t0 = config.spinup
    states = [omega[0]]
    for _ in range(config.n_windows):
        omega = model.flow(omega, config.window).last
        states.append(omega[0])
    times = t0 + config.window * np.arange(config.n_windows + 1)
    t_end = times[-1]
    if config.archive_length > 0:
        arch = model.flow(omega, config.archive_length).states[1:, 0]
        window = (t_end + config.dt, t_end + config.archive_length)
    else:
        arch = np.asarray(states)
        window = (times[0], t_end)
    traj = Trajectory(times, np.asarray(states))
    truth = TruthData(traj, InvariantArchive(np.ascontiguousarray(arch), window), omega0, res)
    if use_cache:
        common = {"mesh": config.mesh, "truth_hash": key}
        save_snapshots(base.with_name(key + "_traj"), traj.states, times=times.tolist(),
                       omega0=omega0.tolist(), stationary_residual=res, **common)
        save_snapshots(base.with_name(key + "_archive"), arch, window=list(window), **common)
    return truth


def generate_measurements(ops, truth_states, sigma, seed, replicate=0):
    """``d_k = L omega(t_k) + eta_k`` with one noise stream per step."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    out = []
    for k, omega in enumerate(np.atleast_2d(truth_states)):
        d = observe(ops, omega)
        if sigma > 0:
            d = d + sigma * stream(seed, replicate, "measurement", k).standard_normal(d.size)
        out.append(MeasurementRecord(k, d, v_norm(ops, omega)))
    return out


# -- filter runs -------------------------------------------------------------


@dataclass
class ExperimentRecord:
    replicate: int
    seed: int
    config_hash: str
    rows: list = field(default_factory=list)
    aborted: str = None

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)


_basis_cache = {}


def _eigenbasis(ops, config):
    n_modes = min(config.n_modes, ops.n_dof)
    key = (config.mesh, n_modes)
    basis = _basis_cache.get(key)
    if basis is not None:
        return basis
    stem = cache_dir() / "eigen" / f"{_mesh_key(config)}_{n_modes}"
    if stem.with_suffix(".json").exists():
        vecs, meta = load_snapshots(stem)
        basis = LaplacianEigenbasis(np.asarray(meta["eigvals"]), vecs, meta["discarded_variance"])
    else:
        basis = build_laplacian_eigenbasis(ops, n_modes)
        save_snapshots(stem, basis.eigvecs, eigvals=basis.eigvals.tolist(),
                       discarded_variance=basis.discarded_variance, mesh=config.mesh)
    _basis_cache[key] = basis
    return basis


def _level_label(s, L):
    if s == L:
        return "prior-principal"
    if s == 0:
        return "prior-ancillary"
    return f"prior-level-{s}"


def initial_levels(config, ops, truth, replicate):
    """Initial ensembles for every level, each from its own stream family."""
    L = config.levels
    sizes = config.sizes
    basis = _eigenbasis(ops, config) if config.prior == "smooth" or config.jitter > 0 else None
    levels = []
    for s in range(L + 1):
        rng = member_streams(config.seed, replicate, _level_label(s, L))
        if config.prior == "smooth":
            levels.append(sample_smooth_prior(basis, rng, sizes[s]))
        else:
            levels.append(sample_invariant_prior(truth.archive, rng, sizes[s], config.jitter, basis))
    return levels


def _archive_space(config, ops, truth, levels):
    eps = level_tolerance_ml(levels, [None] + levels[1:], config.eps_r[0], ops)
    res = pod(truth.archive.snapshots, (1 - config.split) * eps, ops.M)
    return ReducedSpace.from_basis(ops, res.basis)


def _make_filter(config, ops, truth, levels):
    kind = config.filter
    if kind == "enkf":
        return HierarchicalEnKF(method="enkf", sigma=config.sigma)
    surrogate, method = kind.split("-") if "-" in kind else ("adaptive", kind)
    w0 = config.w0
    if w0 == "archive":
        w0 = _archive_space(config, ops, truth, levels)
    if surrogate == "memoryless":
        w0 = "empty"
    return HierarchicalEnKF(
        method=method,
        surrogate=surrogate,
        eps_r=config.eps_r,
        sigma=config.sigma,
        split=config.split,
        w0=w0,
        psd_mf=config.psd_mf,
    )


def _rel_error(ops, mean, truth_state):
    return v_norm(ops, mean - truth_state) / v_norm(ops, truth_state)


def run_filter(config, truth, measurements, replicate=0, ops=None, on_step=None):
    """Analysis/prediction loop over all assimilation times of one replicate.

    Row ``k`` holds the forecast error at ``t_k`` given data up to ``t_{k-1}``
    (the prior error for ``k = 0``) and the analysis error given ``d_k``.
    """
    ops = setup_operators(config.mesh) if ops is None else ops
    record = ExperimentRecord(replicate, config.seed, config.hash(exclude=("replicates",)))
    truth_states = truth.trajectory.states
    times = truth.trajectory.times
    levels = initial_levels(config, ops, truth, replicate)
    filt = _make_filter(config, ops, truth, levels)
    noise = PerturbationSource(config.seed, replicate)
    filt.fit(levels, ops, config.qge_params, noise)
    rom_dim = 0
    wall = 0.0
    err_pre = _rel_error(ops, filt.mean_, truth_states[0])
    try:
        for k, meas in enumerate(measurements):
            t = time.perf_counter()
            filt.analyze(meas.data)
            wall += time.perf_counter() - t
            err_post = _rel_error(ops, filt.mean_, truth_states[k])
            row = {"k": k, "err_pre": err_pre, "err_post": err_post, "rom_dim": rom_dim,
                   "wall_seconds": wall}
            record.rows.append(row)
            if on_step is not None:
                on_step(row)
            if k == len(measurements) - 1:
                break
            t = time.perf_counter()
            mean = filt.predict(config.window, t0=times[k])
            wall = time.perf_counter() - t
            info = filt.history_[-1]
            rom_dim = int(info["rom_dim"])
            err_pre = _rel_error(ops, mean, truth_states[k + 1])
            if not np.isfinite(err_pre):
                raise FloatingPointError(f"non-finite forecast at step {k + 1}")
    except (NonConvergence, FloatingPointError, np.linalg.LinAlgError) as exc:
        record.aborted = f"step {len(record.rows)}: {type(exc).__name__}: {exc}"
        logger.error("replicate %d aborted: %s", replicate, record.aborted)
    return record


def run_experiment(config, out_dir=None, use_cache=True, progress=None):
    """Run every replicate and emit results; cached per config hash.

    Returns the list of :class:`ExperimentRecord`.  With ``use_cache`` the
    result files live under the cache directory and a second call with the
    same config reads them back instead of recomputing.
    """
    key = config.hash()
    cached = cache_dir() / "results" / key
    if use_cache and (cached / "summary.json").exists():
        records = load_results(cached)
        if out_dir is not None:
            emit_results(records, out_dir, config)
        return records
    ops = setup_operators(config.mesh)
    truth = generate_truth(config, use_cache=use_cache)
    records = []
    for r in range(config.replicates):
        meas = generate_measurements(ops, truth.trajectory.states, config.sigma, config.seed, r)
        t = time.perf_counter()
        rec = run_filter(config, truth, meas, r, ops)
        if progress is not None:
            progress(f"{config.filter} replicate {r}: {time.perf_counter() - t:.1f} s")
        records.append(rec)
    if use_cache:
        emit_results(records, cached, config)
    if out_dir is not None:
        emit_results(records, out_dir, config)
    return records


# -- result files ------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_results_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def read_results_csv(path):
    """Parse a replicate CSV back into row dicts with exact float values."""
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {header} in {path}")
        for line in reader:
            rows.append(
                {
                    "k": int(line[0]),
                    "err_pre": float(line[1]),
                    "err_post": float(line[2]),
                    "rom_dim": int(line[3]),
                    "wall_seconds": float(line[4]),
                }
            )
    return rows


def final_quarter_median(err_post):
    """Median of the last quarter of a per-step error series."""
    err_post = np.asarray(err_post, dtype=float)
    if err_post.size == 0:
        return float("nan")
    start = err_post.size - max(1, err_post.size // 4)
    return float(np.median(err_post[start:]))


def summarize(records):
    """Cross-replicate statistics of completed records."""
    done = [r for r in records if r.rows]
    out = {"count": len(records), "aborted": [r.replicate for r in records if r.aborted]}
    if not done:
        out.update({"per_step": {}, "final_quarter_median": None, "final_quarter_by_replicate": []})
        return out
    n = min(len(r.rows) for r in done)
    per_step = {}
    for col in ("err_pre", "err_post", "rom_dim", "wall_seconds"):
        M = np.array([r.column(col)[:n] for r in done])
        q25, med, q75 = np.quantile(M, [0.25, 0.5, 0.75], axis=0)
        per_step[col] = {"median": med.tolist(), "q25": q25.tolist(), "q75": q75.tolist()}
    fq = [final_quarter_median(r.column("err_post")) for r in done]
    out.update(
        {
            "steps": n,
            "per_step": per_step,
            "final_quarter_by_replicate": fq,
            "final_quarter_median": float(np.median(fq)),
            "median_rom_dim": float(np.median(per_step["rom_dim"]["median"])),
        }
    )
    return out


def emit_results(records, out_dir, config):
    """Write one CSV per replicate and ``summary.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_results_csv(out_dir / f"replicate_{rec.replicate:02d}.csv", rec.rows)
    if not records:
        write_results_csv(out_dir / "replicate_00.csv", [])
    summary = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "replicates": [
            {"replicate": r.replicate, "seed": r.seed, "config_hash": r.config_hash, "aborted": r.aborted}
            for r in records
        ],
        **summarize(records),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def load_results(out_dir):
    out_dir = Path(out_dir)
    summary = json.loads((out_dir / "summary.json").read_text())
    records = []
    for meta in summary["replicates"]:
        rows = read_results_csv(out_dir / f"replicate_{meta['replicate']:02d}.csv")
        records.append(
            ExperimentRecord(meta["replicate"], meta["seed"], meta["config_hash"], rows, meta["aborted"])
        )
    return records
