"""Study configuration, reports and deterministic block-parallel execution."""
from concurrent.futures import ProcessPoolExecutor
import csv
from dataclasses import dataclass, field, replace
import hashlib
import json
import os

import numpy as np

from enkf_lab import __version__
from enkf_lab.io import fmt
from enkf_lab.model import ConfigError, from_dict
from enkf_lab.rng import GENERATOR_VERSION, stream

STUDIES = ("bias", "fluctuation", "gain-error", "lyapunov", "ergodicity", "clt", "state-error")
MIN_REPLICAS = 100
BLOCK_SIZE = 1000


class HypothesisError(ValueError):
    """The model violates a study's standing hypothesis."""


@dataclass(frozen=True, eq=False)
class StudyConfig:
    model: object
    study: str
    ensemble_sizes: tuple
    horizon: int
    replicas: int
    seed: int = 0
    backend: str = "wishart-chain"
    options: dict = field(default_factory=dict)
    block_size: int = BLOCK_SIZE

    def to_dict(self):
        return {
            "study": self.study,
            "model": self.model.to_dict(),
            "ensemble_sizes": list(self.ensemble_sizes),
            "horizon": self.horizon,
            "replicas": self.replicas,
            "seed": self.seed,
            "backend": self.backend,
            "options": self.options,
            "block_size": self.block_size,
        }

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **changes):
        return replace(self, **changes)


# Per-study defaults: (ensemble sizes, horizon, replicas, backend, options).
_DEFAULTS = {
    "bias": ((8, 16, 32, 64, 128, 256, 512), 100, 10_000, "wishart-chain",
             {"eval_step": 30, "alpha": 0.01, "slope_target": -1.0, "slope_tol": 0.2}),
    "fluctuation": ((8, 16, 32, 64, 128, 256, 512), 200, 10_000, "wishart-chain",
                    {"moments": [1, 2, 4], "flat_from": 20, "flat_band": [0.8, 1.25],
                     "slope_target": -0.5, "slope_tol": 0.1}),
    "gain-error": ((8, 16, 32, 64, 128, 256, 512), 200, 10_000, "wishart-chain",
                   {"moments": [1, 2, 4], "flat_from": 20, "flat_band": [0.8, 1.25],
                    "slope_target": -0.5, "slope_tol": 0.1}),
    "lyapunov": ((32,), 50, 10_000, "wishart-chain",
                 {"init_range": [0.01, 100.0], "alpha": 0.01}),
    "ergodicity": ((None,), 100, 10_000, "wishart-chain",
                   {"inits": [0.01, 100.0], "ks_target": 0.02, "alpha": 0.01}),
    "clt": ((512,), 10, 10_000, "wishart-chain",
            {"limit_draws": 100_000, "alpha": 0.01, "sigma_band": 4.0}),
    "state-error": ((8, 16, 32, 64, 128, 256, 512), 200, 10_000, "perturbation",
                    {"moments": [1, 2], "flat_from": 20, "flat_band": [0.8, 1.25],
                     "slope_target": -0.5, "slope_tol": 0.1}),
}


def default_config(study, model, seed=0, **overrides):
    """Study defaults for ``model``; keyword overrides replace fields, ``options`` merges."""
    if study not in _DEFAULTS:
        raise ConfigError(f"unknown study {study!r}; choose from {', '.join(STUDIES)}")
    sizes, horizon, reps, backend, options = _DEFAULTS[study]
    if study == "ergodicity":
        sizes = (2 * model.d + 2,)
    options = dict(options)
    options.update(overrides.pop("options", None) or {})
    cfg = StudyConfig(model=model, study=study, ensemble_sizes=tuple(sizes), horizon=horizon,
                      replicas=reps, seed=int(seed), backend=backend, options=options)
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return check_config(cfg)


def check_config(cfg):
    if cfg.study not in STUDIES:
        raise ConfigError(f"unknown study {cfg.study!r}")
    if cfg.replicas < MIN_REPLICAS:
        raise ConfigError(f"replicas must be >= {MIN_REPLICAS}, got {cfg.replicas}")
    if cfg.horizon < 0:
        raise ConfigError("horizon must be non-negative")
    if cfg.block_size < 1:
        raise ConfigError("block_size must be positive")
    d = cfg.model.d
    wide = cfg.study in ("lyapunov", "ergodicity")
    for n in cfg.ensemble_sizes:
        if wide and int(n) < 2 * d + 1:
            raise ConfigError(f"N >= 2d+1 required for study {cfg.study} (N={n}, d={d})")
        if int(n) + 1 <= d:
            raise ConfigError(f"N+1 > d required (N={n}, d={d})")
    return replace(cfg, ensemble_sizes=tuple(int(n) for n in cfg.ensemble_sizes))


def config_from_dict(doc, study=None, seed=None):
    """Build a :class:`StudyConfig` from a JSON document.

    Layout: ``{"model": {...}, "study": {"name": ..., "ensemble_sizes": [...],
    "horizon": ..., "replicas": ..., "backend": ..., "options": {...}}, "seed": ...}``.
    Explicit ``study``/``seed`` arguments override the document.
    """
    if "model" not in doc:
        raise ConfigError("config is missing field: model")
    model = from_dict(doc["model"])
    sdoc = doc.get("study") or {}
    if isinstance(sdoc, str):
        sdoc = {"name": sdoc}
    name = study or sdoc.get("name")
    if name is None:
        raise ConfigError("no study selected (use --study or study.name)")
    if seed is None:
        seed = doc.get("seed", 0)
    unknown = set(sdoc) - {"name", "ensemble_sizes", "horizon", "replicas", "backend",
                           "options", "block_size"}
    if unknown:
        raise ConfigError(f"unknown study field(s): {', '.join(sorted(unknown))}")
    try:
        return default_config(name, model, seed=int(seed),
                              ensemble_sizes=tuple(sdoc["ensemble_sizes"]) if "ensemble_sizes" in sdoc else None,
                              horizon=sdoc.get("horizon"), replicas=sdoc.get("replicas"),
                              backend=sdoc.get("backend"), block_size=sdoc.get("block_size"),
                              options=sdoc.get("options"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid study field: {exc}") from exc


@dataclass
class StudyReport:
    """Verdicts, statistics and fitted slopes of one study run.

    ``verdicts`` maps a name to ``{"passed": bool, ...supporting numbers}``;
    ``raw`` is a list of flat per-replica rows for raw.csv.
    """

    study: str
    config: StudyConfig
    verdicts: dict = field(default_factory=dict)
    statistics: dict = field(default_factory=dict)
    slopes: dict = field(default_factory=dict)
    raw: list = field(default_factory=list, repr=False)

    @property
    def passed(self):
        return all(v["passed"] for v in self.verdicts.values())

    def verdict(self, name, passed, **detail):
        self.verdicts[name] = {"passed": bool(passed), **_jsonable(detail)}

    def manifest(self):
        return {
            "tool_version": __version__,
            "generator": GENERATOR_VERSION,
            "seed": self.config.seed,
            "config_sha256": self.config.digest(),
        }

    def to_dict(self):
        return {
            "study": self.study,
            "passed": self.passed,
            "verdicts": self.verdicts,
            "slopes": _jsonable(self.slopes),
            "statistics": _jsonable(self.statistics),
            "manifest": self.manifest(),
        }

    def write(self, out_dir):
        """Write report.json, raw.csv and config.json into ``out_dir``."""
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        cfg_doc = self.config.to_dict()
        cfg_doc["generator"] = GENERATOR_VERSION
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(cfg_doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_rows(os.path.join(out_dir, "raw.csv"), self.raw)
        return out_dir


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        val = float(obj)
        return val if np.isfinite(val) else str(val)
    return obj


def write_rows(path, rows):
    """CSV with a header row; floats in 17-significant-digit scientific notation."""
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.writer(fh)
        keys = list(rows[0])
        writer.writerow(keys)
        for row in rows:
            writer.writerow([fmt(row[k]) for k in keys])


# -- deterministic block execution ---------------------------------------------

def block_plan(replicas, block_size):
    """Replica counts per block, e.g. ``(2500, 1000) -> [1000, 1000, 500]``."""
    full, rest = divmod(replicas, block_size)
    return [block_size] * full + ([rest] if rest else [])


def block_stream(cfg, purpose, block):
    """Stream for one (study, purpose, block) triple."""
    return stream(cfg.seed, f"{cfg.study}/{purpose}", block)


def run_blocks(func, tasks, jobs=1):
    """Evaluate ``func(*task)`` for each task, preserving task order.

    Workers are stateless; results only depend on the task tuple, so the
    output is the same for any ``jobs``.
    """
    tasks = list(tasks)
    if jobs is None or jobs <= 1 or len(tasks) <= 1:
        return [func(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        futures = [pool.submit(func, *t) for t in tasks]
        return [f.result() for f in futures]


def merge_blocks(results):
    """Concatenate per-block dicts of arrays along the replica axis."""
    keys = results[0].keys()
    return {k: np.concatenate([r[k] for r in results], axis=0) for k in keys}
