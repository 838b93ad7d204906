"""Experiment configs, run directories, sweeps and run comparison."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import DataSpec, build_assignment, generate_dataset, spec_dict
from .federation import FedConfig, FederationResult, run_federation
from .imbalance import LossBreakdown
from .model import serialize

FORMAT_VERSION = 1
OUTPUT_ROOT_ENV = "FEDCMI_OUTPUT_ROOT"
CASES = {
    # case: (both_fraction, non-IID)
    "A": (1.0, False),
    "B": (0.5, False),
    "C": (1.0, True),
    "D": (0.5, True),
}
DEFAULT_ALPHA = 3.0


class ConfigError(ValueError):
    pass


class ComparisonError(ValueError):
    pass


_DATA_KEYS = {f.name for f in dataclasses.fields(DataSpec)} - {"seed"}
_FED_KEYS = {f.name for f in dataclasses.fields(FedConfig)} - {"seed"}
_EXP_KEYS = {"format_version", "name", "case", "alpha", "drop_prob", "seed", "output_dir"}


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSpec
    fed: FedConfig
    case: str = "A"
    alpha: float = DEFAULT_ALPHA
    drop_prob: float = 0.0
    name: str = "run"
    output_dir: str | None = None
    format_version: int = FORMAT_VERSION

    @property
    def seed(self) -> int:
        return self.fed.seed

    @property
    def both_fraction(self) -> float:
        return CASES[self.case][0]

    @property
    def partition_alpha(self) -> float | None:
        """Dirichlet concentration, or None for an IID split."""
        return self.alpha if CASES[self.case][1] else None

    def run_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir else output_root() / self.name

    def validate(self) -> "ExperimentConfig":
        if self.format_version != FORMAT_VERSION:
            raise ConfigError(f"unsupported format_version {self.format_version}, expected {FORMAT_VERSION}")
        if self.case not in CASES:
            raise ConfigError(f"case must be one of {sorted(CASES)}, got {self.case!r}")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ConfigError("drop_prob must lie in [0, 1]")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        try:
            self.data.validate()
            self.fed.resolved()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Replace experiment, data or federation fields by name; ``seed`` drives both."""
        exp, data, fed = {}, {}, {}
        for k, v in kw.items():
            if k == "seed":
                data[k] = fed[k] = v
            elif k in _DATA_KEYS:
                data[k] = v
            elif k in _FED_KEYS:
                fed[k] = v
            elif k in _EXP_KEYS:
                exp[k] = v
            else:
                raise ConfigError(f"unknown key {k!r}")
        return dataclasses.replace(
            self, data=dataclasses.replace(self.data, **data), fed=dataclasses.replace(self.fed, **fed), **exp
        ).validate()

    def to_dict(self) -> dict:
        """Every resolved setting as one flat mapping, loadable by :func:`config_from_dict`."""
        out = {"format_version": self.format_version, "name": self.name, "case": self.case, "alpha": self.alpha}
        out["drop_prob"] = self.drop_prob
        out["seed"] = self.seed
        out.update({k: v for k, v in spec_dict(self.data).items() if k != "seed"})
        out.update({k: v for k, v in dataclasses.asdict(self.fed).items() if k != "seed"})
        if self.output_dir is not None:
            out["output_dir"] = self.output_dir
        return out


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default)) if default is not None else isinstance(value, str)
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from a flat mapping; unknown keys and wrong types are errors."""
    unknown = sorted(set(raw) - _DATA_KEYS - _FED_KEYS - _EXP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "format_version" not in raw:
        raise ConfigError("missing format_version")
    base = ExperimentConfig(DataSpec(), FedConfig())
    defaults = {**spec_dict(base.data), **dataclasses.asdict(base.fed)}
    defaults.update(format_version=FORMAT_VERSION, name="run", case="A", alpha=DEFAULT_ALPHA, drop_prob=0.0, output_dir="")
    values = {k: _coerce(k, v, defaults[k]) for k, v in raw.items()}
    return base.with_overrides(**values)


def load_config(path) -> tuple[ExperimentConfig, str]:
    """Parse a config file, returning the config and the verbatim text."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: config must be flat, found tables {nested}")
    return config_from_dict(raw), text


def load_data_spec(path) -> DataSpec:
    """Read a flat spec file holding DataSpec fields plus ``format_version``."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if raw.pop("format_version", None) != FORMAT_VERSION:
        raise ConfigError(f"{path}: format_version must be {FORMAT_VERSION}")
    defaults = spec_dict(DataSpec())
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"{path}: unknown spec keys: {', '.join(unknown)}")
    spec = DataSpec(**{k: _coerce(k, v, defaults[k]) for k, v in raw.items()})
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return spec


# ---------------------------------------------------------------------------
# artifacts


def dataset_hash(train, test) -> str:
    h = hashlib.sha256()
    h.update(train.to_bytes())
    h.update(test.to_bytes())
    return h.hexdigest()


def metrics_columns(num_classes: int) -> list[str]:
    cols = ["round", "joint_acc", "acc_m0", "acc_m1"]
    for c in range(num_classes):
        cols += [f"class{c}_joint", f"class{c}_m0", f"class{c}_m1"]
    return cols + list(LossBreakdown.FIELDS) + ["rho_mean"]


def _fmt(x) -> str:
    # shortest repr that round-trips, so identical floats give identical bytes
    return repr(float(x))


def metrics_csv(result: FederationResult, num_classes: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_columns(num_classes))
    for rec in result.records:
        m = rec.metrics
        row = [rec.round, _fmt(m.joint_acc), _fmt(m.acc_m0), _fmt(m.acc_m1)]
        row += [_fmt(v) for v in m.per_class.ravel()]
        row += [_fmt(v) for v in m.loss.as_tuple()] + [_fmt(m.rho_mean)]
        w.writerow(row)
    return buf.getvalue()


def summarize(result: FederationResult, cfg: ExperimentConfig, data_hash: str) -> dict:
    recs = result.records
    summary = {
        "name": cfg.name,
        "strategy": cfg.fed.strategy,
        "seed": cfg.seed,
        "case": cfg.case,
        "drop_prob": cfg.drop_prob,
        "rounds": len(recs),
        "dataset_hash": data_hash,
        "joint_acc_curve": [r.metrics.joint_acc for r in recs],
    }
    if recs:
        best = max(recs, key=lambda r: (r.metrics.joint_acc, -r.round))
        summary["final"] = {"round": recs[-1].round, **recs[-1].metrics.to_dict()}
        summary["best"] = {"round": best.round, **best.metrics.to_dict()}
    return summary


def _write(path: Path, data: str | bytes) -> None:
    try:
        if isinstance(data, bytes):
            path.write_bytes(data)
        else:
            path.write_text(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def run_experiment(cfg: ExperimentConfig, *, config_text: str | None = None, workers: int | None = None) -> Path:
    """Generate data, run the federation and write a self-describing run directory."""
    cfg.validate()
    out = cfg.run_dir()
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror}") from exc
    train, test = generate_dataset(cfg.data, "train"), generate_dataset(cfg.data, "test")
    data_hash = dataset_hash(train, test)
    assignment = build_assignment(
        train.y,
        cfg.fed.num_clients,
        alpha=cfg.partition_alpha,
        both_fraction=cfg.both_fraction,
        drop_prob=cfg.drop_prob,
        seed=cfg.seed,
    )
    result = run_federation(cfg.fed, train, test, assignment, workers=workers)

    if config_text is not None:
        _write(out / "config.toml", config_text)
    _write(out / "resolved.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    dataset = {"dataset_hash": data_hash, "train_sha256": train.fingerprint(), "test_sha256": test.fingerprint()}
    _write(out / "dataset.json", json.dumps(dataset, indent=2) + "\n")
    asg = assignment.to_dict()
    asg["indices"] = [ix.tolist() for ix in assignment.indices]
    _write(out / "assignment.json", json.dumps(asg) + "\n")
    _write(out / "metrics.csv", metrics_csv(result, train.num_classes))
    _write(out / "summary.json", json.dumps(summarize(result, cfg, data_hash), indent=2) + "\n")
    _write(out / "model.fcmp", serialize(result.params.cfg, result.params.tensors))
    return out


def sweep(cfg: ExperimentConfig, strategies, seeds, *, workers: int | None = None) -> list[Path]:
    """One run per (strategy, seed) under ``<run dir>/<strategy>-s<seed>``."""
    root = cfg.run_dir()
    dirs = []
    for seed in seeds:
        for strategy in strategies:
            sub = cfg.with_overrides(
                strategy=strategy, seed=int(seed), name=f"{cfg.name}/{strategy}-s{seed}", output_dir=str(root / f"{strategy}-s{seed}")
            )
            dirs.append(run_experiment(sub, workers=workers))
    return dirs


# ---------------------------------------------------------------------------
# comparison


def load_summary(run_dir) -> dict:
    path = Path(run_dir) / "summary.json"
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise ComparisonError(f"{path}: {exc.strerror}") from exc


def rounds_to_threshold(curve, threshold: float) -> int | None:
    for i, acc in enumerate(curve, start=1):
        if acc >= threshold:
            return i
    return None


def compare(run_dirs, threshold: float = 0.8) -> dict:
    """Final and best accuracies per run, with deltas against the first run."""
    if len(run_dirs) < 2:
        raise ComparisonError("need at least two run directories")
    summaries = [load_summary(d) for d in run_dirs]
    hashes = {s["dataset_hash"] for s in summaries}
    if len(hashes) != 1:
        raise ComparisonError(f"runs were trained on different datasets ({len(hashes)} distinct hashes)")
    rows = []
    for d, s in zip(run_dirs, summaries):
        if "final" not in s:
            raise ComparisonError(f"{d}: run has no rounds")
        rows.append(
            {
                "run": str(d),
                "strategy": s["strategy"],
                "seed": s["seed"],
                "final_joint": s["final"]["joint_acc"],
                "final_m0": s["final"]["acc_m0"],
                "final_m1": s["final"]["acc_m1"],
                "best_joint": s["best"]["joint_acc"],
                "best_round": s["best"]["round"],
                "rounds_to_threshold": rounds_to_threshold(s["joint_acc_curve"], threshold),
            }
        )
    ref = rows[0]
    for r in rows:
        r["delta"] = {k: r[k] - ref[k] for k in ("final_joint", "final_m0", "final_m1", "best_joint")}
    return {"dataset_hash": hashes.pop(), "threshold": threshold, "baseline": ref["run"], "rows": rows}


def format_comparison(table: dict) -> str:
    head = f"{'run':<28} {'strategy':<9} {'joint':>7} {'m0':>7} {'m1':>7} {'best':>7} {'@thr':>5} {'d_joint':>8} {'d_m1':>8}"
    lines = [head]
    for r in table["rows"]:
        thr = "-" if r["rounds_to_threshold"] is None else str(r["rounds_to_threshold"])
        lines.append(
            f"{r['run'][-28:]:<28} {r['strategy']:<9} {r['final_joint']:7.4f} {r['final_m0']:7.4f} {r['final_m1']:7.4f} "
            f"{r['best_joint']:7.4f} {thr:>5} {r['delta']['final_joint']:+8.4f} {r['delta']['final_m1']:+8.4f}"
        )
    return "\n".join(lines)
