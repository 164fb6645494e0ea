"""Experiment harness: attack-set selection, metrics, model grids, ablations and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attack import AttackConfig, AttackOutcome, AttackTask, BETA_PRESETS, MIConfig, run_dim_mode, run_idaa, run_mi_baseline
from .data import Dataset, load_idx, synth_dataset
from .mixup import MixupConfig
from .models import ModelWeights, classify, load_weights

log = logging.getLogger(__name__)

METHODS = ("idaa", "idaa-mi", "mi", "dim", "da-variant")
ABLATION_AXES = ("alpha", "eps", "N", "gamma", "rho", "K", "betas", "method")
DEFAULT_SWEEPS = {
    "alpha": (0.25, 0.5, 1.0, 2.0),
    "eps": (0.01, 0.03, 0.05, 0.07),
    "N": (1, 5, 10, 20),
    "gamma": (0.0, 0.05, 0.1, 0.15, 0.2, 0.25),
    "rho": (0.3, 0.5, 0.7, 0.9),
    "K": (0, 1, 2, 3, 4, 5, 6),
    "betas": ("default", "beta-appendix"),
    "method": ("idaa", "idaa-mi"),
}
CSV_COLUMNS = (
    "method", "surrogates", "target", "white_box", "fsuc", "tsuc", "n", "seed",
    "eps", "alpha", "T", "N", "gamma", "beta1", "beta2", "rho", "K",
)  # fmt: skip

ADVI_MAGIC = b"ADVI"


class ExperimentError(Exception):
    pass


class InsufficientSamplesError(ExperimentError):
    pass


# ---------------------------------------------------------------------------
# task selection and scoring
# ---------------------------------------------------------------------------


def _labeller(model) -> Callable[[np.ndarray], np.ndarray]:
    return model if callable(model) else (lambda batch: classify(model, batch))


def select_attack_set(dataset: Dataset, models: Sequence, count: int, rng: np.random.Generator) -> list[AttackTask]:
    """Sample ``count`` images every model gets right and give each a random other class as target.

    ``models`` holds weights or callables mapping an image batch to labels.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    ok = np.ones(len(dataset), dtype=bool)
    for m in models:
        ok &= np.asarray(_labeller(m)(dataset.images)) == dataset.labels
    pool = np.flatnonzero(ok)
    if len(pool) < count:
        raise InsufficientSamplesError(
            f"need {count} samples classified correctly by all {len(models)} models, "
            f"only {len(pool)} available (short by {count - len(pool)})"
        )
    chosen = rng.choice(pool, size=count, replace=False)
    k = dataset.n_classes
    tasks = []
    for i in chosen:
        y = int(dataset.labels[i])
        tgt = (y + 1 + int(rng.integers(k - 1))) % k
        tasks.append(AttackTask(dataset.images[i], y, tgt))
    return tasks


@dataclass(frozen=True)
class Score:
    fsuc: float
    tsuc: float
    n: int


def evaluate(outcomes: Sequence[AttackOutcome], target) -> Score:
    """Fooling and targeted success of ``outcomes`` on ``target``.

    ``target`` is a model or any callable mapping an image batch to labels.
    """
    if not outcomes:
        raise ValueError("no outcomes to evaluate")
    images = np.stack([o.x_adv for o in outcomes])
    pred = np.asarray(_labeller(target)(images))
    src = np.array([o.y_src for o in outcomes])
    tgt = np.array([o.y_tgt for o in outcomes])
    return Score(float(np.mean(pred != src)), float(np.mean(pred == tgt)), len(outcomes))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def attack_config_to_dict(cfg: AttackConfig) -> dict:
    d = asdict(cfg)
    d["transform_set"] = list(cfg.transform_set)
    return d


def attack_config_from_dict(d: dict) -> AttackConfig:
    d = dict(d)
    if "mixup" in d and isinstance(d["mixup"], dict):
        d["mixup"] = MixupConfig(**d["mixup"])
    if "betas" in d:
        preset = d.pop("betas")
        b1, b2 = BETA_PRESETS[preset] if isinstance(preset, str) else preset
        d["beta1"], d["beta2"] = b1, b2
    return AttackConfig(**d)


def _as_set(entry) -> tuple[str, ...]:
    return tuple(str(p) for p in entry) if isinstance(entry, (list, tuple)) else (str(entry),)


@dataclass(frozen=True)
class ExperimentConfig:
    """One grid run. Each ``surrogates`` entry is a model path or a list of paths (an ensemble).

    With ``holdout`` set, ``targets`` lists the model pool: every model is
    attacked by the ensemble of all the others and ``surrogates`` is ignored.
    """

    targets: tuple
    surrogates: tuple = ()
    methods: tuple = ("idaa",)
    attack: AttackConfig = field(default_factory=AttackConfig)
    samples: int = 200
    holdout: bool = False
    seed: int = 0
    out: str | None = None
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic", "seed": 1000, "per_class": 60})
    dump_images: bool = False

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(str(t) for t in self.targets))
        object.__setattr__(self, "surrogates", tuple(_as_set(s) for s in self.surrogates))
        object.__setattr__(self, "methods", tuple(self.methods))
        if not self.targets:
            raise ValueError("target set must not be empty")
        if self.holdout:
            if len(self.targets) < 2:
                raise ValueError("hold-out mode needs at least two models")
        elif not self.surrogates:
            raise ValueError("surrogate set must not be empty")
        if self.samples < 1:
            raise ValueError("sample count must be >= 1")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
        if self.dataset.get("kind") not in ("synthetic", "idx"):
            raise ValueError("dataset kind must be 'synthetic' or 'idx'")

    def cells(self) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
        """(surrogate set, target list) pairs."""
        if self.holdout:
            return [(tuple(t for t in self.targets if t != held), (held,)) for held in self.targets]
        return [(s, self.targets) for s in self.surrogates]

    def to_dict(self) -> dict:
        return {
            "targets": list(self.targets),
            "surrogates": [list(s) if len(s) > 1 else s[0] for s in self.surrogates],
            "methods": list(self.methods),
            "attack": attack_config_to_dict(self.attack),
            "samples": self.samples,
            "holdout": self.holdout,
            "seed": self.seed,
            "out": self.out,
            "dataset": dict(self.dataset),
            "dump_images": self.dump_images,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "attack" in d:
            d["attack"] = attack_config_from_dict(d["attack"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_dataset(spec: dict) -> Dataset:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "idx":
        return load_idx(spec["images"], spec["labels"], spec.get("n_classes"))
    return synth_dataset(**spec)


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def method_runner(method: str, cfg: AttackConfig) -> Callable[[AttackTask, np.random.Generator], AttackOutcome]:
    """Map a method id to ``f(task, rng) -> outcome`` sharing the budget of ``cfg``.

    The direct-space baselines take eps, T, gamma and precision from ``cfg``
    and keep their own step size eps / T.
    """
    if method == "idaa":
        return lambda task, rng: run_idaa(task, cfg, rng)
    if method == "idaa-mi":
        c = replace(cfg, step_rule="identical")
        return lambda task, rng: run_idaa(task, c, rng)
    if method == "da-variant":
        c = replace(cfg, mixup=replace(cfg.mixup, repeats=0))
        return lambda task, rng: run_idaa(task, c, rng)
    mi = MIConfig(eps=cfg.eps, steps=cfg.steps, mu=cfg.mu, gamma=cfg.gamma, precision=cfg.precision)
    if method == "mi":
        return lambda task, rng: run_mi_baseline(task, mi, rng)
    if method == "dim":
        return lambda task, rng: run_dim_mode(task, mi, rng)
    raise ValueError(f"unknown method {method!r}")


def run_tasks(
    tasks: Sequence[AttackTask],
    runner: Callable[[AttackTask, np.random.Generator], AttackOutcome],
    seed: int,
    threads: int = 1,
) -> list[AttackOutcome]:
    """Run every task with its own generator ``default_rng([seed, index])``; results keep task order."""

    def one(i):
        return i, runner(tasks[i], np.random.default_rng([seed, i]))

    if threads <= 1:
        results = [one(i) for i in range(len(tasks))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(len(tasks))))
    return [o for _, o in sorted(results, key=lambda r: r[0])]


@dataclass(frozen=True)
class MetricsRow:
    method: str
    surrogates: tuple[str, ...]
    target: str
    white_box: bool
    fsuc: float
    tsuc: float
    n: int
    seed: int
    attack: AttackConfig

    def __post_init__(self):
        if self.tsuc > self.fsuc:
            raise ExperimentError(f"tSuc {self.tsuc} exceeds fSuc {self.fsuc}")

    def csv_fields(self) -> list[str]:
        a = self.attack
        direct = self.method in ("mi", "dim")
        alpha = a.eps / a.steps if direct else a.alpha
        blank = ""
        return [
            self.method,
            "+".join(self.surrogates),
            self.target,
            "1" if self.white_box else "0",
            f"{self.fsuc:.4f}",
            f"{self.tsuc:.4f}",
            str(self.n),
            str(self.seed),
            _num(a.eps),
            _num(alpha),
            str(a.steps),
            "1" if direct else str(a.group_size),
            _num(a.gamma),
            blank if direct else _num(a.beta1),
            blank if direct else _num(a.beta2),
            blank if direct else _num(a.mixup.ratio),
            blank if direct else str(0 if self.method == "da-variant" else a.mixup.repeats),
        ]


def _num(v: float) -> str:
    return repr(float(v))


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    config: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(r.csv_fields())
        return buf.getvalue()

    def find(self, method: str, target: str | None = None, white_box: bool | None = None) -> list[MetricsRow]:
        return [
            r
            for r in self.rows
            if r.method == method
            and (target is None or r.target == target)
            and (white_box is None or r.white_box == white_box)
        ]


def model_name(path) -> str:
    return Path(path).stem


def _load_models(paths) -> dict[str, ModelWeights]:
    out = {}
    for p in paths:
        try:
            out[p] = load_weights(p)
        except Exception as exc:
            raise ExperimentError(f"loading model {p}: {exc}") from exc
    return out


def run_experiment(
    cfg: ExperimentConfig,
    threads: int = 1,
    models: dict[str, ModelWeights] | None = None,
    dataset: Dataset | None = None,
) -> MetricsReport:
    """Attack once per (surrogate set, method), then score the outcomes on every target.

    ``models`` maps paths to already loaded weights (missing paths are read
    from disk) and ``dataset`` overrides ``cfg.dataset``. When ``cfg.out`` is
    set, ``report.csv`` and the echoed ``config.json`` are written there.
    """
    cells = cfg.cells()
    paths = sorted({p for s, t in cells for p in (*s, *t)})
    models = dict(models or {})
    models.update(_load_models([p for p in paths if p not in models]))
    dataset = load_dataset(cfg.dataset) if dataset is None else dataset
    tasks = select_attack_set(dataset, [models[p] for p in paths], cfg.samples, np.random.default_rng([cfg.seed, 0]))
    out = Path(cfg.out) if cfg.out else None

    rows = []
    for sur_paths, target_paths in cells:
        surrogates = tuple(models[p] for p in sur_paths)
        cell_tasks = [replace(t, surrogates=surrogates) for t in tasks]
        sur_names = tuple(model_name(p) for p in sur_paths)
        for method in cfg.methods:
            log.info("attacking %s with %s on %d tasks", "+".join(sur_names), method, len(cell_tasks))
            outcomes = run_tasks(cell_tasks, method_runner(method, cfg.attack), cfg.seed + 1, threads)
            if out is not None and cfg.dump_images:
                dump_outcomes(out / "outcomes" / f"{'+'.join(sur_names)}__{method}", outcomes)
            for tp in target_paths:
                s = evaluate(outcomes, models[tp])
                rows.append(
                    MetricsRow(
                        method, sur_names, model_name(tp), tp in sur_paths, s.fsuc, s.tsuc, s.n, cfg.seed, cfg.attack
                    )
                )
    report = MetricsReport(rows, cfg.to_dict())
    if out is not None:
        write_report(report, out / "report.csv")
    return report


def write_report(report: MetricsReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_csv())
    path.with_name(path.stem + ".config.json").write_text(json.dumps(report.config, indent=2, sort_keys=True) + "\n")


def sweep_point(base: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    a = base.attack
    if axis == "alpha":
        return replace(base, attack=replace(a, alpha=float(value)))
    if axis == "eps":
        return replace(base, attack=replace(a, eps=float(value)))
    if axis == "N":
        return replace(base, attack=replace(a, group_size=int(value)))
    if axis == "gamma":
        return replace(base, attack=replace(a, gamma=float(value)))
    if axis == "rho":
        return replace(base, attack=replace(a, mixup=replace(a.mixup, ratio=float(value))))
    if axis == "K":
        return replace(base, attack=replace(a, mixup=replace(a.mixup, repeats=int(value))))
    if axis == "betas":
        b1, b2 = BETA_PRESETS[value] if isinstance(value, str) else value
        return replace(base, attack=replace(a, beta1=float(b1), beta2=float(b2)))
    if axis == "method":
        if value not in ("idaa", "idaa-mi"):
            raise ValueError(f"method axis takes idaa or idaa-mi, got {value!r}")
        return replace(base, methods=(value,))
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def run_ablation(
    base: ExperimentConfig,
    axis: str,
    values: Sequence | None = None,
    threads: int = 1,
    models: dict[str, ModelWeights] | None = None,
    dataset: Dataset | None = None,
) -> list[tuple[object, MetricsReport]]:
    """One report per sweep value; every point reuses ``base.seed``, so all see the same tasks."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    values = DEFAULT_SWEEPS[axis] if values is None else values
    points = [(v, sweep_point(replace(base, out=None), axis, v)) for v in values]
    reports = [(v, run_experiment(c, threads, models, dataset)) for v, c in points]
    if base.out:
        merged = MetricsReport([r for _, rep in reports for r in rep.rows], base.to_dict())
        merged.config["ablation"] = {"axis": axis, "values": [list(v) if isinstance(v, tuple) else v for v in values]}
        write_report(merged, Path(base.out) / f"ablation_{axis}.csv")
    return reports


# ---------------------------------------------------------------------------
# ADVI image dumps
# ---------------------------------------------------------------------------


def write_advi(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError("ADVI stores one (C, H, W) image")
    header = ADVI_MAGIC + struct.pack("<3I", *image.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_advi(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != ADVI_MAGIC:
        raise ValueError(f"{path}: not an ADVI file")
    c, h, w = struct.unpack("<3I", buf[4:16])
    if len(buf) - 16 != 4 * c * h * w:
        raise ValueError(f"{path}: expected {4 * c * h * w} data bytes, found {len(buf) - 16}")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(c, h, w).astype(np.float64)


def dump_outcomes(directory, outcomes: Sequence[AttackOutcome]) -> None:
    """Write each adversarial image as ``NNNNN.advi`` plus a ``manifest.json`` of labels."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, o in enumerate(outcomes):
        name = f"{i:05d}.advi"
        write_advi(directory / name, o.x_adv)
        entries.append({"file": name, "y_src": o.y_src, "y_tgt": o.y_tgt})
    (directory / "manifest.json").write_text(json.dumps(entries, indent=1) + "\n")


def load_outcomes(directory) -> list[AttackOutcome]:
    directory = Path(directory)
    entries = json.loads((directory / "manifest.json").read_text())
    return [
        AttackOutcome(read_advi(directory / e["file"]), [], [], 0, int(e["y_src"]), int(e["y_tgt"]))
        for e in entries
    ]
