"""Experiment orchestration: config parsing, runs, CSV artifacts and reports.

A run directory holds

* ``seed_<s>.csv`` (or ``seed_<s>_<method>.csv``): everything measured for one seed
* ``aggregate.csv``: mean and sample std over seeds of per-seed quantities
* ``bounds.csv``: every bound report, one row per (seed, subject, bound)
* ``plot_data.csv``: epoch, target error and Jeffrey estimate (training kinds)
* ``manifest.csv`` and ``config.cfg``: what produced the directory

Outputs are built in a hidden sibling directory and renamed into place only
when the whole run succeeded, so a failed run leaves nothing behind.
"""
from __future__ import annotations

import csv
import io
import hashlib
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import textconf
from .bounds import BoundReport, ep_trajectory_bound, pp_bounds
from .distributions import Categorical
from .estimators import empirical_kl_convergence, kl_envelope_method_of_types
from .oracle import enumerate_world, random_world, verify_ep_bounds, verify_pp_bounds, world_from_text
from .schemas import SCHEMA_VERSION, SCHEMAS, format_row, parse_cell
from .tasks import (DomainPair, TaskData, gaussian_shift_task, label_flip_task, linear_classifier_risk,
                    preset_world, rotated_gaussians_task)
from .textconf import ConfigError
from .training import EncoderClassifier, ModelSpec, TrainConfig, TrainResult, method_config, train

KINDS = ("bounds", "oracle", "train", "sweep", "convergence")
TASKS = ("gaussian_shift", "rotated_gaussians", "label_flip")
METHODS = ("erm", "erm-gp", "erm-cl", "kl", "kl-gp", "kl-cl")
SECTIONS = ("experiment", "task", "trainer", "world", "classifier", "convergence")
MAX_SEED = 2 ** 64 - 1


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TaskSpec:
    name: str
    dim: int = 2
    shift: float = 1.0
    sigma: float = 1.0
    separation: float = 1.0
    angle: float = 45.0
    flip_prob: float = 0.0
    flip_domain: str = "target"
    class_priors: tuple[float, float] = (0.5, 0.5)
    n_source: int = 200
    n_target: int = 200
    n_test: int = 2000

    def build(self) -> DomainPair:
        if self.name == "gaussian_shift":
            return gaussian_shift_task(self.dim, self.shift, self.sigma, self.class_priors, self.separation)
        if self.name == "rotated_gaussians":
            return rotated_gaussians_task(self.angle, self.sigma, self.separation, self.class_priors)
        return label_flip_task(self.angle, self.flip_prob, self.flip_domain, self.sigma, self.separation,
                               self.class_priors)


@dataclass(frozen=True)
class TrainerSpec:
    methods: tuple[str, ...] = ("erm",)
    base: TrainConfig = field(default_factory=TrainConfig)
    gp_weight: float = 0.1
    cl_weight: float = 0.01
    align: float = 1.0
    warm_start_epochs: int = 0
    warm_start_lr: float = 0.05

    def config(self, method: str, seed: int) -> TrainConfig:
        return method_config(method, replace(self.base, seed=seed), self.gp_weight, self.cl_weight, self.align)


@dataclass(frozen=True)
class WorldSpec:
    preset: str | None = None
    file: str | None = None
    random: int = 0


@dataclass(frozen=True)
class ConvergenceSpec:
    probs: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    sizes: tuple[int, ...] = (100, 1000, 10000)
    trials: int = 1000
    delta: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    """A parsed experiment file.  ``text`` is kept verbatim for the manifest."""

    kind: str
    seeds: tuple[int, ...]
    name: str = "experiment"
    out: str | None = None
    task: TaskSpec | None = None
    trainer: TrainerSpec | None = None
    world: WorldSpec | None = None
    classifier: tuple[tuple[float, ...], float] | None = None
    convergence: ConvergenceSpec | None = None
    text: str = ""
    base_dir: str = "."


def _seed(value, key: str) -> int:
    try:
        s = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"seed {value!r} is not an integer", key) from None
    if not 0 <= s <= MAX_SEED:
        raise ConfigError(f"seed {s} is outside [0, 2^64)", key)
    return s


def _parse_task(sec: textconf.Section) -> TaskSpec:
    name = sec.str("name")
    if name not in TASKS:
        raise ConfigError(f"unknown task {name!r}; choose from {', '.join(TASKS)}", "task.name")
    d = TaskSpec(name)
    priors = tuple(sec.floats("class_priors", d.class_priors))
    if len(priors) != 2:
        raise ConfigError("expected two class priors", "task.class_priors")
    spec = TaskSpec(name, sec.int("dim", d.dim), sec.float("shift", d.shift), sec.float("sigma", d.sigma),
                    sec.float("separation", d.separation), sec.float("angle", d.angle),
                    sec.float("flip_prob", d.flip_prob), sec.str("flip_domain", d.flip_domain), priors,
                    sec.int("n_source", d.n_source), sec.int("n_target", d.n_target), sec.int("n_test", d.n_test))
    try:
        spec.build()
    except ValueError as exc:
        raise ConfigError(str(exc), "task") from None
    return spec


def _parse_trainer(sec: textconf.Section, kind: str) -> TrainerSpec:
    if kind == "train":
        methods = (sec.str("method", "erm"),)
    else:
        methods = tuple(sec.list("methods", ["erm"]))
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}",
                              "trainer.method" if kind == "train" else "trainer.methods")
    if not methods:
        raise ConfigError("at least one method is required", "trainer.methods")
    d = TrainConfig()
    sigma = sec.floats("sgld_sigma", [0.0])
    tb = sec.int("target_batch", 0)
    cl_lr = sec.float("cl_lr", -1.0)
    try:
        base = TrainConfig(lr=sec.float("lr", d.lr), batch=sec.int("batch", d.batch), target_batch=tb or None,
                           epochs=sec.int("epochs", d.epochs), sgld_sigma=sigma[0] if len(sigma) == 1 else sigma,
                           repr_dim=sec.int("repr_dim", d.repr_dim), hidden=sec.int("hidden", d.hidden),
                           hvp_mode=sec.str("hvp_mode", d.hvp_mode), cl_lr=None if cl_lr < 0 else cl_lr,
                           soft_pseudo_labels=sec.bool("soft_pseudo_labels", False),
                           eval_batch=sec.int("eval_batch", d.eval_batch))
        spec = TrainerSpec(methods, base, sec.float("gp_weight", 0.1), sec.float("cl_weight", 0.01),
                           sec.float("align", 1.0), sec.int("warm_start_epochs", 0),
                           sec.float("warm_start_lr", 0.05))
        for m in methods:
            spec.config(m, 0)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), "trainer") from None
    if spec.warm_start_epochs < 0:
        raise ConfigError("must be nonnegative", "trainer.warm_start_epochs")
    return spec


def _parse_world(sec: textconf.Section, base_dir: str) -> WorldSpec:
    preset = sec.str("preset", "") or None
    path = sec.str("file", "") or None
    count = sec.int("random", 0)
    if preset and path:
        raise ConfigError("give either preset or file, not both", "world.file")
    if preset is not None:
        try:
            preset_world(preset)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0]), "world.preset") from None
    if path is not None:
        full = Path(base_dir) / path
        if not full.is_file():
            raise ConfigError(f"world file {path!r} not found", "world.file")
        world_from_text(full.read_text())
    if count < 0:
        raise ConfigError("must be nonnegative", "world.random")
    if preset is None and path is None and count == 0:
        raise ConfigError("needs a preset, a file or random > 0", "[world]")
    return WorldSpec(preset, path, count)


def parse_config(text: str, kind: str | None = None, base_dir: str = ".") -> ExperimentConfig:
    """Parse and validate an experiment file.

    ``kind`` (from the CLI subcommand) must agree with ``experiment.kind`` when
    both are given.  Every key must be consumed, so typos fail loudly.
    """
    doc = textconf.parse(text)
    exp = doc.section("experiment")
    declared = exp.str("kind", kind or "")
    if not declared:
        raise ConfigError("missing required key", "experiment.kind")
    if declared not in KINDS:
        raise ConfigError(f"unknown kind {declared!r}; choose from {', '.join(KINDS)}", "experiment.kind")
    if kind is not None and declared != kind:
        raise ConfigError(f"config is a {declared!r} experiment, not {kind!r}", "experiment.kind")
    seeds = tuple(_seed(s, "experiment.seeds") for s in exp.list("seeds"))
    if not seeds:
        raise ConfigError("seeds list is empty", "experiment.seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds repeat", "experiment.seeds")
    cfg = dict(kind=declared, seeds=seeds, name=exp.str("name", "experiment"), out=exp.str("out", "") or None,
               text=text, base_dir=base_dir)

    def need(section):
        if not doc.has(section):
            raise ConfigError(f"a {declared!r} experiment needs this section", f"[{section}]")
        return doc.section(section)

    if declared in ("train", "sweep"):
        cfg["task"] = _parse_task(need("task"))
        cfg["trainer"] = _parse_trainer(need("trainer"), declared)
    elif declared == "oracle":
        cfg["world"] = _parse_world(need("world"), base_dir)
    elif declared == "bounds":
        if doc.has("world") == doc.has("task"):
            raise ConfigError("a bounds experiment needs exactly one of [world] or [task]", "[world]")
        if doc.has("world"):
            cfg["world"] = _parse_world(doc.section("world"), base_dir)
        else:
            cfg["task"] = _parse_task(doc.section("task"))
            if cfg["task"].name == "label_flip" and cfg["task"].flip_prob > 0:
                raise ConfigError("analytic bounds need an unflipped task", "task.flip_prob")
            cls = need("classifier")
            weight = tuple(cls.floats("weight"))
            dim = cfg["task"].dim if cfg["task"].name == "gaussian_shift" else 2
            if len(weight) != dim:
                raise ConfigError("weight length must match the input dimension", "classifier.weight")
            cfg["classifier"] = (weight, cls.float("bias", 0.0))
    else:
        sec = need("convergence")
        probs = tuple(sec.floats("probs", ConvergenceSpec.probs))
        sizes = tuple(sec.list("sizes", list(ConvergenceSpec.sizes), int))
        spec = ConvergenceSpec(probs, sizes, sec.int("trials", 1000), sec.float("delta", 0.1))
        try:
            Categorical(np.array(probs))
        except ValueError as exc:
            raise ConfigError(str(exc), "convergence.probs") from None
        if not sizes or min(sizes) < 1:
            raise ConfigError("sizes must be positive integers", "convergence.sizes")
        if spec.trials < 1 or not 0 < spec.delta < 1:
            raise ConfigError("trials must be >= 1 and delta in (0, 1)", "convergence")
        cfg["convergence"] = spec
    doc.check_unused(SECTIONS)
    return ExperimentConfig(**cfg)


def load_config(path: str | os.PathLike, kind: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text, kind, str(path.parent))


# ----------------------------------------------------------------------------
# CSV helpers


def csv_text(schema: str, rows) -> str:
    """Render rows after validating each one against ``schema``."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(SCHEMAS[schema]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(format_row(schema, row))
    return buf.getvalue()


def read_csv(path: str | os.PathLike, schema: str) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = SCHEMAS[schema]
        if reader.fieldnames != list(cols):
            raise ValueError(f"{Path(path).name}: header does not match schema {schema!r}")
        return [{k: parse_cell(cols[k], v) for k, v in row.items()} for row in reader]


def _bound_rows(seed: int, subject: str, reports) -> list[dict]:
    rows = []
    for r in reports:
        base = r.row()
        rows.append({"seed": seed, "subject": subject, "name": r.name, "lhs": r.lhs, "rhs": r.rhs,
                     "slack": r.slack, "valid": base["valid"], "flags": base["flags"],
                     "ingredients": base["ingredients"]})
    return rows


def mean_std(values) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation; the std of one value is 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 1:
        return float(v[0]), 0.0
    with np.errstate(invalid="ignore"):  # infinite slacks give nan spread
        return float(v.mean()), float(v.std(ddof=1))


def aggregate_rows(per_seed: dict[tuple[str, str], list[float]]) -> list[dict]:
    rows = []
    for (method, metric), vals in per_seed.items():
        mean, std = mean_std(vals)
        rows.append({"method": method, "metric": metric, "n_seeds": len(vals), "mean": mean, "std": std})
    return rows


# ----------------------------------------------------------------------------
# experiment kinds; each returns {file name: (schema, rows)}


def _worlds(cfg: ExperimentConfig, seed: int):
    spec = cfg.world
    out = []
    if spec.preset:
        out.append((spec.preset, preset_world(spec.preset)))
    if spec.file:
        out.append((Path(spec.file).stem, world_from_text((Path(cfg.base_dir) / spec.file).read_text())))
    rng = np.random.default_rng(seed)
    out += [(f"random_{k}", random_world(rng)) for k in range(spec.random)]
    return out


def _world_reports(world, q):
    reports = list(verify_ep_bounds(q, world))
    if world.n_w <= 64:
        reports += verify_pp_bounds(world, q)
    return reports


def analytic_pp_reports(pair: DomainPair, weight, bias: float) -> list[BoundReport]:
    """Population bounds for a fixed linear classifier with exact Gaussian risks."""
    risk_s = linear_classifier_risk(pair, weight, bias, "source")
    risk_t = linear_classifier_risk(pair, weight, bias, "target")
    return pp_bounds(lhs_abs=abs(risk_t - risk_s), lhs_signed=risk_t - risk_s, subgaussian=0.5, loss_bound=1.0,
                     kl_tgt_src=pair.true_kl_tgt_src, kl_src_tgt=pair.true_kl_src_tgt,
                     kl_inputs_tgt_src=pair.true_kl_inputs_tgt_src, tv=pair.true_tv, evidence="bounded-loss")


def _run_bounds(cfg: ExperimentConfig):
    per_seed, all_bounds, agg = {}, [], {}
    for seed in cfg.seeds:
        rows = []
        if cfg.world is not None:
            for label, world in _worlds(cfg, seed):
                rows += _bound_rows(seed, label, _world_reports(world, enumerate_world(world)))
        else:
            weight, bias = cfg.classifier
            rows += _bound_rows(seed, cfg.task.name, analytic_pp_reports(cfg.task.build(), weight, bias))
        per_seed[f"seed_{seed}.csv"] = ("bounds", rows)
        all_bounds += rows
        for r in rows:
            agg.setdefault(("bounds", f"{r['subject']}.{r['name']}.slack"), []).append(r["slack"])
    return per_seed, all_bounds, aggregate_rows(agg), None


def _run_oracle(cfg: ExperimentConfig):
    per_seed, all_bounds, agg = {}, [], {}
    for seed in cfg.seeds:
        rows = []
        for label, world in _worlds(cfg, seed):
            q = enumerate_world(world)
            rows.append({"seed": seed, "world": label, "n_x": world.n_x, "n_y": world.n_y, "n": world.n,
                         "m": world.m, "algorithm": world.algorithm, "err": q.err, "kl_src_tgt": q.kl_src_tgt,
                         "kl_tgt_src": q.kl_tgt_src, "lambda_star": q.lambda_star, "dis": q.dis_value,
                         "chain_rule_gap": q.chain_rule_gap()})
            all_bounds += _bound_rows(seed, label, _world_reports(world, q))
            for metric in ("err", "chain_rule_gap"):
                agg.setdefault((label, metric), []).append(rows[-1][metric])
        per_seed[f"seed_{seed}.csv"] = ("oracle", rows)
    return per_seed, all_bounds, aggregate_rows(agg), None


def _run_convergence(cfg: ExperimentConfig):
    spec = cfg.convergence
    mu = Categorical(np.array(spec.probs))
    per_seed, agg = {}, {}
    for seed in cfg.seeds:
        rows = []
        for k, n in enumerate(spec.sizes):
            res = empirical_kl_convergence(mu, n, spec.trials, seed=[seed, k], deltas=(spec.delta,))
            quant, env = res.quantiles[spec.delta], res.envelopes[spec.delta]
            rows.append({"seed": seed, "n": n, "support": mu.size, "trials": spec.trials, "delta": spec.delta,
                         "quantile": quant, "envelope": env,
                         "envelope_types": kl_envelope_method_of_types(mu.size, n, spec.delta),
                         "within": bool(quant <= env)})
            agg.setdefault(("convergence", f"quantile_n{n}"), []).append(quant)
        per_seed[f"seed_{seed}.csv"] = ("convergence", rows)
    return per_seed, [], aggregate_rows(agg), None


def linear_view(model: EncoderClassifier) -> tuple[np.ndarray, float] | None:
    """(w, b) with ``predict(x) = 1[w.x + b > 0]`` for a two-class model without
    a hidden layer, whose posterior-mean prediction is linear in x."""
    if model.spec.hidden > 0 or model.spec.num_classes != 2:
        return None
    o, p = model.offsets, model.params

    def blk(name):
        lo, hi, shape = o[name]
        return p[lo:hi].reshape(shape)

    diff = blk("cls_w")[:, 1] - blk("cls_w")[:, 0]
    return blk("enc_mean_w") @ diff, float(blk("enc_mean_b") @ diff + blk("cls_b")[1] - blk("cls_b")[0])


def draw_task(spec: TaskSpec, seed: int) -> tuple[DomainPair, TaskData]:
    pair = spec.build()
    return pair, pair.draw(spec.n_source, spec.n_target, spec.n_test, np.random.default_rng([seed, 0]))


def initial_model(spec: TaskSpec, trainer: TrainerSpec, seed: int) -> EncoderClassifier:
    mspec = ModelSpec(spec.dim if spec.name == "gaussian_shift" else 2, trainer.base.repr_dim,
                      hidden=trainer.base.hidden)
    return EncoderClassifier.initialize(mspec, np.random.default_rng([seed, 1]))


def train_method(spec: TaskSpec, trainer: TrainerSpec, method: str, seed: int,
                 data: tuple[DomainPair, TaskData] | None = None, record_trajectory: bool = False) -> TrainResult:
    """One seed of one method.  Methods sharing a seed share data and initial
    weights, so comparisons between them are paired.  A warm start, when
    configured, runs plain ERM first and the method's metrics start after it."""
    pair, d = data if data is not None else draw_task(spec, seed)
    model = initial_model(spec, trainer, seed)
    if trainer.warm_start_epochs > 0:
        warm = replace(trainer.base, lr=trainer.warm_start_lr, epochs=trainer.warm_start_epochs, seed=seed,
                       sgld_sigma=0.0)
        model = train(model, d.source, d.target_inputs, method_config("erm", warm)).model
    return train(model, d.source, d.target_inputs, trainer.config(method, seed), target_eval=d.target_eval,
                 record_trajectory=record_trajectory)


def _training_bounds(pair: DomainPair, d: TaskData, res: TrainResult, cfg: TrainConfig) -> list[BoundReport]:
    reports = []
    final = res.metrics[-1]
    lhs = abs(final["target_error"] - final["source_error"])
    se = math.sqrt(max(final["target_error"] * (1 - final["target_error"]), 1e-12) / len(d.target_eval))
    if pair.true_kl_src_tgt is not None and cfg.sigma_at(0) > 0 and len(res.log) > 0:
        reports.append(ep_trajectory_bound(0.5, len(d.source), pair.true_kl_src_tgt, res.log, lhs=lhs, stderr=se))
    view = linear_view(res.model)
    if view is not None and pair.true_kl_tgt_src is not None:
        reports += analytic_pp_reports(pair, *view)
    return reports


METRICS = ("target_accuracy", "target_error", "source_error", "jeffrey", "cl_distance", "trajectory_sum")


def _run_training(cfg: ExperimentConfig):
    per_seed, all_bounds, plot, agg = {}, [], [], {}
    single = cfg.kind == "train"
    for seed in cfg.seeds:
        data = draw_task(cfg.task, seed)
        for method in cfg.trainer.methods:
            tcfg = cfg.trainer.config(method, seed)
            res = train_method(cfg.task, cfg.trainer, method, seed, data)
            rows = [{"seed": seed, "method": method, **{k: r[k] for k in SCHEMAS["epochs"] if k not in
                                                        ("seed", "method")}} for r in res.metrics]
            per_seed[f"seed_{seed}.csv" if single else f"seed_{seed}_{method}.csv"] = ("epochs", rows)
            plot += [{"seed": seed, "method": method, "epoch": r["epoch"], "target_error": r["target_error"],
                      "jeffrey": r["jeffrey"]} for r in rows]
            all_bounds += _bound_rows(seed, method, _training_bounds(*data, res, tcfg))
            for metric in METRICS:
                agg.setdefault((method, metric), []).append(rows[-1][metric])
    return per_seed, all_bounds, aggregate_rows(agg), plot


RUNNERS = {"bounds": _run_bounds, "oracle": _run_oracle, "convergence": _run_convergence,
           "train": _run_training, "sweep": _run_training}


# ----------------------------------------------------------------------------
# run


class RunError(RuntimeError):
    pass


def _replace_dir(tmp: Path, out: Path) -> None:
    if out.exists():
        if not out.is_dir():
            raise RunError(f"output path {out} exists and is not a directory")
        if any(out.iterdir()) and not (out / "manifest.csv").is_file():
            raise RunError(f"output directory {out} is not empty and holds no earlier run")
        shutil.rmtree(out)
    os.replace(tmp, out)


def run(config: str | os.PathLike | ExperimentConfig, out: str | os.PathLike | None = None,
        kind: str | None = None, seed: int | None = None) -> Path:
    """Execute an experiment and write its artifacts to ``out``.

    ``seed`` replaces the configured seed list with that single seed.  On any
    failure the partially written directory is deleted and the error re-raised.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config, kind)
    if kind is not None and cfg.kind != kind:
        raise ConfigError(f"config is a {cfg.kind!r} experiment, not {kind!r}", "experiment.kind")
    if seed is not None:
        cfg = replace(cfg, seeds=(_seed(seed, "--seed"),))
    target = out if out is not None else cfg.out
    if target is None:
        raise ConfigError("no output directory; pass --out or set experiment.out", "experiment.out")
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.partial-", dir=target.parent))
    try:
        per_seed, bound_rows, agg, plot = RUNNERS[cfg.kind](cfg)
        files = {name: csv_text(schema, rows) for name, (schema, rows) in per_seed.items()}
        files["aggregate.csv"] = csv_text("aggregate", agg)
        files["bounds.csv"] = csv_text("bounds", bound_rows)
        if plot is not None:
            files["plot_data.csv"] = csv_text("plot", plot)
        files["config.cfg"] = cfg.text
        manifest = [("schema_version", str(SCHEMA_VERSION)), ("kind", cfg.kind), ("name", cfg.name),
                    ("seeds", " ".join(map(str, cfg.seeds))),
                    ("config_sha256", hashlib.sha256(cfg.text.encode()).hexdigest()),
                    ("per_seed", " ".join(sorted(per_seed))),
                    ("artifacts", " ".join(sorted(files)))]
        files["manifest.csv"] = csv_text("manifest", [{"key": k, "value": v} for k, v in manifest])
        for name, text in files.items():
            (tmp / name).write_text(text)
        _replace_dir(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return target


# ----------------------------------------------------------------------------
# report


class MissingArtifacts(FileNotFoundError):
    def __init__(self, directory: Path, names: list[str]):
        self.names = names
        super().__init__(f"{directory}: missing artifacts: {', '.join(names)}")


def read_manifest(directory: Path) -> dict[str, str]:
    path = directory / "manifest.csv"
    if not path.is_file():
        raise MissingArtifacts(directory, ["manifest.csv"])
    return {r["key"]: r["value"] for r in read_csv(path, "manifest")}


def _run_dirs(directory: Path) -> list[Path]:
    if (directory / "manifest.csv").is_file():
        return [directory]
    subs = sorted(p for p in directory.iterdir() if p.is_dir() and (p / "manifest.csv").is_file()) \
        if directory.is_dir() else []
    if not subs:
        raise MissingArtifacts(directory, ["manifest.csv"])
    return subs


def _fmt(mean: float, std: float, scale: float = 1.0) -> str:
    return f"{mean * scale:.2f} ± {std * scale:.2f}"


def report(directory: str | os.PathLike) -> str:
    """Readable summary of a run directory, or of every run directly inside it.

    Training runs give a per-method accuracy table (percent, mean ± sample std
    over seeds); every run with bound reports adds a slack summary.
    """
    directory = Path(directory)
    method_lines, bound_lines, other_lines = [], [], []
    for run_dir in _run_dirs(directory):
        manifest = read_manifest(run_dir)
        missing = [a for a in manifest.get("artifacts", "").split() if not (run_dir / a).is_file()]
        if missing:
            raise MissingArtifacts(run_dir, missing)
        label = f"{run_dir.name} ({manifest['kind']})"
        agg = read_csv(run_dir / "aggregate.csv", "aggregate")
        if manifest["kind"] in ("train", "sweep"):
            for r in agg:
                if r["metric"] == "target_accuracy":
                    method_lines.append(f"{label:<28} {r['method']:<8} {r['n_seeds']:>5}   "
                                        f"{_fmt(r['mean'], r['std'], 100.0)}")
        elif manifest["kind"] in ("oracle", "convergence"):
            for r in agg:
                other_lines.append(f"{label:<28} {r['method']:<14} {r['metric']:<22} {_fmt(r['mean'], r['std'])}"
                                   if r["std"] else f"{label:<28} {r['method']:<14} {r['metric']:<22} "
                                   f"{r['mean']:.6g}")
        groups: dict[str, list[dict]] = {}
        for r in read_csv(run_dir / "bounds.csv", "bounds"):
            groups.setdefault(r["name"], []).append(r)
        for name, rows in groups.items():
            checked = [r for r in rows if r["valid"]]
            ok = sum(r["valid"] == "true" for r in checked)
            slack = [r["slack"] for r in checked]
            low = f"{min(slack):.4g}" if slack else "-"
            bound_lines.append(f"{label:<28} {name:<34} {ok:>3}/{len(checked):<3} {low:>10}")
    out = []
    if method_lines:
        out += ["Target accuracy (%)", f"{'run':<28} {'method':<8} {'seeds':>5}   mean ± std"] + method_lines
    if other_lines:
        out += ([""] if out else []) + ["Exact and convergence quantities"] + other_lines
    if bound_lines:
        out += ([""] if out else []) + ["Bound slack", f"{'run':<28} {'bound':<34} {'valid':>7} {'min slack':>10}"]
        out += bound_lines
    return "\n".join(out) + "\n"
