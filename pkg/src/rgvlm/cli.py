"""Command-line entry point: gen-data, label, train, eval, report.

A JSON config file is the source of truth; any field can be overridden on
the command line with a dotted path, e.g. ``--iql.gamma=0.95``.

Exit codes: 0 success, 1 validation error, 2 backend/transport failure,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import annotator, baselines, dataset, env, eval as evaluation
from .annotator import AnnotationError, AnnotatorConfig
from .dataset import DatasetError
from .env import EnvConfig
from .iql import DivergenceError, Hyper, IQLPolicy
from .iql.estimator import ArtifactError

log = logging.getLogger("rgvlm")

EXIT_OK, EXIT_VALIDATION, EXIT_BACKEND, EXIT_DIVERGENCE = 0, 1, 2, 3
DENSE_SOURCES = ("lvlm", "oracle")
BACKENDS = ("http", "oracle", "cache-replay")
ARTIFACT_NAME = "policy.bin"
METRICS_NAME = "metrics.csv"


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    trajectories_per_length: int = 10
    task_lengths: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    suboptimality: float = 0.2


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "output_dir": "runs",
    "env": EnvConfig().to_dict(),
    "generator": {"trajectories_per_length": 10, "task_lengths": [1, 2, 3, 4, 5, 6], "suboptimality": 0.2},
    "annotator": {**AnnotatorConfig().to_dict(), "backend": "oracle", "base_url": None, "noise_std": 0.0},
    "labelers": ["sparse", "oracle", "combined"],
    "iql": {**asdict(Hyper()), "hidden_sizes": [128, 128], "precision": "float32"},
    "eval": {**evaluation.EvalConfig().to_dict(), "init_modes": ["fixed", "randomized"]},
}


# ---------------------------------------------------------------------------
# configuration


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = config
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config field {'.'.join(keys[: i + 1])!r}")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config field {dotted!r}")
    node[keys[-1]] = value


def _merge(base: dict, extra: dict, prefix: str = "") -> dict:
    for k, v in extra.items():
        path = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config field {path!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k != "templates":
            _merge(base[k], v, path + ".")
        else:
            base[k] = v
    return base


def load_config(path: str | None, overrides: Sequence[str] = (), seed: int | None = None, out: str | None = None) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            _merge(config, json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if seed is not None:
        # the global seed drives data generation, labeling noise and training
        config["seed"] = seed
        config["iql"]["seed"] = seed
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"unrecognised argument {item!r}; overrides look like --section.field=value")
        key, value = item[2:].split("=", 1)
        apply_override(config, key, _parse_value(value))
    if out is not None:
        config["output_dir"] = out
    return config


def _section(config: dict, name: str, factory, drop: Sequence[str] = ()):
    values = {k: v for k, v in config[name].items() if k not in drop}
    try:
        return factory(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def env_config(config: dict) -> EnvConfig:
    return _section(config, "env", EnvConfig.from_dict)


def generator_config(config: dict) -> GeneratorConfig:
    def build(d):
        g = GeneratorConfig(**d)
        g.task_lengths = tuple(int(n) for n in g.task_lengths)
        if g.trajectories_per_length < 1:
            raise ValueError("trajectories_per_length must be >= 1")
        if not 0.0 <= g.suboptimality <= 1.0:
            raise ValueError("suboptimality must lie in [0, 1]")
        return g

    return _section(config, "generator", build)


def annotator_config(config: dict) -> AnnotatorConfig:
    return _section(config, "annotator", AnnotatorConfig.from_dict, drop=("backend", "base_url", "noise_std"))


def iql_hyper(config: dict) -> Hyper:
    return _section(config, "iql", lambda d: Hyper(**d), drop=("hidden_sizes", "precision"))


def eval_config(config: dict, init_mode: str) -> evaluation.EvalConfig:
    def build(d):
        d = dict(d)
        d["init_mode"] = init_mode
        d["env_config"] = env_config(config).to_dict()
        return evaluation.EvalConfig.from_dict(d)

    return _section(config, "eval", build, drop=("init_modes",))


# ---------------------------------------------------------------------------
# pipeline stages


def training_task_seed(seed: int, length: int, index: int) -> int:
    """Seeds for training tasks; disjoint from the held-out range."""
    if not 0 <= seed < 10_000:
        raise ConfigError("seed must lie in [0, 10000) so training and held-out task seeds never collide")
    return seed * 100_000 + length * 10_000 + index


def build_trajectories(gen: GeneratorConfig, cfg: EnvConfig, seed: int) -> list[dataset.Trajectory]:
    trajectories = []
    for n in gen.task_lengths:
        for i in range(gen.trajectories_per_length):
            task = env.generate_task(training_task_seed(seed, n, i), n, cfg)
            rng = np.random.default_rng([seed, n, i])
            trajectories.append(env.scripted_rollout(task, gen.suboptimality, rng, trajectory_id=f"L{n}-{i:05d}"))
    return trajectories


def cmd_gen_data(config: dict, out: Path) -> Path:
    gen, cfg = generator_config(config), env_config(config)
    if not out.parent.exists():
        raise ConfigError(f"parent directory {out.parent} does not exist")
    trajectories = build_trajectories(gen, cfg, int(config["seed"]))
    dataset.write_dataset(trajectories, out, env_config=cfg.to_dict(), generator_seed=int(config["seed"]))
    counts = {n: sum(1 for t in trajectories if t.meta["num_subtasks"] == n) for n in gen.task_lengths}
    print(f"wrote {len(trajectories)} trajectories to {out}")
    for n, c in counts.items():
        print(f"  length {n}: {c}")
    return out


def make_backend(config: dict, source: str, dataset_dir: Path) -> annotator.AnnotatorBackend:
    ann = config["annotator"]
    backend = ann.get("backend") or "oracle"
    if backend not in BACKENDS:
        raise ConfigError(f"annotator.backend must be one of {BACKENDS}, got {backend!r}")
    if source == "oracle" and backend != "oracle":
        raise ConfigError("--source oracle needs --backend oracle")
    if source == "lvlm" and backend == "oracle":
        raise ConfigError("--source lvlm needs --backend http or cache-replay (the oracle writes --source oracle)")
    cache_dir = ann.get("cache_dir")
    if backend == "oracle":
        manifest = dataset.read_manifest(dataset_dir)
        return annotator.OracleBackend(
            float(ann.get("noise_std") or 0.0), seed=int(config["seed"]), env_config=EnvConfig.from_dict(manifest.get("env_config"))
        )
    if backend == "cache-replay":
        if not cache_dir:
            raise ConfigError("--backend cache-replay needs annotator.cache_dir")
        return annotator.CachingBackend(cache_dir, None)
    if not ann.get("base_url"):
        raise ConfigError("--backend http needs --base-url")
    inner = annotator.HttpBackend(ann["base_url"])
    return annotator.CachingBackend(cache_dir, inner) if cache_dir else inner


def _existing_ids(dataset_dir: Path, source: str) -> set[str]:
    path = dataset.labels_path(dataset_dir, source)
    return {lab.trajectory_id for lab in dataset.read_labels(dataset_dir, source)} if path.exists() else set()


def cmd_label(config: dict, dataset_dir: Path, source: str) -> tuple[Path, int]:
    """Label every trajectory not yet labeled; returns (labels path, failures)."""
    if source not in dataset.LABEL_SOURCES:
        raise ConfigError(f"--source must be one of {dataset.LABEL_SOURCES}")
    trajectories = dataset.read_dataset(dataset_dir)
    done = _existing_ids(dataset_dir, source)
    todo = [t for t in trajectories if t.id not in done]
    out = dataset.labels_path(dataset_dir, source)
    failures = 0

    if source == "combined":
        dense_source = next((s for s in DENSE_SOURCES if dataset.labels_path(dataset_dir, s).exists()), None)
        if dense_source is None:
            raise ConfigError("combined labels need dense labels first: run `label --source lvlm` or `label --source oracle`")
        dense = {lab.trajectory_id: lab for lab in dataset.read_labels(dataset_dir, dense_source)}
        bonus = annotator_config(config).sparse_bonus
        for t in todo:
            if t.id not in dense:
                log.error("trajectory %s has no %s labels; skipped", t.id, dense_source)
                failures += 1
                continue
            dataset.append_label(dataset_dir, annotator.combine_with_sparse(dense[t.id], t, bonus))
    elif source in DENSE_SOURCES:
        backend = make_backend(config, source, dataset_dir)
        cfg = annotator_config(config)

        def on_label(label):
            dataset.append_label(dataset_dir, dataset.RewardLabelSet(label.trajectory_id, label.rewards, source))

        def on_error(traj, exc):
            nonlocal failures
            failures += 1
            log.error("labeling failed: %s", exc)

        annotator.annotate_many(backend, todo, cfg, on_label=on_label, on_error=on_error)
    else:
        provider = baselines.StubEmbedder()
        fn = {
            "sparse": baselines.sparse_labels,
            "frame_sim": lambda t: baselines.frame_similarity_labels(provider, t),
            "seq_sim": lambda t: baselines.sequence_similarity_labels(provider, t),
        }[source]
        for t in todo:
            dataset.append_label(dataset_dir, fn(t))
    print(f"{source}: {len(todo) - failures} new, {len(done)} already present, {failures} failed -> {out}")
    return out, failures


def _write_metrics(rows: list[dict], path: Path) -> None:
    fields = ["update", "v_loss", "q_loss", "policy_loss", "mean_advantage"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k != "update" else int(r[k])) for k in fields})


def cmd_train(config: dict, dataset_dir: Path, label_source: str, out: Path) -> Path:
    trajectories = dataset.read_dataset(dataset_dir)
    path = dataset.labels_path(dataset_dir, label_source)
    if not path.exists():
        raise ConfigError(f"no {label_source} labels in {dataset_dir}; run `label --source {label_source}` first")
    labeled = dataset.attach_labels(trajectories, dataset.read_labels(dataset_dir, label_source))
    iql = config["iql"]
    policy = IQLPolicy.from_hyper(iql_hyper(config), hidden_sizes=tuple(iql["hidden_sizes"]), precision=iql["precision"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        policy.fit(labeled)
    except DivergenceError:
        _write_metrics(policy.metrics_, out / METRICS_NAME)
        raise
    _write_metrics(policy.metrics_, out / METRICS_NAME)
    artifact = policy.save(out / ARTIFACT_NAME)
    last = policy.metrics_[-1] if policy.metrics_ else {}
    print(f"trained on {len(labeled)} transitions ({label_source}); artifact {artifact}; final metrics {last}")
    return artifact


def cmd_eval(config: dict, artifacts: Sequence[Path], init_modes: Sequence[str], out: Path, method: str | None = None) -> list[Path]:
    policies = {}
    for path in artifacts:
        pol = IQLPolicy.load(path)
        if pol.seed in policies:
            raise ConfigError(f"two artifacts share seed {pol.seed}")
        policies[pol.seed] = pol
    name = method or next(iter(policies.values())).label_source_ or "policy"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for mode in init_modes:
        cfg = eval_config(config, mode)
        cfg = evaluation.EvalConfig(**{**cfg.__dict__, "seeds": tuple(sorted(policies))})
        report = evaluation.evaluate(policies, cfg, name)
        path = evaluation.export_csv(report, out / f"eval_{name}_{mode}.csv")
        overall = report.overall(name, mode)
        print(f"{name} [{mode}]: mean completion {overall:.4f} -> {path}")
        written.append(path)
    return written


def cmd_report(paths: Sequence[Path], baseline: str, out: Path) -> evaluation.ComparisonTable:
    reports = [evaluation.read_csv(p) for p in paths]
    table = evaluation.compare(reports, baseline)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_comparison_json(table, out / "comparison.json")
    evaluation.export_csv(table, out / "comparison.csv")
    print(table.summary())
    return table


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output location")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rgvlm", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate scripted demonstrations")

    p = sub.add_parser("label", parents=[common], help="write reward labels for a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--source", required=True, choices=dataset.LABEL_SOURCES)
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--base-url")
    p.add_argument("--model")
    p.add_argument("--concurrency", type=int)
    p.add_argument("--cache-dir")

    p = sub.add_parser("train", parents=[common], help="train an IQL policy on labeled data")
    p.add_argument("--dataset", required=True)
    p.add_argument("--labels", required=True, choices=dataset.LABEL_SOURCES)

    p = sub.add_parser("eval", parents=[common], help="evaluate trained policies")
    p.add_argument("--artifact", required=True, nargs="+")
    p.add_argument("--init-mode", choices=("fixed", "randomized", "both"), default="both")
    p.add_argument("--method", help="method name in the report (default: the label source)")

    p = sub.add_parser("report", parents=[common], help="compare evaluation reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--baseline", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config, extra, args.seed, None)
        if args.command == "gen-data":
            cmd_gen_data(config, Path(args.out or Path(config["output_dir"]) / "data"))
        elif args.command == "label":
            ann = config["annotator"]
            for key, value in (("backend", args.backend), ("base_url", args.base_url), ("model", args.model), ("concurrency_limit", args.concurrency), ("cache_dir", args.cache_dir)):
                if value is not None:
                    ann[key] = value
            if args.source == "oracle" and args.backend is None:
                ann["backend"] = "oracle"
            elif args.source == "lvlm" and args.backend is None and ann.get("backend") == "oracle":
                ann["backend"] = "http"
            _, failures = cmd_label(config, Path(args.dataset), args.source)
            if failures:
                return EXIT_BACKEND
        elif args.command == "train":
            cmd_train(config, Path(args.dataset), args.labels, Path(args.out or Path(config["output_dir"]) / f"train_{args.labels}_s{config['seed']}"))
        elif args.command == "eval":
            modes = ("fixed", "randomized") if args.init_mode == "both" else (args.init_mode,)
            cmd_eval(config, [Path(a) for a in args.artifact], modes, Path(args.out or Path(config["output_dir"]) / "eval"), args.method)
        elif args.command == "report":
            cmd_report([Path(p) for p in args.reports], args.baseline, Path(args.out or Path(config["output_dir"]) / "report"))
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}; last metrics {exc.metrics}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except AnnotationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ConfigError, DatasetError, ArtifactError, evaluation.EvalError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
