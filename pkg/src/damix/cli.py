"""Command line driver: config-driven runs, verification, reports, data dumps.

Verbs:
    damix run CONFIG [--seed N] [--stage pretrain|all] [--out DIR]
    damix verify
    damix report MANIFEST [MANIFEST ...] [--format csv|json] [--out DIR]
    damix gen-data CONFIG [--seed N] [--out DIR]

Exit codes: 0 success, 1 config error, 2 runtime abort, 3 verification
failure. The output root resolves as --out, then $DAMIX_OUT, then
./runs. A run writes everything under one directory named by the
config-file hash and the seed, so seed-paired sweeps never collide.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from .errors import ConfigError, DamixError, ReportError
from .evaluation import domain_distance_matrix, evaluate_retrieval, normalize_rows
from .numerics import Tensor, save_tensor
from .pipeline import (
    AdaptConfig,
    LabelCatalog,
    Model,
    ModelConfig,
    PretrainConfig,
    adapt_stage,
    convert_for_adaptation,
    pretrain_stage,
    save_checkpoint,
)
from .synthetic import SyntheticSpec, generate_synthetic, make_eval_split
from .verify import run_verification

__all__ = [
    "EvalSettings",
    "ExperimentConfig",
    "RunManifest",
    "load_experiment_config",
    "run_experiment",
    "generate_data_files",
    "emit_report",
    "main",
]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3

MANIFEST_FORMAT = "damix-run-manifest-v1"
MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EvalSettings:
    """Retrieval protocol for the held-out target split."""

    queries_per_identity: int = 2
    gallery_per_identity: int = 4
    ranks: tuple = (1, 5, 10)
    normalize: bool = True

    def __post_init__(self):
        if self.queries_per_identity < 1 or self.gallery_per_identity < 1:
            raise ConfigError("eval split needs at least one query and one gallery sample per identity")
        if not self.ranks or any(int(k) < 1 for k in self.ranks):
            raise ConfigError(f"ranks must be positive integers, got {self.ranks}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs, assembled from the six config sections."""

    data: SyntheticSpec
    target_domain: int
    model: ModelConfig
    pretrain: PretrainConfig
    adapt: AdaptConfig
    eval: EvalSettings
    config_hash: str
    config_bytes: bytes = field(repr=False)
    seed: int = 0


_SECTION_KEYS = {
    "data": {
        "num_domains", "identities_per_domain", "samples_per_identity", "dim",
        "positions", "noise_scale", "style_strength", "shift_scale", "seed",
        "target_domain",
    },
    "model": {
        "feature_dim", "num_blocks", "norm_mode", "use_mdif", "slope", "eps",
        "momentum_alpha", "rectifier_rank", "agent_alpha", "init_seed",
    },
    "pretrain": {
        "epochs", "steps_per_epoch", "lr", "weight_decay", "milestones",
        "margin", "identities_per_domain", "samples_per_identity", "seed",
    },
    "adapt": {
        "epochs", "steps_per_epoch", "lr", "weight_decay", "margin",
        "identities_per_domain", "samples_per_identity", "seed",
    },
    "cluster": {"eps", "min_pts"},
    "eval": {"queries_per_identity", "gallery_per_identity", "ranks", "normalize"},
}


def _validated_section(config: dict, name: str) -> dict:
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"section [{name}] must be a table, got {type(section).__name__}")
    unknown = sorted(set(section) - _SECTION_KEYS[name])
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in section [{name}]")
    return dict(section)


def load_experiment_config(path, seed_override=None) -> ExperimentConfig:
    """Parse a TOML experiment file into validated config objects.

    A --seed override replaces the data seed and every stage seed that
    the file does not pin explicitly, which is what seed-paired ablation
    sweeps need: one flag, same config file, distinct full runs.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    try:
        parsed = tomli.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from None
    unknown = sorted(set(parsed) - set(_SECTION_KEYS))
    if unknown:
        raise ConfigError(f"unknown section [{unknown[0]}] in {path}")

    data_section = _validated_section(parsed, "data")
    target_domain = data_section.pop("target_domain", None)
    if seed_override is not None:
        data_section["seed"] = int(seed_override)
    spec = SyntheticSpec(**data_section)
    run_seed = spec.seed
    if target_domain is None:
        target_domain = spec.num_domains - 1
    if not 0 <= int(target_domain) < spec.num_domains:
        raise ConfigError(
            f"target_domain must name one of the {spec.num_domains} generated domains, got {target_domain}"
        )

    model_section = _validated_section(parsed, "model")
    model_section.setdefault("init_seed", run_seed)
    model = ModelConfig(input_dim=spec.dim, positions=spec.positions, **model_section)

    pretrain_section = _validated_section(parsed, "pretrain")
    if "milestones" in pretrain_section:
        pretrain_section["milestones"] = tuple(int(m) for m in pretrain_section["milestones"])
    pretrain_section.setdefault("seed", run_seed)
    pretrain = PretrainConfig(**pretrain_section)

    adapt_section = _validated_section(parsed, "adapt")
    adapt_section.setdefault("seed", run_seed)
    cluster_section = _validated_section(parsed, "cluster")
    if "eps" in cluster_section:
        adapt_section["cluster_eps"] = float(cluster_section["eps"])
    if "min_pts" in cluster_section:
        adapt_section["cluster_min_pts"] = int(cluster_section["min_pts"])
    adapt = AdaptConfig(**adapt_section)

    eval_section = _validated_section(parsed, "eval")
    if "ranks" in eval_section:
        eval_section["ranks"] = tuple(int(k) for k in eval_section["ranks"])
    settings = EvalSettings(**eval_section)

    return ExperimentConfig(
        data=spec,
        target_domain=int(target_domain),
        model=model,
        pretrain=pretrain,
        adapt=adapt,
        eval=settings,
        config_hash=hashlib.sha256(raw).hexdigest()[:10],
        config_bytes=raw,
        seed=run_seed,
    )


def _output_root(out_flag) -> Path:
    if out_flag:
        return Path(out_flag)
    env = os.environ.get("DAMIX_OUT")
    return Path(env) if env else Path("runs")


# ---------------------------------------------------------------------------
# deterministic file emission


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, rows, columns=None) -> Path:
    if columns is None:
        columns = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row.get(col)) for col in columns])
    return path


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    """Index of one run directory; all paths are relative to it."""

    config_hash: str
    seed: int
    status: str = "running"
    stages: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)
    failure: dict = field(default_factory=dict)
    target_domain: int = 0
    norm_mode: str = "dsbn"
    use_mdif: bool = False

    def to_dict(self) -> dict:
        payload = dataclasses.asdict(self)
        payload["format"] = MANIFEST_FORMAT
        return payload

    def write(self, run_dir) -> Path:
        """Write manifest.json after checking every referenced path exists."""
        run_dir = Path(run_dir)
        for group in (self.checkpoints, self.logs, self.reports):
            for key, rel in group.items():
                if not (run_dir / rel).exists():
                    raise ReportError(f"manifest references missing file {key}: {run_dir / rel}")
        return _write_json(run_dir / MANIFEST_NAME, self.to_dict())

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ReportError(f"cannot read manifest {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ReportError(f"malformed manifest {path}: {exc}") from None
        if not isinstance(payload, dict) or payload.get("format") != MANIFEST_FORMAT:
            raise ReportError(f"malformed manifest {path}: missing format tag {MANIFEST_FORMAT!r}")
        payload = {k: v for k, v in payload.items() if k != "format"}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ReportError(f"malformed manifest {path}: unknown field {unknown[0]!r}")
        try:
            return cls(**payload)
        except TypeError as exc:
            raise ReportError(f"malformed manifest {path}: {exc}") from None


# ---------------------------------------------------------------------------
# the run verb


def _epoch_metrics(model, experiment, eval_split, train_sets) -> dict:
    """Target retrieval quality plus pairwise domain-mean distances."""
    queries, query_ids, gallery, gallery_ids = eval_split
    settings = experiment.eval
    q_feats = model.inference_features(queries, experiment.target_domain)
    g_feats = model.inference_features(gallery, experiment.target_domain)
    if settings.normalize:
        q_feats, g_feats = normalize_rows(q_feats), normalize_rows(g_feats)
    result = evaluate_retrieval(q_feats, query_ids, g_feats, gallery_ids, ranks=settings.ranks)
    row = {"map": result.mAP}
    for k in settings.ranks:
        row[f"rank{k}"] = result.cmc[k]

    feats = np.concatenate([model.inference_features(ds.inputs, ds.domain) for ds in train_sets])
    if settings.normalize:
        feats = normalize_rows(feats)
    domain_ids = np.concatenate([np.full(len(ds), ds.domain, dtype=np.int64) for ds in train_sets])
    domains = sorted(ds.domain for ds in train_sets)
    matrix = domain_distance_matrix(feats, domain_ids, domains=domains)
    for i, a in enumerate(domains):
        for j in range(i + 1, len(domains)):
            row[f"dist_{a}_{domains[j]}"] = matrix[i, j]
    return row


def run_experiment(config_path, seed=None, stage="all", out_flag=None) -> RunManifest:
    """Execute the configured stages under a fresh (or reused) run directory.

    Raises ConfigError for unusable configuration and lets stage errors
    propagate after recording them in the manifest, so the command wrapper
    can map them to exit codes.
    """
    if stage not in ("all", "pretrain"):
        raise ConfigError(f"--stage must be 'pretrain' or 'all', got {stage!r}")
    experiment = load_experiment_config(config_path, seed_override=seed)
    run_dir = _output_root(out_flag) / f"{experiment.config_hash}-s{experiment.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_bytes(experiment.config_bytes)

    manifest = RunManifest(
        config_hash=experiment.config_hash,
        seed=experiment.seed,
        target_domain=experiment.target_domain,
        norm_mode=experiment.model.norm_mode,
        use_mdif=experiment.model.use_mdif,
    )

    datasets = generate_synthetic(experiment.data)
    target = datasets[experiment.target_domain].as_unlabeled_target()
    sources = [ds for ds in datasets if ds.domain != experiment.target_domain]
    model = Model(
        experiment.model,
        [ds.domain for ds in sources],
        LabelCatalog(sources, target_domain=experiment.target_domain),
    )

    try:
        started = time.perf_counter()
        pretrain_history = pretrain_stage(sources, model, experiment.pretrain)
        manifest.wall_clock["pretrain"] = time.perf_counter() - started
        manifest.stages.append("pretrain")
        save_checkpoint(model, run_dir / "checkpoints" / "pretrain")
        manifest.checkpoints["pretrain"] = "checkpoints/pretrain"
        _write_csv(run_dir / "logs" / "pretrain_history.csv", pretrain_history)
        manifest.logs["pretrain"] = "logs/pretrain_history.csv"

        if stage == "all":
            convert_for_adaptation(model, experiment.target_domain)
            eval_split = make_eval_split(
                experiment.data,
                experiment.target_domain,
                queries_per_identity=experiment.eval.queries_per_identity,
                gallery_per_identity=experiment.eval.gallery_per_identity,
            )
            train_sets = sources + [target]
            epoch_rows = []

            def on_epoch(current_model, epoch):
                metrics = _epoch_metrics(current_model, experiment, eval_split, train_sets)
                epoch_rows.append({"epoch": epoch, **metrics})
                return metrics

            pseudo_dir = run_dir / "pseudo"
            pseudo_dir.mkdir(exist_ok=True)
            started = time.perf_counter()
            adapt_history = adapt_stage(
                sources, target, model, experiment.adapt,
                on_epoch=on_epoch, assignment_dir=pseudo_dir,
            )
            manifest.wall_clock["adapt"] = time.perf_counter() - started
            manifest.stages.append("adapt")
            save_checkpoint(model, run_dir / "checkpoints" / "final")
            manifest.checkpoints["final"] = "checkpoints/final"
            _write_csv(run_dir / "logs" / "adapt_history.csv", adapt_history)
            manifest.logs["adapt"] = "logs/adapt_history.csv"
            _write_csv(run_dir / "reports" / "epoch_metrics.csv", epoch_rows)
            manifest.reports["epoch_metrics"] = "reports/epoch_metrics.csv"
            summary = {
                "config_hash": experiment.config_hash,
                "seed": experiment.seed,
                "epochs": len(epoch_rows),
                "final": epoch_rows[-1] if epoch_rows else {},
                "best_map": max((r["map"] for r in epoch_rows), default=None),
            }
            _write_json(run_dir / "reports" / "metrics.json", summary)
            manifest.reports["summary"] = "reports/metrics.json"
    except DamixError as exc:
        failed_stage = "pretrain" if "pretrain" not in manifest.stages else "adapt"
        manifest.status = "aborted"
        manifest.failure = {"stage": failed_stage, "diagnostic": str(exc)}
        manifest.write(run_dir)
        raise

    manifest.status = "complete"
    manifest.write(run_dir)
    return manifest


# ---------------------------------------------------------------------------
# the report verb


def _load_epoch_rows(manifest_path: Path):
    manifest = RunManifest.load(manifest_path)
    run_dir = manifest_path.parent
    rel = manifest.reports.get("epoch_metrics")
    missing = []
    if rel is None:
        missing.append(f"{manifest_path}: no epoch metrics recorded")
        rel_path = None
    else:
        rel_path = run_dir / rel
        if not rel_path.exists():
            missing.append(str(rel_path))
    if missing:
        raise ReportError("missing metric files: " + "; ".join(missing))
    with open(rel_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    label = run_dir.name or str(run_dir)
    return label, rows


def emit_report(manifest_paths, fmt="csv", out_flag=None) -> Path:
    """Aggregate per-epoch metrics; with several manifests, pair columns.

    Two manifests get an extra delta column per metric (second minus
    first), which is the shape ablation comparisons read naturally.
    """
    if fmt not in ("csv", "json"):
        raise ConfigError(f"--format must be 'csv' or 'json', got {fmt!r}")
    loaded = [_load_epoch_rows(Path(p)) for p in manifest_paths]
    out_dir = Path(out_flag) if out_flag else Path(".")

    if len(loaded) == 1:
        label, rows = loaded[0]
        columns = list(rows[0].keys()) if rows else ["epoch"]
        merged = rows
    else:
        labels = [label for label, _ in loaded]
        if len(set(labels)) != len(labels):
            raise ReportError(f"manifests resolve to duplicate run labels: {labels}")
        by_epoch = []
        for label, rows in loaded:
            by_epoch.append({row["epoch"]: row for row in rows})
        epochs = sorted({e for table in by_epoch for e in table}, key=lambda v: int(v))
        metric_names = []
        for _, rows in loaded:
            for row in rows:
                for key in row:
                    if key != "epoch" and key not in metric_names:
                        metric_names.append(key)
        columns = ["epoch"]
        for name in metric_names:
            columns.extend(f"{name}[{label}]" for label in labels)
            if len(loaded) == 2:
                columns.append(f"{name}[delta]")
        merged = []
        for epoch in epochs:
            row = {"epoch": epoch}
            for name in metric_names:
                cells = [table.get(epoch, {}).get(name) for table in by_epoch]
                for label, cell in zip(labels, cells):
                    row[f"{name}[{label}]"] = cell
                if len(loaded) == 2 and all(c not in (None, "") for c in cells):
                    row[f"{name}[delta]"] = repr(float(cells[1]) - float(cells[0]))
            merged.append(row)

    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        return _write_csv(out_dir / "report.csv", merged, columns=columns)
    return _write_json(out_dir / "report.json", merged)


# ---------------------------------------------------------------------------
# the gen-data verb


def generate_data_files(config_path, seed=None, out_flag=None) -> Path:
    """Materialize the synthetic datasets as tensor files plus label CSVs."""
    experiment = load_experiment_config(config_path, seed_override=seed)
    out_dir = _output_root(out_flag) / f"data-{experiment.config_hash}-s{experiment.seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = generate_synthetic(experiment.data)
    for ds in datasets:
        save_tensor(out_dir / f"domain{ds.domain}_inputs.dmx", Tensor(ds.inputs))
        _write_csv(
            out_dir / f"domain{ds.domain}_labels.csv",
            [{"sample_id": i, "label": int(label)} for i, label in enumerate(ds.labels)],
            columns=["sample_id", "label"],
        )
    _write_json(
        out_dir / "spec.json",
        {**dataclasses.asdict(experiment.data), "target_domain": experiment.target_domain},
    )
    return out_dir


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="damix", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute the configured training stages")
    p_run.add_argument("config", help="experiment TOML file")
    p_run.add_argument("--seed", type=int, default=None, help="override the run seed")
    p_run.add_argument("--stage", choices=("pretrain", "all"), default="all")
    p_run.add_argument("--out", default=None, help="output root (else $DAMIX_OUT, else ./runs)")

    sub.add_parser("verify", help="run the built-in correctness checks")

    p_report = sub.add_parser("report", help="aggregate per-epoch metrics from run manifests")
    p_report.add_argument("manifests", nargs="+", help="manifest.json paths")
    p_report.add_argument("--format", choices=("csv", "json"), default="csv")
    p_report.add_argument("--out", default=None, help="directory for the emitted report")

    p_gen = sub.add_parser("gen-data", help="write the synthetic datasets to disk")
    p_gen.add_argument("config", help="experiment TOML file (only [data] is used)")
    p_gen.add_argument("--seed", type=int, default=None, help="override the data seed")
    p_gen.add_argument("--out", default=None, help="output root (else $DAMIX_OUT, else ./runs)")

    return parser


def _cmd_run(args) -> int:
    manifest = run_experiment(args.config, seed=args.seed, stage=args.stage, out_flag=args.out)
    run_dir = _output_root(args.out) / f"{manifest.config_hash}-s{manifest.seed}"
    print(f"run complete: {run_dir}")
    for stage_name, seconds in manifest.wall_clock.items():
        print(f"  {stage_name}: {seconds:.2f}s")
    summary_rel = manifest.reports.get("summary")
    if summary_rel:
        summary = json.loads((run_dir / summary_rel).read_text(encoding="utf-8"))
        final = summary.get("final", {})
        if final:
            print(f"  final mAP: {final.get('map')}  best mAP: {summary.get('best_map')}")
    print(f"manifest: {run_dir / MANIFEST_NAME}")
    return EXIT_OK


def _cmd_verify(_args) -> int:
    results = run_verification()
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_VERIFY


def _cmd_report(args) -> int:
    path = emit_report(args.manifests, fmt=args.format, out_flag=args.out)
    print(f"report written: {path}")
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    out_dir = generate_data_files(args.config, seed=args.seed, out_flag=args.out)
    files = sorted(p.name for p in out_dir.iterdir())
    print(f"data written: {out_dir} ({len(files)} files)")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "verify": _cmd_verify,
        "report": _cmd_report,
        "gen-data": _cmd_gen_data,
    }
    try:
        return handlers[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ReportError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DamixError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
