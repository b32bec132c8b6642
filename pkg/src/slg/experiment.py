"""Hyperparameter sweep planning and experiment execution.

A sweep is staged: each stage varies exactly one tunable (learning rate,
adapter rank, gradient accumulation, adapter alpha) and freezes its winner
before the next stage starts, so stage k's rows carry the values selected
by stages 1..k-1 and differ only in the tuned knob. Plans compile to
per-run manifest files that fully describe a run: the config, the dataset
paths, and the backend mode. Manifests are the handoff point to an
external trainer; this package consumes them directly only in deterministic
mode, where memorization experts and the lexical router stand in for
fine-tuned models.

Runs are recorded once: re-executing an existing run id is refused unless
forced, and records are written atomically so a crash never leaves a
half-written result behind.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from hashlib import sha256
from pathlib import Path

from .backends import LexicalRouter, MemorizationExpert, RemoteClient
from .dataset import Dataset, load_dataset
from .errors import ManifestError, RunError, RunExistsError, SlgError
from .evaluation import MetricReport, evaluate_run
from .graph import Graph, Resolution, build_graph

SCHEMA_VERSION = 1
TUNABLE_FIELDS = ("learning_rate", "lora_rank", "gradient_accumulation", "lora_alpha")
SINGLE_MODEL_EXPERT = "SINGLE-MODEL"


@dataclass(frozen=True)
class FixedHyperparameters:
    """Training settings held constant across every sweep row."""

    lora_dropout: float = 0.05
    optimizer: str = "adamw"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.001
    label_smoothing: float = 0.01
    lr_schedule: str = "linear"
    warmup_ratio: float = 0.03
    max_grad_norm: float = 0.5
    per_device_batch_size: int = 2
    num_epochs: int = 25
    early_stopping_patience: int = 3
    save_total_limit: int = 4
    load_best_model_at_end: bool = True
    half_precision: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    learning_rate: float
    lora_rank: int
    gradient_accumulation: int
    lora_alpha: int
    fixed: FixedHyperparameters = field(default_factory=FixedHyperparameters)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("lora_rank", "gradient_accumulation", "lora_alpha"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "lora_rank": self.lora_rank,
            "gradient_accumulation": self.gradient_accumulation,
            "lora_alpha": self.lora_alpha,
            "fixed": asdict(self.fixed),
        }

    def config_hash(self) -> str:
        return sha256(json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()[:8]


# the starting point the first stage varies around: rank 4, accumulation 2,
# alpha 8 (the learning rate is replaced by stage 1 before any run happens)
DEFAULT_BASELINE = ExperimentConfig(
    learning_rate=1e-3, lora_rank=4, gradient_accumulation=2, lora_alpha=8
)


@dataclass(frozen=True)
class SweepStage:
    tuned_field: str
    candidates: tuple

    def __post_init__(self):
        if self.tuned_field not in TUNABLE_FIELDS:
            raise ValueError(f"tuned_field must be one of {TUNABLE_FIELDS}")
        if not self.candidates:
            raise ValueError("a stage needs at least one candidate")


@dataclass(frozen=True)
class SweepPlan:
    baseline: ExperimentConfig
    stages: tuple[SweepStage, ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a plan needs at least one stage")


def default_sweep() -> SweepPlan:
    """The standard 13-row plan: 3 learning rates, then 3 ranks, then 3
    accumulation settings, then 4 alphas, each stage freezing its winner."""
    return SweepPlan(
        baseline=DEFAULT_BASELINE,
        stages=(
            SweepStage("learning_rate", (1e-5, 1e-4, 1e-3)),
            SweepStage("lora_rank", (8, 16, 32)),
            SweepStage("gradient_accumulation", (2, 4, 8)),
            SweepStage("lora_alpha", (8, 16, 32, 64)),
        ),
    )


def carried_config(plan: SweepPlan, stage_index: int, selected_values) -> ExperimentConfig:
    """The baseline with every earlier stage's selected value applied."""
    if len(selected_values) < stage_index:
        raise ValueError(
            f"stage {stage_index} needs {stage_index} selected values, "
            f"got {len(selected_values)}"
        )
    config = plan.baseline
    for stage, value in zip(plan.stages[:stage_index], selected_values):
        config = replace(config, **{stage.tuned_field: value})
    return config


def enumerate_configs(
    plan: SweepPlan, selected_values=None
) -> list[tuple[int, int, ExperimentConfig]]:
    """Expand a plan into (stage_index, candidate_index, config) rows.

    ``selected_values`` holds each stage's winning value; stage k's rows
    then carry the winners of stages 0..k-1. Without it (planning ahead of
    any results) every stage carries the baseline's values instead.
    """
    rows = []
    for stage_index, stage in enumerate(plan.stages):
        if selected_values is None:
            carried = plan.baseline
        else:
            carried = carried_config(plan, stage_index, selected_values)
        for candidate_index, value in enumerate(stage.candidates):
            config = replace(carried, **{stage.tuned_field: value})
            rows.append((stage_index, candidate_index, config))
    return rows


def load_plan(path: str | Path) -> SweepPlan:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"sweep plan {path} is not valid JSON: {exc.msg}")
    try:
        baseline = ExperimentConfig(
            **{name: payload["baseline"][name] for name in TUNABLE_FIELDS}
        )
        stages = tuple(
            SweepStage(stage["tuned_field"], tuple(stage["candidates"]))
            for stage in payload["stages"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"sweep plan {path} is malformed: {exc}")
    return SweepPlan(baseline=baseline, stages=stages)


def run_id_for(system: str, stage_index: int, candidate_index: int, config: ExperimentConfig) -> str:
    return f"{system}-s{stage_index}c{candidate_index}-{config.config_hash()}"


def _discover_datasets(datasets_dir: str | Path) -> tuple[dict[str, str], str]:
    base = Path(datasets_dir)
    experts_dir = base / "experts"
    if not experts_dir.is_dir():
        raise ManifestError(f"no experts/ directory under {base}")
    experts = {p.stem: str(p) for p in sorted(experts_dir.glob("*.jsonl"))}
    if not experts:
        raise ManifestError(f"no expert datasets under {experts_dir}")
    orchestrator = base / "orchestrator.jsonl"
    if not orchestrator.is_file():
        raise ManifestError(f"missing orchestrator dataset {orchestrator}")
    return experts, str(orchestrator)


def _write_manifest(
    plan: SweepPlan,
    row: tuple[int, int, ExperimentConfig],
    *,
    experts: dict[str, str],
    orchestrator: str,
    out_dir: str | Path,
    system: str,
    mode: str,
    base_url: str | None,
    selection_metric: str,
    seed: int,
) -> dict:
    stage_index, candidate_index, config = row
    stage = plan.stages[stage_index]
    run_id = run_id_for(system, stage_index, candidate_index, config)
    backends: dict = {"mode": mode}
    if mode == "remote":
        backends["base_url"] = base_url
        backends["models"] = {name: name for name in experts}
        backends["orchestrator_model"] = "orchestrator"
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "run_id": run_id,
        "system": system,
        "stage": {
            "index": stage_index,
            "tuned_field": stage.tuned_field,
            "candidate_index": candidate_index,
            "candidate_value": stage.candidates[candidate_index],
        },
        "config": config.to_dict(),
        "datasets": {"experts": experts, "orchestrator": orchestrator},
        "backends": backends,
        "trainer": {
            "output_dir": f"runs/{run_id}",
            "selection_split": "validation",
        },
        "selection_metric": selection_metric,
        "seed": seed,
    }
    _atomic_write_text(
        Path(out_dir) / "manifests" / f"{run_id}.json",
        json.dumps(manifest, indent=2, ensure_ascii=False) + "\n",
    )
    return manifest


def plan_to_manifests(
    plan: SweepPlan,
    *,
    datasets_dir: str | Path,
    out_dir: str | Path,
    system: str = "slg",
    mode: str = "deterministic",
    base_url: str | None = None,
    selection_metric: str = "exact_match",
    seed: int = 0,
    selected_values=None,
) -> list[dict]:
    """Write one manifest per sweep row under ``out_dir/manifests``.

    Manifests carry everything a trainer or evaluator needs; paths inside
    ``out_dir`` are stored relative to it so the same plan produces the same
    bytes regardless of where the output tree lives. Without
    ``selected_values`` the later stages carry the baseline's values (stage
    winners cannot be known before their runs exist); ``run_sweep`` writes
    the carried manifests itself as each stage resolves.
    """
    if mode not in ("deterministic", "remote"):
        raise ManifestError(f"unknown backend mode {mode!r}")
    experts, orchestrator = _discover_datasets(datasets_dir)
    return [
        _write_manifest(
            plan,
            row,
            experts=experts,
            orchestrator=orchestrator,
            out_dir=out_dir,
            system=system,
            mode=mode,
            base_url=base_url,
            selection_metric=selection_metric,
            seed=seed,
        )
        for row in enumerate_configs(plan, selected_values)
    ]


def load_manifest(path: str | Path) -> dict:
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc.msg}")
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(
            f"manifest {path} has schema_version {manifest.get('schema_version')!r}, "
            f"expected {SCHEMA_VERSION}"
        )
    for key in ("run_id", "config", "datasets", "backends"):
        if key not in manifest:
            raise ManifestError(f"manifest {path} lacks required key {key!r}")
    missing = [name for name in TUNABLE_FIELDS if name not in manifest["config"]]
    if missing:
        raise ManifestError(f"manifest {path} config lacks {missing}")
    return manifest


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    status: str
    config: dict
    validation: dict | None
    test: dict | None
    selection_metric: str
    selection_value: float | None
    wall_time_seconds: float
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "status": self.status,
            "config": self.config,
            "metrics": {"validation": self.validation, "test": self.test},
            "selection_metric": self.selection_metric,
            "selection_value": self.selection_value,
            "wall_time_seconds": self.wall_time_seconds,
            "error": self.error,
        }


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _build_deterministic_graph(manifest: dict) -> tuple[Graph, list, list]:
    datasets: dict[str, Dataset] = {}
    for name, path in manifest["datasets"]["experts"].items():
        datasets[name] = load_dataset(path, name=name, kind="expert")
    system = manifest.get("system", "slg")
    validation_pairs = [p for ds in datasets.values() for p in ds.subset("validation")]
    test_pairs = [p for ds in datasets.values() for p in ds.subset("test")]
    if system == "single-model":
        # reference point: every pair memorized by one backend, no routing
        all_pairs = [p for ds in datasets.values() for p in ds.pairs]
        union = MemorizationExpert(SINGLE_MODEL_EXPERT, all_pairs, splits=("train",))
        router = LexicalRouter(
            {SINGLE_MODEL_EXPERT: [p.question for p in all_pairs if p.split == "train"]}
        )
        graph = build_graph(router, {SINGLE_MODEL_EXPERT: union})
    else:
        experts = {
            name: MemorizationExpert(name, ds.pairs, splits=("train",))
            for name, ds in datasets.items()
        }
        profiles = {
            name: [p.question for p in ds.subset("train")] for name, ds in datasets.items()
        }
        graph = build_graph(LexicalRouter(profiles), experts)
    return graph, validation_pairs, test_pairs


def _build_remote_graph(manifest: dict) -> tuple[Graph, list, list]:
    backends = manifest["backends"]
    base_url = backends.get("base_url")
    if not base_url:
        raise ManifestError(f"manifest {manifest['run_id']} has remote mode but no base_url")
    datasets = {
        name: load_dataset(path, name=name, kind="expert")
        for name, path in manifest["datasets"]["experts"].items()
    }
    validation_pairs = [p for ds in datasets.values() for p in ds.subset("validation")]
    test_pairs = [p for ds in datasets.values() for p in ds.subset("test")]
    models = backends.get("models") or {name: name for name in datasets}
    experts = {name: RemoteClient(base_url, model) for name, model in models.items()}
    orchestrator = RemoteClient(base_url, backends.get("orchestrator_model", "orchestrator"))
    graph = build_graph(orchestrator, experts, Resolution(mode="fuzzy", max_edit_distance=2))
    return graph, validation_pairs, test_pairs


def _read_wall_time(manifest: dict) -> float:
    report_path = manifest.get("trainer", {}).get("report")
    if not report_path:
        return 0.0
    try:
        report = json.loads(Path(report_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return 0.0
    return float(report.get("training_seconds", 0.0))


def run_experiment(
    manifest: dict, *, out_dir: str | Path, force: bool = False
) -> tuple[RunRecord, MetricReport | None]:
    """Execute one manifest and persist its record.

    Deterministic mode evaluates immediately. Remote mode needs a base_url
    (a serving endpoint for the trained adapters); without one the run is
    recorded as pending so a later pass can pick it up. Returns the record
    and, when evaluation ran, the full test report.
    """
    run_id = manifest["run_id"]
    run_dir = Path(out_dir) / "runs" / run_id
    record_path = run_dir / "record.json"
    if record_path.exists() and not force:
        raise RunExistsError(run_id)
    selection_metric = manifest.get("selection_metric", "exact_match")
    mode = manifest["backends"].get("mode", "deterministic")
    seed = manifest.get("seed", 0)

    if mode == "remote" and not manifest["backends"].get("base_url"):
        record = RunRecord(
            run_id=run_id,
            status="pending",
            config=manifest["config"],
            validation=None,
            test=None,
            selection_metric=selection_metric,
            selection_value=None,
            wall_time_seconds=0.0,
            error=None,
        )
        _atomic_write_text(
            run_dir / "status.json",
            json.dumps(
                {"run_id": run_id, "status": "pending", "reason": "awaiting trained adapters"},
                indent=2,
            )
            + "\n",
        )
        return record, None

    try:
        if mode == "deterministic":
            graph, validation_pairs, test_pairs = _build_deterministic_graph(manifest)
        elif mode == "remote":
            graph, validation_pairs, test_pairs = _build_remote_graph(manifest)
        else:
            raise ManifestError(f"unknown backend mode {mode!r}")
        with_truth = manifest.get("system", "slg") != "single-model"
        validation_report = evaluate_run(
            graph,
            validation_pairs,
            seed=seed,
            with_routing_truth=with_truth,
            expected_split="validation",
        )
        test_report = evaluate_run(
            graph, test_pairs, seed=seed, with_routing_truth=with_truth, expected_split="test"
        )
    except (SlgError, ValueError, OSError) as exc:
        record = RunRecord(
            run_id=run_id,
            status="failed",
            config=manifest["config"],
            validation=None,
            test=None,
            selection_metric=selection_metric,
            selection_value=None,
            wall_time_seconds=0.0,
            error=str(exc),
        )
        _atomic_write_text(
            record_path, json.dumps(record.to_dict(), indent=2, ensure_ascii=False) + "\n"
        )
        raise RunError(f"run {run_id} failed: {exc}") from exc

    validation_aggregate = validation_report.to_dict()["aggregate"]
    selection_value = validation_aggregate.get(selection_metric)
    if selection_value is None:
        raise ManifestError(f"selection metric {selection_metric!r} is not reported")
    record = RunRecord(
        run_id=run_id,
        status="complete",
        config=manifest["config"],
        validation=validation_aggregate,
        test=test_report.to_dict()["aggregate"],
        selection_metric=selection_metric,
        selection_value=selection_value,
        wall_time_seconds=_read_wall_time(manifest),
        error=None,
    )
    _atomic_write_text(
        record_path, json.dumps(record.to_dict(), indent=2, ensure_ascii=False) + "\n"
    )
    _atomic_write_text(run_dir / "report.json", test_report.to_json() + "\n")
    return record, test_report


@dataclass(frozen=True)
class StageSelection:
    stage_index: int
    tuned_field: str
    selected_run_id: str
    selected_value: object
    metric: str
    metric_value: float


@dataclass(frozen=True)
class SweepResult:
    records: tuple[RunRecord, ...]
    selections: tuple[StageSelection, ...]
    summary_csv: str


def run_sweep(
    plan: SweepPlan,
    *,
    datasets_dir: str | Path,
    out_dir: str | Path,
    system: str = "slg",
    mode: str = "deterministic",
    base_url: str | None = None,
    selection_metric: str = "exact_match",
    seed: int = 0,
    force: bool = False,
) -> SweepResult:
    """Plan, execute, and summarize a sweep, one stage at a time.

    Stage k's rows carry the winners of stages 1..k-1 and differ only in
    the tuned knob; each stage's manifests are written as the stage starts,
    so the manifest directory ends up describing exactly the runs that
    happened. Per stage, the completed run with the best selection metric
    (validation split) wins; ties break toward the earliest candidate. When
    a stage completes no runs (remote mode without a serving endpoint), the
    remaining stages carry the baseline's value for that knob and the runs
    stay pending for a later pass.
    """
    if mode not in ("deterministic", "remote"):
        raise ManifestError(f"unknown backend mode {mode!r}")
    experts, orchestrator = _discover_datasets(datasets_dir)
    records = []
    executed_rows = []
    selections = []
    selected_values: list = []
    for stage_index, stage in enumerate(plan.stages):
        carried = carried_config(plan, stage_index, selected_values)
        best: tuple[float, int] | None = None
        best_selection: StageSelection | None = None
        for candidate_index, value in enumerate(stage.candidates):
            row = (
                stage_index,
                candidate_index,
                replace(carried, **{stage.tuned_field: value}),
            )
            manifest = _write_manifest(
                plan,
                row,
                experts=experts,
                orchestrator=orchestrator,
                out_dir=out_dir,
                system=system,
                mode=mode,
                base_url=base_url,
                selection_metric=selection_metric,
                seed=seed,
            )
            record, _ = run_experiment(manifest, out_dir=out_dir, force=force)
            records.append(record)
            executed_rows.append(row)
            if record.status != "complete" or record.selection_value is None:
                continue
            key = (-record.selection_value, candidate_index)
            if best is None or key < best:
                best = key
                best_selection = StageSelection(
                    stage_index=stage_index,
                    tuned_field=stage.tuned_field,
                    selected_run_id=record.run_id,
                    selected_value=value,
                    metric=selection_metric,
                    metric_value=record.selection_value,
                )
        if best_selection is not None:
            selections.append(best_selection)
            selected_values.append(best_selection.selected_value)
        else:
            selected_values.append(getattr(plan.baseline, stage.tuned_field))

    header = (
        "run_id,stage_index,tuned_field,tuned_value,status,"
        "rouge_l_f1,exact_match,meteor,wall_time_seconds"
    )
    lines = [header]
    for (stage_index, candidate_index, _config), record in zip(executed_rows, records):
        stage = plan.stages[stage_index]
        value = stage.candidates[candidate_index]
        if record.test is not None:
            metrics = (
                f"{record.test['rouge_l_f1']:.6f},{record.test['exact_match']:.6f},"
                f"{record.test['meteor']:.6f},{record.wall_time_seconds:.6f}"
            )
        else:
            metrics = ",,,"
        lines.append(
            f"{record.run_id},{stage_index},{stage.tuned_field},{value},{record.status},{metrics}"
        )
    summary_csv = "\n".join(lines) + "\n"
    _atomic_write_text(Path(out_dir) / "sweep_summary.csv", summary_csv)
    selections_payload = [
        {
            "stage_index": s.stage_index,
            "tuned_field": s.tuned_field,
            "selected_run_id": s.selected_run_id,
            "selected_value": s.selected_value,
            "metric": s.metric,
            "metric_value": s.metric_value,
        }
        for s in selections
    ]
    _atomic_write_text(
        Path(out_dir) / "selections.json",
        json.dumps(selections_payload, indent=2, ensure_ascii=False) + "\n",
    )
    return SweepResult(
        records=tuple(records), selections=tuple(selections), summary_csv=summary_csv
    )
