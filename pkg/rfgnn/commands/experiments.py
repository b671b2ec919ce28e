"""
Experiment commands behind the CLI.

Every command takes a validated RunConfig, writes its artifacts under an
output directory and returns a CommandResult. Reports are deterministic:
sorted keys, no timestamps, and the thread count is left out of the
config echo, so equal configs and seeds give byte-identical report.json.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from rfgnn.config import (
    CURVE_CSV,
    EMBEDDINGS_CSV,
    NOISE_FRACTIONS,
    REPORT_JSON,
    REPORT_SCHEMA_VERSION,
    REPORT_TXT,
)
from rfgnn.models import MetricsReport, RunConfig, RunRecord, RunStatus, SyntheticParams, TrainConfig, Variant
from rfgnn.services.backbones import BackboneError
from rfgnn.services.checkpoint import CheckpointError, check_compatible, load_ensemble, save_ensemble
from rfgnn.services.ensemble import (
    BranchError,
    EnsembleModel,
    baseline_spec,
    branch_embed,
    branch_outputs,
    branch_predict,
    branch_similarity,
    soft_vote,
    train_baseline,
    train_ensemble,
)
from rfgnn.services.graphstore import (
    GraphError,
    MultiRelationGraph,
    generate_synthetic,
    inject_feature_noise,
    load_dataset,
    write_dataset,
)
from rfgnn.services.metrics import (
    MetricsError,
    aggregate_runs,
    evaluate_predictions,
    format_mean_std,
    render_text_table,
)
from rfgnn.services.numkit import NOISE, NumkitError, derive_seed
from rfgnn.utils.file_manager import OutputDirError, format_float, prepare_output_dir, write_csv, write_json, write_text

logger = logging.getLogger(__name__)

# Errors that fail a single seeded run without aborting the command
RUN_ERRORS = (GraphError, NumkitError, BackboneError, BranchError, MetricsError, CheckpointError)

BASELINE = "baseline"
SWEEP_PARAMETERS = {"alpha": "alpha", "beta": "beta", "gamma": "gamma", "S": "branches"}


class CommandError(Exception):
    """Custom exception for command-level errors"""
    pass


@dataclass
class CommandResult:
    out_dir: Path
    payload: Dict[str, Any]
    failed_seeds: List[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failed_seeds


def _prepare(out, force: bool) -> Path:
    try:
        return prepare_output_dir(out, force=force)
    except OutputDirError as e:
        raise CommandError(str(e)) from e


def load_graph(run_cfg: RunConfig) -> MultiRelationGraph:
    if run_cfg.dataset is not None:
        return load_dataset(run_cfg.dataset)
    return generate_synthetic(run_cfg.synthetic)


def config_echo(run_cfg: RunConfig) -> Dict[str, Any]:
    return run_cfg.model_dump(mode="json", exclude={"threads", "out"})


def _payload(command: str, run_cfg: RunConfig, **sections) -> Dict[str, Any]:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "command": command,
        "config": config_echo(run_cfg),
        **sections,
    }


def _seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return cfg.model_copy(update={"master_seed": seed})


def evaluate_ensemble(
    g: MultiRelationGraph,
    ensemble: EnsembleModel,
    seed: Optional[int] = None,
) -> Tuple[MetricsReport, np.ndarray]:
    """Full-graph soft-vote inference scored on the test mask; returns (report, scores)"""
    outputs = branch_outputs(g, ensemble)
    scores, classes = soft_vote(outputs)
    report = evaluate_predictions(
        classes, g.labels, g.test, g.num_classes,
        branch_outputs=outputs,
        similarity=branch_similarity(ensemble, g, outputs),
        config=ensemble.config.model_dump(mode="json"),
        variant=ensemble.variant.value,
        seed=seed,
    )
    return report, scores


def run_model(
    g: MultiRelationGraph,
    cfg: TrainConfig,
    model: str,
    threads: int = 1,
    eval_graph: Optional[MultiRelationGraph] = None,
) -> Tuple[MetricsReport, Optional[EnsembleModel]]:
    """
    Train `model` ("baseline" or a variant value) on g and score it.

    eval_graph defaults to g.
    """
    eval_graph = g if eval_graph is None else eval_graph
    if model == BASELINE:
        params = train_baseline(g, cfg)
        probs = branch_predict(eval_graph, baseline_spec(eval_graph, cfg), params)
        report = evaluate_predictions(
            np.argmax(probs, axis=1), eval_graph.labels, eval_graph.test, eval_graph.num_classes,
            branch_outputs=[probs],
            config=cfg.model_dump(mode="json"),
            variant=BASELINE,
            seed=cfg.master_seed,
        )
        return report, None

    ensemble = train_ensemble(g, cfg, Variant(model), threads=threads)
    report, _ = evaluate_ensemble(eval_graph, ensemble, seed=cfg.master_seed)
    return report, ensemble


def _run_seeds(
    label: str,
    seeds: Sequence[int],
    run: Callable[[int], MetricsReport],
) -> List[RunRecord]:
    records = []
    for seed in seeds:
        logger.info("Run started: %s seed=%d", label, seed)
        try:
            report = run(seed)
        except RUN_ERRORS as e:
            logger.error("Run failed: %s seed=%d error=%s", label, seed, e)
            records.append(RunRecord(seed=seed, status=RunStatus.FAILED, message=str(e)))
            continue
        logger.info("Run completed: %s seed=%d accuracy=%.4f", label, seed, report.accuracy)
        records.append(RunRecord(seed=seed, status=RunStatus.COMPLETED, report=report))
    return records


def _summarize(records: Sequence[RunRecord]) -> Dict[str, Any]:
    done = [r.report for r in records if r.status == RunStatus.COMPLETED]
    return {
        "runs": [r.model_dump(mode="json") for r in records],
        "aggregate": aggregate_runs(done) if done else None,
        "failed_seeds": [r.seed for r in records if r.status == RunStatus.FAILED],
    }


def _cell(summary: Dict[str, Any], metric: str) -> str:
    agg = summary["aggregate"]
    return format_mean_std(agg[metric]) if agg else "n/a"


def _write_reports(out: Path, payload: Dict[str, Any], table: str) -> None:
    write_json(out / REPORT_JSON, payload)
    write_text(out / REPORT_TXT, table)


# --- commands --------------------------------------------------------------------

def cmd_gen_synth(params: SyntheticParams, out, force: bool = False) -> CommandResult:
    """Generate the contextual SBM benchmark and write it as a dataset directory"""
    out = _prepare(out, force)
    g = generate_synthetic(params)
    manifest = write_dataset(g, out, source=params.model_dump(mode="json"))
    print(
        f"Wrote {manifest.name} to {out}: nodes={manifest.num_nodes} features={manifest.num_features} "
        f"relations={manifest.num_relations} edges={g.num_edges()} classes={manifest.num_classes} "
        f"train/val/test={g.train.size}/{g.val.size}/{g.test.size}"
    )
    return CommandResult(out, manifest.model_dump(mode="json"))


def cmd_train(run_cfg: RunConfig, out, force: bool = False) -> CommandResult:
    """Train the configured ensemble once per seed; save checkpoints and reports"""
    out = _prepare(out, force)
    g = load_graph(run_cfg)

    def run(seed: int) -> MetricsReport:
        cfg = _seeded(run_cfg.train, seed)
        ensemble = train_ensemble(g, cfg, run_cfg.variant, threads=run_cfg.threads)
        save_ensemble(out / "checkpoints" / f"seed_{seed}", ensemble)
        report, _ = evaluate_ensemble(g, ensemble, seed=seed)
        return report

    records = _run_seeds(run_cfg.variant.value, run_cfg.seeds, run)
    summary = _summarize(records)
    payload = _payload("train", run_cfg, variant=run_cfg.variant.value, **summary)

    rows = []
    for r in records:
        if r.report is None:
            rows.append([r.seed, r.status.value, "-", "-", "-", "-"])
        else:
            rows.append([r.seed, r.status.value] + [f"{getattr(r.report, m):.4f}" for m in ("accuracy", "precision", "recall", "f1")])
    rows.append(["mean ± std", "", _cell(summary, "accuracy"), _cell(summary, "precision"),
                 _cell(summary, "recall"), _cell(summary, "f1")])
    table = render_text_table(rows, ["seed", "status", "accuracy", "precision", "recall", "f1"])
    _write_reports(out, payload, table)
    print(table, end="")
    return CommandResult(out, payload, summary["failed_seeds"])


def cmd_evaluate(checkpoint, run_cfg: RunConfig, out, force: bool = False) -> CommandResult:
    """Score a saved ensemble on a dataset's test mask"""
    ensemble = load_ensemble(checkpoint)
    g = load_graph(run_cfg)
    check_compatible(ensemble, g)
    out = _prepare(out, force)

    report, _ = evaluate_ensemble(g, ensemble, seed=ensemble.config.master_seed)
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "command": "evaluate",
        "report": report.model_dump(mode="json"),
    }
    table = render_text_table(
        [[m, f"{getattr(report, m):.4f}"] for m in ("accuracy", "precision", "recall", "f1")],
        ["metric", "value"],
    )
    _write_reports(out, payload, table)
    print(table, end="")
    return CommandResult(out, payload)


def cmd_ablate(run_cfg: RunConfig, out, force: bool = False) -> CommandResult:
    """Baseline backbone against the E, ES and FULL variants under one seed set"""
    out = _prepare(out, force)
    g = load_graph(run_cfg)

    models = {}
    failed = set()
    for model in (BASELINE, Variant.E.value, Variant.ES.value, Variant.FULL.value):
        records = _run_seeds(
            model, run_cfg.seeds,
            lambda seed, model=model: run_model(g, _seeded(run_cfg.train, seed), model, run_cfg.threads)[0],
        )
        models[model] = _summarize(records)
        failed.update(models[model]["failed_seeds"])

    payload = _payload("ablate", run_cfg, models=models)
    table = render_text_table(
        [[name, _cell(s, "accuracy"), _cell(s, "f1")] for name, s in models.items()],
        ["model", "accuracy", "f1"],
    )
    _write_reports(out, payload, table)
    print(table, end="")
    return CommandResult(out, payload, sorted(failed))


def _sweep_config(train: TrainConfig, parameter: str, value: float) -> TrainConfig:
    if parameter not in SWEEP_PARAMETERS:
        raise CommandError(f"cannot sweep '{parameter}'; choose one of {sorted(SWEEP_PARAMETERS)}")
    name = SWEEP_PARAMETERS[parameter]
    if name == "branches":
        if float(value) != int(value):
            raise CommandError(f"S must be an integer, got {value}")
        value = int(value)
    try:
        return TrainConfig.model_validate({**train.model_dump(), name: value})
    except ValidationError as e:
        raise CommandError(f"invalid {parameter}={value}: {e}") from e


def cmd_sweep(
    run_cfg: RunConfig,
    parameter: str,
    values: Sequence[float],
    out,
    force: bool = False,
) -> CommandResult:
    """
    One aggregated accuracy point per swept value.

    Point p of run seed s trains with derive_seed(s, p), so every point draws
    from its own streams. Writes curve.csv with columns
    parameter,value,accuracy_mean,accuracy_std,f1_mean,f1_std,n.
    """
    if not values:
        raise CommandError("sweep needs at least one value")
    configs = [_sweep_config(run_cfg.train, parameter, v) for v in values]
    out = _prepare(out, force)
    g = load_graph(run_cfg)

    points = []
    failed = set()
    curve_rows = []
    for p, (value, cfg) in enumerate(zip(values, configs)):
        records = _run_seeds(
            f"{parameter}={value}",
            [derive_seed(seed, p) for seed in run_cfg.seeds],
            lambda seed, cfg=cfg: run_model(g, _seeded(cfg, seed), run_cfg.variant.value, run_cfg.threads)[0],
        )
        summary = _summarize(records)
        failed.update(summary["failed_seeds"])
        points.append({"parameter": parameter, "value": value, **summary})

        agg = summary["aggregate"]
        if agg:
            curve_rows.append([
                parameter, value,
                format_float(agg["accuracy"]["mean"]), format_float(agg["accuracy"]["std"]),
                format_float(agg["f1"]["mean"]), format_float(agg["f1"]["std"]),
                agg["accuracy"]["n"],
            ])
        else:
            curve_rows.append([parameter, value, "", "", "", "", 0])

    payload = _payload("sweep", run_cfg, parameter=parameter, values=list(values), points=points)
    write_csv(
        out / CURVE_CSV,
        ["parameter", "value", "accuracy_mean", "accuracy_std", "f1_mean", "f1_std", "n"],
        curve_rows,
    )
    table = render_text_table(
        [[f"{parameter}={pt['value']}", _cell(pt, "accuracy"), _cell(pt, "f1")] for pt in points],
        ["point", "accuracy", "f1"],
    )
    _write_reports(out, payload, table)
    print(table, end="")
    return CommandResult(out, payload, sorted(failed))


def cmd_noise(
    run_cfg: RunConfig,
    out,
    fractions: Optional[Sequence[float]] = None,
    force: bool = False,
) -> CommandResult:
    """
    Accuracy of the configured variant and the baseline under feature noise.

    Fraction f_i of run seed s trains with s (so a 0.0 row reproduces
    `train`) and noises with derive_seed(s, NOISE, i). A clean row (0.0) is
    always evaluated first; each model's drop is clean mean minus noisy mean.
    """
    fractions = list(NOISE_FRACTIONS if fractions is None else fractions)
    if not fractions:
        raise CommandError("noise needs at least one fraction")
    if any(not 0.0 <= f <= 1.0 for f in fractions):
        raise CommandError(f"noise fractions must lie in [0, 1], got {fractions}")
    if 0.0 not in fractions:
        fractions = [0.0] + fractions
    out = _prepare(out, force)
    g = load_graph(run_cfg)
    model_names = [run_cfg.variant.value, BASELINE]

    def run(model: str, fi: int, fraction: float, seed: int) -> MetricsReport:
        noisy = inject_feature_noise(g, fraction, derive_seed(seed, NOISE, fi))
        return run_model(noisy, _seeded(run_cfg.train, seed), model, run_cfg.threads)[0]

    rows = []
    failed = set()
    for fi, fraction in enumerate(fractions):
        row = {"fraction": fraction, "models": {}}
        for model in model_names:
            records = _run_seeds(
                f"{model} noise={fraction}", run_cfg.seeds,
                lambda seed, model=model, fi=fi, fraction=fraction: run(model, fi, fraction, seed),
            )
            summary = _summarize(records)
            failed.update(summary["failed_seeds"])
            row["models"][model] = summary
        rows.append(row)

    clean = next(r for r in rows if r["fraction"] == 0.0)
    for row in rows:
        for model in model_names:
            base, now = clean["models"][model]["aggregate"], row["models"][model]["aggregate"]
            drop = base["accuracy"]["mean"] - now["accuracy"]["mean"] if base and now else None
            row["models"][model]["accuracy_drop"] = drop

    payload = _payload("noise", run_cfg, fractions=fractions, rows=rows)
    table_rows = []
    for row in rows:
        cells = [f"{row['fraction']:.2f}"]
        for model in model_names:
            s = row["models"][model]
            drop = s["accuracy_drop"]
            cells += [_cell(s, "accuracy"), "n/a" if drop is None else f"{drop * 100:.2f}"]
        table_rows.append(cells)
    columns = ["fraction"]
    for model in model_names:
        columns += [f"{model} accuracy", f"{model} drop"]
    table = render_text_table(table_rows, columns)
    _write_reports(out, payload, table)
    print(table, end="")
    return CommandResult(out, payload, sorted(failed))


def cmd_export_embeddings(
    checkpoint,
    run_cfg: RunConfig,
    out,
    include_embeddings: bool = False,
    force: bool = False,
) -> CommandResult:
    """
    Per-node ensemble scores, optionally with every branch's aligned embedding.

    embeddings.csv header: node,label,score_0..score_{C-1} and, with
    include_embeddings, b{i}_z{j} for branch i and embedding column j.
    Unlabeled nodes carry label -1.
    """
    ensemble = load_ensemble(checkpoint)
    g = load_graph(run_cfg)
    check_compatible(ensemble, g)
    out = _prepare(out, force)

    _, scores = evaluate_ensemble(g, ensemble)
    header = ["node", "label"] + [f"score_{c}" for c in range(g.num_classes)]
    blocks = [scores]
    if include_embeddings:
        for spec, model in ensemble.branches:
            z = branch_embed(g, spec, model)
            header += [f"b{spec.index}_z{j}" for j in range(z.shape[1])]
            blocks.append(z)
    table = np.concatenate(blocks, axis=1)

    rows = (
        [node, int(g.labels[node])] + [format_float(v) for v in table[node]]
        for node in range(g.n)
    )
    path = write_csv(out / EMBEDDINGS_CSV, header, rows)
    logger.info("Exported embeddings: path=%s rows=%d columns=%d", path, g.n, len(header))
    return CommandResult(out, {"path": str(path), "rows": g.n, "columns": header})
