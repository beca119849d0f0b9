# few-shot class-incremental protocol as a langgraph workflow
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, TypedDict

import numpy as np
from langgraph.graph import END, StateGraph

from ept.autodiff_train import StageData, StageTrainReport, train_stage
from ept.config import METRICS, AblationConfig, CliConfig, ProtocolSpec
from ept.embedding_store import EmbeddingDataset, StagePlan, split_protocol
from ept.errors import ValidationError
from ept.nep_classifier import NepModel, argmin_lowest_id, metric_scores
from ept.prototype_core import CalibrationPool, freeze_stage, open_task, save_pool

MODULE = "protocol_runner"


@dataclass
class StageMetrics:
    stage: int
    accuracy: float
    per_class: Dict[int, float]
    num_test_samples: int
    correct: int
    params_trainable: int = 0

    def to_dict(self):
        return {
            "stage": self.stage,
            "accuracy": self.accuracy,
            "per_class": {str(c): acc for c, acc in self.per_class.items()},
            "num_test_samples": self.num_test_samples,
            "params_trainable": self.params_trainable,
        }


@dataclass
class RunReport:
    stages: List[StageMetrics]
    params_trainable: int
    config: dict
    seed: int
    ablation: dict
    loss_traces: List[List[float]]
    audit_violations: int = 0

    @property
    def average(self) -> float:
        return float(np.mean([m.accuracy for m in self.stages]))

    @property
    def last(self) -> float:
        return self.stages[-1].accuracy

    def to_dict(self):
        return {
            "stages": [m.to_dict() for m in self.stages],
            "average": self.average,
            "params_trainable": self.params_trainable,
            "config": self.config,
            "seed": self.seed,
            "ablation": self.ablation,
            "loss_traces": self.loss_traces,
            "audit_violations": self.audit_violations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


class SupportAudit:
    """Records every dataset row read while training, keyed by the stage doing the reading."""

    def __init__(self):
        self.reads = []

    def record(self, stage, rows):
        self.reads.append((stage, np.array(rows, copy=True)))

    def violations(self, plan: StagePlan):
        found = []
        for stage, rows in self.reads:
            allowed = plan[stage].support_indices
            found.extend((stage, int(r)) for r in rows[~np.isin(rows, allowed)])
        return found


def _predict(model: NepModel, features, metric):
    if metric == "nep":
        return model.predict(features)
    scores = metric_scores(model.K, features, metric)
    return np.array([model.class_ids[argmin_lowest_id(row, model.class_ids)] for row in scores])


def evaluate_stage(pool: CalibrationPool, model: NepModel, test_set, metric="nep", threads=1, stage=0) -> StageMetrics:
    """Top-1 accuracy of `model` (NEP or a plain distance metric) over a test set."""
    features, labels = test_set
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValidationError("empty test set", MODULE)
    if metric not in METRICS:
        raise ValidationError(f"unknown metric '{metric}'", MODULE)
    unknown = sorted(set(labels.tolist()) - (set(model.class_ids) & set(pool.class_ids)))
    if unknown:
        raise ValidationError(f"test labels not known to the model: {unknown}", MODULE)

    features = np.asarray(features, dtype=model.K.dtype)
    chunks = [c for c in np.array_split(np.arange(len(labels)), threads) if len(c)]
    with ThreadPoolExecutor(max_workers=threads) as pool_executor:
        parts = list(pool_executor.map(lambda rows: _predict(model, features[rows], metric), chunks))
    predictions = np.concatenate(parts)

    hits = predictions == labels
    per_class = {}
    for class_id in np.unique(labels):
        mask = labels == class_id
        per_class[int(class_id)] = float(hits[mask].sum() / mask.sum())
    correct = int(hits.sum())
    return StageMetrics(stage=stage, accuracy=correct / len(labels), per_class=per_class,
                        num_test_samples=len(labels), correct=correct)


# 1. Define State Schema
class ProtocolState(TypedDict):
    stage: int
    plan: StagePlan
    pool: CalibrationPool
    metrics: List[StageMetrics]
    train_reports: List[StageTrainReport]


def build_protocol_graph(dataset: EmbeddingDataset, config: CliConfig, audit: SupportAudit):
    # 2. Initialize settings
    ablation = config.ablation
    train_config = config.train
    if not ablation.nep:
        train_config = replace(train_config, train_logits="distance")
    seed = config.seed

    def say(message):
        if config.verbose:
            print(message, file=sys.stderr, flush=True)

    # 3. Define Nodes
    def split_protocol_node(state: ProtocolState):
        say("Splitting protocol...")
        plan = split_protocol(dataset, config.protocol, seed)
        pool = CalibrationPool.from_config(config.pool, ablation, dataset.dim, train_config.dtype)
        return {"plan": plan, "pool": pool, "stage": 0, "metrics": [], "train_reports": []}

    def stage_data(state):
        stage = state["stage"]
        rows = state["plan"][stage].support_indices
        return StageData(stage, dataset.features, dataset.labels, rows, on_read=audit.record)

    def open_stage_node(state: ProtocolState):
        stage = state["stage"]
        classes = state["plan"][stage].class_ids
        say(f"Opening stage {stage} with {len(classes)} classes...")
        support = stage_data(state).support()
        rng = np.random.default_rng([seed, stage, 0])
        open_task(state["pool"], classes, support.features, support.labels, rng,
                  support_indices=state["plan"][stage].support_indices)
        return {"pool": state["pool"]}

    def train_stage_node(state: ProtocolState):
        stage, pool = state["stage"], state["pool"]
        if stage > 0 and not ablation.incremental_training:
            say(f"Stage {stage}: incremental training disabled, freezing initial prototypes")
            freeze_stage(pool, stage)
            report = StageTrainReport(stage=stage, epochs=0, params_trainable=pool.count_parameters(stage))
        else:
            say(f"Training stage {stage}...")
            report = train_stage(stage_data(state), pool, train_config, config.nep)
            if report.loss_trace:
                say(f"Stage {stage} loss: {report.loss_trace[0]:.6f} -> {report.loss_trace[-1]:.6f}")
        if config.output.checkpoint_dir:
            directory = Path(config.output.checkpoint_dir)
            directory.mkdir(parents=True, exist_ok=True)
            save_pool(pool, directory / f"pool_stage{stage:02d}.eptp")
        return {"pool": pool, "train_reports": state["train_reports"] + [report]}

    def evaluate_stage_node(state: ProtocolState):
        stage, pool, plan = state["stage"], state["pool"], state["plan"]
        model = NepModel.from_pool(pool, config.nep)
        rows = plan[stage].test_indices
        metrics = evaluate_stage(pool, model, (dataset.features[rows], dataset.labels[rows]),
                                 metric=ablation.classifier, threads=config.threads, stage=stage)
        metrics.params_trainable = pool.count_parameters(stage)
        say(f"Stage {stage} accuracy: {metrics.accuracy:.4f} on {metrics.num_test_samples} samples")
        return {"metrics": state["metrics"] + [metrics], "stage": stage + 1}

    def next_stage(state: ProtocolState):
        return "open_stage" if state["stage"] < len(state["plan"]) else END

    # 4. Build Workflow
    workflow = StateGraph(ProtocolState)

    workflow.add_node("split_protocol", split_protocol_node)
    workflow.add_node("open_stage", open_stage_node)
    workflow.add_node("train_stage", train_stage_node)
    workflow.add_node("evaluate_stage", evaluate_stage_node)

    workflow.set_entry_point("split_protocol")
    workflow.add_edge("split_protocol", "open_stage")
    workflow.add_edge("open_stage", "train_stage")
    workflow.add_edge("train_stage", "evaluate_stage")
    workflow.add_conditional_edges("evaluate_stage", next_stage, {"open_stage": "open_stage", END: END})

    return workflow.compile()


def ablation_summary(ablation: AblationConfig) -> dict:
    return {
        "nep": ablation.nep,
        "cs_offset": ablation.cs_offset,
        "ta_offset": ablation.ta_offset,
        "incremental_training": ablation.incremental_training,
        "classifier": ablation.classifier,
    }


# 5. Execution
def run_protocol(dataset: EmbeddingDataset, proto: ProtocolSpec, config: CliConfig,
                 ablation: Optional[AblationConfig] = None, audit: Optional[SupportAudit] = None) -> RunReport:
    config = replace(config, protocol=proto, ablation=ablation or config.ablation).validate()
    audit = audit if audit is not None else SupportAudit()
    app = build_protocol_graph(dataset, config, audit)
    result = app.invoke({"stage": 0}, config={"recursion_limit": 3 * (proto.stages + 1) + 10})

    return RunReport(
        stages=result["metrics"],
        params_trainable=result["pool"].count_parameters(),
        config=config.to_dict(),
        seed=config.seed,
        ablation=ablation_summary(config.ablation),
        loss_traces=[r.loss_trace for r in result["train_reports"]],
        audit_violations=len(audit.violations(result["plan"])),
    )


def format_stage_grid(report: RunReport) -> str:
    """Accuracy per stage in percent, one column per stage plus the average."""
    header = [f"S{m.stage}" for m in report.stages] + ["Avg"]
    values = [f"{100 * m.accuracy:.2f}" for m in report.stages] + [f"{100 * report.average:.2f}"]
    widths = [max(len(h), len(v)) for h, v in zip(header, values)]
    return "\n".join(
        "  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in (header, values)
    )


@dataclass
class ComparisonReport:
    rows: List[dict] = field(default_factory=list)

    CSV_HEADER = "metric,offsets,last_acc,avg_acc,params"

    def deltas(self) -> Dict[str, float]:
        """Average-accuracy gain of calibrated over raw prototypes, per metric."""
        by_cell = {(r["metric"], r["offsets"]): r for r in self.rows}
        return {
            metric: by_cell[(metric, "on")]["avg_acc"] - by_cell[(metric, "off")]["avg_acc"]
            for metric in METRICS
            if (metric, "on") in by_cell and (metric, "off") in by_cell
        }

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(f"{r['metric']},{r['offsets']},{r['last_acc']:.6f},{r['avg_acc']:.6f},{r['params']}")
        return "\n".join(lines) + "\n"


def compare_baselines(dataset: EmbeddingDataset, proto: ProtocolSpec, config: CliConfig) -> ComparisonReport:
    """Every classifier with calibrated ("on") and raw ("off") prototypes over one shared split."""
    comparison = ComparisonReport()
    for metric in METRICS:
        for offsets in ("on", "off"):
            ablation = replace(
                config.ablation,
                nep=metric == "nep",
                metric=config.ablation.metric if metric == "nep" else metric,
                cs_offset=offsets == "on",
                ta_offset=offsets == "on",
            )
            report = run_protocol(dataset, proto, config, ablation)
            comparison.rows.append({
                "metric": metric,
                "offsets": offsets,
                "last_acc": report.last,
                "avg_acc": report.average,
                "params": report.params_trainable,
            })
    return comparison
