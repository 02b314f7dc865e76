"""Two-stage training, evaluation, experiment matrix, and report emission.

Stage 1 trains only the newly initialized components (projectors and fusion
modules); stage 2 unfreezes everything except the vision encoder. Every run
draws from an RNG stream keyed by (global seed, config fingerprint), so matrix
runs are order-independent and any record reproduces bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, VisualFeatureSet
from .errors import ConfigError, FuseLabError, NumericError
from .fusion import (FusionPlan, LayerSet, count_parameters, make_plan,
                     needed_layers, validate_plan)
from .lm import LMConfig
from .model import FusedModel
from .optim import AdamW, AdamWConfig
from .rng import Rng
from .tasks import QA_TAGS, Sample, build_vocab, generate_dataset

EVAL_INDEX_OFFSET = 1_000_000

# A run is declared diverged once its loss exceeds this multiple of the
# loss it had at step 50 of the same stage (or turns non-finite).
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_REF_STEP = 50


@dataclass
class DataConfig:
    seed: int = 0
    grid_k: int = 4
    n_captions: int = 2000
    n_qa: int = 4000
    n_eval: int = 512

    def to_dict(self) -> dict:
        return {"seed": self.seed, "grid_k": self.grid_k, "n_captions": self.n_captions,
                "n_qa": self.n_qa, "n_eval": self.n_eval}

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        return cls(**d)


@dataclass
class TrainConfig:
    stage1_steps: int = 300
    stage1_lr: float = 1e-3
    stage2_steps: int = 3000
    stage2_lr: float = 1e-3
    batch_size: int = 2
    weight_decay: float = 0.01

    def to_dict(self) -> dict:
        return {"stage1_steps": self.stage1_steps, "stage1_lr": self.stage1_lr,
                "stage2_steps": self.stage2_steps, "stage2_lr": self.stage2_lr,
                "batch_size": self.batch_size, "weight_decay": self.weight_decay}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    plan: FusionPlan = field(default_factory=FusionPlan.baseline)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "encoder": self.encoder.to_dict(),
            "lm": self.lm.to_dict(),
            "plan": self.plan.to_dict(),
            "data": self.data.to_dict(),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            seed=d.get("seed", 0),
            out_dir=d.get("out_dir", "runs"),
            encoder=EncoderConfig.from_dict(d.get("encoder", {})),
            lm=LMConfig.from_dict(d.get("lm", {})),
            plan=FusionPlan.from_dict(d["plan"]) if "plan" in d else FusionPlan.baseline(),
            data=DataConfig.from_dict(d.get("data", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
        )

    def fingerprint(self) -> str:
        """Hash of the canonical config, excluding the output location."""
        payload = self.to_dict()
        payload.pop("out_dir")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def validate(self) -> None:
        vocab = build_vocab(self.data.grid_k)
        if vocab.size > self.lm.vocab_size:
            raise ConfigError(
                f"vocabulary of {vocab.size} tokens exceeds LM vocab_size {self.lm.vocab_size}")
        rendered = self.data.grid_k * 8
        if rendered != self.encoder.image_size:
            raise ConfigError(
                f"grid renders to {rendered}px but encoder expects {self.encoder.image_size}px")
        if self.data.grid_k ** 2 > self.encoder.n_patches:
            raise ConfigError("grid finer than the encoder patch resolution")
        reason = validate_plan(self.plan, self.encoder.depth, self.lm.depth,
                               n_patches=self.encoder.n_patches, max_seq=self.lm.max_seq)
        if reason:
            raise ConfigError(f"invalid fusion plan: {reason}")

    def with_plan(self, plan: FusionPlan) -> "ExperimentConfig":
        return ExperimentConfig(seed=self.seed, out_dir=self.out_dir,
                                encoder=self.encoder, lm=self.lm, plan=plan,
                                data=self.data, train=self.train)


@dataclass
class MetricsRow:
    strategy: str
    layer_set: str
    per_task: dict[str, float]

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_task.values())))


@dataclass
class RunRecord:
    fingerprint: str
    strategy: str
    layer_set: str
    seed: int
    plan: dict
    param_counts: dict
    stage1_losses: list[float] = field(default_factory=list)
    stage2_losses: list[float] = field(default_factory=list)
    eval_accuracy: dict[str, float] = field(default_factory=dict)
    wall_clock: float = 0.0
    status: str = "ok"
    detail: str = ""
    diverged_at: int | None = None

    @property
    def average(self) -> float:
        if not self.eval_accuracy:
            return float("nan")
        return float(np.mean(list(self.eval_accuracy.values())))

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "strategy": self.strategy,
            "layer_set": self.layer_set,
            "seed": self.seed,
            "plan": self.plan,
            "param_counts": self.param_counts,
            "stage1_losses": self.stage1_losses,
            "stage2_losses": self.stage2_losses,
            "eval_accuracy": self.eval_accuracy,
            "wall_clock": self.wall_clock,
            "status": self.status,
            "detail": self.detail,
            "diverged_at": self.diverged_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def build_datasets(cfg: ExperimentConfig) -> dict[str, list[Sample]]:
    n_patches = cfg.encoder.n_patches
    return {
        "captions": generate_dataset(cfg.data.seed, "pretrain-captions",
                                     cfg.data.n_captions, grid_k=cfg.data.grid_k,
                                     n_patches=n_patches),
        "qa": generate_dataset(cfg.data.seed, "sft-qa", cfg.data.n_qa,
                               grid_k=cfg.data.grid_k, n_patches=n_patches),
        "eval": generate_dataset(cfg.data.seed, "sft-qa", cfg.data.n_eval,
                                 grid_k=cfg.data.grid_k,
                                 index_offset=EVAL_INDEX_OFFSET, n_patches=n_patches),
    }


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class Divergence(FuseLabError):
    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


# Memory cap for memoized per-sample encoder features (the encoder is frozen,
# so its outputs are constants); beyond the cap we re-encode on the fly.
FEATURE_CACHE_BUDGET_BYTES = 600_000_000


class FeatureCache:
    """Lazy per-sample cache of the encoder layers a plan consumes."""

    def __init__(self, model: FusedModel):
        self.model = model
        self.layers = needed_layers(model.plan, model.enc_cfg.depth)
        per_entry = (len(self.layers) * model.enc_cfg.n_patches
                     * model.enc_cfg.width * 8)
        self.max_entries = FEATURE_CACHE_BUDGET_BYTES // max(per_entry, 1)
        self._store: dict[tuple[str, int], VisualFeatureSet] = {}

    def get(self, split: str, idx: int, sample: Sample) -> VisualFeatureSet:
        key = (split, idx)
        feats = self._store.get(key)
        if feats is None:
            full = self.model.encoder.encode(sample.image)
            feats = VisualFeatureSet([full.layer(i) for i in self.layers],
                                     source_layer_indices=list(self.layers))
            if len(self._store) < self.max_entries:
                self._store[key] = feats
        return feats


def _run_stage(model: FusedModel, samples: list[Sample], steps: int, lr: float,
               weight_decay: float, batch_size: int, order_rng: Rng,
               losses: list[float], stage: int, cache: FeatureCache | None = None,
               progress=None) -> None:
    opt = AdamW(model.trainable_params(), AdamWConfig(lr=lr, weight_decay=weight_decay))
    split = f"stage{stage}"
    for step in range(steps):
        opt.zero_grad()
        total = 0.0
        try:
            for _ in range(batch_size):
                idx = order_rng.integers(0, len(samples))
                sample = samples[idx]
                feats = cache.get(split, idx, sample) if cache is not None else None
                loss = model.loss(sample.image, sample.prompt_ids,
                                  sample.answer_ids, feats=feats)
                loss.backward()
                total += loss.item()
        except NumericError as e:
            losses.append(float("nan"))
            raise Divergence(step, f"stage {stage} step {step}: {e}") from e
        loss_val = total / batch_size
        losses.append(loss_val)
        if not math.isfinite(loss_val):
            raise Divergence(step, f"non-finite loss at stage {stage} step {step}")
        if (step >= DIVERGENCE_REF_STEP
                and loss_val > DIVERGENCE_FACTOR * losses[DIVERGENCE_REF_STEP - 1]):
            raise Divergence(step, f"stage {stage} loss {loss_val:.3f} exceeded "
                                   f"10x the step-50 value at step {step}")
        if batch_size > 1:
            for p in opt.params:
                if p.trainable and p.tensor.grad is not None:
                    p.tensor.grad /= batch_size
        opt.step()
        if progress is not None:
            progress(stage, step, loss_val)


def train_two_stage(cfg: ExperimentConfig, datasets: dict | None = None,
                    progress=None, keep_model: bool = False):
    """Run the freeze-scheduled two-stage recipe; returns the RunRecord.

    With ``keep_model=True`` returns (record, model) for in-process reuse.
    """
    cfg.validate()
    fingerprint = cfg.fingerprint()
    datasets = datasets or build_datasets(cfg)
    run_rng = Rng(cfg.seed).split(fingerprint)
    model = FusedModel(cfg.encoder, cfg.lm, cfg.plan, rng=run_rng.split("model"))
    record = RunRecord(
        fingerprint=fingerprint,
        strategy=cfg.plan.strategy_label,
        layer_set=cfg.plan.layer_set.label,
        seed=cfg.seed,
        plan=cfg.plan.to_dict(),
        param_counts=count_parameters(cfg.plan, cfg.encoder.width, cfg.lm.hidden),
    )
    started = time.perf_counter()
    try:
        cache = FeatureCache(model)
        model.set_stage(1)
        _run_stage(model, datasets["captions"], cfg.train.stage1_steps,
                   cfg.train.stage1_lr, cfg.train.weight_decay, cfg.train.batch_size,
                   run_rng.split("order-stage1"), record.stage1_losses,
                   stage=1, cache=cache, progress=progress)
        model.set_stage(2)
        _run_stage(model, datasets["qa"], cfg.train.stage2_steps,
                   cfg.train.stage2_lr, cfg.train.weight_decay, cfg.train.batch_size,
                   run_rng.split("order-stage2"), record.stage2_losses,
                   stage=2, cache=cache, progress=progress)
        record.eval_accuracy = evaluate_model(model, datasets["eval"],
                                              build_vocab(cfg.data.grid_k))
    except Divergence as d:
        record.status = "diverged"
        record.detail = str(d)
        record.diverged_at = d.step
    record.wall_clock = time.perf_counter() - started

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(out_dir / f"{fingerprint}.ckpt",
                          extra_meta={"config_fingerprint": fingerprint})
    (out_dir / f"record_{fingerprint}.json").write_text(
        json.dumps(record.to_dict(), sort_keys=True, indent=2))
    if keep_model:
        return record, model
    return record


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_model(model: FusedModel, eval_samples: list[Sample], vocab,
                   tags=QA_TAGS) -> dict[str, float]:
    """Exact-match accuracy per task tag via greedy decoding."""
    if not eval_samples:
        raise ConfigError("evaluation requires a non-empty eval split")
    hits: dict[str, int] = {t: 0 for t in tags}
    totals: dict[str, int] = {t: 0 for t in tags}
    for sample in eval_samples:
        if sample.task_tag not in totals:
            continue
        decoded = model.greedy_decode(sample.image, sample.prompt_ids,
                                      eos_id=vocab.eos_id,
                                      max_new=len(sample.answer_ids))
        totals[sample.task_tag] += 1
        if tuple(decoded) == tuple(sample.answer_ids):
            hits[sample.task_tag] += 1
    present = {t for t in tags if totals[t]}
    if not present:
        raise ConfigError("eval split contains none of the requested task tags")
    return {t: hits[t] / totals[t] for t in sorted(present)}


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint_path) -> MetricsRow:
    """Rebuild the model from a checkpoint (fingerprint-guarded) and evaluate."""
    cfg.validate()
    model = FusedModel(cfg.encoder, cfg.lm, cfg.plan, seed=cfg.seed)
    model.load_checkpoint_file(checkpoint_path)
    datasets = build_datasets(cfg)
    acc = evaluate_model(model, datasets["eval"], build_vocab(cfg.data.grid_k))
    return MetricsRow(strategy=cfg.plan.strategy_label,
                      layer_set=cfg.plan.layer_set.label, per_task=acc)


# ---------------------------------------------------------------------------
# Experiment matrix
# ---------------------------------------------------------------------------


def rebind_plan(template: FusionPlan, layer_set: LayerSet) -> FusionPlan:
    """Attach a concrete layer set to a strategy template plan."""
    variant = template.variant
    if template.position == "external" and template.pattern == "direct" and variant is None:
        variant = None  # make_plan fills the per-set default
    return make_plan(template.position, template.pattern, layer_set,
                     variant=variant, projector_kind=template.projector_kind,
                     gate_init=template.gate_init)


def run_matrix(strategies: list[FusionPlan], sets: list[LayerSet],
               base_cfg: ExperimentConfig, include_baseline: bool = True,
               progress=None) -> list[RunRecord]:
    """Train every strategy x layer-set combination plus the baseline row.

    Invalid combinations are recorded as skipped; failures and divergences
    are recorded without stopping the matrix.
    """
    cfgs: list[ExperimentConfig] = []
    if include_baseline:
        cfgs.append(base_cfg.with_plan(FusionPlan.baseline(
            projector_kind=base_cfg.plan.projector_kind)))
    for strategy in strategies:
        for layer_set in sets:
            cfgs.append(base_cfg.with_plan(rebind_plan(strategy, layer_set)))

    datasets = build_datasets(base_cfg)
    records: list[RunRecord] = []
    for cfg in cfgs:
        plan = cfg.plan
        reason = validate_plan(plan, cfg.encoder.depth, cfg.lm.depth,
                               n_patches=cfg.encoder.n_patches, max_seq=cfg.lm.max_seq)
        if reason:
            records.append(RunRecord(
                fingerprint=cfg.fingerprint(), strategy=plan.strategy_label,
                layer_set=plan.layer_set.label, seed=cfg.seed, plan=plan.to_dict(),
                param_counts=count_parameters(plan, cfg.encoder.width, cfg.lm.hidden),
                status="skipped", detail=reason))
            continue
        try:
            records.append(train_two_stage(cfg, datasets=datasets, progress=progress))
        except FuseLabError as e:
            records.append(RunRecord(
                fingerprint=cfg.fingerprint(), strategy=plan.strategy_label,
                layer_set=plan.layer_set.label, seed=cfg.seed, plan=plan.to_dict(),
                param_counts=count_parameters(plan, cfg.encoder.width, cfg.lm.hidden),
                status="failed", detail=str(e)))
    return records


def matrix_exit_code(records: list[RunRecord]) -> int:
    """0 when at least one run completed; 3 when every attempted run diverged."""
    attempted = [r for r in records if r.status in ("ok", "diverged", "failed")]
    if attempted and all(r.status == "diverged" for r in attempted):
        return 3
    return 0


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

METRICS_HEADER = "strategy,layer_set,task,accuracy"
CURVES_HEADER = "stage,step,loss"


def metrics_rows(records: list[RunRecord]) -> list[MetricsRow]:
    return [MetricsRow(strategy=r.strategy, layer_set=r.layer_set,
                       per_task=dict(r.eval_accuracy))
            for r in records if r.status == "ok" and r.eval_accuracy]


def emit_report(records: list[RunRecord], out_dir) -> dict[str, Path]:
    """Write the metrics CSV, per-run loss-curve CSVs, and a text summary."""
    if not records:
        raise ConfigError("report needs at least one run record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    lines = [METRICS_HEADER]
    for rec in records:
        if rec.status != "ok" or not rec.eval_accuracy:
            continue
        for task in sorted(rec.eval_accuracy):
            lines.append(f"{rec.strategy},{rec.layer_set},{task},{rec.eval_accuracy[task]!r}")
        lines.append(f"{rec.strategy},{rec.layer_set},average,{rec.average!r}")
    metrics_path = out / "metrics.csv"
    metrics_path.write_text("\n".join(lines) + "\n")
    paths["metrics"] = metrics_path

    for rec in records:
        if rec.status == "skipped":
            continue
        curve_lines = [CURVES_HEADER]
        for stage, losses in ((1, rec.stage1_losses), (2, rec.stage2_losses)):
            for step, loss in enumerate(losses):
                curve_lines.append(f"{stage},{step},{loss!r}")
        curve_path = out / f"curves_{rec.fingerprint}.csv"
        curve_path.write_text("\n".join(curve_lines) + "\n")
        paths[f"curves_{rec.fingerprint}"] = curve_path

    scored = [r for r in records if r.status == "ok" and r.eval_accuracy]
    scored.sort(key=lambda r: (-r.average, r.fingerprint))
    summary = ["strategy ranking by average exact-match accuracy", ""]
    for rank, rec in enumerate(scored, start=1):
        summary.append(f"{rank}. {rec.strategy:9s} {rec.layer_set:9s} "
                       f"avg={rec.average:.4f} fingerprint={rec.fingerprint}")
    others = [r for r in records if r.status != "ok"]
    if others:
        summary.append("")
        summary.append("incomplete runs:")
        for rec in others:
            summary.append(f"- {rec.strategy} {rec.layer_set}: {rec.status} ({rec.detail})")
    summary_path = out / "summary.txt"
    summary_path.write_text("\n".join(summary) + "\n")
    paths["summary"] = summary_path
    return paths


def parse_metrics_csv(path) -> list[tuple[str, str, str, float]]:
    rows = []
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0] != METRICS_HEADER:
        raise ConfigError(f"unexpected metrics header in {path}")
    for line in text[1:]:
        strategy, layer_set, task, acc = line.split(",")
        rows.append((strategy, layer_set, task, float(acc)))
    return rows


def load_records(out_dir) -> list[RunRecord]:
    records = []
    for path in sorted(Path(out_dir).glob("record_*.json")):
        records.append(RunRecord.from_dict(json.loads(path.read_text())))
    if not records:
        raise ConfigError(f"no run records found under {out_dir}")
    return records
