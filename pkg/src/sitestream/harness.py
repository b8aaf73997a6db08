"""Sequential cross-site training protocol.

One run walks the site sequence in order.  At each round the replay pipeline
(when the mode uses it) first regenerates past sites from stored prompts and
then refits the denoiser on incoming data plus that buffer; the segmentation
model then trains for the configured epochs with the mode's step rule, and
the round closes by scoring every site's test split into the accuracy
matrices.  A data-access audit records every dataset read and fails the run
hard if training ever touches raw data of a past site.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .alignment_optim import MODES, AlignConfig, alignment_gradient
from .errors import AuditError, ValidationError
from .model_zoo import SegConfig, SegModel, predict_masks, save_params
from .smd_replay import (
    DiffusionConfig,
    DenoiserModel,
    ReplayBuffer,
    build_buffer,
    new_prompt,
    train_smd,
)
from .synth_sites import (
    DEFAULT_SEQUENCE_STYLES,
    DEFAULT_UNSEEN_STYLES,
    Batch,
    SiteStream,
    SiteStyle,
    make_stream,
)
from .tensor_core import AdamState, ParamVector, Rng, axpy

HARNESS_MODES = MODES + ("jointtrain",)
REPLAY_MODES = ("naive_dual", "pga_exact", "dual_meta", "orientational_only", "arbitrary_only")


@dataclass
class SegTrainConfig:
    epochs: int = 25
    batch_size: int = 16
    replay_batch_size: int | None = None  # None -> same as batch_size
    patch_size: int = 3
    hidden: tuple[int, ...] = (16, 16)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "replay_batch_size": self.replay_batch_size,
            "patch_size": self.patch_size,
            "hidden": list(self.hidden),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegTrainConfig":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (16, 16)))
        return cls(**d)


@dataclass
class ExperimentConfig:
    sequence_styles: tuple[SiteStyle, ...] = DEFAULT_SEQUENCE_STYLES
    unseen_styles: tuple[SiteStyle, ...] = DEFAULT_UNSEEN_STYLES
    n_samples: int = 200
    image_hw: tuple[int, int] = (16, 16)
    fractions: tuple[float, float, float] = (0.6, 0.15, 0.25)
    seed: int = 0
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    replay_logging: bool = False  # finetune computes replay diagnostics
    eval_checkpoint: str = "final"  # or "best_val"

    def validate(self) -> None:
        self.align.validate()
        if self.eval_checkpoint not in ("final", "best_val"):
            raise ValidationError(f"unknown eval_checkpoint {self.eval_checkpoint!r}")
        ids = [s.site_id for s in self.sequence_styles] + [s.site_id for s in self.unseen_styles]
        if len(set(ids)) != len(ids):
            raise ValidationError("site ids must be unique")
        if not self.sequence_styles:
            raise ValidationError("need at least one sequence site")

    def to_dict(self) -> dict:
        return {
            "sequence_styles": [s.to_dict() for s in self.sequence_styles],
            "unseen_styles": [s.to_dict() for s in self.unseen_styles],
            "n_samples": self.n_samples,
            "image_hw": list(self.image_hw),
            "fractions": list(self.fractions),
            "seed": self.seed,
            "seg": self.seg.to_dict(),
            "align": self.align.to_dict(),
            "diffusion": self.diffusion.to_dict(),
            "replay_logging": self.replay_logging,
            "eval_checkpoint": self.eval_checkpoint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            sequence_styles=tuple(SiteStyle.from_dict(s) for s in d["sequence_styles"]),
            unseen_styles=tuple(SiteStyle.from_dict(s) for s in d["unseen_styles"]),
            n_samples=d["n_samples"],
            image_hw=tuple(d["image_hw"]),
            fractions=tuple(d["fractions"]),
            seed=d["seed"],
            seg=SegTrainConfig.from_dict(d["seg"]),
            align=AlignConfig.from_dict(d["align"]),
            diffusion=DiffusionConfig.from_dict(d["diffusion"]),
            replay_logging=d.get("replay_logging", False),
            eval_checkpoint=d.get("eval_checkpoint", "final"),
        )


def default_config(seed: int = 0) -> ExperimentConfig:
    """Desk-scale defaults calibrated so sequential fine-tuning visibly
    forgets while replay-aligned modes retain and generalize."""
    return ExperimentConfig(
        seed=seed,
        seg=SegTrainConfig(),
        align=AlignConfig(gamma=0.05, beta=0.05, base_lr=0.5, mode="dual_meta"),
        diffusion=DiffusionConfig(),
    )


# ---------------------------------------------------------------------------
# Data-access audit


@dataclass(frozen=True)
class AccessRecord:
    round: int
    site_id: int
    split: str
    purpose: str  # "train" | "eval"
    kind: str  # "raw" | "buffer"

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "site_id": self.site_id,
            "split": self.split,
            "purpose": self.purpose,
            "kind": self.kind,
        }


class DataAccessLog:
    def __init__(self):
        self.records: list[AccessRecord] = []

    def record(self, round_: int, site_id: int, split: str, purpose: str, kind: str) -> None:
        self.records.append(AccessRecord(round_, site_id, split, purpose, kind))

    def raw_train_sites(self, round_: int) -> set[int]:
        return {
            r.site_id
            for r in self.records
            if r.round == round_ and r.purpose == "train" and r.kind == "raw"
        }

    def to_dicts(self) -> list[dict]:
        return [r.to_dict() for r in self.records]


class AuditedStream:
    """Routes every dataset read through the access log."""

    def __init__(self, stream: SiteStream, log: DataAccessLog):
        self.stream = stream
        self.log = log
        self._by_id = {b.site_id: b for b in stream.sequence + stream.unseen}

    def bundle(self, site_id: int):
        return self._by_id[site_id]

    def train_data(self, round_: int, site_id: int):
        self.log.record(round_, site_id, "train", "train", "raw")
        return self._by_id[site_id].train

    def eval_data(self, round_: int, site_id: int, split: str = "test"):
        self.log.record(round_, site_id, split, "eval", "raw")
        return getattr(self._by_id[site_id], split)

    def record_buffer_read(self, round_: int, site_ids) -> None:
        for sid in sorted(set(int(s) for s in site_ids)):
            self.log.record(round_, sid, "buffer", "train", "buffer")


def check_round_privacy(log: DataAccessLog, round_: int, incoming_site: int, mode: str) -> None:
    """Raw training reads during a round must touch only the incoming site."""
    if mode == "jointtrain":  # offline upper bound, exempt by design
        return
    touched = log.raw_train_sites(round_)
    if not touched <= {incoming_site}:
        raise AuditError(
            f"round {round_} read raw training data of sites {sorted(touched)}; "
            f"only site {incoming_site} is permitted"
        )


# ---------------------------------------------------------------------------
# Replay pipeline (independent of the segmentation mode, reusable across them)


@dataclass
class ReplayPipeline:
    buffers: dict[int, ReplayBuffer]
    prompts_by_round: dict[int, list]
    denoiser: DenoiserModel | None
    loss_histories: dict[int, list[float]]


def prepare_replay(cfg: ExperimentConfig, audited: AuditedStream, root: Rng) -> ReplayPipeline:
    """Run the per-round diffusion protocol over the whole stream.

    Round t >= 2 first regenerates sites 1..t-1 from their stored prompts
    (conditioned on the incoming site's training masks), then refits the
    denoiser together with t prompts on incoming data plus that buffer.
    Everything here depends only on (config, seed), never on the
    segmentation mode, so one pipeline can serve paired mode comparisons.
    """
    schedule = cfg.diffusion.schedule()
    den = DenoiserModel.init(
        cfg.diffusion.denoiser_config(cfg.image_hw), root.split("smd", "init")
    )
    prompts: list = []
    buffers: dict[int, ReplayBuffer] = {}
    prompts_by_round: dict[int, list] = {}
    histories: dict[int, list[float]] = {}

    for t, bundle in enumerate(audited.stream.sequence, start=1):
        train_ds = audited.train_data(t, bundle.site_id)
        if t >= 2:
            buffers[t] = build_buffer(
                den, prompts, train_ds.masks, cfg.diffusion.n_per_site,
                schedule, root.split("smd", "buffer", t),
            )
        fresh = new_prompt(
            bundle.site_id, cfg.diffusion.time_dim,
            root.split("smd", "prompt", t), cfg.diffusion.prompt_scale,
        )
        incoming = Batch(
            train_ds.images, train_ds.masks,
            np.full(len(train_ds), bundle.site_id, dtype=np.int64),
        )
        result = train_smd(
            incoming, buffers.get(t), prompts + [fresh], den,
            cfg.diffusion, root.split("smd", "fit", t),
        )
        den, prompts = result.denoiser, result.prompts
        prompts_by_round[t] = [p.copy() for p in prompts]
        histories[t] = result.loss_history
    return ReplayPipeline(buffers, prompts_by_round, den, histories)


# ---------------------------------------------------------------------------
# Run record and the main protocol


@dataclass
class RunRecord:
    mode: str
    seed: int
    site_ids: list[int]
    unseen_ids: list[int]
    matrix_dsc: metrics.AccuracyMatrix
    matrix_asd: metrics.AccuracyMatrix
    unseen_dsc: np.ndarray
    unseen_asd: np.ndarray
    diagnostics: list[dict]
    checkpoints: list[ParamVector]
    access_log: DataAccessLog
    asd_skips: int = 0
    summary: dict = field(default_factory=dict)


def evaluate_on(model: SegModel, params: ParamVector, dataset) -> tuple[float, float, int]:
    """Mean DSC and mean ASD over a dataset; empty predictions skip ASD."""
    preds = predict_masks(model, dataset.images, params)
    dscs, asds, skips = [], [], 0
    for i in range(len(dataset)):
        dscs.append(metrics.dsc(preds[i], dataset.masks[i]))
        try:
            asds.append(metrics.asd(preds[i], dataset.masks[i]))
        except metrics.MetricUndefinedError:
            skips += 1
    mean_asd = float(np.mean(asds)) if asds else float("nan")
    return float(np.mean(dscs)), mean_asd, skips


def _mode_uses_replay(mode: str) -> bool:
    return mode in REPLAY_MODES


def run_sequence(
    cfg: ExperimentConfig,
    mode: str | None = None,
    shared_replay: ReplayPipeline | None = None,
) -> RunRecord:
    """Execute the full sequential protocol in one mode."""
    cfg.validate()
    mode = mode or cfg.align.mode
    if mode not in HARNESS_MODES:
        raise ValidationError(f"unknown mode {mode!r}; one of {HARNESS_MODES}")

    root = Rng(cfg.seed)
    stream = make_stream(
        cfg.sequence_styles, cfg.unseen_styles, cfg.n_samples,
        cfg.image_hw, root.split("data"), cfg.fractions,
    )
    log = DataAccessLog()
    audited = AuditedStream(stream, log)

    needs_replay = _mode_uses_replay(mode) or (mode == "finetune" and cfg.replay_logging)
    pipeline = shared_replay
    if needs_replay and pipeline is None:
        # The pipeline reads data under its own audit when shared; here it
        # shares this run's log so its reads are audited together.
        pipeline = prepare_replay(cfg, audited, root)

    seg_cfg = SegConfig(cfg.seg.patch_size, tuple(cfg.seg.hidden))
    model = SegModel.init(seg_cfg, root.split("seg", "init"))
    params = model.params
    adam = AdamState(params.size) if cfg.align.optimizer == "adam" else None

    site_ids = [b.site_id for b in stream.sequence]
    unseen_ids = [b.site_id for b in stream.unseen]
    n_rounds = len(site_ids)
    record = RunRecord(
        mode=mode,
        seed=cfg.seed,
        site_ids=site_ids,
        unseen_ids=unseen_ids,
        matrix_dsc=metrics.AccuracyMatrix(site_ids),
        matrix_asd=metrics.AccuracyMatrix(site_ids),
        unseen_dsc=np.full((n_rounds, len(unseen_ids)), np.nan),
        unseen_asd=np.full((n_rounds, len(unseen_ids)), np.nan),
        diagnostics=[],
        checkpoints=[],
        access_log=log,
    )

    replay_bs = cfg.seg.replay_batch_size or cfg.seg.batch_size
    rng_seg = root.split("seg", "train")
    step_counter = 0

    pooled = None
    if mode == "jointtrain":
        parts = []
        for b in stream.sequence:
            ds = audited.train_data(1, b.site_id)
            parts.append(Batch(ds.images, ds.masks, np.full(len(ds), b.site_id, dtype=np.int64)))
        pooled = Batch.concat(parts)

    for t, bundle in enumerate(stream.sequence, start=1):
        buffer = None
        if _mode_uses_replay(mode) or (mode == "finetune" and cfg.replay_logging):
            buffer = pipeline.buffers.get(t)

        if mode == "jointtrain":
            for b in stream.sequence:  # every round reads the whole pool
                if t > 1:
                    log.record(t, b.site_id, "train", "train", "raw")
            train_images, train_masks = pooled.images, pooled.masks
            train_sites = pooled.site_ids
        else:
            train_ds = audited.train_data(t, bundle.site_id)
            train_images, train_masks = train_ds.images, train_ds.masks
            train_sites = np.full(len(train_ds), bundle.site_id, dtype=np.int64)

        best_params, best_val = None, -1.0
        n_train = train_images.shape[0]
        for epoch in range(cfg.seg.epochs):
            order = rng_seg.split(t, "order", epoch).permutation(n_train)
            for bi, start in enumerate(range(0, n_train, cfg.seg.batch_size)):
                idx = order[start : start + cfg.seg.batch_size]
                batch_dt = Batch(train_images[idx], train_masks[idx], train_sites[idx])
                step_rng = rng_seg.split(t, "step", epoch, bi)

                batch_p = None
                if buffer is not None and not buffer.is_empty():
                    batch_p = buffer.sample_batch(replay_bs, step_rng.split("replay"))
                    audited.record_buffer_read(t, batch_p.site_ids)

                step_mode = "finetune" if mode == "jointtrain" else mode
                grad, diag = alignment_gradient(
                    model, batch_dt,
                    batch_p if step_mode != "finetune" or cfg.replay_logging else None,
                    cfg.align, step_rng.split("vsplit"),
                    params=params, mode=step_mode,
                )
                if adam is not None:
                    params = ParamVector(params.data + adam.step(grad.data, cfg.align.base_lr), params.layout)
                else:
                    params = axpy(-cfg.align.base_lr, grad, params)

                step_counter += 1
                diag.step, diag.round, diag.epoch = step_counter, t, epoch
                diag.mode = mode
                record.diagnostics.append(diag.to_dict())

            if cfg.eval_checkpoint == "best_val" and mode != "jointtrain":
                val = audited.eval_data(t, bundle.site_id, "val")
                v_dsc, _, _ = evaluate_on(model, params, val)
                if v_dsc > best_val:
                    best_val, best_params = v_dsc, params.copy()

        check_round_privacy(log, t, bundle.site_id, mode)

        eval_params = best_params if (cfg.eval_checkpoint == "best_val" and best_params is not None) else params
        row_dsc, row_asd = [], []
        for b in stream.sequence:
            d, a, sk = evaluate_on(model, eval_params, audited.eval_data(t, b.site_id))
            row_dsc.append(d)
            row_asd.append(a)
            record.asd_skips += sk
        record.matrix_dsc.set_row(t - 1, row_dsc)
        record.matrix_asd.set_row(t - 1, row_asd)
        for u, b in enumerate(stream.unseen):
            d, a, sk = evaluate_on(model, eval_params, audited.eval_data(t, b.site_id))
            record.unseen_dsc[t - 1, u] = d
            record.unseen_asd[t - 1, u] = a
            record.asd_skips += sk
        record.checkpoints.append(eval_params.copy())
        if cfg.eval_checkpoint == "best_val" and best_params is not None:
            params = best_params

    record.summary = summarize_run(record)
    return record


def summarize_run(record: RunRecord) -> dict:
    """Final-round score groups plus transfer statistics."""
    n = len(record.site_ids)
    dsc_final = record.matrix_dsc.values[n - 1]
    asd_final = record.matrix_asd.values[n - 1]
    unseen_dsc_final = record.unseen_dsc[n - 1] if record.unseen_ids else np.array([])
    unseen_asd_final = record.unseen_asd[n - 1] if record.unseen_ids else np.array([])

    cos_vals = [d["cos_dt_p"] for d in record.diagnostics if d["cos_dt_p"] is not None]
    summary = {
        "mode": record.mode,
        "seed": record.seed,
        "site_ids": record.site_ids,
        "unseen_ids": record.unseen_ids,
        "previous_mean_dsc": float(np.mean(dsc_final[: n - 1])) if n > 1 else None,
        "incoming_dsc": float(dsc_final[n - 1]),
        "unseen_mean_dsc": float(np.mean(unseen_dsc_final)) if unseen_dsc_final.size else None,
        "overall_dsc": float(np.mean(np.concatenate([dsc_final, unseen_dsc_final]))),
        "previous_mean_asd": float(np.mean(asd_final[: n - 1])) if n > 1 else None,
        "incoming_asd": float(asd_final[n - 1]),
        "unseen_mean_asd": float(np.mean(unseen_asd_final)) if unseen_asd_final.size else None,
        "overall_asd": float(np.mean(np.concatenate([asd_final, unseen_asd_final]))),
        "mean_cos_dt_p": float(np.mean(cos_vals)) if cos_vals else None,
        "asd_skips": int(record.asd_skips),
        "n_steps": len(record.diagnostics),
    }
    if n >= 2:
        summary["bwt"] = metrics.bwt(record.matrix_dsc)
        summary["fwt"] = metrics.fwt(record.matrix_dsc)
        summary["bwt_plus"] = metrics.bwt_plus(record.matrix_asd)
    else:
        summary["bwt"] = summary["fwt"] = summary["bwt_plus"] = None
    return summary


# ---------------------------------------------------------------------------
# Outputs


DIAG_COLUMNS = (
    "step", "round", "epoch", "mode",
    "loss_dt", "loss_p", "loss_vtr", "loss_vte",
    "ip_dt_p", "ip_vtr_vte", "cos_dt_p", "cos_vtr_vte",
    "norm_g_dt", "norm_g_p", "norm_g_vtr", "norm_g_vte",
)


def diagnostics_export(record: RunRecord, path: str) -> None:
    """Per-step loss and inner-product series as CSV, one row per step."""
    with open(path, "w", newline="") as f:
        f.write(",".join(DIAG_COLUMNS) + "\n")
        for d in record.diagnostics:
            cells = []
            for col in DIAG_COLUMNS:
                v = d[col]
                cells.append("" if v is None else (v if isinstance(v, str) else repr(v)))
            f.write(",".join(str(c) for c in cells) + "\n")


def write_run_outputs(record: RunRecord, out_dir: str, cfg: ExperimentConfig) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
    metrics.save_matrix_csv(record.matrix_dsc, os.path.join(out_dir, "matrix_dsc.csv"))
    metrics.save_matrix_csv(record.matrix_asd, os.path.join(out_dir, "matrix_asd.csv"))
    metrics.save_summary_json(record.summary, os.path.join(out_dir, "summary.json"))
    with open(os.path.join(out_dir, "diagnostics.jsonl"), "w") as f:
        for d in record.diagnostics:
            f.write(json.dumps(d, sort_keys=True) + "\n")
    diagnostics_export(record, os.path.join(out_dir, "diagnostics.csv"))
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    for t, p in enumerate(record.checkpoints, start=1):
        save_params(p, os.path.join(ckpt_dir, f"round_{t:02d}"), extra={"round": t})
    with open(os.path.join(out_dir, "audit.json"), "w") as f:
        json.dump(record.access_log.to_dicts(), f, indent=2)
    with open(os.path.join(out_dir, "status.json"), "w") as f:
        json.dump({"status": "ok", "mode": record.mode, "seed": record.seed}, f, sort_keys=True)


# ---------------------------------------------------------------------------
# Multi-mode comparison


COMPARISON_COLUMNS = (
    "mode", "seed",
    "previous_mean_dsc", "incoming_dsc", "unseen_mean_dsc", "overall_dsc",
    "bwt", "fwt",
    "previous_mean_asd", "incoming_asd", "unseen_mean_asd", "overall_asd",
    "bwt_plus", "mean_cos_dt_p",
)


@dataclass
class ComparisonResult:
    records: dict[tuple[str, int], RunRecord]
    rows: list[dict]

    def rows_for(self, mode: str) -> list[dict]:
        return [r for r in self.rows if r["mode"] == mode]

    def median(self, mode: str, column: str) -> float:
        vals = [r[column] for r in self.rows_for(mode) if r[column] is not None]
        return float(np.median(vals))


def run_comparison(
    cfg: ExperimentConfig,
    modes,
    seeds,
    replay_logging: bool | None = None,
) -> ComparisonResult:
    """Run each mode over the same seeds and data, sharing the per-seed
    replay pipeline so mode comparisons are exactly paired."""
    records: dict[tuple[str, int], RunRecord] = {}
    rows = []
    for seed in seeds:
        cfg_seed = replace(cfg, seed=seed)
        if replay_logging is not None:
            cfg_seed = replace(cfg_seed, replay_logging=replay_logging)
        pipeline = None
        if any(_mode_uses_replay(m) or (m == "finetune" and cfg_seed.replay_logging) for m in modes):
            root = Rng(cfg_seed.seed)
            stream = make_stream(
                cfg_seed.sequence_styles, cfg_seed.unseen_styles, cfg_seed.n_samples,
                cfg_seed.image_hw, root.split("data"), cfg_seed.fractions,
            )
            side_log = DataAccessLog()
            pipeline = prepare_replay(cfg_seed, AuditedStream(stream, side_log), root)
        for mode in modes:
            rec = run_sequence(cfg_seed, mode=mode, shared_replay=pipeline)
            records[(mode, seed)] = rec
            rows.append({col: rec.summary.get(col) for col in COMPARISON_COLUMNS})
    return ComparisonResult(records, rows)


def save_comparison_csv(result: ComparisonResult, path: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(COMPARISON_COLUMNS) + "\n")
        for row in result.rows:
            cells = []
            for col in COMPARISON_COLUMNS:
                v = row.get(col)
                cells.append("" if v is None else (v if isinstance(v, str) else repr(v)))
            f.write(",".join(str(c) for c in cells) + "\n")
