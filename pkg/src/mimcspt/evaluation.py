"""Metrics, the strategy-comparison runner, and figure-style emitters.

``run_comparison`` executes knowledge-transfer arms (chains of pretrain /
continue / finetune stages) across seeds, reusing identical stage runs via
content-addressed run directories, and aggregates final test metrics into a
ComparisonReport. Self-supervised stages are instrumented: a label read
during a pretrain/continue stage aborts the comparison.

Emitters render masked-reconstruction panels and attention heat maps as
binary PPM, and export per-epoch metric curves as CSV for external plotting.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .data import LABEL_READS
from .model import VitConfig, extract_attention_map, unpatchify
from .pipeline import StageConfig, materialize_init_checkpoint, reference_mode, run_stage
from .ppm import image_to_bytes, write_ppm
from .pretext import masked_autoencode, sample_mask
from .tensor import Rng, ShapeError

__all__ = [
    "top1_accuracy",
    "mean_iou",
    "StrategyArm",
    "ComparisonReport",
    "run_comparison",
    "render_reconstruction_panel",
    "render_attention_map",
    "export_curves",
    "GUTTER",
    "MASK_FILL",
]

GUTTER = 2            # pixels between panel columns, white
MASK_FILL = 128       # gray level of hidden patches in panel column 2
RAMP_LEN = 256


def top1_accuracy(logits_list, labels) -> float:
    """Fraction of samples whose argmax logit hits the label.

    Ties break to the lowest class index. Inputs must be equal-length and
    non-empty.
    """
    logits = np.asarray(logits_list, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.size == 0 or labels.size == 0:
        raise ValueError("top1_accuracy needs at least one sample")
    if logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"{logits.shape[0]} logit rows vs {labels.shape[0]} labels")
    pred = np.argmax(logits, axis=-1)
    return float((pred == labels).mean())


def mean_iou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Mean over classes of |pred intersect gt| / |pred union gt|.

    Classes absent from both grids are excluded from the mean; if every class
    is absent the result is 1.0 (two empty labelings agree).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred grid {pred.shape} vs gt grid {gt.shape}")
    if pred.size and (pred.max() >= num_classes or gt.max() >= num_classes):
        raise ValueError("class id out of range")
    ious = []
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, g).sum() / union)
    return float(np.mean(ious)) if ious else 1.0


# -- strategy comparison --------------------------------------------------------


@dataclass(frozen=True)
class StrategyArm:
    """One knowledge-transfer strategy: a stage chain ending in a fine-tune.

    `chain` holds per-stage keyword dicts (role, corpus, epochs, ...) without
    seeds; `run_comparison` injects each sweep seed. A `{"role": "init"}`
    first entry materializes a random-init checkpoint, which is how the
    from-scratch arm satisfies the fine-tune warm-start requirement.
    """

    arm_id: str
    chain: tuple

    def __post_init__(self):
        if not self.chain:
            raise ValueError(f"arm {self.arm_id} has an empty chain")
        roles = [c.get("role") for c in self.chain]
        if roles[-1] != "finetune" or roles.count("finetune") != 1:
            raise ValueError(f"arm {self.arm_id} must end in exactly one finetune stage")


@dataclass
class ComparisonReport:
    """Per-(arm, seed) final metrics plus per-arm medians, spread, and curves."""

    arms: list[str]
    seeds: list[int]
    rows: list[dict] = field(default_factory=list)
    medians: dict = field(default_factory=dict)
    spread: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)   # "arm/seed" -> list of epoch records
    failures: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "arms": self.arms, "seeds": self.seeds, "rows": self.rows,
            "medians": self.medians, "spread": self.spread,
            "curves": self.curves, "failures": self.failures,
        }, sort_keys=True, indent=2)

    def to_text(self) -> str:
        lines = [f"{'arm':24s} {'median':>8s} {'min':>8s} {'max':>8s}  per-seed"]
        for arm in self.arms:
            vals = [r["metric"] for r in self.rows if r["arm"] == arm]
            per_seed = " ".join(f"{v:.3f}" for v in vals)
            if vals:
                lines.append(f"{arm:24s} {self.medians[arm]:8.3f} "
                             f"{min(vals):8.3f} {max(vals):8.3f}  {per_seed}")
            else:
                lines.append(f"{arm:24s} {'-':>8s} {'-':>8s} {'-':>8s}  (failed)")
        return "\n".join(lines) + "\n"


def _stage_key(stage_dict: dict, model_dict: dict, parent_key: str) -> str:
    blob = json.dumps({"stage": stage_dict, "model": model_dict, "parent": parent_key},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _run_chain(arm: StrategyArm, seed: int, config: VitConfig, out_dir: str,
               final_eval=None) -> dict:
    """Execute one arm for one seed, reusing cached stage runs; returns row info."""
    parent_key = ""
    ckpt_path = None
    last_run_dir = None
    for i, template in enumerate(arm.chain):
        spec = dict(template)
        role = spec.pop("role")
        if role == "init":
            key = _stage_key({"role": "init", "seed": seed}, config.to_dict(), "")
            run_dir = os.path.join(out_dir, "runs", key)
            os.makedirs(run_dir, exist_ok=True)
            path = os.path.join(run_dir, "checkpoint.ckpt")
            if not os.path.exists(path):
                materialize_init_checkpoint(config, seed, path)
            ckpt_path, parent_key, last_run_dir = path, key, run_dir
            continue
        spec["seed"] = seed
        spec["stage_id"] = f"{role}:{i}:seed{seed}"
        if role in ("continue", "finetune"):
            spec["init_checkpoint"] = ckpt_path
        stage = StageConfig(role=role, **spec)
        key = _stage_key(stage.to_dict(), config.to_dict(), parent_key)
        run_dir = os.path.join(out_dir, "runs", key)
        path = os.path.join(run_dir, "checkpoint.ckpt")
        if not os.path.exists(path):
            if role in ("pretrain", "continue"):
                before = LABEL_READS.count
                run_stage(stage, config, run_dir)
                if LABEL_READS.count != before:
                    raise RuntimeError(
                        f"label read during self-supervised stage {stage.stage_id}")
            else:
                run_stage(stage, config, run_dir)
        ckpt_path, parent_key, last_run_dir = path, key, run_dir
    epochs = []
    with open(os.path.join(last_run_dir, "epochs.jsonl")) as f:
        for line in f:
            epochs.append(json.loads(line))
    final_metric = epochs[-1]["metric"]
    if final_eval is not None:
        from .pipeline import evaluate_top1
        params = load_checkpoint(ckpt_path).model_params(requires_grad=False)
        final_metric = evaluate_top1(params, config, final_eval)
    return {"arm": arm.arm_id, "seed": seed, "metric": final_metric,
            "curve": epochs, "checkpoint": ckpt_path}


def run_comparison(arms: list[StrategyArm], seeds: list[int], config: VitConfig,
                   out_dir, jobs: int = 1,
                   final_eval_corpus: str | None = None) -> ComparisonReport:
    """Run every (arm, seed) pipeline and aggregate a ComparisonReport.

    Stages with identical resolved configs and ancestry share one run
    directory, so arms with a common prefix (the same stage-1 pretrain, say)
    execute it once per seed. Failures are recorded per (arm, seed); the
    report still covers completed arms. Reference mode forces jobs=1.

    When `final_eval_corpus` is given, each arm's reported metric is the
    final model's Top-1 on that (typically larger) labeled corpus; the
    per-epoch curves keep using each fine-tune stage's own eval split.
    """
    os.makedirs(out_dir, exist_ok=True)
    report = ComparisonReport(arms=[a.arm_id for a in arms], seeds=list(seeds))
    tasks = [(arm, seed) for arm in arms for seed in seeds]
    if reference_mode():
        jobs = 1
    final_eval = None
    if final_eval_corpus is not None:
        from .data import load_corpus
        final_eval = load_corpus(final_eval_corpus)

    def attempt(arm, seed):
        try:
            return _run_chain(arm, seed, config, os.fspath(out_dir), final_eval)
        except Exception as exc:  # per-arm failures must not sink the report
            return {"arm": arm.arm_id, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(lambda t: attempt(*t), tasks))
    else:
        outcomes = [attempt(*t) for t in tasks]

    for result in outcomes:
        if "error" in result:
            report.failures.append(result)
            continue
        report.rows.append({"arm": result["arm"], "seed": result["seed"],
                            "metric": result["metric"]})
        report.curves[f"{result['arm']}/{result['seed']}"] = result["curve"]
    for arm in report.arms:
        vals = [r["metric"] for r in report.rows if r["arm"] == arm]
        if vals:
            report.medians[arm] = float(np.median(vals))
            report.spread[arm] = [float(min(vals)), float(max(vals))]
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        f.write(report.to_json())
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write(report.to_text())
    return report


# -- figure-style emitters -------------------------------------------------------


def render_reconstruction_panel(checkpoint: Checkpoint, images: np.ndarray,
                                config: VitConfig, out_path, mask_ratio: float = 0.75,
                                seed: int = 0) -> np.ndarray:
    """Original | masked | reconstruction panel, one row per image, PPM output.

    Masked cells in the middle column are filled with uniform gray 128.
    The right column pastes visible patches straight from the original and
    shows model output only where pixels were hidden. Columns are separated
    by 2-pixel white gutters; rows stack without gutters.
    """
    if not checkpoint.has_prefix("decoder."):
        raise ValueError("reconstruction needs a pretraining checkpoint with a decoder")
    params = checkpoint.model_params(requires_grad=False)
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    rng = Rng(seed).substream("panel")
    side = config.image_size
    g, p = config.grid, config.patch_size
    rows = []
    for img in images:
        plan = sample_mask(config.num_tokens, mask_ratio, rng)
        recon = masked_autoencode(img[None], params, config, [plan]).data[0]
        recon = np.clip(recon, 0.0, 1.0)
        cell = np.zeros(config.num_tokens, dtype=bool)
        cell[plan.masked] = True
        pix = np.kron(cell.reshape(g, g), np.ones((p, p), dtype=bool))[..., None]
        pix = np.broadcast_to(pix, img.shape)
        masked_col = np.where(pix, MASK_FILL / 255.0, img)
        recon_col = np.where(pix, recon, img)
        gutter = np.ones((side, GUTTER, 3), dtype=np.float32)
        rows.append(np.concatenate([img, gutter, masked_col, gutter, recon_col], axis=1))
    panel = np.concatenate(rows, axis=0)
    write_ppm(out_path, panel)
    return image_to_bytes(panel)


def _heat_ramp() -> np.ndarray:
    """Monotone 256-entry color ramp, dark blue -> red; index grows with score."""
    t = np.linspace(0.0, 1.0, RAMP_LEN)
    r = np.clip(1.5 * t, 0, 1)
    g = np.clip(1.5 * t - 0.5, 0, 0.6)
    b = np.clip(1.0 - 1.8 * t, 0, 1) * 0.8 + 0.2 * (1 - t)
    return np.stack([r, g, b], axis=1).astype(np.float32)


def attention_ramp_index(scores: np.ndarray) -> np.ndarray:
    """Map attention scores to ramp indices, absolute scale.

    index = round(clip(N * score / 2, 0, 1) * (RAMP_LEN - 1)): a uniform map
    (score 1/N everywhere) sits mid-ramp, and the map is monotone in score.
    """
    n = scores.size
    norm = np.clip(scores * n / 2.0, 0.0, 1.0)
    return np.rint(norm * (RAMP_LEN - 1)).astype(np.int64)


def render_attention_map(checkpoint: Checkpoint, image: np.ndarray, ref_patch: int,
                         config: VitConfig, out_path) -> np.ndarray:
    """Input and its attention heat map side by side, PPM output.

    The reference patch's last-layer, head-averaged score row is upsampled
    nearest-neighbor to image size and colored through a monotone ramp (see
    attention_ramp_index).
    """
    params = checkpoint.model_params(requires_grad=False)
    image = np.asarray(image, dtype=np.float32)
    amap = extract_attention_map(image, ref_patch, params, config)
    idx = attention_ramp_index(amap)
    heat_cells = _heat_ramp()[idx]                     # (g, g, 3)
    heat = np.repeat(np.repeat(heat_cells, config.patch_size, axis=0),
                     config.patch_size, axis=1)
    side = config.image_size
    gutter = np.ones((side, GUTTER, 3), dtype=np.float32)
    panel = np.concatenate([image, gutter, heat], axis=1)
    write_ppm(out_path, panel)
    return image_to_bytes(panel)


def export_curves(streams: list[dict], out_path) -> int:
    """Write aligned CSV (epoch, arm, seed, metric) from per-epoch JSONL streams.

    Each stream is {"arm": ..., "seed": ..., "path": epochs.jsonl}. Rows
    carry the epoch's test metric when present, else the mean loss. Returns
    the row count; malformed stream lines raise with their line number.
    """
    rows = []
    for stream in streams:
        with open(stream["path"]) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    epoch = rec["epoch"]
                    metric = rec["metric"] if "metric" in rec else rec["mean_loss"]
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ValueError(
                        f"{stream['path']}: malformed metrics line {lineno}: {exc}") from exc
                rows.append((epoch, stream["arm"], stream["seed"], metric))
    with open(out_path, "w") as f:
        f.write("epoch,arm,seed,metric\n")
        for epoch, arm, seed, metric in rows:
            f.write(f"{epoch},{arm},{seed},{metric!r}\n")
    return len(rows)
