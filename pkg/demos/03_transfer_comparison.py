"""A miniature knowledge-transfer comparison: scratch vs. pretraining strategies.

Builds two tiny domains (canonical eye-level shapes vs. rotated overhead
shapes), then fine-tunes three models on a handful of labeled overhead
images: from scratch, after pretraining on the canonical domain, and after
consecutive pretraining (canonical, then further pretraining on unlabeled
overhead data). Exports the per-epoch accuracy curves as CSV.

This is a scaled-down sketch; the full benchmark lives in
mimcspt.benchmark and runs in tests/test_acceptance.py. Expect noisy
numbers at this size, with pretrained arms ahead of scratch.

Run:  python demos/03_transfer_comparison.py   (a few minutes on a laptop)
"""

import os

from mimcspt.benchmark import build_benchmark_corpora
from mimcspt.evaluation import StrategyArm, export_curves, run_comparison
from mimcspt.model import VitConfig
from mimcspt.pipeline import HeadSpec

OUT = os.path.join(os.path.dirname(__file__), "out", "comparison")
os.makedirs(OUT, exist_ok=True)

config = VitConfig(image_size=32, patch_size=4, dim=64, depth=4, heads=4,
                   decoder_dim=32, decoder_depth=2)
manifests = build_benchmark_corpora(os.path.join(OUT, "corpora"),
                                    pretrain_count=256, finetune_count=64,
                                    test_count=128)

finetune = {"role": "finetune", "corpus": [manifests["b_finetune"]], "epochs": 60,
            "batch_size": 16, "warmup_epochs": 0, "layer_lr_decay": 0.5,
            "head": HeadSpec("classification", 4), "scale_range": (0.6, 1.0),
            "eval_corpus": manifests["b_test"]}
stage1 = {"role": "pretrain", "corpus": [manifests["a_pretrain"]], "epochs": 40,
          "batch_size": 64, "warmup_epochs": 2}
stage2 = {"role": "continue", "corpus": [manifests["b_pretrain"]], "epochs": 40,
          "batch_size": 64, "warmup_epochs": 2}

arms = [
    StrategyArm("scratch", ({"role": "init"}, dict(finetune))),
    StrategyArm("ssp", (dict(stage1), dict(finetune))),
    StrategyArm("cspt", (dict(stage1), dict(stage2), dict(finetune))),
]
report = run_comparison(arms, seeds=[0, 1], config=config, out_dir=OUT)
print(report.to_text())

# flatten the per-arm accuracy curves into one CSV for plotting
csv_path = os.path.join(OUT, "curves.csv")
with open(csv_path, "w") as f:
    f.write("epoch,arm,seed,metric\n")
    for key, curve in sorted(report.curves.items()):
        arm, seed = key.rsplit("/", 1)
        for rec in curve:
            f.write(f"{rec['epoch']},{arm},{seed},{rec.get('metric', '')}\n")
print(f"wrote {csv_path}")
