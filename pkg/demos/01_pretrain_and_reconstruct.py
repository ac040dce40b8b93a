"""Pretrain a tiny masked autoencoder and render a reconstruction panel.

Generates a small procedural corpus, runs a short masked-image-modeling
stage, and writes original | masked | reconstructed panels you can open
with any PPM viewer. Expect the loss to fall steadily and reconstructions
to sharpen with more epochs.

Run:  python demos/01_pretrain_and_reconstruct.py  (writes under demos/out/)
"""

import json
import os

from mimcspt.checkpoint import load_checkpoint
from mimcspt.data import load_corpus
from mimcspt.evaluation import render_reconstruction_panel
from mimcspt.model import vit_nano
from mimcspt.pipeline import StageConfig, run_stage
from mimcspt.synth import DomainSpec, gen_synthetic_domain

OUT = os.path.join(os.path.dirname(__file__), "out", "reconstruct")
os.makedirs(OUT, exist_ok=True)

# a small canonical-domain corpus: upright shapes on smooth backgrounds
spec = DomainSpec(kind="canonical", classes=4, image_size=32)
manifest = gen_synthetic_domain(spec, 128, seed=7, out_dir=os.path.join(OUT, "corpus"),
                                corpus_id="demo", labeled=False)

stage = StageConfig(role="pretrain", corpus=[manifest], epochs=40, batch_size=32,
                    warmup_epochs=2, seed=0, stage_id="demo-pretrain")
ckpt_path = run_stage(stage, vit_nano(), os.path.join(OUT, "run"))

epochs = [json.loads(line) for line in open(os.path.join(OUT, "run", "epochs.jsonl"))]
print(f"masked-L1 loss: epoch 0 = {epochs[0]['mean_loss']:.4f}, "
      f"epoch {len(epochs)-1} = {epochs[-1]['mean_loss']:.4f}")

corpus = load_corpus(manifest)
panel_path = os.path.join(OUT, "panel.ppm")
render_reconstruction_panel(load_checkpoint(ckpt_path), corpus.images[:4],
                            vit_nano(), panel_path, seed=3)
print(f"wrote {panel_path} (columns: original | masked | reconstruction)")
