"""Probe what the encoder attends to, before and after pretraining.

Renders the last-layer attention row of a reference patch as a heat map for
(a) a freshly initialized encoder and (b) the same encoder after masked
reconstruction pretraining. The fresh map is near-uniform; the pretrained
one concentrates on the object.

Run:  python demos/02_attention_probe.py
"""

import os

import numpy as np

from mimcspt.checkpoint import load_checkpoint
from mimcspt.data import load_corpus
from mimcspt.evaluation import render_attention_map
from mimcspt.model import extract_attention_map, vit_nano
from mimcspt.pipeline import StageConfig, materialize_init_checkpoint, run_stage
from mimcspt.synth import DomainSpec, gen_synthetic_domain

OUT = os.path.join(os.path.dirname(__file__), "out", "attention")
os.makedirs(OUT, exist_ok=True)
nano = vit_nano()

spec = DomainSpec(kind="canonical", classes=4, image_size=32)
manifest = gen_synthetic_domain(spec, 128, seed=11, out_dir=os.path.join(OUT, "corpus"),
                                corpus_id="demo", labeled=False)
image = load_corpus(manifest).images[0]

fresh_path = materialize_init_checkpoint(nano, 0, os.path.join(OUT, "fresh.ckpt"))
fresh = load_checkpoint(fresh_path)
stage = StageConfig(role="pretrain", corpus=[manifest], epochs=40, batch_size=32,
                    warmup_epochs=2, seed=0, stage_id="demo-attn")
trained = load_checkpoint(run_stage(stage, nano, os.path.join(OUT, "run")))

ref_patch = nano.num_tokens // 2 + nano.grid // 2   # near the image center
for tag, ck in (("fresh", fresh), ("trained", trained)):
    amap = extract_attention_map(image, ref_patch, ck.model_params(False), nano)
    print(f"{tag:8s} attention: max cell {amap.max():.4f} "
          f"(uniform would be {1 / nano.num_tokens:.4f})")
    render_attention_map(ck, image, ref_patch, nano,
                         os.path.join(OUT, f"attn_{tag}.ppm"))
print(f"wrote heat maps under {OUT}")
