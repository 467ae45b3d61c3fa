"""Closed loop: learn augmentations against the handmade distribution, then train a decoder on them.

The default is a short run that finishes in well under a minute.  With
``--full`` it uses the desk schedule (30 epochs, several minutes) and the
decoder trained on generated tags beats the one trained on clean renders.

    python3 demos/04_closed_loop.py [--full] [--out DIR]
"""
import argparse
import dataclasses
from pathlib import Path

import numpy as np

from rendersynth import adversarial, storage
from rendersynth.datasets import generate_dataset
from rendersynth.evaluation import evaluate, train_reference_decoder
from rendersynth.tag_model import EVAL_POSES

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
parser.add_argument("--out", default="demo_out/04")
args = parser.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

cfg = adversarial.TrainConfig()
if not args.full:
    cfg = dataclasses.replace(cfg, epochs=3, steps_per_epoch=20)
state = adversarial.train(cfg, log=print)
adversarial.save_checkpoint(out / "checkpoint.npz", state)

rng = np.random.default_rng(0)
labels = adversarial.sample_labels(rng, 8, cfg.resolution)
fakes = adversarial.generate(state, labels, rng)
storage.write_png(out / "generated.png", np.concatenate(list(fakes), axis=1))

n = 4000 if args.full else 1000
kw = dict(resolution=cfg.resolution, poses=EVAL_POSES)
test = generate_dataset("hm_3d", n // 2, 12, **kw)
for variant in ("clean", "rendergan"):
    train = generate_dataset(variant, n, 11, state=state if variant == "rendergan" else None, **kw)
    print(f"decoder trained on {n} {variant:<9s} tags: MHD {evaluate(train_reference_decoder(train), test):.3f} "
          f"on held-out handmade tags")
print(f"wrote {out / 'checkpoint.npz'} and {out / 'generated.png'}")
if not args.full:
    print("this short run stops while the clip penalty is still large, so its generated tags are not yet "
          "realistic; rerun with --full to see them overtake clean renders")
