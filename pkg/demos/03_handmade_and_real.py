"""Handmade pyramid augmentations and the augmentation applied to real images.

    python3 demos/03_handmade_and_real.py [--out DIR]
"""
import argparse
from pathlib import Path

import numpy as np

from rendersynth import pyramid_aug, real_aug, storage
from rendersynth.datasets import make_sample

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="demo_out/03")
out = Path(parser.parse_args().out)
out.mkdir(parents=True, exist_ok=True)

# A pyramid sums Gaussian noise at every octave: the weights set its spectrum.
rng = np.random.default_rng(0)
for name, w in [("coarse", (1, 0.5, 0.25, 0, 0, 0, 0)), ("fine", (0, 0, 0, 0, 0.25, 0.5, 1))]:
    img = pyramid_aug.sample_pyramid(w, rng, n=500, mode="nearest")
    print(f"{name:<6s} pyramid: mean {img.mean():+.3f}, pixel variance {img.var():.3f} "
          f"(sum of squared weights {np.sum(np.square(w)):.3f})")
    storage.write_png(out / f"pyramid_{name}.png", np.clip(img[0] / 2, -1, 1))

params = pyramid_aug.load_handmade_params()
print(f"packaged handmade parameters: lighting weights {params.lighting_weights}")
for index in range(3):
    sample = make_sample("hm_3d", seed=5, index=index, resolution=64)
    storage.write_png(out / f"hm_3d_{index}.png", sample.image)

p = real_aug.sample_real_aug(np.random.default_rng(1))
print(f"real-image augmentation draw: rotation {p.rotation:.2f} rad, scale {p.scale:.2f}, shear {p.shear:+.2f}, "
      f"shift ({p.tx:+.1f}, {p.ty:+.1f}) px, s {p.s:.2f}, t {p.t:+.2f}, noise {p.eps:.3f}")
print(f"expected noise level {real_aug.expected_noise_level():.4f}")
sample = make_sample("realaug", seed=5, index=0, resolution=64)
storage.write_png(out / "realaug_0.png", sample.image)
print(f"wrote images to {out}")
