"""Synthetic scenes, their captions, and the blob detector that grades generated images."""
from pathlib import Path

import numpy as np

from attnguide import scenes
from attnguide.imageio import write_image

out = Path(__file__).parent / "out" / "scenes"
out.mkdir(parents=True, exist_ok=True)

rng = np.random.default_rng(3)
for i in range(6):
    scene, prompt = scenes.generate_scene(rng)
    img = scenes.render(scene)
    write_image(img, out / f"scene_{i}.ppm")
    det = scenes.detect(img)
    print(f"{prompt.text():32s} subjects at {prompt.subject_positions}  ->",
          [(b.color, b.shape, tuple(round(c, 2) for c in b.centroid)) for b in det.blobs])

# render -> detect on a larger batch
hits = total = 0
for _ in range(500):
    scene, _ = scenes.generate_scene(rng)
    m = scenes.match_objects(scene, scenes.detect(scenes.render(scene)))
    hits += sum(m)
    total += len(m)
print(f"round trip: {hits}/{total} objects recovered")

# noise is what a sampler sees at t ~ T; the detector should find nothing
print("blobs in pure noise:", len(scenes.detect(np.clip(rng.normal(size=(32, 32, 3)), -1, 1)).blobs))
print("images in", out)
