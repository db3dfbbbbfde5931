"""Which pixels does a query look at?

Memorises one single-box scene for a few seconds, then prints the last-layer
cross-attention of the query matched to the box over every camera, next to the
ground-truth object mask.

    python demos/attention_map.py
"""
import numpy as np

from opendet import pipeline, synthscene as ss
from opendet.config import RunConfig

cfg = RunConfig(data_n_train=8, data_n_eval=1, scene_min_boxes=1, scene_max_boxes=1,
                scene_height=8, scene_width=16, decoder_queries=8, train_epochs=10)
scfg = pipeline.scene_config(cfg)
scene = ss.generate_dataset(scfg, 5, 1, workers=1)[0]
data = ss.dataset_from_scenes(scfg, [scene] * 9)
params, losses = pipeline.train(cfg, data)
print(f"loss {losses[0][0]:.2f} -> {losses[-1][0]:.2f} after {len(losses)} steps")

res = pipeline.evaluate_scene(params, scene, 0, cfg, data.perception_range)
pred, gt = res.translation[0]
best = next(i for i, d in enumerate(res.detections) if np.array_equal(d[2], pred))
print(f"query {best}: center {np.round(pred, 2)} vs truth {np.round(gt, 2)} "
      f"({np.linalg.norm(pred - gt):.2f} m off)")

h, w = scfg.height, scfg.width
weights = res.attention[best].reshape(scfg.n_views, h, w)
peak = weights.max()
ramp = " .:-=+*#%@"
for view in range(scfg.n_views):
    mask = scene.views[1][view].assign_mask
    if not mask.any() and weights[view].max() < 0.05 * peak:
        continue
    print(f"\ncamera {view}: attention (left) and object pixels (right), {weights[view].sum():.1%} of the mass")
    for r in range(h):
        att = "".join(ramp[min(int(x / peak * len(ramp)), len(ramp) - 1)] for x in weights[view, r])
        obj = "".join("#" if m else "." for m in mask[r])
        print(f"|{att}|  |{obj}|")
