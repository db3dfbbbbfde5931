"""A small head-to-head of the three key-side position embeddings.

Same data, same seed, same budget; only ``pe.variant`` changes. The scale here
is deliberately small (under a minute) so the numbers are noisy. The
acceptance suite runs the full three-seed version.

    python demos/compare_embeddings.py
"""
from opendet import pipeline, synthscene as ss
from opendet.config import RunConfig

base = RunConfig(data_n_train=60, data_n_eval=20, scene_height=8, scene_width=16, train_epochs=1)
scfg = pipeline.scene_config(base)
data = ss.dataset_from_scenes(scfg, ss.generate_dataset(scfg, base.seed, 80))

print(f"{'variant':8} {'TE (m)':>8} {'AP':>7} {'surf L1':>8} {'obj L1':>8}")
for variant in ("ray", "point", "object"):
    cfg = base.replace(pe_variant=variant)
    params, _ = pipeline.train(cfg, data)
    rep = pipeline.evaluate(params, cfg, data)
    print(f"{variant:8} {rep.get(variant, 'translation_error'):8.2f} {rep.get(variant, 'center_ap'):7.3f} "
          f"{rep.get(variant, 'surface_depth_l1'):8.2f} {rep.get(variant, 'objectwise_depth_l1'):8.2f}")
