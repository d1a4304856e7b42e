"""Overfit the box variant on 16 synthetic images, then measure class-agnostic AR.

Takes a few minutes on a laptop CPU. Pass a step count to shorten it:

    python demos/03_overfit_and_evaluate.py 300
"""
import sys
import time

from owseg.data import SceneSpec, generate_synthetic
from owseg.evaluation import EvalConfig
from owseg.model import ModelConfig, QueryModel
from owseg.trainer import evaluate_model, preset, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
ds = generate_synthetic(SceneSpec(seed=0), 16)
cfg = ModelConfig(num_queries=20, num_stages=3, variant="box", mask_resolution=14)

before = evaluate_model(QueryModel(cfg), ds, EvalConfig(budgets=(10, 20)))
print("untrained box AR@20", round(before.ar[20], 3))

# 16 images at batch 8 is two steps per epoch; the 1x schedule is stretched to match.
t0 = time.perf_counter()
res = train(cfg, preset("1x", epochs=steps // 2), ds)
print(f"{len(res.metrics)} steps in {time.perf_counter() - t0:.0f}s, "
      f"loss {res.metrics[0]['total']:.2f} -> {res.metrics[-1]['total']:.2f}")

for mode in ("box", "mask"):
    r = evaluate_model(res.model, ds, EvalConfig(budgets=(10, 20), mode=mode))
    print(f"{mode:4s} AR@10 {r.ar[10]:.3f} AR@20 {r.ar[20]:.3f} AR_0.5 {r.ar_50:.3f} "
          f"AR_0.75 {r.ar_75:.3f}")
