"""Cross-category protocol: train on base shapes, recall novel ones.

Predictions that land on base objects are removed before the top-k budget,
so they cannot crowd out novel objects.
"""
import numpy as np

from owseg.data import GroundTruthInstance
from owseg.evaluation import EvalConfig, Prediction, average_recall


def gt(box, is_base):
    return GroundTruthInstance(np.array(box, float), None, 1, is_base)


base, novel = gt([0, 0, 10, 10], True), gt([20, 0, 30, 10], False)
on_base, on_novel = Prediction(np.array([0, 0, 10, 10.0])), Prediction(np.array([20, 0, 30, 10.0]))

for order in ([on_base, on_novel], [on_novel, on_base]):
    names = ["base" if p is on_base else "novel" for p in order]
    plain = average_recall([(order, [novel])], EvalConfig(budgets=(1,))).ar[1]
    cross = average_recall([(order, [base, novel])],
                           EvalConfig(budgets=(1,), protocol="cross_category")).ar[1]
    print(f"ranking {names}: novel AR@1 without filter {plain}, with filter {cross}")

# The same protocol end to end through the CLI:
#   owseg gen-data --out data --novel ring,cross
#   owseg train --data data --epochs 50 --out run
#   owseg eval --run run --data data --protocol cross-category
