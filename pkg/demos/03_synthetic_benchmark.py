"""Plant an order-2 rule in synthetic sequences and see which models pick it up.

The default run is small enough for a minute on a laptop; pass --full for
the acceptance-scale protocol (1000 users, 200 items, 5 seeds).
"""

import argparse

import numpy as np

from refinerec.backbone import ModelConfig
from refinerec.bench import SYNTH_MODEL, SYNTH_TRAIN, synthetic_split
from refinerec.evaluation import PopularityModel, evaluate, format_table
from refinerec.train import TrainConfig, fit

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
args = parser.parse_args()

if args.full:
    seeds, data, train = range(5), {}, SYNTH_TRAIN
else:
    seeds, data, train = [0], {"num_users": 300, "num_items": 60}, dict(SYNTH_TRAIN, max_epochs=40)

scores = {"popularity": [], "none": [], "simp": []}
for seed in seeds:
    split = synthetic_split(seed, SYNTH_MODEL["n"], **data)
    reports = {"popularity": evaluate(PopularityModel(split), split, "test", (5, 10))}
    for mech in ("none", "simp"):
        cfg = ModelConfig(mechanism=mech, seed=seed, **SYNTH_MODEL)
        res = fit(cfg, split, TrainConfig(**train))
        reports[mech] = evaluate(res.model, split, "test", (5, 10))
        print(f"seed {seed} {mech}: stopped at epoch {res.state.epoch}, best {res.state.best_epoch}")
    print(format_table(reports, (5, 10)))
    for name, rep in reports.items():
        scores[name].append(rep.ndcg[5])

print("\nmean test NDCG@5:", {k: round(float(np.mean(v)), 4) for k, v in scores.items()})
