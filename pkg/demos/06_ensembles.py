"""
Bagging and boosting baselines
==============================

Independently trained single-tentacle BNNs, fused by averaged softmax (or
vote) for bagging and by SAMME weights for boosting, compared against one
TentacleNet with the same member count.
"""

# %%
from importlib import resources

import numpy as np

from tentaclenet.data import synth_dataset
from tentaclenet.ensemble import (
    bagging_predict, bagging_train, boost_predict, boost_train, compare_report, samme_alpha,
)
from tentaclenet.model import NetworkSpec, build_tentaclenet, footprint
from tentaclenet.train import TrainConfig, evaluate, train

print("SAMME alpha, err=0.25, two classes:", samme_alpha(0.25, 2))

ds = synth_dataset(seed=2, n_train=1200, n_test=300)
x, y = ds.subset("train")
xt, yt = ds.subset("test")
spec = NetworkSpec.load(resources.files("tentaclenet") / "specs" / "synth_tiny.json")
cfg = TrainConfig(epochs=6, lr=0.1, patience=3)

# %%
bag = bagging_train(spec, x, y, 3, cfg, seed=2)
boost = boost_train(spec, x, y, 3, cfg, seed=2)
tnet, _ = train(build_tentaclenet(spec, 3, 2), x, y, cfg)
fp32, _ = train(build_tentaclenet(spec, 1, 2, binary=False), x, y, cfg)
fp32_acc = evaluate(fp32, xt, yt).accuracy
print("boosting alphas:", np.round(boost.alphas, 3))

rows = compare_report(fp32_acc, [
    ("BENN-bagging", 100 * np.mean(bagging_predict(bag, xt) == yt), footprint(bag).kb, 3),
    ("BENN-boosting", 100 * np.mean(boost_predict(boost, xt) == yt), footprint(boost).kb, len(boost.members)),
    ("TentacleNet(3)", evaluate(tnet, xt, yt).accuracy, footprint(tnet).kb, 3),
], benchmark="synth")
print(f"fp32 reference: {fp32_acc:.1f}%")
for r in rows:
    print(f"{r['template']:<16} delta {r['delta_pct']:+6.1f}  members {r['members']}  "
          f"{r['size_kb']:.2f} kB  savings {r['savings_pct']}")
