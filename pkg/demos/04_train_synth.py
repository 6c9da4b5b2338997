"""
Training on the synthetic task
==============================

Three template classes buried in Gaussian noise, 16 x 16 grayscale. A single
binary tentacle falls well short of the nearest-template ceiling; adding
tentacles closes part of the gap. Takes about a minute on one core.
"""

# %%
from importlib import resources

from tentaclenet.data import nearest_template_accuracy, synth_dataset, synth_templates
from tentaclenet.model import NetworkSpec, build_tentaclenet
from tentaclenet.train import TrainConfig, evaluate, train

ds = synth_dataset(seed=1)
print("nearest-template ceiling:", nearest_template_accuracy(ds, synth_templates(1, 3, 1, 16, 16)))
x, y = ds.subset("train")
xt, yt = ds.subset("test")
spec = NetworkSpec.load(resources.files("tentaclenet") / "specs" / "synth_tiny.json")
cfg = TrainConfig(epochs=8, lr=0.1, patience=3, seed=1)

# %%
for n in (1, 4):
    model, hist = train(build_tentaclenet(spec, n, 1), x, y, cfg)
    last = hist.rows[-1]
    print(f"n={n}: test acc {evaluate(model, xt, yt).accuracy:.1f}%  "
          f"(final lr {last['lr']:.3g}, val loss {last['val_loss']:.3f})")
