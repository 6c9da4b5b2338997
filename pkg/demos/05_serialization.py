"""
Saving and loading models
=========================

The file holds packed weights, alphas and thresholds, not the float master
weights, guarded by a CRC32 trailer.
"""

# %%
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np

from tentaclenet.layers import network_forward
from tentaclenet.model import NetworkSpec, build_tentaclenet
from tentaclenet.modelio import ModelFormatError, load_model, save_model

spec = NetworkSpec.load(resources.files("tentaclenet") / "specs" / "synth_tiny.json")
model = build_tentaclenet(spec, 3, 0).finalize()

with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "m.tnet"
    save_model(model, path)
    print("file size:", path.stat().st_size, "bytes")
    again = load_model(path)
    x = np.random.default_rng(0).normal(size=(5, 1, 16, 16)).astype(np.float32)
    print("identical logits:", np.array_equal(network_forward(model, x), network_forward(again, x)))

    # %% a flipped bit is caught
    data = bytearray(path.read_bytes())
    data[100] ^= 1
    path.write_bytes(bytes(data))
    try:
        load_model(path)
    except ModelFormatError as exc:
        print(type(exc).__name__, exc.code, exc)
