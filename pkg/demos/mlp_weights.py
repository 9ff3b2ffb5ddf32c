"""Write a random MLP predictor to disk, load it back and predict one step."""
import sys
import tempfile
from pathlib import Path

import numpy as np

from admm_nnmpc.predictor import (MLPPredictor, ObservationBuffer, load_mlp_weights,
                                  predict_one, save_mlp_weights)

path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "mlp.bin"
net = MLPPredictor.random(4, seed=0, weight_scale=0.05)
save_mlp_weights(path, net)
back = load_mlp_weights(path)
buf = ObservationBuffer.from_velocities([0, 0], [8, 0], [[x, 3.7] for x in (-8, -3, 3, 8)],
                                        np.tile([8.0, 0.0], (4, 1)), 0.25)
print(f"{path} ({path.stat().st_size} bytes)")
print("next positions:\n", predict_one(back, buf))
