"""Train briefly on synthetic data, then dump one user's attention maps."""

import sys
import tempfile
from pathlib import Path

import numpy as np

from refinerec.backbone import ModelConfig
from refinerec.bench import synthetic_split
from refinerec.export import default_user, export_attention, read_matrix
from refinerec.train import TrainConfig, fit

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="attention-"))
split = synthetic_split(0, 20, num_users=200, num_items=40, seq_len=30)
model = fit(ModelConfig(mechanism="simp", d=16, n=20, layers=1, learning_rate=3e-3), split,
            TrainConfig(batch_size=64, max_epochs=10, patience=5)).model

user = default_user(split, 15)
paths = export_attention(model, split, user, out, last=15)
W = read_matrix(paths["weights.csv"])
print(f"user {user}: wrote {len(paths)} files to {out}")
print("row sums:", np.round(W.sum(axis=1), 12))
print("strongest attended offset per query row:", [k - int(np.argmax(W[k])) for k in range(15)])
