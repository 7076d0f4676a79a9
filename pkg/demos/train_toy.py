"""
A tiny adversarial training run
===============================

Trains a 2D generator for one epoch on a very small synthetic dataset,
then inflates it to 3 slices and fine-tunes.  The transferred run starts
exactly where the 2D run ended.  Sizes are kept small so this runs in a
couple of minutes on a CPU; the defaults in TrainConfig match the full setup.
"""

import torch

from cpce.data import DataConfig, make_dataset
from cpce.losses import random_feature_extractor
from cpce.trainer import TrainConfig, train

torch.set_num_threads(1)

data = make_dataset(DataConfig(n_volumes=2, n_val_volumes=1, n_slices=4, size=64,
                               train_patches=512, val_patches=64, seed=5))
ext = random_feature_extractor(0)
cfg = TrainConfig(epochs=1, batch_size=64, eval_batch=64)

state2d = train(cfg, data, ext, out_dir="demo_out/run2d", progress=print)
for r in state2d.history:
    print("2D", r)

state3d = train(cfg, data, ext, out_dir="demo_out/run3d", progress=print,
                init=("from_checkpoint", "demo_out/run2d/epoch_001.cpce", 3))
for r in state3d.history:
    print("3D", r)
