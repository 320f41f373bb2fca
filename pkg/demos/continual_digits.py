"""Permuted-digits continual learning with and without posterior chaining.

Three tasks share the 8x8 digits but apply a different fixed pixel
permutation. With chaining, the posterior after each task is the prior for
the next, which keeps task 1 from being overwritten.

    python3 demos/continual_digits.py [seed]
"""
import sys

import numpy as np

from vogn import Hyperparams, RngStream, mlp
from vogn.continual import make_tasks, run_continual
from vogn.data import load_digits

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
train_set, test_set = load_digits().split(360, RngStream(seed, 9))
tasks = make_tasks(train_set, test_set, 3, seed)
hp = Hyperparams(lr=0.05, beta1=0.0, beta2=0.1, prior_prec=1.0)

np.set_printoptions(precision=3, suppress=True)
for chain in (True, False):
    res = run_continual(tasks, hp, lambda rng: mlp([64, 50, 50, 10]).init_params(rng), epochs=20,
                        batch_size=64, seed=seed, chain=chain, test_samples=20, rng_mode="worker")
    print("chained" if chain else "independent")
    print("  accuracy[t, k] = accuracy on task k after training task t")
    print(res.accuracy)
