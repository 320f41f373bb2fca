"""VOGN versus Adam on a small two-moons problem.

Trains both optimizers from the same initialisation, then compares test
accuracy, calibration and how uncertain each model is far from the data.

    python3 demos/two_moons_uncertainty.py
"""
import numpy as np

from vogn import Hyperparams, RngStream, WorkerPlan, make_synthetic, mlp, predict_mc, train
from vogn.metrics import ece, nll, predictive_entropy

SEED = 0

train_set = make_synthetic("two-moons", 60, 0.3, SEED)
test_set = make_synthetic("two-moons", 2000, 0.3, 1000 + SEED)

# a ring of points well away from both moons
angle = np.linspace(0, 2 * np.pi, 200, endpoint=False)
far = np.c_[6 * np.cos(angle), 6 * np.sin(angle)]

runs = {
    "vogn": Hyperparams(lr=0.01, beta1=0.9, beta2=0.1, prior_prec=1.0),
    # adaptive-scaling Adam: beta1/beta2 weight the new gradient, not the old average
    "adam": Hyperparams(lr=0.01, beta1=0.1, beta2=0.001),
}

for name, hp in runs.items():
    model = mlp([2, 64, 2]).init_params(RngStream(SEED, 1))
    result = train(model, train_set, hp, name, epochs=400, batch_size=32, seed=SEED, eval_train=False,
                   plan=WorkerPlan(1, 1, "example", SEED))
    post = result.posterior()
    p_test = predict_mc(model, post, test_set.x, 20, RngStream(SEED, 9))
    p_far = predict_mc(model, post, far, 20, RngStream(SEED, 9))
    print(f"{name:5s} acc={np.mean(p_test.argmax(1) == test_set.y):.3f} "
          f"nll={nll(p_test, test_set.y):.3f} ece={ece(p_test, test_set.y):.3f} "
          f"entropy test={predictive_entropy(p_test).mean():.3f} far={predictive_entropy(p_far).mean():.3f}")
