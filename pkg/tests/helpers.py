import numpy as np

import flowdistill as fd


def rand_model(d=1, H=12, R=2, seed=0, scale=0.4):
    """Model with every tensor randomized (including the zero-initialized
    output layer) so gradients are generic at the test point."""
    rng = np.random.default_rng(seed + 1000)
    model = fd.build_velocity_model(d, H, R, seed)
    return model.with_params(model.params.map(lambda t: t + rng.normal(0, scale, t.shape)))
