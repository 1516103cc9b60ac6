import numpy as np

from sar.model import SarParams


def random_params(hp, num_users, num_items, seed, spread=1.0):
    rng = np.random.default_rng(seed)
    F, C, R = hp.num_features, hp.num_categories, hp.rating_max
    return SarParams(
        user_logits=rng.normal(0, spread, (num_users, F, C)),
        item_logits=rng.normal(0, spread, (num_items, F, C)),
        tau=rng.uniform(-0.5, 1.5, (R, C, C, F)),
        omega_u=rng.normal(1, 0.5, num_users),
        omega_t=rng.normal(1, 0.5, num_items),
    )


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES: list[str] = []
