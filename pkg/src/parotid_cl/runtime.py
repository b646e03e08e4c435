import logging
import random

import numpy as np
import torch

log = logging.getLogger("parotid_cl")


def deterministic(seed: int, threads: int | None = 1):
    """Seed every RNG and (by default) pin torch to one thread for bit-reproducible runs."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if threads:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True, warn_only=True)


def to_tensor(batch) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(batch) if isinstance(batch, list) else batch))
