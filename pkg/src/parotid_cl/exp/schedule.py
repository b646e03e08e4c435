import math

from ..errors import ScheduleError


def cosine_lr(i: int, m: int, lr_max: float) -> float:
    """Half-cycle cosine decay: ``lr_max * (1 + cos(i/m * pi)) / 2`` for epoch i of m."""
    if m < 1:
        raise ScheduleError(f"total epochs must be >= 1, got {m}")
    if not 0 <= i <= m:
        raise ScheduleError(f"epoch index {i} outside [0, {m}]")
    return lr_max * (1 + math.cos(i / m * math.pi)) / 2


def set_lr(optimizer, lr: float):
    for g in optimizer.param_groups:
        g["lr"] = lr
