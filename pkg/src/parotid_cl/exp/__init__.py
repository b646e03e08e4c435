from .schedule import cosine_lr

__all__ = ["cosine_lr"]
