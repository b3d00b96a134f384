from .compare import handle_compare
from .evaluate import handle_eval
from .tune import handle_tune

__all__ = [
    "handle_compare",
    "handle_eval",
    "handle_tune",
]
