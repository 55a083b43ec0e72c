"""Context-aware neural slot tagging for task-oriented dialogue."""

__version__ = "0.1.0"
