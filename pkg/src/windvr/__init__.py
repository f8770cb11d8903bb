"""One-step windowed-attention video restoration at desk scale."""

from ._alloc import tune_allocator

tune_allocator()

__version__ = "0.1.0"
