"""Language-based potential shaping (LEARN) on a desk-scale gridworld."""

__version__ = "0.1.0"
