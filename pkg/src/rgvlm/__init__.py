"""Dense reward relabelling of offline trajectories with a vision-language
annotator, and language-conditioned implicit Q-learning on the result."""

__version__ = "0.1.0"
