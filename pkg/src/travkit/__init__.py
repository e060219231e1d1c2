"""Self-supervised continual traversability estimation on synthetic worlds.

Pipeline: a synthetic terrain world emits multimodal sensor streams; a small
VAE turns them into traversability scores; the scores supervise a visual
head over a patch-feature backbone stand-in with an alignment loss and
farthest-point-sampled feature replay; predictions fuse into a 2.5D
elevation map consumed by a terrain-aware A* planner; a metric suite
evaluates the whole loop.
"""

__version__ = "0.1.0"
