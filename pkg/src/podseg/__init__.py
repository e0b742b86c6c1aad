"""podseg: dense point-cloud semantic and instance segmentation of podding
rapeseed plants, with a synthetic labeled-plant generator and metric suite."""

__version__ = "0.1.0"
